use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn abcboost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abcboost"))
        .args(args)
        .env_remove("ABCBOOST_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Labels 10, 20, 30 on a 2-feature toy problem with some overlap.
fn write_data(dir: &Path, name: &str, n: usize, offset: usize) -> PathBuf {
    let mut text = String::new();
    for i in 0..n {
        let c = (i + offset) % 3;
        let jitter = ((i * 7 + offset) % 11) as f64 / 11.0;
        let x = c as f64 + 1.2 * jitter;
        let y = ((i * 13) % 17) as f64 / 17.0 + if c == 2 { 0.5 } else { 0.0 };
        text.push_str(&format!("{},{x},{y}\n", (c + 1) * 10));
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

struct Fixture {
    dir: TempDir,
    train: PathBuf,
    test: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let train = write_data(dir.path(), "train.csv", 90, 0);
        let test = write_data(dir.path(), "test.csv", 60, 1);
        Fixture { dir, train, test }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, model: &str, extra: &[&str]) -> Output {
        let model = self.path(model);
        let mut args = vec![
            "train",
            "--train",
            self.train.to_str().unwrap(),
            "--test",
            self.test.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        abcboost(&args)
    }
}

#[test]
fn train_writes_model_and_log() {
    let fx = Fixture::new();
    let out = fx.train("m.json", &["--method", "abcrobustlogit", "-M", "12", "-J", "4", "-s", "2", "-g", "3", "-w", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = fs::read_to_string(fx.path("m.log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,train_loss,test_errors,base_class,candidates,trees_trained");
    assert_eq!(lines.len(), 13);
    // warm-up rows have no base class
    assert!(lines[1].split(',').nth(3).unwrap().is_empty());
    assert!(!lines[3].split(',').nth(3).unwrap().is_empty());
    let trees: usize = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    // K=3, M=12, s=2, g=3, w=2: 3*2 + 2*2*3 + 2*7
    assert_eq!(trees, 32);
    let model = fs::read_to_string(fx.path("m.json")).unwrap();
    assert!(model.starts_with("{\"version\":1,\"method\":\"abcrobustlogit\""));
}

#[test]
fn zero_iterations_give_a_header_only_log() {
    let fx = Fixture::new();
    let out = fx.train("m0.json", &["--method", "mart", "-M", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = fs::read_to_string(fx.path("m0.log.csv")).unwrap();
    assert_eq!(log, "iter,train_loss,test_errors,base_class,candidates,trees_trained\n");
}

#[test]
fn missing_training_file_flag_is_a_usage_error() {
    let out = abcboost(&["train", "--model", "x.json"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--train"));
}

#[test]
fn bad_parameters_are_rejected() {
    let fx = Fixture::new();
    for extra in [&["-J", "1"][..], &["-v", "0"], &["--min-leaf", "0"], &["--method", "abcmart", "-s", "4"], &["--method", "nope"]] {
        let out = fx.train("bad.json", extra);
        assert!(!out.status.success(), "{extra:?}");
        assert!(!fx.path("bad.json").exists());
        assert!(!fx.path("bad.log.csv").exists());
    }
}

#[test]
fn predict_writes_label_and_probabilities() {
    let fx = Fixture::new();
    assert!(fx.train("p.json", &["--method", "robustlogit", "-M", "20", "-J", "4"]).status.success());
    let model = fx.path("p.json");
    let out = abcboost(&["predict", "--model", model.to_str().unwrap(), "--input", fx.train.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 90);
    for row in &rows {
        assert_eq!(row.len(), 4);
        assert!([10.0, 20.0, 30.0].contains(&row[0]));
        assert!((row[1..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let output = fx.path("pred.csv");
    let out = abcboost(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--input",
        fx.train.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(output).unwrap(), text);
}

#[test]
fn predict_handles_empty_input_and_bad_models() {
    let fx = Fixture::new();
    assert!(fx.train("e.json", &["--method", "mart", "-M", "3"]).status.success());
    let empty = fx.path("empty.csv");
    fs::write(&empty, "").unwrap();
    let model = fx.path("e.json");
    let out = abcboost(&["predict", "--model", model.to_str().unwrap(), "--input", empty.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());

    let broken = fx.path("broken.json");
    let text = fs::read_to_string(&model).unwrap();
    fs::write(&broken, &text[..text.len() / 2]).unwrap();
    let out = abcboost(&["predict", "--model", broken.to_str().unwrap(), "--input", fx.test.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"));

    let wrong_width = fx.path("wide.csv");
    fs::write(&wrong_width, "10,1,2,3\n").unwrap();
    let out = abcboost(&["predict", "--model", model.to_str().unwrap(), "--input", wrong_width.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn eval_matches_the_last_logged_test_errors() {
    let fx = Fixture::new();
    let out = fx.train("v.json", &["--method", "abcmart", "-M", "15", "-J", "4", "-s", "3", "-g", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = fs::read_to_string(fx.path("v.log.csv")).unwrap();
    let logged: usize = log.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();

    let model = fx.path("v.json");
    let out = abcboost(&["eval", "--model", model.to_str().unwrap(), "--test", fx.test.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let summary = text.lines().last().unwrap();
    assert!(summary.starts_with(&format!("errors={logged} rate=")), "{summary}");
    assert!(summary.contains(" logloss="));
}

#[test]
fn eval_rejects_unknown_labels_and_missing_models() {
    let fx = Fixture::new();
    assert!(fx.train("u.json", &["--method", "mart", "-M", "2"]).status.success());
    let strange = fx.path("strange.csv");
    fs::write(&strange, "99,0.5,0.5\n").unwrap();
    let model = fx.path("u.json");
    let out = abcboost(&["eval", "--model", model.to_str().unwrap(), "--test", strange.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("99"));

    let missing = fx.path("missing.json");
    let out = abcboost(&["eval", "--model", missing.to_str().unwrap(), "--test", fx.test.to_str().unwrap()]);
    assert!(!out.status.success());
    let out = abcboost(&["eval", "--test", fx.test.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn output_is_byte_identical_across_runs_and_thread_counts() {
    let fx = Fixture::new();
    let flags = ["--method", "abcrobustlogit", "-M", "10", "-J", "5", "-s", "3", "-g", "1", "-w", "1"];
    let mut outputs = Vec::new();
    for (name, threads) in [("a.json", "1"), ("b.json", "1"), ("c.json", "3")] {
        let mut extra = flags.to_vec();
        extra.extend_from_slice(&["--threads", threads]);
        assert!(fx.train(name, &extra).status.success());
        let model = fs::read(fx.path(name)).unwrap();
        let log = fs::read(fx.path(name).with_extension("log.csv")).unwrap();
        outputs.push((model, log));
    }
    assert!(outputs[0] == outputs[1]);
    assert!(outputs[0] == outputs[2]);

    // the environment variable is a fallback for --threads
    let out = Command::new(env!("CARGO_BIN_EXE_abcboost"))
        .args(["train", "--train", fx.train.to_str().unwrap(), "--model", fx.path("d.json").to_str().unwrap()])
        .args(flags)
        .env("ABCBOOST_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(fx.path("d.json")).unwrap(), outputs[0].0);
}

#[test]
fn libsvm_input_is_detected_by_extension() {
    let fx = Fixture::new();
    let svm = fx.path("train.svm");
    let csv = fs::read_to_string(&fx.train).unwrap();
    let converted: String = csv
        .lines()
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            format!("{} 1:{} 2:{}\n", v[0], v[1], v[2])
        })
        .collect();
    fs::write(&svm, converted).unwrap();
    let a = fx.path("csv.json");
    let b = fx.path("svm.json");
    for (input, model) in [(&fx.train, &a), (&svm, &b)] {
        let out = abcboost(&["train", "--method", "mart", "-M", "4", "--train", input.to_str().unwrap(), "--model", model.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}
