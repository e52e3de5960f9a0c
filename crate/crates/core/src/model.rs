//! Trained ensembles on disk, prediction and evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boost::{Ensemble, IterationGroup, Method, RowReplay};
use crate::data::{BinMap, RawDataset};
use crate::error::{Error, Result};
use crate::logit::{argmax, neg_log, softmax_into};

pub const MODEL_VERSION: u32 = 1;

/// A trained ensemble together with everything needed to score raw rows.
///
/// Serialized as JSON with a fixed field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub version: u32,
    pub method: Method,
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub nu: f64,
    #[serde(rename = "J")]
    pub max_leaves: usize,
    /// Iterations actually trained.
    #[serde(rename = "M")]
    pub iterations_trained: usize,
    pub w: usize,
    /// Raw label value of each class id.
    pub classes: Vec<i64>,
    pub bin_map: BinMap,
    pub iterations: Vec<IterationGroup>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

impl EnsembleModel {
    pub fn new(ensemble: Ensemble, bin_map: BinMap, classes: Vec<i64>) -> Result<Self> {
        let model = EnsembleModel {
            version: MODEL_VERSION,
            method: ensemble.method,
            num_classes: ensemble.num_classes,
            nu: ensemble.shrinkage,
            max_leaves: ensemble.max_leaves,
            iterations_trained: ensemble.groups.len(),
            w: ensemble.warmup,
            classes,
            bin_map,
            iterations: ensemble.groups,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn n_features(&self) -> usize {
        self.bin_map.n_features()
    }

    /// Base class of every iteration (`None` for plain iterations).
    pub fn base_class_trace(&self) -> Vec<Option<usize>> {
        self.iterations.iter().map(|g| g.base_class).collect()
    }

    pub fn tree_count(&self) -> usize {
        self.iterations.iter().map(|g| g.trees.len()).sum()
    }

    /// The same model cut back to its first `m` iterations.
    pub fn truncated(&self, m: usize) -> EnsembleModel {
        let mut model = self.clone();
        model.iterations.truncate(m);
        model.iterations_trained = model.iterations.len();
        model
    }

    fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::Model(format!("K = {k}")));
        }
        if self.classes.len() != k {
            return Err(Error::Model(format!("{} class labels for K = {k}", self.classes.len())));
        }
        if self.iterations_trained != self.iterations.len() {
            return Err(Error::Model(format!(
                "M = {} but {} iterations stored",
                self.iterations_trained,
                self.iterations.len()
            )));
        }
        self.bin_map.validate()?;
        for (m, group) in self.iterations.iter().enumerate() {
            let expected = match group.base_class {
                None => k,
                Some(b) if b < k => k - 1,
                Some(b) => return Err(Error::Model(format!("iteration {}: base class {b}", m + 1))),
            };
            if group.trees.len() != expected {
                return Err(Error::Model(format!(
                    "iteration {}: expected {expected} trees, found {}",
                    m + 1,
                    group.trees.len()
                )));
            }
            for tree in &group.trees {
                tree.validate(self.n_features())?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: probe.version,
                expected: MODEL_VERSION,
            });
        }
        let model: EnsembleModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Scores for rows that are already binned with this model's bin map.
    pub fn predict_binned(&self, bins: &[u16]) -> Predictions {
        let k = self.num_classes;
        let nf = self.n_features();
        let n = bins.len().checked_div(nf).unwrap_or(0);
        let mut scores = vec![0.0; n * k];
        for (i, row_scores) in scores.chunks_exact_mut(k).enumerate() {
            let row = &bins[i * nf..(i + 1) * nf];
            let mut replay = RowReplay::default();
            for group in &self.iterations {
                replay.apply(group, self.nu, row, row_scores);
            }
        }
        Predictions::from_scores(scores, k)
    }

    /// Scores for row-major raw feature rows.
    pub fn predict(&self, features: &[f64], n_features: usize) -> Result<Predictions> {
        let bins = self.bin_map.bin_rows(features, n_features)?;
        if n_features == 0 {
            return Ok(Predictions::from_scores(Vec::new(), self.num_classes));
        }
        Ok(self.predict_binned(&bins))
    }

    pub fn predict_dataset(&self, data: &RawDataset) -> Result<Predictions> {
        self.predict(data.features(), data.n_features())
    }
}

/// Per-row scores `F`, probabilities and argmax labels (class ids).
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub num_classes: usize,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Predictions {
    fn from_scores(scores: Vec<f64>, k: usize) -> Self {
        let mut probs = vec![0.0; scores.len()];
        let mut labels = Vec::with_capacity(scores.len() / k);
        for (f, p) in scores.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
            softmax_into(f, p);
            labels.push(argmax(f));
        }
        Predictions {
            num_classes: k,
            scores,
            probs,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn score_row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_test: usize,
    pub misclassified: usize,
    pub error_rate: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub log_loss: f64,
}

impl EvalReport {
    pub fn from_predictions(predictions: &Predictions, labels: &[u32]) -> Self {
        let k = predictions.num_classes;
        let mut confusion = vec![vec![0; k]; k];
        let mut log_loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let y = y as usize;
            confusion[y][predictions.labels[i]] += 1;
            log_loss += neg_log(predictions.prob_row(i)[y]);
        }
        let n_test = labels.len();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let misclassified = n_test - correct;
        EvalReport {
            n_test,
            misclassified,
            error_rate: if n_test == 0 {
                0.0
            } else {
                misclassified as f64 / n_test as f64
            },
            confusion,
            log_loss,
        }
    }

    /// `errors=<n> rate=<r> logloss=<l>`
    pub fn summary_line(&self) -> String {
        format!(
            "errors={} rate={} logloss={}",
            self.misclassified, self.error_rate, self.log_loss
        )
    }
}

/// Score labeled data; labels are mapped through the model's classes.
pub fn evaluate(model: &EnsembleModel, data: &RawDataset) -> Result<EvalReport> {
    let labels = data.labels_for(&model.classes)?;
    let predictions = model.predict_dataset(data)?;
    Ok(EvalReport::from_predictions(&predictions, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Tree;

    fn bin_map() -> BinMap {
        BinMap {
            max_bins: 256,
            boundaries: vec![vec![0.0, 1.0]],
        }
    }

    fn empty_model(k: usize) -> EnsembleModel {
        let ensemble = Ensemble {
            method: Method::RobustLogit,
            num_classes: k,
            shrinkage: 0.1,
            max_leaves: 20,
            warmup: 0,
            groups: Vec::new(),
        };
        EnsembleModel::new(ensemble, bin_map(), (0..k as i64).collect()).unwrap()
    }

    #[test]
    fn empty_ensemble_predicts_uniform() {
        let model = empty_model(4);
        let pred = model.predict(&[0.3, -2.0, 7.0], 1).unwrap();
        assert_eq!(pred.labels, vec![0, 0, 0]);
        assert!(pred.scores.iter().all(|&f| f == 0.0));
        assert!(pred.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn chance_level_on_balanced_data() {
        let model = empty_model(4);
        let data = RawDataset::from_rows(vec![0.0; 8], 1, vec![0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        let report = evaluate(&model, &data).unwrap();
        assert_eq!(report.misclassified, 6);
        assert!((report.error_rate - 0.75).abs() < 1e-15);
        assert!((report.log_loss - 8.0 * 4f64.ln()).abs() < 1e-12);
        let off_diagonal: usize = (0..4)
            .flat_map(|a| (0..4).map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
            .map(|(a, b)| report.confusion[a][b])
            .sum();
        assert_eq!(off_diagonal, report.misclassified);
        assert_eq!(report.summary_line(), format!("errors=6 rate=0.75 logloss={}", report.log_loss));
    }

    #[test]
    fn version_guard() {
        let mut model = empty_model(3);
        model.version = 99;
        let text = serde_json::to_string(&model).unwrap();
        assert!(matches!(
            EnsembleModel::from_json(&text),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn field_order_is_fixed() {
        let text = empty_model(3).to_json().unwrap();
        let keys = ["\"version\"", "\"method\"", "\"K\"", "\"nu\"", "\"J\"", "\"M\"", "\"w\"", "\"classes\"", "\"bin_map\"", "\"iterations\""];
        let positions: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{text}");
    }

    #[test]
    fn rejects_inconsistent_groups() {
        let mut model = empty_model(3);
        model.iterations.push(IterationGroup {
            base_class: Some(0),
            trees: vec![Tree::leaf(0.0, 1); 3],
        });
        model.iterations_trained = 1;
        let text = serde_json::to_string(&model).unwrap();
        assert!(matches!(EnsembleModel::from_json(&text), Err(Error::Model(_))));
        model.iterations[0].trees.pop();
        let text = serde_json::to_string(&model).unwrap();
        assert!(EnsembleModel::from_json(&text).is_ok());
    }

    #[test]
    fn feature_mismatch_on_predict() {
        let model = empty_model(3);
        assert!(matches!(model.predict(&[1.0, 2.0], 2), Err(Error::FeatureMismatch { .. })));
    }

    #[test]
    fn node_json_shapes() {
        let tree = Tree {
            nodes: vec![
                crate::tree::Node::Split {
                    feature: 0,
                    threshold_bin: 3,
                    left: 1,
                    right: 2,
                },
                crate::tree::Node::Leaf {
                    leaf_value: -0.5,
                    count: 4,
                },
                crate::tree::Node::Leaf {
                    leaf_value: 0.25,
                    count: 6,
                },
            ],
        };
        let text = serde_json::to_string(&tree).unwrap();
        assert_eq!(
            text,
            r#"{"nodes":[{"feature":0,"threshold_bin":3,"left":1,"right":2},{"leaf_value":-0.5,"count":4},{"leaf_value":0.25,"count":6}]}"#
        );
        assert_eq!(serde_json::from_str::<Tree>(&text).unwrap(), tree);
    }
}
