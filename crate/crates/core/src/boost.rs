//! Boosting loops.
//!
//! Plain iterations (MART and Robust LogitBoost) fit one tree per class on
//! the classical responses `r - p` with weights `p(1-p)` and scale leaf
//! values by `(K-1)/K`. ABC iterations pick a base class `b`, fit `K-1`
//! trees on the responses `(r_k - p_k) - (r_b - p_b)` and then set
//! `F_b = -sum_{k != b} F_k`.
//!
//! Which base class is used follows the `(s, g, w)` schedule:
//!
//! * the first `w` iterations are plain warm-up iterations,
//! * after that, every `(g+1)`-th iteration is a search iteration which tries
//!   the `s` classes with the largest previous per-class loss and commits the
//!   one with the smallest resulting training loss,
//! * the remaining iterations reuse the previous base class.
//!
//! `s = K, g = 0, w = 0` is the exhaustive search; `s = 1, g = 0, w = 0` is
//! the worst-class rule.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinnedDataset, DEFAULT_MAX_BINS};
use crate::error::{Error, Result};
use crate::logit::{self, argmax, recenter_rows, ClassLosses, ScoreMatrix};
use crate::tree::{Responses, SplitCriterion, Tree, TreeGrower, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mart,
    RobustLogit,
    AbcMart,
    AbcRobustLogit,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Mart,
        Method::RobustLogit,
        Method::AbcMart,
        Method::AbcRobustLogit,
    ];

    pub fn is_abc(self) -> bool {
        matches!(self, Method::AbcMart | Method::AbcRobustLogit)
    }

    pub fn criterion(self) -> SplitCriterion {
        match self {
            Method::Mart | Method::AbcMart => SplitCriterion::MartFirstOrder,
            Method::RobustLogit => SplitCriterion::RobustSecondOrder,
            Method::AbcRobustLogit => SplitCriterion::AbcSecondOrder,
        }
    }

    /// Plain method used for warm-up iterations.
    pub fn warmup_method(self) -> Method {
        match self {
            Method::Mart | Method::AbcMart => Method::Mart,
            Method::RobustLogit | Method::AbcRobustLogit => Method::RobustLogit,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Mart => "mart",
            Method::RobustLogit => "robustlogit",
            Method::AbcMart => "abcmart",
            Method::AbcRobustLogit => "abcrobustlogit",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostConfig {
    pub method: Method,
    /// Leaves per tree (`J`).
    pub max_leaves: usize,
    /// Shrinkage (`nu`).
    pub shrinkage: f64,
    /// Boosting iterations (`M`).
    pub iterations: usize,
    /// Candidate base classes per search iteration (`s`).
    pub search_width: usize,
    /// Iterations between searches (`g`).
    pub gap: usize,
    /// Plain warm-up iterations before ABC starts (`w`).
    pub warmup: usize,
    pub max_bins: usize,
    /// Fewest training samples per leaf.
    pub min_leaf: usize,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            method: Method::AbcRobustLogit,
            max_leaves: 20,
            shrinkage: 0.1,
            iterations: 100,
            search_width: 2,
            gap: 10,
            warmup: 0,
            max_bins: DEFAULT_MAX_BINS,
            min_leaf: 1,
        }
    }
}

impl BoostConfig {
    pub fn new(method: Method) -> Self {
        BoostConfig {
            method,
            ..Default::default()
        }
    }

    /// Check the configuration against the number of classes in the data.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 classes, found {num_classes}"
            )));
        }
        if self.max_leaves < 2 {
            return Err(Error::Config(format!("J must be at least 2, got {}", self.max_leaves)));
        }
        if self.min_leaf == 0 {
            return Err(Error::Config("min_leaf must be at least 1".to_string()));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::Config(format!("nu must be in (0, 1], got {}", self.shrinkage)));
        }
        if self.method.is_abc() {
            if num_classes < 3 {
                return Err(Error::Config(format!(
                    "{} needs at least 3 classes, found {num_classes}; use mart or robustlogit for binary problems",
                    self.method
                )));
            }
            if self.search_width == 0 || self.search_width > num_classes {
                return Err(Error::Config(format!(
                    "s must be in 1..={num_classes}, got {}",
                    self.search_width
                )));
            }
            if self.iterations > 0 && self.warmup >= self.iterations {
                return Err(Error::Config(format!(
                    "w ({}) must be smaller than M ({})",
                    self.warmup, self.iterations
                )));
            }
        }
        Ok(())
    }

    /// Exact tree count implied by the schedule, counting every candidate
    /// tree fitted during searches.
    pub fn expected_tree_count(&self, num_classes: usize) -> usize {
        let k = num_classes;
        if !self.method.is_abc() {
            return k * self.iterations;
        }
        let warmup = self.warmup.min(self.iterations);
        let abc = self.iterations - warmup;
        let searches = abc.div_ceil(self.gap + 1);
        let reuses = abc - searches;
        k * warmup + self.search_width * (k - 1) * searches + (k - 1) * reuses
    }
}

/// What one iteration does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    /// Plain MART / Robust LogitBoost step (non-ABC methods and warm-up).
    Plain,
    /// Try each candidate as the base class and keep the best.
    Search(Vec<usize>),
    /// Reuse the previous base class.
    Reuse(usize),
}

impl Selection {
    pub fn candidates(&self) -> &[usize] {
        match self {
            Selection::Plain => &[],
            Selection::Search(c) => c,
            Selection::Reuse(b) => std::slice::from_ref(b),
        }
    }
}

/// Base-class bookkeeping carried between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorState {
    /// Per-class losses after the previous iteration.
    pub prev_losses: Vec<f64>,
    pub last_base: Option<usize>,
}

impl SelectorState {
    /// Starts from the per-class sample counts.
    pub fn new(class_counts: &[usize]) -> Self {
        SelectorState {
            prev_losses: class_counts.iter().map(|&c| c as f64).collect(),
            last_base: None,
        }
    }
}

/// The `s` classes with the largest losses, ties to the smaller class id.
pub fn worst_classes(losses: &[f64], s: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order.truncate(s);
    order
}

/// Decide iteration `m` (1-based).
pub fn select_candidates(state: &SelectorState, config: &BoostConfig, m: usize) -> Selection {
    debug_assert!(m >= 1);
    if !config.method.is_abc() || m <= config.warmup {
        return Selection::Plain;
    }
    let since = m - config.warmup - 1;
    match state.last_base {
        Some(b) if !since.is_multiple_of(config.gap + 1) => Selection::Reuse(b),
        _ => Selection::Search(worst_classes(&state.prev_losses, config.search_width)),
    }
}

/// Trees added by one iteration. ABC groups hold `K-1` trees ordered by
/// class id with the base class skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationGroup {
    pub base_class: Option<usize>,
    pub trees: Vec<Tree>,
}

/// Trained trees without the binning and label metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub method: Method,
    pub num_classes: usize,
    pub shrinkage: f64,
    pub max_leaves: usize,
    pub warmup: usize,
    pub groups: Vec<IterationGroup>,
}

/// Replays iteration groups on one row of scores.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RowReplay {
    plain_seen: bool,
}

impl RowReplay {
    /// Apply `group` to `scores` for the binned `row`. The first ABC group
    /// after plain groups first projects the row onto sum-to-zero.
    #[inline]
    pub(crate) fn apply(&mut self, group: &IterationGroup, shrinkage: f64, row: &[u16], scores: &mut [f64]) {
        match group.base_class {
            None => {
                self.plain_seen = true;
                for (f, tree) in scores.iter_mut().zip(&group.trees) {
                    *f += shrinkage * tree.predict(row);
                }
            }
            Some(base) => {
                if self.plain_seen {
                    recenter_rows(scores, scores.len());
                    self.plain_seen = false;
                }
                let mut trees = group.trees.iter();
                for (k, f) in scores.iter_mut().enumerate() {
                    if k != base {
                        *f += shrinkage * trees.next().expect("K-1 trees").predict(row);
                    }
                }
                set_base_score(scores, base);
            }
        }
    }
}

#[inline]
fn set_base_score(row: &mut [f64], base: usize) {
    let mut sum = 0.0;
    for (k, &f) in row.iter().enumerate() {
        if k != base {
            sum += f;
        }
    }
    row[base] = -sum;
}

/// Log line for one boosting iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub base_class: Option<usize>,
    pub searched: bool,
    pub candidates: Vec<usize>,
    /// Training loss obtained with each candidate, aligned with `candidates`.
    pub candidate_losses: Vec<f64>,
    pub train_loss: f64,
    pub class_losses: Vec<f64>,
    pub trees_trained: usize,
    pub test_errors: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Training {
    pub ensemble: Ensemble,
    pub records: Vec<IterationRecord>,
    /// Final training scores and probabilities.
    pub scores: ScoreMatrix,
    /// Set when training stopped before `M` iterations.
    pub halted: Option<String>,
}

impl Training {
    pub fn trees_trained(&self) -> usize {
        self.records.iter().map(|r| r.trees_trained).sum()
    }
}

/// Per-iteration records of a finished training run.
pub fn loss_trace(training: &Training) -> &[IterationRecord] {
    &training.records
}

pub fn train(config: &BoostConfig, data: &BinnedDataset) -> Result<Training> {
    train_with(config, data, None, |_, _| {})
}

/// MART or Robust LogitBoost.
pub fn train_plain(config: &BoostConfig, data: &BinnedDataset) -> Result<Training> {
    if config.method.is_abc() {
        return Err(Error::Config(format!("{} is not a plain method", config.method)));
    }
    train(config, data)
}

/// ABC-MART or ABC-RobustLogitBoost with the `(s, g, w)` schedule.
pub fn train_abc(config: &BoostConfig, data: &BinnedDataset) -> Result<Training> {
    if !config.method.is_abc() {
        return Err(Error::Config(format!("{} is not an ABC method", config.method)));
    }
    train(config, data)
}

/// Train, optionally tracking misclassifications on `eval` and reporting
/// every iteration to `observer` together with the current training scores.
pub fn train_with<F>(
    config: &BoostConfig,
    data: &BinnedDataset,
    eval: Option<&BinnedDataset>,
    mut observer: F,
) -> Result<Training>
where
    F: FnMut(&IterationRecord, &Progress),
{
    let k = data.num_classes();
    config.validate(k)?;
    if data.n_samples() == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(eval) = eval {
        if eval.n_features() != data.n_features() {
            return Err(Error::FeatureMismatch {
                expected: data.n_features(),
                found: eval.n_features(),
            });
        }
        if eval.num_classes() != k {
            return Err(Error::Config(format!(
                "evaluation data has {} classes, training data {k}",
                eval.num_classes()
            )));
        }
    }

    let mut engine = Engine {
        config,
        data,
        k,
        cols: Columns::zeros(data.n_samples(), k),
        eval: eval.map(|e| EvalState {
            data: e,
            scores: vec![0.0; e.n_samples() * k],
            replay: vec![RowReplay::default(); e.n_samples()],
        }),
        plain_seen: false,
    };
    let mut selector = SelectorState::new(&data.class_counts());
    let mut groups = Vec::with_capacity(config.iterations);
    let mut records = Vec::with_capacity(config.iterations);
    let mut halted = None;

    for m in 1..=config.iterations {
        let selection = select_candidates(&selector, config, m);
        let step = match &selection {
            Selection::Plain => engine.plain_step(),
            Selection::Search(c) => engine.abc_step(c),
            Selection::Reuse(b) => engine.abc_step(std::slice::from_ref(b)),
        };
        let step = match step {
            Ok(step) => step,
            Err(reason) => {
                halted = Some(format!("iteration {m}: {reason}"));
                break;
            }
        };
        let test_errors = engine.apply_eval(&step.group);
        let losses = engine.cols.losses(data.labels());
        let record = IterationRecord {
            iteration: m,
            base_class: step.group.base_class,
            searched: matches!(selection, Selection::Search(_)),
            candidates: selection.candidates().to_vec(),
            candidate_losses: step.candidate_losses,
            train_loss: losses.total,
            class_losses: losses.per_class.clone(),
            trees_trained: step.trees_trained,
            test_errors,
        };
        selector.prev_losses = losses.per_class;
        if let Some(b) = step.group.base_class {
            selector.last_base = Some(b);
        }
        observer(&record, &Progress { cols: &engine.cols });
        records.push(record);
        groups.push(step.group);
    }

    Ok(Training {
        ensemble: Ensemble {
            method: config.method,
            num_classes: k,
            shrinkage: config.shrinkage,
            max_leaves: config.max_leaves,
            warmup: config.warmup,
            groups,
        },
        records,
        scores: engine.cols.to_matrix(),
        halted,
    })
}

/// Training state handed to the observer of [`train_with`].
pub struct Progress<'a> {
    cols: &'a Columns,
}

impl Progress<'_> {
    /// Current training scores and probabilities.
    pub fn scores(&self) -> ScoreMatrix {
        self.cols.to_matrix()
    }
}

/// Class-major scores and probabilities: entry `(i, c)` is at `c * n + i`.
/// Row operations gather into a small buffer and apply the same arithmetic
/// as the row-major replay path.
#[derive(Clone)]
struct Columns {
    n: usize,
    k: usize,
    f: Vec<f64>,
    p: Vec<f64>,
}

impl Columns {
    fn zeros(n: usize, k: usize) -> Self {
        let mut cols = Columns {
            n,
            k,
            f: vec![0.0; n * k],
            p: vec![0.0; n * k],
        };
        cols.refresh_probs();
        cols
    }

    #[inline]
    fn gather(values: &[f64], n: usize, i: usize, row: &mut [f64]) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = values[c * n + i];
        }
    }

    #[inline]
    fn scatter(values: &mut [f64], n: usize, i: usize, row: &[f64]) {
        for (c, &v) in row.iter().enumerate() {
            values[c * n + i] = v;
        }
    }

    fn refresh_probs(&mut self) {
        let (n, k) = (self.n, self.k);
        let mut row = vec![0.0; k];
        let mut q = vec![0.0; k];
        for i in 0..n {
            Self::gather(&self.f, n, i, &mut row);
            logit::softmax_into(&row, &mut q);
            Self::scatter(&mut self.p, n, i, &q);
        }
    }

    fn recenter(&mut self) {
        let (n, k) = (self.n, self.k);
        let mut row = vec![0.0; k];
        for i in 0..n {
            Self::gather(&self.f, n, i, &mut row);
            recenter_rows(&mut row, k);
            Self::scatter(&mut self.f, n, i, &row);
        }
        self.refresh_probs();
    }

    fn prob_col(&self, c: usize) -> &[f64] {
        &self.p[c * self.n..(c + 1) * self.n]
    }

    fn losses(&self, labels: &[u32]) -> ClassLosses {
        let mut per_class = vec![0.0; self.k];
        for (i, &y) in labels.iter().enumerate() {
            per_class[y as usize] += logit::neg_log(self.p[y as usize * self.n + i]);
        }
        let total = per_class.iter().sum();
        ClassLosses { per_class, total }
    }

    fn to_matrix(&self) -> ScoreMatrix {
        let (n, k) = (self.n, self.k);
        let mut scores = vec![0.0; n * k];
        for (i, row) in scores.chunks_exact_mut(k).enumerate() {
            Self::gather(&self.f, n, i, row);
        }
        ScoreMatrix::from_scores(scores, k)
    }
}

struct EvalState<'a> {
    data: &'a BinnedDataset,
    scores: Vec<f64>,
    replay: Vec<RowReplay>,
}

struct Engine<'a> {
    config: &'a BoostConfig,
    data: &'a BinnedDataset,
    k: usize,
    cols: Columns,
    eval: Option<EvalState<'a>>,
    plain_seen: bool,
}

struct Step {
    group: IterationGroup,
    candidate_losses: Vec<f64>,
    trees_trained: usize,
}

struct CandidateResult {
    base: usize,
    loss: f64,
    trees: Vec<Tree>,
    scores: Vec<f64>,
}

impl Engine<'_> {
    fn tree_params(&self, criterion: SplitCriterion, leaf_scale: f64) -> TreeParams {
        TreeParams::new(self.config.max_leaves, criterion)
            .with_leaf_scale(leaf_scale)
            .with_min_leaf(self.config.min_leaf)
    }

    /// Fit one tree for every class in `classes` (ascending) and add
    /// `nu * tree(x_i)` to that class's column of `scores`, in parallel
    /// over classes.
    fn fit_into<R>(&self, classes: &[usize], params: &TreeParams, scores: &mut [f64], responses: R) -> Result<Vec<Tree>>
    where
        R: Fn(usize, &mut Responses) + Sync,
    {
        let n = self.data.n_samples();
        let nu = self.config.shrinkage;
        let mut targets: Vec<(usize, &mut [f64])> = scores
            .chunks_exact_mut(n)
            .enumerate()
            .filter(|(c, _)| classes.binary_search(c).is_ok())
            .collect();
        targets
            .par_iter_mut()
            .map_init(
                || (TreeGrower::new(self.data), Responses::with_len(n)),
                |(grower, buf), (c, col)| {
                    responses(*c, buf);
                    let tree = grower.grow(buf, params)?;
                    for (value, members) in grower.leaf_members() {
                        for &i in members {
                            col[i as usize] += nu * value;
                        }
                    }
                    Ok(tree)
                },
            )
            .collect()
    }

    fn plain_step(&mut self) -> Result<Step, String> {
        let k = self.k;
        let method = self.config.method.warmup_method();
        let params = self.tree_params(method.criterion(), (k - 1) as f64 / k as f64);
        let labels = self.data.labels();
        let classes: Vec<usize> = (0..k).collect();
        let mut next = self.cols.f.clone();
        let cols = &self.cols;
        let trees = self
            .fit_into(&classes, &params, &mut next, |c, buf| {
                let p = cols.prob_col(c);
                for i in 0..labels.len() {
                    let r = if labels[i] as usize == c { 1.0 } else { 0.0 };
                    buf.numer[i] = r - p[i];
                    buf.weight[i] = p[i] * (1.0 - p[i]);
                }
            })
            .map_err(|e| e.to_string())?;
        if next.iter().any(|f| !f.is_finite()) {
            return Err("scores became non-finite".into());
        }
        self.cols.f = next;
        self.cols.refresh_probs();
        self.plain_seen = true;
        Ok(Step {
            group: IterationGroup {
                base_class: None,
                trees,
            },
            candidate_losses: Vec::new(),
            trees_trained: k,
        })
    }

    fn abc_step(&mut self, candidates: &[usize]) -> Result<Step, String> {
        if self.plain_seen {
            // leaving warm-up: restore the sum-to-zero constraint
            self.cols.recenter();
            self.plain_seen = false;
        }
        let results: Vec<Result<CandidateResult>> =
            candidates.par_iter().map(|&b| self.evaluate_candidate(b)).collect();
        let mut evaluated = Vec::with_capacity(results.len());
        for r in results {
            evaluated.push(r.map_err(|e| e.to_string())?);
        }
        let candidate_losses: Vec<f64> = evaluated.iter().map(|c| c.loss).collect();
        let trees_trained = evaluated.len() * (self.k - 1);

        // argmin over finite losses, ties to the smaller class id
        let best = evaluated
            .into_iter()
            .filter(|c| c.loss.is_finite())
            .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.base.cmp(&b.base)))
            .ok_or_else(|| "training loss diverged for every candidate base class".to_string())?;

        self.cols.f = best.scores;
        self.cols.refresh_probs();
        Ok(Step {
            group: IterationGroup {
                base_class: Some(best.base),
                trees: best.trees,
            },
            candidate_losses,
            trees_trained,
        })
    }

    fn evaluate_candidate(&self, base: usize) -> Result<CandidateResult> {
        let (n, k) = (self.cols.n, self.k);
        let labels = self.data.labels();
        let classes: Vec<usize> = (0..k).filter(|&c| c != base).collect();
        let params = self.tree_params(self.config.method.criterion(), 1.0);
        let mut scores = self.cols.f.clone();
        let pb = self.cols.prob_col(base);
        let trees = self.fit_into(&classes, &params, &mut scores, |c, buf| {
            let pk = self.cols.prob_col(c);
            for i in 0..n {
                let y = labels[i] as usize;
                let rk = if y == c { 1.0 } else { 0.0 };
                let rb = if y == base { 1.0 } else { 0.0 };
                let (g, h) = logit::abc_derivs_from(pk[i], pb[i], rk, rb);
                buf.numer[i] = -g;
                buf.weight[i] = h;
            }
        })?;

        let mut row = vec![0.0; k];
        let mut q = vec![0.0; k];
        // accumulated per class like `Columns::losses`, so the committed
        // candidate's loss is reproduced exactly
        let mut per_class = vec![0.0; k];
        let mut finite = true;
        for (i, &y) in labels.iter().enumerate() {
            Columns::gather(&scores, n, i, &mut row);
            set_base_score(&mut row, base);
            scores[base * n + i] = row[base];
            finite &= row.iter().all(|f| f.is_finite());
            logit::softmax_into(&row, &mut q);
            per_class[y as usize] += logit::neg_log(q[y as usize]);
        }
        let loss = if finite { per_class.iter().sum() } else { f64::NAN };
        Ok(CandidateResult {
            base,
            loss,
            trees,
            scores,
        })
    }

    /// Apply a committed group to the evaluation rows; returns the number of
    /// misclassified evaluation samples.
    fn apply_eval(&mut self, group: &IterationGroup) -> Option<usize> {
        let k = self.k;
        let nu = self.config.shrinkage;
        let eval = self.eval.as_mut()?;
        let mut errors = 0;
        for (i, (scores, replay)) in eval.scores.chunks_exact_mut(k).zip(&mut eval.replay).enumerate() {
            replay.apply(group, nu, eval.data.row(i), scores);
            if argmax(scores) != eval.data.labels()[i] as usize {
                errors += 1;
            }
        }
        Some(errors)
    }
}
