//! Histogram regression trees grown best-first to a fixed number of leaves.
//!
//! Each sample carries a numerator (the negative first derivative) and a
//! weight (the second derivative). For a candidate threshold `t` the split
//! gain is
//!
//! ```text
//! gain(t) = S_L^2 / D_L + S_R^2 / D_R - S^2 / D
//! ```
//!
//! where `S` sums numerators and `D` sums weights (second-order criteria) or
//! counts samples (first-order MART criterion). Samples with `bin <= t` go
//! left. Leaf values are Newton steps `scale * S / (damping + sum of weights)`.

use serde::{Deserialize, Serialize};

use crate::data::BinnedDataset;
use crate::error::{Error, Result};

pub const DEFAULT_DAMPING: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitCriterion {
    /// Numerators over sample counts.
    MartFirstOrder,
    /// Classical responses over `p(1-p)` weights.
    RobustSecondOrder,
    /// ABC responses over `p_b(1-p_b) + p_k(1-p_k) + 2 p_b p_k` weights.
    AbcSecondOrder,
}

impl SplitCriterion {
    #[inline]
    fn denominator(self, stat: &BinStat) -> f64 {
        match self {
            SplitCriterion::MartFirstOrder => stat.count as f64,
            SplitCriterion::RobustSecondOrder | SplitCriterion::AbcSecondOrder => stat.weight,
        }
    }

    #[inline]
    fn term(self, stat: &BinStat) -> f64 {
        let d = self.denominator(stat);
        if d > 0.0 {
            stat.numer * stat.numer / d
        } else {
            0.0
        }
    }
}

/// Aggregated responses of the samples falling into one histogram bin.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BinStat {
    pub numer: f64,
    pub weight: f64,
    pub count: u32,
}

impl BinStat {
    #[inline]
    fn add(&mut self, other: &BinStat) {
        self.numer += other.numer;
        self.weight += other.weight;
        self.count += other.count;
    }

    #[inline]
    fn minus(&self, other: &BinStat) -> BinStat {
        BinStat {
            numer: self.numer - other.numer,
            weight: self.weight - other.weight,
            count: self.count - other.count,
        }
    }
}

/// Gain of splitting `left + right` into its two halves.
#[inline]
pub fn split_gain(left: &BinStat, right: &BinStat, criterion: SplitCriterion) -> f64 {
    let mut total = *left;
    total.add(right);
    criterion.term(left) + criterion.term(right) - criterion.term(&total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanResult {
    /// Largest bin id routed left, or `None` when no threshold leaves both
    /// sides nonempty.
    pub threshold: Option<usize>,
    pub gain: f64,
    left: BinStat,
}

/// Best threshold over one feature's histogram, in a single left-to-right
/// pass. Ties keep the smaller threshold.
pub fn scan_gain(hist: &[BinStat], criterion: SplitCriterion) -> ScanResult {
    scan_gain_min(hist, criterion, 1)
}

/// As [`scan_gain`], considering only thresholds that leave at least
/// `min_leaf` samples on each side.
pub fn scan_gain_min(hist: &[BinStat], criterion: SplitCriterion, min_leaf: usize) -> ScanResult {
    let mut total = BinStat::default();
    for b in hist {
        total.add(b);
    }
    scan_with_total(hist, &total, criterion, min_leaf)
}

#[inline]
fn scan_with_total(hist: &[BinStat], total: &BinStat, criterion: SplitCriterion, min_leaf: usize) -> ScanResult {
    let min_leaf = u32::try_from(min_leaf.max(1)).unwrap_or(u32::MAX);
    let parent = criterion.term(total);
    let mut best = ScanResult {
        threshold: None,
        gain: 0.0,
        left: BinStat::default(),
    };
    let mut best_gain = f64::NEG_INFINITY;
    let mut left = BinStat::default();
    for (t, b) in hist.iter().enumerate().take(hist.len().saturating_sub(1)) {
        if b.count == 0 {
            continue;
        }
        left.add(b);
        if left.count < min_leaf {
            continue;
        }
        let right = total.minus(&left);
        if right.count < min_leaf {
            break;
        }
        let gain = criterion.term(&left) + criterion.term(&right) - parent;
        if gain > best_gain {
            best_gain = gain;
            best = ScanResult {
                threshold: Some(t),
                gain,
                left,
            };
        }
    }
    best
}

/// Per-sample numerators and weights a tree is fitted to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Responses {
    pub numer: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Responses {
    pub fn with_len(n: usize) -> Self {
        Responses {
            numer: vec![0.0; n],
            weight: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.numer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numer.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_leaves: usize,
    pub criterion: SplitCriterion,
    /// Multiplier on every leaf value, `(K-1)/K` for plain multi-class steps.
    pub leaf_scale: f64,
    pub damping: f64,
    /// Fewest training samples a leaf may hold.
    pub min_leaf: usize,
}

impl TreeParams {
    pub fn new(max_leaves: usize, criterion: SplitCriterion) -> Self {
        TreeParams {
            max_leaves,
            criterion,
            leaf_scale: 1.0,
            damping: DEFAULT_DAMPING,
            min_leaf: 1,
        }
    }

    pub fn with_leaf_scale(mut self, scale: f64) -> Self {
        self.leaf_scale = scale;
        self
    }

    pub fn with_min_leaf(mut self, min_leaf: usize) -> Self {
        self.min_leaf = min_leaf;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold_bin: u16,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_value: f64,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, count: usize) -> Self {
        Tree {
            nodes: vec![Node::Leaf {
                leaf_value: value,
                count,
            }],
        }
    }

    /// Node id of the leaf reached by a binned row.
    #[inline]
    pub fn leaf_index(&self, row: &[u16]) -> usize {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Split {
                    feature,
                    threshold_bin,
                    left,
                    right,
                } => id = if row[feature] <= threshold_bin { left } else { right },
            }
        }
    }

    #[inline]
    pub fn predict(&self, row: &[u16]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { leaf_value, .. } => leaf_value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub(crate) fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Model("tree without nodes".into()));
        }
        // Children must point forward so routing always terminates.
        for (id, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Split {
                    feature, left, right, ..
                } => {
                    if feature >= n_features
                        || left <= id
                        || right <= id
                        || left >= self.nodes.len()
                        || right >= self.nodes.len()
                    {
                        return Err(Error::Model(format!("invalid split node {id}")));
                    }
                }
                Node::Leaf { leaf_value, .. } => {
                    if !leaf_value.is_finite() {
                        return Err(Error::Model(format!("non-finite leaf value at node {id}")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct BestSplit {
    feature: usize,
    threshold: u16,
    gain: f64,
}

struct OpenLeaf {
    node: usize,
    seq: usize,
    start: usize,
    end: usize,
    sums: BinStat,
    hist: Vec<BinStat>,
    split: Option<BestSplit>,
}

/// Reusable buffers for growing trees over one dataset.
pub struct TreeGrower<'a> {
    data: &'a BinnedDataset,
    offsets: Vec<usize>,
    total_bins: usize,
    indices: Vec<u32>,
    scratch: Vec<u32>,
    pool: Vec<Vec<BinStat>>,
    /// `(leaf value, start, end)` ranges of `indices` from the last tree.
    leaves: Vec<(f64, usize, usize)>,
}

impl<'a> TreeGrower<'a> {
    pub fn new(data: &'a BinnedDataset) -> Self {
        let mut offsets = Vec::with_capacity(data.n_features());
        let mut total_bins = 0;
        for &n in data.n_bins() {
            offsets.push(total_bins);
            total_bins += n;
        }
        TreeGrower {
            data,
            offsets,
            total_bins,
            indices: Vec::with_capacity(data.n_samples()),
            scratch: Vec::new(),
            pool: Vec::new(),
            leaves: Vec::new(),
        }
    }

    fn take_hist(&mut self) -> Vec<BinStat> {
        self.pool
            .pop()
            .unwrap_or_else(|| vec![BinStat::default(); self.total_bins])
    }

    /// Fit a tree with at most `params.max_leaves` leaves. Leaves are split
    /// best-first; growth stops early when no leaf has positive gain.
    pub fn grow(&mut self, responses: &Responses, params: &TreeParams) -> Result<Tree> {
        if params.max_leaves < 2 {
            return Err(Error::Config(format!(
                "trees need at least 2 leaves, got {}",
                params.max_leaves
            )));
        }
        let n = self.data.n_samples();
        if responses.numer.len() != n || responses.weight.len() != n {
            return Err(Error::Config(format!(
                "response length {} does not match {n} samples",
                responses.len()
            )));
        }
        self.indices.clear();
        self.indices.extend(0..n as u32);
        self.leaves.clear();

        let mut nodes = vec![Node::Leaf {
            leaf_value: 0.0,
            count: n,
        }];
        let mut hist = self.take_hist();
        let sums = self.fill_hist(&mut hist, 0, n, responses);
        let split = self.best_split(&hist, &sums, params);
        let mut open = vec![OpenLeaf {
            node: 0,
            seq: 0,
            start: 0,
            end: n,
            sums,
            hist,
            split,
        }];
        let mut next_seq = 1;

        while open.len() < params.max_leaves {
            let mut pick: Option<usize> = None;
            for (i, leaf) in open.iter().enumerate() {
                let Some(s) = leaf.split else { continue };
                if s.gain <= 0.0 {
                    continue;
                }
                let better = match pick {
                    None => true,
                    Some(j) => {
                        let cur = open[j].split.unwrap().gain;
                        s.gain > cur || (s.gain == cur && leaf.seq < open[j].seq)
                    }
                };
                if better {
                    pick = Some(i);
                }
            }
            let Some(pick) = pick else { break };
            let parent = open.swap_remove(pick);
            let split = parent.split.unwrap();
            let mid = self.partition(parent.start, parent.end, split.feature, split.threshold);

            let left_len = mid - parent.start;
            let right_len = parent.end - mid;
            let mut small = self.take_hist();
            let mut large = parent.hist;
            let (small_range, large_range, small_is_left) = if left_len <= right_len {
                ((parent.start, mid), (mid, parent.end), true)
            } else {
                ((mid, parent.end), (parent.start, mid), false)
            };
            let small_sums = self.fill_hist(&mut small, small_range.0, small_range.1, responses);
            for (l, s) in large.iter_mut().zip(&small) {
                *l = if l.count == s.count {
                    BinStat::default()
                } else {
                    l.minus(s)
                };
            }
            let large_sums = parent.sums.minus(&small_sums);

            let left_node = nodes.len();
            let right_node = left_node + 1;
            nodes[parent.node] = Node::Split {
                feature: split.feature,
                threshold_bin: split.threshold,
                left: left_node,
                right: right_node,
            };
            nodes.push(Node::Leaf {
                leaf_value: 0.0,
                count: left_len,
            });
            nodes.push(Node::Leaf {
                leaf_value: 0.0,
                count: right_len,
            });

            let small_split = self.best_split(&small, &small_sums, params);
            let large_split = self.best_split(&large, &large_sums, params);
            let small_leaf = OpenLeaf {
                node: if small_is_left { left_node } else { right_node },
                seq: 0,
                start: small_range.0,
                end: small_range.1,
                sums: small_sums,
                hist: small,
                split: small_split,
            };
            let large_leaf = OpenLeaf {
                node: if small_is_left { right_node } else { left_node },
                seq: 0,
                start: large_range.0,
                end: large_range.1,
                sums: large_sums,
                hist: large,
                split: large_split,
            };
            let (mut left, mut right) = if small_is_left {
                (small_leaf, large_leaf)
            } else {
                (large_leaf, small_leaf)
            };
            left.seq = next_seq;
            right.seq = next_seq + 1;
            next_seq += 2;
            open.push(left);
            open.push(right);
        }

        open.sort_by_key(|leaf| leaf.start);
        for leaf in open {
            let value = params.leaf_scale * leaf.sums.numer / (params.damping + leaf.sums.weight);
            nodes[leaf.node] = Node::Leaf {
                leaf_value: value,
                count: leaf.end - leaf.start,
            };
            self.leaves.push((value, leaf.start, leaf.end));
            self.pool.push(leaf.hist);
        }
        Ok(Tree { nodes })
    }

    /// Leaves of the last grown tree with the training samples they hold.
    pub fn leaf_members(&self) -> impl Iterator<Item = (f64, &[u32])> + '_ {
        self.leaves
            .iter()
            .map(move |&(value, start, end)| (value, &self.indices[start..end]))
    }

    fn fill_hist(&self, hist: &mut [BinStat], start: usize, end: usize, responses: &Responses) -> BinStat {
        hist.fill(BinStat::default());
        let nf = self.data.n_features();
        let rows = self.data.bins();
        let numer = &responses.numer;
        let weight = &responses.weight;
        let offsets = &self.offsets[..nf];
        let mut sums = BinStat::default();
        let n = self.data.n_samples();
        assert!(hist.len() == self.total_bins && numer.len() == n && weight.len() == n && rows.len() == n * nf);
        for &i in &self.indices[start..end] {
            let i = i as usize;
            // SAFETY: every index is below n, and BinnedDataset guarantees each
            // bin is below its feature's bin count, so off + bin < total_bins.
            unsafe {
                let (s, w) = (*numer.get_unchecked(i), *weight.get_unchecked(i));
                sums.numer += s;
                sums.weight += w;
                let row = rows.as_ptr().add(i * nf);
                for (f, &off) in offsets.iter().enumerate() {
                    let cell = hist.get_unchecked_mut(off + *row.add(f) as usize);
                    cell.numer += s;
                    cell.weight += w;
                    cell.count += 1;
                }
            }
        }
        sums.count = (end - start) as u32;
        sums
    }

    fn best_split(&self, hist: &[BinStat], sums: &BinStat, params: &TreeParams) -> Option<BestSplit> {
        if (sums.count as usize) < 2 * params.min_leaf.max(1) {
            return None;
        }
        let mut best: Option<BestSplit> = None;
        for (f, &off) in self.offsets.iter().enumerate() {
            let n_bins = self.data.n_bins()[f];
            let scan = scan_with_total(&hist[off..off + n_bins], sums, params.criterion, params.min_leaf);
            let Some(t) = scan.threshold else { continue };
            if best.is_none_or(|b| scan.gain > b.gain) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: t as u16,
                    gain: scan.gain,
                });
            }
        }
        best
    }

    /// Stable partition of `indices[start..end]`; returns the first index of
    /// the right part.
    fn partition(&mut self, start: usize, end: usize, feature: usize, threshold: u16) -> usize {
        let nf = self.data.n_features();
        let rows = self.data.bins();
        let len = end - start;
        if self.scratch.len() < len {
            self.scratch.resize(len, 0);
        }
        let src = &mut self.indices[start..end];
        let right = &mut self.scratch[..len];
        let (mut nl, mut nr) = (0, 0);
        // branch-free: every index is written to both sides, only one cursor moves
        for read in 0..len {
            let i = src[read];
            let go_left = (rows[i as usize * nf + feature] <= threshold) as usize;
            src[nl] = i;
            right[nr] = i;
            nl += go_left;
            nr += 1 - go_left;
        }
        let write = start + nl;
        self.indices[write..end].copy_from_slice(&self.scratch[..nr]);
        write
    }
}

/// Grow a single tree.
pub fn grow_tree(data: &BinnedDataset, responses: &Responses, params: &TreeParams) -> Result<Tree> {
    TreeGrower::new(data).grow(responses, params)
}
