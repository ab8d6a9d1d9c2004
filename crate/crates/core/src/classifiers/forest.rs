//! Random forest over superpixel-index labels.
//!
//! Trees are grown greedily. At each node a random subset of features is
//! drawn and, for each, a handful of thresholds uniform between the node's
//! minimum and maximum value of that feature; the `(feature, threshold)` pair
//! with the largest Shannon information gain wins. A pixel goes right iff
//! its feature value is strictly greater than the threshold. Leaves hold the
//! normalized class histogram of the training pixels that reached them, and
//! the forest posterior is the mean of the reached leaves' histograms.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PosteriorBuilder, PosteriorField, SparseAccumulator};
use crate::error::{Error, Result};
use crate::features::{FeatureBank, FeatureMatrix};
use crate::imaging::Frame;
use crate::rng::{derive, SplitMix64};
use crate::slic::Segmentation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per node; `None` means `ceil(sqrt(feature count))`.
    pub candidate_features: Option<usize>,
    pub candidate_thresholds: usize,
    pub bootstrap: bool,
    /// Fraction of training pixels kept (without replacement) before bootstrapping.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            max_depth: 20,
            min_leaf: 5,
            candidate_features: None,
            candidate_thresholds: 10,
            bootstrap: true,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::InvalidArgument("forest needs at least one tree".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidArgument("min_leaf must be >= 1".into()));
        }
        if self.candidate_thresholds == 0 || self.candidate_features == Some(0) {
            return Err(Error::InvalidArgument("candidate counts must be >= 1".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::InvalidArgument(format!("subsample {} outside (0, 1]", self.subsample)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        start: u32,
        len: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
    leaf_classes: Vec<u32>,
    leaf_probs: Vec<f64>,
}

impl Tree {
    #[inline]
    fn leaf_for(&self, features: &FeatureMatrix, pixel: usize) -> (&[u32], &[f64]) {
        let mut id = 0usize;
        loop {
            match self.nodes[id] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if features.get(pixel, feature as usize) > threshold {
                        right as usize
                    } else {
                        left as usize
                    };
                }
                Node::Leaf { start, len } => {
                    let (a, b) = (start as usize, (start + len) as usize);
                    return (&self.leaf_classes[a..b], &self.leaf_probs[a..b]);
                }
            }
        }
    }

    fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match nodes[id] {
                Node::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Trained forest. Immutable and shareable across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    classes: usize,
    features: usize,
    trees: Vec<Tree>,
}

const FOREST_FORMAT: &str = "spxtrack-forest";
const FOREST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ForestFile {
    format: String,
    version: u32,
    forest: Forest,
}

impl Forest {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    /// Depth of the deepest tree (0 for single-leaf trees).
    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }

    /// Checks the structural invariants: leaf histograms normalized, every split has two valid children.
    pub fn check_invariants(&self) -> Result<()> {
        for (t, tree) in self.trees.iter().enumerate() {
            for node in &tree.nodes {
                match *node {
                    Node::Split { left, right, feature, .. } => {
                        if left as usize >= tree.nodes.len() || right as usize >= tree.nodes.len() || left == right {
                            return Err(Error::InvalidArgument(format!("tree {t}: bad children")));
                        }
                        if feature as usize >= self.features {
                            return Err(Error::InvalidArgument(format!("tree {t}: bad feature")));
                        }
                    }
                    Node::Leaf { start, len } => {
                        let (a, b) = (start as usize, (start + len) as usize);
                        let total: f64 = tree.leaf_probs[a..b].iter().sum();
                        if (total - 1.0).abs() > 1e-9 || tree.leaf_classes[a..b].iter().any(|&c| c as usize >= self.classes) {
                            return Err(Error::InvalidArgument(format!("tree {t}: bad leaf")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ForestFile {
            format: FOREST_FORMAT.into(),
            version: FOREST_VERSION,
            forest: self.clone(),
        };
        let text = serde_json::to_string(&file).expect("forest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ForestFile = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        if file.format != FOREST_FORMAT || file.version != FOREST_VERSION {
            return Err(Error::malformed(
                path,
                format!("expected {FOREST_FORMAT} v{FOREST_VERSION}, found {} v{}", file.format, file.version),
            ));
        }
        Ok(file.forest)
    }
}

/// Trains a forest on `target`, labelling each pixel with its superpixel index.
pub fn train_forest(target: &Frame, target_seg: &Segmentation, bank: &FeatureBank, cfg: &ForestConfig) -> Result<Forest> {
    if target.width() != target_seg.width() || target.height() != target_seg.height() {
        return Err(Error::DimensionMismatch("frame and segmentation sizes differ".into()));
    }
    let features = FeatureMatrix::compute(target, bank);
    train_forest_on(&features, target_seg.labels(), target_seg.count(), cfg)
}

/// Trains a forest on precomputed features and per-pixel class labels.
pub fn train_forest_on(features: &FeatureMatrix, labels: &[u32], classes: usize, cfg: &ForestConfig) -> Result<Forest> {
    cfg.validate()?;
    if labels.len() != features.pixels() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.pixels()
        )));
    }
    if labels.len() < cfg.min_leaf {
        return Err(Error::InvalidArgument(format!(
            "{} training samples is fewer than min_leaf = {}",
            labels.len(),
            cfg.min_leaf
        )));
    }
    if features.features() == 0 {
        return Err(Error::InvalidArgument("no features".into()));
    }
    let trees = (0..cfg.trees)
        .into_par_iter()
        .map(|t| grow_tree(features, labels, classes, cfg, derive(cfg.seed, t as u64)))
        .collect();
    Ok(Forest {
        classes,
        features: features.features(),
        trees,
    })
}

struct Scratch {
    counts: Vec<u32>,
    local: Vec<u32>,
    present: Vec<u32>,
    hist: Vec<u32>,
    cum: Vec<u32>,
    xlogx: Vec<f64>,
    thresholds: Vec<f64>,
    feature_order: Vec<u32>,
}

fn grow_tree(features: &FeatureMatrix, labels: &[u32], classes: usize, cfg: &ForestConfig, seed: u64) -> Tree {
    let mut rng = SplitMix64::new(seed);
    let n_all = labels.len();

    let mut pool: Vec<u32> = (0..n_all as u32).collect();
    if cfg.subsample < 1.0 {
        let keep = ((cfg.subsample * n_all as f64).round() as usize).clamp(cfg.min_leaf.max(1), n_all);
        for i in 0..keep {
            let j = i + rng.index(n_all - i);
            pool.swap(i, j);
        }
        pool.truncate(keep);
        pool.sort_unstable();
    }
    let mut samples: Vec<u32> = if cfg.bootstrap {
        (0..pool.len()).map(|_| pool[rng.index(pool.len())]).collect()
    } else {
        pool
    };

    let n = samples.len();
    let k = features.features();
    let mtry = cfg
        .candidate_features
        .unwrap_or_else(|| (k as f64).sqrt().ceil() as usize)
        .clamp(1, k);
    let nt = cfg.candidate_thresholds;
    let mut s = Scratch {
        counts: vec![0; classes],
        local: vec![u32::MAX; classes],
        present: Vec::new(),
        hist: Vec::new(),
        cum: Vec::new(),
        xlogx: (0..=n).map(|c| if c == 0 { 0.0 } else { c as f64 * (c as f64).ln() }).collect(),
        thresholds: Vec::with_capacity(nt),
        feature_order: (0..k as u32).collect(),
    };

    let mut tree = Tree {
        nodes: vec![Node::Leaf { start: 0, len: 0 }],
        leaf_classes: Vec::new(),
        leaf_probs: Vec::new(),
    };
    let mut stack = vec![(0usize, 0usize, n, 0usize)];
    while let Some((id, lo, hi, depth)) = stack.pop() {
        let node = &mut samples[lo..hi];
        let m = node.len();

        s.present.clear();
        for &p in node.iter() {
            let c = labels[p as usize] as usize;
            if s.counts[c] == 0 {
                s.present.push(c as u32);
            }
            s.counts[c] += 1;
        }
        s.present.sort_unstable();

        let split = if depth >= cfg.max_depth || m < 2 * cfg.min_leaf || s.present.len() <= 1 {
            None
        } else {
            best_split(features, labels, node, cfg, mtry, nt, &mut s, &mut rng)
        };

        match split {
            None => {
                let start = tree.leaf_classes.len() as u32;
                for &c in &s.present {
                    tree.leaf_classes.push(c);
                    tree.leaf_probs.push(s.counts[c as usize] as f64 / m as f64);
                }
                tree.nodes[id] = Node::Leaf {
                    start,
                    len: s.present.len() as u32,
                };
                for &c in &s.present {
                    s.counts[c as usize] = 0;
                }
            }
            Some((feature, threshold)) => {
                for &c in &s.present {
                    s.counts[c as usize] = 0;
                }
                let column = features.column(feature);
                // In-place partition: values <= threshold first.
                let mut left_end = 0;
                for i in 0..m {
                    if column[node[i] as usize] <= threshold {
                        node.swap(i, left_end);
                        left_end += 1;
                    }
                }
                let left = tree.nodes.len();
                tree.nodes.push(Node::Leaf { start: 0, len: 0 });
                tree.nodes.push(Node::Leaf { start: 0, len: 0 });
                tree.nodes[id] = Node::Split {
                    feature: feature as u32,
                    threshold,
                    left: left as u32,
                    right: left as u32 + 1,
                };
                stack.push((left + 1, lo + left_end, hi, depth + 1));
                stack.push((left, lo, lo + left_end, depth + 1));
            }
        }
    }
    tree
}

/// Returns the best `(feature, threshold)` at a node whose class counts are in
/// `s.counts` / `s.present`, or `None` if no candidate has positive gain.
#[allow(clippy::too_many_arguments)]
fn best_split(
    features: &FeatureMatrix,
    labels: &[u32],
    node: &[u32],
    cfg: &ForestConfig,
    mtry: usize,
    nt: usize,
    s: &mut Scratch,
    rng: &mut SplitMix64,
) -> Option<(usize, f64)> {
    let m = node.len();
    let nl = s.present.len();
    for (i, &c) in s.present.iter().enumerate() {
        s.local[c as usize] = i as u32;
    }
    let parent_sum: f64 = s.present.iter().map(|&c| s.xlogx[s.counts[c as usize] as usize]).sum();
    // m * H(parent), in nats.
    let parent = s.xlogx[m] - parent_sum;

    let k = s.feature_order.len();
    let mut best: Option<(usize, f64)> = None;
    let mut best_gain = 1e-9;
    for i in 0..mtry {
        let j = i + rng.index(k - i);
        s.feature_order.swap(i, j);
        let feature = s.feature_order[i] as usize;
        let column = features.column(feature);

        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &p in node {
            let v = column[p as usize];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        s.thresholds.clear();
        for _ in 0..nt {
            s.thresholds.push(lo + rng.unit_f64() * (hi - lo));
        }
        if hi <= lo {
            continue;
        }
        s.thresholds.sort_by(f64::total_cmp);
        s.thresholds.dedup();
        let bins = s.thresholds.len() + 1;

        s.hist.clear();
        s.hist.resize(bins * nl, 0);
        for &p in node {
            let v = column[p as usize];
            let b = s.thresholds.partition_point(|&t| t < v);
            let c = s.local[labels[p as usize] as usize] as usize;
            s.hist[b * nl + c] += 1;
        }

        s.cum.clear();
        s.cum.resize(nl, 0);
        let mut n_left = 0usize;
        for (t, &threshold) in s.thresholds.iter().enumerate() {
            // Left side of threshold t = bins 0..=t (values <= threshold).
            let row = &s.hist[t * nl..(t + 1) * nl];
            for (c, &h) in row.iter().enumerate() {
                s.cum[c] += h;
                n_left += h as usize;
            }
            let n_right = m - n_left;
            if n_left < cfg.min_leaf || n_right < cfg.min_leaf {
                continue;
            }
            let mut left_sum = 0.0;
            let mut right_sum = 0.0;
            for (c, &cl) in s.cum.iter().enumerate() {
                left_sum += s.xlogx[cl as usize];
                right_sum += s.xlogx[(s.counts[s.present[c] as usize] - cl) as usize];
            }
            let children = (s.xlogx[n_left] - left_sum) + (s.xlogx[n_right] - right_sum);
            let gain = (parent - children) / m as f64;
            if gain > best_gain {
                best_gain = gain;
                best = Some((feature, threshold));
            }
        }
    }
    for &c in &s.present {
        s.local[c as usize] = u32::MAX;
    }
    best
}

/// Posterior field of `source` under `forest`.
pub fn forest_posteriors(forest: &Forest, source: &Frame, bank: &FeatureBank) -> Result<PosteriorField> {
    if bank.count() != forest.features {
        return Err(Error::InvalidArgument(format!(
            "feature bank has {} features, forest was trained with {}",
            bank.count(),
            forest.features
        )));
    }
    let features = FeatureMatrix::compute(source, bank);
    posteriors_from_features(forest, &features, source.width(), source.height())
}

/// Posterior field from precomputed source features.
pub fn posteriors_from_features(forest: &Forest, features: &FeatureMatrix, width: usize, height: usize) -> Result<PosteriorField> {
    if features.features() != forest.features {
        return Err(Error::InvalidArgument(format!(
            "{} features given, forest was trained with {}",
            features.features(),
            forest.features
        )));
    }
    if features.pixels() != width * height {
        return Err(Error::DimensionMismatch("feature rows do not match frame size".into()));
    }
    let scale = 1.0 / forest.trees.len() as f64;
    let rows: Vec<PosteriorBuilder> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut acc = SparseAccumulator::new(forest.classes);
            let mut b = PosteriorBuilder::new(width, 1, forest.classes);
            for x in 0..width {
                let p = y * width + x;
                for tree in &forest.trees {
                    let (classes, probs) = tree.leaf_for(features, p);
                    for (&c, &v) in classes.iter().zip(probs) {
                        acc.add(c, v);
                    }
                }
                b.push_pixel(acc.drain_scaled(scale));
            }
            b
        })
        .collect();
    let mut out = PosteriorBuilder::new(width, height, forest.classes);
    for row in rows {
        out.append(row);
    }
    Ok(out.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DEFAULT_BOX_SIZES;

    fn halves() -> (Frame, Segmentation) {
        let f = Frame::from_fn(16, 12, |x, _| if x < 8 { [0, 0, 0] } else { [255, 255, 255] }).unwrap();
        let labels = (0..16 * 12).map(|p| u32::from(p % 16 >= 8)).collect();
        (f, Segmentation::from_labels(16, 12, labels).unwrap())
    }

    fn small_cfg() -> ForestConfig {
        ForestConfig {
            trees: 10,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn two_halves_split_at_root() {
        let (f, seg) = halves();
        let bank = FeatureBank::generate(1, 20, 4, &DEFAULT_BOX_SIZES).unwrap();
        let forest = train_forest(&f, &seg, &bank, &small_cfg()).unwrap();
        forest.check_invariants().unwrap();
        let post = forest_posteriors(&forest, &f, &bank).unwrap();
        let mut correct = 0;
        for p in 0..post.pixel_count() {
            let (c, v) = post.pixel(p);
            let total: f64 = v.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            let arg = c[v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b })];
            if arg == seg.labels()[p] {
                correct += 1;
            }
        }
        assert!(correct as f64 >= 0.99 * post.pixel_count() as f64, "{correct}");
    }

    #[test]
    fn zero_depth_gives_class_prior() {
        let f = Frame::from_fn(10, 10, |x, y| [(x * 20) as u8, (y * 20) as u8, 0]).unwrap();
        let labels = (0..100).map(|p| u32::from(p % 10 >= 3)).collect();
        let seg = Segmentation::from_labels(10, 10, labels).unwrap();
        let bank = FeatureBank::generate(1, 12, 3, &[3]).unwrap();
        let cfg = ForestConfig {
            trees: 1,
            max_depth: 0,
            bootstrap: false,
            ..Default::default()
        };
        let forest = train_forest(&f, &seg, &bank, &cfg).unwrap();
        assert_eq!(forest.max_depth(), 0);
        let post = forest_posteriors(&forest, &f, &bank).unwrap();
        for p in 0..100 {
            assert_eq!(post.pixel(p), (&[0u32, 1][..], &[0.3, 0.7][..]));
        }
    }

    #[test]
    fn single_class_gives_single_leaf() {
        let f = Frame::from_fn(6, 6, |x, y| [(x * 40) as u8, (y * 40) as u8, 9]).unwrap();
        let seg = Segmentation::from_labels(6, 6, vec![0; 36]).unwrap();
        let bank = FeatureBank::generate(1, 9, 2, &DEFAULT_BOX_SIZES).unwrap();
        let forest = train_forest(&f, &seg, &bank, &small_cfg()).unwrap();
        assert_eq!(forest.max_depth(), 0);
        let post = forest_posteriors(&forest, &f, &bank).unwrap();
        assert_eq!(post.pixel(0), (&[0u32][..], &[1.0][..]));
    }

    #[test]
    fn deterministic_and_serializable() {
        let f = Frame::from_fn(12, 12, |x, y| [(x * 21) as u8, (y * 19) as u8, ((x * y) % 256) as u8]).unwrap();
        let labels = (0..144).map(|p| ((p % 12) / 4 + 3 * ((p / 12) / 4)) as u32).collect();
        let seg = Segmentation::from_labels(12, 12, labels).unwrap();
        let bank = FeatureBank::generate(3, 20, 5, &DEFAULT_BOX_SIZES).unwrap();
        let a = train_forest(&f, &seg, &bank, &small_cfg()).unwrap();
        let b = train_forest(&f, &seg, &bank, &small_cfg()).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("forest.json");
        a.save(&p).unwrap();
        assert_eq!(Forest::load(&p).unwrap(), a);
    }

    #[test]
    fn errors() {
        let (f, seg) = halves();
        let bank = FeatureBank::generate(1, 20, 4, &DEFAULT_BOX_SIZES).unwrap();
        let cfg = ForestConfig {
            min_leaf: 1000,
            ..small_cfg()
        };
        assert!(train_forest(&f, &seg, &bank, &cfg).is_err());
        let forest = train_forest(&f, &seg, &bank, &small_cfg()).unwrap();
        let other = FeatureBank::generate(1, 21, 4, &DEFAULT_BOX_SIZES).unwrap();
        assert!(forest_posteriors(&forest, &f, &other).is_err());
    }
}
