//! Pixel-to-superpixel posteriors.
//!
//! A classifier is trained on the pixels of the target frame, each labelled
//! with the index of its superpixel, and then queried with the pixels of the
//! source frame. The output is, for every source pixel, a probability
//! distribution over the target frame's superpixels.

mod forest;
mod knn;

pub use forest::{forest_posteriors, posteriors_from_features, train_forest, train_forest_on, Forest, ForestConfig};
pub use knn::{knn_posteriors, knn_posteriors_from_features};

use crate::error::{Error, Result};

/// Sparse per-pixel class distributions, stored row-compressed.
///
/// Within each pixel the entries are sorted by class index and every stored
/// probability is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorField {
    width: usize,
    height: usize,
    classes: usize,
    offsets: Vec<usize>,
    labels: Vec<u32>,
    probs: Vec<f64>,
}

impl PosteriorField {
    /// Builds a field from one `(class, probability)` list per pixel, row-major.
    /// Entries are sorted, zero entries dropped, and each pixel's total must be 1 within 1e-6.
    pub fn from_pixels(width: usize, height: usize, classes: usize, pixels: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} posterior field needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        let mut b = PosteriorBuilder::new(width, height, classes);
        for (p, mut entries) in pixels.into_iter().enumerate() {
            entries.sort_by_key(|e| e.0);
            let mut total = 0.0;
            for &(c, v) in &entries {
                if c as usize >= classes || !(v >= 0.0) {
                    return Err(Error::InvalidArgument(format!("pixel {p}: bad entry ({c}, {v})")));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("pixel {p}: probabilities sum to {total}")));
            }
            b.push_pixel(entries.into_iter().filter(|e| e.1 > 0.0));
        }
        Ok(b.finish())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Number of target superpixel classes.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Class indexes and probabilities of pixel `p`.
    #[inline]
    pub fn pixel(&self, p: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[p], self.offsets[p + 1]);
        (&self.labels[a..b], &self.probs[a..b])
    }

    /// Probability of `class` at pixel `p`.
    pub fn prob(&self, p: usize, class: usize) -> f64 {
        let (labels, probs) = self.pixel(p);
        match labels.binary_search(&(class as u32)) {
            Ok(i) => probs[i],
            Err(_) => 0.0,
        }
    }
}

/// Incremental constructor used by the classifiers.
pub(crate) struct PosteriorBuilder {
    field: PosteriorField,
}

impl PosteriorBuilder {
    pub(crate) fn new(width: usize, height: usize, classes: usize) -> Self {
        PosteriorBuilder {
            field: PosteriorField {
                width,
                height,
                classes,
                offsets: vec![0],
                labels: Vec::new(),
                probs: Vec::new(),
            },
        }
    }

    /// Appends the next pixel; entries must already be sorted by class.
    pub(crate) fn push_pixel(&mut self, entries: impl IntoIterator<Item = (u32, f64)>) {
        for (c, v) in entries {
            self.field.labels.push(c);
            self.field.probs.push(v);
        }
        self.field.offsets.push(self.field.labels.len());
    }

    pub(crate) fn append(&mut self, other: PosteriorBuilder) {
        let base = self.field.labels.len();
        self.field.labels.extend_from_slice(&other.field.labels);
        self.field.probs.extend_from_slice(&other.field.probs);
        self.field.offsets.extend(other.field.offsets[1..].iter().map(|o| o + base));
    }

    pub(crate) fn finish(self) -> PosteriorField {
        debug_assert_eq!(self.field.offsets.len(), self.field.width * self.field.height + 1);
        self.field
    }
}

/// Dense scratch accumulator over classes that remembers which slots were touched.
pub(crate) struct SparseAccumulator {
    values: Vec<f64>,
    touched: Vec<u32>,
}

impl SparseAccumulator {
    pub(crate) fn new(classes: usize) -> Self {
        SparseAccumulator {
            values: vec![0.0; classes],
            touched: Vec::new(),
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, class: u32, v: f64) {
        let slot = &mut self.values[class as usize];
        if *slot == 0.0 {
            self.touched.push(class);
        }
        *slot += v;
    }

    /// Emits the touched entries scaled by `scale`, sorted by class, and resets.
    pub(crate) fn drain_scaled(&mut self, scale: f64) -> Vec<(u32, f64)> {
        self.touched.sort_unstable();
        let out = self
            .touched
            .iter()
            .map(|&c| (c, self.values[c as usize] * scale))
            .collect();
        for &c in &self.touched {
            self.values[c as usize] = 0.0;
        }
        self.touched.clear();
        out
    }
}
