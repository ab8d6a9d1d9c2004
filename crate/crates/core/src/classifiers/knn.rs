//! Exact k-nearest-neighbour posteriors by brute-force search.

use rayon::prelude::*;

use super::{PosteriorBuilder, PosteriorField, SparseAccumulator};
use crate::error::{Error, Result};
use crate::features::{FeatureBank, FeatureMatrix};
use crate::imaging::Frame;
use crate::slic::Segmentation;

/// For every source pixel, the class frequencies among its `k` Euclidean-nearest
/// target pixels in feature space. Equal distances go to the lower target pixel index.
pub fn knn_posteriors(
    target: &Frame,
    target_seg: &Segmentation,
    source: &Frame,
    bank: &FeatureBank,
    k: usize,
) -> Result<PosteriorField> {
    if target.width() != target_seg.width() || target.height() != target_seg.height() {
        return Err(Error::DimensionMismatch("frame and segmentation sizes differ".into()));
    }
    let train = FeatureMatrix::compute(target, bank);
    let query = FeatureMatrix::compute(source, bank);
    knn_posteriors_from_features(
        &train,
        target_seg.labels(),
        target_seg.count(),
        &query,
        source.width(),
        source.height(),
        k,
    )
}

pub fn knn_posteriors_from_features(
    train: &FeatureMatrix,
    labels: &[u32],
    classes: usize,
    query: &FeatureMatrix,
    width: usize,
    height: usize,
    k: usize,
) -> Result<PosteriorField> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k > train.pixels() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} training pixels",
            train.pixels()
        )));
    }
    if labels.len() != train.pixels() {
        return Err(Error::DimensionMismatch("labels do not match training rows".into()));
    }
    if train.features() != query.features() {
        return Err(Error::DimensionMismatch("training and query feature counts differ".into()));
    }
    if query.pixels() != width * height {
        return Err(Error::DimensionMismatch("query rows do not match frame size".into()));
    }
    let dims = train.features();
    let train_rows = train.rows();
    let query_rows = query.rows();
    let scale = 1.0 / k as f64;

    let rows: Vec<PosteriorBuilder> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
            let mut acc = SparseAccumulator::new(classes);
            let mut b = PosteriorBuilder::new(width, 1, classes);
            for x in 0..width {
                let q = &query_rows[(y * width + x) * dims..(y * width + x + 1) * dims];
                best.clear();
                for (i, t) in train_rows.chunks_exact(dims.max(1)).enumerate() {
                    let worst = if best.len() == k { best[k - 1].0 } else { f64::INFINITY };
                    let mut d = 0.0;
                    let mut abandoned = false;
                    for (a, b) in q.iter().zip(t) {
                        let diff = a - b;
                        d += diff * diff;
                        if d >= worst {
                            abandoned = true;
                            break;
                        }
                    }
                    if abandoned || d >= worst {
                        continue;
                    }
                    // Strictly better than the current worst: insert after any equal distances.
                    let at = best.partition_point(|e| e.0 <= d);
                    best.insert(at, (d, i as u32));
                    best.truncate(k);
                }
                for &(_, i) in &best {
                    acc.add(labels[i as usize], 1.0);
                }
                b.push_pixel(acc.drain_scaled(scale));
            }
            b
        })
        .collect();
    let mut out = PosteriorBuilder::new(width, height, classes);
    for row in rows {
        out.append(row);
    }
    Ok(out.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_finds_own_label() {
        let f = Frame::from_fn(8, 8, |x, y| [(x * 30) as u8, (y * 30) as u8, ((x + y) * 15) as u8]).unwrap();
        let labels = (0..64).map(|p| ((p % 8) / 4 + 2 * ((p / 8) / 4)) as u32).collect();
        let seg = Segmentation::from_labels(8, 8, labels).unwrap();
        let bank = FeatureBank::generate(2, 15, 3, &[3]).unwrap();
        let post = knn_posteriors(&f, &seg, &f, &bank, 1).unwrap();
        for p in 0..64 {
            assert_eq!(post.pixel(p), (&[seg.labels()[p]][..], &[1.0][..]));
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        // Uniform frame: every training pixel is at distance zero.
        let f = Frame::filled(4, 1, [10, 20, 30]).unwrap();
        let seg = Segmentation::from_labels(4, 1, vec![0, 1, 2, 3]).unwrap();
        let bank = FeatureBank::generate(1, 9, 1, &[3]).unwrap();
        let post = knn_posteriors(&f, &seg, &f, &bank, 2).unwrap();
        for p in 0..4 {
            assert_eq!(post.pixel(p), (&[0u32, 1][..], &[0.5, 0.5][..]));
        }
    }

    #[test]
    fn k_larger_than_training_set_fails() {
        let f = Frame::filled(2, 2, [0, 0, 0]).unwrap();
        let seg = Segmentation::from_labels(2, 2, vec![0; 4]).unwrap();
        let bank = FeatureBank::generate(1, 9, 1, &[3]).unwrap();
        assert!(knn_posteriors(&f, &seg, &f, &bank, 5).is_err());
        assert!(knn_posteriors(&f, &seg, &f, &bank, 0).is_err());
    }
}
