//! Region, contour and forward-backward consistency scores.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::RoiMask;
use crate::matching::MatchField;
use crate::slic::Segmentation;

fn check_dims(x: &RoiMask, y: &RoiMask) -> Result<()> {
    if x.same_dims(y) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "masks are {}x{} and {}x{}",
            x.width(),
            x.height(),
            y.width(),
            y.height()
        )))
    }
}

/// `2|X∩Y| / (|X|+|Y|)`, and 1 when both masks are empty.
pub fn dice(x: &RoiMask, y: &RoiMask) -> Result<f64> {
    check_dims(x, y)?;
    let both = x.bits().iter().zip(y.bits()).filter(|(a, b)| **a && **b).count();
    let total = x.count() + y.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

/// Mask pixels with a 4-neighbour outside the mask or on the image border.
pub fn boundary(mask: &RoiMask) -> RoiMask {
    let (w, h) = (mask.width(), mask.height());
    RoiMask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && (x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1))
    })
}

/// Dilation by the discrete Euclidean disc `dx² + dy² <= radius²`.
pub fn dilate(mask: &RoiMask, radius: usize) -> RoiMask {
    let (w, h) = (mask.width(), mask.height());
    let r = radius as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = RoiMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                    out.set(xx as usize, yy as usize, true);
                }
            }
        }
    }
    out
}

/// Contour tolerance for a `width x height` frame: `max(1, round(0.0075 * diagonal))`.
pub fn default_contour_radius(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.0075 * diag).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Boundary precision/recall of `x` against `y` with a dilation tolerance.
pub fn contour_f_measure(x: &RoiMask, y: &RoiMask, radius: usize) -> Result<ContourScore> {
    check_dims(x, y)?;
    let bx = boundary(x);
    let by = boundary(y);
    let (nx, ny) = (bx.count(), by.count());
    if nx == 0 || ny == 0 {
        let v = if nx == 0 && ny == 0 { 1.0 } else { 0.0 };
        return Ok(ContourScore {
            precision: v,
            recall: v,
            f_measure: v,
        });
    }
    let dx = dilate(&bx, radius);
    let dy = dilate(&by, radius);
    let hit = |b: &RoiMask, d: &RoiMask| b.bits().iter().zip(d.bits()).filter(|(a, c)| **a && **c).count();
    let precision = hit(&bx, &dy) as f64 / nx as f64;
    let recall = hit(&by, &dx) as f64 / ny as f64;
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ContourScore {
        precision,
        recall,
        f_measure,
    })
}

/// Percentage of ROI pixels of the reference frame whose superpixel `f`
/// satisfies `bw(fw(f)) = f`; 100 when the ROI is empty.
pub fn fwbw_consistency(ref_mask: &RoiMask, ref_seg: &Segmentation, fw: &MatchField, bw: &MatchField) -> Result<f64> {
    if ref_mask.width() != ref_seg.width() || ref_mask.height() != ref_seg.height() {
        return Err(Error::DimensionMismatch("reference mask and segmentation sizes differ".into()));
    }
    if fw.source_count() != ref_seg.count() || bw.target_count() != ref_seg.count() || fw.target_count() != bw.source_count() {
        return Err(Error::IndexOutOfRange(format!(
            "fields {}->{} and {}->{} do not chain over {} reference superpixels",
            fw.source_count(),
            fw.target_count(),
            bw.source_count(),
            bw.target_count(),
            ref_seg.count()
        )));
    }
    let consistent: Vec<bool> = (0..ref_seg.count()).map(|f| bw.get(fw.get(f)) == f).collect();
    let (mut num, mut den) = (0usize, 0usize);
    for (&inside, &label) in ref_mask.bits().iter().zip(ref_seg.labels()) {
        if inside {
            den += 1;
            if consistent[label as usize] {
                num += 1;
            }
        }
    }
    Ok(if den == 0 { 100.0 } else { 100.0 * num as f64 / den as f64 })
}

/// Scores of one tracked frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame: String,
    pub dice: f64,
    pub contour: ContourScore,
    pub consistency: Option<f64>,
}

/// Per-frame scores plus their temporal means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
}

/// Temporal means; `consistency` is the mean over frames that have one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsMeans {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub consistency: Option<f64>,
}

impl MetricsReport {
    pub fn means(&self) -> Option<MetricsMeans> {
        if self.frames.is_empty() {
            return None;
        }
        let n = self.frames.len() as f64;
        let mean = |f: &dyn Fn(&FrameMetrics) -> f64| self.frames.iter().map(f).sum::<f64>() / n;
        let cons: Vec<f64> = self.frames.iter().filter_map(|f| f.consistency).collect();
        Some(MetricsMeans {
            dice: mean(&|f| f.dice),
            precision: mean(&|f| f.contour.precision),
            recall: mean(&|f| f.contour.recall),
            f_measure: mean(&|f| f.contour.f_measure),
            consistency: (!cons.is_empty()).then(|| cons.iter().sum::<f64>() / cons.len() as f64),
        })
    }

    /// Aggregate row as it appears in the CSV.
    pub fn aggregate_row(&self) -> Option<String> {
        self.means().map(|m| {
            row(
                "mean",
                m.dice,
                m.precision,
                m.recall,
                m.f_measure,
                m.consistency,
            )
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# consistency: percent of quantized reference ROI pixels whose superpixel maps back to itself\n",
        );
        out.push_str("frame_index,dice,precision,recall,f_measure,consistency\n");
        for f in &self.frames {
            out.push_str(&row(
                &f.frame,
                f.dice,
                f.contour.precision,
                f.contour.recall,
                f.contour.f_measure,
                f.consistency,
            ));
            out.push('\n');
        }
        if let Some(agg) = self.aggregate_row() {
            out.push_str(&agg);
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn row(frame: &str, dice: f64, p: f64, r: f64, f: f64, consistency: Option<f64>) -> String {
    let mut s = format!("{frame},{dice:.6},{p:.6},{r:.6},{f:.6},");
    if let Some(c) = consistency {
        let _ = write!(s, "{c:.4}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> RoiMask {
        RoiMask::from_fn(w, h, |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
    }

    #[test]
    fn dice_examples() {
        let a = square(20, 20, 2, 2, 5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &square(20, 20, 10, 10, 5)).unwrap(), 0.0);
        let x = RoiMask::from_fn(20, 1, |x, _| x < 10);
        let y = RoiMask::from_fn(20, 1, |x, _| (5..15).contains(&x));
        assert_eq!(dice(&x, &y).unwrap(), 0.5);
        let e = RoiMask::empty(4, 4);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&e, &RoiMask::empty(4, 5)).is_err());
    }

    #[test]
    fn contour_examples() {
        let a = square(30, 30, 5, 5, 10);
        let one = ContourScore {
            precision: 1.0,
            recall: 1.0,
            f_measure: 1.0,
        };
        assert_eq!(contour_f_measure(&a, &a, 0).unwrap(), one);
        assert_eq!(contour_f_measure(&a, &square(30, 30, 6, 5, 10), 1).unwrap(), one);
        let e = RoiMask::empty(30, 30);
        assert_eq!(contour_f_measure(&e, &e, 1).unwrap(), one);
        assert_eq!(contour_f_measure(&a, &e, 1).unwrap().f_measure, 0.0);
    }

    #[test]
    fn boundary_of_square_is_its_ring() {
        let b = boundary(&square(10, 10, 2, 2, 4));
        assert_eq!(b.count(), 12);
        assert!(!b.get(3, 3) && b.get(2, 3));
        // Pixels on the image border count as boundary.
        assert_eq!(boundary(&RoiMask::from_fn(3, 3, |_, _| true)).count(), 8);
    }

    #[test]
    fn radius_default() {
        assert_eq!(default_contour_radius(160, 120), 2);
        assert_eq!(default_contour_radius(10, 10), 1);
        assert_eq!(default_contour_radius(640, 360), 6);
    }

    #[test]
    fn consistency_examples() {
        let seg = Segmentation::from_labels(4, 1, vec![0, 0, 1, 2]).unwrap();
        let mask = RoiMask::from_fn(4, 1, |x, _| x < 3);
        let id = MatchField::new(0, 1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(fwbw_consistency(&mask, &seg, &id, &id).unwrap(), 100.0);
        let fw = MatchField::new(0, 1, 3, vec![2, 2, 2]).unwrap();
        let bw = MatchField::new(1, 0, 3, vec![0, 0, 1]).unwrap();
        // Superpixel 1 maps to 2 and back to 1; it covers one of three ROI pixels.
        assert!((fwbw_consistency(&mask, &seg, &fw, &bw).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(fwbw_consistency(&RoiMask::empty(4, 1), &seg, &fw, &bw).unwrap(), 100.0);
    }

    #[test]
    fn report_csv() {
        let c = ContourScore {
            precision: 1.0,
            recall: 0.5,
            f_measure: 2.0 / 3.0,
        };
        let report = MetricsReport {
            frames: vec![
                FrameMetrics {
                    frame: "1".into(),
                    dice: 1.0,
                    contour: c,
                    consistency: Some(100.0),
                },
                FrameMetrics {
                    frame: "2".into(),
                    dice: 0.5,
                    contour: c,
                    consistency: None,
                },
            ],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "frame_index,dice,precision,recall,f_measure,consistency");
        assert_eq!(lines[3], "2,0.500000,1.000000,0.500000,0.666667,");
        assert_eq!(lines[4], "mean,0.750000,1.000000,0.500000,0.666667,100.0000");
    }
}
