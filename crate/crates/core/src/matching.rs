//! Superpixel-to-superpixel matching from pixel posteriors.
//!
//! Every argmax in this module breaks ties toward the lowest superpixel index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classifiers::PosteriorField;
use crate::error::{Error, Result};
use crate::slic::Segmentation;

/// Sparse probability vector: `(class, probability)` pairs sorted by class.
pub type SparseVec = Vec<(u32, f64)>;

/// A total map from the superpixels of one frame to those of another.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchField {
    source_frame: usize,
    target_frame: usize,
    target_count: usize,
    map: Vec<u32>,
    soft: Option<Vec<SparseVec>>,
}

impl MatchField {
    pub fn new(source_frame: usize, target_frame: usize, target_count: usize, map: Vec<u32>) -> Result<Self> {
        if let Some((i, &t)) = map.iter().enumerate().find(|(_, &t)| t as usize >= target_count) {
            return Err(Error::IndexOutOfRange(format!(
                "superpixel {i} maps to {t}, target has {target_count}"
            )));
        }
        Ok(MatchField {
            source_frame,
            target_frame,
            target_count,
            map,
            soft: None,
        })
    }

    /// Attaches per-superpixel probability vectors, which must be normalized.
    pub fn with_soft(mut self, soft: Vec<SparseVec>) -> Result<Self> {
        if soft.len() != self.map.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} soft vectors for {} superpixels",
                soft.len(),
                self.map.len()
            )));
        }
        for (i, v) in soft.iter().enumerate() {
            let total: f64 = v.iter().map(|e| e.1).sum();
            if (total - 1.0).abs() > 1e-6 || v.iter().any(|e| e.0 as usize >= self.target_count || e.1 < 0.0) {
                return Err(Error::InvalidArgument(format!("soft vector {i} is not a distribution")));
            }
        }
        self.soft = Some(soft);
        Ok(self)
    }

    /// Same map, relabelled with frame indexes.
    pub fn between(mut self, source_frame: usize, target_frame: usize) -> Self {
        self.source_frame = source_frame;
        self.target_frame = target_frame;
        self
    }

    /// Drops the soft vectors.
    pub fn hard(mut self) -> Self {
        self.soft = None;
        self
    }

    pub fn source_frame(&self) -> usize {
        self.source_frame
    }

    pub fn target_frame(&self) -> usize {
        self.target_frame
    }

    pub fn source_count(&self) -> usize {
        self.map.len()
    }

    pub fn target_count(&self) -> usize {
        self.target_count
    }

    pub fn map(&self) -> &[u32] {
        &self.map
    }

    #[inline]
    pub fn get(&self, source: usize) -> usize {
        self.map[source] as usize
    }

    pub fn soft(&self) -> Option<&[SparseVec]> {
        self.soft.as_deref()
    }

    /// Writes `source_index,target_index`, plus one dense `p<j>` column per
    /// target superpixel when `with_soft` is set and soft vectors exist.
    pub fn write_csv(&self, path: impl AsRef<Path>, with_soft: bool) -> Result<()> {
        let path = path.as_ref();
        let soft = if with_soft { self.soft.as_deref() } else { None };
        let mut out = String::from("source_index,target_index");
        if soft.is_some() {
            for j in 0..self.target_count {
                let _ = write!(out, ",p{j}");
            }
        }
        out.push('\n');
        let mut dense = vec![0.0; self.target_count];
        for (i, &t) in self.map.iter().enumerate() {
            let _ = write!(out, "{i},{t}");
            if let Some(soft) = soft {
                for &(c, v) in &soft[i] {
                    dense[c as usize] = v;
                }
                for d in dense.iter_mut() {
                    let _ = write!(out, ",{d}");
                    *d = 0.0;
                }
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`MatchField::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>, source_frame: usize, target_frame: usize, target_count: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::malformed(path, "empty file"))?;
        let columns: Vec<&str> = header.split(',').collect();
        if columns.len() < 2 || columns[0] != "source_index" || columns[1] != "target_index" {
            return Err(Error::malformed(path, "expected header source_index,target_index"));
        }
        let has_soft = columns.len() > 2;
        if has_soft && columns.len() != 2 + target_count {
            return Err(Error::malformed(path, "soft column count does not match target count"));
        }
        let mut map = Vec::new();
        let mut soft = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(Error::malformed(path, format!("row {row}: {} cells", cells.len())));
            }
            let parse_index = |s: &str| -> Result<u32> {
                s.parse().map_err(|_| Error::malformed(path, format!("row {row}: bad index {s:?}")))
            };
            if parse_index(cells[0])? as usize != map.len() {
                return Err(Error::malformed(path, format!("row {row}: source indexes must be 0, 1, 2, ...")));
            }
            map.push(parse_index(cells[1])?);
            if has_soft {
                let mut v = SparseVec::new();
                for (j, s) in cells[2..].iter().enumerate() {
                    let p: f64 = s
                        .parse()
                        .map_err(|_| Error::malformed(path, format!("row {row}: bad probability {s:?}")))?;
                    if p > 0.0 {
                        v.push((j as u32, p));
                    }
                }
                soft.push(v);
            }
        }
        let field = MatchField::new(source_frame, target_frame, target_count, map)?;
        if has_soft {
            field.with_soft(soft)
        } else {
            Ok(field)
        }
    }
}

/// Index of the largest probability in a sorted sparse vector; first wins on ties.
fn sparse_argmax(v: &[(u32, f64)]) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for &(c, p) in v {
        if best.is_none_or(|b| p > b.1) {
            best = Some((c, p));
        }
    }
    best.map(|b| b.0)
}

/// Per-pixel most probable target superpixel.
pub fn pixel_argmax(field: &PosteriorField) -> Vec<u32> {
    (0..field.pixel_count())
        .map(|p| {
            let (classes, probs) = field.pixel(p);
            let v: Vec<(u32, f64)> = classes.iter().copied().zip(probs.iter().copied()).collect();
            sparse_argmax(&v).unwrap_or(0)
        })
        .collect()
}

/// Plurality vote of each source superpixel's pixel predictions.
pub fn match_by_vote(pixel_map: &[u32], source_seg: &Segmentation, target_count: usize) -> Result<MatchField> {
    if pixel_map.len() != source_seg.labels().len() {
        return Err(Error::DimensionMismatch("pixel map and segmentation sizes differ".into()));
    }
    let mut counts = vec![0u32; target_count];
    let mut map = Vec::with_capacity(source_seg.count());
    for i in 0..source_seg.count() {
        let members = source_seg.members(i);
        for &p in members {
            let t = pixel_map[p as usize] as usize;
            if t >= target_count {
                return Err(Error::IndexOutOfRange(format!("pixel {p} predicts {t}, target has {target_count}")));
            }
            counts[t] += 1;
        }
        let mut best = u32::MAX;
        let mut best_count = 0;
        for &p in members {
            let t = pixel_map[p as usize];
            let c = counts[t as usize];
            if c > best_count || (c == best_count && t < best) {
                best = t;
                best_count = c;
            }
        }
        for &p in members {
            counts[pixel_map[p as usize] as usize] = 0;
        }
        map.push(best);
    }
    MatchField::new(0, 0, target_count, map)
}

/// Mean pixel posterior of every source superpixel.
pub fn superpixel_posteriors(field: &PosteriorField, source_seg: &Segmentation) -> Result<Vec<SparseVec>> {
    if field.width() != source_seg.width() || field.height() != source_seg.height() {
        return Err(Error::DimensionMismatch("posterior field and segmentation sizes differ".into()));
    }
    let mut sums = vec![0.0f64; field.classes()];
    let mut touched: Vec<u32> = Vec::new();
    let mut out = Vec::with_capacity(source_seg.count());
    for i in 0..source_seg.count() {
        let members = source_seg.members(i);
        for &p in members {
            let (classes, probs) = field.pixel(p as usize);
            for (&c, &v) in classes.iter().zip(probs) {
                if sums[c as usize] == 0.0 {
                    touched.push(c);
                }
                sums[c as usize] += v;
            }
        }
        touched.sort_unstable();
        let n = members.len() as f64;
        out.push(touched.iter().map(|&c| (c, sums[c as usize] / n)).collect());
        for &c in &touched {
            sums[c as usize] = 0.0;
        }
        touched.clear();
    }
    Ok(out)
}

/// Argmax of each superpixel posterior; the vectors are kept as the soft part.
pub fn match_by_soft_argmax(sp_posteriors: Vec<SparseVec>, target_count: usize) -> Result<MatchField> {
    let map = sp_posteriors
        .iter()
        .enumerate()
        .map(|(i, v)| sparse_argmax(v).ok_or_else(|| Error::InvalidArgument(format!("superpixel {i} has an empty posterior"))))
        .collect::<Result<Vec<_>>>()?;
    MatchField::new(0, 0, target_count, map)?.with_soft(sp_posteriors)
}

/// Forward-backward matching: `map[i] = argmax_n fw[i][n] * bw[n][i]`, falling
/// back to the forward argmax when every product is zero. The soft part is the
/// normalized product (or the normalized forward vector on fallback).
pub fn match_fwbw(fw: &[SparseVec], bw: &[SparseVec]) -> Result<MatchField> {
    let target_count = bw.len();
    let mut map = Vec::with_capacity(fw.len());
    let mut soft = Vec::with_capacity(fw.len());
    for (i, v) in fw.iter().enumerate() {
        let mut product = SparseVec::new();
        for &(n, p) in v {
            let back = bw.get(n as usize).ok_or_else(|| {
                Error::IndexOutOfRange(format!("forward vector {i} names target {n}, backward has {target_count}"))
            })?;
            let q = match back.binary_search_by_key(&(i as u32), |e| e.0) {
                Ok(k) => back[k].1,
                Err(_) => 0.0,
            };
            if p * q > 0.0 {
                product.push((n, p * q));
            }
        }
        if product.is_empty() {
            let arg = sparse_argmax(v).ok_or_else(|| Error::InvalidArgument(format!("superpixel {i} has an empty posterior")))?;
            map.push(arg);
            let total: f64 = v.iter().map(|e| e.1).sum();
            soft.push(v.iter().map(|&(n, p)| (n, p / total)).collect());
        } else {
            let total: f64 = product.iter().map(|e| e.1).sum();
            for e in product.iter_mut() {
                e.1 /= total;
            }
            map.push(sparse_argmax(&product).expect("non-empty"));
            soft.push(product);
        }
    }
    MatchField::new(0, 0, target_count, map)?.with_soft(soft)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg_1x(labels: Vec<u32>) -> Segmentation {
        Segmentation::from_labels(labels.len(), 1, labels).unwrap()
    }

    #[test]
    fn pixel_argmax_ties_low() {
        let f = PosteriorField::from_pixels(2, 1, 8, vec![vec![(7, 0.5), (2, 0.5)], vec![(5, 1.0)]]).unwrap();
        assert_eq!(pixel_argmax(&f), vec![2, 5]);
    }

    #[test]
    fn vote_examples() {
        let seg = seg_1x(vec![0; 15]);
        let mut px = vec![4u32; 10];
        px.extend([9; 5]);
        assert_eq!(match_by_vote(&px, &seg, 10).unwrap().map(), &[4]);
        let seg = seg_1x(vec![0; 14]);
        let mut px = vec![9u32; 7];
        px.extend([4; 7]);
        assert_eq!(match_by_vote(&px, &seg, 10).unwrap().map(), &[4]);
        assert!(match_by_vote(&px, &seg, 5).is_err());
    }

    #[test]
    fn superpixel_mean() {
        let f = PosteriorField::from_pixels(2, 1, 4, vec![vec![(1, 1.0)], vec![(3, 1.0)]]).unwrap();
        let sp = superpixel_posteriors(&f, &seg_1x(vec![0, 0])).unwrap();
        assert_eq!(sp, vec![vec![(1, 0.5), (3, 0.5)]]);
        let m = match_by_soft_argmax(sp, 4).unwrap();
        assert_eq!(m.map(), &[1]);
    }

    #[test]
    fn fwbw_example() {
        // Targets A=0, B=1; a single source superpixel f_0.
        let fw = vec![vec![(0, 0.6), (1, 0.4)]];
        let bw = vec![vec![(0, 0.1), (1, 0.9)], vec![(0, 0.9), (1, 0.1)]];
        let m = match_fwbw(&fw, &bw).unwrap();
        assert_eq!(m.map(), &[1]);
        let soft = &m.soft().unwrap()[0];
        assert!((soft[0].1 - 0.06 / 0.42).abs() < 1e-12 && (soft[1].1 - 0.36 / 0.42).abs() < 1e-12);
    }

    #[test]
    fn fwbw_zero_product_falls_back() {
        let fw = vec![vec![(0, 0.3), (1, 0.7)], vec![(0, 1.0)]];
        let bw = vec![vec![(1, 1.0)], vec![(1, 1.0)]];
        let m = match_fwbw(&fw, &bw).unwrap();
        assert_eq!(m.map(), &[1, 0]);
        assert_eq!(m.soft().unwrap()[0], fw[0]);
    }

    #[test]
    fn field_validation() {
        assert!(MatchField::new(0, 1, 3, vec![0, 3]).is_err());
        let m = MatchField::new(0, 1, 3, vec![0, 2]).unwrap();
        assert!(m.clone().with_soft(vec![vec![(0, 0.5)], vec![(2, 1.0)]]).is_err());
        assert!(m.with_soft(vec![vec![(0, 1.0)]]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MatchField::new(2, 5, 3, vec![2, 0])
            .unwrap()
            .with_soft(vec![vec![(1, 0.25), (2, 0.75)], vec![(0, 1.0)]])
            .unwrap();
        let p = dir.path().join("m.csv");
        m.write_csv(&p, true).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("source_index,target_index,p0,p1,p2\n0,2,0,0.25,0.75\n"));
        assert_eq!(MatchField::read_csv(&p, 2, 5, 3).unwrap(), m);
        m.write_csv(&p, false).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "source_index,target_index\n0,2\n1,0\n");
        assert_eq!(MatchField::read_csv(&p, 2, 5, 3).unwrap(), m.clone().hard());
        assert!(MatchField::read_csv(&p, 2, 5, 2).is_err());
    }
}
