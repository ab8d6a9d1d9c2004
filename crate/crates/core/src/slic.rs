//! SLIC superpixels.
//!
//! Pixels are clustered in CIELAB (D65) plus image coordinates with the
//! distance `D = sqrt(d_lab^2 + (compactness / S)^2 * d_xy^2)`, where
//! `S = sqrt(W * H / target_count)` is the seed grid interval. Seeds start on a
//! regular grid and are moved to the lowest-gradient pixel of their 3x3
//! neighbourhood. After the k-means sweeps, connectivity is enforced so every
//! superpixel is a single 4-connected region of reasonable size.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::imaging::Frame;

/// Partition of a frame into superpixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    members: Vec<Vec<u32>>,
    centroids: Vec<(f64, f64)>,
}

impl Segmentation {
    /// Builds a segmentation from a dense label map. Labels must cover `0..count`
    /// with no gaps; connectivity is not checked here.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} label map needs {} entries, got {}",
                width,
                height,
                width * height,
                labels.len()
            )));
        }
        let count = *labels.iter().max().unwrap() as usize + 1;
        let mut members = vec![Vec::new(); count];
        for (i, &l) in labels.iter().enumerate() {
            members[l as usize].push(i as u32);
        }
        if let Some(empty) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::InvalidArgument(format!("superpixel {empty} has no pixels")));
        }
        let centroids = members
            .iter()
            .map(|m| {
                let (mut sx, mut sy) = (0u64, 0u64);
                for &p in m {
                    sx += p as u64 % width as u64;
                    sy += p as u64 / width as u64;
                }
                let n = m.len() as f64;
                (sx as f64 / n, sy as f64 / n)
            })
            .collect();
        Ok(Segmentation {
            width,
            height,
            labels,
            members,
            centroids,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn count(&self) -> usize {
        self.members.len()
    }

    /// Per-pixel superpixel index, row-major.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    /// Linear pixel indexes (`y * width + x`) of superpixel `i`.
    pub fn members(&self, i: usize) -> &[u32] {
        &self.members[i]
    }

    pub fn size(&self, i: usize) -> usize {
        self.members[i].len()
    }

    pub fn centroid(&self, i: usize) -> (f64, f64) {
        self.centroids[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicConfig {
    pub target_count: usize,
    pub compactness: f64,
    pub iterations: usize,
    /// Minimum superpixel size as a fraction of the mean size `W*H / clusters`.
    pub enforce_min_size: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        SlicConfig {
            target_count: 500,
            compactness: 10.0,
            iterations: 10,
            enforce_min_size: 0.25,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_count == 0 {
            return Err(Error::InvalidArgument("target_count must be >= 1".into()));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::InvalidArgument("compactness must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if !(self.enforce_min_size >= 0.0) {
            return Err(Error::InvalidArgument("enforce_min_size must be >= 0".into()));
        }
        Ok(())
    }
}

fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB (D65) to CIELAB.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let r = srgb_to_linear(rgb[0]);
    let g = srgb_to_linear(rgb[1]);
    let b = srgb_to_linear(rgb[2]);
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = (0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Clone, Copy)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

fn lab_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

/// Segments a frame into approximately `cfg.target_count` superpixels.
///
/// Seeding is a fixed grid, so the result depends only on the frame and the
/// config; `seed` is accepted to keep every stage seeded uniformly.
pub fn segment(frame: &Frame, cfg: &SlicConfig, _seed: u64) -> Result<Segmentation> {
    cfg.validate()?;
    let (w, h) = (frame.width(), frame.height());
    let n = w * h;
    if cfg.target_count > n {
        return Err(Error::InvalidArgument(format!(
            "target_count {} exceeds pixel count {}",
            cfg.target_count, n
        )));
    }
    let lab: Vec<[f64; 3]> = (0..n).map(|i| rgb_to_lab(frame.rgb(i % w, i / w))).collect();

    let step = (n as f64 / cfg.target_count as f64).sqrt();
    let nx = ((cfg.target_count as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w);
    let ny = ((cfg.target_count as f64 / nx as f64).round() as usize).clamp(1, h);

    let gradient = |x: usize, y: usize| -> f64 {
        let xl = x.saturating_sub(1);
        let xr = (x + 1).min(w - 1);
        let yu = y.saturating_sub(1);
        let yd = (y + 1).min(h - 1);
        lab_dist2(&lab[y * w + xr], &lab[y * w + xl]) + lab_dist2(&lab[yd * w + x], &lab[yu * w + x])
    };

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            // Grid position in pixel-index coordinates (pixel x spans [x - 0.5, x + 0.5]).
            let gx = (i as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let gy = (j as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let mut cx = (gx.round() as usize).min(w - 1);
            let mut cy = (gy.round() as usize).min(h - 1);
            let mut moved = false;
            if step >= 3.0 {
                let mut best = gradient(cx, cy);
                let (ox, oy) = (cx, cy);
                for yy in oy.saturating_sub(1)..=(oy + 1).min(h - 1) {
                    for xx in ox.saturating_sub(1)..=(ox + 1).min(w - 1) {
                        let g = gradient(xx, yy);
                        if g < best {
                            best = g;
                            cx = xx;
                            cy = yy;
                            moved = true;
                        }
                    }
                }
            }
            let (x, y) = if moved { (cx as f64, cy as f64) } else { (gx, gy) };
            centers.push(Center {
                lab: lab[cy * w + cx],
                x,
                y,
            });
        }
    }

    let k = centers.len();
    let spatial_weight = (cfg.compactness / step).powi(2);
    let radius = step.max(w as f64 / nx as f64).max(h as f64 / ny as f64).ceil() as i64;
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];

    for _ in 0..cfg.iterations {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = (c.x.round() as i64 - radius).max(0) as usize;
            let x1 = (c.x.round() as i64 + radius).min(w as i64 - 1) as usize;
            let y0 = (c.y.round() as i64 - radius).max(0) as usize;
            let y1 = (c.y.round() as i64 + radius).min(h as i64 - 1) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let dx = x as f64 - c.x;
                    let dy = y as f64 - c.y;
                    let d = lab_dist2(&lab[p], &c.lab) + spatial_weight * (dx * dx + dy * dy);
                    // Strict comparison keeps the lower cluster index on ties.
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        // Pixels outside every search window fall back to a full scan.
        for p in 0..n {
            if labels[p] == u32::MAX {
                let (x, y) = ((p % w) as f64, (p / w) as f64);
                let mut best = f64::INFINITY;
                for (ci, c) in centers.iter().enumerate() {
                    let d = lab_dist2(&lab[p], &c.lab)
                        + spatial_weight * ((x - c.x).powi(2) + (y - c.y).powi(2));
                    if d < best {
                        best = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }

        let mut sums = vec![[0.0f64; 6]; k];
        for p in 0..n {
            let s = &mut sums[labels[p] as usize];
            s[0] += lab[p][0];
            s[1] += lab[p][1];
            s[2] += lab[p][2];
            s[3] += (p % w) as f64;
            s[4] += (p / w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                c.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
                c.x = s[3] / s[5];
                c.y = s[4] / s[5];
            }
        }
    }

    let min_size = ((cfg.enforce_min_size * n as f64 / k as f64).round() as usize).max(1);
    Ok(enforce_connectivity(&labels, w, h, min_size))
}

/// Splits a raw label map into 4-connected regions and absorbs every region
/// that is not the largest piece of its label, or is smaller than `min_size`,
/// into its largest adjacent surviving region. Output labels are dense and
/// numbered in raster order of first appearance.
pub fn enforce_connectivity(labels: &[u32], width: usize, height: usize, min_size: usize) -> Segmentation {
    let n = width * height;
    assert_eq!(labels.len(), n, "label map does not cover the grid");
    const NONE: usize = usize::MAX;

    // 4-connected components in raster order.
    let mut comp = vec![NONE; n];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != NONE {
            continue;
        }
        let id = comp_label.len();
        let l = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if comp[q] == NONE && labels[q] == l {
                    comp[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        comp_label.push(l);
        comp_size.push(size);
    }
    let ncomp = comp_label.len();

    // The first largest component of each label survives if it is big enough.
    let mut largest_of_label: std::collections::HashMap<u32, usize> = Default::default();
    for c in 0..ncomp {
        let e = largest_of_label.entry(comp_label[c]).or_insert(c);
        if comp_size[c] > comp_size[*e] {
            *e = c;
        }
    }
    let mut region = vec![NONE; ncomp];
    let mut region_size = vec![0usize; ncomp];
    for &c in largest_of_label.values() {
        if comp_size[c] >= min_size {
            region[c] = c;
            region_size[c] = comp_size[c];
        }
    }
    if region.iter().all(|&r| r == NONE) {
        let mut best = 0;
        for c in 1..ncomp {
            if comp_size[c] > comp_size[best] {
                best = c;
            }
        }
        region[best] = best;
        region_size[best] = comp_size[best];
    }

    let mut adjacency = vec![Vec::new(); ncomp];
    for p in 0..n {
        let (x, y) = (p % width, p / width);
        let a = comp[p];
        if x + 1 < width && comp[p + 1] != a {
            adjacency[a].push(comp[p + 1]);
            adjacency[comp[p + 1]].push(a);
        }
        if y + 1 < height && comp[p + width] != a {
            adjacency[a].push(comp[p + width]);
            adjacency[comp[p + width]].push(a);
        }
    }
    for adj in adjacency.iter_mut() {
        adj.sort_unstable();
        adj.dedup();
    }

    loop {
        let mut pending = false;
        for c in 0..ncomp {
            if region[c] != NONE {
                continue;
            }
            let mut best: Option<usize> = None;
            for &d in &adjacency[c] {
                let r = region[d];
                if r == NONE {
                    continue;
                }
                best = match best {
                    Some(b) if region_size[b] > region_size[r] || (region_size[b] == region_size[r] && b <= r) => Some(b),
                    _ => Some(r),
                };
            }
            match best {
                Some(r) => {
                    region[c] = r;
                    region_size[r] += comp_size[c];
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
    }

    let mut dense = vec![u32::MAX; ncomp];
    let mut next = 0u32;
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let r = region[comp[p]];
        if dense[r] == u32::MAX {
            dense[r] = next;
            next += 1;
        }
        out.push(dense[r]);
    }
    Segmentation::from_labels(width, height, out).expect("dense relabeling covers every index")
}
