//! Context-rich multi-channel features.
//!
//! Feature `m` of pixel `p` is
//!
//! ```text
//! theta_m(p) = mean_w(p + dr, c) - beta * mean_w'(p + dr', c)
//! ```
//!
//! where `mean_w(q, c)` is the average of channel `c` over the `w x w` box
//! centred on `q`, offsets lie in a disc of radius `radius`, and
//! `beta` is 0 or 1. Box means are read from per-channel summed-area tables
//! in constant time. Values stay in 0..=255 intensity units.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Frame;
use crate::rng::SplitMix64;

/// One random feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureParam {
    pub w: u32,
    pub w2: u32,
    pub offset: (i32, i32),
    pub offset2: (i32, i32),
    pub beta: bool,
    /// 0 = red, 1 = green, 2 = blue.
    pub channel: u8,
}

/// Frozen parameter set shared by every frame of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub radius: u32,
    pub box_sizes: Vec<u32>,
    pub seed: u64,
    params: Vec<FeatureParam>,
}

pub const DEFAULT_FEATURE_COUNT: usize = 80;
pub const DEFAULT_RADIUS: u32 = 40;
pub const DEFAULT_BOX_SIZES: [u32; 3] = [3, 5, 7];

const BANK_FORMAT: &str = "spxtrack-feature-bank";
const BANK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    bank: FeatureBank,
}

impl FeatureBank {
    /// Generates a bank of `count` features.
    ///
    /// The first `box_sizes.len() * 3` features are the pixel's own local
    /// colour at every box size and channel (`offset = 0`, `beta = 0`). Each
    /// remaining feature draws, in order: `offset` and `offset2` by rejection
    /// from the integer square `[-radius, radius]^2` restricted to the closed
    /// disc, `w` and `w2` from `box_sizes`, `beta`, then the channel.
    pub fn generate(seed: u64, count: usize, radius: u32, box_sizes: &[u32]) -> Result<Self> {
        if box_sizes.is_empty() {
            return Err(Error::InvalidArgument("box_sizes is empty".into()));
        }
        if let Some(bad) = box_sizes.iter().find(|&&w| w == 0 || w % 2 == 0) {
            return Err(Error::InvalidArgument(format!("box size {bad} is not odd and positive")));
        }
        if radius < 1 {
            return Err(Error::InvalidArgument("feature radius must be >= 1".into()));
        }
        let forced = box_sizes.len() * 3;
        if count < forced {
            return Err(Error::InvalidArgument(format!(
                "{count} features cannot hold the {forced} local colour features"
            )));
        }
        let mut params = Vec::with_capacity(count);
        for &w in box_sizes {
            for channel in 0..3 {
                params.push(FeatureParam {
                    w,
                    w2: w,
                    offset: (0, 0),
                    offset2: (0, 0),
                    beta: false,
                    channel,
                });
            }
        }
        let mut rng = SplitMix64::new(seed);
        let r = radius as i64;
        let disc = |rng: &mut SplitMix64| loop {
            let dx = rng.below(2 * r as u64 + 1) as i64 - r;
            let dy = rng.below(2 * r as u64 + 1) as i64 - r;
            if dx * dx + dy * dy <= r * r {
                return (dx as i32, dy as i32);
            }
        };
        while params.len() < count {
            let offset = disc(&mut rng);
            let offset2 = disc(&mut rng);
            let w = box_sizes[rng.index(box_sizes.len())];
            let w2 = box_sizes[rng.index(box_sizes.len())];
            let beta = rng.coin();
            let channel = rng.below(3) as u8;
            params.push(FeatureParam {
                w,
                w2,
                offset,
                offset2,
                beta,
                channel,
            });
        }
        Ok(FeatureBank {
            radius,
            box_sizes: box_sizes.to_vec(),
            seed,
            params,
        })
    }

    pub fn count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[FeatureParam] {
        &self.params
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = BankFile {
            format: BANK_FORMAT.into(),
            version: BANK_VERSION,
            bank: self.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("bank serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BankFile = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        if file.format != BANK_FORMAT || file.version != BANK_VERSION {
            return Err(Error::malformed(
                path,
                format!("expected {BANK_FORMAT} v{BANK_VERSION}, found {} v{}", file.format, file.version),
            ));
        }
        Ok(file.bank)
    }
}

/// Summed-area tables of the three colour channels.
#[derive(Debug, Clone)]
pub struct IntegralStack {
    width: usize,
    height: usize,
    tables: [Vec<u64>; 3],
}

impl IntegralStack {
    pub fn new(frame: &Frame) -> Self {
        let (w, h) = (frame.width(), frame.height());
        let stride = w + 1;
        let mut tables = [vec![0u64; stride * (h + 1)], vec![0u64; stride * (h + 1)], vec![0u64; stride * (h + 1)]];
        let data = frame.data();
        for (c, table) in tables.iter_mut().enumerate() {
            for y in 0..h {
                let mut row = 0u64;
                for x in 0..w {
                    row += data[(y * w + x) * 3 + c] as u64;
                    table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
                }
            }
        }
        IntegralStack {
            width: w,
            height: h,
            tables,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Raw table entry: sum of channel `c` over `[0, x) x [0, y)`.
    pub fn table(&self, c: usize, x: usize, y: usize) -> u64 {
        self.tables[c][y * (self.width + 1) + x]
    }

    /// Sum of channel `c` over the inclusive rectangle `[x0, x1] x [y0, y1]`.
    #[inline]
    fn rect_sum(&self, c: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> u64 {
        let s = self.width + 1;
        let t = &self.tables[c];
        t[(y1 + 1) * s + x1 + 1] + t[y0 * s + x0] - t[y0 * s + x1 + 1] - t[(y1 + 1) * s + x0]
    }
}

/// Mean of channel `c` over the `w x w` box centred on `center`.
///
/// The centre is first clamped into the image, then the window is clipped
/// to the image and the sum is divided by the clipped area.
#[inline]
pub fn box_mean(stack: &IntegralStack, center: (i64, i64), w: u32, c: usize) -> f64 {
    let max_x = stack.width as i64 - 1;
    let max_y = stack.height as i64 - 1;
    let cx = center.0.clamp(0, max_x);
    let cy = center.1.clamp(0, max_y);
    let half = (w / 2) as i64;
    let x0 = (cx - half).max(0) as usize;
    let x1 = (cx + half).min(max_x) as usize;
    let y0 = (cy - half).max(0) as usize;
    let y1 = (cy + half).min(max_y) as usize;
    let area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    stack.rect_sum(c, x0, y0, x1, y1) as f64 / area
}

#[inline]
fn feature_value(stack: &IntegralStack, x: i64, y: i64, f: &FeatureParam) -> f64 {
    let c = f.channel as usize;
    let a = box_mean(stack, (x + f.offset.0 as i64, y + f.offset.1 as i64), f.w, c);
    if f.beta {
        a - box_mean(stack, (x + f.offset2.0 as i64, y + f.offset2.1 as i64), f.w2, c)
    } else {
        a
    }
}

/// Feature vector of the pixel at `pixel`.
pub fn features_at(stack: &IntegralStack, pixel: (usize, usize), bank: &FeatureBank) -> Vec<f64> {
    let (x, y) = (pixel.0 as i64, pixel.1 as i64);
    bank.params.iter().map(|f| feature_value(stack, x, y, f)).collect()
}

/// Dense features of every pixel of a frame.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pixels: usize,
    features: usize,
    /// Feature-major: `values[m * pixels + p]`.
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn compute(frame: &Frame, bank: &FeatureBank) -> Self {
        let stack = IntegralStack::new(frame);
        let (w, n) = (frame.width(), frame.pixel_count());
        let mut values = vec![0.0; bank.count() * n];
        for (m, f) in bank.params.iter().enumerate() {
            let column = &mut values[m * n..(m + 1) * n];
            for (p, v) in column.iter_mut().enumerate() {
                *v = feature_value(&stack, (p % w) as i64, (p / w) as i64, f);
            }
        }
        FeatureMatrix {
            pixels: n,
            features: bank.count(),
            values,
        }
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// All pixels' values of feature `m`.
    #[inline]
    pub fn column(&self, m: usize) -> &[f64] {
        &self.values[m * self.pixels..(m + 1) * self.pixels]
    }

    #[inline]
    pub fn get(&self, pixel: usize, m: usize) -> f64 {
        self.values[m * self.pixels + pixel]
    }

    /// Pixel-major copy, one contiguous row of `features()` values per pixel.
    pub fn rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for m in 0..self.features {
            for (p, &v) in self.column(m).iter().enumerate() {
                out[p * self.features + m] = v;
            }
        }
        out
    }
}
