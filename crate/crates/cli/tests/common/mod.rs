//! Synthetic frames shared by the integration tests.
#![allow(dead_code)]

use spxtrack::imaging::{Frame, RoiMask};
use spxtrack::rng::SplitMix64;

fn hash(seed: u64, x: i64, y: i64) -> u64 {
    let mut r = SplitMix64::new(seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    r.next_u64()
}

/// Blocky colour noise: `cell`-pixel cells with random RGB in `[lo, hi)`.
pub fn block_texture(seed: u64, x: i64, y: i64, cell: i64, lo: u8, hi: u8) -> [u8; 3] {
    let h = hash(seed, x.div_euclid(cell), y.div_euclid(cell));
    let span = (hi - lo) as u64;
    [
        lo + (h % span) as u8,
        lo + ((h >> 16) % span) as u8,
        lo + ((h >> 32) % span) as u8,
    ]
}

/// A textured frame of any size.
pub fn textured_frame(width: usize, height: usize, seed: u64) -> Frame {
    Frame::from_fn(width, height, |x, y| block_texture(seed, x as i64, y as i64, 6, 0, 255)).unwrap()
}

/// Square of side `side` whose top-left corner is at `x0 + speed * n`, over a static background.
pub struct Drift {
    pub frames: Vec<Frame>,
    pub masks: Vec<RoiMask>,
}

pub fn drift_sequence(count: usize, width: usize, height: usize, side: usize, speed: usize, seed: u64) -> Drift {
    let y0 = (height - side) / 2;
    let x0 = 10;
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for n in 0..count {
        let left = x0 + speed * n;
        let inside = |x: usize, y: usize| x >= left && x < left + side && y >= y0 && y < y0 + side;
        frames.push(
            Frame::from_fn(width, height, |x, y| {
                if inside(x, y) {
                    let c = block_texture(seed + 1, (x - left) as i64, (y - y0) as i64, 5, 0, 70);
                    [165 + c[0], 40 + c[1], 30 + c[2]]
                } else {
                    let c = block_texture(seed, x as i64, y as i64, 8, 0, 70);
                    [30 + c[0], 90 + c[1], 110 + c[2]]
                }
            })
            .unwrap(),
        );
        masks.push(RoiMask::from_fn(width, height, inside));
    }
    Drift { frames, masks }
}
