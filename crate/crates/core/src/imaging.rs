//! Frames, ROI masks and sequences, plus their on-disk formats.
//!
//! Supported inputs are binary PNM (P6 for frames, P5 or P6 for masks,
//! maxval 255) and 8-bit PNG (gray, gray+alpha, RGB, RGBA; alpha is dropped).
//! Label maps are written as 16-bit grayscale PNG with a text sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::slic::Segmentation;

/// RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} RGB frame needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    /// Frame where every pixel has the same color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Frame::new(width, height, data)
    }

    /// Builds a frame from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Frame::new(width, height, data)
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Binary region of interest, one flag per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl RoiMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} mask needs {} flags, got {}",
                width,
                height,
                width * height,
                bits.len()
            )));
        }
        Ok(RoiMask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        RoiMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        RoiMask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_dims(&self, other: &RoiMask) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Ordered frames sharing one size, with a designated reference frame.
#[derive(Debug, Clone)]
pub struct Sequence {
    frames: Vec<Frame>,
    ref_index: usize,
}

impl Sequence {
    pub fn new(frames: Vec<Frame>, ref_index: usize) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("sequence has no frames".into()))?;
        let (w, h) = (first.width, first.height);
        for (i, f) in frames.iter().enumerate() {
            if f.width != w || f.height != h {
                return Err(Error::DimensionMismatch(format!(
                    "frame {i} is {}x{}, expected {w}x{h}",
                    f.width, f.height
                )));
            }
        }
        if ref_index >= frames.len() {
            return Err(Error::InvalidArgument(format!(
                "reference index {ref_index} outside 0..{}",
                frames.len()
            )));
        }
        Ok(Sequence { frames, ref_index })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, n: usize) -> &Frame {
        &self.frames[n]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn ref_index(&self) -> usize {
        self.ref_index
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// Checks that a mask can be used alongside this sequence.
    pub fn check_mask(&self, mask: &RoiMask) -> Result<()> {
        if mask.width != self.width() || mask.height != self.height() {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, sequence frames are {}x{}",
                mask.width,
                mask.height,
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }
}

/// Decoded 8-bit raster with 1 or 3 channels.
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        parse_pnm(path, &bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(&bytes)
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{}: not a binary PNM or PNG file",
            path.display()
        )))
    }
}

fn parse_pnm(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, "truncated PNM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::malformed(path, "bad number in PNM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: PNM maxval {maxval} (only 255 is supported)",
            path.display()
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::malformed(path, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::malformed(path, "missing separator after PNM header"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = width * height * channels;
    if payload.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: header says {width}x{height}x{channels} = {expected} bytes, payload has {}",
            path.display(),
            payload.len()
        )));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: payload.to_vec(),
    })
}

fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Ok(Raster {
            width,
            height,
            channels: 1,
            data: buf.into_raw(),
        }),
        DynamicImage::ImageLumaA8(_) => Ok(Raster {
            width,
            height,
            channels: 1,
            data: img.to_luma8().into_raw(),
        }),
        DynamicImage::ImageRgb8(buf) => Ok(Raster {
            width,
            height,
            channels: 3,
            data: buf.into_raw(),
        }),
        DynamicImage::ImageRgba8(_) => Ok(Raster {
            width,
            height,
            channels: 3,
            data: img.to_rgb8().into_raw(),
        }),
        other => Err(Error::UnsupportedFormat(format!(
            "PNG color type {:?} (expected 8-bit gray/RGB/RGBA)",
            other.color()
        ))),
    }
}

/// Reads an RGB frame from a P6 PNM or an 8-bit PNG.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    let data = match raster.channels {
        3 => raster.data,
        _ if path_is_png(path) => raster.data.iter().flat_map(|&v| [v, v, v]).collect(),
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: P5 graymap is not a color frame",
                path.display()
            )))
        }
    };
    Frame::new(raster.width, raster.height, data)
}

fn path_is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a mask; a pixel is set iff its first-channel intensity is at least `threshold`.
pub fn load_mask(path: impl AsRef<Path>, threshold: u8) -> Result<RoiMask> {
    let raster = read_raster(path.as_ref())?;
    let bits = raster
        .data
        .chunks_exact(raster.channels)
        .map(|px| px[0] >= threshold)
        .collect();
    RoiMask::new(raster.width, raster.height, bits)
}

pub const DEFAULT_MASK_THRESHOLD: u8 = 128;

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png<P>(path: &Path, buf: ImageBuffer<P, Vec<P::Subpixel>>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    write_bytes(path, &out.into_inner())
}

/// Writes a frame as P6 (`.ppm`) or PNG (any other extension).
pub fn write_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let mut bytes = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
        bytes.extend_from_slice(&frame.data);
        write_bytes(path, &bytes)
    } else {
        let buf = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, frame.data.clone())
            .expect("frame buffer size is an invariant");
        encode_png(path, buf)
    }
}

/// Writes a mask as 0/255 graymap: P5 for `.pgm`, PNG otherwise.
pub fn write_mask(mask: &RoiMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
        bytes.extend_from_slice(&data);
        write_bytes(path, &bytes)
    } else {
        let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, data)
            .expect("mask buffer size is an invariant");
        encode_png(path, buf)
    }
}

/// Sidecar path for a label map: same stem, `.txt` extension.
pub fn label_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

/// Writes superpixel indexes as a 16-bit gray PNG plus a text sidecar with
/// one `index centroid_x centroid_y size` line per superpixel.
pub fn write_label_map(seg: &Segmentation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if seg.count() > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{} superpixels do not fit a 16-bit label map (max {})",
            seg.count(),
            u16::MAX
        )));
    }
    let data: Vec<u16> = seg.labels().iter().map(|&l| l as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(seg.width() as u32, seg.height() as u32, data)
            .expect("label buffer size is an invariant");
    encode_png(path, buf)?;

    let sidecar = label_sidecar_path(path);
    let mut text = Vec::new();
    writeln!(text, "# index centroid_x centroid_y size").unwrap();
    for i in 0..seg.count() {
        let (cx, cy) = seg.centroid(i);
        writeln!(text, "{} {} {} {}", i, cx, cy, seg.size(i)).unwrap();
    }
    write_bytes(&sidecar, &text)
}

/// Reads a label map written by [`write_label_map`].
pub fn read_label_map(path: impl AsRef<Path>) -> Result<Segmentation> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels: Vec<u32> = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "label map color type {:?}",
                other.color()
            )))
        }
    };
    Segmentation::from_labels(w, h, labels)
}

/// Lists files in `dir` whose names match `pattern` (`*` wildcards only), sorted by name.
pub fn list_matching(dir: impl AsRef<Path>, pattern: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if entry.path().is_file() && wildcard_match(pattern, name) {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every matching frame in `dir` into a sequence.
pub fn load_sequence(dir: impl AsRef<Path>, pattern: &str, ref_index: usize) -> Result<Sequence> {
    let paths = list_matching(dir, pattern)?;
    let frames = paths.iter().map(load_frame).collect::<Result<Vec<_>>>()?;
    Sequence::new(frames, ref_index)
}

/// Glob matching with `*` as the only metacharacter.
pub fn wildcard_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for part in &parts[1..parts.len() - 1] {
        match rest.find(part) {
            Some(at) => rest = &rest[at + part.len()..],
            None => return false,
        }
    }
    true
}
