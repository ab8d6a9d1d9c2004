//! End-to-end tracking: segmentation, elementary fields, integration, masks.
//!
//! A run fixes one reference frame with a known ROI. Every frame is
//! segmented, elementary match fields are computed for the frame pairs the
//! integration mode needs, and long-term fields between the reference and
//! every other frame are assembled in both temporal directions. The ROI is
//! then carried over superpixel by superpixel.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::classifiers::{knn_posteriors_from_features, posteriors_from_features, train_forest_on, ForestConfig, PosteriorField};
use crate::error::{Error, Result};
use crate::features::{FeatureBank, FeatureMatrix, DEFAULT_BOX_SIZES, DEFAULT_FEATURE_COUNT, DEFAULT_RADIUS};
use crate::imaging::{RoiMask, Sequence};
use crate::matching::{match_by_soft_argmax, match_by_vote, match_fwbw, pixel_argmax, superpixel_posteriors, MatchField, SparseVec};
use crate::metrics::fwbw_consistency;
use crate::multistep::{compose_path, gather_candidates, prune_and_sample, vote_superpixel, FieldMap, MsiStrategy, StepPlan, TimeDirection};
use crate::slic::{segment, Segmentation, SlicConfig};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident = $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " {:?} (expected one of: ", $($text, " "),+, ")"),
                        s
                    ))),
                }
            }
        }
    };
}

named_enum!(ClassifierKind { Forest = "forest", Knn = "knn" });
named_enum!(MatcherKind { Vote = "vote", Soft = "soft", Fwbw = "fwbw" });
named_enum!(Integration { Dir = "DIR", Seq = "SEQ", Msi = "MSI" });
named_enum!(
    /// Which long-term field paints the masks.
    Direction { FromReference = "from_reference", ToReference = "to_reference" }
);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankConfig {
    pub count: usize,
    pub radius: u32,
    pub box_sizes: Vec<u32>,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            count: DEFAULT_FEATURE_COUNT,
            radius: DEFAULT_RADIUS,
            box_sizes: DEFAULT_BOX_SIZES.to_vec(),
        }
    }
}

/// Every knob of a tracking run. Stage seeds derive from `seed` by fixed
/// offsets: SLIC `+0`, feature bank `+1`, forest `+2`, direct sampling `+3`,
/// reverse sampling `+4`. The seeds stored in `plan` and `forest` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub classifier: ClassifierKind,
    pub matcher: MatcherKind,
    pub integration: Integration,
    pub msi_strategy: MsiStrategy,
    /// `None` picks `to_reference` for DIR and `from_reference` otherwise.
    pub direction: Option<Direction>,
    pub plan: StepPlan,
    pub slic: SlicConfig,
    pub bank: BankConfig,
    pub forest: ForestConfig,
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            classifier: ClassifierKind::Forest,
            matcher: MatcherKind::Fwbw,
            integration: Integration::Msi,
            msi_strategy: MsiStrategy::Mutual,
            direction: None,
            plan: StepPlan {
                steps: vec![1, 2, 5, 10, 20],
                max_len: 7,
                budget: 200,
                seed: 0,
            },
            slic: SlicConfig::default(),
            bank: BankConfig::default(),
            forest: ForestConfig::default(),
            knn_k: 5,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn slic_seed(&self) -> u64 {
        self.seed
    }

    pub fn bank_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn forest_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn sampling_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn reverse_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn effective_direction(&self) -> Direction {
        self.direction.unwrap_or(match self.integration {
            Integration::Dir => Direction::ToReference,
            Integration::Seq | Integration::Msi => Direction::FromReference,
        })
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            seed: self.forest_seed(),
            ..self.forest
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.slic.validate()?;
        self.forest_config().validate()?;
        self.plan.validate()?;
        FeatureBank::generate(self.bank_seed(), self.bank.count, self.bank.radius, &self.bank.box_sizes)?;
        if self.knn_k == 0 {
            return Err(Error::InvalidArgument("knn_k must be >= 1".into()));
        }
        if self.integration == Integration::Seq && !self.plan.steps.contains(&1) {
            return Err(Error::InvalidArgument("SEQ integration needs step 1 in the step set".into()));
        }
        Ok(())
    }
}

/// Superpixels whose pixels lie at least half inside `mask`, as a membership vector.
pub fn propagate_roi_labels(mask: &RoiMask, seg: &Segmentation) -> Result<Vec<bool>> {
    if mask.width() != seg.width() || mask.height() != seg.height() {
        return Err(Error::DimensionMismatch("mask and segmentation sizes differ".into()));
    }
    let mut inside = vec![0usize; seg.count()];
    for (&b, &l) in mask.bits().iter().zip(seg.labels()) {
        if b {
            inside[l as usize] += 1;
        }
    }
    Ok((0..seg.count()).map(|i| 2 * inside[i] >= seg.size(i)).collect())
}

/// Mask covering the selected superpixels.
pub fn paint(seg: &Segmentation, selected: &[bool]) -> RoiMask {
    let bits = seg.labels().iter().map(|&l| selected[l as usize]).collect();
    RoiMask::new(seg.width(), seg.height(), bits).expect("segmentation dimensions")
}

/// The ROI snapped to superpixels.
pub fn quantize_roi(mask: &RoiMask, seg: &Segmentation) -> Result<RoiMask> {
    Ok(paint(seg, &propagate_roi_labels(mask, seg)?))
}

/// Segments every frame with the SLIC seed of `cfg`.
pub fn segment_sequence(seq: &Sequence, cfg: &TrackerConfig) -> Result<Vec<Segmentation>> {
    seq.frames()
        .par_iter()
        .map(|f| segment(f, &cfg.slic, cfg.slic_seed()))
        .collect()
}

/// Ordered pairs `(n, n+a)` and `(n+a, n)` for every step `a` that stays inside the sequence.
pub fn elementary_pairs(len: usize, steps: &[usize]) -> BTreeSet<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    for &a in steps {
        if a == 0 {
            continue;
        }
        for n in 0..len.saturating_sub(a) {
            pairs.insert((n, n + a));
            pairs.insert((n + a, n));
        }
    }
    pairs
}

/// Pairs between the reference and every other frame, both ways.
pub fn reference_pairs(len: usize, reference: usize) -> BTreeSet<(usize, usize)> {
    (0..len)
        .filter(|&n| n != reference)
        .flat_map(|n| [(reference, n), (n, reference)])
        .collect()
}

/// Pairs required by the integration mode of `cfg`.
pub fn required_pairs(len: usize, reference: usize, cfg: &TrackerConfig) -> BTreeSet<(usize, usize)> {
    match cfg.integration {
        Integration::Dir => reference_pairs(len, reference),
        Integration::Seq => elementary_pairs(len, &[1]),
        Integration::Msi => elementary_pairs(len, &cfg.plan.steps),
    }
}

/// Elementary fields plus how many came from the cache.
#[derive(Debug, Clone, Default)]
pub struct ElementaryFields {
    pub fields: FieldMap,
    pub computed: usize,
    pub reused: usize,
}

/// Cache file of one ordered pair.
pub fn field_cache_path(cache: &Path, from: usize, to: usize) -> PathBuf {
    cache.join(format!("field_{from:05}_{to:05}.csv"))
}

struct PairPosterior {
    superpixel: Vec<SparseVec>,
    pixel_map: Option<Vec<u32>>,
}

/// Match fields for `pairs`; a pair `(a, b)` maps superpixels of frame `a`
/// to those of frame `b`, using a classifier trained on `b` and queried on `a`.
///
/// With `cache`, existing entries are read instead of computed and new ones
/// are written once. Cached fields never carry soft vectors, so neither do
/// computed ones.
pub fn compute_elementary_fields(
    seq: &Sequence,
    segs: &[Segmentation],
    pairs: &BTreeSet<(usize, usize)>,
    cfg: &TrackerConfig,
    cache: Option<&Path>,
) -> Result<ElementaryFields> {
    if segs.len() != seq.len() {
        return Err(Error::DimensionMismatch(format!("{} segmentations for {} frames", segs.len(), seq.len())));
    }
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= seq.len() || b >= seq.len() || a == b) {
        return Err(Error::IndexOutOfRange(format!("pair ({a}, {b}) in a sequence of {} frames", seq.len())));
    }
    let mut out = ElementaryFields::default();
    let mut missing = BTreeSet::new();
    for &(a, b) in pairs {
        let cached = cache.map(|c| field_cache_path(c, a, b)).filter(|p| p.is_file());
        match cached {
            Some(path) => {
                let field = MatchField::read_csv(&path, a, b, segs[b].count())?;
                if field.source_count() != segs[a].count() {
                    return Err(Error::malformed(&path, "cached field does not match the segmentation"));
                }
                out.fields.insert((a, b), field);
                out.reused += 1;
            }
            None => {
                missing.insert((a, b));
            }
        }
    }
    if missing.is_empty() {
        return Ok(out);
    }

    let mut posterior_pairs = missing.clone();
    if cfg.matcher == MatcherKind::Fwbw {
        posterior_pairs.extend(missing.iter().map(|&(a, b)| (b, a)));
    }
    let mut by_target: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in &posterior_pairs {
        by_target.entry(b).or_default().push(a);
    }

    let bank = FeatureBank::generate(cfg.bank_seed(), cfg.bank.count, cfg.bank.radius, &cfg.bank.box_sizes)?;
    let forest_cfg = cfg.forest_config();
    let groups: Vec<Vec<((usize, usize), PairPosterior)>> = by_target
        .into_par_iter()
        .map(|(b, sources)| -> Result<Vec<((usize, usize), PairPosterior)>> {
            let target = seq.frame(b);
            let train = FeatureMatrix::compute(target, &bank);
            let forest = match cfg.classifier {
                ClassifierKind::Forest => Some(train_forest_on(&train, segs[b].labels(), segs[b].count(), &forest_cfg)?),
                ClassifierKind::Knn => None,
            };
            sources
                .into_iter()
                .map(|a| {
                    let source = seq.frame(a);
                    let query = FeatureMatrix::compute(source, &bank);
                    let field: PosteriorField = match &forest {
                        Some(forest) => posteriors_from_features(forest, &query, source.width(), source.height())?,
                        None => knn_posteriors_from_features(
                            &train,
                            segs[b].labels(),
                            segs[b].count(),
                            &query,
                            source.width(),
                            source.height(),
                            cfg.knn_k,
                        )?,
                    };
                    let pixel_map = (cfg.matcher == MatcherKind::Vote).then(|| pixel_argmax(&field));
                    let superpixel = if cfg.matcher == MatcherKind::Vote {
                        Vec::new()
                    } else {
                        superpixel_posteriors(&field, &segs[a])?
                    };
                    Ok(((a, b), PairPosterior { superpixel, pixel_map }))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut posteriors: BTreeMap<(usize, usize), PairPosterior> = groups.into_iter().flatten().collect();

    for &(a, b) in &missing {
        let target_count = segs[b].count();
        let field = match cfg.matcher {
            MatcherKind::Vote => {
                let pixel_map = posteriors[&(a, b)].pixel_map.as_deref().expect("vote keeps pixel maps");
                match_by_vote(pixel_map, &segs[a], target_count)?
            }
            MatcherKind::Soft => {
                let sp = std::mem::take(&mut posteriors.get_mut(&(a, b)).expect("computed").superpixel);
                match_by_soft_argmax(sp, target_count)?
            }
            MatcherKind::Fwbw => match_fwbw(&posteriors[&(a, b)].superpixel, &posteriors[&(b, a)].superpixel)?,
        }
        .between(a, b)
        .hard();
        if let Some(cache) = cache {
            write_once(&field, cache, a, b)?;
        }
        out.fields.insert((a, b), field);
        out.computed += 1;
    }
    Ok(out)
}

fn write_once(field: &MatchField, cache: &Path, a: usize, b: usize) -> Result<()> {
    fs::create_dir_all(cache).map_err(|e| Error::io(cache, e))?;
    let path = field_cache_path(cache, a, b);
    if path.exists() {
        return Ok(());
    }
    let tmp = cache.join(format!(".field_{a:05}_{b:05}.{}.tmp", std::process::id()));
    field.write_csv(&tmp, false)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Long-term fields between the reference and one other frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTrack {
    pub frame: usize,
    /// Reference superpixels to frame superpixels.
    pub forward: MatchField,
    /// Frame superpixels to reference superpixels.
    pub backward: MatchField,
    pub mask: RoiMask,
    /// Superpixels where the mutual vote fell back to direct-plus-reverse (both directions).
    pub mutual_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub reference: usize,
    pub segmentations: Vec<Segmentation>,
    /// Reference superpixels that belong to the ROI.
    pub object: Vec<bool>,
    pub quantized_reference: RoiMask,
    /// One entry per non-reference frame, in frame order.
    pub frames: Vec<FrameTrack>,
    pub fields_computed: usize,
    pub fields_reused: usize,
    /// Wall time of each stage in seconds.
    pub timings: Vec<(&'static str, f64)>,
}

impl TrackResult {
    /// Forward-backward consistency of one tracked frame, in percent.
    pub fn consistency(&self, track: &FrameTrack) -> Result<f64> {
        fwbw_consistency(
            &self.quantized_reference,
            &self.segmentations[self.reference],
            &track.forward,
            &track.backward,
        )
    }
}

/// Long-term field `from -> to` by voting over sampled multi-step paths.
fn msi_field(fields: &FieldMap, from: usize, to: usize, cfg: &TrackerConfig) -> Result<(MatchField, usize)> {
    let distance = from.abs_diff(to);
    let direct = prune_and_sample(distance, &cfg.plan.with_seed(cfg.sampling_seed()))?;
    if direct.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "distance {distance} cannot be reached with steps {:?} in at most {} steps",
            cfg.plan.steps, cfg.plan.max_len
        )));
    }
    let reverse = if cfg.msi_strategy == MsiStrategy::Direct {
        Vec::new()
    } else {
        prune_and_sample(distance, &cfg.plan.with_seed(cfg.reverse_seed()))?
    };
    let candidates = gather_candidates(fields, &direct, &reverse, from, to)?;
    let mut fallbacks = 0;
    let map = candidates
        .direct
        .iter()
        .zip(&candidates.reverse)
        .map(|(d, r)| {
            let (t, fell_back) = vote_superpixel(d, r, cfg.msi_strategy).expect("direct candidates present");
            fallbacks += usize::from(fell_back);
            t
        })
        .collect();
    Ok((MatchField::new(from, to, candidates.target_count, map)?, fallbacks))
}

/// Forward and backward long-term fields for frame `n`, per the integration mode.
pub fn long_term_fields(fields: &FieldMap, reference: usize, n: usize, cfg: &TrackerConfig) -> Result<(MatchField, MatchField, usize)> {
    let get = |a: usize, b: usize| fields.get(&(a, b)).cloned().ok_or(Error::MissingField { from: a, to: b });
    match cfg.integration {
        Integration::Dir => Ok((get(reference, n)?, get(n, reference)?, 0)),
        Integration::Seq => {
            let ones = vec![1; reference.abs_diff(n)];
            Ok((
                compose_path(fields, &ones, reference, TimeDirection::between(reference, n))?,
                compose_path(fields, &ones, n, TimeDirection::between(n, reference))?,
                0,
            ))
        }
        Integration::Msi => {
            let (fw, a) = msi_field(fields, reference, n, cfg)?;
            let (bw, b) = msi_field(fields, n, reference, cfg)?;
            Ok((fw, bw, a + b))
        }
    }
}

/// Mask of frame `n` from the long-term fields and the reference object set.
pub fn frame_mask(seg_n: &Segmentation, object: &[bool], forward: &MatchField, backward: &MatchField, direction: Direction) -> RoiMask {
    let selected: Vec<bool> = match direction {
        Direction::ToReference => (0..seg_n.count()).map(|s| object[backward.get(s)]).collect(),
        Direction::FromReference => {
            let mut sel = vec![false; seg_n.count()];
            for (f, &inside) in object.iter().enumerate() {
                if inside {
                    sel[forward.get(f)] = true;
                }
            }
            sel
        }
    };
    paint(seg_n, &selected)
}

/// Runs the integration mode of `cfg` over `seq`, carrying `reference_mask`.
pub fn track(seq: &Sequence, reference_mask: &RoiMask, cfg: &TrackerConfig, cache: Option<&Path>) -> Result<TrackResult> {
    cfg.validate()?;
    seq.check_mask(reference_mask)?;
    let reference = seq.ref_index();
    let mut timings = Vec::new();

    let t = Instant::now();
    let segmentations = segment_sequence(seq, cfg)?;
    timings.push(("segment", t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let pairs = required_pairs(seq.len(), reference, cfg);
    let elementary = compute_elementary_fields(seq, &segmentations, &pairs, cfg, cache)?;
    timings.push(("fields", t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let object = propagate_roi_labels(reference_mask, &segmentations[reference])?;
    let quantized_reference = paint(&segmentations[reference], &object);
    let direction = cfg.effective_direction();
    let frames = (0..seq.len())
        .filter(|&n| n != reference)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|n| {
            let (forward, backward, mutual_fallbacks) = long_term_fields(&elementary.fields, reference, n, cfg)?;
            let mask = frame_mask(&segmentations[n], &object, &forward, &backward, direction);
            Ok(FrameTrack {
                frame: n,
                forward,
                backward,
                mask,
                mutual_fallbacks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    timings.push(("integrate", t.elapsed().as_secs_f64()));

    Ok(TrackResult {
        reference,
        segmentations,
        object,
        quantized_reference,
        frames,
        fields_computed: elementary.computed,
        fields_reused: elementary.reused,
        timings,
    })
}

/// Direct matching of every frame with the reference.
pub fn track_dir(seq: &Sequence, reference_mask: &RoiMask, cfg: &TrackerConfig, cache: Option<&Path>) -> Result<TrackResult> {
    track(seq, reference_mask, &TrackerConfig { integration: Integration::Dir, ..cfg.clone() }, cache)
}

/// Chained step-1 matching.
pub fn track_seq(seq: &Sequence, reference_mask: &RoiMask, cfg: &TrackerConfig, cache: Option<&Path>) -> Result<TrackResult> {
    track(seq, reference_mask, &TrackerConfig { integration: Integration::Seq, ..cfg.clone() }, cache)
}

/// Multi-step integration with candidate voting.
pub fn track_msi(seq: &Sequence, reference_mask: &RoiMask, cfg: &TrackerConfig, cache: Option<&Path>) -> Result<TrackResult> {
    track(seq, reference_mask, &TrackerConfig { integration: Integration::Msi, ..cfg.clone() }, cache)
}
