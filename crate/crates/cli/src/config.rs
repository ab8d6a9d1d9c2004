//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use spxtrack::classifiers::ForestConfig;
use spxtrack::imaging::DEFAULT_MASK_THRESHOLD;
use spxtrack::slic::SlicConfig;
use spxtrack::tracking::{BankConfig, Direction, TrackerConfig};

use crate::CliError;

/// Every accepted key, in the order the manifest echoes them.
pub const KEYS: &[&str] = &[
    "sequence_dir",
    "pattern",
    "reference",
    "reference_mask",
    "gt_dir",
    "output_dir",
    "cache_dir",
    "seed",
    "jobs",
    "mask_threshold",
    "classifier",
    "matcher",
    "integration",
    "msi_strategy",
    "direction",
    "steps",
    "k_max",
    "budget",
    "superpixels",
    "compactness",
    "slic_iterations",
    "min_size_fraction",
    "features",
    "radius",
    "box_sizes",
    "trees",
    "max_depth",
    "min_leaf",
    "candidate_features",
    "candidate_thresholds",
    "bootstrap",
    "subsample",
    "knn_k",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sequence_dir: PathBuf,
    pub pattern: String,
    pub reference: usize,
    pub reference_mask: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// 0 lets the thread pool pick.
    pub jobs: usize,
    pub mask_threshold: u8,
    pub tracker: TrackerConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value {value:?} for key `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<Vec<T>, _>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(CliError::Config(format!("key `{key}` needs at least one value")))
            } else {
                Ok(v)
            }
        })
}

fn parse_named<T: std::str::FromStr<Err = spxtrack::Error>>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|e: spxtrack::Error| CliError::Config(format!("key `{key}`: {e}")))
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut values: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let key = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| CliError::Config(format!("line {}: unknown key `{key}`", i + 1)))?;
            if values.insert(key, (i + 1, value)).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        let get = |k: &str| values.get(k).map(|v| v.1);
        let path = |k: &str| get(k).filter(|v| !v.is_empty()).map(|v| base.join(v));
        let required = |k: &str| get(k).ok_or_else(|| CliError::Config(format!("missing required key `{k}`")));

        let mut t = TrackerConfig::default();
        macro_rules! set {
            ($key:literal, $target:expr, $parse:ident) => {
                if let Some(v) = get($key) {
                    $target = $parse($key, v)?;
                }
            };
        }
        t.seed = parse_value("seed", required("seed")?)?;
        set!("classifier", t.classifier, parse_named);
        set!("matcher", t.matcher, parse_named);
        set!("integration", t.integration, parse_named);
        set!("msi_strategy", t.msi_strategy, parse_named);
        if let Some(v) = get("direction") {
            t.direction = if v == "auto" { None } else { Some(parse_named("direction", v)?) };
        }
        set!("steps", t.plan.steps, parse_list);
        set!("k_max", t.plan.max_len, parse_value);
        set!("budget", t.plan.budget, parse_value);
        set!("superpixels", t.slic.target_count, parse_value);
        set!("compactness", t.slic.compactness, parse_value);
        set!("slic_iterations", t.slic.iterations, parse_value);
        set!("min_size_fraction", t.slic.enforce_min_size, parse_value);
        set!("features", t.bank.count, parse_value);
        set!("radius", t.bank.radius, parse_value);
        set!("box_sizes", t.bank.box_sizes, parse_list);
        set!("trees", t.forest.trees, parse_value);
        set!("max_depth", t.forest.max_depth, parse_value);
        set!("min_leaf", t.forest.min_leaf, parse_value);
        if let Some(v) = get("candidate_features") {
            t.forest.candidate_features = if v == "auto" { None } else { Some(parse_value("candidate_features", v)?) };
        }
        set!("candidate_thresholds", t.forest.candidate_thresholds, parse_value);
        set!("bootstrap", t.forest.bootstrap, parse_value);
        set!("subsample", t.forest.subsample, parse_value);
        set!("knn_k", t.knn_k, parse_value);

        let cfg = RunConfig {
            sequence_dir: path("sequence_dir").ok_or_else(|| CliError::Config("missing required key `sequence_dir`".into()))?,
            pattern: get("pattern").unwrap_or("*.png").to_string(),
            reference: get("reference").map(|v| parse_value("reference", v)).transpose()?.unwrap_or(0),
            reference_mask: path("reference_mask"),
            gt_dir: path("gt_dir"),
            output_dir: path("output_dir").ok_or_else(|| CliError::Config("missing required key `output_dir`".into()))?,
            cache_dir: path("cache_dir"),
            jobs: get("jobs").map(|v| parse_value("jobs", v)).transpose()?.unwrap_or(0),
            mask_threshold: get("mask_threshold")
                .map(|v| parse_value("mask_threshold", v))
                .transpose()?
                .unwrap_or(DEFAULT_MASK_THRESHOLD),
            tracker: t,
        };
        cfg.tracker
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// The config as `key = value` lines; parsing the output gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.tracker;
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("sequence_dir", self.sequence_dir.display().to_string());
        put("pattern", self.pattern.clone());
        put("reference", self.reference.to_string());
        put("reference_mask", opt_path(&self.reference_mask));
        put("gt_dir", opt_path(&self.gt_dir));
        put("output_dir", self.output_dir.display().to_string());
        put("cache_dir", opt_path(&self.cache_dir));
        put("seed", t.seed.to_string());
        put("jobs", self.jobs.to_string());
        put("mask_threshold", self.mask_threshold.to_string());
        put("classifier", t.classifier.name().into());
        put("matcher", t.matcher.name().into());
        put("integration", t.integration.name().into());
        put("msi_strategy", t.msi_strategy.name().into());
        put("direction", t.direction.map_or("auto", Direction::name).into());
        put("steps", join_list(&t.plan.steps));
        put("k_max", t.plan.max_len.to_string());
        put("budget", t.plan.budget.to_string());
        put("superpixels", t.slic.target_count.to_string());
        put("compactness", t.slic.compactness.to_string());
        put("slic_iterations", t.slic.iterations.to_string());
        put("min_size_fraction", t.slic.enforce_min_size.to_string());
        put("features", t.bank.count.to_string());
        put("radius", t.bank.radius.to_string());
        put("box_sizes", join_list(&t.bank.box_sizes));
        put("trees", t.forest.trees.to_string());
        put("max_depth", t.forest.max_depth.to_string());
        put("min_leaf", t.forest.min_leaf.to_string());
        put(
            "candidate_features",
            t.forest.candidate_features.map_or("auto".into(), |n| n.to_string()),
        );
        put("candidate_thresholds", t.forest.candidate_thresholds.to_string());
        put("bootstrap", t.forest.bootstrap.to_string());
        put("subsample", t.forest.subsample.to_string());
        put("knn_k", t.knn_k.to_string());
        out
    }

    /// Lines that determine the elementary fields, used to key the field cache.
    pub fn field_fingerprint_lines(&self) -> String {
        let t = &self.tracker;
        let f: &ForestConfig = &t.forest;
        let s: &SlicConfig = &t.slic;
        let b: &BankConfig = &t.bank;
        format!(
            "classifier={}\nmatcher={}\nslic={} {} {} {}\nbank={} {} {}\nforest={} {} {} {:?} {} {} {}\nknn_k={}\nseed={}\n",
            t.classifier.name(),
            t.matcher.name(),
            s.target_count,
            s.compactness,
            s.iterations,
            s.enforce_min_size,
            b.count,
            b.radius,
            join_list(&b.box_sizes),
            f.trees,
            f.max_depth,
            f.min_leaf,
            f.candidate_features,
            f.candidate_thresholds,
            f.bootstrap,
            f.subsample,
            t.knn_k,
            t.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> &'static Path {
        Path::new("/data")
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse("sequence_dir = seq\noutput_dir = /out\nseed = 7\n", base()).unwrap();
        assert_eq!(c.sequence_dir, PathBuf::from("/data/seq"));
        assert_eq!(c.output_dir, PathBuf::from("/out"));
        assert_eq!(c.tracker.seed, 7);
        assert_eq!(c.tracker.plan.steps, vec![1, 2, 5, 10, 20]);
        assert_eq!(c.pattern, "*.png");
        assert_eq!(c.reference_mask, None);
    }

    #[test]
    fn round_trip_through_text() {
        let text = "sequence_dir = s\noutput_dir = o\nseed = 3\nsteps = 1, 2, 5\nmatcher = vote\ndirection = to_reference\ncandidate_features = 4\nbox_sizes = 3,7\nreference_mask = m.png\n# comment\n\n";
        let c = RunConfig::parse(text, base()).unwrap();
        assert_eq!(c.tracker.plan.steps, vec![1, 2, 5]);
        assert_eq!(c.tracker.direction, Some(Direction::ToReference));
        let again = RunConfig::parse(&c.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
        for k in KEYS {
            assert!(c.to_text().contains(&format!("\n{k} = ")) || c.to_text().starts_with(k), "{k}");
        }
    }

    #[test]
    fn errors_name_the_problem() {
        let err = |t: &str| RunConfig::parse(t, base()).unwrap_err().to_string();
        assert!(err("sequence_dir = s\noutput_dir = o\nseed = 1\nfoo = 2\n").contains("`foo`"));
        assert!(err("sequence_dir = s\noutput_dir = o\n").contains("`seed`"));
        assert!(err("sequence_dir = s\noutput_dir = o\nseed = x\n").contains("`seed`"));
        assert!(err("sequence_dir = s\noutput_dir = o\nseed = 1\nseed = 2\n").contains("duplicate"));
        assert!(err("sequence_dir = s\noutput_dir = o\nseed = 1\nmatcher = best\n").contains("matcher"));
        assert!(err("sequence_dir = s\noutput_dir = o\nseed = 1\nintegration = SEQ\nsteps = 2\n").contains("step 1"));
        assert!(err("just text\n").contains("line 1"));
        for e in ["sequence_dir = s\noutput_dir = o\nseed = 1\ntrees = 0\n", "seed = 1\noutput_dir = o\n"] {
            assert!(matches!(RunConfig::parse(e, base()), Err(CliError::Config(_))));
        }
    }
}
