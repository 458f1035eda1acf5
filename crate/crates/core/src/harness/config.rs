use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::contrast::{ContrastConfig, NegativeSource, Strategy};
use crate::gaussmetric::Divergence;
use crate::maskio::MIN_REGION_CELLS;
use crate::regionstats::{CovarianceMode, DEFAULT_COV_EPS};
use crate::synthworld::LabelSetting;
use crate::{Error, Result};

/// How the contrast regions are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Extraction {
    /// The scene's region mask, downsampled to feature resolution.
    Region,
    /// A fixed grid of patches.
    Patch,
}

impl Extraction {
    pub fn name(self) -> &'static str {
        match self {
            Extraction::Region => "region",
            Extraction::Patch => "patch",
        }
    }
}

impl fmt::Display for Extraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Extraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "region" => Ok(Extraction::Region),
            "patch" => Ok(Extraction::Patch),
            _ => Err(Error::InvalidArgument(format!(
                "invalid extraction '{s}' (expected one of region, patch)"
            ))),
        }
    }
}

/// Patch extents in feature cells, written `4x4` (or `4` for square).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchSize {
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for PatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl FromStr for PatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad =
            || Error::InvalidArgument(format!("invalid patch size '{s}' (expected e.g. 4x4)"));
        let (h, w) = s.split_once('x').unwrap_or((s, s));
        let h: usize = h.trim().parse().map_err(|_| bad())?;
        let w: usize = w.trim().parse().map_err(|_| bad())?;
        if h == 0 || w == 0 {
            return Err(bad());
        }
        Ok(PatchSize {
            height: h,
            width: w,
        })
    }
}

/// Every knob of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub setting: LabelSetting,
    pub strategy: Strategy,
    pub extraction: Extraction,
    pub patch_size: PatchSize,
    pub distance: Divergence,
    pub cov_mode: CovarianceMode,
    pub negative_source: NegativeSource,
    pub tau: f64,
    pub eps: f64,
    pub lambda_rc: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub threads: usize,
}

impl RunConfig {
    /// Keys accepted in config files and as flags.
    pub const KEYS: [&'static str; 17] = [
        "data_dir",
        "out_dir",
        "setting",
        "strategy",
        "extraction",
        "patch_size",
        "distance",
        "cov_mode",
        "negative_source",
        "tau",
        "eps",
        "lambda_rc",
        "epochs",
        "batch",
        "lr",
        "seed",
        "threads",
    ];

    /// Defaults for everything except the dataset location.
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            out_dir: PathBuf::from("out"),
            setting: LabelSetting::OneLabel,
            strategy: Strategy::Gaussian,
            extraction: Extraction::Region,
            patch_size: PatchSize {
                height: 4,
                width: 4,
            },
            distance: Divergence::Wasserstein,
            cov_mode: CovarianceMode::Diag,
            negative_source: NegativeSource::PartnerMap,
            tau: 1.0,
            eps: DEFAULT_COV_EPS,
            lambda_rc: 1.0,
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            threads: 1,
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("unparsable value for {key}: '{v}'")))
        }
        fn named<T: FromStr<Err = Error>>(v: &str) -> Result<T> {
            v.parse().map_err(|e: Error| match e {
                Error::InvalidArgument(m) => Error::Config(m),
                other => other,
            })
        }
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "setting" => self.setting = named(v)?,
            "strategy" => self.strategy = named(v)?,
            "extraction" => self.extraction = named(v)?,
            "patch_size" => self.patch_size = named(v)?,
            "distance" => self.distance = named(v)?,
            "cov_mode" => self.cov_mode = named(v)?,
            "negative_source" => self.negative_source = named(v)?,
            "tau" => self.tau = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "lambda_rc" => self.lambda_rc = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}' (valid keys: {})",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Text form of `key`, parseable by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "setting" => self.setting.to_string(),
            "strategy" => self.strategy.to_string(),
            "extraction" => self.extraction.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "distance" => self.distance.to_string(),
            "cov_mode" => self.cov_mode.to_string(),
            "negative_source" => self.negative_source.name().to_string(),
            "tau" => self.tau.to_string(),
            "eps" => self.eps.to_string(),
            "lambda_rc" => self.lambda_rc.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("tau", self.tau), ("eps", self.eps), ("lr", self.lr)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.lambda_rc >= 0.0 && self.lambda_rc.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_rc must be non-negative, got {}",
                self.lambda_rc
            )));
        }
        for (k, v) in [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        Ok(())
    }

    /// `key = value` lines for every key.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Contrast settings of this run; `seed` drives the pixel draw.
    pub fn contrast_config(&self, seed: u64) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            strategy: self.strategy,
            distance: self.distance,
            negative_source: self.negative_source,
            symmetric_anchors: true,
            max_neg_pixels: 16,
            min_region_cells: MIN_REGION_CELLS,
            cov_mode: self.cov_mode,
            eps: self.eps,
            seed,
        }
    }
}

/// Builds a [`RunConfig`] from `key = value` text (`#` starts a comment)
/// followed by `overrides`, which win. `data_dir` is required.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::new("");
    let mut has_data_dir = false;
    let mut apply = |k: &str, v: &str| -> Result<()> {
        cfg.set(k, v)?;
        has_data_dir |= k == "data_dir";
        Ok(())
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            ))
        })?;
        apply(k.trim(), v)?;
    }
    for (k, v) in overrides {
        apply(k, v)?;
    }
    if !has_data_dir {
        return Err(Error::Config("missing required key data_dir".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// [`parse_config`] on an optional file.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}
