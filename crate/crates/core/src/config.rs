//! Flat `key = value` run configuration.
//!
//! One file covers the phantom recipe, the network and the training
//! schedule. `#` starts a comment; blank lines are ignored; unknown keys
//! and malformed values are rejected with their line number. Command-line
//! flags are applied afterwards through [`RunConfig::set`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::blocks::BlockKind;
use crate::error::{invalid, Error, Result};
use crate::segnet::SegConfig;
use crate::synthdata::{PhantomSpec, Regime};
use crate::tensor::Precision;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // data
    pub regime: Regime,
    pub size: [usize; 3],
    /// `None` picks the regime default (2 for small_roi, 5 for multi_organ).
    pub num_classes: Option<usize>,
    pub noise_std: f64,
    pub roi_fraction: (f64, f64),
    pub n_distractors: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    // network
    pub variant: BlockKind,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_depths: Vec<usize>,
    pub channels: Vec<usize>,
    pub state_dim: usize,
    pub window: usize,
    pub heads: usize,
    // training
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub val_interval: usize,
    pub precision: Precision,
    /// Surface tolerance in mm; `None` uses the largest voxel spacing.
    pub tau: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = PhantomSpec::small_roi(0);
        let seg = SegConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            regime: data.regime,
            size: data.size,
            num_classes: None,
            noise_std: data.noise_std,
            roi_fraction: data.roi_fraction,
            n_distractors: data.n_distractors,
            n_train: 32,
            n_val: 4,
            n_test: 4,
            variant: seg.variant,
            in_channels: seg.in_channels,
            stem_channels: seg.stem_channels,
            stage_depths: seg.stage_depths,
            channels: seg.channels,
            state_dim: seg.state_dim,
            window: seg.window,
            heads: seg.heads,
            epochs: train.epochs,
            lr: train.lr,
            batch_size: train.batch_size,
            dice_weight: train.dice_weight,
            ce_weight: train.ce_weight,
            val_interval: train.val_interval,
            precision: train.precision,
            tau: None,
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 27] = [
    "seed",
    "regime",
    "size",
    "num_classes",
    "noise_std",
    "roi_fraction",
    "n_distractors",
    "n_train",
    "n_val",
    "n_test",
    "variant",
    "in_channels",
    "stem_channels",
    "width",
    "stage_depths",
    "channels",
    "state_dim",
    "window",
    "heads",
    "epochs",
    "lr",
    "batch_size",
    "dice_weight",
    "ce_weight",
    "val_interval",
    "precision",
    "tau",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid!("{key}: cannot parse {value:?}"))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "verify" | "f64" | "64" => Ok(Precision::Verify),
        "train" | "f32" | "32" => Ok(Precision::Train),
        _ => Err(invalid!("unknown precision {s:?} (expected verify or train)")),
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Verify => "verify",
        Precision::Train => "train",
    }
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| invalid!("line {}: {e}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(invalid!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(at)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| invalid!("{}: {e}", path.display()))
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "regime" => self.regime = value.parse()?,
            "size" => {
                let dims: Vec<usize> = value.split(['x', ',']).map(|v| num(key, v.trim())).collect::<Result<_>>()?;
                self.size = match dims[..] {
                    [s] => [s; 3],
                    [d, h, w] => [d, h, w],
                    _ => return Err(invalid!("size: expected N or DxHxW, got {value:?}")),
                };
            }
            "num_classes" => self.num_classes = if value == "auto" { None } else { Some(num(key, value)?) },
            "noise_std" => self.noise_std = num(key, value)?,
            "roi_fraction" => {
                let (lo, hi) = value
                    .split_once(',')
                    .ok_or_else(|| invalid!("roi_fraction: expected lo,hi, got {value:?}"))?;
                self.roi_fraction = (num(key, lo.trim())?, num(key, hi.trim())?);
            }
            "n_distractors" => self.n_distractors = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_val" => self.n_val = num(key, value)?,
            "n_test" => self.n_test = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "in_channels" => self.in_channels = num(key, value)?,
            "stem_channels" => self.stem_channels = num(key, value)?,
            "width" => {
                let seg = self.seg_config().with_width(num(key, value)?);
                self.stem_channels = seg.stem_channels;
                self.channels = seg.channels;
            }
            "stage_depths" => self.stage_depths = list(key, value)?,
            "channels" => self.channels = list(key, value)?,
            "state_dim" => self.state_dim = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "dice_weight" => self.dice_weight = num(key, value)?,
            "ce_weight" => self.ce_weight = num(key, value)?,
            "val_interval" => self.val_interval = num(key, value)?,
            "precision" => self.precision = parse_precision(value)?,
            "tau" => self.tau = if value == "auto" { None } else { Some(num(key, value)?) },
            _ => return Err(invalid!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.num_classes.unwrap_or(match self.regime {
            Regime::SmallRoi => 2,
            Regime::MultiOrgan => 5,
        })
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            regime: self.regime,
            size: self.size,
            num_classes: self.classes(),
            seed: self.seed,
            noise_std: self.noise_std,
            roi_fraction: self.roi_fraction,
            n_distractors: self.n_distractors,
        }
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig {
            variant: self.variant,
            in_channels: self.in_channels,
            num_classes: self.classes(),
            stem_channels: self.stem_channels,
            stage_depths: self.stage_depths.clone(),
            channels: self.channels.clone(),
            state_dim: self.state_dim,
            window: self.window,
            heads: self.heads,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            dice_weight: self.dice_weight,
            ce_weight: self.ce_weight,
            val_interval: self.val_interval,
            seed: self.seed,
            precision: self.precision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_spec().validate()?;
        self.seg_config().validate()?;
        self.train_config().validate()
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        for key in KEYS {
            let value = match key {
                "seed" => self.seed.to_string(),
                "regime" => self.regime.to_string(),
                "size" => join(&self.size, "x"),
                "num_classes" => opt(self.num_classes.map(|n| n.to_string())),
                "noise_std" => self.noise_std.to_string(),
                "roi_fraction" => format!("{},{}", self.roi_fraction.0, self.roi_fraction.1),
                "n_distractors" => self.n_distractors.to_string(),
                "n_train" => self.n_train.to_string(),
                "n_val" => self.n_val.to_string(),
                "n_test" => self.n_test.to_string(),
                "variant" => self.variant.to_string(),
                "in_channels" => self.in_channels.to_string(),
                "stem_channels" => self.stem_channels.to_string(),
                // Derived; the explicit channel list below is authoritative.
                "width" => continue,
                "stage_depths" => join(&self.stage_depths, ","),
                "channels" => join(&self.channels, ","),
                "state_dim" => self.state_dim.to_string(),
                "window" => self.window.to_string(),
                "heads" => self.heads.to_string(),
                "epochs" => self.epochs.to_string(),
                "lr" => self.lr.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "dice_weight" => self.dice_weight.to_string(),
                "ce_weight" => self.ce_weight.to_string(),
                "val_interval" => self.val_interval.to_string(),
                "precision" => precision_name(self.precision).to_string(),
                "tau" => opt(self.tau.map(|t| t.to_string())),
                _ => unreachable!("every key is listed"),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    /// 64-bit FNV-1a of the canonical text, as 16 hex digits.
    pub fn digest(&self) -> String {
        let hash = self
            .to_text()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
        format!("{hash:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_component_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.seg_config(), SegConfig::default());
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.phantom_spec(), PhantomSpec::small_roi(0));
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# desk run\nvariant = tshydra\n\nepochs=3   # short\nsize = 16x32x32\nwidth = 8\nroi_fraction = 0.002, 0.01\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.variant, BlockKind::TsHydra);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.size, [16, 32, 32]);
        assert_eq!(cfg.channels, vec![8, 16, 32, 64]);
        assert_eq!(cfg.stem_channels, 8);
        assert_eq!(cfg.roi_fraction, (0.002, 0.01));
    }

    #[test]
    fn unknown_key_names_the_line() {
        let err = RunConfig::parse("epochs = 2\n\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("learning_rate"), "{err}");
        let err = RunConfig::parse("epochs two\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = RunConfig::parse("lr = fast\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("lr"), "{err}");
    }

    #[test]
    fn text_round_trips_and_digest_tracks_changes() {
        let mut cfg = RunConfig::parse("regime = multi_organ\ntau = 2.5\nprecision = verify\n").unwrap();
        assert_eq!(cfg.classes(), 5);
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        let before = cfg.digest();
        cfg.set("lr", "0.002").unwrap();
        assert_ne!(cfg.digest(), before);
        assert_eq!(cfg.digest().len(), 16);
    }

    #[test]
    fn validation_catches_inconsistent_settings() {
        let mut cfg = RunConfig::default();
        cfg.set("num_classes", "3").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("epochs", "0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
