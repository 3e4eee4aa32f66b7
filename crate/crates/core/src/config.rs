//! Flat `key = value` run configuration.
//!
//! Every key doubles as a command-line flag (`solver` ↔ `--solver`,
//! `spst_threshold` ↔ `--spst-threshold`); flags override file values,
//! which override defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::datagen::{BenchmarkSpec, DomainSpec};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::ot::{OtConfig, Solver};
use crate::renderer::{CameraRig, RenderParams};

macro_rules! config {
    ($($key:ident: $ty:ty = $default:expr, $doc:literal;)*) => {
        /// Full hyperparameter record of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $(#[doc = $doc] pub $key: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl Config {
            /// All recognised keys in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = parse_value::<$ty>(key, value)?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!(
                        "unknown key `{key}`; valid keys: {}",
                        Self::KEYS.join(", ")
                    ))),
                }
            }

            /// `(key, value)` pairs in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string())),*]
            }
        }
    };
}

config! {
    seed: u64 = 0, "Master seed.";
    classes: usize = 5, "Number of shape classes.";
    points: usize = 128, "Points per source cloud.";
    train_per_class: usize = 200, "Training clouds per class and domain.";
    test_per_class: usize = 50, "Test clouds per class and domain.";
    source_noise: f64 = 0.0, "Source jitter sigma.";
    source_crop: f64 = 0.0, "Fraction of the turn removed from source clouds.";
    source_bias: f64 = 0.0, "Source vertical sampling bias.";
    target_noise: f64 = 0.03, "Target jitter sigma.";
    target_crop: f64 = 0.35, "Fraction of the turn removed from target clouds.";
    target_points: usize = 128, "Points per target cloud.";
    target_bias: f64 = 0.0, "Target vertical sampling bias.";
    emb_dim: usize = 64, "Encoder embedding width.";
    proj_dim: usize = 32, "Projection head width.";
    point_hidden: Widths = Widths(vec![64, 128]), "Point MLP hidden widths, comma separated.";
    conv_channels: Widths = Widths(vec![8, 16, 32]), "Image encoder channels per stride-2 conv.";
    clf_hidden: Widths = Widths(vec![64, 32]), "Classifier hidden widths.";
    dropout: f64 = 0.5, "Classifier dropout rate.";
    views: usize = 12, "Rendered views per cloud.";
    image_size: usize = 32, "Rendered image side in pixels.";
    point_radius: f64 = 0.008, "Rendered point radius.";
    points_per_pixel: usize = 2, "Nearest points composited per pixel.";
    elevation: f64 = 0.0, "Camera elevation in radians.";
    tau: f64 = 0.1, "Contrastive temperature.";
    alpha: f64 = 0.001, "Feature weight of the transport cost.";
    beta: f64 = 0.0001, "Label weight of the transport cost.";
    exclude_self_sim: bool = false, "Drop the self term from contrastive denominators.";
    use_3d: bool = true, "Enable the 3D association loss.";
    use_mm: bool = true, "Enable the multi-modal association loss.";
    use_ot: bool = true, "Enable the transport alignment loss.";
    use_cls: bool = true, "Enable the source classification loss.";
    mixup: bool = true, "Train the classifier on point mixup pairs.";
    solver: Solver = Solver::Auto, "Coupling solver: exact, sinkhorn or auto.";
    sinkhorn_epsilon: f64 = 0.05, "Entropic regularisation.";
    batch_size: usize = 32, "Clouds per domain per step.";
    lr: f64 = 0.001, "Peak learning rate.";
    weight_decay: f64 = 5e-5, "L2 weight decay.";
    epochs: usize = 30, "Training epochs.";
    spst_threshold: f64 = 0.8, "Pseudo-label confidence threshold.";
    spst_rounds: usize = 3, "Self-training rounds.";
    spst_epochs: usize = 10, "Epochs per self-training round.";
    spst_lr: f64 = 0.0001, "Self-training learning rate.";
}

/// Comma separated layer widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| format!("width {w:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Widths)
    }
}

impl std::fmt::Display for Widths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

trait ConfigValue: Sized + ToString {
    fn parse_text(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_text(s: &str) -> std::result::Result<Self, String> {
                <$t as FromStr>::from_str(s).map_err(|e| e.to_string())
            }
        }
    )*};
}

from_str_value!(u64, usize, f64, bool, Solver, Widths);

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_text(value.trim()).map_err(|e| Error::Config(format!("bad value {value:?} for `{key}`: {e}")))
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of [`Config::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if [self.lr, self.spst_lr].iter().any(|x| x.is_nan() || *x <= 0.0) || self.weight_decay < 0.0 {
            return bad("learning rates must be positive and weight decay nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.spst_threshold) {
            return bad(format!("spst_threshold must be in [0, 1], got {}", self.spst_threshold));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.use_3d || self.use_mm || self.use_ot || self.use_cls) {
            return bad("at least one loss must be enabled".into());
        }
        self.model().validate()?;
        self.render().validate()?;
        self.rig()?;
        self.ot().validate()?;
        self.benchmark().source.validate()?;
        self.benchmark().target.validate()?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            classes: self.classes,
            emb_dim: self.emb_dim,
            proj_dim: self.proj_dim,
            point_hidden: self.point_hidden.0.clone(),
            conv_channels: self.conv_channels.0.clone(),
            clf_hidden: self.clf_hidden.0.clone(),
            dropout: self.dropout,
        }
    }

    pub fn render(&self) -> RenderParams {
        RenderParams {
            point_radius: self.point_radius,
            points_per_pixel: self.points_per_pixel,
            image_size: self.image_size,
        }
    }

    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::new(self.views, self.elevation)
    }

    pub fn ot(&self) -> OtConfig {
        OtConfig {
            solver: self.solver,
            sinkhorn_epsilon: self.sinkhorn_epsilon,
            ..OtConfig::default()
        }
    }

    pub fn benchmark(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            source: DomainSpec {
                noise_sigma: self.source_noise,
                crop_fraction: self.source_crop,
                density: self.points,
                sampling_bias: self.source_bias,
            },
            target: DomainSpec {
                noise_sigma: self.target_noise,
                crop_fraction: self.target_crop,
                density: self.target_points,
                sampling_bias: self.target_bias,
            },
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            seed: self.seed,
        }
    }
}
