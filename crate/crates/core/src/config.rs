//! Line-based `key = value` run configuration. `#` starts a comment, unknown
//! keys are rejected and missing keys take their defaults.

use std::path::Path;
use std::str::FromStr;

use crate::correlation::PyramidSpec;
use crate::erm::SKIP_WIDTH;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::qclm::{BlockVariant, NormKind, QuatKernel};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub d: usize,
    pub tau: f64,
    pub lr: f64,
    pub k: usize,
    pub groups: usize,
    pub seed: u64,
    pub steps: usize,
    /// Pyramid level extents, finest first.
    pub extents: Vec<usize>,
    pub layer_counts: Vec<usize>,
    pub feature_channels: usize,
    pub skip_channels: usize,
    pub skip_width: usize,
    pub decoder_width: usize,
    pub qclm_depth: usize,
    pub kernel: QuatKernel,
    pub norm: NormKind,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d: 64,
            tau: 0.5,
            lr: 1e-3,
            k: 1,
            groups: 4,
            seed: 0,
            steps: 300,
            extents: vec![8, 4, 2],
            layer_counts: vec![2, 3, 2],
            feature_channels: 16,
            skip_channels: 8,
            skip_width: SKIP_WIDTH,
            decoder_width: 32,
            qclm_depth: 2,
            kernel: QuatKernel::Hamilton,
            norm: NormKind::Quaternion,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("`{key}` expects a number, got `{v}`"),
    })
}

fn parse_list(key: &str, v: &str, line: usize) -> Result<Vec<usize>> {
    v.trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s, line))
        .collect()
}

fn constraint(key: &str, msg: impl Into<String>) -> Error {
    Error::Constraint {
        key: key.into(),
        msg: msg.into(),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            // signed parse first so `D = -1` is a constraint error, not a parse error
            let count = |v: &str| -> Result<usize> {
                let n: i64 = parse_num(key, v, line)?;
                usize::try_from(n).map_err(|_| constraint(key, format!("must be non-negative, got {n}")))
            };
            match key {
                "D" => c.d = count(value)?,
                "tau" => c.tau = parse_num(key, value, line)?,
                "lr" => c.lr = parse_num(key, value, line)?,
                "K" => c.k = count(value)?,
                "groups" => c.groups = count(value)?,
                "seed" => c.seed = parse_num(key, value, line)?,
                "steps" => c.steps = count(value)?,
                "extents" => c.extents = parse_list(key, value, line)?,
                "layer_counts" => c.layer_counts = parse_list(key, value, line)?,
                "feature_channels" => c.feature_channels = count(value)?,
                "skip_channels" => c.skip_channels = count(value)?,
                "skip_width" => c.skip_width = count(value)?,
                "decoder_width" => c.decoder_width = count(value)?,
                "qclm_depth" => c.qclm_depth = count(value)?,
                "kernel" => {
                    c.kernel = match value {
                        "hamilton" => QuatKernel::Hamilton,
                        "group" => QuatKernel::Group,
                        _ => return Err(constraint(key, format!("expected hamilton or group, got `{value}`"))),
                    }
                }
                "norm" => {
                    c.norm = match value {
                        "qn" => NormKind::Quaternion,
                        "gn" => NormKind::PlaneGroup,
                        _ => return Err(constraint(key, format!("expected qn or gn, got `{value}`"))),
                    }
                }
                _ => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("D", self.d),
            ("K", self.k),
            ("groups", self.groups),
            ("feature_channels", self.feature_channels),
            ("skip_channels", self.skip_channels),
            ("skip_width", self.skip_width),
            ("decoder_width", self.decoder_width),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(constraint(key, "must be positive"));
            }
        }
        if !self.d.is_multiple_of(self.groups) {
            return Err(constraint("D", format!("{} is not divisible by groups = {}", self.d, self.groups)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(constraint("tau", "must lie in [0, 1]"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(constraint("lr", "must be finite and non-negative"));
        }
        if self.extents.is_empty() || self.extents.iter().any(|&e| e < 2) {
            return Err(constraint("extents", "need at least one level, each extent at least 2"));
        }
        if self.extents.windows(2).any(|w| w[1] != w[0].div_ceil(2)) {
            return Err(constraint("extents", "each level must halve the previous one"));
        }
        if self.layer_counts.len() != self.extents.len() || self.layer_counts.contains(&0) {
            return Err(constraint("layer_counts", "need one positive count per level"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let spec = ModelSpec {
            pyramid: PyramidSpec::new(self.extents.clone(), self.layer_counts.clone(), self.feature_channels)?,
            d: self.d,
            groups: self.groups,
            qclm_depth: self.qclm_depth,
            skip_channels: self.skip_channels,
            skip_width: self.skip_width,
            decoder_width: self.decoder_width,
            variant: BlockVariant {
                kernel: self.kernel,
                norm: self.norm,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    Config::load(path)
}
