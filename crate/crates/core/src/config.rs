use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Map from the volume-change distance `D >= 1` to a soft tumor weight.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Transform {
    /// `1 / (1 + exp(-5 (D - 1.5)))`
    #[default]
    Sigmoid,
    /// `0.5 sin(pi (D - 1.5)) + 0.5` with `D` clamped to `[1, 2]`
    Sin,
    /// `1` where `D >= t`, else `0`
    Hard(f64),
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Sigmoid => f.write_str("sigmoid"),
            Transform::Sin => f.write_str("sin"),
            Transform::Hard(t) => write!(f, "hard:{t}"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Transform::Sigmoid),
            "sin" => Ok(Transform::Sin),
            _ => {
                let t = s.strip_prefix("hard:").and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| {
                    Error::Config(format!("unknown transform {s:?}; expected sigmoid, sin or hard:<t>"))
                })?;
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::Config(format!("hard threshold must be > 0, got {t}")));
                }
                Ok(Transform::Hard(t))
            }
        }
    }
}

impl Serialize for Transform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Transform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All tunables of a registration run. Missing keys in a JSON config take
/// their default value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Weight of the volume-preserving term.
    pub alpha_vp: f64,
    /// Weight of the smoothness term.
    pub alpha_reg: f64,
    /// Weight of the `1 - similarity` term.
    pub sim_weight: f64,
    pub pyramid_levels: usize,
    /// Iterations per level, coarsest first.
    pub iterations_per_level: Vec<usize>,
    /// Step size in voxels at the coarsest level; halved at each finer level.
    pub step_size: f64,
    pub moment_beta1: f64,
    pub moment_beta2: f64,
    pub moment_eps: f64,
    pub transform: Transform,
    /// Bilateral spatial sigma in voxels.
    pub bilateral_sigma_space: f64,
    /// Bilateral range sigma as a fraction of the intensity range.
    pub bilateral_sigma_range: f64,
    /// Number of coarsest pyramid levels optimized by the edge-aligning
    /// pre-registration of mask estimation; larger values mean all levels.
    pub prereg_levels: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            alpha_vp: 0.1,
            alpha_reg: 0.1,
            sim_weight: 1.0,
            pyramid_levels: 3,
            iterations_per_level: vec![200, 150, 100],
            step_size: 0.5,
            moment_beta1: 0.9,
            moment_beta2: 0.999,
            moment_eps: 1e-8,
            transform: Transform::Sigmoid,
            bilateral_sigma_space: 2.0,
            bilateral_sigma_range: 0.1,
            prereg_levels: 3,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !nonneg(self.alpha_vp) || !nonneg(self.alpha_reg) {
            return bad(format!("alphas must be >= 0 (alpha_vp={}, alpha_reg={})", self.alpha_vp, self.alpha_reg));
        }
        if !pos(self.sim_weight) {
            return bad(format!("sim_weight must be > 0, got {}", self.sim_weight));
        }
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be >= 1".into());
        }
        if self.iterations_per_level.len() != self.pyramid_levels {
            return bad(format!(
                "iterations_per_level has {} entries for {} levels",
                self.iterations_per_level.len(),
                self.pyramid_levels
            ));
        }
        if !pos(self.step_size) {
            return bad(format!("step_size must be > 0, got {}", self.step_size));
        }
        for (name, b) in [("moment_beta1", self.moment_beta1), ("moment_beta2", self.moment_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !pos(self.moment_eps) {
            return bad(format!("moment_eps must be > 0, got {}", self.moment_eps));
        }
        if !pos(self.bilateral_sigma_space) || !pos(self.bilateral_sigma_range) {
            return bad("bilateral sigmas must be > 0".into());
        }
        if self.prereg_levels < 1 {
            return bad("prereg_levels must be >= 1".into());
        }
        Ok(())
    }

    /// Settings tuned on the 64³ synthetic phantoms. Per-pair optimization
    /// has far more freedom than a trained network, so the volume term needs
    /// a much larger weight to hold a tumor against the similarity term, and
    /// the edge-aligning pass is limited to the coarsest level with a broad
    /// filter so that it cannot already erase the tumor it should expose.
    pub fn calibrated() -> Self {
        Self {
            alpha_vp: 30.0,
            bilateral_sigma_space: 4.0,
            bilateral_sigma_range: 1.0,
            prereg_levels: 1,
            ..Self::default()
        }
    }

    /// Same weights, with the iteration schedule replaced.
    pub fn with_iterations(mut self, iters: Vec<usize>) -> Self {
        self.pyramid_levels = iters.len();
        self.iterations_per_level = iters;
        self
    }
}
