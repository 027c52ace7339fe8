//! Coarse-to-fine variational registration.
//!
//! The displacement field itself is the optimization variable. Each pyramid
//! level runs adaptive-moment descent on the analytic gradient of
//! [`Objective`], starting from the upsampled result of the coarser level.

use serde::{Deserialize, Serialize};

use crate::config::RegistrationConfig;
use crate::error::{Error, Result};
use crate::objective::{LossBreakdown, Objective};
use crate::par;
use crate::pyramid::{upsample_field, Downsample};
use crate::volume::{BinaryMask, DisplacementField, ScalarVolume, SoftMask};

/// Relative change of the total loss over [`CONVERGENCE_WINDOW`] iterations
/// below which a level is considered converged.
pub const CONVERGENCE_TOL: f64 = 1e-5;
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub dims: [usize; 3],
    pub step_size: f64,
    pub iterations: usize,
    pub initial_total: f64,
    pub final_total: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Field on the finest grid.
    pub field: DisplacementField,
    /// Loss at every evaluated iterate, coarsest level first.
    pub loss_trace: Vec<LossBreakdown>,
    pub levels: Vec<LevelSummary>,
    /// Convergence state of the finest level.
    pub converged: bool,
}

impl RegistrationResult {
    pub fn final_loss(&self) -> LossBreakdown {
        *self.loss_trace.last().expect("loss trace is never empty")
    }
}

struct Level {
    moving: ScalarVolume,
    fixed: ScalarVolume,
    organ: BinaryMask,
    stm: Option<SoftMask>,
}

fn build_levels(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    organ: &BinaryMask,
    stm: Option<&SoftMask>,
    count: usize,
) -> Result<Vec<Level>> {
    let mut levels =
        vec![Level { moving: moving.clone(), fixed: fixed.clone(), organ: organ.clone(), stm: stm.cloned() }];
    for _ in 1..count {
        let l = levels.last().unwrap();
        let next = Level {
            moving: l.moving.downsample()?,
            fixed: l.fixed.downsample()?,
            organ: l.organ.downsample()?,
            stm: l.stm.as_ref().map(|s| s.downsample()).transpose()?,
        };
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}

/// Adaptive-moment state for the three field components.
struct Moments {
    m: [Vec<f64>; 3],
    v: [Vec<f64>; 3],
    t: i32,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self { m: std::array::from_fn(|_| vec![0.0; n]), v: std::array::from_fn(|_| vec![0.0; n]), t: 0 }
    }

    fn step(
        &mut self,
        field: DisplacementField,
        grad: &DisplacementField,
        lr: f64,
        cfg: &RegistrationConfig,
    ) -> DisplacementField {
        self.t += 1;
        let (b1, b2, eps) = (cfg.moment_beta1, cfg.moment_beta2, cfg.moment_eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let grid = *field.grid();
        let mut comps = field.into_components();
        for (a, ((m, v), u)) in self.m.iter_mut().zip(self.v.iter_mut()).zip(comps.iter_mut()).enumerate() {
            let g = grad.component(a);
            let n = u.len();
            // fused update; each voxel independent
            let updated: Vec<(f64, f64, f64)> = par::map(n, |i| {
                let mi = b1 * m[i] + (1.0 - b1) * g[i];
                let vi = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                (mi, vi, u[i] - step)
            });
            for (i, (mi, vi, ui)) in updated.into_iter().enumerate() {
                m[i] = mi;
                v[i] = vi;
                u[i] = ui;
            }
        }
        DisplacementField::new_unchecked(grid, comps)
    }
}

fn converged(trace: &[LossBreakdown]) -> bool {
    if trace.len() <= CONVERGENCE_WINDOW {
        return false;
    }
    let now = trace[trace.len() - 1].total;
    let then = trace[trace.len() - 1 - CONVERGENCE_WINDOW].total;
    (now - then).abs() <= CONVERGENCE_TOL * then.abs()
}

fn diagnostic(trace: &[LossBreakdown]) -> String {
    let tail: Vec<String> = trace.iter().rev().take(5).rev().map(|l| format!("{:.6e}", l.total)).collect();
    format!("last totals [{}]", tail.join(", "))
}

/// Registers `moving` onto `fixed`. With `stm = None` this is the plain
/// similarity registration (no volume term, unweighted similarity); with a
/// soft tumor mask both the weighted similarity and the volume-preserving
/// term are active.
///
/// Each level keeps the lowest-loss iterate it visited, so the returned
/// loss never exceeds the loss of the level's starting field. Levels stop
/// early once converged.
pub fn register(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    organ_moving: &BinaryMask,
    stm: Option<&SoftMask>,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    register_coarse(moving, fixed, organ_moving, stm, config, config.pyramid_levels)
}

/// Like [`register`], but optimizes only the `depth` coarsest pyramid
/// levels. The field of the last optimized level is upsampled to the full
/// grid without further refinement.
pub fn register_coarse(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    organ_moving: &BinaryMask,
    stm: Option<&SoftMask>,
    config: &RegistrationConfig,
    depth: usize,
) -> Result<RegistrationResult> {
    config.validate()?;
    if depth == 0 || depth > config.pyramid_levels {
        return Err(Error::Config(format!("depth must be in 1..={}, got {depth}", config.pyramid_levels)));
    }
    moving.grid().check_same(fixed.grid(), "moving/fixed")?;
    organ_moving.grid().check_same(fixed.grid(), "organ mask")?;
    if let Some(s) = stm {
        s.grid().check_same(fixed.grid(), "soft tumor mask")?;
    }
    let levels = build_levels(moving, fixed, organ_moving, stm, config.pyramid_levels)?;

    let mut field = DisplacementField::zeros(*levels[0].fixed.grid());
    let mut trace = Vec::new();
    let mut summaries = Vec::new();
    let mut last_converged = false;
    for (li, level) in levels.iter().enumerate().take(depth) {
        if li > 0 {
            field = upsample_field(&field, level.fixed.grid());
        }
        let obj = Objective::new(&level.moving, &level.fixed, level.stm.as_ref(), &level.organ, config.into())?;
        let lr = config.step_size / f64::powi(2.0, li as i32);
        let iters = config.iterations_per_level[li];
        let mut moments = Moments::new(field.grid().len());
        let level_start = trace.len();
        let mut best: Option<(f64, DisplacementField)> = None;
        let mut done = 0;
        let mut level_converged;
        loop {
            let eval = obj.evaluate(&field, done < iters).map_err(|e| match e {
                Error::Numerical(m) => {
                    Error::Numerical(format!("{m}; level {li} iteration {done}; {}", diagnostic(&trace)))
                }
                other => other,
            })?;
            trace.push(eval.loss);
            if best.as_ref().is_none_or(|(b, _)| eval.loss.total < *b) {
                best = Some((eval.loss.total, field.clone()));
            }
            level_converged = converged(&trace[level_start..]);
            if done >= iters || level_converged {
                break;
            }
            let grad = eval.gradient.expect("gradient requested");
            field = moments.step(field, &grad, lr, config);
            done += 1;
        }
        let (best_total, best_field) = best.expect("at least one evaluation per level");
        if best_total < trace.last().unwrap().total {
            // record the iterate that is actually carried forward
            trace.push(obj.loss(&best_field)?);
        }
        field = best_field;
        summaries.push(LevelSummary {
            dims: field.grid().dims(),
            step_size: lr,
            iterations: done,
            initial_total: trace[level_start].total,
            final_total: trace.last().unwrap().total,
            converged: level_converged,
        });
        last_converged = level_converged;
    }
    if depth < levels.len() {
        field = upsample_field(&field, fixed.grid());
    }
    Ok(RegistrationResult { field, loss_trace: trace, levels: summaries, converged: last_converged })
}

/// Stage-two registration: the soft tumor mask weights the similarity and
/// drives the volume-preserving term.
pub fn register_stage2(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    organ_moving: &BinaryMask,
    stm: &SoftMask,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    register(moving, fixed, organ_moving, Some(stm), config)
}
