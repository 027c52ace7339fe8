//! Registration objective and its analytic gradient.
//!
//! ```text
//! total = sim_weight * (1 - similarity) + alpha_vp * vp + alpha_reg * smoothness
//! ```
//!
//! * `similarity`: correlation of the warped and fixed images. With a soft
//!   tumor mask the covariance numerator uses weights `1 - STM` (weighted
//!   means included) while the variances in the denominator stay unweighted.
//! * `vp`: mean over all voxels of `D(x) * STM(x)`, where `D` is the
//!   volume-change distance relative to the organ ratio `R`.
//! * `smoothness`: mean over voxels of the squared forward differences of
//!   every displacement component.
//!
//! The gradient is assembled by hand through the trilinear sampler, the
//! correlation quotient, the Jacobian stencils (via cofactors) and the
//! warped organ-mask sum behind `R`.

use serde::{Deserialize, Serialize};

use crate::config::RegistrationConfig;
use crate::error::{Error, Result};
use crate::jacobian::{cofactor3, det3, diff_adjoint_at, jacobian_at, DET_CLAMP};
use crate::par;
use crate::volume::{BinaryMask, DisplacementField, GridInfo, ScalarVolume, SoftMask};
use crate::warp::warp_values_grad;

const MIN_VARIANCE: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub similarity: f64,
    pub vp: f64,
    pub smoothness: f64,
    pub total: f64,
}

/// Term weights. Unlike [`RegistrationConfig`] any non-negative combination
/// is allowed, which lets single terms be examined in isolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub sim: f64,
    pub vp: f64,
    pub reg: f64,
}

impl Weights {
    pub fn combine(&self, similarity: f64, vp: f64, smoothness: f64) -> f64 {
        self.sim * (1.0 - similarity) + self.vp * vp + self.reg * smoothness
    }
}

impl From<&RegistrationConfig> for Weights {
    fn from(c: &RegistrationConfig) -> Self {
        Self { sim: c.sim_weight, vp: c.alpha_vp, reg: c.alpha_reg }
    }
}

/// Moments of the fixed image under both weightings.
#[derive(Debug, Clone)]
struct FixedStats {
    /// `1 - STM`, or `None` for unit weights.
    weights: Option<Vec<f64>>,
    wsum: f64,
    wmean: f64,
    var: f64,
}

impl FixedStats {
    fn new(fixed: &ScalarVolume, stm: Option<&SoftMask>) -> Result<Self> {
        let f = fixed.data();
        let n = f.len();
        let weights = stm.map(|m| m.data().iter().map(|s| 1.0 - s).collect::<Vec<_>>());
        let w = |i: usize| weights.as_ref().map_or(1.0, |w| w[i]);
        let [wsum, wf, sf] = par::sum_n(n, |i| [w(i), w(i) * f[i], f[i]]);
        if wsum <= 0.0 {
            return Err(Error::DegenerateSimilarity("all similarity weights are zero (STM is 1 everywhere)".into()));
        }
        let mean = sf / n as f64;
        let var = par::sum(n, |i| (f[i] - mean).powi(2)) / n as f64;
        if var <= MIN_VARIANCE {
            return Err(Error::DegenerateSimilarity("fixed image is constant".into()));
        }
        Ok(Self { wmean: wf / wsum, wsum, var, weights })
    }

    #[inline]
    fn w(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
}

/// Correlation value plus its derivative with respect to each warped voxel.
fn similarity_core(warped: &[f64], fixed: &[f64], fs: &FixedStats, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let n = warped.len();
    let [wi, si] = par::sum_n(n, |i| [fs.w(i) * warped[i], warped[i]]);
    let wmean_w = wi / fs.wsum;
    let mean_w = si / n as f64;
    let [cov, var_w] =
        par::sum_n(n, |i| [fs.w(i) * (warped[i] - wmean_w) * (fixed[i] - fs.wmean), (warped[i] - mean_w).powi(2)]);
    let cov = cov / fs.wsum;
    let var_w = var_w / n as f64;
    if var_w <= MIN_VARIANCE {
        return Err(Error::DegenerateSimilarity("warped image is constant".into()));
    }
    let den = (var_w * fs.var).sqrt();
    let sim = cov / den;
    let grad = want_grad.then(|| {
        let a = 1.0 / (fs.wsum * den);
        let b = sim / (n as f64 * var_w);
        par::map(n, |i| fs.w(i) * (fixed[i] - fs.wmean) * a - b * (warped[i] - mean_w))
    });
    Ok((sim, grad))
}

/// Weighted correlation of `warped` and `fixed`; unweighted when `stm` is
/// `None`. The result can leave `[-1, 1]` slightly when weighted, since the
/// denominator is not weighted.
pub fn similarity(warped: &ScalarVolume, fixed: &ScalarVolume, stm: Option<&SoftMask>) -> Result<f64> {
    warped.grid().check_same(fixed.grid(), "similarity")?;
    if let Some(m) = stm {
        m.grid().check_same(fixed.grid(), "similarity mask")?;
    }
    let fs = FixedStats::new(fixed, stm)?;
    Ok(similarity_core(warped.data(), fixed.data(), &fs, false)?.0)
}

pub fn vp_loss(field: &DisplacementField, stm: &SoftMask, organ_moving: &BinaryMask) -> Result<f64> {
    field.grid().check_same(stm.grid(), "vp_loss mask")?;
    let (d, _) = crate::jacobian::distance_field(field, organ_moving)?;
    let n = d.data().len();
    Ok(par::sum(n, |i| d.data()[i] * stm.data()[i]) / n as f64)
}

#[inline]
fn fwd_diff(v: &[f64], grid: &GridInfo, i: usize, c: [usize; 3], axis: usize) -> f64 {
    if c[axis] + 1 < grid.dims()[axis] {
        v[i + grid.strides()[axis]] - v[i]
    } else {
        0.0
    }
}

pub fn smoothness(field: &DisplacementField) -> f64 {
    let g = *field.grid();
    let n = g.len();
    par::sum(n, |i| {
        let c = g.coords(i);
        let mut s = 0.0;
        for comp in field.components() {
            for a in 0..3 {
                s += fwd_diff(comp, &g, i, c, a).powi(2);
            }
        }
        s
    }) / n as f64
}

fn smoothness_grad_at(field: &DisplacementField, i: usize, c: [usize; 3], scale: f64) -> [f64; 3] {
    let g = field.grid();
    std::array::from_fn(|comp| {
        let v = field.component(comp);
        let mut r = 0.0;
        for a in 0..3 {
            if c[a] > 0 {
                let s = g.strides()[a];
                r += v[i] - v[i - s];
            }
            r -= fwd_diff(v, g, i, c, a);
        }
        2.0 * scale * r
    })
}

/// A registration problem with the fixed-image statistics cached.
pub struct Objective<'a> {
    moving: &'a ScalarVolume,
    fixed: &'a ScalarVolume,
    stm: Option<&'a SoftMask>,
    organ_real: Option<Vec<f64>>,
    organ_count: f64,
    fixed_stats: FixedStats,
    weights: Weights,
}

/// Loss and (optionally) gradient of one evaluation.
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub gradient: Option<DisplacementField>,
}

impl<'a> Objective<'a> {
    /// `stm = None` disables the volume-preserving term and weighting.
    pub fn new(
        moving: &'a ScalarVolume,
        fixed: &'a ScalarVolume,
        stm: Option<&'a SoftMask>,
        organ_moving: &'a BinaryMask,
        weights: Weights,
    ) -> Result<Self> {
        moving.grid().check_same(fixed.grid(), "moving/fixed")?;
        organ_moving.grid().check_same(fixed.grid(), "organ mask")?;
        if let Some(m) = stm {
            m.grid().check_same(fixed.grid(), "soft tumor mask")?;
        }
        let organ_count = organ_moving.count() as f64;
        let organ_real = match stm {
            Some(_) => {
                if organ_count == 0.0 {
                    return Err(Error::EmptyMask("organ mask of the moving image is empty".into()));
                }
                Some(organ_moving.to_real())
            }
            None => None,
        };
        Ok(Self { moving, fixed, stm, organ_real, organ_count, fixed_stats: FixedStats::new(fixed, stm)?, weights })
    }

    pub fn weights(&self) -> Weights {
        self.weights
    }

    pub fn grid(&self) -> &GridInfo {
        self.fixed.grid()
    }

    pub fn loss(&self, field: &DisplacementField) -> Result<LossBreakdown> {
        Ok(self.evaluate(field, false)?.loss)
    }

    pub fn evaluate(&self, field: &DisplacementField, want_grad: bool) -> Result<Evaluation> {
        field.grid().check_same(self.grid(), "field")?;
        let g = *self.grid();
        let n = g.len();
        let nf = n as f64;
        let w = self.weights;

        let (warped, img_grad) = warp_values_grad(self.moving.data(), field);
        let (sim, dsim) = similarity_core(&warped, self.fixed.data(), &self.fixed_stats, want_grad)?;
        let smooth = smoothness(field);

        let mut vp = 0.0;
        // per-voxel gradient of the vp term, already weighted
        let mut vp_grad: Option<[Vec<f64>; 3]> = None;
        if let (Some(stm), Some(organ)) = (self.stm, self.organ_real.as_ref()) {
            let stm = stm.data();
            let (ow, og) = warp_values_grad(organ, field);
            let ratio = par::sum(n, |i| ow[i]) / self.organ_count;
            // per voxel: D*STM, d(D*STM)/d det, d(D*STM)/dR, cofactors
            let per: Vec<(f64, f64, f64, [[f64; 3]; 3])> = par::map(n, |i| {
                let j = jacobian_at(field, i);
                let det = det3(&j);
                let clamped = !(DET_CLAMP.0..=DET_CLAMP.1).contains(&det);
                let d = det.clamp(DET_CLAMP.0, DET_CLAMP.1);
                let dr = d * ratio;
                let (dist, d_det, d_ratio) =
                    if dr <= 1.0 { (1.0 / dr, -1.0 / (d * dr), -1.0 / (dr * ratio)) } else { (dr, ratio, d) };
                let d_det = if clamped { 0.0 } else { d_det };
                let cof = if want_grad && w.vp != 0.0 { cofactor3(&j) } else { [[0.0; 3]; 3] };
                (dist * stm[i], d_det * stm[i], d_ratio * stm[i], cof)
            });
            let [vsum, rsum] = par::sum_n(n, |i| [per[i].0, per[i].2]);
            vp = vsum / nf;
            if want_grad && w.vp != 0.0 {
                let d_ratio = rsum / nf;
                let scale = w.vp / nf;
                // G[r][c](x) = dVP/ddet(x) * cof[r][c](x)
                let gmat: Vec<Vec<f64>> = (0..9).map(|k| par::map(n, |i| per[i].1 * per[i].3[k / 3][k % 3])).collect();
                let inv_om = 1.0 / self.organ_count;
                let comps: Vec<[f64; 3]> = par::map(n, |i| {
                    let c = g.coords(i);
                    std::array::from_fn(|r| {
                        let mut acc = 0.0;
                        for col in 0..3 {
                            acc += diff_adjoint_at(&gmat[r * 3 + col], &g, i, c, col);
                        }
                        scale * acc + w.vp * d_ratio * og[i][r] * inv_om
                    })
                });
                vp_grad = Some(std::array::from_fn(|r| comps.iter().map(|v| v[r]).collect()));
            }
        }

        let total = w.combine(sim, vp, smooth);
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss: similarity={sim}, vp={vp}, smoothness={smooth}")));
        }
        let loss = LossBreakdown { similarity: sim, vp, smoothness: smooth, total };

        let gradient = dsim.map(|dsim| {
            let rows: Vec<[f64; 3]> = par::map(n, |i| {
                let c = g.coords(i);
                let sg = smoothness_grad_at(field, i, c, 1.0 / nf);
                std::array::from_fn(|a| {
                    let mut v = -w.sim * dsim[i] * img_grad[i][a] + w.reg * sg[a];
                    if let Some(vg) = vp_grad.as_ref() {
                        v += vg[a][i];
                    }
                    v
                })
            });
            let comps = std::array::from_fn(|a| rows.iter().map(|r| r[a]).collect());
            DisplacementField::new_unchecked(g, comps)
        });
        Ok(Evaluation { loss, gradient })
    }
}

pub fn total_loss(
    field: &DisplacementField,
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    stm: Option<&SoftMask>,
    organ_moving: &BinaryMask,
    config: &RegistrationConfig,
) -> Result<LossBreakdown> {
    Objective::new(moving, fixed, stm, organ_moving, config.into())?.loss(field)
}

pub fn total_gradient(
    field: &DisplacementField,
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    stm: Option<&SoftMask>,
    organ_moving: &BinaryMask,
    config: &RegistrationConfig,
) -> Result<DisplacementField> {
    let eval = Objective::new(moving, fixed, stm, organ_moving, config.into())?.evaluate(field, true)?;
    Ok(eval.gradient.expect("gradient requested"))
}
