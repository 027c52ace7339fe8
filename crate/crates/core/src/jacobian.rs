//! Jacobian determinants of the sampling map `x + u(x)` and the
//! volume-change distance built on them.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{BinaryMask, DisplacementField, GridInfo, ScalarVolume};
use crate::warp;

/// Determinants are clamped into this range before they are inverted.
pub const DET_CLAMP: (f64, f64) = (1e-6, 1e6);

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    grid: GridInfo,
    det: Vec<f64>,
}

impl JacobianField {
    pub fn new(grid: GridInfo, det: Vec<f64>) -> Result<Self> {
        if det.len() != grid.len() || det.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("jacobian: wrong length or non-finite value".into()));
        }
        Ok(Self { grid, det })
    }

    pub fn grid(&self) -> &GridInfo {
        &self.grid
    }

    pub fn det(&self) -> &[f64] {
        &self.det
    }
}

/// Derivative along `axis` at voxel `i`: central in the interior,
/// one-sided on the two faces.
#[inline]
pub(crate) fn diff_at(v: &[f64], grid: &GridInfo, i: usize, c: [usize; 3], axis: usize) -> f64 {
    let n = grid.dims()[axis];
    let s = grid.strides()[axis];
    let k = c[axis];
    if k == 0 {
        v[i + s] - v[i]
    } else if k == n - 1 {
        v[i] - v[i - s]
    } else {
        0.5 * (v[i + s] - v[i - s])
    }
}

/// Adjoint of [`diff_at`]: `(D^T g)[i]`.
#[inline]
pub(crate) fn diff_adjoint_at(g: &[f64], grid: &GridInfo, i: usize, c: [usize; 3], axis: usize) -> f64 {
    let n = grid.dims()[axis];
    let s = grid.strides()[axis];
    let k = c[axis];
    let mut r = 0.0;
    // interior neighbours carry weight 1/2
    if k >= 2 {
        r += 0.5 * g[i - s];
    }
    if k + 3 <= n {
        r -= 0.5 * g[i + s];
    }
    // face rows carry weight 1
    if k == 1 {
        r += g[i - s];
    }
    if k == 0 {
        r -= g[i];
    }
    if k == n - 1 {
        r += g[i];
    }
    if k + 2 == n {
        r -= g[i + s];
    }
    r
}

/// `I + grad u` at voxel `i`; row = displacement component, column = axis.
#[inline]
pub(crate) fn jacobian_at(field: &DisplacementField, i: usize) -> [[f64; 3]; 3] {
    let grid = field.grid();
    let c = grid.coords(i);
    std::array::from_fn(|r| {
        std::array::from_fn(|col| diff_at(field.component(r), grid, i, c, col) + if r == col { 1.0 } else { 0.0 })
    })
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix, i.e. `d det / d m`.
#[inline]
pub(crate) fn cofactor3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

pub fn jacobian_det(field: &DisplacementField) -> JacobianField {
    let det = par::map(field.grid().len(), |i| det3(&jacobian_at(field, i)));
    JacobianField { grid: *field.grid(), det }
}

/// `|O_w| / |O_m|` with `|O_w|` the sum of the un-thresholded warped mask.
pub fn organ_ratio(field: &DisplacementField, organ_moving: &BinaryMask) -> Result<f64> {
    let om = organ_moving.count();
    if om == 0 {
        return Err(Error::EmptyMask("organ mask of the moving image is empty".into()));
    }
    let warped = warp::warp_mask_real(organ_moving, field)?;
    Ok(par::sum(warped.len(), |i| warped[i]) / om as f64)
}

/// `D = max(D', 1/D')` with `D' = c / R` and `c = 1 / det`.
#[inline]
pub fn distance_value(det: f64, ratio: f64) -> f64 {
    let d = det.clamp(DET_CLAMP.0, DET_CLAMP.1);
    let dp = 1.0 / (d * ratio);
    dp.max(1.0 / dp)
}

/// Volume-change distance field and the organ ratio `R` it is relative to.
pub fn distance_field(field: &DisplacementField, organ_moving: &BinaryMask) -> Result<(ScalarVolume, f64)> {
    field.grid().check_same(organ_moving.grid(), "distance_field")?;
    let ratio = organ_ratio(field, organ_moving)?;
    let jf = jacobian_det(field);
    let d = par::map(jf.det.len(), |i| distance_value(jf.det[i], ratio));
    Ok((ScalarVolume::new_unchecked(*field.grid(), d), ratio))
}

/// Percentage of voxels with `det <= 0` and the population standard
/// deviation of `det`.
pub fn folding_stats(jf: &JacobianField) -> (f64, f64) {
    let n = jf.det.len();
    let [neg, s] = par::sum_n(n, |i| [(jf.det[i] <= 0.0) as u8 as f64, jf.det[i]]);
    let mean = s / n as f64;
    let var = par::sum(n, |i| (jf.det[i] - mean).powi(2)) / n as f64;
    (100.0 * neg / n as f64, var.sqrt())
}
