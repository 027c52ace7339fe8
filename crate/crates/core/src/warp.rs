//! Backward warping through a displacement field.
//!
//! Output voxel `x` samples the moving volume at `x + u(x)` with trilinear
//! interpolation. Sample coordinates are clamped to `[0, n - 1]` per axis.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{BinaryMask, DisplacementField, GridInfo, ScalarVolume};

/// The eight corner indices and fractional offsets of one trilinear sample.
#[derive(Debug, Clone, Copy)]
pub struct Trilinear {
    base: usize,
    step: [usize; 3],
    t: [f64; 3],
    /// False on axes where the sample position was clamped.
    active: [bool; 3],
}

impl Trilinear {
    /// Sample location for point `p`, clamped into the grid.
    #[inline]
    pub fn at(grid: &GridInfo, p: [f64; 3]) -> Self {
        let dims = grid.dims();
        let strides = grid.strides();
        let mut base = 0;
        let mut t = [0.0; 3];
        let mut active = [true; 3];
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let mut c = p[a];
            if c.is_nan() || c <= 0.0 {
                active[a] = c == 0.0;
                c = 0.0;
            } else if c >= hi {
                active[a] = c == hi;
                c = hi;
            }
            let i0 = (c.floor() as usize).min(dims[a] - 2);
            t[a] = c - i0 as f64;
            base += i0 * strides[a];
        }
        Self { base, step: strides, t, active }
    }

    #[inline]
    fn corners(&self, data: &[f64]) -> [f64; 8] {
        let [sx, sy, sz] = self.step;
        let b = self.base;
        [
            data[b],
            data[b + sx],
            data[b + sy],
            data[b + sx + sy],
            data[b + sz],
            data[b + sx + sz],
            data[b + sy + sz],
            data[b + sx + sy + sz],
        ]
    }

    #[inline]
    pub fn sample(&self, data: &[f64]) -> f64 {
        let c = self.corners(data);
        let [tx, ty, tz] = self.t;
        let x00 = c[0] + tx * (c[1] - c[0]);
        let x10 = c[2] + tx * (c[3] - c[2]);
        let x01 = c[4] + tx * (c[5] - c[4]);
        let x11 = c[6] + tx * (c[7] - c[6]);
        let y0 = x00 + ty * (x10 - x00);
        let y1 = x01 + ty * (x11 - x01);
        y0 + tz * (y1 - y0)
    }

    /// Value and derivative with respect to the sample position. The
    /// derivative is zero along clamped axes.
    #[inline]
    pub fn sample_grad(&self, data: &[f64]) -> (f64, [f64; 3]) {
        let c = self.corners(data);
        let [tx, ty, tz] = self.t;
        let (uy, uz) = (1.0 - ty, 1.0 - tz);
        let x00 = c[0] + tx * (c[1] - c[0]);
        let x10 = c[2] + tx * (c[3] - c[2]);
        let x01 = c[4] + tx * (c[5] - c[4]);
        let x11 = c[6] + tx * (c[7] - c[6]);
        let y0 = x00 + ty * (x10 - x00);
        let y1 = x01 + ty * (x11 - x01);
        let v = y0 + tz * (y1 - y0);
        let gx = uy * uz * (c[1] - c[0]) + ty * uz * (c[3] - c[2]) + uy * tz * (c[5] - c[4]) + ty * tz * (c[7] - c[6]);
        let gy = uz * (x10 - x00) + tz * (x11 - x01);
        let gz = y1 - y0;
        let g = [
            if self.active[0] { gx } else { 0.0 },
            if self.active[1] { gy } else { 0.0 },
            if self.active[2] { gz } else { 0.0 },
        ];
        (v, g)
    }
}

#[inline]
fn sample_point(field: &DisplacementField, i: usize) -> [f64; 3] {
    let [x, y, z] = field.grid().coords(i);
    let u = field.at(i);
    [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]
}

/// Warps raw per-voxel values; shared by volumes and real-valued masks.
pub fn warp_values(values: &[f64], field: &DisplacementField) -> Vec<f64> {
    let grid = *field.grid();
    par::map(grid.len(), |i| Trilinear::at(&grid, sample_point(field, i)).sample(values))
}

/// Warped values together with their derivative with respect to `u`.
pub(crate) fn warp_values_grad(values: &[f64], field: &DisplacementField) -> (Vec<f64>, Vec<[f64; 3]>) {
    let grid = *field.grid();
    let both: Vec<(f64, [f64; 3])> =
        par::map(grid.len(), |i| Trilinear::at(&grid, sample_point(field, i)).sample_grad(values));
    both.into_iter().unzip()
}

pub fn warp_scalar(moving: &ScalarVolume, field: &DisplacementField) -> Result<ScalarVolume> {
    moving.grid().check_same(field.grid(), "warp_scalar")?;
    Ok(ScalarVolume::new_unchecked(*moving.grid(), warp_values(moving.data(), field)))
}

/// Warps the mask as reals without thresholding.
pub fn warp_mask_real(mask: &BinaryMask, field: &DisplacementField) -> Result<Vec<f64>> {
    mask.grid().check_same(field.grid(), "warp_mask")?;
    Ok(warp_values(&mask.to_real(), field))
}

/// Interpolate-then-threshold mask transport (`value >= threshold`).
pub fn warp_mask(mask: &BinaryMask, field: &DisplacementField, threshold: f64) -> Result<BinaryMask> {
    let real = warp_mask_real(mask, field)?;
    Ok(BinaryMask::new_unchecked(*mask.grid(), real.into_iter().map(|v| (v >= threshold) as u8).collect()))
}

/// `p + u(p)` with `u` interpolated trilinearly at the fixed-space point `p`.
pub fn map_point(field: &DisplacementField, p: [f64; 3]) -> Result<[f64; 3]> {
    let grid = field.grid();
    if !grid.contains(p) {
        return Err(Error::InvalidData(format!("point {p:?} outside grid {:?}", grid.dims())));
    }
    let s = Trilinear::at(grid, p);
    Ok(std::array::from_fn(|a| p[a] + s.sample(field.component(a))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(g: GridInfo) -> ScalarVolume {
        ScalarVolume::from_fn(g, |x, _, _| x as f64).unwrap()
    }

    /// Independent single-voxel reference: explicit 8-corner weighted sum
    /// with per-axis clamping.
    fn reference_sample(img: &ScalarVolume, p: [f64; 3]) -> f64 {
        let d = img.grid().dims();
        let mut i0 = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let c = p[a].max(0.0).min((d[a] - 1) as f64);
            let f = c.floor() as usize;
            i0[a] = if f >= d[a] - 1 { d[a] - 2 } else { f };
            t[a] = c - i0[a] as f64;
        }
        let mut s = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                        * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                        * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                    s += w * img.get(i0[0] + dx, i0[1] + dy, i0[2] + dz);
                }
            }
        }
        s
    }

    #[test]
    fn zero_field_is_identity() {
        let g = GridInfo::new([5, 4, 3], [1.0; 3]).unwrap();
        let v = ScalarVolume::from_fn(g, |x, y, z| (x * 13 + y * 7 + z) as f64 * 0.1).unwrap();
        let w = warp_scalar(&v, &DisplacementField::zeros(g)).unwrap();
        assert_eq!(w, v);
    }

    #[test]
    fn integer_shift_with_clamp() {
        let g = GridInfo::cube(6).unwrap();
        let w = warp_scalar(&ramp(g), &DisplacementField::constant(g, [1.0, 0.0, 0.0])).unwrap();
        for i in 0..g.len() {
            let [x, _, _] = g.coords(i);
            assert_eq!(w.data()[i], ((x + 1).min(5)) as f64);
        }
    }

    #[test]
    fn half_shift_on_ramp() {
        let g = GridInfo::cube(6).unwrap();
        let w = warp_scalar(&ramp(g), &DisplacementField::constant(g, [0.5, 0.0, 0.0])).unwrap();
        for x in 0..5 {
            assert!((w.get(x, 2, 3) - (x as f64 + 0.5)).abs() < 1e-12);
        }
        assert_eq!(w.get(5, 2, 3), 5.0);
    }

    #[test]
    fn mask_transport() {
        let g = GridInfo::cube(10).unwrap();
        let cube = BinaryMask::from_fn(g, |x, y, z| (3..7).contains(&x) && (3..7).contains(&y) && (3..7).contains(&z));
        assert_eq!(warp_mask(&cube, &DisplacementField::zeros(g), 0.5).unwrap(), cube);
        let shifted = warp_mask(&cube, &DisplacementField::constant(g, [-2.0, 0.0, 0.0]), 0.5).unwrap();
        let expect =
            BinaryMask::from_fn(g, |x, y, z| (5..9).contains(&x) && (3..7).contains(&y) && (3..7).contains(&z));
        assert_eq!(shifted, expect);
        // half-voxel shift: brute-force per-voxel interpolation then threshold
        let half = warp_mask(&cube, &DisplacementField::constant(g, [0.5, 0.0, 0.0]), 0.5).unwrap();
        let real = SoftOracle(cube.to_real());
        let brute = BinaryMask::from_fn(g, |x, y, z| real.at(g, [x as f64 + 0.5, y as f64, z as f64]) >= 0.5);
        assert_eq!(half, brute);
        let grown = BinaryMask::from_fn(g, |x, y, z| (2..7).contains(&x) && (3..7).contains(&y) && (3..7).contains(&z));
        assert_eq!(half, grown);
    }

    struct SoftOracle(Vec<f64>);
    impl SoftOracle {
        fn at(&self, g: GridInfo, p: [f64; 3]) -> f64 {
            reference_sample(&ScalarVolume::new(g, self.0.clone()).unwrap(), p)
        }
    }

    #[test]
    fn map_point_cases() {
        let g = GridInfo::cube(8).unwrap();
        assert_eq!(map_point(&DisplacementField::zeros(g), [3.0; 3]).unwrap(), [3.0; 3]);
        let c = DisplacementField::constant(g, [1.0, 2.0, 0.0]);
        assert_eq!(map_point(&c, [0.0; 3]).unwrap(), [1.0, 2.0, 0.0]);
        assert!(map_point(&c, [-0.1, 0.0, 0.0]).is_err());
        assert!(map_point(&c, [0.0, 7.5, 0.0]).is_err());
        // u_x = x*y varies bilinearly; at (2.5, 3.25, 1) trilinear gives the
        // bilinear value exactly
        let f = DisplacementField::from_fn(g, |p| [p[0] * p[1], 0.0, 0.0]).unwrap();
        let q = map_point(&f, [2.5, 3.25, 1.0]).unwrap();
        assert!((q[0] - (2.5 + 2.5 * 3.25)).abs() < 1e-12);
    }

    fn arb_field(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 3 * n * n * n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matches_reference_sampler(raw in arb_field(6), vals in prop::collection::vec(-1.0f64..1.0, 216)) {
            let g = GridInfo::cube(6).unwrap();
            let n = g.len();
            let f = DisplacementField::new(g, [raw[..n].to_vec(), raw[n..2*n].to_vec(), raw[2*n..].to_vec()]).unwrap();
            let img = ScalarVolume::new(g, vals).unwrap();
            let w = warp_scalar(&img, &f).unwrap();
            for i in 0..n {
                let [x, y, z] = g.coords(i);
                let u = f.at(i);
                let r = reference_sample(&img, [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]);
                prop_assert!((w.data()[i] - r).abs() <= 1e-6);
            }
        }

        #[test]
        fn linear_in_intensity(raw in arb_field(5), a in -2.0f64..2.0, b in -1.0f64..1.0) {
            let g = GridInfo::cube(5).unwrap();
            let n = g.len();
            let f = DisplacementField::new(g, [raw[..n].to_vec(), raw[n..2*n].to_vec(), raw[2*n..].to_vec()]).unwrap();
            let img = ScalarVolume::from_fn(g, |x, y, z| ((x * 3 + y * 5 + z * 7) % 11) as f64 / 11.0).unwrap();
            let scaled = ScalarVolume::new(g, img.data().iter().map(|v| a * v + b).collect()).unwrap();
            let w1 = warp_scalar(&img, &f).unwrap();
            let w2 = warp_scalar(&scaled, &f).unwrap();
            for (p, q) in w1.data().iter().zip(w2.data()) {
                prop_assert!((a * p + b - q).abs() < 1e-12);
            }
        }

        #[test]
        fn landmarks_agree_with_warp(raw in arb_field(6), px in 0.0f64..5.0, py in 0.0f64..5.0, pz in 0.0f64..5.0) {
            let g = GridInfo::cube(6).unwrap();
            let n = g.len();
            let f = DisplacementField::new(g, [raw[..n].to_vec(), raw[n..2*n].to_vec(), raw[2*n..].to_vec()]).unwrap();
            // warping the coordinate ramps reproduces the mapped landmark
            let i = g.index(px as usize, py as usize, pz as usize);
            let [x, y, z] = g.coords(i);
            let q = map_point(&f, [x as f64, y as f64, z as f64]).unwrap();
            if g.contains(q) {
                for a in 0..3 {
                    let ramp = ScalarVolume::from_fn(g, |x, y, z| [x, y, z][a] as f64).unwrap();
                    let w = warp_scalar(&ramp, &f).unwrap();
                    prop_assert!((w.data()[i] - q[a]).abs() < 1e-6);
                }
            }
        }
    }
}
