//! Edge-preserving bilateral smoothing of volumes.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::ScalarVolume;

/// Brute-force 3D bilateral filter.
///
/// Weights are `exp(-|p-q|^2 / 2 sigma_space^2) * exp(-(I(p)-I(q))^2 / 2 s_r^2)`
/// over a cubic window of radius `ceil(2 sigma_space)`, where
/// `s_r = sigma_range * (max - min)`. A constant image has no range; it is
/// then taken as 1, which makes the filter a plain Gaussian.
pub fn bilateral_filter(img: &ScalarVolume, sigma_space: f64, sigma_range: f64) -> Result<ScalarVolume> {
    if !(sigma_space.is_finite() && sigma_space > 0.0 && sigma_range.is_finite() && sigma_range > 0.0) {
        return Err(Error::Config(format!("bilateral sigmas must be > 0 (space={sigma_space}, range={sigma_range})")));
    }
    let grid = *img.grid();
    let [nx, ny, nz] = grid.dims();
    let data = img.data();
    let (lo, hi) = img.min_max();
    let range = if hi > lo { hi - lo } else { 1.0 };
    let sr = sigma_range * range;
    let inv_r = 1.0 / (2.0 * sr * sr);

    let r = (2.0 * sigma_space).ceil() as isize;
    let w = (2 * r + 1) as usize;
    let mut spatial = vec![0.0; w * w * w];
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                let k = ((dz + r) as usize * w + (dy + r) as usize) * w + (dx + r) as usize;
                spatial[k] = (-d2 / (2.0 * sigma_space * sigma_space)).exp();
            }
        }
    }

    let mut out = vec![0.0; grid.len()];
    par::for_each_slab(&mut out, nx * ny, |z, slab| {
        for y in 0..ny {
            for x in 0..nx {
                let center = data[grid.index(x, y, z)];
                let (mut num, mut den) = (0.0, 0.0);
                let z0 = (z as isize - r).max(0) as usize;
                let z1 = (z as isize + r).min(nz as isize - 1) as usize;
                let y0 = (y as isize - r).max(0) as usize;
                let y1 = (y as isize + r).min(ny as isize - 1) as usize;
                let x0 = (x as isize - r).max(0) as usize;
                let x1 = (x as isize + r).min(nx as isize - 1) as usize;
                for qz in z0..=z1 {
                    let kz = (qz as isize - z as isize + r) as usize;
                    for qy in y0..=y1 {
                        let ky = (qy as isize - y as isize + r) as usize;
                        let row = grid.index(0, qy, qz);
                        let krow = (kz * w + ky) * w;
                        for qx in x0..=x1 {
                            let kx = (qx as isize - x as isize + r) as usize;
                            let v = data[row + qx];
                            let dv = v - center;
                            let wt = spatial[krow + kx] * (-dv * dv * inv_r).exp();
                            num += wt * v;
                            den += wt;
                        }
                    }
                }
                slab[y * nx + x] = num / den;
            }
        }
    });
    Ok(ScalarVolume::new_unchecked(grid, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridInfo;

    /// Direct evaluation of the defining weighted average at one voxel.
    fn oracle(img: &ScalarVolume, p: [usize; 3], ss: f64, sr: f64) -> f64 {
        let (lo, hi) = img.min_max();
        let range = if hi > lo { hi - lo } else { 1.0 };
        let s_r = sr * range;
        let r = (2.0 * ss).ceil() as i64;
        let [nx, ny, nz] = img.grid().dims();
        let c = img.get(p[0], p[1], p[2]);
        let (mut num, mut den) = (0.0, 0.0);
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                    if q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= nx as i64 || q[1] >= ny as i64 || q[2] >= nz as i64 {
                        continue;
                    }
                    let v = img.get(q[0] as usize, q[1] as usize, q[2] as usize);
                    let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                    let wt = (-d2 / (2.0 * ss * ss)).exp() * (-(v - c).powi(2) / (2.0 * s_r * s_r)).exp();
                    num += wt * v;
                    den += wt;
                }
            }
        }
        num / den
    }

    #[test]
    fn constant_image_is_unchanged() {
        let g = GridInfo::cube(6).unwrap();
        let v = ScalarVolume::constant(g, 0.37);
        let f = bilateral_filter(&v, 2.0, 0.1).unwrap();
        for &x in f.data() {
            assert!((x - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn step_edge_is_preserved() {
        let g = GridInfo::cube(9).unwrap();
        let v = ScalarVolume::from_fn(g, |x, _, _| if x < 4 { 0.0 } else { 1.0 }).unwrap();
        let f = bilateral_filter(&v, 2.0, 0.1).unwrap();
        for (a, b) in f.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        for z in 0..9 {
            let q = oracle(&v, [3, 4, z], 2.0, 0.1);
            assert!((q - f.get(3, 4, z)).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_is_reduced_and_matches_oracle() {
        let g = GridInfo::cube(9).unwrap();
        let v = ScalarVolume::from_fn(g, |x, y, z| if (x, y, z) == (4, 4, 4) { 1.0 } else { 0.0 }).unwrap();
        let f = bilateral_filter(&v, 1.0, 1.0).unwrap();
        assert!(f.get(4, 4, 4) < 1.0);
        for p in [[4, 4, 4], [3, 4, 4], [0, 0, 0], [8, 2, 5]] {
            assert!((oracle(&v, p, 1.0, 1.0) - f.get(p[0], p[1], p[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_sigmas() {
        let g = GridInfo::cube(3).unwrap();
        let v = ScalarVolume::constant(g, 0.0);
        assert!(bilateral_filter(&v, 0.0, 0.1).is_err());
        assert!(bilateral_filter(&v, 1.0, -1.0).is_err());
    }
}
