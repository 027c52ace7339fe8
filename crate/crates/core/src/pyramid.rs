//! Resolution pyramid: 2x2x2 block averaging down, trilinear field
//! upsampling with displacement rescaling.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{BinaryMask, DisplacementField, GridInfo, ScalarVolume, SoftMask};

/// Grid one level coarser: `ceil(n / 2)` voxels per axis, spacing doubled.
pub fn coarser_grid(g: &GridInfo) -> Result<GridInfo> {
    let d = g.dims();
    let s = g.spacing_mm();
    let nd = [d[0].div_ceil(2), d[1].div_ceil(2), d[2].div_ceil(2)];
    if nd.iter().any(|&n| n < 2) {
        return Err(Error::InvalidGrid(format!(
            "cannot downsample {d:?}: a coarser axis would have fewer than 2 voxels"
        )));
    }
    GridInfo::new(nd, [s[0] * 2.0, s[1] * 2.0, s[2] * 2.0])
}

/// Grids from finest to coarsest, `levels` entries.
pub fn grid_pyramid(finest: &GridInfo, levels: usize) -> Result<Vec<GridInfo>> {
    let mut out = vec![*finest];
    for _ in 1..levels {
        let next = coarser_grid(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

fn block_mean(src: &[f64], fine: &GridInfo, coarse: &GridInfo) -> Vec<f64> {
    let [nx, ny, nz] = fine.dims();
    par::map(coarse.len(), |i| {
        let [cx, cy, cz] = coarse.coords(i);
        let (mut s, mut n) = (0.0, 0usize);
        for z in 2 * cz..(2 * cz + 2).min(nz) {
            for y in 2 * cy..(2 * cy + 2).min(ny) {
                for x in 2 * cx..(2 * cx + 2).min(nx) {
                    s += src[fine.index(x, y, z)];
                    n += 1;
                }
            }
        }
        s / n as f64
    })
}

pub trait Downsample: Sized {
    fn downsample(&self) -> Result<Self>;
}

impl Downsample for ScalarVolume {
    fn downsample(&self) -> Result<Self> {
        let coarse = coarser_grid(self.grid())?;
        Ok(ScalarVolume::new_unchecked(coarse, block_mean(self.data(), self.grid(), &coarse)))
    }
}

impl Downsample for SoftMask {
    fn downsample(&self) -> Result<Self> {
        let coarse = coarser_grid(self.grid())?;
        let data = block_mean(self.data(), self.grid(), &coarse).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(SoftMask::new_unchecked(coarse, data))
    }
}

impl Downsample for BinaryMask {
    /// Block average, then `>= 0.5`.
    fn downsample(&self) -> Result<Self> {
        let coarse = coarser_grid(self.grid())?;
        let data = block_mean(&self.to_real(), self.grid(), &coarse).into_iter().map(|v| (v >= 0.5) as u8).collect();
        Ok(BinaryMask::new_unchecked(coarse, data))
    }
}

pub fn downsample<T: Downsample>(x: &T) -> Result<T> {
    x.downsample()
}

/// Block-averages each component and rescales it to voxel units of the
/// coarser grid.
pub fn downsample_field(f: &DisplacementField) -> Result<DisplacementField> {
    let coarse = coarser_grid(f.grid())?;
    let fd = f.grid().dims();
    let cd = coarse.dims();
    let comps = std::array::from_fn(|a| {
        let ratio = cd[a] as f64 / fd[a] as f64;
        block_mean(f.component(a), f.grid(), &coarse).into_iter().map(|v| v * ratio).collect()
    });
    Ok(DisplacementField::new_unchecked(coarse, comps))
}

/// Trilinear upsampling to `target`, with each component multiplied by the
/// dimension ratio of its axis.
///
/// Fine voxel `i` maps to source coordinate `(i + 0.5) * ns / nt - 0.5`,
/// which places each coarse voxel at the centre of the block it averaged.
pub fn upsample_field(f: &DisplacementField, target: &GridInfo) -> DisplacementField {
    let sd = f.grid().dims();
    let td = target.dims();
    let sg = *f.grid();
    let scale: [f64; 3] = std::array::from_fn(|a| sd[a] as f64 / td[a] as f64);
    let ratio: [f64; 3] = std::array::from_fn(|a| td[a] as f64 / sd[a] as f64);
    let vals: Vec<[f64; 3]> = par::map(target.len(), |i| {
        let c = target.coords(i);
        let p: [f64; 3] =
            std::array::from_fn(|a| ((c[a] as f64 + 0.5) * scale[a] - 0.5).clamp(0.0, (sd[a] - 1) as f64));
        let s = crate::warp::Trilinear::at(&sg, p);
        std::array::from_fn(|a| s.sample(f.component(a)) * ratio[a])
    });
    let comps = std::array::from_fn(|a| vals.iter().map(|v| v[a]).collect());
    DisplacementField::new_unchecked(*target, comps)
}
