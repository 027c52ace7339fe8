//! Grid-based value types shared by every stage of the pipeline.
//!
//! Everything is immutable once built; constructors reject invalid input
//! rather than clamping it. Voxel `(x, y, z)` lives at index
//! `z * nx * ny + y * nx + x`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
}

impl GridInfo {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!("all dims must be >= 2, got {dims:?}")));
        }
        if spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidGrid(format!("spacing must be positive and finite, got {spacing_mm:?}")));
        }
        Ok(Self { dims, spacing_mm })
    }

    /// Isotropic 1 mm grid.
    pub fn cube(n: usize) -> Result<Self> {
        Self::new([n; 3], [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Index strides along x, y, z.
    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a].is_finite() && p[a] >= 0.0 && p[a] <= (self.dims[a] - 1) as f64)
    }

    pub fn check_same(&self, other: &GridInfo, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch(format!("{what}: dims {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }
}

fn check_len(grid: &GridInfo, len: usize, what: &str) -> Result<()> {
    if len != grid.len() {
        return Err(Error::InvalidData(format!("{what}: expected {} values, got {len}", grid.len())));
    }
    Ok(())
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!("{what}: non-finite value at index {i}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    grid: GridInfo,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(grid: GridInfo, data: Vec<f64>) -> Result<Self> {
        check_len(&grid, data.len(), "volume")?;
        check_finite(&data, "volume")?;
        Ok(Self { grid, data })
    }

    pub(crate) fn new_unchecked(grid: GridInfo, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Self { grid, data }
    }

    pub fn constant(grid: GridInfo, v: f64) -> Self {
        Self { grid, data: vec![v; grid.len()] }
    }

    pub fn from_fn(grid: GridInfo, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &GridInfo {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        crate::par::sum(self.data.len(), |i| self.data[i]) / self.data.len() as f64
    }
}

/// Per-voxel displacement `u` in voxel units, stored as three planes.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: GridInfo,
    comps: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn new(grid: GridInfo, comps: [Vec<f64>; 3]) -> Result<Self> {
        for (a, c) in comps.iter().enumerate() {
            check_len(&grid, c.len(), &format!("field component {a}"))?;
            check_finite(c, &format!("field component {a}"))?;
        }
        Ok(Self { grid, comps })
    }

    pub(crate) fn new_unchecked(grid: GridInfo, comps: [Vec<f64>; 3]) -> Self {
        Self { grid, comps }
    }

    pub fn zeros(grid: GridInfo) -> Self {
        let n = grid.len();
        Self { grid, comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn constant(grid: GridInfo, u: [f64; 3]) -> Self {
        let n = grid.len();
        Self { grid, comps: [vec![u[0]; n], vec![u[1]; n], vec![u[2]; n]] }
    }

    /// Builds a field from a function of the voxel position.
    pub fn from_fn(grid: GridInfo, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        let n = grid.len();
        let mut comps = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let [x, y, z] = grid.coords(i);
            let u = f([x as f64, y as f64, z as f64]);
            for (c, v) in comps.iter_mut().zip(u) {
                c[i] = v;
            }
        }
        Self::new(grid, comps)
    }

    pub fn grid(&self) -> &GridInfo {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.comps
    }

    pub fn into_components(self) -> [Vec<f64>; 3] {
        self.comps
    }

    pub fn at(&self, i: usize) -> [f64; 3] {
        [self.comps[0][i], self.comps[1][i], self.comps[2][i]]
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|&v| v == 0.0))
    }

    /// Mean Euclidean displacement length over all voxels.
    pub fn mean_norm(&self) -> f64 {
        let n = self.grid.len();
        crate::par::sum(n, |i| {
            let u = self.at(i);
            (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
        }) / n as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flat_map(|c| c.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    grid: GridInfo,
    data: Vec<u8>,
}

impl Eq for GridInfo {}

impl BinaryMask {
    pub fn new(grid: GridInfo, data: Vec<u8>) -> Result<Self> {
        check_len(&grid, data.len(), "binary mask")?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidData(format!("binary mask: non-binary value {} at index {i}", data[i])));
        }
        Ok(Self { grid, data })
    }

    pub(crate) fn new_unchecked(grid: GridInfo, data: Vec<u8>) -> Self {
        Self { grid, data }
    }

    pub fn empty(grid: GridInfo) -> Self {
        Self { grid, data: vec![0; grid.len()] }
    }

    pub fn full(grid: GridInfo) -> Self {
        Self { grid, data: vec![1; grid.len()] }
    }

    pub fn from_fn(grid: GridInfo, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z) as u8
            })
            .collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridInfo {
        &self.grid
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_real(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// True when every voxel set here is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a & b).collect();
        BinaryMask { grid: self.grid, data }
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a & (1 - b)).collect();
        BinaryMask { grid: self.grid, data }
    }

    /// One step of 6-connected erosion; voxels on the grid border erode.
    pub fn erode(&self) -> BinaryMask {
        let [nx, ny, nz] = self.grid.dims;
        let g = self.grid;
        BinaryMask::from_fn(g, |x, y, z| {
            if !self.get(x, y, z) || x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1 {
                return false;
            }
            self.get(x - 1, y, z)
                && self.get(x + 1, y, z)
                && self.get(x, y - 1, z)
                && self.get(x, y + 1, z)
                && self.get(x, y, z - 1)
                && self.get(x, y, z + 1)
        })
    }

    /// One step of 6-connected dilation.
    pub fn dilate(&self) -> BinaryMask {
        let [nx, ny, nz] = self.grid.dims;
        BinaryMask::from_fn(self.grid, |x, y, z| {
            self.get(x, y, z)
                || (x > 0 && self.get(x - 1, y, z))
                || (x + 1 < nx && self.get(x + 1, y, z))
                || (y > 0 && self.get(x, y - 1, z))
                || (y + 1 < ny && self.get(x, y + 1, z))
                || (z > 0 && self.get(x, y, z - 1))
                || (z + 1 < nz && self.get(x, y, z + 1))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    grid: GridInfo,
    data: Vec<f64>,
}

impl SoftMask {
    pub fn new(grid: GridInfo, data: Vec<f64>) -> Result<Self> {
        check_len(&grid, data.len(), "soft mask")?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData(format!("soft mask: value {} at index {i} outside [0, 1]", data[i])));
        }
        Ok(Self { grid, data })
    }

    pub(crate) fn new_unchecked(grid: GridInfo, data: Vec<f64>) -> Self {
        Self { grid, data }
    }

    pub fn zeros(grid: GridInfo) -> Self {
        Self { grid, data: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: GridInfo, v: f64) -> Result<Self> {
        Self::new(grid, vec![v; grid.len()])
    }

    pub fn from_binary(mask: &BinaryMask) -> Self {
        Self { grid: mask.grid, data: mask.to_real() }
    }

    pub fn grid(&self) -> &GridInfo {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Binarizes with `value >= threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask::new_unchecked(self.grid, self.data.iter().map(|&v| (v >= threshold) as u8).collect())
    }

    /// Mean value over the voxels set in `region`; `None` for an empty region.
    pub fn mean_over(&self, region: &BinaryMask) -> Option<f64> {
        let (s, n) = self
            .data
            .iter()
            .zip(region.data())
            .filter(|(_, &m)| m != 0)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Fixed,
    Moving,
}

/// One annotated landmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: String,
    pub space: Space,
    pub position: [f64; 3],
}

/// A corresponding pair of landmarks in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPair {
    pub id: String,
    pub fixed: [f64; 3],
    pub moving: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pairs: Vec<LandmarkPair>,
}

impl LandmarkSet {
    /// Pairs fixed and moving rows by id. Rejects duplicates within a space,
    /// unpaired ids and positions outside `grid`.
    pub fn from_entries(entries: Vec<Landmark>, grid: &GridInfo) -> Result<Self> {
        let mut fixed: HashMap<String, [f64; 3]> = HashMap::new();
        let mut moving: HashMap<String, [f64; 3]> = HashMap::new();
        let mut order = Vec::new();
        for e in entries {
            if !grid.contains(e.position) {
                return Err(Error::Landmarks(format!(
                    "position outside grid for {} ({:?}): {:?}",
                    e.id, e.space, e.position
                )));
            }
            let map = match e.space {
                Space::Fixed => &mut fixed,
                Space::Moving => &mut moving,
            };
            if map.insert(e.id.clone(), e.position).is_some() {
                return Err(Error::Landmarks(format!("duplicate id {} in {:?} space", e.id, e.space)));
            }
            if e.space == Space::Fixed {
                order.push(e.id);
            }
        }
        for id in moving.keys() {
            if !fixed.contains_key(id) {
                return Err(Error::Landmarks(format!("unpaired landmark {id} (moving only)")));
            }
        }
        let mut pairs = Vec::with_capacity(order.len());
        for id in order {
            let Some(&m) = moving.get(&id) else {
                return Err(Error::Landmarks(format!("unpaired landmark {id} (fixed only)")));
            };
            pairs.push(LandmarkPair { fixed: fixed[&id], moving: m, id });
        }
        Ok(Self { pairs })
    }

    pub fn from_pairs(pairs: Vec<LandmarkPair>, grid: &GridInfo) -> Result<Self> {
        let entries = pairs
            .into_iter()
            .flat_map(|p| {
                [
                    Landmark { id: p.id.clone(), space: Space::Fixed, position: p.fixed },
                    Landmark { id: p.id, space: Space::Moving, position: p.moving },
                ]
            })
            .collect();
        Self::from_entries(entries, grid)
    }

    pub fn pairs(&self) -> &[LandmarkPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
