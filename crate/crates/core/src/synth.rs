//! Synthetic organ/tumor phantoms with analytic ground truth.
//!
//! The moving scene is an ellipsoidal organ with a soft edge and a mild
//! sinusoidal texture, holding a spherical tumor. The fixed image samples a
//! (possibly modified) copy of that scene through an analytic smooth map
//! `psi(x) = c + (x - c) / scale + p(x)`, where `p` is a sum of sinusoids.
//! Because `psi` goes from fixed to moving coordinates it is directly the
//! ground-truth displacement `u(x) = psi(x) - x` of a backward registration.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, write_landmarks, write_volume};
use crate::metrics::dice;
use crate::rng::SplitMix64;
use crate::volume::{BinaryMask, DisplacementField, GridInfo, LandmarkPair, LandmarkSet, ScalarVolume};
use crate::warp::warp_mask;

pub const BACKGROUND: f64 = 0.1;
pub const ORGAN: f64 = 0.6;
pub const TUMOR: f64 = 0.9;
pub const MIN_DIM: usize = 32;
pub const LANDMARKS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The tumor is absent from the fixed image.
    VanishingTumor,
    /// The fixed tumor has half the radius.
    ShrinkingTumor,
    /// The tumor is unchanged.
    MatchedTumor,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::VanishingTumor => "vanishing_tumor",
            Scenario::ShrinkingTumor => "shrinking_tumor",
            Scenario::MatchedTumor => "matched_tumor",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanishing_tumor" => Ok(Scenario::VanishingTumor),
            "shrinking_tumor" => Ok(Scenario::ShrinkingTumor),
            "matched_tumor" => Ok(Scenario::MatchedTumor),
            _ => Err(Error::Config(format!(
                "unknown scenario {s:?}; expected vanishing_tumor, shrinking_tumor or matched_tumor"
            ))),
        }
    }
}

/// Shape parameters. Lengths are fractions of the grid size unless noted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub scenario: Scenario,
    /// Organ semi-axes before the fixed-image scaling.
    pub organ_radii: [f64; 3],
    pub tumor_radius: f64,
    /// Linear size of the fixed organ relative to the moving one.
    pub scale: f64,
    /// Largest norm of the sinusoidal perturbation, in voxels.
    pub perturbation_max: f64,
    /// Wavelength of the perturbation.
    pub perturbation_wavelength: f64,
    /// Peak radial displacement, in voxels, of bumps confined to a band
    /// around the organ surface. Zero disables them.
    pub boundary_bump: f64,
    /// Gaussian half-width of that band, in voxels.
    pub bump_width: f64,
    pub texture_amplitude: f64,
}

impl PhantomParams {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            organ_radii: [0.32, 0.26, 0.28],
            tumor_radius: 6.0 / 64.0,
            scale: 1.1,
            perturbation_max: 3.0,
            perturbation_wavelength: 1.0,
            boundary_bump: 0.0,
            bump_width: 4.0,
            texture_amplitude: 0.05,
        }
    }

    /// Variant whose organ outline differs unevenly between the two images:
    /// surface bumps add local volume change next to the boundary only.
    pub fn boundary_mismatch(scenario: Scenario) -> Self {
        Self { perturbation_max: 1.5, boundary_bump: 3.0, ..Self::new(scenario) }
    }
}

/// A generated case with every ground-truth annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub scenario: Scenario,
    pub moving: ScalarVolume,
    pub fixed: ScalarVolume,
    pub organ_moving: BinaryMask,
    pub organ_fixed: BinaryMask,
    pub tumor_moving: BinaryMask,
    pub tumor_fixed: BinaryMask,
    pub landmarks: LandmarkSet,
    pub gt_field: Option<DisplacementField>,
}

fn soft_step(signed_dist: f64, width: f64) -> f64 {
    0.5 * (1.0 - (signed_dist / width).tanh())
}

struct Scene {
    center: [f64; 3],
    radii: [f64; 3],
    tumor_center: [f64; 3],
    texture: [([f64; 3], f64); 2],
    texture_amplitude: f64,
}

impl Scene {
    /// Normalized ellipsoid radius; `<= 1` inside the organ.
    fn organ_level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>().sqrt()
    }

    fn in_organ(&self, p: [f64; 3]) -> bool {
        self.organ_level(p) <= 1.0
    }

    fn tumor_dist(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| (p[a] - self.tumor_center[a]).powi(2)).sum::<f64>().sqrt()
    }

    fn in_tumor(&self, p: [f64; 3], r: f64) -> bool {
        r > 0.0 && self.tumor_dist(p) <= r && self.in_organ(p)
    }

    fn intensity(&self, p: [f64; 3], tumor_radius: f64) -> f64 {
        let mean_r = (self.radii[0] * self.radii[1] * self.radii[2]).cbrt();
        let organ_w = soft_step((self.organ_level(p) - 1.0) * mean_r, 1.0);
        let tex: f64 =
            self.texture.iter().map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).product();
        let organ = ORGAN + self.texture_amplitude * tex;
        let mut v = BACKGROUND + (organ - BACKGROUND) * organ_w;
        if tumor_radius > 0.0 {
            let tumor_w = soft_step(self.tumor_dist(p) - tumor_radius, 0.75) * organ_w;
            v += (TUMOR - v) * tumor_w;
        }
        v
    }
}

struct Bump {
    amplitude: f64,
    width: f64,
    /// Organ semi-axes in the fixed frame.
    radii: [f64; 3],
    /// Angular pattern `sin(f * (d . n) + phase)` over the unit normal `n`.
    direction: [f64; 3],
    frequency: f64,
    phase: f64,
}

struct Deformation {
    center: [f64; 3],
    scale: f64,
    /// Per component: amplitude, wave vector, phase.
    waves: [(f64, [f64; 3], f64); 3],
    bump: Option<Bump>,
}

impl Deformation {
    fn map(&self, x: [f64; 3]) -> [f64; 3] {
        let rel: [f64; 3] = std::array::from_fn(|a| x[a] - self.center[a]);
        let mut radial = [0.0; 3];
        if let Some(b) = &self.bump {
            let norm = rel.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                let n = rel.map(|v| v / norm);
                let level = (0..3).map(|a| (rel[a] / b.radii[a]).powi(2)).sum::<f64>().sqrt();
                // distance to the surface along the ray, in voxels
                let s = (level - 1.0) * norm / level.max(1e-9);
                let pattern = (b.frequency * (0..3).map(|a| b.direction[a] * n[a]).sum::<f64>() + b.phase).sin();
                let mag = b.amplitude * pattern * (-(s / b.width).powi(2)).exp();
                radial = n.map(|v| v * mag);
            }
        }
        std::array::from_fn(|a| {
            let (amp, k, ph) = self.waves[a];
            self.center[a]
                + rel[a] / self.scale
                + radial[a]
                + amp * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).sin()
        })
    }
}

fn point(x: usize, y: usize, z: usize) -> [f64; 3] {
    [x as f64, y as f64, z as f64]
}

/// Phantom with the default shape parameters.
pub fn generate_phantom(scenario: Scenario, grid: GridInfo, seed: u64) -> Result<PhantomCase> {
    generate_with(&PhantomParams::new(scenario), grid, seed)
}

pub fn generate_with(params: &PhantomParams, grid: GridInfo, seed: u64) -> Result<PhantomCase> {
    let dims = grid.dims();
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::InvalidGrid(format!("phantoms need at least {MIN_DIM} voxels per axis, got {dims:?}")));
    }
    let n = dims.iter().copied().min().unwrap() as f64;
    let mut rng = SplitMix64::new(seed);
    let center: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let radii: [f64; 3] = std::array::from_fn(|a| params.organ_radii[a] * n * rng.uniform(0.95, 1.05));
    let tumor_r = params.tumor_radius * n;

    // Tumor centre: random offset, kept well inside the organ.
    let min_radius = radii.iter().copied().fold(f64::INFINITY, f64::min);
    let mut tumor_center = None;
    for _ in 0..200 {
        let off: [f64; 3] = std::array::from_fn(|_| rng.uniform(-0.45, 0.45));
        let c: [f64; 3] = std::array::from_fn(|a| center[a] + off[a] * radii[a]);
        let level = (0..3).map(|a| ((c[a] - center[a]) / radii[a]).powi(2)).sum::<f64>().sqrt();
        if level + (tumor_r + 1.0) / min_radius <= 0.9 {
            tumor_center = Some(c);
            break;
        }
    }
    let tumor_center = tumor_center.ok_or_else(|| {
        Error::Infeasible(format!("tumor of radius {tumor_r:.2} does not fit inside organ radii {radii:?}"))
    })?;

    let texture = std::array::from_fn(|_| {
        let k = std::array::from_fn(|_| rng.uniform(1.0, 2.0) * 2.0 * PI / (0.4 * n));
        (k, rng.uniform(0.0, 2.0 * PI))
    });
    let scene = Scene { center, radii, tumor_center, texture, texture_amplitude: params.texture_amplitude };

    let amp = params.perturbation_max / 3f64.sqrt();
    let kmag = 2.0 * PI / (params.perturbation_wavelength * n);
    let waves = std::array::from_fn(|a| {
        let mut k: [f64; 3] = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
        k[a] = 0.0;
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let k = k.map(|v| v / norm * kmag);
        (amp * rng.uniform(0.8, 1.0), k, rng.uniform(0.0, 2.0 * PI))
    });
    let bump = (params.boundary_bump > 0.0).then(|| {
        let d: [f64; 3] = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Bump {
            amplitude: params.boundary_bump,
            width: params.bump_width,
            radii: radii.map(|r| r * params.scale),
            direction: d.map(|v| v / norm),
            frequency: 2.0 * PI,
            phase: rng.uniform(0.0, 2.0 * PI),
        }
    });
    let deform = Deformation { center, scale: params.scale, waves, bump };

    let fixed_tumor_r = match params.scenario {
        Scenario::VanishingTumor => 0.0,
        Scenario::ShrinkingTumor => tumor_r / 2.0,
        Scenario::MatchedTumor => tumor_r,
    };
    // The vanishing tumor's annotation marks the site it occupied.
    let fixed_mask_r = match params.scenario {
        Scenario::VanishingTumor => tumor_r,
        _ => fixed_tumor_r,
    };

    let moving = ScalarVolume::from_fn(grid, |x, y, z| scene.intensity(point(x, y, z), tumor_r))?;
    let fixed = ScalarVolume::from_fn(grid, |x, y, z| scene.intensity(deform.map(point(x, y, z)), fixed_tumor_r))?;
    let organ_moving = BinaryMask::from_fn(grid, |x, y, z| scene.in_organ(point(x, y, z)));
    let tumor_moving = BinaryMask::from_fn(grid, |x, y, z| scene.in_tumor(point(x, y, z), tumor_r));
    let organ_fixed = BinaryMask::from_fn(grid, |x, y, z| scene.in_organ(deform.map(point(x, y, z))));
    let tumor_fixed = BinaryMask::from_fn(grid, |x, y, z| scene.in_tumor(deform.map(point(x, y, z)), fixed_mask_r));
    let gt_field = DisplacementField::from_fn(grid, |p| {
        let q = deform.map(p);
        std::array::from_fn(|a| q[a] - p[a])
    })?;

    let landmarks = landmarks(&grid, &scene, &deform, params.scale)?;
    let case = PhantomCase {
        scenario: params.scenario,
        moving,
        fixed,
        organ_moving,
        organ_fixed,
        tumor_moving,
        tumor_fixed,
        landmarks,
        gt_field: Some(gt_field),
    };
    check_case(&case)?;
    Ok(case)
}

/// Fixed-space points on a slightly shrunk copy of the organ surface plus an
/// interior lattice, each paired with its analytic moving-space image.
fn landmarks(grid: &GridInfo, scene: &Scene, deform: &Deformation, scale: f64) -> Result<LandmarkSet> {
    let mut dirs: Vec<[f64; 3]> = Vec::new();
    for a in 0..3 {
        for s in [-1.0, 1.0] {
            let mut d = [0.0; 3];
            d[a] = s;
            dirs.push(d);
        }
    }
    let h = 1.0 / 2f64.sqrt();
    for (a, b) in [(0, 1), (1, 2), (0, 2)] {
        for s in [-1.0, 1.0] {
            let mut d = [0.0; 3];
            d[a] = h;
            d[b] = s * h;
            dirs.push(d);
        }
    }
    let mut fixed_pts: Vec<[f64; 3]> =
        dirs.iter().map(|d| std::array::from_fn(|a| scene.center[a] + 0.9 * scale * scene.radii[a] * d[a])).collect();
    for corner in 0..8 {
        let sign = |bit: usize| if corner >> bit & 1 == 1 { 1.0 } else { -1.0 };
        fixed_pts.push(std::array::from_fn(|a| scene.center[a] + 0.35 * scale * scene.radii[a] * sign(a)));
    }
    debug_assert_eq!(fixed_pts.len(), LANDMARKS);
    let pairs = fixed_pts
        .into_iter()
        .enumerate()
        .map(|(i, f)| LandmarkPair { id: format!("L{i:02}"), fixed: f, moving: deform.map(f) })
        .collect();
    LandmarkSet::from_pairs(pairs, grid)
}

/// Construction checks: mask containment, nonempty masks, plausible tumor
/// size and ground-truth organ overlap.
fn check_case(case: &PhantomCase) -> Result<()> {
    for (name, m) in [
        ("organ_moving", &case.organ_moving),
        ("organ_fixed", &case.organ_fixed),
        ("tumor_moving", &case.tumor_moving),
        ("tumor_fixed", &case.tumor_fixed),
    ] {
        if m.count() == 0 {
            return Err(Error::Infeasible(format!("{name} is empty")));
        }
    }
    if !case.tumor_moving.is_subset_of(&case.organ_moving) || !case.tumor_fixed.is_subset_of(&case.organ_fixed) {
        return Err(Error::Infeasible("tumor extends outside the organ".into()));
    }
    let tsr = case.tumor_moving.count() as f64 / case.organ_moving.count() as f64;
    if !(0.005..=0.05).contains(&tsr) {
        return Err(Error::Infeasible(format!("tumor size ratio {tsr:.4} outside [0.005, 0.05]")));
    }
    if let Some(gt) = &case.gt_field {
        let d = dice(&warp_mask(&case.organ_moving, gt, 0.5)?, &case.organ_fixed)?;
        if d < 0.98 {
            return Err(Error::Infeasible(format!("ground-truth organ overlap {d:.4} below 0.98")));
        }
    }
    Ok(())
}

/// A mask inside `organ` whose Dice against `gt_tumor` is as close as
/// possible to `target_dice`: `round(d t)` tumor voxels are kept and the
/// remainder of the `t = |gt_tumor|` budget is drawn from the organ outside
/// the tumor, so the Dice equals `kept / t`.
pub fn noisy_mask(gt_tumor: &BinaryMask, organ: &BinaryMask, target_dice: f64, seed: u64) -> Result<BinaryMask> {
    gt_tumor.grid().check_same(organ.grid(), "noisy mask")?;
    if !(target_dice > 0.0 && target_dice <= 1.0) {
        return Err(Error::Infeasible(format!("target Dice must be in (0, 1], got {target_dice}")));
    }
    let t = gt_tumor.count();
    if t == 0 {
        return Err(Error::EmptyMask("ground-truth tumor is empty".into()));
    }
    if !gt_tumor.is_subset_of(organ) {
        return Err(Error::Infeasible("ground-truth tumor is not inside the organ".into()));
    }
    let keep = (target_dice * t as f64).round() as usize;
    let extra = t - keep;
    if (keep as f64 / t as f64 - target_dice).abs() > 0.05 {
        return Err(Error::Infeasible(format!("{t} tumor voxels cannot reach Dice {target_dice} within 0.05")));
    }
    let mut tumor_idx = Vec::with_capacity(t);
    let mut other_idx = Vec::new();
    for (i, (&g, &o)) in gt_tumor.data().iter().zip(organ.data()).enumerate() {
        if g == 1 {
            tumor_idx.push(i);
        } else if o == 1 {
            other_idx.push(i);
        }
    }
    if extra > other_idx.len() {
        return Err(Error::Infeasible(format!(
            "need {extra} organ voxels outside the tumor, only {} available",
            other_idx.len()
        )));
    }
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut tumor_idx);
    rng.shuffle(&mut other_idx);
    let mut data = vec![0u8; gt_tumor.grid().len()];
    for &i in tumor_idx[..keep].iter().chain(&other_idx[..extra]) {
        data[i] = 1;
    }
    BinaryMask::new(*gt_tumor.grid(), data)
}

/// File names inside a case directory.
pub mod files {
    pub const MANIFEST: &str = "case.json";
    pub const MOVING: &str = "moving.vpv.json";
    pub const FIXED: &str = "fixed.vpv.json";
    pub const ORGAN_MOVING: &str = "organ_moving.vpv.json";
    pub const ORGAN_FIXED: &str = "organ_fixed.vpv.json";
    pub const TUMOR_MOVING: &str = "tumor_moving.vpv.json";
    pub const TUMOR_FIXED: &str = "tumor_fixed.vpv.json";
    pub const GT_FIELD: &str = "gt_field.vpv.json";
    pub const LANDMARKS: &str = "landmarks.csv";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub scenario: Scenario,
    pub seed: Option<u64>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub moving: String,
    pub fixed: String,
    pub organ_moving: String,
    pub organ_fixed: String,
    pub tumor_moving: String,
    pub tumor_fixed: String,
    pub landmarks: String,
    pub gt_field: Option<String>,
}

pub fn write_case(case: &PhantomCase, dir: impl AsRef<Path>, seed: Option<u64>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_volume(&case.moving, dir.join(files::MOVING))?;
    write_volume(&case.fixed, dir.join(files::FIXED))?;
    write_volume(&case.organ_moving, dir.join(files::ORGAN_MOVING))?;
    write_volume(&case.organ_fixed, dir.join(files::ORGAN_FIXED))?;
    write_volume(&case.tumor_moving, dir.join(files::TUMOR_MOVING))?;
    write_volume(&case.tumor_fixed, dir.join(files::TUMOR_FIXED))?;
    write_landmarks(&case.landmarks, dir.join(files::LANDMARKS))?;
    if let Some(f) = &case.gt_field {
        write_volume(f, dir.join(files::GT_FIELD))?;
    }
    let grid = case.moving.grid();
    let manifest = CaseManifest {
        scenario: case.scenario,
        seed,
        dims: grid.dims(),
        spacing_mm: grid.spacing_mm(),
        moving: files::MOVING.into(),
        fixed: files::FIXED.into(),
        organ_moving: files::ORGAN_MOVING.into(),
        organ_fixed: files::ORGAN_FIXED.into(),
        tumor_moving: files::TUMOR_MOVING.into(),
        tumor_fixed: files::TUMOR_FIXED.into(),
        landmarks: files::LANDMARKS.into(),
        gt_field: case.gt_field.as_ref().map(|_| files::GT_FIELD.into()),
    };
    let path = dir.join(files::MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CaseManifest> {
    let path = dir.as_ref().join(files::MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_case(dir: impl AsRef<Path>) -> Result<PhantomCase> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let moving = io::read_scalar(dir.join(&m.moving))?;
    let fixed = io::read_scalar(dir.join(&m.fixed))?;
    moving.grid().check_same(fixed.grid(), "case images")?;
    let case = PhantomCase {
        scenario: m.scenario,
        landmarks: io::read_landmarks(dir.join(&m.landmarks), fixed.grid())?,
        organ_moving: io::read_binary(dir.join(&m.organ_moving))?,
        organ_fixed: io::read_binary(dir.join(&m.organ_fixed))?,
        tumor_moving: io::read_binary(dir.join(&m.tumor_moving))?,
        tumor_fixed: io::read_binary(dir.join(&m.tumor_fixed))?,
        gt_field: m.gt_field.as_ref().map(|f| io::read_field(dir.join(f))).transpose()?,
        moving,
        fixed,
    };
    for (name, g) in [
        ("organ_moving", case.organ_moving.grid()),
        ("organ_fixed", case.organ_fixed.grid()),
        ("tumor_moving", case.tumor_moving.grid()),
        ("tumor_fixed", case.tumor_fixed.grid()),
    ] {
        g.check_same(case.fixed.grid(), name)?;
    }
    Ok(case)
}
