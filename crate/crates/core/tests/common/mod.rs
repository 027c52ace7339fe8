//! Shared helpers for the integration tests: random smooth problems and a
//! central finite-difference gradient oracle.
#![allow(dead_code)]

use volreg::objective::{Objective, Weights};
use volreg::rng::SplitMix64;
use volreg::{BinaryMask, DisplacementField, GridInfo, ScalarVolume, SoftMask};

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_TOL: f64 = 1e-6;

pub struct Problem {
    pub moving: ScalarVolume,
    pub fixed: ScalarVolume,
    pub organ: BinaryMask,
    pub stm: SoftMask,
    pub field: DisplacementField,
}

/// Sum of a few random low-frequency sinusoids.
fn smooth_fn(rng: &mut SplitMix64, n: usize, terms: usize, amp: f64) -> impl Fn([f64; 3]) -> f64 {
    let waves: Vec<([f64; 3], f64, f64)> = (0..terms)
        .map(|_| {
            let k = std::array::from_fn(|_| rng.uniform(-2.0, 2.0) * std::f64::consts::PI / n as f64);
            (k, rng.uniform(0.0, 6.3), rng.uniform(-amp, amp))
        })
        .collect();
    move |p| waves.iter().map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum()
}

pub fn random_problem(seed: u64, n: usize, field_amp: f64) -> Problem {
    let mut rng = SplitMix64::new(seed);
    let g = GridInfo::cube(n).unwrap();
    let im = smooth_fn(&mut rng, n, 4, 0.5);
    let jf = smooth_fn(&mut rng, n, 4, 0.5);
    let moving = ScalarVolume::from_fn(g, |x, y, z| 1.0 + im([x as f64, y as f64, z as f64])).unwrap();
    let fixed = ScalarVolume::from_fn(g, |x, y, z| 1.0 + jf([x as f64, y as f64, z as f64])).unwrap();
    let s = smooth_fn(&mut rng, n, 3, 2.0);
    let stm_data = (0..g.len())
        .map(|i| {
            let [x, y, z] = g.coords(i);
            1.0 / (1.0 + (-s([x as f64, y as f64, z as f64])).exp())
        })
        .collect();
    let stm = SoftMask::new(g, stm_data).unwrap();
    let c = (n as f64 - 1.0) / 2.0;
    let r: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.25, 0.4) * n as f64);
    let organ = BinaryMask::from_fn(g, |x, y, z| {
        let d = [(x as f64 - c) / r[0], (y as f64 - c) / r[1], (z as f64 - c) / r[2]];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0
    });
    // Every probe moves the organ ratio, so a voxel sitting on the
    // `D' = 1` crease anywhere in the volume spoils all samples. Redraw
    // the field until the whole volume keeps a margin from it. A zero
    // amplitude gives the identity field, which sits on the crease
    // everywhere and is returned as is.
    loop {
        let u: Vec<_> = (0..3).map(|_| smooth_fn(&mut rng, n, 3, field_amp)).collect();
        let field = DisplacementField::from_fn(g, |p| [u[0](p), u[1](p), u[2](p)]).unwrap();
        let ratio = volreg::jacobian::organ_ratio(&field, &organ).unwrap();
        let jac = volreg::jacobian::jacobian_det(&field);
        if field_amp == 0.0 || jac.det().iter().all(|d| (d * ratio - 1.0).abs() > 1e-3) {
            return Problem { moving, fixed, organ, stm, field };
        }
    }
}

pub fn perturbed(f: &DisplacementField, i: usize, axis: usize, h: f64) -> DisplacementField {
    let mut comps = f.components().clone();
    comps[axis][i] += h;
    DisplacementField::new(*f.grid(), comps).unwrap()
}

/// Whether the objective is differentiable in component `(i, axis)` with
/// room for a `±FD_STEP` probe: the sample stays inside one interpolation
/// cell and no affected Jacobian sits on the `D' = 1` crease or the clamp.
pub fn differentiable_at(p: &Problem, i: usize, axis: usize, ratio: f64) -> bool {
    let g = p.field.grid();
    let c = g.coords(i);
    let s = c[axis] as f64 + p.field.component(axis)[i];
    let n = g.dims()[axis] as f64;
    let frac = s - s.floor();
    if s < 0.02 || s > n - 1.02 || !(0.02..=0.98).contains(&frac) {
        return false;
    }
    let jac = volreg::jacobian::jacobian_det(&p.field);
    let mut touched = vec![i];
    for ((ca, st), dim) in c.into_iter().zip(g.strides()).zip(g.dims()) {
        if ca > 0 {
            touched.push(i - st);
        }
        if ca + 1 < dim {
            touched.push(i + st);
        }
    }
    touched.iter().all(|&k| {
        let d = jac.det()[k];
        (d * ratio - 1.0).abs() > 0.02 && (d - 1e-6).abs() > 1e-2
    })
}

pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Compares analytic and central-difference gradients at `samples`
/// randomly chosen differentiable components.
pub fn check_gradient(p: &Problem, weights: Weights, with_stm: bool, samples: usize, seed: u64) -> FdReport {
    let stm = with_stm.then_some(&p.stm);
    let obj = Objective::new(&p.moving, &p.fixed, stm, &p.organ, weights).unwrap();
    let grad = obj.evaluate(&p.field, true).unwrap().gradient.unwrap();
    let ratio = volreg::jacobian::organ_ratio(&p.field, &p.organ).unwrap();
    let mut rng = SplitMix64::new(seed);
    let n = p.field.grid().len();
    let mut report = FdReport { checked: 0, worst_rel: 0.0, failures: vec![] };
    let mut attempts = 0;
    while report.checked < samples && attempts < samples * 50 {
        attempts += 1;
        let i = rng.below(n);
        let a = rng.below(3);
        if !differentiable_at(p, i, a, ratio) {
            continue;
        }
        let lp = obj.loss(&perturbed(&p.field, i, a, FD_STEP)).unwrap().total;
        let lm = obj.loss(&perturbed(&p.field, i, a, -FD_STEP)).unwrap().total;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let an = grad.component(a)[i];
        let err = (fd - an).abs();
        let rel = err / fd.abs().max(1e-300);
        if err > FD_ABS_TOL && rel > FD_REL_TOL {
            report.failures.push(format!("voxel {i} axis {a}: analytic {an:.6e} fd {fd:.6e}"));
        }
        if err > FD_ABS_TOL {
            report.worst_rel = report.worst_rel.max(rel);
        }
        report.checked += 1;
    }
    report
}
