//! Unsupervised soft tumor-mask estimation.
//!
//! A similarity-only registration cannot reproduce a tumor that is missing
//! or resized in the fixed image without locally compressing or stretching
//! the field. Voxels whose volume change deviates strongly from the organ's
//! overall change are therefore flagged as suspected tumor.

use crate::config::{RegistrationConfig, Transform};
use crate::error::{Error, Result};
use crate::filter::bilateral_filter;
use crate::jacobian::distance_field;
use crate::par;
use crate::register::{register, register_coarse};
use crate::volume::{BinaryMask, DisplacementField, ScalarVolume, SoftMask};
use crate::warp::{warp_mask, warp_scalar};

/// Binarization threshold for transported masks.
const MASK_THRESHOLD: f64 = 0.5;

fn map_soft(d: &ScalarVolume, f: impl Fn(f64) -> f64 + Sync) -> SoftMask {
    let data = d.data();
    let mut out = vec![0.0; data.len()];
    par::fill(&mut out, |i| f(data[i]).clamp(0.0, 1.0));
    SoftMask::new_unchecked(*d.grid(), out)
}

pub fn sigmoid(d: f64) -> f64 {
    1.0 / (1.0 + (-5.0 * (d - 1.5)).exp())
}

pub fn sin_ramp(d: f64) -> f64 {
    0.5 * (std::f64::consts::PI * (d.clamp(1.0, 2.0) - 1.5)).sin() + 0.5
}

pub fn transform_sigmoid(d: &ScalarVolume) -> SoftMask {
    map_soft(d, sigmoid)
}

pub fn transform_sin(d: &ScalarVolume) -> SoftMask {
    map_soft(d, sin_ramp)
}

/// Binary mask of `D >= t`.
pub fn transform_hard(d: &ScalarVolume, t: f64) -> Result<SoftMask> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Config(format!("hard threshold must be > 0, got {t}")));
    }
    Ok(map_soft(d, |v| if v >= t { 1.0 } else { 0.0 }))
}

pub fn apply_transform(d: &ScalarVolume, transform: Transform) -> Result<SoftMask> {
    match transform {
        Transform::Sigmoid => Ok(transform_sigmoid(d)),
        Transform::Sin => Ok(transform_sin(d)),
        Transform::Hard(t) => transform_hard(d, t),
    }
}

/// Everything produced along the way to the soft tumor mask.
#[derive(Debug, Clone)]
pub struct MaskEstimate {
    pub stm: SoftMask,
    /// Edge-aligning field from the filtered image (zero when skipped).
    pub prereg_field: DisplacementField,
    /// Similarity field whose volume change defines the mask.
    pub field: DisplacementField,
    pub distance: ScalarVolume,
    pub organ_ratio: f64,
    /// Organ support of the mask on the fixed grid.
    pub organ: BinaryMask,
}

/// Runs the full estimation, optionally without the bilateral
/// pre-registration pass.
pub fn estimate_with(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    organ_moving: &BinaryMask,
    config: &RegistrationConfig,
    prereg: bool,
) -> Result<MaskEstimate> {
    config.validate()?;
    moving.grid().check_same(fixed.grid(), "moving/fixed")?;
    organ_moving.grid().check_same(fixed.grid(), "organ mask")?;
    if organ_moving.count() == 0 {
        return Err(Error::EmptyMask("moving organ mask is empty".into()));
    }

    let (prereg_field, m1, o1) = if prereg {
        let depth = config.prereg_levels.min(config.pyramid_levels);
        let filtered = bilateral_filter(moving, config.bilateral_sigma_space, config.bilateral_sigma_range)?;
        let phi1 = register_coarse(&filtered, fixed, organ_moving, None, config, depth)?.field;
        let m1 = warp_scalar(moving, &phi1)?;
        let o1 = warp_mask(organ_moving, &phi1, MASK_THRESHOLD)?;
        if o1.count() == 0 {
            return Err(Error::EmptyMask(format!(
                "organ vanished after pre-registration (max |u| = {:.3} voxels)",
                phi1.max_abs()
            )));
        }
        (phi1, m1, o1)
    } else {
        (DisplacementField::zeros(*fixed.grid()), moving.clone(), organ_moving.clone())
    };

    let phi2 = register(&m1, fixed, &o1, None, config)?.field;
    let (distance, organ_ratio) = distance_field(&phi2, &o1)?;
    let raw = apply_transform(&distance, config.transform)?;
    // The mask lives on the fixed grid, so the organ support is taken in
    // that frame as well.
    let organ_fixed = warp_mask(&o1, &phi2, MASK_THRESHOLD)?;
    let mut data = raw.data().to_vec();
    for (v, &o) in data.iter_mut().zip(organ_fixed.data()) {
        if o == 0 {
            *v = 0.0;
        }
    }
    let stm = SoftMask::new_unchecked(*fixed.grid(), data);
    Ok(MaskEstimate { stm, prereg_field, field: phi2, distance, organ_ratio, organ: organ_fixed })
}

/// Soft tumor mask on the fixed grid together with the pre-registration
/// field.
pub fn estimate_soft_mask(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    organ_moving: &BinaryMask,
    config: &RegistrationConfig,
) -> Result<(SoftMask, DisplacementField)> {
    let e = estimate_with(moving, fixed, organ_moving, config, true)?;
    Ok((e.stm, e.prereg_field))
}

/// Transfers an organ segmentation from an atlas image onto `moving`.
pub fn propagate_organ_mask(
    reference: &ScalarVolume,
    reference_organ: &BinaryMask,
    moving: &ScalarVolume,
    config: &RegistrationConfig,
) -> Result<BinaryMask> {
    if reference_organ.count() == 0 {
        return Err(Error::EmptyMask("reference organ mask is empty".into()));
    }
    let phi = register(reference, moving, reference_organ, None, config)?.field;
    warp_mask(reference_organ, &phi, MASK_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridInfo;

    /// Row `values` repeated over a `[n, 2, 2]` grid; the first `n` voxels
    /// carry the values in order.
    fn volume(values: &[f64]) -> ScalarVolume {
        let g = GridInfo::new([values.len(), 2, 2], [1.0; 3]).unwrap();
        ScalarVolume::from_fn(g, |x, _, _| values[x]).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        let s = transform_sigmoid(&volume(&[1.5, 2.5, 1.0]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0 / (1.0 + (-5.0f64).exp())).abs() < 1e-15);
        assert!((s.data()[1] - 0.99331).abs() < 1e-5);
        assert!((s.data()[2] - 0.07586).abs() < 1e-5);
    }

    #[test]
    fn sin_values_and_saturation() {
        let s = transform_sin(&volume(&[1.5, 2.0, 1.0, 3.7, 0.5]));
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 1.0).abs() < 1e-15);
        assert!(s.data()[2].abs() < 1e-15);
        assert!((s.data()[3] - 1.0).abs() < 1e-15);
        assert!(s.data()[4].abs() < 1e-15);
    }

    #[test]
    fn hard_tie_goes_up() {
        let s = transform_hard(&volume(&[1.2, 1.8, 1.5]), 1.5).unwrap();
        assert_eq!(&s.data()[..3], &[0.0, 1.0, 1.0]);
        assert!(transform_hard(&volume(&[1.0, 2.0]), 0.0).is_err());
    }

    #[test]
    fn transforms_are_monotone_and_bounded() {
        let ds: Vec<f64> = (0..400).map(|i| 1.0 + i as f64 * 0.01).collect();
        let v = volume(&ds);
        for t in [Transform::Sigmoid, Transform::Sin, Transform::Hard(1.7)] {
            let s = apply_transform(&v, t).unwrap();
            for w in s.data()[..ds.len()].windows(2) {
                assert!(w[0] <= w[1], "{t} not monotone");
            }
            assert!(s.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn empty_organ_rejected() {
        let g = GridInfo::cube(8).unwrap();
        let img = ScalarVolume::constant(g, 1.0);
        let cfg = RegistrationConfig::default();
        assert!(matches!(estimate_soft_mask(&img, &img, &BinaryMask::empty(g), &cfg), Err(Error::EmptyMask(_))));
        assert!(propagate_organ_mask(&img, &BinaryMask::empty(g), &img, &cfg).is_err());
    }
}
