use volreg::metrics::dice;
use volreg::register::{register, register_coarse, register_stage2};
use volreg::synth::{generate_phantom, Scenario};
use volreg::warp::warp_mask;
use volreg::{BinaryMask, GridInfo, RegistrationConfig, ScalarVolume, SoftMask};

/// Smooth blob with a few lobes so every axis carries gradient information.
fn blobs(grid: GridInfo, shift: [f64; 3]) -> ScalarVolume {
    let centers = [[7.0, 8.0, 9.0], [15.0, 12.0, 10.0], [11.0, 16.0, 15.0]];
    ScalarVolume::from_fn(grid, |x, y, z| {
        let p = [x as f64 + shift[0], y as f64 + shift[1], z as f64 + shift[2]];
        centers
            .iter()
            .map(|c| {
                let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                (-d2 / 18.0).exp()
            })
            .sum()
    })
    .unwrap()
}

fn short(iters: Vec<usize>) -> RegistrationConfig {
    RegistrationConfig::default().with_iterations(iters)
}

#[test]
fn identical_images_stay_near_identity() {
    let g = GridInfo::cube(16).unwrap();
    let img = blobs(g, [0.0; 3]);
    let organ = BinaryMask::full(g);
    let r = register(&img, &img, &organ, None, &short(vec![30, 20])).unwrap();
    assert!(r.field.mean_norm() < 0.1, "mean |u| = {}", r.field.mean_norm());
}

#[test]
fn recovers_a_translation() {
    let g = GridInfo::cube(24).unwrap();
    let moving = blobs(g, [0.0; 3]);
    // fixed(x) = moving(x + 2 e_x), so the exact answer is u = (2, 0, 0).
    let fixed = blobs(g, [2.0, 0.0, 0.0]);
    let organ = BinaryMask::full(g);
    let cfg = RegistrationConfig { alpha_reg: 0.01, ..short(vec![150, 100]) };
    let r = register(&moving, &fixed, &organ, None, &cfg).unwrap();

    // Average over the voxels where the image actually has structure.
    let mut sum = [0.0; 3];
    let mut n = 0.0;
    for (i, &v) in fixed.data().iter().enumerate() {
        if v > 0.3 {
            let u = r.field.at(i);
            (0..3).for_each(|a| sum[a] += u[a]);
            n += 1.0;
        }
    }
    let mean = sum.map(|s| s / n);
    assert!((mean[0] - 2.0).abs() < 0.3, "mean u = {mean:?}");
    assert!(mean[1].abs() < 0.3 && mean[2].abs() < 0.3, "mean u = {mean:?}");
}

#[test]
fn registration_improves_organ_overlap() {
    let case = generate_phantom(Scenario::MatchedTumor, GridInfo::cube(48).unwrap(), 2).unwrap();
    let before = dice(&case.organ_moving, &case.organ_fixed).unwrap();
    let r = register(&case.moving, &case.fixed, &case.organ_moving, None, &short(vec![40, 20])).unwrap();
    let after = dice(&warp_mask(&case.organ_moving, &r.field, 0.5).unwrap(), &case.organ_fixed).unwrap();
    assert!(after > before + 0.02, "dice {before:.4} -> {after:.4}");
}

#[test]
fn zero_iterations_return_the_identity() {
    let g = GridInfo::cube(16).unwrap();
    let r = register(&blobs(g, [0.0; 3]), &blobs(g, [1.0, 0.0, 0.0]), &BinaryMask::full(g), None, &short(vec![0, 0]))
        .unwrap();
    assert!(r.field.is_zero());
    assert_eq!(r.loss_trace.len(), 2);
    assert!(r.levels.iter().all(|l| l.iterations == 0));
}

#[test]
fn no_level_ends_worse_than_it_started() {
    let case = generate_phantom(Scenario::ShrinkingTumor, GridInfo::cube(48).unwrap(), 5).unwrap();
    let stm = SoftMask::from_binary(&case.tumor_fixed);
    let cfg = RegistrationConfig { step_size: 2.0, ..short(vec![20, 10, 5]) };
    let r = register_stage2(&case.moving, &case.fixed, &case.organ_moving, &stm, &cfg).unwrap();
    assert_eq!(r.levels.len(), 3);
    for l in &r.levels {
        assert!(l.final_total <= l.initial_total, "{l:?}");
    }
    let dims: Vec<_> = r.levels.iter().map(|l| l.dims[0]).collect();
    assert_eq!(dims, [12, 24, 48]);
}

#[test]
fn all_zero_mask_matches_plain_registration() {
    let g = GridInfo::cube(16).unwrap();
    let moving = blobs(g, [0.0; 3]);
    let fixed = blobs(g, [0.0, 1.0, 0.5]);
    let organ = BinaryMask::from_fn(g, |x, y, z| (3..13).contains(&x) && (3..13).contains(&y) && (3..13).contains(&z));
    let cfg = short(vec![15, 10]);
    let plain = register(&moving, &fixed, &organ, None, &cfg).unwrap();
    let masked = register(&moving, &fixed, &organ, Some(&SoftMask::zeros(g)), &cfg).unwrap();
    let max_diff = (0..3)
        .flat_map(|a| plain.field.component(a).iter().zip(masked.field.component(a)))
        .map(|(p, m)| (p - m).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-9, "fields differ by {max_diff}");
}

#[test]
fn coarse_depth_is_validated_and_upsampled() {
    let g = GridInfo::cube(16).unwrap();
    let img = blobs(g, [0.0; 3]);
    let organ = BinaryMask::full(g);
    let cfg = short(vec![5, 5]);
    assert!(register_coarse(&img, &img, &organ, None, &cfg, 0).is_err());
    assert!(register_coarse(&img, &img, &organ, None, &cfg, 3).is_err());
    let r = register_coarse(&img, &blobs(g, [1.0, 0.0, 0.0]), &organ, None, &cfg, 1).unwrap();
    assert_eq!(r.levels.len(), 1);
    assert_eq!(r.field.grid().dims(), [16, 16, 16]);
}
