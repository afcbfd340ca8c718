//! Ray-marching oracles: analytic chord lengths, step refinement, symmetry.

use biplanar_core::drr::{cast_ray, path_integrals, render_drr, render_drr_with, render_pair, DEFAULT_STEP};
use biplanar_core::geometry::BiplanarRig;
use biplanar_core::volume::{generate_phantom, PhantomSpec, Volume};
use biplanar_core::Exec;
use proptest::prelude::*;

fn sphere(radius: f64) -> Volume {
    Volume::from_fn([48, 48, 48], |p| {
        if p.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
            1.0
        } else {
            0.0
        }
    })
    .unwrap()
}

/// Least-squares slope of `log err` against `log step`.
fn loglog_slope(steps: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = steps.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[test]
fn central_ray_through_unit_cube() {
    let vol = Volume::filled([64, 64, 64], 1.0).unwrap();
    let p = cast_ray(&vol, [0.0, -3.0, 0.0], [0.0, 1.0, 0.0], DEFAULT_STEP).unwrap();
    assert!((p - 2.0).abs() <= 1e-3, "P = {p}");
}

#[test]
fn step_halving_converges_at_first_order() {
    // Steps that do not divide the chord, so truncation error is visible.
    let vol = Volume::filled([32, 32, 32], 1.0).unwrap();
    let s0 = 2.0 / (16.0 + 1.0 / 3.0);
    let steps: Vec<f64> = (0..5).map(|k| s0 / f64::powi(2.0, k)).collect();
    let errs: Vec<f64> = steps
        .iter()
        .map(|&s| (cast_ray(&vol, [0.0, 0.0, -3.0], [0.0, 0.0, 1.0], s).unwrap() - 2.0).abs())
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    let slope = loglog_slope(&steps, &errs);
    assert!((0.8..=2.2).contains(&slope), "slope {slope}");
}

#[test]
fn oblique_chord_matches_geometry() {
    // Diagonal ray in the z = 0 plane through the cube centre has length 2*sqrt(2).
    let vol = Volume::filled([32, 32, 32], 1.0).unwrap();
    let d = std::f64::consts::FRAC_1_SQRT_2;
    let p = cast_ray(&vol, [-3.0, -3.0, 0.0], [d, d, 0.0], 1e-4).unwrap();
    assert!((p - 2.0 * std::f64::consts::SQRT_2).abs() <= 1e-3, "P = {p}");
}

#[test]
fn phantom_step_refinement_shrinks_differences() {
    let vol = generate_phantom(&PhantomSpec::with_seed(3), [48, 48, 48]).unwrap();
    let pose = BiplanarRig::default().pa;
    let at = |s: f64| path_integrals(&vol, &pose, (32, 32), s, Exec::default()).unwrap();
    let (p32, p64, p128) = (at(1.0 / 32.0), at(1.0 / 64.0), at(1.0 / 128.0));
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let coarse = max_diff(&p32, &p64);
    let fine = max_diff(&p64, &p128);
    assert!(fine < coarse, "{fine} !< {coarse}");
    assert!(fine < 2e-2, "{fine}");
}

#[test]
fn centered_sphere_is_left_right_symmetric() {
    let img = render_drr(&sphere(0.6), &BiplanarRig::default().pa, (33, 33), DEFAULT_STEP).unwrap();
    for r in 0..img.rows {
        for c in 0..img.cols {
            let a = img.pixels[r * img.cols + c];
            let b = img.pixels[r * img.cols + img.cols - 1 - c];
            assert!((a - b).abs() <= 1e-6, "({r},{c}): {a} vs {b}");
        }
    }
}

#[test]
fn centered_sphere_looks_the_same_from_both_sources() {
    let (pa, lat) = render_pair(&sphere(0.6), &BiplanarRig::default(), (32, 32), DEFAULT_STEP).unwrap();
    let diff = pa.pixels.iter().zip(&lat.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(diff <= 1e-3, "{diff}");
}

#[test]
fn pair_equals_independent_renders_with_image_shape() {
    let vol = generate_phantom(&PhantomSpec::with_seed(1), [32, 32, 32]).unwrap();
    let rig = BiplanarRig::default();
    let (pa, lat) = render_pair(&vol, &rig, (24, 20), DEFAULT_STEP).unwrap();
    assert_eq!(pa, render_drr(&vol, &rig.pa, (24, 20), DEFAULT_STEP).unwrap());
    assert_eq!(lat, render_drr(&vol, &rig.lat, (24, 20), DEFAULT_STEP).unwrap());
    for img in [&pa, &lat] {
        assert_eq!((img.rows, img.cols, img.pixels.len()), (24, 20, 480));
        assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn execution_mode_does_not_change_pixels() {
    let vol = generate_phantom(&PhantomSpec::with_seed(2), [32, 32, 32]).unwrap();
    let pose = BiplanarRig::default().lat;
    let a = render_drr_with(&vol, &pose, (16, 16), DEFAULT_STEP, Exec::Sequential).unwrap();
    let b = render_drr_with(&vol, &pose, (16, 16), DEFAULT_STEP, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn path_integral_is_linear_in_density(seed in 0u64..1000, k in 0.1f32..4.0) {
        let vol = generate_phantom(&PhantomSpec::with_seed(seed), [16, 16, 16]).unwrap();
        let pose = BiplanarRig::default().pa;
        let base = path_integrals(&vol, &pose, (8, 8), 1.0 / 32.0, Exec::Sequential).unwrap();
        let scaled = path_integrals(&vol.scaled(k), &pose, (8, 8), 1.0 / 32.0, Exec::Sequential).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((b - k as f64 * a).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn rays_missing_the_box_integrate_to_zero(
        x in 1.01f64..3.0,
        z in -3.0f64..3.0,
    ) {
        let vol = Volume::filled([16, 16, 16], 1.0).unwrap();
        let p = cast_ray(&vol, [x, -3.0, z], [0.0, 1.0, 0.0], DEFAULT_STEP).unwrap();
        prop_assert_eq!(p, 0.0);
    }

    #[test]
    fn axis_aligned_chords_are_exact(x in -0.99f64..0.99, z in -0.99f64..0.99) {
        let vol = Volume::filled([16, 16, 16], 1.0).unwrap();
        let p = cast_ray(&vol, [x, -3.0, z], [0.0, 1.0, 0.0], 1.0 / 128.0).unwrap();
        prop_assert!((p - 2.0).abs() <= 1e-3);
    }
}
