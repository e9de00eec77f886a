use std::f64::consts::PI;

use proptest::prelude::*;

use vstain_core::imgproc::Plane;
use vstain_core::phantom::{generate_phantom, render_autofluorescence};
use vstain_core::registration::*;

const N: usize = 128;

fn texture(seed: u64) -> Plane {
    let ph = generate_phantom(seed, N, 0.3).unwrap();
    Plane::from_channel(&render_autofluorescence(&ph, 0.0).unwrap(), 1)
}

#[test]
fn integer_shift_recovered_exactly() {
    let img = texture(5);
    // fixed[p + d] = moving[p] with d = (7, -3).
    let fixed = Plane::from_fn(N, N, |y, x| img.get((y + N - 7) % N, (x + 3) % N));
    assert_eq!(coarse_match(&img, &fixed, &CoarseConfig::default()).unwrap(), (7, -3));

    let big = texture(6);
    let moving = big.crop(20, 20, 64, 64);
    let fixed = big.crop(13, 23, 80, 80);
    assert_eq!(coarse_match(&moving, &fixed, &CoarseConfig::default()).unwrap(), (7, -3));
}

#[test]
fn two_degree_rotation_recovered() {
    let img = texture(7);
    let c = (N as f64 - 1.0) / 2.0;
    let truth = AffineParams {
        theta_deg: 2.0,
        sx: 1.0,
        sy: 1.0,
        shear: 0.0,
        tx: 0.0,
        ty: 0.0,
    };
    let fixed = warp_affine(&img, &truth.to_transform(c, c));
    let r = affine_register(&img, &fixed, &AffineTransform::IDENTITY, &AffineConfig::default()).unwrap();
    assert!((r.params.theta_deg - 2.0).abs() < 0.2, "{:?}", r.params);
    assert!((r.params.tx).abs() < 0.5 && (r.params.ty).abs() < 0.5, "{:?}", r.params);
}

#[test]
fn rotation_survives_inverted_contrast() {
    let img = texture(8);
    let c = (N as f64 - 1.0) / 2.0;
    let truth = AffineParams {
        theta_deg: -2.0,
        sx: 1.0,
        sy: 1.0,
        shear: 0.0,
        tx: 1.5,
        ty: -1.0,
    };
    let fixed = warp_affine(&img, &truth.to_transform(c, c)).map(|v| 1.0 - v);
    let r = affine_register(&img, &fixed, &AffineTransform::IDENTITY, &AffineConfig::default()).unwrap();
    assert!((r.params.theta_deg + 2.0).abs() < 0.2, "{:?}", r.params);
}

fn sinusoid() -> DisplacementField {
    DisplacementField::from_fn(N, N, |y, x| {
        (
            3.0 * (2.0 * PI * x as f64 / 64.0).sin(),
            3.0 * (2.0 * PI * y as f64 / 64.0).cos(),
        )
    })
}

#[test]
fn sinusoidal_warp_recovered() {
    let img = texture(9);
    let u = sinusoid();
    let fixed = warp_field(&img, &u).unwrap();
    let e = elastic_register(&img, &fixed, &ElasticConfig::default()).unwrap();
    let epe = e.field.mean_endpoint_error(&u, 8);
    assert!(epe < 1.0, "mean endpoint error {epe}");
    assert!(e.field.max_gradient() <= ElasticConfig::default().max_gradient + 1e-9);
}

#[test]
fn identical_images_give_zero_field() {
    let img = texture(10);
    let e = elastic_register(&img, &img, &ElasticConfig::default()).unwrap();
    assert!(e.field.max_magnitude() < 1e-9);
    assert!(coarse_match(&img, &img, &CoarseConfig::default()).unwrap() == (0, 0));
}

#[test]
fn pipeline_composes_stages() {
    let img = texture(11);
    let shifted = Plane::from_fn(N, N, |y, x| img.get_clamped(y as isize - 4, x as isize + 2));
    let fixed = warp_field(&shifted, &sinusoid()).unwrap();
    let r = register_pipeline(
        &img,
        &fixed,
        &CoarseConfig::default(),
        &AffineConfig::default(),
        &ElasticConfig::default(),
        &|p: &Plane| p.clone(),
    )
    .unwrap();
    // The warp biases the integer search; it only seeds the affine stage.
    assert!((r.coarse_offset.0 - 4).abs() <= 1 && (r.coarse_offset.1 + 2).abs() <= 1, "{:?}", r.coarse_offset);
    let warped = r.apply(&img).unwrap();
    let err = |a: &Plane| -> f64 {
        let m = 12;
        let mut s = 0.0;
        for y in m..N - m {
            for x in m..N - m {
                s += (a.get(y, x) - fixed.get(y, x)).abs();
            }
        }
        s / ((N - 2 * m) * (N - 2 * m)) as f64
    };
    assert!(err(&warped) < 0.5 * err(&img), "{} vs {}", err(&warped), err(&img));
}

#[test]
fn field_file_round_trips_byte_identically() {
    let u = sinusoid();
    let mut bytes = Vec::new();
    u.write_to(&mut bytes).unwrap();
    let back = DisplacementField::read_from(bytes.as_slice()).unwrap();
    // Stored as f32.
    assert!(back.mean_endpoint_error(&u, 0) < 1e-6);
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(bytes, again);
    assert!(DisplacementField::read_from(&bytes[..bytes.len() - 1]).is_err());
}

proptest! {
    #[test]
    fn affine_inverse_composes_to_identity(
        theta in -30.0f64..30.0,
        sx in 0.8f64..1.25,
        sy in 0.8f64..1.25,
        shear in -0.2f64..0.2,
        tx in -10.0f64..10.0,
        ty in -10.0f64..10.0,
    ) {
        let p = AffineParams { theta_deg: theta, sx, sy, shear, tx, ty };
        let t = p.to_transform(31.5, 31.5);
        let id = t.compose(&t.inverse().unwrap());
        prop_assert!(id.max_abs_diff(&AffineTransform::IDENTITY) < 1e-9);
        let q = AffineParams::from_transform(&t, 31.5, 31.5);
        prop_assert!((q.theta_deg - theta).abs() < 1e-9);
        prop_assert!((q.sx - sx).abs() < 1e-9 && (q.sy - sy).abs() < 1e-9);
        prop_assert!((q.shear - shear).abs() < 1e-9);
        prop_assert!((q.tx - tx).abs() < 1e-9 && (q.ty - ty).abs() < 1e-9);
    }

    #[test]
    fn constant_field_warp_is_a_shift(dy in -3i32..=3, dx in -3i32..=3) {
        let img = Plane::from_fn(24, 24, |y, x| ((y * 7 + x * 13) % 17) as f64);
        let f = DisplacementField::from_fn(24, 24, |_, _| (dy as f64, dx as f64));
        let w = warp_field(&img, &f).unwrap();
        for y in 4..20 {
            for x in 4..20 {
                let src = img.get((y as i32 + dy) as usize, (x as i32 + dx) as usize);
                prop_assert!((w.get(y, x) - src).abs() < 1e-12);
            }
        }
    }
}
