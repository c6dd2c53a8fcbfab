use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqgan_core::metrics::{fid, psnr, PSNR_IDENTICAL};

fn cloud(rng: &mut impl Rng, n: usize, dim: usize, shift: f64, spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|k| shift + spread * rng.gen_range(-1.0..1.0) * (1.0 + k as f64 * 0.3)).collect())
        .collect()
}

/// Rotation by `angle` in the plane of the first two coordinates.
fn rotate(points: &[Vec<f64>], angle: f64) -> Vec<Vec<f64>> {
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q[0] = c * p[0] - s * p[1];
            q[1] = s * p[0] + c * p[1];
            q
        })
        .collect()
}

#[test]
fn fid_is_invariant_under_rotation_and_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = cloud(&mut rng, 60, 4, 0.0, 1.0);
    let b = cloud(&mut rng, 60, 4, 0.7, 1.5);
    let base = fid(&a, &b).unwrap();
    assert!(!base.regularized);
    let rotated = fid(&rotate(&a, 0.8), &rotate(&b, 0.8)).unwrap();
    assert!((base.value - rotated.value).abs() < 1e-8 * base.value.max(1.0));
    let moved = |p: &[Vec<f64>]| p.iter().map(|v| v.iter().map(|x| x + 3.0).collect()).collect::<Vec<Vec<f64>>>();
    let translated = fid(&moved(&a), &moved(&b)).unwrap();
    assert!((base.value - translated.value).abs() < 1e-8 * base.value.max(1.0));
}

#[test]
fn fid_is_symmetric_and_zero_on_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = cloud(&mut rng, 40, 3, 0.0, 1.0);
    let b = cloud(&mut rng, 40, 3, 0.2, 0.5);
    let ab = fid(&a, &b).unwrap().value;
    let ba = fid(&b, &a).unwrap().value;
    assert!((ab - ba).abs() < 1e-8);
    assert!(fid(&a, &a).unwrap().value.abs() < 1e-8);
    assert!(ab > 0.0);
}

#[test]
fn fid_grows_with_mean_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = cloud(&mut rng, 50, 3, 0.0, 1.0);
    let shifted = |d: f64| a.iter().map(|v| v.iter().map(|x| x + d).collect()).collect::<Vec<Vec<f64>>>();
    let values: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|&d| fid(&a, &shifted(d)).unwrap().value).collect();
    for (v, d) in values.iter().zip([0.5, 1.0, 2.0]) {
        assert!((v - 3.0 * d * d).abs() < 1e-6, "shift {d}: {v}");
    }
}

#[test]
fn few_samples_are_regularized() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = cloud(&mut rng, 3, 6, 0.0, 1.0);
    let b = cloud(&mut rng, 3, 6, 0.5, 1.0);
    let f = fid(&a, &b).unwrap();
    assert!(f.regularized);
    assert!(f.value.is_finite() && f.value > 0.0);
    assert!(fid(&a[..1], &b).is_err());
}

#[test]
fn psnr_identical_and_monotone() {
    let x = Array3::from_shape_fn((3, 8, 8), |(c, i, j)| ((c + i * 3 + j * 5) % 11) as f64 / 10.0);
    assert_eq!(psnr(&x, &x).unwrap(), PSNR_IDENTICAL);
    let mut last = f64::INFINITY;
    for noise in [0.01, 0.05, 0.1, 0.3] {
        let y = x.mapv(|v| v + noise);
        let p = psnr(&x, &y).unwrap();
        assert!((p - (-20.0 * f64::log10(noise))).abs() < 1e-9);
        assert!(p < last);
        last = p;
    }
    assert!(psnr(&x, &Array3::zeros((3, 4, 4))).is_err());
}
