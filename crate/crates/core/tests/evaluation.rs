use fnbridge::datasets::{Kernel, KernelKind};
use fnbridge::evaluation::*;
use fnbridge::ou_bridge::CoordGaussian;
use fnbridge::rng::stream;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gauss(n: usize, d: usize, shift: f64, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, &[7]);
    Array2::from_shape_fn((n, d), |_| shift + rng.sample::<f64, _>(StandardNormal))
}

fn mmd2_direct(x: &Array2<f64>, y: &Array2<f64>, h: f64) -> f64 {
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        (-d / (2.0 * h * h)).exp()
    };
    let (m, n) = (x.nrows(), y.nrows());
    let mut sxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sxx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut syy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                syy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut sxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            sxy += k(x.row(i), y.row(j));
        }
    }
    sxx / (m * (m - 1)) as f64 + syy / (n * (n - 1)) as f64 - 2.0 * sxy / (m * n) as f64
}

#[test]
fn mmd_matches_direct_double_sum() {
    let x = gauss(17, 3, 0.0, 1);
    let y = gauss(23, 3, 0.4, 2);
    for h in [0.5, 1.0, 3.0] {
        let a = mmd2_unbiased(x.view(), y.view(), h);
        let b = mmd2_direct(&x, &y, h);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn mmd_is_unbiased_under_the_null() {
    let vals: Vec<f64> = (0..400).map(|r| mmd2_unbiased(gauss(20, 2, 0.0, 2 * r).view(), gauss(20, 2, 0.0, 2 * r + 1).view(), 1.0)).collect();
    let mean = vals.iter().sum::<f64>() / 400.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 399.0).sqrt();
    assert!(mean.abs() < 3.0 * sd / 20.0, "mean {mean}, sd {sd}");
}

#[test]
fn median_distance_oracle() {
    let x = [0.0f64, 1.0, 3.0, 7.0];
    let d2 = Array2::from_shape_fn((4, 4), |(i, j)| (x[i] - x[j]).powi(2));
    // distances 1, 3, 7, 2, 6, 4: upper median 4
    assert_eq!(median_distance(&d2), 4.0);
}

#[test]
fn permutation_p_values_are_calibrated() {
    let mut rejections = 0;
    for r in 0..200 {
        let (p, _) = mmd_permutation_test(gauss(25, 2, 0.0, 3 * r).view(), gauss(25, 2, 0.0, 3 * r + 1).view(), 99, &mut stream(r, &[9])).unwrap();
        assert!(p > 0.0 && p <= 1.0);
        rejections += (p <= 0.05) as usize;
    }
    // binomial(200, 0.05): mean 10, sd ~3.1
    assert!((1..=22).contains(&rejections), "{rejections}");
}

#[test]
fn power_tracks_the_shift() {
    let real = gauss(2000, 2, 0.0, 10);
    let same = mmd_test_power(gauss(2000, 2, 0.0, 11).view(), real.view(), 40, 50, 0.05, 99, 1).unwrap();
    let far = mmd_test_power(gauss(2000, 2, 1.0, 12).view(), real.view(), 40, 50, 0.05, 99, 1).unwrap();
    assert!(same.disjoint && far.disjoint);
    assert!(same.power <= 0.2, "{same:?}");
    assert_eq!(far.power, 1.0);
    let again = mmd_test_power(gauss(2000, 2, 0.0, 11).view(), real.view(), 40, 50, 0.05, 99, 1).unwrap();
    assert_eq!(same, again);
    let small = mmd_test_power(gauss(100, 2, 0.0, 11).view(), real.view(), 40, 50, 0.05, 99, 1).unwrap();
    assert!(!small.disjoint);
    assert!(mmd_test_power(gauss(10, 2, 0.0, 11).view(), real.view(), 5, 50, 0.05, 99, 1).is_err());
}

#[test]
fn gp_oracle_matches_joint_gaussian_conditioning() {
    let k = Kernel { kind: KernelKind::Matern52, l1: 0.9, l2: 0.5, period: 0.0 };
    let cx = [-1.2, -0.3, 0.4, 1.5];
    let cy = [0.2, -0.5, 0.1, 0.9];
    let tx = [-0.8, 0.0, 1.0];
    let noise = 0.04;
    let post = gp_posterior_oracle(&k, &cx, &cy, &tx, noise).unwrap();

    // condition the joint covariance by explicit inversion
    let all: Vec<f64> = cx.iter().chain(&tx).copied().collect();
    let mut joint = k.gram(&all, &all);
    for i in 0..4 {
        joint[(i, i)] += noise;
    }
    let soo = joint.view((0, 0), (4, 4)).into_owned();
    let sto = joint.view((4, 0), (3, 4)).into_owned();
    let stt = joint.view((4, 4), (3, 3)).into_owned();
    let inv = soo.try_inverse().unwrap();
    let mean = &sto * &inv * DVector::from_column_slice(&cy);
    let cov: DMatrix<f64> = stt - &sto * &inv * sto.transpose();
    for i in 0..3 {
        assert!((post.mean[i] - mean[i]).abs() < 1e-10);
        for j in 0..3 {
            assert!((post.cov[(i, j)] - cov[(i, j)]).abs() < 1e-10);
        }
        assert!(post.std()[i] <= 0.9 + 1e-12);
    }
}

#[test]
fn nearly_noiseless_posterior_interpolates() {
    let k = Kernel::rbf(1.0, 0.5);
    let post = gp_posterior_oracle(&k, &[0.3], &[0.7], &[0.3], 1e-10).unwrap();
    assert!((post.mean[0] - 0.7).abs() < 1e-8);
    assert!(post.std()[0] < 1e-4);
}

#[test]
fn ks_two_sample_matches_brute_force() {
    let mut rng = stream(4, &[1]);
    let a: Vec<f64> = (0..37).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..53).map(|_| 0.3 + rng.sample::<f64, _>(StandardNormal)).collect();
    let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    let d = a.iter().chain(&b).map(|&x| (ecdf(&a, x) - ecdf(&b, x)).abs()).fold(0.0, f64::max);
    assert!((ks_two_sample(&a, &b).statistic - d).abs() < 1e-15);
}

#[test]
fn ks_normal_detects_shift() {
    let mut rng = stream(5, &[1]);
    let s: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
    assert!(ks_normal(&s, 0.0, 1.0).unwrap().p_value > 0.01);
    assert!(ks_normal(&s, 0.2, 1.0).unwrap().p_value < 1e-6);
    assert!(ks_normal(&s, 0.0, -1.0).is_err());
}

#[test]
fn marginal_check_z_scores() {
    let x = gauss(10_000, 2, 0.0, 6);
    let r = marginal_check(x.view(), &[CoordGaussian { mean: 0.0, var: 1.0 }, CoordGaussian { mean: 0.5, var: 1.0 }]).unwrap();
    assert!(r[0].mean_z.abs() < 4.0 && r[0].var_z.abs() < 4.0);
    assert!(r[1].mean_z < -40.0);
    let det = marginal_check(Array2::zeros((3, 1)).view(), &[CoordGaussian { mean: 0.0, var: 0.0 }]).unwrap();
    assert_eq!((det[0].mean_z, det[0].ks), (0.0, None));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mmd_is_symmetric_and_zero_for_identical_sets(seed in 0u64..1000, h in 0.2f64..3.0) {
        let x = gauss(8, 2, 0.0, seed);
        let y = gauss(9, 2, 0.5, seed + 1);
        prop_assert!((mmd2_unbiased(x.view(), y.view(), h) - mmd2_unbiased(y.view(), x.view(), h)).abs() < 1e-12);
        // identical sets: the unbiased estimator is -2/(n) * mean off-diagonal, never positive
        prop_assert!(mmd2_unbiased(x.view(), x.view(), h) <= 1e-12);
    }
}
