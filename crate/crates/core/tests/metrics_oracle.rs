use approx::assert_relative_eq;
use dogfit::metrics::{frechet_gaussian, gaussian_fit, mmd_rbf, precision_recall_knn, target_support_fraction};
use dogfit::oracle::{sample_mixture, GaussianMixture};
use dogfit::Point;
use nalgebra::{Matrix2, SymmetricEigen};
use ndarray::{array, concatenate, Array2, Axis};

fn sqrtm(m: Matrix2<f64>) -> Matrix2<f64> {
    let e = SymmetricEigen::new(m);
    let d = Matrix2::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    e.eigenvectors * d * e.eigenvectors.transpose()
}

fn cloud(mean: (f64, f64), cov: Matrix2<f64>, n: usize, seed: u64) -> Array2<f64> {
    let gm = GaussianMixture::new(vec![1.0], vec![Point::new(mean.0, mean.1)], vec![cov], None).unwrap();
    sample_mixture(&gm, n, seed).unwrap().points
}

#[test]
fn frechet_matches_eigendecomposition_formula() {
    let cases = [
        ((0.0, 0.0), Matrix2::new(1.0, 0.3, 0.3, 0.5), (0.5, -1.0), Matrix2::new(0.2, -0.1, -0.1, 2.0)),
        ((1.0, 2.0), Matrix2::new(0.05, 0.0, 0.0, 0.05), (1.1, 2.0), Matrix2::new(0.3, 0.25, 0.25, 0.3)),
    ];
    for (i, (ma, ca, mb, cb)) in cases.into_iter().enumerate() {
        let a = cloud(ma, ca, 3000, 2 * i as u64);
        let b = cloud(mb, cb, 2000, 2 * i as u64 + 1);
        let (mu_a, sa) = gaussian_fit(a.view());
        let (mu_b, sb) = gaussian_fit(b.view());
        let ra = sqrtm(sa);
        let cross = sqrtm(ra * sb * ra).trace();
        let expect = (mu_a - mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross;
        let got = frechet_gaussian(a.view(), b.view()).unwrap();
        assert!(!got.ridged);
        assert_relative_eq!(got.value, expect, epsilon = 1e-10, max_relative = 1e-9);
    }
}

#[test]
fn frechet_is_symmetric() {
    let a = cloud((0.0, 1.0), Matrix2::new(0.4, 0.1, 0.1, 0.2), 500, 5);
    let b = cloud((0.3, 0.0), Matrix2::new(0.1, 0.0, 0.0, 0.9), 700, 6);
    let ab = frechet_gaussian(a.view(), b.view()).unwrap().value;
    let ba = frechet_gaussian(b.view(), a.view()).unwrap().value;
    assert_relative_eq!(ab, ba, max_relative = 1e-10);
}

#[test]
fn mmd_of_two_points_is_closed_form() {
    let a = array![[0.0, 0.0]];
    let b = array![[0.6, 0.8]];
    let h = 0.5f64;
    let k = (-1.0 / (2.0 * h * h)).exp();
    assert_relative_eq!(mmd_rbf(a.view(), b.view(), Some(h)).unwrap(), 2.0 - 2.0 * k, max_relative = 1e-12);
}

#[test]
fn mmd_grows_with_separation() {
    let c = Matrix2::identity() * 0.1;
    let a = cloud((0.0, 0.0), c, 800, 7);
    let near = cloud((0.1, 0.0), c, 800, 8);
    let far = cloud((1.0, 0.0), c, 800, 9);
    let same = cloud((0.0, 0.0), c, 800, 10);
    let m_same = mmd_rbf(a.view(), same.view(), Some(0.5)).unwrap();
    let m_near = mmd_rbf(a.view(), near.view(), Some(0.5)).unwrap();
    let m_far = mmd_rbf(a.view(), far.view(), Some(0.5)).unwrap();
    assert!(m_same < m_near && m_near < m_far, "{m_same} {m_near} {m_far}");
}

#[test]
fn recall_halves_when_one_of_two_clusters_is_missed() {
    let c = Matrix2::identity() * 0.05;
    let left = cloud((-3.0, 0.0), c, 1000, 11);
    let right = cloud((3.0, 0.0), c, 1000, 12);
    let real = concatenate(Axis(0), &[left.view(), right.view()]).unwrap();
    let gen = cloud((-3.0, 0.0), c, 2000, 13);
    let pr = precision_recall_knn(real.view(), gen.view(), 5).unwrap();
    assert!(pr.precision > 0.95, "{pr:?}");
    assert!((pr.recall - 0.5).abs() < 0.03, "{pr:?}");
}

#[test]
fn support_fraction_matches_quantile_construction() {
    let target = GaussianMixture::isotropic(vec![Point::new(0.0, 0.0), Point::new(2.0, 1.0)], 0.05, None).unwrap();
    let inside = sample_mixture(&target, 4000, 14).unwrap().points;
    let frac = target_support_fraction(inside.view(), &target, 0.05, 15).unwrap();
    assert!((frac - 0.95).abs() < 0.015, "{frac}");

    let away = cloud((-6.0, 5.0), Matrix2::identity() * 0.05, 4000, 16);
    let mixed = concatenate(Axis(0), &[inside.view(), away.view()]).unwrap();
    let frac = target_support_fraction(mixed.view(), &target, 0.05, 15).unwrap();
    assert!((frac - 0.475).abs() < 0.01, "{frac}");
}
