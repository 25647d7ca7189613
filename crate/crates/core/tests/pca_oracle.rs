mod common;

use common::*;
use difrc::representation::LayerPca;
use rand::Rng;

/// Cyclic Jacobi eigen-decomposition of a small symmetric matrix; returns
/// eigenvalues in descending order with matching column eigenvectors.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let vals = order.iter().map(|&i| a[i][i]).collect();
    let vecs = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (vals, vecs)
}

fn covariance(x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = x.len() as f64;
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let cov = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| x.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n)
                .collect()
        })
        .collect();
    (mean, cov)
}

/// Random data with a clear spectrum: independent columns with distinct
/// scales, then mixed by a random rotation-like matrix.
fn spectrum_data(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mix: Vec<Vec<f64>> = (0..d).map(|_| uniform_vec(&mut r, d, -1.0, 1.0)).collect();
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..d).map(|j| r.random_range(-1.0..1.0) * (d - j) as f64).collect();
            (0..d).map(|i| (0..d).map(|j| mix[i][j] * raw[j]).sum::<f64>() + 0.5).collect()
        })
        .collect()
}

#[test]
fn eigenvalues_match_jacobi_oracle() {
    let x = spectrum_data(1, 50, 8);
    let pca = LayerPca::fit(&x, 3).unwrap();
    let (_, cov) = covariance(&x);
    let (vals, vecs) = jacobi_eigen(cov);
    for k in 0..3 {
        assert!(rel_err(pca.eigenvalues[k], vals[k]) < 1e-9, "eigenvalue {k}");
        let comp = &pca.components[k * 8..(k + 1) * 8];
        let dot: f64 = comp.iter().zip(&vecs[k]).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-8, "component {k} misaligned: {dot}");
    }
    let mass: f64 = pca.eigenvalues.iter().take(3).sum();
    assert!(rel_err(mass, vals[..3].iter().sum()) < 1e-9);
}

#[test]
fn components_are_orthonormal_with_sign_convention() {
    let x = spectrum_data(2, 60, 6);
    let pca = LayerPca::fit(&x, 4).unwrap();
    for a in 0..4 {
        let ca = &pca.components[a * 6..(a + 1) * 6];
        let first = ca.iter().find(|v| v.abs() > 1e-12).unwrap();
        assert!(*first > 0.0);
        for b in 0..4 {
            let cb = &pca.components[b * 6..(b + 1) * 6];
            let dot: f64 = ca.iter().zip(cb).map(|(p, q)| p * q).sum();
            assert!((dot - (a == b) as u8 as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn reconstruction_error_bounded_by_discarded_eigenvalues() {
    let x = spectrum_data(3, 40, 7);
    let (_, cov) = covariance(&x);
    let (vals, _) = jacobi_eigen(cov);
    for k in 1..7 {
        let pca = LayerPca::fit(&x, k).unwrap();
        let err: f64 = x
            .iter()
            .map(|row| {
                let back = pca.reconstruct(&pca.project(row));
                row.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / x.len() as f64;
        let discarded: f64 = vals[k..].iter().sum();
        assert!(err <= discarded + 1e-6, "k = {k}: {err} > {discarded}");
    }
}

#[test]
fn subspace_data_is_reconstructed_exactly() {
    let mut r = rng(4);
    let basis: Vec<Vec<f64>> = (0..2).map(|_| uniform_vec(&mut r, 5, -1.0, 1.0)).collect();
    let x: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            let (a, b) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            (0..5).map(|j| 1.0 + a * basis[0][j] + b * basis[1][j]).collect()
        })
        .collect();
    let pca = LayerPca::fit(&x, 2).unwrap();
    for row in &x {
        let back = pca.reconstruct(&pca.project(row));
        for (a, b) in row.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn scaling_data_scales_eigenvalues_quadratically() {
    let x = spectrum_data(5, 50, 5);
    let doubled: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
    let a = LayerPca::fit(&x, 3).unwrap();
    let b = LayerPca::fit(&doubled, 3).unwrap();
    for k in 0..3 {
        assert!(rel_err(4.0 * a.eigenvalues[k], b.eigenvalues[k]) < 1e-9);
        let ca = &a.components[k * 5..(k + 1) * 5];
        let cb = &b.components[k * 5..(k + 1) * 5];
        for (p, q) in ca.iter().zip(cb) {
            assert!((p - q).abs() < 1e-8);
        }
    }
}

#[test]
fn degenerate_fits_are_rejected() {
    assert!(LayerPca::fit(&[], 1).is_err());
    assert!(LayerPca::fit(&[vec![1.0, 2.0]], 2).is_err());
    assert!(LayerPca::fit(&[vec![1.0, 2.0], vec![0.0, 1.0]], 3).is_err());
}
