mod common;

use common::*;
use difrc::analysis::{cluster_purity, kmeans, linear_probe, write_assignments_csv, ProbeConfig};
use rand::Rng;
use rand_distr::StandardNormal;

/// `per` points around each centre, uniformly inside radius `radius`.
fn blobs(centres: &[Vec<f64>], per: usize, radius: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per {
            let (a, rad): (f64, f64) = (r.random_range(0.0..std::f64::consts::TAU), r.random_range(0.0..radius));
            let mut p = centre.clone();
            p[0] += rad * a.cos();
            p[1] += rad * a.sin();
            pts.push(p);
            labels.push(c);
        }
    }
    (pts, labels)
}

#[test]
fn separated_blobs_are_recovered_exactly() {
    // gap between blobs is ten times the blob radius
    let (pts, labels) = blobs(&[vec![0.0, 0.0], vec![10.0, 0.0]], 40, 1.0, 1);
    let res = kmeans(&pts, 2, 100, 0).unwrap();
    let first = res.assignments[0];
    for (a, l) in res.assignments.iter().zip(&labels) {
        assert_eq!(*a == first, *l == 0);
    }
    assert_eq!(cluster_purity(&res.assignments, &labels).unwrap(), 1.0);
}

#[test]
fn inertia_never_increases_and_result_is_a_fixpoint() {
    let mut r = rng(2);
    let pts: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| r.sample(StandardNormal)).collect()).collect();
    let res = kmeans(&pts, 6, 200, 3).unwrap();
    for w in res.inertia_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
    }
    // every point is assigned to its nearest final centroid
    for (p, &a) in pts.iter().zip(&res.assignments) {
        let d = |c: &Vec<f64>| p.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let best = res.centroids.iter().map(d).fold(f64::INFINITY, f64::min);
        assert!(d(&res.centroids[a]) <= best + 1e-12);
    }
    // and every centroid is the mean of its members
    for (j, c) in res.centroids.iter().enumerate() {
        let members: Vec<&Vec<f64>> = pts.iter().zip(&res.assignments).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        for q in 0..4 {
            let m = members.iter().map(|p| p[q]).sum::<f64>() / members.len() as f64;
            assert!((m - c[q]).abs() < 1e-9);
        }
    }
}

#[test]
fn kmeans_is_deterministic_given_seed() {
    let (pts, _) = blobs(&[vec![0.0, 0.0], vec![3.0, 3.0], vec![-3.0, 2.0]], 30, 2.0, 4);
    assert_eq!(kmeans(&pts, 3, 50, 9).unwrap(), kmeans(&pts, 3, 50, 9).unwrap());
    assert!(kmeans(&pts, 0, 10, 0).is_err());
    assert!(kmeans(&pts[..2], 3, 10, 0).is_err());
}

#[test]
fn purity_hand_count_and_bounds() {
    let a = [0, 0, 0, 0, 1, 1, 2, 2];
    let l = [0, 0, 0, 1, 1, 1, 0, 1];
    assert_eq!(cluster_purity(&a, &l).unwrap(), 0.75);
    let single = cluster_purity(&[0; 10], &[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]).unwrap();
    assert_eq!(single, 0.2);
}

#[test]
fn assignment_csv_format() {
    let mut buf = Vec::new();
    write_assignments_csv(&mut buf, &[1, 0], &[3, 4]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "index,cluster,label\n0,1,3\n1,0,4\n");
}

#[test]
fn probe_separates_margin_gaussians() {
    let mut r = rng(5);
    let mut make = |n: usize| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let mut x: Vec<f64> = (0..5).map(|_| 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
            x[c] += 4.0;
            xs.push(x);
            ys.push(c);
        }
        (xs, ys)
    };
    let (tr, trl) = make(150);
    let (te, tel) = make(60);
    let acc = linear_probe(&tr, &trl, &te, &tel, 3, &ProbeConfig::default()).unwrap();
    assert!(acc >= 0.99, "{acc}");
    let again = linear_probe(&tr, &trl, &te, &tel, 3, &ProbeConfig::default()).unwrap();
    assert_eq!(acc, again);
}
