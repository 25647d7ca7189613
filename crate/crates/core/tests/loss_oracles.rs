mod common;

use common::*;
use difrc::objective::{
    ce_loss, ndcr_loss, ndcr_with_grad, norm_factor, select_prompts, similarity, tdcl_loss, tdcl_with_grad, total_loss, Target, Ablation,
    LossWeights, Mode,
};
use difrc::representation::PromptId;

#[test]
fn loss_values_match_scalar_oracles() {
    let worst = loss_oracle_suite(100, 100).unwrap();
    assert!(worst < 1e-9, "worst relative error {worst:e}");
}

#[test]
fn ndcr_gradient_matches_central_differences() {
    let worst = ndcr_fd_suite(101, 20).unwrap();
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn encoder_gradient_matches_central_differences() {
    let worst = encoder_fd_suite(102, 20).unwrap();
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn hand_worked_values() {
    let batch: [&[f64]; 2] = [&[1.0, 0.0], &[0.0, 1.0]];
    let u = norm_factor(&batch, &[1.0, 0.0]).unwrap();
    assert!((u - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    let s = similarity(&[1.0, 0.0], &[1.0, 0.0], u).unwrap();
    assert!((s - 2f64.sqrt()).abs() < 1e-12);

    assert_eq!(ndcr_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5.0);
    assert_eq!(ndcr_with_grad(&[1.0, 2.0], &[0.0, 0.0]).unwrap().1, vec![2.0, 4.0]);

    assert!((ce_loss(&[1.0, 2.0, 3.0], 2).unwrap() - 0.407_605_964_445_8).abs() < 1e-9);
    assert!((ce_loss(&[0.0; 10], 4).unwrap() - 10f64.ln()).abs() < 1e-15);
    let mut peaked = vec![0.0; 10];
    peaked[3] = 100.0;
    assert!(ce_loss(&peaked, 3).unwrap() < 1e-6);
}

#[test]
fn tdcl_reference_points() {
    // one negative at the same similarity as the positive
    let batch: [&[f64]; 1] = [&[3.0, 4.0]];
    let l = tdcl_loss(&[1.0, 0.0], &[1.0, 1.0], &[&[1.0, 1.0]], 0.06, &batch).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    assert_eq!(tdcl_loss(&[1.0, 0.0], &[1.0, 1.0], &[], 0.06, &batch).unwrap(), 0.0);
    // s_pos = 1.0 and s_neg = 0.5 (cosine 1/2, U = 1)
    let pos = Target { f: &[2.0, 0.0], u: 1.0 };
    let neg = Target {
        f: &[1.0, 3f64.sqrt()],
        u: 1.0,
    };
    let (l, _) = tdcl_with_grad(&[1.0, 0.0], pos, &[neg], 0.06).unwrap();
    assert!((l - 2.4035e-4).abs() < 1e-8, "{l}");
}

#[test]
fn tdcl_grows_as_positive_rotates_away() {
    // normalisers held fixed so only the angle to the positive changes
    let z = [1.0, 0.0, 0.0];
    let neg = Target { f: &[0.0, 1.0, 0.2], u: 0.8 };
    let mut last = f64::NEG_INFINITY;
    for k in 0..10 {
        let a = k as f64 / 9.0 * std::f64::consts::FRAC_PI_2;
        let pos_f = [a.cos(), a.sin(), 0.0];
        let pos = Target { f: &pos_f, u: 0.8 };
        let (l, _) = tdcl_with_grad(&z, pos, &[neg], 0.5).unwrap();
        assert!(l > 0.0);
        assert!(l > last, "k={k}: {l} <= {last}");
        last = l;
    }
}

#[test]
fn similarity_is_scale_invariant_in_z() {
    let z = [0.4, -1.2, 2.0];
    let f = [1.0, 0.5, -0.3];
    let a = similarity(&z, &f, 0.7).unwrap();
    for k in [0.01, 3.0, 1e4] {
        let zk: Vec<f64> = z.iter().map(|v| v * k).collect();
        assert!(rel_err(a, similarity(&zk, &f, 0.7).unwrap()) < 1e-12);
    }
}

#[test]
fn total_loss_decomposes_and_ablates() {
    let w = LossWeights::default();
    let full = total_loss(0.5, 0.25, 1.0, Ablation::Full, &w).unwrap();
    assert_eq!(full.total, 1.75);
    let t = total_loss(0.5, 0.25, 1.0, Ablation::TdclOnly, &w).unwrap();
    assert_eq!((t.ndcr, t.total), (0.0, 1.5));
    let b = total_loss(0.5, 0.25, 1.0, Ablation::Baseline, &w).unwrap();
    assert_eq!((b.tdcl, b.ndcr, b.total), (0.0, 0.0, 1.0));
    assert!(total_loss(f64::NAN, 0.0, 1.0, Ablation::Full, &w).is_err());
}

#[test]
fn prompt_selection_modes() {
    let mut r = rng(3);
    let s = select_prompts(Mode::Supervised, Some(3), 5, &[], 0, &mut r).unwrap();
    assert_eq!(s.positive, PromptId::Class(3));
    assert_eq!(s.negatives, [0, 1, 2, 4].map(PromptId::Class).to_vec());
    assert!(select_prompts(Mode::Supervised, None, 5, &[], 0, &mut r).is_err());

    let pool: Vec<PromptId> = (0..10).map(PromptId::Class).collect();
    let a = select_prompts(Mode::SelfSupervised, None, 10, &pool, 4, &mut rng(9)).unwrap();
    let b = select_prompts(Mode::SelfSupervised, None, 10, &pool, 4, &mut rng(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.positive, PromptId::GenericPositive);
    assert_eq!(a.consistency, PromptId::GenericObject);
    let mut negs = a.negatives.clone();
    negs.sort();
    negs.dedup();
    assert_eq!(negs.len(), 4);
}
