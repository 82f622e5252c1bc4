use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::classifier::{ClassifierConfig, InputShape};
use crate::flow::{FlowConfig, FlowInit};

fn mat(rows: &[&[f64]]) -> Mat {
    Mat::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

fn gauss(mean: &[f64], var: &[f64]) -> LatentClassStats {
    let g = DiagGaussian {
        mean: mean.to_vec(),
        var: var.to_vec(),
    };
    LatentClassStats {
        per_class: [(0, g.clone())].into(),
        pooled: g,
        counts: [(0, 1)].into(),
    }
}

#[test]
fn two_point_and_single_point_moments() {
    let s = LatentClassStats::from_latents(&mat(&[&[0.0, 0.0], &[2.0, 0.0]]), &[5, 5]).unwrap();
    let g = &s.per_class[&5];
    assert_eq!(g.mean, vec![1.0, 0.0]);
    assert_eq!(g.var, vec![1.0, VARIANCE_FLOOR]);
    let s = LatentClassStats::from_latents(&mat(&[&[3.0, -1.0, 0.5]]), &[0]).unwrap();
    assert_eq!(s.per_class[&0].mean, vec![3.0, -1.0, 0.5]);
    assert_eq!(s.per_class[&0].var, vec![VARIANCE_FLOOR; 3]);
    assert!(LatentClassStats::from_latents(&Mat::zeros((0, 2)), &[]).is_err());
}

#[test]
fn moments_match_direct_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (200, 5);
    let u = Mat::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0));
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let s = LatentClassStats::from_latents(&u, &y).unwrap();
    let mut raw_var_sum = vec![0.0; d];
    for c in 0..3 {
        let rows: Vec<usize> = (0..n).filter(|&i| y[i] == c).collect();
        let cnt = rows.len() as f64;
        assert_eq!(s.counts[&c], rows.len());
        for j in 0..d {
            let m: f64 = rows.iter().map(|&i| u[[i, j]]).sum::<f64>() / cnt;
            let v: f64 = rows.iter().map(|&i| (u[[i, j]] - m).powi(2)).sum::<f64>() / cnt;
            assert!((s.per_class[&c].mean[j] - m).abs() < 1e-6);
            assert!((s.per_class[&c].var[j] - v).abs() < 1e-6);
            let pm = s.pooled.mean[j];
            raw_var_sum[j] += cnt * (v + (m - pm).powi(2));
        }
    }
    for j in 0..d {
        assert!((s.pooled.var[j] - raw_var_sum[j] / n as f64).abs() < 1e-9);
    }
}

#[test]
fn density_examples() {
    let s = gauss(&[0.0, 0.0], &[1.0, 1.0]);
    assert!((correlation_density(&s, &[0.0, 0.0], 0).exp() - 0.159155).abs() < 1e-6);
    assert!((correlation_density(&s, &[1.0, 0.0], 0).exp() - 0.096532).abs() < 1e-6);
    let s = gauss(&[1.0, -2.0], &[4.0, 1.0]);
    assert!((correlation_density(&s, &[1.0, -2.0], 0).exp() - 0.079577).abs() < 1e-6);
}

#[test]
fn unknown_label_falls_back_to_pooled() {
    let s = LatentClassStats::from_latents(&mat(&[&[0.0], &[4.0], &[1.0], &[3.0]]), &[0, 0, 1, 1]).unwrap();
    assert_eq!(correlation_density(&s, &[2.0], 9), s.pooled.log_density(&[2.0]));
    assert_ne!(correlation_density(&s, &[2.0], 1), s.pooled.log_density(&[2.0]));
}

/// Direct product form of the diagonal Gaussian density.
#[test]
fn log_density_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let d = rng.random_range(1..7);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..4.0)).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let det: f64 = var.iter().product();
        let quad: f64 = (0..d).map(|j| (u[j] - mean[j]).powi(2) / var[j]).sum();
        let p = (2.0 * PI).powf(-(d as f64) / 2.0) * det.powf(-0.5) * (-0.5 * quad).exp();
        let s = gauss(&mean, &var);
        assert!((correlation_density(&s, &u, 0) - p.ln()).abs() < 1e-6);
    }
}

#[test]
fn weight_examples() {
    assert_eq!(weights_from_density(&[-3.0, -3.0, -3.0]).unwrap(), vec![1.0; 3]);
    let w = weights_from_density(&[0.0, -2f64.ln()]).unwrap();
    assert_eq!(w[0], 1.0);
    assert!((w[1] - 0.5).abs() < 1e-15);
    assert!(matches!(
        weights_from_density(&[f64::NEG_INFINITY; 2]),
        Err(Error::DegenerateBatch)
    ));
    assert!(weights_from_density(&[]).is_err());
    assert!(weights_from_density(&[f64::NAN]).is_err());
}

#[test]
fn outliers_are_suppressed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = Mat::from_shape_fn((300, 8), |(_, j)| rng.random_range(-1.0..1.0) * (j + 1) as f64);
    let s = LatentClassStats::from_latents(&u, &vec![2; 300]).unwrap();
    let g = &s.per_class[&2];
    let at_mean = g.mean.clone();
    let mut far = g.mean.clone();
    far[3] += 6.0 * g.var[3].sqrt();
    let w = weights_from_density(&[correlation_density(&s, &at_mean, 2), correlation_density(&s, &far, 2)]).unwrap();
    assert!(w[0] / w[1] > 100.0);
}

#[test]
fn refitting_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = Mat::from_shape_fn((50, 4), |_| rng.random::<f64>());
    let y: Vec<usize> = (0..50).map(|i| i % 3).collect();
    assert_eq!(
        LatentClassStats::from_latents(&u, &y).unwrap(),
        LatentClassStats::from_latents(&u, &y).unwrap()
    );
}

proptest! {
    #[test]
    fn weights_are_monotone_and_scale_free(
        logs in prop::collection::vec(-50.0f64..50.0, 1..40),
        shift in -100.0f64..100.0,
    ) {
        let w = weights_from_density(&logs).unwrap();
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(w.contains(&1.0));
        for i in 0..logs.len() {
            for j in 0..logs.len() {
                if logs[i] < logs[j] {
                    prop_assert!(w[i] <= w[j]);
                }
            }
        }
        let shifted: Vec<f64> = logs.iter().map(|l| l + shift).collect();
        let w2 = weights_from_density(&shifted).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

struct Toy {
    h: SplitClassifier,
    flow: FlowModel,
    x: Mat,
    y: Vec<usize>,
}

fn toy() -> Toy {
    let h = SplitClassifier::new(
        ClassifierConfig {
            input: InputShape {
                channels: 1,
                height: 6,
                width: 6,
            },
            conv_channels: vec![2],
            feature_dim: 4,
            mid_dims: vec![4],
            num_classes: 4,
        },
        1,
    )
    .unwrap();
    let flow = FlowModel::new(
        FlowConfig {
            dim: 4,
            depth: 2,
            hidden: 8,
            num_blocks: 1,
            embed_dim: 2,
            num_classes: 4,
            scale_clamp: 3.0,
        },
        FlowInit::Identity,
        2,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Mat::from_shape_fn((20, 36), |_| rng.random::<f64>());
    let y: Vec<usize> = (0..20).map(|i| 2 + i % 2).collect();
    Toy { h, flow, x, y }
}

fn small_cfg() -> LocalConfig {
    LocalConfig {
        iters: 4,
        batch_size: 8,
        refit_every: 2,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..LocalConfig::default()
    }
}

#[test]
fn first_task_uses_raw_data_only() {
    let t = toy();
    let seen = LabelSampler::uniform([2, 3]).unwrap();
    let out = client_local_step(
        ClientRound {
            classifier: &t.h,
            flow: &t.flow,
            inputs: &t.x,
            labels: &t.y,
            past: None,
            seen_now: &seen,
            seed: 7,
        },
        &small_cfg(),
    )
    .unwrap();
    assert_eq!(out.count, 20);
    assert_eq!(out.log.ce_generated, 0.0);
    assert_eq!(out.log.kd, 0.0);
    assert_eq!(out.log.mean_weight, None);
    assert!(out.log.nf > 0.0 && out.log.ce_raw > 0.0);
    assert_ne!(out.classifier, t.h.to_vector());
    assert_ne!(out.flow, t.flow.to_vector());
}

fn later_round(t: &Toy, cfg: &LocalConfig, seed: u64) -> LocalOutcome {
    let prev = LabelSampler::uniform([0, 1]).unwrap();
    let now = LabelSampler::uniform([0, 1, 2, 3]).unwrap();
    let mut teacher = t.h.clone();
    let perturbed: Vec<f64> = t.h.to_vector().0.iter().map(|v| v * 0.9).collect();
    teacher.load_vector(&ParameterVector(perturbed)).unwrap();
    client_local_step(
        ClientRound {
            classifier: &t.h,
            flow: &t.flow,
            inputs: &t.x,
            labels: &t.y,
            past: Some(PastKnowledge {
                teacher: &teacher,
                flow: &t.flow,
                seen: &prev,
            }),
            seen_now: &now,
            seed,
        },
        cfg,
    )
    .unwrap()
}

#[test]
fn later_tasks_use_replay_and_distillation() {
    let t = toy();
    let out = later_round(&t, &small_cfg(), 1);
    assert!(out.log.ce_generated > 0.0);
    assert!(out.log.kd > 0.0);
    let w = out.log.mean_weight.unwrap();
    assert!(w > 0.0 && w < 1.0);
    assert!(!out.log.weights_all_one);
}

#[test]
fn disabling_weighting_keeps_unit_weights() {
    let t = toy();
    let cfg = LocalConfig {
        weighting: false,
        ..small_cfg()
    };
    let out = later_round(&t, &cfg, 1);
    assert!(out.log.weights_all_one);
    assert_eq!(out.log.mean_weight, Some(1.0));
}

#[test]
fn local_step_is_deterministic() {
    let t = toy();
    let cfg = LocalConfig {
        iters: 2,
        ..small_cfg()
    };
    let a = later_round(&t, &cfg, 3);
    let b = later_round(&t, &cfg, 3);
    assert_eq!(a, b);
    assert_ne!(a.classifier, later_round(&t, &cfg, 4).classifier);
}

#[test]
fn proximal_term_is_reported() {
    let t = toy();
    let cfg = LocalConfig {
        prox_mu: Some(0.5),
        train_flow: false,
        ..small_cfg()
    };
    let out = later_round(&t, &cfg, 1);
    assert!(out.log.prox > 0.0);
    assert_eq!(out.flow, t.flow.to_vector());
}
