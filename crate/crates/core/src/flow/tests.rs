use super::*;
use crate::testutil::{log_abs_det, rel_err};

fn cfg(dim: usize, depth: usize, hidden: usize, num_classes: usize) -> FlowConfig {
    FlowConfig {
        dim,
        depth,
        hidden,
        num_blocks: 2,
        embed_dim: 3,
        num_classes,
        scale_clamp: 3.0,
    }
}

fn coupling_of(flow: &FlowModel, idx: usize) -> &CouplingLayer {
    match &flow.layers()[idx] {
        FlowLayer::Coupling(c) => c,
        FlowLayer::Permutation(_) => panic!("layer {idx} is a permutation"),
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Flow with identity permutations and a single coupling layer.
fn bare_coupling(dim: usize) -> FlowModel {
    let base = FlowModel::new(cfg(dim, 1, 4, 2), FlowInit::Identity, 1).unwrap();
    let layers = vec![
        FlowLayer::Permutation(PermutationLayer::from_perm((0..dim).collect())),
        base.layers()[1].clone(),
    ];
    FlowModel::from_parts(base.config().clone(), base.params().clone(), layers)
}

#[test]
fn active_mask_has_floor_half_true() {
    for dim in [1, 2, 5, 8] {
        let flow = FlowModel::new(cfg(dim, 2, 4, 2), FlowInit::Random, 3).unwrap();
        for idx in [1, 3] {
            let mask = coupling_of(&flow, idx).active_mask();
            assert_eq!(mask.iter().filter(|&&m| m).count(), dim / 2);
        }
    }
}

#[test]
fn identity_coupling_is_a_permutation() {
    let flow = FlowModel::new(cfg(5, 4, 8, 3), FlowInit::Identity, 11).unwrap();
    let z = vec![0.5, -1.0, 2.0, 3.5, -0.25];
    let (u, logdet) = flow.forward(&z, 2).unwrap();
    assert_eq!(logdet, 0.0);
    let mut sorted_u = u.clone();
    sorted_u.sort_by(f64::total_cmp);
    let mut sorted_z = z.clone();
    sorted_z.sort_by(f64::total_cmp);
    assert_eq!(sorted_u, sorted_z);
}

#[test]
fn constant_log_scale_gives_known_logdet() {
    let c = 0.7;
    let mut flow = bare_coupling(4);
    let bias = coupling_of(&flow, 1).scale_net().output_layer().bias_index();
    flow.params_mut().get_mut(bias).fill(3.0 * (c / 3.0f64).atanh());
    let (_, logdet) = flow.forward(&[0.3, -1.2, 0.8, 2.0], 1).unwrap();
    assert!((logdet - 2.0 * c).abs() < 1e-12, "logdet {logdet}");
}

#[test]
fn identity_inverse_and_affine_shift() {
    let mut flow = bare_coupling(4);
    let u = vec![1.0, 2.0, 3.0, 4.0];
    assert_eq!(flow.inverse(&u, 0).unwrap(), u);

    let bias = coupling_of(&flow, 1).translate_net().output_layer().bias_index();
    flow.params_mut().get_mut(bias).fill(1.0);
    let mask = coupling_of(&flow, 1).active_mask();
    let z = flow.inverse(&u, 0).unwrap();
    for j in 0..4 {
        let expect = if mask[j] { u[j] - 1.0 } else { u[j] };
        assert!((z[j] - expect).abs() < 1e-12);
    }
}

#[test]
fn random_stack_round_trip() {
    let flow = FlowModel::new(cfg(16, 4, 32, 5), FlowInit::Random, 7).unwrap();
    let u = random_matrix(100, 16, 8);
    let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
    let z = flow.inverse_batch(&u, &labels).unwrap();
    let (back, _) = flow.forward_batch(&z, &labels).unwrap();
    let err = (&back - &u).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(err < 1e-4, "round trip error {err}");
}

#[test]
fn logdet_matches_numerical_jacobian() {
    let flow = FlowModel::new(cfg(6, 4, 8, 3), FlowInit::Random, 21).unwrap();
    let z = vec![0.3, -0.9, 1.4, 0.05, -0.6, 0.8];
    let (_, logdet) = flow.forward(&z, 1).unwrap();
    let h = 1e-4;
    let mut jac = vec![vec![0.0; 6]; 6];
    for j in 0..6 {
        let mut zp = z.clone();
        zp[j] += h;
        let mut zm = z.clone();
        zm[j] -= h;
        let (up, _) = flow.forward(&zp, 1).unwrap();
        let (um, _) = flow.forward(&zm, 1).unwrap();
        for i in 0..6 {
            jac[i][j] = (up[i] - um[i]) / (2.0 * h);
        }
    }
    let numeric = log_abs_det(jac);
    assert!(
        (logdet - numeric).abs() <= 1e-3 * numeric.abs().max(1.0),
        "analytic {logdet} numeric {numeric}"
    );
}

#[test]
fn standard_normal_values() {
    let flow = FlowModel::new(cfg(2, 4, 8, 2), FlowInit::Identity, 0).unwrap();
    assert!((flow.log_prob(&[0.0, 0.0], 0).unwrap() + 1.837877).abs() < 1e-6);
    assert!((flow.log_prob(&[1.0, 0.0], 1).unwrap() + 2.337877).abs() < 1e-6);
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    let flow = FlowModel::new(cfg(1, 4, 8, 2), FlowInit::Random, 5).unwrap();
    let n = 10_000;
    let zs = Mat::from_shape_fn((n, 1), |(i, _)| -30.0 + 60.0 * i as f64 / (n - 1) as f64);
    let lp = flow.log_prob_batch(&zs, &vec![1; n]).unwrap();
    let h = 60.0 / (n - 1) as f64;
    let integral: f64 = lp
        .iter()
        .enumerate()
        .map(|(i, l)| if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * l.exp())
        .sum::<f64>()
        * h;
    assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
}

#[test]
fn appended_permutation_is_neutral() {
    let flow = FlowModel::new(cfg(5, 3, 8, 3), FlowInit::Random, 13).unwrap();
    let mut layers = flow.layers().to_vec();
    layers.push(FlowLayer::Permutation(PermutationLayer::from_perm(vec![4, 2, 0, 1, 3])));
    let extended = FlowModel::from_parts(flow.config().clone(), flow.params().clone(), layers);
    let z = random_matrix(10, 5, 2);
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let a = flow.log_prob_batch(&z, &labels).unwrap();
    let b = extended.log_prob_batch(&z, &labels).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn input_errors() {
    let flow = FlowModel::new(cfg(3, 1, 4, 2), FlowInit::Random, 0).unwrap();
    assert!(matches!(flow.forward(&[0.0, 1.0], 0), Err(Error::InputShape { .. })));
    assert!(matches!(
        flow.forward(&[0.0, f64::NAN, 1.0], 0),
        Err(Error::NumericInput(_))
    ));
    assert!(matches!(
        flow.inverse(&[0.0, f64::INFINITY, 1.0], 0),
        Err(Error::NumericInput(_))
    ));
    assert!(matches!(
        flow.forward(&[0.0, 0.0, 1.0], 2),
        Err(Error::LabelDomain { label: 2, .. })
    ));
}

#[test]
fn sampling_identity_flow_and_determinism() {
    let flow = FlowModel::new(cfg(4, 4, 8, 6), FlowInit::Identity, 0).unwrap();
    let sampler = LabelSampler::uniform([1, 4, 5]).unwrap();
    let batch = flow.sample(64, &sampler, 99).unwrap();
    assert_eq!(batch.features.dim(), (64, 4));
    assert!(batch.labels.iter().all(|y| [1, 4, 5].contains(y)));
    assert!(batch.weights.iter().all(|&w| w == 1.0));
    for mean in batch.features.mean_axis(Axis(0)).unwrap() {
        assert!(mean.abs() < 4.0 / 8.0, "coordinate mean {mean}");
    }
    assert_eq!(batch, flow.sample(64, &sampler, 99).unwrap());
    assert_ne!(batch, flow.sample(64, &sampler, 100).unwrap());

    let random = FlowModel::new(cfg(4, 4, 8, 6), FlowInit::Random, 0).unwrap();
    let b = random.sample(16, &sampler, 3).unwrap();
    let (u, _) = random.forward_batch(&b.features, &b.labels).unwrap();
    let err = (&u - &b.latents).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(err < 1e-9);

    assert!(matches!(LabelSampler::uniform(Vec::new()), Err(Error::EmptySupport)));
    assert!(matches!(flow.sample(0, &sampler, 0), Err(Error::EmptyBatch(_))));
}

#[test]
fn nf_loss_examples() {
    let flow = FlowModel::new(cfg(1, 2, 4, 2), FlowInit::Identity, 0).unwrap();
    let half_log_two_pi = 0.5 * (2.0 * PI).ln();
    let z_at = |lp: f64| (2.0 * (-lp - half_log_two_pi)).sqrt();

    let z = Mat::from_elem((1, 1), z_at(-3.0));
    let local = FeatureBatch {
        features: &z,
        labels: &[0],
    };
    assert!((nf_loss(&flow, local, None).unwrap() - 3.0).abs() < 1e-9);

    let a = Mat::from_shape_vec((2, 1), vec![z_at(-2.0), -z_at(-2.0)]).unwrap();
    let b = Mat::from_elem((3, 1), z_at(-2.0));
    let loss = nf_loss(
        &flow,
        FeatureBatch {
            features: &a,
            labels: &[0, 1],
        },
        Some(FeatureBatch {
            features: &b,
            labels: &[1, 1, 0],
        }),
    )
    .unwrap();
    assert!((loss - 4.0).abs() < 1e-9);

    let empty = Mat::zeros((0, 1));
    assert!(matches!(
        nf_loss(
            &flow,
            FeatureBatch {
                features: &empty,
                labels: &[]
            },
            None
        ),
        Err(Error::EmptyBatch(_))
    ));
}

#[test]
fn nf_loss_gradient_matches_finite_differences() {
    let mut flow = FlowModel::new(
        FlowConfig {
            dim: 4,
            depth: 2,
            hidden: 4,
            num_blocks: 2,
            embed_dim: 3,
            num_classes: 3,
            scale_clamp: 3.0,
        },
        FlowInit::Random,
        17,
    )
    .unwrap();
    assert!(flow.params().num_scalars() <= 500);
    let local = random_matrix(8, 4, 1);
    let replay = random_matrix(8, 4, 2);
    let ll: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let rl: Vec<usize> = (0..8).map(|i| (i + 1) % 3).collect();
    let lb = FeatureBatch {
        features: &local,
        labels: &ll,
    };
    let rb = FeatureBatch {
        features: &replay,
        labels: &rl,
    };
    let (_, grad) = nf_loss_with_grad(&flow, lb, Some(rb)).unwrap();
    let base = flow.to_vector();
    let h = 1e-6;
    for i in 0..base.len() {
        let mut v = base.clone();
        v.0[i] += h;
        flow.load_vector(&v).unwrap();
        let up = nf_loss(&flow, lb, Some(rb)).unwrap();
        v.0[i] -= 2.0 * h;
        flow.load_vector(&v).unwrap();
        let down = nf_loss(&flow, lb, Some(rb)).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let err = rel_err(grad.0[i], numeric);
        assert!(err < 1e-3, "param {i}: analytic {} numeric {numeric}", grad.0[i]);
    }
}

#[test]
fn construction_is_deterministic() {
    let a = FlowModel::new(cfg(6, 4, 8, 3), FlowInit::Random, 5).unwrap();
    let b = FlowModel::new(cfg(6, 4, 8, 3), FlowInit::Random, 5).unwrap();
    assert_eq!(a.to_vector(), b.to_vector());
    let c = FlowModel::new(cfg(6, 4, 8, 3), FlowInit::Random, 6).unwrap();
    assert_ne!(a.to_vector(), c.to_vector());
}
