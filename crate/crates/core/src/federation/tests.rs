use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::classifier::{ClassifierConfig, InputShape};
use crate::flow::{FlowConfig, FlowInit};
use crate::optim::AdamConfig;
use crate::streams::{make_federation, make_synthetic, FederationSpec, StreamKind, SyntheticSpec};

fn pv(v: &[f64]) -> ParameterVector {
    ParameterVector(v.to_vec())
}

#[test]
fn aggregate_examples() {
    assert_eq!(aggregate(&[pv(&[0.0]), pv(&[2.0])], &[5, 5]).unwrap(), pv(&[1.0]));
    assert_eq!(aggregate(&[pv(&[0.0]), pv(&[4.0])], &[1, 3]).unwrap(), pv(&[3.0]));
    assert!(matches!(
        aggregate(&[pv(&[0.0]), pv(&[1.0, 2.0])], &[1, 1]),
        Err(Error::ManifestMismatch(_))
    ));
    assert!(matches!(
        aggregate(&[pv(&[0.0]), pv(&[1.0])], &[0, 0]),
        Err(Error::DegenerateAggregation)
    ));
}

#[test]
fn aggregate_matches_weighted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let len = rng.random_range(1..20);
        let ps: Vec<ParameterVector> = (0..5)
            .map(|_| ParameterVector((0..len).map(|_| rng.random_range(-5.0..5.0)).collect()))
            .collect();
        let ns: Vec<usize> = (0..5).map(|_| rng.random_range(1..1000)).collect();
        let total: f64 = ns.iter().map(|&n| n as f64).sum();
        let out = aggregate(&ps, &ns).unwrap();
        for j in 0..len {
            let direct: f64 = (0..5).map(|k| ps[k].0[j] * ns[k] as f64).sum::<f64>() / total;
            assert!((out.0[j] - direct).abs() < 1e-7);
        }
        let same = aggregate(&vec![ps[0].clone(); 3], &ns[..3]).unwrap();
        for (a, b) in same.0.iter().zip(&ps[0].0) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn prox_examples() {
    assert_eq!(fedprox_penalty(&pv(&[1.0, 2.0]), &pv(&[1.0, 2.0]), 3.0).unwrap(), 0.0);
    assert_eq!(fedprox_penalty(&pv(&[3.0, 4.0]), &pv(&[0.0, 0.0]), 2.0).unwrap(), 25.0);
    assert!(fedprox_penalty(&pv(&[1.0]), &pv(&[1.0, 2.0]), 1.0).is_err());
}

#[test]
fn plans_select_everyone_by_default() {
    let p = RoundPlan::new(1, 2, 3, 4, 1.0);
    assert_eq!(p.selected_clients, vec![0, 1, 2, 3]);
    let distinct: BTreeSet<u64> = p.seeds.iter().copied().collect();
    assert_eq!(distinct.len(), 4);
    let half = RoundPlan::new(1, 2, 3, 4, 0.5);
    assert_eq!(half.selected_clients.len(), 2);
    assert_eq!(half, RoundPlan::new(1, 2, 3, 4, 0.5));
    assert_ne!(client_seed(0, 0, 1, 0), client_seed(0, 1, 0, 0));
}

struct Setup {
    pool: Pool,
    fed: Federation,
    models: Models,
}

fn setup(kind: StreamKind, clients: usize, steps: usize, classes: usize) -> Setup {
    let pool = make_synthetic(&SyntheticSpec {
        classes,
        per_class: 60,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let fed = make_federation(
        &FederationSpec {
            num_clients: clients,
            num_steps: steps,
            classes_per_task: 2,
            kind,
            seed: 3,
            ..FederationSpec::default()
        },
        &pool,
    )
    .unwrap();
    let classifier = SplitClassifier::new(
        ClassifierConfig {
            input: InputShape {
                channels: 1,
                height: 12,
                width: 12,
            },
            conv_channels: vec![4, 8],
            feature_dim: 8,
            mid_dims: vec![8],
            num_classes: classes,
        },
        5,
    )
    .unwrap();
    let flow = FlowModel::new(
        FlowConfig {
            dim: 8,
            depth: 2,
            hidden: 8,
            num_blocks: 1,
            embed_dim: 2,
            num_classes: classes,
            scale_clamp: 3.0,
        },
        FlowInit::Identity,
        6,
    )
    .unwrap();
    Setup {
        pool,
        fed,
        models: Models { classifier, flow },
    }
}

fn protocol(rounds: usize, iters: usize, train_flow: bool) -> ProtocolConfig {
    ProtocolConfig {
        rounds_per_task: rounds,
        participation: 1.0,
        local: LocalConfig {
            iters,
            batch_size: 32,
            train_flow,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..LocalConfig::default()
        },
        global_seed: 11,
    }
}

fn run_all(s: &Setup, cfg: &ProtocolConfig) -> (AccuracyMatrix, Vec<RoundRecord>) {
    let mut acc = AccuracyMatrix::new(s.fed.num_clients(), s.fed.num_steps());
    let mut records = Vec::new();
    let mut state = GlobalState::initial(&s.models);
    for t in 0..s.fed.num_steps() {
        state = run_task_step(t, state, &s.fed, &s.pool, &s.models, cfg, &mut acc, |r, _| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
    }
    (acc, records)
}

#[test]
fn single_client_round_returns_its_update() {
    let s = setup(StreamKind::Iid, 1, 1, 2);
    let cfg = protocol(1, 2, true);
    let state = GlobalState::initial(&s.models);
    let (h, g) = s.models.load(&state.classifier, &state.flow).unwrap();
    let task = s.fed.task(0, 0);
    let x = task.train_inputs(&s.pool);
    let seen = LabelSampler::uniform(task.spec.class_list.iter().copied()).unwrap();
    let direct = client_local_step(
        ClientRound {
            classifier: &h,
            flow: &g,
            inputs: &x,
            labels: &task.train_labels,
            past: None,
            seen_now: &seen,
            seed: RoundPlan::new(11, 0, 0, 1, 1.0).seeds[0],
        },
        &cfg.local,
    )
    .unwrap();
    let mut acc = AccuracyMatrix::new(1, 1);
    let out = run_task_step(0, state, &s.fed, &s.pool, &s.models, &cfg, &mut acc, |_, _| Ok(())).unwrap();
    let mut expect = direct.classifier.clone();
    expect.round_to_f32();
    assert_eq!(out.classifier, expect);
}

#[test]
fn identical_clients_aggregate_to_either_update() {
    let s = setup(StreamKind::Iid, 1, 1, 2);
    let state = GlobalState::initial(&s.models);
    let (h, g) = s.models.load(&state.classifier, &state.flow).unwrap();
    let task = s.fed.task(0, 0);
    let x = task.train_inputs(&s.pool);
    let seen = LabelSampler::uniform(task.spec.class_list.iter().copied()).unwrap();
    let round = ClientRound {
        classifier: &h,
        flow: &g,
        inputs: &x,
        labels: &task.train_labels,
        past: None,
        seen_now: &seen,
        seed: 9,
    };
    let a = client_local_step(round, &protocol(1, 2, true).local).unwrap();
    let b = client_local_step(round, &protocol(1, 2, true).local).unwrap();
    let agg = aggregate(&[a.classifier.clone(), b.classifier], &[a.count, a.count]).unwrap();
    for (x, y) in agg.0.iter().zip(&a.classifier.0) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn runs_are_deterministic_and_records_hold_no_data() {
    let s = setup(StreamKind::Ltp, 2, 2, 8);
    let cfg = protocol(2, 3, true);
    let (a, rec_a) = run_all(&s, &cfg);
    let (b, _) = run_all(&s, &cfg);
    assert_eq!(a, b);
    assert_eq!(rec_a.len(), 4);
    let step2 = &rec_a[2].clients[0].losses;
    assert!(step2.kd > 0.0 && step2.ce_generated > 0.0);
    let json = serde_json::to_value(&rec_a[0]).unwrap();
    let keys: BTreeSet<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["classifier_norm", "clients", "flow_norm", "round", "task", "wall_time_s"].into()
    );
    let client_keys: BTreeSet<&str> = json["clients"][0].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(client_keys, ["client", "count", "losses"].into());
}

#[test]
fn snapshots_are_taken_at_step_start() {
    let s = setup(StreamKind::Ltp, 2, 2, 8);
    let cfg = protocol(2, 2, true);
    let mut acc = AccuracyMatrix::new(2, 2);
    let s0 = GlobalState::initial(&s.models);
    let s1 = run_task_step(0, s0, &s.fed, &s.pool, &s.models, &cfg, &mut acc, |_, _| Ok(())).unwrap();
    assert!(s1.snapshot.is_none());
    let expected = FrozenSnapshot::new(s1.classifier.clone(), s1.flow.clone(), 0);
    let mut during = Vec::new();
    let s2 = run_task_step(1, s1.clone(), &s.fed, &s.pool, &s.models, &cfg, &mut acc, |_, st| {
        during.push(st.snapshot.clone());
        Ok(())
    })
    .unwrap();
    assert!(during.iter().all(|x| x.as_ref() == Some(&expected)));
    assert!(s1.seen_classes.is_subset(&s2.seen_classes));
    assert!(run_task_step(0, s2, &s.fed, &s.pool, &s.models, &cfg, &mut acc, |_, _| Ok(())).is_err());
}

#[test]
fn fedavg_fits_a_separable_two_class_task() {
    let s = setup(StreamKind::Iid, 2, 1, 2);
    let mut cfg = protocol(20, 10, false);
    cfg.local.switches.replay = false;
    cfg.local.switches.distill = false;
    let mut acc = AccuracyMatrix::new(2, 1);
    let mut curve = Vec::new();
    run_task_step(0, GlobalState::initial(&s.models), &s.fed, &s.pool, &s.models, &cfg, &mut acc, |_, st| {
        let (h, _) = s.models.load(&st.classifier, &st.flow)?;
        let (mut correct, mut total) = (0.0, 0.0);
        for k in 0..2 {
            let task = s.fed.task(k, 0);
            let n = task.train_labels.len() as f64;
            correct += h.accuracy(&task.train_inputs(&s.pool), &task.train_labels)? * n;
            total += n;
        }
        curve.push(correct / total);
        Ok(())
    })
    .unwrap();
    let best = curve.iter().copied().fold(0.0, f64::max);
    assert!(best >= 0.99, "train accuracy per round {curve:?}");
}
