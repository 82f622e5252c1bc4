//! Server side of the protocol: rounds, broadcast, weighted aggregation and
//! task-step transitions.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::classifier::{FrozenSnapshot, SplitClassifier};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, LabelSampler};
use crate::metrics::AccuracyMatrix;
use crate::params::ParameterVector;
use crate::replay::{client_local_step, ClientRound, LocalConfig, LocalLog, PastKnowledge};
use crate::streams::{Federation, Pool};

/// Coordinate-wise mean of `params` weighted by `counts`.
pub fn aggregate(params: &[ParameterVector], counts: &[usize]) -> Result<ParameterVector> {
    if params.is_empty() || params.len() != counts.len() {
        return Err(Error::ManifestMismatch(format!(
            "{} parameter vectors for {} counts",
            params.len(),
            counts.len()
        )));
    }
    let len = params[0].len();
    if let Some(p) = params.iter().find(|p| p.len() != len) {
        return Err(Error::ManifestMismatch(format!("vector lengths {len} and {}", p.len())));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::DegenerateAggregation);
    }
    let mut out = vec![0.0; len];
    for (p, &n) in params.iter().zip(counts) {
        let w = n as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(&p.0) {
            *o += w * v;
        }
    }
    Ok(ParameterVector(out))
}

/// `(mu / 2) * ||local - global||^2`.
pub fn fedprox_penalty(local: &ParameterVector, global: &ParameterVector, mu: f64) -> Result<f64> {
    if local.len() != global.len() {
        return Err(Error::ManifestMismatch(format!(
            "local has {} values, global {}",
            local.len(),
            global.len()
        )));
    }
    let sq: f64 = local.0.iter().zip(&global.0).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * mu * sq)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of client `k` in round `r` of step `t`.
pub fn client_seed(global_seed: u64, t: usize, r: usize, k: usize) -> u64 {
    [t, r, k]
        .iter()
        .fold(splitmix(global_seed), |acc, &x| splitmix(acc ^ x as u64))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub task: usize,
    pub round: usize,
    pub selected_clients: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl RoundPlan {
    /// Selects `ceil(participation * num_clients)` clients (at least one);
    /// everyone when `participation >= 1`.
    pub fn new(global_seed: u64, task: usize, round: usize, num_clients: usize, participation: f64) -> Self {
        let mut selected: Vec<usize> = (0..num_clients).collect();
        if participation < 1.0 {
            let m = ((participation * num_clients as f64).ceil() as usize).clamp(1, num_clients);
            let mut rng = ChaCha8Rng::seed_from_u64(client_seed(global_seed, task, round, usize::MAX));
            selected.shuffle(&mut rng);
            selected.truncate(m);
            selected.sort_unstable();
        }
        let seeds = selected
            .iter()
            .map(|&k| client_seed(global_seed, task, round, k))
            .collect();
        Self {
            task,
            round,
            selected_clients: selected,
            seeds,
        }
    }
}

/// Server-held state between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub classifier: ParameterVector,
    pub flow: ParameterVector,
    pub seen_classes: BTreeSet<usize>,
    pub snapshot: Option<FrozenSnapshot>,
    /// Number of task steps completed so far.
    pub completed_steps: usize,
}

impl GlobalState {
    pub fn initial(models: &Models) -> Self {
        let mut classifier = models.classifier.to_vector();
        let mut flow = models.flow.to_vector();
        classifier.round_to_f32();
        flow.round_to_f32();
        Self {
            classifier,
            flow,
            seen_classes: BTreeSet::new(),
            snapshot: None,
            completed_steps: 0,
        }
    }
}

/// Model templates whose parameters are replaced by broadcast vectors.
#[derive(Clone, Debug)]
pub struct Models {
    pub classifier: SplitClassifier,
    pub flow: FlowModel,
}

impl Models {
    fn load(&self, classifier: &ParameterVector, flow: &ParameterVector) -> Result<(SplitClassifier, FlowModel)> {
        let mut h = self.classifier.clone();
        h.load_vector(classifier)?;
        let mut g = self.flow.clone();
        g.load_vector(flow)?;
        Ok((h, g))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub rounds_per_task: usize,
    /// Fraction of clients selected each round.
    pub participation: f64,
    pub local: LocalConfig,
    pub global_seed: u64,
}

/// What a client sends back: parameters, a sample count and loss summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client: usize,
    pub count: usize,
    pub losses: LocalLog,
}

/// One line of the run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub task: usize,
    pub round: usize,
    pub clients: Vec<ClientReport>,
    pub classifier_norm: f64,
    pub flow_norm: f64,
    pub wall_time_s: f64,
}

struct ClientData {
    inputs: Mat,
    labels: Vec<usize>,
}

/// Runs every round of task step `t` and fills row `t` of `acc`.
///
/// `on_round` sees each round's record and the state after aggregation.
#[allow(clippy::too_many_arguments)]
pub fn run_task_step(
    t: usize,
    mut state: GlobalState,
    fed: &Federation,
    pool: &Pool,
    models: &Models,
    cfg: &ProtocolConfig,
    acc: &mut AccuracyMatrix,
    mut on_round: impl FnMut(&RoundRecord, &GlobalState) -> Result<()>,
) -> Result<GlobalState> {
    if t != state.completed_steps || t >= fed.num_steps() {
        return Err(Error::Config(format!(
            "step {t} requested after {} completed of {}",
            state.completed_steps,
            fed.num_steps()
        )));
    }
    if t > 0 {
        state.snapshot = Some(FrozenSnapshot::new(state.classifier.clone(), state.flow.clone(), t - 1));
    }
    let seen_prev = state.seen_classes.clone();
    for k in 0..fed.num_clients() {
        state
            .seen_classes
            .extend(fed.task(k, t).spec.class_list.iter().copied());
    }
    let seen_now = LabelSampler::uniform(state.seen_classes.iter().copied())?;
    let past_models = match &state.snapshot {
        Some(s) => Some((
            models.load(s.classifier(), s.flow())?,
            LabelSampler::uniform(seen_prev.iter().copied())?,
        )),
        None => None,
    };
    let data: Vec<ClientData> = (0..fed.num_clients())
        .map(|k| {
            let task = fed.task(k, t);
            ClientData {
                inputs: task.train_inputs(pool),
                labels: task.train_labels.clone(),
            }
        })
        .collect();

    for r in 0..cfg.rounds_per_task {
        let started = Instant::now();
        let plan = RoundPlan::new(cfg.global_seed, t, r, fed.num_clients(), cfg.participation);
        let (h, g) = models.load(&state.classifier, &state.flow)?;
        let outcomes = plan
            .selected_clients
            .par_iter()
            .zip(&plan.seeds)
            .map(|(&k, &seed)| {
                let past = past_models.as_ref().map(|((teacher, flow), seen)| PastKnowledge {
                    teacher,
                    flow,
                    seen,
                });
                client_local_step(
                    ClientRound {
                        classifier: &h,
                        flow: &g,
                        inputs: &data[k].inputs,
                        labels: &data[k].labels,
                        past,
                        seen_now: &seen_now,
                        seed,
                    },
                    &cfg.local,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let counts: Vec<usize> = outcomes.iter().map(|o| o.count).collect();
        let hs: Vec<ParameterVector> = outcomes.iter().map(|o| o.classifier.clone()).collect();
        let gs: Vec<ParameterVector> = outcomes.iter().map(|o| o.flow.clone()).collect();
        state.classifier = aggregate(&hs, &counts)?;
        state.flow = aggregate(&gs, &counts)?;
        state.classifier.round_to_f32();
        state.flow.round_to_f32();
        if r + 1 == cfg.rounds_per_task {
            state.completed_steps = t + 1;
        }
        let record = RoundRecord {
            task: t,
            round: r,
            clients: plan
                .selected_clients
                .iter()
                .zip(outcomes)
                .map(|(&client, o)| ClientReport {
                    client,
                    count: o.count,
                    losses: o.log,
                })
                .collect(),
            classifier_norm: state.classifier.l2_norm(),
            flow_norm: state.flow.l2_norm(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_round(&record, &state)?;
    }
    state.completed_steps = t + 1;
    evaluate_step(t, &state, fed, pool, models, acc)?;
    Ok(state)
}

/// Accuracy of the global classifier on every client's tasks `0..=t`.
pub fn evaluate_step(
    t: usize,
    state: &GlobalState,
    fed: &Federation,
    pool: &Pool,
    models: &Models,
    acc: &mut AccuracyMatrix,
) -> Result<()> {
    let (h, _) = models.load(&state.classifier, &state.flow)?;
    for k in 0..fed.num_clients() {
        for i in 0..=t {
            let task = fed.task(k, i);
            let a = h.accuracy(&task.test_inputs(pool), &task.test_labels)?;
            acc.set_count(k, i, task.test_labels.len())?;
            acc.set(k, t, i, a)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
