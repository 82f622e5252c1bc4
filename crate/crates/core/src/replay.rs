//! Density-weighted feature replay and the client-side training step.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::classifier::{total_loss_with_grad, LossBreakdown, LossSwitches, RawBatch, SplitClassifier};
use crate::error::{Error, Result};
use crate::flow::{nf_loss_with_grad, FeatureBatch, FlowModel, LabelSampler};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParameterVector;

/// Floor applied to every fitted variance.
pub const VARIANCE_FLOOR: f64 = 1e-5;

/// Gaussian with diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    /// Moments with `1/n` normalization, variances floored. `rows` must be nonempty.
    fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            n += 1;
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut()
            .for_each(|v| *v = (*v / n as f64).max(VARIANCE_FLOOR));
        Self { mean, var }
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((x, m), v) in u.iter().zip(&self.mean).zip(&self.var) {
            acc += (x - m) * (x - m) / v + v.ln();
        }
        -0.5 * (acc + u.len() as f64 * (2.0 * PI).ln())
    }
}

/// Per-class and pooled latent Gaussians of one client's current task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentClassStats {
    pub per_class: BTreeMap<usize, DiagGaussian>,
    pub pooled: DiagGaussian,
    pub counts: BTreeMap<usize, usize>,
}

impl LatentClassStats {
    pub fn from_latents(latents: &Mat, labels: &[usize]) -> Result<Self> {
        if latents.nrows() == 0 {
            return Err(Error::EmptyBatch("latent stats"));
        }
        if latents.nrows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", latents.nrows()),
                format!("{} labels", labels.len()),
            ));
        }
        let dim = latents.ncols();
        let rows: Vec<Vec<f64>> = latents.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            groups.entry(y).or_default().push(i);
        }
        let per_class = groups
            .iter()
            .map(|(&y, idx)| (y, DiagGaussian::fit(idx.iter().map(|&i| rows[i].as_slice()), dim)))
            .collect();
        let counts = groups.iter().map(|(&y, idx)| (y, idx.len())).collect();
        let pooled = DiagGaussian::fit(rows.iter().map(Vec::as_slice), dim);
        Ok(Self {
            per_class,
            pooled,
            counts,
        })
    }

    pub fn dim(&self) -> usize {
        self.pooled.mean.len()
    }
}

/// Maps a classifier's features of `inputs` through `flow` and fits
/// latent Gaussians to them.
pub fn fit_latent_stats(
    flow: &FlowModel,
    h: &SplitClassifier,
    inputs: &Mat,
    labels: &[usize],
) -> Result<LatentClassStats> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch("latent stats"));
    }
    let feats = h.features(inputs)?;
    let (u, _) = flow.forward_batch(&feats, labels)?;
    LatentClassStats::from_latents(&u, labels)
}

/// Scores how credible a generated latent is for its label.
pub trait CredibilityScorer {
    fn log_credibility(&self, latent: &[f64], label: usize) -> f64;
}

impl CredibilityScorer for LatentClassStats {
    fn log_credibility(&self, latent: &[f64], label: usize) -> f64 {
        correlation_density(self, latent, label)
    }
}

/// Log-density of `u` under the Gaussian of class `y`, or the pooled one
/// when `y` is absent from the fitted data.
pub fn correlation_density(stats: &LatentClassStats, u: &[f64], y: usize) -> f64 {
    stats.per_class.get(&y).unwrap_or(&stats.pooled).log_density(u)
}

/// `w_i = exp(l_i - max_j l_j)`: order preserving, maximum exactly 1.
pub fn weights_from_density(log_densities: &[f64]) -> Result<Vec<f64>> {
    if log_densities.is_empty() {
        return Err(Error::EmptyBatch("replay weights"));
    }
    if log_densities.iter().any(|l| l.is_nan()) {
        return Err(Error::NumericInput("log-density is NaN"));
    }
    let max = log_densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    Ok(log_densities.iter().map(|l| (l - max).exp()).collect())
}

/// Per-round settings of a client's local optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Latent statistics are refit every this many iterations.
    pub refit_every: usize,
    pub train_flow: bool,
    pub switches: LossSwitches,
    /// Off forces every replay weight to 1.
    pub weighting: bool,
    pub prox_mu: Option<f64>,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            refit_every: 10,
            train_flow: true,
            switches: LossSwitches::default(),
            weighting: true,
            prox_mu: None,
        }
    }
}

/// Frozen models from the previous task boundary and the classes they cover.
#[derive(Clone, Copy)]
pub struct PastKnowledge<'a> {
    pub teacher: &'a SplitClassifier,
    pub flow: &'a FlowModel,
    pub seen: &'a LabelSampler,
}

/// Everything a client needs for one round of local training.
#[derive(Clone, Copy)]
pub struct ClientRound<'a> {
    pub classifier: &'a SplitClassifier,
    pub flow: &'a FlowModel,
    pub inputs: &'a Mat,
    pub labels: &'a [usize],
    /// Absent on the first task.
    pub past: Option<PastKnowledge<'a>>,
    /// Classes seen globally up to and including the current task.
    pub seen_now: &'a LabelSampler,
    pub seed: u64,
}

/// Means over the local iterations of a round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalLog {
    pub iters: usize,
    pub ce_raw: f64,
    pub ce_generated: f64,
    pub kd: f64,
    pub nf: f64,
    pub prox: f64,
    /// Mean replay weight over all generated samples, when any were drawn.
    pub mean_weight: Option<f64>,
    /// Every replay weight of the round equalled 1.
    pub weights_all_one: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub classifier: ParameterVector,
    pub flow: ParameterVector,
    pub count: usize,
    pub log: LocalLog,
}

/// Cycles through shuffled local indices one mini-batch at a time.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batcher {
    fn new(n: usize, size: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

fn select(inputs: &Mat, labels: &[usize], idx: &[usize]) -> (Mat, Vec<usize>) {
    (
        inputs.select(ndarray::Axis(0), idx),
        idx.iter().map(|&i| labels[i]).collect(),
    )
}

/// One round of local training. Each iteration updates the flow on local
/// features plus replay drawn from the frozen flow, refits the latent
/// statistics on schedule, then updates the classifier on raw data plus
/// density-weighted samples from the current flow and feature distillation.
pub fn client_local_step(round: ClientRound<'_>, cfg: &LocalConfig) -> Result<LocalOutcome> {
    let n = round.labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch("client data"));
    }
    if round.inputs.nrows() != n {
        return Err(Error::shape(format!("{n} input rows"), format!("{} input rows", round.inputs.nrows())));
    }
    if cfg.batch_size == 0 || cfg.refit_every == 0 {
        return Err(Error::Config("batch_size and refit_every must be positive".into()));
    }
    let mut h = round.classifier.clone();
    let mut flow = round.flow.clone();
    let global = h.to_vector();
    let mut opt_h = Adam::new(cfg.adam, h.params().num_scalars());
    let mut opt_g = Adam::new(cfg.adam, flow.params().num_scalars());
    let mut rng = ChaCha8Rng::seed_from_u64(round.seed);
    let mut batcher = Batcher::new(n, cfg.batch_size);
    let replay_on = cfg.switches.replay && round.past.is_some();
    let teacher = round.past.filter(|_| cfg.switches.distill).map(|p| p.teacher);

    let mut log = LocalLog {
        weights_all_one: true,
        ..LocalLog::default()
    };
    let (mut weight_sum, mut weight_n) = (0.0, 0usize);
    let mut stats: Option<LatentClassStats> = None;

    for it in 0..cfg.iters {
        let idx = batcher.next(&mut rng);
        let (x, y) = select(round.inputs, round.labels, &idx);
        let b = y.len();

        if cfg.train_flow {
            let z = h.features(&x)?;
            let replay = match round.past {
                Some(past) => Some(past.flow.sample(b, past.seen, rng.random())?),
                None => None,
            };
            let (nf, grad) = nf_loss_with_grad(
                &flow,
                FeatureBatch {
                    features: &z,
                    labels: &y,
                },
                replay.as_ref().map(|r| r.as_features()),
            )?;
            opt_g.step(flow.params_mut(), &grad);
            log.nf += nf;
        }

        let generated = if replay_on {
            let mut batch = flow.sample(b, round.seen_now, rng.random())?;
            if cfg.weighting {
                if it % cfg.refit_every == 0 || stats.is_none() {
                    stats = Some(fit_latent_stats(&flow, &h, round.inputs, round.labels)?);
                }
                let s = stats.as_ref().expect("fitted above");
                let dens: Vec<f64> = batch
                    .latents
                    .rows()
                    .into_iter()
                    .zip(&batch.labels)
                    .map(|(u, &c)| s.log_credibility(u.as_slice().expect("standard layout"), c))
                    .collect();
                batch.weights = weights_from_density(&dens)?;
            }
            weight_sum += batch.weights.iter().sum::<f64>();
            weight_n += batch.len();
            log.weights_all_one &= batch.weights.iter().all(|&w| w == 1.0);
            Some(batch)
        } else {
            None
        };

        let (parts, mut grad): (LossBreakdown, ParameterVector) = total_loss_with_grad(
            &h,
            RawBatch {
                inputs: &x,
                labels: &y,
            },
            generated.as_ref(),
            teacher,
            cfg.switches,
        )?;
        if let Some(mu) = cfg.prox_mu {
            let cur = h.to_vector();
            let mut sq = 0.0;
            for ((gi, c), g0) in grad.0.iter_mut().zip(&cur.0).zip(&global.0) {
                *gi += mu * (c - g0);
                sq += (c - g0) * (c - g0);
            }
            log.prox += 0.5 * mu * sq;
        }
        opt_h.step(h.params_mut(), &grad);
        log.ce_raw += parts.ce_raw;
        log.ce_generated += parts.ce_generated;
        log.kd += parts.kd;
    }

    if cfg.iters > 0 {
        let k = cfg.iters as f64;
        log.iters = cfg.iters;
        log.ce_raw /= k;
        log.ce_generated /= k;
        log.kd /= k;
        log.nf /= k;
        log.prox /= k;
    }
    log.mean_weight = (weight_n > 0).then(|| weight_sum / weight_n as f64);
    Ok(LocalOutcome {
        classifier: h.to_vector(),
        flow: flow.to_vector(),
        count: n,
        log,
    })
}

#[cfg(test)]
mod tests;
