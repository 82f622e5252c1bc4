//! Conditional normalizing flow over classifier features.
//!
//! The flow `g` maps a feature `z` with label `y` to a latent `u = g(z | y)`
//! under a standard normal prior. Layers alternate a fixed random
//! permutation with an affine coupling whose scale and shift networks see the
//! pass-through half concatenated with a learned label embedding. The exact
//! log-density is
//!
//! ```text
//! log p(z | y) = log N(g(z | y); 0, I) + sum_l log|det J_l|
//! ```
//!
//! and permutations contribute nothing to the sum.

mod layers;

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Axis;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use layers::{Bijector, CouplingLayer, FlowLayer, PermutationLayer};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::params::{ParamSet, ParameterVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Feature dimension.
    pub dim: usize,
    /// Number of (permutation, coupling) pairs.
    pub depth: usize,
    pub hidden: usize,
    /// Residual blocks in each scale / translate network.
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Bound `c` of the `c * tanh(s / c)` log-scale clamp.
    pub scale_clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            depth: 4,
            hidden: 256,
            num_blocks: 2,
            embed_dim: 32,
            num_classes: 26,
            scale_clamp: 3.0,
        }
    }
}

/// Initial state of the coupling networks' output layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowInit {
    /// Zero output layers: the flow starts as a pure permutation.
    Identity,
    /// Every layer randomly initialized.
    Random,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    config: FlowConfig,
    params: ParamSet,
    layers: Vec<FlowLayer>,
}

/// Features with their labels, one row per sample.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBatch<'a> {
    pub features: &'a Mat,
    pub labels: &'a [usize],
}

/// Samples drawn from the flow: latents, their preimages and labels, plus the
/// replay weights assigned later.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedBatch {
    pub latents: Mat,
    pub features: Mat,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GeneratedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_features(&self) -> FeatureBatch<'_> {
        FeatureBatch {
            features: &self.features,
            labels: &self.labels,
        }
    }
}

/// Uniform distribution over a set of class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSampler {
    classes: Vec<usize>,
}

impl LabelSampler {
    pub fn uniform(classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let classes: Vec<usize> = classes.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.classes[rng.random_range(0..self.classes.len())]
    }
}

/// Log-density of the standard normal prior.
pub fn prior_log_density(u: &[f64]) -> f64 {
    -0.5 * u.iter().map(|x| x * x).sum::<f64>() - 0.5 * u.len() as f64 * (2.0 * PI).ln()
}

impl FlowModel {
    pub fn new(config: FlowConfig, init: FlowInit, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.num_classes == 0 || config.embed_dim == 0 {
            return Err(Error::Config(
                "flow dim, num_classes and embed_dim must be positive".into(),
            ));
        }
        if config.scale_clamp <= 0.0 || !config.scale_clamp.is_finite() {
            return Err(Error::Config("scale_clamp must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let output_init = match init {
            FlowInit::Identity => Init::Zeros,
            FlowInit::Random => Init::Uniform,
        };
        let mut layers = Vec::with_capacity(2 * config.depth);
        for l in 0..config.depth {
            layers.push(FlowLayer::Permutation(PermutationLayer::random(config.dim, &mut rng)));
            let shape = layers::CouplingShape {
                dim: config.dim,
                hidden: config.hidden,
                num_blocks: config.num_blocks,
                embed_dim: config.embed_dim,
                num_classes: config.num_classes,
                clamp: config.scale_clamp,
                parity: l % 2 == 1,
            };
            layers.push(FlowLayer::Coupling(CouplingLayer::new(
                &mut params,
                &format!("coupling{l}"),
                &shape,
                output_init,
                &mut rng,
            )));
        }
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    /// Builds a flow from an explicit layer stack sharing `params`.
    pub fn from_parts(config: FlowConfig, params: ParamSet, layers: Vec<FlowLayer>) -> Self {
        Self {
            config,
            params,
            layers,
        }
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn to_vector(&self) -> ParameterVector {
        self.params.to_vector()
    }

    pub fn load_vector(&mut self, v: &ParameterVector) -> Result<()> {
        self.params.load_vector(v)
    }

    pub fn check_batch(&self, z: &Mat, labels: &[usize], what: &'static str) -> Result<()> {
        if z.ncols() != self.config.dim {
            return Err(Error::shape(
                format!("{} columns", self.config.dim),
                format!("{} columns", z.ncols()),
            ));
        }
        if z.nrows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", z.nrows()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= self.config.num_classes) {
            return Err(Error::LabelDomain {
                label,
                num_classes: self.config.num_classes,
            });
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericInput(what));
        }
        Ok(())
    }

    /// `u = g(z | y)` and the accumulated log-determinant (`n x 1`).
    pub fn forward_graph(&self, g: &mut Graph, p: &[Var], z: Var, labels: &Arc<[usize]>) -> (Var, Var) {
        let n = g.value(z).nrows();
        let mut x = z;
        let mut logdet: Option<Var> = None;
        for layer in &self.layers {
            let (y, ld) = layer.forward(g, p, x, labels);
            x = y;
            if let Some(ld) = ld {
                logdet = Some(match logdet {
                    Some(acc) => g.add(acc, ld),
                    None => ld,
                });
            }
        }
        let logdet = logdet.unwrap_or_else(|| g.constant(Mat::zeros((n, 1))));
        (x, logdet)
    }

    pub fn inverse_graph(&self, g: &mut Graph, p: &[Var], u: Var, labels: &Arc<[usize]>) -> Var {
        self.layers
            .iter()
            .rev()
            .fold(u, |y, layer| layer.inverse(g, p, y, labels))
    }

    /// Per-row `log p(z | y)` as an `n x 1` column.
    pub fn log_prob_graph(&self, g: &mut Graph, p: &[Var], z: Var, labels: &Arc<[usize]>) -> Var {
        let (u, logdet) = self.forward_graph(g, p, z, labels);
        let prior = prior_log_density_graph(g, u);
        g.add(prior, logdet)
    }

    pub fn forward_batch(&self, z: &Mat, labels: &[usize]) -> Result<(Mat, Vec<f64>)> {
        self.check_batch(z, labels, "flow input")?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let (u, ld) = self.forward_graph(&mut g, &p, zv, &Arc::from(labels));
        Ok((g.value(u).clone(), g.value(ld).column(0).to_vec()))
    }

    pub fn inverse_batch(&self, u: &Mat, labels: &[usize]) -> Result<Mat> {
        self.check_batch(u, labels, "flow latent")?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let uv = g.constant(u.clone());
        let z = self.inverse_graph(&mut g, &p, uv, &Arc::from(labels));
        Ok(g.value(z).clone())
    }

    pub fn log_prob_batch(&self, z: &Mat, labels: &[usize]) -> Result<Vec<f64>> {
        let (u, ld) = self.forward_batch(z, labels)?;
        Ok(u
            .axis_iter(Axis(0))
            .zip(ld)
            .map(|(row, ld)| prior_log_density(&row.to_vec()) + ld)
            .collect())
    }

    pub fn forward(&self, z: &[f64], y: usize) -> Result<(Vec<f64>, f64)> {
        let (u, ld) = self.forward_batch(&row_matrix(z), &[y])?;
        Ok((u.row(0).to_vec(), ld[0]))
    }

    pub fn inverse(&self, u: &[f64], y: usize) -> Result<Vec<f64>> {
        Ok(self.inverse_batch(&row_matrix(u), &[y])?.row(0).to_vec())
    }

    pub fn log_prob(&self, z: &[f64], y: usize) -> Result<f64> {
        Ok(self.log_prob_batch(&row_matrix(z), &[y])?[0])
    }

    /// Draws `n` prior latents with labels from `sampler` and maps them back
    /// to feature space. Weights start at 1.
    pub fn sample(&self, n: usize, sampler: &LabelSampler, seed: u64) -> Result<GeneratedBatch> {
        if n == 0 {
            return Err(Error::EmptyBatch("flow sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
        let latents = Mat::from_shape_simple_fn((n, self.config.dim), || rng.sample(StandardNormal));
        let features = self.inverse_batch(&latents, &labels)?;
        Ok(GeneratedBatch {
            latents,
            features,
            labels,
            weights: vec![1.0; n],
        })
    }
}

fn row_matrix(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

fn prior_log_density_graph(g: &mut Graph, u: Var) -> Var {
    let d = g.value(u).ncols() as f64;
    let sq = g.square(u);
    let ss = g.row_sum(sq);
    let half = g.scale(ss, -0.5);
    let c = g.constant(Mat::from_elem((1, 1), -0.5 * d * (2.0 * PI).ln()));
    g.add_bias(half, c)
}

/// Flow training objective on a graph: the negative mean log-likelihood of
/// the local features plus, when present, that of the replayed features.
/// Inputs enter as constants so only flow parameters receive gradients.
pub fn nf_loss_graph(
    flow: &FlowModel,
    g: &mut Graph,
    p: &[Var],
    local: FeatureBatch<'_>,
    replay: Option<FeatureBatch<'_>>,
) -> Result<Var> {
    if local.labels.is_empty() {
        return Err(Error::EmptyBatch("nf_loss local batch"));
    }
    flow.check_batch(local.features, local.labels, "nf_loss local features")?;
    let term = |g: &mut Graph, batch: FeatureBatch<'_>| {
        let z = g.constant(batch.features.clone());
        let lp = flow.log_prob_graph(g, p, z, &Arc::from(batch.labels));
        let m = g.mean_all(lp);
        g.scale(m, -1.0)
    };
    let mut loss = term(g, local);
    if let Some(replay) = replay.filter(|r| !r.labels.is_empty()) {
        flow.check_batch(replay.features, replay.labels, "nf_loss replay features")?;
        let r = term(g, replay);
        loss = g.add(loss, r);
    }
    Ok(loss)
}

pub fn nf_loss(flow: &FlowModel, local: FeatureBatch<'_>, replay: Option<FeatureBatch<'_>>) -> Result<f64> {
    let mut g = Graph::new();
    let p = flow.params().bind_frozen(&mut g);
    let loss = nf_loss_graph(flow, &mut g, &p, local, replay)?;
    Ok(g.scalar(loss))
}

/// Loss value and its gradient with respect to every flow parameter, in
/// manifest order.
pub fn nf_loss_with_grad(
    flow: &FlowModel,
    local: FeatureBatch<'_>,
    replay: Option<FeatureBatch<'_>>,
) -> Result<(f64, ParameterVector)> {
    let mut g = Graph::new();
    let p = flow.params().bind(&mut g);
    let loss = nf_loss_graph(flow, &mut g, &p, local, replay)?;
    let grads = g.backward(loss);
    Ok((g.scalar(loss), flow.params().flat_grad(&grads, &p)))
}

#[cfg(test)]
mod tests;
