//! Split classifier `h = h_c ∘ h_b ∘ h_a` and its loss terms.
//!
//! `h_a` is the feature extractor whose output space the flow models.
//! Generated features are injected after `h_a`, so the replay loss never
//! reaches `h_a`'s parameters.

use std::ops::Range;
use std::sync::Arc;

use ndarray::Axis;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::flow::GeneratedBatch;
use crate::nn::{Conv2d, Init, Linear, LEAKY_SLOPE};
use crate::params::{ParamSet, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub input: InputShape,
    /// Output channels of each stride-2, 3x3 convolution in `h_a`.
    pub conv_channels: Vec<usize>,
    /// Width of `h_a`'s final fully connected layer, i.e. the feature dimension.
    pub feature_dim: usize,
    /// Widths of the fully connected layers forming `h_b`.
    pub mid_dims: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input: InputShape {
                channels: 1,
                height: 28,
                width: 28,
            },
            conv_channels: vec![64, 128, 256],
            feature_dim: 512,
            mid_dims: vec![512],
            num_classes: 26,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitClassifier {
    config: ClassifierConfig,
    params: ParamSet,
    to_hwc: Option<Arc<[usize]>>,
    convs: Vec<Conv2d>,
    feature_fc: Linear,
    mids: Vec<Linear>,
    head: Linear,
    feature_entries: usize,
}

impl SplitClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.input.is_empty() || config.feature_dim == 0 || config.num_classes == 0 {
            return Err(Error::Config(
                "classifier input, feature_dim and num_classes must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let InputShape {
            channels,
            height,
            width,
        } = config.input;
        let to_hwc = (channels > 1).then(|| {
            let mut idx = Vec::with_capacity(config.input.len());
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        idx.push((c * height + y) * width + x);
                    }
                }
            }
            Arc::from(idx)
        });

        let (mut h, mut w, mut c) = (height, width, channels);
        let mut convs = Vec::new();
        for (i, &out) in config.conv_channels.iter().enumerate() {
            let geom = ConvGeom {
                height: h,
                width: w,
                channels: c,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            convs.push(Conv2d::new(&mut params, &format!("h_a.conv{i}"), geom, out, Init::Uniform, &mut rng));
            (h, w, c) = (geom.out_height(), geom.out_width(), out);
        }
        let feature_fc = Linear::new(
            &mut params,
            "h_a.fc",
            h * w * c,
            config.feature_dim,
            Init::Uniform,
            &mut rng,
        );
        let feature_entries = params.len();
        let mut width_in = config.feature_dim;
        let mut mids = Vec::new();
        for (i, &out) in config.mid_dims.iter().enumerate() {
            mids.push(Linear::new(&mut params, &format!("h_b.fc{i}"), width_in, out, Init::Uniform, &mut rng));
            width_in = out;
        }
        let head = Linear::new(&mut params, "h_c", width_in, config.num_classes, Init::Uniform, &mut rng);
        Ok(Self {
            config,
            params,
            to_hwc,
            convs,
            feature_fc,
            mids,
            head,
            feature_entries,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
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

    /// Coordinates of the flat parameter vector that belong to `h_a`.
    pub fn feature_param_range(&self) -> Range<usize> {
        let n: usize = self.params.entries()[..self.feature_entries]
            .iter()
            .map(|e| e.value.len())
            .sum();
        0..n
    }

    pub fn check_input(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.config.input.len() {
            return Err(Error::shape(
                format!("{} input columns", self.config.input.len()),
                format!("{} input columns", x.ncols()),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("classifier input"));
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize], rows: usize) -> Result<()> {
        if labels.len() != rows {
            return Err(Error::shape(format!("{rows} labels"), format!("{} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= self.config.num_classes) {
            return Err(Error::LabelDomain {
                label,
                num_classes: self.config.num_classes,
            });
        }
        Ok(())
    }

    /// `h_a(x)`.
    pub fn features_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut h = match &self.to_hwc {
            Some(idx) => g.gather_cols(x, idx.clone()),
            None => x,
        };
        for conv in &self.convs {
            let y = conv.forward(g, p, h);
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let y = self.feature_fc.forward(g, p, h);
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    /// `h_c(h_b(z))` for features `z`.
    pub fn head_graph(&self, g: &mut Graph, p: &[Var], z: Var) -> Var {
        let mut h = z;
        for fc in &self.mids {
            let y = fc.forward(g, p, h);
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        self.head.forward(g, p, h)
    }

    pub fn logits_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let z = self.features_graph(g, p, x);
        self.head_graph(g, p, z)
    }

    pub fn features(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let z = self.features_graph(&mut g, &p, xv);
        Ok(g.value(z).clone())
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let l = self.logits_graph(&mut g, &p, xv);
        Ok(g.value(l).clone())
    }

    pub fn head_logits(&self, z: &Mat) -> Result<Mat> {
        if z.ncols() != self.config.feature_dim {
            return Err(Error::shape(
                format!("{} feature columns", self.config.feature_dim),
                format!("{} feature columns", z.ncols()),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let l = self.head_graph(&mut g, &p, zv);
        Ok(g.value(l).clone())
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Fraction of rows whose argmax over the full head equals the label.
    pub fn accuracy(&self, x: &Mat, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch("accuracy"));
        }
        self.check_labels(labels, x.nrows())?;
        let mut correct = 0usize;
        // chunked to bound graph memory on large test sets
        for start in (0..x.nrows()).step_by(256) {
            let end = (start + 256).min(x.nrows());
            let pred = self.predict(&x.slice(ndarray::s![start..end, ..]).to_owned())?;
            correct += pred.iter().zip(&labels[start..end]).filter(|(p, y)| p == y).count();
        }
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Frozen copies of the classifier and flow taken at a task boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenSnapshot {
    classifier: ParameterVector,
    flow: ParameterVector,
    step_index: usize,
}

impl FrozenSnapshot {
    pub fn new(classifier: ParameterVector, flow: ParameterVector, step_index: usize) -> Self {
        Self {
            classifier,
            flow,
            step_index,
        }
    }

    pub fn classifier(&self) -> &ParameterVector {
        &self.classifier
    }

    pub fn flow(&self) -> &ParameterVector {
        &self.flow
    }

    /// Index of the last completed task when the snapshot was taken.
    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// A classifier with the snapshot's parameters, usable as `h_a'`.
    pub fn teacher(&self, template: &SplitClassifier) -> Result<SplitClassifier> {
        let mut t = template.clone();
        t.load_vector(&self.classifier)?;
        Ok(t)
    }
}

/// Which terms of the classifier objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub replay: bool,
    pub distill: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            replay: true,
            distill: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_raw: f64,
    pub ce_generated: f64,
    pub kd: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.ce_raw + self.ce_generated + self.kd
    }
}

/// Raw data batch: one input per row.
#[derive(Clone, Copy, Debug)]
pub struct RawBatch<'a> {
    pub inputs: &'a Mat,
    pub labels: &'a [usize],
}

fn check_weights(w: &[f64]) -> Result<()> {
    match w.iter().position(|&x| !(x.is_finite() && x >= 0.0)) {
        Some(index) => Err(Error::WeightDomain {
            index,
            value: w[index],
        }),
        None => Ok(()),
    }
}

/// Nodes of the classifier objective on a graph.
pub struct ObjectiveNodes {
    pub total: Var,
    pub ce_raw: Var,
    pub ce_generated: Option<Var>,
    pub kd: Option<Var>,
}

/// Builds `L_ce^x + L_ce^g + L_KD` on `g`. Disabled or unavailable terms
/// (no generated batch, no teacher) are absent and contribute nothing.
pub fn objective_graph(
    h: &SplitClassifier,
    g: &mut Graph,
    p: &[Var],
    raw: RawBatch<'_>,
    generated: Option<&GeneratedBatch>,
    teacher: Option<&SplitClassifier>,
    switches: LossSwitches,
) -> Result<ObjectiveNodes> {
    if raw.labels.is_empty() {
        return Err(Error::EmptyBatch("classifier raw batch"));
    }
    h.check_input(raw.inputs)?;
    h.check_labels(raw.labels, raw.inputs.nrows())?;
    let x = g.constant(raw.inputs.clone());
    let feats = h.features_graph(g, p, x);
    let logits = h.head_graph(g, p, feats);
    let ce_raw = g.cross_entropy(logits, Arc::from(raw.labels), None);
    let mut total = ce_raw;

    let ce_generated = match generated.filter(|b| switches.replay && !b.is_empty()) {
        Some(batch) => {
            let v = generated_term(h, g, p, batch)?;
            total = g.add(total, v);
            Some(v)
        }
        None => None,
    };

    let kd = match teacher.filter(|_| switches.distill) {
        Some(t) => {
            let target = t.features(raw.inputs)?;
            let tv = g.constant(target);
            let diff = g.sub(feats, tv);
            let sq = g.square(diff);
            let s = g.sum_all(sq);
            let v = g.scale(s, 1.0 / raw.labels.len() as f64);
            total = g.add(total, v);
            Some(v)
        }
        None => None,
    };

    Ok(ObjectiveNodes {
        total,
        ce_raw,
        ce_generated,
        kd,
    })
}

fn generated_term(h: &SplitClassifier, g: &mut Graph, p: &[Var], batch: &GeneratedBatch) -> Result<Var> {
    check_weights(&batch.weights)?;
    if batch.features.ncols() != h.feature_dim() {
        return Err(Error::shape(
            format!("{} feature columns", h.feature_dim()),
            format!("{} feature columns", batch.features.ncols()),
        ));
    }
    h.check_labels(&batch.labels, batch.features.nrows())?;
    if batch.weights.len() != batch.labels.len() {
        return Err(Error::shape(
            format!("{} weights", batch.labels.len()),
            format!("{} weights", batch.weights.len()),
        ));
    }
    let z = g.constant(batch.features.clone());
    let logits = h.head_graph(g, p, z);
    Ok(g.cross_entropy(
        logits,
        Arc::from(batch.labels.as_slice()),
        Some(Arc::from(batch.weights.as_slice())),
    ))
}

/// Mean cross-entropy of `h(x)` against `y`.
pub fn ce_loss_raw(h: &SplitClassifier, raw: RawBatch<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let p = h.params().bind_frozen(&mut g);
    let nodes = objective_graph(h, &mut g, &p, raw, None, None, LossSwitches::default())?;
    Ok(g.scalar(nodes.ce_raw))
}

/// `(1/n) sum_i w_i CE(h_c(h_b(z_i)), y_i)` over a generated batch.
pub fn ce_loss_generated(h: &SplitClassifier, batch: &GeneratedBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("generated batch"));
    }
    let mut g = Graph::new();
    let p = h.params().bind_frozen(&mut g);
    let v = generated_term(h, &mut g, &p, batch)?;
    Ok(g.scalar(v))
}

/// `(1/n) sum_i ||h_a(x_i) - h_a'(x_i)||^2`; zero when there is no teacher.
pub fn kd_loss(h: &SplitClassifier, teacher: Option<&SplitClassifier>, inputs: &Mat) -> Result<f64> {
    let Some(t) = teacher else {
        h.check_input(inputs)?;
        return Ok(0.0);
    };
    if inputs.nrows() == 0 {
        return Err(Error::EmptyBatch("kd batch"));
    }
    let a = h.features(inputs)?;
    let b = t.features(inputs)?;
    if a.ncols() != b.ncols() {
        return Err(Error::shape(
            format!("{} teacher features", a.ncols()),
            format!("{} teacher features", b.ncols()),
        ));
    }
    Ok((&a - &b).mapv(|v| v * v).sum() / inputs.nrows() as f64)
}

/// Value of every term of the classifier objective.
pub fn total_loss(
    h: &SplitClassifier,
    raw: RawBatch<'_>,
    generated: Option<&GeneratedBatch>,
    teacher: Option<&SplitClassifier>,
    switches: LossSwitches,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = h.params().bind_frozen(&mut g);
    let nodes = objective_graph(h, &mut g, &p, raw, generated, teacher, switches)?;
    Ok(breakdown(&g, &nodes))
}

/// Objective terms plus the gradient of their sum in manifest order.
pub fn total_loss_with_grad(
    h: &SplitClassifier,
    raw: RawBatch<'_>,
    generated: Option<&GeneratedBatch>,
    teacher: Option<&SplitClassifier>,
    switches: LossSwitches,
) -> Result<(LossBreakdown, ParameterVector)> {
    let mut g = Graph::new();
    let p = h.params().bind(&mut g);
    let nodes = objective_graph(h, &mut g, &p, raw, generated, teacher, switches)?;
    let grads = g.backward(nodes.total);
    Ok((breakdown(&g, &nodes), h.params().flat_grad(&grads, &p)))
}

fn breakdown(g: &Graph, nodes: &ObjectiveNodes) -> LossBreakdown {
    LossBreakdown {
        ce_raw: g.scalar(nodes.ce_raw),
        ce_generated: nodes.ce_generated.map_or(0.0, |v| g.scalar(v)),
        kd: nodes.kd.map_or(0.0, |v| g.scalar(v)),
    }
}
