//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the indices of its inputs. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that depends on a parameter leaf.
//! Constant leaves (data, frozen features, snapshot outputs) never receive a
//! gradient, which is how gradient boundaries between sub-models are enforced.
//!
//! Batches are matrices with one sample per row. Convolutions use an NHWC
//! layout so that reshaping a `(n*h*w) x c` product back into `n x (h*w*c)`
//! needs no data movement.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution over NHWC input rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    ConcatCols(Var, Var),
    GatherCols(Var, Arc<[usize]>),
    GatherRows(Var, Arc<[usize]>),
    RowSum(Var),
    SumAll(Var),
    Reshape(Var),
    Im2Col(Var, ConvGeom),
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        weights: Option<Arc<[f64]>>,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when no path reaches it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a + bias` where `bias` is a single row broadcast over `a`'s rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        let rg = self.rg(&[a, bias]);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// `c * tanh(a / c)`: a smooth clamp of `a` into `(-c, c)`.
    pub fn soft_clamp(&mut self, a: Var, c: f64) -> Var {
        let scaled = self.scale(a, 1.0 / c);
        let t = self.tanh(scaled);
        self.scale(t, c)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols row mismatch");
        let mut value = Mat::zeros((va.nrows(), va.ncols() + vb.ncols()));
        value.slice_mut(s![.., ..va.ncols()]).assign(va);
        value.slice_mut(s![.., va.ncols()..]).assign(vb);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// `out[:, j] = a[:, idx[j]]`.
    pub fn gather_cols(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(1), &idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherCols(a, idx), rg)
    }

    /// `out[i, :] = a[idx[i], :]` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    /// Sum across columns: `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSum(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), shape.0 * shape.1, "reshape size mismatch");
        let value = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(shape)
            .expect("standard layout reshape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Unfold NHWC rows into `(n*oh*ow) x (k*k*c)` patches, zero padded.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let value = im2col(self.value(a), &geom);
        let rg = self.rg(&[a]);
        self.push(value, Op::Im2Col(a, geom), rg)
    }

    /// Mean (optionally weighted) softmax cross-entropy, divided by the batch
    /// size regardless of weights.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<[usize]>,
        weights: Option<Arc<[f64]>>,
    ) -> Var {
        let lv = self.value(logits);
        let n = lv.nrows();
        assert_eq!(labels.len(), n, "label count mismatch");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let z: f64 = row.sum();
            row.mapv_inplace(|x| x / z);
            let nll = -(lv[[i, labels[i]]] - max - z.ln());
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            total += w * nll;
        }
        let value = Mat::from_elem((1, 1), total / n as f64);
        let rg = self.rg(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::ones(self.nodes[root.0].value.raw_dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accum(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    self.accum(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accum(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accum(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accum(grads, *a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    self.accum(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, g * *c),
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= slope;
                        }
                    });
                self.accum(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(value).for_each(|d, &y| *d *= 1.0 - y * y);
                self.accum(grads, *a, d);
            }
            Op::Exp(a) => self.accum(grads, *a, g * value),
            Op::Square(a) => self.accum(grads, *a, g * self.value(*a) * 2.0),
            Op::ConcatCols(a, b) => {
                let split = self.value(*a).ncols();
                if self.requires_grad(*a) {
                    self.accum(grads, *a, g.slice(s![.., ..split]).to_owned());
                }
                if self.requires_grad(*b) {
                    self.accum(grads, *b, g.slice(s![.., split..]).to_owned());
                }
            }
            Op::GatherCols(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                for (j, &src) in idx.iter().enumerate() {
                    let mut col = d.column_mut(src);
                    col += &g.column(j);
                }
                self.accum(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).raw_dim());
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                self.accum(grads, *a, d);
            }
            Op::RowSum(a) => {
                let shape = self.value(*a).raw_dim();
                let d = g
                    .broadcast(shape)
                    .expect("row_sum grad broadcast")
                    .to_owned();
                self.accum(grads, *a, d);
            }
            Op::SumAll(a) => {
                let d = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                self.accum(grads, *a, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).dim();
                let d = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(shape)
                    .expect("reshape grad");
                self.accum(grads, *a, d);
            }
            Op::Im2Col(a, geom) => {
                let n = self.value(*a).nrows();
                self.accum(grads, *a, col2im(g, geom, n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let n = probs.nrows() as f64;
                let scale = g[[0, 0]] / n;
                let mut d = probs.clone();
                for (i, mut row) in d.axis_iter_mut(Axis(0)).enumerate() {
                    row[labels[i]] -= 1.0;
                    let w = weights.as_ref().map_or(1.0, |w| w[i]);
                    row *= w * scale;
                }
                self.accum(grads, *logits, d);
            }
        }
    }
}

/// For every output pixel, the `(patch offset, image offset)` pairs of the
/// kernel taps that land inside the image; each pair covers `channels` values.
fn patch_taps(geom: &ConvGeom) -> Vec<Vec<(usize, usize)>> {
    let (oh, ow, k, c) = (geom.out_height(), geom.out_width(), geom.kernel, geom.channels);
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut pixel = Vec::with_capacity(k * k);
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    pixel.push(((ky * k + kx) * c, (iy as usize * geom.width + ix as usize) * c));
                }
            }
            taps.push(pixel);
        }
    }
    taps
}

fn im2col(x: &Mat, geom: &ConvGeom) -> Mat {
    let n = x.nrows();
    let (c, patch, input) = (geom.channels, geom.patch_len(), geom.input_len());
    let taps = patch_taps(geom);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * taps.len() * patch];
    for (b, img) in src.chunks_exact(input).enumerate() {
        for (p, pixel) in taps.iter().enumerate() {
            let row = &mut out[(b * taps.len() + p) * patch..][..patch];
            for &(d, s) in pixel {
                row[d..d + c].copy_from_slice(&img[s..s + c]);
            }
        }
    }
    Mat::from_shape_vec((n * taps.len(), patch), out).expect("im2col shape")
}

fn col2im(g: &Mat, geom: &ConvGeom, n: usize) -> Mat {
    let (c, patch, input) = (geom.channels, geom.patch_len(), geom.input_len());
    let taps = patch_taps(geom);
    let g = g.as_standard_layout();
    let src = g.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * input];
    for (b, img) in out.chunks_exact_mut(input).enumerate() {
        for (p, pixel) in taps.iter().enumerate() {
            let row = &src[(b * taps.len() + p) * patch..][..patch];
            for &(d, s) in pixel {
                for (o, v) in img[s..s + c].iter_mut().zip(&row[d..d + c]) {
                    *o += v;
                }
            }
        }
    }
    Mat::from_shape_vec((n, input), out).expect("col2im shape")
}
