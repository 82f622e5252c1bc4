//! Building blocks shared by the classifier and the flow.

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph, Mat, Var};
use crate::params::{uniform_init, ParamSet};

pub const LEAKY_SLOPE: f64 = 0.01;

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    Uniform,
    /// Like `Uniform` but with the bound multiplied by the given factor.
    ScaledUniform(f64),
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = match init {
            Init::Uniform => 1.0 / (fan_in.max(1) as f64).sqrt(),
            Init::ScaledUniform(f) => f / (fan_in.max(1) as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let (wv, bv) = if bound == 0.0 {
            (Mat::zeros((fan_in, fan_out)), Mat::zeros((1, fan_out)))
        } else {
            (
                uniform_init(fan_in, fan_out, bound, rng),
                uniform_init(1, fan_out, bound, rng),
            )
        };
        let w = params.add(format!("{name}.weight"), wv);
        let b = params.add(format!("{name}.bias"), bv);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        g.add_bias(y, p[self.b])
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }
}

/// 2-D convolution on NHWC rows via patch unfolding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    geom: ConvGeom,
    out_channels: usize,
    lin: Linear,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        geom: ConvGeom,
        out_channels: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let lin = Linear::new(params, name, geom.patch_len(), out_channels, init, rng);
        Self {
            geom,
            out_channels,
            lin,
        }
    }

    pub fn out_len(&self) -> usize {
        self.geom.out_height() * self.geom.out_width() * self.out_channels
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let n = g.value(x).nrows();
        let cols = g.im2col(x, self.geom);
        let y = self.lin.forward(g, p, cols);
        g.reshape(y, (n, self.out_len()))
    }
}

/// `in -> hidden`, residual blocks `h + W2 lrelu(W1 h)`, then `lrelu -> out`.
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
}

impl ResidualMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        num_blocks: usize,
        output_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let input = Linear::new(params, &format!("{name}.in"), fan_in, hidden, Init::Uniform, rng);
        let blocks = (0..num_blocks)
            .map(|i| {
                let a = Linear::new(
                    params,
                    &format!("{name}.block{i}.fc1"),
                    hidden,
                    hidden,
                    Init::Uniform,
                    rng,
                );
                let b = Linear::new(
                    params,
                    &format!("{name}.block{i}.fc2"),
                    hidden,
                    hidden,
                    Init::Uniform,
                    rng,
                );
                (a, b)
            })
            .collect();
        let output = Linear::new(params, &format!("{name}.out"), hidden, fan_out, output_init, rng);
        Self {
            input,
            blocks,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut h = self.input.forward(g, p, x);
        for (a, b) in &self.blocks {
            let r = a.forward(g, p, h);
            let r = g.leaky_relu(r, LEAKY_SLOPE);
            let r = b.forward(g, p, r);
            h = g.add(h, r);
        }
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.output.forward(g, p, h)
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }
}
