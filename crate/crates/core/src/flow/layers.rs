use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::nn::{Init, ResidualMlp};
use crate::params::{uniform_init, ParamSet};

/// An invertible, label-conditioned map on `n x d` batches.
///
/// `forward` returns the image and, unless the map is volume preserving, the
/// per-row log-determinant of its Jacobian as an `n x 1` column.
pub trait Bijector {
    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, labels: &Arc<[usize]>) -> (Var, Option<Var>);

    fn inverse(&self, g: &mut Graph, p: &[Var], y: Var, labels: &Arc<[usize]>) -> Var;
}

#[derive(Clone, Debug)]
pub struct PermutationLayer {
    perm: Arc<[usize]>,
    inverse: Arc<[usize]>,
}

impl PermutationLayer {
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        Self::from_perm(perm)
    }

    /// Panics unless `perm` is a bijection on `0..perm.len()`.
    pub fn from_perm(perm: Vec<usize>) -> Self {
        let mut inverse = vec![usize::MAX; perm.len()];
        for (j, &src) in perm.iter().enumerate() {
            assert!(src < perm.len() && inverse[src] == usize::MAX, "not a permutation");
            inverse[src] = j;
        }
        Self {
            perm: perm.into(),
            inverse: inverse.into(),
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }
}

impl Bijector for PermutationLayer {
    fn forward(&self, g: &mut Graph, _p: &[Var], x: Var, _labels: &Arc<[usize]>) -> (Var, Option<Var>) {
        (g.gather_cols(x, self.perm.clone()), None)
    }

    fn inverse(&self, g: &mut Graph, _p: &[Var], y: Var, _labels: &Arc<[usize]>) -> Var {
        g.gather_cols(y, self.inverse.clone())
    }
}

/// Affine coupling: the pass-through half (plus a label embedding) drives a
/// scale and shift of the active half,
/// `y_active = exp(s) * x_active + t`, `y_pass = x_pass`.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    active: Arc<[usize]>,
    pass: Arc<[usize]>,
    restore: Arc<[usize]>,
    embed: usize,
    scale_net: ResidualMlp,
    translate_net: ResidualMlp,
    clamp: f64,
}

pub(crate) struct CouplingShape {
    pub dim: usize,
    pub hidden: usize,
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub clamp: f64,
    /// Flip which half is active.
    pub parity: bool,
}

impl CouplingLayer {
    pub(crate) fn new(
        params: &mut ParamSet,
        name: &str,
        shape: &CouplingShape,
        output_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let d = shape.dim;
        let n_active = d / 2;
        let (active, pass): (Vec<usize>, Vec<usize>) = if shape.parity {
            ((0..n_active).collect(), (n_active..d).collect())
        } else {
            ((d - n_active..d).collect(), (0..d - n_active).collect())
        };
        let mut restore = vec![0; d];
        for (pos, &j) in pass.iter().enumerate() {
            restore[j] = pos;
        }
        for (pos, &j) in active.iter().enumerate() {
            restore[j] = pass.len() + pos;
        }
        let embed = params.add(
            format!("{name}.label_embed"),
            uniform_init(shape.num_classes, shape.embed_dim, 1.0, rng),
        );
        let fan_in = pass.len() + shape.embed_dim;
        let scale_net = ResidualMlp::new(
            params,
            &format!("{name}.scale"),
            fan_in,
            shape.hidden,
            n_active,
            shape.num_blocks,
            output_init,
            rng,
        );
        let translate_net = ResidualMlp::new(
            params,
            &format!("{name}.translate"),
            fan_in,
            shape.hidden,
            n_active,
            shape.num_blocks,
            output_init,
            rng,
        );
        Self {
            active: active.into(),
            pass: pass.into(),
            restore: restore.into(),
            embed,
            scale_net,
            translate_net,
            clamp: shape.clamp,
        }
    }

    pub fn active_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.restore.len()];
        for &j in self.active.iter() {
            mask[j] = true;
        }
        mask
    }

    pub fn scale_net(&self) -> &ResidualMlp {
        &self.scale_net
    }

    pub fn translate_net(&self) -> &ResidualMlp {
        &self.translate_net
    }

    /// Clamped log-scale and shift for a batch.
    fn scale_shift(&self, g: &mut Graph, p: &[Var], x_pass: Var, labels: &Arc<[usize]>) -> (Var, Var) {
        let e = g.gather_rows(p[self.embed], labels.clone());
        let inp = g.concat_cols(x_pass, e);
        let raw = self.scale_net.forward(g, p, inp);
        let s = g.soft_clamp(raw, self.clamp);
        let t = self.translate_net.forward(g, p, inp);
        (s, t)
    }
}

impl Bijector for CouplingLayer {
    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, labels: &Arc<[usize]>) -> (Var, Option<Var>) {
        if self.active.is_empty() {
            return (x, None);
        }
        let x_pass = g.gather_cols(x, self.pass.clone());
        let x_act = g.gather_cols(x, self.active.clone());
        let (s, t) = self.scale_shift(g, p, x_pass, labels);
        let es = g.exp(s);
        let y_act = g.mul(x_act, es);
        let y_act = g.add(y_act, t);
        let joined = g.concat_cols(x_pass, y_act);
        let y = g.gather_cols(joined, self.restore.clone());
        let logdet = g.row_sum(s);
        (y, Some(logdet))
    }

    fn inverse(&self, g: &mut Graph, p: &[Var], y: Var, labels: &Arc<[usize]>) -> Var {
        if self.active.is_empty() {
            return y;
        }
        let y_pass = g.gather_cols(y, self.pass.clone());
        let y_act = g.gather_cols(y, self.active.clone());
        let (s, t) = self.scale_shift(g, p, y_pass, labels);
        let shifted = g.sub(y_act, t);
        let neg_s = g.scale(s, -1.0);
        let inv_scale = g.exp(neg_s);
        let x_act = g.mul(shifted, inv_scale);
        let joined = g.concat_cols(y_pass, x_act);
        g.gather_cols(joined, self.restore.clone())
    }
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Permutation(PermutationLayer),
    Coupling(CouplingLayer),
}

impl Bijector for FlowLayer {
    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, labels: &Arc<[usize]>) -> (Var, Option<Var>) {
        match self {
            FlowLayer::Permutation(l) => l.forward(g, p, x, labels),
            FlowLayer::Coupling(l) => l.forward(g, p, x, labels),
        }
    }

    fn inverse(&self, g: &mut Graph, p: &[Var], y: Var, labels: &Arc<[usize]>) -> Var {
        match self {
            FlowLayer::Permutation(l) => l.inverse(g, p, y, labels),
            FlowLayer::Coupling(l) => l.inverse(g, p, y, labels),
        }
    }
}
