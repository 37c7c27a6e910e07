//! Pre-LN transformer block shared by the prefix mapper and the tiny LM.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::nn::{uniform_tensor, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Linear {
            w: params.add(format!("{name}.weight"), uniform_tensor(rng, &[din, dout], bound)),
            b: params.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        g.add_bias(y, p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        Norm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, name: &str, d: usize, hidden: usize, heads: usize) -> Self {
        Block {
            ln1: Norm::new(params, &format!("{name}.ln1"), d),
            q: Linear::new(params, rng, &format!("{name}.attn.q"), d, d),
            k: Linear::new(params, rng, &format!("{name}.attn.k"), d, d),
            v: Linear::new(params, rng, &format!("{name}.attn.v"), d, d),
            o: Linear::new(params, rng, &format!("{name}.attn.o"), d, d),
            ln2: Norm::new(params, &format!("{name}.ln2"), d),
            fc1: Linear::new(params, rng, &format!("{name}.mlp.fc1"), d, hidden),
            fc2: Linear::new(params, rng, &format!("{name}.mlp.fc2"), hidden, d),
            heads,
        }
    }

    /// x: [T, d] -> [T, d]. With `causal`, row i attends to rows 0..=i only.
    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var, causal: bool) -> Var {
        let d = g.shape(x)[1];
        let dh = d / self.heads;
        let h = self.ln1.apply(g, p, x);
        let q = self.q.apply(g, p, h);
        let k = self.k.apply(g, p, h);
        let v = self.v.apply(g, p, h);
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh);
            let kh = g.slice_cols(k, head * dh, dh);
            let vh = g.slice_cols(v, head * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax(s, causal);
            outs.push(g.matmul(a, vh));
        }
        let att = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let att = self.o.apply(g, p, att);
        let x = g.add(x, att);
        let h = self.ln2.apply(g, p, x);
        let h = self.fc1.apply(g, p, h);
        let h = g.gelu(h);
        let h = self.fc2.apply(g, p, h);
        g.add(x, h)
    }
}
