//! Named parameter sets and transformer building blocks.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameters with matching gradient buffers.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let grad = Tensor::zeros(tensor.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), tensor, grad });
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].tensor
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].tensor
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) {
        let i = self.index[name];
        assert_eq!(self.entries[i].tensor.shape(), tensor.shape(), "shape change on {name}");
        self.entries[i].tensor = tensor;
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Tensor::zeros(e.tensor.shape());
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// A ParamSet bound onto a graph as leaf variables, by name.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn bind(graph: &mut Graph, params: &ParamSet) -> Self {
        let mut vars = HashMap::new();
        for e in params.entries() {
            vars.insert(e.name.clone(), graph.leaf(e.tensor.clone(), true));
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Copy gradients from a finished backward pass into the ParamSet.
    pub fn write_grads(&self, grads: &crate::graph::Grads, params: &mut ParamSet) {
        for e in params.entries_mut() {
            if let Some(g) = grads.get(self.vars[&e.name]) {
                e.grad.add_assign(g);
            }
        }
    }
}

/// Glorot-normal init for dense weights: std = sqrt(2 / (fan_in + fan_out)).
pub fn init_xavier(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in = shape[0];
    let fan_out = shape[shape.len() - 1];
    init_normal(rng, shape, (2.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Truncated-normal-ish init used for projection weights.
pub fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        // Box-Muller, clipped at 3 sigma
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        data.push(z.clamp(-3.0, 3.0) * std);
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// y = x @ w + b.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.cols() != w.rows() || w.cols() != b.len() {
        return Err(Error::Shape(format!(
            "dense: x {:?} w {:?} b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor::matmul(x, w, false, false);
    let m = y.cols();
    for row in y.data_mut().chunks_mut(m) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(y)
}

pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Register the parameters of one pre-norm transformer block under `prefix`.
/// The two residual-branch output projections (attn.wo, mlp.w2) are scaled
/// down by 1/sqrt(2 * depth) so deep stacks start close to the identity.
pub fn init_block(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, depth: usize) {
    let residual_scale = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
    params.insert(&format!("{prefix}.ln1.g"), Tensor::full(&[dim], 1.0));
    params.insert(&format!("{prefix}.ln1.b"), Tensor::zeros(&[dim]));
    for w in ["wq", "wk", "wv"] {
        params.insert(&format!("{prefix}.attn.{w}"), init_xavier(rng, &[dim, dim]));
    }
    let mut wo = init_xavier(rng, &[dim, dim]);
    wo.scale_assign(residual_scale);
    params.insert(&format!("{prefix}.attn.wo"), wo);
    for b in ["bq", "bk", "bv", "bo"] {
        params.insert(&format!("{prefix}.attn.{b}"), Tensor::zeros(&[dim]));
    }
    params.insert(&format!("{prefix}.ln2.g"), Tensor::full(&[dim], 1.0));
    params.insert(&format!("{prefix}.ln2.b"), Tensor::zeros(&[dim]));
    let hidden = dim * 4;
    params.insert(&format!("{prefix}.mlp.w1"), init_xavier(rng, &[dim, hidden]));
    params.insert(&format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden]));
    let mut w2 = init_xavier(rng, &[hidden, dim]);
    w2.scale_assign(residual_scale);
    params.insert(&format!("{prefix}.mlp.w2"), w2);
    params.insert(&format!("{prefix}.mlp.b2"), Tensor::zeros(&[dim]));
}

fn layer_norm_affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Var {
    let n = g.layer_norm_rows(x);
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

fn multihead_attention(
    g: &mut Graph,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let dim = g.value(x).cols();
    if dim % heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {dim} not divisible by head count {heads}"
        )));
    }
    let dh = dim / heads;
    let q = dense(g, x, bound.var(&format!("{prefix}.attn.wq")), bound.var(&format!("{prefix}.attn.bq")));
    let k = dense(g, x, bound.var(&format!("{prefix}.attn.wk")), bound.var(&format!("{prefix}.attn.bk")));
    let v = dense(g, x, bound.var(&format!("{prefix}.attn.wv")), bound.var(&format!("{prefix}.attn.bv")));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let scores = g.matmul_t(qh, kh, false, true);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&outs);
    Ok(dense(g, cat, bound.var(&format!("{prefix}.attn.wo")), bound.var(&format!("{prefix}.attn.bo"))))
}

/// Pre-norm transformer block: x + MHA(LN(x)), then + MLP(LN(x)).
pub fn transformer_block(
    g: &mut Graph,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let n1 = layer_norm_affine(
        g,
        x,
        bound.var(&format!("{prefix}.ln1.g")),
        bound.var(&format!("{prefix}.ln1.b")),
    );
    let attn = multihead_attention(g, n1, bound, prefix, heads)?;
    let x = g.add(x, attn);
    let n2 = layer_norm_affine(
        g,
        x,
        bound.var(&format!("{prefix}.ln2.g")),
        bound.var(&format!("{prefix}.ln2.b")),
    );
    let h = dense(g, n2, bound.var(&format!("{prefix}.mlp.w1")), bound.var(&format!("{prefix}.mlp.b1")));
    let h = g.gelu(h);
    let mlp = dense(g, h, bound.var(&format!("{prefix}.mlp.w2")), bound.var(&format!("{prefix}.mlp.b2")));
    Ok(g.add(x, mlp))
}

/// Final layer norm with affine parameters stored as `<prefix>.g` / `<prefix>.b`.
pub fn final_norm(g: &mut Graph, x: Var, bound: &BoundParams, prefix: &str) -> Var {
    layer_norm_affine(g, x, bound.var(&format!("{prefix}.g")), bound.var(&format!("{prefix}.b")))
}

/// Convenience: run one block outside a training loop.
pub fn transformer_block_forward(
    tokens: &Tensor,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let x = g.constant(tokens.clone());
    let y = transformer_block(&mut g, x, &bound, prefix, heads)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_weight() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::zeros(&[2]);
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_hand_sum() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let w = Tensor::from_rows(&[vec![2.0], vec![3.0]]);
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn dense_random_against_triple_loop() {
        let mut rng = seeded_rng(7);
        let x = init_normal(&mut rng, &[3, 4], 1.0);
        let w = init_normal(&mut rng, &[4, 2], 1.0);
        let b = init_normal(&mut rng, &[2], 1.0);
        let y = dense_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for k in 0..4 {
                    acc += x.data()[i * 4 + k] * w.data()[k * 2 + j];
                }
                assert!((y.data()[i * 2 + j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dense_shape_mismatch_errors() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(dense_forward(&x, &w, &b).is_err());
    }

    fn block_params(dim: usize, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        let mut rng = seeded_rng(seed);
        init_block(&mut p, &mut rng, "blk", dim, 1);
        p
    }

    #[test]
    fn single_token_block_is_finite() {
        let p = block_params(8, 3);
        let x = Tensor::full(&[1, 8], 0.3);
        let y = transformer_block_forward(&x, &p, "blk", 2).unwrap();
        assert!(y.all_finite());
        assert_eq!(y.shape(), &[1, 8]);
    }

    #[test]
    fn head_count_mismatch_is_config_error() {
        let p = block_params(8, 3);
        let x = Tensor::full(&[2, 8], 0.1);
        assert!(transformer_block_forward(&x, &p, "blk", 3).is_err());
    }

    #[test]
    fn zero_output_projections_make_identity() {
        let mut p = block_params(8, 4);
        p.set("blk.attn.wo", Tensor::zeros(&[8, 8]));
        p.set("blk.mlp.w2", Tensor::zeros(&[32, 8]));
        let mut rng = seeded_rng(5);
        let x = init_normal(&mut rng, &[4, 8], 1.0);
        let y = transformer_block_forward(&x, &p, "blk", 2).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let p = block_params(8, 9);
        let mut rng = seeded_rng(11);
        let x = init_normal(&mut rng, &[5, 8], 1.0);
        let y = transformer_block_forward(&x, &p, "blk", 2).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = Tensor::zeros(&[5, 8]);
        for (dst, &src) in perm.iter().enumerate() {
            xp.data_mut()[dst * 8..(dst + 1) * 8].copy_from_slice(&x.data()[src * 8..(src + 1) * 8]);
        }
        let yp = transformer_block_forward(&xp, &p, "blk", 2).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!(
                    (yp.data()[dst * 8 + j] - y.data()[src * 8 + j]).abs() < 1e-9,
                    "token permutation changed outputs"
                );
            }
        }
    }
}
