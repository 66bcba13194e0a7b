//! Named parameters and the neural building blocks used by the model:
//! linear layers, layer normalization, GELU MLPs, and a single-head
//! temporal self-attention block.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::AdamW;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Val};
use std::collections::HashMap;

/// Index of a parameter inside a [`ParamSet`].
pub type ParamId = usize;

pub(crate) struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

/// All trainable parameters of a model, with gradient buffers and
/// optimizer state. Parameter names are unique and stable; the dynamics
/// group is addressed by name prefix.
pub struct ParamSet<S> {
    pub(crate) entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = self.entries.len();
        let shape = value.shape().to_vec();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id].grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    /// Bind a parameter as a graph leaf (cached per graph).
    pub fn bind(&self, g: &mut Graph<S>, id: ParamId) -> Val {
        g.param_leaf(id, self.entries[id].value.clone())
    }

    /// Add the last backward sweep's parameter gradients into the gradient
    /// buffers. Repeated calls accumulate.
    pub fn accumulate_from(&mut self, g: &Graph<S>) {
        for (id, grad) in g.param_grads() {
            let buf = self.entries[id].grad.data_mut();
            for (b, &dv) in buf.iter_mut().zip(grad.data()) {
                *b = *b + dv;
            }
        }
    }

    /// Backward sweep plus gradient accumulation in one call.
    pub fn backward(&mut self, g: &mut Graph<S>, loss: Val) -> Result<()> {
        g.backward(loss)?;
        self.accumulate_from(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Global L2 norm of the gradients of `ids`.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|&id| self.entries[id].grad.data().iter().map(|v| v.to_f64().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Overwrite a parameter with zeros (ablation tooling).
    pub fn zero_value(&mut self, id: ParamId) {
        self.entries[id].value.data_mut().iter_mut().for_each(|v| *v = S::zero());
    }

    /// Cast every parameter value into another scalar type, dropping
    /// optimizer state. Used to instantiate f64 replicas for gradient checks.
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.add(&e.name, e.value.cast()).expect("names unique by construction");
        }
        out
    }
}

// ---- initialization ----

/// Kaiming-uniform fan-in bound for layers feeding GELU.
pub fn kaiming_uniform<S: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<S> {
    let bound = (6.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| S::from_f64(rng.range(-bound, bound))).collect();
    Tensor::new(vec![rows, cols], data).expect("sized by construction")
}

pub fn normal_init<S: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    let data = (0..rows * cols).map(|_| S::from_f64(rng.normal() * std)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized by construction")
}

// ---- layers ----

/// Affine layer `x @ W + b` over row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = ps.add(&format!("{name}.w"), kaiming_uniform(rng, in_dim, out_dim))?;
        let b = if bias {
            Some(ps.add(&format!("{name}.b"), Tensor::zeros(vec![1, out_dim]))?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Val) -> Result<Val> {
        let w = ps.bind(g, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bv = ps.bind(g, b);
                g.add_row_vec(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize) -> Result<Self> {
        let ones = Tensor::new(vec![1, dim], vec![S::one(); dim])?;
        let gamma = ps.add(&format!("{name}.scale"), ones)?;
        let beta = ps.add(&format!("{name}.shift"), Tensor::zeros(vec![1, dim]))?;
        Ok(LayerNorm { gamma, beta, dim, eps: 1e-5 })
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Val) -> Result<Val> {
        let gamma = ps.bind(g, self.gamma);
        let beta = ps.bind(g, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Hidden-layer activation of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Gelu,
    Tanh,
}

/// MLP with an activation between layers; optional LayerNorm on the input.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub input_norm: Option<LayerNorm>,
    pub layers: Vec<Linear>,
    pub act: Act,
}

impl Mlp {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut Rng,
        name: &str,
        dims: &[usize],
        input_norm: bool,
    ) -> Result<Self> {
        Self::with_activation(ps, rng, name, dims, input_norm, Act::Gelu)
    }

    pub fn with_activation<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut Rng,
        name: &str,
        dims: &[usize],
        input_norm: bool,
        act: Act,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Param(format!("mlp {name} needs at least in/out dims")));
        }
        let norm = if input_norm { Some(LayerNorm::new(ps, &format!("{name}.norm"), dims[0])?) } else { None };
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            layers.push(Linear::new(
                ps,
                rng,
                &format!("{name}.l{i}"),
                dims[i],
                dims[i + 1],
                true,
            )?);
        }
        Ok(Mlp { input_norm: norm, layers, act })
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Val) -> Result<Val> {
        let mut h = match &self.input_norm {
            Some(norm) => norm.apply(g, ps, x)?,
            None => x,
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, ps, h)?;
            if i < last {
                h = match self.act {
                    Act::Gelu => g.gelu(h),
                    Act::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Zero the final layer so the stack starts as the zero map; used for
    /// residual-style heads that should begin inert.
    pub fn zero_init_output<S: Scalar>(&self, ps: &mut ParamSet<S>) {
        if let Some(last) = self.layers.last() {
            ps.zero_value(last.w);
            if let Some(b) = last.b {
                ps.zero_value(b);
            }
        }
    }
}

/// Single-head scaled dot-product self-attention over the time axis,
/// post-norm residual wiring, and a position-wise GELU MLP.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub dim: usize,
}

impl AttentionBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Ok(AttentionBlock {
            wq: Linear::new(ps, rng, &format!("{name}.q"), dim, dim, true)?,
            wk: Linear::new(ps, rng, &format!("{name}.k"), dim, dim, true)?,
            wv: Linear::new(ps, rng, &format!("{name}.v"), dim, dim, true)?,
            wo: Linear::new(ps, rng, &format!("{name}.out"), dim, dim, true)?,
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), dim)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), dim)?,
            ffn_in: Linear::new(ps, rng, &format!("{name}.ffn_in"), dim, ffn_hidden, true)?,
            ffn_out: Linear::new(ps, rng, &format!("{name}.ffn_out"), ffn_hidden, dim, true)?,
            dim,
        })
    }

    /// Returns `(output, attention_weights)`; output shape equals input shape.
    pub fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        x: Val,
    ) -> Result<(Val, Val)> {
        let d = g.value(x).cols();
        if d != self.dim {
            return Err(Error::Shape(format!(
                "attention block expects width {}, got {:?}",
                self.dim,
                g.value(x).shape()
            )));
        }
        let q = self.wq.apply(g, ps, x)?;
        let k = self.wk.apply(g, ps, x)?;
        let v = self.wv.apply(g, ps, x)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(scaled);
        let ctx = g.matmul(attn, v)?;
        let proj = self.wo.apply(g, ps, ctx)?;
        let res1 = g.add(x, proj)?;
        let y = self.ln_attn.apply(g, ps, res1)?;
        let h = self.ffn_in.apply(g, ps, y)?;
        let h = g.gelu(h);
        let h = self.ffn_out.apply(g, ps, h)?;
        let res2 = g.add(y, h)?;
        let out = self.ln_ffn.apply(g, ps, res2)?;
        Ok((out, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::assert_gradients;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(ps.add("w", Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn backward_accumulates_additively() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        for expect in [1.0, 2.0] {
            let mut g = Graph::new();
            let wv = ps.bind(&mut g, w);
            let loss = g.sum_all(wv);
            ps.backward(&mut g, loss).unwrap();
            for &gv in ps.grad(w).data() {
                assert_eq!(gv, expect);
            }
        }
    }

    #[test]
    fn attention_single_frame_weight_is_one() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(5);
        let block = AttentionBlock::new(&mut ps, &mut rng, "blk", 8, 16).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(normal_init(&mut rng, 1, 8, 1.0));
        let (_, attn) = block.apply(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(attn).shape(), &[1, 1]);
        assert!((g.value(attn).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(6);
        let block = AttentionBlock::new(&mut ps, &mut rng, "blk", 8, 16).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(normal_init(&mut rng, 5, 8, 1.0));
        let (out, attn) = block.apply(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(out).shape(), &[5, 8]);
        for i in 0..5 {
            let s: f64 = g.value(attn).data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
    }

    #[test]
    fn attention_without_positions_is_permutation_equivariant() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(7);
        let block = AttentionBlock::new(&mut ps, &mut rng, "blk", 6, 12).unwrap();
        let x = normal_init::<f64>(&mut rng, 4, 6, 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut px_data = Vec::new();
        for &i in &perm {
            px_data.extend_from_slice(&x.data()[i * 6..(i + 1) * 6]);
        }
        let px = Tensor::matrix(4, 6, px_data).unwrap();

        let mut g1 = Graph::new();
        let xv = g1.leaf(x);
        let (y1, _) = block.apply(&mut g1, &ps, xv).unwrap();
        let mut g2 = Graph::new();
        let pxv = g2.leaf(px);
        let (y2, _) = block.apply(&mut g2, &ps, pxv).unwrap();

        for (new_row, &old_row) in perm.iter().enumerate() {
            let a = &g1.value(y1).data()[old_row * 6..(old_row + 1) * 6];
            let b = &g2.value(y2).data()[new_row * 6..(new_row + 1) * 6];
            for (av, bv) in a.iter().zip(b) {
                assert!((av - bv).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mlp_gradients_check_out() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = Rng::new(11);
        let mlp = Mlp::new(&mut ps, &mut rng, "m", &[3, 5, 2], true).unwrap();
        let x = normal_init::<f64>(&mut rng, 4, 3, 1.0);
        // check gradient w.r.t. the input through the whole stack
        assert_gradients(&[x], |g, vars| {
            let y = mlp.apply(g, &ps, vars[0])?;
            Ok(g.sum_all(y))
        });
    }
}
