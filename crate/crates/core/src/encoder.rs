//! Per-modality MLP encoders with a linear or MLP projection head.
//!
//! ```text
//! obs ─▶ [Dense ─▶ act] × hidden ─▶ head ─▶ l2-normalize ─▶ embedding
//! head = Dense(in, d)                                 (linear)
//!      | Dense(in, in) ─▶ GELU ─▶ Dense(in, d)        (mlp)
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, NORM_EPS};
use crate::rng::Stream;

/// Rows are unit-norm embeddings in the joint space.
pub type EmbeddingBatch = Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    pub head: HeadKind,
    pub activation: Activation,
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out, activation)` for every dense layer in order.
    fn layer_plan(&self) -> Vec<(usize, usize, Option<Activation>)> {
        let mut plan = Vec::new();
        let mut width = self.input_dim;
        for &h in &self.hidden_widths {
            plan.push((width, h, Some(self.activation)));
            width = h;
        }
        if self.head == HeadKind::Mlp {
            plan.push((width, width, Some(Activation::Gelu)));
        }
        plan.push((width, self.embed_dim, None));
        plan
    }
}

/// `y = x W + b` with `W` stored `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }
}

/// Parameters (or gradients, or optimizer moments) of one encoder, laid
/// out layer by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub layers: Vec<Dense>,
}

/// A contiguous parameter slice and whether weight decay applies to it.
pub struct Block<'a> {
    pub values: &'a mut [f64],
    pub decay: bool,
}

impl EncoderWeights {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Weight matrices decay, biases do not.
    pub fn blocks_mut(&mut self) -> Vec<Block<'_>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(Block {
                values: l.weight.data_mut(),
                decay: true,
            });
            out.push(Block {
                values: &mut l.bias,
                decay: false,
            });
        }
        out
    }

    /// Read-only counterpart of [`blocks_mut`](Self::blocks_mut), same order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(&l.bias[..]);
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut rest = flat;
        for block in self.blocks_mut() {
            let (head, tail) = rest.split_at(block.values.len());
            block.values.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.sum_squares() + l.bias.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for block in self.blocks_mut() {
            block.values.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn same_shape(&self, other: &EncoderWeights) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub arch: EncoderArch,
    pub weights: EncoderWeights,
    /// Frozen encoders produce zero gradients and are never updated.
    pub frozen: bool,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each dense layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each dense layer.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    /// Head output before normalization.
    pub fn pre_norm(&self) -> &Matrix {
        self.pre.last().expect("at least one layer")
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_encoder(arch: &EncoderArch, seed: u64) -> Result<EncoderParams> {
    arch.validate()?;
    let mut stream = Stream::new(seed, "encoder/init");
    let layers = arch
        .layer_plan()
        .into_iter()
        .map(|(fan_in, fan_out, _)| {
            let a = numerics::sqrt(6.0 / (fan_in + fan_out) as f64);
            let data = (0..fan_in * fan_out).map(|_| stream.uniform(-a, a)).collect();
            Dense {
                weight: Matrix::from_vec(fan_in, fan_out, data).expect("finite init"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(EncoderParams {
        arch: arch.clone(),
        weights: EncoderWeights { layers },
        frozen: false,
    })
}

impl EncoderParams {
    /// Checks that the weights match the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let plan = self.arch.layer_plan();
        let ok = plan.len() == self.weights.layers.len()
            && plan.iter().zip(&self.weights.layers).all(|(&(i, o, _), l)| {
                l.weight.shape() == (i, o) && l.bias.len() == o
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("encoder weights do not match architecture".into()))
        }
    }
}

/// Encodes `obs` into unit-norm embeddings.
pub fn encode(params: &EncoderParams, obs: &Matrix) -> Result<(EmbeddingBatch, ForwardCache)> {
    if obs.cols() != params.arch.input_dim {
        return Err(Error::Shape(format!(
            "encoder expects {} input features, got {}",
            params.arch.input_dim,
            obs.cols()
        )));
    }
    let plan = params.arch.layer_plan();
    let mut inputs = Vec::with_capacity(plan.len());
    let mut pre = Vec::with_capacity(plan.len());
    let mut h = obs.clone();
    for (layer, &(_, _, act)) in params.weights.layers.iter().zip(&plan) {
        let mut a = numerics::matmul(&h, &layer.weight)?;
        a.add_row_vector(&layer.bias);
        let next = match act {
            Some(Activation::Gelu) => numerics::gelu_forward(&a),
            Some(Activation::Tanh) => numerics::tanh_forward(&a),
            None => a.clone(),
        };
        inputs.push(h);
        pre.push(a);
        h = next;
    }
    let emb = numerics::l2_normalize_rows(&h, NORM_EPS);
    Ok((emb, ForwardCache { inputs, pre }))
}

/// [`encode`] without keeping the cache.
pub fn embed(params: &EncoderParams, obs: &Matrix) -> Result<EmbeddingBatch> {
    encode(params, obs).map(|(e, _)| e)
}

/// Gradients of `Σ grad_embeddings ⊙ embeddings` with respect to every
/// parameter. Frozen encoders get an all-zero result.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_embeddings: &Matrix,
) -> Result<EncoderWeights> {
    let mut grads = params.weights.zeros_like();
    if params.frozen {
        return Ok(grads);
    }
    if cache.pre.len() != params.weights.layers.len() {
        return Err(Error::Shape("cache does not match encoder depth".into()));
    }
    let pre_norm = cache.pre_norm();
    if grad_embeddings.shape() != pre_norm.shape() {
        return Err(Error::Shape(format!(
            "embedding gradient {:?} vs embeddings {:?}",
            grad_embeddings.shape(),
            pre_norm.shape()
        )));
    }
    let plan = params.arch.layer_plan();
    let mut g = numerics::l2_normalize_rows_backward(pre_norm, grad_embeddings, NORM_EPS)?;
    for idx in (0..plan.len()).rev() {
        g = match plan[idx].2 {
            Some(Activation::Gelu) => numerics::gelu_backward(&cache.pre[idx], &g)?,
            Some(Activation::Tanh) => numerics::tanh_backward(&cache.pre[idx], &g)?,
            None => g,
        };
        grads.layers[idx].weight = numerics::matmul_tn(&cache.inputs[idx], &g)?;
        grads.layers[idx].bias = g.column_sums();
        if idx > 0 {
            g = numerics::matmul_nt(&g, &params.weights.layers[idx].weight)?;
        }
    }
    Ok(grads)
}

/// Shape check shared by optimizer code.
pub(crate) fn check_same_shape(a: &EncoderWeights, b: &EncoderWeights) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape("parameter blocks differ in shape".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(hidden: &[usize], head: HeadKind) -> EncoderArch {
        EncoderArch {
            input_dim: 6,
            hidden_widths: hidden.to_vec(),
            embed_dim: 5,
            head,
            activation: Activation::Gelu,
        }
    }

    fn obs(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = Stream::new(seed, "test/obs");
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| s.normal()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = arch(&[7], HeadKind::Mlp);
        let p = init_encoder(&a, 4).unwrap();
        assert_eq!(p, init_encoder(&a, 4).unwrap());
        assert_ne!(p, init_encoder(&a, 5).unwrap());
        assert!(p.weights.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(p.weights.layers.len(), 3);
        p.validate().unwrap();
    }

    #[test]
    fn init_variance_matches_uniform_moment() {
        let a = EncoderArch {
            input_dim: 256,
            hidden_widths: vec![],
            embed_dim: 256,
            head: HeadKind::Linear,
            activation: Activation::Gelu,
        };
        let p = init_encoder(&a, 1).unwrap();
        let w = p.weights.layers[0].weight.data();
        let bound2 = 6.0 / 512.0;
        let expected = bound2 / 3.0;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        assert!((var - expected).abs() <= 0.2 * expected, "{var} vs {expected}");
    }

    #[test]
    fn embeddings_are_unit_norm() {
        for (hidden, head) in [(vec![], HeadKind::Linear), (vec![8], HeadKind::Linear), (vec![8, 4], HeadKind::Mlp)] {
            let p = init_encoder(&arch(&hidden, head), 2).unwrap();
            let (e, _) = encode(&p, &obs(9, 6, 3)).unwrap();
            for r in e.iter_rows() {
                assert!((numerics::norm(r) - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_head_reproduces_normalized_input() {
        let a = EncoderArch {
            input_dim: 4,
            hidden_widths: vec![],
            embed_dim: 4,
            head: HeadKind::Linear,
            activation: Activation::Tanh,
        };
        let mut p = init_encoder(&a, 0).unwrap();
        p.weights.layers[0].weight = Matrix::identity(4);
        let x = obs(5, 4, 1);
        let e = embed(&p, &x).unwrap();
        assert!(e.max_abs_diff(&numerics::l2_normalize_rows(&x, NORM_EPS)) < 1e-15);
    }

    #[test]
    fn linear_encoder_is_scale_invariant() {
        let p = init_encoder(&arch(&[], HeadKind::Linear), 8).unwrap();
        let x = obs(1, 6, 2);
        let e1 = embed(&p, &x).unwrap();
        let e2 = embed(&p, &x.scale(2.0)).unwrap();
        assert!(e1.max_abs_diff(&e2) < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = init_encoder(&arch(&[], HeadKind::Linear), 8).unwrap();
        assert!(matches!(encode(&p, &obs(2, 5, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_and_zero_upstream_give_zero_gradients() {
        let mut p = init_encoder(&arch(&[8], HeadKind::Mlp), 3).unwrap();
        let x = obs(4, 6, 4);
        let (_, cache) = encode(&p, &x).unwrap();
        let up = obs(4, 5, 5);
        let zero = p.weights.zeros_like();
        assert_eq!(encode_backward(&p, &cache, &Matrix::zeros(4, 5)).unwrap(), zero);
        assert_ne!(encode_backward(&p, &cache, &up).unwrap(), zero);
        p.frozen = true;
        assert_eq!(encode_backward(&p, &cache, &up).unwrap(), zero);
    }

    #[test]
    fn backward_rejects_wrong_gradient_shape() {
        let p = init_encoder(&arch(&[8], HeadKind::Linear), 3).unwrap();
        let (_, cache) = encode(&p, &obs(4, 6, 4)).unwrap();
        assert!(encode_backward(&p, &cache, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (hidden, head) in [(vec![], HeadKind::Linear), (vec![7], HeadKind::Linear), (vec![7], HeadKind::Mlp)] {
            for act in [Activation::Gelu, Activation::Tanh] {
                let mut a = arch(&hidden, head);
                a.activation = act;
                let p = init_encoder(&a, 6).unwrap();
                let x = obs(4, 6, 7);
                let up = obs(4, 5, 8);
                let (_, cache) = encode(&p, &x).unwrap();
                let g = encode_backward(&p, &cache, &up).unwrap();
                let flat = Matrix::from_vec(1, p.weights.num_params(), p.weights.flatten()).unwrap();
                let analytic = Matrix::from_vec(1, g.num_params(), g.flatten()).unwrap();
                let loss = |m: &Matrix| {
                    let mut q = p.clone();
                    q.weights.assign_flat(m.data()).unwrap();
                    numerics::dot(embed(&q, &x).unwrap().data(), up.data())
                };
                let r = numerics::finite_difference_check(loss, &flat, &analytic, 1e-6).unwrap();
                assert!(r.max_rel_error <= 1e-4, "{hidden:?} {head:?} {act:?}: {r:?}");
            }
        }
    }

    #[test]
    fn flatten_round_trips() {
        let p = init_encoder(&arch(&[3], HeadKind::Mlp), 9).unwrap();
        let mut q = p.clone();
        q.weights = q.weights.zeros_like();
        q.weights.assign_flat(&p.weights.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(q.weights.assign_flat(&[1.0]).is_err());
    }
}
