//! InfoNCE with in-batch negatives, its symmetric form, and an ℓ2
//! regression alternative, each with exact gradients.
//!
//! For hub embeddings `q` and spoke embeddings `k` (both `n × d`), the
//! one-directional loss is the mean over rows of
//!
//! ```text
//! −log( exp(qᵢ·kᵢ/τ) / Σⱼ exp(qᵢ·kⱼ/τ) )
//! ```
//!
//! where the sum runs over the positive and every other `kⱼ` in the batch.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};

pub const DEFAULT_TAU_MIN: f64 = 0.01;
pub const DEFAULT_TAU_MAX: f64 = 5.0;
/// Initial value for a learnable temperature.
pub const LEARNABLE_TAU_INIT: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureMode {
    Fixed,
    Learnable,
}

/// Softmax temperature. A learnable temperature is trained through
/// `log_tau` and always clamped into `[clamp_min, clamp_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureParam {
    pub mode: TemperatureMode,
    pub value: f64,
    pub log_tau: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl TemperatureParam {
    pub fn fixed(tau: f64) -> Self {
        Self::new(TemperatureMode::Fixed, tau)
    }

    pub fn learnable(init: f64) -> Self {
        Self::new(TemperatureMode::Learnable, init)
    }

    fn new(mode: TemperatureMode, tau: f64) -> Self {
        let mut t = Self {
            mode,
            value: tau,
            log_tau: numerics::ln(tau),
            clamp_min: DEFAULT_TAU_MIN,
            clamp_max: DEFAULT_TAU_MAX,
        };
        t.set_tau(tau);
        t
    }

    /// Sets `τ` directly, clamped into range. Unlike [`Self::set_log_tau`]
    /// an in-range value is kept exactly.
    pub fn set_tau(&mut self, tau: f64) {
        self.value = tau.clamp(self.clamp_min, self.clamp_max);
        self.log_tau = numerics::ln(self.value);
    }

    pub fn tau(&self) -> f64 {
        self.value
    }

    pub fn is_learnable(&self) -> bool {
        self.mode == TemperatureMode::Learnable
    }

    /// Sets `log_tau`, clamping `τ` into range.
    pub fn set_log_tau(&mut self, log_tau: f64) {
        let lo = numerics::ln(self.clamp_min);
        let hi = numerics::ln(self.clamp_max);
        self.log_tau = log_tau.clamp(lo, hi);
        self.value = numerics::exp(self.log_tau).clamp(self.clamp_min, self.clamp_max);
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.clamp_min > 0.0
            && self.clamp_min <= self.clamp_max
            && self.value.is_finite()
            && (self.clamp_min..=self.clamp_max).contains(&self.value);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "temperature {} outside [{}, {}]",
                self.value, self.clamp_min, self.clamp_max
            )))
        }
    }
}

/// A loss value with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_q: Matrix,
    pub grad_k: Matrix,
    /// Zero unless the temperature is learnable.
    pub grad_log_tau: f64,
}

impl LossOutput {
    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &LossOutput, b: f64) -> Result<LossOutput> {
        Ok(LossOutput {
            loss: a * self.loss + b * other.loss,
            grad_q: self.grad_q.scale(a).add(&other.grad_q.scale(b))?,
            grad_k: self.grad_k.scale(a).add(&other.grad_k.scale(b))?,
            grad_log_tau: a * self.grad_log_tau + b * other.grad_log_tau,
        })
    }
}

fn check_pair(q: &Matrix, k: &Matrix) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::Shape(format!(
            "query batch {:?} vs key batch {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if q.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// `(i, j) ↦ qᵢ·kⱼ`.
pub fn similarity_matrix(q: &EmbeddingBatch, k: &EmbeddingBatch) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(Error::Shape(format!(
            "similarity of {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    numerics::matmul_nt(q, k)
}

/// One-directional InfoNCE, mean-reduced over the batch.
pub fn info_nce(
    q: &EmbeddingBatch,
    k: &EmbeddingBatch,
    temp: &TemperatureParam,
) -> Result<LossOutput> {
    check_pair(q, k)?;
    let n = q.rows();
    let tau = temp.tau();
    let logits = similarity_matrix(q, k)?.scale(1.0 / tau);

    let mut loss = 0.0;
    for i in 0..n {
        loss += numerics::log_sum_exp(logits.row(i)) - logits.get(i, i);
    }
    loss /= n as f64;

    // dL/dlogits = (softmax − I) / n
    let mut g = numerics::softmax_rows(&logits);
    for i in 0..n {
        let v = g.get(i, i) - 1.0;
        g.set(i, i, v);
    }
    let g = g.scale(1.0 / n as f64);

    let grad_log_tau = if temp.is_learnable() {
        // ∂logits/∂logτ = −logits
        -numerics::dot(g.data(), logits.data())
    } else {
        0.0
    };
    let grad_q = numerics::matmul(&g, k)?.scale(1.0 / tau);
    let grad_k = numerics::matmul_tn(&g, q)?.scale(1.0 / tau);
    Ok(LossOutput {
        loss,
        grad_q,
        grad_k,
        grad_log_tau,
    })
}

/// `info_nce(q, k) + info_nce(k, q)`.
pub fn symmetric_info_nce(
    q: &EmbeddingBatch,
    k: &EmbeddingBatch,
    temp: &TemperatureParam,
) -> Result<LossOutput> {
    let forward = info_nce(q, k, temp)?;
    let backward = info_nce(k, q, temp)?;
    Ok(LossOutput {
        loss: forward.loss + backward.loss,
        grad_q: forward.grad_q.add(&backward.grad_k)?,
        grad_k: forward.grad_k.add(&backward.grad_q)?,
        grad_log_tau: forward.grad_log_tau + backward.grad_log_tau,
    })
}

/// Mean squared distance between paired rows.
pub fn l2_regression_loss(q: &EmbeddingBatch, k: &EmbeddingBatch) -> Result<LossOutput> {
    check_pair(q, k)?;
    let n = q.rows() as f64;
    let diff = q.add(&k.scale(-1.0))?;
    let loss = diff.sum_squares() / n;
    let grad_q = diff.scale(2.0 / n);
    let grad_k = diff.scale(-2.0 / n);
    Ok(LossOutput {
        loss,
        grad_q,
        grad_k,
        grad_log_tau: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, l2_normalize_rows, NORM_EPS};
    use crate::rng::Stream;
    use alloc::vec::Vec;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut s = Stream::new(seed, "test/emb");
        let m = Matrix::from_vec(n, d, (0..n * d).map(|_| s.normal()).collect()).unwrap();
        l2_normalize_rows(&m, NORM_EPS)
    }

    /// Direct evaluation of the per-row fraction, no max subtraction.
    fn oracle(q: &Matrix, k: &Matrix, tau: f64) -> f64 {
        let n = q.rows();
        let mut total = 0.0;
        for i in 0..n {
            let mut pos = 0.0;
            let mut denom = 0.0;
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..q.cols() {
                    s += q.get(i, c) * k.get(j, c);
                }
                let e = libm::exp(s / tau);
                if i == j {
                    pos = e;
                }
                denom += e;
            }
            total += -libm::log(pos / denom);
        }
        total / n as f64
    }

    #[test]
    fn similarity_examples() {
        let eye = Matrix::identity(3);
        assert_eq!(similarity_matrix(&eye, &eye).unwrap(), eye);
        let q = unit_rows(4, 6, 1);
        let s = similarity_matrix(&q, &q).unwrap();
        for i in 0..4 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-12);
        }
        let k = unit_rows(4, 6, 2);
        let s = similarity_matrix(&q, &k).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut d = 0.0;
                for c in 0..6 {
                    d += q.get(i, c) * k.get(j, c);
                }
                assert!((s.get(i, j) - d).abs() < 1e-12);
                assert!(s.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
        assert!(similarity_matrix(&q, &unit_rows(3, 6, 1)).is_err());
    }

    #[test]
    fn single_row_has_zero_loss() {
        let q = unit_rows(1, 4, 3);
        let k = unit_rows(1, 4, 4);
        let out = info_nce(&q, &k, &TemperatureParam::fixed(0.07)).unwrap();
        assert_eq!(out.loss, 0.0);
        let sym = symmetric_info_nce(&q, &k, &TemperatureParam::learnable(0.07)).unwrap();
        assert_eq!(sym.loss, 0.0);
    }

    #[test]
    fn orthonormal_batch_closed_form() {
        let eye = Matrix::identity(3);
        let out = info_nce(&eye, &eye, &TemperatureParam::fixed(1.0)).unwrap();
        let e = core::f64::consts::E;
        let expected = oracle(&eye, &eye, 1.0);
        assert!((expected + libm::log(e / (e + 2.0))).abs() < 1e-12);
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_on_random_batches() {
        for seed in 0..20 {
            let n = 1 + seed as usize % 8;
            let q = unit_rows(n, 7, seed);
            let k = unit_rows(n, 7, seed + 100);
            for tau in [0.05, 0.07, 0.2, 1.0] {
                let out = info_nce(&q, &k, &TemperatureParam::fixed(tau)).unwrap();
                assert!((out.loss - oracle(&q, &k, tau)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let q = unit_rows(4, 8, 5);
        let k = unit_rows(4, 8, 6);
        for temp in [TemperatureParam::fixed(0.2), TemperatureParam::learnable(0.3)] {
            let out = info_nce(&q, &k, &temp).unwrap();
            let rq = finite_difference_check(
                |m| info_nce(m, &k, &temp).unwrap().loss,
                &q,
                &out.grad_q,
                1e-6,
            )
            .unwrap();
            let rk = finite_difference_check(
                |m| info_nce(&q, m, &temp).unwrap().loss,
                &k,
                &out.grad_k,
                1e-6,
            )
            .unwrap();
            assert!(rq.max_rel_error <= 1e-6, "{rq:?}");
            assert!(rk.max_rel_error <= 1e-6, "{rk:?}");
        }
        let temp = TemperatureParam::learnable(0.3);
        let out = info_nce(&q, &k, &temp).unwrap();
        let p = Matrix::from_vec(1, 1, alloc::vec![temp.log_tau]).unwrap();
        let g = Matrix::from_vec(1, 1, alloc::vec![out.grad_log_tau]).unwrap();
        let r = finite_difference_check(
            |m| {
                let mut t = temp;
                t.set_log_tau(m.get(0, 0));
                info_nce(&q, &k, &t).unwrap().loss
            },
            &p,
            &g,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn fixed_temperature_has_zero_tau_gradient() {
        let q = unit_rows(5, 4, 7);
        let k = unit_rows(5, 4, 8);
        let out = symmetric_info_nce(&q, &k, &TemperatureParam::fixed(0.1)).unwrap();
        assert_eq!(out.grad_log_tau, 0.0);
    }

    #[test]
    fn symmetric_is_sum_of_directions_and_swaps_roles() {
        let q = unit_rows(6, 5, 9);
        let k = unit_rows(6, 5, 10);
        let t = TemperatureParam::fixed(0.2);
        let a = symmetric_info_nce(&q, &k, &t).unwrap();
        let b = symmetric_info_nce(&k, &q, &t).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert!(a.grad_q.max_abs_diff(&b.grad_k) < 1e-12);
        assert!(a.grad_k.max_abs_diff(&b.grad_q) < 1e-12);
        let expected = oracle(&q, &k, 0.2) + oracle(&k, &q, 0.2);
        assert!((a.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_alignment_loss_falls_with_temperature() {
        let eye = Matrix::identity(4);
        let losses: Vec<f64> = [1.0, 0.2, 0.05]
            .iter()
            .map(|&t| info_nce(&eye, &eye, &TemperatureParam::fixed(t)).unwrap().loss)
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2] && losses[2] >= 0.0);
    }

    #[test]
    fn empty_and_mismatched_batches_error() {
        let t = TemperatureParam::fixed(0.1);
        assert!(info_nce(&Matrix::zeros(0, 3), &Matrix::zeros(0, 3), &t).is_err());
        assert!(info_nce(&unit_rows(2, 3, 1), &unit_rows(3, 3, 1), &t).is_err());
        assert!(l2_regression_loss(&unit_rows(2, 3, 1), &unit_rows(2, 4, 1)).is_err());
    }

    #[test]
    fn l2_regression_examples() {
        let q = unit_rows(5, 6, 11);
        assert_eq!(l2_regression_loss(&q, &q).unwrap().loss, 0.0);
        let k = unit_rows(5, 6, 12);
        let out = l2_regression_loss(&q, &k).unwrap();
        let s = similarity_matrix(&q, &k).unwrap();
        let expected = (0..5).map(|i| 2.0 - 2.0 * s.get(i, i)).sum::<f64>() / 5.0;
        assert!((out.loss - expected).abs() < 1e-12);
        let rq = finite_difference_check(
            |m| l2_regression_loss(m, &k).unwrap().loss,
            &q,
            &out.grad_q,
            1e-5,
        )
        .unwrap();
        let rk = finite_difference_check(
            |m| l2_regression_loss(&q, m).unwrap().loss,
            &k,
            &out.grad_k,
            1e-5,
        )
        .unwrap();
        assert!(rq.max_rel_error <= 1e-8 && rk.max_rel_error <= 1e-8, "{rq:?} {rk:?}");
    }

    #[test]
    fn temperature_clamps() {
        let mut t = TemperatureParam::learnable(0.07);
        t.set_log_tau(-100.0);
        assert_eq!(t.tau(), DEFAULT_TAU_MIN);
        t.set_log_tau(100.0);
        assert_eq!(t.tau(), DEFAULT_TAU_MAX);
        assert!((TemperatureParam::learnable(0.07).tau() - 0.07).abs() < 1e-15);
        t.validate().unwrap();
    }
}
