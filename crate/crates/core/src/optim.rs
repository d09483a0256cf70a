//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::encoder::{check_same_shape, EncoderWeights};
use crate::error::{Error, Result};
use crate::numerics;

pub const DEFAULT_ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update of `params` in place.
///
/// `step` is the 1-based count of updates this parameter block has
/// received, used for bias correction. With `decay = false` the weight
/// decay term is skipped.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hp: &AdamWHyper,
    step: u64,
    decay: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(Error::Shape(format!(
            "adamw: params {} grads {} m {} v {}",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if !(hp.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be positive", hp.lr)));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adamw step count starts at 1".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    let bc1 = 1.0 - libm::pow(hp.beta1, step as f64);
    let bc2 = 1.0 - libm::pow(hp.beta2, step as f64);
    let shrink = if decay { 1.0 - hp.lr * hp.weight_decay } else { 1.0 };
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] = params[i] * shrink - hp.lr * m_hat / (numerics::sqrt(v_hat) + hp.eps);
    }
    Ok(())
}

/// First and second moments for one encoder plus its update count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: EncoderWeights,
    pub v: EncoderWeights,
    pub updates: u64,
}

impl AdamMoments {
    pub fn zeros_like(w: &EncoderWeights) -> Self {
        Self {
            m: w.zeros_like(),
            v: w.zeros_like(),
            updates: 0,
        }
    }
}

/// AdamW over every block of an encoder. Biases are not decayed.
pub fn adamw_encoder(
    params: &mut EncoderWeights,
    grads: &EncoderWeights,
    moments: &mut AdamMoments,
    hp: &AdamWHyper,
) -> Result<()> {
    check_same_shape(params, grads)?;
    check_same_shape(params, &moments.m)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("encoder gradient".into()));
    }
    moments.updates += 1;
    let step = moments.updates;
    let grad_blocks = grads.slices();
    let m_blocks = moments.m.blocks_mut();
    let v_blocks = moments.v.blocks_mut();
    for (((p, g), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grad_blocks)
        .zip(m_blocks)
        .zip(v_blocks)
    {
        adamw_step(p.values, g, m.values, v.values, hp, step, p.decay)?;
    }
    Ok(())
}

/// Rescales every slice so their joint ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm {max_norm} must be positive")));
    }
    let total: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = numerics::sqrt(total);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn hp(lr: f64, wd: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: DEFAULT_ADAM_EPS,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = vec![1.0, -2.0, 0.5];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        for step in 1..=5 {
            adamw_step(&mut p, &[0.0; 3], &mut m, &mut v, &hp(0.1, 0.0), step, true).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.05; bias correction gives m̂ = v̂ = 1, so the update
        // is lr · 1 / (1 + eps).
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_step(&mut p, &[1.0], &mut m, &mut v, &hp(0.1, 0.0), 1, true).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + DEFAULT_ADAM_EPS);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_in_isolation() {
        let mut p = vec![2.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for step in 1..=3 {
            adamw_step(&mut p, &[0.0], &mut m, &mut v, &hp(0.1, 0.1), step, true).unwrap();
        }
        assert!((p[0] - 2.0 * 0.99f64.powi(3)).abs() < 1e-15);
        let mut q = vec![2.0];
        adamw_step(&mut q, &[0.0], &mut m, &mut v, &hp(0.1, 0.1), 4, false).unwrap();
        assert_eq!(q[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut p = vec![1.0, 1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let err = adamw_step(&mut p, &[0.5, f64::NAN], &mut m, &mut v, &hp(0.1, 0.0), 1, true);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(m, vec![0.0, 0.0]);
    }

    #[test]
    fn clip_examples() {
        let mut a = vec![0.3, 0.4];
        let norm = clip_global_norm(&mut [&mut a[..]], 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(a, vec![0.3, 0.4]);

        let mut a = vec![6.0, 0.0];
        let mut b = vec![0.0, 8.0];
        let before: Vec<f64> = a.iter().chain(&b).copied().collect();
        clip_global_norm(&mut [&mut a[..], &mut b[..]], 1.0).unwrap();
        let after: Vec<f64> = a.iter().chain(&b).copied().collect();
        let n = numerics::norm(&after);
        assert!((n - 1.0).abs() < 1e-10);
        let cos = numerics::dot(&before, &after) / (numerics::norm(&before) * n);
        assert!((cos - 1.0).abs() < 1e-12);
        assert!(clip_global_norm(&mut [&mut a[..]], 0.0).is_err());
    }
}
