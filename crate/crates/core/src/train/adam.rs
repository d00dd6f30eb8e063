use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self { m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Advances the step counter; call once before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected update of tensor `index` (decoupled weight decay).
    pub fn update(&mut self, index: usize, param: &mut Matrix<T>, grad: &Matrix<T>, cfg: &AdamConfig) -> Result<()> {
        let m = self
            .m
            .get_mut(index)
            .ok_or_else(|| Error::dim("adam_step", format!("no state for tensor {index}")))?;
        let v = &mut self.v[index];
        if param.shape() != m.shape() || grad.shape() != m.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("state {:?}, param {:?}, grad {:?}", m.shape(), param.shape(), grad.shape()),
            ));
        }
        if self.t == 0 {
            return Err(Error::Numerical("adam update before begin_step".into()));
        }
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let one = T::one();
        let c1 = one - b1.powi(self.t as i32);
        let c2 = one - b2.powi(self.t as i32);
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let wd = T::lit(cfg.weight_decay);
        let iter = param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (mi, vi)) in iter {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
        }
        Ok(())
    }
}

/// One Adam step over a slice of tensors.
pub fn adam_step<T: Scalar>(params: &mut [Matrix<T>], grads: &[Matrix<T>], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} params, {} grads, {} states", params.len(), grads.len(), state.len()),
        ));
    }
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p, g, cfg)?;
    }
    Ok(())
}

/// Scales `grads` so their joint Frobenius norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = vec![Matrix::<f64>::from_rows(&[[1.0, -2.0]]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new([(1, 2)]);
        for _ in 0..5 {
            adam_step(&mut p, &[Matrix::zeros(1, 2)], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let cfg = AdamConfig::default();
        for g in [3.0, -0.25, 1e-3] {
            let mut p = vec![Matrix::scalar(0.5f64)];
            let mut st = AdamState::new([(1, 1)]);
            adam_step(&mut p, &[Matrix::scalar(g)], &mut st, &cfg).unwrap();
            let expected = 0.5 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0].get(0, 0) - expected).abs() < 1e-15);
            assert!(((0.5 - p[0].get(0, 0)) / cfg.lr - g.signum()).abs() < 1e-4);
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut p = vec![Matrix::<f64>::from_rows(&[[0.3, 0.1], [-0.2, 0.9]]).unwrap()];
            let mut st = AdamState::new([(2, 2)]);
            for k in 0..20 {
                let g = p[0].map(|v| v * 2.0 + k as f64 * 0.01);
                adam_step(&mut p, &[g], &mut st, &AdamConfig::default()).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut p = vec![Matrix::<f64>::from_rows(&[[2.0, -3.0]]).unwrap()];
        let mut st = AdamState::new([(1, 2)]);
        for _ in 0..2000 {
            let g = p[0].scale(2.0);
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
        }
        assert!(p[0].max_abs() < 1e-3, "{:?}", p[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Matrix::<f64>::zeros(2, 2)];
        let mut st = AdamState::new([(2, 2)]);
        assert!(adam_step(&mut p, &[Matrix::zeros(1, 2)], &mut st, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut p, &[], &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::<f64>::from_rows(&[[3.0, 4.0]]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15);
        let mut g = vec![Matrix::<f64>::from_rows(&[[0.3, 0.4]]).unwrap()];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g[0].get(0, 1), 0.4);
    }
}
