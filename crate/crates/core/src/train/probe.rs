use super::adam::{AdamConfig, AdamState};
use super::task::ProbeData;
use crate::adapters::{self, AdapterKind, AdapterSpec, AdapterState};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::kron::singular_values;
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport<T: Scalar> {
    pub train_mse: f64,
    pub eval_mse: f64,
    /// Training MSE before each step, then after the last one.
    pub history: Vec<f64>,
    pub state: AdapterState<T>,
}

fn probe_mse<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>, w: &Matrix<T>, state: &AdapterState<T>, spec: &AdapterSpec) -> Result<f64> {
    let pred = match spec.kind {
        AdapterKind::Krona => adapters::krona_forward(x, w, state, spec)?,
        _ => adapters::lora_forward(x, w, state, spec)?,
    };
    let diff = pred.sub(y)?;
    Ok(diff.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / diff.len() as f64)
}

/// Fits a weight-parallel adapter beside the frozen probe weight by
/// full-batch Adam on the mean squared error.
pub fn fit_probe<T: Scalar>(data: &ProbeData<T>, spec: &AdapterSpec, cfg: &ProbeConfig) -> Result<ProbeReport<T>> {
    if !matches!(spec.kind, AdapterKind::Krona | AdapterKind::Lora) {
        return Err(Error::InvalidSpec(format!("the probe fits krona or lora, not {}", spec.kind)));
    }
    let d = data.w.rows();
    let mut state: AdapterState<T> = adapters::init_adapter(spec, d)?;
    let base = data.train_x.matmul(&data.w)?;
    let acfg = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(state.tensors().iter().map(|(_, m)| m.shape()));
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (loss, grads) = {
            let mut g = Graph::new();
            let x = g.leaf_ref(&data.train_x, false);
            let b = g.leaf_ref(&base, false);
            let y = g.leaf_ref(&data.train_y, false);
            let nodes = adapters::bind(&mut g, &state, true);
            let br = adapters::branch(&mut g, spec, &nodes, x)?;
            let pred = g.add(b, br)?;
            let loss = g.mse(pred, y)?;
            g.backward(loss)?;
            let grads: Vec<Matrix<T>> = nodes
                .ids()
                .into_iter()
                .map(|(_, id)| g.grad(id).cloned().expect("adapter leaves feed the loss"))
                .collect();
            (g.value(loss).get(0, 0).to_f64_lossy(), grads)
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        history.push(loss);
        adam.begin_step();
        for (i, ((_, p), grad)) in state.tensors_mut().into_iter().zip(&grads).enumerate() {
            adam.update(i, p, grad, &acfg)?;
        }
    }
    let train_mse = probe_mse(&data.train_x, &data.train_y, &data.w, &state, spec)?;
    history.push(train_mse);
    Ok(ProbeReport {
        train_mse,
        eval_mse: probe_mse(&data.eval_x, &data.eval_y, &data.w, &state, spec)?,
        history,
        state,
    })
}

/// Lowest MSE any rank-`r` update `M` can reach on `‖X·ΔW − X·M‖²/(n·d)`.
///
/// The best rank-`r` approximation of `X·ΔW` lies in the column space of
/// `X`, so the floor is the tail `Σ_{i>r} σᵢ(X·ΔW)²` of its spectrum.
pub fn low_rank_floor<T: Scalar>(x: &Matrix<T>, delta: &Matrix<T>, r: usize) -> Result<f64> {
    let xd = x.matmul(delta)?;
    let mut sv: Vec<f64> = singular_values(&xd)?.into_iter().map(|s| s.to_f64_lossy()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv.iter().skip(r).map(|s| s * s).sum::<f64>() / xd.len() as f64)
}
