//! Adapter modules: the Kronecker family (KronA, KronA^B, KronA^B_res,
//! KronA^B_sigres) and the baselines they are compared with (LoRA,
//! parallel adapter, sequential adapter, BitFit).
//!
//! An [`AdapterSpec`] describes one kind of adapter; [`init_adapter`] produces
//! the trainable [`AdapterState`] for one attach site. The forward
//! contribution of every kind is built on an autodiff [`Graph`] by
//! [`branch`], and the matrix-level helpers (`krona_forward`, …) wrap it for
//! direct use.

use crate::autograd::{Activation, Graph, KronLinearOptions, NodeId};
use crate::error::{Error, Result};
use crate::kron::{kron, FactorShape};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Krona,
    KronaB,
    KronaBRes,
    KronaBSigres,
    Lora,
    Pa,
    SeqAdapter,
    Bitfit,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 8] = [
        AdapterKind::Krona,
        AdapterKind::KronaB,
        AdapterKind::KronaBRes,
        AdapterKind::KronaBSigres,
        AdapterKind::Lora,
        AdapterKind::Pa,
        AdapterKind::SeqAdapter,
        AdapterKind::Bitfit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Krona => "krona",
            AdapterKind::KronaB => "krona_b",
            AdapterKind::KronaBRes => "krona_b_res",
            AdapterKind::KronaBSigres => "krona_b_sigres",
            AdapterKind::Lora => "lora",
            AdapterKind::Pa => "pa",
            AdapterKind::SeqAdapter => "seq_adapter",
            AdapterKind::Bitfit => "bitfit",
        }
    }

    pub fn is_kronecker(self) -> bool {
        matches!(
            self,
            AdapterKind::Krona | AdapterKind::KronaB | AdapterKind::KronaBRes | AdapterKind::KronaBSigres
        )
    }

    pub fn is_low_rank(self) -> bool {
        matches!(self, AdapterKind::Lora | AdapterKind::Pa | AdapterKind::SeqAdapter)
    }

    pub fn has_residual_scale(self) -> bool {
        matches!(self, AdapterKind::KronaBRes | AdapterKind::KronaBSigres)
    }

    /// Kinds whose update folds into a frozen weight matrix.
    pub fn is_mergeable(self) -> bool {
        matches!(self, AdapterKind::Krona | AdapterKind::Lora)
    }

    pub fn default_placement(self) -> Placement {
        match self {
            AdapterKind::Krona | AdapterKind::Lora | AdapterKind::Bitfit => Placement::WeightParallel,
            AdapterKind::KronaB | AdapterKind::KronaBRes | AdapterKind::KronaBSigres | AdapterKind::Pa => {
                Placement::BlockParallel
            }
            AdapterKind::SeqAdapter => Placement::BlockSequential,
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown adapter kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Beside a single weight matrix (`Y = XW + branch(X)`).
    WeightParallel,
    /// Beside a whole block (`Y = block(X) + branch(X)`).
    BlockParallel,
    /// After a block (`Y = out + branch(out)`).
    BlockSequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// First factor Kaiming-uniform (`a = √5`), second factor zero.
    #[default]
    ZeroSideKaiming,
    /// Both factors `Normal(0, 1/√d_h)`.
    BothNormal,
}

/// Configuration of one adapter kind, shared by all of its attach sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub placement: Placement,
    /// Factor shapes (Kronecker kinds).
    pub shape: Option<FactorShape>,
    /// Bottleneck rank (low-rank kinds).
    pub rank: Option<usize>,
    /// Fixed scale `s` on the adapter branch.
    pub scale: f64,
    /// Initial value of the learnable residual scale.
    pub residual_scale_init: f64,
    /// 0, 1 (output bias) or 2 (output and intermediate bias).
    pub bias_mode: u8,
    pub nonlinearity: Activation,
    pub init: InitScheme,
    pub seed: u64,
}

/// Factor shape `(a₁, d/a₁)/(d/a₁, a₁)` with `a₁` the smallest divisor of `d`
/// not below `√d`.
pub fn default_shape(d: usize) -> FactorShape {
    let a1 = crate::kron::divisors(d)
        .into_iter()
        .find(|&k| k * k >= d)
        .unwrap_or(d);
    FactorShape::reversed(a1, d / a1)
}

impl AdapterSpec {
    /// Defaults for `kind` on a model of width `d_h`.
    pub fn new(kind: AdapterKind, d_h: usize) -> Self {
        let (shape, rank) = match kind {
            k if k.is_kronecker() => (Some(default_shape(d_h)), None),
            AdapterKind::Lora => (None, Some(1)),
            AdapterKind::Pa => (None, Some(2)),
            AdapterKind::SeqAdapter => (None, Some((d_h / 32).max(1))),
            _ => (None, None),
        };
        let scale = match kind {
            AdapterKind::KronaB | AdapterKind::KronaBRes | AdapterKind::KronaBSigres | AdapterKind::Pa => 16.0,
            _ => 1.0,
        };
        let bias_mode = match kind {
            AdapterKind::KronaB | AdapterKind::KronaBRes | AdapterKind::KronaBSigres => 1,
            _ => 0,
        };
        let nonlinearity = match kind {
            AdapterKind::Pa | AdapterKind::SeqAdapter => Activation::Relu,
            _ => Activation::None,
        };
        Self {
            kind,
            placement: kind.default_placement(),
            shape,
            rank,
            scale,
            residual_scale_init: 1.0,
            bias_mode,
            nonlinearity,
            init: InitScheme::ZeroSideKaiming,
            seed: 0,
        }
    }

    pub fn with_shape(mut self, shape: FactorShape) -> Self {
        self.shape = Some(shape);
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = Some(rank);
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_bias_mode(mut self, bias_mode: u8) -> Self {
        self.bias_mode = bias_mode;
        self
    }

    pub fn with_nonlinearity(mut self, act: Activation) -> Self {
        self.nonlinearity = act;
        self
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    /// Checks the spec against square `d×d` attach sites.
    pub fn validate(&self, d: usize) -> Result<()> {
        let kind = self.kind;
        if !self.scale.is_finite() || !self.residual_scale_init.is_finite() {
            return Err(Error::InvalidSpec("scales must be finite".into()));
        }
        if self.bias_mode > 2 {
            return Err(Error::InvalidSpec(format!("bias_mode {} not in 0..=2", self.bias_mode)));
        }
        match kind {
            AdapterKind::Krona | AdapterKind::Lora => {
                if self.placement != Placement::WeightParallel {
                    return Err(Error::InvalidSpec(format!("{kind} requires weight_parallel placement")));
                }
                if self.bias_mode != 0 {
                    return Err(Error::InvalidSpec(format!("{kind} does not take biases")));
                }
                if self.nonlinearity != Activation::None {
                    return Err(Error::InvalidSpec(format!("{kind} must stay linear to be mergeable")));
                }
            }
            AdapterKind::KronaB | AdapterKind::KronaBRes | AdapterKind::KronaBSigres => {
                if self.placement == Placement::WeightParallel {
                    return Err(Error::InvalidSpec(format!("{kind} requires a block placement")));
                }
            }
            AdapterKind::Pa => {
                if self.placement != Placement::BlockParallel {
                    return Err(Error::InvalidSpec("pa requires block_parallel placement".into()));
                }
            }
            AdapterKind::SeqAdapter => {
                if self.placement != Placement::BlockSequential {
                    return Err(Error::InvalidSpec("seq_adapter requires block_sequential placement".into()));
                }
            }
            AdapterKind::Bitfit => return Ok(()),
        }
        if kind.is_kronecker() {
            let shape = self
                .shape
                .ok_or_else(|| Error::InvalidSpec(format!("{kind} needs factor shapes")))?;
            shape.validate_for(d, d)?;
        } else {
            let r = self
                .rank
                .ok_or_else(|| Error::InvalidSpec(format!("{kind} needs a rank")))?;
            if r == 0 || 2 * r >= d {
                return Err(Error::InvalidSpec(format!("rank {r} must satisfy 0 < r < d_h/2 = {}", d as f64 / 2.0)));
            }
        }
        Ok(())
    }

    /// Trainable parameters per attach site of width `d`.
    pub fn params_per_site(&self, d: usize) -> usize {
        let core = match (self.shape, self.rank) {
            (Some(s), _) if self.kind.is_kronecker() => s.param_count(),
            (_, Some(r)) if self.kind.is_low_rank() => 2 * d * r,
            _ => 0,
        };
        let mid = match (self.kind.is_kronecker(), self.shape, self.rank) {
            (true, Some(s), _) => s.b.0 * s.a.1,
            (false, _, Some(r)) => r,
            _ => 0,
        };
        let biases = match self.bias_mode {
            0 => 0,
            1 => d,
            _ => d + mid,
        };
        let res = usize::from(self.kind.has_residual_scale());
        core + biases + res
    }
}

/// Trainable tensors of one adapter instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState<T: Scalar> {
    pub kind: AdapterKind,
    /// `A_k` (`a₁×a₂`) or the down projection (`d×r`).
    pub first: Matrix<T>,
    /// `B_k` (`b₁×b₂`) or the up projection (`r×d`).
    pub second: Matrix<T>,
    /// `1×d_out` bias on the branch output.
    pub out_bias: Option<Matrix<T>>,
    /// Bias after the first product: `b₁×a₂` (Kronecker) or `1×r` (low rank).
    pub mid_bias: Option<Matrix<T>>,
    /// `1×1` learnable residual scale.
    pub res_scale: Option<Matrix<T>>,
}

impl<T: Scalar> AdapterState<T> {
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Tensors in their fixed serialization order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        let mut v = vec![("first", &self.first), ("second", &self.second)];
        if let Some(b) = &self.out_bias {
            v.push(("out_bias", b));
        }
        if let Some(b) = &self.mid_bias {
            v.push(("mid_bias", b));
        }
        if let Some(s) = &self.res_scale {
            v.push(("res_scale", s));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        let mut v = vec![("first", &mut self.first), ("second", &mut self.second)];
        if let Some(b) = &mut self.out_bias {
            v.push(("out_bias", b));
        }
        if let Some(b) = &mut self.mid_bias {
            v.push(("mid_bias", b));
        }
        if let Some(s) = &mut self.res_scale {
            v.push(("res_scale", s));
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> AdapterState<U> {
        AdapterState {
            kind: self.kind,
            first: self.first.cast(),
            second: self.second.cast(),
            out_bias: self.out_bias.as_ref().map(Matrix::cast),
            mid_bias: self.mid_bias.as_ref().map(Matrix::cast),
            res_scale: self.res_scale.as_ref().map(Matrix::cast),
        }
    }
}

/// Kaiming-uniform bound for `a = √5`: `√(6/((1+a²)·fan_in)) = 1/√fan_in`.
pub fn kaiming_uniform_bound(fan_in: usize) -> f64 {
    let a2 = 5.0;
    (6.0 / ((1.0 + a2) * fan_in as f64)).sqrt()
}

/// Fresh state for one site of width `d`, seeded from `spec.seed`.
pub fn init_adapter<T: Scalar>(spec: &AdapterSpec, d: usize) -> Result<AdapterState<T>> {
    init_adapter_seeded(spec, d, spec.seed)
}

/// Like [`init_adapter`] with an explicit seed (per-site seeds in a model).
pub fn init_adapter_seeded<T: Scalar>(spec: &AdapterSpec, d: usize, seed: u64) -> Result<AdapterState<T>> {
    spec.validate(d)?;
    if spec.kind == AdapterKind::Bitfit {
        return Err(Error::InvalidSpec("bitfit has no adapter state".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (first_shape, second_shape, mid_shape) = if spec.kind.is_kronecker() {
        let s = spec.shape.expect("validated");
        (s.a, s.b, (s.b.0, s.a.1))
    } else {
        let r = spec.rank.expect("validated");
        ((d, r), (r, d), (1, r))
    };
    let (first, second) = match spec.init {
        InitScheme::ZeroSideKaiming => (
            Matrix::rand_uniform(first_shape.0, first_shape.1, kaiming_uniform_bound(first_shape.1), &mut rng),
            Matrix::zeros(second_shape.0, second_shape.1),
        ),
        InitScheme::BothNormal => {
            let std = 1.0 / (d as f64).sqrt();
            (
                Matrix::rand_normal(first_shape.0, first_shape.1, std, &mut rng),
                Matrix::rand_normal(second_shape.0, second_shape.1, std, &mut rng),
            )
        }
    };
    Ok(AdapterState {
        kind: spec.kind,
        first,
        second,
        out_bias: (spec.bias_mode >= 1).then(|| Matrix::zeros(1, d)),
        mid_bias: (spec.bias_mode >= 2).then(|| Matrix::zeros(mid_shape.0, mid_shape.1)),
        res_scale: spec
            .kind
            .has_residual_scale()
            .then(|| Matrix::scalar(T::lit(spec.residual_scale_init))),
    })
}

/// Graph handles for an adapter's tensors.
#[derive(Debug, Clone, Copy)]
pub struct AdapterNodes {
    pub first: NodeId,
    pub second: NodeId,
    pub out_bias: Option<NodeId>,
    pub mid_bias: Option<NodeId>,
    pub res_scale: Option<NodeId>,
}

impl AdapterNodes {
    pub fn ids(&self) -> Vec<(&'static str, NodeId)> {
        let mut v = vec![("first", self.first), ("second", self.second)];
        v.extend(self.out_bias.map(|n| ("out_bias", n)));
        v.extend(self.mid_bias.map(|n| ("mid_bias", n)));
        v.extend(self.res_scale.map(|n| ("res_scale", n)));
        v
    }
}

/// Registers the state's tensors as (borrowed) leaves.
pub fn bind<'a, T: Scalar>(g: &mut Graph<'a, T>, state: &'a AdapterState<T>, trainable: bool) -> AdapterNodes {
    AdapterNodes {
        first: g.leaf_ref(&state.first, trainable),
        second: g.leaf_ref(&state.second, trainable),
        out_bias: state.out_bias.as_ref().map(|b| g.leaf_ref(b, trainable)),
        mid_bias: state.mid_bias.as_ref().map(|b| g.leaf_ref(b, trainable)),
        res_scale: state.res_scale.as_ref().map(|s| g.leaf_ref(s, trainable)),
    }
}

/// The adapter's additive contribution for input rows `x`.
///
/// | kind | contribution |
/// |---|---|
/// | krona, krona_b | `s·x(A_k⊗B_k) (+ b)` |
/// | krona_b_res | the above `+ s_res·x` |
/// | krona_b_sigres | the above `+ σ(s_res)·x` |
/// | lora | `s·(xA)B` |
/// | pa, seq_adapter | `s·f(xA + m)B (+ b)` |
///
/// For the Kronecker kinds the intermediate bias and nonlinearity sit
/// between the two products of the reconstruction-free form.
pub fn branch<T: Scalar>(g: &mut Graph<'_, T>, spec: &AdapterSpec, nodes: &AdapterNodes, x: NodeId) -> Result<NodeId> {
    let s = T::lit(spec.scale);
    let core = if spec.kind.is_kronecker() {
        let opts = KronLinearOptions {
            mid_bias: nodes.mid_bias,
            activation: spec.nonlinearity,
        };
        g.kron_linear(x, nodes.first, nodes.second, opts)?
    } else {
        let mut h = g.matmul(x, nodes.first)?;
        if let Some(m) = nodes.mid_bias {
            h = g.add(h, m)?;
        }
        let h = g.activation(h, spec.nonlinearity)?;
        g.matmul(h, nodes.second)?
    };
    let mut out = g.scale(core, s)?;
    if let Some(b) = nodes.out_bias {
        out = g.add(out, b)?;
    }
    if let Some(sr) = nodes.res_scale {
        let weight = if spec.kind == AdapterKind::KronaBSigres {
            g.sigmoid(sr)?
        } else {
            sr
        };
        let res = g.scale_by(x, weight)?;
        out = g.add(out, res)?;
    }
    Ok(out)
}

fn check_kind<T: Scalar>(spec: &AdapterSpec, state: &AdapterState<T>, allowed: &[AdapterKind]) -> Result<()> {
    if spec.kind != state.kind {
        return Err(Error::InvalidSpec(format!(
            "state is {} but spec is {}",
            state.kind, spec.kind
        )));
    }
    if !allowed.contains(&spec.kind) {
        return Err(Error::InvalidSpec(format!("{} not valid here", spec.kind)));
    }
    Ok(())
}

/// `host + branch(x)` evaluated on a throwaway graph.
fn with_branch<T: Scalar>(x: &Matrix<T>, host: &Matrix<T>, state: &AdapterState<T>, spec: &AdapterSpec) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let xn = g.leaf_ref(x, false);
    let hn = g.leaf_ref(host, false);
    let nodes = bind(&mut g, state, false);
    let br = branch(&mut g, spec, &nodes, xn)?;
    let y = g.add(hn, br)?;
    Ok(g.value(y).clone())
}

/// `Y = XW + s·X(A_k⊗B_k)`.
pub fn krona_forward<T: Scalar>(x: &Matrix<T>, w_frozen: &Matrix<T>, state: &AdapterState<T>, spec: &AdapterSpec) -> Result<Matrix<T>> {
    check_kind(spec, state, &[AdapterKind::Krona])?;
    with_branch(x, &x.matmul(w_frozen)?, state, spec)
}

/// `Y = XW + s·(XA)B`.
pub fn lora_forward<T: Scalar>(x: &Matrix<T>, w_frozen: &Matrix<T>, state: &AdapterState<T>, spec: &AdapterSpec) -> Result<Matrix<T>> {
    check_kind(spec, state, &[AdapterKind::Lora])?;
    with_branch(x, &x.matmul(w_frozen)?, state, spec)
}

/// `Y = FFN(X) + s·X(A_k⊗B_k) (+ biases)`.
pub fn krona_b_forward<T: Scalar>(x: &Matrix<T>, ffn_output: &Matrix<T>, state: &AdapterState<T>, spec: &AdapterSpec) -> Result<Matrix<T>> {
    check_kind(spec, state, &[AdapterKind::KronaB])?;
    with_branch(x, ffn_output, state, spec)
}

/// `Y = FFN(X) + s·X(A_k⊗B_k) + s_res·X`, or `σ(s_res)·X` for the sigmoid variant.
pub fn krona_b_res_forward<T: Scalar>(x: &Matrix<T>, ffn_output: &Matrix<T>, state: &AdapterState<T>, spec: &AdapterSpec) -> Result<Matrix<T>> {
    check_kind(spec, state, &[AdapterKind::KronaBRes, AdapterKind::KronaBSigres])?;
    if x.cols() != ffn_output.cols() {
        return Err(Error::dim("krona_b_res_forward", "residual needs d_in = d_out"));
    }
    with_branch(x, ffn_output, state, spec)
}

/// `Y = FFN(X) + s·f(XA)B`.
pub fn pa_forward<T: Scalar>(x: &Matrix<T>, ffn_output: &Matrix<T>, state: &AdapterState<T>, spec: &AdapterSpec) -> Result<Matrix<T>> {
    check_kind(spec, state, &[AdapterKind::Pa])?;
    with_branch(x, ffn_output, state, spec)
}

/// `Y = X + f(XA)B` applied after a block.
pub fn seq_adapter_forward<T: Scalar>(block_out: &Matrix<T>, state: &AdapterState<T>, spec: &AdapterSpec) -> Result<Matrix<T>> {
    check_kind(spec, state, &[AdapterKind::SeqAdapter])?;
    with_branch(block_out, block_out, state, spec)
}

/// Dense weight update `s·(A_k⊗B_k)` or `s·AB` of a mergeable adapter.
pub fn merged_delta<T: Scalar>(state: &AdapterState<T>, s: T) -> Result<Matrix<T>> {
    match state.kind {
        AdapterKind::Krona => Ok(kron(&state.first, &state.second).scale(s)),
        AdapterKind::Lora => Ok(state.first.matmul(&state.second)?.scale(s)),
        other => Err(Error::MergeUnsupported {
            sites: vec![other.name().to_string()],
        }),
    }
}

/// `W_tuned = W + s·(A_k⊗B_k)` (or `W + s·AB`).
pub fn merge<T: Scalar>(w_frozen: &Matrix<T>, state: &AdapterState<T>, s: T) -> Result<Matrix<T>> {
    let delta = merged_delta(state, s)?;
    w_frozen.add(&delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::KronFactorPair;
    use rand::SeedableRng;

    fn randn(r: usize, c: usize, seed: u64) -> Matrix<f64> {
        Matrix::rand_normal(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn randomize(state: &mut AdapterState<f64>, seed: u64) {
        for (i, (_, m)) in state.tensors_mut().into_iter().enumerate() {
            let (r, c) = m.shape();
            *m = randn(r, c, seed + i as u64).scale(0.5);
        }
    }

    #[test]
    fn default_shapes() {
        assert_eq!(default_shape(768), FactorShape::reversed(32, 24));
        assert_eq!(default_shape(64), FactorShape::reversed(8, 8));
        assert_eq!(default_shape(16), FactorShape::reversed(4, 4));
        assert_eq!(default_shape(7), FactorShape::reversed(7, 1));
    }

    #[test]
    fn parameter_parity_at_768() {
        let krona = AdapterSpec::new(AdapterKind::Krona, 768);
        let lora = AdapterSpec::new(AdapterKind::Lora, 768);
        assert_eq!(krona.params_per_site(768), 1536);
        assert_eq!(lora.params_per_site(768), 1536);
        let state: AdapterState<f64> = init_adapter(&krona, 768).unwrap();
        assert_eq!(state.param_count(), 1536);
    }

    #[test]
    fn spec_validation() {
        let d = 16;
        let mut s = AdapterSpec::new(AdapterKind::Krona, d);
        s.placement = Placement::BlockParallel;
        assert!(s.validate(d).is_err());
        let s = AdapterSpec::new(AdapterKind::Lora, d).with_rank(8);
        assert!(s.validate(d).is_err());
        let s = AdapterSpec::new(AdapterKind::Lora, d).with_rank(7);
        assert!(s.validate(d).is_ok());
        let s = AdapterSpec::new(AdapterKind::KronaB, d).with_shape(FactorShape::reversed(4, 2));
        assert!(s.validate(d).is_err());
        let s = AdapterSpec::new(AdapterKind::Krona, d).with_bias_mode(1);
        assert!(s.validate(d).is_err());
        let s = AdapterSpec::new(AdapterKind::KronaB, d).with_bias_mode(3);
        assert!(s.validate(d).is_err());
        let mut s = AdapterSpec::new(AdapterKind::KronaB, d);
        s.placement = Placement::WeightParallel;
        assert!(s.validate(d).is_err());
    }

    #[test]
    fn params_per_site_counts_biases_and_residual() {
        let d = 16;
        let spec = AdapterSpec::new(AdapterKind::KronaBRes, d).with_bias_mode(2);
        let state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        assert_eq!(state.param_count(), spec.params_per_site(d));
        assert_eq!(state.param_count(), 32 + 16 + 16 + 1);
        let spec = AdapterSpec::new(AdapterKind::Pa, d).with_bias_mode(2);
        let state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        assert_eq!(state.param_count(), spec.params_per_site(d));
    }

    #[test]
    fn init_is_deterministic_and_zero_sided() {
        let spec = AdapterSpec::new(AdapterKind::Krona, 64).with_seed(5);
        let a: AdapterState<f64> = init_adapter(&spec, 64).unwrap();
        let b: AdapterState<f64> = init_adapter(&spec, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.second.data().iter().all(|&v| v == 0.0));
        let bound = kaiming_uniform_bound(8);
        assert!((bound - 1.0 / 8f64.sqrt()).abs() < 1e-15);
        assert!(a.first.data().iter().all(|v| v.abs() <= bound));
        assert!(a.first.max_abs() > 0.5 * bound);
        let c: AdapterState<f64> = init_adapter(&spec.clone().with_seed(6), 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn both_normal_std_matches() {
        // one (32,24)/(24,32) state has only 1536 entries; pool seeds for ≥ 10⁴ samples
        let spec = AdapterSpec::new(AdapterKind::Krona, 768).with_init(InitScheme::BothNormal);
        let mut samples = Vec::new();
        for seed in 0..8 {
            let st: AdapterState<f64> = init_adapter_seeded(&spec, 768, seed).unwrap();
            samples.extend_from_slice(st.first.data());
            samples.extend_from_slice(st.second.data());
        }
        assert!(samples.len() >= 10_000);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 1.0 / 768f64.sqrt();
        assert!((std / target - 1.0).abs() < 0.1, "std {std} vs {target}");
    }

    #[test]
    fn krona_forward_cases() {
        let d = 12;
        let spec = AdapterSpec::new(AdapterKind::Krona, d).with_shape(FactorShape::reversed(4, 3));
        let x = randn(5, d, 1);
        let w = randn(d, d, 2);
        let mut state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        let base = x.matmul(&w).unwrap();
        assert_eq!(krona_forward(&x, &w, &state, &spec).unwrap(), base);
        randomize(&mut state, 3);
        let zero_s = spec.clone().with_scale(0.0);
        assert_eq!(krona_forward(&x, &w, &state, &zero_s).unwrap(), base);

        let s = 0.7;
        let y = krona_forward(&x, &w, &state, &spec.clone().with_scale(s)).unwrap();
        let oracle = x
            .matmul(&w.add(&kron(&state.first, &state.second).scale(s)).unwrap())
            .unwrap();
        assert!(y.max_rel_diff(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn merge_cases() {
        let d = 4;
        let spec = AdapterSpec::new(AdapterKind::Krona, d);
        let w = randn(d, d, 4);
        let mut state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        state.first = Matrix::zeros(2, 2);
        assert_eq!(merge(&w, &state, 1.0).unwrap(), w);
        state.first = Matrix::identity(2);
        state.second = Matrix::identity(2);
        let merged = merge(&w, &state, 1.0).unwrap();
        assert_eq!(merged, w.add(&Matrix::identity(4)).unwrap());

        randomize(&mut state, 10);
        let x = randn(6, d, 11);
        let parallel = krona_forward(&x, &w, &state, &spec).unwrap();
        let merged = x.matmul(&merge(&w, &state, 1.0).unwrap()).unwrap();
        assert!(merged.max_rel_diff(&parallel).unwrap() <= 1e-10);

        let bspec = AdapterSpec::new(AdapterKind::KronaB, d);
        let bstate: AdapterState<f64> = init_adapter(&bspec, d).unwrap();
        assert!(matches!(merge(&w, &bstate, 1.0), Err(Error::MergeUnsupported { .. })));
    }

    #[test]
    fn krona_b_cases() {
        let d = 768;
        let spec = AdapterSpec::new(AdapterKind::KronaB, d).with_scale(16.0);
        assert_eq!(spec.shape, Some(FactorShape::reversed(32, 24)));
        let x = randn(3, d, 20);
        let ffn = randn(3, d, 21);
        let mut state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        assert_eq!(krona_b_forward(&x, &ffn, &state, &spec).unwrap(), ffn);

        let bias = randn(1, d, 22);
        state.out_bias = Some(bias.clone());
        let y = krona_b_forward(&x, &ffn, &state, &spec).unwrap();
        assert_eq!(y, ffn.add_row_broadcast(&bias).unwrap());

        randomize(&mut state, 23);
        let y = krona_b_forward(&x, &ffn, &state, &spec).unwrap();
        let pair = KronFactorPair::new(state.first.clone(), state.second.clone()).unwrap();
        let oracle = ffn
            .add(&x.matmul(&pair.reconstruct()).unwrap().scale(16.0))
            .unwrap()
            .add_row_broadcast(state.out_bias.as_ref().unwrap())
            .unwrap();
        assert!(y.max_rel_diff(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn residual_variants() {
        let d = 16;
        let x = randn(4, d, 30);
        let ffn = randn(4, d, 31);
        let spec = AdapterSpec::new(AdapterKind::KronaBRes, d);
        let state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        assert_eq!(state.res_scale.as_ref().unwrap().get(0, 0), 1.0);
        let y = krona_b_res_forward(&x, &ffn, &state, &spec).unwrap();
        assert!(y.max_rel_diff(&ffn.add(&x).unwrap()).unwrap() <= 1e-15);

        let mut sig_spec = AdapterSpec::new(AdapterKind::KronaBSigres, d);
        sig_spec.residual_scale_init = 0.0;
        let sig: AdapterState<f64> = init_adapter(&sig_spec, d).unwrap();
        let y = krona_b_res_forward(&x, &ffn, &sig, &sig_spec).unwrap();
        assert!(y.max_rel_diff(&ffn.add(&x.scale(0.5)).unwrap()).unwrap() <= 1e-15);
    }

    #[test]
    fn residual_scale_gradient_matches_finite_differences() {
        use crate::autograd::finite_diff_check;
        let d = 8;
        for kind in [AdapterKind::KronaBRes, AdapterKind::KronaBSigres] {
            let spec = AdapterSpec::new(kind, d).with_bias_mode(2).with_nonlinearity(Activation::Silu);
            let mut state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
            randomize(&mut state, 40);
            let x = randn(3, d, 41);
            let target = randn(3, d, 42);
            let mut g = Graph::new();
            let xn = g.leaf_ref(&x, false);
            let nodes = bind(&mut g, &state, true);
            let y = branch(&mut g, &spec, &nodes, xn).unwrap();
            let t = g.constant(target);
            let loss = g.mse(y, t).unwrap();
            for (name, id) in nodes.ids() {
                let err = finite_diff_check(&mut g, loss, id, 1e-5).unwrap();
                assert!(err <= 1e-6, "{kind} {name}: {err}");
            }
        }
    }

    #[test]
    fn lora_cases() {
        let d = 6;
        let spec = AdapterSpec::new(AdapterKind::Lora, d);
        assert_eq!((spec.rank, spec.scale), (Some(1), 1.0));
        let x = randn(4, d, 50);
        let w = randn(d, d, 51);
        let mut state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        assert_eq!(lora_forward(&x, &w, &state, &spec).unwrap(), x.matmul(&w).unwrap());

        // full-rank degenerate case, bypassing the r < d/2 rule
        let delta = randn(d, d, 52);
        let full = AdapterState {
            kind: AdapterKind::Lora,
            first: Matrix::identity(d),
            second: delta.clone(),
            out_bias: None,
            mid_bias: None,
            res_scale: None,
        };
        let y = lora_forward(&x, &w, &full, &spec).unwrap();
        let oracle = x.matmul(&w.add(&delta).unwrap()).unwrap();
        assert!(y.max_rel_diff(&oracle).unwrap() <= 1e-12);

        randomize(&mut state, 53);
        let s = 2.5;
        let y = lora_forward(&x, &w, &state, &spec.clone().with_scale(s)).unwrap();
        let oracle = x
            .matmul(&w.add(&state.first.matmul(&state.second).unwrap().scale(s)).unwrap())
            .unwrap();
        assert!(y.max_rel_diff(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn pa_cases() {
        let d = 8;
        let spec = AdapterSpec::new(AdapterKind::Pa, d);
        assert_eq!((spec.rank, spec.scale), (Some(2), 16.0));
        let x = randn(5, d, 60);
        let ffn = randn(5, d, 61);
        let mut state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        assert_eq!(pa_forward(&x, &ffn, &state, &spec).unwrap(), ffn);

        randomize(&mut state, 62);
        // all pre-activations negative → relu branch vanishes
        let neg = state.first.map(|v| -v.abs());
        let pos_x = x.map(|v| v.abs() + 0.1);
        let negative = AdapterState {
            first: neg,
            ..state.clone()
        };
        assert_eq!(pa_forward(&pos_x, &ffn, &negative, &spec).unwrap(), ffn);

        let y = pa_forward(&x, &ffn, &state, &spec).unwrap();
        let hidden = x.matmul(&state.first).unwrap().map(|v| v.max(0.0));
        let oracle = ffn.add(&hidden.matmul(&state.second).unwrap().scale(16.0)).unwrap();
        assert!(y.max_rel_diff(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn seq_adapter_cases() {
        use crate::autograd::finite_diff_check;
        let d = 8;
        let spec = AdapterSpec::new(AdapterKind::SeqAdapter, d).with_rank(2);
        let x = randn(3, d, 70);
        let mut state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        assert_eq!(seq_adapter_forward(&x, &state, &spec).unwrap(), x);

        randomize(&mut state, 71);
        let y = seq_adapter_forward(&x, &state, &spec).unwrap();
        let hidden = x.matmul(&state.first).unwrap().map(|v| v.max(0.0));
        let oracle = x.add(&hidden.matmul(&state.second).unwrap()).unwrap();
        assert!(y.max_rel_diff(&oracle).unwrap() <= 1e-12);

        let spec = spec.with_nonlinearity(Activation::Gelu);
        let mut g = Graph::new();
        let xn = g.leaf(x, true);
        let nodes = bind(&mut g, &state, true);
        let br = branch(&mut g, &spec, &nodes, xn).unwrap();
        let y = g.add(xn, br).unwrap();
        let y2 = g.mul(y, y).unwrap();
        let loss = g.sum(y2).unwrap();
        for (name, id) in nodes.ids().into_iter().chain([("x", xn)]) {
            let err = finite_diff_check(&mut g, loss, id, 1e-5).unwrap();
            assert!(err <= 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn scaling_is_linear() {
        let d = 16;
        let spec = AdapterSpec::new(AdapterKind::KronaB, d).with_bias_mode(0);
        let mut state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        randomize(&mut state, 80);
        let x = randn(3, d, 81);
        let ffn = randn(3, d, 82);
        let one = krona_b_forward(&x, &ffn, &state, &spec.clone().with_scale(1.5)).unwrap();
        let two = krona_b_forward(&x, &ffn, &state, &spec.clone().with_scale(3.0)).unwrap();
        let d1 = one.sub(&ffn).unwrap();
        let d2 = two.sub(&ffn).unwrap();
        assert!(d2.max_rel_diff(&d1.scale(2.0)).unwrap() <= 1e-14);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let d = 16;
        let spec = AdapterSpec::new(AdapterKind::Krona, d);
        let state: AdapterState<f64> = init_adapter(&spec, d).unwrap();
        let x = randn(2, d, 90);
        let lspec = AdapterSpec::new(AdapterKind::Lora, d);
        assert!(lora_forward(&x, &Matrix::identity(d), &state, &lspec).is_err());
        assert!(init_adapter::<f64>(&AdapterSpec::new(AdapterKind::Bitfit, d), d).is_err());
    }
}
