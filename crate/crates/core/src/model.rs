//! A small pre-layer-norm transformer encoder classifier with named
//! projection matrices that adapters can attach to.

use crate::adapters::{self, AdapterKind, AdapterNodes, AdapterSpec, AdapterState, Placement};
use crate::autograd::{Activation, Axis, Graph, NodeId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            max_seq_len: 16,
            d_h: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 256,
            n_classes: 4,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_h < 4 {
            return bad(format!("d_h = {} must be at least 4", self.d_h));
        }
        if self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return bad(format!("d_h = {} not divisible by n_heads = {}", self.d_h, self.n_heads));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_layers", self.n_layers),
            ("ffn_hidden", self.ffn_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    pub fn is_bias(self) -> bool {
        matches!(self, ParamKind::Bias | ParamKind::NormBias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Query,
    Value,
    Ffn,
    AttnOut,
    FfnOut,
}

impl SiteKind {
    fn name(self) -> &'static str {
        match self {
            SiteKind::Query => "query",
            SiteKind::Value => "value",
            SiteKind::Ffn => "ffn",
            SiteKind::AttnOut => "attn_out",
            SiteKind::FfnOut => "ffn_out",
        }
    }
}

/// An adapter attach point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.name())
    }
}

impl std::str::FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::Format(format!("bad site name `{s}`"));
        let (layer, kind) = s.strip_prefix("layer").and_then(|r| r.split_once('.')).ok_or_else(err)?;
        let layer = layer.parse().map_err(|_| err())?;
        let kind = [SiteKind::Query, SiteKind::Value, SiteKind::Ffn, SiteKind::AttnOut, SiteKind::FfnOut]
            .into_iter()
            .find(|k| k.name() == kind)
            .ok_or_else(err)?;
        Ok(Site { layer, kind })
    }
}

/// Which parameters training may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    Full,
    Adapters,
    Bitfit,
}

/// Address of a single parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Backbone(usize),
    Adapter(Site, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerIndex {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T: Scalar> {
    config: TransformerConfig,
    params: Vec<NamedParam<T>>,
    layers: Vec<LayerIndex>,
    tok: usize,
    pos: usize,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    adapters: BTreeMap<Site, AdapterState<T>>,
    spec: Option<AdapterSpec>,
    mode: TuneMode,
}

/// Graph handles produced by [`EncoderModel::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub logits: NodeId,
    /// Trainable leaves, in [`EncoderModel::trainable_keys`] order.
    pub trainable: Vec<(ParamKey, NodeId)>,
}

/// Deterministic initialization: token and position tables `N(0, 1)`,
/// projections `N(0, 1/√fan_in)`, biases zero, layer-norm gains one.
pub fn build_model<T: Scalar>(config: &TransformerConfig) -> Result<EncoderModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_h;
    let mut params: Vec<NamedParam<T>> = Vec::new();
    let mut push = |name: String, kind: ParamKind, value: Matrix<T>| {
        params.push(NamedParam { name, kind, value });
        params.len() - 1
    };
    let mut weight = |rows: usize, cols: usize| Matrix::rand_normal(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng);
    let mut draws = Vec::new();
    for l in 0..config.n_layers {
        let mats: Vec<Matrix<T>> = vec![
            weight(d, d),
            weight(d, d),
            weight(d, d),
            weight(d, d),
            weight(d, config.ffn_hidden),
            weight(config.ffn_hidden, d),
        ];
        draws.push((l, mats));
    }
    let head = weight(d, config.n_classes);
    let mut table_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let tok = push("embed.token".into(), ParamKind::Embedding, Matrix::rand_normal(config.vocab_size, d, 1.0, &mut table_rng));
    let pos = push(
        "embed.position".into(),
        ParamKind::Embedding,
        Matrix::rand_normal(config.max_seq_len, d, 1.0, &mut table_rng),
    );
    let mut layers = Vec::new();
    for (l, mats) in draws {
        let mut mats = mats.into_iter();
        let mut next = || mats.next().expect("six matrices per layer");
        let p = |s: &str| format!("layer{l}.{s}");
        let ln1_g = push(p("ln1.gain"), ParamKind::NormGain, Matrix::filled(1, d, T::one()));
        let ln1_b = push(p("ln1.bias"), ParamKind::NormBias, Matrix::zeros(1, d));
        let wq = push(p("attn.query.weight"), ParamKind::Weight, next());
        let bq = push(p("attn.query.bias"), ParamKind::Bias, Matrix::zeros(1, d));
        let wk = push(p("attn.key.weight"), ParamKind::Weight, next());
        let bk = push(p("attn.key.bias"), ParamKind::Bias, Matrix::zeros(1, d));
        let wv = push(p("attn.value.weight"), ParamKind::Weight, next());
        let bv = push(p("attn.value.bias"), ParamKind::Bias, Matrix::zeros(1, d));
        let wo = push(p("attn.output.weight"), ParamKind::Weight, next());
        let bo = push(p("attn.output.bias"), ParamKind::Bias, Matrix::zeros(1, d));
        let ln2_g = push(p("ln2.gain"), ParamKind::NormGain, Matrix::filled(1, d, T::one()));
        let ln2_b = push(p("ln2.bias"), ParamKind::NormBias, Matrix::zeros(1, d));
        let w1 = push(p("ffn.up.weight"), ParamKind::Weight, next());
        let b1 = push(p("ffn.up.bias"), ParamKind::Bias, Matrix::zeros(1, config.ffn_hidden));
        let w2 = push(p("ffn.down.weight"), ParamKind::Weight, next());
        let b2 = push(p("ffn.down.bias"), ParamKind::Bias, Matrix::zeros(1, d));
        layers.push(LayerIndex {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        });
    }
    let lnf_g = push("final_ln.gain".into(), ParamKind::NormGain, Matrix::filled(1, d, T::one()));
    let lnf_b = push("final_ln.bias".into(), ParamKind::NormBias, Matrix::zeros(1, d));
    let head_w = push("head.weight".into(), ParamKind::Weight, head);
    let head_b = push("head.bias".into(), ParamKind::Bias, Matrix::zeros(1, config.n_classes));
    Ok(EncoderModel {
        config: config.clone(),
        params,
        layers,
        tok,
        pos,
        lnf_g,
        lnf_b,
        head_w,
        head_b,
        adapters: BTreeMap::new(),
        spec: None,
        mode: TuneMode::Full,
    })
}

/// Attach sites used by each adapter kind.
pub fn sites_for(kind: AdapterKind, n_layers: usize) -> Vec<Site> {
    let kinds: &[SiteKind] = match kind {
        AdapterKind::Krona | AdapterKind::Lora => &[SiteKind::Query, SiteKind::Value],
        AdapterKind::KronaB | AdapterKind::KronaBRes | AdapterKind::KronaBSigres | AdapterKind::Pa => &[SiteKind::Ffn],
        AdapterKind::SeqAdapter => &[SiteKind::AttnOut, SiteKind::FfnOut],
        AdapterKind::Bitfit => &[],
    };
    (0..n_layers)
        .flat_map(|layer| kinds.iter().map(move |&kind| Site { layer, kind }))
        .collect()
}

fn site_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<T: Scalar> EncoderModel<T> {
    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn adapters(&self) -> &BTreeMap<Site, AdapterState<T>> {
        &self.adapters
    }

    pub fn adapter_spec(&self) -> Option<&AdapterSpec> {
        self.spec.as_ref()
    }

    pub fn mode(&self) -> TuneMode {
        self.mode
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Query and value projection weights of every layer, for tests and merging.
    pub fn site_weight(&self, site: Site) -> Option<&Matrix<T>> {
        let l = self.layers.get(site.layer)?;
        match site.kind {
            SiteKind::Query => Some(&self.params[l.wq].value),
            SiteKind::Value => Some(&self.params[l.wv].value),
            _ => None,
        }
    }

    /// Attaches one adapter per site for `spec.kind` and freezes the backbone.
    /// `bitfit` inserts nothing and makes the backbone biases trainable.
    pub fn attach_adapters(&mut self, spec: &AdapterSpec) -> Result<()> {
        if self.mode != TuneMode::Full || !self.adapters.is_empty() {
            return Err(Error::InvalidSpec("adapters are already attached".into()));
        }
        spec.validate(self.config.d_h)?;
        if spec.kind == AdapterKind::Bitfit {
            self.mode = TuneMode::Bitfit;
            self.spec = Some(spec.clone());
            return Ok(());
        }
        let sites = sites_for(spec.kind, self.config.n_layers);
        let mut states = BTreeMap::new();
        for (i, site) in sites.into_iter().enumerate() {
            let state = adapters::init_adapter_seeded(spec, self.config.d_h, site_seed(spec.seed, i))?;
            states.insert(site, state);
        }
        self.adapters = states;
        self.spec = Some(spec.clone());
        self.mode = TuneMode::Adapters;
        Ok(())
    }

    /// Replaces the state at an existing site (checkpoint loading, tests).
    pub fn set_adapter(&mut self, site: Site, state: AdapterState<T>) -> Result<()> {
        let slot = self
            .adapters
            .get_mut(&site)
            .ok_or_else(|| Error::InvalidSpec(format!("no adapter at {site}")))?;
        if slot.kind != state.kind {
            return Err(Error::InvalidSpec(format!("{site} hosts {}, not {}", slot.kind, state.kind)));
        }
        let shapes = |s: &AdapterState<T>| s.tensors().iter().map(|(n, m)| (*n, m.shape())).collect::<Vec<_>>();
        if shapes(slot) != shapes(&state) {
            return Err(Error::dim("set_adapter", format!("tensor shapes differ at {site}")));
        }
        *slot = state;
        Ok(())
    }

    pub fn adapter_mut(&mut self, site: Site) -> Option<&mut AdapterState<T>> {
        self.adapters.get_mut(&site)
    }

    /// Parameters training may update, in a fixed order.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        match self.mode {
            TuneMode::Full => (0..self.params.len()).map(ParamKey::Backbone).collect(),
            TuneMode::Bitfit => (0..self.params.len())
                .filter(|&i| self.params[i].kind.is_bias())
                .map(ParamKey::Backbone)
                .collect(),
            TuneMode::Adapters => self
                .adapters
                .iter()
                .flat_map(|(site, st)| st.tensors().into_iter().map(move |(name, _)| ParamKey::Adapter(*site, name)))
                .collect(),
        }
    }

    pub fn param(&self, key: ParamKey) -> Option<&Matrix<T>> {
        match key {
            ParamKey::Backbone(i) => self.params.get(i).map(|p| &p.value),
            ParamKey::Adapter(site, name) => self
                .adapters
                .get(&site)?
                .tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Matrix<T>> {
        match key {
            ParamKey::Backbone(i) => self.params.get_mut(i).map(|p| &mut p.value),
            ParamKey::Adapter(site, name) => self
                .adapters
                .get_mut(&site)?
                .tensors_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m),
        }
    }

    pub fn key_name(&self, key: ParamKey) -> String {
        match key {
            ParamKey::Backbone(i) => self.params[i].name.clone(),
            ParamKey::Adapter(site, name) => format!("{site}.adapter.{name}"),
        }
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.values().map(AdapterState::param_count).sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.backbone_param_count() + self.adapter_param_count()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_keys()
            .into_iter()
            .map(|k| self.param(k).map_or(0, Matrix::len))
            .sum()
    }

    /// SHA-256 over the backbone tensors that the current mode keeps frozen.
    pub fn frozen_hash(&self) -> String {
        let trainable: Vec<usize> = self
            .trainable_keys()
            .into_iter()
            .filter_map(|k| match k {
                ParamKey::Backbone(i) => Some(i),
                ParamKey::Adapter(..) => None,
            })
            .collect();
        let mut h = Sha256::new();
        for (i, p) in self.params.iter().enumerate() {
            if trainable.contains(&i) {
                continue;
            }
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// SHA-256 over every backbone tensor.
    pub fn backbone_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    fn check_tokens(&self, batch: &[Vec<usize>]) -> Result<usize> {
        let len = batch
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::dim("forward", "empty batch"))?;
        if len == 0 || len > self.config.max_seq_len {
            return Err(Error::dim(
                "forward",
                format!("sequence length {len} not in 1..={}", self.config.max_seq_len),
            ));
        }
        for seq in batch {
            if seq.len() != len {
                return Err(Error::dim("forward", "sequences in a batch must share a length"));
            }
            if let Some((position, &token)) = seq.iter().enumerate().find(|(_, &t)| t >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token,
                    position,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(len)
    }

    /// Builds the forward pass on `g`. With `with_grad` the leaves listed in
    /// [`trainable_keys`](Self::trainable_keys) are marked trainable.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, T>, batch: &[Vec<usize>], with_grad: bool) -> Result<ForwardNodes> {
        let len = self.check_tokens(batch)?;
        let n = batch.len();
        let cfg = &self.config;
        let trainable_keys = if with_grad { self.trainable_keys() } else { Vec::new() };
        let mut trainable = Vec::new();
        let mut leaves: Vec<NodeId> = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let key = ParamKey::Backbone(i);
            let train = trainable_keys.contains(&key);
            let id = g.leaf_ref(&p.value, train);
            if train {
                trainable.push((key, id));
            }
            leaves.push(id);
        }
        let mut bound: BTreeMap<Site, AdapterNodes> = BTreeMap::new();
        for (site, state) in &self.adapters {
            let nodes = adapters::bind(g, state, with_grad);
            if with_grad {
                trainable.extend(nodes.ids().into_iter().map(|(name, id)| (ParamKey::Adapter(*site, name), id)));
            }
            bound.insert(*site, nodes);
        }
        trainable.sort_by_key(|(k, _)| trainable_keys.iter().position(|t| t == k));
        let spec = self.spec.as_ref();

        let tokens: Vec<usize> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let tok = g.embedding(leaves[self.tok], tokens)?;
        let pos = g.embedding(leaves[self.pos], positions)?;
        let mut x = g.add(tok, pos)?;

        let hd = cfg.head_dim();
        let inv_sqrt = T::one() / T::from_usize_lossy(hd).sqrt();
        for (l, li) in self.layers.iter().enumerate() {
            let site = |kind| Site { layer: l, kind };
            let h = g.layer_norm(x, leaves[li.ln1_g], leaves[li.ln1_b])?;
            let q = self.projection(g, h, leaves[li.wq], leaves[li.bq], bound.get(&site(SiteKind::Query)), spec)?;
            let k = self.projection(g, h, leaves[li.wk], leaves[li.bk], None, spec)?;
            let v = self.projection(g, h, leaves[li.wv], leaves[li.bv], bound.get(&site(SiteKind::Value)), spec)?;
            let mut seqs = Vec::with_capacity(n);
            for s in 0..n {
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for head in 0..cfg.n_heads {
                    let qs = g.slice(q, s * len, head * hd, len, hd)?;
                    let ks = g.slice(k, s * len, head * hd, len, hd)?;
                    let vs = g.slice(v, s * len, head * hd, len, hd)?;
                    let scores = g.matmul_nt(qs, ks)?;
                    let scores = g.scale(scores, inv_sqrt)?;
                    let probs = g.softmax_rows(scores)?;
                    heads.push(g.matmul(probs, vs)?);
                }
                seqs.push(g.concat(heads, Axis::Cols)?);
            }
            let ctx = g.concat(seqs, Axis::Rows)?;
            let mut attn = self.projection(g, ctx, leaves[li.wo], leaves[li.bo], None, spec)?;
            if let (Some(nodes), Some(spec)) = (bound.get(&site(SiteKind::AttnOut)), spec) {
                let br = adapters::branch(g, spec, nodes, attn)?;
                attn = g.add(attn, br)?;
            }
            x = g.add(x, attn)?;

            let h2 = g.layer_norm(x, leaves[li.ln2_g], leaves[li.ln2_b])?;
            let up = g.matmul(h2, leaves[li.w1])?;
            let up = g.add(up, leaves[li.b1])?;
            let up = g.activation(up, Activation::Gelu)?;
            let down = g.matmul(up, leaves[li.w2])?;
            let mut ffn = g.add(down, leaves[li.b2])?;
            if let (Some(nodes), Some(spec)) = (bound.get(&site(SiteKind::Ffn)), spec) {
                let input = match spec.placement {
                    Placement::BlockSequential => ffn,
                    _ => h2,
                };
                let br = adapters::branch(g, spec, nodes, input)?;
                ffn = g.add(ffn, br)?;
            }
            if let (Some(nodes), Some(spec)) = (bound.get(&site(SiteKind::FfnOut)), spec) {
                let br = adapters::branch(g, spec, nodes, ffn)?;
                ffn = g.add(ffn, br)?;
            }
            x = g.add(x, ffn)?;
        }
        let x = g.layer_norm(x, leaves[self.lnf_g], leaves[self.lnf_b])?;
        let inv_len = T::one() / T::from_usize_lossy(len);
        let pool = g.constant(Matrix::from_fn(n, n * len, |r, c| {
            if c / len == r {
                inv_len
            } else {
                T::zero()
            }
        }));
        let pooled = g.matmul(pool, x)?;
        let logits = g.matmul(pooled, leaves[self.head_w])?;
        let logits = g.add(logits, leaves[self.head_b])?;
        Ok(ForwardNodes { logits, trainable })
    }

    fn projection(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        adapter: Option<&AdapterNodes>,
        spec: Option<&AdapterSpec>,
    ) -> Result<NodeId> {
        let y = g.matmul(x, w)?;
        let y = g.add(y, b)?;
        match (adapter, spec) {
            (Some(nodes), Some(spec)) => {
                let br = adapters::branch(g, spec, nodes, x)?;
                g.add(y, br)
            }
            _ => Ok(y),
        }
    }

    /// Logits `n × n_classes` for a batch of equal-length token sequences.
    pub fn forward(&self, batch: &[Vec<usize>]) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, batch, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Folds every adapter into its host weight. The result is a plain
    /// backbone with no adapters.
    pub fn merge_all(&self) -> Result<EncoderModel<T>> {
        let offending: Vec<String> = self
            .adapters
            .iter()
            .filter(|(_, st)| !st.kind.is_mergeable())
            .map(|(site, st)| format!("{site} ({})", st.kind))
            .collect();
        if !offending.is_empty() {
            return Err(Error::MergeUnsupported { sites: offending });
        }
        let mut merged = self.clone();
        merged.adapters.clear();
        merged.spec = None;
        merged.mode = TuneMode::Full;
        if let Some(spec) = &self.spec {
            let s = T::lit(spec.scale);
            for (site, state) in &self.adapters {
                let li = self.layers[site.layer];
                let idx = match site.kind {
                    SiteKind::Query => li.wq,
                    SiteKind::Value => li.wv,
                    _ => unreachable!("mergeable kinds only attach to query and value"),
                };
                merged.params[idx].value = adapters::merge(&self.params[idx].value, state, s)?;
            }
        }
        Ok(merged)
    }

    /// Copy with adapters removed and the backbone left as is.
    pub fn backbone_only(&self) -> EncoderModel<T> {
        let mut m = self.clone();
        m.adapters.clear();
        m.spec = None;
        m.mode = TuneMode::Full;
        m
    }

    /// Overwrites backbone tensors by name; every tensor must be supplied once.
    pub fn load_backbone(&mut self, tensors: Vec<(String, Matrix<T>)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} backbone tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let i = self
                .param_index(&name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
            if self.params[i].value.shape() != value.shape() {
                return Err(Error::Format(format!("tensor `{name}` has the wrong shape")));
            }
            self.params[i].value = value;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            layers: self.layers.clone(),
            tok: self.tok,
            pos: self.pos,
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
            head_w: self.head_w,
            head_b: self.head_b,
            adapters: self.adapters.iter().map(|(s, a)| (*s, a.cast())).collect(),
            spec: self.spec.clone(),
            mode: self.mode,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
