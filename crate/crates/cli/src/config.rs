use krona::adapters::{AdapterKind, AdapterSpec, InitScheme, Placement};
use krona::autograd::Activation;
use krona::bench::BenchProtocol;
use krona::kron::FactorShape;
use krona::model::TransformerConfig;
use krona::train::{ProbeConfig, TaskKind, TaskSpec, TrainConfig};
use krona::Precision;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Adapter section of a run file. Only `kind` is required; everything else
/// falls back to the defaults for that kind at the configured width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub kind: AdapterKind,
    pub placement: Option<Placement>,
    pub shape: Option<FactorShape>,
    pub rank: Option<usize>,
    pub scale: Option<f64>,
    pub residual_scale_init: Option<f64>,
    pub bias_mode: Option<u8>,
    pub nonlinearity: Option<Activation>,
    pub init: Option<InitScheme>,
    pub seed: Option<u64>,
}

impl AdapterSection {
    pub fn resolve(&self, d_h: usize) -> AdapterSpec {
        let mut spec = AdapterSpec::new(self.kind, d_h);
        if let Some(p) = self.placement {
            spec.placement = p;
        }
        if self.shape.is_some() {
            spec.shape = self.shape;
        }
        if self.rank.is_some() {
            spec.rank = self.rank;
        }
        if let Some(s) = self.scale {
            spec.scale = s;
        }
        if let Some(r) = self.residual_scale_init {
            spec.residual_scale_init = r;
        }
        if let Some(b) = self.bias_mode {
            spec.bias_mode = b;
        }
        if let Some(n) = self.nonlinearity {
            spec.nonlinearity = n;
        }
        if let Some(i) = self.init {
            spec.init = i;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub repeats: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_seed: u64,
    pub methods: Vec<String>,
    pub baseline: String,
}

impl BenchSection {
    pub fn protocol(&self) -> BenchProtocol {
        BenchProtocol {
            warmup_iters: self.warmup_iters,
            timed_iters: self.timed_iters,
            repeats: self.repeats,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            input_seed: self.input_seed,
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        let p = BenchProtocol::default();
        Self {
            warmup_iters: p.warmup_iters,
            timed_iters: p.timed_iters,
            repeats: p.repeats,
            batch_size: p.batch_size,
            seq_len: p.seq_len,
            input_seed: p.input_seed,
            methods: ["ft", "krona_merged", "lora_merged", "bitfit", "krona_b"].map(String::from).to_vec(),
            baseline: "ft".into(),
        }
    }
}

/// A run file as written by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub precision: Precision,
    /// Backbone file to fine-tune instead of pre-training a fresh one.
    pub backbone: Option<PathBuf>,
    /// Train every backbone weight instead of attaching adapters.
    pub full_finetune: bool,
    pub model: TransformerConfig,
    pub task: TaskSpec,
    pub adapter: Option<AdapterSection>,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            precision: Precision::F64,
            backbone: None,
            full_finetune: false,
            model: TransformerConfig::default(),
            task: TaskSpec {
                kind: TaskKind::LabelShift,
                ..TaskSpec::default()
            },
            adapter: Some(AdapterSection {
                kind: AdapterKind::Krona,
                placement: None,
                shape: None,
                rank: None,
                scale: None,
                residual_scale_init: None,
                bias_mode: None,
                nonlinearity: None,
                init: None,
                seed: None,
            }),
            pretrain: TrainConfig {
                stop_at_accuracy: Some(0.95),
                ..TrainConfig::default()
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 10,
                ..TrainConfig::default()
            },
            probe: ProbeConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Flags that override values from the run file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub out: Option<PathBuf>,
}

/// A run file with every default expanded; this is what gets echoed into
/// the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub out: PathBuf,
    pub precision: Precision,
    pub backbone: Option<PathBuf>,
    pub model: TransformerConfig,
    pub task: TaskSpec,
    /// Absent for full fine-tuning.
    pub adapter: Option<AdapterSpec>,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub bench: BenchSection,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn parse(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError(format!("{origin}: {e}")))
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            parse(&text, &p.display().to_string())
        }
    }
}

impl RunConfig {
    pub fn resolve(mut self, ov: &Overrides) -> Result<ResolvedConfig, ConfigError> {
        if let Some(seed) = ov.seed {
            self.model.seed = seed;
            self.task.seed = seed;
            self.pretrain.seed = seed;
            self.train.seed = seed;
            self.bench.input_seed = seed;
            if let Some(a) = self.adapter.as_mut() {
                a.seed = Some(seed);
            }
        }
        if let Some(p) = ov.precision {
            self.precision = p;
        }
        self.pretrain.precision = self.precision;
        self.train.precision = self.precision;
        if let Some(out) = &ov.out {
            self.out = out.clone();
        }
        let d = if self.task.kind == TaskKind::FullrankProbe {
            self.task.probe_dim
        } else {
            self.model.d_h
        };
        let adapter = match self.full_finetune {
            true => None,
            false => self.adapter.as_ref().map(|a| a.resolve(d)),
        };
        let resolved = ResolvedConfig {
            adapter,
            out: self.out,
            precision: self.precision,
            backbone: self.backbone,
            model: self.model,
            task: self.task,
            pretrain: self.pretrain,
            train: self.train,
            probe: self.probe,
            bench: self.bench,
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

impl ResolvedConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn wrap(section: &'static str) -> impl Fn(krona::Error) -> ConfigError {
            move |e| ConfigError(format!("[{section}] {e}"))
        }
        self.model.validate().map_err(wrap("model"))?;
        self.task.validate().map_err(wrap("task"))?;
        self.pretrain.validate().map_err(wrap("pretrain"))?;
        self.train.validate().map_err(wrap("train"))?;
        self.bench.protocol().validate().map_err(wrap("bench"))?;
        if let Some(spec) = &self.adapter {
            let d = if self.task.kind == TaskKind::FullrankProbe {
                self.task.probe_dim
            } else {
                self.model.d_h
            };
            spec.validate(d).map_err(wrap("adapter"))?;
        }
        if self.task.kind != TaskKind::FullrankProbe {
            if self.task.vocab > self.model.vocab_size {
                return Err(ConfigError(format!(
                    "[task] vocab {} exceeds the model vocabulary {}",
                    self.task.vocab, self.model.vocab_size
                )));
            }
            if self.task.seq_len > self.model.max_seq_len {
                return Err(ConfigError(format!(
                    "[task] seq_len {} exceeds the model max_seq_len {}",
                    self.task.seq_len, self.model.max_seq_len
                )));
            }
            if self.task.n_classes != self.model.n_classes {
                return Err(ConfigError(format!(
                    "[task] n_classes {} differs from the model's {}",
                    self.task.n_classes, self.model.n_classes
                )));
            }
        }
        if self.probe.steps == 0 || !(self.probe.learning_rate > 0.0) {
            return Err(ConfigError("[probe] steps and learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("resolved config serializes")
    }
}
