use crate::config::{ConfigError, ResolvedConfig};
use krona::adapters::{AdapterKind, AdapterSpec};
use krona::autograd::{finite_diff_check, Fault, Graph, NodeId};
use krona::bench::{self, BenchReport, METHODS};
use krona::kron::{count_mults, enumerate_factor_shapes};
use krona::model::{build_model, EncoderModel, ParamKey};
use krona::train::{
    self, fit_probe, gen_classify, gen_probe, load_checkpoint, load_model, low_rank_floor, save_checkpoint, save_model,
    write_metrics, Checkpoint, TaskKind, TaskSpec,
};
use krona::{Error, Matrix, Precision, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

pub const GRADCHECK_MAX_WIDTH: usize = 32;
pub const GRADCHECK_THRESHOLD: f64 = 1e-5;
const GRADCHECK_EPS: f64 = 1e-5;
/// Gradients below this are compared in absolute terms; central differences
/// of a parameter the loss ignores sit near `1e-16·|loss|/eps`.
const GRADCHECK_ZERO_TOL: f64 = 1e-8;
const PROBE_BATCH: usize = 8;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Usage(String),
    Core(Error),
    MergeDeviation { deviation: f64, limit: f64 },
    GradcheckFailed { worst: f64 },
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(Error::InvalidSpec(_) | Error::InvalidConfig(_)) => 2,
            CliError::Core(Error::Divergence { .. }) => 3,
            CliError::Core(Error::MergeUnsupported { .. }) => 4,
            CliError::GradcheckFailed { .. } => 5,
            CliError::Core(_) | CliError::MergeDeviation { .. } | CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::MergeDeviation { deviation, limit } => {
                write!(f, "merged forward deviates by {deviation:.3e} (limit {limit:.0e})")
            }
            CliError::GradcheckFailed { worst } => {
                write!(f, "gradient check failed: max relative error {worst:.3e} > {GRADCHECK_THRESHOLD:.0e}")
            }
            CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Exclusive claim on an output directory, released on drop.
pub struct OutDir {
    root: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn lock(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        let lock = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self {
                    root: root.to_path_buf(),
                    lock,
                })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} is locked by another run (delete {} if that run is gone)",
                root.display(),
                lock.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    fs::write(path, serde_json::to_string_pretty(value).expect("json value") + "\n")?;
    Ok(())
}

fn load_backbone<T: Scalar>(cfg: &ResolvedConfig, path: &Path) -> CliResult<EncoderModel<T>> {
    let model: EncoderModel<T> = load_model(path)?;
    if model.config() != &cfg.model {
        return Err(CliError::Config(format!(
            "{} was built with a different [model] section than the config",
            path.display()
        )));
    }
    Ok(model)
}

pub fn train<T: Scalar>(cfg: &ResolvedConfig) -> CliResult {
    let out = OutDir::lock(&cfg.out)?;
    fs::write(out.path("config.resolved.toml"), cfg.to_toml())?;
    if cfg.task.kind == TaskKind::FullrankProbe {
        return train_probe::<T>(cfg, &out);
    }
    let mut model: EncoderModel<T> = match &cfg.backbone {
        Some(path) => load_backbone(cfg, path)?,
        None => {
            let mut m = build_model(&cfg.model)?;
            let base = gen_classify(&TaskSpec {
                kind: TaskKind::SeqClassify,
                ..cfg.task.clone()
            });
            let report = train::pretrain(&mut m, &base, &cfg.pretrain)?;
            write_metrics(&out.path("pretrain_metrics.jsonl"), &report.records)?;
            m
        }
    };
    save_model(&model, &out.path("backbone.krmd"))?;
    if let Some(spec) = &cfg.adapter {
        model.attach_adapters(spec)?;
    }
    let data = gen_classify(&cfg.task);
    let report = train::finetune(&mut model, &data, &cfg.train)?;
    write_metrics(&out.path("metrics.jsonl"), &report.records)?;
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.header.task = Some(cfg.task.clone());
    ckpt.header.train_seed = Some(cfg.train.seed);
    ckpt.header.best_epoch = Some(report.best_epoch);
    ckpt.header.metric = Some(report.best_metric);
    save_checkpoint(&ckpt, &out.path("adapter.krad"))?;
    let summary = json!({
        "best_epoch": report.best_epoch,
        "eval_metric": report.best_metric,
        "steps": report.steps,
        "trainable_params": model.trainable_param_count(),
        "total_params": model.total_param_count(),
        "checkpoint": out.path("adapter.krad"),
    });
    println!("{summary}");
    Ok(())
}

fn train_probe<T: Scalar>(cfg: &ResolvedConfig, out: &OutDir) -> CliResult {
    let spec = cfg
        .adapter
        .as_ref()
        .ok_or_else(|| CliError::Config("the probe task needs an [adapter] section".into()))?;
    let data = gen_probe::<T>(&cfg.task);
    let report = fit_probe(&data, spec, &cfg.probe)?;
    let rank = spec.rank.unwrap_or(1);
    let floor = low_rank_floor(&data.train_x, &data.delta, rank)?;
    let summary = json!({
        "kind": spec.kind,
        "train_mse": report.train_mse,
        "eval_mse": report.eval_mse,
        "rank_floor": { "rank": rank, "mse": floor },
        "history": report.history,
    });
    write_json(&out.path("probe.json"), &summary)?;
    let mut ckpt = Checkpoint::from_states(spec, &[("probe".to_string(), &report.state)]);
    ckpt.header.task = Some(cfg.task.clone());
    ckpt.header.metric = Some(report.eval_mse);
    save_checkpoint(&ckpt, &out.path("adapter.krad"))?;
    println!(
        "{}",
        json!({ "kind": spec.kind, "train_mse": report.train_mse, "eval_mse": report.eval_mse, "rank_floor": floor })
    );
    Ok(())
}

/// Backbone plus the adapters (or bias values) stored in `ckpt`.
fn restore<T: Scalar>(cfg: &ResolvedConfig, backbone: &Path, ckpt: &Checkpoint) -> CliResult<EncoderModel<T>> {
    let mut model = load_backbone::<T>(cfg, backbone)?;
    if let Some(spec) = &ckpt.header.spec {
        model.attach_adapters(spec)?;
    }
    ckpt.apply(&mut model)?;
    Ok(model)
}

pub fn eval<T: Scalar>(cfg: &ResolvedConfig, backbone: &Path, checkpoint: Option<&Path>) -> CliResult {
    let (model, task) = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let task = ckpt.header.task.clone().unwrap_or_else(|| cfg.task.clone());
            (restore::<T>(cfg, backbone, &ckpt)?, task)
        }
        None => (load_backbone::<T>(cfg, backbone)?, cfg.task.clone()),
    };
    let data = gen_classify(&task);
    let ev = train::evaluate(&model, &data.eval)?;
    println!("{}", json!({ "eval_loss": ev.loss, "eval_metric": ev.accuracy, "n_eval": data.eval.len() }));
    Ok(())
}

/// Deviation allowed between merged and unmerged logits.
fn merge_limit<T: Scalar>() -> f64 {
    match T::NAME {
        "f32" => 1e-4,
        _ => 1e-10,
    }
}

pub fn merge<T: Scalar>(cfg: &ResolvedConfig, backbone: &Path, checkpoint: &Path, output: &Path) -> CliResult {
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.header.spec.is_none() {
        return Err(CliError::Usage(format!("{} holds no adapters to merge", checkpoint.display())));
    }
    let model = restore::<T>(cfg, backbone, &ckpt)?;
    let merged = model.merge_all()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.task.seed);
    let len = cfg.task.seq_len.min(cfg.model.max_seq_len);
    let batch: Vec<Vec<usize>> = (0..PROBE_BATCH)
        .map(|_| (0..len).map(|_| rng.random_range(0..cfg.model.vocab_size)).collect())
        .collect();
    let deviation = merged.forward(&batch)?.max_rel_diff(&model.forward(&batch)?)?.to_f64_lossy();
    let limit = merge_limit::<T>();
    if deviation > limit {
        return Err(CliError::MergeDeviation { deviation, limit });
    }
    let dir = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = OutDir::lock(dir)?;
    save_model(&merged, output)?;
    let sites: Vec<String> = model.adapters().keys().map(|s| s.to_string()).collect();
    println!("{}", json!({ "output": output, "sites": sites, "max_rel_deviation": deviation }));
    Ok(())
}

pub fn bench<T: Scalar>(cfg: &ResolvedConfig, methods: Option<Vec<String>>) -> CliResult {
    let mut methods: Vec<String> = methods
        .unwrap_or_else(|| cfg.bench.methods.clone())
        .into_iter()
        .filter(|m| !m.is_empty())
        .collect();
    if methods.is_empty() {
        return Err(CliError::Usage("no benchmark methods given".into()));
    }
    for m in methods.iter().chain([&cfg.bench.baseline]) {
        if !METHODS.contains(&m.as_str()) {
            return Err(CliError::Usage(format!("unknown method `{m}`; expected one of {}", METHODS.join(", "))));
        }
    }
    if !methods.contains(&cfg.bench.baseline) {
        methods.insert(0, cfg.bench.baseline.clone());
    }
    let backbone: EncoderModel<T> = match &cfg.backbone {
        Some(path) => load_backbone(cfg, path)?,
        None => build_model(&cfg.model)?,
    };
    let variants = methods
        .iter()
        .map(|m| Ok((m.as_str(), bench::bench_variant(&backbone, m)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let pairs: Vec<(&str, &EncoderModel<T>)> = variants.iter().map(|(m, v)| (*m, v)).collect();
    let out = OutDir::lock(&cfg.out)?;
    let mut reports: Vec<BenchReport> = bench::measure_suite(&pairs, &cfg.bench.protocol())?;
    bench::normalize(&mut reports, &cfg.bench.baseline)?;
    let table = bench::render_reports(&reports);
    fs::write(out.path("bench.txt"), &table)?;
    write_json(&out.path("bench.json"), &serde_json::to_value(&reports).expect("reports serialize"))?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck<T: Scalar>(cfg: &ResolvedConfig, corrupt: bool) -> CliResult {
    if cfg.model.d_h > GRADCHECK_MAX_WIDTH {
        return Err(CliError::Config(format!(
            "gradcheck runs on models with d_h <= {GRADCHECK_MAX_WIDTH} (got {}); set [model] d_h = 16 or use configs/gradcheck.toml",
            cfg.model.d_h
        )));
    }
    if T::NAME != Precision::F64.name() {
        return Err(CliError::Config(
            "gradcheck needs --precision f64; central differences at eps = 1e-5 are meaningless in f32".into(),
        ));
    }
    let spec = cfg.adapter.clone().unwrap_or_else(|| AdapterSpec::new(AdapterKind::Krona, cfg.model.d_h));
    if corrupt && !spec.kind.is_kronecker() {
        return Err(CliError::Config(format!(
            "--corrupt perturbs the Kronecker kernel, which {} does not use",
            spec.kind
        )));
    }
    let mut model: EncoderModel<T> = build_model(&cfg.model)?;
    model.attach_adapters(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    for key in model.trainable_keys() {
        let p = model.param_mut(key).expect("trainable key exists");
        *p = Matrix::rand_uniform(p.rows(), p.cols(), 0.5, &mut rng);
    }
    let data = gen_classify(&TaskSpec {
        n_train: 4,
        n_eval: 1,
        ..cfg.task.clone()
    });
    let mut g = Graph::new();
    if corrupt {
        g.inject_fault(Fault::KronLinearFactorA);
    }
    let nodes = model.forward_graph(&mut g, &data.train.inputs, true)?;
    let loss = g.cross_entropy(nodes.logits, data.train.labels.clone())?;
    let mut worst = 0.0f64;
    for (key, id) in &nodes.trainable {
        let mut err = finite_diff_check(&mut g, loss, *id, T::lit(GRADCHECK_EPS))?.to_f64_lossy();
        let name = model.key_name(*key);
        let analytic = g.grad(*id).map_or(0.0, |gr| gr.max_abs().to_f64_lossy());
        if analytic <= GRADCHECK_ZERO_TOL {
            // e.g. the attention key bias, which softmax cancels
            let fd = max_central_difference(&mut g, loss, *id)?;
            println!("{name:<32} zero gradient (|analytic| {analytic:.1e}, |fd| {fd:.1e})");
            err = if fd <= GRADCHECK_ZERO_TOL { 0.0 } else { 1.0 };
        } else {
            println!("{name:<32} {err:.3e}");
        }
        worst = worst.max(err);
    }
    let scope = match nodes.trainable.first() {
        Some((ParamKey::Adapter(..), _)) => "adapter",
        _ => "trainable",
    };
    println!("max relative error over {} {scope} tensors: {worst:.3e}", nodes.trainable.len());
    if worst.is_nan() || worst > GRADCHECK_THRESHOLD {
        return Err(CliError::GradcheckFailed { worst });
    }
    Ok(())
}

/// Largest central difference of `loss` over the coordinates of `param`.
fn max_central_difference<T: Scalar>(g: &mut Graph<'_, T>, loss: NodeId, param: NodeId) -> CliResult<f64> {
    let original = g.value(param).clone();
    let eps = T::lit(GRADCHECK_EPS);
    let mut worst = 0.0f64;
    for i in 0..original.len() {
        let mut f = [T::zero(); 2];
        for (slot, sign) in f.iter_mut().zip([T::one(), -T::one()]) {
            let mut v = original.clone();
            v.data_mut()[i] += sign * eps;
            g.set_value(param, v)?;
            g.recompute()?;
            *slot = g.value(loss).get(0, 0);
        }
        worst = worst.max(((f[0] - f[1]) / (eps + eps)).abs().to_f64_lossy());
    }
    g.set_value(param, original)?;
    g.recompute()?;
    Ok(worst)
}

pub fn shapes(d_in: usize, d_out: usize) -> CliResult {
    if d_in == 0 || d_out == 0 {
        return Err(CliError::Usage("dimensions must be positive".into()));
    }
    println!(
        "{:>12} {:>12} {:>8} {:>12} {:>12} {:>9} degenerate",
        "a", "b", "params", "naive", "vec_trick", "reduction"
    );
    for s in enumerate_factor_shapes(d_in, d_out) {
        let c = count_mults(&s);
        println!(
            "{:>12} {:>12} {:>8} {:>12} {:>12} {:>9.2} {}",
            format!("{}x{}", s.a.0, s.a.1),
            format!("{}x{}", s.b.0, s.b.1),
            s.param_count(),
            c.naive,
            c.vec_trick,
            c.reduction(),
            if c.is_degenerate() { "yes" } else { "no" }
        );
    }
    Ok(())
}
