//! Inference latency and multiply-count benchmarks.
//!
//! Each method runs a warm-up of untimed forwards, then `repeats` rounds of
//! `timed_iters` timed forwards on one fixed random input. Timed forwards
//! of different methods alternate one by one, so slow drift in machine load
//! is shared between them.

use crate::adapters::{AdapterKind, AdapterSpec, InitScheme};
use crate::error::{Error, Result};
use crate::kron::{count_mults, MultCount};
use crate::matrix::mult_counter;
use crate::model::EncoderModel;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Mutex;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchProtocol {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub repeats: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Seed of the dummy input, drawn once and reused by every repeat.
    pub input_seed: u64,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self {
            warmup_iters: 150,
            timed_iters: 200,
            repeats: 3,
            batch_size: 1,
            seq_len: 10,
            input_seed: 0,
        }
    }
}

impl BenchProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.timed_iters == 0 || self.repeats == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::InvalidConfig(
                "timed_iters, repeats, batch_size and seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dummy_input(&self, vocab: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.input_seed);
        (0..self.batch_size)
            .map(|_| (0..self.seq_len).map(|_| rng.random_range(0..vocab)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub repeats: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub clock: String,
    pub input_seed: u64,
    pub input_reused: bool,
    /// Mean latency of each repeat.
    pub repeat_means_ns: Vec<f64>,
    pub mean_ns: f64,
    pub std_ns: f64,
    /// Scalar multiplications of one forward pass.
    pub forward_mults: u64,
    /// Per-site adapter branch counts, where the method has a branch.
    pub branch_mults: Option<MultCount>,
    /// Percentage of the baseline mean, filled by [`normalize`].
    pub normalized: Option<f64>,
}

/// Serializes benchmarks within the process so they never contend.
static BENCH_LOCK: Mutex<()> = Mutex::new(());

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Benchmarks one model.
pub fn measure_latency<T: Scalar>(model: &EncoderModel<T>, protocol: &BenchProtocol, method: &str) -> Result<BenchReport> {
    Ok(measure_suite(&[(method, model)], protocol)?.remove(0))
}

/// Benchmarks several models on the same input with interleaved repeats.
pub fn measure_suite<T: Scalar>(methods: &[(&str, &EncoderModel<T>)], protocol: &BenchProtocol) -> Result<Vec<BenchReport>> {
    protocol.validate()?;
    if methods.is_empty() {
        return Err(Error::Bench("no methods to benchmark".into()));
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let vocab = methods.iter().map(|(_, m)| m.config().vocab_size).min().unwrap_or(1);
    let input = protocol.dummy_input(vocab);
    let mut mults = Vec::with_capacity(methods.len());
    for (_, m) in methods {
        let (out, count) = mult_counter::measure(|| m.forward(&input));
        out?;
        mults.push(count);
    }
    for (_, m) in methods {
        for _ in 0..protocol.warmup_iters {
            std::hint::black_box(m.forward(&input)?);
        }
    }
    let mut samples = vec![Vec::with_capacity(protocol.repeats); methods.len()];
    let mut totals = vec![0u128; methods.len()];
    for r in 0..protocol.repeats {
        totals.iter_mut().for_each(|t| *t = 0);
        for it in 0..protocol.timed_iters {
            // rotate the order so no method always runs first
            for k in 0..methods.len() {
                let i = (k + r + it) % methods.len();
                let m = methods[i].1;
                let start = Instant::now();
                std::hint::black_box(m.forward(std::hint::black_box(&input))?);
                totals[i] += start.elapsed().as_nanos();
            }
        }
        for (s, &t) in samples.iter_mut().zip(&totals) {
            s.push(t as f64 / protocol.timed_iters as f64);
        }
    }
    Ok(methods
        .iter()
        .zip(samples)
        .zip(mults)
        .map(|(((name, m), repeat_means_ns), forward_mults)| {
            let (mean_ns, std_ns) = mean_std(&repeat_means_ns);
            BenchReport {
                method: name.to_string(),
                warmup_iters: protocol.warmup_iters,
                timed_iters: protocol.timed_iters,
                repeats: protocol.repeats,
                batch_size: protocol.batch_size,
                seq_len: protocol.seq_len,
                clock: "monotonic".into(),
                input_seed: protocol.input_seed,
                input_reused: true,
                repeat_means_ns,
                mean_ns,
                std_ns,
                forward_mults,
                branch_mults: m
                    .adapter_spec()
                    .and_then(|s| s.shape.filter(|_| s.kind.is_kronecker()))
                    .map(|shape| count_mults(&shape)),
                normalized: None,
            }
        })
        .collect())
}

/// Expresses every mean latency as a percentage of `baseline`'s.
pub fn normalize(reports: &mut [BenchReport], baseline: &str) -> Result<()> {
    let base = reports
        .iter()
        .find(|r| r.method == baseline)
        .map(|r| r.mean_ns)
        .ok_or_else(|| Error::Bench(format!("baseline `{baseline}` not among the reports")))?;
    for r in reports.iter_mut() {
        r.normalized = Some(if r.method == baseline { 100.0 } else { 100.0 * r.mean_ns / base });
    }
    Ok(())
}

/// Plain-text table, one line per method.
pub fn render_reports(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>10} {:>10} {:>14}",
        "method", "mean_ns", "std_ns", "norm_%", "forward_mults"
    );
    for r in reports {
        let norm = r.normalized.map_or("-".into(), |v| format!("{v:.1}"));
        let _ = writeln!(
            out,
            "{:<16} {:>12.0} {:>10.0} {:>10} {:>14}",
            r.method, r.mean_ns, r.std_ns, norm, r.forward_mults
        );
    }
    out
}

/// Per-site multiply counts of one adapter branch for one input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub method: String,
    pub params: usize,
    pub branch_mults: u64,
    /// Dense multiply with the reconstructed update, for Kronecker kinds.
    pub naive_mults: Option<u64>,
    /// Set when the reconstruction-free form is not cheaper.
    pub degenerate: bool,
}

pub fn flop_report(spec: &AdapterSpec, d_h: usize) -> Result<FlopRow> {
    spec.validate(d_h)?;
    let params = spec.params_per_site(d_h);
    let row = if spec.kind.is_kronecker() {
        let c = count_mults(&spec.shape.expect("validated"));
        FlopRow {
            method: spec.kind.to_string(),
            params,
            branch_mults: c.vec_trick,
            naive_mults: Some(c.naive),
            degenerate: c.is_degenerate(),
        }
    } else {
        let r = spec.rank.unwrap_or(0) as u64;
        FlopRow {
            method: spec.kind.to_string(),
            params,
            branch_mults: 2 * d_h as u64 * r,
            naive_mults: None,
            degenerate: false,
        }
    };
    Ok(row)
}

/// Method names accepted by [`bench_variant`].
pub const METHODS: [&str; 11] = [
    "ft",
    "bitfit",
    "krona_merged",
    "lora_merged",
    "krona",
    "lora",
    "krona_b",
    "krona_b_res",
    "krona_b_sigres",
    "pa",
    "seq_adapter",
];

/// The model a named method runs at inference time. Adapters get nonzero
/// (normal) initial values; `*_merged` variants fold them into the backbone.
pub fn bench_variant<T: Scalar>(backbone: &EncoderModel<T>, method: &str) -> Result<EncoderModel<T>> {
    let d = backbone.config().d_h;
    let base = backbone.backbone_only();
    let attach = |kind: AdapterKind| -> Result<EncoderModel<T>> {
        let mut m = base.clone();
        let init = if kind == AdapterKind::Bitfit { InitScheme::ZeroSideKaiming } else { InitScheme::BothNormal };
        m.attach_adapters(&AdapterSpec::new(kind, d).with_init(init))?;
        Ok(m)
    };
    match method {
        "ft" => Ok(base),
        "krona_merged" => attach(AdapterKind::Krona)?.merge_all(),
        "lora_merged" => attach(AdapterKind::Lora)?.merge_all(),
        other => {
            let kind: AdapterKind = other
                .parse()
                .map_err(|_| Error::Bench(format!("unknown method `{other}`; expected one of {}", METHODS.join(", "))))?;
            attach(kind)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::FactorShape;
    use crate::model::{build_model, TransformerConfig};

    fn quick() -> BenchProtocol {
        BenchProtocol {
            warmup_iters: 2,
            timed_iters: 3,
            repeats: 2,
            ..BenchProtocol::default()
        }
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let p = BenchProtocol::default();
        assert_eq!((p.warmup_iters, p.timed_iters, p.repeats, p.batch_size, p.seq_len), (150, 200, 3, 1, 10));
    }

    #[test]
    fn one_sample_when_one_iteration() {
        let m: EncoderModel<f64> = build_model(&TransformerConfig::default()).unwrap();
        let p = BenchProtocol {
            warmup_iters: 0,
            timed_iters: 1,
            repeats: 1,
            ..BenchProtocol::default()
        };
        let r = measure_latency(&m, &p, "ft").unwrap();
        assert_eq!(r.repeat_means_ns.len(), 1);
        assert_eq!(r.std_ns, 0.0);
        assert!(r.mean_ns > 0.0);
    }

    #[test]
    fn normalization() {
        let m: EncoderModel<f64> = build_model(&TransformerConfig::default()).unwrap();
        let mut reports = measure_suite(&[("ft", &m), ("again", &m)], &quick()).unwrap();
        normalize(&mut reports, "ft").unwrap();
        assert_eq!(reports[0].normalized, Some(100.0));
        reports[1].mean_ns = reports[0].mean_ns * 1.27;
        normalize(&mut reports, "ft").unwrap();
        assert!((reports[1].normalized.unwrap() - 127.0).abs() < 1e-9);
        assert!(normalize(&mut reports, "missing").is_err());
        let text = render_reports(&reports);
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn multiply_counts_by_method() {
        let m: EncoderModel<f64> = build_model(&TransformerConfig::default()).unwrap();
        let variants: Vec<(&str, EncoderModel<f64>)> =
            METHODS.iter().map(|&n| (n, bench_variant(&m, n).unwrap())).collect();
        let refs: Vec<(&str, &EncoderModel<f64>)> = variants.iter().map(|(n, v)| (*n, v)).collect();
        let reports = measure_suite(&refs, &quick()).unwrap();
        let count = |name: &str| reports.iter().find(|r| r.method == name).unwrap().forward_mults;
        let base = count("ft");
        for same in ["bitfit", "krona_merged", "lora_merged"] {
            assert_eq!(count(same), base, "{same}");
        }
        for more in ["krona", "lora", "krona_b", "krona_b_res", "krona_b_sigres", "pa", "seq_adapter"] {
            assert!(count(more) > base, "{more}");
        }
        assert!(bench_variant(&m, "nope").is_err());
    }

    #[test]
    fn flop_rows() {
        let spec = AdapterSpec::new(AdapterKind::Krona, 768).with_shape(FactorShape::reversed(32, 24));
        let row = flop_report(&spec, 768).unwrap();
        assert_eq!((row.branch_mults, row.naive_mults), (36864, Some(589824)));
        assert!(!row.degenerate);
        let row = flop_report(&AdapterSpec::new(AdapterKind::Lora, 768), 768).unwrap();
        assert_eq!(row.branch_mults, 1536);
        let spec = AdapterSpec::new(AdapterKind::Krona, 768).with_shape(FactorShape::new((1, 1), (768, 768)));
        assert!(flop_report(&spec, 768).unwrap().degenerate);
    }

    #[test]
    fn empty_suite_is_an_error() {
        let none: [(&str, &EncoderModel<f64>); 0] = [];
        assert!(measure_suite(&none, &quick()).is_err());
    }
}
