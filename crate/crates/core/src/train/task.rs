use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SeqClassify,
    LabelShift,
    FullrankProbe,
}

/// Weight update hidden in the probe targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDelta {
    /// `P_a ⊗ P_b` for two seeded `√d×√d` permutations: a full-rank
    /// permutation of `d` coordinates.
    #[default]
    KronPermutation,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Label map for `label_shift`; defaults to `c → (c+1) mod n_classes`.
    pub permutation: Option<Vec<usize>>,
    /// Feature width for `fullrank_probe`.
    pub probe_dim: usize,
    pub probe_delta: ProbeDelta,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::SeqClassify,
            vocab: 32,
            seq_len: 16,
            n_classes: 4,
            n_train: 1024,
            n_eval: 512,
            seed: 0,
            permutation: None,
            probe_dim: 16,
            probe_delta: ProbeDelta::KronPermutation,
        }
    }
}

impl TaskSpec {
    pub fn probe(dim: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::FullrankProbe,
            probe_dim: dim,
            n_train: 256,
            n_eval: 256,
            seed,
            ..Self::default()
        }
    }

    /// The same inputs with permuted labels.
    pub fn shifted(&self) -> Self {
        Self {
            kind: TaskKind::LabelShift,
            ..self.clone()
        }
    }

    pub fn label_map(&self) -> Vec<usize> {
        self.permutation
            .clone()
            .unwrap_or_else(|| (0..self.n_classes).map(|c| (c + 1) % self.n_classes).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_train == 0 || self.n_eval == 0 {
            return bad("n_train and n_eval must be positive".into());
        }
        match self.kind {
            TaskKind::FullrankProbe => {
                let root = (self.probe_dim as f64).sqrt().round() as usize;
                if self.probe_delta == ProbeDelta::KronPermutation && root * root != self.probe_dim {
                    return bad(format!("probe_dim {} must be a perfect square", self.probe_dim));
                }
                if self.probe_dim == 0 {
                    return bad("probe_dim must be positive".into());
                }
            }
            _ => {
                if self.n_classes < 2 || self.n_classes > self.vocab {
                    return bad(format!("n_classes {} must be in 2..={}", self.n_classes, self.vocab));
                }
                if self.seq_len == 0 {
                    return bad("seq_len must be positive".into());
                }
                let mut map = self.label_map();
                if map.len() != self.n_classes {
                    return bad("permutation length must equal n_classes".into());
                }
                map.sort_unstable();
                if map.iter().enumerate().any(|(i, &c)| i != c) {
                    return bad("permutation is not a bijection".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifySplit {
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl ClassifySplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyData {
    pub train: ClassifySplit,
    pub eval: ClassifySplit,
    pub n_classes: usize,
}

/// Regression pairs `y = x(W + ΔW)` for the expressivity probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData<T: Scalar> {
    pub w: Matrix<T>,
    pub delta: Matrix<T>,
    pub train_x: Matrix<T>,
    pub train_y: Matrix<T>,
    pub eval_x: Matrix<T>,
    pub eval_y: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset<T: Scalar> {
    Classify(ClassifyData),
    Probe(ProbeData<T>),
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn gen_task<T: Scalar>(spec: &TaskSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    Ok(match spec.kind {
        TaskKind::FullrankProbe => Dataset::Probe(gen_probe(spec)),
        _ => Dataset::Classify(gen_classify(spec)),
    })
}

/// Tokens are grouped by residue `t mod n_classes`; each sequence is biased
/// toward one group and labelled with the group that occurs most often.
/// Sequences with a tied majority are redrawn. `label_shift` relabels the
/// same sequences through [`TaskSpec::label_map`].
pub fn gen_classify(spec: &TaskSpec) -> ClassifyData {
    let map = spec.label_map();
    let shift = spec.kind == TaskKind::LabelShift;
    let split = |rng: &mut ChaCha8Rng, n: usize| {
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        while labels.len() < n {
            let (seq, label) = draw_sequence(rng, spec);
            if let Some(label) = label {
                inputs.push(seq);
                labels.push(if shift { map[label] } else { label });
            }
        }
        ClassifySplit { inputs, labels }
    };
    ClassifyData {
        train: split(&mut stream(spec.seed, 0), spec.n_train),
        eval: split(&mut stream(spec.seed, 1), spec.n_eval),
        n_classes: spec.n_classes,
    }
}

fn draw_sequence(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> (Vec<usize>, Option<usize>) {
    let c = spec.n_classes;
    let favored = rng.random_range(0..c);
    let group: Vec<usize> = (0..spec.vocab).filter(|t| t % c == favored).collect();
    let seq: Vec<usize> = (0..spec.seq_len)
        .map(|_| {
            if rng.random_bool(0.4) {
                group[rng.random_range(0..group.len())]
            } else {
                rng.random_range(0..spec.vocab)
            }
        })
        .collect();
    let mut counts = vec![0usize; c];
    for &t in &seq {
        counts[t % c] += 1;
    }
    let max = *counts.iter().max().expect("n_classes ≥ 2");
    let mut winners = counts.iter().enumerate().filter(|(_, &n)| n == max);
    let first = winners.next().map(|(i, _)| i);
    (seq, if winners.next().is_some() { None } else { first })
}

fn permutation_matrix<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut m = Matrix::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        m.set(i, j, T::one());
    }
    m
}

pub fn gen_probe<T: Scalar>(spec: &TaskSpec) -> ProbeData<T> {
    let d = spec.probe_dim;
    let mut rng = stream(spec.seed, 2);
    let w = Matrix::rand_normal(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let delta = match spec.probe_delta {
        ProbeDelta::Zero => Matrix::zeros(d, d),
        ProbeDelta::KronPermutation => {
            let r = (d as f64).sqrt().round() as usize;
            let pa = permutation_matrix::<T>(r, &mut rng);
            let pb = permutation_matrix::<T>(r, &mut rng);
            crate::kron::kron(&pa, &pb)
        }
    };
    let target = w.add(&delta).expect("square");
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let x = Matrix::rand_normal(n, d, 1.0, rng);
        let y = x.matmul(&target).expect("shapes agree");
        (x, y)
    };
    let (train_x, train_y) = make(&mut stream(spec.seed, 0), spec.n_train);
    let (eval_x, eval_y) = make(&mut stream(spec.seed, 1), spec.n_eval);
    ProbeData {
        w,
        delta,
        train_x,
        train_y,
        eval_x,
        eval_y,
    }
}
