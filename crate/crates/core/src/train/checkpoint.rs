//! Binary container shared by adapter checkpoints and backbone files:
//!
//! ```text
//! magic (4 bytes) | version u16 LE | header length u32 LE | JSON header | f64 LE values
//! ```
//!
//! Values follow the header's tensor list in order, each tensor row-major.

use super::task::TaskSpec;
use crate::adapters::{AdapterSpec, AdapterState};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{build_model, EncoderModel, TransformerConfig, TuneMode};
use crate::scalar::Scalar;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KRAD";
pub const MODEL_MAGIC: &[u8; 4] = b"KRMD";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub mode: TuneMode,
    pub spec: Option<AdapterSpec>,
    pub model: Option<TransformerConfig>,
    pub task: Option<TaskSpec>,
    pub train_seed: Option<u64>,
    pub best_epoch: Option<usize>,
    pub metric: Option<f64>,
    pub tensors: Vec<TensorInfo>,
}

/// The trainable tensors of a fine-tuning run, stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Matrix<f64>>,
}

impl Checkpoint {
    /// Captures the model's trainable set (adapters, or biases under BitFit).
    pub fn from_model<T: Scalar>(model: &EncoderModel<T>) -> Self {
        let keys = model.trainable_keys();
        let tensors: Vec<Matrix<f64>> = keys
            .iter()
            .map(|&k| model.param(k).expect("trainable key exists").cast())
            .collect();
        let infos = keys
            .iter()
            .zip(&tensors)
            .map(|(&k, m)| TensorInfo {
                name: model.key_name(k),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                mode: model.mode(),
                spec: model.adapter_spec().cloned(),
                model: Some(model.config().clone()),
                task: None,
                train_seed: None,
                best_epoch: None,
                metric: None,
                tensors: infos,
            },
            tensors,
        }
    }

    /// Checkpoint of bare adapter states keyed by site name.
    pub fn from_states<T: Scalar>(spec: &AdapterSpec, states: &[(String, &AdapterState<T>)]) -> Self {
        let mut infos = Vec::new();
        let mut tensors = Vec::new();
        for (site, st) in states {
            for (name, m) in st.tensors() {
                infos.push(TensorInfo {
                    name: format!("{site}.adapter.{name}"),
                    rows: m.rows(),
                    cols: m.cols(),
                });
                tensors.push(m.cast());
            }
        }
        Self {
            header: CheckpointHeader {
                mode: TuneMode::Adapters,
                spec: Some(spec.clone()),
                model: None,
                task: None,
                train_seed: None,
                best_epoch: None,
                metric: None,
                tensors: infos,
            },
            tensors,
        }
    }

    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Writes the stored tensors into a model with the same adapter
    /// configuration attached.
    pub fn apply<T: Scalar>(&self, model: &mut EncoderModel<T>) -> Result<()> {
        let h = &self.header;
        if h.mode != model.mode() {
            return Err(Error::Format(format!(
                "checkpoint trains {:?} parameters but the model is set up for {:?}",
                h.mode,
                model.mode()
            )));
        }
        let ours = h.spec.as_ref().map(|s| s.kind);
        let theirs = model.adapter_spec().map(|s| s.kind);
        if ours != theirs {
            return Err(Error::Format(format!(
                "checkpoint holds {} adapters but the model has {}",
                ours.map_or("no".into(), |k| k.to_string()),
                theirs.map_or("none".into(), |k| k.to_string())
            )));
        }
        if let (Some(a), Some(b)) = (&h.spec, model.adapter_spec()) {
            if a != b {
                return Err(Error::Format("adapter spec differs from the model's".into()));
            }
        }
        let keys = model.trainable_keys();
        if keys.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                keys.len()
            )));
        }
        for (info, value) in h.tensors.iter().zip(&self.tensors) {
            let key = keys
                .iter()
                .copied()
                .find(|&k| model.key_name(k) == info.name)
                .ok_or_else(|| Error::Format(format!("model has no tensor `{}`", info.name)))?;
            let slot = model.param_mut(key).expect("key exists");
            if slot.shape() != value.shape() {
                return Err(Error::Format(format!("tensor `{}` has the wrong shape", info.name)));
            }
            *slot = value.cast();
        }
        Ok(())
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn write_container<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, tensors: &[Matrix<f64>]) -> Result<()> {
    let json = serde_json::to_vec_pretty(header).map_err(|e| format_err(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| format_err("header too large"))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    for t in tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 4], shapes: impl Fn(&H) -> Vec<(usize, usize)>) -> Result<(H, Vec<Matrix<f64>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[..4] != magic {
        return Err(format_err(format!(
            "{} is not a {} file",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(10..10 + len).ok_or_else(|| format_err("truncated header"))?;
    let header: H = serde_json::from_slice(body).map_err(|e| format_err(format!("bad header: {e}")))?;
    let mut data = bytes[10 + len..].chunks_exact(8);
    let mut tensors = Vec::new();
    for (rows, cols) in shapes(&header) {
        let values: Vec<f64> = data
            .by_ref()
            .take(rows * cols)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.len() != rows * cols {
            return Err(format_err("truncated tensor data"));
        }
        tensors.push(Matrix::new(rows, cols, values).map_err(|e| format_err(e.to_string()))?);
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(format_err("trailing bytes after tensor data"));
    }
    Ok((header, tensors))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if ckpt.header.tensors.len() != ckpt.tensors.len() {
        return Err(format_err("header and tensor list disagree"));
    }
    write_container(path, CHECKPOINT_MAGIC, &ckpt.header, &ckpt.tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, tensors) = read_container(path, CHECKPOINT_MAGIC, |h: &CheckpointHeader| {
        h.tensors.iter().map(|t| (t.rows, t.cols)).collect()
    })?;
    Ok(Checkpoint { header, tensors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub config: TransformerConfig,
    pub tensors: Vec<TensorInfo>,
}

/// Writes the backbone tensors (adapters are not included).
pub fn save_model<T: Scalar>(model: &EncoderModel<T>, path: &Path) -> Result<()> {
    let tensors: Vec<Matrix<f64>> = model.params().iter().map(|p| p.value.cast()).collect();
    let header = ModelHeader {
        config: model.config().clone(),
        tensors: model
            .params()
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    write_container(path, MODEL_MAGIC, &header, &tensors)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<EncoderModel<T>> {
    let (header, tensors) = read_container(path, MODEL_MAGIC, |h: &ModelHeader| {
        h.tensors.iter().map(|t| (t.rows, t.cols)).collect()
    })?;
    let mut model = build_model::<T>(&header.config)?;
    let named = header
        .tensors
        .into_iter()
        .zip(tensors)
        .map(|(info, m)| (info.name, m.cast()))
        .collect();
    model.load_backbone(named)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, AdapterKind};
    use crate::kron::FactorShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 10,
            max_seq_len: 5,
            d_h: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 32,
            n_classes: 3,
            seed: 4,
        }
    }

    fn randomized(kind: AdapterKind) -> EncoderModel<f64> {
        let mut m: EncoderModel<f64> = build_model(&small()).unwrap();
        m.attach_adapters(&AdapterSpec::new(kind, 16).with_bias_mode(if kind == AdapterKind::KronaBRes { 2 } else { 0 }))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in m.trainable_keys() {
            let p = m.param_mut(k).unwrap();
            *p = Matrix::rand_normal(p.rows(), p.cols(), 1.0, &mut rng);
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [AdapterKind::Krona, AdapterKind::KronaBRes, AdapterKind::Bitfit] {
            let m = randomized(kind);
            let mut ck = Checkpoint::from_model(&m);
            ck.header.metric = Some(0.8125);
            ck.header.best_epoch = Some(3);
            let path = dir.path().join(format!("{kind}.krad"));
            save_checkpoint(&ck, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, ck);
            let mut fresh: EncoderModel<f64> = build_model(&small()).unwrap();
            fresh.attach_adapters(m.adapter_spec().unwrap()).unwrap();
            back.apply(&mut fresh).unwrap();
            assert_eq!(fresh, m);
        }
    }

    #[test]
    fn single_site_size() {
        let spec = AdapterSpec::new(AdapterKind::Krona, 768).with_shape(FactorShape::reversed(32, 24));
        let st = init_adapter::<f64>(&spec, 768).unwrap();
        let ck = Checkpoint::from_states(&spec, &[("layer0.query".into(), &st)]);
        assert_eq!(ck.value_count(), 1536);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.krad");
        save_checkpoint(&ck, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 10 + header_len + 8 * 1536);
        assert_eq!(&bytes[..4], b"KRAD");
    }

    #[test]
    fn kind_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.krad");
        save_checkpoint(&Checkpoint::from_model(&randomized(AdapterKind::Krona)), &path).unwrap();
        let mut lora: EncoderModel<f64> = build_model(&small()).unwrap();
        lora.attach_adapters(&AdapterSpec::new(AdapterKind::Lora, 16)).unwrap();
        let err = load_checkpoint(&path).unwrap().apply(&mut lora).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.krad");
        save_checkpoint(&Checkpoint::from_model(&randomized(AdapterKind::Krona)), &path).unwrap();
        let good = std::fs::read(&path).unwrap();
        let cases: Vec<Vec<u8>> = vec![
            good[..good.len() - 3].to_vec(),
            [&good[..], &[0u8; 8]].concat(),
            [b"KRMD", &good[4..]].concat(),
            [&good[..4], &2u16.to_le_bytes(), &good[6..]].concat(),
            good[..12].to_vec(),
        ];
        for bytes in cases {
            std::fs::write(&path, bytes).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        }
    }

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.krmd");
        let m = randomized(AdapterKind::Krona);
        save_model(&m, &path).unwrap();
        let back: EncoderModel<f64> = load_model(&path).unwrap();
        assert_eq!(back, m.backbone_only());
        assert!(load_checkpoint(&path).is_err());
        let back32: EncoderModel<f32> = load_model(&path).unwrap();
        assert_eq!(back32.params().len(), m.params().len());
    }
}
