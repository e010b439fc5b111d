//! One file per stage: magic, format version, a JSON manifest, then every
//! tensor and stored query as little-endian f64.
//!
//! ```text
//! b"CSEGCKPT" | u32 version | u64 manifest length | manifest | payload
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::config::Config;
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::tensor::Tensor;
use crate::vq_bank::{ClassQueue, VirtualQueryBank};

pub const MAGIC: &[u8; 8] = b"CSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: usize,
    pub config: Config,
    /// Classes seen up to and including `stage`, in plan order.
    pub seen: Vec<ClassId>,
    pub model: SegModel,
    pub bank: VirtualQueryBank,
    /// Seed and stream of the stage's sampling RNG.
    pub rng_seed: u64,
    pub rng_stream: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueueEntry {
    class: ClassId,
    count: usize,
    inserted: u64,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    stage: usize,
    config: String,
    config_hash: String,
    seen: Vec<ClassId>,
    dtype: String,
    tensors: Vec<TensorEntry>,
    prototype_classes: Vec<ClassId>,
    prototype_stage: Vec<usize>,
    bank_capacity: usize,
    bank_dim: usize,
    queues: Vec<QueueEntry>,
    rng_seed: u64,
    rng_stream: u64,
}

pub fn stage_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage-{stage}.ckpt"))
}

/// Highest stage with a checkpoint in `dir`.
pub fn latest_stage(dir: &Path) -> Option<usize> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("stage-")?.strip_suffix(".ckpt")?.parse().ok()
        })
        .max()
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload: Vec<f64> = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.model.params.iter() {
        tensors.push(TensorEntry { name: name.clone(), rows: t.rows(), cols: t.cols(), offset: payload.len() });
        payload.extend_from_slice(t.data());
    }
    let mut queues = Vec::new();
    for (&class, q) in &ckpt.bank.queues {
        queues.push(QueueEntry { class, count: q.vectors.len(), inserted: q.inserted, offset: payload.len() });
        for v in &q.vectors {
            payload.extend_from_slice(v);
        }
    }
    let manifest = Manifest {
        stage: ckpt.stage,
        config: ckpt.config.to_text(),
        config_hash: ckpt.config.hash(),
        seen: ckpt.seen.clone(),
        dtype: "f64le".into(),
        tensors,
        prototype_classes: ckpt.model.proto_classes.clone(),
        prototype_stage: ckpt.model.proto_stage.clone(),
        bank_capacity: ckpt.bank.capacity,
        bank_dim: ckpt.bank.dim,
        queues,
        rng_seed: ckpt.rng_seed,
        rng_stream: ckpt.rng_stream,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let raw = &bytes[20 + len..];
    if !raw.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64"));
    }
    let payload: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let slice = |offset: usize, n: usize| payload.get(offset..offset + n).ok_or_else(|| bad("payload out of range"));

    let config = Config::parse(&manifest.config)?;
    if config.hash() != manifest.config_hash {
        return Err(bad("config hash mismatch"));
    }
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        params.insert(t.name.clone(), Tensor::from_vec(t.rows, t.cols, slice(t.offset, t.rows * t.cols)?.to_vec()));
    }
    let mut model = SegModel::new(&config.model, config.data.image_size, 3, config.data.num_classes, config.seed);
    if params.len() != model.params.len() || model.params.names().any(|n| !params.contains(n)) {
        return Err(bad("parameter set does not match the configured model"));
    }
    model.params = params;
    model.proto_classes = manifest.prototype_classes;
    model.proto_stage = manifest.prototype_stage;

    let mut bank = VirtualQueryBank::new(manifest.bank_capacity, manifest.bank_dim);
    let mut queues = BTreeMap::new();
    for q in &manifest.queues {
        let flat = slice(q.offset, q.count * manifest.bank_dim)?;
        let vectors: VecDeque<Vec<f64>> = flat.chunks(manifest.bank_dim.max(1)).map(<[f64]>::to_vec).collect();
        queues.insert(q.class, ClassQueue { vectors, inserted: q.inserted });
    }
    bank.queues = queues;
    Ok(Checkpoint {
        stage: manifest.stage,
        config,
        seen: manifest.seen,
        model,
        bank,
        rng_seed: manifest.rng_seed,
        rng_stream: manifest.rng_stream,
    })
}

/// Writes through a temporary file so a crash never leaves a partial file.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn sample() -> Checkpoint {
        let mut config = Config::default();
        config.model = ModelConfig { hidden_dim: 8, num_queries: 4, ffn_dim: 16, ..config.model };
        config.seed = 11;
        let mut model = SegModel::new(&config.model, 32, 3, 16, config.seed);
        let mut set = model.prototype_set();
        set.vectors = Tensor::full(2, 8, 0.125);
        set.class_ids = vec![5, 2];
        set.stage_of = vec![1, 1];
        model.set_prototypes(set);
        let mut bank = VirtualQueryBank::new(2, 8);
        for k in 0..3 {
            bank.push(5, &[k as f64 + 0.1; 8]).unwrap();
        }
        bank.push(2, &[-1.5; 8]).unwrap();
        Checkpoint { stage: 2, config, seen: vec![5, 2, 9], model, bank, rng_seed: 11, rng_stream: 2 }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = from_bytes(&to_bytes(&c).unwrap()).unwrap();
        assert_eq!(back.model.params, c.model.params);
        assert_eq!(back.model.proto_classes, c.model.proto_classes);
        assert_eq!(back.bank, c.bank);
        assert_eq!(back.config, c.config);
        assert_eq!((back.stage, back.seen.clone(), back.rng_seed, back.rng_stream), (2, vec![5, 2, 9], 11, 2));
        // FIFO order and insertion counter survive
        assert_eq!(back.bank.queues[&5].vectors[0][0], 1.1);
        assert_eq!(back.bank.queues[&5].inserted, 3);
    }

    #[test]
    fn file_round_trip_and_latest_stage() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(latest_stage(dir.path()), None);
        let c = sample();
        save(&stage_path(dir.path(), 1), &c).unwrap();
        save(&stage_path(dir.path(), 3), &c).unwrap();
        assert_eq!(latest_stage(dir.path()), Some(3));
        assert_eq!(load(&stage_path(dir.path(), 3)).unwrap().model.params, c.model.params);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&bytes[..10]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Checkpoint(_))));
    }
}
