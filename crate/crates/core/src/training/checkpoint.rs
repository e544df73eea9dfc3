//! `checkpoint-<step>/` directories: `manifest.json` plus a flat
//! little-endian tensor blob `tensors.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{LambState, LossStats, TrainConfig, TrainState};
use crate::corpus::WindowSampler;
use crate::error::{Error, Result};
use crate::model::forward::ModelRng;
use crate::model::{ModelParameters, Scalar};

const FORMAT: &str = "hybridlm-checkpoint";
const VERSION: u32 = 1;
const BLOB: &str = "tensors.bin";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    /// Hex-encoded 32-byte seed.
    seed: String,
    stream: u64,
    /// Decimal string; the value can exceed 64 bits.
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ModelRng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ModelRng> {
        let bad = |m: &str| Error::corrupt("checkpoint manifest", format!("rng {m}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| bad("seed is not hex"))?;
        }
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = ModelRng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    optimizer_step: u64,
    config: TrainConfig,
    rng: RngState,
    sampler: WindowSampler,
    stats: LossStats,
    blob: String,
    blob_bytes: u64,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_dir_name(step: u64) -> String {
    format!("checkpoint-{step}")
}

/// Parameters, then first moments, then second moments, each in
/// [`ModelParameters::tensors`] order.
fn groups(state: &TrainState) -> [(&'static str, &ModelParameters<f32>); 3] {
    [
        ("params", &state.params),
        ("m", &state.optimizer.m),
        ("v", &state.optimizer.v),
    ]
}

/// Write `run_dir/checkpoint-<step>/` atomically: everything goes into a
/// temporary sibling directory that is renamed into place once complete.
pub fn save_checkpoint(run_dir: &Path, state: &TrainState) -> Result<PathBuf> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (prefix, p) in groups(state) {
        for (name, _, shape, data) in p.tensors() {
            entries.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                offset: blob.len() as u64,
                shape,
                dtype: f32::DTYPE.to_string(),
            });
            for &x in data {
                x.write_le(&mut blob);
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step: state.step,
        optimizer_step: state.optimizer.step,
        config: state.config.clone(),
        rng: RngState::capture(&state.rng),
        sampler: state.sampler.clone(),
        stats: state.stats,
        blob: BLOB.into(),
        blob_bytes: blob.len() as u64,
        tensors: entries,
    };

    let final_dir = run_dir.join(checkpoint_dir_name(state.step));
    let tmp = run_dir.join(format!(
        ".{}.tmp-{}",
        checkpoint_dir_name(state.step),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = tmp.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        fs::File::open(&path)
            .and_then(|f| f.sync_all())
            .map_err(|e| Error::io(&path, e))
    };
    write(BLOB, &blob)?;
    write(
        MANIFEST,
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
    Ok(final_dir)
}

/// Load a checkpoint directory. Any inconsistency between the manifest, the
/// configured shapes and the blob is reported; no partial state is returned.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::input(format!(
            "no checkpoint manifest at {}",
            manifest_path.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| {
        Error::corrupt(
            "checkpoint manifest",
            format!("{}: {e}", manifest_path.display()),
        )
    })?;
    let bad = |msg: String| Error::corrupt("checkpoint", format!("{}: {msg}", dir.display()));
    if m.format != FORMAT || m.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} version {}",
            m.format, m.version
        )));
    }
    if m.step > m.config.schedule.total_steps {
        return Err(bad(format!("step {} beyond total_steps", m.step)));
    }
    m.config
        .validate()
        .map_err(|e| bad(format!("invalid config: {e}")))?;

    let blob_path = dir.join(&m.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() as u64 != m.blob_bytes {
        return Err(bad(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            m.blob_bytes
        )));
    }

    let template = ModelParameters::<f32>::zeros(&m.config.model);
    let expected: Vec<(String, Vec<usize>)> = ["params", "m", "v"]
        .iter()
        .flat_map(|prefix| {
            template
                .tensors()
                .into_iter()
                .map(move |(name, _, shape, _)| (format!("{prefix}.{name}"), shape))
        })
        .collect();
    if expected.len() != m.tensors.len() {
        return Err(bad(format!(
            "index lists {} tensors, config implies {}",
            m.tensors.len(),
            expected.len()
        )));
    }
    let per_group = expected.len() / 3;
    let mut loaded = [template.clone(), template.clone(), template];
    let mut cursor = 0u64;
    for (k, (entry, (name, shape))) in m.tensors.iter().zip(&expected).enumerate() {
        if &entry.name != name || &entry.shape != shape {
            return Err(bad(format!(
                "tensor {k} is {} {:?}, config implies {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.dtype != f32::DTYPE {
            return Err(bad(format!("tensor {name} has dtype {}", entry.dtype)));
        }
        if entry.offset != cursor {
            return Err(bad(format!(
                "tensor {name} at offset {}, expected {cursor}",
                entry.offset
            )));
        }
        let count: usize = shape.iter().product();
        let end = cursor + (count * f32::BYTES) as u64;
        if end > blob.len() as u64 {
            return Err(bad(format!("tensor {name} runs past the end of the blob")));
        }
        let data: Vec<f32> = blob[cursor as usize..end as usize]
            .chunks_exact(f32::BYTES)
            .map(f32::read_le)
            .collect();
        loaded[k / per_group].load_tensor(k % per_group, &data)?;
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(bad(format!(
            "{} trailing bytes in blob",
            blob.len() as u64 - cursor
        )));
    }
    let [params, mo, vo] = loaded;
    Ok(TrainState {
        rng: m.rng.restore()?,
        config: m.config,
        params,
        optimizer: LambState {
            m: mo,
            v: vo,
            step: m.optimizer_step,
        },
        step: m.step,
        sampler: m.sampler,
        stats: m.stats,
    })
}

/// The highest-step complete checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("checkpoint-"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if entry.path().join(MANIFEST).is_file() && best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}
