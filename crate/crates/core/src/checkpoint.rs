//! Versioned, checksummed checkpoint container.
//!
//! ```text
//! b"DHZCKPT\0" | version: u32 LE | header_len: u64 LE | header (JSON)
//!   | payload: f64 LE arrays, concatenated | sha256 of all preceding bytes
//! ```
//!
//! The header lists every array by name, shape and offset. Saving writes a
//! temporary sibling file and renames it into place.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParameterSet;
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::trainer::{CheckpointState, LossRecord, ModelConfig, Progress, TrainConfig};

const MAGIC: &[u8; 8] = b"DHZCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const GROUPS: [&str; 3] = ["transmission", "airlight", "discriminator"];

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    adam_steps: [u64; 3],
    rng: RngState,
    order: Vec<usize>,
    cursor: usize,
    progress: Progress,
    history: Vec<LossRecord>,
    arrays: Vec<ArrayEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(corrupt("rng seed must be 64 hex digits"));
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|e| corrupt(format!("rng seed: {e}")))?;
    }
    Ok(out)
}

pub fn encode(state: &CheckpointState) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let mut add = |name: String, t: &Tensor, arrays: &mut Vec<ArrayEntry>| {
        arrays.push(ArrayEntry {
            name,
            shape: t.shape(),
            offset: payload.len(),
        });
        payload.extend_from_slice(t.data());
    };
    let sets = [&state.transmission, &state.airlight, &state.discriminator];
    for ((group, set), opt) in GROUPS.iter().zip(sets).zip(&state.optimizers) {
        for p in set.iter() {
            add(format!("{group}/{}", p.name), &p.value, &mut arrays);
        }
        for (p, m) in set.iter().zip(&opt.m) {
            add(format!("adam_m/{group}/{}", p.name), m, &mut arrays);
        }
        for (p, v) in set.iter().zip(&opt.v) {
            add(format!("adam_v/{group}/{}", p.name), v, &mut arrays);
        }
    }
    let header = Header {
        model_config: state.model_config.clone(),
        train_config: state.train_config.clone(),
        adam_steps: [state.optimizers[0].step, state.optimizers[1].step, state.optimizers[2].step],
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        order: state.order.clone(),
        cursor: state.cursor,
        progress: state.progress,
        history: state.history.clone(),
        arrays,
    };
    let header = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointState> {
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic or truncated)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch: file is truncated or corrupted"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
    let raw = &body[header_end..];
    if raw.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let payload: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let mut sets: [ParameterSet; 3] = Default::default();
    let mut ms: [Vec<Tensor>; 3] = Default::default();
    let mut vs: [Vec<Tensor>; 3] = Default::default();
    for e in &header.arrays {
        let n: usize = e.shape.iter().product();
        let data = payload
            .get(e.offset..e.offset + n)
            .ok_or_else(|| corrupt(format!("array {} lies outside the payload", e.name)))?;
        let t = Tensor::from_vec(e.shape, data.to_vec())?;
        let (kind, rest) = match e.name.split_once('/') {
            Some(("adam_m", rest)) => (1, rest),
            Some(("adam_v", rest)) => (2, rest),
            _ => (0, e.name.as_str()),
        };
        let (group, pname) = rest
            .split_once('/')
            .ok_or_else(|| corrupt(format!("malformed array name {}", e.name)))?;
        let gi = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| corrupt(format!("unknown parameter group {group}")))?;
        match kind {
            0 => {
                sets[gi].push(pname, t)?;
            }
            1 => ms[gi].push(t),
            _ => vs[gi].push(t),
        }
    }
    let [m0, m1, m2] = ms;
    let [v0, v1, v2] = vs;
    let optimizers = [
        AdamState {
            step: header.adam_steps[0],
            m: m0,
            v: v0,
        },
        AdamState {
            step: header.adam_steps[1],
            m: m1,
            v: v1,
        },
        AdamState {
            step: header.adam_steps[2],
            m: m2,
            v: v2,
        },
    ];
    for (o, s) in optimizers.iter().zip(&sets) {
        if !o.matches(s) {
            return Err(corrupt("optimizer moments do not match parameters"));
        }
    }
    let mut rng = ChaCha8Rng::from_seed(unhex(&header.rng.seed)?);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(
        header
            .rng
            .word_pos
            .parse()
            .map_err(|e| corrupt(format!("rng word position: {e}")))?,
    );
    let [transmission, airlight, discriminator] = sets;
    Ok(CheckpointState {
        model_config: header.model_config,
        train_config: header.train_config,
        transmission,
        airlight,
        discriminator,
        optimizers,
        rng,
        order: header.order,
        cursor: header.cursor,
        progress: header.progress,
        history: header.history,
    })
}

/// Writes atomically: temporary sibling, then rename.
pub fn save_checkpoint(state: &CheckpointState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synthesize_dataset, DatasetSpec, ProceduralSource};
    use crate::trainer::{Model, StageSchedule, Trainer};
    use crate::transmission_net::TransmissionNetConfig;

    fn trained_state() -> CheckpointState {
        let spec = DatasetSpec {
            num_scenes: 2,
            variants_per_scene: 1,
            image_size: [32, 32],
            seed: 1,
            ..DatasetSpec::default()
        };
        let data = synthesize_dataset(&spec, &ProceduralSource::new(1, 2, 32, 32)).unwrap();
        let mc = ModelConfig {
            transmission: TransmissionNetConfig {
                stem_channels: 8,
                ..TransmissionNetConfig::default()
            },
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            image_size: [32, 32],
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(Model::build(&mc).unwrap(), cfg, &data).unwrap();
        let s = StageSchedule {
            stage1_iters: 1,
            stage2_iters: 1,
            stage3_iters: 1,
            adversarial: true,
        };
        t.run(&s, None, &mut |_| {}).unwrap();
        t.checkpoint()
    }

    #[test]
    fn round_trip_is_exact() {
        let state = trained_state();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&state, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), state);
        assert!(!dir.path().join("a.ckpt.tmp").exists());
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = encode(&trained_state()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() / 2]), Err(Error::Checkpoint(_))));
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&trained_state()).unwrap();
        bytes[8] = 99;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }
}
