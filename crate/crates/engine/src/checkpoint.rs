//! Versioned binary checkpoint container shared by both model kinds:
//! 8-byte magic, u32 version, a JSON header (kind, hyperparameters, epoch,
//! optimizer step, rng state), then the parameter vector and both Adam
//! moment vectors as little-endian f64 arrays. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserHyper, DenoiserModel};
use crate::error::{EngineError, Result};
use crate::lip::{LipHyper, LipModel};
use crate::nn::adam::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BDCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Denoiser,
    Lip,
}

/// Serializable ChaCha state: seed plus stream position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        let pos = rng.get_word_pos();
        RngSnapshot {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        let pos = ((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128;
        rng.set_word_pos(pos);
        rng
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    epoch: usize,
    adam_step: u64,
    rng: RngSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    denoiser: Option<DenoiserHyper>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lip: Option<LipHyper>,
}

fn ck_err(path: &Path, msg: impl std::fmt::Display) -> EngineError {
    EngineError::Checkpoint(format!("{}: {msg}", path.display()))
}

fn write_f64_array(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(data.len() as u64)?;
    for v in data {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_f64_array(r: &mut impl Read) -> std::io::Result<Vec<f64>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(out)
}

fn save(
    path: &Path,
    header: &Header,
    params: &[f64],
    adam: &AdamState,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| ck_err(path, e))?);
    let mut inner = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let header_json = serde_json::to_vec(header).expect("header serializes");
        w.write_u64::<LittleEndian>(header_json.len() as u64)?;
        w.write_all(&header_json)?;
        write_f64_array(&mut w, params)?;
        write_f64_array(&mut w, &adam.m)?;
        write_f64_array(&mut w, &adam.v)?;
        w.flush()
    };
    inner().map_err(|e| ck_err(path, e))
}

fn load(path: &Path) -> Result<(Header, Vec<f64>, AdamState)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| ck_err(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| ck_err(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck_err(path, "bad magic; not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| ck_err(path, e))?;
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(|e| ck_err(path, e))? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(|e| ck_err(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| ck_err(path, format!("header: {e}")))?;
    let params = read_f64_array(&mut r).map_err(|e| ck_err(path, e))?;
    let m = read_f64_array(&mut r).map_err(|e| ck_err(path, e))?;
    let v = read_f64_array(&mut r).map_err(|e| ck_err(path, e))?;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(ck_err(path, "optimizer state does not match parameter count"));
    }
    let adam = AdamState {
        m,
        v,
        step: header.adam_step,
    };
    Ok((header, params, adam))
}

/// Identify a checkpoint's model kind without loading the tensors.
pub fn peek_kind(path: &Path) -> Result<ModelKind> {
    let (header, _, _) = load(path)?;
    Ok(header.kind)
}

pub struct DenoiserCheckpoint {
    pub model: DenoiserModel,
    pub adam: AdamState,
    pub epoch: usize,
    pub rng: ChaCha20Rng,
}

pub fn save_denoiser(
    path: &Path,
    model: &DenoiserModel,
    adam: &AdamState,
    epoch: usize,
    rng: &ChaCha20Rng,
) -> Result<()> {
    let header = Header {
        kind: ModelKind::Denoiser,
        epoch,
        adam_step: adam.step,
        rng: RngSnapshot::capture(rng),
        denoiser: Some(*model.hyper()),
        lip: None,
    };
    save(path, &header, model.params(), adam)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserCheckpoint> {
    let (header, params, adam) = load(path)?;
    if header.kind != ModelKind::Denoiser {
        return Err(ck_err(path, "checkpoint holds a lip model, not a denoiser"));
    }
    let hyper = header
        .denoiser
        .ok_or_else(|| ck_err(path, "missing denoiser hyperparameters"))?;
    let model = DenoiserModel::from_params(hyper, params)?;
    Ok(DenoiserCheckpoint {
        model,
        adam,
        epoch: header.epoch,
        rng: header.rng.restore(),
    })
}

pub struct LipCheckpoint {
    pub model: LipModel,
    pub adam: AdamState,
    pub epoch: usize,
    pub rng: ChaCha20Rng,
}

pub fn save_lip(
    path: &Path,
    model: &LipModel,
    adam: &AdamState,
    epoch: usize,
    rng: &ChaCha20Rng,
) -> Result<()> {
    let header = Header {
        kind: ModelKind::Lip,
        epoch,
        adam_step: adam.step,
        rng: RngSnapshot::capture(rng),
        denoiser: None,
        lip: Some(*model.hyper()),
    };
    save(path, &header, model.params(), adam)
}

pub fn load_lip(path: &Path) -> Result<LipCheckpoint> {
    let (header, params, adam) = load(path)?;
    if header.kind != ModelKind::Lip {
        return Err(ck_err(path, "checkpoint holds a denoiser, not a lip model"));
    }
    let hyper = header
        .lip
        .ok_or_else(|| ck_err(path, "missing lip hyperparameters"))?;
    let model = LipModel::from_params(hyper, params)?;
    Ok(LipCheckpoint {
        model,
        adam,
        epoch: header.epoch,
        rng: header.rng.restore(),
    })
}
