//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "G2S1"  u64 config_hash  u64 step  u64 epoch  u64 batch
//! u32 L   u32 × L encoder pool factors
//! u32 P   P parameter records
//! u64 adam_step  u32 A  A moment records ("m/<name>", "v/<name>")
//! 1 record "history", checkpoints × [step, epoch, train_loss, dev_ppl, dev_fer, lr]
//! ```
//!
//! A record is `u32 name_len, name, u32 rank, u64 × rank extents`,
//! followed by the row-major `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use seq2d_core::encoder::EncoderConfig;
use seq2d_core::model::{ModelConfig, ModelParams};
use seq2d_core::optim::{AdamConfig, AdamState};
use seq2d_core::train::{CheckpointMetrics, TrainState};
use seq2d_core::{Params, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"G2S1";

/// Checkpoint contents before they are bound to a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub config_hash: u64,
    pub step: u64,
    pub epoch: u64,
    pub batch: u64,
    pub pool_factors: Vec<usize>,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam: Vec<(String, Tensor)>,
    pub history: Tensor,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_state(state: &TrainState, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [config_hash, state.step, state.epoch as u64, state.batch as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let pools = &state.model.encoder.pool_factors;
    out.extend_from_slice(&(pools.len() as u32).to_le_bytes());
    for &f in pools {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    let named = state.params.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        put_record(&mut out, name, t);
    }
    out.extend_from_slice(&state.adam.step.to_le_bytes());
    out.extend_from_slice(&(2 * state.adam.names.len() as u32).to_le_bytes());
    for (i, name) in state.adam.names.iter().enumerate() {
        put_record(&mut out, &format!("m/{name}"), &state.adam.m[i]);
        put_record(&mut out, &format!("v/{name}"), &state.adam.v[i]);
    }
    let rows: Vec<f64> = state
        .history
        .iter()
        .flat_map(|m| [m.step as f64, m.epoch as f64, m.train_loss, m.dev_ppl, m.dev_fer, m.lr])
        .collect();
    let history = Tensor::new(&[state.history.len(), 6], rows).expect("history shape");
    put_record(&mut out, "history", &history);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn record(&mut self) -> Option<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).ok()?);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e))?;
        let bytes = self.take(n.checked_mul(8)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Some((name, Tensor::new(&shape, data).ok()?))
    }
}

pub fn decode_raw(buf: &[u8]) -> Option<RawCheckpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return None;
    }
    let (config_hash, step, epoch, batch) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let npool = r.u32()? as usize;
    let pool_factors = (0..npool).map(|_| r.u32().map(|f| f as usize)).collect::<Option<_>>()?;
    let np = r.u32()? as usize;
    let params = (0..np).map(|_| r.record()).collect::<Option<_>>()?;
    let adam_step = r.u64()?;
    let na = r.u32()? as usize;
    let adam = (0..na).map(|_| r.record()).collect::<Option<_>>()?;
    let (hname, history) = r.record()?;
    if hname != "history" || r.pos != buf.len() {
        return None;
    }
    Some(RawCheckpoint {
        config_hash,
        step,
        epoch,
        batch,
        pool_factors,
        params,
        adam_step,
        adam,
        history,
    })
}

pub fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let buf = fs::read(path).map_err(Error::io(path))?;
    if buf.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad(path, "not a checkpoint (bad magic)"));
    }
    decode_raw(&buf).ok_or_else(|| bad(path, "truncated or malformed checkpoint"))
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes atomically: a temporary sibling is renamed over `path`.
pub fn save_state(path: &Path, state: &TrainState, config_hash: u64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(&encode_state(state, config_hash)).map_err(Error::io(&tmp))?;
    f.sync_all().map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

fn find<'a>(records: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

/// Architecture implied by the record shapes and the stored pool factors.
pub fn infer_model_config(raw: &RawCheckpoint) -> Option<ModelConfig> {
    let emb = find(&raw.params, "embedding")?;
    let readout = find(&raw.params, "readout.W")?;
    let first = find(&raw.params, "encoder.layer0.fwd.W_i")?;
    Some(ModelConfig {
        encoder: EncoderConfig {
            input_dim: *first.shape().get(1)?,
            hidden_per_direction: *first.shape().first()?,
            pool_factors: raw.pool_factors.clone(),
        },
        grid_hidden: *readout.shape().first()?,
        embed_dim: *emb.shape().get(1)?,
        vocab_size: *emb.shape().first()?,
    })
}

fn fill<P: Params>(target: &mut P, records: &[(String, Tensor)], path: &Path) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = target
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != records.len() {
        return Err(bad(
            path,
            format!("{} tensors stored, {} expected", records.len(), expected.len()),
        ));
    }
    for ((en, es), (rn, rt)) in expected.iter().zip(records) {
        if en != rn || es.as_slice() != rt.shape() {
            return Err(bad(
                path,
                format!("record {rn} {:?} does not match {en} {es:?}", rt.shape()),
            ));
        }
    }
    let mut i = 0;
    target.visit_mut(&mut |t| {
        t.data_mut().copy_from_slice(records[i].1.data());
        i += 1;
    });
    Ok(())
}

/// Model parameters only, for decoding and evaluation.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let raw = read_raw(path)?;
    let cfg = infer_model_config(&raw).ok_or_else(|| bad(path, "cannot infer model dimensions"))?;
    let mut params = ModelParams::zeros(&cfg)?;
    fill(&mut params, &raw.params, path)?;
    Ok((cfg, params))
}

/// Full training state. `config_hash` must match the stored one.
pub fn load_state(path: &Path, config_hash: u64, adam: AdamConfig) -> Result<TrainState> {
    let raw = read_raw(path)?;
    if raw.config_hash != config_hash {
        return Err(bad(
            path,
            format!(
                "written by config {:016x}, current config is {config_hash:016x}",
                raw.config_hash
            ),
        ));
    }
    let (model, params) = {
        let cfg = infer_model_config(&raw).ok_or_else(|| bad(path, "cannot infer model dimensions"))?;
        let mut p = ModelParams::zeros(&cfg)?;
        fill(&mut p, &raw.params, path)?;
        (cfg, p)
    };
    let mut state_adam = AdamState::new(&params, adam);
    state_adam.step = raw.adam_step;
    let names = state_adam.names.clone();
    if raw.adam.len() != 2 * names.len() {
        return Err(bad(path, "optimizer records do not match the parameters"));
    }
    for (i, name) in names.iter().enumerate() {
        let (mn, mt) = &raw.adam[2 * i];
        let (vn, vt) = &raw.adam[2 * i + 1];
        if *mn != format!("m/{name}")
            || *vn != format!("v/{name}")
            || mt.shape() != state_adam.m[i].shape()
            || vt.shape() != state_adam.v[i].shape()
        {
            return Err(bad(path, format!("optimizer record for {name} is inconsistent")));
        }
        state_adam.m[i] = mt.clone();
        state_adam.v[i] = vt.clone();
    }
    if raw.history.shape().len() != 2 || raw.history.shape()[1] != 6 {
        return Err(bad(path, "history record must be k × 6"));
    }
    let history = (0..raw.history.rows())
        .map(|r| {
            let h = raw.history.row(r);
            CheckpointMetrics {
                step: h[0] as u64,
                epoch: h[1] as usize,
                train_loss: h[2],
                dev_ppl: h[3],
                dev_fer: h[4],
                lr: h[5],
            }
        })
        .collect();
    Ok(TrainState {
        model,
        params,
        adam: state_adam,
        step: raw.step,
        epoch: raw.epoch as usize,
        batch: raw.batch as usize,
        history,
    })
}
