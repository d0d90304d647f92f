//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! b"CHRTCKPT"  u32 version
//! u32 len, run config text (utf-8)
//! u64 step, f64 best_bpc (NaN if none), u64 best_step (u64::MAX if none)
//! u32 n_params, then per parameter:
//!     u16 name len, name, u8 rank, u32 dims..., f32 data...
//! u8 has_velocity, then per parameter f32 velocity...
//! u8 has_rng, then [u8; 32] seed, u64 stream, u128 word_pos
//! ```
//!
//! Parameters appear in model order; loading rebuilds the layout from the
//! embedded config and checks every name and shape against it.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::optim::Optimizer;
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"CHRTCKPT";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

pub fn encode(run: &RunConfig, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = run.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.best_bpc.unwrap_or(f64::NAN).to_le_bytes());
    out.extend_from_slice(&state.best_step.unwrap_or(u64::MAX).to_le_bytes());

    let params = state.model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (p, name) in params.iter().zip(state.model.param_names()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.shape().len() as u8);
        p.shape()
            .iter()
            .for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
        write_f32s(&mut out, p.data());
    }

    let velocity = state.optimizer.velocity();
    out.push(u8::from(!velocity.is_empty()));
    velocity.iter().for_each(|v| write_f32s(&mut out, v));

    out.push(1);
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated checkpoint"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(RunConfig, TrainState)> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad("config is not utf-8"))?;
    let run = RunConfig::parse(text)?;
    let step = r.u64()?;
    let best_bpc = f64::from_le_bytes(r.array()?);
    let best_step = r.u64()?;

    let mut model = TransformerLM::<f32>::zeros(run.model.clone())?;
    let n = r.u32()? as usize;
    if n != model.params().len() {
        return Err(bad(format!(
            "checkpoint holds {n} tensors, config implies {}",
            model.params().len()
        )));
    }
    let names = model.param_names().to_vec();
    for (i, expected) in names.iter().enumerate() {
        let name_len = r.u16()? as usize;
        let name = r.take(name_len)?;
        if name != expected.as_bytes() {
            return Err(bad(format!(
                "tensor {i} is `{}`, expected `{expected}`",
                String::from_utf8_lossy(name)
            )));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let p = &mut model.params_mut()[i];
        if shape != p.shape() {
            return Err(bad(format!("`{expected}` has shape {shape:?}, expected {:?}", p.shape())));
        }
        let data = r.f32s(p.numel())?;
        p.data_mut().copy_from_slice(&data);
    }

    let t = &run.train;
    let mut optimizer = Optimizer::new(t.optimizer, t.lr, t.momentum, t.grad_clip, model.params())?;
    if r.u8()? == 1 {
        let velocity = model
            .params()
            .iter()
            .map(|p| r.f32s(p.numel()))
            .collect::<Result<Vec<_>>>()?;
        optimizer.set_velocity(velocity)?;
    }

    let rng = if r.u8()? == 1 {
        let mut rng = ChaCha8Rng::from_seed(r.array()?);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(u128::from_le_bytes(r.array()?));
        rng
    } else {
        ChaCha8Rng::seed_from_u64(t.seed)
    };
    if !r.buf.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.buf.len())));
    }
    Ok((
        run,
        TrainState {
            step,
            model,
            optimizer,
            best_bpc: (!best_bpc.is_nan()).then_some(best_bpc),
            best_step: (best_step != u64::MAX).then_some(best_step),
            rng,
        },
    ))
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save(path: &Path, run: &RunConfig, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(run, state)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, TrainState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
