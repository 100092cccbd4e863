//! Binary checkpoints: magic, format version, config snapshot, then named
//! f64 blobs until end of file. Parameter blobs come first in registration
//! order, then Adam moments, then counters.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, SPEECH_ENCODER, TEXT_ENCODER};
use crate::numerics::{NumArray, OptimizerState, SeededRng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSQ1";
pub const FORMAT_VERSION: u32 = 1;

const GLOBAL_STEP: &str = "state.global_step";
const ADAM_STEP: &str = "state.adam_step";
const STAGE_START: &str = "state.stage_start";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub global_step: u64,
    /// Global step at which the current stage began.
    pub stage_start: u64,
}

impl Checkpoint {
    /// Wraps a model with a fresh optimizer at step 0.
    pub fn fresh(config: RunConfig, model: Model) -> Self {
        let t = &config.train;
        let optimizer = OptimizerState::new(&model.params, t.beta1, t.beta2, t.epsilon);
        Checkpoint {
            config,
            model,
            optimizer,
            global_step: 0,
            stage_start: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_str(&mut out, &self.config.to_text())?;
        for p in self.model.params.iter() {
            write_blob(&mut out, &p.name, &p.value)?;
        }
        for (prefix, moments) in [(MOMENT1, &self.optimizer.m), (MOMENT2, &self.optimizer.v)] {
            for (p, m) in self.model.params.iter().zip(moments) {
                write_blob(&mut out, &format!("{prefix}{}", p.name), m)?;
            }
        }
        for (name, v) in [
            (GLOBAL_STEP, self.global_step),
            (ADAM_STEP, self.optimizer.step),
            (STAGE_START, self.stage_start),
        ] {
            write_blob(&mut out, name, &NumArray::vector(&[counter_to_f64(v)?]))?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = RunConfig::from_text(&r.string()?)?;
        let mut blobs = Vec::new();
        while r.pos < r.buf.len() {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Format(format!("blob `{name}` has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("blob `{name}` payload truncated or too large")))?;
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push((name, NumArray::from_vec(&dims, data)?));
        }

        let has = |prefix: &str| blobs.iter().any(|(n, _)| n.starts_with(prefix));
        let kind = match (has(TEXT_ENCODER), has(SPEECH_ENCODER)) {
            (true, true) => ModelKind::Joint,
            (true, false) => ModelKind::Tts,
            (false, true) => ModelKind::Vc,
            (false, false) => return Err(Error::Format("checkpoint holds no encoder".into())),
        };
        let mut model = Model::new(kind, &config.model, &mut SeededRng::seed_from_u64(0))?;
        let t = &config.train;
        let mut optimizer = OptimizerState::new(&model.params, t.beta1, t.beta2, t.epsilon);
        let mut counters = [None; 3];
        let mut filled = vec![[false; 3]; model.params.len()];
        for (name, value) in blobs {
            let (slot, key) = if let Some(k) = name.strip_prefix(MOMENT1) {
                (1, k)
            } else if let Some(k) = name.strip_prefix(MOMENT2) {
                (2, k)
            } else if let Some(i) = [GLOBAL_STEP, ADAM_STEP, STAGE_START].iter().position(|c| *c == name) {
                counters[i] = Some(f64_to_counter(&name, &value)?);
                continue;
            } else {
                (0, name.as_str())
            };
            let id = model
                .params
                .id(key)
                .ok_or_else(|| Error::Format(format!("unexpected blob `{name}`")))?;
            let dst = match slot {
                0 => model.params.value_mut(id),
                1 => &mut optimizer.m[id.index()],
                _ => &mut optimizer.v[id.index()],
            };
            if dst.shape() != value.shape() {
                return Err(Error::Incompatible {
                    detail: format!("stored {:?}, config expects {:?}", value.shape(), dst.shape()),
                    name,
                });
            }
            *dst = value;
            filled[id.index()][slot] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f.iter().all(|x| *x)) {
            let name = &model.params.iter().nth(i).unwrap().name;
            return Err(Error::Format(format!("checkpoint lacks blobs for `{name}`")));
        }
        let [Some(global_step), Some(adam_step), Some(stage_start)] = counters else {
            return Err(Error::Format("checkpoint lacks step counters".into()));
        };
        optimizer.step = adam_step;
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            global_step,
            stage_start,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn counter_to_f64(v: u64) -> Result<f64> {
    if v > (1u64 << 53) {
        return Err(Error::Format(format!("counter {v} too large to store")));
    }
    Ok(v as f64)
}

fn f64_to_counter(name: &str, v: &NumArray) -> Result<u64> {
    match v.data() {
        [x] if *x >= 0.0 && x.fract() == 0.0 && *x <= (1u64 << 53) as f64 => Ok(*x as u64),
        _ => Err(Error::Format(format!("blob `{name}` is not a step counter"))),
    }
}

fn len_u32(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} length {n} exceeds u32")))
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len(), "string")?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn write_blob(out: &mut Vec<u8>, name: &str, value: &NumArray) -> Result<()> {
    write_str(out, name)?;
    out.extend_from_slice(&len_u32(value.rank(), "rank")?);
    for &d in value.shape() {
        out.extend_from_slice(&len_u32(d, "dimension")?);
    }
    for v in value.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}
