//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic            8 bytes  "S2LABCK1"
//! version          u32      1
//! dim, hidden, blocks, time_features, num_classes   u32 × 5
//! steps            u32
//! beta_start       f64
//! beta_end         f64
//! train_hash       32 bytes (sha256 of the training config)
//! param_count      u64
//! params           f64 × param_count
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{BlockDenoiser, ModelConfig};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"S2LABCK1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: BlockDenoiser,
    pub schedule: ScheduleConfig,
    pub train_hash: [u8; 32],
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let c = ck.net.config();
    let mut buf = Vec::with_capacity(96 + 8 * ck.net.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.dim, c.hidden, c.blocks, c.time_features, c.num_classes, ck.schedule.steps] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ck.schedule.beta_start.to_le_bytes());
    buf.extend_from_slice(&ck.schedule.beta_end.to_le_bytes());
    buf.extend_from_slice(&ck.train_hash);
    buf.extend_from_slice(&(ck.net.param_count() as u64).to_le_bytes());
    for p in ck.net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: msg.to_string(),
    };
    let mut at = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| bad("truncated checkpoint"))?;
        at += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = u32_at(take(4)?) as usize;
    }
    let beta_start = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let beta_end = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let train_hash: [u8; 32] = take(32)?.try_into().unwrap();
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let raw = take(count.checked_mul(8).ok_or_else(|| bad("bad parameter count"))?)?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if at != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("checkpoint {} holds non-finite parameters", path.display())));
    }
    let config = ModelConfig {
        dim: dims[0],
        hidden: dims[1],
        blocks: dims[2],
        time_features: dims[3],
        num_classes: dims[4],
    };
    let net = BlockDenoiser::from_params(config, params)?;
    Ok(Checkpoint {
        net,
        schedule: ScheduleConfig {
            steps: dims[5],
            beta_start,
            beta_end,
        },
        train_hash,
    })
}
