//! Binary checkpoint format.
//!
//! ```text
//! "GSTCKPT1" | version u32 | meta_len u32 | meta JSON | count u32 |
//!   per parameter: name_len u16 | name | dtype u8 | rank u8 | dims u64.. |
//!                  data (LE) | frozen u8
//! ```
//! All integers are little-endian. The parameter group is derived from the
//! name prefix.

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Vit};
use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::peft::{PeftSpec, PeftState};
use crate::tensor::{ParamGroup, ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GSTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: BackboneConfig,
    pub gelu: String,
    pub pretrain_seed: Option<u64>,
    pub init: String,
    pub peft: Vec<PeftSpec>,
    pub gist_len: Option<usize>,
    pub config_hash: Option<String>,
}

impl CheckpointMeta {
    /// Fails unless the recorded hash equals `expected`.
    pub fn verify_config_hash(&self, expected: &str) -> Result<()> {
        match &self.config_hash {
            Some(h) if h == expected => Ok(()),
            Some(h) => Err(Error::Config(format!(
                "checkpoint config hash {h} does not match {expected}"
            ))),
            None => Err(Error::Config("checkpoint carries no config hash".into())),
        }
    }
}

fn group_for(name: &str) -> ParamGroup {
    if name.starts_with("head.") {
        ParamGroup::Head
    } else if name.starts_with("adapter.") || name.starts_with("prompt.") || name.starts_with("ssf.") {
        ParamGroup::Peft
    } else if name.starts_with("gist.") {
        ParamGroup::Gist
    } else {
        ParamGroup::Backbone
    }
}

pub fn save_checkpoint<F: Scalar>(model: &Vit<F>, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        config: model.config().clone(),
        gelu: "erf".into(),
        pretrain_seed: model.pretrain_seed(),
        init: "trunc_normal(std=0.02,|z|<=2)".into(),
        peft: model.peft().specs().to_vec(),
        gist_len: model.gist_len(),
        config_hash: config_hash.map(str::to_owned),
    };
    let meta = serde_json::to_vec(&meta)?;
    let store = model.params();
    let mut out = Vec::with_capacity(64 + meta.len() + store.total_count() * F::BYTES);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (id, name, tensor, _) in store.iter() {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
        out.push(store.is_frozen(id) as u8);
    }
    Ok(out)
}

fn read_values<F: Scalar>(r: &mut Reader<'_>, dtype: u8, n: usize, at: usize) -> Result<Vec<F>> {
    match dtype {
        0 => {
            let raw = r.take(
                n.checked_mul(4).ok_or_else(|| Error::format(at, "size overflow"))?,
                "tensor data",
            )?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| F::from_f64(f32::read_le(c) as f64))
                .collect())
        }
        1 => {
            let raw = r.take(
                n.checked_mul(8).ok_or_else(|| Error::format(at, "size overflow"))?,
                "tensor data",
            )?;
            Ok(raw.chunks_exact(8).map(|c| F::from_f64(f64::read_le(c))).collect())
        }
        other => Err(Error::format(at, format!("unknown dtype code {other}"))),
    }
}

/// Parses a checkpoint. Values stored in another precision are converted.
pub fn load_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<(Vit<F>, CheckpointMeta)> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let meta: CheckpointMeta = r.json("metadata")?;
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    let mut frozen = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.offset();
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at + 2, "parameter name is not UTF-8"))?
            .to_owned();
        let dtype_at = r.offset();
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(dtype_at, "tensor size overflow"))?;
        let data = read_values::<F>(&mut r, dtype, n, dtype_at)?;
        let flag_at = r.offset();
        let flag = r.u8("frozen flag")?;
        if flag > 1 {
            return Err(Error::format(
                flag_at,
                format!("frozen flag must be 0 or 1, got {flag}"),
            ));
        }
        let group = group_for(&name);
        let id = store
            .insert(name.clone(), Tensor::new(shape, data)?, group)
            .map_err(|e| Error::format(at, e.to_string()))?;
        frozen.push((id, flag == 1));
    }
    r.finish()?;
    for (id, f) in frozen {
        store.set_frozen(id, f);
    }
    let peft = PeftState::restore(&meta.peft, &store, meta.config.num_layers)?;
    let model = Vit::from_store(meta.config.clone(), store, peft, meta.pretrain_seed)?;
    if model.gist_len() != meta.gist_len {
        return Err(Error::Config("Gist token in metadata does not match parameters".into()));
    }
    Ok((model, meta))
}
