//! Dataset file: `"GSTDATA1" | version u32 | header_len u32 | header JSON |
//! f32 LE images | u16 LE labels`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, TaskSpec};
use crate::codec::Reader;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"GSTDATA1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub specs: Vec<TaskSpec>,
    pub count: usize,
    pub channels: usize,
    pub side: usize,
    pub num_classes: usize,
    pub ids: Vec<u64>,
    pub config_hash: Option<String>,
}

pub fn encode_dataset(data: &Dataset, specs: &[TaskSpec], config_hash: Option<&str>) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        specs: specs.to_vec(),
        count: data.len(),
        channels: data.channels,
        side: data.side,
        num_classes: data.num_classes,
        ids: data.ids.clone(),
        config_hash: config_hash.map(str::to_owned),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + data.images.len() * 4 + data.len() * 2);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in &data.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &data.labels {
        let y = u16::try_from(y).map_err(|_| Error::Config(format!("label {y} does not fit in u16")))?;
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Dataset, DatasetHeader)> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let header: DatasetHeader = r.json("header")?;
    if header.ids.len() != header.count {
        return Err(Error::format(16, "header id list length differs from sample count"));
    }
    let n = header.count * header.channels * header.side * header.side;
    let raw = r.take(n * 4, "images")?;
    let images = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut labels = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let at = r.offset();
        let y = r.u16("label")? as usize;
        if y >= header.num_classes {
            return Err(Error::format(
                at,
                format!("label {y} out of range for {} classes", header.num_classes),
            ));
        }
        labels.push(y);
    }
    r.finish()?;
    let data = Dataset {
        channels: header.channels,
        side: header.side,
        num_classes: header.num_classes,
        images,
        labels,
        ids: header.ids.clone(),
    };
    Ok((data, header))
}

pub fn write_dataset(path: &Path, data: &Dataset, specs: &[TaskSpec], config_hash: Option<&str>) -> Result<()> {
    std::fs::write(path, encode_dataset(data, specs, config_hash)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Dataset, DatasetHeader)> {
    decode_dataset(&std::fs::read(path)?)
}
