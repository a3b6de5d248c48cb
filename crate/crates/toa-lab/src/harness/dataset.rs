//! Binary dataset files.
//!
//! Layout (little-endian):
//!   magic "TOAD", version u32, record-count u64, M u32, N_RB u32,
//!   then per record: feature planes as f32 in row-major M×(1+N_RB)×2
//!   order, toa_true_ns f32, anchor i32, case u8, snr_db f32.

use std::io::Write;
use std::path::Path;

use crate::channel::ChannelCase;
use crate::correlator::FeatureMap;
use crate::error::{Result, ToaError};
use crate::neural::TrainSample;

pub const DATASET_MAGIC: [u8; 4] = *b"TOAD";
pub const DATASET_VERSION: u32 = 1;

/// In-memory dataset: feature-map geometry plus the records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub m: u32,
    pub n_rb: u32,
    pub records: Vec<TrainSample>,
}

impl Dataset {
    pub fn from_records(records: Vec<TrainSample>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| ToaError::Dataset("no records".into()))?;
        let (m, n_rb) = (first.feature_map.m as u32, first.feature_map.n_rb as u32);
        if let Some(bad) = records
            .iter()
            .find(|r| r.feature_map.m as u32 != m || r.feature_map.n_rb as u32 != n_rb)
        {
            return Err(ToaError::Dataset(format!(
                "mixed feature-map shapes: {}×{} and {m}×{n_rb}",
                bad.feature_map.m, bad.feature_map.n_rb
            )));
        }
        Ok(Dataset { m, n_rb, records })
    }
}

fn case_to_byte(case: ChannelCase) -> u8 {
    match case {
        ChannelCase::Static => 0,
        ChannelCase::Epa5 => 1,
        ChannelCase::Eva5 => 2,
    }
}

fn case_from_byte(byte: u8, offset: u64) -> Result<ChannelCase> {
    match byte {
        0 => Ok(ChannelCase::Static),
        1 => Ok(ChannelCase::Epa5),
        2 => Ok(ChannelCase::Eva5),
        other => Err(ToaError::Format {
            offset,
            message: format!("invalid channel case byte {other}"),
        }),
    }
}

pub fn encode(dataset: &Dataset) -> Vec<u8> {
    let plane_len = (dataset.m * (1 + dataset.n_rb) * 2) as usize;
    let mut out =
        Vec::with_capacity(24 + dataset.records.len() * (plane_len * 4 + 13));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());
    out.extend_from_slice(&dataset.m.to_le_bytes());
    out.extend_from_slice(&dataset.n_rb.to_le_bytes());
    for record in &dataset.records {
        for &v in &record.feature_map.planes {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&record.toa_true_ns.to_le_bytes());
        out.extend_from_slice(&(record.feature_map.anchor as i32).to_le_bytes());
        out.push(case_to_byte(record.case));
        out.extend_from_slice(&record.snr_db.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ToaError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(ToaError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"TOAD\""),
        });
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(ToaError::Format {
            offset: 4,
            message: format!("unsupported dataset version {version} (expected {DATASET_VERSION})"),
        });
    }
    let count = cur.u64("record count")? as usize;
    let m = cur.u32("M")?;
    let n_rb = cur.u32("N_RB")?;
    let plane_len = (m * (1 + n_rb) * 2) as usize;

    let mut records = Vec::with_capacity(count);
    for r in 0..count {
        let mut planes = Vec::with_capacity(plane_len);
        for _ in 0..plane_len {
            planes.push(cur.f32("feature plane")?);
        }
        let toa_true_ns = cur.f32("toa")?;
        let anchor = cur.i32("anchor")?;
        let case_offset = cur.pos as u64;
        let case = case_from_byte(cur.take(1, "case")?[0], case_offset)?;
        let snr_db = cur.f32("snr")?;
        if !toa_true_ns.is_finite() || toa_true_ns < 0.0 {
            return Err(ToaError::Format {
                offset: case_offset,
                message: format!("record {r}: invalid toa {toa_true_ns} ns"),
            });
        }
        records.push(TrainSample {
            feature_map: FeatureMap {
                planes,
                m: m as usize,
                n_rb: n_rb as usize,
                anchor: i64::from(anchor),
                norm_scale: 1.0,
            },
            toa_true_ns,
            case,
            snr_db,
        });
    }
    if cur.pos != bytes.len() {
        return Err(ToaError::Format {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes after last record", bytes.len() - cur.pos),
        });
    }
    Ok(Dataset { m, n_rb, records })
}

pub fn write_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode(dataset))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}
