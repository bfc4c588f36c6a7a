//! The MADF activation dump.
//!
//! ```text
//! file   := "MADF" version:u16 record*
//! record := kind:u8 layer:u16 timestep:u16 rows:u32 cols:u32
//!           payload:f32[rows*cols] crc:u32
//! ```
//!
//! All integers and floats are little-endian; the payload is row-major.
//! `crc` is the CRC-32 (IEEE) of the record's header and payload bytes.
//! Kind 0 is the image stream, 1 the encoder stream, 2 a sampler latent
//! (layer [`LATENT_LAYER`], timestep = step index).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::engine::{ActivationTensor, CapturePoint, EngineConfig, Stream, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MADF";
pub const VERSION: u16 = 1;
/// Layer field of latent records.
pub const LATENT_LAYER: u16 = u16::MAX;

const FILE_HEADER_LEN: usize = 6;
const RECORD_HEADER_LEN: usize = 13;
const LATENT_KIND: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Activation(Stream),
    Latent,
}

impl RecordKind {
    fn code(self) -> u8 {
        match self {
            RecordKind::Activation(s) => s.code(),
            RecordKind::Latent => LATENT_KIND,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            LATENT_KIND => Some(RecordKind::Latent),
            c => Stream::from_code(c).map(RecordKind::Activation),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub kind: RecordKind,
    pub layer: u16,
    pub timestep: u16,
    pub data: Matrix,
}

impl DumpRecord {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.layer == other.layer && self.timestep == other.timestep && self.data.bit_eq(&other.data)
    }
}

fn narrow<T: TryFrom<usize>>(what: &str, v: usize) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Range(format!("{what} {v} does not fit the dump header")))
}

impl TryFrom<&ActivationTensor> for DumpRecord {
    type Error = Error;

    fn try_from(act: &ActivationTensor) -> Result<Self> {
        Ok(Self {
            kind: RecordKind::Activation(act.stream),
            layer: narrow("layer", act.layer)?,
            timestep: narrow("timestep", act.timestep)?,
            data: act.data.clone(),
        })
    }
}

/// Serializes records into MADF bytes.
pub fn encode(records: &[DumpRecord]) -> Result<Vec<u8>> {
    let payload: usize = records.iter().map(|r| RECORD_HEADER_LEN + 4 * r.data.as_slice().len() + 4).sum();
    let mut out = Vec::with_capacity(FILE_HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (i, r) in records.iter().enumerate() {
        if !r.data.is_finite() {
            return Err(Error::Numeric(format!("record {i} holds non-finite values")));
        }
        let start = out.len();
        out.push(r.kind.code());
        out.extend_from_slice(&r.layer.to_le_bytes());
        out.extend_from_slice(&r.timestep.to_le_bytes());
        out.extend_from_slice(&narrow::<u32>("rows", r.data.rows())?.to_le_bytes());
        out.extend_from_slice(&narrow::<u32>("cols", r.data.cols())?.to_le_bytes());
        for v in r.data.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses MADF bytes, verifying every record checksum.
pub fn decode(bytes: &[u8]) -> Result<Vec<DumpRecord>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("missing MADF magic".into()));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let index = records.len();
        let start = cur.pos;
        let code = cur.take(1, "record kind")?[0];
        let layer = cur.u16("layer")?;
        let timestep = cur.u16("timestep")?;
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("record {index} dimensions overflow")))?;
        let payload = cur.take(len, "payload")?;
        let computed = crc32fast::hash(&bytes[start..cur.pos]);
        let stored = cur.u32("checksum")?;
        if stored != computed {
            return Err(Error::Crc {
                index,
                kind: code,
                layer,
                timestep,
                stored,
                computed,
            });
        }
        let kind = RecordKind::from_code(code).ok_or_else(|| Error::Format(format!("record {index} has unknown kind {code}")))?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        records.push(DumpRecord {
            kind,
            layer,
            timestep,
            data: Matrix::from_vec(rows, cols, data)?,
        });
    }
    Ok(records)
}

/// Writes records to `path`; returns the number of bytes written.
pub fn write_dump(path: impl AsRef<Path>, records: &[DumpRecord]) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode(records)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<DumpRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Latents (in step order) followed by captured activations (in
/// (layer, timestep, stream) order).
pub fn trajectory_records(traj: &Trajectory) -> Result<Vec<DumpRecord>> {
    let mut out = Vec::with_capacity(traj.latents.len() + traj.captured.len());
    for (i, latent) in traj.latents.iter().enumerate() {
        out.push(DumpRecord {
            kind: RecordKind::Latent,
            layer: LATENT_LAYER,
            timestep: narrow("step", i)?,
            data: latent.clone(),
        });
    }
    for act in traj.captured.values() {
        out.push(DumpRecord::try_from(act)?);
    }
    Ok(out)
}

pub fn write_trajectory(path: impl AsRef<Path>, traj: &Trajectory) -> Result<u64> {
    write_dump(path, &trajectory_records(traj)?)
}

/// Rebuilds a trajectory from dump records plus the metadata the dump does
/// not carry.
pub fn trajectory_from_records(config: EngineConfig, prompt: Vec<u32>, records: Vec<DumpRecord>) -> Result<Trajectory> {
    let mut latents = BTreeMap::new();
    let mut captured = BTreeMap::new();
    for r in records {
        match r.kind {
            RecordKind::Latent => {
                latents.insert(r.timestep, r.data);
            }
            RecordKind::Activation(stream) => {
                let (layer, timestep) = (usize::from(r.layer), usize::from(r.timestep));
                if layer >= config.depth || timestep >= config.steps {
                    return Err(Error::Format(format!("activation at layer {layer}, timestep {timestep} is outside the config")));
                }
                captured.insert(CapturePoint::new(layer, timestep, stream), ActivationTensor::new(stream, layer, timestep, r.data));
            }
        }
    }
    if latents.len() != config.steps + 1 || latents.keys().enumerate().any(|(i, &k)| usize::from(k) != i) {
        return Err(Error::Format(format!(
            "expected latents for steps 0..={}, found {:?}",
            config.steps,
            latents.keys().collect::<Vec<_>>()
        )));
    }
    let latents: Vec<Matrix> = latents.into_values().collect();
    Ok(Trajectory {
        initial_noise: latents[0].clone(),
        final_latent: latents[latents.len() - 1].clone(),
        config,
        prompt,
        latents,
        captured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(kind: RecordKind, rows: usize, cols: usize) -> DumpRecord {
        DumpRecord {
            kind,
            layer: 3,
            timestep: 1,
            data: Matrix::from_fn(rows, cols, |r, c| r as f32 - 0.5 * c as f32),
        }
    }

    #[test]
    fn header_only() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes, b"MADF\x01\x00");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn byte_layout_of_one_record() {
        let r = DumpRecord {
            kind: RecordKind::Activation(Stream::Encoder),
            layer: 2,
            timestep: 5,
            data: Matrix::from_rows(&[[1.0f32]]).unwrap(),
        };
        let bytes = encode(&[r]).unwrap();
        assert_eq!(&bytes[6..19], &[1, 2, 0, 5, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[19..23], &1.0f32.to_le_bytes());
        let crc = crc32fast::hash(&bytes[6..23]);
        assert_eq!(&bytes[23..27], &crc.to_le_bytes());
        assert_eq!(bytes.len(), 27);
    }

    #[test]
    fn round_trip_mixed_kinds() {
        let recs = vec![
            record(RecordKind::Latent, 1, 1),
            record(RecordKind::Activation(Stream::Image), 7, 5),
            record(RecordKind::Activation(Stream::Encoder), 0, 5),
        ];
        let back = decode(&encode(&recs).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        assert!(recs.iter().zip(&back).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn corrupted_payload_names_record() {
        let recs = vec![record(RecordKind::Latent, 2, 2), record(RecordKind::Activation(Stream::Image), 2, 2)];
        let mut bytes = encode(&recs).unwrap();
        let second_payload = 6 + (13 + 16 + 4) + 13 + 3;
        bytes[second_payload] ^= 0x40;
        match decode(&bytes) {
            Err(Error::Crc { index, layer, .. }) => assert_eq!((index, layer), (1, 3)),
            other => panic!("expected CRC error, got {other:?}"),
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode(&[]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Version(9))));
        assert!(matches!(decode(b"NOPE\x01\x00"), Err(Error::Format(_))));
        let mut bytes = encode(&[record(RecordKind::Latent, 2, 2)]).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let mut r = record(RecordKind::Latent, 1, 1);
        r.data.set(0, 0, f32::INFINITY);
        assert!(matches!(encode(&[r]), Err(Error::Numeric(_))));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_dump("/nonexistent/dir/x.madf").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.madf"));
    }
}
