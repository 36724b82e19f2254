//! VSEQ: the on-disk dataset container.
//!
//! ```text
//! "VSEQ" | u32 version = 1 | u32 D | u32 record count
//! per record:
//!   u16 id length | UTF-8 id
//!   u16 label count | u32 label indices
//!   u32 T | T×D f32, row-major
//! ```
//!
//! All integers and floats are little-endian. The class count is not part of the
//! container; [`decode_vseq`] infers it as one past the largest label seen.

use std::path::Path;

use super::{Dataset, VideoRecord};
use crate::binio::{len_u16, len_u32, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const VSEQ_MAGIC: &[u8; 4] = b"VSEQ";
pub const VSEQ_VERSION: u32 = 1;

pub fn encode_vseq(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let mut e = Encoder::new();
    e.magic(VSEQ_MAGIC)
        .u32(VSEQ_VERSION)
        .u32(len_u32(dataset.dim, "dimension")?)
        .u32(len_u32(dataset.records.len(), "record count")?);
    for r in &dataset.records {
        e.u16(len_u16(r.id.len(), "id length")?).bytes(r.id.as_bytes());
        e.u16(len_u16(r.labels.len(), "label count")?);
        for &l in &r.labels {
            e.u32(l);
        }
        e.u32(len_u32(r.frames.rows(), "frame count")?);
        for &v in r.frames.as_slice() {
            e.f32(v as f32);
        }
    }
    Ok(e.into_bytes())
}

pub fn write_vseq(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_vseq(dataset)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn decode_vseq(bytes: &[u8]) -> Result<Dataset> {
    let mut d = Decoder::new(bytes);
    d.expect_magic(VSEQ_MAGIC)?;
    let version = d.u32("version")?;
    if version != VSEQ_VERSION {
        return Err(Error::UnsupportedVersion { format: "VSEQ", version });
    }
    let dim = d.u32("dimension")? as usize;
    let count = d.u32("record count")? as usize;
    if dim == 0 {
        return Err(Error::Malformed { offset: 8, what: "dimension is zero".into() });
    }
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut max_label: Option<u32> = None;
    for idx in 0..count {
        let what = format!("record {idx}");
        let id_len = d.u16(&what)? as usize;
        let id_at = d.offset();
        let id = std::str::from_utf8(d.take(id_len, &what)?)
            .map_err(|_| Error::Malformed { offset: id_at, what: format!("{what}: id is not UTF-8") })?
            .to_string();
        let n_labels = d.u16(&what)? as usize;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            let l = d.u32(&what)?;
            max_label = Some(max_label.map_or(l, |m| m.max(l)));
            labels.push(l);
        }
        let t_at = d.offset();
        let t = d.u32(&what)? as usize;
        if t == 0 {
            return Err(Error::Malformed { offset: t_at, what: format!("{what}: zero frames") });
        }
        let needed = t.saturating_mul(dim).saturating_mul(4);
        if d.remaining() < needed {
            return Err(Error::Truncated {
                offset: d.offset(),
                what: format!("{what}: {t}×{dim} frame payload needs {needed} bytes, {} left", d.remaining()),
            });
        }
        let mut data = Vec::with_capacity(t * dim);
        for _ in 0..t * dim {
            data.push(f64::from(d.finite_f32(&what)?));
        }
        let frames = Matrix::from_vec(t, dim, data)?;
        records.push(VideoRecord { id, labels, frames });
    }
    if !d.is_at_end() {
        return Err(Error::Malformed {
            offset: d.offset(),
            what: format!("{} trailing bytes after last record", d.remaining()),
        });
    }
    let num_classes = max_label.map_or(1, |m| m as usize + 1);
    Dataset::new(records, num_classes, dim)
}

pub fn read_vseq(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    decode_vseq(&bytes)
}
