//! Binary dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! header (32 bytes)
//!   magic        b"TDEN"
//!   version      u32 = 1
//!   n_records    u64
//!   d_feat       u32
//!   n_classes    u32
//!   max_regions  u32
//!   max_words    u32
//! record (fixed stride)
//!   n_regions    u32
//!   n_words      u32
//!   features     max_regions × d_feat f64   (zero padded)
//!   boxes        max_regions × 5 f64
//!   detector     max_regions × n_classes f64
//!   caption      max_words u32
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::synth::{DatasetRecord, TaskAnnotation};
use super::types::{BoxGeometry, RegionSet};
use crate::autodiff::Tensor;
use crate::error::{Result, TdenError};

pub const MAGIC: &[u8; 4] = b"TDEN";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetDims {
    pub d_feat: usize,
    pub n_classes: usize,
    pub max_regions: usize,
    pub max_words: usize,
}

impl DatasetDims {
    fn stride(&self) -> u64 {
        let f64s = self.max_regions * (self.d_feat + 5 + self.n_classes);
        (8 + f64s * 8 + self.max_words * 4) as u64
    }
}

pub fn write_dataset(path: &Path, dims: DatasetDims, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for v in [dims.d_feat, dims.n_classes, dims.max_regions, dims.max_words] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (i, r) in records.iter().enumerate() {
        let n = r.regions.len();
        if n > dims.max_regions
            || r.caption.len() > dims.max_words
            || r.regions.features.cols() != dims.d_feat
            || r.regions.detector.cols() != dims.n_classes
        {
            return Err(TdenError::contract(format!(
                "record {i} does not fit the dataset dimensions {dims:?}"
            )));
        }
        w.write_all(&(n as u32).to_le_bytes())?;
        w.write_all(&(r.caption.len() as u32).to_le_bytes())?;
        let pad = |w: &mut BufWriter<File>, vals: &[f64], total: usize| -> Result<()> {
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
            for _ in vals.len()..total {
                w.write_all(&0f64.to_le_bytes())?;
            }
            Ok(())
        };
        pad(&mut w, r.regions.features.data(), dims.max_regions * dims.d_feat)?;
        let boxes: Vec<f64> = r.regions.boxes.iter().flat_map(|b| b.to_array()).collect();
        pad(&mut w, &boxes, dims.max_regions * 5)?;
        pad(&mut w, r.regions.detector.data(), dims.max_regions * dims.n_classes)?;
        for k in 0..dims.max_words {
            let id = r.caption.get(k).copied().unwrap_or(0) as u32;
            w.write_all(&id.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TdenError::Format {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetDims, Vec<DatasetRecord>)> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    decode_dataset(&buf)
}

pub fn decode_dataset(buf: &[u8]) -> Result<(DatasetDims, Vec<DatasetRecord>)> {
    let mut c = Cursor { buf, pos: 0 };
    let fmt = |offset: usize, msg: String| TdenError::Format {
        offset: offset as u64,
        msg,
    };
    if c.take(4)? != MAGIC {
        return Err(fmt(0, "bad magic, expected TDEN".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let n = c.u64()?;
    let dims = DatasetDims {
        d_feat: c.u32()? as usize,
        n_classes: c.u32()? as usize,
        max_regions: c.u32()? as usize,
        max_words: c.u32()? as usize,
    };
    let expected = HEADER_LEN + n * dims.stride();
    if buf.len() as u64 != expected {
        return Err(fmt(
            buf.len().min(expected as usize),
            format!("file is {} bytes, header implies {expected}", buf.len()),
        ));
    }
    let mut records = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let start = c.pos;
        let nr = c.u32()? as usize;
        let nw = c.u32()? as usize;
        if nr == 0 || nr > dims.max_regions || nw > dims.max_words {
            return Err(fmt(start, format!("record counts {nr}/{nw} out of range")));
        }
        let feats = c.f64s(dims.max_regions * dims.d_feat)?;
        let boxes = c.f64s(dims.max_regions * 5)?;
        let det = c.f64s(dims.max_regions * dims.n_classes)?;
        let mut caption = Vec::with_capacity(nw);
        for k in 0..dims.max_words {
            let id = c.u32()? as usize;
            if k < nw {
                caption.push(id);
            }
        }
        let geoms = boxes[..nr * 5]
            .chunks_exact(5)
            .map(|b| BoxGeometry {
                x1: b[0],
                y1: b[1],
                x2: b[2],
                y2: b[3],
                area: b[4],
            })
            .collect();
        let regions = RegionSet::new(
            Tensor::matrix(nr, dims.d_feat, feats[..nr * dims.d_feat].to_vec())?,
            geoms,
            Tensor::matrix(nr, dims.n_classes, det[..nr * dims.n_classes].to_vec())?,
        )?;
        records.push(DatasetRecord { regions, caption });
    }
    Ok((dims, records))
}

/// Task sidecar: one JSON object per line, keyed by item index.
pub fn write_annotations(path: &Path, annotations: &[TaskAnnotation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, a) in annotations.iter().enumerate() {
        let line = serde_json::json!({ "id": id, "task": a });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<TaskAnnotation>> {
    #[derive(serde::Deserialize)]
    struct Line {
        id: usize,
        task: TaskAnnotation,
    }
    let mut out = Vec::new();
    for (k, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line)?;
        if parsed.id != out.len() {
            return Err(TdenError::Format {
                offset: k as u64,
                msg: format!("annotation line {k} has id {}, expected {}", parsed.id, out.len()),
            });
        }
        out.push(parsed.task);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_corpus, SynthConfig};
    use crate::nn::ModelConfig;

    fn dims() -> DatasetDims {
        DatasetDims {
            d_feat: 32,
            n_classes: 24,
            max_regions: 12,
            max_words: 18,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let corpus = gen_corpus(&SynthConfig::for_model(&ModelConfig::desk()), 4, 20, 0, 0).unwrap();
        let recs: Vec<_> = corpus.train.iter().map(|i| i.record.clone()).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tden");
        write_dataset(&p, dims(), &recs).unwrap();
        let (d, back) = read_dataset(&p).unwrap();
        assert_eq!(d, dims());
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.regions.features), bits(&b.regions.features));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tden");
        write_dataset(&p, dims(), &[]).unwrap();
        let (_, back) = read_dataset(&p).unwrap();
        assert!(back.is_empty());
        assert_eq!(std::fs::metadata(&p).unwrap().len(), HEADER_LEN);
    }

    #[test]
    fn corrupted_header_and_truncation_rejected() {
        let corpus = gen_corpus(&SynthConfig::for_model(&ModelConfig::desk()), 4, 3, 0, 0).unwrap();
        let recs: Vec<_> = corpus.train.iter().map(|i| i.record.clone()).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tden");
        write_dataset(&p, dims(), &recs).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[1] ^= 0xFF;
        assert!(matches!(decode_dataset(&bad), Err(TdenError::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(TdenError::Format { offset: 4, .. })));

        let short = &good[..good.len() - 7];
        assert!(matches!(decode_dataset(short), Err(TdenError::Format { .. })));
    }

    #[test]
    fn annotations_round_trip() {
        let corpus = gen_corpus(&SynthConfig::for_model(&ModelConfig::desk()), 4, 5, 0, 0).unwrap();
        let anns: Vec<_> = corpus.train.iter().map(|i| i.annotation.clone()).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_annotations(&p, &anns).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), anns);
    }
}
