//! Single-file dataset archive.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                        |
//! |--------------|------------------------------------------------|
//! | 8            | magic `OSMDDATA`                               |
//! | 4            | format version (`u32`, currently 1)            |
//! | 8            | header length `n` (`u64`)                      |
//! | n            | UTF-8 JSON [`ArchiveHeader`]                   |
//! | rest         | body: splits in header order                   |
//!
//! Each sample in the body is `id: u64`, `x_o` as `f64`s, `x_p` as `f64`s, then
//! the label as `u64`s (one for classification, `h·w` for segmentation). The
//! header `checksum` is the SHA-256 of the body.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Label, PairedSample, SynthTaskSpec, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OSMDDATA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub spec: Option<SynthTaskSpec>,
    pub seed: Option<u64>,
    pub checksum: String,
    pub task_kind: TaskKind,
    pub n_classes: usize,
    pub dims_o: Vec<usize>,
    pub dims_p: Vec<usize>,
    pub label_len: usize,
    pub splits: Vec<SplitHeader>,
}

fn encode_body(splits: &[(&str, &Dataset)], dims_o: &[usize], dims_p: &[usize]) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    for (name, d) in splits {
        for s in &d.samples {
            if s.x_o.shape() != dims_o || s.x_p.shape() != dims_p {
                return Err(Error::Data(format!(
                    "archive: sample {} in split {} has inconsistent shape",
                    s.id, name
                )));
            }
            body.extend_from_slice(&s.id.to_le_bytes());
            for v in s.x_o.data().iter().chain(s.x_p.data()) {
                body.extend_from_slice(&v.to_le_bytes());
            }
            match &s.y {
                Label::Class(c) => body.extend_from_slice(&(*c as u64).to_le_bytes()),
                Label::Map { classes, .. } => {
                    for c in classes {
                        body.extend_from_slice(&(*c as u64).to_le_bytes());
                    }
                }
            }
        }
    }
    Ok(body)
}

/// Writes named splits that share task, class count and shapes.
pub fn write_archive(
    path: &Path,
    splits: &[(&str, &Dataset)],
    spec: Option<&SynthTaskSpec>,
) -> Result<ArchiveHeader> {
    let first = splits
        .iter()
        .find_map(|(_, d)| d.samples.first().map(|s| (d, s)))
        .ok_or_else(|| Error::Data("archive: nothing to write".into()))?;
    let (d0, s0) = first;
    let label_len = match &s0.y {
        Label::Class(_) => 1,
        Label::Map { classes, .. } => classes.len(),
    };
    let dims_o = s0.x_o.shape().to_vec();
    let dims_p = s0.x_p.shape().to_vec();
    let body = encode_body(splits, &dims_o, &dims_p)?;
    let header = ArchiveHeader {
        spec: spec.cloned(),
        seed: spec.map(|s| s.seed),
        checksum: hex::encode(Sha256::digest(&body)),
        task_kind: d0.task_kind,
        n_classes: d0.n_classes,
        dims_o,
        dims_p,
        label_len,
        splits: splits
            .iter()
            .map(|(n, d)| SplitHeader {
                name: n.to_string(),
                count: d.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let b = self.take(n * 8)?;
        Some(
            b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

/// Reads an archive, verifying magic, version and checksum.
pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, Vec<(String, Dataset)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |m: &str| Error::format(path, m.to_string());
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(fail("bad magic"));
    }
    let version = r
        .take(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| fail("truncated version"))?;
    if version != VERSION {
        return Err(fail(&format!("unsupported version {}", version)));
    }
    let hlen = r.u64().ok_or_else(|| fail("truncated header length"))? as usize;
    let header: ArchiveHeader = serde_json::from_slice(r.take(hlen).ok_or_else(|| fail("truncated header"))?)
        .map_err(|e| fail(&format!("header: {}", e)))?;
    let body = &bytes[r.pos..];
    if hex::encode(Sha256::digest(body)) != header.checksum {
        return Err(fail("checksum mismatch"));
    }
    let (no, np): (usize, usize) = (header.dims_o.iter().product(), header.dims_p.iter().product());
    let mut out = Vec::new();
    for split in &header.splits {
        let mut samples = Vec::with_capacity(split.count);
        for _ in 0..split.count {
            let id = r.u64().ok_or_else(|| fail("truncated body"))?;
            let xo = r.f64s(no).ok_or_else(|| fail("truncated body"))?;
            let xp = r.f64s(np).ok_or_else(|| fail("truncated body"))?;
            let mut labels = Vec::with_capacity(header.label_len);
            for _ in 0..header.label_len {
                labels.push(r.u64().ok_or_else(|| fail("truncated body"))? as usize);
            }
            let y = match header.task_kind {
                TaskKind::Classification => Label::Class(labels[0]),
                TaskKind::Segmentation => Label::Map {
                    height: header.dims_o[1],
                    width: header.dims_o[2],
                    classes: labels,
                },
            };
            samples.push(PairedSample {
                id,
                x_o: Tensor::new(header.dims_o.clone(), xo)?,
                x_p: Tensor::new(header.dims_p.clone(), xp)?,
                y,
            });
        }
        out.push((
            split.name.clone(),
            Dataset::new(header.task_kind, header.n_classes, samples),
        ));
    }
    if r.pos != bytes.len() {
        return Err(fail("trailing bytes after body"));
    }
    Ok((header, out))
}
