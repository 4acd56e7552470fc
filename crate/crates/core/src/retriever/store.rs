//! Per-video frame matrices on disk and in memory.
//!
//! Both the encoded frame-vector store (`SVFS`) and the raw synthetic frame
//! features (`SVRF`) share one layout, little-endian throughout:
//!
//! ```text
//! magic[4] | version: u32 | dim: u32
//! repeated until EOF, videos in ascending id order:
//!   id_len: u32 | id: utf-8 | n_frames: u32 | timestamps: f64 × n | rows: f64 × n·dim
//! ```

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::checkpoint::ByteReader;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::dot;

use super::{encode_frame, RetrieverParams};

pub const STORE_MAGIC: &[u8; 4] = b"SVFS";
pub const RAW_MAGIC: &[u8; 4] = b"SVRF";
pub const VERSION: u32 = 1;

const UNIT_NORM_TOL: f64 = 1e-9;

/// Frames of one video: timestamps plus a row-major `n × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBlock {
    pub timestamps: Vec<f64>,
    pub rows: Vec<f64>,
}

impl FrameBlock {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn row(&self, i: usize, dim: usize) -> &[f64] {
        &self.rows[i * dim..(i + 1) * dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTable {
    pub dim: usize,
    pub videos: BTreeMap<String, FrameBlock>,
}

impl FrameTable {
    pub fn new(dim: usize) -> Self {
        FrameTable {
            dim,
            videos: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, block: FrameBlock) -> Result<()> {
        let id = id.into();
        if block.rows.len() != block.len() * self.dim {
            return Err(Error::Dimension {
                op: "frame block",
                lhs: vec![block.len(), self.dim],
                rhs: vec![block.rows.len()],
            });
        }
        self.videos.insert(id, block);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&FrameBlock> {
        self.videos
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("video {id}")))
    }

    pub fn to_bytes(&self, magic: &[u8; 4]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, block) in &self.videos {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            for t in &block.timestamps {
                out.extend_from_slice(&t.to_le_bytes());
            }
            for v in &block.rows {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 4], origin: &Path) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            origin,
        };
        let got = r.take(4)?;
        if got != magic {
            return Err(Error::format(
                origin,
                format!(
                    "bad magic {:?}, expected {}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {version}"),
            ));
        }
        let dim = r.u32()? as usize;
        let mut table = FrameTable::new(dim);
        while !r.at_end() {
            let id = r.string()?;
            let n = r.u32()? as usize;
            let timestamps = r.f64s(n)?;
            let rows = r.f64s(n * dim)?;
            if table.videos.contains_key(&id) {
                return Err(Error::format(origin, format!("duplicate video {id}")));
            }
            table.videos.insert(id, FrameBlock { timestamps, rows });
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path, magic: &[u8; 4]) -> Result<()> {
        let bytes = self.to_bytes(magic);
        fsutil::atomic_write(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| fsutil::open_error(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic, path)
    }
}

/// Pre-computed, unit-normalized frame vectors for every video.
///
/// Because every row has unit norm, inner-product search over the store
/// ranks frames exactly as cosine similarity does.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameVectorStore {
    table: FrameTable,
}

impl FrameVectorStore {
    pub fn from_table(table: FrameTable) -> Result<Self> {
        for (id, block) in &table.videos {
            for i in 0..block.len() {
                let row = block.row(i, table.dim);
                let norm = dot(row, row).sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Validation(format!(
                        "video {id} frame {i} has norm {norm}, expected unit vectors"
                    )));
                }
            }
        }
        Ok(FrameVectorStore { table })
    }

    pub fn empty(dim: usize) -> Self {
        FrameVectorStore {
            table: FrameTable::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn len(&self) -> usize {
        self.table.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.videos.is_empty()
    }

    pub fn video(&self, id: &str) -> Result<&FrameBlock> {
        self.table.get(id)
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.table.videos.keys().map(String::as_str)
    }

    pub fn num_frames(&self, id: &str) -> Result<usize> {
        Ok(self.video(id)?.len())
    }

    pub fn frame_vector(&self, id: &str, frame: usize) -> Result<&[f64]> {
        let block = self.video(id)?;
        if frame >= block.len() {
            return Err(Error::Index {
                what: "frame index",
                index: frame,
                size: block.len(),
            });
        }
        Ok(block.row(frame, self.table.dim))
    }

    /// Inner product of `query` with every frame of the video.
    pub fn inner_products(&self, id: &str, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.table.dim {
            return Err(Error::Dimension {
                op: "inner product search",
                lhs: vec![query.len()],
                rhs: vec![self.table.dim],
            });
        }
        let block = self.video(id)?;
        Ok(block
            .rows
            .chunks_exact(self.table.dim)
            .map(|row| dot(row, query))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.table.to_bytes(STORE_MAGIC)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.table.save(path, STORE_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(FrameTable::load(path, STORE_MAGIC)?)
    }
}

/// Encodes and normalizes every frame of every raw video.
pub fn build_index(params: &RetrieverParams, raw: &FrameTable) -> Result<FrameVectorStore> {
    let cfg = &params.config;
    if raw.dim != cfg.feature_dim {
        return Err(Error::Validation(format!(
            "raw features have dimension {}, frame encoder expects {}",
            raw.dim, cfg.feature_dim
        )));
    }
    let mut table = FrameTable::new(cfg.vector_dim);
    for (id, block) in &raw.videos {
        let mut rows = Vec::with_capacity(block.len() * cfg.vector_dim);
        for i in 0..block.len() {
            let v = encode_frame(block.row(i, raw.dim), params).map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!("video {id} frame {i}: {msg}")),
                other => other,
            })?;
            rows.extend(v);
        }
        table.insert(
            id.clone(),
            FrameBlock {
                timestamps: block.timestamps.clone(),
                rows,
            },
        )?;
    }
    Ok(FrameVectorStore { table })
}
