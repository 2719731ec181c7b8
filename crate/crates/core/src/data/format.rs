//! On-disk dataset layout.
//!
//! A dataset directory holds `index.json` and one depth blob per frame. A
//! blob is the magic `DPTH1`, little-endian `u32` width and height, then
//! `H * W` little-endian `f32` depths in millimeters (0 = missing), row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::pose::{Pose, PoseFrame};
use crate::preprocess::{DepthFrame, Intrinsics};

pub const DEPTH_MAGIC: &[u8; 5] = b"DPTH1";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    /// Blob path relative to the dataset directory.
    pub depth: String,
    /// Joint positions in millimeters.
    pub pose: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub version: u32,
    pub units: String,
    pub intrinsics: Intrinsics,
    pub joints: usize,
    pub joint_names: Vec<String>,
    pub frames: Vec<FrameEntry>,
}

/// How record-level problems are handled while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// The first bad record aborts the load.
    #[default]
    Strict,
    /// Bad records are skipped and reported.
    Lenient,
}

/// A parsed `index.json` bound to its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub dir: PathBuf,
    pub index: IndexFile,
}

pub fn encode_depth(depth: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let mut out = Vec::with_capacity(13 + depth.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for v in depth.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let rest = bytes.strip_prefix(DEPTH_MAGIC.as_slice()).ok_or("bad depth magic")?;
    if rest.len() < 8 {
        return Err("truncated depth header".into());
    }
    let w = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
    let body = &rest[8..];
    if w == 0 || h == 0 {
        return Err(format!("invalid depth extent {w}x{h}"));
    }
    if body.len() != w * h * 4 {
        return Err(format!("expected {} depth bytes for {w}x{h}, found {}", w * h * 4, body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&[h, w], data).map_err(|e| e.to_string())
}

impl DatasetIndex {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: IndexFile = serde_json::from_str(&text)?;
        Ok(DatasetIndex { dir, index })
    }

    pub fn len(&self) -> usize {
        self.index.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.frames.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.index.joints
    }

    /// Reads and validates record `i`.
    pub fn read(&self, i: usize) -> Result<(DepthFrame, Pose)> {
        let entry = &self.index.frames[i];
        let record = |msg: String| Error::Record {
            frame_id: entry.id.clone(),
            msg,
        };
        if entry.pose.len() != self.index.joints {
            return Err(record(format!(
                "pose has {} joints, index declares {}",
                entry.pose.len(),
                self.index.joints
            )));
        }
        let path = self.dir.join(&entry.depth);
        let bytes = fs::read(&path).map_err(|e| record(format!("{}: {e}", path.display())))?;
        let depth = decode_depth(&bytes).map_err(record)?;
        let frame = DepthFrame::new(depth, self.index.intrinsics, entry.id.clone()).map_err(|e| record(e.to_string()))?;
        Ok((frame, Pose::new(entry.pose.clone(), PoseFrame::Millimeters)))
    }

    /// Records in index order, parsed lazily.
    pub fn frames(&self) -> impl Iterator<Item = Result<(DepthFrame, Pose)>> + '_ {
        (0..self.len()).map(move |i| self.read(i))
    }

    /// Loads every record. In lenient mode the failures are returned
    /// alongside the good records instead of aborting.
    pub fn load_all(&self, mode: LoadMode) -> Result<(Vec<(DepthFrame, Pose)>, Vec<Error>)> {
        let mut good = Vec::with_capacity(self.len());
        let mut bad = Vec::new();
        for r in self.frames() {
            match (r, mode) {
                (Ok(x), _) => good.push(x),
                (Err(e), LoadMode::Strict) => return Err(e),
                (Err(e), LoadMode::Lenient) => bad.push(e),
            }
        }
        Ok((good, bad))
    }

    /// Same directory, restricted to the given records (in that order).
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut index = self.index.clone();
        index.frames = rows.iter().map(|&i| self.index.frames[i].clone()).collect();
        DatasetIndex {
            dir: self.dir.clone(),
            index,
        }
    }
}

/// Incrementally writes a dataset directory.
pub struct DatasetWriter {
    dir: PathBuf,
    index: IndexFile,
}

impl DatasetWriter {
    pub fn create(dir: impl AsRef<Path>, intrinsics: Intrinsics, joint_names: Vec<String>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        Ok(DatasetWriter {
            dir,
            index: IndexFile {
                version: 1,
                units: "mm".into(),
                intrinsics,
                joints: joint_names.len(),
                joint_names,
                frames: Vec::new(),
            },
        })
    }

    pub fn add(&mut self, frame: &DepthFrame, pose: &Pose) -> Result<()> {
        pose.expect_frame(PoseFrame::Millimeters)?;
        if pose.num_joints() != self.index.joints {
            return Err(Error::Record {
                frame_id: frame.frame_id.clone(),
                msg: format!("pose has {} joints, dataset has {}", pose.num_joints(), self.index.joints),
            });
        }
        let rel = format!("frames/{}.dpth", frame.frame_id);
        let path = self.dir.join(&rel);
        fs::write(&path, encode_depth(&frame.depth)).map_err(|e| Error::io(&path, e))?;
        self.index.frames.push(FrameEntry {
            id: frame.frame_id.clone(),
            depth: rel,
            pose: pose.joints.clone(),
        });
        Ok(())
    }

    pub fn finish(self) -> Result<DatasetIndex> {
        write_index(&self.dir, &self.index)?;
        Ok(DatasetIndex {
            dir: self.dir,
            index: self.index,
        })
    }
}

pub fn write_index(dir: &Path, index: &IndexFile) -> Result<()> {
    let path = dir.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(index)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes a whole dataset at once.
pub fn write_dataset<'a>(
    dir: impl AsRef<Path>,
    intrinsics: Intrinsics,
    joint_names: Vec<String>,
    records: impl IntoIterator<Item = (&'a DepthFrame, &'a Pose)>,
) -> Result<DatasetIndex> {
    let mut w = DatasetWriter::create(dir, intrinsics, joint_names)?;
    for (f, p) in records {
        w.add(f, p)?;
    }
    w.finish()
}
