//! Per-frame 3DMM feature vectors, their binary container and dataset
//! manifests.
//!
//! A frame holds 62 coefficients: 40 shape, 10 expression and 12 pose
//! values (a row-major 3×4 rigid transform). Files store them as
//! little-endian `f32`; in memory they are widened to `f64` so that
//! `parse` followed by `serialize` is bit-exact.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const SHAPE_DIM: usize = 40;
pub const EXPRESSION_DIM: usize = 10;
pub const POSE_DIM: usize = 12;
pub const FEATURE_DIM: usize = SHAPE_DIM + EXPRESSION_DIM + POSE_DIM;

pub const SEQUENCE_MAGIC: &[u8; 4] = b"IDRF";
pub const SEQUENCE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("format error: {0}")]
    Format(String),
    #[error("feature dimension {0} is not {FEATURE_DIM}")]
    Dimension(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncation { expected: usize, found: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("identity mismatch: expected {expected:?}, found {found:?}")]
    IdentityMismatch {
        expected: Option<String>,
        found: Option<String>,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: Box<FeatureError>,
    },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// One frame of 3DMM coefficients in serialization order.
#[derive(Clone, Copy, PartialEq)]
pub struct FeatureFrame(pub [f64; FEATURE_DIM]);

impl FeatureFrame {
    pub fn zeros() -> Self {
        FeatureFrame([0.0; FEATURE_DIM])
    }

    pub fn from_parts(
        shape: &[f64; SHAPE_DIM],
        expression: &[f64; EXPRESSION_DIM],
        pose: &[f64; POSE_DIM],
    ) -> Self {
        let mut v = [0.0; FEATURE_DIM];
        v[..SHAPE_DIM].copy_from_slice(shape);
        v[SHAPE_DIM..SHAPE_DIM + EXPRESSION_DIM].copy_from_slice(expression);
        v[SHAPE_DIM + EXPRESSION_DIM..].copy_from_slice(pose);
        FeatureFrame(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn shape(&self) -> &[f64] {
        &self.0[..SHAPE_DIM]
    }

    pub fn expression(&self) -> &[f64] {
        &self.0[SHAPE_DIM..SHAPE_DIM + EXPRESSION_DIM]
    }

    pub fn pose(&self) -> &[f64] {
        &self.0[SHAPE_DIM + EXPRESSION_DIM..]
    }

    pub fn shape_mut(&mut self) -> &mut [f64] {
        &mut self.0[..SHAPE_DIM]
    }

    /// Expression and pose together: the channels that carry motion.
    pub fn motion(&self) -> &[f64] {
        &self.0[SHAPE_DIM..]
    }

    pub fn motion_mut(&mut self) -> &mut [f64] {
        &mut self.0[SHAPE_DIM..]
    }

    /// Rounds every coefficient to the nearest `f32`, the file precision.
    pub fn quantized(mut self) -> Self {
        for v in self.0.iter_mut() {
            *v = *v as f32 as f64;
        }
        self
    }
}

impl fmt::Debug for FeatureFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// A time-ordered run of frames from a single video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<FeatureFrame>,
    pub fps: f32,
    pub identity_id: Option<String>,
    pub video_id: String,
    pub context: Option<String>,
}

impl FeatureSequence {
    pub fn new(frames: Vec<FeatureFrame>, fps: f32, video_id: impl Into<String>) -> Self {
        FeatureSequence {
            frames,
            fps,
            identity_id: None,
            video_id: video_id.into(),
            context: None,
        }
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity_id = Some(identity.into());
        self
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = Some(context.into());
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames flattened to a `T × 62` row-major matrix.
    pub fn to_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frames.len() * FEATURE_DIM);
        for f in &self.frames {
            out.extend_from_slice(&f.0);
        }
        out
    }

    /// A contiguous window of `len` frames starting at `start`, keeping labels.
    pub fn window(&self, start: usize, len: usize) -> FeatureSequence {
        FeatureSequence {
            frames: self.frames[start..start + len].to_vec(),
            fps: self.fps,
            identity_id: self.identity_id.clone(),
            video_id: self.video_id.clone(),
            context: self.context.clone(),
        }
    }
}

/// Decodes an `IDRF` container. Labels are not stored in the file; the
/// returned sequence has an empty `video_id` and no identity or context.
pub fn parse_sequence(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != SEQUENCE_MAGIC {
            return Err(FeatureError::Format("bad magic".into()));
        }
        return Err(FeatureError::Truncation {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != SEQUENCE_MAGIC {
        return Err(FeatureError::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != SEQUENCE_VERSION {
        return Err(FeatureError::Format(format!("unsupported version {version}")));
    }
    let frame_count = word(8) as usize;
    let dim = word(12);
    if dim as usize != FEATURE_DIM {
        return Err(FeatureError::Dimension(dim));
    }
    let fps = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if frame_count == 0 {
        return Err(FeatureError::Format("sequence has no frames".into()));
    }
    if !(fps > 0.0) {
        return Err(FeatureError::Format(format!("fps must be positive, got {fps}")));
    }
    let expected = HEADER_LEN + frame_count * FEATURE_DIM * 4;
    if bytes.len() < expected {
        return Err(FeatureError::Truncation {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FeatureError::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let frames = bytes[HEADER_LEN..]
        .chunks_exact(FEATURE_DIM * 4)
        .map(|chunk| {
            let mut v = [0.0; FEATURE_DIM];
            for (dst, src) in v.iter_mut().zip(chunk.chunks_exact(4)) {
                *dst = f32::from_le_bytes(src.try_into().unwrap()) as f64;
            }
            FeatureFrame(v)
        })
        .collect();
    Ok(FeatureSequence::new(frames, fps, ""))
}

/// Encodes a sequence as an `IDRF` container. Coefficients are narrowed to
/// `f32`.
pub fn serialize_sequence(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + seq.frames.len() * FEATURE_DIM * 4);
    out.extend_from_slice(SEQUENCE_MAGIC);
    out.extend_from_slice(&SEQUENCE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    out.extend_from_slice(&seq.fps.to_le_bytes());
    for frame in &seq.frames {
        for v in frame.0 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_sequence(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sequence(&bytes).map_err(|e| FeatureError::File {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

pub fn write_sequence(path: &Path, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, serialize_sequence(seq)).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Componentwise mean over every frame of every sequence of one identity.
pub fn mean_feature(seqs: &[FeatureSequence]) -> Result<FeatureFrame> {
    let first = seqs.first().ok_or(FeatureError::EmptyInput("no sequences"))?;
    let mut sum = [0.0; FEATURE_DIM];
    let mut count = 0usize;
    for s in seqs {
        if s.identity_id != first.identity_id {
            return Err(FeatureError::IdentityMismatch {
                expected: first.identity_id.clone(),
                found: s.identity_id.clone(),
            });
        }
        for f in &s.frames {
            for (acc, v) in sum.iter_mut().zip(f.0.iter()) {
                *acc += v;
            }
        }
        count += s.frames.len();
    }
    if count == 0 {
        return Err(FeatureError::EmptyInput("sequences have no frames"));
    }
    for v in sum.iter_mut() {
        *v /= count as f64;
    }
    Ok(FeatureFrame(sum))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub identity_id: String,
    pub video_id: String,
    pub context: String,
}

/// Tab-separated list of feature files with their labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory that relative record paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = DatasetManifest {
            records,
            base_dir: PathBuf::new(),
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert((r.identity_id.as_str(), r.video_id.as_str())) {
                return Err(FeatureError::Manifest {
                    line: i + 1,
                    reason: format!(
                        "duplicate (identity, video) pair ({}, {})",
                        r.identity_id, r.video_id
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(FeatureError::Manifest {
                    line: i + 1,
                    reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            records.push(ManifestRecord {
                path: PathBuf::from(fields[0]),
                identity_id: fields[1].to_string(),
                video_id: fields[2].to_string(),
                context: fields[3].to_string(),
            });
        }
        let m = DatasetManifest {
            records,
            base_dir: base_dir.to_path_buf(),
        };
        m.check_unique()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.identity_id,
                r.video_id,
                r.context
            ));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, &base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    /// Loads every referenced file, attaching the manifest labels.
    pub fn load(&self) -> Result<Vec<FeatureSequence>> {
        self.records
            .iter()
            .map(|r| {
                let mut seq = read_sequence(&self.resolve(r))?;
                seq.identity_id = Some(r.identity_id.clone());
                seq.video_id = r.video_id.clone();
                seq.context = Some(r.context.clone());
                Ok(seq)
            })
            .collect()
    }
}
