//! Synthetic population of talking faces in feature space.
//!
//! Every identity owns a static shape vector and a motion signature: a bank
//! of latent oscillators whose frequencies, channel mixing and phase offsets
//! are drawn once per identity. Videos add per-video phases, AR(1) jitter and
//! the effects of a recording context (a shape offset and a pose bias). Fakes
//! pair one identity's shape with another identity's motion.
//!
//! All randomness flows from counter-derived ChaCha streams, so any video can
//! be regenerated on its own and parallel generation equals serial.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::feature::{
    write_sequence, DatasetManifest, FeatureError, FeatureFrame, FeatureSequence, ManifestRecord,
    EXPRESSION_DIM, POSE_DIM, SHAPE_DIM,
};
use crate::par::Exec;

pub const MOTION_DIM: usize = EXPRESSION_DIM + POSE_DIM;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("face swap target and driver are both `{0}`")]
    SelfSwap(String),
    #[error("reenactment subject and driver are both `{0}`")]
    SelfReenact(String),
    #[error("sequence `{0}` carries no identity label")]
    Unlabeled(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Mixes a list of integers into one stream seed (splitmix64 finalizer).
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(parts))
}

// Stream domains, so identity, context and video draws never collide.
const DOMAIN_IDENTITY: u64 = 1;
const DOMAIN_CONTEXT: u64 = 2;
const DOMAIN_VIDEO: u64 = 3;
const DOMAIN_FAKE: u64 = 4;

/// Scales of the generative process.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    /// Standard deviation of identity shape coefficients.
    pub shape_scale: f64,
    /// Standard deviation of the per-context shape offset.
    pub context_shape_scale: f64,
    /// Standard deviation of the per-context pose bias.
    pub context_pose_scale: f64,
    /// Latent oscillators per identity.
    pub drivers: usize,
    /// Range of oscillator frequencies in cycles per frame.
    pub frequency_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    /// Upper bound on the weight of a channel's secondary oscillator,
    /// relative to its primary amplitude.
    pub max_coupling: f64,
    /// Stationary standard deviation of the AR(1) jitter, per channel.
    pub noise_level: f64,
    pub ar_coefficient: f64,
    pub fps: f32,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            shape_scale: 1.0,
            context_shape_scale: 0.3,
            context_pose_scale: 0.3,
            drivers: 3,
            frequency_range: (0.03, 0.2),
            amplitude_range: (0.5, 1.5),
            max_coupling: 0.4,
            noise_level: 0.15,
            ar_coefficient: 0.8,
            fps: 25.0,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let (f0, f1) = self.frequency_range;
        let (a0, a1) = self.amplitude_range;
        let ok = self.drivers >= 1
            && f0 > 0.0
            && f0 <= f1
            && f1 < 0.5
            && a0 >= 0.0
            && a0 <= a1
            && self.max_coupling >= 0.0
            && self.max_coupling < 1.0
            && self.noise_level >= 0.0
            && self.shape_scale >= 0.0
            && self.context_shape_scale >= 0.0
            && self.context_pose_scale >= 0.0
            && (0.0..1.0).contains(&self.ar_coefficient)
            && self.fps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SynthError::Config(format!("invalid world parameters {self:?}")))
        }
    }
}

/// Motion of one expression or pose channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMotion {
    /// Oscillator that dominates the channel.
    pub driver: usize,
    /// Frequency of that oscillator, cycles per frame.
    pub base_frequency: f64,
    pub amplitude: f64,
    pub phase_offset: f64,
    /// Second oscillator mixed in at `coupling · amplitude`.
    pub secondary: usize,
    pub coupling: f64,
    pub secondary_phase: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub index: usize,
    pub identity_id: String,
    pub shape_vec: [f64; SHAPE_DIM],
    pub driver_frequencies: Vec<f64>,
    pub channels: [ChannelMotion; MOTION_DIM],
    pub ar_coefficient: f64,
}

impl IdentitySpec {
    /// Deterministic in `(seed, index)`.
    pub fn generate(seed: u64, index: usize, params: &WorldParams) -> Result<Self> {
        params.validate()?;
        let mut rng = stream(&[seed, DOMAIN_IDENTITY, index as u64]);
        let mut shape_vec = [0.0; SHAPE_DIM];
        for v in shape_vec.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = params.shape_scale * z;
        }
        let (f0, f1) = params.frequency_range;
        let driver_frequencies: Vec<f64> =
            (0..params.drivers).map(|_| rng.gen_range(f0..=f1)).collect();
        let (a0, a1) = params.amplitude_range;
        let channels = std::array::from_fn(|_| {
            let driver = rng.gen_range(0..params.drivers);
            let secondary = rng.gen_range(0..params.drivers);
            ChannelMotion {
                driver,
                base_frequency: driver_frequencies[driver],
                amplitude: rng.gen_range(a0..=a1),
                phase_offset: rng.gen_range(0.0..TAU),
                secondary,
                coupling: rng.gen_range(0.0..=params.max_coupling),
                secondary_phase: rng.gen_range(0.0..TAU),
                noise: params.noise_level,
            }
        });
        Ok(IdentitySpec {
            index,
            identity_id: identity_name(index),
            shape_vec,
            driver_frequencies,
            channels,
            ar_coefficient: params.ar_coefficient,
        })
    }

    /// Expression and pose trajectories, `T × MOTION_DIM`. Per-video driver
    /// phases come from `rng` first, then the jitter.
    pub fn motion(&self, frames: usize, rng: &mut impl Rng) -> Vec<[f64; MOTION_DIM]> {
        let phases: Vec<f64> = (0..self.driver_frequencies.len())
            .map(|_| rng.gen_range(0.0..TAU))
            .collect();
        let a = self.ar_coefficient;
        let innovation = (1.0 - a * a).sqrt();
        let mut jitter = [0.0; MOTION_DIM];
        for (j, ch) in jitter.iter_mut().zip(&self.channels) {
            let z: f64 = StandardNormal.sample(rng);
            *j = ch.noise * z;
        }
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut row = [0.0; MOTION_DIM];
            for (c, ch) in self.channels.iter().enumerate() {
                let t = t as f64;
                let primary = (TAU * ch.base_frequency * t + phases[ch.driver] + ch.phase_offset).sin();
                let f2 = self.driver_frequencies[ch.secondary];
                let second = (TAU * f2 * t + phases[ch.secondary] + ch.secondary_phase).sin();
                row[c] = ch.amplitude * (primary + ch.coupling * second) + jitter[c];
            }
            out.push(row);
            for (j, ch) in jitter.iter_mut().zip(&self.channels) {
                let z: f64 = StandardNormal.sample(rng);
                *j = a * *j + ch.noise * innovation * z;
            }
        }
        out
    }
}

/// A recording condition shared by every identity filmed in it.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSpec {
    pub index: usize,
    pub tag: String,
    pub shape_offset: [f64; SHAPE_DIM],
    pub pose_bias: [f64; POSE_DIM],
}

impl ContextSpec {
    pub fn generate(seed: u64, index: usize, params: &WorldParams) -> Result<Self> {
        params.validate()?;
        let mut rng = stream(&[seed, DOMAIN_CONTEXT, index as u64]);
        let mut shape_offset = [0.0; SHAPE_DIM];
        for v in shape_offset.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = params.context_shape_scale * z;
        }
        let mut pose_bias = [0.0; POSE_DIM];
        for v in pose_bias.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = params.context_pose_scale * z;
        }
        Ok(ContextSpec {
            index,
            tag: format!("ctx{index:02}"),
            shape_offset,
            pose_bias,
        })
    }

    /// The neutral context: no offset, no bias.
    pub fn neutral(tag: impl Into<String>) -> Self {
        ContextSpec {
            index: usize::MAX,
            tag: tag.into(),
            shape_offset: [0.0; SHAPE_DIM],
            pose_bias: [0.0; POSE_DIM],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ManipulationKind {
    FaceSwap,
    Reenactment,
}

impl ManipulationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ManipulationKind::FaceSwap => "face_swap",
            ManipulationKind::Reenactment => "reenactment",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "face_swap" => Some(ManipulationKind::FaceSwap),
            "reenactment" => Some(ManipulationKind::Reenactment),
            _ => None,
        }
    }
}

pub fn identity_name(index: usize) -> String {
    format!("id{index:03}")
}

fn assemble(shape: &[f64], motion: &[[f64; MOTION_DIM]], pose_bias: &[f64; POSE_DIM]) -> Vec<FeatureFrame> {
    motion
        .iter()
        .map(|m| {
            let mut f = FeatureFrame::zeros();
            f.shape_mut().copy_from_slice(shape);
            let mo = f.motion_mut();
            mo.copy_from_slice(m);
            for (p, b) in mo[EXPRESSION_DIM..].iter_mut().zip(pose_bias) {
                *p += b;
            }
            f.quantized()
        })
        .collect()
}

/// A pristine video of `id` recorded in `context`.
pub fn render_video(
    id: &IdentitySpec,
    context: &ContextSpec,
    frames: usize,
    video_id: impl Into<String>,
    rng: &mut impl Rng,
    fps: f32,
) -> FeatureSequence {
    let shape: Vec<f64> = id
        .shape_vec
        .iter()
        .zip(&context.shape_offset)
        .map(|(s, o)| s + o)
        .collect();
    let motion = id.motion(frames, rng);
    FeatureSequence::new(assemble(&shape, &motion, &context.pose_bias), fps, video_id)
        .with_identity(id.identity_id.clone())
        .with_context(context.tag.clone())
}

/// `target`'s shape on `driver`'s expressions and pose.
pub fn face_swap(target: &IdentitySpec, driver: &FeatureSequence) -> Result<FeatureSequence> {
    let driver_id = driver
        .identity_id
        .as_deref()
        .ok_or_else(|| SynthError::Unlabeled(driver.video_id.clone()))?;
    if driver_id == target.identity_id {
        return Err(SynthError::SelfSwap(target.identity_id.clone()));
    }
    let frames = driver
        .frames
        .iter()
        .map(|f| {
            let mut out = *f;
            out.shape_mut().copy_from_slice(&target.shape_vec);
            out.quantized()
        })
        .collect();
    let mut seq = FeatureSequence::new(
        frames,
        driver.fps,
        format!("fs_{}_{}", target.identity_id, driver.video_id),
    )
    .with_identity(target.identity_id.clone());
    seq.context = driver.context.clone();
    Ok(seq)
}

/// `subject`'s shape with motion freshly drawn from `driver`'s signature.
/// When the subject's recording context is known its pose bias is kept.
pub fn reenact(
    subject: &FeatureSequence,
    driver: &IdentitySpec,
    context: Option<&ContextSpec>,
    rng: &mut impl Rng,
) -> Result<FeatureSequence> {
    let subject_id = subject
        .identity_id
        .as_deref()
        .ok_or_else(|| SynthError::Unlabeled(subject.video_id.clone()))?;
    if subject_id == driver.identity_id {
        return Err(SynthError::SelfReenact(driver.identity_id.clone()));
    }
    let motion = driver.motion(subject.len(), rng);
    let bias = context.map(|c| c.pose_bias).unwrap_or([0.0; POSE_DIM]);
    let frames = subject
        .frames
        .iter()
        .zip(&motion)
        .map(|(f, m)| {
            let mut out = *f;
            out.motion_mut().copy_from_slice(m);
            for (p, b) in out.motion_mut()[EXPRESSION_DIM..].iter_mut().zip(&bias) {
                *p += b;
            }
            out.quantized()
        })
        .collect();
    let mut seq = FeatureSequence::new(
        frames,
        subject.fps,
        format!("re_{}_{}", subject.video_id, driver.identity_id),
    )
    .with_identity(subject_id.to_string());
    seq.context = subject.context.clone();
    Ok(seq)
}

// ------------------------------------------------------------ benchmark

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub train_ids: usize,
    pub val_ids: usize,
    pub test_ids: usize,
    pub vids_per_id: usize,
    pub frames: usize,
    pub contexts: usize,
    pub swaps_per_id: usize,
    pub reenactments_per_id: usize,
    pub seed: u64,
    pub world: WorldParams,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            train_ids: 16,
            val_ids: 8,
            test_ids: 8,
            vids_per_id: 8,
            frames: 200,
            contexts: 4,
            swaps_per_id: 4,
            reenactments_per_id: 4,
            seed: 7,
            world: WorldParams::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn total_ids(&self) -> usize {
        self.train_ids + self.val_ids + self.test_ids
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let fail = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.total_ids() < 4 {
            return fail("need at least 4 identities in total");
        }
        if self.train_ids < 2 {
            return fail("need at least 2 training identities");
        }
        if self.test_ids == 1 {
            return fail("fakes need a second test identity to borrow motion from");
        }
        if self.frames == 0 {
            return fail("videos need at least one frame");
        }
        if self.contexts < 2 && self.test_ids > 0 {
            return fail("leave-one-context-out needs at least 2 contexts");
        }
        if self.vids_per_id < 2 {
            return fail("each identity needs videos in at least 2 contexts");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub seq: FeatureSequence,
    pub label: Label,
    pub kind: Option<ManipulationKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub identities: Vec<IdentitySpec>,
    pub contexts: Vec<ContextSpec>,
    pub train: Vec<FeatureSequence>,
    pub val: Vec<FeatureSequence>,
    /// Pristine test videos first, then fakes. Every pristine video also
    /// serves as a reference for other-context test items of its identity.
    pub test: Vec<TestItem>,
}

/// Video `v` of an identity is filmed in context `v mod contexts`.
pub fn video_context(v: usize, contexts: usize) -> usize {
    v % contexts
}

fn pristine(cfg: &BenchmarkConfig, ids: &[IdentitySpec], contexts: &[ContextSpec], exec: Exec) -> Vec<FeatureSequence> {
    let v = cfg.vids_per_id;
    exec.map(ids.len() * v, |k| {
        let (id, vid) = (&ids[k / v], k % v);
        let mut rng = stream(&[cfg.seed, DOMAIN_VIDEO, id.index as u64, vid as u64]);
        render_video(
            id,
            &contexts[video_context(vid, cfg.contexts)],
            cfg.frames,
            format!("{}_v{vid:02}", id.identity_id),
            &mut rng,
            cfg.world.fps,
        )
    })
}

/// Builds train, validation and test splits over disjoint identities.
pub fn build_benchmark(cfg: &BenchmarkConfig, exec: Exec) -> Result<Benchmark> {
    cfg.validate()?;
    let identities = (0..cfg.total_ids())
        .map(|i| IdentitySpec::generate(cfg.seed, i, &cfg.world))
        .collect::<Result<Vec<_>>>()?;
    let contexts = (0..cfg.contexts.max(1))
        .map(|i| ContextSpec::generate(cfg.seed, i, &cfg.world))
        .collect::<Result<Vec<_>>>()?;
    let (train_ids, rest) = identities.split_at(cfg.train_ids);
    let (val_ids, test_ids) = rest.split_at(cfg.val_ids);
    let train = pristine(cfg, train_ids, &contexts, exec);
    let val = pristine(cfg, val_ids, &contexts, exec);
    let test_real = pristine(cfg, test_ids, &contexts, exec);

    let v = cfg.vids_per_id;
    let per_id = cfg.swaps_per_id + cfg.reenactments_per_id;
    let n_test = test_ids.len();
    let fakes = exec.map(n_test * per_id, |k| -> Result<TestItem> {
        let (c, j) = (k / per_id, k % per_id);
        let driver = (c + 1 + j % (n_test - 1)) % n_test;
        let vid = j % v;
        let target = &test_ids[c];
        let (mut seq, kind) = if j < cfg.swaps_per_id {
            (face_swap(target, &test_real[driver * v + vid])?, ManipulationKind::FaceSwap)
        } else {
            let mut rng = stream(&[cfg.seed, DOMAIN_FAKE, target.index as u64, j as u64]);
            let subject = &test_real[c * v + vid];
            let ctx = &contexts[video_context(vid, cfg.contexts)];
            (reenact(subject, &test_ids[driver], Some(ctx), &mut rng)?, ManipulationKind::Reenactment)
        };
        // the same (driver, video) pair recurs when fakes outnumber them
        seq.video_id = format!("{}_f{j:02}", seq.video_id);
        Ok(TestItem { seq, label: Label::Fake, kind: Some(kind) })
    });
    let mut test: Vec<TestItem> = test_real
        .into_iter()
        .map(|seq| TestItem { seq, label: Label::Real, kind: None })
        .collect();
    for f in fakes {
        test.push(f?);
    }
    Ok(Benchmark { identities, contexts, train, val, test })
}

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const VAL_MANIFEST: &str = "val.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const TEST_LABELS: &str = "test_labels.tsv";

/// Paths written by [`Benchmark::write`].
#[derive(Debug, Clone)]
pub struct BenchmarkFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub labels: PathBuf,
    pub feature_files: usize,
}

fn write_split(dir: &Path, split: &str, seqs: &[&FeatureSequence]) -> Result<DatasetManifest> {
    let sub = dir.join(split);
    fs::create_dir_all(&sub).map_err(|source| FeatureError::Io { path: sub.clone(), source })?;
    let mut records = Vec::with_capacity(seqs.len());
    for s in seqs {
        let rel = PathBuf::from(split).join(format!("{}.idrf", s.video_id));
        write_sequence(&dir.join(&rel), s)?;
        records.push(ManifestRecord {
            path: rel,
            identity_id: s.identity_id.clone().unwrap_or_default(),
            video_id: s.video_id.clone(),
            context: s.context.clone().unwrap_or_default(),
        });
    }
    Ok(DatasetManifest::new(records)?)
}

impl Benchmark {
    /// Writes feature files under `train/`, `val/`, `test/` plus the three
    /// manifests and the test label table.
    pub fn write(&self, dir: &Path) -> Result<BenchmarkFiles> {
        let train = write_split(dir, "train", &self.train.iter().collect::<Vec<_>>())?;
        let val = write_split(dir, "val", &self.val.iter().collect::<Vec<_>>())?;
        let test = write_split(dir, "test", &self.test.iter().map(|t| &t.seq).collect::<Vec<_>>())?;
        let files = BenchmarkFiles {
            train: dir.join(TRAIN_MANIFEST),
            val: dir.join(VAL_MANIFEST),
            test: dir.join(TEST_MANIFEST),
            labels: dir.join(TEST_LABELS),
            feature_files: self.train.len() + self.val.len() + self.test.len(),
        };
        train.write(&files.train)?;
        val.write(&files.val)?;
        test.write(&files.test)?;
        let labels = TestLabels(
            self.test
                .iter()
                .map(|t| (t.seq.video_id.clone(), t.label, t.kind))
                .collect(),
        );
        fs::write(&files.labels, labels.to_text())
            .map_err(|source| FeatureError::Io { path: files.labels.clone(), source })?;
        Ok(files)
    }
}

/// `video_id → (label, manipulation)` for a test manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TestLabels(pub Vec<(String, Label, Option<ManipulationKind>)>);

impl TestLabels {
    pub fn to_text(&self) -> String {
        let mut out = String::from("video_id\tlabel\tmanipulation\n");
        for (v, l, k) in &self.0 {
            out.push_str(&format!("{v}\t{}\t{}\n", l.as_str(), k.map_or("none", |k| k.as_str())));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| FeatureError::Manifest { line: i + 1, reason };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", f.len())).into());
            }
            let label = Label::parse(f[1]).ok_or_else(|| bad(format!("unknown label `{}`", f[1])))?;
            let kind = match f[2] {
                "none" => None,
                k => Some(ManipulationKind::parse(k).ok_or_else(|| bad(format!("unknown manipulation `{k}`")))?),
            };
            rows.push((f[0].to_string(), label, kind));
        }
        Ok(TestLabels(rows))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn get(&self, video_id: &str) -> Option<(Label, Option<ManipulationKind>)> {
        self.0.iter().find(|(v, _, _)| v == video_id).map(|(_, l, k)| (*l, *k))
    }
}
