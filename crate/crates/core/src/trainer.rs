//! Batch sampling and the two-phase training schedule.
//!
//! Phase 1 trains the temporal network alone on the metric loss and keeps
//! the weights with the best validation accuracy. Phase 2 enables the
//! generator and alternates one update of each network per iteration.
//!
//! Every batch is drawn from a stream keyed by `(seed, phase, iteration)`,
//! so a run can stop at any epoch boundary, be saved, and resume to the same
//! result as an uninterrupted run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    adam_step, read_checkpoint, write_checkpoint, AdamState, AutodiffError, Graph, ParamSet, Tensor,
};
use crate::feature::{FeatureError, FeatureFrame, FeatureSequence, FEATURE_DIM};
use crate::generator::{self, GenConfig, Generator};
use crate::losses::{
    adversarial_losses_graph, broadcast_means, expression_source, identification_accuracy,
    rec_loss_graph, weighted_sum, BatchEmbeddings, LossError,
};
use crate::par::Exec;
use crate::synth::stream_seed;
use crate::tid::{self, TemporalIdNet, TidConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    Data(String),
    #[error("phase {phase} diverged at iteration {iteration}: non-finite loss")]
    Divergence {
        phase: u8,
        iteration: usize,
        /// Best (or, failing that, latest finite) temporal network weights.
        last_good: Box<ParamSet>,
    },
    #[error("cannot parse {what}: {reason}")]
    Parse { what: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Identities per batch (`N`).
    pub identities_per_batch: usize,
    /// Videos per identity (`M`).
    pub videos_per_identity: usize,
    /// Frames per training window (`T`).
    pub frames: usize,
    pub lr_tid: f64,
    pub lr_gen: f64,
    pub lambda_cycle: f64,
    pub lambda_inv: f64,
    pub tau: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub iterations_per_epoch: usize,
    /// Fixed validation batches evaluated at every epoch end.
    pub validation_batches: usize,
    pub tid_hidden: usize,
    pub gen_hidden: usize,
    pub groupnorm_groups: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk scale.
    fn default() -> Self {
        TrainConfig {
            identities_per_batch: 4,
            videos_per_identity: 4,
            frames: 64,
            lr_tid: 1e-4,
            // ten times the full-scale rate: 500 phase-2 steps are too few
            // for the generator to move at 1e-5
            lr_gen: 1e-4,
            lambda_cycle: 1.0,
            lambda_inv: 0.001,
            tau: 0.08,
            phase1_epochs: 30,
            phase2_epochs: 10,
            iterations_per_epoch: 50,
            validation_batches: 4,
            tid_hidden: 64,
            gen_hidden: 64,
            groupnorm_groups: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-size schedule and widths.
    pub fn full_scale() -> Self {
        TrainConfig {
            identities_per_batch: 8,
            videos_per_identity: 8,
            frames: 96,
            lr_gen: 1e-5,
            phase1_epochs: 300,
            phase2_epochs: 100,
            iterations_per_epoch: 2500,
            tid_hidden: 512,
            gen_hidden: 512,
            groupnorm_groups: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.identities_per_batch < 2 || self.videos_per_identity < 2 {
            return fail("batches need at least 2 identities with 2 videos each".into());
        }
        if self.frames == 0 || self.iterations_per_epoch == 0 || self.validation_batches == 0 {
            return fail("frames, iterations per epoch and validation batches must be positive".into());
        }
        for (name, v) in [
            ("lr_tid", self.lr_tid),
            ("lr_gen", self.lr_gen),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda_cycle", self.lambda_cycle), ("lambda_inv", self.lambda_inv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        let net = |e: AutodiffError| TrainError::Config(e.to_string());
        self.tid_config().validate().map_err(net)?;
        self.gen_config().validate().map_err(net)?;
        Ok(())
    }

    pub fn tid_config(&self) -> TidConfig {
        tid::default_config().with_hidden(self.tid_hidden, self.groupnorm_groups)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig::default().with_hidden(self.gen_hidden, self.groupnorm_groups)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain numeric struct serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TrainError::Parse { what: "training config".into(), reason: e.to_string() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(io_err(path))
    }

    /// Fields that must agree between a saved run and its continuation;
    /// only the epoch counts may change.
    fn compatible(&self, other: &Self) -> bool {
        let strip = |c: &Self| TrainConfig { phase1_epochs: 0, phase2_epochs: 0, ..c.clone() };
        strip(self) == strip(other)
    }
}

// ---------------------------------------------------------- standardizer

pub const STD_FLOOR: f64 = 1e-6;

/// Per-coefficient z-scoring with statistics from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl Standardizer {
    pub fn fit(seqs: &[FeatureSequence]) -> Result<Self> {
        let count: usize = seqs.iter().map(|s| s.len()).sum();
        if count == 0 {
            return Err(TrainError::Data("no frames to compute feature statistics from".into()));
        }
        let mut mean = [0.0; FEATURE_DIM];
        for f in seqs.iter().flat_map(|s| &s.frames) {
            for (m, v) in mean.iter_mut().zip(&f.0) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = [0.0; FEATURE_DIM];
        for f in seqs.iter().flat_map(|s| &s.frames) {
            for ((s, v), m) in var.iter_mut().zip(&f.0).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.map(|s| (s / count as f64).sqrt().max(STD_FLOOR));
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, seq: &FeatureSequence) -> FeatureSequence {
        let frames = seq
            .frames
            .iter()
            .map(|f| FeatureFrame(std::array::from_fn(|k| (f.0[k] - self.mean[k]) / self.std[k])))
            .collect();
        FeatureSequence { frames, ..seq.clone() }
    }

    pub fn invert(&self, seq: &FeatureSequence) -> FeatureSequence {
        let frames = seq
            .frames
            .iter()
            .map(|f| FeatureFrame(std::array::from_fn(|k| f.0[k] * self.std[k] + self.mean[k])))
            .collect();
        FeatureSequence { frames, ..seq.clone() }
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("mean", Tensor::new(vec![FEATURE_DIM], self.mean.to_vec()).unwrap());
        p.insert("std", Tensor::new(vec![FEATURE_DIM], self.std.to_vec()).unwrap());
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        let get = |name: &str| -> Result<[f64; FEATURE_DIM]> {
            p.require(name)?
                .values()
                .try_into()
                .map_err(|_| TrainError::Parse { what: "standardizer".into(), reason: format!("`{name}` is not 62 wide") })
        };
        Ok(Standardizer { mean: get("mean")?, std: get("std")? })
    }
}

// ----------------------------------------------------------------- data

/// Sequences grouped by identity, both levels in sorted order.
#[derive(Debug, Clone, Default)]
pub struct GroupedData {
    pub identities: Vec<(String, Vec<FeatureSequence>)>,
}

impl GroupedData {
    pub fn new(seqs: Vec<FeatureSequence>) -> Result<Self> {
        let mut map: BTreeMap<String, Vec<FeatureSequence>> = BTreeMap::new();
        for s in seqs {
            let id = s
                .identity_id
                .clone()
                .ok_or_else(|| TrainError::Data(format!("video `{}` has no identity label", s.video_id)))?;
            map.entry(id).or_default().push(s);
        }
        for v in map.values_mut() {
            v.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        }
        Ok(GroupedData { identities: map.into_iter().collect() })
    }
}

/// `N × M` windows, identity-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub identities: Vec<String>,
    pub sequences: Vec<FeatureSequence>,
}

impl TrainingBatch {
    /// `N·M × T × 62`, row-major.
    pub fn matrix(&self) -> Vec<f64> {
        self.sequences.iter().flat_map(|s| s.to_matrix()).collect()
    }

    /// Average feature of each identity's `M` windows.
    pub fn identity_means(&self) -> Vec<FeatureFrame> {
        self.sequences
            .chunks(self.m)
            .map(|c| crate::feature::mean_feature(c).expect("batch windows are nonempty"))
            .collect()
    }
}

/// Draws `n` distinct identities, `m` distinct videos each and a uniform
/// `t`-frame window per video.
pub fn sample_batch(data: &GroupedData, n: usize, m: usize, t: usize, rng: &mut impl Rng) -> Result<TrainingBatch> {
    let eligible: Vec<(&String, Vec<&FeatureSequence>)> = data
        .identities
        .iter()
        .map(|(id, vids)| (id, vids.iter().filter(|v| v.len() >= t).collect::<Vec<_>>()))
        .filter(|(_, v)| v.len() >= m)
        .collect();
    if eligible.len() < n {
        return Err(TrainError::Data(format!(
            "need {n} identities with at least {m} videos of at least {t} frames, found {}",
            eligible.len()
        )));
    }
    let mut identities = Vec::with_capacity(n);
    let mut sequences = Vec::with_capacity(n * m);
    for c in sample(rng, eligible.len(), n).into_iter() {
        let (id, vids) = &eligible[c];
        identities.push((*id).clone());
        for j in sample(rng, vids.len(), m).into_iter() {
            let v = vids[j];
            let start = rng.gen_range(0..=v.len() - t);
            sequences.push(v.window(start, t));
        }
    }
    Ok(TrainingBatch { n, m, t, identities, sequences })
}

// ------------------------------------------------------------------ log

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Step,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub phase: u8,
    pub kind: RecordKind,
    /// Epoch the record belongs to; validation records at epoch 0 describe
    /// the model before any update of that phase.
    pub epoch: usize,
    /// Global step counter across both phases.
    pub iteration: usize,
    pub rec: Option<f64>,
    pub inv: Option<f64>,
    pub adv: Option<f64>,
    pub cycle: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_adv: Option<f64>,
}

impl LogRecord {
    fn step(phase: u8, epoch: usize, iteration: usize) -> Self {
        LogRecord {
            phase,
            kind: RecordKind::Step,
            epoch,
            iteration,
            rec: None,
            inv: None,
            adv: None,
            cycle: None,
            val_accuracy: None,
            val_adv: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

const LOG_HEADER: &str = "phase\tkind\tepoch\titeration\trec\tinv\tadv\tcycle\tval_accuracy\tval_adv";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl TrainLog {
    pub fn steps(&self, phase: u8) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.phase == phase && r.kind == RecordKind::Step)
    }

    pub fn validations(&self, phase: u8) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.phase == phase && r.kind == RecordKind::Validation)
    }

    /// Tab-separated, one record per line; `-` marks an absent value.
    /// Values use shortest round-trip formatting, so parsing is exact.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.records {
            let kind = match r.kind {
                RecordKind::Step => "step",
                RecordKind::Validation => "validation",
            };
            out.push_str(&format!(
                "{}\t{kind}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.phase,
                r.epoch,
                r.iteration,
                fmt_opt(r.rec),
                fmt_opt(r.inv),
                fmt_opt(r.adv),
                fmt_opt(r.cycle),
                fmt_opt(r.val_accuracy),
                fmt_opt(r.val_adv)
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| TrainError::Parse { what: format!("training log line {line}"), reason };
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(bad(1, "unexpected header".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(bad(i + 2, format!("expected 10 fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(i + 2, e.to_string()));
            let opt = |s: &str| -> Result<Option<f64>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|e| bad(i + 2, e.to_string()))
                }
            };
            let kind = match f[1] {
                "step" => RecordKind::Step,
                "validation" => RecordKind::Validation,
                k => return Err(bad(i + 2, format!("unknown record kind `{k}`"))),
            };
            records.push(LogRecord {
                phase: int(f[0])? as u8,
                kind,
                epoch: int(f[2])?,
                iteration: int(f[3])?,
                rec: opt(f[4])?,
                inv: opt(f[5])?,
                adv: opt(f[6])?,
                cycle: opt(f[7])?,
                val_accuracy: opt(f[8])?,
                val_adv: opt(f[9])?,
            });
        }
        Ok(TrainLog { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_tsv(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "phase {} epoch {} iteration {}", self.phase, self.epoch, self.iteration)
    }
}

// -------------------------------------------------------------- trainer

// Stream domains for the trainer's random draws.
const DOMAIN_PHASE1: u64 = 11;
const DOMAIN_PHASE2: u64 = 12;
const DOMAIN_VAL: u64 = 13;
const DOMAIN_TID_INIT: u64 = 21;
const DOMAIN_GEN_INIT: u64 = 22;

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(parts))
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub rec: f64,
    pub inv: f64,
    pub adv: f64,
    pub cycle: f64,
}

/// Complete training state; everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub standardizer: Standardizer,
    pub tid: TemporalIdNet,
    pub gen: Generator,
    pub tid_adam: AdamState,
    pub gen_adam: AdamState,
    /// 1 while the temporal network trains alone, 2 once the generator is on.
    pub phase: u8,
    /// Completed epochs of the current phase.
    pub epoch: usize,
    /// Global step counter.
    pub iteration: usize,
    /// Highest phase-1 validation accuracy and the weights that reached it.
    pub best: Option<(f64, ParamSet)>,
    pub log: TrainLog,
    train: GroupedData,
    val_batches: Vec<TrainingBatch>,
}

impl Trainer {
    /// Fits the standardizer on `train`, fixes the validation batches and
    /// initializes both networks.
    pub fn new(config: TrainConfig, train: &[FeatureSequence], val: &[FeatureSequence]) -> Result<Self> {
        config.validate()?;
        let standardizer = Standardizer::fit(train)?;
        let tid = TemporalIdNet::init(config.tid_config(), stream_seed(&[config.seed, DOMAIN_TID_INIT]))?;
        let gen = Generator::init(config.gen_config(), stream_seed(&[config.seed, DOMAIN_GEN_INIT]))?;
        Self::assemble(config, standardizer, tid, gen, train, val)
    }

    fn assemble(
        config: TrainConfig,
        standardizer: Standardizer,
        tid: TemporalIdNet,
        gen: Generator,
        train: &[FeatureSequence],
        val: &[FeatureSequence],
    ) -> Result<Self> {
        let train = GroupedData::new(train.iter().map(|s| standardizer.apply(s)).collect())?;
        let val_data = GroupedData::new(val.iter().map(|s| standardizer.apply(s)).collect())?;
        let (n, m, t) = (config.identities_per_batch, config.videos_per_identity, config.frames);
        let val_batches = (0..config.validation_batches)
            .map(|k| sample_batch(&val_data, n, m, t, &mut rng_for(&[config.seed, DOMAIN_VAL, k as u64])))
            .collect::<Result<Vec<_>>>()?;
        // fail early rather than at the first iteration
        sample_batch(&train, n, m, t, &mut rng_for(&[config.seed, DOMAIN_PHASE1, 0]))?;
        Ok(Trainer {
            config,
            standardizer,
            tid,
            gen,
            tid_adam: AdamState::default(),
            gen_adam: AdamState::default(),
            phase: 1,
            epoch: 0,
            iteration: 0,
            best: None,
            log: TrainLog::default(),
            train,
            val_batches,
        })
    }

    fn exec(&self) -> Exec {
        Exec::default_for_build()
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.config.identities_per_batch, self.config.videos_per_identity, self.config.frames)
    }

    /// Embeddings of a standardized batch under the current weights.
    fn embed_batch(&self, batch: &TrainingBatch) -> Result<BatchEmbeddings> {
        let (n, m, t) = (batch.n, batch.m, batch.t);
        let mut g = Graph::with_exec(self.exec());
        let vars = g.params(&self.tid.params, false);
        let x = g.constant(vec![n * m, t, FEATURE_DIM], batch.matrix())?;
        let y = tid::forward(&self.tid.config, &mut g, &vars, x)?;
        Ok(BatchEmbeddings::new(n, m, t, self.tid.config.out_channels, g.value(y).to_vec())?)
    }

    /// Generated features `x*` for every `(c, i)` of a batch, plus the matching
    /// source windows and the two identity-mean tensors used by the cycle.
    fn adversarial_inputs(&self, batch: &TrainingBatch) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (n, m, t) = (batch.n, batch.m, batch.t);
        let means = batch.identity_means();
        let mut source = Vec::with_capacity(n * m * t * FEATURE_DIM);
        let mut target_mean = Vec::with_capacity(n * m);
        let mut source_mean = Vec::with_capacity(n * m);
        for c in 0..n {
            for i in 0..m {
                let (k, j) = expression_source(c, i, n);
                source.extend(batch.sequences[k * m + j].to_matrix());
                target_mean.push(means[c]);
                source_mean.push(means[k]);
            }
        }
        (source, broadcast_means(&target_mean, t), broadcast_means(&source_mean, t))
    }

    /// Mean identification accuracy over the fixed validation batches, and
    /// in phase 2 the mean adversarial loss on them.
    pub fn validate(&self) -> Result<(f64, Option<f64>)> {
        let mut acc = 0.0;
        let mut adv = 0.0;
        for b in &self.val_batches {
            let emb = self.embed_batch(b)?;
            acc += identification_accuracy(&emb, self.config.tau)?;
            if self.phase == 2 {
                adv += self.adversarial_loss_value(b, &emb)?;
            }
        }
        let k = self.val_batches.len() as f64;
        Ok((acc / k, (self.phase == 2).then_some(adv / k)))
    }

    fn adversarial_loss_value(&self, batch: &TrainingBatch, real: &BatchEmbeddings) -> Result<f64> {
        let (n, m, t) = (batch.n, batch.m, batch.t);
        let (source, target_mean, _) = self.adversarial_inputs(batch);
        let mut g = Graph::with_exec(self.exec());
        let tv = g.params(&self.tid.params, false);
        let gv = g.params(&self.gen.params, false);
        let dims = vec![n * m, t, FEATURE_DIM];
        let s = g.constant(dims.clone(), source)?;
        let mu = g.constant(dims, target_mean)?;
        let fake = generator::forward(&self.gen.config, &mut g, &gv, s, mu)?;
        let ef = tid::forward(&self.tid.config, &mut g, &tv, fake)?;
        let er = g.constant(vec![n * m, t, real.dim], real.vectors.clone())?;
        let (adv, _) = adversarial_losses_graph(&mut g, ef, er, n, m, t, self.config.tau)?;
        Ok(g.scalar(adv))
    }

    fn record_validation(&mut self) -> Result<f64> {
        let (acc, adv) = self.validate()?;
        let mut r = LogRecord::step(self.phase, self.epoch, self.iteration);
        r.kind = RecordKind::Validation;
        r.val_accuracy = Some(acc);
        r.val_adv = adv;
        self.log.records.push(r);
        if self.phase == 1 && self.best.as_ref().map_or(true, |(b, _)| acc > *b) {
            self.best = Some((acc, self.tid.params.clone()));
        }
        Ok(acc)
    }

    fn diverged(&self) -> TrainError {
        let last_good = self.best.as_ref().map_or_else(|| self.tid.params.clone(), |(_, p)| p.clone());
        TrainError::Divergence { phase: self.phase, iteration: self.iteration, last_good: Box::new(last_good) }
    }

    fn next_batch(&self) -> Result<TrainingBatch> {
        let (n, m, t) = self.dims();
        let domain = if self.phase == 1 { DOMAIN_PHASE1 } else { DOMAIN_PHASE2 };
        sample_batch(&self.train, n, m, t, &mut rng_for(&[self.config.seed, domain, self.iteration as u64]))
    }

    /// One metric-learning update of the temporal network.
    pub fn phase1_step(&mut self, batch: &TrainingBatch) -> Result<f64> {
        let (n, m, t) = (batch.n, batch.m, batch.t);
        let mut g = Graph::with_exec(self.exec());
        let vars = g.params(&self.tid.params, true);
        let x = g.constant(vec![n * m, t, FEATURE_DIM], batch.matrix())?;
        let emb = tid::forward(&self.tid.config, &mut g, &vars, x)?;
        let loss = rec_loss_graph(&mut g, emb, n, m, t, self.config.tau)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(self.diverged());
        }
        g.backward(loss)?;
        g.write_grads(&vars, &mut self.tid.params)?;
        adam_step(&mut self.tid.params, &mut self.tid_adam, self.config.lr_tid)?;
        Ok(value)
    }

    /// Update of the temporal network on `L_rec + λ_inv·L_inv` with the
    /// generator frozen. Returns `(rec, inv)`.
    pub fn phase2_tid_step(&mut self, batch: &TrainingBatch) -> Result<(f64, f64)> {
        let (n, m, t) = (batch.n, batch.m, batch.t);
        let (source, target_mean, _) = self.adversarial_inputs(batch);
        let dims = vec![n * m, t, FEATURE_DIM];
        let mut g = Graph::with_exec(self.exec());
        let tv = g.params(&self.tid.params, true);
        let gv = g.params(&self.gen.params, false);
        let x = g.constant(dims.clone(), batch.matrix())?;
        let s = g.constant(dims.clone(), source)?;
        let mu = g.constant(dims, target_mean)?;
        let fake = generator::forward(&self.gen.config, &mut g, &gv, s, mu)?;
        let er = tid::forward(&self.tid.config, &mut g, &tv, x)?;
        let ef = tid::forward(&self.tid.config, &mut g, &tv, fake)?;
        let rec = rec_loss_graph(&mut g, er, n, m, t, self.config.tau)?;
        let (_, inv) = adversarial_losses_graph(&mut g, ef, er, n, m, t, self.config.tau)?;
        let total = weighted_sum(&mut g, rec, inv, self.config.lambda_inv)?;
        let (rv, iv) = (g.scalar(rec), g.scalar(inv));
        if !g.scalar(total).is_finite() {
            return Err(self.diverged());
        }
        g.backward(total)?;
        g.write_grads(&tv, &mut self.tid.params)?;
        adam_step(&mut self.tid.params, &mut self.tid_adam, self.config.lr_tid)?;
        Ok((rv, iv))
    }

    /// Update of the generator on `L_adv + λ_cycle·L_cycle` with the temporal
    /// network frozen. Returns `(adv, cycle)`.
    pub fn phase2_gen_step(&mut self, batch: &TrainingBatch) -> Result<(f64, f64)> {
        let (n, m, t) = (batch.n, batch.m, batch.t);
        let real = self.embed_batch(batch)?;
        let (source, target_mean, source_mean) = self.adversarial_inputs(batch);
        let dims = vec![n * m, t, FEATURE_DIM];
        let mut g = Graph::with_exec(self.exec());
        let tv = g.params(&self.tid.params, false);
        let gv = g.params(&self.gen.params, true);
        let s = g.constant(dims.clone(), source)?;
        let mu_t = g.constant(dims.clone(), target_mean)?;
        let mu_s = g.constant(dims, source_mean)?;
        let fake = generator::forward(&self.gen.config, &mut g, &gv, s, mu_t)?;
        let ef = tid::forward(&self.tid.config, &mut g, &tv, fake)?;
        let er = g.constant(vec![n * m, t, real.dim], real.vectors)?;
        let (adv, _) = adversarial_losses_graph(&mut g, ef, er, n, m, t, self.config.tau)?;
        let back = generator::forward(&self.gen.config, &mut g, &gv, fake, mu_s)?;
        let diff = g.sub(s, back)?;
        let cycle = g.sum_sq(diff);
        let total = weighted_sum(&mut g, adv, cycle, self.config.lambda_cycle)?;
        let (av, cv) = (g.scalar(adv), g.scalar(cycle));
        if !g.scalar(total).is_finite() {
            return Err(self.diverged());
        }
        g.backward(total)?;
        g.write_grads(&gv, &mut self.gen.params)?;
        adam_step(&mut self.gen.params, &mut self.gen_adam, self.config.lr_gen)?;
        Ok((av, cv))
    }

    /// Runs phase-1 epochs until `config.phase1_epochs` are complete.
    pub fn run_phase1(&mut self) -> Result<()> {
        self.run_phase1_with(|_| {})
    }

    /// As [`Trainer::run_phase1`], calling `progress` after each epoch.
    pub fn run_phase1_with(&mut self, mut progress: impl FnMut(&LogRecord)) -> Result<()> {
        while let Some(r) = self.phase1_epoch()? {
            progress(&r);
        }
        Ok(())
    }

    /// One phase-1 epoch followed by validation. `None` once the phase is
    /// complete (or over).
    pub fn phase1_epoch(&mut self) -> Result<Option<LogRecord>> {
        if self.phase != 1 {
            return Ok(None);
        }
        if self.log.validations(1).next().is_none() {
            self.record_validation()?;
        }
        if self.epoch >= self.config.phase1_epochs {
            return Ok(None);
        }
        for _ in 0..self.config.iterations_per_epoch {
            let batch = self.next_batch()?;
            let rec = self.phase1_step(&batch)?;
            self.iteration += 1;
            let mut r = LogRecord::step(1, self.epoch + 1, self.iteration);
            r.rec = Some(rec);
            self.log.records.push(r);
        }
        self.epoch += 1;
        self.record_validation()?;
        Ok(self.log.records.last().cloned())
    }

    /// Switches to the adversarial phase from the best phase-1 weights with
    /// fresh optimizer state, and records the enablement validation.
    pub fn begin_phase2(&mut self) -> Result<()> {
        if self.phase != 1 {
            return Ok(());
        }
        if let Some((_, best)) = &self.best {
            self.tid.params = best.clone();
        }
        self.tid_adam = AdamState::default();
        self.gen_adam = AdamState::default();
        self.phase = 2;
        self.epoch = 0;
        self.record_validation()?;
        Ok(())
    }

    pub fn run_phase2(&mut self) -> Result<()> {
        self.run_phase2_with(|_| {})
    }

    pub fn run_phase2_with(&mut self, mut progress: impl FnMut(&LogRecord)) -> Result<()> {
        while let Some(r) = self.phase2_epoch()? {
            progress(&r);
        }
        Ok(())
    }

    /// One adversarial epoch followed by validation, entering phase 2 first
    /// if needed. `None` once the phase is complete.
    pub fn phase2_epoch(&mut self) -> Result<Option<LogRecord>> {
        self.begin_phase2()?;
        if self.epoch >= self.config.phase2_epochs {
            return Ok(None);
        }
        for _ in 0..self.config.iterations_per_epoch {
            let batch = self.next_batch()?;
            let (rec, inv) = self.phase2_tid_step(&batch)?;
            let (adv, cycle) = self.phase2_gen_step(&batch)?;
            self.iteration += 1;
            let mut r = LogRecord::step(2, self.epoch + 1, self.iteration);
            (r.rec, r.inv, r.adv, r.cycle) = (Some(rec), Some(inv), Some(adv), Some(cycle));
            self.log.records.push(r);
        }
        self.epoch += 1;
        self.record_validation()?;
        Ok(self.log.records.last().cloned())
    }

    /// The weights to deploy: the best phase-1 model while in phase 1, the
    /// final model afterwards.
    pub fn model(&self) -> Model {
        let tid = match (&self.best, self.phase) {
            (Some((_, p)), 1) => TemporalIdNet { config: self.tid.config.clone(), params: p.clone() },
            _ => self.tid.clone(),
        };
        Model { tid, standardizer: self.standardizer.clone() }
    }

    // ------------------------------------------------------------ state

    /// Writes `state.idrc`, `config.toml` and `train_log.tsv` into `dir`.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut all = ParamSet::new();
        all.extend_prefixed("tid/", &self.tid.params);
        all.extend_prefixed("gen/", &self.gen.params);
        all.extend_prefixed("standardizer/", &self.standardizer.to_params());
        if let Some((acc, p)) = &self.best {
            all.extend_prefixed("best/", p);
            all.insert("meta/best_accuracy", Tensor::scalar(*acc));
        }
        for (prefix, st) in [("adam_tid", &self.tid_adam), ("adam_gen", &self.gen_adam)] {
            for (name, v) in &st.m {
                all.insert(format!("{prefix}/m/{name}"), Tensor::new(vec![v.len()], v.clone())?);
            }
            for (name, v) in &st.v {
                all.insert(format!("{prefix}/v/{name}"), Tensor::new(vec![v.len()], v.clone())?);
            }
            all.insert(format!("meta/{prefix}_t"), Tensor::scalar(st.t as f64));
        }
        all.insert("meta/phase", Tensor::scalar(self.phase as f64));
        all.insert("meta/epoch", Tensor::scalar(self.epoch as f64));
        all.insert("meta/iteration", Tensor::scalar(self.iteration as f64));
        write_checkpoint(&dir.join(STATE_FILE), &all)?;
        self.config.write(&dir.join(CONFIG_FILE))?;
        self.log.write(&dir.join(LOG_FILE))
    }

    /// Restores a run saved by [`Trainer::save_state`]. `config` may differ
    /// from the saved one only in its epoch counts.
    pub fn resume(dir: &Path, config: TrainConfig, train: &[FeatureSequence], val: &[FeatureSequence]) -> Result<Self> {
        let saved = TrainConfig::read(&dir.join(CONFIG_FILE))?;
        if !saved.compatible(&config) {
            return Err(TrainError::Config(
                "resumed run must keep every setting except the epoch counts".into(),
            ));
        }
        config.validate()?;
        let all = read_checkpoint(&dir.join(STATE_FILE))?;
        let standardizer = Standardizer::from_params(&all.strip_prefix("standardizer/"))?;
        let tid = TemporalIdNet::new(config.tid_config(), all.strip_prefix("tid/"))?;
        let gen = Generator::new(config.gen_config(), all.strip_prefix("gen/"))?;
        let mut t = Self::assemble(config, standardizer, tid, gen, train, val)?;
        let meta = |name: &str| -> Result<f64> { Ok(all.require(&format!("meta/{name}"))?.values()[0]) };
        t.phase = meta("phase")? as u8;
        t.epoch = meta("epoch")? as usize;
        t.iteration = meta("iteration")? as usize;
        if let Some(acc) = all.get("meta/best_accuracy") {
            t.best = Some((acc.values()[0], all.strip_prefix("best/")));
        }
        for (prefix, st) in [("adam_tid", &mut t.tid_adam), ("adam_gen", &mut t.gen_adam)] {
            st.t = meta(&format!("{prefix}_t"))? as u64;
            for (name, v) in all.strip_prefix(&format!("{prefix}/m/")).iter() {
                st.m.insert(name.clone(), v.values().to_vec());
            }
            for (name, v) in all.strip_prefix(&format!("{prefix}/v/")).iter() {
                st.v.insert(name.clone(), v.values().to_vec());
            }
        }
        t.log = TrainLog::read(&dir.join(LOG_FILE))?;
        Ok(t)
    }
}

pub const STATE_FILE: &str = "state.idrc";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.tsv";

/// A deployable temporal network together with its input statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub tid: TemporalIdNet,
    pub standardizer: Standardizer,
}

impl Model {
    pub fn embed(&self, seq: &FeatureSequence) -> Result<crate::tid::EmbeddingSequence> {
        Ok(self.tid.embed(&self.standardizer.apply(seq))?)
    }

    pub fn embed_all(&self, seqs: &[FeatureSequence], exec: Exec) -> Result<Vec<crate::tid::EmbeddingSequence>> {
        let std: Vec<FeatureSequence> = seqs.iter().map(|s| self.standardizer.apply(s)).collect();
        Ok(self.tid.embed_all(&std, exec)?)
    }

    /// Writes `<stem>.idrc` (weights and statistics) and `<stem>.toml`
    /// (network layout).
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        let mut all = ParamSet::new();
        all.extend_prefixed("net/", &self.tid.params);
        all.extend_prefixed("standardizer/", &self.standardizer.to_params());
        write_checkpoint(checkpoint, &all)?;
        let cfg = toml::to_string(&self.tid.config).expect("layout serializes");
        let path = checkpoint.with_extension("toml");
        fs::write(&path, cfg).map_err(io_err(&path))
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let path = checkpoint.with_extension("toml");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let config: TidConfig = toml::from_str(&text)
            .map_err(|e| TrainError::Parse { what: path.display().to_string(), reason: e.to_string() })?;
        let all = read_checkpoint(checkpoint)?;
        Ok(Model {
            tid: TemporalIdNet::new(config, all.strip_prefix("net/"))?,
            standardizer: Standardizer::from_params(&all.strip_prefix("standardizer/"))?,
        })
    }
}

/// Phase 1 from scratch: the best-by-validation weights and the log.
pub fn train_phase1(train: &[FeatureSequence], val: &[FeatureSequence], cfg: &TrainConfig) -> Result<(ParamSet, TrainLog)> {
    let mut t = Trainer::new(cfg.clone(), train, val)?;
    t.run_phase1()?;
    Ok((t.model().tid.params, t.log))
}

/// Phase 2 starting from `tid_params`: final temporal and generator weights.
pub fn train_phase2(
    train: &[FeatureSequence],
    val: &[FeatureSequence],
    tid_params: ParamSet,
    cfg: &TrainConfig,
) -> Result<(ParamSet, ParamSet, TrainLog)> {
    let mut t = Trainer::new(cfg.clone(), train, val)?;
    cfg.tid_config().check_params(&tid_params)?;
    t.tid.params = tid_params;
    t.best = None;
    t.begin_phase2()?;
    t.run_phase2()?;
    Ok((t.tid.params, t.gen.params, t.log))
}
