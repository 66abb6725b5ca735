//! Verification of a test video against pristine references of the claimed
//! identity, and video-level evaluation.
//!
//! Distances are squared Euclidean between per-frame embeddings, minimized
//! over frame pairs and then over references. A video whose distance exceeds
//! the threshold is declared fake.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::feature::FeatureSequence;
use crate::par::Exec;
use crate::synth::{Label, ManipulationKind};
use crate::tid::EmbeddingSequence;

/// Squared distance threshold; a test video farther than this from every
/// reference is declared fake.
pub const DEFAULT_THRESHOLD_SQ: f64 = 1.1;

#[derive(Debug, Error, PartialEq)]
pub enum IdentifyError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("reference `{video}` belongs to `{found}`, not `{expected}`")]
    IdentityMismatch { expected: String, found: String, video: String },
    #[error("distance {0} is not a non-negative number")]
    Domain(f64),
    #[error("embedding widths differ: {0} vs {1}")]
    Width(usize, usize),
    #[error("evaluation needs both real and fake videos ({real} real, {fake} fake)")]
    SingleClass { real: usize, fake: usize },
    #[error("no pristine reference of `{identity}` outside context `{context}`")]
    Protocol { identity: String, context: String },
    #[error("cannot parse distance table line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, IdentifyError>;

/// Pristine embedded videos of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub identity_id: String,
    pub references: Vec<EmbeddingSequence>,
    pub contexts: Vec<Option<String>>,
}

impl ReferenceSet {
    pub fn new(
        identity_id: impl Into<String>,
        references: Vec<EmbeddingSequence>,
        contexts: Vec<Option<String>>,
    ) -> Result<Self> {
        let identity_id = identity_id.into();
        if references.is_empty() || references.iter().any(|r| r.is_empty()) {
            return Err(IdentifyError::EmptyInput("reference set"));
        }
        for r in &references {
            if let Some(found) = &r.identity_id {
                if *found != identity_id {
                    return Err(IdentifyError::IdentityMismatch {
                        expected: identity_id,
                        found: found.clone(),
                        video: r.video_id.clone(),
                    });
                }
            }
        }
        assert_eq!(references.len(), contexts.len(), "one context per reference");
        Ok(ReferenceSet { identity_id, references, contexts })
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

/// `min_{t, t'} ‖a(t) − b(t')‖²`.
pub fn pair_distance(a: &EmbeddingSequence, b: &EmbeddingSequence) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(IdentifyError::EmptyInput("sequence"));
    }
    if a.dim != b.dim {
        return Err(IdentifyError::Width(a.dim, b.dim));
    }
    let mut best = f64::INFINITY;
    for x in a.rows() {
        for y in b.rows() {
            let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            best = best.min(d);
        }
    }
    Ok(best)
}

/// Overall distance (minimum over references) and the per-reference ones.
pub fn min_distance(test: &EmbeddingSequence, refs: &ReferenceSet) -> Result<(f64, Vec<f64>)> {
    if refs.is_empty() {
        return Err(IdentifyError::EmptyInput("reference set"));
    }
    let per = refs
        .references
        .iter()
        .map(|r| pair_distance(test, r))
        .collect::<Result<Vec<f64>>>()?;
    let best = per.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((best, per))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub distance: f64,
    pub threshold_sq: f64,
    pub label: Label,
    pub per_reference: Vec<f64>,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.label {
            Label::Real => "REAL",
            Label::Fake => "FAKE",
        };
        write!(f, "{label} (distance {:.6}, threshold {})", self.distance, self.threshold_sq)
    }
}

/// FAKE iff `distance > threshold_sq`; the boundary counts as real.
pub fn verify(distance: f64, threshold_sq: f64) -> Result<Verdict> {
    if !(distance >= 0.0) {
        return Err(IdentifyError::Domain(distance));
    }
    let label = if distance > threshold_sq { Label::Fake } else { Label::Real };
    Ok(Verdict { distance, threshold_sq, label, per_reference: Vec::new() })
}

/// Embeds nothing itself: scores an embedded test video against references.
pub fn verify_against(test: &EmbeddingSequence, refs: &ReferenceSet, threshold_sq: f64) -> Result<Verdict> {
    let (d, per) = min_distance(test, refs)?;
    let mut v = verify(d, threshold_sq)?;
    v.per_reference = per;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub auc: f64,
    pub real: usize,
    pub fake: usize,
}

/// Probability that a random fake scores a larger distance than a random
/// real video, ties counting one half.
pub fn auc(scored: &[(f64, Label)]) -> Result<f64> {
    let reals: Vec<f64> = scored.iter().filter(|s| s.1 == Label::Real).map(|s| s.0).collect();
    let fakes: Vec<f64> = scored.iter().filter(|s| s.1 == Label::Fake).map(|s| s.0).collect();
    if reals.is_empty() || fakes.is_empty() {
        return Err(IdentifyError::SingleClass { real: reals.len(), fake: fakes.len() });
    }
    // twice the Mann–Whitney count keeps the tally integral
    let mut twice: u64 = 0;
    for f in &fakes {
        for r in &reals {
            twice += match f.partial_cmp(r) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * reals.len() * fakes.len()) as f64)
}

/// Accuracy of [`verify`] at `threshold_sq` and AUC.
pub fn evaluate(scored: &[(f64, Label)], threshold_sq: f64) -> Result<Evaluation> {
    let area = auc(scored)?;
    let mut correct = 0;
    for &(d, label) in scored {
        if verify(d, threshold_sq)?.label == label {
            correct += 1;
        }
    }
    let real = scored.iter().filter(|s| s.1 == Label::Real).count();
    Ok(Evaluation {
        accuracy: correct as f64 / scored.len() as f64,
        auc: area,
        real,
        fake: scored.len() - real,
    })
}

/// References for `test`: every pristine video of its identity recorded in a
/// different context.
pub fn leave_one_context_out(
    test_identity: &str,
    test_context: Option<&str>,
    pristine: &[(&EmbeddingSequence, Option<&str>)],
) -> Result<ReferenceSet> {
    let chosen: Vec<(&EmbeddingSequence, Option<&str>)> = pristine
        .iter()
        .filter(|(e, ctx)| e.identity_id.as_deref() == Some(test_identity) && *ctx != test_context)
        .copied()
        .collect();
    if chosen.is_empty() {
        return Err(IdentifyError::Protocol {
            identity: test_identity.to_string(),
            context: test_context.unwrap_or("").to_string(),
        });
    }
    ReferenceSet::new(
        test_identity,
        chosen.iter().map(|(e, _)| (*e).clone()).collect(),
        chosen.iter().map(|(_, c)| c.map(str::to_string)).collect(),
    )
}

/// One scored test video.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVideo {
    /// `real`, `face_swap` or `reenactment`.
    pub group: String,
    pub video_id: String,
    pub identity_id: String,
    pub verdict: Verdict,
    pub truth: Label,
}

/// A test video with its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct LabeledVideo<'a> {
    pub seq: &'a FeatureSequence,
    pub embedding: &'a EmbeddingSequence,
    pub label: Label,
    pub kind: Option<ManipulationKind>,
}

/// Scores every test video against the pristine videos of its identity
/// from other contexts. Pristine videos are the real-labelled test items.
pub fn run_protocol(items: &[LabeledVideo<'_>], threshold_sq: f64, exec: Exec) -> Result<Vec<ScoredVideo>> {
    let pristine: Vec<(&EmbeddingSequence, Option<&str>)> = items
        .iter()
        .filter(|i| i.label == Label::Real)
        .map(|i| (i.embedding, i.seq.context.as_deref()))
        .collect();
    exec.map(items.len(), |k| {
        let item = &items[k];
        let identity = item
            .seq
            .identity_id
            .clone()
            .ok_or(IdentifyError::EmptyInput("identity label of a test video"))?;
        let refs = leave_one_context_out(&identity, item.seq.context.as_deref(), &pristine)?;
        let verdict = verify_against(item.embedding, &refs, threshold_sq)?;
        Ok(ScoredVideo {
            group: item.kind.map_or("real", |k| k.as_str()).to_string(),
            video_id: item.seq.video_id.clone(),
            identity_id: identity,
            verdict,
            truth: item.label,
        })
    })
    .into_iter()
    .collect()
}

/// Evaluation over all videos plus one per manipulation kind, each kind
/// scored against all real videos.
pub fn evaluate_by_group(scored: &[ScoredVideo], threshold_sq: f64) -> Result<BTreeMap<String, Evaluation>> {
    let pairs = |filter: &dyn Fn(&ScoredVideo) -> bool| -> Vec<(f64, Label)> {
        scored.iter().filter(|s| filter(s)).map(|s| (s.verdict.distance, s.truth)).collect()
    };
    let mut out = BTreeMap::new();
    out.insert("all".to_string(), evaluate(&pairs(&|_| true), threshold_sq)?);
    for kind in [ManipulationKind::FaceSwap, ManipulationKind::Reenactment] {
        let p = pairs(&|s| s.truth == Label::Real || s.group == kind.as_str());
        if p.iter().any(|x| x.1 == Label::Fake) {
            out.insert(kind.as_str().to_string(), evaluate(&p, threshold_sq)?);
        }
    }
    Ok(out)
}

// -------------------------------------------------------------- export

const DISTANCE_HEADER: &str = "group\tvideo_id\tdistance\tlabel";

/// One row of the distance table.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRow {
    pub group: String,
    pub video_id: String,
    pub distance: f64,
    pub label: Label,
}

/// Tab-separated `(group, video_id, distance, label)` rows, where `label`
/// is the verdict.
pub fn export_distances(scored: &[ScoredVideo]) -> String {
    let mut out = format!("{DISTANCE_HEADER}\n");
    for s in scored {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.group,
            s.video_id,
            s.verdict.distance,
            s.verdict.label.as_str()
        ));
    }
    out
}

pub fn parse_distances(text: &str) -> Result<Vec<DistanceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(DISTANCE_HEADER) {
        return Err(IdentifyError::Parse { line: 1, reason: "unexpected header".into() });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |reason: String| IdentifyError::Parse { line: i + 2, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        rows.push(DistanceRow {
            group: f[0].to_string(),
            video_id: f[1].to_string(),
            distance: f[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            label: Label::parse(f[3]).ok_or_else(|| bad(format!("unknown label `{}`", f[3])))?,
        });
    }
    Ok(rows)
}

/// Reads `distance<TAB>label` pairs (with an optional header line).
pub fn parse_scores(text: &str) -> Result<Vec<(f64, Label)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if i == 0 && f.first().is_some_and(|s| s.parse::<f64>().is_err()) {
            continue;
        }
        let bad = |reason: String| IdentifyError::Parse { line: i + 1, reason };
        if f.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", f.len())));
        }
        let d = f[0].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        let l = Label::parse(f[1]).ok_or_else(|| bad(format!("unknown label `{}`", f[1])))?;
        out.push((d, l));
    }
    Ok(out)
}

/// `video_id<TAB>frame<TAB>v0<TAB>v1…` rows for every embedded frame.
pub fn export_embeddings(embs: &[EmbeddingSequence]) -> String {
    let mut out = String::new();
    for e in embs {
        for (t, row) in e.rows().enumerate() {
            out.push_str(&e.video_id);
            out.push('\t');
            out.push_str(&t.to_string());
            for v in row {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
    }
    out
}
