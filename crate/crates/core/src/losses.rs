//! Training objectives.
//!
//! A batch holds `N` identities with `M` videos of `T` frames each. Every
//! embedded frame acts as a pivot: its similarity to another video is the
//! negated, temperature-scaled minimum squared distance to any frame of that
//! video. A softmax over those similarities gives the probability that the
//! pivot's own identity wins, from which the metric, adversarial and
//! inverse losses follow. All probability math runs in log space.
//!
//! Each objective has a plain `f64` evaluator and a graph builder used for
//! training; the two agree to rounding.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamVars, Var};
use crate::feature::{FeatureFrame, FeatureSequence, FEATURE_DIM};
use crate::generator::{self, broadcast_frame, GenConfig, Generator};
use crate::par::Exec;
use crate::tid::{EmbeddingSequence, TemporalIdNet};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("probability {0} outside (0, 1)")]
    Domain(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Embeddings of an `N × M` grid of videos, `T` frames each, identity-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub dim: usize,
    /// `[(c·M + i)·T + t]·dim`, row-major.
    pub vectors: Vec<f64>,
}

impl BatchEmbeddings {
    pub fn new(n: usize, m: usize, t: usize, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != n * m * t * dim || dim == 0 || t == 0 {
            return Err(LossError::Config(format!(
                "{} values do not fill a {n}×{m}×{t}×{dim} grid",
                vectors.len()
            )));
        }
        Ok(BatchEmbeddings { n, m, t, dim, vectors })
    }

    /// Stacks sequences given identity-major: `seqs[c·M + i]`.
    pub fn from_sequences(n: usize, m: usize, seqs: &[EmbeddingSequence]) -> Result<Self> {
        if seqs.len() != n * m || seqs.is_empty() {
            return Err(LossError::Config(format!(
                "{} sequences for a {n}×{m} grid",
                seqs.len()
            )));
        }
        let (t, dim) = (seqs[0].len(), seqs[0].dim);
        if seqs.iter().any(|s| s.len() != t || s.dim != dim) {
            return Err(LossError::Config("sequences differ in length or width".into()));
        }
        let vectors = seqs.iter().flat_map(|s| s.vectors.iter().copied()).collect();
        Self::new(n, m, t, dim, vectors)
    }

    pub fn sequences(&self) -> usize {
        self.n * self.m
    }

    pub fn pivots(&self) -> usize {
        self.n * self.m * self.t
    }

    pub fn row(&self, c: usize, i: usize, t: usize) -> &[f64] {
        let r = (c * self.m + i) * self.t + t;
        &self.vectors[r * self.dim..(r + 1) * self.dim]
    }

    fn check_grid(&self) -> Result<()> {
        check_grid(self.n, self.m)
    }
}

fn check_grid(n: usize, m: usize) -> Result<()> {
    if n < 2 || m < 2 {
        return Err(LossError::Config(format!(
            "need at least 2 identities and 2 videos each, got {n}×{m}"
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `−(1/τ) · min_t' ‖pivot − other(t')‖²`.
pub fn similarity(pivot: &[f64], other: &EmbeddingSequence, tau: f64) -> Result<f64> {
    if other.is_empty() {
        return Err(LossError::EmptyInput("other sequence has no frames"));
    }
    if !(tau > 0.0) {
        return Err(LossError::Config(format!("temperature must be positive, got {tau}")));
    }
    let best = other
        .rows()
        .map(|r| sq_dist(pivot, r))
        .fold(f64::INFINITY, f64::min);
    Ok(-best / tau)
}

/// Role of one candidate sequence relative to a pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Excluded,
    Positive,
    Negative,
}

/// Roles for real pivots (own video excluded) or generated pivots (none
/// excluded), laid out as `pivots × sequences`.
fn roles(n: usize, m: usize, t: usize, generated: bool) -> Vec<Role> {
    let s_total = n * m;
    let mut out = Vec::with_capacity(s_total * t * s_total);
    for own in 0..s_total {
        let c = own / m;
        for _ in 0..t {
            for s in 0..s_total {
                out.push(if s / m != c {
                    Role::Negative
                } else if s == own && !generated {
                    Role::Excluded
                } else {
                    Role::Positive
                });
            }
        }
    }
    out
}

fn masks(roles: &[Role]) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let pos = roles.iter().map(|&r| r == Role::Positive).collect();
    let neg = roles.iter().map(|&r| r == Role::Negative).collect();
    let all = roles.iter().map(|&r| r != Role::Excluded).collect();
    (pos, neg, all)
}

/// Min squared distances `pivots × sequences` for pivot rows against every
/// frame of every batch sequence.
fn min_distances(pivots: &[f64], others: &BatchEmbeddings, exec: Exec) -> Vec<f64> {
    let d = others.dim;
    let seq_len = others.t * d;
    let rows = pivots.len() / d;
    let per_row = exec.map(rows, |r| {
        let p = &pivots[r * d..(r + 1) * d];
        others
            .vectors
            .chunks_exact(seq_len)
            .map(|seq| seq.chunks_exact(d).map(|o| sq_dist(p, o)).fold(f64::INFINITY, f64::min))
            .collect::<Vec<f64>>()
    });
    per_row.concat()
}

fn masked_lse(row: &[f64], mask: &[bool]) -> f64 {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - max).exp())
        .sum();
    max + s.ln()
}

/// `p = exp(lse_pos − lse_all)` per pivot, clamped into the open interval.
fn probabilities_from(min_d: &[f64], roles: &[Role], s_total: usize, tau: f64) -> Vec<f64> {
    let (pos, _, all) = masks(roles);
    min_d
        .chunks_exact(s_total)
        .zip(pos.chunks_exact(s_total).zip(all.chunks_exact(s_total)))
        .map(|(d, (pm, am))| {
            let sims: Vec<f64> = d.iter().map(|v| -v / tau).collect();
            let lp = masked_lse(&sims, pm) - masked_lse(&sims, am);
            lp.exp().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
        })
        .collect()
}

/// Softmax probability that each real pivot `(c, i, t)` is matched to its own
/// identity, indexed like [`BatchEmbeddings::vectors`] rows.
pub fn batch_probabilities(emb: &BatchEmbeddings, tau: f64) -> Result<Vec<f64>> {
    emb.check_grid()?;
    if !(tau > 0.0) {
        return Err(LossError::Config(format!("temperature must be positive, got {tau}")));
    }
    let min_d = min_distances(&emb.vectors, emb, Exec::default_for_build());
    let roles = roles(emb.n, emb.m, emb.t, false);
    Ok(probabilities_from(&min_d, &roles, emb.sequences(), tau))
}

fn check_probabilities(p: &[f64]) -> Result<()> {
    match p.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        Some(&bad) => Err(LossError::Domain(bad)),
        None => Ok(()),
    }
}

/// `Σ −log p`.
pub fn rec_loss(p: &[f64]) -> Result<f64> {
    check_probabilities(p)?;
    Ok(p.iter().map(|v| -v.ln()).sum())
}

/// `Σ −log p*`.
pub fn adv_loss(p_star: &[f64]) -> Result<f64> {
    rec_loss(p_star)
}

/// `Σ −log(1 − p*)`.
pub fn inv_loss(p_star: &[f64]) -> Result<f64> {
    check_probabilities(p_star)?;
    Ok(p_star.iter().map(|v| -(1.0 - v).ln()).sum())
}

pub fn total_generator_loss(adv: f64, cycle: f64, lambda_cycle: f64) -> f64 {
    adv + lambda_cycle * cycle
}

pub fn total_tid_loss(rec: f64, inv: f64, lambda_inv: f64) -> f64 {
    rec + lambda_inv * inv
}

/// Fraction of pivots whose best same-identity similarity (other videos)
/// strictly beats every similarity to other identities.
pub fn identification_accuracy(emb: &BatchEmbeddings, tau: f64) -> Result<f64> {
    emb.check_grid()?;
    if !(tau > 0.0) {
        return Err(LossError::Config(format!("temperature must be positive, got {tau}")));
    }
    let s_total = emb.sequences();
    let min_d = min_distances(&emb.vectors, emb, Exec::default_for_build());
    let roles = roles(emb.n, emb.m, emb.t, false);
    let hits = min_d
        .chunks_exact(s_total)
        .zip(roles.chunks_exact(s_total))
        .filter(|(d, r)| {
            let best = |want: Role| {
                d.iter()
                    .zip(r.iter())
                    .filter(|(_, &x)| x == want)
                    .map(|(&v, _)| -v / tau)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            best(Role::Positive) > best(Role::Negative)
        })
        .count();
    Ok(hits as f64 / emb.pivots() as f64)
}

/// Which real video drives the generated video `(c, i)`: video `i` of
/// identity `(c + 1 + i mod (N−1)) mod N`, never identity `c` itself.
pub fn expression_source(c: usize, i: usize, n: usize) -> (usize, usize) {
    ((c + 1 + i % (n - 1)) % n, i)
}

/// `p*` for generated videos laid out identity-major like the real batch
/// (`generated[c·M + i]` carries target identity `c`), compared against the
/// real embeddings.
pub fn adv_probabilities(
    tid: &TemporalIdNet,
    generated: &[FeatureSequence],
    real_emb: &BatchEmbeddings,
    tau: f64,
) -> Result<Vec<f64>> {
    real_emb.check_grid()?;
    if generated.len() != real_emb.sequences() {
        return Err(LossError::Config(format!(
            "{} generated videos for {} real ones",
            generated.len(),
            real_emb.sequences()
        )));
    }
    let exec = Exec::default_for_build();
    let gen_emb = tid.embed_all(generated, exec)?;
    let gen = BatchEmbeddings::from_sequences(real_emb.n, real_emb.m, &gen_emb)?;
    if gen.t != real_emb.t || gen.dim != real_emb.dim {
        return Err(LossError::Config("generated and real batches differ in shape".into()));
    }
    let min_d = min_distances(&gen.vectors, real_emb, exec);
    let roles = roles(real_emb.n, real_emb.m, real_emb.t, true);
    Ok(probabilities_from(&min_d, &roles, real_emb.sequences(), tau))
}

/// `Σ_t ‖x(t) − G[G[x(t), x̄_c], x̄_i]‖²`.
pub fn cycle_loss(gen: &Generator, x_i: &FeatureSequence, mean_c: &FeatureFrame, mean_i: &FeatureFrame) -> Result<f64> {
    let x = x_i.to_matrix();
    let fake = gen.generate_matrix(&x, mean_c)?;
    let back = gen.generate_matrix(&fake, mean_i)?;
    Ok(x.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum())
}

// ------------------------------------------------------------------ graph

/// Log-softmax terms for every pivot row of `pivots` against the sequences
/// in `others` (`N·M` blocks of `T` rows).
pub struct LogTerms {
    pub lse_pos: Var,
    pub lse_neg: Var,
    pub lse_all: Var,
}

fn log_terms(
    g: &mut Graph,
    pivots: Var,
    others: Var,
    n: usize,
    m: usize,
    t: usize,
    tau: f64,
    generated: bool,
) -> Result<LogTerms> {
    check_grid(n, m)?;
    if !(tau > 0.0) {
        return Err(LossError::Config(format!("temperature must be positive, got {tau}")));
    }
    let d = g.segment_min_sq_dist(pivots, others, t)?;
    if g.dims(d)[0] != n * m * t || g.dims(d)[1] != n * m {
        return Err(LossError::Config(format!(
            "distance table {:?} does not match a {n}×{m}×{t} grid",
            g.dims(d)
        )));
    }
    let sims = g.scale(d, -1.0 / tau);
    let (pos, neg, all) = masks(&roles(n, m, t, generated));
    Ok(LogTerms {
        lse_pos: g.masked_logsumexp(sims, pos)?,
        lse_neg: g.masked_logsumexp(sims, neg)?,
        lse_all: g.masked_logsumexp(sims, all)?,
    })
}

/// `Σ (lse_all − lse_pos)` over pivots, i.e. `Σ −log p`.
fn neg_log_p(g: &mut Graph, terms: &LogTerms) -> Result<Var> {
    let diff = g.sub(terms.lse_all, terms.lse_pos)?;
    Ok(g.sum(diff))
}

/// Metric loss on real embeddings `emb` (`N·M × T × dim` or flat rows).
pub fn rec_loss_graph(g: &mut Graph, emb: Var, n: usize, m: usize, t: usize, tau: f64) -> Result<Var> {
    let terms = log_terms(g, emb, emb, n, m, t, tau, false)?;
    neg_log_p(g, &terms)
}

/// `(L_adv, L_inv)` for generated embeddings against real ones.
pub fn adversarial_losses_graph(
    g: &mut Graph,
    generated: Var,
    real: Var,
    n: usize,
    m: usize,
    t: usize,
    tau: f64,
) -> Result<(Var, Var)> {
    let terms = log_terms(g, generated, real, n, m, t, tau, true)?;
    let adv = neg_log_p(g, &terms)?;
    // −log(1 − p) = lse_all − lse_neg
    let inv = g.sub(terms.lse_all, terms.lse_neg)?;
    let inv = g.sum(inv);
    Ok((adv, inv))
}

/// Cycle loss for a batch `x` (`B×T×62`) with per-sequence target means
/// `mean_target` and own-identity means `mean_own` (both `B×T×62`).
pub fn cycle_loss_graph(
    g: &mut Graph,
    config: &GenConfig,
    vars: &ParamVars,
    x: Var,
    mean_target: Var,
    mean_own: Var,
) -> Result<Var> {
    let fake = generator::forward(config, g, vars, x, mean_target)?;
    let back = generator::forward(config, g, vars, fake, mean_own)?;
    let diff = g.sub(x, back)?;
    Ok(g.sum_sq(diff))
}

/// `B×T×62` tensor repeating one frame per sequence across time.
pub fn broadcast_means(means: &[FeatureFrame], t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(means.len() * t * FEATURE_DIM);
    for m in means {
        out.extend(broadcast_frame(m, t));
    }
    out
}

pub fn weighted_sum(g: &mut Graph, a: Var, b: Var, weight: f64) -> Result<Var> {
    let wb = g.scale(b, weight);
    Ok(g.add(a, wb)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use crate::generator::GenConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(seed: u64, rows: usize, dim: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in v.chunks_exact_mut(dim) {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    fn random_batch(seed: u64, n: usize, m: usize, t: usize, dim: usize) -> BatchEmbeddings {
        BatchEmbeddings::new(n, m, t, dim, unit_rows(seed, n * m * t, dim)).unwrap()
    }

    /// Literal evaluation with plain exponentials over every `(k, j)`.
    fn brute_probabilities(emb: &BatchEmbeddings, tau: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for c in 0..emb.n {
            for i in 0..emb.m {
                for t in 0..emb.t {
                    let pivot = emb.row(c, i, t);
                    let sim = |k: usize, j: usize| {
                        let mut best = f64::INFINITY;
                        for u in 0..emb.t {
                            best = best.min(sq_dist(pivot, emb.row(k, j, u)));
                        }
                        -best / tau
                    };
                    let mut num = 0.0;
                    for j in 0..emb.m {
                        if j != i {
                            num += sim(c, j).exp();
                        }
                    }
                    let mut other = 0.0;
                    for k in 0..emb.n {
                        if k == c {
                            continue;
                        }
                        for j in 0..emb.m {
                            other += sim(k, j).exp();
                        }
                    }
                    out.push(num / (num + other));
                }
            }
        }
        out
    }

    #[test]
    fn similarity_cases() {
        let other = EmbeddingSequence::new(vec![1.0, 0.0, 0.0, 1.0], 2, "o");
        assert_eq!(similarity(&[0.0, 1.0], &other, 0.08).unwrap(), 0.0);
        // squared distance 0.08 to the nearest row
        let pivot = [1.0, 0.08f64.sqrt()];
        assert!((similarity(&pivot, &other, 0.08).unwrap() + 1.0).abs() < 1e-12);
        let mut bigger = other.clone();
        bigger.vectors.extend([-5.0, -5.0]);
        assert!(similarity(&pivot, &bigger, 0.08).unwrap() >= similarity(&pivot, &other, 0.08).unwrap());
        let empty = EmbeddingSequence::new(vec![], 2, "e");
        assert!(matches!(similarity(&pivot, &empty, 0.08), Err(LossError::EmptyInput(_))));
        // temporal permutation of `other`
        let swapped = EmbeddingSequence::new(vec![0.0, 1.0, 1.0, 0.0], 2, "s");
        assert_eq!(similarity(&pivot, &swapped, 0.08).unwrap(), similarity(&pivot, &other, 0.08).unwrap());
    }

    #[test]
    fn symmetric_batch_gives_closed_form() {
        let emb = BatchEmbeddings::new(8, 8, 2, 3, [1.0, 0.0, 0.0].repeat(128)).unwrap();
        let p = batch_probabilities(&emb, 0.08).unwrap();
        for v in &p {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
        let emb = BatchEmbeddings::new(3, 4, 1, 2, [0.0, 1.0].repeat(12)).unwrap();
        let expect = 3.0 / (3.0 + 2.0 * 4.0);
        for v in batch_probabilities(&emb, 0.08).unwrap() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dominance_limit() {
        // identity 0's videos coincide, identity 1 sits at the antipode
        let mut v = Vec::new();
        for c in 0..2 {
            for _ in 0..2 {
                v.extend(if c == 0 { [1.0, 0.0] } else { [-1.0, 0.0] });
            }
        }
        let emb = BatchEmbeddings::new(2, 2, 1, 2, v).unwrap();
        for p in batch_probabilities(&emb, 0.08).unwrap() {
            assert!(p > 1.0 - 1e-15);
        }
    }

    #[test]
    fn probabilities_match_brute_force() {
        for seed in 0..5 {
            let emb = random_batch(seed, 2, 2, 4, 5);
            let p = batch_probabilities(&emb, 0.08).unwrap();
            let o = brute_probabilities(&emb, 0.08);
            for (a, b) in p.iter().zip(&o) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        let emb = random_batch(9, 3, 2, 3, 4);
        let p = batch_probabilities(&emb, 0.5).unwrap();
        let o = brute_probabilities(&emb, 0.5);
        for (a, b) in p.iter().zip(&o) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_survive_tiny_temperatures() {
        let emb = random_batch(3, 2, 2, 4, 5);
        let p = batch_probabilities(&emb, 1e-4).unwrap();
        assert!(p.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn softmax_shift_invariance_and_reconstruction() {
        // Numerator plus cross terms reconstruct the denominator, and a common
        // shift of the similarities at a pivot leaves p unchanged.
        let emb = random_batch(4, 2, 3, 2, 4);
        let tau = 0.08;
        let min_d = min_distances(&emb.vectors, &emb, Exec::Sequential);
        let roles = roles(2, 3, 2, false);
        let s = emb.sequences();
        for (d, r) in min_d.chunks_exact(s).zip(roles.chunks_exact(s)) {
            let sims: Vec<f64> = d.iter().map(|v| -v / tau).collect();
            let sum_of = |want: &dyn Fn(Role) -> bool, shift: f64| -> f64 {
                sims.iter().zip(r).filter(|(_, &x)| want(x)).map(|(v, _)| (v + shift).exp()).sum()
            };
            let num = sum_of(&|x| x == Role::Positive, 0.0);
            let cross = sum_of(&|x| x == Role::Negative, 0.0);
            let den = sum_of(&|x| x != Role::Excluded, 0.0);
            assert!(((num + cross) - den).abs() <= 1e-12 * den.max(1.0));
            let p0 = num / den;
            let p1 = sum_of(&|x| x == Role::Positive, 3.7) / sum_of(&|x| x != Role::Excluded, 3.7);
            assert!((p0 - p1).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_errors() {
        let emb = random_batch(1, 1, 2, 2, 3);
        assert!(matches!(batch_probabilities(&emb, 0.08), Err(LossError::Config(_))));
        assert!(matches!(identification_accuracy(&emb, 0.08), Err(LossError::Config(_))));
    }

    #[test]
    fn rec_loss_cases() {
        let e = (-1.0f64).exp();
        assert!((rec_loss(&[e; 5]).unwrap() - 5.0).abs() < 1e-12);
        assert!(rec_loss(&[1.0 - 1e-15; 3]).unwrap() < 1e-14);
        assert!(matches!(rec_loss(&[0.5, 1.0]), Err(LossError::Domain(_))));
        assert!(matches!(rec_loss(&[0.0]), Err(LossError::Domain(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..50).map(|_| rng.gen_range(0.01..0.99)).collect();
        let mut oracle = 0.0;
        for v in &p {
            oracle -= v.ln();
        }
        assert!((rec_loss(&p).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn adv_and_inv_cases() {
        let l2 = 2f64.ln();
        assert!((adv_loss(&[0.5; 4]).unwrap() - 4.0 * l2).abs() < 1e-12);
        assert!((inv_loss(&[0.5; 4]).unwrap() - 4.0 * l2).abs() < 1e-12);
        assert!(adv_loss(&[0.3]).unwrap() > adv_loss(&[0.6]).unwrap());
        assert!(inv_loss(&[0.3]).unwrap() < inv_loss(&[0.6]).unwrap());
        assert!(inv_loss(&[1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<f64> = (0..40).map(|_| rng.gen_range(0.01..0.99)).collect();
        let (mut a, mut i) = (0.0, 0.0);
        for v in &p {
            a += -v.ln();
            i += -(1.0 - v).ln();
        }
        assert!((adv_loss(&p).unwrap() - a).abs() < 1e-12);
        assert!((inv_loss(&p).unwrap() - i).abs() < 1e-12);
    }

    #[test]
    fn totals() {
        assert_eq!(total_generator_loss(2.0, 3.0, 0.0), 2.0);
        assert_eq!(total_tid_loss(2.0, 3.0, 0.0), 2.0);
        assert_eq!(total_generator_loss(2.0, 3.0, 1.0), 5.0);
        assert!((total_tid_loss(2.0, 3.0, 0.001) - 2.003).abs() < 1e-15);
        let (a, b) = (1.3, 0.7);
        assert!((total_tid_loss(2.0 * a, 2.0 * b, 0.001) - 2.0 * total_tid_loss(a, b, 0.001)).abs() < 1e-12);
        assert!((total_generator_loss(2.0 * a, 2.0 * b, 1.0) - 2.0 * total_generator_loss(a, b, 1.0)).abs() < 1e-12);
    }

    /// Exhaustive oracle: compare every same-identity similarity with every
    /// cross-identity one.
    fn brute_accuracy(emb: &BatchEmbeddings, tau: f64) -> f64 {
        let mut hits = 0;
        let mut total = 0;
        for c in 0..emb.n {
            for i in 0..emb.m {
                for t in 0..emb.t {
                    let p = emb.row(c, i, t);
                    let sim = |k: usize, j: usize| {
                        -(0..emb.t).map(|u| sq_dist(p, emb.row(k, j, u))).fold(f64::INFINITY, f64::min) / tau
                    };
                    let mut ok = false;
                    for j in (0..emb.m).filter(|&j| j != i) {
                        let s = sim(c, j);
                        let beats_all = (0..emb.n)
                            .filter(|&k| k != c)
                            .all(|k| (0..emb.m).all(|jj| s > sim(k, jj)));
                        ok |= beats_all;
                    }
                    hits += ok as usize;
                    total += 1;
                }
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn accuracy_cases() {
        let mut v = Vec::new();
        for c in 0..3 {
            for _ in 0..2 {
                for _ in 0..2 {
                    let mut r = [0.0; 3];
                    r[c] = 1.0;
                    v.extend(r);
                }
            }
        }
        let emb = BatchEmbeddings::new(3, 2, 2, 3, v).unwrap();
        assert_eq!(identification_accuracy(&emb, 0.08).unwrap(), 1.0);
        let same = BatchEmbeddings::new(2, 2, 3, 2, [0.6, 0.8].repeat(12)).unwrap();
        assert_eq!(identification_accuracy(&same, 0.08).unwrap(), 0.0);
        for seed in 0..6 {
            let emb = random_batch(seed, 3, 2, 3, 3);
            assert_eq!(identification_accuracy(&emb, 0.08).unwrap(), brute_accuracy(&emb, 0.08));
        }
    }

    fn small_gen(seed: u64) -> Generator {
        let mut g = Generator::init(GenConfig::default().with_hidden(8, 2), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["exit.weight", "exit.bias"] {
            for v in g.params.get_mut(name).unwrap().values_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
        g
    }

    fn random_seq(seed: u64, t: usize) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| {
                let mut f = [0.0; FEATURE_DIM];
                f.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
                FeatureFrame(f)
            })
            .collect();
        FeatureSequence::new(frames, 25.0, "v")
    }

    #[test]
    fn cycle_loss_cases() {
        let fresh = Generator::init(GenConfig::default().with_hidden(8, 2), 1).unwrap();
        let x = random_seq(2, 6);
        let (a, b) = (random_seq(3, 1).frames[0], random_seq(4, 1).frames[0]);
        assert_eq!(cycle_loss(&fresh, &x, &a, &b).unwrap(), 0.0);
        // Exit layer reads nothing but its bias: the forward trip adds the
        // bias v, the return trip adds it again, so the loss is T·‖2v‖².
        let mut shift = fresh.clone();
        shift.params.get_mut("exit.weight").unwrap().values_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(-0.5..0.5)).collect();
        shift.params.get_mut("exit.bias").unwrap().values_mut().copy_from_slice(&v);
        let expect = 6.0 * v.iter().map(|x| (2.0 * x) * (2.0 * x)).sum::<f64>();
        assert!((cycle_loss(&shift, &x, &a, &b).unwrap() - expect).abs() < 1e-10);
        assert!(cycle_loss(&small_gen(5), &x, &a, &b).unwrap() > 0.0);
    }

    #[test]
    fn expression_sources_avoid_target() {
        for n in 2..6 {
            for c in 0..n {
                for i in 0..8 {
                    let (k, j) = expression_source(c, i, n);
                    assert_ne!(k, c);
                    assert!(k < n);
                    assert_eq!(j, i);
                }
            }
        }
    }

    fn tiny_tid() -> TemporalIdNet {
        use crate::tid::{BlockSpec, TidConfig};
        let cfg = TidConfig {
            in_channels: FEATURE_DIM,
            hidden_channels: 8,
            out_channels: 6,
            blocks: vec![BlockSpec { kernel: 3, dilation: 1 }, BlockSpec { kernel: 3, dilation: 2 }],
            groupnorm_groups: 2,
            leaky_slope: 0.2,
            norm_span: Default::default(),
        };
        TemporalIdNet::init(cfg, 3).unwrap()
    }

    #[test]
    fn adv_probabilities_reduce_to_real_with_identity_generator() {
        // Generated video (c, i) driven by video i of identity c itself: with
        // an identity generator the pivots are the real frames, and p* uses
        // the same table as p but keeps the pivot's own video.
        let tid = tiny_tid();
        let seqs: Vec<FeatureSequence> = (0..4).map(|s| random_seq(20 + s, 5)).collect();
        let emb = tid.embed_all(&seqs, Exec::Sequential).unwrap();
        let real = BatchEmbeddings::from_sequences(2, 2, &emb).unwrap();
        let p_star = adv_probabilities(&tid, &seqs, &real, 0.08).unwrap();
        // brute force with the own video included in the numerator
        let tau = 0.08;
        let mut k = 0;
        for c in 0..2 {
            for i in 0..2 {
                for t in 0..5 {
                    let p = real.row(c, i, t);
                    let sim = |kk: usize, j: usize| {
                        (-(0..5).map(|u| sq_dist(p, real.row(kk, j, u))).fold(f64::INFINITY, f64::min) / tau).exp()
                    };
                    let num: f64 = (0..2).map(|j| sim(c, j)).sum();
                    let den: f64 = num + (0..2).map(|j| sim(1 - c, j)).sum::<f64>();
                    assert!((p_star[k] - num / den).abs() < 1e-12);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn adv_probabilities_dominance() {
        // Generated pivots sit exactly on real frames of their target
        // identity while the other identity is at the antipode: p* → 1.
        let mut rows = Vec::new();
        for c in 0..2 {
            for _ in 0..2 * 3 {
                rows.extend(if c == 0 { [1.0, 0.0, 0.0] } else { [-1.0, 0.0, 0.0] });
            }
        }
        let mut g = Graph::new();
        let gen = g.constant(vec![4, 3, 3], rows.clone()).unwrap();
        let real = g.constant(vec![4, 3, 3], rows).unwrap();
        let (adv, inv) = adversarial_losses_graph(&mut g, gen, real, 2, 2, 3, 0.08).unwrap();
        assert!(g.scalar(adv) < 1e-12, "adv {}", g.scalar(adv));
        assert!(g.scalar(inv) > 12.0 * 40.0);
    }

    #[test]
    fn graph_losses_match_plain_evaluators() {
        let emb = random_batch(30, 3, 2, 4, 5);
        let tau = 0.08;
        let mut g = Graph::new();
        let e = g.constant(vec![6, 4, 5], emb.vectors.clone()).unwrap();
        let l = rec_loss_graph(&mut g, e, 3, 2, 4, tau).unwrap();
        let plain = rec_loss(&batch_probabilities(&emb, tau).unwrap()).unwrap();
        assert!((g.scalar(l) - plain).abs() < 1e-9 * plain.max(1.0));

        let gen = random_batch(31, 3, 2, 4, 5);
        let gv = g.constant(vec![6, 4, 5], gen.vectors.clone()).unwrap();
        let (adv, inv) = adversarial_losses_graph(&mut g, gv, e, 3, 2, 4, tau).unwrap();
        // plain p* computed directly from the gen/real tables
        let min_d = min_distances(&gen.vectors, &emb, Exec::Sequential);
        let p_star = probabilities_from(&min_d, &roles(3, 2, 4, true), 6, tau);
        assert!((g.scalar(adv) - adv_loss(&p_star).unwrap()).abs() < 1e-9);
        assert!((g.scalar(inv) - inv_loss(&p_star).unwrap()).abs() < 1e-9);
    }

    fn check(name: &str, err: f64) {
        assert!(err < 1e-4, "{name}: relative error {err}");
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let (n, m, t, d, tau) = (2, 2, 8, 4, 0.08);
        let x = Tensor::new(vec![n * m, t, d], unit_rows(50, n * m * t, d)).unwrap();
        check(
            "rec",
            grad_check(|g, x| Ok(rec_loss_graph(g, x, n, m, t, tau).map_err(into_ad)?), &x, 1e-5).unwrap(),
        );
        // At τ = 0.08 some pivots sit so deep in the softmax tail that their
        // gradients (~1e-7) are below finite-difference resolution; a wider
        // temperature keeps every coordinate measurable.
        let tau = 0.3;
        let real = unit_rows(51, n * m * t, d);
        for which in 0..2 {
            let real = real.clone();
            check(
                "adv/inv",
                grad_check(
                    |g, x| {
                        let r = g.constant(vec![n * m, t, d], real.clone())?;
                        let (adv, inv) = adversarial_losses_graph(g, x, r, n, m, t, tau).map_err(into_ad)?;
                        Ok(if which == 0 { adv } else { inv })
                    },
                    &x,
                    1e-5,
                )
                .unwrap(),
            );
        }
    }

    #[test]
    fn cycle_graph_matches_plain_and_differentiates() {
        let gen = small_gen(11);
        let x = random_seq(12, 5);
        let (a, b) = (random_seq(13, 1).frames[0], random_seq(14, 1).frames[0]);
        let plain = cycle_loss(&gen, &x, &a, &b).unwrap();
        let mut g = Graph::new();
        let vars = g.params(&gen.params, false);
        let xv = g.constant(vec![1, 5, FEATURE_DIM], x.to_matrix()).unwrap();
        let av = g.constant(vec![1, 5, FEATURE_DIM], broadcast_means(&[a], 5)).unwrap();
        let bv = g.constant(vec![1, 5, FEATURE_DIM], broadcast_means(&[b], 5)).unwrap();
        let l = cycle_loss_graph(&mut g, &gen.config, &vars, xv, av, bv).unwrap();
        assert!((g.scalar(l) - plain).abs() < 1e-9 * plain.max(1.0));

        let input = Tensor::new(vec![1, 5, FEATURE_DIM], x.to_matrix()).unwrap();
        let err = grad_check(
            |g, xv| {
                let vars = g.params(&gen.params, false);
                let av = g.constant(vec![1, 5, FEATURE_DIM], broadcast_means(&[a], 5))?;
                let bv = g.constant(vec![1, 5, FEATURE_DIM], broadcast_means(&[b], 5))?;
                cycle_loss_graph(g, &gen.config, &vars, xv, av, bv).map_err(into_ad)
            },
            &input,
            1e-5,
        )
        .unwrap();
        check("cycle", err);
    }

    pub(crate) fn into_ad(e: LossError) -> AutodiffError {
        match e {
            LossError::Autodiff(a) => a,
            other => AutodiffError::Config(other.to_string()),
        }
    }
}
