//! Temporal embedding network.
//!
//! Entry 1×1 convolution to the hidden width, a stack of pre-activation
//! residual blocks (GN → LeakyReLU → dilated conv(K, D) → GN → LeakyReLU →
//! conv(1, 1), plus identity skip), a final GN → LeakyReLU, and an exit 1×1
//! convolution to the embedding width. Output rows are L2-normalized.
//! Only the dilated convolutions widen the receptive field, by `(K−1)·D`
//! frames each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NormSpan, ParamSet, ParamVars, Result, Tensor, Var};
use crate::feature::{FeatureSequence, FEATURE_DIM};
use crate::par::Exec;

pub const EMBEDDING_DIM: usize = 128;
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub groupnorm_groups: usize,
    pub leaky_slope: f64,
    #[serde(default)]
    pub norm_span: NormSpan,
}

/// `(K, D)` per residual block; Σ(K−1)·D = 50.
pub const DEFAULT_SCHEDULE: [(usize, usize); 9] =
    [(3, 1), (3, 1), (3, 2), (3, 2), (3, 4), (3, 4), (3, 8), (3, 2), (3, 1)];

pub fn default_config() -> TidConfig {
    TidConfig {
        in_channels: FEATURE_DIM,
        hidden_channels: 512,
        out_channels: EMBEDDING_DIM,
        blocks: DEFAULT_SCHEDULE
            .iter()
            .map(|&(kernel, dilation)| BlockSpec { kernel, dilation })
            .collect(),
        groupnorm_groups: 32,
        leaky_slope: 0.2,
        norm_span: NormSpan::Frame,
    }
}

/// Input span, in frames, that can influence one output frame.
pub fn receptive_field(config: &TidConfig) -> usize {
    1 + config
        .blocks
        .iter()
        .map(|b| (b.kernel - 1) * b.dilation)
        .sum::<usize>()
}

impl TidConfig {
    /// Same architecture with a different hidden width.
    pub fn with_hidden(mut self, hidden: usize, groups: usize) -> Self {
        self.hidden_channels = hidden;
        self.groupnorm_groups = groups;
        self
    }

    /// Entry layer, residual blocks and exit layer.
    pub fn layer_count(&self) -> usize {
        self.blocks.len() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AutodiffError::Config(m));
        if self.in_channels == 0 || self.hidden_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.groupnorm_groups == 0 || self.hidden_channels % self.groupnorm_groups != 0 {
            return fail(format!(
                "{} hidden channels not divisible into {} groups",
                self.hidden_channels, self.groupnorm_groups
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel % 2 == 0 || b.dilation == 0 {
                return fail(format!("block {i}: kernel must be odd and dilation positive"));
            }
        }
        if !(self.leaky_slope.is_finite()) {
            return fail("leaky slope must be finite".into());
        }
        Ok(())
    }

    /// Expected parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden_channels;
        let mut out = vec![
            ("entry.weight".into(), vec![1, self.in_channels, h]),
            ("entry.bias".into(), vec![h]),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = block_prefix(i);
            out.push((format!("{p}.norm1.gamma"), vec![h]));
            out.push((format!("{p}.norm1.beta"), vec![h]));
            out.push((format!("{p}.conv1.weight"), vec![b.kernel, h, h]));
            out.push((format!("{p}.conv1.bias"), vec![h]));
            out.push((format!("{p}.norm2.gamma"), vec![h]));
            out.push((format!("{p}.norm2.beta"), vec![h]));
            out.push((format!("{p}.conv2.weight"), vec![1, h, h]));
            out.push((format!("{p}.conv2.bias"), vec![h]));
        }
        out.push(("exit.norm.gamma".into(), vec![h]));
        out.push(("exit.norm.beta".into(), vec![h]));
        out.push(("exit.weight".into(), vec![1, h, self.out_channels]));
        out.push(("exit.bias".into(), vec![self.out_channels]));
        out
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(AutodiffError::Shape(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, dims) in shapes {
            let t = params.require(&name)?;
            if t.dims() != dims.as_slice() {
                return Err(AutodiffError::Shape(format!(
                    "`{name}` has shape {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        Ok(())
    }
}

fn block_prefix(i: usize) -> String {
    format!("block{i:02}")
}

/// He-style initialization shared by both networks: convolution weights are
/// normal with variance `2 / (K·C_in)`, biases and shifts zero, scales one.
pub(crate) fn init_params(shapes: &[(String, Vec<usize>)], seed: u64, zero_prefix: Option<&str>) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<_> = shapes.to_vec();
    sorted.sort();
    let mut params = ParamSet::new();
    for (name, dims) in sorted {
        let mut t = Tensor::zeros(dims.clone());
        let zeroed = zero_prefix.is_some_and(|p| name.starts_with(p));
        if name.ends_with(".gamma") {
            t.values_mut().fill(1.0);
        } else if name.ends_with("weight") && !zeroed {
            let fan_in = (dims[0] * dims[1]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for v in t.values_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        params.insert(name, t);
    }
    params
}

pub fn init(config: &TidConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    Ok(init_params(&config.param_shapes(), seed, None))
}

/// Pre-activation residual block shared with the generator.
#[allow(clippy::too_many_arguments)]
pub(crate) fn residual_block(
    g: &mut Graph,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    dilation: usize,
    groups: usize,
    span: NormSpan,
    slope: f64,
) -> Result<Var> {
    let p = |n: &str| vars[&format!("{prefix}.{n}")];
    let y = g.group_norm(x, p("norm1.gamma"), p("norm1.beta"), groups, span, GROUP_NORM_EPS)?;
    let y = g.leaky_relu(y, slope);
    let y = g.conv1d(y, p("conv1.weight"), p("conv1.bias"), dilation)?;
    let y = g.group_norm(y, p("norm2.gamma"), p("norm2.beta"), groups, span, GROUP_NORM_EPS)?;
    let y = g.leaky_relu(y, slope);
    let y = g.conv1d(y, p("conv2.weight"), p("conv2.bias"), 1)?;
    g.add(x, y)
}

/// Records the network on `g`. `x` is `B×T×C_in` (or `T×C_in`); the result
/// has the same leading shape with unit-norm rows of `out_channels`.
pub fn forward(config: &TidConfig, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
    let (groups, span, slope) = (config.groupnorm_groups, config.norm_span, config.leaky_slope);
    let mut h = g.conv1d(x, vars["entry.weight"], vars["entry.bias"], 1)?;
    for (i, b) in config.blocks.iter().enumerate() {
        h = residual_block(g, vars, &block_prefix(i), h, b.dilation, groups, span, slope)?;
    }
    let h = g.group_norm(
        h,
        vars["exit.norm.gamma"],
        vars["exit.norm.beta"],
        groups,
        span,
        GROUP_NORM_EPS,
    )?;
    let h = g.leaky_relu(h, slope);
    let y = g.conv1d(h, vars["exit.weight"], vars["exit.bias"], 1)?;
    Ok(g.l2_normalize_rows(y))
}

/// Per-frame unit vectors for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    /// `len × dim`, row-major.
    pub vectors: Vec<f64>,
    pub dim: usize,
    pub video_id: String,
    pub identity_id: Option<String>,
}

impl EmbeddingSequence {
    pub fn new(vectors: Vec<f64>, dim: usize, video_id: impl Into<String>) -> Self {
        assert!(dim > 0 && vectors.len() % dim == 0);
        EmbeddingSequence {
            vectors,
            dim,
            video_id: video_id.into(),
            identity_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.vectors[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }
}

/// Configuration plus weights of a temporal embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalIdNet {
    pub config: TidConfig,
    pub params: ParamSet,
}

impl TemporalIdNet {
    pub fn new(config: TidConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(TemporalIdNet { config, params })
    }

    pub fn init(config: TidConfig, seed: u64) -> Result<Self> {
        let params = init(&config, seed)?;
        Ok(TemporalIdNet { config, params })
    }

    /// Embeds a `T × in_channels` row-major matrix.
    pub fn embed_matrix(&self, frames: &[f64]) -> Result<Vec<f64>> {
        let c = self.config.in_channels;
        if frames.is_empty() || frames.len() % c != 0 {
            return Err(AutodiffError::Shape(format!(
                "{} values do not form frames of {c} channels",
                frames.len()
            )));
        }
        let mut g = Graph::with_exec(Exec::Sequential);
        let vars = g.params(&self.params, false);
        let x = g.constant(vec![frames.len() / c, c], frames.to_vec())?;
        let y = forward(&self.config, &mut g, &vars, x)?;
        Ok(g.value(y).to_vec())
    }

    pub fn embed(&self, seq: &FeatureSequence) -> Result<EmbeddingSequence> {
        if seq.is_empty() {
            return Err(AutodiffError::Shape("empty sequence".into()));
        }
        let vectors = self.embed_matrix(&seq.to_matrix())?;
        Ok(EmbeddingSequence {
            vectors,
            dim: self.config.out_channels,
            video_id: seq.video_id.clone(),
            identity_id: seq.identity_id.clone(),
        })
    }

    /// Embeds each sequence independently, in parallel when `exec` allows.
    pub fn embed_all(&self, seqs: &[FeatureSequence], exec: Exec) -> Result<Vec<EmbeddingSequence>> {
        exec.map(seqs.len(), |i| self.embed(&seqs[i]))
            .into_iter()
            .collect()
    }
}
