//! Frame-local feature generator.
//!
//! Takes an expression-source frame `x_k(t)` and an identity mean `x̄_c`,
//! concatenates them (source first) into one 124-channel vector, runs an
//! entry layer, three residual blocks and an exit layer, all with temporal
//! kernel size one, and adds the result back onto `x_k(t)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NormSpan, ParamSet, ParamVars, Result, Var};
use crate::feature::{FeatureFrame, FeatureSequence, FEATURE_DIM};
use crate::par::Exec;
use crate::tid::{init_params, residual_block, GROUP_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub residual_blocks: usize,
    pub groupnorm_groups: usize,
    pub leaky_slope: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            in_channels: 2 * FEATURE_DIM,
            hidden_channels: 512,
            out_channels: FEATURE_DIM,
            residual_blocks: 3,
            groupnorm_groups: 32,
            leaky_slope: 0.2,
        }
    }
}

impl GenConfig {
    pub fn with_hidden(mut self, hidden: usize, groups: usize) -> Self {
        self.hidden_channels = hidden;
        self.groupnorm_groups = groups;
        self
    }

    pub fn layer_count(&self) -> usize {
        self.residual_blocks + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 2 * self.out_channels {
            return Err(AutodiffError::Config(format!(
                "input width {} must be twice the output width {}",
                self.in_channels, self.out_channels
            )));
        }
        if self.groupnorm_groups == 0 || self.hidden_channels % self.groupnorm_groups != 0 {
            return Err(AutodiffError::Config(format!(
                "{} hidden channels not divisible into {} groups",
                self.hidden_channels, self.groupnorm_groups
            )));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden_channels;
        let mut out = vec![
            ("entry.weight".into(), vec![1, self.in_channels, h]),
            ("entry.bias".into(), vec![h]),
        ];
        for i in 0..self.residual_blocks {
            let p = format!("block{i:02}");
            for (n, d) in [
                ("norm1.gamma", vec![h]),
                ("norm1.beta", vec![h]),
                ("conv1.weight", vec![1, h, h]),
                ("conv1.bias", vec![h]),
                ("norm2.gamma", vec![h]),
                ("norm2.beta", vec![h]),
                ("conv2.weight", vec![1, h, h]),
                ("conv2.bias", vec![h]),
            ] {
                out.push((format!("{p}.{n}"), d));
            }
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
            if params.require(&name)?.dims() != dims.as_slice() {
                return Err(AutodiffError::Shape(format!("`{name}` should be {dims:?}")));
            }
        }
        Ok(())
    }
}

/// He-initialized hidden layers; the exit layer starts at zero so a fresh
/// generator returns its expression source unchanged.
pub fn init(config: &GenConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    Ok(init_params(&config.param_shapes(), seed, Some("exit.")))
}

/// Records the generator on `g`. `source` and `mean` are `B×T×62` (or
/// `T×62`); normalization is per frame so each output frame depends only on
/// the same input frame.
pub fn forward(config: &GenConfig, g: &mut Graph, vars: &ParamVars, source: Var, mean: Var) -> Result<Var> {
    let slope = config.leaky_slope;
    let groups = config.groupnorm_groups;
    let x = g.concat_last(source, mean)?;
    let mut h = g.conv1d(x, vars["entry.weight"], vars["entry.bias"], 1)?;
    for i in 0..config.residual_blocks {
        h = residual_block(g, vars, &format!("block{i:02}"), h, 1, groups, NormSpan::Frame, slope)?;
    }
    let h = g.group_norm(
        h,
        vars["exit.norm.gamma"],
        vars["exit.norm.beta"],
        groups,
        NormSpan::Frame,
        GROUP_NORM_EPS,
    )?;
    let h = g.leaky_relu(h, slope);
    let delta = g.conv1d(h, vars["exit.weight"], vars["exit.bias"], 1)?;
    g.add(source, delta)
}

/// `T × 62` matrix with `frame` repeated on every row.
pub fn broadcast_frame(frame: &FeatureFrame, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * FEATURE_DIM);
    for _ in 0..t {
        out.extend_from_slice(&frame.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GenConfig,
    pub params: ParamSet,
}

impl Generator {
    pub fn new(config: GenConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Generator { config, params })
    }

    pub fn init(config: GenConfig, seed: u64) -> Result<Self> {
        let params = init(&config, seed)?;
        Ok(Generator { config, params })
    }

    /// Applies the generator to a `T × 62` source matrix.
    pub fn generate_matrix(&self, source: &[f64], mean: &FeatureFrame) -> Result<Vec<f64>> {
        if source.is_empty() || source.len() % FEATURE_DIM != 0 {
            return Err(AutodiffError::Shape(format!(
                "{} values do not form 62-channel frames",
                source.len()
            )));
        }
        let t = source.len() / FEATURE_DIM;
        let mut g = Graph::with_exec(Exec::Sequential);
        let vars = g.params(&self.params, false);
        let s = g.constant(vec![t, FEATURE_DIM], source.to_vec())?;
        let m = g.constant(vec![t, FEATURE_DIM], broadcast_frame(mean, t))?;
        let y = forward(&self.config, &mut g, &vars, s, m)?;
        Ok(g.value(y).to_vec())
    }

    /// Features with the appearance of `identity_mean` and the expressions of
    /// `expr_source`. Labels are copied from the source.
    pub fn generate(&self, expr_source: &FeatureSequence, identity_mean: &FeatureFrame) -> Result<FeatureSequence> {
        if expr_source.is_empty() {
            return Err(AutodiffError::Shape("empty expression source".into()));
        }
        let out = self.generate_matrix(&expr_source.to_matrix(), identity_mean)?;
        let frames = out
            .chunks_exact(FEATURE_DIM)
            .map(|c| FeatureFrame(c.try_into().unwrap()))
            .collect();
        Ok(FeatureSequence {
            frames,
            ..expr_source.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{adam_step, AdamState, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> GenConfig {
        GenConfig::default().with_hidden(16, 4)
    }

    fn random_matrix(seed: u64, t: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t * FEATURE_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    fn random_frame(seed: u64) -> FeatureFrame {
        FeatureFrame(random_matrix(seed, 1).try_into().unwrap())
    }

    /// A generator whose exit layer is nonzero.
    fn trained_like(seed: u64) -> Generator {
        let mut g = Generator::init(small(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for name in ["exit.weight", "exit.bias"] {
            for v in g.params.get_mut(name).unwrap().values_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        g
    }

    #[test]
    fn layout() {
        let c = GenConfig::default();
        assert_eq!(c.in_channels, 124);
        assert_eq!(c.layer_count(), 5);
        let p = init(&c, 0).unwrap();
        assert_eq!(p.get("entry.weight").unwrap().dims(), &[1, 124, 512]);
        assert!(c.param_shapes().iter().all(|(n, d)| !n.contains("weight") || d[0] == 1));
    }

    #[test]
    fn fresh_generator_is_identity() {
        let g = Generator::init(small(), 3).unwrap();
        let x = random_matrix(1, 10);
        assert_eq!(g.generate_matrix(&x, &random_frame(2)).unwrap(), x);
        assert_eq!(init(&small(), 3).unwrap(), init(&small(), 3).unwrap());
    }

    #[test]
    fn zero_exit_layer_gives_identity_for_trained_hidden_layers() {
        let mut g = trained_like(4);
        for name in ["exit.weight", "exit.bias"] {
            g.params.get_mut(name).unwrap().values_mut().fill(0.0);
        }
        let x = random_matrix(5, 6);
        assert_eq!(g.generate_matrix(&x, &random_frame(6)).unwrap(), x);
    }

    #[test]
    fn source_is_concatenated_first() {
        // Zero the entry columns fed by the mean; the output must then ignore it.
        let mut g = trained_like(7);
        let h = g.config.hidden_channels;
        let w = g.params.get_mut("entry.weight").unwrap().values_mut();
        for c in FEATURE_DIM..2 * FEATURE_DIM {
            w[c * h..(c + 1) * h].fill(0.0);
        }
        let x = random_matrix(8, 4);
        let a = g.generate_matrix(&x, &random_frame(9)).unwrap();
        let b = g.generate_matrix(&x, &random_frame(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn frame_locality_and_permutation_equivariance() {
        let g = trained_like(11);
        let mean = random_frame(12);
        let x = random_matrix(13, 9);
        let base = g.generate_matrix(&x, &mean).unwrap();
        let mut moved = x.clone();
        moved[4 * FEATURE_DIM + 7] += 0.5;
        let out = g.generate_matrix(&moved, &mean).unwrap();
        for t in 0..9 {
            let same = base[t * 62..(t + 1) * 62] == out[t * 62..(t + 1) * 62];
            assert_eq!(same, t != 4, "frame {t}");
        }
        let perm = [3, 0, 8, 1, 7, 2, 6, 4, 5];
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| x[p * 62..(p + 1) * 62].to_vec()).collect();
        let out = g.generate_matrix(&permuted, &mean).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(out[i * 62..(i + 1) * 62], base[p * 62..(p + 1) * 62]);
        }
    }

    #[test]
    fn one_adam_step_on_cycle_loss_changes_output() {
        let cfg = small();
        let mut gen = Generator::init(cfg.clone(), 14).unwrap();
        let x = random_matrix(15, 5);
        let (mc, mi) = (random_frame(16), random_frame(17));
        // Target: move features toward a shifted copy, which a fresh
        // generator cannot produce, so the gradient is nonzero.
        let mut g = Graph::new();
        let vars = g.params(&gen.params, true);
        let src = g.constant(vec![5, 62], x.clone()).unwrap();
        let m1 = g.constant(vec![5, 62], broadcast_frame(&mc, 5)).unwrap();
        let m2 = g.constant(vec![5, 62], broadcast_frame(&mi, 5)).unwrap();
        let fake = forward(&cfg, &mut g, &vars, src, m1).unwrap();
        let back = forward(&cfg, &mut g, &vars, fake, m2).unwrap();
        let target = g
            .constant(vec![5, 62], x.iter().map(|v| v + 0.1).collect())
            .unwrap();
        let diff = g.sub(target, back).unwrap();
        let loss = g.sum_sq(diff);
        g.backward(loss).unwrap();
        g.write_grads(&vars, &mut gen.params).unwrap();
        let gnorm: f64 = gen.params.iter().flat_map(|(_, t)| t.grad().unwrap().to_vec()).map(|v| v * v).sum();
        assert!(gnorm > 0.0);
        let mut state = AdamState::default();
        adam_step(&mut gen.params, &mut state, 1e-3).unwrap();
        assert_ne!(gen.generate_matrix(&x, &mc).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let g = Generator::init(small(), 0).unwrap();
        assert!(g.generate_matrix(&[0.0; 61], &FeatureFrame::zeros()).is_err());
        let mut p = g.params.clone();
        p.insert("exit.bias", Tensor::zeros(vec![2]));
        assert!(Generator::new(small(), p).is_err());
    }
}
