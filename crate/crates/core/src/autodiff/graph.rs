//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded on a [`Graph`] in evaluation order and
//! differentiated by walking the tape backwards. Values are computed
//! eagerly, so a graph built only from constants doubles as the inference
//! path.

use std::collections::BTreeMap;

use super::{AutodiffError, ParamSet, Result, Tensor};
use crate::par::Exec;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Parameter handles by name, as registered with [`Graph::params`].
pub type ParamVars = BTreeMap<String, Var>;

/// Which elements share one set of normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSpan {
    /// A channel group over all time steps of one sequence.
    Sequence,
    /// A channel group at a single time step.
    #[default]
    Frame,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        span: NormSpan,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Elementwise {
        input: Var,
        derivative: fn(f64) -> f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    ConcatLast {
        a: Var,
        b: Var,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    SegmentMinSqDist {
        pivots: Var,
        others: Var,
        argmin: Vec<usize>,
    },
    MaskedLogSumExp {
        input: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a differentiable computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn last_dim(dims: &[usize]) -> usize {
    *dims.last().unwrap_or(&1)
}

/// `(batch, time, channels)` view of a rank-2 or rank-3 activation.
fn btc(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [t, c] => Ok((1, t, c)),
        [b, t, c] => Ok((b, t, c)),
        _ => Err(AutodiffError::Shape(format!(
            "expected a T×C or B×T×C tensor, got {dims:?}"
        ))),
    }
}

/// `c += a · b` for row-major operands described by strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the debug assertions above spell out the extents touched; all
    // callers derive strides from the same dims used to size the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Rows `[t0, t1)` of the output that tap input row `t + offset`.
fn tap_range(t_len: usize, offset: isize) -> (usize, usize) {
    let t = t_len as isize;
    let t0 = (-offset).max(0).min(t);
    let t1 = (t - offset).min(t).max(t0);
    (t0 as usize, t1 as usize)
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default_for_build())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: None,
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            dims,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims.clone(), n.value.clone()).expect("node dims are consistent")
    }

    /// Adds a leaf carrying the tensor's values; differentiable iff the
    /// tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.dims().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, dims: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(dims, values)?;
        Ok(self.leaf(&t))
    }

    pub fn variable(&mut self, dims: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(dims, values)?.with_requires_grad(true);
        Ok(self.leaf(&t))
    }

    /// Registers every tensor of `params` as a leaf. With `trainable` false
    /// the parameters act as constants: gradients still flow through them to
    /// other inputs, but none accumulate on the parameters themselves.
    pub fn params(&mut self, params: &ParamSet, trainable: bool) -> ParamVars {
        params
            .iter()
            .map(|(name, t)| {
                let v = self.push(t.dims().to_vec(), t.values().to_vec(), Op::Leaf, trainable);
                (name.clone(), v)
            })
            .collect()
    }

    // ---------------------------------------------------------------- ops

    /// Same-length, temporally centered dilated convolution.
    ///
    /// `input` is `T×C_in` or `B×T×C_in`, `kernel` is `K×C_in×C_out` with odd
    /// `K`, `bias` has `C_out` entries. Taps falling outside the sequence read
    /// zero.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let in_dims = self.dims(input).to_vec();
        let (b, t, cin) = btc(&in_dims)?;
        let kd = self.dims(kernel).to_vec();
        if kd.len() != 3 || kd[1] != cin {
            return Err(AutodiffError::Shape(format!(
                "kernel {kd:?} does not match input channels {cin}"
            )));
        }
        let (k, cout) = (kd[0], kd[2]);
        if k % 2 == 0 {
            return Err(AutodiffError::Config(format!("kernel size {k} is even")));
        }
        if dilation == 0 {
            return Err(AutodiffError::Config("dilation must be positive".into()));
        }
        if self.dims(bias) != [cout] {
            return Err(AutodiffError::Shape(format!(
                "bias {:?} does not match {cout} output channels",
                self.dims(bias)
            )));
        }
        let mut out = vec![0.0; b * t * cout];
        {
            let x = &self.nodes[input.0].value;
            let w = &self.nodes[kernel.0].value;
            let bv = &self.nodes[bias.0].value;
            let half = (k / 2) as isize;
            self.exec.for_each_chunk(&mut out, t * cout, |bi, ob| {
                for row in ob.chunks_exact_mut(cout) {
                    row.copy_from_slice(bv);
                }
                let xb = &x[bi * t * cin..(bi + 1) * t * cin];
                for kk in 0..k {
                    let off = (kk as isize - half) * dilation as isize;
                    let (t0, t1) = tap_range(t, off);
                    if t1 == t0 {
                        continue;
                    }
                    let src = (t0 as isize + off) as usize;
                    gemm_acc(
                        t1 - t0,
                        cin,
                        cout,
                        &xb[src * cin..],
                        cin,
                        1,
                        &w[kk * cin * cout..],
                        cout,
                        1,
                        &mut ob[t0 * cout..],
                        cout,
                    );
                }
            });
        }
        let mut dims = in_dims;
        *dims.last_mut().unwrap() = cout;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            dims,
            out,
            Op::Conv1d {
                input,
                kernel,
                bias,
                dilation,
            },
            rg,
        ))
    }

    /// Group normalization with per-channel affine transform.
    pub fn group_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        span: NormSpan,
        eps: f64,
    ) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let (b, t, c) = btc(&dims)?;
        if groups == 0 || c % groups != 0 {
            return Err(AutodiffError::Config(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(AutodiffError::Shape(format!(
                "affine parameters must have {c} entries"
            )));
        }
        let units = match span {
            NormSpan::Sequence => groups,
            NormSpan::Frame => t * groups,
        };
        let mut normalized = vec![0.0; b * t * c];
        let mut inv_std = vec![0.0; b * units];
        {
            let x = &self.nodes[input.0].value;
            self.exec.for_each_chunk2(
                &mut normalized,
                t * c,
                &mut inv_std,
                units,
                |bi, nb, sb| {
                    let xb = &x[bi * t * c..(bi + 1) * t * c];
                    for_each_unit(t, c, groups, span, |u, idx| {
                        let n = idx.len() as f64;
                        let mean = idx.clone().map(|i| xb[i]).sum::<f64>() / n;
                        let var = idx.clone().map(|i| (xb[i] - mean).powi(2)).sum::<f64>() / n;
                        let is = 1.0 / (var + eps).sqrt();
                        sb[u] = is;
                        for i in idx {
                            nb[i] = (xb[i] - mean) * is;
                        }
                    });
                },
            );
        }
        let g = &self.nodes[gamma.0].value;
        let be = &self.nodes[beta.0].value;
        let out: Vec<f64> = normalized
            .iter()
            .enumerate()
            .map(|(i, &xh)| {
                let ch = i % c;
                g[ch] * xh + be[ch]
            })
            .collect();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            dims,
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                span,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let out = self
            .value(input)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let rg = self.rg(input);
        self.push(self.dims(input).to_vec(), out, Op::LeakyRelu { input, slope }, rg)
    }

    /// Applies a scalar function with a caller-supplied derivative.
    pub fn elementwise(&mut self, input: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Var {
        let out = self.value(input).iter().map(|&x| f(x)).collect();
        let rg = self.rg(input);
        self.push(
            self.dims(input).to_vec(),
            out,
            Op::Elementwise { input, derivative },
            rg,
        )
    }

    fn same_dims(&self, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(AutodiffError::Shape(format!(
                "operand shapes differ: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_dims(a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.dims(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|&x| s * x).collect();
        let rg = self.rg(a);
        self.push(self.dims(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Sum of squared elements.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a).expect("same operand");
        self.sum(sq)
    }

    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(a).len() {
            return Err(AutodiffError::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims(a)
            )));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(dims, v, Op::Reshape(a), rg))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != db.len() || da[..da.len() - 1] != db[..db.len() - 1] {
            return Err(AutodiffError::Shape(format!(
                "cannot concatenate {da:?} with {db:?}"
            )));
        }
        let (ca, cb) = (last_dim(&da), last_dim(&db));
        let rows = self.value(a).len() / ca;
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.value(b)[r * cb..(r + 1) * cb]);
        }
        let mut dims = da;
        *dims.last_mut().unwrap() = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(dims, out, Op::ConcatLast { a, b }, rg))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Var {
        let dims = self.dims(input).to_vec();
        let d = last_dim(&dims);
        let x = self.value(input);
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::with_capacity(x.len() / d);
        for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let rg = self.rg(input);
        self.push(dims, out, Op::L2NormalizeRows { input, norms }, rg)
    }

    /// For each pivot row `i` and each consecutive block `s` of `seg_len`
    /// rows of `others`, the minimum squared Euclidean distance between
    /// the pivot and any row in the block. Output is `n_pivots × n_blocks`.
    pub fn segment_min_sq_dist(&mut self, pivots: Var, others: Var, seg_len: usize) -> Result<Var> {
        let d = last_dim(self.dims(pivots));
        if last_dim(self.dims(others)) != d {
            return Err(AutodiffError::Shape(format!(
                "row widths differ: {:?} vs {:?}",
                self.dims(pivots),
                self.dims(others)
            )));
        }
        let p = self.value(pivots);
        let o = self.value(others);
        let m = o.len() / d;
        if seg_len == 0 || m % seg_len != 0 {
            return Err(AutodiffError::Shape(format!(
                "{m} rows do not split into segments of {seg_len}"
            )));
        }
        let segs = m / seg_len;
        let (out, argmin) = min_sq_dist_blocks(self.exec, p, o, d, seg_len);
        let rg = self.rg(pivots) || self.rg(others);
        Ok(self.push(
            vec![out.len() / segs, segs],
            out,
            Op::SegmentMinSqDist {
                pivots,
                others,
                argmin,
            },
            rg,
        ))
    }

    /// Row-wise `log Σ exp(x)` over entries where `mask` is set.
    pub fn masked_logsumexp(&mut self, input: Var, mask: Vec<bool>) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let s = last_dim(&dims);
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(AutodiffError::Shape(format!(
                "mask of length {} for {} entries",
                mask.len(),
                x.len()
            )));
        }
        let mut out = Vec::with_capacity(x.len() / s);
        for (r, (row, mrow)) in x.chunks_exact(s).zip(mask.chunks_exact(s)).enumerate() {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::Config(format!("row {r} has an empty mask")));
            }
            let sum: f64 = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            out.push(max + sum.ln());
        }
        let rg = self.rg(input);
        let n = out.len();
        Ok(self.push(vec![n], out, Op::MaskedLogSumExp { input, mask }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode pass from a one-element `loss`. Gradients stay available
    /// through [`Graph::grad`] until [`Graph::zero_grad`]; a second call
    /// without resetting fails with [`AutodiffError::Accumulation`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(AutodiffError::Accumulation);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "loss must be scalar, got {:?}",
                self.nodes[loss.0].dims
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    /// Copies leaf gradients onto the matching tensors of `params`.
    /// Parameters that received no gradient get an all-zero one.
    pub fn write_grads(&self, vars: &ParamVars, params: &mut ParamSet) -> Result<()> {
        for (name, v) in vars {
            let t = params
                .get_mut(name)
                .ok_or_else(|| AutodiffError::Shape(format!("unknown parameter `{name}`")))?;
            let g = match self.grad(*v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            };
            t.set_grad(g)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernel,
                bias,
                dilation,
            } => self.conv1d_backward(*input, *kernel, *bias, *dilation, g, grads),
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                span,
                normalized,
                inv_std,
            } => {
                let (b, t, c) = btc(&node.dims).expect("validated in forward");
                let gam = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (idx, (&gi, &xh)) in g.iter().zip(normalized).enumerate() {
                    dgamma[idx % c] += gi * xh;
                    dbeta[idx % c] += gi;
                }
                if self.rg(*input) {
                    let units = inv_std.len() / b;
                    let mut dx = vec![0.0; g.len()];
                    self.exec.for_each_chunk(&mut dx, t * c, |bi, db| {
                        let gb = &g[bi * t * c..(bi + 1) * t * c];
                        let nb = &normalized[bi * t * c..(bi + 1) * t * c];
                        let sb = &inv_std[bi * units..(bi + 1) * units];
                        for_each_unit(t, c, *groups, *span, |u, idx| {
                            let n = idx.len() as f64;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for j in idx.clone() {
                                let dxh = gb[j] * gam[j % c];
                                s1 += dxh;
                                s2 += dxh * nb[j];
                            }
                            let (m1, m2) = (s1 / n, s2 / n);
                            for j in idx {
                                let dxh = gb[j] * gam[j % c];
                                db[j] = sb[u] * (dxh - m1 - nb[j] * m2);
                            }
                        });
                    });
                    self.accumulate(grads, *input, |a| add_into(a, &dx));
                }
                self.accumulate(grads, *gamma, |a| add_into(a, &dgamma));
                self.accumulate(grads, *beta, |a| add_into(a, &dbeta));
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                self.accumulate(grads, *input, |a| {
                    for ((a, &gi), &xi) in a.iter_mut().zip(g).zip(x) {
                        *a += if xi >= 0.0 { gi } else { slope * gi };
                    }
                });
            }
            Op::Elementwise { input, derivative } => {
                let x = self.value(*input);
                self.accumulate(grads, *input, |a| {
                    for ((a, &gi), &xi) in a.iter_mut().zip(g).zip(x) {
                        *a += gi * derivative(xi);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| {
                    for (x, &gi) in acc.iter_mut().zip(g) {
                        *x -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |acc| {
                    for ((x, &gi), &y) in acc.iter_mut().zip(g).zip(vb) {
                        *x += gi * y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((x, &gi), &y) in acc.iter_mut().zip(g).zip(va) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |acc| {
                for (x, &gi) in acc.iter_mut().zip(g) {
                    *x += s * gi;
                }
            }),
            Op::Sum(a) => self.accumulate(grads, *a, |acc| {
                for x in acc.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Reshape(a) => self.accumulate(grads, *a, |acc| add_into(acc, g)),
            Op::ConcatLast { a, b } => {
                let (ca, cb) = (last_dim(self.dims(*a)), last_dim(self.dims(*b)));
                let w = ca + cb;
                self.accumulate(grads, *a, |acc| {
                    for (dst, src) in acc.chunks_exact_mut(ca).zip(g.chunks_exact(w)) {
                        add_into(dst, &src[..ca]);
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for (dst, src) in acc.chunks_exact_mut(cb).zip(g.chunks_exact(w)) {
                        add_into(dst, &src[ca..]);
                    }
                });
            }
            Op::L2NormalizeRows { input, norms } => {
                let d = last_dim(&node.dims);
                let y = &node.value;
                self.accumulate(grads, *input, |acc| {
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((a, &yi), &gi) in acc[span].iter_mut().zip(yr).zip(gr) {
                            *a += (gi - yi * dot) / n;
                        }
                    }
                });
            }
            Op::SegmentMinSqDist {
                pivots,
                others,
                argmin,
            } => {
                let d = last_dim(self.dims(*pivots));
                let (p, o) = (self.value(*pivots), self.value(*others));
                let mut dp = vec![0.0; p.len()];
                let mut dq = vec![0.0; o.len()];
                let segs = node.dims[1];
                for (idx, (&gi, &a)) in g.iter().zip(argmin).enumerate() {
                    if gi == 0.0 {
                        continue;
                    }
                    let i = idx / segs;
                    for k in 0..d {
                        let diff = 2.0 * gi * (p[i * d + k] - o[a * d + k]);
                        dp[i * d + k] += diff;
                        dq[a * d + k] -= diff;
                    }
                }
                self.accumulate(grads, *pivots, |acc| add_into(acc, &dp));
                self.accumulate(grads, *others, |acc| add_into(acc, &dq));
            }
            Op::MaskedLogSumExp { input, mask } => {
                let x = self.value(*input);
                let s = last_dim(self.dims(*input));
                let lse = &node.value;
                self.accumulate(grads, *input, |acc| {
                    for (j, (a, &m)) in acc.iter_mut().zip(mask).enumerate() {
                        if m {
                            let r = j / s;
                            *a += g[r] * (x[j] - lse[r]).exp();
                        }
                    }
                });
            }
        }
    }

    fn conv1d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (b, t, cin) = btc(self.dims(input)).expect("validated in forward");
        let kd = self.dims(kernel);
        let (k, cout) = (kd[0], kd[2]);
        let half = (k / 2) as isize;
        let x = self.value(input);
        let w = self.value(kernel);
        if self.rg(input) {
            let mut dx = vec![0.0; x.len()];
            self.exec.for_each_chunk(&mut dx, t * cin, |bi, dxb| {
                let gb = &g[bi * t * cout..(bi + 1) * t * cout];
                for kk in 0..k {
                    let off = (kk as isize - half) * dilation as isize;
                    let (t0, t1) = tap_range(t, off);
                    if t1 == t0 {
                        continue;
                    }
                    let dst = (t0 as isize + off) as usize;
                    // dX[t+off] += dY[t] · W_kᵀ
                    gemm_acc(
                        t1 - t0,
                        cout,
                        cin,
                        &gb[t0 * cout..],
                        cout,
                        1,
                        &w[kk * cin * cout..],
                        1,
                        cout,
                        &mut dxb[dst * cin..],
                        cin,
                    );
                }
            });
            self.accumulate(grads, input, |a| add_into(a, &dx));
        }
        if self.rg(kernel) {
            let partials = self.exec.map(b, |bi| {
                let xb = &x[bi * t * cin..(bi + 1) * t * cin];
                let gb = &g[bi * t * cout..(bi + 1) * t * cout];
                let mut dw = vec![0.0; k * cin * cout];
                for kk in 0..k {
                    let off = (kk as isize - half) * dilation as isize;
                    let (t0, t1) = tap_range(t, off);
                    if t1 == t0 {
                        continue;
                    }
                    let src = (t0 as isize + off) as usize;
                    // dW_k += X[t+off]ᵀ · dY[t]
                    gemm_acc(
                        cin,
                        t1 - t0,
                        cout,
                        &xb[src * cin..],
                        1,
                        cin,
                        &gb[t0 * cout..],
                        cout,
                        1,
                        &mut dw[kk * cin * cout..],
                        cout,
                    );
                }
                dw
            });
            self.accumulate(grads, kernel, |a| {
                for p in &partials {
                    add_into(a, p);
                }
            });
        }
        if self.rg(bias) {
            self.accumulate(grads, bias, |a| {
                for row in g.chunks_exact(cout) {
                    add_into(a, row);
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Visits each normalization unit of a `T×C` slab as `(unit, indices)`.
fn for_each_unit(
    t: usize,
    c: usize,
    groups: usize,
    span: NormSpan,
    mut f: impl FnMut(usize, UnitIndices),
) {
    let cg = c / groups;
    match span {
        NormSpan::Sequence => {
            for g in 0..groups {
                f(
                    g,
                    UnitIndices {
                        c,
                        c0: g * cg,
                        cg,
                        rows: 0..t,
                        j: 0,
                    },
                );
            }
        }
        NormSpan::Frame => {
            for r in 0..t {
                for g in 0..groups {
                    f(
                        r * groups + g,
                        UnitIndices {
                            c,
                            c0: g * cg,
                            cg,
                            rows: r..r + 1,
                            j: 0,
                        },
                    );
                }
            }
        }
    }
}

/// Flat indices of a channel group across a range of rows.
#[derive(Clone)]
struct UnitIndices {
    c: usize,
    c0: usize,
    cg: usize,
    rows: std::ops::Range<usize>,
    j: usize,
}

impl UnitIndices {
    fn len(&self) -> usize {
        self.rows.len() * self.cg - self.j
    }
}

impl Iterator for UnitIndices {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.rows.start >= self.rows.end {
            return None;
        }
        let idx = self.rows.start * self.c + self.c0 + self.j;
        self.j += 1;
        if self.j == self.cg {
            self.j = 0;
            self.rows.start += 1;
        }
        Some(idx)
    }
}

/// Blocked minimum-distance search. Candidates are ranked with the expanded
/// form `|p|² + |o|² − 2 p·o` (one GEMM per block); the reported minimum
/// is recomputed exactly at the winning row.
fn min_sq_dist_blocks(
    exec: Exec,
    p: &[f64],
    o: &[f64],
    d: usize,
    seg_len: usize,
) -> (Vec<f64>, Vec<usize>) {
    const BLOCK: usize = 128;
    let n = p.len() / d;
    let m = o.len() / d;
    let segs = m / seg_len;
    let o_norms: Vec<f64> = o.chunks_exact(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let blocks = n.div_ceil(BLOCK);
    let parts = exec.map(blocks, |bk| {
        let r0 = bk * BLOCK;
        let rows = BLOCK.min(n - r0);
        let mut dots = vec![0.0; rows * m];
        gemm_acc(rows, d, m, &p[r0 * d..], d, 1, o, 1, d, &mut dots, m);
        let mut vals = Vec::with_capacity(rows * segs);
        let mut args = Vec::with_capacity(rows * segs);
        for r in 0..rows {
            let pi = &p[(r0 + r) * d..(r0 + r + 1) * d];
            let pn: f64 = pi.iter().map(|v| v * v).sum();
            let drow = &dots[r * m..(r + 1) * m];
            for s in 0..segs {
                let mut best = f64::INFINITY;
                let mut arg = s * seg_len;
                for j in s * seg_len..(s + 1) * seg_len {
                    let approx = pn + o_norms[j] - 2.0 * drow[j];
                    if approx < best {
                        best = approx;
                        arg = j;
                    }
                }
                let oj = &o[arg * d..(arg + 1) * d];
                let exact: f64 = pi.iter().zip(oj).map(|(a, b)| (a - b) * (a - b)).sum();
                vals.push(exact);
                args.push(arg);
            }
        }
        (vals, args)
    });
    let mut vals = Vec::with_capacity(n * segs);
    let mut args = Vec::with_capacity(n * segs);
    for (v, a) in parts {
        vals.extend(v);
        args.extend(a);
    }
    (vals, args)
}
