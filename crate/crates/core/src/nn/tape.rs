//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Each operation computes its output eagerly when recorded and stores the
//! intermediates its backward rule needs (patch columns, pooling argmaxes,
//! normalization statistics, gate activations). `backward` then walks the
//! tape once in reverse, producing gradients for every parameter and every
//! recorded node.
//!
//! Layer semantics:
//! - `conv2d`: zero-padded cross-correlation, stride `s`, via patch-column
//!   unfolding and matrix multiplication.
//! - `batch_norm2d`: per-channel normalization over batch and spatial axes
//!   with biased variance; running statistics are updated in train mode as
//!   `running = momentum * running + (1 - momentum) * batch` and are the
//!   statistics used in eval mode.
//! - `dropout`: train mode zeroes each element with probability `p` and
//!   scales survivors by `1/(1-p)`; eval mode is the identity.
//! - `lstm_sequence`: standard recurrence (input/forget/output gates
//!   sigmoid, cell candidate tanh), zero initial state, one shared bias
//!   vector, gate blocks ordered input/forget/cell/output.
//! - `mse_loss`: mean of squared differences over all elements.
//! - `composite_tracking_loss`: see [`Tape::composite_tracking_loss`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{col2im_add, gemm_nn, gemm_nt, gemm_tn, im2col};
use super::params::{Gradients, ParamId, ParamSet};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{LANDMARK_COUNT, RING_COUNT, SPOKE_COUNT};

/// Forward-pass behavior switch: training enables dropout and batch-norm
/// statistic updates; evaluation is a pure function of inputs and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Mask-weighted decomposition of the tracking loss for logging. The total
/// equals `mse_position + omega * (radial_term + circ_term)`.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mask-weighted mean of per-frame landmark MSE (squared px).
    pub mse_position: f64,
    /// Mask-weighted mean of |predicted - true| radial strain.
    pub radial_term: f64,
    /// Mask-weighted mean of |predicted - true| midwall circumferential strain.
    pub circ_term: f64,
    pub omega: f64,
    /// Per-frame loss values; 0 at masked-out frames.
    pub per_frame: Vec<f64>,
    pub frame_mask: Vec<bool>,
}

/// Reference segments shorter than this make strain undefined.
const MIN_REF_LEN: f64 = 1e-9;

const MIDWALL_RING: usize = 3;

struct BatchNormCache<S> {
    x_hat: Vec<S>,
    inv_std: Vec<S>,
    train: bool,
    channels: usize,
    per_channel: usize,
}

struct LstmCache<S> {
    /// Post-activation gates [T, N, 4H], blocks i|f|g|o.
    gates: Vec<S>,
    /// Cell states [T, N, H].
    c: Vec<S>,
    /// tanh of cell states [T, N, H].
    tanh_c: Vec<S>,
    t: usize,
    n: usize,
    input_dim: usize,
    hidden: usize,
}

struct CompositeCache<S> {
    truth: Vec<S>,
    mask: Vec<bool>,
    omega: S,
    inv_weight: S,
    frames: usize,
    /// Transmural reference lengths from the prediction's own frame 0.
    pred_ref_radial: Vec<S>,
    /// Midwall segment reference lengths from the prediction's frame 0.
    pred_ref_circ: Vec<S>,
    /// Current transmural lengths per frame [T, 24].
    cur_radial: Vec<S>,
    /// Current midwall segment lengths per frame [T, 24].
    cur_circ: Vec<S>,
    /// sign(predicted strain - true strain) per frame; 0 where masked out.
    sign_radial: Vec<S>,
    sign_circ: Vec<S>,
}

enum Op<S> {
    Input,
    Param {
        id: ParamId,
    },
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: usize,
        /// Cached patch columns, per sample: [N, K, out_px].
        cols: Vec<S>,
        k_dim: usize,
        out_px: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        cache: BatchNormCache<S>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Relu {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: S,
    },
    Dropout {
        x: NodeId,
        /// None in eval mode (identity).
        kept: Option<Vec<bool>>,
        scale: S,
    },
    Reshape {
        x: NodeId,
    },
    SliceBatch {
        x: NodeId,
        item: usize,
    },
    Scale {
        x: NodeId,
        k: S,
    },
    Lstm {
        x: NodeId,
        w_ih: ParamId,
        w_hh: ParamId,
        b: ParamId,
        cache: LstmCache<S>,
    },
    Mse {
        pred: NodeId,
        target: Vec<S>,
    },
    Composite {
        pred: NodeId,
        cache: CompositeCache<S>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<S>,
    },
    ScaledSum {
        xs: Vec<NodeId>,
        scale: S,
    },
}

struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    mode: Mode,
    rng: ChaCha8Rng,
    node_grads: Vec<Option<Vec<S>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tape<S> {
    /// `seed` drives dropout masks only; eval-mode tapes may pass anything.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Tape { nodes: Vec::new(), mode, rng: ChaCha8Rng::seed_from_u64(seed), node_grads: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>) -> NodeId {
        debug_assert_eq!(value.len(), numel(&shape));
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite forward output in node {}",
            self.nodes.len()
        );
        self.nodes.push(Node { value, shape, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> S {
        assert_eq!(self.nodes[id.0].value.len(), 1, "node is not scalar");
        self.nodes[id.0].value[0]
    }

    /// Gradient of the last backward target with respect to this node.
    pub fn node_grad(&self, id: NodeId) -> Option<&[S]> {
        self.node_grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<S>) -> Result<NodeId> {
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!(
                "input data has {} values, shape {shape:?} needs {}",
                data.len(),
                numel(shape)
            )));
        }
        Ok(self.push(data, shape.to_vec(), Op::Input))
    }

    /// Records a parameter as a node so gradients flow to the parameter set.
    pub fn param_node(&mut self, params: &ParamSet<S>, id: ParamId) -> NodeId {
        let value = params.value(id).to_vec();
        let shape = params.shape(id).to_vec();
        self.push(value, shape, Op::Param { id })
    }

    pub fn conv2d(
        &mut self,
        params: &ParamSet<S>,
        x: NodeId,
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = params.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d needs 4-D input and weight, got {xs:?} and {ws:?}")));
        }
        let (n, c_in, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c_in {
            return Err(Error::Shape(format!("conv2d channel mismatch: input {xs:?} vs weight {ws:?}")));
        }
        if params.shape(b) != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?} does not match {c_out} output channels",
                params.shape(b)
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w_dim + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w_dim}"
            )));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w_dim + 2 * pad - kw) / stride + 1;
        let out_px = out_h * out_w;
        let k_dim = c_in * kh * kw;

        let weight = params.value(w);
        let bias = params.value(b);
        let mut cols = vec![S::ZERO; n * k_dim * out_px];
        let mut out = vec![S::ZERO; n * c_out * out_px];
        for s_i in 0..n {
            let x_s = &self.nodes[x.0].value[s_i * c_in * h * w_dim..(s_i + 1) * c_in * h * w_dim];
            let cols_s = &mut cols[s_i * k_dim * out_px..(s_i + 1) * k_dim * out_px];
            im2col(x_s, c_in, h, w_dim, kh, kw, stride, pad, cols_s);
            let out_s = &mut out[s_i * c_out * out_px..(s_i + 1) * c_out * out_px];
            gemm_nn(out_s, weight, cols_s, c_out, k_dim, out_px, false);
            for (o, row) in out_s.chunks_mut(out_px).enumerate() {
                let bo = bias[o];
                for v in row {
                    *v += bo;
                }
            }
        }
        Ok(self.push(
            out,
            vec![n, c_out, out_h, out_w],
            Op::Conv2d { x, w, b, stride, pad, cols, k_dim, out_px },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        params: &mut ParamSet<S>,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("batch_norm2d needs 4-D input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        for (name, id) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
            if params.shape(id) != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm2d {name} shape {:?} does not match {c} channels",
                    params.shape(id)
                )));
            }
        }
        let plane = h * w;
        let per_channel = n * plane;
        let eps_s = S::from_f64(eps);
        let train = self.mode == Mode::Train;

        let (mean, var) = if train {
            let mut mean = vec![S::ZERO; c];
            let mut var = vec![S::ZERO; c];
            let inv_m = S::from_f64(1.0 / per_channel as f64);
            let xv = &self.nodes[x.0].value;
            for ci in 0..c {
                let mut sum = S::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &xv[base..base + plane] {
                        sum += v;
                    }
                }
                let m = sum * inv_m;
                let mut sq = S::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &xv[base..base + plane] {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = sq * inv_m;
            }
            // Fold the batch statistics into the running estimates.
            let mom = S::from_f64(momentum);
            let one_minus = S::ONE - mom;
            for ci in 0..c {
                let rm = params.value_mut(running_mean);
                rm[ci] = mom * rm[ci] + one_minus * mean[ci];
                let rv = params.value_mut(running_var);
                rv[ci] = mom * rv[ci] + one_minus * var[ci];
            }
            (mean, var)
        } else {
            (params.value(running_mean).to_vec(), params.value(running_var).to_vec())
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps_s).sqrt()).collect();
        let g = params.value(gamma).to_vec();
        let bt = params.value(beta).to_vec();
        let xv = &self.nodes[x.0].value;
        let mut x_hat = vec![S::ZERO; xv.len()];
        let mut out = vec![S::ZERO; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (m, is, gc, bc) = (mean[ci], inv_std[ci], g[ci], bt[ci]);
                for i in base..base + plane {
                    let xh = (xv[i] - m) * is;
                    x_hat[i] = xh;
                    out[i] = gc * xh + bc;
                }
            }
        }
        Ok(self.push(
            out,
            xs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache: BatchNormCache { x_hat, inv_std, train, channels: c, per_channel },
            },
        ))
    }

    /// Non-overlapping max pooling with a `k`-by-`k` window and stride `k`;
    /// both spatial extents must be divisible by `k`.
    pub fn max_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("max_pool2d needs 4-D input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!("max_pool2d window {k} does not divide input {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![S::ZERO; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = in_base + (oy * k) * w + ox * k;
                    let mut best = xv[best_idx];
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = in_base + (oy * k + dy) * w + (ox * k + dx);
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx;
                }
            }
        }
        Ok(self.push(out, vec![n, c, oh, ow], Op::MaxPool { x, argmax }))
    }

    /// Fully connected layer: `y = x Wᵀ + b` with `x` [N, in], `W` [out, in].
    pub fn linear(&mut self, params: &ParamSet<S>, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = params.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear input {xs:?} incompatible with weight {ws:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        if params.shape(b) != [o] {
            return Err(Error::Shape(format!("linear bias shape {:?} vs {o} outputs", params.shape(b))));
        }
        let mut out = vec![S::ZERO; n * o];
        gemm_nt(&mut out, &self.nodes[x.0].value, params.value(w), n, f, o, false);
        let bias = params.value(b);
        for row in out.chunks_mut(o) {
            for (v, &bo) in row.iter_mut().zip(bias) {
                *v += bo;
            }
        }
        Ok(self.push(out, vec![n, o], Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| v.maximum(S::ZERO)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(value, shape, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let a = S::from_f64(slope);
        let value: Vec<S> =
            self.nodes[x.0].value.iter().map(|&v| if v > S::ZERO { v } else { a * v }).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(value, shape, Op::LeakyRelu { x, slope: a })
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability must be in [0,1), got {p}")));
        }
        let shape = self.nodes[x.0].shape.clone();
        if self.mode == Mode::Eval || p == 0.0 {
            let value = self.nodes[x.0].value.clone();
            return Ok(self.push(value, shape, Op::Dropout { x, kept: None, scale: S::ONE }));
        }
        let scale = S::from_f64(1.0 / (1.0 - p));
        let kept: Vec<bool> = (0..self.nodes[x.0].value.len()).map(|_| self.rng.random::<f64>() >= p).collect();
        let value: Vec<S> = self.nodes[x.0]
            .value
            .iter()
            .zip(&kept)
            .map(|(&v, &keep)| if keep { v * scale } else { S::ZERO })
            .collect();
        Ok(self.push(value, shape, Op::Dropout { x, kept: Some(kept), scale }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.nodes[x.0].value.len() {
            return Err(Error::Shape(format!(
                "reshape to {shape:?} ({} values) from {:?} ({} values)",
                numel(&shape),
                self.nodes[x.0].shape,
                self.nodes[x.0].value.len()
            )));
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(value, shape, Op::Reshape { x }))
    }

    /// Extracts batch item `item` from a [T, N, F] tensor as [T, F].
    pub fn slice_batch(&mut self, x: NodeId, item: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("slice_batch needs [T,N,F], got {xs:?}")));
        }
        let (t, n, f) = (xs[0], xs[1], xs[2]);
        if item >= n {
            return Err(Error::Shape(format!("batch item {item} out of range for N={n}")));
        }
        let xv = &self.nodes[x.0].value;
        let mut value = vec![S::ZERO; t * f];
        for ti in 0..t {
            let src = (ti * n + item) * f;
            value[ti * f..(ti + 1) * f].copy_from_slice(&xv[src..src + f]);
        }
        Ok(self.push(value, vec![t, f], Op::SliceBatch { x, item }))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let ks = S::from_f64(k);
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| v * ks).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(value, shape, Op::Scale { x, k: ks })
    }

    /// Runs the whole sequence through one LSTM layer. Input [T, N, I],
    /// output [T, N, H]; weights `w_ih` [4H, I], `w_hh` [4H, H], bias [4H].
    pub fn lstm_sequence(
        &mut self,
        params: &ParamSet<S>,
        x: NodeId,
        w_ih: ParamId,
        w_hh: ParamId,
        b: ParamId,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("lstm_sequence needs [T,N,I], got {xs:?}")));
        }
        let (t_len, n, input_dim) = (xs[0], xs[1], xs[2]);
        let wihs = params.shape(w_ih).to_vec();
        let whhs = params.shape(w_hh).to_vec();
        if wihs.len() != 2 || wihs[1] != input_dim || wihs[0] % 4 != 0 {
            return Err(Error::Shape(format!("lstm w_ih shape {wihs:?} vs input dim {input_dim}")));
        }
        let hidden = wihs[0] / 4;
        if whhs != [4 * hidden, hidden] {
            return Err(Error::Shape(format!("lstm w_hh shape {whhs:?} vs hidden {hidden}")));
        }
        if params.shape(b) != [4 * hidden] {
            return Err(Error::Shape(format!("lstm bias shape {:?} vs 4*{hidden}", params.shape(b))));
        }

        let wih = params.value(w_ih);
        let whh = params.value(w_hh);
        let bias = params.value(b);
        let mut out = vec![S::ZERO; t_len * n * hidden];
        let mut gates = vec![S::ZERO; t_len * n * 4 * hidden];
        let mut cells = vec![S::ZERO; t_len * n * hidden];
        let mut tanh_cells = vec![S::ZERO; t_len * n * hidden];
        let mut z = vec![S::ZERO; n * 4 * hidden];

        for t in 0..t_len {
            let x_t = &self.nodes[x.0].value[t * n * input_dim..(t + 1) * n * input_dim];
            gemm_nt(&mut z, x_t, wih, n, input_dim, 4 * hidden, false);
            if t > 0 {
                let h_prev = &out[(t - 1) * n * hidden..t * n * hidden];
                gemm_nt(&mut z, h_prev, whh, n, hidden, 4 * hidden, true);
            }
            for row in z.chunks_mut(4 * hidden) {
                for (v, &bj) in row.iter_mut().zip(bias) {
                    *v += bj;
                }
            }
            let g_t = &mut gates[t * n * 4 * hidden..(t + 1) * n * 4 * hidden];
            for ni in 0..n {
                let zr = &z[ni * 4 * hidden..(ni + 1) * 4 * hidden];
                let gr = &mut g_t[ni * 4 * hidden..(ni + 1) * 4 * hidden];
                for j in 0..hidden {
                    let i_g = zr[j].sigmoid();
                    let f_g = zr[hidden + j].sigmoid();
                    let g_g = zr[2 * hidden + j].tanh();
                    let o_g = zr[3 * hidden + j].sigmoid();
                    gr[j] = i_g;
                    gr[hidden + j] = f_g;
                    gr[2 * hidden + j] = g_g;
                    gr[3 * hidden + j] = o_g;
                    let c_prev = if t > 0 { cells[((t - 1) * n + ni) * hidden + j] } else { S::ZERO };
                    let c_new = f_g * c_prev + i_g * g_g;
                    let tc = c_new.tanh();
                    cells[(t * n + ni) * hidden + j] = c_new;
                    tanh_cells[(t * n + ni) * hidden + j] = tc;
                    out[(t * n + ni) * hidden + j] = o_g * tc;
                }
            }
        }
        Ok(self.push(
            out,
            vec![t_len, n, hidden],
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache: LstmCache { gates, c: cells, tanh_c: tanh_cells, t: t_len, n, input_dim, hidden },
            },
        ))
    }

    /// Mean of squared differences over every element (for a [N, 4] box
    /// batch this is the mean over all N*4 corner coordinates).
    pub fn mse_loss(&mut self, pred: NodeId, target: Vec<S>) -> Result<NodeId> {
        let pv = &self.nodes[pred.0].value;
        if pv.len() != target.len() {
            return Err(Error::Shape(format!(
                "mse_loss target has {} values, prediction has {}",
                target.len(),
                pv.len()
            )));
        }
        if target.is_empty() {
            return Err(Error::Shape("mse_loss on empty tensors".into()));
        }
        let inv = S::from_f64(1.0 / target.len() as f64);
        let mut sum = S::ZERO;
        for (&p, &t) in pv.iter().zip(&target) {
            let d = p - t;
            sum += d * d;
        }
        let value = vec![sum * inv];
        Ok(self.push(value, vec![1], Op::Mse { pred, target }))
    }

    /// Per-frame landmark MSE plus weighted absolute strain errors,
    /// mask-averaged over frames:
    ///
    /// `loss_t = (1/168) Σ_i ‖p'_i − p_i‖² + ω·|ε'_R − ε_R| + ω·|ε'_C − ε_C|`
    ///
    /// where primed strains come from the prediction with its own frame 0 as
    /// reference and unprimed from the truth with its frame 0; the
    /// circumferential term uses the midwall ring. Coordinates are in crop
    /// pixels. `pred` is [T, 168, 2] or [T, 336]; `truth` matches flattened;
    /// `mask` flags real (non-padded) frames and must include frame 0.
    /// Errors on reference segments shorter than 1e-9 px.
    pub fn composite_tracking_loss(
        &mut self,
        pred: NodeId,
        truth: &[S],
        omega: f64,
        mask: &[bool],
    ) -> Result<(NodeId, LossBreakdown)> {
        let ps = self.shape(pred).to_vec();
        let frames = *ps.first().unwrap_or(&0);
        let per_frame_ok = (ps.len() == 2 && ps[1] == 2 * LANDMARK_COUNT)
            || (ps.len() == 3 && ps[1] == LANDMARK_COUNT && ps[2] == 2);
        if !per_frame_ok || frames == 0 {
            return Err(Error::Shape(format!(
                "composite loss needs [T,{LANDMARK_COUNT},2] or [T,{}], got {ps:?}",
                2 * LANDMARK_COUNT
            )));
        }
        if truth.len() != frames * 2 * LANDMARK_COUNT {
            return Err(Error::Shape(format!(
                "truth has {} values, expected {}",
                truth.len(),
                frames * 2 * LANDMARK_COUNT
            )));
        }
        if mask.len() != frames {
            return Err(Error::Shape(format!("mask length {} vs {frames} frames", mask.len())));
        }
        if !mask[0] {
            return Err(Error::Domain("frame 0 is the strain reference and cannot be masked out".into()));
        }

        let fvals = 2 * LANDMARK_COUNT;
        let pv = &self.nodes[pred.0].value;
        let pred_ref_radial = radial_lengths(&pv[..fvals]);
        let pred_ref_circ = circ_lengths(&pv[..fvals]);
        let truth_ref_radial = radial_lengths(&truth[..fvals]);
        let truth_ref_circ = circ_lengths(&truth[..fvals]);
        for lens in [&pred_ref_radial, &truth_ref_radial, &pred_ref_circ, &truth_ref_circ] {
            if let Some(l) = lens.iter().find(|l| l.to_f64() < MIN_REF_LEN) {
                return Err(Error::Degenerate(format!(
                    "strain reference segment of length {} px is degenerate",
                    l.to_f64()
                )));
            }
        }

        let weight = mask.iter().filter(|&&m| m).count();
        let inv_weight = S::from_f64(1.0 / weight as f64);
        let omega_s = S::from_f64(omega);
        let inv_count = S::from_f64(1.0 / LANDMARK_COUNT as f64);

        let mut cur_radial = vec![S::ZERO; frames * SPOKE_COUNT];
        let mut cur_circ = vec![S::ZERO; frames * SPOKE_COUNT];
        let mut sign_radial = vec![S::ZERO; frames];
        let mut sign_circ = vec![S::ZERO; frames];
        let mut per_frame = vec![0.0; frames];
        let (mut acc_total, mut acc_mse, mut acc_r, mut acc_c) = (S::ZERO, S::ZERO, S::ZERO, S::ZERO);

        for t in 0..frames {
            if !mask[t] {
                continue;
            }
            let p_t = &pv[t * fvals..(t + 1) * fvals];
            let tr_t = &truth[t * fvals..(t + 1) * fvals];
            let mut mse = S::ZERO;
            for (&a, &b) in p_t.iter().zip(tr_t) {
                let d = a - b;
                mse += d * d;
            }
            mse *= inv_count;

            let rad_t = radial_lengths(p_t);
            let cir_t = circ_lengths(p_t);
            let eps_r_pred = green_mean(&pred_ref_radial, &rad_t);
            let eps_c_pred = green_mean(&pred_ref_circ, &cir_t);
            let eps_r_true = green_mean(&truth_ref_radial, &radial_lengths(tr_t));
            let eps_c_true = green_mean(&truth_ref_circ, &circ_lengths(tr_t));
            cur_radial[t * SPOKE_COUNT..(t + 1) * SPOKE_COUNT].copy_from_slice(&rad_t);
            cur_circ[t * SPOKE_COUNT..(t + 1) * SPOKE_COUNT].copy_from_slice(&cir_t);

            let du_r = eps_r_pred - eps_r_true;
            let du_c = eps_c_pred - eps_c_true;
            sign_radial[t] = sign_of(du_r);
            sign_circ[t] = sign_of(du_c);
            let err_r = du_r.abs();
            let err_c = du_c.abs();
            let loss_t = mse + omega_s * (err_r + err_c);
            per_frame[t] = loss_t.to_f64();
            acc_total += loss_t;
            acc_mse += mse;
            acc_r += err_r;
            acc_c += err_c;
        }

        let total = acc_total * inv_weight;
        let breakdown = LossBreakdown {
            total: total.to_f64(),
            mse_position: (acc_mse * inv_weight).to_f64(),
            radial_term: (acc_r * inv_weight).to_f64(),
            circ_term: (acc_c * inv_weight).to_f64(),
            omega,
            per_frame,
            frame_mask: mask.to_vec(),
        };
        let cache = CompositeCache {
            truth: truth.to_vec(),
            mask: mask.to_vec(),
            omega: omega_s,
            inv_weight,
            frames,
            pred_ref_radial,
            pred_ref_circ,
            cur_radial,
            cur_circ,
            sign_radial,
            sign_circ,
        };
        let node = self.push(vec![total], vec![1], Op::Composite { pred, cache });
        Ok((node, breakdown))
    }

    /// Scalar projection Σ wᵢ·xᵢ; used to reduce any tensor to a scalar for
    /// gradient verification.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<S>) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.len() != weights.len() {
            return Err(Error::Shape(format!(
                "weighted_sum weights {} vs values {}",
                weights.len(),
                xv.len()
            )));
        }
        let mut sum = S::ZERO;
        for (&v, &w) in xv.iter().zip(&weights) {
            sum += v * w;
        }
        let value = vec![sum];
        Ok(self.push(value, vec![1], Op::WeightedSum { x, weights }))
    }

    /// `scale · Σ xs` over scalar nodes; used to average per-item losses.
    pub fn scaled_sum(&mut self, xs: &[NodeId], scale: f64) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("scaled_sum of no nodes".into()));
        }
        let mut sum = S::ZERO;
        for id in xs {
            if self.nodes[id.0].value.len() != 1 {
                return Err(Error::Shape("scaled_sum inputs must be scalars".into()));
            }
            sum += self.nodes[id.0].value[0];
        }
        let k = S::from_f64(scale);
        let value = vec![sum * k];
        Ok(self.push(value, vec![1], Op::ScaledSum { xs: xs.to_vec(), scale: k }))
    }

    /// Reverse pass from a scalar node. Returns parameter gradients;
    /// per-node gradients become available through [`Tape::node_grad`].
    pub fn backward(&mut self, loss: NodeId, params: &ParamSet<S>) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward target must be scalar".into()));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::Train(format!(
                "loss is non-finite ({})",
                self.nodes[loss.0].value[0]
            )));
        }
        let mut grads = Gradients::new(params);
        let mut ng: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        ng[loss.0] = Some(vec![S::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = ng[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    ng[idx] = Some(gy); // keep for node_grad consumers
                }
                Op::Param { id } => {
                    let slot = grads.accumulate(*id, gy.len());
                    for (s, g) in slot.iter_mut().zip(&gy) {
                        *s += *g;
                    }
                    ng[idx] = Some(gy);
                }
                Op::Conv2d { x, w, b, stride, pad, cols, k_dim, out_px } => {
                    let xs = &self.nodes[x.0].shape;
                    let (n, c_in, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
                    let ws = params.shape(*w);
                    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                    let weight = params.value(*w);
                    let dx = slot(&mut ng, x.0, self.nodes[x.0].value.len());
                    let mut dcols = vec![S::ZERO; k_dim * out_px];
                    {
                        for s_i in 0..n {
                            let dy_s = &gy[s_i * c_out * out_px..(s_i + 1) * c_out * out_px];
                            gemm_tn(&mut dcols, weight, dy_s, *k_dim, c_out, *out_px, false);
                            let dx_s = &mut dx[s_i * c_in * h * w_dim..(s_i + 1) * c_in * h * w_dim];
                            col2im_add(&dcols, c_in, h, w_dim, kh, kw, *stride, *pad, dx_s);
                        }
                    }
                    let dw = grads.accumulate(*w, weight.len());
                    for s_i in 0..n {
                        let dy_s = &gy[s_i * c_out * out_px..(s_i + 1) * c_out * out_px];
                        let cols_s = &cols[s_i * k_dim * out_px..(s_i + 1) * k_dim * out_px];
                        gemm_nt(dw, dy_s, cols_s, c_out, *out_px, *k_dim, true);
                    }
                    let db = grads.accumulate(*b, c_out);
                    for s_i in 0..n {
                        let dy_s = &gy[s_i * c_out * out_px..(s_i + 1) * c_out * out_px];
                        for (o, row) in dy_s.chunks(*out_px).enumerate() {
                            let mut sum = S::ZERO;
                            for &v in row {
                                sum += v;
                            }
                            db[o] += sum;
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let c = cache.channels;
                    let m = cache.per_channel;
                    let plane = m / self.nodes[x.0].shape[0];
                    let n = self.nodes[x.0].shape[0];
                    let g = params.value(*gamma);
                    let mut sum_dy = vec![S::ZERO; c];
                    let mut sum_dy_xhat = vec![S::ZERO; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let mut s1 = S::ZERO;
                            let mut s2 = S::ZERO;
                            for i in base..base + plane {
                                s1 += gy[i];
                                s2 += gy[i] * cache.x_hat[i];
                            }
                            sum_dy[ci] += s1;
                            sum_dy_xhat[ci] += s2;
                        }
                    }
                    {
                        let dg = grads.accumulate(*gamma, c);
                        for ci in 0..c {
                            dg[ci] += sum_dy_xhat[ci];
                        }
                    }
                    {
                        let db = grads.accumulate(*beta, c);
                        for ci in 0..c {
                            db[ci] += sum_dy[ci];
                        }
                    }
                    let dx = slot(&mut ng, x.0, self.nodes[x.0].value.len());
                    if cache.train {
                        let inv_m = S::from_f64(1.0 / m as f64);
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let k = g[ci] * cache.inv_std[ci] * inv_m;
                                let m_s = S::from_f64(m as f64);
                                for i in base..base + plane {
                                    dx[i] += k
                                        * (m_s * gy[i] - sum_dy[ci] - cache.x_hat[i] * sum_dy_xhat[ci]);
                                }
                            }
                        }
                    } else {
                        // Statistics are constants in eval mode.
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * plane;
                                let k = g[ci] * cache.inv_std[ci];
                                for i in base..base + plane {
                                    dx[i] += k * gy[i];
                                }
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = slot(&mut ng, x.0, self.nodes[x.0].value.len());
                    for (out_i, &in_i) in argmax.iter().enumerate() {
                        dx[in_i] += gy[out_i];
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = &self.nodes[x.0].shape;
                    let (n, f) = (xs[0], xs[1]);
                    let o = params.shape(*w)[0];
                    {
                        let dx = slot(&mut ng, x.0, n * f);
                        gemm_nn(dx, &gy, params.value(*w), n, o, f, true);
                    }
                    {
                        let dw = grads.accumulate(*w, o * f);
                        gemm_tn(dw, &gy, &self.nodes[x.0].value, o, n, f, true);
                    }
                    let db = grads.accumulate(*b, o);
                    for row in gy.chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = slot(&mut ng, x.0, xv.len());
                    for i in 0..xv.len() {
                        if xv[i] > S::ZERO {
                            dx[i] += gy[i];
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &self.nodes[x.0].value;
                    let a = *slope;
                    let dx = slot(&mut ng, x.0, xv.len());
                    for i in 0..xv.len() {
                        dx[i] += if xv[i] > S::ZERO { gy[i] } else { a * gy[i] };
                    }
                }
                Op::Dropout { x, kept, scale } => {
                    let dx = slot(&mut ng, x.0, self.nodes[x.0].value.len());
                    match kept {
                        None => {
                            for (d, &g) in dx.iter_mut().zip(&gy) {
                                *d += g;
                            }
                        }
                        Some(mask) => {
                            let k = *scale;
                            for i in 0..dx.len() {
                                if mask[i] {
                                    dx[i] += k * gy[i];
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    let dx = slot(&mut ng, x.0, self.nodes[x.0].value.len());
                    for (d, &g) in dx.iter_mut().zip(&gy) {
                        *d += g;
                    }
                }
                Op::SliceBatch { x, item } => {
                    let xs = &self.nodes[x.0].shape;
                    let (t_len, n, f) = (xs[0], xs[1], xs[2]);
                    let dx = slot(&mut ng, x.0, self.nodes[x.0].value.len());
                    for ti in 0..t_len {
                        let dst = (ti * n + item) * f;
                        for fi in 0..f {
                            dx[dst + fi] += gy[ti * f + fi];
                        }
                    }
                }
                Op::Scale { x, k } => {
                    let kk = *k;
                    let dx = slot(&mut ng, x.0, self.nodes[x.0].value.len());
                    for (d, &g) in dx.iter_mut().zip(&gy) {
                        *d += kk * g;
                    }
                }
                Op::Lstm { x, w_ih, w_hh, b, cache } => {
                    self.lstm_backward(&gy, x, *w_ih, *w_hh, *b, cache, idx, params, &mut ng, &mut grads);
                }
                Op::Mse { pred, target } => {
                    let pv = &self.nodes[pred.0].value;
                    let k = gy[0] * S::from_f64(2.0 / target.len() as f64);
                    let dp = slot(&mut ng, pred.0, pv.len());
                    for i in 0..pv.len() {
                        dp[i] += k * (pv[i] - target[i]);
                    }
                }
                Op::Composite { pred, cache } => {
                    composite_backward(gy[0], &self.nodes[pred.0].value, cache, slot(&mut ng, pred.0, self.nodes[pred.0].value.len()));
                }
                Op::WeightedSum { x, weights } => {
                    let dx = slot(&mut ng, x.0, weights.len());
                    for (d, &w) in dx.iter_mut().zip(weights) {
                        *d += gy[0] * w;
                    }
                }
                Op::ScaledSum { xs, scale } => {
                    let contrib = gy[0] * *scale;
                    for xid in xs.clone() {
                        slot(&mut ng, xid.0, 1)[0] += contrib;
                    }
                }
            }
        }
        self.node_grads = ng;
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        gy: &[S],
        x: &NodeId,
        w_ih: ParamId,
        w_hh: ParamId,
        b: ParamId,
        cache: &LstmCache<S>,
        self_idx: usize,
        params: &ParamSet<S>,
        ng: &mut Vec<Option<Vec<S>>>,
        grads: &mut Gradients<S>,
    ) {
        let LstmCache { gates, c, tanh_c, t: t_len, n, input_dim, hidden } = cache;
        let (t_len, n, input_dim, hidden) = (*t_len, *n, *input_dim, *hidden);
        let h4 = 4 * hidden;
        let out = &self.nodes[self_idx].value;
        let xv = &self.nodes[x.0].value;
        let wih = params.value(w_ih);
        let whh = params.value(w_hh);

        let mut dx = vec![S::ZERO; xv.len()];
        let mut dwih = vec![S::ZERO; wih.len()];
        let mut dwhh = vec![S::ZERO; whh.len()];
        let mut db = vec![S::ZERO; h4];
        let mut dh_rec = vec![S::ZERO; n * hidden];
        let mut dc_rec = vec![S::ZERO; n * hidden];
        let mut dz = vec![S::ZERO; n * h4];

        for t in (0..t_len).rev() {
            let base_h = t * n * hidden;
            let base_g = t * n * h4;
            for ni in 0..n {
                for j in 0..hidden {
                    let hi = base_h + ni * hidden + j;
                    let gi = base_g + ni * h4;
                    let i_g = gates[gi + j];
                    let f_g = gates[gi + hidden + j];
                    let g_g = gates[gi + 2 * hidden + j];
                    let o_g = gates[gi + 3 * hidden + j];
                    let tc = tanh_c[hi];
                    let dh = gy[hi] + dh_rec[ni * hidden + j];
                    let do_ = dh * tc;
                    let dc = dc_rec[ni * hidden + j] + dh * o_g * (S::ONE - tc * tc);
                    let c_prev = if t > 0 { c[(t - 1) * n * hidden + ni * hidden + j] } else { S::ZERO };
                    let di = dc * g_g;
                    let df = dc * c_prev;
                    let dg = dc * i_g;
                    dc_rec[ni * hidden + j] = dc * f_g;
                    let zr = &mut dz[ni * h4..(ni + 1) * h4];
                    zr[j] = di * i_g * (S::ONE - i_g);
                    zr[hidden + j] = df * f_g * (S::ONE - f_g);
                    zr[2 * hidden + j] = dg * (S::ONE - g_g * g_g);
                    zr[3 * hidden + j] = do_ * o_g * (S::ONE - o_g);
                }
            }
            let x_t = &xv[t * n * input_dim..(t + 1) * n * input_dim];
            gemm_tn(&mut dwih, &dz, x_t, h4, n, input_dim, true);
            if t > 0 {
                let h_prev = &out[(t - 1) * n * hidden..t * n * hidden];
                gemm_tn(&mut dwhh, &dz, h_prev, h4, n, hidden, true);
                gemm_nn(&mut dh_rec, &dz, whh, n, h4, hidden, false);
            }
            for row in dz.chunks(h4) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            let dx_t = &mut dx[t * n * input_dim..(t + 1) * n * input_dim];
            gemm_nn(dx_t, &dz, wih, n, h4, input_dim, false);
        }

        {
            let s = grads.accumulate(w_ih, dwih.len());
            for (a, g) in s.iter_mut().zip(&dwih) {
                *a += *g;
            }
        }
        {
            let s = grads.accumulate(w_hh, dwhh.len());
            for (a, g) in s.iter_mut().zip(&dwhh) {
                *a += *g;
            }
        }
        {
            let s = grads.accumulate(b, h4);
            for (a, g) in s.iter_mut().zip(&db) {
                *a += *g;
            }
        }
        let dst = slot(ng, x.0, dx.len());
        for (a, g) in dst.iter_mut().zip(&dx) {
            *a += *g;
        }
    }
}

fn slot<'a, S: Scalar>(ng: &'a mut [Option<Vec<S>>], idx: usize, len: usize) -> &'a mut [S] {
    ng[idx].get_or_insert_with(|| vec![S::ZERO; len]).as_mut_slice()
}

fn sign_of<S: Scalar>(v: S) -> S {
    if v > S::ZERO {
        S::ONE
    } else if v < S::ZERO {
        -S::ONE
    } else {
        S::ZERO
    }
}

/// Transmural (endocardial-to-epicardial) segment lengths per spoke, from a
/// flattened 168x2 frame.
fn radial_lengths<S: Scalar>(frame: &[S]) -> Vec<S> {
    let inner = 0;
    let outer = (RING_COUNT - 1) * SPOKE_COUNT;
    (0..SPOKE_COUNT)
        .map(|s| {
            let a = (inner + s) * 2;
            let b = (outer + s) * 2;
            let dx = frame[a] - frame[b];
            let dy = frame[a + 1] - frame[b + 1];
            (dx * dx + dy * dy).sqrt()
        })
        .collect()
}

/// Midwall-ring segment lengths between circumferential neighbors (with
/// wrap-around), from a flattened 168x2 frame.
fn circ_lengths<S: Scalar>(frame: &[S]) -> Vec<S> {
    let ring = MIDWALL_RING * SPOKE_COUNT;
    (0..SPOKE_COUNT)
        .map(|k| {
            let a = (ring + k) * 2;
            let b = (ring + (k + 1) % SPOKE_COUNT) * 2;
            let dx = frame[a] - frame[b];
            let dy = frame[a + 1] - frame[b + 1];
            (dx * dx + dy * dy).sqrt()
        })
        .collect()
}

/// Mean Green strain over paired reference/current segment lengths.
fn green_mean<S: Scalar>(ref_len: &[S], cur_len: &[S]) -> S {
    let two = S::from_f64(2.0);
    let inv = S::from_f64(1.0 / ref_len.len() as f64);
    let mut sum = S::ZERO;
    for (&a, &b) in ref_len.iter().zip(cur_len) {
        sum += (b * b - a * a) / (two * a * a);
    }
    sum * inv
}

fn composite_backward<S: Scalar>(gy: S, pv: &[S], cache: &CompositeCache<S>, dp: &mut [S]) {
    let fvals = 2 * LANDMARK_COUNT;
    let inv_count = S::from_f64(2.0 / LANDMARK_COUNT as f64);
    let inv_spokes = S::from_f64(1.0 / SPOKE_COUNT as f64);
    let inner = 0;
    let outer = (RING_COUNT - 1) * SPOKE_COUNT;
    let ring = MIDWALL_RING * SPOKE_COUNT;

    for t in 0..cache.frames {
        if !cache.mask[t] {
            continue;
        }
        let base = t * fvals;
        // Landmark position error.
        let k_mse = gy * cache.inv_weight * inv_count;
        for i in 0..fvals {
            dp[base + i] += k_mse * (pv[base + i] - cache.truth[base + i]);
        }
        // Radial strain term: d|ε'_R − ε_R| routes through both the
        // current-frame lengths and the frame-0 reference lengths.
        let sr = cache.sign_radial[t];
        if sr != S::ZERO {
            let k = gy * cache.inv_weight * cache.omega * sr * inv_spokes;
            for s in 0..SPOKE_COUNT {
                let a = cache.pred_ref_radial[s];
                let b = cache.cur_radial[t * SPOKE_COUNT + s];
                let ia = (inner + s) * 2;
                let ib = (outer + s) * 2;
                // ∂G/∂(current endpoints) = ±Δ_t / a².
                let ka = k / (a * a);
                let dx = (pv[base + ia] - pv[base + ib]) * ka;
                let dy = (pv[base + ia + 1] - pv[base + ib + 1]) * ka;
                dp[base + ia] += dx;
                dp[base + ia + 1] += dy;
                dp[base + ib] -= dx;
                dp[base + ib + 1] -= dy;
                // ∂G/∂(reference endpoints) = ∓(b²/a⁴)·Δ₀.
                let kr = k * (b * b) / (a * a * a * a);
                let rx = (pv[ia] - pv[ib]) * kr;
                let ry = (pv[ia + 1] - pv[ib + 1]) * kr;
                dp[ia] -= rx;
                dp[ia + 1] -= ry;
                dp[ib] += rx;
                dp[ib + 1] += ry;
            }
        }
        // Circumferential strain term over midwall segments.
        let sc = cache.sign_circ[t];
        if sc != S::ZERO {
            let k = gy * cache.inv_weight * cache.omega * sc * inv_spokes;
            for seg in 0..SPOKE_COUNT {
                let a = cache.pred_ref_circ[seg];
                let b = cache.cur_circ[t * SPOKE_COUNT + seg];
                let ia = (ring + seg) * 2;
                let ib = (ring + (seg + 1) % SPOKE_COUNT) * 2;
                let ka = k / (a * a);
                let dx = (pv[base + ia] - pv[base + ib]) * ka;
                let dy = (pv[base + ia + 1] - pv[base + ib + 1]) * ka;
                dp[base + ia] += dx;
                dp[base + ia + 1] += dy;
                dp[base + ib] -= dx;
                dp[base + ib + 1] -= dy;
                let kr = k * (b * b) / (a * a * a * a);
                let rx = (pv[ia] - pv[ib]) * kr;
                let ry = (pv[ia + 1] - pv[ib + 1]) * kr;
                dp[ia] -= rx;
                dp[ia + 1] -= ry;
                dp[ib] += rx;
                dp[ib + 1] += ry;
            }
        }
    }
}
