//! The two learned components and their plumbing: a box-regression CNN that
//! finds the myocardium in the first frame, and a convolutional-recurrent
//! tracker that regresses all 168 landmark positions for every frame of a
//! cropped cine. Includes deterministic training loops, a binary checkpoint
//! format, and the assembled crop-track-strain inference pipeline.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, LandmarkGrid, LandmarkSequence, Point2, LANDMARK_COUNT};
use crate::image::Cine;
use crate::io;
use crate::nn::{
    Adam, Gradients, LossBreakdown, LrSchedule, Mode, NodeId, ParamId, ParamKind, ParamSet, Tape,
};
use crate::phantom::{ManifestEntry, Split};
use crate::preprocess::{
    crop_pipeline, normalize_frames, pad_spatial, zscore_image, PreprocConfig, TransformRecord,
};
use crate::strain::{strain_curve, StrainCurve};

/// Box-regression network: stacked conv/bn/relu/pool blocks, then two
/// fully connected layers with dropout after the first. The output is the
/// four corner coordinates (x_min, y_min, x_max, y_max) of the tight
/// landmark extent, each normalized to [0,1] of the input size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    /// Square input side in pixels; images are zero-padded up to this.
    pub input_size: usize,
    /// Output channels per conv block (3x3, stride 1, pad 1, then 2x2 max
    /// pool).
    pub conv_filters: Vec<usize>,
    /// Width of the hidden fully connected layer.
    pub fc_hidden: usize,
    /// Dropout probability applied after the hidden fully connected layer
    /// only.
    pub dropout_p: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            input_size: 256,
            conv_filters: vec![16, 32, 64, 64],
            fc_hidden: 256,
            dropout_p: 0.2,
        }
    }
}

impl LocalizerConfig {
    /// Desk-scale profile for 64 px phantoms.
    pub fn toy() -> Self {
        LocalizerConfig { input_size: 64, ..LocalizerConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(Error::Config("conv_filters must be non-empty and positive".into()));
        }
        let down = 1usize << self.conv_filters.len();
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by {down} (one 2x pool per conv block)",
                self.input_size
            )));
        }
        if self.fc_hidden == 0 {
            return Err(Error::Config("fc_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let side = self.input_size >> self.conv_filters.len();
        self.conv_filters.last().unwrap() * side * side
    }
}

/// Landmark-tracking network: a shared per-frame conv encoder (leaky ReLU
/// 0.1, 2x2 pools) projected to a feature vector, an LSTM across the frame
/// sequence, and a linear head regressing 168 (x, y) pairs per frame,
/// normalized to [0,1] of the crop size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Square crop side in pixels the encoder consumes.
    pub input_size: usize,
    /// Output channels per encoder block (3x3, stride 1, pad 1, 2x2 pool).
    pub conv_filters: Vec<usize>,
    /// Per-frame feature vector length fed to the LSTM.
    pub feature_dim: usize,
    /// LSTM hidden width.
    pub lstm_hidden: usize,
    /// Fixed sequence length; shorter cines are padded and masked.
    pub frames: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            input_size: 128,
            conv_filters: vec![16, 32, 64, 128],
            feature_dim: 1024,
            lstm_hidden: 1024,
            frames: 20,
        }
    }
}

impl TrackerConfig {
    /// Desk-scale profile for 64 px crops.
    pub fn toy() -> Self {
        TrackerConfig {
            input_size: 64,
            conv_filters: vec![8, 16, 32],
            feature_dim: 256,
            lstm_hidden: 256,
            frames: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(Error::Config("conv_filters must be non-empty and positive".into()));
        }
        let down = 1usize << self.conv_filters.len();
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by {down} (one 2x pool per conv block)",
                self.input_size
            )));
        }
        if self.feature_dim == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config("feature_dim and lstm_hidden must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("frames must be at least 2".into()));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let side = self.input_size >> self.conv_filters.len();
        self.conv_filters.last().unwrap() * side * side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Localizer,
    Tracker,
}

/// Optimizer bookkeeping persisted in checkpoints. Moment estimates are
/// deliberately not stored; a resumed optimizer restarts them from zero
/// while keeping the step count and schedule position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub step_count: u64,
}

pub const CHECKPOINT_MAGIC: &[u8; 13] = b"TAGSTRAINCKPT";

#[derive(Serialize, Deserialize)]
struct CheckpointParamRepr {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: ModelKind,
    config: serde_json::Value,
    epoch: u64,
    seed: u64,
    optimizer: OptimizerState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<crate::io::Provenance>,
    params: Vec<CheckpointParamRepr>,
}

/// A trained model: weights plus everything needed to rebuild the network
/// and resume the schedule. Serializes to magic + length-prefixed JSON
/// header + concatenated little-endian f32 parameter data in header order.
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub epoch: u64,
    pub seed: u64,
    pub optimizer: OptimizerState,
    /// Tool version and effective run configuration, attached by the
    /// producing command.
    pub provenance: Option<crate::io::Provenance>,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest: Vec<CheckpointParamRepr> = self
            .params
            .ids()
            .map(|id| CheckpointParamRepr {
                name: self.params.name(id).to_string(),
                shape: self.params.shape(id).to_vec(),
                kind: self.params.kind(id),
            })
            .collect();
        let header = CheckpointHeader {
            kind: self.kind,
            config: self.config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            optimizer: self.optimizer,
            provenance: self.provenance.clone(),
            params: manifest,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(
            CHECKPOINT_MAGIC.len() + 8 + header_bytes.len() + 4 * self.params.total_values(),
        );
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for id in self.params.ids() {
            for &v in self.params.value(id) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let m = CHECKPOINT_MAGIC.len();
        if bytes.len() < m + 8 || &bytes[..m] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[m..m + 8].try_into().unwrap()) as usize;
        if hlen > 16 << 20 || bytes.len() < m + 8 + hlen {
            return Err(Error::Format("checkpoint header length out of range".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[m + 8..m + 8 + hlen])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut params: ParamSet<f32> = ParamSet::new();
        let mut off = m + 8 + hlen;
        for p in &header.params {
            let numel: usize = p.shape.iter().product();
            let need = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("checkpoint parameter size overflow".into()))?;
            if bytes.len() < off + need {
                return Err(Error::Format(format!(
                    "checkpoint truncated inside parameter '{}'",
                    p.name
                )));
            }
            let values: Vec<f32> = bytes[off..off + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += need;
            match p.kind {
                ParamKind::Learnable => params.add_param(&p.name, p.shape.clone(), values)?,
                ParamKind::Buffer => params.add_buffer(&p.name, p.shape.clone(), values)?,
            };
        }
        if off != bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} trailing bytes after parameters",
                bytes.len() - off
            )));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            epoch: header.epoch,
            seed: header.seed,
            optimizer: header.optimizer,
            provenance: header.provenance,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = io::create_file(path)?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn localizer_config(&self) -> Result<LocalizerConfig> {
        if self.kind != ModelKind::Localizer {
            return Err(Error::Config("checkpoint does not hold a localizer".into()));
        }
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Format(format!("localizer config in checkpoint: {e}")))
    }

    pub fn tracker_config(&self) -> Result<TrackerConfig> {
        if self.kind != ModelKind::Tracker {
            return Err(Error::Config("checkpoint does not hold a tracker".into()));
        }
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Format(format!("tracker config in checkpoint: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Network graphs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct ConvBnIds {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    rmean: ParamId,
    rvar: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.1;
const LOCALIZER_INIT_STREAM: u64 = 0x10ca1;
const TRACKER_INIT_STREAM: u64 = 0x7aac;

fn normal_vec(rng: &mut impl Rng, len: usize, std: f64) -> Vec<f32> {
    let dist = Normal::new(0.0f64, std).expect("std must be positive");
    (0..len).map(|_| dist.sample(rng) as f32).collect()
}

fn uniform_vec_f32(rng: &mut impl Rng, len: usize, bound: f64) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-bound..bound) as f32).collect()
}

/// Resolves the localizer's parameters by name and records its forward
/// graph on a tape.
pub struct LocalizerNet {
    cfg: LocalizerConfig,
    blocks: Vec<ConvBnIds>,
    fc0: LinearIds,
    fc1: LinearIds,
}

impl LocalizerNet {
    /// Fresh network with randomized weights drawn from `seed`.
    pub fn init(cfg: &LocalizerConfig, seed: u64) -> Result<(Self, ParamSet<f32>)> {
        cfg.validate()?;
        let mut rng = crate::rng::stream_rng(seed, LOCALIZER_INIT_STREAM);
        let mut params: ParamSet<f32> = ParamSet::new();
        let mut blocks = Vec::new();
        let mut c_in = 1usize;
        for (i, &c_out) in cfg.conv_filters.iter().enumerate() {
            let fan_in = c_in * 9;
            let w = params.add_param(
                &format!("conv{i}.weight"),
                vec![c_out, c_in, 3, 3],
                normal_vec(&mut rng, c_out * c_in * 9, (2.0 / fan_in as f64).sqrt()),
            )?;
            let b = params.add_param(&format!("conv{i}.bias"), vec![c_out], vec![0.0; c_out])?;
            let gamma = params.add_param(&format!("bn{i}.gamma"), vec![c_out], vec![1.0; c_out])?;
            let beta = params.add_param(&format!("bn{i}.beta"), vec![c_out], vec![0.0; c_out])?;
            let rmean =
                params.add_buffer(&format!("bn{i}.running_mean"), vec![c_out], vec![0.0; c_out])?;
            let rvar =
                params.add_buffer(&format!("bn{i}.running_var"), vec![c_out], vec![1.0; c_out])?;
            blocks.push(ConvBnIds { w, b, gamma, beta, rmean, rvar });
            c_in = c_out;
        }
        let flat = cfg.flat_dim();
        let fc0_w = params.add_param(
            "fc0.weight",
            vec![cfg.fc_hidden, flat],
            normal_vec(&mut rng, cfg.fc_hidden * flat, (2.0 / flat as f64).sqrt()),
        )?;
        let fc0_b = params.add_param("fc0.bias", vec![cfg.fc_hidden], vec![0.0; cfg.fc_hidden])?;
        let fc1_w = params.add_param(
            "fc1.weight",
            vec![4, cfg.fc_hidden],
            normal_vec(&mut rng, 4 * cfg.fc_hidden, 0.01),
        )?;
        // Start from a moderately sized centered box so early predictions
        // are valid geometry.
        let fc1_b = params.add_param("fc1.bias", vec![4], vec![0.25, 0.25, 0.75, 0.75])?;
        let net = LocalizerNet {
            cfg: cfg.clone(),
            blocks,
            fc0: LinearIds { w: fc0_w, b: fc0_b },
            fc1: LinearIds { w: fc1_w, b: fc1_b },
        };
        Ok((net, params))
    }

    /// Binds to an existing parameter set (e.g. a loaded checkpoint).
    pub fn from_params(cfg: &LocalizerConfig, params: &ParamSet<f32>) -> Result<Self> {
        cfg.validate()?;
        let find = |name: String| {
            params.id_of(&name).ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
        };
        let mut blocks = Vec::new();
        for i in 0..cfg.conv_filters.len() {
            blocks.push(ConvBnIds {
                w: find(format!("conv{i}.weight"))?,
                b: find(format!("conv{i}.bias"))?,
                gamma: find(format!("bn{i}.gamma"))?,
                beta: find(format!("bn{i}.beta"))?,
                rmean: find(format!("bn{i}.running_mean"))?,
                rvar: find(format!("bn{i}.running_var"))?,
            });
        }
        let net = LocalizerNet {
            cfg: cfg.clone(),
            blocks,
            fc0: LinearIds { w: find("fc0.weight".into())?, b: find("fc0.bias".into())? },
            fc1: LinearIds { w: find("fc1.weight".into())?, b: find("fc1.bias".into())? },
        };
        let expect = [4usize, cfg.fc_hidden];
        if params.shape(net.fc1.w) != expect {
            return Err(Error::Shape(format!(
                "fc1.weight shape {:?} does not match config {expect:?}",
                params.shape(net.fc1.w)
            )));
        }
        Ok(net)
    }

    /// Records the forward graph for a batch [N, 1, S, S] -> [N, 4].
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &mut ParamSet<f32>,
        x: NodeId,
    ) -> Result<NodeId> {
        let n = tape.shape(x)[0];
        let mut h = x;
        for blk in &self.blocks {
            let c = tape.conv2d(params, h, blk.w, blk.b, 1, 1)?;
            let bn = tape.batch_norm2d(
                params, c, blk.gamma, blk.beta, blk.rmean, blk.rvar, BN_MOMENTUM, BN_EPS,
            )?;
            let r = tape.relu(bn);
            h = tape.max_pool2d(r, 2)?;
        }
        let flat = tape.reshape(h, vec![n, self.cfg.flat_dim()])?;
        let fc0 = tape.linear(params, flat, self.fc0.w, self.fc0.b)?;
        let a0 = tape.relu(fc0);
        let d0 = tape.dropout(a0, self.cfg.dropout_p)?;
        tape.linear(params, d0, self.fc1.w, self.fc1.b)
    }
}

/// Resolves the tracker's parameters by name and records its forward graph.
pub struct TrackerNet {
    cfg: TrackerConfig,
    encoder: Vec<LinearIds>,
    proj: LinearIds,
    lstm_w_ih: ParamId,
    lstm_w_hh: ParamId,
    lstm_b: ParamId,
    head: LinearIds,
}

impl TrackerNet {
    pub fn init(cfg: &TrackerConfig, seed: u64) -> Result<(Self, ParamSet<f32>)> {
        cfg.validate()?;
        let mut rng = crate::rng::stream_rng(seed, TRACKER_INIT_STREAM);
        let mut params: ParamSet<f32> = ParamSet::new();
        let mut encoder = Vec::new();
        let mut c_in = 1usize;
        for (i, &c_out) in cfg.conv_filters.iter().enumerate() {
            let fan_in = c_in * 9;
            let w = params.add_param(
                &format!("enc{i}.weight"),
                vec![c_out, c_in, 3, 3],
                normal_vec(&mut rng, c_out * c_in * 9, (2.0 / fan_in as f64).sqrt()),
            )?;
            let b = params.add_param(&format!("enc{i}.bias"), vec![c_out], vec![0.0; c_out])?;
            encoder.push(LinearIds { w, b });
            c_in = c_out;
        }
        let flat = cfg.flat_dim();
        let proj_w = params.add_param(
            "proj.weight",
            vec![cfg.feature_dim, flat],
            normal_vec(&mut rng, cfg.feature_dim * flat, (2.0 / flat as f64).sqrt()),
        )?;
        let proj_b =
            params.add_param("proj.bias", vec![cfg.feature_dim], vec![0.0; cfg.feature_dim])?;
        let h = cfg.lstm_hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let w_ih = params.add_param(
            "lstm.w_ih",
            vec![4 * h, cfg.feature_dim],
            uniform_vec_f32(&mut rng, 4 * h * cfg.feature_dim, bound),
        )?;
        let w_hh = params.add_param(
            "lstm.w_hh",
            vec![4 * h, h],
            uniform_vec_f32(&mut rng, 4 * h * h, bound),
        )?;
        let mut b_init = uniform_vec_f32(&mut rng, 4 * h, bound);
        // Open the forget gates at the start so early gradients reach back
        // through time.
        for v in &mut b_init[h..2 * h] {
            *v += 1.0;
        }
        let lstm_b = params.add_param("lstm.bias", vec![4 * h], b_init)?;
        let head_w = params.add_param(
            "head.weight",
            vec![2 * LANDMARK_COUNT, h],
            normal_vec(&mut rng, 2 * LANDMARK_COUNT * h, 0.01),
        )?;
        let head_b = params.add_param(
            "head.bias",
            vec![2 * LANDMARK_COUNT],
            vec![0.5; 2 * LANDMARK_COUNT],
        )?;
        let net = TrackerNet {
            cfg: cfg.clone(),
            encoder,
            proj: LinearIds { w: proj_w, b: proj_b },
            lstm_w_ih: w_ih,
            lstm_w_hh: w_hh,
            lstm_b,
            head: LinearIds { w: head_w, b: head_b },
        };
        Ok((net, params))
    }

    pub fn from_params(cfg: &TrackerConfig, params: &ParamSet<f32>) -> Result<Self> {
        cfg.validate()?;
        let find = |name: String| {
            params.id_of(&name).ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
        };
        let mut encoder = Vec::new();
        for i in 0..cfg.conv_filters.len() {
            encoder.push(LinearIds {
                w: find(format!("enc{i}.weight"))?,
                b: find(format!("enc{i}.bias"))?,
            });
        }
        let net = TrackerNet {
            cfg: cfg.clone(),
            encoder,
            proj: LinearIds { w: find("proj.weight".into())?, b: find("proj.bias".into())? },
            lstm_w_ih: find("lstm.w_ih".into())?,
            lstm_w_hh: find("lstm.w_hh".into())?,
            lstm_b: find("lstm.bias".into())?,
            head: LinearIds { w: find("head.weight".into())?, b: find("head.bias".into())? },
        };
        let expect = [4 * cfg.lstm_hidden, cfg.feature_dim];
        if params.shape(net.lstm_w_ih) != expect {
            return Err(Error::Shape(format!(
                "lstm.w_ih shape {:?} does not match config {expect:?}",
                params.shape(net.lstm_w_ih)
            )));
        }
        Ok(net)
    }

    fn head_bias_id(&self) -> ParamId {
        self.head.b
    }

    /// Records the forward graph. Input is the frame-major stack
    /// [T*N, 1, S, S] (frame t of item n at index t*N + n); output is
    /// [T, N, 336] of normalized coordinates.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &mut ParamSet<f32>,
        x: NodeId,
        t_len: usize,
        n: usize,
    ) -> Result<NodeId> {
        let tn = tape.shape(x)[0];
        if tn != t_len * n {
            return Err(Error::Shape(format!("input batch {tn} != frames {t_len} * items {n}")));
        }
        let mut h = x;
        for blk in &self.encoder {
            let c = tape.conv2d(params, h, blk.w, blk.b, 1, 1)?;
            let a = tape.leaky_relu(c, LEAKY_SLOPE);
            h = tape.max_pool2d(a, 2)?;
        }
        let flat = tape.reshape(h, vec![tn, self.cfg.flat_dim()])?;
        let proj = tape.linear(params, flat, self.proj.w, self.proj.b)?;
        let feat = tape.leaky_relu(proj, LEAKY_SLOPE);
        let seq_in = tape.reshape(feat, vec![t_len, n, self.cfg.feature_dim])?;
        let seq_out =
            tape.lstm_sequence(params, seq_in, self.lstm_w_ih, self.lstm_w_hh, self.lstm_b)?;
        let flat_out = tape.reshape(seq_out, vec![tn, self.cfg.lstm_hidden])?;
        let coords = tape.linear(params, flat_out, self.head.w, self.head.b)?;
        tape.reshape(coords, vec![t_len, n, 2 * LANDMARK_COUNT])
    }
}

// ---------------------------------------------------------------------------
// Dataset preparation
// ---------------------------------------------------------------------------

/// One localizer training example: the z-scored padded first frame and the
/// tight landmark box, both in padded-image coordinates.
#[derive(Debug, Clone)]
pub struct LocalizerSample {
    pub case_id: String,
    /// Z-scored first frame, row-major [S*S].
    pub pixels: Vec<f32>,
    /// Tight box corners normalized to [0,1] of the input size. This is
    /// the regression target; box expansion is an inference-time step and
    /// is never applied here.
    pub target: [f32; 4],
    /// Tight box in padded-image pixels (for IoU evaluation).
    pub truth_box: BoundingBox,
}

/// The regression target for a tight box in padded-image pixels: corners
/// normalized by the input size, unexpanded.
pub fn localizer_target(tight_box: &BoundingBox, input_size: usize) -> [f32; 4] {
    let s = input_size as f64;
    [
        (tight_box.x_min / s) as f32,
        (tight_box.y_min / s) as f32,
        (tight_box.x_max / s) as f32,
        (tight_box.y_max / s) as f32,
    ]
}

fn shift_box(b: &BoundingBox, off: [usize; 2]) -> Result<BoundingBox> {
    BoundingBox::new(
        b.x_min + off[1] as f64,
        b.y_min + off[0] as f64,
        b.x_max + off[1] as f64,
        b.y_max + off[0] as f64,
    )
}

/// Builds a localizer sample from a raw cine and its tight first-frame box
/// (original-image coordinates).
pub fn prep_localizer_sample(
    case_id: &str,
    cine: &Cine,
    tight_box: &BoundingBox,
    input_size: usize,
) -> Result<LocalizerSample> {
    let (padded, off) = pad_spatial(cine, input_size, input_size)?;
    let frame = zscore_image(padded.frame(0));
    let truth_box = shift_box(tight_box, off)?;
    Ok(LocalizerSample {
        case_id: case_id.to_string(),
        pixels: frame.data().to_vec(),
        target: localizer_target(&truth_box, input_size),
        truth_box,
    })
}

/// One tracker training example: cropped z-scored frames and the truth
/// landmarks mapped into crop pixels.
#[derive(Debug, Clone)]
pub struct TrackerSample {
    pub case_id: String,
    /// Frames after crop/resample and normalization, [T * S * S].
    pub frames: Vec<f32>,
    /// Truth landmark coordinates in crop pixels, [T * 336]; zeros at
    /// masked-out frames.
    pub truth_crop: Vec<f32>,
    /// True for real (non-padded) frames.
    pub mask: Vec<bool>,
    pub record: TransformRecord,
    /// Truth landmarks in original-image coordinates (real frames only).
    pub truth_original: LandmarkSequence,
    pub pixel_spacing_mm: f64,
}

/// Which boxes drive the training crop: the tight truth extent (teacher
/// forcing, the default) or externally supplied boxes per case (e.g. from a
/// trained localizer).
#[derive(Debug, Clone, Copy)]
pub enum CropSource<'a> {
    TruthBox,
    PredictedBoxes(&'a BTreeMap<String, BoundingBox>),
}

/// Builds a tracker sample: pad, frame-normalize, expand the chosen box,
/// crop/resample, and map truth landmarks into crop pixels.
pub fn prep_tracker_sample(
    case_id: &str,
    cine: &Cine,
    truth: &LandmarkSequence,
    tight_box: &BoundingBox,
    preproc: &PreprocConfig,
    crop_source: CropSource,
) -> Result<TrackerSample> {
    let (padded, off) = pad_spatial(cine, preproc.pad_to, preproc.pad_to)?;
    let (normed, mask) = normalize_frames(&padded, preproc.frame_target)?;
    let base_box = match crop_source {
        CropSource::TruthBox => *tight_box,
        CropSource::PredictedBoxes(map) => *map
            .get(case_id)
            .ok_or_else(|| Error::Config(format!("no predicted box for case '{case_id}'")))?,
    };
    let padded_box = shift_box(&base_box, off)?;
    let expanded =
        padded_box.expand(preproc.expand_fraction, preproc.pad_to as f64, preproc.pad_to as f64)?;
    let (crop, record) = crop_pipeline(&normed, &expanded, preproc, off)?;

    let t_target = preproc.frame_target;
    let mut truth_crop = vec![0.0f32; t_target * 2 * LANDMARK_COUNT];
    let real_frames = truth.frames().len().min(t_target);
    for t in 0..real_frames {
        let pts = record.to_crop(truth.frame(t).points())?;
        for (i, p) in pts.iter().enumerate() {
            truth_crop[(t * LANDMARK_COUNT + i) * 2] = p.x as f32;
            truth_crop[(t * LANDMARK_COUNT + i) * 2 + 1] = p.y as f32;
        }
    }
    let frames: Vec<f32> = crop.frames().iter().flat_map(|f| f.data().iter().copied()).collect();
    Ok(TrackerSample {
        case_id: case_id.to_string(),
        frames,
        truth_crop,
        mask,
        record,
        truth_original: truth.clone(),
        pixel_spacing_mm: cine.pixel_spacing_mm,
    })
}

/// Samples grouped by their manifest split.
pub struct SplitSamples<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> SplitSamples<T> {
    fn push(&mut self, split: Split, item: T) {
        match split {
            Split::Train => self.train.push(item),
            Split::Val => self.val.push(item),
            Split::Test => self.test.push(item),
        }
    }
}

impl<T> Default for SplitSamples<T> {
    fn default() -> Self {
        SplitSamples { train: Vec::new(), val: Vec::new(), test: Vec::new() }
    }
}

/// Loads every manifest case as a localizer sample, grouped by split.
pub fn load_localizer_dataset(
    root: &Path,
    entries: &[ManifestEntry],
    input_size: usize,
) -> Result<SplitSamples<LocalizerSample>> {
    let mut out = SplitSamples::default();
    for e in entries {
        let cine = io::read_cine(&root.join(&e.cine_path))?;
        let sample = prep_localizer_sample(&e.case_id, &cine, &e.bbox, input_size)?;
        out.push(e.split, sample);
    }
    Ok(out)
}

/// Loads every manifest case as a tracker sample, grouped by split.
pub fn load_tracker_dataset(
    root: &Path,
    entries: &[ManifestEntry],
    preproc: &PreprocConfig,
    crop_source: CropSource,
) -> Result<SplitSamples<TrackerSample>> {
    let mut out = SplitSamples::default();
    for e in entries {
        let cine = io::read_cine(&root.join(&e.cine_path))?;
        let doc = io::read_landmarks(&root.join(&e.landmarks_path))?;
        let sample =
            prep_tracker_sample(&e.case_id, &cine, &doc.sequence, &e.bbox, preproc, crop_source)?;
        out.push(e.split, sample);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Knobs shared by both training loops.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Strain-term weight in the tracking loss.
    pub omega: f64,
    /// Override the default base learning rate.
    pub base_lr: Option<f64>,
    /// Override the default decay schedule.
    pub schedule: Option<LrSchedule>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { batch_size: 16, omega: 1.0, base_lr: None, schedule: None }
    }
}

/// A finished training run: the checkpoint plus one JSON metrics object per
/// epoch and split.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<serde_json::Value>,
}

pub const LOCALIZER_BASE_LR: f64 = 1e-3;
pub const TRACKER_BASE_LR: f64 = 1e-4;

/// Localizer decay: hold 10 epochs, then shrink every 5.
pub fn localizer_schedule() -> LrSchedule {
    LrSchedule::halving_sqrt(10, 5)
}

/// Tracker decay: shrink every 10 epochs from the start.
pub fn tracker_schedule() -> LrSchedule {
    LrSchedule::halving_sqrt(0, 10)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn train_ctx(epoch: usize, step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Train(msg) => Error::Train(format!("epoch {epoch} step {step}: {msg}")),
        other => other,
    }
}

/// Trains the box regressor with Adam (base 1e-3, stepped decay) on
/// tight-box corner targets. Emits one metrics object per epoch per split:
/// train loss and validation loss plus mean IoU.
pub fn train_localizer(
    data: &SplitSamples<LocalizerSample>,
    cfg: &LocalizerConfig,
    epochs: usize,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    if data.train.is_empty() {
        return Err(Error::Train("train split is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let (net, mut params) = LocalizerNet::init(cfg, seed)?;
    let base_lr = opts.base_lr.unwrap_or(LOCALIZER_BASE_LR);
    let schedule = opts.schedule.unwrap_or_else(localizer_schedule);
    let mut opt = Adam::with_schedule(base_lr, schedule);
    let mut metrics = Vec::new();
    let s = cfg.input_size;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng = crate::rng::stream_rng(seed, 0xE00 + epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut lr = opt.lr_for_epoch(epoch);
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            let n = chunk.len();
            let mut x = Vec::with_capacity(n * s * s);
            let mut target = Vec::with_capacity(n * 4);
            for &i in chunk {
                x.extend_from_slice(&data.train[i].pixels);
                target.extend_from_slice(&data.train[i].target);
            }
            let tape_seed = crate::rng::derive_seed(seed, ((epoch as u64) << 24) | step as u64);
            let mut tape = Tape::new(Mode::Train, tape_seed);
            let xn = tape.input(&[n, 1, s, s], x)?;
            let y = net.forward(&mut tape, &mut params, xn)?;
            let loss = tape.mse_loss(y, target)?;
            let loss_val = tape.scalar(loss) as f64;
            if !loss_val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss {loss_val} at epoch {epoch}, step {step}"
                )));
            }
            let grads = tape.backward(loss, &params).map_err(train_ctx(epoch, step))?;
            lr = opt.step(&mut params, &grads, epoch);
            epoch_loss += loss_val * n as f64;
            seen += n;
        }
        let train_loss = epoch_loss / seen as f64;
        metrics.push(json!({"epoch": epoch, "split": "train", "loss": train_loss, "lr": lr}));

        if !data.val.is_empty() {
            let (val_loss, mean_iou) =
                eval_localizer(&net, &mut params, &data.val, cfg, opts.batch_size)?;
            metrics.push(json!({
                "epoch": epoch, "split": "val", "loss": val_loss, "mean_iou": mean_iou, "lr": lr
            }));
        }
    }

    let checkpoint = Checkpoint {
        kind: ModelKind::Localizer,
        config: serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
        epoch: epochs as u64,
        seed,
        optimizer: OptimizerState { base_lr, schedule, step_count: opt.step_count() },
        provenance: None,
        params,
    };
    Ok(TrainRun { checkpoint, metrics })
}

/// Validation loss and mean IoU of denormalized predictions against tight
/// truth boxes. Degenerate predictions score IoU 0.
pub fn eval_localizer(
    net: &LocalizerNet,
    params: &mut ParamSet<f32>,
    samples: &[LocalizerSample],
    cfg: &LocalizerConfig,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Train("cannot evaluate an empty sample set".into()));
    }
    let s = cfg.input_size;
    let mut loss_sum = 0.0;
    let mut iou_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let n = chunk.len();
        let mut x = Vec::with_capacity(n * s * s);
        let mut target = Vec::with_capacity(n * 4);
        for sm in chunk {
            x.extend_from_slice(&sm.pixels);
            target.extend_from_slice(&sm.target);
        }
        let mut tape = Tape::new(Mode::Eval, 0);
        let xn = tape.input(&[n, 1, s, s], x)?;
        let y = net.forward(&mut tape, params, xn)?;
        let loss = tape.mse_loss(y, target)?;
        loss_sum += tape.scalar(loss) as f64 * n as f64;
        let yv = tape.value(y).to_vec();
        for (row, sm) in yv.chunks(4).zip(chunk) {
            iou_sum += match denormalize_box(row, s) {
                Ok(b) => b.iou(&sm.truth_box),
                Err(_) => 0.0,
            };
        }
    }
    Ok((loss_sum / samples.len() as f64, iou_sum / samples.len() as f64))
}

fn denormalize_box(row: &[f32], input_size: usize) -> Result<BoundingBox> {
    let s = input_size as f64;
    BoundingBox::new(row[0] as f64 * s, row[1] as f64 * s, row[2] as f64 * s, row[3] as f64 * s)
}

/// Per-epoch validation summary for the tracker.
#[derive(Debug, Clone, Copy)]
pub struct TrackerValMetrics {
    pub loss: f64,
    pub mse_position: f64,
    pub radial_term: f64,
    pub circ_term: f64,
    /// Mean / sd of (predicted - truth) midwall circumferential strain at
    /// the truth end-systolic frame.
    pub es_circ_bias: f64,
    pub es_circ_sd: f64,
    pub es_radial_bias: f64,
    pub es_radial_sd: f64,
    /// Mean RMS landmark distance at end-systole, original-image pixels.
    pub rms_es_px: f64,
}

/// Trains the landmark tracker end-to-end with the composite loss (Adam,
/// base 1e-4, decay every 10 epochs). The regression head's bias starts at
/// the mean normalized landmark layout of the training split so the
/// network begins from anatomy-shaped output.
pub fn train_tracker(
    data: &SplitSamples<TrackerSample>,
    cfg: &TrackerConfig,
    epochs: usize,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    if data.train.is_empty() {
        return Err(Error::Train("train split is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let t_len = cfg.frames;
    let s = cfg.input_size;
    for sm in data.train.iter().chain(&data.val) {
        if sm.mask.len() != t_len || sm.frames.len() != t_len * s * s {
            return Err(Error::Shape(format!(
                "sample '{}' does not match tracker frames {t_len} size {s}",
                sm.case_id
            )));
        }
    }
    let (net, mut params) = TrackerNet::init(cfg, seed)?;

    // Warm-start the head at the mean normalized landmark layout.
    {
        let mut acc = vec![0.0f64; 2 * LANDMARK_COUNT];
        let mut count = 0usize;
        for sm in &data.train {
            for t in 0..t_len {
                if !sm.mask[t] {
                    continue;
                }
                for i in 0..2 * LANDMARK_COUNT {
                    acc[i] += sm.truth_crop[t * 2 * LANDMARK_COUNT + i] as f64;
                }
                count += 1;
            }
        }
        let bias = params.value_mut(net.head_bias_id());
        for i in 0..2 * LANDMARK_COUNT {
            bias[i] = (acc[i] / (count as f64 * s as f64)) as f32;
        }
    }

    let base_lr = opts.base_lr.unwrap_or(TRACKER_BASE_LR);
    let schedule = opts.schedule.unwrap_or_else(tracker_schedule);
    let mut opt = Adam::with_schedule(base_lr, schedule);
    let mut metrics = Vec::new();

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng = crate::rng::stream_rng(seed, 0x500 + epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let (mut e_total, mut e_mse, mut e_rad, mut e_circ) = (0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        let mut lr = opt.lr_for_epoch(epoch);
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            let n = chunk.len();
            let samples: Vec<&TrackerSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let tape_seed = crate::rng::derive_seed(seed, ((epoch as u64) << 24) | step as u64);
            let mut tape = Tape::new(Mode::Train, tape_seed);
            let (loss, _, breakdowns) =
                tracker_loss_graph(&net, &mut tape, &mut params, &samples, cfg, opts.omega)?;
            let loss_val = tape.scalar(loss) as f64;
            if !loss_val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss {loss_val} at epoch {epoch}, step {step}"
                )));
            }
            let grads: Gradients<f32> =
                tape.backward(loss, &params).map_err(train_ctx(epoch, step))?;
            lr = opt.step(&mut params, &grads, epoch);
            for b in &breakdowns {
                e_total += b.total;
                e_mse += b.mse_position;
                e_rad += b.radial_term;
                e_circ += b.circ_term;
            }
            seen += n;
        }
        let inv = 1.0 / seen as f64;
        metrics.push(json!({
            "epoch": epoch, "split": "train",
            "loss": e_total * inv, "mse_position": e_mse * inv,
            "radial_term": e_rad * inv, "circ_term": e_circ * inv,
            "lr": lr
        }));

        if !data.val.is_empty() {
            let v = eval_tracker(&net, &mut params, &data.val, cfg, opts)?;
            metrics.push(json!({
                "epoch": epoch, "split": "val",
                "loss": v.loss, "mse_position": v.mse_position,
                "radial_term": v.radial_term, "circ_term": v.circ_term,
                "es_circ_bias": v.es_circ_bias, "es_circ_sd": v.es_circ_sd,
                "es_radial_bias": v.es_radial_bias, "es_radial_sd": v.es_radial_sd,
                "rms_es_px": v.rms_es_px,
                "lr": lr
            }));
        }
    }

    let checkpoint = Checkpoint {
        kind: ModelKind::Tracker,
        config: serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
        epoch: epochs as u64,
        seed,
        optimizer: OptimizerState { base_lr, schedule, step_count: opt.step_count() },
        provenance: None,
        params,
    };
    Ok(TrainRun { checkpoint, metrics })
}

/// Records the batched tracker loss: forward, per-item coordinate scaling
/// to crop pixels, per-item composite loss, averaged. Returns the loss
/// node, the [T, N, 336] output node, and per-item breakdowns.
fn tracker_loss_graph(
    net: &TrackerNet,
    tape: &mut Tape<f32>,
    params: &mut ParamSet<f32>,
    samples: &[&TrackerSample],
    cfg: &TrackerConfig,
    omega: f64,
) -> Result<(NodeId, NodeId, Vec<LossBreakdown>)> {
    let t_len = cfg.frames;
    let s = cfg.input_size;
    let n = samples.len();
    let mut x = vec![0.0f32; t_len * n * s * s];
    for (ni, sm) in samples.iter().enumerate() {
        for t in 0..t_len {
            let dst = (t * n + ni) * s * s;
            let src = t * s * s;
            x[dst..dst + s * s].copy_from_slice(&sm.frames[src..src + s * s]);
        }
    }
    let xn = tape.input(&[t_len * n, 1, s, s], x)?;
    let y = net.forward(tape, params, xn, t_len, n)?;
    let mut losses = Vec::with_capacity(n);
    let mut breakdowns = Vec::with_capacity(n);
    for (ni, sm) in samples.iter().enumerate() {
        let item = tape.slice_batch(y, ni)?;
        let px = tape.scale(item, s as f64);
        let (loss, bd) = tape.composite_tracking_loss(px, &sm.truth_crop, omega, &sm.mask)?;
        losses.push(loss);
        breakdowns.push(bd);
    }
    let total = tape.scaled_sum(&losses, 1.0 / n as f64)?;
    Ok((total, y, breakdowns))
}

/// Evaluation-mode metrics over a sample set: composite-loss decomposition
/// plus end-systolic strain agreement in original-image space.
pub fn eval_tracker(
    net: &TrackerNet,
    params: &mut ParamSet<f32>,
    samples: &[TrackerSample],
    cfg: &TrackerConfig,
    opts: &TrainOptions,
) -> Result<TrackerValMetrics> {
    if samples.is_empty() {
        return Err(Error::Train("cannot evaluate an empty sample set".into()));
    }
    let t_len = cfg.frames;
    let s = cfg.input_size;
    let (mut loss, mut mse, mut rad, mut circ) = (0.0, 0.0, 0.0, 0.0);
    let mut circ_diffs = Vec::new();
    let mut radial_diffs = Vec::new();
    let mut rms_vals = Vec::new();
    let step = opts.batch_size.max(1);
    for chunk_start in (0..samples.len()).step_by(step) {
        let chunk = &samples[chunk_start..(chunk_start + step).min(samples.len())];
        let refs: Vec<&TrackerSample> = chunk.iter().collect();
        let mut tape = Tape::new(Mode::Eval, 0);
        let (_, y, breakdowns) =
            tracker_loss_graph(net, &mut tape, params, &refs, cfg, opts.omega)?;
        for (ni, sm) in chunk.iter().enumerate() {
            let b = &breakdowns[ni];
            loss += b.total;
            mse += b.mse_position;
            rad += b.radial_term;
            circ += b.circ_term;

            let pred = predicted_sequence_from_graph(&tape, y, sm, s, t_len, ni)?;
            let truth_curve = strain_curve(&sm.truth_original)?;
            let pred_curve = strain_curve(&pred)?;
            let es = truth_curve.es_frame;
            if es < pred_curve.per_frame.len() {
                let pc = &pred_curve.per_frame[es];
                let tc = &truth_curve.per_frame[es];
                circ_diffs.push(pc.eps_c_midwall - tc.eps_c_midwall);
                radial_diffs.push(pc.eps_r - tc.eps_r);
                let mut sq = 0.0;
                let (pf, tf) = (pred.frame(es), sm.truth_original.frame(es));
                for (a, b2) in pf.points().iter().zip(tf.points()) {
                    sq += a.distance_sq(b2);
                }
                rms_vals.push((sq / LANDMARK_COUNT as f64).sqrt());
            }
        }
    }
    let n = samples.len() as f64;
    Ok(TrackerValMetrics {
        loss: loss / n,
        mse_position: mse / n,
        radial_term: rad / n,
        circ_term: circ / n,
        es_circ_bias: if circ_diffs.is_empty() { 0.0 } else { mean(&circ_diffs) },
        es_circ_sd: sd(&circ_diffs),
        es_radial_bias: if radial_diffs.is_empty() { 0.0 } else { mean(&radial_diffs) },
        es_radial_sd: sd(&radial_diffs),
        rms_es_px: if rms_vals.is_empty() { 0.0 } else { mean(&rms_vals) },
    })
}

/// Reads one item's predicted landmarks out of a recorded [T, N, 336]
/// output node and maps them to original-image coordinates (real frames
/// only).
fn predicted_sequence_from_graph(
    tape: &Tape<f32>,
    y: NodeId,
    sm: &TrackerSample,
    s: usize,
    t_len: usize,
    item: usize,
) -> Result<LandmarkSequence> {
    let yv = tape.value(y);
    let n = tape.shape(y)[1];
    let real = sm.truth_original.frames().len().min(t_len);
    let mut frames = Vec::with_capacity(real);
    for t in 0..real {
        let base = (t * n + item) * 2 * LANDMARK_COUNT;
        let crop_pts: Vec<Point2> = (0..LANDMARK_COUNT)
            .map(|i| {
                Point2::new(
                    yv[base + 2 * i] as f64 * s as f64,
                    yv[base + 2 * i + 1] as f64 * s as f64,
                )
            })
            .collect();
        let orig = sm.record.to_original(&crop_pts)?;
        frames.push(LandmarkGrid::from_points(orig)?);
    }
    LandmarkSequence::new(frames)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// A loaded localizer ready for inference.
pub struct Localizer {
    pub cfg: LocalizerConfig,
    net: LocalizerNet,
    pub params: ParamSet<f32>,
}

impl Localizer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.localizer_config()?;
        let net = LocalizerNet::from_params(&cfg, &ckpt.params)?;
        Ok(Localizer { cfg, net, params: ckpt.params.clone() })
    }

    /// Predicts the tight box for one z-scored padded frame, in padded
    /// pixels. Errors if the regressed corners are not a valid box.
    pub fn predict_box(&mut self, frame: &[f32]) -> Result<BoundingBox> {
        let s = self.cfg.input_size;
        if frame.len() != s * s {
            return Err(Error::Shape(format!("frame has {} px, expected {s}x{s}", frame.len())));
        }
        let mut tape = Tape::new(Mode::Eval, 0);
        let xn = tape.input(&[1, 1, s, s], frame.to_vec())?;
        let y = self.net.forward(&mut tape, &mut self.params, xn)?;
        let row = tape.value(y).to_vec();
        denormalize_box(&row, s)
            .map_err(|e| Error::Degenerate(format!("regressed box is invalid: {e}")))
    }
}

/// A loaded tracker ready for inference.
pub struct Tracker {
    pub cfg: TrackerConfig,
    net: TrackerNet,
    pub params: ParamSet<f32>,
}

impl Tracker {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.tracker_config()?;
        let net = TrackerNet::from_params(&cfg, &ckpt.params)?;
        Ok(Tracker { cfg, net, params: ckpt.params.clone() })
    }

    /// Tracks one cropped cine (`frames` is [T * S * S], frame-major) and
    /// returns all landmark positions in crop pixels, one grid per frame.
    pub fn track_crop(&mut self, frames: &[f32]) -> Result<LandmarkSequence> {
        let t_len = self.cfg.frames;
        let s = self.cfg.input_size;
        if frames.len() != t_len * s * s {
            return Err(Error::Shape(format!(
                "cine has {} px, tracker expects {t_len} frames of {s}x{s}",
                frames.len()
            )));
        }
        let mut tape = Tape::new(Mode::Eval, 0);
        let xn = tape.input(&[t_len, 1, s, s], frames.to_vec())?;
        let y = self.net.forward(&mut tape, &mut self.params, xn, t_len, 1)?;
        let yv = tape.value(y);
        let mut grids = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let base = t * 2 * LANDMARK_COUNT;
            let pts: Vec<Point2> = (0..LANDMARK_COUNT)
                .map(|i| {
                    Point2::new(
                        yv[base + 2 * i] as f64 * s as f64,
                        yv[base + 2 * i + 1] as f64 * s as f64,
                    )
                })
                .collect();
            grids.push(LandmarkGrid::from_points(pts)?);
        }
        LandmarkSequence::new(grids)
    }
}

/// Everything the assembled pipeline produces for one cine.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Landmarks in original-image coordinates, one grid per real frame.
    pub landmarks: LandmarkSequence,
    pub strain: StrainCurve,
    /// The crop actually used, exportable alongside the landmarks.
    pub record: TransformRecord,
    /// Expanded crop box mapped back to original-image coordinates.
    pub crop_box_original: BoundingBox,
    /// True when the regressed box was degenerate and the full padded image
    /// was used instead.
    pub used_fallback_box: bool,
    /// Network inference time (localization + tracking), seconds.
    pub network_seconds: f64,
    /// Real frames tracked per second of network time.
    pub frames_per_sec: f64,
}

/// Full inference: pad, frame-normalize, localize on the first frame,
/// expand, crop every frame with that one box, track, map back, and compute
/// the strain curve. Stage failures carry the stage name.
pub fn full_pipeline(
    localizer: &mut Localizer,
    tracker: &mut Tracker,
    cine: &Cine,
    preproc: &PreprocConfig,
) -> Result<PipelineOutput> {
    if preproc.pad_to != localizer.cfg.input_size {
        return Err(Error::Config(format!(
            "preprocess pad_to {} != localizer input {}",
            preproc.pad_to, localizer.cfg.input_size
        )));
    }
    if preproc.crop_to != tracker.cfg.input_size {
        return Err(Error::Config(format!(
            "preprocess crop_to {} != tracker input {}",
            preproc.crop_to, tracker.cfg.input_size
        )));
    }
    if preproc.frame_target != tracker.cfg.frames {
        return Err(Error::Config(format!(
            "preprocess frame_target {} != tracker frames {}",
            preproc.frame_target, tracker.cfg.frames
        )));
    }

    let (padded, off) =
        pad_spatial(cine, preproc.pad_to, preproc.pad_to).map_err(Error::stage("preprocess"))?;
    let (normed, mask) =
        normalize_frames(&padded, preproc.frame_target).map_err(Error::stage("preprocess"))?;

    let localize_started = Instant::now();
    let ed = zscore_image(normed.frame(0));
    let (tight, used_fallback_box) = match localizer.predict_box(ed.data()) {
        Ok(b) => (b, false),
        Err(Error::Degenerate(_)) => {
            let full = BoundingBox::new(0.0, 0.0, preproc.pad_to as f64, preproc.pad_to as f64)
                .map_err(Error::stage("localize"))?;
            (full, true)
        }
        Err(e) => return Err(Error::Stage { stage: "localize", source: Box::new(e) }),
    };
    let localize_seconds = localize_started.elapsed().as_secs_f64();

    let expanded = tight
        .expand(preproc.expand_fraction, preproc.pad_to as f64, preproc.pad_to as f64)
        .map_err(Error::stage("localize"))?;
    let (crop, record) =
        crop_pipeline(&normed, &expanded, preproc, off).map_err(Error::stage("crop"))?;
    let frames: Vec<f32> = crop.frames().iter().flat_map(|f| f.data().iter().copied()).collect();

    let track_started = Instant::now();
    let crop_landmarks = tracker.track_crop(&frames).map_err(Error::stage("track"))?;
    let track_seconds = track_started.elapsed().as_secs_f64();

    let real = mask.iter().filter(|&&m| m).count().min(cine.frame_count());
    let mut grids = Vec::with_capacity(real);
    for t in 0..real {
        let orig = record
            .to_original(crop_landmarks.frame(t).points())
            .map_err(Error::stage("track"))?;
        grids.push(LandmarkGrid::from_points(orig).map_err(Error::stage("track"))?);
    }
    let landmarks = LandmarkSequence::new(grids).map_err(Error::stage("track"))?;
    let strain = strain_curve(&landmarks).map_err(Error::stage("strain"))?;

    let ox = off[1] as f64;
    let oy = off[0] as f64;
    let crop_box_original = BoundingBox::new(
        record.crop_box.x_min - ox,
        record.crop_box.y_min - oy,
        record.crop_box.x_max - ox,
        record.crop_box.y_max - oy,
    )
    .map_err(Error::stage("crop"))?;

    let network_seconds = localize_seconds + track_seconds;
    let frames_per_sec =
        if network_seconds > 0.0 { real as f64 / network_seconds } else { f64::INFINITY };
    Ok(PipelineOutput {
        landmarks,
        strain,
        record,
        crop_box_original,
        used_fallback_box,
        network_seconds,
        frames_per_sec,
    })
}
