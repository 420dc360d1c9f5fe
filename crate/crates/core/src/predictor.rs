//! Hierarchical multi-scale Transformer for user trajectory forecasting.
//!
//! The history window is re-sliced stage by stage (width `w_m`), embedded
//! with sinusoidal position codes, and run through post-norm encoder layers;
//! the final stage is flattened into two linear heads that emit the
//! predicted horizon. Training minimizes RMSE with Adam and early stopping.

use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{DatasetSplit, Window};
use crate::nn::{AdamState, Linear};
use crate::tape::{NodeId, Tape, Var};
use crate::tensor::Tensor;

/// Windows processed per parallel gradient chunk. Fixed so results do not
/// depend on the machine's thread count.
const GRAD_CHUNK: usize = 32;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Hierarchy and training hyper-parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Number of stages M.
    pub stages: usize,
    /// Slice width per stage.
    pub slice_widths: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub layers_per_stage: usize,
    pub d_ff: usize,
    /// History length fed to the model.
    pub history_len: usize,
    /// Prediction horizon.
    pub horizon: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Epochs of linear learning-rate ramp at the start of training.
    pub warmup_epochs: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            stages: 3,
            slice_widths: vec![2, 2, 2],
            d_model: 64,
            heads: 4,
            layers_per_stage: 2,
            d_ff: 128,
            history_len: 60,
            horizon: 10,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            warmup_epochs: 5,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.slice_widths.len() != self.stages {
            return Err(Error::config(format!(
                "{} slice widths for {} stages",
                self.slice_widths.len(),
                self.stages
            )));
        }
        if self.slice_widths.iter().any(|&w| w == 0) {
            return Err(Error::contract("slice width must be at least 1".to_string()));
        }
        if self.d_model % self.heads != 0 || self.heads == 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.history_len == 0 || self.horizon == 0 {
            return Err(Error::config("history and horizon must be positive".to_string()));
        }
        Ok(())
    }
}

/// Shape bookkeeping for one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub stage: usize,
    pub input_len: usize,
    pub input_width: usize,
    pub padded_len: usize,
    pub slice_count: usize,
    pub slice_size: usize,
}

/// Slice arithmetic across the hierarchy, including right-padding when a
/// stage length is not divisible by its width.
pub fn stage_ledger(cfg: &PredictorConfig) -> Vec<StageShape> {
    let mut shapes = Vec::with_capacity(cfg.stages);
    let mut len = cfg.history_len;
    for (m, &w) in cfg.slice_widths.iter().enumerate() {
        let width = if m == 0 { 2 } else { cfg.d_model };
        let padded = len.div_ceil(w) * w;
        let count = padded / w;
        shapes.push(StageShape {
            stage: m + 1,
            input_len: len,
            input_width: width,
            padded_len: padded,
            slice_count: count,
            slice_size: w * width,
        });
        len = count;
    }
    shapes
}

/// Group `width` consecutive rows into one slice row. Pads by repeating the
/// last row; returns the slice matrix and the number of padded rows.
pub fn partition_slices(sequence: &Tensor, width: usize) -> Result<(Tensor, usize)> {
    if width == 0 {
        return Err(Error::contract("slice width must be at least 1".to_string()));
    }
    let rows = sequence.rows();
    let cols = sequence.cols();
    let pad = (width - rows % width) % width;
    let padded = if pad > 0 {
        crate::tensor::pad_rows_repeat_last(sequence, pad)?
    } else {
        sequence.clone()
    };
    Ok((padded.reshaped(vec![(rows + pad) / width, width * cols])?, pad))
}

/// Sinusoidal position codes over `len` 1-based positions; dimension pairs
/// are indexed 1..=d/2 as sin into even and cos into odd columns.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 1..=len {
        for i in 1..=d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[(pos - 1) * d_model + 2 * (i - 1)] = angle.sin();
            data[(pos - 1) * d_model + 2 * i - 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, d_model], data).unwrap()
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    ffn1: Linear,
    ffn2: Linear,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
}

impl EncoderLayer {
    fn new(d_model: usize, d_ff: usize, rng: &mut ChaCha12Rng) -> Self {
        EncoderLayer {
            wq: crate::nn::init_weight(d_model, d_model, rng),
            wk: crate::nn::init_weight(d_model, d_model, rng),
            wv: crate::nn::init_weight(d_model, d_model, rng),
            wo: crate::nn::init_weight(d_model, d_model, rng),
            ln1_gain: Tensor::full(&[d_model], 1.0),
            ln1_bias: Tensor::zeros(&[d_model]),
            ffn1: Linear::new(d_model, d_ff, rng),
            ffn2: Linear::new(d_ff, d_model, rng),
            ln2_gain: Tensor::full(&[d_model], 1.0),
            ln2_bias: Tensor::zeros(&[d_model]),
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Linear,
    layers: Vec<EncoderLayer>,
}

/// Per-feature affine normalization fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer {
            mean: [0.0, 0.0],
            std: [1.0, 1.0],
        }
    }
}

impl Standardizer {
    pub fn fit(windows: &[Window]) -> Standardizer {
        let mut sum = [0.0f64; 2];
        let mut count = 0usize;
        for w in windows {
            for p in w.history.iter().chain(&w.future) {
                sum[0] += p[0];
                sum[1] += p[1];
                count += 1;
            }
        }
        if count == 0 {
            return Standardizer::default();
        }
        let mean = [sum[0] / count as f64, sum[1] / count as f64];
        let mut sq = [0.0f64; 2];
        for w in windows {
            for p in w.history.iter().chain(&w.future) {
                sq[0] += (p[0] - mean[0]).powi(2);
                sq[1] += (p[1] - mean[1]).powi(2);
            }
        }
        let std = [
            (sq[0] / count as f64).sqrt().max(1e-8),
            (sq[1] / count as f64).sqrt().max(1e-8),
        ];
        Standardizer { mean, std }
    }

    pub fn encode(&self, points: &[[f64; 2]]) -> Tensor {
        let mut data = Vec::with_capacity(points.len() * 2);
        for p in points {
            data.push((p[0] - self.mean[0]) / self.std[0]);
            data.push((p[1] - self.mean[1]) / self.std[1]);
        }
        Tensor::new(vec![points.len(), 2], data).unwrap()
    }

    pub fn decode(&self, t: &Tensor) -> Vec<[f64; 2]> {
        t.data()
            .chunks(2)
            .map(|c| [c[0] * self.std[0] + self.mean[0], c[1] * self.std[1] + self.mean[1]])
            .collect()
    }
}

/// Common surface shared by the trajectory models so one training loop
/// serves them all.
pub trait SeqModel: Send + Sync {
    fn history_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn standardizer(&self) -> &Standardizer;
    fn set_standardizer(&mut self, norm: Standardizer);
    /// Summed per-window RMSE over a chunk of standardized windows, with the
    /// tape ids of every parameter leaf in `params()` order.
    fn chunk_loss<'t>(
        &self,
        tape: &'t Tape,
        hists: &[Tensor],
        futures: &[Tensor],
    ) -> Result<(Var<'t>, Vec<NodeId>)>;
    /// Standardized-space prediction for one standardized history.
    fn predict_std(&self, hist: &Tensor) -> Result<Tensor>;
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

/// The hierarchical multi-scale model.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    stages: Vec<Stage>,
    head_x: Linear,
    head_y: Linear,
    pub norm: Standardizer,
}

struct BoundLayer<'t> {
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    ln1_gain: Var<'t>,
    ln1_bias: Var<'t>,
    ffn1: crate::nn::BoundLinear<'t>,
    ffn2: crate::nn::BoundLinear<'t>,
    ln2_gain: Var<'t>,
    ln2_bias: Var<'t>,
}

struct BoundStage<'t> {
    embed: crate::nn::BoundLinear<'t>,
    layers: Vec<BoundLayer<'t>>,
    pe: Var<'t>,
}

pub struct BoundPredictor<'t> {
    cfg: PredictorConfig,
    stages: Vec<BoundStage<'t>>,
    head_x: crate::nn::BoundLinear<'t>,
    head_y: crate::nn::BoundLinear<'t>,
    tape: &'t Tape,
}

impl Predictor {
    pub fn new(cfg: PredictorConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let ledger = stage_ledger(&cfg);
        let mut stages = Vec::with_capacity(cfg.stages);
        for shape in &ledger {
            let embed = Linear::new(shape.slice_size, cfg.d_model, rng);
            let layers = (0..cfg.layers_per_stage)
                .map(|_| EncoderLayer::new(cfg.d_model, cfg.d_ff, rng))
                .collect();
            stages.push(Stage { embed, layers });
        }
        let flat = ledger.last().unwrap().slice_count * cfg.d_model;
        let head_x = Linear::new(flat, cfg.horizon, rng);
        let head_y = Linear::new(flat, cfg.horizon, rng);
        Ok(Predictor {
            cfg,
            stages,
            head_x,
            head_y,
            norm: Standardizer::default(),
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundPredictor<'t> {
        let ledger = stage_ledger(&self.cfg);
        let stages = self
            .stages
            .iter()
            .zip(&ledger)
            .map(|(s, shape)| BoundStage {
                embed: s.embed.bind(tape),
                layers: s
                    .layers
                    .iter()
                    .map(|l| BoundLayer {
                        wq: tape.leaf(l.wq.clone().with_grad()),
                        wk: tape.leaf(l.wk.clone().with_grad()),
                        wv: tape.leaf(l.wv.clone().with_grad()),
                        wo: tape.leaf(l.wo.clone().with_grad()),
                        ln1_gain: tape.leaf(l.ln1_gain.clone().with_grad()),
                        ln1_bias: tape.leaf(l.ln1_bias.clone().with_grad()),
                        ffn1: l.ffn1.bind(tape),
                        ffn2: l.ffn2.bind(tape),
                        ln2_gain: tape.leaf(l.ln2_gain.clone().with_grad()),
                        ln2_bias: tape.leaf(l.ln2_bias.clone().with_grad()),
                    })
                    .collect(),
                pe: tape.constant(positional_encoding(shape.slice_count, self.cfg.d_model)),
            })
            .collect();
        BoundPredictor {
            cfg: self.cfg.clone(),
            stages,
            head_x: self.head_x.bind(tape),
            head_y: self.head_y.bind(tape),
            tape,
        }
    }

    /// Forecast from raw coordinates. Histories shorter than the model
    /// window are left-padded with their earliest point; the flag reports
    /// whether padding happened.
    pub fn predict_horizon(&self, history: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, bool)> {
        if history.is_empty() {
            return Err(Error::contract("history must contain at least one point".to_string()));
        }
        let t_h = self.cfg.history_len;
        let padded = history.len() < t_h;
        let mut window: Vec<[f64; 2]> = Vec::with_capacity(t_h);
        if padded {
            window.extend(std::iter::repeat_n(history[0], t_h - history.len()));
            window.extend_from_slice(history);
        } else {
            window.extend_from_slice(&history[history.len() - t_h..]);
        }
        let hist = self.norm.encode(&window);
        let pred = self.predict_std(&hist)?;
        Ok((self.norm.decode(&pred), padded))
    }
}

impl<'t> BoundPredictor<'t> {
    /// Standardized history [T_h x 2] to standardized horizon [T_p x 2].
    pub fn forward(&self, history: Var<'t>) -> Result<Var<'t>> {
        let d_i = self.cfg.d_model / self.cfg.heads;
        let scale = 1.0 / (d_i as f64).sqrt();
        let mut seq = history;
        for (m, stage) in self.stages.iter().enumerate() {
            let w = self.cfg.slice_widths[m];
            let rows = seq.shape()[0];
            let cols = seq.shape()[1];
            let pad = (w - rows % w) % w;
            let padded = if pad > 0 { seq.pad_rows_repeat_last(pad)? } else { seq };
            let slices = padded.reshape(vec![(rows + pad) / w, w * cols])?;
            let embedded = stage.embed.forward(slices)?.relu();
            let mut x = embedded.add(stage.pe)?;
            for layer in &stage.layers {
                let q = x.matmul(layer.wq)?;
                let k = x.matmul(layer.wk)?;
                let v = x.matmul(layer.wv)?;
                let mut heads = Vec::with_capacity(self.cfg.heads);
                for h in 0..self.cfg.heads {
                    let qh = q.slice_cols(h * d_i, d_i)?;
                    let kh = k.slice_cols(h * d_i, d_i)?;
                    let vh = v.slice_cols(h * d_i, d_i)?;
                    let attn = qh.matmul_nt(kh)?.scale(scale).softmax_rows();
                    heads.push(attn.matmul(vh)?);
                }
                let mha = self.tape.concat_cols(&heads)?.matmul(layer.wo)?;
                let y1 = x
                    .add(mha)?
                    .layer_norm(layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
                let ffn = layer.ffn2.forward(layer.ffn1.forward(y1)?.relu())?;
                x = y1
                    .add(ffn)?
                    .layer_norm(layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
            }
            seq = x;
        }
        let k_last = seq.shape()[0];
        let flat = seq.reshape(vec![1, k_last * self.cfg.d_model])?;
        let px = self.head_x.forward(flat)?.reshape(vec![self.cfg.horizon, 1])?;
        let py = self.head_y.forward(flat)?.reshape(vec![self.cfg.horizon, 1])?;
        self.tape.concat_cols(&[px, py])
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            ids.extend(s.embed.ids());
            for l in &s.layers {
                ids.extend([
                    l.wq.id(),
                    l.wk.id(),
                    l.wv.id(),
                    l.wo.id(),
                    l.ln1_gain.id(),
                    l.ln1_bias.id(),
                ]);
                ids.extend(l.ffn1.ids());
                ids.extend(l.ffn2.ids());
                ids.extend([l.ln2_gain.id(), l.ln2_bias.id()]);
            }
        }
        ids.extend(self.head_x.ids());
        ids.extend(self.head_y.ids());
        ids
    }
}

impl Predictor {
    /// Flatten the model into named checkpoint entries.
    pub fn to_checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let c = &self.cfg;
        let mut entries = vec![
            (
                "meta/config".to_string(),
                Tensor::vector(vec![
                    c.stages as f64,
                    c.d_model as f64,
                    c.heads as f64,
                    c.layers_per_stage as f64,
                    c.d_ff as f64,
                    c.history_len as f64,
                    c.horizon as f64,
                ]),
            ),
            (
                "meta/widths".to_string(),
                Tensor::vector(c.slice_widths.iter().map(|&w| w as f64).collect()),
            ),
            (
                "meta/norm".to_string(),
                Tensor::vector(vec![
                    self.norm.mean[0],
                    self.norm.mean[1],
                    self.norm.std[0],
                    self.norm.std[1],
                ]),
            ),
        ];
        for (name, tensor) in self.param_names().into_iter().zip(self.params()) {
            entries.push((name, tensor.clone()));
        }
        entries
    }

    pub fn from_checkpoint_entries(entries: &[(String, Tensor)]) -> Result<Predictor> {
        let meta = crate::checkpoint::find(entries, "meta/config")?.data().to_vec();
        if meta.len() != 7 {
            return Err(Error::config("malformed predictor meta/config".to_string()));
        }
        let widths = crate::checkpoint::find(entries, "meta/widths")?
            .data()
            .iter()
            .map(|&w| w as usize)
            .collect();
        let cfg = PredictorConfig {
            stages: meta[0] as usize,
            slice_widths: widths,
            d_model: meta[1] as usize,
            heads: meta[2] as usize,
            layers_per_stage: meta[3] as usize,
            d_ff: meta[4] as usize,
            history_len: meta[5] as usize,
            horizon: meta[6] as usize,
            ..PredictorConfig::default()
        };
        let mut rng = crate::rng::stream(0, "checkpoint-load");
        let mut model = Predictor::new(cfg, &mut rng)?;
        let norm = crate::checkpoint::find(entries, "meta/norm")?.data().to_vec();
        if norm.len() != 4 {
            return Err(Error::config("malformed predictor meta/norm".to_string()));
        }
        model.norm = Standardizer {
            mean: [norm[0], norm[1]],
            std: [norm[2], norm[3]],
        };
        let names = model.param_names();
        for (name, param) in names.iter().zip(model.params_mut()) {
            let saved = crate::checkpoint::find(entries, name)?;
            if saved.shape() != param.shape() {
                return Err(Error::config(format!(
                    "checkpoint entry `{name}` has shape {:?}, expected {:?}",
                    saved.shape(),
                    param.shape()
                )));
            }
            *param = saved.clone();
        }
        Ok(model)
    }
}

/// Last observed point of a standardized history window; windows are
/// re-expressed relative to it around the network so the model regresses
/// residual motion rather than absolute coordinates.
pub fn window_anchor(hist: &Tensor) -> [f64; 2] {
    let n = hist.rows();
    [hist.data()[2 * (n - 1)], hist.data()[2 * (n - 1) + 1]]
}

/// Shift every (x, y) row by the given offset.
pub fn shift_rows(t: &Tensor, offset: [f64; 2]) -> Tensor {
    let mut data = t.data().to_vec();
    for pair in data.chunks_mut(2) {
        pair[0] += offset[0];
        pair[1] += offset[1];
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// sqrt of the horizon-averaged squared Euclidean error.
pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dimension(format!(
            "rmse: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let steps = pred.rows();
    let mut total = 0.0;
    for (p, t) in pred.data().iter().zip(target.data()) {
        total += (p - t) * (p - t);
    }
    Ok((total / steps as f64).sqrt())
}

/// RMSE as a tape node: sqrt(mean over rows of squared row norms).
pub fn rmse_var<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let diff = pred.sub(target)?;
    Ok(diff.mul(diff)?.row_sums().mean_all().sqrt())
}

impl SeqModel for Predictor {
    fn history_len(&self) -> usize {
        self.cfg.history_len
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn standardizer(&self) -> &Standardizer {
        &self.norm
    }

    fn set_standardizer(&mut self, norm: Standardizer) {
        self.norm = norm;
    }

    fn chunk_loss<'t>(
        &self,
        tape: &'t Tape,
        hists: &[Tensor],
        futures: &[Tensor],
    ) -> Result<(Var<'t>, Vec<NodeId>)> {
        let bound = self.bind(tape);
        let mut total: Option<Var<'t>> = None;
        for (h, f) in hists.iter().zip(futures) {
            // anchor history and target alike; rmse is shift-invariant
            let [ax, ay] = window_anchor(h);
            let anchored_h = shift_rows(h, [-ax, -ay]);
            let anchored_f = shift_rows(f, [-ax, -ay]);
            let pred = bound.forward(tape.constant(anchored_h))?;
            let loss = rmse_var(pred, tape.constant(anchored_f))?;
            total = Some(match total {
                Some(t) => t.add(loss)?,
                None => loss,
            });
        }
        Ok((
            total.ok_or_else(|| Error::contract("empty chunk".to_string()))?,
            bound.param_ids(),
        ))
    }

    fn predict_std(&self, hist: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let anchor = window_anchor(hist);
        let anchored = shift_rows(hist, [-anchor[0], -anchor[1]]);
        let pred = bound.forward(tape.constant(anchored))?.value();
        Ok(shift_rows(&pred, anchor))
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in 0..self.stages.len() {
            names.push(format!("stage{m}.embed.w"));
            names.push(format!("stage{m}.embed.b"));
            for l in 0..self.stages[m].layers.len() {
                for p in [
                    "wq", "wk", "wv", "wo", "ln1.gain", "ln1.bias", "ffn1.w", "ffn1.b", "ffn2.w",
                    "ffn2.b", "ln2.gain", "ln2.bias",
                ] {
                    names.push(format!("stage{m}.layer{l}.{p}"));
                }
            }
        }
        for h in ["head_x.w", "head_x.b", "head_y.w", "head_y.b"] {
            names.push(h.to_string());
        }
        names
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for s in &self.stages {
            out.push(&s.embed.w);
            out.push(&s.embed.b);
            for l in &s.layers {
                out.extend([
                    &l.wq, &l.wk, &l.wv, &l.wo, &l.ln1_gain, &l.ln1_bias, &l.ffn1.w, &l.ffn1.b,
                    &l.ffn2.w, &l.ffn2.b, &l.ln2_gain, &l.ln2_bias,
                ]);
            }
        }
        out.extend([&self.head_x.w, &self.head_x.b, &self.head_y.w, &self.head_y.b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.embed.w);
            out.push(&mut s.embed.b);
            for l in &mut s.layers {
                out.push(&mut l.wq);
                out.push(&mut l.wk);
                out.push(&mut l.wv);
                out.push(&mut l.wo);
                out.push(&mut l.ln1_gain);
                out.push(&mut l.ln1_bias);
                out.push(&mut l.ffn1.w);
                out.push(&mut l.ffn1.b);
                out.push(&mut l.ffn2.w);
                out.push(&mut l.ffn2.b);
                out.push(&mut l.ln2_gain);
                out.push(&mut l.ln2_bias);
            }
        }
        out.push(&mut self.head_x.w);
        out.push(&mut self.head_x.b);
        out.push(&mut self.head_y.w);
        out.push(&mut self.head_y.b);
        out
    }
}

/// One row of the epoch-loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
}

struct StdWindows {
    hists: Vec<Tensor>,
    futures: Vec<Tensor>,
}

fn standardize_windows(norm: &Standardizer, windows: &[Window]) -> StdWindows {
    StdWindows {
        hists: windows.iter().map(|w| norm.encode(&w.history)).collect(),
        futures: windows.iter().map(|w| norm.encode(&w.future)).collect(),
    }
}

fn mean_val_loss<M: SeqModel>(model: &M, data: &StdWindows) -> Result<f64> {
    let idx: Vec<usize> = (0..data.hists.len()).collect();
    let sums: Vec<Result<f64>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut total = 0.0;
            for &i in chunk {
                let pred = model.predict_std(&data.hists[i])?;
                total += rmse(&pred, &data.futures[i])?;
            }
            Ok(total)
        })
        .collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / data.hists.len() as f64)
}

/// Mini-batch Adam on mean batch RMSE with early stopping on validation
/// loss; the best-validation parameters are restored before returning.
/// Uses a five-epoch linear learning-rate warmup.
pub fn train_sequence_model<M: SeqModel>(
    model: &mut M,
    data: &DatasetSplit,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    train_sequence_model_warmup(model, data, learning_rate, batch_size, max_epochs, patience, 5, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn train_sequence_model_warmup<M: SeqModel>(
    model: &mut M,
    data: &DatasetSplit,
    learning_rate: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    warmup_epochs: usize,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::contract(
            "training requires non-empty train and validation splits".to_string(),
        ));
    }
    model.set_standardizer(Standardizer::fit(&data.train));
    let train = standardize_windows(model.standardizer(), &data.train);
    let val = standardize_windows(model.standardizer(), &data.validation);

    let mut adam = AdamState::new(&model.params(), learning_rate);
    let mut shuffle_rng = crate::rng::stream(seed, "train-shuffle");
    let mut order: Vec<usize> = (0..train.hists.len()).collect();

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut stale_epochs = 0usize;

    for epoch in 1..=max_epochs {
        use rand::seq::SliceRandom;
        adam.learning_rate = if warmup_epochs > 0 && epoch <= warmup_epochs {
            learning_rate * epoch as f64 / warmup_epochs as f64
        } else {
            learning_rate
        };
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let hists: Vec<Tensor> = chunk.iter().map(|&i| train.hists[i].clone()).collect();
                    let futs: Vec<Tensor> =
                        chunk.iter().map(|&i| train.futures[i].clone()).collect();
                    let tape = Tape::new();
                    let (loss, ids) = model.chunk_loss(&tape, &hists, &futs)?;
                    let mut grads = tape.backward(loss)?;
                    let gvec: Vec<Tensor> = ids
                        .iter()
                        .map(|&id| grads.take_id(id).expect("parameter reachable from loss"))
                        .collect();
                    Ok((loss.value().item(), gvec))
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut total_grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                total_grads = Some(match total_grads {
                    None => grads,
                    Some(acc) => acc
                        .iter()
                        .zip(&grads)
                        .map(|(a, g)| crate::tensor::add(a, g))
                        .collect::<Result<Vec<Tensor>>>()?,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = total_grads
                .expect("non-empty batch")
                .iter()
                .map(|g| crate::tensor::scale(g, scale))
                .collect();
            adam.step(&mut model.params_mut(), &grads)?;
            epoch_loss += batch_loss;
        }
        let train_rmse = epoch_loss / train.hists.len() as f64;
        let val_rmse = mean_val_loss(model, &val)?;
        history.push(EpochStats {
            epoch,
            train_rmse,
            val_rmse,
        });

        if val_rmse < best_val {
            best_val = val_rmse;
            best_params = Some(model.params().into_iter().cloned().collect());
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        for (param, saved) in model.params_mut().into_iter().zip(best) {
            *param = saved;
        }
    }
    Ok(history)
}

/// Mean raw-space RMSE of a trained model over test windows.
pub fn test_rmse<M: SeqModel>(model: &M, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::contract("empty test split".to_string()));
    }
    let sums: Vec<Result<f64>> = windows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut total = 0.0;
            for w in chunk {
                let hist = model.standardizer().encode(&w.history);
                let pred_std = model.predict_std(&hist)?;
                let pred = model.standardizer().decode(&pred_std);
                let pred_t = Tensor::new(vec![pred.len(), 2], pred.iter().flatten().copied().collect())?;
                let target = Tensor::new(
                    vec![w.future.len(), 2],
                    w.future.iter().flatten().copied().collect(),
                )?;
                total += rmse(&pred_t, &target)?;
            }
            Ok(total)
        })
        .collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / windows.len() as f64)
}
