//! Comparison methods: random flight with full offloading, PPO without
//! prediction, an LSTM trajectory predictor, and the single-stage
//! degenerate form of the hierarchical model.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActionSource, AgentConfig, EpisodeMetrics, PetoAgent};
use crate::env::WbanEnv;
use crate::error::Result;
use crate::nn::{Linear, LstmCell};
use crate::predictor::{PredictorConfig, SeqModel, Standardizer};
use crate::tape::{NodeId, Tape, Var};
use crate::tensor::Tensor;

/// Which comparison pipeline to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Ruec,
    Pawp,
    LstmPred,
    VanillaPred,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Ruec => "ruec",
            BaselineKind::Pawp => "pawp",
            BaselineKind::LstmPred => "lstm",
            BaselineKind::VanillaPred => "vanilla",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Random flight, everything offloaded.
pub struct RuecPolicy {
    rng: ChaCha12Rng,
}

impl RuecPolicy {
    pub fn new(seed: u64) -> Self {
        RuecPolicy {
            rng: crate::rng::stream(seed, "ruec"),
        }
    }
}

impl ActionSource for RuecPolicy {
    fn raw_action(&mut self, env: &WbanEnv) -> Result<Vec<f64>> {
        let mut raw = Vec::with_capacity(env.action_dim());
        raw.push(self.rng.random_range(0.0..=1.0));
        raw.push(self.rng.random_range(0.0..=1.0));
        raw.extend(std::iter::repeat_n(1.0, env.cfg.users * env.cfg.tasks_per_user));
        Ok(raw)
    }
}

/// PPO without prediction: the same training loop with no augmentation.
pub fn train_pawp(env: &mut WbanEnv, cfg: &AgentConfig, seed: u64) -> Result<(PetoAgent, Vec<EpisodeMetrics>)> {
    crate::agent::train_peto(env, None, cfg, seed)
}

/// Single-stage, width-one slicing: the hierarchical model degenerates to a
/// plain Transformer encoder over the raw sequence. Encoder count and heads
/// carry over.
pub fn vanilla_config(cfg: &PredictorConfig) -> PredictorConfig {
    PredictorConfig {
        stages: 1,
        slice_widths: vec![1],
        layers_per_stage: cfg.layers_per_stage * cfg.stages,
        ..cfg.clone()
    }
}

/// Recurrent baseline: one LSTM over the history, then a ReLU hidden layer
/// into a linear horizon head.
#[derive(Clone, Debug)]
pub struct LstmPredictor {
    pub history_len: usize,
    pub horizon: usize,
    cell: LstmCell,
    fc1: Linear,
    fc2: Linear,
    hidden: usize,
    pub norm: Standardizer,
}

impl LstmPredictor {
    pub fn new(
        history_len: usize,
        horizon: usize,
        hidden: usize,
        fc_hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        LstmPredictor {
            history_len,
            horizon,
            cell: LstmCell::new(2, hidden, rng),
            fc1: Linear::new(hidden, fc_hidden, rng),
            fc2: Linear::new(fc_hidden, 2 * horizon, rng),
            hidden,
            norm: Standardizer::default(),
        }
    }

    /// Run the recurrence over a batch of standardized histories stacked as
    /// rows; returns predictions of shape [batch x 2*horizon].
    fn forward_batch<'t>(&self, tape: &'t Tape, hists: &[Tensor]) -> Result<(Var<'t>, Vec<NodeId>)> {
        let b = hists.len();
        let steps = self.history_len;
        let cell = self.cell.bind(tape);
        let fc1 = self.fc1.bind(tape);
        let fc2 = self.fc2.bind(tape);
        let mut h = tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[b, self.hidden]));
        for t in 0..steps {
            let mut rows = Vec::with_capacity(b * 2);
            for hist in hists {
                rows.push(hist.data()[2 * t]);
                rows.push(hist.data()[2 * t + 1]);
            }
            let x = tape.constant(Tensor::matrix(b, 2, rows)?);
            let (hn, cn) = cell.step(x, h, c)?;
            h = hn;
            c = cn;
        }
        let out = fc2.forward(fc1.forward(h)?.relu())?;
        let mut ids = Vec::new();
        ids.extend(cell.ids());
        ids.extend(fc1.ids());
        ids.extend(fc2.ids());
        Ok((out, ids))
    }
}

impl LstmPredictor {
    pub fn to_checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let fc_hidden = self.fc1.w.shape()[1];
        let mut entries = vec![
            (
                "meta/config".to_string(),
                Tensor::vector(vec![
                    self.history_len as f64,
                    self.horizon as f64,
                    self.hidden as f64,
                    fc_hidden as f64,
                ]),
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

    pub fn from_checkpoint_entries(entries: &[(String, Tensor)]) -> Result<LstmPredictor> {
        use crate::error::Error;
        let meta = crate::checkpoint::find(entries, "meta/config")?.data().to_vec();
        if meta.len() != 4 {
            return Err(Error::config("malformed lstm meta/config".to_string()));
        }
        let mut rng = crate::rng::stream(0, "checkpoint-load");
        let mut model = LstmPredictor::new(
            meta[0] as usize,
            meta[1] as usize,
            meta[2] as usize,
            meta[3] as usize,
            &mut rng,
        );
        let norm = crate::checkpoint::find(entries, "meta/norm")?.data().to_vec();
        if norm.len() != 4 {
            return Err(Error::config("malformed lstm meta/norm".to_string()));
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

impl SeqModel for LstmPredictor {
    fn history_len(&self) -> usize {
        self.history_len
    }

    fn horizon(&self) -> usize {
        self.horizon
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
        use crate::predictor::{shift_rows, window_anchor};
        let b = hists.len();
        // anchor history and target alike; rmse is shift-invariant
        let anchors: Vec<[f64; 2]> = hists.iter().map(window_anchor).collect();
        let anchored_hists: Vec<Tensor> = hists
            .iter()
            .zip(&anchors)
            .map(|(h, a)| shift_rows(h, [-a[0], -a[1]]))
            .collect();
        let (pred, ids) = self.forward_batch(tape, &anchored_hists)?;
        let mut target = Vec::with_capacity(b * 2 * self.horizon);
        for (f, a) in futures.iter().zip(&anchors) {
            target.extend_from_slice(shift_rows(f, [-a[0], -a[1]]).data());
        }
        let target = tape.constant(Tensor::matrix(b, 2 * self.horizon, target)?);
        // per-row RMSE: rows flatten (t, xy), so the row sum of squares is
        // the horizon sum of squared step errors
        let diff = pred.sub(target)?;
        let per_window = diff
            .mul(diff)?
            .row_sums()
            .scale(1.0 / self.horizon as f64)
            .sqrt();
        Ok((per_window.sum_all(), ids))
    }

    fn predict_std(&self, hist: &Tensor) -> Result<Tensor> {
        use crate::predictor::{shift_rows, window_anchor};
        let tape = Tape::new();
        let anchor = window_anchor(hist);
        let anchored = shift_rows(hist, [-anchor[0], -anchor[1]]);
        let (pred, _) = self.forward_batch(&tape, std::slice::from_ref(&anchored))?;
        let pred = pred.value().reshaped(vec![self.horizon, 2])?;
        Ok(shift_rows(&pred, anchor))
    }

    fn param_names(&self) -> Vec<String> {
        ["cell.w_x", "cell.w_h", "cell.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.cell.w_x,
            &self.cell.w_h,
            &self.cell.b,
            &self.fc1.w,
            &self.fc1.b,
            &self.fc2.w,
            &self.fc2.b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.cell.w_x,
            &mut self.cell.w_h,
            &mut self.cell.b,
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::decode_action;
    use crate::predictor::train_sequence_model;
    use rand::SeedableRng;

    fn env() -> WbanEnv {
        let mut cfg = crate::env::EnvConfig::default();
        cfg.users = 2;
        cfg.tasks_per_user = 2;
        cfg.horizon = 5;
        let traces = crate::geo::gen_synthetic_traces(2, 40, 7);
        WbanEnv::new(cfg, vec![0.5, 1.0], vec![0.4, 0.8], traces, 1).unwrap()
    }

    #[test]
    fn ruec_always_offloads_everything() {
        let env = env();
        let mut policy = RuecPolicy::new(3);
        for _ in 0..1000 {
            let raw = policy.raw_action(&env).unwrap();
            let action = decode_action(&raw, 2, 2, env.cfg.max_speed).unwrap();
            assert!(action.offload.iter().flatten().all(|&z| z));
            assert!(action.speed >= 0.0 && action.speed <= env.cfg.max_speed);
            assert!(action.heading >= 0.0 && action.heading <= std::f64::consts::TAU);
        }
    }

    #[test]
    fn ruec_is_deterministic_per_seed() {
        let env = env();
        let draw = |seed| {
            let mut p = RuecPolicy::new(seed);
            (0..16).map(|_| p.raw_action(&env).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn vanilla_config_is_single_stage_same_depth() {
        let base = PredictorConfig::default();
        let v = vanilla_config(&base);
        assert_eq!(v.stages, 1);
        assert_eq!(v.slice_widths, vec![1]);
        assert_eq!(v.layers_per_stage, 6);
        assert_eq!(v.heads, base.heads);
        // K_1 = T_h, G_1 = 2
        let ledger = crate::predictor::stage_ledger(&v);
        assert_eq!(ledger[0].slice_count, v.history_len);
        assert_eq!(ledger[0].slice_size, 2);
        // the hierarchical forward accepts the degenerate config unchanged
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let model = crate::predictor::Predictor::new(
            PredictorConfig {
                history_len: 8,
                horizon: 2,
                d_model: 8,
                heads: 2,
                d_ff: 8,
                ..vanilla_config(&PredictorConfig {
                    stages: 2,
                    slice_widths: vec![2, 2],
                    layers_per_stage: 1,
                    ..PredictorConfig::default()
                })
            },
            &mut rng,
        )
        .unwrap();
        let hist = Tensor::matrix(8, 2, vec![0.1; 16]).unwrap();
        assert_eq!(model.predict_std(&hist).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn lstm_output_shape_is_horizon_by_two() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let model = LstmPredictor::new(8, 3, 16, 8, &mut rng);
        let hist = Tensor::matrix(8, 2, vec![0.2; 16]).unwrap();
        assert_eq!(model.predict_std(&hist).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let model = LstmPredictor::new(4, 2, 6, 4, &mut rng);
        let hist = Tensor::matrix(4, 2, (0..8).map(|i| 0.2 * (i as f64).cos()).collect()).unwrap();
        let fut = Tensor::matrix(2, 2, vec![0.1, -0.1, 0.2, 0.0]).unwrap();

        let loss_of = |m: &LstmPredictor| {
            let tape = Tape::new();
            let (loss, _) = m.chunk_loss(&tape, &[hist.clone()], &[fut.clone()]).unwrap();
            loss.value().item()
        };

        let tape = Tape::new();
        let (loss, ids) = model.chunk_loss(&tape, &[hist.clone()], &[fut.clone()]).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.take_id(id).unwrap()).collect();

        for (p_idx, grad) in analytic.iter().enumerate() {
            let len = grad.numel();
            for &e in [0, len / 2, len - 1].iter().take(len.min(3)) {
                let mut plus = model.clone();
                plus.params_mut()[p_idx].data_mut()[e] += 1e-5;
                let mut minus = model.clone();
                minus.params_mut()[p_idx].data_mut()[e] -= 1e-5;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / 2e-5;
                let a = grad.data()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "param {p_idx} entry {e}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn lstm_trains_on_constant_velocity() {
        let span = 60.0;
        let traces: Vec<Vec<[f64; 2]>> = (0..8)
            .map(|k| {
                let ang = std::f64::consts::TAU * k as f64 / 8.0;
                let (vx, vy) = (0.5 * ang.cos(), 0.5 * ang.sin());
                (0..120)
                    .map(|i| {
                        let t = i as f64;
                        [span / 2.0 - vx * 60.0 + vx * t, span / 2.0 - vy * 60.0 + vy * t]
                    })
                    .collect()
            })
            .collect();
        let data = crate::geo::build_dataset(&traces, 8, 2, 2);
        let mut rng = crate::rng::stream(3, "lstm-init");
        let mut model = LstmPredictor::new(8, 2, 16, 8, &mut rng);
        let history = train_sequence_model(&mut model, &data, 3e-3, 16, 60, 20, 3).unwrap();
        let first = history.first().unwrap().val_rmse;
        let best = history.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
        assert!(best < 0.5 * first, "first {first}, best {best}");
    }

    #[test]
    fn batched_lstm_matches_single_window_path() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let model = LstmPredictor::new(6, 2, 8, 4, &mut rng);
        let h1 = Tensor::matrix(6, 2, (0..12).map(|i| 0.1 * i as f64).collect()).unwrap();
        let h2 = Tensor::matrix(6, 2, (0..12).map(|i| -0.05 * i as f64).collect()).unwrap();
        let tape = Tape::new();
        let (batch, _) = model.forward_batch(&tape, &[h1.clone(), h2.clone()]).unwrap();
        let b = batch.value();
        let tape1 = Tape::new();
        let (p1, _) = model.forward_batch(&tape1, std::slice::from_ref(&h1)).unwrap();
        let tape2 = Tape::new();
        let (p2, _) = model.forward_batch(&tape2, std::slice::from_ref(&h2)).unwrap();
        let (p1, p2) = (p1.value(), p2.value());
        for j in 0..4 {
            assert!((b.data()[j] - p1.data()[j]).abs() < 1e-12);
            assert!((b.data()[4 + j] - p2.data()[j]).abs() < 1e-12);
        }
    }
}
