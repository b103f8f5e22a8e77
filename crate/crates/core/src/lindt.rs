//! Layer-wise intertwined dual-model training.
//!
//! A client couples its local model `L(·, v)` to the received global model
//! `G(·, w)`: after every hidden layer m the local side consumes
//!
//! ```text
//! score = sigmoid((L^m · G^m) / ‖L^m‖)        (per sample)
//! h     = score · G^m + (1 − score) · L^m
//! ```
//!
//! instead of its own activation. The global side is an ordinary forward pass.
//! Both logit heads are trained jointly on the sum of their cross-entropies.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::LocalSchedule;
use crate::nn::{
    argmax_rows, forward_all_layers, layer_backward, layer_forward, softmax_cross_entropy, Batch, LayerStack,
    WeightVector,
};

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Output of one attaching module.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachState {
    /// One score per sample, in (0, 1).
    pub score: Array1<f64>,
    /// Intertwined representation fed to the next local layer.
    pub h: Array2<f64>,
}

/// Mixes a global and a local activation matrix sample by sample.
///
/// A zero local row has no direction; its score is `sigmoid(0) = 0.5`.
pub fn attach(global: &ArrayView2<f64>, local: &ArrayView2<f64>) -> Result<AttachState> {
    if global.dim() != local.dim() {
        return Err(Error::Shape {
            layer: 0,
            detail: format!("attach inputs differ: {:?} vs {:?}", global.dim(), local.dim()),
        });
    }
    let mut score = Array1::zeros(global.nrows());
    let mut h = Array2::zeros(global.raw_dim());
    for (i, (g, l)) in global.outer_iter().zip(local.outer_iter()).enumerate() {
        let norm = l.dot(&l).sqrt();
        let s = if norm > 0.0 { sigmoid(l.dot(&g) / norm) } else { 0.5 };
        score[i] = s;
        // L + s·(G − L): exact when both sides agree
        Zip::from(h.row_mut(i)).and(&g).and(&l).for_each(|out, &gk, &lk| {
            let mixed = lk + s * (gk - lk);
            *out = mixed.clamp(gk.min(lk), gk.max(lk));
        });
    }
    Ok(AttachState { score, h })
}

/// Gradients of the attach outputs w.r.t. (G, L) given `dh`.
fn attach_backward(
    global: &Array2<f64>,
    local: &Array2<f64>,
    state: &AttachState,
    dh: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut d_global = Array2::zeros(global.raw_dim());
    let mut d_local = Array2::zeros(local.raw_dim());
    for i in 0..global.nrows() {
        let (g, l, d) = (global.row(i), local.row(i), dh.row(i));
        let s = state.score[i];
        let norm = l.dot(&l).sqrt();
        let mut dg = d.mapv(|v| s * v);
        let mut dl = d.mapv(|v| (1.0 - s) * v);
        if norm > 0.0 {
            let gl = &g - &l;
            let ds = d.dot(&gl) * s * (1.0 - s);
            let proj = l.dot(&g);
            dg.scaled_add(ds / norm, &l);
            dl.scaled_add(ds / norm, &g);
            dl.scaled_add(-ds * proj / (norm * norm * norm), &l);
        }
        d_global.row_mut(i).assign(&dg);
        d_local.row_mut(i).assign(&dl);
    }
    (d_global, d_local)
}

/// Global and local parameter sets over one shared architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModel {
    stack: LayerStack,
    pub global: WeightVector,
    pub local: WeightVector,
}

impl DualModel {
    pub fn new(stack: LayerStack, global: WeightVector, local: WeightVector) -> Result<Self> {
        if stack.depth() < 2 {
            return Err(Error::config("dual model needs at least one hidden layer"));
        }
        stack.check_weights(&global)?;
        stack.check_weights(&local)?;
        Ok(Self { stack, global, local })
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }
}

/// Activations of both sides plus the M − 1 attaching modules.
#[derive(Debug, Clone)]
pub struct DualForward {
    pub global: Vec<Array2<f64>>,
    pub local: Vec<Array2<f64>>,
    pub attach: Vec<AttachState>,
}

impl DualForward {
    pub fn global_logits(&self) -> &Array2<f64> {
        self.global.last().expect("non-empty")
    }

    pub fn local_logits(&self) -> &Array2<f64> {
        self.local.last().expect("non-empty")
    }
}

fn local_forward(
    stack: &LayerStack,
    local_w: &WeightVector,
    x: &ArrayView2<f64>,
    global: &[Array2<f64>],
) -> Result<(Vec<Array2<f64>>, Vec<AttachState>)> {
    let depth = stack.depth();
    let mut acts = Vec::with_capacity(depth);
    let mut mods: Vec<AttachState> = Vec::with_capacity(depth - 1);
    #[allow(clippy::needless_range_loop)]
    for m in 0..depth {
        let out = match mods.last() {
            None => layer_forward(stack, local_w, m, x)?,
            Some(prev) => layer_forward(stack, local_w, m, &prev.h.view())?,
        };
        if m + 1 < depth {
            mods.push(attach(&global[m].view(), &out.view()).map_err(|_| Error::Shape {
                layer: m,
                detail: "attach width mismatch".into(),
            })?);
        }
        acts.push(out);
    }
    Ok((acts, mods))
}

pub fn dual_forward(dm: &DualModel, x: &ArrayView2<f64>) -> Result<DualForward> {
    let global = forward_all_layers(&dm.stack, &dm.global, x)?;
    let (local, attach) = local_forward(&dm.stack, &dm.local, x, &global)?;
    Ok(DualForward { global, local, attach })
}

/// Joint loss (sum of both heads' mean cross-entropies) and its gradients
/// w.r.t. the global and local parameters.
pub fn dual_loss_and_grads(dm: &DualModel, batch: &Batch) -> Result<(f64, WeightVector, WeightVector)> {
    let stack = &dm.stack;
    let depth = stack.depth();
    let x = batch.inputs.view();
    let fwd = dual_forward(dm, &x)?;
    let (loss_g, d_global_logits) = softmax_cross_entropy(fwd.global_logits(), &batch.labels)?;
    let (loss_l, d_local_logits) = softmax_cross_entropy(fwd.local_logits(), &batch.labels)?;

    let layout = Arc::clone(stack.layout());
    let mut grad_local = WeightVector::zeros(Arc::clone(&layout));
    let mut grad_global = WeightVector::zeros(layout);

    // local side, collecting what each attaching module sends back to G^m
    let mut into_global: Vec<Option<Array2<f64>>> = vec![None; depth];
    let mut delta = d_local_logits;
    for m in (0..depth).rev() {
        let input = if m == 0 { x.view() } else { fwd.attach[m - 1].h.view() };
        let d_input = layer_backward(stack, &dm.local, m, &input, &fwd.local[m], &delta, &mut grad_local);
        if m > 0 {
            let (dg, dl) = attach_backward(&fwd.global[m - 1], &fwd.local[m - 1], &fwd.attach[m - 1], &d_input);
            into_global[m - 1] = Some(dg);
            delta = dl;
        }
    }

    let mut delta = d_global_logits;
    for m in (0..depth).rev() {
        if let Some(extra) = into_global[m].take() {
            delta += &extra;
        }
        let input = if m == 0 { x.view() } else { fwd.global[m - 1].view() };
        delta = layer_backward(stack, &dm.global, m, &input, &fwd.global[m], &delta, &mut grad_global);
    }
    Ok((loss_g + loss_l, grad_global, grad_local))
}

/// Result of one client's dual-model round.
#[derive(Debug, Clone, PartialEq)]
pub struct DualUpdate {
    /// Trained copy of the global weights; the only thing uploaded.
    pub global: WeightVector,
    /// Trained local weights; stays on the client.
    pub local: WeightVector,
    /// Joint loss averaged over the processed batches.
    pub mean_loss: f64,
}

/// `epochs` passes over `data`; per batch both parameter sets step with
/// gradients from the same loss evaluation.
pub fn dual_client_update(
    stack: &LayerStack,
    data: &Dataset,
    w_global: &WeightVector,
    local: &WeightVector,
    schedule: &LocalSchedule,
) -> Result<DualUpdate> {
    let mut dm = DualModel::new(stack.clone(), w_global.clone(), local.clone())?;
    let lr = schedule.learning_rate;
    let (mut total, mut steps) = (0.0, 0usize);
    for _ in 0..schedule.epochs {
        for batch in data.batches(schedule.batch_size) {
            let (loss, gw, gv) = dual_loss_and_grads(&dm, &batch)?;
            dm.global.axpy(-lr, &gw)?;
            dm.local.axpy(-lr, &gv)?;
            total += loss;
            steps += 1;
        }
    }
    let mean_loss = if steps > 0 { total / steps as f64 } else { 0.0 };
    Ok(DualUpdate { global: dm.global, local: dm.local, mean_loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunningMode {
    /// Plain FedAvg until NFL is detected, then dual-model training.
    DetectAndRecover,
    /// Dual-model training from the first round.
    AllTime,
    /// Never train dual models.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoppingStrategy {
    /// Dual training never stops once active.
    Persist,
    /// Stop once every client has trained a dual model at least once.
    AllClientsOnce,
    /// Stop after Δ < ε in `window` consecutive rounds.
    DeltaBelowEps { window: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LindtConfig {
    pub mode: RunningMode,
    pub stopping: StoppingStrategy,
}

impl Default for LindtConfig {
    fn default() -> Self {
        Self { mode: RunningMode::DetectAndRecover, stopping: StoppingStrategy::Persist }
    }
}

impl LindtConfig {
    pub fn validate(&self) -> Result<()> {
        if let StoppingStrategy::DeltaBelowEps { window: 0 } = self.stopping {
            return Err(Error::config("stopping window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryEvent {
    Started { round: u32 },
    Stopped { round: u32 },
}

/// What the server saw in one round.
#[derive(Debug, Clone, Copy)]
pub struct RoundSignals<'a> {
    pub round: u32,
    pub detector_flag: bool,
    pub participants: &'a [usize],
    pub delta: f64,
    pub epsilon: f64,
    pub clients: usize,
}

/// Server-side recovery bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryState {
    pub active: bool,
    pub participated: BTreeSet<usize>,
    pub below_eps_streak: u32,
    pub started_at: Option<u32>,
    pub stopped_at: Option<u32>,
}

impl RecoveryState {
    /// All-time mode starts active before round 1.
    pub fn new(cfg: &LindtConfig) -> Self {
        let mut s = Self::default();
        if cfg.mode == RunningMode::AllTime {
            s.active = true;
            s.started_at = Some(1);
        }
        s
    }

    /// Applies the end-of-round signals. Stop rules see only rounds that were
    /// trained with dual models; activation takes effect from the next round.
    pub fn update(&mut self, sig: &RoundSignals<'_>, cfg: &LindtConfig) -> Option<RecoveryEvent> {
        if self.active {
            self.participated.extend(sig.participants.iter().copied());
            if sig.delta < sig.epsilon {
                self.below_eps_streak += 1;
            } else {
                self.below_eps_streak = 0;
            }
            let stop = match cfg.stopping {
                StoppingStrategy::Persist => false,
                StoppingStrategy::AllClientsOnce => self.participated.len() >= sig.clients,
                StoppingStrategy::DeltaBelowEps { window } => self.below_eps_streak >= window,
            };
            if stop {
                self.active = false;
                self.stopped_at = Some(sig.round);
                return Some(RecoveryEvent::Stopped { round: sig.round });
            }
            return None;
        }
        let may_start = cfg.mode == RunningMode::DetectAndRecover
            && sig.detector_flag
            && self.started_at.is_none();
        if may_start {
            self.active = true;
            self.started_at = Some(sig.round);
            return Some(RecoveryEvent::Started { round: sig.round });
        }
        None
    }
}

/// Functional form of [`RecoveryState::update`].
pub fn recovery_controller(
    mut state: RecoveryState,
    sig: &RoundSignals<'_>,
    cfg: &LindtConfig,
) -> (RecoveryState, Option<RecoveryEvent>) {
    let ev = state.update(sig, cfg);
    (state, ev)
}

/// The model a client answers queries with.
#[derive(Debug, Clone, Copy)]
pub enum Serving<'a> {
    Global(&'a WeightVector),
    Dual { global: &'a WeightVector, local: &'a WeightVector },
}

pub fn serving_logits(stack: &LayerStack, serving: Serving<'_>, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    match serving {
        Serving::Global(w) => crate::nn::logits(stack, w, x),
        Serving::Dual { global, local } => {
            let g = forward_all_layers(stack, global, x)?;
            let (mut l, _) = local_forward(stack, local, x, &g)?;
            Ok(l.pop().expect("non-empty"))
        }
    }
}

/// Argmax of the local head when dual, else of the global model.
pub fn local_predict(stack: &LayerStack, serving: Serving<'_>, x: &ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&serving_logits(stack, serving, x)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_local_row_scores_half() {
        let u = array![[0.0, 0.0]];
        let out = attach(&u.view(), &u.view()).unwrap();
        assert_eq!(out.score[0], 0.5);
        assert_eq!(out.h, u);
    }

    #[test]
    fn identical_rows_score_sigmoid_of_norm() {
        let u = array![[0.0, 3.0]];
        let out = attach(&u.view(), &u.view()).unwrap();
        assert!((out.score[0] - 0.9525741268224334).abs() < 1e-15);
        assert_eq!(out.h, u);
    }

    #[test]
    fn opposite_rows() {
        let g = array![[-1.0, 0.0]];
        let l = array![[1.0, 0.0]];
        let out = attach(&g.view(), &l.view()).unwrap();
        let s = 1.0 / (1.0 + 1f64.exp());
        assert!((out.score[0] - s).abs() < 1e-15);
        assert!((out.score[0] - 0.26894142).abs() < 1e-8);
        assert!((out.h[[0, 0]] - 0.46211716).abs() < 1e-8);
        assert_eq!(out.h[[0, 1]], 0.0);
    }

    #[test]
    fn attach_shape_mismatch() {
        let g = array![[1.0, 0.0]];
        let l = array![[1.0, 0.0, 1.0]];
        assert!(attach(&g.view(), &l.view()).is_err());
    }

    #[test]
    fn dual_model_needs_hidden_layer() {
        let stack = LayerStack::logistic(3, 2).unwrap();
        let w = WeightVector::zeros(Arc::clone(stack.layout()));
        assert!(DualModel::new(stack, w.clone(), w).is_err());
    }

    #[test]
    fn uniform_heads_give_two_ln2() {
        let stack = LayerStack::mlp(&[2, 3, 2], Activation::Tanh).unwrap();
        let w = WeightVector::zeros(Arc::clone(stack.layout()));
        let dm = DualModel::new(stack, w.clone(), w).unwrap();
        let batch = Batch::new(array![[1.0, -1.0], [0.5, 2.0]], vec![0, 1]).unwrap();
        let (loss, _, _) = dual_loss_and_grads(&dm, &batch).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dual_update_with_zero_rate_is_identity() {
        let stack = LayerStack::mlp(&[2, 4, 2], Activation::Relu).unwrap();
        let w = stack.init_weights(&mut ChaCha8Rng::seed_from_u64(1));
        let v = stack.init_weights(&mut ChaCha8Rng::seed_from_u64(2));
        let data = Dataset::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![0, 1, 1], 2).unwrap();
        let s = LocalSchedule { batch_size: 2, epochs: 2, learning_rate: 0.0 };
        let out = dual_client_update(&stack, &data, &w, &v, &s).unwrap();
        assert_eq!(out.global, w);
        assert_eq!(out.local, v);
    }

    #[test]
    fn single_batch_dual_update_is_two_steps() {
        let stack = LayerStack::mlp(&[2, 4, 2], Activation::Relu).unwrap();
        let w = stack.init_weights(&mut ChaCha8Rng::seed_from_u64(1));
        let v = stack.init_weights(&mut ChaCha8Rng::seed_from_u64(2));
        let data = Dataset::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![0, 1, 1], 2).unwrap();
        let s = LocalSchedule { batch_size: 3, epochs: 1, learning_rate: 0.2 };
        let dm = DualModel::new(stack.clone(), w.clone(), v.clone()).unwrap();
        let (_, gw, gv) = dual_loss_and_grads(&dm, &data.as_batch().unwrap()).unwrap();
        let out = dual_client_update(&stack, &data, &w, &v, &s).unwrap();
        assert_eq!(out.global, crate::nn::sgd_step(&w, &gw, 0.2).unwrap());
        assert_eq!(out.local, crate::nn::sgd_step(&v, &gv, 0.2).unwrap());
    }

    fn signals(round: u32, flag: bool, participants: &[usize], delta: f64) -> RoundSignals<'_> {
        RoundSignals { round, detector_flag: flag, participants, delta, epsilon: 0.1, clients: 4 }
    }

    #[test]
    fn all_time_is_active_from_start() {
        let cfg = LindtConfig { mode: RunningMode::AllTime, stopping: StoppingStrategy::Persist };
        let mut s = RecoveryState::new(&cfg);
        assert!(s.active);
        for r in 1..50 {
            assert!(s.update(&signals(r, false, &[0, 1], 1.0), &cfg).is_none());
        }
        assert!(s.active);
    }

    #[test]
    fn detect_mode_waits_for_flag() {
        let cfg = LindtConfig::default();
        let mut s = RecoveryState::new(&cfg);
        assert!(s.update(&signals(1, false, &[0], 1.0), &cfg).is_none());
        assert!(!s.active);
        assert_eq!(s.update(&signals(2, true, &[0], 1.0), &cfg), Some(RecoveryEvent::Started { round: 2 }));
        assert!(s.participated.is_empty());
    }

    #[test]
    fn off_mode_never_starts() {
        let cfg = LindtConfig { mode: RunningMode::Off, ..Default::default() };
        let mut s = RecoveryState::new(&cfg);
        assert!(s.update(&signals(1, true, &[0], 1.0), &cfg).is_none());
        assert!(!s.active);
    }

    #[test]
    fn delta_window_resets() {
        let cfg = LindtConfig { mode: RunningMode::AllTime, stopping: StoppingStrategy::DeltaBelowEps { window: 10 } };
        let mut s = RecoveryState::new(&cfg);
        for r in 1..=9 {
            assert!(s.update(&signals(r, false, &[0], 0.05), &cfg).is_none());
        }
        assert!(s.update(&signals(10, false, &[0], 0.5), &cfg).is_none());
        assert_eq!(s.below_eps_streak, 0);
        for r in 11..=19 {
            assert!(s.update(&signals(r, false, &[0], 0.05), &cfg).is_none());
        }
        assert_eq!(s.update(&signals(20, false, &[0], 0.05), &cfg), Some(RecoveryEvent::Stopped { round: 20 }));
        // never restarts
        assert!(s.update(&signals(21, true, &[0], 0.5), &cfg).is_none());
        assert!(!s.active);
    }

    #[test]
    fn argmax_survives_positive_scaling() {
        let logits = array![[0.1, 0.5, -0.2], [2.0, 2.0, 1.0], [-3.0, -1.0, -2.0]];
        for c in [1e-3, 0.5, 7.0, 1e6] {
            assert_eq!(argmax_rows(&logits.mapv(|v| v * c)), argmax_rows(&logits));
        }
    }
}
