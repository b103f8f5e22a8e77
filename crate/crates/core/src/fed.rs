//! Federation protocol: client sampling, honest and poisoned local training,
//! and plain or differentially-private aggregation.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grad, sgd_step, Batch, LayerStack, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    /// Total clients N.
    pub clients: usize,
    /// Clients aggregated per round K.
    pub per_round: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Per-round multiplier applied to the learning rate.
    pub lr_decay: f64,
    pub rounds: u32,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            per_round: 5,
            batch_size: 10,
            local_epochs: 1,
            learning_rate: 0.1,
            lr_decay: 0.992,
            rounds: 200,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_round == 0 || self.per_round > self.clients {
            return Err(Error::config(format!(
                "per-round count {} must lie in 1..={}",
                self.per_round, self.clients
            )));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("local epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("learning-rate decay must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Learning rate used during round `round` (1-based).
    pub fn learning_rate_at(&self, round: u32) -> f64 {
        self.learning_rate * self.lr_decay.powi(round.saturating_sub(1) as i32)
    }

    pub fn schedule(&self, round: u32) -> LocalSchedule {
        LocalSchedule {
            batch_size: self.batch_size,
            epochs: self.local_epochs,
            learning_rate: self.learning_rate_at(round),
        }
    }
}

/// Local SGD budget for one client update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSchedule {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub enabled: bool,
    /// Clip bound S on the norm of each client's update.
    pub clip_bound: f64,
    /// Standard deviation σ of the server-side Gaussian noise.
    pub noise_std: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { enabled: false, clip_bound: 15.0, noise_std: 0.001 }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_bound > 0.0) {
            return Err(Error::config("clip bound must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise std must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFlip {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Share of the N clients that are malicious.
    pub attacker_fraction: f64,
    /// Attackers among the K clients of every round.
    pub per_round: usize,
    pub label_map: Vec<LabelFlip>,
    /// Relabeled samples mixed into every training batch.
    pub backdoor_per_batch: usize,
    /// Local epochs run by an attacker (E_a ≥ E).
    pub attacker_epochs: usize,
    /// Size of each attacker's pool of relabeled samples.
    pub backdoor_pool: usize,
    /// Attacks cease after this round, if set.
    pub stop_after_round: Option<u32>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            attacker_fraction: 0.0,
            per_round: 0,
            label_map: Vec::new(),
            backdoor_per_batch: 3,
            attacker_epochs: 5,
            backdoor_pool: 200,
            stop_after_round: None,
        }
    }
}

impl AttackConfig {
    pub fn attacker_count(&self, clients: usize) -> usize {
        (self.attacker_fraction * clients as f64).round() as usize
    }

    pub fn active_in(&self, round: u32) -> bool {
        self.stop_after_round.is_none_or(|last| round <= last)
    }

    pub fn validate(&self, fed: &FederationConfig, classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.attacker_fraction) {
            return Err(Error::config("attacker fraction must lie in [0, 1]"));
        }
        if self.per_round > fed.per_round {
            return Err(Error::config("attacker quota exceeds clients per round"));
        }
        if self.per_round > self.attacker_count(fed.clients) {
            return Err(Error::config("attacker quota exceeds the number of attackers"));
        }
        if fed.per_round - self.per_round > fed.clients - self.attacker_count(fed.clients) {
            return Err(Error::config("not enough honest clients to fill a round"));
        }
        if self.attacker_count(fed.clients) > 0 && self.attacker_epochs < fed.local_epochs {
            return Err(Error::config("attacker epochs must be at least the honest local epochs"));
        }
        if self.backdoor_per_batch > fed.batch_size {
            return Err(Error::config("backdoor mix count exceeds the batch size"));
        }
        validate_label_map(&self.label_map, classes)
    }
}

fn validate_label_map(map: &[LabelFlip], classes: usize) -> Result<()> {
    match map.iter().find(|f| f.source >= classes || f.target >= classes) {
        Some(f) => Err(Error::config(format!(
            "label map {} -> {} references a class outside 0..{classes}",
            f.source, f.target
        ))),
        None => Ok(()),
    }
}

/// Everything one client holds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: ClientDataset,
    pub is_attacker: bool,
    /// Local model of the dual model, created on first recovery round.
    pub local_model: Option<WeightVector>,
    /// Independently trained reference model.
    pub private_model: Option<WeightVector>,
    /// Relabeled samples an attacker mixes into its batches.
    pub backdoor: Option<Dataset>,
}

impl ClientState {
    pub fn honest(data: ClientDataset) -> Self {
        Self {
            id: data.id,
            data,
            is_attacker: false,
            local_model: None,
            private_model: None,
            backdoor: None,
        }
    }
}

/// The only message a client sends to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client: usize,
    pub round: u32,
    pub weights: WeightVector,
}

/// A realized Gaussian noise vector and its norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub vector: WeightVector,
    pub norm: f64,
}

impl NoiseDraw {
    pub fn new(vector: WeightVector) -> Self {
        let norm = vector.norm();
        Self { vector, norm }
    }
}

/// Picks the K clients of a round: `attacker_quota` attackers, the rest
/// uniformly among honest clients. Returned ids are ascending.
pub fn sample_active<R: Rng + ?Sized>(
    per_round: usize,
    attacker_quota: usize,
    attackers: &[bool],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let bad: Vec<usize> = (0..attackers.len()).filter(|&i| attackers[i]).collect();
    let good: Vec<usize> = (0..attackers.len()).filter(|&i| !attackers[i]).collect();
    if attacker_quota > bad.len() || per_round < attacker_quota || per_round - attacker_quota > good.len() {
        return Err(Error::config(format!(
            "cannot sample {per_round} clients with {attacker_quota} attackers from {} attackers and {} honest",
            bad.len(),
            good.len()
        )));
    }
    let mut chosen: Vec<usize> = index::sample(rng, bad.len(), attacker_quota)
        .into_iter()
        .map(|i| bad[i])
        .chain(index::sample(rng, good.len(), per_round - attacker_quota).into_iter().map(|i| good[i]))
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

fn run_sgd<'a>(
    stack: &LayerStack,
    w_global: &WeightVector,
    batches: impl Fn() -> Box<dyn Iterator<Item = Batch> + 'a>,
    epochs: usize,
    lr: f64,
    mut on_step: impl FnMut(&WeightVector) -> Result<()>,
) -> Result<WeightVector> {
    stack.check_weights(w_global)?;
    let mut w = w_global.clone();
    for _ in 0..epochs {
        for batch in batches() {
            on_step(&w)?;
            let (_, g) = loss_and_grad(stack, &w, &batch)?;
            w = sgd_step(&w, &g, lr)?;
        }
    }
    Ok(w)
}

/// `epochs` passes of mini-batch SGD from `w_global` over `data`.
pub fn train_local(
    stack: &LayerStack,
    data: &Dataset,
    w_global: &WeightVector,
    schedule: &LocalSchedule,
) -> Result<WeightVector> {
    run_sgd(
        stack,
        w_global,
        || Box::new(data.batches(schedule.batch_size)),
        schedule.epochs,
        schedule.learning_rate,
        |_| Ok(()),
    )
}

/// Honest update: local SGD on the client's training split.
pub fn client_update(
    stack: &LayerStack,
    state: &ClientState,
    w_global: &WeightVector,
    schedule: &LocalSchedule,
) -> Result<WeightVector> {
    train_local(stack, &state.data.train, w_global, schedule)
}

/// Like [`client_update`] but calls `probe` on the weights before every SGD
/// step and returns the probed values in step order.
pub fn client_update_traced(
    stack: &LayerStack,
    data: &Dataset,
    w_global: &WeightVector,
    schedule: &LocalSchedule,
    mut probe: impl FnMut(&WeightVector) -> Result<f64>,
) -> Result<(WeightVector, Vec<f64>)> {
    let mut trace = Vec::new();
    let w = run_sgd(
        stack,
        w_global,
        || Box::new(data.batches(schedule.batch_size)),
        schedule.epochs,
        schedule.learning_rate,
        |w| {
            trace.push(probe(w)?);
            Ok(())
        },
    )?;
    Ok((w, trace))
}

/// Relabels source-class samples of `pool` per `label_map`, dropping the rest.
pub fn build_backdoor(pool: &Dataset, label_map: &[LabelFlip]) -> Result<Dataset> {
    validate_label_map(label_map, pool.classes)?;
    let keep: Vec<usize> = (0..pool.len())
        .filter(|&i| label_map.iter().any(|f| f.source == pool.labels[i]))
        .collect();
    let mut out = pool.select(&keep);
    for y in out.labels.iter_mut() {
        *y = label_map.iter().find(|f| f.source == *y).map(|f| f.target).unwrap_or(*y);
    }
    Ok(out)
}

/// Batches of `batch_size` in which exactly `mix` rows come from `backdoor`
/// (cycled) and the rest are the client's clean samples in order.
pub fn attacker_batches(clean: &Dataset, backdoor: &Dataset, batch_size: usize, mix: usize) -> Vec<Batch> {
    if backdoor.is_empty() || mix == 0 {
        return clean.batches(batch_size).collect();
    }
    let per_clean = batch_size.saturating_sub(mix);
    let n_batches = if per_clean == 0 {
        clean.len().div_ceil(batch_size).max(1)
    } else {
        clean.len().div_ceil(per_clean).max(1)
    };
    let mut cursor = 0;
    (0..n_batches)
        .map(|b| {
            let start = (b * per_clean).min(clean.len());
            let end = (start + per_clean).min(clean.len());
            let mut idx_clean: Vec<usize> = (start..end).collect();
            if per_clean == 0 {
                idx_clean.clear();
            }
            let idx_bad: Vec<usize> = (0..mix)
                .map(|_| {
                    let i = cursor % backdoor.len();
                    cursor += 1;
                    i
                })
                .collect();
            let part_clean = clean.select(&idx_clean);
            let part_bad = backdoor.select(&idx_bad);
            let joined = Dataset::concat(&[&part_clean, &part_bad]).expect("same feature width");
            Batch { inputs: joined.features, labels: joined.labels }
        })
        .collect()
}

/// Poisoned update: `attacker_epochs` epochs over batches that each carry
/// `backdoor_per_batch` relabeled samples.
pub fn attacker_update(
    stack: &LayerStack,
    state: &ClientState,
    w_global: &WeightVector,
    schedule: &LocalSchedule,
    attack: &AttackConfig,
) -> Result<WeightVector> {
    if !state.is_attacker {
        return Err(Error::Protocol(format!("client {} is not an attacker", state.id)));
    }
    validate_label_map(&attack.label_map, state.data.train.classes)?;
    let poisoned = LocalSchedule { epochs: attack.attacker_epochs, ..*schedule };
    let backdoor = match &state.backdoor {
        Some(b) if !attack.label_map.is_empty() && !b.is_empty() => b,
        _ => return client_update(stack, state, w_global, &poisoned),
    };
    let batches = attacker_batches(&state.data.train, backdoor, schedule.batch_size, attack.backdoor_per_batch);
    run_sgd(
        stack,
        w_global,
        || Box::new(batches.iter().cloned()),
        poisoned.epochs,
        poisoned.learning_rate,
        |_| Ok(()),
    )
}

fn check_updates(updates: &[WeightVector]) -> Result<()> {
    let first = updates.first().ok_or_else(|| Error::Protocol("no client updates to aggregate".into()))?;
    for u in &updates[1..] {
        first.check_compatible(u)?;
    }
    Ok(())
}

/// Element-wise mean of the uploaded weights.
pub fn aggregate_plain(updates: &[WeightVector]) -> Result<WeightVector> {
    check_updates(updates)?;
    let mut acc = WeightVector::zeros(updates[0].layout().clone());
    for u in updates {
        acc.axpy(1.0, u)?;
    }
    Ok(acc.scale(1.0 / updates.len() as f64))
}

/// Rescales `delta` onto the ball of radius `bound` when it lies outside.
pub fn clip_update(delta: &WeightVector, bound: f64) -> WeightVector {
    let norm = delta.norm();
    if norm <= bound {
        delta.clone()
    } else {
        delta.scale(bound / norm)
    }
}

pub fn gaussian_noise<R: Rng + ?Sized>(template: &WeightVector, std: f64, rng: &mut R) -> Result<NoiseDraw> {
    let mut v = WeightVector::zeros(template.layout().clone());
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(format!("noise: {e}")))?;
        for x in v.values_mut() {
            *x = normal.sample(rng);
        }
    }
    Ok(NoiseDraw::new(v))
}

/// Previous global weights plus the mean clipped update plus one Gaussian draw.
pub fn aggregate_dp<R: Rng + ?Sized>(
    w_prev: &WeightVector,
    updates: &[WeightVector],
    dp: &DpConfig,
    rng: &mut R,
) -> Result<(WeightVector, NoiseDraw)> {
    check_updates(updates)?;
    w_prev.check_compatible(&updates[0])?;
    dp.validate()?;
    let mut mean_delta = WeightVector::zeros(w_prev.layout().clone());
    for u in updates {
        mean_delta.axpy(1.0, &clip_update(&u.sub(w_prev)?, dp.clip_bound))?;
    }
    let mean_delta = mean_delta.scale(1.0 / updates.len() as f64);
    let noise = gaussian_noise(w_prev, dp.noise_std, rng)?;
    let mut w = w_prev.add(&mean_delta)?;
    w.axpy(1.0, &noise.vector)?;
    Ok((w, noise))
}
