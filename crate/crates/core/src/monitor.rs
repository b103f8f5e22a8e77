//! Server-side NFL monitoring: weight divergence, the noise-corrected signal
//! Δ, the threshold counter, and an analytic divergence bound for
//! softmax-regression federations.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::NoiseDraw;
use crate::nn::{loss_and_grad, LayerStack, WeightVector};

/// Mean Euclidean distance between the uploads and their aggregate.
pub fn weight_divergence(updates: &[WeightVector], w_agg: &WeightVector) -> Result<f64> {
    if updates.is_empty() {
        return Err(Error::Protocol("weight divergence over zero updates".into()));
    }
    let mut total = 0.0;
    for u in updates {
        total += u.distance(w_agg)?;
    }
    Ok(total / updates.len() as f64)
}

/// `w_div − ‖noise‖`; without DP noise this is `w_div` itself.
pub fn delta(w_div: f64, noise: Option<&NoiseDraw>) -> f64 {
    w_div - noise.map_or(0.0, |n| n.norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Threshold ε on Δ.
    pub epsilon: f64,
    /// Rounds r′ with Δ > ε tolerated before NFL is reported.
    pub patience: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, patience: 50 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("detector epsilon must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("detector patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorEntry {
    pub round: u32,
    pub w_div: f64,
    pub noise_norm: f64,
    pub delta: f64,
}

/// Emitted exactly once, in the round the counter first exceeds r′.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NflDetected {
    pub round: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub count: u32,
    pub flag: bool,
    pub history: Vec<MonitorEntry>,
}

impl DetectorState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one round; the flag is sticky.
    pub fn step(&mut self, entry: MonitorEntry, cfg: &DetectorConfig) -> Option<NflDetected> {
        if entry.delta > cfg.epsilon {
            self.count += 1;
        }
        self.history.push(entry);
        if self.count > cfg.patience && !self.flag {
            self.flag = true;
            return Some(NflDetected { round: entry.round });
        }
        None
    }
}

/// Functional form of [`DetectorState::step`].
pub fn detector_step(
    mut state: DetectorState,
    entry: MonitorEntry,
    cfg: &DetectorConfig,
) -> (DetectorState, Option<NflDetected>) {
    let ev = state.step(entry, cfg);
    (state, ev)
}

/// Largest eigenvalue of `diag(p) − p pᵀ` over the probability simplex.
const SOFTMAX_CURVATURE: f64 = 0.5;

/// Upper bound on the Lipschitz constant of the class-`y` expected gradient of
/// softmax regression: `½ · mean(‖x‖² + 1)` over the class's samples.
pub fn estimate_lipschitz_logistic(data: &Dataset, y: usize) -> f64 {
    let idx = data.indices_of_class(y);
    if idx.is_empty() {
        return 0.0;
    }
    let sum: f64 = idx
        .iter()
        .map(|&i| {
            let row = data.features.row(i);
            row.dot(&row) + 1.0
        })
        .sum();
    SOFTMAX_CURVATURE * sum / idx.len() as f64
}

/// `max_y ‖∇ E_{x|y} ℓ(w)‖` over the given per-class sample sets.
pub fn class_gradient_max(stack: &LayerStack, per_class: &[Dataset], w: &WeightVector) -> Result<f64> {
    let mut best: f64 = 0.0;
    for data in per_class.iter().filter(|d| !d.is_empty()) {
        let (_, g) = loss_and_grad(stack, w, &data.as_batch()?)?;
        best = best.max(g.norm());
    }
    Ok(best)
}

/// Inputs of the divergence bound for one round over the active clients.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    /// `p_i(y)` per active client.
    pub priors: Vec<Vec<f64>>,
    /// `λ_{x|y}` per class.
    pub lipschitz: Vec<f64>,
    /// `g_max` at the weights before each of the T local steps, per active client.
    pub g_max: Vec<Vec<f64>>,
    pub learning_rate: f64,
    /// Norm of the round's DP noise (zero without DP).
    pub noise_norm: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        let k = self.priors.len();
        if k == 0 || self.g_max.len() != k {
            return Err(Error::config("bound needs priors and g_max traces for every active client"));
        }
        let steps = self.g_max[0].len();
        if steps == 0 || self.g_max.iter().any(|t| t.len() != steps) {
            return Err(Error::config("all g_max traces need the same positive length T"));
        }
        for p in &self.priors {
            if p.len() != self.lipschitz.len() {
                return Err(Error::config("priors and Lipschitz constants differ in class count"));
            }
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config("class priors must sum to one"));
            }
        }
        let finite = self.priors.iter().flatten().chain(&self.lipschitz).chain(self.g_max.iter().flatten());
        if finite.clone().any(|v| !v.is_finite()) || !self.learning_rate.is_finite() {
            return Err(Error::config("bound inputs must be finite"));
        }
        if self.lipschitz.iter().any(|&l| l < 0.0) {
            return Err(Error::config("Lipschitz constants must be non-negative"));
        }
        Ok(())
    }

    /// The distribution-difference term (everything except the noise norm).
    pub fn divergence_term(&self) -> Result<f64> {
        self.validate()?;
        let k = self.priors.len();
        let steps = self.g_max[0].len();
        let eta = self.learning_rate;
        let mut total = 0.0;
        for i in 0..k {
            let a_i = 1.0
                + eta * self.lipschitz.iter().zip(&self.priors[i]).map(|(l, p)| l * p).sum::<f64>();
            for j in (0..k).filter(|&j| j != i) {
                let spread: f64 =
                    self.priors[i].iter().zip(&self.priors[j]).map(|(a, b)| (a - b).abs()).sum();
                let growth: f64 = (0..steps).map(|t| a_i.powi(t as i32) * self.g_max[j][steps - 1 - t]).sum();
                total += spread * growth;
            }
        }
        Ok(eta / (k * k) as f64 * total)
    }
}

/// Right-hand side of the divergence bound; only defined for a single
/// affine layer with softmax output.
pub fn prop1_bound(stack: &LayerStack, inputs: &BoundInputs) -> Result<f64> {
    if stack.depth() != 1 {
        return Err(Error::UnsupportedModel(format!(
            "divergence bound needs a single affine layer, got {} layers",
            stack.depth()
        )));
    }
    Ok(inputs.noise_norm + inputs.divergence_term()?)
}
