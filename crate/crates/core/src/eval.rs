//! Accuracy metrics, private baselines and the performance gain β.

use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::fed::{train_local, LocalSchedule};
use crate::lindt::{local_predict, Serving};
use crate::nn::{predict, LayerStack, WeightVector};

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

pub fn model_accuracy(stack: &LayerStack, serving: Serving<'_>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("accuracy on an empty test set"));
    }
    let pred = local_predict(stack, serving, &data.features.view())?;
    Ok(accuracy(&pred, &data.labels))
}

/// Trains the client's reference model on its own data only.
pub fn train_private_baseline(
    stack: &LayerStack,
    data: &ClientDataset,
    init: &WeightVector,
    schedule: &LocalSchedule,
) -> Result<WeightVector> {
    train_local(stack, &data.train, init, schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "weights", rename_all = "snake_case")]
pub enum WeightScheme {
    Equal,
    BySize,
    Custom(Vec<f64>),
}

impl WeightScheme {
    pub fn weights(&self, sizes: &[usize]) -> Result<Vec<f64>> {
        let n = sizes.len();
        match self {
            WeightScheme::Equal => Ok(vec![1.0 / n as f64; n]),
            WeightScheme::BySize => {
                let total: usize = sizes.iter().sum();
                if total == 0 {
                    return Err(Error::config("size weights over empty clients"));
                }
                Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
            }
            WeightScheme::Custom(alpha) => {
                if alpha.len() != n {
                    return Err(Error::config(format!("{} custom weights for {n} clients", alpha.len())));
                }
                if (alpha.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::config("custom weights must sum to 1"));
                }
                Ok(alpha.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientGain {
    pub client: usize,
    /// Accuracy of the serving federated model on the client's test split.
    pub federated: f64,
    /// Accuracy of the private model on the same split.
    pub private: f64,
    pub gain: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub round: u32,
    pub scheme: WeightScheme,
    pub clients: Vec<ClientGain>,
    pub beta: f64,
}

/// Per-client gains `V_G − V_P` and their weighted sum.
pub fn gain(round: u32, entries: &[(usize, f64, f64, usize)], scheme: &WeightScheme) -> Result<GainReport> {
    if entries.is_empty() {
        return Err(Error::config("gain over zero clients"));
    }
    let sizes: Vec<usize> = entries.iter().map(|e| e.3).collect();
    let alpha = scheme.weights(&sizes)?;
    let clients: Vec<ClientGain> = entries
        .iter()
        .map(|&(client, federated, private, size)| ClientGain {
            client,
            federated,
            private,
            gain: federated - private,
            size,
        })
        .collect();
    let beta = clients.iter().zip(&alpha).map(|(c, a)| a * c.gain).sum();
    Ok(GainReport { round, scheme: scheme.clone(), clients, beta })
}

/// True when β went negative in any of the final `window` reports.
pub fn nfl_verdict(betas: &[f64], window: usize) -> Result<bool> {
    if window == 0 || betas.len() < window {
        return Err(Error::InsufficientData { needed: window.max(1), available: betas.len() });
    }
    Ok(betas[betas.len() - window..].iter().any(|&b| b < 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySnapshot {
    pub round: u32,
    /// Global model on the pooled test data.
    pub central: f64,
    /// Unweighted mean of each client's serving-model accuracy on its own test split.
    pub local: f64,
}

pub fn central_and_local_accuracy(
    stack: &LayerStack,
    round: u32,
    global: &WeightVector,
    serving: &[Serving<'_>],
    pooled_test: &Dataset,
    client_tests: &[&Dataset],
) -> Result<AccuracySnapshot> {
    if serving.len() != client_tests.len() || client_tests.is_empty() {
        return Err(Error::config("one serving model per client test set is required"));
    }
    if pooled_test.is_empty() {
        return Err(Error::config("empty pooled test set"));
    }
    let central = accuracy(&predict(stack, global, &pooled_test.features.view())?, &pooled_test.labels);
    let mut local = 0.0;
    for (s, test) in serving.iter().zip(client_tests) {
        local += model_accuracy(stack, *s, test)?;
    }
    Ok(AccuracySnapshot { round, central, local: local / client_tests.len() as f64 })
}
