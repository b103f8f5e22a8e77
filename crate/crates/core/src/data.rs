//! Synthetic classification tasks and their allocation across clients.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{stream, Stream};

/// Share of each client's samples held out for testing.
pub const TEST_FRACTION: f64 = 0.1;

/// Gaussian class clusters around means placed on a sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub features: usize,
    /// Radius of the sphere the class means sit on.
    pub separation: f64,
    /// Within-class standard deviation.
    pub noise_std: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self { classes: 4, features: 16, separation: 2.0, noise_std: 1.0, samples: 4000, seed: 0 }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("task needs at least 2 classes"));
        }
        if self.features < 2 {
            return Err(Error::config("task needs at least 2 features"));
        }
        if !(self.separation > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::config("separation and noise_std must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::config("task needs at least one sample"));
        }
        Ok(())
    }
}

/// Labeled samples; one row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::config("feature rows and labels differ in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn empty(features: usize, classes: usize) -> Self {
        Self { features: Array2::zeros((0, features)), labels: Vec::new(), classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Empirical class distribution; all zeros for an empty set.
    pub fn histogram(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.class_counts()
            .into_iter()
            .map(|c| if n > 0.0 { c as f64 / n } else { 0.0 })
            .collect()
    }

    pub fn indices_of_class(&self, y: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == y).map(|(i, _)| i).collect()
    }

    pub fn class_subset(&self, y: usize) -> Dataset {
        self.select(&self.indices_of_class(y))
    }

    /// Whole set as one batch.
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())
    }

    /// Consecutive batches of at most `size` samples, in storage order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            Batch {
                inputs: self.features.slice(ndarray::s![start..end, ..]).to_owned(),
                labels: self.labels[start..end].to_vec(),
            }
        })
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::config("nothing to concatenate"))?;
        let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::config(format!("cannot concatenate datasets: {e}")))?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        Ok(Dataset { features, labels, classes: first.classes })
    }
}

/// Generated task: the cluster means plus the pooled sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub means: Array2<f64>,
    pub data: Dataset,
}

impl SyntheticTask {
    /// Fresh draws from class `y`'s cluster.
    pub fn sample_class<R: Rng + ?Sized>(&self, y: usize, count: usize, rng: &mut R) -> Dataset {
        let d = self.spec.features;
        let mut features = Array2::zeros((count, d));
        for mut row in features.outer_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *v = self.means[[y, k]] + self.spec.noise_std * z;
            }
        }
        Dataset { features, labels: vec![y; count], classes: self.spec.classes }
    }
}

/// Draws `spec.samples` points, class `i % C` for the i-th sample.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Data);
    let (c, d) = (spec.classes, spec.features);
    let mut means = Array2::zeros((c, d));
    for mut row in means.outer_iter_mut() {
        let dir: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.dot(&dir).sqrt().max(f64::MIN_POSITIVE);
        row.assign(&(dir * (spec.separation / norm)));
    }
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % c).collect();
    let mut features = Array2::zeros((spec.samples, d));
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        let y = labels[i];
        for (k, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = means[[y, k]] + spec.noise_std * z;
        }
    }
    Ok(SyntheticTask { spec: spec.clone(), means, data: Dataset { features, labels, classes: c } })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedGroup {
    pub clients: usize,
    pub classes_per_client: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Partition {
    Iid,
    NonIid { classes_per_client: usize },
    Mixed { groups: Vec<MixedGroup> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeDistribution {
    Equal,
    LogNormal { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationScheme {
    pub partition: Partition,
    pub sizes: SizeDistribution,
}

impl Default for AllocationScheme {
    fn default() -> Self {
        Self { partition: Partition::Iid, sizes: SizeDistribution::Equal }
    }
}

/// One client's share of the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Empirical class distribution of `train`.
    pub histogram: Vec<f64>,
}

impl ClientDataset {
    pub fn new(id: usize, train: Dataset, test: Dataset) -> Self {
        let histogram = train.histogram();
        Self { id, train, test, histogram }
    }

    /// Train plus test samples.
    pub fn size(&self) -> usize {
        self.train.len() + self.test.len()
    }
}

/// Apportions `total` integer units by `weights` (largest remainder, ties by index).
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

fn target_sizes<R: Rng + ?Sized>(
    sizes: &SizeDistribution,
    n: usize,
    clients: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mean = n as f64 / clients as f64;
    match *sizes {
        SizeDistribution::Equal => Ok(vec![mean; clients]),
        SizeDistribution::LogNormal { sigma } => {
            if !(sigma >= 0.0) {
                return Err(Error::config("log-normal sigma must be non-negative"));
            }
            // location chosen so the distribution mean equals n / N
            let dist = LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma)
                .map_err(|e| Error::config(format!("log-normal sizes: {e}")))?;
            let raw: Vec<f64> = (0..clients).map(|_| dist.sample(rng)).collect();
            let sum: f64 = raw.iter().sum();
            Ok(raw.into_iter().map(|s| s * n as f64 / sum).collect())
        }
    }
}

fn classes_per_client(partition: &Partition, classes: usize, clients: usize) -> Result<Vec<usize>> {
    let ks = match partition {
        Partition::Iid => vec![classes; clients],
        Partition::NonIid { classes_per_client } => vec![*classes_per_client; clients],
        Partition::Mixed { groups } => {
            let total: usize = groups.iter().map(|g| g.clients).sum();
            if total != clients {
                return Err(Error::config(format!(
                    "mixed groups cover {total} clients but the federation has {clients}"
                )));
            }
            groups.iter().flat_map(|g| std::iter::repeat_n(g.classes_per_client, g.clients)).collect()
        }
    };
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > classes) {
        return Err(Error::config(format!("{k} classes per client is infeasible with {classes} classes")));
    }
    let slots: usize = ks.iter().sum();
    if slots < classes {
        return Err(Error::config(format!("{slots} class slots cannot cover {classes} classes")));
    }
    Ok(ks)
}

/// Minimum samples a client receives from each class it holds.
const MIN_PER_CLASS: usize = 2;

/// Partitions `dataset` over `clients` clients.
///
/// Classes are dealt to clients from a shuffled cyclic schedule so that each
/// client holds exactly its configured number of distinct classes and class
/// load stays balanced; every class's samples are then split among its holders
/// in proportion to the holders' target sizes.
pub fn allocate(
    dataset: &Dataset,
    scheme: &AllocationScheme,
    clients: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if clients == 0 {
        return Err(Error::config("federation needs at least one client"));
    }
    let mut rng = stream(seed, Stream::Data);
    let c = dataset.classes;
    let ks = classes_per_client(&scheme.partition, c, clients)?;
    let targets = target_sizes(&scheme.sizes, dataset.len(), clients, &mut rng)?;

    let mut class_order: Vec<usize> = (0..c).collect();
    class_order.shuffle(&mut rng);
    let mut client_order: Vec<usize> = (0..clients).collect();
    client_order.shuffle(&mut rng);
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut cursor = 0;
    for &i in &client_order {
        for j in 0..ks[i] {
            holders[class_order[(cursor + j) % c]].push(i);
        }
        cursor = (cursor + ks[i]) % c;
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (y, hs) in holders.iter().enumerate() {
        if hs.is_empty() {
            continue;
        }
        let mut idx = dataset.indices_of_class(y);
        if idx.len() < hs.len() * MIN_PER_CLASS {
            return Err(Error::config(format!(
                "class {y} has {} samples, too few for {} holders",
                idx.len(),
                hs.len()
            )));
        }
        idx.shuffle(&mut rng);
        let weights: Vec<f64> = hs.iter().map(|&i| targets[i] / ks[i] as f64).collect();
        let extra = apportion(idx.len() - hs.len() * MIN_PER_CLASS, &weights);
        let mut start = 0;
        for (h, &i) in hs.iter().enumerate() {
            let take = MIN_PER_CLASS + extra[h];
            members[i].extend_from_slice(&idx[start..start + take]);
            start += take;
        }
    }

    members
        .into_iter()
        .enumerate()
        .map(|(id, mut own)| {
            own.shuffle(&mut rng);
            let (train, test) = stratified_split(dataset, &own);
            Ok(ClientDataset::new(id, dataset.select(&train), dataset.select(&test)))
        })
        .collect()
}

/// Per-class holdout so train and test share the client's class mix.
fn stratified_split(dataset: &Dataset, own: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for &i in own {
        by_class[dataset.labels[i]].push(i);
    }
    let mut test_mask = vec![false; own.len()];
    let pos: std::collections::HashMap<usize, usize> =
        own.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    for members in &by_class {
        let m = members.len();
        let t = ((m as f64 * TEST_FRACTION).round() as usize).min(m.saturating_sub(1));
        for &i in members.iter().take(t) {
            test_mask[pos[&i]] = true;
        }
    }
    if !test_mask.iter().any(|&t| t) {
        if let Some(largest) = by_class.iter().max_by_key(|m| m.len()).filter(|m| m.len() >= 2) {
            test_mask[pos[&largest[0]]] = true;
        }
    }
    let train = own.iter().zip(&test_mask).filter(|(_, &t)| !t).map(|(&i, _)| i).collect();
    let test = own.iter().zip(&test_mask).filter(|(_, &t)| t).map(|(&i, _)| i).collect();
    (train, test)
}

/// Writes client datasets as `client,split,label,x0,...` rows.
pub fn export_clients<W: Write>(clients: &[ClientDataset], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = clients.first().map(|c| c.train.dim()).unwrap_or(0);
    let mut header = vec!["client".to_string(), "split".into(), "label".into()];
    header.extend((0..dim).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for client in clients {
        for (split, data) in [("train", &client.train), ("test", &client.test)] {
            for (row, &y) in data.features.outer_iter().zip(&data.labels) {
                let mut rec = vec![client.id.to_string(), split.to_string(), y.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`export_clients`].
pub fn import_clients<R: Read>(input: R, classes: usize) -> Result<Vec<ClientDataset>> {
    let mut reader = csv::Reader::from_reader(input);
    let dim = reader.headers()?.len().saturating_sub(3);
    type Rows = (Vec<f64>, Vec<usize>);
    let mut parts: Vec<(Rows, Rows)> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Parse(format!("bad {what} in row {:?}", rec.position()));
        let id: usize = rec[0].parse().map_err(|_| parse_err("client id"))?;
        let y: usize = rec[2].parse().map_err(|_| parse_err("label"))?;
        let xs = (3..3 + dim)
            .map(|k| rec[k].parse::<f64>().map_err(|_| parse_err("feature")))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() <= id {
            parts.resize_with(id + 1, Default::default);
        }
        let target = match &rec[1] {
            "train" => &mut parts[id].0,
            "test" => &mut parts[id].1,
            other => return Err(Error::Parse(format!("unknown split {other:?}"))),
        };
        target.0.extend(xs);
        target.1.push(y);
    }
    let build = |(xs, ys): Rows| -> Result<Dataset> {
        let rows = ys.len();
        let features = Array2::from_shape_vec((rows, dim), xs)
            .map_err(|e| Error::Parse(format!("ragged feature rows: {e}")))?;
        Dataset::new(features, ys, classes)
    };
    parts
        .into_iter()
        .enumerate()
        .map(|(id, (train, test))| Ok(ClientDataset::new(id, build(train)?, build(test)?)))
        .collect()
}
