//! Scenario configuration, the end-to-end round driver, run logs and their
//! export/comparison.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{allocate, generate_task, AllocationScheme, Dataset, SyntheticTask, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::eval::{gain, model_accuracy, nfl_verdict, train_private_baseline, GainReport, WeightScheme};
use crate::fed::{
    aggregate_dp, aggregate_plain, attacker_update, build_backdoor, client_update, sample_active, AttackConfig,
    ClientState, ClientUpload, DpConfig, FederationConfig, LocalSchedule,
};
use crate::lindt::{dual_client_update, LindtConfig, RecoveryEvent, RecoveryState, RoundSignals, Serving};
use crate::monitor::{weight_divergence, DetectorConfig, DetectorState, MonitorEntry};
use crate::nn::{predict, Activation, LayerStack, WeightVector};
use crate::rng::{stream, Stream};

/// Environment variable overriding the worker-pool size.
pub const WORKERS_ENV: &str = "LINDT_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Rounds between full evaluations; the final round is always evaluated.
    pub cadence: u32,
    /// Evaluations averaged for final-window metrics and the NFL verdict.
    pub final_window: usize,
    /// Epochs for the private baselines; defaults to the expected number of
    /// local epochs a client performs over the whole federated run.
    pub private_epochs: Option<usize>,
    pub weighting: WeightScheme,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { cadence: 5, final_window: 10, private_epochs: None, weighting: WeightScheme::Equal }
    }
}

/// Complete, declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub task: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub allocation: AllocationScheme,
    pub federation: FederationConfig,
    pub dp: DpConfig,
    pub attack: AttackConfig,
    pub detector: DetectorConfig,
    pub lindt: LindtConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            seed: 0,
            task: SyntheticTaskSpec::default(),
            model: ModelConfig::default(),
            allocation: AllocationScheme::default(),
            federation: FederationConfig::default(),
            dp: DpConfig::default(),
            attack: AttackConfig::default(),
            detector: DetectorConfig::default(),
            lindt: LindtConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.federation.validate()?;
        self.dp.validate()?;
        self.attack.validate(&self.federation, self.task.classes)?;
        self.detector.validate()?;
        self.lindt.validate()?;
        if self.eval.cadence == 0 {
            return Err(Error::config("evaluation cadence must be at least 1"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("hidden layers need positive width"));
        }
        Ok(())
    }

    pub fn build_stack(&self) -> Result<LayerStack> {
        let mut widths = vec![self.task.features];
        widths.extend(&self.model.hidden);
        widths.push(self.task.classes);
        LayerStack::mlp(&widths, self.model.activation)
    }

    pub fn private_epochs(&self) -> usize {
        self.eval.private_epochs.unwrap_or_else(|| {
            let f = &self.federation;
            let expected = f.rounds as f64 * f.per_round as f64 / f.clients as f64 * f.local_epochs as f64;
            expected.ceil() as usize
        })
    }
}

/// One row per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub participants: Vec<usize>,
    pub w_div: f64,
    pub noise_norm: f64,
    pub delta: f64,
    pub count: u32,
    pub flag: bool,
    pub central_acc: Option<f64>,
    pub local_acc: Option<f64>,
    pub beta: Option<f64>,
    /// Whether dual models were trained this round.
    pub recovery_active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    NflDetected { round: u32 },
    RecoveryStarted { round: u32 },
    RecoveryStopped { round: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: ScenarioConfig,
    pub code_version: String,
    pub seed: u64,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub header: RunHeader,
    pub rounds: Vec<RoundRecord>,
    pub events: Vec<RunEvent>,
    pub final_gain: Option<GainReport>,
    pub verdict: Option<bool>,
}

impl RunLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn evaluated(&self) -> impl Iterator<Item = &RoundRecord> {
        self.rounds.iter().filter(|r| r.local_acc.is_some())
    }

    /// Mean of `metric` over the last `final_window` rounds that carry it.
    pub fn final_window_mean(&self, metric: Metric) -> Option<f64> {
        let window = self.header.config.eval.final_window.max(1);
        let vals: Vec<f64> = self.rounds.iter().filter_map(|r| metric.of(r)).collect();
        if vals.is_empty() {
            return None;
        }
        let tail = &vals[vals.len().saturating_sub(window)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Hooks into a running simulation.
pub trait RoundObserver {
    /// Every server-bound message passes through here.
    fn on_upload(&mut self, _upload: &ClientUpload) {}
    fn on_round(&mut self, _record: &RoundRecord) {}
}

impl RoundObserver for () {}

/// Stateful round-by-round driver.
pub struct Simulation {
    cfg: ScenarioConfig,
    stack: LayerStack,
    task: SyntheticTask,
    clients: Vec<ClientState>,
    private_acc: Vec<f64>,
    pooled_test: Dataset,
    global: WeightVector,
    detector: DetectorState,
    recovery: RecoveryState,
    sampling_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    round: u32,
    log: RunLog,
}

fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = workers
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        Self::with_workers(cfg, None)
    }

    /// `workers = None` defers to the environment, then to rayon's default.
    pub fn with_workers(cfg: ScenarioConfig, workers: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let pool = worker_pool(workers)?;
        let setup = |e: Error| e.in_phase(0, "setup");
        let stack = cfg.build_stack().map_err(setup)?;
        let task = generate_task(&cfg.task).map_err(setup)?;
        let n = cfg.federation.clients;
        let shares = allocate(&task.data, &cfg.allocation, n, cfg.seed).map_err(setup)?;

        let mut roles = stream(cfg.seed, Stream::Roles);
        let mut is_attacker = vec![false; n];
        for i in index::sample(&mut roles, n, cfg.attack.attacker_count(n)) {
            is_attacker[i] = true;
        }
        let mut clients: Vec<ClientState> = shares.into_iter().map(ClientState::honest).collect();
        for c in clients.iter_mut().filter(|c| is_attacker[c.id]) {
            c.is_attacker = true;
            if !cfg.attack.label_map.is_empty() {
                let per_flip = cfg.attack.backdoor_pool.div_ceil(cfg.attack.label_map.len()).max(1);
                let parts: Vec<Dataset> = cfg
                    .attack
                    .label_map
                    .iter()
                    .map(|f| task.sample_class(f.source, per_flip, &mut roles))
                    .collect();
                let refs: Vec<&Dataset> = parts.iter().collect();
                let pool_data = Dataset::concat(&refs).map_err(setup)?;
                c.backdoor = Some(build_backdoor(&pool_data, &cfg.attack.label_map).map_err(setup)?);
            }
        }

        let global = stack.init_weights(&mut stream(cfg.seed, Stream::Init));
        let private_schedule = LocalSchedule {
            batch_size: cfg.federation.batch_size,
            epochs: cfg.private_epochs(),
            learning_rate: cfg.federation.learning_rate,
        };
        let private: Vec<(WeightVector, f64)> = pool
            .install(|| {
                clients
                    .par_iter()
                    .map(|c| {
                        let p = train_private_baseline(&stack, &c.data, &global, &private_schedule)?;
                        let acc = model_accuracy(&stack, Serving::Global(&p), &c.data.test)?;
                        Ok((p, acc))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .map_err(setup)?;
        let mut private_acc = Vec::with_capacity(n);
        for (c, (p, acc)) in clients.iter_mut().zip(private) {
            c.private_model = Some(p);
            private_acc.push(acc);
        }
        let tests: Vec<&Dataset> = clients.iter().map(|c| &c.data.test).collect();
        let pooled_test = Dataset::concat(&tests).map_err(setup)?;

        let recovery = RecoveryState::new(&cfg.lindt);
        let mut events = Vec::new();
        if let Some(r) = recovery.started_at {
            events.push(RunEvent::RecoveryStarted { round: r });
        }
        let log = RunLog {
            header: RunHeader {
                config: cfg.clone(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: cfg.seed,
                parameters: stack.param_count(),
            },
            rounds: Vec::new(),
            events,
            final_gain: None,
            verdict: None,
        };
        Ok(Self {
            sampling_rng: stream(cfg.seed, Stream::Sampling),
            noise_rng: stream(cfg.seed, Stream::Noise),
            cfg,
            stack,
            task,
            clients,
            private_acc,
            pooled_test,
            global,
            detector: DetectorState::new(),
            recovery,
            pool,
            round: 0,
            log,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global(&self) -> &WeightVector {
        &self.global
    }

    pub fn detector(&self) -> &DetectorState {
        &self.detector
    }

    pub fn recovery(&self) -> &RecoveryState {
        &self.recovery
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn private_accuracy(&self) -> &[f64] {
        &self.private_acc
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.cfg.federation.rounds
    }

    /// The model client `id` currently serves predictions with.
    pub fn serving(&self, id: usize) -> Serving<'_> {
        match (&self.clients[id].local_model, self.recovery.active) {
            (Some(local), true) => Serving::Dual { global: &self.global, local },
            _ => Serving::Global(&self.global),
        }
    }

    pub fn step(&mut self) -> Result<&RoundRecord> {
        self.step_observed(&mut ())
    }

    /// Runs one full round: sampling, local updates, aggregation, monitoring,
    /// recovery control and (on cadence) evaluation.
    pub fn step_observed(&mut self, observer: &mut dyn RoundObserver) -> Result<&RoundRecord> {
        let r = self.round + 1;
        let attacking = self.cfg.attack.active_in(r);
        let attackers: Vec<bool> = self.clients.iter().map(|c| c.is_attacker && attacking).collect();
        let quota = if attacking { self.cfg.attack.per_round } else { 0 };
        let participants = sample_active(self.cfg.federation.per_round, quota, &attackers, &mut self.sampling_rng)
            .map_err(|e| e.in_phase(r, "sampling"))?;

        let uploads = self.train_round(r, &participants, attacking).map_err(|e| e.in_phase(r, "client update"))?;
        for u in &uploads {
            observer.on_upload(u);
        }
        let weights: Vec<WeightVector> = uploads.into_iter().map(|u| u.weights).collect();

        let (next, noise_norm) = if self.cfg.dp.enabled {
            let (w, noise) = aggregate_dp(&self.global, &weights, &self.cfg.dp, &mut self.noise_rng)
                .map_err(|e| e.in_phase(r, "aggregation"))?;
            (w, noise.norm)
        } else {
            (aggregate_plain(&weights).map_err(|e| e.in_phase(r, "aggregation"))?, 0.0)
        };
        self.global = next;

        let w_div = weight_divergence(&weights, &self.global).map_err(|e| e.in_phase(r, "monitor"))?;
        let delta = w_div - noise_norm;
        let entry = MonitorEntry { round: r, w_div, noise_norm, delta };
        if let Some(ev) = self.detector.step(entry, &self.cfg.detector) {
            self.log.events.push(RunEvent::NflDetected { round: ev.round });
        }

        let trained_dual = self.recovery.active;
        let signals = RoundSignals {
            round: r,
            detector_flag: self.detector.flag,
            participants: &participants,
            delta,
            epsilon: self.cfg.detector.epsilon,
            clients: self.clients.len(),
        };
        match self.recovery.update(&signals, &self.cfg.lindt) {
            Some(RecoveryEvent::Started { round }) => self.log.events.push(RunEvent::RecoveryStarted { round }),
            Some(RecoveryEvent::Stopped { round }) => self.log.events.push(RunEvent::RecoveryStopped { round }),
            None => {}
        }

        let mut record = RoundRecord {
            round: r,
            participants,
            w_div,
            noise_norm,
            delta,
            count: self.detector.count,
            flag: self.detector.flag,
            central_acc: None,
            local_acc: None,
            beta: None,
            recovery_active: trained_dual,
        };
        let last = r == self.cfg.federation.rounds;
        if r.is_multiple_of(self.cfg.eval.cadence) || last {
            let report = self.evaluate(r).map_err(|e| e.in_phase(r, "evaluation"))?;
            record.central_acc = Some(report.0);
            record.local_acc = Some(report.1);
            record.beta = Some(report.2.beta);
            if last {
                self.log.final_gain = Some(report.2);
            }
        }
        self.round = r;
        observer.on_round(&record);
        self.log.rounds.push(record);
        if last {
            let betas: Vec<f64> = self.log.rounds.iter().filter_map(|x| x.beta).collect();
            self.log.verdict = nfl_verdict(&betas, self.cfg.eval.final_window).ok();
        }
        Ok(self.log.rounds.last().expect("just pushed"))
    }

    fn train_round(&mut self, round: u32, participants: &[usize], attacking: bool) -> Result<Vec<ClientUpload>> {
        let schedule = self.cfg.federation.schedule(round);
        let dual = self.recovery.active;
        let (stack, global, attack) = (&self.stack, &self.global, &self.cfg.attack);
        let mut chosen: Vec<&mut ClientState> =
            self.clients.iter_mut().filter(|c| participants.binary_search(&c.id).is_ok()).collect();
        self.pool.install(|| {
            chosen
                .par_iter_mut()
                .map(|client| {
                    let weights = if client.is_attacker && attacking {
                        attacker_update(stack, client, global, &schedule, attack)?
                    } else if dual && !client.is_attacker {
                        let local = client.local_model.get_or_insert_with(|| global.clone());
                        let out = dual_client_update(stack, &client.data.train, global, local, &schedule)?;
                        *local = out.local;
                        out.global
                    } else {
                        client_update(stack, client, global, &schedule)?
                    };
                    Ok(ClientUpload { client: client.id, round, weights })
                })
                .collect()
        })
    }

    /// Central accuracy, honest clients' mean local accuracy, and the gain report.
    fn evaluate(&self, round: u32) -> Result<(f64, f64, GainReport)> {
        let central = crate::eval::accuracy(
            &predict(&self.stack, &self.global, &self.pooled_test.features.view())?,
            &self.pooled_test.labels,
        );
        let honest: Vec<&ClientState> = self.clients.iter().filter(|c| !c.is_attacker).collect();
        let accs: Vec<f64> = self.pool.install(|| {
            honest
                .par_iter()
                .map(|c| model_accuracy(&self.stack, self.serving(c.id), &c.data.test))
                .collect::<Result<Vec<_>>>()
        })?;
        let local = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        let entries: Vec<(usize, f64, f64, usize)> = honest
            .iter()
            .zip(&accs)
            .map(|(c, &acc)| (c.id, acc, self.private_acc[c.id], c.data.size()))
            .collect();
        let report = gain(round, &entries, &self.cfg.eval.weighting)?;
        Ok((central, local, report))
    }

    pub fn run_to_end(mut self, observer: &mut dyn RoundObserver) -> Result<RunLog> {
        while !self.is_finished() {
            self.step_observed(observer)?;
        }
        Ok(self.log)
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }
}

/// Executes every round of `cfg` and returns the complete log.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunLog> {
    Simulation::new(cfg.clone())?.run_to_end(&mut ())
}

pub fn run_scenario_with_workers(cfg: &ScenarioConfig, workers: usize) -> Result<RunLog> {
    Simulation::with_workers(cfg.clone(), Some(workers))?.run_to_end(&mut ())
}

/// Per-round quantities that can be compared across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    WDiv,
    NoiseNorm,
    Delta,
    CentralAcc,
    LocalAcc,
    Beta,
}

impl Metric {
    pub fn of(self, r: &RoundRecord) -> Option<f64> {
        match self {
            Metric::WDiv => Some(r.w_div),
            Metric::NoiseNorm => Some(r.noise_norm),
            Metric::Delta => Some(r.delta),
            Metric::CentralAcc => r.central_acc,
            Metric::LocalAcc => r.local_acc,
            Metric::Beta => r.beta,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::WDiv => "w_div",
            Metric::NoiseNorm => "noise_norm",
            Metric::Delta => "delta",
            Metric::CentralAcc => "central_acc",
            Metric::LocalAcc => "local_acc",
            Metric::Beta => "beta",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Metric::WDiv, Metric::NoiseNorm, Metric::Delta, Metric::CentralAcc, Metric::LocalAcc, Metric::Beta]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub round: u32,
    pub values: Vec<Option<f64>>,
    /// max − min over the runs that carry a value this round.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: Metric,
    pub runs: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub final_window_means: Vec<Option<f64>>,
}

/// Aligns `metric` across runs over their shared horizon.
pub fn compare_runs(logs: &[RunLog], metric: Metric) -> Result<Comparison> {
    let first = logs.first().ok_or_else(|| Error::Comparison("no runs to compare".into()))?;
    for log in &logs[1..] {
        if log.header.config.task != first.header.config.task {
            return Err(Error::Comparison(format!(
                "run {:?} uses a different task than {:?}",
                log.header.config.name, first.header.config.name
            )));
        }
    }
    let horizon = logs.iter().map(|l| l.rounds.len()).min().unwrap_or(0);
    let rows = (0..horizon)
        .map(|i| {
            let values: Vec<Option<f64>> = logs.iter().map(|l| metric.of(&l.rounds[i])).collect();
            let present: Vec<f64> = values.iter().flatten().copied().collect();
            let spread = (!present.is_empty()).then(|| {
                present.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - present.iter().cloned().fold(f64::INFINITY, f64::min)
            });
            ComparisonRow { round: first.rounds[i].round, values, spread }
        })
        .collect();
    Ok(Comparison {
        metric,
        runs: logs.iter().map(|l| l.header.config.name.clone()).collect(),
        rows,
        final_window_means: logs.iter().map(|l| l.final_window_mean(metric)).collect(),
    })
}

impl Comparison {
    pub fn write_table<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round".to_string()];
        header.extend(self.runs.iter().cloned());
        header.push("spread".into());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.round.to_string()];
            rec.extend(row.values.iter().map(fmt_opt));
            rec.push(fmt_opt(&row.spread));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["final_window_mean".to_string()];
        rec.extend(self.final_window_means.iter().map(fmt_opt));
        rec.push(String::new());
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }
}

fn fmt_opt(v: &Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Column names of the flat per-round metrics table.
pub const TABLE_COLUMNS: [&str; 10] = [
    "round",
    "w_div",
    "noise_norm",
    "delta",
    "count",
    "flag",
    "central_acc",
    "local_acc",
    "beta",
    "recovery_active",
];

pub fn write_table<W: Write>(log: &RunLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_COLUMNS)?;
    for r in &log.rounds {
        w.write_record([
            r.round.to_string(),
            r.w_div.to_string(),
            r.noise_norm.to_string(),
            r.delta.to_string(),
            r.count.to_string(),
            r.flag.to_string(),
            fmt_opt(&r.central_acc),
            fmt_opt(&r.local_acc),
            fmt_opt(&r.beta),
            r.recovery_active.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn table_string(log: &RunLog) -> Result<String> {
    let mut buf = Vec::new();
    write_table(log, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Table,
    Log,
}

/// Writes the log into `dir` as `<name>.json` and/or `<name>.csv`; returns the paths written.
pub fn export(log: &RunLog, dir: &Path, formats: &[ExportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let stem = if log.header.config.name.is_empty() { "run" } else { &log.header.config.name };
    let mut written = Vec::new();
    for f in formats {
        let path = match f {
            ExportFormat::Log => {
                let p = dir.join(format!("{stem}.json"));
                fs::write(&p, log.to_json()?)?;
                p
            }
            ExportFormat::Table => {
                let p = dir.join(format!("{stem}.csv"));
                write_table(log, fs::File::create(&p)?)?;
                p
            }
        };
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub identical: bool,
    pub first_mismatch: Option<u32>,
    pub replayed: RunLog,
}

/// Re-executes the configuration recorded in `log` and compares the result.
pub fn replay(log: &RunLog, workers: Option<usize>) -> Result<ReplayReport> {
    let replayed = Simulation::with_workers(log.header.config.clone(), workers)?.run_to_end(&mut ())?;
    let first_mismatch = log
        .rounds
        .iter()
        .zip(&replayed.rounds)
        .find(|(a, b)| a != b)
        .map(|(a, _)| a.round)
        .or_else(|| {
            (log.rounds.len() != replayed.rounds.len())
                .then(|| log.rounds.len().min(replayed.rounds.len()) as u32 + 1)
        });
    Ok(ReplayReport { identical: replayed == *log, first_mismatch, replayed })
}

/// Copy of `cfg` under another seed, named accordingly.
pub fn with_seed(cfg: &ScenarioConfig, seed: u64) -> ScenarioConfig {
    ScenarioConfig { seed, name: format!("{}-s{seed}", cfg.name), ..cfg.clone() }
}
