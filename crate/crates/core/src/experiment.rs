//! End-to-end runs on simulated worlds: configuration, the online pipeline,
//! stream-fraction curves, parameter sweeps and determinism digests.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::FrameIndex;
use crate::memory::{AuditReport, DumpFormat, MemoryCosts, ObjectMemory};
use crate::metrics::{evaluate_run, MetricsReport, Prediction, QueryEvaluation};
use crate::population::{ObjectDiscoverer, ObjectTracker, OmpConfig, Population, PopulationReport, StepReport};
use crate::relevance::{DistinctivenessAssessor, RelevanceLabeler, RelevanceStrategy};
use crate::retrieval::{localize, CosineUnit, RetrievalResult};
use crate::sim::patch::{derive_seed, SimEmbedder, SimPatchExtractor};
use crate::sim::{
    generate, offline_backward_scan, sample_queries, sample_queries_at, NoiseConfig, NoisyDiscoverer, NoisyTracker,
    OracleDiscoverer, OracleTracker, QuerySampling, VisualQuery, World, WorldConfig,
};

const WORLD_STREAM: u64 = 1;
const TRACKER_STREAM: u64 = 2;
const DISCOVERER_STREAM: u64 = 3;
const EXTRACTOR_STREAM: u64 = 4;
const QUERY_SEED_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PerceptionMode {
    #[default]
    Oracle,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PerceptionConfig {
    pub discoverer: PerceptionMode,
    pub tracker: PerceptionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QrlConfig {
    pub lambda_ret: f64,
}

impl Default for QrlConfig {
    fn default() -> Self {
        Self { lambda_ret: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub count: usize,
    /// Ask every query after the last frame; otherwise at random times.
    pub at_stream_end: bool,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            count: 200,
            at_stream_end: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub perception: PerceptionConfig,
    pub noise: NoiseConfig,
    pub omp: OmpConfig,
    pub qrl: QrlConfig,
    pub queries: QueryConfig,
    /// Memory cap in bytes; unbounded when absent.
    pub budget_cap: Option<u64>,
    pub costs: MemoryCosts,
    pub dump_format: DumpFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            perception: PerceptionConfig::default(),
            noise: NoiseConfig::default(),
            omp: OmpConfig::default(),
            qrl: QrlConfig::default(),
            queries: QueryConfig::default(),
            budget_cap: None,
            costs: MemoryCosts::default(),
            dump_format: DumpFormat::Json,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.noise.validate()?;
        self.omp.validate()?;
        if !(0.0..=1.0).contains(&self.qrl.lambda_ret) {
            return Err(Error::Config(format!("qrl.lambda_ret = {} is outside [0, 1]", self.qrl.lambda_ret)));
        }
        if self.budget_cap == Some(0) {
            return Err(Error::Config("budget_cap must be positive".into()));
        }
        if self.costs.frame_bytes == 0 || self.costs.patch_bytes == 0 {
            return Err(Error::Config("payload costs must be positive".into()));
        }
        Ok(())
    }

    pub fn world_seed(&self) -> u64 {
        derive_seed(self.seed, &[WORLD_STREAM])
    }

    pub fn generate_world(&self) -> Result<World> {
        generate(&self.world, self.world_seed())
    }

    pub fn sample_queries(&self, world: &World) -> Vec<VisualQuery> {
        let sampling = QuerySampling {
            noise_sigma: self.noise.embedder.feature_sigma,
            at_stream_end: self.queries.at_stream_end,
        };
        sample_queries(world, self.queries.count, derive_seed(self.seed, &[QUERY_SEED_STREAM]), &sampling)
    }

    /// Tracker, discoverer and relevance labeler for one run.
    pub fn population(&self, world: &World) -> Result<Population> {
        let tracker: Box<dyn ObjectTracker> = match self.perception.tracker {
            PerceptionMode::Oracle => Box::new(OracleTracker::default()),
            PerceptionMode::Noisy => Box::new(NoisyTracker::new(
                self.noise.tracker,
                derive_seed(self.seed, &[TRACKER_STREAM]),
            )),
        };
        let discoverer: Box<dyn ObjectDiscoverer> = match self.perception.discoverer {
            PerceptionMode::Oracle => Box::new(OracleDiscoverer),
            PerceptionMode::Noisy => Box::new(NoisyDiscoverer::new(
                self.noise.detector,
                (world.config.frame_width, world.config.frame_height),
                derive_seed(self.seed, &[DISCOVERER_STREAM]),
            )),
        };
        let extractor = Arc::new(SimPatchExtractor {
            noise_sigma: self.noise.embedder.feature_sigma,
            seed: derive_seed(self.seed, &[EXTRACTOR_STREAM]),
            dim: world.config.appearance_dim,
        });
        let labeler = RelevanceLabeler::new(
            self.omp.strategy,
            Arc::new(DistinctivenessAssessor {
                threshold: self.omp.assessor_threshold,
            }),
        );
        Ok(Population::new(self.omp, tracker, discoverer, extractor, labeler)?.with_budget(self.budget_cap))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Run the full memory audit after every step and fail on findings.
    pub audit_every_step: bool,
    pub record_steps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u64,
    pub object_gt: u64,
    pub query_t: FrameIndex,
    pub result: RetrievalResult,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub world: World,
    pub queries: Vec<VisualQuery>,
    pub population: PopulationReport,
    pub steps: Vec<StepReport>,
    pub results: Vec<QueryRecord>,
    pub evaluations: Vec<QueryEvaluation>,
    pub metrics: MetricsReport,
    pub memory: ObjectMemory,
    pub audit: AuditReport,
}

impl ExperimentOutcome {
    /// Digest over every deterministic output of the run.
    pub fn digest(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Outputs<'a> {
            config: &'a ExperimentConfig,
            world: &'a World,
            queries: &'a [VisualQuery],
            population: &'a PopulationReport,
            results: &'a [QueryRecord],
            evaluations: &'a [QueryEvaluation],
            metrics: &'a MetricsReport,
            memory: crate::memory::MemoryDump,
        }
        digest_without_timing(&Outputs {
            config: &self.config,
            world: &self.world,
            queries: &self.queries,
            population: &self.population,
            results: &self.results,
            evaluations: &self.evaluations,
            metrics: &self.metrics,
            memory: self.memory.to_dump(),
        })
    }
}

pub fn evaluation_for(query: &VisualQuery, result: &RetrievalResult) -> QueryEvaluation {
    QueryEvaluation {
        query_id: query.query_id,
        prediction: result.track.clone().map(|track| Prediction {
            track,
            score: result.score,
        }),
        ground_truth: query.ground_truth.clone(),
    }
}

/// Generates the world and queries from `config` and runs the pipeline.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<ExperimentOutcome> {
    config.validate()?;
    let world = config.generate_world()?;
    let queries = config.sample_queries(&world);
    run_on_world(config, world, queries, options)
}

/// Streams `world` once; each query is answered from the memory right after
/// the step at its query time.
pub fn run_on_world(
    config: &ExperimentConfig,
    world: World,
    queries: Vec<VisualQuery>,
    options: RunOptions,
) -> Result<ExperimentOutcome> {
    let (outcome, _) = run_with_probe(config, world, queries, options, &[])?;
    Ok(outcome)
}

fn run_with_probe(
    config: &ExperimentConfig,
    world: World,
    queries: Vec<VisualQuery>,
    options: RunOptions,
    probe_times: &[FrameIndex],
) -> Result<(ExperimentOutcome, BTreeMap<FrameIndex, u64>)> {
    let mut by_time: BTreeMap<FrameIndex, Vec<usize>> = BTreeMap::new();
    for (k, q) in queries.iter().enumerate() {
        if q.query_t >= world.stream_length() {
            return Err(Error::Input(format!(
                "query {} asked at t={} after the stream ends",
                q.query_id, q.query_t
            )));
        }
        by_time.entry(q.query_t).or_default().push(k);
    }
    let contents: Vec<Vec<u8>> = queries.iter().map(VisualQuery::content).collect();
    let embedder = SimEmbedder {
        dim: world.config.appearance_dim,
    };
    let lambda_ret = config.qrl.lambda_ret;

    let mut population = config.population(&world)?;
    let mut memory = ObjectMemory::new(config.costs);
    let mut answers: Vec<Option<RetrievalResult>> = vec![None; queries.len()];
    let mut steps = Vec::new();
    let mut probes = BTreeMap::new();

    let report = population.run_stream(&mut memory, world.stream(), |step, mem| {
        if options.audit_every_step {
            let audit = mem.audit();
            if !audit.is_clean() {
                return Err(Error::Audit(format!("memory at t={}: {audit:?}", step.t)));
            }
        }
        if probe_times.contains(&step.t) {
            probes.insert(step.t, mem.size_bytes());
        }
        for &k in by_time.get(&step.t).into_iter().flatten() {
            answers[k] = Some(localize(&contents[k], mem, &embedder, &CosineUnit, lambda_ret)?);
        }
        if options.record_steps {
            steps.push(step.clone());
        }
        Ok(())
    })?;

    let results: Vec<QueryRecord> = queries
        .iter()
        .zip(answers)
        .map(|(q, r)| QueryRecord {
            query_id: q.query_id,
            object_gt: q.object_gt,
            query_t: q.query_t,
            result: r.expect("every query time lies in the stream"),
        })
        .collect();
    let evaluations: Vec<QueryEvaluation> = queries
        .iter()
        .zip(&results)
        .map(|(q, r)| evaluation_for(q, &r.result))
        .collect();
    let metrics = if evaluations.is_empty() {
        MetricsReport {
            mean_size_bytes: memory.size_bytes() as f64,
            ..MetricsReport::default()
        }
    } else {
        let raw: Vec<RetrievalResult> = results.iter().map(|r| r.result.clone()).collect();
        evaluate_run(&evaluations, memory.size_bytes(), &raw)?
    };
    let audit = memory.audit();
    Ok((
        ExperimentOutcome {
            config: config.clone(),
            world,
            queries,
            population: report,
            steps,
            results,
            evaluations,
            metrics,
            memory,
            audit,
        },
        probes,
    ))
}

/// Answers of the offline backward scan for the outcome's queries, in order.
pub fn offline_answers(outcome: &ExperimentOutcome) -> Result<Vec<Option<crate::geometry::ResponseTrack>>> {
    let embedder = SimEmbedder {
        dim: outcome.world.config.appearance_dim,
    };
    outcome
        .queries
        .iter()
        .map(|q| offline_backward_scan(q, &outcome.world, q.query_t, &embedder, &CosineUnit, outcome.config.qrl.lambda_ret))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub t: FrameIndex,
    pub size_bytes: u64,
    pub metrics: MetricsReport,
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Metrics for queries asked after each fraction of the stream, from a
/// single pass. Each checkpoint gets `config.queries.count` queries.
pub fn fraction_curve(config: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<CurvePoint>> {
    config.validate()?;
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("stream fraction {f} is outside (0, 1]")));
    }
    let world = config.generate_world()?;
    let len = world.stream_length();
    let n = config.queries.count;
    let seed = derive_seed(config.seed, &[QUERY_SEED_STREAM]);
    let times: Vec<FrameIndex> = fractions
        .iter()
        .map(|f| ((f * len as f64).ceil() as u64).clamp(1, len) - 1)
        .collect();
    let mut queries = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        let first_id = (i * n) as u64;
        queries.extend(sample_queries_at(&world, n, seed, t, config.noise.embedder.feature_sigma, first_id));
    }
    let (outcome, probes) = run_with_probe(config, world, queries, RunOptions::default(), &times)?;

    fractions
        .iter()
        .zip(&times)
        .enumerate()
        .map(|(i, (&fraction, &t))| {
            let lo = (i * n) as u64;
            let ids = lo..lo + n as u64;
            let evals: Vec<_> = outcome.evaluations.iter().filter(|e| ids.contains(&e.query_id)).cloned().collect();
            let raw: Vec<_> = outcome
                .results
                .iter()
                .filter(|r| ids.contains(&r.query_id))
                .map(|r| r.result.clone())
                .collect();
            let size_bytes = probes.get(&t).copied().unwrap_or(0);
            let metrics = if evals.is_empty() {
                MetricsReport {
                    mean_size_bytes: size_bytes as f64,
                    ..MetricsReport::default()
                }
            } else {
                evaluate_run(&evals, size_bytes, &raw)?
            };
            Ok(CurvePoint {
                fraction,
                t,
                size_bytes,
                metrics,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BudgetCap,
    DetectorMissRate,
    TrackerLossRate,
    Strategy,
    LambdaRet,
    Seed,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::BudgetCap,
        SweepAxis::DetectorMissRate,
        SweepAxis::TrackerLossRate,
        SweepAxis::Strategy,
        SweepAxis::LambdaRet,
        SweepAxis::Seed,
    ];

    fn name(self) -> &'static str {
        match self {
            SweepAxis::BudgetCap => "budget_cap",
            SweepAxis::DetectorMissRate => "detector_miss_rate",
            SweepAxis::TrackerLossRate => "tracker_loss_rate",
            SweepAxis::Strategy => "strategy",
            SweepAxis::LambdaRet => "lambda_ret",
            SweepAxis::Seed => "seed",
        }
    }

    /// Returns `config` with this axis set to `value`.
    ///
    /// Budget caps accept plain bytes, a `KB`/`MB`/`GB` suffix (decimal), or
    /// `none`.
    pub fn apply(self, config: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = config.clone();
        let bad = |what: &str| Error::Config(format!("invalid {what} value '{value}' for sweep axis {self}"));
        let rate = || -> Result<f64> {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| bad("rate"))
        };
        match self {
            SweepAxis::BudgetCap => c.budget_cap = parse_bytes(value).ok_or_else(|| bad("byte size"))?,
            SweepAxis::DetectorMissRate => {
                c.noise.detector.p_det = 1.0 - rate()?;
                c.perception.discoverer = PerceptionMode::Noisy;
            }
            SweepAxis::TrackerLossRate => {
                c.noise.tracker.p_persist = 1.0 - rate()?;
                c.perception.tracker = PerceptionMode::Noisy;
            }
            SweepAxis::Strategy => c.omp.strategy = value.parse::<RelevanceStrategy>()?,
            SweepAxis::LambdaRet => c.qrl.lambda_ret = rate()?,
            SweepAxis::Seed => c.seed = value.parse().map_err(|_| bad("seed"))?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| {
                let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown sweep axis '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// `None` for "none"; otherwise bytes.
fn parse_bytes(value: &str) -> Option<Option<u64>> {
    let v = value.trim();
    if v.eq_ignore_ascii_case("none") {
        return Some(None);
    }
    let upper = v.to_ascii_uppercase();
    let (digits, scale) = [("GB", 1e9), ("MB", 1e6), ("KB", 1e3), ("B", 1.0)]
        .iter()
        .find_map(|(suffix, scale)| upper.strip_suffix(suffix).map(|d| (d.trim().to_string(), *scale)))
        .unwrap_or((upper.clone(), 1.0));
    let n: f64 = digits.parse().ok()?;
    let bytes = (n * scale).round();
    (bytes >= 1.0 && bytes.is_finite()).then_some(Some(bytes as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub final_size_bytes: u64,
    /// Largest end-of-step size, after any pruning.
    pub peak_size_bytes: u64,
    pub over_budget_warning: bool,
    pub digest: String,
}

/// One full run per (value, seed) pair, in parallel. Rows come back in
/// value-major order. An empty `seeds` list runs the config's own seed.
pub fn sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[String], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let seeds: Vec<u64> = if seeds.is_empty() { vec![config.seed] } else { seeds.to_vec() };
    let mut jobs = Vec::with_capacity(values.len() * seeds.len());
    for value in values {
        for &seed in &seeds {
            let mut base = config.clone();
            base.seed = seed;
            jobs.push((value.clone(), axis.apply(&base, value)?));
        }
    }
    jobs.into_par_iter()
        .map(|(value, cfg)| {
            let outcome = run_experiment(&cfg, RunOptions::default())?;
            Ok(SweepRow {
                axis,
                value,
                seed: cfg.seed,
                metrics: outcome.metrics,
                final_size_bytes: outcome.population.final_size_bytes,
                peak_size_bytes: outcome.population.peak_size_bytes,
                over_budget_warning: outcome.population.over_budget_warning,
                digest: outcome.digest()?,
            })
        })
        .collect()
}

/// Mean of `f` over the rows of each value, in first-seen value order.
pub fn mean_by_value(rows: &[SweepRow], f: impl Fn(&SweepRow) -> f64) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in rows {
        if !sums.contains_key(&row.value) {
            order.push(row.value.clone());
        }
        let e = sums.entry(row.value.clone()).or_default();
        e.0 += f(row);
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|v| {
            let (s, n) = sums[&v];
            (v, s / n as f64)
        })
        .collect()
}

/// Removes every `timing` field, at any depth.
pub fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timing");
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// SHA-256 of the canonical JSON of `value`, with timing fields removed.
pub fn digest_without_timing<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    strip_timing(&mut v);
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}
