use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use objmem::experiment::{
    evaluation_for, fraction_curve, mean_by_value, run_experiment, sweep, ExperimentConfig, RunOptions, SweepAxis,
    SweepRow, DEFAULT_FRACTIONS,
};
use objmem::metrics::evaluate_run;
use objmem::plot::curve_charts;
use objmem::sim::patch::{SimEmbedder, SimPatch};
use objmem::sim::VisualQuery;
use objmem::{localize, CosineUnit, DumpFormat, Error, MetricsReport, ObjectMemory, RetrievalResult};
use serde::{Deserialize, Serialize};

use crate::{overrides, Command, ConfigArgs, EvaluateArgs, Failure, TableFormat};

pub fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { config, out } => generate(&config, &out),
        Command::Run {
            config,
            out_dir,
            audit_every_step,
        } => run(&config, &out_dir, audit_every_step),
        Command::Query {
            memory,
            queries,
            out,
            lambda_ret,
        } => query(&memory, &queries, &out, lambda_ret),
        Command::Evaluate(args) => evaluate(&args),
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            seed_count,
            format,
            out,
        } => run_sweep(&config, &axis, &values, seeds, seed_count, format, out.as_deref()),
    }
}

fn load_config(path: &Path, seed: Option<u64>, sets: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut config = ExperimentConfig::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    overrides::apply(&config, sets)
}

fn config_from(args: &ConfigArgs) -> Result<ExperimentConfig> {
    load_config(&args.config, args.seed, &args.overrides)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn generate(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let config = config_from(args)?;
    let world = config.generate_world()?;
    let issues = world.audit();
    if !issues.is_empty() {
        return Err(Error::Audit(format!("generated world: {}", issues.join("; "))).into());
    }
    write_json(out, &world)?;
    eprintln!(
        "world: {} objects, {} frames -> {}",
        world.objects.len(),
        world.stream_length(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a ExperimentConfig,
    population: &'a objmem::PopulationReport,
    audit: &'a objmem::memory::AuditReport,
    metrics: &'a MetricsReport,
    gt_objects: usize,
    digest: String,
}

fn run(args: &ConfigArgs, out_dir: &Path, audit_every_step: bool) -> Result<(), Failure> {
    let config = config_from(args)?;
    let options = RunOptions {
        audit_every_step,
        record_steps: true,
    };
    let outcome = run_experiment(&config, options)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let dump_name = match config.dump_format {
        DumpFormat::Json => "memory.json",
        DumpFormat::Binary => "memory.bin",
    };
    let dump = outcome.memory.encode(config.dump_format)?;
    fs::write(out_dir.join(dump_name), dump).context("writing memory dump")?;

    let steps_path = out_dir.join("steps.jsonl");
    let mut steps = BufWriter::new(fs::File::create(&steps_path).context("creating step log")?);
    for step in &outcome.steps {
        serde_json::to_writer(&mut steps, step)?;
        steps.write_all(b"\n").context("writing step log")?;
    }
    steps.flush().context("writing step log")?;

    write_json(&out_dir.join("queries.json"), &outcome.queries)?;
    fs::write(out_dir.join("config.toml"), config.to_toml()?).context("writing config echo")?;
    write_json(
        &out_dir.join("report.json"),
        &RunReport {
            config: &config,
            population: &outcome.population,
            audit: &outcome.audit,
            metrics: &outcome.metrics,
            gt_objects: outcome.world.objects.len(),
            digest: outcome.digest()?,
        },
    )?;
    if !outcome.audit.is_clean() {
        return Err(Error::Audit(format!("final memory: {:?}", outcome.audit)).into());
    }
    eprintln!(
        "{} objects in memory ({} in ground truth), {} bytes; success {:.2}",
        outcome.population.final_objects,
        outcome.world.objects.len(),
        outcome.population.final_size_bytes,
        outcome.metrics.success
    );
    Ok(())
}

/// Query fields the `query` command reads; ground truth, if present, is
/// ignored.
#[derive(Deserialize)]
struct QueryInput {
    query_id: u64,
    features: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub query_id: u64,
    pub result: RetrievalResult,
}

fn query(memory: &Path, queries: &Path, out: &Path, lambda_ret: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&lambda_ret) {
        return Err(anyhow!("--lambda-ret {lambda_ret} is outside [0, 1]").into());
    }
    let bytes = fs::read(memory).with_context(|| format!("reading {}", memory.display()))?;
    let memory = ObjectMemory::decode(&bytes)?;
    let audit = memory.audit();
    if !audit.is_clean() {
        return Err(Error::Audit(format!("memory dump: {audit:?}")).into());
    }
    let inputs: Vec<QueryInput> = read_json(queries)?;
    let answers = inputs
        .iter()
        .map(|q| {
            let content = SimPatch {
                distinctiveness: 1.0,
                features: q.features.clone(),
            }
            .encode();
            let embedder = SimEmbedder { dim: q.features.len() };
            let result = localize(&content, &memory, &embedder, &CosineUnit, lambda_ret)?;
            Ok(QueryAnswer {
                query_id: q.query_id,
                result,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    write_json(out, &answers)?;
    Ok(())
}

#[derive(Serialize)]
struct CurveReport<'a> {
    config: &'a ExperimentConfig,
    points: Vec<objmem::experiment::CurvePoint>,
}

fn evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    if args.curve {
        let path = args.config.as_deref().ok_or_else(|| anyhow!("--curve needs --config"))?;
        let config = load_config(path, args.seed, &args.overrides)?;
        let points = fraction_curve(&config, &DEFAULT_FRACTIONS)?;
        if let Some(dir) = &args.plots {
            write_plots(dir, &points)?;
        }
        let text = serde_json::to_string_pretty(&CurveReport {
            config: &config,
            points,
        })? + "\n";
        return Ok(emit(args.out.as_deref(), &text)?);
    }
    let (Some(results), Some(gt)) = (&args.results, &args.ground_truth) else {
        return Err(anyhow!("--results and --ground-truth are required without --curve").into());
    };
    let answers: Vec<QueryAnswer> = read_json(results)?;
    let queries: Vec<VisualQuery> = read_json(gt)?;
    let report = score(&answers, &queries)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    Ok(emit(args.out.as_deref(), &text)?)
}

/// Queries without an answer count as absent predictions.
fn score(answers: &[QueryAnswer], queries: &[VisualQuery]) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(anyhow!("ground truth holds no queries"));
    }
    let found: Vec<RetrievalResult> = queries
        .iter()
        .map(|q| {
            answers
                .iter()
                .find(|a| a.query_id == q.query_id)
                .map(|a| a.result.clone())
                .unwrap_or_else(|| RetrievalResult::no_match(0.0, 0))
        })
        .collect();
    let evals: Vec<_> = queries.iter().zip(&found).map(|(q, r)| evaluation_for(q, r)).collect();
    // Memory size is not recoverable from results; it is reported as 0.
    Ok(evaluate_run(&evals, 0, &found)?)
}

fn write_plots(dir: &Path, points: &[objmem::experiment::CurvePoint]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, svg) in curve_charts("run", points) {
        let path: PathBuf = dir.join(format!("{name}.svg"));
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Flat row for the CSV table.
#[derive(Serialize)]
struct TableRow<'a> {
    axis: String,
    value: &'a str,
    seed: u64,
    success: f64,
    t_ap25: f64,
    st_ap25: f64,
    queries: u64,
    mean_retrieval_ops: f64,
    final_size_bytes: u64,
    peak_size_bytes: u64,
    over_budget_warning: bool,
    mean_retrieval_time_s: f64,
    digest: &'a str,
}

impl<'a> From<&'a SweepRow> for TableRow<'a> {
    fn from(r: &'a SweepRow) -> Self {
        Self {
            axis: r.axis.to_string(),
            value: &r.value,
            seed: r.seed,
            success: r.metrics.success,
            t_ap25: r.metrics.t_ap25,
            st_ap25: r.metrics.st_ap25,
            queries: r.metrics.queries,
            mean_retrieval_ops: r.metrics.mean_retrieval_ops,
            final_size_bytes: r.final_size_bytes,
            peak_size_bytes: r.peak_size_bytes,
            over_budget_warning: r.over_budget_warning,
            mean_retrieval_time_s: r.metrics.timing.mean_retrieval_time_s,
            digest: &r.digest,
        }
    }
}

fn run_sweep(
    args: &ConfigArgs,
    axis: &str,
    values: &[String],
    seeds: Vec<u64>,
    seed_count: Option<u64>,
    format: TableFormat,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let config = config_from(args)?;
    let axis: SweepAxis = axis.parse()?;
    let seeds = match (seeds.is_empty(), seed_count) {
        (_, Some(n)) => (0..n).collect(),
        (true, None) => vec![config.seed],
        (false, None) => seeds,
    };
    let rows = sweep(&config, axis, values, &seeds)?;
    let text = match format {
        TableFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            for row in &rows {
                writer.serialize(TableRow::from(row))?;
            }
            String::from_utf8(writer.into_inner().map_err(|e| anyhow!("{e}"))?)?
        }
        TableFormat::Json => serde_json::to_string_pretty(&rows)? + "\n",
    };
    emit(out, &text)?;
    for (value, success) in mean_by_value(&rows, |r| r.metrics.success) {
        eprintln!("{axis}={value}: mean success {success:.2} over {} seeds", seeds.len());
    }
    Ok(())
}
