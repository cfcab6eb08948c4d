//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use objmem::experiment::{
    mean_by_value, offline_answers, run_experiment, sweep, ExperimentConfig, ExperimentOutcome, PerceptionMode,
    RunOptions, SweepAxis, SweepRow,
};
use objmem::metrics::{spatiotemporal_ap25, success_rate, temporal_ap25, Prediction, QueryEvaluation};
use objmem::{box_iou, temporal_iou, tube_iou, BoundingBox, ResponseTrack, TimeInterval};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

const SEEDS: std::ops::Range<u64> = 0..10;
const TIME_LIMIT_S: f64 = 10.0;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(config: &ExperimentConfig, options: RunOptions) -> Result<ExperimentOutcome, String> {
    run_experiment(config, options).map_err(|e| e.to_string())
}

/// Number of adjacent pairs where the series moves the wrong way.
fn violations(values: &[(String, f64)], non_decreasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if non_decreasing { w[1].1 < w[0].1 } else { w[1].1 > w[0].1 })
        .count()
}

fn fmt_series(values: &[(String, f64)]) -> String {
    values
        .iter()
        .map(|(v, s)| format!("{v}:{s:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn oracle_end_to_end() -> Outcome {
    let start = Instant::now();
    let out = run(&ExperimentConfig::default(), RunOptions::default())?;
    let secs = start.elapsed().as_secs_f64();
    let m = out.metrics;
    check(
        m.success == 100.0 && m.t_ap25 == 100.0 && m.st_ap25 == 100.0 && m.queries == 200 && secs < TIME_LIMIT_S,
        format!(
            "success {} tAP25 {} stAP25 {} over {} queries in {secs:.2}s",
            m.success, m.t_ap25, m.st_ap25, m.queries
        ),
    )
}

fn online_offline_equivalence() -> Outcome {
    let out = run(&ExperimentConfig::default(), RunOptions::default())?;
    let offline = offline_answers(&out).map_err(|e| e.to_string())?;
    let mismatches = out
        .results
        .iter()
        .zip(&offline)
        .filter(|(online, scan)| online.result.track != **scan)
        .count();
    check(
        mismatches == 0 && offline.len() == out.results.len(),
        format!("{mismatches} of {} answers differ from the backward scan", offline.len()),
    )
}

fn perception(discoverer: PerceptionMode, tracker: PerceptionMode, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    c.perception.discoverer = discoverer;
    c.perception.tracker = tracker;
    c
}

fn oracle_ordering() -> Outcome {
    use PerceptionMode::{Noisy, Oracle};
    let rows: Vec<Result<(f64, f64, f64), String>> = SEEDS
        .into_par_iter()
        .map(|seed| {
            let s = |d, t| run(&perception(d, t, seed), RunOptions::default()).map(|o| o.metrics.success);
            Ok((s(Oracle, Noisy)?, s(Noisy, Oracle)?, s(Noisy, Noisy)?))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let holds = rows
        .iter()
        .filter(|(tracker_only, detector_only, both)| {
            *tracker_only < 100.0 && *detector_only < 100.0 && tracker_only > both && detector_only > both
        })
        .count();
    let n = rows.len() as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    check(
        holds >= 9,
        format!(
            "ordering holds in {holds}/10 seeds; mean success OD oracle + OT noisy {:.2}, OD noisy + OT oracle {:.2}, both noisy {:.2}",
            mean(|r| r.0),
            mean(|r| r.1),
            mean(|r| r.2)
        ),
    )
}

fn relevance_ablation() -> Outcome {
    use objmem::RelevanceStrategy as S;
    let mut metrics = Vec::new();
    for strategy in [S::Mr1Star, S::Mr2, S::Mr3, S::None] {
        let mut c = ExperimentConfig::default();
        c.omp.strategy = strategy;
        metrics.push(run(&c, RunOptions::default())?.metrics);
    }
    let [mr1, mr2, mr3, none] = [metrics[0], metrics[1], metrics[2], metrics[3]];
    check(
        mr1.mean_retrieval_ops < mr2.mean_retrieval_ops
            && mr2.mean_retrieval_ops < none.mean_retrieval_ops
            && mr1.success == mr2.success
            && mr3.success <= mr1.success,
        format!(
            "ops MR1* {:.1} < MR2 {:.1} < none {:.1}; success MR1* {} MR2 {} MR3 {}",
            mr1.mean_retrieval_ops, mr2.mean_retrieval_ops, none.mean_retrieval_ops, mr1.success, mr2.success, mr3.success
        ),
    )
}

/// Full-frame payloads held by each object lie exactly on its latest segment.
fn frame_coverage_violations(out: &ExperimentOutcome) -> usize {
    out.memory
        .entries()
        .map(|entry| {
            let latest = entry.latest_segment_start();
            entry
                .records
                .iter()
                .enumerate()
                .filter(|(k, r)| (*k >= latest) != r.frame_ref.is_some())
                .count()
        })
        .sum()
}

fn memory_frugality() -> Outcome {
    use objmem::RelevanceStrategy as S;
    let mut configs = Vec::new();
    for strategy in [S::Mr1Star, S::Mr2, S::Mr3, S::Mr4, S::None] {
        for (d, t) in [
            (PerceptionMode::Oracle, PerceptionMode::Oracle),
            (PerceptionMode::Noisy, PerceptionMode::Noisy),
        ] {
            let mut c = perception(d, t, 3);
            c.omp.strategy = strategy;
            configs.push(c);
        }
    }
    let mut budgeted = perception(PerceptionMode::Noisy, PerceptionMode::Noisy, 4);
    budgeted.budget_cap = Some(300_000_000);
    configs.push(budgeted);

    let options = RunOptions {
        audit_every_step: true,
        record_steps: false,
    };
    let results: Vec<Result<(usize, bool), String>> = configs
        .par_iter()
        .map(|c| run(c, options).map(|out| (frame_coverage_violations(&out), out.audit.is_clean())))
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let coverage: usize = results.iter().map(|r| r.0).sum();
    let dirty = results.iter().filter(|r| !r.1).count();
    check(
        coverage == 0 && dirty == 0,
        format!(
            "{} runs audited at every step; {coverage} frame-coverage violations, {dirty} unclean final audits",
            results.len()
        ),
    )
}

fn seeds() -> Vec<u64> {
    SEEDS.collect()
}

fn values(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn sweep_rows(axis: SweepAxis, vals: &[&str]) -> Result<Vec<SweepRow>, String> {
    sweep(&ExperimentConfig::default(), axis, &values(vals), &seeds()).map_err(|e| e.to_string())
}

fn budget_sweep() -> Outcome {
    let caps = [("250MB", 250_000_000u64), ("500MB", 500_000_000), ("750MB", 750_000_000), ("1000MB", 1_000_000_000)];
    let labels: Vec<&str> = caps.iter().map(|c| c.0).collect();
    let rows = sweep_rows(SweepAxis::BudgetCap, &labels)?;
    let over_cap = rows
        .iter()
        .filter(|r| {
            let cap = caps.iter().find(|c| c.0 == r.value).map(|c| c.1).unwrap_or(0);
            r.peak_size_bytes > cap && !r.over_budget_warning
        })
        .count();
    let means = mean_by_value(&rows, |r| r.metrics.success);
    let bad = violations(&means, true);
    check(
        over_cap == 0 && bad <= 1,
        format!("{over_cap} runs above cap; success by cap {}; {bad} violations", fmt_series(&means)),
    )
}

fn monotone_degradation() -> Outcome {
    let rates = ["0", "0.2", "0.4", "0.6", "0.8"];
    let miss = mean_by_value(&sweep_rows(SweepAxis::DetectorMissRate, &rates)?, |r| r.metrics.success);
    let loss = mean_by_value(&sweep_rows(SweepAxis::TrackerLossRate, &rates)?, |r| r.metrics.success);
    let (vm, vl) = (violations(&miss, false), violations(&loss, false));
    check(
        vm <= 1 && vl <= 1,
        format!(
            "miss rate {} ({vm} violations); loss rate {} ({vl} violations)",
            fmt_series(&miss),
            fmt_series(&loss)
        ),
    )
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BoundingBox {
    let w = rng.random_range(0.5..extent / 2.0);
    let h = rng.random_range(0.5..extent / 2.0);
    BoundingBox::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), w, h).unwrap()
}

fn random_track(rng: &mut ChaCha8Rng) -> ResponseTrack {
    let start = rng.random_range(0..30);
    let len = rng.random_range(1..15);
    ResponseTrack::from_boxes(start, (0..len).map(|_| random_box(rng, 40.0))).unwrap()
}

/// Overlap of two boxes computed from corner coordinates.
fn naive_intersection(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x() + a.w()).min(b.x() + b.w()) - a.x().max(b.x());
    let h = (a.y() + a.h()).min(b.y() + b.h()) - a.y().max(b.y());
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

fn naive_tube_iou(a: &ResponseTrack, b: &ResponseTrack) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for t in a.start().min(b.start())..=a.end().max(b.end()) {
        match (a.box_at(t), b.box_at(t)) {
            (Some(p), Some(q)) => {
                let i = naive_intersection(p, q);
                inter += i;
                union += p.w() * p.h() + q.w() * q.h() - i;
            }
            (Some(p), None) | (None, Some(p)) => union += p.w() * p.h(),
            (None, None) => {}
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn naive_temporal_iou(a: &ResponseTrack, b: &ResponseTrack) -> f64 {
    let fa: BTreeSet<u64> = (a.start()..=a.end()).collect();
    let fb: BTreeSet<u64> = (b.start()..=b.end()).collect();
    fa.intersection(&fb).count() as f64 / fa.union(&fb).count() as f64
}

/// Precision-at-hit averaged over all queries; each prediction's rank is
/// counted directly from the scores.
fn naive_ap(evals: &[QueryEvaluation], overlap: fn(&ResponseTrack, &ResponseTrack) -> f64) -> f64 {
    let key = |e: &QueryEvaluation| e.prediction.as_ref().map(|p| p.score);
    let ahead = |i: usize, j: usize| match (key(&evals[j]), key(&evals[i])) {
        (Some(_), None) => true,
        (Some(sj), Some(si)) => sj > si || (sj == si && j < i),
        (None, None) => j < i,
        (None, Some(_)) => false,
    };
    let hit = |i: usize| {
        evals[i]
            .prediction
            .as_ref()
            .is_some_and(|p| overlap(&p.track, &evals[i].ground_truth) >= 0.25)
    };
    let mut total = 0.0;
    for i in (0..evals.len()).filter(|&i| hit(i)) {
        let rank = 1 + (0..evals.len()).filter(|&j| j != i && ahead(i, j)).count();
        let hits_at_rank = 1 + (0..evals.len()).filter(|&j| j != i && ahead(i, j) && hit(j)).count();
        total += hits_at_rank as f64 / rank as f64;
    }
    100.0 * total / evals.len() as f64
}

fn naive_success(evals: &[QueryEvaluation]) -> f64 {
    let hits = evals
        .iter()
        .filter(|e| e.prediction.as_ref().is_some_and(|p| naive_tube_iou(&p.track, &e.ground_truth) >= 0.05))
        .count();
    100.0 * hits as f64 / evals.len() as f64
}

fn random_instance(rng: &mut ChaCha8Rng) -> Vec<QueryEvaluation> {
    let n = rng.random_range(1..=10);
    (0..n)
        .map(|query_id| {
            let ground_truth = random_track(rng);
            let prediction = match rng.random_range(0..4) {
                0 => None,
                1 => Some(ground_truth.clone()),
                _ => Some(random_track(rng)),
            }
            .map(|track| Prediction {
                track,
                // Coarse scores so that ties occur.
                score: (rng.random_range(0..6) as f64) / 5.0,
            });
            QueryEvaluation {
                query_id,
                prediction,
                ground_truth,
            }
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let evals = random_instance(&mut rng);
        let pairs = [
            (temporal_ap25(&evals), naive_ap(&evals, naive_temporal_iou)),
            (spatiotemporal_ap25(&evals), naive_ap(&evals, naive_tube_iou)),
            (success_rate(&evals), naive_success(&evals)),
        ];
        for (got, want) in pairs {
            let got = got.map_err(|e| e.to_string())?;
            worst = worst.max((got - want).abs());
        }
    }
    check(worst <= 1e-9, format!("50 instances, max deviation {worst:.2e}"))
}

fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

fn iv(a: u64, b: u64) -> TimeInterval {
    TimeInterval::new(a, b).unwrap()
}

fn geometry_identities() -> Outcome {
    let unit = bx(0.0, 0.0, 10.0, 10.0);
    let a = ResponseTrack::from_boxes(0, vec![unit; 10]).unwrap();
    let b = ResponseTrack::from_boxes(5, vec![unit; 10]).unwrap();
    let far = ResponseTrack::from_boxes(20, vec![unit; 3]).unwrap();
    let examples = [
        ("box identical", box_iou(&unit, &unit), 1.0),
        ("box disjoint", box_iou(&bx(0.0, 0.0, 5.0, 5.0), &bx(10.0, 10.0, 5.0, 5.0)), 0.0),
        ("box shifted", box_iou(&unit, &bx(5.0, 0.0, 10.0, 10.0)), 1.0 / 3.0),
        ("interval identical", temporal_iou(&iv(0, 9), &iv(0, 9)), 1.0),
        ("interval disjoint", temporal_iou(&iv(0, 4), &iv(5, 9)), 0.0),
        ("interval shifted", temporal_iou(&iv(0, 9), &iv(5, 14)), 5.0 / 15.0),
        ("tube identical", tube_iou(&a, &a), 1.0),
        ("tube disjoint", tube_iou(&a, &far), 0.0),
        ("tube shifted", tube_iou(&a, &b), 500.0 / 1500.0),
    ];
    let failed: Vec<&str> = examples.iter().filter(|e| e.1 != e.2).map(|e| e.0).collect();

    let samples = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0usize;
    let in_range = |v: f64| (0.0..=1.0).contains(&v);
    for _ in 0..samples {
        let (p, q) = (random_box(&mut rng, 50.0), random_box(&mut rng, 50.0));
        let iou = box_iou(&p, &q);
        let s = rng.random_range(0..40);
        let (i, j) = (iv(s, s + rng.random_range(0..20)), iv(s, rng.random_range(s..s + 40)));
        let (ta, tb) = (random_track(&mut rng), random_track(&mut rng));
        let t = rng.random_range(0..100);
        let single = |b| ResponseTrack::from_boxes(t, [b]).unwrap();
        let ok = in_range(iou)
            && iou == box_iou(&q, &p)
            && in_range(temporal_iou(&i, &j))
            && temporal_iou(&i, &j) == temporal_iou(&j, &i)
            && in_range(tube_iou(&ta, &tb))
            && tube_iou(&ta, &tb) == tube_iou(&tb, &ta)
            && (tube_iou(&single(p), &single(q)) - iou).abs() <= 1e-12
            && tube_iou(&ta, &ta) == 1.0;
        bad += usize::from(!ok);
    }
    check(
        failed.is_empty() && bad == 0,
        format!(
            "{} examples ({} failed{}); {bad} of {samples} random samples violate range/symmetry/reduction",
            examples.len(),
            failed.len(),
            if failed.is_empty() { String::new() } else { format!(": {}", failed.join(", ")) }
        ),
    )
}

fn determinism() -> Outcome {
    let mut configs = vec![
        ExperimentConfig::default(),
        perception(PerceptionMode::Noisy, PerceptionMode::Noisy, 11),
        perception(PerceptionMode::Noisy, PerceptionMode::Oracle, 12),
    ];
    let mut capped = perception(PerceptionMode::Oracle, PerceptionMode::Noisy, 13);
    capped.budget_cap = Some(400_000_000);
    capped.omp.strategy = objmem::RelevanceStrategy::Mr3;
    configs.push(capped);
    let mut random_times = perception(PerceptionMode::Noisy, PerceptionMode::Noisy, 14);
    random_times.queries.at_stream_end = false;
    random_times.noise.embedder.feature_sigma = 0.05;
    configs.push(random_times);

    let mut differing = 0;
    for c in &configs {
        let first = run(c, RunOptions::default())?.digest().map_err(|e| e.to_string())?;
        let second = run(c, RunOptions::default())?.digest().map_err(|e| e.to_string())?;
        differing += usize::from(first != second);
    }
    check(
        differing == 0,
        format!("{} configs run twice, {differing} digest mismatches", configs.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle end-to-end", oracle_end_to_end),
        ("online/offline equivalence", online_offline_equivalence),
        ("oracle ordering", oracle_ordering),
        ("relevance ablation", relevance_ablation),
        ("memory frugality", memory_frugality),
        ("budget sweep", budget_sweep),
        ("monotone degradation", monotone_degradation),
        ("metric oracles", metric_oracles),
        ("geometry identities", geometry_identities),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (k, (name, criterion)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = criterion();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2}. {name}: {detail} ({secs:.1}s)", k + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
