//! Acceptance gate on the reference synthetic configuration.
//!
//! Prints one PASS/FAIL line per criterion and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use lazyconv_core::cost::{CostModel, SweepMode, bench_layer, evaluate, flops_conv, measure_wall_clock, sensitivity_sweep};
use lazyconv_core::inference::forward_eager;
use lazyconv_core::lazy::{KeepPolicy, PredictorSet, forward_lazy};
use lazyconv_core::memlazy::{build_weight_index, dense_lazy, memory_footprint};
use lazyconv_core::model::{Dataset, LayerKind, Network, SyntheticSpec, gen_synthetic, save_model};
use lazyconv_core::ops::dense;
use lazyconv_core::pareto::{
    Evaluator, Nsga2Config, Objectives, PolicyEvaluator, choose_subset, dominates, non_dominated_sort, nsga2,
};
use lazyconv_core::train::{TrainConfig, train_all};
use lazyconv_core::{FilterMask, collect_traces};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Fixture {
    net: Network,
    data: Dataset,
    predictors: PredictorSet,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn keep_all_equivalence(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let policy = KeepPolicy::uniform(&fx.net, 1.0);
    let mut worst = 0.0f32;
    for x in &fx.data.inputs {
        let eager = forward_eager(&fx.net, x).map_err(|e| e.to_string())?;
        let lazy = forward_lazy(&fx.net, &fx.predictors, &policy, x).map_err(|e| e.to_string())?;
        for (a, b) in eager.logits.iter().zip(&lazy.logits) {
            worst = worst.max((a - b).abs());
        }
    }
    let acc = evaluate(&fx.net, &fx.predictors, &policy, &fx.data)
        .map_err(|e| e.to_string())?
        .accuracy;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && acc == 1.0 && secs < 60.0,
        format!("max |lazy - eager| = {worst:e}, accuracy {acc}, {secs:.1}s"),
    )
}

fn flop_linearity(fx: &Fixture) -> Outcome {
    let model = CostModel::new(&fx.net).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for name in fx.net.conv_names() {
        let g = model.conv_geometry(&name).ok_or(format!("no geometry for {name}"))?;
        let full = flops_conv(&g, g.out_filters, g.in_channels) as u128;
        for k in 1..=g.out_filters {
            let part = flops_conv(&g, k, g.in_channels) as u128;
            if part * g.out_filters as u128 != full * k as u128 {
                return Err(format!("{name}: flops({k}) / flops({}) != {k}/{}", g.out_filters, g.out_filters));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (layer, k) pairs exact"))
}

fn wall_clock_speedup(fx: &Fixture) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let policy = KeepPolicy::uniform(&fx.net, 0.25);
        let inputs = &fx.data.inputs[..50];
        let wc = measure_wall_clock(&fx.net, &fx.predictors, &policy, inputs, 7, None).map_err(|e| e.to_string())?;
        let fractions = [0.2, 0.4, 0.6, 0.8, 1.0];
        let mut worst_drop = f64::INFINITY;
        let mut monotone = true;
        for name in fx.net.conv_names() {
            let rows = bench_layer(&fx.net, &name, &fractions, &fx.data.inputs[0], 41).map_err(|e| e.to_string())?;
            for w in rows.windows(2) {
                let ratio = w[1].median_seconds / w[0].median_seconds;
                worst_drop = worst_drop.min(ratio);
                monotone &= ratio >= 0.9;
            }
        }
        check(
            wc.speedup >= 1.5 && monotone,
            format!(
                "speedup {:.2}x at keep 0.25; smallest bench step ratio {worst_drop:.3} (>= 0.9 required)",
                wc.speedup
            ),
        )
    })
}

fn prediction_overhead(fx: &Fixture) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let policy = KeepPolicy::uniform(&fx.net, 0.5);
        let wc = measure_wall_clock(&fx.net, &fx.predictors, &policy, &fx.data.inputs[..50], 7, None)
            .map_err(|e| e.to_string())?;
        check(
            wc.overhead_fraction <= 0.05,
            format!("predict + select = {:.3}% of eager time", 100.0 * wc.overhead_fraction),
        )
    })
}

fn predictor_quality(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let traces = collect_traces(&fx.net, &fx.data).map_err(|e| e.to_string())?;
    let seeds = [42u64, 7, 1234, 2024, 99];
    let pairs = traces.pairs();
    let mut gain = vec![0.0f64; pairs.len()];
    let mut mae_ok = true;
    let mut worst_mae = String::new();
    for &seed in &seeds {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (_, reports) = train_all(&traces, &cfg).map_err(|e| e.to_string())?;
        for (i, r) in reports.iter().enumerate() {
            if r.validation_mae > r.baseline_mae {
                mae_ok = false;
                worst_mae = format!("; {} seed {seed}: {} > {}", r.layer, r.validation_mae, r.baseline_mae);
            }
            let half = r.overlap.iter().find(|o| o.fraction == 0.5).ok_or("no overlap at 0.5")?;
            gain[i] += (half.predictor - half.baseline) / seeds.len() as f64;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let summary: Vec<String> = pairs
        .iter()
        .zip(&gain)
        .map(|((_, t), g)| format!("{t} +{g:.3}"))
        .collect();
    check(
        mae_ok && gain.iter().all(|&g| g >= 0.05) && secs < 300.0,
        format!("overlap gain at 0.5 over baseline: {}{worst_mae}; {secs:.1}s", summary.join(", ")),
    )
}

fn sensitivity_ordering(fx: &Fixture) -> Outcome {
    let fractions = [0.2, 0.4, 0.6, 0.8, 1.0];
    let mut lines = Vec::new();
    let mut ok = true;
    for name in fx.net.conv_names() {
        let rows = sensitivity_sweep(&fx.net, &fx.data, &name, &fractions, SweepMode::Oracle, None)
            .map_err(|e| e.to_string())?;
        ok &= rows.last().map(|r| r.accuracy) == Some(1.0);
        ok &= rows.windows(2).all(|w| w[1].accuracy + 0.03 >= w[0].accuracy);
        let accs: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.accuracy)).collect();
        lines.push(format!("{name} [{}]", accs.join(" ")));
    }
    check(ok, lines.join("; "))
}

fn brute_force_front_ranks(points: &[Objectives]) -> Vec<usize> {
    let mut rank = vec![usize::MAX; points.len()];
    let mut level = 0;
    while rank.contains(&usize::MAX) {
        let current: Vec<usize> = (0..points.len())
            .filter(|&i| rank[i] == usize::MAX)
            .filter(|&i| {
                !(0..points.len()).any(|j| {
                    rank[j] == usize::MAX
                        && points[j][0] <= points[i][0]
                        && points[j][1] <= points[i][1]
                        && (points[j][0] < points[i][0] || points[j][1] < points[i][1])
                })
            })
            .collect();
        for i in current {
            rank[i] = level;
        }
        level += 1;
    }
    rank
}

fn mutually_non_dominated(points: &[Objectives]) -> bool {
    points.iter().all(|a| points.iter().all(|b| !dominates(a, b)))
}

struct TradeOffLine;

impl Evaluator for TradeOffLine {
    fn genome_len(&self) -> usize {
        5
    }

    fn evaluate(&self, g: &[f64]) -> lazyconv_core::Result<Objectives> {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        Ok([m, 1.0 - m])
    }
}

fn nsga2_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    for inst in 0..100 {
        let pts: Vec<Objectives> = (0..200)
            .map(|_| [rng.random_range(0..25) as f64 / 4.0, rng.random_range(0..25) as f64 / 4.0])
            .collect();
        let ranks = brute_force_front_ranks(&pts);
        for (r, front) in non_dominated_sort(&pts).iter().enumerate() {
            if front.iter().any(|&i| ranks[i] != r) {
                return Err(format!("instance {inst}: front {r} disagrees with brute force"));
            }
        }
    }
    let cfg = Nsga2Config::default();
    let a = nsga2(&cfg, &TradeOffLine).map_err(|e| e.to_string())?;
    let b = nsga2(&cfg, &TradeOffLine).map_err(|e| e.to_string())?;
    let front: Vec<Objectives> = a.front.iter().map(|i| i.objectives).collect();
    let off_line = front.iter().map(|o| (o[0] + o[1] - 1.0).abs()).fold(0.0, f64::max);
    let identical = a.population == b.population && a.archive == b.archive;
    check(
        mutually_non_dominated(&front) && off_line <= 0.05 && identical,
        format!(
            "100 sorts match brute force; toy front off f1+f2=1 by {off_line:e}; same-seed runs identical: {identical}"
        ),
    )
}

fn pareto_anchors(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let subset = choose_subset(fx.data.len(), 200, 42);
    let data = fx.data.subset(&subset);
    let evaluator = PolicyEvaluator::new(&fx.net, &fx.predictors, &data).map_err(|e| e.to_string())?;
    let len = evaluator.genome_len();
    let cfg = Nsga2Config {
        seed_genomes: vec![vec![1.0; len]],
        ..Nsga2Config::default()
    };
    let run = nsga2(&cfg, &evaluator).map_err(|e| e.to_string())?;
    let eager = CostModel::new(&fx.net).map_err(|e| e.to_string())?.eager_total() as f64;
    let anchor = run.archive.iter().any(|p| p.objectives == [0.0, eager]);
    let front: Vec<Objectives> = run.front.iter().map(|i| i.objectives).collect();
    let cheap = front.iter().filter(|o| o[1] <= 0.6 * eager && o[0] <= 0.15).count();
    let best = front
        .iter()
        .filter(|o| o[0] <= 0.15)
        .map(|o| o[1] / eager)
        .fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    check(
        anchor && cheap > 0 && mutually_non_dominated(&front) && secs < 900.0,
        format!(
            "eager anchor in archive: {anchor}; {cheap} front points at <= 0.6x cost and error <= 0.15 \
             (cheapest such: {best:.3}x); {} evaluations; {secs:.1}s",
            evaluator.evaluations()
        ),
    )
}

fn memory_lazy(fx: &Fixture) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_model(&fx.net, dir.path()).map_err(|e| e.to_string())?;
    let spec = fx
        .net
        .layers()
        .iter()
        .find_map(|l| match &l.kind {
            LayerKind::Dense { spec, .. } if l.name == "fc1" => Some(spec.clone()),
            _ => None,
        })
        .ok_or("reference net has no fc1")?;
    let index = build_weight_index(dir.path(), "fc1").map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f32;
    for trial in 0..100 {
        let kept: Vec<usize> = (0..index.filters).filter(|_| rng.random_bool(0.3)).collect();
        let mask = FilterMask::new(index.filters, kept).map_err(|e| e.to_string())?;
        let x: Vec<f32> = (0..index.in_dim)
            .map(|i| if mask.contains(i / index.group) { rng.random_range(0.0..2.0) } else { 0.0 })
            .collect();
        let lazy = dense_lazy(&x, &mask, &index, &spec.bias).map_err(|e| e.to_string())?;
        let full = dense(&x, &spec).map_err(|e| e.to_string())?;
        for (a, b) in lazy.values.iter().zip(&full) {
            worst = worst.max((a - b).abs());
        }
        if lazy.bytes_read * index.filters as u64 != mask.len() as u64 * index.weight_bytes() {
            return Err(format!(
                "trial {trial}: read {} bytes for {}/{} filters of {} bytes",
                lazy.bytes_read,
                mask.len(),
                index.filters,
                index.weight_bytes()
            ));
        }
    }
    let big = memory_footprint(25088, 4096, 1.0, 49).map_err(|e| e.to_string())?;
    check(
        worst <= 1e-6 && big.params() == 102_764_544 && big.megabytes().round() == 411.0,
        format!(
            "max |dense_lazy - dense| = {worst:e}; bytes read proportional on 100 masks; \
             25088x4096 layer: {} params, {:.1} MB",
            big.params(),
            big.megabytes()
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let (net, data) = gen_synthetic(&SyntheticSpec::reference()).expect("reference config generates");
    let traces = collect_traces(&net, &data).expect("traces");
    let (predictors, _) = train_all(&traces, &TrainConfig::default()).expect("training");
    let fx = Fixture { net, data, predictors };
    println!("fixture ready in {:.1}s", start.elapsed().as_secs_f64());

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("keep-1.0 equivalence", Box::new(|| keep_all_equivalence(&fx))),
        ("FLOP linearity", Box::new(|| flop_linearity(&fx))),
        ("wall-clock speedup", Box::new(|| wall_clock_speedup(&fx))),
        ("prediction overhead", Box::new(|| prediction_overhead(&fx))),
        ("predictor quality", Box::new(|| predictor_quality(&fx))),
        ("sensitivity ordering", Box::new(|| sensitivity_ordering(&fx))),
        ("NSGA-II correctness", Box::new(nsga2_correctness)),
        ("Pareto anchors", Box::new(|| pareto_anchors(&fx))),
        ("memory-lazy exactness and proportionality", Box::new(|| memory_lazy(&fx))),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
