use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result, bail};
use lazyconv_core::cost::{CostModel, SweepMode, bench_layer, evaluate, measure_wall_clock, sensitivity_sweep};
use lazyconv_core::inference::{collect_traces, load_traces, save_traces};
use lazyconv_core::lazy::{KeepPolicy, PredictorSet, load_predictors, save_predictors};
use lazyconv_core::memlazy::{build_weight_index, memory_report};
use lazyconv_core::model::{
    Network, SyntheticSpec, gen_synthetic as generate, load_dataset, load_model_with_fingerprint, read_manifest,
    save_dataset, save_model,
};
use lazyconv_core::pareto::{
    Evaluator, Nsga2Config, PolicyEvaluator, choose_subset, nsga2, write_archive_csv, write_front_csv,
};
use lazyconv_core::train::{StepSchedule, TrainConfig, train_all};
use lazyconv_core::Error;
use serde::Serialize;

use crate::manifest::RunRecorder;
use crate::{BenchArgs, EvalArgs, GenArgs, MemArgs, ParetoArgs, SweepArgs, TraceArgs, TrainArgs};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_network(path: &Path, rec: &mut RunRecorder) -> Result<(Network, String)> {
    rec.input(path)?;
    load_model_with_fingerprint(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_data(path: &Path, rec: &mut RunRecorder) -> Result<lazyconv_core::Dataset> {
    rec.input(path)?;
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Predictors trained on traces of a different model are refused.
fn load_matching_predictors(path: &Path, model_fingerprint: &str, rec: &mut RunRecorder) -> Result<PredictorSet> {
    rec.input(path)?;
    let set = load_predictors(path).with_context(|| format!("loading predictors {}", path.display()))?;
    if set.fingerprint != model_fingerprint {
        return Err(Error::Fingerprint {
            expected: model_fingerprint.to_string(),
            found: set.fingerprint,
        }
        .into());
    }
    Ok(set)
}

fn parse_policy(text: &str, net: &Network) -> Result<KeepPolicy> {
    if let Some(f) = text.strip_prefix("all-") {
        let fraction: f64 = f.parse().with_context(|| format!("bad uniform policy `{text}`"))?;
        if !(0.0..=1.0).contains(&fraction) {
            bail!("uniform keep fraction {fraction} outside [0, 1]");
        }
        return Ok(KeepPolicy::uniform(net, fraction));
    }
    let bytes = fs::read(text).with_context(|| format!("reading policy {text}"))?;
    let policy = KeepPolicy::from_json(&bytes)?;
    policy.validate(net)?;
    Ok(policy)
}

fn conv_layers(net: &Network, layer: &Option<String>) -> Result<Vec<String>> {
    match layer {
        Some(name) => {
            net.conv(name)?;
            Ok(vec![name.clone()])
        }
        None => Ok(net.conv_names()),
    }
}

pub fn gen_synthetic(args: &GenArgs, threads: usize) -> Result<()> {
    let mut rec = RunRecorder::start("gen-synthetic", args, threads)?;
    rec.seed(args.seed);
    let spec = SyntheticSpec {
        seed: args.seed,
        dataset_size: args.samples,
        ..SyntheticSpec::reference()
    };
    let (net, data) = generate(&spec)?;
    save_model(&net, args.out.join("model"))?;
    save_dataset(&data, args.out.join("data"))?;
    rec.finish(&args.out)?;
    println!(
        "wrote model ({} layers) and {} samples to {}",
        net.layers().len(),
        data.len(),
        args.out.display()
    );
    Ok(())
}

pub fn trace(args: &TraceArgs, threads: usize) -> Result<()> {
    let mut rec = RunRecorder::start("trace", args, threads)?;
    let (net, _) = load_network(&args.model, &mut rec)?;
    let data = load_data(&args.data, &mut rec)?;
    let traces = collect_traces(&net, &data)?;
    save_traces(&traces, &args.out)?;
    rec.finish(&args.out)?;
    println!("traced {} samples over {} conv layers", traces.len(), traces.layers.len());
    Ok(())
}

pub fn train_predictor(args: &TrainArgs, threads: usize) -> Result<()> {
    let mut rec = RunRecorder::start("train-predictor", args, threads)?;
    rec.seed(args.seed);
    rec.input(&args.traces)?;
    let traces = load_traces(&args.traces).with_context(|| format!("loading traces {}", args.traces.display()))?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        schedule: if args.constant_step {
            StepSchedule::Constant
        } else {
            StepSchedule::Linear
        },
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        train_split: args.split,
        ridge: args.ridge,
    };
    let (set, reports) = train_all(&traces, &cfg)?;
    save_predictors(&set, &args.out)?;
    write_json(&args.out.join("train_report.json"), &reports)?;
    rec.finish(&args.out)?;
    for r in &reports {
        let half = r.overlap.iter().find(|o| o.fraction == 0.5);
        println!(
            "{} <- {}: validation MAE {:.4} (baseline {:.4}){}",
            r.layer,
            r.source,
            r.validation_mae,
            r.baseline_mae,
            half.map_or(String::new(), |o| format!(", top-half overlap {:.3} (baseline {:.3})", o.predictor, o.baseline))
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    policy: &'a KeepPolicy,
    accuracy: f64,
    flops_ratio: f64,
}

pub fn eval(args: &EvalArgs, threads: usize) -> Result<()> {
    let mut rec = RunRecorder::start("eval", args, threads)?;
    let (net, fingerprint) = load_network(&args.model, &mut rec)?;
    let data = load_data(&args.data, &mut rec)?;
    let predictors = match &args.predictors {
        Some(p) => load_matching_predictors(p, &fingerprint, &mut rec)?,
        None => PredictorSet::new(fingerprint),
    };
    let policy = parse_policy(&args.policy, &net)?;
    let result = evaluate(&net, &predictors, &policy, &data)?;
    let mut cost = result.cost;
    if args.timing_samples > 0 {
        let n = args.timing_samples.min(data.len());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
        let wc = pool.install(|| {
            measure_wall_clock(&net, &predictors, &policy, &data.inputs[..n], args.reps, Some(&mut cost))
        })?;
        println!(
            "wall clock: speedup {:.2}x, prediction overhead {:.2}% of eager",
            wc.speedup,
            100.0 * wc.overhead_fraction
        );
        cost.wall_clock = Some(wc);
    }
    println!(
        "accuracy {:.4}, {:.0} FLOPs per sample ({:.3} of eager)",
        result.accuracy, cost.lazy_per_sample, cost.ratio
    );
    write_json(
        &args.out.join("eval.json"),
        &EvalOutput {
            policy: &policy,
            accuracy: result.accuracy,
            flops_ratio: cost.ratio,
        },
    )?;
    write_json(&args.out.join("cost_report.json"), &cost)?;
    rec.finish(&args.out)
}

pub fn sweep(args: &SweepArgs, threads: usize) -> Result<()> {
    let mut rec = RunRecorder::start("sweep", args, threads)?;
    let mode: SweepMode = args.mode.parse()?;
    let (net, fingerprint) = load_network(&args.model, &mut rec)?;
    let data = load_data(&args.data, &mut rec)?;
    let predictors = match &args.predictors {
        Some(p) => Some(load_matching_predictors(p, &fingerprint, &mut rec)?),
        None => None,
    };
    for name in conv_layers(&net, &args.layer)? {
        let rows = sensitivity_sweep(&net, &data, &name, &args.fractions, mode, predictors.as_ref())?;
        let summary: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.accuracy)).collect();
        println!("{name}: {}", summary.join(" "));
        let mut csv = create(&args.out.join(format!("sensitivity_{name}.csv")))?;
        writeln!(csv, "fraction,accuracy")?;
        for r in rows {
            writeln!(csv, "{},{}", r.fraction, r.accuracy)?;
        }
        csv.flush()?;
    }
    rec.finish(&args.out)
}

pub fn bench(args: &BenchArgs, threads: usize) -> Result<()> {
    let mut rec = RunRecorder::start("bench", args, threads)?;
    let (net, _) = load_network(&args.model, &mut rec)?;
    let data = load_data(&args.data, &mut rec)?;
    let input = data.inputs.first().context("dataset is empty")?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    for name in conv_layers(&net, &args.layer)? {
        let rows = pool.install(|| bench_layer(&net, &name, &args.fractions, input, args.reps))?;
        let summary: Vec<String> = rows.iter().map(|r| format!("{:.1}us", 1e6 * r.median_seconds)).collect();
        println!("{name}: {}", summary.join(" "));
        let mut csv = create(&args.out.join(format!("bench_{name}.csv")))?;
        writeln!(csv, "fraction,median_seconds")?;
        for r in rows {
            writeln!(csv, "{},{}", r.fraction, r.median_seconds)?;
        }
        csv.flush()?;
    }
    rec.finish(&args.out)
}

#[derive(Serialize)]
struct ParetoSummary {
    layers: Vec<String>,
    subset: Vec<usize>,
    config: Nsga2Config,
    eager_flops_per_sample: f64,
    evaluations: usize,
    front: Vec<lazyconv_core::pareto::Individual>,
}

pub fn pareto(args: &ParetoArgs, threads: usize) -> Result<()> {
    let mut rec = RunRecorder::start("pareto", args, threads)?;
    rec.seed(args.seed);
    let (net, fingerprint) = load_network(&args.model, &mut rec)?;
    let data = load_data(&args.data, &mut rec)?;
    let predictors = load_matching_predictors(&args.predictors, &fingerprint, &mut rec)?;
    let subset = if args.subset == 0 {
        (0..data.len()).collect()
    } else {
        choose_subset(data.len(), args.subset, args.seed)
    };
    let eval_data = data.subset(&subset);
    let evaluator = PolicyEvaluator::new(&net, &predictors, &eval_data)?;
    let cfg = Nsga2Config {
        population: args.pop,
        generations: args.gens,
        seed: args.seed,
        seed_genomes: vec![vec![1.0; evaluator.genome_len()]],
        ..Nsga2Config::default()
    };
    let run = nsga2(&cfg, &evaluator)?;
    let layers = net.prunable_convs();
    let mut archive = create(&args.out.join("pareto.csv"))?;
    write_archive_csv(&mut archive, &layers, &run.archive)?;
    archive.flush()?;
    let mut front = create(&args.out.join("front.csv"))?;
    write_front_csv(&mut front, &layers, &run.front)?;
    front.flush()?;
    let eager = CostModel::new(&net)?.eager_total() as f64;
    println!(
        "{} evaluations, {} front points; eager cost {eager:.0} FLOPs per sample",
        evaluator.evaluations(),
        run.front.len()
    );
    let mut points: Vec<_> = run.front.iter().map(|i| i.objectives).collect();
    points.sort_by(|a, b| a[1].total_cmp(&b[1]).then(a[0].total_cmp(&b[0])));
    points.dedup();
    for [error, flops] in points {
        println!("  error {error:.3} at {:.3} of eager", flops / eager);
    }
    write_json(
        &args.out.join("pareto.json"),
        &ParetoSummary {
            layers,
            subset,
            config: cfg,
            eager_flops_per_sample: eager,
            evaluations: evaluator.evaluations(),
            front: run.front,
        },
    )?;
    rec.finish(&args.out)
}

pub fn mem_report(args: &MemArgs, threads: usize) -> Result<()> {
    let mut rec = RunRecorder::start("mem-report", args, threads)?;
    rec.input(&args.model)?;
    let index = match &args.layer {
        Some(name) => build_weight_index(&args.model, name)?,
        None => {
            let (manifest, _) = read_manifest(&args.model)?;
            manifest
                .layers
                .iter()
                .filter(|l| l.kind == "dense")
                .find_map(|l| build_weight_index(&args.model, &l.name).ok())
                .context("model has no dense layer fed by flatten of a conv output")?
        }
    };
    let reports = args
        .fractions
        .iter()
        .map(|&f| memory_report(&index, f))
        .collect::<lazyconv_core::Result<Vec<_>>>()?;
    for r in &reports {
        println!(
            "{} at {} of {} filters: {} of {} bytes ({:.3})",
            r.layer, r.active_filters, r.filters, r.loaded_bytes, r.full_bytes, r.ratio
        );
    }
    write_json(&args.out.join("memory.json"), &reports)?;
    rec.finish(&args.out)
}
