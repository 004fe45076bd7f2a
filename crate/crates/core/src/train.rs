//! Fitting strength predictors by minibatch subgradient descent on mean
//! absolute error, and scoring them.
//!
//! Source strengths are standardized with training-split statistics (stored
//! in the predictor). Targets are standardized too while fitting, and the
//! learned map is folded back into raw target units afterwards, so the step
//! size does not depend on how large a layer's strengths happen to be.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::TraceSet;
use crate::lazy::{PredictorSet, StrengthPredictor, kept_count, select_top_fraction};

pub const MIN_SAMPLES: usize = 10;
/// Keep fractions at which prediction quality is reported.
pub const REPORT_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];
/// Relative validation-MAE gain over the baseline needed to count as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 0.05;

/// Step size per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSchedule {
    Constant,
    /// From `learning_rate` at the first epoch down towards 0 at the last.
    #[default]
    Linear,
}

impl StepSchedule {
    pub fn step(self, learning_rate: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            StepSchedule::Constant => learning_rate,
            StepSchedule::Linear => learning_rate * (1.0 - epoch as f64 / epochs as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial step size.
    pub learning_rate: f64,
    /// Subgradient steps with a constant size stall at a noise floor
    /// proportional to the step; the default decays it.
    #[serde(default)]
    pub schedule: StepSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of samples used for training; the rest validate.
    pub train_split: f64,
    /// L2 penalty on the weights; 0 disables it.
    pub ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            schedule: StepSchedule::Linear,
            epochs: 200,
            batch_size: 32,
            seed: 42,
            train_split: 0.8,
            ridge: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning rate, epochs and batch size must be positive".into(),
            ));
        }
        if !(self.train_split > 0.0 && self.train_split < 1.0) {
            return Err(Error::Config("train split must lie in (0, 1)".into()));
        }
        if self.ridge < 0.0 {
            return Err(Error::Config("ridge penalty must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapScore {
    pub fraction: f64,
    pub predictor: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub layer: String,
    pub source: String,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub train_mae: f64,
    pub validation_mae: f64,
    /// Validation MAE of predicting the training-split per-filter mean.
    pub baseline_mae: f64,
    /// `1 - validation_mae / baseline_mae` (0 when the baseline is exact).
    pub improvement: f64,
    /// Whether `improvement` exceeds [`IMPROVEMENT_THRESHOLD`].
    pub improves_over_baseline: bool,
    /// Source filters with zero training variance (standardized with std 1).
    pub degenerate_sources: Vec<usize>,
    /// Mean validation top-fraction overlap for the predictor and the baseline.
    pub overlap: Vec<OverlapScore>,
}

/// Mean over all samples and filters of `|predicted - actual|`.
pub fn mae<P: AsRef<[f32]>, A: AsRef<[f32]>>(predicted: &[P], actual: &[A]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Dimension(format!(
            "{} predicted vectors vs {} actual",
            predicted.len(),
            actual.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (p, a) in predicted.iter().zip(actual) {
        let (p, a) = (p.as_ref(), a.as_ref());
        if p.len() != a.len() {
            return Err(Error::Dimension(format!(
                "vector of length {} vs {}",
                p.len(),
                a.len()
            )));
        }
        for (&x, &y) in p.iter().zip(a) {
            sum += (x as f64 - y as f64).abs();
        }
        count += p.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Share of the actual top-`fraction` filters that the predicted scores also rank in their top.
pub fn topn_overlap(predicted: &[f32], actual: &[f32], fraction: f64) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Dimension(format!(
            "{} predicted vs {} actual strengths",
            predicted.len(),
            actual.len()
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("overlap fraction {fraction} outside (0, 1]")));
    }
    let n = predicted.len();
    let k = kept_count(fraction, n);
    if k == 0 {
        return Err(Error::Dimension("overlap of empty vectors".into()));
    }
    let p = select_top_fraction(predicted, fraction, n)?;
    let a = select_top_fraction(actual, fraction, n)?;
    let shared = p.active().iter().filter(|&&i| a.contains(i)).count();
    Ok(shared as f64 / k as f64)
}

/// Affine map in standardized space: `y = W z + b`, `W` row-major `m x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub m: usize,
    pub n: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineParams {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            weights: vec![0.0; m * n],
            bias: vec![0.0; m],
        }
    }

    fn residual(&self, x: &[f64], y: &[f64], j: usize) -> f64 {
        let row = &self.weights[j * self.n..(j + 1) * self.n];
        let mut acc = 0.0;
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        acc + self.bias[j] - y[j]
    }
}

/// Objective minimized per step: mean over `rows` of the summed absolute
/// residuals across targets.
pub fn batch_loss(p: &AffineParams, xs: &[Vec<f64>], ys: &[Vec<f64>], rows: &[usize]) -> f64 {
    let mut total = 0.0;
    for &r in rows {
        for j in 0..p.m {
            total += p.residual(&xs[r], &ys[r], j).abs();
        }
    }
    total / rows.len() as f64
}

/// Subgradient of [`batch_loss`]; `sign(0)` is taken as 0.
pub fn batch_subgradient(
    p: &AffineParams,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    rows: &[usize],
) -> AffineParams {
    let mut g = AffineParams::zeros(p.m, p.n);
    let scale = 1.0 / rows.len() as f64;
    for &r in rows {
        let x = &xs[r];
        for j in 0..p.m {
            let res = p.residual(x, &ys[r], j);
            let sign = if res > 0.0 {
                scale
            } else if res < 0.0 {
                -scale
            } else {
                0.0
            };
            if sign == 0.0 {
                continue;
            }
            g.bias[j] += sign;
            for (gw, &v) in g.weights[j * p.n..(j + 1) * p.n].iter_mut().zip(x) {
                *gw += sign * v;
            }
        }
    }
    g
}

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
    degenerate: Vec<usize>,
}

impl Standardizer {
    fn fit(rows: &[&[f32]], dims: usize) -> Self {
        let count = rows.len() as f64;
        let mut mean = vec![0.0f64; dims];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; dims];
        for r in rows {
            for ((s, &v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let mut degenerate = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let sd = (s / count).sqrt();
                // f32 storage must round-trip to a positive value
                if sd.is_finite() && (sd as f32) > 0.0 && sd > 1e-12 * mean[i].abs().max(1.0) {
                    sd
                } else {
                    degenerate.push(i);
                    1.0
                }
            })
            .collect();
        Self { mean, std, degenerate }
    }

    fn apply(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Deterministic train/validation split of `count` samples.
pub fn split_indices(count: usize, train_split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((count as f64 * train_split).floor() as usize).clamp(1, count.saturating_sub(1));
    let val = order.split_off(n_train);
    (order, val)
}

/// Fits the predictor of `target_layer` from `source_layer` strengths.
pub fn train_predictor(
    traces: &TraceSet,
    source_layer: &str,
    target_layer: &str,
    cfg: &TrainConfig,
) -> Result<(StrengthPredictor, TrainReport)> {
    cfg.validate()?;
    if traces.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: traces.len(),
        });
    }
    let sources = traces.layer_rows(source_layer)?;
    let targets = traces.layer_rows(target_layer)?;
    let n = traces.layers[traces.layer_position(source_layer)?].1;
    let m = traces.layers[traces.layer_position(target_layer)?].1;

    let (train, val) = split_indices(traces.len(), cfg.train_split, cfg.seed);
    let pick = |rows: &[&[f32]], idx: &[usize]| -> Vec<Vec<f32>> {
        idx.iter().map(|&i| rows[i].to_vec()).collect()
    };
    let (train_x, train_y) = (pick(&sources, &train), pick(&targets, &train));
    let (val_x, val_y) = (pick(&sources, &val), pick(&targets, &val));

    let x_norm = Standardizer::fit(&train_x.iter().map(Vec::as_slice).collect::<Vec<_>>(), n);
    let y_norm = Standardizer::fit(&train_y.iter().map(Vec::as_slice).collect::<Vec<_>>(), m);
    let xs: Vec<Vec<f64>> = train_x.iter().map(|r| x_norm.apply(r)).collect();
    let ys: Vec<Vec<f64>> = train_y.iter().map(|r| y_norm.apply(r)).collect();

    let mut params = AffineParams::zeros(m, n);
    for j in 0..m {
        let mut col: Vec<f64> = ys.iter().map(|y| y[j]).collect();
        params.bias[j] = median(&mut col);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.schedule.step(cfg.learning_rate, epoch, cfg.epochs);
        for batch in order.chunks(cfg.batch_size) {
            let g = batch_subgradient(&params, &xs, &ys, batch);
            for (w, gw) in params.weights.iter_mut().zip(&g.weights) {
                *w -= lr * (gw + cfg.ridge * *w);
            }
            for (b, gb) in params.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    // Fold the target standardization back into raw units.
    let mut weights = Vec::with_capacity(m * n);
    let mut bias = Vec::with_capacity(m);
    for j in 0..m {
        let (sd, mu) = (y_norm.std[j], y_norm.mean[j]);
        weights.extend(params.weights[j * n..(j + 1) * n].iter().map(|w| (w * sd) as f32));
        bias.push((params.bias[j] * sd + mu) as f32);
    }
    let predictor = StrengthPredictor {
        layer: target_layer.to_string(),
        source: source_layer.to_string(),
        weights,
        bias,
        mean: x_norm.mean.iter().map(|&v| v as f32).collect(),
        std: x_norm.std.iter().map(|&v| v as f32).collect(),
    };
    predictor.validate()?;

    let predict_all = |rows: &[Vec<f32>]| -> Result<Vec<Vec<f32>>> {
        rows.iter().map(|r| predictor.predict(r)).collect()
    };
    let train_pred = predict_all(&train_x)?;
    let val_pred = predict_all(&val_x)?;
    let baseline_row: Vec<f32> = y_norm.mean.iter().map(|&v| v as f32).collect();
    let baseline_pred = vec![baseline_row.clone(); val_y.len()];

    let train_mae = mae(&train_pred, &train_y)?;
    let validation_mae = mae(&val_pred, &val_y)?;
    let baseline_mae = mae(&baseline_pred, &val_y)?;
    let improvement = if baseline_mae > 0.0 {
        1.0 - validation_mae / baseline_mae
    } else {
        0.0
    };

    let mean_overlap = |preds: &[Vec<f32>], fraction: f64| -> Result<f64> {
        let mut total = 0.0;
        for (p, a) in preds.iter().zip(&val_y) {
            total += topn_overlap(p, a, fraction)?;
        }
        Ok(total / val_y.len() as f64)
    };
    let overlap = REPORT_FRACTIONS
        .iter()
        .map(|&f| {
            Ok(OverlapScore {
                fraction: f,
                predictor: mean_overlap(&val_pred, f)?,
                baseline: mean_overlap(&baseline_pred, f)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = TrainReport {
        layer: target_layer.to_string(),
        source: source_layer.to_string(),
        train_samples: train.len(),
        validation_samples: val.len(),
        train_mae,
        validation_mae,
        baseline_mae,
        improvement,
        improves_over_baseline: improvement > IMPROVEMENT_THRESHOLD,
        degenerate_sources: x_norm.degenerate,
        overlap,
    };
    Ok((predictor, report))
}

/// One predictor per consecutive conv pair in `traces`, trained in parallel.
pub fn train_all(traces: &TraceSet, cfg: &TrainConfig) -> Result<(PredictorSet, Vec<TrainReport>)> {
    let results = traces
        .pairs()
        .par_iter()
        .map(|(s, t)| train_predictor(traces, s, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut set = PredictorSet::new(traces.fingerprint.clone());
    let mut reports = Vec::with_capacity(results.len());
    for (p, r) in results {
        set.insert(p);
        reports.push(r);
    }
    Ok((set, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn traces_from(pairs: Vec<(Vec<f32>, Vec<f32>)>) -> TraceSet {
        let (n, m) = (pairs[0].0.len(), pairs[0].1.len());
        TraceSet {
            fingerprint: "test".into(),
            layers: vec![("a".into(), n), ("b".into(), m)],
            records: pairs.into_iter().map(|(mut s, t)| { s.extend(t); s }).collect(),
        }
    }

    #[test]
    fn mae_examples() {
        let a = vec![vec![1.0f32, 2.0], vec![3.0, 4.0]];
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec<f32>> = a.iter().map(|r| r.iter().map(|v| v + 1.0).collect()).collect();
        assert_eq!(mae(&b, &a).unwrap(), 1.0);
        assert!(mae(&a[..1], &a).is_err());
        assert!(mae(&[vec![1.0f32]], &[vec![1.0f32, 2.0]]).is_err());
    }

    #[test]
    fn mae_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<Vec<f32>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f32>()).collect()).collect();
        let a: Vec<Vec<f32>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f32>()).collect()).collect();
        let mut s = 0.0f64;
        for i in 0..7 {
            for j in 0..5 {
                s += (p[i][j] as f64 - a[i][j] as f64).abs();
            }
        }
        assert!((mae(&p, &a).unwrap() - s / 35.0).abs() < 1e-6);
    }

    #[test]
    fn overlap_examples() {
        let v = [0.3f32, 0.9, 0.1, 0.5];
        assert_eq!(topn_overlap(&v, &v, 0.5).unwrap(), 1.0);
        assert_eq!(topn_overlap(&[3.0, 1.0, 2.0], &[3.0, 2.0, 1.0], 2.0 / 3.0).unwrap(), 0.5);
        assert_eq!(topn_overlap(&[4.0, 3.0, 2.0, 1.0], &[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 0.0);
        assert!(topn_overlap(&v, &v[..3], 0.5).is_err());
        assert!(topn_overlap(&v, &v, 0.0).is_err());
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (m, n, rows) = (3, 4, 12);
        let xs: Vec<Vec<f64>> = (0..rows).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..rows).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut p = AffineParams::zeros(m, n);
        p.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let idx: Vec<usize> = (0..rows).collect();
        let g = batch_subgradient(&p, &xs, &ys, &idx);
        let h = 1e-6;
        let fd = |p: &AffineParams, f: &dyn Fn(&mut AffineParams, f64)| {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            f(&mut plus, h);
            f(&mut minus, -h);
            (batch_loss(&plus, &xs, &ys, &idx) - batch_loss(&minus, &xs, &ys, &idx)) / (2.0 * h)
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3);
        for k in 0..m * n {
            let d = fd(&p, &|q: &mut AffineParams, e| q.weights[k] += e);
            assert!(close(d, g.weights[k]), "w[{k}]: fd {d} vs {}", g.weights[k]);
        }
        for j in 0..m {
            let d = fd(&p, &|q: &mut AffineParams, e| q.bias[j] += e);
            assert!(close(d, g.bias[j]), "b[{j}]: fd {d} vs {}", g.bias[j]);
        }
    }

    #[test]
    fn learns_exact_linear_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = (0..400)
            .map(|_| {
                let s = rng.random_range(5.0f32..15.0);
                (vec![s], vec![2.0 * s])
            })
            .collect();
        let traces = traces_from(pairs);
        let (p, report) = train_predictor(&traces, "a", "b", &TrainConfig::default()).unwrap();
        let mean_target = 20.0;
        assert!(report.validation_mae < 0.01 * mean_target, "{report:?}");
        assert!((p.predict(&[10.0]).unwrap()[0] - 20.0).abs() < 0.2);
    }

    #[test]
    fn constant_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs = (0..100).map(|_| (vec![rng.random::<f32>(), rng.random::<f32>()], vec![3.5, 1.25])).collect();
        let (_, report) = train_predictor(&traces_from(pairs), "a", "b", &TrainConfig::default()).unwrap();
        assert!(report.validation_mae <= report.baseline_mae + 1e-6, "{report:?}");
        assert!(report.baseline_mae < 1e-6);
    }

    #[test]
    fn noise_targets_show_no_improvement() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let pairs = (0..300)
                .map(|_| {
                    let s: Vec<f32> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
                    let t: Vec<f32> = (0..3).map(|_| rng.random_range(0.0..10.0)).collect();
                    (s, t)
                })
                .collect();
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let (_, report) = train_predictor(&traces_from(pairs), "a", "b", &cfg).unwrap();
            assert!(report.validation_mae >= 0.0);
            assert!(!report.improves_over_baseline, "{report:?}");
            assert!(report.validation_mae <= 2.0 * report.baseline_mae);
        }
    }

    #[test]
    fn degenerate_source_flagged_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<_> = (0..50)
            .map(|_| {
                let s = rng.random_range(0.0f32..1.0);
                (vec![s, 4.0], vec![s + 1.0])
            })
            .collect();
        let traces = traces_from(pairs);
        let (p1, r1) = train_predictor(&traces, "a", "b", &TrainConfig::default()).unwrap();
        let (p2, _) = train_predictor(&traces, "a", "b", &TrainConfig::default()).unwrap();
        assert_eq!(r1.degenerate_sources, vec![1]);
        assert_eq!(p1.std[1], 1.0);
        assert_eq!(p1, p2);
    }

    #[test]
    fn too_few_samples() {
        let pairs = (0..5).map(|i| (vec![i as f32], vec![i as f32])).collect();
        assert!(matches!(
            train_predictor(&traces_from(pairs), "a", "b", &TrainConfig::default()),
            Err(Error::TooFewSamples { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn overlap_invariant_under_monotone_transforms(
            a in proptest::collection::vec(0.1f32..10.0, 2..30),
            b in proptest::collection::vec(0.1f32..10.0, 2..30),
            f in 0.05f64..=1.0,
            scale in 0.1f32..10.0,
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let distinct = |v: &[f32]| { let mut w = v.to_vec(); w.sort_by(f32::total_cmp); w.windows(2).all(|p| p[0] < p[1]) };
            let sa: Vec<f32> = a.iter().map(|v| v * scale).collect();
            let ta: Vec<f32> = a.iter().map(|v| v.ln()).collect();
            let tb: Vec<f32> = b.iter().map(|v| v.ln()).collect();
            proptest::prop_assume!(distinct(a) && distinct(b) && distinct(&sa) && distinct(&ta) && distinct(&tb));
            let base = topn_overlap(a, b, f).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&base));
            proptest::prop_assert_eq!(base, topn_overlap(&sa, b, f).unwrap());
            proptest::prop_assert_eq!(base, topn_overlap(&ta, &tb, f).unwrap());
        }
    }
}
