//! NSGA-II over per-layer keep fractions.
//!
//! Both objectives are minimized: `error = 1 - accuracy` and model FLOPs per
//! sample. The generic pieces ([`non_dominated_sort`], [`crowding_distance`],
//! [`nsga2`]) work on any [`Evaluator`]; [`PolicyEvaluator`] plugs in the lazy
//! forward pass.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::evaluate;
use crate::error::{Error, Result};
use crate::lazy::{KeepPolicy, PredictorSet, kept_count};
use crate::model::{Dataset, Network};

pub type Objectives = [f64; 2];

/// `a` is no worse than `b` in both objectives and better in one.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

/// Fast non-dominated sorting. Fronts list input indices in ascending order.
pub fn non_dominated_sort(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for p in 0..n {
        for q in p + 1..n {
            if dominates(&points[p], &points[q]) {
                dominated_by_me[p].push(q);
                domination_count[q] += 1;
            } else if dominates(&points[q], &points[p]) {
                dominated_by_me[q].push(p);
                domination_count[p] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated_by_me[p] {
                domination_count[q] -= 1;
                if domination_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

/// Crowding distance of each member of one front. Boundary members (and every
/// member of a front of two or fewer) get infinity.
pub fn crowding_distance(front: &[Objectives]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0f64; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    for obj in 0..2 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a][obj].total_cmp(&front[b][obj]).then(a.cmp(&b)));
        let lo = front[order[0]][obj];
        let hi = front[order[n - 1]][obj];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        for w in 1..n - 1 {
            let i = order[w];
            if dist[i].is_finite() {
                dist[i] += (front[order[w + 1]][obj] - front[order[w - 1]][obj]) / span;
            }
        }
    }
    dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nsga2Config {
    /// Even, at least 8.
    pub population: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    pub crossover_eta: f64,
    /// Per-gene mutation probability; `None` means `1 / genome length`.
    pub mutation_prob: Option<f64>,
    pub mutation_eta: f64,
    pub seed: u64,
    /// Genomes placed at the front of generation 0 (clamped to [0, 1]).
    #[serde(default)]
    pub seed_genomes: Vec<Vec<f64>>,
}

impl Default for Nsga2Config {
    fn default() -> Self {
        Self {
            population: 40,
            generations: 30,
            crossover_prob: 0.9,
            crossover_eta: 15.0,
            mutation_prob: None,
            mutation_eta: 20.0,
            seed: 42,
            seed_genomes: Vec::new(),
        }
    }
}

impl Nsga2Config {
    pub fn validate(&self, genome_len: usize) -> Result<()> {
        if self.population < 8 || self.population % 2 != 0 {
            return Err(Error::Config("population must be even and at least 8".into()));
        }
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.crossover_prob) || !self.mutation_prob.is_none_or(prob_ok) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.crossover_eta >= 0.0 && self.mutation_eta >= 0.0) {
            return Err(Error::Config("distribution indices must be non-negative".into()));
        }
        if genome_len == 0 {
            return Err(Error::Config("genome must have at least one gene".into()));
        }
        if self.seed_genomes.iter().any(|g| g.len() != genome_len) {
            return Err(Error::Config("seed genome length does not match the problem".into()));
        }
        if self.seed_genomes.len() > self.population {
            return Err(Error::Config("more seed genomes than population slots".into()));
        }
        Ok(())
    }
}

/// Scores genomes. Must be deterministic.
pub trait Evaluator: Sync {
    fn genome_len(&self) -> usize;

    fn evaluate(&self, genome: &[f64]) -> Result<Objectives>;

    fn evaluate_batch(&self, genomes: &[Vec<f64>]) -> Result<Vec<Objectives>> {
        genomes.par_iter().map(|g| self.evaluate(g)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Vec<f64>,
    pub objectives: Objectives,
    /// Zero-based front index.
    pub rank: usize,
    pub crowding: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchivePoint {
    pub generation: usize,
    pub genome: Vec<f64>,
    pub objectives: Objectives,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nsga2Result {
    pub population: Vec<Individual>,
    /// Every evaluated point, generation 0 first.
    pub archive: Vec<ArchivePoint>,
    /// First front of the final population.
    pub front: Vec<Individual>,
    /// Per generation: the population's best value of each objective.
    pub best_per_generation: Vec<Objectives>,
}

fn rank_and_crowd(pop: &mut [Individual]) {
    let objs: Vec<Objectives> = pop.iter().map(|i| i.objectives).collect();
    for (r, front) in non_dominated_sort(&objs).into_iter().enumerate() {
        let fo: Vec<Objectives> = front.iter().map(|&i| objs[i]).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&fo)) {
            pop[i].rank = r;
            pop[i].crowding = d;
        }
    }
}

/// Lower rank wins, then larger crowding; ties keep the first.
fn crowded_better(a: &Individual, b: &Individual) -> bool {
    a.rank < b.rank || (a.rank == b.rank && a.crowding > b.crowding)
}

fn tournament<'a>(pop: &'a [Individual], rng: &mut ChaCha8Rng) -> &'a Individual {
    let a = &pop[rng.random_range(0..pop.len())];
    let b = &pop[rng.random_range(0..pop.len())];
    if crowded_better(b, a) { b } else { a }
}

/// Simulated binary crossover on [0, 1].
fn sbx(p1: &[f64], p2: &[f64], cfg: &Nsga2Config, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (mut c1, mut c2) = (p1.to_vec(), p2.to_vec());
    if rng.random::<f64>() > cfg.crossover_prob {
        return (c1, c2);
    }
    let eta = cfg.crossover_eta;
    let (lo, hi) = (0.0f64, 1.0f64);
    for i in 0..p1.len() {
        if rng.random::<f64>() > 0.5 || (p1[i] - p2[i]).abs() <= 1e-14 {
            continue;
        }
        let (y1, y2) = if p1[i] < p2[i] { (p1[i], p2[i]) } else { (p2[i], p1[i]) };
        let u: f64 = rng.random();
        let betaq = |beta: f64| {
            let alpha = 2.0 - beta.powf(-(eta + 1.0));
            if u <= 1.0 / alpha {
                (u * alpha).powf(1.0 / (eta + 1.0))
            } else {
                (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
            }
        };
        let b1 = betaq(1.0 + 2.0 * (y1 - lo) / (y2 - y1));
        let b2 = betaq(1.0 + 2.0 * (hi - y2) / (y2 - y1));
        let a = (0.5 * ((y1 + y2) - b1 * (y2 - y1))).clamp(lo, hi);
        let b = (0.5 * ((y1 + y2) + b2 * (y2 - y1))).clamp(lo, hi);
        if rng.random::<f64>() <= 0.5 {
            c1[i] = b;
            c2[i] = a;
        } else {
            c1[i] = a;
            c2[i] = b;
        }
    }
    (c1, c2)
}

/// Polynomial mutation on [0, 1].
fn mutate(genome: &mut [f64], prob: f64, eta: f64, rng: &mut ChaCha8Rng) {
    for y in genome.iter_mut() {
        if rng.random::<f64>() > prob {
            continue;
        }
        let (d1, d2) = (*y, 1.0 - *y);
        let r: f64 = rng.random();
        let pow = 1.0 / (eta + 1.0);
        let dq = if r <= 0.5 {
            let v = 2.0 * r + (1.0 - 2.0 * r) * (1.0 - d1).powf(eta + 1.0);
            v.powf(pow) - 1.0
        } else {
            let v = 2.0 * (1.0 - r) + 2.0 * (r - 0.5) * (1.0 - d2).powf(eta + 1.0);
            1.0 - v.powf(pow)
        };
        *y = (*y + dq).clamp(0.0, 1.0);
    }
}

/// Elitist generational NSGA-II; deterministic for a given seed and evaluator.
pub fn nsga2(cfg: &Nsga2Config, evaluator: &dyn Evaluator) -> Result<Nsga2Result> {
    let len = evaluator.genome_len();
    cfg.validate(len)?;
    let n = cfg.population;
    let pm = cfg.mutation_prob.unwrap_or(1.0 / len as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut genomes: Vec<Vec<f64>> = cfg
        .seed_genomes
        .iter()
        .map(|g| g.iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect();
    while genomes.len() < n {
        genomes.push((0..len).map(|_| rng.random::<f64>()).collect());
    }
    let objectives = evaluator.evaluate_batch(&genomes)?;
    check_finite(&objectives)?;
    let mut archive: Vec<ArchivePoint> = genomes
        .iter()
        .zip(&objectives)
        .map(|(g, &o)| ArchivePoint {
            generation: 0,
            genome: g.clone(),
            objectives: o,
        })
        .collect();
    let mut pop: Vec<Individual> = genomes
        .into_iter()
        .zip(objectives)
        .map(|(genome, objectives)| Individual {
            genome,
            objectives,
            rank: 0,
            crowding: 0.0,
        })
        .collect();
    rank_and_crowd(&mut pop);
    let best = |pop: &[Individual]| {
        pop.iter().fold([f64::INFINITY; 2], |b, i| {
            [b[0].min(i.objectives[0]), b[1].min(i.objectives[1])]
        })
    };
    let mut best_per_generation = vec![best(&pop)];

    for generation in 1..=cfg.generations {
        let mut children = Vec::with_capacity(n);
        while children.len() < n {
            let p1 = tournament(&pop, &mut rng).genome.clone();
            let p2 = tournament(&pop, &mut rng).genome.clone();
            let (mut c1, mut c2) = sbx(&p1, &p2, cfg, &mut rng);
            mutate(&mut c1, pm, cfg.mutation_eta, &mut rng);
            mutate(&mut c2, pm, cfg.mutation_eta, &mut rng);
            children.push(c1);
            children.push(c2);
        }
        children.truncate(n);
        let objectives = evaluator.evaluate_batch(&children)?;
        check_finite(&objectives)?;
        for (g, &o) in children.iter().zip(&objectives) {
            archive.push(ArchivePoint {
                generation,
                genome: g.clone(),
                objectives: o,
            });
        }
        let mut combined = pop;
        combined.extend(children.into_iter().zip(objectives).map(|(genome, objectives)| {
            Individual {
                genome,
                objectives,
                rank: 0,
                crowding: 0.0,
            }
        }));
        rank_and_crowd(&mut combined);
        let objs: Vec<Objectives> = combined.iter().map(|i| i.objectives).collect();
        let mut chosen: Vec<usize> = Vec::with_capacity(n);
        for front in non_dominated_sort(&objs) {
            if chosen.len() + front.len() <= n {
                chosen.extend(front);
            } else {
                let mut rest = front;
                rest.sort_by(|&a, &b| {
                    combined[b].crowding.total_cmp(&combined[a].crowding).then(a.cmp(&b))
                });
                rest.truncate(n - chosen.len());
                chosen.extend(rest);
            }
            if chosen.len() == n {
                break;
            }
        }
        pop = chosen.into_iter().map(|i| combined[i].clone()).collect();
        rank_and_crowd(&mut pop);
        best_per_generation.push(best(&pop));
    }

    let front = pop.iter().filter(|i| i.rank == 0).cloned().collect();
    Ok(Nsga2Result {
        population: pop,
        archive,
        front,
        best_per_generation,
    })
}

fn check_finite(objs: &[Objectives]) -> Result<()> {
    if objs.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Contract("evaluator returned a non-finite objective".into()))
    }
}

/// Seeded sample of `size` distinct indices out of `count`, ascending.
pub fn choose_subset(count: usize, size: usize, seed: u64) -> Vec<usize> {
    if size >= count {
        return (0..count).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, count, size).into_vec();
    idx.sort_unstable();
    idx
}

/// Scores keep-fraction genomes with the lazy forward pass over a dataset.
///
/// Genomes are canonicalized to the kept-filter count of each layer, so two
/// genomes that keep the same number of filters everywhere share one
/// (memoized) evaluation.
pub struct PolicyEvaluator<'a> {
    net: &'a Network,
    predictors: &'a PredictorSet,
    data: &'a Dataset,
    layer_sizes: Vec<usize>,
    cache: Mutex<HashMap<Vec<usize>, Objectives>>,
}

impl<'a> PolicyEvaluator<'a> {
    pub fn new(net: &'a Network, predictors: &'a PredictorSet, data: &'a Dataset) -> Result<Self> {
        let layer_sizes = net
            .prunable_convs()
            .iter()
            .map(|n| net.conv(n).map(|c| c.out_filters))
            .collect::<Result<Vec<_>>>()?;
        for name in net.prunable_convs() {
            if predictors.get(&name).is_none() {
                return Err(Error::MissingPredictor(name));
            }
        }
        Ok(Self {
            net,
            predictors,
            data,
            layer_sizes,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn kept_counts(&self, genome: &[f64]) -> Vec<usize> {
        genome
            .iter()
            .zip(&self.layer_sizes)
            .map(|(&f, &o)| kept_count(f, o))
            .collect()
    }

    /// Policy with fractions `kept / filters`, so a layer keeping all filters
    /// is evaluated without prediction.
    pub fn policy(&self, genome: &[f64]) -> Result<KeepPolicy> {
        let fractions: Vec<f64> = self
            .kept_counts(genome)
            .iter()
            .zip(&self.layer_sizes)
            .map(|(&k, &o)| if k == o { 1.0 } else { k as f64 / o as f64 })
            .collect();
        KeepPolicy::from_genome(self.net, &fractions)
    }

    pub fn evaluations(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl Evaluator for PolicyEvaluator<'_> {
    fn genome_len(&self) -> usize {
        self.layer_sizes.len()
    }

    fn evaluate(&self, genome: &[f64]) -> Result<Objectives> {
        if genome.len() != self.layer_sizes.len() {
            return Err(Error::Dimension(format!(
                "genome has {} entries, expected {}",
                genome.len(),
                self.layer_sizes.len()
            )));
        }
        let key = self.kept_counts(genome);
        if let Some(&o) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(o);
        }
        let eval = evaluate(self.net, self.predictors, &self.policy(genome)?, self.data)?;
        let o = [1.0 - eval.accuracy, eval.cost.lazy_per_sample];
        self.cache.lock().expect("cache lock").insert(key, o);
        Ok(o)
    }
}

/// `(error, FLOPs per sample)` of one genome.
pub fn evaluate_policy(
    net: &Network,
    predictors: &PredictorSet,
    data: &Dataset,
    genome: &[f64],
) -> Result<Objectives> {
    PolicyEvaluator::new(net, predictors, data)?.evaluate(genome)
}

/// CSV: `generation,<layer names>...,error,flops`.
pub fn write_archive_csv(mut w: impl Write, layers: &[String], archive: &[ArchivePoint]) -> Result<()> {
    writeln!(w, "generation,{},error,flops", layers.join(","))?;
    for p in archive {
        let genes: Vec<String> = p.genome.iter().map(|g| g.to_string()).collect();
        writeln!(w, "{},{},{},{}", p.generation, genes.join(","), p.objectives[0], p.objectives[1])?;
    }
    Ok(())
}

/// CSV: `<layer names>...,error,flops`, sorted by FLOPs.
pub fn write_front_csv(mut w: impl Write, layers: &[String], front: &[Individual]) -> Result<()> {
    writeln!(w, "{},error,flops", layers.join(","))?;
    let mut rows: Vec<&Individual> = front.iter().collect();
    rows.sort_by(|a, b| a.objectives[1].total_cmp(&b.objectives[1]));
    for i in rows {
        let genes: Vec<String> = i.genome.iter().map(|g| g.to_string()).collect();
        writeln!(w, "{},{},{}", genes.join(","), i.objectives[0], i.objectives[1])?;
    }
    Ok(())
}
