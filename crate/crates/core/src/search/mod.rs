//! Generational genetic algorithm over two-convolution architectures.
//!
//! A chromosome holds four genes `[k1, f1, k2, f2]`: kernel size and filter
//! count of each convolution, all in `1..=50`.

mod modes;

pub use modes::{
    dispatch, run_experiment, run_mode_distributed_evaluation, run_mode_distributed_population,
    run_mode_local, run_search, serve, serve_experiment, Task, TaskReply,
};

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::evaluator::EvaluationResult;
use crate::rng::SeededRng;
use crate::rng::{derive_seed, seeded};
use crate::tensor::LayerKind;

pub const GENE_MIN: u32 = 1;
pub const GENE_MAX: u32 = 50;
pub const GENES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct Chromosome {
    genes: [u32; GENES],
}

impl Chromosome {
    pub fn new(genes: [u32; GENES]) -> Result<Self> {
        if let Some(bad) = genes.iter().find(|g| !(GENE_MIN..=GENE_MAX).contains(g)) {
            return Err(Error::Input(format!(
                "gene {bad} outside [{GENE_MIN}, {GENE_MAX}]"
            )));
        }
        Ok(Self { genes })
    }

    pub fn genes(&self) -> [u32; GENES] {
        self.genes
    }

    pub fn random(rng: &mut SeededRng) -> Self {
        Self {
            genes: std::array::from_fn(|_| random_gene(rng)),
        }
    }
}

impl TryFrom<[u32; 4]> for Chromosome {
    type Error = Error;

    fn try_from(genes: [u32; 4]) -> Result<Self> {
        Self::new(genes)
    }
}

impl From<Chromosome> for [u32; 4] {
    fn from(c: Chromosome) -> Self {
        c.genes
    }
}

impl fmt::Display for Chromosome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.genes;
        write!(f, "({a},{b},{c},{d})")
    }
}

fn random_gene(rng: &mut SeededRng) -> u32 {
    rng.random_range(GENE_MIN..=GENE_MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Per-gene resampling probability.
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 10,
            generations: 10,
            crossover_rate: 0.9,
            mutation_rate: 0.2,
            tournament_size: 2,
            elitism: 1,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.crossover_rate) {
            return Err(Error::Config("ga.crossover_rate must be in [0, 1]".into()));
        }
        if !rate_ok(self.mutation_rate) {
            return Err(Error::Config("ga.mutation_rate must be in [0, 1]".into()));
        }
        if self.population_size < 2 {
            return Err(Error::Config("ga.population_size must be >= 2".into()));
        }
        if self.generations < 1 {
            return Err(Error::Config("ga.generations must be >= 1".into()));
        }
        if self.tournament_size < 1 {
            return Err(Error::Config("ga.tournament_size must be >= 1".into()));
        }
        if self.elitism >= self.population_size {
            return Err(Error::Config(
                "ga.elitism must be smaller than ga.population_size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub chromosome: Chromosome,
    pub fitness: Option<f64>,
    pub eval_result: Option<EvaluationResult>,
}

impl Individual {
    pub fn unevaluated(chromosome: Chromosome) -> Self {
        Self {
            chromosome,
            fitness: None,
            eval_result: None,
        }
    }

    /// Fitness is the test accuracy; failed evaluations carry exactly zero.
    pub fn evaluated(chromosome: Chromosome, result: EvaluationResult) -> Self {
        let fitness = if result.is_ok() {
            result.test_accuracy
        } else {
            0.0
        };
        Self {
            chromosome,
            fitness: Some(fitness),
            eval_result: Some(result),
        }
    }

    fn parameters(&self) -> usize {
        self.eval_result
            .as_ref()
            .map_or(0, |r| r.trainable_parameters)
    }
}

/// `Conv2d(C -> f1, k1) -> ReLU -> Conv2d(f1 -> f2, k2) -> ReLU -> Flatten ->
/// Dense(f2*H*W -> classes)`, built sequentially.
pub fn decode(chromosome: &Chromosome, input_shape: [usize; 3], classes: usize) -> Descriptor {
    let [k1, f1, k2, f2] = chromosome.genes.map(|g| g as usize);
    let [c, h, w] = input_shape;
    let mut d = Descriptor::new();
    let layers = [
        LayerKind::Conv2d {
            in_channels: c,
            out_channels: f1,
            kernel: k1,
        },
        LayerKind::ReLU,
        LayerKind::Conv2d {
            in_channels: f1,
            out_channels: f2,
            kernel: k2,
        },
        LayerKind::ReLU,
        LayerKind::Flatten,
        LayerKind::Dense {
            in_features: f2 * h * w,
            out_features: classes,
        },
    ];
    for kind in layers {
        d.add_layer_sequential(kind)
            .expect("fresh sequential names never clash");
    }
    d
}

/// `population_size` individuals with i.i.d. uniform genes, drawn from a
/// generator seeded by `cfg.seed`.
pub fn init_population(cfg: &GaConfig) -> Vec<Individual> {
    let mut rng = seeded(cfg.seed);
    (0..cfg.population_size)
        .map(|_| Individual::unevaluated(Chromosome::random(&mut rng)))
        .collect()
}

/// The generator driving selection and variation after generation 0.
pub fn evolution_rng(cfg: &GaConfig) -> SeededRng {
    seeded(derive_seed(cfg.seed, &[1]))
}

/// `Less` when `a` ranks ahead of `b`: higher fitness, then fewer trainable
/// parameters, then lower population index.
fn rank_order(population: &[Individual], a: usize, b: usize) -> Ordering {
    let (x, y) = (&population[a], &population[b]);
    let fx = x.fitness.unwrap_or(f64::NEG_INFINITY);
    let fy = y.fitness.unwrap_or(f64::NEG_INFINITY);
    fy.total_cmp(&fx)
        .then(x.parameters().cmp(&y.parameters()))
        .then(a.cmp(&b))
}

/// Population indices from best to worst.
pub fn ranking(population: &[Individual]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| rank_order(population, a, b));
    order
}

/// Tournament selection with replacement. Returns the winner's index.
pub fn select(
    population: &[Individual],
    tournament_size: usize,
    rng: &mut SeededRng,
) -> Result<usize> {
    if population.is_empty() {
        return Err(Error::Usage(
            "cannot select from an empty population".into(),
        ));
    }
    if let Some(i) = population.iter().position(|p| p.fitness.is_none()) {
        return Err(Error::Usage(format!(
            "individual {i} has not been evaluated"
        )));
    }
    let mut best = rng.random_range(0..population.len());
    for _ in 1..tournament_size.max(1) {
        let challenger = rng.random_range(0..population.len());
        if rank_order(population, challenger, best) == Ordering::Less {
            best = challenger;
        }
    }
    Ok(best)
}

/// Single-point crossover with probability `rate`, cutting after gene 1, 2
/// or 3. Otherwise the children copy the parents.
pub fn crossover(
    a: &Chromosome,
    b: &Chromosome,
    rate: f64,
    rng: &mut SeededRng,
) -> (Chromosome, Chromosome) {
    if rng.random::<f64>() >= rate {
        return (*a, *b);
    }
    let cut = rng.random_range(1..GENES);
    crossover_at(a, b, cut)
}

pub fn crossover_at(a: &Chromosome, b: &Chromosome, cut: usize) -> (Chromosome, Chromosome) {
    let mut x = a.genes;
    let mut y = b.genes;
    x[cut..].copy_from_slice(&b.genes[cut..]);
    y[cut..].copy_from_slice(&a.genes[cut..]);
    (Chromosome { genes: x }, Chromosome { genes: y })
}

/// Resamples each gene independently with probability `rate`.
pub fn mutate(c: &Chromosome, rate: f64, rng: &mut SeededRng) -> Chromosome {
    let mut genes = c.genes;
    for g in &mut genes {
        if rng.random::<f64>() < rate {
            *g = random_gene(rng);
        }
    }
    Chromosome { genes }
}

/// Produces the next generation: the `cfg.elitism` best individuals carry
/// over unchanged (and are not re-evaluated); the rest are bred by
/// selection, crossover and mutation and scored by `evaluate` in one batch.
pub fn evolve_generation<F>(
    population: &[Individual],
    mut evaluate: F,
    cfg: &GaConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Individual>>
where
    F: FnMut(&[Chromosome]) -> Result<Vec<EvaluationResult>>,
{
    let order = ranking(population);
    let mut next: Vec<Individual> = order
        .iter()
        .take(cfg.elitism)
        .map(|&i| population[i].clone())
        .collect();
    let mut children = Vec::with_capacity(cfg.population_size - next.len());
    while next.len() + children.len() < cfg.population_size {
        let a = select(population, cfg.tournament_size, rng)?;
        let b = select(population, cfg.tournament_size, rng)?;
        let (x, y) = crossover(
            &population[a].chromosome,
            &population[b].chromosome,
            cfg.crossover_rate,
            rng,
        );
        children.push(mutate(&x, cfg.mutation_rate, rng));
        if next.len() + children.len() < cfg.population_size {
            children.push(mutate(&y, cfg.mutation_rate, rng));
        }
    }
    next.extend(score(&children, &mut evaluate)?);
    Ok(next)
}

/// Evaluates a batch of chromosomes into individuals.
pub fn score<F>(chromosomes: &[Chromosome], evaluate: &mut F) -> Result<Vec<Individual>>
where
    F: FnMut(&[Chromosome]) -> Result<Vec<EvaluationResult>>,
{
    let results = evaluate(chromosomes)?;
    if results.len() != chromosomes.len() {
        return Err(Error::Usage(format!(
            "evaluator returned {} results for {} chromosomes",
            results.len(),
            chromosomes.len()
        )));
    }
    Ok(chromosomes
        .iter()
        .zip(results)
        .map(|(c, r)| Individual::evaluated(*c, r))
        .collect())
}

/// The smooth test landscape `1 - mean(|g - 25| / 25)`, maximal at all 25s.
pub fn fake_fitness(c: &Chromosome) -> f64 {
    let total: f64 = c
        .genes
        .iter()
        .map(|&g| (g as f64 - 25.0).abs() / 25.0)
        .sum();
    1.0 - total / GENES as f64
}

/// Synthetic result for [`fake_fitness`], with parameters from the genes.
pub fn fake_result(c: &Chromosome) -> EvaluationResult {
    EvaluationResult {
        test_accuracy: fake_fitness(c).clamp(0.0, 1.0),
        trainable_parameters: c.genes.iter().map(|&g| g as usize).product(),
        train_seconds: 0.0,
        epochs_run: 1,
        status: crate::evaluator::EvalStatus::Ok,
    }
}
