//! Evaluators: compile a descriptor, train it with SGD and report its test
//! accuracy, either in one process or data-parallel across an environment.
//!
//! Both variants share one training loop. Every epoch draws one global
//! permutation of the training subset from `(seed, epoch)` and cuts it into
//! global batches. In the distributed variant rank `r` takes the positions
//! `r, r + world, ...` of each global batch, computes its gradient, and the
//! ranks average gradients weighted by their slice sizes. The averaged
//! gradient is therefore the full global-batch gradient, and every rank
//! applies the same SGD update.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::comms::Environment;
use crate::curator::{batches, strided, DataSplit, Dataset, Shard};
use crate::descriptor::{compile, fnv1a64, Descriptor, Network};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::softmax_cross_entropy;

/// How many examples of a split to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SubsetRepr", into = "SubsetRepr")]
pub enum Subset {
    All,
    Count(usize),
}

impl Subset {
    pub fn resolve(self, available: usize) -> usize {
        match self {
            Subset::All => available,
            Subset::Count(n) => n.min(available),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SubsetRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<SubsetRepr> for Subset {
    type Error = String;

    fn try_from(r: SubsetRepr) -> Result<Self, String> {
        match r {
            SubsetRepr::Count(0) => Err("subset size must be >= 1".into()),
            SubsetRepr::Count(n) => Ok(Subset::Count(n)),
            SubsetRepr::Word(w) if w == "all" => Ok(Subset::All),
            SubsetRepr::Word(w) => Err(format!("expected a count or \"all\", got \"{w}\"")),
        }
    }
}

impl From<Subset> for SubsetRepr {
    fn from(s: Subset) -> Self {
        match s {
            Subset::All => SubsetRepr::Word("all".into()),
            Subset::Count(n) => SubsetRepr::Count(n),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub epochs: usize,
    /// Global batch size; data-parallel ranks split each batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_subset: Subset,
    pub test_subset: Subset,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            learning_rate: 0.05,
            train_subset: Subset::All,
            test_subset: Subset::All,
            seed: 0,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("eval.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("eval.learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EvalStatus {
    Ok,
    Failed(String),
}

impl EvalStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, EvalStatus::Ok)
    }
}

impl fmt::Display for EvalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalStatus::Ok => f.write_str("ok"),
            EvalStatus::Failed(reason) => write!(f, "failed: {reason}"),
        }
    }
}

impl From<EvalStatus> for String {
    fn from(s: EvalStatus) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for EvalStatus {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == "ok" {
            Ok(EvalStatus::Ok)
        } else if let Some(reason) = s.strip_prefix("failed: ") {
            Ok(EvalStatus::Failed(reason.to_string()))
        } else {
            Err(format!("unknown status `{s}`"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub test_accuracy: f64,
    pub trainable_parameters: usize,
    pub train_seconds: f64,
    pub epochs_run: usize,
    pub status: EvalStatus,
}

impl EvaluationResult {
    /// A penalty result: accuracy exactly zero.
    pub fn failed(reason: impl Into<String>, trainable_parameters: usize) -> Self {
        Self {
            test_accuracy: 0.0,
            trainable_parameters,
            train_seconds: 0.0,
            epochs_run: 0,
            status: EvalStatus::Failed(reason.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status.is_ok()
    }
}

/// Anything that can score a descriptor.
pub trait Evaluator {
    fn evaluate(&mut self, desc: &Descriptor) -> Result<EvaluationResult>;
}

/// Trains in this process only.
pub struct LocalEvaluator<'a, T> {
    pub data: &'a DataSplit<T>,
    pub config: EvaluationConfig,
}

impl<T: Scalar> Evaluator for LocalEvaluator<'_, T> {
    fn evaluate(&mut self, desc: &Descriptor) -> Result<EvaluationResult> {
        Ok(descriptor_evaluate(desc, self.data, &self.config))
    }
}

/// Trains data-parallel over every rank of `env`. All ranks must call
/// `evaluate` with the same descriptor.
pub struct DistributedEvaluator<'a, T> {
    pub data: &'a DataSplit<T>,
    pub config: EvaluationConfig,
    pub env: &'a mut Environment,
}

impl<T: Scalar> Evaluator for DistributedEvaluator<'_, T> {
    fn evaluate(&mut self, desc: &Descriptor) -> Result<EvaluationResult> {
        distributed_descriptor_evaluate(desc, self.data, &self.config, self.env)
    }
}

/// Compiles, trains and tests `desc` in this process. Deterministic in its
/// inputs apart from `train_seconds`. Failures become penalty results.
pub fn descriptor_evaluate<T: Scalar>(
    desc: &Descriptor,
    data: &DataSplit<T>,
    cfg: &EvaluationConfig,
) -> EvaluationResult {
    match run(desc, data, cfg, None) {
        Ok(result) => result,
        Err(e) => EvaluationResult::failed(format!("error: {e}"), 0),
    }
}

/// Data-parallel [`descriptor_evaluate`]. Collective: every rank returns
/// the same result. Ranks that disagree on the descriptor or config get a
/// protocol error before any training happens.
pub fn distributed_descriptor_evaluate<T: Scalar>(
    desc: &Descriptor,
    data: &DataSplit<T>,
    cfg: &EvaluationConfig,
    env: &mut Environment,
) -> Result<EvaluationResult> {
    check_agreement(desc, cfg, env)?;
    match run(desc, data, cfg, Some(env)) {
        Ok(result) => Ok(result),
        Err(e @ (Error::Comm { .. } | Error::Timeout(_) | Error::Closed)) => {
            Ok(EvaluationResult::failed(format!("comm: {e}"), 0))
        }
        Err(e @ Error::Protocol(_)) => Err(e),
        Err(e) => Ok(EvaluationResult::failed(format!("error: {e}"), 0)),
    }
}

fn agreement_hash(desc: &Descriptor, cfg: &EvaluationConfig) -> u64 {
    let mut text = desc.to_json();
    text.push('\n');
    text.push_str(&serde_json::to_string(cfg).expect("config serializes"));
    fnv1a64(text.as_bytes())
}

fn check_agreement(desc: &Descriptor, cfg: &EvaluationConfig, env: &mut Environment) -> Result<()> {
    match env.find_disagreement(agreement_hash(desc, cfg))? {
        Some(rank) => Err(Error::Protocol(format!(
            "rank {rank} disagrees with rank 0 on the descriptor or evaluation config"
        ))),
        None => Ok(()),
    }
}

fn run<T: Scalar>(
    desc: &Descriptor,
    data: &DataSplit<T>,
    cfg: &EvaluationConfig,
    mut env: Option<&mut Environment>,
) -> Result<EvaluationResult> {
    let input_shape = data.train.image_shape();
    let report = desc.validate();
    if !report.is_valid() {
        return Ok(EvaluationResult::failed(
            format!("compile: {}", report.summary()),
            0,
        ));
    }
    let parameters = desc.count_parameters(input_shape).unwrap_or(0);
    let mut net: Network<T> = match compile(desc, input_shape, cfg.seed) {
        Ok(net) => net,
        Err(e) => {
            return Ok(EvaluationResult::failed(
                format!("compile: {e}"),
                parameters,
            ))
        }
    };
    let classes = data.train.classes();
    if net.output_shape() != [classes] {
        return Ok(EvaluationResult::failed(
            format!(
                "compile: network emits {:?} but the data has {classes} classes",
                net.output_shape()
            ),
            parameters,
        ));
    }

    let n_train = cfg.train_subset.resolve(data.train.len());
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let order = Shard::new(n_train, 0, 1)?;
        for global in batches(
            &order,
            cfg.batch_size,
            derive_seed(cfg.seed, &[epoch as u64]),
        ) {
            let loss = train_step(
                &mut net,
                &data.train,
                &global,
                cfg.learning_rate,
                env.as_deref_mut(),
            )?;
            if !loss.is_finite() {
                let mut result = EvaluationResult::failed("diverged", parameters);
                result.train_seconds = started.elapsed().as_secs_f64();
                result.epochs_run = epoch;
                return Ok(result);
            }
        }
    }
    let train_seconds = started.elapsed().as_secs_f64();

    let n_test = cfg.test_subset.resolve(data.test.len());
    let accuracy = test_accuracy(&mut net, &data.test, n_test, env)?;
    Ok(EvaluationResult {
        test_accuracy: accuracy,
        trainable_parameters: parameters,
        train_seconds,
        epochs_run: cfg.epochs,
        status: EvalStatus::Ok,
    })
}

/// One synchronous SGD step on the global batch `global` (indices into
/// `train`). Without an environment the whole batch is used; with one, this
/// rank processes its strided slice and gradients are averaged. Returns the
/// mean loss over the global batch, identical on every rank.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset<T>,
    global: &[usize],
    learning_rate: f64,
    env: Option<&mut Environment>,
) -> Result<f64> {
    let (rank, world) = env.as_ref().map_or((0, 1), |e| (e.rank(), e.world_size()));
    let mine = strided(global, rank, world);
    let weight = mine.len() as f64 * world as f64 / global.len() as f64;
    let mut loss = 0.0;
    if mine.is_empty() {
        net.zero_gradients();
    } else {
        let (images, labels) = train.batch(&mine)?;
        let logits = net.forward(&images)?;
        let (l, mut grad) = softmax_cross_entropy(&logits, &labels)?;
        if weight != 1.0 {
            let w = T::of(weight);
            grad.data_mut().iter_mut().for_each(|g| *g *= w);
        }
        net.backward(&grad)?;
        loss = l.as_f64() * weight;
    }
    if let Some(env) = env {
        if env.world_size() > 1 {
            let mut flat = flatten_gradients(net);
            flat.push(loss);
            let mut mean = env.allreduce_mean(&flat)?;
            loss = mean.pop().expect("loss slot");
            unflatten_gradients(net, &mean)?;
        }
    }
    if loss.is_finite() {
        net.sgd_step(T::of(learning_rate));
    }
    Ok(loss)
}

const TEST_CHUNK: usize = 256;

fn test_accuracy<T: Scalar>(
    net: &mut Network<T>,
    test: &Dataset<T>,
    n_test: usize,
    env: Option<&mut Environment>,
) -> Result<f64> {
    let all: Vec<usize> = (0..n_test).collect();
    let (rank, world) = env.as_ref().map_or((0, 1), |e| (e.rank(), e.world_size()));
    let mine = strided(&all, rank, world);
    let mut correct = 0usize;
    for chunk in mine.chunks(TEST_CHUNK) {
        let (images, labels) = test.batch(chunk)?;
        let predicted = net.predict(&images)?;
        correct += predicted
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    let mut counts = [correct as f64, mine.len() as f64];
    if let Some(env) = env {
        if env.world_size() > 1 {
            let mean = env.allreduce_mean(&counts)?;
            let w = env.world_size() as f64;
            counts = [(mean[0] * w).round(), (mean[1] * w).round()];
        }
    }
    if counts[1] == 0.0 {
        return Err(Error::Input("empty test subset".into()));
    }
    Ok(counts[0] / counts[1])
}

/// Every parameter gradient, as `f64`, in execution order; within a layer
/// weights then biases, row-major.
pub fn flatten_gradients<T: Scalar>(net: &Network<T>) -> Vec<f64> {
    net.gradients_flat()
        .into_iter()
        .map(Scalar::as_f64)
        .collect()
}

/// Inverse of [`flatten_gradients`].
pub fn unflatten_gradients<T: Scalar>(net: &mut Network<T>, flat: &[f64]) -> Result<()> {
    let values: Vec<T> = flat.iter().map(|&v| T::of(v)).collect();
    net.set_gradients_flat(&values)
}
