//! The three execution modes and the master/worker task protocol.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    decode, evolution_rng, evolve_generation, init_population, score, Chromosome, Individual,
};
use crate::comms::wire::MsgType;
use crate::comms::Environment;
use crate::config::{ExperimentConfig, Mode};
use crate::curator::{DataConfig, DataSplit};
use crate::descriptor::{fnv1a64, Descriptor, DescriptorDocument};
use crate::error::{Error, Result};
use crate::evaluator::{
    descriptor_evaluate, distributed_descriptor_evaluate, EvaluationConfig, EvaluationResult,
};
use crate::runlog::{unix_now, RunHeader, RunLog};
use crate::scalar::Scalar;

/// Runs the generational loop, scoring each generation's new chromosomes
/// with `evaluate(generation, chromosomes)`. Generation 0 is the initial
/// population.
pub fn run_search<F>(
    cfg: &ExperimentConfig,
    mode: Mode,
    world_size: usize,
    mut evaluate: F,
) -> Result<RunLog>
where
    F: FnMut(usize, &[Chromosome]) -> Result<Vec<EvaluationResult>>,
{
    cfg.ga.validate()?;
    let mut log = RunLog::new(RunHeader {
        config: cfg.clone(),
        mode,
        world_size,
        start_timestamp: unix_now(),
    });
    let mut rng = evolution_rng(&cfg.ga);
    let started = Instant::now();
    let initial: Vec<Chromosome> = init_population(&cfg.ga)
        .iter()
        .map(|i| i.chromosome)
        .collect();
    let mut population: Vec<Individual> = score(&initial, &mut |c: &[Chromosome]| evaluate(0, c))?;
    log.push_generation(0, &population, started.elapsed().as_secs_f64());
    for generation in 1..cfg.ga.generations {
        let started = Instant::now();
        population = evolve_generation(
            &population,
            |c: &[Chromosome]| evaluate(generation, c),
            &cfg.ga,
            &mut rng,
        )?;
        log.push_generation(generation, &population, started.elapsed().as_secs_f64());
    }
    Ok(log)
}

/// Serial search: every network is trained in this process.
pub fn run_mode_local<T: Scalar>(cfg: &ExperimentConfig, data: &DataSplit<T>) -> Result<RunLog> {
    let (shape, classes) = (data.train.image_shape(), data.train.classes());
    run_search(cfg, Mode::Local, 1, |_, chromosomes| {
        Ok(chromosomes
            .iter()
            .map(|c| descriptor_evaluate(&decode(c, shape, classes), data, &cfg.eval))
            .collect())
    })
}

/// Every rank runs the same search and trains each network data-parallel.
/// Collective; each generation first checks that all ranks hold the same
/// chromosomes.
pub fn run_mode_distributed_evaluation<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &DataSplit<T>,
    env: &mut Environment,
) -> Result<RunLog> {
    let (shape, classes) = (data.train.image_shape(), data.train.classes());
    let world = env.world_size();
    run_search(cfg, Mode::DistEval, world, |generation, chromosomes| {
        let digest = fnv1a64(&serde_json::to_vec(chromosomes)?);
        if let Some(rank) = env.find_disagreement(digest)? {
            return Err(Error::Protocol(format!(
                "generation {generation}: rank {rank} holds a different population than rank 0"
            )));
        }
        chromosomes
            .iter()
            .map(|c| {
                let result = distributed_descriptor_evaluate(
                    &decode(c, shape, classes),
                    data,
                    &cfg.eval,
                    env,
                )?;
                if !env.is_open() {
                    return Err(Error::Comm {
                        rank: None,
                        message: format!("environment lost during generation {generation}"),
                    });
                }
                Ok(result)
            })
            .collect()
    })
}

/// Rank 0 runs the search and sends each new network to a worker; workers
/// train locally. Returns the log on rank 0 and `None` on workers, which
/// serve tasks with `data` until rank 0 shuts the environment down.
pub fn run_mode_distributed_population<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &DataSplit<T>,
    env: &mut Environment,
) -> Result<Option<RunLog>> {
    if env.world_size() < 2 {
        return Err(Error::Config(
            "dist-pop needs at least one worker (world size >= 2)".into(),
        ));
    }
    if !env.is_root() {
        serve(env, |_, task| match task {
            Task::Evaluate {
                descriptor, eval, ..
            } => Ok(Some(evaluate_document(&descriptor, data, &eval))),
            Task::JoinRun { .. } => {
                Err(Error::Protocol("join_run sent to a dist-pop worker".into()))
            }
        })?;
        return Ok(None);
    }
    let (shape, classes) = (data.train.image_shape(), data.train.classes());
    let world = env.world_size();
    let result = run_search(cfg, Mode::DistPop, world, |_, chromosomes| {
        let tasks: Vec<Task> = chromosomes
            .iter()
            .enumerate()
            .map(|(i, c)| Task::Evaluate {
                id: i as u64,
                chromosome: *c,
                descriptor: decode(c, shape, classes).to_document(),
                eval: cfg.eval.clone(),
                data: cfg.data.clone(),
            })
            .collect();
        dispatch(env, &tasks)
    });
    env.shutdown();
    result.map(Some)
}

fn evaluate_document<T: Scalar>(
    doc: &DescriptorDocument,
    data: &DataSplit<T>,
    eval: &EvaluationConfig,
) -> EvaluationResult {
    match Descriptor::from_document(doc) {
        Ok(desc) => descriptor_evaluate(&desc, data, eval),
        Err(e) => EvaluationResult::failed(format!("compile: {e}"), 0),
    }
}

/// Work sent from rank 0 to a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    /// Train one network and reply with its result.
    Evaluate {
        id: u64,
        chromosome: Chromosome,
        descriptor: DescriptorDocument,
        eval: EvaluationConfig,
        data: DataConfig,
    },
    /// Take part in a collective dist-eval run. No reply.
    JoinRun { config: ExperimentConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReply {
    /// `None` when the task could not be parsed.
    pub id: Option<u64>,
    pub result: EvaluationResult,
}

/// Sends task `i` to worker `1 + i mod (world - 1)` and blocks until every
/// worker has answered all of its tasks. Results come back in task order.
pub fn dispatch(env: &mut Environment, tasks: &[Task]) -> Result<Vec<EvaluationResult>> {
    if !env.is_root() {
        return Err(Error::Usage("only rank 0 dispatches tasks".into()));
    }
    let workers = env.world_size() - 1;
    if workers == 0 {
        return Err(Error::Usage("no workers to dispatch to".into()));
    }
    let outcome = (|| {
        for (i, task) in tasks.iter().enumerate() {
            env.send(
                1 + i % workers,
                MsgType::Task,
                i as u32,
                serde_json::to_vec(task)?,
            )?;
        }
        let mut results: Vec<Option<EvaluationResult>> = vec![None; tasks.len()];
        for w in 0..workers {
            for i in (w..tasks.len()).step_by(workers) {
                let reply = env.recv(1 + w, None)?;
                if reply.msg_type != MsgType::Result || reply.tag != i as u32 {
                    return Err(Error::Protocol(format!(
                        "worker {} sent {:?}#{} while rank 0 awaited the result of task {i}",
                        1 + w,
                        reply.msg_type,
                        reply.tag
                    )));
                }
                let reply: TaskReply = serde_json::from_slice(&reply.payload).map_err(|e| {
                    Error::Protocol(format!("bad RESULT from worker {}: {e}", 1 + w))
                })?;
                results[i] = Some(reply.result);
            }
        }
        Ok(results
            .into_iter()
            .map(|r| r.expect("every task answered"))
            .collect())
    })();
    if outcome.is_err() {
        env.abort();
    }
    outcome
}

/// Worker loop: answers TASK messages from rank 0 with RESULT messages until
/// SHUTDOWN arrives. Malformed tasks get a failed result and the loop keeps
/// going. `handle` returns `None` for tasks that take no reply. Returns the
/// number of tasks handled.
pub fn serve<F>(env: &mut Environment, mut handle: F) -> Result<usize>
where
    F: FnMut(&mut Environment, Task) -> Result<Option<EvaluationResult>>,
{
    let mut handled = 0;
    loop {
        let msg = env.recv(0, None)?;
        match msg.msg_type {
            MsgType::Shutdown => {
                env.abort();
                return Ok(handled);
            }
            MsgType::Task => {
                handled += 1;
                let reply = match serde_json::from_slice::<Task>(&msg.payload) {
                    Err(e) => Some(TaskReply {
                        id: None,
                        result: EvaluationResult::failed(format!("malformed task: {e}"), 0),
                    }),
                    Ok(task) => {
                        let id = match &task {
                            Task::Evaluate { id, .. } => Some(*id),
                            Task::JoinRun { .. } => None,
                        };
                        match handle(env, task) {
                            Ok(Some(result)) => Some(TaskReply { id, result }),
                            Ok(None) => None,
                            Err(e @ (Error::Comm { .. } | Error::Timeout(_) | Error::Closed)) => {
                                return Err(e)
                            }
                            Err(e) => Some(TaskReply {
                                id,
                                result: EvaluationResult::failed(e.to_string(), 0),
                            }),
                        }
                    }
                };
                if let Some(reply) = reply {
                    env.send(0, MsgType::Result, msg.tag, serde_json::to_vec(&reply)?)?;
                }
            }
            other => {
                return Err(Error::Protocol(format!(
                    "worker expected TASK or SHUTDOWN, got {other:?}"
                )))
            }
        }
    }
}

/// Serves a worker process that knows nothing but its environment: data
/// sets are loaded from the configs carried by tasks and cached.
pub fn serve_experiment(env: &mut Environment) -> Result<usize> {
    let mut cache: Option<(DataConfig, DataSplit<f64>)> = None;
    serve(env, |env, task| {
        let wanted = match &task {
            Task::Evaluate { data, .. } => data.clone(),
            Task::JoinRun { config } => config.data.clone(),
        };
        if cache.as_ref().map(|(c, _)| c) != Some(&wanted) {
            cache = Some((wanted.clone(), wanted.load()?));
        }
        let data = &cache.as_ref().expect("just loaded").1;
        match task {
            Task::Evaluate {
                descriptor, eval, ..
            } => Ok(Some(evaluate_document(&descriptor, data, &eval))),
            Task::JoinRun { config } => {
                run_mode_distributed_evaluation(&config, data, env)?;
                Ok(None)
            }
        }
    })
}

/// Runs `cfg.mode` on an already-formed environment. Rank 0 returns the log;
/// in dist-eval it first invites every worker into the run. Shuts the
/// environment down when done.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &DataSplit<f64>,
    env: &mut Environment,
) -> Result<Option<RunLog>> {
    let result = match cfg.mode {
        Mode::Local => run_mode_local(cfg, data).map(Some),
        Mode::DistEval => {
            if env.is_root() {
                let invite = serde_json::to_vec(&Task::JoinRun {
                    config: cfg.clone(),
                })?;
                for r in 1..env.world_size() {
                    env.send(r, MsgType::Task, 0, invite.clone())?;
                }
            }
            let log = run_mode_distributed_evaluation(cfg, data, env)?;
            Ok(env.is_root().then_some(log))
        }
        Mode::DistPop => run_mode_distributed_population(cfg, data, env),
    };
    if env.is_root() {
        env.shutdown();
    }
    result
}
