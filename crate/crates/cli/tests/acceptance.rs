//! End-to-end acceptance checks. Prints one PASS, FAIL or UNVERIFIED line
//! per criterion to stderr (uncaptured), then fails if any criterion failed.
//!
//! Run on its own with `cargo test -p nasf-cli --test acceptance`.

use std::io::Write;
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use nasf::comms::wire::{Envelope, MsgType};
use nasf::comms::{in_process_group, tcp_group, Environment};
use nasf::curator::{
    load_cifar10, DataConfig, DataSplit, CIFAR10_FILE_BYTES, CIFAR10_TEST_FILE, CIFAR10_TRAIN_FILES,
};
use nasf::evaluator::{train_step, EvaluationResult, Subset};
use nasf::rng::seeded;
use nasf::search::{
    decode, dispatch, evolution_rng, evolve_generation, fake_result, init_population,
    run_mode_distributed_evaluation, run_mode_local, run_search, score, serve, Individual, Task,
};
use nasf::tensor::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, relu_backward, relu_forward,
    softmax_cross_entropy,
};
use nasf::{
    compile, Chromosome, EvaluationConfig, ExperimentConfig, GaConfig, LayerState, Mode, Network64,
    RunLog, Tensor64,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_nasf");
const TIMEOUT: Duration = Duration::from_secs(120);

enum Verdict {
    Pass,
    Fail,
    Unverified,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn judge(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail: detail.into(),
    }
}

fn unverified(detail: impl Into<String>) -> Outcome {
    Outcome {
        verdict: Verdict::Unverified,
        detail: detail.into(),
    }
}

/// Runs one criterion, turning panics into failures, and reports it.
fn criterion(name: &str, check: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        judge(false, msg)
    });
    let label = match outcome.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Unverified => "UNVERIFIED",
    };
    // Bypasses the test harness capture so the lines always show.
    let _ = writeln!(
        std::io::stderr(),
        "{label:<10} {name} ({:.1} s): {}",
        started.elapsed().as_secs_f64(),
        outcome.detail
    );
    !matches!(outcome.verdict, Verdict::Fail)
}

#[test]
fn acceptance_criteria() {
    let logs = tempfile::tempdir().unwrap();
    let results = [
        criterion("gradient correctness", gradient_correctness),
        criterion("distributed equivalence", distributed_equivalence),
        criterion("mode equivalence", || mode_equivalence(logs.path())),
        criterion("synchronous bottleneck", synchronous_bottleneck),
        criterion("time ordering", time_ordering),
        criterion("search sanity", search_sanity),
        criterion("elitism monotonicity", || elitism_monotonicity(logs.path())),
        criterion("parameter-count oracle", parameter_count_oracle),
        criterion("wire protocol", wire_protocol),
        criterion("cifar-10 smoke", cifar_smoke),
    ];
    assert!(
        results.iter().all(|&ok| ok),
        "some acceptance criteria failed; see the lines above"
    );
}

// Gradients --------------------------------------------------------------

const EPS: f64 = 1e-5;
const SCALE_FLOOR: f64 = 1e-3;

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn dot(a: &Tensor64, b: &Tensor64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between `analytic` and central differences of
/// `f` around `x`.
fn fd_error(x: &mut Tensor64, analytic: &[f64], mut f: impl FnMut(&Tensor64) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + EPS;
        let plus = f(x);
        x.data_mut()[i] = orig - EPS;
        let minus = f(x);
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * EPS);
        let scale = analytic[i].abs().max(numeric.abs()).max(SCALE_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

/// Input, weight and bias gradients of a parametrised layer under the loss
/// `sum(layer(x) * r)`.
fn layer_error(
    x: &mut Tensor64,
    state: &mut LayerState<f64>,
    r: &Tensor64,
    forward: fn(&Tensor64, &LayerState<f64>) -> nasf::Result<Tensor64>,
    backward: fn(&Tensor64, Option<&Tensor64>, &mut LayerState<f64>) -> nasf::Result<Tensor64>,
) -> f64 {
    let mut analytic = state.clone();
    let grad_in = backward(r, Some(x), &mut analytic).unwrap();
    let st = state.clone();
    let mut worst = fd_error(x, grad_in.data(), |x| dot(&forward(x, &st).unwrap(), r));
    let mut weights = state.weights.clone();
    worst = worst.max(fd_error(
        &mut weights,
        analytic.weight_gradients.data(),
        |w| {
            state.weights = w.clone();
            dot(&forward(x, state).unwrap(), r)
        },
    ));
    state.weights = weights;
    let mut biases = state.biases.clone();
    worst.max(fd_error(&mut biases, analytic.bias_gradients.data(), |b| {
        state.biases = b.clone();
        dot(&forward(x, state).unwrap(), r)
    }))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let cases = 24;
    let mut worst = [0.0f64; 4];
    for seed in 0..cases {
        let mut rng = seeded(10_000 + seed);
        // Convolution: alternate small kernels with kernels wider than the
        // image so both lowerings are exercised.
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let kernel = if seed % 2 == 0 {
            rng.random_range(1..=h.min(w).min(3))
        } else {
            rng.random_range(2 * h.max(w)..=2 * h.max(w) + 4)
        };
        let (n, c, o) = (
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let mut x = random_tensor(&mut rng, &[n, c, h, w]);
        let mut state = LayerState::new(
            random_tensor(&mut rng, &[o, c, kernel, kernel]),
            random_tensor(&mut rng, &[o]),
        )
        .unwrap();
        let r = random_tensor(&mut rng, &[n, o, h, w]);
        worst[0] = worst[0].max(layer_error(
            &mut x,
            &mut state,
            &r,
            conv2d_forward,
            conv2d_backward,
        ));

        let (n, fin, fout) = (
            rng.random_range(1..=4),
            rng.random_range(1..=24),
            rng.random_range(1..=10),
        );
        let mut x = random_tensor(&mut rng, &[n, fin]);
        let mut state = LayerState::new(
            random_tensor(&mut rng, &[fout, fin]),
            random_tensor(&mut rng, &[fout]),
        )
        .unwrap();
        let r = random_tensor(&mut rng, &[n, fout]);
        worst[1] = worst[1].max(layer_error(
            &mut x,
            &mut state,
            &r,
            dense_forward,
            dense_backward,
        ));

        // ReLU inputs stay away from the kink at zero.
        let shape = [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        ];
        let mut x = Tensor64::from_fn(&shape, |_| {
            let v: f64 = rng.random_range(1e-3..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .unwrap();
        let r = random_tensor(&mut rng, &shape);
        let grad = relu_backward(&r, &x).unwrap();
        worst[2] = worst[2].max(fd_error(&mut x, grad.data(), |x| dot(&relu_forward(x), &r)));

        let (n, classes) = (rng.random_range(1..=4), rng.random_range(2..=10));
        let mut logits = Tensor64::from_fn(&[n, classes], |_| rng.random_range(-3.0..3.0)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        worst[3] = worst[3].max(fd_error(&mut logits, grad.data(), |l| {
            softmax_cross_entropy(l, &labels).unwrap().0
        }));
    }
    let elapsed = started.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    judge(
        max < 1e-4 && elapsed < 60.0,
        format!(
            "{cases} cases per layer; max relative error conv {:.1e}, dense {:.1e}, relu {:.1e}, softmax {:.1e} (limit 1e-4)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// Data-parallel training ---------------------------------------------------

fn distributed_equivalence() -> Outcome {
    let started = Instant::now();
    let split: DataSplit<f64> =
        nasf::curator::synthetic_dataset(11, 256, 16, 10, [3, 8, 8]).unwrap();
    let desc = decode(&Chromosome::new([3, 4, 3, 4]).unwrap(), [3, 8, 8], 10);
    let batches: Vec<Vec<usize>> = (0..160)
        .map(|i| (i * 37) % 256)
        .collect::<Vec<_>>()
        .chunks(16)
        .map(<[usize]>::to_vec)
        .collect();
    let mut reference: Network64 = compile(&desc, [3, 8, 8], 5).unwrap();
    for b in &batches {
        train_step(&mut reference, &split.train, b, 0.05, None).unwrap();
    }
    let expected = reference.parameters_flat();
    let mut errors = Vec::new();
    for world in [2usize, 4] {
        let handles: Vec<_> = in_process_group(world, TIMEOUT)
            .unwrap()
            .into_iter()
            .map(|mut env| {
                let (split, desc, batches) = (split.clone(), desc.clone(), batches.clone());
                thread::spawn(move || {
                    let mut net: Network64 = compile(&desc, [3, 8, 8], 5).unwrap();
                    for b in &batches {
                        train_step(&mut net, &split.train, b, 0.05, Some(&mut env)).unwrap();
                    }
                    net.parameters_flat()
                })
            })
            .collect();
        let worst = handles
            .into_iter()
            .map(|h| {
                let got = h.join().unwrap();
                got.iter()
                    .zip(&expected)
                    .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        errors.push((world, worst));
    }
    let elapsed = started.elapsed().as_secs_f64();
    judge(
        errors.iter().all(|&(_, e)| e <= 1e-9) && elapsed < 120.0,
        format!("10 steps of (3,4,3,4); max relative parameter error {errors:?} (limit 1e-9)"),
    )
}

// Search modes -------------------------------------------------------------

fn mode_equivalence(log_dir: &Path) -> Outcome {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.ga.seed = 42;
    cfg.eval = EvaluationConfig {
        epochs: 2,
        batch_size: 32,
        train_subset: Subset::Count(512),
        test_subset: Subset::Count(256),
        ..EvaluationConfig::default()
    };
    let split: DataSplit<f64> = cfg.data.load().unwrap();
    let local = run_mode_local(&cfg, &split).unwrap();
    local.write(&log_dir.join("local.jsonl")).unwrap();
    let local_secs = started.elapsed().as_secs_f64();

    let handles: Vec<_> = in_process_group(2, TIMEOUT)
        .unwrap()
        .into_iter()
        .map(|mut env| {
            let (cfg, split) = (cfg.clone(), split.clone());
            thread::spawn(move || run_mode_distributed_evaluation(&cfg, &split, &mut env).unwrap())
        })
        .collect();
    let dist: Vec<RunLog> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    dist[0].write(&log_dir.join("dist-eval.jsonl")).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    let expected = local.chromosomes_by_generation();
    let same = expected.len() == 10
        && dist
            .iter()
            .all(|d| d.chromosomes_by_generation() == expected);
    judge(
        same && elapsed < 600.0,
        format!(
            "seed 42, 10 generations: chromosome sequences {}; local {local_secs:.0} s, total {elapsed:.0} s (limit 600 s)",
            if same { "identical" } else { "differ" }
        ),
    )
}

fn synchronous_bottleneck() -> Outcome {
    let unit = Duration::from_millis(50);
    let workers = 10;
    let mut cfg = ExperimentConfig::default();
    cfg.ga.generations = 1;
    let handles: Vec<_> = in_process_group(workers + 1, TIMEOUT)
        .unwrap()
        .into_iter()
        .map(|mut env| {
            let cfg = cfg.clone();
            thread::spawn(move || {
                if env.is_root() {
                    let log = run_search(&cfg, Mode::DistPop, workers + 1, |_, cs| {
                        let tasks: Vec<Task> = cs
                            .iter()
                            .enumerate()
                            .map(|(i, c)| Task::Evaluate {
                                id: i as u64,
                                chromosome: *c,
                                descriptor: decode(c, [3, 8, 8], 10).to_document(),
                                eval: EvaluationConfig::default(),
                                data: DataConfig::default(),
                            })
                            .collect();
                        dispatch(&mut env, &tasks)
                    });
                    env.shutdown();
                    Some(log.unwrap())
                } else {
                    serve(&mut env, |_, task| match task {
                        Task::Evaluate { id, chromosome, .. } => {
                            thread::sleep(unit * (id as u32 + 1));
                            Ok(Some(fake_result(&chromosome)))
                        }
                        Task::JoinRun { .. } => Ok(None),
                    })
                    .unwrap();
                    None
                }
            })
        })
        .collect();
    let log = handles
        .into_iter()
        .filter_map(|h| h.join().unwrap())
        .next()
        .unwrap();
    let wall = log.generations[0].wall_seconds;
    let max = (unit * 10).as_secs_f64();
    let sum = (unit * 55).as_secs_f64();
    judge(
        (wall - max).abs() <= 0.2 * max && wall < 0.3 * sum,
        format!("durations 1..10 x {} ms on 10 workers: generation took {wall:.3} s, max {max:.3} s, sum {sum:.3} s", unit.as_millis()),
    )
}

fn free_addr() -> String {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    format!("127.0.0.1:{port}")
}

/// Runs `nasf run` in `mode`, with `workers` worker processes when
/// distributed, and returns the log's total wall time.
fn cli_run(config: &Path, out: &Path, mode: Mode, workers: usize) -> f64 {
    let mut master = Command::new(BIN);
    master
        .args([
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .args(["--mode", mode.as_str()])
        .stderr(Stdio::piped());
    let mut children = Vec::new();
    if mode != Mode::Local {
        let addr = free_addr();
        master.args(["--listen", &addr, "--world", &(workers + 1).to_string()]);
        for _ in 0..workers {
            children.push(
                Command::new(BIN)
                    .args(["worker", "--master", &addr])
                    .stderr(Stdio::piped())
                    .spawn()
                    .unwrap(),
            );
        }
    }
    let status = master.output().unwrap();
    assert!(
        status.status.success(),
        "{mode} run failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    for c in children {
        assert!(
            c.wait_with_output().unwrap().status.success(),
            "{mode} worker failed"
        );
    }
    RunLog::read(out).unwrap().total_wall_seconds()
}

fn time_ordering() -> Outcome {
    let cores = thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 5 {
        return unverified(format!(
            "needs at least 5 cores for a master and 4 worker processes; this machine has {cores}"
        ));
    }
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("desk.toml");
    std::fs::write(
        &config,
        "[ga]\npopulation_size = 10\ngenerations = 5\n[eval]\ntrain_subset = 512\ntest_subset = 256\n",
    )
    .unwrap();
    let local = cli_run(&config, &dir.path().join("local.jsonl"), Mode::Local, 0);
    let pop = cli_run(&config, &dir.path().join("pop.jsonl"), Mode::DistPop, 4);
    let eval = cli_run(&config, &dir.path().join("eval.jsonl"), Mode::DistEval, 4);
    judge(
        eval <= pop && pop < local,
        format!("dist-eval {eval:.1} s, dist-pop {pop:.1} s, local {local:.1} s"),
    )
}

fn search_sanity() -> Outcome {
    let mut evaluate = |cs: &[Chromosome]| -> nasf::Result<Vec<EvaluationResult>> {
        Ok(cs.iter().map(fake_result).collect())
    };
    let mean =
        |p: &[Individual]| p.iter().map(|i| i.fitness.unwrap()).sum::<f64>() / p.len() as f64;
    let mut improved = 0;
    for seed in 0..100 {
        let cfg = GaConfig {
            seed,
            ..GaConfig::default()
        };
        let initial: Vec<Chromosome> = init_population(&cfg).iter().map(|i| i.chromosome).collect();
        let mut pop = score(&initial, &mut evaluate).unwrap();
        let first = mean(&pop);
        let mut rng = evolution_rng(&cfg);
        for _ in 1..cfg.generations {
            pop = evolve_generation(&pop, &mut evaluate, &cfg, &mut rng).unwrap();
        }
        if mean(&pop) > first {
            improved += 1;
        }
    }
    judge(
        improved >= 95,
        format!("mean fitness improved in {improved} of 100 seeds (need 95)"),
    )
}

fn elitism_monotonicity(log_dir: &Path) -> Outcome {
    // Add a short dist-pop run so every mode is represented.
    let config = log_dir.join("tiny.toml");
    std::fs::write(
        &config,
        "[ga]\ngenerations = 4\n[eval]\nepochs = 1\ntrain_subset = 64\ntest_subset = 64\n[data]\nclasses = 4\n",
    )
    .unwrap();
    cli_run(&config, &log_dir.join("dist-pop.jsonl"), Mode::DistPop, 2);
    let mut logs: Vec<PathBuf> = std::fs::read_dir(log_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    logs.sort();
    let out = Command::new(BIN)
        .arg("analyze")
        .args(&logs)
        .arg("--out-dir")
        .arg(log_dir.join("analysis"))
        .output()
        .unwrap();
    let names: Vec<String> = logs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    judge(
        out.status.success() && logs.len() >= 2,
        format!(
            "analyze over {names:?}: {}",
            if out.status.success() {
                "best accuracy never fell".to_string()
            } else {
                String::from_utf8_lossy(&out.stderr).trim().to_string()
            }
        ),
    )
}

fn parameter_count_oracle() -> Outcome {
    let shape = [3, 32, 32];
    let mut rng = seeded(123);
    let mut mismatches = Vec::new();
    for _ in 0..100 {
        let c = Chromosome::random(&mut rng);
        let d = decode(&c, shape, 10);
        let net: Network64 = compile(&d, shape, 0).unwrap();
        let enumerated: usize = net.states().map(|s| s.weights.len() + s.biases.len()).sum();
        if d.count_parameters(shape).unwrap() != enumerated {
            mismatches.push(c.genes());
        }
    }
    let worked = decode(&Chromosome::new([5, 10, 5, 10]).unwrap(), shape, 10)
        .count_parameters(shape)
        .unwrap();
    judge(
        mismatches.is_empty() && worked == 105_680,
        format!("100 random chromosomes, mismatches {mismatches:?}; (5,10,5,10) counts {worked}"),
    )
}

// Wire protocol ------------------------------------------------------------

fn envelope() -> impl Strategy<Value = Envelope> {
    (
        proptest::sample::select(MsgType::ALL.to_vec()),
        any::<u32>(),
        proptest::collection::vec(any::<u8>(), 0..4096),
    )
        .prop_map(|(t, tag, payload)| Envelope::new(t, tag, payload))
}

fn round_trips() -> Result<(), String> {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 256,
        ..ProptestConfig::default()
    });
    runner
        .run(&proptest::collection::vec(envelope(), 1..5), |envs| {
            let mut stream = Vec::new();
            for e in &envs {
                let bytes = e.encode().unwrap();
                prop_assert_eq!(bytes.len(), 9 + e.payload.len());
                let (back, used) = Envelope::decode(&bytes).unwrap();
                prop_assert_eq!(used, bytes.len());
                prop_assert_eq!(&back, e);
                prop_assert!(Envelope::decode(&bytes[..bytes.len() - 1]).is_err());
                e.write_to(&mut stream).unwrap();
            }
            let mut cursor = std::io::Cursor::new(stream);
            for e in &envs {
                prop_assert_eq!(&Envelope::read_from(&mut cursor).unwrap().unwrap(), e);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Runs a fixed sequence of collectives on every rank; returns each rank's
/// observations.
fn conformance(envs: Vec<Environment>) -> Vec<Vec<String>> {
    let handles: Vec<_> = envs
        .into_iter()
        .map(|mut env| {
            thread::spawn(move || {
                let r = env.rank() as f64;
                let mut seen = vec![format!("rank {} of {}", env.rank(), env.world_size())];
                env.barrier().unwrap();
                let b = env
                    .broadcast(&[r + 0.5, f64::from_bits(0x7ff8_0000_0000_0123)], 1)
                    .unwrap();
                seen.push(format!("bcast {} {:x}", b[0], b[1].to_bits()));
                let m = env
                    .allreduce_mean(&[r, 0.1 * r, 1e-17 * (r + 1.0)])
                    .unwrap();
                seen.push(format!(
                    "mean {:?}",
                    m.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                ));
                let g = env
                    .gather_bytes(&vec![env.rank() as u8; 1000 * (env.rank() + 1)], 0)
                    .unwrap();
                seen.push(format!(
                    "gather {:?}",
                    g.iter().map(Vec::len).collect::<Vec<_>>()
                ));
                seen.push(format!(
                    "disagree {:?}",
                    env.find_disagreement(7 + (env.rank() == 2) as u64).unwrap()
                ));
                env.barrier().unwrap();
                env.shutdown();
                seen
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

fn wire_protocol() -> Outcome {
    let started = Instant::now();
    if let Err(e) = round_trips() {
        return judge(false, format!("frame round trip: {e}"));
    }
    let inproc = conformance(in_process_group(3, TIMEOUT).unwrap());
    let tcp = conformance(tcp_group(3, TIMEOUT).unwrap());
    let expected_mean = [0.0f64, 1.0, 2.0].iter().sum::<f64>() / 3.0;
    let means_ok = inproc.iter().all(|r| r[2] == inproc[0][2])
        && inproc[1][1] == format!("bcast 1.5 {:x}", 0x7ff8_0000_0000_0123u64)
        && inproc[0][2].contains(&expected_mean.to_bits().to_string())
        && inproc[0][3] == "gather [1000, 2000, 3000]"
        && inproc[0][4] == "disagree Some(2)";
    let elapsed = started.elapsed().as_secs_f64();
    judge(
        inproc == tcp && means_ok && elapsed < 60.0,
        format!(
            "256 frame round trips; collectives on in-process and TCP {}",
            if inproc == tcp { "identical" } else { "differ" }
        ),
    )
}

// CIFAR-10 -----------------------------------------------------------------

fn cifar_dir() -> PathBuf {
    std::env::var_os("NASF_CIFAR10_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            Path::new(env!("CARGO_MANIFEST_DIR"))
                .ancestors()
                .nth(2)
                .expect("workspace root")
                .join("data/cifar-10-batches-bin")
        })
}

fn cifar_smoke() -> Outcome {
    let dir = cifar_dir();
    if !dir.join(CIFAR10_TEST_FILE).exists() {
        return unverified(format!(
            "no CIFAR-10 binary batches at {} (set NASF_CIFAR10_DIR)",
            dir.display()
        ));
    }
    let sizes_ok = CIFAR10_TRAIN_FILES
        .iter()
        .chain([&CIFAR10_TEST_FILE])
        .all(|f| {
            std::fs::metadata(dir.join(f)).map(|m| m.len()).ok() == Some(CIFAR10_FILE_BYTES as u64)
        });
    let full: DataSplit<f64> = load_cifar10(&dir).unwrap();
    let counts = (full.train.len(), full.test.len());
    let labels_ok = full
        .train
        .labels()
        .iter()
        .chain(full.test.labels())
        .all(|&l| l < 10);
    let split = DataSplit {
        train: full.train.head(2000).unwrap(),
        test: full.test.head(1000).unwrap(),
    };
    let mut cfg = ExperimentConfig::default();
    cfg.ga.generations = 2;
    cfg.eval.epochs = 1;
    let log = run_mode_local(&cfg, &split);
    let ran = log.as_ref().map(|l| l.evaluations.len()).unwrap_or(0);
    judge(
        sizes_ok && counts == (50_000, 10_000) && labels_ok && ran == 20,
        format!("{counts:?} examples, file sizes {sizes_ok}, labels in range {labels_ok}; 10 x 2 search logged {ran} evaluations"),
    )
}
