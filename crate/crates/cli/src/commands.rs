//! The four experiment commands: training runs, the worked variance
//! example, the selection-quality study, and the forward/backward timing
//! benchmark.

use std::path::Path;
use std::time::Instant;

use rand::Rng;

use laber_core::agents::ValueAgent;
use laber_core::diag::{self, DiagRecord, TvStudy};
use laber_core::envs::TabularEnv;
use laber_core::grad::{per_sample_gradients, Activation, LossKind, Network, Target};
use laber_core::seeds::{rng_for, Consumer};

use crate::config::{write_manifest, Resolved};
use crate::{CliError, CliResult};

/// Everything a finished training run leaves behind in memory.
pub struct RunOutput {
    pub records: Vec<DiagRecord>,
    pub agent: ValueAgent,
    pub env: TabularEnv,
}

/// Drive one agent for the configured number of environment steps. One
/// record is logged per gradient step; an episode return rides on the
/// record of the step that finished it.
pub fn run_training(resolved: &Resolved) -> CliResult<RunOutput> {
    let mut env = resolved.env.build()?;
    let mut agent = ValueAgent::new(resolved.agent.clone(), &mut env)?;
    let label = resolved.agent.sampler.label();
    let mut records = Vec::new();
    let progress_every = (resolved.steps / 10).max(1);
    for step in 1..=resolved.steps {
        let summary = agent.step(&mut env)?;
        if let Some(train) = summary.train {
            records.push(DiagRecord {
                step,
                sampler: label.clone(),
                loss: train.loss,
                variance_estimate: None,
                tv_surrogate_optimal: train.tv_surrogate_optimal,
                tv_uniform_optimal: train.tv_uniform_optimal,
                episode_return: summary.finished_return,
            });
        }
        if step % progress_every == 0 {
            log::info!(
                "step {step}/{}: {} episodes, {} gradient steps, epsilon {:.3}",
                resolved.steps,
                agent.episodes(),
                agent.grad_steps(),
                agent.epsilon()
            );
        }
    }
    Ok(RunOutput {
        records,
        agent,
        env,
    })
}

/// Train and write the run artifacts: manifest always, learning curve and
/// checkpoint only when at least one step runs.
pub fn cmd_train(resolved: &Resolved) -> CliResult<()> {
    std::fs::create_dir_all(&resolved.out)?;
    write_manifest(resolved, &resolved.out.join("manifest.toml"))?;
    if resolved.steps == 0 {
        println!(
            "0 steps requested: wrote manifest only to {}",
            resolved.out.display()
        );
        return Ok(());
    }
    let output = run_training(resolved)?;
    diag::write_csv(&output.records, &resolved.out.join("learning_curve.csv"))?;
    if resolved.write_checkpoint {
        output
            .agent
            .checkpoint(&output.env)
            .save(&resolved.out.join("checkpoint.json"))?;
    }
    let returns: Vec<f64> = output
        .records
        .iter()
        .filter_map(|r| r.episode_return)
        .collect();
    let mean_return = if returns.is_empty() {
        f64::NAN
    } else {
        returns.iter().sum::<f64>() / returns.len() as f64
    };
    println!(
        "seed {}: {} steps, {} episodes, mean return {mean_return:.4}; wrote {}",
        resolved.seed,
        resolved.steps,
        output.agent.episodes(),
        resolved.out.display()
    );
    Ok(())
}

/// Exact second moments for the worked two-sample instance.
const VARIANCE_EXPECTED: [(&str, f64); 3] =
    [("uniform", 62.5), ("optimal", 56.25), ("td", 132.8125)];

/// Evaluate the worked example and compare against its exact values.
/// Any deviation beyond 1e-12 is a failure (exit 1).
pub fn cmd_variance_study(out: Option<&Path>) -> CliResult<()> {
    let demo = laber_core::diag::variance_demo()?;
    let computed = [
        ("uniform", demo.uniform),
        ("optimal", demo.optimal),
        ("td", demo.td),
    ];
    println!(
        "gradient norms {:?}, TD errors {:?}",
        demo.grad_norms, demo.td_errors
    );
    println!(
        "{:<10} {:>20} {:>20} {:>6}",
        "sampling", "second_moment", "expected", "check"
    );
    let mut all_pass = true;
    let mut rows = Vec::new();
    for ((label, value), (_, expected)) in computed.iter().zip(VARIANCE_EXPECTED.iter()) {
        let pass = (value - expected).abs() <= 1e-12;
        all_pass &= pass;
        println!(
            "{label:<10} {value:>20} {expected:>20} {:>6}",
            if pass { "PASS" } else { "FAIL" }
        );
        rows.push((label.to_string(), *value, *expected, pass));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("variance_study.csv"))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        w.write_record(["sampling", "second_moment", "expected", "pass"])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        for (label, value, expected, pass) in &rows {
            w.write_record([
                label.clone(),
                value.to_string(),
                expected.to_string(),
                pass.to_string(),
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush()?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Runtime(
            "variance study deviates from the exact values".into(),
        ))
    }
}

/// Run a large-batch agent with dual norm computation and summarize how
/// far surrogate-guided and uniform selection sit from optimal.
pub fn cmd_tv_study(resolved: &Resolved) -> CliResult<TvStudy> {
    if !resolved.agent.sampler.uses_large_batch() {
        return Err(CliError::Usage(format!(
            "tv-study needs a large-batch sampler, got agent.sampler = \"{}\"",
            resolved.agent.sampler.label()
        )));
    }
    let mut resolved = resolved.clone();
    resolved.agent.compute_tv = true;
    std::fs::create_dir_all(&resolved.out)?;
    write_manifest(&resolved, &resolved.out.join("manifest.toml"))?;
    let output = run_training(&resolved)?;
    diag::write_csv(&output.records, &resolved.out.join("learning_curve.csv"))?;
    let study = diag::tv_study(&output.records, resolved.tv_bins)
        .map_err(|e| CliError::Runtime(format!("tv study: {e}")))?;
    let file = std::fs::File::create(resolved.out.join("tv_study.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &study)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "{:<12} {:>6} {:>18} {:>16} {:>12}",
        "window", "n", "surrogate_median", "uniform_median", "p_value"
    );
    for w in &study.windows {
        println!(
            "{:<12} {:>6} {:>18.6} {:>16.6} {:>12.3e}",
            w.label,
            w.surrogate.len(),
            w.surrogate_median,
            w.uniform_median,
            w.p_value
        );
    }
    println!("wrote {}", resolved.out.display());
    Ok(study)
}

/// One benchmark row: timings in microseconds.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub batch_size: usize,
    pub forward_mean_us: f64,
    pub forward_std_us: f64,
    pub backward_mean_us: f64,
    pub backward_std_us: f64,
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Time forward-only against forward+backward passes on an MLP across
/// batch sizes: 2 warmup passes, then `passes` timed passes each.
pub fn cmd_bench(
    hidden: &[usize],
    input_dim: usize,
    actions: usize,
    batch_sizes: &[usize],
    passes: usize,
    out: Option<&Path>,
) -> CliResult<Vec<BenchRow>> {
    if passes < 20 {
        return Err(CliError::Usage(format!(
            "--passes must be at least 20 for a stable estimate, got {passes}"
        )));
    }
    if batch_sizes.is_empty() || input_dim == 0 || actions == 0 {
        return Err(CliError::Usage(
            "bench needs batch sizes and nonzero dims".into(),
        ));
    }
    let mut rng = rng_for(0, Consumer::Init);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(actions);
    let net = Network::mlp(&dims, Activation::Identity, &mut rng)?;
    let mut rows = Vec::new();
    for &b in batch_sizes {
        let inputs: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..input_dim).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let targets: Vec<Target> = (0..b)
            .map(|i| Target::Scalar {
                index: i % actions,
                value: rng.gen::<f64>(),
            })
            .collect();
        // Warm both paths up before timing.
        for _ in 0..2 {
            let cache = net.forward(&inputs)?;
            per_sample_gradients(&net, &cache, &targets, LossKind::L2)?;
        }
        let mut forward_us = Vec::with_capacity(passes);
        let mut backward_us = Vec::with_capacity(passes);
        for _ in 0..passes {
            let t0 = Instant::now();
            let cache = net.forward(&inputs)?;
            forward_us.push(t0.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(&cache);
            let t1 = Instant::now();
            let cache = net.forward(&inputs)?;
            let grads = per_sample_gradients(&net, &cache, &targets, LossKind::L2)?;
            backward_us.push(t1.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(&grads);
        }
        let (fm, fs) = mean_std(&forward_us);
        let (bm, bs) = mean_std(&backward_us);
        rows.push(BenchRow {
            batch_size: b,
            forward_mean_us: fm,
            forward_std_us: fs,
            backward_mean_us: bm,
            backward_std_us: bs,
        });
    }
    println!(
        "{:>10} {:>16} {:>14} {:>18} {:>15}",
        "batch_size", "forward_mean_us", "forward_std_us", "backward_mean_us", "backward_std_us"
    );
    for r in &rows {
        println!(
            "{:>10} {:>16.2} {:>14.2} {:>18.2} {:>15.2}",
            r.batch_size,
            r.forward_mean_us,
            r.forward_std_us,
            r.backward_mean_us,
            r.backward_std_us
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("bench.csv"))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        w.write_record([
            "batch_size",
            "forward_mean_us",
            "forward_std_us",
            "backward_mean_us",
            "backward_std_us",
        ])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        for r in &rows {
            w.write_record([
                r.batch_size.to_string(),
                r.forward_mean_us.to_string(),
                r.forward_std_us.to_string(),
                r.backward_mean_us.to_string(),
                r.backward_std_us.to_string(),
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// Run independent same-config experiments for every seed in the range:
/// each writes to `<base out>/seed-<k>/`. Worker threads split the range.
pub fn cmd_train_sweep(base: &Resolved, seeds: std::ops::Range<u64>) -> CliResult<()> {
    let seed_list: Vec<u64> = seeds.collect();
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(seed_list.len());
    let chunks: Vec<Vec<u64>> = seed_list
        .chunks(seed_list.len().div_ceil(workers))
        .map(|c| c.to_vec())
        .collect();
    let results: Vec<CliResult<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                scope.spawn(move || {
                    for &seed in chunk {
                        let mut resolved = base.clone();
                        resolved.seed = seed;
                        resolved.agent.seed = seed;
                        resolved.out = base.out.join(format!("seed-{seed}"));
                        cmd_train(&resolved)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(())
}
