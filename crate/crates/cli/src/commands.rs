use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use comln::meter::measure_peak;
use comln::metagrad::{task_metagrads, MetaGradients};
use comln::oracles::{adjoint_instability_demo, bptt_metagrads, finite_diff_metagrads, ComponentErrors, QuadraticSpec};
use comln::solver::SolverConfig;
use comln::tasks::{sample_episode, write_episodes, Episode, TaskGenConfig};
use comln::trainer::{evaluate, meta_train, write_metrics_csv, EpisodeSource, MetaParams, TrainConfig};

use crate::config::{self, ConfigError, RunConfig};
use crate::{BenchMode, ConfigArgs};

/// Step length that maps horizons to step counts.
const STEP: f64 = 0.01;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    CheckFailed(String),
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::CheckFailed(_) | CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::CheckFailed(m) | CliError::Run(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<comln::Error> for CliError {
    fn from(e: comln::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Run(format!("{}: {e}", path.display()))
}

fn load(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig, CliError> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    Ok(config::load(args.config.as_deref(), &overrides)?)
}

pub fn train(args: &ConfigArgs, extra: &[String], out: &Path) -> Result<(), CliError> {
    let mut cfg = load(args, extra)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    if cfg.train.checkpoint_path.is_none() {
        cfg.train.checkpoint_path = Some(out.join("checkpoint.ckpt"));
    }
    let resolved = out.join("config.toml");
    fs::write(&resolved, cfg.to_toml()).map_err(io_err(&resolved))?;

    let source = match &cfg.episodes {
        Some(path) => EpisodeSource::Fixed(
            comln::tasks::load_all(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?,
        ),
        None => EpisodeSource::Synthetic(cfg.tasks.clone()),
    };
    let outcome = meta_train(&cfg.train, &source)?;

    let metrics = out.join("metrics.csv");
    let mut file = io::BufWriter::new(fs::File::create(&metrics).map_err(io_err(&metrics))?);
    write_metrics_csv(&mut file, &outcome.metrics).and_then(|_| file.flush()).map_err(io_err(&metrics))?;

    let meta = &outcome.state.meta;
    println!("iterations: {}", outcome.state.iteration);
    println!("T: {}", meta.t());
    if let Some(last) = outcome.metrics.last() {
        println!("final train-batch accuracy: {:.4}", last.accuracy);
    }
    if cfg.eval.episodes > 0 && cfg.episodes.is_none() {
        let held_out = TaskGenConfig { seed: cfg.tasks.seed.wrapping_add(cfg.eval.seed_offset), ..cfg.tasks.clone() };
        let episodes: Vec<Episode> = (0..cfg.eval.episodes).map(|i| sample_episode(&held_out, i)).collect();
        let (acc, loss) = evaluate(meta, &episodes, &cfg.train.loss(), &cfg.train.solver)?;
        println!("held-out accuracy over {} episodes: {acc:.4} (loss {loss:.4})", episodes.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn grad_check_instance(cfg: &RunConfig, seed: u64) -> (MetaParams, Episode, TrainConfig) {
    let g = &cfg.grad_check;
    let tasks = TaskGenConfig { seed, test_shots: g.test_shots, ..cfg.tasks.clone() };
    let init = TrainConfig {
        seed,
        layers: g.layers.clone(),
        activation: g.activation,
        init_w0_std: g.w0_std,
        init_t: g.horizon,
        ..cfg.train.clone()
    };
    let meta = init.init_params(tasks.way, tasks.input_dim);
    (meta, sample_episode(&tasks, 0), init)
}

fn flip(g: &mut MetaGradients, component: &str) {
    match component {
        "grad_W0" => g.grad_w0 *= -1.0,
        "grad_phi_train" => g.grad_phi_train *= -1.0,
        "grad_phi_test" => g.grad_phi_test *= -1.0,
        "grad_Phi" => g.grad_embedding.scale(-1.0),
        "grad_T" => {
            g.grad_t = -g.grad_t;
            g.grad_log_t = -g.grad_log_t;
        }
        _ => unreachable!("validated component name"),
    }
}

pub fn grad_check(args: &ConfigArgs, seeds: u64, fault: Option<&str>) -> Result<(), CliError> {
    let cfg = load(args, &[])?;
    if let Some(c) = fault {
        if !ComponentErrors::NAMES.contains(&c) {
            return Err(CliError::Usage(format!(
                "unknown component {c:?}; expected one of {}",
                ComponentErrors::NAMES.join(", ")
            )));
        }
    }
    let g = &cfg.grad_check;
    let precise = SolverConfig::precise();
    let euler = SolverConfig::euler(STEP);
    let bptt_t = g.bptt_steps as f64 * STEP;
    println!("seed,component,fd_rel_err,bptt_rel_err,status");
    let mut failures = Vec::new();
    for k in 0..seeds {
        let seed = cfg.train.seed.wrapping_add(k);
        let (mut meta, episode, init) = grad_check_instance(&cfg, seed);
        let loss = init.loss();

        let mut exact = task_metagrads(&meta, &episode, &loss, &precise)?;
        let fd = finite_diff_metagrads(&meta, &episode, &loss, &precise, g.fd_eps)?;
        meta.log_t = bptt_t.ln();
        let mut discrete = task_metagrads(&meta, &episode, &loss, &euler)?;
        let bptt = bptt_metagrads(&meta, &episode, &loss, STEP, g.bptt_steps)?;
        if let Some(c) = fault {
            flip(&mut exact, c);
            flip(&mut discrete, c);
        }
        let fd_err = ComponentErrors::between(&exact, &fd).values();
        let bptt_err = ComponentErrors::between(&discrete, &bptt).values();
        for (i, name) in ComponentErrors::NAMES.iter().enumerate() {
            let ok = fd_err[i] <= g.fd_tolerance && bptt_err[i] <= g.bptt_tolerance;
            println!("{seed},{name},{:.3e},{:.3e},{}", fd_err[i], bptt_err[i], if ok { "PASS" } else { "FAIL" });
            if !ok {
                failures.push(format!("{name} (seed {seed})"));
            }
        }
    }
    if failures.is_empty() {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed: {}", failures.join(", "))))
    }
}

/// Parses `T=0.5,steps=100,...` into `(T, steps)` pairs.
pub fn parse_horizons(list: &str) -> Result<Vec<(f64, u64)>, CliError> {
    let bad = |tok: &str| CliError::Usage(format!("bad horizon {tok:?}; use T=<t> or steps=<k>"));
    list.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|tok| {
            let (key, value) = tok.split_once('=').ok_or_else(|| bad(tok))?;
            match key.trim() {
                "T" | "t" => {
                    let t: f64 = value.trim().parse().map_err(|_| bad(tok))?;
                    if !(t > 0.0 && t.is_finite()) {
                        return Err(bad(tok));
                    }
                    Ok((t, (t / STEP).round() as u64))
                }
                "steps" => {
                    let k: u64 = value.trim().parse().map_err(|_| bad(tok))?;
                    if k == 0 {
                        return Err(bad(tok));
                    }
                    Ok((k as f64 * STEP, k))
                }
                _ => Err(bad(tok)),
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .and_then(|v| if v.is_empty() { Err(CliError::Usage("no horizons given".into())) } else { Ok(v) })
}

struct BenchRow {
    bytes: Option<usize>,
    rhs_evals: Option<u64>,
    status: String,
    wall: f64,
}

fn timed<R>(mode: BenchMode, repeats: u32, mut f: impl FnMut() -> R) -> (R, usize, f64) {
    let runs = if mode == BenchMode::Runtime { repeats.max(1) } else { 1 };
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..runs {
        let start = Instant::now();
        let (r, bytes) = measure_peak(&mut f);
        best = best.min(start.elapsed().as_secs_f64());
        last = Some((r, bytes));
    }
    let (r, bytes) = last.expect("at least one run");
    (r, bytes, best)
}

pub fn bench(
    args: &ConfigArgs,
    mode: BenchMode,
    horizons: &str,
    budget: u64,
    repeats: u32,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load(args, &[])?;
    let horizons = parse_horizons(horizons)?;
    let episode = sample_episode(&cfg.tasks, 0);
    let mut meta = cfg.train.init_params(cfg.tasks.way, cfg.tasks.input_dim);
    let loss = cfg.train.loss();
    let (m, n, d) = (episode.train.len(), cfg.tasks.way, meta.embedding.output_dim());
    let dopri5 = SolverConfig::dopri5(cfg.train.solver.rtol, cfg.train.solver.atol);

    let mut csv = String::from("method,t,steps,bytes,rhs_evals,status,wall_time_s\n");
    for &(t, steps) in &horizons {
        meta.log_t = t.ln();
        let mut rows = Vec::new();
        for (name, solver) in [("comln-euler", SolverConfig::euler(STEP)), ("comln-dopri5", dopri5)] {
            let (r, bytes, wall) = timed(mode, repeats, || task_metagrads(&meta, &episode, &loss, &solver));
            rows.push((name, row(r.map(|g| g.stats.rhs_evals), bytes, wall)));
        }
        let k = steps as usize;
        let predicted = 8 * ((k + 1) * n * d + k * m * n) as u64;
        let bptt = if predicted > budget {
            BenchRow { bytes: None, rhs_evals: None, status: format!("over-budget({predicted}B)"), wall: 0.0 }
        } else {
            let (r, bytes, wall) = timed(mode, repeats, || bptt_metagrads(&meta, &episode, &loss, STEP, k));
            row(r.map(|_| steps), bytes, wall)
        };
        rows.push(("bptt", bptt));
        for (name, r) in rows {
            let opt = |v: Option<String>| v.unwrap_or_default();
            writeln!(
                csv,
                "{name},{t},{steps},{},{},{},{:.6}",
                opt(r.bytes.map(|b| b.to_string())),
                opt(r.rhs_evals.map(|e| e.to_string())),
                r.status,
                r.wall
            )
            .expect("writing to a string");
        }
    }
    match out {
        Some(path) => fs::write(path, &csv).map_err(io_err(path))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn row(result: Result<u64, comln::Error>, bytes: usize, wall: f64) -> BenchRow {
    match result {
        Ok(evals) => BenchRow { bytes: Some(bytes), rhs_evals: Some(evals), status: "ok".into(), wall },
        // Commas would break the CSV.
        Err(e) => BenchRow { bytes: None, rhs_evals: None, status: format!("error({})", e.to_string().replace(',', ";")), wall },
    }
}

pub fn adjoint_demo(eigs: &[f64], t: f64, rtol: f64, out: &Path) -> Result<(), CliError> {
    let spec = QuadraticSpec { eigenvalues: eigs.to_vec(), w0: vec![1.0; eigs.len()], t };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = adjoint_instability_demo(&spec, &SolverConfig::dopri5(rtol, rtol * 1e-2))?;
    println!("forward error: {:.3e}", report.forward_err);
    println!("backward reconstruction error: {:.3e}", report.backward_err);
    println!("ratio: {:.3e}", report.ratio);
    fs::write(out, report.csv()).map_err(io_err(out))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn gen_tasks(args: &ConfigArgs, extra: &[String], out: &Path) -> Result<(), CliError> {
    let cfg = load(args, extra)?;
    let episodes: Vec<Episode> = (0..cfg.gen.count).map(|i| sample_episode(&cfg.tasks, i)).collect();
    write_episodes(out, &episodes).map_err(|e| CliError::Run(format!("{}: {e}", out.display())))?;
    let t = &cfg.tasks;
    println!(
        "wrote {} episodes to {}: way {} shot {} test_shots {} dim {}",
        episodes.len(),
        out.display(),
        t.way,
        t.shot,
        t.test_shots,
        t.input_dim
    );
    Ok(())
}
