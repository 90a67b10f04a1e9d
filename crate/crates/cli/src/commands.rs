use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};
use shapnas::analysis::{ablation_sweep, correlation_analysis, pairwise_removal_study, write_sweep_csv, SweepGrid};
use shapnas::protocol::{serve, spawn_evaluator, Backend as ServeBackend, Fault, ServeOptions, SpawnOptions};
use shapnas::search::{resume_from, run_search_with, write_history_csv, Checkpoint, SearchOptions};
use shapnas::shapley::{shapley_exact, shapley_mc, ExactConfig, McConfig};
use shapnas::{
    make_game, EvalCache, GameSpec, InteractionGame, NormScope, ScanDirection, SearchConfig, SearchMode, SearchSpace,
    SearchState, ShapleyEstimate, TruncationPolicy, ValueFunction,
};

use crate::error::CliError;
use crate::{
    Cli, Command, Common, CorrelateCmd, EstimatorArgs, ExportCmd, Mode, Norm, PairwiseCmd, Policy, Scan, SearchArgs,
    SearchCmd, ServeCmd, ShapleyCmd, SweepCmd,
};

type Vf = Box<dyn ValueFunction<f64>>;

/// The value function plus the planted operations when it is a synthetic game.
struct Backend {
    vf: Vf,
    planted: Vec<usize>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let common = &cli.common;
    if common.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::Search(cmd) => search(common, cmd),
        Command::Shapley { estimator } => shapley(common, estimator),
        Command::Sweep(cmd) => sweep(common, cmd),
        Command::Correlate(cmd) => correlate(common, cmd),
        Command::Pairwise(cmd) => pairwise(common, cmd),
        Command::ExportHistory(cmd) => export_history(common, cmd),
        Command::Serve(cmd) => serve_loopback(common, cmd),
    }
}

fn load_space(common: &Common) -> Result<SearchSpace, CliError> {
    Ok(SearchSpace::load(&common.space)?)
}

fn open_backend(common: &Common, space: &SearchSpace) -> Result<Backend, CliError> {
    match &common.evaluator {
        Some(cmd) => {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err(CliError::Usage("--evaluator is empty".into()));
            }
            let options = SpawnOptions {
                timeout: Duration::from_secs(common.eval_timeout),
                ..SpawnOptions::default()
            };
            let handle = spawn_evaluator(&argv, space, options)?;
            Ok(Backend {
                vf: Box::new(handle),
                planted: Vec::new(),
            })
        }
        None => {
            let game: InteractionGame = make_game(space, &GameSpec::load(&common.game)?)?;
            Ok(Backend {
                planted: game.planted.clone(),
                vf: Box::new(game),
            })
        }
    }
}

fn out_dir(common: &Common) -> Result<Option<&Path>, CliError> {
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?;
    }
    Ok(common.out.as_deref())
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Prints the summary and, with `--out`, stores it as `summary.json`.
fn report(out: Option<&Path>, summary: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(summary).expect("summaries serialize");
    if let Some(dir) = out {
        write_out(dir, "summary.json", text.as_bytes())?;
    }
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{text}").map_err(|e| CliError::Output(e.to_string()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint<f64>, CliError> {
    Checkpoint::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::InvalidData => CliError::Validation(format!("{}: {e}", path.display())),
        _ => CliError::Usage(format!("{}: {e}", path.display())),
    })
}

fn apply_estimator(
    cfg_perm: &mut usize,
    trunc: &mut Option<f64>,
    scan: &mut ScanDirection,
    policy: &mut TruncationPolicy,
    args: &EstimatorArgs,
) {
    if let Some(m) = args.permutations {
        *cfg_perm = m;
    }
    if let Some(eta) = args.truncation {
        *trunc = eta.0;
    }
    if let Some(s) = args.scan {
        *scan = match s {
            Scan::FromFull => ScanDirection::FromFull,
            Scan::FromEmpty => ScanDirection::FromEmpty,
        };
    }
    if let Some(p) = args.policy {
        *policy = match p {
            Policy::ZeroFill => TruncationPolicy::ZeroFill,
            Policy::Skip => TruncationPolicy::Skip,
        };
    }
}

fn search_config(common: &Common, args: &SearchArgs) -> Result<SearchConfig, CliError> {
    let mut cfg: SearchConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => SearchConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.workers = common.jobs;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.warmup {
        cfg.warmup_epochs = v;
    }
    apply_estimator(
        &mut cfg.permutations,
        &mut cfg.truncation,
        &mut cfg.scan,
        &mut cfg.policy,
        &args.estimator,
    );
    if let Some(v) = args.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(n) = args.norm {
        cfg.norm_scope = match n {
            Norm::Global => NormScope::Global,
            Norm::PerEdge => NormScope::PerEdge,
        };
    }
    if let Some(m) = args.mode {
        cfg.mode = match m {
            Mode::Full => SearchMode::Full,
            Mode::DiscretizeOnly => SearchMode::DiscretizeOnly,
            Mode::FrozenAlpha => SearchMode::FrozenAlpha,
        };
    }
    if let Some(v) = args.update_every {
        cfg.update_every = v;
    }
    if args.no_cache {
        cfg.use_cache = false;
    }
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

/// Brings a fresh value function to the training state a saved search had
/// reached, replaying the architecture it saw before each step.
fn replay_training(vf: &mut Vf, cfg: &SearchConfig, state: &SearchState) -> Result<(), CliError> {
    let trainable = cfg.mode == SearchMode::DiscretizeOnly;
    let mut alpha = vec![0.0; state.alpha.len()];
    for record in state.history.iter().take(state.epoch) {
        vf.set_architecture(&alpha, trainable)?;
        vf.train(1)?;
        alpha.clone_from(&record.alpha);
    }
    Ok(())
}

fn planted_recovered(space: &SearchSpace, planted: &[usize], genotype: &shapnas::Genotype) -> Option<bool> {
    if planted.is_empty() {
        return None;
    }
    Some(
        genotype
            .chosen
            .iter()
            .all(|c| planted.get(c.edge) == Some(&(space.edge_players(c.edge).start + c.op_index))),
    )
}

fn search(common: &Common, cmd: &SearchCmd) -> Result<(), CliError> {
    let space = load_space(common)?;
    let mut backend = open_backend(common, &space)?;
    let (cfg, resume) = match &cmd.resume {
        Some(path) => {
            let (mut cfg, state) = resume_from(&space, read_checkpoint(path)?)?;
            cfg.workers = common.jobs;
            replay_training(&mut backend.vf, &cfg, &state)?;
            (cfg, Some(state))
        }
        None => (search_config(common, &cmd.search)?, None),
    };
    let out = out_dir(common)?;
    let options = SearchOptions {
        checkpoint: out.map(|d| d.join("checkpoint.json")),
        resume,
    };
    let outcome = run_search_with(&space, backend.vf.as_mut(), &cfg, options)?;

    if let Some(dir) = out {
        write_out(dir, "genotype.json", outcome.genotype.to_json().as_bytes())?;
        let history = csv_bytes(|b| write_history_csv(&space, &outcome.state, b))?;
        write_out(dir, "history.csv", &history)?;
    }
    let evals: u64 = outcome.state.history.iter().map(|r| r.evals_spent).sum::<u64>()
        + outcome.final_estimate.as_ref().map_or(0, |e| e.evals_spent);
    let genotype_doc: Value = serde_json::from_str(&outcome.genotype.to_json()).expect("genotype json");
    report(
        out,
        &json!({
            "genotype": outcome.genotype.to_string(),
            "edges": genotype_doc["edges"],
            "epochs": outcome.state.epoch,
            "evals_spent": evals,
            "warnings": outcome.state.warnings,
            "planted_recovered": planted_recovered(&space, &backend.planted, &outcome.genotype),
        }),
    )
}

fn estimate_csv(space: &SearchSpace, est: &ShapleyEstimate) -> Result<Vec<u8>, CliError> {
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["player", "edge", "from", "to", "op", "phi", "samples"])?;
        let edge_of = space.edge_of_players();
        for (p, phi) in est.phi.iter().enumerate() {
            let e = &space.edges()[edge_of[p]];
            w.write_record([
                p.to_string(),
                edge_of[p].to_string(),
                e.from.to_string(),
                e.to.to_string(),
                space.op_name(p).to_string(),
                phi.map_or_else(String::new, |v| v.to_string()),
                est.samples_per_player[p].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn shapley(common: &Common, cmd: &ShapleyCmd) -> Result<(), CliError> {
    let space = load_space(common)?;
    let mut backend = open_backend(common, &space)?;
    let train_steps = match cmd {
        ShapleyCmd::Exact { train_steps, .. } | ShapleyCmd::Mc { train_steps, .. } => *train_steps,
    };
    backend.vf.train(train_steps)?;
    let cache = EvalCache::new();
    let (method, est) = match cmd {
        ShapleyCmd::Exact { cap, .. } => {
            let cfg = ExactConfig {
                cap: *cap,
                workers: common.jobs,
            };
            ("exact", shapley_exact(backend.vf.as_ref(), Some(&cache), &cfg)?)
        }
        ShapleyCmd::Mc { estimator, .. } => {
            let mut cfg = McConfig {
                seed: common.seed.unwrap_or(0),
                workers: common.jobs,
                ..McConfig::default()
            };
            apply_estimator(
                &mut cfg.permutations,
                &mut cfg.truncation,
                &mut cfg.scan,
                &mut cfg.policy,
                estimator,
            );
            ("mc", shapley_mc(backend.vf.as_ref(), Some(&cache), &cfg)?)
        }
    };
    let out = out_dir(common)?;
    if let Some(dir) = out {
        write_out(dir, "shapley.csv", &estimate_csv(&space, &est)?)?;
    }
    report(
        out,
        &json!({
            "method": method,
            "players": est.players(),
            "phi": est.phi,
            "samples_per_player": est.samples_per_player,
            "evals_spent": est.evals_spent,
            "truncated_fraction": est.truncated_fraction,
            "cache_hits": cache.hits(),
        }),
    )
}

fn sweep(common: &Common, cmd: &SweepCmd) -> Result<(), CliError> {
    if common.evaluator.is_some() {
        return Err(CliError::Usage(
            "sweep runs on the synthetic game only; drop --evaluator".into(),
        ));
    }
    if cmd.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let space = load_space(common)?;
    let spec = GameSpec::load(&common.game)?;
    let base = search_config(common, &cmd.search)?;
    let pick = |grid: &[f64], base: f64| if grid.is_empty() { vec![base] } else { grid.to_vec() };
    let grid = SweepGrid {
        permutations: if cmd.grid_permutations.is_empty() {
            vec![base.permutations]
        } else {
            cmd.grid_permutations.clone()
        },
        truncation: if cmd.grid_truncation.is_empty() {
            vec![base.truncation]
        } else {
            cmd.grid_truncation.iter().map(|e| e.0).collect()
        },
        momentum: pick(&cmd.grid_momentum, base.momentum),
        step_size: pick(&cmd.grid_step_size, base.step_size),
    };
    let seeds: Vec<u64> = (0..cmd.runs).map(|i| base.seed + i).collect();
    let rows = ablation_sweep(&space, &spec, &base, &grid, &seeds, common.jobs)?;
    let out = out_dir(common)?;
    if let Some(dir) = out {
        write_out(dir, "sweep.csv", &csv_bytes(|b| write_sweep_csv(&rows, b))?)?;
    }
    report(out, &json!({ "runs_per_cell": cmd.runs, "rows": rows }))
}

fn correlate(common: &Common, cmd: &CorrelateCmd) -> Result<(), CliError> {
    let space = load_space(common)?;
    let mut backend = open_backend(common, &space)?;
    let alpha = match &cmd.checkpoint {
        Some(path) => {
            let (cfg, state) = resume_from(&space, read_checkpoint(path)?)?;
            replay_training(&mut backend.vf, &cfg, &state)?;
            state.alpha
        }
        None => {
            let cfg = search_config(common, &cmd.search)?;
            run_search_with(&space, backend.vf.as_mut(), &cfg, SearchOptions::default())?
                .state
                .alpha
        }
    };
    let report_data = correlation_analysis(
        &space,
        backend.vf.as_ref(),
        &alpha,
        cmd.samples,
        common.seed.unwrap_or(0),
    )?;
    let out = out_dir(common)?;
    if let Some(dir) = out {
        write_out(dir, "correlation.csv", &csv_bytes(|b| report_data.write_csv(b))?)?;
    }
    report(
        out,
        &json!({
            "kendall_tau": report_data.kendall_tau,
            "sample_count": report_data.sample_count,
        }),
    )
}

fn pairwise(common: &Common, cmd: &PairwiseCmd) -> Result<(), CliError> {
    let [a, b] = cmd.edges[..] else {
        return Err(CliError::Usage(format!(
            "--edges takes two edge indices, got {}",
            cmd.edges.len()
        )));
    };
    let space = load_space(common)?;
    let mut backend = open_backend(common, &space)?;
    backend.vf.train(cmd.train_steps)?;
    let study = pairwise_removal_study(&space, backend.vf.as_ref(), a, b)?;
    let out = out_dir(common)?;
    if let Some(dir) = out {
        write_out(dir, "pairwise.csv", &csv_bytes(|buf| study.write_csv(buf))?)?;
    }
    report(out, &serde_json::to_value(&study).expect("study serializes"))
}

fn export_history(common: &Common, cmd: &ExportCmd) -> Result<(), CliError> {
    let space = load_space(common)?;
    let (_, state) = resume_from(&space, read_checkpoint(&cmd.checkpoint)?)?;
    let table = csv_bytes(|b| write_history_csv(&space, &state, b))?;
    match out_dir(common)? {
        Some(dir) => write_out(dir, "history.csv", &table),
        None => io::stdout()
            .lock()
            .write_all(&table)
            .map_err(|e| CliError::Output(e.to_string())),
    }
}

fn serve_loopback(common: &Common, cmd: &ServeCmd) -> Result<(), CliError> {
    let backend = if cmd.echo {
        ServeBackend::Echo
    } else {
        ServeBackend::Game(GameSpec::load(&common.game)?)
    };
    let options = ServeOptions {
        window: cmd.window,
        fault: cmd
            .fault
            .as_deref()
            .map(str::parse::<Fault>)
            .transpose()
            .map_err(CliError::Usage)?,
    };
    serve(
        &backend,
        io::stdin().lock(),
        io::BufWriter::new(io::stdout().lock()),
        &options,
    )
    .map_err(|e| CliError::Evaluator(e.to_string()))
}
