use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use rand::seq::index;

use mli::data::Dataset;
use mli::geometry::{
    average_gauss_length, logit_trajectories, verify_small_gauss_theorem, write_trajectory_csvs, GaussOptions,
    DEFAULT_FINE_STEPS,
};
use mli::interp::{loss_curve, permute_bn, permute_params, random_permutation, AlphaGrid, InterpOptions, DEFAULT_STEPS};
use mli::io::{csv_bytes, fmt_f64, write_atomic};
use mli::landscape::{
    evaluate_plane, pca_logit_paths, plane_from_three, plane_metadata, project_trajectory, trajectory_csv, write_plane,
    PlaneOptions,
};
use mli::linear2::{
    tabula_rasa_suite, write_instances_csv, Linear2Init,
};
use mli::nn::{forward, BnMode, Checkpoint};
use mli::nqm::{grid_agreement, monte_carlo_mli_rate, simulate, write_trials_csv, NqmConfig, Sampler};
use mli::optim::{train, Snapshot, TrainOptions};
use mli::rng::seeded;
use mli::sweep::{
    correlation_report, load_records, run_sweep, table_nonmonotone_rate, write_correlation_report, ExperimentConfig,
    GroupKey, DEFAULT_MONOTONIC_TOLERANCE,
};

#[derive(Parser)]
#[command(name = "mli", about = "Monotonic linear interpolation experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the first grid cell of an experiment config and save checkpoints.
    Train(TrainArgs),
    /// Loss along the straight line between two checkpoints.
    Interpolate(PairArgs),
    /// Logit trajectories and their average Gauss length.
    Gauss(GaussArgs),
    /// Loss over the plane through three checkpoints.
    Plane(PlaneArgs),
    /// PCA projection of logit trajectories.
    Pca(PcaArgs),
    /// Run every cell of an experiment grid (resumable).
    Sweep(SweepArgs),
    /// Non-monotone proportions per group of sweep records.
    Table(TableArgs),
    /// Scatter data and rank correlations over sweep records.
    Correlate(CorrelateArgs),
    /// Noisy quadratic model Monte Carlo.
    Nqm(NqmArgs),
    /// Two-layer linear networks in the tabula-rasa regime.
    Linear2(Linear2Args),
    /// Random-curve check that small Gauss length implies monotone distance.
    VerifyTheorem(TheoremArgs),
    /// Interpolation after permuting hidden units of one endpoint.
    Permute(PermuteArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Save a parameter snapshot every this many steps.
    #[arg(long, default_value_t = 0)]
    snapshot_every: usize,
}

#[derive(Args)]
struct PairArgs {
    /// Experiment config whose dataset section supplies the data.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long = "final")]
    fin: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    /// Use stored batch-norm statistics instead of re-estimating them per point.
    #[arg(long)]
    no_warmup: bool,
}

#[derive(Args)]
struct GaussArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = 100)]
    sample: usize,
    #[arg(long, default_value_t = DEFAULT_FINE_STEPS)]
    fine_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlaneArgs {
    #[arg(long)]
    config: PathBuf,
    /// Three checkpoints; the first is the origin.
    #[arg(long, num_args = 3, required = true)]
    anchors: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = mli::landscape::DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = mli::landscape::DEFAULT_MARGIN)]
    margin: f64,
    /// Re-estimate batch-norm statistics in every cell.
    #[arg(long)]
    warmup: bool,
    /// Checkpoints projected onto the plane as a trajectory, in order.
    #[arg(long, num_args = 1..)]
    project: Vec<PathBuf>,
}

#[derive(Args)]
struct PcaArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = 10)]
    examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Key {
    Optimizer,
    LearningRate,
    BatchNorm,
    Hidden,
    Activation,
    Dataset,
}

impl From<Key> for GroupKey {
    fn from(k: Key) -> Self {
        match k {
            Key::Optimizer => GroupKey::Optimizer,
            Key::LearningRate => GroupKey::LearningRate,
            Key::BatchNorm => GroupKey::BatchNorm,
            Key::Hidden => GroupKey::Hidden,
            Key::Activation => GroupKey::Activation,
            Key::Dataset => GroupKey::Dataset,
        }
    }
}

#[derive(Args)]
struct TableArgs {
    /// Sweep output directory.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "optimizer,learning_rate,batch_norm")]
    group_by: Vec<Key>,
    /// Defaults to the threshold stored in the records.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MONOTONIC_TOLERANCE)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MONOTONIC_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct NqmArgs {
    #[arg(long, default_value_t = 1000)]
    d: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Defaults to 10·max(1/k)/lr.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the recursion step by step instead of sampling its exact law.
    #[arg(long)]
    iterate: bool,
    #[arg(long)]
    no_noise: bool,
    #[arg(long, default_value_t = mli::nqm::DEFAULT_BINS)]
    bins: usize,
    /// Also compare against a dense grid with this many points.
    #[arg(long)]
    grid_check: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    Aligned,
    RandomBalanced,
    Unbalanced,
}

#[derive(Args)]
struct Linear2Args {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, value_enum, default_value = "aligned")]
    init: InitKind,
    #[arg(long, default_value_t = 1e-3)]
    init_scale: f64,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoremArgs {
    #[arg(long, default_value_t = 1000)]
    curves: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,8,32")]
    d: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    margin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Init,
    Solution,
}

#[derive(Args)]
struct PermuteArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, value_enum, default_value = "solution")]
    side: Side,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` when a verification subcommand's checks fail.
fn run(cmd: Command) -> anyhow::Result<bool> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Gauss(a) => cmd_gauss(a),
        Command::Plane(a) => cmd_plane(a),
        Command::Pca(a) => cmd_pca(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Table(a) => cmd_table(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Nqm(a) => cmd_nqm(a),
        Command::Linear2(a) => cmd_linear2(a),
        Command::VerifyTheorem(a) => cmd_theorem(a),
        Command::Permute(a) => cmd_permute(a),
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))
}

fn load_data(config: &Path) -> anyhow::Result<(Dataset, Option<Dataset>)> {
    Ok(load_config(config)?.dataset.load()?)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_pair(a: &PairArgs) -> anyhow::Result<(Checkpoint, Checkpoint)> {
    let (i, f) = (load_checkpoint(&a.init)?, load_checkpoint(&a.fin)?);
    if i.spec != f.spec {
        bail!("checkpoints describe different architectures");
    }
    Ok((i, f))
}

fn interp_options(no_warmup: bool) -> InterpOptions {
    InterpOptions { bn_warmup: !no_warmup, warmup_rows: None }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<bool> {
    let cfg = load_config(&a.config)?;
    let (train_set, _) = cfg.dataset.load()?;
    let out_dim = train_set.num_classes.unwrap_or_else(|| match &train_set.targets {
        mli::nn::Targets::Dense(t) => t.ncols(),
        mli::nn::Targets::Labels(_) => 1,
    });
    let mut cell = cfg.cells(train_set.dim(), out_dim).remove(0);
    if let Some(s) = a.seed {
        cell.seed = s;
    }
    let opts = TrainOptions::new(cell.training.epochs, cell.training.batch_size, cell.seed).with_snapshots(a.snapshot_every);
    let rec = train(&cell.spec, &train_set, &cell.optimizer, &opts)?;
    let ck = |params: &mli::nn::ParameterVector, bn, history| Checkpoint {
        spec: cell.spec.clone(),
        params: params.clone(),
        bn,
        rng_seed: cell.seed,
        history,
    };
    ck(rec.initial(), mli::nn::BatchNormState::new(&cell.spec), None).save(a.out.join("init.json"))?;
    ck(rec.final_params(), rec.bn.clone(), Some(rec.history.clone())).save(a.out.join("final.json"))?;
    for s in &rec.snapshots[1..rec.snapshots.len() - 1] {
        ck(&s.params, rec.bn.clone(), None).save(a.out.join(format!("snapshot_{:08}.json", s.step)))?;
    }
    if let Some(d) = rec.diverged {
        println!("diverged at step {} (loss {})", d.step, d.loss);
    }
    let last = rec.history.train_loss.last().copied().unwrap_or(f64::NAN);
    println!("trained {} steps in {:.1}s, last epoch loss {last:.6}", rec.steps, rec.wall_clock_secs);
    Ok(true)
}

fn cmd_interpolate(a: PairArgs) -> anyhow::Result<bool> {
    let (train_set, test) = load_data(&a.config)?;
    let (i, f) = load_pair(&a)?;
    let report = loss_curve(
        &f.spec,
        &i.params,
        &f.params,
        &f.bn,
        &train_set,
        test.as_ref(),
        &AlphaGrid::new(a.steps)?,
        &interp_options(a.no_warmup),
    )?
    .with_refs(a.init.display().to_string(), a.fin.display().to_string());
    report.write_csv(a.out.join("interpolation.csv"))?;
    write_json(
        &a.out.join("interpolation.json"),
        &serde_json::json!({
            "min_delta": report.min_delta,
            "barrier_height": report.barrier_height(),
            "distance_abs": report.distance_abs,
            "distance_norm": report.distance_norm,
            "nan_points": report.nan_points,
            "bn_warmed": report.bn_warmed,
            "init": report.init_ref,
            "final": report.final_ref,
        }),
    )?;
    match report.min_delta {
        Some(d) => println!("min_delta = {d:e}"),
        None => println!("interpolation has non-finite points {:?}", report.nan_points),
    }
    Ok(true)
}

fn cmd_gauss(a: GaussArgs) -> anyhow::Result<bool> {
    let (train_set, _) = load_data(&a.pair.config)?;
    let (i, f) = load_pair(&a.pair)?;
    let interp = interp_options(a.pair.no_warmup);
    let opts = GaussOptions {
        sample_size: a.sample.min(train_set.len()),
        fine_steps: a.fine_steps,
        seed: a.seed,
        interp: interp.clone(),
        ..GaussOptions::default()
    };
    let avg = average_gauss_length(&f.spec, &i.params, &f.params, &f.bn, &train_set, &opts)?;
    let ids: Vec<usize> = avg.per_example.iter().map(|p| p.0).collect();
    let x = train_set.inputs.select(Axis(0), &ids);
    let warm = interp.bn_warmup.then_some((&train_set, &interp));
    let trajs = logit_trajectories(&f.spec, &i.params, &f.params, &f.bn, warm, x.view(), Some(&ids), &AlphaGrid::new(a.pair.steps)?)?;
    write_trajectory_csvs(&trajs, a.pair.out.join("trajectories.csv"), a.pair.out.join("trajectory_summary.csv"))?;
    write_json(&a.pair.out.join("gauss.json"), &avg)?;
    println!("average Gauss length {:.6} over {} examples ({} degenerate)", avg.mean, avg.used, avg.degenerate);
    Ok(true)
}

fn cmd_plane(a: PlaneArgs) -> anyhow::Result<bool> {
    let (train_set, _) = load_data(&a.config)?;
    let cks: Vec<Checkpoint> = a.anchors.iter().map(|p| load_checkpoint(p)).collect::<anyhow::Result<_>>()?;
    let plane = plane_from_three(&cks[0].params, &cks[1].params, &cks[2].params)?;
    let opts = PlaneOptions {
        resolution: a.resolution,
        margin: a.margin,
        interp: InterpOptions { bn_warmup: a.warmup, warmup_rows: None },
    };
    // Statistics of the last anchor serve as the template (and the fixed state without warm-up).
    let grid = evaluate_plane(&cks[2].spec, &plane, &cks[2].bn, &train_set, &opts)?;
    let names = [0, 1, 2].map(|k| a.anchors[k].display().to_string());
    write_plane(&a.out, &plane_metadata(&plane, &grid, &opts, names), &grid)?;
    if !a.project.is_empty() {
        let snaps: Vec<Snapshot> = a
            .project
            .iter()
            .enumerate()
            .map(|(step, p)| Ok(Snapshot { step, params: load_checkpoint(p)?.params }))
            .collect::<anyhow::Result<_>>()?;
        write_atomic(&a.out.join("trajectory.csv"), &trajectory_csv(&project_trajectory(&plane, &snaps)?)?)?;
    }
    println!("{}x{} plane written ({} non-finite cells)", a.resolution, a.resolution, grid.nan_cells.len());
    Ok(true)
}

fn cmd_pca(a: PcaArgs) -> anyhow::Result<bool> {
    let (train_set, _) = load_data(&a.pair.config)?;
    let (i, f) = load_pair(&a.pair)?;
    let n = a.examples.min(train_set.len());
    let mut ids = index::sample(&mut seeded(a.seed, 3), train_set.len(), n).into_vec();
    ids.sort_unstable();
    let x = train_set.inputs.select(Axis(0), &ids);
    let interp = interp_options(a.pair.no_warmup);
    let warm = interp.bn_warmup.then_some((&train_set, &interp));
    let trajs = logit_trajectories(&f.spec, &i.params, &f.params, &f.bn, warm, x.view(), Some(&ids), &AlphaGrid::new(a.pair.steps)?)?;
    let (pca, paths) = pca_logit_paths(&trajs)?;
    let rows = trajs.iter().zip(&paths).flat_map(|(t, path)| {
        t.alphas.iter().zip(path).map(|(al, p)| vec![t.example_id.to_string(), fmt_f64(*al), fmt_f64(p.0), fmt_f64(p.1)])
    });
    write_atomic(&a.pair.out.join("pca_paths.csv"), &csv_bytes(&["example_id", "alpha", "pc1", "pc2"], rows)?)?;
    write_json(
        &a.pair.out.join("pca.json"),
        &serde_json::json!({ "explained": pca.explained, "eigenvalues": pca.eigenvalues, "components": pca.components, "mean": pca.mean }),
    )?;
    println!("explained variance {:.4} + {:.4}", pca.explained[0], pca.explained[1]);
    Ok(true)
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<bool> {
    let mut cfg = load_config(&a.config)?;
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    let start = Instant::now();
    let out = run_sweep(&cfg)?;
    let failed = out.records.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} cells ({} run now, {} reused, {} failed) in {:.1}s",
        out.records.len(),
        out.executed,
        out.records.len() - out.executed,
        failed,
        start.elapsed().as_secs_f64()
    );
    Ok(true)
}

fn stored_threshold(records: &[mli::sweep::SweepRecord], arg: Option<f64>) -> anyhow::Result<f64> {
    match (arg, records.first()) {
        (Some(t), _) => Ok(t),
        (None, Some(r)) => Ok(r.loss_threshold),
        (None, None) => bail!("no sweep records found"),
    }
}

fn cmd_table(a: TableArgs) -> anyhow::Result<bool> {
    let records = load_records(&a.records)?;
    let threshold = stored_threshold(&records, a.threshold)?;
    let keys: Vec<GroupKey> = a.group_by.into_iter().map(GroupKey::from).collect();
    let table = table_nonmonotone_rate(&records, &keys, threshold, a.tolerance)?;
    print!("{table}");
    if let Some(out) = a.out {
        write_atomic(&out, &table.csv()?)?;
    }
    Ok(true)
}

fn cmd_correlate(a: CorrelateArgs) -> anyhow::Result<bool> {
    let records = load_records(&a.records)?;
    let threshold = stored_threshold(&records, a.threshold)?;
    let report = correlation_report(&records, threshold, a.tolerance)?;
    write_correlation_report(&a.out, &report)?;
    println!(
        "{} runs; spearman(distance, min_delta) = {:?}; spearman(gauss, min_delta) = {:?}",
        report.used, report.spearman_distance, report.spearman_gauss
    );
    if let Some(fit) = report.powerlaw {
        println!("log-log fit: slope {:.4}, R^2 {:.4}", fit.slope, fit.r_squared);
    }
    Ok(true)
}

fn cmd_nqm(a: NqmArgs) -> anyhow::Result<bool> {
    let mut cfg = NqmConfig::new(a.d, a.lr, a.trials, a.seed);
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if a.iterate {
        cfg.sampler = Sampler::Iterate;
    }
    if a.no_noise {
        cfg.noise = false;
    }
    if !cfg.is_stable() {
        eprintln!("warning: lr {} exceeds 2/max(K); iterates will diverge", cfg.lr);
    }
    let result = monte_carlo_mli_rate(&cfg, a.bins)?;
    write_trials_csv(a.out.join("nqm_trials.csv"), &cfg, &result)?;
    let mut ok = true;
    let mut meta = serde_json::json!({
        "d": cfg.d(), "lr": cfg.lr, "steps": cfg.steps, "trials": cfg.trials, "seed": cfg.seed,
        "sampler": cfg.sampler, "noise": cfg.noise, "rate": result.rate, "diverged": result.diverged,
        "histogram": result.histogram,
    });
    println!("monotone rate {:.4} ({} trials, {} steps, lr {})", result.rate, cfg.trials, cfg.steps, cfg.lr);
    if let Some(points) = a.grid_check {
        let agree = grid_agreement(&cfg, &simulate(&cfg)?, points)?;
        println!(
            "grid check: {} disagreements outside {} boundary trials ({} including them)",
            agree.disagreements, agree.boundary, agree.raw_disagreements
        );
        ok = agree.disagreements == 0;
        meta["grid_check"] = serde_json::to_value(&agree)?;
    }
    write_json(&a.out.join("nqm.json"), &meta)?;
    Ok(ok)
}

fn cmd_linear2(a: Linear2Args) -> anyhow::Result<bool> {
    let init = match a.init {
        InitKind::Aligned => Linear2Init::Aligned { scale: a.init_scale },
        InitKind::RandomBalanced => Linear2Init::RandomBalanced { scale: a.init_scale },
        InitKind::Unbalanced => Linear2Init::Unbalanced { scale: a.init_scale },
    };
    let results = tabula_rasa_suite(a.instances, a.n, init, a.steps, a.seed)?;
    let reports: Vec<_> = results.iter().enumerate().map(|(i, r)| (i, &r.report, r.max_balance_error < 1e-8)).collect();
    write_instances_csv(a.out.join("linear2_instances.csv"), &reports)?;
    let cond = reports.iter().filter(|r| r.1.condition_holds).count();
    let mono = reports.iter().filter(|r| r.1.mli_holds_empirically).count();
    let kron = reports.iter().all(|r| r.1.kron_relative_gap() <= 1e-10);
    println!("{cond}/{} satisfy the eigenvalue condition, {mono} monotone, Kronecker identity ok: {kron}", a.instances);
    Ok(cond == a.instances && mono == a.instances && kron)
}

fn cmd_theorem(a: TheoremArgs) -> anyhow::Result<bool> {
    let mut ok = true;
    let mut out = Vec::new();
    for &d in &a.d {
        let start = Instant::now();
        let r = verify_small_gauss_theorem(a.curves, d, a.margin, a.seed)?;
        println!(
            "d={d}: {}/{} sub-threshold curves monotone ({} drawn), spiral GL {:.3} monotone {} [{:.1}s]",
            r.below_threshold_monotone,
            r.below_threshold,
            r.generated,
            r.spiral.gauss_length,
            r.spiral.is_monotone,
            start.elapsed().as_secs_f64()
        );
        ok &= r.holds();
        out.push(r);
    }
    write_json(&a.out.join("theorem.json"), &out)?;
    Ok(ok)
}

fn cmd_permute(a: PermuteArgs) -> anyhow::Result<bool> {
    let (train_set, _) = load_data(&a.pair.config)?;
    let (i, f) = load_pair(&a.pair)?;
    let spec = &f.spec;
    let grid = AlphaGrid::new(a.pair.steps)?;
    let interp = interp_options(a.pair.no_warmup);
    let base = loss_curve(spec, &i.params, &f.params, &f.bn, &train_set, None, &grid, &interp)?;
    let mut ok = true;
    let mut rows = Vec::new();
    for k in 0..a.count {
        let perm = random_permutation(spec, a.seed.wrapping_add(k as u64));
        // The permuted endpoint, its statistics, and the original it must match.
        let (orig, orig_bn) = match a.side {
            Side::Init => (&i.params, &i.bn),
            Side::Solution => (&f.params, &f.bn),
        };
        let moved = permute_params(spec, orig, &perm)?;
        let moved_bn = permute_bn(orig_bn, &perm);
        let (p0, pt, bn) = match a.side {
            Side::Init => (moved.clone(), f.params.clone(), f.bn.clone()),
            Side::Solution => (i.params.clone(), moved.clone(), moved_bn.clone()),
        };
        let x = train_set.inputs.view();
        let y0 = forward(spec, orig, BnMode::Eval(orig_bn), x)?;
        let y1 = forward(spec, &moved, BnMode::Eval(&moved_bn), x)?;
        let err = (&y0 - &y1).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ok &= err <= 1e-12;
        let r = loss_curve(spec, &p0, &pt, &bn, &train_set, None, &grid, &interp)?;
        println!("permutation {k}: max output change {err:.2e}, min_delta {:?}", r.min_delta);
        rows.push(vec![k.to_string(), fmt_f64(err), r.min_delta.map(fmt_f64).unwrap_or_default()]);
    }
    rows.insert(0, vec!["unpermuted".into(), fmt_f64(0.0), base.min_delta.map(fmt_f64).unwrap_or_default()]);
    write_atomic(&a.pair.out.join("permutations.csv"), &csv_bytes(&["permutation", "max_output_change", "min_delta"], rows)?)?;
    Ok(ok)
}
