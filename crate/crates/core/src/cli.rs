//! The `molekit` command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. Each subcommand
//! prints its resolved configuration to stderr before doing any work.
//! Configuration precedence is flags, then the `--config` TOML file, then
//! built-in defaults.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{generate_dataset, GenConfig, TaskOracle};
use crate::mole::{expert_usage, merge_model, MergedModel};
use crate::potential::{EnergyModel, PotentialModel};
use crate::reference::ReferenceScheme;
use crate::scaling::{self, AnsatzOptions, Resample, RunRecord};
use crate::sim::{self, BenchConfig, BenchModel, FireConfig, MdConfig, Physical};
use crate::systems::{read_systems, write_systems, AtomicSystem, ElementTable, SystemHeader, TaskRegistry};
use crate::train::{evaluate, train_stage, write_trace, Stage, TrainConfig, TrainState};

#[derive(Debug, Parser)]
#[command(name = "molekit", version, about = "Mixture-of-linear-experts interatomic potentials on toy oracle data")]
pub struct Cli {
    /// Seed for every random choice; defaults to the config file's seed, else 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap. Accepted for compatibility; all work runs on one thread.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled clusters from a bundled oracle task.
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Energy and force errors per task.
    Eval(EvalArgs),
    /// NVE molecular dynamics with a conservation report.
    Md(MdArgs),
    /// FIRE geometry relaxation.
    Relax(RelaxArgs),
    /// Collapse experts for one system header.
    Merge(MergeArgs),
    /// Inference throughput.
    Bench(BenchArgs),
    /// Iso-FLOP or ansatz scaling fits with bootstrap bands.
    FitScaling(FitScalingArgs),
    /// Mean router coefficients per species.
    Experts(ExpertsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub min_atoms: Option<usize>,
    #[arg(long)]
    pub max_atoms: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Systems files; repeat for several tasks.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Checkpoint to continue from; required for the conservative stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Element table TOML; the bundled table when omitted.
    #[arg(long)]
    pub elements: Option<PathBuf>,
    /// Loss trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Direct,
    Conservative,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Direct => Stage::Direct,
            StageArg::Conservative => Stage::Conservative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Metric {
    EnergyMae,
    ForceMae,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Metric::EnergyMae, Metric::ForceMae])]
    pub metrics: Vec<Metric>,
    /// Use the direct force head instead of −∇E.
    #[arg(long)]
    pub direct: bool,
}

#[derive(Debug, Args)]
pub struct MdArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Systems file; the system at `--index` is simulated.
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Energy trace CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RelaxArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0.05)]
    pub fmax: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_steps: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Relaxed system output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated species, e.g. `1,1,6`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub species: Vec<u8>,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub charge: i32,
    #[arg(long, default_value_t = 0)]
    pub spin: u32,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoints to compare; repeat the flag.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Time the MoLE models unmerged (experts mixed per call).
    #[arg(long)]
    pub no_merge: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMode {
    Powerlaw,
    Ansatz,
}

#[derive(Debug, Args)]
pub struct FitScalingArgs {
    /// CSV with columns N, D, C, loss, tag.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, value_enum, default_value_t = FitMode::Powerlaw)]
    pub mode: FitMode,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    /// FLOPs per parameter per atom; estimated from the records when omitted.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Report output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot-ready `C,N*,loss*` table (powerlaw mode).
    #[arg(long)]
    pub minima: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExpertsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// TSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a),
        Command::Md(a) => md(a, seed),
        Command::Relax(a) => relax(a),
        Command::Merge(a) => merge(a),
        Command::Bench(a) => bench(a, seed),
        Command::FitScaling(a) => fit_scaling(a, seed),
        Command::Experts(a) => experts(a),
    }
}

fn echo<T: Serialize>(command: &str, config: &T) {
    let json = serde_json::to_string(config).unwrap_or_else(|e| format!("<unserializable: {e}>"));
    eprintln!("molekit {command}: config {json}");
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` overlaid with the TOML file at `path`.
pub fn layered_config<T: Serialize + DeserializeOwned>(defaults: &T, path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(serde_json::from_value(serde_json::to_value(defaults)?)?);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut base = toml::Value::try_from(defaults)?;
    merge_toml(&mut base, file);
    base.try_into().with_context(|| format!("invalid configuration in {}", path.display()))
}

/// Seed from the flag, else from the file's `seed` key, else 0.
fn resolve_seed(flag: Option<u64>, file_seed: u64) -> u64 {
    flag.unwrap_or(file_seed)
}

fn read_all(paths: &[PathBuf], registry: &TaskRegistry) -> anyhow::Result<Vec<AtomicSystem>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_systems(p, registry).with_context(|| format!("read_systems {}", p.display()))?);
    }
    Ok(out)
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn pick_system(path: &Path, index: usize, registry: &TaskRegistry) -> anyhow::Result<AtomicSystem> {
    let mut systems = read_all(&[path.to_path_buf()], registry)?;
    if index >= systems.len() {
        bail!("{} holds {} systems; index {index} is out of range", path.display(), systems.len());
    }
    Ok(systems.swap_remove(index))
}

fn gen_data(a: GenDataArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg: GenConfig = layered_config(&GenConfig::default(), a.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.n_systems = n;
    }
    if let Some(n) = a.min_atoms {
        cfg.min_atoms = n;
    }
    if let Some(n) = a.max_atoms {
        cfg.max_atoms = n;
    }
    if let Some(d) = a.density {
        cfg.density = d;
    }
    cfg.seed = resolve_seed(seed, cfg.seed);
    let oracle = TaskOracle::bundled(&a.task).context("gen-data")?;
    echo("gen-data", &serde_json::json!({ "task": a.task, "gen": cfg, "out": a.out }));
    let systems = generate_dataset(&oracle, &cfg).context("generate_dataset")?;
    write_systems(&systems, &a.out).context("write_systems")?;
    println!("wrote {} systems to {}", systems.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let stage = a.stage.map(Stage::from).unwrap_or(Stage::Direct);
    let mut cfg: TrainConfig = layered_config(&TrainConfig::for_stage(stage), a.config.as_deref())?;
    if let Some(s) = a.stage {
        cfg.stage = s.into();
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    cfg.seed = resolve_seed(seed, cfg.seed);
    cfg.validate().context("train config")?;

    let mut state = match &a.init {
        Some(p) => {
            let ck = load_ckpt(p)?;
            let prev = ck.stage;
            let state = ck.into_state()?;
            match (prev, cfg.stage) {
                (Stage::Direct, Stage::Conservative) => state.begin_conservative().context("dropping the force head")?,
                (a, b) if a == b => state,
                (a, b) => bail!("cannot continue a {a} checkpoint in stage {b}"),
            }
        }
        None if cfg.stage == Stage::Conservative => {
            bail!("the conservative stage starts from a direct-stage checkpoint; pass --init")
        }
        None => TrainState::new(PotentialModel::new(cfg.model.clone(), cfg.seed)?, Stage::Direct, cfg.seed),
    };
    // A resumed model keeps its own architecture.
    cfg.model = state.model.config.clone();
    echo("train", &serde_json::json!({ "train": cfg, "data": a.data, "init": a.init, "out": a.out }));

    let systems = read_all(&a.data, &state.model.config.registry())?;
    if state.reference.is_none() {
        let table = match &a.elements {
            Some(p) => ElementTable::from_toml(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => ElementTable::bundled(),
        };
        state.reference = Some(ReferenceScheme::fit(&systems, &table).context("ReferenceScheme::fit")?);
    }
    let scheme = state.reference.clone().expect("set above");
    let mut trace = Vec::new();
    let result = train_stage(&mut state, &systems, &scheme, &cfg, &mut trace);
    if let Some(p) = &a.trace {
        write_trace(&trace, p).context("write_trace")?;
    }
    result.context("train_stage")?;
    Checkpoint::from_state(&state).save(&a.out).context("saving checkpoint")?;
    if let Some(last) = trace.last() {
        println!("step {} loss {:.6} (energy {:.6}, force {:.6})", last.step, last.total, last.energy, last.force);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    if ck.merged.is_some() {
        bail!("eval needs an unmerged checkpoint");
    }
    let scheme = ck.reference.as_ref().ok_or_else(|| anyhow!("checkpoint has no reference scheme"))?;
    echo("eval", &serde_json::json!({ "ckpt": a.ckpt, "data": a.data, "metrics": a.metrics, "direct": a.direct }));
    let systems = read_all(&a.data, &ck.model.config.registry())?;
    let report = evaluate(&ck.model, &systems, scheme, a.direct).context("evaluate")?;
    let mut header = format!("{:<10} {:>8}", "task", "systems");
    for m in &a.metrics {
        header.push_str(match m {
            Metric::EnergyMae => "   energy_mae",
            Metric::ForceMae => "    force_mae",
        });
    }
    println!("{header}");
    for (task, m) in report {
        let mut row = format!("{task:<10} {:>8}", m.n_systems);
        for metric in &a.metrics {
            let v = match metric {
                Metric::EnergyMae => m.energy_mae,
                Metric::ForceMae => m.force_mae,
            };
            row.push_str(&format!(" {v:>12.6}"));
        }
        println!("{row}");
    }
    Ok(())
}

/// The checkpoint as a physical-unit model; merged checkpoints check the
/// system header on every call.
enum Loaded {
    Full(PotentialModel),
    Merged(MergedModel),
}

impl Loaded {
    fn from_ckpt(ck: Checkpoint) -> anyhow::Result<(Self, ReferenceScheme)> {
        let scheme = ck.reference.clone().ok_or_else(|| anyhow!("checkpoint has no reference scheme"))?;
        let model = if ck.merged.is_some() { Loaded::Merged(ck.into_merged()?) } else { Loaded::Full(ck.model) };
        Ok((model, scheme))
    }

    fn as_model(&self) -> &dyn EnergyModel {
        match self {
            Loaded::Full(m) => m,
            Loaded::Merged(m) => m,
        }
    }

    fn registry(&self) -> TaskRegistry {
        match self {
            Loaded::Full(m) => m.config.registry(),
            Loaded::Merged(m) => m.model().config.registry(),
        }
    }
}

fn md(a: MdArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg: MdConfig = layered_config(&MdConfig::default(), a.config.as_deref())?;
    if let Some(dt) = a.dt {
        cfg.dt = dt;
    }
    if let Some(n) = a.steps {
        cfg.n_steps = n;
    }
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }
    cfg.seed = resolve_seed(seed, cfg.seed);
    cfg.validate()?;
    echo("md", &serde_json::json!({ "md": cfg, "ckpt": a.ckpt, "system": a.system, "index": a.index }));
    let (model, scheme) = Loaded::from_ckpt(load_ckpt(&a.ckpt)?)?;
    let system = pick_system(&a.system, a.index, &model.registry())?;
    let phys = Physical { model: model.as_model(), scheme: &scheme };
    let traj = sim::run_nve(&phys, &system, &cfg).context("run_nve")?;
    if let Some(p) = &a.out {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
        for e in &traj.energies {
            w.serialize(e)?;
        }
        w.flush()?;
    }
    let r = &traj.report;
    println!("drift {:.3e} threshold {:.1e} {}", r.drift, r.threshold, if r.pass { "pass" } else { "FAIL" });
    Ok(())
}

fn relax(a: RelaxArgs) -> anyhow::Result<()> {
    let cfg: FireConfig = layered_config(&FireConfig::default(), a.config.as_deref())?;
    echo("relax", &serde_json::json!({ "fire": cfg, "fmax": a.fmax, "max_steps": a.max_steps, "ckpt": a.ckpt, "system": a.system }));
    let (model, scheme) = Loaded::from_ckpt(load_ckpt(&a.ckpt)?)?;
    let system = pick_system(&a.system, a.index, &model.registry())?;
    let phys = Physical { model: model.as_model(), scheme: &scheme };
    let r = sim::relax(&phys, &system, a.max_steps, a.fmax, &cfg).context("relax")?;
    if let Some(p) = &a.out {
        write_systems(std::slice::from_ref(&r.system), p)?;
    }
    let e = r.energies.last().copied().unwrap_or(f64::NAN);
    println!("steps {} energy {:.8} fmax {:.3e} {}", r.steps, e, r.fmax, if r.converged { "converged" } else { "not converged" });
    Ok(())
}

fn merge(a: MergeArgs) -> anyhow::Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    if ck.merged.is_some() {
        bail!("checkpoint is already merged");
    }
    let header = SystemHeader::new(&a.species, a.charge, a.spin, &a.task);
    echo("merge", &serde_json::json!({ "header": header, "ckpt": a.ckpt, "out": a.out }));
    let merged = merge_model(&ck.model, &header).context("merge_model")?;
    println!("alpha {:?}", merged.alpha().alpha());
    Checkpoint::from_merged(&merged, ck.stage, ck.seed, ck.reference.clone()).save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn bench(a: BenchArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg: BenchConfig = layered_config(&BenchConfig::default(), a.config.as_deref())?;
    if let Some(s) = a.sizes {
        cfg.sizes = s;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    cfg.seed = resolve_seed(seed, cfg.seed);
    echo("bench", &serde_json::json!({ "bench": cfg, "ckpt": a.ckpt, "merge": !a.no_merge }));
    let mut loaded = Vec::new();
    for p in &a.ckpt {
        let ck = load_ckpt(p)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        loaded.push((name, ck.model));
    }
    let models: Vec<BenchModel> = loaded
        .iter()
        .map(|(name, m)| BenchModel { name, model: m, merge: m.has_router() && !a.no_merge })
        .collect();
    let table = sim::bench_inference(&models, &cfg).context("bench_inference")?;
    print!("{}", table.to_table());
    Ok(())
}

fn fit_scaling(a: FitScalingArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let seed = seed.unwrap_or(0);
    echo(
        "fit-scaling",
        &serde_json::json!({ "records": a.records, "mode": format!("{:?}", a.mode).to_lowercase(), "bootstrap": a.bootstrap, "kappa": a.kappa, "seed": seed }),
    );
    let records = scaling::read_records(&a.records).context("read_records")?;
    let report = match a.mode {
        FitMode::Powerlaw => powerlaw_report(&records, a.kappa, a.bootstrap, seed, a.minima.as_deref())?,
        FitMode::Ansatz => ansatz_report(&records, a.bootstrap, seed)?,
    };
    match &a.out {
        Some(p) => std::fs::write(p, &report).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{report}"),
    }
    Ok(())
}

fn powerlaw_report(records: &[RunRecord], kappa: Option<f64>, n_boot: usize, seed: u64, minima_out: Option<&Path>) -> anyhow::Result<String> {
    let kappa = kappa.unwrap_or_else(|| scaling::estimate_kappa(records));
    let (groups, laws, reduced) = scaling::powerlaw_pipeline(records, Some(kappa)).context("powerlaw_pipeline")?;
    if let Some(p) = minima_out {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
        w.write_record(["C", "N_star", "loss_star", "points", "status"])?;
        for g in &groups {
            let status = serde_json::to_value(g.status)?;
            w.write_record([g.c.to_string(), g.n_star.to_string(), g.loss_star.to_string(), g.n_points.to_string(), status.as_str().unwrap_or("").to_string()])?;
        }
        w.flush()?;
    }
    let bands = if n_boot > 0 {
        let b = scaling::bootstrap(records, n_boot, seed, Resample::WithinFlopGroups(scaling::FLOP_GROUP_TOLERANCE), |s| {
            let (_, l, r) = scaling::powerlaw_pipeline(s, Some(kappa))?;
            Ok(vec![l.alpha, l.beta, l.a, l.b, r.slope, r.gamma])
        })
        .context("bootstrap")?;
        Some(b)
    } else {
        None
    };
    let band = |i: usize| bands.as_ref().map(|b| (b.p10[i], b.p90[i]));
    let mut out = format!("iso-FLOP groups: {} ({} usable), kappa {kappa:.4}\n", groups.len(), laws.n_points);
    out.push_str(&scaling::format_table(&[
        ("alpha", laws.alpha, band(0)),
        ("beta", laws.beta, band(1)),
        ("A", laws.a, band(2)),
        ("B", laws.b, band(3)),
        ("alpha_hat", reduced.slope, band(4)),
        ("gamma", reduced.gamma, band(5)),
    ]));
    out.push_str(&format!("alpha + beta = {:.4}\n", laws.alpha + laws.beta));
    if let Some(b) = &bands {
        out.push_str(&format!("bootstrap: {} resamples, {} failed\n", b.n_ok + b.n_failed, b.n_failed));
    }
    Ok(out)
}

fn ansatz_report(records: &[RunRecord], n_boot: usize, seed: u64) -> anyhow::Result<String> {
    let opts = AnsatzOptions::default();
    let fit = scaling::fit_ansatz(records, &opts).context("fit_ansatz")?;
    let p = fit.params;
    let coefs = |p: &scaling::Ansatz| {
        let (alpha, beta) = p.mapped_exponents();
        vec![p.e, p.a, p.b, p.alpha_hat, p.beta_hat, alpha, beta, p.gamma()]
    };
    let bands = if n_boot > 0 {
        Some(scaling::bootstrap(records, n_boot, seed, Resample::Pooled, |s| Ok(coefs(&scaling::fit_ansatz(s, &opts)?.params))).context("bootstrap")?)
    } else {
        None
    };
    let band = |i: usize| bands.as_ref().map(|b| (b.p10[i], b.p90[i]));
    let band_neg = |i: usize| bands.as_ref().map(|b| (-b.p90[i], -b.p10[i]));
    let v = coefs(&p);
    let mut out = format!("ansatz fit: objective {:.3e} over {} starts\n", fit.objective, fit.starts);
    out.push_str(&scaling::format_table(&[
        ("E_hat", v[0], band(0)),
        ("A_hat", v[1], band(1)),
        ("B_hat", v[2], band(2)),
        ("alpha_hat", v[3], band(3)),
        ("beta_hat", v[4], band(4)),
        ("alpha", v[5], band(5)),
        ("beta", v[6], band(6)),
        ("gamma", v[7], band(7)),
    ]));
    out.push_str("signed slope convention (L* ~ N*^slope):\n");
    out.push_str(&scaling::format_table(&[("alpha_hat", -v[3], band_neg(3)), ("beta_hat", -v[4], band_neg(4))]));
    if let Some(b) = &bands {
        out.push_str(&format!("bootstrap: {} resamples, {} failed\n", b.n_ok + b.n_failed, b.n_failed));
    }
    Ok(out)
}

fn experts(a: ExpertsArgs) -> anyhow::Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    if ck.merged.is_some() {
        bail!("experts needs an unmerged checkpoint");
    }
    echo("experts", &serde_json::json!({ "ckpt": a.ckpt, "data": a.data }));
    let systems = read_all(&a.data, &ck.model.config.registry())?;
    let usage = expert_usage(&ck.model, &systems).context("expert_usage")?;
    match &a.out {
        Some(p) => usage.write_tsv(p)?,
        None => print!("{}", usage.to_tsv()),
    }
    Ok(())
}
