//! Command-line front end: mesh generation, training, rollout, evaluation and
//! operator diagnostics.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use thiserror::Error;

use crate::eval::{analytic_series, armse, armse_csv, export_fields, fn_reference, fn_stable_dt, import_fields, rollout, EvalError};
use crate::loss::{Discretization, LossError, ObservationSet};
use crate::mesh::{generate_mesh, load_mesh, save_mesh, DomainRect, MeshError, TriMesh};
use crate::pde::{parse_spec, PdeError, PdeKind, PdeSpec};
use crate::stencil::{exactness_check, order_survey, DegreePolicy, StencilError};
use crate::train::{check_stability, history_csv, sample_observations, Checkpoint, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Stencil(#[from] StencilError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "pignn", version, about = "Physics-informed graph network PDE solver", args_override_self = true)]
pub struct Cli {
    /// Worker threads for stencil construction and metrics (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat `key = value` file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a jittered triangular mesh of a rectangle.
    MeshGen(MeshGenArgs),
    /// Train a model (forward, or inverse when observations are given).
    Train(TrainArgs),
    /// Roll a trained model forward and write one field file per step.
    Rollout(RolloutArgs),
    /// aRMSE curve of exported fields against a closed form or other fields.
    Eval(EvalArgs),
    /// Exactness and convergence-order report for the mesh operators.
    DiffopCheck(DiffopArgs),
    /// Sample point observations of a closed-form solution.
    ObsGen(ObsGenArgs),
    /// Explicit-Euler reference fields for the FitzHugh-Nagumo problem.
    Reference(ReferenceArgs),
}

#[derive(Debug, Args)]
pub struct DomainArgs {
    /// Rectangle `x0,y0,x1,y1`.
    #[arg(long, default_value = "0,0,1,1", value_parser = parse_domain)]
    pub domain: [f64; 4],
    /// Subdivisions per unit length.
    #[arg(long, default_value_t = 24)]
    pub density: usize,
    /// Interior jitter as a fraction of the cell width.
    #[arg(long, default_value_t = 0.2)]
    pub jitter: f64,
    #[arg(long = "mesh-seed", default_value_t = 0)]
    pub mesh_seed: u64,
}

#[derive(Debug, Args)]
pub struct MeshSource {
    /// Mesh file; when absent a mesh is generated from the domain flags.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[command(flatten)]
    pub domain: DomainArgs,
}

impl MeshSource {
    fn resolve(&self) -> Result<TriMesh, CliError> {
        match &self.mesh {
            Some(p) => Ok(load_mesh(p)?),
            None => Ok(generate_mesh(&self.domain.rect(self.domain.mesh_seed))?),
        }
    }
}

impl DomainArgs {
    fn rect(&self, seed: u64) -> DomainRect {
        let [x0, y0, x1, y1] = self.domain;
        DomainRect { x0, y0, x1, y1, density: self.density, jitter: self.jitter, seed }
    }
}

#[derive(Debug, Args)]
pub struct MeshGenArgs {
    #[arg(long, default_value = "0,0,1,1", value_parser = parse_domain)]
    pub domain: [f64; 4],
    #[arg(long, default_value_t = 24)]
    pub density: usize,
    #[arg(long, default_value_t = 0.2)]
    pub jitter: f64,
    #[arg(long, env = "PIGNN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PdeArgs {
    /// heat | burgers | fn | heat_inverse
    #[arg(long)]
    pub pde: PdeKind,
    /// Parameter override `name=value` (repeatable).
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, f64)>,
}

impl PdeArgs {
    fn spec(&self) -> Result<PdeSpec, CliError> {
        Ok(parse_spec(self.pde.key(), &self.params)?)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub pde: PdeArgs,
    #[command(flatten)]
    pub mesh: MeshSource,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Time steps per training rollout.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t0: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "lr-floor")]
    pub lr_floor: Option<f64>,
    #[arg(long = "lr-decay")]
    pub lr_decay: Option<f64>,
    #[arg(long = "lr-interval")]
    pub lr_interval: Option<usize>,
    /// Learning rate of the PDE parameter.
    #[arg(long = "lambda-lr")]
    pub lambda_lr: Option<f64>,
    #[arg(long = "gamma-start")]
    pub gamma_start: Option<f64>,
    #[arg(long = "gamma-end")]
    pub gamma_end: Option<f64>,
    /// Latent and hidden width of every MLP.
    #[arg(long)]
    pub latent: Option<usize>,
    /// Number of message-passing blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long = "no-source-feature")]
    pub no_source_feature: bool,
    #[arg(long = "interp-neighbors")]
    pub interp_neighbors: Option<usize>,
    #[arg(long, env = "PIGNN_SEED")]
    pub seed: Option<u64>,
    /// Observation CSV; switches on the data loss.
    #[arg(long)]
    pub obs: Option<PathBuf>,
    /// Initial value of the unknown coefficient.
    #[arg(long = "k-init")]
    pub k_init: Option<f64>,
    /// Continue from a checkpoint (its mesh and config are reused; --epochs may extend).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Save a checkpoint every N epochs (0: only at the end).
    #[arg(long = "checkpoint-every", default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub steps: usize,
    /// Defaults to the training step size.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Use the last parameters instead of the best-loss ones.
    #[arg(long)]
    pub last: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted fields.
    #[arg(long)]
    pub pred: PathBuf,
    /// Compare against the closed-form solution of this problem.
    #[arg(long, conflicts_with = "truth")]
    pub analytic: Option<PdeKind>,
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, f64)>,
    /// Compare against another field directory.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Last step of the curve (default: all steps).
    #[arg(long = "up-to")]
    pub up_to: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiffopArgs {
    #[command(flatten)]
    pub mesh: MeshSource,
    /// Relative Laplacian exactness threshold.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ObsGenArgs {
    #[command(flatten)]
    pub pde: PdeArgs,
    #[command(flatten)]
    pub mesh: MeshSource,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub dt: f64,
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    #[arg(long, env = "PIGNN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    #[command(flatten)]
    pub pde: PdeArgs,
    #[command(flatten)]
    pub mesh: MeshSource,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub dt: f64,
    /// Explicit sub-steps per output step (default: enough for stability).
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_domain(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err("expected x0,y0,x1,y1".into()),
    }
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected name=value")?;
    Ok((k.trim().to_string(), v.trim().parse().map_err(|e: std::num::ParseFloatError| e.to_string())?))
}

/// Turns a `key = value` file into flags. Blank lines and `#` comments are
/// skipped; `true` makes a bare switch, `false` drops it.
pub fn config_args(text: &str) -> Result<Vec<OsString>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        match v {
            "true" => out.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{k}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Inserts the config-file flags right after the subcommand name so that
/// explicit flags, which come later, take precedence.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let pos = args.iter().position(|a| a == "--config");
    let Some(pos) = pos else { return Ok(args) };
    let Some(path) = args.get(pos + 1).cloned() else { return Ok(args) };
    let path = PathBuf::from(path);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let extra = config_args(&text)?;
    let mut rest: Vec<OsString> = args[..pos].iter().chain(&args[pos + 2..]).cloned().collect();
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|i| i + 2)
        .unwrap_or(rest.len());
    let tail = rest.split_off(sub);
    rest.extend(extra);
    rest.extend(tail);
    Ok(rest)
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("thread pool already configured: {e}");
        }
    }
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::MeshGen(a) => cmd_mesh_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Eval(a) => cmd_eval(a),
        Command::DiffopCheck(a) => cmd_diffop_check(a),
        Command::ObsGen(a) => cmd_obs_gen(a),
        Command::Reference(a) => cmd_reference(a),
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist or is not a file", path.display())))
    }
}

pub fn cmd_mesh_gen(a: &MeshGenArgs) -> Result<(), CliError> {
    let [x0, y0, x1, y1] = a.domain;
    let mesh = generate_mesh(&DomainRect { x0, y0, x1, y1, density: a.density, jitter: a.jitter, seed: a.seed })?;
    ensure_parent(&a.out)?;
    save_mesh(&mesh, &a.out)?;
    info!("wrote {} nodes, {} triangles to {}", mesh.nodes.len(), mesh.triangles.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs, kind: PdeKind) -> TrainConfig {
    let mut c = TrainConfig::for_pde(kind);
    macro_rules! set {
        ($field:ident, $v:expr) => {
            if let Some(v) = $v {
                c.$field = v;
            }
        };
    }
    set!(epochs, a.epochs);
    set!(steps, a.steps);
    set!(dt, a.dt);
    set!(t0, a.t0);
    set!(lr_start, a.lr);
    set!(lr_floor, a.lr_floor);
    set!(lr_decay, a.lr_decay);
    set!(lr_interval, a.lr_interval);
    set!(lambda_lr, a.lambda_lr);
    set!(gamma_start, a.gamma_start);
    set!(gamma_end, a.gamma_end);
    set!(interp_neighbors, a.interp_neighbors);
    set!(seed, a.seed);
    if let Some(w) = a.latent {
        c.model.latent = w;
        c.model.hidden = vec![w; c.model.hidden.len()];
    }
    if let Some(b) = a.blocks {
        c.model.blocks = b;
    }
    c.source_feature = !a.no_source_feature;
    c
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    if let Some(p) = &a.obs {
        require_file(p)?;
    }
    if let Some(p) = &a.resume {
        require_file(p)?;
    }
    fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    let observations = a.obs.as_ref().map(ObservationSet::load).transpose()?;
    let ckpt_path = a.out_dir.join("checkpoint.bin");

    let resumed = a.resume.as_ref().map(|p| Checkpoint::load(p).and_then(|c| c.contents())).transpose()?;
    let (mesh, spec, config) = match &resumed {
        Some(c) => {
            let mut cfg = c.config.clone();
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            (c.mesh.clone(), c.spec.clone(), cfg)
        }
        None => {
            let mut spec = a.pde.spec()?;
            if let Some(k) = a.k_init {
                if spec.lambda().is_none() {
                    return Err(CliError::Usage(format!("--k-init: {} has no trainable parameter", spec.kind())));
                }
                spec.set_lambda(k);
            }
            (a.mesh.resolve()?, spec, train_config(a, a.pde.pde))
        }
    };
    if observations.is_some() && spec.lambda().is_none() {
        warn!("observations given for {}, which has no unknown parameter; fitting the network only", spec.kind());
    }
    if let Some(w) = check_stability(&config, &mesh) {
        warn!("{w}");
    }
    let disc = Discretization::new(&mesh, DegreePolicy::Auto)?;
    let mut trainer = match &resumed {
        Some(c) => {
            let mut t = Trainer::from_checkpoint(c, &disc, observations.as_ref())?;
            t.config.epochs = config.epochs;
            t
        }
        None => Trainer::new(spec, &disc, config, observations.as_ref())?,
    };
    let every = a.checkpoint_every;
    while trainer.epoch < trainer.config.epochs {
        let r = trainer.run_epoch()?;
        if r.epoch % 100 == 0 {
            info!("epoch {} loss {:.4e} (pde {:.4e}, data {:.4e})", r.epoch, r.loss_total, r.loss_pde, r.loss_data);
        }
        if every > 0 && trainer.epoch % every == 0 {
            trainer.to_checkpoint().save(&ckpt_path)?;
        }
    }
    trainer.to_checkpoint().save(&ckpt_path)?;
    let hist = a.out_dir.join("history.csv");
    fs::write(&hist, history_csv(&trainer.history)).map_err(io_err(&hist))?;
    if trainer.history.iter().any(|r| r.lambda.is_some()) {
        let mut s = String::from("epoch,k\n");
        for r in &trainer.history {
            if let Some(k) = r.lambda {
                let _ = writeln!(s, "{},{k:.17e}", r.epoch);
            }
        }
        let p = a.out_dir.join("lambda.csv");
        fs::write(&p, s).map_err(io_err(&p))?;
    }
    if let Some(b) = &trainer.best {
        println!("best epoch {} loss {:.6e}", b.epoch, b.loss);
    }
    if let Some(k) = trainer.lambda() {
        println!("final {} = {k:.6}", trainer.spec.lambda_name().unwrap_or("lambda"));
    }
    Ok(())
}

pub fn cmd_rollout(a: &RolloutArgs) -> Result<(), CliError> {
    require_file(&a.ckpt)?;
    let c = Checkpoint::load(&a.ckpt)?.contents()?;
    let disc = Discretization::new(&c.mesh, DegreePolicy::Auto)?;
    let (model, spec) = if a.last { (c.model.clone(), c.spec.clone()) } else { (c.best_model(), c.best_spec()) };
    let dt = a.dt.unwrap_or(c.config.dt);
    let series = rollout(&model, &spec, &disc, a.steps, dt, c.config.t0)?;
    export_fields(&series, &disc.coords, spec.component_names(), &a.out)?;
    info!("wrote {} fields to {}", series.fields.len(), a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let (pred, coords) = import_fields(&a.pred)?;
    let truth = match (&a.analytic, &a.truth) {
        (Some(kind), None) => {
            let spec = parse_spec(kind.key(), &a.params)?;
            analytic_series(&spec, &coords, pred.steps(), pred.dt, pred.t0)?
        }
        (None, Some(dir)) => import_fields(dir)?.0,
        _ => return Err(CliError::Usage("eval needs exactly one of --analytic or --truth".into())),
    };
    let up_to = a.up_to.unwrap_or(pred.steps());
    let curve = armse(&pred, &truth, up_to)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, armse_csv(&curve)).map_err(io_err(&a.out))?;
    if let Some(last) = curve.last() {
        println!("armse({up_to}) = {last:.6e}");
    }
    Ok(())
}

pub fn cmd_diffop_check(a: &DiffopArgs) -> Result<(), CliError> {
    let mesh = a.mesh.resolve()?;
    let disc = Discretization::new(&mesh, DegreePolicy::Auto)?;
    let ex = exactness_check(&disc.gradient, &disc.laplacian, &disc.coords)?;
    let mut s = String::new();
    let _ = writeln!(s, "nodes {} interior {}", disc.node_count(), disc.interior.len());
    let grad_ok = ex.gradient_max_error < 1e-10;
    let _ = writeln!(s, "gradient affine max error {:.3e} {}", ex.gradient_max_error, verdict(grad_ok));
    let fails = ex.laplacian_failures(a.tol);
    let _ = writeln!(
        s,
        "laplacian quadratic max relative error {:.3e} ({} of {} nodes above {:e}) {}",
        ex.laplacian_max_relative(),
        fails.len(),
        disc.node_count(),
        a.tol,
        verdict(fails.is_empty())
    );
    let interior_fails = fails.iter().filter(|&&i| disc.interior.contains(&i)).count();
    let interior_max = disc.interior.iter().map(|&i| ex.laplacian_relative[i]).fold(0.0, f64::max);
    let _ = writeln!(s, "  interior nodes above threshold: {interior_fails} (interior max {interior_max:.3e})");
    if !disc.laplacian.rank_deficient.is_empty() {
        let _ = writeln!(s, "  rank-deficient nodes: {:?}", disc.laplacian.rank_deficient);
    }
    let graph_nodes: Vec<usize> = disc.interior.to_vec();
    let graph = crate::mesh::build_graph(&mesh)?;
    let u = |x: f64, y: f64| x.sin() * y.cos();
    let lap = |x: f64, y: f64| -2.0 * x.sin() * y.cos();
    let scales = [0.01, 0.005, 0.0025, 0.00125];
    let survey = order_survey(&graph, &disc.coords, &graph_nodes, &u, &lap, &scales, DegreePolicy::Auto)?;
    let mut slopes: Vec<f64> = survey.slopes.iter().flatten().copied().collect();
    slopes.sort_by(f64::total_cmp);
    if !slopes.is_empty() {
        let _ = writeln!(
            s,
            "order slopes over interior nodes: min {:.3} median {:.3} max {:.3} (exact at {} nodes)",
            slopes[0],
            slopes[slopes.len() / 2],
            slopes[slopes.len() - 1],
            survey.slopes.len() - slopes.len()
        );
    }
    let _ = writeln!(s, "eta max/min ratio over scales: worst {:.3}", survey.max_eta_ratio());
    match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, &s).map_err(io_err(p))?;
        }
        None => print!("{s}"),
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn cmd_obs_gen(a: &ObsGenArgs) -> Result<(), CliError> {
    let mut spec = a.pde.spec()?;
    if let PdeSpec::HeatInverse { k, k_boundary } = &mut spec {
        // Observations come from the coefficient the boundary data encodes.
        if !a.pde.params.iter().any(|(n, _)| n == "k") {
            *k = *k_boundary;
        }
    }
    let mesh = a.mesh.resolve()?;
    let disc = Discretization::new(&mesh, DegreePolicy::Auto)?;
    let obs = sample_observations(&spec, &disc, a.count, a.steps, a.dt, a.t0, a.seed)?;
    ensure_parent(&a.out)?;
    obs.save(&a.out, spec.components())?;
    Ok(())
}

pub fn cmd_reference(a: &ReferenceArgs) -> Result<(), CliError> {
    let spec = a.pde.spec()?;
    let mesh = a.mesh.resolve()?;
    let disc = Discretization::new(&mesh, DegreePolicy::Auto)?;
    let substeps = match (a.substeps, fn_stable_dt(&spec, &disc)) {
        (Some(s), _) => s,
        (None, Some(h)) => (a.dt / h).ceil().max(1.0) as usize,
        (None, None) => 1,
    };
    let series = fn_reference(&spec, &disc, a.steps, a.dt, substeps)?;
    export_fields(&series, &disc.coords, spec.component_names(), &a.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_flags() {
        let a = config_args("# c\nepochs = 5\nno_source_feature = true\nobs=\nflag = false\n").unwrap();
        let s: Vec<String> = a.iter().map(|o| o.to_string_lossy().into_owned()).collect();
        assert_eq!(s, ["--epochs", "5", "--no-source-feature", "--obs", ""]);
        assert!(config_args("nonsense").is_err());
    }

    #[test]
    fn param_and_domain_parsers() {
        assert_eq!(parse_param("re=80").unwrap(), ("re".to_string(), 80.0));
        assert!(parse_param("re").is_err());
        assert_eq!(parse_domain("0,0,1,2").unwrap(), [0.0, 0.0, 1.0, 2.0]);
        assert!(parse_domain("0,0,1").is_err());
    }
}
