//! `meshplan`: plan, simulate and inspect pipelined sharding plans.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 infeasible
//! (no plan fits device memory, simulated out-of-memory, or a covering
//! precondition violation).

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use meshplan::cost::CostModel;
use meshplan::inter::{self, InterError, PipelinePlan, PlanOptions};
use meshplan::mesh::{cover, verify_cover, ClusterMesh, MeshError, SubmeshAssignment, SubmeshShape};
use meshplan::orchestrate::{emit_instructions, CrossMeshStrategy, Schedule};
use meshplan::sim::{simulate, Gantt, SimError, SimOptions, SimResult};
use meshplan::Time;

use config::{ClusterSource, RunConfig};

const PLAN_FORMAT: &str = "meshplan.plan";
const SIM_FORMAT: &str = "meshplan.sim";
const GANTT_FORMAT: &str = "meshplan.gantt";
const SWEEP_FORMAT: &str = "meshplan.sweep";
const COVER_FORMAT: &str = "meshplan.cover";
const FORMAT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "meshplan", version, about = "Two-level parallelization planner for dataflow graphs on 2-D device clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan a graph on a cluster and write the plan JSON.
    Plan(PlanArgs),
    /// Simulate a saved plan and compare the makespan with the prediction.
    Simulate(SimulateArgs),
    /// Tile a cluster with a list of submesh shapes.
    Cover(CoverArgs),
    /// Plan once per microbatch count.
    SweepB(PlanArgs),
    /// Print a human-readable summary of a saved plan.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct PlanArgs {
    /// Run configuration file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Graph JSON file.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Synthetic graph, e.g. `mlp:layers=4,batch=16,hidden=64`.
    #[arg(long)]
    builder: Option<String>,
    /// Cluster file (TOML or JSON).
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// Microbatch count.
    #[arg(long)]
    b: Option<u64>,
    /// Comma-separated microbatch counts for sweep-b.
    #[arg(long, value_delimiter = ',')]
    b_list: Option<Vec<u64>>,
    /// Number of clustered layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Allowed FLOP imbalance between layers.
    #[arg(long)]
    delta: Option<f64>,
    /// t_max enumeration granularity, in seconds.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Disable the early stop of the t_max enumeration.
    #[arg(long)]
    no_prune: bool,
    /// Seed for the random builder.
    #[arg(long)]
    seed: Option<u64>,
    /// Threads for stage profiling; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Plan JSON written by `meshplan plan`.
    #[arg(long)]
    plan: PathBuf,
    /// Run configuration file; only its schedule and cluster are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cluster file; must match the one the plan was made for.
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// `gpipe` or `1f1b`.
    #[arg(long)]
    schedule: Option<String>,
    /// Treat inter-stage transfers as free.
    #[arg(long)]
    zero_transfer: bool,
    /// Send every destination device its whole tile instead of using local all-gathers.
    #[arg(long)]
    naive_resharding: bool,
    /// Simulation result JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gantt rows JSON.
    #[arg(long)]
    gantt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CoverArgs {
    /// Host count N.
    #[arg(long)]
    hosts: u32,
    /// Devices per host M.
    #[arg(long)]
    devices_per_host: u32,
    /// Comma-separated shapes, each `nxm`.
    #[arg(long, value_delimiter = ',', required = true)]
    shapes: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    format: String,
    version: u32,
    source: String,
    options: PlanOptions,
    plan: PipelinePlan,
}

#[derive(Serialize, Deserialize)]
struct SweepEntry {
    b: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    t_star: Option<Time>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stages: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct SimDoc<'a> {
    format: &'static str,
    version: u32,
    schedule: Schedule,
    zero_transfer: bool,
    t_star: Time,
    makespan: Time,
    /// `makespan - t_star` in picoseconds.
    difference: i128,
    result: &'a SimResult,
}

#[derive(Serialize)]
struct SweepDoc {
    format: &'static str,
    version: u32,
    source: String,
    entries: Vec<SweepEntry>,
}

#[derive(Serialize)]
struct GanttDoc<'a> {
    format: &'static str,
    version: u32,
    #[serde(flatten)]
    gantt: &'a Gantt,
}

#[derive(Serialize)]
struct CoverDoc {
    format: &'static str,
    version: u32,
    hosts: u32,
    devices_per_host: u32,
    verified: bool,
    pieces: Vec<CoverPiece>,
}

#[derive(Serialize)]
struct CoverPiece {
    #[serde(flatten)]
    assignment: SubmeshAssignment,
    device_ids: Vec<u32>,
}

/// An error that maps to exit code 2.
#[derive(Debug)]
struct Infeasible(String);

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Infeasible {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Infeasible>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::SweepB(a) => cmd_sweep_b(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Cover(a) => cmd_cover(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn run_config(a: &PlanArgs) -> Result<RunConfig> {
    let flags = RunConfig {
        graph: a.graph.clone(),
        builder: a.builder.clone(),
        cluster: a.cluster.clone().map(ClusterSource::Path),
        b: a.b,
        b_list: a.b_list.clone(),
        layers: a.layers,
        delta: a.delta,
        epsilon: a.epsilon,
        schedule: None,
        seed: a.seed,
        workers: a.workers,
        out: a.out.clone(),
    };
    let cfg = flags.or(RunConfig::load(a.config.as_deref())?);
    cfg.validate()?;
    Ok(cfg)
}

fn plan_options(cfg: &RunConfig, a: &PlanArgs) -> PlanOptions {
    let d = PlanOptions::default();
    PlanOptions {
        b: cfg.b.unwrap_or(1),
        layers: cfg.layers,
        delta: cfg.delta.unwrap_or(d.delta),
        epsilon: cfg.epsilon.map(Time::from_secs_f64).unwrap_or(d.epsilon),
        prune: !a.no_prune,
        workers: cfg.workers.unwrap_or(0),
        ..d
    }
}

fn planner_error(e: InterError) -> anyhow::Error {
    match e {
        InterError::Infeasible { .. } => Infeasible(e.to_string()).into(),
        other => other.into(),
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    let graph = cfg.graph()?;
    let cm = CostModel::new(cfg.cluster()?);
    let opts = plan_options(&cfg, &a);
    let plan = inter::plan(&graph, &cm, &opts).map_err(planner_error)?;
    eprint!("{}", report(&plan));
    let doc = PlanDoc { format: PLAN_FORMAT.into(), version: FORMAT_VERSION, source: cfg.source(), options: opts, plan };
    write_json(&doc, cfg.out.as_deref())
}

fn cmd_sweep_b(a: PlanArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    let Some(list) = cfg.b_list.clone() else { bail!("sweep-b needs --b-list or b_list in the config") };
    let graph = cfg.graph()?;
    let cm = CostModel::new(cfg.cluster()?);
    let opts = plan_options(&cfg, &a);
    let mut entries = Vec::new();
    let mut failed = 0;
    for (b, r) in inter::sweep_b(&graph, &cm, &list, &opts) {
        match r {
            Ok(p) => {
                eprintln!("B = {b:>4}  T* = {}  stages = {}", p.t_star, p.stages.len());
                entries.push(SweepEntry { b, t_star: Some(p.t_star), stages: Some(p.stages.len()), error: None });
            }
            Err(e @ InterError::Infeasible { .. }) => {
                eprintln!("B = {b:>4}  infeasible: {e}");
                failed += 1;
                entries.push(SweepEntry { b, t_star: None, stages: None, error: Some(e.to_string()) });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let doc = SweepDoc { format: SWEEP_FORMAT, version: FORMAT_VERSION, source: cfg.source(), entries };
    write_json(&doc, cfg.out.as_deref())?;
    if failed > 0 {
        return Err(Infeasible(format!("{failed} of {} microbatch counts have no feasible plan", list.len())).into());
    }
    Ok(())
}

fn load_plan(path: &Path) -> Result<PlanDoc> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: PlanDoc = serde_json::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))?;
    if doc.format != PLAN_FORMAT || doc.version != FORMAT_VERSION {
        bail!("{} is not a version {FORMAT_VERSION} {PLAN_FORMAT} document", path.display());
    }
    Ok(doc)
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let doc = load_plan(&a.plan)?;
    let cfg = RunConfig::load(a.config.as_deref())?;
    let schedule = RunConfig { schedule: a.schedule.clone().or(cfg.schedule.clone()), ..Default::default() }.schedule()?;
    let cluster_src = a.cluster.clone().map(ClusterSource::Path).or(cfg.cluster.clone());
    if cluster_src.is_some() {
        let given = RunConfig { cluster: cluster_src, ..Default::default() }.cluster()?;
        if given != doc.plan.cluster {
            bail!("the given cluster does not match the cluster the plan was made for");
        }
    }
    let cm = CostModel::new(doc.plan.cluster.clone());
    let strategy = if a.naive_resharding { CrossMeshStrategy::Naive } else { CrossMeshStrategy::LocalAllGather };
    let skeleton = doc.plan.skeleton(&cm, strategy).context("building the cross-mesh plans")?;
    let program = emit_instructions(&skeleton, schedule);
    let result = simulate(&program, SimOptions { zero_transfer: a.zero_transfer }).map_err(|e| match e {
        SimError::OutOfMemory { .. } => Infeasible(e.to_string()).into(),
        other => anyhow::Error::from(other),
    })?;
    let t_star = doc.plan.t_star;
    let difference = result.makespan.ticks() as i128 - t_star.ticks() as i128;
    eprintln!("schedule      {schedule}");
    eprintln!("T* (planned)  {t_star}");
    eprintln!("makespan      {}", result.makespan);
    let sign = if difference < 0 { '-' } else { '+' };
    eprintln!("difference    {sign}{}", Time::from_ticks(difference.unsigned_abs() as u64));
    if let Some(g) = &a.gantt {
        let gantt: Gantt = result.gantt(&program);
        write_json(&GanttDoc { format: GANTT_FORMAT, version: FORMAT_VERSION, gantt: &gantt }, Some(g))?;
    }
    let sim = SimDoc {
        format: SIM_FORMAT,
        version: FORMAT_VERSION,
        schedule,
        zero_transfer: a.zero_transfer,
        t_star,
        makespan: result.makespan,
        difference,
        result: &result,
    };
    write_json(&sim, a.out.as_deref())
}

fn parse_shape(s: &str) -> Result<SubmeshShape> {
    let (n, m) = s.trim().split_once(['x', 'X']).with_context(|| format!("shape {s:?} is not of the form nxm"))?;
    Ok(SubmeshShape { n: n.trim().parse().with_context(|| format!("bad shape {s:?}"))?, m: m.trim().parse().with_context(|| format!("bad shape {s:?}"))? })
}

fn cmd_cover(a: CoverArgs) -> Result<()> {
    let cluster = ClusterMesh::new(a.hosts, a.devices_per_host, 1.0, 1.0)?;
    let shapes = a.shapes.iter().map(|s| parse_shape(s)).collect::<Result<Vec<_>>>()?;
    let pieces = cover(&cluster, &shapes).map_err(|e| match e {
        MeshError::Inadmissible(_) | MeshError::Precondition(_) => anyhow::Error::from(Infeasible(e.to_string())),
        other => other.into(),
    })?;
    let verified = verify_cover(&cluster, &pieces);
    let doc = CoverDoc {
        format: COVER_FORMAT,
        version: FORMAT_VERSION,
        hosts: a.hosts,
        devices_per_host: a.devices_per_host,
        verified,
        pieces: pieces.iter().map(|p| CoverPiece { assignment: *p, device_ids: p.device_ids(&cluster) }).collect(),
    };
    write_json(&doc, a.out.as_deref())?;
    if !verified {
        return Err(Infeasible("the tiling does not cover the cluster exactly".into()).into());
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let doc = load_plan(&a.plan)?;
    println!("source        {}", doc.source);
    print!("{}", report(&doc.plan));
    Ok(())
}

fn report(plan: &PipelinePlan) -> String {
    let mut s = String::new();
    let c = &plan.cluster;
    s += &format!("cluster       {} hosts x {} devices\n", c.num_hosts(), c.devices_per_host());
    s += &format!("layers        {}\n", plan.clustering.layers.len());
    s += &format!("microbatches  {}\n", plan.b);
    s += &format!("T*            {}\n", plan.t_star);
    s += &format!("t_max         {}\n", plan.t_max);
    s += &format!(
        "search        {} t_max candidates, {} evaluated, {} uncertified solves\n",
        plan.stats.tmax_candidates, plan.stats.tmax_evaluated, plan.stats.uncertified_solves
    );
    s += "stage  layers   submesh  view   s  latency         mem_stage     mem_act  devices\n";
    for (i, st) in plan.stages.iter().enumerate() {
        s += &format!(
            "{:>5}  {:>2}..{:<2}  {:>7}  {:<5} {:>2}  {}  {:>10}  {:>10}  {:?}\n",
            i,
            st.layers.0,
            st.layers.1,
            format!("{}x{}", st.shape.n, st.shape.m),
            st.view.to_string(),
            st.inflight,
            st.latency,
            st.report.mem_stage,
            st.report.mem_act,
            st.devices
        );
    }
    s
}
