use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ircam::config::{ConfigError, RunConfig};
use ircam::eval::{
    evaluate, results_table_csv, Agent, EvalError, EvalReport, GreedyAudioAgent, IrcamAgent, RandomAgent, TableRow,
};
use ircam::net::{
    attention_mass_summary, attention_table_csv, mass_summary_csv, AttentionMap, AttentionStage, Checkpoint,
    CheckpointError, IrcamNet, NetError,
};
use ircam::sim::{world_generate, write_trajectory_log, Action, EpisodeTrace, NavEnv, Split};
use ircam::train::{train_loop, CheckpointKind, MetricsRecord, TrainError, TrainObserver};

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Artifact(String),
    Diverged(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Artifact(m) | CliError::Diverged(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(m) => CliError::Config(m),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Net(n) => n.into(),
            EvalError::Sim(s) => CliError::Config(s.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Sim(_) => CliError::Config(e.to_string()),
            TrainError::Net(n) => n.into(),
            TrainError::Diverged { .. } | TrainError::NonFinite { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Artifact(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io(path))
}

fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(CliError::Artifact(format!(
                "run directory {} already exists (pass --force to replace it)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    fs::create_dir_all(dir).map_err(io(dir))
}

/// Writes metrics lines and checkpoints into a run directory.
struct RunWriter {
    dir: PathBuf,
    metrics: fs::File,
}

impl RunWriter {
    fn new(dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.jsonl");
        let metrics = fs::File::create(&path).map_err(io(&path))?;
        Ok(Self { dir: dir.to_path_buf(), metrics })
    }
}

impl TrainObserver for RunWriter {
    fn on_update(&mut self, record: &MetricsRecord) -> std::result::Result<(), TrainError> {
        let line = serde_json_line(record);
        self.metrics.write_all(line.as_bytes()).map_err(|e| TrainError::Io(format!("metrics.jsonl: {e}")))?;
        println!(
            "update {:>4}  steps {:>7}  reward {:+.4}  entropy {:.3}{}",
            record.update_index,
            record.agent_steps,
            record.mean_reward,
            record.entropy,
            match (record.sr_heard, record.sr_unheard) {
                (Some(h), Some(u)) => format!("  SR heard {h:.3} unheard {u:.3}"),
                _ => String::new(),
            }
        );
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        kind: CheckpointKind,
        agent_steps: usize,
        net: &IrcamNet,
    ) -> std::result::Result<(), TrainError> {
        let name = match kind {
            CheckpointKind::Crash => format!("crash_{agent_steps}.ircm"),
            _ => format!("ckpt_{agent_steps}.ircm"),
        };
        net.to_checkpoint().write_file(&self.dir.join(name)).map_err(|e| TrainError::Io(e.to_string()))
    }
}

fn serde_json_line(record: &MetricsRecord) -> String {
    let mut s = serde_json::to_string(record).expect("metrics serialize");
    s.push('\n');
    s
}

fn print_rows(rows: &[TableRow]) {
    print!("{}", results_table_csv(rows));
}

/// Trains one configuration into `dir` and evaluates the result on both splits.
fn train_into(cfg: &RunConfig, dir: &Path) -> Result<(IrcamNet, [EvalReport; 2])> {
    write(&dir.join("config.toml"), cfg.to_toml())?;
    let mut writer = RunWriter::new(dir)?;
    let outcome = train_loop(&cfg.train_setup(), &mut writer)?;
    let heard = evaluate(&mut IrcamAgent::greedy(&outcome.net), &cfg.sim, Split::Heard, &cfg.eval)?;
    let unheard = evaluate(&mut IrcamAgent::greedy(&outcome.net), &cfg.sim, Split::Unheard, &cfg.eval)?;
    write(&dir.join("eval.csv"), results_table_csv(&[heard.row(), unheard.row()]))?;
    Ok((outcome.net, [heard, unheard]))
}

pub fn train(config: &Path, overrides: &[String], force: bool) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let dir = cfg.run_dir();
    fresh_dir(&dir, force)?;
    let (_, reports) = train_into(&cfg, &dir)?;
    print_rows(&reports.map(|r| r.row()));
    println!("run written to {}", dir.display());
    Ok(())
}

/// Run config for commands driven by a checkpoint: the simulator must render
/// what the network expects.
fn checkpoint_context(checkpoint: &Path, config: Option<&Path>, overrides: &[String]) -> Result<(IrcamNet, RunConfig)> {
    let net = IrcamNet::from_checkpoint(&Checkpoint::read_file(checkpoint)?)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p, overrides)?,
        None => {
            let mut c = RunConfig::from_toml_with("", overrides)?;
            c.sim.view_height = net.config().view_height;
            c.sim.view_width = net.config().view_width;
            c.sim.audio_bins = net.config().audio_bins;
            c
        }
    };
    cfg.network = net.config().clone();
    cfg.validate()?;
    Ok((net, cfg))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub split: String,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub baselines: bool,
    pub out: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let split = Split::parse(&args.split).map_err(|e| CliError::Config(e.to_string()))?;
    let (net, mut cfg) = checkpoint_context(&args.checkpoint, args.config.as_deref(), &args.overrides)?;
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(s) = args.seed {
        cfg.eval.seed = s;
    }
    cfg.validate()?;
    let report = evaluate(&mut IrcamAgent::greedy(&net), &cfg.sim, split, &cfg.eval)?;
    let mut rows = vec![report.row()];
    if args.baselines {
        let mut agents: Vec<Box<dyn Agent>> =
            vec![Box::new(RandomAgent::new(cfg.eval.seed)), Box::new(GreedyAudioAgent::default())];
        for a in agents.iter_mut() {
            rows.push(evaluate(a.as_mut(), &cfg.sim, split, &cfg.eval)?.row());
        }
    }
    print_rows(&rows);
    if let Some(path) = &args.out {
        write(path, results_table_csv(&rows))?;
    }
    if let Some(path) = &args.trajectories {
        write(path, write_trajectory_log(&report.traces))?;
    }
    Ok(())
}

pub const VARIANTS: [(&str, &str); 4] =
    [("full", ""), ("wo_rt", "network.ablate_rt"), ("wo_pe", "network.ablate_pe"), ("wo_en", "network.ablate_en")];

/// Ablation table: one row per variant, SNA / SR / SPL for each split.
pub fn ablation_table_csv(rows: &[(String, [TableRow; 2])]) -> String {
    let mut out = String::from("method,SNA_heard,SR_heard,SPL_heard,SNA_unheard,SR_unheard,SPL_unheard\n");
    for (name, [h, u]) in rows {
        out.push_str(&format!("{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n", h.sna, h.sr, h.spl, u.sna, u.sr, u.spl));
    }
    out
}

pub fn ablate(config: &Path, overrides: &[String], force: bool) -> Result<()> {
    let base = RunConfig::load(config, overrides)?;
    let root = base.run_dir();
    fresh_dir(&root, force)?;
    let mut rows = Vec::new();
    for (name, flag) in VARIANTS {
        let mut all = overrides.to_vec();
        if !flag.is_empty() {
            all.push(format!("{flag}=true"));
        }
        let cfg = RunConfig::load(config, &all)?;
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        println!("== {name}");
        let (_, reports) = train_into(&cfg, &dir)?;
        rows.push((name.to_string(), reports.map(|r| r.row())));
    }
    let table = ablation_table_csv(&rows);
    write(&root.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn export_attn(
    checkpoint: &Path,
    world_seed: u64,
    out_dir: &Path,
    config: Option<&Path>,
    overrides: &[String],
    max_steps: Option<usize>,
) -> Result<()> {
    let (net, cfg) = checkpoint_context(checkpoint, config, overrides)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut env = NavEnv::new(cfg.sim.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut obs = env.reset(world_seed, Split::Heard);
    let start = env.pose();
    let mut trace = EpisodeTrace::new(world_seed, start, env.world().geodesic(start.cell));
    let mut decoder_maps: Vec<AttentionMap> = Vec::new();
    let limit = max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    while !env.is_done() && step < limit {
        let (policy, trunk) = net.policy_with_attention(&[&obs])?;
        for map in trunk.attention {
            if let AttentionStage::Decoder { iteration } = map.stage {
                let name = format!("step{step:03}_iter{iteration}_head{}.csv", map.weights.head);
                write(&out_dir.join(name), attention_table_csv(&map, 0))?;
                decoder_maps.push(map);
            }
        }
        let action = Action::ALL[policy[0].argmax()];
        let r = env.step(action);
        let pose = env.pose();
        trace.push(pose, action, env.world().geodesic(pose.cell), &r);
        obs = r.observation;
        step += 1;
    }
    write(&out_dir.join("correlation_summary.csv"), mass_summary_csv(&attention_mass_summary(&decoder_maps)))?;
    write(&out_dir.join("trajectory.jsonl"), write_trajectory_log([&trace]))?;
    write(&out_dir.join("world.txt"), env.world().to_snapshot())?;
    println!("{step} steps exported to {}", out_dir.display());
    Ok(())
}

pub fn world(seed: u64, config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p, overrides)?,
        None => RunConfig::from_toml_with("", overrides)?,
    };
    let w =
        world_generate(seed, cfg.sim.world_size, cfg.sim.wall_density).map_err(|e| CliError::Config(e.to_string()))?;
    print!("{}", w.to_snapshot());
    Ok(())
}
