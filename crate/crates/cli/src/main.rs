use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use loopmap::eval::{ate, read_tum, write_tum, AteReport};
use loopmap::geom::Pose;
use loopmap::pipeline::{Pipeline, PipelineConfig, RunReport};
use loopmap::posegraph::{GraphConfig, PoseGraph};
use loopmap::retrieval::{build_vocabulary, Vocabulary};
use loopmap::sim::{DescriptorMode, Scenario, SimConfig};

#[derive(Parser)]
#[command(name = "loopmap", version, about = "Loop closure, relocalization and 4-DOF pose graph tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SimArgs {
    /// Simulation config (key=value lines); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Descriptor source: rendered (FAST/BRIEF on synthetic images) or idhash.
    #[arg(long)]
    mode: Option<DescriptorMode>,
}

impl SimArgs {
    fn resolve(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(p) => SimConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => SimConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write ground-truth and odometry trajectories for a simulated run.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a vocabulary on the keyframes of a simulated run.
    BuildVocab {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        branching: u32,
        #[arg(long, default_value_t = 3)]
        depth: u32,
    },
    /// Detect, verify and relocalize loops on a simulated run, optimizing the graph.
    Run {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optimize on a worker thread while detection continues.
        #[arg(long)]
        concurrent: bool,
    },
    /// Run a simulated sequence against a saved map and merge it in.
    Merge {
        #[arg(long)]
        map: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth for evaluation; several files are concatenated.
        #[arg(long)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        concurrent: bool,
    },
    /// Remove redundant keyframes from a map.
    Downsample {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        distance: f64,
        #[arg(long, default_value_t = 0.2)]
        yaw: f64,
    },
    /// Rewrite a map file and check that it round-trips byte for byte.
    SaveMap {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load a map, optimize it once and write its trajectory.
    LoadMap {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Absolute trajectory error of an estimate against ground truth.
    Eval {
        /// Estimated trajectory (TUM).
        estimate: PathBuf,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        /// Directory for ate.txt and errors.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a map after the load-time optimization, with ATE when ground truth is given.
    Report {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::BuildVocab { .. } => "build-vocab",
            Command::Run { .. } => "run",
            Command::Merge { .. } => "merge",
            Command::Downsample { .. } => "downsample",
            Command::SaveMap { .. } => "save-map",
            Command::LoadMap { .. } => "load-map",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_traj(path: PathBuf, traj: &[(f64, Pose)]) -> Result<()> {
    write_tum(&path, traj).with_context(|| format!("writing {}", path.display()))
}

fn read_gt(paths: &[PathBuf]) -> Result<Vec<(f64, Pose)>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_tum(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(all)
}

fn load_map(path: &Path) -> Result<PoseGraph> {
    PoseGraph::load(path, GraphConfig::default()).with_context(|| format!("loading map {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn graph_summary(g: &PoseGraph) -> String {
    let mut s = String::new();
    let loops = g.loop_edges().count();
    writeln!(s, "vertices={}", g.len()).unwrap();
    writeln!(s, "edges={}", g.edges().len()).unwrap();
    writeln!(s, "loop_edges={loops}").unwrap();
    writeln!(s, "sequences={}", g.sequences().len()).unwrap();
    writeln!(s, "components={}", g.components().len()).unwrap();
    s
}

fn ate_lines(prefix: &str, est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<(AteReport, String)> {
    let r = ate(est, gt)?;
    let text = r.to_text(prefix);
    Ok((r, text))
}

/// Runs `scenario` through the pipeline, optionally on top of an existing map.
fn run_scenario(scenario: &Scenario, vocab: Vocabulary, map: Option<PoseGraph>, concurrent: bool) -> Result<(PoseGraph, RunReport)> {
    let cfg = PipelineConfig {
        camera: scenario.config.camera,
        concurrent,
        ..PipelineConfig::default()
    };
    let mut p = match map {
        Some(m) => Pipeline::with_map(m, vocab, cfg)?,
        None => Pipeline::new(vocab, cfg),
    };
    p.run(scenario.keyframes.clone(), scenario.config.sequence)?;
    Ok(p.finish()?)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { sim, out } => {
            let cfg = sim.resolve()?;
            let s = Scenario::generate(&cfg)?;
            out_dir(&out)?;
            write(out.join("sim.cfg"), &cfg.to_text())?;
            write_traj(out.join("groundtruth.tum"), &s.world.trajectory())?;
            write_traj(out.join("odometry.tum"), &s.track.trajectory(cfg.first_id))?;
            println!("keyframes={}", s.keyframes.len());
            println!("observations={}", s.keyframes.iter().map(|k| k.features.len()).sum::<usize>());
        }
        Command::BuildVocab { sim, out, branching, depth } => {
            let cfg = sim.resolve()?;
            let s = Scenario::generate(&cfg)?;
            let training: Vec<_> = s.keyframes.iter().map(|k| k.descriptors()).collect();
            let vocab = build_vocabulary(&training, branching, depth, cfg.seed)?;
            out_dir(&out)?;
            let path = out.join("vocab.vbw");
            vocab.save(&path).with_context(|| format!("writing {}", path.display()))?;
            println!("training_frames={}", training.len());
            println!("words={}", vocab.word_count());
        }
        Command::Run { sim, vocab, out, concurrent } => {
            let cfg = sim.resolve()?;
            let s = Scenario::generate(&cfg)?;
            let (g, r) = run_scenario(&s, load_vocab(&vocab)?, None, concurrent)?;
            let gt = s.world.trajectory();
            let (_, pre) = ate_lines("pre_ate_", &g.odometry_trajectory(), &gt)?;
            let (post_report, post) = ate_lines("post_ate_", &g.trajectory(), &gt)?;
            out_dir(&out)?;
            write_traj(out.join("groundtruth.tum"), &gt)?;
            write_traj(out.join("odometry.tum"), &g.odometry_trajectory())?;
            write_traj(out.join("estimate.tum"), &g.trajectory())?;
            g.save(out.join("map.vpg")).context("writing map")?;
            write(out.join("errors.csv"), &post_report.to_csv())?;
            let text = format!("{}{}{pre}{post}", r.to_text(), graph_summary(&g));
            write(out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Merge { map, sim, vocab, out, gt, concurrent } => {
            let cfg = sim.resolve()?;
            let base = load_map(&map)?;
            let base_vertices = base.len();
            if base.sequences().contains(&cfg.sequence) {
                bail!("sequence {} is already in the map; set sequence= in the config", cfg.sequence);
            }
            let s = Scenario::generate(&cfg)?;
            let (g, r) = run_scenario(&s, load_vocab(&vocab)?, Some(base), concurrent)?;
            let cross = g
                .loop_edges()
                .filter(|e| g.vertex(e.from).map(|v| v.sequence) != g.vertex(e.to).map(|v| v.sequence))
                .count();
            out_dir(&out)?;
            write_traj(out.join("groundtruth.tum"), &s.world.trajectory())?;
            write_traj(out.join("estimate.tum"), &g.trajectory())?;
            g.save(out.join("map.vpg")).context("writing map")?;
            let mut text = format!("{}{}", r.to_text(), graph_summary(&g));
            writeln!(text, "base_vertices={base_vertices}").unwrap();
            writeln!(text, "cross_sequence_loops={cross}").unwrap();
            writeln!(text, "connected={}", g.is_connected()).unwrap();
            if !gt.is_empty() {
                let (rep, lines) = ate_lines("ate_", &g.trajectory(), &read_gt(&gt)?)?;
                write(out.join("errors.csv"), &rep.to_csv())?;
                text.push_str(&lines);
            }
            write(out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Downsample { map, out, distance, yaw } => {
            let mut g = load_map(&map)?;
            let before = g.len();
            let removed = g.downsample(distance, yaw);
            g.optimize()?;
            out_dir(&out)?;
            g.save(out.join("map.vpg")).context("writing map")?;
            write_traj(out.join("estimate.tum"), &g.trajectory())?;
            let text = format!("vertices_before={before}\nvertices_after={}\nremoved={}\n", g.len(), removed.len());
            write(out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::SaveMap { map, out } => {
            let original = fs::read(&map).with_context(|| format!("reading {}", map.display()))?;
            let g = PoseGraph::from_bytes(&original, GraphConfig::default())?;
            let bytes = g.to_bytes()?;
            out_dir(&out)?;
            let path = out.join("map.vpg");
            fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", graph_summary(&g));
            println!("bytes={}", bytes.len());
            println!("identical={}", bytes == original);
        }
        Command::LoadMap { map, out } => {
            let mut g = load_map(&map)?;
            // A map with several components has no single gauge; it is written as loaded.
            let report = if g.is_connected() { Some(g.optimize()?) } else { None };
            out_dir(&out)?;
            write_traj(out.join("estimate.tum"), &g.trajectory())?;
            write_traj(out.join("odometry.tum"), &g.odometry_trajectory())?;
            let mut text = graph_summary(&g);
            writeln!(text, "optimized={}", report.is_some()).unwrap();
            if let Some(r) = report {
                writeln!(text, "optimize_iterations={}", r.lm.iterations).unwrap();
                writeln!(text, "optimize_ms={:.3}", r.elapsed_ms).unwrap();
            }
            write(out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Eval { estimate, gt, out } => {
            let est = read_tum(&estimate).with_context(|| format!("reading {}", estimate.display()))?;
            let (rep, text) = ate_lines("ate_", &est, &read_gt(&gt)?)?;
            if let Some(out) = out {
                out_dir(&out)?;
                write(out.join("ate.txt"), &text)?;
                write(out.join("errors.csv"), &rep.to_csv())?;
            }
            print!("{text}");
        }
        Command::Report { map, gt, out } => {
            let mut g = load_map(&map)?;
            let optimized = g.is_connected();
            if optimized {
                g.optimize()?;
            }
            let mut text = graph_summary(&g);
            writeln!(text, "optimized={optimized}").unwrap();
            if !gt.is_empty() {
                let gt = read_gt(&gt)?;
                text.push_str(&ate_lines("odometry_ate_", &g.odometry_trajectory(), &gt)?.1);
                text.push_str(&ate_lines("ate_", &g.trajectory(), &gt)?.1);
            }
            if let Some(out) = out {
                out_dir(&out)?;
                write(out.join("report.txt"), &text)?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").replace('"', "'");
            eprintln!("error command=args message=\"{first}\"");
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors often embed their source already; skip causes that repeat.
            let mut parts: Vec<String> = Vec::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !parts.last().is_some_and(|p| p.ends_with(&text)) {
                    parts.push(text);
                }
            }
            let message = parts.join(": ").replace('"', "'");
            eprintln!("error command={name} message=\"{message}\"");
            ExitCode::FAILURE
        }
    }
}
