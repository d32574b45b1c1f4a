use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use roger_core::dataset::{degrade_sequence, generate_scene, load_sequence, DegradationKind, SyntheticScene};
use roger_core::degradation::NoiseParams;
use roger_core::metrics::format_table;
use roger_core::pipeline::{ablate, evaluate, load_run, run, write_run, PipelineConfig, METRICS_FILE};
use roger_core::Error;

#[derive(Parser, Debug)]
#[command(name = "roger", version, about = "Robust Gaussian-splatting RGB-D SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run SLAM over a sequence and write trajectory, renders, map and metrics.
    Run {
        seq_dir: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "roger-out")]
        out: PathBuf,
    },
    /// Ray-cast a synthetic sequence. The spec is `desk[:frames[:WxH]]` or a scene JSON file.
    Synth {
        scene_spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a degraded copy of a sequence.
    Degrade {
        seq: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shot_var: Option<f64>,
        #[arg(long)]
        read_var: Option<f64>,
        /// Additive σ on the 8-bit scale.
        #[arg(long)]
        gauss_std: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a run directory against a reference sequence.
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run the cumulative ablation rows and print the table.
    Ablate {
        seq: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
        /// Also write the rows as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `all`, `none` or a comma list of adaptive_tracking, sp_rofusion, enhancement.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long, value_enum)]
    enhancer: Option<Enhancer>,
    /// Sidecar address (host:port).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Natural,
    NoiseLowlight,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Enhancer {
    Off,
    Classical,
    Sidecar,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.sets {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")).into());
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(a) = &self.ablation {
            cfg.set("ablation", a)?;
        }
        if let Some(e) = self.enhancer {
            let mode = match e {
                Enhancer::Off => "off",
                Enhancer::Classical => "classical",
                Enhancer::Sidecar => "sidecar",
            };
            cfg.set("enhancer.mode", mode)?;
            if !matches!(e, Enhancer::Sidecar) && self.endpoint.is_none() {
                cfg.set("enhancer.endpoint", "")?;
            }
        }
        if let Some(ep) = &self.endpoint {
            cfg.set("enhancer.endpoint", ep)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_scene(spec: &str) -> anyhow::Result<SyntheticScene> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        let scene: SyntheticScene =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("scene file {spec}: {e}")))?;
        return Ok(scene);
    }
    let mut parts = spec.split(':');
    if parts.next() != Some("desk") {
        return Err(Error::Config(format!("unknown scene spec {spec:?}")).into());
    }
    let bad = || Error::Config(format!("malformed scene spec {spec:?}"));
    let frames = parts.next().map_or(Ok(20), |s| s.parse().map_err(|_| bad()))?;
    let (w, h) = match parts.next() {
        Some(dims) => {
            let (w, h) = dims.split_once('x').ok_or_else(bad)?;
            (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?)
        }
        None => (80, 60),
    };
    if parts.next().is_some() {
        return Err(bad().into());
    }
    Ok(SyntheticScene::desk(frames, w, h))
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run { seq_dir, common, out } => {
            let cfg = common.resolve()?;
            let seq = load_sequence(&seq_dir)?;
            let result = run(&seq, &cfg)?;
            write_run(&out, &result, &cfg)?;
            println!("{}", serde_json::to_string(&result.metrics)?);
            log::info!("wrote {}", out.join(METRICS_FILE).display());
        }
        Command::Synth { scene_spec, out, seed } => {
            let scene = parse_scene(&scene_spec)?;
            let m = generate_scene(&scene, seed, &out)?;
            println!("{} frames written to {}", m.frames.len(), out.display());
        }
        Command::Degrade { seq, kind, out, shot_var, read_var, gauss_std, gamma, seed } => {
            let d = NoiseParams::default();
            let p = NoiseParams {
                shot_var: shot_var.unwrap_or(d.shot_var),
                read_var: read_var.unwrap_or(d.read_var),
                gauss_std_8bit: gauss_std.unwrap_or(d.gauss_std_8bit),
                gamma: gamma.unwrap_or(d.gamma),
                rng_seed: seed,
            };
            let kind = match kind {
                Kind::Natural => DegradationKind::Natural,
                Kind::NoiseLowlight => DegradationKind::NoiseLowlight,
            };
            let m = degrade_sequence(&seq, &out, &p, kind)?;
            println!("{} frames written to {}", m.frames.len(), out.display());
        }
        Command::Eval { run_dir, gt } => {
            let (trajectory, renders) = load_run(&run_dir)?;
            let reference = load_sequence(&gt)?;
            let rec = evaluate(&trajectory, &renders, &reference)?;
            println!("{}", serde_json::to_string(&rec)?);
            print!("{}", format_table(&[("roger".into(), rec)]));
        }
        Command::Ablate { seq, common, out } => {
            let cfg = common.resolve()?;
            let s = load_sequence(&seq)?;
            let rows = ablate(&s, &cfg)?;
            print!("{}", format_table(&rows));
            if let Some(path) = out {
                let json: Vec<_> = rows
                    .iter()
                    .map(|(label, r)| serde_json::json!({ "row": label, "metrics": r }))
                    .collect();
                std::fs::write(&path, serde_json::to_string_pretty(&json)?)
                    .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Parse { .. }) => 2,
        Some(Error::Divergence(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
