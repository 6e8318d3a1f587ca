//! `stable-attn`: data generation, two-stage training, stability evaluation,
//! standalone metrics, and attention dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use stable_attn::attention::{self, KvStrategy, PlainAttention};
use stable_attn::checkpoint;
use stable_attn::config::RunConfig;
use stable_attn::data;
use stable_attn::decoder;
use stable_attn::error::{Error, Result};
use stable_attn::mask::BinaryMask;
use stable_attn::metrics;
use stable_attn::pgm;
use stable_attn::prompts::{self, Box2, PromptSpec};
use stable_attn::report;
use stable_attn::rng::Rng;
use stable_attn::tensor::{Graph, ParamGroup};
use stable_attn::train::{self, Condition};

#[derive(Parser)]
#[command(
    name = "stable-attn",
    version,
    about = "Prompt-robust promptable segmentation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration (unknown keys rejected); defaults otherwise
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test scene directories
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (train/ and test/ subdirectories are created)
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the base model on clean prompts, freeze, checkpoint
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory from gen-data; regenerated in memory if omitted
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Stage 2: train the adapter against the robust prompt mix
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Frozen base checkpoint from train-base
        #[arg(long)]
        base: PathBuf,
        /// Output adapter checkpoint path
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate segmentation stability on the held-out split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        /// Adapter checkpoint; baseline evaluation when omitted
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// K/V sampling strategy: plain, dsp, or dsp-drp
        #[arg(long)]
        attention: Option<String>,
        /// Prompts per image and condition
        #[arg(long, short = 'B', default_value_t = 20)]
        b: usize,
        /// Comma-separated: gt_box, noisy_box:LO-HI, points:K
        #[arg(long, default_value = "gt_box,noisy_box:0.5-0.6,points:1,points:3")]
        conditions: String,
        /// Output directory for report.csv and report.json
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a directory of PGM masks without any model
    Metrics {
        /// Directory of P5 PGM masks (one predicted mask per file)
        #[arg(long)]
        masks: PathBuf,
        /// Ground-truth mask for mIoU / boundary mIoU (optional)
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Write CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-token attention heatmaps for one scene and prompt
    DumpAttn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        attention: Option<String>,
        /// Held-out scene index
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Prompt condition: gt_box, noisy_box:LO-HI, or points:K
        #[arg(long, default_value = "gt_box")]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the default configuration as JSON
    DumpDefaults,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_scenes(data: &Option<PathBuf>, split: &str, cfg: &RunConfig) -> Result<Vec<data::SyntheticScene>> {
    match data {
        Some(dir) => data::read_dataset(&dir.join(split)),
        None => Ok(if split == "train" {
            train::train_dataset(cfg)
        } else {
            train::test_dataset(cfg)
        }),
    }
}

fn load_group(path: &Path, expect: &str) -> Result<(ParamGroup, String, u64)> {
    let loaded = checkpoint::load(path)?;
    let group = loaded
        .groups
        .into_iter()
        .find(|g| g.name == expect)
        .ok_or_else(|| {
            Error::Format {
                what: "checkpoint",
                detail: format!("{} holds no '{expect}' parameter group", path.display()),
            }
        })?;
    Ok((group, loaded.config_hash, loaded.seed))
}

fn parse_conditions(spec: &str) -> Result<Vec<Condition>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Condition::parse)
        .collect()
}

fn pick_strategy(name: &Option<String>, has_adapter: bool) -> Result<Box<dyn KvStrategy>> {
    match name {
        Some(n) => attention::lookup(n),
        None => Ok(if has_adapter {
            attention::lookup("dsp-drp")?
        } else {
            Box::new(PlainAttention)
        }),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::DumpDefaults => {
            println!("{}", RunConfig::default().to_json());
            Ok(())
        }
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            data::write_dataset(&out.join("train"), &train::train_dataset(&cfg))?;
            data::write_dataset(&out.join("test"), &train::test_dataset(&cfg))?;
            let manifest = serde_json::json!({
                "config_hash": cfg.hash(),
                "seed": cfg.seed,
                "train_scenes": cfg.train_scenes,
                "test_scenes": cfg.test_scenes,
            });
            let mp = out.join("manifest.json");
            std::fs::write(&mp, serde_json::to_string_pretty(&manifest).expect("serializes"))
                .map_err(|e| Error::io(mp.display().to_string(), e))?;
            println!("wrote {} train / {} test scenes under {}", cfg.train_scenes, cfg.test_scenes, out.display());
            Ok(())
        }
        Command::TrainBase { cfg, out, data } => {
            let cfg = cfg.load()?;
            let scenes = load_scenes(&data, "train", &cfg)?;
            let (base, stats) = train::train_base(&scenes, &cfg)?;
            checkpoint::save(&out, &[&base], &cfg.hash(), cfg.seed)?;
            println!(
                "base trained: loss {:.4} -> {:.4}, {} params, checkpoint {}",
                stats.epoch_losses.first().unwrap_or(&f64::NAN),
                stats.epoch_losses.last().unwrap_or(&f64::NAN),
                base.param_count(),
                out.display()
            );
            Ok(())
        }
        Command::Adapt { cfg, base, out, data } => {
            let cfg = cfg.load()?;
            let scenes = load_scenes(&data, "train", &cfg)?;
            let before = checkpoint::checksum(&base)?;
            let (base_group, _, _) = load_group(&base, "base")?;
            if !base_group.frozen {
                return Err(Error::Contract(format!(
                    "{} is not a frozen base checkpoint",
                    base.display()
                )));
            }
            let (adapter, stats) = train::adapt_stable(&base_group, &scenes, &cfg)?;
            if checkpoint::checksum(&base)? != before {
                return Err(Error::Contract("base checkpoint changed on disk during adaptation".into()));
            }
            checkpoint::save(&out, &[&adapter], &cfg.hash(), cfg.seed)?;
            println!(
                "adapter trained: loss {:.4} -> {:.4}, {} params ({:.1}% of base), checkpoint {}",
                stats.epoch_losses.first().unwrap_or(&f64::NAN),
                stats.epoch_losses.last().unwrap_or(&f64::NAN),
                adapter.param_count(),
                100.0 * adapter.param_count() as f64 / base_group.param_count() as f64,
                out.display()
            );
            Ok(())
        }
        Command::Eval { cfg, base, adapter, attention, b, conditions, out, data } => {
            let cfg = cfg.load()?;
            let scenes = load_scenes(&data, "test", &cfg)?;
            let (base_group, _, _) = load_group(&base, "base")?;
            let adapter_group = match &adapter {
                Some(p) => Some(load_group(p, "adapter")?.0),
                None => None,
            };
            let strategy = pick_strategy(&attention, adapter_group.is_some())?;
            if strategy.needs_adapter() && adapter_group.is_none() {
                return Err(Error::Config(format!(
                    "strategy '{}' requires --adapter",
                    strategy.name()
                )));
            }
            let conds = parse_conditions(&conditions)?;
            let rep = train::evaluate_stability(
                &base_group,
                adapter_group.as_ref(),
                strategy.as_ref(),
                &scenes,
                &conds,
                b,
                cfg.seed,
                &cfg,
            )?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            report::write_csv(&out.join("report.csv"), &rep)?;
            report::write_json(&out.join("report.json"), &rep)?;
            print!("{}", report::to_csv(&rep));
            Ok(())
        }
        Command::Metrics { masks, gt, out } => {
            let rep = score_mask_dir(&masks, gt.as_deref())?;
            match out {
                Some(p) => std::fs::write(&p, &rep).map_err(|e| Error::io(p.display().to_string(), e))?,
                None => print!("{rep}"),
            }
            Ok(())
        }
        Command::DumpAttn { cfg, base, adapter, attention, index, prompt, out, data } => {
            let cfg = cfg.load()?;
            let scenes = load_scenes(&data, "test", &cfg)?;
            let scene = scenes.get(index).ok_or_else(|| {
                Error::Config(format!("scene index {index} out of range (have {})", scenes.len()))
            })?;
            let (base_group, _, _) = load_group(&base, "base")?;
            let adapter_group = match &adapter {
                Some(p) => Some(load_group(p, "adapter")?.0),
                None => None,
            };
            let strategy = pick_strategy(&attention, adapter_group.is_some())?;
            if strategy.needs_adapter() && adapter_group.is_none() {
                return Err(Error::Config(format!(
                    "strategy '{}' requires --adapter",
                    strategy.name()
                )));
            }
            let cond = Condition::parse(&prompt)?;
            let spec = draw_condition_prompt(&cond, scene, &cfg)?;
            let mut g = Graph::new();
            let decoded = train::forward_scene(
                &mut g,
                &base_group,
                adapter_group.as_ref(),
                strategy.as_ref(),
                &scene.image,
                &spec,
                None,
                cfg.s_p,
            )?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let stem = format!("scene_{index:04}");
            for rec in &decoded.records {
                decoder::dump_attention(rec, &out, &stem)?;
            }
            // the predicted mask alongside, for orientation
            let bits: Vec<bool> = g.data(decoded.full_logits).iter().map(|v| *v > 0.0).collect();
            pgm::write_mask(
                &out.join(format!("{stem}.pred.pgm")),
                &BinaryMask::from_bits(decoder::IMG, decoder::IMG, bits),
            )?;
            println!("wrote attention maps for {stem} under {}", out.display());
            Ok(())
        }
    }
}

fn draw_condition_prompt(
    cond: &Condition,
    scene: &data::SyntheticScene,
    cfg: &RunConfig,
) -> Result<PromptSpec> {
    let gt = Box2::around_mask(&scene.target_mask)
        .ok_or_else(|| Error::Generation("scene target mask is empty".into()))?;
    let mut rng = Rng::new(cfg.seed).derive(0xd0a7);
    match cond {
        Condition::GtBox => Ok(PromptSpec::gt_box(gt)),
        Condition::NoisyBox { lo, hi } => {
            let b = prompts::noisy_box(&gt, cfg.noise_scale, *lo, *hi, decoder::IMG, decoder::IMG, &mut rng)?;
            Ok(PromptSpec::noisy_box(b, *lo, *hi))
        }
        Condition::Points { k } => {
            Ok(PromptSpec::points(prompts::sample_points(&scene.target_mask, *k, &mut rng)?))
        }
    }
}

/// Score every .pgm in a directory (sorted by name) as one prompt batch.
fn score_mask_dir(dir: &Path, gt: Option<&Path>) -> Result<String> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "pgm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .pgm masks under {}", dir.display())));
    }
    let masks: Vec<BinaryMask> = paths.iter().map(|p| pgm::read_mask(p)).collect::<Result<_>>()?;
    let msf = metrics::stability_score(&masks)?;
    let n = masks.len();
    let mut out = String::from("condition,metric,value,n\n");
    out.push_str(&format!("masks,msf,{msf:.12},{n}\n"));
    if let Some(gt_path) = gt {
        let gt_mask = pgm::read_mask(gt_path)?;
        let d = metrics::default_boundary_width(gt_mask.width, gt_mask.height);
        let mut miou = 0.0;
        let mut mbiou = 0.0;
        for m in &masks {
            miou += metrics::mask_iou(m, &gt_mask)?;
            mbiou += metrics::boundary_iou(m, &gt_mask, d)?;
        }
        out.push_str(&format!("masks,miou,{:.12},{n}\n", miou / n as f64));
        out.push_str(&format!("masks,mbiou,{:.12},{n}\n", mbiou / n as f64));
    }
    Ok(out)
}
