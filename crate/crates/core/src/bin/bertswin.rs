//! Command-line entry point. Exit codes: 0 success, 1 usage or config
//! error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;

use bertswin::analytics::{summary_table, EmbeddingReport, HeadKind, ProbeOptions, SuiteOptions};
use bertswin::complexity::crossover_table;
use bertswin::harness::{
    embedding_set, patient, resume_pretrain, run_compare, run_desk_matrix, run_pretrain, seg_probe, CompareTarget,
    Dataset, FrozenEncoder, RunConfig, ValMetric, DESK_TARGET,
};
use bertswin::losses::{mvc_decompose, mvc_region, BlockSpec, MvcWeights};
use bertswin::model::TensorArchive;
use bertswin::rng::{keyed, streams};
use bertswin::synthvol::{read_volume, write_mask, write_volume};
use bertswin::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bertswin",
    version,
    about = "Volumetric masked-autoencoder pretraining and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML, dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.data.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    MaskedL2,
    Loss,
    MvcSoft,
    MvcSurf,
}

impl From<Metric> for ValMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::MaskedL2 => ValMetric::MaskedL2,
            Metric::Loss => ValMetric::Loss,
            Metric::MvcSoft => ValMetric::MvcSoft,
            Metric::MvcSurf => ValMetric::MvcSurf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Linear,
    TwoLayer,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic patients: raw-HU volumes and label masks for both joints.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
    },
    /// Train one configuration and stream metrics.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Steps-to-target comparison. Without configs, runs the five desk cells.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Baseline configuration compared against `--config`.
        #[arg(long, requires = "config")]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Metric::MaskedL2)]
        metric: Metric,
        #[arg(long, default_value_t = DESK_TARGET.value)]
        target: f64,
    },
    /// Analytic GFLOPs per component and the ViT/BertsWin crossover.
    Flops {
        #[arg(long)]
        volume: Vec<usize>,
        #[arg(long)]
        patch: Vec<usize>,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embedding probes: similarity distributions and effective rank.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Encoder checkpoint; without one an untrained encoder is probed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        patients: u64,
        #[arg(long, default_value_t = 9999)]
        n_boot: usize,
    },
    /// MVC decomposition of two volume files.
    Decompose {
        a: PathBuf,
        b: PathBuf,
        /// Also report the block-averaged terms over cubes of this side.
        #[arg(long)]
        sub_patch: Option<usize>,
    },
    /// Segmentation head on frozen encoder features.
    SegProbe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Head::Linear)]
        head: Head,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        train: u64,
        #[arg(long, default_value_t = 4)]
        test: u64,
    },
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn encoder(run: &RunConfig, checkpoint: Option<&Path>) -> Result<FrozenEncoder> {
    match checkpoint {
        Some(dir) => FrozenEncoder::from_checkpoint(&TensorArchive::load(dir)?),
        None => FrozenEncoder::untrained(run),
    }
}

/// Patient ids for probes, drawn away from the pretraining phantoms.
fn probe_ids(seed: u64, n: u64) -> Vec<u64> {
    let base = keyed(seed, streams::PROBE, 0).next_u64();
    (0..n).map(|i| base.wrapping_add(i)).collect()
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            seed,
            out,
            count,
            size,
            patch,
        } => {
            std::fs::create_dir_all(&out)?;
            let mut cfg = RunConfig::default();
            cfg.model.volume_size = size;
            cfg.model.patch_size = patch;
            cfg.model.validate()?;
            for id in probe_ids(seed, count) {
                let p = patient(seed, id, &cfg.model)?;
                for (side, (vol, mask)) in [("right", &p.right), ("left", &p.left)] {
                    write_volume(&out.join(format!("{id:016x}_{side}.vol")), vol)?;
                    write_mask(&out.join(format!("{id:016x}_{side}.seg")), mask, vol.spacing_mm)?;
                }
            }
            println!("wrote {count} patients to {}", out.display());
        }
        Command::Pretrain { run, resume } => {
            let cfg = run.load()?;
            let summary = match resume {
                Some(ck) => resume_pretrain(&cfg, &ck)?,
                None => run_pretrain(&cfg)?,
            };
            if cfg.out_dir.is_none() {
                for l in &summary.lines {
                    println!("{l}");
                }
            }
            eprintln!(
                "finished at step {}{}; checkpoint sha256 {}",
                summary.final_step,
                if summary.stopped_early { " (early stop)" } else { "" },
                summary.checkpoint_digest
            );
        }
        Command::Compare {
            run,
            baseline,
            metric,
            target,
        } => {
            let cfg = run.load()?;
            let target = CompareTarget {
                metric: metric.into(),
                value: target,
            };
            let report = match baseline {
                Some(b) => {
                    let mut base = RunConfig::load(&b)?;
                    if let Some(s) = run.seed {
                        base.data.seed = s;
                    }
                    base.out_dir = cfg.out_dir.as_ref().map(|d| d.join("baseline"));
                    let mut cand = cfg.clone();
                    cand.out_dir = cfg.out_dir.as_ref().map(|d| d.join("candidate"));
                    run_compare(&cand, &base, target)?
                }
                None => run_desk_matrix(&cfg, target)?.0,
            };
            print!("{}", report.to_text());
            if let Some(dir) = &cfg.out_dir {
                write_out(&dir.join("compare.json"), &serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Flops { volume, patch, out } => {
            let volume = if volume.is_empty() { vec![224] } else { volume };
            let patch = if patch.is_empty() { vec![16] } else { patch };
            let report = crossover_table(&volume, &patch)?;
            print!("{}", report.to_text());
            if let Some(path) = out {
                write_out(&path, &report.to_csv())?;
            }
        }
        Command::Probe {
            run,
            checkpoint,
            patients,
            n_boot,
        } => {
            let cfg = run.load()?;
            let enc = encoder(&cfg, checkpoint.as_deref())?;
            let stats = Dataset::generate(&enc.run)?.stats;
            let set = embedding_set(&enc, &stats, cfg.data.seed, &probe_ids(cfg.data.seed, patients))?;
            let opts = SuiteOptions {
                n_boot,
                seed: cfg.data.seed,
                ..SuiteOptions::default()
            };
            let label = checkpoint
                .as_ref()
                .map_or_else(|| "untrained".to_string(), |c| c.display().to_string());
            let report = EmbeddingReport::build(&label, &set, &opts)?;
            print!("{}", summary_table(std::slice::from_ref(&report)));
            if let Some(dir) = &cfg.out_dir {
                let lines: Vec<String> = report
                    .probes
                    .iter()
                    .map(serde_json::to_string)
                    .collect::<std::result::Result<_, _>>()?;
                write_out(&dir.join("probes.jsonl"), &(lines.join("\n") + "\n"))?;
                write_out(
                    &dir.join("embedding_report.json"),
                    &serde_json::to_string_pretty(&report)?,
                )?;
            }
        }
        Command::Decompose { a, b, sub_patch } => {
            let (va, vb) = (read_volume(&a)?, read_volume(&b)?);
            if va.size != vb.size {
                return Err(Error::Config(format!(
                    "volume sizes differ: {:?} vs {:?}",
                    va.size, vb.size
                )));
            }
            let c = mvc_decompose(&va.data, &vb.data)?;
            println!("mse        {:.6e}", c.mse);
            println!("brightness {:.6e}", c.brightness);
            println!("contrast   {:.6e}", c.contrast);
            println!("structure  {:.6e}", c.structure);
            if let Some(s) = sub_patch {
                let spec = BlockSpec::new(va.size, s)?;
                let (t, _) = mvc_region(&va.data, &vb.data, &spec, &MvcWeights::default(), None)?;
                println!(
                    "blocks {}^3 x {}: brightness {:.6e} contrast {:.6e} structure {:.6e} weighted {:.6e}",
                    s, t.blocks, t.brightness, t.contrast, t.structure, t.loss
                );
            }
        }
        Command::SegProbe {
            run,
            checkpoint,
            head,
            steps,
            train,
            test,
        } => {
            let cfg = run.load()?;
            let enc = encoder(&cfg, checkpoint.as_deref())?;
            let stats = Dataset::generate(&enc.run)?.stats;
            let ids = probe_ids(cfg.data.seed, train + test);
            let (tr, te) = ids.split_at(train as usize);
            let opts = ProbeOptions {
                head: match head {
                    Head::Linear => HeadKind::Linear,
                    Head::TwoLayer => HeadKind::TwoLayer,
                },
                steps,
                seed: cfg.data.seed,
                ..ProbeOptions::default()
            };
            let out = seg_probe(&enc, &stats, cfg.data.seed, tr, te, &opts)?;
            println!("loss {:.4} -> {:.4}", out.first_loss, out.final_loss);
            for (name, d) in ["background", "bone", "soft tissue"].iter().zip(&out.dice) {
                println!("dice {name:<12} {d:.4}");
            }
            if let Some(dir) = &cfg.out_dir {
                let json =
                    serde_json::json!({ "dice": out.dice, "first_loss": out.first_loss, "final_loss": out.final_loss });
                write_out(&dir.join("seg_probe.json"), &json.to_string())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
