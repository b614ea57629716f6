use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cpslab::data::{write_cache, write_label_pgm, write_ppm, Ratio};
use cpslab::eval::{evaluate_miou, evaluate_overlap};
use cpslab::experiment::{markdown_table, run_experiments, ExperimentSpec};
use cpslab::methods::{prepare_data, train, MethodKind, TrainConfig, TrainData};
use cpslab::rundir::{
    load_network, read_checkpoint, read_run_config, write_run_dir, CHECKPOINT_FILE,
};

#[derive(Parser)]
#[command(
    name = "cpslab",
    version,
    about = "Semi-supervised segmentation with cross pseudo supervision on toy data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and validation sets and write dataset caches.
    GenData(Common),
    /// Train one method and write a run directory.
    Train(Common),
    /// Evaluate the checkpoint of a run directory on its validation set.
    Eval(Common),
    /// Run every (method, ratio, seed) of a sweep config.
    Sweep(Common),
    /// Write a few training samples as PPM images and PGM label maps.
    ExportSamples {
        #[command(flatten)]
        common: Common,
        /// Number of samples to export.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<MethodKind>,
    /// Labeled fraction, e.g. `1/8` or `0.125`.
    #[arg(long)]
    ratio: Option<Ratio>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Replicate seed: partition, initializations and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory (run directory for `train` and `eval`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the CutMix variant of the method.
    #[arg(long)]
    cutmix: bool,
}

impl Common {
    fn config_text(&self) -> anyhow::Result<String> {
        match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
            None => Ok(String::new()),
        }
    }

    fn apply(&self, cfg: &mut TrainConfig) -> anyhow::Result<()> {
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(r) = self.ratio {
            cfg.data.ratio = r;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if self.cutmix {
            cfg.method = match cfg.method.with_cutmix() {
                Some(m) => m,
                None => bail!("{} has no CutMix variant", cfg.method),
            };
        }
        Ok(())
    }

    fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = TrainConfig::from_text(&self.config_text()?)?;
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn gen_data(c: &Common) -> anyhow::Result<()> {
    let cfg = c.train_config()?;
    let out = c.out_or("data");
    fs::create_dir_all(&out)?;
    let (train_set, val, protocol) = prepare_data(&cfg)?;
    write_cache(&train_set, &out.join("train.bin"))?;
    write_cache(&val, &out.join("val.bin"))?;
    let ids = |v: &[usize]| {
        v.iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    fs::write(
        out.join("partition.txt"),
        format!(
            "ratio = {}\nlabeled = {}\nunlabeled = {}\n",
            protocol.ratio,
            ids(&protocol.labeled),
            ids(&protocol.unlabeled)
        ),
    )?;
    println!(
        "wrote {} training and {} validation samples ({} labeled) to {}",
        train_set.len(),
        val.len(),
        protocol.labeled.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = c.train_config()?;
    let out = c.out_or("runs/latest");
    let (train_set, val, protocol) = prepare_data(&cfg)?;
    let result = train(
        &cfg,
        &TrainData {
            train: &train_set,
            protocol: &protocol,
            val: &val,
        },
    )?;
    write_run_dir(&out, &result)?;
    println!(
        "{} ratio {} seed {}: final mIoU {:.2} after {} iterations ({:.1}s); run written to {}",
        cfg.method,
        cfg.data.ratio,
        cfg.seeds.partition,
        100.0 * result.final_miou(),
        result.iterations,
        result.wall_time.as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn eval_cmd(c: &Common) -> anyhow::Result<()> {
    let dir = c.out.as_deref().unwrap_or(Path::new("runs/latest"));
    let cfg = read_run_config(dir)?;
    let entries = read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let net1 = load_network(&entries, "net1", &cfg)?;
    let (_, val, _) = prepare_data(&cfg)?;
    let report = evaluate_miou(&net1, &val)?;
    println!("mIoU {:.2}", 100.0 * report.mean);
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {k}: {:.2}", 100.0 * v),
            None => println!("  class {k}: absent"),
        }
    }
    if entries.iter().any(|(n, _)| n.starts_with("net2.")) {
        let net2 = load_network(&entries, "net2", &cfg)?;
        let o = evaluate_overlap(&net1, &net2, &val, cfg.overlap_region)?;
        println!("overlap {:.4} over {} object pixels", o.ratio, o.pixels);
    }
    Ok(())
}

fn sweep_cmd(c: &Common) -> anyhow::Result<bool> {
    let mut spec = ExperimentSpec::from_text(&c.config_text()?)?;
    if let Some(out) = &c.out {
        spec.out = out.clone();
    }
    if let Some(e) = c.epochs {
        spec.base.epochs = e;
    }
    if let Some(l) = c.lambda {
        spec.base.lambda = l;
    }
    if c.method.is_some() || c.ratio.is_some() || c.seed.is_some() || c.cutmix {
        bail!("sweep takes methods, ratios and seeds from its config file");
    }
    let report = run_experiments(&spec)?;
    print!("{}", markdown_table(&spec, &report));
    let failed = report.failures();
    if failed > 0 {
        eprintln!(
            "{failed} of {} runs failed; see {}",
            report.runs.len(),
            spec.out.join("summary.csv").display()
        );
    }
    Ok(failed == 0)
}

fn export_samples(c: &Common, count: usize) -> anyhow::Result<()> {
    let cfg = c.train_config()?;
    let out = c.out_or("samples");
    fs::create_dir_all(&out)?;
    let (train_set, _, _) = prepare_data(&cfg)?;
    for s in train_set.samples.iter().take(count) {
        write_ppm(&s.image, &out.join(format!("sample_{:04}.ppm", s.id)))?;
        write_label_pgm(
            &s.labels,
            train_set.height,
            train_set.width,
            train_set.num_classes,
            &out.join(format!("sample_{:04}_labels.pgm", s.id)),
        )?;
    }
    println!(
        "wrote {} samples to {}",
        count.min(train_set.len()),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c).map(|_| true),
        Command::Train(c) => train_cmd(c).map(|_| true),
        Command::Eval(c) => eval_cmd(c).map(|_| true),
        Command::Sweep(c) => sweep_cmd(c),
        Command::ExportSamples { common, count } => export_samples(common, *count).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
