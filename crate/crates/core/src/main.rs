use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ddccanet::config::PipelineConfig;
use ddccanet::pipeline;
use ddccanet::synth::{write_blob_corpus, BlobSpec};
use ddccanet::{Error, ExecSettings, Result};

#[derive(Parser)]
#[command(name = "ddccanet", version, about = "Two-view discriminant canonical correlation filter network")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// Fixed batch assignment and merge order (bit-identical across thread counts)
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    deterministic: Option<bool>,
    /// Seed for synthetic data generation
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn filters, fit the classifier and write a model file
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `model.path`
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write the training report as CSV
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write features for every sample of a manifest as CSV
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a labeled manifest and report accuracy
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time moment accumulation and forward passes per thread count
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        threads: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a two-class blob image corpus with manifests and a config
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
    },
}

impl Global {
    fn exec(&self, base: ExecSettings) -> ExecSettings {
        ExecSettings {
            threads: self.threads.unwrap_or(base.threads),
            deterministic: self.deterministic.unwrap_or(base.deterministic),
        }
    }

    fn load_config(&self, path: &Path) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(path)?;
        cfg.exec = self.exec(cfg.exec);
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.cmd {
        Command::Train { config, model, report } => {
            let cfg = g.load_config(config)?;
            let out = pipeline::cmd_train(&cfg, model.as_deref())?;
            print!("{}", out.report);
            if let Some(p) = report {
                write(p, &out.report.to_csv())?;
            }
        }
        Command::Extract { model, manifest, out } => {
            pipeline::cmd_extract(model, manifest, out, &g.exec(ExecSettings::default()))?;
        }
        Command::Eval { model, manifest, report } => {
            let r = pipeline::cmd_eval(model, manifest, &g.exec(ExecSettings::default()))?;
            print!("{r}");
            if let Some(p) = report {
                write(p, &r.to_csv())?;
            }
        }
        Command::Bench { config, threads, out } => {
            let cfg = g.load_config(config)?;
            let csv = pipeline::bench_csv(&pipeline::cmd_bench(&cfg, threads)?);
            match out {
                Some(p) => write(p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Synth {
            out,
            size,
            train_per_class,
            test_per_class,
        } => {
            let spec = BlobSpec {
                size: *size,
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                seed: g.seed.unwrap_or(0),
                ..Default::default()
            };
            write_blob_corpus(out, &spec)?;
            let config = format!(
                "data.train = train.csv\ndata.test = test.csv\nmodel.path = model.txt\n\
                 view.recipe = lbp_plus_gray\nnet.layers = 2\nnet.filters = 4\npatch.l1 = 5\npatch.l2 = 5\n\
                 batch.size = 16\nencode.block_h = {b}\nencode.block_w = {b}\nclf.kind = ridge\n",
                b = (size / 2).max(1)
            );
            write(&out.join("config.txt"), &config)?;
            log::info!("[synth] corpus written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
