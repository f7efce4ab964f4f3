use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevssm::bench::scene::{load_dataset, save_dataset};
use bevssm::bench::*;
use bevssm::error::{Error, Result};
use clap::{Parser, Subcommand};

/// Synthetic BEV temporal-fusion benchmark.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train.bin and eval.bin datasets plus the resolved config.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on <data>/train.bin and write a checkpoint and loss curve.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV, default `<out>.losses.csv`.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on <data>/eval.bin and write a metrics CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the fusion ablation grid, e.g. `mixer=conv,concat;directions=1,4;seeds=0,1,2`.
    Ablate {
        #[arg(long, default_value = "")]
        grid: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation.csv")]
        csv: PathBuf,
    },
    /// Time linear, chunked and quadratic SSD evaluation over sequence lengths.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,8192")]
        t: Vec<usize>,
        #[arg(long, default_value = "scan.csv")]
        csv: PathBuf,
        #[arg(long, default_value_t = 16)]
        state_dim: usize,
        #[arg(long, default_value_t = 16)]
        headdim: usize,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Write the L2-norm heatmap of one eval sequence as a PGM image.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index of the eval sample; its current frame is rendered.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Export the input grid instead of the fused one.
        #[arg(long)]
        input: bool,
    },
}

fn config_or_default(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { config, out } => {
            let cfg = config_or_default(config.as_deref())?;
            cfg.validate()?;
            let threads = cfg.train.threads;
            let train = gen_sequences(&cfg.scene, Split::Train, cfg.train.train_sequences, threads)?;
            save_dataset(&out.join("train.bin"), &train)?;
            let eval = gen_sequences(&cfg.scene, Split::Eval, cfg.train.eval_sequences, threads)?;
            save_dataset(&out.join("eval.bin"), &eval)?;
            cfg.save(&out.join("config.toml"))?;
            eprintln!("wrote {} train and {} eval sequences to {}", train.len(), eval.len(), out.display());
        }
        Cmd::Train { config, data, out, losses } => {
            let cfg = config_or_default(config.as_deref())?;
            let source = SceneSource::Loaded(load_dataset(&data.join("train.bin"))?);
            let every = source.len().max(1);
            let trained = train(&cfg, &source, |r| {
                if (r.step + 1) % every == 0 {
                    eprintln!("epoch {} step {} loss {:.4}", r.epoch, r.step, r.loss);
                }
            })?;
            save_checkpoint(&out, &cfg, &trained.params)?;
            let losses = losses.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".losses.csv");
                p.into()
            });
            write_loss_csv(&trained.losses, create(&losses)?)?;
        }
        Cmd::Eval { ckpt, data, report } => {
            let (cfg, _, ps) = load_checkpoint(&ckpt)?;
            let source = SceneSource::Loaded(load_dataset(&data.join("eval.bin"))?);
            let r = evaluate_model(&cfg, &ps, &source)?;
            r.write_csv(create(&report)?)?;
            eprintln!("mAP {:.4} NDS {:.4} mAVE {:.4}", r.map, r.nds, r.mave);
        }
        Cmd::Ablate { grid, config, csv } => {
            let cfg = config_or_default(config.as_deref())?;
            let grid = AblationGrid::parse(&grid)?;
            let rows = run_ablation(&cfg, &grid, |r| {
                eprintln!("{} x{} seed {}: NDS {:.4} mAVE {:.4}", r.mixer, r.directions, r.seed, r.nds, r.mave)
            })?;
            write_ablation_csv(&rows, create(&csv)?)?;
        }
        Cmd::BenchScan {
            t,
            csv,
            state_dim,
            headdim,
            chunk,
            repeats,
        } => {
            let report = bench_scan(&ScanBenchConfig {
                lengths: t,
                state_dim,
                headdim,
                chunk,
                repeats,
                ..Default::default()
            })?;
            for (m, s) in &report.slopes {
                eprintln!("{m}: log-log slope {s:.3}");
            }
            write_scan_csv(&report, create(&csv)?)?;
        }
        Cmd::Heatmap {
            ckpt,
            data,
            frame,
            out,
            input,
        } => {
            let (_, model, ps) = load_checkpoint(&ckpt)?;
            let seqs = load_dataset(&data.join("eval.bin"))?;
            let seq = seqs
                .get(frame)
                .ok_or_else(|| Error::Config(format!("frame {frame} out of range for {} sequences", seqs.len())))?;
            if input {
                heatmap_export(&seq.current().bev, &out)?;
            } else {
                let (_, fused) = model.predict(&ps, seq, frame)?;
                heatmap_export(&fused, &out)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
