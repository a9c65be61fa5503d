use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pgcm::checkpoint::ModelCheckpoint;
use pgcm::config::RunConfig;
use pgcm::data::{generate_dataset, read_dataset, write_dataset, GlyphSum};
use pgcm::eval::{
    evaluate, intervention_curves, prototype_count_sweep, run_editing_experiment, train_cbm_baseline, CurveMode,
    InterventionCurve,
};
use pgcm::training::train;

use crate::service::{router, ServiceState, Snapshot};

#[derive(Debug, Parser)]
#[command(name = "pgcm", version, about = "Prototype-grounded concept models on GlyphSum")]
pub struct Cli {
    /// Training seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key=value run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Pgcm,
    Cbm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a GlyphSum dataset into `<out>/dataset.bin`.
    GenData,
    /// Train a model; writes the checkpoint, a log and test metrics.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pgcm")]
        model: ModelKind,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Random-policy intervention curves in standard and propagating mode.
    InterveneCurve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train on corrupted labels, then remove or relabel misaligned prototypes.
    EditExperiment {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train once per prototype count in the configured sweep.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the concept alignment table as JSON.
    ExportTable {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Serve the HTTP JSON API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset for `/v1/metrics` and `/v1/instances`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Edit journal; replayed at start-up when present and rewritten on shutdown.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

fn dataset(cfg: &RunConfig, path: Option<&Path>) -> Result<GlyphSum> {
    match path {
        Some(p) => read_dataset(p).with_context(|| format!("reading dataset {}", p.display())),
        None => Ok(generate_dataset(&cfg.data)?),
    }
}

fn write(out: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let p = out.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Runs a non-serving command. Returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = cli.run_config()?;
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let seed = cfg.train.seed;
    let mut written = Vec::new();
    match &cli.command {
        Command::GenData => {
            let d = generate_dataset(&cfg.data)?;
            let p = out.join("dataset.bin");
            write_dataset(&d, &p)?;
            written.push(p);
        }
        Command::Train { data, model: ModelKind::Pgcm } => {
            let d = dataset(&cfg, data.as_deref())?;
            let (ck, report) = train(&cfg.train, &d)?;
            let p = out.join("checkpoint.bin");
            ck.save(&p)?;
            written.push(p);
            written.push(write(out, "train_log.txt", &report.to_text())?);
            let m = evaluate(&ck.model, &d.test, seed, &d.fingerprint())?;
            written.push(write(out, "metrics.txt", &m.to_text())?);
        }
        Command::Train { data, model: ModelKind::Cbm } => {
            let d = dataset(&cfg, data.as_deref())?;
            let (cbm, report) = train_cbm_baseline(&cfg.train, &d)?;
            let p = out.join("cbm.bin");
            cbm.to_container().write(&p)?;
            written.push(p);
            let text = format!("best_epoch={}\nval_task_accuracy={:.6}\n{}", report.best_epoch, report.val_task_accuracy, report.test.to_text());
            written.push(write(out, "cbm_metrics.txt", &text)?);
        }
        Command::Eval { checkpoint, data } => {
            let ck = load_checkpoint(checkpoint)?;
            let d = dataset(&cfg, data.as_deref())?;
            let m = evaluate(&ck.model, &d.test, seed, &d.fingerprint())?;
            written.push(write(out, "metrics.txt", &m.to_text())?);
            let p = out.join("metrics.bin");
            m.to_container().write(&p)?;
            written.push(p);
        }
        Command::InterveneCurve { checkpoint, data } => {
            let ck = load_checkpoint(checkpoint)?;
            let d = dataset(&cfg, data.as_deref())?;
            let curves = intervention_curves(&ck.model, &d.test, &[CurveMode::Standard, CurveMode::Propagating], seed)?;
            let mut csv = format!("{}\n", InterventionCurve::CSV_HEADER);
            for c in &curves {
                csv.push_str(&c.csv_rows());
            }
            written.push(write(out, "curves.csv", &csv)?);
        }
        Command::EditExperiment { data } => {
            let d = dataset(&cfg, data.as_deref())?;
            let (ck, report) = run_editing_experiment(&cfg.train, &d, cfg.corruption, seed)?;
            let p = out.join("editing_checkpoint.bin");
            ck.save(&p)?;
            written.push(p);
            written.push(write(out, "editing.txt", &report.to_text())?);
        }
        Command::Sweep { data } => {
            let d = dataset(&cfg, data.as_deref())?;
            let points = prototype_count_sweep(&cfg.train, &d, &cfg.sweep)?;
            let mut csv = String::from("prototypes,concept_acc,task_acc,intervened_task_acc,swapped,seed\n");
            for p in &points {
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{},{}\n",
                    p.prototypes, p.concept_accuracy, p.task_accuracy, p.intervened_task_accuracy, p.swapped, seed
                ));
            }
            written.push(write(out, "sweep.csv", &csv)?);
        }
        Command::ExportTable { checkpoint } => {
            let ck = load_checkpoint(checkpoint)?;
            let snap = Snapshot::from_model(ck.model)?;
            let json = serde_json::to_string_pretty(&snap.table_json())?;
            written.push(write(out, "table.json", &json)?);
        }
        Command::Serve { .. } => bail!("serve is handled by serve()"),
    }
    Ok(written)
}

/// Serves until ctrl-c or SIGTERM, then verifies and persists the journal.
pub async fn serve(cli: &Cli) -> Result<()> {
    let Command::Serve { checkpoint, data, addr, journal } = &cli.command else { bail!("not a serve command") };
    let cfg = cli.run_config()?;
    let ck = load_checkpoint(checkpoint)?;
    let d = match data {
        Some(p) => Some(dataset(&cfg, Some(p))?),
        None => None,
    };
    let state = Arc::new(ServiceState::new(ck, d, journal.clone())?);
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown_signal()).await?;
    match state.persist()? {
        Some(p) => eprintln!("journal verified, {} entries written to {}", state.journal().len(), p.display()),
        None => eprintln!("journal verified, {} entries (not persisted: no --journal)", state.journal().len()),
    }
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
