//! `semcom`: dataset generation, staged training, evaluation sweeps, plots and
//! BER sweeps from one experiment config.
//!
//! Output root layout (`--out`, `SEMCOM_OUT`, default `runs/default`):
//!
//! ```text
//! data/                     dataset.json + train/val/test.jsonl
//! run/                      checkpoints/stage<N>/..., train_log.jsonl
//! results/metrics.jsonl     MetricsRow records (appended)
//! results/metrics.csv       CSV of metrics.jsonl
//! results/ablation.jsonl    lossless CR ablation
//! results/detections.jsonl  per-scene detections of the last eval
//! results/ber.jsonl         BER sweep points
//! plots/                    SVG figures and the CSV they were drawn from
//! manifests/                one RunManifest per command
//! ```

mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semcom_core::channel::ChannelKind;
use semcom_core::classic::measure_ber;
use semcom_core::config::ExperimentConfig;
use semcom_core::dataset::{derive_seed, generate_dataset, load_split, write_dataset, DatasetMeta, Split};
use semcom_core::evaluation::{
    ablation, append_jsonl, cache_scenes, evaluate, export_detections, read_jsonl, write_csv, MetricsRow,
};
use semcom_core::manifest::RunManifest;
use semcom_core::pipeline::{perceive, prepare, Scheme};
use semcom_core::training::{final_checkpoint, load_stage, log_path, stage_dir, train_stage, TrainData};
use semcom_core::Error;

#[derive(Parser)]
#[command(name = "semcom", version, about = "Task-oriented semantic communication simulator for collaborative perception")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "SEMCOM_SEED")]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = "SEMCOM_OUT", default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData,
    /// Run one training stage (0 bootstraps perception, 1-3 follow the staged schedule).
    Train {
        #[arg(long)]
        stage: u8,
        /// Continue from the stage's latest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// SNR sweep of the configured schemes on the test split.
    Eval {
        /// Comma-separated SNRs in dB.
        #[arg(long, value_delimiter = ',')]
        snr: Option<Vec<f64>>,
        /// Channels to sweep: awgn, rayleigh.
        #[arg(long, value_delimiter = ',')]
        channel: Option<Vec<ChannelKind>>,
        /// Schemes: scomcp, classic16, classic256, ego_only, upper_bound.
        #[arg(long, value_delimiter = ',')]
        scheme: Option<Vec<Scheme>>,
        /// Also run the lossless CR ablation.
        #[arg(long)]
        ablation: bool,
    },
    /// Figures from the results files.
    Plot,
    /// Post-FEC and uncoded BER over AWGN.
    BaselineBer {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0])]
        snr: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        modulation: u32,
        #[arg(long, default_value_t = 100_000)]
        bits: usize,
    },
}

/// Exit status per error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Toml(_) => 2,
        Error::Io { .. } | Error::Json { .. } => 3,
        Error::StageOrder { .. } => 4,
        Error::Checkpoint { .. } => 5,
        Error::Contract(_) | Error::Placement { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Paths {
    out: PathBuf,
}

impl Paths {
    fn data(&self) -> PathBuf {
        self.out.join("data")
    }
    fn run(&self) -> PathBuf {
        self.out.join("run")
    }
    fn results(&self) -> PathBuf {
        self.out.join("results")
    }
    fn plots(&self) -> PathBuf {
        self.out.join("plots")
    }
    fn manifests(&self) -> PathBuf {
        self.out.join("manifests")
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli.common)?;
    let paths = Paths {
        out: cli.common.out.clone(),
    };
    match cli.cmd {
        Cmd::GenData => gen_data(&cfg, &paths),
        Cmd::Train { stage, resume } => train(&cfg, &paths, stage, resume),
        Cmd::Eval {
            snr,
            channel,
            scheme,
            ablation,
        } => {
            if let Some(v) = snr {
                cfg.eval.snr_db = v;
            }
            if let Some(v) = channel {
                cfg.eval.channels = v;
            }
            if let Some(v) = scheme {
                cfg.eval.schemes = v;
            }
            eval(&cfg, &paths, ablation)
        }
        Cmd::Plot => plot_cmd(&cfg, &paths),
        Cmd::BaselineBer { snr, modulation, bits } => ber(&cfg, &paths, &snr, modulation, bits),
    }
}

fn gen_data(cfg: &ExperimentConfig, p: &Paths) -> Result<(), Error> {
    let mut m = RunManifest::start("gen-data", cfg);
    let records = generate_dataset(cfg.seed, &cfg.data, &cfg.scene, &cfg.sensor)?;
    let meta = DatasetMeta {
        seed: cfg.seed,
        n_scenes: records.len(),
        split_sizes: cfg.data.split_sizes()?,
        scene: cfg.scene.clone(),
        sensor: cfg.sensor.clone(),
    };
    write_dataset(&p.data(), &meta, &records)?;
    m.add(p.data().join("dataset.json"));
    for s in Split::ALL {
        m.add(p.data().join(format!("{}.jsonl", s.name())));
    }
    let path = m.finish(&p.manifests())?;
    println!(
        "wrote {} scenes (train/val/test {:?}) to {}; manifest {}",
        records.len(),
        meta.split_sizes,
        p.data().display(),
        path.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, p: &Paths, stage: u8, resume: bool) -> Result<(), Error> {
    let mut m = RunManifest::start(&format!("train-stage{stage}"), cfg);
    let data = TrainData::load(&p.data(), cfg)?;
    let report = train_stage(&p.run(), stage, cfg, &data, resume)?;
    for l in &report.logs {
        println!(
            "stage {} epoch {} lr {:.2e} loss {:.5} cls {:.5} reg {:.5} val {:.5}{}{}",
            l.stage,
            l.epoch,
            l.lr,
            l.loss,
            l.cls,
            l.reg,
            l.val_loss,
            l.mse.map_or(String::new(), |v| format!(" mse {v:.5}")),
            l.mean_k.map_or(String::new(), |v| format!(" k {v:.1}")),
        );
    }
    m.add(stage_dir(&p.run(), stage));
    m.add(log_path(&p.run()));
    m.finish(&p.manifests())?;
    println!("stage {stage} done: {}", final_checkpoint(&p.run(), stage).display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, p: &Paths, with_ablation: bool) -> Result<(), Error> {
    let mut m = RunManifest::start("eval", cfg);
    let model = load_stage(&p.run(), 3)?;
    let test: Vec<_> = load_split(&p.data(), Split::Test)?
        .iter()
        .map(|r| prepare(r, &model.grid))
        .collect::<Result<_, _>>()?;
    let rows = evaluate(&model, cfg, &test)?;
    let jsonl = p.results().join("metrics.jsonl");
    append_jsonl(&jsonl, &rows)?;
    let all: Vec<MetricsRow> = read_jsonl(&jsonl)?;
    let csv = p.results().join("metrics.csv");
    write_csv(&csv, &all)?;
    for r in &rows {
        println!(
            "{:<12} {:<8} {:>5.1} dB seed {:<3} cr {:.4} uses {:>8.1} AP50 {:.4} AP70 {:.4}",
            r.scheme.name(),
            r.channel.name(),
            r.snr_db,
            r.seed,
            r.cr,
            r.channel_uses,
            r.ap50,
            r.ap70
        );
    }
    // Lossless upper-bound detections for inspection and plotting.
    let cache = cache_scenes(&model, &test)?;
    let dets = cache
        .iter()
        .map(|c| perceive(&model, &c.m_e, &c.m_j.values, model.cfg.perception.score_thr))
        .collect::<Result<Vec<_>, _>>()?;
    let det_path = p.results().join("detections.jsonl");
    if det_path.exists() {
        std::fs::remove_file(&det_path).map_err(|source| Error::Io {
            path: det_path.clone(),
            source,
        })?;
    }
    let ids: Vec<usize> = cache.iter().map(|c| c.id).collect();
    export_detections(&det_path, &ids, &dets)?;
    m.add(&jsonl);
    m.add(&csv);
    m.add(&det_path);
    if with_ablation {
        let rows = ablation(&model, cfg, &test)?;
        let path = p.results().join("ablation.jsonl");
        append_jsonl(&path, &rows)?;
        for r in &rows {
            println!("ablation {:?} cr {:.4} AP50 {:.4} AP70 {:.4}", r.method, r.cr, r.ap50, r.ap70);
        }
        m.add(path);
    }
    m.finish(&p.manifests())?;
    Ok(())
}

fn plot_cmd(cfg: &ExperimentConfig, p: &Paths) -> Result<(), Error> {
    let mut m = RunManifest::start("plot", cfg);
    let jsonl = p.results().join("metrics.jsonl");
    let rows: Vec<MetricsRow> = if jsonl.exists() { read_jsonl(&jsonl)? } else { Vec::new() };
    let abl_path = p.results().join("ablation.jsonl");
    let abl = if abl_path.exists() { read_jsonl(&abl_path)? } else { Vec::new() };
    if rows.is_empty() && abl.is_empty() {
        eprintln!("warning: no results under {}; nothing to plot", p.results().display());
        return Ok(());
    }
    for f in plot::render(&rows, &abl, &p.plots())? {
        println!("wrote {}", f.display());
        m.add(f);
    }
    m.finish(&p.manifests())?;
    Ok(())
}

fn ber(cfg: &ExperimentConfig, p: &Paths, snrs: &[f64], modulation: u32, bits: usize) -> Result<(), Error> {
    let mut m = RunManifest::start("baseline-ber", cfg);
    let mut points = Vec::new();
    for (i, &snr) in snrs.iter().enumerate() {
        for coded in [true, false] {
            let seed = derive_seed(cfg.seed, 70_000 + 2 * i as u64 + coded as u64);
            let pt = measure_ber(modulation, coded, snr, bits, seed)?;
            println!(
                "{}QAM {} {:>5.1} dB  BER {:.3e} ({} / {})",
                modulation,
                if coded { "coded  " } else { "uncoded" },
                snr,
                pt.ber,
                pt.errors,
                pt.bits
            );
            points.push(pt);
        }
    }
    let path = p.results().join("ber.jsonl");
    append_jsonl(&path, &points)?;
    m.add(path);
    m.finish(&p.manifests())?;
    Ok(())
}
