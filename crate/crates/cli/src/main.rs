use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ifqa::assessor::{batch_assess, AssessOptions, MapStyle};
use ifqa::checkpoint::write_atomic;
use ifqa::degradation::{degrade_directory, DegradationRanges};
use ifqa::evalstats::{aggregate_rankings, benchmark, read_rankings, Pooling, ScoreFile};
use ifqa::facedata::{load_dataset, save_dataset, synth_faces};
use ifqa::studysvc::{Study, StudyConfig};
use ifqa::trainer::{fit, load_discriminator, FitOptions, StepMetrics, TrainConfig};

#[derive(Parser)]
#[command(name = "ifqa", about = "Per-pixel face realness assessment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic face dataset (images, masks, region boxes).
    Synth(SynthArgs),
    /// Degrade every image of a directory and record the parameters.
    Degrade(DegradeArgs),
    /// Train generator and discriminator.
    Train(TrainArgs),
    /// Score images with a trained discriminator.
    Assess(AssessArgs),
    /// Correlate metric scores with human rankings.
    Eval(EvalArgs),
    /// Run the ranking-study server.
    StudyServe(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    r_min: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    q_min: Option<u8>,
    #[arg(long)]
    q_max: Option<u8>,
    #[arg(long)]
    no_jpeg: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (`<id>.png`, `<id>.mask.png`, `<id>.regions.json`).
    #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Train on N synthetic faces instead.
    #[arg(long)]
    synth: Option<usize>,
    /// Flat TOML configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Dump the first mixed images and targets here.
    #[arg(long)]
    dump_fprs: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct AssessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Training checkpoint or discriminator archive.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    csv: PathBuf,
    /// Export score maps here.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long, default_value = "gray")]
    style: MapStyle,
}

#[derive(Args)]
struct EvalArgs {
    /// Ranking responses (JSONL).
    #[arg(long)]
    human: PathBuf,
    /// Metric score CSV; repeatable.
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    /// One correlation over all images instead of per-sample averages.
    #[arg(long)]
    pooled: bool,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Response log (JSONL), appended to and replayed on start.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 30)]
    target_raters: usize,
    /// Built study-ui bundle served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Present the `reference` image as well.
    #[arg(long)]
    keep_reference: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn synth(a: SynthArgs) -> Result<()> {
    let faces = synth_faces::<f32>(a.seed, a.count, a.resolution)?;
    save_dataset(&a.out, &faces)?;
    println!("wrote {} faces to {}", faces.len(), a.out.display());
    Ok(())
}

fn degrade(a: DegradeArgs) -> Result<()> {
    let mut r = DegradationRanges::default();
    r.scale = (a.r_min.unwrap_or(r.scale.0), a.r_max.unwrap_or(r.scale.1));
    r.noise_sigma = (a.sigma_min.unwrap_or(r.noise_sigma.0), a.sigma_max.unwrap_or(r.noise_sigma.1));
    r.jpeg_quality = (a.q_min.unwrap_or(r.jpeg_quality.0), a.q_max.unwrap_or(r.jpeg_quality.1));
    r.jpeg = !a.no_jpeg;
    let manifest = degrade_directory(&a.input, &a.out, a.seed, &r)?;
    println!("degraded {} images into {}", manifest.len(), a.out.display());
    Ok(())
}

static STOP: AtomicBool = AtomicBool::new(false);

/// Sets [`STOP`] on Ctrl-C; training then checkpoints and returns.
fn watch_ctrl_c() -> Result<()> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_io()
        .build()
        .context("starting the signal runtime")?;
    std::thread::spawn(move || {
        rt.block_on(async {
            if tokio::signal::ctrl_c().await.is_ok() {
                log::warn!("interrupt received; stopping after the current step");
                STOP.store(true, Ordering::SeqCst);
            }
        })
    });
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let res = cfg.net.resolution;
    let samples = match (&a.data, a.synth) {
        (Some(dir), _) => {
            let report = load_dataset::<f32>(dir, res)?;
            for e in &report.errors {
                log::warn!("{}: {}", e.id, e.reason);
            }
            if report.corrupt > 0 {
                log::warn!("{} undecodable images skipped", report.corrupt);
            }
            report.samples
        }
        (None, Some(n)) => synth_faces::<f32>(cfg.seed, n, res)?,
        (None, None) => unreachable!("clap enforces a source"),
    };
    watch_ctrl_c()?;
    let every = (cfg.steps / 20).max(1);
    let report = move |m: &StepMetrics| {
        if m.step % every == 0 {
            log::info!(
                "step {} loss_d {:.4} loss_g {:.4} (adv {:.4} pix {:.4} perc {:.4}) d_real {:.3} d_fake {:.3}",
                m.step, m.loss_d, m.loss_g, m.loss_adv, m.loss_pix, m.loss_perc, m.d_real_mean, m.d_fake_mean
            );
        }
    };
    let out = fit(
        &cfg,
        &samples,
        &a.out,
        FitOptions {
            resume: a.resume,
            stop: Some(&STOP),
            dump_fprs: a.dump_fprs,
            on_step: Some(&report),
        },
    )?;
    let state = &out.state;
    if out.stopped_early {
        println!("interrupted at step {}; checkpoint {}", state.step, out.checkpoint.display());
    } else {
        println!("trained {} steps; checkpoint {}", state.step, out.checkpoint.display());
    }
    Ok(())
}

fn assess(a: AssessArgs) -> Result<()> {
    let d = load_discriminator::<f32>(&a.ckpt)?;
    let s = batch_assess(
        &a.input,
        &d,
        &a.csv,
        &AssessOptions {
            maps: a.maps,
            style: a.style,
        },
    )?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    println!("assessed {} images ({} failed) at {}px", s.rows.len(), s.errors.len(), s.resolution);
    println!("mean quality score: {}", fmt(s.mean_qs()));
    if let Some(f) = s.mean_face_qs() {
        println!("mean face-region score (extension): {f:.4}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (records, bad) = read_rankings(&a.human)?;
    for (line, why) in &bad {
        log::warn!("{}:{line}: {why}", a.human.display());
    }
    let (human, rejected) = aggregate_rankings(&records);
    for (s, why) in &rejected {
        log::warn!("sample {s}: {why}");
    }
    if human.is_empty() {
        return Err(ifqa::Error::EmptyScope("no usable human rankings".into()).into());
    }
    let metrics = a.scores.iter().map(|p| ScoreFile::load(p)).collect::<ifqa::Result<Vec<_>>>()?;
    let pooling = if a.pooled { Pooling::Pooled } else { Pooling::PerSample };
    let table = benchmark(&human, &metrics, pooling);
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        write_atomic(out, table.to_csv().as_bytes())?;
    }
    Ok(())
}

fn study_serve(a: ServeArgs) -> Result<()> {
    let study = Study::open(StudyConfig {
        samples_root: a.samples,
        log_path: a.out,
        target_raters: a.target_raters,
        exclude_reference: !a.keep_reference,
        seed: a.seed,
    })?;
    let app = ifqa_server::router(study, a.static_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        println!("listening on http://{}", listener.local_addr()?);
        ifqa_server::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var("IFQA_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| ifqa::Error::Config(format!("IFQA_NUM_WORKERS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    configure_workers()?;
    match cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Degrade(a) => degrade(a),
        Cmd::Train(a) => train(a),
        Cmd::Assess(a) => assess(a),
        Cmd::Eval(a) => eval(a),
        Cmd::StudyServe(a) => study_serve(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .find_map(|e| e.downcast_ref::<ifqa::Error>())
        .is_some_and(ifqa::Error::is_validation);
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let version: &'static str = Box::leak(
        format!("{} (checkpoint format {})", env!("CARGO_PKG_VERSION"), ifqa::FORMAT_VERSION).into_boxed_str(),
    );
    let matches = match Cli::command().version(version).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
