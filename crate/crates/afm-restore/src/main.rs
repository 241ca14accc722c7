use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use afm_core::flatten::FlattenDirection;
use afm_core::restore::RestoreMethod;
use afm_core::spm_io::{write_mask_txt, write_txt_matrix};
use afm_core::synth::{generate_preset, Preset};
use afm_core::Connectivity;
use afm_restore::batch::run_batch;
use afm_restore::service::{router, router_with_static};
use afm_restore::session::SessionStore;
use afm_restore::RunConfig;
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Artifact detection, flattening and restoration for AFM height maps.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify and restore every image in a directory.
    Batch(BatchArgs),
    /// Write a synthetic corpus with ground-truth masks.
    Synth(SynthArgs),
    /// Serve the HTTP API (and optionally the web console).
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    Row,
    Column,
    Both,
    Auto,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Directional,
    FastMarching,
    Bilinear,
    Kriging,
}

#[derive(Args, Debug)]
struct BatchArgs {
    input: PathBuf,
    output: PathBuf,
    /// JSON config; defaults to $AFM_RESTORE_CONFIG when set.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    thr: Option<f64>,
    #[arg(long)]
    win: Option<usize>,
    #[arg(long)]
    lam: Option<f64>,
    #[arg(long)]
    min_pix: Option<usize>,
    #[arg(long)]
    max_pix: Option<usize>,
    #[arg(long)]
    ar: Option<f64>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    region: Option<usize>,
    #[arg(long)]
    grad: Option<f64>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
    #[arg(long)]
    order: Option<u8>,
    #[arg(long)]
    mask_aware: Option<bool>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Restore every image instead of exporting Good ones unchanged.
    #[arg(long)]
    no_classify: bool,
    /// 4 or 8.
    #[arg(long)]
    connectivity: Option<u8>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    output: PathBuf,
    #[arg(long, default_value = "stripes")]
    preset: Preset,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory of web console assets served for non-API paths.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Persist sessions under this directory and reload them on start.
    #[arg(long)]
    session_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

impl BatchArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref())?;
        let p = &mut cfg.params;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { p.$f = v; })* };
        }
        set!(thr, win, lam, min_pix, ar, k, region, radius);
        if self.max_pix.is_some() {
            p.max_pix = self.max_pix;
        }
        if self.grad.is_some() {
            p.grad = self.grad;
        }
        if let Some(d) = self.direction {
            cfg.flatten.direction = match d {
                DirectionArg::Row => FlattenDirection::Row,
                DirectionArg::Column => FlattenDirection::Column,
                DirectionArg::Both => FlattenDirection::Both,
                DirectionArg::Auto => FlattenDirection::Auto,
            };
        }
        if let Some(o) = self.order {
            cfg.flatten.order = o;
        }
        if let Some(m) = self.mask_aware {
            cfg.flatten.mask_aware = m;
        }
        if let Some(m) = self.method {
            cfg.restore.method = match m {
                MethodArg::Directional => RestoreMethod::Directional,
                MethodArg::FastMarching => RestoreMethod::FastMarching,
                MethodArg::Bilinear => RestoreMethod::Bilinear,
                MethodArg::Kriging => RestoreMethod::Kriging,
            };
        }
        if self.no_classify {
            cfg.classify = false;
        }
        if let Some(c) = self.connectivity {
            cfg.connectivity = match c {
                4 => Connectivity::Four,
                8 => Connectivity::Eight,
                other => bail!("--connectivity must be 4 or 8, got {other}"),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn batch(args: &BatchArgs) -> anyhow::Result<ExitCode> {
    let cfg = args.config()?;
    let report = run_batch(&args.input, &args.output, &cfg)?;
    println!(
        "{} images: {} restored, {} exported unchanged, {} failed",
        report.total,
        report.ok - report.exported_unchanged,
        report.exported_unchanged,
        report.failed
    );
    for (name, s) in &report.aggregate {
        println!("  {name}: {:.4} ± {:.4} (n={})", s.mean, s.std, s.n);
    }
    Ok(if report.has_errors() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(args: &SynthArgs) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let samples = generate_preset(args.preset, args.count, args.size, args.seed)?;
    let mut manifest = Vec::new();
    for s in &samples {
        let map = s.map.clone().with_source_id(s.name.clone());
        write(&args.output.join(format!("{}.txt", s.name)), &write_txt_matrix(&map))?;
        write(&args.output.join(format!("{}.clean.txt", s.name)), &write_txt_matrix(&s.clean))?;
        write(&args.output.join(format!("{}.truth.txt", s.name)), &write_mask_txt(&s.truth))?;
        manifest.push(serde_json::json!({ "name": s.name, "injections": s.records }));
    }
    write(
        &args.output.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {} samples to {}", samples.len(), args.output.display());
    Ok(ExitCode::SUCCESS)
}

async fn serve(args: &ServeArgs) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::resolve(args.config.as_deref())?;
    let store = match &args.session_dir {
        Some(dir) => SessionStore::with_persistence(cfg, dir)?,
        None => SessionStore::new(cfg),
    };
    let store = Arc::new(store);
    let app = match &args.static_dir {
        Some(dir) => router_with_static(store, dir),
        None => router(store),
    };
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Batch(a) => batch(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => tokio::runtime::Runtime::new()
            .context("starting runtime")
            .and_then(|rt| rt.block_on(serve(a))),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
