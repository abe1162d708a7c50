//! `bbm` — the Billboard Manager command line.

use anyhow::{bail, Context, Result};
use bbm_core::config::{load_service_config, parse_node_roster, parse_profile_roster};
use bbm_core::gateway::Gateway;
use bbm_core::media::encode_container;
use bbm_core::server;
use bbm_core::sim::{
    compare_runs, run_simulation, synthesize_asset, RunOptions, SimConfig, SimReport, VideoSpec,
};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "bbm",
    about = "Billboard Manager: caching/transcoding video gateway and its simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the live gateway service.
    Serve {
        /// key=value service config file
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one deterministic simulation and write its report.
    Simulate {
        /// simulation config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// report output path (JSON)
        #[arg(long)]
        out: Option<PathBuf>,
        /// event log output path (newline-delimited JSON)
        #[arg(long)]
        log: Option<PathBuf>,
        /// baseline mode: disable the cache and request coalescing
        #[arg(long)]
        no_cache: bool,
    },
    /// Compare two simulation reports of the same workload.
    Compare { a: PathBuf, b: PathBuf },
    /// Generate a synthetic video catalog (and optionally container files).
    GenCatalog {
        #[arg(long)]
        videos: u32,
        #[arg(long)]
        seed: u64,
        /// catalog JSON output (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// also write one .bbmv container per video into this directory
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve { config } => serve(&config),
        Command::Simulate {
            config,
            out,
            log,
            no_cache,
        } => simulate(&config, out.as_deref(), log.as_deref(), no_cache),
        Command::Compare { a, b } => compare(&a, &b),
        Command::GenCatalog {
            videos,
            seed,
            out,
            dir,
        } => gen_catalog(videos, seed, out.as_deref(), dir.as_deref()),
    }
}

fn serve(config: &Path) -> Result<()> {
    let cfg = load_service_config(config)?;
    let gateway = Arc::new(Gateway::new(cfg.gateway.clone()));

    if let Some(path) = &cfg.profile_roster {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("profile roster {}", path.display()))?;
        for profile in parse_profile_roster(&text, &path.display().to_string())? {
            gateway.add_profile(profile);
        }
    }
    if let Some(path) = &cfg.node_roster {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("node roster {}", path.display()))?;
        let roster = parse_node_roster(&text, &path.display().to_string())?;
        server::bootstrap_registry(&gateway, &roster);
    }

    let listener =
        TcpListener::bind(&cfg.listen).with_context(|| format!("binding {}", cfg.listen))?;
    server::serve(gateway, listener);
    Ok(())
}

fn simulate(config: &Path, out: Option<&Path>, log: Option<&Path>, no_cache: bool) -> Result<()> {
    let text =
        std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: SimConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let run = run_simulation(&cfg, &RunOptions { no_cache })?;

    if let Some(path) = log {
        let mut f =
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        for line in &run.events {
            writeln!(f, "{line}")?;
        }
    }
    let report = serde_json::to_string_pretty(&run.report)?;
    match out {
        Some(path) => {
            std::fs::write(path, format!("{report}\n"))
                .with_context(|| format!("writing {}", path.display()))?;
            log::info!("report written to {}", path.display());
        }
        None => println!("{report}"),
    }
    eprintln!(
        "requests={} hits={} misses={} not_found={} origin_bytes={} client_bytes={} saved_ratio={:.3}",
        run.report.requests,
        run.report.cache_hits,
        run.report.cache_misses,
        run.report.not_found,
        run.report.origin_bytes,
        run.report.client_bytes,
        run.report.bandwidth_saved_ratio,
    );
    Ok(())
}

fn compare(a: &Path, b: &Path) -> Result<()> {
    let read = |p: &Path| -> Result<SimReport> {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    };
    let ra = read(a)?;
    let rb = read(b)?;
    let rows = compare_runs(&ra, &rb)?;
    println!(
        "{:<28} {:>16} {:>16} {:>16}",
        "metric",
        a.file_name().and_then(|s| s.to_str()).unwrap_or("a"),
        b.file_name().and_then(|s| s.to_str()).unwrap_or("b"),
        "delta (a-b)"
    );
    for row in &rows {
        println!(
            "{:<28} {:>16.3} {:>16.3} {:>16.3}",
            row.metric, row.a, row.b, row.delta
        );
    }
    let saved = rb.origin_bytes as i128 - ra.origin_bytes as i128;
    println!("\norigin bytes saved by a over b: {saved}");
    Ok(())
}

fn gen_catalog(videos: u32, seed: u64, out: Option<&Path>, dir: Option<&Path>) -> Result<()> {
    if videos == 0 {
        bail!("--videos must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::new();
    for i in 0..videos {
        // CIF originals sized around 5 MB, frame rates from the usual set.
        let fps = [15u8, 24, 30][rng.gen_range(0..3)];
        let frame_count = rng.gen_range(25..=40);
        specs.push(VideoSpec {
            id: format!("v{i:03}"),
            codec_id: 1,
            width: 352,
            height: 288,
            fps,
            frame_count,
        });
    }
    let catalog = serde_json::json!({ "seed": seed, "videos": specs });
    let text = serde_json::to_string_pretty(&catalog)?;
    match out {
        Some(path) => std::fs::write(path, format!("{text}\n"))?,
        None => println!("{text}"),
    }

    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        for spec in &specs {
            let asset = synthesize_asset(spec, seed);
            let path = dir.join(format!("{}.bbmv", spec.id));
            std::fs::write(&path, encode_container(&asset))?;
        }
        log::info!("wrote {} containers to {}", specs.len(), dir.display());
    }
    Ok(())
}
