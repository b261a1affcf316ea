//! `sarcd`: detect changes between two co-registered SAR images, generate
//! synthetic test pairs, and score change maps against ground truth.
//!
//! Every run lands in its own directory (timestamped unless `--out` is
//! given) holding the outputs plus a manifest with input hashes, the fully
//! resolved parameter set, and the seed, which together reproduce the run
//! bit for bit.
//!
//! Exit codes: 1 for I/O and file-format problems, 2 for invalid
//! parameters, dimension mismatches, or non-binary label maps, 3 when
//! clustering degenerates and the pipeline cannot continue.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use sarcd_core::imaging::{self, PgmDepth};
use sarcd_core::metrics;
use sarcd_core::pipeline::{self, ConfigFile, PipelineConfig, RunLog, RunOutput, RunReport};
use sarcd_core::synthgen::{self, SceneSpec};
use sarcd_core::{Error, Result, Scalar};

/// Environment variable consulted for the pipeline config when `--config`
/// is absent.
const CONFIG_ENV: &str = "SARCD_CONFIG";

#[derive(Parser)]
#[command(name = "sarcd", version, about = "Change detection for co-registered SAR image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speckled image pair with ground truth.
    Synth {
        /// Scene description (TOML).
        spec: PathBuf,
        /// Output directory; defaults to run-<timestamp>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the two-phase detection pipeline on an image pair.
    Run {
        /// First-time image (PGM).
        #[arg(long)]
        i1: PathBuf,
        /// Second-time image (PGM), same dimensions.
        #[arg(long)]
        i2: PathBuf,
        /// Pipeline configuration (TOML); falls back to $SARCD_CONFIG,
        /// then to built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to run-<timestamp>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after phase 1 and emit its coarse map.
        #[arg(long)]
        phase1_only: bool,
        /// Also write every intermediate raster into this directory.
        #[arg(long)]
        debug_dir: Option<PathBuf>,
        /// Overrides the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Caps the worker thread count.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a predicted change map against ground truth.
    Eval {
        /// Predicted binary map (PGM, 0/255).
        pred: PathBuf,
        /// Ground-truth binary map (PGM, 0/255).
        truth: PathBuf,
        /// Directory for report.txt; defaults to run-<timestamp>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, out),
        Command::Run { i1, i2, config, out, phase1_only, debug_dir, seed, threads } => {
            cmd_run(&i1, &i2, config, out, phase1_only, debug_dir, seed, threads)
        }
        Command::Eval { pred, truth, out } => cmd_eval(&pred, &truth, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format { .. } => 1,
        Error::DimensionMismatch { .. }
        | Error::InvalidParameter { .. }
        | Error::NonBinaryLabel { .. } => 2,
        Error::DegenerateClustering(_) => 3,
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Creates and returns the run directory: `out` if given, else a
/// timestamped one under the working directory.
fn run_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| PathBuf::from(format!("run-{}", unix_now())));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

fn stamp(manifest: &mut RunReport, command: &str) {
    manifest.put("run", "command", command);
    manifest.put("run", "tool_version", env!("CARGO_PKG_VERSION"));
    manifest.put("run", "created_unix", unix_now());
}

fn cmd_synth(spec_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let spec = SceneSpec::from_path(spec_path)?;
    let (i1, i2, truth) = synthgen::generate::<Scalar>(&spec)?;
    let dir = run_dir(out)?;
    imaging::save_pgm(&i1, dir.join("I1.pgm"), PgmDepth::Sixteen)?;
    imaging::save_pgm(&i2, dir.join("I2.pgm"), PgmDepth::Sixteen)?;
    imaging::save_binary_pgm(&truth, dir.join("truth.pgm"))?;

    let mut m = RunReport::default();
    stamp(&mut m, "synth");
    m.put("inputs", "spec", spec_path.display());
    m.put("inputs", "spec_sha256", sha256_file(spec_path)?);
    m.put("scene", "width", spec.width);
    m.put("scene", "height", spec.height);
    m.put("scene", "looks", spec.looks);
    m.put("scene", "background_amplitude", spec.background_amplitude);
    m.put("scene", "regions", spec.regions.len());
    m.put("scene", "changes", spec.changes.len());
    m.put("scene", "spike_fraction", spec.spike_fraction);
    m.put("scene", "seed", spec.seed);
    for name in ["I1.pgm", "I2.pgm", "truth.pgm"] {
        m.put("outputs", &format!("{name}_sha256"), sha256_file(&dir.join(name))?);
    }
    m.put("timings", "seconds_total", format!("{:.2}", started.elapsed().as_secs_f64()));
    fs::write(dir.join("manifest.txt"), m.render())?;

    println!(
        "wrote {}x{} pair and truth to {}",
        spec.width,
        spec.height,
        dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    i1_path: &Path,
    i2_path: &Path,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    phase1_only: bool,
    debug_dir: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<()> {
    let started = Instant::now();
    let (i1, _) = imaging::load_pgm::<Scalar>(i1_path)?;
    let (i2, _) = imaging::load_pgm::<Scalar>(i2_path)?;

    let config_path = config.or_else(|| env::var_os(CONFIG_ENV).map(PathBuf::from));
    let file = match &config_path {
        Some(p) => ConfigFile::from_path(p)?,
        None => ConfigFile::default(),
    };
    let (mut cfg, resolved) = PipelineConfig::resolve(&file, i1.width(), i1.height())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for w in &resolved.warnings {
        eprintln!("warning: {w}");
    }

    let mut output: RunOutput<Scalar> = pipeline::with_thread_cap(threads, || {
        if phase1_only {
            let mut log = RunLog::default();
            pipeline::report_parameters(&cfg, &mut log.report);
            pipeline::run_phase1(&i1, &i2, &cfg, &mut log).map(|phase1| {
                let final_map = phase1.map.clone();
                log.report.put("result", "pixels_changed", final_map.count_of(1));
                RunOutput { phase1, phase2: None, final_map, log }
            })
        } else {
            pipeline::run_full(&i1, &i2, &cfg)
        }
    })??;
    for w in &output.log.warnings {
        eprintln!("warning: {w}");
    }

    for line in &resolved.defaults {
        match line.split_once(" = ") {
            Some((key, value)) => output.log.report.put("defaults", key, value),
            None => output.log.report.put("defaults", "note", line),
        }
    }
    for (i, w) in resolved.warnings.iter().enumerate() {
        output.log.report.put("warnings", &format!("config_warning_{i}"), w);
    }

    let dir = run_dir(out)?;
    imaging::save_binary_pgm(&output.final_map, dir.join("change.pgm"))?;
    imaging::save_binary_png(&output.final_map, dir.join("change.png"))?;
    fs::write(dir.join("report.txt"), output.log.report.render())?;
    if let Some(d) = &debug_dir {
        pipeline::export_debug(&output, &i1, &i2, d)?;
    }

    let mut m = RunReport::default();
    stamp(&mut m, "run");
    m.put("run", "phase1_only", phase1_only);
    m.put("run", "threads", threads.map_or("all".to_string(), |t| t.to_string()));
    m.put("inputs", "i1", i1_path.display());
    m.put("inputs", "i1_sha256", sha256_file(i1_path)?);
    m.put("inputs", "i2", i2_path.display());
    m.put("inputs", "i2_sha256", sha256_file(i2_path)?);
    match &config_path {
        Some(p) => {
            m.put("inputs", "config", p.display());
            m.put("inputs", "config_sha256", sha256_file(p)?);
        }
        None => m.put("inputs", "config", "builtin defaults"),
    }
    m.put("inputs", "seed", cfg.seed);
    if seed.is_some() {
        m.put("inputs", "seed_source", "--seed flag");
    }
    pipeline::report_parameters(&cfg, &mut m);
    m.put("outputs", "change.pgm_sha256", sha256_file(&dir.join("change.pgm"))?);
    m.put("outputs", "change.png_sha256", sha256_file(&dir.join("change.png"))?);
    m.put("timings", "seconds_total", format!("{:.2}", started.elapsed().as_secs_f64()));
    fs::write(dir.join("manifest.txt"), m.render())?;

    println!(
        "{} of {} pixels changed; outputs in {}",
        output.final_map.count_of(1),
        output.final_map.width() * output.final_map.height(),
        dir.display()
    );
    Ok(())
}

fn cmd_eval(pred_path: &Path, truth_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let pred = imaging::load_binary_pgm(pred_path)?;
    let truth = imaging::load_binary_pgm(truth_path)?;
    let report = metrics::evaluate(&truth, &pred)?;
    let text = report.render();
    print!("{text}");
    let dir = run_dir(out)?;
    fs::write(dir.join("report.txt"), &text)?;
    Ok(())
}
