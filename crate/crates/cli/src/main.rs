//! `shadoc`: synthesize data, detect masks, train, remove shadows, evaluate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use shadoc::dataio::{load_image, png_stems, save_image, synth_batch, write_dataset, Dataset, SynthConfig};
use shadoc::detection::{load_mask, otsu_detect, save_mask};
use shadoc::jobs::map_jobs;
use shadoc::metrics::{evaluate_dirs, ReportMeta, TextDirs};
use shadoc::pipeline::{train, Checkpoint, MaskSource, Model};
use toml::Value;

#[derive(Parser)]
#[command(name = "shadoc", version, about = "Document shadow removal, coarse to fine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic (input, target, mask) triplets.
    Synth(SynthArgs),
    /// Write Otsu shadow masks for one image or a directory.
    Detect(DetectArgs),
    /// Train a model and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Remove shadows with a trained checkpoint.
    Remove(RemoveArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Blur of the shadow edge in pixels.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long)]
    smin: Option<f64>,
    #[arg(long)]
    smax: Option<f64>,
    /// Image sides must be multiples of this.
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    /// A PNG file or a directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training settings; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set adam.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset root with input/, target/ and mask/ directories.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint, loss log and snapshots.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct RemoveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// A mask PNG, or a directory of masks matched by stem. Images without a
    /// mask use the detector.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the coarse stage; outputs become `{stem}_coarse.png` and
    /// `{stem}_final.png`.
    #[arg(long)]
    save_coarse: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, requires = "gt_text")]
    pred_text: Option<PathBuf>,
    #[arg(long, requires = "pred_text")]
    gt_text: Option<PathBuf>,
    /// CSV report path; a JSON copy is written next to it.
    #[arg(long)]
    report: PathBuf,
    /// Checkpoint recorded in the report metadata.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Train(a) => cmd_train(a),
        Command::Remove(a) => cmd_remove(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    count: usize,
    config: &'a SynthConfig,
    samples: BTreeMap<String, f64>,
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        height: a.size,
        width: a.size,
        patch_size: a.patch.unwrap_or(defaults.patch_size),
        s_min: a.smin.unwrap_or(defaults.s_min),
        s_max: a.smax.unwrap_or(defaults.s_max),
        sigma: a.sigma,
        seed: a.seed,
        ..defaults
    };
    cfg.validate().map_err(usage)?;
    if a.count == 0 {
        return Err(usage(anyhow!("--count must be at least 1")));
    }
    let items = synth_batch(&cfg, a.count)?;
    let attenuation: Vec<f64> = items.iter().map(|s| s.attenuation).collect();
    let ds = Dataset::from_synthesized(items);
    write_dataset(&a.out, &ds.samples)?;
    let manifest = Manifest {
        count: a.count,
        config: &cfg,
        samples: ds.samples.iter().map(|s| s.stem.clone()).zip(attenuation).collect(),
    };
    let path = a.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} triplets to {}", a.count, a.out.display());
    Ok(())
}

/// `(stem, path)` for a single PNG or every PNG in a directory.
fn collect_inputs(input: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let stems = png_stems(input)?;
        if stems.is_empty() {
            bail!("no PNG files in {}", input.display());
        }
        Ok(stems
            .into_iter()
            .map(|s| {
                let p = input.join(format!("{s}.png"));
                (s, p)
            })
            .collect())
    } else if input.is_file() {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("{} has no usable file name", input.display()))?;
        Ok(vec![(stem.to_owned(), input.to_path_buf())])
    } else {
        bail!("{} does not exist", input.display())
    }
}

fn cmd_detect(a: DetectArgs) -> CmdResult {
    let inputs = collect_inputs(&a.input).map_err(usage)?;
    let out = &a.out;
    map_jobs(&inputs, a.jobs, |(stem, path)| {
        let img = load_image(path)?;
        save_mask(&otsu_detect(&img), out.join(format!("{stem}.png")))
    })?;
    println!("wrote {} masks to {}", inputs.len(), out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut table = match &a.config {
        Some(p) => config::read_table(p).map_err(usage)?,
        None => toml::Table::new(),
    };
    let mut sets = Vec::new();
    for s in &a.overrides {
        sets.push(config::parse_assignment(s).map_err(usage)?);
    }
    let path_value = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
    let flags = [
        ("data_root", a.data.as_ref().map(path_value)),
        ("output_dir", a.out.as_ref().map(path_value)),
        ("steps", a.steps.map(|v| Value::Integer(v as i64))),
        ("batch_size", a.batch_size.map(|v| Value::Integer(v as i64))),
        ("adam.lr", a.lr.map(Value::Float)),
        ("seed", a.seed.map(|v| Value::Integer(v as i64))),
        ("checkpoint_every", a.checkpoint_every.map(|v| Value::Integer(v as i64))),
        ("jobs", a.jobs.map(|v| Value::Integer(v as i64))),
    ];
    sets.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_owned(), v))));
    for (k, v) in sets {
        config::set_path(&mut table, &k, v).map_err(usage)?;
    }
    let cfg = config::build(table).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    if a.print_config {
        print!("{}", config::to_toml(&cfg));
        return Ok(());
    }

    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let effective = cfg.output_dir.join("config.toml");
    fs::write(&effective, config::to_toml(&cfg)).with_context(|| format!("writing {}", effective.display()))?;
    let outcome = train(&cfg)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} steps, final loss {:.5} (pixel {:.5}, phi {:.5})",
            last.step, last.loss_total, last.loss_pixel, last.loss_phi
        );
    }
    println!("checkpoint {}", outcome.checkpoint_path.display());
    println!("loss log {}", outcome.log_path.display());
    Ok(())
}

fn cmd_remove(a: RemoveArgs) -> CmdResult {
    let inputs = collect_inputs(&a.input).map_err(usage)?;
    let model: Model<f32> = Checkpoint::load(&a.ckpt)?.to_model()?;
    let mask_dir = a.mask.as_ref().filter(|m| m.is_dir());
    if let Some(m) = a.mask.as_ref().filter(|m| !m.exists()) {
        return Err(usage(anyhow!("mask path {} does not exist", m.display())));
    }
    let out = &a.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let results = map_jobs(&inputs, a.jobs, |(stem, path)| {
        let run = || -> anyhow::Result<MaskSource> {
            let img = load_image(path)?;
            let mask_path = match (&a.mask, mask_dir) {
                (_, Some(dir)) => Some(dir.join(format!("{stem}.png"))).filter(|p| p.is_file()),
                (Some(file), None) => Some(file.clone()),
                (None, None) => None,
            };
            let mask = mask_path.map(|p| load_mask(p, img.size())).transpose()?;
            let result = model.infer(&img, mask.as_ref())?;
            if a.save_coarse {
                save_image(&result.i1, out.join(format!("{stem}_coarse.png")))?;
                save_image(&result.i2, out.join(format!("{stem}_final.png")))?;
            } else {
                save_image(&result.i2, out.join(format!("{stem}.png")))?;
            }
            Ok(result.mask_source)
        };
        Ok(run())
    })?;

    let mut failed = 0;
    for ((stem, _), r) in inputs.iter().zip(results) {
        match r {
            Ok(MaskSource::File) => log::info!("{stem}: mask from file"),
            Ok(MaskSource::Detector) => log::info!("{stem}: mask from detector"),
            Err(e) => {
                failed += 1;
                log::error!("{stem}: {e:#}");
            }
        }
    }
    println!("processed {} of {} images into {}", inputs.len() - failed, inputs.len(), out.display());
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} image(s) failed")));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    for dir in [&a.pred, &a.gt] {
        if !dir.is_dir() {
            return Err(usage(anyhow!("{} is not a directory", dir.display())));
        }
    }
    let text = match (a.pred_text, a.gt_text) {
        (Some(pred), Some(gt)) => Some(TextDirs { pred, gt }),
        _ => None,
    };
    let meta = ReportMeta::new(
        a.gt.display().to_string(),
        a.ckpt.map(|p| p.display().to_string()),
    );
    let report = evaluate_dirs(&a.pred, &a.gt, text.as_ref(), meta, a.jobs)?;
    for m in &report.missing {
        log::warn!("unpaired: {m}");
    }
    if report.rows.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "no stems matched between {} and {}",
            a.pred.display(),
            a.gt.display()
        )));
    }
    let (csv_path, json_path) = if a.report.extension().is_some_and(|e| e == "json") {
        (a.report.with_extension("csv"), a.report.clone())
    } else {
        (a.report.clone(), a.report.with_extension("json"))
    };
    if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    report.write_csv(&csv_path)?;
    report.write_json(&json_path)?;
    println!("{}", report.summary());
    Ok(())
}
