//! `rescale`: train, apply, and benchmark the latent rescaling pipeline.
//!
//! Exit codes: 0 on success, 1 on operational failures (missing files, model
//! mismatches, numeric trouble), 2 on usage mistakes. Operational errors
//! print a single `error: ...` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use rescale_core::bench::{
    ablation_csv_string, eval_bicubic, eval_model, labeled, psnr, rd_sweep_jpeg, run_ablation,
    ssim, write_rd_artifacts,
};
use rescale_core::diffusion::TimeStepMap;
use rescale_core::image::{load_image_rgb8, save_png_rgb8};
use rescale_core::pipeline::{
    apply_overrides, default_keys, desk_corpus, load_config, rescale_down, rescale_up,
    roundtrip_files, train_full, Model, Phase, RunConfig, TrainOptions, TrainReport,
};
use rescale_core::{Elem, ImageF};

const JPEG_QUALITIES: [u8; 6] = [10, 20, 35, 50, 75, 90];

/// Marks an error as a usage mistake so `main` exits 2 instead of 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: rescale_core::Error) -> anyhow::Error {
    anyhow::Error::new(Usage(e.to_string()))
}

#[derive(Parser)]
#[command(
    name = "rescale",
    version,
    about = "Extreme image rescaling through a compact learned latent",
    after_help = keys_help(),
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch on the synthetic desk corpus.
    Train(TrainCmd),
    /// Downscale one image to its compact stored form.
    Down(DownCmd),
    /// Restore a stored low-resolution PNG to full size.
    Up(UpCmd),
    /// Downscale and restore in one go, reporting fidelity.
    Roundtrip(RoundtripCmd),
    /// Compare restoration quality against bicubic and a JPEG quality sweep.
    Bench(BenchCmd),
    /// Re-train and re-evaluate with individual pieces disabled or retuned.
    Ablate(AblateCmd),
    /// Describe a model archive; optionally map predicted time steps.
    Inspect(InspectCmd),
}

/// Configuration source shared by the verbs that build a model from scratch.
/// Resolution order: file (or defaults), then the shorthand flags, then
/// `--set` pairs, then validation.
#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set stages.stage1_lr=2e-4. Repeatable;
    /// the full key list is at the end of `rescale --help`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_val)]
    set: Vec<(String, String)>,

    /// Rescaling factor (8, 16, or 32).
    #[arg(long)]
    factor: Option<usize>,

    /// Patch side for tiled enhancement, in latent cells.
    #[arg(long)]
    patch_size: Option<usize>,

    /// Stride between patches, in latent cells.
    #[arg(long)]
    stride: Option<usize>,

    /// Anchor time step of the hybrid scheduler.
    #[arg(long)]
    t0: Option<usize>,

    /// Seed for parameter init, corpus synthesis, and training draws.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(v) = self.factor {
            pairs.push(("factor".into(), v.to_string()));
        }
        if let Some(v) = self.patch_size {
            pairs.push(("patch_size".into(), v.to_string()));
        }
        if let Some(v) = self.stride {
            pairs.push(("stride".into(), v.to_string()));
        }
        if let Some(v) = self.t0 {
            pairs.push(("t0".into(), v.to_string()));
        }
        if let Some(v) = self.seed {
            pairs.push(("seed".into(), v.to_string()));
        }
        pairs.extend(self.set.iter().cloned());
        if pairs.is_empty() {
            return Ok(base);
        }
        apply_overrides(&base, &pairs).map_err(usage)
    }
}

fn parse_key_val(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err("expected KEY=VALUE with a dotted config key".into()),
    }
}

fn keys_help() -> String {
    let mut out = String::from("Config keys for --set, with defaults:\n");
    for (k, v) in default_keys() {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the model, loss logs, and stage checkpoints.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Suppress per-stage progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DownCmd {
    /// Trained model archive.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Source image (PNG or JPEG); sides must be multiples of the factor.
    input: PathBuf,
    /// Destination for the low-resolution PNG.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Args)]
struct UpCmd {
    /// Trained model archive.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Low-resolution PNG produced by `down`.
    input: PathBuf,
    /// Destination for the restored PNG.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Also write the per-patch time-step map (.csv, or .png heat map).
    #[arg(long, value_name = "FILE")]
    timestep_map: Option<PathBuf>,
}

#[derive(Args)]
struct RoundtripCmd {
    /// Trained model archive.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Source image; sides must be multiples of the factor.
    input: PathBuf,
    /// Destination for the intermediate low-resolution PNG.
    #[arg(long, value_name = "FILE")]
    lr: PathBuf,
    /// Destination for the restored PNG.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Also write the per-patch time-step map (.csv, or .png heat map).
    #[arg(long, value_name = "FILE")]
    timestep_map: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCmd {
    /// Trained model archive.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Output directory for the metric CSVs, the rate-distortion plot, and
    /// the intermediate round-trip files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// How many held-out images to evaluate.
    #[arg(long, default_value_t = 10)]
    images: usize,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for ablation.csv and its working files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InspectCmd {
    /// Model archive to describe.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Stored low-resolution PNG to restore for a time-step map.
    #[arg(long, value_name = "FILE", requires = "timestep_map")]
    input: Option<PathBuf>,
    /// Where to write the predicted map (.csv, or .png for a heat map).
    #[arg(long, value_name = "FILE", requires = "input")]
    timestep_map: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(c) => cmd_train(c),
        Cmd::Down(c) => cmd_down(c),
        Cmd::Up(c) => cmd_up(c),
        Cmd::Roundtrip(c) => cmd_roundtrip(c),
        Cmd::Bench(c) => cmd_bench(c),
        Cmd::Ablate(c) => cmd_ablate(c),
        Cmd::Inspect(c) => cmd_inspect(c),
    }
}

fn load_model(path: &Path) -> Result<Model<Elem>> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn check_divisible(x: &ImageF, factor: usize) -> Result<()> {
    if x.height() % factor != 0 || x.width() % factor != 0 {
        anyhow::bail!(
            "input is {}x{}; both sides must be multiples of the rescaling factor {factor}",
            x.height(),
            x.width()
        );
    }
    Ok(())
}

/// CSV by default; a `.png` destination gets the heat map rendering.
fn write_map(map: &TimeStepMap, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        map.write_heatmap_png(path, 16)?;
    } else {
        map.write_csv(path)?;
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn cmd_train(cmd: &TrainCmd) -> Result<()> {
    let cfg = cmd.config.resolve()?;
    std::fs::create_dir_all(&cmd.out)?;
    let images = desk_corpus::<Elem>(cfg.corpus.images, cfg.corpus.size, cfg.seed);
    let mut model = Model::<Elem>::new(cfg)?;
    let opts = TrainOptions { out_dir: Some(cmd.out.clone()), verbose: !cmd.quiet };
    let report = train_full(&mut model, &images, &opts)?;
    let model_path = cmd.out.join("model.rsck");
    model.save(&model_path)?;
    write_run_manifest(&cmd.out, &model, &report, &model_path)?;
    println!(
        "trained model {} ({} parameters) -> {}",
        model.identity(),
        model.store.num_scalars(),
        model_path.display()
    );
    Ok(())
}

/// Reproducibility record for one training run: tool version, the exact
/// config, and content hashes of every artifact. No clocks, so identical
/// runs write identical manifests.
fn write_run_manifest(
    out: &Path,
    model: &Model<Elem>,
    report: &TrainReport,
    model_path: &Path,
) -> Result<()> {
    let mut checkpoints = Vec::new();
    for phase in Phase::ALL {
        let name = format!("checkpoint_{}.rsck", phase.as_str());
        let path = out.join(&name);
        if path.exists() {
            checkpoints.push(serde_json::json!({
                "file": name,
                "sha256": sha256_file(&path)?,
            }));
        }
    }
    let stages: Vec<serde_json::Value> = report
        .traces
        .iter()
        .map(|t| {
            serde_json::json!({
                "stage": t.phase.as_str(),
                "steps": t.rows.len(),
                "first_total": t.first_total(),
                "last_total": t.last_total(),
            })
        })
        .collect();
    let manifest = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": model.config,
        "model": {
            "file": "model.rsck",
            "identity": model.identity(),
            "sha256": sha256_file(model_path)?,
        },
        "latent_scale": report.latent_scale,
        "checkpoints": checkpoints,
        "stages": stages,
    });
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn cmd_down(cmd: &DownCmd) -> Result<()> {
    let model = load_model(&cmd.model)?;
    let x = load_image_rgb8::<Elem>(&cmd.input)?;
    check_divisible(&x, model.config.factor)?;
    let report = rescale_down(&model, &x, &cmd.output)?;
    println!(
        "{}x{} -> {}x{}, {:.4} bpp, wrote {}",
        report.meta.src_height,
        report.meta.src_width,
        report.meta.src_height / report.meta.factor,
        report.meta.src_width / report.meta.factor,
        report.bpp,
        report.path.display()
    );
    Ok(())
}

fn cmd_up(cmd: &UpCmd) -> Result<()> {
    let model = load_model(&cmd.model)?;
    let restored = rescale_up(&model, &cmd.input)?;
    save_png_rgb8(&cmd.output, &restored.image)?;
    if let Some(path) = &cmd.timestep_map {
        write_map(&restored.map, path)?;
    }
    println!(
        "restored {}x{}, mean predicted time step {:.2}, wrote {}",
        restored.image.height(),
        restored.image.width(),
        restored.map.mean(),
        cmd.output.display()
    );
    Ok(())
}

fn cmd_roundtrip(cmd: &RoundtripCmd) -> Result<()> {
    let model = load_model(&cmd.model)?;
    let x = load_image_rgb8::<Elem>(&cmd.input)?;
    check_divisible(&x, model.config.factor)?;
    let (down, up) = roundtrip_files(&model, &x, &cmd.lr, &cmd.output)?;
    if let Some(path) = &cmd.timestep_map {
        write_map(&up.map, path)?;
    }
    let x8 = x.to_eight_bit();
    let ps = psnr(&x8, &up.image)?;
    let ss = ssim(&x8, &up.image)?;
    println!(
        "{:.2} dB PSNR, {:.4} SSIM, {:.4} bpp, mean time step {:.2}",
        ps.db,
        ss,
        down.bpp,
        up.map.mean()
    );
    Ok(())
}

fn cmd_bench(cmd: &BenchCmd) -> Result<()> {
    if cmd.images == 0 {
        return Err(anyhow::Error::new(Usage("--images must be at least 1".into())));
    }
    let model = load_model(&cmd.model)?;
    let cfg = model.config.clone();
    std::fs::create_dir_all(&cmd.out)?;

    // Held-out images: the per-image seeds continue past the training corpus.
    let fresh = desk_corpus::<Elem>(
        cmd.images,
        cfg.corpus.size,
        cfg.seed.wrapping_add(cfg.corpus.images as u64),
    );
    let set = labeled(&fresh, "img");
    let work = cmd.out.join("work");

    let ours = eval_model(&model, &set, &work)?;
    ours.write_csv(&cmd.out.join("metrics_model.csv"))?;
    let bicubic = eval_bicubic(&set, cfg.factor, &work)?;
    bicubic.write_csv(&cmd.out.join("metrics_bicubic.csv"))?;

    let points = rd_sweep_jpeg(&set, &JPEG_QUALITIES)?;
    let marker = (ours.mean_bpp(), ours.mean_psnr(), "model");
    write_rd_artifacts(
        &points,
        Some(marker),
        &cmd.out.join("rd_jpeg.csv"),
        &cmd.out.join("rd_jpeg.svg"),
    )?;

    println!(
        "model    {:.2} dB PSNR, {:.4} SSIM, {:.4} bpp over {} images",
        ours.mean_psnr(),
        ours.mean_ssim(),
        ours.mean_bpp(),
        set.len()
    );
    println!(
        "bicubic  {:.2} dB PSNR, {:.4} SSIM, {:.4} bpp",
        bicubic.mean_psnr(),
        bicubic.mean_ssim(),
        bicubic.mean_bpp()
    );
    println!(
        "wrote metrics_model.csv, metrics_bicubic.csv, rd_jpeg.csv, rd_jpeg.svg in {}",
        cmd.out.display()
    );
    Ok(())
}

fn cmd_ablate(cmd: &AblateCmd) -> Result<()> {
    let cfg = cmd.config.resolve()?;
    std::fs::create_dir_all(&cmd.out)?;
    let corpus = desk_corpus::<Elem>(cfg.corpus.images, cfg.corpus.size, cfg.seed);
    let images = labeled(&corpus, "img");
    let outcomes = run_ablation(&cfg, &images, &cmd.out.join("work"), !cmd.quiet)?;
    let csv = ablation_csv_string(&outcomes);
    std::fs::write(cmd.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_inspect(cmd: &InspectCmd) -> Result<()> {
    let model = load_model(&cmd.model)?;
    let cfg = &model.config;
    println!("identity      {}", model.identity());
    println!("config hash   {}", cfg.hash());
    println!("factor        {}", cfg.factor);
    println!("time steps    t0 {} of {}", cfg.t0, cfg.t_max);
    println!("tiling        patch {} stride {}", cfg.patch_size, cfg.stride);
    println!("inn           {}", cfg.use_inn);
    println!("guidance      {}", cfg.use_guidance);
    match cfg.fixed_timestep {
        Some(t) => println!("time step     fixed at {t}"),
        None => println!("time step     predicted per patch"),
    }
    println!("seed          {}", cfg.seed);
    println!("corpus        {} images at {}px", cfg.corpus.images, cfg.corpus.size);
    println!("parameters    {}", model.store.num_scalars());
    for group in ["codec.", "ge.", "gd.", "inn.", "denoiser.", "tpm.", "scheduler."] {
        let n: usize = model
            .store
            .ids()
            .filter(|&id| model.store.name(id).starts_with(group))
            .map(|id| model.store.value(id).len())
            .sum();
        println!("  {:<11} {n}", group.trim_end_matches('.'));
    }
    if let (Some(input), Some(map_path)) = (&cmd.input, &cmd.timestep_map) {
        let restored = rescale_up(&model, input)?;
        write_map(&restored.map, map_path)?;
        let grid = restored.map.grid();
        println!(
            "time-step map {}x{} patches, mean {:.2}, wrote {}",
            grid.rows.len(),
            grid.cols.len(),
            restored.map.mean(),
            map_path.display()
        );
    }
    Ok(())
}
