//! `invedit` command surface: `train`, `invert`, `reconstruct`, `edit`,
//! `analyze-error` and `eval`.
//!
//! Exit codes: 0 on success, 1 on usage, configuration or integrity errors,
//! 2 on numeric failures.

pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use invedit_core::attention_control::GateRule;
use invedit_core::image_io::{read_png, write_mask_png, write_png};
use invedit_core::metrics::{psnr, ssim};
use invedit_core::pipeline::{
    edge_map, edit_from, invert_image, reconstruct_from, stepwise_error_trace, training_examples, ReconMethod,
    EDIT_CFG_SCALE,
};
use invedit_core::synth_data::{make_split, render_scene};
use invedit_core::{
    CodecMode, ControllerPolicy, Error, ImageTensor, LatentCodec, NoisePredictor, NoiseSchedule, PolicyKind, Prompt,
    Result, SamplerRun, ToyDenoiser,
};

pub use config::RunConfig;

/// Environment variable holding the worker count for `eval`.
pub const THREADS_ENV: &str = "INVEDIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "invedit", version, about = "Inversion-enhanced attention control on a toy latent diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic set, fit the codec and train the denoiser.
    Train(Common),
    /// Invert an image and persist the trajectory and attention cache.
    Invert(Common),
    /// Invert then resample with null conditioning; reports PSNR/SSIM.
    Reconstruct(Common),
    /// Invert then sample under a target prompt.
    Edit(Common),
    /// Per-step reconstruction error trace, teacher-forced and free-running.
    AnalyzeError(Common),
    /// Reconstruction metrics per policy over a synthetic split.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    image: Option<PathBuf>,
    /// Target prompt, e.g. "disc right top small bright".
    #[arg(long)]
    prompt: Option<String>,
    /// naive, tic, concat, mask_guided, recon_query; `replay` for reconstruction.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    l0: Option<isize>,
    /// Gate on the countdown step index instead of denoising progress.
    #[arg(long)]
    literal_gate: bool,
    /// Prompt positions that define the edit mask.
    #[arg(long, value_delimiter = ',')]
    mask_tokens: Option<Vec<usize>>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Condition on the input's edge map.
    #[arg(long)]
    layout: bool,
    /// Model checkpoint directory.
    #[arg(long, value_name = "DIR")]
    model: Option<PathBuf>,
    /// Codec directory.
    #[arg(long, value_name = "DIR")]
    codec: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated policies, e.g. naive,tic,replay.
    #[arg(long, default_value = "naive,tic,replay")]
    policies: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Use at most this many images.
    #[arg(long)]
    limit: Option<usize>,
}

/// A policy choice from the command line.
#[derive(Clone, Debug, PartialEq)]
enum PolicyArg {
    Sample(PolicyKind),
    Replay,
}

impl PolicyArg {
    fn parse(name: &str) -> Result<Self> {
        if name == "replay" {
            Ok(PolicyArg::Replay)
        } else {
            PolicyKind::parse(name).map(PolicyArg::Sample)
        }
    }

    fn name(&self) -> String {
        match self {
            PolicyArg::Replay => "replay".into(),
            PolicyArg::Sample(k) => serde_json::to_value(k)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr as one line.
pub fn run_command<S: AsRef<str>>(argv: &[S]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => train(&resolve(&c)?),
        Command::Invert(c) => invert(&resolve(&c)?),
        Command::Reconstruct(c) => reconstruct(&resolve(&c)?, c.policy.as_deref()),
        Command::Edit(c) => edit(&resolve(&c)?),
        Command::AnalyzeError(c) => analyze_error(&resolve(&c)?),
        Command::Eval(a) => eval(&resolve(&a.common)?, &a),
    }
}

/// Loads the config, applies flag overrides and validates the result.
fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &c.output {
        cfg.output_dir = o.clone();
    }
    if let Some(i) = &c.image {
        cfg.image = Some(i.clone());
    }
    if let Some(p) = &c.prompt {
        cfg.prompt = Some(p.clone());
    }
    if let Some(name) = &c.policy {
        if let PolicyArg::Sample(kind) = PolicyArg::parse(name)? {
            cfg.policy.kind = kind;
        }
    }
    if let Some(t0) = c.t0 {
        cfg.policy.t0 = t0;
    }
    if let Some(l0) = c.l0 {
        cfg.policy.l0 = l0;
    }
    if c.literal_gate {
        cfg.policy.gate = GateRule::StepIndex;
    }
    if let Some(tokens) = &c.mask_tokens {
        cfg.policy.mask.token_indices = tokens.clone();
    }
    if let Some(th) = c.threshold {
        cfg.policy.mask.threshold = th;
    }
    if let Some(w) = c.cfg_scale {
        cfg.cfg_scale = Some(w);
    }
    if c.layout {
        cfg.layout.enabled = true;
    }
    if let Some(m) = &c.model {
        cfg.model = config::ModelSpec::Checkpoint { path: m.clone() };
    }
    if let Some(p) = &c.codec {
        cfg.codec.path = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Loaded {
    codec: LatentCodec,
    model: Box<dyn NoisePredictor + Send + Sync>,
    schedule: NoiseSchedule,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let codec = cfg.build_codec()?;
    let model = cfg.build_model(&codec)?;
    if model.latent_shape() != codec.latent_shape() {
        return Err(Error::Config(format!(
            "model latent {:?} does not match codec latent {:?}",
            model.latent_shape(),
            codec.latent_shape()
        )));
    }
    Ok(Loaded {
        codec,
        model,
        schedule: cfg.schedule.build()?,
    })
}

fn input_image(cfg: &RunConfig, codec: &LatentCodec) -> Result<ImageTensor> {
    let path = cfg
        .image
        .as_ref()
        .ok_or_else(|| Error::Usage("no input image (use --image or the config's `image`)".into()))?;
    let img = read_png(path)?;
    if img.shape() != codec.image_shape() {
        return Err(Error::Usage(format!(
            "{} is {:?} but the codec expects {:?}",
            path.display(),
            img.shape(),
            codec.image_shape()
        )));
    }
    Ok(img)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&path, e))
}

fn train(cfg: &RunConfig) -> Result<()> {
    cfg.write_resolved()?;
    let out = &cfg.output_dir;
    let data = make_split(cfg.data.seed, cfg.data.n_train, cfg.data.n_test)?;
    data.save(out.join("data"))?;
    let images: Vec<ImageTensor> = data.train.iter().map(|s| render_scene(s).image).collect();
    let codec = match (&cfg.codec.path, cfg.codec.mode) {
        (Some(path), _) => LatentCodec::load(path)?,
        (None, CodecMode::TrainedAutoencoder { hidden }) => {
            let opts = invedit_core::latent_codec::AutoencoderTrainOptions {
                hidden,
                ..cfg.codec.autoencoder.clone()
            };
            LatentCodec::train_autoencoder(&images, &opts)?.0
        }
        (None, _) => {
            let mut codec = cfg.build_codec()?;
            codec.fit_stats(&images)?;
            codec
        }
    };
    codec.save(out.join("codec"))?;
    let schedule = cfg.schedule.build()?;
    let examples = training_examples(&data.train, &codec, cfg.layout.edge_threshold)?;
    let mut model = ToyDenoiser::new(cfg.train.model.clone(), cfg.train.model_seed)?;
    model.set_schedule_config(cfg.schedule);
    let start = Instant::now();
    let report = model.train(&examples, &schedule, &cfg.train.options)?;
    model.save(out.join("model"))?;
    #[derive(Serialize)]
    struct TrainSummary<'a> {
        final_loss: Option<f64>,
        epoch_losses: &'a [f64],
        seconds: f64,
        parameters: usize,
    }
    write_json(
        out,
        "train_report.json",
        &TrainSummary {
            final_loss: report.final_loss(),
            epoch_losses: &report.epoch_losses,
            seconds: start.elapsed().as_secs_f64(),
            parameters: model.params().scalar_count(),
        },
    )?;
    println!(
        "trained {} examples, final loss {:.5}",
        examples.len(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn invert(cfg: &RunConfig) -> Result<()> {
    let l = load(cfg)?;
    let img = input_image(cfg, &l.codec)?;
    cfg.write_resolved()?;
    let start = Instant::now();
    let inv = invert_image(&img, &l.codec, l.model.as_ref(), &l.schedule)?;
    let seconds = start.elapsed().as_secs_f64();
    inv.save(cfg.output_dir.join("inversion"))?;
    write_json(
        &cfg.output_dir,
        "metrics.json",
        &serde_json::json!({ "steps": inv.steps(), "seconds": seconds }),
    )
}

#[derive(Serialize)]
struct ReconMetrics {
    policy: String,
    psnr_db: f64,
    ssim: f64,
    seconds: f64,
}

fn recon_method(cfg: &RunConfig, arg: &PolicyArg) -> ReconMethod {
    match arg {
        PolicyArg::Replay => ReconMethod::Replay,
        PolicyArg::Sample(kind) => ReconMethod::Sample(ControllerPolicy {
            kind: *kind,
            ..cfg.policy.clone()
        }),
    }
}

fn reconstruct(cfg: &RunConfig, policy_flag: Option<&str>) -> Result<()> {
    let arg = match policy_flag {
        Some(name) => PolicyArg::parse(name)?,
        None => PolicyArg::Sample(cfg.policy.kind),
    };
    if cfg.cfg_scale.is_some_and(|w| w != 1.0) {
        log::warn!("reconstruction ignores cfg_scale and samples with w = 1");
    }
    let l = load(cfg)?;
    let img = input_image(cfg, &l.codec)?;
    cfg.write_resolved()?;
    let start = Instant::now();
    let inv = invert_image(&img, &l.codec, l.model.as_ref(), &l.schedule)?;
    let r = reconstruct_from(&img, &inv, &l.codec, l.model.as_ref(), &l.schedule, &recon_method(cfg, &arg))?;
    let seconds = start.elapsed().as_secs_f64();
    write_png(cfg.output_dir.join("reconstruction.png"), &r.image)?;
    write_json(
        &cfg.output_dir,
        "metrics.json",
        &ReconMetrics {
            policy: arg.name(),
            psnr_db: r.psnr_db,
            ssim: r.ssim,
            seconds,
        },
    )?;
    println!("{}: psnr {:.3} dB, ssim {:.4}", arg.name(), r.psnr_db, r.ssim);
    Ok(())
}

fn edit(cfg: &RunConfig) -> Result<()> {
    let text = cfg
        .prompt
        .as_ref()
        .ok_or_else(|| Error::Usage("edit needs a target prompt (--prompt)".into()))?;
    let target = Prompt::parse(text)?;
    let l = load(cfg)?;
    let img = input_image(cfg, &l.codec)?;
    let mut run = SamplerRun::editing(cfg.policy.clone(), target);
    run.cfg_scale = cfg.cfg_scale.unwrap_or(EDIT_CFG_SCALE);
    run.control_unconditional = cfg.control_unconditional;
    if cfg.layout.enabled {
        run.layout = Some(edge_map(&img, cfg.layout.edge_threshold)?);
    }
    cfg.write_resolved()?;
    let start = Instant::now();
    let inv = invert_image(&img, &l.codec, l.model.as_ref(), &l.schedule)?;
    let out = edit_from(&inv, &l.codec, l.model.as_ref(), &l.schedule, &run)?;
    let seconds = start.elapsed().as_secs_f64();
    write_png(cfg.output_dir.join("edited.png"), &out.image)?;
    if let Some(mask) = out.masks.last() {
        write_mask_png(cfg.output_dir.join("mask.png"), &mask.cells, mask.side, mask.side)?;
    }
    write_json(
        &cfg.output_dir,
        "metrics.json",
        &serde_json::json!({
            "policy": PolicyArg::Sample(cfg.policy.kind).name(),
            "prompt": text,
            "cfg_scale": run.cfg_scale,
            "psnr_vs_input_db": psnr(&out.image, &img)?,
            "ssim_vs_input": ssim(&out.image, &img)?,
            "mask_cells": out.masks.last().map(|m| m.count()),
            "seconds": seconds,
        }),
    )?;
    println!("edited with {}", PolicyArg::Sample(cfg.policy.kind).name());
    Ok(())
}

fn analyze_error(cfg: &RunConfig) -> Result<()> {
    let l = load(cfg)?;
    let img = input_image(cfg, &l.codec)?;
    cfg.write_resolved()?;
    let inv = invert_image(&img, &l.codec, l.model.as_ref(), &l.schedule)?;
    let run = SamplerRun::reconstruction(cfg.policy.clone());
    let trace = stepwise_error_trace(&inv, l.model.as_ref(), &l.schedule, &run)?;
    write_json(&cfg.output_dir, "trace.json", &trace)?;
    println!(
        "final error {:.6}, max teacher-forced residual {:.3e}, non-decreasing fraction {:.2}",
        trace.final_error,
        trace.max_forced_residual(),
        trace.monotone_fraction
    );
    Ok(())
}

#[derive(Serialize, Clone)]
struct ImageResult {
    index: usize,
    psnr_db: f64,
    ssim: f64,
    seconds: f64,
}

#[derive(Serialize)]
struct PolicySummary {
    policy: String,
    mean_psnr_db: f64,
    mean_ssim: f64,
    mean_seconds: f64,
    images: Vec<ImageResult>,
}

fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let policies = args
        .policies
        .split(',')
        .map(|p| PolicyArg::parse(p.trim()))
        .collect::<Result<Vec<_>>>()?;
    if policies.is_empty() {
        return Err(Error::Usage("no policies given".into()));
    }
    let data = make_split(cfg.data.seed, cfg.data.n_train, cfg.data.n_test)?;
    let specs = match args.split.as_str() {
        "test" => data.test,
        "train" => data.train,
        other => return Err(Error::Usage(format!("unknown split {other:?} (test or train)"))),
    };
    let specs: Vec<_> = specs.into_iter().take(args.limit.unwrap_or(usize::MAX)).collect();
    if specs.is_empty() {
        return Err(Error::Usage("the split has no images".into()));
    }
    let l = load(cfg)?;
    cfg.write_resolved()?;

    let one = |i: usize| -> Result<Vec<ImageResult>> {
        let img = render_scene(&specs[i]).image;
        let start = Instant::now();
        let inv = invert_image(&img, &l.codec, l.model.as_ref(), &l.schedule)?;
        let inversion = start.elapsed().as_secs_f64();
        policies
            .iter()
            .map(|p| {
                let start = Instant::now();
                let r = reconstruct_from(&img, &inv, &l.codec, l.model.as_ref(), &l.schedule, &recon_method(cfg, p))?;
                Ok(ImageResult {
                    index: i,
                    psnr_db: r.psnr_db,
                    ssim: r.ssim,
                    seconds: inversion + start.elapsed().as_secs_f64(),
                })
            })
            .collect()
    };
    let threads = thread_count().min(specs.len());
    let mut per_image: Vec<Option<Result<Vec<ImageResult>>>> = (0..specs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = per_image.chunks_mut(specs.len().div_ceil(threads)).enumerate().collect();
        let size = specs.len().div_ceil(threads);
        for (c, chunk) in chunks {
            let one = &one;
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(one(c * size + j));
                }
            });
        }
    });
    let per_image = per_image
        .into_iter()
        .map(|r| r.expect("every image is evaluated"))
        .collect::<Result<Vec<_>>>()?;

    let n = per_image.len() as f64;
    let summaries: Vec<PolicySummary> = policies
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let images: Vec<ImageResult> = per_image.iter().map(|r| r[k].clone()).collect();
            PolicySummary {
                policy: p.name(),
                mean_psnr_db: images.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                mean_ssim: images.iter().map(|r| r.ssim).sum::<f64>() / n,
                mean_seconds: images.iter().map(|r| r.seconds).sum::<f64>() / n,
                images,
            }
        })
        .collect();
    let mean_of = |name: &str| summaries.iter().find(|s| s.policy == name).map(|s| s.mean_psnr_db);
    let ordering = match (mean_of("replay"), mean_of("tic"), mean_of("naive_ddim")) {
        (Some(r), Some(t), Some(nv)) => Some(r >= t && t >= nv),
        _ => None,
    };
    write_json(
        &cfg.output_dir,
        "eval.json",
        &serde_json::json!({ "split": args.split, "images": specs.len(), "policies": summaries, "ceiling_chain_holds": ordering }),
    )?;
    println!("{:<12} {:>10} {:>8} {:>10}", "policy", "PSNR (dB)", "SSIM", "s/image");
    for s in &summaries {
        println!(
            "{:<12} {:>10.3} {:>8.4} {:>10.3}",
            s.policy, s.mean_psnr_db, s.mean_ssim, s.mean_seconds
        );
    }
    if let Some(ok) = ordering {
        println!("replay >= tic >= naive: {}", if ok { "holds" } else { "violated" });
    }
    Ok(())
}
