//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 configuration/shape error, 3 training
//! divergence, 4 checkpoint or I/O failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Model;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::cost::{cost_breakdown, rho, sweep_csv, CostConfig, MetricDirection};
use crate::data::{gen_shapes_dataset, make_padded_variant, Dataset};
use crate::error::{Error, Result};
use crate::flow::euler_sample;
use crate::guidance::{
    guided_step_cost, guided_velocity, select_weak_budget, GuidanceMode, GuidanceSpec,
    VelocityModel, WEAK_COST_FRAC,
};
use crate::nn::param::Scalar;
use crate::probe::{padded_probe, probe_csv};
use crate::train::{
    budget_eval_csv, evaluate_budgets, read_attention_map, save_heatmap, spearman, train_loop,
    TrainState,
};

/// Environment variable prepended to every config's `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "ELIT_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "elit",
    about = "Elastic latent interface transformer: rectified-flow training and budgeted sampling",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train from a config file (multi-budget by default; resumable).
    Train(TrainArgs),
    /// Generate images with the Euler sampler under a guidance mode.
    Sample(SampleArgs),
    /// Paired validation loss across latent budgets (CSV).
    EvalBudgets(EvalArgs),
    /// Analytic cost table: per-budget MAC sweep or one breakdown.
    Flops(FlopsArgs),
    /// Read-attention heatmap for one input image.
    ProbeAttn(AttnArgs),
    /// The four-model zero-padding probe (compute reallocation).
    PaddedProbe(ProbeArgs),
    /// Quality-degradation per compute-saving ratio between two operating
    /// points.
    Rho(RhoArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Resume from this checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured total step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Guidance mode: none, cfg, ag, ccfg.
    #[arg(long)]
    guidance: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Main latent budget J̃.
    #[arg(long)]
    budget: Option<usize>,
    /// Weak-branch budget; defaults to the cheapest budget within 35% of the
    /// main cost for ag/ccfg.
    #[arg(long)]
    weak_budget: Option<usize>,
    /// Euler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Class to condition on.
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG path (defaults into the run's output dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated budgets; defaults to 1..=J_max.
    #[arg(long)]
    budgets: Option<String>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    /// Config supplying the architecture; omit with --xl.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the built-in XL-like reference architecture instead.
    #[arg(long)]
    xl: bool,
    /// Single budget: print the component breakdown instead of the sweep.
    #[arg(long)]
    budget: Option<usize>,
    /// Compare guided sampling costs (cfg vs ccfg) at this main budget.
    #[arg(long)]
    guidance_at: Option<usize>,
}

#[derive(Debug, Args)]
struct AttnArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset image index to probe.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training steps per arm.
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
}

#[derive(Debug, Args)]
struct RhoArgs {
    /// Metric at the high-compute operating point.
    #[arg(long)]
    metric_high: f64,
    #[arg(long)]
    metric_low: f64,
    #[arg(long)]
    flops_high: f64,
    #[arg(long)]
    flops_low: f64,
    /// "lower" (FID-like) or "higher" (IS-like).
    #[arg(long, default_value = "lower")]
    better: String,
}

/// Parse args and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::EvalBudgets(a) => cmd_eval(a),
        Cmd::Flops(a) => cmd_flops(a),
        Cmd::ProbeAttn(a) => cmd_attn(a),
        Cmd::PaddedProbe(a) => cmd_probe(a),
        Cmd::Rho(a) => cmd_rho(a),
    }
}

/// Resolve the run's output directory, honoring the root override.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => Path::new(&root).join(&cfg.output_dir),
        None => PathBuf::from(&cfg.output_dir),
    }
}

/// Materialize the training dataset and optional loss mask for a config.
pub fn load_training_data(cfg: &RunConfig) -> Result<(Dataset<f32>, Option<ArrayD<bool>>)> {
    let small = gen_shapes_dataset::<f32>(&cfg.dataset)?;
    match &cfg.padded {
        Some(p) => {
            let padded = make_padded_variant(&small, p, cfg.backbone.patch_size)?;
            Ok((padded.data, Some(padded.pixel_mask)))
        }
        None => Ok((small, None)),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.steps {
        cfg.training.steps = s;
    }
    cfg.validate()?;
    let dir = output_dir(&cfg);
    fs::create_dir_all(&dir)?;
    let (data, mask) = load_training_data(&cfg)?;

    let mut state = match &a.resume {
        Some(path) => {
            let st = load_checkpoint::<f32>(path)?;
            println!("resumed from {} at step {}", path.display(), st.step);
            st
        }
        None => TrainState::new(cfg.clone())?,
    };
    if a.steps.is_some() {
        state.cfg.training.steps = cfg.training.steps;
    }
    let remaining = state.cfg.training.steps.saturating_sub(state.step);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("metrics.jsonl"))?;
    let recs = train_loop(&mut state, &data, mask.as_ref(), remaining, Some(&mut log))?;
    let ckpt = dir.join("checkpoint.ckpt");
    save_checkpoint(&mut state, &ckpt)?;
    if let Some(last) = recs.last() {
        println!(
            "step {} loss {:.5} (J̃={}) -> {}",
            last.step,
            last.loss,
            last.j_tilde,
            ckpt.display()
        );
    } else {
        println!("nothing to do: already at step {}", state.step);
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<GuidanceMode> {
    match s {
        "none" => Ok(GuidanceMode::None),
        "cfg" => Ok(GuidanceMode::Cfg),
        "ag" => Ok(GuidanceMode::Ag),
        "ccfg" => Ok(GuidanceMode::Ccfg),
        other => Err(Error::config(format!(
            "guidance.mode: unknown mode {other:?} (none|cfg|ag|ccfg)"
        ))),
    }
}

/// Map `[-1, 1]` pixels to a PNG.
pub fn save_image_png<F: Scalar>(img: &Array3<F>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    let to_u8 = |v: F| ((v.to_f64().clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    match c {
        1 => {
            let pixels: Vec<u8> = img.iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, pixels)
                .expect("buffer matches dims")
                .save(path)
                .map_err(|e| Error::checkpoint(format!("image save: {e}")))?;
        }
        3 => {
            let mut pixels = Vec::with_capacity(3 * h * w);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        pixels.push(to_u8(img[[ch, y, x]]));
                    }
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, pixels)
                .expect("buffer matches dims")
                .save(path)
                .map_err(|e| Error::checkpoint(format!("image save: {e}")))?;
        }
        other => {
            return Err(Error::shape(format!("cannot save {other}-channel image")));
        }
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let state = load_checkpoint::<f32>(&a.checkpoint)?;
    let model = state.ema.apply(&state.model);
    let bb = &state.cfg.backbone;

    let mut spec = cfg.guidance;
    if let Some(m) = &a.guidance {
        spec.mode = parse_mode(m)?;
    }
    if let Some(l) = a.lambda {
        spec.lambda = l;
    }
    if let Some(b) = a.budget {
        spec.j_main = b;
    }
    spec.j_weak = match a.weak_budget {
        Some(w) => w,
        None => match spec.mode {
            GuidanceMode::Ag | GuidanceMode::Ccfg => select_weak_budget(
                &CostConfig::from_backbone(bb, spec.j_main),
                spec.j_main,
                WEAK_COST_FRAC,
            )?,
            _ => spec.j_main,
        },
    };
    spec.validate()?;
    if a.class >= bb.num_classes {
        return Err(Error::config(format!(
            "--class {} out of range ({} classes)",
            a.class, bb.num_classes
        )));
    }

    let steps = a.steps.unwrap_or(cfg.flow.sampler_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x0 = ArrayD::from_shape_simple_fn(
        ndarray::IxDyn(&[bb.channels, bb.image_size, bb.image_size]),
        || f32::std_normal(&mut rng),
    );
    let vm = model_velocity(&model);
    let mut field = |x: &ArrayD<f32>, t: f32| -> Result<ArrayD<f32>> {
        let x3 = x
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::shape(format!("sample: {e}")))?;
        Ok(guided_velocity(&vm, &x3, t, Some(a.class), &spec)?.into_dyn())
    };
    let x1 = euler_sample(&mut field, &x0, steps)?;
    let img = x1
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::shape(format!("sample: {e}")))?;

    let out = match a.out {
        Some(p) => p,
        None => {
            let dir = output_dir(&cfg);
            fs::create_dir_all(&dir)?;
            dir.join(format!("sample-c{}-s{}.png", a.class, a.seed))
        }
    };
    save_image_png(&img, &out)?;
    println!(
        "wrote {} (mode {:?}, λ={}, J̃={}, J̃w={}, {} steps)",
        out.display(),
        spec.mode,
        spec.lambda,
        spec.j_main,
        spec.j_weak,
        steps
    );
    Ok(())
}

/// Adapter from a trained model to the guidance-layer trait.
pub fn model_velocity<F: Scalar>(
    model: &Model<F>,
) -> impl VelocityModel<F> + '_ {
    move |x: &Array3<F>, t: F, class: Option<usize>, j: usize| -> Result<Array3<F>> {
        let kept: Vec<usize> = (0..j).collect();
        model.velocity(x, t, class, &kept)
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let state = load_checkpoint::<f32>(&a.checkpoint)?;
    let (data, mask) = load_training_data(&state.cfg)?;
    let budgets: Vec<usize> = match &a.budgets {
        Some(s) => s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("--budgets: bad entry {p:?}")))
            })
            .collect::<Result<_>>()?,
        None => (1..=state.cfg.budget.j_max).collect(),
    };
    let rows = evaluate_budgets(&state, &data, mask.as_ref(), &budgets)?;
    let csv = budget_eval_csv(&rows);
    print!("{csv}");
    let dir = output_dir(&cfg);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("budget_eval.csv"), &csv)?;
    let losses: Vec<f64> = rows.iter().map(|r| r.val_loss).collect();
    let js: Vec<f64> = rows.iter().map(|r| r.j_tilde as f64).collect();
    if rows.len() >= 2 {
        if let Ok(r) = spearman(&losses, &js) {
            println!("# spearman(loss, budget) = {r:.3}");
        }
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let (base, j_max) = if a.xl {
        (CostConfig::xl_reference(64), 64)
    } else {
        let path = a.config.ok_or_else(|| {
            Error::config("flops: pass --config or --xl")
        })?;
        let cfg = RunConfig::load(&path)?;
        (
            CostConfig::from_backbone(&cfg.backbone, cfg.backbone.latents_per_group),
            cfg.backbone.latents_per_group,
        )
    };
    if let Some(jt) = a.budget {
        let b = cost_breakdown(&base.with_budget(jt));
        println!("component,macs");
        println!("spatial_attn_proj,{}", b.spatial_attn_proj);
        println!("spatial_attn_mat,{}", b.spatial_attn_mat);
        println!("spatial_ff,{}", b.spatial_ff);
        println!("latent_attn_proj,{}", b.latent_attn_proj);
        println!("latent_attn_mat,{}", b.latent_attn_mat);
        println!("latent_ff,{}", b.latent_ff);
        println!("read_attn_proj,{}", b.read_attn_proj);
        println!("read_attn_mat,{}", b.read_attn_mat);
        println!("read_ff,{}", b.read_ff);
        println!("write_attn_proj,{}", b.write_attn_proj);
        println!("write_attn_mat,{}", b.write_attn_mat);
        println!("write_ff,{}", b.write_ff);
        println!("total,{}", b.total());
        return Ok(());
    }
    if let Some(j_main) = a.guidance_at {
        let j_weak = select_weak_budget(&base, j_main, WEAK_COST_FRAC)?;
        let mk = |mode| GuidanceSpec {
            mode,
            lambda: 1.0,
            j_main,
            j_weak,
        };
        let cfg_cost = guided_step_cost(&base, &mk(GuidanceMode::Cfg));
        let ccfg_cost = guided_step_cost(&base, &mk(GuidanceMode::Ccfg));
        println!("mode,j_main,j_weak,macs_per_step,ratio_vs_cfg");
        println!("cfg,{j_main},{j_main},{cfg_cost},1.000");
        println!(
            "ccfg,{j_main},{j_weak},{ccfg_cost},{:.3}",
            ccfg_cost as f64 / cfg_cost as f64
        );
        return Ok(());
    }
    print!("{}", sweep_csv(&base, 1, j_max)?);
    Ok(())
}

fn cmd_attn(a: AttnArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let state = load_checkpoint::<f32>(&a.checkpoint)?;
    let model = state.ema.apply(&state.model);
    let (data, _) = load_training_data(&state.cfg)?;
    if a.index >= data.len() {
        return Err(Error::config(format!(
            "--index {} out of range ({} images)",
            a.index,
            data.len()
        )));
    }
    let jt = a.budget.unwrap_or(state.cfg.budget.j_max);
    let map = read_attention_map(
        &model,
        &data.images[a.index],
        a.t as f32,
        Some(data.labels[a.index]),
        jt,
    )?;
    let rows = state.cfg.backbone.token_rows();
    let out = match a.out {
        Some(p) => p,
        None => {
            let dir = output_dir(&cfg);
            fs::create_dir_all(&dir)?;
            dir.join(format!("attn-i{}-j{jt}.png", a.index))
        }
    };
    save_heatmap(&map, rows, &out)?;
    println!("wrote {}", out.display());

    // with a padded config, report where the attention mass sits
    if let Some(p) = &state.cfg.padded {
        let small = gen_shapes_dataset::<f32>(&state.cfg.dataset)?;
        let padded = make_padded_variant(&small, p, state.cfg.backbone.patch_size)?;
        let (mut real, mut real_n, mut pad, mut pad_n) = (0.0, 0usize, 0.0, 0usize);
        for (tok, &m) in padded.token_mask.iter().enumerate() {
            if m {
                real += map[tok];
                real_n += 1;
            } else {
                pad += map[tok];
                pad_n += 1;
            }
        }
        println!(
            "mean mass: real tokens {:.5}, padded tokens {:.5}",
            real / real_n as f64,
            pad / pad_n.max(1) as f64
        );
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("--seeds: bad entry {p:?}")))
        })
        .collect::<Result<_>>()?;
    let (rows, summary) = padded_probe::<f32>(&cfg, &seeds, a.steps)?;
    let csv = probe_csv(&rows);
    print!("{csv}");
    println!("# median val loss: dit_small {:.5}, dit_padded {:.5}, elit_padded {:.5}, elit_large {:.5}",
        summary.dit_small, summary.dit_padded, summary.elit_padded, summary.elit_large);
    println!(
        "# elit padded-vs-large gap: {:.1}% (gate: <= 10%) -> {}",
        100.0 * summary.elit_gap,
        if summary.elit_gap <= 0.10 { "pass" } else { "FAIL" }
    );
    println!(
        "# dit padded-minus-small delta: {:+.5} (reported; padding should not help)",
        summary.dit_delta
    );
    let dir = output_dir(&cfg);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("padded_probe.csv"), &csv)?;
    Ok(())
}

fn cmd_rho(a: RhoArgs) -> Result<()> {
    let dir = match a.better.as_str() {
        "lower" => MetricDirection::LowerBetter,
        "higher" => MetricDirection::HigherBetter,
        other => {
            return Err(Error::config(format!(
                "--better must be \"lower\" or \"higher\", got {other:?}"
            )))
        }
    };
    let r = rho(a.metric_high, a.metric_low, a.flops_high, a.flops_low, dir)?;
    println!("{r:.4}");
    Ok(())
}
