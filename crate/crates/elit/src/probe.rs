//! The zero-padding compute-reallocation probe.
//!
//! Four models are trained on the same underlying shapes distribution:
//!
//! * `dit_small`: plain DiT on the original images.
//! * `dit_padded`: plain DiT on zero-padded images (4x tokens, loss masked
//!   to the real region).
//! * `elit_padded`: the latent-interface model on the same padded images.
//! * `elit_large`: the latent-interface model on natively large images with
//!   the same token count as the padded runs.
//!
//! The question is whether the latent interface can spend the extra tokens'
//! compute on the real content. Val losses are masked to the real region for
//! the padded runs and unmasked for the native runs.

use crate::config::RunConfig;
use crate::data::{gen_shapes_dataset, make_padded_variant, PaddedVariantSpec};
use crate::error::Result;
use crate::latent::BudgetSpec;
use crate::nn::param::Scalar;
use crate::train::{evaluate_budgets, train_loop, LogRecord, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeModel {
    DitSmall,
    DitPadded,
    ElitPadded,
    ElitLarge,
}

pub const PROBE_MODELS: [ProbeModel; 4] = [
    ProbeModel::DitSmall,
    ProbeModel::DitPadded,
    ProbeModel::ElitPadded,
    ProbeModel::ElitLarge,
];

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbeRow {
    pub model: ProbeModel,
    pub seed: u64,
    pub val_loss: f64,
    pub flops: u64,
}

/// Summary across seeds: medians plus the two headline comparisons.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbeSummary {
    pub dit_small: f64,
    pub dit_padded: f64,
    pub elit_padded: f64,
    pub elit_large: f64,
    /// |elit_padded − elit_large| / elit_large (the hard gate is ≤ 0.10).
    pub elit_gap: f64,
    /// dit_padded − dit_small (directional; padding should not help much).
    pub dit_delta: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Build the run config for one probe arm from the shared base. The base
/// config describes the small-image problem with an ELIT backbone; the probe
/// derives the padded/native-large and plain-DiT variants from it.
pub fn probe_config(base: &RunConfig, model: ProbeModel, seed: u64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.training.seed = seed;
    cfg.padded = None;
    let pad = PaddedVariantSpec { pad_factor: 4 };
    let side = pad.side()?;
    match model {
        ProbeModel::DitSmall => {
            cfg.backbone.latent_enabled = false;
        }
        ProbeModel::DitPadded => {
            cfg.backbone.latent_enabled = false;
            cfg.backbone.image_size = base.backbone.image_size * side;
            cfg.padded = Some(pad);
        }
        ProbeModel::ElitPadded => {
            cfg.backbone.image_size = base.backbone.image_size * side;
            cfg.padded = Some(pad);
        }
        ProbeModel::ElitLarge => {
            cfg.backbone.image_size = base.backbone.image_size * side;
            cfg.dataset.image_size = base.dataset.image_size * side;
        }
    }
    if cfg.backbone.latent_enabled {
        // fixed full budget: the probe isolates token reallocation, not
        // elastic training
        let j = cfg.backbone.latents_per_group;
        cfg.budget = BudgetSpec { j_min: j, j_max: j };
        cfg.guidance.j_main = j;
        cfg.guidance.j_weak = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train one arm and return its row plus the training log.
pub fn run_probe_arm<F: Scalar>(
    base: &RunConfig,
    model: ProbeModel,
    seed: u64,
    steps: u64,
) -> Result<(ProbeRow, Vec<LogRecord>)> {
    let cfg = probe_config(base, model, seed)?;
    let mut ds_spec = cfg.dataset.clone();
    ds_spec.seed = ds_spec.seed.wrapping_add(seed);
    let small = gen_shapes_dataset::<F>(&ds_spec)?;
    let (data, mask) = match &cfg.padded {
        Some(p) => {
            let padded = make_padded_variant(&small, p, cfg.backbone.patch_size)?;
            (padded.data.clone(), Some(padded.pixel_mask))
        }
        None => (small, None),
    };
    let mut state = TrainState::<F>::new(cfg.clone())?;
    let log = train_loop(&mut state, &data, mask.as_ref(), steps, None)?;
    let jt = if cfg.backbone.latent_enabled {
        cfg.backbone.latents_per_group
    } else {
        1
    };
    let eval = evaluate_budgets(&state, &data, mask.as_ref(), &[jt])?;
    Ok((
        ProbeRow {
            model,
            seed,
            val_loss: eval[0].val_loss,
            flops: eval[0].flops,
        },
        log,
    ))
}

/// Run all four arms across the given seeds.
pub fn padded_probe<F: Scalar>(
    base: &RunConfig,
    seeds: &[u64],
    steps: u64,
) -> Result<(Vec<ProbeRow>, ProbeSummary)> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for model in PROBE_MODELS {
            let (row, _) = run_probe_arm::<F>(base, model, seed, steps)?;
            rows.push(row);
        }
    }
    let by = |m: ProbeModel| {
        median(
            rows.iter()
                .filter(|r| r.model == m)
                .map(|r| r.val_loss)
                .collect(),
        )
    };
    let (ds, dp, ep, el) = (
        by(ProbeModel::DitSmall),
        by(ProbeModel::DitPadded),
        by(ProbeModel::ElitPadded),
        by(ProbeModel::ElitLarge),
    );
    let summary = ProbeSummary {
        dit_small: ds,
        dit_padded: dp,
        elit_padded: ep,
        elit_large: el,
        elit_gap: (ep - el).abs() / el,
        dit_delta: dp - ds,
    };
    Ok((rows, summary))
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("model,seed,val_loss,flops\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            serde_json::to_value(r.model)
                .expect("enum")
                .as_str()
                .expect("string")
                .to_string(),
            r.seed,
            r.val_loss,
            r.flops
        ));
    }
    out
}
