//! Multi-budget training loop, Adam, EMA, and the evaluation utilities.


use std::path::Path;
use std::time::Instant;

use ndarray::{Array3, ArrayD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Model;
use crate::config::RunConfig;
use crate::cost::{cost_breakdown, CostConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{rf_loss, rf_loss_grad, sample_timesteps, FlowSample};
use crate::latent::{kept_indices, sample_budget};
use crate::nn::count::Ctx;
use crate::nn::param::{c, Scalar};

/// Adam with decoupled gradient clipping. Moment tensors are kept in the
/// model's parameter-visit order.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    /// Completed optimizer steps (for bias correction).
    pub t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(model: &mut Model<F>) -> Self {
        let mut m = Vec::new();
        model.for_each_param(&mut |_: &str, v: ArrayViewMutD<F>, _g: ArrayViewMutD<F>| {
            m.push(ArrayD::zeros(v.raw_dim()));
        });
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One update from the gradients currently stored in the model.
    pub fn step(&mut self, model: &mut Model<F>, lr: f64) {
        self.t += 1;
        let b1 = c::<F>(self.beta1);
        let b2 = c::<F>(self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr_t = c::<F>(lr * bc2.sqrt() / bc1);
        let eps = c::<F>(self.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_param(&mut |_: &str,
                                   mut p: ArrayViewMutD<F>,
                                   g: ArrayViewMutD<F>| {
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for ((pv, &gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                *pv = *pv - lr_t * *mv / (vv.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<F: Scalar>(model: &mut Model<F>) -> f64 {
    let mut sq = 0.0;
    model.for_each_param(&mut |_: &str, _v: ArrayViewMutD<F>, g: ArrayViewMutD<F>| {
        sq += g.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>();
    });
    sq.sqrt()
}

/// Scale gradients down to the clip norm when they exceed it; returns the
/// pre-clip norm.
pub fn clip_gradients<F: Scalar>(model: &mut Model<F>, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm {
        let s = c::<F>(max_norm / norm);
        model.for_each_param(&mut |_: &str, _v: ArrayViewMutD<F>, mut g: ArrayViewMutD<F>| {
            g.mapv_inplace(|x| x * s);
        });
    }
    norm
}

/// Linear warmup to `lr` over the first `warmup_frac` of training, constant
/// afterwards.
pub fn lr_at(step: u64, total_steps: u64, lr: f64, warmup_frac: f64) -> f64 {
    let warmup = ((total_steps as f64 * warmup_frac).round() as u64).max(1);
    if step < warmup {
        lr * (step + 1) as f64 / warmup as f64
    } else {
        lr
    }
}

/// Shadow parameter copies updated as `ema ← β·ema + (1−β)·param`.
#[derive(Debug, Clone)]
pub struct Ema<F: Scalar> {
    pub beta: f64,
    pub shadow: Vec<ArrayD<F>>,
}

impl<F: Scalar> Ema<F> {
    pub fn new(model: &mut Model<F>, beta: f64) -> Self {
        let mut shadow = Vec::new();
        model.for_each_param(&mut |_: &str, v: ArrayViewMutD<F>, _g: ArrayViewMutD<F>| {
            shadow.push(v.to_owned());
        });
        Ema { beta, shadow }
    }

    pub fn update(&mut self, model: &mut Model<F>) {
        let b = c::<F>(self.beta);
        let mut idx = 0;
        let shadow = &mut self.shadow;
        model.for_each_param(&mut |_: &str, v: ArrayViewMutD<F>, _g: ArrayViewMutD<F>| {
            for (sv, &pv) in shadow[idx].iter_mut().zip(v.iter()) {
                *sv = b * *sv + (F::one() - b) * pv;
            }
            idx += 1;
        });
    }

    /// A copy of the model carrying the EMA weights.
    pub fn apply(&self, model: &Model<F>) -> Model<F> {
        let mut out = model.clone();
        let mut idx = 0;
        out.for_each_param(&mut |_: &str, mut v: ArrayViewMutD<F>, _g: ArrayViewMutD<F>| {
            v.assign(&self.shadow[idx].view());
            idx += 1;
        });
        out
    }
}

/// Everything a resumable run consists of.
#[derive(Debug)]
pub struct TrainState<F: Scalar> {
    pub cfg: RunConfig,
    pub model: Model<F>,
    pub opt: Adam<F>,
    pub ema: Ema<F>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.training.seed;
        let mut model = Model::new(cfg.backbone.clone(), seed)?;
        let opt = Adam::new(&mut model);
        let ema = Ema::new(&mut model, cfg.training.ema_beta);
        // training stream is distinct from the init stream
        let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        Ok(TrainState {
            cfg,
            model,
            opt,
            ema,
            step: 0,
            rng,
        })
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub j_tilde: usize,
    pub loss: f64,
    pub lr: f64,
    pub wallclock: f64,
}

/// Run `steps` additional iterations. Appends JSONL records to `log` when
/// given; the returned records cover only this call.
pub fn train_loop<F: Scalar>(
    state: &mut TrainState<F>,
    data: &Dataset<F>,
    pixel_mask: Option<&ArrayD<bool>>,
    steps: u64,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<Vec<LogRecord>> {
    if data.is_empty() {
        return Err(Error::config("train: empty dataset"));
    }
    let cfg = state.cfg.clone();
    let tcfg = &cfg.training;
    let latent = cfg.backbone.latent_enabled;
    let j = cfg.backbone.latents_per_group;
    let dist = cfg.flow.distribution();
    let start = Instant::now();
    let mut records = Vec::new();

    for _ in 0..steps {
        // one budget per iteration, shared by the whole batch
        let (j_tilde, kept) = if latent {
            let b = sample_budget(&cfg.budget, &mut state.rng);
            let kept = kept_indices(tcfg.drop_strategy, j, b, &mut state.rng)?;
            (b.j_tilde, kept)
        } else {
            (0, vec![0])
        };

        state.model.zero_grad();
        let mut loss_sum = 0.0;
        for _ in 0..tcfg.batch_size {
            let i = state.rng.gen_range(0..data.len());
            let x1 = data.images[i].clone().into_dyn();
            let class = Some(data.labels[i]);
            let t = sample_timesteps::<F, _>(1, &dist, &mut state.rng)?[0];
            let x0 = ArrayD::from_shape_simple_fn(x1.raw_dim(), || F::std_normal(&mut state.rng));
            let fs = FlowSample::new(x0, x1, t)?;
            let xt3 = fs
                .xt
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::shape(format!("train: {e}")))?;
            let mut ctx = Ctx::plain();
            let (pred, cache) = state
                .model
                .forward(&xt3, t, class, &kept, None, &mut ctx)?;
            let pred_d = pred.into_dyn();
            let loss = rf_loss(&pred_d, &fs.x0, &fs.x1, pixel_mask)?;
            loss_sum += loss.to_f64();
            let mut g = rf_loss_grad(&pred_d, &fs.x0, &fs.x1, pixel_mask)?;
            let bs = c::<F>(1.0 / tcfg.batch_size as f64);
            g.mapv_inplace(|v| v * bs);
            let g3 = g
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::shape(format!("train: {e}")))?;
            state.model.backward(&cache, &g3)?;
        }
        let loss = loss_sum / tcfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: state.step,
                detail: format!("loss {loss} at J̃={j_tilde}"),
            });
        }

        clip_gradients(&mut state.model, tcfg.grad_clip);
        let lr = lr_at(state.step, tcfg.steps, tcfg.lr, tcfg.warmup_frac);
        state.opt.step(&mut state.model, lr);
        state.ema.update(&mut state.model);
        state.step += 1;

        if state.step % tcfg.log_every == 0 || state.step == 1 {
            let rec = LogRecord {
                step: state.step,
                j_tilde,
                loss,
                lr,
                wallclock: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)
                    .map_err(|e| Error::checkpoint(format!("metrics log: {e}")))?;
                writeln!(w)?;
            }
            records.push(rec);
        }
    }
    Ok(records)
}

/// Per-budget validation row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BudgetEval {
    pub j_tilde: usize,
    pub val_loss: f64,
    pub flops: u64,
    /// Set when the budget lies outside the trained range.
    pub untrained: bool,
}

/// Paired per-budget evaluation: the same held-out (image, noise, t) triples
/// are reused for every budget so rows differ only through J̃. Evaluates the
/// EMA weights.
pub fn evaluate_budgets<F: Scalar>(
    state: &TrainState<F>,
    data: &Dataset<F>,
    pixel_mask: Option<&ArrayD<bool>>,
    budgets: &[usize],
) -> Result<Vec<BudgetEval>> {
    if data.is_empty() {
        return Err(Error::config("eval: empty dataset"));
    }
    let cfg = &state.cfg;
    let model = state.ema.apply(&state.model);
    let dist = cfg.flow.distribution();
    // fixed evaluation stream, independent of training progress
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed.wrapping_add(0xe7a1));
    let n = cfg.training.eval_samples;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.gen_range(0..data.len());
        let t = sample_timesteps::<F, _>(1, &dist, &mut rng)?[0];
        let x0 = ArrayD::from_shape_simple_fn(
            data.images[i].clone().into_dyn().raw_dim(),
            || F::std_normal(&mut rng),
        );
        pairs.push((i, t, x0));
    }

    let mut rows = Vec::with_capacity(budgets.len());
    for &jt in budgets {
        if jt == 0 || jt > cfg.backbone.latents_per_group {
            return Err(Error::config(format!("eval: budget {jt} out of range")));
        }
        let kept: Vec<usize> = (0..jt).collect();
        let mut loss_sum = 0.0;
        for (i, t, x0) in &pairs {
            let x1 = data.images[*i].clone().into_dyn();
            let fs = FlowSample::new(x0.clone(), x1, *t)?;
            let xt3 = fs
                .xt
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::shape(format!("eval: {e}")))?;
            let pred = model.velocity(&xt3, *t, Some(data.labels[*i]), &kept)?.into_dyn();
            loss_sum += rf_loss(&pred, &fs.x0, &fs.x1, pixel_mask)?.to_f64();
        }
        let flops = cost_breakdown(&CostConfig::from_backbone(&cfg.backbone, jt)).total();
        rows.push(BudgetEval {
            j_tilde: jt,
            val_loss: loss_sum / n as f64,
            flops,
            untrained: jt < cfg.budget.j_min || jt > cfg.budget.j_max,
        });
    }
    Ok(rows)
}

/// CSV for the eval-budgets rows.
pub fn budget_eval_csv(rows: &[BudgetEval]) -> String {
    let mut out = String::from("j_tilde,val_loss,flops,untrained\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            r.j_tilde, r.val_loss, r.flops, r.untrained
        ));
    }
    out
}

/// Mean Read attention received by every spatial token, averaged over latent
/// queries and heads. Returns one weight per token on the token grid;
/// weights within each group sum to 1.
pub fn read_attention_map<F: Scalar>(
    model: &Model<F>,
    x: &Array3<F>,
    t: F,
    class: Option<usize>,
    j_tilde: usize,
) -> Result<Vec<f64>> {
    if !model.cfg.latent_enabled {
        return Err(Error::config("attention map: model has no Read layer"));
    }
    let kept: Vec<usize> = (0..j_tilde).collect();
    let mut ctx = Ctx::plain();
    let (_, cache) = model.forward(x, t, class, &kept, None, &mut ctx)?;
    let rc = cache.read.as_ref().expect("read cache");
    let mut map = vec![0.0; model.cfg.num_tokens()];
    for (ki, scores) in crate::latent::CrossLayer::mean_key_attention(rc) {
        for (&tok, &sv) in ki.iter().zip(scores.iter()) {
            map[tok] = sv.to_f64();
        }
    }
    Ok(map)
}

/// Render a per-token map as a grayscale PNG, one pixel per token, scaled to
/// the observed min/max.
pub fn save_heatmap(map: &[f64], rows: usize, path: &Path) -> Result<()> {
    if map.len() != rows * rows {
        return Err(Error::shape(format!(
            "heatmap: {} values for a {rows}x{rows} grid",
            map.len()
        )));
    }
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = map
        .iter()
        .map(|&v| (255.0 * (v - lo) / span).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(rows as u32, rows as u32, pixels)
        .expect("buffer matches dims");
    img.save(path)
        .map_err(|e| Error::checkpoint(format!("heatmap save: {e}")))?;
    Ok(())
}

/// Spearman rank correlation between two equal-length samples.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::config("spearman: need two samples of equal length >= 2"));
    }
    let rank = |xs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite"));
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            // average ranks over ties
            let mut k = i;
            while k + 1 < idx.len() && xs[idx[k + 1]] == xs[idx[i]] {
                k += 1;
            }
            let avg = (i + k) as f64 / 2.0;
            for &m in &idx[i..=k] {
                r[m] = avg;
            }
            i = k + 1;
        }
        r
    };
    let ra = rank(a);
    let rb = rank(b);
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(rb.iter()) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::config("spearman: constant sample"));
    }
    Ok(num / (da * db).sqrt())
}
