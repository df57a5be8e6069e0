//! The latent interface: shared per-group learnable latents, grouped
//! Read/Write cross-attention, and the tail-drop budget machinery.
//!
//! Latent ordering is group-major: group 0's latents come first, and within a
//! group latent `i` is initialized from shared embedding row `i`. Tail
//! dropping is therefore a per-group prefix selection.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::activation::{gelu, gelu_backward, silu, silu_backward};
use crate::nn::attention::{AttnCache, AttnCore};
use crate::nn::count::{Bucket, Ctx};
use crate::nn::norm::{LayerNorm, LnCache};
use crate::nn::param::{ParamVisitor, Scalar};
use crate::nn::{Init, Linear};

/// Regular non-overlapping 2-D partition of the token grid into groups.
#[derive(Debug, Clone)]
pub struct GroupLayout {
    pub token_grid: (usize, usize),
    pub group_grid: (usize, usize),
    /// Spatial token indices per group, group-major.
    pub groups: Vec<Vec<usize>>,
}

impl GroupLayout {
    pub fn new(token_grid: (usize, usize), group_grid: (usize, usize)) -> Result<Self> {
        let (rows, cols) = token_grid;
        let (gh, gw) = group_grid;
        if gh == 0 || gw == 0 || rows == 0 || cols == 0 {
            return Err(Error::config("group layout: zero-sized grid"));
        }
        if rows % gh != 0 || cols % gw != 0 {
            return Err(Error::config(format!(
                "token grid {rows}x{cols} not divisible by group grid {gh}x{gw}"
            )));
        }
        let (bh, bw) = (rows / gh, cols / gw);
        let mut groups = Vec::with_capacity(gh * gw);
        for gr in 0..gh {
            for gc in 0..gw {
                let mut idx = Vec::with_capacity(bh * bw);
                for r in 0..bh {
                    for c in 0..bw {
                        idx.push((gr * bh + r) * cols + (gc * bw + c));
                    }
                }
                groups.push(idx);
            }
        }
        Ok(GroupLayout {
            token_grid,
            group_grid,
            groups,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_size(&self) -> usize {
        self.token_grid.0 * self.token_grid.1 / self.num_groups()
    }

    /// Group index of a spatial token.
    pub fn membership(&self, token: usize) -> usize {
        let (_, cols) = self.token_grid;
        let (gh, gw) = self.group_grid;
        let (bh, bw) = (self.token_grid.0 / gh, cols / gw);
        let r = token / cols;
        let c = token % cols;
        (r / bh) * gw + (c / bw)
    }
}

/// Rearrange spatial tokens into a `[G, N/G, d]` grouped view.
pub fn partition_groups<F: Scalar>(
    tokens: &Array2<F>,
    layout: &GroupLayout,
) -> Result<Array3<F>> {
    let n = layout.token_grid.0 * layout.token_grid.1;
    if tokens.nrows() != n {
        return Err(Error::shape(format!(
            "partition_groups: {} tokens, layout expects {n}",
            tokens.nrows()
        )));
    }
    let g = layout.num_groups();
    let per = layout.group_size();
    let d = tokens.ncols();
    let mut out = Array3::zeros((g, per, d));
    for (gi, idx) in layout.groups.iter().enumerate() {
        for (slot, &ti) in idx.iter().enumerate() {
            out.slice_mut(s![gi, slot, ..]).assign(&tokens.row(ti));
        }
    }
    Ok(out)
}

/// Inverse of [`partition_groups`]; exact index round-trip.
pub fn merge_groups<F: Scalar>(grouped: &Array3<F>, layout: &GroupLayout) -> Result<Array2<F>> {
    let (g, per, d) = grouped.dim();
    if g != layout.num_groups() || per != layout.group_size() {
        return Err(Error::shape("merge_groups: layout mismatch"));
    }
    let n = g * per;
    let mut out = Array2::zeros((n, d));
    for (gi, idx) in layout.groups.iter().enumerate() {
        for (slot, &ti) in idx.iter().enumerate() {
            out.row_mut(ti).assign(&grouped.slice(s![gi, slot, ..]));
        }
    }
    Ok(out)
}

/// Training-time budget range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BudgetSpec {
    pub j_min: usize,
    pub j_max: usize,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec { j_min: 4, j_max: 16 }
    }
}

impl BudgetSpec {
    pub fn validate(&self, j: usize) -> Result<()> {
        if self.j_min < 1 || self.j_min > self.j_max || self.j_max > j {
            return Err(Error::config(format!(
                "budget.j_min: need 1 <= j_min ({}) <= j_max ({}) <= J ({j})",
                self.j_min, self.j_max
            )));
        }
        Ok(())
    }
}

/// Retained latents per group for one iteration / one inference call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Budget {
    pub j_tilde: usize,
}

/// One uniform draw over `{j_min, …, j_max}` inclusive. Drawn once per
/// training iteration; the caller shares the value across all workers.
pub fn sample_budget<R: Rng>(spec: &BudgetSpec, rng: &mut R) -> Budget {
    Budget {
        j_tilde: rng.gen_range(spec.j_min..=spec.j_max),
    }
}

/// Which latent indices an iteration keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropStrategy {
    /// Keep the first `J̃` latents of every group (prefix keeping).
    Tail,
    /// Ablation: keep a random sorted subset of size `J̃` (same across groups).
    Random,
}

/// Kept per-group latent indices for a budget under the given strategy.
pub fn kept_indices<R: Rng>(
    strategy: DropStrategy,
    j: usize,
    budget: Budget,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if budget.j_tilde > j {
        return Err(Error::config(format!(
            "budget J̃={} exceeds J={j}",
            budget.j_tilde
        )));
    }
    match strategy {
        DropStrategy::Tail => Ok((0..budget.j_tilde).collect()),
        DropStrategy::Random => {
            let mut all: Vec<usize> = (0..j).collect();
            all.shuffle(rng);
            let mut kept: Vec<usize> = all[..budget.j_tilde].to_vec();
            kept.sort_unstable();
            Ok(kept)
        }
    }
}

/// Replicate the selected shared embeddings once per group (group-major).
pub fn expand_latents<F: Scalar>(
    shared: &Array2<F>,
    num_groups: usize,
    kept: &[usize],
) -> Result<Array2<F>> {
    let j = shared.nrows();
    let d = shared.ncols();
    if kept.iter().any(|&i| i >= j) {
        return Err(Error::config(format!(
            "latent index out of range (J={j}, kept={kept:?})"
        )));
    }
    let jt = kept.len();
    let mut out = Array2::zeros((num_groups * jt, d));
    for g in 0..num_groups {
        for (slot, &i) in kept.iter().enumerate() {
            out.row_mut(g * jt + slot).assign(&shared.row(i));
        }
    }
    Ok(out)
}

/// Gradient counterpart of [`expand_latents`]: every group's copy contributes
/// to the same shared row.
pub fn expand_latents_backward<F: Scalar>(
    grad_out: &Array2<F>,
    num_groups: usize,
    kept: &[usize],
    shared_grad: &mut Array2<F>,
) {
    let jt = kept.len();
    for g in 0..num_groups {
        for (slot, &i) in kept.iter().enumerate() {
            let gr = grad_out.row(g * jt + slot);
            let mut acc = shared_grad.row_mut(i);
            acc += &gr;
        }
    }
}

/// Retain the per-group prefix `0..J̃` from a full `[G·J, d]` latent sequence.
pub fn drop_tail<F: Scalar>(
    l_full: &Array2<F>,
    num_groups: usize,
    j: usize,
    budget: Budget,
) -> Result<Array2<F>> {
    if l_full.nrows() != num_groups * j {
        return Err(Error::shape(format!(
            "drop_tail: {} latents, expected {}",
            l_full.nrows(),
            num_groups * j
        )));
    }
    if budget.j_tilde > j {
        return Err(Error::config(format!(
            "budget J̃={} exceeds J={j}",
            budget.j_tilde
        )));
    }
    let jt = budget.j_tilde;
    let d = l_full.ncols();
    let mut out = Array2::zeros((num_groups * jt, d));
    for g in 0..num_groups {
        out.slice_mut(s![g * jt..(g + 1) * jt, ..])
            .assign(&l_full.slice(s![g * j..g * j + jt, ..]));
    }
    Ok(out)
}

/// Buckets a cross layer reports its matmuls under.
#[derive(Debug, Clone, Copy)]
pub struct CrossBuckets {
    pub attn_proj: Bucket,
    pub attn_mat: Bucket,
    pub ff: Bucket,
}

pub const READ_BUCKETS: CrossBuckets = CrossBuckets {
    attn_proj: Bucket::ReadAttnProj,
    attn_mat: Bucket::ReadAttnMat,
    ff: Bucket::ReadFf,
};

pub const WRITE_BUCKETS: CrossBuckets = CrossBuckets {
    attn_proj: Bucket::WriteAttnProj,
    attn_mat: Bucket::WriteAttnMat,
    ff: Bucket::WriteFf,
};

/// Grouped cross-attention layer: residual attention followed by a residual
/// MLP with hidden width `d` (no expansion).
///
/// With `modulated = true` (Read), both sub-layers are adaLN-Zero modulated
/// by the condition vector, so the layer is an exact identity at init. With
/// `modulated = false` (Write default), the attention output projection and
/// second MLP weight are zero-initialized instead, preserving the identity.
#[derive(Debug, Clone)]
pub struct CrossLayer<F: Scalar> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub core: AttnCore<F>,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub ln_mlp: LayerNorm,
    pub mlp1: Linear<F>,
    pub mlp2: Linear<F>,
    /// `silu(cond) -> 6d` zero-initialized modulation, present when adaLN-Zero
    /// is enabled for this layer.
    pub modulation: Option<Linear<F>>,
    buckets: CrossBuckets,
}

/// Forward activations needed by the backward pass.
pub struct CrossCache<F: Scalar> {
    cond: Array1<F>,
    mod6: Option<Vec<F>>,
    ln_q: LnCache<F>,
    h: Array2<F>,
    hm: Array2<F>,
    ln_kv: LnCache<F>,
    hk: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Per-group attention caches plus the (q rows, kv rows) index lists.
    pub attn: Vec<(AttnCache<F>, Vec<usize>, Vec<usize>)>,
    ao_pre: Array2<F>,
    ao: Array2<F>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    h2m: Array2<F>,
    m1: Array2<F>,
    mg: Array2<F>,
    m2: Array2<F>,
}

fn gather_rows<F: Scalar>(x: &Array2<F>, idx: &[usize]) -> Array2<F> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (slot, &i) in idx.iter().enumerate() {
        out.row_mut(slot).assign(&x.row(i));
    }
    out
}

fn scatter_rows_add<F: Scalar>(target: &mut Array2<F>, idx: &[usize], rows: &Array2<F>) {
    for (slot, &i) in idx.iter().enumerate() {
        let mut t = target.row_mut(i);
        t += &rows.row(slot);
    }
}

/// `x * (1 + scale) + shift`, broadcasting over rows.
fn modulate<F: Scalar>(x: &Array2<F>, shift: &[F], scale: &[F]) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for ((v, &sc), &sh) in row.iter_mut().zip(scale.iter()).zip(shift.iter()) {
            *v = *v * (F::one() + sc) + sh;
        }
    }
    out
}

impl<F: Scalar> CrossLayer<F> {
    pub fn new<R: Rng>(
        rng: &mut R,
        d: usize,
        heads: usize,
        modulated: bool,
        buckets: CrossBuckets,
    ) -> Self {
        // Identity at init comes from zero gates when modulated, otherwise
        // from zero-initialized output projections.
        let out_init = if modulated { Init::TruncNormal } else { Init::Zeros };
        CrossLayer {
            wq: Linear::new(rng, d, d, Init::TruncNormal),
            wk: Linear::new(rng, d, d, Init::TruncNormal),
            wv: Linear::new(rng, d, d, Init::TruncNormal),
            wo: Linear::new(rng, d, d, out_init),
            core: AttnCore::new(d, heads),
            ln_q: LayerNorm,
            ln_kv: LayerNorm,
            ln_mlp: LayerNorm,
            mlp1: Linear::new(rng, d, d, Init::TruncNormal),
            mlp2: Linear::new(rng, d, d, out_init),
            modulation: modulated.then(|| Linear::new(rng, d, 6 * d, Init::Zeros)),
            buckets,
        }
    }

    /// `x_q`: query-side tokens, `x_kv`: key/value-side tokens. `q_groups` and
    /// `kv_groups` pair up; attention is restricted within each pair.
    /// `kv_mask` (indexed by `x_kv` row) removes keys from every softmax.
    pub fn forward(
        &self,
        x_q: &Array2<F>,
        x_kv: &Array2<F>,
        cond: &Array1<F>,
        q_groups: &[Vec<usize>],
        kv_groups: &[Vec<usize>],
        kv_mask: Option<&[bool]>,
        ctx: &mut Ctx,
    ) -> Result<(Array2<F>, CrossCache<F>)> {
        if q_groups.len() != kv_groups.len() {
            return Err(Error::shape(format!(
                "cross layer: {} query groups vs {} kv groups",
                q_groups.len(),
                kv_groups.len()
            )));
        }
        let d = x_q.ncols();
        let (mod6, shift1, scale1, gate1, shift2, scale2, gate2) =
            self.modulation_params(cond, d);

        let (h, ln_q) = self.ln_q.forward(x_q);
        let hm = match (&shift1, &scale1) {
            (Some(sh), Some(sc)) => modulate(&h, sh, sc),
            _ => h.clone(),
        };
        let q = self.wq.forward(&hm, ctx, self.buckets.attn_proj);
        let (hk, ln_kv) = self.ln_kv.forward(x_kv);
        let k = self.wk.forward(&hk, ctx, self.buckets.attn_proj);
        let v = self.wv.forward(&hk, ctx, self.buckets.attn_proj);

        let mut ao_pre = Array2::zeros((x_q.nrows(), d));
        let mut attn = Vec::with_capacity(q_groups.len());
        for (qi, ki) in q_groups.iter().zip(kv_groups.iter()) {
            let qg = gather_rows(&q, qi);
            let kg = gather_rows(&k, ki);
            let vg = gather_rows(&v, ki);
            let mask_g: Option<Vec<bool>> =
                kv_mask.map(|m| ki.iter().map(|&i| m[i]).collect());
            let (og, cache) = self.core.forward(
                &qg,
                &kg,
                &vg,
                None,
                mask_g.as_deref(),
                ctx,
                self.buckets.attn_mat,
            );
            for (slot, &i) in qi.iter().enumerate() {
                ao_pre.row_mut(i).assign(&og.row(slot));
            }
            attn.push((cache, qi.clone(), ki.clone()));
        }
        let ao = self.wo.forward(&ao_pre, ctx, self.buckets.attn_proj);
        let x_mid = match &gate1 {
            Some(g) => {
                let mut out = x_q.clone();
                for (mut row, ar) in out.axis_iter_mut(Axis(0)).zip(ao.axis_iter(Axis(0))) {
                    for ((v, &a), &gg) in row.iter_mut().zip(ar.iter()).zip(g.iter()) {
                        *v = *v + gg * a;
                    }
                }
                out
            }
            None => x_q + &ao,
        };

        let (h2, ln2) = self.ln_mlp.forward(&x_mid);
        let h2m = match (&shift2, &scale2) {
            (Some(sh), Some(sc)) => modulate(&h2, sh, sc),
            _ => h2.clone(),
        };
        let m1 = self.mlp1.forward(&h2m, ctx, self.buckets.ff);
        let mg = gelu(&m1);
        let m2 = self.mlp2.forward(&mg, ctx, self.buckets.ff);
        let out = match &gate2 {
            Some(g) => {
                let mut out = x_mid.clone();
                for (mut row, mr) in out.axis_iter_mut(Axis(0)).zip(m2.axis_iter(Axis(0))) {
                    for ((v, &m), &gg) in row.iter_mut().zip(mr.iter()).zip(g.iter()) {
                        *v = *v + gg * m;
                    }
                }
                out
            }
            None => &x_mid + &m2,
        };

        Ok((
            out,
            CrossCache {
                cond: cond.clone(),
                mod6,
                ln_q,
                h,
                hm,
                ln_kv,
                hk,
                q,
                k,
                v,
                attn,
                ao_pre,
                ao,
                ln2,
                h2,
                h2m,
                m1,
                mg,
                m2,
            },
        ))
    }

    #[allow(clippy::type_complexity)]
    fn modulation_params(
        &self,
        cond: &Array1<F>,
        d: usize,
    ) -> (
        Option<Vec<F>>,
        Option<Vec<F>>,
        Option<Vec<F>>,
        Option<Vec<F>>,
        Option<Vec<F>>,
        Option<Vec<F>>,
        Option<Vec<F>>,
    ) {
        match &self.modulation {
            None => (None, None, None, None, None, None, None),
            Some(lin) => {
                let act = silu(cond.as_slice().expect("contiguous cond"));
                let act_arr = Array2::from_shape_vec((1, d), act).expect("cond len");
                let mut ctx = Ctx::plain();
                let p = lin.forward(&act_arr, &mut ctx, Bucket::Unmodeled);
                let p: Vec<F> = p.row(0).to_vec();
                let chunk = |i: usize| Some(p[i * d..(i + 1) * d].to_vec());
                (Some(p.clone()), chunk(0), chunk(1), chunk(2), chunk(3), chunk(4), chunk(5))
            }
        }
    }

    /// Returns `(grad_x_q, grad_x_kv, grad_cond)`.
    pub fn backward(
        &mut self,
        cache: &CrossCache<F>,
        gy: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, Array1<F>) {
        let d = gy.ncols();
        let (shift1, scale1, gate1, shift2, scale2, gate2) = match &cache.mod6 {
            None => (None, None, None, None, None, None),
            Some(p) => {
                let chunk = |i: usize| Some(p[i * d..(i + 1) * d].to_vec());
                (chunk(0), chunk(1), chunk(2), chunk(3), chunk(4), chunk(5))
            }
        };
        // grads of the six modulation chunks (shift1, scale1, gate1, shift2, scale2, gate2)
        let mut gmod = vec![F::zero(); 6 * d];

        // MLP sub-layer
        let mut g_mid = gy.clone();
        let g_m2 = match &gate2 {
            Some(g) => {
                for (gr, m2r) in gy.axis_iter(Axis(0)).zip(cache.m2.axis_iter(Axis(0))) {
                    for (j, (&gv, &mv)) in gr.iter().zip(m2r.iter()).enumerate() {
                        gmod[5 * d + j] = gmod[5 * d + j] + gv * mv;
                    }
                }
                let mut gm = gy.clone();
                for mut row in gm.axis_iter_mut(Axis(0)) {
                    for (v, &gg) in row.iter_mut().zip(g.iter()) {
                        *v = *v * gg;
                    }
                }
                gm
            }
            None => gy.clone(),
        };
        let g_mg = self.mlp2.backward(&cache.mg, &g_m2);
        let g_m1 = gelu_backward(&cache.m1, &g_mg);
        let g_h2m = self.mlp1.backward(&cache.h2m, &g_m1);
        let g_h2 = match (&shift2, &scale2) {
            (Some(_), Some(sc)) => {
                for (gr, hr) in g_h2m.axis_iter(Axis(0)).zip(cache.h2.axis_iter(Axis(0))) {
                    for (j, (&gv, &hv)) in gr.iter().zip(hr.iter()).enumerate() {
                        gmod[3 * d + j] = gmod[3 * d + j] + gv; // shift2
                        gmod[4 * d + j] = gmod[4 * d + j] + gv * hv; // scale2
                    }
                }
                let mut gh = g_h2m.clone();
                for mut row in gh.axis_iter_mut(Axis(0)) {
                    for (v, &sc) in row.iter_mut().zip(sc.iter()) {
                        *v = *v * (F::one() + sc);
                    }
                }
                gh
            }
            _ => g_h2m,
        };
        g_mid += &self.ln_mlp.backward(&cache.ln2, &g_h2);

        // attention sub-layer
        let mut g_xq = g_mid.clone();
        let g_ao = match &gate1 {
            Some(g) => {
                for (gr, ar) in g_mid.axis_iter(Axis(0)).zip(cache.ao.axis_iter(Axis(0))) {
                    for (j, (&gv, &av)) in gr.iter().zip(ar.iter()).enumerate() {
                        gmod[2 * d + j] = gmod[2 * d + j] + gv * av; // gate1
                    }
                }
                let mut ga = g_mid.clone();
                for mut row in ga.axis_iter_mut(Axis(0)) {
                    for (v, &gg) in row.iter_mut().zip(g.iter()) {
                        *v = *v * gg;
                    }
                }
                ga
            }
            None => g_mid.clone(),
        };
        let g_ao_pre = self.wo.backward(&cache.ao_pre, &g_ao);

        let mut g_q = Array2::zeros(cache.q.raw_dim());
        let mut g_k = Array2::zeros(cache.k.raw_dim());
        let mut g_v = Array2::zeros(cache.v.raw_dim());
        for (attn_cache, qi, ki) in &cache.attn {
            let g_og = gather_rows(&g_ao_pre, qi);
            let (gq, gk, gv) = self.core.backward(attn_cache, None, &g_og);
            scatter_rows_add(&mut g_q, qi, &gq);
            scatter_rows_add(&mut g_k, ki, &gk);
            scatter_rows_add(&mut g_v, ki, &gv);
        }
        let g_hm = self.wq.backward(&cache.hm, &g_q);
        let g_hk = self.wk.backward(&cache.hk, &g_k) + self.wv.backward(&cache.hk, &g_v);
        let g_xkv = self.ln_kv.backward(&cache.ln_kv, &g_hk);
        let g_h = match (&shift1, &scale1) {
            (Some(_), Some(sc)) => {
                for (gr, hr) in g_hm.axis_iter(Axis(0)).zip(cache.h.axis_iter(Axis(0))) {
                    for (j, (&gv, &hv)) in gr.iter().zip(hr.iter()).enumerate() {
                        gmod[j] = gmod[j] + gv; // shift1
                        gmod[d + j] = gmod[d + j] + gv * hv; // scale1
                    }
                }
                let mut gh = g_hm.clone();
                for mut row in gh.axis_iter_mut(Axis(0)) {
                    for (v, &sc) in row.iter_mut().zip(sc.iter()) {
                        *v = *v * (F::one() + sc);
                    }
                }
                gh
            }
            _ => g_hm,
        };
        g_xq += &self.ln_q.backward(&cache.ln_q, &g_h);

        // modulation path back into cond
        let mut g_cond = Array1::zeros(d);
        if let Some(lin) = &mut self.modulation {
            let cond_slice = cache.cond.as_slice().expect("contiguous cond");
            let act = silu(cond_slice);
            let act_arr = Array2::from_shape_vec((1, d), act).expect("cond len");
            let gmod_arr = Array2::from_shape_vec((1, 6 * d), gmod).expect("6d");
            let g_act = lin.backward(&act_arr, &gmod_arr);
            let g_c = silu_backward(cond_slice, g_act.row(0).as_slice().expect("row"));
            g_cond = Array1::from_vec(g_c);
        }

        (g_xq, g_xkv, g_cond)
    }

    /// Per-group Read attention weights averaged over heads and latent
    /// queries: one score per key token in each group.
    pub fn mean_key_attention(cache: &CrossCache<F>) -> Vec<(Vec<usize>, Vec<F>)> {
        cache
            .attn
            .iter()
            .map(|(attn, _qi, ki)| {
                let mut scores = vec![F::zero(); ki.len()];
                let mut rows = 0usize;
                for head in &attn.heads {
                    for prow in head.p.axis_iter(Axis(0)) {
                        for (sv, &pv) in scores.iter_mut().zip(prow.iter()) {
                            *sv = *sv + pv;
                        }
                        rows += 1;
                    }
                }
                let inv = F::one() / F::of_f64(rows as f64);
                for sv in scores.iter_mut() {
                    *sv = *sv * inv;
                }
                (ki.clone(), scores)
            })
            .collect()
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn ParamVisitor<F>) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.core.visit(&format!("{prefix}.attn"), f);
        self.mlp1.visit(&format!("{prefix}.mlp1"), f);
        self.mlp2.visit(&format!("{prefix}.mlp2"), f);
        if let Some(m) = &mut self.modulation {
            m.visit(&format!("{prefix}.mod"), f);
        }
    }
}

/// Latent query index ranges for a group-major `[G·J̃, d]` sequence.
pub fn latent_groups(num_groups: usize, j_tilde: usize) -> Vec<Vec<usize>> {
    (0..num_groups)
        .map(|g| (g * j_tilde..(g + 1) * j_tilde).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_partitions_contiguous_blocks() {
        let layout = GroupLayout::new((4, 4), (2, 2)).unwrap();
        assert_eq!(layout.num_groups(), 4);
        // top-left group of a 4x4 grid under a 2x2 group grid
        assert_eq!(layout.groups[0], vec![0, 1, 4, 5]);
        assert_eq!(layout.groups[3], vec![10, 11, 14, 15]);
        for g in 0..4 {
            for &t in &layout.groups[g] {
                assert_eq!(layout.membership(t), g);
            }
        }
    }

    #[test]
    fn layout_rejects_non_divisible() {
        assert!(GroupLayout::new((4, 4), (3, 2)).is_err());
    }

    #[test]
    fn single_group_is_identity_sequence() {
        let layout = GroupLayout::new((2, 3), (1, 1)).unwrap();
        assert_eq!(layout.groups, vec![(0..6).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_merge_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = GroupLayout::new((4, 4), (2, 2)).unwrap();
        let x = Array2::from_shape_simple_fn((16, 3), || f64::std_normal(&mut rng));
        let grouped = partition_groups(&x, &layout).unwrap();
        let back = merge_groups(&grouped, &layout).unwrap();
        assert_eq!(x, back);
    }

    #[test]
    fn budget_degenerate_range() {
        let spec = BudgetSpec { j_min: 5, j_max: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_budget(&spec, &mut rng).j_tilde, 5);
        }
    }

    #[test]
    fn budget_sampler_deterministic() {
        let spec = BudgetSpec { j_min: 1, j_max: 16 };
        let a: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..32).map(|_| sample_budget(&spec, &mut rng).j_tilde).collect()
        };
        let b: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..32).map(|_| sample_budget(&spec, &mut rng).j_tilde).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn expand_latents_replicates_prefix() {
        let shared =
            Array2::from_shape_fn((4, 2), |(i, j)| (i * 10 + j) as f64);
        let out = expand_latents(&shared, 4, &[0, 1]).unwrap();
        assert_eq!(out.nrows(), 8);
        for g in 0..4 {
            assert_eq!(out.row(g * 2), shared.row(0));
            assert_eq!(out.row(g * 2 + 1), shared.row(1));
        }
    }

    #[test]
    fn expand_latents_full_budget_single_group_is_table() {
        let shared = Array2::from_shape_fn((3, 2), |(i, j)| (i + j) as f64);
        let kept: Vec<usize> = (0..3).collect();
        let out = expand_latents(&shared, 1, &kept).unwrap();
        assert_eq!(out, shared);
    }

    #[test]
    fn expand_latents_gradient_sums_over_groups() {
        // finite-difference check of the shared-embedding gradient of a
        // sum-of-latents loss: each copy contributes identically
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shared = Array2::from_shape_simple_fn((3, 2), || f64::std_normal(&mut rng));
        let g = 4;
        let kept = vec![0, 1, 2];
        let loss = |s: &Array2<f64>| -> f64 {
            expand_latents(s, g, &kept).unwrap().iter().map(|v| v * v).sum()
        };
        let out = expand_latents(&shared, g, &kept).unwrap();
        let grad_out = out.mapv(|v| 2.0 * v);
        let mut analytic = Array2::zeros((3, 2));
        expand_latents_backward(&grad_out, g, &kept, &mut analytic);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut hi = shared.clone();
                hi[[i, j]] += eps;
                let mut lo = shared.clone();
                lo[[i, j]] -= eps;
                let fd = (loss(&hi) - loss(&lo)) / (2.0 * eps);
                assert!((analytic[[i, j]] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn drop_tail_keeps_group_major_prefix() {
        let l = Array2::from_shape_fn((8, 1), |(i, _)| i as f64);
        // J=4, G=2, J̃=1 → flattened rows {0, 4}
        let out = drop_tail(&l, 2, 4, Budget { j_tilde: 1 }).unwrap();
        assert_eq!(out.column(0).to_vec(), vec![0.0, 4.0]);
        // J̃ = J → identity
        let full = drop_tail(&l, 2, 4, Budget { j_tilde: 4 }).unwrap();
        assert_eq!(full, l);
        assert!(drop_tail(&l, 2, 4, Budget { j_tilde: 5 }).is_err());
    }

    #[test]
    fn prefix_nesting_of_kept_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for j1 in 1..8usize {
            for j2 in j1..8usize {
                let a = kept_indices(DropStrategy::Tail, 8, Budget { j_tilde: j1 }, &mut rng)
                    .unwrap();
                let b = kept_indices(DropStrategy::Tail, 8, Budget { j_tilde: j2 }, &mut rng)
                    .unwrap();
                assert!(a.iter().all(|i| b.contains(i)));
            }
        }
    }

    #[test]
    fn random_drop_keeps_sorted_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kept =
            kept_indices(DropStrategy::Random, 8, Budget { j_tilde: 3 }, &mut rng).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert!(kept.iter().all(|&i| i < 8));
    }

    #[test]
    fn tail_retention_probability_non_increasing() {
        // P(index i retained) = P(J̃ > i) under uniform budgets
        let spec = BudgetSpec { j_min: 1, j_max: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = [0u32; 8];
        let iters = 20_000;
        for _ in 0..iters {
            let b = sample_budget(&spec, &mut rng);
            for h in hits.iter_mut().take(b.j_tilde) {
                *h += 1;
            }
        }
        for w in hits.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }
}
