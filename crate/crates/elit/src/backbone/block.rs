//! DiT transformer block: adaLN-Zero modulated self-attention (QK-norm,
//! optional RoPE) and a 4x-expansion MLP, both gated and zero-initialized so
//! the block is an exact identity at init.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::nn::activation::{gelu, gelu_backward, silu, silu_backward};
use crate::nn::attention::{AttnCache, AttnCore, Rope};
use crate::nn::count::{Bucket, Ctx};
use crate::nn::norm::{LayerNorm, LnCache};
use crate::nn::param::{ParamVisitor, Scalar};
use crate::nn::{Init, Linear};

/// Cost buckets for one block (spatial vs latent placement).
#[derive(Debug, Clone, Copy)]
pub struct BlockBuckets {
    pub attn_proj: Bucket,
    pub attn_mat: Bucket,
    pub ff: Bucket,
}

pub const SPATIAL_BUCKETS: BlockBuckets = BlockBuckets {
    attn_proj: Bucket::SpatialAttnProj,
    attn_mat: Bucket::SpatialAttnMat,
    ff: Bucket::SpatialFf,
};

pub const LATENT_BUCKETS: BlockBuckets = BlockBuckets {
    attn_proj: Bucket::LatentAttnProj,
    attn_mat: Bucket::LatentAttnMat,
    ff: Bucket::LatentFf,
};

#[derive(Debug, Clone)]
pub struct DitBlock<F: Scalar> {
    pub mod_lin: Linear<F>,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub wqkv: Linear<F>,
    pub wo: Linear<F>,
    pub core: AttnCore<F>,
    pub mlp1: Linear<F>,
    pub mlp2: Linear<F>,
}

pub struct BlockCache<F: Scalar> {
    cond: Array1<F>,
    mod6: Vec<F>,
    ln1: LnCache<F>,
    h: Array2<F>,
    hm: Array2<F>,
    attn: AttnCache<F>,
    ao_pre: Array2<F>,
    ao: Array2<F>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    h2m: Array2<F>,
    m1: Array2<F>,
    mg: Array2<F>,
    m2: Array2<F>,
}

impl<F: Scalar> DitBlock<F> {
    pub fn new<R: Rng>(rng: &mut R, d: usize, heads: usize) -> Self {
        DitBlock {
            mod_lin: Linear::new(rng, d, 6 * d, Init::Zeros),
            ln1: LayerNorm,
            ln2: LayerNorm,
            wqkv: Linear::new(rng, d, 3 * d, Init::TruncNormal),
            wo: Linear::new(rng, d, d, Init::TruncNormal),
            core: AttnCore::new(d, heads),
            mlp1: Linear::new(rng, d, 4 * d, Init::TruncNormal),
            mlp2: Linear::new(rng, 4 * d, d, Init::TruncNormal),
        }
    }

    pub fn forward(
        &self,
        x: &Array2<F>,
        cond: &Array1<F>,
        rope: Option<&Rope<F>>,
        key_mask: Option<&[bool]>,
        ctx: &mut Ctx,
        buckets: BlockBuckets,
    ) -> (Array2<F>, BlockCache<F>) {
        let d = x.ncols();
        let act = silu(cond.as_slice().expect("contiguous cond"));
        let act_arr = Array2::from_shape_vec((1, d), act).expect("cond len");
        let mod6: Vec<F> = {
            let mut plain = Ctx::plain();
            self.mod_lin
                .forward(&act_arr, &mut plain, Bucket::Unmodeled)
                .row(0)
                .to_vec()
        };
        let chunk = |i: usize| &mod6[i * d..(i + 1) * d];

        let (h, ln1) = self.ln1.forward(x);
        let hm = modulate(&h, chunk(0), chunk(1));
        let qkv = self.wqkv.forward(&hm, ctx, buckets.attn_proj);
        let q = qkv.slice(s![.., 0..d]).to_owned();
        let k = qkv.slice(s![.., d..2 * d]).to_owned();
        let v = qkv.slice(s![.., 2 * d..3 * d]).to_owned();
        let (ao_pre, attn) =
            self.core
                .forward(&q, &k, &v, rope, key_mask, ctx, buckets.attn_mat);
        let ao = self.wo.forward(&ao_pre, ctx, buckets.attn_proj);
        let x_mid = add_gated(x, &ao, chunk(2));

        let (h2, ln2) = self.ln2.forward(&x_mid);
        let h2m = modulate(&h2, chunk(3), chunk(4));
        let m1 = self.mlp1.forward(&h2m, ctx, buckets.ff);
        let mg = gelu(&m1);
        let m2 = self.mlp2.forward(&mg, ctx, buckets.ff);
        let out = add_gated(&x_mid, &m2, chunk(5));

        (
            out,
            BlockCache {
                cond: cond.clone(),
                mod6,
                ln1,
                h,
                hm,
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
        )
    }

    /// Returns `(grad_x, grad_cond)`.
    pub fn backward(
        &mut self,
        cache: &BlockCache<F>,
        rope: Option<&Rope<F>>,
        gy: &Array2<F>,
    ) -> (Array2<F>, Array1<F>) {
        let d = gy.ncols();
        let chunk = |i: usize| &cache.mod6[i * d..(i + 1) * d];
        let mut gmod = vec![F::zero(); 6 * d];

        // MLP sub-layer
        let g_m2 = gate_backward(gy, &cache.m2, chunk(5), &mut gmod[5 * d..6 * d]);
        let g_mg = self.mlp2.backward(&cache.mg, &g_m2);
        let g_m1 = gelu_backward(&cache.m1, &g_mg);
        let g_h2m = self.mlp1.backward(&cache.h2m, &g_m1);
        let (g_sh, rest) = gmod[3 * d..5 * d].split_at_mut(d);
        let g_h2 = modulate_backward(&g_h2m, &cache.h2, chunk(4), g_sh, rest);
        let mut g_mid = gy + &self.ln2.backward(&cache.ln2, &g_h2);

        // attention sub-layer
        let g_ao = gate_backward(&g_mid, &cache.ao, chunk(2), &mut gmod[2 * d..3 * d]);
        let g_ao_pre = self.wo.backward(&cache.ao_pre, &g_ao);
        let (gq, gk, gv) = self.core.backward(&cache.attn, rope, &g_ao_pre);
        let mut g_qkv = Array2::zeros((gy.nrows(), 3 * d));
        g_qkv.slice_mut(s![.., 0..d]).assign(&gq);
        g_qkv.slice_mut(s![.., d..2 * d]).assign(&gk);
        g_qkv.slice_mut(s![.., 2 * d..3 * d]).assign(&gv);
        let g_hm = self.wqkv.backward(&cache.hm, &g_qkv);
        let (g_sh1, rest1) = gmod[0..2 * d].split_at_mut(d);
        let g_h = modulate_backward(&g_hm, &cache.h, chunk(1), g_sh1, rest1);
        g_mid += &self.ln1.backward(&cache.ln1, &g_h);

        // modulation path into cond
        let cond_slice = cache.cond.as_slice().expect("contiguous cond");
        let act = silu(cond_slice);
        let act_arr = Array2::from_shape_vec((1, d), act).expect("cond len");
        let gmod_arr = Array2::from_shape_vec((1, 6 * d), gmod).expect("6d");
        let g_act = self.mod_lin.backward(&act_arr, &gmod_arr);
        let g_cond = Array1::from_vec(silu_backward(
            cond_slice,
            g_act.row(0).as_slice().expect("row"),
        ));

        (g_mid, g_cond)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn ParamVisitor<F>) {
        self.mod_lin.visit(&format!("{prefix}.mod"), f);
        self.wqkv.visit(&format!("{prefix}.wqkv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.core.visit(&format!("{prefix}.attn"), f);
        self.mlp1.visit(&format!("{prefix}.mlp1"), f);
        self.mlp2.visit(&format!("{prefix}.mlp2"), f);
    }
}

pub fn modulate<F: Scalar>(x: &Array2<F>, shift: &[F], scale: &[F]) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for ((v, &sc), &sh) in row.iter_mut().zip(scale.iter()).zip(shift.iter()) {
            *v = *v * (F::one() + sc) + sh;
        }
    }
    out
}

/// Backward of [`modulate`]: accumulates shift/scale grads, returns grad of
/// the pre-modulation input.
pub fn modulate_backward<F: Scalar>(
    g_out: &Array2<F>,
    h: &Array2<F>,
    scale: &[F],
    g_shift: &mut [F],
    g_scale: &mut [F],
) -> Array2<F> {
    for (gr, hr) in g_out.axis_iter(Axis(0)).zip(h.axis_iter(Axis(0))) {
        for (j, (&gv, &hv)) in gr.iter().zip(hr.iter()).enumerate() {
            g_shift[j] = g_shift[j] + gv;
            g_scale[j] = g_scale[j] + gv * hv;
        }
    }
    let mut gh = g_out.clone();
    for mut row in gh.axis_iter_mut(Axis(0)) {
        for (v, &sc) in row.iter_mut().zip(scale.iter()) {
            *v = *v * (F::one() + sc);
        }
    }
    gh
}

/// `x + gate ∘ branch`, broadcasting the gate over rows.
pub fn add_gated<F: Scalar>(x: &Array2<F>, branch: &Array2<F>, gate: &[F]) -> Array2<F> {
    let mut out = x.clone();
    for (mut row, br) in out.axis_iter_mut(Axis(0)).zip(branch.axis_iter(Axis(0))) {
        for ((v, &b), &g) in row.iter_mut().zip(br.iter()).zip(gate.iter()) {
            *v = *v + g * b;
        }
    }
    out
}

/// Backward of the gated residual: accumulates the gate grad and returns the
/// branch grad (the residual grad is the output grad itself).
pub fn gate_backward<F: Scalar>(
    g_out: &Array2<F>,
    branch: &Array2<F>,
    gate: &[F],
    g_gate: &mut [F],
) -> Array2<F> {
    for (gr, br) in g_out.axis_iter(Axis(0)).zip(branch.axis_iter(Axis(0))) {
        for (j, (&gv, &bv)) in gr.iter().zip(br.iter()).enumerate() {
            g_gate[j] = g_gate[j] + gv * bv;
        }
    }
    let mut gb = g_out.clone();
    for mut row in gb.axis_iter_mut(Axis(0)) {
        for (v, &g) in row.iter_mut().zip(gate.iter()) {
            *v = *v * g;
        }
    }
    gb
}
