//! Three-segment backbone: spatial head → (Read → latent core → Write) →
//! spatial tail, in pixel space at toy scale. With the latent interface
//! disabled the same skeleton is a plain DiT (all blocks spatial), which is
//! the baseline for the compute-reallocation probe.

pub mod block;
pub mod embed;

use ndarray::{Array1, Array2, Array3, Ix2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::latent::{
    expand_latents, expand_latents_backward, latent_groups, CrossCache, CrossLayer, GroupLayout,
    READ_BUCKETS, WRITE_BUCKETS,
};
use crate::nn::activation::{silu, silu_backward};
use crate::nn::attention::Rope;
use crate::nn::count::{Bucket, Ctx};
use crate::nn::norm::{LayerNorm, LnCache};
use crate::nn::param::{trunc_normal, Param, ParamVisitor, Scalar};
use crate::nn::{Init, Linear};

use block::{
    modulate, modulate_backward, BlockCache, DitBlock, LATENT_BUCKETS, SPATIAL_BUCKETS,
};
use embed::{ClassEmbed, TimestepCache, TimestepEmbed};

/// All architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Hidden width `d`.
    pub width: usize,
    pub heads: usize,
    pub b_in: usize,
    pub b_core: usize,
    pub b_out: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// `(gh, gw)` — regular 2-D partition of the token grid.
    pub group_grid: (usize, usize),
    /// Latents per group `J`.
    pub latents_per_group: usize,
    pub use_rope: bool,
    pub use_abs_pos: bool,
    /// `false` turns the skeleton into a plain DiT: core blocks run on
    /// spatial tokens and Read/Write/latents are absent.
    pub latent_enabled: bool,
    /// adaLN-Zero on the Write layer (ablation; default keeps Write plain
    /// pre-norm with zero-initialized output projections).
    pub modulated_write: bool,
    /// Rotary embedding over the latent sequence index in core blocks
    /// (default: latents carry no positional signal beyond their
    /// initialization).
    pub rope_latent: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // Toy default: 16x16 images, N=64 tokens, 2x2 groups of 16 tokens.
        BackboneConfig {
            width: 256,
            heads: 8,
            b_in: 2,
            b_core: 8,
            b_out: 2,
            patch_size: 2,
            image_size: 16,
            channels: 3,
            num_classes: 4,
            group_grid: (2, 2),
            latents_per_group: 16,
            use_rope: true,
            use_abs_pos: true,
            latent_enabled: true,
            modulated_write: false,
            rope_latent: false,
        }
    }
}

impl BackboneConfig {
    pub fn token_rows(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// N
    pub fn num_tokens(&self) -> usize {
        self.token_rows() * self.token_rows()
    }

    /// G
    pub fn num_groups(&self) -> usize {
        self.group_grid.0 * self.group_grid.1
    }

    pub fn depth(&self) -> usize {
        self.b_in + self.b_core + self.b_out
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, msg: String| Err(Error::config(format!("backbone.{f}: {msg}")));
        if self.width == 0 || self.heads == 0 {
            return err("width", "width and heads must be positive".into());
        }
        if self.width % self.heads != 0 {
            return err(
                "heads",
                format!("width {} not divisible by heads {}", self.width, self.heads),
            );
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(
                "patch_size",
                format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            );
        }
        if self.depth() == 0 {
            return err("b_core", "total depth must be positive".into());
        }
        let rows = self.token_rows();
        if rows % self.group_grid.0 != 0 || rows % self.group_grid.1 != 0 {
            return err(
                "group_grid",
                format!(
                    "token grid {rows}x{rows} not divisible by group grid {:?}",
                    self.group_grid
                ),
            );
        }
        if self.latent_enabled && self.latents_per_group == 0 {
            return err("latents_per_group", "J must be >= 1".into());
        }
        if self.num_classes == 0 {
            return err("num_classes", "need at least one class".into());
        }
        let hd = self.width / self.heads;
        if self.use_rope && hd % 4 != 0 {
            return err(
                "use_rope",
                format!("axial RoPE needs head_dim % 4 == 0, got {hd}"),
            );
        }
        Ok(())
    }
}

/// Slice a `[C, H, W]` image into `N = (H/p)²` flattened `p·p·C` patch rows
/// (row-major patch order, channel-major within a patch).
pub fn patchify_pixels<F: Scalar>(image: &Array3<F>, patch: usize) -> Result<Array2<F>> {
    let (c, h, w) = image.dim();
    if h != w || h % patch != 0 {
        return Err(Error::shape(format!(
            "patchify: image {h}x{w} not divisible by patch {patch}"
        )));
    }
    let rows = h / patch;
    let n = rows * rows;
    let pd = patch * patch * c;
    let mut out = Array2::zeros((n, pd));
    for pr in 0..rows {
        for pc in 0..rows {
            let tok = pr * rows + pc;
            for ch in 0..c {
                for r in 0..patch {
                    for cc in 0..patch {
                        out[[tok, ch * patch * patch + r * patch + cc]] =
                            image[[ch, pr * patch + r, pc * patch + cc]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of the [`patchify_pixels`] index map.
pub fn unpatchify_pixels<F: Scalar>(
    tokens: &Array2<F>,
    patch: usize,
    channels: usize,
) -> Result<Array3<F>> {
    let n = tokens.nrows();
    let rows = (n as f64).sqrt() as usize;
    if rows * rows != n {
        return Err(Error::shape(format!("unpatchify: {n} tokens is not square")));
    }
    if tokens.ncols() != patch * patch * channels {
        return Err(Error::shape(format!(
            "unpatchify: token dim {} != {}",
            tokens.ncols(),
            patch * patch * channels
        )));
    }
    let h = rows * patch;
    let mut out = Array3::zeros((channels, h, h));
    for pr in 0..rows {
        for pc in 0..rows {
            let tok = pr * rows + pc;
            for ch in 0..channels {
                for r in 0..patch {
                    for cc in 0..patch {
                        out[[ch, pr * patch + r, pc * patch + cc]] =
                            tokens[[tok, ch * patch * patch + r * patch + cc]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The full generator.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub cfg: BackboneConfig,
    pub layout: GroupLayout,
    patch_proj: Linear<F>,
    pos_embed: Option<Param<F, Ix2>>,
    t_embed: TimestepEmbed<F>,
    class_embed: ClassEmbed<F>,
    blocks_in: Vec<DitBlock<F>>,
    /// Shared per-group latent embeddings `[J, d]`.
    pub latent_embed: Option<Param<F, Ix2>>,
    pub read: Option<CrossLayer<F>>,
    blocks_core: Vec<DitBlock<F>>,
    pub write: Option<CrossLayer<F>>,
    blocks_out: Vec<DitBlock<F>>,
    final_mod: Linear<F>,
    final_ln: LayerNorm,
    final_proj: Linear<F>,
    rope: Option<Rope<F>>,
}

/// Forward activations for one sample.
pub struct ModelCache<F: Scalar> {
    patches: Array2<F>,
    t_cache: TimestepCache<F>,
    class: Option<usize>,
    cond: Array1<F>,
    kept: Vec<usize>,
    blocks_in: Vec<BlockCache<F>>,
    pub read: Option<CrossCache<F>>,
    blocks_core: Vec<BlockCache<F>>,
    write: Option<CrossCache<F>>,
    blocks_out: Vec<BlockCache<F>>,
    final_params: Vec<F>,
    final_ln: LnCache<F>,
    final_h: Array2<F>,
    final_hm: Array2<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new_with_rng(cfg, &mut rng)
    }

    pub fn new_with_rng<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let rows = cfg.token_rows();
        let layout = GroupLayout::new((rows, rows), cfg.group_grid)?;
        let pd = cfg.patch_size * cfg.patch_size * cfg.channels;
        let patch_proj = Linear::new(rng, pd, d, Init::TruncNormal);
        let pos_embed = cfg.use_abs_pos.then(|| {
            Param::new(Array2::from_shape_simple_fn((cfg.num_tokens(), d), || {
                trunc_normal(rng, 0.02)
            }))
        });
        let t_embed = TimestepEmbed::new(rng, d);
        let class_embed = ClassEmbed::new(rng, cfg.num_classes, d);
        let blocks_in = (0..cfg.b_in).map(|_| DitBlock::new(rng, d, cfg.heads)).collect();
        let (latent_embed, read, write) = if cfg.latent_enabled {
            let emb = Param::new(Array2::from_shape_simple_fn(
                (cfg.latents_per_group, d),
                || trunc_normal(rng, 0.02),
            ));
            let read = CrossLayer::new(rng, d, cfg.heads, true, READ_BUCKETS);
            let write = CrossLayer::new(rng, d, cfg.heads, cfg.modulated_write, WRITE_BUCKETS);
            (Some(emb), Some(read), Some(write))
        } else {
            (None, None, None)
        };
        let blocks_core = (0..cfg.b_core)
            .map(|_| DitBlock::new(rng, d, cfg.heads))
            .collect();
        let blocks_out = (0..cfg.b_out)
            .map(|_| DitBlock::new(rng, d, cfg.heads))
            .collect();
        let final_mod = Linear::new(rng, d, 2 * d, Init::Zeros);
        let final_proj = Linear::new(rng, d, pd, Init::Zeros);
        let rope = cfg
            .use_rope
            .then(|| Rope::new_2d(rows, rows, d / cfg.heads, 10000.0));
        Ok(Model {
            cfg,
            layout,
            patch_proj,
            pos_embed,
            t_embed,
            class_embed,
            blocks_in,
            latent_embed,
            read,
            blocks_core,
            write,
            blocks_out,
            final_mod,
            final_ln: LayerNorm,
            final_proj,
            rope,
        })
    }

    fn check_budget(&self, kept: &[usize]) -> Result<()> {
        if !self.cfg.latent_enabled {
            return Ok(());
        }
        let j = self.cfg.latents_per_group;
        if kept.is_empty() || kept.len() > j || kept.iter().any(|&i| i >= j) {
            return Err(Error::config(format!(
                "budget out of range: kept {kept:?} with J={j}"
            )));
        }
        Ok(())
    }

    /// Velocity prediction for a single `[C, H, W]` input.
    ///
    /// `kept` selects the latent indices retained in every group (the tail
    /// prefix during normal operation). `latent_key_mask`, indexed over the
    /// group-major latent sequence, removes latents from every attention they
    /// would serve as keys in — the block-masked reference path the drop
    /// equivalence tests compare against.
    pub fn forward(
        &self,
        x: &Array3<F>,
        t: F,
        class: Option<usize>,
        kept: &[usize],
        latent_key_mask: Option<&[bool]>,
        ctx: &mut Ctx,
    ) -> Result<(Array3<F>, ModelCache<F>)> {
        let cfg = &self.cfg;
        let (c, h, w) = x.dim();
        if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::shape(format!(
                "input {c}x{h}x{w}, expected {}x{}x{}",
                cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        self.check_budget(kept)?;
        if let Some(cls) = class {
            if cls >= cfg.num_classes {
                return Err(Error::config(format!(
                    "class id {cls} out of range (num_classes {})",
                    cfg.num_classes
                )));
            }
        }

        let patches = patchify_pixels(x, cfg.patch_size)?;
        let mut s_tok = self.patch_proj.forward(&patches, ctx, Bucket::Unmodeled);
        if let Some(pos) = &self.pos_embed {
            s_tok += &pos.v;
        }

        let (cond_t, t_cache) = self.t_embed.forward(t);
        let cond = &cond_t + &self.class_embed.forward(class);

        let mut blocks_in_cache = Vec::with_capacity(self.blocks_in.len());
        for b in &self.blocks_in {
            let (y, cache) =
                b.forward(&s_tok, &cond, self.rope.as_ref(), None, ctx, SPATIAL_BUCKETS);
            s_tok = y;
            blocks_in_cache.push(cache);
        }

        let mut read_cache = None;
        let mut write_cache = None;
        let mut blocks_core_cache = Vec::with_capacity(self.blocks_core.len());
        if cfg.latent_enabled {
            let g = cfg.num_groups();
            let emb = self.latent_embed.as_ref().expect("latents");
            let l0 = expand_latents(&emb.v, g, kept)?;
            let lat_groups = latent_groups(g, kept.len());
            let read = self.read.as_ref().expect("read");
            let (mut l, rc) = read.forward(
                &l0,
                &s_tok,
                &cond,
                &lat_groups,
                &self.layout.groups,
                None,
                ctx,
            )?;
            read_cache = Some(rc);
            let lat_rope = cfg
                .rope_latent
                .then(|| Rope::new_2d(l.nrows(), 1, cfg.width / cfg.heads, 10000.0));
            for b in &self.blocks_core {
                let (y, cache) = b.forward(
                    &l,
                    &cond,
                    lat_rope.as_ref(),
                    latent_key_mask,
                    ctx,
                    LATENT_BUCKETS,
                );
                l = y;
                blocks_core_cache.push(cache);
            }
            let write = self.write.as_ref().expect("write");
            let (s2, wc) = write.forward(
                &s_tok,
                &l,
                &cond,
                &self.layout.groups,
                &lat_groups,
                latent_key_mask,
                ctx,
            )?;
            s_tok = s2;
            write_cache = Some(wc);
        } else {
            for b in &self.blocks_core {
                let (y, cache) =
                    b.forward(&s_tok, &cond, self.rope.as_ref(), None, ctx, SPATIAL_BUCKETS);
                s_tok = y;
                blocks_core_cache.push(cache);
            }
        }

        let mut blocks_out_cache = Vec::with_capacity(self.blocks_out.len());
        for b in &self.blocks_out {
            let (y, cache) =
                b.forward(&s_tok, &cond, self.rope.as_ref(), None, ctx, SPATIAL_BUCKETS);
            s_tok = y;
            blocks_out_cache.push(cache);
        }

        let d = cfg.width;
        let act = silu(cond.as_slice().expect("cond"));
        let act_arr = Array2::from_shape_vec((1, d), act).expect("len");
        let final_params: Vec<F> = {
            let mut plain = Ctx::plain();
            self.final_mod
                .forward(&act_arr, &mut plain, Bucket::Unmodeled)
                .row(0)
                .to_vec()
        };
        let (fh, final_ln) = self.final_ln.forward(&s_tok);
        let hm = modulate(&fh, &final_params[0..d], &final_params[d..2 * d]);
        let out_tok = self.final_proj.forward(&hm, ctx, Bucket::Unmodeled);
        let out = unpatchify_pixels(&out_tok, cfg.patch_size, cfg.channels)?;

        Ok((
            out,
            ModelCache {
                patches,
                t_cache,
                class,
                cond,
                kept: kept.to_vec(),
                blocks_in: blocks_in_cache,
                read: read_cache,
                blocks_core: blocks_core_cache,
                write: write_cache,
                blocks_out: blocks_out_cache,
                final_params,
                final_ln,
                final_h: fh,
                final_hm: hm,
            },
        ))
    }

    /// Convenience forward without instrumentation or masking.
    pub fn velocity(
        &self,
        x: &Array3<F>,
        t: F,
        class: Option<usize>,
        kept: &[usize],
    ) -> Result<Array3<F>> {
        let mut ctx = Ctx::plain();
        Ok(self.forward(x, t, class, kept, None, &mut ctx)?.0)
    }

    /// Accumulate parameter gradients from the output-velocity gradient.
    pub fn backward(&mut self, cache: &ModelCache<F>, g_out: &Array3<F>) -> Result<()> {
        let cfg = self.cfg.clone();
        let d = cfg.width;
        let g_tok = patchify_pixels(g_out, cfg.patch_size)?;
        let mut g_cond = Array1::zeros(d);

        // final projection + modulation
        let g_hm = self.final_proj.backward(&cache.final_hm, &g_tok);
        let mut gmod2 = vec![F::zero(); 2 * d];
        let (g_shift, g_scale) = gmod2.split_at_mut(d);
        let g_fh = modulate_backward(
            &g_hm,
            &cache.final_h,
            &cache.final_params[d..2 * d],
            g_shift,
            g_scale,
        );
        let mut g_s = self.final_ln.backward(&cache.final_ln, &g_fh);
        {
            let cond_slice = cache.cond.as_slice().expect("cond");
            let act = silu(cond_slice);
            let act_arr = Array2::from_shape_vec((1, d), act).expect("len");
            let gmod_arr = Array2::from_shape_vec((1, 2 * d), gmod2).expect("2d");
            let g_act = self.final_mod.backward(&act_arr, &gmod_arr);
            let g_c = silu_backward(cond_slice, g_act.row(0).as_slice().expect("row"));
            g_cond += &Array1::from_vec(g_c);
        }

        for (b, bc) in self
            .blocks_out
            .iter_mut()
            .rev()
            .zip(cache.blocks_out.iter().rev())
        {
            let (gx, gc) = b.backward(bc, self.rope.as_ref(), &g_s);
            g_s = gx;
            g_cond += &gc;
        }

        if cfg.latent_enabled {
            let wc = cache.write.as_ref().expect("write cache");
            let (g_s_w, mut g_l, gc_w) =
                self.write.as_mut().expect("write").backward(wc, &g_s);
            g_cond += &gc_w;
            let lat_rope = cfg
                .rope_latent
                .then(|| Rope::new_2d(g_l.nrows(), 1, d / cfg.heads, 10000.0));
            for (b, bc) in self
                .blocks_core
                .iter_mut()
                .rev()
                .zip(cache.blocks_core.iter().rev())
            {
                let (gx, gc) = b.backward(bc, lat_rope.as_ref(), &g_l);
                g_l = gx;
                g_cond += &gc;
            }
            let rc = cache.read.as_ref().expect("read cache");
            let (g_l0, g_s_r, gc_r) =
                self.read.as_mut().expect("read").backward(rc, &g_l);
            g_cond += &gc_r;
            let emb = self.latent_embed.as_mut().expect("latents");
            expand_latents_backward(&g_l0, cfg.num_groups(), &cache.kept, &mut emb.g);
            g_s = g_s_w + g_s_r;
        } else {
            for (b, bc) in self
                .blocks_core
                .iter_mut()
                .rev()
                .zip(cache.blocks_core.iter().rev())
            {
                let (gx, gc) = b.backward(bc, self.rope.as_ref(), &g_s);
                g_s = gx;
                g_cond += &gc;
            }
        }

        for (b, bc) in self
            .blocks_in
            .iter_mut()
            .rev()
            .zip(cache.blocks_in.iter().rev())
        {
            let (gx, gc) = b.backward(bc, self.rope.as_ref(), &g_s);
            g_s = gx;
            g_cond += &gc;
        }

        if let Some(pos) = &mut self.pos_embed {
            pos.g += &g_s;
        }
        let _ = self.patch_proj.backward(&cache.patches, &g_s);

        self.t_embed.backward(&cache.t_cache, &g_cond);
        self.class_embed.backward(cache.class, &g_cond);
        Ok(())
    }

    pub fn for_each_param(&mut self, f: &mut dyn ParamVisitor<F>) {
        self.patch_proj.visit("patch", f);
        if let Some(pos) = &mut self.pos_embed {
            pos.visit("pos", f);
        }
        self.t_embed.visit("t", f);
        self.class_embed.visit("class", f);
        for (i, b) in self.blocks_in.iter_mut().enumerate() {
            b.visit(&format!("in.{i}"), f);
        }
        if let Some(emb) = &mut self.latent_embed {
            emb.visit("latent", f);
        }
        if let Some(r) = &mut self.read {
            r.visit("read", f);
        }
        for (i, b) in self.blocks_core.iter_mut().enumerate() {
            b.visit(&format!("core.{i}"), f);
        }
        if let Some(w) = &mut self.write {
            w.visit("write", f);
        }
        for (i, b) in self.blocks_out.iter_mut().enumerate() {
            b.visit(&format!("out.{i}"), f);
        }
        self.final_mod.visit("final_mod", f);
        self.final_proj.visit("final", f);
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(&mut |_: &str,
                                  _v: ndarray::ArrayViewMutD<F>,
                                  mut g: ndarray::ArrayViewMutD<F>| {
            g.fill(F::zero())
        });
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_: &str,
                                  v: ndarray::ArrayViewMutD<F>,
                                  _g: ndarray::ArrayViewMutD<F>| n += v.len());
        n
    }

    /// Full-prefix kept-index list for a budget `J̃`.
    pub fn tail_kept(&self, j_tilde: usize) -> Vec<usize> {
        (0..j_tilde).collect()
    }

    /// Reference forward: run with every latent present but tail latents
    /// removed from all attention key sets. Output must match a true
    /// tail-dropped forward.
    pub fn forward_masked_tail(
        &self,
        x: &Array3<F>,
        t: F,
        class: Option<usize>,
        j_tilde: usize,
    ) -> Result<Array3<F>> {
        let j = self.cfg.latents_per_group;
        let g = self.cfg.num_groups();
        let kept: Vec<usize> = (0..j).collect();
        let mask: Vec<bool> = (0..g * j).map(|i| i % j < j_tilde).collect();
        let mut ctx = Ctx::plain();
        Ok(self
            .forward(x, t, class, &kept, Some(&mask), &mut ctx)?
            .0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            width: 8,
            heads: 2,
            b_in: 1,
            b_core: 1,
            b_out: 1,
            patch_size: 2,
            image_size: 8,
            channels: 1,
            num_classes: 3,
            group_grid: (2, 2),
            latents_per_group: 2,
            use_rope: true,
            use_abs_pos: true,
            latent_enabled: true,
            modulated_write: false,
            rope_latent: false,
        }
    }

    fn rand_image(cfg: &BackboneConfig, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(
            (cfg.channels, cfg.image_size, cfg.image_size),
            || f64::std_normal(&mut rng),
        )
    }

    #[test]
    fn patchify_counts() {
        let cfg = BackboneConfig::default();
        let img = Array3::<f64>::zeros((1, 16, 16));
        assert_eq!(patchify_pixels(&img, 2).unwrap().nrows(), 64);
        assert_eq!(patchify_pixels(&img, 16).unwrap().nrows(), 1);
        assert!(patchify_pixels(&img, 3).is_err());
        let _ = cfg;
    }

    #[test]
    fn patchify_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Array3::from_shape_simple_fn((3, 8, 8), || f64::std_normal(&mut rng));
        let tok = patchify_pixels(&img, 2).unwrap();
        let back = unpatchify_pixels(&tok, 2, 3).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn unpatchify_matches_direct_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = 2;
        let c = 2;
        let rows = 3;
        let tok =
            Array2::from_shape_simple_fn((rows * rows, p * p * c), || f64::std_normal(&mut rng));
        let out = unpatchify_pixels(&tok, p, c).unwrap();
        // naive scatter loop
        for t in 0..rows * rows {
            let (pr, pc) = (t / rows, t % rows);
            for ch in 0..c {
                for r in 0..p {
                    for cc in 0..p {
                        assert_eq!(
                            out[[ch, pr * p + r, pc * p + cc]],
                            tok[[t, ch * p * p + r * p + cc]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unpatchify_constant_token() {
        let tok = Array2::from_elem((4, 4), 0.5f64);
        let out = unpatchify_pixels(&tok, 2, 1).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_at_init_outputs_zero() {
        let cfg = tiny_cfg();
        let model: Model<f64> = Model::new(cfg.clone(), 0).unwrap();
        let img = rand_image(&cfg, 7);
        let out = model.velocity(&img, 0.3, Some(1), &[0, 1]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0), "nonzero output at init");
    }

    #[test]
    fn output_shape_matches_input_for_every_budget() {
        let cfg = tiny_cfg();
        let model: Model<f64> = Model::new(cfg.clone(), 1).unwrap();
        let img = rand_image(&cfg, 8);
        for jt in 1..=cfg.latents_per_group {
            let kept: Vec<usize> = (0..jt).collect();
            let out = model.velocity(&img, 0.5, None, &kept).unwrap();
            assert_eq!(out.dim(), img.dim());
        }
    }

    #[test]
    fn budget_out_of_range_rejected() {
        let cfg = tiny_cfg();
        let model: Model<f64> = Model::new(cfg.clone(), 1).unwrap();
        let img = rand_image(&cfg, 9);
        assert!(model.velocity(&img, 0.5, None, &[0, 1, 2]).is_err());
        assert!(model.velocity(&img, 0.5, None, &[]).is_err());
    }

    #[test]
    fn full_budget_equals_no_drop_path() {
        let cfg = tiny_cfg();
        let model: Model<f64> = Model::new(cfg.clone(), 2).unwrap();
        let img = rand_image(&cfg, 10);
        let kept: Vec<usize> = (0..cfg.latents_per_group).collect();
        let a = model.velocity(&img, 0.4, Some(0), &kept).unwrap();
        let b = model
            .forward_masked_tail(&img, 0.4, Some(0), cfg.latents_per_group)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn drop_equals_block_masked_reference() {
        let mut cfg = tiny_cfg();
        cfg.latents_per_group = 4;
        let mut model: Model<f64> = Model::new(cfg.clone(), 3).unwrap();
        perturb_params(&mut model, 42);
        let img = rand_image(&cfg, 11);
        for jt in 1..cfg.latents_per_group {
            let kept: Vec<usize> = (0..jt).collect();
            let dropped = model.velocity(&img, 0.6, Some(2), &kept).unwrap();
            let masked = model.forward_masked_tail(&img, 0.6, Some(2), jt).unwrap();
            let max_diff = dropped
                .iter()
                .zip(masked.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-10, "J̃={jt}: max diff {max_diff}");
        }
    }

    /// Kick every parameter away from init so identities do not trivialize
    /// equivalence tests.
    pub fn perturb_params(model: &mut Model<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.for_each_param(&mut |_: &str,
                                   mut v: ndarray::ArrayViewMutD<f64>,
                                   _g: ndarray::ArrayViewMutD<f64>| {
            for x in v.iter_mut() {
                *x += 0.05 * f64::std_normal(&mut rng);
            }
        });
    }

    #[test]
    fn class_permutation_leaves_loss_unchanged() {
        // permuting class embedding rows and labels jointly is a no-op
        let cfg = tiny_cfg();
        let mut model: Model<f64> = Model::new(cfg.clone(), 4).unwrap();
        perturb_params(&mut model, 5);
        let img = rand_image(&cfg, 12);
        let before = model.velocity(&img, 0.5, Some(0), &[0]).unwrap();
        // swap class rows 0 and 2, then query class 2
        let perm = {
            let table = &mut model.class_embed.table.v;
            let r0 = table.row(0).to_owned();
            let r2 = table.row(2).to_owned();
            table.row_mut(0).assign(&r2);
            table.row_mut(2).assign(&r0);
            model.velocity(&img, 0.5, Some(2), &[0]).unwrap()
        };
        assert_eq!(before, perm);
    }

    #[test]
    fn plain_dit_mode_has_no_latent_params() {
        let mut cfg = tiny_cfg();
        cfg.latent_enabled = false;
        let mut model: Model<f64> = Model::new(cfg.clone(), 0).unwrap();
        let mut names = Vec::new();
        model.for_each_param(&mut |n: &str,
                                   _v: ndarray::ArrayViewMutD<f64>,
                                   _g: ndarray::ArrayViewMutD<f64>| {
            names.push(n.to_string())
        });
        assert!(names.iter().all(|n| !n.starts_with("read")
            && !n.starts_with("write")
            && !n.starts_with("latent")));
        let img = rand_image(&cfg, 13);
        let out = model.velocity(&img, 0.2, Some(1), &[0]).unwrap();
        assert_eq!(out.dim(), img.dim());
    }
}
