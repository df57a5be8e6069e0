//! Multi-head attention core with QK normalization and optional 2-D rotary
//! embeddings, usable for both self- and cross-attention.

use ndarray::{s, Array2, Axis};

use super::count::{Bucket, Ctx, MatKind};
use super::norm::{RmsCache, RmsNorm};
use super::param::{c, ParamVisitor, Scalar};

/// Axial rotary tables for a 2-D token grid (row-major token order).
///
/// The first half of each head rotates with the row coordinate, the second
/// half with the column coordinate. Requires `head_dim % 4 == 0`.
#[derive(Debug, Clone)]
pub struct Rope<F: Scalar> {
    /// `[tokens, head_dim/2]` cosine per rotation pair.
    cos: Array2<F>,
    sin: Array2<F>,
}

impl<F: Scalar> Rope<F> {
    pub fn new_2d(rows: usize, cols: usize, head_dim: usize, theta: f64) -> Self {
        assert!(head_dim % 4 == 0, "head_dim must be divisible by 4 for axial RoPE");
        let tokens = rows * cols;
        let pairs = head_dim / 2;
        let axis_pairs = pairs / 2;
        let mut cos = Array2::zeros((tokens, pairs));
        let mut sin = Array2::zeros((tokens, pairs));
        for r in 0..rows {
            for cidx in 0..cols {
                let t = r * cols + cidx;
                for j in 0..pairs {
                    let (pos, jj) = if j < axis_pairs {
                        (r as f64, j)
                    } else {
                        (cidx as f64, j - axis_pairs)
                    };
                    let freq = theta.powf(-2.0 * jj as f64 / (pairs as f64));
                    let angle = pos * freq;
                    cos[[t, j]] = c(angle.cos());
                    sin[[t, j]] = c(angle.sin());
                }
            }
        }
        Rope { cos, sin }
    }

    /// Rotate `[tokens, head_dim]` in place.
    fn apply(&self, x: &mut Array2<F>, inverse: bool) {
        let pairs = x.ncols() / 2;
        for (t, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            for j in 0..pairs {
                let cos = self.cos[[t, j]];
                let sin = if inverse { -self.sin[[t, j]] } else { self.sin[[t, j]] };
                let a = row[2 * j];
                let b = row[2 * j + 1];
                row[2 * j] = a * cos - b * sin;
                row[2 * j + 1] = a * sin + b * cos;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache<F: Scalar> {
    q_rms: RmsCache<F>,
    k_rms: RmsCache<F>,
    /// Post-norm, post-rope query/key.
    qr: Array2<F>,
    kr: Array2<F>,
    vh: Array2<F>,
    /// Softmax attention weights `[Tq, Tk]`.
    pub p: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct AttnCache<F: Scalar> {
    pub heads: Vec<HeadCache<F>>,
}

/// Head splitting + QK-norm + scaled-dot-product attention.
///
/// Input projections live in the caller; this core consumes already-projected
/// `q`, `k`, `v` of shape `[tokens, d]`.
#[derive(Debug, Clone)]
pub struct AttnCore<F: Scalar> {
    pub heads: usize,
    pub q_norm: RmsNorm<F>,
    pub k_norm: RmsNorm<F>,
}

impl<F: Scalar> AttnCore<F> {
    pub fn new(d: usize, heads: usize) -> Self {
        assert!(d % heads == 0, "d must be divisible by heads");
        let hd = d / heads;
        AttnCore {
            heads,
            q_norm: RmsNorm::new(hd),
            k_norm: RmsNorm::new(hd),
        }
    }

    /// `key_mask[j] == false` removes key `j` from every softmax.
    pub fn forward(
        &self,
        q: &Array2<F>,
        k: &Array2<F>,
        v: &Array2<F>,
        rope: Option<&Rope<F>>,
        key_mask: Option<&[bool]>,
        ctx: &mut Ctx,
        bucket_mat: Bucket,
    ) -> (Array2<F>, AttnCache<F>) {
        let d = q.ncols();
        let hd = d / self.heads;
        let scale = c::<F>(1.0 / (hd as f64).sqrt());
        let mut out = Array2::zeros((q.nrows(), d));
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let (mut qr, q_rms) = self.q_norm.forward(&q.slice(cols).to_owned());
            let (mut kr, k_rms) = self.k_norm.forward(&k.slice(cols).to_owned());
            if let Some(r) = rope {
                r.apply(&mut qr, false);
                r.apply(&mut kr, false);
            }
            let vh = v.slice(cols).to_owned();
            let mut scores = ctx.matmul(qr.view(), kr.t(), bucket_mat, MatKind::AttnMat);
            scores.mapv_inplace(|x| x * scale);
            if let Some(mask) = key_mask {
                for (j, &keep) in mask.iter().enumerate() {
                    if !keep {
                        scores.column_mut(j).fill(F::neg_infinity());
                    }
                }
            }
            let p = softmax_rows(&scores);
            let oh = ctx.matmul(p.view(), vh.view(), bucket_mat, MatKind::AttnMat);
            out.slice_mut(cols).assign(&oh);
            heads.push(HeadCache {
                q_rms,
                k_rms,
                qr,
                kr,
                vh,
                p,
            });
        }
        (out, AttnCache { heads })
    }

    /// Returns grads w.r.t. the projected `q`, `k`, `v`.
    pub fn backward(
        &mut self,
        cache: &AttnCache<F>,
        rope: Option<&Rope<F>>,
        gy: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, Array2<F>) {
        let d = gy.ncols();
        let hd = d / self.heads;
        let scale = c::<F>(1.0 / (hd as f64).sqrt());
        let tq = gy.nrows();
        let tk = cache.heads[0].kr.nrows();
        let mut gq = Array2::zeros((tq, d));
        let mut gk = Array2::zeros((tk, d));
        let mut gv = Array2::zeros((tk, d));
        for (h, hc) in cache.heads.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let goh = gy.slice(cols).to_owned();
            gv.slice_mut(cols).assign(&hc.p.t().dot(&goh));
            let gp = goh.dot(&hc.vh.t());
            // softmax backward: gs = p ∘ (gp − rowsum(gp ∘ p))
            let dot = (&gp * &hc.p).sum_axis(Axis(1));
            let mut gs = gp;
            for ((mut row, pr), &dsum) in gs
                .axis_iter_mut(Axis(0))
                .zip(hc.p.axis_iter(Axis(0)))
                .zip(dot.iter())
            {
                for (g, &pv) in row.iter_mut().zip(pr.iter()) {
                    *g = pv * (*g - dsum);
                }
            }
            gs.mapv_inplace(|x| x * scale);
            let mut gqr = gs.dot(&hc.kr);
            let mut gkr = gs.t().dot(&hc.qr);
            if let Some(r) = rope {
                r.apply(&mut gqr, true);
                r.apply(&mut gkr, true);
            }
            gq.slice_mut(cols).assign(&self.q_norm.backward(&hc.q_rms, &gqr));
            gk.slice_mut(cols).assign(&self.k_norm.backward(&hc.k_rms, &gkr));
        }
        (gq, gk, gv)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn ParamVisitor<F>) {
        self.q_norm.visit(&format!("{prefix}.q_norm"), f);
        self.k_norm.visit(&format!("{prefix}.k_norm"), f);
    }

    pub fn zero_grad(&mut self) {
        self.q_norm.zero_grad();
        self.k_norm.zero_grad();
    }
}

pub fn softmax_rows<F: Scalar>(scores: &Array2<F>) -> Array2<F> {
    let mut p = scores.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    p
}
