//! Timestep and class-condition embeddings.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::nn::activation::{silu, silu_backward};
use crate::nn::count::{Bucket, Ctx};
use crate::nn::param::{c, trunc_normal, Param, ParamVisitor, Scalar};
use crate::nn::{Init, Linear};

/// Sinusoidal feature width before the MLP.
pub const TIME_FREQ_DIM: usize = 256;
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10000.0;

/// Sinusoidal timestep features followed by a 2-layer SiLU MLP to width `d`.
#[derive(Debug, Clone)]
pub struct TimestepEmbed<F: Scalar> {
    pub mlp1: Linear<F>,
    pub mlp2: Linear<F>,
}

pub struct TimestepCache<F: Scalar> {
    feat: Array2<F>,
    h1: Array2<F>,
}

impl<F: Scalar> TimestepEmbed<F> {
    pub fn new<R: Rng>(rng: &mut R, d: usize) -> Self {
        TimestepEmbed {
            mlp1: Linear::new(rng, TIME_FREQ_DIM, d, Init::TruncNormal),
            mlp2: Linear::new(rng, d, d, Init::TruncNormal),
        }
    }

    fn features(t: F) -> Array2<F> {
        let half = TIME_FREQ_DIM / 2;
        let tt = t.to_f64() * TIME_SCALE;
        let mut feat = Array2::zeros((1, TIME_FREQ_DIM));
        for i in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
            feat[[0, i]] = c((tt * freq).sin());
            feat[[0, half + i]] = c((tt * freq).cos());
        }
        feat
    }

    pub fn forward(&self, t: F) -> (Array1<F>, TimestepCache<F>) {
        let feat = Self::features(t);
        let mut ctx = Ctx::plain();
        let h1 = self.mlp1.forward(&feat, &mut ctx, Bucket::Unmodeled);
        let a = silu(h1.row(0).as_slice().expect("row"));
        let d = a.len();
        let a_arr = Array2::from_shape_vec((1, d), a).expect("len");
        let out = self.mlp2.forward(&a_arr, &mut ctx, Bucket::Unmodeled);
        (out.row(0).to_owned(), TimestepCache { feat, h1 })
    }

    pub fn backward(&mut self, cache: &TimestepCache<F>, g_out: &Array1<F>) {
        let d = g_out.len();
        let h1_slice = cache.h1.row(0).to_vec();
        let a = silu(&h1_slice);
        let a_arr = Array2::from_shape_vec((1, d), a).expect("len");
        let g_arr =
            Array2::from_shape_vec((1, d), g_out.to_vec()).expect("len");
        let g_a = self.mlp2.backward(&a_arr, &g_arr);
        let g_h1 = silu_backward(&h1_slice, g_a.row(0).as_slice().expect("row"));
        let g_h1_arr = Array2::from_shape_vec((1, d), g_h1).expect("len");
        let _ = self.mlp1.backward(&cache.feat, &g_h1_arr);
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn ParamVisitor<F>) {
        self.mlp1.visit(&format!("{prefix}.mlp1"), f);
        self.mlp2.visit(&format!("{prefix}.mlp2"), f);
    }
}

/// Class embedding table with a distinct learned null (unconditional) row at
/// index `num_classes`.
#[derive(Debug, Clone)]
pub struct ClassEmbed<F: Scalar> {
    pub table: Param<F, ndarray::Ix2>,
    pub num_classes: usize,
}

impl<F: Scalar> ClassEmbed<F> {
    pub fn new<R: Rng>(rng: &mut R, num_classes: usize, d: usize) -> Self {
        let table =
            Array2::from_shape_simple_fn((num_classes + 1, d), || trunc_normal(rng, 0.02));
        ClassEmbed {
            table: Param::new(table),
            num_classes,
        }
    }

    pub fn row_index(&self, class: Option<usize>) -> usize {
        class.unwrap_or(self.num_classes)
    }

    pub fn forward(&self, class: Option<usize>) -> Array1<F> {
        self.table.v.row(self.row_index(class)).to_owned()
    }

    pub fn backward(&mut self, class: Option<usize>, g: &Array1<F>) {
        let idx = self.row_index(class);
        let mut row = self.table.g.row_mut(idx);
        row += g;
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn ParamVisitor<F>) {
        self.table.visit(&format!("{prefix}.table"), f);
    }
}
