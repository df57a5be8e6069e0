//! Multiply-accumulate instrumentation.
//!
//! Every matrix multiply in the model forward path goes through
//! [`Ctx::matmul`], which tags the product with a [`Bucket`]. The convention
//! mirrors the analytic cost table: projection/feed-forward products count
//! `2·m·k·n` units, attention score/value products count `m·k·n` units each
//! (so a full attention matrix contributes `2·T²·d` in total).

use ndarray::{Array2, ArrayView2};

use super::param::Scalar;

/// Cost component a matmul belongs to. `Unmodeled` collects everything the
/// analytic table leaves out (patch embed, modulation MLPs, final projection).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bucket {
    SpatialAttnProj,
    SpatialAttnMat,
    SpatialFf,
    LatentAttnProj,
    LatentAttnMat,
    LatentFf,
    ReadAttnProj,
    ReadAttnMat,
    ReadFf,
    WriteAttnProj,
    WriteAttnMat,
    WriteFf,
    Unmodeled,
}

pub const MODELED_BUCKETS: [Bucket; 12] = [
    Bucket::SpatialAttnProj,
    Bucket::SpatialAttnMat,
    Bucket::SpatialFf,
    Bucket::LatentAttnProj,
    Bucket::LatentAttnMat,
    Bucket::LatentFf,
    Bucket::ReadAttnProj,
    Bucket::ReadAttnMat,
    Bucket::ReadFf,
    Bucket::WriteAttnProj,
    Bucket::WriteAttnMat,
    Bucket::WriteFf,
];

impl Bucket {
    fn index(self) -> usize {
        match self {
            Bucket::SpatialAttnProj => 0,
            Bucket::SpatialAttnMat => 1,
            Bucket::SpatialFf => 2,
            Bucket::LatentAttnProj => 3,
            Bucket::LatentAttnMat => 4,
            Bucket::LatentFf => 5,
            Bucket::ReadAttnProj => 6,
            Bucket::ReadAttnMat => 7,
            Bucket::ReadFf => 8,
            Bucket::WriteAttnProj => 9,
            Bucket::WriteAttnMat => 10,
            Bucket::WriteFf => 11,
            Bucket::Unmodeled => 12,
        }
    }
}

/// Whether a matmul is a weight projection (counted as 2·m·k·n) or one side of
/// an attention matrix product (counted as m·k·n).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatKind {
    Proj,
    AttnMat,
}

#[derive(Debug, Clone, Default)]
pub struct MacCounter {
    counts: [u64; 13],
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, bucket: Bucket, kind: MatKind, m: usize, k: usize, n: usize) {
        let units = (m * k * n) as u64
            * match kind {
                MatKind::Proj => 2,
                MatKind::AttnMat => 1,
            };
        self.counts[bucket.index()] += units;
    }

    pub fn get(&self, bucket: Bucket) -> u64 {
        self.counts[bucket.index()]
    }

    pub fn modeled_total(&self) -> u64 {
        MODELED_BUCKETS.iter().map(|b| self.get(*b)).sum()
    }
}

/// Forward-pass context: carries the optional MAC counter through the model.
pub struct Ctx {
    pub counter: Option<MacCounter>,
}

impl Ctx {
    pub fn plain() -> Self {
        Ctx { counter: None }
    }

    pub fn counting() -> Self {
        Ctx {
            counter: Some(MacCounter::new()),
        }
    }

    /// `a · b` with cost attribution.
    pub fn matmul<F: Scalar>(
        &mut self,
        a: ArrayView2<F>,
        b: ArrayView2<F>,
        bucket: Bucket,
        kind: MatKind,
    ) -> Array2<F> {
        if let Some(counter) = self.counter.as_mut() {
            counter.record(bucket, kind, a.nrows(), a.ncols(), b.ncols());
        }
        a.dot(&b)
    }
}
