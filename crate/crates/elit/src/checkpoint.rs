//! Byte-stable training checkpoints.
//!
//! Layout (all integers little-endian, see the formats doc):
//! magic, format version, embedded config TOML, step, rng state, named
//! parameter tensors, Adam moments, EMA shadows, then a SHA-256 of
//! everything before it.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::Model;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::param::Scalar;
use crate::train::{Adam, Ema, TrainState};

const MAGIC: &[u8; 8] = b"ELITCKPT";
pub const FORMAT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn tensor<F: Scalar>(&mut self, t: &ArrayD<F>) {
        self.u32(t.ndim() as u32);
        for &s in t.shape() {
            self.u64(s as u64);
        }
        for &v in t.iter() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint("truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn tensor<F: Scalar>(&mut self) -> Result<ArrayD<F>> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * F::WIDTH)?;
        let vals = raw
            .chunks_exact(F::WIDTH)
            .map(F::from_le_bytes)
            .collect::<Vec<_>>();
        ArrayD::from_shape_vec(shape, vals).map_err(|e| Error::checkpoint(format!("tensor: {e}")))
    }
}

fn collect_params<F: Scalar>(model: &mut Model<F>) -> (Vec<String>, Vec<ArrayD<F>>) {
    let mut names = Vec::new();
    let mut values = Vec::new();
    model.for_each_param(&mut |name: &str, v: ArrayViewMutD<F>, _g: ArrayViewMutD<F>| {
        names.push(name.to_string());
        values.push(v.to_owned());
    });
    (names, values)
}

/// Serialize the full state to bytes (checksum included).
pub fn to_bytes<F: Scalar>(state: &mut TrainState<F>) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(F::DTYPE.as_bytes());
    w.bytes(state.cfg.to_toml().as_bytes());
    w.u64(state.step);

    w.buf.extend_from_slice(&state.rng.get_seed());
    let pos = state.rng.get_word_pos();
    w.buf.extend_from_slice(&pos.to_le_bytes());
    w.u64(state.rng.get_stream());

    let (names, values) = collect_params(&mut state.model);
    w.u64(names.len() as u64);
    for (name, v) in names.iter().zip(&values) {
        w.bytes(name.as_bytes());
        w.tensor(v);
    }
    w.u64(state.opt.t);
    for m in &state.opt.m {
        w.tensor(m);
    }
    for v in &state.opt.v {
        w.tensor(v);
    }
    for s in &state.ema.shadow {
        w.tensor(s);
    }

    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<TrainState<F>> {
    if bytes.len() < 44 || &bytes[0..8] != MAGIC {
        return Err(Error::checkpoint("not a checkpoint (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::checkpoint("integrity check failed (checksum mismatch)"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}; no migration path"
        )));
    }
    let dtype = String::from_utf8_lossy(r.bytes()?).to_string();
    if dtype != F::DTYPE {
        return Err(Error::checkpoint(format!(
            "dtype {dtype}, expected {}",
            F::DTYPE
        )));
    }
    let cfg_text = String::from_utf8_lossy(r.bytes()?).to_string();
    let cfg = RunConfig::from_toml(&cfg_text)?;
    let step = r.u64()?;

    let seed: [u8; 32] = r.take(32)?.try_into().expect("32");
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16"));
    let stream = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut model: Model<F> = Model::new(cfg.backbone.clone(), cfg.training.seed)?;
    let n_params = r.u64()? as usize;
    let (names, _) = collect_params(&mut model);
    if n_params != names.len() {
        return Err(Error::checkpoint(format!(
            "{n_params} tensors in file, model has {}",
            names.len()
        )));
    }
    let mut values = Vec::with_capacity(n_params);
    for expect in &names {
        let name = String::from_utf8_lossy(r.bytes()?).to_string();
        if &name != expect {
            return Err(Error::checkpoint(format!(
                "parameter order mismatch: {name} where {expect} expected"
            )));
        }
        values.push(r.tensor::<F>()?);
    }
    let mut idx = 0;
    let mut shape_err = None;
    model.for_each_param(&mut |name: &str, mut v: ArrayViewMutD<F>, _g: ArrayViewMutD<F>| {
        if v.shape() != values[idx].shape() && shape_err.is_none() {
            shape_err = Some(format!("parameter {name}: shape mismatch"));
        } else {
            v.assign(&values[idx].view());
        }
        idx += 1;
    });
    if let Some(e) = shape_err {
        return Err(Error::checkpoint(e));
    }

    let mut opt = Adam::new(&mut model);
    opt.t = r.u64()?;
    for m in opt.m.iter_mut() {
        *m = r.tensor()?;
    }
    for v in opt.v.iter_mut() {
        *v = r.tensor()?;
    }
    let mut ema = Ema::new(&mut model, cfg.training.ema_beta);
    for s in ema.shadow.iter_mut() {
        *s = r.tensor()?;
    }
    if r.pos != body.len() {
        return Err(Error::checkpoint("trailing bytes after checkpoint payload"));
    }

    Ok(TrainState {
        cfg,
        model,
        opt,
        ema,
        step,
        rng,
    })
}

pub fn save_checkpoint<F: Scalar>(state: &mut TrainState<F>, path: &Path) -> Result<()> {
    let bytes = to_bytes(state);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<TrainState<F>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
