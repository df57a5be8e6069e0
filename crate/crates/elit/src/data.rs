//! Toy datasets: class-conditioned geometric shapes and the zero-padded
//! variant used by the compute-reallocation probe.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::param::{c, Scalar};

/// Shape kinds available to the class grid.
const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Ring];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
}

/// Foreground colors; grayscale datasets use intensity levels instead.
const COLORS: [[f64; 3]; 4] = [
    [1.0, -0.6, -0.6],
    [-0.6, 1.0, -0.6],
    [-0.6, -0.6, 1.0],
    [1.0, 1.0, -0.6],
];

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ToyDatasetSpec {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            image_size: 16,
            channels: 3,
            num_classes: 4,
            samples_per_class: 256,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config(format!(
                "dataset.image_size must be >= 8, got {}",
                self.image_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!(
                "dataset.channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        let grid = SHAPES.len() * COLORS.len();
        if self.num_classes == 0 || self.num_classes > grid {
            return Err(Error::config(format!(
                "dataset.num_classes must be in 1..={grid}, got {}",
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("dataset.samples_per_class must be >= 1"));
        }
        Ok(())
    }

    /// Content hash used as the cache key.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(
            format!(
                "shapes-v1:{}:{}:{}:{}:{}",
                self.image_size, self.channels, self.num_classes, self.samples_per_class, self.seed
            )
            .as_bytes(),
        );
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// In-memory dataset: `[C, H, W]` images in `[-1, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Scalar> {
    pub images: Vec<Array3<F>>,
    pub labels: Vec<usize>,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn render_shape<F: Scalar>(
    size: usize,
    channels: usize,
    shape: Shape,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    radius: f64,
) -> Array3<F> {
    let mut img = Array3::from_elem((channels, size, size), c::<F>(-1.0));
    for y in 0..size {
        for x in 0..size {
            // sample at the pixel center
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dx = px - cx;
            let dy = py - cy;
            let inside = match shape {
                Shape::Circle => dx * dx + dy * dy <= radius * radius,
                Shape::Square => dx.abs() <= radius && dy.abs() <= radius,
                Shape::Triangle => {
                    // upright triangle inscribed in the radius box
                    dy <= radius && dy >= -radius && dx.abs() <= (dy + radius) / 2.0
                }
                Shape::Ring => {
                    let r2 = dx * dx + dy * dy;
                    r2 <= radius * radius && r2 >= 0.25 * radius * radius
                }
            };
            if inside {
                for ch in 0..channels {
                    let v = if channels == 1 {
                        // collapse color to an intensity level
                        (color[0] + color[1] + color[2]) / 3.0
                    } else {
                        color[ch]
                    };
                    img[[ch, y, x]] = c::<F>(v);
                }
            }
        }
    }
    img
}

/// Deterministic class-balanced shapes dataset. Class `k` is the pair
/// (shape `k / 4`, color `k % 4`); position and scale are randomized per
/// sample.
pub fn gen_shapes_dataset<F: Scalar>(spec: &ToyDatasetSpec) -> Result<Dataset<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let s = spec.image_size as f64;
    for i in 0..n {
        let class = i % spec.num_classes;
        let shape = SHAPES[class / COLORS.len()];
        let color = COLORS[class % COLORS.len()];
        let radius = rng.gen_range(0.18..0.32) * s;
        let cx = rng.gen_range(radius..s - radius);
        let cy = rng.gen_range(radius..s - radius);
        images.push(render_shape(
            spec.image_size,
            spec.channels,
            shape,
            color,
            cx,
            cy,
            radius,
        ));
        labels.push(class);
    }
    Ok(Dataset {
        images,
        labels,
        image_size: spec.image_size,
        channels: spec.channels,
        num_classes: spec.num_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PaddedVariantSpec {
    /// Token multiplier; must be a perfect square.
    pub pad_factor: usize,
}

impl Default for PaddedVariantSpec {
    fn default() -> Self {
        PaddedVariantSpec { pad_factor: 4 }
    }
}

impl PaddedVariantSpec {
    pub fn side(&self) -> Result<usize> {
        let s = (self.pad_factor as f64).sqrt().round() as usize;
        if s == 0 || s * s != self.pad_factor {
            return Err(Error::config(format!(
                "padded.pad_factor must be a positive perfect square, got {}",
                self.pad_factor
            )));
        }
        Ok(s)
    }
}

/// A dataset padded with zeros plus the masks the probe needs: a pixel-level
/// loss mask and a token-level mask for attention analysis.
#[derive(Debug, Clone)]
pub struct PaddedDataset<F: Scalar> {
    pub data: Dataset<F>,
    pub orig_size: usize,
    pub pad_side: usize,
    /// `[C, H', W']`, true on the real top-left region.
    pub pixel_mask: ndarray::ArrayD<bool>,
    /// Row-major over the padded token grid, true on tokens whose patch lies
    /// in the real region.
    pub token_mask: Vec<bool>,
}

/// Embed every image in the top-left corner of a `side×` larger zero canvas.
/// Zero pixels sit mid-range of the `[-1, 1]` data interval.
pub fn make_padded_variant<F: Scalar>(
    data: &Dataset<F>,
    spec: &PaddedVariantSpec,
    patch_size: usize,
) -> Result<PaddedDataset<F>> {
    let side = spec.side()?;
    let h = data.image_size;
    if patch_size == 0 || h % patch_size != 0 {
        return Err(Error::config(format!(
            "padded variant: patch_size {patch_size} does not divide image size {h}"
        )));
    }
    let hp = h * side;
    let images = data
        .images
        .iter()
        .map(|img| {
            let mut out = Array3::zeros((data.channels, hp, hp));
            out.slice_mut(ndarray::s![.., 0..h, 0..h]).assign(img);
            out
        })
        .collect();
    let mut pixel_mask = ndarray::ArrayD::from_elem(vec![data.channels, hp, hp], false);
    pixel_mask
        .slice_mut(ndarray::s![.., 0..h, 0..h])
        .fill(true);
    let rows = hp / patch_size;
    let real_rows = h / patch_size;
    let mut token_mask = vec![false; rows * rows];
    for r in 0..real_rows {
        for cc in 0..real_rows {
            token_mask[r * rows + cc] = true;
        }
    }
    Ok(PaddedDataset {
        data: Dataset {
            images,
            labels: data.labels.clone(),
            image_size: hp,
            channels: data.channels,
            num_classes: data.num_classes,
        },
        orig_size: h,
        pad_side: side,
        pixel_mask,
        token_mask,
    })
}

/// Drop the padding again (evaluation crops before any metric).
pub fn crop_padding<F: Scalar>(padded: &Array3<F>, orig_size: usize) -> Array3<F> {
    padded
        .slice(ndarray::s![.., 0..orig_size, 0..orig_size])
        .to_owned()
}

const CACHE_MAGIC: &[u8; 8] = b"ELITDS01";

/// Cache path for a spec under `dir`.
pub fn cache_path(dir: &Path, spec: &ToyDatasetSpec) -> PathBuf {
    dir.join(format!("shapes-{}.bin", &spec.digest()[..16]))
}

/// Write the dataset as a flat little-endian archive (see the formats doc).
pub fn save_dataset<F: Scalar>(ds: &Dataset<F>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [
        ds.len() as u64,
        ds.channels as u64,
        ds.image_size as u64,
        ds.num_classes as u64,
        F::WIDTH as u64,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        buf.extend_from_slice(&(label as u64).to_le_bytes());
        for &px in img.iter() {
            buf.extend_from_slice(&px.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset<F: Scalar>(path: &Path) -> Result<Dataset<F>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 48 || &bytes[0..8] != CACHE_MAGIC {
        return Err(Error::checkpoint(format!(
            "dataset cache {}: bad magic",
            path.display()
        )));
    }
    let word = |i: usize| {
        u64::from_le_bytes(bytes[8 + i * 8..16 + i * 8].try_into().expect("8 bytes")) as usize
    };
    let (n, channels, image_size, num_classes, width) =
        (word(0), word(1), word(2), word(3), word(4));
    if width != F::WIDTH {
        return Err(Error::checkpoint(format!(
            "dataset cache {}: element width {width}, expected {}",
            path.display(),
            F::WIDTH
        )));
    }
    let per_image = channels * image_size * image_size;
    let mut off = 48;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        if bytes.len() < off + 8 + per_image * F::WIDTH {
            return Err(Error::checkpoint(format!(
                "dataset cache {}: truncated",
                path.display()
            )));
        }
        labels.push(u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")) as usize);
        off += 8;
        let mut flat = Vec::with_capacity(per_image);
        for _ in 0..per_image {
            flat.push(F::from_le_bytes(&bytes[off..off + F::WIDTH]));
            off += F::WIDTH;
        }
        images.push(
            Array3::from_shape_vec((channels, image_size, image_size), flat).expect("shape"),
        );
    }
    Ok(Dataset {
        images,
        labels,
        image_size,
        channels,
        num_classes,
    })
}

/// Generate through the cache: load when present, otherwise generate and
/// store.
pub fn shapes_cached<F: Scalar>(spec: &ToyDatasetSpec, cache_dir: &Path) -> Result<Dataset<F>> {
    let path = cache_path(cache_dir, spec);
    if path.exists() {
        if let Ok(ds) = load_dataset(&path) {
            return Ok(ds);
        }
    }
    let ds = gen_shapes_dataset(spec)?;
    std::fs::create_dir_all(cache_dir)?;
    save_dataset(&ds, &path)?;
    Ok(ds)
}
