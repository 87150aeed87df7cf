//! Dataset ingestion and the deterministic sampling used to model adversary
//! datasets. All images live in [0, 1].

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, h, w, c]`, every pixel in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: &str, class_count: usize) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            name: name.to_string(),
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 {
            return Err(Error::Dataset(format!("images must be [n,h,w,c], got {s:?}")));
        }
        if s[0] != self.labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                s[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.class_count) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {} classes",
                self.class_count
            )));
        }
        if self
            .images
            .data()
            .iter()
            .any(|&p| !(0.0..=1.0).contains(&p))
        {
            return Err(Error::Dataset("pixel outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (h, w, c)
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn input_dim(&self) -> usize {
        let (h, w, c) = self.image_shape();
        h * w * c
    }

    /// Flat pixels of sample i.
    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// New dataset holding the given sample indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (h, w, c) = self.image_shape();
        let dim = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), h, w, c], data).expect("consistent dims"),
            labels,
            name: self.name.clone(),
            class_count: self.class_count,
        }
    }

    /// Samples belonging to one class, preserving order.
    pub fn of_class(&self, class: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.select(&idx)
    }

    /// First `n` samples (or all, when fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len().min(n)).collect();
        self.select(&idx)
    }
}

// ---- IDX format ---------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], off: usize) -> Result<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset("truncated header".into()))
}

/// Load an ubyte image/label archive pair (optionally gzip-compressed).
/// Pixels are scaled to [0, 1] by dividing by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img = read_maybe_gzip(images_path.as_ref())?;
    let lbl = read_maybe_gzip(labels_path.as_ref())?;

    if be_u32(&img, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!(
            "bad image magic {:#010x}",
            be_u32(&img, 0)?
        )));
    }
    if be_u32(&lbl, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!(
            "bad label magic {:#010x}",
            be_u32(&lbl, 0)?
        )));
    }
    let n = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    let n_lbl = be_u32(&lbl, 4)? as usize;
    if n != n_lbl {
        return Err(Error::Dataset(format!(
            "image count {n} does not match label count {n_lbl}"
        )));
    }
    let pixel_count = n * rows * cols;
    let pixels = img
        .get(16..16 + pixel_count)
        .ok_or_else(|| Error::Dataset("image archive truncated".into()))?;
    let labels_raw = lbl
        .get(8..8 + n)
        .ok_or_else(|| Error::Dataset("label archive truncated".into()))?;

    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&y| y as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1).max(2);
    Dataset::new(
        Tensor::new(vec![n, rows, cols, 1], data)?,
        labels,
        "idx",
        class_count,
    )
}

// ---- synthetic datasets --------------------------------------------------

/// Gaussian class-blob images: each class has a random mean image, samples
/// add pixel noise and clip to [0, 1]. Linearly separable by construction.
pub fn make_synthetic(
    classes: usize,
    n_per_class: usize,
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    let (h, w, c) = dims;
    let dim = h * w * c;
    if dim == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument("empty dims or class size".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        for _ in 0..n_per_class {
            for &m in &means[k] {
                let v: f64 = m + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, h, w, c], data)?, labels, "blobs", classes)
}

// 5x7 pixel glyphs for the rendered-digit desk benchmark.
const DIGIT_GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Rendered handwritten-digit stand-in: 28x28x1 glyph images with random
/// scale, position, shear, stroke dropout, intensity, background clutter,
/// and Gaussian pixel noise. Balanced across the 10 digit classes,
/// deterministic per seed. The per-sample distortions keep within-class
/// input gradients diverse, so class statistics cannot be pinned down from
/// a handful of samples.
pub fn make_digits(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let (h, w) = (28usize, 28usize);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("bad noise sigma: {e}")))?;
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let scale = rng.gen_range(2..=3usize);
        let (gh, gw) = (7 * scale, 5 * scale);
        let shear: f64 = rng.gen_range(-0.18..0.18);
        let max_skew = (shear.abs() * gh as f64 / 2.0).ceil() as usize;
        let top = rng.gen_range(0..=(h - gh));
        let left = rng.gen_range(max_skew..=(w - gw - max_skew));
        let intensity: f64 = rng.gen_range(0.55..1.0);
        let mut img = vec![0.0f64; h * w];
        for r in 0..gh {
            let grow = DIGIT_GLYPHS[digit][r / scale];
            let skew = (shear * (r as f64 - gh as f64 / 2.0)).round() as isize;
            for col in 0..gw {
                if (grow >> (4 - col / scale)) & 1 != 1 {
                    continue;
                }
                // stroke dropout diversifies which pixels carry each sample
                if rng.gen_range(0.0..1.0) < 0.06 {
                    continue;
                }
                let c = (left + col) as isize + skew;
                if (0..w as isize).contains(&c) {
                    img[(top + r) * w + c as usize] = intensity;
                }
            }
        }
        for _ in 0..2 {
            let p = rng.gen_range(0..h * w);
            let v: f64 = rng.gen_range(0.3..0.9);
            img[p] = img[p].max(v);
        }
        for p in &mut img {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        data.extend_from_slice(&img);
        labels.push(digit);
    }
    Dataset::new(Tensor::new(vec![n, h, w, 1], data)?, labels, "digits", 10)
}

// ---- splits and subsampling -----------------------------------------------

/// Indices of each class, in dataset order.
fn class_indices(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.class_count];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Per-class stratified split into disjoint covering parts. Each part keeps
/// its samples in original dataset order.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument("no fractions given".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "fractions sum to {total}, expected 1"
        )));
    }
    if fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::InvalidArgument("fractions must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (class, mut idx) in class_indices(ds).into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < fractions.len() {
            return Err(Error::Dataset(format!(
                "class {class} has {} samples, fewer than {} parts",
                idx.len(),
                fractions.len()
            )));
        }
        idx.shuffle(&mut rng);
        let m = idx.len();
        let mut cum = 0.0;
        let mut start = 0usize;
        for (p, &f) in fractions.iter().enumerate() {
            cum += f;
            let end = if p + 1 == fractions.len() {
                m
            } else {
                (cum * m as f64).round() as usize
            };
            parts[p].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    Ok(parts
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            ds.select(&p)
        })
        .collect())
}

/// Exactly `n_per_class` samples of every class, seed-deterministic.
pub fn subsample_per_class(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(n_per_class * ds.class_count);
    for (class, mut idx) in class_indices(ds).into_iter().enumerate() {
        if idx.len() < n_per_class {
            return Err(Error::Dataset(format!(
                "class {class} has {} samples, need {n_per_class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..n_per_class]);
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}
