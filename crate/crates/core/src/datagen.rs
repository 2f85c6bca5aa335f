//! Synthetic labeled image sets, IDX input/output, and the oracle per-patch
//! features used as alignment targets.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, rng_from_seed, Tensor};
use crate::tokenizer::patchify;

pub const MAX_CLASSES: usize = 16;
pub const ORACLE_ALPHA: f64 = 0.25;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const IDX_F64_TYPE: u8 = 0x0E;
const CACHE_MAGIC: &[u8; 8] = b"SVQDATA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[M, H, H, C]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_leading(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Whether the shape of `class` covers the point `(u, v)` given in
/// instance-scaled coordinates centred on the shape.
fn covers(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let inf = au.max(av);
    let r = (u * u + v * v).sqrt();
    match class {
        0 => inf <= 1.0,
        1 => r <= 1.0,
        2 => (0.55..=1.0).contains(&r),
        3 => (0.6..=1.0).contains(&inf),
        4 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        5 => (au - av).abs() <= 0.3 && inf <= 1.0,
        6 => (-1.0..=1.0).contains(&v) && au <= (v + 1.0) / 2.0,
        7 => au + av <= 1.0,
        8 => au <= 1.0 && av <= 0.35,
        9 => av <= 1.0 && au <= 0.35,
        10 => (au - 0.55).powi(2) + v * v <= 0.35f64.powi(2),
        11 => (av - 0.55).powi(2) + u * u <= 0.35f64.powi(2),
        12 => inf <= 1.0 && ((u > 0.0) != (v > 0.0)),
        13 => inf <= 1.0 && (u <= -0.4 || v >= 0.4),
        14 => inf <= 1.0 && (((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        15 => inf <= 1.0 && (((u + 1.0) * 2.0).floor() as i64) % 2 == 0,
        _ => unreachable!("class index checked by caller"),
    }
}

/// Procedural grayscale shapes. The class fixes the shape type; each sample
/// draws its own position, scale, contrast and pixel noise from a stream
/// derived from `(seed, index)`. Label `i % num_classes` keeps classes balanced.
pub fn gen_shapes(seed: u64, count: usize, num_classes: usize, h: usize) -> Result<Dataset> {
    if h != 16 && h != 32 {
        return Err(Error::config(
            "gen_shapes",
            format!("unsupported image size {h} (16 or 32)"),
        ));
    }
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::config(
            "gen_shapes",
            format!("num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"),
        ));
    }
    let hf = h as f64;
    let mut data = Vec::with_capacity(count * h * h);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % num_classes;
        let mut rng = rng_from_seed(derive_seed(seed, i as u64));
        let cx = rng.random_range(0.35..0.65) * hf;
        let cy = rng.random_range(0.35..0.65) * hf;
        let scale = rng.random_range(0.18..0.32) * hf;
        let background = rng.random_range(0.0..0.15);
        let fg = rng.random_range(0.6..1.0);
        for y in 0..h {
            for x in 0..h {
                // 2x2 supersampling for soft edges
                let mut cover = 0.0;
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let u = (x as f64 + ox - cx) / scale;
                    let v = (y as f64 + oy - cy) / scale;
                    if covers(class, u, v) {
                        cover += 0.25;
                    }
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                let px = background + cover * (fg - background) + 0.03 * noise;
                data.push(px.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    Ok(Dataset {
        images: Tensor::from_vec(vec![count, h, h, 1], data),
        labels,
        num_classes,
        split: Split::Train,
    })
}

fn read_u32(bytes: &[u8], at: usize, op: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            op,
            msg: format!("header ends at byte {}", bytes.len()),
        })
}

fn read_file(path: &Path, op: &'static str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(op, path, e))
}

/// Parses an IDX image file (`0x00000803`) and label file (`0x00000801`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let op = "load_idx";
    let ib = read_file(images_path, op)?;
    let lb = read_file(labels_path, op)?;
    let magic = read_u32(&ib, 0, op)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(
            op,
            format!(
                "{}: magic {magic:#010x}, expected {IDX_IMAGES:#010x}",
                images_path.display()
            ),
        ));
    }
    let magic = read_u32(&lb, 0, op)?;
    if magic != IDX_LABELS {
        return Err(Error::format(
            op,
            format!(
                "{}: magic {magic:#010x}, expected {IDX_LABELS:#010x}",
                labels_path.display()
            ),
        ));
    }
    let m = read_u32(&ib, 4, op)? as usize;
    let rows = read_u32(&ib, 8, op)? as usize;
    let cols = read_u32(&ib, 12, op)? as usize;
    let n_labels = read_u32(&lb, 4, op)? as usize;
    if rows != cols {
        return Err(Error::format(
            op,
            format!("images must be square, got {rows}x{cols}"),
        ));
    }
    let pixels = &ib[16..];
    if pixels.len() < m * rows * cols {
        return Err(Error::Truncated {
            op,
            msg: format!(
                "expected {} pixel bytes, found {}",
                m * rows * cols,
                pixels.len()
            ),
        });
    }
    let labels = &lb[8..];
    if labels.len() < n_labels {
        return Err(Error::Truncated {
            op,
            msg: format!("expected {n_labels} label bytes, found {}", labels.len()),
        });
    }
    if m != n_labels {
        return Err(Error::Consistency {
            op,
            msg: format!("{m} images but {n_labels} labels"),
        });
    }
    let data = pixels[..m * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = labels[..m].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&l| l + 1);
    Ok(Dataset {
        images: Tensor::from_vec(vec![m, rows, cols, 1], data),
        labels,
        num_classes,
        split: Split::Train,
    })
}

/// Writes a single-channel dataset as an IDX image/label pair (pixels rounded to bytes).
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = dataset.images.shape();
    if s[3] != 1 {
        return Err(Error::shape(
            "write_idx",
            "IDX images must have one channel",
        ));
    }
    let mut ib = Vec::with_capacity(16 + dataset.images.numel());
    ib.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    for d in [s[0], s[1], s[2]] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    ib.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lb = Vec::with_capacity(8 + dataset.len());
    lb.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lb.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lb.extend(dataset.labels.iter().map(|&l| l as u8));
    fs::write(images_path, ib).map_err(|e| Error::io("write_idx", images_path, e))?;
    fs::write(labels_path, lb).map_err(|e| Error::io("write_idx", labels_path, e))
}

/// Writes any tensor as a big-endian float64 IDX file (type byte `0x0E`).
pub fn write_idx_f64(path: &Path, t: &Tensor) -> Result<()> {
    let mut b = Vec::with_capacity(4 + 4 * t.ndim() + 8 * t.numel());
    b.extend_from_slice(&[0, 0, IDX_F64_TYPE, t.ndim() as u8]);
    for &d in t.shape() {
        b.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &x in t.data() {
        b.extend_from_slice(&x.to_be_bytes());
    }
    fs::write(path, b).map_err(|e| Error::io("write_idx_f64", path, e))
}

pub fn read_idx_f64(path: &Path) -> Result<Tensor> {
    let op = "read_idx_f64";
    let b = read_file(path, op)?;
    let magic = read_u32(&b, 0, op)?;
    if magic >> 8 != IDX_F64_TYPE as u32 {
        return Err(Error::format(
            op,
            format!("magic {magic:#010x} is not float64 IDX"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let shape: Vec<usize> = (0..ndim)
        .map(|i| read_u32(&b, 4 + 4 * i, op).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let body = &b[4 + 4 * ndim..];
    if body.len() < 8 * n {
        return Err(Error::Truncated {
            op,
            msg: format!("expected {} bytes, found {}", 8 * n, body.len()),
        });
    }
    let data = body
        .chunks_exact(8)
        .take(n)
        .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// Saves a dataset to the versioned binary cache.
pub fn save_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let s = dataset.images.shape();
    let mut b = Vec::new();
    b.extend_from_slice(CACHE_MAGIC);
    for d in [s[0], s[1], s[2], s[3], dataset.num_classes] {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in dataset.images.data() {
        b.extend_from_slice(&x.to_le_bytes());
    }
    for &l in &dataset.labels {
        b.extend_from_slice(&(l as u64).to_le_bytes());
    }
    fs::write(path, b).map_err(|e| Error::io("save_cache", path, e))
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    let op = "load_cache";
    let b = read_file(path, op)?;
    if b.len() < 48 || &b[..8] != CACHE_MAGIC {
        return Err(Error::format(op, "missing SVQDATA1 header"));
    }
    let word = |i: usize| {
        u64::from_le_bytes(b[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize
    };
    let (m, h, w, c, k) = (word(0), word(1), word(2), word(3), word(4));
    let n = m * h * w * c;
    let need = 48 + 8 * n + 8 * m;
    if b.len() != need {
        return Err(Error::Truncated {
            op,
            msg: format!("expected {need} bytes, found {}", b.len()),
        });
    }
    let f = |i: usize| f64::from_le_bytes(b[48 + 8 * i..56 + 8 * i].try_into().expect("8 bytes"));
    let data = (0..n).map(f).collect();
    let labels: Vec<usize> = (0..m)
        .map(|i| {
            let at = 48 + 8 * n + 8 * i;
            u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes")) as usize
        })
        .collect();
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::Consistency {
            op,
            msg: "label outside class range".into(),
        });
    }
    Ok(Dataset {
        images: Tensor::from_vec(vec![m, h, w, c], data),
        labels,
        num_classes: k,
        split: Split::Train,
    })
}

/// Per-patch alignment targets, `[M, N, F]` with unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleFeatures {
    pub features: Tensor,
    pub recipe: String,
}

/// Fixed random feature map: `normalize(e[label] + alpha R (patch - 1/2))`
/// with orthonormal class embeddings `e` and a Gaussian projection `R`.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub dim: usize,
    pub patch: usize,
    pub alpha: f64,
    pub seed: u64,
    /// `[num_classes, F]`, orthonormal rows.
    pub class_embeddings: Tensor,
    /// `[P*P*C, F]`.
    pub projection: Tensor,
}

impl Oracle {
    pub fn new(
        num_classes: usize,
        patch: usize,
        channels: usize,
        dim: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim < num_classes {
            return Err(Error::config(
                "oracle_features",
                format!("feature dim F={dim} must be >= number of classes {num_classes}"),
            ));
        }
        let mut rng = rng_from_seed(derive_seed(seed, 0x0_4ac1e));
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        while basis.len() < num_classes {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            // two Gram-Schmidt passes for orthogonality at the 1e-15 level
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= d * y;
                    }
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let pd = patch * patch * channels;
        let std = 2.0 / ((dim * pd) as f64).sqrt();
        let projection = Tensor::randn(vec![pd, dim], std, &mut rng);
        Ok(Oracle {
            dim,
            patch,
            alpha,
            seed,
            class_embeddings: Tensor::from_vec(vec![num_classes, dim], basis.concat()),
            projection,
        })
    }

    pub fn recipe(&self) -> String {
        format!(
            "class-embedding+{}*projection(patch{}) F={} seed={}",
            self.alpha, self.patch, self.dim, self.seed
        )
    }

    /// Features of `images: [M, H, H, C]` with the given labels.
    pub fn features(&self, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let patches = patchify(images, self.patch)?;
        let s = patches.shape().to_vec();
        let (m, n, pd) = (s[0], s[1], s[2]);
        if labels.len() != m {
            return Err(Error::shape(
                "oracle_features",
                format!("{m} images but {} labels", labels.len()),
            ));
        }
        let k = self.class_embeddings.shape()[0];
        let f = self.dim;
        let r = self.projection.data();
        let mut out = Vec::with_capacity(m * n * f);
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::config(
                    "oracle_features",
                    format!("label {label} >= {k}"),
                ));
            }
            let e = &self.class_embeddings.data()[label * f..(label + 1) * f];
            for j in 0..n {
                let p = &patches.data()[(i * n + j) * pd..(i * n + j + 1) * pd];
                let mut v = e.to_vec();
                for (a, &x) in p.iter().enumerate() {
                    let c = self.alpha * (x - 0.5);
                    for (o, &w) in v.iter_mut().zip(&r[a * f..(a + 1) * f]) {
                        *o += c * w;
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                out.extend(v.into_iter().map(|x| x / norm));
            }
        }
        Tensor::new(vec![m, n, f], out)
    }
}

pub fn oracle_features(
    dataset: &Dataset,
    patch: usize,
    dim: usize,
    alpha: f64,
    seed: u64,
) -> Result<OracleFeatures> {
    let oracle = Oracle::new(
        dataset.num_classes,
        patch,
        dataset.channels(),
        dim,
        alpha,
        seed,
    )?;
    Ok(OracleFeatures {
        features: oracle.features(&dataset.images, &dataset.labels)?,
        recipe: oracle.recipe(),
    })
}
