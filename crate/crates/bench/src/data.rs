//! Datasets: synthetic generators, IDX image files and rating tables.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX file ends after {found} bytes, header promises {expected}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("line {line}: rating {value} is not one of 0.5, 1.0, ..., 5.0")]
    BadRating { line: usize, value: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    LogregSynth,
    ToyGaussian,
    Images,
    Ratings,
}

/// Rows plus a fixed train/test partition of their indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub rows: Vec<Vec<f64>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Shuffles indices with `seed` and puts the first ⌊fraction·n⌉ into train.
    pub fn split(kind: DatasetKind, rows: Vec<Vec<f64>>, train_fraction: f64, seed: u64) -> Self {
        let n = rows.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let n_train = ((train_fraction * n as f64).round() as usize).min(n);
        let mut train = idx[..n_train].to_vec();
        let mut test = idx[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Self { kind, rows, train, test }
    }

    pub fn train_rows(&self) -> Vec<Vec<f64>> {
        self.train.iter().map(|&i| self.rows[i].clone()).collect()
    }

    pub fn test_rows(&self) -> Vec<Vec<f64>> {
        self.test.iter().map(|&i| self.rows[i].clone()).collect()
    }
}

// Keeps split shuffles independent of generator draws made with the same seed.
const SPLIT_SALT: u64 = 0x5eed_5971;

/// One synthetic logistic-regression point: x = (a, a/2, a/3, a/4) + ε and
/// y = 1[⟨(1, −2, −3, 4), x⟩ ≥ 0]. Returns [x..., y].
pub fn logreg_point(a: f64, eps: [f64; 4]) -> Vec<f64> {
    let x = [a + eps[0], a / 2.0 + eps[1], a / 3.0 + eps[2], a / 4.0 + eps[3]];
    let w = [1.0, -2.0, -3.0, 4.0];
    let s: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let mut row = x.to_vec();
    row.push(if s >= 0.0 { 1.0 } else { 0.0 });
    row
}

/// a ~ U[−5, 5], ε ~ U[−0.005, 0.005]⁴; fixed 80/20 split.
pub fn gen_logreg_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let a = rng.random_range(-5.0..=5.0);
            let eps = std::array::from_fn(|_| rng.random_range(-0.005..=0.005));
            logreg_point(a, eps)
        })
        .collect();
    Dataset::split(DatasetKind::LogregSynth, rows, 0.8, seed)
}

/// n training draws from N((1, 0.8), [[1, 1−ε], [1−ε, 1]]) plus n/5 held-out draws.
pub fn gen_toy_data(n: usize, eps_corr: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 1.0 - eps_corr;
    let s = (1.0 - c * c).max(0.0).sqrt();
    let total = n + (n / 5).max(1);
    let rows: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            let u: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            vec![1.0 + u, 0.8 + c * u + s * v]
        })
        .collect();
    Dataset { kind: DatasetKind::ToyGaussian, rows, train: (0..n).collect(), test: (n..total).collect() }
}

/// Ten 8×8 prototypes made of horizontal and vertical bars.
fn prototypes() -> Vec<[u8; 64]> {
    (0..10)
        .map(|k| {
            let mut img = [0u8; 64];
            let row_a = k % 8;
            let col_a = (3 * k + 1) % 8;
            let row_b = (k + 4) % 8;
            for j in 0..8 {
                img[row_a * 8 + j] = 1;
                img[j * 8 + col_a] = 1;
                if k >= 5 {
                    img[row_b * 8 + j] = 1;
                }
            }
            img
        })
        .collect()
}

/// Binarized 8×8 images: a random prototype with each pixel flipped with probability 0.05.
pub fn gen_images(n_train: usize, n_test: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes();
    let rows = (0..n_train + n_test)
        .map(|_| {
            let p = &protos[rng.random_range(0..protos.len())];
            p.iter().map(|&v| f64::from(if rng.random::<f64>() < 0.05 { 1 - v } else { v })).collect()
        })
        .collect();
    Dataset { kind: DatasetKind::Images, rows, train: (0..n_train).collect(), test: (n_train..n_train + n_test).collect() }
}

/// Counts from softplus(βᵤᵀθᵢ) with rank-3 Gaussian factors, clipped to 9; 90/10 user split.
pub fn gen_ratings(users: usize, movies: usize, seed: u64) -> Dataset {
    const RANK: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let beta: Vec<Vec<f64>> = (0..users).map(|_| draw(RANK)).collect();
    let theta: Vec<Vec<f64>> = (0..movies).map(|_| draw(RANK)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let rows = beta
        .iter()
        .map(|b| {
            theta
                .iter()
                .map(|t| {
                    let s: f64 = b.iter().zip(t).map(|(x, y)| x * y).sum();
                    let rate = vpng_core::models::softplus(s);
                    let c: f64 = Poisson::new(rate).map(|d| d.sample(&mut rng)).unwrap_or(0.0);
                    c.min(9.0)
                })
                .collect()
        })
        .collect();
    Dataset::split(DatasetKind::Ratings, rows, 0.9, seed)
}

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<u8>>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::TruncatedFile { expected: at + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() < expected {
        return Err(DataError::TruncatedFile { expected, found: bytes.len() });
    }
    let pixels = (0..count).map(|i| bytes[16 + i * size..16 + (i + 1) * size].to_vec()).collect();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len() * images.rows * images.cols);
    for v in [IDX_IMAGES_MAGIC, images.pixels.len() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for p in &images.pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + count {
        return Err(DataError::TruncatedFile { expected: 8 + count, found: bytes.len() });
    }
    Ok(bytes[8..8 + count].to_vec())
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// byte ≥ 128 → 1
pub fn binarize(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&p| if p >= 128 { 1.0 } else { 0.0 }).collect()
}

/// Average-pools a rows×cols byte image onto an 8×8 grid and thresholds the
/// pooled intensity at 0.5 (of 255).
pub fn downscale_to_8x8(pixels: &[u8], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(64);
    for br in 0..8 {
        let (r0, r1) = (br * rows / 8, ((br + 1) * rows / 8).max(br * rows / 8 + 1).min(rows));
        for bc in 0..8 {
            let (c0, c1) = (bc * cols / 8, ((bc + 1) * cols / 8).max(bc * cols / 8 + 1).min(cols));
            let mut sum = 0.0;
            let mut count = 0usize;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += f64::from(pixels[r * cols + c]);
                    count += 1;
                }
            }
            let mean = if count > 0 { sum / count as f64 / 255.0 } else { 0.0 };
            out.push(if mean >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageOptions {
    pub downscale: bool,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ImageOptions {
    fn default() -> Self {
        Self { downscale: true, train_fraction: 6.0 / 7.0, seed: 0 }
    }
}

pub fn load_idx_images(path: &Path, options: ImageOptions) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(path)?)?;
    let rows = images
        .pixels
        .iter()
        .map(|p| if options.downscale { downscale_to_8x8(p, images.rows, images.cols) } else { binarize(p) })
        .collect();
    Ok(Dataset::split(DatasetKind::Images, rows, options.train_fraction, options.seed))
}

/// round(2·raw) − 1 for raw ∈ {0.5, 1.0, ..., 5.0}.
pub fn rating_to_count(raw: f64, line: usize) -> Result<u32> {
    let twice = 2.0 * raw;
    if !(1.0..=10.0).contains(&twice) || (twice - twice.round()).abs() > 1e-9 {
        return Err(DataError::BadRating { line, value: raw });
    }
    Ok(twice.round() as u32 - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingOptions {
    /// Movies with fewer observed ratings are dropped.
    pub min_ratings: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for RatingOptions {
    fn default() -> Self {
        Self { min_ratings: 5000, train_fraction: 0.9, seed: 0 }
    }
}

/// Reads `user,movie,rating[,...]` rows (a non-numeric first line is taken as
/// a header) into a users × kept-movies count matrix with zeros for unobserved cells.
pub fn load_ratings(path: &Path, options: RatingOptions) -> Result<Dataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut cells: Vec<(String, String, u32)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if line.trim().is_empty() {
            continue;
        }
        if fields.len() < 3 {
            return Err(DataError::Parse { line: line_no, message: "expected user,movie,rating".into() });
        }
        let raw = match fields[2].parse::<f64>() {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(DataError::Parse { line: line_no, message: e.to_string() }),
        };
        cells.push((fields[0].to_string(), fields[1].to_string(), rating_to_count(raw, line_no)?));
    }
    let mut per_movie: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, m, _) in &cells {
        *per_movie.entry(m.as_str()).or_default() += 1;
    }
    let movies: HashMap<&str, usize> = per_movie
        .iter()
        .filter(|(_, &c)| c >= options.min_ratings)
        .enumerate()
        .map(|(j, (m, _))| (*m, j))
        .collect();
    if movies.is_empty() {
        return Err(DataError::Invalid(format!("no movie has at least {} ratings", options.min_ratings)));
    }
    let mut users: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (u, m, r) in &cells {
        let row = users.entry(u.as_str()).or_insert_with(|| vec![0.0; movies.len()]);
        if let Some(&j) = movies.get(m.as_str()) {
            row[j] = f64::from(*r);
        }
    }
    let rows = users.into_values().collect();
    Ok(Dataset::split(DatasetKind::Ratings, rows, options.train_fraction, options.seed))
}
