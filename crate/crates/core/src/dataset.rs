//! Embedding datasets: file formats, normalization, synthetic domain-shift
//! generators and mini-batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

pub const FEATURE_MAGIC: &[u8; 4] = b"EMB1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";

/// Default mini-batch size.
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub name: String,
    pub domain: Domain,
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl EmbeddingDataset {
    pub fn new(
        name: impl Into<String>,
        domain: Domain,
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} feature rows",
                    labels.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    num_classes,
                });
            }
        }
        Ok(Self {
            name: name.into(),
            domain,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }
}

/// Scales every nonzero row to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize(ds: &EmbeddingDataset) -> EmbeddingDataset {
    let mut out = ds.clone();
    normalize_rows(&mut out.features);
    out
}

pub fn normalize_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    #[default]
    Emb,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub domain: Domain,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "is_default")]
    pub format: FeatureFormat,
    /// CSV only: the last column holds an integer class id.
    #[serde(default, skip_serializing_if = "is_default")]
    pub csv_label_column: bool,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a dataset described by a JSON manifest. Relative paths inside the
/// manifest are resolved against the manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let feature_path = resolve(base, &manifest.features);

    let (features, mut labels) = match manifest.format {
        FeatureFormat::Emb => (read_features(&feature_path)?, None),
        FeatureFormat::Csv => read_csv(&feature_path, manifest.csv_label_column)?,
    };
    if let Some(lp) = &manifest.labels {
        let l = read_labels(&resolve(base, lp))?;
        if l.len() != features.rows() {
            return Err(Error::Shape(format!(
                "labels file has {} entries, features have {} rows",
                l.len(),
                features.rows()
            )));
        }
        labels = Some(l);
    }
    EmbeddingDataset::new(
        manifest.name,
        manifest.domain,
        features,
        labels,
        manifest.num_classes,
    )
}

/// Writes `<dir>/<stem>.emb`, `<dir>/<stem>.lbl` (when labelled) and
/// `<dir>/<stem>.json`, returning the manifest path.
pub fn save_dataset(ds: &EmbeddingDataset, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let feat_name = format!("{stem}.emb");
    write_features(dir.join(&feat_name), &ds.features)?;
    let labels = match &ds.labels {
        Some(l) => {
            let name = format!("{stem}.lbl");
            write_labels(dir.join(&name), l)?;
            Some(PathBuf::from(name))
        }
        None => None,
    };
    let manifest = Manifest {
        name: ds.name.clone(),
        domain: ds.domain,
        features: PathBuf::from(feat_name),
        labels,
        num_classes: ds.num_classes,
        format: FeatureFormat::Emb,
        csv_label_column: false,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_header(path: &Path, bytes: &[u8], magic: &'static [u8; 4]) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: std::str::from_utf8(magic).unwrap_or("?"),
        });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Shape("truncated header".into()))
}

/// Reads an `EMB1` feature file: magic, u32 n, u32 d, then n*d little-endian f32.
pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_header(path, &bytes, FEATURE_MAGIC)?;
    let n = u32_at(&bytes, 4)? as usize;
    let d = u32_at(&bytes, 8)? as usize;
    let payload = &bytes[12..];
    let expected = n * d * 4;
    if payload.len() != expected {
        return Err(Error::Shape(format!(
            "{}: header declares {n}x{d} ({expected} bytes) but payload has {} bytes",
            path.display(),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Matrix::from_vec(n, d, data))
}

pub fn write_features(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(12 + m.as_slice().len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an `LBL1` label file: magic, u32 n, then n u32 class ids.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_header(path, &bytes, LABEL_MAGIC)?;
    let n = u32_at(&bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n * 4 {
        return Err(Error::Shape(format!(
            "{}: header declares {n} labels but payload has {} bytes",
            path.display(),
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + labels.len() * 4);
    bytes.extend_from_slice(LABEL_MAGIC);
    bytes.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        let l = u32::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds u32")))?;
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_csv(path: &Path, label_column: bool) -> Result<(Matrix, Option<Vec<usize>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if label_column {
            let last = fields.pop().unwrap_or_default();
            let l: usize = last.parse().map_err(|_| {
                Error::Shape(format!("{}:{}: bad label {last:?}", path.display(), lineno + 1))
            })?;
            labels.push(l);
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::Shape(format!("{}:{}: bad value {f:?}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Shape(format!(
                    "{}:{}: expected {} columns, found {}",
                    path.display(),
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    Ok((Matrix::from_rows(&rows), label_column.then_some(labels)))
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Source/target pair with the target's labels held back for evaluation.
#[derive(Clone, Debug)]
pub struct ShiftedPair {
    pub source: EmbeddingDataset,
    pub target: EmbeddingDataset,
    pub hidden_target_labels: Vec<usize>,
}

pub const DEFAULT_CLUSTER_STD: f64 = 0.7;
pub const DEFAULT_SHIFT: f64 = 3.0;
pub const DEFAULT_NOISY_STD_FACTOR: f64 = 2.0;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Parameters of the Gaussian-cluster shift benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub seed: u64,
    pub num_classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub dim: usize,
    pub shift: f64,
    pub noise_frac: f64,
    /// Per-coordinate standard deviation around each center.
    pub cluster_std: f64,
    /// Spread multiplier for the noisy target points.
    pub noisy_std_factor: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 5,
            n_source: 500,
            n_target: 500,
            dim: 16,
            shift: DEFAULT_SHIFT,
            noise_frac: 0.3,
            cluster_std: DEFAULT_CLUSTER_STD,
            noisy_std_factor: DEFAULT_NOISY_STD_FACTOR,
        }
    }
}

/// Gaussian-cluster benchmark with a translated target domain.
///
/// Source points are drawn around `num_classes` random centers. Target points
/// use the same centers translated by `shift` along a random unit direction;
/// a `noise_frac` share of them is instead drawn, with a wider spread, around
/// the translated center of a different class while keeping its own label.
pub fn make_synthetic_shift(
    seed: u64,
    num_classes: usize,
    n_source: usize,
    n_target: usize,
    dim: usize,
    shift: f64,
    noise_frac: f64,
) -> Result<ShiftedPair> {
    make_synthetic(&SyntheticParams {
        seed,
        num_classes,
        n_source,
        n_target,
        dim,
        shift,
        noise_frac,
        ..SyntheticParams::default()
    })
}

pub fn make_synthetic(params: &SyntheticParams) -> Result<ShiftedPair> {
    let SyntheticParams {
        seed,
        num_classes,
        n_source,
        n_target,
        dim,
        shift,
        noise_frac,
        cluster_std,
        noisy_std_factor,
    } = *params;
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if !(shift >= 0.0) || !(0.0..=1.0).contains(&noise_frac) || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "shift={shift}, noise_frac={noise_frac}, dim={dim}"
        )));
    }
    if !(cluster_std >= 0.0) || !(noisy_std_factor >= 0.0) {
        return Err(Error::InvalidArgument("spreads must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Matrix::zeros(num_classes, dim);
    for v in centers.as_mut_slice() {
        *v = gaussian(&mut rng);
    }
    let mut direction: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
    let dn = norm(&direction);
    direction.iter_mut().for_each(|v| *v /= dn);

    let mut source = Matrix::zeros(n_source, dim);
    let source_labels: Vec<usize> = (0..n_source).map(|i| i % num_classes).collect();
    for (i, &y) in source_labels.iter().enumerate() {
        for (j, v) in source.row_mut(i).iter_mut().enumerate() {
            *v = centers.get(y, j) + cluster_std * gaussian(&mut rng);
        }
    }

    let target_labels: Vec<usize> = (0..n_target).map(|i| i % num_classes).collect();
    let n_noisy = (noise_frac * n_target as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_target).collect();
    order.shuffle(&mut rng);
    let mut noisy = vec![false; n_target];
    for &i in &order[..n_noisy] {
        noisy[i] = true;
    }
    let mut target = Matrix::zeros(n_target, dim);
    for (i, &y) in target_labels.iter().enumerate() {
        let (center, std) = if noisy[i] {
            let offset = rng.random_range(1..num_classes);
            ((y + offset) % num_classes, cluster_std * noisy_std_factor)
        } else {
            (y, cluster_std)
        };
        for (j, v) in target.row_mut(i).iter_mut().enumerate() {
            *v = centers.get(center, j) + shift * direction[j] + std * gaussian(&mut rng);
        }
    }

    Ok(ShiftedPair {
        source: EmbeddingDataset::new(
            "synthetic-source",
            Domain::Source,
            source,
            Some(source_labels),
            num_classes,
        )?,
        target: EmbeddingDataset::new("synthetic-target", Domain::Target, target, None, num_classes)?,
        hidden_target_labels: target_labels,
    })
}

const DIGIT_GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", "..####..", "........",
    ],
    [
        "...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........",
    ],
    [
        "..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".######.", "........",
    ],
    [
        "..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".##..##.", "..####..", "........",
    ],
    [
        "....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "........",
    ],
    [
        ".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..", "........",
    ],
    [
        "..####..", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.", "..####..", "........",
    ],
    [
        ".######.", ".....##.", "....##..", "...##...", "...##...", "...##...", "...##...", "........",
    ],
    [
        "..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", "..####..", "........",
    ],
    [
        "..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", "....##..", "..###...", "........",
    ],
];

fn glyph_pixel(class: usize, row: isize, col: isize) -> f64 {
    if !(0..8).contains(&row) || !(0..8).contains(&col) {
        return 0.0;
    }
    if DIGIT_GLYPHS[class][row as usize].as_bytes()[col as usize] == b'#' {
        1.0
    } else {
        0.0
    }
}

/// 8x8 digit images (64 raw pixels) in two rendering styles.
///
/// Source digits are drawn with random one-pixel jitter and mild pixel noise.
/// Target digits are rendered with a horizontal shear, dimmer strokes and
/// stronger noise. Labels are balanced over the ten classes.
pub fn make_digit_shift(seed: u64, n_source: usize, n_target: usize) -> Result<ShiftedPair> {
    make_digits(&DigitParams {
        seed,
        n_source,
        n_target,
        ..DigitParams::default()
    })
}

/// Rendering parameters of the 8×8 digit transfer toy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DigitParams {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    /// Horizontal displacement in pixels between the top and bottom rows of
    /// target glyphs.
    pub shear: f64,
    /// Target stroke intensity.
    pub contrast: f64,
    /// Target background level.
    pub background: f64,
    pub source_noise: f64,
    pub target_noise: f64,
}

impl Default for DigitParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_source: 500,
            n_target: 500,
            shear: 1.0,
            contrast: 0.8,
            background: 0.0,
            source_noise: 0.1,
            target_noise: 0.2,
        }
    }
}

fn glyph_sample(class: usize, r: isize, c: f64) -> f64 {
    let c0 = c.floor();
    let t = c - c0;
    let c0 = c0 as isize;
    (1.0 - t) * glyph_pixel(class, r, c0) + t * glyph_pixel(class, r, c0 + 1)
}

pub fn make_digits(params: &DigitParams) -> Result<ShiftedPair> {
    const C: usize = 10;
    let p = params.clone();
    if !(p.shear.is_finite() && p.contrast.is_finite() && p.background.is_finite()) {
        return Err(Error::InvalidArgument("digit rendering parameters must be finite".into()));
    }
    if !(p.source_noise >= 0.0 && p.target_noise >= 0.0) {
        return Err(Error::InvalidArgument("noise levels must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let render = |target_style: bool, class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let dx = rng.random_range(-1i32..=1) as f64;
        let dy = rng.random_range(-1i32..=1) as isize;
        let mut px = Vec::with_capacity(64);
        for r in 0..8isize {
            for c in 0..8isize {
                let v = if target_style {
                    // lower rows displaced to the right
                    let offset = p.shear * (r as f64 - 3.5) / 7.0;
                    let g = glyph_sample(class, r - dy, c as f64 - dx - offset);
                    p.background + p.contrast * g + p.target_noise * gaussian(rng)
                } else {
                    glyph_sample(class, r - dy, c as f64 - dx) + p.source_noise * gaussian(rng)
                };
                px.push(v);
            }
        }
        px
    };
    let source_labels: Vec<usize> = (0..p.n_source).map(|i| i % C).collect();
    let rows: Vec<Vec<f64>> = source_labels.iter().map(|&y| render(false, y, &mut rng)).collect();
    let source = Matrix::from_rows(&rows);
    let target_labels: Vec<usize> = (0..p.n_target).map(|i| i % C).collect();
    let rows: Vec<Vec<f64>> = target_labels.iter().map(|&y| render(true, y, &mut rng)).collect();
    let target = Matrix::from_rows(&rows);
    Ok(ShiftedPair {
        source: EmbeddingDataset::new("digits-source", Domain::Source, source, Some(source_labels), C)?,
        target: EmbeddingDataset::new("digits-target", Domain::Target, target, None, C)?,
        hidden_target_labels: target_labels,
    })
}

// ---------------------------------------------------------------------------
// Batching

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatch {
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub rng_seed: u64,
}

/// One epoch of paired batches. Every index of `target_pool` appears exactly
/// once; source indices are drawn from a reshuffled stream of `source_pool`
/// and truncated to match the target count of each batch. The final short
/// batch is kept.
pub fn sample_batches(
    source_pool: &[usize],
    target_pool: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<MiniBatch>> {
    if source_pool.is_empty() {
        return Err(Error::Empty("source index pool"));
    }
    if target_pool.is_empty() {
        return Err(Error::Empty("target index pool"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = target_pool.to_vec();
    targets.shuffle(&mut rng);

    let mut source_stream: Vec<usize> = Vec::new();
    let mut next_source = move |rng: &mut ChaCha8Rng| -> usize {
        if source_stream.is_empty() {
            source_stream = source_pool.to_vec();
            source_stream.shuffle(rng);
            source_stream.reverse();
        }
        source_stream.pop().expect("non-empty pool")
    };

    let mut batches = Vec::with_capacity(targets.len().div_ceil(batch_size));
    for chunk in targets.chunks(batch_size) {
        let source_indices = (0..chunk.len()).map(|_| next_source(&mut rng)).collect();
        batches.push(MiniBatch {
            source_indices,
            target_indices: chunk.to_vec(),
            rng_seed: rng.random(),
        });
    }
    Ok(batches)
}
