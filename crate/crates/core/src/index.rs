//! Bit-packed binary codes and exact Hamming top-K search.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CODES_MAGIC: &[u8; 4] = b"HSH1";

pub fn words_per_code(code_length: usize) -> usize {
    code_length.div_ceil(64)
}

/// Packs ±1 rows into `⌈L/64⌉` words each. Bit `b` of a code lives in word
/// `b / 64` at position `b % 64`.
pub fn pack_rows(codes: &Matrix) -> Result<Vec<u64>> {
    let l = codes.cols();
    let wpc = words_per_code(l);
    let mut out = vec![0u64; codes.rows() * wpc];
    for (r, row) in codes.iter_rows().enumerate() {
        let words = &mut out[r * wpc..(r + 1) * wpc];
        for (b, &v) in row.iter().enumerate() {
            if v == 1.0 {
                words[b / 64] |= 1u64 << (b % 64);
            } else if v != -1.0 {
                return Err(Error::NonBinaryCode(v));
            }
        }
    }
    Ok(out)
}

/// Hamming distance between two packed codes of equal length.
#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[inline(always)]
fn distances_generic(rows: &[u64], query: &[u64], out: &mut Vec<u32>) {
    if query.len() == 1 {
        let q = query[0];
        out.extend(rows.iter().map(|w| (w ^ q).count_ones()));
    } else {
        out.extend(rows.chunks_exact(query.len()).map(|c| hamming(c, query)));
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn distances_popcnt(rows: &[u64], query: &[u64], out: &mut Vec<u32>) {
    distances_generic(rows, query, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Row position in the index.
    pub index: usize,
    /// External payload id of that row.
    pub id: u64,
    pub distance: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchResult {
    pub neighbors: Vec<Vec<Neighbor>>,
    /// Set when the requested K exceeded the index size and was clamped.
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryCodeIndex {
    code_length: usize,
    words_per_code: usize,
    packed: Vec<u64>,
    ids: Vec<u64>,
}

impl BinaryCodeIndex {
    /// Packs `codes` with payload ids `0..n`.
    pub fn pack(codes: &Matrix) -> Result<Self> {
        if codes.cols() == 0 {
            return Err(Error::InvalidArgument("code length must be positive".into()));
        }
        Ok(Self {
            code_length: codes.cols(),
            words_per_code: words_per_code(codes.cols()),
            packed: pack_rows(codes)?,
            ids: (0..codes.rows() as u64).collect(),
        })
    }

    pub fn from_packed(code_length: usize, packed: Vec<u64>, ids: Vec<u64>) -> Result<Self> {
        if code_length == 0 {
            return Err(Error::InvalidArgument("code length must be positive".into()));
        }
        let wpc = words_per_code(code_length);
        if packed.len() != ids.len() * wpc {
            return Err(Error::Shape(format!(
                "{} words for {} ids at {} words per code",
                packed.len(),
                ids.len(),
                wpc
            )));
        }
        let tail = code_length % 64;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            if packed.chunks(wpc).any(|c| c[wpc - 1] & mask != 0) {
                return Err(Error::Shape("padding bits beyond code length are set".into()));
            }
        }
        Ok(Self {
            code_length,
            words_per_code: wpc,
            packed,
            ids,
        })
    }

    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.ids.len() {
            return Err(Error::Shape(format!("{} ids for {} codes", ids.len(), self.ids.len())));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn packed(&self) -> &[u64] {
        &self.packed
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.packed[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn unpack(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.code_length);
        for i in 0..self.len() {
            let words = self.row(i);
            for (b, v) in m.row_mut(i).iter_mut().enumerate() {
                *v = if words[b / 64] >> (b % 64) & 1 == 1 { 1.0 } else { -1.0 };
            }
        }
        m
    }

    fn check_query(&self, query: &[u64]) -> Result<()> {
        if query.len() != self.words_per_code {
            return Err(Error::Dimension {
                expected: self.words_per_code,
                got: query.len(),
            });
        }
        Ok(())
    }

    fn distances_into(&self, query: &[u64], lo: usize, hi: usize, out: &mut Vec<u32>) {
        out.clear();
        let rows = &self.packed[lo * self.words_per_code..hi * self.words_per_code];
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("popcnt") {
                // SAFETY: the popcnt feature was detected at runtime
                unsafe { distances_popcnt(rows, query, out) };
                return;
            }
        }
        distances_generic(rows, query, out);
    }

    /// Exact top-K over rows `lo..hi` by counting select on integer distances.
    fn top_k_range(&self, query: &[u64], k: usize, lo: usize, hi: usize, scratch: &mut Vec<u32>) -> Vec<Neighbor> {
        let k = k.min(hi - lo);
        if k == 0 {
            return Vec::new();
        }
        self.distances_into(query, lo, hi, scratch);
        let mut hist = vec![0usize; self.code_length + 2];
        for &d in scratch.iter() {
            hist[d as usize] += 1;
        }
        // smallest radius whose ball holds at least k rows
        let mut cum = 0;
        let mut radius = 0;
        for (d, &c) in hist.iter().enumerate() {
            cum += c;
            if cum >= k {
                radius = d;
                break;
            }
        }
        // bucket offsets for a stable counting sort of the selected rows
        let mut start = vec![0usize; radius + 1];
        let mut acc = 0;
        for d in 0..=radius {
            start[d] = acc;
            acc += if d < radius { hist[d] } else { k - acc };
        }
        let mut fill = start.clone();
        let mut out = vec![
            Neighbor {
                index: 0,
                id: 0,
                distance: 0
            };
            k
        ];
        let mut at_radius = k - start[radius];
        for (off, &d) in scratch.iter().enumerate() {
            let d = d as usize;
            if d > radius {
                continue;
            }
            if d == radius {
                if at_radius == 0 {
                    continue;
                }
                at_radius -= 1;
            }
            let i = lo + off;
            out[fill[d]] = Neighbor {
                index: i,
                id: self.ids[i],
                distance: d as u32,
            };
            fill[d] += 1;
        }
        out
    }

    /// Top-K for one packed query, ascending by (distance, row index).
    pub fn search_packed(&self, query: &[u64], k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(query)?;
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let mut scratch = Vec::with_capacity(self.len());
        Ok(self.top_k_range(query, k, 0, self.len(), &mut scratch))
    }

    /// Single-threaded exact search for every row of `queries`.
    pub fn search(&self, queries: &Matrix, k: usize) -> Result<SearchResult> {
        self.validate_queries(queries, k)?;
        let packed = pack_rows(queries)?;
        let mut scratch = Vec::with_capacity(self.len());
        let neighbors = packed
            .chunks(self.words_per_code)
            .map(|q| self.top_k_range(q, k, 0, self.len(), &mut scratch))
            .collect();
        Ok(SearchResult {
            neighbors,
            clamped: k > self.len(),
        })
    }

    fn validate_queries(&self, queries: &Matrix, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if queries.cols() != self.code_length {
            return Err(Error::Dimension {
                expected: self.code_length,
                got: queries.cols(),
            });
        }
        Ok(())
    }

    /// Top-K for one packed query computed per shard and merged. Returns
    /// the same list as [`search_packed`](Self::search_packed).
    pub fn search_packed_sharded(&self, query: &[u64], k: usize, shards: usize) -> Result<Vec<Neighbor>> {
        self.check_query(query)?;
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let n = self.len();
        let shards = shards.clamp(1, n.max(1));
        let bounds: Vec<(usize, usize)> = (0..shards).map(|s| (s * n / shards, (s + 1) * n / shards)).collect();
        let run = |&(lo, hi): &(usize, usize)| {
            let mut scratch = Vec::with_capacity(hi - lo);
            self.top_k_range(query, k, lo, hi, &mut scratch)
        };
        #[cfg(feature = "parallel")]
        let parts: Vec<Vec<Neighbor>> = {
            use rayon::prelude::*;
            bounds.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<Vec<Neighbor>> = bounds.iter().map(run).collect();
        let mut merged: Vec<Neighbor> = parts.into_iter().flatten().collect();
        merged.sort_by_key(|nb| (nb.distance, nb.index));
        merged.truncate(k.min(n));
        Ok(merged)
    }

    /// Searches all queries, parallel across queries when the `parallel`
    /// feature is on. Identical output to [`search`](Self::search).
    pub fn search_parallel(&self, queries: &Matrix, k: usize) -> Result<SearchResult> {
        self.validate_queries(queries, k)?;
        let packed = pack_rows(queries)?;
        let run = |q: &[u64]| {
            let mut scratch = Vec::with_capacity(self.len());
            self.top_k_range(q, k, 0, self.len(), &mut scratch)
        };
        #[cfg(feature = "parallel")]
        let neighbors = {
            use rayon::prelude::*;
            packed.par_chunks(self.words_per_code).map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let neighbors = packed.chunks(self.words_per_code).map(run).collect();
        Ok(SearchResult {
            neighbors,
            clamped: k > self.len(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.packed.len() * 8);
        out.extend_from_slice(CODES_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.code_length as u32).to_le_bytes());
        for w in &self.packed {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Parses the codes file layout. Payload ids default to `0..n`.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CODES_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "HSH1",
            });
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let l = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        let expected = n * words_per_code(l) * 8;
        if body.len() != expected {
            return Err(Error::Shape(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                expected,
                body.len()
            )));
        }
        let packed = body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_packed(l, packed, (0..n as u64).collect())
    }

    /// Writes the codes file and, when given, the parallel ids file.
    pub fn save(&self, codes_path: &Path, ids_path: Option<&Path>) -> Result<()> {
        fs::write(codes_path, self.to_bytes()).map_err(|e| Error::io(codes_path, e))?;
        if let Some(p) = ids_path {
            write_ids(p, &self.ids)?;
        }
        Ok(())
    }

    pub fn load(codes_path: &Path, ids_path: Option<&Path>) -> Result<Self> {
        let bytes = fs::read(codes_path).map_err(|e| Error::io(codes_path, e))?;
        let index = Self::from_bytes(&bytes, codes_path)?;
        match ids_path {
            Some(p) => index.with_ids(read_ids(p)?),
            None => Ok(index),
        }
    }
}

pub fn write_ids(path: &Path, ids: &[u64]) -> Result<()> {
    let bytes: Vec<u8> = ids.iter().flat_map(|i| i.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ids(path: &Path) -> Result<Vec<u64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Shape(format!("{}: length {} is not a multiple of 8", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Row-major float32 vectors scanned exhaustively by inner product.
#[derive(Clone, Debug)]
pub struct DenseIndex {
    dim: usize,
    data: Vec<f32>,
}

impl DenseIndex {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values at dimension {}", data.len(), dim)));
        }
        Ok(Self { dim, data })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::new(m.cols(), m.as_slice().iter().map(|&v| v as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    // eight independent accumulators so the loop vectorises
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Top-K rows of `index` by inner product with `query`, descending, ties to
/// the lower row.
pub fn dense_scan_baseline(index: &DenseIndex, query: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    if query.len() != index.dim {
        return Err(Error::Dimension {
            expected: index.dim,
            got: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let mut scored: Vec<(usize, f32)> = index
        .data
        .chunks_exact(index.dim)
        .enumerate()
        .map(|(i, row)| (i, dot_f32(row, query)))
        .collect();
    let k = k.min(scored.len());
    let order = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub database_size: usize,
    pub code_length: usize,
    pub k: usize,
    pub repetitions: usize,
    pub hash_mean_ms: f64,
    pub dense_mean_ms: f64,
    pub speedup: f64,
}

/// Times a single-threaded packed Hamming scan against a float32 inner
/// product scan over the same database size and dimension. Each path runs
/// `repetitions` queries and reports the mean per query.
pub fn speed_test(n: usize, code_length: usize, k: usize, repetitions: usize, seed: u64) -> Result<SpeedReport> {
    if n == 0 || repetitions == 0 {
        return Err(Error::InvalidArgument("database size and repetitions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wpc = words_per_code(code_length);
    let tail_mask = if code_length % 64 == 0 {
        u64::MAX
    } else {
        (1u64 << (code_length % 64)) - 1
    };
    let random_code = |rng: &mut ChaCha8Rng| -> Vec<u64> {
        let mut w: Vec<u64> = (0..wpc).map(|_| rng.random()).collect();
        w[wpc - 1] &= tail_mask;
        w
    };
    let packed: Vec<u64> = (0..n).flat_map(|_| random_code(&mut rng)).collect();
    let hash_index = BinaryCodeIndex::from_packed(code_length, packed, (0..n as u64).collect())?;
    let queries: Vec<Vec<u64>> = (0..repetitions).map(|_| random_code(&mut rng)).collect();

    let dense_data: Vec<f32> = (0..n * code_length).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let dense = DenseIndex::new(code_length, dense_data)?;
    let dense_queries: Vec<Vec<f32>> = (0..repetitions)
        .map(|_| (0..code_length).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();

    let mut sink = 0usize;
    let mut scratch = Vec::with_capacity(n);
    let t = Instant::now();
    for q in &queries {
        let r = hash_index.top_k_range(q, k, 0, n, &mut scratch);
        sink = sink.wrapping_add(r[0].index);
    }
    let hash_ms = t.elapsed().as_secs_f64() * 1e3 / repetitions as f64;

    let t = Instant::now();
    for q in &dense_queries {
        let r = dense_scan_baseline(&dense, q, k)?;
        sink = sink.wrapping_add(r[0].0);
    }
    let dense_ms = t.elapsed().as_secs_f64() * 1e3 / repetitions as f64;
    std::hint::black_box(sink);

    Ok(SpeedReport {
        database_size: n,
        code_length,
        k,
        repetitions,
        hash_mean_ms: hash_ms,
        dense_mean_ms: dense_ms,
        speedup: dense_ms / hash_ms,
    })
}
