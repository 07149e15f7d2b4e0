//! Median rank and recall@K under repeated subset sampling, plus the
//! embedding file formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{embed_dataset, DatasetEmbeddings, Mcen, Modality};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Row-normalized `queries · candidatesᵀ`.
pub fn cosine_matrix<T: Scalar>(
    queries: ArrayView2<T>,
    candidates: ArrayView2<T>,
) -> Result<Array2<T>> {
    if queries.ncols() != candidates.ncols() {
        return Err(Error::shape(
            "embedding width",
            queries.ncols(),
            candidates.ncols(),
        ));
    }
    let unit = |m: ArrayView2<T>| -> Result<Array2<T>> {
        let mut out = m.to_owned();
        for mut row in out.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n == T::zero() {
                return Err(Error::ZeroNorm);
            }
            row.mapv_inplace(|v| v / n);
        }
        Ok(out)
    };
    Ok(unit(queries)?.dot(&unit(candidates)?.t()))
}

/// 1-based rank of candidate `i` for query `i`, by descending cosine
/// similarity; ties go to the lower candidate index.
pub fn rank_all<T: Scalar>(
    queries: ArrayView2<T>,
    candidates: ArrayView2<T>,
) -> Result<Vec<usize>> {
    if queries.nrows() != candidates.nrows() {
        return Err(Error::shape(
            "paired rows",
            queries.nrows(),
            candidates.nrows(),
        ));
    }
    let sims = cosine_matrix(queries, candidates)?;
    Ok(sims
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|(j, s)| **s > own || (**s == own && *j < i))
                .count()
        })
        .collect())
}

/// Median; even lengths average the two central values.
pub fn med_rank(ranks: &[usize]) -> f64 {
    assert!(!ranks.is_empty(), "median of no ranks");
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    }
}

/// Percentage of ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub medr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let [r1, r5, r10] = RECALL_KS.map(|k| recall_at_k(ranks, k));
        Metrics {
            medr: med_rank(ranks),
            r1,
            r5,
            r10,
        }
    }

    fn values(&self) -> [f64; 4] {
        [self.medr, self.r1, self.r5, self.r10]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Metrics {
            medr: v[0],
            r1: v[1],
            r5: v[2],
            r10: v[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Im2recipe,
    Recipe2im,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub task: Task,
    pub per_repeat: Vec<Metrics>,
    pub mean: Metrics,
    /// Population standard deviation over repeats.
    pub std: Metrics,
}

impl DirectionReport {
    fn new(task: Task, per_repeat: Vec<Metrics>) -> Self {
        let n = per_repeat.len() as f64;
        let mut mean = [0.0; 4];
        for m in &per_repeat {
            for (a, v) in mean.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let mean = mean.map(|s| s / n);
        let mut var = [0.0; 4];
        for m in &per_repeat {
            for ((a, v), mu) in var.iter_mut().zip(m.values()).zip(mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        let var = var.map(|s| s / n);
        DirectionReport {
            task,
            per_repeat,
            mean: Metrics::from_values(mean),
            std: Metrics::from_values(var.map(f64::sqrt)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub size: usize,
    pub repeats: usize,
    pub seed: u64,
    pub im2recipe: DirectionReport,
    pub recipe2im: DirectionReport,
}

impl RetrievalReport {
    /// Mean R@1 of the two directions.
    pub fn mean_r1(&self) -> f64 {
        (self.im2recipe.mean.r1 + self.recipe2im.mean.r1) / 2.0
    }
}

/// Repeated evaluation on `size` pairs drawn without replacement (fresh draw
/// per repeat, one image per pair). Sampled pairs are kept in corpus order.
pub fn subset_protocol<T: Scalar>(
    emb: &DatasetEmbeddings<T>,
    size: usize,
    repeats: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let n = emb.recipes.nrows();
    if emb.images.len() != n {
        return Err(Error::shape("image groups", n, emb.images.len()));
    }
    if size > n {
        return Err(Error::InvalidArgument(format!(
            "subset size {size} exceeds {n} pairs"
        )));
    }
    if size < 1 || repeats < 1 {
        return Err(Error::InvalidArgument(
            "subset size and repeats must be positive".into(),
        ));
    }
    let d = emb.recipes.ncols();
    let mut i2r = Vec::with_capacity(repeats);
    let mut r2i = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64);
        let mut idx = sample(&mut rng, n, size).into_vec();
        idx.sort_unstable();
        let mut img = Array2::zeros((size, d));
        for (row, &i) in idx.iter().enumerate() {
            let group = &emb.images[i];
            if group.nrows() == 0 {
                return Err(Error::InvalidArgument(format!("pair {i} has no image")));
            }
            let k = if group.nrows() == 1 {
                0
            } else {
                rng.gen_range(0..group.nrows())
            };
            img.row_mut(row).assign(&group.row(k));
        }
        let rec = emb.recipes.select(Axis(0), &idx);
        i2r.push(Metrics::from_ranks(&rank_all(img.view(), rec.view())?));
        r2i.push(Metrics::from_ranks(&rank_all(rec.view(), img.view())?));
    }
    Ok(RetrievalReport {
        size,
        repeats,
        seed,
        im2recipe: DirectionReport::new(Task::Im2recipe, i2r),
        recipe2im: DirectionReport::new(Task::Recipe2im, r2i),
    })
}

/// Embed `data` and run [`subset_protocol`] with `min(size, n)` pairs.
pub fn evaluate_model<T: Scalar>(
    model: &Mcen,
    store: &ParamStore<T>,
    data: &Dataset,
    size: usize,
    repeats: usize,
    seed: u64,
    batch_size: usize,
) -> Result<RetrievalReport> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let emb = embed_dataset(model, store, data, batch_size)?;
    let size = size.min(data.len());
    let repeats = if size == data.len() { 1 } else { repeats };
    subset_protocol(&emb, size, repeats, seed)
}

// ---- embedding files ----

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MCEN";
pub const EMBEDDING_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    Binary,
    Jsonl,
}

impl std::str::FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(EmbeddingFormat::Binary),
            "jsonl" => Ok(EmbeddingFormat::Jsonl),
            other => Err(Error::Config(format!("unknown embedding format {other:?}"))),
        }
    }
}

fn check_records(records: &[EmbeddingRecord]) -> Result<usize> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::shape(
                format!("embedding {}", r.id),
                dim,
                r.vector.len(),
            ));
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                dump: format!("embedding {}", r.id),
            });
        }
        if r.id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "id longer than {} bytes",
                u16::MAX
            )));
        }
    }
    Ok(dim)
}

pub fn write_embeddings(
    path: &Path,
    records: &[EmbeddingRecord],
    format: EmbeddingFormat,
) -> Result<()> {
    let dim = check_records(records)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match format {
        EmbeddingFormat::Binary => {
            out.write_all(EMBEDDING_MAGIC).map_err(io)?;
            out.write_u16::<LittleEndian>(EMBEDDING_VERSION)
                .map_err(io)?;
            out.write_u32::<LittleEndian>(dim as u32).map_err(io)?;
            out.write_u64::<LittleEndian>(records.len() as u64)
                .map_err(io)?;
            for r in records {
                out.write_u16::<LittleEndian>(r.id.len() as u16)
                    .map_err(io)?;
                out.write_all(r.id.as_bytes()).map_err(io)?;
                for v in &r.vector {
                    out.write_f32::<LittleEndian>(*v).map_err(io)?;
                }
            }
        }
        EmbeddingFormat::Jsonl => {
            for r in records {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n").map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

/// Read a binary embedding file; the format carries no modality, so the
/// caller supplies it.
pub fn read_embeddings_binary(path: &Path, modality: Modality) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::MalformedLine {
        line: 0,
        message: format!("{}: {m}", path.display()),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r
        .read_u16::<LittleEndian>()
        .map_err(|_| bad("truncated header"))?;
    if version != EMBEDDING_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))? as usize;
    let count = r
        .read_u64::<LittleEndian>()
        .map_err(|_| bad("truncated header"))?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r
            .read_u16::<LittleEndian>()
            .map_err(|_| bad("truncated record"))? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(|_| bad("truncated record"))?;
        let mut vector = vec![0f32; dim];
        r.read_f32_into::<LittleEndian>(&mut vector)
            .map_err(|_| bad("truncated record"))?;
        out.push(EmbeddingRecord {
            id: String::from_utf8(id).map_err(|_| bad("id is not utf-8"))?,
            vector,
            modality,
        });
    }
    if r.fill_buf().map_err(|e| Error::io(path, e))?.is_empty() {
        Ok(out)
    } else {
        Err(bad("trailing bytes"))
    }
}

pub fn read_embeddings_jsonl(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    check_records(&out)?;
    Ok(out)
}
