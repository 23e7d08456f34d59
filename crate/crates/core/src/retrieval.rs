//! N-way top-1 retrieval between brain embeddings and image embeddings.
//!
//! Each query competes against its true counterpart plus `n_way − 1`
//! distractors drawn without replacement, ranked by cosine similarity. The
//! distractor RNG is derived from `(seed, trial, query id)` over a gallery
//! ordered by stable sample id, so results don't depend on row order or on
//! how many worker threads ran the trials.

use std::fs;
use std::io;
use std::ops::RangeInclusive;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::encoder::{self, EncoderConfig, EncoderError, EncoderParams};
use crate::rng;
use crate::synth::Dataset;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("retrieval config: {0}")]
    BadConfig(String),
    #[error("embedding set: {0}")]
    BadSet(String),
    #[error("truth id {0} is not in the gallery")]
    TruthMissing(u64),
    #[error("no test samples in session range {0}..={1}")]
    EmptyRange(u32, u32),
    #[error("report i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RetrievalConfig {
    /// Candidate-set size (truth + distractors).
    pub n_way: u32,
    /// Independent distractor samplings averaged per query.
    pub trials: u32,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            n_way: 200,
            trials: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    BrainToImage,
    ImageToBrain,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::BrainToImage => "brain_to_image",
            Direction::ImageToBrain => "image_to_brain",
        })
    }
}

/// Embedding rows tagged with stable ids (dataset sample indices).
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    ids: Vec<u64>,
    vecs: Tensor,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<u64>, vecs: Tensor) -> Result<Self, RetrievalError> {
        if vecs.shape().len() != 2 {
            return Err(RetrievalError::BadSet("vectors must be a 2-d matrix".into()));
        }
        if ids.len() != vecs.rows() {
            return Err(RetrievalError::BadSet(format!(
                "{} ids for {} rows",
                ids.len(),
                vecs.rows()
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(RetrievalError::BadSet("duplicate ids".into()));
        }
        Ok(EmbeddingSet { ids, vecs })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
}

/// Worker pool for trial evaluation, sized by `DEBIAS_CL_THREADS`
/// (unset or 0 = rayon's default).
fn eval_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("DEBIAS_CL_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("retrieval thread pool")
    })
}

/// Fraction of (query, trial) pairs whose true counterpart outranks all
/// sampled distractors. Ties lose to the lower id, deterministically.
pub fn nway_top1(
    queries: &EmbeddingSet,
    truth: &[u64],
    gallery: &EmbeddingSet,
    cfg: &RetrievalConfig,
) -> Result<f64, RetrievalError> {
    if queries.is_empty() {
        return Err(RetrievalError::BadSet("empty query set".into()));
    }
    if truth.len() != queries.len() {
        return Err(RetrievalError::BadSet(format!(
            "{} truth ids for {} queries",
            truth.len(),
            queries.len()
        )));
    }
    if cfg.trials == 0 {
        return Err(RetrievalError::BadConfig("trials must be ≥ 1".into()));
    }
    if cfg.n_way < 2 || cfg.n_way as usize > gallery.len() {
        return Err(RetrievalError::BadConfig(format!(
            "n_way {} must lie in [2, gallery size {}]",
            cfg.n_way,
            gallery.len()
        )));
    }
    if queries.vecs.cols() != gallery.vecs.cols() {
        return Err(RetrievalError::BadSet(format!(
            "query dim {} vs gallery dim {}",
            queries.vecs.cols(),
            gallery.vecs.cols()
        )));
    }

    let q_hat = queries.vecs.rowwise_l2_normalize()?;
    let g_hat = gallery.vecs.rowwise_l2_normalize()?;

    // canonical gallery order: ascending id, independent of row layout
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_unstable_by_key(|&i| gallery.ids[i]);
    let canon_ids: Vec<u64> = order.iter().map(|&i| gallery.ids[i]).collect();

    let truth_pos: Vec<usize> = truth
        .iter()
        .map(|id| {
            canon_ids
                .binary_search(id)
                .map_err(|_| RetrievalError::TruthMissing(*id))
        })
        .collect::<Result<_, _>>()?;

    let g = gallery.len();
    let k = cfg.n_way as usize - 1;
    let dim = q_hat.cols();

    let correct: u64 = eval_pool().install(|| {
        (0..queries.len())
            .into_par_iter()
            .map(|qi| {
                let qrow = q_hat.row(qi);
                let tpos = truth_pos[qi];
                let truth_id = truth[qi];
                let query_id = queries.ids[qi];
                let truth_sim = dot(qrow, g_hat.row(order[tpos]), dim);
                let mut scratch: Vec<usize> = Vec::with_capacity(g - 1);
                let mut hits = 0u64;
                for trial in 0..cfg.trials {
                    let mut r = rng::stream(cfg.seed, &[trial as u64, query_id]);
                    // canonical positions with the truth skipped
                    scratch.clear();
                    scratch.extend((0..g - 1).map(|p| if p < tpos { p } else { p + 1 }));
                    let mut best_sim = truth_sim;
                    let mut best_id = truth_id;
                    for j in 0..k {
                        let pick = j + r.gen_range(0..g - 1 - j);
                        scratch.swap(j, pick);
                        let pos = scratch[j];
                        let cand_id = canon_ids[pos];
                        let sim = dot(qrow, g_hat.row(order[pos]), dim);
                        if sim > best_sim || (sim == best_sim && cand_id < best_id) {
                            best_sim = sim;
                            best_id = cand_id;
                        }
                    }
                    if best_id == truth_id {
                        hits += 1;
                    }
                }
                hits
            })
            .sum()
    });

    Ok(correct as f64 / (queries.len() as u64 * cfg.trials as u64) as f64)
}

fn dot(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..dim {
        acc += a[i] * b[i];
    }
    acc
}

/// One emitted accuracy measurement.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RetrievalRow {
    pub step: u32,
    pub range_start: u32,
    pub range_end: u32,
    pub direction: Direction,
    pub top1: f64,
    pub n_queries: u32,
    pub n_way: u32,
    pub trials: u32,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "step,range_start,range_end,direction,top1,n_queries,n_way,trials,seed";

impl RetrievalRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{},{},{},{}",
            self.step,
            self.range_start,
            self.range_end,
            self.direction,
            self.top1,
            self.n_queries,
            self.n_way,
            self.trials,
            self.seed
        )
    }
}

pub fn rows_to_csv(rows: &[RetrievalRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn write_rows_csv(path: &Path, rows: &[RetrievalRow]) -> Result<(), RetrievalError> {
    fs::write(path, rows_to_csv(rows))?;
    Ok(())
}

pub fn write_rows_json(path: &Path, rows: &[RetrievalRow]) -> Result<(), RetrievalError> {
    fs::write(path, serde_json::to_string_pretty(rows).expect("rows serialize"))?;
    Ok(())
}

/// Encode the held-out samples of `range` and measure top-1 accuracy in both
/// directions against the cumulative test set.
pub fn evaluate_step(
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    dataset: &Dataset,
    range: RangeInclusive<u32>,
    step: u32,
    cfg: &RetrievalConfig,
) -> Result<[RetrievalRow; 2], RetrievalError> {
    let idx = dataset.test_indices(range.clone());
    if idx.is_empty() {
        return Err(RetrievalError::EmptyRange(*range.start(), *range.end()));
    }
    let n = dataset.header.input_dim as usize;
    let d = dataset.header.embed_dim as usize;
    let mut x = Vec::with_capacity(idx.len() * n);
    let mut c = Vec::with_capacity(idx.len() * d);
    let mut ids = Vec::with_capacity(idx.len());
    for &i in &idx {
        x.extend_from_slice(&dataset.samples[i].x);
        c.extend_from_slice(&dataset.samples[i].c);
        ids.push(i as u64);
    }
    let x = Tensor::from_vec(vec![idx.len(), n], x)?;
    let c = Tensor::from_vec(vec![idx.len(), d], c)?;
    let trace = encoder::forward(params, enc_cfg, &x, None)?;

    let brains = EmbeddingSet::new(ids.clone(), trace.output)?;
    let images = EmbeddingSet::new(ids.clone(), c)?;

    let row = |direction: Direction, top1: f64| RetrievalRow {
        step,
        range_start: *range.start(),
        range_end: *range.end(),
        direction,
        top1,
        n_queries: idx.len() as u32,
        n_way: cfg.n_way,
        trials: cfg.trials,
        seed: cfg.seed,
    };
    let b2i = nway_top1(&brains, &ids, &images, cfg)?;
    let i2b = nway_top1(&images, &ids, &brains, cfg)?;
    Ok([
        row(Direction::BrainToImage, b2i),
        row(Direction::ImageToBrain, i2b),
    ])
}
