//! Feature memory bank and class-masked in-context retrieval.
//!
//! Every training sample contributes one feature row. For a query row `i`
//! the bank scores all rows by temperature-scaled cosine similarity, then
//!
//! - positives: same-label rows other than `i`, the `K` most similar;
//! - negatives: different-label rows, the `N_neg` most similar (or a seeded
//!   random draw when configured).
//!
//! Weights are a softmax over the scores of the selected rows only. Ranking
//! ties go to the lower row index.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::net::{forward, MlpModel};
use crate::numerics::{dot, norm, ordered_sum, softmax_with_temperature, ProbVector, NORM_FLOOR};
use crate::rng::{SeededRng, Stream};

/// Immutable `N x D` matrix of features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    norms: Vec<f64>,
    source_epoch: usize,
}

impl FeatureBank {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, source_epoch: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::invalid(format!(
                "{} feature values for {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid("empty feature bank"));
        }
        let norms: Vec<f64> = features.chunks(dim).map(norm).collect();
        if let Some(i) = norms.iter().position(|&n| !(n >= NORM_FLOOR) || !n.is_finite()) {
            return Err(Error::DegenerateVector(format!(
                "feature row of sample {i} has norm {:e}",
                norms[i]
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            norms,
            source_epoch,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source_epoch(&self) -> usize {
        self.source_epoch
    }

    /// First 8 bytes of the SHA-256 of the dump encoding.
    pub fn checksum(&self) -> u64 {
        let digest = Sha256::digest(self.dump_bytes());
        u64::from_be_bytes(digest[..8].try_into().unwrap())
    }

    /// Magic `ICKB`, N u32, D u32, features f64 row-major, labels u16.
    pub fn dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.features.len() + 2 * self.len());
        out.extend_from_slice(b"ICKB");
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u16).to_le_bytes());
        }
        out
    }

    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != b"ICKB" {
            return Err(Error::format(0, "bad bank magic"));
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let features = (0..n * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::new(features, dim, labels, 0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.dump_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_dump_bytes(&std::fs::read(path)?)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::invalid(format!(
                "query index {i} outside bank of {} rows",
                self.len()
            )));
        }
        Ok(())
    }

    /// Fails with the list of rows whose label occurs only once, i.e. rows
    /// that can never have a positive in-context sample.
    pub fn check_positive_feasible(&self) -> Result<()> {
        let mut counts = HashMap::new();
        for &y in &self.labels {
            *counts.entry(y).or_insert(0usize) += 1;
        }
        let lonely: Vec<usize> = (0..self.len()).filter(|&i| counts[&self.labels[i]] < 2).collect();
        if lonely.is_empty() {
            Ok(())
        } else {
            Err(Error::InsufficientCandidates(format!(
                "samples without a same-class peer: {lonely:?}"
            )))
        }
    }
}

/// Bank built from `model` features over `dataset`.
pub fn build_bank(model: &MlpModel, dataset: &LabeledDataset) -> Result<FeatureBank> {
    build_bank_at_epoch(model, dataset, 0)
}

pub fn build_bank_at_epoch(model: &MlpModel, dataset: &LabeledDataset, epoch: usize) -> Result<FeatureBank> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot build a bank from an empty dataset"));
    }
    let mut features = Vec::with_capacity(dataset.len() * model.feature_dim());
    for i in 0..dataset.len() {
        let rec = forward(model, dataset.row(i))?;
        if norm(&rec.features) < NORM_FLOOR {
            return Err(Error::DegenerateVector(format!("feature of sample {i} is (near) zero")));
        }
        features.extend_from_slice(&rec.features);
    }
    FeatureBank::new(features, model.feature_dim(), dataset.labels().to_vec(), epoch)
}

/// `cos(query, row_j) / beta` for every row `j`.
pub fn similarity_row(bank: &FeatureBank, query: &[f64], beta: f64) -> Result<Vec<f64>> {
    if query.len() != bank.dim {
        return Err(Error::invalid(format!(
            "query dimension {} does not match bank dimension {}",
            query.len(),
            bank.dim
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!(
            "similarity temperature must be positive, got {beta}"
        )));
    }
    let qn = norm(query);
    if qn < NORM_FLOOR {
        return Err(Error::DegenerateVector(format!("query norm {qn:e}")));
    }
    Ok((0..bank.len())
        .map(|j| (dot(query, bank.row(j)) / (qn * bank.norms[j])).clamp(-1.0, 1.0) / beta)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStrategy {
    /// Most similar different-class rows.
    Hardest,
    /// Uniform draw of different-class rows, reseeded per epoch.
    Random,
}

/// How many positives to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveCount {
    Top(usize),
    /// Every same-class row.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub k_positive: PositiveCount,
    pub n_negative: usize,
    pub negative_strategy: NegativeStrategy,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 4.0,
            k_positive: PositiveCount::Top(100),
            n_negative: 8,
            negative_strategy: NegativeStrategy::Hardest,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {beta}")));
            }
        }
        if self.k_positive == PositiveCount::Top(0) {
            return Err(Error::invalid("k_positive must be at least 1"));
        }
        if self.n_negative == 0 {
            return Err(Error::invalid("n_negative must be at least 1"));
        }
        Ok(())
    }
}

/// Retrieved rows with their aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub indices: Vec<usize>,
    /// Sums to 1; same order as `indices`.
    pub weights: Vec<f64>,
    /// Scaled similarities of the retrieved rows.
    pub scores: Vec<f64>,
    pub polarity: Polarity,
}

impl RetrievalResult {
    /// Same rows, weights replaced by `1 / len`.
    pub fn with_uniform_weights(&self) -> Self {
        let w = 1.0 / self.indices.len() as f64;
        Self {
            weights: vec![w; self.indices.len()],
            ..self.clone()
        }
    }
}

fn softmax_weights(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total = ordered_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / total).collect()
}

/// Keeps the `m` best `(index, score)` pairs, best first.
fn select_top(mut candidates: Vec<(usize, f64)>, m: usize) -> Vec<(usize, f64)> {
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let m = m.min(candidates.len());
    if m < candidates.len() {
        candidates.select_nth_unstable_by(m, order);
        candidates.truncate(m);
    }
    candidates.sort_unstable_by(order);
    candidates
}

fn finish(selected: Vec<(usize, f64)>, polarity: Polarity) -> RetrievalResult {
    let (indices, scores): (Vec<usize>, Vec<f64>) = selected.into_iter().unzip();
    RetrievalResult {
        weights: softmax_weights(&scores),
        indices,
        scores,
        polarity,
    }
}

pub fn retrieve_positive(bank: &FeatureBank, query_index: usize, cfg: &RetrievalConfig) -> Result<RetrievalResult> {
    cfg.validate()?;
    bank.check_index(query_index)?;
    let sims = similarity_row(bank, bank.row(query_index), cfg.beta1)?;
    let label = bank.labels[query_index];
    let candidates: Vec<(usize, f64)> = sims
        .into_iter()
        .enumerate()
        .filter(|&(j, _)| j != query_index && bank.labels[j] == label)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InsufficientCandidates(format!(
            "sample {query_index} (class {label}) has no same-class peer in the bank"
        )));
    }
    let k = match cfg.k_positive {
        PositiveCount::Top(k) => k,
        PositiveCount::All => candidates.len(),
    };
    Ok(finish(select_top(candidates, k), Polarity::Positive))
}

pub fn retrieve_negative(
    bank: &FeatureBank,
    query_index: usize,
    cfg: &RetrievalConfig,
    epoch_seed: u64,
) -> Result<RetrievalResult> {
    cfg.validate()?;
    bank.check_index(query_index)?;
    let sims = similarity_row(bank, bank.row(query_index), cfg.beta2)?;
    let label = bank.labels[query_index];
    let mut candidates: Vec<(usize, f64)> = sims
        .into_iter()
        .enumerate()
        .filter(|&(j, _)| bank.labels[j] != label)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InsufficientCandidates(format!(
            "sample {query_index} (class {label}) has no different-class row in the bank"
        )));
    }
    let selected = match cfg.negative_strategy {
        NegativeStrategy::Hardest => select_top(candidates, cfg.n_negative),
        NegativeStrategy::Random => {
            let stream = ((Stream::Negatives as u64) << 32) | query_index as u64;
            let mut rng = SeededRng::with_stream_id(epoch_seed, stream);
            let m = cfg.n_negative.min(candidates.len());
            for i in 0..m {
                let j = i + rng.below(candidates.len() - i);
                candidates.swap(i, j);
            }
            candidates.truncate(m);
            candidates
        }
    };
    Ok(finish(selected, Polarity::Negative))
}

/// Per-epoch memo of negative retrievals.
///
/// Entries are valid for one `(bank checksum, epoch seed)` pair; asking with a
/// different pair drops everything.
#[derive(Debug, Default)]
pub struct NegativeCache {
    key: Option<(u64, u64)>,
    entries: HashMap<usize, RetrievalResult>,
    computations: usize,
}

impl NegativeCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of retrievals actually computed (cache misses).
    pub fn computations(&self) -> usize {
        self.computations
    }

    pub fn get(
        &mut self,
        bank: &FeatureBank,
        bank_checksum: u64,
        query_index: usize,
        cfg: &RetrievalConfig,
        epoch_seed: u64,
    ) -> Result<&RetrievalResult> {
        let key = (bank_checksum, epoch_seed);
        if self.key != Some(key) {
            self.entries.clear();
            self.key = Some(key);
        }
        if !self.entries.contains_key(&query_index) {
            let r = retrieve_negative(bank, query_index, cfg, epoch_seed)?;
            self.computations += 1;
            self.entries.insert(query_index, r);
        }
        Ok(&self.entries[&query_index])
    }
}

/// `sum_j w_j * predictions[idx_j]` for a positive retrieval.
pub fn aggregate_from(predictions: &[ProbVector], result: &RetrievalResult) -> Result<ProbVector> {
    if result.polarity != Polarity::Positive {
        return Err(Error::invalid("aggregation expects a positive retrieval"));
    }
    let k = predictions
        .first()
        .ok_or_else(|| Error::invalid("no predictions to aggregate"))?
        .len();
    let mut out = vec![0.0; k];
    for (&j, &w) in result.indices.iter().zip(&result.weights) {
        let p = predictions
            .get(j)
            .ok_or_else(|| Error::invalid(format!("retrieved index {j} has no prediction")))?;
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o += w * v;
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    ProbVector::new(out)
}

/// Similarity-weighted teacher prediction at temperature `tau1` over the
/// retrieved positives.
pub fn aggregate_predictions(
    teacher: &MlpModel,
    bank_dataset: &LabeledDataset,
    result: &RetrievalResult,
    tau1: f64,
) -> Result<ProbVector> {
    if result.polarity != Polarity::Positive {
        return Err(Error::invalid("aggregation expects a positive retrieval"));
    }
    let mut out: Option<Vec<f64>> = None;
    for (&j, &w) in result.indices.iter().zip(&result.weights) {
        if j >= bank_dataset.len() {
            return Err(Error::invalid(format!("retrieved index {j} outside dataset")));
        }
        let p = softmax_with_temperature(&forward(teacher, bank_dataset.row(j))?.logits, tau1)?;
        let acc = out.get_or_insert_with(|| vec![0.0; p.len()]);
        for (o, v) in acc.iter_mut().zip(p.iter()) {
            *o += w * v;
        }
    }
    let out = out.ok_or_else(|| Error::invalid("empty retrieval"))?;
    ProbVector::new(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}
