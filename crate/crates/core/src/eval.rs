//! Zero-shot evaluation over precomputed embeddings: closed-set question
//! answering, cross-modal retrieval recall, bootstrap intervals, and weight
//! interpolation between two models.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, norm};
use crate::stats::quantile_sorted;
use crate::subset::group_seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("item {item}: embedding {which} has zero norm")]
    ZeroNorm { item: usize, which: String },
    #[error("item {item}: expected dimension {expected}, got {actual}")]
    Dimension { item: usize, expected: usize, actual: usize },
    #[error("item {item}: needs at least two candidates and a valid correct index")]
    BadItem { item: usize },
    #[error("retrieval set has {images} images but {texts} captions")]
    Unaligned { images: usize, texts: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no scores to resample")]
    EmptyScores,
    #[error("parameter {0:?} is missing from one of the models")]
    MissingParameter(String),
    #[error("parameter {name:?} has shape {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("interpolation weight must lie in [0, 1], got {0}")]
    BadAlpha(f64),
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// A classification example recast as choosing among candidate captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedVqaItem {
    pub image_embedding: Vec<f64>,
    #[serde(default)]
    pub answer_texts: Vec<String>,
    pub answer_embeddings: Vec<Vec<f64>>,
    pub correct_index: usize,
    #[serde(default)]
    pub permutation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaOutcome {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// 1.0 for a correct prediction, 0.0 otherwise, per item.
    pub scores: Vec<f64>,
}

/// Index of the candidate with the highest cosine similarity to the image;
/// ties go to the lowest index.
pub fn predict(item: &ClosedVqaItem, index: usize) -> Result<usize, EvalError> {
    let m = item.answer_embeddings.len();
    if m < 2 || item.correct_index >= m {
        return Err(EvalError::BadItem { item: index });
    }
    let d = item.image_embedding.len();
    let image = unit(&item.image_embedding).ok_or_else(|| EvalError::ZeroNorm {
        item: index,
        which: "image".into(),
    })?;
    let mut best = (0, f64::NEG_INFINITY);
    for (j, cand) in item.answer_embeddings.iter().enumerate() {
        if cand.len() != d {
            return Err(EvalError::Dimension {
                item: index,
                expected: d,
                actual: cand.len(),
            });
        }
        let cand = unit(cand).ok_or_else(|| EvalError::ZeroNorm {
            item: index,
            which: alloc::format!("answer {j}"),
        })?;
        let s = dot(&image, &cand);
        if s > best.1 {
            best = (j, s);
        }
    }
    Ok(best.0)
}

pub fn closed_vqa_accuracy(items: &[ClosedVqaItem]) -> Result<VqaOutcome, EvalError> {
    let mut predictions = Vec::with_capacity(items.len());
    let mut scores = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let p = predict(item, i)?;
        predictions.push(p);
        scores.push(if p == item.correct_index { 1.0 } else { 0.0 });
    }
    let accuracy = if items.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / items.len() as f64
    };
    Ok(VqaOutcome {
        accuracy,
        predictions,
        scores,
    })
}

/// Reported accuracy when every class has several caption variants: each
/// variant set is evaluated in full and the accuracies are averaged.
pub fn mean_accuracy_over_variants(variants: &[Vec<ClosedVqaItem>]) -> Result<f64, EvalError> {
    if variants.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for items in variants {
        total += closed_vqa_accuracy(items)?.accuracy;
    }
    Ok(total / variants.len() as f64)
}

/// Permutes each item's candidates with a generator derived from `seed` and
/// the item position, keeping `correct_index` on the true answer.
pub fn shuffle_answers(items: &[ClosedVqaItem], seed: u64) -> Vec<ClosedVqaItem> {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let item_seed = group_seed(seed, &alloc::format!("item-{i}"));
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            let mut order: Vec<usize> = (0..item.answer_embeddings.len()).collect();
            order.shuffle(&mut rng);
            let texts = if item.answer_texts.len() == order.len() {
                order.iter().map(|&j| item.answer_texts[j].clone()).collect()
            } else {
                item.answer_texts.clone()
            };
            ClosedVqaItem {
                image_embedding: item.image_embedding.clone(),
                answer_texts: texts,
                answer_embeddings: order.iter().map(|&j| item.answer_embeddings[j].clone()).collect(),
                correct_index: order
                    .iter()
                    .position(|&j| j == item.correct_index)
                    .unwrap_or(item.correct_index),
                permutation_seed: item_seed,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallOutcome {
    pub k: usize,
    pub recall: f64,
    /// Whether `k` exceeded the candidate count and was clamped to it.
    pub clamped: bool,
    /// 1-based rank of each query's true mate.
    pub ranks: Vec<usize>,
}

impl RecallOutcome {
    pub fn hits(&self) -> Vec<f64> {
        self.ranks
            .iter()
            .map(|&r| if r <= self.k { 1.0 } else { 0.0 })
            .collect()
    }
}

/// 1-based rank of each query's mate (index `i` for query `i`) among all
/// candidates sorted by descending cosine similarity, ties by index.
pub fn mate_ranks(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Result<Vec<usize>, EvalError> {
    if queries.len() != candidates.len() {
        return Err(EvalError::Unaligned {
            images: queries.len(),
            texts: candidates.len(),
        });
    }
    let normalise = |vs: &[Vec<f64>], what: &str| -> Result<Vec<Vec<f64>>, EvalError> {
        let d = vs.first().map_or(0, Vec::len);
        vs.iter()
            .enumerate()
            .map(|(i, v)| {
                if v.len() != d {
                    return Err(EvalError::Dimension {
                        item: i,
                        expected: d,
                        actual: v.len(),
                    });
                }
                unit(v).ok_or_else(|| EvalError::ZeroNorm {
                    item: i,
                    which: what.into(),
                })
            })
            .collect()
    };
    let q = normalise(queries, "query")?;
    let c = normalise(candidates, "candidate")?;
    if let (Some(a), Some(b)) = (q.first(), c.first()) {
        if a.len() != b.len() {
            return Err(EvalError::Dimension {
                item: 0,
                expected: a.len(),
                actual: b.len(),
            });
        }
    }
    Ok(q.iter()
        .enumerate()
        .map(|(i, query)| {
            let mate = dot(query, &c[i]);
            let ahead = c
                .iter()
                .enumerate()
                .filter(|(j, cand)| {
                    let s = dot(query, cand);
                    s > mate || (s == mate && *j < i)
                })
                .count();
            ahead + 1
        })
        .collect())
}

pub fn recall_at_k(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    direction: Direction,
    k: usize,
) -> Result<RecallOutcome, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let ranks = match direction {
        Direction::ImageToText => mate_ranks(images, texts)?,
        Direction::TextToImage => mate_ranks(texts, images)?,
    };
    let n = ranks.len();
    let clamped = k > n;
    let k = k.min(n.max(1));
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(RecallOutcome {
        k,
        recall: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        clamped,
        ranks,
    })
}

/// Percentile bootstrap interval for the mean of `scores`.
pub fn bootstrap_ci(scores: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| {
            let mut total = 0.0;
            for _ in 0..n {
                total += scores[rng.random_range(0..n)];
            }
            total / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&means, tail), quantile_sorted(&means, 1.0 - tail)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub type NamedParams = BTreeMap<String, ParamArray>;

/// Elementwise `(1 - alpha) * base + alpha * adapted` over every parameter.
pub fn wise_ft_merge(base: &NamedParams, adapted: &NamedParams, alpha: f64) -> Result<NamedParams, EvalError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EvalError::BadAlpha(alpha));
    }
    if let Some(name) = adapted.keys().find(|k| !base.contains_key(*k)) {
        return Err(EvalError::MissingParameter(name.clone()));
    }
    let mut merged = BTreeMap::new();
    for (name, b) in base {
        let a = adapted
            .get(name)
            .ok_or_else(|| EvalError::MissingParameter(name.clone()))?;
        if a.shape != b.shape || a.values.len() != b.values.len() {
            return Err(EvalError::ShapeMismatch {
                name: name.clone(),
                left: b.shape.clone(),
                right: a.shape.clone(),
            });
        }
        let values = b
            .values
            .iter()
            .zip(&a.values)
            .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
            .collect();
        merged.insert(
            name.clone(),
            ParamArray {
                shape: b.shape.clone(),
                values,
            },
        );
    }
    Ok(merged)
}
