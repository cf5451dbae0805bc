//! Evaluation over embedding files: zero-shot classification tasks,
//! retrieval sets, bootstrap intervals and parameter merging.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::{Path, PathBuf};

use litfig_core::eval::{
    bootstrap_ci, closed_vqa_accuracy, recall_at_k, shuffle_answers, wise_ft_merge, ClosedVqaItem, Direction, EvalError,
    NamedParams,
};
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::fsutil::{read_json, write_json_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskClass {
    pub label: String,
    /// Caption variants describing the class; variant `v` of every class
    /// forms one candidate set.
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskItem {
    pub image_key: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_name: String,
    pub classes: Vec<TaskClass>,
    pub items: Vec<TaskItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPair {
    pub image_key: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub task_name: String,
    pub pairs: Vec<RetrievalPair>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("task {task}: {message}")]
    Task { task: String, message: String },
    #[error("no embedding for {kind} {key:?}")]
    MissingEmbedding { kind: &'static str, key: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn estimate(scores: &[f64], boot: &BootstrapConfig) -> Result<Estimate, EvalError> {
    let value = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    let (ci_low, ci_high) = bootstrap_ci(scores, boot.resamples, boot.level, boot.seed)?;
    Ok(Estimate { value, ci_low, ci_high })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: usize,
    pub accuracy: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    pub task_name: String,
    pub items: usize,
    pub classes: usize,
    pub chance: f64,
    /// Mean of the per-variant accuracies; the interval resamples items
    /// scored by their mean correctness across variants.
    pub accuracy: Estimate,
    pub variants: Vec<VariantResult>,
    pub bootstrap: BootstrapConfig,
}

struct Lookup<'a> {
    m: &'a EmbeddingMatrix,
    rows: HashMap<&'a str, usize>,
}

impl<'a> Lookup<'a> {
    fn new(m: &'a EmbeddingMatrix) -> Self {
        Self {
            m,
            rows: m.row_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect(),
        }
    }

    fn get(&self, kind: &'static str, key: &str) -> Result<Vec<f64>, EvalIoError> {
        self.rows
            .get(key)
            .map(|&i| self.m.row_f64(i))
            .ok_or_else(|| EvalIoError::MissingEmbedding {
                kind,
                key: key.to_string(),
            })
    }
}

impl TaskSpec {
    pub fn variant_count(&self) -> usize {
        self.classes.iter().map(|c| c.captions.len()).min().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), EvalIoError> {
        let err = |message: String| EvalIoError::Task {
            task: self.task_name.clone(),
            message,
        };
        if self.classes.len() < 2 {
            return Err(err("at least two classes are required".into()));
        }
        if self.variant_count() == 0 {
            return Err(err("every class needs at least one caption".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for c in &self.classes {
            if !labels.insert(c.label.as_str()) {
                return Err(err(format!("duplicate class {:?}", c.label)));
            }
        }
        if self.items.is_empty() {
            return Err(err("no items".into()));
        }
        if let Some(i) = self.items.iter().find(|i| !labels.contains(i.class.as_str())) {
            return Err(err(format!("item {:?} has unknown class {:?}", i.image_key, i.class)));
        }
        Ok(())
    }
}

/// Closed-VQA items for one caption variant, answers shuffled per item.
pub fn build_items(
    task: &TaskSpec,
    variant: usize,
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    seed: u64,
) -> Result<Vec<ClosedVqaItem>, EvalIoError> {
    let images = Lookup::new(images);
    let texts = Lookup::new(texts);
    let answer_texts: Vec<String> = task.classes.iter().map(|c| c.captions[variant].clone()).collect();
    let answer_embeddings = answer_texts
        .iter()
        .map(|t| texts.get("caption", t))
        .collect::<Result<Vec<_>, _>>()?;
    let index: HashMap<&str, usize> = task.classes.iter().enumerate().map(|(i, c)| (c.label.as_str(), i)).collect();
    let items = task
        .items
        .iter()
        .map(|it| {
            Ok(ClosedVqaItem {
                image_embedding: images.get("image", &it.image_key)?,
                answer_texts: answer_texts.clone(),
                answer_embeddings: answer_embeddings.clone(),
                correct_index: index[it.class.as_str()],
                permutation_seed: 0,
            })
        })
        .collect::<Result<Vec<_>, EvalIoError>>()?;
    Ok(shuffle_answers(&items, seed.wrapping_add(variant as u64)))
}

/// Runs every caption variant as a full pass and averages the accuracies.
pub fn classify(
    task: &TaskSpec,
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    boot: &BootstrapConfig,
) -> Result<ClassifyResult, EvalIoError> {
    task.validate()?;
    let n = task.items.len();
    let mut per_item = vec![0.0; n];
    let mut variants = Vec::new();
    let vc = task.variant_count();
    for v in 0..vc {
        let items = build_items(task, v, images, texts, boot.seed)?;
        let outcome = closed_vqa_accuracy(&items)?;
        for (acc, s) in per_item.iter_mut().zip(&outcome.scores) {
            *acc += s / vc as f64;
        }
        variants.push(VariantResult {
            variant: v,
            accuracy: estimate(&outcome.scores, boot)?,
        });
    }
    let mut accuracy = estimate(&per_item, boot)?;
    accuracy.value = variants.iter().map(|v| v.accuracy.value).sum::<f64>() / vc as f64;
    Ok(ClassifyResult {
        task_name: task.task_name.clone(),
        items: n,
        classes: task.classes.len(),
        chance: 1.0 / task.classes.len() as f64,
        accuracy,
        variants,
        bootstrap: *boot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub direction: Direction,
    pub k: usize,
    pub clamped: bool,
    pub recall: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResult {
    pub task_name: String,
    pub pairs: usize,
    pub results: Vec<RecallResult>,
    pub bootstrap: BootstrapConfig,
}

pub const DEFAULT_KS: [usize; 3] = [1, 10, 100];

pub fn retrieve(
    task: &RetrievalTask,
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    ks: &[usize],
    boot: &BootstrapConfig,
) -> Result<RetrieveResult, EvalIoError> {
    if task.pairs.is_empty() {
        return Err(EvalIoError::Task {
            task: task.task_name.clone(),
            message: "no pairs".into(),
        });
    }
    let il = Lookup::new(images);
    let tl = Lookup::new(texts);
    let img: Vec<Vec<f64>> = task.pairs.iter().map(|p| il.get("image", &p.image_key)).collect::<Result<_, _>>()?;
    let txt: Vec<Vec<f64>> = task.pairs.iter().map(|p| tl.get("caption", &p.caption)).collect::<Result<_, _>>()?;
    let mut results = Vec::new();
    for direction in [Direction::ImageToText, Direction::TextToImage] {
        for &k in ks {
            let out = recall_at_k(&img, &txt, direction, k)?;
            results.push(RecallResult {
                direction,
                k,
                clamped: out.clamped,
                recall: estimate(&out.hits(), boot)?,
            });
        }
    }
    Ok(RetrieveResult {
        task_name: task.task_name.clone(),
        pairs: task.pairs.len(),
        results,
        bootstrap: *boot,
    })
}

pub fn read_task<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, EvalIoError> {
    read_json(path).map_err(|source| EvalIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_result<T: Serialize>(value: &T, path: &Path) -> Result<(), EvalIoError> {
    write_json_atomic(path, value).map_err(|source| EvalIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads two parameter files (`{name: {shape, values}}`), merges them and
/// writes the result.
pub fn merge_param_files(base: &Path, adapted: &Path, alpha: f64, out: &Path) -> Result<NamedParams, EvalIoError> {
    let b: NamedParams = read_task(base)?;
    let a: NamedParams = read_task(adapted)?;
    let merged = wise_ft_merge(&b, &a, alpha)?;
    write_result(&merged, out)?;
    Ok(merged)
}

/// Per-class item counts of a task, for reports.
pub fn class_counts(task: &TaskSpec) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for i in &task.items {
        *out.entry(i.class.clone()).or_default() += 1;
    }
    out
}
