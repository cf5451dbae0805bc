//! Seeded sampling and concept-based subset selection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::normalize_label;

/// Global concepts kept by the default concept filter: everything except
/// tables, plots and charts, and scientific formulae and equations.
pub const DEFAULT_KEEP_GLOBALS: [&str; 8] = [
    "Clinical Imaging",
    "Microscopy",
    "Immuno Assays",
    "Illustrative Diagrams",
    "Chemical Structures",
    "Maps",
    "Tools and Materials",
    "Hand Drawn and Screen Based Visuals",
];

pub fn default_keep_set() -> BTreeSet<String> {
    DEFAULT_KEEP_GLOBALS.iter().map(|g| normalize_label(g)).collect()
}

/// Uniform sample of `n` items without replacement, returned in input order.
/// Returns everything when `items` has at most `n` elements.
pub fn sample_without_replacement<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, items.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

/// FNV-1a, used to derive a per-group seed that does not depend on which
/// other groups are present in the stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn group_seed(seed: u64, group: &str) -> u64 {
    fnv1a(group.as_bytes()) ^ seed.rotate_left(17)
}

/// Outcome of a filtering stage; `kept + dropped + unlabeled` equals the
/// input count.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilterCounts {
    pub kept: usize,
    pub dropped: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("item {index} has no primary global concept")]
pub struct UnlabeledItem {
    pub index: usize,
}

/// Keeps items whose normalised primary global concept is in `keep`.
///
/// `label` returns the primary global concept of an item, if any. In strict
/// mode an unlabeled item is an error; otherwise it is dropped and counted.
pub fn concept_filter<T, F>(
    items: Vec<T>,
    keep: &BTreeSet<String>,
    strict: bool,
    label: F,
) -> Result<(Vec<T>, FilterCounts), UnlabeledItem>
where
    F: Fn(&T) -> Option<&str>,
{
    let mut counts = FilterCounts::default();
    let mut out = Vec::new();
    for (index, item) in items.into_iter().enumerate() {
        match label(&item) {
            None => {
                if strict {
                    return Err(UnlabeledItem { index });
                }
                counts.unlabeled += 1;
            }
            Some(l) if keep.contains(&normalize_label(l)) => {
                counts.kept += 1;
                out.push(item);
            }
            Some(_) => counts.dropped += 1,
        }
    }
    Ok((out, counts))
}

/// Caps every concept group at `cap` items by reservoir sampling.
///
/// Each group draws from its own generator seeded by `(seed, group)`, so the
/// selection inside a group depends only on that group's subsequence. The
/// result keeps input order. Items without a group are kept unchanged.
pub fn concept_balance<T, F>(items: Vec<T>, cap: usize, seed: u64, group: F) -> Vec<T>
where
    F: Fn(&T) -> Option<&str>,
{
    struct Reservoir {
        rng: ChaCha8Rng,
        seen: usize,
        slots: Vec<usize>,
    }

    let mut reservoirs: BTreeMap<String, Reservoir> = BTreeMap::new();
    let mut selected = alloc::vec![false; items.len()];
    for (i, item) in items.iter().enumerate() {
        let Some(g) = group(item) else {
            selected[i] = true;
            continue;
        };
        let key = normalize_label(g);
        let res = reservoirs.entry(key).or_insert_with_key(|k| Reservoir {
            rng: ChaCha8Rng::seed_from_u64(group_seed(seed, k)),
            seen: 0,
            slots: Vec::new(),
        });
        res.seen += 1;
        if res.slots.len() < cap {
            res.slots.push(i);
        } else if cap > 0 {
            let j = res.rng.random_range(0..res.seen);
            if j < cap {
                res.slots[j] = i;
            }
        }
    }
    for res in reservoirs.values() {
        for &i in &res.slots {
            selected[i] = true;
        }
    }
    items
        .into_iter()
        .zip(selected)
        .filter_map(|(item, keep)| keep.then_some(item))
        .collect()
}
