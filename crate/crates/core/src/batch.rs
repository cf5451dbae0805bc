//! Request batching for the metadata service.

use alloc::vec::Vec;

/// Largest id batch the metadata service accepts per request.
pub const DEFAULT_BATCH_SIZE: usize = 200;

/// Splits `ids` into consecutive batches of `batch_size`; only the last batch
/// may be shorter. Returns no batches for empty input.
///
/// # Panics
///
/// Panics if `batch_size` is zero.
pub fn batch_ids<T: Clone>(ids: &[T], batch_size: usize) -> Vec<Vec<T>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    ids.chunks(batch_size).map(<[T]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lengths() {
        let ids: Vec<u64> = (0..450).collect();
        let lens: Vec<usize> = batch_ids(&ids, 200).iter().map(Vec::len).collect();
        assert_eq!(lens, [200, 200, 50]);
        assert!(batch_ids::<u64>(&[], 200).is_empty());
        let ids: Vec<u64> = (0..200).collect();
        assert_eq!(batch_ids(&ids, DEFAULT_BATCH_SIZE).len(), 1);
    }

    proptest! {
        #[test]
        fn concatenation_preserves_input(ids in proptest::collection::vec(any::<u64>(), 0..500), size in 1usize..64) {
            let batches = batch_ids(&ids, size);
            let flat: Vec<u64> = batches.iter().flatten().copied().collect();
            prop_assert_eq!(&flat, &ids);
            for (i, b) in batches.iter().enumerate() {
                prop_assert!(b.len() <= size);
                if i + 1 < batches.len() {
                    prop_assert_eq!(b.len(), size);
                }
            }
        }
    }
}
