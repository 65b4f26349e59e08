//! Leave-one-out split with 99 sampled negatives per user.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{IdpError, Result};
use crate::rng::derive_rng;

use super::InteractionStore;

/// Sampled negatives per evaluated user.
pub const NUM_EVAL_NEGATIVES: usize = 99;

#[derive(Clone, Debug)]
pub struct SplitUser {
    pub user: u32,
    /// Sequence prefix s[0..n-2].
    pub train: Vec<u32>,
    /// Second-to-last item, the validation target.
    pub valid: u32,
    /// Last item, the test target.
    pub test: u32,
    /// 99 items the user never interacted with; shared by the validation
    /// and test rankings.
    pub negatives: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct LeaveOneOutSplit {
    pub users: Vec<SplitUser>,
    /// Users skipped because their sequence is shorter than 3.
    pub excluded_users: usize,
    /// Catalog size of the store the split was taken from.
    pub num_items: usize,
    pub seed: u64,
}

/// Last item becomes the test target, second-to-last the validation
/// target, the rest the train prefix. Negatives are drawn uniformly
/// without replacement from items the user never touched; deterministic
/// given the seed. Users with sequences shorter than 3 are excluded with
/// a logged count.
pub fn split_leave_one_out(store: &InteractionStore, seed: u64) -> Result<LeaveOneOutSplit> {
    let num_items = store.num_items();
    let mut rng = derive_rng(seed, "split");
    let mut users = Vec::new();
    let mut excluded = 0usize;
    for u in 0..store.num_users() as u32 {
        let seq = store.sequence(u);
        if seq.len() < 3 {
            excluded += 1;
            continue;
        }
        let touched: HashSet<u32> = seq.iter().copied().collect();
        let available = num_items - touched.len();
        if available < NUM_EVAL_NEGATIVES {
            return Err(IdpError::InsufficientCatalog {
                needed: NUM_EVAL_NEGATIVES,
                available,
            });
        }
        let mut negatives = Vec::with_capacity(NUM_EVAL_NEGATIVES);
        let mut chosen: HashSet<u32> = HashSet::new();
        while negatives.len() < NUM_EVAL_NEGATIVES {
            let cand = rng.gen_range(0..num_items as u32);
            if touched.contains(&cand) || !chosen.insert(cand) {
                continue;
            }
            negatives.push(cand);
        }
        let n = seq.len();
        users.push(SplitUser {
            user: u,
            train: seq[..n - 2].to_vec(),
            valid: seq[n - 2],
            test: seq[n - 1],
            negatives,
        });
    }
    if excluded > 0 {
        log::info!("leave-one-out split excluded {excluded} users with sequences shorter than 3");
    }
    Ok(LeaveOneOutSplit {
        users,
        excluded_users: excluded,
        num_items,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;

    fn store_with_sequences(seqs: &[Vec<&str>]) -> InteractionStore {
        let mut interactions = Vec::new();
        for (u, seq) in seqs.iter().enumerate() {
            for (t, item) in seq.iter().enumerate() {
                interactions.push(Interaction {
                    user: format!("u{u}"),
                    item: item.to_string(),
                    timestamp: t as u64,
                    domain: "A".into(),
                });
            }
        }
        InteractionStore::from_interactions(&interactions).unwrap()
    }

    fn wide_store(num_items: usize, seq: &[&str]) -> InteractionStore {
        // one real user plus tail users with length-2 sequences: they are
        // excluded from the split but put `num_items` items in the catalog
        let mut interactions = Vec::new();
        for (t, item) in seq.iter().enumerate() {
            interactions.push(Interaction {
                user: "u_real".into(),
                item: item.to_string(),
                timestamp: t as u64,
                domain: "A".into(),
            });
        }
        for i in (0..num_items).step_by(2) {
            for j in [i, (i + 1).min(num_items - 1)] {
                interactions.push(Interaction {
                    user: format!("u_tail{i}"),
                    item: format!("i{j}"),
                    timestamp: j as u64,
                    domain: "A".into(),
                });
            }
        }
        InteractionStore::from_interactions(&interactions).unwrap()
    }

    #[test]
    fn split_definition() {
        let store = wide_store(150, &["a", "b", "c", "d"]);
        let split = split_leave_one_out(&store, 7).unwrap();
        let su = &split.users[0];
        let name = |v: u32| store.item_key(v).1.to_string();
        assert_eq!(su.train.iter().map(|&v| name(v)).collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(name(su.valid), "c");
        assert_eq!(name(su.test), "d");
    }

    #[test]
    fn negatives_exclude_user_items_and_are_distinct() {
        // catalog of 100 items; the evaluated user touched 1 of them, so
        // negatives are drawn from the other 99 and must all be distinct
        let store = wide_store(100, &["i0", "i0", "i0"]);
        let split = split_leave_one_out(&store, 3).unwrap();
        let su = split.users.iter().find(|s| store.user_key(s.user).1 == "u_real").unwrap();
        let touched: HashSet<u32> = store.sequence(su.user).iter().copied().collect();
        assert_eq!(su.negatives.len(), NUM_EVAL_NEGATIVES);
        let distinct: HashSet<u32> = su.negatives.iter().copied().collect();
        assert_eq!(distinct.len(), NUM_EVAL_NEGATIVES);
        assert!(distinct.is_disjoint(&touched));
    }

    #[test]
    fn same_seed_identical_negatives() {
        let store = wide_store(300, &["a", "b", "c", "d", "e"]);
        let s1 = split_leave_one_out(&store, 42).unwrap();
        let s2 = split_leave_one_out(&store, 42).unwrap();
        for (a, b) in s1.users.iter().zip(&s2.users) {
            assert_eq!(a.negatives, b.negatives);
        }
        let s3 = split_leave_one_out(&store, 43).unwrap();
        assert_ne!(s1.users[0].negatives, s3.users[0].negatives);
    }

    #[test]
    fn short_sequences_excluded_with_count() {
        // u_real (length 3) kept; every length-2 tail user excluded
        let store = wide_store(150, &["a", "b", "c"]);
        let split = split_leave_one_out(&store, 1).unwrap();
        assert_eq!(split.users.len(), 1);
        assert_eq!(store.user_key(split.users[0].user).1, "u_real");
        assert_eq!(split.excluded_users, store.num_users() - 1);
    }

    #[test]
    fn insufficient_catalog_errors() {
        let store = store_with_sequences(&[vec!["a", "b", "c"]]);
        assert!(matches!(
            split_leave_one_out(&store, 1).unwrap_err(),
            IdpError::InsufficientCatalog { .. }
        ));
    }
}
