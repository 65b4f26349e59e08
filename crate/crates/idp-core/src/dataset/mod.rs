//! Interaction logs: ingestion, filtering, multi-domain merging,
//! leave-one-out splits, and the synthetic corpus generator.
//!
//! Identity is scoped by domain on both sides: the same user or item
//! string in two domains names two distinct entities, so merged stores
//! keep one dense, collision-free global index space per kind.

mod split;
mod synth;

pub use split::{split_leave_one_out, LeaveOneOutSplit, SplitUser, NUM_EVAL_NEGATIVES};
pub use synth::{synthesize, SynthCorpus, SynthDomain, SynthSpec};

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{IdpError, Result};

/// One logged user-item interaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
    pub domain: String,
}

/// One event inside a user's chronological sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub item: u32,
    pub timestamp: u64,
    /// Position in the original input; breaks timestamp ties.
    order: u64,
}

/// Per-domain entity counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

/// Immutable interaction store with dense user/item indices.
#[derive(Clone, Debug)]
pub struct InteractionStore {
    domains: Vec<String>,
    /// Dense user index -> (domain index, user id).
    users: Vec<(u32, String)>,
    /// Dense global item index -> (domain index, item id).
    items: Vec<(u32, String)>,
    item_lookup: HashMap<(u32, String), u32>,
    /// Per user, sorted by (timestamp, input order).
    events: Vec<Vec<Event>>,
}

impl InteractionStore {
    /// Build a store from raw interactions. Dense indices are assigned in
    /// first-appearance order; each sequence is sorted by timestamp with
    /// ties broken by input order.
    pub fn from_interactions(interactions: &[Interaction]) -> Result<Self> {
        if interactions.is_empty() {
            return Err(IdpError::EmptyInput("no interactions".to_string()));
        }
        let mut domains: Vec<String> = Vec::new();
        let mut domain_lookup: HashMap<String, u32> = HashMap::new();
        let mut users: Vec<(u32, String)> = Vec::new();
        let mut user_lookup: HashMap<(u32, String), u32> = HashMap::new();
        let mut items: Vec<(u32, String)> = Vec::new();
        let mut item_lookup: HashMap<(u32, String), u32> = HashMap::new();
        let mut events: Vec<Vec<Event>> = Vec::new();

        for (order, inter) in interactions.iter().enumerate() {
            let d = *domain_lookup.entry(inter.domain.clone()).or_insert_with(|| {
                domains.push(inter.domain.clone());
                (domains.len() - 1) as u32
            });
            let u = *user_lookup.entry((d, inter.user.clone())).or_insert_with(|| {
                users.push((d, inter.user.clone()));
                events.push(Vec::new());
                (users.len() - 1) as u32
            });
            let v = *item_lookup.entry((d, inter.item.clone())).or_insert_with(|| {
                items.push((d, inter.item.clone()));
                (items.len() - 1) as u32
            });
            events[u as usize].push(Event {
                item: v,
                timestamp: inter.timestamp,
                order: order as u64,
            });
        }
        for seq in &mut events {
            seq.sort_by_key(|e| (e.timestamp, e.order));
        }
        Ok(InteractionStore {
            domains,
            users,
            items,
            item_lookup,
            events,
        })
    }

    /// Ingest a UTF-8 TSV file with lines `user<TAB>item<TAB>timestamp<TAB>domain`.
    pub fn ingest_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| IdpError::io(path, e))?;
        let mut interactions = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(IdpError::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
                });
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(IdpError::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: "empty field".to_string(),
                });
            }
            let timestamp: u64 = fields[2].parse().map_err(|_| IdpError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("bad timestamp {:?}", fields[2]),
            })?;
            interactions.push(Interaction {
                user: fields[0].to_string(),
                item: fields[1].to_string(),
                timestamp,
                domain: fields[3].to_string(),
            });
        }
        if interactions.is_empty() {
            return Err(IdpError::EmptyInput(format!("{}: no interactions", path.display())));
        }
        Self::from_interactions(&interactions)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn domain_index(&self, tag: &str) -> Option<u32> {
        self.domains.iter().position(|d| d == tag).map(|i| i as u32)
    }

    /// (domain tag, user id) of a dense user index.
    pub fn user_key(&self, u: u32) -> (&str, &str) {
        let (d, name) = &self.users[u as usize];
        (&self.domains[*d as usize], name)
    }

    /// (domain tag, item id) of a dense global item index.
    pub fn item_key(&self, v: u32) -> (&str, &str) {
        let (d, name) = &self.items[v as usize];
        (&self.domains[*d as usize], name)
    }

    pub fn item_domain(&self, v: u32) -> u32 {
        self.items[v as usize].0
    }

    pub fn user_domain(&self, u: u32) -> u32 {
        self.users[u as usize].0
    }

    pub fn lookup_item(&self, domain: &str, item: &str) -> Option<u32> {
        let d = self.domain_index(domain)?;
        self.item_lookup.get(&(d, item.to_string())).copied()
    }

    /// Chronological events of one user.
    pub fn events(&self, u: u32) -> &[Event] {
        &self.events[u as usize]
    }

    /// Chronological item indices of one user.
    pub fn sequence(&self, u: u32) -> Vec<u32> {
        self.events[u as usize].iter().map(|e| e.item).collect()
    }

    pub fn items_of_domain(&self, d: u32) -> Vec<u32> {
        (0..self.items.len() as u32)
            .filter(|&v| self.items[v as usize].0 == d)
            .collect()
    }

    pub fn users_of_domain(&self, d: u32) -> Vec<u32> {
        (0..self.users.len() as u32)
            .filter(|&u| self.users[u as usize].0 == d)
            .collect()
    }

    pub fn domain_counts(&self, d: u32) -> Counts {
        let users = self.users_of_domain(d);
        Counts {
            users: users.len(),
            items: self.items_of_domain(d).len(),
            interactions: users.iter().map(|&u| self.events[u as usize].len()).sum(),
        }
    }

    /// Iteratively drop users and items with fewer than `k` interactions
    /// until a fixpoint, then reindex densely (surviving entities keep
    /// their relative order).
    pub fn filter_min_interactions(&self, k: usize) -> Result<InteractionStore> {
        if k < 1 {
            return Err(IdpError::InvalidArgument("min interactions k must be >= 1".into()));
        }
        let mut user_alive = vec![true; self.users.len()];
        let mut item_alive = vec![true; self.items.len()];
        // events retained per user, pruned as items die
        let mut events: Vec<Vec<Event>> = self.events.clone();

        loop {
            let mut item_count = vec![0usize; self.items.len()];
            for (u, seq) in events.iter().enumerate() {
                if !user_alive[u] {
                    continue;
                }
                for e in seq {
                    item_count[e.item as usize] += 1;
                }
            }
            let mut changed = false;
            for (v, alive) in item_alive.iter_mut().enumerate() {
                if *alive && item_count[v] < k {
                    *alive = false;
                    changed = true;
                }
            }
            for (u, seq) in events.iter_mut().enumerate() {
                if !user_alive[u] {
                    continue;
                }
                seq.retain(|e| item_alive[e.item as usize]);
                if seq.len() < k {
                    user_alive[u] = false;
                    seq.clear();
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let survivors: Vec<usize> = (0..self.users.len()).filter(|&u| user_alive[u]).collect();
        let live_items: Vec<usize> = (0..self.items.len()).filter(|&v| item_alive[v]).collect();
        if survivors.is_empty() || live_items.is_empty() {
            return Err(IdpError::DatasetExhausted { k });
        }

        let mut item_remap = vec![u32::MAX; self.items.len()];
        let mut items = Vec::with_capacity(live_items.len());
        let mut item_lookup = HashMap::new();
        for (new, &old) in live_items.iter().enumerate() {
            item_remap[old] = new as u32;
            let key = self.items[old].clone();
            item_lookup.insert(key.clone(), new as u32);
            items.push(key);
        }
        let mut users = Vec::with_capacity(survivors.len());
        let mut new_events = Vec::with_capacity(survivors.len());
        for &old in &survivors {
            users.push(self.users[old].clone());
            new_events.push(
                events[old]
                    .iter()
                    .map(|e| Event {
                        item: item_remap[e.item as usize],
                        ..*e
                    })
                    .collect(),
            );
        }
        Ok(InteractionStore {
            domains: self.domains.clone(),
            users,
            items,
            item_lookup,
            events: new_events,
        })
    }

    /// Merge stores into one store with disjoint index spaces. No user or
    /// item alignment is performed; identical strings in different
    /// domains stay distinct entities. Domain tags must not repeat across
    /// the merged stores, or the dense index spaces would collide.
    pub fn merge_domains(stores: &[InteractionStore]) -> Result<InteractionStore> {
        if stores.is_empty() {
            return Err(IdpError::EmptyInput("merge_domains called with no stores".into()));
        }
        let mut domains: Vec<String> = Vec::new();
        for s in stores {
            for d in &s.domains {
                if domains.contains(d) {
                    return Err(IdpError::DuplicateDomain(d.clone()));
                }
                domains.push(d.clone());
            }
        }
        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut item_lookup = HashMap::new();
        let mut events = Vec::new();
        let mut domain_off = 0u32;
        let mut item_off = 0u32;
        let mut order_off = 0u64;
        for s in stores {
            for (d, name) in &s.users {
                users.push((d + domain_off, name.clone()));
            }
            for (d, name) in &s.items {
                let key = (d + domain_off, name.clone());
                item_lookup.insert(key.clone(), items.len() as u32);
                items.push(key);
            }
            let max_order = s
                .events
                .iter()
                .flat_map(|seq| seq.iter().map(|e| e.order))
                .max()
                .unwrap_or(0);
            for seq in &s.events {
                events.push(
                    seq.iter()
                        .map(|e| Event {
                            item: e.item + item_off,
                            timestamp: e.timestamp,
                            order: e.order + order_off,
                        })
                        .collect(),
                );
            }
            domain_off += s.domains.len() as u32;
            item_off += s.items.len() as u32;
            order_off += max_order + 1;
        }
        Ok(InteractionStore {
            domains,
            users,
            items,
            item_lookup,
            events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inter(user: &str, item: &str, ts: u64, domain: &str) -> Interaction {
        Interaction {
            user: user.into(),
            item: item.into(),
            timestamp: ts,
            domain: domain.into(),
        }
    }

    #[test]
    fn ingest_sorts_by_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        std::fs::write(&path, "u1\ti1\t3\tA\nu1\ti2\t1\tA\nu1\ti3\t2\tA\n").unwrap();
        let store = InteractionStore::ingest_tsv(&path).unwrap();
        assert_eq!(store.num_users(), 1);
        let seq = store.sequence(0);
        // items appear in timestamp order: i2 (ts 1), i3 (ts 2), i1 (ts 3)
        let names: Vec<&str> = seq.iter().map(|&v| store.item_key(v).1).collect();
        assert_eq!(names, vec!["i2", "i3", "i1"]);
    }

    #[test]
    fn timestamp_ties_break_by_file_order() {
        let store = InteractionStore::from_interactions(&[
            inter("u", "a", 7, "A"),
            inter("u", "b", 7, "A"),
            inter("u", "c", 7, "A"),
        ])
        .unwrap();
        let names: Vec<&str> = store.sequence(0).iter().map(|&v| store.item_key(v).1).collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn same_item_string_distinct_domains() {
        let store = InteractionStore::from_interactions(&[
            inter("u1", "42", 0, "A"),
            inter("u2", "42", 0, "B"),
        ])
        .unwrap();
        assert_eq!(store.num_items(), 2);
        assert_ne!(store.lookup_item("A", "42"), store.lookup_item("B", "42"));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "u\ti\t0\tA\nu\ti\t1\n").unwrap();
        let err = InteractionStore::ingest_tsv(&path).unwrap_err();
        match err {
            IdpError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            InteractionStore::ingest_tsv(&path).unwrap_err(),
            IdpError::EmptyInput(_)
        ));
    }

    #[test]
    fn filter_removes_user_below_threshold() {
        let mut interactions = Vec::new();
        // u_small has 4 interactions, others have 5+ on shared items
        for t in 0..4 {
            interactions.push(inter("u_small", &format!("i{t}"), t, "A"));
        }
        for u in 0..5 {
            for t in 0..5 {
                interactions.push(inter(&format!("u{u}"), &format!("i{t}"), t as u64, "A"));
            }
        }
        let store = InteractionStore::from_interactions(&interactions).unwrap();
        let filtered = store.filter_min_interactions(5).unwrap();
        assert_eq!(filtered.num_users(), 5);
        assert!(!filtered
            .users
            .iter()
            .any(|(_, name)| name == "u_small"));
    }

    #[test]
    fn filter_is_identity_when_all_above_threshold() {
        // 5 users x 5 shared items: every user and every item has exactly 5
        let mut interactions = Vec::new();
        for u in 0..5 {
            for t in 0..5 {
                interactions.push(inter(&format!("u{u}"), &format!("i{t}"), t as u64, "A"));
            }
        }
        let store = InteractionStore::from_interactions(&interactions).unwrap();
        let filtered = store.filter_min_interactions(5).unwrap();
        assert_eq!(filtered.num_users(), store.num_users());
        assert_eq!(filtered.num_items(), store.num_items());
        assert_eq!(filtered.num_interactions(), store.num_interactions());
        for u in 0..store.num_users() as u32 {
            assert_eq!(filtered.sequence(u), store.sequence(u));
        }
    }

    /// Brute-force fixpoint oracle: recompute removal sets from scratch
    /// until stable, tracking survivors by (user name, item name).
    fn fixpoint_oracle(interactions: &[Interaction], k: usize) -> (Vec<String>, Vec<String>) {
        let mut rows: Vec<&Interaction> = interactions.iter().collect();
        loop {
            let mut user_count: HashMap<&str, usize> = HashMap::new();
            let mut item_count: HashMap<&str, usize> = HashMap::new();
            for r in &rows {
                *user_count.entry(r.user.as_str()).or_default() += 1;
                *item_count.entry(r.item.as_str()).or_default() += 1;
            }
            let before = rows.len();
            rows.retain(|r| user_count[r.user.as_str()] >= k && item_count[r.item.as_str()] >= k);
            if rows.len() == before {
                break;
            }
        }
        let mut users: Vec<String> = Vec::new();
        let mut items: Vec<String> = Vec::new();
        for r in rows {
            if !users.contains(&r.user) {
                users.push(r.user.clone());
            }
            if !items.contains(&r.item) {
                items.push(r.item.clone());
            }
        }
        (users, items)
    }

    #[test]
    fn filter_chain_removal_matches_fixpoint_oracle() {
        // 5-user toy store: dropping u4 (2 interactions) starves item "x",
        // whose removal starves u3, etc.
        let interactions = vec![
            inter("u0", "a", 0, "A"),
            inter("u0", "b", 1, "A"),
            inter("u0", "c", 2, "A"),
            inter("u1", "a", 0, "A"),
            inter("u1", "b", 1, "A"),
            inter("u1", "c", 2, "A"),
            inter("u2", "a", 0, "A"),
            inter("u2", "b", 1, "A"),
            inter("u2", "c", 2, "A"),
            inter("u3", "a", 0, "A"),
            inter("u3", "x", 1, "A"),
            inter("u3", "x", 2, "A"),
            inter("u4", "x", 0, "A"),
            inter("u4", "b", 1, "A"),
        ];
        let k = 3;
        let (oracle_users, oracle_items) = fixpoint_oracle(&interactions, k);
        let store = InteractionStore::from_interactions(&interactions).unwrap();
        let filtered = store.filter_min_interactions(k).unwrap();
        let got_users: Vec<String> = filtered.users.iter().map(|(_, n)| n.clone()).collect();
        let got_items: Vec<String> = filtered.items.iter().map(|(_, n)| n.clone()).collect();
        assert_eq!(got_users, oracle_users);
        assert_eq!(got_items, oracle_items);
        // fixpoint: re-applying changes nothing
        let again = filtered.filter_min_interactions(k).unwrap();
        assert_eq!(again.num_users(), filtered.num_users());
        assert_eq!(again.num_items(), filtered.num_items());
        assert_eq!(again.num_interactions(), filtered.num_interactions());
    }

    #[test]
    fn merge_offsets_are_disjoint() {
        let a = InteractionStore::from_interactions(
            &(0..10)
                .map(|i| inter("u", &format!("i{i}"), i as u64, "A"))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let b = InteractionStore::from_interactions(
            &(0..10)
                .map(|i| inter("u", &format!("i{i}"), i as u64, "B"))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let merged = InteractionStore::merge_domains(&[a, b]).unwrap();
        assert_eq!(merged.num_items(), 20);
        let a_items = merged.items_of_domain(0);
        let b_items = merged.items_of_domain(1);
        assert_eq!(a_items, (0..10).collect::<Vec<u32>>());
        assert_eq!(b_items, (10..20).collect::<Vec<u32>>());
        // same user string in both domains stays two distinct users
        assert_eq!(merged.num_users(), 2);
    }

    #[test]
    fn merge_single_store_is_identity() {
        let a = InteractionStore::from_interactions(&[
            inter("u", "x", 0, "A"),
            inter("u", "y", 1, "A"),
        ])
        .unwrap();
        let merged = InteractionStore::merge_domains(std::slice::from_ref(&a)).unwrap();
        assert_eq!(merged.num_users(), a.num_users());
        assert_eq!(merged.num_items(), a.num_items());
        assert_eq!(merged.sequence(0), a.sequence(0));
    }

    #[test]
    fn merge_duplicate_domain_tag_errors() {
        let a = InteractionStore::from_interactions(&[inter("u", "x", 0, "A")]).unwrap();
        let b = InteractionStore::from_interactions(&[inter("w", "y", 0, "A")]).unwrap();
        assert!(matches!(
            InteractionStore::merge_domains(&[a, b]).unwrap_err(),
            IdpError::DuplicateDomain(_)
        ));
    }

    #[test]
    fn dense_indices_are_a_bijection() {
        let store = InteractionStore::from_interactions(&[
            inter("u1", "a", 0, "A"),
            inter("u1", "b", 1, "A"),
            inter("u2", "a", 0, "B"),
            inter("u2", "b", 1, "B"),
        ])
        .unwrap();
        let mut seen = std::collections::HashSet::new();
        for v in 0..store.num_items() as u32 {
            let (d, name) = store.item_key(v);
            assert_eq!(store.lookup_item(d, name), Some(v));
            assert!(seen.insert((d.to_string(), name.to_string())));
        }
        assert_eq!(seen.len(), store.num_items());
    }
}
