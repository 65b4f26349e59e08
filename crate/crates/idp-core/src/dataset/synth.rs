//! Synthetic cross-domain corpus generator.
//!
//! Items in every domain carry a latent cluster label; the clusters are
//! shared across domains while the ID spaces stay disjoint. Each user's
//! sequence follows a Markov chain over clusters, and each item's text
//! vector is its cluster centroid plus isotropic noise. This gives the
//! acceptance tests a controllable cross-domain ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{IdpError, Result};
use crate::linalg::standard_normal;
use crate::rng::derive_rng;

use super::{Interaction, InteractionStore};

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub domains: usize,
    /// Latent clusters shared across domains.
    pub clusters: usize,
    pub items_per_domain: usize,
    pub users_per_domain: usize,
    pub seq_len: usize,
    /// Cluster-transition concentration c: the chain stays in its cluster
    /// with probability c / (c + G - 1) and otherwise moves uniformly.
    /// `f64::INFINITY` gives identity transitions.
    pub concentration: f64,
    pub vector_dim: usize,
    /// Isotropic noise scale added to cluster centroids.
    pub noise: f64,
}

impl SynthSpec {
    /// Default spec S1: 8 clusters, 2 domains, 500 items and 2000 users
    /// per domain, sequences of 20, stay probability 0.8.
    pub fn s1() -> Self {
        SynthSpec {
            domains: 2,
            clusters: 8,
            items_per_domain: 500,
            users_per_domain: 2000,
            seq_len: 20,
            concentration: 28.0,
            vector_dim: 32,
            noise: 0.1,
        }
    }

    pub fn stay_probability(&self) -> f64 {
        if self.clusters == 1 {
            return 1.0;
        }
        if self.concentration.is_infinite() {
            return 1.0;
        }
        self.concentration / (self.concentration + (self.clusters as f64 - 1.0))
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(IdpError::InvalidArgument(format!("degenerate synth spec: {msg}")));
        if self.clusters == 0 {
            return bad("0 clusters");
        }
        if self.domains == 0 {
            return bad("0 domains");
        }
        if self.items_per_domain == 0 {
            return bad("0 items per domain");
        }
        if self.items_per_domain < self.clusters {
            return bad("fewer items per domain than clusters");
        }
        if self.users_per_domain == 0 || self.seq_len == 0 {
            return bad("0 users or 0 sequence length");
        }
        if self.vector_dim == 0 {
            return bad("0 vector dimensions");
        }
        if !(self.concentration > 0.0) {
            return bad("non-positive concentration");
        }
        if self.noise < 0.0 {
            return bad("negative noise scale");
        }
        Ok(())
    }
}

/// One generated domain: its store, per-item text vectors and cluster
/// labels (both aligned with the store's dense item indices).
#[derive(Clone, Debug)]
pub struct SynthDomain {
    pub tag: String,
    pub store: InteractionStore,
    pub vectors: Vec<Vec<f64>>,
    pub item_clusters: Vec<usize>,
    /// (item id string, vector, cluster) for every generated item,
    /// including items that never got an interaction; this is what the
    /// vector TSV carries.
    pub raw_items: Vec<(String, Vec<f64>, usize)>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub seed: u64,
    pub domains: Vec<SynthDomain>,
    pub centroids: Vec<Vec<f64>>,
}

fn unit_centroids(spec: &SynthSpec, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    (0..spec.clusters)
        .map(|_| {
            let mut c: Vec<f64> = (0..spec.vector_dim).map(|_| standard_normal(rng)).collect();
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                c.iter_mut().for_each(|x| *x /= n);
            } else {
                c[0] = 1.0;
            }
            c
        })
        .collect()
}

pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = derive_rng(seed, "synth");
    let centroids = unit_centroids(spec, &mut rng);
    let p_stay = spec.stay_probability();
    let g = spec.clusters;

    let mut domains = Vec::with_capacity(spec.domains);
    for d in 0..spec.domains {
        let tag = format!("domain_{d}");
        // items: cluster assigned round-robin, vector = centroid + noise
        let mut raw_items = Vec::with_capacity(spec.items_per_domain);
        let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); g];
        for i in 0..spec.items_per_domain {
            let c = i % g;
            let vec: Vec<f64> = centroids[c]
                .iter()
                .map(|&x| x + spec.noise * standard_normal(&mut rng))
                .collect();
            cluster_items[c].push(i);
            raw_items.push((format!("i{i}"), vec, c));
        }
        // user sequences: Markov chain over clusters, uniform item within
        let mut interactions = Vec::new();
        for u in 0..spec.users_per_domain {
            let mut cluster = rng.gen_range(0..g);
            for t in 0..spec.seq_len {
                let members = &cluster_items[cluster];
                let item = members[rng.gen_range(0..members.len())];
                interactions.push(Interaction {
                    user: format!("u{u}"),
                    item: raw_items[item].0.clone(),
                    timestamp: t as u64,
                    domain: tag.clone(),
                });
                if g > 1 && rng.gen::<f64>() >= p_stay {
                    // move to a uniformly chosen *other* cluster
                    let step = rng.gen_range(1..g);
                    cluster = (cluster + step) % g;
                }
            }
        }
        let store = InteractionStore::from_interactions(&interactions)?;
        let mut vectors = vec![Vec::new(); store.num_items()];
        let mut item_clusters = vec![0usize; store.num_items()];
        for (name, vec, c) in &raw_items {
            if let Some(v) = store.lookup_item(&tag, name) {
                vectors[v as usize] = vec.clone();
                item_clusters[v as usize] = *c;
            }
        }
        domains.push(SynthDomain {
            tag,
            store,
            vectors,
            item_clusters,
            raw_items,
        });
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        seed,
        domains,
        centroids,
    })
}

impl SynthCorpus {
    /// Emit `domain_<i>.tsv` and `domain_<i>_vectors.tsv` under `dir`.
    /// Returns (interactions path, vectors path) per domain. Float
    /// formatting uses Rust's shortest round-trip representation, so the
    /// files reproduce the in-memory vectors exactly.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| IdpError::io(dir, e))?;
        let mut paths = Vec::new();
        for (d, dom) in self.domains.iter().enumerate() {
            let inter_path = dir.join(format!("domain_{d}.tsv"));
            let mut out = String::new();
            let store = &dom.store;
            for u in 0..store.num_users() as u32 {
                let (_, user_name) = store.user_key(u);
                for e in store.events(u) {
                    let (_, item_name) = store.item_key(e.item);
                    let _ = writeln!(out, "{user_name}\t{item_name}\t{}\t{}", e.timestamp, dom.tag);
                }
            }
            fs::write(&inter_path, out).map_err(|e| IdpError::io(&inter_path, e))?;

            let vec_path = dir.join(format!("domain_{d}_vectors.tsv"));
            let mut out = String::new();
            for (name, vec, _) in &dom.raw_items {
                let joined: Vec<String> = vec.iter().map(|x| format!("{x}")).collect();
                let _ = writeln!(out, "{name}\t{}", joined.join(","));
            }
            fs::write(&vec_path, out).map_err(|e| IdpError::io(&vec_path, e))?;
            paths.push((inter_path, vec_path));
        }
        Ok(paths)
    }

    /// Fraction of consecutive pairs whose clusters match, measured over
    /// every generated sequence of one domain.
    pub fn measured_stay_frequency(&self, domain: usize) -> f64 {
        let dom = &self.domains[domain];
        let store = &dom.store;
        let mut same = 0usize;
        let mut total = 0usize;
        for u in 0..store.num_users() as u32 {
            let seq = store.sequence(u);
            for w in seq.windows(2) {
                total += 1;
                if dom.item_clusters[w[0] as usize] == dom.item_clusters[w[1] as usize] {
                    same += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            same as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            domains: 2,
            clusters: 4,
            items_per_domain: 40,
            users_per_domain: 50,
            seq_len: 10,
            concentration: 12.0,
            vector_dim: 8,
            noise: 0.05,
        }
    }

    #[test]
    fn zero_noise_items_share_cluster_vector() {
        let spec = SynthSpec {
            noise: 0.0,
            ..tiny_spec()
        };
        let corpus = synthesize(&spec, 1).unwrap();
        let dom = &corpus.domains[0];
        for (v, cluster) in dom.item_clusters.iter().enumerate() {
            assert_eq!(dom.vectors[v], corpus.centroids[*cluster]);
        }
    }

    #[test]
    fn infinite_concentration_stays_in_one_cluster() {
        let spec = SynthSpec {
            concentration: f64::INFINITY,
            ..tiny_spec()
        };
        let corpus = synthesize(&spec, 2).unwrap();
        for dom in &corpus.domains {
            for u in 0..dom.store.num_users() as u32 {
                let seq = dom.store.sequence(u);
                let c0 = dom.item_clusters[seq[0] as usize];
                assert!(seq.iter().all(|&v| dom.item_clusters[v as usize] == c0));
            }
        }
    }

    #[test]
    fn s1_measured_stay_frequency_within_tolerance() {
        let spec = SynthSpec::s1();
        let corpus = synthesize(&spec, 42).unwrap();
        let expected = spec.stay_probability();
        for d in 0..spec.domains {
            let measured = corpus.measured_stay_frequency(d);
            assert!(
                (measured - expected).abs() <= 0.05,
                "domain {d}: measured {measured:.4}, spec {expected:.4}"
            );
        }
    }

    #[test]
    fn degenerate_specs_error() {
        assert!(synthesize(&SynthSpec { clusters: 0, ..tiny_spec() }, 0).is_err());
        assert!(synthesize(&SynthSpec { items_per_domain: 0, ..tiny_spec() }, 0).is_err());
    }

    #[test]
    fn determinism_same_seed() {
        let a = synthesize(&tiny_spec(), 9).unwrap();
        let b = synthesize(&tiny_spec(), 9).unwrap();
        for (da, db) in a.domains.iter().zip(&b.domains) {
            assert_eq!(da.vectors, db.vectors);
            for u in 0..da.store.num_users() as u32 {
                assert_eq!(da.store.sequence(u), db.store.sequence(u));
            }
        }
    }

    #[test]
    fn written_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synthesize(&tiny_spec(), 5).unwrap();
        let paths = corpus.write_to(dir.path()).unwrap();
        let store = InteractionStore::ingest_tsv(&paths[0].0).unwrap();
        assert_eq!(store.num_users(), corpus.domains[0].store.num_users());
        assert_eq!(store.num_items(), corpus.domains[0].store.num_items());
    }
}
