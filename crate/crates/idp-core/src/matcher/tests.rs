use rand::Rng;

use super::*;
use crate::rng::derive_rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::randn(rows, cols, 1.0, &mut derive_rng(seed, "matcher.rand"))
}

/// Full-sort oracle with the same tie rule (similarity desc, index asc).
fn full_sort_oracle(query: &[f64], sources: &Matrix, m: usize, sim: Similarity) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = (0..sources.rows())
        .map(|i| Neighbor {
            source: i as u32,
            similarity: sim.eval(query, sources.row(i)),
        })
        .collect();
    all.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then(a.source.cmp(&b.source))
    });
    all.truncate(m);
    all
}

#[test]
fn retrieve_all_when_m_exceeds_sources() {
    let sources = random_matrix(4, 3, 1);
    let query = vec![1.0, 0.0, 0.0];
    let got = retrieve_exact(&query, &sources, 10, Similarity::Cosine).unwrap();
    assert_eq!(got.len(), 4);
    for w in got.windows(2) {
        assert!(w[0].similarity >= w[1].similarity);
    }
}

#[test]
fn query_equal_to_source_ranks_first_with_unit_cosine() {
    let sources = random_matrix(8, 5, 2);
    let query = sources.row(3).to_vec();
    let got = retrieve_exact(&query, &sources, 2, Similarity::Cosine).unwrap();
    assert_eq!(got[0].source, 3);
    assert!((got[0].similarity - 1.0).abs() < 1e-12);
}

#[test]
fn retrieval_matches_full_sort_oracle() {
    let mut rng = derive_rng(3, "retrieve.oracle");
    for trial in 0..30 {
        let n = rng.gen_range(1..60);
        let d = rng.gen_range(2..8);
        let sources = random_matrix(n, d, 100 + trial);
        let query: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let m = rng.gen_range(1..=n + 2);
        for sim in [Similarity::Cosine, Similarity::Dot] {
            let got = retrieve_exact(&query, &sources, m, sim).unwrap();
            let expected = full_sort_oracle(&query, &sources, m, sim);
            assert_eq!(got.len(), expected.len());
            for (g, e) in got.iter().zip(&expected) {
                assert_eq!(g.source, e.source);
                assert_eq!(g.similarity.to_bits(), e.similarity.to_bits());
            }
        }
    }
}

#[test]
fn exact_ties_prefer_lower_index() {
    // rows 1 and 3 are identical
    let sources = Matrix::from_rows(&[
        vec![0.0, 1.0],
        vec![1.0, 0.0],
        vec![0.5, 0.5],
        vec![1.0, 0.0],
    ]);
    let got = retrieve_exact(&[1.0, 0.0], &sources, 2, Similarity::Cosine).unwrap();
    assert_eq!(got[0].source, 1);
    assert_eq!(got[1].source, 3);
}

#[test]
fn aggregation_m1_is_identity() {
    let sources = random_matrix(5, 4, 4);
    let assignment = NeighborAssignment {
        rows: vec![(0, vec![Neighbor { source: 2, similarity: 0.9 }])],
    };
    let gen = generate_embeddings(&assignment, &sources).unwrap();
    assert_eq!(gen.embeddings.row(0), sources.row(2));
    assert_eq!(gen.provenance[0].weights, vec![1.0]);
}

#[test]
fn aggregation_weights_hand_case() {
    let neighbors = vec![
        Neighbor { source: 0, similarity: 0.6 },
        Neighbor { source: 1, similarity: 0.2 },
    ];
    let (w, fb) = aggregation_weights(&neighbors);
    assert!((w[0] - 0.75).abs() < 1e-12);
    assert!((w[1] - 0.25).abs() < 1e-12);
    assert_eq!(fb, Fallback::None);
}

#[test]
fn aggregation_equal_similarities_give_centroid() {
    let sources = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let neighbors: Vec<Neighbor> = (0..3)
        .map(|i| Neighbor { source: i, similarity: 0.5 })
        .collect();
    let assignment = NeighborAssignment { rows: vec![(7, neighbors)] };
    let gen = generate_embeddings(&assignment, &sources).unwrap();
    let row = gen.embeddings.row(0);
    assert!((row[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((row[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn aggregation_all_negative_uses_uniform_fallback() {
    let neighbors = vec![
        Neighbor { source: 0, similarity: -0.3 },
        Neighbor { source: 1, similarity: -0.9 },
    ];
    let (w, fb) = aggregation_weights(&neighbors);
    assert_eq!(fb, Fallback::UniformNonpositive);
    assert_eq!(w, vec![0.5, 0.5]);
}

#[test]
fn aggregation_properties_random_cases() {
    let mut rng = derive_rng(5, "agg.prop");
    let sources = random_matrix(20, 6, 6);
    for _ in 0..500 {
        let m = rng.gen_range(1..8);
        let neighbors: Vec<Neighbor> = (0..m)
            .map(|_| Neighbor {
                source: rng.gen_range(0..20),
                similarity: rng.gen::<f64>() * 2.0 - 1.0,
            })
            .collect();
        let (weights, fallback) = aggregation_weights(&neighbors);
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(weights.iter().all(|&w| w >= 0.0));
        let assignment = NeighborAssignment { rows: vec![(0, neighbors.clone())] };
        let gen = generate_embeddings(&assignment, &sources).unwrap();
        // convex hull containment per coordinate
        for j in 0..6 {
            let coords: Vec<f64> = neighbors
                .iter()
                .map(|n| sources.get(n.source as usize, j))
                .collect();
            let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = gen.embeddings.get(0, j);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "fallback {fallback:?}");
        }
    }
}

#[test]
fn aggregation_out_of_range_neighbor_errors() {
    let sources = random_matrix(3, 2, 7);
    let assignment = NeighborAssignment {
        rows: vec![(0, vec![Neighbor { source: 9, similarity: 0.5 }])],
    };
    assert!(matches!(
        generate_embeddings(&assignment, &sources).unwrap_err(),
        crate::IdpError::ItemOutOfRange { .. }
    ));
}

#[test]
fn permuting_sources_only_affects_exact_ties() {
    let mut rng = derive_rng(8, "perm");
    let sources = random_matrix(30, 4, 9);
    let query: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
    let base = retrieve_exact(&query, &sources, 5, Similarity::Cosine).unwrap();
    // reverse the source order
    let reversed_rows: Vec<Vec<f64>> = (0..30).rev().map(|i| sources.row(i).to_vec()).collect();
    let reversed = Matrix::from_rows(&reversed_rows);
    let got = retrieve_exact(&query, &reversed, 5, Similarity::Cosine).unwrap();
    // map back: new index i corresponds to old 29 - i
    for (b, g) in base.iter().zip(&got) {
        assert_eq!(b.source, 29 - g.source);
        assert!((b.similarity - g.similarity).abs() < 1e-12);
    }
}

// ---- HNSW ----

#[test]
fn hnsw_singleton_returns_the_source() {
    let sources = random_matrix(1, 4, 10);
    let index = AnnIndex::build(&sources, HnswParams::default(), Similarity::Cosine, 0).unwrap();
    let got = index.search(&[1.0, 0.0, 0.0, 0.0], 3).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].source, 0);
}

#[test]
fn hnsw_unfrozen_query_errors() {
    let mut index = AnnIndex::new(3, HnswParams::default(), Similarity::Cosine, 0);
    index.insert(&[1.0, 0.0, 0.0]).unwrap();
    assert!(matches!(
        index.search(&[1.0, 0.0, 0.0], 1).unwrap_err(),
        crate::IdpError::IndexNotFrozen
    ));
    index.freeze();
    assert!(index.search(&[1.0, 0.0, 0.0], 1).is_ok());
    assert!(index.insert(&[0.0, 1.0, 0.0]).is_err());
}

fn mean_recall(index: &AnnIndex, sources: &Matrix, queries: &Matrix, m: usize, ef: usize) -> f64 {
    let mut total = 0.0;
    for qi in 0..queries.rows() {
        let q = queries.row(qi);
        let approx = index.search_with_ef(q, m, ef).unwrap();
        let exact = full_sort_oracle(q, sources, m, Similarity::Cosine);
        let exact_ids: std::collections::HashSet<u32> = exact.iter().map(|n| n.source).collect();
        let hits = approx.iter().filter(|n| exact_ids.contains(&n.source)).count();
        total += hits as f64 / m as f64;
    }
    total / queries.rows() as f64
}

#[test]
fn hnsw_recall_on_small_instance() {
    let sources = random_matrix(2000, 16, 11);
    let queries = random_matrix(100, 16, 12);
    let index = AnnIndex::build(&sources, HnswParams::default(), Similarity::Cosine, 1).unwrap();
    let recall = mean_recall(&index, &sources, &queries, 10, 100);
    assert!(recall >= 0.95, "recall {recall}");
    assert!(index.is_connected_layer0());
}

#[test]
fn hnsw_recall_nondecreasing_in_beam_width() {
    let sources = random_matrix(1500, 12, 13);
    let queries = random_matrix(80, 12, 14);
    let index = AnnIndex::build(&sources, HnswParams::default(), Similarity::Cosine, 2).unwrap();
    let mut prev = 0.0;
    for ef in [1usize, 5, 20, 100] {
        let r = mean_recall(&index, &sources, &queries, 10, ef);
        assert!(r >= prev - 1e-12, "ef {ef}: recall {r} < {prev}");
        prev = r;
    }
    assert!(prev >= 0.95);
}

#[test]
fn hnsw_build_is_deterministic_and_serializes() {
    let sources = random_matrix(300, 8, 15);
    let a = AnnIndex::build(&sources, HnswParams::default(), Similarity::Cosine, 7).unwrap();
    let b = AnnIndex::build(&sources, HnswParams::default(), Similarity::Cosine, 7).unwrap();
    let queries = random_matrix(20, 8, 16);
    for qi in 0..queries.rows() {
        let ra = a.search(queries.row(qi), 5).unwrap();
        let rb = b.search(queries.row(qi), 5).unwrap();
        assert_eq!(
            ra.iter().map(|n| n.source).collect::<Vec<_>>(),
            rb.iter().map(|n| n.source).collect::<Vec<_>>()
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.ann");
    a.write_to(&path).unwrap();
    let loaded = AnnIndex::read_from(&path).unwrap();
    assert!(loaded.is_frozen());
    for qi in 0..queries.rows() {
        let ra = a.search(queries.row(qi), 5).unwrap();
        let rl = loaded.search(queries.row(qi), 5).unwrap();
        assert_eq!(
            ra.iter().map(|n| n.source).collect::<Vec<_>>(),
            rl.iter().map(|n| n.source).collect::<Vec<_>>()
        );
    }
}

#[test]
fn splice_rows_replaces_targets_only() {
    let base = random_matrix(6, 3, 17);
    let gen = GeneratedEmbeddings {
        targets: vec![1, 4],
        embeddings: Matrix::from_rows(&[vec![9.0, 9.0, 9.0], vec![7.0, 7.0, 7.0]]),
        provenance: vec![],
    };
    let out = splice_rows(&base, &gen).unwrap();
    assert_eq!(out.row(1), &[9.0, 9.0, 9.0]);
    assert_eq!(out.row(4), &[7.0, 7.0, 7.0]);
    assert_eq!(out.row(0), base.row(0));
    assert_eq!(out.row(5), base.row(5));
}

#[test]
fn assignment_tsv_format() {
    let assignment = NeighborAssignment {
        rows: vec![
            (0, vec![Neighbor { source: 3, similarity: 0.75 }, Neighbor { source: 1, similarity: 0.5 }]),
            (1, vec![Neighbor { source: 0, similarity: 1.0 }]),
        ],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("assign.tsv");
    assignment.write_tsv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "0\t3:0.750000,1:0.500000\n1\t0:1.000000\n");
}
