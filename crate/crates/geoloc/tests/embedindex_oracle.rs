//! Retrieval correctness against a brute-force reference, over random
//! index contents.

use geoloc::embedindex::{Index, IndexEntry, RetrievalHit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_entries(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<IndexEntry> {
    (0..n)
        .map(|i| IndexEntry {
            id: format!("e{i}"),
            // Coarse grid values make exact distance ties likely, which is
            // what the tie-order contract needs exercised.
            vector: (0..dim).map(|_| rng.gen_range(-4..=4) as f32).collect(),
            payload: format!("clue {i}"),
        })
        .collect()
}

fn brute_force(entries: &[IndexEntry], q: &[f32], k: usize, d_t: f64) -> Vec<(String, f64)> {
    let mut scored: Vec<(usize, String, f64)> = entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let d = entry
                .vector
                .iter()
                .zip(q)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            (i, entry.id.clone(), d)
        })
        .filter(|(_, _, d)| *d <= d_t)
        .collect();
    scored.sort_by(|(ia, _, da), (ib, _, db)| da.partial_cmp(db).unwrap().then(ia.cmp(ib)));
    scored.truncate(k);
    scored.into_iter().map(|(_, id, d)| (id, d)).collect()
}

#[test]
fn query_matches_brute_force_on_random_indexes() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_260_214);
    for round in 0..100 {
        let dim = rng.gen_range(1..=16);
        let n = rng.gen_range(1..=200);
        let entries = random_entries(&mut rng, n, dim);
        let index = Index::build(entries.clone()).unwrap();

        for _ in 0..5 {
            let q: Vec<f32> = (0..dim).map(|_| rng.gen_range(-4..=4) as f32).collect();
            let k = rng.gen_range(1..=6);
            let d_t = rng.gen_range(1.0..=12.0);
            let got = index.query(&q, k, d_t).unwrap();
            let want = brute_force(&entries, &q, k, d_t);
            let got_pairs: Vec<(String, f64)> =
                got.iter().map(|h| (h.id.clone(), h.distance)).collect();
            assert_eq!(got_pairs, want, "round {round}, k={k}, d_t={d_t}");
        }
    }
}

#[test]
fn round_trip_preserves_query_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let entries = random_entries(&mut rng, 50, 8);
    let index = Index::build(entries).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    index.save(&path).unwrap();
    let loaded = Index::load(&path).unwrap();

    for _ in 0..20 {
        let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-4..=4) as f32).collect();
        assert_eq!(
            index.query(&q, 5, 20.0).unwrap(),
            loaded.query(&q, 5, 20.0).unwrap()
        );
    }
}

#[test]
fn threshold_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let entries = random_entries(&mut rng, 80, 8);
    let index = Index::build(entries).unwrap();
    let q: Vec<f32> = vec![0.0; 8];
    let mut previous = 0usize;
    for d_t in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let hits = index.query(&q, 100, d_t).unwrap();
        assert!(hits.len() >= previous, "threshold {d_t} shrank the result");
        previous = hits.len();
    }
}

#[test]
fn k_is_monotone_and_prefix_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let entries = random_entries(&mut rng, 60, 4);
    let index = Index::build(entries).unwrap();
    let q: Vec<f32> = vec![0.5; 4];
    let mut previous: Vec<RetrievalHit> = Vec::new();
    for k in 1..=10 {
        let hits = index.query(&q, k, 1e9).unwrap();
        assert!(hits.len() >= previous.len());
        assert_eq!(&hits[..previous.len()], &previous[..], "k={k} reordered the prefix");
        previous = hits;
    }
}
