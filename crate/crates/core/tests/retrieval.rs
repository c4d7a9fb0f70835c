mod common;

use std::collections::BTreeSet;

use pathwise_core::embedding::{cosine, Embedder, HashEmbedder};
use pathwise_core::kg::{Hop, KnowledgeGraph, Path};
use pathwise_core::retriever::{dynamic_beam_search, score_relation, QueryState, RetrieverConfig};

/// Random graph plus a planted two-hop path T → gold.a → M → gold.b → G.
fn planted(seed: u64) -> (KnowledgeGraph, Path) {
    let mut triples = common::random_triples(seed, 25, 60);
    triples.push(("n0".into(), "gold.a".into(), "M".into()));
    triples.push(("M".into(), "gold.b".into(), "G".into()));
    let g = KnowledgeGraph::from_triples(triples.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())));
    let gold = Path {
        topic: g.entity_id("n0").unwrap(),
        hops: vec![Hop::forward(g.relation_id("gold.a").unwrap()), Hop::forward(g.relation_id("gold.b").unwrap())],
        intermediates: vec![g.entity_id("M").unwrap()],
        terminal: g.entity_id("G").unwrap(),
    };
    (g, gold)
}

fn path_set(g: &KnowledgeGraph, gap: f64, beam: usize) -> BTreeSet<Path> {
    let e = HashEmbedder::new(64, 9).unwrap();
    let cfg = RetrieverConfig { beam_init: beam, gap_threshold: gap, max_hops: 2, ..Default::default() };
    dynamic_beam_search(g, "which gold path", &[g.entity_id("n0").unwrap()], &e, &cfg)
        .unwrap()
        .paths
        .into_iter()
        .map(|sp| sp.path)
        .collect()
}

#[test]
fn unbounded_gap_finds_planted_path_and_widening_only_adds() {
    for seed in 0..5 {
        let (g, gold) = planted(seed);
        let beam = g.relation_count() + 1;
        let full = path_set(&g, f64::INFINITY, beam);
        assert!(full.contains(&gold), "seed {seed}");
        let mut prev = BTreeSet::new();
        for gap in [0.0, 0.05, 0.2, 0.5, 1.0, f64::INFINITY] {
            let cur = path_set(&g, gap, beam);
            assert!(prev.is_subset(&cur), "seed {seed} gap {gap}");
            prev = cur;
        }
        assert_eq!(prev, full);
    }
}

#[test]
fn relation_ranking_matches_pairwise_cosine() {
    let g = KnowledgeGraph::from_triples([("A", "r", "B")]);
    let e = HashEmbedder::new(64, 2).unwrap();
    let topic = g.entity_id("A").unwrap();
    let text = QueryState::text(&g, "where was the author born", topic, &[]);
    let state = QueryState {
        question: "where was the author born".into(),
        topic,
        hops: Vec::new(),
        frontier: vec![topic],
        embedding: e.embed(&text).unwrap(),
    };
    let relations = [
        "people.person.place_of_birth",
        "book.author.works_written",
        "location.location.containedby",
        "film.film.directed_by",
        "people.person.nationality",
    ];
    let mut ours: Vec<(f64, &str)> = relations.iter().map(|r| (score_relation(&state, r, &e).unwrap(), *r)).collect();
    let mut oracle: Vec<(f64, &str)> =
        relations.iter().map(|r| (cosine(&e.embed(&text).unwrap(), &e.embed(r).unwrap()).unwrap(), *r)).collect();
    ours.sort_by(|a, b| b.0.total_cmp(&a.0));
    oracle.sort_by(|a, b| b.0.total_cmp(&a.0));
    assert_eq!(ours, oracle);
}
