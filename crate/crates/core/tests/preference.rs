mod common;

use std::collections::BTreeSet;

use pathwise_core::embedding::{cosine, Embedder, Embedding, HashEmbedder};
use pathwise_core::kg::{KnowledgeGraph, ARROW};
use pathwise_core::preference::{
    build_preference_pairs, confidence, pair_loss, pair_loss_gradient, preference_loss, response_length, weight,
    PreferenceHyper, PreferencePair, STOP,
};
use pathwise_core::sampler::{sample_training_paths, ElbowRule, KMeansConfig, SamplerConfig};
use pathwise_core::Result;
use proptest::prelude::*;

fn kirk_graph() -> KnowledgeGraph {
    KnowledgeGraph::from_triples([
        ("Kirk Douglas", "people.person.children", "Michael Douglas"),
        ("Kirk Douglas", "people.person.children", "Joel Douglas"),
        ("Michael Douglas", "film.producer.films", "One Flew Over the Cuckoo's Nest"),
        ("Joel Douglas", "film.film.costume_designed_by", "One Flew Over the Cuckoo's Nest"),
    ])
}

#[test]
fn producer_relation_is_chosen_over_costume_relation() {
    let g = kirk_graph();
    let e = HashEmbedder::new(128, 42).unwrap();
    let run = sample_training_paths(
        &g,
        "Which films did the children of Kirk Douglas work on as film producers?",
        g.entity_id("Kirk Douglas").unwrap(),
        g.entity_id("One Flew Over the Cuckoo's Nest").unwrap(),
        &e,
        &SamplerConfig::default(),
    )
    .unwrap();
    let pairs = build_preference_pairs(&g, &run, &e, &PreferenceHyper::default()).unwrap();
    let hop = pairs
        .iter()
        .find(|p| p.current_path == "Kirk Douglas → people.person.children" && p.chosen != STOP)
        .expect("pair after the children hop");
    assert_eq!(hop.chosen, "film.producer.films");
    assert_eq!(hop.rejected, "film.film.costume_designed_by");
    let stop: Vec<&PreferencePair> = pairs.iter().filter(|p| p.chosen == STOP).collect();
    assert_eq!(stop.len(), 1);
    assert_eq!(stop[0].rejected, "film.film.costume_designed_by");
    // The shared first hop yields no pair.
    assert!(pairs.iter().all(|p| p.current_path != "Kirk Douglas"));
    assert_eq!(pairs.len(), 2);
}

#[test]
fn single_cluster_gives_no_pairs() {
    let g = KnowledgeGraph::from_triples([("A", "r", "B")]);
    let e = HashEmbedder::new(32, 1).unwrap();
    let run = sample_training_paths(
        &g,
        "q",
        g.entity_id("A").unwrap(),
        g.entity_id("B").unwrap(),
        &e,
        &SamplerConfig::default(),
    )
    .unwrap();
    assert_eq!(run.clusters.as_ref().unwrap().chosen_k, 1);
    assert!(build_preference_pairs(&g, &run, &e, &PreferenceHyper::default()).unwrap().is_empty());
}

/// Planted vectors for whole-path texts; hashed vectors for everything else.
struct PlantedEmbedder {
    planted: Vec<(String, Embedding)>,
    fallback: HashEmbedder,
}

impl Embedder for PlantedEmbedder {
    fn dimension(&self) -> usize {
        self.fallback.dimension()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| match self.planted.iter().find(|(k, _)| k == t) {
                Some((_, v)) => Ok(v.clone()),
                None => self.fallback.embed(t),
            })
            .collect()
    }
}

#[test]
fn pairs_match_position_wise_cross_product_on_three_clusters() {
    let mut triples = Vec::new();
    for (group, n) in [("a", 3), ("b", 2), ("c", 2)] {
        for i in 0..n {
            triples.push(("T".to_string(), format!("{group}.first.{i}"), format!("{group}{i}")));
            triples.push((format!("{group}{i}"), format!("{group}.second.{}", i % 2), "A".to_string()));
        }
    }
    triples.push(("T".into(), "a.first.0".into(), "x".into()));
    triples.push(("x".into(), "b.second.0".into(), "A".into()));
    let g = KnowledgeGraph::from_triples(triples.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())));
    let (t, a) = (g.entity_id("T").unwrap(), g.entity_id("A").unwrap());
    let candidates = g.enumerate_shortest_paths(t, a, Default::default()).unwrap();
    let dim = 32;
    let points = common::blobs(8, dim, 3, &[4, 2, 2], 0.02);
    let mut used = [0usize; 3];
    let mut planted: Vec<(String, Embedding)> = candidates
        .iter()
        .map(|p| {
            let first = g.hop_label(p.hops[0]);
            let group = ["a.", "b.", "c."].iter().position(|pre| first.starts_with(pre)).unwrap();
            let flat = [0, 4, 6][group] + used[group];
            used[group] += 1;
            (g.serialize_path(p), Embedding::new(points[flat].clone()).unwrap())
        })
        .collect();
    assert_eq!(used, [4, 2, 2]);
    let question = "which a path";
    planted.push((question.to_string(), Embedding::new(points[0].clone()).unwrap()));
    let e = PlantedEmbedder { planted, fallback: HashEmbedder::new(dim, 4).unwrap() };
    let cfg = SamplerConfig {
        kmeans: KMeansConfig { k_max: 5, elbow: ElbowRule::MaxCurvature, ..Default::default() },
        ..Default::default()
    };
    let run = sample_training_paths(&g, question, t, a, &e, &cfg).unwrap();
    let clusters = run.clusters.as_ref().unwrap();
    assert_eq!(clusters.chosen_k, 3);

    let hyper = PreferenceHyper { max_negatives: 100, ..Default::default() };
    let pairs = build_preference_pairs(&g, &run, &e, &hyper).unwrap();

    // Oracle: every distinct kept relation sequence, every position, crossed
    // with the distinct relations other clusters use there.
    let rep = clusters.representative.unwrap();
    let label_seq =
        |i: usize| -> Vec<String> { run.candidates[i].hops.iter().map(|h| g.hop_label(*h).into_owned()).collect() };
    let kept: BTreeSet<Vec<String>> =
        (0..run.candidates.len()).filter(|&i| clusters.assignments[i] == rep).map(label_seq).collect();
    let others: Vec<Vec<String>> =
        (0..run.candidates.len()).filter(|&i| clusters.assignments[i] != rep).map(label_seq).collect();
    let mut want = BTreeSet::new();
    for seq in &kept {
        for pos in 0..seq.len() {
            let ctx =
                std::iter::once("T".to_string()).chain(seq[..pos].iter().cloned()).collect::<Vec<_>>().join(ARROW);
            for o in &others {
                if o[pos] != seq[pos] {
                    want.insert((ctx.clone(), seq[pos].clone(), o[pos].clone()));
                }
            }
        }
    }
    let got_relations: BTreeSet<_> = pairs
        .iter()
        .filter(|p| p.chosen != STOP)
        .map(|p| (p.current_path.clone(), p.chosen.clone(), p.rejected.clone()))
        .collect();
    assert_eq!(got_relations.len(), pairs.iter().filter(|p| p.chosen != STOP).count());
    assert_eq!(got_relations, want);

    // One STOP pair per kept sequence, rejecting the final relation closest to c*.
    let centroid = &clusters.centroids[rep];
    let stops: Vec<&PreferencePair> = pairs.iter().filter(|p| p.chosen == STOP).collect();
    assert_eq!(stops.len(), kept.len());
    for s in stops {
        let seq: Vec<&str> = s.current_path.split(ARROW).skip(1).collect();
        let base = std::iter::once("T").chain(seq[..seq.len() - 1].iter().copied()).collect::<Vec<_>>().join(ARROW);
        let finals: BTreeSet<&String> = others.iter().map(|o| o.last().unwrap()).collect();
        let best = finals
            .iter()
            .map(|r| {
                let v = e.embed(&format!("{base}{ARROW}{r}")).unwrap();
                (1.0 - cosine(&v, centroid).unwrap(), (*r).clone())
            })
            .min_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)))
            .unwrap();
        assert_eq!(s.rejected, best.1);
    }

    // Scores follow the closed forms.
    for p in &pairs {
        assert_eq!(p.s_chosen, (-hyper.alpha * p.u_chosen).exp());
        assert_eq!(p.s_rejected, 1.0 - (-hyper.alpha * p.u_rejected).exp());
        assert_eq!(p.w_chosen, hyper.beta * (1.0 + 0.5 * (p.s_chosen - 0.5)));
        assert_eq!(p.norm_w_rejected, p.w_rejected / response_length(&p.rejected) as f64);
        assert_ne!(p.chosen, p.rejected);
    }
}

#[test]
fn loss_gradient_matches_central_differences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let (wp, wn) = (rng.gen_range(0.75..1.25), rng.gen_range(0.75..1.25));
        let (lp, ln) = (rng.gen_range(-8.0..0.0), rng.gen_range(-8.0..0.0));
        let gamma = rng.gen_range(0.0..1.0);
        let h = 1e-5;
        let fd_p = (pair_loss(wp, lp + h, wn, ln, gamma) - pair_loss(wp, lp - h, wn, ln, gamma)) / (2.0 * h);
        let fd_n = (pair_loss(wp, lp, wn, ln + h, gamma) - pair_loss(wp, lp, wn, ln - h, gamma)) / (2.0 * h);
        let (gp, gn) = pair_loss_gradient(wp, lp, wn, ln, gamma);
        assert!((gp - fd_p).abs() <= 1e-5 * gp.abs().max(1e-8), "{gp} vs {fd_p}");
        assert!((gn - fd_n).abs() <= 1e-5 * gn.abs().max(1e-8), "{gn} vs {fd_n}");
    }
}

#[test]
fn preference_loss_uses_stored_weights() {
    let pair = PreferencePair {
        question: "q".into(),
        current_path: "A".into(),
        chosen: "r1".into(),
        rejected: "r2".into(),
        u_chosen: 0.0,
        u_rejected: 0.0,
        s_chosen: 1.0,
        s_rejected: 0.0,
        w_chosen: 1.2,
        w_rejected: 0.8,
        norm_w_chosen: 1.2,
        norm_w_rejected: 0.8,
    };
    let policy = |_: &str, _: &str, r: &str| if r == "r1" { -1.0 } else { -3.0 };
    let loss = preference_loss(&[pair], &policy, 0.3).unwrap();
    let want = -(1.0 / (1.0 + (-0.9f64).exp())).ln();
    assert!((loss - want).abs() < 1e-12);
}

proptest! {
    #[test]
    fn confidence_is_monotone_in_distance(u in 0.0f64..2.0, du in 1e-6f64..1.0, alpha in 0.01f64..10.0) {
        prop_assert!(confidence(u + du, alpha, true) < confidence(u, alpha, true));
        prop_assert!(confidence(u + du, alpha, false) > confidence(u, alpha, false));
    }

    #[test]
    fn weights_stay_in_band(u in 0.0f64..2.0, alpha in 0.01f64..10.0, beta in 0.01f64..10.0, preferred: bool) {
        let w = weight(confidence(u, alpha, preferred), beta).unwrap();
        prop_assert!(w >= 0.75 * beta - 1e-12 && w <= 1.25 * beta + 1e-12);
    }

    #[test]
    fn loss_decreases_in_chosen_logprob(lp in -10.0f64..0.0, d in 1e-3f64..1.0, ln in -10.0f64..0.0) {
        prop_assert!(pair_loss(1.0, lp + d, 1.0, ln, 0.3) < pair_loss(1.0, lp, 1.0, ln, 0.3));
    }
}
