use std::collections::HashSet;

use proptest::prelude::*;

use ppcc::graph::FusionWeights;
use ppcc::{
    build_graph, consensus_evidence, consensus_update, cosine_affinity, generate, linear_diffusion_update, mean_ap,
    propagate, propagate_with, recall_at_k, validate_dataset, BeliefState, Channel, Dataset, GraphParams, NodeRef,
    PropagationGraph, PropagationParams, Schedule, Setting, SynthConfig, UpdateOrder,
};

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn small_synth() -> impl Strategy<Value = SynthConfig> {
    (2usize..5, 0usize..20, 1usize..3, 2usize..6, 1usize..4, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.6, any::<u64>()).prop_map(
        |(c, extra, movies, dim, max_len, q, drift, rho, seed)| SynthConfig {
            num_classes: c,
            num_tracklets: c * movies + extra,
            num_movies: movies,
            num_distractors: 2,
            face_dim: dim,
            body_dim: dim + 1,
            min_len: 1,
            max_len,
            face_visible_prob: q,
            body_drift: drift,
            noise: 0.3,
            others_fraction: rho,
            seed,
            ..SynthConfig::default()
        },
    )
}

/// A hand-made graph over `m` tracklets and `c` portraits plus a belief state
/// in which some tracklets are untouched.
#[derive(Debug, Clone)]
struct Scenario {
    c: usize,
    candidates: Vec<Vec<(NodeRef, f64)>>,
    scores: Vec<Vec<f64>>,
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (2usize..6, 1usize..8).prop_flat_map(|(c, m)| {
        let nodes = c + m;
        let edges = prop::collection::vec(prop::collection::vec((0..nodes, 0.01f64..1.0), 0..6), m);
        let scores = prop::collection::vec(
            prop_oneof![Just(vec![0.0; c]), prop::collection::vec(0.0f64..1.0, c)],
            m,
        );
        (Just(c), edges, scores).prop_map(move |(c, edges, scores)| {
            let candidates = edges
                .into_iter()
                .enumerate()
                .map(|(k, list)| {
                    let mut seen = HashSet::new();
                    list.into_iter()
                        .map(|(id, a)| (NodeRef::from_id(id as u32, c), a))
                        .filter(|(n, _)| *n != NodeRef::Tracklet(k as u32) && seen.insert(*n))
                        .collect()
                })
                .collect();
            Scenario { c, candidates, scores }
        })
    })
}

impl Scenario {
    fn graph(&self) -> PropagationGraph {
        let params = GraphParams { knn: 64, ..GraphParams::default() };
        PropagationGraph::from_affinities(self.c, params, self.candidates.clone()).unwrap()
    }

    fn state(&self) -> BeliefState {
        BeliefState::from_scores(self.c, self.scores.clone()).unwrap()
    }

    /// Relabels class `c` as `perm[c]` in portraits and belief vectors.
    fn permuted(&self, perm: &[usize]) -> Scenario {
        let candidates = self
            .candidates
            .iter()
            .map(|l| {
                l.iter()
                    .map(|&(n, a)| match n {
                        NodeRef::Portrait(c) => (NodeRef::Portrait(perm[c as usize] as u32), a),
                        t => (t, a),
                    })
                    .collect()
            })
            .collect();
        let scores = self.scores.iter().map(|v| permute(v, perm)).collect();
        Scenario { c: self.c, candidates, scores }
    }
}

fn permute(v: &[f64], perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (c, &x) in v.iter().enumerate() {
        out[perm[c]] = x;
    }
    out
}

fn scenario_with_perm() -> impl Strategy<Value = (Scenario, Vec<usize>)> {
    scenario().prop_flat_map(|s| {
        let perm = Just((0..s.c).collect::<Vec<_>>()).prop_shuffle();
        (Just(s), perm)
    })
}

/// Copy of `ds` with the instance rows of every tracklet in reverse order.
fn reverse_instances(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for t in &ds.tracklets {
        let rows: Vec<usize> = t.rows().collect();
        for (dst, &src) in rows.iter().zip(rows.iter().rev()) {
            for (from, to) in [(&ds.face, &mut out.face), (&ds.body, &mut out.body)] {
                if from.is_present(src) {
                    to.set_row(*dst, from.raw_row(src)).unwrap();
                } else {
                    to.clear_row(*dst);
                }
            }
        }
    }
    out
}

fn neighbor_set(g: &PropagationGraph, k: usize) -> Vec<(NodeRef, u64)> {
    let mut v: Vec<_> = g.neighbors(k).iter().map(|n| (n.node, n.affinity.to_bits())).collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(eta in prop::collection::vec(-1.0f64..1.0, 1..8), shift in -5.0f64..5.0, t in 0.01f64..2.0) {
        let a = consensus_update(&eta, t);
        let shifted: Vec<f64> = eta.iter().map(|x| x + shift).collect();
        let b = consensus_update(&shifted, t);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_sums_to_one_and_keeps_argmax(eta in prop::collection::vec(0.0f64..1.0, 1..8), t in 0.001f64..5.0) {
        let p = consensus_update(&eta, t);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let top = argmax(&eta);
        if eta.iter().filter(|&&x| x == eta[top]).count() == 1 {
            prop_assert_eq!(argmax(&p), top);
        }
        prop_assert!(p[top] >= p.iter().copied().fold(0.0, f64::max) - 1e-15);
    }

    #[test]
    fn alpha_sums_to_one(s in scenario()) {
        let g = s.graph();
        for k in 0..g.num_tracklets() {
            let n = g.neighbors(k);
            if !n.is_empty() {
                prop_assert!((n.iter().map(|x| x.alpha).sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn class_permutation_commutes_with_updates((s, perm) in scenario_with_perm(), top_k in 1usize..4, t in 0.05f64..1.0) {
        let (g, st) = (s.graph(), s.state());
        let p = s.permuted(&perm);
        let (gp, stp) = (p.graph(), p.state());
        for k in 0..g.num_tracklets() {
            let e = consensus_evidence(k, &g, &st, top_k);
            let ep = consensus_evidence(k, &gp, &stp, top_k);
            prop_assert_eq!(permute(&e.eta, &perm), ep.eta.clone());
            prop_assert_eq!(e.touched, ep.touched);
            let u = permute(&consensus_update(&e.eta, t), &perm);
            let up = consensus_update(&ep.eta, t);
            for (a, b) in u.iter().zip(&up) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert_eq!(permute(&linear_diffusion_update(k, &g, &st), &perm), linear_diffusion_update(k, &gp, &stp));
        }
    }

    #[test]
    fn linear_diffusion_preserves_mass(s in scenario()) {
        let (g, st) = (s.graph(), s.state());
        for k in 0..g.num_tracklets() {
            let out: f64 = linear_diffusion_update(k, &g, &st).iter().sum();
            let n = g.neighbors(k);
            let expected: f64 = if n.is_empty() {
                st.prob(k).iter().sum()
            } else {
                n.iter().map(|x| x.alpha * (0..s.c).map(|c| st.node_prob(x.node, c)).sum::<f64>()).sum()
            };
            prop_assert!((out - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn evidence_is_bounded_and_untouched_iff_zero(s in scenario(), top_k in 1usize..4) {
        let (g, st) = (s.graph(), s.state());
        for k in 0..g.num_tracklets() {
            let e = consensus_evidence(k, &g, &st, top_k);
            prop_assert!(e.eta.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert_eq!(e.touched, e.eta.iter().any(|&x| x != 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_datasets_are_valid_and_deterministic(cfg in small_synth()) {
        let ds = generate(&cfg).unwrap();
        prop_assert_eq!(validate_dataset(&ds), vec![]);
        prop_assert_eq!(ds.num_tracklets(), cfg.num_tracklets);
        let again = generate(&cfg).unwrap();
        prop_assert_eq!(ds.face.to_bytes(), again.face.to_bytes());
        prop_assert_eq!(ds.body.to_bytes(), again.body.to_bytes());
        prop_assert_eq!(ds.tracklets, again.tracklets);
    }

    #[test]
    fn graph_edges_are_unique_normalized_and_above_floor(cfg in small_synth(), knn in 1usize..8, floor in 0.0f64..0.5) {
        let ds = generate(&cfg).unwrap();
        let params = GraphParams { knn, floor, ..GraphParams::default() };
        let g = build_graph(&ds, &params).unwrap();
        for k in 0..g.num_tracklets() {
            let n = g.neighbors(k);
            prop_assert!(n.len() <= knn);
            let unique: HashSet<_> = n.iter().map(|x| x.node).collect();
            prop_assert_eq!(unique.len(), n.len());
            prop_assert!(!unique.contains(&NodeRef::Tracklet(k as u32)));
            prop_assert!(n.iter().all(|x| x.affinity > 0.0 && x.affinity >= floor));
            if !n.is_empty() {
                prop_assert!((n.iter().map(|x| x.alpha).sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn stored_affinity_is_the_best_instance_pair(cfg in small_synth()) {
        let ds = generate(&cfg).unwrap();
        let params = GraphParams { knn: 1000, fusion: None, ..GraphParams::default() };
        let g = build_graph(&ds, &params).unwrap();
        let rows = |node: NodeRef, ch: Channel| -> Vec<usize> {
            match node {
                NodeRef::Portrait(c) => {
                    let p = ds.portrait_of(c as usize).unwrap();
                    match ch {
                        Channel::Face => vec![p.face_row as usize],
                        Channel::Body => p.body_row.map(|r| r as usize).into_iter().collect(),
                    }
                }
                NodeRef::Tracklet(j) => ds.tracklets[j as usize].rows().collect(),
            }
        };
        for k in 0..g.num_tracklets() {
            for n in g.neighbors(k) {
                let ch = if matches!(n.node, NodeRef::Portrait(_)) { Channel::Face } else { Channel::Body };
                let store = ds.store(ch);
                let mut best = f64::NEG_INFINITY;
                for a in rows(NodeRef::Tracklet(k as u32), ch) {
                    for b in rows(n.node, ch) {
                        if let (Some(x), Some(y)) = (store.row(a), store.row(b)) {
                            best = best.max(cosine_affinity(x, y).unwrap());
                        }
                    }
                }
                prop_assert!((n.affinity - best).abs() <= 1e-12, "{} vs {best}", n.affinity);
                let (a, b) = (n.anchor.0 as usize, n.anchor.1 as usize);
                let at = cosine_affinity(store.row(a).unwrap(), store.row(b).unwrap()).unwrap();
                prop_assert!((at - n.affinity).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn instance_order_does_not_change_the_graph(cfg in small_synth(), fused in any::<bool>()) {
        let ds = generate(&cfg).unwrap();
        let params = GraphParams { fusion: fused.then(FusionWeights::default), ..GraphParams::default() };
        let a = build_graph(&ds, &params).unwrap();
        let b = build_graph(&reverse_instances(&ds), &params).unwrap();
        for k in 0..a.num_tracklets() {
            prop_assert_eq!(neighbor_set(&a, k), neighbor_set(&b, k));
        }
    }

    #[test]
    fn larger_k_keeps_existing_neighbors(cfg in small_synth(), k1 in 1usize..6, extra in 0usize..6) {
        let ds = generate(&cfg).unwrap();
        let small = build_graph(&ds, &GraphParams { knn: k1, ..GraphParams::default() }).unwrap();
        let large = build_graph(&ds, &GraphParams { knn: k1 + extra, ..GraphParams::default() }).unwrap();
        for k in 0..small.num_tracklets() {
            let big: HashSet<_> = large.neighbors(k).iter().map(|n| n.node).collect();
            prop_assert!(small.neighbors(k).iter().all(|n| big.contains(&n.node)));
        }
    }

    #[test]
    fn propagation_keeps_simplex_and_frozen_set(
        cfg in small_synth(),
        schedule in prop_oneof![Just(Schedule::None), Just(Schedule::STEP), Just(Schedule::THRESHOLD)],
        sync in any::<bool>(),
        top_k in 1usize..3,
    ) {
        let ds = generate(&cfg).unwrap();
        let g = build_graph(&ds, &GraphParams::default()).unwrap();
        let order = if sync { UpdateOrder::Synchronous } else { UpdateOrder::Sequential };
        let params = PropagationParams { schedule, order, top_k, ..PropagationParams::default() };
        let mut prev: Option<BeliefState> = None;
        let mut ok = true;
        let run = propagate_with(&g, &params, |s, _| {
            for k in 0..s.num_tracklets() {
                let sum: f64 = s.prob(k).iter().sum();
                if s.is_touched(k) {
                    ok &= (sum - 1.0).abs() <= 1e-9 && s.prob(k).iter().all(|&x| x >= 0.0);
                } else {
                    ok &= s.prob(k).iter().all(|&x| x == 0.0) && !s.is_frozen(k);
                }
                if let Some(p) = &prev {
                    if p.is_frozen(k) {
                        ok &= s.is_frozen(k) && s.prob(k) == p.prob(k);
                    }
                }
            }
            prev = Some(s.clone());
        })
        .unwrap();
        prop_assert!(ok);
        let again = propagate(&g, &params).unwrap();
        prop_assert_eq!(run.state.to_bytes(), again.state.to_bytes());
    }

    #[test]
    fn ap_ignores_monotone_rescaling(cfg in small_synth(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let ds = generate(&cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Vec<f64>> = (0..ds.num_tracklets())
            .map(|_| (0..ds.num_classes()).map(|_| rng.random_range(1..20) as f64 / 20.0).collect())
            .collect();
        let squashed: Vec<Vec<f64>> = raw.iter().map(|v| v.iter().map(|&x| x * x * x + 0.5 * x).collect()).collect();
        let a = BeliefState::from_scores(ds.num_classes(), raw).unwrap();
        let b = BeliefState::from_scores(ds.num_classes(), squashed).unwrap();
        for setting in [Setting::In, Setting::Across] {
            let (ma, mb) = (mean_ap(&a, &ds, setting).unwrap(), mean_ap(&b, &ds, setting).unwrap());
            for (qa, qb) in ma.queries.iter().zip(&mb.queries) {
                prop_assert_eq!(qa.ap, qb.ap);
            }
        }
    }

    #[test]
    fn recall_grows_with_k_and_reaches_one(cfg in small_synth(), seed in any::<u64>(), others in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let ds = generate(&cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scores = (0..ds.num_tracklets())
            .map(|_| (0..ds.num_classes()).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random() }).collect())
            .collect();
        let b = BeliefState::from_scores(ds.num_classes(), scores).unwrap();
        let ks: Vec<usize> = (1..=ds.num_classes()).collect();
        let r = recall_at_k(&b, &ds, &ks, others).unwrap();
        for w in r.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
        prop_assert!(r.iter().all(|&(_, x)| (0.0..=1.0).contains(&x)));
        if !others {
            prop_assert_eq!(r.last().unwrap().1, 1.0);
        }
    }
}
