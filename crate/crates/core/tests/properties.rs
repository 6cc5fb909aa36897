use std::collections::BTreeSet;

use hienet_core::graph::{ppr_closed_form, ppr_iterate, CoocGraph, EdgeWeighting, PprConfig};
use hienet_core::hierarchy::bpr_loss_value;
use hienet_core::metrics::{auc_scores, f1_scores, jaccard_topk, p_at_n};
use hienet_core::position::{encode_node, TreePosition};
use hienet_core::synth::code_list;
use hienet_core::tree::CodeTree;
use hienet_core::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn tree_strategy() -> impl Strategy<Value = CodeTree> {
    (1usize..=6, 1usize..=3)
        .prop_flat_map(|(b, d)| {
            let cap: usize = (1..=d).map(|l| b.pow(l as u32)).sum();
            (Just(b), Just(d), 1..=cap.min(120))
        })
        .prop_map(|(b, d, n)| CodeTree::build(&code_list(b, d, n)).unwrap())
}

fn stack_strategy(n: usize, k: usize) -> impl Strategy<Value = TreePosition> {
    prop::collection::vec(0..n, 0..k).prop_map(move |path| {
        let mut p = TreePosition::root(n, k);
        for i in path {
            p = p.down(i).unwrap();
        }
        p
    })
}

fn graph_strategy(max_l: usize) -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
    (2..=max_l).prop_flat_map(|l| (Just(l), prop::collection::vec(prop::collection::vec(0..l, 0..5), 0..12)))
}

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn up_undoes_down(n in 1usize..6, k in 1usize..5, i in 0usize..6, seed in any::<u64>()) {
        let i = i % n;
        let depth = (seed as usize) % k;
        let mut p = TreePosition::root(n, k);
        for s in 0..depth {
            p = p.down((seed as usize >> s) % n).unwrap();
        }
        let q = p.down(i).unwrap();
        prop_assert!(q.is_stack_valid());
        prop_assert_eq!(q.depth(), p.depth() + 1);
        prop_assert_eq!(q.up().unwrap(), p);
    }

    #[test]
    fn random_walks_keep_stack_shape(n in 1usize..5, k in 1usize..5, ops in prop::collection::vec((any::<bool>(), 0usize..5), 0..30)) {
        let mut p = TreePosition::root(n, k);
        let mut depth = 0;
        for (go_down, i) in ops {
            let next = if go_down { p.down(i % n) } else { p.up() };
            match next {
                Ok(q) => {
                    depth = if go_down { depth + 1 } else { depth - 1 };
                    p = q;
                }
                Err(_) => {
                    let at_edge = if go_down { depth == k } else { depth == 0 };
                    prop_assert!(at_edge);
                }
            }
            prop_assert!(p.is_stack_valid());
            prop_assert_eq!(p.depth(), depth);
        }
    }

    #[test]
    fn down_is_an_affine_shift(n in 1usize..5, k in 2usize..5, i in 0usize..5, a in 0usize..1000, b in 0usize..1000) {
        let i = i % n;
        let x = {
            let mut p = TreePosition::root(n, k);
            for s in 0..(a % k) { p = p.down((a + s) % n).unwrap(); }
            p
        };
        let y = {
            let mut p = TreePosition::root(n, k);
            for s in 0..(b % k) { p = p.down((b * 3 + s) % n).unwrap(); }
            p
        };
        let zero = TreePosition::root(n, k).down(i).unwrap();
        for v in [&x, &y] {
            let moved = v.down(i).unwrap();
            let delta: Vec<f64> = moved.as_slice().iter().zip(zero.as_slice()).map(|(m, z)| m - z).collect();
            let mut shifted = vec![0.0; n * k];
            shifted[n..].copy_from_slice(&v.as_slice()[..n * (k - 1)]);
            prop_assert_eq!(delta, shifted);
        }
    }

    #[test]
    fn down_is_injective((p, q, i) in (1usize..5, 1usize..4).prop_flat_map(|(n, k)| (stack_strategy(n, k), stack_strategy(n, k), 0..n))) {
        if let (Ok(a), Ok(b)) = (p.down(i), q.down(i)) {
            prop_assert_eq!(a == b, p == q);
        }
    }

    #[test]
    fn node_encodings_are_distinct(tree in tree_strategy()) {
        let n = tree.max_branching().max(1);
        let k = tree.max_depth().max(1);
        let mut seen = BTreeSet::new();
        for idx in 0..tree.len() {
            let p = encode_node(&tree, idx, n, k).unwrap();
            prop_assert!(p.is_stack_valid());
            prop_assert_eq!(p.depth(), tree.path_from_root(idx).len());
            let key: Vec<u64> = p.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert!(seen.insert(key));
        }
    }

    #[test]
    fn tree_parent_child_consistent(tree in tree_strategy()) {
        for label in 0..tree.num_labels() {
            let code = tree.label_code(label).as_str().to_string();
            let parent = tree.parent(&code).unwrap();
            let depth = tree.depth(&code).unwrap();
            match parent {
                Some(p) => {
                    let p = p.as_str().to_string();
                    prop_assert!(tree.children(&p).unwrap().iter().any(|c| c.as_str() == code));
                    prop_assert_eq!(depth, tree.depth(&p).unwrap() + 1);
                }
                None => prop_assert_eq!(depth, 1),
            }
        }
    }

    #[test]
    fn tree_build_ignores_input_order(b in 1usize..5, d in 1usize..4, perm in any::<u64>()) {
        let cap: usize = (1..=d).map(|l| b.pow(l as u32)).sum();
        let codes = code_list(b, d, cap.min(60));
        let mut shuffled = codes.clone();
        let len = shuffled.len();
        for i in (1..len).rev() {
            let j = (perm.rotate_left(i as u32) as usize) % (i + 1);
            shuffled.swap(i, j);
        }
        prop_assert_eq!(CodeTree::build(&codes).unwrap(), CodeTree::build(&shuffled).unwrap());
    }

    #[test]
    fn a_hat_spectrum_in_unit_interval((l, sets) in graph_strategy(24)) {
        let g = CoocGraph::build(l, &sets, EdgeWeighting::Binary).unwrap();
        let a = g.a_hat();
        let m = DMatrix::from_fn(l, l, |i, j| a.get(i, j));
        prop_assert!((&m - m.transpose()).amax() < 1e-15);
        for ev in m.symmetric_eigenvalues().iter() {
            prop_assert!(*ev >= -1.0 - 1e-12 && *ev <= 1.0 + 1e-12, "eigenvalue {}", ev);
        }
    }

    #[test]
    fn ppr_is_linear((l, sets) in graph_strategy(16), d in 0.1f64..0.9, vals in prop::collection::vec(-1.0f64..1.0, 96)) {
        let g = CoocGraph::build(l, &sets, EdgeWeighting::Counts).unwrap();
        let cfg = PprConfig { d, ..PprConfig::default() };
        let x1 = matrix(l, 3, &vals);
        let x2 = matrix(l, 3, &vals[48..]);
        let f1 = ppr_closed_form(&g, &cfg, &x1).unwrap();
        let f2 = ppr_closed_form(&g, &cfg, &x2).unwrap();
        let f12 = ppr_closed_form(&g, &cfg, &x1.add(&x2).unwrap()).unwrap();
        prop_assert!(f12.max_abs_diff(&f1.add(&f2).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn ppr_closed_form_matches_iteration((l, sets) in graph_strategy(32), d in 0.1f64..0.95, vals in prop::collection::vec(-1.0f64..1.0, 128)) {
        let g = CoocGraph::build(l, &sets, EdgeWeighting::Binary).unwrap();
        let cfg = PprConfig { d, max_iters: 500, tol: 1e-14 };
        let x = matrix(l, 4, &vals);
        let closed = ppr_closed_form(&g, &cfg, &x).unwrap();
        let run = ppr_iterate(&g, &cfg, &x).unwrap();
        prop_assert!(closed.max_abs_diff(&run.z).unwrap() <= 1e-8);
    }

    #[test]
    fn graph_ignores_note_order_and_duplicates((l, sets) in graph_strategy(16), rot in 0usize..12) {
        let g = CoocGraph::build(l, &sets, EdgeWeighting::Binary).unwrap();
        let mut rotated = sets.clone();
        if !rotated.is_empty() {
            let r = rot % rotated.len();
            rotated.rotate_left(r);
        }
        let doubled: Vec<Vec<usize>> = rotated.iter().map(|s| s.iter().chain(s.iter()).copied().collect()).collect();
        let h = CoocGraph::build(l, &doubled, EdgeWeighting::Binary).unwrap();
        prop_assert_eq!(g.adjacency(), h.adjacency());
        let c1 = CoocGraph::build(l, &sets, EdgeWeighting::Counts).unwrap();
        let c2 = CoocGraph::build(l, &doubled, EdgeWeighting::Counts).unwrap();
        prop_assert_eq!(c1.adjacency(), c2.adjacency());
    }

    #[test]
    fn bpr_loss_symmetric_and_nonnegative(vals in prop::collection::vec(-3.0f64..3.0, 48)) {
        let u = matrix(4, 6, &vals);
        let d = matrix(4, 6, &vals[24..]);
        let a = bpr_loss_value(&u, &d).unwrap();
        let b = bpr_loss_value(&d, &u).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert!(bpr_loss_value(&u, &u).unwrap().abs() <= 1e-12);
    }
}

// Brute-force metric oracles.

fn oracle_rank(s: &[f64]) -> Vec<usize> {
    // Selection: repeatedly take the best remaining label, lowest index on ties.
    let mut left: Vec<usize> = (0..s.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for x in 1..left.len() {
            if s[left[x]] > s[left[best]] {
                best = x;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn oracle_jaccard(scores: &[Vec<f64>], gold: &[Vec<usize>], k: usize) -> f64 {
    let mut vals = Vec::new();
    for (s, g) in scores.iter().zip(gold) {
        let g: BTreeSet<usize> = g.iter().copied().collect();
        if g.is_empty() {
            continue;
        }
        let top: BTreeSet<usize> = oracle_rank(s).into_iter().take(k).collect();
        vals.push(top.intersection(&g).count() as f64 / top.union(&g).count() as f64);
    }
    if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 }
}

fn oracle_p_at(scores: &[Vec<f64>], gold: &[Vec<usize>], n: usize) -> f64 {
    let per: Vec<f64> = scores
        .iter()
        .zip(gold)
        .map(|(s, g)| oracle_rank(s).into_iter().take(n).filter(|l| g.contains(l)).count() as f64 / n as f64)
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn oracle_f1(scores: &[Vec<f64>], gold: &[Vec<usize>]) -> (f64, f64) {
    let labels = scores[0].len();
    let f = |tp: f64, fp: f64, fn_: f64| if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let (mut tps, mut fps, mut fns) = (0.0, 0.0, 0.0);
    let mut macro_vals = Vec::new();
    for l in 0..labels {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (s, g) in scores.iter().zip(gold) {
            let pred = s[l] >= 0.5;
            let pos = g.contains(&l);
            if pred && pos { tp += 1.0 } else if pred { fp += 1.0 } else if pos { fn_ += 1.0 }
        }
        tps += tp;
        fps += fp;
        fns += fn_;
        if tp + fn_ > 0.0 {
            macro_vals.push(f(tp, fp, fn_));
        }
    }
    let mac = if macro_vals.is_empty() { 0.0 } else { macro_vals.iter().sum::<f64>() / macro_vals.len() as f64 };
    (mac, f(tps, fps, fns))
}

fn oracle_auc(s: &[f64], pos: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    if pairs == 0.0 { None } else { Some(wins / pairs) }
}

fn oracle_aucs(scores: &[Vec<f64>], gold: &[Vec<usize>]) -> (f64, f64) {
    let labels = scores[0].len();
    let mut per = Vec::new();
    for l in 0..labels {
        let s: Vec<f64> = scores.iter().map(|r| r[l]).collect();
        let p: Vec<bool> = gold.iter().map(|g| g.contains(&l)).collect();
        if let Some(a) = oracle_auc(&s, &p) {
            per.push(a);
        }
    }
    let s: Vec<f64> = scores.iter().flatten().copied().collect();
    let p: Vec<bool> = gold.iter().flat_map(|g| (0..labels).map(move |l| g.contains(&l))).collect();
    let mac = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (mac, oracle_auc(&s, &p).unwrap_or(0.0))
}

fn instance_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    (2usize..=20, 1usize..=50).prop_flat_map(|(l, docs)| {
        // Scores on a coarse grid so that ties occur.
        let scores = prop::collection::vec(prop::collection::vec((0u32..12).prop_map(|v| v as f64 / 11.0), l), docs);
        let gold = prop::collection::vec(prop::collection::btree_set(0..l, 0..=l.min(6)).prop_map(|s| s.into_iter().collect::<Vec<_>>()), docs);
        (scores, gold)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_oracles((scores, gold) in instance_strategy(), k in 1usize..25) {
        prop_assert!((jaccard_topk(&scores, &gold, k).mean - oracle_jaccard(&scores, &gold, k)).abs() <= 1e-12);
        prop_assert!((p_at_n(&scores, &gold, k) - oracle_p_at(&scores, &gold, k)).abs() <= 1e-12);
        let f = f1_scores(&scores, &gold, 0.5);
        let (mac, mic) = oracle_f1(&scores, &gold);
        prop_assert!((f.macro_f1 - mac).abs() <= 1e-12 && (f.micro_f1 - mic).abs() <= 1e-12);
        let a = auc_scores(&scores, &gold);
        let (mac, mic) = oracle_aucs(&scores, &gold);
        prop_assert!((a.macro_auc - mac).abs() <= 1e-12 && (a.micro_auc - mic).abs() <= 1e-12);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms((scores, gold) in instance_strategy(), k in 1usize..25) {
        let warped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|v| (3.0 * v).exp() - 7.0).collect()).collect();
        prop_assert_eq!(jaccard_topk(&scores, &gold, k), jaccard_topk(&warped, &gold, k));
        prop_assert_eq!(p_at_n(&scores, &gold, k), p_at_n(&warped, &gold, k));
    }
}
