#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use specrl_core::drafttree::*;
use specrl_core::roofline::HardwareProfile;
use specrl_core::scheduler::{generate_dynamic_batch, DecodeMode, GenConfig, SchedParams};
use specrl_core::tinylm::*;

fn target(vocab: usize, max_len: usize) -> ModelParams {
    init_model(ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: max_len,
        seed: 5,
    })
    .unwrap()
}

fn draft_for(t: &ModelParams, seed: u64) -> DraftParams {
    DraftParams::init(DraftConfig::for_target(t.config(), seed)).unwrap()
}

fn node(token: u32, parent: Option<usize>, depth: usize, conf: f64) -> TreeNode {
    TreeNode {
        token,
        parent,
        depth,
        log_prob: 0.0,
        confidence: conf,
        input_hidden: Vec::new(),
    }
}

fn is_ancestor(tree: &DraftTree, a: usize, mut b: usize) -> bool {
    while let Some(p) = tree.nodes[b].parent {
        if p == a {
            return true;
        }
        b = p;
    }
    false
}

#[test]
fn disabled_speculation_is_root_only() {
    let t = target(16, 32);
    let d = draft_for(&t, 1);
    assert_eq!(
        expand_tree(&d, t.lm_head(), &[0.0; 16], 3, 0, 4)
            .unwrap()
            .len(),
        1
    );
    assert_eq!(
        expand_tree(&d, t.lm_head(), &[0.0; 16], 3, 4, 0)
            .unwrap()
            .len(),
        1
    );
    assert!(
        expand_tree(&d, t.lm_head(), &[0.0; 16], 3, 3, 3)
            .unwrap()
            .len()
            <= 22
    );
}

#[test]
fn candidate_counts() {
    assert_eq!(max_candidates(3, 3), 22);
    assert_eq!(max_candidates(1, 1), 2);
    assert_eq!(max_candidates(7, 3), 106);
}

/// Level-by-level enumeration with the draft softmax evaluated directly.
#[test]
fn small_tree_matches_enumeration() {
    let t = target(4, 16);
    let d = draft_for(&t, 9);
    let h0: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin()).collect();
    let tree = expand_tree(&d, t.lm_head(), &h0, 2, 2, 2).unwrap();

    let softmax = |tok: u32, h: &[f32]| {
        let (nh, z) = forward_draft(&d, tok, h, t.lm_head()).unwrap();
        let m = z.iter().cloned().fold(f32::MIN, f32::max) as f64;
        let e: Vec<f64> = z.iter().map(|&x| (x as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        (nh, e.into_iter().map(|x| x / s).collect::<Vec<f64>>())
    };
    let top2 = |p: &[f64]| {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        [idx[0], idx[1]]
    };
    let (h1, p1) = softmax(2, &h0);
    let level1 = top2(&p1);
    let mut expected: Vec<(u32, Option<usize>, f64)> = vec![(2, None, 1.0)];
    for &c in &level1 {
        expected.push((c as u32, Some(0), p1[c]));
    }
    // both level-1 nodes are the frontier since k = 2
    for (r, &c) in level1.iter().enumerate() {
        let (_, p2) = softmax(c as u32, &h1);
        for &g in &top2(&p2) {
            expected.push((g as u32, Some(1 + r), p1[c] * p2[g]));
        }
    }
    assert_eq!(tree.len(), expected.len());
    for (n, (tok, par, conf)) in tree.nodes.iter().zip(&expected) {
        assert_eq!(n.token, *tok);
        assert_eq!(n.parent, *par);
        assert!(
            (n.confidence - conf).abs() < 1e-5,
            "{} vs {}",
            n.confidence,
            conf
        );
    }
}

#[test]
fn rerank_fixtures() {
    let tree = DraftTree {
        nodes: vec![
            node(0, None, 0, 1.0),
            node(1, Some(0), 1, 0.6),
            node(2, Some(0), 1, 0.3),
            node(3, Some(1), 2, 0.42),
        ],
    };
    assert_eq!(rerank_candidates(&tree, 3).unwrap().nodes, vec![0, 1, 3]);
    assert_eq!(rerank_candidates(&tree, 1).unwrap().nodes, vec![0]);
    assert_eq!(
        rerank_candidates(&tree, 10).unwrap().nodes,
        vec![0, 1, 2, 3]
    );
}

#[test]
fn mask_fixtures() {
    let chain = DraftTree {
        nodes: vec![
            node(0, None, 0, 1.0),
            node(1, Some(0), 1, 0.5),
            node(2, Some(1), 2, 0.2),
        ],
    };
    let m = build_tree_mask(&chain, &[0, 1, 2]).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(m.allowed(i, j), j <= i);
        }
    }
    let fork = DraftTree {
        nodes: vec![
            node(0, None, 0, 1.0),
            node(1, Some(0), 1, 0.5),
            node(2, Some(0), 1, 0.2),
        ],
    };
    let m = build_tree_mask(&fork, &[0, 1, 2]).unwrap();
    assert!(!m.allowed(1, 2) && !m.allowed(2, 1));
    assert!(build_tree_mask(&chain, &[0, 2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tree_invariants(seed in 0u64..500, root in 0u32..16, k in 0usize..5, l in 0usize..4, n in 1usize..30) {
        let t = target(16, 32);
        let d = draft_for(&t, seed);
        let h: Vec<f32> = (0..16).map(|i| ((i as u64 * 31 + seed) % 7) as f32 * 0.1).collect();
        let tree = expand_tree(&d, t.lm_head(), &h, root, k, l).unwrap();
        prop_assert!(tree.len() <= max_candidates(k, l));
        for nd in &tree.nodes[1..] {
            let p = &tree.nodes[nd.parent.unwrap()];
            prop_assert_eq!(nd.depth, p.depth + 1);
            prop_assert!(nd.depth <= l);
            prop_assert!(nd.confidence <= p.confidence);
        }
        let sel = rerank_candidates(&tree, n).unwrap();
        prop_assert!(sel.nodes.len() <= n);
        prop_assert_eq!(sel.nodes.len(), n.min(tree.len()));
        prop_assert_eq!(sel.nodes[0], 0);
        for &i in &sel.nodes[1..] {
            prop_assert!(sel.nodes.contains(&tree.nodes[i].parent.unwrap()));
        }
        // reachability via transitive closure of parent edges
        let m = sel.nodes.len();
        let mut reach = vec![vec![false; m]; m];
        for (r, &i) in sel.nodes.iter().enumerate() {
            reach[r][r] = true;
            if let Some(p) = tree.nodes[i].parent {
                reach[r][sel.nodes.iter().position(|&x| x == p).unwrap()] = true;
            }
        }
        for via in 0..m {
            for a in 0..m {
                for b in 0..m {
                    if reach[a][via] && reach[via][b] {
                        reach[a][b] = true;
                    }
                }
            }
        }
        for a in 0..m {
            for b in 0..m {
                prop_assert_eq!(sel.mask.allowed(a, b), reach[a][b]);
                prop_assert_eq!(reach[a][b], a == b || is_ancestor(&tree, sel.nodes[b], sel.nodes[a]));
            }
        }
        let back = DraftTree::from_json(&tree.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.nodes.iter().map(|n| (n.token, n.parent)).collect::<Vec<_>>(),
                        tree.nodes.iter().map(|n| (n.token, n.parent)).collect::<Vec<_>>());
    }
}

fn greedy_continuation(t: &ModelParams, prefix: &[u32], n: usize) -> Vec<u32> {
    let mut seq = prefix.to_vec();
    for _ in 0..n {
        let pos: Vec<usize> = (0..seq.len()).collect();
        let out = forward_target(t, &seq, &pos, None, &mut KvCache::new(t.config())).unwrap();
        seq.push(sample_token(out.logits_row(seq.len() - 1), 0.0, 0).unwrap());
    }
    seq[prefix.len()..].to_vec()
}

fn verify_chain(t: &ModelParams, prefix: &[u32], chain: &[u32]) -> VerifyResult {
    let root = *prefix.last().unwrap();
    let mut nodes = vec![node(root, None, 0, 1.0)];
    for (i, &c) in chain.iter().enumerate() {
        nodes.push(node(c, Some(i), i + 1, 0.9f64.powi(i as i32 + 1)));
    }
    let tree = DraftTree { nodes };
    let sel = rerank_candidates(&tree, tree.len()).unwrap();
    let mut cache = KvCache::new(t.config());
    let n = prefix.len();
    let pre: Vec<usize> = (0..n - 1).collect();
    forward_target(t, &prefix[..n - 1], &pre, None, &mut cache).unwrap();
    let toks: Vec<u32> = sel.nodes.iter().map(|&i| tree.nodes[i].token).collect();
    let pos: Vec<usize> = sel
        .nodes
        .iter()
        .map(|&i| n - 1 + tree.nodes[i].depth)
        .collect();
    let out = forward_target(t, &toks, &pos, Some(&sel.mask), &mut cache).unwrap();
    let keys = PositionKeys {
        seed: 0,
        iteration: 0,
        seq_id: 0,
    };
    verify(&out, &sel, &tree, 0.0, keys, n - 1).unwrap()
}

#[test]
fn verify_fixtures() {
    let t = target(16, 32);
    let prefix = [2u32, 7, 9, 11];
    let greedy = greedy_continuation(&t, &prefix, 4);
    let full = verify_chain(&t, &prefix, &greedy[..3]);
    assert_eq!(full.accepted_len, 4);
    assert_eq!(full.accepted_tokens, greedy);
    let wrong = (greedy[0] + 1) % 16;
    let none = verify_chain(&t, &prefix, &[wrong]);
    assert_eq!(none.accepted_len, 1);
    assert_eq!(none.accepted_tokens, vec![greedy[0]]);
    assert_eq!(none.bonus_token, greedy[0]);
}

#[test]
fn long_greedy_decode_is_lossless() {
    let t = target(16, 208);
    let d = draft_for(&t, 3);
    let p = HardwareProfile::desk();
    let prompts: Vec<Vec<u32>> = (0..12u32).map(|i| vec![2, 6 + i % 10, 3 + i % 7]).collect();
    let base = GenConfig {
        g: 1,
        temperature: 0.0,
        sched: SchedParams {
            c_peak: 32,
            ..SchedParams::default()
        },
        ..GenConfig::default()
    };
    let run = |mode| {
        let cfg = GenConfig { mode, ..base };
        generate_dynamic_batch(&t, Some(&d), &prompts, &cfg, &p)
            .unwrap()
            .0
            .responses()
    };
    let vanilla = run(DecodeMode::Vanilla);
    assert_eq!(run(DecodeMode::AdaptiveSpec), vanilla);
    for (r, pr) in vanilla.iter().zip(&prompts) {
        let stop = r
            .iter()
            .position(|&x| x == 1)
            .map(|i| i + 1)
            .unwrap_or(r.len());
        assert_eq!(r.len(), stop);
        assert_eq!(&greedy_continuation(&t, pr, r.len()), r);
    }
    assert!(vanilla.iter().map(Vec::len).sum::<usize>() >= 200);
}
