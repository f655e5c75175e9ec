//! Draft-tree expansion, confidence reranking, tree masks, and strict-match
//! verification.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::{
    forward_draft_batch, log_softmax, position_key, sample_token, AttentionMask, DraftParams,
    ForwardOutput, LmHead,
};

/// One candidate token. Node 0 is the root: the last committed token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: u32,
    pub parent: Option<usize>,
    pub depth: usize,
    pub log_prob: f64,
    /// `exp` of the summed log-probabilities along the path from the root.
    pub confidence: f64,
    /// Hidden state fed to the draft when this node is expanded.
    #[serde(skip)]
    pub input_hidden: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftTree {
    pub nodes: Vec<TreeNode>,
}

impl DraftTree {
    pub fn root_only(root_token: u32, root_hidden: Vec<f32>) -> Self {
        Self {
            nodes: vec![TreeNode {
                token: root_token,
                parent: None,
                depth: 0,
                log_prob: 0.0,
                confidence: 1.0,
                input_hidden: root_hidden,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Upper bound on tree size: `1 + k + max(0, l − 1) · k²`.
pub fn max_candidates(k: usize, l: usize) -> usize {
    1 + k + l.saturating_sub(1) * k * k
}

fn top_k(log_probs: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<usize> = (0..log_probs.len()).collect();
    idx.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| (i as u32, log_probs[i].min(0.0)))
        .collect()
}

/// Grows a tree level by level. Level 1 holds the root's top-`k` children;
/// each later level expands the `k` most confident nodes of the previous
/// level with their own top-`k` children.
pub fn expand_tree(
    draft: &DraftParams,
    head: LmHead<'_>,
    root_hidden: &[f32],
    root_token: u32,
    k_draft: usize,
    l_draft: usize,
) -> Result<DraftTree> {
    let mut tree = DraftTree::root_only(root_token, root_hidden.to_vec());
    if k_draft == 0 || l_draft == 0 {
        return Ok(tree);
    }
    let d = root_hidden.len();
    let v = head.vocab_size();
    let mut frontier = vec![0usize];
    for _ in 0..l_draft {
        let tokens: Vec<u32> = frontier.iter().map(|&i| tree.nodes[i].token).collect();
        let hidden: Vec<f32> = frontier
            .iter()
            .flat_map(|&i| tree.nodes[i].input_hidden.iter().copied())
            .collect();
        let (next_h, logits) = forward_draft_batch(draft, &tokens, &hidden, head)?;
        let mut level = Vec::with_capacity(frontier.len() * k_draft);
        for (r, &parent) in frontier.iter().enumerate() {
            let lp = log_softmax(&logits[r * v..(r + 1) * v]);
            let pconf = tree.nodes[parent].confidence;
            let pdepth = tree.nodes[parent].depth;
            for (tok, l) in top_k(&lp, k_draft) {
                level.push(tree.nodes.len());
                tree.nodes.push(TreeNode {
                    token: tok,
                    parent: Some(parent),
                    depth: pdepth + 1,
                    log_prob: l,
                    confidence: pconf * l.exp(),
                    input_hidden: next_h[r * d..(r + 1) * d].to_vec(),
                });
            }
        }
        level.sort_by(|&a, &b| {
            let (na, nb) = (&tree.nodes[a], &tree.nodes[b]);
            nb.confidence
                .total_cmp(&na.confidence)
                .then(na.token.cmp(&nb.token))
                .then(a.cmp(&b))
        });
        level.truncate(k_draft);
        level.sort_unstable();
        frontier = level;
    }
    Ok(tree)
}

/// Nodes chosen for verification, in increasing node index, so every
/// parent precedes its children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSet {
    pub nodes: Vec<usize>,
    pub mask: AttentionMask,
}

fn by_confidence(tree: &DraftTree, a: usize, b: usize) -> Ordering {
    let (na, nb) = (&tree.nodes[a], &tree.nodes[b]);
    nb.confidence
        .total_cmp(&na.confidence)
        .then(na.depth.cmp(&nb.depth))
        .then(a.cmp(&b))
}

/// Picks up to `n_verify` nodes in descending confidence, admitting a node
/// only once its parent is in.
pub fn rerank_candidates(tree: &DraftTree, n_verify: usize) -> Result<SelectedSet> {
    if n_verify == 0 {
        return Err(Error::InvalidConfig("n_verify must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..tree.len()).collect();
    order.sort_by(|&a, &b| by_confidence(tree, a, b));
    let mut chosen = vec![false; tree.len()];
    let mut nodes = Vec::with_capacity(n_verify);
    chosen[0] = true;
    nodes.push(0);
    for i in order {
        if nodes.len() == n_verify {
            break;
        }
        if chosen[i] {
            continue;
        }
        if let Some(p) = tree.nodes[i].parent {
            if chosen[p] {
                chosen[i] = true;
                nodes.push(i);
            }
        }
    }
    nodes.sort_unstable();
    let mask = build_tree_mask(tree, &nodes)?;
    Ok(SelectedSet { nodes, mask })
}

/// `mask[i][j]` is true iff selected node `j` is selected node `i` or one
/// of its ancestors.
pub fn build_tree_mask(tree: &DraftTree, selected: &[usize]) -> Result<AttentionMask> {
    let mut row_of = vec![usize::MAX; tree.len()];
    for (r, &i) in selected.iter().enumerate() {
        if i >= tree.len() {
            return Err(Error::ClosureViolation(i));
        }
        row_of[i] = r;
    }
    if !selected.contains(&0) {
        return Err(Error::ClosureViolation(0));
    }
    let n = selected.len();
    let mut mask = AttentionMask::from_rows(&vec![vec![false; n]; n])?;
    for (r, &i) in selected.iter().enumerate() {
        mask.set(r, r, true);
        let mut cur = i;
        while let Some(p) = tree.nodes[cur].parent {
            if row_of[p] == usize::MAX {
                return Err(Error::ClosureViolation(i));
            }
            mask.set(r, row_of[p], true);
            cur = p;
        }
    }
    Ok(mask)
}

/// Random keys for the tokens emitted during one sequence's decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionKeys {
    pub seed: u64,
    pub iteration: u64,
    pub seq_id: u64,
}

impl PositionKeys {
    /// Key for the token placed at absolute `position`.
    pub fn at(&self, position: usize) -> u64 {
        position_key(self.seed, self.iteration, self.seq_id, position as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    /// Matched draft tokens followed by the bonus token.
    pub accepted_tokens: Vec<u32>,
    pub accepted_len: usize,
    pub bonus_token: u32,
    /// Rows (into the verification batch) of the accepted path, root first.
    pub path_rows: Vec<usize>,
    /// Target hidden states at the accepted path positions, root first.
    pub new_hidden: Vec<f32>,
}

/// Strict-match verification.
///
/// The target emits one token per selected node, using the key of the
/// position that token would occupy (`root_position + depth + 1`). Starting
/// at the root, the walk descends into a selected child whose token equals
/// the target's emission; the emission at the last node is the bonus.
pub fn verify(
    target: &ForwardOutput,
    selected: &SelectedSet,
    tree: &DraftTree,
    temperature: f32,
    keys: PositionKeys,
    root_position: usize,
) -> Result<VerifyResult> {
    if target.rows != selected.nodes.len() {
        return Err(Error::DimensionMismatch {
            what: "verification logits rows",
            expected: selected.nodes.len(),
            got: target.rows,
        });
    }
    let mut emitted = Vec::with_capacity(target.rows);
    for (r, &i) in selected.nodes.iter().enumerate() {
        let pos = root_position + tree.nodes[i].depth + 1;
        emitted.push(sample_token(
            target.logits_row(r),
            temperature,
            keys.at(pos),
        )?);
    }
    let mut row = 0;
    let mut path_rows = vec![0];
    let mut accepted_tokens = Vec::new();
    'walk: loop {
        let node = selected.nodes[row];
        for (r, &c) in selected.nodes.iter().enumerate().skip(row + 1) {
            if tree.nodes[c].parent == Some(node) && tree.nodes[c].token == emitted[row] {
                accepted_tokens.push(tree.nodes[c].token);
                path_rows.push(r);
                row = r;
                continue 'walk;
            }
        }
        break;
    }
    let bonus_token = emitted[row];
    accepted_tokens.push(bonus_token);
    let new_hidden = path_rows
        .iter()
        .flat_map(|&r| target.hidden_row(r).iter().copied())
        .collect();
    Ok(VerifyResult {
        accepted_len: accepted_tokens.len(),
        accepted_tokens,
        bonus_token,
        path_rows,
        new_hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

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

    #[test]
    fn candidate_formula() {
        assert_eq!(max_candidates(3, 3), 22);
        assert_eq!(max_candidates(1, 1), 2);
        assert_eq!(max_candidates(7, 3), 106);
        assert_eq!(max_candidates(0, 5), 1);
    }

    #[test]
    fn rerank_prefers_confident_paths() {
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
        assert_eq!(rerank_candidates(&tree, 9).unwrap().nodes, vec![0, 1, 2, 3]);
        assert!(rerank_candidates(&tree, 0).is_err());
    }

    #[test]
    fn masks_for_chain_and_siblings() {
        let chain = DraftTree {
            nodes: vec![
                node(0, None, 0, 1.0),
                node(1, Some(0), 1, 0.5),
                node(2, Some(1), 2, 0.2),
            ],
        };
        let m = build_tree_mask(&chain, &[0, 1, 2]).unwrap();
        assert_eq!(m, AttentionMask::causal(3));
        let fork = DraftTree {
            nodes: vec![
                node(0, None, 0, 1.0),
                node(1, Some(0), 1, 0.5),
                node(2, Some(0), 1, 0.4),
            ],
        };
        let m = build_tree_mask(&fork, &[0, 1, 2]).unwrap();
        assert!(!m.allowed(1, 2) && !m.allowed(2, 1));
        assert!(m.allowed(1, 0) && m.allowed(2, 0));
        assert!(matches!(
            build_tree_mask(&chain, &[0, 2]),
            Err(Error::ClosureViolation(2))
        ));
    }

    #[test]
    fn json_dump_round_trips_structure() {
        let tree = DraftTree {
            nodes: vec![node(4, None, 0, 1.0), node(7, Some(0), 1, 0.25)],
        };
        let back = DraftTree::from_json(&tree.to_json().unwrap()).unwrap();
        assert_eq!(back, tree);
    }
}
