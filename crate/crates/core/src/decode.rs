//! Tree decoding from arc scores.
//!
//! `Y_arc` has one row per dependent and one column per head candidate
//! (column 0 = root). Greedy decoding takes a per-row argmax and may not
//! produce a tree; the Chu-Liu/Edmonds decoder always returns the best
//! single-root arborescence; the exhaustive decoder is the test oracle.
//! "Valid tree" throughout means what UD evaluation expects: acyclic,
//! connected, and with exactly one child of the root.

use thiserror::Error;

use crate::biaffine::ParseScores;
use crate::tensor::Tensor;
use crate::treebank::check_heads;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("exhaustive search limited to 8 words, got {0}")]
    TooLargeForBruteForce(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictedTree {
    /// `heads[i]` is the predicted head of word `i+1`, in `[0, N]`.
    pub heads: Vec<usize>,
    /// Relation indices, filled by [`assign_labels`]; empty until then.
    pub rels: Vec<usize>,
    pub is_tree: bool,
}

impl PredictedTree {
    fn from_heads(heads: Vec<usize>) -> PredictedTree {
        let is_tree = check_heads(&heads).is_valid_tree();
        PredictedTree {
            heads,
            rels: Vec::new(),
            is_tree,
        }
    }
}

fn arc_matrix(y_arc: &Tensor) -> (usize, Vec<f64>) {
    debug_assert_eq!(y_arc.rank(), 2);
    debug_assert_eq!(y_arc.cols(), y_arc.rows() + 1, "Y_arc must be (N, N+1)");
    (y_arc.rows(), y_arc.data())
}

/// Total score of a head assignment under `Y_arc`.
pub fn tree_score(y_arc: &Tensor, heads: &[usize]) -> f64 {
    let (n, data) = arc_matrix(y_arc);
    debug_assert_eq!(heads.len(), n);
    heads
        .iter()
        .enumerate()
        .map(|(i, &h)| data[i * (n + 1) + h])
        .sum()
}

/// Per-row argmax with self-arcs masked out. Ties prefer the smaller head
/// index. Not guaranteed to produce a tree.
pub fn greedy_decode(y_arc: &Tensor) -> PredictedTree {
    let (n, data) = arc_matrix(y_arc);
    let mut heads = Vec::with_capacity(n);
    for i in 0..n {
        let row = &data[i * (n + 1)..(i + 1) * (n + 1)];
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (j, &s) in row.iter().enumerate() {
            if j == i + 1 {
                continue; // a word cannot head itself
            }
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        heads.push(best);
    }
    PredictedTree::from_heads(heads)
}

#[derive(Clone, Copy)]
struct Arc {
    src: usize,
    dst: usize,
    w: f64,
    /// Index into the parent recursion level's arc list; contraction levels
    /// unwind through this chain.
    from_arc: usize,
}

/// Chu-Liu/Edmonds on an explicit arc list. `nodes` includes the root at 0;
/// every non-root node must have at least one incoming arc. Returns, for
/// each node `v` in `1..nodes`, the index (into `arcs`) of its chosen
/// incoming arc at position `v - 1`.
fn cle(nodes: usize, arcs: &[Arc]) -> Vec<usize> {
    // best incoming arc per non-root node; arcs are pre-sorted by
    // (dst, src), so the strict > keeps the smallest src on ties
    let mut best_in: Vec<Option<usize>> = vec![None; nodes];
    for (idx, a) in arcs.iter().enumerate() {
        if a.dst == 0 {
            continue;
        }
        match best_in[a.dst] {
            Some(cur) if arcs[cur].w >= a.w => {}
            _ => best_in[a.dst] = Some(idx),
        }
    }
    for v in 1..nodes {
        assert!(best_in[v].is_some(), "node {v} has no incoming arc");
    }

    let cycle = find_cycle(nodes, |v| best_in[v].map(|i| arcs[i].src));
    let Some(cycle_nodes) = cycle else {
        return (1..nodes).map(|v| best_in[v].unwrap()).collect();
    };

    let in_cycle = {
        let mut mask = vec![false; nodes];
        for &v in &cycle_nodes {
            mask[v] = true;
        }
        mask
    };
    // relabel: root stays 0, other non-cycle nodes keep dense ids, the whole
    // cycle becomes node `c`
    let mut remap = vec![usize::MAX; nodes];
    let mut next = 0usize;
    for v in 0..nodes {
        if !in_cycle[v] {
            remap[v] = next;
            next += 1;
        }
    }
    let c = next;
    let contracted_nodes = next + 1;

    let mut new_arcs: Vec<Arc> = Vec::new();
    for (idx, a) in arcs.iter().enumerate() {
        match (in_cycle[a.src], in_cycle[a.dst]) {
            (false, false) => new_arcs.push(Arc {
                src: remap[a.src],
                dst: remap[a.dst],
                w: a.w,
                from_arc: idx,
            }),
            (false, true) => {
                // entering the cycle displaces the cycle's own arc into dst
                let displaced = arcs[best_in[a.dst].unwrap()].w;
                new_arcs.push(Arc {
                    src: remap[a.src],
                    dst: c,
                    w: a.w - displaced,
                    from_arc: idx,
                });
            }
            (true, false) => new_arcs.push(Arc {
                src: c,
                dst: remap[a.dst],
                w: a.w,
                from_arc: idx,
            }),
            (true, true) => {}
        }
    }
    new_arcs.sort_by(|a, b| (a.dst, a.src).cmp(&(b.dst, b.src)));

    let sub = cle(contracted_nodes, &new_arcs);

    // expansion: each contracted choice maps back to an arc at this level;
    // the arc entering `c` breaks the cycle at its real destination, every
    // other cycle node keeps its cycle arc
    let mut result = vec![usize::MAX; nodes - 1];
    for w in 1..contracted_nodes {
        let here = new_arcs[sub[w - 1]].from_arc;
        result[arcs[here].dst - 1] = here;
    }
    for &v in &cycle_nodes {
        if result[v - 1] == usize::MAX {
            result[v - 1] = best_in[v].unwrap();
        }
    }
    debug_assert!(result.iter().all(|&i| i != usize::MAX));
    result
}

fn find_cycle(nodes: usize, parent: impl Fn(usize) -> Option<usize>) -> Option<Vec<usize>> {
    // color marking along parent chains
    let mut color = vec![0u8; nodes]; // 0 unseen, 1 in progress, 2 done
    color[0] = 2;
    for start in 1..nodes {
        if color[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut v = start;
        loop {
            if color[v] == 1 {
                // found a cycle: collect from v around the chain
                let pos = path.iter().position(|&u| u == v).expect("v on path");
                return Some(path[pos..].to_vec());
            }
            if color[v] == 2 {
                break;
            }
            color[v] = 1;
            path.push(v);
            match parent(v) {
                Some(p) => v = p,
                None => break,
            }
        }
        for &u in &path {
            color[u] = 2;
        }
    }
    None
}

fn solve_with_arcs(n: usize, arcs: &mut [Arc]) -> Vec<usize> {
    arcs.sort_by(|a, b| (a.dst, a.src).cmp(&(b.dst, b.src)));
    let chosen = cle(n + 1, arcs);
    (0..n).map(|i| arcs[chosen[i]].src).collect()
}

/// Maximum-score arborescence rooted at node 0, with the single-root
/// constraint enforced: if the unconstrained optimum attaches several words
/// to the root, each candidate root attachment is re-solved with the other
/// root arcs removed and the best total wins (ties to the smaller word).
pub fn mst_decode(y_arc: &Tensor) -> PredictedTree {
    let (n, data) = arc_matrix(y_arc);
    if n == 0 {
        return PredictedTree::from_heads(Vec::new());
    }
    if n == 1 {
        return PredictedTree::from_heads(vec![0]);
    }
    let all_arcs = |root_child: Option<usize>| -> Vec<Arc> {
        let mut arcs = Vec::new();
        for dep in 1..=n {
            for head in 0..=n {
                if head == dep {
                    continue;
                }
                if head == 0 {
                    if let Some(rc) = root_child {
                        if dep != rc {
                            continue;
                        }
                    }
                }
                arcs.push(Arc {
                    src: head,
                    dst: dep,
                    w: data[(dep - 1) * (n + 1) + head],
                    from_arc: 0,
                });
            }
        }
        arcs
    };

    let mut heads = solve_with_arcs(n, &mut all_arcs(None));
    let root_children: Vec<usize> = (1..=n).filter(|&v| heads[v - 1] == 0).collect();
    if root_children.len() > 1 {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for rc in root_children {
            let candidate = solve_with_arcs(n, &mut all_arcs(Some(rc)));
            let score: f64 = candidate
                .iter()
                .enumerate()
                .map(|(i, &h)| data[i * (n + 1) + h])
                .sum();
            if best.as_ref().map_or(true, |(s, _)| score > *s) {
                best = Some((score, candidate));
            }
        }
        heads = best.expect("at least one root child").1;
    }
    let tree = PredictedTree::from_heads(heads);
    debug_assert!(tree.is_tree, "Edmonds must return a valid tree");
    tree
}

/// Exhaustive maximum over all single-root arborescences; the decoding
/// oracle. Head vectors are visited in lexicographic order and a strict
/// improvement is required, so ties keep the lexicographically smallest
/// vector.
pub fn brute_force_mst(y_arc: &Tensor) -> Result<PredictedTree, DecodeError> {
    let (n, data) = arc_matrix(y_arc);
    if n > 8 {
        return Err(DecodeError::TooLargeForBruteForce(n));
    }
    if n == 0 {
        return Ok(PredictedTree::from_heads(Vec::new()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut heads = vec![0usize; n];
    loop {
        let ok = heads
            .iter()
            .enumerate()
            .all(|(i, &h)| h != i + 1);
        if ok {
            let check = check_heads(&heads);
            if check.is_valid_tree() {
                let score: f64 = heads
                    .iter()
                    .enumerate()
                    .map(|(i, &h)| data[i * (n + 1) + h])
                    .sum();
                if best.as_ref().map_or(true, |(s, _)| score > *s) {
                    best = Some((score, heads.clone()));
                }
            }
        }
        // odometer increment
        let mut pos = n;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            if heads[pos] < n {
                heads[pos] += 1;
                break;
            }
            heads[pos] = 0;
        }
        if pos == 0 && heads[0] == 0 {
            break;
        }
    }
    Ok(PredictedTree::from_heads(best.expect("a tree always exists").1))
}

/// `rels[i] = argmax_r Y_rel[i, heads[i], r]`, ties to the smaller index.
pub fn assign_labels(scores: &ParseScores, heads: &[usize]) -> Vec<usize> {
    let n = scores.n_words;
    debug_assert_eq!(heads.len(), n);
    let rel = scores.rel.data_ref();
    let r = scores.n_rels;
    heads
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let row = i * (n + 1) + h;
            let slice = &rel[row * r..(row + 1) * r];
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (j, &s) in slice.iter().enumerate() {
                if s > best_score {
                    best_score = s;
                    best = j;
                }
            }
            best
        })
        .collect()
}
