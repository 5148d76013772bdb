//! Tree decoding over arc-score matrices.

use crate::scalar::Scalar;

/// Arc scores for a sentence of `n` tokens: `get(head, dep)` for heads
/// `0..=n` and dependents `1..=n`. Self-arcs are −∞.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcScores<S> {
    n: usize,
    /// `(n+1)×(n+1)`, row = head, column = dependent; column 0 unused.
    data: Vec<S>,
}

impl<S: Scalar> ArcScores<S> {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> S) -> Self {
        let w = n + 1;
        let mut data = vec![S::neg_infinity(); w * w];
        for h in 0..w {
            for d in 1..w {
                if h != d {
                    data[h * w + d] = f(h, d);
                }
            }
        }
        ArcScores { n, data }
    }

    /// From a row-major `(n+1)×(n+1)` head-by-dependent matrix.
    pub fn from_matrix(n: usize, m: &[S]) -> Self {
        assert_eq!(m.len(), (n + 1) * (n + 1), "score matrix must be (n+1)×(n+1)");
        Self::from_fn(n, |h, d| m[h * (n + 1) + d])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, head: usize, dep: usize) -> S {
        self.data[head * (self.n + 1) + dep]
    }

    /// Sum of the chosen arcs; `heads[i]` is the head of token `i+1`.
    pub fn tree_score(&self, heads: &[usize]) -> S {
        heads
            .iter()
            .enumerate()
            .map(|(i, &h)| self.get(h, i + 1))
            .fold(S::zero(), |a, b| a + b)
    }

    /// Add `c` to every unmasked cell.
    pub fn shifted(&self, c: S) -> Self {
        Self::from_fn(self.n, |h, d| self.get(h, d) + c)
    }
}

/// Highest-scoring head per dependent, lowest index on ties. The result
/// may contain cycles or several root children.
pub fn decode_greedy<S: Scalar>(scores: &ArcScores<S>) -> Vec<usize> {
    (1..=scores.n()).map(|d| argmax_head(scores.n(), |h| scores.get(h, d))).collect()
}

fn argmax_head<S: Scalar>(n: usize, f: impl Fn(usize) -> S) -> usize {
    let mut best = 0;
    let mut best_v = f(0);
    for h in 1..=n {
        let v = f(h);
        if v > best_v {
            best = h;
            best_v = v;
        }
    }
    best
}

/// Maximum spanning arborescence rooted at 0 (Chu-Liu/Edmonds).
///
/// With `single_root`, if the unconstrained optimum has several root
/// children the decoder is rerun once per candidate with that token as the
/// only root child and the best total is kept (lowest candidate on ties).
pub fn decode_mst<S: Scalar>(scores: &ArcScores<S>, single_root: bool) -> Vec<usize> {
    let n = scores.n();
    if n == 0 {
        return Vec::new();
    }
    let w = n + 1;
    let matrix: Vec<S> = (0..w * w).map(|k| scores.get(k / w, k % w)).collect();
    let heads = chu_liu_edmonds(&matrix, w);
    if !single_root || heads.iter().filter(|&&h| h == 0).count() <= 1 {
        return heads;
    }
    let mut best: Option<(S, Vec<usize>)> = None;
    for r in 1..=n {
        let mut m = matrix.clone();
        for d in 1..=n {
            if d != r {
                m[d] = S::neg_infinity();
            }
        }
        let cand = chu_liu_edmonds(&m, w);
        let total = scores.tree_score(&cand);
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, cand));
        }
    }
    best.expect("n ≥ 1").1
}

/// `m` is `w×w` (row = head, col = dependent) over nodes `0..w` with root 0.
/// Returns heads of nodes `1..w`.
fn chu_liu_edmonds<S: Scalar>(m: &[S], w: usize) -> Vec<usize> {
    let mut best_in = vec![0usize; w];
    for (d, slot) in best_in.iter_mut().enumerate().skip(1) {
        let mut best = usize::MAX;
        for h in 0..w {
            if h == d {
                continue;
            }
            if best == usize::MAX || m[h * w + d] > m[best * w + d] {
                best = h;
            }
        }
        *slot = best;
    }
    let Some(cycle) = find_cycle(&best_in) else {
        return best_in[1..].to_vec();
    };

    // Contract the cycle into one node `c` placed last.
    let in_cycle: Vec<bool> = (0..w).map(|v| cycle.contains(&v)).collect();
    let outside: Vec<usize> = (0..w).filter(|&v| !in_cycle[v]).collect();
    let nw = outside.len() + 1;
    let c = nw - 1;
    let mut nm = vec![S::neg_infinity(); nw * nw];
    // For arcs into the cycle: which cycle node they enter.
    let mut enter = vec![usize::MAX; nw];
    // For arcs out of the cycle: which cycle node they leave from.
    let mut leave = vec![usize::MAX; nw];
    for (i, &u) in outside.iter().enumerate() {
        for (j, &v) in outside.iter().enumerate() {
            if i != j {
                nm[i * nw + j] = m[u * w + v];
            }
        }
        let mut best = S::neg_infinity();
        for &v in &cycle {
            let s = m[u * w + v] - m[best_in[v] * w + v];
            if enter[i] == usize::MAX || s > best {
                best = s;
                enter[i] = v;
            }
        }
        nm[i * nw + c] = best;
        let mut best = S::neg_infinity();
        for &v in &cycle {
            let s = m[v * w + u];
            if leave[i] == usize::MAX || s > best {
                best = s;
                leave[i] = v;
            }
        }
        nm[c * nw + i] = best;
    }
    let sub = chu_liu_edmonds(&nm, nw);

    let mut heads = best_in.clone();
    for (j, &v) in outside.iter().enumerate().skip(1) {
        let h = sub[j - 1];
        heads[v] = if h == c { leave[j] } else { outside[h] };
    }
    let hc = sub[c - 1];
    heads[enter[hc]] = outside[hc];
    heads[1..].to_vec()
}

/// A cycle in the head graph `best_in` (node 0 is the root), if any.
fn find_cycle(best_in: &[usize]) -> Option<Vec<usize>> {
    let w = best_in.len();
    let mut state = vec![0u8; w]; // 0 unseen, 1 on current path, 2 done
    state[0] = 2;
    for start in 1..w {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = best_in[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&x| x == v).expect("on path");
            let mut cycle = path[pos..].to_vec();
            cycle.sort_unstable();
            return Some(cycle);
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}
