//! Hopcroft-Karp maximum bipartite matching.

use std::collections::VecDeque;

const NIL: usize = usize::MAX;
const INF: u32 = u32::MAX;

/// Maximum-cardinality matching on a bipartite graph given as left-side
/// adjacency lists (`adj[u]` = right neighbors of left vertex `u`).
/// Returns `match_u[u]` = matched right vertex of `u`, if any. Deterministic
/// for a fixed adjacency order.
pub fn hopcroft_karp(num_left: usize, num_right: usize, adj: &[Vec<usize>]) -> Vec<Option<usize>> {
    assert_eq!(adj.len(), num_left, "one adjacency list per left vertex");
    let mut match_u = vec![NIL; num_left];
    let mut match_v = vec![NIL; num_right];
    let mut dist = vec![INF; num_left];
    let mut queue = VecDeque::new();

    loop {
        queue.clear();
        for u in 0..num_left {
            if match_u[u] == NIL {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = INF;
            }
        }
        let mut reachable_free = false;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let w = match_v[v];
                if w == NIL {
                    reachable_free = true;
                } else if dist[w] == INF {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        if !reachable_free {
            break;
        }
        for u in 0..num_left {
            if match_u[u] == NIL {
                try_augment(u, adj, &mut match_u, &mut match_v, &mut dist);
            }
        }
    }
    match_u.into_iter().map(|v| (v != NIL).then_some(v)).collect()
}

fn try_augment(
    u: usize,
    adj: &[Vec<usize>],
    match_u: &mut [usize],
    match_v: &mut [usize],
    dist: &mut [u32],
) -> bool {
    for &v in &adj[u] {
        let w = match_v[v];
        if w == NIL || (dist[w] == dist[u].wrapping_add(1) && try_augment(w, adj, match_u, match_v, dist)) {
            match_u[u] = v;
            match_v[v] = u;
            return true;
        }
    }
    dist[u] = INF;
    false
}
