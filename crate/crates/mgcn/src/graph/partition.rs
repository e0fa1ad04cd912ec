//! Greedy weighted partitioner: BFS-grown seeds plus boundary refinement.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CsrGraph;
use crate::error::{Error, Result};
use crate::mat::Scalar;

/// Node-to-part assignment with per-part weight totals.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub num_parts: usize,
    pub assignment: Vec<usize>,
    pub part_weights: Vec<f64>,
}

impl Partition {
    /// Builds a partition from an explicit assignment, recomputing part
    /// weights from the given per-node weights.
    pub fn from_assignment(num_parts: usize, assignment: Vec<usize>, node_weights: &[f64]) -> Result<Self> {
        if node_weights.len() != assignment.len() {
            return Err(Error::InvalidInput("node weight count must match assignment length".into()));
        }
        let mut part_weights = vec![0.0; num_parts];
        for (v, &part) in assignment.iter().enumerate() {
            if part >= num_parts {
                return Err(Error::InvalidInput(format!(
                    "part id {part} out of range for {num_parts} parts"
                )));
            }
            part_weights[part] += node_weights[v];
        }
        Ok(Partition { num_parts, assignment, part_weights })
    }

    /// `max(part_weights) / mean(part_weights)`; 1.0 is perfectly balanced.
    pub fn imbalance(&self) -> f64 {
        let total: f64 = self.part_weights.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        let mean = total / self.num_parts as f64;
        self.part_weights.iter().cloned().fold(0.0, f64::max) / mean
    }

    /// Number of edges whose endpoints live in different parts.
    pub fn cut_edges<T: Scalar>(&self, g: &CsrGraph<T>) -> usize {
        g.edges().filter(|&(u, v)| self.assignment[u] != self.assignment[v]).count()
    }
}

/// Node weighting used by the partitioner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightMode {
    Uniform,
    /// `weight = in_degree + lambda * train_mask`; `lambda` defaults to the
    /// average in-degree so both terms have comparable magnitude.
    InDegreePlusTrainMask { lambda: Option<f64> },
}

/// Per-node weights for a weighting mode.
pub fn node_weights<T: Scalar>(g: &CsrGraph<T>, mode: WeightMode) -> Vec<f64> {
    match mode {
        WeightMode::Uniform => vec![1.0; g.num_nodes()],
        WeightMode::InDegreePlusTrainMask { lambda } => {
            let lam = lambda.unwrap_or_else(|| {
                if g.num_nodes() == 0 {
                    1.0
                } else {
                    (g.num_edges() as f64 / g.num_nodes() as f64).max(1.0)
                }
            });
            (0..g.num_nodes())
                .map(|v| g.in_degree(v) as f64 + lam * if g.train_mask()[v] { 1.0 } else { 0.0 })
                .collect()
        }
    }
}

/// Greedy partitioner: picks far-apart seeds, grows parts lightest-first by
/// BFS over the undirected structure, then runs boundary refinement passes
/// that move nodes for positive cut gain under a weight cap.
pub fn partition_weighted<T: Scalar>(
    g: &CsrGraph<T>,
    num_parts: usize,
    mode: WeightMode,
    seed: u64,
) -> Result<Partition> {
    let n = g.num_nodes();
    if num_parts == 0 {
        return Err(Error::InvalidInput("number of parts must be at least 1".into()));
    }
    if num_parts > n {
        return Err(Error::InvalidInput(format!("{num_parts} parts requested for {n} nodes")));
    }
    let w = node_weights(g, mode);
    if num_parts == 1 {
        return Partition::from_assignment(1, vec![0; n], &w);
    }

    let (uoff, ucols) = g.undirected_structure();
    let neighbors = |v: usize| &ucols[uoff[v]..uoff[v + 1]];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = farthest_point_seeds(n, num_parts, &uoff, &ucols, rng.gen_range(0..n));

    const UNASSIGNED: usize = usize::MAX;
    let mut assignment = vec![UNASSIGNED; n];
    let mut part_w = vec![0.0f64; num_parts];
    let mut part_count = vec![0usize; num_parts];
    let mut frontier: Vec<VecDeque<usize>> = vec![VecDeque::new(); num_parts];
    let mut assigned = 0usize;
    for (part, &s) in seeds.iter().enumerate() {
        assignment[s] = part;
        part_w[part] += w[s];
        part_count[part] += 1;
        assigned += 1;
        frontier[part].extend(neighbors(s));
    }

    while assigned < n {
        let mut pick = None;
        let mut best = f64::INFINITY;
        for p in 0..num_parts {
            if !frontier[p].is_empty() && part_w[p] < best {
                best = part_w[p];
                pick = Some(p);
            }
        }
        match pick {
            Some(p) => {
                let u = frontier[p].pop_front().unwrap();
                if assignment[u] != UNASSIGNED {
                    continue;
                }
                assignment[u] = p;
                part_w[p] += w[u];
                part_count[p] += 1;
                assigned += 1;
                for &nb in neighbors(u) {
                    if assignment[nb] == UNASSIGNED {
                        frontier[p].push_back(nb);
                    }
                }
            }
            None => {
                // All frontiers dry but nodes remain: start the lightest part
                // on the lowest-id unassigned node (next component).
                let v = assignment.iter().position(|&a| a == UNASSIGNED).unwrap();
                let p = (0..num_parts).min_by(|&a, &b| part_w[a].total_cmp(&part_w[b])).unwrap();
                assignment[v] = p;
                part_w[p] += w[v];
                part_count[p] += 1;
                assigned += 1;
                frontier[p].extend(neighbors(v));
            }
        }
    }

    let total_w: f64 = w.iter().sum();
    let cap = 1.05 * total_w / num_parts as f64;
    let mut counts = vec![0usize; num_parts];
    for _pass in 0..8 {
        let mut moved = 0usize;
        for v in 0..n {
            let cur = assignment[v];
            if part_count[cur] <= 1 {
                continue;
            }
            counts.iter_mut().for_each(|c| *c = 0);
            let mut touched = false;
            for &nb in neighbors(v) {
                counts[assignment[nb]] += 1;
                touched |= assignment[nb] != cur;
            }
            if !touched {
                continue;
            }
            let mut best_part = cur;
            let mut best_gain = 0isize;
            for q in 0..num_parts {
                if q == cur || counts[q] == 0 {
                    continue;
                }
                let gain = counts[q] as isize - counts[cur] as isize;
                if gain > best_gain && part_w[q] + w[v] <= cap {
                    best_gain = gain;
                    best_part = q;
                }
            }
            if best_part != cur {
                part_w[cur] -= w[v];
                part_count[cur] -= 1;
                part_w[best_part] += w[v];
                part_count[best_part] += 1;
                assignment[v] = best_part;
                moved += 1;
            }
        }
        if moved == 0 {
            break;
        }
    }

    // Balance repair: shed boundary nodes from overweight parts while it
    // strictly reduces the pairwise maximum.
    let mean_w = total_w / num_parts as f64;
    let mut steps = 0usize;
    while steps < 2 * n {
        steps += 1;
        let h = (0..num_parts).max_by(|&a, &b| part_w[a].total_cmp(&part_w[b])).unwrap();
        if mean_w <= 0.0 || part_w[h] / mean_w <= 1.10 || part_count[h] <= 1 {
            break;
        }
        let mut best: Option<(isize, usize, usize)> = None;
        for v in 0..n {
            if assignment[v] != h {
                continue;
            }
            counts.iter_mut().for_each(|c| *c = 0);
            for &nb in neighbors(v) {
                counts[assignment[nb]] += 1;
            }
            for q in 0..num_parts {
                if q == h || part_w[q] + w[v] >= part_w[h] {
                    continue;
                }
                let gain = counts[q] as isize - counts[h] as isize;
                if best.map_or(true, |(bg, _, _)| gain > bg) {
                    best = Some((gain, v, q));
                }
            }
        }
        match best {
            Some((_, v, q)) => {
                part_w[h] -= w[v];
                part_count[h] -= 1;
                part_w[q] += w[v];
                part_count[q] += 1;
                assignment[v] = q;
            }
            None => break,
        }
    }

    Ok(Partition { num_parts, assignment, part_weights: part_w })
}

/// Greedy farthest-point seed selection over the undirected structure.
/// Unreached nodes count as infinitely far, so disconnected components each
/// attract a seed before any component gets two.
fn farthest_point_seeds(
    n: usize,
    num_parts: usize,
    uoff: &[usize],
    ucols: &[usize],
    first: usize,
) -> Vec<usize> {
    let mut seeds = vec![first];
    let mut dist: Vec<Option<usize>> = vec![None; n];
    let mut queue = VecDeque::new();
    let bfs = |from: usize, dist: &mut Vec<Option<usize>>, queue: &mut VecDeque<usize>| {
        dist[from] = Some(0);
        queue.push_back(from);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &v in &ucols[uoff[u]..uoff[u + 1]] {
                if dist[v].map_or(true, |dv| dv > du + 1) {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
    };
    bfs(first, &mut dist, &mut queue);
    while seeds.len() < num_parts {
        let mut pick: Option<usize> = None;
        let mut pick_key = (false, 0usize);
        for v in 0..n {
            if seeds.contains(&v) {
                continue;
            }
            let key = match dist[v] {
                None => (true, usize::MAX),
                Some(d) => (false, d),
            };
            let better = match pick {
                None => true,
                Some(_) => match (key.0, pick_key.0) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => key.1 > pick_key.1,
                },
            };
            if better {
                pick = Some(v);
                pick_key = key;
            }
        }
        let s = pick.expect("fewer seeds than nodes");
        seeds.push(s);
        bfs(s, &mut dist, &mut queue);
    }
    seeds
}

/// Reads a partition file (one part id per line) for a known node and part
/// count; part weights are recomputed as node counts.
pub fn import_partition(path: &Path, num_nodes: usize, num_parts: usize) -> Result<Partition> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut assignment = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let part: usize = text
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "part id is not a non-negative integer"))?;
        if part >= num_parts {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("part id {part} out of range for {num_parts} parts"),
            ));
        }
        assignment.push(part);
    }
    if assignment.len() != num_nodes {
        return Err(Error::format(
            path,
            format!("{} entries for {} nodes", assignment.len(), num_nodes),
        ));
    }
    Partition::from_assignment(num_parts, assignment, &vec![1.0; num_nodes])
}

/// Writes one part id per line.
pub fn save_partition(p: &Partition, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(p.assignment.len() * 2);
    for &a in &p.assignment {
        out.push_str(&a.to_string());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
