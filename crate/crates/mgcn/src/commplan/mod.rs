//! Communication planning for cut edges between worker pairs.
//!
//! For each ordered pair of parts (sender `j`, receiver `i`) the cut edges
//! form a bipartite graph: sources owned by `j` on one side, destinations
//! owned by `i` on the other. A feature row crosses the wire either raw
//! (source sent whole, receiver finishes the aggregation: post-aggregation)
//! or as a per-destination partial sum built on the sender (pre-aggregation).
//! Choosing which edges go which way so that the fewest rows travel is
//! exactly minimum vertex cover on that bipartite graph, solved optimally
//! via maximum matching and the alternating-path cover construction.

pub mod matching;

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Subgraph;
use crate::mat::Scalar;

pub use matching::hopcroft_karp as hopcroft_karp_indexed;

/// Magic bytes of the serialized plan blob.
pub const PLAN_MAGIC: [u8; 4] = *b"MGPL";
/// Current plan blob version.
pub const PLAN_VERSION: u32 = 1;

/// Bipartite view of the cut edges from part `src_part` into `dst_part`.
#[derive(Clone, Debug, PartialEq)]
pub struct CutBipartite {
    pub src_part: usize,
    pub dst_part: usize,
    /// Sorted distinct cut-edge sources (owned by `src_part`).
    pub src_side: Vec<usize>,
    /// Sorted distinct cut-edge destinations (owned by `dst_part`).
    pub dst_side: Vec<usize>,
    /// Distinct `(src, dst)` pairs, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl CutBipartite {
    /// Validates side membership, side disjointness, and edge uniqueness.
    pub fn new(
        src_part: usize,
        dst_part: usize,
        src_side: Vec<usize>,
        dst_side: Vec<usize>,
        mut edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let srcs: HashSet<usize> = src_side.iter().copied().collect();
        let dsts: HashSet<usize> = dst_side.iter().copied().collect();
        if let Some(&overlap) = srcs.intersection(&dsts).next() {
            return Err(Error::InvalidInput(format!(
                "node {overlap} appears on both sides of the cut bipartite graph"
            )));
        }
        for &(s, d) in &edges {
            if !srcs.contains(&s) || !dsts.contains(&d) {
                return Err(Error::InvalidInput(format!(
                    "edge ({s}, {d}) does not cross from the source side to the destination side"
                )));
            }
        }
        edges.sort_unstable();
        let before = edges.len();
        edges.dedup();
        if edges.len() != before {
            return Err(Error::InvalidInput("duplicate cut edge".into()));
        }
        let mut src_side = src_side;
        let mut dst_side = dst_side;
        src_side.sort_unstable();
        src_side.dedup();
        dst_side.sort_unstable();
        dst_side.dedup();
        Ok(CutBipartite { src_part, dst_part, src_side, dst_side, edges })
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    fn index_maps(&self) -> (HashMap<usize, usize>, HashMap<usize, usize>) {
        let src_idx = self.src_side.iter().enumerate().map(|(k, &g)| (g, k)).collect();
        let dst_idx = self.dst_side.iter().enumerate().map(|(k, &g)| (g, k)).collect();
        (src_idx, dst_idx)
    }

    fn left_adjacency(&self) -> Vec<Vec<usize>> {
        let (src_idx, dst_idx) = self.index_maps();
        let mut adj = vec![Vec::new(); self.src_side.len()];
        for &(s, d) in &self.edges {
            adj[src_idx[&s]].push(dst_idx[&d]);
        }
        adj
    }
}

/// Extracts the cut bipartite graph for receiver part `i` and sender part
/// `j` from already-built subgraphs.
pub fn build_cut_bipartite<T: Scalar>(subs: &[Subgraph<T>], i: usize, j: usize) -> Result<CutBipartite> {
    if i == j {
        return Err(Error::InvalidInput("cut bipartite graph requires two distinct parts".into()));
    }
    if i >= subs.len() || j >= subs.len() {
        return Err(Error::InvalidInput(format!("part index out of range for {} parts", subs.len())));
    }
    let edges = subs[i].cut_in[j].clone();
    let src_side: Vec<usize> = subs[i].boundary_in[j].clone();
    let mut dst_side: Vec<usize> = edges.iter().map(|&(_, d)| d).collect();
    dst_side.sort_unstable();
    dst_side.dedup();
    CutBipartite::new(j, i, src_side, dst_side, edges)
}

/// Maximum matching as `(src, dst)` global-id pairs, sorted by source.
pub fn hopcroft_karp(b: &CutBipartite) -> Vec<(usize, usize)> {
    let adj = b.left_adjacency();
    let match_u = matching::hopcroft_karp(b.src_side.len(), b.dst_side.len(), &adj);
    let mut pairs: Vec<(usize, usize)> = match_u
        .iter()
        .enumerate()
        .filter_map(|(u, v)| v.map(|v| (b.src_side[u], b.dst_side[v])))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Vertex cover of a cut bipartite graph, split by side.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexCover {
    pub cover_src: Vec<usize>,
    pub cover_dst: Vec<usize>,
}

impl VertexCover {
    pub fn size(&self) -> usize {
        self.cover_src.len() + self.cover_dst.len()
    }

    /// True when every edge has an endpoint in the cover.
    pub fn covers(&self, b: &CutBipartite) -> bool {
        let src: HashSet<usize> = self.cover_src.iter().copied().collect();
        let dst: HashSet<usize> = self.cover_dst.iter().copied().collect();
        b.edges.iter().all(|&(s, d)| src.contains(&s) || dst.contains(&d))
    }
}

/// Minimum vertex cover from a maximum matching via alternating-path
/// reachability: starting from unmatched sources, follow non-matching edges
/// left to right and matching edges right to left; the cover is the
/// unreached sources plus the reached destinations. Detects a non-maximum
/// matching (a reachable unmatched destination means an augmenting path)
/// and rejects it.
pub fn koenig_cover(b: &CutBipartite, matching: &[(usize, usize)]) -> Result<VertexCover> {
    let (src_idx, dst_idx) = b.index_maps();
    let edge_set: HashSet<(usize, usize)> = b.edges.iter().copied().collect();
    let nu = b.src_side.len();
    let nv = b.dst_side.len();
    let mut match_u = vec![None; nu];
    let mut match_v = vec![None; nv];
    for &(s, d) in matching {
        if !edge_set.contains(&(s, d)) {
            return Err(Error::InvalidInput(format!("matching pair ({s}, {d}) is not an edge")));
        }
        let (u, v) = (src_idx[&s], dst_idx[&d]);
        if match_u[u].is_some() || match_v[v].is_some() {
            return Err(Error::InvalidInput(format!("matching touches node {s} or {d} twice")));
        }
        match_u[u] = Some(v);
        match_v[v] = Some(u);
    }

    let adj = b.left_adjacency();
    let mut seen_u = vec![false; nu];
    let mut seen_v = vec![false; nv];
    let mut origin = vec![0usize; nu];
    let mut queue = VecDeque::new();
    for u in 0..nu {
        if match_u[u].is_none() {
            seen_u[u] = true;
            origin[u] = u;
            queue.push_back(u);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if Some(v) == match_u[u] || seen_v[v] {
                continue;
            }
            seen_v[v] = true;
            match match_v[v] {
                None => {
                    return Err(Error::MatchingNotMaximum { left: b.src_side[origin[u]] });
                }
                Some(w) => {
                    if !seen_u[w] {
                        seen_u[w] = true;
                        origin[w] = origin[u];
                        queue.push_back(w);
                    }
                }
            }
        }
    }

    let cover_src = (0..nu).filter(|&u| !seen_u[u]).map(|u| b.src_side[u]).collect();
    let cover_dst = (0..nv).filter(|&v| seen_v[v]).map(|v| b.dst_side[v]).collect();
    Ok(VertexCover { cover_src, cover_dst })
}

/// Exhaustive minimum vertex cover, used as a test oracle. Enumerates
/// subsets of the smaller side; the other side must pick up the far
/// endpoint of every edge the subset misses. Limited to 22 total vertices.
pub fn brute_force_mvc(b: &CutBipartite) -> Result<VertexCover> {
    // Only the smaller side is enumerated (the other side is forced), so
    // that is the side whose size bounds the 2^k search.
    if b.src_side.len().min(b.dst_side.len()) > 16 {
        return Err(Error::InvalidInput(format!(
            "brute force limited to 16 vertices on the smaller side, got {}",
            b.src_side.len().min(b.dst_side.len())
        )));
    }
    let (src_idx, dst_idx) = b.index_maps();
    let src_smaller = b.src_side.len() <= b.dst_side.len();
    let k = if src_smaller { b.src_side.len() } else { b.dst_side.len() };

    let mut best: Option<(usize, u32, Vec<bool>)> = None;
    for mask in 0u32..(1u32 << k) {
        let mut forced = vec![false; if src_smaller { b.dst_side.len() } else { b.src_side.len() }];
        for &(s, d) in &b.edges {
            let (own, other) = if src_smaller {
                (src_idx[&s], dst_idx[&d])
            } else {
                (dst_idx[&d], src_idx[&s])
            };
            if mask & (1 << own) == 0 {
                forced[other] = true;
            }
        }
        let size = mask.count_ones() as usize + forced.iter().filter(|&&f| f).count();
        if best.as_ref().map_or(true, |&(bs, _, _)| size < bs) {
            best = Some((size, mask, forced));
        }
    }
    let (_, mask, forced) = best.unwrap_or((0, 0, Vec::new()));
    let picked = |side: &[usize], m: u32| -> Vec<usize> {
        side.iter().enumerate().filter(|&(i, _)| m & (1 << i) != 0).map(|(_, &g)| g).collect()
    };
    let forced_ids = |side: &[usize], f: &[bool]| -> Vec<usize> {
        side.iter().enumerate().filter(|&(i, _)| f[i]).map(|(_, &g)| g).collect()
    };
    Ok(if src_smaller {
        VertexCover { cover_src: picked(&b.src_side, mask), cover_dst: forced_ids(&b.dst_side, &forced) }
    } else {
        VertexCover { cover_src: forced_ids(&b.src_side, &forced), cover_dst: picked(&b.dst_side, mask) }
    })
}

/// Row volumes for one ordered pair, in units of feature rows on the wire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairVolumes {
    /// One row per cut edge.
    pub vanilla: usize,
    /// One partial row per distinct destination.
    pub pre_only: usize,
    /// One raw row per distinct source.
    pub post_only: usize,
    /// Rows under the cover-based split.
    pub hybrid: usize,
}

/// Send/recv schedule for one ordered pair (sender -> receiver).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairPlan {
    /// Sources shipped raw, sorted; the receiver finishes their edges.
    pub post_sends: Vec<usize>,
    /// Destination -> sorted sources folded into one partial row on the
    /// sender; sorted by destination.
    pub pre_groups: Vec<(usize, Vec<usize>)>,
    pub volumes: PairVolumes,
    pub matching_size: usize,
}

impl PairPlan {
    /// Rows this pair puts on the wire per exchange.
    pub fn rows(&self) -> usize {
        self.post_sends.len() + self.pre_groups.len()
    }
}

/// Splits the cut edges along a minimum vertex cover: an edge whose source
/// is covered goes post-aggregation (raw row, source covers all its edges at
/// once); an edge covered only by its destination joins that destination's
/// pre-aggregation group. Sources win the tie when both endpoints are
/// covered, since their raw row is on the wire anyway.
pub fn classify_edges(b: &CutBipartite, cover: &VertexCover) -> Result<PairPlan> {
    let cover_src: HashSet<usize> = cover.cover_src.iter().copied().collect();
    let cover_dst: HashSet<usize> = cover.cover_dst.iter().copied().collect();
    let mut post: Vec<usize> = Vec::new();
    let mut pre: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(s, d) in &b.edges {
        if cover_src.contains(&s) {
            post.push(s);
        } else if cover_dst.contains(&d) {
            pre.entry(d).or_default().push(s);
        } else {
            return Err(Error::InvalidInput(format!("edge ({s}, {d}) is not covered")));
        }
    }
    post.sort_unstable();
    post.dedup();
    let mut pre_groups: Vec<(usize, Vec<usize>)> = pre.into_iter().collect();
    pre_groups.sort_unstable_by_key(|&(d, _)| d);
    for (_, srcs) in &mut pre_groups {
        srcs.sort_unstable();
    }

    let mut dsts: Vec<usize> = b.edges.iter().map(|&(_, d)| d).collect();
    dsts.sort_unstable();
    dsts.dedup();
    let mut srcs: Vec<usize> = b.edges.iter().map(|&(s, _)| s).collect();
    srcs.sort_unstable();
    srcs.dedup();
    let volumes = PairVolumes {
        vanilla: b.edges.len(),
        pre_only: dsts.len(),
        post_only: srcs.len(),
        hybrid: post.len() + pre_groups.len(),
    };
    Ok(PairPlan { post_sends: post, pre_groups, volumes, matching_size: 0 })
}

/// Complete communication plan over all ordered part pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CommPlan {
    pub num_parts: usize,
    /// `pairs[sender][receiver]`; the diagonal stays empty.
    pub pairs: Vec<Vec<PairPlan>>,
}

impl CommPlan {
    pub fn empty(num_parts: usize) -> Self {
        CommPlan { num_parts, pairs: vec![vec![PairPlan::default(); num_parts]; num_parts] }
    }

    pub fn pair(&self, sender: usize, receiver: usize) -> &PairPlan {
        &self.pairs[sender][receiver]
    }

    /// Sums volumes over all ordered pairs.
    pub fn total_volumes(&self) -> PairVolumes {
        let mut t = PairVolumes::default();
        for row in &self.pairs {
            for p in row {
                t.vanilla += p.volumes.vanilla;
                t.pre_only += p.volumes.pre_only;
                t.post_only += p.volumes.post_only;
                t.hybrid += p.volumes.hybrid;
            }
        }
        t
    }
}

/// Plans every ordered pair: bipartite extraction, maximum matching, cover,
/// classification.
pub fn plan_all<T: Scalar>(subs: &[Subgraph<T>]) -> Result<CommPlan> {
    let np = subs.len();
    let mut plan = CommPlan::empty(np);
    for receiver in 0..np {
        for sender in 0..np {
            if sender == receiver {
                continue;
            }
            let b = build_cut_bipartite(subs, receiver, sender)?;
            if b.is_empty() {
                continue;
            }
            let m = hopcroft_karp(&b);
            let cover = koenig_cover(&b, &m)?;
            let mut pair = classify_edges(&b, &cover)?;
            pair.matching_size = m.len();
            plan.pairs[sender][receiver] = pair;
        }
    }
    Ok(plan)
}

/// Renders the volume table as CSV: `pair,vanilla,pre,post,hybrid`, one row
/// per ordered pair, then a `#`-prefixed summary line with the totals and
/// the `min(pre, post) / hybrid` savings ratio.
pub fn volumes_csv(plan: &CommPlan) -> String {
    let mut out = String::from("pair,vanilla,pre,post,hybrid\n");
    for sender in 0..plan.num_parts {
        for receiver in 0..plan.num_parts {
            if sender == receiver {
                continue;
            }
            let p = plan.pair(sender, receiver);
            out.push_str(&format!(
                "{}->{},{},{},{},{}\n",
                sender, receiver, p.volumes.vanilla, p.volumes.pre_only, p.volumes.post_only, p.volumes.hybrid,
            ));
        }
    }
    let t = plan.total_volumes();
    let ratio = if t.hybrid > 0 { t.pre_only.min(t.post_only) as f64 / t.hybrid as f64 } else { 0.0 };
    out.push_str(&format!(
        "# totals,{},{},{},{} savings={ratio:.3}\n",
        t.vanilla, t.pre_only, t.post_only, t.hybrid,
    ));
    out
}

/// Serializes a plan to the versioned binary blob.
pub fn save_plan(plan: &CommPlan, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let err = |e| Error::io(path, e);
    w.write_all(&PLAN_MAGIC).map_err(err)?;
    w.write_all(&PLAN_VERSION.to_le_bytes()).map_err(err)?;
    w.write_all(&(plan.num_parts as u32).to_le_bytes()).map_err(err)?;
    for row in &plan.pairs {
        for p in row {
            w.write_all(&(p.post_sends.len() as u64).to_le_bytes()).map_err(err)?;
            for &s in &p.post_sends {
                w.write_all(&(s as u64).to_le_bytes()).map_err(err)?;
            }
            w.write_all(&(p.pre_groups.len() as u64).to_le_bytes()).map_err(err)?;
            for (d, srcs) in &p.pre_groups {
                w.write_all(&(*d as u64).to_le_bytes()).map_err(err)?;
                w.write_all(&(srcs.len() as u64).to_le_bytes()).map_err(err)?;
                for &s in srcs {
                    w.write_all(&(s as u64).to_le_bytes()).map_err(err)?;
                }
            }
            for v in [p.volumes.vanilla, p.volumes.pre_only, p.volumes.post_only, p.volumes.hybrid] {
                w.write_all(&(v as u64).to_le_bytes()).map_err(err)?;
            }
            w.write_all(&(p.matching_size as u64).to_le_bytes()).map_err(err)?;
        }
    }
    w.flush().map_err(err)
}

/// Reads a plan blob written by [`save_plan`].
pub fn load_plan(path: &Path) -> Result<CommPlan> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if magic != PLAN_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:02x?}, expected \"MGPL\"")));
    }
    let version = read_u32(&mut r, path)?;
    if version != PLAN_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}, expected {PLAN_VERSION}")));
    }
    let np = read_u32(&mut r, path)? as usize;
    let mut plan = CommPlan::empty(np);
    for sender in 0..np {
        for receiver in 0..np {
            let n_post = read_u64(&mut r, path)? as usize;
            let mut post_sends = Vec::with_capacity(n_post);
            for _ in 0..n_post {
                post_sends.push(read_u64(&mut r, path)? as usize);
            }
            let n_groups = read_u64(&mut r, path)? as usize;
            let mut pre_groups = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                let d = read_u64(&mut r, path)? as usize;
                let n_src = read_u64(&mut r, path)? as usize;
                let mut srcs = Vec::with_capacity(n_src);
                for _ in 0..n_src {
                    srcs.push(read_u64(&mut r, path)? as usize);
                }
                pre_groups.push((d, srcs));
            }
            let volumes = PairVolumes {
                vanilla: read_u64(&mut r, path)? as usize,
                pre_only: read_u64(&mut r, path)? as usize,
                post_only: read_u64(&mut r, path)? as usize,
                hybrid: read_u64(&mut r, path)? as usize,
            };
            let matching_size = read_u64(&mut r, path)? as usize;
            plan.pairs[sender][receiver] = PairPlan { post_sends, pre_groups, volumes, matching_size };
        }
    }
    Ok(plan)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "truncated file")
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}
