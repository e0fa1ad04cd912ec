//! Neighbor-aggregation kernels: `index_add` and SpMM.
//!
//! The optimized path sorts the destination index array (stable, so ties
//! keep their input order), clusters equal destinations, and processes each
//! cluster with a register-tiled inner kernel that accumulates a 1xN column
//! tile across the whole cluster before writing back. Threads get contiguous
//! FLOPs-balanced ranges; when there are too few clusters to feed the
//! threads, the plan splits the column dimension instead so every thread
//! owns a disjoint column slice of every cluster.
//!
//! [`PlanMode::Deterministic`] never cuts a cluster between threads, which
//! keeps the per-element accumulation order identical to the naive kernel
//! (bitwise-equal output, any float width). [`PlanMode::Balanced`] may split
//! giant clusters across threads with private accumulators that are reduced
//! afterwards, trading bitwise order for the load-balance guarantee.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::mat::{DenseMat, Scalar};

/// Default column-tile width in elements (one 64-byte line of FP32).
pub const DEFAULT_TILE: usize = 16;
/// Upper bound for the configurable tile width (stack accumulator size).
pub const MAX_TILE: usize = 64;
/// A plan splits columns instead of rows when clusters < this factor x threads.
pub const COL_SPLIT_FACTOR: usize = 4;
/// Load-balance tolerance: max per-thread FLOPs / mean must stay below this.
pub const BALANCE_TOL: f64 = 1.15;

/// Scheduling behavior of a gather/scatter plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PlanMode {
    /// Thread ranges may cut through a cluster; partial sums land in
    /// private buffers and are reduced after the parallel phase.
    #[default]
    Balanced,
    /// Thread ranges snap to cluster boundaries; output is bitwise equal to
    /// the naive kernel.
    Deterministic,
}

/// Plan construction knobs.
#[derive(Clone, Copy, Debug)]
pub struct PlanConfig {
    pub num_threads: usize,
    pub tile: usize,
    pub mode: PlanMode,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { num_threads: rayon::current_num_threads(), tile: DEFAULT_TILE, mode: PlanMode::Balanced }
    }
}

/// One thread's slice of work: sorted positions `[start, end)` restricted
/// to columns `[col_start, col_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThreadSpan {
    pub start: usize,
    pub end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl ThreadSpan {
    pub fn flops(&self) -> usize {
        (self.end - self.start) * (self.col_end - self.col_start)
    }
}

/// Sorted/clustered schedule for `dst[idx[k]] += src[k]`.
#[derive(Clone, Debug)]
pub struct GatherScatterPlan {
    pub f: usize,
    pub tile: usize,
    pub mode: PlanMode,
    /// `idx` stably sorted ascending.
    pub sorted_idx: Vec<usize>,
    /// `perm[k]` = source row feeding sorted position `k`.
    pub perm: Vec<usize>,
    /// Boundaries of equal-destination runs over sorted positions.
    pub cluster_offsets: Vec<usize>,
    pub spans: Vec<ThreadSpan>,
    max_idx: Option<usize>,
    /// True when `perm` is a permutation of `0..src_rows` (index_add); CSR
    /// gather plans read source rows many times instead.
    one_to_one: bool,
}

impl GatherScatterPlan {
    pub fn num_clusters(&self) -> usize {
        self.cluster_offsets.len() - 1
    }

    /// Per-span FLOPs, for load-balance checks.
    pub fn span_flops(&self) -> Vec<usize> {
        self.spans.iter().map(ThreadSpan::flops).collect()
    }
}

/// Reference semantics: `dst[idx[k]] += src[k]` in index order.
pub fn index_add_naive<T: Scalar>(dst: &mut DenseMat<T>, src: &DenseMat<T>, idx: &[usize]) -> Result<()> {
    if idx.len() != src.rows() {
        return Err(Error::Shape(format!("{} indices for {} source rows", idx.len(), src.rows())));
    }
    if dst.cols() != src.cols() {
        return Err(Error::Shape(format!("dst has {} columns, src has {}", dst.cols(), src.cols())));
    }
    for (k, &d) in idx.iter().enumerate() {
        if d >= dst.rows() {
            return Err(Error::InvalidInput(format!("index {d} out of range for {} rows", dst.rows())));
        }
        let srow = src.row(k);
        let drow = dst.row_mut(d);
        for (a, &b) in drow.iter_mut().zip(srow) {
            *a += b;
        }
    }
    Ok(())
}

/// Plans with default tile width and balanced mode.
pub fn build_plan(idx: &[usize], f: usize, num_threads: usize) -> GatherScatterPlan {
    build_plan_with(idx, f, &PlanConfig { num_threads, ..PlanConfig::default() })
}

/// Stable-sorts the index array, delimits clusters, and lays out thread
/// spans (row ranges, or column slices when clusters are scarce).
pub fn build_plan_with(idx: &[usize], f: usize, cfg: &PlanConfig) -> GatherScatterPlan {
    let n = idx.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by_key(|&k| idx[k]);
    let sorted_idx: Vec<usize> = perm.iter().map(|&k| idx[k]).collect();
    let mut cluster_offsets = vec![0usize];
    for k in 1..n {
        if sorted_idx[k] != sorted_idx[k - 1] {
            cluster_offsets.push(k);
        }
    }
    if n > 0 {
        cluster_offsets.push(n);
    }
    let max_idx = sorted_idx.last().copied();
    plan_from_clusters(sorted_idx, perm, cluster_offsets, max_idx, f, cfg, true)
}

/// Plans SpMM over a CSR adjacency directly: rows are already clustered by
/// destination, and the permutation is the column-index array (which source
/// row each sorted position reads).
pub fn csr_plan(row_offsets: &[usize], col_indices: &[usize], f: usize, cfg: &PlanConfig) -> GatherScatterPlan {
    let num_rows = row_offsets.len() - 1;
    let mut sorted_idx = Vec::with_capacity(col_indices.len());
    let mut cluster_offsets = vec![0usize];
    for d in 0..num_rows {
        let len = row_offsets[d + 1] - row_offsets[d];
        if len > 0 {
            sorted_idx.extend(std::iter::repeat(d).take(len));
            cluster_offsets.push(sorted_idx.len());
        }
    }
    if sorted_idx.is_empty() {
        cluster_offsets.truncate(1);
    }
    let max_idx = sorted_idx.last().copied();
    plan_from_clusters(sorted_idx, col_indices.to_vec(), cluster_offsets, max_idx, f, cfg, false)
}

fn plan_from_clusters(
    sorted_idx: Vec<usize>,
    perm: Vec<usize>,
    cluster_offsets: Vec<usize>,
    max_idx: Option<usize>,
    f: usize,
    cfg: &PlanConfig,
    one_to_one: bool,
) -> GatherScatterPlan {
    let n = sorted_idx.len();
    let tile = cfg.tile.clamp(1, MAX_TILE);
    let threads = cfg.num_threads.max(1);
    let n_clusters = cluster_offsets.len() - 1;

    let spans = if n == 0 || f == 0 {
        Vec::new()
    } else if n_clusters < COL_SPLIT_FACTOR * threads {
        balanced_ranges(f, threads)
            .into_iter()
            .map(|(c0, c1)| ThreadSpan { start: 0, end: n, col_start: c0, col_end: c1 })
            .collect()
    } else {
        match cfg.mode {
            PlanMode::Balanced => balanced_ranges(n, threads)
                .into_iter()
                .map(|(a, b)| ThreadSpan { start: a, end: b, col_start: 0, col_end: f })
                .collect(),
            PlanMode::Deterministic => cluster_aligned_ranges(&cluster_offsets, threads)
                .into_iter()
                .map(|(a, b)| ThreadSpan { start: a, end: b, col_start: 0, col_end: f })
                .collect(),
        }
    };
    GatherScatterPlan { f, tile, mode: cfg.mode, sorted_idx, perm, cluster_offsets, spans, max_idx, one_to_one }
}

/// Splits `0..total` into at most `want` near-equal ranges whose max/mean
/// size stays within [`BALANCE_TOL`]; uses fewer ranges when the counts are
/// too small to balance.
fn balanced_ranges(total: usize, want: usize) -> Vec<(usize, usize)> {
    if total == 0 {
        return Vec::new();
    }
    let mut t = want.clamp(1, total);
    while t > 1 {
        let q = total / t;
        let r = total % t;
        if r == 0 || ((q + 1) * t) as f64 <= BALANCE_TOL * total as f64 {
            break;
        }
        t -= 1;
    }
    let q = total / t;
    let r = total % t;
    let mut out = Vec::with_capacity(t);
    let mut pos = 0;
    for i in 0..t {
        let len = q + usize::from(i < r);
        out.push((pos, pos + len));
        pos += len;
    }
    out
}

/// Greedy FLOPs-balanced ranges that never cut a cluster.
fn cluster_aligned_ranges(cluster_offsets: &[usize], threads: usize) -> Vec<(usize, usize)> {
    let n_clusters = cluster_offsets.len() - 1;
    let total = *cluster_offsets.last().unwrap();
    if total == 0 {
        return Vec::new();
    }
    let threads = threads.clamp(1, n_clusters);
    let target = total as f64 / threads as f64;
    let mut out = Vec::with_capacity(threads);
    let mut start = 0usize;
    let mut next_boundary = 1usize;
    for c in 0..n_clusters {
        let end = cluster_offsets[c + 1];
        let remaining_threads = threads - out.len();
        if remaining_threads <= 1 {
            continue;
        }
        if end as f64 >= target * next_boundary as f64 || n_clusters - (c + 1) < remaining_threads - 1 {
            out.push((start, end));
            start = end;
            next_boundary += 1;
        }
    }
    out.push((start, total));
    out
}

struct SendPtr<T>(*mut T);

impl<T> SendPtr<T> {
    fn get(&self) -> *mut T {
        self.0
    }
}

// Safety: spans either own disjoint destination rows (cluster-aligned row
// ranges; partial clusters go through private buffers) or disjoint column
// slices, so no element is written by two threads.
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// Executes a plan: `dst[sorted_idx[k]] += src[perm[k]]` with tiled
/// per-cluster accumulation.
pub fn index_add_opt<T: Scalar>(dst: &mut DenseMat<T>, src: &DenseMat<T>, plan: &GatherScatterPlan) -> Result<()> {
    if plan.one_to_one && plan.sorted_idx.len() != src.rows() {
        return Err(Error::Shape(format!(
            "plan covers {} source rows, got {}",
            plan.sorted_idx.len(),
            src.rows()
        )));
    }
    if plan.f != src.cols() || plan.f != dst.cols() {
        return Err(Error::Shape(format!(
            "plan built for {} columns, dst has {}, src has {}",
            plan.f,
            dst.cols(),
            src.cols()
        )));
    }
    if let Some(m) = plan.max_idx {
        if m >= dst.rows() {
            return Err(Error::InvalidInput(format!("index {m} out of range for {} rows", dst.rows())));
        }
    }
    if let Some(&p) = plan.perm.iter().max() {
        if p >= src.rows() {
            return Err(Error::InvalidInput(format!("permutation entry {p} out of range for {} source rows", src.rows())));
        }
    }

    let f = plan.f;
    let dst_ptr = SendPtr(dst.data_mut().as_mut_ptr());
    let fragments: Vec<Vec<(usize, usize, usize, Vec<T>)>> = plan
        .spans
        .par_iter()
        .map(|span| {
            let mut frags = Vec::new();
            let offs = &plan.cluster_offsets;
            // Cluster containing the span start: offsets are strictly
            // increasing and begin at 0, so the subtraction is in range.
            let mut c = offs.partition_point(|&o| o <= span.start) - 1;
            while c + 1 < offs.len() && offs[c] < span.end {
                let (cs, ce) = (offs[c], offs[c + 1]);
                let a = cs.max(span.start);
                let b = ce.min(span.end);
                if a < b {
                    let d = plan.sorted_idx[a];
                    if a == cs && b == ce {
                        // Whole cluster: seed the tile from dst so the add
                        // sequence matches the naive kernel exactly.
                        // Safety: this span is the only writer of row d in
                        // these columns (see SendPtr note).
                        unsafe {
                            let out = dst_ptr.get().add(d * f + span.col_start);
                            add_cluster_into(out, src, &plan.perm[a..b], span.col_start, span.col_end, plan.tile, true);
                        }
                    } else {
                        let w = span.col_end - span.col_start;
                        let mut acc = vec![T::zero(); w];
                        // Safety: acc holds exactly the span's column range.
                        unsafe {
                            add_cluster_into(
                                acc.as_mut_ptr(),
                                src,
                                &plan.perm[a..b],
                                span.col_start,
                                span.col_end,
                                plan.tile,
                                false,
                            );
                        }
                        frags.push((d, span.col_start, span.col_end, acc));
                    }
                }
                c += 1;
            }
            frags
        })
        .collect();

    for frags in fragments {
        for (d, c0, c1, acc) in frags {
            let drow = &mut dst.row_mut(d)[c0..c1];
            for (a, b) in drow.iter_mut().zip(acc) {
                *a += b;
            }
        }
    }
    Ok(())
}

/// Accumulates `sum of src[perm[..]]` over source columns `[c0, c1)` into
/// the `c1 - c0` elements behind `out`, one 1xTILE register tile at a time.
///
/// Safety: `out.add(j)` must be valid for `j < c1 - c0` and unaliased by
/// other threads.
unsafe fn add_cluster_into<T: Scalar>(
    out: *mut T,
    src: &DenseMat<T>,
    perm: &[usize],
    c0: usize,
    c1: usize,
    tile: usize,
    seed_from_out: bool,
) {
    let mut acc = [T::zero(); MAX_TILE];
    let mut c = c0;
    while c < c1 {
        let w = tile.min(c1 - c);
        let base = c - c0;
        for j in 0..w {
            acc[j] = if seed_from_out { *out.add(base + j) } else { T::zero() };
        }
        for &p in perm {
            let srow = &src.row(p)[c..c + w];
            for j in 0..w {
                acc[j] += srow[j];
            }
        }
        for j in 0..w {
            *out.add(base + j) = acc[j];
        }
        c += w;
    }
}

/// Aggregation flavor for [`spmm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggMode {
    Sum,
    /// Sum divided by in-degree; isolated nodes yield zero rows.
    Mean,
}

/// `out[i] = aggregate of dense rows over i's in-neighbors`, using the same
/// clustering/tiling machinery as `index_add`.
pub fn spmm<T: Scalar>(g: &CsrGraph<T>, dense: &DenseMat<T>, mode: AggMode) -> Result<DenseMat<T>> {
    spmm_with(g, dense, mode, &PlanConfig::default())
}

pub fn spmm_with<T: Scalar>(
    g: &CsrGraph<T>,
    dense: &DenseMat<T>,
    mode: AggMode,
    cfg: &PlanConfig,
) -> Result<DenseMat<T>> {
    if dense.rows() != g.num_nodes() {
        return Err(Error::Shape(format!(
            "dense has {} rows, graph has {} nodes",
            dense.rows(),
            g.num_nodes()
        )));
    }
    let plan = csr_plan(g.row_offsets(), g.col_indices(), dense.cols(), cfg);
    let mut out = DenseMat::zeros(g.num_nodes(), dense.cols());
    index_add_opt(&mut out, dense, &plan)?;
    if mode == AggMode::Mean {
        for v in 0..g.num_nodes() {
            let deg = g.in_degree(v);
            if deg > 0 {
                let inv = T::from_f64(1.0 / deg as f64);
                for x in out.row_mut(v) {
                    *x *= inv;
                }
            }
        }
    }
    Ok(out)
}

/// Timing sample comparing the naive and planned kernels.
#[derive(Clone, Copy, Debug)]
pub struct BenchPoint {
    pub src_rows: usize,
    pub dst_rows: usize,
    pub f: usize,
    pub threads: usize,
    pub naive_ns: u64,
    pub opt_ns: u64,
}

impl BenchPoint {
    pub fn speedup(&self) -> f64 {
        self.naive_ns as f64 / self.opt_ns.max(1) as f64
    }
}

/// Benchmarks both kernels on a random scatter workload inside a dedicated
/// thread pool.
pub fn bench_index_add(src_rows: usize, dst_rows: usize, f: usize, threads: usize, iters: usize, seed: u64) -> BenchPoint {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..src_rows).map(|_| rng.gen_range(0..dst_rows)).collect();
    let data: Vec<f32> = (0..src_rows * f).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let src = DenseMat::from_vec(src_rows, f, data);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
    let plan = build_plan(&idx, f, threads);
    let mut naive_total = 0u64;
    let mut opt_total = 0u64;
    pool.install(|| {
        for _ in 0..iters {
            let mut dst = DenseMat::<f32>::zeros(dst_rows, f);
            let t0 = std::time::Instant::now();
            index_add_naive(&mut dst, &src, &idx).unwrap();
            naive_total += t0.elapsed().as_nanos() as u64;

            let mut dst = DenseMat::<f32>::zeros(dst_rows, f);
            let t1 = std::time::Instant::now();
            index_add_opt(&mut dst, &src, &plan).unwrap();
            opt_total += t1.elapsed().as_nanos() as u64;
        }
    });
    BenchPoint {
        src_rows,
        dst_rows,
        f,
        threads,
        naive_ns: naive_total / iters.max(1) as u64,
        opt_ns: opt_total / iters.max(1) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f32, b: f32) -> bool {
        (a - b).abs() <= 1e-6 + 1e-6 * a.abs().max(b.abs())
    }

    #[test]
    fn naive_accumulates_in_index_order() {
        let mut dst = DenseMat::<f64>::zeros(2, 2);
        let src = DenseMat::from_vec(2, 2, vec![1.0, 1.0, 2.0, 2.0]);
        index_add_naive(&mut dst, &src, &[0, 0]).unwrap();
        assert_eq!(dst.data(), &[3.0, 3.0, 0.0, 0.0]);

        let mut dst = DenseMat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        index_add_naive(&mut dst, &src, &[0, 1]).unwrap();
        assert_eq!(dst.data(), &[2.0, 1.0, 2.0, 3.0]);

        let mut dst = DenseMat::<f64>::zeros(2, 2);
        index_add_naive(&mut dst, &src, &[1, 0]).unwrap();
        assert_eq!(dst.data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn naive_rejects_bad_inputs() {
        let src = DenseMat::<f32>::zeros(2, 2);
        let mut dst = DenseMat::<f32>::zeros(2, 2);
        assert!(index_add_naive(&mut dst, &src, &[0]).is_err());
        assert!(index_add_naive(&mut dst, &src, &[0, 2]).is_err());
        let mut narrow = DenseMat::<f32>::zeros(2, 1);
        assert!(index_add_naive(&mut narrow, &src, &[0, 1]).is_err());
    }

    #[test]
    fn plan_sorts_and_clusters() {
        let plan = build_plan(&[2, 0, 2, 1], 3, 2);
        assert_eq!(plan.sorted_idx, vec![0, 1, 2, 2]);
        assert_eq!(plan.cluster_offsets, vec![0, 1, 2, 4]);
        assert_eq!(plan.perm, vec![1, 3, 0, 2]);
    }

    #[test]
    fn single_cluster_splits_columns() {
        let plan = build_plan(&[5; 100], 32, 4);
        assert_eq!(plan.num_clusters(), 1);
        assert!(plan.spans.len() > 1);
        let mut cols: Vec<(usize, usize)> = plan.spans.iter().map(|s| (s.col_start, s.col_end)).collect();
        cols.sort_unstable();
        assert_eq!(cols.first().unwrap().0, 0);
        assert_eq!(cols.last().unwrap().1, 32);
        for w in cols.windows(2) {
            assert_eq!(w[0].1, w[1].0, "column slices must tile the width");
        }
        for s in &plan.spans {
            assert_eq!((s.start, s.end), (0, 100));
        }
    }

    #[test]
    fn sorted_distinct_idx_gives_identity_perm() {
        let plan = build_plan(&[0, 1, 2, 3], 4, 1);
        assert_eq!(plan.perm, vec![0, 1, 2, 3]);
        assert_eq!(plan.cluster_offsets, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn stable_sort_keeps_input_order_within_cluster() {
        let plan = build_plan(&[1, 1, 1, 0], 2, 1);
        assert_eq!(plan.perm, vec![3, 0, 1, 2]);
    }

    fn random_instance(rng: &mut ChaCha8Rng, max_rows: usize) -> (usize, usize, Vec<usize>, DenseMat<f32>) {
        let f = *[1usize, 7, 16, 33, 256].iter().nth(rng.gen_range(0..5)).unwrap();
        let src_rows = rng.gen_range(1..=max_rows);
        let dst_rows = rng.gen_range(1..=max_rows);
        let idx: Vec<usize> = (0..src_rows).map(|_| rng.gen_range(0..dst_rows)).collect();
        let data: Vec<f32> = (0..src_rows * f).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        (f, dst_rows, idx, DenseMat::from_vec(src_rows, f, data))
    }

    #[test]
    fn optimized_matches_naive_fp32() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..100 {
            let (f, dst_rows, idx, src) = random_instance(&mut rng, 128);
            let cfg = PlanConfig {
                num_threads: rng.gen_range(1..=8),
                tile: *[1, 4, 16, 64].iter().nth(rng.gen_range(0..4)).unwrap(),
                mode: if rng.gen_bool(0.5) { PlanMode::Balanced } else { PlanMode::Deterministic },
            };
            let plan = build_plan_with(&idx, f, &cfg);
            let base: Vec<f32> = (0..dst_rows * f).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let mut naive = DenseMat::from_vec(dst_rows, f, base.clone());
            let mut opt = DenseMat::from_vec(dst_rows, f, base);
            index_add_naive(&mut naive, &src, &idx).unwrap();
            index_add_opt(&mut opt, &src, &plan).unwrap();
            for (a, b) in naive.data().iter().zip(opt.data()) {
                assert!(close(*a, *b), "case {case} ({cfg:?}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn deterministic_mode_is_bitwise_equal_in_fp64() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let (f, dst_rows, idx, src32) = random_instance(&mut rng, 96);
            let src = src32.cast::<f64>();
            let cfg = PlanConfig { num_threads: rng.gen_range(1..=8), tile: 16, mode: PlanMode::Deterministic };
            let plan = build_plan_with(&idx, f, &cfg);
            let mut naive = DenseMat::<f64>::zeros(dst_rows, f);
            let mut opt = DenseMat::<f64>::zeros(dst_rows, f);
            index_add_naive(&mut naive, &src, &idx).unwrap();
            index_add_opt(&mut opt, &src, &plan).unwrap();
            assert_eq!(naive.data(), opt.data());
        }
    }

    #[test]
    fn balanced_plans_meet_flops_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let rows = rng.gen_range(64..512);
            let dsts = rng.gen_range(40..rows.max(41));
            let idx: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..dsts)).collect();
            let threads = rng.gen_range(2..=8);
            let plan = build_plan_with(&idx, 64, &PlanConfig { num_threads: threads, tile: 16, mode: PlanMode::Balanced });
            let flops = plan.span_flops();
            let max = *flops.iter().max().unwrap() as f64;
            let mean = flops.iter().sum::<usize>() as f64 / flops.len() as f64;
            assert!(max / mean <= BALANCE_TOL + 1e-12, "max {max} mean {mean}");
        }
    }

    #[test]
    fn spmm_on_triangle_sums_other_rows() {
        let g = CsrGraph::<f64>::from_edges(3, &[(0, 1), (1, 2), (2, 0)], true).unwrap();
        let h = DenseMat::from_vec(3, 2, vec![1.0, 10.0, 2.0, 20.0, 4.0, 40.0]);
        let sum = spmm(&g, &h, AggMode::Sum).unwrap();
        assert_eq!(sum.data(), &[6.0, 60.0, 5.0, 50.0, 3.0, 30.0]);
        let mean = spmm(&g, &h, AggMode::Mean).unwrap();
        assert_eq!(mean.data(), &[3.0, 30.0, 2.5, 25.0, 1.5, 15.0]);
    }

    #[test]
    fn spmm_on_edgeless_graph_is_zero() {
        let g = CsrGraph::<f32>::from_edges(4, &[], false).unwrap();
        let h = DenseMat::from_vec(4, 3, (0..12).map(|i| i as f32).collect());
        let out = spmm(&g, &h, AggMode::Mean).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spmm_matches_dense_oracle() {
        let g = crate::graph::synth::gnp(32, 0.2, false, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let h = DenseMat::from_vec(32, 9, (0..32 * 9).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let out = spmm(&g, &h, AggMode::Sum).unwrap();

        let mut a = DenseMat::<f32>::zeros(32, 32);
        for v in 0..32 {
            for &u in g.in_neighbors(v) {
                a.set(v, u, 1.0);
            }
        }
        let oracle = a.matmul(&h);
        for (x, y) in out.data().iter().zip(oracle.data()) {
            assert!(close(*x, *y), "{x} vs {y}");
        }
    }

    #[test]
    fn index_add_is_linear_in_fp64() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let idx: Vec<usize> = (0..40).map(|_| rng.gen_range(0..10)).collect();
        let s1 = DenseMat::from_vec(40, 5, (0..200).map(|_| rng.gen_range(-1.0f64..1.0)).collect());
        let s2 = DenseMat::from_vec(40, 5, (0..200).map(|_| rng.gen_range(-1.0f64..1.0)).collect());
        let base = DenseMat::from_vec(10, 5, (0..50).map(|_| rng.gen_range(-1.0f64..1.0)).collect());
        let (alpha, beta) = (0.5, -2.0);

        let mut combo = s1.clone();
        combo.scale(alpha);
        combo.axpy(beta, &s2);
        let mut lhs = base.clone();
        index_add_naive(&mut lhs, &combo, &idx).unwrap();

        let mut a1 = DenseMat::<f64>::zeros(10, 5);
        index_add_naive(&mut a1, &s1, &idx).unwrap();
        let mut a2 = DenseMat::<f64>::zeros(10, 5);
        index_add_naive(&mut a2, &s2, &idx).unwrap();
        let mut rhs = base;
        rhs.axpy(alpha, &a1);
        rhs.axpy(beta, &a2);

        assert!(lhs.max_abs_diff(&rhs) < 1e-12, "diff {}", lhs.max_abs_diff(&rhs));
    }

    #[test]
    fn empty_source_is_a_no_op() {
        let plan = build_plan(&[], 4, 4);
        let src = DenseMat::<f32>::zeros(0, 4);
        let mut dst = DenseMat::from_vec(2, 4, vec![1.0; 8]);
        index_add_opt(&mut dst, &src, &plan).unwrap();
        assert_eq!(dst.data(), &[1.0; 8]);
    }

    #[test]
    fn single_column_matrices_work() {
        let idx = vec![0, 1, 1, 0];
        let src = DenseMat::from_vec(4, 1, vec![1.0f32, 2.0, 3.0, 4.0]);
        let plan = build_plan(&idx, 1, 3);
        let mut dst = DenseMat::<f32>::zeros(2, 1);
        index_add_opt(&mut dst, &src, &plan).unwrap();
        assert_eq!(dst.data(), &[5.0, 5.0]);
    }

    #[test]
    fn optimized_rejects_mismatched_shapes() {
        let plan = build_plan(&[0, 1], 4, 1);
        let src = DenseMat::<f32>::zeros(2, 4);
        let mut small = DenseMat::<f32>::zeros(1, 4);
        assert!(index_add_opt(&mut small, &src, &plan).is_err());
        let mut dst = DenseMat::<f32>::zeros(2, 3);
        assert!(index_add_opt(&mut dst, &src, &plan).is_err());
        let short = DenseMat::<f32>::zeros(1, 4);
        let mut dst = DenseMat::<f32>::zeros(2, 4);
        assert!(index_add_opt(&mut dst, &short, &plan).is_err());
    }
}
