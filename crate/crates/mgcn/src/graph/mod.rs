//! Graph representation, file IO, partitioning, and per-worker subgraphs.
//!
//! A [`CsrGraph`] stores, for every node, the list of its in-neighbors: row
//! `v` holds the sources `u` of edges `u -> v`. Aggregation for node `v`
//! therefore reads row `v`. Edge-list input lines are `src dst` and populate
//! row `dst`.

pub mod partition;
pub mod synth;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::{DenseMat, Scalar};

pub use partition::{import_partition, partition_weighted, save_partition, Partition, WeightMode};

/// Magic bytes of the binary CSR container.
pub const BINARY_MAGIC: [u8; 4] = *b"MGCN";
/// Current binary container version.
pub const BINARY_VERSION: u32 = 1;

/// Compressed sparse row graph over in-neighbors, with optional node
/// features, labels (`-1` = unlabeled), and train/val/test masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrGraph<T: Scalar = f32> {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    features: DenseMat<T>,
    labels: Vec<i32>,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
}

impl<T: Scalar> CsrGraph<T> {
    /// Builds a canonical graph (rows sorted, duplicate edges removed) from
    /// an edge list of `(src, dst)` pairs. With `symmetrize`, every edge also
    /// adds its reverse.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)], symmetrize: bool) -> Result<Self> {
        for &(s, d) in edges {
            if s >= num_nodes || d >= num_nodes {
                return Err(Error::InvalidInput(format!(
                    "edge ({s}, {d}) out of range for {num_nodes} nodes"
                )));
            }
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(s, d) in edges {
            rows[d].push(s);
            if symmetrize && s != d {
                rows[s].push(d);
            }
        }
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        Ok(CsrGraph {
            num_nodes,
            row_offsets,
            col_indices,
            features: DenseMat::zeros(num_nodes, 0),
            labels: vec![-1; num_nodes],
            train_mask: vec![false; num_nodes],
            val_mask: vec![false; num_nodes],
            test_mask: vec![false; num_nodes],
        })
    }

    /// Assembles a graph from already-canonical CSR arrays, validating the
    /// usual invariants (monotone offsets, in-range sorted unique columns).
    pub fn from_csr(num_nodes: usize, row_offsets: Vec<usize>, col_indices: Vec<usize>) -> Result<Self> {
        if row_offsets.len() != num_nodes + 1 || row_offsets[0] != 0 {
            return Err(Error::InvalidInput("row_offsets must have num_nodes+1 entries starting at 0".into()));
        }
        if *row_offsets.last().unwrap() != col_indices.len() {
            return Err(Error::InvalidInput("row_offsets end must equal col_indices length".into()));
        }
        for w in row_offsets.windows(2) {
            if w[1] < w[0] {
                return Err(Error::InvalidInput("row_offsets must be non-decreasing".into()));
            }
        }
        for v in 0..num_nodes {
            let row = &col_indices[row_offsets[v]..row_offsets[v + 1]];
            for pair in row.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::InvalidInput(format!("row {v} is not strictly increasing")));
                }
            }
            if let Some(&c) = row.last() {
                if c >= num_nodes {
                    return Err(Error::InvalidInput(format!("column {c} out of range in row {v}")));
                }
            }
        }
        Ok(CsrGraph {
            num_nodes,
            row_offsets,
            col_indices,
            features: DenseMat::zeros(num_nodes, 0),
            labels: vec![-1; num_nodes],
            train_mask: vec![false; num_nodes],
            val_mask: vec![false; num_nodes],
            test_mask: vec![false; num_nodes],
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    /// In-neighbors (edge sources) of `v`.
    pub fn in_neighbors(&self, v: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[v]..self.row_offsets[v + 1]]
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.row_offsets[v + 1] - self.row_offsets[v]
    }

    /// All edges as `(src, dst)` pairs, destination-major.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |v| self.in_neighbors(v).iter().map(move |&u| (u, v)))
    }

    pub fn features(&self) -> &DenseMat<T> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[bool] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    pub fn set_features(&mut self, features: DenseMat<T>) -> Result<()> {
        if features.rows() != self.num_nodes {
            return Err(Error::Shape(format!(
                "features have {} rows, graph has {} nodes",
                features.rows(),
                self.num_nodes
            )));
        }
        self.features = features;
        Ok(())
    }

    pub fn set_labels(&mut self, labels: Vec<i32>) -> Result<()> {
        if labels.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = labels;
        Ok(())
    }

    pub fn set_masks(&mut self, train: Vec<bool>, val: Vec<bool>, test: Vec<bool>) -> Result<()> {
        if train.len() != self.num_nodes || val.len() != self.num_nodes || test.len() != self.num_nodes {
            return Err(Error::Shape("mask length must equal node count".into()));
        }
        self.train_mask = train;
        self.val_mask = val;
        self.test_mask = test;
        Ok(())
    }

    /// Number of distinct classes, `max(labels) + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m.max(-1) + 1) as usize)
    }

    /// CSR arrays of the reversed adjacency (row `v` holds out-neighbors).
    pub fn structure_transpose(&self) -> (Vec<usize>, Vec<usize>) {
        let mut counts = vec![0usize; self.num_nodes + 1];
        for &u in &self.col_indices {
            counts[u + 1] += 1;
        }
        for i in 0..self.num_nodes {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = offsets.clone();
        let mut cols = vec![0usize; self.col_indices.len()];
        for v in 0..self.num_nodes {
            for &u in self.in_neighbors(v) {
                cols[cursor[u]] = v;
                cursor[u] += 1;
            }
        }
        (offsets, cols)
    }

    /// CSR arrays of the union of in- and out-neighbors, used where an
    /// undirected view is needed (BFS growth, refinement gains).
    pub fn undirected_structure(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.num_nodes];
        for (u, v) in self.edges() {
            if u != v {
                rows[v].push(u);
                rows[u].push(v);
            }
        }
        let mut offsets = Vec::with_capacity(self.num_nodes + 1);
        offsets.push(0);
        let mut cols = Vec::new();
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            cols.extend_from_slice(row);
            offsets.push(cols.len());
        }
        (offsets, cols)
    }

    /// Casts features into another scalar type, keeping structure and labels.
    pub fn cast<U: Scalar>(&self) -> CsrGraph<U> {
        CsrGraph {
            num_nodes: self.num_nodes,
            row_offsets: self.row_offsets.clone(),
            col_indices: self.col_indices.clone(),
            features: self.features.cast(),
            labels: self.labels.clone(),
            train_mask: self.train_mask.clone(),
            val_mask: self.val_mask.clone(),
            test_mask: self.test_mask.clone(),
        }
    }
}

/// Supported on-disk graph encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphFormat {
    EdgeList,
    BinaryCsr,
}

/// Loads a graph in either format. `num_nodes` overrides the node count for
/// edge lists (otherwise `max id + 1`); `symmetrize` adds reverse edges.
pub fn load_graph(
    path: &Path,
    format: GraphFormat,
    symmetrize: bool,
    num_nodes: Option<usize>,
) -> Result<CsrGraph<f32>> {
    match format {
        GraphFormat::EdgeList => load_edge_list(path, symmetrize, num_nodes),
        GraphFormat::BinaryCsr => {
            let g = load_binary(path)?;
            if symmetrize {
                let edges: Vec<_> = g.edges().collect();
                let mut out = CsrGraph::from_edges(g.num_nodes(), &edges, true)?;
                out.features = g.features;
                out.labels = g.labels;
                out.train_mask = g.train_mask;
                out.val_mask = g.val_mask;
                out.test_mask = g.test_mask;
                Ok(out)
            } else {
                Ok(g)
            }
        }
    }
}

/// Parses a `src dst` edge list; `#` starts a comment, blank lines are
/// skipped.
pub fn load_edge_list(path: &Path, symmetrize: bool, num_nodes: Option<usize>) -> Result<CsrGraph<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut edges = Vec::new();
    let mut max_id = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut it = text.split_whitespace();
        let src: usize = it
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(path, lineno, "source id is not a non-negative integer"))?;
        let dst: usize = it
            .next()
            .ok_or_else(|| Error::parse(path, lineno, "expected 'src dst'"))?
            .parse()
            .map_err(|_| Error::parse(path, lineno, "destination id is not a non-negative integer"))?;
        if it.next().is_some() {
            return Err(Error::parse(path, lineno, "expected exactly two ids per line"));
        }
        if let Some(n) = num_nodes {
            if src >= n || dst >= n {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("node id out of range for declared {n} nodes"),
                ));
            }
        }
        max_id = max_id.max(src).max(dst);
        edges.push((src, dst));
    }
    let n = num_nodes.unwrap_or(if edges.is_empty() { 0 } else { max_id + 1 });
    CsrGraph::from_edges(n, &edges, symmetrize)
}

/// Loads a whitespace-separated feature sidecar, one row per node.
pub fn load_features(path: &Path, num_nodes: usize) -> Result<DenseMat<f32>> {
    let rows = load_numeric_rows(path)?;
    if rows.len() != num_nodes {
        return Err(Error::format(path, format!("{} feature rows for {} nodes", rows.len(), num_nodes)));
    }
    let cols = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::format(path, format!("row {} has {} values, expected {}", i + 1, r.len(), cols)));
        }
    }
    Ok(DenseMat::from_rows(&rows))
}

/// Loads a label sidecar, one class id per node, `-1` = unlabeled.
pub fn load_labels(path: &Path, num_nodes: usize) -> Result<Vec<i32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let v: i32 = text
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "label is not an integer"))?;
        labels.push(v);
    }
    if labels.len() != num_nodes {
        return Err(Error::format(path, format!("{} labels for {} nodes", labels.len(), num_nodes)));
    }
    Ok(labels)
}

/// Loads a boolean mask sidecar (`0`/`1` per line).
pub fn load_mask(path: &Path, num_nodes: usize) -> Result<Vec<bool>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut mask = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        match text {
            "0" | "false" => mask.push(false),
            "1" | "true" => mask.push(true),
            other => {
                return Err(Error::parse(path, idx + 1, format!("mask value '{other}' is not 0/1")));
            }
        }
    }
    if mask.len() != num_nodes {
        return Err(Error::format(path, format!("{} mask entries for {} nodes", mask.len(), num_nodes)));
    }
    Ok(mask)
}

fn load_numeric_rows(path: &Path) -> Result<Vec<Vec<f32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in text.split_whitespace() {
            let v: f32 = tok
                .parse()
                .map_err(|_| Error::parse(path, idx + 1, format!("'{tok}' is not a number")))?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes the little-endian binary container: header
/// `{magic "MGCN", version u32, N u64, E u64, F u32}`, then `N+1` u64 row
/// offsets, `E` u64 column indices, and `N*F` FP32 features row-major.
pub fn save_binary(g: &CsrGraph<f32>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(&BINARY_MAGIC).map_err(io_err)?;
    w.write_all(&BINARY_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(g.num_nodes() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(g.num_edges() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(g.feature_dim() as u32).to_le_bytes()).map_err(io_err)?;
    for &o in g.row_offsets() {
        w.write_all(&(o as u64).to_le_bytes()).map_err(io_err)?;
    }
    for &c in g.col_indices() {
        w.write_all(&(c as u64).to_le_bytes()).map_err(io_err)?;
    }
    for &v in g.features().data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads the binary container written by [`save_binary`].
pub fn load_binary(path: &Path) -> Result<CsrGraph<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if magic != BINARY_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:02x?}, expected \"MGCN\"")));
    }
    let version = read_u32(&mut r, path)?;
    if version != BINARY_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}, expected {BINARY_VERSION}")));
    }
    let n = read_u64(&mut r, path)? as usize;
    let e = read_u64(&mut r, path)? as usize;
    let f = read_u32(&mut r, path)? as usize;
    let mut row_offsets = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        row_offsets.push(read_u64(&mut r, path)? as usize);
    }
    let mut col_indices = Vec::with_capacity(e);
    for _ in 0..e {
        col_indices.push(read_u64(&mut r, path)? as usize);
    }
    let mut feat = Vec::with_capacity(n * f);
    let mut buf = [0u8; 4];
    for _ in 0..n * f {
        read_exact(&mut r, &mut buf, path)?;
        feat.push(f32::from_le_bytes(buf));
    }
    let mut g = CsrGraph::from_csr(n, row_offsets, col_indices)
        .map_err(|e| Error::format(path, e.to_string()))?;
    g.set_features(DenseMat::from_vec(n, f, feat))?;
    Ok(g)
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

/// One worker's view of a partitioned graph: the local graph over owned
/// nodes plus the incoming cut edges grouped by owning remote part.
#[derive(Clone, Debug)]
pub struct Subgraph<T: Scalar = f32> {
    pub owner: usize,
    pub num_parts: usize,
    /// Owned global ids, ascending; local id = position in this list.
    pub inner_nodes: Vec<usize>,
    /// Edges with both endpoints owned, in local ids.
    pub local_csr: CsrGraph<T>,
    /// `cut_in[j]` = cut edges `(src_global, dst_global)` whose source is
    /// owned by part `j` and destination by `owner`, destination-major.
    pub cut_in: Vec<Vec<(usize, usize)>>,
    /// `boundary_in[j]` = sorted distinct sources of `cut_in[j]`.
    pub boundary_in: Vec<Vec<usize>>,
    pub global_to_local: HashMap<usize, usize>,
    /// Full-graph in-degree of each owned node (local + cut edges).
    pub global_in_degree: Vec<usize>,
}

impl<T: Scalar> Subgraph<T> {
    pub fn num_local(&self) -> usize {
        self.inner_nodes.len()
    }

    pub fn local_id(&self, global: usize) -> Option<usize> {
        self.global_to_local.get(&global).copied()
    }

    pub fn num_cut_edges(&self) -> usize {
        self.cut_in.iter().map(Vec::len).sum()
    }
}

/// Splits a graph into per-part subgraphs. Every edge lands either in
/// exactly one `local_csr` or in exactly one `cut_in` bucket.
pub fn build_subgraphs<T: Scalar>(g: &CsrGraph<T>, p: &Partition) -> Result<Vec<Subgraph<T>>> {
    if p.assignment.len() != g.num_nodes() {
        return Err(Error::InvalidInput(format!(
            "partition covers {} nodes, graph has {}",
            p.assignment.len(),
            g.num_nodes()
        )));
    }
    let np = p.num_parts;
    let mut inner: Vec<Vec<usize>> = vec![Vec::new(); np];
    for (v, &part) in p.assignment.iter().enumerate() {
        if part >= np {
            return Err(Error::InvalidInput(format!("part id {part} out of range for {np} parts")));
        }
        inner[part].push(v);
    }

    let mut subs = Vec::with_capacity(np);
    for owner in 0..np {
        let inner_nodes = inner[owner].clone();
        let global_to_local: HashMap<usize, usize> =
            inner_nodes.iter().enumerate().map(|(l, &gid)| (gid, l)).collect();
        let n_local = inner_nodes.len();

        let mut row_offsets = Vec::with_capacity(n_local + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        let mut cut_in: Vec<Vec<(usize, usize)>> = vec![Vec::new(); np];
        let mut global_in_degree = Vec::with_capacity(n_local);
        for &gid in &inner_nodes {
            global_in_degree.push(g.in_degree(gid));
            for &src in g.in_neighbors(gid) {
                let src_part = p.assignment[src];
                if src_part == owner {
                    col_indices.push(global_to_local[&src]);
                } else {
                    cut_in[src_part].push((src, gid));
                }
            }
            row_offsets.push(col_indices.len());
        }

        let mut local_csr = CsrGraph::from_csr(n_local, row_offsets, col_indices)?;
        let f = g.feature_dim();
        let mut feat = DenseMat::zeros(n_local, f);
        let mut labels = Vec::with_capacity(n_local);
        let mut train = Vec::with_capacity(n_local);
        let mut val = Vec::with_capacity(n_local);
        let mut test = Vec::with_capacity(n_local);
        for (l, &gid) in inner_nodes.iter().enumerate() {
            feat.row_mut(l).copy_from_slice(g.features().row(gid));
            labels.push(g.labels()[gid]);
            train.push(g.train_mask()[gid]);
            val.push(g.val_mask()[gid]);
            test.push(g.test_mask()[gid]);
        }
        local_csr.set_features(feat)?;
        local_csr.set_labels(labels)?;
        local_csr.set_masks(train, val, test)?;

        let boundary_in = cut_in
            .iter()
            .map(|edges| {
                let mut srcs: Vec<usize> = edges.iter().map(|&(s, _)| s).collect();
                srcs.sort_unstable();
                srcs.dedup();
                srcs
            })
            .collect();

        subs.push(Subgraph {
            owner,
            num_parts: np,
            inner_nodes,
            local_csr,
            cut_in,
            boundary_in,
            global_to_local,
            global_in_degree,
        });
    }
    Ok(subs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn triangle_row_offsets() {
        let g = CsrGraph::<f32>::from_edges(3, &[(0, 1), (1, 2), (2, 0)], true).unwrap();
        assert_eq!(g.row_offsets(), &[0, 2, 4, 6]);
        assert_eq!(g.in_neighbors(0), &[1, 2]);
    }

    #[test]
    fn empty_edge_list_with_node_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "# no edges\n").unwrap();
        let g = load_edge_list(&path, false, Some(4)).unwrap();
        assert_eq!(g.row_offsets(), &[0, 0, 0, 0, 0]);
    }

    #[test]
    fn symmetrize_adds_reverse_edge() {
        let g = CsrGraph::<f32>::from_edges(2, &[(0, 1)], true).unwrap();
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = CsrGraph::<f32>::from_edges(3, &[(0, 2), (0, 2), (1, 2)], false).unwrap();
        assert_eq!(g.in_neighbors(2), &[0, 1]);
        assert_eq!(g.num_edges(), 2);
    }

    #[test]
    fn edge_list_parse_error_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "0 1\nx 2\n").unwrap();
        let err = load_edge_list(&path, false, None).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn edge_list_id_out_of_declared_range() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("range.txt");
        std::fs::write(&path, "0 5\n").unwrap();
        let err = load_edge_list(&path, false, Some(4)).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn binary_round_trip_is_identical() {
        let mut g = CsrGraph::<f32>::from_edges(4, &[(0, 1), (1, 2), (3, 0), (2, 3)], true).unwrap();
        let feat = DenseMat::from_vec(4, 2, vec![0.5, -1.25, 3.0, 0.0, 1e-7, 42.0, -0.125, 9.5]);
        g.set_features(feat).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.bin");
        save_binary(&g, &path).unwrap();
        let g2 = load_binary(&path).unwrap();
        assert_eq!(g.row_offsets(), g2.row_offsets());
        assert_eq!(g.col_indices(), g2.col_indices());
        assert_eq!(g.features(), g2.features());

        let path2 = dir.path().join("g2.bin");
        save_binary(&g2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn binary_bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_binary(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn binary_truncated_rejected() {
        let mut g = CsrGraph::<f32>::from_edges(3, &[(0, 1), (1, 2)], false).unwrap();
        g.set_features(DenseMat::zeros(3, 4)).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.bin");
        save_binary(&g, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_binary(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    /// Two-part split used by several planning tests: part 1 owns {4,5,6},
    /// part 0 owns the rest, cut edges (4,1),(4,2),(4,3),(5,2),(6,2).
    pub fn two_worker_fixture() -> (CsrGraph<f32>, Partition) {
        let edges = [
            (1, 2),
            (2, 3),
            (4, 5),
            (5, 6),
            (4, 1),
            (4, 2),
            (4, 3),
            (5, 2),
            (6, 2),
        ];
        let g = CsrGraph::from_edges(7, &edges, false).unwrap();
        let assignment = vec![0, 0, 0, 0, 1, 1, 1];
        let p = Partition::from_assignment(2, assignment, &vec![1.0; 7]).unwrap();
        (g, p)
    }

    #[test]
    fn subgraph_boundary_lists_cut_sources() {
        let (g, p) = two_worker_fixture();
        let subs = build_subgraphs(&g, &p).unwrap();
        assert_eq!(subs[0].boundary_in[1], vec![4, 5, 6]);
        assert!(subs[0].boundary_in[0].is_empty());
        assert!(subs[1].boundary_in[0].is_empty());
        assert_eq!(
            subs[0].cut_in[1],
            vec![(4, 1), (4, 2), (5, 2), (6, 2), (4, 3)]
        );
    }

    #[test]
    fn subgraphs_conserve_edges() {
        let (g, p) = two_worker_fixture();
        let subs = build_subgraphs(&g, &p).unwrap();
        let local: usize = subs.iter().map(|s| s.local_csr.num_edges()).sum();
        let cut: usize = subs.iter().map(Subgraph::num_cut_edges).sum();
        assert_eq!(local + cut, g.num_edges());
    }

    #[test]
    fn single_part_has_no_boundary() {
        let g = CsrGraph::<f32>::from_edges(5, &[(0, 1), (1, 2), (3, 4)], true).unwrap();
        let p = Partition::from_assignment(1, vec![0; 5], &vec![1.0; 5]).unwrap();
        let subs = build_subgraphs(&g, &p).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].num_cut_edges(), 0);
        assert_eq!(subs[0].local_csr.num_edges(), g.num_edges());
    }

    #[test]
    fn edgeless_graph_has_empty_boundaries() {
        let g = CsrGraph::<f32>::from_edges(4, &[], false).unwrap();
        let p = Partition::from_assignment(2, vec![0, 1, 0, 1], &vec![1.0; 4]).unwrap();
        let subs = build_subgraphs(&g, &p).unwrap();
        for s in &subs {
            assert!(s.boundary_in.iter().all(Vec::is_empty));
        }
    }

    #[test]
    fn local_degree_tracks_full_graph() {
        let (g, p) = two_worker_fixture();
        let subs = build_subgraphs(&g, &p).unwrap();
        let s0 = &subs[0];
        let l2 = s0.local_id(2).unwrap();
        assert_eq!(s0.global_in_degree[l2], g.in_degree(2));
        assert_eq!(s0.local_csr.in_degree(l2) + 3, g.in_degree(2));
    }
}
