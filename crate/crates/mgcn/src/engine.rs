//! Full-batch graph model training over partitioned graphs.
//!
//! Each worker owns one subgraph and a replica of the model weights.  An
//! epoch runs: label injection, a forward pass (per layer: normalize,
//! aggregate locally, exchange boundary rows per the communication plan,
//! combine), a loss over held-out labeled nodes, a backward pass with the
//! reversed exchange schedule, a gradient reduction summed in rank order
//! so every replica stays bit-identical, an optimizer step, and an
//! evaluation pass for accuracy metrics.  Boundary rows travel either as
//! raw floats or stochastically quantized; per-row random streams are
//! keyed by global node id, so results do not depend on the worker count
//! or thread schedule.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::commplan::{plan_all, CommPlan};
use crate::error::{Error, Result};
use crate::graph::{build_subgraphs, CsrGraph, Partition, Subgraph};
use crate::kernels::{spmm_with, AggMode, PlanConfig, PlanMode};
use crate::mat::{DenseMat, Scalar};
use crate::quant::{self, BitWidth, QuantBlock, Rounding, StreamKey};
use crate::transport::{first_root_error, run_in_process, ByteLedger, Collective, Direction, Payload, Tag};

/// Numerical floor inside the per-row normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which update rule combines a node's own row with its aggregated
/// neighborhood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// `h' = act(n · W_self + z · W_neigh + b)`: separate self and
    /// neighbor weights (mean-aggregator style).
    Sage,
    /// `h' = act(z · W + b)`: the aggregated neighborhood alone, which
    /// makes the linear multi-layer form exactly a matrix chain.
    Gcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// `w ← w − η·g` with a fixed step size.
    Sgd,
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
}

/// Hyperparameters of one training run.  The same config must be given
/// to every worker; everything that varies per worker lives in the
/// subgraph and the transport endpoint.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Number of weight layers (≥ 1).
    pub num_layers: usize,
    /// Width of every hidden layer.
    pub hidden_dim: usize,
    pub epochs: usize,
    /// Step size; zero is permitted (weights then stay frozen).
    pub lr: f64,
    /// Wire precision for boundary exchanges; `None` keeps full floats.
    pub bits: Option<BitWidth>,
    /// Quantize the backward boundary exchange too (only meaningful when
    /// `bits` is set).
    pub quantize_backward: bool,
    /// Masked label propagation: inject embedded labels of a per-epoch
    /// random subset of training nodes into the input features.
    pub label_prop: bool,
    /// Fraction of labeled training nodes whose labels are injected each
    /// epoch; the rest drive the loss.
    pub label_rate: f64,
    pub seed: u64,
    pub model: ModelKind,
    /// Applied after every layer except the last.
    pub activation: Activation,
    /// How neighborhoods are reduced. `Mean` divides by the full-graph
    /// in-degree; isolated nodes aggregate to zero.
    pub agg: AggMode,
    /// Per-row normalization of each layer's input, with learned gain
    /// and shift.
    pub layer_norm: bool,
    pub bias: bool,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_layers: 3,
            hidden_dim: 64,
            epochs: 100,
            lr: 0.1,
            bits: None,
            quantize_backward: true,
            label_prop: false,
            label_rate: 0.62,
            seed: 0,
            model: ModelKind::Sage,
            activation: Activation::Relu,
            agg: AggMode::Mean,
            layer_norm: true,
            bias: true,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.label_prop && !(self.label_rate > 0.0 && self.label_rate < 1.0) {
            return Err(Error::Config(format!(
                "label_rate {} must lie strictly between 0 and 1",
                self.label_rate
            )));
        }
        Ok(())
    }

    /// Layer widths `[F_in, hidden, …, hidden, C]`.
    pub fn dims(&self, feature_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.num_layers + 1);
        dims.push(feature_dim);
        for _ in 1..self.num_layers {
            dims.push(self.hidden_dim);
        }
        dims.push(num_classes);
        dims
    }
}

/// Weights of one layer.
#[derive(Clone, Debug)]
pub struct LayerParams<T: Scalar> {
    /// Self-path weight (`Sage` only), same shape as `w`.
    pub w_self: Option<DenseMat<T>>,
    /// Neighbor-path weight, `F_in × F_out`.
    pub w: DenseMat<T>,
    pub bias: Option<Vec<T>>,
    /// Normalization gain/shift over the layer's input features.
    pub ln_gain: Option<Vec<T>>,
    pub ln_shift: Option<Vec<T>>,
}

/// All trainable tensors.  Every worker holds an identical replica.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar> {
    pub layers: Vec<LayerParams<T>>,
    /// Label embedding table, `C × F_in`, present when label propagation
    /// is on.
    pub w_embed: Option<DenseMat<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh seeded weights: uniform `±1/√F_in` for matrices, zero
    /// biases and shifts, unit gains.  Deterministic in `seed`, so all
    /// workers initialize identically without communicating.
    pub fn init(cfg: &TrainConfig, feature_dim: usize, num_classes: usize) -> ModelParams<T> {
        let dims = cfg.dims(feature_dim, num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(17));
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let (f_in, f_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (f_in as f64).sqrt();
            let w_self = (cfg.model == ModelKind::Sage)
                .then(|| DenseMat::uniform(f_in, f_out, -bound, bound, &mut rng));
            let w = DenseMat::uniform(f_in, f_out, -bound, bound, &mut rng);
            layers.push(LayerParams {
                w_self,
                w,
                bias: cfg.bias.then(|| vec![T::from_f64(0.0); f_out]),
                ln_gain: cfg.layer_norm.then(|| vec![T::from_f64(1.0); f_in]),
                ln_shift: cfg.layer_norm.then(|| vec![T::from_f64(0.0); f_in]),
            });
        }
        let w_embed = cfg.label_prop.then(|| {
            let bound = 1.0 / (num_classes as f64).sqrt();
            DenseMat::uniform(num_classes, feature_dim, -bound, bound, &mut rng)
        });
        ModelParams { layers, w_embed }
    }

    /// Same shapes, all zeros, in any element type; the gradient
    /// accumulator uses `f64` so that summation never depends on how
    /// nodes are split across workers.
    pub fn zeros_like_as<U: Scalar>(&self) -> ModelParams<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                w_self: l.w_self.as_ref().map(|m| DenseMat::zeros(m.rows(), m.cols())),
                w: DenseMat::zeros(l.w.rows(), l.w.cols()),
                bias: l.bias.as_ref().map(|b| vec![U::from_f64(0.0); b.len()]),
                ln_gain: l.ln_gain.as_ref().map(|g| vec![U::from_f64(0.0); g.len()]),
                ln_shift: l.ln_shift.as_ref().map(|s| vec![U::from_f64(0.0); s.len()]),
            })
            .collect();
        ModelParams { layers, w_embed: self.w_embed.as_ref().map(|m| DenseMat::zeros(m.rows(), m.cols())) }
    }

    /// Visits every tensor's storage in the canonical order (per layer:
    /// self weight, neighbor weight, bias, gain, shift; then the label
    /// embedding).  Flattening, reduction, and optimizer steps all share
    /// this order, which is what keeps replicas synchronized.
    fn for_each_slice_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for l in &mut self.layers {
            if let Some(m) = &mut l.w_self {
                f(m.data_mut());
            }
            f(l.w.data_mut());
            if let Some(b) = &mut l.bias {
                f(b);
            }
            if let Some(g) = &mut l.ln_gain {
                f(g);
            }
            if let Some(s) = &mut l.ln_shift {
                f(s);
            }
        }
        if let Some(m) = &mut self.w_embed {
            f(m.data_mut());
        }
    }

    fn for_each_slice(&self, mut f: impl FnMut(&[T])) {
        for l in &self.layers {
            if let Some(m) = &l.w_self {
                f(m.data());
            }
            f(l.w.data());
            if let Some(b) = &l.bias {
                f(b);
            }
            if let Some(g) = &l.ln_gain {
                f(g);
            }
            if let Some(s) = &l.ln_shift {
                f(s);
            }
        }
        if let Some(m) = &self.w_embed {
            f(m.data());
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_slice(|s| n += s.len());
        n
    }

    /// All tensors concatenated in canonical order, widened to `f64`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_slice(|s| out.extend(s.iter().map(|&x| x.to_f64())));
        out
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector of {} values for a model with {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        self.for_each_slice_mut(|s| {
            for x in s.iter_mut() {
                *x = T::from_f64(flat[at]);
                at += 1;
            }
        });
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state over the flattened parameter vector.  Updates run in
/// `f64` on every worker with identical inputs, so replicas never drift.
struct OptState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptState {
    fn new(kind: OptimizerKind, n: usize) -> OptState {
        let state_len = if kind == OptimizerKind::Adam { n } else { 0 };
        OptState { kind, m: vec![0.0; state_len], v: vec![0.0; state_len], t: 0 }
    }

    fn step<T: Scalar>(&mut self, params: &mut ModelParams<T>, grad: &[f64], lr: f64) {
        let mut flat = params.flatten();
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in flat.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for i in 0..flat.len() {
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    flat[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
        params.set_from_flat(&flat).expect("flat vector has matching length");
    }
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

struct LnCache<T: Scalar> {
    xhat: DenseMat<T>,
    inv_std: Vec<T>,
}

/// Per-row normalization: `y = gain ⊙ (x − mean)/√(var + ε) + shift`.
fn layer_norm_forward<T: Scalar>(x: &DenseMat<T>, gain: &[T], shift: &[T]) -> (DenseMat<T>, LnCache<T>) {
    let (n, f) = (x.rows(), x.cols());
    let mut y = DenseMat::zeros(n, f);
    let mut xhat = DenseMat::zeros(n, f);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v.to_f64()).sum::<f64>() / f as f64;
        let var = row.iter().map(|&v| (v.to_f64() - mean).powi(2)).sum::<f64>() / f as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(T::from_f64(istd));
        for c in 0..f {
            let h = T::from_f64((row[c].to_f64() - mean) * istd);
            xhat.row_mut(r)[c] = h;
            y.row_mut(r)[c] = gain[c] * h + shift[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm_forward`]; returns `(dx, dgain, dshift)`.
/// The parameter gradients stay in `f64` to keep their accumulation
/// independent of the node split.
fn layer_norm_backward<T: Scalar>(
    dy: &DenseMat<T>,
    cache: &LnCache<T>,
    gain: &[T],
) -> (DenseMat<T>, Vec<f64>, Vec<f64>) {
    let (n, f) = (dy.rows(), dy.cols());
    let mut dx = DenseMat::zeros(n, f);
    let mut dgain = vec![0.0f64; f];
    let mut dshift = vec![0.0f64; f];
    for r in 0..n {
        let dyr = dy.row(r);
        let hr = cache.xhat.row(r);
        let istd = cache.inv_std[r].to_f64();
        let mut m1 = 0.0f64;
        let mut m2 = 0.0f64;
        for c in 0..f {
            let dh = dyr[c].to_f64() * gain[c].to_f64();
            m1 += dh;
            m2 += dh * hr[c].to_f64();
            dgain[c] += dyr[c].to_f64() * hr[c].to_f64();
            dshift[c] += dyr[c].to_f64();
        }
        m1 /= f as f64;
        m2 /= f as f64;
        for c in 0..f {
            let dh = dyr[c].to_f64() * gain[c].to_f64();
            dx.row_mut(r)[c] = T::from_f64(istd * (dh - m1 - hr[c].to_f64() * m2));
        }
    }
    (dx, dgain, dshift)
}

// ---------------------------------------------------------------------------
// Label propagation
// ---------------------------------------------------------------------------

/// Per-epoch Bernoulli draw for one node, keyed by global id so that
/// every worker agrees without communicating.
fn label_selected(seed: u64, epoch: u64, gid: u64, rate: f64) -> bool {
    let mut h = quant::splitmix64(seed ^ 0xC0FF_EE00_5EED_1234);
    h = quant::splitmix64(h ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    h = quant::splitmix64(h ^ gid.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    ((h >> 11) as f64 / (1u64 << 53) as f64) < rate
}

/// Which training-labeled nodes get their labels injected this pass.
#[derive(Clone, Copy)]
enum Selection {
    /// Per-epoch random subset (training pass).
    Epoch(u64),
    /// Every training-labeled node (evaluation pass: eval nodes' own
    /// labels are never injected, so there is no leakage).
    AllTrain,
    /// No injection (label propagation off).
    None,
}

// ---------------------------------------------------------------------------
// Exchange encoding
// ---------------------------------------------------------------------------

fn rows_to_payload<T: Scalar>(mat: &DenseMat<T>) -> Payload {
    let wide = std::mem::size_of::<T>() == 8;
    let mut data = Vec::with_capacity(mat.data().len() * if wide { 8 } else { 4 });
    for &x in mat.data() {
        if wide {
            data.extend_from_slice(&x.to_f64().to_le_bytes());
        } else {
            data.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    Payload::new(data, Vec::new())
}

fn payload_to_rows<T: Scalar>(payload: &Payload, rows: usize, cols: usize, peer: usize) -> Result<DenseMat<T>> {
    let wide = std::mem::size_of::<T>() == 8;
    let elem = if wide { 8 } else { 4 };
    if payload.data.len() != rows * cols * elem || !payload.params.is_empty() {
        return Err(Error::Transport(format!(
            "rank {peer} sent {} data / {} param bytes, expected {} raw rows of {cols}",
            payload.data.len(),
            payload.params.len(),
            rows
        )));
    }
    let mut out = DenseMat::zeros(rows, cols);
    for (i, chunk) in payload.data.chunks_exact(elem).enumerate() {
        let v = if wide {
            f64::from_le_bytes(chunk.try_into().unwrap())
        } else {
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
        };
        out.data_mut()[i] = T::from_f64(v);
    }
    Ok(out)
}

fn quant_to_payload<T: Scalar>(
    mat: &DenseMat<T>,
    bits: BitWidth,
    key: StreamKey,
    row_ids: &[u64],
) -> Result<Payload> {
    let qb = quant::quantize_rows(mat, bits, Rounding::Stochastic, key, row_ids)?;
    Ok(Payload::new(qb.packed, quant::encode_params(&qb.params)))
}

fn payload_to_quant<T: Scalar>(
    payload: &Payload,
    rows: usize,
    cols: usize,
    bits: BitWidth,
    peer: usize,
) -> Result<DenseMat<T>> {
    let expect_data = rows * bits.row_bytes(cols);
    if payload.data.len() != expect_data || payload.params.len() != rows * 8 {
        return Err(Error::Transport(format!(
            "rank {peer} sent {} data / {} param bytes, expected {expect_data} / {} quantized",
            payload.data.len(),
            payload.params.len(),
            rows * 8
        )));
    }
    let qb = QuantBlock {
        rows,
        feat_dim: cols,
        bit_width: bits,
        params: quant::decode_params(&payload.params)?,
        packed: payload.data.clone(),
    };
    quant::dequantize_rows(&qb)
}

fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64s(bytes: &[u8], expect: usize, peer: usize) -> Result<Vec<f64>> {
    if bytes.len() != expect * 8 {
        return Err(Error::Transport(format!(
            "rank {peer} sent {} reduction bytes, expected {}",
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// All-gathers one `f64` vector per rank and sums them in ascending rank
/// order, so every worker computes the bit-identical total.
fn reduce_sum(comm: &mut dyn Collective, tag: Tag, local: &[f64]) -> Result<Vec<f64>> {
    let n = local.len();
    let bufs = comm.all_gather(tag, f64s_to_bytes(local))?;
    let mut total = vec![0.0f64; n];
    for (peer, buf) in bufs.iter().enumerate() {
        let vals = bytes_to_f64s(buf, n, peer)?;
        for (t, v) in total.iter_mut().zip(vals) {
            *t += v;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Per-worker exchange wiring
// ---------------------------------------------------------------------------

/// Precomputed index maps tying the communication plan to local rows.
///
/// For the pair `rank → i` (this worker sending), `send_map[i][r]` lists
/// the local source rows summed into outgoing row `r` (one id for a raw
/// boundary row, several for a pre-aggregated group).  For the pair
/// `j → rank` (this worker receiving), `recv_map[j][r]` lists the local
/// destination rows incoming row `r` is added to.  The backward pass
/// reuses both maps with roles swapped: gradients of `recv_map` rows are
/// summed and sent back, received gradient rows are scattered through
/// `send_map`.
struct WorkerLinks {
    send_map: Vec<Vec<Vec<usize>>>,
    send_row_ids: Vec<Vec<u64>>,
    recv_map: Vec<Vec<Vec<usize>>>,
    recv_row_ids: Vec<Vec<u64>>,
}

impl WorkerLinks {
    fn build<T: Scalar>(sub: &Subgraph<T>, plan: &CommPlan) -> Result<WorkerLinks> {
        let p = sub.num_parts;
        let rank = sub.owner;
        let mut links = WorkerLinks {
            send_map: vec![Vec::new(); p],
            send_row_ids: vec![Vec::new(); p],
            recv_map: vec![Vec::new(); p],
            recv_row_ids: vec![Vec::new(); p],
        };
        let local = |gid: usize| -> Result<usize> {
            sub.local_id(gid).ok_or_else(|| {
                Error::InvalidInput(format!("plan references node {gid}, which part {rank} does not own"))
            })
        };

        for peer in 0..p {
            if peer == rank {
                continue;
            }
            // Sending side of pair rank → peer.
            let out_pair = plan.pair(rank, peer);
            let mut smap = Vec::with_capacity(out_pair.rows());
            let mut sids = Vec::with_capacity(out_pair.rows());
            for &src in &out_pair.post_sends {
                smap.push(vec![local(src)?]);
                sids.push(src as u64);
            }
            for (dst, srcs) in &out_pair.pre_groups {
                let rows = srcs.iter().map(|&s| local(s)).collect::<Result<Vec<_>>>()?;
                smap.push(rows);
                sids.push(*dst as u64);
            }
            links.send_map[peer] = smap;
            links.send_row_ids[peer] = sids;

            // Receiving side of pair peer → rank.
            let in_pair = plan.pair(peer, rank);
            let mut rmap: Vec<Vec<usize>> = vec![Vec::new(); in_pair.rows()];
            let mut rids = Vec::with_capacity(in_pair.rows());
            let mut row_of_src = std::collections::HashMap::new();
            for (r, &src) in in_pair.post_sends.iter().enumerate() {
                row_of_src.insert(src, r);
                rids.push(src as u64);
            }
            let npost = in_pair.post_sends.len();
            for (g, (dst, _)) in in_pair.pre_groups.iter().enumerate() {
                rmap[npost + g].push(local(*dst)?);
                rids.push(*dst as u64);
            }
            for &(src, dst) in &sub.cut_in[peer] {
                if let Some(&r) = row_of_src.get(&src) {
                    rmap[r].push(local(dst)?);
                }
            }
            // Every post row must serve at least one cut edge, or the
            // plan does not match this partition.
            if rmap.iter().take(npost).any(Vec::is_empty) {
                return Err(Error::InvalidInput(format!(
                    "plan for pair {peer}->{rank} lists boundary rows with no matching cut edges"
                )));
            }
            links.recv_map[peer] = rmap;
            links.recv_row_ids[peer] = rids;
        }
        Ok(links)
    }
}

/// Outgoing row `r` = Σ of the mapped local rows of `src`.
fn gather_rows<T: Scalar>(src: &DenseMat<T>, map: &[Vec<usize>]) -> DenseMat<T> {
    let mut out = DenseMat::zeros(map.len(), src.cols());
    for (r, rows) in map.iter().enumerate() {
        for &s in rows {
            let (dst_row, src_row) = (out.row_mut(r), src.row(s));
            for (d, v) in dst_row.iter_mut().zip(src_row) {
                *d += *v;
            }
        }
    }
    out
}

/// Adds received row `r` into each mapped local row of `dst`.  Plain
/// index-order accumulation: boundary sets are small, and the fixed
/// order keeps runs reproducible.
fn scatter_rows<T: Scalar>(dst: &mut DenseMat<T>, recv: &DenseMat<T>, map: &[Vec<usize>]) {
    for (r, rows) in map.iter().enumerate() {
        for &d in rows {
            let (dst_row, src_row) = (dst.row_mut(d), recv.row(r));
            for (x, v) in dst_row.iter_mut().zip(src_row) {
                *x += *v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Worker
// ---------------------------------------------------------------------------

struct LayerCache<T: Scalar> {
    ln: Option<LnCache<T>>,
    /// Layer input after normalization (the rows boundary exchange ships).
    normed: DenseMat<T>,
    /// Aggregated neighborhood after mean scaling.
    agg: DenseMat<T>,
    /// Pre-activation output.
    pre_act: DenseMat<T>,
}

/// Per-epoch metric row; identical on every worker because all inputs
/// are reduced.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Bytes sent by all workers during this epoch.
    pub bytes_sent: u64,
    pub wall_ms: u64,
}

/// What one worker hands back after its final epoch.
pub struct WorkerOutput<T: Scalar> {
    pub metrics: Vec<EpochMetrics>,
    /// Evaluation-pass logits for the worker's own nodes, local order.
    pub logits: DenseMat<T>,
    pub ledger: ByteLedger,
    pub params: ModelParams<T>,
}

struct Worker<'a, T: Scalar> {
    sub: &'a Subgraph<T>,
    cfg: &'a TrainConfig,
    num_classes: usize,
    links: WorkerLinks,
    /// Structure-only copy of the local graph for aggregation arithmetic,
    /// which runs in `f64` regardless of `T`: wide accumulation keeps the
    /// result independent of how the partition reorders the summands.
    local64: CsrGraph<f64>,
    /// Same structure with edges reversed, for routing gradients back
    /// along local edges.
    local_rev64: CsrGraph<f64>,
    kcfg: PlanConfig,
    rank: usize,
    world: usize,
}

impl<'a, T: Scalar> Worker<'a, T> {
    fn new(sub: &'a Subgraph<T>, plan: &CommPlan, cfg: &'a TrainConfig, num_classes: usize) -> Result<Worker<'a, T>> {
        cfg.validate()?;
        if plan.num_parts != sub.num_parts {
            return Err(Error::InvalidInput(format!(
                "plan for {} parts used with a {}-part subgraph",
                plan.num_parts, sub.num_parts
            )));
        }
        if sub.local_csr.feature_dim() == 0 {
            return Err(Error::InvalidInput("graph has no features to train on".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidInput("graph has no labeled classes".into()));
        }
        let links = WorkerLinks::build(sub, plan)?;
        let local64 = CsrGraph::<f64>::from_csr(
            sub.num_local(),
            sub.local_csr.row_offsets().to_vec(),
            sub.local_csr.col_indices().to_vec(),
        )?;
        let (rev_offsets, rev_cols) = sub.local_csr.structure_transpose();
        let local_rev64 = CsrGraph::<f64>::from_csr(sub.num_local(), rev_offsets, rev_cols)?;
        // Deterministic span boundaries make aggregation independent of
        // the thread schedule, which worker-count invariance relies on.
        let kcfg = PlanConfig { mode: PlanMode::Deterministic, ..PlanConfig::default() };
        Ok(Worker { sub, cfg, num_classes, links, local64, local_rev64, kcfg, rank: sub.owner, world: sub.num_parts })
    }

    /// Input features with injected labels for the given selection.
    fn injected_features(&self, params: &ModelParams<T>, selection: Selection) -> DenseMat<T> {
        let mut x = self.sub.local_csr.features().clone();
        let Some(w_embed) = params.w_embed.as_ref() else {
            return x;
        };
        let labels = self.sub.local_csr.labels();
        let train = self.sub.local_csr.train_mask();
        for v in 0..self.sub.num_local() {
            if !train[v] || labels[v] < 0 {
                continue;
            }
            let inject = match selection {
                Selection::Epoch(epoch) => {
                    label_selected(self.cfg.seed, epoch, self.sub.inner_nodes[v] as u64, self.cfg.label_rate)
                }
                Selection::AllTrain => true,
                Selection::None => false,
            };
            if inject {
                let row = w_embed.row(labels[v] as usize);
                for (xv, ev) in x.row_mut(v).iter_mut().zip(row) {
                    *xv += *ev;
                }
            }
        }
        x
    }

    /// Held-out mask for the training loss: labeled training nodes whose
    /// labels were *not* injected this epoch.
    fn heldout_mask(&self, epoch: u64) -> Vec<bool> {
        let labels = self.sub.local_csr.labels();
        let train = self.sub.local_csr.train_mask();
        (0..self.sub.num_local())
            .map(|v| {
                train[v]
                    && labels[v] >= 0
                    && !(self.cfg.label_prop
                        && label_selected(self.cfg.seed, epoch, self.sub.inner_nodes[v] as u64, self.cfg.label_rate))
            })
            .collect()
    }

    /// Sum of local and boundary neighbor rows, then mean scaling by the
    /// full-graph in-degree.  Accumulates in `f64` and rounds once, so
    /// the result does not depend on how the partition splits the sum.
    fn aggregate(
        &self,
        normed: &DenseMat<T>,
        comm: &mut dyn Collective,
        tag: Tag,
        wire_bits: Option<BitWidth>,
        epoch: u64,
    ) -> Result<DenseMat<T>> {
        let normed64 = normed.cast::<f64>();
        let mut acc = spmm_with(&self.local64, &normed64, AggMode::Sum, &self.kcfg)?;
        let mut outgoing = vec![Payload::default(); self.world];
        for peer in 0..self.world {
            if peer == self.rank || self.links.send_map[peer].is_empty() {
                continue;
            }
            let rows = gather_rows(&normed64, &self.links.send_map[peer]).cast::<T>();
            outgoing[peer] = match wire_bits {
                Some(bits) => {
                    let key = StreamKey::new(self.cfg.seed, epoch, tag.layer as u32, false);
                    quant_to_payload(&rows, bits, key, &self.links.send_row_ids[peer])?
                }
                None => rows_to_payload(&rows),
            };
        }
        let received = comm.all_to_allv(tag, outgoing)?;
        for (peer, payload) in received.iter().enumerate() {
            if peer == self.rank || self.links.recv_map[peer].is_empty() {
                continue;
            }
            let rows = self.links.recv_map[peer].len();
            let mat = match wire_bits {
                Some(bits) => payload_to_quant::<T>(payload, rows, normed.cols(), bits, peer)?,
                None => payload_to_rows::<T>(payload, rows, normed.cols(), peer)?,
            };
            scatter_rows(&mut acc, &mat.cast::<f64>(), &self.links.recv_map[peer]);
        }
        if self.cfg.agg == AggMode::Mean {
            for v in 0..self.sub.num_local() {
                let deg = self.sub.global_in_degree[v];
                if deg > 0 {
                    let inv = 1.0 / deg as f64;
                    for x in acc.row_mut(v) {
                        *x *= inv;
                    }
                }
            }
        }
        Ok(acc.cast::<T>())
    }

    /// One full forward pass.  `direction` distinguishes the training
    /// and evaluation exchanges in the tag stream; evaluation always
    /// ships raw floats.
    fn forward(
        &self,
        params: &ModelParams<T>,
        x0: DenseMat<T>,
        epoch: u64,
        direction: Direction,
        comm: &mut dyn Collective,
    ) -> Result<(Vec<LayerCache<T>>, DenseMat<T>)> {
        let wire_bits = if direction == Direction::Forward { self.cfg.bits } else { None };
        let last = self.cfg.num_layers - 1;
        let mut h = x0;
        let mut caches = Vec::with_capacity(self.cfg.num_layers);
        for (l, layer) in params.layers.iter().enumerate() {
            let (normed, ln) = match (&layer.ln_gain, &layer.ln_shift) {
                (Some(gain), Some(shift)) => {
                    let (y, cache) = layer_norm_forward(&h, gain, shift);
                    (y, Some(cache))
                }
                _ => (h.clone(), None),
            };
            let tag = Tag::new(epoch as u32, l as u16, direction);
            let agg = self.aggregate(&normed, comm, tag, wire_bits, epoch)?;
            let mut pre_act = agg.matmul(&layer.w);
            if let Some(w_self) = &layer.w_self {
                pre_act.add_assign(&normed.matmul(w_self));
            }
            if let Some(bias) = &layer.bias {
                for r in 0..pre_act.rows() {
                    for (x, b) in pre_act.row_mut(r).iter_mut().zip(bias) {
                        *x += *b;
                    }
                }
            }
            let out = if l != last && self.cfg.activation == Activation::Relu {
                pre_act.map(|v| if v.to_f64() > 0.0 { v } else { T::from_f64(0.0) })
            } else {
                pre_act.clone()
            };
            caches.push(LayerCache { ln, normed, agg, pre_act });
            h = out;
        }
        Ok((caches, h))
    }

    /// Mean cross-entropy over the counted rows.  Returns the local loss
    /// sum, the local count, and the per-row softmax probabilities.
    fn loss_parts(&self, logits: &DenseMat<T>, counted: &[bool]) -> (f64, usize, Vec<Option<Vec<f64>>>) {
        let labels = self.sub.local_csr.labels();
        let mut sum = 0.0;
        let mut count = 0;
        let mut probs = Vec::with_capacity(logits.rows());
        for v in 0..logits.rows() {
            if !counted[v] {
                probs.push(None);
                continue;
            }
            let row = logits.row(v);
            let max = row.iter().map(|&x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x.to_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
            // ln(0) = −∞ deliberately flows through: a vanishing
            // probability on a true label means the run has diverged,
            // and the non-finite loss is the detection signal.
            sum += -p[labels[v] as usize].ln();
            count += 1;
            probs.push(Some(p));
        }
        (sum, count, probs)
    }

    /// Backward pass from the loss gradient; returns the flattened local
    /// gradient contribution (summed across workers by the caller).
    fn backward(
        &self,
        params: &ModelParams<T>,
        caches: &[LayerCache<T>],
        dlogits: DenseMat<T>,
        epoch: u64,
        comm: &mut dyn Collective,
    ) -> Result<Vec<f64>> {
        let mut grads = params.zeros_like_as::<f64>();
        let wire_bits = if self.cfg.quantize_backward { self.cfg.bits } else { None };
        let last = self.cfg.num_layers - 1;
        let mut d_out = dlogits;
        for l in (0..self.cfg.num_layers).rev() {
            let cache = &caches[l];
            let layer = &params.layers[l];
            let glayer = &mut grads.layers[l];

            // Activation.
            let mut d_pre = d_out;
            if l != last && self.cfg.activation == Activation::Relu {
                for (d, &p) in d_pre.data_mut().iter_mut().zip(cache.pre_act.data()) {
                    if p.to_f64() <= 0.0 {
                        *d = T::from_f64(0.0);
                    }
                }
            }

            // Affine parts; the products for weight gradients run in
            // `f64` so the node split cannot change their rounding.
            let d_pre64 = d_pre.cast::<f64>();
            if let Some(bias) = &mut glayer.bias {
                for r in 0..d_pre64.rows() {
                    for (b, &d) in bias.iter_mut().zip(d_pre64.row(r)) {
                        *b += d;
                    }
                }
            }
            glayer.w.add_assign(&cache.agg.cast::<f64>().matmul_tn(&d_pre64));
            let mut d_agg = d_pre.matmul_nt(&layer.w).cast::<f64>();
            let mut d_normed = if let (Some(w_self), Some(gw_self)) = (&layer.w_self, &mut glayer.w_self) {
                gw_self.add_assign(&cache.normed.cast::<f64>().matmul_tn(&d_pre64));
                d_pre.matmul_nt(w_self).cast::<f64>()
            } else {
                DenseMat::zeros(d_pre.rows(), layer.w.rows())
            };

            // Undo mean scaling: gradients flow to the raw accumulation.
            if self.cfg.agg == AggMode::Mean {
                for v in 0..self.sub.num_local() {
                    let deg = self.sub.global_in_degree[v];
                    let inv = if deg > 0 { 1.0 / deg as f64 } else { 0.0 };
                    for x in d_agg.row_mut(v) {
                        *x *= inv;
                    }
                }
            }

            // Boundary gradients travel the reverse schedule: this worker
            // returns gradients for rows it received in the forward pass
            // and scatters gradients received for rows it sent.
            let tag = Tag::new(epoch as u32, l as u16, Direction::Backward);
            let mut outgoing = vec![Payload::default(); self.world];
            for peer in 0..self.world {
                if peer == self.rank || self.links.recv_map[peer].is_empty() {
                    continue;
                }
                let rows = gather_rows(&d_agg, &self.links.recv_map[peer]).cast::<T>();
                outgoing[peer] = match wire_bits {
                    Some(bits) => {
                        let key = StreamKey::new(self.cfg.seed, epoch, l as u32, true);
                        quant_to_payload(&rows, bits, key, &self.links.recv_row_ids[peer])?
                    }
                    None => rows_to_payload(&rows),
                };
            }
            let received = comm.all_to_allv(tag, outgoing)?;
            for (peer, payload) in received.iter().enumerate() {
                if peer == self.rank || self.links.send_map[peer].is_empty() {
                    continue;
                }
                let rows = self.links.send_map[peer].len();
                let mat = match wire_bits {
                    Some(bits) => payload_to_quant::<T>(payload, rows, d_agg.cols(), bits, peer)?,
                    None => payload_to_rows::<T>(payload, rows, d_agg.cols(), peer)?,
                };
                scatter_rows(&mut d_normed, &mat.cast::<f64>(), &self.links.send_map[peer]);
            }
            // Local edges: scatter destination gradients back to sources.
            d_normed.add_assign(&spmm_with(&self.local_rev64, &d_agg, AggMode::Sum, &self.kcfg)?);
            let d_normed = d_normed.cast::<T>();

            d_out = match (&cache.ln, &layer.ln_gain) {
                (Some(ln), Some(gain)) => {
                    let (dx, dgain, dshift) = layer_norm_backward(&d_normed, ln, gain);
                    for (g, d) in glayer.ln_gain.as_mut().unwrap().iter_mut().zip(dgain) {
                        *g += d;
                    }
                    for (s, d) in glayer.ln_shift.as_mut().unwrap().iter_mut().zip(dshift) {
                        *s += d;
                    }
                    dx
                }
                _ => d_normed,
            };
        }

        // Input gradient reaches the label embedding through the rows it
        // was injected into.
        if let Some(g_embed) = &mut grads.w_embed {
            let labels = self.sub.local_csr.labels();
            let train = self.sub.local_csr.train_mask();
            for v in 0..self.sub.num_local() {
                if train[v]
                    && labels[v] >= 0
                    && label_selected(self.cfg.seed, epoch, self.sub.inner_nodes[v] as u64, self.cfg.label_rate)
                {
                    let (row, dx) = (g_embed.row_mut(labels[v] as usize), d_out.row(v));
                    for (g, &d) in row.iter_mut().zip(dx) {
                        *g += d.to_f64();
                    }
                }
            }
        }
        Ok(grads.flatten())
    }

    /// Correct-prediction counts over the train/val/test masks.
    fn accuracy_counts(&self, logits: &DenseMat<T>) -> [f64; 6] {
        let g = &self.sub.local_csr;
        let labels = g.labels();
        let masks = [g.train_mask(), g.val_mask(), g.test_mask()];
        let mut out = [0.0f64; 6];
        for v in 0..logits.rows() {
            if labels[v] < 0 {
                continue;
            }
            let row = logits.row(v);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c].to_f64() > row[best].to_f64() {
                    best = c;
                }
            }
            let hit = best == labels[v] as usize;
            for (m, mask) in masks.iter().enumerate() {
                if mask[v] {
                    out[2 * m] += hit as u64 as f64;
                    out[2 * m + 1] += 1.0;
                }
            }
        }
        out
    }

    /// One training forward/backward at fixed weights: reduced loss and
    /// the globally summed flattened gradient (identical on all ranks).
    fn train_grad(&self, params: &ModelParams<T>, epoch: u64, comm: &mut dyn Collective) -> Result<(f64, Vec<f64>)> {
        let selection = if self.cfg.label_prop { Selection::Epoch(epoch) } else { Selection::None };
        let x0 = self.injected_features(params, selection);
        let (caches, out) = self.forward(params, x0, epoch, Direction::Forward, comm)?;

        // Loss over held-out labeled training nodes.
        let counted = self.heldout_mask(epoch);
        let (loss_sum, count, probs) = self.loss_parts(&out, &counted);
        let totals = reduce_sum(comm, Tag::new(epoch as u32, 0, Direction::Reduce), &[loss_sum, count as f64])?;
        if totals[1] < 1.0 {
            return Err(Error::InvalidInput(
                "no labeled training nodes left to compute the loss (label_rate too high?)".into(),
            ));
        }
        let loss = totals[0] / totals[1];
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: epoch as usize, loss });
        }

        // Loss gradient, scaled by the global count.
        let labels = self.sub.local_csr.labels();
        let mut dlogits = DenseMat::zeros(out.rows(), out.cols());
        let inv_total = 1.0 / totals[1];
        for v in 0..out.rows() {
            if let Some(p) = &probs[v] {
                let row = dlogits.row_mut(v);
                for c in 0..p.len() {
                    let y = (c == labels[v] as usize) as u64 as f64;
                    row[c] = T::from_f64((p[c] - y) * inv_total);
                }
            }
        }

        let local_grad = self.backward(params, &caches, dlogits, epoch, comm)?;
        let grad = reduce_sum(comm, Tag::new(epoch as u32, 1, Direction::Reduce), &local_grad)?;
        Ok((loss, grad))
    }

    fn run(&self, comm: &mut dyn Collective) -> Result<WorkerOutput<T>> {
        let mut params = ModelParams::<T>::init(self.cfg, self.sub.local_csr.feature_dim(), self.num_classes);
        let mut opt = OptState::new(self.cfg.optimizer, params.num_params());
        let mut metrics = Vec::with_capacity(self.cfg.epochs);
        let mut logits = DenseMat::zeros(self.sub.num_local(), self.num_classes);
        let mut bytes_seen = 0u64;

        for epoch in 0..self.cfg.epochs {
            let t0 = Instant::now();
            let e = epoch as u64;

            let (loss, grad) = self.train_grad(&params, e, comm)?;
            opt.step(&mut params, &grad, self.cfg.lr);

            // Evaluation pass: full floats, every known training label
            // injected, never an evaluation node's own label.
            let eval_selection = if self.cfg.label_prop { Selection::AllTrain } else { Selection::None };
            let x_eval = self.injected_features(&params, eval_selection);
            let (_, eval_out) = self.forward(&params, x_eval, e, Direction::Eval, comm)?;

            let sent_so_far = comm.ledger().total_sent_bytes();
            let mut counts = self.accuracy_counts(&eval_out).to_vec();
            counts.push((sent_so_far - bytes_seen) as f64);
            bytes_seen = sent_so_far;
            let totals = reduce_sum(comm, Tag::new(epoch as u32, 2, Direction::Reduce), &counts)?;
            let acc = |i: usize| if totals[2 * i + 1] > 0.0 { totals[2 * i] / totals[2 * i + 1] } else { 0.0 };
            metrics.push(EpochMetrics {
                epoch,
                loss,
                train_acc: acc(0),
                val_acc: acc(1),
                test_acc: acc(2),
                bytes_sent: totals[6] as u64,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
            logits = eval_out;
        }

        if self.cfg.epochs == 0 {
            // Still produce evaluation logits for the initial weights.
            let eval_selection = if self.cfg.label_prop { Selection::AllTrain } else { Selection::None };
            let x_eval = self.injected_features(&params, eval_selection);
            let (_, eval_out) = self.forward(&params, x_eval, 0, Direction::Eval, comm)?;
            logits = eval_out;
        }

        Ok(WorkerOutput { metrics, logits, ledger: comm.ledger().clone(), params })
    }
}

/// Runs one worker against an already-connected transport endpoint.
/// This is the entry point for multi-process (TCP) deployments, where
/// each process builds the same partition and plan deterministically and
/// then trains its own rank.
pub fn run_worker<T: Scalar>(
    sub: &Subgraph<T>,
    plan: &CommPlan,
    cfg: &TrainConfig,
    num_classes: usize,
    comm: &mut dyn Collective,
) -> Result<WorkerOutput<T>> {
    if comm.world_size() != sub.num_parts || comm.rank() != sub.owner {
        return Err(Error::InvalidInput(format!(
            "endpoint is rank {}/{} but the subgraph is part {}/{}",
            comm.rank(),
            comm.world_size(),
            sub.owner,
            sub.num_parts
        )));
    }
    Worker::new(sub, plan, cfg, num_classes)?.run(comm)
}

/// Result of an in-process training run.
pub struct TrainRun<T: Scalar> {
    pub metrics: Vec<EpochMetrics>,
    /// Final evaluation logits assembled in global node order.
    pub logits: DenseMat<T>,
    /// Final weights (identical on every worker; rank 0's copy).
    pub params: ModelParams<T>,
    /// Per-rank transport ledgers.
    pub ledgers: Vec<ByteLedger>,
    pub plan: CommPlan,
    pub partition: Partition,
}

/// Partitions the graph, plans communication, and trains with one thread
/// per part over the in-process transport.
pub fn train_in_process<T: Scalar>(g: &CsrGraph<T>, partition: &Partition, cfg: &TrainConfig) -> Result<TrainRun<T>> {
    cfg.validate()?;
    let subs = build_subgraphs(g, partition)?;
    let plan = plan_all(&subs)?;
    let num_classes = g.num_classes();
    let plan_ref = &plan;
    let subs_ref = &subs;
    let results = run_in_process(partition.num_parts, |rank, mut ep| {
        run_worker(&subs_ref[rank], plan_ref, cfg, num_classes, &mut ep)
    });
    let outputs = first_root_error(results)?;

    let mut logits = DenseMat::zeros(g.num_nodes(), num_classes);
    for (rank, out) in outputs.iter().enumerate() {
        for (v, &gid) in subs[rank].inner_nodes.iter().enumerate() {
            let (dst, src) = (logits.row_mut(gid), out.logits.row(v));
            dst.copy_from_slice(src);
        }
    }
    let mut outputs = outputs;
    let ledgers = outputs.iter().map(|o| o.ledger.clone()).collect();
    let first = outputs.remove(0);
    Ok(TrainRun {
        metrics: first.metrics,
        logits,
        params: first.params,
        ledgers,
        plan,
        partition: partition.clone(),
    })
}

/// Loss and globally reduced flattened gradient at fixed weights, one
/// training forward/backward with no update, over any worker count.
/// This exposes the complete differentiation path (normalization,
/// aggregation, label injection, wire quantization) to direct numerical
/// checking.
pub fn distributed_loss_and_grad<T: Scalar>(
    g: &CsrGraph<T>,
    partition: &Partition,
    cfg: &TrainConfig,
    params: &ModelParams<T>,
    epoch: u64,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let subs = build_subgraphs(g, partition)?;
    let plan = plan_all(&subs)?;
    let num_classes = g.num_classes();
    let (subs_ref, plan_ref) = (&subs, &plan);
    let results = run_in_process(partition.num_parts, |rank, mut ep| {
        let worker = Worker::new(&subs_ref[rank], plan_ref, cfg, num_classes)?;
        worker.train_grad(params, epoch, &mut ep)
    });
    Ok(first_root_error(results)?.remove(0))
}

/// Single-worker convenience wrapper around [`distributed_loss_and_grad`],
/// the reference gradient for finite-difference checks.
pub fn loss_and_grad<T: Scalar>(
    g: &CsrGraph<T>,
    cfg: &TrainConfig,
    params: &ModelParams<T>,
    epoch: u64,
) -> Result<(f64, Vec<f64>)> {
    let partition = Partition::from_assignment(1, vec![0; g.num_nodes()], &vec![1.0; g.num_nodes()])?;
    distributed_loss_and_grad(g, &partition, cfg, params, epoch)
}

// ---------------------------------------------------------------------------
// Metrics CSV and checkpoints
// ---------------------------------------------------------------------------

/// Renders per-epoch metrics as CSV with a `#` summary line.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,train_acc,val_acc,test_acc,bytes_sent,wall_ms\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{:.6},{:.4},{:.4},{:.4},{},{}\n",
            m.epoch, m.loss, m.train_acc, m.val_acc, m.test_acc, m.bytes_sent, m.wall_ms
        ));
    }
    let total_bytes: u64 = metrics.iter().map(|m| m.bytes_sent).sum();
    let total_ms: u64 = metrics.iter().map(|m| m.wall_ms).sum();
    let last = metrics.last();
    out.push_str(&format!(
        "# final test_acc={:.4} total_bytes={} total_wall_ms={}\n",
        last.map_or(0.0, |m| m.test_acc),
        total_bytes,
        total_ms
    ));
    out
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes all weight tensors as a versioned little-endian binary file.
pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    out.push(params.w_embed.is_some() as u8);
    for l in &params.layers {
        out.push(l.w_self.is_some() as u8);
        out.push(l.bias.is_some() as u8);
        out.push(l.ln_gain.is_some() as u8);
        out.extend_from_slice(&(l.w.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(l.w.cols() as u64).to_le_bytes());
    }
    if let Some(e) = &params.w_embed {
        out.extend_from_slice(&(e.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(e.cols() as u64).to_le_bytes());
    }
    for v in params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(path: &std::path::Path) -> Result<ModelParams<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::format(path, "checkpoint truncated"));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let num_layers = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let has_embed = take(&mut at, 1)?[0] != 0;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let has_self = take(&mut at, 1)?[0] != 0;
        let has_bias = take(&mut at, 1)?[0] != 0;
        let has_ln = take(&mut at, 1)?[0] != 0;
        let rows = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        layers.push(LayerParams {
            w_self: has_self.then(|| DenseMat::zeros(rows, cols)),
            w: DenseMat::zeros(rows, cols),
            bias: has_bias.then(|| vec![T::from_f64(0.0); cols]),
            ln_gain: has_ln.then(|| vec![T::from_f64(0.0); rows]),
            ln_shift: has_ln.then(|| vec![T::from_f64(0.0); rows]),
        });
    }
    let w_embed = if has_embed {
        let rows = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        Some(DenseMat::zeros(rows, cols))
    } else {
        None
    };
    let mut params = ModelParams { layers, w_embed };
    let n = params.num_params();
    let data = take(&mut at, n * 8)?;
    if at != bytes.len() {
        return Err(Error::format(path, "checkpoint has trailing bytes"));
    }
    let flat: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    params.set_from_flat(&flat)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synth::{planted_partition, PlantedConfig};
    use crate::graph::WeightMode;

    fn line_graph(n: usize, f: usize) -> CsrGraph<f64> {
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|v| (v, v + 1)).collect();
        let mut g = CsrGraph::<f64>::from_edges(n, &edges, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        g.set_features(DenseMat::uniform(n, f, -1.0, 1.0, &mut rng)).unwrap();
        let labels: Vec<i32> = (0..n).map(|v| (v % 3) as i32).collect();
        g.set_labels(labels).unwrap();
        let train: Vec<bool> = (0..n).map(|v| v % 2 == 0).collect();
        let val: Vec<bool> = (0..n).map(|v| v % 4 == 1).collect();
        let test: Vec<bool> = (0..n).map(|v| v % 4 == 3).collect();
        g.set_masks(train, val, test).unwrap();
        g
    }

    fn single_partition(n: usize) -> Partition {
        Partition::from_assignment(1, vec![0; n], &vec![1.0; n]).unwrap()
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMat::<f64>::uniform(10, 32, -5.0, 9.0, &mut rng);
        let gain = vec![1.0f64; 32];
        let shift = vec![0.0f64; 32];
        let (y, _) = layer_norm_forward(&x, &gain, &shift);
        for r in 0..y.rows() {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 32.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DenseMat::<f64>::uniform(3, 5, -2.0, 2.0, &mut rng);
        let gain: Vec<f64> = (0..5).map(|i| 0.5 + 0.2 * i as f64).collect();
        let shift: Vec<f64> = (0..5).map(|i| 0.1 * i as f64).collect();
        // Scalar objective: weighted sum of outputs.
        let w = DenseMat::<f64>::uniform(3, 5, -1.0, 1.0, &mut rng);
        let f = |x: &DenseMat<f64>, gain: &[f64], shift: &[f64]| -> f64 {
            let (y, _) = layer_norm_forward(x, gain, shift);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm_forward(&x, &gain, &shift);
        let (dx, dgain, dshift) = layer_norm_backward(&w, &cache, &gain);
        let h = 1e-6;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (f(&xp, &gain, &shift) - f(&xm, &gain, &shift)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-5, "dx[{idx}]: fd {fd} vs {}", dx.data()[idx]);
        }
        for c in 0..5 {
            let mut gp = gain.clone();
            let mut gm = gain.clone();
            gp[c] += h;
            gm[c] -= h;
            let fd = (f(&x, &gp, &shift) - f(&x, &gm, &shift)) / (2.0 * h);
            assert!((fd - dgain[c]).abs() < 1e-5);
            let mut sp = shift.clone();
            let mut sm = shift.clone();
            sp[c] += h;
            sm[c] -= h;
            let fd = (f(&x, &gain, &sp) - f(&x, &gain, &sm)) / (2.0 * h);
            assert!((fd - dshift[c]).abs() < 1e-5);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let g = line_graph(8, 4);
        let cfg = TrainConfig {
            num_layers: 1,
            label_prop: false,
            layer_norm: false,
            bias: false,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::<f64>::init(&cfg, 4, 3);
        // Zero weights make every logit row identical (all zeros), i.e.
        // a uniform distribution over the 3 classes.
        let zeros = vec![0.0; params.num_params()];
        params.set_from_flat(&zeros).unwrap();
        let (loss, grad) = loss_and_grad(&g, &cfg, &params, 0).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "loss {loss}");
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn perfect_logits_drive_loss_to_zero() {
        // Single isolated node per class with an identity-like feature
        // map; hand-set weights produce arbitrarily confident logits.
        let mut g = CsrGraph::<f64>::from_edges(3, &[], false).unwrap();
        g.set_features(DenseMat::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]))
        .unwrap();
        g.set_labels(vec![0, 1, 2]).unwrap();
        g.set_masks(vec![true; 3], vec![false; 3], vec![false; 3]).unwrap();
        let cfg = TrainConfig {
            num_layers: 1,
            model: ModelKind::Sage,
            layer_norm: false,
            bias: false,
            label_prop: false,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::<f64>::init(&cfg, 3, 3);
        // Isolated nodes aggregate to zero, so only W_self matters.
        let scale = 50.0;
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { scale } else { 0.0 }).collect();
        params.layers[0].w_self = Some(DenseMat::from_vec(3, 3, eye));
        params.layers[0].w.fill(0.0);
        let (loss, _) = loss_and_grad(&g, &cfg, &params, 0).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    fn fd_check(cfg: &TrainConfig, g: &CsrGraph<f64>, tol: f64) {
        let params = ModelParams::<f64>::init(cfg, g.feature_dim(), g.num_classes());
        let (_, grad) = loss_and_grad(g, cfg, &params, 1).unwrap();
        let flat = params.flatten();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..flat.len() {
            let mut fp = flat.clone();
            fp[idx] += h;
            let mut pp = params.clone();
            pp.set_from_flat(&fp).unwrap();
            let (lp, _) = loss_and_grad(g, cfg, &pp, 1).unwrap();
            fp[idx] -= 2.0 * h;
            pp.set_from_flat(&fp).unwrap();
            let (lm, _) = loss_and_grad(g, cfg, &pp, 1).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
            let rel = (fd - grad[idx]).abs() / denom;
            worst = worst.max(rel);
            assert!(rel < tol, "param {idx}: fd {fd} vs analytic {} (rel {rel})", grad[idx]);
        }
        assert!(worst < tol);
    }

    #[test]
    fn gradients_match_finite_differences_sage() {
        let g = line_graph(8, 3);
        let cfg = TrainConfig {
            num_layers: 2,
            hidden_dim: 4,
            layer_norm: false,
            label_prop: false,
            ..TrainConfig::default()
        };
        fd_check(&cfg, &g, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_with_norm_and_labels() {
        let g = line_graph(8, 3);
        let cfg = TrainConfig {
            num_layers: 2,
            hidden_dim: 4,
            layer_norm: true,
            label_prop: true,
            label_rate: 0.5,
            ..TrainConfig::default()
        };
        fd_check(&cfg, &g, 1e-4);
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let g = planted_partition(&PlantedConfig { num_nodes: 60, ..PlantedConfig::default() }, 1);
        let g = g.cast::<f32>();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            num_layers: 2,
            hidden_dim: 8,
            ..TrainConfig::default()
        };
        let part = single_partition(g.num_nodes());
        let run = train_in_process(&g, &part, &cfg).unwrap();
        let initial = ModelParams::<f32>::init(&cfg, g.feature_dim(), g.num_classes());
        assert_eq!(run.params.flatten(), initial.flatten());
        let losses: Vec<f64> = run.metrics.iter().map(|m| m.loss).collect();
        assert!((losses[0] - losses[2]).abs() < 1e-12, "losses {losses:?}");
    }

    #[test]
    fn separable_features_without_edges_reach_high_accuracy() {
        // Logistic-regression regime: no edges, one-hot-ish features.
        let n = 120;
        let mut g = CsrGraph::<f32>::from_edges(n, &[], false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut feats = DenseMat::<f32>::uniform(n, 8, -0.05, 0.05, &mut rng);
        let labels: Vec<i32> = (0..n).map(|v| (v % 4) as i32).collect();
        for v in 0..n {
            let c = labels[v] as usize;
            feats.row_mut(v)[c] += 1.0;
        }
        g.set_features(feats).unwrap();
        g.set_labels(labels).unwrap();
        g.set_masks(vec![true; n], vec![false; n], (0..n).map(|v| v % 5 == 0).collect()).unwrap();
        let cfg = TrainConfig {
            num_layers: 1,
            epochs: 200,
            lr: 0.5,
            model: ModelKind::Sage,
            layer_norm: false,
            label_prop: false,
            ..TrainConfig::default()
        };
        let run = train_in_process(&g, &single_partition(n), &cfg).unwrap();
        let last = run.metrics.last().unwrap();
        assert!(last.train_acc >= 0.99, "train accuracy {}", last.train_acc);
    }

    #[test]
    fn three_node_forward_matches_hand_computation() {
        // Triangle 0->1->2->0 plus reverse, GCN mode, sum aggregation,
        // linear activation, weights = identity column picks.
        let mut g = CsrGraph::<f64>::from_edges(3, &[(0, 1), (1, 2), (2, 0)], false).unwrap();
        g.set_features(DenseMat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])).unwrap();
        g.set_labels(vec![0, 1, 0]).unwrap();
        g.set_masks(vec![true; 3], vec![false; 3], vec![false; 3]).unwrap();
        let cfg = TrainConfig {
            num_layers: 1,
            model: ModelKind::Gcn,
            activation: Activation::Linear,
            agg: AggMode::Sum,
            layer_norm: false,
            bias: false,
            label_prop: false,
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::<f64>::init(&cfg, 2, 2);
        params.layers[0].w = DenseMat::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        // In-neighbor of 1 is 0, of 2 is 1, of 0 is 2.
        // logits[v] = x[in(v)] · diag(1, 2).
        let part = single_partition(3);
        let subs = build_subgraphs(&g, &part).unwrap();
        let plan = plan_all(&subs).unwrap();
        let worker = Worker::new(&subs[0], &plan, &cfg, 2).unwrap();
        let mut results = run_in_process(1, |_r, mut ep| {
            let comm: &mut dyn Collective = &mut ep;
            let x0 = worker.injected_features(&params, Selection::None);
            let (_, out) = worker.forward(&params, x0, 0, Direction::Forward, comm)?;
            Ok(out)
        });
        let out = results.remove(0).unwrap();
        assert_eq!(out.row(0), &[5.0, 12.0]);
        assert_eq!(out.row(1), &[1.0, 4.0]);
        assert_eq!(out.row(2), &[3.0, 8.0]);
    }

    #[test]
    fn linear_chain_equals_dense_matrix_power_oracle() {
        // Linear GCN with label injection: output must equal
        // A^L (X + Y·W_embed) W0 W1 … exactly (within FP64 tolerance).
        let g = planted_partition(&PlantedConfig { num_nodes: 40, feature_dim: 6, ..PlantedConfig::default() }, 3);
        let g = g.cast::<f64>();
        for num_layers in 1..=3 {
            let cfg = TrainConfig {
                num_layers,
                hidden_dim: 5,
                model: ModelKind::Gcn,
                activation: Activation::Linear,
                agg: AggMode::Sum,
                layer_norm: false,
                bias: false,
                label_prop: true,
                label_rate: 0.62,
                epochs: 0,
                seed: 9,
                ..TrainConfig::default()
            };
            let run = train_in_process(&g, &single_partition(g.num_nodes()), &cfg).unwrap();
            // Dense oracle.
            let n = g.num_nodes();
            let mut a = DenseMat::<f64>::zeros(n, n);
            for (src, dst) in g.edges() {
                a.row_mut(dst)[src] += 1.0;
            }
            let mut x = g.features().clone();
            let w_embed = run.params.w_embed.as_ref().unwrap();
            for v in 0..n {
                if g.train_mask()[v] && g.labels()[v] >= 0 {
                    let row = w_embed.row(g.labels()[v] as usize);
                    for (xv, e) in x.row_mut(v).iter_mut().zip(row) {
                        *xv += *e;
                    }
                }
            }
            let mut h = x;
            for l in 0..num_layers {
                h = a.matmul(&h).matmul(&run.params.layers[l].w);
            }
            assert!(
                run.logits.max_abs_diff(&h) < 1e-6,
                "layers {num_layers}: diff {}",
                run.logits.max_abs_diff(&h)
            );
        }
    }

    /// Largest element difference, relative to the overall magnitude of
    /// the reference matrix.  Element-wise relative error is meaningless
    /// for logits that cross zero.
    fn scale_rel_diff<T: Scalar>(a: &DenseMat<T>, b: &DenseMat<T>) -> f64 {
        let scale = a.data().iter().map(|&x| x.to_f64().abs()).fold(0.0f64, f64::max).max(1e-12);
        let worst =
            a.data().iter().zip(b.data()).map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs()).fold(0.0f64, f64::max);
        worst / scale
    }

    #[test]
    fn worker_counts_produce_identical_fp32_logits() {
        let g = planted_partition(&PlantedConfig { num_nodes: 120, feature_dim: 8, ..PlantedConfig::default() }, 7);
        let g = g.cast::<f32>();
        let cfg = TrainConfig {
            num_layers: 2,
            hidden_dim: 8,
            epochs: 2,
            lr: 0.2,
            ..TrainConfig::default()
        };
        let baseline = train_in_process(&g, &single_partition(g.num_nodes()), &cfg).unwrap();
        for parts in [2usize, 3] {
            let partition = crate::graph::partition_weighted(&g, parts, WeightMode::Uniform, 1).unwrap();
            let run = train_in_process(&g, &partition, &cfg).unwrap();
            let rel = scale_rel_diff(&baseline.logits, &run.logits);
            assert!(rel < 1e-5, "parts {parts}: relative logit difference {rel}");
            for (a, b) in baseline.metrics.iter().zip(&run.metrics) {
                assert!((a.loss - b.loss).abs() < 1e-6, "loss {} vs {}", a.loss, b.loss);
            }
        }
    }

    #[test]
    fn quantized_boundary_gradients_are_unbiased_over_streams() {
        // Fixed weights, two workers. The full-precision gradient does
        // not depend on the epoch (no label propagation), while the
        // quantization streams do, so averaging over epochs averages
        // over independent stochastic-rounding draws.
        let pcfg = PlantedConfig { num_nodes: 80, feature_dim: 6, p_in: 0.2, p_out: 0.05, ..PlantedConfig::default() };
        let g = planted_partition(&pcfg, 13).cast::<f64>();
        let partition = crate::graph::partition_weighted(&g, 2, WeightMode::Uniform, 0).unwrap();
        // Linear activation: the rectifier's gradient mask is a step
        // function, and a rounding draw that flips one near-zero
        // pre-activation produces a discrete gradient jump that has
        // nothing to do with rounding bias.  The unbiasedness statement
        // concerns the smooth regime.
        let cfg_fp = TrainConfig {
            num_layers: 2,
            hidden_dim: 6,
            label_prop: false,
            layer_norm: false,
            activation: Activation::Linear,
            bits: None,
            ..TrainConfig::default()
        };
        // 8-bit steps keep the rounding perturbation small enough that
        // the softmax is locally linear in the exchanged rows; coarser
        // widths add a second-order curvature bias that does not average
        // out and would mask the unbiasedness of the rounding itself.
        let cfg_q = TrainConfig { bits: Some(BitWidth::Int8), ..cfg_fp.clone() };
        let params = ModelParams::<f64>::init(&cfg_fp, g.feature_dim(), g.num_classes());
        let (_, g_fp) = distributed_loss_and_grad(&g, &partition, &cfg_fp, &params, 0).unwrap();
        let trials = 48u64;
        let mut mean = vec![0.0f64; g_fp.len()];
        for e in 0..trials {
            let (_, gq) = distributed_loss_and_grad(&g, &partition, &cfg_q, &params, e).unwrap();
            for (m, v) in mean.iter_mut().zip(gq) {
                *m += v / trials as f64;
            }
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (_, g_once) = distributed_loss_and_grad(&g, &partition, &cfg_q, &params, 0).unwrap();
        let d_mean = dist(&mean, &g_fp);
        let d_once = dist(&g_once, &g_fp);
        assert!(d_once > 1e-9, "quantization must actually perturb the gradient (got {d_once:.3e})");
        assert!(
            d_mean < 0.5 * d_once,
            "averaging {trials} stream draws should approach the full-precision gradient: \
             mean distance {d_mean:.3e} vs single draw {d_once:.3e}"
        );
    }

    #[test]
    fn quantized_distributed_run_trains_and_conserves_bytes() {
        let g = planted_partition(&PlantedConfig { num_nodes: 150, ..PlantedConfig::default() }, 2);
        let g = g.cast::<f32>();
        let cfg = TrainConfig {
            num_layers: 2,
            hidden_dim: 8,
            epochs: 3,
            bits: Some(BitWidth::Int4),
            label_prop: true,
            ..TrainConfig::default()
        };
        let partition = crate::graph::partition_weighted(&g, 3, WeightMode::Uniform, 0).unwrap();
        let run = train_in_process(&g, &partition, &cfg).unwrap();
        assert_eq!(run.metrics.len(), 3);
        assert!(run.metrics.iter().all(|m| m.loss.is_finite()));
        // Pairwise conservation across the worker ledgers.
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(run.ledgers[i].sent[j], run.ledgers[j].received[i]);
                }
            }
        }
        // Quantized exchanges ship parameter bytes.
        let total_params: u64 = run.ledgers.iter().map(|l| l.sent.iter().map(|c| c.param_bytes).sum::<u64>()).sum();
        assert!(total_params > 0);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let g = planted_partition(&PlantedConfig { num_nodes: 60, ..PlantedConfig::default() }, 1);
        let g = g.cast::<f32>();
        let cfg = TrainConfig {
            num_layers: 2,
            hidden_dim: 8,
            epochs: 50,
            lr: 1e8,
            layer_norm: false,
            ..TrainConfig::default()
        };
        match train_in_process(&g, &single_partition(g.num_nodes()), &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch > 0),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.metrics.len())),
        }
    }

    #[test]
    fn metrics_csv_has_header_rows_and_summary() {
        let metrics = vec![EpochMetrics {
            epoch: 0,
            loss: 1.5,
            train_acc: 0.5,
            val_acc: 0.25,
            test_acc: 0.125,
            bytes_sent: 10,
            wall_ms: 3,
        }];
        let csv = metrics_csv(&metrics);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,loss,train_acc,val_acc,test_acc,bytes_sent,wall_ms");
        assert_eq!(lines[1], "0,1.500000,0.5000,0.2500,0.1250,10,3");
        assert!(lines[2].starts_with("# final test_acc=0.1250"));
        assert!(metrics_csv(&[]).lines().count() == 2);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let cfg = TrainConfig { num_layers: 2, hidden_dim: 5, label_prop: true, ..TrainConfig::default() };
        let params = ModelParams::<f32>::init(&cfg, 7, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        save_checkpoint(&params, &path).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(params.flatten(), back.flatten());
        assert_eq!(params.num_params(), back.num_params());

        std::fs::write(&path, b"junk").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn selection_is_worker_count_independent_and_epoch_varying() {
        let picks: Vec<bool> = (0..100).map(|gid| label_selected(7, 3, gid, 0.62)).collect();
        let again: Vec<bool> = (0..100).map(|gid| label_selected(7, 3, gid, 0.62)).collect();
        assert_eq!(picks, again);
        let other_epoch: Vec<bool> = (0..100).map(|gid| label_selected(7, 4, gid, 0.62)).collect();
        assert_ne!(picks, other_epoch);
        let frac = picks.iter().filter(|&&b| b).count() as f64 / 100.0;
        assert!(frac > 0.4 && frac < 0.85, "selection fraction {frac}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.num_layers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.label_prop = true;
        cfg.label_rate = 1.5;
        assert!(cfg.validate().is_err());
    }
}
