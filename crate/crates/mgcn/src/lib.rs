//! Multi-worker full-batch GCN training over partitioned graphs.
//!
//! The crate is organized around the lifecycle of a distributed run:
//!
//! * [`graph`]: CSR graphs, file formats, greedy partitioning, and the
//!   per-worker subgraph views (local edges, cut edges, boundary nodes).
//! * [`commplan`]: turns the cut edges between a pair of workers into a
//!   communication plan. Feature rows for nodes in a minimum vertex cover
//!   of the cut-edge bipartite graph are either sent whole (post-aggregation
//!   on the receiver) or pre-reduced on the sender, which minimizes the
//!   number of rows on the wire.
//! * [`quant`]: stochastic-rounding integer codecs (2/4/8 bit) for the
//!   boundary rows, with per-row scale/zero-point parameters kept in FP32.
//! * [`kernels`]: sparse aggregation (index_add / SpMM) with a planned,
//!   load-balanced parallel schedule and a deterministic mode.
//! * [`transport`]: an all-to-allv style collective with in-process and
//!   TCP backends plus per-pair byte accounting.
//! * [`engine`]: layers, label-embedding augmentation, autograd, and the
//!   multi-worker training loop.
//! * [`perfmodel`]: analytic communication/computation time model used to
//!   predict when quantized exchange pays off.

pub mod commplan;
pub mod engine;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod mat;
pub mod perfmodel;
pub mod quant;
pub mod transport;

pub use error::{Error, Result};
