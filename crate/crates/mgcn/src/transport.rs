//! All-to-allv exchange among workers with byte accounting.
//!
//! Two backends implement the same [`Collective`] trait: an in-process
//! fabric (each worker is a thread, messages travel over channels) and a
//! TCP mesh (each worker is a process, messages travel as length-prefixed
//! frames).  A collective call is the synchronization point: it returns
//! only once the payload from every peer for the same [`Tag`] has arrived,
//! so no worker can observe data from a later exchange before the current
//! one completes.  Every frame carries its tag; a mismatch means the peers
//! have desynchronized and surfaces as an explicit error instead of silent
//! data corruption.

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Default per-collective timeout: long enough for desk-scale runs, short
/// enough that a hung peer is reported rather than waited on forever.
pub const COLLECTIVE_TIMEOUT: Duration = Duration::from_secs(30);

/// First four bytes of every TCP frame.
pub const FRAME_MAGIC: u32 = u32::from_le_bytes(*b"MGTX");

/// Frame header layout: magic `u32`, tag `u64`, body length `u32`.
pub const FRAME_HEADER_LEN: usize = 16;

/// Environment variable consulted for the TCP rank override.
pub const RANK_ENV: &str = "MGCN_RANK";

/// Which phase of an epoch an exchange belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Boundary-feature exchange during the training forward pass.
    Forward = 0,
    /// Boundary-gradient exchange during the backward pass.
    Backward = 1,
    /// Scalar/gradient reductions (loss, weight gradients, metrics).
    Reduce = 2,
    /// Boundary-feature exchange during the evaluation forward pass.
    Eval = 3,
}

impl Direction {
    fn from_code(code: u8) -> Result<Direction> {
        match code {
            0 => Ok(Direction::Forward),
            1 => Ok(Direction::Backward),
            2 => Ok(Direction::Reduce),
            3 => Ok(Direction::Eval),
            other => Err(Error::Transport(format!("unknown direction code {other}"))),
        }
    }
}

/// Identifies one collective: all workers must present the same tag, and
/// the sequence of tags is identical on every worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tag {
    pub epoch: u32,
    pub layer: u16,
    pub direction: Direction,
}

impl Tag {
    pub fn new(epoch: u32, layer: u16, direction: Direction) -> Tag {
        Tag { epoch, layer, direction }
    }

    /// Packs the tag into the `u64` slot of a frame header.
    pub fn encode(self) -> u64 {
        ((self.epoch as u64) << 32) | ((self.layer as u64) << 8) | self.direction as u64
    }

    /// Inverse of [`Tag::encode`].
    pub fn decode(word: u64) -> Result<Tag> {
        let direction = Direction::from_code((word & 0xFF) as u8)?;
        Ok(Tag { epoch: (word >> 32) as u32, layer: ((word >> 8) & 0xFFFF) as u16, direction })
    }
}

/// One peer's share of a collective.  `data` carries the payload proper
/// (packed codes or raw rows); `params` carries per-row dequantization
/// parameters and is empty in FP32 mode.  The split exists so the ledger
/// can account for the two separately.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Payload {
    pub data: Vec<u8>,
    pub params: Vec<u8>,
}

impl Payload {
    pub fn new(data: Vec<u8>, params: Vec<u8>) -> Payload {
        Payload { data, params }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty() && self.params.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.data.len() + self.params.len()
    }
}

/// Cumulative traffic with one peer.  Bytes count payload content only —
/// frame headers are transport overhead, not scheduled communication.
/// Every frame exchanged with a remote peer counts as one message, empty
/// or not, because even an empty frame pays the per-message latency;
/// self-delivery never touches the wire and is not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounter {
    pub data_bytes: u64,
    pub param_bytes: u64,
    pub messages: u64,
}

impl PairCounter {
    pub fn total_bytes(&self) -> u64 {
        self.data_bytes + self.param_bytes
    }

    fn add(&mut self, payload: &Payload) {
        self.data_bytes += payload.data.len() as u64;
        self.param_bytes += payload.params.len() as u64;
        self.messages += 1;
    }
}

/// Per-peer cumulative counters for one endpoint, in both directions.
/// Conservation holds by construction: what rank `i` records as sent to
/// `j` must equal what rank `j` records as received from `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteLedger {
    pub sent: Vec<PairCounter>,
    pub received: Vec<PairCounter>,
}

impl ByteLedger {
    pub fn new(world_size: usize) -> ByteLedger {
        ByteLedger { sent: vec![PairCounter::default(); world_size], received: vec![PairCounter::default(); world_size] }
    }

    pub fn reset(&mut self) {
        self.sent.fill(PairCounter::default());
        self.received.fill(PairCounter::default());
    }

    pub fn total_sent_bytes(&self) -> u64 {
        self.sent.iter().map(PairCounter::total_bytes).sum()
    }

    pub fn total_received_bytes(&self) -> u64 {
        self.received.iter().map(PairCounter::total_bytes).sum()
    }
}

/// Variable-size all-to-all among a fixed set of ranks.
pub trait Collective: Send {
    fn rank(&self) -> usize;

    fn world_size(&self) -> usize;

    /// Exchanges one payload with every rank (the entry at `self.rank()`
    /// is delivered locally).  Returns the payloads received from each
    /// rank, indexed by sender.  Completes only when all peers' payloads
    /// for this tag have arrived.
    fn all_to_allv(&mut self, tag: Tag, outgoing: Vec<Payload>) -> Result<Vec<Payload>>;

    fn ledger(&self) -> &ByteLedger;

    fn reset_ledger(&mut self);

    /// Overrides the per-collective timeout (default 30 s).
    fn set_timeout(&mut self, timeout: Duration);

    /// Sends the same buffer to every rank and returns all ranks' buffers
    /// indexed by sender, own contribution included.
    fn all_gather(&mut self, tag: Tag, data: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let outgoing = vec![Payload::new(data, Vec::new()); self.world_size()];
        let received = self.all_to_allv(tag, outgoing)?;
        Ok(received.into_iter().map(|p| p.data).collect())
    }
}

type Frame = std::result::Result<(u64, Payload), String>;

fn check_world(outgoing: &[Payload], world: usize) -> Result<()> {
    if outgoing.len() != world {
        return Err(Error::Transport(format!(
            "collective called with {} payloads for world size {world}",
            outgoing.len()
        )));
    }
    Ok(())
}

fn verify_tag(expected: Tag, got: u64, peer: usize) -> Result<()> {
    if got != expected.encode() {
        let got = Tag::decode(got).map(|t| format!("{t:?}")).unwrap_or_else(|_| format!("raw 0x{got:016x}"));
        return Err(Error::Transport(format!(
            "tag mismatch from rank {peer}: expected {expected:?}, got {got}"
        )));
    }
    Ok(())
}

fn recv_with_deadline(rx: &Receiver<Frame>, deadline: Instant, peer: usize, tag: Tag) -> Result<(u64, Payload)> {
    let remaining = deadline.saturating_duration_since(Instant::now());
    match rx.recv_timeout(remaining) {
        Ok(Ok(frame)) => Ok(frame),
        Ok(Err(msg)) => Err(Error::Transport(format!("rank {peer}: {msg}"))),
        Err(RecvTimeoutError::Timeout) => Err(Error::Transport(format!(
            "timed out waiting for rank {peer} (tag {tag:?})"
        ))),
        Err(RecvTimeoutError::Disconnected) => {
            Err(Error::Transport(format!("rank {peer} disconnected (tag {tag:?})")))
        }
    }
}

// ---------------------------------------------------------------------------
// In-process backend
// ---------------------------------------------------------------------------

/// One worker's endpoint in an in-process fabric.  All endpoints of a run
/// are created together by [`inproc_fabric`] and then moved into worker
/// threads; they are not shared.
pub struct InProcEndpoint {
    rank: usize,
    world: usize,
    /// `txs[j]` sends to rank `j` (including self, for uniformity).
    txs: Vec<Sender<Frame>>,
    /// `rxs[j]` receives what rank `j` sent here.
    rxs: Vec<Receiver<Frame>>,
    ledger: ByteLedger,
    timeout: Duration,
}

/// Builds the full mesh of channels for `world_size` in-process workers
/// and hands each worker its endpoint.
pub fn inproc_fabric(world_size: usize) -> Vec<InProcEndpoint> {
    assert!(world_size >= 1, "world size must be at least 1");
    // senders[i][j] sends i -> j; receivers[j][i] is the matching end.
    let mut txs: Vec<Vec<Option<Sender<Frame>>>> = (0..world_size).map(|_| (0..world_size).map(|_| None).collect()).collect();
    let mut rxs: Vec<Vec<Option<Receiver<Frame>>>> =
        (0..world_size).map(|_| (0..world_size).map(|_| None).collect()).collect();
    for i in 0..world_size {
        for j in 0..world_size {
            let (tx, rx) = mpsc::channel();
            txs[i][j] = Some(tx);
            rxs[j][i] = Some(rx);
        }
    }
    txs.into_iter()
        .zip(rxs)
        .enumerate()
        .map(|(rank, (tx_row, rx_row))| InProcEndpoint {
            rank,
            world: world_size,
            txs: tx_row.into_iter().map(Option::unwrap).collect(),
            rxs: rx_row.into_iter().map(Option::unwrap).collect(),
            ledger: ByteLedger::new(world_size),
            timeout: COLLECTIVE_TIMEOUT,
        })
        .collect()
}

impl Collective for InProcEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn all_to_allv(&mut self, tag: Tag, outgoing: Vec<Payload>) -> Result<Vec<Payload>> {
        check_world(&outgoing, self.world)?;
        let deadline = Instant::now() + self.timeout;
        for (j, payload) in outgoing.into_iter().enumerate() {
            if j != self.rank {
                self.ledger.sent[j].add(&payload);
            }
            self.txs[j]
                .send(Ok((tag.encode(), payload)))
                .map_err(|_| Error::Transport(format!("rank {j} disconnected before send")))?;
        }
        let mut received = Vec::with_capacity(self.world);
        for j in 0..self.world {
            let (raw, payload) = recv_with_deadline(&self.rxs[j], deadline, j, tag)?;
            verify_tag(tag, raw, j)?;
            if j != self.rank {
                self.ledger.received[j].add(&payload);
            }
            received.push(payload);
        }
        Ok(received)
    }

    fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    fn reset_ledger(&mut self) {
        self.ledger.reset();
    }

    fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }
}

// ---------------------------------------------------------------------------
// TCP backend
// ---------------------------------------------------------------------------

/// Where each rank listens, plus which rank this process is.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TcpRendezvous {
    pub rank: usize,
    /// `peers[r]` is the `host:port` rank `r` listens on.
    pub peers: Vec<String>,
}

impl TcpRendezvous {
    /// Reads a rendezvous file: one `host:port` per line in rank order,
    /// `#` comments and blank lines ignored.
    pub fn from_file(path: &Path, rank: usize) -> Result<TcpRendezvous> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut peers = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if !line.contains(':') {
                return Err(Error::parse(path, lineno + 1, format!("expected host:port, got {line:?}")));
            }
            peers.push(line.to_string());
        }
        if peers.is_empty() {
            return Err(Error::format(path, "rendezvous file lists no endpoints"));
        }
        if rank >= peers.len() {
            return Err(Error::Config(format!("rank {rank} out of range for {} endpoints", peers.len())));
        }
        Ok(TcpRendezvous { rank, peers })
    }
}

/// Parses the rank override from the environment, if set.
pub fn env_rank() -> Result<Option<usize>> {
    match std::env::var(RANK_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{RANK_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn write_frame(stream: &mut TcpStream, tag: u64, payload: &Payload) -> std::io::Result<()> {
    let body_len = 4 + payload.params.len() + payload.data.len();
    let mut header = [0u8; FRAME_HEADER_LEN];
    header[0..4].copy_from_slice(&FRAME_MAGIC.to_le_bytes());
    header[4..12].copy_from_slice(&tag.to_le_bytes());
    header[12..16].copy_from_slice(&(body_len as u32).to_le_bytes());
    stream.write_all(&header)?;
    stream.write_all(&(payload.params.len() as u32).to_le_bytes())?;
    stream.write_all(&payload.params)?;
    stream.write_all(&payload.data)?;
    stream.flush()
}

fn read_frame(stream: &mut TcpStream) -> std::result::Result<(u64, Payload), String> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    stream.read_exact(&mut header).map_err(|e| format!("frame header read failed: {e}"))?;
    let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != FRAME_MAGIC {
        return Err(format!("bad frame magic 0x{magic:08x} (stream desynchronized)"));
    }
    let tag = u64::from_le_bytes(header[4..12].try_into().unwrap());
    let body_len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if body_len < 4 {
        return Err(format!("frame body of {body_len} bytes is shorter than its parameter prefix"));
    }
    let mut body = vec![0u8; body_len];
    stream.read_exact(&mut body).map_err(|e| format!("frame body read failed: {e}"))?;
    let params_len = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
    if params_len > body_len - 4 {
        return Err(format!("frame declares {params_len} parameter bytes in a {body_len}-byte body"));
    }
    let params = body[4..4 + params_len].to_vec();
    let data = body[4 + params_len..].to_vec();
    Ok((tag, Payload { data, params }))
}

/// One rank's endpoint in a TCP mesh.  Construction establishes one
/// connection per peer; a background thread per connection reads frames
/// continuously so that concurrent large sends cannot deadlock on full
/// socket buffers.
pub struct TcpEndpoint {
    rank: usize,
    world: usize,
    /// Write side per peer, `None` at `rank`.
    streams: Vec<Option<TcpStream>>,
    /// Fed by the reader thread of each peer connection, `None` at `rank`.
    rxs: Vec<Option<Receiver<Frame>>>,
    readers: Vec<Option<JoinHandle<()>>>,
    ledger: ByteLedger,
    timeout: Duration,
}

const HELLO_MAGIC: u32 = u32::from_le_bytes(*b"MGHI");

impl TcpEndpoint {
    /// Binds this rank's listen address from the rendezvous and joins the
    /// mesh, waiting up to the default timeout for peers to appear.
    pub fn connect(rv: &TcpRendezvous) -> Result<TcpEndpoint> {
        if rv.rank >= rv.peers.len() {
            return Err(Error::Config(format!(
                "rank {} out of range for {} endpoints",
                rv.rank,
                rv.peers.len()
            )));
        }
        let addr = &rv.peers[rv.rank];
        let listener = TcpListener::bind(addr)
            .map_err(|e| Error::Transport(format!("cannot listen on {addr}: {e}")))?;
        TcpEndpoint::establish(rv.rank, listener, &rv.peers, COLLECTIVE_TIMEOUT)
    }

    /// Joins a mesh given an already-bound listener (useful when ports are
    /// assigned dynamically).  Each rank connects to every lower rank and
    /// accepts from every higher rank; a 8-byte handshake identifies the
    /// connecting rank.
    pub fn establish(
        rank: usize,
        listener: TcpListener,
        peers: &[String],
        window: Duration,
    ) -> Result<TcpEndpoint> {
        let world = peers.len();
        if rank >= world {
            return Err(Error::Config(format!("rank {rank} out of range for {world} endpoints")));
        }
        let deadline = Instant::now() + window;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

        // Dial every lower rank; their listeners are bound before any
        // endpoint starts dialing, so refused connections just mean the
        // peer process is still starting up.
        for (peer, addr) in peers.iter().enumerate().take(rank) {
            let stream = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(e) => {
                        if Instant::now() >= deadline {
                            return Err(Error::Transport(format!(
                                "rank {rank} could not reach rank {peer} at {addr}: {e}"
                            )));
                        }
                        std::thread::sleep(Duration::from_millis(20));
                    }
                }
            };
            let mut hello = [0u8; 8];
            hello[0..4].copy_from_slice(&HELLO_MAGIC.to_le_bytes());
            hello[4..8].copy_from_slice(&(rank as u32).to_le_bytes());
            let mut stream = stream;
            stream
                .write_all(&hello)
                .map_err(|e| Error::Transport(format!("handshake to rank {peer} failed: {e}")))?;
            stream.set_nodelay(true).ok();
            streams[peer] = Some(stream);
        }

        // Accept every higher rank.
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Transport(format!("listener setup failed: {e}")))?;
        let mut expected: usize = world - rank - 1;
        while expected > 0 {
            match listener.accept() {
                Ok((mut stream, from)) => {
                    stream
                        .set_nonblocking(false)
                        .map_err(|e| Error::Transport(format!("accepted stream setup failed: {e}")))?;
                    stream.set_read_timeout(Some(window)).ok();
                    let mut hello = [0u8; 8];
                    stream
                        .read_exact(&mut hello)
                        .map_err(|e| Error::Transport(format!("handshake from {from} failed: {e}")))?;
                    let magic = u32::from_le_bytes(hello[0..4].try_into().unwrap());
                    let peer = u32::from_le_bytes(hello[4..8].try_into().unwrap()) as usize;
                    if magic != HELLO_MAGIC {
                        return Err(Error::Transport(format!("bad handshake magic from {from}")));
                    }
                    if peer <= rank || peer >= world || streams[peer].is_some() {
                        return Err(Error::Transport(format!("unexpected handshake rank {peer} from {from}")));
                    }
                    stream.set_read_timeout(None).ok();
                    stream.set_nodelay(true).ok();
                    streams[peer] = Some(stream);
                    expected -= 1;
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::Transport(format!(
                            "rank {rank} timed out waiting for {expected} peer connection(s)"
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(Error::Transport(format!("accept failed: {e}"))),
            }
        }

        // One continuously draining reader per connection.
        let mut rxs: Vec<Option<Receiver<Frame>>> = (0..world).map(|_| None).collect();
        let mut readers: Vec<Option<JoinHandle<()>>> = (0..world).map(|_| None).collect();
        for peer in 0..world {
            let Some(stream) = streams[peer].as_ref() else { continue };
            let mut read_side = stream
                .try_clone()
                .map_err(|e| Error::Transport(format!("cannot clone stream of rank {peer}: {e}")))?;
            let (tx, rx) = mpsc::channel();
            readers[peer] = Some(std::thread::spawn(move || loop {
                match read_frame(&mut read_side) {
                    Ok(frame) => {
                        if tx.send(Ok(frame)).is_err() {
                            break;
                        }
                    }
                    Err(msg) => {
                        let _ = tx.send(Err(msg));
                        break;
                    }
                }
            }));
            rxs[peer] = Some(rx);
        }

        Ok(TcpEndpoint {
            rank,
            world,
            streams,
            rxs,
            readers,
            ledger: ByteLedger::new(world),
            timeout: COLLECTIVE_TIMEOUT,
        })
    }
}

impl Collective for TcpEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn all_to_allv(&mut self, tag: Tag, mut outgoing: Vec<Payload>) -> Result<Vec<Payload>> {
        check_world(&outgoing, self.world)?;
        let deadline = Instant::now() + self.timeout;
        let own = std::mem::take(&mut outgoing[self.rank]);
        for (j, payload) in outgoing.into_iter().enumerate() {
            if j == self.rank {
                continue;
            }
            let stream = self.streams[j].as_mut().expect("stream for every peer");
            write_frame(stream, tag.encode(), &payload)
                .map_err(|e| Error::Transport(format!("send to rank {j} failed: {e}")))?;
            self.ledger.sent[j].add(&payload);
        }
        let mut received: Vec<Payload> = (0..self.world).map(|_| Payload::default()).collect();
        received[self.rank] = own;
        for j in 0..self.world {
            if j == self.rank {
                continue;
            }
            let rx = self.rxs[j].as_ref().expect("receiver for every peer");
            let (raw, payload) = recv_with_deadline(rx, deadline, j, tag)?;
            verify_tag(tag, raw, j)?;
            self.ledger.received[j].add(&payload);
            received[j] = payload;
        }
        Ok(received)
    }

    fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    fn reset_ledger(&mut self) {
        self.ledger.reset();
    }

    fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        for stream in self.streams.iter().flatten() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        for handle in self.readers.iter_mut() {
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

/// Runs one closure per rank on its own thread over a fresh in-process
/// fabric and returns each rank's result.  Panics in workers are
/// propagated.  This is the harness both the training driver and the
/// tests build on.
pub fn run_in_process<T, F>(world_size: usize, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize, InProcEndpoint) -> Result<T> + Sync,
{
    let endpoints = inproc_fabric(world_size);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .enumerate()
            .map(|(rank, ep)| scope.spawn(move || f(rank, ep)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("worker thread panicked".into()))))
            .collect()
    })
}

/// Collects `(rank, result)` pairs into rank order, preferring the most
/// informative error: a non-transport failure on any rank (the root
/// cause) over the secondary disconnect/timeout errors it triggers on
/// its peers.
pub fn first_root_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    if results.iter().all(|r| r.is_ok()) {
        return Ok(results.into_iter().map(|r| r.unwrap()).collect());
    }
    let mut transport_err = None;
    for r in results {
        if let Err(e) = r {
            match e {
                Error::Transport(_) => {
                    if transport_err.is_none() {
                        transport_err = Some(e);
                    }
                }
                other => return Err(other),
            }
        }
    }
    Err(transport_err.expect("at least one error present"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::DenseMat;
    use crate::quant::{self, BitWidth, Rounding, StreamKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tag(epoch: u32, layer: u16) -> Tag {
        Tag::new(epoch, layer, Direction::Forward)
    }

    #[test]
    fn tag_round_trips_through_encoding() {
        for t in [
            Tag::new(0, 0, Direction::Forward),
            Tag::new(7, 2, Direction::Backward),
            Tag::new(u32::MAX, u16::MAX, Direction::Reduce),
            Tag::new(123, 45, Direction::Eval),
        ] {
            assert_eq!(Tag::decode(t.encode()).unwrap(), t);
        }
        assert!(Tag::decode(0xFF).is_err());
    }

    #[test]
    fn two_ranks_exchange_one_row_each() {
        let results = run_in_process(2, |rank, mut ep| {
            let mut out = vec![Payload::default(); 2];
            out[1 - rank] = Payload::new(vec![rank as u8; 16], Vec::new());
            let recv = ep.all_to_allv(tag(0, 0), out)?;
            assert_eq!(recv[1 - rank].data, vec![(1 - rank) as u8; 16]);
            assert!(recv[rank].is_empty());
            Ok(ep.ledger().clone())
        });
        let ledgers = first_root_error(results).unwrap();
        for (rank, ledger) in ledgers.iter().enumerate() {
            assert_eq!(ledger.sent[1 - rank].data_bytes, 16);
            assert_eq!(ledger.received[1 - rank].data_bytes, 16);
            assert_eq!(ledger.sent[rank], PairCounter::default());
        }
    }

    #[test]
    fn empty_schedules_complete_with_zero_bytes() {
        let results = run_in_process(4, |_rank, mut ep| {
            let recv = ep.all_to_allv(tag(0, 0), vec![Payload::default(); 4])?;
            assert!(recv.iter().all(Payload::is_empty));
            Ok((ep.ledger().total_sent_bytes(), ep.ledger().total_received_bytes()))
        });
        for (sent, received) in first_root_error(results).unwrap() {
            assert_eq!(sent, 0);
            assert_eq!(received, 0);
        }
    }

    #[test]
    fn random_schedules_conserve_bytes_pairwise() {
        let world = 3;
        // sizes[i][j] = (data, params) rank i sends to rank j.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sizes: Vec<Vec<(usize, usize)>> = (0..world)
            .map(|_| (0..world).map(|_| (rng.gen_range(0..2000), rng.gen_range(0..64) * 8)).collect())
            .collect();
        let sizes_ref = &sizes;
        let results = run_in_process(world, |rank, mut ep| {
            for round in 0..3u32 {
                let out: Vec<Payload> = (0..world)
                    .map(|j| {
                        let (d, p) = sizes_ref[rank][j];
                        Payload::new(vec![rank as u8; d], vec![round as u8; p])
                    })
                    .collect();
                let recv = ep.all_to_allv(tag(round, 0), out)?;
                for (j, payload) in recv.iter().enumerate() {
                    let (d, p) = sizes_ref[j][rank];
                    assert_eq!(payload.data.len(), d);
                    assert_eq!(payload.params.len(), p);
                    assert!(payload.data.iter().all(|&b| b == j as u8));
                }
            }
            Ok(ep.ledger().clone())
        });
        let ledgers = first_root_error(results).unwrap();
        for i in 0..world {
            for j in 0..world {
                if i == j {
                    continue;
                }
                // Conservation: i's sent-to-j equals j's received-from-i.
                assert_eq!(ledgers[i].sent[j], ledgers[j].received[i]);
                assert_eq!(ledgers[i].sent[j].data_bytes, 3 * sizes[i][j].0 as u64);
                assert_eq!(ledgers[i].sent[j].param_bytes, 3 * sizes[i][j].1 as u64);
                assert_eq!(ledgers[i].sent[j].messages, 3);
            }
        }
    }

    fn quantized_payload(rows: usize, f: usize, seed: u64) -> Payload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * f).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let table = DenseMat::from_vec(rows, f, data);
        let ids: Vec<u64> = (0..rows as u64).collect();
        let qb = quant::quantize_rows(&table, BitWidth::Int2, Rounding::Stochastic, StreamKey::new(1, 0, 0, false), &ids)
            .unwrap();
        Payload::new(qb.packed, quant::encode_params(&qb.params))
    }

    #[test]
    fn int2_exchange_matches_payload_model() {
        let results = run_in_process(2, |rank, mut ep| {
            let mut out = vec![Payload::default(); 2];
            out[1 - rank] = quantized_payload(1000, 256, rank as u64);
            ep.all_to_allv(tag(0, 0), out)?;
            Ok(ep.ledger().clone())
        });
        for (rank, ledger) in first_root_error(results).unwrap().into_iter().enumerate() {
            assert_eq!(ledger.sent[1 - rank].data_bytes, 64_000);
            assert_eq!(ledger.sent[1 - rank].param_bytes, 8_000);
            assert_eq!(ledger.sent[1 - rank].messages, 1);
        }
    }

    #[test]
    fn ledger_starts_and_resets_to_zero() {
        let mut eps = inproc_fabric(2);
        let ep = &mut eps[0];
        assert_eq!(ep.ledger().total_sent_bytes(), 0);
        assert_eq!(ep.ledger().total_received_bytes(), 0);
        ep.ledger.sent[1].data_bytes = 5;
        ep.reset_ledger();
        assert_eq!(ep.ledger().total_sent_bytes(), 0);
    }

    #[test]
    fn tag_mismatch_is_detected() {
        let results = run_in_process(2, |rank, mut ep| {
            let t = if rank == 0 { tag(0, 0) } else { tag(0, 1) };
            ep.all_to_allv(t, vec![Payload::default(); 2]).map(|_| ())
        });
        let err = first_root_error(results).unwrap_err();
        assert!(err.to_string().contains("tag mismatch"), "got: {err}");
    }

    #[test]
    fn timeout_when_peer_never_calls() {
        let mut eps = inproc_fabric(2);
        let mut ep0 = eps.remove(0);
        ep0.set_timeout(Duration::from_millis(50));
        let err = ep0.all_to_allv(tag(0, 0), vec![Payload::default(); 2]).unwrap_err();
        assert!(err.to_string().contains("timed out"), "got: {err}");
    }

    #[test]
    fn multiple_rounds_keep_streams_separated() {
        let world = 3;
        let results = run_in_process(world, |rank, mut ep| {
            for epoch in 0..4u32 {
                for layer in 0..2u16 {
                    let out: Vec<Payload> = (0..world)
                        .map(|j| Payload::new(vec![(rank * 10 + j) as u8; 8 + epoch as usize], Vec::new()))
                        .collect();
                    if rank == 1 && epoch == 2 {
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    let recv = ep.all_to_allv(Tag::new(epoch, layer, Direction::Forward), out)?;
                    for (j, payload) in recv.iter().enumerate() {
                        assert_eq!(payload.data, vec![(j * 10 + rank) as u8; 8 + epoch as usize]);
                    }
                }
            }
            Ok(())
        });
        first_root_error(results).unwrap();
    }

    fn local_mesh(world: usize) -> Vec<TcpEndpoint> {
        let listeners: Vec<TcpListener> = (0..world).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
        let peers: Vec<String> = listeners.iter().map(|l| l.local_addr().unwrap().to_string()).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = listeners
                .into_iter()
                .enumerate()
                .map(|(rank, listener)| {
                    let peers = peers.clone();
                    scope.spawn(move || {
                        TcpEndpoint::establish(rank, listener, &peers, Duration::from_secs(10)).unwrap()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn tcp_and_inproc_backends_deliver_identical_payloads() {
        let world = 2;
        let schedule = |rank: usize| -> Vec<Payload> {
            let mut out = vec![Payload::default(); world];
            out[1 - rank] = quantized_payload(37, 19, 7 + rank as u64);
            out
        };

        let inproc_results = run_in_process(world, |rank, mut ep| {
            let recv = ep.all_to_allv(tag(3, 1), schedule(rank))?;
            Ok((recv, ep.ledger().clone()))
        });
        let inproc = first_root_error(inproc_results).unwrap();

        let endpoints = local_mesh(world);
        let tcp: Vec<(Vec<Payload>, ByteLedger)> = std::thread::scope(|scope| {
            let handles: Vec<_> = endpoints
                .into_iter()
                .enumerate()
                .map(|(rank, mut ep)| {
                    scope.spawn(move || {
                        let recv = ep.all_to_allv(tag(3, 1), schedule(rank)).unwrap();
                        (recv, ep.ledger().clone())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });

        for rank in 0..world {
            assert_eq!(inproc[rank].0, tcp[rank].0, "payloads differ at rank {rank}");
            assert_eq!(inproc[rank].1, tcp[rank].1, "ledgers differ at rank {rank}");
        }
    }

    #[test]
    fn tcp_disconnect_is_reported() {
        let mut endpoints = local_mesh(2);
        let ep1 = endpoints.pop().unwrap();
        let mut ep0 = endpoints.pop().unwrap();
        drop(ep1);
        ep0.set_timeout(Duration::from_secs(2));
        let err = ep0.all_to_allv(tag(0, 0), vec![Payload::default(); 2]).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("disconnected") || msg.contains("read failed") || msg.contains("rank 1"),
            "got: {msg}"
        );
    }

    #[test]
    fn rendezvous_file_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hosts.txt");
        std::fs::write(&path, "# rank 0\n127.0.0.1:9000\n\n127.0.0.1:9001 # rank 1\n").unwrap();
        let rv = TcpRendezvous::from_file(&path, 1).unwrap();
        assert_eq!(rv.peers, vec!["127.0.0.1:9000".to_string(), "127.0.0.1:9001".to_string()]);
        assert_eq!(rv.rank, 1);

        assert!(TcpRendezvous::from_file(&path, 2).is_err());
        std::fs::write(&path, "localhost\n").unwrap();
        let err = TcpRendezvous::from_file(&path, 0).unwrap_err();
        assert!(err.to_string().contains("host:port"), "got: {err}");
    }
}
