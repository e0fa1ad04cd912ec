//! Analytic timing model for boundary communication, with and without
//! integer quantization.
//!
//! All volumes (`comm`, `params`, `subgraph`) are element counts, where
//! an element is one FP32 feature value before quantization; the `32`
//! and `bits` factors convert elements to wire bits.  `bw` and `th_cal`
//! are in bits per second: `10^6` elements over a `10^9` bit/s link take
//! `10^6 × 32 / 10^9 = 0.032 s`.  `latency` is the fixed per-message
//! cost in seconds, paid once per pair per round, including for empty
//! messages.

use crate::error::{Error, Result};
use crate::transport::ByteLedger;

/// Inputs to the timing model for one training round.
///
/// `comm[i][j]` is the number of feature elements worker `i` ships to
/// worker `j`; `params[i][j]` the number of FP32 side-channel values
/// (dequantization parameters) on the same pair; diagonals must be
/// zero.  `subgraph[i]` is the number of elements worker `i` touches in
/// the per-epoch label-injection preprocessing of its own partition.
#[derive(Clone, Debug)]
pub struct PerfModelInputs {
    pub p: usize,
    pub comm: Vec<Vec<f64>>,
    pub params: Vec<Vec<f64>>,
    pub subgraph: Vec<f64>,
    /// Link bandwidth in bits/s.
    pub bw: f64,
    /// Per-message latency in seconds.
    pub latency: f64,
    /// Compute throughput for quantize/dequantize work, in bits/s.
    pub th_cal: f64,
    /// Wire width of one quantized element; 2, 4, or 8 in practice, up
    /// to 32 for degenerate no-compression analysis.
    pub bits: u32,
}

impl PerfModelInputs {
    /// Uniform all-to-all pattern: every ordered pair carries the same
    /// volume and every worker the same local preprocessing load.
    pub fn uniform(
        p: usize,
        comm_per_pair: f64,
        params_per_pair: f64,
        subgraph_per_worker: f64,
        bw: f64,
        latency: f64,
        th_cal: f64,
        bits: u32,
    ) -> PerfModelInputs {
        let mut comm = vec![vec![comm_per_pair; p]; p];
        let mut params = vec![vec![params_per_pair; p]; p];
        for i in 0..p {
            comm[i][i] = 0.0;
            params[i][i] = 0.0;
        }
        PerfModelInputs {
            p,
            comm,
            params,
            subgraph: vec![subgraph_per_worker; p],
            bw,
            latency,
            th_cal,
            bits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidInput("worker count must be at least 1".into()));
        }
        if !(self.bw > 0.0 && self.bw.is_finite()) {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {}", self.bw)));
        }
        if !(self.th_cal > 0.0) {
            return Err(Error::InvalidInput(format!("compute throughput must be positive, got {}", self.th_cal)));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(Error::InvalidInput(format!("latency must be non-negative, got {}", self.latency)));
        }
        if !(1..=32).contains(&self.bits) {
            return Err(Error::InvalidInput(format!("wire bit width {} must lie in 1..=32", self.bits)));
        }
        let square = |name: &str, m: &Vec<Vec<f64>>| -> Result<()> {
            if m.len() != self.p || m.iter().any(|row| row.len() != self.p) {
                return Err(Error::Shape(format!("{name} matrix must be {p}x{p}", p = self.p)));
            }
            for (i, row) in m.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(Error::InvalidInput(format!("{name}[{i}][{j}] = {v} must be non-negative")));
                    }
                    if i == j && v != 0.0 {
                        return Err(Error::InvalidInput(format!("{name}[{i}][{i}] must be zero (no self-traffic)")));
                    }
                }
            }
            Ok(())
        };
        square("comm", &self.comm)?;
        square("params", &self.params)?;
        if self.subgraph.len() != self.p {
            return Err(Error::Shape(format!("subgraph vector must have {} entries", self.p)));
        }
        if self.subgraph.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("subgraph loads must be non-negative".into()));
        }
        Ok(())
    }

    fn total_comm(&self) -> f64 {
        self.comm.iter().flatten().sum()
    }

    fn total_params(&self) -> f64 {
        self.params.iter().flatten().sum()
    }

    /// Mean per-ordered-pair element volume over the off-diagonal slots.
    fn mean_pair_comm(&self) -> f64 {
        if self.p < 2 {
            return 0.0;
        }
        self.total_comm() / (self.p * (self.p - 1)) as f64
    }
}

/// Plain full-precision exchange time: the busiest worker's sum over all
/// peers of transfer plus latency.  The sum runs over every peer slot,
/// itself included, so an all-zero volume matrix still costs `P·L` —
/// each round of the collective pays latency on every slot regardless of
/// payload.
pub fn t_comm(inputs: &PerfModelInputs) -> Result<f64> {
    inputs.validate()?;
    let mut worst = 0.0f64;
    for i in 0..inputs.p {
        let mut row = 0.0;
        for j in 0..inputs.p {
            row += inputs.comm[i][j] * 32.0 / inputs.bw + inputs.latency;
        }
        worst = worst.max(row);
    }
    Ok(worst)
}

/// Component breakdown of the quantized exchange time for the critical
/// (slowest) worker; `total` is the sum of the four parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantTimeBreakdown {
    /// Label-injection preprocessing of the local partition.
    pub pre_quant: f64,
    /// Quantization of all outgoing rows.
    pub quant: f64,
    /// Wire transfer of packed data plus FP32 parameters, plus latency.
    pub wire: f64,
    /// Dequantization of all incoming rows.
    pub dequant: f64,
    pub total: f64,
}

/// Quantized exchange time.
///
/// Per worker `i`: preprocessing `subgraph[i]·32/th_cal`, then for every
/// peer `j` a quantize term `comm[i][j]·(32+bits)/th_cal` (read FP32,
/// write intX), a wire term `(comm[i][j]·bits + params[i][j]·32)/bw + L`,
/// and a symmetric dequantize term.  The reported time is the maximum
/// over workers; `omit_prequant` drops the preprocessing term, matching
/// the closed-form speedup's assumption that it is negligible.
pub fn t_quant_comm(inputs: &PerfModelInputs, omit_prequant: bool) -> Result<QuantTimeBreakdown> {
    inputs.validate()?;
    let mut best: Option<QuantTimeBreakdown> = None;
    for i in 0..inputs.p {
        let pre_quant = if omit_prequant { 0.0 } else { inputs.subgraph[i] * 32.0 / inputs.th_cal };
        let mut quant = 0.0;
        let mut wire = 0.0;
        let mut dequant = 0.0;
        for j in 0..inputs.p {
            quant += inputs.comm[i][j] * (32.0 + inputs.bits as f64) / inputs.th_cal;
            wire += (inputs.comm[i][j] * inputs.bits as f64 + inputs.params[i][j] * 32.0) / inputs.bw
                + inputs.latency;
            dequant += inputs.comm[i][j] * (32.0 + inputs.bits as f64) / inputs.th_cal;
        }
        let total = pre_quant + quant + wire + dequant;
        if best.as_ref().is_none_or(|b| total > b.total) {
            best = Some(QuantTimeBreakdown { pre_quant, quant, wire, dequant, total });
        }
    }
    Ok(best.expect("validated inputs have p >= 1"))
}

/// The four dimensionless ratios the closed-form speedup is written in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedupRatios {
    /// Data-to-parameter volume ratio, `Σcomm / Σparams`.
    pub alpha: f64,
    /// Compute-to-wire throughput ratio, `th_cal / bw`.
    pub beta: f64,
    /// Compression ratio, `32 / bits`.
    pub gamma: f64,
    /// Latency share: latency over the quantized transfer time of the
    /// mean pair, `L / (comm·bits/bw)`.
    pub delta: f64,
}

impl SpeedupRatios {
    pub fn from_inputs(inputs: &PerfModelInputs) -> Result<SpeedupRatios> {
        inputs.validate()?;
        let total_params = inputs.total_params();
        if total_params <= 0.0 {
            return Err(Error::InvalidInput(
                "parameter volume must be positive to form the data/parameter ratio".into(),
            ));
        }
        let mean_comm = inputs.mean_pair_comm();
        if mean_comm <= 0.0 {
            return Err(Error::InvalidInput("communication volume must be positive to form ratios".into()));
        }
        Ok(SpeedupRatios {
            alpha: inputs.total_comm() / total_params,
            beta: inputs.th_cal / inputs.bw,
            gamma: 32.0 / inputs.bits as f64,
            delta: inputs.latency / (mean_comm * inputs.bits as f64 / inputs.bw),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeedupMode {
    /// Full rational expression `αβ(γ+δ) / ((1+δ)αβ + 2α(1+γ) + βγ)`.
    Exact,
    /// Large-α,β limit `(γ+δ)/(1+δ)`.
    Approx,
}

/// Predicted plain-over-quantized exchange-time ratio.
pub fn speedup(r: &SpeedupRatios, mode: SpeedupMode) -> f64 {
    let (a, b, g, d) = (r.alpha, r.beta, r.gamma, r.delta);
    match mode {
        SpeedupMode::Exact => a * b * (g + d) / ((1.0 + d) * a * b + 2.0 * a * (1.0 + g) + b * g),
        SpeedupMode::Approx => (g + d) / (1.0 + d),
    }
}

pub fn speedup_from_inputs(inputs: &PerfModelInputs, mode: SpeedupMode) -> Result<f64> {
    Ok(speedup(&SpeedupRatios::from_inputs(inputs)?, mode))
}

/// Strong-scaling latency crossover.  The smallest worker counts at
/// which a fixed total volume, spread as `total/P²` per ordered pair,
/// becomes latency-bound (`latency ≥ transfer`), for the plain 32-bit
/// and the quantized wire.  Compressing the payload reaches the
/// latency-bound regime at a smaller `P`, and `time_saved` is the
/// corresponding `(P_plain − P_quant)·latency`.  Only the data term is
/// modeled; the FP32 parameter side channel shrinks as `1/P²` like the
/// data and never flips the comparison's direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossoverReport {
    pub plain_p: Option<usize>,
    pub quant_p: Option<usize>,
}

impl CrossoverReport {
    /// Absolute time reduction implied by reaching the latency-bound
    /// regime earlier; zero unless both crossovers exist.
    pub fn time_saved(&self, latency: f64) -> f64 {
        match (self.plain_p, self.quant_p) {
            (Some(p), Some(q)) => (p.saturating_sub(q)) as f64 * latency,
            _ => 0.0,
        }
    }
}

pub fn crossover(
    total_comm: f64,
    bits: u32,
    bw: f64,
    latency: f64,
    p_min: usize,
    p_max: usize,
) -> Result<CrossoverReport> {
    if p_min < 1 || p_min > p_max {
        return Err(Error::InvalidInput(format!("sweep bounds {p_min}..={p_max} are invalid")));
    }
    if !(bw > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bw}")));
    }
    if !(1..=32).contains(&bits) {
        return Err(Error::InvalidInput(format!("wire bit width {bits} must lie in 1..=32")));
    }
    if !(total_comm >= 0.0 && latency >= 0.0) {
        return Err(Error::InvalidInput("volumes and latency must be non-negative".into()));
    }
    if latency == 0.0 {
        // Transfer never drops below a zero latency floor.
        return Ok(CrossoverReport { plain_p: None, quant_p: None });
    }
    let first_bound = |wire_bits: f64| -> Option<usize> {
        (p_min..=p_max).find(|&p| {
            let per_pair = total_comm / (p * p) as f64;
            latency >= per_pair * wire_bits / bw
        })
    };
    Ok(CrossoverReport { plain_p: first_bound(32.0), quant_p: first_bound(bits as f64) })
}

/// Fills the volume matrices from measured per-worker transport ledgers:
/// packed data bytes become quantized elements (`bytes·8/bits`), and
/// parameter bytes become FP32 values (`bytes/4`).
pub fn inputs_from_ledgers(
    ledgers: &[ByteLedger],
    bits: u32,
    subgraph: Vec<f64>,
    bw: f64,
    latency: f64,
    th_cal: f64,
) -> Result<PerfModelInputs> {
    let p = ledgers.len();
    if ledgers.iter().any(|l| l.sent.len() != p) {
        return Err(Error::Shape(format!("each ledger must cover all {p} peers")));
    }
    if bits == 0 {
        return Err(Error::InvalidInput("wire bit width must be positive".into()));
    }
    let mut comm = vec![vec![0.0; p]; p];
    let mut params = vec![vec![0.0; p]; p];
    for (i, ledger) in ledgers.iter().enumerate() {
        for j in 0..p {
            if i == j {
                continue;
            }
            comm[i][j] = ledger.sent[j].data_bytes as f64 * 8.0 / bits as f64;
            params[i][j] = ledger.sent[j].param_bytes as f64 / 4.0;
        }
    }
    let inputs = PerfModelInputs { p, comm, params, subgraph, bw, latency, th_cal, bits };
    inputs.validate()?;
    Ok(inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratios(alpha: f64, beta: f64, gamma: f64, delta: f64) -> SpeedupRatios {
        SpeedupRatios { alpha, beta, gamma, delta }
    }

    #[test]
    fn plain_transfer_time_for_one_megarow_pair() {
        // One million elements over a 10^9 bit/s link: 32 ms.
        let inputs = PerfModelInputs::uniform(2, 1e6, 0.0, 0.0, 1e9, 0.0, 1e9, 2);
        let t = t_comm(&inputs).unwrap();
        assert_eq!(t, 0.032);
    }

    #[test]
    fn zero_volume_costs_one_latency_per_peer_slot() {
        for p in [1usize, 2, 5] {
            let inputs = PerfModelInputs::uniform(p, 0.0, 0.0, 0.0, 1e9, 0.25, 1e9, 4);
            assert_eq!(t_comm(&inputs).unwrap(), p as f64 * 0.25, "p = {p}");
        }
    }

    #[test]
    fn latency_dominates_when_volume_vanishes() {
        let t_small = t_comm(&PerfModelInputs::uniform(2, 1e-6, 0.0, 0.0, 1e9, 0.5, 1e9, 4)).unwrap();
        assert!((t_small - 1.0).abs() < 1e-9, "P·L with negligible transfer, got {t_small}");
    }

    #[test]
    fn quantized_breakdown_matches_hand_evaluation() {
        // P=3 symmetric, X=2: every worker sends 1000 elements + 20
        // params to each of 2 peers, 500 local elements preprocessed.
        // pre  = 500·32/10^8                  = 1.6e-4
        // quant = dequant = 3·1000·34/10^8    = 1.02e-3 (self slot is 0)
        // wire = 3·latency + 2·(1000·2 + 20·32)/10^6 = 3e-3 + 5.28e-3
        let inputs = PerfModelInputs::uniform(3, 1000.0, 20.0, 500.0, 1e6, 1e-3, 1e8, 2);
        let b = t_quant_comm(&inputs, false).unwrap();
        assert!((b.pre_quant - 1.6e-4).abs() < 1e-12);
        assert!((b.quant - 2.0 * 1000.0 * 34.0 / 1e8).abs() < 1e-12);
        assert!((b.dequant - b.quant).abs() < 1e-15);
        let wire_expect = 3.0 * 1e-3 + 2.0 * (1000.0 * 2.0 + 20.0 * 32.0) / 1e6;
        assert!((b.wire - wire_expect).abs() < 1e-12, "wire {} vs {}", b.wire, wire_expect);
        assert!((b.total - (b.pre_quant + b.quant + b.wire + b.dequant)).abs() < 1e-15);

        let omitted = t_quant_comm(&inputs, true).unwrap();
        assert_eq!(omitted.pre_quant, 0.0);
        assert!((omitted.total - (b.total - b.pre_quant)).abs() < 1e-15);
    }

    #[test]
    fn infinite_compute_leaves_only_the_wire_term() {
        let mut inputs = PerfModelInputs::uniform(4, 1e5, 100.0, 1e4, 1e8, 1e-4, 1e30, 4);
        let b = t_quant_comm(&inputs, false).unwrap();
        assert!(b.pre_quant < 1e-20 && b.quant < 1e-20 && b.dequant < 1e-20);
        let wire_expect = 4.0 * 1e-4 + 3.0 * (1e5 * 4.0 + 100.0 * 32.0) / 1e8;
        assert!((b.wire - wire_expect).abs() < 1e-12);
        assert!((b.total - b.wire).abs() < 1e-18);
        // Degenerate 32-bit "quantization" with no params: the wire term
        // is exactly the plain time.
        inputs.bits = 32;
        inputs.params.iter_mut().flatten().for_each(|v| *v = 0.0);
        let b32 = t_quant_comm(&inputs, false).unwrap();
        assert!((b32.wire - t_comm(&inputs).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_width_adds_only_overheads() {
        // X=32, params=0: quantized total = plain time + codec overheads.
        let mut inputs = PerfModelInputs::uniform(2, 1e6, 1.0, 0.0, 1e9, 1e-3, 1e9, 32);
        inputs.params.iter_mut().flatten().for_each(|v| *v = 0.0);
        let plain = t_comm(&inputs).unwrap();
        let b = t_quant_comm(&inputs, false).unwrap();
        assert!((b.wire - plain).abs() < 1e-12);
        assert!((b.total - (plain + b.quant + b.dequant)).abs() < 1e-12);
    }

    #[test]
    fn approx_speedup_hits_sixteen_for_int2_without_latency() {
        assert_eq!(speedup(&ratios(100.0, 100.0, 16.0, 0.0), SpeedupMode::Approx), 16.0);
    }

    #[test]
    fn approx_speedup_collapses_to_one_at_huge_latency_share() {
        let s = speedup(&ratios(100.0, 100.0, 16.0, 1e9), SpeedupMode::Approx);
        assert!((s - 1.0).abs() < 1e-6, "got {s}");
    }

    #[test]
    fn exact_speedup_at_moderate_volume_ratios() {
        // αβ(γ+δ) / ((1+δ)αβ + 2α(1+γ) + βγ)
        //   = 10^4·16 / (10^4 + 200·17 + 1600) = 160000/15000.
        let s = speedup(&ratios(100.0, 100.0, 16.0, 0.0), SpeedupMode::Exact);
        assert!((s - 160000.0 / 15000.0).abs() < 1e-12, "got {s}");
    }

    #[test]
    fn exact_approaches_approx_for_large_volume_ratios() {
        for gamma in [4.0, 8.0, 16.0] {
            for delta in [0.0, 0.5, 3.0] {
                let e = speedup(&ratios(1e6, 1e6, gamma, delta), SpeedupMode::Exact);
                let a = speedup(&ratios(1e6, 1e6, gamma, delta), SpeedupMode::Approx);
                assert!((e - a).abs() / a < 0.01, "γ={gamma} δ={delta}: exact {e} vs approx {a}");
            }
        }
    }

    #[test]
    fn speedup_decreases_with_latency_share_at_moderate_ratios() {
        for mode in [SpeedupMode::Exact, SpeedupMode::Approx] {
            let mut prev = f64::INFINITY;
            for k in 0..100 {
                let delta = 0.1 * k as f64;
                let s = speedup(&ratios(100.0, 100.0, 16.0, delta), mode);
                assert!(s < prev, "mode {mode:?}: not decreasing at δ={delta}");
                prev = s;
            }
        }
    }

    #[test]
    fn no_compression_and_no_overheads_means_no_speedup() {
        for delta in [0.0, 1.0, 10.0] {
            let s = speedup(&ratios(1e9, 1e9, 1.0, delta), SpeedupMode::Exact);
            assert!((s - 1.0).abs() < 1e-6, "δ={delta}: got {s}");
        }
    }

    #[test]
    fn ratios_derive_from_inputs() {
        let inputs = PerfModelInputs::uniform(2, 1000.0, 10.0, 0.0, 1e6, 2e-3, 1e8, 2);
        let r = SpeedupRatios::from_inputs(&inputs).unwrap();
        assert_eq!(r.alpha, 100.0);
        assert_eq!(r.beta, 100.0);
        assert_eq!(r.gamma, 16.0);
        // δ = L / (comm·bits/bw) = 2e-3 / (1000·2/1e6) = 1.0.
        assert_eq!(r.delta, 1.0);
    }

    #[test]
    fn crossover_happens_earlier_with_compression() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let total: f64 = rng.gen_range(1e3..1e9);
            let bw: f64 = rng.gen_range(1e6..1e10);
            let latency: f64 = rng.gen_range(1e-6..1e-2);
            let bits = [2u32, 4, 8][rng.gen_range(0..3)];
            let report = crossover(total, bits, bw, latency, 1, 4096).unwrap();
            if let (Some(p), Some(q)) = (report.plain_p, report.quant_p) {
                assert!(q <= p, "quantized crossover {q} after plain {p}");
                assert!((report.time_saved(latency) - (p - q) as f64 * latency).abs() < 1e-15);
            } else {
                // If the plain wire never becomes latency-bound in the
                // sweep, the cheaper quantized wire may still; never the
                // reverse.
                assert!(report.plain_p.is_none());
            }
        }
    }

    #[test]
    fn crossover_edge_cases() {
        // Zero latency: transfer always dominates.
        let r = crossover(1e9, 2, 1e9, 0.0, 1, 1024).unwrap();
        assert_eq!(r, CrossoverReport { plain_p: None, quant_p: None });
        assert_eq!(r.time_saved(0.0), 0.0);
        // γ=1 (32-bit wire): identical crossovers.
        let r = crossover(1e9, 32, 1e9, 1e-4, 1, 4096).unwrap();
        assert_eq!(r.plain_p, r.quant_p);
        assert!(r.plain_p.is_some());
        assert_eq!(r.time_saved(1e-4), 0.0);
        // Invalid sweep bounds.
        assert!(crossover(1e6, 2, 1e9, 1e-4, 5, 4).is_err());
        assert!(crossover(1e6, 2, 1e9, 1e-4, 0, 4).is_err());
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let good = PerfModelInputs::uniform(2, 10.0, 1.0, 0.0, 1e9, 0.0, 1e9, 2);
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.bw = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.th_cal = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.bits = 33;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.comm[0][0] = 5.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.comm[0][1] = -2.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.subgraph.pop();
        assert!(bad.validate().is_err());
        assert!(t_comm(&bad).is_err());
    }

    #[test]
    fn ledger_conversion_recovers_element_counts() {
        let mut ledgers = vec![ByteLedger::new(2), ByteLedger::new(2)];
        // 1000 Int2 elements = 250 data bytes; 10 param pairs = 80 bytes
        // = 20 FP32 values.
        ledgers[0].sent[1].data_bytes = 250;
        ledgers[0].sent[1].param_bytes = 80;
        ledgers[1].sent[0].data_bytes = 500;
        ledgers[1].sent[0].param_bytes = 40;
        let inputs = inputs_from_ledgers(&ledgers, 2, vec![0.0, 0.0], 1e9, 1e-4, 1e9).unwrap();
        assert_eq!(inputs.comm[0][1], 1000.0);
        assert_eq!(inputs.params[0][1], 20.0);
        assert_eq!(inputs.comm[1][0], 2000.0);
        assert_eq!(inputs.params[1][0], 10.0);
        assert_eq!(inputs.comm[0][0], 0.0);
    }
}
