//! Covert-channel senders and receivers over the simulated frontend.
//!
//! Every channel follows the same three-step shape per transmitted bit:
//! an init step places the receiver's micro-ops on a fast path, an encode
//! step perturbs (m=1) or preserves (m=0) that placement, and a decode step
//! measures. The variants differ in the perturbation:
//!
//! * eviction: the sender's blocks overflow the target DSB set's ways,
//! * misalignment: the sender's half-window-offset blocks poison the set's
//!   access composition and flush the loop buffer without filling ways,
//! * slow-switch: the ordering of LCP-prefixed instructions modulates
//!   pre-decode stalls and path-switch penalties.
//!
//! Two-thread (`Mt*`) variants interleave sender and receiver accesses
//! block by block and time only the receiver's decode accesses; the
//! single-thread variants wrap one timer around all three steps and rely
//! on the sender's internal interference. Enclave mode adds a fixed
//! entry/exit overhead per bit and raises the iteration counts.

use rand_chacha::ChaCha8Rng;

use crate::cost::{cost_of, CostModel, RAPL_UPDATE_INTERVAL_S};
use crate::error::{Error, Result};
use crate::frontend::{
    Counters, DeliveryPath, DsbGeometry, Frontend, FrontendConfig, MixBlock,
};

/// Message patterns used by the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessagePattern {
    All0,
    All1,
    Alternating,
    Random,
}

impl MessagePattern {
    pub fn label(&self) -> &'static str {
        match self {
            MessagePattern::All0 => "all0",
            MessagePattern::All1 => "all1",
            MessagePattern::Alternating => "alternating",
            MessagePattern::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all0" => Ok(MessagePattern::All0),
            "all1" => Ok(MessagePattern::All1),
            "alternating" => Ok(MessagePattern::Alternating),
            "random" => Ok(MessagePattern::Random),
            other => Err(Error::invalid(format!("unknown message pattern '{other}'"))),
        }
    }
}

/// An ordered bit sequence plus the pattern it was generated from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMessage {
    bits: Vec<u8>,
    pattern: MessagePattern,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>, pattern: MessagePattern) -> Self {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        BitMessage { bits, pattern }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn pattern(&self) -> MessagePattern {
        self.pattern
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Channel families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelVariant {
    MtEvict,
    MtMisalign,
    NonMtEvict,
    NonMtMisalign,
    SlowSwitch,
}

impl ChannelVariant {
    pub fn is_mt(&self) -> bool {
        matches!(self, ChannelVariant::MtEvict | ChannelVariant::MtMisalign)
    }

    pub fn is_misalign(&self) -> bool {
        matches!(self, ChannelVariant::MtMisalign | ChannelVariant::NonMtMisalign)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mt_evict" => Ok(ChannelVariant::MtEvict),
            "mt_misalign" => Ok(ChannelVariant::MtMisalign),
            "nonmt_evict" => Ok(ChannelVariant::NonMtEvict),
            "nonmt_misalign" => Ok(ChannelVariant::NonMtMisalign),
            "slow_switch" => Ok(ChannelVariant::SlowSwitch),
            other => Err(Error::invalid(format!("unknown channel variant '{other}'"))),
        }
    }

    pub fn base_label(&self) -> &'static str {
        match self {
            ChannelVariant::MtEvict => "mt_evict",
            ChannelVariant::MtMisalign => "mt_misalign",
            ChannelVariant::NonMtEvict => "nonmt_evict",
            ChannelVariant::NonMtMisalign => "nonmt_misalign",
            ChannelVariant::SlowSwitch => "slow_switch",
        }
    }
}

/// Sender footprint of the single-thread variants when transmitting a 0:
/// the stealthy form mirrors the m=1 access count on innocuous addresses,
/// the fast form does nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stealth {
    Stealthy,
    Fast,
}

impl Stealth {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stealthy" => Ok(Stealth::Stealthy),
            "fast" => Ok(Stealth::Fast),
            other => Err(Error::invalid(format!("unknown stealth mode '{other}'"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Stealth::Stealthy => "stealthy",
            Stealth::Fast => "fast",
        }
    }
}

/// What the receiver measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observable {
    Cycles,
    Energy,
}

impl Observable {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cycles" => Ok(Observable::Cycles),
            "energy" => Ok(Observable::Energy),
            other => Err(Error::invalid(format!("unknown observable '{other}'"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Observable::Cycles => "cycles",
            Observable::Energy => "energy",
        }
    }
}

/// Enclave mode: one entry/exit per bit plus raised iteration counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnclaveParams {
    pub entry_exit_cycles: u64,
    pub p: u32,
    pub q: u32,
}

impl Default for EnclaveParams {
    fn default() -> Self {
        EnclaveParams {
            entry_exit_cycles: 3000,
            p: 1000,
            q: 1000,
        }
    }
}

/// Channel configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub variant: ChannelVariant,
    /// Only meaningful for the single-thread eviction/misalignment
    /// variants.
    pub stealth: Stealth,
    /// DSB ways accessed by the receiver.
    pub d: usize,
    /// Total ways accessed by sender plus receiver (misalignment variants).
    pub m_total: usize,
    /// Receiver iterations (init and decode).
    pub p: u32,
    /// Sender iterations (encode).
    pub q: u32,
    /// LCP instruction count (slow-switch only).
    pub r: u32,
    /// Target DSB set x.
    pub target_set: usize,
    /// Alternate set y for the stealthy eviction 0-encode; defaults to
    /// (x + 1) mod sets.
    pub alternate_set: Option<usize>,
    /// Where between mean0 and mean1 the decision threshold sits.
    pub threshold_alpha: f64,
    pub enclave: Option<EnclaveParams>,
    pub observable: Observable,
    /// Update interval of the rate-limited energy counter.
    pub rapl_interval_s: f64,
}

impl ChannelParams {
    /// Paper-shaped defaults per variant: d=6 for eviction, d=5/M=8 for
    /// misalignment, r=16 for slow-switch; p=q=10 for single-thread
    /// variants, p=1000/q=100 for two-thread ones.
    pub fn defaults_for(variant: ChannelVariant) -> Self {
        let (d, m_total) = if variant.is_misalign() { (5, 8) } else { (6, 8) };
        let (p, q) = if variant.is_mt() { (1000, 100) } else { (10, 10) };
        ChannelParams {
            variant,
            stealth: Stealth::Stealthy,
            d,
            m_total,
            p,
            q,
            r: 16,
            target_set: 3,
            alternate_set: None,
            threshold_alpha: 0.5,
            enclave: None,
            observable: Observable::Cycles,
            rapl_interval_s: RAPL_UPDATE_INTERVAL_S,
        }
    }

    /// Variant label including the stealth mode where it applies.
    pub fn label(&self) -> String {
        match self.variant {
            ChannelVariant::NonMtEvict | ChannelVariant::NonMtMisalign => {
                format!("{}_{}", self.variant.base_label(), self.stealth.label())
            }
            _ => self.variant.base_label().to_string(),
        }
    }

    /// Effective iteration counts (enclave mode overrides p and q).
    pub fn effective_pq(&self) -> (u32, u32) {
        match &self.enclave {
            Some(e) => (e.p, e.q),
            None => (self.p, self.q),
        }
    }

    pub fn validate(&self, geo: &DsbGeometry) -> Result<()> {
        let ways = geo.ways;
        if self.target_set >= geo.sets {
            return Err(Error::invalid(format!(
                "target set {} out of range (sets = {})",
                self.target_set, geo.sets
            )));
        }
        if let Some(y) = self.alternate_set {
            if y >= geo.sets {
                return Err(Error::invalid("alternate set out of range"));
            }
            if y == self.target_set {
                return Err(Error::invalid("alternate set must differ from target set"));
            }
        }
        if !(self.threshold_alpha > 0.0 && self.threshold_alpha < 1.0) {
            return Err(Error::invalid("threshold alpha must lie strictly in (0,1)"));
        }
        let (p, q) = self.effective_pq();
        if p == 0 || q == 0 {
            return Err(Error::invalid("iteration counts must be >= 1"));
        }
        if self.rapl_interval_s <= 0.0 {
            return Err(Error::invalid("RAPL interval must be positive"));
        }
        match self.variant {
            ChannelVariant::SlowSwitch => {
                if self.r == 0 {
                    return Err(Error::invalid("slow-switch needs r >= 1"));
                }
                if p != q {
                    return Err(Error::invalid("single-thread variants require p = q"));
                }
            }
            ChannelVariant::MtEvict | ChannelVariant::NonMtEvict => {
                if self.d == 0 || self.d > ways {
                    return Err(Error::invalid(format!(
                        "eviction variants need 1 <= d <= {ways} (d < N+1)"
                    )));
                }
                self.validate_pq(p, q)?;
            }
            ChannelVariant::MtMisalign | ChannelVariant::NonMtMisalign => {
                if self.m_total > ways {
                    return Err(Error::invalid(format!(
                        "misalignment variants need M <= {ways}"
                    )));
                }
                if self.d == 0 || self.d >= self.m_total {
                    return Err(Error::invalid("misalignment variants need 1 <= d < M"));
                }
                self.validate_pq(p, q)?;
            }
        }
        Ok(())
    }

    fn validate_pq(&self, p: u32, q: u32) -> Result<()> {
        if self.variant.is_mt() {
            if p % q != 0 {
                return Err(Error::invalid("two-thread variants require q | p"));
            }
        } else if p != q {
            return Err(Error::invalid("single-thread variants require p = q"));
        }
        Ok(())
    }
}

/// Build a chain of `count` canonical blocks that all map to `set_index`,
/// strided one full DSB round apart so consecutive blocks occupy distinct
/// instruction-cache lines, chained by their jump targets and closed into
/// a loop. `misaligned(k)` offsets block k by half a window.
pub fn build_block_chain(
    geo: &DsbGeometry,
    count: usize,
    set_index: usize,
    misaligned: impl Fn(usize) -> bool,
) -> Result<Vec<MixBlock>> {
    build_block_chain_at(geo, set_index, 0, count, misaligned)
}

/// As [`build_block_chain`], but numbering blocks from `first_ordinal` so
/// separate chains (receiver blocks 0..d, sender blocks d..) occupy
/// disjoint addresses while mapping to the same set.
pub fn build_block_chain_at(
    geo: &DsbGeometry,
    set_index: usize,
    first_ordinal: usize,
    count: usize,
    misaligned: impl Fn(usize) -> bool,
) -> Result<Vec<MixBlock>> {
    if set_index >= geo.sets {
        return Err(Error::invalid(format!(
            "set index {set_index} out of range (sets = {})",
            geo.sets
        )));
    }
    if count == 0 {
        return Err(Error::invalid("chain needs at least one block"));
    }
    let stride = geo.sets as u64 * u64::from(geo.window_bytes);
    let addr_of = |k: usize| {
        let ordinal = (first_ordinal + k) as u64;
        let mut addr = ordinal * stride + set_index as u64 * u64::from(geo.window_bytes);
        if misaligned(k) {
            addr += u64::from(geo.window_bytes / 2);
        }
        addr
    };
    let mut blocks: Vec<MixBlock> = (0..count).map(|k| MixBlock::canonical(addr_of(k), 0)).collect();
    for k in 0..count {
        blocks[k].next_addr = blocks[(k + 1) % count].start_addr;
    }
    Ok(blocks)
}

/// Which side of the threshold decodes to a 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    AboveIsOne,
    BelowIsOne,
}

/// Calibrated decision threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub cut: f64,
    pub polarity: Polarity,
    pub mean0: f64,
    pub mean1: f64,
}

impl Threshold {
    pub fn classify(&self, observation: f64) -> u8 {
        match self.polarity {
            Polarity::AboveIsOne => u8::from(observation > self.cut),
            Polarity::BelowIsOne => u8::from(observation < self.cut),
        }
    }

    /// Absolute separation between the calibration means.
    pub fn gap(&self) -> f64 {
        (self.mean1 - self.mean0).abs()
    }
}

/// Result of transmitting one bit.
#[derive(Debug, Clone, Copy)]
pub struct BitOutcome {
    pub observation: f64,
    /// Receiver decode accesses that went through the legacy decoder.
    pub receiver_mite_blocks: u64,
}

/// Outcome of a whole transmission.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub received: BitMessage,
    pub elapsed_s: f64,
    pub observations: Vec<f64>,
}

/// Number of throwaway alternating bits run before calibration so
/// structures reach their periodic steady state.
const WARMUP_BITS: usize = 6;
/// Alternating bits measured during calibration.
const CALIBRATION_BITS: usize = 16;

/// A live channel: frontend state, chains, cost accounting and (after
/// [`Channel::calibrate`]) the decision threshold.
pub struct Channel {
    params: ChannelParams,
    model: CostModel,
    fe: Frontend,
    rng: ChaCha8Rng,
    receiver_chain: Vec<MixBlock>,
    /// Encode chain for m=1.
    sender_chain_one: Vec<MixBlock>,
    /// Encode chain for m=0 (stealthy single-thread variants only).
    sender_chain_zero: Vec<MixBlock>,
    prev_path: Option<DeliveryPath>,
    total_cycles: u64,
    total_energy: f64,
    /// Energy value visible at the last crossed counter-update boundary.
    rapl_visible: f64,
    rapl_index: u64,
    threshold: Option<Threshold>,
}

impl Channel {
    pub fn new(
        params: ChannelParams,
        fe_config: &FrontendConfig,
        model: &CostModel,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        model.validate()?;
        params.validate(&fe_config.dsb)?;
        let geo = &fe_config.dsb;
        let x = params.target_set;
        let ways = geo.ways;

        let (receiver_chain, sender_chain_one, sender_chain_zero) = match params.variant {
            ChannelVariant::MtEvict | ChannelVariant::NonMtEvict => {
                let receiver = build_block_chain_at(geo, x, 0, params.d, |_| false)?;
                let senders = ways + 1 - params.d;
                let one = build_block_chain_at(geo, x, params.d, senders, |_| false)?;
                let y = params.alternate_set.unwrap_or((x + 1) % geo.sets);
                let zero = build_block_chain_at(geo, y, params.d, senders, |_| false)?;
                (receiver, one, zero)
            }
            ChannelVariant::MtMisalign | ChannelVariant::NonMtMisalign => {
                let receiver = build_block_chain_at(geo, x, 0, params.d, |_| false)?;
                let senders = params.m_total - params.d;
                let one = build_block_chain_at(geo, x, params.d, senders, |_| true)?;
                let zero = build_block_chain_at(geo, x, params.d, senders, |_| false)?;
                (receiver, one, zero)
            }
            ChannelVariant::SlowSwitch => {
                // Two alternative encode loop bodies at dedicated
                // addresses: same instruction multiset, different order.
                let base = 1 << 20;
                let mixed = MixBlock::lcp_interleaved(base, params.r, base);
                let grouped = MixBlock::lcp_grouped(base + 4096, params.r, base + 4096);
                (Vec::new(), vec![mixed], vec![grouped])
            }
        };

        Ok(Channel {
            fe: Frontend::new(*fe_config)?,
            model: *model,
            params,
            rng,
            receiver_chain,
            sender_chain_one,
            sender_chain_zero,
            prev_path: None,
            total_cycles: 0,
            total_energy: 0.0,
            rapl_visible: 0.0,
            rapl_index: 0,
            threshold: None,
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn counters(&self) -> Counters {
        self.fe.counters()
    }

    pub fn threshold(&self) -> Option<&Threshold> {
        self.threshold.as_ref()
    }

    pub fn receiver_chain(&self) -> &[MixBlock] {
        &self.receiver_chain
    }

    pub fn sender_chain(&self, m: u8) -> &[MixBlock] {
        if m == 1 {
            &self.sender_chain_one
        } else {
            &self.sender_chain_zero
        }
    }

    /// Total simulated seconds elapsed so far.
    pub fn elapsed_s(&self) -> f64 {
        self.total_cycles as f64 / self.model.core_freq_hz
    }

    fn step(&mut self, thread: usize, block: &MixBlock, timed: bool, stats: &mut StepStats) {
        let record = self.fe.access(thread, block);
        let cycles = cost_of(&record, self.prev_path, &self.model, &mut self.rng);
        self.prev_path = Some(record.path);

        // Advance simulated time and the energy counter; publish energy to
        // the rate-limited counter when an update boundary is crossed.
        // Accesses completing after a boundary are not visible at it.
        let energy_before = self.total_energy;
        self.total_cycles += cycles;
        self.total_energy +=
            f64::from(record.uop_count) * self.model.energy_per_uop(record.path);
        let t = self.total_cycles as f64 / self.model.core_freq_hz;
        let idx = (t / self.params.rapl_interval_s).floor() as u64;
        if idx > self.rapl_index {
            self.rapl_index = idx;
            self.rapl_visible = energy_before;
        }

        if timed {
            stats.obs_cycles += cycles;
            if record.path == DeliveryPath::Mite {
                stats.receiver_mite += 1;
            }
        }
    }

    /// Transmit one bit and return the receiver's observation.
    pub fn run_bit(&mut self, m: u8) -> BitOutcome {
        debug_assert!(m <= 1);
        let mut stats = StepStats::default();
        let energy_read_start = self.rapl_visible;

        let receiver = self.receiver_chain.clone();
        let sender = if m == 1 {
            self.sender_chain_one.clone()
        } else {
            self.sender_chain_zero.clone()
        };
        let (p, q) = self.params.effective_pq();

        match self.params.variant {
            ChannelVariant::MtEvict | ChannelVariant::MtMisalign => {
                // Init: the receiver re-establishes its loop.
                for _ in 0..p {
                    for b in &receiver {
                        self.step(0, b, false, &mut stats);
                    }
                }
                // Encode and decode overlap: each encode iteration is
                // interleaved block-by-block (round-robin) with the first
                // of its p/q decode iterations; the rest run undisturbed.
                // The receiver times only its own accesses.
                let group = (p / q) as usize;
                for _ in 0..q {
                    let smax = if m == 1 { sender.len() } else { 0 };
                    for i in 0..receiver.len().max(smax) {
                        if i < receiver.len() {
                            self.step(0, &receiver[i], true, &mut stats);
                        }
                        if i < smax {
                            self.step(1, &sender[i], false, &mut stats);
                        }
                    }
                    for _ in 1..group {
                        for b in &receiver {
                            self.step(0, b, true, &mut stats);
                        }
                    }
                }
            }
            ChannelVariant::NonMtEvict | ChannelVariant::NonMtMisalign => {
                // One timer wraps all three steps: p init passes, q encode
                // passes, p decode passes, all on one thread.
                for _ in 0..p {
                    for b in &receiver {
                        self.step(0, b, true, &mut stats);
                    }
                }
                let encode = m == 1 || self.params.stealth == Stealth::Stealthy;
                if encode {
                    for _ in 0..q {
                        for b in &sender {
                            self.step(0, b, true, &mut stats);
                        }
                    }
                }
                for _ in 0..p {
                    for b in &receiver {
                        self.step(0, b, true, &mut stats);
                    }
                }
            }
            ChannelVariant::SlowSwitch => {
                // The timer wraps the encode loop; m selects the loop body
                // (interleaved vs grouped LCP instructions).
                for _ in 0..p {
                    for b in &sender {
                        self.step(0, b, true, &mut stats);
                    }
                }
            }
        }

        if let Some(enclave) = &self.params.enclave {
            self.total_cycles += enclave.entry_exit_cycles;
            stats.obs_cycles += enclave.entry_exit_cycles;
        }

        let observation = match self.params.observable {
            Observable::Cycles => stats.obs_cycles as f64,
            Observable::Energy => self.rapl_visible - energy_read_start,
        };
        BitOutcome {
            observation,
            receiver_mite_blocks: stats.receiver_mite,
        }
    }

    /// Transmit an alternating pattern and place the decision cut between
    /// the two observation means. The polarity maps the larger-mean side
    /// to the bit value that produced it.
    pub fn calibrate(&mut self) -> Result<Threshold> {
        for i in 0..WARMUP_BITS {
            self.run_bit((i % 2) as u8);
        }
        let mut sum = [0.0f64; 2];
        let mut n = [0u32; 2];
        for i in 0..CALIBRATION_BITS {
            let m = (i % 2) as u8;
            let out = self.run_bit(m);
            sum[m as usize] += out.observation;
            n[m as usize] += 1;
        }
        let mean0 = sum[0] / f64::from(n[0]);
        let mean1 = sum[1] / f64::from(n[1]);
        if mean0 == mean1 {
            return Err(Error::DegenerateChannel(mean0));
        }
        let threshold = Threshold {
            cut: mean0 + self.params.threshold_alpha * (mean1 - mean0),
            polarity: if mean1 > mean0 {
                Polarity::AboveIsOne
            } else {
                Polarity::BelowIsOne
            },
            mean0,
            mean1,
        };
        self.threshold = Some(threshold);
        Ok(threshold)
    }

    /// Transmit a message bit by bit, classifying each observation against
    /// the calibrated threshold. Elapsed time covers the message span
    /// only.
    pub fn transmit(&mut self, message: &BitMessage) -> Result<Transmission> {
        let threshold = self
            .threshold
            .ok_or_else(|| Error::invalid("channel must be calibrated before transmit"))?;
        let cycles_before = self.total_cycles;
        let mut received = Vec::with_capacity(message.len());
        let mut observations = Vec::with_capacity(message.len());
        for &m in message.bits() {
            let out = self.run_bit(m);
            observations.push(out.observation);
            received.push(threshold.classify(out.observation));
        }
        let elapsed_s = (self.total_cycles - cycles_before) as f64 / self.model.core_freq_hz;
        Ok(Transmission {
            received: BitMessage::new(received, message.pattern()),
            elapsed_s,
            observations,
        })
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct StepStats {
    obs_cycles: u64,
    receiver_mite: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn defaults(variant: ChannelVariant) -> (ChannelParams, FrontendConfig, CostModel) {
        (
            ChannelParams::defaults_for(variant),
            FrontendConfig::default(),
            CostModel::default(),
        )
    }

    fn channel(params: &ChannelParams, fe: &FrontendConfig, model: &CostModel) -> Channel {
        Channel::new(params.clone(), fe, model, rng::stream(7, "test-channel")).unwrap()
    }

    fn small(params: &mut ChannelParams) {
        // Shrink the expensive two-thread iteration counts for unit tests.
        if params.variant.is_mt() {
            params.p = 100;
            params.q = 10;
        }
    }

    #[test]
    fn chain_addresses_map_to_the_target_set() {
        let geo = DsbGeometry::default();
        let blocks = build_block_chain(&geo, 8, 0, |_| false).unwrap();
        let addrs: Vec<u64> = blocks.iter().map(|b| b.start_addr).collect();
        assert_eq!(addrs, vec![0x0, 0x400, 0x800, 0xC00, 0x1000, 0x1400, 0x1800, 0x1C00]);
        // Mapping oracle over the generated addresses.
        for b in &blocks {
            assert_eq!((b.start_addr / 32) % 32, 0);
        }
        // The stride cycles through 4 instruction-cache sets; with 8-way
        // L1I sets that leaves every set underfull (the stealth property).
        let l1geo = crate::frontend::L1iGeometry::default();
        let mut per_set = std::collections::BTreeMap::new();
        for b in &blocks {
            *per_set.entry(l1geo.set_index(b.start_addr)).or_insert(0usize) += 1;
        }
        assert_eq!(per_set.keys().copied().collect::<Vec<_>>(), vec![0, 16, 32, 48]);
        assert!(per_set.values().all(|&c| c <= l1geo.ways));
        // Chained and closed.
        for k in 0..blocks.len() {
            assert_eq!(blocks[k].next_addr, blocks[(k + 1) % blocks.len()].start_addr);
        }
    }

    #[test]
    fn single_block_chain_loops_on_itself() {
        let geo = DsbGeometry::default();
        let blocks = build_block_chain(&geo, 1, 4, |_| false).unwrap();
        assert_eq!(blocks[0].next_addr, blocks[0].start_addr);
    }

    #[test]
    fn misaligned_chain_entry_gets_the_half_window_offset() {
        let geo = DsbGeometry::default();
        let blocks = build_block_chain(&geo, 3, 5, |k| k == 2).unwrap();
        assert_eq!(blocks[2].start_addr, 2 * 0x400 + 5 * 0x20 + 0x10);
        assert!(blocks[2].is_misaligned());
        assert!(blocks[0].is_aligned());
    }

    #[test]
    fn chain_rejects_out_of_range_set() {
        let geo = DsbGeometry::default();
        assert!(build_block_chain(&geo, 4, 32, |_| false).is_err());
    }

    #[test]
    fn params_validation() {
        let geo = DsbGeometry::default();
        let mut p = ChannelParams::defaults_for(ChannelVariant::NonMtEvict);
        p.d = 9;
        assert!(p.validate(&geo).is_err(), "d < N+1 violated");
        let mut p = ChannelParams::defaults_for(ChannelVariant::NonMtEvict);
        p.q = 5;
        assert!(p.validate(&geo).is_err(), "single-thread variants need p=q");
        let mut p = ChannelParams::defaults_for(ChannelVariant::MtEvict);
        p.p = 1001;
        assert!(p.validate(&geo).is_err(), "q must divide p");
        let mut p = ChannelParams::defaults_for(ChannelVariant::MtMisalign);
        p.m_total = 9;
        assert!(p.validate(&geo).is_err(), "M <= N violated");
        let mut p = ChannelParams::defaults_for(ChannelVariant::MtMisalign);
        p.d = 8;
        assert!(p.validate(&geo).is_err(), "d < M violated");
        let mut p = ChannelParams::defaults_for(ChannelVariant::NonMtEvict);
        p.threshold_alpha = 1.0;
        assert!(p.validate(&geo).is_err(), "alpha in (0,1)");
    }

    #[test]
    fn mt_evict_m1_touches_n_plus_one_distinct_same_set_windows() {
        let (params, fe, model) = defaults(ChannelVariant::MtEvict);
        let ch = channel(&params, &fe, &model);
        let geo = fe.dsb;
        let mut tags: Vec<u64> = ch
            .receiver_chain()
            .iter()
            .chain(ch.sender_chain(1).iter())
            .map(|b| geo.window_tag(b.start_addr))
            .collect();
        tags.sort_unstable();
        tags.dedup();
        assert_eq!(tags.len(), geo.ways + 1);
        for &t in &tags {
            assert_eq!((t % geo.sets as u64) as usize, params.target_set);
        }
    }

    #[test]
    fn mt_evict_separates_and_m1_is_slower() {
        let (mut params, fe, model) = defaults(ChannelVariant::MtEvict);
        small(&mut params);
        let mut ch = channel(&params, &fe, &model);
        let th = ch.calibrate().unwrap();
        assert!(th.mean1 > th.mean0, "eviction makes the decode slower");
        assert_eq!(th.polarity, Polarity::AboveIsOne);
        assert!(th.cut > th.mean0 && th.cut < th.mean1);

        // m=1 evicts (receiver sees MITE deliveries), m=0 does not.
        let one = ch.run_bit(1);
        let zero = ch.run_bit(0);
        assert!(one.receiver_mite_blocks > 0);
        assert_eq!(zero.receiver_mite_blocks, 0);
        let evictions_before = ch.counters().dsb_evictions;
        ch.run_bit(0);
        assert_eq!(ch.counters().dsb_evictions, evictions_before);
        ch.run_bit(1);
        assert!(ch.counters().dsb_evictions > evictions_before);
    }

    #[test]
    fn mt_misalign_separates_without_evictions() {
        let (mut params, fe, model) = defaults(ChannelVariant::MtMisalign);
        small(&mut params);
        let mut ch = channel(&params, &fe, &model);
        let th = ch.calibrate().unwrap();
        assert!(th.gap() > 0.0);
        // The whole point of the misalignment family: no way overflow.
        let before = ch.counters().dsb_evictions;
        ch.run_bit(1);
        ch.run_bit(0);
        assert_eq!(ch.counters().dsb_evictions, before);
        // The flushes are what the receiver observes.
        assert!(ch.counters().lsd_flushes > 0);
    }

    #[test]
    fn nonmt_variants_separate_for_both_stealth_modes() {
        for variant in [ChannelVariant::NonMtEvict, ChannelVariant::NonMtMisalign] {
            for stealth in [Stealth::Stealthy, Stealth::Fast] {
                let (mut params, fe, model) = defaults(variant);
                params.stealth = stealth;
                let mut ch = channel(&params, &fe, &model);
                let th = ch.calibrate().unwrap_or_else(|e| {
                    panic!("{variant:?}/{stealth:?} failed to calibrate: {e}")
                });
                assert!(th.gap() > 0.0, "{variant:?}/{stealth:?}");
            }
        }
    }

    #[test]
    fn nonmt_misalign_fast_decodes_from_the_loop_buffer_for_zero() {
        let (params, fe, model) = defaults(ChannelVariant::NonMtMisalign);
        let mut params = params;
        params.stealth = Stealth::Fast;
        let mut ch = channel(&params, &fe, &model);
        ch.run_bit(0);
        let before = ch.counters();
        let out = ch.run_bit(0);
        let after = ch.counters();
        assert_eq!(out.receiver_mite_blocks, 0);
        assert!(after.lsd_uops > before.lsd_uops, "steady 0-bits stream from the LSD");
    }

    #[test]
    fn stealthy_and_fast_yield_identical_classifications() {
        for variant in [ChannelVariant::NonMtEvict, ChannelVariant::NonMtMisalign] {
            let message = crate::eval::gen_message(MessagePattern::Random, 64, 11);
            let mut received = Vec::new();
            for stealth in [Stealth::Stealthy, Stealth::Fast] {
                let (mut params, fe, model) = defaults(variant);
                params.stealth = stealth;
                let mut ch = channel(&params, &fe, &model);
                ch.calibrate().unwrap();
                received.push(ch.transmit(&message).unwrap().received);
            }
            assert_eq!(received[0], received[1], "{variant:?}");
        }
    }

    #[test]
    fn slow_switch_m1_is_slower() {
        let (params, fe, model) = defaults(ChannelVariant::SlowSwitch);
        let mut ch = channel(&params, &fe, &model);
        let th = ch.calibrate().unwrap();
        assert!(th.mean1 > th.mean0, "interleaved LCPs stall more");
        assert_eq!(th.polarity, Polarity::AboveIsOne);
        let one = ch.run_bit(1);
        let zero = ch.run_bit(0);
        assert!(one.observation > zero.observation);
    }

    #[test]
    fn transmit_requires_calibration() {
        let (params, fe, model) = defaults(ChannelVariant::NonMtEvict);
        let mut ch = channel(&params, &fe, &model);
        let msg = crate::eval::gen_message(MessagePattern::Alternating, 4, 0);
        assert!(ch.transmit(&msg).is_err());
    }

    #[test]
    fn empty_message_transmits_to_empty() {
        let (params, fe, model) = defaults(ChannelVariant::NonMtEvict);
        let mut ch = channel(&params, &fe, &model);
        ch.calibrate().unwrap();
        let msg = BitMessage::new(vec![], MessagePattern::Alternating);
        let t = ch.transmit(&msg).unwrap();
        assert!(t.received.is_empty());
        assert_eq!(t.elapsed_s, 0.0);
    }

    #[test]
    fn noiseless_transmission_is_error_free() {
        for variant in [
            ChannelVariant::NonMtEvict,
            ChannelVariant::NonMtMisalign,
            ChannelVariant::SlowSwitch,
        ] {
            let (params, fe, model) = defaults(variant);
            let mut ch = channel(&params, &fe, &model);
            ch.calibrate().unwrap();
            let msg = crate::eval::gen_message(MessagePattern::Random, 128, 3);
            let t = ch.transmit(&msg).unwrap();
            assert_eq!(t.received.bits(), msg.bits(), "{variant:?}");
        }
    }

    #[test]
    fn transmission_adds_no_l1i_misses_after_warmup() {
        for variant in [
            ChannelVariant::NonMtEvict,
            ChannelVariant::NonMtMisalign,
            ChannelVariant::SlowSwitch,
        ] {
            let (params, fe, model) = defaults(variant);
            let mut ch = channel(&params, &fe, &model);
            ch.calibrate().unwrap();
            let before = ch.counters().l1i_misses;
            let msg = crate::eval::gen_message(MessagePattern::Alternating, 64, 0);
            ch.transmit(&msg).unwrap();
            assert_eq!(ch.counters().l1i_misses, before, "{variant:?}");
        }
    }

    #[test]
    fn enclave_mode_shifts_observations_but_not_polarity() {
        let (base_params, fe, model) = defaults(ChannelVariant::NonMtEvict);
        let mut base = channel(&base_params, &fe, &model);
        let th_base = base.calibrate().unwrap();

        let mut params = base_params.clone();
        params.enclave = Some(EnclaveParams {
            entry_exit_cycles: 3000,
            p: 10,
            q: 10,
        });
        let mut enclave = channel(&params, &fe, &model);
        let th_enclave = enclave.calibrate().unwrap();
        assert_eq!(th_base.polarity, th_enclave.polarity);
        assert!(th_enclave.mean0 > th_base.mean0, "per-bit overhead added");
    }

    #[test]
    fn degenerate_cost_model_fails_calibration() {
        let (params, fe, _) = defaults(ChannelVariant::NonMtEvict);
        // lsd == dsb == mite - 1 and zero penalties: every path change is
        // invisible except MITE, so force everything as close as the
        // ordering invariants allow and erase the remaining separation by
        // observing energy through a far-too-slow counter instead.
        let mut params = params;
        params.observable = Observable::Energy;
        let model = CostModel::default();
        let mut ch = channel(&params, &fe, &model);
        // Bits last ~microseconds, the counter updates every 50; nothing
        // is ever visible.
        match ch.calibrate() {
            Err(Error::DegenerateChannel(_)) => {}
            other => panic!("expected degenerate-channel error, got {other:?}"),
        }
    }

    #[test]
    fn energy_channel_works_when_bits_outlast_the_counter_interval() {
        let (mut params, fe, model) = defaults(ChannelVariant::NonMtEvict);
        params.observable = Observable::Energy;
        // Scale the counter so one bit spans many update intervals, the
        // regime the power channel needs its huge iteration counts for.
        params.rapl_interval_s = 10.0 / model.core_freq_hz;
        let mut ch = channel(&params, &fe, &model);
        ch.calibrate().unwrap();
        let msg = crate::eval::gen_message(MessagePattern::Random, 64, 9);
        let t = ch.transmit(&msg).unwrap();
        assert_eq!(t.received.bits(), msg.bits());
    }

    #[test]
    fn runs_are_reproducible_for_a_fixed_seed() {
        let run = || {
            let (params, fe, mut model) = defaults(ChannelVariant::NonMtEvict);
            model.noise_sigma = 40.0;
            let mut ch = channel(&params, &fe, &model);
            ch.calibrate().unwrap();
            let msg = crate::eval::gen_message(MessagePattern::Random, 64, 5);
            let t = ch.transmit(&msg).unwrap();
            (t.received, t.observations)
        };
        let (r1, o1) = run();
        let (r2, o2) = run();
        assert_eq!(r1, r2);
        assert_eq!(o1, o2);
    }
}
