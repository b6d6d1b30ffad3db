//! Structural model of the frontend delivery paths.
//!
//! Micro-ops reach the backend through one of three paths, in priority
//! order: the loop buffer (LSD) replays a captured loop, the micro-op cache
//! (DSB) serves blocks whose 32-byte windows are resident, and everything
//! else falls back to the legacy decoder (MITE), which fills the DSB as it
//! decodes. The containment relation is `LSD ⊆ DSB ⊆ MITE-decodable`:
//! evicting a window from the DSB flushes a loop capture that uses it.
//!
//! The instruction cache shadow is only touched by MITE deliveries — the
//! DSB and LSD paths deliver already-decoded micro-ops and perform no
//! fetch. That is what makes frontend interference invisible to
//! instruction-cache miss counters.
//!
//! Blocks are abstract: they carry declared byte/micro-op/prefix counts
//! instead of real instruction bytes (see [`MixBlock`]).

use crate::error::{Error, Result};

/// An addressable instruction block, the unit of frontend access.
///
/// The canonical block used throughout the experiments is four single-uop
/// ALU instructions plus a jump: 25 bytes, 5 micro-ops, which fits a single
/// 32-byte window and one DSB line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixBlock {
    /// Virtual byte address of the first instruction.
    pub start_addr: u64,
    /// Total encoded length in bytes.
    pub byte_len: u32,
    /// Micro-ops the block decodes to.
    pub uop_count: u32,
    /// Instructions carrying a length-changing prefix.
    pub lcp_count: u32,
    /// LCP instructions whose predecessor instruction is not itself
    /// LCP-prefixed; each such boundary stalls the pre-decoder.
    pub lcp_stall_sites: u32,
    /// Jump target: address of the next block in the chain.
    pub next_addr: u64,
}

impl MixBlock {
    /// Canonical 4+1 block: 25 bytes, 5 micro-ops, no prefixes.
    pub fn canonical(start_addr: u64, next_addr: u64) -> Self {
        MixBlock {
            start_addr,
            byte_len: 25,
            uop_count: 5,
            lcp_count: 0,
            lcp_stall_sites: 0,
            next_addr,
        }
    }

    /// Plain block without prefixes.
    pub fn plain(start_addr: u64, byte_len: u32, uop_count: u32, next_addr: u64) -> Self {
        MixBlock {
            start_addr,
            byte_len,
            uop_count,
            lcp_count: 0,
            lcp_stall_sites: 0,
            next_addr,
        }
    }

    /// Loop body of `pairs` (plain add, LCP add) pairs. Every LCP
    /// instruction follows a plain one, so every one of them stalls.
    pub fn lcp_interleaved(start_addr: u64, pairs: u32, next_addr: u64) -> Self {
        MixBlock {
            start_addr,
            byte_len: pairs * 9, // 4-byte plain add + 5-byte prefixed add
            uop_count: pairs * 2,
            lcp_count: pairs,
            lcp_stall_sites: pairs,
            next_addr,
        }
    }

    /// Loop body of `count` plain adds followed by `count` LCP adds. Only
    /// the first LCP instruction sits behind a non-LCP predecessor.
    pub fn lcp_grouped(start_addr: u64, count: u32, next_addr: u64) -> Self {
        MixBlock {
            start_addr,
            byte_len: count * 9,
            uop_count: count * 2,
            lcp_count: count,
            lcp_stall_sites: if count > 0 { 1 } else { 0 },
            next_addr,
        }
    }

    /// A block fits one DSB line when it fits one window and the line's
    /// micro-op budget.
    pub fn is_dsb_line_eligible(&self, geo: &DsbGeometry) -> bool {
        self.byte_len <= geo.window_bytes && self.uop_count <= geo.uops_per_line
    }

    pub fn alignment(&self, window_bytes: u32) -> Alignment {
        let off = self.start_addr % u64::from(window_bytes);
        if off == 0 {
            Alignment::Aligned
        } else if off == u64::from(window_bytes / 2) {
            Alignment::Misaligned
        } else {
            Alignment::Other
        }
    }

    /// Alignment against the default 32-byte window.
    pub fn is_aligned(&self) -> bool {
        self.alignment(32) == Alignment::Aligned
    }

    pub fn is_misaligned(&self) -> bool {
        self.alignment(32) == Alignment::Misaligned
    }
}

/// Block placement relative to the window grid. "Misaligned" specifically
/// means offset by half a window, the placement the misalignment attacks
/// use; other offsets play no role in the rule table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    Aligned,
    Misaligned,
    Other,
}

/// Micro-op cache geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsbGeometry {
    pub sets: usize,
    pub ways: usize,
    pub uops_per_line: u32,
    pub window_bytes: u32,
}

impl Default for DsbGeometry {
    fn default() -> Self {
        DsbGeometry {
            sets: 32,
            ways: 8,
            uops_per_line: 6,
            window_bytes: 32,
        }
    }
}

impl DsbGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.sets == 0 || self.ways == 0 || self.uops_per_line == 0 || self.window_bytes == 0 {
            return Err(Error::invalid("DSB geometry counts must be >= 1"));
        }
        if self.sets % 2 != 0 {
            return Err(Error::invalid(
                "DSB set count must be even (for SMT partitioning)",
            ));
        }
        Ok(())
    }

    /// Total micro-op capacity (1536 at the default geometry).
    pub fn capacity_uops(&self) -> u64 {
        self.sets as u64 * self.ways as u64 * u64::from(self.uops_per_line)
    }

    /// Window tag: the address of the 32-byte window containing `addr`,
    /// in window units.
    pub fn window_tag(&self, addr: u64) -> u64 {
        addr / u64::from(self.window_bytes)
    }

    /// Set index with a single active thread: window tag modulo set count
    /// (bits [9:5] of the address at the default geometry).
    pub fn set_index(&self, addr: u64) -> usize {
        (self.window_tag(addr) % self.sets as u64) as usize
    }

    /// Set index with two active threads: each thread owns a contiguous
    /// half of the sets and indexes it with one fewer tag bit. Thread 0
    /// owns the low half.
    pub fn partitioned_set_index(&self, addr: u64, thread: usize) -> usize {
        let half = self.sets / 2;
        thread * half + (self.window_tag(addr) % half as u64) as usize
    }

    fn home_set(&self, tag: u64, owner: usize, partitioned: bool) -> usize {
        if partitioned {
            let half = self.sets / 2;
            owner * half + (tag % half as u64) as usize
        } else {
            (tag % self.sets as u64) as usize
        }
    }
}

/// Set index for an address. `thread` is ignored when `partitioned` is
/// false.
pub fn dsb_set_index(geo: &DsbGeometry, addr: u64, partitioned: bool, thread: usize) -> usize {
    if partitioned {
        geo.partitioned_set_index(addr, thread)
    } else {
        geo.set_index(addr)
    }
}

/// Loop buffer geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LsdGeometry {
    pub capacity_uops: u32,
    pub enabled: bool,
}

impl Default for LsdGeometry {
    fn default() -> Self {
        LsdGeometry {
            capacity_uops: 64,
            enabled: true,
        }
    }
}

impl LsdGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.capacity_uops == 0 {
            return Err(Error::invalid("LSD capacity must be >= 1"));
        }
        Ok(())
    }
}

/// Instruction cache geometry (a shadow structure; only MITE deliveries
/// touch it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L1iGeometry {
    pub size_bytes: usize,
    pub ways: usize,
    pub line_bytes: u32,
}

impl Default for L1iGeometry {
    fn default() -> Self {
        L1iGeometry {
            size_bytes: 32 * 1024,
            ways: 8,
            line_bytes: 64,
        }
    }
}

impl L1iGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.size_bytes == 0 || self.ways == 0 || self.line_bytes == 0 {
            return Err(Error::invalid("L1I geometry counts must be >= 1"));
        }
        let per_way = self.ways * self.line_bytes as usize;
        if self.size_bytes % per_way != 0 {
            return Err(Error::invalid(
                "L1I size must be divisible by ways * line size",
            ));
        }
        if !self.sets().is_power_of_two() {
            return Err(Error::invalid("derived L1I set count must be a power of two"));
        }
        Ok(())
    }

    /// Derived set count: size / (ways * line). 64 at the default geometry.
    pub fn sets(&self) -> usize {
        self.size_bytes / (self.ways * self.line_bytes as usize)
    }

    pub fn line_tag(&self, addr: u64) -> u64 {
        addr / u64::from(self.line_bytes)
    }

    /// Set index: line tag modulo set count (bits [11:6] at defaults).
    pub fn set_index(&self, addr: u64) -> usize {
        (self.line_tag(addr) % self.sets() as u64) as usize
    }
}

pub fn l1i_set_index(geo: &L1iGeometry, addr: u64) -> usize {
    geo.set_index(addr)
}

/// Full frontend configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendConfig {
    pub dsb: DsbGeometry,
    pub lsd: LsdGeometry,
    pub l1i: L1iGeometry,
    /// Identical consecutive repetitions of a loop body before the LSD
    /// captures it.
    pub lsd_warmup_iters: u32,
    /// How many block accesses a window's alignment stays "recent" for the
    /// misalignment rule. The rule reacts to recent access patterns, not
    /// to arbitrarily old residue.
    pub misalign_window: u64,
    /// Pre-decode stall cycles charged per stalled LCP instruction; used
    /// for the `lcp_stall_cycles` counter.
    pub lcp_stall_cycles: u32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            dsb: DsbGeometry::default(),
            lsd: LsdGeometry::default(),
            l1i: L1iGeometry::default(),
            lsd_warmup_iters: 2,
            misalign_window: 64,
            lcp_stall_cycles: 3,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        self.dsb.validate()?;
        self.lsd.validate()?;
        self.l1i.validate()?;
        if self.lsd_warmup_iters == 0 {
            return Err(Error::invalid("LSD warmup iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Which path delivered a block's micro-ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DeliveryPath {
    Lsd,
    Dsb,
    Mite,
}

impl DeliveryPath {
    pub fn label(&self) -> &'static str {
        match self {
            DeliveryPath::Lsd => "lsd",
            DeliveryPath::Dsb => "dsb",
            DeliveryPath::Mite => "mite",
        }
    }
}

/// Outcome of a single block access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub path: DeliveryPath,
    pub uop_count: u32,
    pub lcp_count: u32,
    pub lcp_stall_sites: u32,
    /// Window tags the block spans.
    pub windows_touched: Vec<u64>,
    /// Instruction-cache misses this access caused (MITE fetches only).
    pub l1i_misses: u32,
}

/// Event counters. All counters are monotonically non-decreasing within a
/// run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub lsd_uops: u64,
    pub dsb_uops: u64,
    pub mite_uops: u64,
    pub dsb_evictions: u64,
    pub lsd_flushes: u64,
    pub dsb_to_mite_switches: u64,
    pub lsd_to_dsb_switches: u64,
    pub lcp_stall_cycles: u64,
    pub l1i_misses: u64,
}

impl Counters {
    pub const CSV_HEADER: &'static str = "lsd_uops,dsb_uops,mite_uops,dsb_evictions,lsd_flushes,dsb_to_mite_switches,lsd_to_dsb_switches,lcp_stall_cycles,l1i_misses";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.lsd_uops,
            self.dsb_uops,
            self.mite_uops,
            self.dsb_evictions,
            self.lsd_flushes,
            self.dsb_to_mite_switches,
            self.lsd_to_dsb_switches,
            self.lcp_stall_cycles,
            self.l1i_misses
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct WindowEntry {
    tag: u64,
    owner: usize,
    alignment: Alignment,
    last_access: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LineEntry {
    tag: u64,
    last_access: u64,
}

/// An active loop capture: the loop's block identities, the windows they
/// span and the sets hosting those windows.
#[derive(Debug, Clone, PartialEq, Eq)]
struct LsdCapture {
    thread: usize,
    block_addrs: Vec<u64>,
    window_tags: Vec<u64>,
    hosting_sets: Vec<usize>,
}

impl LsdCapture {
    fn contains_block(&self, addr: u64) -> bool {
        self.block_addrs.binary_search(&addr).is_ok()
    }

    fn contains_window(&self, tag: u64) -> bool {
        self.window_tags.binary_search(&tag).is_ok()
    }

    fn hosts_set(&self, set: usize) -> bool {
        self.hosting_sets.binary_search(&set).is_ok()
    }
}

/// One element of a loop body as seen by the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BodyBlock {
    start_addr: u64,
    uop_count: u32,
    first_window: u64,
    last_window: u64,
}

/// Loop detection over the delivered block stream. A body is delimited by
/// re-encountering its first block; a body whose micro-op total exceeds
/// the LSD capacity can never qualify, so the detector resets instead of
/// growing without bound.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct LoopDetector {
    open: Vec<BodyBlock>,
    open_uops: u32,
    prev_body: Vec<u64>,
    reps: u32,
}

impl LoopDetector {
    /// Feed one access; returns the closed body and its consecutive
    /// repetition count when the stream just completed a loop iteration.
    fn observe(&mut self, block: BodyBlock, capacity_uops: u32) -> Option<(Vec<BodyBlock>, u32)> {
        if let Some(first) = self.open.first() {
            if first.start_addr == block.start_addr {
                let body = std::mem::take(&mut self.open);
                let addrs: Vec<u64> = body.iter().map(|b| b.start_addr).collect();
                if addrs == self.prev_body {
                    self.reps += 1;
                } else {
                    self.prev_body = addrs;
                    self.reps = 1;
                }
                self.open.push(block);
                self.open_uops = block.uop_count;
                return Some((body, self.reps));
            }
        }
        self.open.push(block);
        self.open_uops = self.open_uops.saturating_add(block.uop_count);
        if self.open_uops > capacity_uops {
            // Too large to ever stream; restart detection at the current
            // block.
            self.open.clear();
            self.open.push(block);
            self.open_uops = block.uop_count;
            self.prev_body.clear();
            self.reps = 0;
        }
        None
    }

    fn reset(&mut self) {
        self.open.clear();
        self.open_uops = 0;
        self.prev_body.clear();
        self.reps = 0;
    }
}

/// The frontend: DSB, LSD, instruction-cache shadow, partition mode and
/// counters. One instance models one physical core.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontend {
    config: FrontendConfig,
    dsb: Vec<Vec<WindowEntry>>,
    l1i: Vec<Vec<LineEntry>>,
    capture: Option<LsdCapture>,
    detectors: [LoopDetector; 2],
    active_threads: usize,
    last_path: Option<DeliveryPath>,
    access_seq: u64,
    counters: Counters,
}

impl Frontend {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        Ok(Frontend {
            dsb: vec![Vec::with_capacity(config.dsb.ways); config.dsb.sets],
            l1i: vec![Vec::with_capacity(config.l1i.ways); config.l1i.sets()],
            capture: None,
            detectors: [LoopDetector::default(), LoopDetector::default()],
            active_threads: 1,
            last_path: None,
            access_seq: 0,
            counters: Counters::default(),
            config,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn active_threads(&self) -> usize {
        self.active_threads
    }

    fn partitioned(&self) -> bool {
        self.active_threads == 2
    }

    /// Set index an address maps to for `thread` under the current
    /// partition mode.
    pub fn dsb_set_index_for(&self, addr: u64, thread: usize) -> usize {
        dsb_set_index(&self.config.dsb, addr, self.partitioned(), thread)
    }

    pub fn l1i_set_index(&self, addr: u64) -> usize {
        self.config.l1i.set_index(addr)
    }

    /// Whether the loop buffer currently holds a captured loop.
    pub fn lsd_captured(&self) -> bool {
        self.capture.is_some()
    }

    /// Window tags of the captured loop, if any (sorted).
    pub fn lsd_capture_windows(&self) -> Option<&[u64]> {
        self.capture.as_ref().map(|c| c.window_tags.as_slice())
    }

    /// True if window `tag` owned by `thread` is resident at the set it
    /// indexes to under the current partition mode.
    pub fn dsb_window_resident(&self, tag: u64, thread: usize) -> bool {
        let set = self.config.dsb.home_set(tag, thread, self.partitioned());
        self.dsb[set].iter().any(|e| e.tag == tag)
    }

    /// Number of distinct window tags resident in a DSB set.
    pub fn dsb_set_occupancy(&self, set: usize) -> usize {
        self.dsb[set].len()
    }

    /// Switch between one and two active threads.
    ///
    /// Going 1→2 immediately evicts every resident window from a set that
    /// is not the window's home set under partitioned indexing, and
    /// flushes a loop capture that loses a window. Going 2→1 evicts
    /// nothing; stale lines left outside their unpartitioned home set
    /// simply become unreachable and age out.
    pub fn set_partition_mode(&mut self, active_threads: usize) -> Result<()> {
        if active_threads != 1 && active_threads != 2 {
            return Err(Error::invalid("active_threads must be 1 or 2"));
        }
        if active_threads == self.active_threads {
            return Ok(());
        }
        self.active_threads = active_threads;
        if active_threads == 2 {
            let geo = self.config.dsb;
            for set in 0..self.dsb.len() {
                let before = self.dsb[set].len();
                self.dsb[set].retain(|e| geo.home_set(e.tag, e.owner, true) == set);
                self.counters.dsb_evictions += (before - self.dsb[set].len()) as u64;
            }
        }
        // Captures whose windows are no longer visible under the new
        // indexing cannot be replayed; drop them.
        if let Some(capture) = &self.capture {
            let thread = capture.thread;
            let all_visible = capture
                .window_tags
                .clone()
                .iter()
                .all(|&tag| self.dsb_window_resident(tag, thread));
            if !all_visible {
                self.flush_lsd();
            }
        }
        for d in &mut self.detectors {
            d.reset();
        }
        Ok(())
    }

    /// Window tags a block spans.
    pub fn windows_spanned(&self, block: &MixBlock) -> Vec<u64> {
        let (first, last) = self.window_range(block);
        (first..=last).collect()
    }

    fn window_range(&self, block: &MixBlock) -> (u64, u64) {
        let first = self.config.dsb.window_tag(block.start_addr);
        let last = self
            .config
            .dsb
            .window_tag(block.start_addr + u64::from(block.byte_len.max(1)) - 1);
        (first, last)
    }

    fn lines_spanned(&self, block: &MixBlock) -> (u64, u64) {
        let first = self.config.l1i.line_tag(block.start_addr);
        let last = self
            .config
            .l1i
            .line_tag(block.start_addr + u64::from(block.byte_len.max(1)) - 1);
        (first, last)
    }

    fn flush_lsd(&mut self) {
        if self.capture.take().is_some() {
            self.counters.lsd_flushes += 1;
        }
    }

    /// Recent-alignment composition of a DSB set: windows accessed within
    /// the last `misalign_window` block accesses, counted by the alignment
    /// of the block that filled them.
    fn set_composition(&self, set: usize) -> (u32, u32) {
        let mut aligned = 0;
        let mut misaligned = 0;
        for e in &self.dsb[set] {
            if self.access_seq.saturating_sub(e.last_access) > self.config.misalign_window {
                continue;
            }
            match e.alignment {
                Alignment::Aligned => aligned += 1,
                Alignment::Misaligned => misaligned += 1,
                Alignment::Other => {}
            }
        }
        (aligned, misaligned)
    }

    /// Access one instruction block on `thread` and deliver its micro-ops.
    pub fn access(&mut self, thread: usize, block: &MixBlock) -> DeliveryRecord {
        debug_assert!(block.uop_count >= 1, "blocks deliver at least one micro-op");
        self.access_seq += 1;

        let (first_window, last_window) = self.window_range(block);
        let windows: Vec<u64> = (first_window..=last_window).collect();
        let alignment = block.alignment(self.config.dsb.window_bytes);

        // Path selection. An LCP block always takes the legacy path; the
        // loop buffer replays only members of the captured loop; the DSB
        // serves a block only if every window it spans is resident.
        let lsd_hit = block.lcp_count == 0
            && self.config.lsd.enabled
            && self
                .capture
                .as_ref()
                .map(|c| c.thread == thread && c.contains_block(block.start_addr))
                .unwrap_or(false);
        let path = if lsd_hit {
            DeliveryPath::Lsd
        } else {
            let all_resident = windows.iter().all(|&w| self.window_resident(w, thread));
            if block.lcp_count == 0 && all_resident {
                DeliveryPath::Dsb
            } else {
                DeliveryPath::Mite
            }
        };

        let mut l1i_misses = 0;
        match path {
            DeliveryPath::Lsd | DeliveryPath::Dsb => {
                // Streamed or cached micro-ops: refresh recency (and the
                // accessing block's alignment), no fetch.
                for &w in &windows {
                    let a = if w == first_window { alignment } else { Alignment::Other };
                    self.touch_window(w, thread, a);
                }
            }
            DeliveryPath::Mite => {
                // Decode fetches through the instruction cache and inserts
                // the decoded windows into the DSB.
                let (first_line, last_line) = self.lines_spanned(block);
                for line in first_line..=last_line {
                    if !self.touch_l1i_line(line) {
                        l1i_misses += 1;
                    }
                }
                for &w in &windows {
                    let a = if w == first_window { alignment } else { Alignment::Other };
                    self.fill_window(w, thread, a);
                }
            }
        }

        // Misalignment collisions: a captured loop is flushed when the
        // recent access pattern of a hosting set matches the rule table.
        if self.capture.is_some() {
            let mut flush = false;
            for &w in &windows {
                let set = self.config.dsb.home_set(w, thread, self.partitioned());
                let hosts = self.capture.as_ref().map(|c| c.hosts_set(set)).unwrap_or(false);
                if hosts {
                    let (a, m) = self.set_composition(set);
                    if m > 0 && !misalignment_rule(a, m) {
                        flush = true;
                        break;
                    }
                }
            }
            if flush {
                self.flush_lsd();
            }
        }

        // Loop detection and capture.
        let closed = self.detectors[thread].observe(
            BodyBlock {
                start_addr: block.start_addr,
                uop_count: block.uop_count,
                first_window,
                last_window,
            },
            self.config.lsd.capacity_uops,
        );
        if let Some((body, reps)) = closed {
            if reps >= self.config.lsd_warmup_iters {
                self.try_capture_body(thread, &body);
            }
        }

        // Counters.
        match path {
            DeliveryPath::Lsd => self.counters.lsd_uops += u64::from(block.uop_count),
            DeliveryPath::Dsb => self.counters.dsb_uops += u64::from(block.uop_count),
            DeliveryPath::Mite => self.counters.mite_uops += u64::from(block.uop_count),
        }
        match (self.last_path, path) {
            (Some(DeliveryPath::Lsd), DeliveryPath::Dsb) => {
                self.counters.lsd_to_dsb_switches += 1;
            }
            (Some(DeliveryPath::Dsb), DeliveryPath::Mite) => {
                self.counters.dsb_to_mite_switches += 1;
            }
            (Some(DeliveryPath::Lsd), DeliveryPath::Mite) => {
                self.counters.lsd_to_dsb_switches += 1;
                self.counters.dsb_to_mite_switches += 1;
            }
            _ => {}
        }
        self.last_path = Some(path);
        self.counters.lcp_stall_cycles +=
            u64::from(block.lcp_stall_sites) * u64::from(self.config.lcp_stall_cycles);
        self.counters.l1i_misses += u64::from(l1i_misses);

        DeliveryRecord {
            path,
            uop_count: block.uop_count,
            lcp_count: block.lcp_count,
            lcp_stall_sites: block.lcp_stall_sites,
            windows_touched: windows,
            l1i_misses,
        }
    }

    /// Run a chain of blocks in order, `passes` times.
    pub fn run_chain(
        &mut self,
        thread: usize,
        chain: &[MixBlock],
        passes: usize,
    ) -> Vec<DeliveryRecord> {
        let mut records = Vec::with_capacity(chain.len() * passes);
        for _ in 0..passes {
            for block in chain {
                records.push(self.access(thread, block));
            }
        }
        records
    }

    /// Attempt to capture a closed loop right now, applying the
    /// qualification rules (buffer enabled, micro-op budget, every window
    /// DSB-resident, misalignment rule table). This is the same
    /// qualification the stream detector applies after the warm-up
    /// repetitions; calling it directly is useful for tests and pre-warmed
    /// scenarios.
    ///
    /// Oversized or disqualified loops return `false` rather than
    /// erroring.
    pub fn lsd_try_capture(&mut self, thread: usize, loop_trace: &[MixBlock]) -> bool {
        debug_assert!(!loop_trace.is_empty());
        debug_assert_eq!(
            loop_trace.last().map(|b| b.next_addr),
            loop_trace.first().map(|b| b.start_addr),
            "loop trace must be closed"
        );
        let body: Vec<BodyBlock> = loop_trace
            .iter()
            .map(|b| {
                let (first_window, last_window) = self.window_range(b);
                BodyBlock {
                    start_addr: b.start_addr,
                    uop_count: b.uop_count,
                    first_window,
                    last_window,
                }
            })
            .collect();
        self.try_capture_body(thread, &body)
    }

    fn try_capture_body(&mut self, thread: usize, body: &[BodyBlock]) -> bool {
        if !self.config.lsd.enabled || body.is_empty() {
            return false;
        }
        let total_uops: u32 = body.iter().map(|b| b.uop_count).sum();
        if total_uops > self.config.lsd.capacity_uops {
            return false;
        }

        let mut window_tags: Vec<u64> = Vec::new();
        for b in body {
            for w in b.first_window..=b.last_window {
                if !self.window_resident(w, thread) {
                    return false;
                }
                window_tags.push(w);
            }
        }
        window_tags.sort_unstable();
        window_tags.dedup();

        let mut hosting_sets: Vec<usize> = window_tags
            .iter()
            .map(|&w| self.config.dsb.home_set(w, thread, self.partitioned()))
            .collect();
        hosting_sets.sort_unstable();
        hosting_sets.dedup();

        for &set in &hosting_sets {
            let (a, m) = self.set_composition(set);
            if m > 0 && !misalignment_rule(a, m) {
                return false;
            }
        }

        let mut block_addrs: Vec<u64> = body.iter().map(|b| b.start_addr).collect();
        block_addrs.sort_unstable();
        block_addrs.dedup();

        self.capture = Some(LsdCapture {
            thread,
            block_addrs,
            window_tags,
            hosting_sets,
        });
        true
    }

    fn window_resident(&self, tag: u64, thread: usize) -> bool {
        let set = self.config.dsb.home_set(tag, thread, self.partitioned());
        self.dsb[set].iter().any(|e| e.tag == tag)
    }

    /// Refresh a resident window: recency and the alignment of the block
    /// that just accessed it (the composition tracks recent access
    /// patterns, so the last accessor wins).
    fn touch_window(&mut self, tag: u64, thread: usize, alignment: Alignment) {
        let seq = self.access_seq;
        let set = self.config.dsb.home_set(tag, thread, self.partitioned());
        if let Some(e) = self.dsb[set].iter_mut().find(|e| e.tag == tag) {
            e.last_access = seq;
            e.alignment = alignment;
        }
    }

    fn fill_window(&mut self, tag: u64, thread: usize, alignment: Alignment) {
        let seq = self.access_seq;
        let set = self.config.dsb.home_set(tag, thread, self.partitioned());
        if let Some(e) = self.dsb[set].iter_mut().find(|e| e.tag == tag) {
            e.last_access = seq;
            e.alignment = alignment;
            return;
        }
        if self.dsb[set].len() >= self.config.dsb.ways {
            // Evict the least recently used way.
            let victim = self.dsb[set]
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.last_access)
                .map(|(i, _)| i)
                .expect("set is non-empty");
            let evicted = self.dsb[set].swap_remove(victim);
            self.counters.dsb_evictions += 1;
            let captured = self
                .capture
                .as_ref()
                .map(|c| c.contains_window(evicted.tag))
                .unwrap_or(false);
            if captured {
                // Inclusivity: losing a captured window kills the loop.
                self.flush_lsd();
            }
        }
        self.dsb[set].push(WindowEntry {
            tag,
            owner: thread,
            alignment,
            last_access: seq,
        });
    }

    /// Probe-and-fill one instruction cache line; returns true on a hit.
    fn touch_l1i_line(&mut self, tag: u64) -> bool {
        let seq = self.access_seq;
        let set = (tag % self.l1i.len() as u64) as usize;
        if let Some(e) = self.l1i[set].iter_mut().find(|e| e.tag == tag) {
            e.last_access = seq;
            return true;
        }
        if self.l1i[set].len() >= self.config.l1i.ways {
            let victim = self.l1i[set]
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.last_access)
                .map(|(i, _)| i)
                .expect("set is non-empty");
            self.l1i[set].swap_remove(victim);
        }
        self.l1i[set].push(LineEntry {
            tag,
            last_access: seq,
        });
        false
    }

    /// Check the containment invariant: every captured window is resident
    /// in the DSB. Intended for tests and fuzzing.
    pub fn check_inclusivity(&self) -> bool {
        match &self.capture {
            None => true,
            Some(c) => c
                .window_tags
                .iter()
                .all(|&tag| self.dsb_window_resident(tag, c.thread)),
        }
    }

    /// Check the occupancy invariant: no set holds more tags than it has
    /// ways.
    pub fn check_occupancy(&self) -> bool {
        self.dsb.iter().all(|set| set.len() <= self.config.dsb.ways)
    }
}

/// The misalignment rule table: for a set whose recently-accessed windows
/// decompose into `aligned` + `misaligned` block placements, is a loop
/// hosted by that set allowed to stream from the LSD?
///
/// The trigger compositions are {5+2}, {6+2}, {3+3}, {4+3}, {5+3}, {7+1}
/// and {0 + four-or-more}; everything else, including all-aligned
/// compositions, is allowed.
pub fn misalignment_rule(aligned: u32, misaligned: u32) -> bool {
    !matches!(
        (aligned, misaligned),
        (5, 2) | (6, 2) | (3, 3) | (4, 3) | (5, 3) | (7, 1)
    ) && !(aligned == 0 && misaligned >= 4)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frontend() -> Frontend {
        Frontend::new(FrontendConfig::default()).unwrap()
    }

    /// Chain of canonical blocks mapping to `set`, strided one DSB round
    /// (1024 bytes) apart, closed into a loop.
    fn chain(count: usize, set: usize, misaligned: &[usize]) -> Vec<MixBlock> {
        let mut blocks = Vec::with_capacity(count);
        for k in 0..count {
            let mut addr = k as u64 * 1024 + set as u64 * 32;
            if misaligned.contains(&k) {
                addr += 16;
            }
            blocks.push(MixBlock::canonical(addr, 0));
        }
        for k in 0..count {
            let next = blocks[(k + 1) % count].start_addr;
            blocks[k].next_addr = next;
        }
        blocks
    }

    #[test]
    fn default_dsb_capacity_is_1536_uops() {
        assert_eq!(DsbGeometry::default().capacity_uops(), 1536);
    }

    #[test]
    fn default_l1i_has_64_sets() {
        assert_eq!(L1iGeometry::default().sets(), 64);
    }

    #[test]
    fn canonical_block_shape() {
        let b = MixBlock::canonical(0, 0);
        assert_eq!(b.uop_count, 5);
        assert_eq!(b.byte_len, 25);
        assert!(b.is_dsb_line_eligible(&DsbGeometry::default()));
        assert!(b.is_aligned());
        assert!(MixBlock::canonical(16, 0).is_misaligned());
        assert_eq!(MixBlock::canonical(8, 0).alignment(32), Alignment::Other);
    }

    #[test]
    fn dsb_set_index_examples() {
        let geo = DsbGeometry::default();
        assert_eq!(dsb_set_index(&geo, 0x0, false, 0), 0);
        assert_eq!(dsb_set_index(&geo, 0x20, false, 0), 1);
        // Oracle: (addr >> 5) mod 32, computed with plain arithmetic.
        assert_eq!(dsb_set_index(&geo, 0x1234, false, 0), (0x1234 / 32) % 32);
        assert_eq!(dsb_set_index(&geo, 0x1234, false, 0), 17);
        // Partitioned: thread base + (addr >> 5) mod 16.
        assert_eq!(dsb_set_index(&geo, 0x20, true, 1), 16 + 1);
        assert_eq!(dsb_set_index(&geo, 0x20, true, 0), 1);
    }

    #[test]
    fn dsb_set_index_matches_bit_oracle_exhaustively() {
        let geo = DsbGeometry::default();
        for addr in 0..(1u64 << 16) {
            assert_eq!(
                dsb_set_index(&geo, addr, false, 0),
                ((addr >> 5) & 31) as usize
            );
        }
    }

    #[test]
    fn l1i_set_index_examples() {
        let geo = L1iGeometry::default();
        assert_eq!(l1i_set_index(&geo, 0x0), 0);
        assert_eq!(l1i_set_index(&geo, 0x40), 1);
        assert_eq!(l1i_set_index(&geo, 0x1234), (0x1234 / 64) % 64);
        assert_eq!(l1i_set_index(&geo, 0x1234), 8);
    }

    #[test]
    fn first_access_goes_through_mite_and_fills() {
        let mut fe = frontend();
        let b = MixBlock::canonical(0, 0);
        let rec = fe.access(0, &b);
        assert_eq!(rec.path, DeliveryPath::Mite);
        assert_eq!(rec.windows_touched, vec![0]);
        assert_eq!(rec.l1i_misses, 1);
        assert_eq!(fe.counters().l1i_misses, 1);
        assert_eq!(fe.dsb_set_occupancy(0), 1);

        // Second access hits the DSB and causes no instruction fetch.
        let rec = fe.access(0, &b);
        assert_eq!(rec.path, DeliveryPath::Dsb);
        assert_eq!(rec.l1i_misses, 0);
    }

    #[test]
    fn ninth_same_set_block_evicts_and_redirects_to_mite() {
        let mut fe = frontend();
        let blocks = chain(9, 3, &[]);
        // Fill eight ways, then revisit so the set serves from the DSB.
        for b in &blocks[..8] {
            fe.access(0, b);
        }
        for b in &blocks[..8] {
            assert_eq!(fe.access(0, b).path, DeliveryPath::Dsb);
        }
        let before = fe.counters();
        let rec = fe.access(0, &blocks[8]);
        assert_eq!(rec.path, DeliveryPath::Mite);
        let after = fe.counters();
        assert_eq!(after.dsb_evictions, before.dsb_evictions + 1);
        assert!(after.dsb_to_mite_switches > before.dsb_to_mite_switches);
        // Cold line for block 9 only; warm reruns stay L1I-clean.
        assert_eq!(after.l1i_misses, before.l1i_misses + 1);
        let rec = fe.access(0, &blocks[8]);
        assert_eq!(rec.l1i_misses, 0);
    }

    #[test]
    fn eight_block_loop_reaches_lsd_steady_state() {
        let mut fe = frontend();
        let blocks = chain(8, 0, &[]);
        fe.run_chain(0, &blocks, 4);
        assert!(fe.lsd_captured());
        let before = fe.counters();
        let recs = fe.run_chain(0, &blocks, 10);
        assert!(recs.iter().all(|r| r.path == DeliveryPath::Lsd));
        let after = fe.counters();
        assert_eq!(after.l1i_misses, before.l1i_misses);
        assert_eq!(after.lsd_uops - before.lsd_uops, 8 * 5 * 10);
    }

    #[test]
    fn nine_block_loop_thrashes_without_l1i_misses() {
        let mut fe = frontend();
        let blocks = chain(9, 0, &[]);
        fe.run_chain(0, &blocks, 3);
        let before = fe.counters();
        fe.run_chain(0, &blocks, 10);
        let after = fe.counters();
        assert!(!fe.lsd_captured());
        assert!(after.dsb_evictions > before.dsb_evictions);
        assert!(after.mite_uops > before.mite_uops);
        assert_eq!(after.l1i_misses, before.l1i_misses, "steady state is L1I-clean");
    }

    #[test]
    fn lsd_disabled_loop_stays_on_dsb() {
        let mut config = FrontendConfig::default();
        config.lsd.enabled = false;
        let mut fe = Frontend::new(config).unwrap();
        let blocks = chain(8, 0, &[]);
        fe.run_chain(0, &blocks, 4);
        assert!(!fe.lsd_captured());
        let recs = fe.run_chain(0, &blocks, 4);
        assert!(recs.iter().all(|r| r.path == DeliveryPath::Dsb));
    }

    #[test]
    fn lsd_try_capture_examples() {
        // Eight aligned canonical blocks, one set: 40 uops, captured.
        let mut fe = frontend();
        let blocks = chain(8, 0, &[]);
        fe.run_chain(0, &blocks, 1); // make windows resident
        assert!(fe.lsd_try_capture(0, &blocks));

        // Thirteen blocks: 65 uops exceeds the 64-uop capacity.
        let mut fe = frontend();
        let blocks = chain(13, 0, &[]);
        fe.run_chain(0, &blocks, 1);
        assert!(!fe.lsd_try_capture(0, &blocks));

        // Four misaligned blocks in one set: rejected by the rule table.
        let mut fe = frontend();
        let blocks = chain(4, 0, &[0, 1, 2, 3]);
        fe.run_chain(0, &blocks, 1);
        assert!(!fe.lsd_try_capture(0, &blocks));
    }

    #[test]
    fn capture_requires_resident_windows() {
        let mut fe = frontend();
        let blocks = chain(4, 0, &[]);
        assert!(!fe.lsd_try_capture(0, &blocks), "cold loop cannot be captured");
    }

    #[test]
    fn misalignment_rule_table() {
        // Trigger compositions.
        for (a, m) in [(5, 2), (6, 2), (3, 3), (4, 3), (5, 3), (7, 1), (0, 4), (0, 7)] {
            assert!(!misalignment_rule(a, m), "{a}+{m} must flush");
        }
        // All-aligned always allowed.
        for a in 0..=12 {
            assert!(misalignment_rule(a, 0));
        }
        // Unlisted compositions default to allowed.
        for (a, m) in [(2, 2), (1, 3), (6, 3), (4, 2), (5, 1), (0, 3), (8, 1)] {
            assert!(misalignment_rule(a, m), "{a}+{m} defaults to allowed");
        }
    }

    #[test]
    fn misaligned_blocks_span_two_windows() {
        let mut fe = frontend();
        let b = MixBlock::canonical(16, 16);
        let rec = fe.access(0, &b);
        assert_eq!(rec.windows_touched, vec![0, 1]);
        assert_eq!(fe.dsb_set_occupancy(0), 1);
        assert_eq!(fe.dsb_set_occupancy(1), 1);
    }

    #[test]
    fn misaligned_coresidents_flush_captured_loop() {
        let mut fe = frontend();
        let own = chain(5, 7, &[]);
        fe.run_chain(0, &own, 4);
        assert!(fe.lsd_captured());
        // Two misaligned blocks land in the same set: {5 aligned + 2
        // misaligned} is a trigger composition.
        let intruding = chain(7, 7, &[5, 6]);
        fe.access(0, &intruding[5]);
        assert!(fe.lsd_captured(), "{{5+1}} is not a trigger");
        fe.access(0, &intruding[6]);
        assert!(!fe.lsd_captured(), "{{5+2}} flushes the loop");
    }

    #[test]
    fn the_eighth_access_decides_the_path() {
        // Seven aligned blocks plus an aligned eighth keep the loop in the
        // LSD; a misaligned eighth flushes it.
        let mut fe = frontend();
        let aligned = chain(8, 2, &[]);
        fe.run_chain(0, &aligned, 4);
        assert!(fe.lsd_captured());

        let mut fe = frontend();
        let mixed = chain(8, 2, &[7]);
        fe.run_chain(0, &mixed, 4);
        assert!(!fe.lsd_captured(), "{{7+1}} flushes");
    }

    #[test]
    fn partition_switch_evicts_out_of_half_windows() {
        let mut fe = frontend();
        // Thread-0 blocks in sets 20..28: outside the low half.
        for set in 20..28u64 {
            fe.access(0, &MixBlock::canonical(set * 32, 0));
        }
        for set in 20..28 {
            assert_eq!(fe.dsb_set_occupancy(set), 1);
        }
        let before = fe.counters().dsb_evictions;
        fe.set_partition_mode(2).unwrap();
        assert_eq!(fe.counters().dsb_evictions, before + 8);
        for set in 20..28 {
            assert_eq!(fe.dsb_set_occupancy(set), 0);
        }
    }

    #[test]
    fn partition_switch_flushes_captured_out_of_half_loop() {
        let mut fe = frontend();
        let blocks = chain(4, 20, &[]);
        fe.run_chain(0, &blocks, 4);
        assert!(fe.lsd_captured());
        let flushes = fe.counters().lsd_flushes;
        fe.set_partition_mode(2).unwrap();
        assert!(!fe.lsd_captured());
        assert_eq!(fe.counters().lsd_flushes, flushes + 1);
    }

    #[test]
    fn relaxing_partition_evicts_nothing() {
        let mut fe = frontend();
        fe.set_partition_mode(2).unwrap();
        fe.access(0, &MixBlock::canonical(0, 0));
        fe.access(1, &MixBlock::canonical(0x40, 0x40));
        let before = fe.counters().dsb_evictions;
        fe.set_partition_mode(1).unwrap();
        assert_eq!(fe.counters().dsb_evictions, before);
    }

    #[test]
    fn partition_switch_with_empty_dsb_evicts_nothing() {
        let mut fe = frontend();
        fe.set_partition_mode(2).unwrap();
        assert_eq!(fe.counters().dsb_evictions, 0);
    }

    #[test]
    fn partitioned_threads_do_not_share_sets() {
        let mut fe = frontend();
        fe.set_partition_mode(2).unwrap();
        fe.access(0, &MixBlock::canonical(0x20, 0x20));
        fe.access(1, &MixBlock::canonical(0x20, 0x20));
        assert_eq!(fe.dsb_set_occupancy(1), 1);
        assert_eq!(fe.dsb_set_occupancy(17), 1);
    }

    #[test]
    fn lcp_blocks_always_take_the_legacy_path() {
        let mut fe = frontend();
        let b = MixBlock::lcp_interleaved(0, 16, 0);
        for _ in 0..6 {
            assert_eq!(fe.access(0, &b).path, DeliveryPath::Mite);
        }
        assert_eq!(fe.counters().lcp_stall_cycles, 6 * 16 * 3);
    }

    #[test]
    fn counters_are_monotone_and_state_deterministic() {
        let run = || {
            let mut fe = frontend();
            let blocks = chain(9, 5, &[2]);
            let mut prev = Counters::default();
            for _ in 0..20 {
                for b in &blocks {
                    fe.access(0, b);
                    let c = fe.counters();
                    assert!(c.lsd_uops >= prev.lsd_uops);
                    assert!(c.dsb_evictions >= prev.dsb_evictions);
                    assert!(c.lsd_flushes >= prev.lsd_flushes);
                    assert!(c.l1i_misses >= prev.l1i_misses);
                    prev = c;
                }
            }
            fe
        };
        assert_eq!(run(), run(), "same sequence, same state");
    }

    #[test]
    fn counters_csv_row_has_one_column_per_counter() {
        let header_cols = Counters::CSV_HEADER.split(',').count();
        let row_cols = Counters::default().csv_row().split(',').count();
        assert_eq!(header_cols, row_cols);
        assert_eq!(header_cols, 9);
    }
}
