//! Two frontend-based classifiers.
//!
//! Patch detection observes whether a loop that fits the loop buffer
//! actually enjoys LSD delivery: if its steady-state per-block cost sits
//! at the DSB class instead, the buffer has been disabled (a microcode
//! difference visible purely through timing and energy).
//!
//! Application fingerprinting runs an attacker nop loop that is too big
//! for the loop buffer but fits the micro-op cache, co-resident with a
//! victim on the sibling thread. DSB and LSD are partitioned between the
//! threads; the legacy decoder is not, so the victim's decode pressure
//! modulates the attacker's own IPC. Sampling that IPC at a low rate and
//! comparing traces by Euclidean distance identifies the victim workload.

use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::cost::{cost_of, CostAccumulator, CostModel};
use crate::error::{Error, Result};
use crate::frontend::{DeliveryPath, Frontend, FrontendConfig, MixBlock};

/// Demand a victim pushes through the shared decoder, per sampling
/// interval.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimTrace {
    pub name: String,
    pub interval_s: f64,
    pub demand_uops: Vec<f64>,
}

impl VictimTrace {
    pub fn new(name: impl Into<String>, interval_s: f64, demand_uops: Vec<f64>) -> Result<Self> {
        if interval_s <= 0.0 {
            return Err(Error::invalid("victim interval must be positive"));
        }
        if demand_uops.is_empty() {
            return Err(Error::invalid("victim trace must be non-empty"));
        }
        if demand_uops.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::invalid("victim demands must be finite and >= 0"));
        }
        Ok(VictimTrace {
            name: name.into(),
            interval_s,
            demand_uops,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.interval_s * self.demand_uops.len() as f64
    }

    /// Victim decode demand rate (micro-ops per second) at time `t`.
    pub fn demand_rate_at(&self, t: f64) -> f64 {
        let idx = ((t / self.interval_s) as usize).min(self.demand_uops.len() - 1);
        self.demand_uops[idx] / self.interval_s
    }

    pub const CSV_HEADER: &'static str = "interval_s,demand_uops";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for d in &self.demand_uops {
            out.push_str(&format!("{},{}\n", self.interval_s, d));
        }
        out
    }

    /// Parse the `interval_s,demand_uops` format; the interval must be
    /// constant across rows.
    pub fn from_csv(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == Self::CSV_HEADER => {}
            _ => {
                return Err(Error::Config {
                    line: 1,
                    msg: format!("victim trace must start with '{}'", Self::CSV_HEADER),
                })
            }
        }
        let mut interval_s = None;
        let mut demands = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (a, b) = line.split_once(',').ok_or(Error::Config {
                line: i + 1,
                msg: "expected 'interval_s,demand_uops'".into(),
            })?;
            let iv: f64 = a.trim().parse().map_err(|_| Error::Config {
                line: i + 1,
                msg: "bad interval".into(),
            })?;
            let demand: f64 = b.trim().parse().map_err(|_| Error::Config {
                line: i + 1,
                msg: "bad demand".into(),
            })?;
            match interval_s {
                None => interval_s = Some(iv),
                Some(prev) if prev == iv => {}
                Some(_) => {
                    return Err(Error::Config {
                        line: i + 1,
                        msg: "interval must be constant".into(),
                    })
                }
            }
            demands.push(demand);
        }
        let interval_s = interval_s.ok_or(Error::Config {
            line: 2,
            msg: "no samples".into(),
        })?;
        VictimTrace::new(name, interval_s, demands)
    }
}

/// Attacker IPC samples at a fixed sampling frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct IpcTrace {
    pub samples: Vec<f64>,
    pub sampling_hz: f64,
}

/// Euclidean distance between two equally long IPC traces.
pub fn euclidean_distance(a: &IpcTrace, b: &IpcTrace) -> Result<f64> {
    if a.samples.len() != b.samples.len() {
        return Err(Error::TraceLengthMismatch(a.samples.len(), b.samples.len()));
    }
    Ok(a.samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Contention and sampling parameters of the fingerprinting side channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingerprintModel {
    /// Shared decoder capacity, micro-ops per second. The attacker's IPC
    /// scales by cap / (cap + victim demand rate).
    pub mite_capacity_uops_per_s: f64,
    /// Relative Gaussian noise on each IPC sample.
    pub ipc_rel_noise: f64,
    /// Attacker self-measurement frequency.
    pub sampling_hz: f64,
}

impl Default for FingerprintModel {
    fn default() -> Self {
        FingerprintModel {
            mite_capacity_uops_per_s: 1.0e9,
            ipc_rel_noise: 0.01,
            sampling_hz: 10.0,
        }
    }
}

impl FingerprintModel {
    pub fn validate(&self) -> Result<()> {
        if self.mite_capacity_uops_per_s <= 0.0 {
            return Err(Error::invalid("decoder capacity must be positive"));
        }
        if self.ipc_rel_noise < 0.0 {
            return Err(Error::invalid("IPC noise must be >= 0"));
        }
        if self.sampling_hz <= 0.0 {
            return Err(Error::invalid("sampling frequency must be positive"));
        }
        Ok(())
    }
}

/// The attacker loop: 100 single-uop nops packed into two instruction
/// cache lines — too many micro-ops for the loop buffer, small enough to
/// stay resident in the micro-op cache.
fn attacker_loop(window_bytes: u32) -> Vec<MixBlock> {
    let base = 1u64 << 15; // line-aligned, away from other experiments
    let _ = window_bytes;
    let count = 20;
    let mut blocks: Vec<MixBlock> = (0..count)
        .map(|i| MixBlock::plain(base + i as u64 * 6, 6, 5, 0))
        .collect();
    for i in 0..count {
        blocks[i].next_addr = blocks[(i + 1) % count].start_addr;
    }
    blocks
}

/// Structural facts about the attacker loop established by simulation.
#[derive(Debug, Clone, Copy)]
pub struct AttackerBaseline {
    /// Steady-state IPC with an idle victim.
    pub ipc: f64,
    /// Instruction-cache lines the loop occupies.
    pub l1i_lines: u64,
    /// Whether any steady-state delivery left the micro-op cache path.
    pub stays_on_dsb: bool,
}

/// Run the attacker loop through the partitioned frontend until steady
/// state and derive its baseline IPC from the cost model's DSB path.
pub fn attacker_baseline(fe_config: &FrontendConfig, model: &CostModel) -> Result<AttackerBaseline> {
    model.validate()?;
    let mut fe = Frontend::new(*fe_config)?;
    // The fingerprinting scenario always runs with two active threads:
    // DSB and LSD partitioned, only the decoder shared.
    fe.set_partition_mode(2)?;
    let blocks = attacker_loop(fe_config.dsb.window_bytes);
    // Warm up.
    for _ in 0..4 {
        for b in &blocks {
            fe.access(0, b);
        }
    }
    let misses_before = fe.counters().l1i_misses;
    let noiseless = CostModel {
        noise_sigma: 0.0,
        ..*model
    };
    let mut acc = CostAccumulator::new();
    let mut uops = 0u64;
    let mut stays_on_dsb = true;
    let mut throwaway = crate::rng::stream(0, "baseline");
    for _ in 0..8 {
        for b in &blocks {
            let rec = fe.access(0, b);
            if rec.path != DeliveryPath::Dsb {
                stays_on_dsb = false;
            }
            uops += u64::from(rec.uop_count);
            acc.add(&rec, &noiseless, &mut throwaway);
        }
    }
    if fe.counters().l1i_misses != misses_before {
        stays_on_dsb = false;
    }
    if fe.lsd_captured() {
        return Err(Error::invalid("attacker loop must not fit the loop buffer"));
    }
    let span = blocks.last().unwrap().start_addr + 6 - blocks[0].start_addr;
    let l1i_lines = span / u64::from(fe_config.l1i.line_bytes) + 1;
    Ok(AttackerBaseline {
        ipc: uops as f64 / acc.total_cycles as f64,
        l1i_lines,
        stays_on_dsb,
    })
}

/// Simulate the attacker co-running with `victim` and sample its IPC at
/// the model's sampling frequency. Contention enters through the shared
/// decoder only: per interval, achieved IPC = baseline × cap / (cap +
/// victim demand rate), with relative Gaussian noise per sample.
pub fn attacker_ipc_run(
    victim: &VictimTrace,
    fe_config: &FrontendConfig,
    model: &CostModel,
    fp: &FingerprintModel,
    rng: &mut ChaCha8Rng,
) -> Result<IpcTrace> {
    fp.validate()?;
    let baseline = attacker_baseline(fe_config, model)?;
    let n = (victim.duration_s() * fp.sampling_hz).round() as usize;
    if n == 0 {
        return Err(Error::invalid("victim trace shorter than one sample"));
    }
    let cap = fp.mite_capacity_uops_per_s;
    let samples = (0..n)
        .map(|j| {
            let t = j as f64 / fp.sampling_hz;
            let factor = cap / (cap + victim.demand_rate_at(t));
            let noise = if fp.ipc_rel_noise > 0.0 {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                1.0 + fp.ipc_rel_noise * z
            } else {
                1.0
            };
            (baseline.ipc * factor * noise).max(0.0)
        })
        .collect();
    Ok(IpcTrace {
        samples,
        sampling_hz: fp.sampling_hz,
    })
}

/// Reference traces of one victim.
#[derive(Debug, Clone)]
pub struct LabeledTraces {
    pub label: String,
    pub traces: Vec<IpcTrace>,
}

/// Nearest-centroid classification plus the intra/inter distance summary.
#[derive(Debug, Clone)]
pub struct Classification {
    pub label: String,
    pub intra_mean: f64,
    pub inter_mean: f64,
}

/// Classify `probe` against labeled reference traces by nearest centroid.
/// `intra_mean` averages within-label pairwise distances (0 when every
/// label has a single trace), `inter_mean` averages cross-label pairwise
/// distances.
pub fn classify(reference: &[LabeledTraces], probe: &IpcTrace) -> Result<Classification> {
    if reference.len() < 2 {
        return Err(Error::invalid("need at least two labels to classify"));
    }
    for group in reference {
        if group.traces.is_empty() {
            return Err(Error::invalid(format!("label '{}' has no traces", group.label)));
        }
    }

    let centroid = |traces: &[IpcTrace]| -> IpcTrace {
        let len = traces[0].samples.len();
        let mut mean = vec![0.0; len];
        for t in traces {
            for (m, s) in mean.iter_mut().zip(&t.samples) {
                *m += s;
            }
        }
        for m in &mut mean {
            *m /= traces.len() as f64;
        }
        IpcTrace {
            samples: mean,
            sampling_hz: traces[0].sampling_hz,
        }
    };

    let mut best: Option<(f64, &str)> = None;
    for group in reference {
        let d = euclidean_distance(probe, &centroid(&group.traces))?;
        let better = match best {
            None => true,
            Some((bd, bl)) => d < bd || (d == bd && group.label.as_str() < bl),
        };
        if better {
            best = Some((d, &group.label));
        }
    }

    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for (gi, ga) in reference.iter().enumerate() {
        for (i, a) in ga.traces.iter().enumerate() {
            for b in &ga.traces[i + 1..] {
                intra.push(euclidean_distance(a, b)?);
            }
            for gb in &reference[gi + 1..] {
                for b in &gb.traces {
                    inter.push(euclidean_distance(a, b)?);
                }
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };

    Ok(Classification {
        label: best.expect("at least two labels").1.to_string(),
        intra_mean: mean(&intra),
        inter_mean: mean(&inter),
    })
}

/// Synthetic victims with distinct periodic decode-demand waveforms,
/// stand-ins for real workloads with layered compute phases.
pub fn synthetic_victims(count: usize, intervals: usize, interval_s: f64) -> Vec<VictimTrace> {
    (0..count)
        .map(|j| {
            let period = 3 + 2 * j;
            let amplitude = 4.0e7 * (j + 1) as f64;
            let demands = (0..intervals)
                .map(|i| {
                    let phase = (i / period) % 2;
                    let base = 0.25 * amplitude;
                    base + phase as f64 * amplitude
                })
                .collect();
            VictimTrace::new(format!("victim{j}"), interval_s, demands).expect("valid synthetic")
        })
        .collect()
}

/// Patch-detection verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchVerdict {
    LsdEnabled,
    LsdDisabled,
    Inconclusive,
}

impl PatchVerdict {
    pub fn label(&self) -> &'static str {
        match self {
            PatchVerdict::LsdEnabled => "lsd_enabled",
            PatchVerdict::LsdDisabled => "lsd_disabled",
            PatchVerdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PatchReport {
    pub verdict: PatchVerdict,
    /// Per-block cycle gap between the over-capacity and under-capacity
    /// loops (positive: the small loop is faster).
    pub timing_gap: f64,
    /// Per-uop energy gap between the two loops.
    pub energy_gap: f64,
    pub trials: u32,
}

/// Detect whether the loop buffer is enabled by timing a same-set loop
/// below LSD capacity against one above it.
///
/// Each trial classifies the small loop's steady-state per-block cost to
/// the nearer of the LSD and DSB cost classes; a trial is conclusive only
/// when the estimate lands within half the class gap of exactly one
/// class. All trials must agree for a verdict.
pub fn detect_patch(
    fe_config: &FrontendConfig,
    model: &CostModel,
    trials: u32,
    rng: &mut ChaCha8Rng,
) -> Result<PatchReport> {
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    model.validate()?;

    let geo = &fe_config.dsb;
    let below = crate::channel::build_block_chain_at(geo, 0, 0, geo.ways.min(12), |_| false)?;
    // Above capacity by both micro-op count and way count.
    let above_count = (geo.ways + 5).max((fe_config.lsd.capacity_uops as usize / 5) + 1);
    let above = crate::channel::build_block_chain_at(geo, 0, 32, above_count, |_| false)?;

    let measure = |chain: &[MixBlock], rng: &mut ChaCha8Rng| -> Result<(f64, f64)> {
        let mut fe = Frontend::new(*fe_config)?;
        // Warm to steady state, then measure.
        for _ in 0..6 {
            for b in chain {
                fe.access(0, b);
            }
        }
        let mut prev = None;
        let mut acc = CostAccumulator::new();
        let mut uops = 0u64;
        let mut blocks = 0u64;
        for _ in 0..10 {
            for b in chain {
                let rec = fe.access(0, b);
                let _ = cost_of(&rec, prev, model, rng);
                prev = Some(rec.path);
                uops += u64::from(rec.uop_count);
                blocks += 1;
                acc.add(&rec, model, rng);
            }
        }
        Ok((
            acc.total_cycles as f64 / blocks as f64,
            acc.total_energy / uops as f64,
        ))
    };

    let lsd_class = f64::from(model.cycles_lsd);
    let dsb_class = f64::from(model.cycles_dsb);
    let margin = (dsb_class - lsd_class).abs() / 2.0;

    let mut verdicts = Vec::with_capacity(trials as usize);
    let mut timing_gaps = Vec::with_capacity(trials as usize);
    let mut energy_gaps = Vec::with_capacity(trials as usize);
    for _ in 0..trials {
        let (below_cycles, below_energy) = measure(&below, rng)?;
        let (above_cycles, above_energy) = measure(&above, rng)?;
        timing_gaps.push(above_cycles - below_cycles);
        energy_gaps.push(above_energy - below_energy);
        let near_lsd = (below_cycles - lsd_class).abs() < margin;
        let near_dsb = (below_cycles - dsb_class).abs() < margin;
        verdicts.push(match (near_lsd, near_dsb) {
            (true, false) => PatchVerdict::LsdEnabled,
            (false, true) => PatchVerdict::LsdDisabled,
            _ => PatchVerdict::Inconclusive,
        });
    }

    let first = verdicts[0];
    let verdict = if first != PatchVerdict::Inconclusive && verdicts.iter().all(|&v| v == first) {
        first
    } else {
        PatchVerdict::Inconclusive
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(PatchReport {
        verdict,
        timing_gap: mean(&timing_gaps),
        energy_gap: mean(&energy_gaps),
        trials,
    })
}
