//! Cycle and energy costs of frontend deliveries.
//!
//! Costs are abstract model constants, not measurements of any particular
//! part: only the orderings matter (loop buffer ≤ micro-op cache < legacy
//! decoder for cycles, strictly increasing for energy per micro-op), and
//! every constant can be overridden from the experiment config.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frontend::{DeliveryPath, DeliveryRecord};

/// Per-path cycle/energy constants, switch penalties, prefix stalls and
/// measurement noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Cycles to deliver one block from each path.
    pub cycles_lsd: u32,
    pub cycles_dsb: u32,
    pub cycles_mite: u32,
    /// One-off penalty when delivery falls from the loop buffer to the
    /// micro-op cache, and from the micro-op cache to the legacy decoder.
    /// A direct LSD→MITE transition pays both.
    pub penalty_lsd_to_dsb: u32,
    pub penalty_dsb_to_mite: u32,
    /// Pre-decode stall per LCP instruction that follows a non-LCP one.
    pub lcp_stall: u32,
    /// Energy units per micro-op delivered from each path.
    pub energy_lsd: f64,
    pub energy_dsb: f64,
    pub energy_mite: f64,
    /// Gaussian noise (std dev, cycles) added to every block cost.
    pub noise_sigma: f64,
    /// Core frequency, for converting cycles to seconds.
    pub core_freq_hz: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            cycles_lsd: 5,
            cycles_dsb: 7,
            cycles_mite: 12,
            penalty_lsd_to_dsb: 6,
            penalty_dsb_to_mite: 10,
            lcp_stall: 3,
            energy_lsd: 1.0,
            energy_dsb: 2.0,
            energy_mite: 5.0,
            noise_sigma: 0.0,
            core_freq_hz: 3.0e9,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.cycles_lsd <= self.cycles_dsb && self.cycles_dsb < self.cycles_mite) {
            return Err(Error::invalid(
                "cycle ordering must satisfy lsd <= dsb < mite",
            ));
        }
        if !(self.energy_lsd < self.energy_dsb && self.energy_dsb < self.energy_mite) {
            return Err(Error::invalid(
                "energy ordering must satisfy lsd < dsb < mite",
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if self.core_freq_hz <= 0.0 {
            return Err(Error::invalid("core frequency must be positive"));
        }
        Ok(())
    }

    pub fn cycles_for(&self, path: DeliveryPath) -> u32 {
        match path {
            DeliveryPath::Lsd => self.cycles_lsd,
            DeliveryPath::Dsb => self.cycles_dsb,
            DeliveryPath::Mite => self.cycles_mite,
        }
    }

    pub fn energy_per_uop(&self, path: DeliveryPath) -> f64 {
        match path {
            DeliveryPath::Lsd => self.energy_lsd,
            DeliveryPath::Dsb => self.energy_dsb,
            DeliveryPath::Mite => self.energy_mite,
        }
    }

    fn switch_penalty(&self, prev: Option<DeliveryPath>, path: DeliveryPath) -> u32 {
        match (prev, path) {
            (Some(DeliveryPath::Lsd), DeliveryPath::Dsb) => self.penalty_lsd_to_dsb,
            (Some(DeliveryPath::Dsb), DeliveryPath::Mite) => self.penalty_dsb_to_mite,
            (Some(DeliveryPath::Lsd), DeliveryPath::Mite) => {
                self.penalty_lsd_to_dsb + self.penalty_dsb_to_mite
            }
            _ => 0,
        }
    }
}

/// Cycles to deliver one block, given the previous block's path.
///
/// cycles = path base + downward switch penalty + stall per stalled LCP
/// instruction + Gaussian noise rounded to whole cycles, floored at 1.
pub fn cost_of<R: Rng>(
    record: &DeliveryRecord,
    prev_path: Option<DeliveryPath>,
    model: &CostModel,
    rng: &mut R,
) -> u64 {
    let base = u64::from(model.cycles_for(record.path))
        + u64::from(model.switch_penalty(prev_path, record.path))
        + u64::from(record.lcp_stall_sites) * u64::from(model.lcp_stall);
    if model.noise_sigma == 0.0 {
        return base.max(1);
    }
    let normal = Normal::new(0.0, model.noise_sigma).expect("sigma validated non-negative");
    let noisy = base as f64 + normal.sample(rng);
    (noisy.round().max(1.0)) as u64
}

/// Streaming accumulator over a delivery sequence: tracks the previous
/// path for switch penalties and sums cycles and energy.
#[derive(Debug, Clone, Copy)]
pub struct CostAccumulator {
    prev_path: Option<DeliveryPath>,
    pub total_cycles: u64,
    pub total_energy: f64,
}

impl CostAccumulator {
    pub fn new() -> Self {
        CostAccumulator {
            prev_path: None,
            total_cycles: 0,
            total_energy: 0.0,
        }
    }

    /// Add one delivery; returns its cycle cost.
    pub fn add<R: Rng>(&mut self, record: &DeliveryRecord, model: &CostModel, rng: &mut R) -> u64 {
        let cycles = cost_of(record, self.prev_path, model, rng);
        self.prev_path = Some(record.path);
        self.total_cycles += cycles;
        self.total_energy += f64::from(record.uop_count) * model.energy_per_uop(record.path);
        cycles
    }
}

impl Default for CostAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Total cycles and energy of a delivery sequence. Energy accumulation is
/// noise-free; noise affects cycles only.
pub fn measure_sequence<R: Rng>(
    records: &[DeliveryRecord],
    model: &CostModel,
    rng: &mut R,
) -> (u64, f64) {
    let mut acc = CostAccumulator::new();
    for r in records {
        acc.add(r, model, rng);
    }
    (acc.total_cycles, acc.total_energy)
}

/// What a trace sample measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimensionTag {
    Cycles,
    Energy,
    Ipc,
}

/// One time-series sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub index: usize,
    pub value: f64,
    pub timestamp_s: f64,
    pub dimension: DimensionTag,
}

/// Default energy-counter update interval: the counter refreshes at about
/// 20 kHz, so readers between updates see the previous boundary value.
pub const RAPL_UPDATE_INTERVAL_S: f64 = 1.0 / 20_000.0;

/// Re-sample a cumulative energy trace the way a rate-limited energy
/// counter exposes it: the value returned for time `t` is the trace value
/// at the last update boundary at or before `t`. A step between two
/// boundaries is invisible until the next boundary.
pub fn rapl_sample(trace: &[TraceSample], update_interval_s: f64) -> Vec<TraceSample> {
    assert!(update_interval_s > 0.0, "update interval must be positive");
    trace
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let boundary = (s.timestamp_s / update_interval_s).floor() * update_interval_s;
            TraceSample {
                index,
                value: counter_value_at(trace, boundary),
                timestamp_s: s.timestamp_s,
                dimension: DimensionTag::Energy,
            }
        })
        .collect()
}

/// Value of the cumulative counter at time `t`: the last trace sample at
/// or before `t` (zero-order hold), 0 before the first sample.
pub fn counter_value_at(trace: &[TraceSample], t: f64) -> f64 {
    let mut value = 0.0;
    for s in trace {
        if s.timestamp_s <= t {
            value = s.value;
        } else {
            break;
        }
    }
    value
}

/// Histogram of per-block delivery times for each path, the shape used to
/// show the path timing separation.
#[derive(Debug, Clone)]
pub struct PathHistogram {
    pub bin_width: u64,
    /// (bin_low, bin_high, count, path label) rows.
    pub rows: Vec<(u64, u64, u64, &'static str)>,
}

impl PathHistogram {
    /// Sample `samples_per_path` per-block costs for each path (steady
    /// state: previous block on the same path) and bin them.
    pub fn sample<R: Rng>(model: &CostModel, samples_per_path: usize, rng: &mut R) -> Self {
        use std::collections::BTreeMap;
        let mut counts: BTreeMap<(u64, &'static str), u64> = BTreeMap::new();
        let bin_width = 1u64;
        for path in [DeliveryPath::Lsd, DeliveryPath::Dsb, DeliveryPath::Mite] {
            let record = DeliveryRecord {
                path,
                uop_count: 5,
                lcp_count: 0,
                lcp_stall_sites: 0,
                windows_touched: vec![0],
                l1i_misses: 0,
            };
            for _ in 0..samples_per_path {
                let c = cost_of(&record, Some(path), model, rng);
                *counts.entry((c / bin_width, path.label())).or_insert(0) += 1;
            }
        }
        let rows = counts
            .into_iter()
            .map(|((bin, label), count)| (bin * bin_width, (bin + 1) * bin_width, count, label))
            .collect();
        PathHistogram { bin_width, rows }
    }

    pub const CSV_HEADER: &'static str = "bin_low,bin_high,count,path_label";

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|(lo, hi, count, label)| format!("{lo},{hi},{count},{label}"))
            .collect()
    }

    /// Mean sampled cost per path label.
    pub fn mean(&self, label: &str) -> f64 {
        let mut total = 0u64;
        let mut count = 0u64;
        for (lo, _, c, l) in &self.rows {
            if *l == label {
                total += lo * c;
                count += c;
            }
        }
        if count == 0 {
            0.0
        } else {
            total as f64 / count as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn record(path: DeliveryPath) -> DeliveryRecord {
        DeliveryRecord {
            path,
            uop_count: 5,
            lcp_count: 0,
            lcp_stall_sites: 0,
            windows_touched: vec![0],
            l1i_misses: 0,
        }
    }

    #[test]
    fn default_model_is_valid() {
        CostModel::default().validate().unwrap();
    }

    #[test]
    fn ordering_violations_are_rejected() {
        let mut m = CostModel::default();
        m.cycles_lsd = 8;
        assert!(m.validate().is_err());
        let mut m = CostModel::default();
        m.energy_mite = 0.5;
        assert!(m.validate().is_err());
    }

    #[test]
    fn lsd_block_after_lsd_costs_base_cycles() {
        let model = CostModel::default();
        let mut r = rng::stream(0, "t");
        let c = cost_of(&record(DeliveryPath::Lsd), Some(DeliveryPath::Lsd), &model, &mut r);
        assert_eq!(c, 5);
    }

    #[test]
    fn dsb_block_after_lsd_pays_the_switch_penalty() {
        let model = CostModel {
            penalty_lsd_to_dsb: 6,
            ..CostModel::default()
        };
        let mut r = rng::stream(0, "t");
        let c = cost_of(&record(DeliveryPath::Dsb), Some(DeliveryPath::Lsd), &model, &mut r);
        assert_eq!(c, 7 + 6);
    }

    #[test]
    fn lsd_to_mite_pays_both_penalties() {
        let model = CostModel::default();
        let mut r = rng::stream(0, "t");
        let c = cost_of(&record(DeliveryPath::Mite), Some(DeliveryPath::Lsd), &model, &mut r);
        assert_eq!(c, 12 + 6 + 10);
    }

    #[test]
    fn mixed_issue_lcp_block_accumulates_stalls() {
        // 16 LCP instructions, each behind a non-LCP one: 12 + 16*3 = 60.
        let model = CostModel::default();
        let mut r = rng::stream(0, "t");
        let rec = DeliveryRecord {
            path: DeliveryPath::Mite,
            uop_count: 32,
            lcp_count: 16,
            lcp_stall_sites: 16,
            windows_touched: vec![0, 1, 2, 3, 4],
            l1i_misses: 0,
        };
        let c = cost_of(&rec, Some(DeliveryPath::Mite), &model, &mut r);
        assert_eq!(c, 60);
    }

    #[test]
    fn measure_sequence_of_nothing_is_zero() {
        let model = CostModel::default();
        let mut r = rng::stream(0, "t");
        assert_eq!(measure_sequence(&[], &model, &mut r), (0, 0.0));
    }

    #[test]
    fn measure_sequence_matches_summation_oracle() {
        // Eight LSD blocks of 5 uops: 8*5 cycles, 40 * energy_lsd.
        let model = CostModel::default();
        let records: Vec<_> = (0..8).map(|_| record(DeliveryPath::Lsd)).collect();
        let mut r = rng::stream(0, "t");
        let (cycles, energy) = measure_sequence(&records, &model, &mut r);
        assert_eq!(cycles, 40);
        assert!((energy - 40.0 * model.energy_lsd).abs() < 1e-12);

        // Independent one-line oracle over a mixed sequence.
        let mixed = vec![
            record(DeliveryPath::Lsd),
            record(DeliveryPath::Dsb),
            record(DeliveryPath::Mite),
            record(DeliveryPath::Dsb),
        ];
        let mut r = rng::stream(0, "t");
        let (cycles, energy) = measure_sequence(&mixed, &model, &mut r);
        let oracle_cycles = 5 + (7 + 6) + (12 + 10) + 7;
        assert_eq!(cycles, oracle_cycles);
        let oracle_energy = 5.0 * (1.0 + 2.0 + 5.0 + 2.0);
        assert!((energy - oracle_energy).abs() < 1e-12);
    }

    #[test]
    fn noisy_measurement_is_reproducible_per_seed() {
        let model = CostModel {
            noise_sigma: 2.0,
            ..CostModel::default()
        };
        let records: Vec<_> = (0..8).map(|_| record(DeliveryPath::Lsd)).collect();
        let run = || {
            let mut r = rng::stream(99, "noise");
            measure_sequence(&records, &model, &mut r)
        };
        let (c1, e1) = run();
        let (c2, e2) = run();
        assert_eq!(c1, c2);
        assert_eq!(e1, e2);
        // Energy never sees the noise.
        assert!((e1 - 40.0).abs() < 1e-12);
    }

    #[test]
    fn energy_is_invariant_to_noise_sigma() {
        let records: Vec<_> = (0..6).map(|_| record(DeliveryPath::Mite)).collect();
        let quiet = CostModel::default();
        let loud = CostModel {
            noise_sigma: 50.0,
            ..CostModel::default()
        };
        let mut r1 = rng::stream(1, "a");
        let mut r2 = rng::stream(2, "b");
        let (_, e_quiet) = measure_sequence(&records, &quiet, &mut r1);
        let (_, e_loud) = measure_sequence(&records, &loud, &mut r2);
        assert_eq!(e_quiet, e_loud);
    }

    #[test]
    fn rapl_reader_sees_the_last_boundary_value() {
        let dt = RAPL_UPDATE_INTERVAL_S;
        // Constant-rate accrual sampled densely.
        let trace: Vec<TraceSample> = (0..200)
            .map(|i| TraceSample {
                index: i,
                value: i as f64, // 1 unit per tick
                timestamp_s: i as f64 * (dt / 100.0),
                dimension: DimensionTag::Energy,
            })
            .collect();
        // Reads inside the first interval return the t=0 boundary value.
        assert_eq!(counter_value_at(&trace, 0.0), 0.0);
        let quantized = rapl_sample(&trace, dt);
        let at = |t: f64| {
            quantized
                .iter()
                .zip(&trace)
                .find(|(_, raw)| (raw.timestamp_s - t).abs() < 1e-12)
                .map(|(q, _)| q.value)
                .unwrap()
        };
        assert_eq!(at(0.4 * dt), 0.0);
        assert_eq!(at(0.9 * dt), 0.0);
        // A read at 1.5 intervals sees the 1.0-interval boundary value.
        assert_eq!(at(1.5 * dt), 100.0);
    }

    #[test]
    fn rapl_hides_a_mid_interval_step_until_the_next_boundary() {
        let dt = 1.0;
        let trace = vec![
            TraceSample { index: 0, value: 0.0, timestamp_s: 0.0, dimension: DimensionTag::Energy },
            TraceSample { index: 1, value: 100.0, timestamp_s: 0.5, dimension: DimensionTag::Energy },
            TraceSample { index: 2, value: 100.0, timestamp_s: 0.9, dimension: DimensionTag::Energy },
            TraceSample { index: 3, value: 100.0, timestamp_s: 1.2, dimension: DimensionTag::Energy },
        ];
        let q = rapl_sample(&trace, dt);
        // Replay oracle: quantize each read time by hand.
        for (sample, raw) in q.iter().zip(&trace) {
            let boundary = (raw.timestamp_s / dt).floor() * dt;
            assert_eq!(sample.value, counter_value_at(&trace, boundary));
        }
        assert_eq!(q[1].value, 0.0, "step at t=0.5 invisible at t=0.5");
        assert_eq!(q[2].value, 0.0, "still invisible at t=0.9");
        assert_eq!(q[3].value, 100.0, "visible from the t=1.0 boundary");
    }

    #[test]
    fn noiseless_histogram_is_three_ordered_spikes() {
        let model = CostModel::default();
        let mut r = rng::stream(0, "hist");
        let h = PathHistogram::sample(&model, 100, &mut r);
        assert_eq!(h.rows.len(), 3);
        assert!(h.mean("lsd") < h.mean("dsb"));
        assert!(h.mean("dsb") < h.mean("mite"));
    }
}
