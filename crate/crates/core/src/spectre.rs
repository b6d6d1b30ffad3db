//! Transient-execution disclosure through micro-op cache set residency.
//!
//! An in-domain attacker primes all 32 DSB sets with its own block chains,
//! lets a transient window execute one victim block whose set index equals
//! a 5-bit secret chunk, then times a probe pass over every set. The
//! encoding set's probe is slow (the victim displaced one way, and the LRU
//! refill cascades through the set), every other set stays fast.
//! Speculation is modeled as a flag suppressing architectural effects
//! while frontend state updates proceed; no branch predictor is simulated
//! and training is kept as a no-op placeholder for script-shape fidelity.
//!
//! The probe leaves each set exactly as the prime established it, so
//! trials are independent, and neither encode nor probe touches a cold
//! instruction-cache line: the channel adds zero L1I misses.

use rand_chacha::ChaCha8Rng;

use crate::cost::{cost_of, CostModel};
use crate::error::{Error, Result};
use crate::frontend::{DeliveryPath, Frontend, FrontendConfig, MixBlock};
use crate::rng;

/// Ordinal range reserved for the victim's encode blocks, past the probe
/// chains' ordinals 0..ways.
const VICTIM_ORDINAL: usize = 16;

/// One disclosure experiment: a secret split into 5-bit chunks plus the
/// attacker's probe chains.
pub struct SpectreScenario {
    secret: Vec<u8>,
    /// Retained for the experiment shape; the model has no branch
    /// predictor to train.
    pub train_iterations: u32,
    fe: Frontend,
    model: CostModel,
    rng: ChaCha8Rng,
    probe_chains: Vec<Vec<MixBlock>>,
    victim_blocks: Vec<MixBlock>,
    prev_path: Option<DeliveryPath>,
}

/// One recovered chunk.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub chunk_index: usize,
    pub true_value: u8,
    /// None when no unique outlier exceeded the margin.
    pub recovered: Option<u8>,
    pub per_set_cycles: Vec<u64>,
    pub added_l1i_misses: u64,
}

impl SpectreScenario {
    pub fn new(
        secret: Vec<u8>,
        train_iterations: u32,
        fe_config: &FrontendConfig,
        model: &CostModel,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        model.validate()?;
        let sets = fe_config.dsb.sets;
        if sets < 32 {
            return Err(Error::invalid("the 5-bit encoding needs at least 32 DSB sets"));
        }
        for &c in &secret {
            if c > 31 {
                return Err(Error::invalid(format!("secret chunk {c} out of 0..31")));
            }
        }
        let mut probe_chains = Vec::with_capacity(32);
        for set in 0..32 {
            probe_chains.push(crate::channel::build_block_chain_at(
                &fe_config.dsb,
                set,
                0,
                fe_config.dsb.ways,
                |_| false,
            )?);
        }
        let stride = fe_config.dsb.sets as u64 * u64::from(fe_config.dsb.window_bytes);
        let victim_blocks = (0..32u64)
            .map(|c| {
                let addr =
                    VICTIM_ORDINAL as u64 * stride + c * u64::from(fe_config.dsb.window_bytes);
                MixBlock::canonical(addr, addr)
            })
            .collect();
        let mut scenario = SpectreScenario {
            secret,
            train_iterations,
            fe: Frontend::new(*fe_config)?,
            model: *model,
            rng,
            probe_chains,
            victim_blocks,
            prev_path: None,
        };
        scenario.prime();
        Ok(scenario)
    }

    pub fn secret(&self) -> &[u8] {
        &self.secret
    }

    /// Warm every code region once, then establish full residency of the
    /// probe chains in all sets. After this, nothing in a trial touches a
    /// cold instruction-cache line.
    fn prime(&mut self) {
        let victims = self.victim_blocks.clone();
        for b in &victims {
            self.fe.access(0, b);
        }
        let chains = self.probe_chains.clone();
        for chain in &chains {
            for b in chain {
                self.fe.access(0, b);
            }
        }
    }

    /// No-op: the model suppresses architectural effects by construction
    /// and simulates no branch predictor.
    pub fn train(&mut self) {
        let _ = self.train_iterations;
    }

    /// Transiently execute the victim block that maps to DSB set `chunk`.
    /// Nothing commits architecturally, but the frontend state updates in
    /// full — the modeled vulnerability.
    pub fn transient_encode(&mut self, chunk: u8) -> Result<()> {
        if chunk > 31 {
            return Err(Error::invalid(format!("chunk {chunk} out of 0..31")));
        }
        let block = self.victim_blocks[chunk as usize];
        let record = self.fe.access(0, &block);
        self.prev_path = Some(record.path);
        Ok(())
    }

    /// Time one probe pass per set and pick the slowest as the recovered
    /// chunk. The margin below which the outlier is considered ambiguous
    /// is half the per-block DSB→MITE cost difference.
    pub fn probe_all_sets(&mut self) -> (Option<u8>, Vec<u64>) {
        let chains = self.probe_chains.clone();
        let mut per_set = Vec::with_capacity(32);
        for chain in &chains {
            let mut cycles = 0u64;
            for b in chain {
                let record = self.fe.access(0, b);
                cycles += cost_of(&record, self.prev_path, &self.model, &mut self.rng);
                self.prev_path = Some(record.path);
            }
            per_set.push(cycles);
        }
        let margin = f64::from(self.model.cycles_mite - self.model.cycles_dsb) / 2.0;
        let max = *per_set.iter().max().expect("32 sets");
        let runner_up = per_set
            .iter()
            .filter(|&&c| c != max)
            .max()
            .copied()
            .unwrap_or(max);
        let unique = per_set.iter().filter(|&&c| c == max).count() == 1;
        let recovered = if unique && (max - runner_up) as f64 >= margin {
            per_set.iter().position(|&c| c == max).map(|i| i as u8)
        } else {
            None
        };
        (recovered, per_set)
    }

    /// Encode one chunk and probe it back, accounting instruction-cache
    /// misses across the whole trial.
    pub fn run_trial(&mut self, chunk_index: usize, chunk: u8) -> Result<TrialResult> {
        let misses_before = self.fe.counters().l1i_misses;
        self.train();
        self.transient_encode(chunk)?;
        let (recovered, per_set_cycles) = self.probe_all_sets();
        Ok(TrialResult {
            chunk_index,
            true_value: chunk,
            recovered,
            per_set_cycles,
            added_l1i_misses: self.fe.counters().l1i_misses - misses_before,
        })
    }

    /// Run one trial per secret chunk.
    pub fn run(&mut self) -> Result<Vec<TrialResult>> {
        let secret = self.secret.clone();
        secret
            .iter()
            .enumerate()
            .map(|(i, &c)| self.run_trial(i, c))
            .collect()
    }

    /// Probe with no preceding encode; used to demonstrate the ambiguity
    /// flag.
    pub fn probe_without_encode(&mut self) -> (Option<u8>, Vec<u64>) {
        self.probe_all_sets()
    }
}

/// CSV header for trial results: one cycles column per set.
pub fn csv_header() -> String {
    let mut h = String::from("chunk_index,true_value,recovered_value");
    for s in 0..32 {
        h.push_str(&format!(",set{s}_cycles"));
    }
    h.push_str(",added_l1i_misses");
    h
}

pub fn csv_row(t: &TrialResult) -> String {
    let recovered = t.recovered.map(i64::from).unwrap_or(-1);
    let mut row = format!("{},{},{}", t.chunk_index, t.true_value, recovered);
    for c in &t.per_set_cycles {
        row.push_str(&format!(",{c}"));
    }
    row.push_str(&format!(",{}", t.added_l1i_misses));
    row
}

/// Split the bits of a hex string (MSB first) into 5-bit chunks; the last
/// chunk is zero-padded.
pub fn chunks_from_hex(hex: &str) -> Result<Vec<u8>> {
    if hex.is_empty() {
        return Err(Error::invalid("empty secret"));
    }
    let mut bits = Vec::with_capacity(hex.len() * 4);
    for ch in hex.chars() {
        let v = ch
            .to_digit(16)
            .ok_or_else(|| Error::invalid(format!("'{ch}' is not a hex digit")))?;
        for i in (0..4).rev() {
            bits.push(((v >> i) & 1) as u8);
        }
    }
    let mut chunks = Vec::with_capacity(bits.len().div_ceil(5));
    for group in bits.chunks(5) {
        let mut v = 0u8;
        for (i, &b) in group.iter().enumerate() {
            v |= b << (4 - i);
        }
        chunks.push(v);
    }
    Ok(chunks)
}

/// Uniform random chunks from the given seed.
pub fn random_chunks(count: usize, seed: u64) -> Vec<u8> {
    use rand::Rng;
    let mut r = rng::stream(seed, "spectre-secret");
    (0..count).map(|_| r.gen_range(0..32u8)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(secret: Vec<u8>) -> SpectreScenario {
        SpectreScenario::new(
            secret,
            8,
            &FrontendConfig::default(),
            &CostModel::default(),
            rng::stream(1, "spectre-test"),
        )
        .unwrap()
    }

    #[test]
    fn boundary_chunks_disturb_the_matching_set() {
        for chunk in [0u8, 31] {
            let mut s = scenario(vec![chunk]);
            let t = s.run_trial(0, chunk).unwrap();
            assert_eq!(t.recovered, Some(chunk));
        }
    }

    #[test]
    fn mid_range_chunk_recovers_end_to_end() {
        let mut s = scenario(vec![21]);
        let results = s.run().unwrap();
        assert_eq!(results[0].recovered, Some(21));
        assert_eq!(results[0].added_l1i_misses, 0);
    }

    #[test]
    fn all_32_chunks_recover_with_zero_added_misses() {
        let secret: Vec<u8> = (0..32).collect();
        let mut s = scenario(secret.clone());
        let results = s.run().unwrap();
        for (t, &expected) in results.iter().zip(&secret) {
            assert_eq!(t.recovered, Some(expected));
            assert_eq!(t.added_l1i_misses, 0);
        }
    }

    #[test]
    fn probe_without_encode_is_ambiguous() {
        let mut s = scenario(vec![0]);
        let (recovered, per_set) = s.probe_without_encode();
        assert_eq!(recovered, None);
        // All sets resident: identical probe times.
        assert!(per_set.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn distinct_chunks_give_distinct_outliers() {
        let mut s = scenario((0..32).collect());
        let results = s.run().unwrap();
        let mut recovered: Vec<u8> = results.iter().map(|t| t.recovered.unwrap()).collect();
        recovered.sort_unstable();
        recovered.dedup();
        assert_eq!(recovered.len(), 32, "encoding is a bijection");
    }

    #[test]
    fn out_of_range_chunk_is_rejected() {
        let mut s = scenario(vec![0]);
        assert!(s.transient_encode(32).is_err());
        assert!(SpectreScenario::new(
            vec![32],
            1,
            &FrontendConfig::default(),
            &CostModel::default(),
            rng::stream(0, "x"),
        )
        .is_err());
    }

    #[test]
    fn hex_secret_splits_into_5_bit_chunks() {
        // 0xF5 = 11110101 -> 11110 101(00) = 30, 20.
        assert_eq!(chunks_from_hex("f5").unwrap(), vec![30, 20]);
        assert!(chunks_from_hex("xyz").is_err());
        assert!(chunks_from_hex("").is_err());
        assert!(chunks_from_hex("ff").unwrap().iter().all(|&c| c < 32));
    }

    #[test]
    fn csv_row_has_36_columns() {
        let t = TrialResult {
            chunk_index: 0,
            true_value: 1,
            recovered: Some(1),
            per_set_cycles: vec![0; 32],
            added_l1i_misses: 0,
        };
        assert_eq!(csv_header().split(',').count(), 36);
        assert_eq!(csv_row(&t).split(',').count(), 36);
    }
}
