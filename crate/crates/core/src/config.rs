//! Experiment configuration: a flat, human-readable key-value file.
//!
//! Syntax: one `key = value` per line, `#` starts a comment. Unknown keys
//! are rejected. Every key has a documented default; `auto` (where
//! supported) defers to the variant-specific default. The loader
//! round-trips: parsing the emitted text reproduces the same
//! configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::channel::{
    ChannelParams, ChannelVariant, EnclaveParams, MessagePattern, Observable, Stealth,
};
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintModel;
use crate::frontend::{DsbGeometry, FrontendConfig, L1iGeometry, LsdGeometry};

/// Every key with its purpose, for `--help` output and the README.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("dsb.sets", "micro-op cache sets"),
    ("dsb.ways", "micro-op cache ways per set (N)"),
    ("dsb.uops_per_line", "micro-ops one DSB line can hold"),
    ("dsb.window_bytes", "bytes per DSB window"),
    ("lsd.capacity", "loop buffer capacity in micro-ops"),
    ("lsd.enabled", "whether the loop buffer is enabled"),
    ("lsd.warmup_iters", "identical loop repetitions before capture"),
    ("lsd.misalign_window", "accesses a window's alignment stays recent for the rule table"),
    ("l1i.size", "instruction cache size in bytes"),
    ("l1i.ways", "instruction cache ways"),
    ("l1i.line", "instruction cache line size in bytes"),
    ("cost.cycles_lsd", "cycles per block from the loop buffer"),
    ("cost.cycles_dsb", "cycles per block from the micro-op cache"),
    ("cost.cycles_mite", "cycles per block from the legacy decoder"),
    ("cost.penalty_lsd_to_dsb", "LSD-to-DSB switch penalty cycles"),
    ("cost.penalty_dsb_to_mite", "DSB-to-MITE switch penalty cycles"),
    ("cost.lcp_stall", "stall cycles per stalled LCP instruction"),
    ("cost.energy_lsd", "energy units per micro-op from the loop buffer"),
    ("cost.energy_dsb", "energy units per micro-op from the micro-op cache"),
    ("cost.energy_mite", "energy units per micro-op from the legacy decoder"),
    ("cost.core_freq_hz", "core frequency for cycles-to-seconds conversion"),
    ("noise.sigma", "Gaussian noise (std dev, cycles) on every block cost"),
    ("channel.variant", "mt_evict | mt_misalign | nonmt_evict | nonmt_misalign | slow_switch"),
    ("channel.stealth", "stealthy | fast (single-thread variants)"),
    ("channel.d", "receiver way count, or auto"),
    ("channel.m", "total ways for misalignment variants, or auto"),
    ("channel.p", "receiver iterations, or auto"),
    ("channel.q", "sender iterations, or auto"),
    ("channel.r", "LCP instruction count (slow-switch)"),
    ("channel.set", "target DSB set x"),
    ("channel.alt_set", "alternate set y for stealthy eviction, or auto ((x+1) mod sets)"),
    ("channel.alpha", "threshold position between mean0 and mean1, in (0,1)"),
    ("channel.observable", "cycles | energy"),
    ("channel.rapl_interval_s", "energy counter update interval in seconds"),
    ("channel.pattern", "all0 | all1 | alternating | random"),
    ("channel.bits", "message length in bits"),
    ("channel.enclave", "enable enclave mode (entry/exit overhead, higher p,q)"),
    ("channel.enclave_entry_exit_cycles", "enclave entry+exit cycles per bit"),
    ("channel.enclave_p", "receiver iterations in enclave mode"),
    ("channel.enclave_q", "sender iterations in enclave mode"),
    ("spectre.secret", "hex string, or 'random'"),
    ("spectre.chunks", "number of 5-bit chunks when the secret is random"),
    ("spectre.train_iterations", "retained training iteration count (no-op)"),
    ("fingerprint.victims", "number of synthetic victims"),
    ("fingerprint.runs_per_victim", "reference runs per victim"),
    ("fingerprint.intervals", "victim trace length in intervals"),
    ("fingerprint.interval_s", "victim trace interval in seconds"),
    ("fingerprint.sampling_hz", "attacker IPC sampling frequency"),
    ("fingerprint.mite_capacity", "shared decoder capacity, micro-ops per second"),
    ("fingerprint.ipc_noise_rel", "relative Gaussian noise per IPC sample"),
    ("histogram.samples", "timing samples per path"),
    ("patch.trials", "patch detection trials"),
    ("seed", "root seed; all randomness derives from it"),
    ("output_dir", "directory for CSV output"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dsb_sets: usize,
    pub dsb_ways: usize,
    pub dsb_uops_per_line: u32,
    pub dsb_window_bytes: u32,
    pub lsd_capacity: u32,
    pub lsd_enabled: bool,
    pub lsd_warmup_iters: u32,
    pub lsd_misalign_window: u64,
    pub l1i_size: usize,
    pub l1i_ways: usize,
    pub l1i_line: u32,
    pub cost_cycles_lsd: u32,
    pub cost_cycles_dsb: u32,
    pub cost_cycles_mite: u32,
    pub cost_penalty_lsd_to_dsb: u32,
    pub cost_penalty_dsb_to_mite: u32,
    pub cost_lcp_stall: u32,
    pub cost_energy_lsd: f64,
    pub cost_energy_dsb: f64,
    pub cost_energy_mite: f64,
    pub cost_core_freq_hz: f64,
    pub noise_sigma: f64,
    pub channel_variant: ChannelVariant,
    pub channel_stealth: Stealth,
    pub channel_d: Option<usize>,
    pub channel_m: Option<usize>,
    pub channel_p: Option<u32>,
    pub channel_q: Option<u32>,
    pub channel_r: u32,
    pub channel_set: usize,
    pub channel_alt_set: Option<usize>,
    pub channel_alpha: f64,
    pub channel_observable: Observable,
    pub channel_rapl_interval_s: f64,
    pub channel_pattern: MessagePattern,
    pub channel_bits: usize,
    pub channel_enclave: bool,
    pub channel_enclave_entry_exit_cycles: u64,
    pub channel_enclave_p: u32,
    pub channel_enclave_q: u32,
    pub spectre_secret: String,
    pub spectre_chunks: usize,
    pub spectre_train_iterations: u32,
    pub fingerprint_victims: usize,
    pub fingerprint_runs_per_victim: usize,
    pub fingerprint_intervals: usize,
    pub fingerprint_interval_s: f64,
    pub fingerprint_sampling_hz: f64,
    pub fingerprint_mite_capacity: f64,
    pub fingerprint_ipc_noise_rel: f64,
    pub histogram_samples: usize,
    pub patch_trials: u32,
    pub seed: u64,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fe = FrontendConfig::default();
        let cost = CostModel::default();
        let fp = FingerprintModel::default();
        ExperimentConfig {
            dsb_sets: fe.dsb.sets,
            dsb_ways: fe.dsb.ways,
            dsb_uops_per_line: fe.dsb.uops_per_line,
            dsb_window_bytes: fe.dsb.window_bytes,
            lsd_capacity: fe.lsd.capacity_uops,
            lsd_enabled: fe.lsd.enabled,
            lsd_warmup_iters: fe.lsd_warmup_iters,
            lsd_misalign_window: fe.misalign_window,
            l1i_size: fe.l1i.size_bytes,
            l1i_ways: fe.l1i.ways,
            l1i_line: fe.l1i.line_bytes,
            cost_cycles_lsd: cost.cycles_lsd,
            cost_cycles_dsb: cost.cycles_dsb,
            cost_cycles_mite: cost.cycles_mite,
            cost_penalty_lsd_to_dsb: cost.penalty_lsd_to_dsb,
            cost_penalty_dsb_to_mite: cost.penalty_dsb_to_mite,
            cost_lcp_stall: cost.lcp_stall,
            cost_energy_lsd: cost.energy_lsd,
            cost_energy_dsb: cost.energy_dsb,
            cost_energy_mite: cost.energy_mite,
            cost_core_freq_hz: cost.core_freq_hz,
            noise_sigma: cost.noise_sigma,
            channel_variant: ChannelVariant::NonMtEvict,
            channel_stealth: Stealth::Stealthy,
            channel_d: None,
            channel_m: None,
            channel_p: None,
            channel_q: None,
            channel_r: 16,
            channel_set: 3,
            channel_alt_set: None,
            channel_alpha: 0.5,
            channel_observable: Observable::Cycles,
            channel_rapl_interval_s: crate::cost::RAPL_UPDATE_INTERVAL_S,
            channel_pattern: MessagePattern::Alternating,
            channel_bits: 1000,
            channel_enclave: false,
            channel_enclave_entry_exit_cycles: EnclaveParams::default().entry_exit_cycles,
            channel_enclave_p: EnclaveParams::default().p,
            channel_enclave_q: EnclaveParams::default().q,
            spectre_secret: "random".to_string(),
            spectre_chunks: 32,
            spectre_train_iterations: 8,
            fingerprint_victims: 4,
            fingerprint_runs_per_victim: 3,
            fingerprint_intervals: 30,
            fingerprint_interval_s: 0.1,
            fingerprint_sampling_hz: fp.sampling_hz,
            fingerprint_mite_capacity: fp.mite_capacity_uops_per_s,
            fingerprint_ipc_noise_rel: fp.ipc_rel_noise,
            histogram_samples: 2000,
            patch_trials: 100,
            seed: 42,
            output_dir: "out".to_string(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        line,
        msg: format!("bad value '{value}' for {key}"),
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("bad boolean '{value}' for {key} (true|false)"),
        }),
    }
}

fn parse_auto<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<Option<T>> {
    if value.trim() == "auto" {
        Ok(None)
    } else {
        parse_num(key, value, line).map(Some)
    }
}

fn auto_str<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        None => "auto".to_string(),
        Some(x) => x.to_string(),
    }
}

impl ExperimentConfig {
    /// Parse config text; unknown keys and malformed lines are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Config {
                line: line_no,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            config.set(key.trim(), value.trim(), line_no)?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Apply one `key=value` override (the CLI flag form).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::invalid(format!("override '{assignment}' must look like key=value"))
        })?;
        self.set(key.trim(), value.trim(), 0)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "dsb.sets" => self.dsb_sets = parse_num(key, value, line)?,
            "dsb.ways" => self.dsb_ways = parse_num(key, value, line)?,
            "dsb.uops_per_line" => self.dsb_uops_per_line = parse_num(key, value, line)?,
            "dsb.window_bytes" => self.dsb_window_bytes = parse_num(key, value, line)?,
            "lsd.capacity" => self.lsd_capacity = parse_num(key, value, line)?,
            "lsd.enabled" => self.lsd_enabled = parse_bool(key, value, line)?,
            "lsd.warmup_iters" => self.lsd_warmup_iters = parse_num(key, value, line)?,
            "lsd.misalign_window" => self.lsd_misalign_window = parse_num(key, value, line)?,
            "l1i.size" => self.l1i_size = parse_num(key, value, line)?,
            "l1i.ways" => self.l1i_ways = parse_num(key, value, line)?,
            "l1i.line" => self.l1i_line = parse_num(key, value, line)?,
            "cost.cycles_lsd" => self.cost_cycles_lsd = parse_num(key, value, line)?,
            "cost.cycles_dsb" => self.cost_cycles_dsb = parse_num(key, value, line)?,
            "cost.cycles_mite" => self.cost_cycles_mite = parse_num(key, value, line)?,
            "cost.penalty_lsd_to_dsb" => {
                self.cost_penalty_lsd_to_dsb = parse_num(key, value, line)?
            }
            "cost.penalty_dsb_to_mite" => {
                self.cost_penalty_dsb_to_mite = parse_num(key, value, line)?
            }
            "cost.lcp_stall" => self.cost_lcp_stall = parse_num(key, value, line)?,
            "cost.energy_lsd" => self.cost_energy_lsd = parse_num(key, value, line)?,
            "cost.energy_dsb" => self.cost_energy_dsb = parse_num(key, value, line)?,
            "cost.energy_mite" => self.cost_energy_mite = parse_num(key, value, line)?,
            "cost.core_freq_hz" => self.cost_core_freq_hz = parse_num(key, value, line)?,
            "noise.sigma" => self.noise_sigma = parse_num(key, value, line)?,
            "channel.variant" => self.channel_variant = ChannelVariant::parse(value)?,
            "channel.stealth" => self.channel_stealth = Stealth::parse(value)?,
            "channel.d" => self.channel_d = parse_auto(key, value, line)?,
            "channel.m" => self.channel_m = parse_auto(key, value, line)?,
            "channel.p" => self.channel_p = parse_auto(key, value, line)?,
            "channel.q" => self.channel_q = parse_auto(key, value, line)?,
            "channel.r" => self.channel_r = parse_num(key, value, line)?,
            "channel.set" => self.channel_set = parse_num(key, value, line)?,
            "channel.alt_set" => self.channel_alt_set = parse_auto(key, value, line)?,
            "channel.alpha" => self.channel_alpha = parse_num(key, value, line)?,
            "channel.observable" => self.channel_observable = Observable::parse(value)?,
            "channel.rapl_interval_s" => {
                self.channel_rapl_interval_s = parse_num(key, value, line)?
            }
            "channel.pattern" => self.channel_pattern = MessagePattern::parse(value)?,
            "channel.bits" => self.channel_bits = parse_num(key, value, line)?,
            "channel.enclave" => self.channel_enclave = parse_bool(key, value, line)?,
            "channel.enclave_entry_exit_cycles" => {
                self.channel_enclave_entry_exit_cycles = parse_num(key, value, line)?
            }
            "channel.enclave_p" => self.channel_enclave_p = parse_num(key, value, line)?,
            "channel.enclave_q" => self.channel_enclave_q = parse_num(key, value, line)?,
            "spectre.secret" => self.spectre_secret = value.to_string(),
            "spectre.chunks" => self.spectre_chunks = parse_num(key, value, line)?,
            "spectre.train_iterations" => {
                self.spectre_train_iterations = parse_num(key, value, line)?
            }
            "fingerprint.victims" => self.fingerprint_victims = parse_num(key, value, line)?,
            "fingerprint.runs_per_victim" => {
                self.fingerprint_runs_per_victim = parse_num(key, value, line)?
            }
            "fingerprint.intervals" => self.fingerprint_intervals = parse_num(key, value, line)?,
            "fingerprint.interval_s" => self.fingerprint_interval_s = parse_num(key, value, line)?,
            "fingerprint.sampling_hz" => {
                self.fingerprint_sampling_hz = parse_num(key, value, line)?
            }
            "fingerprint.mite_capacity" => {
                self.fingerprint_mite_capacity = parse_num(key, value, line)?
            }
            "fingerprint.ipc_noise_rel" => {
                self.fingerprint_ipc_noise_rel = parse_num(key, value, line)?
            }
            "histogram.samples" => self.histogram_samples = parse_num(key, value, line)?,
            "patch.trials" => self.patch_trials = parse_num(key, value, line)?,
            "seed" => self.seed = parse_num(key, value, line)?,
            "output_dir" => self.output_dir = value.to_string(),
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    /// Emit the full configuration; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dsb.sets", self.dsb_sets.to_string());
        kv("dsb.ways", self.dsb_ways.to_string());
        kv("dsb.uops_per_line", self.dsb_uops_per_line.to_string());
        kv("dsb.window_bytes", self.dsb_window_bytes.to_string());
        kv("lsd.capacity", self.lsd_capacity.to_string());
        kv("lsd.enabled", self.lsd_enabled.to_string());
        kv("lsd.warmup_iters", self.lsd_warmup_iters.to_string());
        kv("lsd.misalign_window", self.lsd_misalign_window.to_string());
        kv("l1i.size", self.l1i_size.to_string());
        kv("l1i.ways", self.l1i_ways.to_string());
        kv("l1i.line", self.l1i_line.to_string());
        kv("cost.cycles_lsd", self.cost_cycles_lsd.to_string());
        kv("cost.cycles_dsb", self.cost_cycles_dsb.to_string());
        kv("cost.cycles_mite", self.cost_cycles_mite.to_string());
        kv("cost.penalty_lsd_to_dsb", self.cost_penalty_lsd_to_dsb.to_string());
        kv("cost.penalty_dsb_to_mite", self.cost_penalty_dsb_to_mite.to_string());
        kv("cost.lcp_stall", self.cost_lcp_stall.to_string());
        kv("cost.energy_lsd", self.cost_energy_lsd.to_string());
        kv("cost.energy_dsb", self.cost_energy_dsb.to_string());
        kv("cost.energy_mite", self.cost_energy_mite.to_string());
        kv("cost.core_freq_hz", self.cost_core_freq_hz.to_string());
        kv("noise.sigma", self.noise_sigma.to_string());
        kv("channel.variant", self.channel_variant.base_label().to_string());
        kv("channel.stealth", self.channel_stealth.label().to_string());
        kv("channel.d", auto_str(&self.channel_d));
        kv("channel.m", auto_str(&self.channel_m));
        kv("channel.p", auto_str(&self.channel_p));
        kv("channel.q", auto_str(&self.channel_q));
        kv("channel.r", self.channel_r.to_string());
        kv("channel.set", self.channel_set.to_string());
        kv("channel.alt_set", auto_str(&self.channel_alt_set));
        kv("channel.alpha", self.channel_alpha.to_string());
        kv("channel.observable", self.channel_observable.label().to_string());
        kv("channel.rapl_interval_s", self.channel_rapl_interval_s.to_string());
        kv("channel.pattern", self.channel_pattern.label().to_string());
        kv("channel.bits", self.channel_bits.to_string());
        kv("channel.enclave", self.channel_enclave.to_string());
        kv(
            "channel.enclave_entry_exit_cycles",
            self.channel_enclave_entry_exit_cycles.to_string(),
        );
        kv("channel.enclave_p", self.channel_enclave_p.to_string());
        kv("channel.enclave_q", self.channel_enclave_q.to_string());
        kv("spectre.secret", self.spectre_secret.clone());
        kv("spectre.chunks", self.spectre_chunks.to_string());
        kv("spectre.train_iterations", self.spectre_train_iterations.to_string());
        kv("fingerprint.victims", self.fingerprint_victims.to_string());
        kv(
            "fingerprint.runs_per_victim",
            self.fingerprint_runs_per_victim.to_string(),
        );
        kv("fingerprint.intervals", self.fingerprint_intervals.to_string());
        kv("fingerprint.interval_s", self.fingerprint_interval_s.to_string());
        kv("fingerprint.sampling_hz", self.fingerprint_sampling_hz.to_string());
        kv("fingerprint.mite_capacity", self.fingerprint_mite_capacity.to_string());
        kv("fingerprint.ipc_noise_rel", self.fingerprint_ipc_noise_rel.to_string());
        kv("histogram.samples", self.histogram_samples.to_string());
        kv("patch.trials", self.patch_trials.to_string());
        kv("seed", self.seed.to_string());
        kv("output_dir", self.output_dir.clone());
        s
    }

    pub fn frontend_config(&self) -> FrontendConfig {
        FrontendConfig {
            dsb: DsbGeometry {
                sets: self.dsb_sets,
                ways: self.dsb_ways,
                uops_per_line: self.dsb_uops_per_line,
                window_bytes: self.dsb_window_bytes,
            },
            lsd: LsdGeometry {
                capacity_uops: self.lsd_capacity,
                enabled: self.lsd_enabled,
            },
            l1i: L1iGeometry {
                size_bytes: self.l1i_size,
                ways: self.l1i_ways,
                line_bytes: self.l1i_line,
            },
            lsd_warmup_iters: self.lsd_warmup_iters,
            misalign_window: self.lsd_misalign_window,
            lcp_stall_cycles: self.cost_lcp_stall,
        }
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            cycles_lsd: self.cost_cycles_lsd,
            cycles_dsb: self.cost_cycles_dsb,
            cycles_mite: self.cost_cycles_mite,
            penalty_lsd_to_dsb: self.cost_penalty_lsd_to_dsb,
            penalty_dsb_to_mite: self.cost_penalty_dsb_to_mite,
            lcp_stall: self.cost_lcp_stall,
            energy_lsd: self.cost_energy_lsd,
            energy_dsb: self.cost_energy_dsb,
            energy_mite: self.cost_energy_mite,
            noise_sigma: self.noise_sigma,
            core_freq_hz: self.cost_core_freq_hz,
        }
    }

    /// Channel parameters: variant defaults filled in where keys say
    /// `auto`.
    pub fn channel_params(&self) -> ChannelParams {
        let mut params = ChannelParams::defaults_for(self.channel_variant);
        params.stealth = self.channel_stealth;
        if let Some(d) = self.channel_d {
            params.d = d;
        }
        if let Some(m) = self.channel_m {
            params.m_total = m;
        }
        if let Some(p) = self.channel_p {
            params.p = p;
        }
        if let Some(q) = self.channel_q {
            params.q = q;
        }
        params.r = self.channel_r;
        params.target_set = self.channel_set;
        params.alternate_set = self.channel_alt_set;
        params.threshold_alpha = self.channel_alpha;
        params.observable = self.channel_observable;
        params.rapl_interval_s = self.channel_rapl_interval_s;
        if self.channel_enclave {
            params.enclave = Some(EnclaveParams {
                entry_exit_cycles: self.channel_enclave_entry_exit_cycles,
                p: self.channel_enclave_p,
                q: self.channel_enclave_q,
            });
        }
        params
    }

    pub fn fingerprint_model(&self) -> FingerprintModel {
        FingerprintModel {
            mite_capacity_uops_per_s: self.fingerprint_mite_capacity,
            ipc_rel_noise: self.fingerprint_ipc_noise_rel,
            sampling_hz: self.fingerprint_sampling_hz,
        }
    }
}
