//! Channel evaluation: edit distance, rates, message patterns and
//! parameter sweeps.

use rand::Rng;

use crate::channel::{BitMessage, ChannelParams, MessagePattern};
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::rng;

/// Result of one transmission.
#[derive(Debug, Clone)]
pub struct ChannelReport {
    pub variant: String,
    pub d: usize,
    pub m_total: usize,
    pub p: u32,
    pub q: u32,
    pub pattern: String,
    pub bits_sent: usize,
    pub bits_received: usize,
    pub edit_distance: usize,
    /// Edit distance normalized by the sent length.
    pub error_rate: f64,
    pub transmission_rate_kbps: f64,
    pub seed: u64,
}

impl ChannelReport {
    pub const CSV_HEADER: &'static str =
        "variant,d,M,p,q,pattern,bits_sent,bits_received,edit_distance,error_rate,tr_rate_kbps,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{}",
            self.variant,
            self.d,
            self.m_total,
            self.p,
            self.q,
            self.pattern,
            self.bits_sent,
            self.bits_received,
            self.edit_distance,
            self.error_rate,
            self.transmission_rate_kbps,
            self.seed
        )
    }
}

/// Levenshtein distance via the Wagner-Fischer dynamic program with unit
/// insert/delete/substitute costs, rolling single row.
pub fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = diag + usize::from(ca != cb);
            diag = row[j + 1];
            row[j + 1] = sub.min(diag + 1).min(row[j] + 1);
        }
    }
    row[b.len()]
}

/// Edit distance between two bit messages.
pub fn message_distance(a: &BitMessage, b: &BitMessage) -> usize {
    edit_distance(a.bits(), b.bits())
}

/// Error rate: edit distance normalized by the number of bits sent.
pub fn error_rate(sent: &BitMessage, received: &BitMessage) -> f64 {
    if sent.is_empty() {
        return 0.0;
    }
    message_distance(sent, received) as f64 / sent.len() as f64
}

/// Transmission rate in kilobits per second.
pub fn transmission_rate(bits_sent: usize, elapsed_s: f64) -> Result<f64> {
    if elapsed_s <= 0.0 {
        return Err(Error::invalid("elapsed time must be positive"));
    }
    Ok(bits_sent as f64 / elapsed_s / 1000.0)
}

/// Generate a message of the given pattern. `seed` only matters for the
/// random pattern.
pub fn gen_message(pattern: MessagePattern, length: usize, seed: u64) -> BitMessage {
    let bits: Vec<u8> = match pattern {
        MessagePattern::All0 => vec![0; length],
        MessagePattern::All1 => vec![1; length],
        MessagePattern::Alternating => (0..length).map(|i| (i % 2) as u8).collect(),
        MessagePattern::Random => {
            let mut r = rng::stream(seed, "message");
            (0..length).map(|_| u8::from(r.gen::<bool>())).collect()
        }
    };
    BitMessage::new(bits, pattern)
}

/// Calibrate a fresh channel, transmit `message` and assemble the report.
/// `label` distinguishes the RNG stream of this run.
pub fn run_channel(
    params: &ChannelParams,
    message: &BitMessage,
    frontend_config: &FrontendConfig,
    model: &CostModel,
    seed: u64,
    label: &str,
) -> Result<ChannelReport> {
    let mut channel = crate::channel::Channel::new(
        params.clone(),
        frontend_config,
        model,
        rng::stream(seed, label),
    )?;
    channel.calibrate()?;
    let t = channel.transmit(message)?;
    let edit = message_distance(message, &t.received);
    let rate = if message.is_empty() {
        0.0
    } else {
        transmission_rate(message.len(), t.elapsed_s)?
    };
    Ok(ChannelReport {
        variant: params.label(),
        d: params.d,
        m_total: params.m_total,
        p: params.effective_pq().0,
        q: params.effective_pq().1,
        pattern: message.pattern().label().to_string(),
        bits_sent: message.len(),
        bits_received: t.received.len(),
        edit_distance: edit,
        error_rate: error_rate(message, &t.received),
        transmission_rate_kbps: rate,
        seed,
    })
}

/// Outcome of one point of a parameter sweep.
#[derive(Debug, Clone)]
pub enum SweepOutcome {
    Report(ChannelReport),
    Skipped { d: usize, reason: String },
}

impl SweepOutcome {
    pub fn report(&self) -> Option<&ChannelReport> {
        match self {
            SweepOutcome::Report(r) => Some(r),
            SweepOutcome::Skipped { .. } => None,
        }
    }
}

/// Sweep the receiver way count `d`, one transmission per value. Each
/// point derives its own RNG stream from the root seed, so points are
/// independent of sweep order. Invalid `d` values are skipped with the
/// validation error as the reason.
pub fn sweep_d(
    base: &ChannelParams,
    d_range: impl IntoIterator<Item = usize>,
    frontend_config: &FrontendConfig,
    model: &CostModel,
    message: &BitMessage,
    seed: u64,
) -> Vec<SweepOutcome> {
    let mut outcomes = Vec::new();
    for d in d_range {
        let mut params = base.clone();
        params.d = d;
        match run_channel(
            &params,
            message,
            frontend_config,
            model,
            seed,
            &format!("sweep-d{d}"),
        ) {
            Ok(report) => outcomes.push(SweepOutcome::Report(report)),
            Err(e) => outcomes.push(SweepOutcome::Skipped {
                d,
                reason: e.to_string(),
            }),
        }
    }
    outcomes
}
