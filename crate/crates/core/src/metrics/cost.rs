use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BITS_PER_SCALAR: u64 = 32;
pub const BITS_PER_MASK_POSITION: u64 = 1;
const BYTES_PER_MB: f64 = 1e6;

/// Transfer between one client and the server in one round, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub round: usize,
    pub client: usize,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
}

/// Collects per-round, per-client transfer sizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<CostEntry>,
    uplink_bits: u64,
    downlink_bits: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: CostEntry) -> Result<()> {
        self.uplink_bits = self
            .uplink_bits
            .checked_add(entry.uplink_bits)
            .ok_or(Error::Overflow("uplink total"))?;
        self.downlink_bits = self
            .downlink_bits
            .checked_add(entry.downlink_bits)
            .ok_or(Error::Overflow("downlink total"))?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[CostEntry] {
        &self.entries
    }

    pub fn uplink_bits(&self) -> u64 {
        self.uplink_bits
    }

    pub fn downlink_bits(&self) -> u64 {
        self.downlink_bits
    }

    pub fn total_bits(&self) -> u64 {
        self.uplink_bits + self.downlink_bits
    }

    pub fn total_bytes(&self) -> f64 {
        self.total_bits() as f64 / 8.0
    }

    /// Up plus down bits per client over the whole run.
    pub fn per_client_bits(&self) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.client).or_insert(0) += e.uplink_bits + e.downlink_bits;
        }
        out
    }

    /// Up plus down bits per round, summed over clients.
    pub fn per_round_bits(&self) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.round).or_insert(0) += e.uplink_bits + e.downlink_bits;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "serialising cost ledger".into(),
            source,
        })
    }
}

/// `R * B * |W| * 2` bits, exchanged both ways between one client and the
/// server over `R` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormCost {
    pub bits: u64,
    pub bytes: u64,
    pub megabytes: f64,
}

pub fn comm_cost_closed_form(rounds: u64, bits: u64, params: u64) -> Result<ClosedFormCost> {
    let total = rounds
        .checked_mul(bits)
        .and_then(|v| v.checked_mul(params))
        .and_then(|v| v.checked_mul(2))
        .ok_or(Error::Overflow("closed-form cost"))?;
    // total is a multiple of 8 whenever B is; otherwise round bytes up
    let bytes = total.div_ceil(8);
    Ok(ClosedFormCost {
        bits: total,
        bytes,
        megabytes: bytes as f64 / BYTES_PER_MB,
    })
}

/// Uplink size of one client update: every retained value at full width,
/// plus one bit per mask position when the mask changed this round.
pub fn uplink_bits(retained: usize, mask_positions: usize, mask_changed: bool) -> u64 {
    let mut bits = BITS_PER_SCALAR * retained as u64;
    if mask_changed {
        bits += BITS_PER_MASK_POSITION * mask_positions as u64;
    }
    bits
}

pub fn downlink_bits(retained: usize) -> u64 {
    BITS_PER_SCALAR * retained as u64
}
