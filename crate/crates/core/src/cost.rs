//! Latency model: per-FLOP compute time on each side, link time from the
//! payload size, and the normalized computation cost as a function of the
//! receiver/transmitter speed ratio `beta`.

use crate::channel::ChannelProfile;
use crate::graph::{FlopReport, SplitPoint};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("per-FLOP time must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("baseline FLOP count must be positive")]
    ZeroBaseline,
    #[error("beta grid is empty")]
    EmptyGrid,
}

/// Seconds per FLOP of a device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub alpha: f64,
}

impl DeviceProfile {
    pub fn new(alpha: f64) -> Result<Self, CostError> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(Self { alpha })
        } else {
            Err(CostError::InvalidAlpha(alpha))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub t_m_t: f64,
    pub t_m_r: f64,
    pub payload_bits: u64,
}

/// `t_task = t_comp + t_comm` and `t_comp = t_m_t + t_m_r`, both exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub t_comp: f64,
    pub t_comm: f64,
    pub t_task: f64,
    pub breakdown: CostBreakdown,
}

pub fn computation_time(flops: u64, device: DeviceProfile) -> f64 {
    device.alpha * flops as f64
}

pub fn communication_time(bits: u64, channel: &ChannelProfile) -> f64 {
    bits as f64 / channel.rate_r
}

pub fn total_task_time(
    report: &FlopReport,
    dev_t: DeviceProfile,
    dev_r: DeviceProfile,
    bits: u64,
    channel: &ChannelProfile,
) -> CostReport {
    task_time_from_flops(report.f_m_t, report.f_m_r, dev_t, dev_r, bits, channel)
}

pub fn task_time_from_flops(
    f_m_t: u64,
    f_m_r: u64,
    dev_t: DeviceProfile,
    dev_r: DeviceProfile,
    bits: u64,
    channel: &ChannelProfile,
) -> CostReport {
    let t_m_t = computation_time(f_m_t, dev_t);
    let t_m_r = computation_time(f_m_r, dev_r);
    let t_comp = t_m_t + t_m_r;
    let t_comm = communication_time(bits, channel);
    CostReport {
        t_comp,
        t_comm,
        t_task: t_comp + t_comm,
        breakdown: CostBreakdown {
            t_m_t,
            t_m_r,
            payload_bits: bits,
        },
    }
}

/// `F_t / F + beta * F_r / F`, the split model's compute time relative to
/// running the unsplit model on the transmitter.
pub fn normalized_comp(f_m_t: u64, f_m_r: u64, f_m: u64, beta: f64) -> Result<f64, CostError> {
    if f_m == 0 {
        return Err(CostError::ZeroBaseline);
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(CostError::InvalidBeta(beta));
    }
    let f = f_m as f64;
    Ok(f_m_t as f64 / f + beta * f_m_r as f64 / f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub split: SplitPoint,
    pub normalized_tcomp: f64,
}

pub fn beta_sweep(
    split: SplitPoint,
    report: &FlopReport,
    beta_grid: &[f64],
) -> Result<Vec<SweepRow>, CostError> {
    if beta_grid.is_empty() {
        return Err(CostError::EmptyGrid);
    }
    beta_grid
        .iter()
        .map(|&beta| {
            Ok(SweepRow {
                beta,
                split,
                normalized_tcomp: normalized_comp(report.f_m_t, report.f_m_r, report.f_m, beta)?,
            })
        })
        .collect()
}

/// `points` values of beta spaced evenly in log10 between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..points)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64))
                .collect()
        }
    }
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["beta", "split", "normalized_tcomp"])?;
    for r in rows {
        out.write_record([r.beta.to_string(), r.split.to_string(), r.normalized_tcomp.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// A cost report tagged with the configuration it was computed for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub split: SplitPoint,
    pub n_c: usize,
    pub snr_db: f64,
    pub cost: CostReport,
}

pub fn write_cost_csv<W: Write>(w: W, rows: &[CostRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["split", "n_c", "snr_db", "t_mt", "t_mr", "t_comm", "t_task"])?;
    for r in rows {
        out.write_record([
            r.split.to_string(),
            r.n_c.to_string(),
            r.snr_db.to_string(),
            r.cost.breakdown.t_m_t.to_string(),
            r.cost.breakdown.t_m_r.to_string(),
            r.cost.t_comm.to_string(),
            r.cost.t_task.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
