//! Log-binned inter-arrival-time histogram and the micro-pacing summary.
//!
//! Sixty tenth-of-a-decade bins cover 1e-3 ms up to 1e3 ms. Bin `j` holds
//! `[10^((j-30)/10), 10^((j-29)/10))` milliseconds, so the 1-100 ms pacing
//! window is exactly bins 30 through 49.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const BIN_COUNT: usize = 60;
pub const BINS_PER_DECADE: usize = 10;
pub const PACING_WINDOW: std::ops::Range<usize> = 30..50;

#[derive(Debug, Error, PartialEq)]
pub enum IatError {
    #[error("negative inter-arrival time {0} ms")]
    NegativeIat(f64),
    #[error("histogram is empty")]
    EmptyHistogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IatBin {
    Underflow,
    Bin(usize),
    Overflow,
}

/// The 61 bin edges in milliseconds. Decade edges are exact decimal literals.
pub fn bin_edges() -> &'static [f64; BIN_COUNT + 1] {
    static EDGES: OnceLock<[f64; BIN_COUNT + 1]> = OnceLock::new();
    EDGES.get_or_init(|| {
        let mut edges = [0.0; BIN_COUNT + 1];
        for (i, e) in edges.iter_mut().enumerate() {
            let tenths = i as i32 - 30;
            *e = if tenths % 10 == 0 {
                format!("1e{}", tenths / 10)
                    .parse()
                    .expect("decimal literal")
            } else {
                10f64.powf(f64::from(tenths) / 10.0)
            };
        }
        edges
    })
}

pub fn bin_index(iat_ms: f64) -> Result<IatBin, IatError> {
    if iat_ms.is_nan() || iat_ms < 0.0 {
        return Err(IatError::NegativeIat(iat_ms));
    }
    Ok(locate(iat_ms))
}

#[inline]
fn locate(iat_ms: f64) -> IatBin {
    let edges = bin_edges();
    if iat_ms < edges[0] {
        IatBin::Underflow
    } else if iat_ms >= edges[BIN_COUNT] {
        IatBin::Overflow
    } else {
        IatBin::Bin(edges.partition_point(|&e| e <= iat_ms) - 1)
    }
}

/// Human-readable range of a bin, e.g. `1e0–1.26e0 ms`.
pub fn bin_label(bin: IatBin) -> String {
    let edges = bin_edges();
    match bin {
        IatBin::Underflow => format!("<{} ms", short_sci(edges[0])),
        IatBin::Overflow => format!(">={} ms", short_sci(edges[BIN_COUNT])),
        IatBin::Bin(j) => format!("{}–{} ms", short_sci(edges[j]), short_sci(edges[j + 1])),
    }
}

fn short_sci(v: f64) -> String {
    let s = format!("{v:.2e}");
    let (mantissa, exp) = s.split_once('e').expect("scientific format");
    let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
    format!("{mantissa}e{exp}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IatHistogram {
    #[serde(serialize_with = "ser_bins", deserialize_with = "de_bins")]
    pub bins: [u64; BIN_COUNT],
    pub underflow: u64,
    pub overflow: u64,
    /// Out-of-order pairs skipped instead of binned.
    pub disorder: u64,
}

fn ser_bins<S: Serializer>(bins: &[u64; BIN_COUNT], s: S) -> Result<S::Ok, S::Error> {
    bins.as_slice().serialize(s)
}

fn de_bins<'de, D: Deserializer<'de>>(d: D) -> Result<[u64; BIN_COUNT], D::Error> {
    let v = Vec::<u64>::deserialize(d)?;
    let len = v.len();
    v.try_into()
        .map_err(|_| serde::de::Error::invalid_length(len, &"60 histogram bins"))
}

impl Default for IatHistogram {
    fn default() -> Self {
        IatHistogram {
            bins: [0; BIN_COUNT],
            underflow: 0,
            overflow: 0,
            disorder: 0,
        }
    }
}

impl IatHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.bins.iter().sum::<u64>()
    }

    pub fn count(&self, bin: IatBin) -> u64 {
        match bin {
            IatBin::Underflow => self.underflow,
            IatBin::Overflow => self.overflow,
            IatBin::Bin(j) => self.bins[j],
        }
    }

    pub fn add_ms(&mut self, iat_ms: f64) -> Result<(), IatError> {
        let bin = bin_index(iat_ms)?;
        self.bump(bin);
        Ok(())
    }

    #[inline]
    pub fn add_us(&mut self, iat_us: u64) {
        let bin = if iat_us == 0 {
            IatBin::Underflow
        } else {
            locate(iat_us as f64 / 1000.0)
        };
        self.bump(bin);
    }

    #[inline]
    fn bump(&mut self, bin: IatBin) {
        match bin {
            IatBin::Underflow => self.underflow += 1,
            IatBin::Overflow => self.overflow += 1,
            IatBin::Bin(j) => self.bins[j] += 1,
        }
    }

    pub fn merge(&mut self, other: &IatHistogram) {
        for (a, b) in self.bins.iter_mut().zip(other.bins.iter()) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        self.disorder += other.disorder;
    }

    /// Bins every consecutive pair of one file's timestamps.
    pub fn accumulate_stream(&mut self, ts_us: impl IntoIterator<Item = u64>) {
        let mut acc = IatAccumulator::new();
        for ts in ts_us {
            acc.push(ts);
        }
        self.merge(&acc.finish());
    }
}

/// Streaming per-file state: the histogram plus the previous timestamp.
#[derive(Debug, Clone, Default)]
pub struct IatAccumulator {
    hist: IatHistogram,
    prev_ts_us: Option<u64>,
}

impl IatAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, ts_us: u64) {
        if let Some(prev) = self.prev_ts_us {
            if ts_us >= prev {
                self.hist.add_us(ts_us - prev);
            } else {
                self.hist.disorder += 1;
            }
        }
        self.prev_ts_us = Some(ts_us);
    }

    pub fn finish(self) -> IatHistogram {
        self.hist
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PacingSummary {
    pub total: u64,
    pub micro_pacing_fraction: f64,
    /// Highest-count bin, lowest index on ties; `None` when every IAT fell
    /// outside the binned range.
    pub modal_bin: Option<usize>,
    pub underflow_fraction: f64,
    /// Mass per decade, starting at 1e-3 ms.
    pub decade_fractions: [f64; 6],
    pub overflow_fraction: f64,
    pub disorder: u64,
}

pub fn pacing_summary(hist: &IatHistogram) -> Result<PacingSummary, IatError> {
    let total = hist.total();
    if total == 0 {
        return Err(IatError::EmptyHistogram);
    }
    let t = total as f64;
    let in_window: u64 = hist.bins[PACING_WINDOW].iter().sum();

    let mut modal_bin = None;
    let mut best = 0u64;
    for (j, &c) in hist.bins.iter().enumerate() {
        if c > best {
            best = c;
            modal_bin = Some(j);
        }
    }

    let mut decade_fractions = [0.0; 6];
    for (d, chunk) in hist.bins.chunks(BINS_PER_DECADE).enumerate() {
        decade_fractions[d] = chunk.iter().sum::<u64>() as f64 / t;
    }

    Ok(PacingSummary {
        total,
        micro_pacing_fraction: in_window as f64 / t,
        modal_bin,
        underflow_fraction: hist.underflow as f64 / t,
        decade_fractions,
        overflow_fraction: hist.overflow as f64 / t,
        disorder: hist.disorder,
    })
}

impl fmt::Display for IatBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&bin_label(*self))
    }
}
