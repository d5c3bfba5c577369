//! Seeded synthetic darknet traffic.
//!
//! Random numbers come from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! the 64-bit seed in little-endian order in the first eight key bytes and
//! zeros elsewhere. Every draw consumes whole 64-bit outputs:
//!
//! * uniform real in `[0, 1)`: `(x >> 11) * 2^-53`
//! * integer in `[0, n)`: Lemire's multiply-shift with rejection
//! * standard normal: Box-Muller cosine branch, `u1` taken as `1 - uniform`
//! * exponential with mean `m`: `-m * ln(1 - uniform)`
//!
//! Generation proceeds second by second. The rate model fixes the second's
//! packet count, the pacing model places that many timestamps inside the
//! second, and then each packet draws, in order, its source, its port-mix
//! slot, its destination, its source port and its IP length.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iat::IatHistogram;
use crate::packet_io::{PacketRecord, Transport};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preset '{0}' (known: baseline-2021-like, paced-botnet-2025-like)")]
    UnknownPreset(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse synthetic spec: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateModel {
    ConstantRate { pps: f64 },
    GaussianPerSecond { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PacingModel {
    UniformSpread,
    FixedIat { ms: f64 },
    LogUniformIat { lo_ms: f64, hi_ms: f64 },
    ExponentialIat { mean_ms: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepModel {
    SequentialStride { stride: u32 },
    UniformRandomOverSpan { span: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixTransport {
    Tcp,
    Udp,
}

impl MixTransport {
    pub fn transport(self) -> Transport {
        match self {
            MixTransport::Tcp => Transport::Tcp,
            MixTransport::Udp => Transport::Udp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortWeight {
    pub port: u16,
    pub transport: MixTransport,
    pub weight: f64,
    /// Destination pattern for this port; uniform over the telescope if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryWeight {
    pub country: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub duration_s: u64,
    /// First second of the trace, Unix epoch.
    pub start_ts_s: u64,
    pub rate_model: RateModel,
    pub pacing_model: PacingModel,
    pub source_pool: u32,
    #[serde(default)]
    pub port_mix: Vec<PortWeight>,
    /// Weight of TCP traffic spread uniformly over all 65536 ports.
    #[serde(default)]
    pub background_weight: f64,
    pub telescope_base: Ipv4Addr,
    pub telescope_size: u32,
    /// Source countries; sources are apportioned to countries by weight.
    #[serde(default)]
    pub geo_mix: Vec<CountryWeight>,
    /// Share of sources placed outside every generated prefix.
    #[serde(default)]
    pub unattributed_weight: f64,
}

const MAX_SOURCES_PER_GROUP: u32 = 1 << 24;
const MAX_COUNTRIES: usize = 99;
const FIRST_COUNTRY_OCTET: u32 = 100;
const UNATTRIBUTED_OCTET: u32 = 99;
const SCATTER: u32 = 0x009e_3779;
const TCP_IP_LENS: [u16; 3] = [40, 44, 60];
const RAW_IAT_LIMIT: usize = 100_000;

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn mean_rate_pps(&self) -> f64 {
        match self.rate_model {
            RateModel::ConstantRate { pps } => pps,
            RateModel::GaussianPerSecond { mu, .. } => mu,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidSpec(msg));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;

        if self.duration_s == 0 {
            return bad("duration_s must be at least 1".into());
        }
        let end = self.start_ts_s.checked_add(self.duration_s);
        if end.is_none_or(|e| e > u64::from(u32::MAX)) {
            return bad("trace must end before 2106 (32-bit pcap seconds)".into());
        }
        match self.rate_model {
            RateModel::ConstantRate { pps } if !finite_nonneg(pps) => {
                return bad(format!("rate {pps} is invalid"))
            }
            RateModel::GaussianPerSecond { mu, sigma }
                if !finite_nonneg(mu) || !finite_nonneg(sigma) =>
            {
                return bad(format!("gaussian rate ({mu}, {sigma}) is invalid"))
            }
            _ => {}
        }
        match self.pacing_model {
            PacingModel::FixedIat { ms } if !finite_pos(ms) => {
                return bad(format!("fixed IAT {ms} ms is invalid"))
            }
            PacingModel::LogUniformIat { lo_ms, hi_ms }
                if !(finite_pos(lo_ms) && finite_pos(hi_ms) && lo_ms < hi_ms) =>
            {
                return bad(format!(
                    "log-uniform IAT range [{lo_ms}, {hi_ms}) ms is invalid"
                ))
            }
            PacingModel::ExponentialIat { mean_ms } if !finite_pos(mean_ms) => {
                return bad(format!("exponential IAT mean {mean_ms} ms is invalid"))
            }
            _ => {}
        }
        if self.source_pool == 0 {
            return bad("source_pool must be at least 1".into());
        }
        if self.telescope_size == 0
            || u64::from(u32::from(self.telescope_base)) + u64::from(self.telescope_size) > 1 << 32
        {
            return bad("telescope range must be non-empty and inside IPv4".into());
        }

        if !finite_nonneg(self.background_weight) {
            return bad("background_weight must be finite and non-negative".into());
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.port_mix {
            if !finite_nonneg(p.weight) {
                return bad(format!("weight of port {} is invalid", p.port));
            }
            if !seen.insert((p.port, p.transport)) {
                return bad(format!(
                    "port {} listed twice for the same transport",
                    p.port
                ));
            }
            match p.sweep {
                Some(SweepModel::SequentialStride { stride: 0 }) => {
                    return bad(format!("port {}: stride must be >= 1", p.port))
                }
                Some(SweepModel::UniformRandomOverSpan { span: 0 }) => {
                    return bad(format!("port {}: span must be >= 1", p.port))
                }
                _ => {}
            }
        }
        let port_total =
            self.background_weight + self.port_mix.iter().map(|p| p.weight).sum::<f64>();
        if port_total.is_nan() || port_total <= 0.0 {
            return bad("port mix needs at least one positive weight".into());
        }

        if !finite_nonneg(self.unattributed_weight) {
            return bad("unattributed_weight must be finite and non-negative".into());
        }
        if self.geo_mix.len() > MAX_COUNTRIES {
            return bad(format!("at most {MAX_COUNTRIES} countries are supported"));
        }
        let mut countries = std::collections::HashSet::new();
        for c in &self.geo_mix {
            let code: crate::geo::CountryCode =
                c.country.parse().map_err(SynthError::InvalidSpec)?;
            if !countries.insert(code) {
                return bad(format!("country {code} listed twice"));
            }
            if !finite_nonneg(c.weight) {
                return bad(format!("weight of country {code} is invalid"));
            }
        }
        if !self.geo_mix.is_empty() {
            let geo_total =
                self.unattributed_weight + self.geo_mix.iter().map(|c| c.weight).sum::<f64>();
            if geo_total.is_nan() || geo_total <= 0.0 {
                return bad("geo mix needs at least one positive weight".into());
            }
        }
        if self
            .source_groups()
            .iter()
            .any(|g| g.count > MAX_SOURCES_PER_GROUP)
        {
            return bad("too many sources for one country block (limit 2^24)".into());
        }
        Ok(())
    }

    /// `cidr,country` lines covering every generated country block.
    pub fn prefix_table_csv(&self) -> Option<String> {
        if self.geo_mix.is_empty() {
            return None;
        }
        let mut out = String::from("cidr,country\n");
        for (k, c) in self.geo_mix.iter().enumerate() {
            out.push_str(&format!(
                "{}.0.0.0/8,{}\n",
                FIRST_COUNTRY_OCTET as usize + k,
                c.country.to_ascii_uppercase()
            ));
        }
        Some(out)
    }

    /// Contiguous source-index blocks by country, largest-remainder
    /// apportionment of `source_pool` over the geo weights.
    fn source_groups(&self) -> Vec<SourceGroup> {
        if self.geo_mix.is_empty() {
            return vec![SourceGroup {
                octet: UNATTRIBUTED_OCTET,
                label: None,
                count: self.source_pool,
            }];
        }
        let mut groups: Vec<(u32, Option<String>, f64)> = self
            .geo_mix
            .iter()
            .enumerate()
            .map(|(k, c)| {
                (
                    FIRST_COUNTRY_OCTET + k as u32,
                    Some(c.country.to_ascii_uppercase()),
                    c.weight,
                )
            })
            .collect();
        groups.push((UNATTRIBUTED_OCTET, None, self.unattributed_weight));
        let total: f64 = groups.iter().map(|g| g.2).sum();
        let pool = f64::from(self.source_pool);
        let mut counts: Vec<u32> = groups
            .iter()
            .map(|g| (g.2 / total * pool).floor() as u32)
            .collect();
        let assigned: u32 = counts.iter().sum();
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = groups[a].2 / total * pool - f64::from(counts[a]);
            let rb = groups[b].2 / total * pool - f64::from(counts[b]);
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order
            .iter()
            .cycle()
            .take(self.source_pool.saturating_sub(assigned) as usize)
        {
            counts[i] += 1;
        }
        groups
            .into_iter()
            .zip(counts)
            .map(|((octet, label, _), count)| SourceGroup {
                octet,
                label,
                count,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct SourceGroup {
    octet: u32,
    label: Option<String>,
    count: u32,
}

pub const PRESET_NAMES: [&str; 2] = ["baseline-2021-like", "paced-botnet-2025-like"];

fn pw(port: u16, transport: MixTransport, weight: f64, sweep: Option<SweepModel>) -> PortWeight {
    PortWeight {
        port,
        transport,
        weight,
        sweep,
    }
}

fn geo(pairs: &[(&str, f64)]) -> Vec<CountryWeight> {
    pairs
        .iter()
        .map(|&(c, w)| CountryWeight {
            country: c.to_string(),
            weight: w,
        })
        .collect()
}

/// Named scenarios: a bursty, port-diverse baseline year and a paced,
/// port-concentrated botnet year that stays inside the baseline's variance.
pub fn preset(name: &str) -> Result<SynthSpec, SynthError> {
    use MixTransport::{Tcp, Udp};
    use SweepModel::{SequentialStride, UniformRandomOverSpan};
    let telescope_base = Ipv4Addr::new(35, 0, 0, 0);
    let telescope_size = 475_136;
    let random = Some(UniformRandomOverSpan {
        span: telescope_size,
    });
    let spec = match name {
        "baseline-2021-like" => SynthSpec {
            seed: 2021,
            duration_s: 10_800,
            start_ts_s: 1_610_668_800,
            rate_model: RateModel::GaussianPerSecond {
                mu: 45.0,
                sigma: 9.0,
            },
            pacing_model: PacingModel::ExponentialIat { mean_ms: 0.5 },
            source_pool: 4096,
            port_mix: vec![
                pw(23, Tcp, 0.040, None),
                pw(22, Tcp, 0.030, None),
                pw(445, Tcp, 0.030, None),
                pw(80, Tcp, 0.020, None),
                pw(3389, Tcp, 0.015, None),
                pw(8080, Tcp, 0.007, None),
                pw(161, Udp, 0.004, random.clone()),
                pw(502, Tcp, 0.0015, random.clone()),
                pw(102, Tcp, 0.0008, random.clone()),
                pw(47808, Udp, 0.0007, random.clone()),
                pw(20000, Tcp, 0.0005, random.clone()),
                pw(2222, Tcp, 0.0005, random.clone()),
            ],
            background_weight: 0.850,
            telescope_base,
            telescope_size,
            geo_mix: geo(&[
                ("RU", 0.25),
                ("US", 0.17),
                ("GB", 0.12),
                ("CN", 0.09),
                ("IR", 0.06),
                ("NL", 0.03),
                ("DE", 0.02),
                ("SG", 0.012),
                ("BG", 0.008),
                ("UA", 0.008),
                ("HK", 0.007),
                ("FR", 0.006),
                ("RO", 0.005),
                ("CA", 0.005),
                ("SC", 0.001),
            ]),
            unattributed_weight: 0.02,
        },
        "paced-botnet-2025-like" => SynthSpec {
            seed: 2025,
            duration_s: 10_800,
            start_ts_s: 1_736_899_200,
            rate_model: RateModel::GaussianPerSecond {
                mu: 46.0,
                sigma: 3.0,
            },
            pacing_model: PacingModel::LogUniformIat {
                lo_ms: 1.0,
                hi_ms: 100.0,
            },
            source_pool: 65_536,
            port_mix: vec![
                pw(23, Tcp, 0.200, None),
                pw(22, Tcp, 0.150, None),
                pw(80, Tcp, 0.120, None),
                pw(443, Tcp, 0.100, None),
                pw(8080, Tcp, 0.080, None),
                pw(3389, Tcp, 0.070, None),
                pw(445, Tcp, 0.050, None),
                pw(5555, Tcp, 0.030, None),
                pw(2222, Tcp, 0.0060, Some(SequentialStride { stride: 1 })),
                pw(502, Tcp, 0.0030, Some(SequentialStride { stride: 4 })),
                pw(44818, Tcp, 0.0020, Some(SequentialStride { stride: 1 })),
                pw(102, Tcp, 0.0010, random.clone()),
                pw(20000, Tcp, 0.0010, random.clone()),
                pw(47808, Udp, 0.0010, random.clone()),
                pw(161, Udp, 0.0010, random),
            ],
            background_weight: 0.185,
            telescope_base,
            telescope_size,
            geo_mix: geo(&[
                ("US", 0.30),
                ("NL", 0.09),
                ("BG", 0.09),
                ("RO", 0.06),
                ("GB", 0.05),
                ("DE", 0.045),
                ("CN", 0.045),
                ("RU", 0.03),
                ("CA", 0.022),
                ("FR", 0.02),
                ("UA", 0.018),
                ("SC", 0.015),
                ("HK", 0.014),
                ("SG", 0.011),
                ("IR", 0.002),
            ]),
            unattributed_weight: 0.02,
        },
        other => return Err(SynthError::UnknownPreset(other.to_string())),
    };
    spec.validate()?;
    Ok(spec)
}

/// The documented draw primitives over ChaCha20.
#[derive(Debug, Clone)]
pub struct SynthRng(ChaCha20Rng);

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        SynthRng(ChaCha20Rng::from_seed(key))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let mut m = u128::from(self.next_u64()) * u128::from(n);
        if (m as u64) < n {
            let floor = n.wrapping_neg() % n;
            while (m as u64) < floor {
                m = u128::from(self.next_u64()) * u128::from(n);
            }
        }
        (m >> 64) as u64
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn exponential(&mut self, mean: f64) -> f64 {
        -mean * (1.0 - self.uniform()).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortCount {
    pub transport: Transport,
    pub port: u16,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCount {
    pub ip: u32,
    pub count: u64,
}

/// Exact bookkeeping of what the generator emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub total_records: u64,
    pub total_bytes: u64,
    pub first_ts_us: Option<u64>,
    pub last_ts_us: Option<u64>,
    /// Every (transport, destination port) that received traffic, sorted.
    pub dst_ports: Vec<PortCount>,
    /// Every source address that sent traffic, sorted by address.
    pub sources: Vec<SourceCount>,
    /// Packets per generated source country, plus `Unattributed`.
    pub countries: BTreeMap<String, u64>,
    /// IATs of the whole stream in microseconds; kept only for small runs.
    pub raw_iats_us: Option<Vec<u64>>,
    /// IAT histogram of the whole stream taken as one sequence.
    pub iat_histogram: IatHistogram,
    pub per_second_counts: Vec<u64>,
}

impl GroundTruth {
    pub fn port_count(&self, transport: Transport, port: u16) -> u64 {
        self.dst_ports
            .iter()
            .find(|p| p.transport == transport && p.port == port)
            .map_or(0, |p| p.count)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self).map_err(std::io::Error::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file).map_err(std::io::Error::from)?)
    }
}

#[derive(Debug, Default)]
struct TruthBuilder {
    total_records: u64,
    total_bytes: u64,
    first_ts_us: Option<u64>,
    last_ts_us: Option<u64>,
    dst_ports: FxHashMap<(Transport, u16), u64>,
    sources: FxHashMap<u32, u64>,
    groups: Vec<u64>,
    raw_iats_us: Option<Vec<u64>>,
    iat_histogram: IatHistogram,
    per_second_counts: Vec<u64>,
}

#[derive(Debug, Clone)]
struct Mix {
    cumulative: Vec<f64>,
    total: f64,
}

impl Mix {
    fn new(weights: impl IntoIterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = weights
            .into_iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Mix {
            cumulative,
            total: acc,
        }
    }

    fn pick(&self, rng: &mut SynthRng) -> usize {
        let x = rng.uniform() * self.total;
        self.cumulative
            .partition_point(|&c| c <= x)
            .min(self.cumulative.len() - 1)
    }
}

/// Streaming generator; records come out in non-decreasing timestamp order.
pub struct SynthStream {
    spec: SynthSpec,
    rng: SynthRng,
    second: u64,
    batch: Vec<PacketRecord>,
    pos: usize,
    offsets: Vec<f64>,
    port_mix: Mix,
    sweep_cursors: Vec<u64>,
    groups: Vec<SourceGroup>,
    group_starts: Vec<u32>,
    telescope_base: u32,
    truth: TruthBuilder,
    const_carry: f64,
}

impl SynthStream {
    pub fn new(spec: SynthSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let groups = spec.source_groups();
        let mut group_starts = Vec::with_capacity(groups.len());
        let mut acc = 0u32;
        for g in &groups {
            group_starts.push(acc);
            acc += g.count;
        }
        let port_mix = Mix::new(
            spec.port_mix
                .iter()
                .map(|p| p.weight)
                .chain([spec.background_weight]),
        );
        Ok(SynthStream {
            rng: SynthRng::new(spec.seed),
            second: 0,
            batch: Vec::new(),
            pos: 0,
            offsets: Vec::new(),
            sweep_cursors: vec![0; spec.port_mix.len()],
            truth: TruthBuilder {
                groups: vec![0; groups.len()],
                raw_iats_us: Some(Vec::new()),
                ..Default::default()
            },
            telescope_base: u32::from(spec.telescope_base),
            port_mix,
            groups,
            group_starts,
            spec,
            const_carry: 0.0,
        })
    }

    fn second_count(&mut self) -> u64 {
        match self.spec.rate_model {
            RateModel::ConstantRate { pps } => {
                let next = self.const_carry + pps;
                let n = next.floor();
                self.const_carry = next - n;
                n as u64
            }
            RateModel::GaussianPerSecond { mu, sigma } => {
                let z = self.rng.standard_normal();
                (mu + sigma * z).round().max(0.0) as u64
            }
        }
    }

    /// Offsets within the second in microseconds, ascending, each < 1e6.
    fn place(&mut self, count: usize) {
        let offsets = &mut self.offsets;
        offsets.clear();
        let gap_ms = |rng: &mut SynthRng, model: &PacingModel| -> f64 {
            match *model {
                PacingModel::FixedIat { ms } => ms,
                PacingModel::LogUniformIat { lo_ms, hi_ms } => {
                    (lo_ms.ln() + rng.uniform() * (hi_ms.ln() - lo_ms.ln())).exp()
                }
                PacingModel::ExponentialIat { mean_ms } => rng.exponential(mean_ms),
                PacingModel::UniformSpread => unreachable!(),
            }
        };
        match self.spec.pacing_model {
            PacingModel::UniformSpread => {
                for _ in 0..count {
                    offsets.push(self.rng.below(1_000_000) as f64);
                }
                offsets.sort_by(f64::total_cmp);
            }
            ref model => {
                // Gap i follows packet i; the last gap reaches into the next
                // second. All gaps shrink together when they overrun it.
                let model = model.clone();
                let mut gaps = Vec::with_capacity(count);
                for _ in 0..count {
                    gaps.push(gap_ms(&mut self.rng, &model) * 1000.0);
                }
                let sum: f64 = gaps.iter().sum();
                let scale = if sum > 1_000_000.0 {
                    1_000_000.0 / sum
                } else {
                    1.0
                };
                let mut t = 0.0f64;
                for g in &gaps {
                    offsets.push(t.floor().min(999_999.0));
                    t += g * scale;
                }
            }
        }
    }

    fn fill_second(&mut self) {
        let count = self.second_count() as usize;
        self.place(count);
        self.truth.per_second_counts.push(count as u64);
        let base_us = (self.spec.start_ts_s + self.second) * 1_000_000;
        self.batch.clear();
        self.pos = 0;
        for i in 0..count {
            let ts_us = base_us + self.offsets[i] as u64;
            let rec = self.draw_packet(ts_us);
            self.batch.push(rec);
        }
        self.second += 1;
    }

    fn draw_packet(&mut self, ts_us: u64) -> PacketRecord {
        let pool = self.spec.source_pool;
        let source_idx = self.rng.below(u64::from(pool)) as u32;
        let g = self.group_starts.partition_point(|&s| s <= source_idx) - 1;
        let local = source_idx - self.group_starts[g];
        let src_ip = (self.groups[g].octet << 24) | (local.wrapping_mul(SCATTER) & 0x00ff_ffff);

        let slot = self.port_mix.pick(&mut self.rng);
        let size = u64::from(self.spec.telescope_size);
        let (transport, dst_port, dst_offset) = match self.spec.port_mix.get(slot) {
            Some(p) => {
                let offset = match p.sweep {
                    Some(SweepModel::SequentialStride { stride }) => {
                        let c = self.sweep_cursors[slot];
                        self.sweep_cursors[slot] += 1;
                        c.wrapping_mul(u64::from(stride)) % size
                    }
                    Some(SweepModel::UniformRandomOverSpan { span }) => {
                        self.rng.below(u64::from(span).min(size))
                    }
                    None => self.rng.below(size),
                };
                (p.transport.transport(), p.port, offset)
            }
            None => {
                let port = self.rng.below(65_536) as u16;
                (Transport::Tcp, port, self.rng.below(size))
            }
        };
        let dst_ip = self.telescope_base + dst_offset as u32;
        let src_port = 1024 + self.rng.below(64_512) as u16;
        let ip_len = match transport {
            Transport::Tcp => TCP_IP_LENS[self.rng.below(3) as usize],
            _ => 28 + self.rng.below(201) as u16,
        };

        let t = &mut self.truth;
        if let Some(prev) = t.last_ts_us {
            let iat = ts_us - prev;
            t.iat_histogram.add_us(iat);
            if let Some(raw) = &mut t.raw_iats_us {
                if raw.len() < RAW_IAT_LIMIT {
                    raw.push(iat);
                } else {
                    t.raw_iats_us = None;
                }
            }
        }
        t.first_ts_us.get_or_insert(ts_us);
        t.last_ts_us = Some(ts_us);
        t.total_records += 1;
        t.total_bytes += u64::from(ip_len);
        *t.dst_ports.entry((transport, dst_port)).or_insert(0) += 1;
        *t.sources.entry(src_ip).or_insert(0) += 1;
        t.groups[g] += 1;

        PacketRecord {
            ts_us,
            src_ip,
            dst_ip,
            transport,
            src_port: Some(src_port),
            dst_port: Some(dst_port),
            ip_len,
        }
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// Bookkeeping for everything yielded so far.
    pub fn ground_truth(&self) -> GroundTruth {
        let t = &self.truth;
        let mut dst_ports: Vec<PortCount> = t
            .dst_ports
            .iter()
            .map(|(&(transport, port), &count)| PortCount {
                transport,
                port,
                count,
            })
            .collect();
        dst_ports.sort_by_key(|p| (p.transport, p.port));
        let mut sources: Vec<SourceCount> = t
            .sources
            .iter()
            .map(|(&ip, &count)| SourceCount { ip, count })
            .collect();
        sources.sort_by_key(|s| s.ip);
        let mut countries = BTreeMap::new();
        for (g, &n) in self.groups.iter().zip(&t.groups) {
            let key = g
                .label
                .clone()
                .unwrap_or_else(|| crate::geo::GeoKey::UNATTRIBUTED_LABEL.to_string());
            *countries.entry(key).or_insert(0) += n;
        }
        GroundTruth {
            seed: self.spec.seed,
            total_records: t.total_records,
            total_bytes: t.total_bytes,
            first_ts_us: t.first_ts_us,
            last_ts_us: t.last_ts_us,
            dst_ports,
            sources,
            countries,
            raw_iats_us: t.raw_iats_us.clone(),
            iat_histogram: t.iat_histogram.clone(),
            per_second_counts: t.per_second_counts.clone(),
        }
    }
}

impl Iterator for SynthStream {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        while self.pos == self.batch.len() {
            if self.second == self.spec.duration_s {
                return None;
            }
            self.fill_second();
        }
        let rec = self.batch[self.pos];
        self.pos += 1;
        Some(rec)
    }
}

/// Generates the full trace in memory.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<PacketRecord>, GroundTruth), SynthError> {
    let mut stream = SynthStream::new(spec.clone())?;
    let records: Vec<PacketRecord> = stream.by_ref().collect();
    let truth = stream.ground_truth();
    Ok((records, truth))
}
