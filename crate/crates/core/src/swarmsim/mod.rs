//! Offline comparison of client-server and swarm distribution.
//!
//! Two fidelities share one rate model ([`allocate_rates`]):
//!
//! * `fluid` integrates per-peer download rates with a fixed step.
//! * `piece_level` is a discrete-event run that moves whole pieces, chosen
//!   rarest-first, each attributed to a single source.
//!
//! In `http_only` mode the server is the only source and its upload is split
//! max-min among downloading peers. In `hybrid` mode every present peer adds
//! `up_cap * completed_fraction` to the pool; a peer never counts its own
//! supply, and bytes are attributed to sources in proportion to supply.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

mod fluid;
mod piece;

pub const DEFAULT_TIME_CAP: f64 = 1e6;
pub const DEFAULT_SIM_PIECE_LENGTH: u64 = 256 * 1024;
const SERIES_POINTS: f64 = 500.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenario did not finish within {time_cap} s of simulated time")]
    StalledScenario { time_cap: f64 },
    #[error("server uploaded nothing; amplification is undefined")]
    ZeroServerUpload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    HttpOnly,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    #[default]
    Fluid,
    PieceLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSpec {
    /// Seconds.
    #[serde(default)]
    pub arrival: f64,
    /// Bytes per second.
    pub down_cap: f64,
    /// Bytes per second.
    pub up_cap: f64,
}

impl PeerSpec {
    pub fn new(arrival: f64, down_cap: f64, up_cap: f64) -> Self {
        PeerSpec {
            arrival,
            down_cap,
            up_cap,
        }
    }
}

fn default_time_cap() -> f64 {
    DEFAULT_TIME_CAP
}

/// Scenario file schema; sizes in bytes, rates in bytes/s, times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwarmScenario {
    pub file_size: u64,
    pub mode: Mode,
    pub server_up: f64,
    pub peers: Vec<PeerSpec>,
    /// Fluid step; defaults to `0.01 * file_size / server_up` clamped to
    /// [1 ms, 1 s].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub fidelity: Fidelity,
    /// Piece size for `piece_level`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piece_length: Option<u64>,
    /// Fluid mode only: completed peers stay and keep uploading.
    /// `piece_level` always keeps them.
    #[serde(default)]
    pub seed_after: bool,
    #[serde(default = "default_time_cap")]
    pub time_cap: f64,
}

impl SwarmScenario {
    pub fn new(file_size: u64, mode: Mode, server_up: f64, peers: Vec<PeerSpec>) -> Self {
        SwarmScenario {
            file_size,
            mode,
            server_up,
            peers,
            dt: None,
            rng_seed: 0,
            fidelity: Fidelity::Fluid,
            piece_length: None,
            seed_after: false,
            time_cap: DEFAULT_TIME_CAP,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: SwarmScenario =
            serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if self.file_size == 0 {
            return bad("file_size must be positive".into());
        }
        if !positive(self.server_up) {
            return bad("server_up must be positive".into());
        }
        if self.peers.is_empty() {
            return bad("at least one peer is required".into());
        }
        for (i, p) in self.peers.iter().enumerate() {
            if !positive(p.down_cap) || !positive(p.up_cap) {
                return bad(format!("peer {i}: capacities must be positive"));
            }
            if !(p.arrival.is_finite() && p.arrival >= 0.0) {
                return bad(format!("peer {i}: arrival must be non-negative"));
            }
        }
        if let Some(dt) = self.dt {
            if !positive(dt) {
                return bad("dt must be positive".into());
            }
        }
        if self.piece_length == Some(0) {
            return bad("piece_length must be positive".into());
        }
        if !positive(self.time_cap) {
            return bad("time_cap must be positive".into());
        }
        Ok(())
    }

    pub fn effective_dt(&self) -> f64 {
        self.dt
            .unwrap_or_else(|| (0.01 * self.file_size as f64 / self.server_up).clamp(1e-3, 1.0))
    }

    pub fn effective_piece_length(&self) -> u64 {
        self.piece_length.unwrap_or(DEFAULT_SIM_PIECE_LENGTH)
    }

    /// Time scale for sampling the progress series.
    fn series_interval(&self) -> f64 {
        let n = self.peers.len() as f64;
        n * self.file_size as f64 / self.server_up / SERIES_POINTS
    }
}

/// Rates are bytes/s. `supply[j]` is what peer `j` can currently upload
/// (zero for absent peers and in `http_only`); `active[i]` marks peers that
/// are downloading.
#[derive(Debug, Clone, Copy)]
pub struct RateState<'a> {
    pub mode: Mode,
    pub server_up: f64,
    pub down_caps: &'a [f64],
    pub supply: &'a [f64],
    pub active: &'a [bool],
}

impl RateState<'_> {
    /// Total upload capacity offered to the swarm.
    pub fn pool(&self) -> f64 {
        match self.mode {
            Mode::HttpOnly => self.server_up,
            Mode::Hybrid => self.server_up + self.supply.iter().sum::<f64>(),
        }
    }

    /// Share of peer `i`'s download that comes from the server.
    pub fn server_share(&self, pool: f64, i: usize) -> f64 {
        match self.mode {
            Mode::HttpOnly => 1.0,
            Mode::Hybrid => self.server_up / (pool - self.supply[i]),
        }
    }
}

/// Max-min fair split of `capacity` among flows limited by `caps`
/// (progressive filling). Flows with equal caps get equal rates.
pub fn water_fill(capacity: f64, caps: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..caps.len()).collect();
    order.sort_by(|&a, &b| caps[a].total_cmp(&caps[b]).then(a.cmp(&b)));
    let mut rates = vec![0.0; caps.len()];
    let mut left = capacity.max(0.0);
    for (k, &i) in order.iter().enumerate() {
        let share = left / (order.len() - k) as f64;
        let r = caps[i].min(share);
        rates[i] = r;
        left -= r;
    }
    rates
}

/// Download rate of every peer (zero for inactive ones).
pub fn allocate_rates(state: &RateState) -> Vec<f64> {
    let n = state.down_caps.len();
    let pool = state.pool();
    let idx: Vec<usize> = (0..n).filter(|&i| state.active[i]).collect();
    let caps: Vec<f64> = idx
        .iter()
        .map(|&i| match state.mode {
            Mode::HttpOnly => state.down_caps[i],
            Mode::Hybrid => state.down_caps[i].min(pool - state.supply[i]),
        })
        .collect();
    let mut rates = vec![0.0; n];
    for (k, r) in water_fill(pool, &caps).into_iter().enumerate() {
        rates[idx[k]] = r;
    }
    rates
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub time: f64,
    /// Fraction of the file each peer holds.
    pub progress: Vec<f64>,
    pub server_uploaded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub mode: Mode,
    pub fidelity: Fidelity,
    /// Completion time of each peer, seconds.
    pub completion: Vec<f64>,
    pub server_uploaded: f64,
    pub uploaded: Vec<f64>,
    pub downloaded: Vec<f64>,
    pub amplification: f64,
    /// Whether completed peers kept uploading.
    pub seeders_linger: bool,
    pub makespan: f64,
    /// Fluid steps or piece events processed.
    pub steps: u64,
    /// SHA-256 over the ordered event trace.
    pub trace_digest: String,
    #[serde(skip)]
    pub series: Vec<Sample>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `time,server_uploaded,peer0,peer1,...` with progress fractions.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("time,server_uploaded");
        for i in 0..self.completion.len() {
            let _ = write!(out, ",peer{i}");
        }
        out.push('\n');
        for s in &self.series {
            let _ = write!(out, "{},{}", s.time, s.server_uploaded);
            for p in &s.progress {
                let _ = write!(out, ",{p}");
            }
            out.push('\n');
        }
        out
    }

    pub fn total_downloaded(&self) -> f64 {
        self.downloaded.iter().sum()
    }
}

/// Total downloaded by all peers over bytes the server uploaded.
pub fn report_amplification(r: &SimReport) -> Result<f64, SimError> {
    if r.server_uploaded <= 0.0 {
        return Err(SimError::ZeroServerUpload);
    }
    Ok(r.total_downloaded() / r.server_uploaded)
}

pub fn simulate(s: &SwarmScenario) -> Result<SimReport, SimError> {
    s.validate()?;
    match s.fidelity {
        Fidelity::Fluid => fluid::run(s),
        Fidelity::PieceLevel => piece::run(s),
    }
}

/// Ordered event log hashed into the report digest.
struct Trace(Sha256);

impl Trace {
    fn new(s: &SwarmScenario) -> Self {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(s).expect("scenario serializes"));
        Trace(h)
    }

    fn event(&mut self, kind: u8, time: f64, fields: &[u64]) {
        self.0.update([kind]);
        self.0.update(time.to_bits().to_be_bytes());
        for f in fields {
            self.0.update(f.to_be_bytes());
        }
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Earliest arrival strictly after `t`.
fn next_arrival(peers: &[PeerSpec], t: f64) -> Option<f64> {
    peers
        .iter()
        .map(|p| p.arrival)
        .filter(|&a| a > t)
        .min_by(f64::total_cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: f64 = 1e6;

    #[test]
    fn equal_split() {
        let caps = [10.0 * MB; 4];
        let state = RateState {
            mode: Mode::HttpOnly,
            server_up: 10.0 * MB,
            down_caps: &caps,
            supply: &[0.0; 4],
            active: &[true; 4],
        };
        assert_eq!(allocate_rates(&state), vec![2.5 * MB; 4]);
    }

    #[test]
    fn water_filling_redistributes() {
        let caps = [1.0 * MB, 20.0 * MB];
        let state = RateState {
            mode: Mode::HttpOnly,
            server_up: 10.0 * MB,
            down_caps: &caps,
            supply: &[0.0; 2],
            active: &[true, true],
        };
        assert_eq!(allocate_rates(&state), vec![1.0 * MB, 9.0 * MB]);
    }

    #[test]
    fn last_leecher_saturates() {
        let down = [100.0 * MB, 100.0 * MB, 100.0 * MB, 30.0 * MB];
        let supply = [5.0 * MB, 7.0 * MB, 3.0 * MB, 0.0];
        let state = RateState {
            mode: Mode::Hybrid,
            server_up: 10.0 * MB,
            down_caps: &down,
            supply: &supply,
            active: &[false, false, false, true],
        };
        assert_eq!(allocate_rates(&state)[3], 25.0 * MB);
        let wide = [100.0 * MB; 4];
        let state = RateState {
            down_caps: &wide,
            ..state
        };
        assert_eq!(allocate_rates(&state)[3], 25.0 * MB);
        let narrow = [1.0 * MB; 4];
        let state = RateState {
            down_caps: &narrow,
            ..state
        };
        assert_eq!(allocate_rates(&state)[3], 1.0 * MB);
    }

    #[test]
    fn own_supply_is_excluded() {
        let state = RateState {
            mode: Mode::Hybrid,
            server_up: 1.0 * MB,
            down_caps: &[50.0 * MB],
            supply: &[4.0 * MB],
            active: &[true],
        };
        assert_eq!(allocate_rates(&state), vec![1.0 * MB]);
        assert_eq!(state.server_share(state.pool(), 0), 1.0);
    }

    #[test]
    fn validation() {
        let ok = SwarmScenario::new(10, Mode::Hybrid, 1.0, vec![PeerSpec::new(0.0, 1.0, 1.0)]);
        assert!(ok.validate().is_ok());
        let mut s = ok.clone();
        s.file_size = 0;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.peers[0].up_cap = 0.0;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.peers[0].arrival = -1.0;
        assert!(s.validate().is_err());
        let mut s = ok.clone();
        s.dt = Some(0.0);
        assert!(s.validate().is_err());
        let mut s = ok;
        s.peers.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn scenario_json() {
        let s = SwarmScenario::from_json(
            r#"{"file_size": 100, "mode": "hybrid", "server_up": 10,
                "peers": [{"arrival": 0, "down_cap": 5, "up_cap": 5}],
                "fidelity": "piece_level", "piece_length": 16}"#,
        )
        .unwrap();
        assert_eq!(s.fidelity, Fidelity::PieceLevel);
        assert_eq!(s.time_cap, DEFAULT_TIME_CAP);
        assert!(SwarmScenario::from_json(r#"{"file_size": 1}"#).is_err());
        assert!(SwarmScenario::from_json(
            r#"{"file_size": 1, "mode": "p2p", "server_up": 1, "peers": []}"#
        )
        .is_err());
    }

    #[test]
    fn default_dt_is_clamped() {
        let mut s = SwarmScenario::new(1_000_000_000, Mode::HttpOnly, 1e6, vec![PeerSpec::new(0.0, 1.0, 1.0)]);
        assert_eq!(s.effective_dt(), 1.0);
        s.file_size = 10;
        assert_eq!(s.effective_dt(), 1e-3);
        s.file_size = 10_000_000;
        assert!((s.effective_dt() - 0.1).abs() < 1e-12);
    }
}
