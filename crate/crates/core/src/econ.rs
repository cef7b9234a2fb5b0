//! Bandwidth cost and download-time projections.
//!
//! All byte quantities are decimal (GB = 10^9 bytes, MB/s = 10^6 bytes/s).
//! [`UnitSystem::Binary`] exists to show what happens when quoted sizes are
//! read with binary prefixes instead: the published figures stop matching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tracker::TransferLedger;

pub const KB: f64 = 1e3;
pub const MB: f64 = 1e6;
pub const GB: f64 = 1e9;
pub const TB: f64 = 1e12;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// Default price per decimal GB transferred, in USD.
pub const DEFAULT_PRICE_PER_GB: f64 = 0.0275;
/// Observed swarm amplification, used verbatim as the projection constant.
pub const DEFAULT_AMPLIFICATION: f64 = 42.067;
pub const DEFAULT_DOWNLOADS: u64 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EconError {
    #[error("origin uploaded zero bytes; ratio undefined")]
    ZeroUpload,
    #[error("invalid cost model: {0}")]
    InvalidModel(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prefix {
    Kilo,
    Mega,
    Giga,
    Tera,
}

/// How a quoted "GB"/"MB/s" figure is turned into bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnitSystem {
    #[default]
    Decimal,
    Binary,
}

impl UnitSystem {
    pub fn multiplier(self, prefix: Prefix) -> f64 {
        let exp = match prefix {
            Prefix::Kilo => 1,
            Prefix::Mega => 2,
            Prefix::Giga => 3,
            Prefix::Tera => 4,
        };
        match self {
            UnitSystem::Decimal => 1000f64.powi(exp),
            UnitSystem::Binary => 1024f64.powi(exp),
        }
    }

    pub fn bytes(self, value: f64, prefix: Prefix) -> f64 {
        value * self.multiplier(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// USD per decimal GB.
    pub price_per_gb: f64,
    /// Baseline client-server download speed, bytes/s.
    pub http_speed: f64,
    /// Swarm download speed, bytes/s.
    pub swarm_speed: f64,
    pub amplification: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::with_units(UnitSystem::Decimal)
    }
}

impl CostModel {
    /// Defaults (500 KB/s over HTTP, 34 MB/s in the swarm) read under `units`.
    pub fn with_units(units: UnitSystem) -> Self {
        CostModel {
            price_per_gb: DEFAULT_PRICE_PER_GB,
            http_speed: units.bytes(500.0, Prefix::Kilo),
            swarm_speed: units.bytes(34.0, Prefix::Mega),
            amplification: DEFAULT_AMPLIFICATION,
        }
    }

    pub fn validate(&self) -> Result<(), EconError> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.price_per_gb) {
            return Err(EconError::InvalidModel("price_per_gb must be > 0"));
        }
        if !positive(self.http_speed) {
            return Err(EconError::InvalidModel("http_speed must be > 0"));
        }
        if !positive(self.swarm_speed) {
            return Err(EconError::InvalidModel("swarm_speed must be > 0"));
        }
        if !positive(self.amplification) {
            return Err(EconError::InvalidModel("amplification must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(rename = "size_bytes")]
    pub size: f64,
    #[serde(default = "default_downloads")]
    pub downloads: u64,
}

fn default_downloads() -> u64 {
    DEFAULT_DOWNLOADS
}

impl DatasetSpec {
    pub fn new(name: impl Into<String>, size: f64, downloads: u64) -> Self {
        DatasetSpec {
            name: name.into(),
            size,
            downloads,
        }
    }
}

/// The three projected challenges, sizes quoted in GB and read under `units`.
pub fn challenge_datasets(units: UnitSystem) -> Vec<DatasetSpec> {
    [("Whale", 8.73), ("Diabetes", 82.2), ("ImageNet", 157.3)]
        .into_iter()
        .map(|(name, gb)| DatasetSpec::new(name, units.bytes(gb, Prefix::Giga), DEFAULT_DOWNLOADS))
        .collect()
}

/// Total bytes downloaded divided by bytes the origin uploaded.
pub fn amplification_ratio(seeder_uploaded: f64, total_downloaded: f64) -> Result<f64, EconError> {
    if seeder_uploaded <= 0.0 {
        return Err(EconError::ZeroUpload);
    }
    Ok(total_downloaded / seeder_uploaded)
}

/// How many times the rest of the community matched the origin's upload:
/// `(total - seeder) / seeder`.
pub fn community_multiple(seeder_uploaded: f64, total_downloaded: f64) -> Result<f64, EconError> {
    amplification_ratio(seeder_uploaded, total_downloaded).map(|r| r - 1.0)
}

pub fn transfer_cost(bytes: f64, model: &CostModel) -> f64 {
    bytes / GB * model.price_per_gb
}

/// Seconds to move `bytes` at `speed` bytes/s. `speed` must be positive.
pub fn download_time(bytes: f64, speed: f64) -> f64 {
    assert!(speed > 0.0, "download speed must be positive");
    bytes / speed
}

pub fn round_cents(usd: f64) -> f64 {
    (usd * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionRow {
    pub name: String,
    pub downloads: u64,
    /// Bytes the origin serves over plain HTTP.
    pub http_upload: f64,
    /// Bytes the origin serves with the swarm amplifying it.
    pub at_upload: f64,
    pub dollar_savings: f64,
    /// Seconds.
    pub http_time: f64,
    pub at_time: f64,
    pub time_savings: f64,
}

pub fn project_row(ds: &DatasetSpec, model: &CostModel, n_downloads: u64) -> ProjectionRow {
    let http_upload = n_downloads as f64 * ds.size;
    let at_upload = http_upload / model.amplification;
    let http_time = download_time(ds.size, model.http_speed);
    let at_time = download_time(ds.size, model.swarm_speed);
    ProjectionRow {
        name: ds.name.clone(),
        downloads: n_downloads,
        http_upload,
        at_upload,
        dollar_savings: transfer_cost(http_upload - at_upload, model),
        http_time,
        at_time,
        time_savings: http_time - at_time,
    }
}

/// One row per dataset, each with its own download count.
pub fn project_table(datasets: &[DatasetSpec], model: &CostModel) -> Vec<ProjectionRow> {
    datasets
        .iter()
        .map(|ds| project_row(ds, model, ds.downloads))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseStudy {
    pub dataset: String,
    pub downloads: u64,
    /// Cost of one download, rounded to cents.
    pub per_download_cost: f64,
    pub http_equivalent_cost: f64,
    pub actual_cost: f64,
    /// Total downloaded / origin uploaded.
    pub ratio: f64,
    /// (Total downloaded - origin uploaded) / origin uploaded.
    pub community_multiple: f64,
}

pub fn case_study_report(
    ledger: &TransferLedger,
    downloads: u64,
    ds: &DatasetSpec,
    model: &CostModel,
) -> Result<CaseStudy, EconError> {
    let uploaded = ledger.seeder_uploaded as f64;
    let downloaded = ledger.total_downloaded as f64;
    let ratio = amplification_ratio(uploaded, downloaded)?;
    // Per-download cost is billed in whole cents before multiplying.
    let per_download_cost = round_cents(transfer_cost(ds.size, model));
    Ok(CaseStudy {
        dataset: ds.name.clone(),
        downloads,
        per_download_cost,
        http_equivalent_cost: per_download_cost * downloads as f64,
        actual_cost: transfer_cost(uploaded, model),
        ratio,
        community_multiple: ratio - 1.0,
    })
}

/// The Reddit comments ledger: 366.68 GB uploaded by the origin, 15.43 TB
/// downloaded in total, 96 downloads of a 160.68 GB archive.
pub fn reddit_case() -> (TransferLedger, u64, DatasetSpec) {
    let ledger = TransferLedger {
        seeder_uploaded: (366.68 * GB).round() as u64,
        total_downloaded: (15.43 * TB).round() as u64,
    };
    (ledger, 96, DatasetSpec::new("Reddit comments", 160.68 * GB, 96))
}
