use std::fs;
use std::future::Future;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use swarmshare::econ::{
    case_study_report, project_table, CaseStudy, CostModel, DatasetSpec, ProjectionRow,
    DEFAULT_DOWNLOADS, SECONDS_PER_HOUR,
};
use swarmshare::metainfo::{build_from_path, parse_metainfo, verify_content, Metainfo, MetainfoError};
use swarmshare::peer::{generate_peer_id, Node, NodeConfig, PeerError, Role, SessionReport, CLIENT_PEER_PREFIX};
use swarmshare::swarmsim::{simulate, SimError, SimReport, SwarmScenario};
use swarmshare::tracker::{serve, Tracker, TrackerConfig, TransferLedger, DEFAULT_ORIGIN_PREFIX};
use tracing::info;

use crate::units::format_bytes;
use crate::{Failure, Format};

const BUNDLED_DATASETS: &str = include_str!("../fixtures/datasets.json");

type CmdResult = Result<(), Failure>;

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::usage(format!("cannot start runtime: {e}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_torrent(path: &Path) -> Result<Metainfo, Failure> {
    let bytes = read_file(path)?;
    parse_metainfo(&bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
}

fn write_csv<T: Serialize>(rows: &[T]) -> CmdResult {
    let mut w = csv::Writer::from_writer(io::stdout());
    for row in rows {
        w.serialize(row).map_err(Failure::usage)?;
    }
    w.flush().map_err(Failure::usage)
}

/// Resolves when `secs` elapse, or on Ctrl-C when no limit is given.
async fn until_stopped(secs: Option<f64>) {
    match secs {
        Some(s) => tokio::time::sleep(Duration::from_secs_f64(s.max(0.0))).await,
        None => {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}

fn secs(arg: Option<f64>, flag: &str) -> Result<Option<f64>, Failure> {
    match arg {
        Some(s) if !s.is_finite() || s < 0.0 => Err(Failure::usage(format!("--{flag} must be a non-negative number of seconds"))),
        other => Ok(other),
    }
}

#[derive(Serialize)]
struct Created<'a> {
    torrent: &'a Path,
    name: &'a str,
    info_hash: String,
    total_length: u64,
    piece_length: u64,
    pieces: usize,
}

pub fn create(
    fmt: Format,
    path: &Path,
    piece_length: u64,
    announce: &str,
    webseeds: &[String],
    out: Option<PathBuf>,
) -> CmdResult {
    let meta = build_from_path(path, piece_length, announce, webseeds).map_err(|e| match e {
        MetainfoError::ContentReadFailure(e) => Failure::usage(format!("{}: {e}", path.display())),
        e => Failure::usage(e),
    })?;
    let out = out.unwrap_or_else(|| {
        let mut p = path.as_os_str().to_owned();
        p.push(".torrent");
        PathBuf::from(p)
    });
    fs::write(&out, meta.to_bytes()).map_err(|e| Failure::usage(format!("{}: {e}", out.display())))?;
    let created = Created {
        torrent: &out,
        name: &meta.name,
        info_hash: meta.info_hash().to_hex(),
        total_length: meta.total_length,
        piece_length: meta.piece_length,
        pieces: meta.piece_count(),
    };
    match fmt {
        Format::Json => print_json(&created),
        Format::Csv => write_csv(&[created])?,
        Format::Text => {
            println!("wrote {}", out.display());
            println!("info hash  {}", created.info_hash);
            println!("length     {} bytes", created.total_length);
            println!("pieces     {} x {} bytes", created.pieces, created.piece_length);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Verified {
    pieces: usize,
    failed: Vec<usize>,
    verified_bytes: u64,
    excess_bytes: u64,
    ok: bool,
}

pub fn verify(fmt: Format, torrent: &Path, content: &Path) -> CmdResult {
    let meta = load_torrent(torrent)?;
    let file = fs::File::open(content).map_err(|e| Failure::usage(format!("{}: {e}", content.display())))?;
    let report = verify_content(&meta, io::BufReader::new(file))
        .map_err(|e| Failure::usage(format!("{}: {e}", content.display())))?;
    let v = Verified {
        pieces: meta.piece_count(),
        failed: report.failed_pieces(),
        verified_bytes: report.verified_bytes,
        excess_bytes: report.excess_bytes,
        ok: report.all_passed(),
    };
    match fmt {
        Format::Json => print_json(&v),
        Format::Csv => {
            let rows: Vec<_> = report
                .passed
                .iter()
                .enumerate()
                .map(|(piece, &ok)| PieceRow { piece, ok })
                .collect();
            write_csv(&rows)?;
        }
        Format::Text => {
            for i in &v.failed {
                println!("piece {i} FAILED");
            }
            if v.excess_bytes > 0 {
                println!("{} unexpected bytes past the end", v.excess_bytes);
            }
            println!(
                "{}/{} pieces verified ({} bytes)",
                v.pieces - v.failed.len(),
                v.pieces,
                v.verified_bytes
            );
        }
    }
    if v.ok {
        Ok(())
    } else if v.failed.is_empty() {
        Err(Failure::domain("content is longer than the torrent describes"))
    } else {
        Err(Failure::domain(format!("{} of {} pieces failed verification", v.failed.len(), v.pieces)))
    }
}

#[derive(Serialize)]
struct PieceRow {
    piece: usize,
    ok: bool,
}

pub fn tracker(
    bind: SocketAddr,
    interval: u32,
    journal: Option<PathBuf>,
    origin_prefix: String,
    duration: Option<f64>,
) -> CmdResult {
    let duration = secs(duration, "duration")?;
    let mut config = TrackerConfig::with_interval(interval);
    config.origin_prefix = origin_prefix.into_bytes();
    let tracker = match &journal {
        Some(path) => Tracker::with_journal(config, path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
        None => Tracker::new(config),
    };
    runtime()?.block_on(async move {
        let handle = serve(Arc::new(tracker), bind)
            .await
            .map_err(|e| Failure::usage(format!("cannot bind {bind}: {e}")))?;
        println!("{}", handle.announce_url());
        let _ = io::stdout().flush();
        info!(addr = %handle.local_addr(), "tracker listening");
        until_stopped(duration).await;
        handle.shutdown().await.map_err(Failure::usage)
    })
}

pub struct SeedArgs {
    pub torrent: PathBuf,
    pub content: PathBuf,
    pub tracker: Option<String>,
    pub up_limit: Option<u64>,
    pub listen: SocketAddr,
    pub origin: bool,
    pub duration: Option<f64>,
}

fn announce_url(meta: &Metainfo, overridden: Option<String>) -> Option<String> {
    overridden.or_else(|| Some(meta.announce.clone())).filter(|u| !u.is_empty())
}

fn peer_failure(e: PeerError) -> Failure {
    match e {
        PeerError::Io(e) => Failure::usage(e),
        e => Failure::domain(e),
    }
}

fn print_session(fmt: Format, report: &SessionReport) -> CmdResult {
    match fmt {
        Format::Json => print_json(report),
        Format::Csv => write_csv(std::slice::from_ref(report))?,
        Format::Text => {
            println!("uploaded    {} bytes", report.bytes_up);
            println!(
                "downloaded  {} bytes ({} from web seeds)",
                report.bytes_down, report.webseed_bytes
            );
            println!(
                "pieces      {} from peers, {} from web seeds, {} corrupt",
                report.pieces_from_peers, report.pieces_from_webseed, report.corrupt_pieces
            );
            println!("elapsed     {:.2} s", report.duration_secs);
        }
    }
    Ok(())
}

pub fn seed(fmt: Format, args: SeedArgs) -> CmdResult {
    let duration = secs(args.duration, "duration")?;
    let meta = load_torrent(&args.torrent)?;
    let content = read_file(&args.content)?;
    let mut config = NodeConfig::new(Role::Seed);
    config.peer_id = generate_peer_id(if args.origin { DEFAULT_ORIGIN_PREFIX } else { CLIENT_PEER_PREFIX });
    config.listen = args.listen;
    config.tracker_url = announce_url(&meta, args.tracker);
    config.limits.up_rate = args.up_limit;
    runtime()?.block_on(async move {
        let node = Node::start(meta, config, Some(content)).await.map_err(peer_failure)?;
        if fmt == Format::Text {
            println!("seeding on {}", node.local_addr());
            let _ = io::stdout().flush();
        }
        info!(addr = %node.local_addr(), "seeding");
        until_stopped(duration).await;
        print_session(fmt, &node.shutdown().await)
    })
}

pub struct GetArgs {
    pub torrent: PathBuf,
    pub out: PathBuf,
    pub tracker: Option<String>,
    pub down_limit: Option<u64>,
    pub webseed_fallback: String,
    pub peers: Vec<SocketAddr>,
    pub listen: SocketAddr,
    pub timeout: Option<f64>,
    pub linger: Option<f64>,
}

pub fn get(fmt: Format, args: GetArgs) -> CmdResult {
    let timeout = secs(args.timeout, "timeout")?;
    let linger = secs(args.linger, "linger")?;
    let meta = load_torrent(&args.torrent)?;
    let mut config = NodeConfig::new(Role::Fetch);
    config.listen = args.listen;
    config.tracker_url = announce_url(&meta, args.tracker);
    config.bootstrap = args.peers;
    config.limits.down_rate = args.down_limit;
    config.limits.timeout = timeout.map(Duration::from_secs_f64);
    if args.webseed_fallback == "off" {
        config.webseeds.clear();
    } else {
        let s: f64 = args
            .webseed_fallback
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite() && *s >= 0.0)
            .ok_or_else(|| Failure::usage("--webseed-fallback takes seconds or `off`"))?;
        config.webseeds = meta.webseeds.clone();
        config.limits.webseed_fallback = Duration::from_secs_f64(s);
    }
    runtime()?.block_on(async move {
        let node = Node::start(meta, config, None).await.map_err(peer_failure)?;
        let done = tokio::select! {
            r = node.wait_complete() => r,
            _ = tokio::signal::ctrl_c() => Err(PeerError::Stopped),
        };
        if let Err(e) = done {
            node.shutdown().await;
            return Err(peer_failure(e));
        }
        let content = node.content().expect("complete node holds its content");
        write_atomically(&args.out, &content).await?;
        info!(path = %args.out.display(), "download verified and written");
        if let Some(s) = linger {
            wait_or_interrupt(tokio::time::sleep(Duration::from_secs_f64(s))).await;
        }
        print_session(fmt, &node.shutdown().await)
    })
}

async fn wait_or_interrupt(f: impl Future<Output = ()>) {
    tokio::select! {
        _ = f => {}
        _ = tokio::signal::ctrl_c() => {}
    }
}

async fn write_atomically(path: &Path, data: &[u8]) -> CmdResult {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    let io_err = |e: io::Error| Failure::usage(format!("{}: {e}", path.display()));
    tokio::fs::write(&tmp, data).await.map_err(io_err)?;
    tokio::fs::rename(&tmp, path).await.map_err(io_err)
}

pub fn sim(fmt: Format, path: &Path) -> CmdResult {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let scenario = SwarmScenario::from_json(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let report = simulate(&scenario).map_err(|e| match e {
        SimError::InvalidScenario(_) => Failure::usage(e),
        e => Failure::domain(e),
    })?;
    match fmt {
        Format::Json => println!("{}", report.to_json()),
        Format::Csv => print!("{}", report.series_csv()),
        Format::Text => print_sim(&report),
    }
    Ok(())
}

fn print_sim(r: &SimReport) {
    println!("mode            {:?}", r.mode);
    println!("fidelity        {:?}", r.fidelity);
    for (i, c) in r.completion.iter().enumerate() {
        println!("peer {i:<3}        done at {c:.3} s, uploaded {}", format_bytes(r.uploaded[i]));
    }
    println!("makespan        {:.3} s", r.makespan);
    println!("server uploaded {}", format_bytes(r.server_uploaded));
    println!("amplification   {:.3}", r.amplification);
    println!("trace digest    {}", r.trace_digest);
}

fn load_datasets(file: Option<PathBuf>) -> Result<Vec<DatasetSpec>, Failure> {
    let (text, origin) = match &file {
        Some(path) => (
            fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
            path.display().to_string(),
        ),
        None => (BUNDLED_DATASETS.to_owned(), "bundled datasets".to_owned()),
    };
    let datasets: Vec<DatasetSpec> =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{origin}: {e}")))?;
    if let Some(d) = datasets.iter().find(|d| !d.size.is_finite() || d.size < 0.0) {
        return Err(Failure::usage(format!("{origin}: `{}` has an invalid size", d.name)));
    }
    Ok(datasets)
}

pub fn project(
    fmt: Format,
    single: Option<(String, f64)>,
    dataset_file: Option<PathBuf>,
    downloads: Option<u64>,
    model: &CostModel,
) -> CmdResult {
    model.validate().map_err(Failure::usage)?;
    let mut datasets = match single {
        Some((name, size)) => vec![DatasetSpec::new(name, size, DEFAULT_DOWNLOADS)],
        None => load_datasets(dataset_file)?,
    };
    if let Some(n) = downloads {
        for d in &mut datasets {
            d.downloads = n;
        }
    }
    let rows = project_table(&datasets, model);
    match fmt {
        Format::Json => print_json(&rows),
        Format::Csv => write_csv(&rows)?,
        Format::Text => print_table(&rows),
    }
    Ok(())
}

fn hours(secs: f64) -> String {
    format!("{:.2} h", secs / SECONDS_PER_HOUR)
}

fn print_table(rows: &[ProjectionRow]) {
    let header = [
        "Dataset",
        "Downloads",
        "HTTP upload",
        "Swarm upload",
        "Savings",
        "HTTP time",
        "Swarm time",
        "Time saved",
    ];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.downloads.to_string(),
                format_bytes(r.http_upload),
                format_bytes(r.at_upload),
                format!("${:.2}", r.dollar_savings),
                hours(r.http_time),
                hours(r.at_time),
                hours(r.time_savings),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[String]| {
        let mut out = format!("{:<w$}", row[0], w = width[0]);
        for (c, w) in row.iter().zip(width).skip(1) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out
    };
    println!("{}", line(&header.map(String::from)));
    for row in &cells {
        println!("{}", line(row));
    }
}

/// A measured swarm: the origin's upload and everyone's download.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LedgerFile {
    dataset: String,
    size_bytes: f64,
    downloads: u64,
    seeder_uploaded: u64,
    total_downloaded: u64,
}

pub fn case_study(fmt: Format, path: &Path, downloads: Option<u64>, model: &CostModel) -> CmdResult {
    model.validate().map_err(Failure::usage)?;
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let lf: LedgerFile = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let ledger = TransferLedger {
        seeder_uploaded: lf.seeder_uploaded,
        total_downloaded: lf.total_downloaded,
    };
    let n = downloads.unwrap_or(lf.downloads);
    let ds = DatasetSpec::new(lf.dataset, lf.size_bytes, n);
    let cs = case_study_report(&ledger, n, &ds, model).map_err(Failure::domain)?;
    match fmt {
        Format::Json => print_json(&cs),
        Format::Csv => write_csv(&[&cs])?,
        Format::Text => print_case(&cs, &ledger),
    }
    Ok(())
}

fn print_case(cs: &CaseStudy, ledger: &TransferLedger) {
    println!("dataset              {}", cs.dataset);
    println!("origin uploaded      {}", format_bytes(ledger.seeder_uploaded as f64));
    println!("total downloaded     {}", format_bytes(ledger.total_downloaded as f64));
    println!("ratio                {:.3}", cs.ratio);
    println!("community multiple   {:.3}", cs.community_multiple);
    println!("per-download cost    ${:.2}", cs.per_download_cost);
    println!("{:<20} ${:.2}", format!("cost of {} over HTTP", cs.downloads), cs.http_equivalent_cost);
    println!("actual cost          ${:.2}", cs.actual_cost);
}
