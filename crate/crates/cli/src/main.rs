mod commands;
mod units;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "swarmshare", version, about = "Share datasets over HTTP and a peer swarm")]
struct Cli {
    /// Output format for data written to stdout.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    format: Format,
    /// Log more to stderr (repeat for more detail). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Hash a file into a .torrent.
    Create {
        /// File to share.
        path: PathBuf,
        /// Piece size, a power of two between 16KiB and 16MiB.
        #[arg(long, default_value = "256KiB", value_parser = units::parse_byte_count)]
        piece_length: u64,
        /// Tracker announce URL.
        #[arg(long, default_value = "http://127.0.0.1:6969/announce")]
        announce: String,
        /// HTTP web seed URL (repeatable).
        #[arg(long = "webseed")]
        webseeds: Vec<String>,
        /// Where to write the torrent. Defaults to PATH.torrent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check content against a torrent's piece digests.
    Verify {
        torrent: PathBuf,
        content: PathBuf,
    },
    /// Run an HTTP tracker until interrupted.
    Tracker {
        /// Address to listen on.
        #[arg(long, default_value = "127.0.0.1:6969")]
        bind: SocketAddr,
        /// Re-announce interval handed to peers, seconds.
        #[arg(long, default_value_t = swarmshare::tracker::DEFAULT_INTERVAL_SECS)]
        interval: u32,
        /// Append-only ledger journal, replayed at startup.
        #[arg(long)]
        journal: Option<PathBuf>,
        /// Peer id prefix that marks the origin seeder in the ledger.
        #[arg(long, default_value = "-SWORIG-")]
        origin_prefix: String,
        /// Stop after this many seconds instead of waiting for Ctrl-C.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Serve complete content to the swarm.
    Seed {
        torrent: PathBuf,
        content: PathBuf,
        /// Announce URL, overriding the torrent's.
        #[arg(long)]
        tracker: Option<String>,
        /// Upload cap, bytes per second (e.g. 1MiB).
        #[arg(long, value_parser = units::parse_byte_count)]
        up_limit: Option<u64>,
        /// Address to accept peers on.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: SocketAddr,
        /// Announce as an ordinary peer rather than the origin.
        #[arg(long)]
        not_origin: bool,
        /// Stop after this many seconds instead of waiting for Ctrl-C.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Download content from peers, falling back to web seeds.
    Get {
        torrent: PathBuf,
        /// Where to write the verified content.
        #[arg(short, long)]
        out: PathBuf,
        /// Announce URL, overriding the torrent's.
        #[arg(long)]
        tracker: Option<String>,
        /// Download cap, bytes per second.
        #[arg(long, value_parser = units::parse_byte_count)]
        down_limit: Option<u64>,
        /// Seconds a piece must be unavailable from peers before the web
        /// seed is used. Pass `off` to never use web seeds.
        #[arg(long, default_value = "5")]
        webseed_fallback: String,
        /// Peer to dial directly (repeatable).
        #[arg(long = "peer")]
        peers: Vec<SocketAddr>,
        /// Address to accept peers on.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: SocketAddr,
        /// Give up after this many seconds.
        #[arg(long)]
        timeout: Option<f64>,
        /// Keep seeding for this many seconds after completing.
        #[arg(long)]
        linger: Option<f64>,
    },
    /// Simulate a swarm scenario described in JSON.
    Sim {
        scenario: PathBuf,
    },
    /// Project bandwidth cost and download time savings.
    Project {
        /// Single dataset size (e.g. 157.3GB).
        #[arg(long, value_parser = units::parse_bytes, conflicts_with = "dataset_file")]
        size: Option<f64>,
        /// Name for the --size row.
        #[arg(long, default_value = "dataset", requires = "size")]
        name: String,
        /// JSON list of {name, size_bytes, downloads}. Defaults to the
        /// bundled three challenge datasets.
        #[arg(long)]
        dataset_file: Option<PathBuf>,
        /// Downloads per dataset, overriding the file.
        #[arg(long)]
        downloads: Option<u64>,
        /// USD per GB transferred.
        #[arg(long)]
        price_per_gb: Option<f64>,
        /// Client-server download speed (e.g. 500KB/s).
        #[arg(long, value_parser = units::parse_rate)]
        http_speed: Option<f64>,
        /// Swarm download speed (e.g. 34MB/s).
        #[arg(long, value_parser = units::parse_rate)]
        swarm_speed: Option<f64>,
        /// Total downloaded per origin byte uploaded.
        #[arg(long)]
        amplification: Option<f64>,
        /// Report a measured transfer ledger instead, e.g.
        /// fixtures/reddit_ledger.json.
        #[arg(long, conflicts_with_all = ["size", "dataset_file"])]
        ledger: Option<PathBuf>,
    },
}

/// A command failure carrying its exit status.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    /// Verification or simulation did not succeed.
    pub fn domain(message: impl ToString) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }

    /// Bad input or I/O.
    pub fn usage(message: impl ToString) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let fmt = cli.format;
    let result = match cli.command {
        Command::Create {
            path,
            piece_length,
            announce,
            webseeds,
            out,
        } => commands::create(fmt, &path, piece_length, &announce, &webseeds, out),
        Command::Verify { torrent, content } => commands::verify(fmt, &torrent, &content),
        Command::Tracker {
            bind,
            interval,
            journal,
            origin_prefix,
            duration,
        } => commands::tracker(bind, interval, journal, origin_prefix, duration),
        Command::Seed {
            torrent,
            content,
            tracker,
            up_limit,
            listen,
            not_origin,
            duration,
        } => commands::seed(
            fmt,
            commands::SeedArgs {
                torrent,
                content,
                tracker,
                up_limit,
                listen,
                origin: !not_origin,
                duration,
            },
        ),
        Command::Get {
            torrent,
            out,
            tracker,
            down_limit,
            webseed_fallback,
            peers,
            listen,
            timeout,
            linger,
        } => commands::get(
            fmt,
            commands::GetArgs {
                torrent,
                out,
                tracker,
                down_limit,
                webseed_fallback,
                peers,
                listen,
                timeout,
                linger,
            },
        ),
        Command::Sim { scenario } => commands::sim(fmt, &scenario),
        Command::Project {
            size,
            name,
            dataset_file,
            downloads,
            price_per_gb,
            http_speed,
            swarm_speed,
            amplification,
            ledger,
        } => {
            let mut model = swarmshare::econ::CostModel::default();
            if let Some(p) = price_per_gb {
                model.price_per_gb = p;
            }
            if let Some(s) = http_speed {
                model.http_speed = s;
            }
            if let Some(s) = swarm_speed {
                model.swarm_speed = s;
            }
            if let Some(a) = amplification {
                model.amplification = a;
            }
            match ledger {
                Some(path) => commands::case_study(fmt, &path, downloads, &model),
                None => {
                    let single = size.map(|s| (name, s));
                    commands::project(fmt, single, dataset_file, downloads, &model)
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
