use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::Arc;
use std::thread;

use serde_json::Value;
use sha1::{Digest, Sha1};
use swarmshare::metainfo::parse_metainfo;
use swarmshare::tracker::replay_journal;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_swarmshare");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn content(len: usize, seed: u32) -> Vec<u8> {
    let mut x = seed.wrapping_mul(2654435761).max(1);
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            x as u8
        })
        .collect()
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    ((got - want) / want).abs() <= rel
}

/// Kills the child when dropped.
struct Proc(Child);

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_tracker(journal: Option<&Path>) -> (Proc, String) {
    let mut cmd = Command::new(BIN);
    cmd.args(["tracker", "--bind", "127.0.0.1:0", "--interval", "1"]);
    if let Some(j) = journal {
        cmd.arg("--journal").arg(j);
    }
    let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    (Proc(child), line.trim().to_owned())
}

fn http_get(url: &str) -> Vec<u8> {
    let rest = url.strip_prefix("http://").unwrap();
    let (host, path) = rest.split_at(rest.find('/').unwrap());
    let mut s = TcpStream::connect(host).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    raw[split + 4..].to_vec()
}

fn pct(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("%{b:02X}")).collect()
}

/// Minimal range-capable HTTP file server on a background thread.
fn serve_bytes(body: Vec<u8>) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let body = Arc::new(body);
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let body = body.clone();
            thread::spawn(move || {
                let mut r = BufReader::new(stream.try_clone().unwrap());
                let mut range = None;
                loop {
                    let mut line = String::new();
                    if r.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("range: bytes=") {
                        let (a, b) = v.trim().split_once('-').unwrap();
                        range = Some((a.parse::<usize>().unwrap(), b.parse::<usize>().unwrap()));
                    }
                }
                let mut s = stream;
                let (status, part) = match range {
                    Some((a, b)) => ("206 Partial Content", &body[a..=b.min(body.len() - 1)]),
                    None => ("200 OK", &body[..]),
                };
                let _ = write!(
                    s,
                    "HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    part.len()
                );
                let _ = s.write_all(part);
            });
        }
    });
    addr
}

#[test]
fn help_documents_every_subcommand() {
    let cases: &[(&str, &[&str])] = &[
        ("create", &["--piece-length", "--announce", "--webseed", "--out"]),
        ("verify", &["<TORRENT>", "<CONTENT>"]),
        ("tracker", &["--bind", "--interval", "--journal", "--duration"]),
        ("seed", &["--tracker", "--up-limit", "--listen", "--duration"]),
        ("get", &["--tracker", "--out", "--down-limit", "--webseed-fallback", "--timeout"]),
        ("sim", &["<SCENARIO>", "--format"]),
        (
            "project",
            &["--size", "--dataset-file", "--downloads", "--price-per-gb", "--http-speed", "--swarm-speed", "--amplification"],
        ),
    ];
    for (cmd, flags) in cases {
        let o = run(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["project", "--http-speed", "fast"]).status.code(), Some(2));
    assert_eq!(run(&["project", "--amplification", "-1"]).status.code(), Some(2));
}

#[test]
fn project_reproduces_bundled_table() {
    let o = run(&["--format", "json", "project"]);
    assert!(o.status.success());
    let rows = json(&o);
    let want = [("Whale", 23.36, 4.78), ("Diabetes", 220.68, 44.99), ("ImageNet", 422.29, 86.11)];
    for (row, (name, dollars, hours)) in rows.as_array().unwrap().iter().zip(want) {
        assert_eq!(row["name"], name);
        assert!(within(row["dollar_savings"].as_f64().unwrap(), dollars, 0.02), "{row}");
        assert!(within(row["time_savings"].as_f64().unwrap() / 3600.0, hours, 0.02), "{row}");
    }
    let text = stdout(&run(&["project"]));
    assert!(text.contains("$422.29"), "{text}");
}

#[test]
fn project_single_size_and_zero_downloads() {
    let o = run(&["--format", "json", "project", "--size", "157.3GB", "--name", "ImageNet"]);
    let row = &json(&o)[0];
    assert_eq!(row["downloads"], 100);
    assert!((row["dollar_savings"].as_f64().unwrap() - 422.29).abs() < 0.01);

    let o = run(&["--format", "json", "project", "--downloads", "0"]);
    for row in json(&o).as_array().unwrap() {
        assert_eq!(row["dollar_savings"].as_f64().unwrap(), 0.0);
        assert_eq!(row["http_upload"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn project_model_flags_and_csv() {
    let o = run(&[
        "--format", "csv", "project", "--size", "100GB", "--downloads", "10", "--price-per-gb", "0.1",
        "--amplification", "2", "--http-speed", "1MB/s", "--swarm-speed", "10MB/s",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("name,downloads,http_upload"));
    let fields: Vec<f64> = lines.next().unwrap().split(',').skip(1).map(|f| f.parse().unwrap()).collect();
    // 1000 GB over HTTP, 500 GB with the swarm, 500 GB saved at $0.10.
    assert_eq!(fields[0], 10.0);
    assert!((fields[3] - 50.0).abs() < 1e-9);
    assert!((fields[6] - 90_000.0).abs() < 1e-6);
}

#[test]
fn project_dataset_file() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("sets.json");
    std::fs::write(&path, r#"[{"name": "a", "size_bytes": 1e9, "downloads": 5}]"#).unwrap();
    let o = run(&["--format", "json", "project", "--dataset-file", path.to_str().unwrap()]);
    assert_eq!(json(&o)[0]["downloads"], 5);
    std::fs::write(&path, "[{").unwrap();
    assert_eq!(run(&["project", "--dataset-file", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn ledger_case_study() {
    let ledger = fixture("reddit_ledger.json");
    let o = run(&["--format", "json", "project", "--ledger", ledger.to_str().unwrap()]);
    assert!(o.status.success());
    let cs = json(&o);
    assert!(within(cs["ratio"].as_f64().unwrap(), 42.067, 0.005));
    assert!((cs["per_download_cost"].as_f64().unwrap() - 4.42).abs() <= 0.01);
    assert!((cs["http_equivalent_cost"].as_f64().unwrap() - 424.32).abs() <= 0.01);
    assert!((cs["actual_cost"].as_f64().unwrap() - 10.09).abs() <= 0.01);
}

#[test]
fn create_and_verify() {
    let dir = TempDir::new().unwrap();
    let data = content(100_000, 3);
    let file = dir.path().join("data.bin");
    std::fs::write(&file, &data).unwrap();
    let f = file.to_str().unwrap();

    let o = run(&["--format", "json", "create", f, "--piece-length", "16KiB", "--webseed", "http://x/data.bin"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let torrent = dir.path().join("data.bin.torrent");
    let meta = parse_metainfo(&std::fs::read(&torrent).unwrap()).unwrap();
    assert_eq!(meta.total_length, 100_000);
    assert_eq!(meta.piece_count(), 7);
    assert_eq!(meta.webseeds, ["http://x/data.bin"]);
    assert_eq!(json(&o)["info_hash"], meta.info_hash().to_hex());

    let t = torrent.to_str().unwrap();
    assert!(run(&["verify", t, f]).status.success());

    // Corrupt one byte in piece 3 and check the failing piece with SHA-1 directly.
    let mut bad = data.clone();
    bad[3 * 16384 + 7] ^= 1;
    let digest: [u8; 20] = Sha1::digest(&bad[3 * 16384..4 * 16384]).into();
    assert_ne!(&digest, meta.pieces[3].as_bytes());
    let bad_file = dir.path().join("bad.bin");
    std::fs::write(&bad_file, &bad).unwrap();
    let o = run(&["verify", t, bad_file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("piece 3 FAILED"));
    let o = run(&["--format", "json", "verify", t, bad_file.to_str().unwrap()]);
    assert_eq!(json(&o)["failed"], serde_json::json!([3]));

    let missing = dir.path().join("missing.bin");
    assert_eq!(run(&["verify", t, missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn create_edge_cases() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, b"").unwrap();
    let out = dir.path().join("e.torrent");
    let o = run(&["create", empty.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success());
    let meta = parse_metainfo(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(meta.piece_count(), 0);

    let missing = dir.path().join("nope.bin");
    assert_eq!(run(&["create", missing.to_str().unwrap()]).status.code(), Some(2));
    let o = run(&["create", empty.to_str().unwrap(), "--piece-length", "1000"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sim_fixtures() {
    let http = fixture("scenarios/http_only.json");
    let o = run(&["--format", "json", "sim", http.to_str().unwrap()]);
    assert!(o.status.success());
    let r = json(&o);
    // Four peers sharing 10 MB/s for a 100 MB file: 4 * 100 / 10 seconds.
    for c in r["completion"].as_array().unwrap() {
        assert!((c.as_f64().unwrap() - 40.0).abs() <= 0.1, "{c}");
    }
    assert_eq!(r["amplification"].as_f64().unwrap(), 1.0);

    let hybrid = fixture("scenarios/hybrid.json");
    let r = json(&run(&["--format", "json", "sim", hybrid.to_str().unwrap()]));
    assert!((r["makespan"].as_f64().unwrap() - 20.0 * 3f64.ln()).abs() <= 0.1);

    let piece = fixture("scenarios/piece_level.json");
    let a = run(&["--format", "json", "sim", piece.to_str().unwrap()]);
    let b = run(&["--format", "json", "sim", piece.to_str().unwrap()]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let csv = stdout(&run(&["--format", "csv", "sim", piece.to_str().unwrap()]));
    assert!(csv.starts_with("time,server_uploaded,peer0,peer1,peer2,peer3\n"));
}

#[test]
fn sim_rejects_bad_scenarios() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("s.json");
    for bad in [
        "not json",
        r#"{"file_size": 10, "mode": "hybrid", "server_up": 1, "peers": []}"#,
        r#"{"file_size": 10, "mode": "carrier_pigeon", "server_up": 1, "peers": [{"down_cap": 1, "up_cap": 1}]}"#,
        r#"{"file_size": 10, "mode": "hybrid", "server_up": 1, "peers": [{"down_cap": 1, "up_cap": 1}], "extra": 1}"#,
    ] {
        std::fs::write(&path, bad).unwrap();
        let o = run(&["sim", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
        assert!(o.stdout.is_empty());
    }
    // A valid scenario that cannot finish in time is a simulation failure.
    std::fs::write(
        &path,
        r#"{"file_size": 1000000, "mode": "http_only", "server_up": 1, "peers": [{"down_cap": 1, "up_cap": 1}], "time_cap": 10}"#,
    )
    .unwrap();
    assert_eq!(run(&["sim", path.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn tracker_serves_and_journals() {
    let dir = TempDir::new().unwrap();
    let journal = dir.path().join("ledger.log");
    let hash = [7u8; 20];
    let announce = |url: &str, peer: &[u8], up: u64, down: u64| {
        let q = format!(
            "?info_hash={}&peer_id={}&port=6881&uploaded={up}&downloaded={down}&left=0&compact=1",
            pct(&hash),
            pct(peer)
        );
        http_get(&format!("{url}{q}"))
    };

    let (tracker, url) = spawn_tracker(Some(&journal));
    let body = announce(&url, b"-SWORIG-aaaaaaaaaaaa", 5000, 0);
    assert!(body.starts_with(b"d"), "{}", String::from_utf8_lossy(&body));
    assert!(body.windows(10).any(|w| w == b"8:interval"));
    announce(&url, b"-SW0001-bbbbbbbbbbbb", 0, 4000);
    let bad = http_get(&format!("{url}?info_hash=short"));
    assert!(bad.windows(17).any(|w| w == b"14:failure reason"));
    drop(tracker);

    let (_tracker, url) = spawn_tracker(Some(&journal));
    announce(&url, b"-SWORIG-cccccccccccc", 1000, 0);
    announce(&url, b"-SW0001-dddddddddddd", 0, 2500);

    let ledgers = replay_journal(&journal, b"-SWORIG-").unwrap();
    let ledger = ledgers.values().next().unwrap();
    assert_eq!(ledger.seeder_uploaded, 6000);
    assert_eq!(ledger.total_downloaded, 6500);
}

#[test]
fn seed_and_get_over_loopback() {
    let dir = TempDir::new().unwrap();
    let data = content(1 << 20, 11);
    let file = dir.path().join("data.bin");
    std::fs::write(&file, &data).unwrap();
    let (_tracker, url) = spawn_tracker(None);
    let torrent = dir.path().join("data.torrent");
    let t = torrent.to_str().unwrap();
    let o = run(&["create", file.to_str().unwrap(), "--announce", &url, "--piece-length", "64KiB", "-o", t]);
    assert!(o.status.success());

    let _seed = Proc(
        Command::new(BIN)
            .args(["seed", t, file.to_str().unwrap(), "--duration", "60"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let out = dir.path().join("got.bin");
    let o = run(&["--format", "json", "get", t, "-o", out.to_str().unwrap(), "--timeout", "60"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&out).unwrap(), data);
    let report = json(&o);
    assert_eq!(report["bytes_down"], 1 << 20);
    assert_eq!(report["webseed_bytes"], 0);
}

#[test]
fn get_from_webseed_only() {
    let dir = TempDir::new().unwrap();
    let data = content(300_000, 5);
    let file = dir.path().join("data.bin");
    std::fs::write(&file, &data).unwrap();
    let addr = serve_bytes(data.clone());
    let torrent = dir.path().join("data.torrent");
    let t = torrent.to_str().unwrap();
    let webseed = format!("http://{addr}/data.bin");
    let o = run(&["create", file.to_str().unwrap(), "--announce", "", "--webseed", &webseed, "-o", t]);
    assert!(o.status.success());
    let out = dir.path().join("got.bin");
    let o = run(&["--format", "json", "get", t, "-o", out.to_str().unwrap(), "--webseed-fallback", "0", "--timeout", "60"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&out).unwrap(), data);
    assert_eq!(json(&o)["webseed_bytes"], 300_000);
}

#[test]
fn get_without_sources_fails() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("data.bin");
    std::fs::write(&file, content(50_000, 9)).unwrap();
    let torrent = dir.path().join("data.torrent");
    let t = torrent.to_str().unwrap();
    assert!(run(&["create", file.to_str().unwrap(), "--announce", "", "-o", t]).status.success());
    let out = dir.path().join("got.bin");
    let o = run(&["get", t, "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no peers or web seeds"));
    assert!(!out.exists());
}
