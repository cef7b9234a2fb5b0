mod common;

use std::sync::Arc;

use swarmshare::bencode::{decode, Value};
use swarmshare::metainfo::Digest20;
use swarmshare::tracker::{
    serve, AnnounceEvent, AnnounceRequest, AnnounceResponse, Tracker, TrackerConfig, DEFAULT_ORIGIN_PREFIX,
};

fn peer_id(prefix: &[u8], tag: u8) -> [u8; 20] {
    let mut id = [tag; 20];
    id[..prefix.len()].copy_from_slice(prefix);
    id
}

fn request(hash: Digest20, id: [u8; 20], port: u16, up: u64, down: u64, left: u64, event: AnnounceEvent) -> AnnounceRequest {
    AnnounceRequest {
        info_hash: hash,
        peer_id: id,
        ip: std::net::Ipv4Addr::UNSPECIFIED,
        port,
        uploaded: up,
        downloaded: down,
        left,
        event,
        compact: true,
    }
}

async fn get(url: &str) -> Vec<u8> {
    reqwest::get(url).await.unwrap().bytes().await.unwrap().to_vec()
}

async fn announce(base: &str, req: &AnnounceRequest) -> AnnounceResponse {
    AnnounceResponse::parse(&get(&format!("{base}?{}", req.to_query())).await).unwrap()
}

#[tokio::test]
async fn announce_and_scrape_over_http() {
    let handle = serve(Arc::new(Tracker::new(TrackerConfig::with_interval(60))), "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap();
    let url = handle.announce_url();
    let hash = Digest20::of(b"swarm");
    let origin = peer_id(DEFAULT_ORIGIN_PREFIX, b'o');
    let leech = peer_id(b"-SW0001-", b'l');

    let r = announce(&url, &request(hash, origin, 7000, 0, 0, 0, AnnounceEvent::Started)).await;
    assert_eq!(r.interval, 60);
    assert!(r.peers.is_empty());
    let r = announce(&url, &request(hash, leech, 7001, 0, 0, 500, AnnounceEvent::Started)).await;
    assert_eq!(r.peers, vec!["127.0.0.1:7000".parse().unwrap()]);
    assert_eq!((r.complete, r.incomplete), (1, 1));

    announce(&url, &request(hash, origin, 7000, 500, 0, 0, AnnounceEvent::None)).await;
    announce(&url, &request(hash, leech, 7001, 0, 500, 0, AnnounceEvent::Completed)).await;

    let report = handle.tracker().swarm_report(&hash).unwrap();
    assert_eq!(report.ledger.seeder_uploaded, 500);
    assert_eq!(report.ledger.total_downloaded, 500);
    assert_eq!(report.completed_events, 1);

    let scrape_url = format!(
        "http://{}/scrape?info_hash={}",
        handle.local_addr(),
        percent_encoding::percent_encode(hash.as_bytes(), percent_encoding::NON_ALPHANUMERIC)
    );
    let body = decode(&get(&scrape_url).await).unwrap();
    let stats = body.get(b"files").and_then(|f| f.get(hash.as_bytes())).unwrap();
    assert_eq!(stats.get(b"complete").and_then(Value::as_int), Some(2));
    assert_eq!(stats.get(b"downloaded").and_then(Value::as_int), Some(1));
    handle.shutdown().await.unwrap();
}

#[tokio::test]
async fn failures_are_bencoded() {
    let mut config = TrackerConfig::with_interval(60);
    config.closed = true;
    let handle = serve(Arc::new(Tracker::new(config)), "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let url = handle.announce_url();

    let body = get(&format!("{url}?info_hash=short")).await;
    let v = decode(&body).unwrap();
    assert!(v.get(b"failure reason").is_some());

    let req = request(Digest20::of(b"unknown"), peer_id(b"-SW0001-", b'a'), 7000, 0, 0, 1, AnnounceEvent::Started);
    let body = get(&format!("{url}?{}", req.to_query())).await;
    assert!(AnnounceResponse::parse(&body).is_err());

    handle.tracker().register(Digest20::of(b"unknown"));
    assert!(AnnounceResponse::parse(&get(&format!("{url}?{}", req.to_query())).await).is_ok());
    handle.shutdown().await.unwrap();
}

#[tokio::test]
async fn journal_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.journal");
    let hash = Digest20::of(b"persisted");
    let origin = peer_id(DEFAULT_ORIGIN_PREFIX, b'o');
    let leech = peer_id(b"-SW0001-", b'l');
    {
        let tracker = Arc::new(Tracker::with_journal(TrackerConfig::default(), &path).unwrap());
        let handle = serve(tracker, "127.0.0.1:0".parse().unwrap()).await.unwrap();
        let url = handle.announce_url();
        announce(&url, &request(hash, origin, 7000, 0, 0, 0, AnnounceEvent::Started)).await;
        announce(&url, &request(hash, leech, 7001, 0, 0, 900, AnnounceEvent::Started)).await;
        announce(&url, &request(hash, origin, 7000, 900, 0, 0, AnnounceEvent::None)).await;
        announce(&url, &request(hash, leech, 7001, 0, 900, 0, AnnounceEvent::Completed)).await;
        handle.shutdown().await.unwrap();
    }
    let tracker = Tracker::with_journal(TrackerConfig::default(), &path).unwrap();
    let report = tracker.swarm_report(&hash).unwrap();
    assert_eq!(report.ledger.seeder_uploaded, 900);
    assert_eq!(report.ledger.total_downloaded, 900);
}
