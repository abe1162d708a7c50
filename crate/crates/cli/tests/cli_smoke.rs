//! Command-line round trips: simulate -> compare, gen-catalog output, and
//! a live serve session over a real socket.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::Command;
use std::time::Duration;

fn bbm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bbm"))
}

fn sim_config_json(seed: u64) -> String {
    serde_json::json!({
        "seed": seed,
        "tick_ms": 10,
        "duration_ticks": 100000,
        "client_link_kbps": 20000,
        "nodes": [{
            "id": "n1", "latency_ms": 20, "capacity_kbps": 40000,
            "signal_db": -60, "hosted": ["v0", "v1"]
        }],
        "catalog": [
            {"id": "v0", "width": 352, "height": 288, "fps": 30, "frame_count": 8},
            {"id": "v1", "width": 176, "height": 144, "fps": 15, "frame_count": 8}
        ],
        "workload": {"kind": "fixed", "trace": [
            {"tick": 0, "video": "v0", "profile": "qcif"},
            {"tick": 3000, "video": "v0", "profile": "qcif"},
            {"tick": 6000, "video": "v1", "profile": "qcif"}
        ]}
    })
    .to_string()
}

#[test]
fn simulate_then_compare_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    std::fs::write(&cfg, sim_config_json(9)).unwrap();

    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let log = dir.path().join("events.ndjson");

    let status = bbm()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&a)
        .arg("--log")
        .arg(&log)
        .status()
        .unwrap();
    assert!(status.success());
    let status = bbm()
        .args(["simulate", "--no-cache", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .status()
        .unwrap();
    assert!(status.success());

    // the event log is valid ndjson with tick+kind on every line
    for line in std::fs::read_to_string(&log).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["tick"].is_u64() && v["kind"].is_string(), "bad event {line}");
    }

    let report_a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&a).unwrap()).unwrap();
    let report_b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&b).unwrap()).unwrap();
    assert!(report_a["origin_bytes"].as_u64().unwrap() < report_b["origin_bytes"].as_u64().unwrap());

    let output = bbm().arg("compare").arg(&a).arg(&b).output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("origin_bytes"), "{text}");
    assert!(text.contains("origin bytes saved"), "{text}");

    // mismatched workloads are refused
    let other_cfg = dir.path().join("other.json");
    std::fs::write(&other_cfg, sim_config_json(10)).unwrap();
    let c = dir.path().join("c.json");
    let status = bbm()
        .args(["simulate", "--config"])
        .arg(&other_cfg)
        .arg("--out")
        .arg(&c)
        .status()
        .unwrap();
    assert!(status.success());
    let output = bbm().arg("compare").arg(&a).arg(&c).output().unwrap();
    assert!(!output.status.success());
}

#[test]
fn gen_catalog_writes_decodable_containers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("catalog.json");
    let media = dir.path().join("media");
    let status = bbm()
        .args(["gen-catalog", "--videos", "4", "--seed", "11", "--out"])
        .arg(&out)
        .arg("--dir")
        .arg(&media)
        .status()
        .unwrap();
    assert!(status.success());

    let catalog: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let videos = catalog["videos"].as_array().unwrap();
    assert_eq!(videos.len(), 4);
    for v in videos {
        let id = v["id"].as_str().unwrap();
        let bytes = std::fs::read(media.join(format!("{id}.bbmv"))).unwrap();
        let asset =
            bbm_core::media::decode_container(bbm_core::ids::VideoId::new(id), &bytes).unwrap();
        assert_eq!(u64::from(asset.width), v["width"].as_u64().unwrap());
        assert_eq!(u64::from(asset.frame_count), v["frame_count"].as_u64().unwrap());
        // ~5 MB class originals
        assert!(bytes.len() > 3_000_000 && bytes.len() < 7_000_000);
    }

    // same seed, same bytes
    let media2 = dir.path().join("media2");
    let out2 = dir.path().join("catalog2.json");
    assert!(bbm()
        .args(["gen-catalog", "--videos", "4", "--seed", "11", "--out"])
        .arg(&out2)
        .arg("--dir")
        .arg(&media2)
        .status()
        .unwrap()
        .success());
    let a = std::fs::read(media.join("v000.bbmv")).unwrap();
    let b = std::fs::read(media2.join("v000.bbmv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn serve_answers_stats_and_not_found() {
    let dir = tempfile::tempdir().unwrap();
    // pick a free port by binding and releasing it
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let cfg_path = dir.path().join("svc.conf");
    std::fs::write(&cfg_path, format!("listen = 127.0.0.1:{port}\ntick_ms = 5\n")).unwrap();

    let mut child = bbm()
        .args(["serve", "--config"])
        .arg(&cfg_path)
        .spawn()
        .unwrap();

    // wait for the listener
    let mut conn = None;
    for _ in 0..100 {
        match TcpStream::connect(("127.0.0.1", port)) {
            Ok(c) => {
                conn = Some(c);
                break;
            }
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
    let conn = conn.expect("server came up");
    conn.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let mut reader = BufReader::new(conn.try_clone().unwrap());
    let mut conn = conn;
    writeln!(conn, "PLAY nothing PROFILE qcif").unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert_eq!(line.trim_end(), "404 NOT_AVAILABLE");

    let stats_conn = TcpStream::connect(("127.0.0.1", port)).unwrap();
    stats_conn
        .set_read_timeout(Some(Duration::from_secs(10)))
        .unwrap();
    let mut reader = BufReader::new(stats_conn.try_clone().unwrap());
    let mut stats_conn = stats_conn;
    writeln!(stats_conn, "STATS").unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let stats: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(stats["not_found"].as_u64().unwrap(), 1);

    child.kill().unwrap();
    let _ = child.wait();
}
