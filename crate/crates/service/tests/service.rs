use std::path::Path;
use std::sync::Mutex;
use std::thread;

use hotlora_core::backbone::{forward, init_backbone, BackboneConfig, BackboneWeights, Instruction, Observation};
use hotlora_core::lora::{init_expert, merge, InjectionPolicy, LoraExpert};
use hotlora_core::manager::{DiskLoader, InferenceRequest, Manager};
use hotlora_core::store::{load_registry, manifest_line, save_expert, MissPolicy};
use hotlora_core::tensor::{Matrix, Rng};
use hotlora_service::{actions_from_json, handle_line, Client, Server};
use proptest::prelude::*;
use serde_json::{json, Value};

const INSTR: [&str; 3] = ["open the drawer", "close the drawer", "push the red button"];

struct Fixture {
    dir: tempfile::TempDir,
    base: BackboneWeights,
    experts: Vec<LoraExpert>,
}

fn config() -> BackboneConfig {
    BackboneConfig {
        model_dim: 16,
        enc_layers: 1,
        act_layers: 1,
        heads: 2,
        vocab_size: 64,
        max_instr_len: 6,
        obs_dim: 5,
        proprio_dim: 2,
        chunk_horizon: 3,
        action_dim: 2,
        seed: 11,
    }
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut base = init_backbone(&config()).unwrap();
    base.freeze();
    let mut lines = Vec::new();
    let mut experts = Vec::new();
    for (i, text) in INSTR.iter().take(2).enumerate() {
        let id = format!("expert{i}");
        let mut e = init_expert(&id, &base, &InjectionPolicy::default(), 4, 8.0, i as u64).unwrap();
        let mut rng = Rng::new(100 + i as u64);
        for l in &mut e.layers {
            l.b = Matrix::gaussian(&mut rng, l.b.rows(), l.b.cols(), 0.2);
        }
        save_expert(&e, &dir.path().join(format!("{id}.crlx"))).unwrap();
        lines.push(manifest_line(text, &id, Path::new(&format!("{id}.crlx"))));
        experts.push(e);
    }
    std::fs::write(dir.path().join("manifest.tsv"), lines.join("\n")).unwrap();
    Fixture { dir, base, experts }
}

fn manager(f: &Fixture) -> Manager {
    let reg = load_registry(&f.dir.path().join("manifest.tsv"), MissPolicy::BaseFallback).unwrap();
    Manager::new(f.base.clone(), reg, Box::new(DiskLoader)).unwrap()
}

fn observation(seed: u64) -> Observation {
    let cfg = config();
    let mut r = Rng::new(seed);
    Observation {
        features: (0..cfg.obs_dim).map(|_| r.normal() as f32).collect(),
        proprio: (0..cfg.proprio_dim).map(|_| r.normal() as f32).collect(),
    }
}

fn start(f: &Fixture) -> (std::net::SocketAddr, hotlora_service::ShutdownHandle, thread::JoinHandle<()>) {
    let server = Server::bind("127.0.0.1:0", manager(f)).unwrap();
    let addr = server.local_addr().unwrap();
    let stop = server.shutdown_handle().unwrap();
    let h = thread::spawn(move || server.run().unwrap());
    (addr, stop, h)
}

#[test]
fn fresh_server_reports_zero_switches() {
    let f = fixture();
    let (addr, stop, h) = start(&f);
    let mut c = Client::connect(addr).unwrap();
    let s = c.call(&json!({"op": "stats"})).unwrap();
    assert_eq!(s["ok"], true);
    assert_eq!(s["switches"], 0);
    assert_eq!(s["requests"], 0);
    let l = c.call(&json!({"op": "list_experts"})).unwrap();
    assert_eq!(l["experts"].as_array().unwrap().len(), 2);
    assert_eq!(l["active"], Value::Null);
    drop(c);
    stop.shutdown();
    h.join().unwrap();
}

#[test]
fn infer_roundtrip_matches_direct_manager() {
    let f = fixture();
    let (addr, stop, h) = start(&f);
    let mut direct = manager(&f);
    let mut c = Client::connect(addr).unwrap();
    let cfg = config();
    let stream = [0usize, 0, 1, 2, 1, 0, 2, 2];
    for (i, &k) in stream.iter().enumerate() {
        let obs = observation(i as u64);
        let wire = c.infer(INSTR[k], &obs).unwrap();
        let want = direct
            .infer(&InferenceRequest {
                instruction: Instruction::from_text(INSTR[k], &cfg),
                observation: obs.clone(),
            })
            .unwrap();
        let got = actions_from_json(&wire).unwrap();
        let a = &want.action_chunk.actions;
        for (r, row) in got.iter().enumerate() {
            let bits: Vec<u32> = row.iter().map(|v| v.to_bits()).collect();
            let wbits: Vec<u32> = a.row(r).iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, wbits);
        }
        assert_eq!(wire["expert"].as_str(), want.expert_id.as_deref());
        assert_eq!(wire["switched"], want.switched);
    }
    let s = c.call(&json!({"op": "stats"})).unwrap();
    assert_eq!(s["switches"], direct.stats().switches);
    drop(c);
    stop.shutdown();
    h.join().unwrap();
}

#[test]
fn expert_reply_matches_offline_merge() {
    let f = fixture();
    let (addr, stop, h) = start(&f);
    let mut c = Client::connect(addr).unwrap();
    let obs = observation(3);
    let reply = c.infer("  Close the   DRAWER", &obs).unwrap();
    assert_eq!(reply["expert"], "expert1");
    let merged = merge(&f.base, &f.experts[1]).unwrap();
    let want = forward(&merged, &Instruction::from_text("  Close the   DRAWER", &config()), &obs).unwrap();
    let got = actions_from_json(&reply).unwrap();
    assert_eq!(got[0], want.chunk.actions.row(0));
    drop(c);
    stop.shutdown();
    h.join().unwrap();
}

#[test]
fn two_clients_alternating() {
    let f = fixture();
    let (addr, stop, h) = start(&f);
    let mut a = Client::connect(addr).unwrap();
    let mut b = Client::connect(addr).unwrap();
    // Strict alternation fixes arrival order, so every request switches.
    let mut prev: Option<String> = None;
    let mut expected = 0;
    for i in 0..10 {
        let (c, text, id) = if i % 2 == 0 {
            (&mut a, INSTR[0], "expert0")
        } else {
            (&mut b, INSTR[1], "expert1")
        };
        let r = c.infer(text, &observation(i)).unwrap();
        assert_eq!(r["expert"], id);
        if prev.as_deref() != Some(id) {
            expected += 1;
        }
        assert_eq!(r["switched"], true);
        prev = Some(id.to_string());
    }
    let s = a.call(&json!({"op": "stats"})).unwrap();
    assert_eq!(s["switches"], expected);
    assert_eq!(s["hits"], 10);
    drop((a, b));
    stop.shutdown();
    h.join().unwrap();
}

#[test]
fn errors_are_typed_and_connection_survives() {
    let f = fixture();
    let (addr, stop, h) = start(&f);
    let mut c = Client::connect(addr).unwrap();
    let kind = |v: Value| v["error"]["kind"].as_str().unwrap().to_string();
    assert_eq!(kind(serde_json::from_str(&c.call_raw("{not json").unwrap()).unwrap()), "malformed_json");
    assert_eq!(kind(c.call(&json!({"op": "dance"})).unwrap()), "unknown_op");
    assert_eq!(kind(c.call(&json!({"nop": 1})).unwrap()), "bad_request");
    assert_eq!(kind(c.call(&json!({"op": "infer", "instruction": "x"})).unwrap()), "bad_request");
    let short = c
        .call(&json!({"op": "infer", "instruction": "x", "observation": [1.0], "proprio": [0.0, 0.0]}))
        .unwrap();
    assert_eq!(short["ok"], false);
    assert_eq!(kind(short.clone()), "dimension");
    assert!(short["error"]["msg"].as_str().unwrap().contains("expected 5"));
    // Still serving after all of the above.
    assert_eq!(c.call(&json!({"op": "stats"})).unwrap()["ok"], true);
    drop(c);
    stop.shutdown();
    h.join().unwrap();
}

#[test]
fn dropped_client_mid_request_leaves_legal_state() {
    let f = fixture();
    let server = Server::bind("127.0.0.1:0", manager(&f)).unwrap();
    let addr = server.local_addr().unwrap();
    let stop = server.shutdown_handle().unwrap();
    let shared = server.manager();
    let h = thread::spawn(move || server.run().unwrap());
    {
        use std::io::Write;
        let mut raw = std::net::TcpStream::connect(addr).unwrap();
        raw.write_all(b"{\"op\":\"infer\",\"instruction\":\"open the drawer\",\"obs").unwrap();
    }
    let mut c = Client::connect(addr).unwrap();
    c.infer(INSTR[0], &observation(1)).unwrap();
    drop(c);
    stop.shutdown();
    h.join().unwrap();
    let m = shared.lock().unwrap();
    let e = &f.experts[0];
    assert_eq!(m.active(), Some("expert0"));
    assert_eq!(m.serving(), &merge(&f.base, e).unwrap());
    assert_eq!(m.stats().requests, 1);
}

#[test]
fn f32_survives_the_wire() {
    let mut r = Rng::new(9);
    for _ in 0..200_000 {
        let x = f32::from_bits(r.next_u64() as u32);
        if !x.is_finite() {
            continue;
        }
        let v: Value = serde_json::from_str(&json!([x]).to_string()).unwrap();
        assert_eq!((v[0].as_f64().unwrap() as f32).to_bits(), x.to_bits(), "{x:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn every_line_gets_one_json_reply(line in "[ -~]{0,80}") {
        let f = fixture_once();
        let reply = handle_line(f, &line);
        prop_assert!(!reply.contains('\n'));
        let v: Value = serde_json::from_str(&reply).unwrap();
        prop_assert!(v["ok"].is_boolean());
    }
}

fn fixture_once() -> &'static Mutex<Manager> {
    use std::sync::OnceLock;
    static M: OnceLock<(Fixture, Mutex<Manager>)> = OnceLock::new();
    &M.get_or_init(|| {
        let f = fixture();
        let m = Mutex::new(manager(&f));
        (f, m)
    })
    .1
}
