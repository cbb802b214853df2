//! End-to-end service tests: byte passthrough, conflict/not-found handling,
//! concurrent clients, and malformed-frame resilience.

use pluto_store_service::{
    client_get, client_list, client_put, read_frame, serve, write_frame, ServiceError, OP_ERR,
    OP_GET, OP_OK,
};
use pluto_core::pet::{serialize, ModuleMeta, ModuleRecord, PetHyper, Store};
use pluto_core::rng::Rng;
use pluto_core::tensor::Tensor;
use pluto_core::vit::VitConfig;
use std::io::Write;
use std::net::TcpStream;

fn sample_record(id: &str, seed: u64) -> ModuleRecord {
    let cfg = VitConfig::desk_default();
    let mut rng = Rng::new(seed);
    let d = cfg.embed_dim;
    ModuleRecord {
        id: id.to_string(),
        domain_label: format!("blur:sev{}", seed % 6),
        hyper: PetHyper::Vpt { prompts: 4 },
        payload: vec![(
            "prompts".to_string(),
            Tensor::from_fn(&[4, d], |_| rng.uniform(-1.0, 1.0)),
        )],
        head_weight: Tensor::from_fn(&[d, cfg.classes], |_| rng.normal()),
        head_bias: Tensor::zeros(&[cfg.classes]),
        meta: ModuleMeta {
            source_train_accuracy: 0.5,
            seed,
            created_at: 0,
            head_param_count: d * cfg.classes + cfg.classes,
            bias_param_count: 0,
        },
    }
}

fn populated_store(dir: &std::path::Path, n: usize) -> Vec<String> {
    let store = Store::open(dir).unwrap();
    let mut ids = Vec::new();
    for i in 0..n {
        let record = sample_record(&format!("module:{i:02}"), i as u64);
        store.put_module(&record).unwrap();
        ids.push(record.id);
    }
    ids
}

#[test]
fn list_and_get_pass_bytes_through() {
    let tmp = tempfile::tempdir().unwrap();
    let ids = populated_store(tmp.path(), 4);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();

    let listing = client_list(addr).unwrap();
    assert_eq!(listing.len(), 4);
    let listed: Vec<&str> = listing.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(listed, ids.iter().map(String::as_str).collect::<Vec<_>>());

    let store = Store::open(tmp.path()).unwrap();
    for entry in &listing {
        let (container, bytes) = client_get(addr, &entry.id).unwrap();
        assert_eq!(container.id, entry.id);
        let local = store.get_bytes(&entry.id).unwrap();
        assert_eq!(bytes, local, "wire bytes differ from disk for {}", entry.id);
        assert_eq!(entry.digest, pluto_core::pet::sha256_hex(&local));
    }
    server.shutdown();
}

#[test]
fn get_unknown_id_returns_not_found_frame() {
    let tmp = tempfile::tempdir().unwrap();
    populated_store(tmp.path(), 1);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();

    match client_get(addr, "module:zz") {
        Err(ServiceError::NotFound(id)) => assert_eq!(id, "module:zz"),
        other => panic!("expected NotFound, got {other:?}"),
    }

    // raw frame body is exactly "not_found:<id>"
    let mut stream = TcpStream::connect(addr).unwrap();
    write_frame(&mut stream, OP_GET, b"nope").unwrap();
    let frame = read_frame(&mut stream).unwrap();
    assert_eq!(frame.opcode, OP_ERR);
    assert_eq!(frame.body, b"not_found:nope");
    server.shutdown();
}

#[test]
fn put_roundtrip_and_duplicate_conflict() {
    let tmp = tempfile::tempdir().unwrap();
    populated_store(tmp.path(), 0);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();

    let record = sample_record("module:new", 9);
    let bytes = serialize(&record.to_container());
    let digest = client_put(addr, &bytes).unwrap();
    assert_eq!(digest, pluto_core::pet::sha256_hex(&bytes));

    let (container, fetched) = client_get(addr, "module:new").unwrap();
    assert_eq!(fetched, bytes);
    let back = ModuleRecord::from_container(&container).unwrap();
    assert_eq!(back.id, record.id);
    assert_eq!(back.domain_label, record.domain_label);

    match client_put(addr, &bytes) {
        Err(ServiceError::Conflict(id)) => assert_eq!(id, "module:new"),
        other => panic!("expected Conflict, got {other:?}"),
    }
    server.shutdown();
}

#[test]
fn eight_concurrent_clients_fetch_correct_payloads() {
    let tmp = tempfile::tempdir().unwrap();
    let ids = populated_store(tmp.path(), 6);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();
    let store = Store::open(tmp.path()).unwrap();
    let expected: Vec<Vec<u8>> = ids.iter().map(|id| store.get_bytes(id).unwrap()).collect();

    let mut handles = Vec::new();
    for worker in 0..8 {
        let ids = ids.clone();
        let expected = expected.clone();
        handles.push(std::thread::spawn(move || {
            for round in 0..3 {
                let pick = (worker + round) % ids.len();
                let (_, bytes) = client_get(addr, &ids[pick]).unwrap();
                assert_eq!(bytes, expected[pick], "worker {worker} round {round}");
            }
        }));
    }
    for h in handles {
        h.join().unwrap();
    }
    server.shutdown();
}

#[test]
fn concurrent_puts_and_lists_do_not_corrupt_the_index() {
    let tmp = tempfile::tempdir().unwrap();
    populated_store(tmp.path(), 0);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();

    let mut handles = Vec::new();
    for worker in 0..4 {
        handles.push(std::thread::spawn(move || {
            let record = sample_record(&format!("module:put{worker}"), 20 + worker as u64);
            client_put(addr, &serialize(&record.to_container())).unwrap();
        }));
    }
    for _ in 0..4 {
        handles.push(std::thread::spawn(move || {
            // listings taken mid-flight must always parse and stay sorted
            for _ in 0..5 {
                let listing = client_list(addr).unwrap();
                let ids: Vec<&str> = listing.iter().map(|e| e.id.as_str()).collect();
                let mut sorted = ids.clone();
                sorted.sort();
                assert_eq!(ids, sorted);
            }
        }));
    }
    for h in handles {
        h.join().unwrap();
    }

    let listing = client_list(addr).unwrap();
    assert_eq!(listing.len(), 4);
    for worker in 0..4 {
        let (_, bytes) = client_get(addr, &format!("module:put{worker}")).unwrap();
        assert!(!bytes.is_empty());
    }
    server.shutdown();
}

#[test]
fn malformed_opcode_gets_err_and_close_but_server_survives() {
    let tmp = tempfile::tempdir().unwrap();
    let ids = populated_store(tmp.path(), 1);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();

    let mut stream = TcpStream::connect(addr).unwrap();
    write_frame(&mut stream, 0x99, b"junk").unwrap();
    let frame = read_frame(&mut stream).unwrap();
    assert_eq!(frame.opcode, OP_ERR);
    assert!(frame.body.starts_with(b"bad_opcode:"));
    // connection is closed after the error
    assert!(read_frame(&mut stream).is_err());

    // and the server still answers new connections
    let (_, bytes) = client_get(addr, &ids[0]).unwrap();
    assert!(!bytes.is_empty());
    server.shutdown();
}

#[test]
fn oversized_frame_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    populated_store(tmp.path(), 1);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();

    let mut stream = TcpStream::connect(addr).unwrap();
    // claim a body far beyond the cap without sending it
    stream
        .write_all(&(pluto_store_service::MAX_FRAME_LEN + 100).to_be_bytes())
        .unwrap();
    stream.flush().unwrap();
    let frame = read_frame(&mut stream).unwrap();
    assert_eq!(frame.opcode, OP_ERR);
    assert_eq!(frame.body, b"too_large");
    server.shutdown();
}

#[test]
fn bad_container_upload_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    populated_store(tmp.path(), 0);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();

    match client_put(addr, b"not a container") {
        Err(ServiceError::Remote(msg)) => assert!(msg.starts_with("bad_container:"), "{msg}"),
        other => panic!("expected Remote(bad_container), got {other:?}"),
    }
    server.shutdown();
}

#[test]
fn multiple_requests_on_one_connection() {
    let tmp = tempfile::tempdir().unwrap();
    let ids = populated_store(tmp.path(), 2);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();

    let mut stream = TcpStream::connect(addr).unwrap();
    for id in &ids {
        write_frame(&mut stream, OP_GET, id.as_bytes()).unwrap();
        let frame = read_frame(&mut stream).unwrap();
        assert_eq!(frame.opcode, OP_OK);
    }
    server.shutdown();
}

#[test]
fn fetched_container_rejects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let ids = populated_store(tmp.path(), 1);
    let server = serve(tmp.path(), "127.0.0.1:0").unwrap();
    let addr = server.addr();
    let (_, mut bytes) = client_get(addr, &ids[0]).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    assert!(matches!(
        pluto_core::pet::deserialize(&bytes),
        Err(pluto_core::PlutoError::DigestMismatch(_))
    ));
    server.shutdown();
}
