//! The HTTP backend against an in-process server that speaks the
//! inference protocol and serves a stub model.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use sycam::backend::{
    decode_payload, load_backend, Backend, BackendConfig, BackendError, BackendKind, ClassifyRequest, ClassifyResponse,
    MetaResponse, StubModel,
};
use sycam::expr::Expr;
use sycam::metrics::{evaluate_metric, MetricKind};
use sycam::synthetic::{generate_synthetic, SyntheticParams};
use sycam::{parse_expr, Tensor};
use tiny_http::{Header, Method, Response, Server};

#[derive(Clone, Copy)]
enum Mode {
    Normal,
    /// Fail the first `n` classify calls with HTTP 503.
    FlakyFirst(usize),
    /// Answer classify with HTTP 400.
    Reject,
}

struct TestServer {
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
    url: String,
    classify_calls: Arc<AtomicUsize>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
    }
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

/// Serves raw logits of `model` (softmax=false), so the client applies
/// softmax itself.
fn serve(model: StubModel, dims: [usize; 3], mode: Mode) -> TestServer {
    let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
    let port = server.server_addr().to_ip().unwrap().port();
    let calls = Arc::new(AtomicUsize::new(0));
    let (s, c) = (server.clone(), calls.clone());
    let n_classes = model.weights().dims()[0];
    let handle = std::thread::spawn(move || {
        for mut req in s.incoming_requests() {
            let resp = match (req.method(), req.url()) {
                (Method::Get, "/v1/meta") => json_response(
                    200,
                    serde_json::to_string(&MetaResponse {
                        dims,
                        num_classes: n_classes,
                        softmax: false,
                    })
                    .unwrap(),
                ),
                (Method::Post, "/v1/classify") => {
                    let seen = c.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    req.as_reader().read_to_string(&mut body).unwrap();
                    match mode {
                        Mode::FlakyFirst(n) if seen < n => json_response(503, "{\"error\":\"busy\"}".into()),
                        Mode::Reject => json_response(400, "{\"error\":\"batch too large\"}".into()),
                        _ => {
                            let parsed: ClassifyRequest = serde_json::from_str(&body).unwrap();
                            let images = decode_payload(&parsed).unwrap();
                            let scores = images.iter().map(|t| model.logits(t.data())).collect();
                            json_response(200, serde_json::to_string(&ClassifyResponse { scores }).unwrap())
                        }
                    }
                }
                _ => json_response(404, "{}".into()),
            };
            let _ = req.respond(resp);
        }
    });
    TestServer {
        server,
        handle: Some(handle),
        url: format!("http://127.0.0.1:{port}"),
        classify_calls: calls,
    }
}

fn remote_cfg(url: &str, batch: usize, retries: u32) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Remote {
            base_url: url.to_string(),
            timeout_ms: 5_000,
            max_retries: retries,
        },
        batch_size: batch,
        softmax_applied_by_model: false,
    }
}

fn params() -> SyntheticParams {
    SyntheticParams {
        n_classes: 2,
        images_per_class: 4,
        k: 4,
        w: 3,
        h: 3,
        ch: 1,
        height: 9,
        width: 9,
        seed: 11,
    }
}

#[test]
fn meta_probe_reports_dims_and_classes() {
    let s = generate_synthetic(&params()).unwrap();
    let srv = serve(s.model.clone(), [1, 9, 9], Mode::Normal);
    let b = load_backend(&remote_cfg(&srv.url, 16, 0), Some([1, 9, 9])).unwrap();
    assert_eq!(b.input_dims(), [1, 9, 9]);
    assert_eq!(b.num_classes(), 2);
}

#[test]
fn probe_dims_mismatch_is_a_configuration_error() {
    let s = generate_synthetic(&params()).unwrap();
    let srv = serve(s.model.clone(), [1, 9, 9], Mode::Normal);
    let err = load_backend(&remote_cfg(&srv.url, 16, 0), Some([3, 9, 9])).err().unwrap();
    match err {
        BackendError::Config(m) => assert!(m.contains("[1, 9, 9]") && m.contains("[3, 9, 9]"), "{m}"),
        other => panic!("{other}"),
    }
}

#[test]
fn unreachable_server_fails_at_load() {
    // Bind then drop to obtain a port nothing listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = load_backend(&remote_cfg(&format!("http://127.0.0.1:{port}"), 16, 1), None).err().unwrap();
    assert!(matches!(err, BackendError::Config(_)), "{err}");
}

#[test]
fn batches_preserve_order_and_match_the_stub() {
    let s = generate_synthetic(&params()).unwrap();
    let srv = serve(s.model.clone(), [1, 9, 9], Mode::Normal);
    let remote = load_backend(&remote_cfg(&srv.url, 2, 0), None).unwrap();
    let images: Vec<Tensor> = s.dataset.records.iter().take(5).map(|r| r.image.clone().unwrap()).collect();
    let got = remote.classify(&images);
    let want = s.model.classify(&images);
    assert_eq!(got.len(), 5);
    for (g, w) in got.iter().zip(&want) {
        let (g, w) = (g.as_ref().unwrap(), w.as_ref().unwrap());
        for (a, b) in g.probs.iter().zip(&w.probs) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
    // batch_size 2 over 5 images
    assert_eq!(srv.classify_calls.load(Ordering::SeqCst), 3);
}

#[test]
fn wrong_dims_fail_per_index_only() {
    let s = generate_synthetic(&params()).unwrap();
    let srv = serve(s.model.clone(), [1, 9, 9], Mode::Normal);
    let remote = load_backend(&remote_cfg(&srv.url, 16, 0), None).unwrap();
    let good = s.dataset.records[0].image.clone().unwrap();
    let bad = Tensor::new(vec![1, 3, 3], vec![0.0; 9]).unwrap();
    let out = remote.classify(&[good.clone(), bad, good]);
    assert!(out[0].is_ok() && out[2].is_ok());
    assert!(matches!(out[1], Err(BackendError::DimMismatch { index: 1, .. })));
}

#[test]
fn transient_failures_are_retried() {
    let s = generate_synthetic(&params()).unwrap();
    let srv = serve(s.model.clone(), [1, 9, 9], Mode::FlakyFirst(2));
    let remote = load_backend(&remote_cfg(&srv.url, 16, 3), None).unwrap();
    let img = s.dataset.records[0].image.clone().unwrap();
    assert!(remote.classify(&[img])[0].is_ok());
    assert_eq!(srv.classify_calls.load(Ordering::SeqCst), 3);
}

#[test]
fn exhausted_retries_mark_images_failed() {
    let s = generate_synthetic(&params()).unwrap();
    let srv = serve(s.model.clone(), [1, 9, 9], Mode::FlakyFirst(usize::MAX));
    let remote = load_backend(&remote_cfg(&srv.url, 16, 1), None).unwrap();
    let img = s.dataset.records[0].image.clone().unwrap();
    let out = remote.classify(&[img.clone(), img]);
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|r| matches!(r, Err(BackendError::Transport { attempts: 2, .. }))));
}

#[test]
fn client_errors_surface_the_server_message() {
    let s = generate_synthetic(&params()).unwrap();
    let srv = serve(s.model.clone(), [1, 9, 9], Mode::Reject);
    let remote = load_backend(&remote_cfg(&srv.url, 16, 3), None).unwrap();
    let img = s.dataset.records[0].image.clone().unwrap();
    match &remote.classify(&[img])[0] {
        Err(BackendError::Transport { attempts: 1, message }) => assert!(message.contains("batch too large")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn metrics_through_remote_match_the_stub() {
    let s = generate_synthetic(&params()).unwrap();
    let srv = serve(s.model.clone(), [1, 9, 9], Mode::Normal);
    let remote = load_backend(&remote_cfg(&srv.url, 16, 0), Some([1, 9, 9])).unwrap();
    let exprs: Vec<Expr> = ["Grads", "ReLU(Grads) * CICScores", "2*AblScores + top5"]
        .iter()
        .map(|t| parse_expr(t).unwrap())
        .collect();
    for e in &exprs {
        for m in [MetricKind::AvgDrop, MetricKind::Deletion(Some(9)), MetricKind::Insertion(Some(9))] {
            let a = evaluate_metric(m, e, &s.dataset, Some(&s.model), 1).unwrap();
            let b = evaluate_metric(m, e, &s.dataset, Some(remote.as_ref()), 2).unwrap();
            assert!(b.failures.is_empty());
            for ((ia, va), (ib, vb)) in a.per_image.iter().zip(&b.per_image) {
                assert_eq!(ia, ib);
                // Average Drop is in percent: 1e-5 on the fraction is 1e-3 here.
                let tol = if m == MetricKind::AvgDrop { 1e-3 } else { 1e-5 };
                assert!((va - vb).abs() < tol, "{m} {ia}: {va} vs {vb}");
            }
        }
    }
}
