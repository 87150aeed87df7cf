//! End-to-end service tests: server + remote oracle against the in-process
//! paths they must agree with.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

use gradmark::attack::WrapperSpec;
use gradmark::client::RemoteOracle;
use gradmark::data::make_synthetic;
use gradmark::extract::{blackbox_estimate_gradient, ModelOracle, PredictionOracle};
use gradmark::nn::{build_model, train, Model, ModelConfig, TrainConfig};
use gradmark::server::{serve_model, RunningServer, ServerConfig};
use gradmark::watermark::{generate_key_random, verify, VerificationPolicy, WatermarkKey};

fn tiny_trained() -> Model {
    let ds = make_synthetic(4, 30, (4, 4, 1), 5).unwrap();
    let model = build_model(&ModelConfig::mlp((4, 4, 1), 10, 4, 3)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lambda: 0.0,
        seed: 2,
        ..TrainConfig::default()
    };
    train(&model, &ds, &cfg, None).unwrap().0
}

fn start(model: Model, wrappers: Vec<WrapperSpec>, query_limit: Option<u64>) -> RunningServer {
    let config = ServerConfig {
        bind: "127.0.0.1:0".into(),
        checkpoint: "unused".into(),
        wrappers,
        max_connections: 8,
        query_limit,
    };
    serve_model(model, &config).unwrap()
}

#[test]
fn remote_matches_in_process_bit_exact() {
    let model = tiny_trained();
    let local = ModelOracle::new(model.clone()).unwrap();
    let server = start(model, vec![], None);
    let remote = RemoteOracle::connect(&server.addr().to_string(), 16, 4).unwrap();

    let ds = make_synthetic(4, 10, (4, 4, 1), 9).unwrap();
    for i in 0..ds.len() {
        let a = local.query(ds.image(i)).unwrap();
        let b = remote.query(ds.image(i)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits(), "sample {i}");
        }
    }
    assert_eq!(remote.queries_served(), ds.len() as u64);
    server.stop();
}

#[test]
fn malformed_line_gets_error_and_connection_survives() {
    let server = start(tiny_trained(), vec![], None);
    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;

    writeln!(writer, "this is not json").unwrap();
    writer.flush().unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains("\"error\":\"parse\""), "{line}");

    // same connection still answers a valid request
    let input: Vec<String> = (0..16).map(|_| "0.5".to_string()).collect();
    writeln!(writer, "{{\"id\":7,\"input\":[{}]}}", input.join(",")).unwrap();
    writer.flush().unwrap();
    line.clear();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains("\"id\":7") && line.contains("probs"), "{line}");
    server.stop();
}

#[test]
fn wrong_input_dimension_reports_error() {
    let server = start(tiny_trained(), vec![], None);
    let remote = RemoteOracle::connect(&server.addr().to_string(), 16, 4).unwrap();
    let err = remote.query(&[0.5; 7]).unwrap_err();
    assert!(err.to_string().contains("expects"), "{err}");
    server.stop();
}

#[test]
fn rounding_wrapper_applies_on_server_side() {
    let server = start(tiny_trained(), vec![WrapperSpec::Round { decimals: 1 }], None);
    let remote = RemoteOracle::connect(&server.addr().to_string(), 16, 4).unwrap();
    let probs = remote.query(&[0.4; 16]).unwrap();
    for p in probs {
        let scaled = p * 10.0;
        assert!((scaled - scaled.round()).abs() < 1e-12, "not one-decimal: {p}");
    }
    server.stop();
}

#[test]
fn query_limit_cuts_off_connection() {
    let server = start(tiny_trained(), vec![], Some(3));
    let remote = RemoteOracle::connect(&server.addr().to_string(), 16, 4).unwrap();
    for _ in 0..3 {
        remote.query(&[0.5; 16]).unwrap();
    }
    let err = remote.query(&[0.5; 16]).unwrap_err();
    assert!(err.to_string().contains("query limit"), "{err}");
    server.stop();
}

fn marked_tiny() -> (Model, WatermarkKey, gradmark::data::Dataset) {
    let ds = make_synthetic(4, 60, (4, 4, 1), 31).unwrap();
    let key = generate_key_random(4, 12, 16, 4, 77).unwrap();
    let model = build_model(&ModelConfig::mlp((4, 4, 1), 12, 4, 6)).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 24,
        learning_rate: 0.02,
        lambda: 0.1,
        wm_batch_size: 16,
        seed: 41,
        ..TrainConfig::default()
    };
    let (marked, _) = train(&model, &ds, &cfg, Some(&key)).unwrap();
    (marked, key, ds)
}

#[test]
fn remote_and_in_process_verification_identical() {
    let (marked, key, ds) = marked_tiny();
    let pool = ds.of_class(key.target_class()).head(10);
    let policy = VerificationPolicy::default();

    let local_oracle = ModelOracle::new(marked.clone()).unwrap();
    let local_est = blackbox_estimate_gradient(&local_oracle, &key, &pool, 1e-4).unwrap();
    let local_report = verify(&local_est.values, &key, &policy, local_est.meta).unwrap();

    let server = start(marked, vec![], None);
    let remote = RemoteOracle::connect(&server.addr().to_string(), 16, 4).unwrap();
    let remote_est = blackbox_estimate_gradient(&remote, &key, &pool, 1e-4).unwrap();
    let remote_report = verify(&remote_est.values, &key, &policy, remote_est.meta).unwrap();

    // identical gradient estimates, bit for bit
    for (a, b) in local_est.values.iter().zip(&remote_est.values) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(local_report.decoded, remote_report.decoded);
    assert_eq!(local_report.n_error, remote_report.n_error);
    assert_eq!(local_report.verified, remote_report.verified);
    assert_eq!(local_report.p_value, remote_report.p_value);

    // query accounting: s * (|C|+1) on both sides
    let expect = (pool.len() * (key.carrier_size() + 1)) as u64;
    assert_eq!(local_est.meta.query_count, expect);
    assert_eq!(remote_est.meta.query_count, expect);
    assert_eq!(remote.queries_served(), expect);
    assert_eq!(server.queries_served(), expect);
    server.stop();
}

#[test]
fn concurrent_clients_get_identical_answers() {
    let server = start(tiny_trained(), vec![], None);
    let addr = server.addr().to_string();
    let ds = make_synthetic(4, 8, (4, 4, 1), 13).unwrap();
    let images: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.image(i).to_vec()).collect();

    let mut handles = Vec::new();
    for _ in 0..4 {
        let addr = addr.clone();
        let images = images.clone();
        handles.push(std::thread::spawn(move || {
            let remote = RemoteOracle::connect(&addr, 16, 4).unwrap();
            remote.query_batch(&images).unwrap()
        }));
    }
    let answers: Vec<Vec<Vec<f64>>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for other in &answers[1..] {
        for (a, b) in answers[0].iter().zip(other) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
    server.stop();
}

#[test]
fn stochastic_wrappers_reproducible_per_connection() {
    // same wrapper seed per connection: two separate connections receive
    // identical noise sequences
    let (marked, _, ds) = marked_tiny();
    let server = start(
        marked,
        vec![WrapperSpec::Noise {
            sigma: 0.05,
            seed: 99,
        }],
        None,
    );
    let addr = server.addr().to_string();
    let x = ds.image(0).to_vec();

    let r1 = RemoteOracle::connect(&addr, 16, 4).unwrap();
    let a1 = r1.query(&x).unwrap();
    let a2 = r1.query(&x).unwrap();
    drop(r1);
    let r2 = RemoteOracle::connect(&addr, 16, 4).unwrap();
    let b1 = r2.query(&x).unwrap();
    let b2 = r2.query(&x).unwrap();

    for (a, b) in a1.iter().zip(&b1) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for (a, b) in a2.iter().zip(&b2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // noise actually applied: consecutive queries on one connection differ
    assert_ne!(a1, a2);
    server.stop();
}
