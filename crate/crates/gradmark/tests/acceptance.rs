//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (run with `cargo test --test acceptance -- --nocapture` to see them all).
//!
//! The desk benchmark fixture (dataset, baseline, and marked models for
//! 16/32/64-bit signatures) is trained once and shared.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use num_bigint::BigUint;
use rayon::prelude::*;

use gradmark::attack::{
    adversarial_fine_tune, oracle_accuracy, quantize, robustness_sweep, verify_through_oracle,
    wrap_oracle, AdversarialFineTuneConfig, PerturbOracle, SweepConfig, WrapperSpec,
};
use gradmark::client::RemoteOracle;
use gradmark::data::{make_digits, subsample_per_class, Dataset};
use gradmark::experiment::{derive_seed, desk_train_config, embed_with_lambda_sweep};
use gradmark::extract::{
    blackbox_estimate_gradient, whitebox_expected_gradient, ModelOracle, PredictionOracle,
};
use gradmark::graph::{finite_diff_check, labels_tensor, Bindings, Graph};
use gradmark::nn::{accuracy, build_model, train, Model, ModelConfig, TrainConfig};
use gradmark::server::{serve_model, ServerConfig};
use gradmark::tensor::Tensor;
use gradmark::watermark::{
    error_threshold, generate_key_random, verify, ExtractionMeta, VerificationPolicy,
    WatermarkKey,
};

const MASTER_SEED: u64 = 0xACCE97;
const TAU: f64 = 3e-3;

fn report_line(criterion: usize, ok: bool, elapsed: std::time::Duration, detail: &str) {
    println!(
        "[criterion {criterion:2}] {} ({:.1}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

struct MarkedFixture {
    n_bits: usize,
    carrier: usize,
    key: WatermarkKey,
    model: Model,
    besr: f64,
    test_accuracy: f64,
}

struct Desk {
    train: Dataset,
    test: Dataset,
    baseline_accuracy: f64,
    marked: Vec<MarkedFixture>,
    train_cfg: TrainConfig,
}

static DESK: OnceLock<Desk> = OnceLock::new();

fn desk() -> &'static Desk {
    DESK.get_or_init(|| {
        let data_seed = derive_seed(MASTER_SEED, "data");
        let train_set = make_digits(8000, 0.1, data_seed).expect("train set");
        let test_set = make_digits(2000, 0.1, data_seed.wrapping_add(1)).expect("test set");

        let model_config = ModelConfig::mlp((28, 28, 1), 128, 10, derive_seed(MASTER_SEED, "model"));
        let base = build_model(&model_config).expect("model");
        let train_cfg = desk_train_config(derive_seed(MASTER_SEED, "train"));
        let unmarked_cfg = TrainConfig {
            lambda: 0.0,
            ..train_cfg.clone()
        };
        let (baseline, _) = train(&base, &train_set, &unmarked_cfg, None).expect("baseline");
        let baseline_accuracy = accuracy(&baseline, &test_set).expect("baseline accuracy");
        drop(baseline);

        let marked = [(16usize, 128usize), (32, 256), (64, 384)]
            .iter()
            .map(|&(n_bits, carrier)| {
                let key = generate_key_random(
                    n_bits,
                    carrier,
                    784,
                    10,
                    derive_seed(MASTER_SEED, &format!("key{n_bits}")),
                )
                .expect("key");
                let (model, _lambda, besr) = embed_with_lambda_sweep(
                    &base,
                    &train_set,
                    &train_cfg,
                    &key,
                    &[0.01, 0.05, 0.1, 0.5, 1.0],
                )
                .expect("embedding");
                let test_accuracy = accuracy(&model, &test_set).expect("marked accuracy");
                MarkedFixture {
                    n_bits,
                    carrier,
                    key,
                    model,
                    besr,
                    test_accuracy,
                }
            })
            .collect();

        Desk {
            train: train_set,
            test: test_set,
            baseline_accuracy,
            marked,
            train_cfg,
        }
    })
}

fn verify_samples(d: &Desk, key: &WatermarkKey, s: usize) -> Dataset {
    d.test.of_class(key.target_class()).head(s)
}

// criterion 1: threshold exactness against an independent big-integer oracle
#[test]
fn criterion_01_threshold_exactness() {
    let t0 = Instant::now();

    // independent oracle: full Pascal row, scan partial sums of C(N, 0..=k)
    // against tau * 2^N compared through integer cross-multiplication with
    // the exact dyadic expansion of tau
    fn oracle_min_correct(n: usize, tau: f64) -> i64 {
        let mut row = vec![BigUint::from(1u32)]; // C(n,0)..C(n,k)
        for k in 1..=n {
            let prev = &row[k - 1];
            row.push(prev * BigUint::from((n - k + 1) as u64) / BigUint::from(k as u64));
        }
        // tau as exact fraction num / 2^shift
        let bits = tau.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64 - 1075;
        let mantissa = BigUint::from((bits & ((1u64 << 52) - 1)) | (1u64 << 52));
        let mut eta: i64 = -1;
        let mut cum = BigUint::from(0u32);
        for (k, coeff) in row.iter().enumerate() {
            cum += coeff;
            // cum / 2^n < mantissa * 2^exp
            let t = exp + n as i64;
            let below = if t >= 0 {
                cum < (mantissa.clone() << t as u64)
            } else {
                (cum.clone() << (-t) as u64) < mantissa
            };
            if below {
                eta = k as i64;
            } else {
                break;
            }
        }
        n as i64 - eta
    }

    let mut ok = true;
    let mut detail = String::new();
    for (n, expect_min_correct) in [(16usize, 14i64), (32, 25), (64, 44)] {
        let eta = error_threshold(n, TAU).expect("threshold");
        let min_correct = n as i64 - eta;
        let oracle = oracle_min_correct(n, TAU);
        ok &= min_correct == expect_min_correct && oracle == expect_min_correct;
        detail.push_str(&format!("N={n}: min correct {min_correct} (oracle {oracle}); "));
    }
    let elapsed = t0.elapsed();
    ok &= elapsed.as_secs_f64() < 1.0;
    report_line(1, ok, elapsed, &detail);
}

// criterion 2: analytic gradients vs central finite differences
#[test]
fn criterion_02_gradient_correctness() {
    let t0 = Instant::now();
    // two-layer MLP at reduced scale so every coordinate gets probed
    let config = ModelConfig::mlp((8, 8, 1), 16, 4, 21);
    let model = build_model(&config).expect("model");
    let key = generate_key_random(6, 12, 64, 4, 33).expect("key");
    let batch_n = 4usize;
    let mut img_rng_state = 0x12345u64;
    let mut next = move || {
        img_rng_state = img_rng_state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((img_rng_state >> 11) as f64 / (1u64 << 53) as f64).clamp(0.0, 1.0)
    };
    let images = Tensor::new(vec![batch_n, 8, 8, 1], (0..batch_n * 64).map(|_| next()).collect())
        .expect("images");
    let labels = vec![key.target_class(); batch_n];

    // graph: J_ce over the batch and J_emb through the recorded gradient
    let mut g = Graph::new();
    let params = model.param_leaves(&mut g);
    let x = g.leaf("x", &[batch_n, 8, 8, 1], false);
    let y = g.constant(labels_tensor(&labels));
    let logits = model.logits_graph(&mut g, x, &params).expect("logits");
    let ce_vec = g.softmax_xent(logits, y).expect("ce");
    let ce = g.mean_all(ce_vec).expect("mean");
    let ce_sum = g.sum_all(ce_vec).expect("sum");
    let gx = g.grad(ce_sum, &[x]).expect("dx")[0];
    let flat = g.reshape(gx, &[batch_n, 64]).expect("flat");
    let mean_g = g.mean_to(flat, &[64]).expect("mean g");
    let carrier_g = g.gather_coords(mean_g, key.carrier()).expect("carrier");
    let col = g.reshape(carrier_g, &[key.carrier_size(), 1]).expect("col");
    let kmat = g.constant(
        Tensor::new(vec![key.n_bits(), key.carrier_size()], key.matrix().to_vec()).expect("K"),
    );
    let zc = g.matmul(kmat, col).expect("z");
    let z = g.reshape(zc, &[key.n_bits()]).expect("z flat");
    let sp = g.softplus(z).expect("softplus");
    let bvec = g.constant(Tensor::from_vec(
        key.bits().iter().map(|&b| f64::from(b)).collect(),
    ));
    let bz = g.mul(bvec, z).expect("bz");
    let per = g.sub(sp, bz).expect("per");
    let j_emb = g.sum_all(per).expect("j_emb");

    let dce_dx = g.grad(ce, &[x]).expect("dce/dx")[0];
    let demb_dtheta = g.grad(j_emb, &params).expect("demb/dtheta");

    let bind_with = |xv: &Tensor, pvals: Option<&[Tensor]>| {
        let mut b = Bindings::new();
        b.bind(x, xv.clone());
        match pvals {
            Some(vals) => {
                for (node, v) in params.iter().zip(vals) {
                    b.bind(*node, v.clone());
                }
            }
            None => {
                for (node, p) in params.iter().zip(&model.params) {
                    b.bind(*node, p.value.clone());
                }
            }
        }
        b
    };

    // first-order: dJ_ce/dx
    let analytic_dx = {
        let b = bind_with(&images, None);
        g.forward(&b, dce_dx).expect("analytic dx")
    };
    let f_x = |p: &Tensor| -> gradmark::Result<f64> {
        let b = bind_with(p, None);
        Ok(g.forward(&b, ce)?.scalar_value())
    };
    let err_x = finite_diff_check(&f_x, &analytic_dx, &images, 1e-5).expect("fd x");

    // second-order path: dJ_emb/dtheta, theta flattened across parameters
    let theta_flat: Vec<f64> = model
        .params
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect();
    let theta_point = Tensor::from_vec(theta_flat);
    let unflatten = |flat: &Tensor| -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut off = 0usize;
        for p in &model.params {
            let n = p.value.numel();
            out.push(
                Tensor::new(p.value.shape().to_vec(), flat.data()[off..off + n].to_vec())
                    .expect("param slice"),
            );
            off += n;
        }
        out
    };
    let analytic_dtheta = {
        let b = bind_with(&images, None);
        let grads = g.eval(&b, &demb_dtheta).expect("analytic dtheta");
        Tensor::from_vec(
            grads
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect(),
        )
    };
    let f_theta = |p: &Tensor| -> gradmark::Result<f64> {
        let vals = unflatten(p);
        let b = bind_with(&images, Some(&vals));
        Ok(g.forward(&b, j_emb)?.scalar_value())
    };
    let err_theta =
        finite_diff_check(&f_theta, &analytic_dtheta, &theta_point, 1e-5).expect("fd theta");

    let ok = err_x < 1e-5 && err_theta < 1e-3;
    report_line(
        2,
        ok,
        t0.elapsed(),
        &format!("dJ_ce/dx rel err {err_x:.2e} (< 1e-5); dJ_emb/dtheta rel err {err_theta:.2e} (< 1e-3)"),
    );
}

// criterion 3: capacity with bounded accuracy cost
#[test]
fn criterion_03_embedding_capacity() {
    let t0 = Instant::now();
    let d = desk();
    let mut ok = true;
    let mut detail = format!("baseline acc {:.4}; ", d.baseline_accuracy);
    for m in &d.marked {
        let drop = (d.baseline_accuracy - m.test_accuracy) * 100.0;
        ok &= m.besr == 1.0 && drop <= 2.0;
        detail.push_str(&format!(
            "N={}: besr {}, acc {:.4} (drop {:.2} pts); ",
            m.n_bits, m.besr, m.test_accuracy, drop
        ));
    }
    report_line(3, ok, t0.elapsed(), &detail);
}

// criterion 4: black-box decoding equals white-box decoding, exact queries
#[test]
fn criterion_04_blackbox_equals_whitebox() {
    let t0 = Instant::now();
    let d = desk();
    let s = 50usize;
    let mut ok = true;
    let mut detail = String::new();
    for m in &d.marked {
        let samples = verify_samples(d, &m.key, s);
        let white = whitebox_expected_gradient(&m.model, &m.key, &samples).expect("white");
        let white_bits = gradmark::watermark::decode(&white.values, &m.key).expect("decode");
        let oracle = ModelOracle::new(m.model.clone()).expect("oracle");
        let black = blackbox_estimate_gradient(&oracle, &m.key, &samples, 1e-4).expect("black");
        let black_bits = gradmark::watermark::decode(&black.values, &m.key).expect("decode");
        let expect_queries = (s * (m.carrier + 1)) as u64;
        let identical = white_bits == black_bits;
        let counted = black.meta.query_count == expect_queries
            && oracle.queries_served() == expect_queries;
        ok &= identical && counted;
        detail.push_str(&format!(
            "N={}: identical {}, queries {}={} ; ",
            m.n_bits, identical, black.meta.query_count, expect_queries
        ));
    }
    report_line(4, ok, t0.elapsed(), &detail);
}

// criterion 5: reliability - unmarked models never verify; null FPR below tau
#[test]
fn criterion_05_reliability_false_positives() {
    let t0 = Instant::now();
    let d = desk();
    let n_models = 20usize;
    let results: Vec<(usize, f64, bool)> = (0..n_models)
        .into_par_iter()
        .flat_map(|i| {
            let config = ModelConfig::mlp(
                (28, 28, 1),
                128,
                10,
                derive_seed(MASTER_SEED, &format!("null-model{i}")),
            );
            let model = build_model(&config).expect("null model");
            let cfg = TrainConfig {
                lambda: 0.0,
                seed: derive_seed(MASTER_SEED, &format!("null-train{i}")),
                ..d.train_cfg.clone()
            };
            let (trained, _) = train(&model, &d.train, &cfg, None).expect("null train");
            d.marked
                .par_iter()
                .map(|m| {
                    let samples = verify_samples(d, &m.key, 50);
                    let est =
                        whitebox_expected_gradient(&trained, &m.key, &samples).expect("est");
                    let rep = verify(
                        &est.values,
                        &m.key,
                        &VerificationPolicy::default(),
                        est.meta,
                    )
                    .expect("verify");
                    (
                        m.n_bits,
                        rep.n_error as f64 / m.n_bits as f64,
                        rep.verified,
                    )
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let none_verified = results.iter().all(|(_, _, v)| !v);
    let mean_ber = results.iter().map(|(_, b, _)| b).sum::<f64>() / results.len() as f64;

    // Monte Carlo null FPR with a binomial (Wilson) 95% interval
    use rand::{Rng, RngCore, SeedableRng};
    let trials = 10_000usize;
    let mut fpr_detail = String::new();
    let mut fpr_ok = true;
    for n_bits in [16usize, 32, 64] {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(
            MASTER_SEED,
            &format!("mc{n_bits}"),
        ));
        let mut fp = 0usize;
        for _ in 0..trials {
            let key = generate_key_random(n_bits, 32, 784, 10, rng.next_u64()).expect("key");
            let gradient: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rep = verify(
                &gradient,
                &key,
                &VerificationPolicy::default(),
                ExtractionMeta::white_box(1),
            )
            .expect("verify");
            if rep.verified {
                fp += 1;
            }
        }
        let rate = fp as f64 / trials as f64;
        // Wilson 95% interval
        let z = 1.959963984540054f64;
        let n = trials as f64;
        let center = (rate + z * z / (2.0 * n)) / (1.0 + z * z / n);
        let half = (z / (1.0 + z * z / n))
            * ((rate * (1.0 - rate) / n + z * z / (4.0 * n * n)).sqrt());
        let (lo, hi) = (center - half, center + half);
        fpr_ok &= rate < TAU && lo < TAU;
        fpr_detail.push_str(&format!("N={n_bits}: fpr {rate:.4} CI [{lo:.4}, {hi:.4}]; "));
    }

    let ok = none_verified && (0.4..=0.6).contains(&mean_ber) && fpr_ok;
    report_line(
        5,
        ok,
        t0.elapsed(),
        &format!(
            "{n_models} unmarked models, none verified: {none_verified}, mean BER {mean_ber:.3}; {fpr_detail}"
        ),
    );
}

// criterion 6: pruning + fine-tuning grid, all retained cells verified
#[test]
fn criterion_06_pruning_fine_tuning() {
    let t0 = Instant::now();
    let d = desk();
    let m = d.marked.iter().find(|m| m.n_bits == 64).expect("64-bit model");
    let pool = make_digits(1024 * 10, 0.1, derive_seed(MASTER_SEED, "adversary")).expect("pool");
    let samples = verify_samples(d, &m.key, 50);
    let cfg = SweepConfig {
        adversary_sizes: vec![64, 256, 1024],
        seed: derive_seed(MASTER_SEED, "sweep"),
        ..SweepConfig::default()
    };
    let sweep = robustness_sweep(
        &m.model,
        &m.key,
        &pool,
        &d.test,
        &samples,
        &VerificationPolicy::default(),
        &cfg,
    )
    .expect("sweep");
    let retained = sweep.cells.iter().filter(|c| c.retained).count();
    let ok = sweep.cells.len() == 30 && retained > 0 && sweep.all_retained_verified;
    report_line(
        6,
        ok,
        t0.elapsed(),
        &format!(
            "{} cells, {} retained, min retained wm accuracy {:?}, all retained verified {}",
            sweep.cells.len(),
            retained,
            sweep.min_retained_wm_accuracy,
            sweep.all_retained_verified
        ),
    );
}

// criterion 7: 8-bit quantization leaves the watermark verifiable
#[test]
fn criterion_07_quantization() {
    let t0 = Instant::now();
    let d = desk();
    let m = d.marked.iter().find(|m| m.n_bits == 64).expect("64-bit model");
    let q = quantize(&m.model, 8).expect("quantize");
    let samples = verify_samples(d, &m.key, 50);
    let est = whitebox_expected_gradient(&q, &m.key, &samples).expect("est");
    let rep = verify(&est.values, &m.key, &VerificationPolicy::default(), est.meta)
        .expect("verify");
    let ok = rep.verified && (rep.n_error as i64) <= rep.eta;
    report_line(
        7,
        ok,
        t0.elapsed(),
        &format!("{}/64 bit errors (eta {}), verified {}", rep.n_error, rep.eta, rep.verified),
    );
}

// criterion 8: adversarial fine-tuning leaves the watermark verifiable
#[test]
fn criterion_08_adversarial_fine_tuning() {
    let t0 = Instant::now();
    let d = desk();
    let m = d.marked.iter().find(|m| m.n_bits == 64).expect("64-bit model");
    let cfg = AdversarialFineTuneConfig {
        seed: derive_seed(MASTER_SEED, "advft"),
        ..AdversarialFineTuneConfig::default()
    };
    let attacked = adversarial_fine_tune(&m.model, &d.train, &cfg).expect("adv ft");
    let samples = verify_samples(d, &m.key, 50);
    let est = whitebox_expected_gradient(&attacked, &m.key, &samples).expect("est");
    let rep = verify(&est.values, &m.key, &VerificationPolicy::default(), est.meta)
        .expect("verify");
    let ok = rep.verified && (rep.n_error as i64) <= rep.eta;
    report_line(
        8,
        ok,
        t0.elapsed(),
        &format!("{}/64 bit errors (eta {}), verified {}", rep.n_error, rep.eta, rep.verified),
    );
}

// criterion 9: one-decimal score rounding defeats h=1e-4 but not h=0.1
#[test]
fn criterion_09_score_rounding() {
    let t0 = Instant::now();
    let d = desk();
    let m = d.marked.iter().find(|m| m.n_bits == 64).expect("64-bit model");
    let samples = verify_samples(d, &m.key, 50);
    let base = Arc::new(ModelOracle::new(m.model.clone()).expect("oracle"));
    let oracle = wrap_oracle(base, &[WrapperSpec::Round { decimals: 1 }]).expect("wrap");
    let policy = VerificationPolicy::default();

    let small = verify_through_oracle(oracle.as_ref(), &m.key, &samples, 1e-4, &policy)
        .expect("h=1e-4");
    let large = verify_through_oracle(oracle.as_ref(), &m.key, &samples, 0.1, &policy)
        .expect("h=0.1");
    let ok = !small.verified
        && (small.n_error as i64) > small.eta
        && large.verified
        && (large.n_error as i64) <= large.eta;
    report_line(
        9,
        ok,
        t0.elapsed(),
        &format!(
            "h=1e-4: {}/64 errors (attack succeeds: {}); h=0.1: {}/64 errors (verified {})",
            small.n_error, !small.verified, large.n_error, large.verified
        ),
    );
}

// criterion 10: score perturbation fails to stop verification; tampered
// responses keep top-3 order and unit sum
#[test]
fn criterion_10_score_perturbation() {
    let t0 = Instant::now();
    let d = desk();
    let m = d.marked.iter().find(|m| m.n_bits == 64).expect("64-bit model");
    let samples = verify_samples(d, &m.key, 100);
    let base = Arc::new(ModelOracle::new(m.model.clone()).expect("oracle"));
    let policy = VerificationPolicy::default();
    let attempts = 50usize;
    let results: Vec<(f64, bool)> = (0..attempts)
        .into_par_iter()
        .map(|i| {
            let oracle = wrap_oracle(
                base.clone(),
                &[WrapperSpec::Perturb {
                    m: 3,
                    eps: 1e-5,
                    seed: derive_seed(MASTER_SEED, &format!("perturb{i}")),
                }],
            )
            .expect("wrap");
            let rep = verify_through_oracle(oracle.as_ref(), &m.key, &samples, 0.1, &policy)
                .expect("verify");
            (1.0 - rep.n_error as f64 / 64.0, rep.verified)
        })
        .collect();
    let mean_acc = results.iter().map(|(a, _)| a).sum::<f64>() / attempts as f64;
    let verified_frac =
        results.iter().filter(|(_, v)| *v).count() as f64 / attempts as f64;
    let eta = error_threshold(64, TAU).expect("eta");
    let threshold_acc = 1.0 - eta as f64 / 64.0;

    // invariant fuzz on 1e5 random responses
    struct Echo(std::sync::Mutex<Vec<f64>>);
    impl PredictionOracle for Echo {
        fn query(&self, _x: &[f64]) -> gradmark::Result<Vec<f64>> {
            Ok(self.0.lock().expect("echo lock").clone())
        }
        fn class_count(&self) -> usize {
            10
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn queries_served(&self) -> u64 {
            0
        }
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(MASTER_SEED, "fuzz"));
    let echo = Arc::new(Echo(std::sync::Mutex::new(vec![0.1; 10])));
    let perturb = PerturbOracle::new(echo.clone(), 3, 1e-5, 99).expect("perturb");
    let mut invariants_ok = true;
    for _ in 0..100_000 {
        let k = rng.gen_range(4..=10usize);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        *echo.0.lock().expect("echo lock") = probs.clone();
        let out = perturb.query(&[0.0]).expect("query");
        let sum_in: f64 = probs.iter().sum();
        let sum_out: f64 = out.iter().sum();
        if (sum_out - sum_in).abs() > 1e-9 {
            invariants_ok = false;
            break;
        }
        let order = |p: &[f64]| {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).expect("finite").then(a.cmp(&b)));
            idx
        };
        if order(&probs)[..3] != order(&out)[..3] {
            invariants_ok = false;
            break;
        }
    }

    let ok = mean_acc > threshold_acc && verified_frac >= 0.9 && invariants_ok;
    report_line(
        10,
        ok,
        t0.elapsed(),
        &format!(
            "mean wm accuracy {mean_acc:.4} (> {threshold_acc:.4}), verified {verified_frac:.0}% of {attempts}, 1e5-response invariants {invariants_ok}"
        ),
    );
}

// criterion 11: input noise - small sigma verifies; retention flags consistent
#[test]
fn criterion_11_input_noise() {
    let t0 = Instant::now();
    let d = desk();
    let m = d.marked.iter().find(|m| m.n_bits == 64).expect("64-bit model");
    let samples = verify_samples(d, &m.key, 50);
    let base = Arc::new(ModelOracle::new(m.model.clone()).expect("oracle"));
    let policy = VerificationPolicy::default();
    let h = 0.05;
    let retention = 0.9 * m.test_accuracy;
    // accuracy is measured over a fixed test subset through the noisy oracle
    let acc_probe = d.test.head(500);

    let mut ok = true;
    let mut detail = String::new();
    // paper grid plus a destructive sigma that must trip the retention flag
    for (i, &sigma) in [0.001, 0.005, 0.01, 0.05, 0.1, 0.6].iter().enumerate() {
        let oracle = wrap_oracle(
            base.clone(),
            &[WrapperSpec::Noise {
                sigma,
                seed: derive_seed(MASTER_SEED, &format!("noise{i}")),
            }],
        )
        .expect("wrap");
        let rep = verify_through_oracle(oracle.as_ref(), &m.key, &samples, h, &policy)
            .expect("verify");
        let acc = oracle_accuracy(oracle.as_ref(), &acc_probe).expect("accuracy");
        let retained = acc >= retention;
        if sigma <= 0.005 {
            ok &= rep.verified;
        }
        if sigma >= 0.6 {
            // flagged: retention rule must exclude this cell
            ok &= !retained;
        }
        detail.push_str(&format!(
            "s={sigma}: {}/64 errors verified {} acc {:.3} retained {}; ",
            rep.n_error, rep.verified, acc, retained
        ));
    }
    report_line(11, ok, t0.elapsed(), &detail);
}

// criterion 12: forging with a tiny adversary dataset never fully embeds
#[test]
fn criterion_12_forging() {
    let t0 = Instant::now();
    let d = desk();
    let m = d.marked.iter().find(|m| m.n_bits == 32).expect("32-bit model");
    let counterfeit = generate_key_random(
        32,
        256,
        784,
        10,
        derive_seed(MASTER_SEED, "counterfeit"),
    )
    .expect("counterfeit key");
    // 10 per class = 1.25% of the 800-per-class training set
    let sub = subsample_per_class(&d.train, 10, derive_seed(MASTER_SEED, "forge-sub"))
        .expect("sub dataset");
    let cfg = gradmark::attack::ForgeConfig {
        epochs: 80,
        seed: derive_seed(MASTER_SEED, "forge"),
        ..gradmark::attack::ForgeConfig::with_lambda_trials(0.01)
    };
    let report = gradmark::attack::forge(
        &m.model,
        &counterfeit,
        m.key.target_class(),
        &sub,
        &d.test,
        &d.test,
        &cfg,
    )
    .expect("forge");
    let all_below = report.trials.iter().all(|t| t.besr < 1.0);
    let detail: String = report
        .trials
        .iter()
        .map(|t| format!("lambda {}: besr {:.3} (acc delta {:+.2} pts); ", t.lambda, t.besr, t.accuracy_delta * 100.0))
        .collect();
    report_line(
        12,
        report.trials.len() == 3 && all_below,
        t0.elapsed(),
        &detail,
    );
}

// criterion 13: wire protocol round-trips exactly; remote verification
// reports match in-process ones
#[test]
fn criterion_13_protocol_soundness() {
    let t0 = Instant::now();

    // 1e5 fuzzed messages round-trip bit-exactly
    use gradmark::protocol::{
        decode_request, decode_response, encode_request, encode_response, Request, Response,
    };
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(MASTER_SEED, "proto"));
    let random_finite = |rng: &mut rand_chacha::ChaCha20Rng| loop {
        let v = f64::from_bits(rng.gen::<u64>());
        if v.is_finite() {
            return v;
        }
    };
    let mut fuzz_ok = true;
    for i in 0..100_000 {
        if i % 2 == 0 {
            let req = Request {
                id: rng.gen(),
                input: (0..rng.gen_range(0..6))
                    .map(|_| random_finite(&mut rng))
                    .collect(),
            };
            let back = decode_request(&encode_request(&req).expect("encode")).expect("decode");
            if back.id != req.id
                || back.input.len() != req.input.len()
                || back
                    .input
                    .iter()
                    .zip(&req.input)
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                fuzz_ok = false;
                break;
            }
        } else {
            let resp = if rng.gen_bool(0.8) {
                Response::ok(
                    rng.gen(),
                    (0..rng.gen_range(1..6))
                        .map(|_| random_finite(&mut rng))
                        .collect(),
                )
            } else {
                Response::failure(rng.gen_bool(0.5).then(|| rng.gen()), "parse")
            };
            let back = decode_response(&encode_response(&resp).expect("encode")).expect("decode");
            let probs_match = match (&back.probs, &resp.probs) {
                (Some(a), Some(b)) => a
                    .iter()
                    .zip(b)
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                (None, None) => true,
                _ => false,
            };
            if back.id != resp.id || back.error != resp.error || !probs_match {
                fuzz_ok = false;
                break;
            }
        }
    }

    // remote verification equals in-process verification
    let d = desk();
    let m = d.marked.iter().find(|m| m.n_bits == 16).expect("16-bit model");
    let samples = verify_samples(d, &m.key, 50);
    let policy = VerificationPolicy::default();

    let local = ModelOracle::new(m.model.clone()).expect("oracle");
    let local_est = blackbox_estimate_gradient(&local, &m.key, &samples, 1e-4).expect("local");
    let local_rep = verify(&local_est.values, &m.key, &policy, local_est.meta).expect("verify");

    let config = ServerConfig {
        bind: "127.0.0.1:0".into(),
        checkpoint: "unused".into(),
        wrappers: vec![],
        max_connections: 4,
        query_limit: None,
    };
    let server = serve_model(m.model.clone(), &config).expect("server");
    let remote =
        RemoteOracle::connect(&server.addr().to_string(), 784, 10).expect("client");
    let remote_est = blackbox_estimate_gradient(&remote, &m.key, &samples, 1e-4).expect("remote");
    let remote_rep = verify(&remote_est.values, &m.key, &policy, remote_est.meta).expect("verify");
    server.stop();

    let reports_match = local_rep.decoded == remote_rep.decoded
        && local_rep.n_error == remote_rep.n_error
        && local_rep.eta == remote_rep.eta
        && local_rep.p_value == remote_rep.p_value
        && local_rep.verified == remote_rep.verified
        && local_est
            .values
            .iter()
            .zip(&remote_est.values)
            .all(|(a, b)| a.to_bits() == b.to_bits());

    let ok = fuzz_ok && reports_match;
    report_line(
        13,
        ok,
        t0.elapsed(),
        &format!("1e5 messages bit-exact: {fuzz_ok}; remote == in-process reports: {reports_match}"),
    );
}
