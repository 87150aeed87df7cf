use std::sync::Arc;
use gradmark::attack::*;
use gradmark::data::{make_digits, subsample_per_class};
use gradmark::experiment::{derive_seed, desk_train_config, embed_with_lambda_sweep};
use gradmark::extract::ModelOracle;
use gradmark::nn::{accuracy, build_model, train, ModelConfig, TrainConfig};
use gradmark::watermark::{generate_key_random, VerificationPolicy};

fn main() {
    let t_all = std::time::Instant::now();
    let data_seed = derive_seed(7, "data");
    let train_set = make_digits(8000, 0.1, data_seed).unwrap();
    let test_set = make_digits(2000, 0.1, data_seed.wrapping_add(1)).unwrap();
    let config = ModelConfig::mlp((28, 28, 1), 128, 10, derive_seed(7, "model"));
    let base = build_model(&config).unwrap();
    let cfg = desk_train_config(derive_seed(7, "train"));

    let (baseline, _) = train(&base, &train_set, &TrainConfig { lambda: 0.0, ..cfg.clone() }, None).unwrap();
    let base_acc = accuracy(&baseline, &test_set).unwrap();
    println!("baseline test acc {base_acc:.4}");

    let mut marked64 = None;
    for (n, c) in [(16usize, 128usize), (32, 256), (64, 384)] {
        let key = generate_key_random(n, c, 784, 10, derive_seed(7, &format!("key{n}"))).unwrap();
        let (m, lam, besr) =
            embed_with_lambda_sweep(&base, &train_set, &cfg, &key, &[0.01, 0.05, 0.1, 0.5, 1.0]).unwrap();
        let acc = accuracy(&m, &test_set).unwrap();
        println!("N={n}: lam {lam} besr {besr} acc {acc:.4} drop {:.2}", (base_acc - acc) * 100.0);
        if n == 64 { marked64 = Some((m, key)); }
        else if n == 32 {
            // forging probe on the 32-bit model
            let counterfeit = generate_key_random(32, 256, 784, 10, derive_seed(7, "counterfeit")).unwrap();
            let sub = subsample_per_class(&train_set, 5, derive_seed(7, "forge-sub")).unwrap();
            let fc = ForgeConfig { epochs: 80, seed: derive_seed(7, "forge"), ..ForgeConfig::with_lambda_trials(lam) };
            let rep = forge(&m, &counterfeit, key.target_class(), &sub, &test_set, &test_set, &fc).unwrap();
            print!("forge@5/class: ");
            for t in &rep.trials { print!("lam {} besr {:.3}; ", t.lambda, t.besr); }
            println!();
        }
    }
    let (m64, k64) = marked64.unwrap();
    let samples = test_set.of_class(k64.target_class()).head(50);
    let policy = VerificationPolicy::default();
    let base_oracle = Arc::new(ModelOracle::new(m64.clone()).unwrap());

    let round = wrap_oracle(base_oracle.clone(), &[WrapperSpec::Round { decimals: 1 }]).unwrap();
    let r1 = verify_through_oracle(round.as_ref(), &k64, &samples, 1e-4, &policy).unwrap();
    let r2 = verify_through_oracle(round.as_ref(), &k64, &samples, 0.1, &policy).unwrap();
    println!("round d=1: h=1e-4 errors {}/64 verified {}; h=0.1 errors {}/64 verified {}",
        r1.n_error, r1.verified, r2.n_error, r2.verified);

    for sigma in [0.001, 0.005, 0.01] {
        let noisy = wrap_oracle(base_oracle.clone(), &[WrapperSpec::Noise { sigma, seed: 5 }]).unwrap();
        let rep = verify_through_oracle(noisy.as_ref(), &k64, &samples, 0.05, &policy).unwrap();
        println!("noise s={sigma}: errors {}/64 verified {}", rep.n_error, rep.verified);
    }

    let q = quantize(&m64, 8).unwrap();
    let est = gradmark::extract::whitebox_expected_gradient(&q, &k64, &samples).unwrap();
    let rep = gradmark::watermark::verify(&est.values, &k64, &policy, est.meta).unwrap();
    println!("quantize 8-bit: errors {}/64 verified {}", rep.n_error, rep.verified);
    println!("total {:?}", t_all.elapsed());
}
