//! Counter-watermark attack suite: model tampering (pruning, fine-tuning,
//! quantization, adversarial fine-tuning), input tampering (noise injection),
//! output tampering (score rounding and score perturbation), and the forging
//! attack. A removal attempt that wrecks test accuracy is not a success, so
//! sweep reports carry an accuracy-retention filter.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, subsample_per_class, Dataset};
use crate::error::{Error, Result};
use crate::extract::{blackbox_estimate_gradient, whitebox_expected_gradient, PredictionOracle};
use crate::graph::{labels_tensor, Bindings, Graph};
use crate::nn::{accuracy, input_gradients, train_with_masks, Model, Optimizer, TrainConfig};
use crate::tensor::Tensor;
use crate::watermark::{verify, VerificationPolicy, VerificationReport, WatermarkKey};

// ---- parameter pruning -----------------------------------------------------

/// Magnitude pruning: zero the floor(p * |weights|) weights of smallest
/// absolute value across all weight tensors. Biases are exempt. Returns the
/// pruned model and per-parameter keep masks (1 keeps, 0 prunes) that
/// fine-tuning must respect.
pub fn prune(model: &Model, rate: f64) -> Result<(Model, Vec<Tensor>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "pruning rate {rate} outside [0, 1)"
        )));
    }
    let mut magnitudes: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in model.params.iter().enumerate() {
        if !p.prunable {
            continue;
        }
        for (ei, &v) in p.value.data().iter().enumerate() {
            magnitudes.push((v.abs(), pi, ei));
        }
    }
    let k = (rate * magnitudes.len() as f64).floor() as usize;
    // deterministic order: magnitude, then tensor, then element
    magnitudes.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite weights")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut pruned = model.clone();
    let mut masks: Vec<Tensor> = model
        .params
        .iter()
        .map(|p| Tensor::filled(p.value.shape(), 1.0))
        .collect();
    for &(_, pi, ei) in magnitudes.iter().take(k) {
        pruned.params[pi].value.data_mut()[ei] = 0.0;
        masks[pi].data_mut()[ei] = 0.0;
    }
    Ok((pruned, masks))
}

// ---- fine-tuning -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stop once validation accuracy fails to improve for two consecutive
    /// epochs; the best-validation checkpoint is returned either way.
    pub early_stopping: bool,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 10,
            learning_rate: 5e-4,
            batch_size: 32,
            early_stopping: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FineTuneOutcome {
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
}

/// Cross-entropy-only retraining on the adversary's data, split 70/30 into
/// train/validation. Pruning masks, when given, stay zero throughout.
pub fn fine_tune(
    model: &Model,
    adversary_data: &Dataset,
    cfg: &FineTuneConfig,
    masks: Option<&[Tensor]>,
) -> Result<(Model, FineTuneOutcome)> {
    if adversary_data.is_empty() {
        return Err(Error::Dataset("empty adversary dataset".into()));
    }
    let parts = split(adversary_data, &[0.7, 0.3], cfg.seed)?;
    let (train_part, val_part) = (&parts[0], &parts[1]);

    if cfg.learning_rate == 0.0 {
        // zero-step fine-tuning leaves the model unchanged
        let acc = accuracy(model, val_part)?;
        return Ok((
            model.clone(),
            FineTuneOutcome {
                epochs_run: 0,
                best_val_accuracy: acc,
            },
        ));
    }

    let mut best = model.clone();
    let mut best_acc = accuracy(&best, val_part)?;
    let mut current = model.clone();
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    for epoch in 0..cfg.epochs {
        let tc = TrainConfig {
            epochs: 1,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            optimizer: Optimizer::Sgd,
            lambda: 0.0,
            wm_batch_size: 0,
            seed: cfg.seed.wrapping_add(epoch as u64 + 1),
        };
        let (next, _) = train_with_masks(&current, train_part, &tc, None, masks)?;
        current = next;
        epochs_run += 1;
        let acc = accuracy(&current, val_part)?;
        if acc > best_acc {
            best_acc = acc;
            best = current.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.early_stopping && stale >= 2 {
                break;
            }
        }
    }
    Ok((
        best,
        FineTuneOutcome {
            epochs_run,
            best_val_accuracy: best_acc,
        },
    ))
}

// ---- quantization -----------------------------------------------------------

/// Per-tensor symmetric fixed-point quantization:
/// scale = max|w| / (2^(bits-1) - 1), w -> round(w / scale) * scale.
/// All-zero tensors pass through unchanged.
pub fn quantize(model: &Model, bits: u32) -> Result<Model> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits {bits} outside [2, 16]")));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let mut out = model.clone();
    for p in &mut out.params {
        let max_abs = p
            .value
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        if max_abs == 0.0 {
            continue;
        }
        let scale = max_abs / levels;
        for v in p.value.data_mut() {
            *v = (*v / scale).round() * scale;
        }
    }
    Ok(out)
}

// ---- adversarial examples ----------------------------------------------------

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fast gradient sign method: x + eps * sign(dJ/dx), clipped to [0, 1].
pub fn fgsm(model: &Model, images: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    if eps < 0.0 {
        return Err(Error::InvalidArgument(format!("eps {eps} must be >= 0")));
    }
    let grads = input_gradients(model, images, labels)?;
    let mut out = images.clone();
    for (x, &g) in out.data_mut().iter_mut().zip(grads.data()) {
        *x = (*x + eps * sign0(g)).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialFineTuneConfig {
    pub epochs: usize,
    pub eps: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdversarialFineTuneConfig {
    fn default() -> Self {
        AdversarialFineTuneConfig {
            epochs: 5,
            eps: 0.1,
            learning_rate: 5e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Fine-tune on 50/50 mixed batches of clean samples and FGSM adversarial
/// examples carrying their correct labels. Cross-entropy only.
pub fn adversarial_fine_tune(
    model: &Model,
    dataset: &Dataset,
    cfg: &AdversarialFineTuneConfig,
) -> Result<Model> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let n = dataset.len();
    let batch = cfg.batch_size.min(n).max(2);
    let (h, w, c) = dataset.image_shape();

    let mut g = Graph::new();
    let params = model.param_leaves(&mut g);
    let x = g.leaf("x", &[batch, h, w, c], false);
    let y = g.leaf("y", &[batch], false);
    let logits = model.logits_graph(&mut g, x, &params)?;
    let per = g.softmax_xent(logits, y)?;
    let loss = g.mean_all(per)?;
    let grads = g.grad(loss, &params)?;
    let mut targets = vec![loss];
    targets.extend_from_slice(&grads);

    let mut work = model.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let steps = (n / batch).max(1);
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for step in 0..steps {
            let idx = &order[step * batch..(step + 1) * batch];
            let part = dataset.select(idx);
            let half = batch / 2;
            let adv_idx: Vec<usize> = (half..batch).collect();
            let adv_part = part.select(&adv_idx);
            let adv_images = fgsm(&work, &adv_part.images, &adv_part.labels, cfg.eps)?;
            let mut data = Vec::with_capacity(batch * h * w * c);
            for i in 0..half {
                data.extend_from_slice(part.image(i));
            }
            data.extend_from_slice(adv_images.data());
            let images = Tensor::new(vec![batch, h, w, c], data)?;

            let mut bind = Bindings::new();
            work.bind_params(&mut bind, &params);
            bind.bind(x, images);
            bind.bind(y, labels_tensor(&part.labels));
            let values = g.eval(&bind, &targets).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            for (pi, grad) in values[1..].iter().enumerate() {
                for (p, &gv) in work.params[pi].value.data_mut().iter_mut().zip(grad.data()) {
                    *p -= cfg.learning_rate * gv;
                }
            }
        }
    }
    Ok(work)
}

// ---- output/input tampering oracles -------------------------------------------

/// Wrapper stack element, in application order around a base oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WrapperSpec {
    Noise { sigma: f64, seed: u64 },
    Round { decimals: u32 },
    Perturb { m: usize, eps: f64, seed: u64 },
}

impl WrapperSpec {
    /// Parse `noise:σ[,seed]` | `round:d` | `perturb:M,ε,seed`.
    pub fn parse(s: &str) -> Result<WrapperSpec> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("bad wrapper spec `{s}`")))?;
        let parts: Vec<&str> = rest.split(',').collect();
        let err = || Error::InvalidArgument(format!("bad wrapper spec `{s}`"));
        match kind {
            "noise" => {
                let sigma: f64 = parts.first().ok_or_else(err)?.parse().map_err(|_| err())?;
                let seed: u64 = match parts.get(1) {
                    Some(v) => v.parse().map_err(|_| err())?,
                    None => 0,
                };
                Ok(WrapperSpec::Noise { sigma, seed })
            }
            "round" => {
                let decimals: u32 = parts.first().ok_or_else(err)?.parse().map_err(|_| err())?;
                Ok(WrapperSpec::Round { decimals })
            }
            "perturb" => {
                if parts.len() != 3 {
                    return Err(err());
                }
                Ok(WrapperSpec::Perturb {
                    m: parts[0].parse().map_err(|_| err())?,
                    eps: parts[1].parse().map_err(|_| err())?,
                    seed: parts[2].parse().map_err(|_| err())?,
                })
            }
            _ => Err(err()),
        }
    }

    pub fn apply(&self, inner: Arc<dyn PredictionOracle>) -> Result<Arc<dyn PredictionOracle>> {
        Ok(match self {
            WrapperSpec::Noise { sigma, seed } => Arc::new(NoisyOracle::new(inner, *sigma, *seed)?),
            WrapperSpec::Round { decimals } => Arc::new(RoundingOracle::new(inner, *decimals)),
            WrapperSpec::Perturb { m, eps, seed } => {
                Arc::new(PerturbOracle::new(inner, *m, *eps, *seed)?)
            }
        })
    }
}

/// Apply a wrapper stack in order (first spec is innermost).
pub fn wrap_oracle(
    base: Arc<dyn PredictionOracle>,
    specs: &[WrapperSpec],
) -> Result<Arc<dyn PredictionOracle>> {
    let mut oracle = base;
    for spec in specs {
        oracle = spec.apply(oracle)?;
    }
    Ok(oracle)
}

/// Input tampering: i.i.d. Gaussian noise added to every query, re-clipped
/// to [0, 1] before reaching the inner oracle.
pub struct NoisyOracle {
    inner: Arc<dyn PredictionOracle>,
    sigma: f64,
    rng: Mutex<ChaCha20Rng>,
}

impl NoisyOracle {
    pub fn new(inner: Arc<dyn PredictionOracle>, sigma: f64, seed: u64) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("sigma {sigma} must be >= 0")));
        }
        Ok(NoisyOracle {
            inner,
            sigma,
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
        })
    }
}

impl PredictionOracle for NoisyOracle {
    fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.sigma == 0.0 {
            return self.inner.query(x);
        }
        let normal = Normal::new(0.0, self.sigma).expect("sigma validated");
        let noisy: Vec<f64> = {
            let mut rng = self.rng.lock().expect("rng lock");
            x.iter()
                .map(|&v| (v + normal.sample(&mut *rng)).clamp(0.0, 1.0))
                .collect()
        };
        self.inner.query(&noisy)
    }

    fn query_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if self.sigma == 0.0 {
            return self.inner.query_batch(xs);
        }
        let normal = Normal::new(0.0, self.sigma).expect("sigma validated");
        let noisy: Vec<Vec<f64>> = {
            let mut rng = self.rng.lock().expect("rng lock");
            xs.iter()
                .map(|x| {
                    x.iter()
                        .map(|&v| (v + normal.sample(&mut *rng)).clamp(0.0, 1.0))
                        .collect()
                })
                .collect()
        };
        self.inner.query_batch(&noisy)
    }

    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn queries_served(&self) -> u64 {
        self.inner.queries_served()
    }
}

/// Output tampering: every probability rounded half-away-from-zero to
/// `decimals` places, with no renormalization.
pub struct RoundingOracle {
    inner: Arc<dyn PredictionOracle>,
    decimals: u32,
}

impl RoundingOracle {
    pub fn new(inner: Arc<dyn PredictionOracle>, decimals: u32) -> Self {
        RoundingOracle { inner, decimals }
    }

    fn round_row(&self, row: &mut [f64]) {
        let f = 10f64.powi(self.decimals as i32);
        for p in row {
            *p = (*p * f).round() / f;
        }
    }
}

impl PredictionOracle for RoundingOracle {
    fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.inner.query(x)?;
        self.round_row(&mut out);
        Ok(out)
    }

    fn query_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = self.inner.query_batch(xs)?;
        for row in &mut out {
            self.round_row(row);
        }
        Ok(out)
    }

    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn queries_served(&self) -> u64 {
        self.inner.queries_served()
    }
}

/// Output tampering: subtract a random amount from the top-1 score and add
/// it to the lowest score, bounded so the true order of the top-M labels
/// and the unit sum are preserved.
pub struct PerturbOracle {
    inner: Arc<dyn PredictionOracle>,
    m: usize,
    eps: f64,
    rng: Mutex<ChaCha20Rng>,
}

impl PerturbOracle {
    pub fn new(inner: Arc<dyn PredictionOracle>, m: usize, eps: f64, seed: u64) -> Result<Self> {
        if inner.class_count() < m + 1 {
            return Err(Error::InvalidArgument(format!(
                "perturbation needs at least {} classes, oracle has {}",
                m + 1,
                inner.class_count()
            )));
        }
        if m < 2 {
            return Err(Error::InvalidArgument("M must be at least 2".into()));
        }
        Ok(PerturbOracle {
            inner,
            m,
            eps,
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
        })
    }

    fn perturb_row(&self, row: &mut [f64]) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        let top1 = row[order[0]];
        let top2 = row[order[1]];
        let top_m = row[order[self.m - 1]];
        let last = row[order[row.len() - 1]];
        let tau_sp = (top1 - top2 - self.eps).min(top_m - last - self.eps);
        if tau_sp <= 0.0 {
            return;
        }
        let u: f64 = self.rng.lock().expect("rng lock").gen_range(0.0..1.0);
        let phi = tau_sp * (1.0 - u); // Uniform(0, tau_sp]
        row[order[0]] -= phi;
        row[order[row.len() - 1]] += phi;
    }
}

impl PredictionOracle for PerturbOracle {
    fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.inner.query(x)?;
        self.perturb_row(&mut out);
        Ok(out)
    }

    fn query_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = self.inner.query_batch(xs)?;
        for row in &mut out {
            self.perturb_row(row);
        }
        Ok(out)
    }

    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn queries_served(&self) -> u64 {
        self.inner.queries_served()
    }
}

// ---- forging -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub wm_batch_size: usize,
    pub seed: u64,
    /// Lambda trials; conventionally {lambda/2, lambda, 2*lambda} clipped
    /// to (0, 1].
    pub lambdas: Vec<f64>,
}

impl ForgeConfig {
    pub fn with_lambda_trials(base_lambda: f64) -> Self {
        let mut lambdas: Vec<f64> = [base_lambda / 2.0, base_lambda, base_lambda * 2.0]
            .iter()
            .map(|&l| l.clamp(f64::MIN_POSITIVE, 1.0))
            .collect();
        lambdas.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        ForgeConfig {
            epochs: 80,
            batch_size: 32,
            learning_rate: 0.02,
            wm_batch_size: 32,
            seed: 0,
            lambdas,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForgeTrial {
    pub lambda: f64,
    /// Embedding success of the counterfeit signature, measured on held-out
    /// target-class samples the adversary never saw.
    pub besr: f64,
    pub test_accuracy: f64,
    pub accuracy_delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForgeReport {
    pub trials: Vec<ForgeTrial>,
    pub best_besr: f64,
    pub target_class_collision: bool,
}

/// Retrain a stolen model with the combined cost to plant a counterfeit key,
/// once per lambda trial. BESR is evaluated on `eval_set` samples of the
/// counterfeit target class (held out from the adversary's data) and test
/// accuracy on `test_set`.
pub fn forge(
    pretrained: &Model,
    counterfeit: &WatermarkKey,
    owner_target_class: usize,
    sub_dataset: &Dataset,
    eval_set: &Dataset,
    test_set: &Dataset,
    cfg: &ForgeConfig,
) -> Result<ForgeReport> {
    let eval_pool = eval_set.of_class(counterfeit.target_class());
    if eval_pool.is_empty() {
        return Err(Error::Dataset(format!(
            "no held-out samples of counterfeit target class {}",
            counterfeit.target_class()
        )));
    }
    let base_acc = accuracy(pretrained, test_set)?;
    let mut trials = Vec::new();
    for (ti, &lambda) in cfg.lambdas.iter().enumerate() {
        let tc = TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            optimizer: Optimizer::SgdMomentum { momentum: 0.9 },
            lambda,
            wm_batch_size: cfg.wm_batch_size,
            seed: cfg.seed.wrapping_add(ti as u64),
        };
        let (forged, _) = train_with_masks(pretrained, sub_dataset, &tc, Some(counterfeit), None)?;
        let est = whitebox_expected_gradient(&forged, counterfeit, &eval_pool)?;
        let decoded = crate::watermark::decode(&est.values, counterfeit)?;
        let besr = crate::watermark::besr(&decoded, counterfeit.bits())?;
        let test_accuracy = accuracy(&forged, test_set)?;
        trials.push(ForgeTrial {
            lambda,
            besr,
            test_accuracy,
            accuracy_delta: test_accuracy - base_acc,
        });
    }
    let best_besr = trials.iter().map(|t| t.besr).fold(0.0, f64::max);
    Ok(ForgeReport {
        trials,
        best_besr,
        target_class_collision: counterfeit.target_class() == owner_target_class,
    })
}

// ---- pruning + fine-tuning sweep --------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub pruning_rates: Vec<f64>,
    /// Adversary dataset sizes, per class.
    pub adversary_sizes: Vec<usize>,
    pub fine_tune: FineTuneConfig,
    /// Retained iff test accuracy >= retention * baseline accuracy.
    pub retention: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            pruning_rates: (0..10).map(|i| i as f64 / 10.0).collect(),
            adversary_sizes: vec![64, 256, 1024],
            fine_tune: FineTuneConfig::default(),
            retention: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruneCell {
    pub pruning_rate: f64,
    pub adversary_per_class: usize,
    pub test_accuracy: f64,
    /// 1 - BER of the white-box extraction after the attack.
    pub wm_accuracy: f64,
    pub verified: bool,
    pub retained: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub baseline_accuracy: f64,
    pub retention_threshold: f64,
    pub cells: Vec<PruneCell>,
    /// Minimum watermark accuracy over cells passing the retention filter.
    pub min_retained_wm_accuracy: Option<f64>,
    pub all_retained_verified: bool,
}

/// Full pruning-rate x adversary-size grid: prune, fine-tune on the
/// adversary's data, measure test accuracy and watermark accuracy, and
/// filter by accuracy retention. Cells run in parallel, each deterministic
/// under its own derived seed.
pub fn robustness_sweep(
    marked: &Model,
    key: &WatermarkKey,
    adversary_pool: &Dataset,
    test_set: &Dataset,
    verify_samples: &Dataset,
    policy: &VerificationPolicy,
    cfg: &SweepConfig,
) -> Result<RobustnessReport> {
    let baseline_accuracy = accuracy(marked, test_set)?;
    let threshold = cfg.retention * baseline_accuracy;

    let grid: Vec<(usize, usize)> = (0..cfg.pruning_rates.len())
        .flat_map(|pi| (0..cfg.adversary_sizes.len()).map(move |ai| (pi, ai)))
        .collect();
    let cells: Result<Vec<PruneCell>> = grid
        .par_iter()
        .map(|&(pi, ai)| {
            let rate = cfg.pruning_rates[pi];
            let per_class = cfg.adversary_sizes[ai];
            let cell_seed = cfg
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((pi * 97 + ai) as u64);
            let adv = subsample_per_class(adversary_pool, per_class, cell_seed)?;
            let (pruned, masks) = prune(marked, rate)?;
            let ft_cfg = FineTuneConfig {
                seed: cell_seed,
                ..cfg.fine_tune.clone()
            };
            let (tuned, _) = fine_tune(&pruned, &adv, &ft_cfg, Some(&masks))?;
            let test_accuracy = accuracy(&tuned, test_set)?;
            let est = whitebox_expected_gradient(&tuned, key, verify_samples)?;
            let report = verify(&est.values, key, policy, est.meta)?;
            Ok(PruneCell {
                pruning_rate: rate,
                adversary_per_class: per_class,
                test_accuracy,
                wm_accuracy: 1.0 - report.n_error as f64 / key.n_bits() as f64,
                verified: report.verified,
                retained: test_accuracy >= threshold,
            })
        })
        .collect();
    let cells = cells?;
    let retained: Vec<&PruneCell> = cells.iter().filter(|c| c.retained).collect();
    Ok(RobustnessReport {
        baseline_accuracy,
        retention_threshold: threshold,
        min_retained_wm_accuracy: retained
            .iter()
            .map(|c| c.wm_accuracy)
            .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |m| m.min(v)))),
        all_retained_verified: retained.iter().all(|c| c.verified),
        cells,
    })
}

/// Accuracy of the model behind an oracle, measured through it (tampering
/// wrappers included).
pub fn oracle_accuracy(oracle: &dyn PredictionOracle, ds: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let xs: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.image(i).to_vec()).collect();
    let answers = oracle.query_batch(&xs)?;
    for (row, &y) in answers.iter().zip(&ds.labels) {
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
            .map(|(j, _)| j)
            .expect("nonempty row");
        if argmax == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Black-box verification through a (possibly tampered) oracle.
pub fn verify_through_oracle(
    oracle: &dyn PredictionOracle,
    key: &WatermarkKey,
    samples: &Dataset,
    h: f64,
    policy: &VerificationPolicy,
) -> Result<VerificationReport> {
    let est = blackbox_estimate_gradient(oracle, key, samples, h)?;
    verify(&est.values, key, policy, est.meta)
}
