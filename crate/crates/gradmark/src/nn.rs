//! Model definitions (MLP and small CNN), prediction, and the training loop
//! that minimizes cross-entropy plus the watermark embedding regularizer.
//!
//! The regularizer path differentiates through the recorded gradient graph:
//! the expected input gradient over a target-class batch is itself a graph
//! node, so its parameter gradient (a mixed second-order term) falls out of
//! reverse-over-reverse differentiation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{labels_tensor, Bindings, Graph, NodeId};
use crate::tensor::Tensor;
use crate::watermark::WatermarkKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { kernel: usize, filters: usize },
    Dense { units: usize },
    Relu,
    Flatten,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (H, W, channels)
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two-layer ReLU MLP over flattened input.
    pub fn mlp(
        input_shape: (usize, usize, usize),
        hidden: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            input_shape,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { units: num_classes },
                LayerSpec::Softmax,
            ],
            num_classes,
            seed,
        }
    }

    /// Small CNN: conv-relu blocks followed by a dense head.
    pub fn cnn(
        input_shape: (usize, usize, usize),
        conv_filters: &[usize],
        kernel: usize,
        hidden: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let mut layers = Vec::new();
        for &f in conv_filters {
            layers.push(LayerSpec::Conv { kernel, filters: f });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { units: hidden });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense { units: num_classes });
        layers.push(LayerSpec::Softmax);
        ModelConfig {
            input_shape,
            layers,
            num_classes,
            seed,
        }
    }

    /// The six-conv benchmark stack at a quarter of its published width.
    pub fn svhn_preset_quarter_width(seed: u64) -> Self {
        ModelConfig::cnn((32, 32, 3), &[8, 8, 16, 16, 32, 32], 3, 128, 10, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.0 * self.input_shape.1 * self.input_shape.2
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ShapeState {
    Spatial(usize, usize, usize),
    Flat(usize),
}

/// Parameter spec derived from a config walk: name, shape, whether pruning
/// applies (weights yes, biases no).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub prunable: bool,
}

fn walk_layers(config: &ModelConfig) -> Result<(Vec<ParamSpec>, ShapeState)> {
    let (h, w, c) = config.input_shape;
    if h * w * c == 0 {
        return Err(Error::InvalidArgument("empty input shape".into()));
    }
    let mut state = ShapeState::Spatial(h, w, c);
    let mut specs = Vec::new();
    let mut dense_i = 0usize;
    let mut conv_i = 0usize;
    for (li, layer) in config.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { kernel, filters } => {
                let ShapeState::Spatial(h, w, c) = state else {
                    return Err(Error::InvalidArgument(format!(
                        "layer {li}: conv after flatten"
                    )));
                };
                if *kernel == 0 || *kernel > h.min(w) || *filters == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "layer {li}: conv {kernel}x{kernel}x{filters} on {h}x{w}x{c}"
                    )));
                }
                specs.push(ParamSpec {
                    name: format!("conv{conv_i}.w"),
                    shape: vec![*kernel, *kernel, c, *filters],
                    prunable: true,
                });
                specs.push(ParamSpec {
                    name: format!("conv{conv_i}.b"),
                    shape: vec![*filters],
                    prunable: false,
                });
                conv_i += 1;
                state = ShapeState::Spatial(h, w, *filters); // same padding
            }
            LayerSpec::Dense { units } => {
                let ShapeState::Flat(d) = state else {
                    return Err(Error::InvalidArgument(format!(
                        "layer {li}: dense requires flattened input"
                    )));
                };
                if *units == 0 {
                    return Err(Error::InvalidArgument(format!("layer {li}: zero units")));
                }
                specs.push(ParamSpec {
                    name: format!("dense{dense_i}.w"),
                    shape: vec![d, *units],
                    prunable: true,
                });
                specs.push(ParamSpec {
                    name: format!("dense{dense_i}.b"),
                    shape: vec![*units],
                    prunable: false,
                });
                dense_i += 1;
                state = ShapeState::Flat(*units);
            }
            LayerSpec::Relu => {}
            LayerSpec::Flatten => {
                if let ShapeState::Spatial(h, w, c) = state {
                    state = ShapeState::Flat(h * w * c);
                }
            }
            LayerSpec::Softmax => {
                if li + 1 != config.layers.len() {
                    return Err(Error::InvalidArgument(
                        "softmax must be the last layer".into(),
                    ));
                }
            }
        }
    }
    if !matches!(config.layers.last(), Some(LayerSpec::Softmax)) {
        return Err(Error::InvalidArgument("last layer must be softmax".into()));
    }
    if state != ShapeState::Flat(config.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "network output {state:?} does not match {} classes",
            config.num_classes
        )));
    }
    Ok((specs, state))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub prunable: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

/// Deterministic parameter initialization: weights uniform in
/// +-1/sqrt(fan_in), biases zero, all drawn from the config seed.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    let (specs, _) = walk_layers(config)?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let params = specs
        .into_iter()
        .map(|spec| {
            let value = if spec.prunable {
                let fan_in: usize = match spec.shape.len() {
                    2 => spec.shape[0],
                    4 => spec.shape[0] * spec.shape[1] * spec.shape[2],
                    _ => unreachable!("weight rank"),
                };
                let a = 1.0 / (fan_in as f64).sqrt();
                let n: usize = spec.shape.iter().product();
                Tensor::new(
                    spec.shape.clone(),
                    (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
                )
                .expect("consistent init shape")
            } else {
                Tensor::zeros(&spec.shape)
            };
            Param {
                name: spec.name,
                value,
                prunable: spec.prunable,
            }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        params,
    })
}

impl Model {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// One trainable leaf per parameter, in parameter order.
    pub fn param_leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(&p.name, p.value.shape(), true))
            .collect()
    }

    pub fn bind_params<'a>(&'a self, b: &mut Bindings<'a>, nodes: &[NodeId]) {
        for (node, p) in nodes.iter().zip(&self.params) {
            b.bind_ref(*node, &p.value);
        }
    }

    /// Append the forward pass from `input` ([n,h,w,c]) to the logits node,
    /// consuming `params` in order.
    pub fn logits_graph(&self, g: &mut Graph, input: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let n = g.shape(input)[0];
        let mut x = input;
        let mut pi = 0usize;
        for layer in &self.config.layers {
            match layer {
                LayerSpec::Conv { .. } => {
                    let conv = g.conv2d_same(x, params[pi])?;
                    x = g.add(conv, params[pi + 1])?;
                    pi += 2;
                }
                LayerSpec::Dense { .. } => {
                    let mm = g.matmul(x, params[pi])?;
                    x = g.add(mm, params[pi + 1])?;
                    pi += 2;
                }
                LayerSpec::Relu => {
                    x = g.relu(x)?;
                }
                LayerSpec::Flatten => {
                    let s = g.shape(x).to_vec();
                    if s.len() == 4 {
                        x = g.reshape(x, &[n, s[1] * s[2] * s[3]])?;
                    }
                }
                LayerSpec::Softmax => {}
            }
        }
        Ok(x)
    }
}

/// Images reshaped to the model's [n, h, w, c], accepting flat [n, d] input.
fn to_input_batch(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let (h, w, c) = model.config.input_shape;
    let s = batch.shape();
    match s.len() {
        4 if s[1] == h && s[2] == w && s[3] == c => Ok(batch.clone()),
        2 if s[1] == h * w * c => batch.reshape(&[s[0], h, w, c]),
        _ => Err(Error::ShapeMismatch(format!(
            "batch {s:?} does not match input shape ({h}, {w}, {c})"
        ))),
    }
}

/// Class probabilities for a batch; each row sums to 1.
pub fn predict(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let x = to_input_batch(model, batch)?;
    let n = x.shape()[0];
    let mut g = Graph::new();
    let params = model.param_leaves(&mut g);
    let input = g.leaf("x", x.shape(), false);
    let logits = model.logits_graph(&mut g, input, &params)?;
    let probs = g.softmax_rows(logits)?;
    let mut b = Bindings::new();
    model.bind_params(&mut b, &params);
    b.bind(input, x);
    let out = g.forward(&b, probs)?;
    debug_assert_eq!(out.shape(), &[n, model.config.num_classes]);
    Ok(out)
}

/// Fraction of samples classified correctly, evaluated in chunks.
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let chunk = 1024usize;
    let mut i = 0usize;
    while i < ds.len() {
        let idx: Vec<usize> = (i..ds.len().min(i + chunk)).collect();
        let part = ds.select(&idx);
        let probs = predict(model, &part.images)?;
        let k = model.config.num_classes;
        for (r, &y) in part.labels.iter().enumerate() {
            let row = &probs.data()[r * k..(r + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(j, _)| j)
                .expect("nonempty row");
            if argmax == y {
                correct += 1;
            }
        }
        i += chunk;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean of -log p(label) over a batch of probability rows. Probabilities at
/// the label are clamped to 1e-12; the number of clamped rows is returned
/// alongside as a warning count.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "probs {s:?} with {} labels",
            labels.len()
        )));
    }
    let k = s[1];
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let p = probs.data()[i * k + y];
        if p < 1e-12 {
            clamped += 1;
        }
        total += -(p.max(1e-12)).ln();
    }
    Ok((total / labels.len() as f64, clamped))
}

/// Per-sample gradients of the cross-entropy loss with respect to the input,
/// shaped like the batch.
pub fn input_gradients(model: &Model, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let x = to_input_batch(model, images)?;
    if x.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images vs {} labels",
            x.shape()[0],
            labels.len()
        )));
    }
    let mut g = Graph::new();
    let params = model.param_leaves(&mut g);
    let input = g.leaf("x", x.shape(), false);
    let logits = model.logits_graph(&mut g, input, &params)?;
    let y = g.constant(labels_tensor(labels));
    let per = g.softmax_xent(logits, y)?;
    // Summing keeps per-sample gradients independent in the rows of dx.
    let total = g.sum_all(per)?;
    let dx = g.grad(total, &[input])?[0];
    let mut b = Bindings::new();
    model.bind_params(&mut b, &params);
    b.bind(input, x);
    g.forward(&b, dx)
}

/// Expected input gradient: per-sample gradients averaged over the batch,
/// flattened to input-dimension length.
pub fn mean_input_gradient(model: &Model, images: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let grads = input_gradients(model, images, labels)?;
    let n = grads.shape()[0];
    let d = grads.numel() / n;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(grads.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    Ok(mean)
}

// ---- training --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { momentum: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Trade-off weight of the embedding regularizer; 0 disables embedding
    /// even when a key is supplied.
    pub lambda: f64,
    /// Target-class samples drawn per step for the expected-gradient batch.
    pub wm_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.1,
            optimizer: Optimizer::SgdMomentum { momentum: 0.9 },
            lambda: 0.5,
            wm_batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Embedding success on the training-time expected gradient; None for
    /// unmarked runs.
    pub besr: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainMetrics {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.accuracy)
    }

    pub fn final_besr(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.besr)
    }
}

/// Train a copy of `model` on `dataset`. With a key and lambda > 0, every
/// step adds the embedding regularizer computed on a freshly sampled batch
/// of target-class images. Unmarked training never touches key material.
pub fn train(
    model: &Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    wm: Option<&WatermarkKey>,
) -> Result<(Model, TrainMetrics)> {
    train_with_masks(model, dataset, cfg, wm, None)
}

/// `train` with optional pruning masks (1 keeps a weight, 0 freezes it at
/// zero). Masked coordinates receive no updates.
pub fn train_with_masks(
    model: &Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    wm: Option<&WatermarkKey>,
    masks: Option<&[Tensor]>,
) -> Result<(Model, TrainMetrics)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    let embedding = match wm {
        Some(key) if cfg.lambda > 0.0 => {
            if cfg.lambda > 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "lambda {} outside (0, 1]",
                    cfg.lambda
                )));
            }
            if key.max_carrier_index() >= model.input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "carrier index {} outside input dim {}",
                    key.max_carrier_index(),
                    model.input_dim()
                )));
            }
            if cfg.wm_batch_size == 0 {
                return Err(Error::InvalidArgument("wm batch size must be positive".into()));
            }
            Some(key)
        }
        _ => None,
    };

    let target_pool: Vec<usize> = match embedding {
        Some(key) => {
            let pool: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.labels[i] == key.target_class())
                .collect();
            if pool.is_empty() {
                return Err(Error::Dataset(format!(
                    "no samples of target class {}",
                    key.target_class()
                )));
            }
            pool
        }
        None => Vec::new(),
    };

    let n = dataset.len();
    let batch = cfg.batch_size.min(n);
    let (h, w, c) = dataset.image_shape();
    let d = dataset.input_dim();

    // One graph for the whole run; batches rebind the input leaves.
    let mut g = Graph::new();
    let params = model.param_leaves(&mut g);
    let x = g.leaf("x", &[batch, h, w, c], false);
    let y = g.leaf("y", &[batch], false);
    let logits = model.logits_graph(&mut g, x, &params)?;
    let ce_vec = g.softmax_xent(logits, y)?;
    let ce = g.mean_all(ce_vec)?;

    let (total, x_wm, wm_batch) = match embedding {
        Some(key) => {
            let m = cfg.wm_batch_size.min(target_pool.len());
            let x_wm = g.leaf("x_wm", &[m, h, w, c], false);
            let y_wm = g.constant(labels_tensor(&vec![key.target_class(); m]));
            let logits_wm = model.logits_graph(&mut g, x_wm, &params)?;
            let ce_wm_vec = g.softmax_xent(logits_wm, y_wm)?;
            let ce_wm_sum = g.sum_all(ce_wm_vec)?;
            let gx = g.grad(ce_wm_sum, &[x_wm])?[0];
            let flat = g.reshape(gx, &[m, d])?;
            let mean_g = g.mean_to(flat, &[d])?;
            let carrier_g = g.gather_coords(mean_g, key.carrier())?;
            let col = g.reshape(carrier_g, &[key.carrier_size(), 1])?;
            let k_mat = g.constant(
                Tensor::new(vec![key.n_bits(), key.carrier_size()], key.matrix().to_vec())
                    .expect("key dims"),
            );
            let z_col = g.matmul(k_mat, col)?;
            let z = g.reshape(z_col, &[key.n_bits()])?;
            let sp = g.softplus(z)?;
            let b_const = g.constant(Tensor::from_vec(
                key.bits().iter().map(|&b| f64::from(b)).collect(),
            ));
            let bz = g.mul(b_const, z)?;
            let per_bit = g.sub(sp, bz)?;
            let j_emb = g.sum_all(per_bit)?;
            let lam = g.scalar(cfg.lambda);
            let weighted = g.mul(lam, j_emb)?;
            (g.add(ce, weighted)?, Some(x_wm), m)
        }
        None => (ce, None, 0),
    };

    let grad_nodes = g.grad(total, &params)?;
    let mut targets = vec![total];
    targets.extend_from_slice(&grad_nodes);

    let mut work = model.clone();
    if let Some(masks) = masks {
        apply_masks(&mut work, masks)?;
    }
    let mut velocity: Vec<Tensor> = work
        .params
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();

    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    // Separate stream so a disabled regularizer leaves the trajectory of the
    // main loop untouched.
    let mut wm_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);

    let steps = (n / batch).max(1);
    let mut metrics = TrainMetrics::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let idx = &order[step * batch..(step + 1) * batch];
            let part = dataset.select(idx);
            let mut bind = Bindings::new();
            work.bind_params(&mut bind, &params);
            bind.bind(x, part.images.clone());
            bind.bind(y, labels_tensor(&part.labels));
            if let (Some(x_wm), Some(_)) = (x_wm, embedding) {
                let wm_idx: Vec<usize> = if target_pool.len() >= wm_batch {
                    rand::seq::index::sample(&mut wm_rng, target_pool.len(), wm_batch)
                        .iter()
                        .map(|i| target_pool[i])
                        .collect()
                } else {
                    (0..wm_batch)
                        .map(|_| target_pool[wm_rng.gen_range(0..target_pool.len())])
                        .collect()
                };
                bind.bind(x_wm, dataset.select(&wm_idx).images);
            }
            let values = g.eval(&bind, &targets).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            epoch_loss += values[0].scalar_value();

            for (pi, grad) in values[1..].iter().enumerate() {
                let masked: Option<&Tensor> = masks.and_then(|m| {
                    if work.params[pi].prunable {
                        Some(&m[pi])
                    } else {
                        None
                    }
                });
                let vbuf = velocity[pi].data_mut();
                let pbuf = work.params[pi].value.data_mut();
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        for (j, (&gv, p)) in grad.data().iter().zip(pbuf.iter_mut()).enumerate() {
                            let gv = masked.map_or(gv, |m| gv * m.data()[j]);
                            *p -= cfg.learning_rate * gv;
                        }
                    }
                    Optimizer::SgdMomentum { momentum } => {
                        for (j, ((&gv, v), p)) in grad
                            .data()
                            .iter()
                            .zip(vbuf.iter_mut())
                            .zip(pbuf.iter_mut())
                            .enumerate()
                        {
                            let gv = masked.map_or(gv, |m| gv * m.data()[j]);
                            *v = momentum * *v + gv;
                            *p -= cfg.learning_rate * *v;
                        }
                    }
                }
                if let Some(m) = masked {
                    for (p, &mv) in work.params[pi].value.data_mut().iter_mut().zip(m.data()) {
                        *p *= mv;
                    }
                }
            }
        }

        let acc = accuracy(&work, dataset)?;
        let besr = match embedding {
            Some(key) => {
                let eval_idx: Vec<usize> =
                    target_pool.iter().take(256).copied().collect();
                let eval = dataset.select(&eval_idx);
                let mean_g = mean_input_gradient(&work, &eval.images, &eval.labels)?;
                let carrier_g: Vec<f64> =
                    key.carrier().iter().map(|&ci| mean_g[ci]).collect();
                let decoded = crate::watermark::decode(&carrier_g, key)?;
                Some(crate::watermark::besr(&decoded, key.bits())?)
            }
            None => None,
        };
        metrics.epochs.push(EpochMetrics {
            loss: epoch_loss / steps as f64,
            accuracy: acc,
            besr,
        });
    }
    Ok((work, metrics))
}

fn apply_masks(model: &mut Model, masks: &[Tensor]) -> Result<()> {
    if masks.len() != model.params.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} masks for {} params",
            masks.len(),
            model.params.len()
        )));
    }
    for (p, m) in model.params.iter_mut().zip(masks) {
        if !p.prunable {
            continue;
        }
        if m.shape() != p.value.shape() {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} vs param {:?}",
                m.shape(),
                p.value.shape()
            )));
        }
        for (v, &mv) in p.value.data_mut().iter_mut().zip(m.data()) {
            *v *= mv;
        }
    }
    Ok(())
}
