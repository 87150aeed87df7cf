//! Watermark extraction: exact expected input gradients by backpropagation
//! (white box) and coordinate-wise difference-quotient estimation against a
//! prediction oracle (black box).
//!
//! Black-box estimation queries the oracle once per sample for the base cost
//! and once per carrier node per sample, so one extraction costs exactly
//! `s * (|C| + 1)` queries.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::nn::{mean_input_gradient, Model};
use crate::tensor::Tensor;
use crate::watermark::{decode, ExtractionMeta, ExtractionMode, WatermarkKey};

/// Black-box prediction interface: class scores for a flat input. Tampering
/// wrappers may break normalization, so consumers must not assume rows sum
/// to 1. Implementations count the base-model invocations they serve.
pub trait PredictionOracle: Send + Sync {
    fn query(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Batched queries; the default issues them one by one in order.
    fn query_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.query(x)).collect()
    }

    fn class_count(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn queries_served(&self) -> u64;
}

/// In-process oracle over a model checkpoint. Holds prebuilt forward graphs
/// for single queries and for fixed-size batches.
pub struct ModelOracle {
    model: Model,
    single: OracleGraph,
    batched: OracleGraph,
    queries: AtomicU64,
}

struct OracleGraph {
    graph: Graph,
    input: NodeId,
    params: Vec<NodeId>,
    probs: NodeId,
    rows: usize,
}

impl OracleGraph {
    fn build(model: &Model, rows: usize) -> Result<OracleGraph> {
        let (h, w, c) = model.config.input_shape;
        let mut graph = Graph::new();
        let params = model.param_leaves(&mut graph);
        let input = graph.leaf("x", &[rows, h, w, c], false);
        let logits = model.logits_graph(&mut graph, input, &params)?;
        let probs = graph.softmax_rows(logits)?;
        Ok(OracleGraph {
            graph,
            input,
            params,
            probs,
            rows,
        })
    }

    fn run(&self, model: &Model, data: Vec<f64>) -> Result<Tensor> {
        let (h, w, c) = model.config.input_shape;
        let mut b = Bindings::new();
        model.bind_params(&mut b, &self.params);
        b.bind(self.input, Tensor::new(vec![self.rows, h, w, c], data)?);
        self.graph.forward(&b, self.probs)
    }
}

const ORACLE_BATCH_ROWS: usize = 64;

impl ModelOracle {
    pub fn new(model: Model) -> Result<Self> {
        let single = OracleGraph::build(&model, 1)?;
        let batched = OracleGraph::build(&model, ORACLE_BATCH_ROWS)?;
        Ok(ModelOracle {
            model,
            single,
            batched,
            queries: AtomicU64::new(0),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.model.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.model.input_dim()
            )));
        }
        Ok(())
    }
}

impl PredictionOracle for ModelOracle {
    fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let out = self.single.run(&self.model, x.to_vec())?;
        self.queries.fetch_add(1, Ordering::Relaxed);
        Ok(out.into_data())
    }

    fn query_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let dim = self.model.input_dim();
        for x in xs {
            self.check_dim(x)?;
        }
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(ORACLE_BATCH_ROWS) {
            let mut data = Vec::with_capacity(ORACLE_BATCH_ROWS * dim);
            for x in chunk {
                data.extend_from_slice(x);
            }
            // pad the final partial chunk; padded rows are discarded
            data.resize(ORACLE_BATCH_ROWS * dim, 0.0);
            let probs = self.batched.run(&self.model, data)?;
            for i in 0..chunk.len() {
                out.push(probs.row(i).to_vec());
            }
        }
        self.queries.fetch_add(xs.len() as u64, Ordering::Relaxed);
        Ok(out)
    }

    fn class_count(&self) -> usize {
        self.model.config.num_classes
    }

    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn queries_served(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug)]
pub struct GradientEstimate {
    /// Expected gradient over the carrier coordinates, in carrier order.
    pub values: Vec<f64>,
    pub meta: ExtractionMeta,
    /// Carrier coordinates whose probe `x + h e_c` exceeded 1.0 (perturbed
    /// queries are not re-clipped; these are recorded instead).
    pub boundary_coords: Vec<usize>,
}

fn check_samples(samples: &Dataset, key: &WatermarkKey) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty sample batch".into()));
    }
    if let Some(&bad) = samples
        .labels
        .iter()
        .find(|&&y| y != key.target_class())
    {
        return Err(Error::InvalidArgument(format!(
            "sample of class {bad} present, expected only target class {}",
            key.target_class()
        )));
    }
    if key.max_carrier_index() >= samples.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "carrier index {} outside input dim {}",
            key.max_carrier_index(),
            samples.input_dim()
        )));
    }
    Ok(())
}

/// Expected input gradient of the marked model over target-class samples,
/// restricted to the carrier set, computed exactly by backpropagation.
pub fn whitebox_expected_gradient(
    model: &Model,
    key: &WatermarkKey,
    samples: &Dataset,
) -> Result<GradientEstimate> {
    check_samples(samples, key)?;
    if samples.input_dim() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "samples have dim {}, model expects {}",
            samples.input_dim(),
            model.input_dim()
        )));
    }
    let mean = mean_input_gradient(model, &samples.images, &samples.labels)?;
    let values: Vec<f64> = key.carrier().iter().map(|&c| mean[c]).collect();
    Ok(GradientEstimate {
        values,
        meta: ExtractionMeta::white_box(samples.len()),
        boundary_coords: Vec::new(),
    })
}

/// Cross-entropy cost observed through the oracle for ground-truth label `t`.
fn oracle_cost(probs: &[f64], t: usize, queries_done: u64) -> Result<f64> {
    let p = probs.get(t).copied().ok_or_else(|| Error::Oracle {
        queries_done,
        detail: format!("oracle returned {} scores, need class {t}", probs.len()),
    })?;
    let j = -(p.max(1e-12)).ln();
    if !j.is_finite() {
        return Err(Error::Oracle {
            queries_done,
            detail: format!("non-finite cost from probability {p}"),
        });
    }
    Ok(j)
}

/// Zeroth-order estimate of the expected carrier gradient: per sample, one
/// base query plus one forward-difference query per carrier node, averaged
/// over samples. Perturbed probes are not clipped to [0, 1].
pub fn blackbox_estimate_gradient(
    oracle: &dyn PredictionOracle,
    key: &WatermarkKey,
    samples: &Dataset,
    h: f64,
) -> Result<GradientEstimate> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step length {h} must be positive")));
    }
    check_samples(samples, key)?;
    if samples.input_dim() != oracle.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "samples have dim {}, oracle expects {}",
            samples.input_dim(),
            oracle.input_dim()
        )));
    }
    let t = key.target_class();
    let carrier = key.carrier();
    let s = samples.len();
    let mut acc = vec![0.0f64; carrier.len()];
    let mut boundary = Vec::new();
    let mut queries_done = 0u64;

    for i in 0..s {
        let x = samples.image(i);
        let mut batch = Vec::with_capacity(carrier.len() + 1);
        batch.push(x.to_vec());
        for (ci, &c) in carrier.iter().enumerate() {
            let mut probe = x.to_vec();
            probe[c] += h;
            if probe[c] > 1.0 && !boundary.contains(&ci) {
                boundary.push(ci);
            }
            batch.push(probe);
        }
        let answers = oracle.query_batch(&batch).map_err(|e| match e {
            Error::Oracle {
                queries_done: done,
                detail,
            } => Error::Oracle {
                queries_done: queries_done + done,
                detail,
            },
            other => Error::Oracle {
                queries_done,
                detail: other.to_string(),
            },
        })?;
        queries_done += answers.len() as u64;
        let j0 = oracle_cost(&answers[0], t, queries_done)?;
        for (ci, probs) in answers[1..].iter().enumerate() {
            let j = oracle_cost(probs, t, queries_done)?;
            acc[ci] += (j - j0) / h;
        }
    }

    let values: Vec<f64> = acc.into_iter().map(|v| v / s as f64).collect();
    let boundary_coords: Vec<usize> = {
        let mut b: Vec<usize> = boundary.into_iter().map(|ci| carrier[ci]).collect();
        b.sort_unstable();
        b
    };
    Ok(GradientEstimate {
        values,
        meta: ExtractionMeta {
            mode: ExtractionMode::BlackBox,
            s,
            h,
            query_count: (s * (carrier.len() + 1)) as u64,
        },
        boundary_coords,
    })
}

/// Decode the signature carried by an estimate.
pub fn extract_watermark(estimate: &GradientEstimate, key: &WatermarkKey) -> Result<Vec<u8>> {
    if estimate.values.len() != key.carrier_size() {
        return Err(Error::DimensionMismatch(format!(
            "estimate over {} coordinates, carrier set has {}",
            estimate.values.len(),
            key.carrier_size()
        )));
    }
    decode(&estimate.values, key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nn::{build_model, ModelConfig};
    use crate::tensor::Tensor;
    use crate::watermark::generate_key_random;

    /// Oracle with cost J(x) = sum(x_i^2), exposed through a "probability"
    /// p_T = exp(-J) so that -log p_T recovers J exactly.
    struct QuadraticOracle {
        dim: usize,
        queries: AtomicU64,
    }

    impl PredictionOracle for QuadraticOracle {
        fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
            self.queries.fetch_add(1, Ordering::Relaxed);
            let j: f64 = x.iter().map(|v| v * v).sum();
            // class 0 carries the cost; remaining mass on class 1
            let p = (-j).exp();
            Ok(vec![p, 1.0 - p])
        }

        fn class_count(&self) -> usize {
            2
        }

        fn input_dim(&self) -> usize {
            self.dim
        }

        fn queries_served(&self) -> u64 {
            self.queries.load(Ordering::Relaxed)
        }
    }

    fn quadratic_samples(dim: usize, n: usize, target: usize) -> Dataset {
        let data: Vec<f64> = (0..n * dim)
            .map(|i| 0.3 + 0.4 * ((i as f64 * 0.61).sin() * 0.5 + 0.5) * 0.5)
            .collect();
        Dataset::new(
            Tensor::new(vec![n, 1, dim, 1], data).unwrap(),
            vec![target; n],
            "quad",
            2,
        )
        .unwrap()
    }

    fn key_with_target(n_bits: usize, carrier: usize, dim: usize, target: usize) -> WatermarkKey {
        // draw seeds until the target class matches (keys are cheap)
        for seed in 0.. {
            let k = generate_key_random(n_bits, carrier, dim, 2, seed).unwrap();
            if k.target_class() == target {
                return k;
            }
        }
        unreachable!()
    }

    #[test]
    fn quadratic_forward_difference_identity() {
        // J = sum x_i^2 gives (J(x + h e_c) - J(x))/h = 2 x_c + h exactly.
        let dim = 16;
        let oracle = QuadraticOracle {
            dim,
            queries: AtomicU64::new(0),
        };
        let key = key_with_target(4, 8, dim, 0);
        let samples = quadratic_samples(dim, 3, 0);
        let h = 1e-4;
        let est = blackbox_estimate_gradient(&oracle, &key, &samples, h).unwrap();
        for (ci, &c) in key.carrier().iter().enumerate() {
            let expect: f64 = (0..samples.len())
                .map(|i| 2.0 * samples.image(i)[c] + h)
                .sum::<f64>()
                / samples.len() as f64;
            let got = est.values[ci];
            assert!(
                (got - expect).abs() < 1e-7,
                "coord {c}: got {got}, expect {expect}"
            );
        }
    }

    #[test]
    fn query_accounting_is_exact() {
        let dim = 784;
        let oracle = QuadraticOracle {
            dim,
            queries: AtomicU64::new(0),
        };
        let key = key_with_target(64, 384, dim, 0);
        let samples = quadratic_samples(dim, 50, 0);
        let est = blackbox_estimate_gradient(&oracle, &key, &samples, 1e-4).unwrap();
        assert_eq!(est.meta.query_count, 50 * 385);
        assert_eq!(est.meta.query_count, 19_250);
        assert_eq!(oracle.queries_served(), 19_250);
        // under 500 queries per bit at N=64
        assert!(est.meta.query_count / 64 < 500);
    }

    #[test]
    fn estimation_error_scales_like_h() {
        // On the quadratic oracle the truncation error per coordinate is
        // exactly h, so the L1 error contracts tenfold when h does.
        let dim = 32;
        let oracle = QuadraticOracle {
            dim,
            queries: AtomicU64::new(0),
        };
        let key = key_with_target(4, 16, dim, 0);
        let samples = quadratic_samples(dim, 2, 0);
        let mut errs = Vec::new();
        for h in [1e-2, 1e-3] {
            let est = blackbox_estimate_gradient(&oracle, &key, &samples, h).unwrap();
            let l1: f64 = key
                .carrier()
                .iter()
                .enumerate()
                .map(|(ci, &c)| {
                    let exact: f64 = (0..samples.len())
                        .map(|i| 2.0 * samples.image(i)[c])
                        .sum::<f64>()
                        / samples.len() as f64;
                    (est.values[ci] - exact).abs()
                })
                .sum();
            errs.push(l1);
        }
        let ratio = errs[0] / errs[1];
        assert!((5.0..=20.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn whitebox_matches_linear_softmax_closed_form() {
        // One dense layer + softmax: dJ/dx = W (p - onehot(y)) restricted to C.
        let cfg = ModelConfig {
            input_shape: (1, 6, 1),
            layers: vec![
                crate::nn::LayerSpec::Flatten,
                crate::nn::LayerSpec::Dense { units: 3 },
                crate::nn::LayerSpec::Softmax,
            ],
            num_classes: 3,
            seed: 8,
        };
        let model = build_model(&cfg).unwrap();
        let key = {
            let mut k = None;
            for seed in 0..100 {
                let c = generate_key_random(4, 4, 6, 3, seed).unwrap();
                if c.target_class() == 1 {
                    k = Some(c);
                    break;
                }
            }
            k.unwrap()
        };
        let images = Tensor::new(vec![2, 1, 6, 1], vec![
            0.1, 0.9, 0.3, 0.5, 0.2, 0.7, 0.8, 0.4, 0.6, 0.2, 0.9, 0.1,
        ])
        .unwrap();
        let samples = Dataset::new(images.clone(), vec![1, 1], "t", 3).unwrap();
        let est = whitebox_expected_gradient(&model, &key, &samples).unwrap();

        // closed form, averaged over the two samples
        let w = &model.params[0].value; // [6, 3]
        let b = &model.params[1].value; // [3]
        let mut mean = vec![0.0f64; 6];
        for i in 0..2 {
            let x = images.row(i);
            let mut logits = [0.0f64; 3];
            for j in 0..3 {
                logits[j] = b.data()[j]
                    + (0..6).map(|d| x[d] * w.data()[d * 3 + j]).sum::<f64>();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
            let zsum: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|&e| e / zsum).collect();
            for d in 0..6 {
                let mut g = 0.0;
                for j in 0..3 {
                    let delta = if j == 1 { 1.0 } else { 0.0 };
                    g += w.data()[d * 3 + j] * (p[j] - delta);
                }
                mean[d] += g / 2.0;
            }
        }
        for (ci, &c) in key.carrier().iter().enumerate() {
            assert!(
                (est.values[ci] - mean[c]).abs() < 1e-12,
                "coord {c}: {} vs {}",
                est.values[ci],
                mean[c]
            );
        }
        assert_eq!(est.meta.query_count, 0);
        assert_eq!(est.meta.s, 2);
    }

    #[test]
    fn duplicated_sample_equals_single() {
        let cfg = ModelConfig::mlp((2, 2, 1), 5, 2, 3);
        let model = build_model(&cfg).unwrap();
        let key = key_with_target(3, 2, 4, 0);
        let one = Dataset::new(
            Tensor::new(vec![1, 2, 2, 1], vec![0.2, 0.8, 0.5, 0.1]).unwrap(),
            vec![0],
            "t",
            2,
        )
        .unwrap();
        let three = Dataset::new(
            Tensor::new(vec![3, 2, 2, 1], vec![0.2, 0.8, 0.5, 0.1].repeat(3)).unwrap(),
            vec![0; 3],
            "t",
            2,
        )
        .unwrap();
        let a = whitebox_expected_gradient(&model, &key, &one).unwrap();
        let b = whitebox_expected_gradient(&model, &key, &three).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_label_rejected() {
        let cfg = ModelConfig::mlp((2, 2, 1), 5, 2, 3);
        let model = build_model(&cfg).unwrap();
        let key = key_with_target(3, 2, 4, 0);
        let bad = Dataset::new(
            Tensor::new(vec![1, 2, 2, 1], vec![0.2, 0.8, 0.5, 0.1]).unwrap(),
            vec![1],
            "t",
            2,
        )
        .unwrap();
        assert!(whitebox_expected_gradient(&model, &key, &bad).is_err());
        let oracle = ModelOracle::new(model).unwrap();
        assert!(blackbox_estimate_gradient(&oracle, &key, &bad, 1e-4).is_err());
    }

    #[test]
    fn boundary_coordinates_recorded() {
        let dim = 8;
        let oracle = QuadraticOracle {
            dim,
            queries: AtomicU64::new(0),
        };
        let key = key_with_target(2, 4, dim, 0);
        let mut data = vec![0.5; dim];
        data[key.carrier()[1]] = 1.0; // probe will exceed 1.0 here
        let samples = Dataset::new(
            Tensor::new(vec![1, 1, dim, 1], data).unwrap(),
            vec![0],
            "t",
            2,
        )
        .unwrap();
        let est = blackbox_estimate_gradient(&oracle, &key, &samples, 1e-4).unwrap();
        assert_eq!(est.boundary_coords, vec![key.carrier()[1]]);
    }

    #[test]
    fn model_oracle_counts_and_normalizes() {
        let ds = make_synthetic(3, 5, (2, 2, 1), 4).unwrap();
        let model = build_model(&ModelConfig::mlp((2, 2, 1), 6, 3, 1)).unwrap();
        let oracle = ModelOracle::new(model).unwrap();
        let p = oracle.query(ds.image(0)).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        oracle.query(ds.image(1)).unwrap();
        assert_eq!(oracle.queries_served(), 2);
    }

    #[test]
    fn batched_queries_bit_identical_to_singles() {
        let ds = make_synthetic(4, 40, (3, 3, 1), 12).unwrap();
        let model = build_model(&ModelConfig::mlp((3, 3, 1), 7, 4, 2)).unwrap();
        let oracle = ModelOracle::new(model).unwrap();
        let xs: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.image(i).to_vec()).collect();
        let batched = oracle.query_batch(&xs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let single = oracle.query(x).unwrap();
            for (a, b) in single.iter().zip(&batched[i]) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(oracle.queries_served(), 2 * ds.len() as u64);
    }
}
