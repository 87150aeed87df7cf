//! Watermark keys, the embedding regularizer, signature decoding, and the
//! binomial ownership test.
//!
//! A key is the owner's secret: an N-bit signature `b`, a carrier set `C` of
//! input coordinates, an embedding matrix `K` in [-1,1]^{N x |C|} mapping
//! carrier gradients to bits, and a target class `T` whose samples are used
//! to measure expected input gradients. Bit j decodes to 1 iff
//! `<K_j, G> >= 0`; the indicator is closed at zero.

use std::fmt;
use std::path::Path;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KEY_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Random { seed: u64 },
    Message {
        digest_alg: String,
        message: String,
        digest: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkKey {
    bits: Vec<u8>,
    carrier: Vec<usize>,
    /// Row-major N x |C|.
    matrix: Vec<f64>,
    target_class: usize,
    provenance: Provenance,
}

impl WatermarkKey {
    pub fn n_bits(&self) -> usize {
        self.bits.len()
    }

    pub fn carrier_size(&self) -> usize {
        self.carrier.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn carrier(&self) -> &[usize] {
        &self.carrier
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn matrix_row(&self, j: usize) -> &[f64] {
        let c = self.carrier.len();
        &self.matrix[j * c..(j + 1) * c]
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Largest carrier index; callers check it against the model input dim.
    pub fn max_carrier_index(&self) -> usize {
        *self.carrier.last().expect("carrier nonempty")
    }
}

fn draw_key_parts(
    rng: &mut ChaCha20Rng,
    n_bits: usize,
    carrier_size: usize,
    input_dim: usize,
    classes: usize,
    provenance: Provenance,
) -> WatermarkKey {
    let bits: Vec<u8> = (0..n_bits).map(|_| rng.gen_range(0..2u8)).collect();
    let mut carrier: Vec<usize> = sample_indices(rng, input_dim, carrier_size).into_vec();
    carrier.sort_unstable();
    let matrix: Vec<f64> = (0..n_bits * carrier_size)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    let target_class = rng.gen_range(0..classes);
    WatermarkKey {
        bits,
        carrier,
        matrix,
        target_class,
        provenance,
    }
}

fn validate_key_dims(n_bits: usize, carrier_size: usize, input_dim: usize, classes: usize) -> Result<()> {
    if n_bits == 0 {
        return Err(Error::InvalidArgument("watermark must have at least 1 bit".into()));
    }
    if carrier_size == 0 || carrier_size > input_dim {
        return Err(Error::InvalidArgument(format!(
            "carrier size {carrier_size} must be in 1..={input_dim}"
        )));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    Ok(())
}

/// Fresh key with all parts drawn from a seeded RNG.
pub fn generate_key_random(
    n_bits: usize,
    carrier_size: usize,
    input_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<WatermarkKey> {
    validate_key_dims(n_bits, carrier_size, input_dim, classes)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(draw_key_parts(
        &mut rng,
        n_bits,
        carrier_size,
        input_dim,
        classes,
        Provenance::Random { seed },
    ))
}

/// Key bound to an identity message: a SHA-256 digest of the message seeds a
/// counter-mode stream that drives the same drawing procedure as the random
/// path. Identical messages always produce identical keys.
pub fn generate_key_from_message(
    message: &str,
    n_bits: usize,
    carrier_size: usize,
    input_dim: usize,
    classes: usize,
) -> Result<WatermarkKey> {
    if message.is_empty() {
        return Err(Error::InvalidArgument("message must be nonempty".into()));
    }
    validate_key_dims(n_bits, carrier_size, input_dim, classes)?;
    let digest = Sha256::digest(message.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha20Rng::from_seed(seed);
    let digest_hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(draw_key_parts(
        &mut rng,
        n_bits,
        carrier_size,
        input_dim,
        classes,
        Provenance::Message {
            digest_alg: "sha256".into(),
            message: message.to_string(),
            digest: digest_hex,
        },
    ))
}

// ---- key file ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct KeyFile {
    format_version: u32,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T")]
    target_class: usize,
    carrier_indices: Vec<usize>,
    #[serde(rename = "K")]
    matrix: Vec<f64>,
    b: String,
    provenance: Provenance,
}

impl WatermarkKey {
    /// Serialize to the JSON key file. The file is the owner's secret; store
    /// it with restrictive permissions.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = KeyFile {
            format_version: KEY_FORMAT_VERSION,
            n: self.n_bits(),
            target_class: self.target_class,
            carrier_indices: self.carrier.clone(),
            matrix: self.matrix.clone(),
            b: self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<WatermarkKey> {
        let raw = std::fs::read_to_string(path)?;
        let file: KeyFile = serde_json::from_str(&raw)?;
        if file.format_version != KEY_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported key format version {}",
                file.format_version
            )));
        }
        if file.b.len() != file.n {
            return Err(Error::InvalidArgument(format!(
                "bit string length {} does not match N={}",
                file.b.len(),
                file.n
            )));
        }
        let bits: Vec<u8> = file
            .b
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::InvalidArgument(format!("bad bit char '{other}'"))),
            })
            .collect::<Result<_>>()?;
        let carrier = file.carrier_indices;
        if carrier.is_empty() {
            return Err(Error::InvalidArgument("empty carrier set".into()));
        }
        if carrier.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "carrier indices must be sorted and distinct".into(),
            ));
        }
        if file.matrix.len() != file.n * carrier.len() {
            return Err(Error::DimensionMismatch(format!(
                "K has {} entries, expected {}x{}",
                file.matrix.len(),
                file.n,
                carrier.len()
            )));
        }
        if file.matrix.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("K entries must lie in [-1, 1]".into()));
        }
        Ok(WatermarkKey {
            bits,
            carrier,
            matrix: file.matrix,
            target_class: file.target_class,
            provenance: file.provenance,
        })
    }
}

// ---- embedding loss and decoding ---------------------------------------

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_carrier_len(g: &[f64], key: &WatermarkKey) -> Result<()> {
    if g.len() != key.carrier_size() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries, carrier set has {}",
            g.len(),
            key.carrier_size()
        )));
    }
    Ok(())
}

/// Margins z_j = <K_j, G>.
pub fn margins(g: &[f64], key: &WatermarkKey) -> Result<Vec<f64>> {
    check_carrier_len(g, key)?;
    Ok((0..key.n_bits())
        .map(|j| {
            key.matrix_row(j)
                .iter()
                .zip(g)
                .map(|(&k, &gv)| k * gv)
                .sum()
        })
        .collect())
}

/// Binary cross-entropy of sigmoid(K G) against the signature bits,
/// computed in logit form so saturated margins stay finite.
pub fn embedding_loss(g: &[f64], key: &WatermarkKey) -> Result<f64> {
    let z = margins(g, key)?;
    Ok(z.iter()
        .zip(key.bits())
        .map(|(&zj, &bj)| stable_softplus(zj) - f64::from(bj) * zj)
        .sum())
}

/// Analytic gradient of `embedding_loss` with respect to G:
/// dL/dG_i = sum_j (sigmoid(z_j) - b_j) K_ji. Used as the independent check
/// against the graph-built regularizer.
pub fn embedding_loss_grad(g: &[f64], key: &WatermarkKey) -> Result<Vec<f64>> {
    let z = margins(g, key)?;
    let mut out = vec![0.0; g.len()];
    for (j, &zj) in z.iter().enumerate() {
        let coeff = stable_sigmoid(zj) - f64::from(key.bits()[j]);
        for (o, &k) in out.iter_mut().zip(key.matrix_row(j)) {
            *o += coeff * k;
        }
    }
    Ok(out)
}

/// Decode the signature carried by a gradient vector over the carrier set.
pub fn decode(g_hat: &[f64], key: &WatermarkKey) -> Result<Vec<u8>> {
    let z = margins(g_hat, key)?;
    Ok(z.iter().map(|&zj| u8::from(zj >= 0.0)).collect())
}

/// Bit error rate between a decoded signature and the reference bits.
pub fn ber(decoded: &[u8], reference: &[u8]) -> Result<f64> {
    if decoded.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "bit vectors of length {} and {}",
            decoded.len(),
            reference.len()
        )));
    }
    let errors = decoded
        .iter()
        .zip(reference)
        .filter(|(a, b)| a != b)
        .count();
    Ok(errors as f64 / decoded.len() as f64)
}

/// Bit embedding success rate immediately after embedding.
pub fn besr(decoded: &[u8], reference: &[u8]) -> Result<f64> {
    Ok(1.0 - ber(decoded, reference)?)
}

// ---- binomial verification ---------------------------------------------

/// Exact mantissa/exponent decomposition of a positive finite f64:
/// x == m * 2^e.
fn f64_mantissa_exp(x: f64) -> (u64, i64) {
    debug_assert!(x.is_finite() && x > 0.0);
    let bits = x.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if raw_exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), raw_exp - 1075)
    }
}

/// Exact test of sum(C(n,k), k=0..=eta) / 2^n < tau in integer arithmetic.
fn null_tail_below(cum: &BigUint, n: usize, tau: f64) -> bool {
    let (m, e) = f64_mantissa_exp(tau);
    let m = BigUint::from(m);
    // cum * 2^-n < m * 2^e  <=>  cum < m * 2^(e+n)
    let t = e + n as i64;
    if t >= 0 {
        *cum < (m << t as u64)
    } else {
        (cum.clone() << (-t) as u64) < m
    }
}

/// Largest eta such that P(n_error <= eta | null) < tau, with the null
/// decoding each bit correctly with probability 1/2. Returns -1 when even
/// zero errors is not significant (unusable N/tau pair).
pub fn error_threshold(n_bits: usize, tau: f64) -> Result<i64> {
    if n_bits == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be in (0, 1)")));
    }
    let mut cum = BigUint::from(1u32); // C(n, 0)
    let mut coeff = BigUint::from(1u32);
    let mut eta: i64 = -1;
    for k in 0..=n_bits {
        if k > 0 {
            // C(n, k) = C(n, k-1) * (n - k + 1) / k, exact at every step
            coeff = coeff * BigUint::from((n_bits - k + 1) as u64) / BigUint::from(k as u64);
            cum += &coeff;
        }
        if null_tail_below(&cum, n_bits, tau) {
            eta = k as i64;
        } else {
            break;
        }
    }
    Ok(eta)
}

/// Exact null-model probability P(n_error <= observed), reported as f64.
pub fn p_value(n_bits: usize, n_error: usize) -> f64 {
    let n_error = n_error.min(n_bits);
    let mut cum = BigUint::from(1u32);
    let mut coeff = BigUint::from(1u32);
    for k in 1..=n_error {
        coeff = coeff * BigUint::from((n_bits - k + 1) as u64) / BigUint::from(k as u64);
        cum += &coeff;
    }
    let p = cum.to_f64().unwrap_or(f64::INFINITY) / 2f64.powi(n_bits as i32);
    p.clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationPolicy {
    /// Significance threshold bounding the null-model pass probability.
    pub tau: f64,
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        VerificationPolicy { tau: 3e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    WhiteBox,
    BlackBox,
}

impl fmt::Display for ExtractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractionMode::WhiteBox => write!(f, "white-box"),
            ExtractionMode::BlackBox => write!(f, "black-box"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMeta {
    pub mode: ExtractionMode,
    /// Sample count the expected gradient was averaged over.
    pub s: usize,
    /// Estimation step length (0 for exact gradients).
    pub h: f64,
    pub query_count: u64,
}

impl ExtractionMeta {
    pub fn white_box(s: usize) -> Self {
        ExtractionMeta {
            mode: ExtractionMode::WhiteBox,
            s,
            h: 0.0,
            query_count: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    pub decoded: Vec<u8>,
    pub n_error: usize,
    pub eta: i64,
    pub p_value: f64,
    pub verified: bool,
    pub meta: ExtractionMeta,
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "mode: {} (s={}, h={}, queries={})",
            self.meta.mode, self.meta.s, self.meta.h, self.meta.query_count
        )?;
        let decoded: String = self.decoded.iter().map(|&b| char::from(b'0' + b)).collect();
        writeln!(f, "decoded: {decoded}")?;
        writeln!(
            f,
            "bit errors: {}/{} (eta={})",
            self.n_error,
            self.decoded.len(),
            self.eta
        )?;
        writeln!(f, "p-value: {:.3e}", self.p_value)?;
        write!(
            f,
            "watermark {}",
            if self.verified { "VERIFIED" } else { "NOT VERIFIED" }
        )
    }
}

/// Decode a gradient vector and test ownership: verified iff the number of
/// mismatched bits is at most the exact binomial threshold for the policy.
pub fn verify(
    g_hat: &[f64],
    key: &WatermarkKey,
    policy: &VerificationPolicy,
    meta: ExtractionMeta,
) -> Result<VerificationReport> {
    let decoded = decode(g_hat, key)?;
    let n_error = decoded
        .iter()
        .zip(key.bits())
        .filter(|(a, b)| a != b)
        .count();
    let eta = error_threshold(key.n_bits(), policy.tau)?;
    Ok(VerificationReport {
        verified: (n_error as i64) <= eta,
        p_value: p_value(key.n_bits(), n_error),
        decoded,
        n_error,
        eta,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_key_is_deterministic_and_valid() {
        let a = generate_key_random(16, 128, 3072, 10, 7).unwrap();
        let b = generate_key_random(16, 128, 3072, 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.carrier_size(), 128);
        assert_eq!(a.n_bits(), 16);
        assert!(a.carrier().windows(2).all(|w| w[0] < w[1]));
        assert!(a.matrix().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(a.target_class() < 10);

        let c = generate_key_random(16, 128, 3072, 10, 8).unwrap();
        assert_ne!(a.bits(), c.bits());
    }

    #[test]
    fn carrier_larger_than_input_rejected() {
        assert!(generate_key_random(16, 4000, 3072, 10, 7).is_err());
    }

    #[test]
    fn message_key_deterministic() {
        let a = generate_key_from_message("ACME Corp model v1", 64, 128, 784, 10).unwrap();
        let b = generate_key_from_message("ACME Corp model v1", 64, 128, 784, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.matrix().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn message_avalanche_flips_about_half_the_bits() {
        // 100 message pairs differing in one byte; mean Hamming distance of b
        // should sit within N/2 +- 3 sigma, sigma = sqrt(N)/2 per pair, so the
        // mean of 100 pairs has sigma_mean = sqrt(N)/2/10.
        let n = 64usize;
        let mut total = 0usize;
        let pairs = 100;
        for i in 0..pairs {
            let m1 = format!("vendor identity {i}");
            let m2 = format!("vendor identitz {i}");
            let k1 = generate_key_from_message(&m1, n, 32, 784, 10).unwrap();
            let k2 = generate_key_from_message(&m2, n, 32, 784, 10).unwrap();
            total += k1
                .bits()
                .iter()
                .zip(k2.bits())
                .filter(|(a, b)| a != b)
                .count();
        }
        let mean = total as f64 / pairs as f64;
        let sigma_mean = (n as f64).sqrt() / 2.0 / (pairs as f64).sqrt();
        assert!(
            (mean - n as f64 / 2.0).abs() < 3.0 * sigma_mean + 1e-9,
            "mean Hamming distance {mean} too far from {}",
            n / 2
        );
    }

    #[test]
    fn key_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("owner.key.json");
        let key = generate_key_from_message("ACME", 32, 64, 784, 10).unwrap();
        key.save(&path).unwrap();
        let loaded = WatermarkKey::load(&path).unwrap();
        assert_eq!(key, loaded);
    }

    #[test]
    fn embedding_loss_zero_gradient_is_n_ln2() {
        let key = generate_key_random(16, 32, 784, 10, 3).unwrap();
        let g = vec![0.0; 32];
        let loss = embedding_loss(&g, &key).unwrap();
        assert!((loss - 16.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn embedding_loss_saturated_correct_margin_vanishes() {
        // Single bit b=1 with a huge positive margin: term -> 0.
        let mut key = generate_key_random(1, 4, 16, 10, 5).unwrap();
        key.bits = vec![1];
        key.matrix = vec![1.0, 1.0, 1.0, 1.0];
        let g = vec![100.0; 4];
        let loss = embedding_loss(&g, &key).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn embedding_loss_grad_matches_finite_differences() {
        use crate::graph::finite_diff_check;
        use crate::tensor::Tensor;
        let key = generate_key_random(8, 12, 64, 10, 11).unwrap();
        let point: Vec<f64> = (0..12).map(|i| (i as f64 * 0.77).sin() * 0.3).collect();
        let analytic = Tensor::from_vec(embedding_loss_grad(&point, &key).unwrap());
        let pt = Tensor::from_vec(point);
        let key2 = key.clone();
        let f = move |p: &Tensor| embedding_loss(p.data(), &key2);
        let err = finite_diff_check(&f, &analytic, &pt, 1e-6).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn decode_sign_rules() {
        let mut key = generate_key_random(1, 3, 16, 10, 5).unwrap();
        key.matrix = vec![1.0, 1.0, 1.0];
        assert_eq!(decode(&[0.1, 0.1, 0.1], &key).unwrap(), vec![1]);
        assert_eq!(decode(&[-0.1, -0.1, -0.1], &key).unwrap(), vec![0]);
        // closed at zero: decodes to 1
        assert_eq!(decode(&[0.0, 0.0, 0.0], &key).unwrap(), vec![1]);
    }

    #[test]
    fn decode_negation_flips_nonzero_margins() {
        let key = generate_key_random(64, 48, 784, 10, 9).unwrap();
        let g: Vec<f64> = (0..48).map(|i| ((i * 37 + 5) as f64).sin()).collect();
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let d1 = decode(&g, &key).unwrap();
        let d2 = decode(&neg, &key).unwrap();
        for (a, b) in d1.iter().zip(&d2) {
            assert_ne!(a, b);
        }
    }

    #[test]
    fn decode_is_scale_invariant() {
        let key = generate_key_random(32, 20, 784, 10, 13).unwrap();
        let g: Vec<f64> = (0..20).map(|i| ((i * 11 + 1) as f64).cos()).collect();
        let d1 = decode(&g, &key).unwrap();
        for c in [1e-6, 0.5, 3.0, 1e9] {
            let scaled: Vec<f64> = g.iter().map(|v| c * v).collect();
            assert_eq!(decode(&scaled, &key).unwrap(), d1);
        }
    }

    #[test]
    fn ber_basics() {
        assert_eq!(ber(&[1, 0, 1], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(ber(&[0, 1, 0], &[1, 0, 1]).unwrap(), 1.0);
        // 2 mismatches over 64
        let a = vec![0u8; 64];
        let mut b = vec![0u8; 64];
        b[3] = 1;
        b[40] = 1;
        assert_eq!(ber(&a, &b).unwrap(), 0.03125);
        assert!(ber(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn thresholds_match_published_values() {
        // eta = 2 / 7 / 20 => minimum correct bits 14 / 25 / 44 at tau = 3e-3.
        assert_eq!(error_threshold(16, 3e-3).unwrap(), 2);
        assert_eq!(error_threshold(32, 3e-3).unwrap(), 7);
        assert_eq!(error_threshold(64, 3e-3).unwrap(), 20);
    }

    #[test]
    fn threshold_monotone_in_n_and_tau() {
        let mut prev = -1;
        for n in 1..=128 {
            let eta = error_threshold(n, 3e-3).unwrap();
            assert!(eta >= prev, "eta not monotone at N={n}");
            prev = eta;
        }
        let mut prev = -2;
        for tau in [1e-9, 1e-6, 3e-3, 0.05, 0.5] {
            let eta = error_threshold(64, tau).unwrap();
            assert!(eta >= prev);
            prev = eta;
        }
    }

    #[test]
    fn tiny_n_is_unusable() {
        // With N=4, even 0 errors has null probability 1/16 > 3e-3.
        assert_eq!(error_threshold(4, 3e-3).unwrap(), -1);
    }

    #[test]
    fn p_value_sane() {
        assert!((p_value(16, 16) - 1.0).abs() < 1e-15);
        assert!((p_value(16, 0) - 2f64.powi(-16)).abs() < 1e-20);
        let p = p_value(64, 20);
        assert!(p < 3e-3 && p > 0.0, "p={p}");
        let p21 = p_value(64, 21);
        assert!(p21 > 3e-3, "p21={p21}");
    }

    #[test]
    fn verify_accepts_two_errors_at_n64() {
        let key = generate_key_random(64, 16, 784, 10, 21).unwrap();
        // Build a gradient decoding exactly to b, then flip 2 bits by negating
        // margins: construct g from the pseudoinverse-free route of using
        // decode on candidate vectors is fiddly; instead test the counting
        // logic directly through a synthetic decoded comparison.
        let g: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) as f64).sin()).collect();
        let decoded = decode(&g, &key).unwrap();
        let n_err = decoded
            .iter()
            .zip(key.bits())
            .filter(|(a, b)| a != b)
            .count();
        let report = verify(&g, &key, &VerificationPolicy::default(), ExtractionMeta::white_box(1)).unwrap();
        assert_eq!(report.n_error, n_err);
        assert_eq!(report.eta, 20);
        assert_eq!(report.verified, n_err <= 20);
        assert!((0.0..=1.0).contains(&report.p_value));
    }

    #[test]
    fn null_false_positive_rate_bounded_by_tau() {
        // Monte Carlo over random (key, gradient) pairs for each N: the
        // verification rate of unmarked gradients must stay below tau.
        use rand::RngCore;
        let trials = 10_000;
        for (n, carrier) in [(16usize, 32usize), (32, 32), (64, 32)] {
            let mut rng = ChaCha20Rng::seed_from_u64(0xFEED + n as u64);
            let mut fp = 0usize;
            for _ in 0..trials {
                let key = generate_key_random(n, carrier, 784, 10, rng.next_u64()).unwrap();
                let g: Vec<f64> = (0..carrier).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let report =
                    verify(&g, &key, &VerificationPolicy::default(), ExtractionMeta::white_box(1))
                        .unwrap();
                if report.verified {
                    fp += 1;
                }
            }
            let rate = fp as f64 / trials as f64;
            assert!(rate < 3e-3, "N={n}: null FPR {rate}");
        }
    }
}
