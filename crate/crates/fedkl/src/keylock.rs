//! The key-lock module. Instead of trainable batch-norm scale/shift, the
//! per-channel coefficients are produced by two affine "lock" maps applied to
//! a private random "key" sequence:
//!
//! ```text
//! gamma = key · W_gamma + b_gamma        beta = key · W_beta + b_beta
//! s     = gamma · û + beta
//! ```
//!
//! Key and lock never leave the client; without them an observer of the
//! shared gradient cannot align the scale/shift and the input information the
//! normalized feature map carried is cut off.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{bn_backward_core, bn_normalize, scale_shift, BnCache};
use crate::rng;
use crate::tensor::{ensure_finite, Tensor};

/// Default key length.
pub const DEFAULT_KEY_LEN: usize = 1024;

/// A client's private random key sequence plus the seed it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Key {
    values: Vec<f64>,
    seed: u64,
}

impl Key {
    /// Deterministic standard-normal key of length `len`; the same seed
    /// always reproduces the same key.
    pub fn generate(seed: u64, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument {
                op: "Key::generate",
                msg: "key length must be >= 1".to_string(),
            });
        }
        let mut rng = rng::substream(seed, 0xCAFE);
        Ok(Self {
            values: rng::normal_vec(&mut rng, len, 1.0),
            seed,
        })
    }

    pub fn from_values(values: Vec<f64>, seed: u64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument {
                op: "Key::from_values",
                msg: "key length must be >= 1".to_string(),
            });
        }
        ensure_finite("Key::from_values", &values)?;
        Ok(Self { values, seed })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.values.len()], self.values.clone())
    }

    pub fn as_vector(&self) -> Tensor {
        Tensor::from_parts(vec![self.values.len()], self.values.clone())
    }

    /// Binary export: 8-byte little-endian seed, 4-byte little-endian length,
    /// then each value as a little-endian f64.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(12 + 8 * self.values.len());
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 {
            return Err(Error::format(path, "truncated key header"));
        }
        let seed = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 8 * len {
            return Err(Error::format(
                path,
                format!("expected {len} values, payload holds {}", (bytes.len() - 12) / 8),
            ));
        }
        let values: Vec<f64> = bytes[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if len == 0 || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "invalid key payload"));
        }
        Ok(Self { values, seed })
    }
}

/// The two private affine lock maps. `w_gamma`/`w_beta` are `[key_len, out]`;
/// the biases are `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyLockModule {
    pub w_gamma: Tensor,
    pub b_gamma: Tensor,
    pub w_beta: Tensor,
    pub b_beta: Tensor,
    pub eps: f64,
    /// With the biases disabled the coefficients are pure projections of the
    /// key; gradients of the bias parameters are then exactly zero.
    pub use_bias: bool,
}

impl KeyLockModule {
    /// Lock weights start at N(0, 1/S) with gamma bias 1 and beta bias 0, so
    /// an untrained lock scales like identity batch-norm in expectation and
    /// the coefficient magnitudes do not grow with the key length.
    pub fn init(key_len: usize, out_channels: usize, use_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (key_len as f64).sqrt();
        KeyLockModule {
            w_gamma: rng::normal_tensor(rng, &[key_len, out_channels], std),
            b_gamma: Tensor::full(&[out_channels], 1.0).expect("finite"),
            w_beta: rng::normal_tensor(rng, &[key_len, out_channels], std),
            b_beta: Tensor::zeros(&[out_channels]),
            eps: crate::layers::BN_EPS,
            use_bias,
        }
    }

    pub fn key_len(&self) -> usize {
        self.w_gamma.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.w_gamma.shape()[1]
    }

    fn check_key(&self, key: &Key) -> Result<()> {
        if key.len() != self.key_len() {
            return Err(Error::KeyLength {
                expected: self.key_len(),
                got: key.len(),
            });
        }
        Ok(())
    }

    /// The generated per-channel coefficients `(gamma, beta)`.
    pub fn coeffs(&self, key: &Key) -> Result<(Tensor, Tensor)> {
        self.check_key(key)?;
        let row = key.as_row();
        let o = self.out_channels();
        let mut gamma = row.matmul(&self.w_gamma)?.reshape(vec![o])?;
        let mut beta = row.matmul(&self.w_beta)?.reshape(vec![o])?;
        if self.use_bias {
            gamma = gamma.add(&self.b_gamma)?;
            beta = beta.add(&self.b_beta)?;
        }
        Ok((gamma, beta))
    }
}

#[derive(Debug, Clone)]
pub struct KeyLockCache {
    pub(crate) bn: BnCache,
    pub(crate) gamma: Tensor,
    pub(crate) key: Key,
}

impl KeyLockCache {
    pub fn u_hat(&self) -> &Tensor {
        self.bn.u_hat()
    }
}

/// Batch-normalize `x` and scale/shift with the key-generated coefficients.
pub fn keylock_forward(
    module: &KeyLockModule,
    x: &Tensor,
    key: &Key,
) -> Result<(Tensor, KeyLockCache)> {
    let (gamma, beta) = module.coeffs(key)?;
    let bn = bn_normalize(x, module.eps)?;
    let s = scale_shift(&bn, &gamma, &beta)?;
    Ok((
        s,
        KeyLockCache {
            bn,
            gamma,
            key: key.clone(),
        },
    ))
}

/// Gradients of the lock parameters and the layer input.
#[derive(Debug, Clone)]
pub struct KeyLockGrads {
    pub w_gamma: Tensor,
    pub b_gamma: Tensor,
    pub w_beta: Tensor,
    pub b_beta: Tensor,
    pub x: Tensor,
}

/// The lock-weight gradients are rank one: the key column times the
/// effective coefficient gradients (`grad_w_gamma = key ⊗ Σ upstream·û`,
/// `grad_w_beta = key ⊗ Σ upstream`). The input gradient is the batch-norm
/// backward evaluated with the generated gamma.
pub fn keylock_backward(
    module: &KeyLockModule,
    cache: &KeyLockCache,
    upstream: &Tensor,
) -> Result<KeyLockGrads> {
    module.check_key(&cache.key)?;
    let (grad_gamma_eff, grad_beta_eff, grad_x) =
        bn_backward_core(&cache.bn, upstream, &cache.gamma)?;
    let key_col = cache.key.as_vector();
    let w_gamma = key_col.outer(&grad_gamma_eff)?;
    let w_beta = key_col.outer(&grad_beta_eff)?;
    let o = module.out_channels();
    let (b_gamma, b_beta) = if module.use_bias {
        (grad_gamma_eff, grad_beta_eff)
    } else {
        (Tensor::zeros(&[o]), Tensor::zeros(&[o]))
    };
    Ok(KeyLockGrads {
        w_gamma,
        b_gamma,
        w_beta,
        b_beta,
        x: grad_x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grad_tensor, rel_err};
    use crate::layers::{batchnorm_forward, batchnorm_backward, BatchNormLayer, BN_EPS};
    use crate::rng::{normal_tensor, seeded};

    fn module(key_len: usize, o: usize, seed: u64) -> KeyLockModule {
        KeyLockModule::init(key_len, o, true, &mut seeded(seed))
    }

    #[test]
    fn key_generation_is_deterministic() {
        let a = Key::generate(42, 64).unwrap();
        let b = Key::generate(42, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let a = Key::generate(1, 1000).unwrap();
        let b = Key::generate(2, 1000).unwrap();
        let same = a
            .values()
            .iter()
            .zip(b.values())
            .filter(|(x, y)| x == y)
            .count();
        assert!(same <= 10, "{same} identical entries");
    }

    #[test]
    fn key_moments_match_standard_normal() {
        let k = Key::generate(7, 4096).unwrap();
        let mean: f64 = k.values().iter().sum::<f64>() / 4096.0;
        let var: f64 = k.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4096.0;
        assert!(mean.abs() <= 0.1, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.1, "var {var}");
    }

    #[test]
    fn zero_key_rejected() {
        assert!(Key::generate(5, 0).is_err());
    }

    #[test]
    fn key_file_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.key");
        let key = Key::from_values(vec![1.0, -2.5], 0x0102030405060708).unwrap();
        key.write_file(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut want = vec![0x08, 0x07, 0x06, 0x05, 0x04, 0x03, 0x02, 0x01]; // seed LE
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(Key::read_file(&path).unwrap(), key);
    }

    #[test]
    fn truncated_key_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.key");
        std::fs::write(&path, [0u8; 13]).unwrap();
        assert!(matches!(
            Key::read_file(&path),
            Err(crate::Error::Format { .. })
        ));
    }

    #[test]
    fn identity_lock_yields_plain_bn_coefficients() {
        let mut m = module(16, 3, 1);
        m.w_gamma = Tensor::zeros(&[16, 3]);
        m.w_beta = Tensor::zeros(&[16, 3]);
        let key = Key::generate(9, 16).unwrap();
        let (gamma, beta) = m.coeffs(&key).unwrap();
        assert!(gamma.data().iter().all(|&v| v == 1.0));
        assert!(beta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_key_values_select_the_biases() {
        let m = module(8, 2, 2);
        let key = Key::from_values(vec![0.0; 8], 0).unwrap();
        let (gamma, beta) = m.coeffs(&key).unwrap();
        assert_eq!(gamma, m.b_gamma);
        assert_eq!(beta, m.b_beta);
    }

    #[test]
    fn coeffs_match_dot_product_oracle() {
        let m = module(32, 4, 3);
        let key = Key::generate(11, 32).unwrap();
        let (gamma, beta) = m.coeffs(&key).unwrap();
        for j in 0..4 {
            let g: f64 = (0..32)
                .map(|s| key.values()[s] * m.w_gamma.get(s * 4 + j))
                .sum::<f64>()
                + m.b_gamma.get(j);
            let b: f64 = (0..32)
                .map(|s| key.values()[s] * m.w_beta.get(s * 4 + j))
                .sum::<f64>()
                + m.b_beta.get(j);
            assert!((gamma.get(j) - g).abs() <= 1e-12);
            assert!((beta.get(j) - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn key_length_mismatch_is_rejected() {
        let m = module(16, 2, 4);
        let key = Key::generate(1, 8).unwrap();
        assert!(matches!(
            m.coeffs(&key),
            Err(crate::Error::KeyLength {
                expected: 16,
                got: 8
            })
        ));
    }

    #[test]
    fn forward_constant_input_gives_generated_beta() {
        let m = module(16, 3, 5);
        let key = Key::generate(13, 16).unwrap();
        let (_, beta) = m.coeffs(&key).unwrap();
        let x = Tensor::full(&[1, 3, 4, 4], 0.7).unwrap();
        let (s, cache) = keylock_forward(&m, &x, &key).unwrap();
        // the 16-term mean of 0.7 is off by an ulp, so û is ~0, not == 0
        assert!(cache.u_hat().max_abs() <= 1e-12);
        for c in 0..3 {
            for p in 0..16 {
                assert!((s.get(c * 16 + p) - beta.get(c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_lock_matches_plain_bn_bitwise() {
        let mut m = module(16, 2, 6);
        m.w_gamma = Tensor::zeros(&[16, 2]);
        m.w_beta = Tensor::zeros(&[16, 2]);
        let key = Key::generate(17, 16).unwrap();
        let bn = BatchNormLayer {
            gamma: Tensor::full(&[2], 1.0).unwrap(),
            beta: Tensor::zeros(&[2]),
            eps: BN_EPS,
        };
        let x = normal_tensor(&mut seeded(19), &[2, 2, 3, 3], 1.0);
        let up = normal_tensor(&mut seeded(23), &[2, 2, 3, 3], 1.0);

        let (s_kl, cache_kl) = keylock_forward(&m, &x, &key).unwrap();
        let (s_bn, cache_bn) = batchnorm_forward(&bn, &x).unwrap();
        assert_eq!(s_kl, s_bn);

        let g_kl = keylock_backward(&m, &cache_kl, &up).unwrap();
        let (_, _, gx_bn) = batchnorm_backward(&bn, &cache_bn, &up).unwrap();
        assert_eq!(g_kl.x, gx_bn);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let m = module(8, 2, 7);
        let key = Key::generate(29, 8).unwrap();
        let x = normal_tensor(&mut seeded(31), &[1, 2, 3, 3], 1.0);
        let (_, cache) = keylock_forward(&m, &x, &key).unwrap();
        let g = keylock_backward(&m, &cache, &Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        assert_eq!(g.w_gamma.max_abs(), 0.0);
        assert_eq!(g.b_gamma.max_abs(), 0.0);
        assert_eq!(g.w_beta.max_abs(), 0.0);
        assert_eq!(g.b_beta.max_abs(), 0.0);
        assert_eq!(g.x.max_abs(), 0.0);
    }

    #[test]
    fn unit_key_isolates_one_lock_row() {
        let m = module(8, 2, 8);
        let mut vals = vec![0.0; 8];
        vals[0] = 1.0;
        let key = Key::from_values(vals, 0).unwrap();
        let x = normal_tensor(&mut seeded(37), &[1, 2, 3, 3], 1.0);
        let up = normal_tensor(&mut seeded(41), &[1, 2, 3, 3], 1.0);
        let (_, cache) = keylock_forward(&m, &x, &key).unwrap();
        let g = keylock_backward(&m, &cache, &up).unwrap();
        for s in 1..8 {
            for j in 0..2 {
                assert_eq!(g.w_gamma.get(s * 2 + j), 0.0);
                assert_eq!(g.w_beta.get(s * 2 + j), 0.0);
            }
        }
        assert!(g.w_gamma.max_abs() > 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..10u64 {
            let m = module(8, 2, 100 + seed);
            let key = Key::generate(200 + seed, 8).unwrap();
            let x = normal_tensor(&mut seeded(300 + seed), &[2, 2, 3, 3], 1.0);
            let up = normal_tensor(&mut seeded(400 + seed), &[2, 2, 3, 3], 1.0);
            let (_, cache) = keylock_forward(&m, &x, &key).unwrap();
            let g = keylock_backward(&m, &cache, &up).unwrap();

            let fd_x =
                fd_grad_tensor(&x, 1e-4, |t| Ok(keylock_forward(&m, t, &key)?.0.dot(&up)?))
                    .unwrap();
            assert!(rel_err(&g.x, &fd_x) <= 1e-5);

            let sub = |field: &str, t: &Tensor| {
                let mut m2 = m.clone();
                match field {
                    "wg" => m2.w_gamma = t.clone(),
                    "bg" => m2.b_gamma = t.clone(),
                    "wb" => m2.w_beta = t.clone(),
                    _ => m2.b_beta = t.clone(),
                }
                Ok(keylock_forward(&m2, &x, &key)?.0.dot(&up)?)
            };
            let fd_wg = fd_grad_tensor(&m.w_gamma, 1e-4, |t| sub("wg", t)).unwrap();
            let fd_bg = fd_grad_tensor(&m.b_gamma, 1e-4, |t| sub("bg", t)).unwrap();
            let fd_wb = fd_grad_tensor(&m.w_beta, 1e-4, |t| sub("wb", t)).unwrap();
            let fd_bb = fd_grad_tensor(&m.b_beta, 1e-4, |t| sub("bb", t)).unwrap();
            assert!(rel_err(&g.w_gamma, &fd_wg) <= 1e-5);
            assert!(rel_err(&g.b_gamma, &fd_bg) <= 1e-5);
            assert!(rel_err(&g.w_beta, &fd_wb) <= 1e-5);
            assert!(rel_err(&g.b_beta, &fd_bb) <= 1e-5);
        }
    }

    #[test]
    fn disabled_bias_has_zero_bias_gradient() {
        let mut m = module(8, 2, 9);
        m.use_bias = false;
        let key = Key::generate(43, 8).unwrap();
        let x = normal_tensor(&mut seeded(47), &[1, 2, 4, 4], 1.0);
        let up = normal_tensor(&mut seeded(53), &[1, 2, 4, 4], 1.0);
        let (_, cache) = keylock_forward(&m, &x, &key).unwrap();
        let g = keylock_backward(&m, &cache, &up).unwrap();
        assert_eq!(g.b_gamma.max_abs(), 0.0);
        assert_eq!(g.b_beta.max_abs(), 0.0);
        let fd_bg = fd_grad_tensor(&m.b_gamma, 1e-4, |t| {
            let mut m2 = m.clone();
            m2.b_gamma = t.clone();
            Ok(keylock_forward(&m2, &x, &key)?.0.dot(&up)?)
        })
        .unwrap();
        assert_eq!(fd_bg.max_abs(), 0.0);
    }

    #[test]
    fn lock_weight_gradient_is_rank_one_in_the_key() {
        let m = module(16, 3, 10);
        let key = Key::generate(59, 16).unwrap();
        let x = normal_tensor(&mut seeded(61), &[1, 3, 4, 4], 1.0);
        let up = normal_tensor(&mut seeded(67), &[1, 3, 4, 4], 1.0);
        let (_, cache) = keylock_forward(&m, &x, &key).unwrap();
        let g = keylock_backward(&m, &cache, &up).unwrap();

        // every column of grad_w_gamma is a scalar multiple of the key
        for j in 0..3 {
            let scale = g.b_gamma.get(j); // = Σ upstream·û for channel j
            for s in 0..16 {
                let want = key.values()[s] * scale;
                assert!((g.w_gamma.get(s * 3 + j) - want).abs() <= 1e-12);
            }
        }

        // key-only inference path: grad_w·key / (keyᵀkey) recovers the
        // effective gamma gradient (== grad of the gamma bias) exactly
        let ktk: f64 = key.values().iter().map(|v| v * v).sum();
        for j in 0..3 {
            let num: f64 = (0..16)
                .map(|s| g.w_gamma.get(s * 3 + j) * key.values()[s])
                .sum();
            assert!((num / ktk - g.b_gamma.get(j)).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_keys_give_different_coefficients() {
        let m = module(64, 4, 11);
        for trial in 0..20 {
            let a = Key::generate(1000 + trial, 64).unwrap();
            let b = Key::generate(2000 + trial, 64).unwrap();
            let (ga, ba) = m.coeffs(&a).unwrap();
            let (gb, bb) = m.coeffs(&b).unwrap();
            let dg = ga.sub(&gb).unwrap().max_abs();
            let db = ba.sub(&bb).unwrap().max_abs();
            assert!(dg > 1e-9 && db > 1e-9);
        }
    }
}
