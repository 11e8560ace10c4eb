//! Dense row-major `f64` tensors, the seeded random source, and the handful of
//! numerical kernels every other module builds on.
//!
//! Randomness is pinned to ChaCha8 (`rand_chacha`), which produces the same
//! stream on every platform for a given 64-bit seed. Sub-streams are derived
//! by hashing a parent seed together with a text label (SHA-256, first eight
//! bytes little-endian), so independent consumers never share a stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{config_err, shape_err, FameError, Result};

/// Norm below which a vector is treated as zero by [`cosine`] and [`normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FameError::Numeric(format!(
                "non-finite value {} at flat index {}",
                data[pos], pos
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels whose outputs are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(shape_err!("expected a matrix, got shape {:?}", other)),
        }
    }

    /// Row `i` of a matrix. Panics when out of range or not rank 2.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &dim)| {
                assert!(i < dim, "index {i} out of bounds for dim {dim}");
                acc * dim + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "elementwise op on {:?} and {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.data.iter().fold(0.0, |m, v| m.max(v.abs())))
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    /// Returns an error naming `what` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(FameError::Numeric(format!(
                "{what}: non-finite value at flat index {p}"
            ))),
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul inner dims {} vs {}", k, k2));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `a · bᵀ` without materializing the transpose (the `Q Kᵀ` pattern).
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (m, k2) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("a·bᵀ inner dims {} vs {}", k, k2));
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            out.push(dot(arow, b.row(j)));
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    m.ensure_finite("softmax input")?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = m.row(i);
        let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - peak).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Unit vector in the direction of `v`; the zero vector maps to itself.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n < NORM_EPS {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

/// Cosine similarity, clamped to `[-1, 1]`. Returns 0 when either vector has
/// norm below [`NORM_EPS`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(shape_err!("cosine of lengths {} and {}", u.len(), v.len()));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu < NORM_EPS || nv < NORM_EPS {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Derives a child seed from `seed` and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// ChaCha8 stream keyed by a 64-bit seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named consumer.
    pub fn derive(seed: u64, label: &str) -> Self {
        Self::new(derive_seed(seed, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn unit_vec(&mut self, n: usize) -> Vec<f64> {
        normalize(&self.normal_vec(n))
    }
}

/// Standard normal samples of the given shape.
pub fn seeded_normal(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() {
        return Err(config_err!("seeded_normal needs a non-empty shape"));
    }
    let n = shape.iter().product();
    Ok(Tensor::from_parts(shape.to_vec(), rng.normal_vec(n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&mat(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);

        let s = softmax_rows(&mat(&[&[1000.0, 1000.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&mat(&[&[0.0, 3f64.ln()]])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        let bad = Tensor::from_parts(vec![1, 2], vec![f64::INFINITY, 0.0]);
        assert!(matches!(softmax_rows(&bad), Err(FameError::Numeric(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let m = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        assert_eq!(
            matmul(&mat(&[&[1.0, 2.0]]), &mat(&[&[3.0], &[4.0]])).unwrap().data(),
            &[11.0]
        );
        assert_eq!(
            matmul(&Tensor::zeros(&[2, 2]), &m).unwrap(),
            Tensor::zeros(&[2, 2])
        );
        assert!(matmul(&m, &mat(&[&[1.0, 2.0, 3.0]])).is_err());
        let abt = matmul_transposed(&m, &m).unwrap();
        assert_eq!(abt, matmul(&m, &m.transpose().unwrap()).unwrap());
    }

    #[test]
    fn seeded_normal_determinism_and_moments() {
        let a = seeded_normal(&mut SeededRng::new(7), &[4]).unwrap();
        let b = seeded_normal(&mut SeededRng::new(7), &[4]).unwrap();
        let c = seeded_normal(&mut SeededRng::new(8), &[4]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        let big = seeded_normal(&mut SeededRng::new(7), &[10_000]).unwrap();
        let n = big.len() as f64;
        let mean = big.data().iter().sum::<f64>() / n;
        let var = big.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        assert!(seeded_normal(&mut SeededRng::new(7), &[]).is_err());
    }

    #[test]
    fn derived_streams_differ() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(3, "x"), derive_seed(3, "x"));
    }

    fn matrix_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in matrix_strategy()) {
            let s = softmax_rows(&m).unwrap();
            let (r, _) = s.dims2().unwrap();
            for i in 0..r {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 5),
            v in prop::collection::vec(-10.0f64..10.0, 5),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let base = cosine(&u, &v).unwrap();
            prop_assert_eq!(base, cosine(&v, &u).unwrap());
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((cosine(&su, &sv).unwrap() - base).abs() <= 1e-12);
        }
    }
}
