//! Dense row-major tensors and seeded random sampling.
//!
//! Every numeric value in the toolkit — signals, windows, layer parameters,
//! gradients, optimizer moments — lives in a [`Tensor`]: a flat `Vec<f64>`
//! plus an explicit shape. Binary ops require exactly matching shapes;
//! nothing broadcasts, so every shape coercion is visible at the call site.
//!
//! [`RngState`] is a SplitMix64 generator with a Box-Muller normal sampler.
//! The whole toolkit draws from it, so any run is a pure function of
//! (config, data, seed).

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// Invariants: `product(shape) == data.len()` and every element is finite.
/// The public constructor rejects NaN/Inf; op outputs are re-checked under
/// `debug_assertions`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        if expect != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "tensor data contains non-finite value {bad}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op results; skips the finite scan in
    /// release builds.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let t = Tensor { shape, data };
        t.debug_check_finite("from_raw");
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![value; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterpret the flat data under a new shape of the same length.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::dim("Tensor::reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Standard matrix product of a 2-D `m×k` by a 2-D `k×n` tensor.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::dim("matmul (rank-2 required)", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in row.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("mul", other, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    fn zip_with(&self, op: &str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub(crate) fn debug_check_finite(&self, op: &str) {
        if cfg!(debug_assertions) {
            if let Some((i, v)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                panic!("non-finite value {v} at flat index {i} after {op}");
            }
        }
    }
}

/// Deterministic SplitMix64 generator with a cached-spare Box-Muller
/// normal sampler. The same seed yields the same stream everywhere.
#[derive(Debug, Clone)]
pub struct RngState {
    state: u64,
    spare_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent stream for concurrent use: seed XOR stream-index.
    pub fn stream(seed: u64, index: u64) -> Self {
        RngState::new(seed ^ index)
    }

    /// SplitMix64 step.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in the half-open interval (0, 1].
    pub fn next_f64(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw (Box-Muller, pair cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Tensor of i.i.d. `normal(mean, stddev)` draws.
    pub fn sample_normal(&mut self, shape: Vec<usize>, mean: f64, stddev: f64) -> Result<Tensor> {
        if stddev < 0.0 {
            return Err(Error::Argument(format!("negative stddev {stddev}")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + stddev * self.normal()).collect();
        Tensor::new(shape, data)
    }

    /// Uniform integer in `0..n`.
    pub fn next_below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rng: &mut RngState, shape: Vec<usize>) -> Tensor {
        rng.sample_normal(shape, 0.0, 1.0).unwrap()
    }

    #[test]
    fn new_rejects_shape_data_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let a = Tensor::new(vec![3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&eye).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    /// Brute-force triple-loop oracle for the matrix product.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let mut rng = RngState::new(7);
        let a = random_tensor(&mut rng, vec![7, 5]);
        let b = random_tensor(&mut rng, vec![5, 4]);
        let c = a.matmul(&b).unwrap();
        for (got, want) in c.data().iter().zip(matmul_oracle(&a, &b)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_associative() {
        let mut rng = RngState::new(11);
        for _ in 0..5 {
            let a = random_tensor(&mut rng, vec![8, 8]);
            let b = random_tensor(&mut rng, vec![8, 8]);
            let c = random_tensor(&mut rng, vec![8, 8]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                assert!((l - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = RngState::new(3);
        let a = random_tensor(&mut rng, vec![4, 3]);
        let zeros = Tensor::zeros(vec![4, 3]);
        let ones = Tensor::filled(vec![4, 3], 1.0);
        assert_eq!(a.add(&zeros).unwrap(), a);
        assert_eq!(a.mul(&ones).unwrap(), a);
    }

    #[test]
    fn map_square() {
        let a = Tensor::from_vec(vec![-2.0, 3.0]).unwrap();
        assert_eq!(a.map(|v| v * v).data(), &[4.0, 9.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![4]);
        assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ops_leave_inputs_unmodified() {
        let mut rng = RngState::new(5);
        let a = random_tensor(&mut rng, vec![3, 3]);
        let b = random_tensor(&mut rng, vec![3, 3]);
        let (a0, b0) = (a.clone(), b.clone());
        let _ = a.add(&b).unwrap();
        let _ = a.mul(&b).unwrap();
        let _ = a.matmul(&b).unwrap();
        let _ = a.map(|v| v + 1.0);
        assert_eq!(a, a0);
        assert_eq!(b, b0);
    }

    #[test]
    fn sample_normal_zero_stddev_is_constant() {
        let mut rng = RngState::new(1);
        let t = rng.sample_normal(vec![10], 3.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn sample_normal_rejects_negative_stddev() {
        let mut rng = RngState::new(1);
        assert!(rng.sample_normal(vec![2], 0.0, -1.0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        let ta = a.sample_normal(vec![64], 0.0, 1.0).unwrap();
        let tb = b.sample_normal(vec![64], 0.0, 1.0).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments_match_law_of_large_numbers() {
        let mut rng = RngState::new(2024);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "sample variance {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngState::new(9);
        let mut xs: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(xs, (0..100).collect::<Vec<_>>());
    }
}
