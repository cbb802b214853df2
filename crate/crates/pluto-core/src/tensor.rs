//! Dense row-major tensors and the numeric kernels the rest of the crate is
//! built from.
//!
//! All in-memory computation is 64-bit; serialized payloads are quantized to
//! 32-bit floats by the container format in [`crate::pet`].

use crate::error::{PlutoError, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense tensor of `f64` values.
///
/// Invariant: `data.len() == shape.iter().product()`. Constructors enforce it;
/// `data_mut` trusts the caller not to change the length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(PlutoError::InvalidArgument(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expect
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(PlutoError::InvalidArgument(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Interpret as a 2-D matrix, returning (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(PlutoError::InvalidArgument(format!(
                "expected rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[r * cols + c]
    }

    /// View a vector [n] as a 1×n matrix (copies; tensors are small here).
    pub fn to_row_matrix(&self) -> Tensor {
        Tensor {
            shape: vec![1, self.numel()],
            data: self.data.clone(),
        }
    }

    /// Flatten to a vector [n].
    pub fn to_vector(&self) -> Tensor {
        Tensor {
            shape: vec![self.numel()],
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(PlutoError::shapes("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(PlutoError::shapes("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(vec![c, r], out)
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, a) = self.dims2()?;
        let (a2, b) = other.dims2()?;
        if a != a2 {
            return Err(PlutoError::shapes("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; n * b];
        for i in 0..n {
            for k in 0..a {
                let x = self.data[i * a + k];
                if x == 0.0 {
                    continue;
                }
                let row = &other.data[k * b..(k + 1) * b];
                let dst = &mut out[i * b..(i + 1) * b];
                for j in 0..b {
                    dst[j] += x * row[j];
                }
            }
        }
        Tensor::from_vec(vec![n, b], out)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        // ties resolve to the smallest index because only strict > replaces
        best
    }
}

/// `x @ W (+ bias)` with `x: n×a`, `W: a×b`, optional row-broadcast `bias: b`.
pub fn apply_linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    if let Some(b) = bias {
        let (n, cols) = out.dims2()?;
        if b.numel() != cols {
            return Err(PlutoError::shapes("apply_linear bias", out.shape(), b.shape()));
        }
        let bd = b.data();
        let od = out.data_mut();
        for i in 0..n {
            for j in 0..cols {
                od[i * cols + j] += bd[j];
            }
        }
    }
    Ok(out)
}

/// Elementwise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Stable softmax over a probability-vector candidate. Requires n >= 1.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    if z.numel() == 0 {
        return Err(PlutoError::EmptyInput("softmax"));
    }
    let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Tensor {
        shape: z.shape().to_vec(),
        data: exps.into_iter().map(|e| e / sum).collect(),
    })
}

/// LayerNorm over a length-d vector with learnable affine (gamma, beta).
///
/// Uses the population (biased) variance over the d entries.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.numel();
    if d == 0 {
        return Err(PlutoError::EmptyInput("layer_norm"));
    }
    if gamma.numel() != d || beta.numel() != d {
        return Err(PlutoError::shapes("layer_norm affine", x.shape(), gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(PlutoError::InvalidArgument(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let mean = x.data().iter().sum::<f64>() / d as f64;
    let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + eps).sqrt();
    let data = x
        .data()
        .iter()
        .zip(gamma.data())
        .zip(beta.data())
        .map(|((&v, &g), &b)| g * (v - mean) * inv_std + b)
        .collect();
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data,
    })
}

/// Columnwise maximum over an e×d matrix, producing a length-d vector.
pub fn max_pool_rows(x: &Tensor) -> Result<Tensor> {
    let (e, d) = x.dims2()?;
    if e == 0 {
        return Err(PlutoError::EmptyInput("max_pool_rows"));
    }
    let mut out = x.data()[..d].to_vec();
    for i in 1..e {
        for j in 0..d {
            let v = x.at2(i, j);
            if v > out[j] {
                out[j] = v;
            }
        }
    }
    Ok(Tensor::vector(out))
}

/// Shannon entropy of a probability vector, with 0 * ln 0 := 0.
///
/// Rejects negative entries and vectors whose mass is not within 1e-6 of 1.
pub fn shannon_entropy(p: &Tensor) -> Result<f64> {
    if p.numel() == 0 {
        return Err(PlutoError::EmptyInput("shannon_entropy"));
    }
    let mut sum = 0.0;
    for &v in p.data() {
        if v < 0.0 {
            return Err(PlutoError::NegativeProbability { value: v });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(PlutoError::NotNormalized { sum });
    }
    Ok(p.data()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

/// argmax with smallest-index tie-break over a slice.
pub fn argmax_slice(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn apply_linear_identity() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = apply_linear(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn apply_linear_dot_product() {
        let x = t(&[1, 2], &[1.0, 1.0]);
        let w = t(&[2, 1], &[2.0, 3.0]);
        let y = apply_linear(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn apply_linear_zero_input_passes_bias() {
        let x = t(&[1, 2], &[0.0, 0.0]);
        let w = t(&[2, 1], &[4.0, -1.0]);
        let b = Tensor::vector(vec![7.0]);
        let y = apply_linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn apply_linear_shape_mismatch_names_shapes() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let w = t(&[2, 1], &[1.0, 1.0]);
        let err = apply_linear(&x, &w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::vector(vec![0.5, 3.0]);
        assert_eq!(relu(&pos).data(), pos.data());
        let neg = Tensor::vector(vec![-0.5, -3.0]);
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let z = Tensor::vector(vec![0.0, 0.0]);
        let s = softmax(&z).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);

        let c = Tensor::vector(vec![3.7; 4]);
        let s = softmax(&c).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let z = Tensor::vector(vec![2.0f64.ln(), 0.0]);
        let s = softmax(&z).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_errors() {
        // an empty tensor cannot be constructed through from_vec, so build the
        // degenerate case directly
        let z = Tensor {
            shape: vec![0],
            data: vec![],
        };
        assert!(softmax(&z).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let a = softmax(&z).unwrap();
        let b = softmax(&z.map(|x| x + 123.456)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let total: f64 = a.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_input() {
        let x = Tensor::vector(vec![5.0; 4]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_closed_form() {
        let x = Tensor::vector(vec![2.0, 4.0, 6.0, 8.0]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        let s5 = 5.0f64.sqrt();
        let expect = [-3.0 / s5, -1.0 / s5, 1.0 / s5, 3.0 / s5];
        for (v, e) in y.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
    }

    #[test]
    fn layer_norm_affine_dominates() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::zeros(&[3]);
        let b = Tensor::vector(vec![4.0, 5.0, 6.0]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn layer_norm_normalizes_nonconstant_input() {
        let x = Tensor::vector(vec![0.3, -1.0, 2.0, 0.7, -0.4]);
        let g = Tensor::full(&[5], 1.0);
        let b = Tensor::zeros(&[5]);
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        let mean = y.data().iter().sum::<f64>() / 5.0;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn max_pool_rows_cases() {
        let x = t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]);
        assert_eq!(max_pool_rows(&x).unwrap().data(), &[3.0, 5.0]);

        let single = t(&[1, 3], &[1.0, 2.0, 3.0]);
        assert_eq!(max_pool_rows(&single).unwrap().data(), &[1.0, 2.0, 3.0]);

        let equal = t(&[3, 2], &[4.0, 7.0, 4.0, 7.0, 4.0, 7.0]);
        assert_eq!(max_pool_rows(&equal).unwrap().data(), &[4.0, 7.0]);
    }

    #[test]
    fn entropy_cases() {
        let onehot = Tensor::vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(shannon_entropy(&onehot).unwrap(), 0.0);

        let uniform = Tensor::full(&[4], 0.25);
        assert!((shannon_entropy(&uniform).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let half = Tensor::vector(vec![0.5, 0.5]);
        assert!((shannon_entropy(&half).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_bad_input() {
        let neg = Tensor::vector(vec![-0.1, 1.1]);
        assert!(matches!(
            shannon_entropy(&neg),
            Err(PlutoError::NegativeProbability { .. })
        ));
        let unnorm = Tensor::vector(vec![0.4, 0.4]);
        assert!(matches!(
            shannon_entropy(&unnorm),
            Err(PlutoError::NotNormalized { .. })
        ));
    }

    #[test]
    fn entropy_max_at_uniform() {
        let k = 6;
        let uniform = Tensor::full(&[k], 1.0 / k as f64);
        let h_uniform = shannon_entropy(&uniform).unwrap();
        assert!((h_uniform - (k as f64).ln()).abs() < 1e-12);
        // perturbed-uniform is strictly below ln K
        let mut p = vec![1.0 / k as f64; k];
        p[0] += 0.01;
        p[1] -= 0.01;
        let h = shannon_entropy(&Tensor::vector(p)).unwrap();
        assert!(h < h_uniform);
    }

    #[test]
    fn matmul_transpose_roundtrip() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let xt = x.transpose().unwrap();
        assert_eq!(xt.shape(), &[3, 2]);
        assert_eq!(xt.at2(0, 1), 4.0);
        let back = xt.transpose().unwrap();
        assert_eq!(back, x);
    }
}
