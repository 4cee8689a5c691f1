//! Dense row-major `f64` tensors.
//!
//! Storage is a flat `Vec<f64>` with no strides or views. Two-dimensional
//! helpers (`rows`, `cols`, `matmul`, slicing by rows/columns) cover what the
//! transformer and the pruning code need.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite nonnegative std");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; meaningful for scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn expect_2d(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("{what} needs a matrix, got shape {s:?}"))),
        }
    }

    /// Row count of a matrix (panics on non-2D tensors).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + t * inner];
                }
                softmax_in_place(&mut buf);
                for (t, b) in buf.iter().enumerate() {
                    out[base + t * inner] = *b;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Keeps the listed columns of a matrix, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Result<Tensor> {
        let (r, c) = self.expect_2d("select_columns")?;
        if let Some(&bad) = keep.iter().find(|&&j| j >= c) {
            return Err(Error::Shape(format!("column {bad} out of range for {r}x{c}")));
        }
        let mut out = Vec::with_capacity(r * keep.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            out.extend(keep.iter().map(|&j| row[j]));
        }
        Tensor::new(vec![r, keep.len()], out)
    }

    /// Keeps the listed rows of a matrix, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Result<Tensor> {
        let (r, c) = self.expect_2d("select_rows")?;
        if let Some(&bad) = keep.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row {bad} out of range for {r}x{c}")));
        }
        let mut out = Vec::with_capacity(keep.len() * c);
        for &i in keep {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![keep.len(), c], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign of {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Stable softmax of a slice, in place.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[m×n] · b[k×n]ᵀ`, giving `m×k`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            out[i * k + j] += dot(a_row, b_row);
        }
    }
}

/// `out += a[m×k]ᵀ · b[m×n]`, giving `k×n`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let api = a[i * k + p];
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut s = 0.0;
            for p in 0..k {
                s += a.get2(i, p) * b.get2(p, j);
            }
            s
        })
    }

    #[test]
    fn identity_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut nt = vec![0.0; 20];
        matmul_nt_into(a.data(), b.data(), &mut nt, 5, 3, 4);
        let want = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(Tensor::new(vec![5, 4], nt).unwrap().max_abs_diff(&want) < 1e-12);

        let c = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut tn = vec![0.0; 12];
        matmul_tn_into(a.data(), c.data(), &mut tn, 5, 3, 4);
        let want = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(Tensor::new(vec![3, 4], tn).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::new(vec![3], vec![0.0; 3]).unwrap().softmax(0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap().softmax(0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);

        // exp(k) / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let want: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        let s = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().softmax(0).unwrap();
        for (g, w) in s.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
        for (g, w) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((g - w).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_over_leading_axis() {
        let t = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.get2(0, 1) - 0.5).abs() < 1e-15);
        assert!((s.get2(0, 0) + s.get2(1, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn select_rows_and_columns() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let c = t.select_columns(&[0, 2]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 6.0]);
        let r = t.select_rows(&[1]).unwrap();
        assert_eq!(r.data(), &[4.0, 5.0, 6.0]);
        assert!(t.select_columns(&[3]).is_err());
        let empty = t.select_columns(&[]).unwrap();
        assert_eq!(empty.shape(), &[2, 0]);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(
                rows in 1usize..6,
                cols in 1usize..9,
                seed in any::<u64>(),
                scale in 0.01f64..200.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = Tensor::randn(&[rows, cols], scale, &mut rng);
                let s = t.softmax(1).unwrap();
                for i in 0..rows {
                    let total: f64 = s.row(i).iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }
}
