//! Dense row-major f32 arrays and the handful of numeric ops the rest of
//! the crate needs: matmul, 2-D convolution, elementwise ops, reductions.
//!
//! Accumulations run in f64; stored values are always f32. Every public
//! operation either returns finite values or errors with
//! [`Error::NonFinite`].

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Dense numeric array: a shape and a flat row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build from a shape and flat data. Errors if the extents do not
    /// multiply out to the data length or any value is non-finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.check_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f32]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Independent standard-normal draws, advancing the stream.
    pub fn gaussian(shape: &[usize], rs: &mut RandomSource) -> Self {
        let data = (0..numel(shape)).map(|_| rs.next_gaussian()).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Independent uniform draws in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rs: &mut RandomSource) -> Self {
        let data = (0..numel(shape)).map(|_| rs.uniform_in(lo, hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn check_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{op}: element {i} is {}",
                self.data[i]
            ))),
        }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn zip_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        let t = Self {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("add")?;
        Ok(t)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        let t = Self {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("sub")?;
        Ok(t)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        let t = Self {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("mul")?;
        Ok(t)
    }

    pub fn scale(&self, s: f32) -> Result<Self> {
        let data = self.data.iter().map(|a| a * s).collect();
        let t = Self {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("scale")?;
        Ok(t)
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Result<Self> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        let t = Self {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("map")?;
        Ok(t)
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Population standard deviation.
    pub fn std(&self) -> f32 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        var.sqrt() as f32
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// Matrix product of `self [m x k]` and `other [k x n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "matmul lhs must be 2-D, got {:?}",
                    self.shape
                )))
            }
        };
        let (k2, n) = match other.shape[..] {
            [k2, n] => (k2, n),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "matmul rhs must be 2-D, got {:?}",
                    other.shape
                )))
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner extents differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = 0f64;
                for (p, &a) in row.iter().enumerate() {
                    acc += a as f64 * other.data[p * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        let t = Self {
            shape: vec![m, n],
            data: out,
        };
        t.check_finite("matmul")?;
        Ok(t)
    }

    /// 2-D cross-correlation of `self [C x H x W]` with kernels
    /// `[F x C x Kh x Kw]`, producing `[F x H' x W']` where
    /// `H' = (H + 2*pad - Kh)/stride + 1`.
    pub fn conv2d(&self, kernel: &Self, stride: usize, pad: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidStride(stride));
        }
        let (c, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d input must be C x H x W, got {:?}",
                    self.shape
                )))
            }
        };
        let (f, kc, kh, kw) = match kernel.shape[..] {
            [f, kc, kh, kw] => (f, kc, kh, kw),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d kernel must be F x C x Kh x Kw, got {:?}",
                    kernel.shape
                )))
            }
        };
        if kc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channels differ: input {c}, kernel {kc}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; f * oh * ow];
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = self.data[(ci * h + iy as usize) * w + ix as usize];
                                let kv = kernel.data[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[(fi * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        let t = Self {
            shape: vec![f, oh, ow],
            data: out,
        };
        t.check_finite("conv2d")?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = t2(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i2.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&i2).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let z = Tensor::zeros(&[2, 3]);
        let b = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = z.matmul(&b).unwrap();
        assert_eq!(c, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_inner_mismatch_errors() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(3, 1, &[1.0, 2.0, 3.0]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_hand_case() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let mut rs = RandomSource::new(1, 0);
        let x = Tensor::gaussian(&[2, 4, 4], &mut rs);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&k, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[3, 4, 4]);
    }

    #[test]
    fn conv2d_output_extent() {
        let x = Tensor::zeros(&[1, 5, 5]);
        let k = Tensor::zeros(&[2, 1, 3, 3]);
        assert_eq!(x.conv2d(&k, 2, 1).unwrap().shape(), &[2, 3, 3]);
        assert!(matches!(x.conv2d(&k, 0, 1), Err(Error::InvalidStride(0))));
    }

    #[test]
    fn nonfinite_rejected() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        let a = Tensor::from_slice(&[f32::MAX]);
        assert!(matches!(a.mul(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reductions_match_naive_reference() {
        // Naive sequential f64 reference for sum/mean/std.
        let mut rs = RandomSource::new(7, 3);
        let x = Tensor::uniform(&[257], -2.0, 5.0, &mut rs);
        let naive_sum: f64 = x.data().iter().map(|&v| v as f64).sum();
        let naive_mean = naive_sum / x.len() as f64;
        let naive_var = x
            .data()
            .iter()
            .map(|&v| (v as f64 - naive_mean).powi(2))
            .sum::<f64>()
            / x.len() as f64;
        let rel = |a: f32, b: f64| ((a as f64 - b) / b.abs().max(1e-12)).abs();
        assert!(rel(x.sum(), naive_sum) <= 1e-6);
        assert!(rel(x.mean(), naive_mean) <= 1e-6);
        assert!(rel(x.std(), naive_var.sqrt()) <= 1e-6);
    }

    #[test]
    fn gaussian_tensor_deterministic() {
        let a = Tensor::gaussian(&[64], &mut RandomSource::new(11, 2));
        let b = Tensor::gaussian(&[64], &mut RandomSource::new(11, 2));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn matmul_with_identity_is_exact(
            rows in 1usize..6, cols in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rs = RandomSource::new(seed, 0);
            let a = Tensor::uniform(&[rows, cols], -3.0, 3.0, &mut rs);
            let mut eye = Tensor::zeros(&[cols, cols]);
            for i in 0..cols {
                eye.data_mut()[i * cols + i] = 1.0;
            }
            prop_assert_eq!(a.matmul(&eye).unwrap(), a);
        }

        #[test]
        fn conv_identity_kernel_is_identity(
            c in 1usize..3, h in 1usize..6, w in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut rs = RandomSource::new(seed, 1);
            let x = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rs);
            // One kernel per channel selecting that channel.
            let mut k = Tensor::zeros(&[c, c, 1, 1]);
            for i in 0..c {
                k.data_mut()[i * c + i] = 1.0;
            }
            prop_assert_eq!(x.conv2d(&k, 1, 0).unwrap(), x);
        }
    }
}
