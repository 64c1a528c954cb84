//! Dense `f32` tensors and the handful of reductions and resampling
//! primitives the explanation pipeline needs.
//!
//! Storage is row-major with the last dimension fastest. Activations are
//! laid out as (batch, channel, height, width). Reductions accumulate in
//! `f64` and round once to `f32` per output element, in a fixed order, so
//! results are bit-reproducible.

use std::fmt;

use crate::error::{Error, Result};

/// Dimension sizes of a tensor. Always rank ≥ 1 with every size ≥ 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("rank must be at least 1"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("dimension {pos} of {dims:?} is zero")));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("×"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape} holds {} values but {} were given",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn filled(dims: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor with the same shape as `self` from new data.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub(crate) fn from_shape(shape: Shape, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(dims, self.data)
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::shape(format!(
                "{what}: expected rank {rank}, got rank {} (shape {})",
                self.rank(),
                self.shape
            )));
        }
        Ok(())
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        self.expect_rank(4, "nchw")?;
        let d = self.dims();
        Ok((d[0], d[1], d[2], d[3]))
    }

    /// `(h, w)` of a rank-2 map.
    pub fn hw(&self) -> Result<(usize, usize)> {
        self.expect_rank(2, "spatial map")?;
        Ok((self.dims()[0], self.dims()[1]))
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.with_data(self.data.iter().map(|v| v * factor).collect())
    }
}

/// Global average pool over height and width: `(b, c, h, w) -> (b, c)`.
pub fn spatial_mean(t: &Tensor) -> Result<Tensor> {
    t.expect_rank(4, "spatial_mean")?;
    let (n, c, h, w) = t.nchw()?;
    let plane = h * w;
    let out = t
        .data()
        .chunks_exact(plane)
        .map(|chunk| {
            let sum: f64 = chunk.iter().map(|&v| v as f64).sum();
            (sum / plane as f64) as f32
        })
        .collect();
    Tensor::new([n, c], out)
}

/// Affine rescale of a map into `[0, 1]`. A constant map becomes all zeros.
pub fn minmax_normalize(m: &Tensor) -> Tensor {
    let lo = m.min();
    let hi = m.max();
    if !(hi > lo) {
        return m.with_data(vec![0.0; m.numel()]);
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    m.with_data(m.data().iter().map(|&v| ((v as f64 - lo) / range) as f32).collect())
}

/// Bilinear resize of a rank-2 map with half-pixel centers
/// (`src = (dst + 0.5) * in / out - 0.5`, clamped to the valid range).
pub fn bilinear_resize(m: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (in_h, in_w) = m.hw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "bilinear_resize: target size {out_h}×{out_w} must be positive"
        )));
    }
    if in_h == out_h && in_w == out_w {
        return Ok(m.clone());
    }
    let ys = axis_taps(in_h, out_h);
    let xs = axis_taps(in_w, out_w);
    let src = m.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let a = src[y0 * in_w + x0] as f64;
            let b = src[y0 * in_w + x1] as f64;
            let c = src[y1 * in_w + x0] as f64;
            let d = src[y1 * in_w + x1] as f64;
            let top = a + (b - a) * fx;
            let bottom = c + (d - c) * fx;
            let v = top + (bottom - top) * fy;
            // convex combination; clamp away any rounding excursion
            let (lo, hi) = (a.min(b).min(c).min(d), a.max(b).max(c).max(d));
            out.push(v.clamp(lo, hi) as f32);
        }
    }
    Tensor::new([out_h, out_w], out)
}

/// Per output index: (lower source index, upper source index, weight of upper).
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(rows: &[&[f32]]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::new([h, w], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn shape_rejects_zero_and_empty() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new([2, 0, 3]).is_err());
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn spatial_mean_small_cases() {
        let t = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_mean(&t).unwrap().data(), &[2.5]);

        let mut data = vec![7.0; 4];
        data.extend([0.0; 4]);
        let t = Tensor::new([1, 2, 2, 2], data).unwrap();
        let m = spatial_mean(&t).unwrap();
        assert_eq!(m.dims(), &[1, 2]);
        assert_eq!(m.data(), &[7.0, 0.0]);
    }

    #[test]
    fn spatial_mean_rank_error_names_ranks() {
        let t = Tensor::zeros([2, 2]).unwrap();
        let msg = spatial_mean(&t).unwrap_err().to_string();
        assert!(msg.contains("expected rank 4"), "{msg}");
        assert!(msg.contains("got rank 2"), "{msg}");
    }

    #[test]
    fn spatial_mean_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..8 * 25).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t = Tensor::new([1, 8, 5, 5], data.clone()).unwrap();
        let got = spatial_mean(&t).unwrap();
        for c in 0..8 {
            let plane = &data[c * 25..(c + 1) * 25];
            // two-pass: mean, then a correction term from the residuals
            let first: f64 = plane.iter().map(|&v| v as f64).sum::<f64>() / 25.0;
            let corr: f64 = plane.iter().map(|&v| v as f64 - first).sum::<f64>() / 25.0;
            let oracle = (first + corr) as f32;
            let ulps = (got.data()[c].to_bits() as i64 - oracle.to_bits() as i64).abs();
            assert!(ulps <= 1, "channel {c}: {} vs {oracle}", got.data()[c]);
        }
    }

    #[test]
    fn normalize_examples() {
        let out = minmax_normalize(&map(&[&[2.0, 4.0], &[6.0, 8.0]]));
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
        let out = minmax_normalize(&map(&[&[5.0, 5.0], &[5.0, 5.0]]));
        assert_eq!(out.data(), &[0.0; 4]);
        let already = map(&[&[0.0, 1.0], &[0.5, 0.25]]);
        assert_eq!(minmax_normalize(&already), already);
    }

    #[test]
    fn resize_row_upsample() {
        let out = bilinear_resize(&map(&[&[0.0, 1.0]]), 1, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Tensor::filled([3, 5], 0.7).unwrap();
        let out = bilinear_resize(&c, 11, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::new([7, 9], (0..63).map(|_| rng.gen()).collect()).unwrap();
        assert_eq!(bilinear_resize(&m, 7, 9).unwrap(), m);
    }

    #[test]
    fn resize_rejects_empty_target() {
        assert!(bilinear_resize(&Tensor::zeros([2, 2]).unwrap(), 0, 3).is_err());
    }

    fn arb_map() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(-50.0f32..50.0, h * w).prop_map(move |d| Tensor::new([h, w], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn resize_stays_within_bounds(m in arb_map(), oh in 1usize..12, ow in 1usize..12) {
            let out = bilinear_resize(&m, oh, ow).unwrap();
            let (lo, hi) = (m.min(), m.max());
            prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn normalize_spans_unit_interval(m in arb_map()) {
            let out = minmax_normalize(&m);
            if m.max() > m.min() {
                prop_assert_eq!(out.min(), 0.0);
                prop_assert_eq!(out.max(), 1.0);
                prop_assert_eq!(minmax_normalize(&out), out);
            } else {
                prop_assert!(out.data().iter().all(|&v| v == 0.0));
            }
        }

        #[test]
        fn spatial_mean_of_constant_channels_is_exact(
            vals in proptest::collection::vec(-1e3f32..1e3, 1..5),
            h in 1usize..7,
            w in 1usize..7,
        ) {
            let data: Vec<f32> = vals.iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect();
            let t = Tensor::new([1, vals.len(), h, w], data).unwrap();
            let m = spatial_mean(&t).unwrap();
            prop_assert_eq!(m.data(), &vals[..]);
            prop_assert_eq!(spatial_mean(&t).unwrap(), m);
        }
    }
}
