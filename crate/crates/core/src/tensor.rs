//! Dense rank-4 tensors with explicit memory layout.
//!
//! Logical indexing is always `(n, c, h, w)` no matter how the data is laid
//! out physically, so operators can be written once and stay layout-agnostic
//! in semantics. Conversion between layouts permutes the physical order and
//! never touches values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical memory layout of a rank-4 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Channel-major: one contiguous `c*h*w` block per sample.
    Nchw,
    /// Channel-minor: channels interleaved per pixel.
    Nhwc,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Nchw => "nchw",
            Layout::Nhwc => "nhwc",
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nchw" => Ok(Layout::Nchw),
            "nhwc" => Ok(Layout::Nhwc),
            other => Err(Error::Config(format!("unknown layout '{other}'"))),
        }
    }
}

/// Rank-4 tensor shape `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got {self}"
            )));
        }
        Ok(())
    }

    /// Physical strides `(n, c, h, w)` for the given layout.
    pub fn strides(&self, layout: Layout) -> (usize, usize, usize, usize) {
        match layout {
            Layout::Nchw => (self.c * self.h * self.w, self.h * self.w, self.w, 1),
            Layout::Nhwc => (self.h * self.w * self.c, 1, self.w * self.c, self.c),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor of f32 values.
///
/// Immutable after construction; cheap to share across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    layout: Layout,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape, layout: Layout) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor {
            shape,
            layout,
            data: vec![0.0; shape.count()],
        })
    }

    pub fn from_vec(shape: Shape, layout: Layout, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.count() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor {
            shape,
            layout,
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat offset of logical element `(n, c, y, x)` for this tensor's layout.
    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let (sn, sc, sh, sw) = self.shape.strides(self.layout);
        n * sn + c * sc + y * sh + x * sw
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// New tensor with identical logical contents in the target layout.
    pub fn to_layout(&self, target: Layout) -> Tensor {
        layout_convert(self, target)
    }

    /// Copy of channels `lo..hi` (logical), preserving layout.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Tensor> {
        if lo >= hi || hi > self.shape.c {
            return Err(Error::InvalidShape(format!(
                "channel slice {lo}..{hi} out of range for {} channels",
                self.shape.c
            )));
        }
        let out_shape = Shape::new(self.shape.n, hi - lo, self.shape.h, self.shape.w);
        let mut out = Tensor::zeros(out_shape, self.layout)?;
        for n in 0..out_shape.n {
            for c in 0..out_shape.c {
                for y in 0..out_shape.h {
                    for x in 0..out_shape.w {
                        let v = self.at(n, lo + c, y, x);
                        let i = out.index(n, c, y, x);
                        out.data[i] = v;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// splitmix64 pseudo-random stream.
///
/// The same seed yields the same bit stream on every platform, which makes
/// seeded weights and inputs reproducible in CI without shipping files.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 24 bits of mantissa, exact in f32.
    pub fn next_unit(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) / 16_777_216.0
    }

    /// Uniform in `[-0.5, 0.5)`.
    pub fn next_centered(&mut self) -> f32 {
        self.next_unit() - 0.5
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + self.next_unit() * (hi - lo)
    }

    /// Independent child stream, for deterministic per-tensor seeding.
    pub fn fork(&mut self) -> SplitMix64 {
        SplitMix64::new(self.next_u64())
    }
}

/// Deterministic tensor with values uniform in `[-0.5, 0.5)`.
///
/// The i-th physical element takes the i-th value of the stream, so the
/// requested layout decides which logical position each value lands in.
pub fn tensor_from_seed(shape: Shape, layout: Layout, seed: u64) -> Result<Tensor> {
    let mut t = Tensor::zeros(shape, layout)?;
    let mut rng = SplitMix64::new(seed);
    for v in t.data.iter_mut() {
        *v = rng.next_centered();
    }
    Ok(t)
}

/// Permute the physical order to `target`; logical contents are unchanged.
pub fn layout_convert(t: &Tensor, target: Layout) -> Tensor {
    if t.layout == target {
        return t.clone();
    }
    let mut out = Tensor {
        shape: t.shape,
        layout: target,
        data: vec![0.0; t.data.len()],
    };
    let Shape { n, c, h, w } = t.shape;
    // Walk in target order so writes are sequential.
    match target {
        Layout::Nchw => {
            let mut i = 0;
            for nn in 0..n {
                for cc in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            out.data[i] = t.at(nn, cc, yy, xx);
                            i += 1;
                        }
                    }
                }
            }
        }
        Layout::Nhwc => {
            let mut i = 0;
            for nn in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        for cc in 0..c {
                            out.data[i] = t.at(nn, cc, yy, xx);
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Largest `|a - b|` over all logical positions. Layouts may differ; the
/// comparison is logical. Zero iff the tensors are logically equal.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare {} against {}",
            a.shape, b.shape
        )));
    }
    if a.layout == b.layout {
        let mut max = 0.0f32;
        for (&x, &y) in a.data.iter().zip(b.data.iter()) {
            let d = (x - y).abs();
            if d > max {
                max = d;
            }
        }
        return Ok(max);
    }
    let b = layout_convert(b, a.layout);
    max_abs_diff(a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_seed_is_deterministic() {
        let shape = Shape::new(1, 1, 1, 1);
        let a = tensor_from_seed(shape, Layout::Nchw, 0).unwrap();
        let b = tensor_from_seed(shape, Layout::Nchw, 0).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data().len(), 1);
    }

    #[test]
    fn from_seed_layout_permutes_same_values() {
        let shape = Shape::new(1, 2, 3, 3);
        let a = tensor_from_seed(shape, Layout::Nchw, 7).unwrap();
        let b = layout_convert(&a, Layout::Nhwc);
        let mut va = a.data().to_vec();
        let mut vb = b.data().to_vec();
        va.sort_by(f32::total_cmp);
        vb.sort_by(f32::total_cmp);
        assert_eq!(va, vb);
    }

    #[test]
    fn from_seed_mean_near_zero() {
        // Independent scalar-loop oracle for the mean.
        let t = tensor_from_seed(Shape::new(2, 16, 8, 8), Layout::Nchw, 42).unwrap();
        let mut sum = 0.0f64;
        for &v in t.data() {
            sum += v as f64;
        }
        let mean = sum / t.data().len() as f64;
        assert!(mean.abs() <= 0.05, "mean {mean} out of band");
    }

    #[test]
    fn from_seed_rejects_zero_dim() {
        let err = tensor_from_seed(Shape::new(1, 0, 2, 2), Layout::Nchw, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)));
    }

    #[test]
    fn layout_convert_matches_index_remap() {
        // NCHW (1,2,2,2) with data 0..7 lands as [0,4,1,5,2,6,3,7] in NHWC.
        let t = Tensor::from_vec(
            Shape::new(1, 2, 2, 2),
            Layout::Nchw,
            (0..8).map(|i| i as f32).collect(),
        )
        .unwrap();
        let u = layout_convert(&t, Layout::Nhwc);
        assert_eq!(u.data(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
    }

    #[test]
    fn single_channel_layouts_share_flat_order() {
        let t = tensor_from_seed(Shape::new(1, 1, 5, 4), Layout::Nchw, 3).unwrap();
        let u = layout_convert(&t, Layout::Nhwc);
        assert_eq!(t.data(), u.data());
    }

    #[test]
    fn convert_to_same_layout_is_identity() {
        let t = tensor_from_seed(Shape::new(2, 3, 4, 5), Layout::Nhwc, 11).unwrap();
        assert_eq!(layout_convert(&t, Layout::Nhwc), t);
    }

    #[test]
    fn max_abs_diff_basics() {
        let a = tensor_from_seed(Shape::new(1, 3, 4, 4), Layout::Nchw, 1).unwrap();
        assert_eq!(max_abs_diff(&a, &a).unwrap(), 0.0);

        let shifted =
            Tensor::from_vec(a.shape(), a.layout(), a.data().iter().map(|v| v + 0.5).collect())
                .unwrap();
        assert_eq!(max_abs_diff(&a, &shifted).unwrap(), 0.5);

        // Layout round trip compares equal logically.
        let b = layout_convert(&layout_convert(&a, Layout::Nhwc), Layout::Nchw);
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn max_abs_diff_rejects_shape_mismatch() {
        let a = tensor_from_seed(Shape::new(1, 2, 2, 2), Layout::Nchw, 1).unwrap();
        let b = tensor_from_seed(Shape::new(1, 3, 2, 2), Layout::Nchw, 1).unwrap();
        assert!(matches!(
            max_abs_diff(&a, &b).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    fn small_shape() -> impl Strategy<Value = Shape> {
        (1usize..3, 1usize..5, 1usize..5, 1usize..5)
            .prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
    }

    proptest! {
        #[test]
        fn layout_round_trip_is_bitwise_exact(shape in small_shape(), seed in any::<u64>()) {
            let t = tensor_from_seed(shape, Layout::Nchw, seed).unwrap();
            let back = layout_convert(&layout_convert(&t, Layout::Nhwc), Layout::Nchw);
            prop_assert_eq!(t.data(), back.data());
        }

        #[test]
        fn max_abs_diff_is_symmetric_and_triangular(
            shape in small_shape(),
            sa in any::<u64>(),
            sb in any::<u64>(),
            sc in any::<u64>(),
        ) {
            let a = tensor_from_seed(shape, Layout::Nchw, sa).unwrap();
            let b = tensor_from_seed(shape, Layout::Nchw, sb).unwrap();
            let c = tensor_from_seed(shape, Layout::Nchw, sc).unwrap();
            let ab = max_abs_diff(&a, &b).unwrap();
            let ba = max_abs_diff(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let ac = max_abs_diff(&a, &c).unwrap();
            let cb = max_abs_diff(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-6);
        }
    }
}
