//! Reference CPU operators: convolution (dense, grouped, depthwise),
//! inference-mode batch norm, ReLU, elementwise add, channel concatenation,
//! global average pooling, hard-sigmoid and the SE block.
//!
//! All operators are pure functions of immutable inputs and preserve the
//! input's physical layout. Convolution accumulates in f64 and rounds once
//! per output element, which keeps train/deploy fusion differences down to a
//! few ulps per layer.

use crate::error::{Error, Result};
use crate::tensor::{Shape, SplitMix64, Tensor};

/// Learnable parameters of a 2-D convolution.
///
/// `weight` is flat in `(c_out, c_in/groups, k_h, k_w)` order; this is not a
/// `Tensor` because kernels have no layout of their own.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dParams {
    /// Zero-initialized convolution with the given geometry.
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let p = Conv2dParams {
            c_in,
            c_out,
            k_h: k,
            k_w: k,
            weight: vec![0.0; c_out * (c_in / groups.max(1)) * k * k],
            bias: if with_bias { Some(vec![0.0; c_out]) } else { None },
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    /// Seeded initialization: fan-in scaled uniform weights, the usual choice
    /// that keeps activations O(1) through deep stacks.
    pub fn seeded(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut p = Self::new(c_in, c_out, k, stride, padding, groups, with_bias)?;
        let fan_in = ((c_in / groups) * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        for w in p.weight.iter_mut() {
            *w = rng.next_in(-bound, bound);
        }
        if let Some(b) = p.bias.as_mut() {
            let bb = 1.0 / fan_in.sqrt();
            for v in b.iter_mut() {
                *v = rng.next_in(-bb, bb);
            }
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.k_h == 0 || self.k_w == 0 {
            return Err(Error::Config("conv dimensions must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        if self.groups == 0 || self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        let expect = self.c_out * (self.c_in / self.groups) * self.k_h * self.k_w;
        if self.weight.len() != expect {
            return Err(Error::Config(format!(
                "weight length {} does not match (c_out={}, c_in/groups={}, k={}x{})",
                self.weight.len(),
                self.c_out,
                self.c_in / self.groups,
                self.k_h,
                self.k_w
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.c_out {
                return Err(Error::Config(format!(
                    "bias length {} != c_out {}",
                    b.len(),
                    self.c_out
                )));
            }
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out
    }

    /// Output spatial dims for an input of `(h, w)`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h + 2 * self.padding).checked_sub(self.k_h).map(|d| d / self.stride + 1);
        let ow = (w + 2 * self.padding).checked_sub(self.k_w).map(|d| d / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::ShapeMismatch(format!(
                "conv {}x{} stride {} pad {} produces empty output for input {}x{}",
                self.k_h, self.k_w, self.stride, self.padding, h, w
            ))),
        }
    }

    pub fn num_params(&self) -> u64 {
        self.weight.len() as u64 + self.bias.as_ref().map_or(0, |b| b.len() as u64)
    }

    /// Multiply-accumulate count per sample for the given output size.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.c_out * out_h * out_w * (self.c_in / self.groups) * self.k_h * self.k_w) as u64
    }
}

/// Inference-mode batch normalization parameters over `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn new(
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        eps: f32,
    ) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::Config(format!(
                "batch norm vectors must share one length, got {}/{}/{}/{}",
                gamma.len(),
                beta.len(),
                running_mean.len(),
                running_var.len()
            )));
        }
        if c == 0 {
            return Err(Error::Config("batch norm needs at least one channel".into()));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Config(format!("batch norm eps must be >= 0, got {eps}")));
        }
        for (j, &v) in running_var.iter().enumerate() {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!("running_var[{j}] = {v} is negative")));
            }
            if v + eps <= 0.0 {
                return Err(Error::Config(format!(
                    "running_var[{j}] + eps is not positive"
                )));
            }
        }
        Ok(BatchNormParams {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        })
    }

    /// Statistics that make the layer an exact identity.
    pub fn identity(c: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: 0.0,
        }
    }

    /// Seeded statistics with per-channel scale near 1, so folding is
    /// exercised non-trivially while activations stay O(1).
    pub fn seeded(c: usize, rng: &mut SplitMix64) -> Self {
        Self::seeded_with_gain(c, 1.0, rng)
    }

    /// Seeded statistics with per-channel scale near `gain`. Branch norms use
    /// a gain well below 1 so that branch sums and residual adds do not grow
    /// activations across a deep stack.
    pub fn seeded_with_gain(c: usize, gain: f32, rng: &mut SplitMix64) -> Self {
        let mut gamma = vec![0.0; c];
        let mut beta = vec![0.0; c];
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for j in 0..c {
            gamma[j] = rng.next_in(0.8, 1.2) * gain;
            beta[j] = rng.next_in(-0.1, 0.1);
            mean[j] = rng.next_in(-0.1, 0.1);
            var[j] = rng.next_in(0.8, 1.2);
        }
        BatchNormParams {
            gamma,
            beta,
            running_mean: mean,
            running_var: var,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn num_params(&self) -> u64 {
        // gamma and beta; running statistics are buffers, not parameters.
        2 * self.gamma.len() as u64
    }
}

/// Squeeze-and-excitation block: two 1x1 convolutions around a global pool,
/// gated by hard-sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SEParams {
    pub reduce: Conv2dParams,
    pub expand: Conv2dParams,
}

impl SEParams {
    pub fn new(reduce: Conv2dParams, expand: Conv2dParams) -> Result<Self> {
        reduce.validate()?;
        expand.validate()?;
        if reduce.c_in != expand.c_out {
            return Err(Error::Config(format!(
                "se reduce.c_in {} must equal expand.c_out {}",
                reduce.c_in, expand.c_out
            )));
        }
        if reduce.c_out != expand.c_in {
            return Err(Error::Config(format!(
                "se reduce.c_out {} must equal expand.c_in {}",
                reduce.c_out, expand.c_in
            )));
        }
        if reduce.k_h != 1 || reduce.k_w != 1 || expand.k_h != 1 || expand.k_w != 1 {
            return Err(Error::Config("se convolutions must be 1x1".into()));
        }
        let c_red = reduce.c_out;
        if c_red < 4 || c_red % 4 != 0 {
            return Err(Error::Config(format!(
                "se reduced width {c_red} must be >= 4 and divisible by 4"
            )));
        }
        Ok(SEParams { reduce, expand })
    }

    pub fn seeded(c: usize, c_red: usize, rng: &mut SplitMix64) -> Result<Self> {
        let reduce = Conv2dParams::seeded(c, c_red, 1, 1, 0, 1, true, rng)?;
        let expand = Conv2dParams::seeded(c_red, c, 1, 1, 0, 1, true, rng)?;
        SEParams::new(reduce, expand)
    }

    pub fn channels(&self) -> usize {
        self.reduce.c_in
    }

    pub fn num_params(&self) -> u64 {
        self.reduce.num_params() + self.expand.num_params()
    }

    pub fn macs(&self) -> u64 {
        self.reduce.macs(1, 1) + self.expand.macs(1, 1)
    }
}

/// Direct cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    p.validate()?;
    let shape = x.shape();
    if shape.c != p.c_in {
        return Err(Error::Config(format!(
            "conv expects {} input channels, tensor has {}",
            p.c_in, shape.c
        )));
    }
    let (oh, ow) = p.out_hw(shape.h, shape.w)?;
    let out_shape = Shape::new(shape.n, p.c_out, oh, ow);
    let mut out = Tensor::zeros(out_shape, x.layout())?;

    let (xsn, xsc, xsh, xsw) = shape.strides(x.layout());
    let (osn, osc, osh, osw) = out_shape.strides(out.layout());
    let cipg = p.c_in / p.groups;
    let copg = p.c_out / p.groups;
    let xd = x.data();
    let od = out.data_mut();

    for n in 0..shape.n {
        for g in 0..p.groups {
            for cog in 0..copg {
                let co = g * copg + cog;
                let b = p.bias.as_ref().map_or(0.0, |b| b[co] as f64);
                let wbase = co * cipg * p.k_h * p.k_w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for cig in 0..cipg {
                            let ci = g * cipg + cig;
                            let xbase = n * xsn + ci * xsc;
                            let wrow = wbase + cig * p.k_h * p.k_w;
                            for ky in 0..p.k_h {
                                let iy = oy * p.stride + ky;
                                if iy < p.padding || iy - p.padding >= shape.h {
                                    continue;
                                }
                                let iy = iy - p.padding;
                                for kx in 0..p.k_w {
                                    let ix = ox * p.stride + kx;
                                    if ix < p.padding || ix - p.padding >= shape.w {
                                        continue;
                                    }
                                    let ix = ix - p.padding;
                                    let xv = xd[xbase + iy * xsh + ix * xsw] as f64;
                                    let wv = p.weight[wrow + ky * p.k_w + kx] as f64;
                                    acc += xv * wv;
                                }
                            }
                        }
                        od[n * osn + co * osc + oy * osh + ox * osw] = acc as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel affine transform `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batch_norm_infer(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let shape = x.shape();
    if shape.c != p.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batch norm over {} channels applied to tensor with {}",
            p.channels(),
            shape.c
        )));
    }
    let mut scale = vec![0.0f64; shape.c];
    let mut shift = vec![0.0f64; shape.c];
    for j in 0..shape.c {
        let s = p.gamma[j] as f64 / ((p.running_var[j] as f64 + p.eps as f64).sqrt());
        scale[j] = s;
        shift[j] = p.beta[j] as f64 - s * p.running_mean[j] as f64;
    }
    let mut out = Tensor::zeros(shape, x.layout())?;
    let (sn, sc, sh, sw) = shape.strides(x.layout());
    let xd = x.data();
    let od = out.data_mut();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = n * sn + c * sc;
            for y in 0..shape.h {
                for xx in 0..shape.w {
                    let i = base + y * sh + xx * sw;
                    od[i] = (xd[i] as f64 * scale[c] + shift[c]) as f32;
                }
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// `clamp((x + 3) / 6, 0, 1)` elementwise.
pub fn hard_sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = ((*v + 3.0) / 6.0).clamp(0.0, 1.0);
    }
    out
}

fn check_add_operands(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.layout() != b.layout() {
        return Err(Error::ShapeMismatch(format!(
            "add needs matching operands, got {} {} vs {} {}",
            a.shape(),
            a.layout().name(),
            b.shape(),
            b.layout().name()
        )));
    }
    Ok(())
}

pub fn add_elementwise(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_add_operands(a, b)?;
    let mut out = Tensor::zeros(a.shape(), a.layout())?;
    add_elementwise_into(a, b, &mut out)?;
    Ok(out)
}

/// Add with a caller-provided output buffer, so benchmarks can keep
/// allocation outside the timed region.
pub fn add_elementwise_into(a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    check_add_operands(a, b)?;
    if out.shape() != a.shape() || out.layout() != a.layout() {
        return Err(Error::ShapeMismatch("add output buffer mismatch".into()));
    }
    let od = out.data_mut();
    for ((&x, &y), o) in a.data().iter().zip(b.data().iter()).zip(od.iter_mut()) {
        *o = x + y;
    }
    Ok(())
}

fn check_concat_operands(a: &Tensor, b: &Tensor) -> Result<Shape> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w || a.layout() != b.layout() {
        return Err(Error::ShapeMismatch(format!(
            "concat needs matching n/h/w and layout, got {} {} vs {} {}",
            sa,
            a.layout().name(),
            sb,
            b.layout().name()
        )));
    }
    Ok(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w))
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = check_concat_operands(a, b)?;
    let mut out = Tensor::zeros(out_shape, a.layout())?;
    concat_channels_into(a, b, &mut out)?;
    Ok(out)
}

/// Concat with a caller-provided output buffer.
///
/// The copy pattern follows the physical layout: NCHW moves one contiguous
/// `c*h*w` block per sample and input, while NHWC has to interleave the two
/// channel runs at every pixel. This difference in largest-contiguous-block
/// size is exactly what the concat-vs-add benchmark probes.
pub fn concat_channels_into(a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    let out_shape = check_concat_operands(a, b)?;
    if out.shape() != out_shape || out.layout() != a.layout() {
        return Err(Error::ShapeMismatch("concat output buffer mismatch".into()));
    }
    let (sa, sb) = (a.shape(), b.shape());
    match a.layout() {
        crate::tensor::Layout::Nchw => {
            let block_a = sa.c * sa.h * sa.w;
            let block_b = sb.c * sb.h * sb.w;
            let block_o = block_a + block_b;
            let od = out.data_mut();
            for n in 0..sa.n {
                od[n * block_o..n * block_o + block_a]
                    .copy_from_slice(&a.data()[n * block_a..(n + 1) * block_a]);
                od[n * block_o + block_a..(n + 1) * block_o]
                    .copy_from_slice(&b.data()[n * block_b..(n + 1) * block_b]);
            }
        }
        crate::tensor::Layout::Nhwc => {
            let pixels = sa.h * sa.w;
            let co = sa.c + sb.c;
            let od = out.data_mut();
            for n in 0..sa.n {
                for p in 0..pixels {
                    let src_a = (n * pixels + p) * sa.c;
                    let src_b = (n * pixels + p) * sb.c;
                    let dst = (n * pixels + p) * co;
                    od[dst..dst + sa.c].copy_from_slice(&a.data()[src_a..src_a + sa.c]);
                    od[dst + sa.c..dst + co].copy_from_slice(&b.data()[src_b..src_b + sb.c]);
                }
            }
        }
    }
    Ok(())
}

/// Spatial mean per channel; output shape `(n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let mut out = Tensor::zeros(Shape::new(shape.n, shape.c, 1, 1), x.layout())
        .expect("pool output shape is valid");
    let (sn, sc, sh, sw) = shape.strides(x.layout());
    let inv = 1.0 / (shape.h * shape.w) as f64;
    let xd = x.data();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = n * sn + c * sc;
            let mut acc = 0.0f64;
            for y in 0..shape.h {
                for xx in 0..shape.w {
                    acc += xd[base + y * sh + xx * sw] as f64;
                }
            }
            let i = out.index(n, c, 0, 0);
            out.data_mut()[i] = (acc * inv) as f32;
        }
    }
    out
}

/// Scale channel `c` of every sample by `gate[n, c]`; `gate` is `(n, c, 1, 1)`.
pub(crate) fn channel_scale(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let gs = gate.shape();
    if gs.n != shape.n || gs.c != shape.c || gs.h != 1 || gs.w != 1 {
        return Err(Error::ShapeMismatch(format!(
            "gate shape {gs} does not match input {shape}"
        )));
    }
    let mut out = Tensor::zeros(shape, x.layout())?;
    let (sn, sc, sh, sw) = shape.strides(x.layout());
    let xd = x.data();
    let od = out.data_mut();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let g = gate.at(n, c, 0, 0);
            let base = n * sn + c * sc;
            for y in 0..shape.h {
                for xx in 0..shape.w {
                    let i = base + y * sh + xx * sw;
                    od[i] = xd[i] * g;
                }
            }
        }
    }
    Ok(out)
}

/// Squeeze-and-excitation: per-channel gate in `[0, 1]` from a squeeze of the
/// spatial dims, applied multiplicatively.
pub fn se_forward(x: &Tensor, p: &SEParams) -> Result<Tensor> {
    if x.shape().c != p.channels() {
        return Err(Error::ShapeMismatch(format!(
            "se block over {} channels applied to tensor with {}",
            p.channels(),
            x.shape().c
        )));
    }
    let squeezed = global_avg_pool(x);
    let gate = conv2d(&squeezed, &p.reduce)?;
    let gate = relu(&gate);
    let gate = conv2d(&gate, &p.expand)?;
    let gate = hard_sigmoid(&gate);
    channel_scale(x, &gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{layout_convert, max_abs_diff, tensor_from_seed, Layout};
    use proptest::prelude::*;

    fn conv_with_weight(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Conv2dParams {
        let mut p = Conv2dParams::new(c_in, c_out, k, stride, padding, groups, false).unwrap();
        p.weight = weight;
        p.bias = bias;
        p.validate().unwrap();
        p
    }

    #[test]
    fn identity_1x1_conv_passes_input_through() {
        let mut w = vec![0.0; 3 * 3];
        for j in 0..3 {
            w[j * 3 + j] = 1.0;
        }
        let p = conv_with_weight(3, 3, 1, 1, 0, 1, w, None);
        let x = tensor_from_seed(Shape::new(2, 3, 5, 5), Layout::Nchw, 9).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(max_abs_diff(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn depthwise_ones_kernel_counts_receptive_field() {
        // All-ones 3x3 depthwise on an all-ones (1,1,3,3) input with pad 1:
        // the center sees the full window, each corner sees 4 cells.
        let p = conv_with_weight(1, 1, 3, 1, 1, 1, vec![1.0; 9], None);
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), Layout::Nchw, vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn grouped_conv_decomposes_into_half_convs() {
        let mut rng = SplitMix64::new(5);
        let p = Conv2dParams::seeded(4, 6, 3, 1, 1, 2, true, &mut rng).unwrap();
        let x = tensor_from_seed(Shape::new(1, 4, 8, 8), Layout::Nchw, 77).unwrap();
        let full = conv2d(&x, &p).unwrap();

        // Split into two dense per-group convolutions applied to channel halves.
        let cipg = 2;
        let copg = 3;
        let mut outs = Vec::new();
        for g in 0..2 {
            let wlen = copg * cipg * 9;
            let mut sub = Conv2dParams::new(cipg, copg, 3, 1, 1, 1, true).unwrap();
            sub.weight = p.weight[g * wlen..(g + 1) * wlen].to_vec();
            sub.bias = Some(p.bias.as_ref().unwrap()[g * copg..(g + 1) * copg].to_vec());
            let xg = x.slice_channels(g * cipg, (g + 1) * cipg).unwrap();
            outs.push(conv2d(&xg, &sub).unwrap());
        }
        let glued = concat_channels(&outs[0], &outs[1]).unwrap();
        assert!(max_abs_diff(&full, &glued).unwrap() <= 1e-6);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let p = Conv2dParams::new(4, 4, 3, 1, 0, 1, false).unwrap();
        let x = tensor_from_seed(Shape::new(1, 3, 4, 4), Layout::Nchw, 0).unwrap();
        assert!(matches!(conv2d(&x, &p).unwrap_err(), Error::Config(_)));

        let p = Conv2dParams::new(3, 4, 5, 1, 0, 1, false).unwrap();
        let x = tensor_from_seed(Shape::new(1, 3, 4, 4), Layout::Nchw, 0).unwrap();
        assert!(matches!(conv2d(&x, &p).unwrap_err(), Error::ShapeMismatch(_)));
    }

    #[test]
    fn batch_norm_identity_and_hand_case() {
        let x = tensor_from_seed(Shape::new(1, 2, 3, 3), Layout::Nchw, 4).unwrap();
        let id = BatchNormParams::identity(2);
        assert_eq!(max_abs_diff(&batch_norm_infer(&x, &id).unwrap(), &x).unwrap(), 0.0);

        // gamma=2, beta=1, mean=3, var=4, eps=0 on constant 5.0: 2*(5-3)/2+1 = 3.
        let p = BatchNormParams::new(vec![2.0], vec![1.0], vec![3.0], vec![4.0], 0.0).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), Layout::Nchw, vec![5.0; 4]).unwrap();
        let y = batch_norm_infer(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn batch_norm_zero_gamma_outputs_beta() {
        let p = BatchNormParams::new(
            vec![0.0, 0.0],
            vec![0.25, -1.5],
            vec![3.0, -2.0],
            vec![4.0, 1.0],
            1e-5,
        )
        .unwrap();
        let x = tensor_from_seed(Shape::new(2, 2, 3, 3), Layout::Nchw, 8).unwrap();
        let y = batch_norm_infer(&x, &p).unwrap();
        for n in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    assert_eq!(y.at(n, 0, yy, xx), 0.25);
                    assert_eq!(y.at(n, 1, yy, xx), -1.5);
                }
            }
        }
    }

    #[test]
    fn batch_norm_rejects_channel_mismatch() {
        let p = BatchNormParams::identity(3);
        let x = tensor_from_seed(Shape::new(1, 2, 2, 2), Layout::Nchw, 0).unwrap();
        assert!(matches!(
            batch_norm_infer(&x, &p).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn add_and_concat_shape_rules() {
        let a = tensor_from_seed(Shape::new(1, 2, 4, 4), Layout::Nchw, 1).unwrap();
        let b = tensor_from_seed(Shape::new(1, 3, 4, 4), Layout::Nchw, 2).unwrap();
        let zeros = Tensor::zeros(a.shape(), a.layout()).unwrap();

        assert_eq!(max_abs_diff(&add_elementwise(&a, &zeros).unwrap(), &a).unwrap(), 0.0);
        assert!(matches!(
            add_elementwise(&a, &b).unwrap_err(),
            Error::ShapeMismatch(_)
        ));

        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 5, 4, 4));

        // Partition property: slicing the halves back recovers the inputs exactly.
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 5).unwrap(), b);
    }

    #[test]
    fn add_commutes_but_concat_orders() {
        let a = tensor_from_seed(Shape::new(1, 2, 3, 3), Layout::Nchw, 10).unwrap();
        let b = tensor_from_seed(Shape::new(1, 2, 3, 3), Layout::Nchw, 11).unwrap();
        assert_eq!(
            add_elementwise(&a, &b).unwrap(),
            add_elementwise(&b, &a).unwrap()
        );
        assert_ne!(
            concat_channels(&a, &b).unwrap(),
            concat_channels(&b, &a).unwrap()
        );
    }

    #[test]
    fn concat_respects_nhwc_interleaving() {
        let a = tensor_from_seed(Shape::new(2, 2, 3, 3), Layout::Nhwc, 20).unwrap();
        let b = tensor_from_seed(Shape::new(2, 3, 3, 3), Layout::Nhwc, 21).unwrap();
        let cat = concat_channels(&a, &b).unwrap();
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    for c in 0..2 {
                        assert_eq!(cat.at(n, c, y, x), a.at(n, c, y, x));
                    }
                    for c in 0..3 {
                        assert_eq!(cat.at(n, 2 + c, y, x), b.at(n, c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn global_avg_pool_cases() {
        let x = Tensor::from_vec(
            Shape::new(1, 1, 2, 2),
            Layout::Nchw,
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        assert_eq!(global_avg_pool(&x).at(0, 0, 0, 0), 2.5);

        let k = Tensor::from_vec(Shape::new(2, 3, 4, 4), Layout::Nchw, vec![0.75; 96]).unwrap();
        let pooled = global_avg_pool(&k);
        assert!(pooled.data().iter().all(|&v| v == 0.75));

        // Pooling a pooled tensor is a no-op.
        assert_eq!(global_avg_pool(&pooled), pooled);
    }

    #[test]
    fn hard_sigmoid_saturation_points() {
        let x = Tensor::from_vec(
            Shape::new(1, 1, 1, 3),
            Layout::Nchw,
            vec![-3.0, 0.0, 3.0],
        )
        .unwrap();
        let y = hard_sigmoid(&x);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn se_zero_weights_halve_the_input() {
        let se = SEParams::new(
            Conv2dParams::new(8, 4, 1, 1, 0, 1, true).unwrap(),
            Conv2dParams::new(4, 8, 1, 1, 0, 1, true).unwrap(),
        )
        .unwrap();
        let x = tensor_from_seed(Shape::new(1, 8, 4, 4), Layout::Nchw, 2).unwrap();
        let y = se_forward(&x, &se).unwrap();
        let halved =
            Tensor::from_vec(x.shape(), x.layout(), x.data().iter().map(|v| v * 0.5).collect())
                .unwrap();
        assert!(max_abs_diff(&y, &halved).unwrap() <= 1e-7);
    }

    #[test]
    fn se_rejects_channel_mismatch() {
        let se = SEParams::new(
            Conv2dParams::new(8, 4, 1, 1, 0, 1, true).unwrap(),
            Conv2dParams::new(4, 8, 1, 1, 0, 1, true).unwrap(),
        )
        .unwrap();
        let x = tensor_from_seed(Shape::new(1, 6, 4, 4), Layout::Nchw, 1).unwrap();
        assert!(matches!(
            se_forward(&x, &se).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn se_saturated_gate_passes_input_through() {
        let mut se = SEParams::new(
            Conv2dParams::new(8, 4, 1, 1, 0, 1, true).unwrap(),
            Conv2dParams::new(4, 8, 1, 1, 0, 1, true).unwrap(),
        )
        .unwrap();
        se.expand.bias = Some(vec![10.0; 8]);
        let x = tensor_from_seed(Shape::new(1, 8, 4, 4), Layout::Nchw, 3).unwrap();
        let y = se_forward(&x, &se).unwrap();
        assert_eq!(max_abs_diff(&y, &x).unwrap(), 0.0);
    }

    #[test]
    fn se_gate_recomputed_by_scalar_oracle() {
        let mut rng = SplitMix64::new(31);
        let se = SEParams::seeded(8, 4, &mut rng).unwrap();
        let x = tensor_from_seed(Shape::new(2, 8, 5, 5), Layout::Nchw, 13).unwrap();
        let y = se_forward(&x, &se).unwrap();

        for n in 0..2 {
            // Scalar recomputation of the gate, channel by channel.
            let mut pooled = vec![0.0f64; 8];
            for c in 0..8 {
                for yy in 0..5 {
                    for xx in 0..5 {
                        pooled[c] += x.at(n, c, yy, xx) as f64;
                    }
                }
                pooled[c] /= 25.0;
            }
            let mut red = vec![0.0f64; 4];
            for r in 0..4 {
                let mut acc = se.reduce.bias.as_ref().unwrap()[r] as f64;
                for c in 0..8 {
                    acc += pooled[c] * se.reduce.weight[r * 8 + c] as f64;
                }
                red[r] = acc.max(0.0);
            }
            for c in 0..8 {
                let mut acc = se.expand.bias.as_ref().unwrap()[c] as f64;
                for r in 0..4 {
                    acc += red[r] * se.expand.weight[c * 4 + r] as f64;
                }
                let gate = ((acc + 3.0) / 6.0).clamp(0.0, 1.0);
                assert!((0.0..=1.0).contains(&gate));
                for yy in 0..5 {
                    for xx in 0..5 {
                        let want = x.at(n, c, yy, xx) as f64 * gate;
                        let got = y.at(n, c, yy, xx) as f64;
                        assert!(
                            (want - got).abs() <= 1e-5,
                            "n={n} c={c} want {want} got {got}"
                        );
                    }
                }
            }
        }
    }

    proptest! {
        // Operators are layout-invariant in semantics: running on converted
        // input equals converting the output.
        #[test]
        fn conv_is_layout_invariant(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let p = Conv2dParams::seeded(3, 4, 3, 1, 1, 1, true, &mut rng).unwrap();
            let x = tensor_from_seed(Shape::new(2, 3, 6, 6), Layout::Nchw, seed).unwrap();
            let direct = conv2d(&x, &p).unwrap();
            let via_nhwc = conv2d(&layout_convert(&x, Layout::Nhwc), &p).unwrap();
            prop_assert!(max_abs_diff(&direct, &via_nhwc).unwrap() <= 1e-6);
        }

        #[test]
        fn pool_relu_and_bn_are_layout_invariant(seed in any::<u64>()) {
            let x = tensor_from_seed(Shape::new(2, 4, 5, 5), Layout::Nchw, seed).unwrap();
            let xh = layout_convert(&x, Layout::Nhwc);
            prop_assert!(max_abs_diff(&global_avg_pool(&x), &global_avg_pool(&xh)).unwrap() <= 1e-6);
            prop_assert!(max_abs_diff(&relu(&x), &relu(&xh)).unwrap() == 0.0);
            let bn = BatchNormParams::seeded(4, &mut SplitMix64::new(seed));
            let a = batch_norm_infer(&x, &bn).unwrap();
            let b = batch_norm_infer(&xh, &bn).unwrap();
            prop_assert!(max_abs_diff(&a, &b).unwrap() == 0.0);
        }
    }
}
