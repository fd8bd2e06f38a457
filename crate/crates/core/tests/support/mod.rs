//! Independent naive-loop oracles for conv/batch-norm/SE, kept deliberately
//! free of the library's operator implementations: only logical element
//! access and parameter fields are used.

use repghost::ops::{BatchNormParams, Conv2dParams, SEParams};
use repghost::tensor::{Shape, Tensor};

/// Direct convolution as seven nested loops over logical indices.
pub fn naive_conv2d(x: &Tensor, p: &Conv2dParams) -> Tensor {
    let s = x.shape();
    let oh = (s.h + 2 * p.padding - p.k_h) / p.stride + 1;
    let ow = (s.w + 2 * p.padding - p.k_w) / p.stride + 1;
    let cipg = p.c_in / p.groups;
    let copg = p.c_out / p.groups;
    let mut out = vec![0.0f32; s.n * p.c_out * oh * ow];
    for n in 0..s.n {
        for co in 0..p.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = co / copg;
                    let mut acc: f64 = match &p.bias {
                        Some(b) => b[co] as f64,
                        None => 0.0,
                    };
                    for cig in 0..cipg {
                        for ky in 0..p.k_h {
                            for kx in 0..p.k_w {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = x.at(n, g * cipg + cig, iy as usize, ix as usize);
                                let wi = ((co * cipg + cig) * p.k_h + ky) * p.k_w + kx;
                                acc += xv as f64 * p.weight[wi] as f64;
                            }
                        }
                    }
                    out[((n * p.c_out + co) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::from_vec(
        Shape::new(s.n, p.c_out, oh, ow),
        repghost::tensor::Layout::Nchw,
        out,
    )
    .unwrap()
}

/// Inference batch norm evaluated channel by channel, element by element.
pub fn naive_batch_norm(x: &Tensor, p: &BatchNormParams) -> Tensor {
    let s = x.shape();
    let mut out = vec![0.0f32; s.count()];
    for n in 0..s.n {
        for c in 0..s.c {
            let denom = ((p.running_var[c] as f64) + p.eps as f64).sqrt();
            for y in 0..s.h {
                for xx in 0..s.w {
                    let v = x.at(n, c, y, xx) as f64;
                    let r = p.gamma[c] as f64 * (v - p.running_mean[c] as f64) / denom
                        + p.beta[c] as f64;
                    out[((n * s.c + c) * s.h + y) * s.w + xx] = r as f32;
                }
            }
        }
    }
    Tensor::from_vec(s, repghost::tensor::Layout::Nchw, out).unwrap()
}

/// SE block recomputed with scalar loops: squeeze, two 1x1 convs with ReLU
/// between, hard-sigmoid gate, channel scaling.
pub fn naive_se(x: &Tensor, p: &SEParams) -> Tensor {
    let s = x.shape();
    let c = s.c;
    let c_red = p.reduce.c_out;
    let mut out = vec![0.0f32; s.count()];
    for n in 0..s.n {
        let mut pooled = vec![0.0f64; c];
        for ch in 0..c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    pooled[ch] += x.at(n, ch, y, xx) as f64;
                }
            }
            pooled[ch] /= (s.h * s.w) as f64;
        }
        let mut red = vec![0.0f64; c_red];
        for r in 0..c_red {
            let mut acc = p.reduce.bias.as_ref().map_or(0.0, |b| b[r] as f64);
            for ch in 0..c {
                acc += pooled[ch] * p.reduce.weight[r * c + ch] as f64;
            }
            red[r] = acc.max(0.0);
        }
        for ch in 0..c {
            let mut acc = p.expand.bias.as_ref().map_or(0.0, |b| b[ch] as f64);
            for r in 0..c_red {
                acc += red[r] * p.expand.weight[ch * c_red + r] as f64;
            }
            let gate = ((acc + 3.0) / 6.0).clamp(0.0, 1.0);
            for y in 0..s.h {
                for xx in 0..s.w {
                    out[((n * c + ch) * s.h + y) * s.w + xx] =
                        (x.at(n, ch, y, xx) as f64 * gate) as f32;
                }
            }
        }
    }
    Tensor::from_vec(s, repghost::tensor::Layout::Nchw, out).unwrap()
}
