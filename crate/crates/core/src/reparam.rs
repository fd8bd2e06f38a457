//! The RepGhost module in training and deploy forms, and the weight-space
//! fusion pass between them.
//!
//! A training-time module is a 1x1 convolution (+BN, optional ReLU) feeding a
//! set of parallel branches over the output channels: a mandatory depthwise
//! 3x3 conv+BN, plus optional identity / BN-only / depthwise 1x1 conv+BN
//! branches. The branch outputs are summed; an optional final ReLU follows.
//! Because every branch is linear, the whole set collapses into a single
//! depthwise 3x3 convolution with bias, leaving a deploy form that contains
//! only convolutions and ReLU.
//!
//! Fusion arithmetic runs in f64 and rounds to f32 once per parameter, which
//! keeps train/deploy outputs within a comfortable margin of the 1e-4
//! equivalence bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{batch_norm_infer, conv2d, relu, BatchNormParams, Conv2dParams};
use crate::profile::{OpKind, Profile};
use crate::tensor::{max_abs_diff, tensor_from_seed, Layout, Shape, SplitMix64, Tensor};

/// The branch structures a RepGhost module may carry in training form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    /// Depthwise 3x3 convolution followed by BN. Mandatory, exactly once.
    Dconv3x3Bn,
    /// Plain identity mapping.
    Identity,
    /// BN applied directly to the primary output.
    BnOnly,
    /// Depthwise 1x1 convolution followed by BN.
    Dconv1x1Bn,
}

/// One parallel branch over the primary output.
#[derive(Clone, Debug, PartialEq)]
pub enum Branch {
    Dconv3x3Bn { conv: Conv2dParams, bn: BatchNormParams },
    Identity,
    BnOnly(BatchNormParams),
    Dconv1x1Bn { conv: Conv2dParams, bn: BatchNormParams },
}

impl Branch {
    pub fn kind(&self) -> BranchKind {
        match self {
            Branch::Dconv3x3Bn { .. } => BranchKind::Dconv3x3Bn,
            Branch::Identity => BranchKind::Identity,
            Branch::BnOnly(_) => BranchKind::BnOnly,
            Branch::Dconv1x1Bn { .. } => BranchKind::Dconv1x1Bn,
        }
    }
}

/// Which optional branches accompany the mandatory depthwise 3x3 conv+BN.
///
/// Covers every fusible re-parameterization structure the module supports;
/// the BN-only set is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSet {
    pub identity: bool,
    pub dconv1x1: bool,
    pub bn_only: bool,
}

impl BranchSet {
    pub const NO_REPARAM: BranchSet = BranchSet { identity: false, dconv1x1: false, bn_only: false };
    pub const IDENTITY: BranchSet = BranchSet { identity: true, dconv1x1: false, bn_only: false };
    pub const DCONV1X1: BranchSet = BranchSet { identity: false, dconv1x1: true, bn_only: false };
    pub const BN: BranchSet = BranchSet { identity: false, dconv1x1: false, bn_only: true };
    pub const DCONV1X1_AND_BN: BranchSet = BranchSet { identity: false, dconv1x1: true, bn_only: true };
    pub const ALL: BranchSet = BranchSet { identity: true, dconv1x1: true, bn_only: true };

    /// Every branch combination that fuses, from bare to fully populated.
    pub fn fusible_variants() -> [BranchSet; 6] {
        [
            Self::NO_REPARAM,
            Self::IDENTITY,
            Self::DCONV1X1,
            Self::BN,
            Self::DCONV1X1_AND_BN,
            Self::ALL,
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = vec!["dconv3x3"];
        if self.identity {
            parts.push("id");
        }
        if self.dconv1x1 {
            parts.push("1x1dconv");
        }
        if self.bn_only {
            parts.push("bn");
        }
        parts.join("+")
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        BranchSet::BN
    }
}

/// Training-time RepGhost module.
#[derive(Clone, Debug, PartialEq)]
pub struct RepGhostModuleTrain {
    /// 1x1 convolution `c_in -> c_out`, bias-free (BN follows).
    pub primary_conv: Conv2dParams,
    pub primary_bn: BatchNormParams,
    pub primary_relu: bool,
    /// Parallel branches over the primary output channels.
    pub branches: Vec<Branch>,
    /// ReLU inserted after the depthwise branch convolution. Breaks the
    /// linearity fusion relies on; such a module cannot be deployed fused.
    pub relu_in_dconv: bool,
    pub final_relu: bool,
}

/// Deploy-time RepGhost module: two convolutions and up to two ReLUs.
/// No BN, no add, no concat.
#[derive(Clone, Debug, PartialEq)]
pub struct RepGhostModuleDeploy {
    /// 1x1 convolution with the primary BN folded into weights and bias.
    pub primary: Conv2dParams,
    pub primary_relu: bool,
    /// Depthwise 3x3 convolution with bias, the sum of all fused branches.
    pub fused_dconv: Conv2dParams,
    pub final_relu: bool,
}

/// A module in either form; bottlenecks hold these so networks can be
/// converted in place.
#[derive(Clone, Debug, PartialEq)]
pub enum RepGhostModule {
    Train(RepGhostModuleTrain),
    Deploy(RepGhostModuleDeploy),
}

impl RepGhostModule {
    pub fn in_channels(&self) -> usize {
        match self {
            RepGhostModule::Train(m) => m.primary_conv.c_in,
            RepGhostModule::Deploy(m) => m.primary.c_in,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            RepGhostModule::Train(m) => m.primary_conv.c_out,
            RepGhostModule::Deploy(m) => m.primary.c_out,
        }
    }

    pub fn is_deploy(&self) -> bool {
        matches!(self, RepGhostModule::Deploy(_))
    }
}

impl RepGhostModuleTrain {
    /// Seeded module with the given branch set. When `relu` is set the module
    /// carries activation: the primary 1x1 conv keeps its own ReLU and a final
    /// ReLU follows the branch sum.
    pub fn seeded(
        c_in: usize,
        c_out: usize,
        set: BranchSet,
        relu: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        // Branch norms are seeded with a small gain: the branch sum then
        // contracts and residual stacking of many modules stays O(1).
        const BRANCH_GAIN: f32 = 0.35;
        let primary_conv = Conv2dParams::seeded(c_in, c_out, 1, 1, 0, 1, false, rng)?;
        let primary_bn = BatchNormParams::seeded(c_out, rng);
        let mut branches = vec![Branch::Dconv3x3Bn {
            conv: Conv2dParams::seeded(c_out, c_out, 3, 1, 1, c_out, false, rng)?,
            bn: BatchNormParams::seeded_with_gain(c_out, BRANCH_GAIN, rng),
        }];
        if set.identity {
            branches.push(Branch::Identity);
        }
        if set.dconv1x1 {
            branches.push(Branch::Dconv1x1Bn {
                conv: Conv2dParams::seeded(c_out, c_out, 1, 1, 0, c_out, false, rng)?,
                bn: BatchNormParams::seeded_with_gain(c_out, BRANCH_GAIN, rng),
            });
        }
        if set.bn_only {
            branches.push(Branch::BnOnly(BatchNormParams::seeded_with_gain(
                c_out,
                BRANCH_GAIN,
                rng,
            )));
        }
        let m = RepGhostModuleTrain {
            primary_conv,
            primary_bn,
            primary_relu: relu,
            branches,
            relu_in_dconv: false,
            final_relu: relu,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn in_channels(&self) -> usize {
        self.primary_conv.c_in
    }

    pub fn out_channels(&self) -> usize {
        self.primary_conv.c_out
    }

    pub fn branch_set(&self) -> BranchSet {
        BranchSet {
            identity: self.branches.iter().any(|b| b.kind() == BranchKind::Identity),
            dconv1x1: self.branches.iter().any(|b| b.kind() == BranchKind::Dconv1x1Bn),
            bn_only: self.branches.iter().any(|b| b.kind() == BranchKind::BnOnly),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.primary_conv.validate()?;
        if self.primary_conv.k_h != 1 || self.primary_conv.k_w != 1 {
            return Err(Error::Config("primary conv must be 1x1".into()));
        }
        let c = self.primary_conv.c_out;
        if self.primary_bn.channels() != c {
            return Err(Error::Config(format!(
                "primary bn over {} channels, conv produces {}",
                self.primary_bn.channels(),
                c
            )));
        }
        let mut counts = [0usize; 4];
        for b in &self.branches {
            counts[match b.kind() {
                BranchKind::Dconv3x3Bn => 0,
                BranchKind::Identity => 1,
                BranchKind::BnOnly => 2,
                BranchKind::Dconv1x1Bn => 3,
            }] += 1;
            match b {
                Branch::Dconv3x3Bn { conv, bn } => {
                    conv.validate()?;
                    if !conv.is_depthwise()
                        || conv.c_out != c
                        || conv.k_h != 3
                        || conv.k_w != 3
                        || conv.stride != 1
                        || conv.padding != 1
                    {
                        return Err(Error::Config(
                            "dconv3x3 branch must be a stride-1 pad-1 depthwise 3x3 over the primary output".into(),
                        ));
                    }
                    if bn.channels() != c {
                        return Err(Error::Config("dconv3x3 branch bn width mismatch".into()));
                    }
                }
                Branch::Dconv1x1Bn { conv, bn } => {
                    conv.validate()?;
                    if !conv.is_depthwise()
                        || conv.c_out != c
                        || conv.k_h != 1
                        || conv.k_w != 1
                        || conv.stride != 1
                        || conv.padding != 0
                    {
                        return Err(Error::Config(
                            "dconv1x1 branch must be a stride-1 depthwise 1x1 over the primary output".into(),
                        ));
                    }
                    if bn.channels() != c {
                        return Err(Error::Config("dconv1x1 branch bn width mismatch".into()));
                    }
                }
                Branch::BnOnly(bn) => {
                    if bn.channels() != c {
                        return Err(Error::Config("bn-only branch width mismatch".into()));
                    }
                }
                Branch::Identity => {}
            }
        }
        if counts[0] != 1 {
            return Err(Error::Config(format!(
                "branch set must contain the depthwise 3x3 branch exactly once, found {}",
                counts[0]
            )));
        }
        if counts[1] > 1 || counts[2] > 1 || counts[3] > 1 {
            return Err(Error::Config("optional branches may appear at most once".into()));
        }
        Ok(())
    }

    pub(crate) fn forward_profiled(&self, x: &Tensor, prof: &mut Profile) -> Result<Tensor> {
        let x1 = prof.time(OpKind::Conv, || conv2d(x, &self.primary_conv))?;
        let x1 = prof.time(OpKind::BatchNorm, || batch_norm_infer(&x1, &self.primary_bn))?;
        let x1 = if self.primary_relu {
            prof.time(OpKind::Relu, || relu(&x1))
        } else {
            x1
        };

        let mut acc: Option<Tensor> = None;
        for b in &self.branches {
            let out = match b {
                Branch::Dconv3x3Bn { conv, bn } => {
                    let y = prof.time(OpKind::DepthwiseConv, || conv2d(&x1, conv))?;
                    let y = prof.time(OpKind::BatchNorm, || batch_norm_infer(&y, bn))?;
                    if self.relu_in_dconv {
                        prof.time(OpKind::Relu, || relu(&y))
                    } else {
                        y
                    }
                }
                Branch::Identity => x1.clone(),
                Branch::BnOnly(bn) => {
                    prof.time(OpKind::BatchNorm, || batch_norm_infer(&x1, bn))?
                }
                Branch::Dconv1x1Bn { conv, bn } => {
                    let y = prof.time(OpKind::DepthwiseConv, || conv2d(&x1, conv))?;
                    prof.time(OpKind::BatchNorm, || batch_norm_infer(&y, bn))?
                }
            };
            acc = Some(match acc {
                None => out,
                Some(a) => prof.time(OpKind::Add, || crate::ops::add_elementwise(&a, &out))?,
            });
        }
        let y = acc.expect("branch set is never empty");
        Ok(if self.final_relu {
            prof.time(OpKind::Relu, || relu(&y))
        } else {
            y
        })
    }

    pub fn num_params(&self) -> u64 {
        let mut total = self.primary_conv.num_params() + self.primary_bn.num_params();
        for b in &self.branches {
            total += match b {
                Branch::Dconv3x3Bn { conv, bn } => conv.num_params() + bn.num_params(),
                Branch::Identity => 0,
                Branch::BnOnly(bn) => bn.num_params(),
                Branch::Dconv1x1Bn { conv, bn } => conv.num_params() + bn.num_params(),
            };
        }
        total
    }

    /// Per-sample MAC count at the given output spatial size.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = self.primary_conv.macs(h, w);
        for b in &self.branches {
            total += match b {
                Branch::Dconv3x3Bn { conv, .. } => conv.macs(h, w),
                Branch::Dconv1x1Bn { conv, .. } => conv.macs(h, w),
                _ => 0,
            };
        }
        total
    }
}

impl RepGhostModuleDeploy {
    pub fn in_channels(&self) -> usize {
        self.primary.c_in
    }

    pub fn out_channels(&self) -> usize {
        self.primary.c_out
    }

    pub(crate) fn forward_profiled(&self, x: &Tensor, prof: &mut Profile) -> Result<Tensor> {
        let y = prof.time(OpKind::Conv, || conv2d(x, &self.primary))?;
        let y = if self.primary_relu {
            prof.time(OpKind::Relu, || relu(&y))
        } else {
            y
        };
        let y = prof.time(OpKind::DepthwiseConv, || conv2d(&y, &self.fused_dconv))?;
        Ok(if self.final_relu {
            prof.time(OpKind::Relu, || relu(&y))
        } else {
            y
        })
    }

    pub fn num_params(&self) -> u64 {
        self.primary.num_params() + self.fused_dconv.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.primary.macs(h, w) + self.fused_dconv.macs(h, w)
    }
}

/// BN scale/shift per channel in f64: `s = gamma / sqrt(var + eps)`,
/// `t = beta - s * mean`.
fn bn_scale_shift(bn: &BatchNormParams) -> (Vec<f64>, Vec<f64>) {
    let c = bn.channels();
    let mut scale = vec![0.0f64; c];
    let mut shift = vec![0.0f64; c];
    for j in 0..c {
        let s = bn.gamma[j] as f64 / (bn.running_var[j] as f64 + bn.eps as f64).sqrt();
        scale[j] = s;
        shift[j] = bn.beta[j] as f64 - s * bn.running_mean[j] as f64;
    }
    (scale, shift)
}

/// Fold f64 intermediate: scaled weights and the materialized bias.
fn fold_bn_f64(conv: &Conv2dParams, bn: &BatchNormParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if bn.channels() != conv.c_out {
        return Err(Error::Config(format!(
            "bn over {} channels cannot fold into conv with c_out {}",
            bn.channels(),
            conv.c_out
        )));
    }
    let (scale, shift) = bn_scale_shift(bn);
    let per_out = conv.weight.len() / conv.c_out;
    let mut weight = vec![0.0f64; conv.weight.len()];
    for co in 0..conv.c_out {
        for i in 0..per_out {
            weight[co * per_out + i] = conv.weight[co * per_out + i] as f64 * scale[co];
        }
    }
    let mut bias = vec![0.0f64; conv.c_out];
    for co in 0..conv.c_out {
        let b0 = conv.bias.as_ref().map_or(0.0, |b| b[co] as f64);
        bias[co] = shift[co] + scale[co] * b0;
    }
    Ok((weight, bias))
}

/// Absorb an inference-mode BN into the preceding convolution.
///
/// With `s_j = gamma_j / sqrt(var_j + eps)` the returned convolution has
/// `weight'_j = s_j * weight_j` and `bias'_j = beta_j + s_j * (bias_j - mean_j)`,
/// and applied to any input equals `bn(conv(x))`.
pub fn fold_bn_into_conv(conv: &Conv2dParams, bn: &BatchNormParams) -> Result<Conv2dParams> {
    let (weight, bias) = fold_bn_f64(conv, bn)?;
    let mut out = conv.clone();
    out.weight = weight.iter().map(|&v| v as f32).collect();
    out.bias = Some(bias.iter().map(|&v| v as f32).collect());
    Ok(out)
}

/// Express a BN as an equivalent depthwise `k x k` convolution: the center
/// tap carries the scale, the bias carries the shift.
pub fn bn_to_depthwise_kernel(bn: &BatchNormParams, k: usize) -> Result<Conv2dParams> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("kernel size {k} must be odd")));
    }
    let c = bn.channels();
    let (scale, shift) = bn_scale_shift(bn);
    let mut conv = Conv2dParams::new(c, c, k, 1, k / 2, c, true)?;
    let center = (k / 2) * k + k / 2;
    for j in 0..c {
        conv.weight[j * k * k + center] = scale[j] as f32;
    }
    conv.bias = Some(shift.iter().map(|&v| v as f32).collect());
    Ok(conv)
}

/// Zero-pad every kernel symmetrically to `k x k`, growing the conv's padding
/// to `k/2` so the function is preserved.
pub fn pad_kernel_to(conv: &Conv2dParams, k: usize) -> Result<Conv2dParams> {
    if k % 2 == 0 || conv.k_h % 2 == 0 || conv.k_w % 2 == 0 || conv.k_h != conv.k_w {
        return Err(Error::Config("kernel sizes must be odd and square".into()));
    }
    if conv.k_h > k {
        return Err(Error::Config(format!(
            "cannot pad a {}x{} kernel down to {}x{}",
            conv.k_h, conv.k_w, k, k
        )));
    }
    if conv.k_h == k {
        return Ok(conv.clone());
    }
    let cipg = conv.c_in / conv.groups;
    let mut out = Conv2dParams {
        c_in: conv.c_in,
        c_out: conv.c_out,
        k_h: k,
        k_w: k,
        weight: vec![0.0; conv.c_out * cipg * k * k],
        bias: conv.bias.clone(),
        stride: conv.stride,
        padding: k / 2,
        groups: conv.groups,
    };
    let off = (k - conv.k_h) / 2;
    for co in 0..conv.c_out {
        for ci in 0..cipg {
            for ky in 0..conv.k_h {
                for kx in 0..conv.k_w {
                    let src = ((co * cipg + ci) * conv.k_h + ky) * conv.k_w + kx;
                    let dst = ((co * cipg + ci) * k + ky + off) * k + kx + off;
                    out.weight[dst] = conv.weight[src];
                }
            }
        }
    }
    Ok(out)
}

/// Collapse a training-time module into its deploy form.
///
/// Every branch becomes an equivalent depthwise 3x3 convolution with bias and
/// the kernels and biases are summed; the primary BN folds into the primary
/// convolution. Rejects modules carrying a ReLU inside the depthwise branch,
/// which cannot be expressed as a single convolution.
pub fn fuse_module(m: &RepGhostModuleTrain) -> Result<RepGhostModuleDeploy> {
    m.validate()?;
    if m.relu_in_dconv {
        return Err(Error::Config(
            "module has a ReLU after the depthwise branch convolution and cannot be fused".into(),
        ));
    }
    let c = m.out_channels();
    let primary = fold_bn_into_conv(&m.primary_conv, &m.primary_bn)?;

    let mut weight = vec![0.0f64; c * 9];
    let mut bias = vec![0.0f64; c];
    for b in &m.branches {
        match b {
            Branch::Dconv3x3Bn { conv, bn } => {
                let (w, bb) = fold_bn_f64(conv, bn)?;
                for (acc, v) in weight.iter_mut().zip(w.iter()) {
                    *acc += v;
                }
                for (acc, v) in bias.iter_mut().zip(bb.iter()) {
                    *acc += v;
                }
            }
            Branch::Identity => {
                for j in 0..c {
                    weight[j * 9 + 4] += 1.0;
                }
            }
            Branch::BnOnly(bn) => {
                let (scale, shift) = bn_scale_shift(bn);
                for j in 0..c {
                    weight[j * 9 + 4] += scale[j];
                    bias[j] += shift[j];
                }
            }
            Branch::Dconv1x1Bn { conv, bn } => {
                let (w, bb) = fold_bn_f64(conv, bn)?;
                for j in 0..c {
                    weight[j * 9 + 4] += w[j];
                    bias[j] += bb[j];
                }
            }
        }
    }

    let mut fused_dconv = Conv2dParams::new(c, c, 3, 1, 1, c, true)?;
    fused_dconv.weight = weight.iter().map(|&v| v as f32).collect();
    fused_dconv.bias = Some(bias.iter().map(|&v| v as f32).collect());

    Ok(RepGhostModuleDeploy {
        primary,
        primary_relu: m.primary_relu,
        fused_dconv,
        final_relu: m.final_relu,
    })
}

/// Re-express a deploy module as a degenerate single-branch training module
/// with identity BNs. Fusing it reproduces the deploy form bit for bit.
pub fn rewrap_deploy_as_train(d: &RepGhostModuleDeploy) -> RepGhostModuleTrain {
    let c = d.out_channels();
    RepGhostModuleTrain {
        primary_conv: d.primary.clone(),
        primary_bn: BatchNormParams::identity(c),
        primary_relu: d.primary_relu,
        branches: vec![Branch::Dconv3x3Bn {
            conv: d.fused_dconv.clone(),
            bn: BatchNormParams::identity(c),
        }],
        relu_in_dconv: false,
        final_relu: d.final_relu,
    }
}

/// Anything with a deterministic forward pass over rank-4 tensors.
pub trait InferenceModel: Sync {
    fn in_channels(&self) -> usize;
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

impl InferenceModel for RepGhostModuleTrain {
    fn in_channels(&self) -> usize {
        self.primary_conv.c_in
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_profiled(x, &mut Profile::disabled())
    }
}

impl InferenceModel for RepGhostModuleDeploy {
    fn in_channels(&self) -> usize {
        self.primary.c_in
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_profiled(x, &mut Profile::disabled())
    }
}

/// Outcome of an equivalence check between two model forms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub tol: f32,
    pub max_diff: f32,
    pub passed: bool,
}

impl std::fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} over {} trials: max |diff| = {:.3e} (tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.trials,
            self.max_diff,
            self.tol
        )
    }
}

/// Run both forms on seeded random inputs of shape `(batch, c_in, h, w)` and
/// report the largest observed output difference against `tol`.
pub fn verify_equivalence(
    a: &dyn InferenceModel,
    b: &dyn InferenceModel,
    batch: usize,
    hw: (usize, usize),
    trials: usize,
    tol: f32,
    seed: u64,
) -> Result<EquivalenceReport> {
    verify_equivalence_with_threads(a, b, batch, hw, trials, tol, seed, 1)
}

/// Same check with trials spread over worker threads. The result is
/// independent of the thread count: trial inputs are seeded individually.
#[allow(clippy::too_many_arguments)]
pub fn verify_equivalence_with_threads(
    a: &dyn InferenceModel,
    b: &dyn InferenceModel,
    batch: usize,
    hw: (usize, usize),
    trials: usize,
    tol: f32,
    seed: u64,
    threads: usize,
) -> Result<EquivalenceReport> {
    if a.in_channels() != b.in_channels() {
        return Err(Error::Config(format!(
            "forms disagree on input channels: {} vs {}",
            a.in_channels(),
            b.in_channels()
        )));
    }
    if trials == 0 {
        return Err(Error::Config("verification needs at least one trial".into()));
    }
    let shape = Shape::new(batch, a.in_channels(), hw.0, hw.1);
    let mut seeder = SplitMix64::new(seed);
    let trial_seeds: Vec<u64> = (0..trials).map(|_| seeder.next_u64()).collect();

    let run = |trial_seed: u64| -> Result<f32> {
        let x = tensor_from_seed(shape, Layout::Nchw, trial_seed)?;
        let ya = a.forward(&x)?;
        let yb = b.forward(&x)?;
        max_abs_diff(&ya, &yb)
    };

    let workers = threads.max(1).min(trials);
    let max_diff = if workers == 1 {
        let mut max = 0.0f32;
        for &s in &trial_seeds {
            max = max.max(run(s)?);
        }
        max
    } else {
        let chunks: Vec<&[u64]> = trial_seeds.chunks(trials.div_ceil(workers)).collect();
        let results: Vec<Result<f32>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || -> Result<f32> {
                        let mut max = 0.0f32;
                        for &s in chunk {
                            max = max.max(run(s)?);
                        }
                        Ok(max)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut max = 0.0f32;
        for r in results {
            max = max.max(r?);
        }
        max
    };

    Ok(EquivalenceReport {
        trials,
        tol,
        max_diff,
        passed: max_diff <= tol,
    })
}
