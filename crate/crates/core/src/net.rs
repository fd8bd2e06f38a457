//! Ghost / RepGhost bottlenecks and full network construction, conversion to
//! deploy form, and parameter/MAC accounting.
//!
//! Both architectures share one 16-row table (stem 3x3/s2 -> 16 bottlenecks
//! -> 1x1 tail -> global pool -> 1x1 head -> classifier) and a width
//! multiplier applied through `make_divisible`. A RepGhost bottleneck runs
//! its modules at the table's #mid width; a Ghost bottleneck widens the
//! middle to 2*#mid and joins module halves by channel concatenation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    add_elementwise, batch_norm_infer, concat_channels, conv2d, global_avg_pool, relu,
    se_forward, BatchNormParams, Conv2dParams, SEParams,
};
use crate::profile::{OpKind, Profile};
use crate::reparam::{
    fuse_module, BranchSet, InferenceModel, RepGhostModule, RepGhostModuleTrain,
};
use crate::tensor::{SplitMix64, Tensor};

/// Round `c` to the nearest multiple of `divisor`, never below `divisor`,
/// bumping up one step if rounding lost more than 10%.
pub fn make_divisible(c: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut v = ((c + d / 2.0) as usize / divisor) * divisor;
    v = v.max(divisor);
    if (v as f64) < 0.9 * c {
        v += divisor;
    }
    v
}

fn se_reduced_width(c: usize) -> usize {
    make_divisible(c as f64 * 0.25, 4)
}

/// One architecture-table row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    /// The table's #mid column: the RepGhost middle width, half the Ghost one.
    pub c_mid_half: usize,
    pub c_out: usize,
    pub use_se: bool,
    pub stride: usize,
}

/// Base architecture rows: (input side, #mid, #out, SE, stride).
const BASE_ROWS: [(usize, usize, usize, bool, usize); 16] = [
    (112, 8, 16, false, 1),
    (112, 24, 24, false, 2),
    (56, 36, 24, false, 1),
    (56, 36, 40, true, 2),
    (28, 60, 40, true, 1),
    (28, 120, 80, false, 2),
    (14, 100, 80, false, 1),
    (14, 120, 80, false, 1),
    (14, 120, 80, false, 1),
    (14, 240, 112, true, 1),
    (14, 336, 112, true, 1),
    (14, 336, 160, true, 2),
    (7, 480, 160, false, 1),
    (7, 480, 160, true, 1),
    (7, 480, 160, false, 1),
    (7, 480, 160, true, 1),
];

pub fn base_rows() -> Vec<BottleneckSpec> {
    BASE_ROWS
        .iter()
        .map(|&(_, mid, out, se, stride)| BottleneckSpec {
            c_mid_half: mid,
            c_out: out,
            use_se: se,
            stride,
        })
        .collect()
}

/// Declarative network description: table rows, width multiplier, shortcut
/// flag and the fixed stem/head widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub rows: Vec<BottleneckSpec>,
    pub width: f64,
    pub use_shortcut: bool,
    pub stem_channels: usize,
    pub tail_channels: usize,
    pub head_channels: usize,
    pub classes: usize,
}

impl NetworkSpec {
    pub fn new(width: f64, use_shortcut: bool) -> Result<Self> {
        Self::with_rows(base_rows(), width, use_shortcut)
    }

    pub fn with_rows(rows: Vec<BottleneckSpec>, width: f64, use_shortcut: bool) -> Result<Self> {
        if width.is_nan() || width <= 0.0 {
            return Err(Error::Config(format!("width must be > 0, got {width}")));
        }
        let spec = NetworkSpec {
            rows,
            width,
            use_shortcut,
            stem_channels: 16,
            tail_channels: 960,
            head_channels: 1280,
            classes: 1000,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != 16 {
            return Err(Error::Config(format!(
                "architecture table must have 16 bottleneck rows, got {}",
                self.rows.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.stride != 1 && row.stride != 2 {
                return Err(Error::Config(format!(
                    "row {i}: stride must be 1 or 2, got {}",
                    row.stride
                )));
            }
            if row.c_mid_half == 0 || row.c_out == 0 {
                return Err(Error::Config(format!("row {i}: channels must be > 0")));
            }
            let expect_stride2 = matches!(i, 1 | 3 | 5 | 11);
            if (row.stride == 2) != expect_stride2 {
                return Err(Error::Config(format!(
                    "row {i}: stride-2 rows must sit exactly where the base table places them"
                )));
            }
        }
        Ok(())
    }

    /// Width-scaled channel count, rounded to a multiple of 4.
    pub fn scaled(&self, c: usize) -> usize {
        make_divisible(c as f64 * self.width, 4)
    }

    /// The table in loadable plain-text form: one row per bottleneck with
    /// input size, #mid, #out, SE flag and stride.
    pub fn to_table_text(&self) -> String {
        let mut out = String::from("# input mid out se stride\n");
        let mut side = 112usize;
        for row in &self.rows {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                side,
                row.c_mid_half,
                row.c_out,
                if row.use_se { "1" } else { "-" },
                row.stride
            ));
            if row.stride == 2 {
                side /= 2;
            }
        }
        out
    }

    /// Parse the text form produced by [`to_table_text`]. Width and shortcut
    /// flag are not part of the table; they come from the caller.
    pub fn parse_table(text: &str, width: f64, use_shortcut: bool) -> Result<Self> {
        let mut rows = Vec::new();
        let mut side = 112usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "table line {}: expected 5 columns, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<usize> {
                s.parse::<usize>().map_err(|_| {
                    Error::Format(format!("table line {}: bad {what} '{s}'", lineno + 1))
                })
            };
            let input = parse(fields[0], "input size")?;
            if input != side {
                return Err(Error::Format(format!(
                    "table line {}: input size {input} does not match expected {side}",
                    lineno + 1
                )));
            }
            let c_mid_half = parse(fields[1], "#mid")?;
            let c_out = parse(fields[2], "#out")?;
            let use_se = match fields[3] {
                "-" | "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Format(format!(
                        "table line {}: bad SE flag '{other}'",
                        lineno + 1
                    )))
                }
            };
            let stride = parse(fields[4], "stride")?;
            if stride == 2 {
                side /= 2;
            }
            rows.push(BottleneckSpec {
                c_mid_half,
                c_out,
                use_se,
                stride,
            });
        }
        Self::with_rows(rows, width, use_shortcut)
    }
}

/// Convolution with optional BN and ReLU, the unit everything else is built
/// from. Folding absorbs the BN into the weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnAct {
    pub conv: Conv2dParams,
    pub bn: Option<BatchNormParams>,
    pub relu: bool,
}

impl ConvBnAct {
    fn conv_kind(&self) -> OpKind {
        if self.conv.is_depthwise() {
            OpKind::DepthwiseConv
        } else {
            OpKind::Conv
        }
    }

    fn forward(&self, x: &Tensor, prof: &mut Profile) -> Result<Tensor> {
        let mut y = prof.time(self.conv_kind(), || conv2d(x, &self.conv))?;
        if let Some(bn) = &self.bn {
            y = prof.time(OpKind::BatchNorm, || batch_norm_infer(&y, bn))?;
        }
        if self.relu {
            y = prof.time(OpKind::Relu, || relu(&y));
        }
        Ok(y)
    }

    fn folded(&self) -> Result<ConvBnAct> {
        Ok(match &self.bn {
            None => self.clone(),
            Some(bn) => ConvBnAct {
                conv: crate::reparam::fold_bn_into_conv(&self.conv, bn)?,
                bn: None,
                relu: self.relu,
            },
        })
    }

    fn num_params(&self, fused: bool) -> u64 {
        if fused {
            let bias = if self.bn.is_some() || self.conv.bias.is_some() {
                self.conv.c_out as u64
            } else {
                0
            };
            self.conv.weight.len() as u64 + bias
        } else {
            self.conv.num_params() + self.bn.as_ref().map_or(0, |b| b.num_params())
        }
    }

    fn bn_count(&self) -> usize {
        usize::from(self.bn.is_some())
    }
}

/// How a Ghost module combines its primary and cheap halves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureJoin {
    /// Channel concatenation, the Ghost module's native join.
    Concat,
    /// Times an elementwise add on the two (equal-shape) halves in place of
    /// the concat, then concatenates outside the timed accounting so every
    /// downstream operator keeps its shape. This is the controlled
    /// concat-to-add swap used for runtime comparison.
    ShadowAdd,
}

/// Ghost module: a 1x1 primary conv producing half the output channels and a
/// cheap depthwise 3x3 producing the other half, joined along channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostModule {
    pub primary: ConvBnAct,
    pub cheap: ConvBnAct,
    pub join: FeatureJoin,
}

impl GhostModule {
    /// Seeded module. `contract` scales the norms down so a module feeding a
    /// residual add keeps the stack's activations O(1).
    pub fn seeded(
        c_in: usize,
        c_out: usize,
        relu: bool,
        contract: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::Config(format!(
                "ghost module output channels {c_out} must be even"
            )));
        }
        let gain = if contract { 0.5 } else { 1.0 };
        let half = c_out / 2;
        Ok(GhostModule {
            primary: ConvBnAct {
                conv: Conv2dParams::seeded(c_in, half, 1, 1, 0, 1, false, rng)?,
                bn: Some(BatchNormParams::seeded_with_gain(half, gain, rng)),
                relu,
            },
            cheap: ConvBnAct {
                conv: Conv2dParams::seeded(half, half, 3, 1, 1, half, false, rng)?,
                bn: Some(BatchNormParams::seeded_with_gain(half, gain, rng)),
                relu,
            },
            join: FeatureJoin::Concat,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.primary.conv.c_in
    }

    pub fn out_channels(&self) -> usize {
        self.primary.conv.c_out * 2
    }

    fn forward(&self, x: &Tensor, prof: &mut Profile) -> Result<Tensor> {
        let x1 = self.primary.forward(x, prof)?;
        let x2 = self.cheap.forward(&x1, prof)?;
        match self.join {
            FeatureJoin::Concat => prof.time(OpKind::Concat, || concat_channels(&x1, &x2)),
            FeatureJoin::ShadowAdd => {
                let shadow = prof.time(OpKind::Add, || add_elementwise(&x1, &x2))?;
                std::hint::black_box(&shadow);
                // Dataflow keeps concatenation semantics, outside the timed ops.
                concat_channels(&x1, &x2)
            }
        }
    }

    fn folded(&self) -> Result<GhostModule> {
        Ok(GhostModule {
            primary: self.primary.folded()?,
            cheap: self.cheap.folded()?,
            join: self.join,
        })
    }

    fn num_params(&self, fused: bool) -> u64 {
        self.primary.num_params(fused) + self.cheap.num_params(fused)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.primary.conv.macs(h, w) + self.cheap.conv.macs(h, w)
    }
}

/// Residual path of a bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    /// Plain identity add (stride 1, matching channels).
    Identity,
    /// Identity shortcut removed by the builder flag; main branch only.
    Disabled,
    /// Depthwise 3x3 (+BN) then 1x1 conv (+BN), used whenever stride or
    /// channel count changes.
    Downsample { dconv: ConvBnAct, pconv: ConvBnAct },
}

impl Shortcut {
    fn enabled(&self) -> bool {
        !matches!(self, Shortcut::Disabled)
    }

    fn num_params(&self, fused: bool) -> u64 {
        match self {
            Shortcut::Downsample { dconv, pconv } => {
                dconv.num_params(fused) + pconv.num_params(fused)
            }
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepGhostBottleneck {
    pub module1: RepGhostModule,
    pub mid_dconv: Option<ConvBnAct>,
    pub se: Option<SEParams>,
    pub module2: RepGhostModule,
    pub shortcut: Shortcut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GhostBottleneck {
    pub module1: GhostModule,
    pub mid_dconv: Option<ConvBnAct>,
    pub se: Option<SEParams>,
    pub module2: GhostModule,
    pub shortcut: Shortcut,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Bottleneck {
    RepGhost(RepGhostBottleneck),
    Ghost(GhostBottleneck),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    RepGhost,
    Ghost,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::RepGhost => "repghost",
            Arch::Ghost => "ghost",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "repghost" => Ok(Arch::RepGhost),
            "ghost" => Ok(Arch::Ghost),
            other => Err(Error::Config(format!("unknown arch '{other}'"))),
        }
    }
}

/// RepGhost module structure knobs, exposed for the re-parameterization
/// variants; the defaults match the shipped configuration (BN branch only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepGhostOptions {
    pub branch_set: BranchSet,
    pub relu_in_dconv: bool,
}

impl Default for RepGhostOptions {
    fn default() -> Self {
        RepGhostOptions {
            branch_set: BranchSet::BN,
            relu_in_dconv: false,
        }
    }
}

/// A built network: stem, 16 bottlenecks, tail conv, pool, head, classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Arch,
    pub spec: NetworkSpec,
    pub opts: RepGhostOptions,
    pub stem: ConvBnAct,
    pub blocks: Vec<Bottleneck>,
    pub tail: ConvBnAct,
    pub head: ConvBnAct,
    pub classifier: ConvBnAct,
}

fn build_shortcut(
    c_in: usize,
    c_out: usize,
    stride: usize,
    use_shortcut: bool,
    rng: &mut SplitMix64,
) -> Result<Shortcut> {
    if stride == 1 && c_in == c_out {
        return Ok(if use_shortcut {
            Shortcut::Identity
        } else {
            Shortcut::Disabled
        });
    }
    Ok(Shortcut::Downsample {
        dconv: ConvBnAct {
            conv: Conv2dParams::seeded(c_in, c_in, 3, stride, 1, c_in, false, rng)?,
            bn: Some(BatchNormParams::seeded(c_in, rng)),
            relu: false,
        },
        pconv: ConvBnAct {
            conv: Conv2dParams::seeded(c_in, c_out, 1, 1, 0, 1, false, rng)?,
            bn: Some(BatchNormParams::seeded(c_out, rng)),
            relu: false,
        },
    })
}

fn build_mid_dconv(c: usize, stride: usize, rng: &mut SplitMix64) -> Result<Option<ConvBnAct>> {
    if stride == 1 {
        return Ok(None);
    }
    Ok(Some(ConvBnAct {
        conv: Conv2dParams::seeded(c, c, 3, stride, 1, c, false, rng)?,
        bn: Some(BatchNormParams::seeded(c, rng)),
        relu: false,
    }))
}

fn build_network(
    arch: Arch,
    spec: &NetworkSpec,
    opts: RepGhostOptions,
    seed: u64,
) -> Result<Network> {
    spec.validate()?;
    let mut rng = SplitMix64::new(seed);
    let stem_c = spec.scaled(spec.stem_channels);
    let stem = ConvBnAct {
        conv: Conv2dParams::seeded(3, stem_c, 3, 2, 1, 1, false, &mut rng)?,
        bn: Some(BatchNormParams::seeded(stem_c, &mut rng)),
        relu: true,
    };

    let mut blocks = Vec::with_capacity(spec.rows.len());
    let mut c_in = stem_c;
    for row in &spec.rows {
        let mid = spec.scaled(row.c_mid_half);
        let c_out = spec.scaled(row.c_out);
        let block = match arch {
            Arch::RepGhost => {
                let mut m1 = RepGhostModuleTrain::seeded(c_in, mid, opts.branch_set, true, &mut rng)?;
                m1.relu_in_dconv = opts.relu_in_dconv;
                let mid_dconv = build_mid_dconv(mid, row.stride, &mut rng)?;
                let se = if row.use_se {
                    Some(SEParams::seeded(mid, se_reduced_width(mid), &mut rng)?)
                } else {
                    None
                };
                let mut m2 = RepGhostModuleTrain::seeded(mid, c_out, opts.branch_set, false, &mut rng)?;
                m2.relu_in_dconv = opts.relu_in_dconv;
                let shortcut =
                    build_shortcut(c_in, c_out, row.stride, spec.use_shortcut, &mut rng)?;
                Bottleneck::RepGhost(RepGhostBottleneck {
                    module1: RepGhostModule::Train(m1),
                    mid_dconv,
                    se,
                    module2: RepGhostModule::Train(m2),
                    shortcut,
                })
            }
            Arch::Ghost => {
                let mid2 = mid * 2;
                let m1 = GhostModule::seeded(c_in, mid2, true, false, &mut rng)?;
                let mid_dconv = build_mid_dconv(mid2, row.stride, &mut rng)?;
                let se = if row.use_se {
                    Some(SEParams::seeded(mid2, se_reduced_width(mid2), &mut rng)?)
                } else {
                    None
                };
                let m2 = GhostModule::seeded(mid2, c_out, false, true, &mut rng)?;
                let shortcut =
                    build_shortcut(c_in, c_out, row.stride, spec.use_shortcut, &mut rng)?;
                Bottleneck::Ghost(GhostBottleneck {
                    module1: m1,
                    mid_dconv,
                    se,
                    module2: m2,
                    shortcut,
                })
            }
        };
        blocks.push(block);
        c_in = spec.scaled(row.c_out);
    }

    let tail_c = spec.scaled(spec.tail_channels);
    let tail = ConvBnAct {
        conv: Conv2dParams::seeded(c_in, tail_c, 1, 1, 0, 1, false, &mut rng)?,
        bn: Some(BatchNormParams::seeded(tail_c, &mut rng)),
        relu: true,
    };
    // Head width stays fixed under the multiplier.
    let head = ConvBnAct {
        conv: Conv2dParams::seeded(tail_c, spec.head_channels, 1, 1, 0, 1, true, &mut rng)?,
        bn: None,
        relu: true,
    };
    let classifier = ConvBnAct {
        conv: Conv2dParams::seeded(spec.head_channels, spec.classes, 1, 1, 0, 1, true, &mut rng)?,
        bn: None,
        relu: false,
    };

    Ok(Network {
        arch,
        spec: spec.clone(),
        opts,
        stem,
        blocks,
        tail,
        head,
        classifier,
    })
}

/// Seeded train-form RepGhostNet at the given width.
pub fn build_repghostnet(width: f64, use_shortcut: bool, seed: u64) -> Result<Network> {
    let spec = NetworkSpec::new(width, use_shortcut)?;
    build_network(Arch::RepGhost, &spec, RepGhostOptions::default(), seed)
}

/// RepGhostNet with explicit spec and re-parameterization structure.
pub fn build_repghostnet_opts(
    spec: &NetworkSpec,
    opts: RepGhostOptions,
    seed: u64,
) -> Result<Network> {
    build_network(Arch::RepGhost, spec, opts, seed)
}

/// Seeded Ghost-module baseline on the same table, middle width `2 * #mid`.
pub fn build_ghostnet(width: f64, seed: u64) -> Result<Network> {
    let spec = NetworkSpec::new(width, true)?;
    build_network(Arch::Ghost, &spec, RepGhostOptions::default(), seed)
}

pub fn build_ghostnet_spec(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    build_network(Arch::Ghost, spec, RepGhostOptions::default(), seed)
}

/// Same Ghost network with every module join swapped to the timed-add
/// counterfactual; weights are shared with the input network.
pub fn ghost_add_variant(net: &Network) -> Result<Network> {
    if net.arch != Arch::Ghost {
        return Err(Error::Config(
            "add-variant only applies to ghost-form networks".into(),
        ));
    }
    let mut out = net.clone();
    for block in &mut out.blocks {
        if let Bottleneck::Ghost(g) = block {
            g.module1.join = FeatureJoin::ShadowAdd;
            g.module2.join = FeatureJoin::ShadowAdd;
        }
    }
    Ok(out)
}

impl RepGhostBottleneck {
    fn forward(&self, x: &Tensor, prof: &mut Profile) -> Result<Tensor> {
        let mut y = match &self.module1 {
            RepGhostModule::Train(m) => m.forward_profiled(x, prof)?,
            RepGhostModule::Deploy(m) => m.forward_profiled(x, prof)?,
        };
        if let Some(d) = &self.mid_dconv {
            y = d.forward(&y, prof)?;
        }
        if let Some(se) = &self.se {
            y = prof.time(OpKind::Se, || se_forward(&y, se))?;
        }
        y = match &self.module2 {
            RepGhostModule::Train(m) => m.forward_profiled(&y, prof)?,
            RepGhostModule::Deploy(m) => m.forward_profiled(&y, prof)?,
        };
        finish_with_shortcut(y, x, &self.shortcut, prof)
    }
}

impl GhostBottleneck {
    fn forward(&self, x: &Tensor, prof: &mut Profile) -> Result<Tensor> {
        let mut y = self.module1.forward(x, prof)?;
        if let Some(d) = &self.mid_dconv {
            y = d.forward(&y, prof)?;
        }
        if let Some(se) = &self.se {
            y = prof.time(OpKind::Se, || se_forward(&y, se))?;
        }
        y = self.module2.forward(&y, prof)?;
        finish_with_shortcut(y, x, &self.shortcut, prof)
    }
}

fn finish_with_shortcut(
    main: Tensor,
    x: &Tensor,
    shortcut: &Shortcut,
    prof: &mut Profile,
) -> Result<Tensor> {
    match shortcut {
        Shortcut::Disabled => Ok(main),
        Shortcut::Identity => prof.time(OpKind::Add, || add_elementwise(&main, x)),
        Shortcut::Downsample { dconv, pconv } => {
            let s = dconv.forward(x, prof)?;
            let s = pconv.forward(&s, prof)?;
            prof.time(OpKind::Add, || add_elementwise(&main, &s))
        }
    }
}

impl Network {
    pub fn forward_profiled(&self, x: &Tensor, prof: &mut Profile) -> Result<Tensor> {
        let shape = x.shape();
        if shape.c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "network expects 3 input channels, got {}",
                shape.c
            )));
        }
        if shape.h < 32 || shape.w < 32 {
            return Err(Error::ShapeMismatch(format!(
                "network needs spatial dims >= 32, got {}x{}",
                shape.h, shape.w
            )));
        }
        let mut y = self.stem.forward(x, prof)?;
        for block in &self.blocks {
            y = match block {
                Bottleneck::RepGhost(b) => b.forward(&y, prof)?,
                Bottleneck::Ghost(b) => b.forward(&y, prof)?,
            };
        }
        y = self.tail.forward(&y, prof)?;
        y = prof.time(OpKind::AvgPool, || global_avg_pool(&y));
        y = self.head.forward(&y, prof)?;
        self.classifier.forward(&y, prof)
    }

    /// True once no BN remains anywhere and all modules are in deploy form.
    pub fn is_deploy(&self) -> bool {
        structure_report(self).bn_ops == 0
            && self.blocks.iter().all(|b| match b {
                Bottleneck::RepGhost(rb) => {
                    rb.module1.is_deploy() && rb.module2.is_deploy()
                }
                Bottleneck::Ghost(_) => true,
            })
    }
}

impl InferenceModel for Network {
    fn in_channels(&self) -> usize {
        3
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_profiled(x, &mut Profile::disabled())
    }
}

/// Forward pass; logits come back as `(n, classes, 1, 1)`.
pub fn network_forward(net: &Network, x: &Tensor) -> Result<Tensor> {
    net.forward(x)
}

/// Fuse every RepGhost module and fold every remaining conv+BN pair. The
/// result contains no batch norm operators; converting an already converted
/// network is a no-op.
pub fn convert_network(net: &Network) -> Result<Network> {
    let mut out = net.clone();
    out.stem = out.stem.folded()?;
    out.tail = out.tail.folded()?;
    out.head = out.head.folded()?;
    out.classifier = out.classifier.folded()?;
    for block in &mut out.blocks {
        match block {
            Bottleneck::RepGhost(b) => {
                for module in [&mut b.module1, &mut b.module2] {
                    if let RepGhostModule::Train(m) = module {
                        *module = RepGhostModule::Deploy(fuse_module(m)?);
                    }
                }
                if let Some(d) = &b.mid_dconv {
                    b.mid_dconv = Some(d.folded()?);
                }
                fold_shortcut(&mut b.shortcut)?;
            }
            Bottleneck::Ghost(b) => {
                b.module1 = b.module1.folded()?;
                b.module2 = b.module2.folded()?;
                if let Some(d) = &b.mid_dconv {
                    b.mid_dconv = Some(d.folded()?);
                }
                fold_shortcut(&mut b.shortcut)?;
            }
        }
    }
    Ok(out)
}

fn fold_shortcut(shortcut: &mut Shortcut) -> Result<()> {
    if let Shortcut::Downsample { dconv, pconv } = shortcut {
        *dconv = dconv.folded()?;
        *pconv = pconv.folded()?;
    }
    Ok(())
}

fn repghost_module_params(m: &RepGhostModule, fused: bool) -> u64 {
    match m {
        RepGhostModule::Deploy(d) => d.num_params(),
        RepGhostModule::Train(t) => {
            if fused {
                // Deploy equivalent: primary conv with bias + fused 3x3 dconv.
                let c = t.out_channels() as u64;
                t.primary_conv.weight.len() as u64 + c + 9 * c + c
            } else {
                t.num_params()
            }
        }
    }
}

fn repghost_module_macs(m: &RepGhostModule, h: usize, w: usize, fused: bool) -> u64 {
    match m {
        RepGhostModule::Deploy(d) => d.macs(h, w),
        RepGhostModule::Train(t) => {
            if fused {
                t.primary_conv.macs(h, w) + 9 * (t.out_channels() * h * w) as u64
            } else {
                t.macs(h, w)
            }
        }
    }
}

/// Total scalar parameters. With `fused` set the deploy form is counted
/// (convolutions with biases, SE, classifier); otherwise the graph as
/// materialized, with gamma/beta per BN.
pub fn count_params(net: &Network, fused: bool) -> u64 {
    let mut total = net.stem.num_params(fused)
        + net.tail.num_params(fused)
        + net.head.num_params(fused)
        + net.classifier.num_params(fused);
    for block in &net.blocks {
        total += match block {
            Bottleneck::RepGhost(b) => {
                repghost_module_params(&b.module1, fused)
                    + repghost_module_params(&b.module2, fused)
                    + b.mid_dconv.as_ref().map_or(0, |d| d.num_params(fused))
                    + b.se.as_ref().map_or(0, |s| s.num_params())
                    + b.shortcut.num_params(fused)
            }
            Bottleneck::Ghost(b) => {
                b.module1.num_params(fused)
                    + b.module2.num_params(fused)
                    + b.mid_dconv.as_ref().map_or(0, |d| d.num_params(fused))
                    + b.se.as_ref().map_or(0, |s| s.num_params())
                    + b.shortcut.num_params(fused)
            }
        };
    }
    total
}

/// Multiply-accumulate count per sample at the given input size. Convolutions
/// and the linear head count; BN, activations, pooling, add and concat are
/// free under this convention.
pub fn count_flops(net: &Network, input_hw: (usize, usize), fused: bool) -> Result<u64> {
    let (mut h, mut w) = net.stem.conv.out_hw(input_hw.0, input_hw.1)?;
    let mut total = net.stem.conv.macs(h, w);

    for block in &net.blocks {
        match block {
            Bottleneck::RepGhost(b) => {
                total += repghost_module_macs(&b.module1, h, w, fused);
                let (oh, ow) = match &b.mid_dconv {
                    Some(d) => {
                        let (oh, ow) = d.conv.out_hw(h, w)?;
                        total += d.conv.macs(oh, ow);
                        (oh, ow)
                    }
                    None => (h, w),
                };
                if let Some(se) = &b.se {
                    total += se.macs();
                }
                total += repghost_module_macs(&b.module2, oh, ow, fused);
                if let Shortcut::Downsample { dconv, pconv } = &b.shortcut {
                    total += dconv.conv.macs(oh, ow) + pconv.conv.macs(oh, ow);
                }
                h = oh;
                w = ow;
            }
            Bottleneck::Ghost(b) => {
                total += b.module1.macs(h, w);
                let (oh, ow) = match &b.mid_dconv {
                    Some(d) => {
                        let (oh, ow) = d.conv.out_hw(h, w)?;
                        total += d.conv.macs(oh, ow);
                        (oh, ow)
                    }
                    None => (h, w),
                };
                if let Some(se) = &b.se {
                    total += se.macs();
                }
                total += b.module2.macs(oh, ow);
                if let Shortcut::Downsample { dconv, pconv } = &b.shortcut {
                    total += dconv.conv.macs(oh, ow) + pconv.conv.macs(oh, ow);
                }
                h = oh;
                w = ow;
            }
        }
    }

    total += net.tail.conv.macs(h, w);
    // Global pool collapses the spatial dims; head and classifier run at 1x1.
    total += net.head.conv.macs(1, 1);
    total += net.classifier.conv.macs(1, 1);
    Ok(total)
}

/// Shapes fed to one channel concatenation, recorded per site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcatSite {
    pub c1: usize,
    pub c2: usize,
    pub h: usize,
    pub w: usize,
}

/// The `(M1, M2)` shapes of every concat in a Ghost-form network, in
/// execution order. Empty for networks without concatenation.
pub fn enumerate_concat_sites(net: &Network, input_hw: (usize, usize)) -> Result<Vec<ConcatSite>> {
    let mut sites = Vec::new();
    let (mut h, mut w) = net.stem.conv.out_hw(input_hw.0, input_hw.1)?;
    for block in &net.blocks {
        match block {
            Bottleneck::RepGhost(b) => {
                if let Some(d) = &b.mid_dconv {
                    let (oh, ow) = d.conv.out_hw(h, w)?;
                    h = oh;
                    w = ow;
                }
            }
            Bottleneck::Ghost(b) => {
                let half1 = b.module1.primary.conv.c_out;
                sites.push(ConcatSite { c1: half1, c2: half1, h, w });
                if let Some(d) = &b.mid_dconv {
                    let (oh, ow) = d.conv.out_hw(h, w)?;
                    h = oh;
                    w = ow;
                }
                let half2 = b.module2.primary.conv.c_out;
                sites.push(ConcatSite { c1: half2, c2: half2, h, w });
            }
        }
    }
    Ok(sites)
}

/// Static structure facts used by the deploy-form checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    /// Batch norm operators anywhere in the graph.
    pub bn_ops: usize,
    /// Elementwise adds inside modules (branch sums); shortcut adds excluded.
    pub intra_module_adds: usize,
    /// Channel concatenations inside modules.
    pub intra_module_concats: usize,
    /// Per bottleneck: main chain plus shortcut if enabled.
    pub branch_counts: Vec<usize>,
}

pub fn structure_report(net: &Network) -> StructureReport {
    let mut bn = net.stem.bn_count() + net.tail.bn_count() + net.head.bn_count()
        + net.classifier.bn_count();
    let mut adds = 0usize;
    let mut concats = 0usize;
    let mut branches = Vec::with_capacity(net.blocks.len());

    for block in &net.blocks {
        match block {
            Bottleneck::RepGhost(b) => {
                for m in [&b.module1, &b.module2] {
                    match m {
                        RepGhostModule::Train(t) => {
                            bn += 1; // primary
                            for br in &t.branches {
                                bn += match br {
                                    crate::reparam::Branch::Dconv3x3Bn { .. } => 1,
                                    crate::reparam::Branch::BnOnly(_) => 1,
                                    crate::reparam::Branch::Dconv1x1Bn { .. } => 1,
                                    crate::reparam::Branch::Identity => 0,
                                };
                            }
                            adds += t.branches.len() - 1;
                        }
                        RepGhostModule::Deploy(_) => {}
                    }
                }
                bn += b.mid_dconv.as_ref().map_or(0, |d| d.bn_count());
                if let Shortcut::Downsample { dconv, pconv } = &b.shortcut {
                    bn += dconv.bn_count() + pconv.bn_count();
                }
                branches.push(1 + usize::from(b.shortcut.enabled()));
            }
            Bottleneck::Ghost(b) => {
                bn += b.module1.primary.bn_count()
                    + b.module1.cheap.bn_count()
                    + b.module2.primary.bn_count()
                    + b.module2.cheap.bn_count()
                    + b.mid_dconv.as_ref().map_or(0, |d| d.bn_count());
                if let Shortcut::Downsample { dconv, pconv } = &b.shortcut {
                    bn += dconv.bn_count() + pconv.bn_count();
                }
                concats += 2;
                branches.push(1 + usize::from(b.shortcut.enabled()));
            }
        }
    }

    StructureReport {
        bn_ops: bn,
        intra_module_adds: adds,
        intra_module_concats: concats,
        branch_counts: branches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, tensor_from_seed, Layout, Shape};

    #[test]
    fn make_divisible_cases() {
        assert_eq!(make_divisible(16.0, 4), 16);
        assert_eq!(make_divisible(16.0 * 0.5, 4), 8);
        // 36 * 1.3 = 46.8: nearest multiple is 48, comfortably above 0.9 * 46.8.
        assert_eq!(make_divisible(46.8, 4), 48);
        // Rounding down to 8 would lose more than 10% of 9, so bump to 12.
        assert_eq!(make_divisible(9.0, 4), 12);
        assert_eq!(make_divisible(1.0, 4), 4);
    }

    #[test]
    fn width_one_channel_sequences_match_the_table() {
        let spec = NetworkSpec::new(1.0, true).unwrap();
        let outs: Vec<usize> = spec.rows.iter().map(|r| spec.scaled(r.c_out)).collect();
        assert_eq!(
            outs,
            vec![16, 24, 24, 40, 40, 80, 80, 80, 80, 112, 112, 160, 160, 160, 160, 160]
        );
        let mids: Vec<usize> = spec.rows.iter().map(|r| spec.scaled(r.c_mid_half)).collect();
        assert_eq!(
            mids,
            vec![8, 24, 36, 36, 60, 120, 100, 120, 120, 240, 336, 336, 480, 480, 480, 480]
        );
    }

    #[test]
    fn half_width_stem_is_eight_channels() {
        let net = build_repghostnet(0.5, true, 1).unwrap();
        assert_eq!(net.stem.conv.c_out, 8);
    }

    #[test]
    fn builder_rejects_nonpositive_width() {
        assert!(matches!(
            build_repghostnet(0.0, true, 1).unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            build_repghostnet(-1.0, true, 1).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn group4_mid_channels_stay_monotone_for_shipped_widths() {
        for width in [0.5, 0.58, 1.0, 1.11, 1.3, 1.5] {
            let spec = NetworkSpec::new(width, true).unwrap();
            let mids: Vec<usize> = spec.rows[6..12]
                .iter()
                .map(|r| spec.scaled(r.c_mid_half))
                .collect();
            for pair in mids.windows(2) {
                assert!(pair[0] <= pair[1], "width {width}: mids {mids:?} not monotone");
            }
        }
    }

    #[test]
    fn table_text_round_trips() {
        let spec = NetworkSpec::new(1.0, true).unwrap();
        let text = spec.to_table_text();
        let parsed = NetworkSpec::parse_table(&text, 1.0, true).unwrap();
        assert_eq!(parsed, spec);

        assert!(NetworkSpec::parse_table("112 8 16 - 1\n", 1.0, true).is_err());
    }

    #[test]
    fn forward_produces_finite_logits_from_zero_input() {
        let net = build_repghostnet(0.5, true, 3).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 64, 64), Layout::Nchw).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1000, 1, 1));
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = build_repghostnet(0.5, true, 3).unwrap();
        let four = Tensor::zeros(Shape::new(1, 4, 64, 64), Layout::Nchw).unwrap();
        assert!(matches!(
            net.forward(&four).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
        let tiny = Tensor::zeros(Shape::new(1, 3, 16, 16), Layout::Nchw).unwrap();
        assert!(matches!(
            net.forward(&tiny).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn batches_are_independent() {
        let net = build_repghostnet(0.5, true, 11).unwrap();
        let a = tensor_from_seed(Shape::new(1, 3, 64, 64), Layout::Nchw, 100).unwrap();
        let b = tensor_from_seed(Shape::new(1, 3, 64, 64), Layout::Nchw, 101).unwrap();
        let stacked = concat_batch(&a, &b);
        let y = net.forward(&stacked).unwrap();
        let ya = net.forward(&a).unwrap();
        let yb = net.forward(&b).unwrap();
        for c in 0..1000 {
            assert!((y.at(0, c, 0, 0) - ya.at(0, c, 0, 0)).abs() <= 1e-5);
            assert!((y.at(1, c, 0, 0) - yb.at(0, c, 0, 0)).abs() <= 1e-5);
        }
    }

    fn concat_batch(a: &Tensor, b: &Tensor) -> Tensor {
        let sa = a.shape();
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::from_vec(Shape::new(2, sa.c, sa.h, sa.w), a.layout(), data).unwrap()
    }

    #[test]
    fn conversion_removes_all_bn_and_is_idempotent() {
        let net = build_repghostnet(0.5, true, 7).unwrap();
        assert!(structure_report(&net).bn_ops > 0);
        let deploy = convert_network(&net).unwrap();
        let report = structure_report(&deploy);
        assert_eq!(report.bn_ops, 0);
        assert_eq!(report.intra_module_adds, 0);
        assert_eq!(report.intra_module_concats, 0);
        assert!(report.branch_counts.iter().all(|&b| b == 2));
        assert!(deploy.is_deploy());

        let again = convert_network(&deploy).unwrap();
        assert_eq!(again, deploy);
    }

    #[test]
    fn conversion_preserves_the_function() {
        let net = build_repghostnet(0.5, true, 5).unwrap();
        let deploy = convert_network(&net).unwrap();
        let x = tensor_from_seed(Shape::new(1, 3, 64, 64), Layout::Nchw, 9).unwrap();
        let d = max_abs_diff(&net.forward(&x).unwrap(), &deploy.forward(&x).unwrap()).unwrap();
        assert!(d <= 1e-4, "train/deploy diff {d}");
    }

    #[test]
    fn conversion_rejects_mid_branch_relu() {
        let spec = NetworkSpec::new(0.5, true).unwrap();
        let opts = RepGhostOptions {
            branch_set: BranchSet::BN,
            relu_in_dconv: true,
        };
        let net = build_repghostnet_opts(&spec, opts, 2).unwrap();
        assert!(matches!(convert_network(&net).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn shortcut_flag_changes_no_counts() {
        let with = build_repghostnet(1.0, true, 4).unwrap();
        let without = build_repghostnet(1.0, false, 4).unwrap();
        for fused in [false, true] {
            assert_eq!(count_params(&with, fused), count_params(&without, fused));
            assert_eq!(
                count_flops(&with, (224, 224), fused).unwrap(),
                count_flops(&without, (224, 224), fused).unwrap()
            );
        }
        // Exactly the table's 11 identity sites are disabled.
        let disabled = without
            .blocks
            .iter()
            .filter(|b| match b {
                Bottleneck::RepGhost(rb) => matches!(rb.shortcut, Shortcut::Disabled),
                Bottleneck::Ghost(gb) => matches!(gb.shortcut, Shortcut::Disabled),
            })
            .count();
        assert_eq!(disabled, 11);
    }

    #[test]
    fn single_conv_param_and_mac_arithmetic() {
        let conv = Conv2dParams::new(3, 16, 3, 2, 1, 1, true).unwrap();
        assert_eq!(conv.num_params(), 16 * 3 * 9 + 16);

        let pointwise = Conv2dParams::new(16, 32, 1, 1, 0, 1, false).unwrap();
        assert_eq!(pointwise.macs(56, 56), 16 * 32 * 56 * 56);
    }

    #[test]
    fn ghost_net_has_32_concat_sites() {
        let net = build_ghostnet(1.0, 6).unwrap();
        let sites = enumerate_concat_sites(&net, (224, 224)).unwrap();
        assert_eq!(sites.len(), 32);
        // First bottleneck: module halves at 112x112, 8 channels each.
        assert_eq!(sites[0], ConcatSite { c1: 8, c2: 8, h: 112, w: 112 });
        // Module-2 site of the first stride-2 bottleneck lands at 56x56.
        assert_eq!(sites[3].h, 56);

        let half = build_ghostnet(0.5, 6).unwrap();
        let half_sites = enumerate_concat_sites(&half, (224, 224)).unwrap();
        assert_eq!(half_sites.len(), 32);
        assert_eq!(half_sites[0].c1, 4);

        let rep = build_repghostnet(1.0, true, 6).unwrap();
        assert!(enumerate_concat_sites(&rep, (224, 224)).unwrap().is_empty());
    }

    #[test]
    fn ghost_add_variant_computes_the_same_function() {
        let net = build_ghostnet(0.5, 8).unwrap();
        let variant = ghost_add_variant(&net).unwrap();
        let x = tensor_from_seed(Shape::new(1, 3, 64, 64), Layout::Nchw, 12).unwrap();
        let d = max_abs_diff(&net.forward(&x).unwrap(), &variant.forward(&x).unwrap()).unwrap();
        assert_eq!(d, 0.0);

        let rep = build_repghostnet(0.5, true, 8).unwrap();
        assert!(ghost_add_variant(&rep).is_err());
    }

    #[test]
    fn deploy_trace_has_no_bn_and_only_shortcut_adds() {
        let net = build_repghostnet(0.5, true, 13).unwrap();
        let deploy = convert_network(&net).unwrap();
        let x = tensor_from_seed(Shape::new(1, 3, 64, 64), Layout::Nchw, 14).unwrap();
        let mut prof = Profile::enabled();
        deploy.forward_profiled(&x, &mut prof).unwrap();
        assert_eq!(prof.count(OpKind::BatchNorm), 0);
        assert_eq!(prof.count(OpKind::Concat), 0);
        assert_eq!(prof.count(OpKind::Add), 16);
    }

    #[test]
    fn fused_count_matches_converted_network() {
        let net = build_repghostnet(0.5, true, 15).unwrap();
        let deploy = convert_network(&net).unwrap();
        assert_eq!(count_params(&net, true), count_params(&deploy, false));
        assert_eq!(count_params(&deploy, true), count_params(&deploy, false));
        assert_eq!(
            count_flops(&net, (224, 224), true).unwrap(),
            count_flops(&deploy, (224, 224), false).unwrap()
        );
    }
}
