//! Micro-benchmark harness: concat vs add over a Ghost network's 32
//! concatenation sites across batch sizes, end-to-end network timing and
//! per-operator-type runtime shares.
//!
//! Absolute numbers from the paper's phone are hardware-specific and not
//! reproduced; the harness asserts orderings and trends only and records
//! absolute values as environment-tagged data. Timed regions never allocate
//! or draw random numbers: inputs and output buffers are prepared up front,
//! and every timed region runs on a single thread.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{enumerate_concat_sites, ConcatSite, Network};
use crate::ops::{add_elementwise_into, concat_channels_into};
use crate::profile::{OpKind, Profile};
use crate::tensor::{tensor_from_seed, Layout, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub iterations: usize,
    pub warmup: usize,
    pub batch_sizes: Vec<usize>,
    pub layout: Layout,
    /// Timed regions are single-threaded; anything else is rejected.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iterations: 100,
            warmup: 10,
            batch_sizes: vec![1, 2, 8, 32],
            layout: Layout::Nchw,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.threads != 1 {
            return Err(Error::Config(
                "timed regions are single-threaded; threads must be 1".into(),
            ));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.iter().any(|&b| b == 0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One timed measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub label: String,
    pub op: String,
    pub batch: usize,
    pub shape: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub median_ms: f64,
}

/// Accumulated time for one label at one batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchTotal {
    pub batch: usize,
    pub label: String,
    pub total_ms: f64,
}

/// Fraction of total operator time attributed to one operator type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpShare {
    pub batch: usize,
    pub op: String,
    pub share: f64,
    /// Share difference against a paired run, when one was supplied.
    pub diff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: String,
    pub layout: Layout,
    pub iterations: usize,
    pub warmup: usize,
    pub entries: Vec<BenchEntry>,
    pub totals: Vec<BatchTotal>,
    pub shares: Vec<OpShare>,
    pub notes: Vec<String>,
}

impl BenchReport {
    fn new(cfg: &BenchConfig) -> Self {
        BenchReport {
            environment: environment_string(),
            layout: cfg.layout,
            iterations: cfg.iterations,
            warmup: cfg.warmup,
            entries: Vec::new(),
            totals: Vec::new(),
            shares: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn total(&self, batch: usize, label: &str) -> Option<f64> {
        self.totals
            .iter()
            .find(|t| t.batch == batch && t.label == label)
            .map(|t| t.total_ms)
    }

    /// Accumulated concat time over accumulated add time at one batch size.
    pub fn concat_add_ratio(&self, batch: usize) -> Option<f64> {
        let c = self.total(batch, "concat")?;
        let a = self.total(batch, "add")?;
        (a > 0.0).then(|| c / a)
    }

    /// Line-oriented text form: one record per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# environment {}\n", self.environment));
        s.push_str(&format!(
            "# layout={} iterations={} warmup={}\n",
            self.layout.name(),
            self.iterations,
            self.warmup
        ));
        for e in &self.entries {
            s.push_str(&format!(
                "entry label={} op={} layout={} bs={} shape={} mean_ms={:.6} std_ms={:.6} min_ms={:.6} median_ms={:.6}\n",
                e.label,
                e.op,
                self.layout.name(),
                e.batch,
                e.shape,
                e.mean_ms,
                e.std_ms,
                e.min_ms,
                e.median_ms
            ));
        }
        for t in &self.totals {
            s.push_str(&format!(
                "total label={} bs={} total_ms={:.6}\n",
                t.label, t.batch, t.total_ms
            ));
        }
        for b in self.batches() {
            if let Some(r) = self.concat_add_ratio(b) {
                s.push_str(&format!("ratio bs={b} concat/add={r:.4}\n"));
            }
        }
        for sh in &self.shares {
            match sh.diff {
                Some(d) => s.push_str(&format!(
                    "share op={} bs={} share={:.6} diff={:.6}\n",
                    sh.op, sh.batch, sh.share, d
                )),
                None => s.push_str(&format!(
                    "share op={} bs={} share={:.6}\n",
                    sh.op, sh.batch, sh.share
                )),
            }
        }
        for n in &self.notes {
            s.push_str(&format!("note {n}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn batches(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.totals.iter().map(|t| t.batch).collect();
        b.sort_unstable();
        b.dedup();
        b
    }
}

/// Fraction of the run's operator time spent in `op` at `batch`; 0 when the
/// operator does not appear.
pub fn operator_time_share(report: &BenchReport, op: &str, batch: usize) -> f64 {
    report
        .shares
        .iter()
        .find(|s| s.op == op && s.batch == batch)
        .map_or(0.0, |s| s.share)
}

fn environment_string() -> String {
    let cpus = std::thread::available_parallelism().map_or(0, |n| n.get());
    format!(
        "os={} arch={} cpus={} debug_assertions={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cpus,
        cfg!(debug_assertions)
    )
}

fn stats_ms(samples: &[Duration]) -> (f64, f64, f64, f64) {
    let ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let var = ms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = ms.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    (mean, var.sqrt(), min, median)
}

/// The two feature-join operators under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JoinOp {
    Concat,
    Add,
}

impl JoinOp {
    pub fn name(self) -> &'static str {
        match self {
            JoinOp::Concat => "concat",
            JoinOp::Add => "add",
        }
    }
}

/// Time one operator on one site shape at one batch size. Inputs and the
/// output buffer are allocated and seeded before the timed loop.
#[allow(clippy::too_many_arguments)]
pub fn bench_operator(
    label: &str,
    op: JoinOp,
    site: ConcatSite,
    batch: usize,
    layout: Layout,
    iterations: usize,
    warmup: usize,
) -> Result<BenchEntry> {
    if op == JoinOp::Add && site.c1 != site.c2 {
        return Err(Error::ShapeMismatch(format!(
            "add needs equal channel halves, got {} and {}",
            site.c1, site.c2
        )));
    }
    let a = tensor_from_seed(Shape::new(batch, site.c1, site.h, site.w), layout, 0xA)?;
    let b = tensor_from_seed(Shape::new(batch, site.c2, site.h, site.w), layout, 0xB)?;
    let mut out = match op {
        JoinOp::Concat => Tensor::zeros(
            Shape::new(batch, site.c1 + site.c2, site.h, site.w),
            layout,
        )?,
        JoinOp::Add => Tensor::zeros(Shape::new(batch, site.c1, site.h, site.w), layout)?,
    };

    let mut run = || -> Result<()> {
        match op {
            JoinOp::Concat => concat_channels_into(&a, &b, &mut out)?,
            JoinOp::Add => add_elementwise_into(&a, &b, &mut out)?,
        }
        std::hint::black_box(&out);
        Ok(())
    };

    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed());
    }
    let (mean_ms, std_ms, min_ms, median_ms) = stats_ms(&samples);
    Ok(BenchEntry {
        label: label.to_string(),
        op: op.name().to_string(),
        batch,
        shape: format!("({}, {}+{}, {}, {})", batch, site.c1, site.c2, site.h, site.w),
        mean_ms,
        std_ms,
        min_ms,
        median_ms,
    })
}

/// Time concat and add over every concatenation site of a Ghost-form network
/// (same shapes for both operators), per batch size, with accumulated totals
/// and the concat/add ratio.
pub fn bench_concat_vs_add_suite(
    net: &Network,
    cfg: &BenchConfig,
    input_hw: (usize, usize),
) -> Result<BenchReport> {
    cfg.validate()?;
    let mut report = BenchReport::new(cfg);
    let sites = enumerate_concat_sites(net, input_hw)?;
    if sites.is_empty() {
        report
            .notes
            .push("network has no concatenation sites; nothing to benchmark".into());
        return Ok(report);
    }
    for &batch in &cfg.batch_sizes {
        let mut concat_total = 0.0;
        let mut add_total = 0.0;
        for (i, &site) in sites.iter().enumerate() {
            let label = format!("site{i}");
            let c = bench_operator(
                &label,
                JoinOp::Concat,
                site,
                batch,
                cfg.layout,
                cfg.iterations,
                cfg.warmup,
            )?;
            concat_total += c.mean_ms;
            report.entries.push(c);
            let a = bench_operator(
                &label,
                JoinOp::Add,
                site,
                batch,
                cfg.layout,
                cfg.iterations,
                cfg.warmup,
            )?;
            add_total += a.mean_ms;
            report.entries.push(a);
        }
        report.totals.push(BatchTotal {
            batch,
            label: "concat".into(),
            total_ms: concat_total,
        });
        report.totals.push(BatchTotal {
            batch,
            label: "add".into(),
            total_ms: add_total,
        });
    }
    // Soft trend observation across batch sizes, recorded rather than gated.
    let ratios: Vec<(usize, f64)> = cfg
        .batch_sizes
        .iter()
        .filter_map(|&b| report.concat_add_ratio(b).map(|r| (b, r)))
        .collect();
    if ratios.len() >= 2 {
        let up = ratios.windows(2).filter(|p| p[1].1 >= p[0].1).count();
        report.notes.push(format!(
            "concat/add ratio non-decreasing over {up} of {} batch transitions",
            ratios.len() - 1
        ));
    }
    Ok(report)
}

fn profiled_network_run(
    net: &Network,
    cfg: &BenchConfig,
    input_hw: (usize, usize),
    report: &mut BenchReport,
) -> Result<()> {
    for &batch in &cfg.batch_sizes {
        let x = tensor_from_seed(
            Shape::new(batch, 3, input_hw.0, input_hw.1),
            cfg.layout,
            0xF00D,
        )?;
        for _ in 0..cfg.warmup {
            let y = net.forward_profiled(&x, &mut Profile::disabled())?;
            std::hint::black_box(&y);
        }
        let mut samples = Vec::with_capacity(cfg.iterations);
        let mut agg = Profile::enabled();
        for _ in 0..cfg.iterations {
            let mut prof = Profile::enabled();
            let y = net.forward_profiled(&x, &mut prof)?;
            std::hint::black_box(&y);
            samples.push(prof.sum());
            agg.merge(&prof);
        }
        let (mean_ms, std_ms, min_ms, median_ms) = stats_ms(&samples);
        report.entries.push(BenchEntry {
            label: "forward".into(),
            op: "network".into(),
            batch,
            shape: format!("({batch}, 3, {}, {})", input_hw.0, input_hw.1),
            mean_ms,
            std_ms,
            min_ms,
            median_ms,
        });
        let total = agg.sum().as_secs_f64();
        for kind in OpKind::ALL {
            if agg.count(kind) == 0 {
                continue;
            }
            let t = agg.total(kind).as_secs_f64();
            report.totals.push(BatchTotal {
                batch,
                label: kind.name().into(),
                total_ms: t * 1e3 / cfg.iterations as f64,
            });
            report.shares.push(OpShare {
                batch,
                op: kind.name().into(),
                share: if total > 0.0 { t / total } else { 0.0 },
                diff: None,
            });
        }
    }
    Ok(())
}

/// End-to-end forward timing with a per-operator-type breakdown. The share of
/// an operator type is its accumulated time over the summed operator time.
pub fn bench_network(net: &Network, cfg: &BenchConfig, input_hw: (usize, usize)) -> Result<BenchReport> {
    cfg.validate()?;
    let mut report = BenchReport::new(cfg);
    profiled_network_run(net, cfg, input_hw, &mut report)?;
    Ok(report)
}

/// Paired run: the primary network's report with each operator share carrying
/// its difference against the variant's share. For a concat-form primary and
/// an add-variant the `concat` row's diff is taken against the variant's
/// `add` share, which is the quantity the swap experiment measures.
pub fn bench_network_pair(
    primary: &Network,
    variant: &Network,
    cfg: &BenchConfig,
    input_hw: (usize, usize),
) -> Result<BenchReport> {
    let mut report = bench_network(primary, cfg, input_hw)?;
    let other = bench_network(variant, cfg, input_hw)?;
    for share in report.shares.iter_mut() {
        let against = if share.op == "concat" { "add" } else { share.op.as_str() };
        share.diff = Some(share.share - operator_time_share(&other, against, share.batch));
    }
    report
        .notes
        .push("diff column: primary share minus paired-variant share (concat row vs add)".into());
    Ok(report)
}
