//! Command-line front end: build, convert, verify, count and benchmark
//! Ghost/RepGhost networks reproducibly from seeds.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use repghost::archive::{load_archive, read_archive_meta, save_archive};
use repghost::bench::{bench_concat_vs_add_suite, bench_network, bench_network_pair, BenchConfig};
use repghost::net::{
    build_ghostnet_spec, build_repghostnet_opts, convert_network, count_flops, count_params,
    ghost_add_variant, Arch, Network, NetworkSpec, RepGhostOptions,
};
use repghost::reparam::verify_equivalence_with_threads;
use repghost::tensor::Layout;
use repghost::Result;

#[derive(Parser)]
#[command(
    name = "repghost",
    version,
    about = "CPU inference engine and re-parameterization toolkit for Ghost/RepGhost networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print parameter and MAC counts for the train and fused forms.
    Count(CountArgs),
    /// Build or load a train-form network, fuse it, write the deploy archive.
    Convert(ConvertArgs),
    /// Check train-vs-deploy numerical equivalence on seeded inputs.
    Verify(VerifyArgs),
    /// Time concat vs add over a Ghost network's concatenation sites.
    BenchOp(BenchOpArgs),
    /// Time whole-network forwards with a per-operator breakdown.
    BenchNet(BenchNetArgs),
    /// Write a seeded network to a weight archive.
    Export(ExportArgs),
    /// Load a weight archive and print its summary.
    Import(ImportArgs),
    /// Print the architecture table in its loadable text form.
    Table(TableArgs),
}

#[derive(Args, Clone)]
struct NetArgs {
    /// Network family.
    #[arg(long, default_value = "repghost")]
    arch: String,
    /// Width multiplier applied to all channel counts.
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// Remove identity shortcuts (downsample shortcut blocks are kept).
    #[arg(long)]
    no_shortcut: bool,
    /// Seed for deterministic weight initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Architecture table file; defaults to the built-in table.
    #[arg(long)]
    table: Option<PathBuf>,
}

impl NetArgs {
    fn arch(&self) -> Result<Arch> {
        self.arch.parse()
    }

    fn spec(&self) -> Result<NetworkSpec> {
        match &self.table {
            None => NetworkSpec::new(self.width, !self.no_shortcut),
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                NetworkSpec::parse_table(&text, self.width, !self.no_shortcut)
            }
        }
    }

    fn build(&self) -> Result<Network> {
        let spec = self.spec()?;
        match self.arch()? {
            Arch::RepGhost => build_repghostnet_opts(&spec, RepGhostOptions::default(), self.seed),
            Arch::Ghost => build_ghostnet_spec(&spec, self.seed),
        }
    }
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split([',', 'x']).collect();
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size '{v}'"));
    match parts.as_slice() {
        [one] => parse(one).map(|v| (v, v)),
        [h, w] => Ok((parse(h)?, parse(w)?)),
        _ => Err("expected H,W or a single side length".into()),
    }
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Input size for the MAC count.
    #[arg(long, value_parser = parse_hw, default_value = "224,224")]
    input_hw: (usize, usize),
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Load the train form from this archive instead of seeding it.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Where the deploy archive is written.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Number of random trials.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, value_parser = parse_hw, default_value = "224,224")]
    input_hw: (usize, usize),
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct BenchOpArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 8, 32])]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value = "nchw")]
    layout: String,
    #[arg(long, value_parser = parse_hw, default_value = "224,224")]
    input_hw: (usize, usize),
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct BenchNetArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize])]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value = "nchw")]
    layout: String,
    #[arg(long, value_parser = parse_hw, default_value = "224,224")]
    input_hw: (usize, usize),
    /// Benchmark the network as built, without fusing it first.
    #[arg(long)]
    train_form: bool,
    /// For ghost networks: also run the add-variant and report share diffs.
    #[arg(long)]
    diff_add_variant: bool,
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Fuse before writing.
    #[arg(long)]
    fused: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct ImportArgs {
    /// Archive to load.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct TableArgs {
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Worker threads for non-timed commands; timed commands stay single-threaded.
fn env_threads() -> usize {
    std::env::var("REPGHOST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn bench_config(
    iters: usize,
    batch_sizes: Vec<usize>,
    layout: &str,
) -> Result<BenchConfig> {
    let cfg = BenchConfig {
        iterations: iters,
        warmup: 10.min(iters),
        batch_sizes,
        layout: layout.parse::<Layout>()?,
        threads: 1,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_count(args: &CountArgs) -> Result<()> {
    let net = args.net.build()?;
    let params_train = count_params(&net, false);
    let params_fused = count_params(&net, true);
    let flops_train = count_flops(&net, args.input_hw, false)?;
    let flops_fused = count_flops(&net, args.input_hw, true)?;
    if args.format == "machine" {
        let doc = json!({
            "arch": args.net.arch()?.name(),
            "width": args.net.width,
            "input_hw": [args.input_hw.0, args.input_hw.1],
            "params": {"train": params_train, "fused": params_fused},
            "macs": {"train": flops_train, "fused": flops_fused},
        });
        println!("{doc}");
    } else {
        println!(
            "{} {:.2}x @ {}x{}",
            args.net.arch()?.name(),
            args.net.width,
            args.input_hw.0,
            args.input_hw.1
        );
        println!(
            "params: train {params_train} ({:.2}M), fused {params_fused} ({:.2}M)",
            params_train as f64 / 1e6,
            params_fused as f64 / 1e6
        );
        println!(
            "macs:   train {flops_train} ({:.1}M), fused {flops_fused} ({:.1}M)",
            flops_train as f64 / 1e6,
            flops_fused as f64 / 1e6
        );
    }
    Ok(())
}

fn run_convert(args: &ConvertArgs) -> Result<()> {
    let train = match &args.weights {
        Some(path) => load_archive(path, &args.net.spec()?)?,
        None => args.net.build()?,
    };
    let deploy = convert_network(&train)?;
    save_archive(&deploy, &args.out)?;
    let params = count_params(&deploy, false);
    if args.format == "machine" {
        println!(
            "{}",
            json!({"out": args.out.display().to_string(), "form": "deploy", "params": params})
        );
    } else {
        println!(
            "wrote deploy archive {} ({params} params)",
            args.out.display()
        );
    }
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<bool> {
    let train = args.net.build()?;
    let deploy = convert_network(&train)?;
    let report = verify_equivalence_with_threads(
        &train,
        &deploy,
        1,
        args.input_hw,
        args.iters,
        1e-4,
        args.net.seed,
        env_threads(),
    )?;
    if args.format == "machine" {
        let doc = json!({
            "arch": args.net.arch()?.name(),
            "width": args.net.width,
            "seed": args.net.seed,
            "trials": report.trials,
            "tol": report.tol,
            "max_diff": report.max_diff,
            "passed": report.passed,
        });
        println!("{doc}");
    } else {
        println!(
            "{} {:.2}x seed {}: {report}",
            args.net.arch()?.name(),
            args.net.width,
            args.net.seed
        );
    }
    Ok(report.passed)
}

fn run_bench_op(args: &BenchOpArgs) -> Result<()> {
    let net = args.net.build()?;
    let cfg = bench_config(args.iters, args.batch_sizes.clone(), &args.layout)?;
    let report = bench_concat_vs_add_suite(&net, &cfg, args.input_hw)?;
    if args.format == "machine" {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run_bench_net(args: &BenchNetArgs) -> Result<()> {
    let built = args.net.build()?;
    let net = if args.train_form {
        built
    } else {
        convert_network(&built)?
    };
    let cfg = bench_config(args.iters, args.batch_sizes.clone(), &args.layout)?;
    let report = if args.diff_add_variant {
        let variant = ghost_add_variant(&net)?;
        bench_network_pair(&net, &variant, &cfg, args.input_hw)?
    } else {
        bench_network(&net, &cfg, args.input_hw)?
    };
    if args.format == "machine" {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<()> {
    let mut net = args.net.build()?;
    if args.fused {
        net = convert_network(&net)?;
    }
    save_archive(&net, &args.out)?;
    let params = count_params(&net, false);
    if args.format == "machine" {
        let doc = json!({
            "out": args.out.display().to_string(),
            "form": if args.fused { "deploy" } else { "train" },
            "params": params,
        });
        println!("{doc}");
    } else {
        println!("wrote archive {} ({params} params)", args.out.display());
    }
    Ok(())
}

fn run_import(args: &ImportArgs) -> Result<()> {
    let meta = read_archive_meta(&args.weights)?;
    let net = load_archive(&args.weights, &meta.spec()?)?;
    let params = count_params(&net, false);
    if args.format == "machine" {
        let doc = json!({
            "arch": meta.arch.name(),
            "form": if meta.deploy { "deploy" } else { "train" },
            "width": meta.width,
            "use_shortcut": meta.use_shortcut,
            "params": params,
        });
        println!("{doc}");
    } else {
        println!(
            "{} {:.2}x ({} form, shortcut={}): {params} params",
            meta.arch.name(),
            meta.width,
            if meta.deploy { "deploy" } else { "train" },
            meta.use_shortcut
        );
    }
    Ok(())
}

fn run_table(args: &TableArgs) -> Result<()> {
    let spec = NetworkSpec::new(1.0, true)?;
    let text = spec.to_table_text();
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Count(a) => run_count(a).map(|()| true),
        Cmd::Convert(a) => run_convert(a).map(|()| true),
        Cmd::Verify(a) => run_verify(a),
        Cmd::BenchOp(a) => run_bench_op(a).map(|()| true),
        Cmd::BenchNet(a) => run_bench_net(a).map(|()| true),
        Cmd::Export(a) => run_export(a).map(|()| true),
        Cmd::Import(a) => run_import(a).map(|()| true),
        Cmd::Table(a) => run_table(a).map(|()| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hw_parser_accepts_pairs_and_squares() {
        assert_eq!(parse_hw("224,224").unwrap(), (224, 224));
        assert_eq!(parse_hw("64x32").unwrap(), (64, 32));
        assert_eq!(parse_hw("96").unwrap(), (96, 96));
        assert!(parse_hw("a,b").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
