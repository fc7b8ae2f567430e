use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use taylorformer::backbone::{Network, NetworkConfig};
use taylorformer::costmodel::{self, AttentionPath, ScalingOptions};
use taylorformer::harness::data::{read_pairs, write_pairs};
use taylorformer::harness::haze::{synth_pairs, HazeRanges, Pair};
use taylorformer::harness::image::{read_image, write_image};
use taylorformer::harness::metrics::{psnr, ssim};
use taylorformer::harness::suites::{
    equivalence_suite, gradcheck_suite, EQUIVALENCE_DS, EQUIVALENCE_NS,
};
use taylorformer::harness::train::{dehaze, evaluate, train, TrainSpec};
use taylorformer::{weights, Precision, Real};

#[derive(Parser)]
#[command(
    name = "taylorformer",
    version,
    about = "Taylor-attention dehazing toolkit"
)]
struct Cli {
    /// Network configuration (TOML); defaults to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "f32", value_parser = parse_precision)]
    precision: Precision,
    /// Worker threads for data generation (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Toy,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Cmd {
    /// Time the attention paths over a token sweep; writes scaling.csv and scaling_summary.txt.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [4096, 8192, 16384, 32768, 65536])]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_values = ["linear", "quadratic_taylor", "softmax"])]
        paths: Vec<AttentionPath>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
    /// Finite-difference checks of every module; exits nonzero on any failure.
    Gradcheck,
    /// Linear vs quadratic Taylor attention, and both against softmax.
    Equivalence {
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ds: Option<Vec<usize>>,
    },
    /// Analytic (and optionally instrumented) per-module costs.
    Costs {
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Also run one counted forward pass and compare.
        #[arg(long)]
        measure: bool,
    },
    /// Render clean/hazy pairs into <out>/clean and <out>/hazy.
    SynthData {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a folder of pairs (or fresh synthetic pairs) and checkpoint weights.
    Train {
        /// Folder with hazy/ and clean/; synthetic pairs are generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2000)]
        iterations: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        crop: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr_start: f64,
        #[arg(long, default_value_t = 1e-6)]
        lr_end: f64,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained network on one image.
    Dehaze {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR and SSIM between two images.
    Metrics { a: PathBuf, b: PathBuf },
}

fn network_config(cli: &Cli) -> Result<NetworkConfig> {
    match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            NetworkConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(match cli.preset {
            Preset::Tiny => NetworkConfig::tiny(),
            Preset::Toy => NetworkConfig::toy(),
        }),
    }
}

fn bench<T: Real>(
    ns: &[usize],
    d: usize,
    paths: &[AttentionPath],
    opts: ScalingOptions,
    out: &Path,
) -> Result<()> {
    let mut tables = Vec::new();
    for &p in paths {
        eprintln!("timing {} over {ns:?}", p.name());
        tables.push(costmodel::scaling_experiment::<T>(p, ns, d, opts)?);
    }
    costmodel::write_outputs(&tables, out)?;
    print!("{}", costmodel::summary(&tables));
    Ok(())
}

fn load_data<T: Real>(
    data: Option<&Path>,
    pairs: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Pair<T>>> {
    Ok(match data {
        Some(dir) => read_pairs(dir)?,
        None => synth_pairs(pairs, size, size, &HazeRanges::default(), seed)?,
    })
}

fn run_train<T: Real>(cli: &Cli, data: Vec<Pair<T>>, spec: &TrainSpec, out: &Path) -> Result<()> {
    let cfg = network_config(cli)?;
    let (net, mut store) = Network::new::<T>(&cfg, cli.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let toml = cfg.to_toml();
    fs::write(out.join("config.toml"), &toml)?;
    let ckpt = out.join("weights.tfw");
    let probe: Vec<Pair<T>> = data.iter().take(8).cloned().collect();
    let mut csv = String::from("iter,lr,loss,psnr_hazy,psnr_dehazed\n");
    eprintln!("{} parameters, {} pairs", store.num_scalars(), data.len());
    train(&net, &mut store, &data, spec, |e, s| {
        let r = evaluate(&net, s, &probe)?;
        eprintln!(
            "iter {:>6}  lr {:.3e}  loss {:.5}  psnr {:.2} -> {:.2} dB",
            e.iter, e.lr, e.loss, r.hazy_psnr, r.dehazed_psnr
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.iter, e.lr, e.loss, r.hazy_psnr, r.dehazed_psnr
        ));
        weights::save(&ckpt, s, Some(&toml))
    })?;
    fs::write(out.join("train_log.csv"), csv)?;
    let r = evaluate(&net, &store, &data)?;
    println!(
        "train set: hazy {:.2} dB / {:.4}, dehazed {:.2} dB / {:.4}, gain {:+.2} dB",
        r.hazy_psnr,
        r.hazy_ssim,
        r.dehazed_psnr,
        r.dehazed_ssim,
        r.gain_db()
    );
    Ok(())
}

fn run_dehaze<T: Real>(cli: &Cli, weights_path: &Path, input: &Path, output: &Path) -> Result<()> {
    let (manifest, tensors) = weights::load::<T>(weights_path)?;
    let cfg = match (&cli.config, manifest.config) {
        (None, Some(text)) => NetworkConfig::from_toml(&text)?,
        _ => network_config(cli)?,
    };
    let (net, mut store) = Network::new::<T>(&cfg, 0)?;
    store
        .load(tensors)
        .with_context(|| format!("{} does not fit this network", weights_path.display()))?;
    let img = read_image::<T>(input)?;
    let out = dehaze(&net, &store, &img)?;
    write_image(output, &out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if cli.threads != 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()?;
    }
    let f64p = matches!(cli.precision, Precision::F64);
    match &cli.cmd {
        Cmd::Bench {
            ns,
            d,
            paths,
            trials,
            warmups,
            out,
        } => {
            let opts = ScalingOptions {
                trials: *trials,
                warmups: *warmups,
                seed: cli.seed,
            };
            if f64p {
                bench::<f64>(ns, *d, paths, opts, out)?
            } else {
                bench::<f32>(ns, *d, paths, opts, out)?
            }
        }
        Cmd::Gradcheck => {
            let reports = gradcheck_suite(cli.seed)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed", reports.len());
            return Ok(failed == 0);
        }
        Cmd::Equivalence { ns, ds } => {
            let ns = ns.clone().unwrap_or(EQUIVALENCE_NS.to_vec());
            let ds = ds.clone().unwrap_or(EQUIVALENCE_DS.to_vec());
            println!(
                "{:>6} {:>4} {:>12} {:>12} {:>12} {:>12}",
                "N", "D", "lin/quad f64", "f32", "softmax o1", "o2"
            );
            let mut worst: f64 = 0.0;
            for r in equivalence_suite(&ns, &ds, cli.seed)? {
                worst = worst.max(r.rel_err_f64);
                println!(
                    "{:>6} {:>4} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e}",
                    r.n,
                    r.d,
                    r.rel_err_f64,
                    r.rel_err_f32,
                    r.softmax_dev_order1,
                    r.softmax_dev_order2
                );
            }
            println!("max linear/quadratic relative error at f64: {worst:.3e}");
        }
        Cmd::Costs {
            height,
            width,
            measure,
        } => {
            let cfg = network_config(&cli)?;
            let report = match (*measure, f64p) {
                (false, _) => costmodel::count_costs(&cfg, *height, *width)?,
                (true, false) => costmodel::measure_costs::<f32>(&cfg, *height, *width, cli.seed)?,
                (true, true) => costmodel::measure_costs::<f64>(&cfg, *height, *width, cli.seed)?,
            };
            print!("{}", report.render());
            if !report.mismatches().is_empty() {
                eprintln!("instrumented counts differ from the analytic model");
                return Ok(false);
            }
        }
        Cmd::SynthData {
            count,
            height,
            width,
            out,
        } => {
            let pairs =
                synth_pairs::<f64>(*count, *height, *width, &HazeRanges::default(), cli.seed)?;
            write_pairs(out, &pairs)?;
            println!("wrote {count} pairs to {}", out.display());
        }
        Cmd::Train {
            data,
            pairs,
            size,
            iterations,
            batch,
            crop,
            lr_start,
            lr_end,
            log_every,
            out,
        } => {
            let spec = TrainSpec {
                iterations: *iterations,
                batch: *batch,
                crop: *crop,
                lr_start: *lr_start,
                lr_end: *lr_end,
                seed: cli.seed,
                flip: true,
                log_every: *log_every,
            };
            let data = data.as_deref();
            if f64p {
                let d = load_data::<f64>(data, *pairs, *size, cli.seed)?;
                run_train(&cli, d, &spec, out)?
            } else {
                let d = load_data::<f32>(data, *pairs, *size, cli.seed)?;
                run_train(&cli, d, &spec, out)?
            }
        }
        Cmd::Dehaze {
            weights,
            input,
            output,
        } => {
            if f64p {
                run_dehaze::<f64>(&cli, weights, input, output)?
            } else {
                run_dehaze::<f32>(&cli, weights, input, output)?
            }
        }
        Cmd::Metrics { a, b } => {
            let (x, y) = (read_image::<f64>(a)?, read_image::<f64>(b)?);
            println!("psnr {:.4} dB", psnr(&x, &y)?);
            println!("ssim {:.6}", ssim(&x, &y)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
