mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use minkdeform::analysis;
use minkdeform::geometry::{self, figures, ExportFormat};
use minkdeform::{deform, Minkowski, PhiExpr};
use nalgebra::DVector;

use config::PipelineConfig;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_INPUT_ERROR: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "minkdeform",
    about = "Deformations of Minkowski norms: tensors, validity, inversion, classification, indicatrix geometry",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// pipeline configuration (TOML)
    #[arg(short, long)]
    config: PathBuf,
    /// override the configured sample count
    #[arg(long)]
    resolution: Option<usize>,
    /// override the configured RNG seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<(PipelineConfig, usize, u64)> {
        let cfg = PipelineConfig::load(&self.config)?;
        let res = self.resolution.unwrap_or(cfg.sampling.resolution);
        let seed = self.seed.unwrap_or(cfg.sampling.seed);
        Ok((cfg, res, seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate F and its tensors at a point
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// point, comma-separated coordinates
        #[arg(long, allow_hyphen_values = true)]
        y: String,
    },
    /// Run the validity checks of the final deformation step
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate the inverse profile psi at t
    Invert {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// argument of psi, comma-separated (length p)
        #[arg(long, allow_hyphen_values = true)]
        t: String,
    },
    /// Compose two profiles into the single equivalent profile
    Compose {
        /// first profile: builtin name or expression
        #[arg(long)]
        phi1: String,
        /// second profile: builtin name or expression
        #[arg(long)]
        phi2: String,
        /// number of profile variables
        #[arg(long, default_value_t = 1)]
        arity: usize,
    },
    /// Iterate the final p = 1 deformation step k times
    Iterate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        k: usize,
    },
    /// Classify the norm by its Cartan torsion
    Classify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// threshold override KEY=VAL (euclidean, c_reducible, fit_rank)
        #[arg(long = "threshold", value_parser = parse_threshold)]
        thresholds: Vec<(String, f64)>,
    },
    /// Sample the indicatrix and export it
    Indicatrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// csv, svg (n=2) or obj (n=3)
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Hausdorff distance between the indicatrices of two configs
    Hausdorff {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// second pipeline configuration
        #[arg(long)]
        other: PathBuf,
    },
    /// Regenerate the reference figure families
    Figures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 360)]
        resolution: usize,
    },
}

fn parse_threshold(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| "expected KEY=VAL".to_string())?;
    let val: f64 = v.parse().map_err(|e| format!("bad value: {e}"))?;
    Ok((k.to_string(), val))
}

fn parse_point(s: &str, dim: usize) -> anyhow::Result<DVector<f64>> {
    let coords: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().context("bad coordinate"))
        .collect::<anyhow::Result<_>>()?;
    if coords.len() != dim {
        bail!("expected {dim} coordinates, got {}", coords.len());
    }
    Ok(DVector::from_row_slice(&coords))
}

/// A profile argument is either a builtin name (optionally name:p1:p2) or
/// an expression in s1..sp.
fn parse_profile(s: &str, arity: usize) -> anyhow::Result<PhiExpr> {
    let mut parts = s.split(':');
    let name = parts.next().unwrap_or_default();
    let params: Vec<f64> = parts
        .map(|p| p.parse::<f64>().context("bad profile parameter"))
        .collect::<anyhow::Result<_>>()?;
    if let Ok(phi) = minkdeform::builtin(name, &params) {
        return Ok(phi);
    }
    minkdeform::parse(s, arity).map_err(|e| anyhow!("invalid profile `{s}`: {e}"))
}

fn print_matrix(name: &str, m: &nalgebra::DMatrix<f64>) {
    println!("{name} =");
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:>13.6e}", m[(i, j)])).collect();
        println!("  {}", row.join(" "));
    }
}

fn run() -> anyhow::Result<u8> {
    if let Ok(threads) = std::env::var("MINKDEFORM_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| input_error(anyhow!("MINKDEFORM_THREADS must be an integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Eval { cfg, y } => {
            let (cfg, _, _) = cfg.load().map_err(input_error)?;
            let y = parse_point(&y, cfg.dim).map_err(input_error)?;
            let norm = cfg.norm().map_err(input_error)?;
            let f = norm.eval(&y)?;
            println!("F = {f:.12}");
            print_matrix("g_y", &norm.fundamental_tensor(&y)?.to_matrix());
            let i = norm.mean_cartan(&y)?;
            let row: Vec<String> = i.iter().map(|v| format!("{v:>13.6e}")).collect();
            println!("I_y = {}", row.join(" "));
            print_matrix("K_y", &norm.angular_metric(&y)?.to_matrix());
            let c = norm.cartan_torsion(&y)?;
            println!("|C_y| = {:.6e}", c.frobenius_norm());
            Ok(0)
        }
        Command::Validate { cfg } => {
            let (cfg, res, seed) = cfg.load().map_err(input_error)?;
            let (base, spec) = cfg.last_step().map_err(input_error)?;
            let r = deform::validity_check(&base, &spec, res, seed)?;
            println!("p               = {}", r.p);
            println!("cond_p1         = {}", r.cond_p1);
            println!("phi_positive    = {}", r.phi_positive);
            if let Some(v) = r.yava1 {
                println!("yava1           = {v}");
            }
            if let Some(v) = r.yava2 {
                println!("yava2           = {v}");
            }
            if let Some(v) = r.hess_psi_pd {
                println!("hess_psi_pd     = {v}");
            }
            println!("gbar_pd         = {}", r.gbar_pd);
            println!("min_eigen       = {:.6e}", r.min_eigen);
            println!("samples_used    = {}", r.samples_used);
            println!("domain_failures = {}", r.domain_failures);
            let worst: Vec<String> = r.worst_sample.iter().map(|v| format!("{v:.6}")).collect();
            println!("worst_sample    = ({})", worst.join(", "));
            if r.all_passed() {
                println!("result          = PASS");
                Ok(0)
            } else {
                println!("result          = FAIL");
                Ok(EXIT_CHECK_FAILED)
            }
        }
        Command::Invert { cfg, t } => {
            let (cfg, _, _) = cfg.load().map_err(input_error)?;
            let (_, spec) = cfg.last_step().map_err(input_error)?;
            let t = parse_point(&t, spec.p()).map_err(input_error)?;
            let tv: Vec<f64> = t.iter().copied().collect();
            let psi = deform::invert(&spec, &tv)?;
            println!("psi({}) = {psi:.12}", t.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", "));
            Ok(0)
        }
        Command::Compose { phi1, phi2, arity } => {
            let p1 = parse_profile(&phi1, arity).map_err(input_error)?;
            let p2 = parse_profile(&phi2, arity).map_err(input_error)?;
            let composed = deform::compose(&p1, &p2)?;
            println!("{composed}");
            Ok(0)
        }
        Command::Iterate { cfg, k } => {
            let (cfg, res, seed) = cfg.load().map_err(input_error)?;
            let (base, spec) = cfg.last_step().map_err(input_error)?;
            if spec.p() != 1 {
                return Err(input_error(anyhow!("iteration needs a p = 1 deformation")));
            }
            let result =
                deform::iterate(&base, &spec.betas()[0], spec.phi(), k, res, seed)?;
            let (s_lo, s_hi) = (0.5, 2.0);
            let psi_lo = deform::psi_sequence(spec.phi(), k, s_lo);
            let psi_hi = deform::psi_sequence(spec.phi(), k, s_hi);
            println!("{:>3} {:>8} {:>14} {:>14} {:>10}", "k", "valid", "psi(0.5)", "psi(2)", "exponent");
            for (i, step) in result.steps.iter().enumerate() {
                let valid = step.report.all_passed();
                let (lo, hi) = match (&psi_lo, &psi_hi) {
                    (Ok(lo), Ok(hi)) => (format!("{:.6e}", lo[i]), format!("{:.6e}", hi[i])),
                    _ => ("-".into(), "-".into()),
                };
                let expo = match (&psi_lo, &psi_hi) {
                    (Ok(lo), Ok(hi)) => format!(
                        "{:.4}",
                        (hi[i].ln() - lo[i].ln()) / (s_hi.ln() - s_lo.ln())
                    ),
                    _ => "-".into(),
                };
                println!("{:>3} {:>8} {:>14} {:>14} {:>10}", i + 1, valid, lo, hi, expo);
            }
            match result.first_invalid {
                Some(s) => println!("first invalid step: {s}"),
                None => println!("all steps valid"),
            }
            Ok(0)
        }
        Command::Classify { cfg, thresholds } => {
            let (cfg, res, seed) = cfg.load().map_err(input_error)?;
            let thr = cfg.thresholds(&thresholds).map_err(input_error)?;
            let norm = cfg.norm().map_err(input_error)?;
            let r = analysis::classify_norm_with(&norm, res, seed, &thr)?;
            println!("kind            = {:?}", r.kind);
            println!("mean_cartan_max = {:.6e}", r.mean_cartan_max);
            if let Some(c) = r.c_residual_max {
                println!("c_residual_max  = {c:.6e}");
            }
            println!("p_fit           = {:.6}", r.p_fit);
            println!("semi_c_residual = {:.6e}", r.residual_rel);
            if let Some(fit) = &r.randers_fit {
                println!("quadratic fit: a = {:.6e}, residual = {:.3e}, kropina = {}", fit.a, fit.residual, fit.kropina);
                let b: Vec<String> = fit.beta.iter().map(|v| format!("{v:.6e}")).collect();
                println!("  beta = ({})", b.join(", "));
            }
            Ok(0)
        }
        Command::Indicatrix { cfg, out, format } => {
            let (cfg, res, _) = cfg.load().map_err(input_error)?;
            let norm = cfg.norm().map_err(input_error)?;
            let fmt = match format.as_str() {
                "csv" => ExportFormat::Csv,
                "svg" => ExportFormat::Svg,
                "obj" => ExportFormat::Obj,
                other => return Err(input_error(anyhow!("unknown format `{other}`"))),
            };
            let sample = geometry::indicatrix_sample(&norm, res)?;
            if sample.skipped > 0 {
                println!("skipped {} of {} directions (outside domain)", sample.skipped, res);
            }
            geometry::export(&sample, fmt, &out)?;
            println!("wrote {} ({} points)", out.display(), sample.points.len());
            Ok(0)
        }
        Command::Hausdorff { cfg, other } => {
            let (cfg_a, res, _) = cfg.load().map_err(input_error)?;
            let cfg_b = PipelineConfig::load(&other).map_err(input_error)?;
            let a = geometry::indicatrix_sample(&cfg_a.norm().map_err(input_error)?, res)?;
            let b = geometry::indicatrix_sample(&cfg_b.norm().map_err(input_error)?, res)?;
            let d = geometry::hausdorff(&a, &b)?;
            println!("hausdorff = {d:.12e}");
            Ok(0)
        }
        Command::Figures { out, resolution } => {
            let set = figures::generate(&out, resolution)?;
            for f in &set.files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
    }
}

/// Marker wrapper distinguishing bad input (exit 2) from numeric failures
/// inside the library (exit 3).
#[derive(Debug)]
struct InputError(anyhow::Error);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for InputError {}

fn input_error(e: anyhow::Error) -> anyhow::Error {
    anyhow!(InputError(e))
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(EXIT_INPUT_ERROR)
            } else {
                ExitCode::from(EXIT_NUMERIC)
            }
        }
    }
}
