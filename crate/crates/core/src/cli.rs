//! Command-line front end: `synth`, `run` and `verify`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    distance_matrix, labeling_error, read_image, read_prototypes_csv, render_labeling, round_to_labeling,
    synth_partition, write_image, write_labeling_csv, write_prototypes_csv, ImageBuffer, Labeling, Metric,
    PrototypeSet,
};
use crate::error::{Error, Result};
use crate::flows::{integrate, potential_value, similarity, FlowParams, FlowState, IntegrationConfig, RhsKind};
use crate::geometry::AssignmentMatrix;
use crate::graph::{grid_graph, symmetrize, uniform_weights};
use crate::io::{write_matrix, write_palm_csv, write_trajectory_csv, TrajectoryRow};
use crate::variational::{
    boundary_field_from_data, build_operators, initial_interior_field, pde_residual, run_palm, vi_residual,
    GridProblem, DEFAULT_MAX_INNER, DEFAULT_TAU, DEFAULT_TOL_INNER,
};
use crate::verify::{run_suite, VerifyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "assignflow",
    version,
    about = "Assignment flows and the PALM labeling solver"
)]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Plain-text key=value file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a noisy Voronoi labeling benchmark.
    Synth(SynthArgs),
    /// Label an image with the assignment flow, the S-flow or the PALM solver.
    Run(RunArgs),
    /// Run the numerical self-checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Grid size as HxW.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Af,
    Sflow,
    Pde,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <Mode as ValueEnum>::from_str(s, true)
    }
}

impl Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Af => "af",
            Mode::Sflow => "sflow",
            Mode::Pde => "pde",
        })
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Input PPM image.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Prototype CSV, one feature vector per line.
    #[arg(long)]
    prototypes: Option<PathBuf>,
    /// Optional ground-truth PPM painted with the prototype colors.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Defaults to the mean positive distance.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    #[arg(long = "tol-inner")]
    tol_inner: Option<f64>,
    #[arg(long = "max-outer")]
    max_outer: Option<usize>,
    #[arg(long = "stop-tol")]
    stop_tol: Option<f64>,
    /// Mean-entropy threshold that ends a flow run.
    #[arg(long = "entropy-tol")]
    entropy_tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    probes: Option<usize>,
}

/// Flag values layered over a config file, with effective values recorded.
struct Settings {
    file: BTreeMap<String, String>,
    effective: Vec<(String, String)>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                    format: "config",
                    reason: format!("line {}: expected key=value", lineno + 1),
                })?;
                file.insert(k.trim().replace('_', "-"), v.trim().to_string());
            }
        }
        Ok(Settings {
            file,
            effective: Vec::new(),
        })
    }

    fn lookup<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|_| Error::Domain(format!("config key {key}: cannot parse {raw:?}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.effective.push((key.to_string(), v.to_string()));
        }
        Ok(value)
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        match self.lookup(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.effective.push((key.to_string(), default.to_string()));
                Ok(default)
            }
        }
    }

    fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.lookup(key, flag)?
            .ok_or_else(|| Error::Domain(format!("missing required setting --{key}")))
    }

    fn manifest(&self, extra: &[(&str, String)]) -> String {
        let mut out = String::new();
        out.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
        for (k, v) in &self.effective {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in extra {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Domain(format!("--{name} must be positive, got {v}")))
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Domain(format!("--size must look like HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h = h.trim().parse::<usize>().map_err(|_| bad())?;
    let w = w.trim().parse::<usize>().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(args: SynthArgs, mut settings: Settings) -> Result<String> {
    let size = settings.get("size", args.size, "64x64".to_string())?;
    let (h, w) = parse_size(&size)?;
    let c = settings.get("labels", args.labels, 5)?;
    if c < 2 {
        return Err(Error::Domain(format!("--labels must be at least 2, got {c}")));
    }
    let seed = settings.get("seed", args.seed, 0u64)?;
    let noise = settings.get("noise", args.noise, 0.2)?;
    let out = PathBuf::from(settings.get("out", args.out.map(|p| p.display().to_string()), "synth".to_string())?);
    let syn = synth_partition(h, w, c, seed, noise)?;
    prepare_out(&out)?;
    let truth_img = render_labeling(&syn.truth, &syn.prototypes, h, w)?;
    write_image(&out.join("truth.ppm"), &truth_img)?;
    write_image(&out.join("noisy.ppm"), &syn.image)?;
    write_prototypes_csv(&out.join("prototypes.csv"), &syn.prototypes)?;
    write_labeling_csv(&out.join("truth_labels.csv"), &syn.truth, w)?;
    write_text(
        &out.join("manifest.txt"),
        &settings.manifest(&[("command", "synth".into())]),
    )?;
    Ok(format!("wrote {h}×{w} benchmark with {c} labels to {}", out.display()))
}

/// Maps a prototype-colored image back to labels (nearest prototype).
fn labels_from_image(img: &ImageBuffer, protos: &PrototypeSet) -> Result<Labeling> {
    let d = distance_matrix(img, protos, Metric::Euclidean)?;
    round_to_labeling(&(-d.as_array()))
}

pub struct RunSummary {
    pub labeling: Labeling,
    pub iterations: usize,
    pub final_energy: f64,
    pub converged: bool,
    pub error: Option<f64>,
}

fn flow_trace(
    omega: &crate::graph::AveragingOperator,
    samples: &[FlowState],
    to_s: impl Fn(&AssignmentMatrix) -> Result<AssignmentMatrix>,
) -> Result<Vec<TrajectoryRow>> {
    samples
        .iter()
        .map(|s| {
            let sim = to_s(&s.w)?;
            Ok(TrajectoryRow {
                t: s.t,
                potential: potential_value(omega, sim.as_array())?,
                mean_entropy: s.w.mean_entropy(),
                min_entry: s.w.min_entry(),
            })
        })
        .collect()
}

fn cmd_run(args: RunArgs, mut settings: Settings) -> Result<String> {
    let mode = settings.get("mode", args.mode, Mode::Af)?;
    let image_path = PathBuf::from(settings.require("image", args.image.map(|p| p.display().to_string()))?);
    let proto_path = PathBuf::from(settings.require("prototypes", args.prototypes.map(|p| p.display().to_string()))?);
    let truth_path = settings.lookup("truth", args.truth.map(|p| p.display().to_string()))?;
    let out = PathBuf::from(settings.get("out", args.out.map(|p| p.display().to_string()), "run".to_string())?);
    for p in [&image_path, &proto_path] {
        if !p.exists() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            ));
        }
    }

    let img = read_image(&image_path)?;
    let protos = read_prototypes_csv(&proto_path)?;
    let (h, w) = (img.height(), img.width());
    let d = distance_matrix(&img, &protos, Metric::Euclidean)?;
    let rho = positive("rho", settings.get("rho", args.rho, d.default_rho())?)?;
    let truth = match truth_path {
        Some(p) => {
            let t = read_image(Path::new(&p))?;
            if (t.height(), t.width()) != (h, w) {
                return Err(Error::mismatch(
                    format!("{h}×{w}"),
                    format!("{}×{}", t.height(), t.width()),
                ));
            }
            Some(labels_from_image(&t, &protos)?)
        }
        None => None,
    };
    prepare_out(&out)?;
    let started = Instant::now();

    let summary = match mode {
        Mode::Af | Mode::Sflow => {
            let step = positive("step", settings.get("step", args.step, 0.1)?)?;
            let t_end = positive("t-end", settings.get("t-end", args.t_end, 100.0)?)?;
            let entropy_tol = positive("entropy-tol", settings.get("entropy-tol", args.entropy_tol, 1e-3)?)?;
            let omega = symmetrize(&uniform_weights(&grid_graph(h, w)?))?;
            let params = FlowParams::new(d, omega.clone(), rho)?;
            let n = h * w;
            let config = IntegrationConfig::new(step, t_end).entropy_stop(entropy_tol);
            let (traj, rows) = if mode == Mode::Af {
                let start = FlowState {
                    w: AssignmentMatrix::barycenter(n, protos.c())?,
                    t: 0.0,
                };
                let traj = integrate(RhsKind::Assignment, &params, start, &config)?;
                let rows = flow_trace(&omega, &traj.samples, |w| similarity(&params, w))?;
                (traj, rows)
            } else {
                let s0 = similarity(&params, &AssignmentMatrix::barycenter(n, protos.c())?)?;
                let traj = integrate(RhsKind::SFlow, &params, FlowState { w: s0, t: 0.0 }, &config)?;
                let rows = flow_trace(&omega, &traj.samples, |s| Ok(s.clone()))?;
                (traj, rows)
            };
            write_trajectory_csv(&out.join("trace.csv"), &rows)?;
            let last = traj.last();
            write_matrix(&out.join("solution.bin"), last.w.as_array())?;
            RunSummary {
                labeling: round_to_labeling(last.w.as_array())?,
                iterations: traj.steps,
                final_energy: rows.last().map(|r| r.potential).unwrap_or(f64::NAN),
                converged: traj.converged,
                error: None,
            }
        }
        Mode::Pde => {
            let alpha = positive("alpha", settings.get("alpha", args.alpha, 1.0)?)?;
            let tau = positive("tau", settings.get("tau", args.tau, DEFAULT_TAU)?)?;
            let tol_inner = positive(
                "tol-inner",
                settings.get("tol-inner", args.tol_inner, DEFAULT_TOL_INNER)?,
            )?;
            let max_outer = settings.get("max-outer", args.max_outer, 1000)?;
            let stop_tol = positive("stop-tol", settings.get("stop-tol", args.stop_tol, 1e-6)?)?;
            let g = boundary_field_from_data(&d, rho, h, w)?;
            let mut problem = GridProblem::with_ring_boundary(h, w, alpha, g, tau)?;
            problem.tol_inner = tol_inner;
            problem.max_inner = DEFAULT_MAX_INNER;
            let f0 = initial_interior_field(&d, rho, &problem)?;
            let ops = build_operators(h, w)?;
            let outcome = run_palm(&ops, &problem, f0, max_outer, stop_tol)?;
            write_palm_csv(&out.join("trace.csv"), &outcome.trace)?;
            write_matrix(&out.join("solution.bin"), &outcome.s)?;
            let vi = vi_residual(&ops, &problem, &outcome.s)?;
            let mut interior: Vec<f64> = pde_residual(&ops, alpha, &outcome.s)?
                .into_iter()
                .enumerate()
                .filter(|(i, _)| !problem.is_boundary(*i))
                .map(|(_, r)| r)
                .collect();
            interior.sort_by(f64::total_cmp);
            let median = interior.get(interior.len() / 2).copied().unwrap_or(0.0);
            settings.effective.push(("vi_residual".into(), format!("{vi:e}")));
            settings
                .effective
                .push(("pde_residual_median".into(), format!("{median:e}")));
            RunSummary {
                labeling: round_to_labeling(&outcome.s)?,
                iterations: outcome.iterations,
                final_energy: outcome.trace.last().map(|r| r.e_alpha).unwrap_or(f64::NAN),
                converged: outcome.converged,
                error: None,
            }
        }
    };
    let mut summary = summary;
    if let Some(t) = &truth {
        summary.error = Some(labeling_error(&summary.labeling, t)?);
    }
    let elapsed = started.elapsed().as_secs_f64();
    write_image(
        &out.join("labeling.ppm"),
        &render_labeling(&summary.labeling, &protos, h, w)?,
    )?;
    write_labeling_csv(&out.join("labels.csv"), &summary.labeling, w)?;
    let mut text = format!(
        "mode={mode}\niterations={}\nfinal_energy={}\nconverged={}\nruntime_s={elapsed:.3}\n",
        summary.iterations, summary.final_energy, summary.converged
    );
    if let Some(e) = summary.error {
        text.push_str(&format!("error={e}\n"));
    }
    write_text(&out.join("summary.txt"), &text)?;
    write_text(
        &out.join("manifest.txt"),
        &settings.manifest(&[("command", "run".into())]),
    )?;
    Ok(text.trim_end().to_string())
}

fn cmd_verify(args: VerifyArgs, mut settings: Settings) -> Result<(bool, String)> {
    let defaults = VerifyConfig::default();
    let config = VerifyConfig {
        seed: settings.get("seed", args.seed, defaults.seed)?,
        draws: settings.get("draws", args.draws, defaults.draws)?,
        probes: settings.get("probes", args.probes, defaults.probes)?,
    };
    let report = run_suite(&config)?;
    Ok((report.all_passed(), report.to_string()))
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_io() {
        EXIT_IO
    } else if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let settings = match Settings::load(cli.config.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let threads = match settings.file.get("threads").map(|v| v.parse::<usize>()) {
        Some(Err(_)) => {
            eprintln!("error: config key threads is not a count");
            return EXIT_VALIDATION;
        }
        Some(Ok(t)) => cli.threads.or(Some(t)),
        None => cli.threads,
    };
    if let Some(t) = threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_VALIDATION;
        }
        // a second build in the same process keeps the first pool
        if rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, settings).map(|m| (true, m)),
        Command::Run(a) => cmd_run(a, settings).map(|m| (true, m)),
        Command::Verify(a) => cmd_verify(a, settings),
    };
    match result {
        Ok((passed, message)) => {
            println!("{message}");
            if passed {
                EXIT_OK
            } else {
                EXIT_NUMERICAL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("64x32").unwrap(), (64, 32));
        assert_eq!(parse_size("3X4").unwrap(), (3, 4));
        assert!(parse_size("64").is_err());
        assert!(parse_size("0x4").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        fs::write(&path, "# comment\nalpha = 2.5\ntol_inner=1e-9\nseed=4\n").unwrap();
        let mut s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.get("alpha", None, 1.0).unwrap(), 2.5);
        assert_eq!(s.get("alpha", Some(3.0), 1.0).unwrap(), 3.0);
        assert_eq!(s.get("tol-inner", None, 1e-8).unwrap(), 1e-9);
        assert_eq!(s.get("tau", None, 10.0).unwrap(), 10.0);
        let m = s.manifest(&[]);
        assert!(m.contains("alpha=2.5\n") && m.contains("tau=10\n"));
        fs::write(&path, "alpha=abc\n").unwrap();
        let mut s = Settings::load(Some(&path)).unwrap();
        assert!(s.get("alpha", None, 1.0).is_err());
        fs::write(&path, "novalue\n").unwrap();
        assert!(Settings::load(Some(&path)).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Domain("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), EXIT_IO);
        assert_eq!(
            run(["assignflow", "synth", "--labels", "1", "--out", "/nonexistent/never"]),
            EXIT_VALIDATION
        );
        assert_eq!(run(["assignflow", "bogus"]), EXIT_VALIDATION);
    }
}
