//! Command-line front end. Every option may also come from a `--config`
//! manifest using the same key as the long flag; flags win.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::actions::{pullback, Action};
use crate::baseline::{run_er_hio, ErHioConfig, Schedule, ShrinkwrapConfig};
use crate::error::{check_shape, Error, Result};
use crate::forward::{DiffractionData, SimilarityKind};
use crate::grid::{center, ScalarField};
use crate::io::{format_csv, read_grid, sha256_file, write_grid, write_png, write_text, Manifest, PngScale};
use crate::lddmm::{run_registration, KernelParams, Mode, RunConfig, Spacing};
use crate::simkit::{calibrate_gaussian_std, recon_error, simulate_measurement, NoiseModel};
use crate::template::{estimate_template, AmplitudeMode, TemplateShape, THRESHOLD_NOISE_FREE, THRESHOLD_NOISY};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "difreg", version, about = "Phase retrieval by diffeomorphic registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate noisy diffraction amplitudes from a target image.
    Simulate(SimulateArgs),
    /// Estimate a template from diffraction amplitudes.
    Template(TemplateArgs),
    /// Register a template against diffraction amplitudes.
    Retrieve(RetrieveArgs),
    /// Register a template directly against a target image.
    RegisterDirect(DirectArgs),
    /// ER/HIO phase retrieval with shrinkwrap.
    Erhio(ErhioArgs),
    /// Tabulate errors of several runs against a ground truth.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Manifest with `key = value` defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub max_intensity: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub poisson: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub quantize: Option<bool>,
    #[arg(long)]
    pub gaussian_std: Option<f64>,
    /// Calibrate the Gaussian std to reach this SNR (dB).
    #[arg(long)]
    pub target_snr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `geometric` (needs --G) or `mass`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Geometric ratio of autocorrelation support to object support.
    #[arg(long = "G", alias = "g")]
    pub ratio: Option<f64>,
    /// `disk` or `rect`.
    #[arg(long)]
    pub shape: Option<String>,
    /// Columns over rows for rectangular templates.
    #[arg(long)]
    pub aspect: Option<f64>,
    /// Autocorrelation support threshold, fraction of the peak.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RegistrationFlags {
    /// `geometric`, `mass` or `sqrt-mass`.
    #[arg(long)]
    pub action: Option<String>,
    /// `l2` or `cc`.
    #[arg(long)]
    pub similarity: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cap: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// `unit`, `pixel` or a number.
    #[arg(long)]
    pub spacing: Option<String>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[command(flatten)]
    pub reg: RegistrationFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DirectArgs {
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[command(flatten)]
    pub reg: RegistrationFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ErhioArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schedule: Option<String>,
    /// Shrinkwrap threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Ground truth used to rank restarts.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Initial support threshold on the autocorrelation.
    #[arg(long)]
    pub support_threshold: Option<f64>,
    /// Shrinkwrap period in iterations (0 disables).
    #[arg(long)]
    pub shrinkwrap_every: Option<usize>,
    #[arg(long)]
    pub blur_start: Option<f64>,
    #[arg(long)]
    pub blur_decay: Option<f64>,
    #[arg(long)]
    pub blur_min: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::ShapeMismatch { .. } | Error::Parse { .. } | Error::Io { .. } => 3,
        Error::Degenerate(_) => 4,
    }
}

// ---------------------------------------------------------------------------
// Parameter resolution

const INFO_KEYS: [&str; 2] = ["command", "version"];

struct Params {
    command: &'static str,
    file: Manifest,
    file_path: Option<PathBuf>,
    used: BTreeSet<String>,
    out: Manifest,
    inputs: Vec<(String, PathBuf)>,
}

impl Params {
    fn load(command: &'static str, config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => Manifest::read(p)?,
            None => Manifest::new(),
        };
        if let Some(c) = file.get("command") {
            if c != command {
                return Err(Error::invalid(format!(
                    "manifest is for '{c}', not '{command}'"
                )));
            }
        }
        let mut out = Manifest::new();
        out.set("command", command);
        out.set("version", VERSION);
        Ok(Params {
            command,
            file,
            file_path: config.map(Path::to_path_buf),
            used: BTreeSet::new(),
            out,
            inputs: Vec::new(),
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::invalid(format!("config value for '{key}' ('{raw}'): {e}"))
            }),
        }
    }

    fn opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let from_file = self.file_value::<T>(key)?;
        let v = flag.or(from_file);
        if let Some(v) = &v {
            self.out.set(key, v);
        }
        Ok(v)
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.out.set(key, &v);
        Ok(v)
    }

    fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key, flag)?
            .ok_or_else(|| Error::invalid(format!("missing required option --{key}")))
    }

    fn input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let p = self
            .opt_input(key, flag)?
            .ok_or_else(|| Error::invalid(format!("missing required option --{key}")))?;
        Ok(p)
    }

    fn opt_input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let from_file = self.file_value::<String>(key)?.map(PathBuf::from);
        let p = flag.or(from_file);
        if let Some(p) = &p {
            self.out.set(key, p.display());
            self.inputs.push((key.to_string(), p.clone()));
        }
        Ok(p)
    }

    /// Check unknown keys and input hashes, then return the manifest to write.
    fn finish(mut self) -> Result<Manifest> {
        for (k, _) in self.file.entries() {
            let hash_of = k.strip_suffix("-sha256");
            let known = self.used.contains(k)
                || INFO_KEYS.contains(&k.as_str())
                || hash_of.is_some_and(|base| self.inputs.iter().any(|(key, _)| key == base));
            if !known {
                let at = self
                    .file_path
                    .as_ref()
                    .map(|p| format!(" in {}", p.display()))
                    .unwrap_or_default();
                return Err(Error::invalid(format!(
                    "unknown key '{k}'{at} for '{}'",
                    self.command
                )));
            }
        }
        for (key, path) in std::mem::take(&mut self.inputs) {
            let hash = sha256_file(&path)?;
            let hkey = format!("{key}-sha256");
            if let Some(expected) = self.file.get(&hkey) {
                if expected != hash {
                    return Err(Error::invalid(format!(
                        "{} differs from the file recorded in the manifest",
                        path.display()
                    )));
                }
            }
            self.out.set(&hkey, hash);
        }
        Ok(self.out)
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_timing(dir: &Path, start: Instant) -> Result<()> {
    write_text(
        &dir.join("timing.txt"),
        &format!("wall_seconds = {:.3}\n", start.elapsed().as_secs_f64()),
    )
}

/// Copy `snr.txt` from next to `data` into `out`, if present.
fn carry_snr(data: &Path, out: &Path) -> Result<Option<String>> {
    let src = data.parent().unwrap_or(Path::new(".")).join("snr.txt");
    match fs::read_to_string(&src) {
        Ok(text) => {
            write_text(&out.join("snr.txt"), &text)?;
            Ok(Some(text.trim().to_string()))
        }
        Err(_) => Ok(None),
    }
}

fn read_data(path: &Path) -> Result<DiffractionData> {
    DiffractionData::new(read_grid(path)?).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: msg,
        },
        other => other,
    })
}

// ---------------------------------------------------------------------------
// Commands

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Template(a) => template(a),
        Command::Retrieve(a) => retrieve(a),
        Command::RegisterDirect(a) => register_direct(a),
        Command::Erhio(a) => erhio(a),
        Command::Compare(a) => compare(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let mut p = Params::load("simulate", a.common.config.as_deref())?;
    let target_path = p.input("target", a.target)?;
    let max_intensity = p.get("max-intensity", a.max_intensity, 100.0)?;
    let poisson = p.get("poisson", a.poisson, false)?;
    let quantize = p.get("quantize", a.quantize, false)?;
    let gaussian_std = p.get("gaussian-std", a.gaussian_std, 0.0)?;
    let target_snr: Option<f64> = p.opt("target-snr", a.target_snr)?;
    let seed = p.get("seed", a.seed, 0u64)?;
    let manifest = p.finish()?;

    let target = read_grid(&target_path)?;
    let mut noise = NoiseModel {
        max_intensity,
        poisson,
        quantize,
        gaussian_std,
        seed,
    };
    let mut notes = String::new();
    if let Some(snr) = target_snr {
        let cal = calibrate_gaussian_std(&target, &noise, snr, 0.05)?;
        noise.gaussian_std = cal.gaussian_std;
        notes = format!(
            "calibrated-gaussian-std = {}\ncalibrated-snr = {}\nevaluations = {}\n",
            cal.gaussian_std, cal.snr, cal.evaluations
        );
    }
    let m = simulate_measurement(&target, &noise)?;

    let out = &a.common.out;
    prepare_out(out)?;
    write_grid(&out.join("data.grid"), m.data.values())?;
    write_grid(&out.join("intensity.grid"), &m.measured)?;
    write_png(&out.join("intensity.png"), &center(&m.measured), PngScale::Log)?;
    write_text(&out.join("snr.txt"), &format!("{}\n", m.snr))?;
    if !notes.is_empty() {
        write_text(&out.join("calibration.txt"), &notes)?;
    }
    manifest.write(&out.join("manifest.txt"))?;
    write_timing(out, start)?;
    eprintln!("snr = {} dB", m.snr);
    Ok(())
}

fn template(a: TemplateArgs) -> Result<()> {
    let start = Instant::now();
    let mut p = Params::load("template", a.common.config.as_deref())?;
    let data_path = p.input("data", a.data)?;
    let mode_name = p.get("mode", a.mode, "geometric".to_string())?;
    let mode = match mode_name.as_str() {
        "geometric" => AmplitudeMode::Geometric {
            ratio: p.required("G", a.ratio)?,
        },
        "mass" => {
            // The ratio plays no role here; record nothing for it.
            let _ = p.file_value::<String>("G")?;
            AmplitudeMode::Mass
        }
        other => return Err(Error::invalid(format!("unknown template mode '{other}'"))),
    };
    let shape_name = p.get("shape", a.shape, "disk".to_string())?;
    let mut shape: TemplateShape = shape_name.parse()?;
    if let TemplateShape::Rectangle { aspect } = &mut shape {
        *aspect = p.get("aspect", a.aspect, 1.0)?;
    }
    let noisy = carry_snr_value(&data_path).is_some_and(|s| s.is_finite());
    let default_threshold = if noisy { THRESHOLD_NOISY } else { THRESHOLD_NOISE_FREE };
    let threshold = p.get("threshold", a.threshold, default_threshold)?;
    let manifest = p.finish()?;

    let b = read_data(&data_path)?;
    let (image, est) = estimate_template(&b, mode, shape, threshold)?;

    let out = &a.common.out;
    prepare_out(out)?;
    write_grid(&out.join("template.grid"), &image)?;
    write_png(&out.join("template.png"), &image, PngScale::Linear)?;
    let report = format!(
        "mass = {}\nautocorrelation-support = {}\nG = {}\namplitude = {}\nsupport-area = {}\nthreshold = {}\nshape = {}\n",
        est.mass, est.autoc_support, est.ratio, est.spec.amplitude, est.spec.support_area, est.threshold, est.spec.shape
    );
    write_text(&out.join("report.txt"), &report)?;
    manifest.write(&out.join("manifest.txt"))?;
    write_timing(out, start)?;
    Ok(())
}

fn carry_snr_value(data: &Path) -> Option<f64> {
    let src = data.parent().unwrap_or(Path::new(".")).join("snr.txt");
    fs::read_to_string(src).ok()?.trim().parse().ok()
}

fn registration_config(p: &mut Params, r: RegistrationFlags, mode: Mode) -> Result<RunConfig> {
    let d = RunConfig::default();
    let action: Action = p.get("action", r.action, d.action.to_string())?.parse()?;
    let default_sim = match mode {
        Mode::Indirect => SimilarityKind::CrossCorrelation,
        Mode::Direct => SimilarityKind::L2,
    };
    let similarity: SimilarityKind = p.get("similarity", r.similarity, default_sim.to_string())?.parse()?;
    let cfg = RunConfig {
        sigma: p.get("sigma", r.sigma, d.sigma)?,
        kernel: KernelParams {
            eta: p.get("eta", r.eta, d.kernel.eta)?,
            gamma: p.get("gamma", r.gamma, d.kernel.gamma)?,
        },
        n_steps: p.get("steps", r.steps, d.n_steps)?,
        cap: p.get("cap", r.cap, d.cap)?,
        max_iter: p.get("iters", r.iters, d.max_iter)?,
        action,
        similarity,
        mode,
        spacing: p.get("spacing", r.spacing, d.spacing.to_string())?.parse::<Spacing>()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_registration(
    out: &Path,
    template: &ScalarField,
    data: &ScalarField,
    cfg: &RunConfig,
    manifest: &Manifest,
    start: Instant,
) -> Result<()> {
    let reg = run_registration(template, data, cfg, |r| {
        if r.iteration % 100 == 0 {
            eprintln!(
                "iter {:5}  E {:.6e}  E1 {:.3e}  E2 {:.6e}  max|v| {:.3e}",
                r.iteration, r.total, r.e1, r.e2, r.max_velocity
            );
        }
    })?;
    prepare_out(out)?;
    write_grid(&out.join("reconstruction.grid"), &reg.reconstruction)?;
    write_png(&out.join("reconstruction.png"), &reg.reconstruction, PngScale::Linear)?;
    let rows: Vec<Vec<String>> = reg
        .trace
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                r.total.to_string(),
                r.e1.to_string(),
                r.e2.to_string(),
                r.max_velocity.to_string(),
            ]
        })
        .collect();
    write_text(&out.join("energy.csv"), &format_csv(&["iter", "E", "E1", "E2", "max_v"], &rows))?;
    for (j, phi) in reg.path.phi_t0.iter().enumerate() {
        let est = pullback(template, phi, cfg.action);
        write_grid(&out.join(format!("estimate_t{j:02}.grid")), &est)?;
    }
    let u = reg.path.endpoint().displacement();
    write_grid(&out.join("displacement_x.grid"), &u.x)?;
    write_grid(&out.join("displacement_y.grid"), &u.y)?;
    write_text(
        &out.join("path_distance.txt"),
        &format!("{}\n", reg.path_distance(&cfg.kernel)),
    )?;
    manifest.write(&out.join("manifest.txt"))?;
    write_timing(out, start)
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let start = Instant::now();
    let mut p = Params::load("retrieve", a.common.config.as_deref())?;
    let data_path = p.input("data", a.data)?;
    let template_path = p.input("template", a.template)?;
    let cfg = registration_config(&mut p, a.reg, Mode::Indirect)?;
    let manifest = p.finish()?;

    let b = read_data(&data_path)?;
    let template = read_grid(&template_path)?;
    check_shape(b.shape(), template.dim())?;
    prepare_out(&a.common.out)?;
    carry_snr(&data_path, &a.common.out)?;
    write_registration(&a.common.out, &template, b.values(), &cfg, &manifest, start)
}

fn register_direct(a: DirectArgs) -> Result<()> {
    let start = Instant::now();
    let mut p = Params::load("register-direct", a.common.config.as_deref())?;
    let template_path = p.input("template", a.template)?;
    let target_path = p.input("target", a.target)?;
    let cfg = registration_config(&mut p, a.reg, Mode::Direct)?;
    let manifest = p.finish()?;

    let template = read_grid(&template_path)?;
    let target = read_grid(&target_path)?;
    check_shape(template.dim(), target.dim())?;
    write_registration(&a.common.out, &template, &target, &cfg, &manifest, start)
}

fn erhio(a: ErhioArgs) -> Result<()> {
    let start = Instant::now();
    let mut p = Params::load("erhio", a.common.config.as_deref())?;
    let data_path = p.input("data", a.data)?;
    let d = ErHioConfig::default();
    let schedule: Schedule = p.get("schedule", a.schedule, d.schedule.to_string())?.parse()?;
    let sw = ShrinkwrapConfig {
        threshold: p.get("threshold", a.threshold, d.shrinkwrap.threshold)?,
        every: p.get("shrinkwrap-every", a.shrinkwrap_every, d.shrinkwrap.every)?,
        sigma_start: p.get("blur-start", a.blur_start, d.shrinkwrap.sigma_start)?,
        sigma_decay: p.get("blur-decay", a.blur_decay, d.shrinkwrap.sigma_decay)?,
        sigma_min: p.get("blur-min", a.blur_min, d.shrinkwrap.sigma_min)?,
    };
    let cfg = ErHioConfig {
        schedule,
        shrinkwrap: sw,
        beta: p.get("beta", a.beta, d.beta)?,
        restarts: p.get("restarts", a.restarts, d.restarts)?,
        seed: p.get("seed", a.seed, d.seed)?,
        support_threshold: p.get("support-threshold", a.support_threshold, d.support_threshold)?,
    };
    let truth_path = p.opt_input("truth", a.truth)?;
    let manifest = p.finish()?;

    let b = read_data(&data_path)?;
    let truth = truth_path.as_deref().map(read_grid).transpose()?;
    let run = run_er_hio(&b, &cfg, truth.as_ref())?;

    let out = &a.common.out;
    prepare_out(out)?;
    carry_snr(&data_path, out)?;
    let rows: Vec<Vec<String>> = run
        .restarts
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                r.error.map_or("nan".to_string(), |e| e.to_string()),
                r.fidelity.to_string(),
                r.support.count().to_string(),
                r.kept_previous_mask.to_string(),
            ]
        })
        .collect();
    write_text(
        &out.join("restarts.csv"),
        &format_csv(&["restart", "error", "fidelity", "support", "kept_previous_mask"], &rows),
    )?;
    let best = run.best();
    write_grid(&out.join("reconstruction.grid"), &best.reconstruction)?;
    write_png(&out.join("reconstruction.png"), &best.reconstruction, PngScale::Linear)?;
    write_text(&out.join("best.txt"), &format!("restart = {}\n", best.index))?;
    manifest.write(&out.join("manifest.txt"))?;
    write_timing(out, start)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub method: String,
    pub snr: String,
    pub error: f64,
    pub iterations: usize,
    pub wall_seconds: String,
}

fn read_optional(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok()
}

pub fn compare_run(dir: &Path, truth: &ScalarField) -> Result<CompareRow> {
    let manifest = Manifest::read(&dir.join("manifest.txt"))?;
    let recon = read_grid(&dir.join("reconstruction.grid"))?;
    let error = recon_error(&recon, truth)?;
    let command = manifest.get("command").unwrap_or("unknown");
    let action = manifest.get("action").unwrap_or("geometric");
    let (method, iterations) = match command {
        "retrieve" | "register-direct" => {
            let energy = read_optional(&dir.join("energy.csv")).unwrap_or_default();
            let n = energy.lines().count().saturating_sub(1);
            let prefix = if command == "retrieve" { "lddmm" } else { "direct" };
            (format!("{prefix}-{action}"), n)
        }
        "erhio" => {
            let schedule: Schedule = manifest.get("schedule").unwrap_or("ER50HIO100x20").parse()?;
            ("er-hio".to_string(), schedule.total_iterations())
        }
        other => (other.to_string(), 0),
    };
    let snr = read_optional(&dir.join("snr.txt"))
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "nan".into());
    let wall_seconds = read_optional(&dir.join("timing.txt"))
        .and_then(|t| Manifest::parse(&t, dir).ok())
        .and_then(|m| m.get("wall_seconds").map(str::to_string))
        .unwrap_or_else(|| "nan".into());
    Ok(CompareRow {
        run: dir.display().to_string(),
        method,
        snr,
        error,
        iterations,
        wall_seconds,
    })
}

fn compare(a: CompareArgs) -> Result<()> {
    let start = Instant::now();
    let mut p = Params::load("compare", a.common.config.as_deref())?;
    let truth_path = p.input("truth", a.truth)?;
    let runs: Vec<PathBuf> = if a.runs.is_empty() {
        p.file_value::<String>("runs")?
            .map(|s| s.split(';').filter(|x| !x.is_empty()).map(PathBuf::from).collect())
            .unwrap_or_default()
    } else {
        let _ = p.file_value::<String>("runs")?;
        a.runs
    };
    if runs.is_empty() {
        return Err(Error::invalid("missing required option --runs"));
    }
    p.out.set(
        "runs",
        runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>().join(";"),
    );
    let manifest = p.finish()?;

    let truth = read_grid(&truth_path)?;
    let rows = runs
        .iter()
        .map(|r| compare_run(r, &truth))
        .collect::<Result<Vec<_>>>()?;

    let out = &a.common.out;
    prepare_out(out)?;
    let header = ["run", "method", "snr", "error", "iterations", "wall_seconds"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                r.method.clone(),
                r.snr.clone(),
                r.error.to_string(),
                r.iterations.to_string(),
                r.wall_seconds.clone(),
            ]
        })
        .collect();
    write_text(&out.join("compare.csv"), &format_csv(&header, &cells))?;
    write_text(&out.join("compare.txt"), &aligned_table(&header, &cells))?;
    manifest.write(&out.join("manifest.txt"))?;
    write_timing(out, start)?;
    print!("{}", aligned_table(&header, &cells));
    Ok(())
}

fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(header.to_vec());
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}
