//! Alternating-projection phase retrieval: error reduction, hybrid
//! input-output and shrinkwrap support refinement.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_shape, Error, Result};
use crate::forward::{backproject, forward_modulus, DiffractionData};
use crate::grid::{signed_freq, spectral_filter, ScalarField, Shape};
use crate::simkit::recon_error;
use crate::template::autocorrelation;

pub const HIO_BETA: f64 = 0.9;

/// Nodes inside the object support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportMask {
    mask: Array2<bool>,
}

impl SupportMask {
    pub fn new(mask: Array2<bool>) -> Result<Self> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("support mask is empty"));
        }
        Ok(SupportMask { mask })
    }

    pub fn full(shape: Shape) -> Self {
        SupportMask {
            mask: Array2::from_elem(shape, true),
        }
    }

    /// Nodes where `f` is nonzero.
    pub fn from_nonzero(f: &ScalarField) -> Result<Self> {
        SupportMask::new(f.mapv(|v| v != 0.0))
    }

    pub fn shape(&self) -> Shape {
        self.mask.dim()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.mask
    }

    /// `f` inside the support, zero outside.
    pub fn apply(&self, f: &ScalarField) -> ScalarField {
        let mut out = f.clone();
        Zip::from(&mut out).and(&self.mask).for_each(|v, &m| {
            if !m {
                *v = 0.0
            }
        });
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionState {
    pub estimate: ScalarField,
    pub support: SupportMask,
    pub iteration: usize,
    pub seed: u64,
}

impl ProjectionState {
    pub fn new(estimate: ScalarField, support: SupportMask, seed: u64) -> Result<Self> {
        check_shape(support.shape(), estimate.dim())?;
        Ok(ProjectionState {
            estimate,
            support,
            iteration: 0,
            seed,
        })
    }
}

/// Replace the Fourier modulus of `estimate` by `b`, keeping its phase.
pub fn modulus_projection(estimate: &ScalarField, b: &DiffractionData) -> Result<ScalarField> {
    check_shape(b.shape(), estimate.dim())?;
    Ok(backproject(b.values(), estimate))
}

pub fn er_step(state: &mut ProjectionState, b: &DiffractionData) -> Result<()> {
    let y = modulus_projection(&state.estimate, b)?;
    state.estimate = Array2::from_shape_fn(y.dim(), |ix| {
        if state.support.mask[ix] {
            y[ix].max(0.0)
        } else {
            0.0
        }
    });
    state.iteration += 1;
    Ok(())
}

pub fn hio_step(state: &mut ProjectionState, b: &DiffractionData, beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(format!("HIO beta must lie in (0, 1], got {beta}")));
    }
    let y = modulus_projection(&state.estimate, b)?;
    Zip::from(&mut state.estimate)
        .and(&y)
        .and(&state.support.mask)
        .for_each(|x, &y, &inside| {
            if inside && y >= 0.0 {
                *x = y;
            } else {
                *x -= beta * y;
            }
        });
    state.iteration += 1;
    Ok(())
}

/// Periodic Gaussian blur with standard deviation `sigma` pixels.
pub fn gaussian_blur(f: &ScalarField, sigma: f64) -> ScalarField {
    let (rows, cols) = f.dim();
    let s = 2.0 * std::f64::consts::PI * std::f64::consts::PI * sigma * sigma;
    let transfer = Array2::from_shape_fn((rows, cols), |(i, j)| {
        let fi = signed_freq(i, rows) / rows as f64;
        let fj = signed_freq(j, cols) / cols as f64;
        (-s * (fi * fi + fj * fj)).exp()
    });
    spectral_filter(f, &transfer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkwrapOutcome {
    pub support: SupportMask,
    /// The thresholded mask was empty and the previous one was kept.
    pub kept_previous: bool,
}

pub fn shrinkwrap_update(state: &ProjectionState, blur_sigma: f64, threshold: f64) -> Result<ShrinkwrapOutcome> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("shrinkwrap threshold must lie in (0, 1), got {threshold}")));
    }
    let blurred = gaussian_blur(&state.estimate.mapv(f64::abs), blur_sigma);
    let peak = blurred.fold(0.0_f64, |m, &v| m.max(v));
    let cut = threshold * peak;
    let mask = blurred.mapv(|v| peak > 0.0 && v >= cut);
    match SupportMask::new(mask) {
        Ok(support) => Ok(ShrinkwrapOutcome {
            support,
            kept_previous: false,
        }),
        Err(_) => Ok(ShrinkwrapOutcome {
            support: state.support.clone(),
            kept_previous: true,
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Er,
    Hio,
}

/// Iteration schedule such as `ER50HIO100x20`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub blocks: Vec<(StepKind, usize)>,
    pub repeats: usize,
}

impl Schedule {
    pub fn total_iterations(&self) -> usize {
        self.repeats * self.blocks.iter().map(|b| b.1).sum::<usize>()
    }

    pub fn steps(&self) -> impl Iterator<Item = StepKind> + '_ {
        (0..self.repeats).flat_map(move |_| {
            self.blocks
                .iter()
                .flat_map(|&(kind, n)| std::iter::repeat_n(kind, n))
        })
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            blocks: vec![(StepKind::Er, 50), (StepKind::Hio, 100)],
            repeats: 20,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (kind, n) in &self.blocks {
            let name = match kind {
                StepKind::Er => "ER",
                StepKind::Hio => "HIO",
            };
            write!(f, "{name}{n}")?;
        }
        if self.repeats != 1 {
            write!(f, "x{}", self.repeats)?;
        }
        Ok(())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse schedule '{s}'"));
        let upper = s.trim().to_ascii_uppercase();
        let (body, repeats) = match upper.rsplit_once('X') {
            Some((body, r)) => (body.to_string(), r.parse::<usize>().map_err(|_| bad())?),
            None => (upper.clone(), 1),
        };
        let mut blocks = Vec::new();
        let mut rest = body.as_str();
        while !rest.is_empty() {
            let (kind, tail) = if let Some(t) = rest.strip_prefix("HIO") {
                (StepKind::Hio, t)
            } else if let Some(t) = rest.strip_prefix("ER") {
                (StepKind::Er, t)
            } else {
                return Err(bad());
            };
            let digits = tail.chars().take_while(|c| c.is_ascii_digit()).count();
            let n = tail[..digits].parse::<usize>().map_err(|_| bad())?;
            blocks.push((kind, n));
            rest = &tail[digits..];
        }
        let schedule = Schedule { blocks, repeats };
        if schedule.blocks.is_empty() || schedule.total_iterations() == 0 {
            return Err(bad());
        }
        Ok(schedule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShrinkwrapConfig {
    pub threshold: f64,
    /// Refresh period in iterations; 0 disables shrinkwrap.
    pub every: usize,
    pub sigma_start: f64,
    pub sigma_decay: f64,
    pub sigma_min: f64,
}

impl Default for ShrinkwrapConfig {
    fn default() -> Self {
        ShrinkwrapConfig {
            threshold: 0.15,
            every: 50,
            sigma_start: 3.0,
            sigma_decay: 0.99,
            sigma_min: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErHioConfig {
    pub schedule: Schedule,
    pub shrinkwrap: ShrinkwrapConfig,
    pub beta: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Fraction of the autocorrelation peak defining the initial support.
    pub support_threshold: f64,
}

impl Default for ErHioConfig {
    fn default() -> Self {
        ErHioConfig {
            schedule: Schedule::default(),
            shrinkwrap: ShrinkwrapConfig::default(),
            beta: HIO_BETA,
            restarts: 20,
            seed: 0,
            support_threshold: 0.04,
        }
    }
}

/// Centered box with half the extent of the thresholded autocorrelation.
pub fn initial_support(b: &DiffractionData, threshold_frac: f64) -> Result<SupportMask> {
    let auto = autocorrelation(b);
    let peak = auto.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !(peak > 0.0) {
        return Err(Error::Degenerate("autocorrelation has no positive peak".into()));
    }
    let cut = threshold_frac * peak;
    let (rows, cols) = auto.dim();
    let (mut i_lo, mut i_hi, mut j_lo, mut j_hi) = (rows, 0, cols, 0);
    for ((i, j), &v) in auto.indexed_iter() {
        if v >= cut {
            i_lo = i_lo.min(i);
            i_hi = i_hi.max(i);
            j_lo = j_lo.min(j);
            j_hi = j_hi.max(j);
        }
    }
    let h = (i_hi - i_lo + 2) / 2;
    let w = (j_hi - j_lo + 2) / 2;
    let (i0, j0) = (rows / 2 - h / 2, cols / 2 - w / 2);
    SupportMask::new(Array2::from_shape_fn((rows, cols), |(i, j)| {
        (i0..i0 + h).contains(&i) && (j0..j0 + w).contains(&j)
    }))
}

/// Relative modulus mismatch `| |F x| - b | / |b|`.
pub fn fidelity_error(estimate: &ScalarField, b: &DiffractionData) -> f64 {
    let beta = forward_modulus(estimate);
    let num: f64 = beta
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    let den: f64 = b.values().iter().map(|q| q * q).sum();
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestartResult {
    pub index: usize,
    pub reconstruction: ScalarField,
    pub support: SupportMask,
    pub fidelity: f64,
    /// Error against the ground truth, when one was given.
    pub error: Option<f64>,
    pub iterations: usize,
    pub kept_previous_mask: usize,
}

impl RestartResult {
    fn rank_key(&self) -> f64 {
        self.error.unwrap_or(self.fidelity)
    }
}

#[derive(Clone, Debug)]
pub struct ErHioRun {
    pub restarts: Vec<RestartResult>,
    pub best: usize,
}

impl ErHioRun {
    pub fn best(&self) -> &RestartResult {
        &self.restarts[self.best]
    }
}

fn validate(cfg: &ErHioConfig) -> Result<()> {
    if cfg.restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    if !(cfg.beta > 0.0 && cfg.beta <= 1.0) {
        return Err(Error::invalid(format!("HIO beta must lie in (0, 1], got {}", cfg.beta)));
    }
    if !(cfg.support_threshold > 0.0 && cfg.support_threshold < 1.0) {
        return Err(Error::invalid("support threshold must lie in (0, 1)"));
    }
    let sw = &cfg.shrinkwrap;
    if sw.every > 0 {
        if !(sw.threshold > 0.0 && sw.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "shrinkwrap threshold must lie in (0, 1), got {}",
                sw.threshold
            )));
        }
        if !(sw.sigma_start > 0.0 && sw.sigma_min > 0.0 && sw.sigma_decay > 0.0) {
            return Err(Error::invalid("shrinkwrap blur parameters must be positive"));
        }
    }
    Ok(())
}

/// One seeded reconstruction from a random start.
pub fn run_restart(
    b: &DiffractionData,
    cfg: &ErHioConfig,
    index: usize,
    truth: Option<&ScalarField>,
) -> Result<RestartResult> {
    validate(cfg)?;
    let support = initial_support(b, cfg.support_threshold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let start = Array2::from_shape_fn(b.shape(), |ix| {
        let u: f64 = rng.random();
        if support.as_array()[ix] {
            u
        } else {
            0.0
        }
    });
    let mut state = ProjectionState::new(start, support, cfg.seed)?;
    let sw = cfg.shrinkwrap;
    let mut sigma = sw.sigma_start;
    let mut kept = 0;
    for kind in cfg.schedule.steps() {
        match kind {
            StepKind::Er => er_step(&mut state, b)?,
            StepKind::Hio => hio_step(&mut state, b, cfg.beta)?,
        }
        if sw.every > 0 && state.iteration % sw.every == 0 {
            let out = shrinkwrap_update(&state, sigma, sw.threshold)?;
            kept += out.kept_previous as usize;
            state.support = out.support;
            sigma = (sigma * sw.sigma_decay).max(sw.sigma_min);
        }
    }
    let reconstruction = state.support.apply(&state.estimate).mapv(|v| v.max(0.0));
    let fidelity = fidelity_error(&reconstruction, b);
    let error = truth.map(|t| recon_error(&reconstruction, t)).transpose()?;
    Ok(RestartResult {
        index,
        reconstruction,
        support: state.support,
        fidelity,
        error,
        iterations: state.iteration,
        kept_previous_mask: kept,
    })
}

/// Independent restarts in parallel; the best is the lowest error against
/// `truth` when given, otherwise the lowest modulus mismatch.
pub fn run_er_hio(b: &DiffractionData, cfg: &ErHioConfig, truth: Option<&ScalarField>) -> Result<ErHioRun> {
    validate(cfg)?;
    if let Some(t) = truth {
        check_shape(b.shape(), t.dim())?;
    }
    let restarts = (0..cfg.restarts)
        .into_par_iter()
        .map(|k| run_restart(b, cfg, k, truth))
        .collect::<Result<Vec<_>>>()?;
    let best = restarts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.rank_key().total_cmp(&b.1.rank_key()))
        .map(|(i, _)| i)
        .expect("at least one restart");
    Ok(ErHioRun { restarts, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::circshift;

    fn object(n: usize) -> ScalarField {
        // An L-shaped binary object.
        Array2::from_shape_fn((n, n), |(i, j)| {
            let bar = (10..30).contains(&i) && (12..18).contains(&j);
            let foot = (24..30).contains(&i) && (12..26).contains(&j);
            if bar || foot {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn projection_fixed_point_and_zero_data() {
        let f = object(40);
        let b = forward_modulus(&f);
        let p = modulus_projection(&f, &b).unwrap();
        assert!((&p - &f).iter().all(|d| d.abs() < 1e-10));
        let zero = forward_modulus(&Array2::zeros((40, 40)));
        assert!(modulus_projection(&f, &zero).unwrap().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn projection_imposes_modulus() {
        let f = object(32);
        let b = forward_modulus(&f);
        let guess = Array2::from_shape_fn((32, 32), |(i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.5);
        let p = modulus_projection(&guess, &b).unwrap();
        let got = forward_modulus(&p);
        // Modes guarded by the phase floor are absent from the check.
        assert!(got.values().iter().zip(b.values().iter()).all(|(x, y)| (x - y).abs() < 1e-8));
    }

    #[test]
    fn er_and_hio_keep_true_solution() {
        let f = object(40);
        let b = forward_modulus(&f);
        let support = SupportMask::from_nonzero(&f).unwrap();
        let mut s = ProjectionState::new(f.clone(), support.clone(), 0).unwrap();
        er_step(&mut s, &b).unwrap();
        assert!((&s.estimate - &f).iter().all(|d| d.abs() < 1e-8));
        for beta in [0.3, 0.9, 1.0] {
            let mut s = ProjectionState::new(f.clone(), support.clone(), 0).unwrap();
            hio_step(&mut s, &b, beta).unwrap();
            assert!((&s.estimate - &f).iter().all(|d| d.abs() < 1e-8));
        }
    }

    #[test]
    fn er_zeroes_outside_support() {
        let f = object(32);
        let b = forward_modulus(&f);
        let support = SupportMask::from_nonzero(&f).unwrap();
        let start = Array2::from_shape_fn((32, 32), |(i, j)| ((i + j) % 3) as f64);
        let mut s = ProjectionState::new(start, support.clone(), 0).unwrap();
        er_step(&mut s, &b).unwrap();
        for (ix, &v) in s.estimate.indexed_iter() {
            if !support.as_array()[ix] {
                assert_eq!(v, 0.0);
            }
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn er_does_not_increase_modulus_error() {
        let f = object(32);
        let b = forward_modulus(&f);
        let support = SupportMask::from_nonzero(&circshift(&f, 1, 1)).unwrap();
        let start = Array2::from_shape_fn((32, 32), |(i, j)| ((i * 5 + j * 11) % 7) as f64 / 7.0);
        let mut s = ProjectionState::new(support.apply(&start), support, 0).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            er_step(&mut s, &b).unwrap();
            let e = fidelity_error(&s.estimate, &b);
            assert!(e <= last + 1e-12, "{e} > {last}");
            last = e;
        }
    }

    #[test]
    fn hio_outside_rule() {
        let f = object(24);
        let b = forward_modulus(&f);
        let support = SupportMask::from_nonzero(&f).unwrap();
        let x = Array2::from_shape_fn((24, 24), |(i, j)| (i as f64 - j as f64) / 24.0);
        let y = modulus_projection(&x, &b).unwrap();
        let mut s = ProjectionState::new(x.clone(), support.clone(), 0).unwrap();
        hio_step(&mut s, &b, 0.5).unwrap();
        for (ix, &v) in s.estimate.indexed_iter() {
            let expect = if support.as_array()[ix] && y[ix] >= 0.0 { y[ix] } else { x[ix] - 0.5 * y[ix] };
            assert!((v - expect).abs() < 1e-14);
        }
        assert!(hio_step(&mut s, &b, 0.0).is_err());
    }

    #[test]
    fn shrinkwrap_cases() {
        let f = object(48);
        let faint = ProjectionState::new(&f + 1e-3, SupportMask::full((48, 48)), 0).unwrap();
        let tiny = shrinkwrap_update(&faint, 2.0, 1e-6).unwrap();
        assert_eq!(tiny.support.count(), 48 * 48);
        let s = ProjectionState::new(f.clone(), SupportMask::full((48, 48)), 0).unwrap();
        let out = shrinkwrap_update(&s, 1.5, 0.15).unwrap();
        assert!(!out.kept_previous);
        // Dilated blob containing the object.
        for (ix, &v) in f.indexed_iter() {
            if v > 0.0 {
                assert!(out.support.as_array()[ix]);
            }
        }
        assert!(out.support.count() > f.sum() as usize);
        // Oracle: explicit periodic convolution with a sampled Gaussian.
        let sigma = 1.5_f64;
        let n = 48;
        let kern = |d: usize| {
            let d = signed_freq(d, n);
            (-d * d / (2.0 * sigma * sigma)).exp()
        };
        let blurred = Array2::from_shape_fn((n, n), |(i, j)| {
            let mut acc = 0.0;
            for (p, q) in f.indexed_iter().filter(|(_, v)| **v > 0.0).map(|(ix, _)| ix) {
                acc += kern((i + n - p) % n) * kern((j + n - q) % n);
            }
            acc
        });
        let peak = blurred.fold(0.0_f64, |m, &v| m.max(v));
        let expect = blurred.iter().filter(|&&v| v >= 0.15 * peak).count();
        let got = out.support.count() as i64;
        assert!((got - expect as i64).abs() <= 4, "{got} vs {expect}");
    }

    #[test]
    fn shrinkwrap_keeps_mask_on_zero_estimate() {
        let support = SupportMask::from_nonzero(&object(16)).unwrap();
        let s = ProjectionState::new(Array2::zeros((16, 16)), support.clone(), 0).unwrap();
        let out = shrinkwrap_update(&s, 2.0, 0.2).unwrap();
        assert!(out.kept_previous);
        assert_eq!(out.support, support);
    }

    #[test]
    fn schedule_parsing() {
        let s: Schedule = "ER50HIO100x20".parse().unwrap();
        assert_eq!(s, Schedule::default());
        assert_eq!(s.total_iterations(), 3000);
        assert_eq!(s.steps().count(), 3000);
        assert_eq!(s.to_string(), "ER50HIO100x20");
        let t: Schedule = "hio10er5".parse().unwrap();
        assert_eq!(t.total_iterations(), 15);
        assert_eq!(t.steps().next(), Some(StepKind::Hio));
        for bad in ["", "ER", "XY10", "ER10x", "ER0"] {
            assert!(bad.parse::<Schedule>().is_err(), "{bad}");
        }
    }

    #[test]
    fn initial_support_is_half_autocorrelation_box() {
        let f = object(64);
        let b = forward_modulus(&f);
        let s = initial_support(&b, 0.04).unwrap();
        // Oracle: extent of the thresholded direct-sum autocorrelation.
        let pts: Vec<(i64, i64)> = f.indexed_iter().filter(|(_, v)| **v > 0.0).map(|((i, j), _)| (i as i64, j as i64)).collect();
        let mut lags = std::collections::HashMap::new();
        for &(a, c) in &pts {
            for &(p, q) in &pts {
                *lags.entry((p - a, q - c)).or_insert(0.0) += 1.0;
            }
        }
        let peak = pts.len() as f64;
        let kept: Vec<_> = lags.iter().filter(|(_, &v)| v >= 0.04 * peak).map(|(k, _)| *k).collect();
        let ext = |sel: fn(&(i64, i64)) -> i64| kept.iter().map(sel).max().unwrap() - kept.iter().map(sel).min().unwrap() + 1;
        let (h, w) = (ext(|k| k.0), ext(|k| k.1));
        assert_eq!(s.count() as i64, ((h + 1) / 2) * ((w + 1) / 2));
        let rows: Vec<usize> = (0..64).filter(|&i| s.as_array().row(i).iter().any(|&m| m)).collect();
        assert_eq!(rows[0] + rows.len() / 2, 32);
    }

    #[test]
    fn restarts_are_deterministic() {
        let f = object(32);
        let b = forward_modulus(&f);
        let cfg = ErHioConfig {
            schedule: "ER10HIO20x2".parse().unwrap(),
            restarts: 3,
            seed: 9,
            ..ErHioConfig::default()
        };
        let a = run_er_hio(&b, &cfg, None).unwrap();
        let c = run_er_hio(&b, &cfg, None).unwrap();
        assert_eq!(a.restarts, c.restarts);
        assert_eq!(a.best, c.best);
        assert_eq!(a.restarts[0].iterations, 60);
        assert_ne!(a.restarts[0].reconstruction, a.restarts[1].reconstruction);
    }
}
