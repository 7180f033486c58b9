//! Gradient descent on time-dependent velocity fields: kernel smoothing,
//! energy and gradient assembly for both actions, the fixed-amplitude step
//! rule and the descent loop.
//!
//! Velocities are expressed in domain units per unit pseudo-time. By default
//! the domain is the unit torus, so one pixel is `1/N` long; with
//! [`Spacing::Fixed`]`(1.0)` everything is measured in pixels. Inner products
//! on the domain carry the cell area `h^2`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

pub use crate::actions::VelocityPath;
use crate::actions::{pullback, transport_endpoint, Action, DeformationPath};
use crate::error::{check_shape, Error, Result};
use crate::forward::{data_energy, data_term, DiffractionData, ForwardOp, SimilarityKind};
use crate::grid::{
    gradient, interp, jacobian_det, laplacian_symbol, spectral_filter, ScalarField, Shape,
    VectorField,
};

/// Weights of `L = -eta * Laplacian + gamma * id`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    pub eta: f64,
    pub gamma: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            eta: 5e-3,
            gamma: 1.0,
        }
    }
}

impl KernelParams {
    /// Fourier symbol of `L` on a grid with the given spacing.
    pub fn operator_symbol(&self, shape: Shape, spacing: f64) -> ScalarField {
        let s = self.eta / (spacing * spacing);
        laplacian_symbol(shape).mapv(|lam| self.gamma + s * lam)
    }

    /// Fourier symbol of `K = (L^T L)^{-1}`.
    pub fn kernel_symbol(&self, shape: Shape, spacing: f64) -> ScalarField {
        self.operator_symbol(shape, spacing).mapv(|l| 1.0 / (l * l))
    }
}

fn filter_vector(w: &VectorField, symbol: &ScalarField) -> VectorField {
    VectorField {
        x: spectral_filter(&w.x, symbol),
        y: spectral_filter(&w.y, symbol),
    }
}

/// Apply `K = (L^T L)^{-1}` on a unit-spacing grid.
pub fn kernel_smooth(w: &VectorField, k: &KernelParams) -> VectorField {
    kernel_smooth_scaled(w, k, 1.0)
}

pub fn kernel_smooth_scaled(w: &VectorField, k: &KernelParams, spacing: f64) -> VectorField {
    filter_vector(w, &k.kernel_symbol(w.shape(), spacing))
}

/// `L v`
pub fn apply_operator(v: &VectorField, k: &KernelParams, spacing: f64) -> VectorField {
    filter_vector(v, &k.operator_symbol(v.shape(), spacing))
}

/// `<u, w>_V = <L u, L w>_{L2}`
pub fn v_inner(u: &VectorField, w: &VectorField, k: &KernelParams, spacing: f64) -> f64 {
    let sym = k.operator_symbol(u.shape(), spacing);
    let (lu, lw) = (filter_vector(u, &sym), filter_vector(w, &sym));
    spacing * spacing * lu.dot(&lw)
}

/// Length of one grid cell in domain units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Spacing {
    /// The longer grid side spans one unit.
    UnitTorus,
    Fixed(f64),
}

impl Spacing {
    pub fn resolve(self, shape: Shape) -> f64 {
        match self {
            Spacing::UnitTorus => 1.0 / shape.0.max(shape.1) as f64,
            Spacing::Fixed(h) => h,
        }
    }
}

impl fmt::Display for Spacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Spacing::UnitTorus => f.write_str("unit"),
            Spacing::Fixed(h) => write!(f, "{h}"),
        }
    }
}

impl FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Spacing::UnitTorus),
            "pixel" => Ok(Spacing::Fixed(1.0)),
            other => other
                .parse::<f64>()
                .map(Spacing::Fixed)
                .map_err(|_| Error::invalid(format!("spacing must be 'unit', 'pixel' or a number, got '{other}'"))),
        }
    }
}

/// Registration against diffraction amplitudes or directly against an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Indirect,
    Direct,
}

impl Mode {
    pub fn forward_op(self) -> ForwardOp {
        match self {
            Mode::Indirect => ForwardOp::FourierModulus,
            Mode::Direct => ForwardOp::Identity,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Indirect => "indirect",
            Mode::Direct => "direct",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indirect" => Ok(Mode::Indirect),
            "direct" => Ok(Mode::Direct),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    /// Weight of the path energy.
    pub sigma: f64,
    pub kernel: KernelParams,
    pub n_steps: usize,
    /// Largest velocity-update magnitude per iteration.
    pub cap: f64,
    pub max_iter: usize,
    pub action: Action,
    pub similarity: SimilarityKind,
    pub mode: Mode,
    pub spacing: Spacing,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sigma: 1e-3,
            kernel: KernelParams::default(),
            n_steps: 10,
            cap: 1.0 / 500.0,
            max_iter: 1000,
            action: Action::Geometric,
            similarity: SimilarityKind::CrossCorrelation,
            mode: Mode::Indirect,
            spacing: Spacing::UnitTorus,
        }
    }
}

impl RunConfig {
    /// Stronger smoothing used for very noisy data.
    pub fn low_snr() -> Self {
        RunConfig {
            kernel: KernelParams {
                eta: 2e-2,
                gamma: 1.0,
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spacing = match self.spacing {
            Spacing::UnitTorus => 1.0,
            Spacing::Fixed(h) => h,
        };
        let positive = [
            ("sigma", self.sigma),
            ("gamma", self.kernel.gamma),
            ("cap", self.cap),
            ("spacing", spacing),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.kernel.eta >= 0.0 && self.kernel.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be nonnegative, got {}", self.kernel.eta)));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        Ok(())
    }
}

/// `2 sigma v`
pub fn grad_e1(v: &VelocityPath, sigma: f64) -> VelocityPath {
    v.scaled(2.0 * sigma)
}

/// `sigma * dt * sum_j |L v_j|^2`
pub fn path_energy(v: &VelocityPath, k: &KernelParams, sigma: f64, spacing: f64) -> f64 {
    let sym = k.operator_symbol(v.shape(), spacing);
    sigma * v.dt * spacing * spacing * v.fields.iter().map(|f| filter_vector(f, &sym).norm_sq()).sum::<f64>()
}

/// `dt * sum_j |L v_j|`, the length of the path in the V metric.
pub fn path_distance(v: &VelocityPath, k: &KernelParams) -> f64 {
    path_distance_scaled(v, k, 1.0)
}

pub fn path_distance_scaled(v: &VelocityPath, k: &KernelParams, spacing: f64) -> f64 {
    let sym = k.operator_symbol(v.shape(), spacing);
    v.dt * v
        .fields
        .iter()
        .map(|f| spacing * filter_vector(f, &sym).norm_sq().sqrt())
        .sum::<f64>()
}

/// Step length making the largest update magnitude equal to `cap`, or
/// `None` when the gradient vanishes.
pub fn step_size(grad: &VelocityPath, cap: f64) -> Option<f64> {
    let m = grad.max_norm();
    (m > 0.0 && m.is_finite()).then(|| cap / m)
}

// ---------------------------------------------------------------------------
// Data-term gradients at one time step, before smoothing.

/// L2 gradient density `-2 R'(phi_{t,1}) grad(tau) |D phi_{t,1}|` for the
/// geometric action, in unit-spacing form.
fn geometric_density(residual: &ScalarField, tau: &ScalarField, phi_t1: &crate::grid::CoordField) -> VectorField {
    let rho = interp(residual, phi_t1);
    let weight = rho * &jacobian_det(phi_t1) * -2.0;
    gradient(tau).mul_field(&weight)
}

/// L2 gradient density `2 T grad(R'(phi_{t,1}))` where `T` is the template
/// transported as a density. The product is evaluated as
/// `grad(T rho) - rho grad(T)`, which equals it in the continuum and is the
/// exact adjoint of the discrete density pull-back at the identity.
fn density_density(residual: &ScalarField, transported: &ScalarField, phi_t1: &crate::grid::CoordField) -> VectorField {
    let rho = interp(residual, phi_t1);
    let mut out = gradient(&(transported * &rho));
    let g = gradient(transported).mul_field(&rho);
    out.add_scaled(-1.0, &g);
    out.scaled(2.0)
}

fn step_density(
    action: Action,
    residual: &ScalarField,
    tau: &ScalarField,
    phi_t1: &crate::grid::CoordField,
) -> VectorField {
    match action {
        Action::Geometric => geometric_density(residual, tau, phi_t1),
        Action::MassPreserving => density_density(residual, tau, phi_t1),
        Action::SqrtJacobian => {
            let mut w = geometric_density(residual, tau, phi_t1);
            w.add_scaled(1.0, &density_density(residual, tau, phi_t1));
            w.scaled(0.5)
        }
    }
}

/// V-gradient of the data term for the geometric action at time index `j`:
/// `-2 K{ R' o phi_{t,1} * grad(I0 o phi_{t,0}) * |D phi_{t,1}| }`.
///
/// `residual` follows the convention of [`crate::forward::DataTerm`].
pub fn grad_e2_geometric(
    template: &ScalarField,
    residual: &ScalarField,
    path: &DeformationPath,
    j: usize,
    kernel: &KernelParams,
) -> VectorField {
    let endpoint = pullback(template, path.endpoint(), Action::Geometric);
    let tau = transport_endpoint(&endpoint, path, j, Action::Geometric);
    kernel_smooth(&geometric_density(residual, &tau, &path.phi_t1[j]), kernel)
}

/// V-gradient of the data term for the mass-preserving action at time index
/// `j`: `2 K{ I0 o phi_{t,0} * grad(R' o phi_{t,1}) * |D phi_{t,0}| }`.
pub fn grad_e2_density(
    template: &ScalarField,
    residual: &ScalarField,
    path: &DeformationPath,
    j: usize,
    kernel: &KernelParams,
) -> VectorField {
    let endpoint = pullback(template, path.endpoint(), Action::MassPreserving);
    let tau = transport_endpoint(&endpoint, path, j, Action::MassPreserving);
    kernel_smooth(&density_density(residual, &tau, &path.phi_t1[j]), kernel)
}

// ---------------------------------------------------------------------------
// Energy and gradient of the full functional.

/// Everything computed for one velocity path.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub path: DeformationPath,
    pub estimate: ScalarField,
    pub e1: f64,
    pub e2: f64,
    pub gradient: VelocityPath,
}

impl Evaluation {
    pub fn total(&self) -> f64 {
        self.e1 + self.e2
    }
}

/// Velocities in grid units for the flow integrator.
fn to_grid_units(v: &VelocityPath, spacing: f64) -> VelocityPath {
    if spacing == 1.0 {
        v.clone()
    } else {
        v.scaled(1.0 / spacing)
    }
}

/// Energy terms and V-gradient of `E = E1 + E2` at `v`.
pub fn evaluate(
    template: &ScalarField,
    data: &ScalarField,
    v: &VelocityPath,
    cfg: &RunConfig,
) -> Result<Evaluation> {
    let shape = template.dim();
    let kernel = cfg.kernel.kernel_symbol(shape, cfg.spacing.resolve(shape));
    evaluate_with_kernel(template, data, v, cfg, &kernel)
}

fn evaluate_with_kernel(
    template: &ScalarField,
    data: &ScalarField,
    v: &VelocityPath,
    cfg: &RunConfig,
    kernel: &ScalarField,
) -> Result<Evaluation> {
    let h = cfg.spacing.resolve(template.dim());
    let path = DeformationPath::from_velocity(&to_grid_units(v, h));
    let estimate = pullback(template, path.endpoint(), cfg.action);
    let term = data_term(cfg.mode.forward_op(), cfg.similarity, &estimate, data)?;
    let e1 = path_energy(v, &cfg.kernel, cfg.sigma, h);

    let h3 = h.powi(3);
    let fields: Vec<VectorField> = (0..v.n_steps())
        .into_par_iter()
        .map(|i| {
            let j = i + 1;
            let tau = transport_endpoint(&estimate, &path, j, cfg.action);
            let w = step_density(cfg.action, &term.residual, &tau, &path.phi_t1[j]);
            let mut g = filter_vector(&w, kernel).scaled(1.0 / h3);
            g.add_scaled(2.0 * cfg.sigma, &v.fields[i]);
            g
        })
        .collect();

    Ok(Evaluation {
        path,
        estimate,
        e1,
        e2: term.energy,
        gradient: VelocityPath { fields, dt: v.dt },
    })
}

/// `E1(v) + E2(estimate)` for an estimate already transported by `v`.
pub fn total_energy(
    v: &VelocityPath,
    estimate: &ScalarField,
    data: &ScalarField,
    cfg: &RunConfig,
) -> Result<f64> {
    let e2 = data_energy(cfg.mode.forward_op(), cfg.similarity, estimate, data)?;
    let h = cfg.spacing.resolve(v.shape());
    Ok(path_energy(v, &cfg.kernel, cfg.sigma, h) + e2)
}

// ---------------------------------------------------------------------------
// Descent loop

/// One line of the energy trace; also what the progress callback sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyRecord {
    pub iteration: usize,
    pub total: f64,
    pub e1: f64,
    pub e2: f64,
    /// Largest velocity magnitude over all nodes and time steps.
    pub max_velocity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// The gradient vanished exactly at this iteration.
    Stalled { iteration: usize },
}

#[derive(Clone, Debug)]
pub struct Registration {
    /// The template pulled back by `phi_{1,0}`.
    pub reconstruction: ScalarField,
    /// Deformation path in grid units.
    pub path: DeformationPath,
    pub velocity: VelocityPath,
    pub trace: Vec<EnergyRecord>,
    pub status: RunStatus,
    /// Resolved grid spacing the run used.
    pub spacing: f64,
}

impl Registration {
    pub fn path_distance(&self, k: &KernelParams) -> f64 {
        path_distance_scaled(&self.velocity, k, self.spacing)
    }

    pub fn final_record(&self) -> Option<&EnergyRecord> {
        self.trace.last()
    }
}

/// Run the descent loop for `cfg.max_iter` iterations.
///
/// `data` holds diffraction amplitudes in indirect mode and the target image
/// in direct mode. Iteration 0 evaluates the starting point (zero velocity);
/// every later iteration first moves the velocities along the previous
/// gradient, then re-evaluates.
pub fn run_registration<F>(
    template: &ScalarField,
    data: &ScalarField,
    cfg: &RunConfig,
    mut progress: F,
) -> Result<Registration>
where
    F: FnMut(&EnergyRecord),
{
    cfg.validate()?;
    check_shape(template.dim(), data.dim())?;
    if !crate::grid::is_finite(template) {
        return Err(Error::invalid("template contains non-finite values"));
    }
    if cfg.mode == Mode::Indirect {
        DiffractionData::new(data.clone())?;
    }
    let shape = template.dim();
    let kernel = cfg.kernel.kernel_symbol(shape, cfg.spacing.resolve(shape));

    let mut v = VelocityPath::zeros(shape, cfg.n_steps);
    let mut grad = VelocityPath::zeros(shape, cfg.n_steps);
    let mut step = 1.0;
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut status = RunStatus::Completed;
    let mut last: Option<Evaluation> = None;

    for k in 0..cfg.max_iter {
        v.add_scaled(-step, &grad);
        let eval = evaluate_with_kernel(template, data, &v, cfg, &kernel)?;
        let record = EnergyRecord {
            iteration: k,
            total: eval.total(),
            e1: eval.e1,
            e2: eval.e2,
            max_velocity: v.max_norm(),
        };
        progress(&record);
        trace.push(record);
        let next = step_size(&eval.gradient, cfg.cap);
        grad = eval.gradient.clone();
        last = Some(eval);
        match next {
            Some(a) => step = a,
            None => {
                status = RunStatus::Stalled { iteration: k };
                break;
            }
        }
    }

    let (reconstruction, path) = match last {
        Some(eval) => (eval.estimate, eval.path),
        None => (template.clone(), DeformationPath::identity(shape, cfg.n_steps)),
    };
    Ok(Registration {
        reconstruction,
        path,
        velocity: v,
        trace,
        status,
        spacing: cfg.spacing.resolve(shape),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{dft2, idft2_real, CoordField};
    use ndarray::Array2;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_vector(shape: Shape, seed: u64) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorField::new(
            Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn kernel_with_no_laplacian_and_unit_gamma_is_identity() {
        let w = random_vector((8, 6), 1);
        let k = KernelParams { eta: 0.0, gamma: 1.0 };
        let s = kernel_smooth(&w, &k);
        assert!((&s.x - &w.x).iter().chain((&s.y - &w.y).iter()).all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn kernel_leaves_constants_unchanged() {
        let c = VectorField::new(Array2::from_elem((8, 8), 2.0), Array2::from_elem((8, 8), -1.0));
        let s = kernel_smooth(&c, &KernelParams { eta: 3.0, gamma: 1.0 });
        assert!(s.x.iter().all(|v| (v - 2.0).abs() < 1e-13));
        assert!(s.y.iter().all(|v| (v + 1.0).abs() < 1e-13));
    }

    #[test]
    fn kernel_inverts_operator_applied_twice() {
        // Oracle: L via the 5-point stencil in real space, twice.
        let shape = (12, 10);
        let k = KernelParams { eta: 0.7, gamma: 1.3 };
        let w = random_vector(shape, 2);
        let l = |f: &ScalarField| f * k.gamma - crate::grid::laplacian(f) * k.eta;
        let s = kernel_smooth(&w, &k);
        let back_x = l(&l(&s.x));
        let err = (&back_x - &w.x).mapv(f64::abs).fold(0.0_f64, |m, &v| m.max(v));
        assert!(err < 1e-10);
    }

    #[test]
    fn single_mode_scales_by_kernel_eigenvalue() {
        let shape = (16, 16);
        let k = KernelParams { eta: 0.4, gamma: 1.0 };
        let (k1, k2) = (3usize, 5usize);
        let mode = Array2::from_shape_fn(shape, |(i, j)| {
            (2.0 * PI * (k1 as f64 * i as f64 + k2 as f64 * j as f64) / 16.0).cos()
        });
        let lam = 4.0 - 2.0 * (2.0 * PI * 3.0 / 16.0).cos() - 2.0 * (2.0 * PI * 5.0 / 16.0).cos();
        let eig = (k.gamma + k.eta * lam).powi(-2);
        let w = VectorField::new(mode.clone(), mode.clone());
        let s = kernel_smooth(&w, &k);
        let err = (&s.x - &(&mode * eig)).mapv(f64::abs).fold(0.0_f64, |m, &v| m.max(v));
        assert!(err < 1e-10);
    }

    #[test]
    fn grad_e1_cases() {
        let v = VelocityPath::constant(random_vector((6, 6), 3), 4);
        assert_eq!(grad_e1(&v, 0.5), v);
        let z = VelocityPath::zeros((6, 6), 4);
        assert_eq!(grad_e1(&z, 0.3), z);
    }

    #[test]
    fn grad_e1_matches_finite_differences() {
        let shape = (8, 8);
        let k = KernelParams { eta: 0.2, gamma: 1.0 };
        let sigma = 0.37;
        let v = VelocityPath {
            fields: (0..3).map(|s| random_vector(shape, 10 + s)).collect(),
            dt: 1.0 / 3.0,
        };
        let h = VelocityPath {
            fields: (0..3).map(|s| random_vector(shape, 20 + s)).collect(),
            dt: 1.0 / 3.0,
        };
        let eps = 1e-5;
        let e = |x: &VelocityPath| path_energy(x, &k, sigma, 1.0);
        let mut p = v.clone();
        p.add_scaled(eps, &h);
        let mut m = v.clone();
        m.add_scaled(-eps, &h);
        let fd = (e(&p) - e(&m)) / (2.0 * eps);
        let g = grad_e1(&v, sigma);
        let pairing: f64 = v.dt
            * g.fields.iter().zip(&h.fields).map(|(a, b)| v_inner(a, b, &k, 1.0)).sum::<f64>();
        assert!((fd - pairing).abs() / fd.abs() < 1e-6);
    }

    #[test]
    fn zero_residual_or_flat_template_gives_zero_gradient() {
        let shape = (8, 8);
        let k = KernelParams::default();
        let path = DeformationPath::identity(shape, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Array2::from_shape_fn(shape, |_| rng.random_range(0.0..1.0));
        let zero = Array2::zeros(shape);
        for j in 0..=4 {
            assert_eq!(grad_e2_geometric(&img, &zero, &path, j, &k).max_norm(), 0.0);
            assert_eq!(grad_e2_density(&img, &zero, &path, j, &k).max_norm(), 0.0);
        }
        let flat = Array2::from_elem(shape, 2.0);
        assert!(grad_e2_geometric(&flat, &img, &path, 2, &k).max_norm() < 1e-14);
        assert!(grad_e2_density(&zero, &img, &path, 2, &k).max_norm() < 1e-14);
        assert!(grad_e2_density(&img, &flat, &path, 2, &k).max_norm() < 1e-13);
    }

    #[test]
    fn step_size_rule() {
        let mut f = VectorField::zeros((4, 4));
        f.x[(1, 2)] = 0.6;
        f.y[(1, 2)] = 0.8;
        let g = VelocityPath::constant(f, 3);
        let a = step_size(&g, 1.0 / 500.0).unwrap();
        assert!((a - 1.0 / 500.0).abs() < 1e-15);
        let a2 = step_size(&g.scaled(2.0), 1.0 / 500.0).unwrap();
        assert!((a2 - a / 2.0).abs() < 1e-15);
        assert!((g.scaled(a).max_norm() - 1.0 / 500.0).abs() < 1e-15);
        assert_eq!(step_size(&VelocityPath::zeros((4, 4), 3), 0.1), None);
    }

    #[test]
    fn path_distance_is_homogeneous() {
        let k = KernelParams::default();
        let v = VelocityPath::constant(random_vector((8, 8), 5), 5);
        assert_eq!(path_distance(&VelocityPath::zeros((8, 8), 5), &k), 0.0);
        let d = path_distance(&v, &k);
        assert!((path_distance(&v.scaled(3.0), &k) - 3.0 * d).abs() < 1e-12 * d);
    }

    #[test]
    fn total_energy_matches_recomputation() {
        let shape = (8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let template = Array2::from_shape_fn(shape, |_| rng.random_range(0.0..1.0));
        let b = crate::forward::forward_modulus(&template).into_values();
        let cfg = RunConfig {
            similarity: SimilarityKind::L2,
            spacing: Spacing::Fixed(1.0),
            ..RunConfig::default()
        };
        let zero = VelocityPath::zeros(shape, 10);
        assert_eq!(total_energy(&zero, &template, &b, &cfg).unwrap(), 0.0);

        let v = VelocityPath::constant(random_vector(shape, 7).scaled(0.3), 10);
        let eval = evaluate(&template, &b, &v, &cfg).unwrap();
        // Independent route: explicit spectral L, explicit modulus sum.
        let sym = cfg.kernel.operator_symbol(shape, 1.0);
        let apply_l = |f: &ScalarField| {
            let mut s = dft2(f);
            ndarray::Zip::from(&mut s).and(&sym).for_each(|z, &l| *z *= Complex64::new(l, 0.0));
            idft2_real(&s)
        };
        let e1: f64 = cfg.sigma
            * 0.1
            * v.fields
                .iter()
                .map(|f| {
                    apply_l(&f.x).iter().map(|a| a * a).sum::<f64>()
                        + apply_l(&f.y).iter().map(|a| a * a).sum::<f64>()
                })
                .sum::<f64>();
        let beta = dft2(&eval.estimate).mapv(|z| z.norm());
        let e2: f64 = beta.iter().zip(b.iter()).map(|(p, q)| (p - q).powi(2)).sum();
        let got = total_energy(&v, &eval.estimate, &b, &cfg).unwrap();
        assert!((got - (e1 + e2)).abs() <= 1e-10 * (e1 + e2));
        assert!((eval.total() - got).abs() <= 1e-10 * got);
    }

    #[test]
    fn optimal_template_starts_at_minus_half() {
        let n = 24;
        let template = Array2::from_shape_fn((n, n), |(i, j)| {
            let d2 = (i as f64 - 11.0).powi(2) + (j as f64 - 12.5).powi(2);
            (-d2 / 18.0).exp()
        });
        let b = crate::forward::forward_modulus(&template).into_values();
        let cfg = RunConfig {
            max_iter: 30,
            ..RunConfig::default()
        };
        let reg = run_registration(&template, &b, &cfg, |_| {}).unwrap();
        assert!((reg.trace[0].total + 0.5).abs() < 1e-12);
        assert_eq!(reg.trace[0].e1, 0.0);
        let rel = (&reg.reconstruction - &template).mapv(|v| v * v).sum().sqrt()
            / template.mapv(|v| v * v).sum().sqrt();
        assert!(rel < 0.01, "drift {rel}");
    }

    #[test]
    fn callback_sees_every_iteration() {
        let shape = (12, 12);
        let template = Array2::from_shape_fn(shape, |(i, j)| if (3..8).contains(&i) && (4..9).contains(&j) { 1.0 } else { 0.0 });
        let target = crate::grid::circshift(&template, 1, 0);
        let b = crate::forward::forward_modulus(&interp(&target, &CoordField::translation(shape, 0.3, 0.0)))
            .into_values();
        let cfg = RunConfig { max_iter: 7, ..RunConfig::default() };
        let mut seen = Vec::new();
        let reg = run_registration(&template, &b, &cfg, |r| seen.push(r.iteration)).unwrap();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(reg.trace.len(), 7);
        assert_eq!(reg.status, RunStatus::Completed);
        // The first update moves by exactly the cap.
        assert!((reg.trace[1].max_velocity - cfg.cap).abs() < 1e-15);
    }

    #[test]
    fn stalls_on_vanishing_gradient() {
        // Constant template: no image gradient, and zero velocity keeps E1 flat.
        let shape = (8, 8);
        let template = Array2::from_elem(shape, 1.0);
        let target = Array2::from_elem(shape, 2.0);
        let cfg = RunConfig {
            mode: Mode::Direct,
            similarity: SimilarityKind::L2,
            max_iter: 10,
            ..RunConfig::default()
        };
        let reg = run_registration(&template, &target, &cfg, |_| {}).unwrap();
        assert_eq!(reg.status, RunStatus::Stalled { iteration: 0 });
        assert_eq!(reg.trace.len(), 1);
    }

    #[test]
    fn cc_on_flat_data_is_degenerate() {
        let shape = (8, 8);
        let template = Array2::from_shape_fn(shape, |(i, _)| i as f64);
        let flat = Array2::from_elem(shape, 1.0);
        let err = run_registration(&template, &flat, &RunConfig::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    fn random_image(shape: Shape, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    /// Largest relative mismatch between the V-pairing of the assembled
    /// gradient and centered differences of the energy, best over a sweep
    /// of step lengths.
    fn gradient_mismatch(template: &ScalarField, data: &ScalarField, v: &VelocityPath, cfg: &RunConfig, seed: u64) -> f64 {
        let eval = evaluate(template, data, v, cfg).unwrap();
        let energy = |x: &VelocityPath| evaluate(template, data, x, cfg).unwrap().total();
        let mut worst = 0.0_f64;
        for d in 0..3 {
            let dir = VelocityPath {
                fields: (0..v.n_steps()).map(|s| random_vector(v.shape(), seed * 100 + d * 10 + s as u64)).collect(),
                dt: v.dt,
            };
            let analytic = v.dt
                * eval.gradient.fields.iter().zip(&dir.fields)
                    .map(|(g, h)| v_inner(g, h, &cfg.kernel, cfg.spacing.resolve(v.shape())))
                    .sum::<f64>();
            let h = cfg.spacing.resolve(v.shape());
            let best = [1e-3, 1e-4, 1e-5, 1e-6]
                .iter()
                .map(|&e| {
                    let eps = e * h;
                    let mut p = v.clone();
                    p.add_scaled(eps, &dir);
                    let mut m = v.clone();
                    m.add_scaled(-eps, &dir);
                    let fd = (energy(&p) - energy(&m)) / (2.0 * eps);
                    (fd - analytic).abs() / analytic.abs().max(1e-12)
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences_at_identity() {
        let shape = (12, 12);
        let template = random_image(shape, 31);
        let target = random_image(shape, 32);
        let b = crate::forward::forward_modulus(&target).into_values();
        for action in [Action::Geometric, Action::MassPreserving, Action::SqrtJacobian] {
            for similarity in [SimilarityKind::L2, SimilarityKind::CrossCorrelation] {
                for (mode, data) in [(Mode::Indirect, &b), (Mode::Direct, &target)] {
                    let cfg = RunConfig { action, similarity, mode, n_steps: 3, kernel: KernelParams { eta: 0.05, gamma: 1.0 }, ..RunConfig::default() };
                    let v = VelocityPath::zeros(shape, 3);
                    let err = gradient_mismatch(&template, data, &v, &cfg, 1);
                    assert!(err < 1e-4, "{action} {similarity} {mode}: {err}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_along_integer_translation() {
        let shape = (12, 12);
        let template = random_image(shape, 41);
        let target = random_image(shape, 42);
        let b = crate::forward::forward_modulus(&target).into_values();
        let n = 3;
        let mut f = VectorField::zeros(shape);
        f.x.fill(n as f64);
        f.y.fill(-(n as f64));
        let v = VelocityPath::constant(f, n);
        for action in [Action::Geometric, Action::MassPreserving] {
            for similarity in [SimilarityKind::L2, SimilarityKind::CrossCorrelation] {
                let cfg = RunConfig { action, similarity, n_steps: n, spacing: Spacing::Fixed(1.0), ..RunConfig::default() };
                let err = gradient_mismatch(&template, &b, &v, &cfg, 2);
                assert!(err < 1e-4, "{action} {similarity}: {err}");
            }
        }
    }

    #[test]
    fn gradient_respects_grid_spacing() {
        let shape = (12, 12);
        let template = random_image(shape, 51);
        let b = crate::forward::forward_modulus(&random_image(shape, 52)).into_values();
        for action in [Action::Geometric, Action::MassPreserving] {
            let cfg = RunConfig { action, n_steps: 2, spacing: Spacing::Fixed(1.0 / 12.0), ..RunConfig::default() };
            let err = gradient_mismatch(&template, &b, &VelocityPath::zeros(shape, 2), &cfg, 3);
            assert!(err < 1e-3, "{action}: {err}");
        }
    }

    #[test]
    fn config_validation() {
        let bad = RunConfig { cap: 0.0, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { n_steps: 0, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
        assert_eq!(RunConfig::low_snr().kernel.eta, 2e-2);
    }
}
