//! Group actions of grid diffeomorphisms on images and semi-Lagrangian
//! integration of the flow for `phi_{t,0}` and `phi_{t,1}`.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::grid::{compose, interp, jacobian_det, CoordField, ScalarField, Shape, VectorField};

/// How a deformation acts on an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    /// Composition `I o phi` (0-form pull-back).
    Geometric,
    /// Density pull-back `|D phi| (I o phi)`, conserving total mass.
    MassPreserving,
    /// `sqrt|D phi| (I o phi)`. Kept for comparison with the mass-preserving
    /// form; it does not conserve mass.
    SqrtJacobian,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Geometric => "geometric",
            Action::MassPreserving => "mass",
            Action::SqrtJacobian => "sqrt-mass",
        })
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(Action::Geometric),
            "mass" | "mass-preserving" | "density" => Ok(Action::MassPreserving),
            "sqrt-mass" => Ok(Action::SqrtJacobian),
            other => Err(Error::invalid(format!("unknown action '{other}'"))),
        }
    }
}

/// Time-indexed velocity fields. Entry `i` drives the flow on the interval
/// `[t_i, t_{i+1}]`, with `t_i = i * dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityPath {
    pub fields: Vec<VectorField>,
    pub dt: f64,
}

impl VelocityPath {
    pub fn zeros(shape: Shape, n_steps: usize) -> Self {
        VelocityPath {
            fields: vec![VectorField::zeros(shape); n_steps],
            dt: 1.0 / n_steps as f64,
        }
    }

    /// Repeats one field at every time step.
    pub fn constant(field: VectorField, n_steps: usize) -> Self {
        VelocityPath {
            fields: vec![field; n_steps],
            dt: 1.0 / n_steps as f64,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.fields.len()
    }

    pub fn shape(&self) -> Shape {
        self.fields[0].shape()
    }

    /// Largest Euclidean magnitude over all nodes and time steps.
    pub fn max_norm(&self) -> f64 {
        self.fields.iter().map(VectorField::max_norm).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> VelocityPath {
        VelocityPath {
            fields: self.fields.iter().map(|f| f.scaled(s)).collect(),
            dt: self.dt,
        }
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: f64, other: &VelocityPath) {
        for (f, g) in self.fields.iter_mut().zip(&other.fields) {
            f.add_scaled(a, g);
        }
    }

    /// Time-integrated L2 pairing `dt * sum_j <self_j, other_j>`.
    pub fn pairing(&self, other: &VelocityPath) -> f64 {
        self.dt
            * self
                .fields
                .iter()
                .zip(&other.fields)
                .map(|(a, b)| a.dot(b))
                .sum::<f64>()
    }
}

/// Sampled maps `phi_{t_j,0}` and `phi_{t_j,1}` for `j = 0..=n_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationPath {
    pub phi_t0: Vec<CoordField>,
    pub phi_t1: Vec<CoordField>,
}

impl DeformationPath {
    pub fn identity(shape: Shape, n_steps: usize) -> Self {
        DeformationPath {
            phi_t0: vec![CoordField::identity(shape); n_steps + 1],
            phi_t1: vec![CoordField::identity(shape); n_steps + 1],
        }
    }

    /// Integrate both recursions for `v` (velocities in grid units per unit
    /// time).
    pub fn from_velocity(v: &VelocityPath) -> Self {
        let path = DeformationPath::identity(v.shape(), v.n_steps());
        update_phi_t1(&update_phi_t0(&path, v), v)
    }

    pub fn n_steps(&self) -> usize {
        self.phi_t0.len() - 1
    }

    pub fn shape(&self) -> Shape {
        self.phi_t0[0].shape()
    }

    /// `phi_{1,0}`, the map that carries the template to the reconstruction.
    pub fn endpoint(&self) -> &CoordField {
        &self.phi_t0[self.n_steps()]
    }
}

pub fn pullback(f: &ScalarField, phi: &CoordField, action: Action) -> ScalarField {
    let warped = interp(f, phi);
    match action {
        Action::Geometric => warped,
        Action::MassPreserving => warped * &jacobian_det(phi),
        Action::SqrtJacobian => warped * &jacobian_det(phi).mapv(|d| d.abs().sqrt()),
    }
}

/// `points(x) = x + s * u(x)`.
fn displaced(u: &VectorField, s: f64) -> CoordField {
    CoordField::from_displacement(&u.scaled(s))
}

/// Forward recursion `phi_{t_j,0}(x) = phi_{t_{j-1},0}(x - dt v(x))` from
/// the identity, using the velocity of the interval `[t_{j-1}, t_j]`.
pub fn update_phi_t0(path: &DeformationPath, v: &VelocityPath) -> DeformationPath {
    let n = v.n_steps();
    assert_eq!(path.n_steps(), n, "path and velocity step counts differ");
    let mut phi_t0 = Vec::with_capacity(n + 1);
    phi_t0.push(CoordField::identity(v.shape()));
    for j in 1..=n {
        let points = displaced(&v.fields[j - 1], -v.dt);
        let next = compose(&phi_t0[j - 1], &points);
        phi_t0.push(next);
    }
    DeformationPath {
        phi_t0,
        phi_t1: path.phi_t1.clone(),
    }
}

/// Backward recursion `phi_{t_j,1}(x) = phi_{t_{j+1},1}(x + dt v(x))` from
/// `phi_{1,1} = id`, using the velocity of the interval `[t_j, t_{j+1}]`.
pub fn update_phi_t1(path: &DeformationPath, v: &VelocityPath) -> DeformationPath {
    let n = v.n_steps();
    assert_eq!(path.n_steps(), n, "path and velocity step counts differ");
    let mut phi_t1 = vec![CoordField::identity(v.shape()); n + 1];
    for j in (0..n).rev() {
        let points = displaced(&v.fields[j], v.dt);
        phi_t1[j] = compose(&phi_t1[j + 1], &points);
    }
    DeformationPath {
        phi_t0: path.phi_t0.clone(),
        phi_t1,
    }
}

/// Estimate of the template transported to time `t_j`, computed as
/// `(I0 o phi_{1,0}) o phi_{t_j,1}` under the chosen action. At
/// `j = n_steps` this is the reconstruction.
pub fn transported_template(
    template: &ScalarField,
    path: &DeformationPath,
    j: usize,
    action: Action,
) -> ScalarField {
    let endpoint = pullback(template, path.endpoint(), action);
    transport_endpoint(&endpoint, path, j, action)
}

/// Same as [`transported_template`] with the endpoint image already known.
pub fn transport_endpoint(
    endpoint: &ScalarField,
    path: &DeformationPath,
    j: usize,
    action: Action,
) -> ScalarField {
    if j == path.n_steps() {
        endpoint.clone()
    } else {
        pullback(endpoint, &path.phi_t1[j], action)
    }
}

/// `max |phi_{1,0} o phi_{0,1} - id|`, the numerical inverse-consistency gap.
pub fn inverse_consistency_gap(path: &DeformationPath) -> f64 {
    compose(path.endpoint(), &path.phi_t1[0]).max_displacement()
}
