//! Field arithmetic on the periodic grid (the flat 2-torus).
//!
//! All fields share one shape `(rows, cols)` and unit grid spacing. The
//! `x` component of vector and coordinate fields runs along rows (first
//! index), the `y` component along columns.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub type ScalarField = Array2<f64>;
pub type ComplexField = Array2<Complex64>;
pub type Shape = (usize, usize);

/// Two-component field, e.g. a velocity or an L2 gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
}

impl VectorField {
    pub fn new(x: ScalarField, y: ScalarField) -> Self {
        assert_eq!(x.dim(), y.dim(), "vector components must share a shape");
        VectorField { x, y }
    }

    pub fn zeros(shape: Shape) -> Self {
        VectorField {
            x: Array2::zeros(shape),
            y: Array2::zeros(shape),
        }
    }

    pub fn shape(&self) -> Shape {
        self.x.dim()
    }

    /// Sum over nodes of the pointwise dot product.
    pub fn dot(&self, other: &VectorField) -> f64 {
        inner(&self.x, &other.x) + inner(&self.y, &other.y)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Largest Euclidean magnitude over all nodes.
    pub fn max_norm(&self) -> f64 {
        Zip::from(&self.x)
            .and(&self.y)
            .fold(0.0_f64, |m, &a, &b| m.max(a.hypot(b)))
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        VectorField {
            x: &self.x * s,
            y: &self.y * s,
        }
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: f64, other: &VectorField) {
        self.x.scaled_add(a, &other.x);
        self.y.scaled_add(a, &other.y);
    }

    /// Multiply both components pointwise by a scalar field.
    pub fn mul_field(&self, f: &ScalarField) -> VectorField {
        VectorField {
            x: &self.x * f,
            y: &self.y * f,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Per-node mapped coordinates `phi(x)` in continuous grid units.
///
/// Values may leave `[0, N)`; they are read modulo the torus.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordField {
    pub x: ScalarField,
    pub y: ScalarField,
}

impl CoordField {
    pub fn identity(shape: Shape) -> Self {
        CoordField {
            x: Array2::from_shape_fn(shape, |(i, _)| i as f64),
            y: Array2::from_shape_fn(shape, |(_, j)| j as f64),
        }
    }

    /// Node `(i, j)` maps to `(i + dx, j + dy)`.
    pub fn translation(shape: Shape, dx: f64, dy: f64) -> Self {
        CoordField {
            x: Array2::from_shape_fn(shape, |(i, _)| i as f64 + dx),
            y: Array2::from_shape_fn(shape, |(_, j)| j as f64 + dy),
        }
    }

    pub fn from_displacement(u: &VectorField) -> Self {
        let shape = u.shape();
        CoordField {
            x: Array2::from_shape_fn(shape, |(i, j)| i as f64 + u.x[(i, j)]),
            y: Array2::from_shape_fn(shape, |(i, j)| j as f64 + u.y[(i, j)]),
        }
    }

    pub fn shape(&self) -> Shape {
        self.x.dim()
    }

    /// `phi(x) - x`, each component reduced to the representative in
    /// `(-N/2, N/2]`.
    pub fn displacement(&self) -> VectorField {
        let (rows, cols) = self.shape();
        let (pr, pc) = (rows as f64, cols as f64);
        VectorField {
            x: Array2::from_shape_fn((rows, cols), |(i, j)| {
                wrap_centered(self.x[(i, j)] - i as f64, pr)
            }),
            y: Array2::from_shape_fn((rows, cols), |(i, j)| {
                wrap_centered(self.y[(i, j)] - j as f64, pc)
            }),
        }
    }

    /// Largest Euclidean distance from the identity map.
    pub fn max_displacement(&self) -> f64 {
        self.displacement().max_norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Reduce `d` to the representative of `d mod period` in `(-period/2, period/2]`.
pub fn wrap_centered(d: f64, period: f64) -> f64 {
    d - period * (d / period - 0.5).ceil()
}

pub fn inner(a: &ScalarField, b: &ScalarField) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &p, &q| acc + p * q)
}

pub fn is_finite(f: &ScalarField) -> bool {
    f.iter().all(|v| v.is_finite())
}

// ---------------------------------------------------------------------------
// Fourier transforms

struct Plan2 {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

type PlanCache = (FftPlanner<f64>, HashMap<Shape, Rc<Plan2>>);

thread_local! {
    static PLANS: RefCell<PlanCache> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan_for(shape: Shape) -> Rc<Plan2> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry(shape)
            .or_insert_with(|| {
                Rc::new(Plan2 {
                    row_fwd: planner.plan_fft_forward(shape.1),
                    row_inv: planner.plan_fft_inverse(shape.1),
                    col_fwd: planner.plan_fft_forward(shape.0),
                    col_inv: planner.plan_fft_inverse(shape.0),
                })
            })
            .clone()
    })
}

/// Unnormalized 2-D transform in place; `data` must be in standard layout.
fn fft2_in_place(data: &mut ComplexField, inverse: bool) {
    let (rows, cols) = data.dim();
    if rows == 0 || cols == 0 {
        return;
    }
    let plan = plan_for((rows, cols));
    let (row_fft, col_fft) = if inverse {
        (&plan.row_inv, &plan.col_inv)
    } else {
        (&plan.row_fwd, &plan.col_fwd)
    };
    let buf = data
        .as_slice_mut()
        .expect("fft input must be in standard layout");
    row_fft.process(buf);

    let mut t = vec![Complex64::new(0.0, 0.0); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = buf[i * cols + j];
        }
    }
    col_fft.process(&mut t);
    for i in 0..rows {
        for j in 0..cols {
            buf[i * cols + j] = t[j * rows + i];
        }
    }
}

/// Forward DFT of a real field, unnormalized: mode (0,0) is the sum.
pub fn dft2(f: &ScalarField) -> ComplexField {
    let mut data = Array2::from_shape_fn(f.dim(), |ix| Complex64::new(f[ix], 0.0));
    fft2_in_place(&mut data, false);
    data
}

pub fn dft2_complex(f: &ComplexField) -> ComplexField {
    let mut data = Array2::from_shape_fn(f.dim(), |ix| f[ix]);
    fft2_in_place(&mut data, false);
    data
}

/// Inverse DFT including the `1/(rows*cols)` factor.
pub fn idft2(spectrum: &ComplexField) -> ComplexField {
    let (rows, cols) = spectrum.dim();
    let mut data = Array2::from_shape_fn(spectrum.dim(), |ix| spectrum[ix]);
    fft2_in_place(&mut data, true);
    let norm = 1.0 / (rows * cols) as f64;
    data.mapv_inplace(|z| z * norm);
    data
}

/// Real part of [`idft2`].
pub fn idft2_real(spectrum: &ComplexField) -> ScalarField {
    idft2(spectrum).mapv(|z| z.re)
}

/// Multiply the spectrum of `f` by a real transfer function and transform back.
pub fn spectral_filter(f: &ScalarField, transfer: &ScalarField) -> ScalarField {
    let mut spec = dft2(f);
    Zip::from(&mut spec).and(transfer).for_each(|s, &t| *s *= t);
    idft2_real(&spec)
}

/// Signed integer frequency of DFT index `k` on an axis of length `n`.
pub fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Symbol of the negated 5-point Laplacian:
/// `4 - 2 cos(2 pi k1 / N1) - 2 cos(2 pi k2 / N2)`.
pub fn laplacian_symbol(shape: Shape) -> ScalarField {
    let (rows, cols) = shape;
    Array2::from_shape_fn(shape, |(k1, k2)| {
        4.0 - 2.0 * (2.0 * PI * k1 as f64 / rows as f64).cos()
            - 2.0 * (2.0 * PI * k2 as f64 / cols as f64).cos()
    })
}

// ---------------------------------------------------------------------------
// Finite differences

#[inline]
fn up(i: usize, n: usize) -> usize {
    if i + 1 == n {
        0
    } else {
        i + 1
    }
}

#[inline]
fn down(i: usize, n: usize) -> usize {
    if i == 0 {
        n - 1
    } else {
        i - 1
    }
}

/// Centered differences with periodic wraparound, spacing 1.
pub fn gradient(f: &ScalarField) -> VectorField {
    let (rows, cols) = f.dim();
    VectorField {
        x: Array2::from_shape_fn((rows, cols), |(i, j)| {
            0.5 * (f[(up(i, rows), j)] - f[(down(i, rows), j)])
        }),
        y: Array2::from_shape_fn((rows, cols), |(i, j)| {
            0.5 * (f[(i, up(j, cols))] - f[(i, down(j, cols))])
        }),
    }
}

/// Centered periodic divergence; the negative adjoint of [`gradient`].
pub fn divergence(h: &VectorField) -> ScalarField {
    let (rows, cols) = h.shape();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        0.5 * (h.x[(up(i, rows), j)] - h.x[(down(i, rows), j)])
            + 0.5 * (h.y[(i, up(j, cols))] - h.y[(i, down(j, cols))])
    })
}

/// 5-point periodic Laplacian.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let (rows, cols) = f.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        f[(up(i, rows), j)] + f[(down(i, rows), j)] + f[(i, up(j, cols))] + f[(i, down(j, cols))]
            - 4.0 * f[(i, j)]
    })
}

/// Circular shift: `out[i, j] = f[i - di, j - dj]`.
pub fn circshift(f: &ScalarField, di: isize, dj: isize) -> ScalarField {
    let (rows, cols) = f.dim();
    let (r, c) = (rows as isize, cols as isize);
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let si = (i as isize - di).rem_euclid(r) as usize;
        let sj = (j as isize - dj).rem_euclid(c) as usize;
        f[(si, sj)]
    })
}

/// Move the zero-frequency (or zero-lag) node to the grid center.
pub fn center(f: &ScalarField) -> ScalarField {
    let (rows, cols) = f.dim();
    circshift(f, (rows / 2) as isize, (cols / 2) as isize)
}

/// Point inversion `out[x] = f[-x mod N]`.
pub fn point_invert(f: &ScalarField) -> ScalarField {
    let (rows, cols) = f.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        f[((rows - i) % rows, (cols - j) % cols)]
    })
}

// ---------------------------------------------------------------------------
// Interpolation

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    fx: f64,
    fy: f64,
}

/// Precomputed bilinear weights for sampling several fields at the same
/// coordinates.
#[derive(Clone, Debug)]
pub struct BilinearStencil {
    shape: Shape,
    taps: Vec<Tap>,
}

impl BilinearStencil {
    pub fn new(coords: &CoordField) -> Self {
        let shape = coords.shape();
        let (rows, cols) = shape;
        let taps = Zip::from(&coords.x)
            .and(&coords.y)
            .map_collect(|&x, &y| {
                let (i0, fx) = split(x, rows);
                let (j0, fy) = split(y, cols);
                Tap {
                    i0,
                    i1: up(i0, rows),
                    j0,
                    j1: up(j0, cols),
                    fx,
                    fy,
                }
            })
            .into_raw_vec_and_offset()
            .0;
        BilinearStencil { shape, taps }
    }

    pub fn apply(&self, f: &ScalarField) -> ScalarField {
        assert_eq!(f.dim(), self.shape, "interpolated field shape mismatch");
        let data: Vec<f64> = self
            .taps
            .iter()
            .map(|t| {
                let a = f[(t.i0, t.j0)];
                let b = f[(t.i1, t.j0)];
                let c = f[(t.i0, t.j1)];
                let d = f[(t.i1, t.j1)];
                (1.0 - t.fx) * (1.0 - t.fy) * a
                    + t.fx * (1.0 - t.fy) * b
                    + (1.0 - t.fx) * t.fy * c
                    + t.fx * t.fy * d
            })
            .collect();
        Array2::from_shape_vec(self.shape, data).expect("stencil size matches shape")
    }
}

fn split(x: f64, n: usize) -> (usize, f64) {
    let fl = x.floor();
    let idx = (fl as i64).rem_euclid(n as i64) as usize;
    (idx, x - fl)
}

/// Bilinear interpolation of `f` at `coords` with periodic wrapping; exact
/// at integer coordinates.
pub fn interp(f: &ScalarField, coords: &CoordField) -> ScalarField {
    BilinearStencil::new(coords).apply(f)
}

/// Composition `phi(points(x))` for a coordinate field `phi`, carried out on
/// the unwrapped displacement so that no seam appears where `phi` crosses
/// the torus boundary.
pub fn compose(phi: &CoordField, points: &CoordField) -> CoordField {
    let stencil = BilinearStencil::new(points);
    let u = phi.displacement();
    CoordField {
        x: &points.x + &stencil.apply(&u.x),
        y: &points.y + &stencil.apply(&u.y),
    }
}

/// Determinant of the centered-difference Jacobian of `phi`. Coordinate
/// differences are unwrapped to the representative nearest the identity
/// difference before use.
pub fn jacobian_det(phi: &CoordField) -> ScalarField {
    let (rows, cols) = phi.shape();
    let (pr, pc) = (rows as f64, cols as f64);
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let (ip, im) = (up(i, rows), down(i, rows));
        let (jp, jm) = (up(j, cols), down(j, cols));
        let xi = wrap_centered(phi.x[(ip, j)] - phi.x[(im, j)] - 2.0, pr) + 2.0;
        let xj = wrap_centered(phi.x[(i, jp)] - phi.x[(i, jm)], pr);
        let yi = wrap_centered(phi.y[(ip, j)] - phi.y[(im, j)], pc);
        let yj = wrap_centered(phi.y[(i, jp)] - phi.y[(i, jm)] - 2.0, pc) + 2.0;
        0.25 * (xi * yj - xj * yi)
    })
}
