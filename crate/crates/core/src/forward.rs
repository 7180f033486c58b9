//! Fourier-modulus forward operator, back-projection of data-space residuals
//! and the two similarity terms.

use std::fmt;
use std::str::FromStr;

use ndarray::Zip;
use num_complex::Complex64;

use crate::error::{check_shape, Error, Result};
use crate::grid::{dft2, idft2_real, ComplexField, ScalarField, Shape};

/// Modes whose modulus falls below this fraction of the largest modulus get
/// a zero phase factor in back-projection.
pub const PHASE_GUARD: f64 = 1e-12;

/// Nonnegative amplitudes on the measurement grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffractionData {
    values: ScalarField,
    mean: f64,
}

impl DiffractionData {
    pub fn new(values: ScalarField) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "diffraction amplitudes must be finite and nonnegative (found {v})"
            )));
        }
        let mean = values.mean().unwrap_or(0.0);
        Ok(DiffractionData { values, mean })
    }

    pub fn values(&self) -> &ScalarField {
        &self.values
    }

    pub fn into_values(self) -> ScalarField {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn shape(&self) -> Shape {
        self.values.dim()
    }

    /// Deviation from the mean over the whole grid.
    pub fn centered(&self) -> ScalarField {
        self.values.mapv(|v| v - self.mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    L2,
    CrossCorrelation,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::L2 => "l2",
            SimilarityKind::CrossCorrelation => "cc",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(SimilarityKind::L2),
            "cc" | "cross-correlation" => Ok(SimilarityKind::CrossCorrelation),
            other => Err(Error::invalid(format!("unknown similarity '{other}'"))),
        }
    }
}

/// `|dft2(f)|`
pub fn forward_modulus(f: &ScalarField) -> DiffractionData {
    let values = dft2(f).mapv(|z| z.norm());
    let mean = values.mean().unwrap_or(0.0);
    DiffractionData { values, mean }
}

/// Unit phase factors `z/|z|` of a spectrum, zero on guarded modes.
pub fn phase_factors(spectrum: &ComplexField) -> ComplexField {
    let peak = spectrum.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let floor = PHASE_GUARD * peak;
    spectrum.mapv(|z| {
        let m = z.norm();
        if m <= floor || m == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            z / m
        }
    })
}

/// `Re[idft2(residual * phase)]` for precomputed phase factors.
pub fn backproject_with_phase(residual: &ScalarField, phase: &ComplexField) -> ScalarField {
    let mut spec = phase.clone();
    Zip::from(&mut spec).and(residual).for_each(|s, &r| *s *= r);
    idft2_real(&spec)
}

/// Real-space residual `R' = Re[idft2(residual * a/|a|)]` with `a = dft2(estimate)`.
pub fn backproject(residual: &ScalarField, estimate: &ScalarField) -> ScalarField {
    backproject_with_phase(residual, &phase_factors(&dft2(estimate)))
}

/// Returns `(sum (beta - b)^2, beta - b)`.
pub fn l2_energy(beta: &ScalarField, b: &ScalarField) -> (f64, ScalarField) {
    let residual = beta - b;
    let energy = residual.iter().map(|r| r * r).sum();
    (energy, residual)
}

/// Cross-correlation similarity and its inner products.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcTerms {
    /// `-A^2 / (2 B C)`, in `[-1/2, 0]`.
    pub energy: f64,
    /// `<beta_bar, b_bar>`
    pub a: f64,
    /// `|beta_bar|^2`
    pub b: f64,
    /// `|b_bar|^2`
    pub c: f64,
}

fn centered(f: &ScalarField) -> ScalarField {
    let m = f.mean().unwrap_or(0.0);
    f.mapv(|v| v - m)
}

pub fn cc_energy(beta: &ScalarField, b: &ScalarField) -> Result<CcTerms> {
    check_shape(b.dim(), beta.dim())?;
    let (beta_bar, b_bar) = (centered(beta), centered(b));
    let a = crate::grid::inner(&beta_bar, &b_bar);
    let bb = crate::grid::inner(&beta_bar, &beta_bar);
    let cc = crate::grid::inner(&b_bar, &b_bar);
    if bb <= 0.0 || cc <= 0.0 {
        return Err(Error::Degenerate(
            "cross-correlation undefined for a constant pattern".into(),
        ));
    }
    Ok(CcTerms {
        energy: -a * a / (2.0 * bb * cc),
        a,
        b: bb,
        c: cc,
    })
}

/// `(A/(BC)) * ((A/B) beta_bar' - b_bar')`, primes denoting back-projection
/// with the phase of `estimate`.
pub fn cc_residual(beta: &ScalarField, b: &ScalarField, estimate: &ScalarField) -> Result<ScalarField> {
    let terms = cc_energy(beta, b)?;
    let phase = phase_factors(&dft2(estimate));
    Ok(cc_residual_with_phase(beta, b, &terms, &phase))
}

fn cc_residual_with_phase(
    beta: &ScalarField,
    b: &ScalarField,
    terms: &CcTerms,
    phase: &ComplexField,
) -> ScalarField {
    // Back-projection is linear, so combine in data space first.
    let k = terms.a / (terms.b * terms.c);
    let combined = centered(beta) * (k * terms.a / terms.b) - centered(b) * k;
    backproject_with_phase(&combined, phase)
}

/// Which forward operator links the estimate to the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardOp {
    /// `F = |dft2(.)|`; the data are diffraction amplitudes.
    FourierModulus,
    /// `F = id`; the data are a target image (direct registration).
    Identity,
}

/// Data term of the energy together with the residual `R'` normalised so
/// that, for any image perturbation `d`, `dE2 = 2 <residual, d>` summed over
/// the grid.
///
/// For the modulus operator the unnormalised transform contributes a factor
/// `rows * cols` relative to the back-projection, and the cross-correlation
/// term contributes `1/2` relative to the `2 <R', d>` convention; both are
/// folded in here so the gradient assembled from it is exact.
#[derive(Clone, Debug)]
pub struct DataTerm {
    pub energy: f64,
    pub residual: ScalarField,
}

pub fn data_term(
    op: ForwardOp,
    similarity: SimilarityKind,
    estimate: &ScalarField,
    data: &ScalarField,
) -> Result<DataTerm> {
    check_shape(data.dim(), estimate.dim())?;
    match op {
        ForwardOp::Identity => match similarity {
            SimilarityKind::L2 => {
                let (energy, residual) = l2_energy(estimate, data);
                Ok(DataTerm { energy, residual })
            }
            SimilarityKind::CrossCorrelation => {
                let t = cc_energy(estimate, data)?;
                let k = t.a / (t.b * t.c);
                let residual = (centered(estimate) * (k * t.a / t.b) - centered(data) * k) * 0.5;
                Ok(DataTerm {
                    energy: t.energy,
                    residual,
                })
            }
        },
        ForwardOp::FourierModulus => {
            let spectrum = dft2(estimate);
            let beta = spectrum.mapv(|z| z.norm());
            let phase = phase_factors(&spectrum);
            let n = (estimate.len()) as f64;
            match similarity {
                SimilarityKind::L2 => {
                    let (energy, r) = l2_energy(&beta, data);
                    Ok(DataTerm {
                        energy,
                        residual: backproject_with_phase(&r, &phase) * n,
                    })
                }
                SimilarityKind::CrossCorrelation => {
                    let t = cc_energy(&beta, data)?;
                    Ok(DataTerm {
                        energy: t.energy,
                        residual: cc_residual_with_phase(&beta, data, &t, &phase) * (0.5 * n),
                    })
                }
            }
        }
    }
}

/// Data energy only.
pub fn data_energy(
    op: ForwardOp,
    similarity: SimilarityKind,
    estimate: &ScalarField,
    data: &ScalarField,
) -> Result<f64> {
    let beta = match op {
        ForwardOp::Identity => estimate.clone(),
        ForwardOp::FourierModulus => forward_modulus(estimate).into_values(),
    };
    match similarity {
        SimilarityKind::L2 => Ok(l2_energy(&beta, data).0),
        SimilarityKind::CrossCorrelation => Ok(cc_energy(&beta, data)?.energy),
    }
}
