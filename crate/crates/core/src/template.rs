//! Template estimation from diffraction amplitudes: autocorrelation support,
//! zero-frequency mass and the geometric-ratio amplitude estimate.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward::DiffractionData;
use crate::grid::{center, idft2_real, ScalarField, Shape};

/// Support threshold (fraction of the autocorrelation peak) for clean data.
pub const THRESHOLD_NOISE_FREE: f64 = 1e-3;
/// Support threshold for noisy data.
pub const THRESHOLD_NOISY: f64 = 5e-2;
/// Geometric ratio used to size the support when only the mass matters.
pub const MASS_MODE_RATIO: f64 = 4.0;

/// Circular autocorrelation of the object, peak moved to the grid center.
pub fn autocorrelation(b: &DiffractionData) -> ScalarField {
    let power = b.values().mapv(|v| Complex64::new(v * v, 0.0));
    center(&idft2_real(&power))
}

/// Number of nodes at or above `threshold_frac` times the peak.
pub fn support_size(auto: &ScalarField, threshold_frac: f64) -> Result<f64> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 1), got {threshold_frac}"
        )));
    }
    let peak = auto.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let cut = threshold_frac * peak;
    Ok(auto.iter().filter(|&&v| v >= cut).count() as f64)
}

/// Total mass of the object: the amplitude at zero frequency.
pub fn mass_from_data(b: &DiffractionData) -> f64 {
    b.values()[(0, 0)]
}

/// `a0 = G m / |A|`
pub fn estimate_amplitude(mass: f64, autoc_support: f64, ratio: f64) -> Result<f64> {
    for (name, v) in [("mass", mass), ("support", autoc_support), ("G", ratio)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(ratio * mass / autoc_support)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TemplateShape {
    Disk,
    /// Axis-aligned rectangle with `aspect = cols / rows`.
    Rectangle { aspect: f64 },
}

impl fmt::Display for TemplateShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateShape::Disk => f.write_str("disk"),
            TemplateShape::Rectangle { .. } => f.write_str("rect"),
        }
    }
}

impl FromStr for TemplateShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(TemplateShape::Disk),
            "rect" | "rectangle" => Ok(TemplateShape::Rectangle { aspect: 1.0 }),
            other => Err(Error::invalid(format!("unknown template shape '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSpec {
    pub shape: TemplateShape,
    /// Area of the support in pixels.
    pub support_area: f64,
    pub amplitude: f64,
    /// Center in grid coordinates.
    pub center: (f64, f64),
    pub mass: f64,
}

impl TemplateSpec {
    /// Spec with `support_area = mass / amplitude`, centered in `domain`.
    pub fn centered(shape: TemplateShape, mass: f64, amplitude: f64, domain: Shape) -> Result<Self> {
        if !(mass > 0.0 && amplitude > 0.0 && mass.is_finite() && amplitude.is_finite()) {
            return Err(Error::invalid("mass and amplitude must be positive"));
        }
        Ok(TemplateSpec {
            shape,
            support_area: mass / amplitude,
            amplitude,
            center: ((domain.0 / 2) as f64, (domain.1 / 2) as f64),
            mass,
        })
    }
}

/// Rasterize a binary template at the spec's amplitude.
pub fn build_template(spec: &TemplateSpec, domain: Shape) -> Result<ScalarField> {
    let (rows, cols) = domain;
    let (ci, cj) = spec.center;
    if !(spec.support_area > 0.0 && spec.support_area.is_finite()) {
        return Err(Error::invalid("support area must be positive"));
    }
    let too_big = || {
        Error::invalid(format!(
            "template of area {:.1} does not fit a {rows}x{cols} domain",
            spec.support_area
        ))
    };
    match spec.shape {
        TemplateShape::Disk => {
            let r = (spec.support_area / std::f64::consts::PI).sqrt();
            if ci - r < 0.0 || cj - r < 0.0 || ci + r > rows as f64 || cj + r > cols as f64 {
                return Err(too_big());
            }
            let r2 = r * r;
            Ok(ScalarField::from_shape_fn(domain, |(i, j)| {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                if d2 <= r2 {
                    spec.amplitude
                } else {
                    0.0
                }
            }))
        }
        TemplateShape::Rectangle { aspect } => {
            if !(aspect > 0.0 && aspect.is_finite()) {
                return Err(Error::invalid(format!("aspect must be positive, got {aspect}")));
            }
            let h = ((spec.support_area / aspect).sqrt().round() as usize).max(1);
            let w = ((spec.support_area / h as f64).round() as usize).max(1);
            let i0 = (ci - h as f64 / 2.0).round();
            let j0 = (cj - w as f64 / 2.0).round();
            if i0 < 0.0 || j0 < 0.0 || i0 as usize + h > rows || j0 as usize + w > cols {
                return Err(too_big());
            }
            let (i0, j0) = (i0 as usize, j0 as usize);
            Ok(ScalarField::from_shape_fn(domain, |(i, j)| {
                if (i0..i0 + h).contains(&i) && (j0..j0 + w).contains(&j) {
                    spec.amplitude
                } else {
                    0.0
                }
            }))
        }
    }
}

/// How the template amplitude is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AmplitudeMode {
    /// Amplitude from a user-supplied geometric ratio `G`.
    Geometric { ratio: f64 },
    /// Only the mass is matched; the support is sized with a fixed ratio.
    Mass,
}

/// Quantities derived while estimating a template.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateEstimate {
    pub mass: f64,
    pub autoc_support: f64,
    pub ratio: f64,
    pub threshold: f64,
    pub spec: TemplateSpec,
}

/// Full pipeline: mass, autocorrelation support, amplitude, rasterized shape.
pub fn estimate_template(
    b: &DiffractionData,
    mode: AmplitudeMode,
    shape: TemplateShape,
    threshold: f64,
) -> Result<(ScalarField, TemplateEstimate)> {
    let auto = autocorrelation(b);
    let peak = auto.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !(peak > 0.0) {
        return Err(Error::Degenerate("autocorrelation has no positive peak".into()));
    }
    let mass = mass_from_data(b);
    if !(mass > 0.0) {
        return Err(Error::Degenerate("zero-frequency mass is not positive".into()));
    }
    let autoc_support = support_size(&auto, threshold)?;
    let ratio = match mode {
        AmplitudeMode::Geometric { ratio } => ratio,
        AmplitudeMode::Mass => MASS_MODE_RATIO,
    };
    let amplitude = estimate_amplitude(mass, autoc_support, ratio)?;
    let spec = TemplateSpec::centered(shape, mass, amplitude, b.shape())?;
    let image = build_template(&spec, b.shape())?;
    Ok((
        image,
        TemplateEstimate {
            mass,
            autoc_support,
            ratio,
            threshold,
            spec,
        },
    ))
}
