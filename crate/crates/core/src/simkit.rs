//! Synthetic measurements (Poisson, Gaussian and quantization noise on
//! intensities), the SNR figure and the alignment-invariant error metric.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{check_shape, Error, Result};
use crate::forward::{forward_modulus, DiffractionData};
use crate::grid::{circshift, dft2, idft2_real, inner, point_invert, ScalarField};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Peak of the ideal intensity in counts.
    pub max_intensity: f64,
    pub poisson: bool,
    pub quantize: bool,
    /// Standard deviation of additive Gaussian noise, in counts.
    pub gaussian_std: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn noiseless(max_intensity: f64) -> Self {
        NoiseModel {
            max_intensity,
            poisson: false,
            quantize: false,
            gaussian_std: 0.0,
            seed: 0,
        }
    }

    /// Photon counting with integer read-out.
    pub fn counting(max_intensity: f64, seed: u64) -> Self {
        NoiseModel {
            max_intensity,
            poisson: true,
            quantize: true,
            gaussian_std: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_intensity > 0.0 && self.max_intensity.is_finite()) {
            return Err(Error::invalid(format!(
                "max intensity must be positive, got {}",
                self.max_intensity
            )));
        }
        if !(self.gaussian_std >= 0.0 && self.gaussian_std.is_finite()) {
            return Err(Error::invalid(format!(
                "gaussian std must be nonnegative, got {}",
                self.gaussian_std
            )));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        !self.poisson && !self.quantize && self.gaussian_std == 0.0
    }
}

#[derive(Clone, Debug)]
pub struct Measurement {
    /// Measured amplitudes on the scale of the target's transform.
    pub data: DiffractionData,
    /// Ideal intensity in counts.
    pub ideal: ScalarField,
    /// Measured intensity in counts.
    pub measured: ScalarField,
    /// Counts per unit squared amplitude.
    pub scale: f64,
    /// `+inf` when the measurement is exact.
    pub snr: f64,
}

/// `10 log10(|I| / |I - I_m|)`, infinite when the two agree exactly.
pub fn snr_db(ideal: &ScalarField, measured: &ScalarField) -> f64 {
    let signal = ideal.iter().map(|v| v * v).sum::<f64>().sqrt();
    let noise = ideal
        .iter()
        .zip(measured.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

pub fn simulate_measurement(target: &ScalarField, noise: &NoiseModel) -> Result<Measurement> {
    noise.validate()?;
    if !crate::grid::is_finite(target) {
        return Err(Error::invalid("target contains non-finite values"));
    }
    let b = forward_modulus(target);
    let raw = b.values().mapv(|v| v * v);
    let peak = raw.fold(0.0_f64, |m, &v| m.max(v));
    if !(peak > 0.0) {
        return Err(Error::Degenerate("target has zero diffraction".into()));
    }
    let scale = noise.max_intensity / peak;
    let ideal = raw * scale;
    if noise.is_noiseless() {
        return Ok(Measurement {
            data: b,
            measured: ideal.clone(),
            ideal,
            scale,
            snr: f64::INFINITY,
        });
    }

    let mut counts_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    counts_rng.set_stream(0);
    let mut read_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    read_rng.set_stream(1);
    let mut measured = ideal.clone();
    for v in measured.iter_mut() {
        if noise.poisson && *v > 0.0 {
            *v = Poisson::new(*v)
                .map_err(|e| Error::invalid(format!("poisson rate {v}: {e}")))?
                .sample(&mut counts_rng);
        }
        if noise.gaussian_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut read_rng);
            *v += noise.gaussian_std * z;
        }
        if noise.quantize {
            *v = v.round();
        }
        *v = v.max(0.0);
    }
    let snr = snr_db(&ideal, &measured);
    let data = DiffractionData::new(measured.mapv(|v| (v / scale).sqrt()))?;
    Ok(Measurement {
        data,
        ideal,
        measured,
        scale,
        snr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub gaussian_std: f64,
    pub snr: f64,
    pub evaluations: usize,
}

/// Bisect the Gaussian std so the measurement reaches `target_snr` within
/// `tol` dB. The remaining noise settings and the seed come from `base`.
pub fn calibrate_gaussian_std(
    target: &ScalarField,
    base: &NoiseModel,
    target_snr: f64,
    tol: f64,
) -> Result<Calibration> {
    let snr_at = |std: f64| -> Result<f64> {
        let model = NoiseModel {
            gaussian_std: std,
            ..*base
        };
        Ok(simulate_measurement(target, &model)?.snr)
    };
    let mut evaluations = 1;
    let floor = snr_at(0.0)?;
    if floor <= target_snr {
        return Err(Error::invalid(format!(
            "without Gaussian noise the SNR is already {floor:.2} dB, below the requested {target_snr:.2} dB"
        )));
    }
    let mut lo = 0.0;
    let mut hi = 1e-3 * base.max_intensity;
    while snr_at(hi)? > target_snr {
        evaluations += 1;
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 * base.max_intensity {
            return Err(Error::Degenerate("SNR target not reachable".into()));
        }
    }
    let mut best = (hi, snr_at(hi)?);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let snr = snr_at(mid)?;
        evaluations += 1;
        if (snr - target_snr).abs() < (best.1 - target_snr).abs() {
            best = (mid, snr);
        }
        if (snr - target_snr).abs() <= tol {
            break;
        }
        if snr > target_snr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        gaussian_std: best.0,
        snr: best.1,
        evaluations,
    })
}

/// Best alignment of a reconstruction against the truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub error: f64,
    /// Circular shift applied to the (possibly inverted) reconstruction.
    pub shift: (isize, isize),
    pub inverted: bool,
    pub scale: f64,
}

impl Alignment {
    /// Apply the alignment to `recon`.
    pub fn apply(&self, recon: &ScalarField) -> ScalarField {
        let r = if self.inverted { point_invert(recon) } else { recon.clone() };
        circshift(&r, self.shift.0, self.shift.1) * self.scale
    }
}

fn signed(k: usize, n: usize) -> isize {
    if k > n / 2 {
        k as isize - n as isize
    } else {
        k as isize
    }
}

/// Alignment minimizing `|lambda * shift(flip(recon)) - truth| / |truth|`
/// over whole-pixel circular shifts, point inversion and `lambda >= 0`.
pub fn align(recon: &ScalarField, truth: &ScalarField) -> Result<Alignment> {
    check_shape(truth.dim(), recon.dim())?;
    let tt = inner(truth, truth);
    if !(tt > 0.0) {
        return Err(Error::invalid("truth is identically zero"));
    }
    let (rows, cols) = truth.dim();
    let t_hat = dft2(truth);
    let mut best: Option<Alignment> = None;
    for inverted in [false, true] {
        let r = if inverted { point_invert(recon) } else { recon.clone() };
        let r_hat = dft2(&r);
        let cross: Vec<Complex64> = t_hat.iter().zip(r_hat.iter()).map(|(a, b)| a * b.conj()).collect();
        let corr = idft2_real(&ndarray::Array2::from_shape_vec((rows, cols), cross).expect("shape"));
        let mut peak = (0usize, 0usize);
        for ((i, j), &v) in corr.indexed_iter() {
            if v > corr[peak] {
                peak = (i, j);
            }
        }
        let shift = (signed(peak.0, rows), signed(peak.1, cols));
        let moved = circshift(&r, shift.0, shift.1);
        let rr = inner(&moved, &moved);
        let scale = if rr > 0.0 { (inner(&moved, truth) / rr).max(0.0) } else { 0.0 };
        let diff = &moved * scale - truth;
        let error = (inner(&diff, &diff) / tt).sqrt();
        let cand = Alignment {
            error,
            shift,
            inverted,
            scale,
        };
        if best.is_none_or(|b| cand.error < b.error) {
            best = Some(cand);
        }
    }
    Ok(best.expect("two candidates"))
}

pub fn recon_error(recon: &ScalarField, truth: &ScalarField) -> Result<f64> {
    Ok(align(recon, truth)?.error)
}
