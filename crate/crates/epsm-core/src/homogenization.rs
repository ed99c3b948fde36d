//! Effective-medium limit of the screened defect potential.
//!
//! A localized charge nu rescaled to the lattice scale produces, after
//! undoing the rescaling, the screened interaction
//!
//!   What_eta(k) = 4 pi [etilde(eta k)^{-1}]_{00} nuhat(k) / |k|^2 ,
//!
//! where etilde is the microscopic dielectric matrix at the rescaled
//! momentum. As eta -> 0 this converges, weakly against smooth test
//! charges, to the homogenized potential
//!
//!   What(k) = 4 pi nuhat(k) / (k^T eps_M k) ,
//!
//! the Coulomb potential of an anisotropic effective medium described by
//! the macroscopic dielectric tensor eps_M. The functions here evaluate
//! both transforms on a fixed Cartesian momentum grid and measure the
//! weak-convergence defect against a small family of Gaussian probes.

use num_complex::Complex64;

use crate::bloch::{BlochBands, FermiData};
use crate::dielectric::{inverse_head, EpsilonM};
use crate::error::{Error, Result};
use crate::response::GaussianCharge;
use crate::vec3::{self, V3};

/// Uniform Cartesian momentum ball used for the weak-convergence
/// pairing: points k = spacing * (i, j, l) with 0 < |k| <= radius,
/// symmetric under k -> -k; `weight` is the cell volume spacing^3.
#[derive(Debug, Clone)]
pub struct MomentumBall {
    pub points: Vec<V3>,
    pub spacing: f64,
    pub radius: f64,
    pub weight: f64,
}

impl MomentumBall {
    pub fn new(spacing: f64, radius: f64) -> Result<MomentumBall> {
        if !(spacing > 0.0) || !(radius >= spacing) {
            return Err(Error::DimensionMismatch {
                context: "momentum ball spacing vs radius",
                got: 0,
                expected: 1,
            });
        }
        let n = (radius / spacing + 1e-12).floor() as i64;
        let r2 = radius * radius * (1.0 + 1e-12);
        let mut points = Vec::new();
        for i in -n..=n {
            for j in -n..=n {
                for l in -n..=n {
                    if i == 0 && j == 0 && l == 0 {
                        continue;
                    }
                    let k = [
                        spacing * i as f64,
                        spacing * j as f64,
                        spacing * l as f64,
                    ];
                    if vec3::norm2(k) <= r2 {
                        points.push(k);
                    }
                }
            }
        }
        Ok(MomentumBall { points, spacing, radius, weight: spacing.powi(3) })
    }
}

/// Transform of the rescaled screened potential at momentum k. Fails if
/// the rescaled momentum eta * k leaves the first zone (the microscopic
/// dielectric matrix is only sampled inside it).
pub fn rescaled_screened_fourier(
    bands: &BlochBands,
    fermi: &FermiData,
    source: &GaussianCharge,
    eta: f64,
    k: V3,
) -> Result<Complex64> {
    let kk = vec3::norm2(k);
    if kk == 0.0 {
        return Err(Error::MomentumOutOfZone { k });
    }
    let scaled = vec3::scale(k, eta);
    if vec3::norm(scaled) >= bands.basis.lattice.bz_inscribed_radius() {
        return Err(Error::MomentumOutOfZone { k: scaled });
    }
    let head = inverse_head(bands, fermi, scaled)?;
    Ok(4.0 * std::f64::consts::PI * head * source.fourier(k) / kk)
}

/// Transform of the homogenized potential: the effective medium replaces
/// |k|^2 by the quadratic form k^T eps_M k.
pub fn homogenized_fourier(eps_m: &EpsilonM, source: &GaussianCharge, k: V3) -> Complex64 {
    4.0 * std::f64::consts::PI * source.fourier(k) / eps_m.quadratic_form(k)
}

/// Fixed family of Gaussian probe charges for the weak pairing: unit
/// total charge, a spread of widths, one displaced off-center.
pub fn standard_probes() -> Vec<GaussianCharge> {
    vec![
        GaussianCharge { total: 1.0, center: [0.0; 3], width: 0.8 },
        GaussianCharge { total: 1.0, center: [0.0; 3], width: 1.2 },
        GaussianCharge { total: 1.0, center: [0.0; 3], width: 1.6 },
        GaussianCharge { total: 1.0, center: [0.0; 3], width: 2.4 },
        GaussianCharge { total: 1.0, center: [0.4, -0.3, 0.2], width: 1.0 },
    ]
}

/// Weak-convergence defect of the rescaled potential at one eta.
#[derive(Debug, Clone)]
pub struct WeakConvergence {
    pub eta: f64,
    /// |sum_k (What_eta - What) conj(probe)| / |sum_k What conj(probe)|
    /// per probe.
    pub per_probe: Vec<f64>,
    /// Worst probe.
    pub metric: f64,
}

/// Pair the difference What_eta - What against each probe over the
/// momentum ball and report the worst relative defect.
pub fn weak_convergence(
    bands: &BlochBands,
    fermi: &FermiData,
    eps_m: &EpsilonM,
    source: &GaussianCharge,
    probes: &[GaussianCharge],
    ball: &MomentumBall,
    eta: f64,
) -> Result<WeakConvergence> {
    let mut num = vec![Complex64::new(0.0, 0.0); probes.len()];
    let mut den = vec![Complex64::new(0.0, 0.0); probes.len()];
    for &k in &ball.points {
        let w_eta = rescaled_screened_fourier(bands, fermi, source, eta, k)?;
        let w_lim = homogenized_fourier(eps_m, source, k);
        for (p, probe) in probes.iter().enumerate() {
            let g = probe.fourier(k).conj() * ball.weight;
            num[p] += (w_eta - w_lim) * g;
            den[p] += w_lim * g;
        }
    }
    let per_probe: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(n, d)| n.norm() / d.norm())
        .collect();
    let metric = per_probe.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(WeakConvergence { eta, per_probe, metric })
}
