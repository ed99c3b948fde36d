//! Self-consistent screening of a localized charged defect in a
//! supercell.
//!
//! The host crystal is replicated m x m x m; the defect is a normalized
//! Gaussian charge nu of total strength Z. The induced density change
//! delta rho solves the fixed-point problem
//!
//!   delta rho = occ_density(H0 + v_c * (delta rho - nu)) - rho0
//!
//! at the supercell Gamma point, where rho0 is the unperturbed density
//! on the same basis, v_c multiplies Fourier series mode G != 0 by
//! 4 pi / |G|^2, and the occupied subspace is selected by the *host*
//! Fermi level, which is never updated. Convergence is measured in the
//! Coulomb energy norm of the density residual. Linearizing the loop
//! recovers (1 + L) delta rho = L nu, so for small Z the screened
//! charge nu - delta rho matches the unit-cell linear-response route.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{s, Array1, Array2};
use ndarray_linalg::{Eigh, Solve, UPLO};
use num_complex::Complex64;

use crate::bloch::{assemble_fiber, CrystalModel, FermiData};
use crate::error::{Error, Result};
use crate::lattice::{Lattice, PlaneWaveBasis};
use crate::response::GaussianCharge;
use crate::vec3;

/// Replicate a host crystal m times along each lattice vector. Host
/// reciprocal coordinates h become supercell coordinates m h; the
/// potential is unchanged as a function on space.
pub fn build_supercell(host: &CrystalModel, m: usize) -> Result<CrystalModel> {
    if m == 0 {
        return Err(Error::DimensionMismatch {
            context: "supercell replication factor",
            got: 0,
            expected: 1,
        });
    }
    let mi = m as i64;
    let a = [
        vec3::scale(host.lattice.a[0], m as f64),
        vec3::scale(host.lattice.a[1], m as f64),
        vec3::scale(host.lattice.a[2], m as f64),
    ];
    let lattice = Lattice::new(a)?;
    let mut v = BTreeMap::new();
    for (h, c) in &host.v_fourier {
        v.insert([h[0] * mi, h[1] * mi, h[2] * mi], *c);
    }
    CrystalModel::new(lattice, v, host.n_electrons * m * m * m)
}

/// Coulomb energy inner product of two periodic densities given by
/// Fourier series coefficients on the ball:
/// 4 pi |cell| sum_{G != 0} conj(f_G) g_G / |G|^2.
pub fn series_coulomb_inner(
    basis: &PlaneWaveBasis,
    f: &[Complex64],
    g: &[Complex64],
) -> Complex64 {
    debug_assert_eq!(f.len(), basis.len());
    let mut s = Complex64::new(0.0, 0.0);
    for i in 1..basis.len() {
        s += f[i].conj() * g[i] / basis.k2[i];
    }
    4.0 * PI * basis.lattice.cell_volume * s
}

pub fn series_coulomb_norm(basis: &PlaneWaveBasis, f: &[Complex64]) -> f64 {
    series_coulomb_inner(basis, f, f).re.max(0.0).sqrt()
}

/// Density mixing scheme for the self-consistent loop.
#[derive(Debug, Clone, Copy)]
pub enum Mixing {
    /// x <- x + alpha r. Safe for alpha below 2 / (1 + |L|).
    Damped { alpha: f64 },
    /// Anderson acceleration over the last `depth` residuals, with the
    /// damped update as its base step.
    Anderson { depth: usize, alpha: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct ScfOptions {
    pub mixing: Mixing,
    /// Absolute tolerance on the Coulomb norm of the density residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ScfOptions {
    fn default() -> ScfOptions {
        ScfOptions {
            mixing: Mixing::Damped { alpha: 0.2 },
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Converged defect calculation. All density-like vectors hold Fourier
/// series coefficients on the supercell ball (K = 0 entry first).
#[derive(Debug, Clone)]
pub struct DefectScf {
    pub supercell: CrystalModel,
    pub basis: PlaneWaveBasis,
    pub defect: GaussianCharge,
    /// Inherited host Fermi level (never updated during the loop).
    pub fermi: f64,
    pub density: Vec<Complex64>,
    pub density_unperturbed: Vec<Complex64>,
    /// Final effective potential series v_c * (delta rho - nu).
    pub v_eff: Vec<Complex64>,
    pub eigenvalues: Vec<f64>,
    pub n_occupied: usize,
    pub iterations: usize,
    pub residual: f64,
    /// Residual after each completed iteration (last entry == residual).
    pub residual_history: Vec<f64>,
    /// Supercell-trace change |cell| (rho - rho0)_0: the change in the
    /// occupied electron count, exactly an integer.
    pub tr0: f64,
}

impl DefectScf {
    /// Induced density change, series coefficients.
    pub fn induced_series(&self) -> Vec<Complex64> {
        self.density
            .iter()
            .zip(&self.density_unperturbed)
            .map(|(a, b)| a - b)
            .collect()
    }

    /// Continuous-transform sample of the induced density at ball index
    /// i: fhat(G_i) = |cell| (2 pi)^{-3/2} f_{G_i}.
    pub fn induced_fourier(&self, i: usize) -> Complex64 {
        let vol = self.basis.lattice.cell_volume;
        (self.density[i] - self.density_unperturbed[i]) * vol * (2.0 * PI).powf(-1.5)
    }

    /// Screening ratio (nuhat - delta-rhohat) / nuhat at ball index i.
    pub fn screening_ratio(&self, i: usize) -> Complex64 {
        let nu = self.defect.fourier(self.basis.kvecs[i]);
        (nu - self.induced_fourier(i)) / nu
    }

    /// Screening ratios on the first few reciprocal shells along a
    /// lattice axis, averaged over +-G: pairs (|G|, ratio).
    pub fn screening_ratios_along(&self, axis: usize, shells: usize) -> Vec<(f64, Complex64)> {
        let mut out = Vec::new();
        for s in 1..=shells as i64 {
            let mut c = [0i64; 3];
            c[axis] = s;
            let (Some(ip), Some(im)) = (
                self.basis.index_of(c),
                self.basis.index_of([-c[0], -c[1], -c[2]]),
            ) else {
                break;
            };
            let r = 0.5 * (self.screening_ratio(ip) + self.screening_ratio(im));
            out.push((vec3::norm(self.basis.kvecs[ip]), r));
        }
        out
    }
}

fn diagonalize(h: &Array2<Complex64>) -> Result<(Vec<f64>, Array2<Complex64>)> {
    let (vals, vecs) = h.eigh(UPLO::Lower).map_err(|e| Error::Eigensolver {
        q: [0.0; 3],
        reason: e.to_string(),
    })?;
    Ok((vals.to_vec(), vecs))
}

/// Density series of the lowest `n_occ` eigenvectors:
/// rho_G = (1/|cell|) sum_{K_i - K_j = G} P[i, j], P the band projector.
fn density_series(basis: &PlaneWaveBasis, vectors: &Array2<Complex64>, n_occ: usize) -> Vec<Complex64> {
    let dim = basis.len();
    let occ = vectors.slice(s![.., ..n_occ]).to_owned();
    let mut occ_h = occ.t().to_owned();
    occ_h.mapv_inplace(|z| z.conj());
    let p = occ.dot(&occ_h);
    let mut rho = vec![Complex64::new(0.0, 0.0); dim];
    let w = 1.0 / basis.lattice.cell_volume;
    for i in 0..dim {
        for j in 0..dim {
            if let Some(g) = basis.diff_index(i, j) {
                rho[g] += w * p[(i, j)];
            }
        }
    }
    rho
}

fn lag_matrix(basis: &PlaneWaveBasis, series: &[Complex64]) -> Array2<Complex64> {
    let dim = basis.len();
    let mut m = Array2::zeros((dim, dim));
    for i in 0..dim {
        for j in 0..dim {
            if let Some(d) = basis.diff_index(i, j) {
                m[(i, j)] = series[d];
            }
        }
    }
    m
}

/// Count eigenvalues below `fermi`, demanding clearance `margin`.
fn occupied_below(eps: &[f64], fermi: f64, margin: f64) -> Result<usize> {
    let mut n = 0;
    for &e in eps {
        if (e - fermi).abs() < margin {
            return Err(Error::EigenvalueAtFermi { value: e, fermi, margin });
        }
        if e <= fermi {
            n += 1;
        }
    }
    Ok(n)
}

struct AndersonMixer {
    depth: usize,
    alpha: f64,
    inputs: Vec<Vec<Complex64>>,
    residuals: Vec<Vec<Complex64>>,
}

impl AndersonMixer {
    fn new(depth: usize, alpha: f64) -> AndersonMixer {
        AndersonMixer { depth: depth.max(1), alpha, inputs: Vec::new(), residuals: Vec::new() }
    }

    /// Next input from the current (input, residual) pair: minimize the
    /// Coulomb norm of the combined residual over affine combinations of
    /// the stored history, then take the damped step from the combined
    /// point.
    fn step(&mut self, basis: &PlaneWaveBasis, x: &[Complex64], r: &[Complex64]) -> Vec<Complex64> {
        self.inputs.push(x.to_vec());
        self.residuals.push(r.to_vec());
        if self.inputs.len() > self.depth {
            self.inputs.remove(0);
            self.residuals.remove(0);
        }
        let k = self.inputs.len();
        let mut coeff = vec![0.0; k];
        if k == 1 {
            coeff[0] = 1.0;
        } else {
            let mut gram = Array2::<f64>::zeros((k, k));
            for i in 0..k {
                for j in 0..k {
                    gram[(i, j)] =
                        series_coulomb_inner(basis, &self.residuals[i], &self.residuals[j]).re;
                }
            }
            let ridge = 1e-12 * (0..k).map(|i| gram[(i, i)]).sum::<f64>().max(1e-300);
            for i in 0..k {
                gram[(i, i)] += ridge;
            }
            let ones = Array1::<f64>::ones(k);
            match gram.solve(&ones) {
                Ok(c) => {
                    let sum: f64 = c.sum();
                    if sum.abs() > 1e-14 {
                        for i in 0..k {
                            coeff[i] = c[i] / sum;
                        }
                    } else {
                        coeff[k - 1] = 1.0;
                    }
                }
                Err(_) => coeff[k - 1] = 1.0,
            }
        }
        let n = x.len();
        let mut next = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..k {
            for j in 0..n {
                next[j] += coeff[i] * (self.inputs[i][j] + self.alpha * self.residuals[i][j]);
            }
        }
        next
    }
}

/// Run the defect loop: replicate the host, inherit its Fermi level,
/// and iterate the density map to the stated tolerance.
pub fn solve_defect(
    host: &CrystalModel,
    host_fermi: &FermiData,
    m: usize,
    g_max: f64,
    defect: &GaussianCharge,
    opts: &ScfOptions,
) -> Result<DefectScf> {
    let supercell = build_supercell(host, m)?;
    let basis = PlaneWaveBasis::new(&supercell.lattice, g_max)?;
    let dim = basis.len();
    let vol = basis.lattice.cell_volume;
    let margin = 10.0 * host_fermi.gap_tol;
    let h0 = assemble_fiber(&supercell, &basis, [0.0; 3]);

    // unperturbed baseline on the same truncation
    let (eps0, vec0) = diagonalize(&h0)?;
    let homo = eps0
        .iter()
        .filter(|&&e| e <= host_fermi.fermi)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lumo = eps0
        .iter()
        .filter(|&&e| e > host_fermi.fermi)
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let gap = lumo - homo;
    if !gap.is_finite() || gap <= 10.0 * margin {
        return Err(Error::SupercellGapClosed { gap });
    }
    let n0 = occupied_below(&eps0, host_fermi.fermi, margin)?;
    if n0 != supercell.n_electrons {
        return Err(Error::NotAnInsulator {
            n_occ: n0,
            gap,
            tol: host_fermi.gap_tol,
        });
    }
    let rho0 = density_series(&basis, &vec0, n0);

    // defect charge as series coefficients
    let series_scale = (2.0 * PI).powf(1.5) / vol;
    let nu: Vec<Complex64> = basis
        .kvecs
        .iter()
        .map(|&k| defect.fourier(k) * series_scale)
        .collect();

    let mut x = vec![Complex64::new(0.0, 0.0); dim]; // delta rho, input side
    let mut anderson = match opts.mixing {
        Mixing::Anderson { depth, alpha } => Some(AndersonMixer::new(depth, alpha)),
        Mixing::Damped { .. } => None,
    };
    let mut history = Vec::new();

    for it in 1..=opts.max_iter {
        let mut v_eff = vec![Complex64::new(0.0, 0.0); dim];
        for i in 1..dim {
            v_eff[i] = 4.0 * PI * (x[i] - nu[i]) / basis.k2[i];
        }
        let h = &h0 + &lag_matrix(&basis, &v_eff);
        let (eps, vecs) = diagonalize(&h)?;
        let n_occ = occupied_below(&eps, host_fermi.fermi, margin)?;
        let rho = density_series(&basis, &vecs, n_occ);
        let delta: Vec<Complex64> = rho.iter().zip(&rho0).map(|(a, b)| a - b).collect();
        let r: Vec<Complex64> = delta.iter().zip(&x).map(|(a, b)| a - b).collect();
        let residual = series_coulomb_norm(&basis, &r);
        history.push(residual);

        if residual <= opts.tol {
            let tr0 = vol * (rho[0] - rho0[0]).re;
            return Ok(DefectScf {
                supercell,
                basis,
                defect: *defect,
                fermi: host_fermi.fermi,
                density: rho,
                density_unperturbed: rho0,
                v_eff,
                eigenvalues: eps,
                n_occupied: n_occ,
                iterations: it,
                residual,
                residual_history: history,
                tr0,
            });
        }

        x = match (&mut anderson, opts.mixing) {
            (Some(mixer), _) => mixer.step(&basis, &x, &r),
            (None, Mixing::Damped { alpha }) => x
                .iter()
                .zip(&r)
                .map(|(xi, ri)| xi + alpha * ri)
                .collect(),
            (None, Mixing::Anderson { .. }) => unreachable!(),
        };
    }

    Err(Error::ScfNotConverged {
        iterations: opts.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::{fermi_level, solve_bands, solve_fiber, PhaseConvention, GAP_TOL};
    use crate::lattice::BzGrid;

    fn host_with_fermi(g_max: f64, n_k: usize) -> (CrystalModel, FermiData) {
        let model = CrystalModel::cosine_cubic();
        let basis = PlaneWaveBasis::new(&model.lattice, g_max).unwrap();
        let grid = BzGrid::new(&model.lattice, n_k).unwrap();
        let bands = solve_bands(&model, &basis, &grid).unwrap();
        let fermi = fermi_level(&bands, 1, GAP_TOL).unwrap();
        (model, fermi)
    }

    #[test]
    fn supercell_of_one_is_the_host() {
        let host = CrystalModel::cosine_cubic();
        let sc = build_supercell(&host, 1).unwrap();
        assert_eq!(sc.n_electrons, host.n_electrons);
        assert_eq!(sc.v_fourier, host.v_fourier);
        assert!((sc.lattice.cell_volume - host.lattice.cell_volume).abs() < 1e-12);
    }

    /// Exact block decomposition: the supercell Gamma spectrum must be
    /// the union, over the m^3 fractional momentum classes, of host-type
    /// fiber matrices assembled on the induced momentum lists (same
    /// literal vectors, same potential couplings).
    #[test]
    fn supercell_gamma_folds_host_blocks_exactly() {
        let host = CrystalModel::cosine_cubic();
        let m = 2usize;
        let sc = build_supercell(&host, m).unwrap();
        let g_max = 1.4;
        let basis = PlaneWaveBasis::new(&sc.lattice, g_max).unwrap();
        let f = solve_fiber(&sc, &basis, [0.0; 3], PhaseConvention::default()).unwrap();

        // classify supercell coordinates by residue mod m
        let mi = m as i64;
        let mut classes: std::collections::HashMap<[i64; 3], Vec<usize>> =
            std::collections::HashMap::new();
        for (i, c) in basis.coords.iter().enumerate() {
            let key = [c[0].rem_euclid(mi), c[1].rem_euclid(mi), c[2].rem_euclid(mi)];
            classes.entry(key).or_default().push(i);
        }
        assert_eq!(classes.len(), m * m * m);

        let mut union: Vec<f64> = Vec::new();
        for members in classes.values() {
            let n = members.len();
            let mut h = Array2::<Complex64>::zeros((n, n));
            for (a, &i) in members.iter().enumerate() {
                h[(a, a)] = Complex64::new(0.5 * basis.k2[i], 0.0);
                for (b, &j) in members.iter().enumerate() {
                    let d = [
                        basis.coords[i][0] - basis.coords[j][0],
                        basis.coords[i][1] - basis.coords[j][1],
                        basis.coords[i][2] - basis.coords[j][2],
                    ];
                    // within a class, differences are multiples of m:
                    // host coupling at d / m
                    assert!(d.iter().all(|x| x % mi == 0));
                    let hd = [d[0] / mi, d[1] / mi, d[2] / mi];
                    if let Some(v) = host.v_fourier.get(&hd) {
                        h[(a, b)] += v;
                    }
                }
            }
            let (vals, _) = h.eigh(UPLO::Lower).unwrap();
            union.extend(vals.iter());
        }
        union.sort_by(|a, b| a.partial_cmp(b).unwrap());

        assert_eq!(union.len(), f.eps.len());
        for (a, b) in union.iter().zip(&f.eps) {
            assert!((a - b).abs() < 1e-10, "folded {a} vs supercell {b}");
        }
    }

    #[test]
    fn zero_charge_converges_immediately() {
        let (host, fermi) = host_with_fermi(1.2, 2);
        let defect = GaussianCharge { total: 0.0, center: [0.0; 3], width: 1.0 };
        let sol = solve_defect(&host, &fermi, 2, 1.2, &defect, &ScfOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.residual == 0.0);
        assert!(series_coulomb_norm(&sol.basis, &sol.induced_series()) == 0.0);
        assert!(sol.tr0.abs() < 1e-12);
    }

    #[test]
    fn small_charge_screens_and_stays_neutral() {
        let (host, fermi) = host_with_fermi(1.2, 2);
        let defect = GaussianCharge { total: 0.01, center: [0.0; 3], width: 2.0 };
        let opts = ScfOptions {
            mixing: Mixing::Anderson { depth: 5, alpha: 0.5 },
            tol: 1e-9,
            max_iter: 60,
        };
        let sol = solve_defect(&host, &fermi, 2, 1.2, &defect, &opts).unwrap();
        assert!(sol.residual <= 1e-9);
        assert!(sol.tr0.abs() < 1e-10, "electron count changed: {}", sol.tr0);
        assert_eq!(sol.n_occupied, sol.supercell.n_electrons);

        let ratios = sol.screening_ratios_along(0, 2);
        assert!(!ratios.is_empty());
        for (k, r) in &ratios {
            assert!(r.im.abs() < 1e-10, "ratio at |G| = {k} not real: {r}");
            assert!(
                r.re > 0.05 && r.re < 1.0,
                "ratio at |G| = {k} out of the screening range: {r}"
            );
        }
        // smaller momentum screens more strongly
        assert!(ratios[0].1.re < ratios[1].1.re);
    }

    /// Anderson and plain damped mixing must land on the same fixed
    /// point; only the step count differs.
    #[test]
    fn mixers_agree_on_the_fixed_point() {
        let (host, fermi) = host_with_fermi(1.2, 2);
        let defect = GaussianCharge { total: 0.02, center: [0.3, 0.1, -0.2], width: 1.5 };
        let damped = solve_defect(
            &host,
            &fermi,
            2,
            1.2,
            &defect,
            &ScfOptions { mixing: Mixing::Damped { alpha: 0.45 }, tol: 1e-10, max_iter: 200 },
        )
        .unwrap();
        let anderson = solve_defect(
            &host,
            &fermi,
            2,
            1.2,
            &defect,
            &ScfOptions {
                mixing: Mixing::Anderson { depth: 5, alpha: 0.5 },
                tol: 1e-10,
                max_iter: 60,
            },
        )
        .unwrap();
        let diff: Vec<Complex64> = damped
            .density
            .iter()
            .zip(&anderson.density)
            .map(|(a, b)| a - b)
            .collect();
        let rel = series_coulomb_norm(&damped.basis, &diff)
            / series_coulomb_norm(&damped.basis, &damped.induced_series());
        assert!(rel < 1e-6, "fixed points differ by {rel:.3e}");
        assert!(anderson.iterations < damped.iterations);
    }

    /// Induced density scales linearly in Z for small charges: halving
    /// Z halves the response to a few percent.
    #[test]
    fn response_is_linear_in_small_charge() {
        let (host, fermi) = host_with_fermi(1.2, 2);
        let opts = ScfOptions {
            mixing: Mixing::Anderson { depth: 5, alpha: 0.5 },
            tol: 1e-10,
            max_iter: 60,
        };
        let big = GaussianCharge { total: 0.02, center: [0.0; 3], width: 2.0 };
        let small = GaussianCharge { total: 0.01, center: [0.0; 3], width: 2.0 };
        let s1 = solve_defect(&host, &fermi, 2, 1.2, &big, &opts).unwrap();
        let s2 = solve_defect(&host, &fermi, 2, 1.2, &small, &opts).unwrap();
        let d1 = s1.induced_series();
        let d2 = s2.induced_series();
        let diff: Vec<Complex64> = d1.iter().zip(&d2).map(|(a, b)| a - 2.0 * b).collect();
        let rel = series_coulomb_norm(&s1.basis, &diff) / series_coulomb_norm(&s1.basis, &d1);
        assert!(rel < 2e-2, "nonlinearity {rel:.3e}");
    }

    #[test]
    fn fermi_inside_band_is_rejected() {
        let (host, fermi) = host_with_fermi(1.2, 2);
        let mut bad = fermi.clone();
        // deep below the occupied band: nothing occupied, "gap" fine; instead
        // park it right on the first eigenvalue region by shifting into the band
        bad.fermi = fermi.homo - 0.05;
        let defect = GaussianCharge { total: 0.01, center: [0.0; 3], width: 2.0 };
        match solve_defect(&host, &bad, 2, 1.2, &defect, &ScfOptions::default()) {
            Err(Error::SupercellGapClosed { .. })
            | Err(Error::EigenvalueAtFermi { .. })
            | Err(Error::NotAnInsulator { .. }) => {}
            other => panic!("expected a gap failure, got {other:?}"),
        }
    }
}
