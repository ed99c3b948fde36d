//! Static density response of the insulating ground state, fiber by fiber.
//!
//! A density-like perturbation with total momentum q is stored as samples
//! of its continuous Fourier transform on the shifted ball {q + K}. The
//! response kernels couple the grid fibers at q' to companion fibers at
//! the literal momenta q' - q (never folded back into the first zone), so
//! charge neutrality at q = 0 and time reversal hold exactly within the
//! truncated model, not just up to discretization error.
//!
//! Conventions: Fourier transform fhat(k) = (2 pi)^{-3/2} Int f e^{-ik.x};
//! the periodic Coulomb kernel multiplies mode q + K by 4 pi / |q + K|^2
//! and annihilates modes on the reciprocal lattice (charge neutrality).
//! The screening operator is L = -(induced density of the Coulomb-dressed
//! perturbation); it is symmetric and nonnegative in the Coulomb inner
//! product [`coulomb_inner`].

use std::f64::consts::PI;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::bloch::{BlochBands, FermiData};
use crate::error::{Error, Result};
use crate::lattice::PlaneWaveBasis;
use crate::vec3::{self, V3};

/// Modes with |q + K| below this fraction of the shortest dual basis
/// vector count as charge-neutral (on the reciprocal lattice).
const NEUTRAL_REL_TOL: f64 = 1e-9;

/// Density-like fiber at total momentum `momentum`: `coeffs[i]` is the
/// continuous Fourier transform sampled at `momentum + K_i` over the
/// basis ball. The underlying periodic part is
/// (2 pi)^{3/2} / |cell| * sum_K coeffs[K] e^{iK.x}.
#[derive(Debug, Clone)]
pub struct BlochDensity {
    pub momentum: V3,
    pub coeffs: Vec<Complex64>,
}

impl BlochDensity {
    pub fn zeros(basis: &PlaneWaveBasis, momentum: V3) -> BlochDensity {
        BlochDensity { momentum, coeffs: vec![Complex64::new(0.0, 0.0); basis.len()] }
    }

    /// Sample a Fourier-transform function on the shifted ball.
    pub fn from_fn(
        basis: &PlaneWaveBasis,
        momentum: V3,
        fhat: impl Fn(V3) -> Complex64,
    ) -> BlochDensity {
        let coeffs = basis
            .kvecs
            .iter()
            .map(|&k| fhat(vec3::add(momentum, k)))
            .collect();
        BlochDensity { momentum, coeffs }
    }

    /// Coefficient at K = 0, i.e. the transform at the fiber momentum
    /// itself (the basis keeps K = 0 first).
    pub fn head(&self) -> Complex64 {
        self.coeffs[0]
    }

    pub fn scaled(&self, t: Complex64) -> BlochDensity {
        BlochDensity {
            momentum: self.momentum,
            coeffs: self.coeffs.iter().map(|c| c * t).collect(),
        }
    }

    /// Plain Euclidean norm of the coefficient vector.
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    fn check_dim(&self, basis: &PlaneWaveBasis, context: &'static str) -> Result<()> {
        if self.coeffs.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                context,
                got: self.coeffs.len(),
                expected: basis.len(),
            });
        }
        Ok(())
    }
}

/// Fourier multipliers 4 pi / |q + K|^2 of the Coulomb kernel on the
/// fiber at q, with charge-neutral modes set to zero.
pub fn coulomb_multipliers(basis: &PlaneWaveBasis, q: V3) -> Vec<f64> {
    let floor = neutral_floor(basis);
    basis
        .kvecs
        .iter()
        .map(|&k| {
            let p2 = vec3::norm2(vec3::add(q, k));
            if p2 <= floor * floor {
                0.0
            } else {
                4.0 * PI / p2
            }
        })
        .collect()
}

fn neutral_floor(basis: &PlaneWaveBasis) -> f64 {
    let bmin = basis
        .lattice
        .b
        .iter()
        .map(|&bi| vec3::norm(bi))
        .fold(f64::INFINITY, f64::min);
    NEUTRAL_REL_TOL * bmin
}

/// Coulomb potential created by a density fiber: multiplier applied
/// mode by mode (the result samples vhat(q + K) = 4 pi rhohat / |q+K|^2).
pub fn apply_coulomb(basis: &PlaneWaveBasis, rho: &BlochDensity) -> BlochDensity {
    let mult = coulomb_multipliers(basis, rho.momentum);
    BlochDensity {
        momentum: rho.momentum,
        coeffs: rho.coeffs.iter().zip(&mult).map(|(c, m)| c * m).collect(),
    }
}

/// Hermitian Coulomb (energy) inner product of two fibers at the same
/// momentum: 4 pi sum_K conj(f) g / |q + K|^2 over non-neutral modes.
pub fn coulomb_inner(basis: &PlaneWaveBasis, f: &BlochDensity, g: &BlochDensity) -> Complex64 {
    debug_assert_eq!(f.coeffs.len(), g.coeffs.len());
    let mult = coulomb_multipliers(basis, f.momentum);
    f.coeffs
        .iter()
        .zip(&g.coeffs)
        .zip(&mult)
        .map(|((a, b), m)| a.conj() * b * m)
        .sum()
}

/// Coulomb norm sqrt(D(f, f)).
pub fn coulomb_norm(basis: &PlaneWaveBasis, f: &BlochDensity) -> f64 {
    coulomb_inner(basis, f, f).re.max(0.0).sqrt()
}

/// Lag matrix of Fourier samples on the ball: M[i, j] = samples[K_i - K_j]
/// (zero when the difference leaves the ball). Up to the constant
/// (2 pi)^{3/2} / |cell| this is the matrix of "multiply by the periodic
/// function with those transform samples" in the normalized plane-wave
/// basis; callers track that constant explicitly.
fn lag_matrix(basis: &PlaneWaveBasis, samples: &[Complex64]) -> Array2<Complex64> {
    let n = basis.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if let Some(d) = basis.diff_index(i, j) {
                m[(i, j)] = samples[d];
            }
        }
    }
    m
}

/// Accumulate the lag sums of a coefficient-space density matrix:
/// out[K] += w * sum_{K_i - K_j = K} d[i, j].
fn accumulate_lags(basis: &PlaneWaveBasis, d: &Array2<Complex64>, w: f64, out: &mut [Complex64]) {
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            if let Some(g) = basis.diff_index(i, j) {
                out[g] += w * d[(i, j)];
            }
        }
    }
}

fn conj_t(a: &Array2<Complex64>) -> Array2<Complex64> {
    let mut t = a.t().to_owned();
    t.mapv_inplace(|z| z.conj());
    t
}

fn herm_margin(fermi: &FermiData) -> f64 {
    10.0 * fermi.gap_tol
}

/// First-order density induced by a potential-like fiber `v` (transform
/// samples of the perturbing potential at q + K): the static independent-
/// particle response, negative semidefinite as a quadratic form. Fibers
/// at q' - q are diagonalized at their literal momenta.
pub fn apply_chi0(bands: &BlochBands, fermi: &FermiData, v: &BlochDensity) -> Result<BlochDensity> {
    let basis = &bands.basis;
    v.check_dim(basis, "potential fiber length")?;
    let q = v.momentum;
    let shifted = bands.shifted_fibers(vec3::neg(q))?;
    let m = lag_matrix(basis, &v.coeffs);
    let margin = herm_margin(fermi);
    let dim = basis.len();
    let zero = || vec![Complex64::new(0.0, 0.0); basis.len()];

    let total = bands
        .fibers
        .par_iter()
        .zip(shifted.par_iter())
        .map(|(f, g)| -> Result<Vec<Complex64>> {
            let n_f = f.occupied_count(fermi.fermi, margin)?;
            let n_g = g.occupied_count(fermi.fermi, margin)?;
            let t = conj_t(&f.vectors).dot(&m.dot(&g.vectors));
            let mut c = Array2::<Complex64>::zeros((dim, dim));
            for n in 0..n_f {
                for np in n_g..dim {
                    c[(n, np)] = t[(n, np)] / (g.eps[np] - f.eps[n]);
                }
            }
            for np in n_f..dim {
                for n in 0..n_g {
                    c[(np, n)] = t[(np, n)] / (f.eps[np] - g.eps[n]);
                }
            }
            let d = f.vectors.dot(&c).dot(&conj_t(&g.vectors));
            let mut out = zero();
            accumulate_lags(basis, &d, bands.grid.weight / basis.lattice.cell_volume, &mut out);
            Ok(out)
        })
        .try_reduce(zero, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            Ok(a)
        })?;

    Ok(BlochDensity { momentum: q, coeffs: total.iter().map(|c| -c).collect() })
}

/// Screening operator L = Coulomb-dress then respond, negated: symmetric
/// and nonnegative in the Coulomb inner product, and annihilated on
/// charge-neutral modes on both sides.
pub fn apply_l(bands: &BlochBands, fermi: &FermiData, rho: &BlochDensity) -> Result<BlochDensity> {
    let dressed = apply_coulomb(&bands.basis, rho);
    let chi = apply_chi0(bands, fermi, &dressed)?;
    Ok(chi.scaled(Complex64::new(-1.0, 0.0)))
}

/// Small-momentum curvature of the screening operator: a real symmetric
/// positive semidefinite 3x3 tensor with B(eta sigma) / eta^2 ->
/// sigma^T L sigma as eta -> 0 (see [`b_factor`]).
#[derive(Debug, Clone, Copy)]
pub struct ResponseTensorL {
    pub matrix: [[f64; 3]; 3],
}

impl ResponseTensorL {
    /// Isotropic average: one third of the trace.
    pub fn l0(&self) -> f64 {
        (self.matrix[0][0] + self.matrix[1][1] + self.matrix[2][2]) / 3.0
    }

    pub fn quadratic_form(&self, sigma: V3) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                s += sigma[a] * self.matrix[a][b] * sigma[b];
            }
        }
        s
    }

    /// Largest |L_ab - L_ba|, an exactness diagnostic (zero up to rounding).
    pub fn asymmetry(&self) -> f64 {
        let mut r: f64 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                r = r.max((self.matrix[a][b] - self.matrix[b][a]).abs());
            }
        }
        r
    }

    /// Smallest eigenvalue of the symmetrized tensor.
    pub fn min_eigenvalue(&self) -> f64 {
        sym3_eigenvalues(&self.matrix)[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        sym3_eigenvalues(&self.matrix)[2]
    }
}

/// Ascending eigenvalues of a (symmetrized) real 3x3 matrix, via the
/// closed-form trigonometric solution of the characteristic cubic.
pub(crate) fn sym3_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let a = [
        [m[0][0], 0.5 * (m[0][1] + m[1][0]), 0.5 * (m[0][2] + m[2][0])],
        [0.5 * (m[0][1] + m[1][0]), m[1][1], 0.5 * (m[1][2] + m[2][1])],
        [0.5 * (m[0][2] + m[2][0]), 0.5 * (m[1][2] + m[2][1]), m[2][2]],
    ];
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let mut p2 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let c = a[i][j] - if i == j { q } else { 0.0 };
            p2 += c * c;
        }
    }
    let p = (p2 / 6.0).sqrt();
    if p < 1e-300 {
        return [q, q, q];
    }
    // det((A - qI)/p) restricted to [-2, 2] against rounding
    let b = |i: usize, j: usize| (a[i][j] - if i == j { q } else { 0.0 }) / p;
    let detb = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
        - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
        + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
    let phi = ((detb / 2.0).clamp(-1.0, 1.0)).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    let mut v = [e1, e2, e3];
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    v
}

/// Assemble the curvature tensor from interband gradient matrix elements:
/// L_ab = (8 pi / |cell|) avg_q' sum_{n occ, n' emp}
///        Re[ g_a conj(g_b) ] / (eps_n' - eps_n)^3,
/// g_a = <d_a u_n, u_n'> = -i sum_K K_a conj(c_{K,n}) c_{K,n'}.
pub fn response_tensor_l(bands: &BlochBands, fermi: &FermiData) -> Result<ResponseTensorL> {
    let basis = &bands.basis;
    let margin = herm_margin(fermi);
    let dim = basis.len();

    let sums = bands
        .fibers
        .par_iter()
        .map(|f| -> Result<[[f64; 3]; 3]> {
            let n_occ = f.occupied_count(fermi.fermi, margin)?;
            let mut acc = [[0.0; 3]; 3];
            for n in 0..n_occ {
                // g_a over all bands in one pass: rows = 3, cols = dim
                let mut g = Array2::<Complex64>::zeros((3, dim));
                for a in 0..3 {
                    let mut d = ndarray::Array1::<Complex64>::zeros(dim);
                    for (i, &k) in basis.kvecs.iter().enumerate() {
                        d[i] = Complex64::new(0.0, -k[a]) * f.vectors[(i, n)].conj();
                    }
                    let row = d.dot(&f.vectors);
                    g.slice_mut(s![a, ..]).assign(&row);
                }
                for np in n_occ..dim {
                    let de = f.eps[np] - f.eps[n];
                    let w = 1.0 / (de * de * de);
                    for a in 0..3 {
                        for b in 0..3 {
                            acc[a][b] += w * (g[(a, np)] * g[(b, np)].conj()).re;
                        }
                    }
                }
            }
            Ok(acc)
        })
        .try_reduce(
            || [[0.0; 3]; 3],
            |mut x, y| {
                for a in 0..3 {
                    for b in 0..3 {
                        x[a][b] += y[a][b];
                    }
                }
                Ok(x)
            },
        )?;

    let scale = 8.0 * PI / basis.lattice.cell_volume * bands.grid.weight;
    let mut matrix = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            matrix[a][b] = scale * sums[a][b];
        }
    }
    Ok(ResponseTensorL { matrix })
}

/// Head factor of the screening operator at momentum q (q not on the
/// reciprocal lattice):
/// B(q) = (8 pi / |cell|) avg_q' sum_{n occ, n' emp}
///        |<u_{n,q'}, u_{n',q'-q}>|^2 / (eps_{n',q'-q} - eps_{n,q'}).
/// Positive, even in q, and B(eta sigma)/eta^2 -> sigma^T L sigma.
///
/// Since momenta are never folded, evenness is exact (to rounding) only
/// when the literal grid point set is closed under negation, i.e. for
/// odd grids; an even grid leaves its half-zone face points unpaired and
/// breaks q -> -q at the basis-truncation level instead.
pub fn b_factor(bands: &BlochBands, fermi: &FermiData, q: V3) -> Result<f64> {
    let basis = &bands.basis;
    reject_lattice_momentum(basis, q)?;
    let shifted = bands.shifted_fibers(vec3::neg(q))?;
    let margin = herm_margin(fermi);
    let dim = basis.len();

    let sum = bands
        .fibers
        .par_iter()
        .zip(shifted.par_iter())
        .map(|(f, g)| -> Result<f64> {
            let n_f = f.occupied_count(fermi.fermi, margin)?;
            let n_g = g.occupied_count(fermi.fermi, margin)?;
            let occ = f.vectors.slice(s![.., ..n_f]);
            let emp = g.vectors.slice(s![.., n_g..]);
            let mut occ_h = occ.t().to_owned();
            occ_h.mapv_inplace(|z| z.conj());
            let o = occ_h.dot(&emp);
            let mut acc = 0.0;
            for n in 0..n_f {
                for (j, np) in (n_g..dim).enumerate() {
                    acc += o[(n, j)].norm_sqr() / (g.eps[np] - f.eps[n]);
                }
            }
            Ok(acc)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a + b))?;

    Ok(8.0 * PI / basis.lattice.cell_volume * bands.grid.weight * sum)
}

fn reject_lattice_momentum(basis: &PlaneWaveBasis, q: V3) -> Result<()> {
    let nearest = basis.lattice.recip(basis.lattice.nearest_recip(q));
    if vec3::norm(vec3::sub(q, nearest)) <= neutral_floor(basis) {
        return Err(Error::MomentumOnLattice { q });
    }
    Ok(())
}

/// Positively oriented circle in the complex energy plane enclosing the
/// occupied spectrum, discretized with the n-node trapezoid rule (which
/// converges geometrically for resolvent integrands).
#[derive(Debug, Clone, Copy)]
pub struct ContourSpec {
    pub center: f64,
    pub radius: f64,
    pub nodes: usize,
}

impl ContourSpec {
    pub const DEFAULT_NODES: usize = 64;

    /// Circle chosen from the band data: through the gap midpoint on the
    /// right, a quarter gap below the spectrum bottom on the left.
    pub fn enclosing(bands: &BlochBands, fermi: &FermiData) -> ContourSpec {
        let min = bands
            .fibers
            .iter()
            .map(|f| f.eps[0])
            .fold(f64::INFINITY, f64::min);
        let center = 0.5 * (min + fermi.fermi);
        let radius = 0.5 * (fermi.fermi - min) + 0.25 * fermi.gap;
        ContourSpec { center, radius, nodes: Self::DEFAULT_NODES }
    }

    /// Quadrature nodes z_j = c + r e^{i theta_j} and weights
    /// w_j = (z_j - c) / n, so that sum_j w_j h(z_j) approximates the
    /// contour average (1 / 2 pi i) closed-integral h(z) dz.
    pub fn points_weights(&self) -> Vec<(Complex64, Complex64)> {
        let c = Complex64::new(self.center, 0.0);
        (0..self.nodes)
            .map(|j| {
                let theta = 2.0 * PI * j as f64 / self.nodes as f64;
                let e = Complex64::from_polar(self.radius, theta);
                (c + e, e / self.nodes as f64)
            })
            .collect()
    }

    /// Check that every eigenvalue keeps `need` clearance from the circle
    /// and that exactly the `n_occ` lowest lie inside.
    fn validate(&self, eps: &[f64], n_occ: usize, need: f64) -> Result<()> {
        for (i, &e) in eps.iter().enumerate() {
            let dist = ((e - self.center).abs() - self.radius).abs();
            if dist < need {
                return Err(Error::ContourTouchesSpectrum { dist, need });
            }
            let inside = (e - self.center).abs() < self.radius;
            if inside != (i < n_occ) {
                return Err(Error::ContourTouchesSpectrum { dist: 0.0, need });
            }
        }
        Ok(())
    }
}

/// Density of the contour-quadrature response together with its block
/// diagnostics; see [`q1v_contour`].
#[derive(Debug, Clone)]
pub struct ContourResponse {
    pub density: BlochDensity,
    /// Largest matrix element inside the occupied-occupied and
    /// empty-empty blocks; exact quadrature gives zero.
    pub diagonal_block_residual: f64,
}

/// First-order response computed as a resolvent contour quadrature
/// instead of the explicit eigenpair sum: the operator
/// (1 / 2 pi i) closed-integral R(z) V R(z) dz on each fiber pair, with
/// the circle from `contour`. Agrees with [`apply_chi0`] to quadrature
/// accuracy, which improves geometrically in `contour.nodes`; the
/// occupied-occupied and empty-empty blocks then vanish, which is
/// reported as a residual diagnostic rather than assumed.
pub fn q1v_contour(
    bands: &BlochBands,
    fermi: &FermiData,
    v: &BlochDensity,
    contour: &ContourSpec,
) -> Result<ContourResponse> {
    let basis = &bands.basis;
    v.check_dim(basis, "potential fiber length")?;
    let q = v.momentum;
    let shifted = bands.shifted_fibers(vec3::neg(q))?;
    let m = lag_matrix(basis, &v.coeffs);
    let margin = herm_margin(fermi);
    let dim = basis.len();
    let pw = contour.points_weights();
    let clearance = 0.05 * fermi.gap;
    let zero = || (vec![Complex64::new(0.0, 0.0); dim], 0.0f64);

    let (total, resid) = bands
        .fibers
        .par_iter()
        .zip(shifted.par_iter())
        .map(|(f, g)| -> Result<(Vec<Complex64>, f64)> {
            let n_f = f.occupied_count(fermi.fermi, margin)?;
            let n_g = g.occupied_count(fermi.fermi, margin)?;
            contour.validate(&f.eps, n_f, clearance)?;
            contour.validate(&g.eps, n_g, clearance)?;

            // rank-nodes factorization of the pair kernel
            // S[n, n'] = sum_j w_j / ((z_j - eps_f[n]) (z_j - eps_g[n']))
            let mut af = Array2::<Complex64>::zeros((dim, pw.len()));
            let mut bg = Array2::<Complex64>::zeros((pw.len(), dim));
            for (j, &(z, w)) in pw.iter().enumerate() {
                for n in 0..dim {
                    af[(n, j)] = w / (z - f.eps[n]);
                    bg[(j, n)] = Complex64::new(1.0, 0.0) / (z - g.eps[n]);
                }
            }
            let s_kernel = af.dot(&bg);

            let mut t = conj_t(&f.vectors).dot(&m.dot(&g.vectors));
            t.zip_mut_with(&s_kernel, |x, s| *x *= s);

            let mut resid: f64 = 0.0;
            for n in 0..n_f {
                for np in 0..n_g {
                    resid = resid.max(t[(n, np)].norm());
                }
            }
            for n in n_f..dim {
                for np in n_g..dim {
                    resid = resid.max(t[(n, np)].norm());
                }
            }

            let d = f.vectors.dot(&t).dot(&conj_t(&g.vectors));
            let mut out = vec![Complex64::new(0.0, 0.0); dim];
            accumulate_lags(basis, &d, bands.grid.weight / basis.lattice.cell_volume, &mut out);
            Ok((out, resid))
        })
        .try_reduce(zero, |mut a, b| {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += y;
            }
            Ok((a.0, a.1.max(b.1)))
        })?;

    Ok(ContourResponse {
        density: BlochDensity { momentum: q, coeffs: total },
        diagonal_block_residual: resid,
    })
}

/// Second-order induced density for an external charge with transform
/// `rho_hat`, evaluated on the fiber at q. Both intermediate Coulomb
/// factors are sampled at their literal momenta, and all six occupancy
/// patterns of the three resolvent legs are summed in one pass; their
/// exact pairwise cancellations (in particular a vanishing head at
/// q = 0) then hold to rounding.
pub fn r2_density(
    bands: &BlochBands,
    fermi: &FermiData,
    rho_hat: &(dyn Fn(V3) -> Complex64 + Sync),
    q: V3,
) -> Result<BlochDensity> {
    let basis = &bands.basis;
    let shifted = bands.shifted_fibers(vec3::neg(q))?;
    let margin = herm_margin(fermi);
    let dim = basis.len();
    let floor = neutral_floor(basis);
    let npts = bands.grid.points.len();
    let zero = || vec![Complex64::new(0.0, 0.0); dim];

    // Coulomb-dressed samples of rho_hat at p + K over the ball
    let dressed = |p: V3| -> Vec<Complex64> {
        basis
            .kvecs
            .iter()
            .map(|&k| {
                let kk = vec3::add(p, k);
                let p2 = vec3::norm2(kk);
                if p2 <= floor * floor {
                    Complex64::new(0.0, 0.0)
                } else {
                    rho_hat(kk) * (4.0 * PI / p2)
                }
            })
            .collect()
    };

    let pairs: Vec<(usize, usize)> =
        (0..npts).flat_map(|j| (0..npts).map(move |l| (j, l))).collect();

    let total = pairs
        .par_iter()
        .map(|&(j, l)| -> Result<Vec<Complex64>> {
            let f = &bands.fibers[j]; // fiber at q'
            let h = &bands.fibers[l]; // fiber at r
            let g = &shifted[j]; // fiber at q' - q
            let n_f = f.occupied_count(fermi.fermi, margin)?;
            let n_h = h.occupied_count(fermi.fermi, margin)?;
            let n_g = g.occupied_count(fermi.fermi, margin)?;

            let p1 = vec3::sub(bands.grid.points[j], bands.grid.points[l]);
            let p2 = vec3::add(vec3::sub(bands.grid.points[l], bands.grid.points[j]), q);
            let m1 = lag_matrix(basis, &dressed(p1));
            let m2 = lag_matrix(basis, &dressed(p2));
            let w1 = conj_t(&f.vectors).dot(&m1.dot(&h.vectors));
            let w2 = conj_t(&h.vectors).dot(&m2.dot(&g.vectors));

            // X1oe[a,b] = W1[a,b] / (e_f[a] - e_h[b]), a occ, b emp
            let mut x1oe = w1.slice(s![..n_f, n_h..]).to_owned();
            for a in 0..n_f {
                for (bj, b) in (n_h..dim).enumerate() {
                    x1oe[(a, bj)] /= f.eps[a] - h.eps[b];
                }
            }
            // X1eo[a,b] = W1[a,b] / (e_h[b] - e_f[a]), a emp, b occ
            let mut x1eo = w1.slice(s![n_f.., ..n_h]).to_owned();
            for (ai, a) in (n_f..dim).enumerate() {
                for b in 0..n_h {
                    x1eo[(ai, b)] /= h.eps[b] - f.eps[a];
                }
            }
            // X2oe[b,c] = W2[b,c] / (e_h[b] - e_g[c]), b occ, c emp
            let mut x2oe = w2.slice(s![..n_h, n_g..]).to_owned();
            for b in 0..n_h {
                for (cj, c) in (n_g..dim).enumerate() {
                    x2oe[(b, cj)] /= h.eps[b] - g.eps[c];
                }
            }
            // X2eo[b,c] = W2[b,c] / (e_g[c] - e_h[b]), b emp, c occ
            let mut x2eo = w2.slice(s![n_h.., ..n_g]).to_owned();
            for (bi, b) in (n_h..dim).enumerate() {
                for c in 0..n_g {
                    x2eo[(bi, c)] /= g.eps[c] - h.eps[b];
                }
            }

            let mut t = Array2::<Complex64>::zeros((dim, dim));
            // occupied rows, occupied columns: intermediate leg empty
            t.slice_mut(s![..n_f, ..n_g]).assign(&x1oe.dot(&x2eo).mapv(|z| -z));
            // empty-empty: intermediate leg occupied
            t.slice_mut(s![n_f.., n_g..]).assign(&x1eo.dot(&x2oe));
            // occupied-empty
            {
                let mut blk = x1oe.dot(&w2.slice(s![n_h.., n_g..]))
                    - w1.slice(s![..n_f, ..n_h]).dot(&x2oe);
                for a in 0..n_f {
                    for (cj, c) in (n_g..dim).enumerate() {
                        blk[(a, cj)] /= f.eps[a] - g.eps[c];
                    }
                }
                t.slice_mut(s![..n_f, n_g..]).assign(&blk);
            }
            // empty-occupied
            {
                let mut blk = w1.slice(s![n_f.., n_h..]).dot(&x2eo)
                    - x1eo.dot(&w2.slice(s![..n_h, ..n_g]));
                for (ai, a) in (n_f..dim).enumerate() {
                    for c in 0..n_g {
                        blk[(ai, c)] /= g.eps[c] - f.eps[a];
                    }
                }
                t.slice_mut(s![n_f.., ..n_g]).assign(&blk);
            }

            let d = f.vectors.dot(&t).dot(&conj_t(&g.vectors));
            let mut out = zero();
            accumulate_lags(basis, &d, bands.grid.weight * bands.grid.weight, &mut out);
            Ok(out)
        })
        .try_reduce(zero, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            Ok(a)
        })?;

    let vol = basis.lattice.cell_volume;
    let scale = (2.0 * PI).powf(1.5) / (vol * vol);
    Ok(BlochDensity {
        momentum: q,
        coeffs: total.iter().map(|c| c * scale).collect(),
    })
}

/// Result of the screened-charge solve; see [`solve_screened`].
#[derive(Debug, Clone)]
pub struct ScreenedSolve {
    /// The screened charge x = (1 + L)^{-1} nu. The induced density is
    /// nu - x.
    pub screened: BlochDensity,
    pub iterations: usize,
    /// Final relative residual in the Coulomb norm.
    pub residual: f64,
}

/// Solve (1 + L) x = nu by conjugate gradients in the Coulomb inner
/// product, where the operator is self-adjoint and bounded below by one.
/// Charge-neutral coordinates decouple (L neither reads nor writes them)
/// and are copied through directly.
pub fn solve_screened(
    bands: &BlochBands,
    fermi: &FermiData,
    nu: &BlochDensity,
    tol: f64,
    max_iter: usize,
) -> Result<ScreenedSolve> {
    let basis = &bands.basis;
    nu.check_dim(basis, "source fiber length")?;
    let mult = coulomb_multipliers(basis, nu.momentum);

    // split off neutral coordinates: (1 + L) acts as identity there
    let project = |v: &mut BlochDensity| {
        for (c, &m) in v.coeffs.iter_mut().zip(&mult) {
            if m == 0.0 {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    };
    let mut rhs = nu.clone();
    project(&mut rhs);
    let rhs_norm = coulomb_norm(basis, &rhs);

    let mut x = BlochDensity::zeros(basis, nu.momentum);
    let mut final_res = 0.0;
    let mut iterations = 0;

    if rhs_norm > 0.0 {
        let apply = |v: &BlochDensity| -> Result<BlochDensity> {
            let mut av = apply_l(bands, fermi, v)?;
            for (a, b) in av.coeffs.iter_mut().zip(&v.coeffs) {
                *a += b;
            }
            project(&mut av);
            Ok(av)
        };

        let mut r = rhs.clone();
        let mut p = r.clone();
        let mut rr = coulomb_inner(basis, &r, &r).re;
        let mut converged = false;
        for it in 1..=max_iter {
            iterations = it;
            let ap = apply(&p)?;
            let pap = coulomb_inner(basis, &p, &ap).re;
            if pap <= 0.0 {
                return Err(Error::LinearSolve(format!(
                    "operator lost positivity: p.(1+L)p = {pap:.3e}"
                )));
            }
            let alpha = rr / pap;
            for ((xi, pi), (ri, api)) in x
                .coeffs
                .iter_mut()
                .zip(&p.coeffs)
                .zip(r.coeffs.iter_mut().zip(&ap.coeffs))
            {
                *xi += alpha * pi;
                *ri -= alpha * api;
            }
            let rr_new = coulomb_inner(basis, &r, &r).re;
            final_res = rr_new.max(0.0).sqrt() / rhs_norm;
            if final_res <= tol {
                converged = true;
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for (pi, ri) in p.coeffs.iter_mut().zip(&r.coeffs) {
                *pi = ri + beta * *pi;
            }
        }
        if !converged {
            return Err(Error::LinearSolve(format!(
                "no convergence in {max_iter} iterations (residual {final_res:.3e}, tol {tol:.3e})"
            )));
        }
    }

    // copy neutral coordinates straight through
    for ((xi, &ni), &m) in x.coeffs.iter_mut().zip(&nu.coeffs).zip(&mult) {
        if m == 0.0 {
            *xi = ni;
        }
    }

    Ok(ScreenedSolve { screened: x, iterations, residual: final_res })
}

/// Normalized Gaussian charge profile
/// total * (2 pi width^2)^{-3/2} exp(-|x - center|^2 / (2 width^2)),
/// whose transform is total * (2 pi)^{-3/2} e^{-i k.center} e^{-width^2 |k|^2 / 2}.
#[derive(Debug, Clone, Copy)]
pub struct GaussianCharge {
    pub total: f64,
    pub center: V3,
    pub width: f64,
}

impl GaussianCharge {
    pub fn fourier(&self, k: V3) -> Complex64 {
        let phase = Complex64::new(0.0, -vec3::dot(k, self.center)).exp();
        let amp = self.total * (2.0 * PI).powf(-1.5)
            * (-0.5 * self.width * self.width * vec3::norm2(k)).exp();
        amp * phase
    }
}
