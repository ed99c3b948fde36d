//! Direct/reciprocal lattice bookkeeping, plane-wave sets and Brillouin-zone
//! grids.
//!
//! Conventions used throughout the crate:
//!   * direct lattice R = Z a1 + Z a2 + Z a3, unit cell volume |cell|
//!   * reciprocal lattice with a_i . b_j = 2 pi delta_ij
//!   * plane waves are labelled by integer coordinates m with
//!     K = m1 b1 + m2 b2 + m3 b3
//!
//! The plane-wave set is a fixed ball |K| <= g_max, independent of the
//! Bloch momentum q, so fibers at different q share one index space.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::vec3::{self, V3};

const DUAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Lattice {
    /// Direct lattice vectors, rows a1, a2, a3.
    pub a: [V3; 3],
    /// Reciprocal lattice vectors, rows b1, b2, b3.
    pub b: [V3; 3],
    /// Unit cell volume.
    pub cell_volume: f64,
    /// Brillouin zone volume (2 pi)^3 / cell_volume.
    pub bz_volume: f64,
}

impl Lattice {
    /// Build the lattice from three direct vectors.
    ///
    /// Fails when the vectors are (numerically) coplanar: |det| below
    /// 1e-12 relative to the length scale of the input.
    pub fn new(a: [V3; 3]) -> Result<Lattice> {
        let det = vec3::dot(a[0], vec3::cross(a[1], a[2]));
        let scale = a.iter().map(|v| vec3::norm(*v)).fold(0.0, f64::max);
        if det.abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::SingularLattice { det });
        }
        let f = 2.0 * std::f64::consts::PI / det;
        let b = [
            vec3::scale(vec3::cross(a[1], a[2]), f),
            vec3::scale(vec3::cross(a[2], a[0]), f),
            vec3::scale(vec3::cross(a[0], a[1]), f),
        ];
        let cell_volume = det.abs();
        let bz_volume = (2.0 * std::f64::consts::PI).powi(3) / cell_volume;
        let lat = Lattice { a, b, cell_volume, bz_volume };
        debug_assert!(lat.duality_residual() < DUAL_TOL);
        Ok(lat)
    }

    /// Simple cubic lattice with spacing `a0`.
    pub fn cubic(a0: f64) -> Result<Lattice> {
        Lattice::new([[a0, 0.0, 0.0], [0.0, a0, 0.0], [0.0, 0.0, a0]])
    }

    /// max_ij |a_i . b_j - 2 pi delta_ij|
    pub fn duality_residual(&self) -> f64 {
        let mut r: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 * std::f64::consts::PI } else { 0.0 };
                r = r.max((vec3::dot(self.a[i], self.b[j]) - want).abs());
            }
        }
        r
    }

    /// Cartesian vector of the reciprocal point with integer coordinates m.
    pub fn recip(&self, m: [i64; 3]) -> V3 {
        vec3::int_comb(m, &self.b)
    }

    /// Fractional (reciprocal) coordinates of a cartesian vector:
    /// f_i = k . a_i / (2 pi).
    pub fn recip_frac(&self, k: V3) -> V3 {
        let f = 1.0 / (2.0 * std::f64::consts::PI);
        [
            vec3::dot(k, self.a[0]) * f,
            vec3::dot(k, self.a[1]) * f,
            vec3::dot(k, self.a[2]) * f,
        ]
    }

    /// Nearest reciprocal lattice point (integer coordinates) to `k`.
    pub fn nearest_recip(&self, k: V3) -> [i64; 3] {
        let f = self.recip_frac(k);
        [f[0].round() as i64, f[1].round() as i64, f[2].round() as i64]
    }

    /// Radius of the largest ball around the origin contained in the
    /// first Brillouin zone (parallelepiped fundamental domain):
    /// min_i pi / |a_i| for orthogonal cells, min over face distances
    /// in general.
    pub fn bz_inscribed_radius(&self) -> f64 {
        // distance between the faces spanned by {b_j, b_k} is |b_i . n|
        // with n the unit normal, i.e. a_i / |a_i|.
        let mut r = f64::INFINITY;
        for i in 0..3 {
            let n = vec3::norm(self.a[i]);
            r = r.min(std::f64::consts::PI / n);
        }
        r
    }
}

/// Fixed set of reciprocal vectors |K| <= g_max, shared by all fibers.
///
/// Ordering is deterministic: by |K|^2, ties broken lexicographically on
/// the integer coordinates. K = 0 always sits at index 0. The set is
/// closed under K -> -K because the cutoff ball is symmetric.
#[derive(Debug, Clone)]
pub struct PlaneWaveBasis {
    pub lattice: Lattice,
    pub g_max: f64,
    /// Cartesian K vectors.
    pub kvecs: Vec<V3>,
    /// Integer coordinates of each K in the b-basis.
    pub coords: Vec<[i64; 3]>,
    /// |K|^2 for each vector.
    pub k2: Vec<f64>,
    /// Index of -K for each K.
    pub neg: Vec<usize>,
    /// Row-major len x len table: entry (i,j) is the basis index of
    /// K_i - K_j, or -1 when the difference falls outside the ball.
    diff: Vec<i32>,
    index: HashMap<[i64; 3], usize>,
}

impl PlaneWaveBasis {
    pub fn new(lattice: &Lattice, g_max: f64) -> Result<PlaneWaveBasis> {
        if !(g_max > 0.0) {
            return Err(Error::EmptyBasis { g_max });
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let cut2 = g_max * g_max * (1.0 + 1e-12);
        let bound = |ai: V3| (g_max * vec3::norm(ai) / two_pi + 1e-9).floor() as i64;
        let (n1, n2, n3) = (bound(lattice.a[0]), bound(lattice.a[1]), bound(lattice.a[2]));

        let mut entries: Vec<([i64; 3], V3, f64)> = Vec::new();
        for m1 in -n1..=n1 {
            for m2 in -n2..=n2 {
                for m3 in -n3..=n3 {
                    let m = [m1, m2, m3];
                    let k = lattice.recip(m);
                    let k2 = vec3::norm2(k);
                    if k2 <= cut2 {
                        entries.push((m, k, k2));
                    }
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::EmptyBasis { g_max });
        }
        entries.sort_by(|x, y| {
            x.2.partial_cmp(&y.2).unwrap().then_with(|| x.0.cmp(&y.0))
        });

        let coords: Vec<[i64; 3]> = entries.iter().map(|e| e.0).collect();
        let kvecs: Vec<V3> = entries.iter().map(|e| e.1).collect();
        let k2: Vec<f64> = entries.iter().map(|e| e.2).collect();
        let index: HashMap<[i64; 3], usize> =
            coords.iter().enumerate().map(|(i, m)| (*m, i)).collect();
        let neg: Vec<usize> = coords
            .iter()
            .map(|m| index[&[-m[0], -m[1], -m[2]]])
            .collect();

        let n = coords.len();
        let mut diff = vec![-1i32; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = [
                    coords[i][0] - coords[j][0],
                    coords[i][1] - coords[j][1],
                    coords[i][2] - coords[j][2],
                ];
                if let Some(&g) = index.get(&d) {
                    diff[i * n + j] = g as i32;
                }
            }
        }

        debug_assert_eq!(coords[0], [0, 0, 0], "K = 0 must come first");
        Ok(PlaneWaveBasis {
            lattice: lattice.clone(),
            g_max,
            kvecs,
            coords,
            k2,
            neg,
            diff,
            index,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.kvecs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.kvecs.is_empty()
    }

    /// Basis index of the reciprocal point with integer coordinates m.
    pub fn index_of(&self, m: [i64; 3]) -> Option<usize> {
        self.index.get(&m).copied()
    }

    /// Index of K_i - K_j, or None when outside the cutoff ball.
    #[inline]
    pub fn diff_index(&self, i: usize, j: usize) -> Option<usize> {
        let v = self.diff[i * self.len() + j];
        (v >= 0).then_some(v as usize)
    }

    /// Raw difference table (row-major, -1 sentinel); hot loops index it
    /// directly instead of going through `diff_index`.
    #[inline]
    pub fn diff_table(&self) -> &[i32] {
        &self.diff
    }
}

/// Uniform Gamma-centered Monkhorst-Pack style grid with n points per
/// reciprocal direction, reduced to fractional coordinates in [-1/2, 1/2).
///
/// The grid realizes the Brillouin-zone average: all weights equal 1/n^3.
#[derive(Debug, Clone)]
pub struct BzGrid {
    pub n: usize,
    /// Reduced integer coordinates: q = (m1 b1 + m2 b2 + m3 b3) / n.
    pub coords: Vec<[i64; 3]>,
    /// Cartesian grid points.
    pub points: Vec<V3>,
    /// Common weight 1/n^3.
    pub weight: f64,
}

impl BzGrid {
    pub fn new(lattice: &Lattice, n: usize) -> Result<BzGrid> {
        if n == 0 {
            return Err(Error::DimensionMismatch {
                context: "BZ grid points per direction",
                got: 0,
                expected: 1,
            });
        }
        let ni = n as i64;
        // reduce m in 0..n to the symmetric window around 0, halves go down
        let red = |m: i64| -> i64 {
            let f = m as f64 / n as f64;
            m - ni * (f + 0.5).floor() as i64
        };
        let mut coords = Vec::with_capacity(n * n * n);
        for m1 in 0..ni {
            for m2 in 0..ni {
                for m3 in 0..ni {
                    coords.push([red(m1), red(m2), red(m3)]);
                }
            }
        }
        let points = coords
            .iter()
            .map(|m| {
                let k = lattice.recip(*m);
                vec3::scale(k, 1.0 / n as f64)
            })
            .collect();
        Ok(BzGrid {
            n,
            coords,
            points,
            weight: 1.0 / (n * n * n) as f64,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
