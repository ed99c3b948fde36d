//! Run configuration: flat `[section]` blocks of `key = value` lines
//! with `#` comments. The grammar is documented in the repository
//! README. Parsing is strict — unknown sections or keys, duplicate
//! scalar keys, and malformed values are all rejected with the source
//! line — and `finalize` applies documented defaults so a parsed
//! [`RunConfig`] always carries concrete numbers.
//!
//! [`RunConfig::emit`] renders the canonical text form (floats at 17
//! significant digits), so emit-then-parse is the identity; the config
//! hash stamped into every artifact is FNV-1a 64 over that emission.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use num_complex::Complex64;

use epsm_core::bloch::CrystalModel;
use epsm_core::lattice::Lattice;
use epsm_core::vec3;

use crate::table::fmt_f;
use crate::CliError;

/// Integer reciprocal coordinates plus the complex coefficient, split
/// into real and imaginary parts so the whole config stays plain-text
/// comparable.
pub type FourierEntry = ([i64; 3], f64, f64);

/// The `[crystal]` section: either the shipped separable-cosine preset
/// on a cubic cell, or explicit lattice vectors with potential Fourier
/// coefficients (none at all gives the free model).
#[derive(Debug, Clone, PartialEq)]
pub enum CrystalSpec {
    Mathieu { period: f64, amplitudes: [f64; 3] },
    Explicit { a: [[f64; 3]; 3], fourier: Vec<FourierEntry> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Numerics {
    /// Plane-wave cutoff radius. Default 3 |b1|.
    pub g_max: f64,
    /// Brillouin-zone grid points per direction. Default 4; odd values
    /// make the point set negation-closed, which the time-reversal and
    /// extrapolation identities exploit.
    pub n_k: usize,
    /// Smallest spectral gap accepted as insulating. Default 1e-8.
    pub gap_tol: f64,
    /// Trapezoid nodes on the resolvent contour. Default 64.
    pub contour_nodes: usize,
    /// Bands per momentum written by the `bands` command. Default 8.
    pub n_bands: usize,
    /// Sample points per path segment in `bands`. Default 40.
    pub path_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Defect {
    /// Total charge of the Gaussian defect. Default 0.01.
    pub z: f64,
    /// Gaussian width. Default 2.0.
    pub sigma: f64,
    /// Gaussian center in Cartesian coordinates. Default the origin.
    pub center: [f64; 3],
    /// Supercell multiplier per direction. Default 3.
    pub m: usize,
    /// Damping factor of the SCF update. Default 0.2.
    pub mix: f64,
    /// Anderson history depth; 0 selects the plain damped update.
    pub anderson_depth: usize,
    /// Convergence tolerance on the Coulomb norm of the density
    /// residual. Default 1e-8.
    pub tol: f64,
    /// Iteration cap. Default 200.
    pub max_iter: usize,
    /// Reciprocal shells per axis in the screening table. Default 3.
    pub shells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Homogenization {
    /// Rescaling parameters, evaluated in the given order.
    /// Default 0.2 0.1 0.05.
    pub eta: Vec<f64>,
    /// Momentum-ball spacing in units of the shortest dual vector.
    /// Default 0.5.
    pub k_spacing: f64,
    /// Momentum-ball radius in the same units. Default 1.5.
    pub k_radius: f64,
    /// Total charge of the source Gaussian. Default 1.0.
    pub source_total: f64,
    /// Width of the source Gaussian. Default 1.2.
    pub source_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    /// Output directory; `--out` takes precedence. Default "out".
    pub directory: String,
    /// Table format; only "csv" is implemented.
    pub format: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub crystal: CrystalSpec,
    /// Electrons per unit cell = occupied bands (spinless). Default 1.
    pub electrons: usize,
    pub numerics: Numerics,
    pub defect: Defect,
    pub homogenization: Homogenization,
    pub output: Output,
}

const SECTIONS: [&str; 5] = ["crystal", "numerics", "defect", "homogenization", "output"];

/// Read and parse a config file, then apply `--override` entries.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    parse_with_overrides(&text, &path.display().to_string(), overrides)
}

pub fn parse_config(text: &str, source: &str) -> Result<RunConfig, CliError> {
    parse_with_overrides(text, source, &[])
}

pub fn parse_with_overrides(
    text: &str,
    source: &str,
    overrides: &[String],
) -> Result<RunConfig, CliError> {
    let mut b = Builder::default();
    b.read(text, source)?;
    for ov in overrides {
        let (path, value) = ov
            .split_once('=')
            .ok_or_else(|| bad(format!("override '{ov}': expected section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| bad(format!("override '{ov}': expected section.key=value")))?;
        if key.trim() == "fourier" {
            return Err(bad(
                "crystal.fourier: repeatable keys cannot be overridden; edit the config file",
            ));
        }
        b.set(section.trim(), key.trim(), value.trim(), &format!("override '{ov}'"))?;
    }
    b.finalize()
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Raw typed entries; `None` means "apply the default in finalize".
#[derive(Default)]
struct Builder {
    preset: Option<String>,
    period: Option<f64>,
    amplitudes: Option<[f64; 3]>,
    a: [Option<[f64; 3]>; 3],
    fourier: Vec<FourierEntry>,
    electrons: Option<usize>,

    g_max: Option<f64>,
    n_k: Option<usize>,
    gap_tol: Option<f64>,
    contour_nodes: Option<usize>,
    n_bands: Option<usize>,
    path_points: Option<usize>,

    z: Option<f64>,
    sigma: Option<f64>,
    center: Option<[f64; 3]>,
    m: Option<usize>,
    mix: Option<f64>,
    anderson_depth: Option<usize>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    shells: Option<usize>,

    eta: Option<Vec<f64>>,
    k_spacing: Option<f64>,
    k_radius: Option<f64>,
    source_total: Option<f64>,
    source_width: Option<f64>,

    directory: Option<String>,
    format: Option<String>,
}

impl Builder {
    fn read(&mut self, text: &str, source: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let at = format!("{source}:{}", i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| bad(format!("{at}: unterminated section header '{line}'")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(bad(format!("{at}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("{at}: expected 'key = value', got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let section = section
                .as_deref()
                .ok_or_else(|| bad(format!("{at}: entry before any [section] header")))?;
            if key != "fourier" && !seen.insert((section.to_string(), key.to_string())) {
                return Err(bad(format!("{at}: duplicate key {section}.{key}")));
            }
            self.set(section, key, value, &at)?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str, at: &str) -> Result<(), CliError> {
        match (section, key) {
            ("crystal", "preset") => self.preset = Some(value.to_string()),
            ("crystal", "period") => self.period = Some(f64_value(section, key, value, at)?),
            ("crystal", "amplitudes") => {
                self.amplitudes = Some(f64_triple(section, key, value, at)?)
            }
            ("crystal", "a1") => self.a[0] = Some(f64_triple(section, key, value, at)?),
            ("crystal", "a2") => self.a[1] = Some(f64_triple(section, key, value, at)?),
            ("crystal", "a3") => self.a[2] = Some(f64_triple(section, key, value, at)?),
            ("crystal", "fourier") => self.fourier.push(fourier_entry(value, at)?),
            ("crystal", "electrons") => self.electrons = Some(usize_value(section, key, value, at)?),

            ("numerics", "g_max") => self.g_max = Some(f64_value(section, key, value, at)?),
            ("numerics", "n_k") => self.n_k = Some(usize_value(section, key, value, at)?),
            ("numerics", "gap_tol") => self.gap_tol = Some(f64_value(section, key, value, at)?),
            ("numerics", "contour_nodes") => {
                self.contour_nodes = Some(usize_value(section, key, value, at)?)
            }
            ("numerics", "n_bands") => self.n_bands = Some(usize_value(section, key, value, at)?),
            ("numerics", "path_points") => {
                self.path_points = Some(usize_value(section, key, value, at)?)
            }

            ("defect", "z") => self.z = Some(f64_value(section, key, value, at)?),
            ("defect", "sigma") => self.sigma = Some(f64_value(section, key, value, at)?),
            ("defect", "center") => self.center = Some(f64_triple(section, key, value, at)?),
            ("defect", "m") => self.m = Some(usize_value(section, key, value, at)?),
            ("defect", "mix") => self.mix = Some(f64_value(section, key, value, at)?),
            ("defect", "anderson_depth") => {
                self.anderson_depth = Some(usize_value(section, key, value, at)?)
            }
            ("defect", "tol") => self.tol = Some(f64_value(section, key, value, at)?),
            ("defect", "max_iter") => self.max_iter = Some(usize_value(section, key, value, at)?),
            ("defect", "shells") => self.shells = Some(usize_value(section, key, value, at)?),

            ("homogenization", "eta") => self.eta = Some(f64_list(section, key, value, at)?),
            ("homogenization", "k_spacing") => {
                self.k_spacing = Some(f64_value(section, key, value, at)?)
            }
            ("homogenization", "k_radius") => {
                self.k_radius = Some(f64_value(section, key, value, at)?)
            }
            ("homogenization", "source_total") => {
                self.source_total = Some(f64_value(section, key, value, at)?)
            }
            ("homogenization", "source_width") => {
                self.source_width = Some(f64_value(section, key, value, at)?)
            }

            ("output", "directory") => self.directory = Some(value.to_string()),
            ("output", "format") => self.format = Some(value.to_string()),

            _ => {
                return Err(bad(format!("{at}: unknown key '{key}' in section [{section}]")));
            }
        }
        Ok(())
    }

    fn finalize(self) -> Result<RunConfig, CliError> {
        let crystal = match (&self.preset, &self.a) {
            (Some(name), _) if name == "mathieu" => {
                if self.a.iter().any(Option::is_some) || !self.fourier.is_empty() {
                    return Err(bad(
                        "crystal: lattice vectors / fourier lines conflict with preset = mathieu",
                    ));
                }
                let period = self
                    .period
                    .ok_or_else(|| bad("crystal.period: required by preset = mathieu"))?;
                if !(period > 0.0) {
                    return Err(bad(format!("crystal.period: must be positive (got {period})")));
                }
                let amplitudes = self
                    .amplitudes
                    .ok_or_else(|| bad("crystal.amplitudes: required by preset = mathieu"))?;
                CrystalSpec::Mathieu { period, amplitudes }
            }
            (Some(name), _) => {
                return Err(bad(format!(
                    "crystal.preset: unknown preset '{name}' (expected 'mathieu')"
                )));
            }
            (None, [Some(a1), Some(a2), Some(a3)]) => {
                if self.period.is_some() || self.amplitudes.is_some() {
                    return Err(bad(
                        "crystal.period / crystal.amplitudes: only valid with preset = mathieu",
                    ));
                }
                CrystalSpec::Explicit { a: [*a1, *a2, *a3], fourier: self.fourier.clone() }
            }
            (None, _) => {
                return Err(bad(
                    "crystal: give either 'preset = mathieu' or all of a1, a2, a3",
                ));
            }
        };

        let electrons = self.electrons.unwrap_or(1);
        if electrons == 0 {
            return Err(bad("crystal.electrons: must be at least 1"));
        }

        // |b1| of the configured lattice fixes the g_max default; a
        // singular lattice is caught here rather than at run time.
        let b1_norm = crystal.b1_norm()?;

        let numerics = Numerics {
            g_max: match self.g_max {
                Some(g) if g > 0.0 => g,
                Some(g) => {
                    return Err(bad(format!("numerics.g_max: must be positive (got {g})")));
                }
                None => 3.0 * b1_norm,
            },
            n_k: positive(self.n_k.unwrap_or(4), "numerics.n_k")?,
            gap_tol: positive_f(self.gap_tol.unwrap_or(1e-8), "numerics.gap_tol")?,
            contour_nodes: {
                let n = self.contour_nodes.unwrap_or(64);
                if n < 4 {
                    return Err(bad(format!(
                        "numerics.contour_nodes: need at least 4 nodes (got {n})"
                    )));
                }
                n
            },
            n_bands: positive(self.n_bands.unwrap_or(8), "numerics.n_bands")?,
            path_points: {
                let n = self.path_points.unwrap_or(40);
                if n < 2 {
                    return Err(bad(format!(
                        "numerics.path_points: need at least 2 points per segment (got {n})"
                    )));
                }
                n
            },
        };

        let defect = Defect {
            z: self.z.unwrap_or(0.01),
            sigma: positive_f(self.sigma.unwrap_or(2.0), "defect.sigma")?,
            center: self.center.unwrap_or([0.0; 3]),
            m: positive(self.m.unwrap_or(3), "defect.m")?,
            mix: {
                let mix = self.mix.unwrap_or(0.2);
                if !(mix > 0.0 && mix < 2.0) {
                    return Err(bad(format!("defect.mix: must lie in (0, 2) (got {mix})")));
                }
                mix
            },
            anderson_depth: self.anderson_depth.unwrap_or(0),
            tol: positive_f(self.tol.unwrap_or(1e-8), "defect.tol")?,
            max_iter: positive(self.max_iter.unwrap_or(200), "defect.max_iter")?,
            shells: positive(self.shells.unwrap_or(3), "defect.shells")?,
        };

        let homogenization = Homogenization {
            eta: {
                let eta = self.eta.unwrap_or_else(|| vec![0.2, 0.1, 0.05]);
                if eta.is_empty() {
                    return Err(bad("homogenization.eta: need at least one value"));
                }
                if let Some(e) = eta.iter().find(|&&e| !(e > 0.0)) {
                    return Err(bad(format!(
                        "homogenization.eta: entries must be positive (got {e})"
                    )));
                }
                eta
            },
            k_spacing: positive_f(self.k_spacing.unwrap_or(0.5), "homogenization.k_spacing")?,
            k_radius: self.k_radius.unwrap_or(1.5),
            source_total: self.source_total.unwrap_or(1.0),
            source_width: positive_f(
                self.source_width.unwrap_or(1.2),
                "homogenization.source_width",
            )?,
        };
        if homogenization.k_radius < homogenization.k_spacing {
            return Err(bad(format!(
                "homogenization.k_radius: must be at least k_spacing (got {} < {})",
                homogenization.k_radius, homogenization.k_spacing
            )));
        }

        let output = Output {
            directory: {
                let d = self.directory.unwrap_or_else(|| "out".to_string());
                if d.is_empty() {
                    return Err(bad("output.directory: must not be empty"));
                }
                d
            },
            format: {
                let f = self.format.unwrap_or_else(|| "csv".to_string());
                if f != "csv" {
                    return Err(bad(format!(
                        "output.format: only 'csv' is implemented (got '{f}')"
                    )));
                }
                f
            },
        };

        Ok(RunConfig { crystal, electrons, numerics, defect, homogenization, output })
    }
}

fn positive(n: usize, name: &str) -> Result<usize, CliError> {
    if n == 0 {
        return Err(bad(format!("{name}: must be at least 1")));
    }
    Ok(n)
}

fn positive_f(x: f64, name: &str) -> Result<f64, CliError> {
    if !(x > 0.0) {
        return Err(bad(format!("{name}: must be positive (got {x})")));
    }
    Ok(x)
}

fn f64_value(section: &str, key: &str, value: &str, at: &str) -> Result<f64, CliError> {
    value.parse().map_err(|_| {
        bad(format!("{at}: {section}.{key}: expected a number, got '{value}'"))
    })
}

fn usize_value(section: &str, key: &str, value: &str, at: &str) -> Result<usize, CliError> {
    value.parse().map_err(|_| {
        bad(format!("{at}: {section}.{key}: expected a non-negative integer, got '{value}'"))
    })
}

fn f64_list(section: &str, key: &str, value: &str, at: &str) -> Result<Vec<f64>, CliError> {
    value
        .split_whitespace()
        .map(|w| {
            w.parse().map_err(|_| {
                bad(format!("{at}: {section}.{key}: expected numbers, got '{w}'"))
            })
        })
        .collect()
}

fn f64_triple(section: &str, key: &str, value: &str, at: &str) -> Result<[f64; 3], CliError> {
    let v = f64_list(section, key, value, at)?;
    v.try_into().map_err(|v: Vec<f64>| {
        bad(format!(
            "{at}: {section}.{key}: expected exactly 3 numbers, got {}",
            v.len()
        ))
    })
}

/// `fourier = m1 m2 m3 re im`.
fn fourier_entry(value: &str, at: &str) -> Result<FourierEntry, CliError> {
    let w: Vec<&str> = value.split_whitespace().collect();
    if w.len() != 5 {
        return Err(bad(format!(
            "{at}: crystal.fourier: expected 'm1 m2 m3 re im' (5 fields, got {})",
            w.len()
        )));
    }
    let mut m = [0i64; 3];
    for (i, t) in w[..3].iter().enumerate() {
        m[i] = t.parse().map_err(|_| {
            bad(format!("{at}: crystal.fourier: expected an integer, got '{t}'"))
        })?;
    }
    let re = f64_value("crystal", "fourier", w[3], at)?;
    let im = f64_value("crystal", "fourier", w[4], at)?;
    Ok((m, re, im))
}

impl CrystalSpec {
    /// |b1| of the configured lattice (validates invertibility).
    fn b1_norm(&self) -> Result<f64, CliError> {
        let lattice = self.lattice()?;
        Ok(vec3::norm(lattice.b[0]))
    }

    fn lattice(&self) -> Result<Lattice, CliError> {
        match self {
            CrystalSpec::Mathieu { period, .. } => Lattice::cubic(*period),
            CrystalSpec::Explicit { a, .. } => Lattice::new([a[0], a[1], a[2]]),
        }
        .map_err(|e| bad(format!("crystal: {e}")))
    }
}

impl RunConfig {
    /// Instantiate the crystal model; failures here are still config
    /// validation (non-Hermitian coefficients, singular lattice).
    pub fn build_model(&self) -> Result<CrystalModel, CliError> {
        match &self.crystal {
            CrystalSpec::Mathieu { period, amplitudes } => {
                CrystalModel::mathieu(*period, *amplitudes, self.electrons)
                    .map_err(|e| bad(format!("crystal: {e}")))
            }
            CrystalSpec::Explicit { a, fourier } => {
                let lattice = Lattice::new([a[0], a[1], a[2]])
                    .map_err(|e| bad(format!("crystal: {e}")))?;
                let mut v = BTreeMap::new();
                for &(m, re, im) in fourier {
                    if v.insert(m, Complex64::new(re, im)).is_some() {
                        return Err(bad(format!(
                            "crystal.fourier: duplicate coefficient at {m:?}"
                        )));
                    }
                }
                CrystalModel::new(lattice, v, self.electrons)
                    .map_err(|e| bad(format!("crystal: {e}")))
            }
        }
    }

    /// Canonical text form. Every float is printed with 17 significant
    /// digits, so parsing the emission reproduces this config exactly.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        s.push_str("[crystal]\n");
        match &self.crystal {
            CrystalSpec::Mathieu { period, amplitudes } => {
                s.push_str("preset = mathieu\n");
                s.push_str(&format!("period = {}\n", fmt_f(*period)));
                s.push_str(&format!("amplitudes = {}\n", join_f(amplitudes)));
            }
            CrystalSpec::Explicit { a, fourier } => {
                for (i, ai) in a.iter().enumerate() {
                    s.push_str(&format!("a{} = {}\n", i + 1, join_f(ai)));
                }
                for (m, re, im) in fourier {
                    s.push_str(&format!(
                        "fourier = {} {} {} {} {}\n",
                        m[0],
                        m[1],
                        m[2],
                        fmt_f(*re),
                        fmt_f(*im)
                    ));
                }
            }
        }
        s.push_str(&format!("electrons = {}\n", self.electrons));

        let n = &self.numerics;
        s.push_str("\n[numerics]\n");
        s.push_str(&format!("g_max = {}\n", fmt_f(n.g_max)));
        s.push_str(&format!("n_k = {}\n", n.n_k));
        s.push_str(&format!("gap_tol = {}\n", fmt_f(n.gap_tol)));
        s.push_str(&format!("contour_nodes = {}\n", n.contour_nodes));
        s.push_str(&format!("n_bands = {}\n", n.n_bands));
        s.push_str(&format!("path_points = {}\n", n.path_points));

        let d = &self.defect;
        s.push_str("\n[defect]\n");
        s.push_str(&format!("z = {}\n", fmt_f(d.z)));
        s.push_str(&format!("sigma = {}\n", fmt_f(d.sigma)));
        s.push_str(&format!("center = {}\n", join_f(&d.center)));
        s.push_str(&format!("m = {}\n", d.m));
        s.push_str(&format!("mix = {}\n", fmt_f(d.mix)));
        s.push_str(&format!("anderson_depth = {}\n", d.anderson_depth));
        s.push_str(&format!("tol = {}\n", fmt_f(d.tol)));
        s.push_str(&format!("max_iter = {}\n", d.max_iter));
        s.push_str(&format!("shells = {}\n", d.shells));

        let h = &self.homogenization;
        s.push_str("\n[homogenization]\n");
        s.push_str(&format!("eta = {}\n", join_f(&h.eta)));
        s.push_str(&format!("k_spacing = {}\n", fmt_f(h.k_spacing)));
        s.push_str(&format!("k_radius = {}\n", fmt_f(h.k_radius)));
        s.push_str(&format!("source_total = {}\n", fmt_f(h.source_total)));
        s.push_str(&format!("source_width = {}\n", fmt_f(h.source_width)));

        s.push_str("\n[output]\n");
        s.push_str(&format!("directory = {}\n", self.output.directory));
        s.push_str(&format!("format = {}\n", self.output.format));
        s
    }

    /// FNV-1a 64 of the canonical emission, as 16 hex digits.
    pub fn hash_hex(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &byte in self.emit().as_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

fn join_f(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f(x)).collect::<Vec<_>>().join(" ")
}
