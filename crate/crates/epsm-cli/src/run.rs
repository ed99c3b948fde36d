//! One function per CLI command. Each loads/validates the config,
//! solves the requested pipeline, writes its tables and `summary.txt`
//! into the output directory, and logs progress to stderr. Exit-code
//! policy: config rejection is [`CliError::Validation`] (2), anything
//! that fails after the input was accepted is [`CliError::Runtime`] (3).

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use epsm_core::bloch::{
    fermi_level, solve_bands, solve_fiber, BlochBands, FermiData, PhaseConvention,
};
use epsm_core::defect::{solve_defect, Mixing, ScfOptions};
use epsm_core::dielectric::{
    epsilon_m_extrapolated, epsilon_m_from_blocks, head_limit_data, EpsilonM,
};
use epsm_core::homogenization::{standard_probes, weak_convergence, MomentumBall};
use epsm_core::lattice::{BzGrid, PlaneWaveBasis};
use epsm_core::response::{
    apply_chi0, b_factor, q1v_contour, response_tensor_l, BlochDensity, ContourSpec,
    GaussianCharge,
};
use epsm_core::selftest::{criterion, SelftestContext, CRITERIA};
use epsm_core::vec3::{self, V3};

use crate::config::{self, RunConfig};
use crate::table::{fmt_f, Provenance, Summary, Table};
use crate::CliError;

/// Relative eta0 for the extrapolation route of the `epsm` command, in
/// units of the shortest dual vector (halved twice internally).
const EXTRAPOLATION_ETA0: f64 = 0.05;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Config, output directory, and provenance for one command run.
pub struct Workspace {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub prov: Provenance,
}

pub fn prepare(
    config_path: &Path,
    out_flag: Option<&Path>,
    overrides: &[String],
    command: &'static str,
) -> Result<Workspace, CliError> {
    let cfg = config::load(config_path, overrides)?;
    let out = out_flag.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    eprintln!(
        "epsm: {command} with config hash {} ({} worker threads)",
        cfg.hash_hex(),
        rayon::current_num_threads()
    );
    let prov = Provenance::new(command, cfg.hash_hex());
    Ok(Workspace { cfg, out, prov })
}

/// Bands on the BZ grid plus the Fermi data — the common front end of
/// every physical command.
struct Solved {
    bands: BlochBands,
    fermi: FermiData,
}

fn solve(cfg: &RunConfig) -> Result<Solved, CliError> {
    let model = cfg.build_model()?;
    let basis = PlaneWaveBasis::new(&model.lattice, cfg.numerics.g_max)
        .map_err(|e| CliError::Validation(format!("numerics.g_max: {e}")))?;
    let grid = BzGrid::new(&model.lattice, cfg.numerics.n_k)
        .map_err(|e| CliError::Validation(format!("numerics.n_k: {e}")))?;
    eprintln!(
        "epsm: solving {} fibers of dimension {}",
        grid.len(),
        basis.len()
    );
    let bands = solve_bands(&model, &basis, &grid).map_err(runtime)?;
    let fermi = fermi_level(&bands, model.n_electrons, cfg.numerics.gap_tol).map_err(runtime)?;
    eprintln!(
        "epsm: fermi level {:.6e}, gap {:.6e} ({} occupied bands)",
        fermi.fermi, fermi.gap, fermi.n_occupied
    );
    Ok(Solved { bands, fermi })
}

fn push_fermi(sum: &mut Summary, fermi: &FermiData) {
    sum.push_f("fermi", "level", fermi.fermi);
    sum.push_f("fermi", "homo", fermi.homo);
    sum.push_f("fermi", "lumo", fermi.lumo);
    sum.push_f("fermi", "gap", fermi.gap);
    sum.push("fermi", "n_occupied", fermi.n_occupied.to_string());
}

fn shortest_b(bands: &BlochBands) -> f64 {
    bands
        .basis
        .lattice
        .b
        .iter()
        .map(|&b| vec3::norm(b))
        .fold(f64::INFINITY, f64::min)
}

fn frac_to_cart(b: &[V3; 3], f: [f64; 3]) -> V3 {
    let mut q = [0.0; 3];
    for (i, bi) in b.iter().enumerate() {
        q = vec3::add(q, vec3::scale(*bi, f[i]));
    }
    q
}

/// Band energies along the G-X-M-R-G fractional path, plus Fermi data.
pub fn bands(ws: &Workspace) -> Result<(), CliError> {
    let s = solve(&ws.cfg)?;
    let n_bands = ws.cfg.numerics.n_bands.min(s.bands.dim());
    let corners: [(&str, [f64; 3]); 5] = [
        ("G", [0.0, 0.0, 0.0]),
        ("X", [0.5, 0.0, 0.0]),
        ("M", [0.5, 0.5, 0.0]),
        ("R", [0.5, 0.5, 0.5]),
        ("G", [0.0, 0.0, 0.0]),
    ];
    let b = &s.bands.basis.lattice.b;
    let pts = ws.cfg.numerics.path_points;

    let mut columns = vec!["s".to_string(), "qx".into(), "qy".into(), "qz".into()];
    for n in 1..=n_bands {
        columns.push(format!("e{n}"));
    }
    let mut table = Table::new(&columns.iter().map(String::as_str).collect::<Vec<_>>());

    let mut arc = 0.0;
    let mut prev: Option<V3> = None;
    let mut marks: Vec<(&str, f64)> = Vec::new();
    for seg in 0..corners.len() - 1 {
        let (_, from) = corners[seg];
        let (_, to) = corners[seg + 1];
        let last = if seg == corners.len() - 2 { pts + 1 } else { pts };
        for j in 0..last {
            let t = j as f64 / pts as f64;
            let frac = [
                from[0] + t * (to[0] - from[0]),
                from[1] + t * (to[1] - from[1]),
                from[2] + t * (to[2] - from[2]),
            ];
            let q = frac_to_cart(b, frac);
            if let Some(p) = prev {
                arc += vec3::norm(vec3::sub(q, p));
            }
            if j == 0 {
                marks.push((corners[seg].0, arc));
            }
            let fiber =
                solve_fiber(&s.bands.model, &s.bands.basis, q, PhaseConvention::default())
                    .map_err(runtime)?;
            let mut row = vec![fmt_f(arc), fmt_f(q[0]), fmt_f(q[1]), fmt_f(q[2])];
            row.extend(fiber.eps[..n_bands].iter().map(|&e| fmt_f(e)));
            table.push(row);
            prev = Some(q);
        }
    }
    marks.push((corners[corners.len() - 1].0, arc));
    table.write(&ws.out, "bands.csv", &ws.prov)?;

    let mut sum = Summary::new(Some(&ws.cfg));
    push_fermi(&mut sum, &s.fermi);
    sum.push("path", "n_bands", n_bands.to_string());
    for (i, (name, at)) in marks.iter().enumerate() {
        sum.push("path", &format!("corner_{i}"), format!("{name} {}", fmt_f(*at)));
    }
    sum.write(&ws.out, &ws.prov)?;
    Ok(())
}

/// Response tensor L, small-momentum curvature samples, and the
/// contour-vs-spectral-sum cross check.
pub fn respond(ws: &Workspace) -> Result<(), CliError> {
    let s = solve(&ws.cfg)?;
    let l = response_tensor_l(&s.bands, &s.fermi).map_err(runtime)?;

    let mut lt = Table::new(&["row", "c1", "c2", "c3"]);
    for (i, row) in l.matrix.iter().enumerate() {
        lt.push(vec![i.to_string(), fmt_f(row[0]), fmt_f(row[1]), fmt_f(row[2])]);
    }
    lt.write(&ws.out, "l_tensor.csv", &ws.prov)?;

    // B(q) along the axes at the configured eta ladder; B/|q|^2 tends
    // to the matching diagonal entry of L.
    let bmin = shortest_b(&s.bands);
    let mut bt = Table::new(&["axis", "eta", "qx", "qy", "qz", "b", "b_over_q2", "l_axis"]);
    for axis in 0..3 {
        let mut sigma = [0.0; 3];
        sigma[axis] = 1.0;
        for &eta in &ws.cfg.homogenization.eta {
            let q = vec3::scale(sigma, eta * bmin);
            let bq = b_factor(&s.bands, &s.fermi, q).map_err(runtime)?;
            bt.push(vec![
                axis.to_string(),
                fmt_f(eta),
                fmt_f(q[0]),
                fmt_f(q[1]),
                fmt_f(q[2]),
                fmt_f(bq),
                fmt_f(bq / vec3::norm2(q)),
                fmt_f(l.matrix[axis][axis]),
            ]);
        }
    }
    bt.write(&ws.out, "bfactor.csv", &ws.prov)?;

    // Resolvent-contour route vs the eigenpair sum on a smooth test
    // potential at an off-lattice momentum.
    let q_test = frac_to_cart(&s.bands.basis.lattice.b, [0.25, 0.0, 0.0]);
    let v = BlochDensity::from_fn(&s.bands.basis, q_test, |k| {
        Complex64::new((-0.5 * vec3::norm2(k)).exp(), 0.0)
    });
    let by_sum = apply_chi0(&s.bands, &s.fermi, &v).map_err(runtime)?;
    let mut spec = ContourSpec::enclosing(&s.bands, &s.fermi);
    spec.nodes = ws.cfg.numerics.contour_nodes;
    let by_contour = q1v_contour(&s.bands, &s.fermi, &v, &spec).map_err(runtime)?;
    let diff = by_sum
        .coeffs
        .iter()
        .zip(&by_contour.density.coeffs)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let rel = diff / by_sum.l2_norm().max(f64::MIN_POSITIVE);

    let mut sum = Summary::new(Some(&ws.cfg));
    push_fermi(&mut sum, &s.fermi);
    sum.push_f("response", "l0", l.l0());
    sum.push_f("response", "min_eigenvalue", l.min_eigenvalue());
    sum.push_f("response", "max_eigenvalue", l.max_eigenvalue());
    sum.push_f("response", "asymmetry", l.asymmetry());
    sum.push("contour", "nodes", spec.nodes.to_string());
    sum.push_f("contour", "relative_difference", rel);
    sum.push_f(
        "contour",
        "diagonal_block_residual",
        by_contour.diagonal_block_residual,
    );
    sum.write(&ws.out, &ws.prov)?;
    Ok(())
}

fn push_tensor(table: &mut Table, route: &str, m: &[[f64; 3]; 3]) {
    for (i, row) in m.iter().enumerate() {
        table.push(vec![
            route.to_string(),
            i.to_string(),
            fmt_f(row[0]),
            fmt_f(row[1]),
            fmt_f(row[2]),
        ]);
    }
}

/// Macroscopic dielectric tensor by the limit-block route and the
/// small-momentum extrapolation route, with agreement and bound checks.
pub fn epsm(ws: &Workspace) -> Result<(), CliError> {
    let s = solve(&ws.cfg)?;
    let data = head_limit_data(&s.bands, &s.fermi).map_err(runtime)?;
    let blocks = epsilon_m_from_blocks(&data).map_err(runtime)?;
    eprintln!("epsm: limit-block route done, extrapolating");
    let extrap = epsilon_m_extrapolated(&s.bands, &s.fermi, EXTRAPOLATION_ETA0).map_err(runtime)?;

    let mut table = Table::new(&["route", "row", "c1", "c2", "c3"]);
    push_tensor(&mut table, "blocks", &blocks.tensor);
    push_tensor(&mut table, "extrapolated", &extrap.epsilon_m.tensor);
    table.write(&ws.out, "epsm.csv", &ws.prov)?;

    let l = &data.tensor_l;
    // slack of the operator bounds 1 <= eps_M <= 1 + L, as the smallest
    // eigenvalue of each difference
    let mut lower = blocks.tensor;
    let mut upper = [[0.0; 3]; 3];
    for a in 0..3 {
        for bx in 0..3 {
            let delta = if a == bx { 1.0 } else { 0.0 };
            lower[a][bx] -= delta;
            upper[a][bx] = delta + l.matrix[a][bx] - blocks.tensor[a][bx];
        }
    }

    let mut sum = Summary::new(Some(&ws.cfg));
    push_fermi(&mut sum, &s.fermi);
    sum.push_f("epsm", "l0", l.l0());
    sum.push_f(
        "epsm",
        "route_difference",
        blocks.max_abs_diff(&extrap.epsilon_m) / blocks.tensor[0][0],
    );
    sum.push_f("epsm", "richardson_spread", extrap.richardson_spread);
    sum.push_f("epsm", "fit_residual", extrap.fit_residual);
    let eig = blocks.eigenvalues();
    sum.push_f("epsm", "eigenvalue_min", eig[0]);
    sum.push_f("epsm", "eigenvalue_max", eig[2]);
    sum.push_f("epsm", "lower_bound_slack", EpsilonM { tensor: lower }.eigenvalues()[0]);
    sum.push_f("epsm", "upper_bound_slack", EpsilonM { tensor: upper }.eigenvalues()[0]);
    sum.write(&ws.out, &ws.prov)?;
    Ok(())
}

/// Supercell SCF screening of a Gaussian defect charge.
pub fn defect(ws: &Workspace) -> Result<(), CliError> {
    let cfg = &ws.cfg;
    let d = &cfg.defect;
    let s = solve(cfg)?;
    let l = response_tensor_l(&s.bands, &s.fermi).map_err(runtime)?;

    let charge = GaussianCharge { total: d.z, center: d.center, width: d.sigma };
    let opts = ScfOptions {
        mixing: if d.anderson_depth > 0 {
            Mixing::Anderson { depth: d.anderson_depth, alpha: d.mix }
        } else {
            Mixing::Damped { alpha: d.mix }
        },
        tol: d.tol,
        max_iter: d.max_iter,
    };
    eprintln!(
        "epsm: supercell m = {}, defect charge {:.3e}, tol {:.1e}",
        d.m, d.z, d.tol
    );
    let sol = solve_defect(&s.bands.model, &s.fermi, d.m, cfg.numerics.g_max, &charge, &opts)
        .map_err(runtime)?;
    for (i, r) in sol.residual_history.iter().enumerate() {
        eprintln!("epsm: scf iteration {:3}, residual {:.6e}", i + 1, r);
    }

    let mut hist = Table::new(&["iteration", "residual"]);
    for (i, r) in sol.residual_history.iter().enumerate() {
        hist.push(vec![(i + 1).to_string(), fmt_f(*r)]);
    }
    hist.write(&ws.out, "scf_history.csv", &ws.prov)?;

    let mut sum = Summary::new(Some(&ws.cfg));
    push_fermi(&mut sum, &s.fermi);
    sum.push("scf", "m", d.m.to_string());
    sum.push("scf", "basis_dim", sol.basis.len().to_string());
    sum.push("scf", "iterations", sol.iterations.to_string());
    sum.push_f("scf", "residual", sol.residual);
    sum.push_f("scf", "charge_conservation", sol.tr0);
    sum.push("scf", "n_occupied", sol.n_occupied.to_string());

    // Screening ratios along the axes vs the small-momentum limit
    // 1 / (1 + L_aa) of the host crystal. Undefined for z = 0.
    if d.z != 0.0 {
        let mut st = Table::new(&[
            "axis",
            "g_norm",
            "ratio_re",
            "ratio_im",
            "small_k_limit",
            "rel_to_limit",
        ]);
        for axis in 0..3 {
            let limit = 1.0 / (1.0 + l.matrix[axis][axis]);
            let ratios = sol.screening_ratios_along(axis, d.shells);
            for (j, (gnorm, ratio)) in ratios.iter().enumerate() {
                st.push(vec![
                    axis.to_string(),
                    fmt_f(*gnorm),
                    fmt_f(ratio.re),
                    fmt_f(ratio.im),
                    fmt_f(limit),
                    fmt_f((ratio.re - limit).abs() / limit),
                ]);
                if j == 0 {
                    sum.push_f(
                        "screening",
                        &format!("axis_{axis}_first_shell"),
                        ratio.re,
                    );
                    sum.push_f("screening", &format!("axis_{axis}_small_k_limit"), limit);
                }
            }
        }
        st.write(&ws.out, "screening.csv", &ws.prov)?;
    } else {
        eprintln!("epsm: z = 0, skipping the screening-ratio table");
    }
    sum.write(&ws.out, &ws.prov)?;
    Ok(())
}

/// Weak-convergence metric of the rescaled screened potential against
/// the homogenized one, over the configured eta ladder.
pub fn homogenize(ws: &Workspace) -> Result<(), CliError> {
    let cfg = &ws.cfg;
    let h = &cfg.homogenization;
    let s = solve(cfg)?;
    let data = head_limit_data(&s.bands, &s.fermi).map_err(runtime)?;
    let eps_m = epsilon_m_from_blocks(&data).map_err(runtime)?;

    let bmin = shortest_b(&s.bands);
    let ball = MomentumBall::new(h.k_spacing * bmin, h.k_radius * bmin).map_err(runtime)?;
    let source = GaussianCharge { total: h.source_total, center: [0.0; 3], width: h.source_width };
    let probes = standard_probes();
    eprintln!(
        "epsm: pairing over {} momenta, {} probes",
        ball.points.len(),
        probes.len()
    );

    let mut columns = vec!["eta".to_string(), "metric".into()];
    for p in 1..=probes.len() {
        columns.push(format!("probe_{p}"));
    }
    let mut table = Table::new(&columns.iter().map(String::as_str).collect::<Vec<_>>());
    let mut metrics = Vec::new();
    for &eta in &h.eta {
        let wc = weak_convergence(&s.bands, &s.fermi, &eps_m, &source, &probes, &ball, eta)
            .map_err(runtime)?;
        eprintln!("epsm: eta {:.4e}, defect {:.6e}", eta, wc.metric);
        let mut row = vec![fmt_f(wc.eta), fmt_f(wc.metric)];
        row.extend(wc.per_probe.iter().map(|&p| fmt_f(p)));
        table.push(row);
        metrics.push(wc.metric);
    }
    table.write(&ws.out, "homogenize.csv", &ws.prov)?;

    let mut sum = Summary::new(Some(&ws.cfg));
    push_fermi(&mut sum, &s.fermi);
    sum.push("homogenize", "momenta", ball.points.len().to_string());
    sum.push("homogenize", "monotone", {
        let mono = metrics.windows(2).all(|w| w[1] < w[0]);
        if mono { "true" } else { "false" }
    });
    if let Some(&last) = metrics.last() {
        sum.push_f("homogenize", "final_metric", last);
    }
    sum.write(&ws.out, &ws.prov)?;
    Ok(())
}

/// Built-in checks on the shipped presets. `only` restricts the run to
/// one numbered criterion. Exit 0 iff everything that ran passed.
pub fn selftest(
    config_path: Option<&Path>,
    out_flag: Option<&Path>,
    overrides: &[String],
    only: Option<usize>,
) -> Result<(), CliError> {
    // The config is optional and only echoed: the checks pin their own
    // presets and tolerances so that they mean the same thing on every
    // machine.
    let cfg = match config_path {
        Some(p) => Some(config::load(p, overrides)?),
        None => None,
    };
    let out = out_flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| {
            PathBuf::from(cfg.as_ref().map(|c| c.output.directory.as_str()).unwrap_or("out"))
        });
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let prov = Provenance::new(
        "selftest",
        cfg.as_ref().map(RunConfig::hash_hex).unwrap_or_else(|| "none".to_string()),
    );

    let indices: Vec<usize> = match only {
        Some(n) if (1..=CRITERIA).contains(&n) => vec![n],
        Some(n) => {
            return Err(CliError::Validation(format!(
                "--only {n}: criteria are numbered 1..={CRITERIA}"
            )));
        }
        None => (1..=CRITERIA).collect(),
    };

    let ctx = SelftestContext::new();
    let mut table = Table::new(&["index", "name", "passed", "seconds", "detail"]);
    let mut failed = 0usize;
    for &i in &indices {
        let report = criterion(&ctx, i);
        eprintln!("{}", report.status_line());
        if !report.passed {
            failed += 1;
        }
        table.push(vec![
            report.index.to_string(),
            report.name.to_string(),
            report.passed.to_string(),
            format!("{:.2}", report.seconds),
            report.detail.clone(),
        ]);
    }
    table.write(&out, "selftest.csv", &prov)?;

    let mut sum = Summary::new(cfg.as_ref());
    sum.push("selftest", "run", indices.len().to_string());
    sum.push("selftest", "passed", (indices.len() - failed).to_string());
    sum.push("selftest", "failed", failed.to_string());
    sum.write(&out, &prov)?;

    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "selftest: {failed} of {} checks failed",
            indices.len()
        )));
    }
    Ok(())
}
