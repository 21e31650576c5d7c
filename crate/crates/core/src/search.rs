//! Derivative-free search for new coefficient sets.
//!
//! Two phases per start: the implicit method (`c`, `γ`, `R`, `P`) is tuned
//! first, super-convergence `vᵀd_{s+1} = 0` enforced by a penalty and then
//! polished to round-off by a one-dimensional root solve; afterwards the
//! extrapolation matrix `S2` is chosen for the explicit companion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{eigenvalues, spectral_radius, RealMatrix};
use crate::methods::builtin_params;
use crate::stability::{
    is_a_stable, log_space, scan_region, AStabilitySampling, Grid, RegionKind, SectorSampling,
};
use crate::tableau::{
    certify, extrap_defect_l, norm_2, CertificationReport, MethodTableau, TableauParams,
};

// ---------------------------------------------------------------------------
// Nelder–Mead
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Stop once the simplex diameter (max norm) falls below this.
    pub x_tol: f64,
    /// ... or once the spread of function values falls below this.
    pub f_tol: f64,
    pub max_evals: usize,
    /// Edge length of the initial simplex, relative to `max(|x_i|, 1)`.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            x_tol: 1e-10,
            f_tol: 1e-14,
            max_evals: 10_000,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// False when the evaluation budget ran out first.
    pub converged: bool,
}

pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let f0 = eval(x0, &mut evals);
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        if evals >= opts.max_evals {
            break;
        }
        let mut x = x0.to_vec();
        x[i] += opts.initial_step * x[i].abs().max(1.0);
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }
    if simplex.len() < n + 1 {
        return NelderMeadResult {
            x: x0.to_vec(),
            f: f0,
            evals,
            converged: false,
        };
    }
    let mut converged = false;
    while evals < opts.max_evals {
        // stable sort keeps the incumbent first among ties
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let f_best = simplex[0].1;
        let f_worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter < opts.x_tol || (f_worst - f_best).abs() <= opts.f_tol * (1.0 + f_best.abs()) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (simplex[n].0[j] - centroid[j]))
                .collect()
        };
        let xr = along(-opts.reflection);
        let fr = eval(&xr, &mut evals);
        if fr < f_best {
            let xe = along(-opts.reflection * opts.expansion);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < f_worst {
            let xc = along(-opts.reflection * opts.contraction);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(opts.contraction);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < f_worst.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            if evals >= opts.max_evals {
                break;
            }
            for j in 0..n {
                v.0[j] = best[j] + opts.shrink * (v.0[j] - best[j]);
            }
            v.1 = eval(&v.0, &mut evals);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    // never hand back something worse than the start
    if fx <= f0 {
        NelderMeadResult {
            x,
            f: fx,
            evals,
            converged,
        }
    } else {
        NelderMeadResult {
            x: x0.to_vec(),
            f: f0,
            evals,
            converged,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameterizations and objectives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// `P = e vᵀ`; free are `c_1..c_{s−1}`, `γ`, strict `R`, `v_1..v_{s−1}`.
    OptimalZeroStable,
    /// Free `P` entries of the first `s−1` columns; the last column makes `Pe = e`.
    General,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub a_stability: f64,
    pub rho_inf: f64,
    pub matrix_norms: f64,
    pub error_constant: f64,
    pub superconvergence: f64,
    pub zero_stability: f64,
    pub area_explicit: f64,
    pub area_alpha: f64,
    pub extrapolation_norms: f64,
    pub explicit_error_constant: f64,
    pub explicit_superconvergence: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            a_stability: 1e3,
            rho_inf: 1.0,
            matrix_norms: 0.01,
            error_constant: 1.0,
            superconvergence: 100.0,
            zero_stability: 1e3,
            area_explicit: 0.1,
            area_alpha: 0.2,
            extrapolation_norms: 0.01,
            explicit_error_constant: 1.0,
            explicit_superconvergence: 100.0,
        }
    }
}

/// Where the multistarts begin.
#[derive(Debug, Clone, PartialEq)]
pub enum StartPolicy {
    /// Uniform samples from the preset box.
    Random,
    /// A named built-in, perturbed by `scale` times a uniform `[−1, 1]` sample.
    Around { method: String, scale: f64 },
}

#[derive(Debug, Clone)]
pub struct SearchSpec {
    pub stages: usize,
    pub parameterization: Parameterization,
    pub weights: Weights,
    pub multistart: usize,
    pub seed: u64,
    pub start: StartPolicy,
    pub simplex: NelderMeadOptions,
    /// Budget of the explicit-phase simplex per candidate (0 = polish only).
    pub explicit_max_evals: usize,
    /// Grid for region areas inside the explicit objective.
    pub coarse_grid: Grid,
    /// Total objective evaluations across all starts and phases.
    pub max_total_evals: usize,
}

impl SearchSpec {
    /// Named presets: `s2-seeded`, `s2`, `s3`, `s4`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let base = |stages, parameterization, start| SearchSpec {
            stages,
            parameterization,
            weights: Weights::default(),
            multistart: 8,
            seed,
            start,
            simplex: NelderMeadOptions {
                max_evals: 3000,
                ..Default::default()
            },
            explicit_max_evals: 150,
            coarse_grid: Grid::with_resolution(80, 80),
            max_total_evals: 100_000,
        };
        match name {
            "s2-seeded" => Ok(SearchSpec {
                explicit_max_evals: 0,
                ..base(
                    2,
                    Parameterization::OptimalZeroStable,
                    StartPolicy::Around {
                        method: "imex-peer2s".into(),
                        scale: 0.05,
                    },
                )
            }),
            "s2" => Ok(SearchSpec {
                explicit_max_evals: 0,
                ..base(2, Parameterization::OptimalZeroStable, StartPolicy::Random)
            }),
            "s3" => Ok(SearchSpec {
                multistart: 50,
                simplex: NelderMeadOptions {
                    max_evals: 1500,
                    ..Default::default()
                },
                explicit_max_evals: 60,
                ..base(3, Parameterization::OptimalZeroStable, StartPolicy::Random)
            }),
            "s4" => Ok(SearchSpec {
                multistart: 16,
                simplex: NelderMeadOptions {
                    max_evals: 5000,
                    ..Default::default()
                },
                explicit_max_evals: 60,
                ..base(4, Parameterization::General, StartPolicy::Random)
            }),
            _ => Err(Error::InvalidSpec(format!(
                "unknown search preset `{name}`"
            ))),
        }
    }

    /// Default preset for a stage count.
    pub fn for_stages(stages: usize, seed: u64) -> Result<Self> {
        match stages {
            2 => Self::preset("s2-seeded", seed),
            3 => Self::preset("s3", seed),
            4 => Self::preset("s4", seed),
            _ => Err(Error::InvalidSpec(format!("no preset for s = {stages}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.stages) {
            return Err(Error::InvalidSpec(format!(
                "stage count {} unsupported",
                self.stages
            )));
        }
        if self.multistart == 0 {
            return Err(Error::InvalidSpec("multistart must be at least 1".into()));
        }
        let w = &self.weights;
        let all = [
            w.a_stability,
            w.rho_inf,
            w.matrix_norms,
            w.error_constant,
            w.superconvergence,
            w.zero_stability,
            w.area_explicit,
            w.area_alpha,
            w.extrapolation_norms,
            w.explicit_error_constant,
            w.explicit_superconvergence,
        ];
        if all.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidSpec("weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        let s = self.stages;
        let common = (s - 1) + 1 + s * (s - 1) / 2;
        match self.parameterization {
            Parameterization::OptimalZeroStable => common + (s - 1),
            Parameterization::General => common + s * (s - 1),
        }
    }
}

/// Value assigned to parameters that do not decode to a valid tableau.
pub const INVALID_PENALTY: f64 = 1e6;

fn strict_from(vals: &[f64], s: usize) -> RealMatrix {
    let mut m = RealMatrix::zeros(s, s);
    let mut k = 0;
    for i in 1..s {
        for j in 0..i {
            m[(i, j)] = vals[k];
            k += 1;
        }
    }
    m
}

fn strict_values(m: &RealMatrix) -> Vec<f64> {
    let s = m.rows();
    let mut out = Vec::new();
    for i in 1..s {
        for j in 0..i {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Implicit-phase parameter vector to tableau parameters (`S2 = 0`).
pub fn decode(x: &[f64], spec: &SearchSpec) -> TableauParams {
    let s = spec.stages;
    let mut k = 0;
    let mut take = |n: usize| {
        let out = x[k..k + n].to_vec();
        k += n;
        out
    };
    let mut c = take(s - 1);
    c.push(1.0);
    let gamma = take(1)[0];
    let r_strict = strict_from(&take(s * (s - 1) / 2), s);
    let p = match spec.parameterization {
        Parameterization::OptimalZeroStable => {
            let mut v = take(s - 1);
            v.push(1.0 - v.iter().sum::<f64>());
            RealMatrix::from_rows(&vec![v; s])
        }
        Parameterization::General => {
            let free = take(s * (s - 1));
            RealMatrix::from_fn(s, s, |i, j| {
                let row = &free[i * (s - 1)..(i + 1) * (s - 1)];
                if j < s - 1 {
                    row[j]
                } else {
                    1.0 - row.iter().sum::<f64>()
                }
            })
        }
    };
    TableauParams {
        label: format!("search-{s}s"),
        c,
        gamma,
        p,
        r_strict,
        s2: RealMatrix::zeros(s, s),
    }
}

/// Inverse of [`decode`] (ignores `S2`).
pub fn encode(params: &TableauParams, parameterization: Parameterization) -> Vec<f64> {
    let s = params.c.len();
    let mut x: Vec<f64> = params.c[..s - 1].to_vec();
    x.push(params.gamma);
    x.extend(strict_values(&params.r_strict));
    match parameterization {
        Parameterization::OptimalZeroStable => x.extend_from_slice(&params.p.row(0)[..s - 1]),
        Parameterization::General => {
            for i in 0..s {
                x.extend_from_slice(&params.p.row(i)[..s - 1]);
            }
        }
    }
    x
}

/// Cheaper A-stability sampling used inside objectives.
pub fn search_sampling() -> AStabilitySampling {
    AStabilitySampling {
        angles_deg: (0..=9).map(|k| 90.0 + 10.0 * k as f64).collect(),
        radii: log_space(1e-2, 1e4, 16),
    }
}

fn superconv_implicit(tab: &MethodTableau) -> f64 {
    match tab.v() {
        Some(v) => {
            let d = tab.defect(tab.stages() + 1);
            v.iter().zip(&d).map(|(a, b)| a * b).sum()
        }
        None => f64::INFINITY,
    }
}

fn superconv_explicit(tab: &MethodTableau) -> f64 {
    match tab.v() {
        Some(v) => {
            let rl = tab.r().mul_vec(&extrap_defect_l(tab));
            v.iter().zip(&rl).map(|(a, b)| a * b).sum()
        }
        None => f64::INFINITY,
    }
}

fn zero_stability_penalty(tab: &MethodTableau) -> f64 {
    let Ok(mut eigs) = eigenvalues(tab.p()) else {
        return INVALID_PENALTY;
    };
    let one = num_complex::Complex64::new(1.0, 0.0);
    eigs.sort_by(|a, b| (a - one).norm().total_cmp(&(b - one).norm()));
    eigs[1..]
        .iter()
        .map(|z| (z.norm() - 1.0 + 1e-6).max(0.0))
        .sum()
}

/// Implicit-phase objective; structurally invalid parameters score at least
/// [`INVALID_PENALTY`].
pub fn implicit_objective(x: &[f64], spec: &SearchSpec) -> f64 {
    let params = decode(x, spec);
    if !(params.gamma > 0.0) || x.iter().any(|v| !v.is_finite()) {
        return INVALID_PENALTY * (1.0 + params.gamma.abs().min(1e3));
    }
    let tab = match params.build() {
        Ok(t) => t,
        Err(_) => return INVALID_PENALTY,
    };
    implicit_objective_for(&tab, spec)
}

pub fn implicit_objective_for(tab: &MethodTableau, spec: &SearchSpec) -> f64 {
    let w = &spec.weights;
    let sc = superconv_implicit(tab);
    if !sc.is_finite() {
        return INVALID_PENALTY;
    }
    let a = is_a_stable(tab, &search_sampling());
    let rho_inf = spectral_radius(&tab.r_inv_q().unwrap_or_else(|_| RealMatrix::identity(1)))
        .unwrap_or(INVALID_PENALTY);
    let norms = tab.p().norm_frobenius() + tab.q().norm_frobenius() + tab.r().norm_frobenius();
    let c_im = norm_2(&tab.defect(tab.stages() + 1));
    let mut f = w.a_stability * (a.worst_rho - 1.0).max(0.0).min(INVALID_PENALTY)
        + w.rho_inf * rho_inf
        + w.matrix_norms * norms
        + w.error_constant * c_im
        + w.superconvergence * sc.abs();
    if spec.parameterization == Parameterization::General {
        f += w.zero_stability * zero_stability_penalty(tab);
    }
    if f.is_finite() {
        f
    } else {
        INVALID_PENALTY
    }
}

/// Explicit-phase objective over the strict lower entries of `S2`.
pub fn explicit_objective(s2_values: &[f64], base: &MethodTableau, spec: &SearchSpec) -> f64 {
    let s = base.stages();
    let Ok(tab) = base.with_s2(strict_from(s2_values, s)) else {
        return INVALID_PENALTY;
    };
    explicit_objective_for(&tab, spec)
}

pub fn explicit_objective_for(tab: &MethodTableau, spec: &SearchSpec) -> f64 {
    let w = &spec.weights;
    let sc = superconv_explicit(tab);
    if !sc.is_finite() {
        return INVALID_PENALTY;
    }
    let sampling = SectorSampling {
        fractions: vec![0.0, 0.5, -0.5, 1.0, -1.0],
        radii: log_space(1e-2, 1e4, 10),
    };
    let mut f = w.extrapolation_norms * (tab.s1().norm_frobenius() + tab.s2().norm_frobenius())
        + w.explicit_error_constant * norm_2(&tab.r().mul_vec(&extrap_defect_l(tab)))
        + w.explicit_superconvergence * sc.abs();
    if w.area_explicit > 0.0 {
        if let Ok(se) = scan_region(
            tab,
            spec.coarse_grid,
            RegionKind::Explicit,
            &sampling,
            Execution::Sequential,
        ) {
            f -= w.area_explicit * se.area;
        }
    }
    if w.area_alpha > 0.0 {
        if let Ok(sa) = scan_region(
            tab,
            spec.coarse_grid,
            RegionKind::Alpha(90.0),
            &sampling,
            Execution::Sequential,
        ) {
            f -= w.area_alpha * sa.area;
        }
    }
    if f.is_finite() {
        f
    } else {
        INVALID_PENALTY
    }
}

// ---------------------------------------------------------------------------
// Polishing
// ---------------------------------------------------------------------------

/// Drives `g` to zero by secant steps on the single coordinate `k`.
fn secant_polish<G>(x: &mut [f64], k: usize, mut g: G, tol: f64, evals: &mut usize) -> bool
where
    G: FnMut(&[f64]) -> f64,
{
    let mut x0 = x[k];
    let mut g0 = g(x);
    *evals += 1;
    if g0.abs() < tol {
        return true;
    }
    let mut x1 = x0 + 1e-6 * x0.abs().max(1e-2);
    for _ in 0..30 {
        x[k] = x1;
        let g1 = g(x);
        *evals += 1;
        if !g1.is_finite() {
            break;
        }
        if g1.abs() < tol {
            return true;
        }
        if g1 == g0 {
            break;
        }
        let next = x1 - g1 * (x1 - x0) / (g1 - g0);
        x0 = x1;
        g0 = g1;
        x1 = next;
    }
    x[k] = x0;
    false
}

/// Coordinate with the largest finite-difference sensitivity of `g`.
fn most_sensitive<G>(x: &[f64], mut g: G, candidates: &[usize], evals: &mut usize) -> Option<usize>
where
    G: FnMut(&[f64]) -> f64,
{
    let g0 = g(x);
    *evals += 1;
    let mut best = None;
    let mut best_slope = 0.0;
    for &k in candidates {
        let mut y = x.to_vec();
        let h = 1e-6 * x[k].abs().max(1e-2);
        y[k] += h;
        let slope = ((g(&y) - g0) / h).abs();
        *evals += 1;
        if slope.is_finite() && slope > best_slope {
            best_slope = slope;
            best = Some(k);
        }
    }
    best
}

fn implicit_residual(x: &[f64], spec: &SearchSpec) -> f64 {
    match decode(x, spec).build() {
        Ok(t) => superconv_implicit(&t),
        Err(_) => f64::NAN,
    }
}

/// Sets `vᵀd_{s+1}` to round-off level by moving one parameter; `γ` and the
/// `R` entries are tried first, then the nodes and `P`.
fn polish_implicit(x: &mut Vec<f64>, spec: &SearchSpec, evals: &mut usize) -> bool {
    let s = spec.stages;
    let gamma_idx = s - 1;
    let mut order: Vec<usize> = (gamma_idx..gamma_idx + 1 + s * (s - 1) / 2).collect();
    order.extend(0..gamma_idx);
    order.extend(gamma_idx + 1 + s * (s - 1) / 2..x.len());
    let target = |y: &[f64]| implicit_residual(y, spec);
    let Some(k) = most_sensitive(x, target, &order, evals) else {
        return false;
    };
    secant_polish(x, k, target, 1e-13, evals)
}

/// Zeroes `vᵀR l_s`, which is affine in `S2`; the steepest entry is moved.
fn polish_explicit(s2: &mut Vec<f64>, base: &MethodTableau, evals: &mut usize) -> bool {
    let s = base.stages();
    let g = |y: &[f64]| match base.with_s2(strict_from(y, s)) {
        Ok(t) => superconv_explicit(&t),
        Err(_) => f64::NAN,
    };
    let all: Vec<usize> = (0..s2.len()).collect();
    let Some(k) = most_sensitive(s2, g, &all, evals) else {
        return false;
    };
    secant_polish(s2, k, g, 1e-13, evals)
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SearchCandidate {
    pub tableau: MethodTableau,
    pub report: CertificationReport,
    pub implicit_objective: f64,
    pub explicit_objective: f64,
    pub start: usize,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Certified candidates, best first.
    pub candidates: Vec<SearchCandidate>,
    pub evaluations: usize,
    /// One line per start that did not produce a candidate.
    pub diagnostics: Vec<String>,
}

fn random_start(spec: &SearchSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = spec.stages;
    let mut x = Vec::with_capacity(spec.dimension());
    let mut nodes: Vec<f64> = (0..s - 1)
        .map(|_| {
            if s >= 4 {
                rng.gen_range(-0.95..0.95)
            } else {
                rng.gen_range(0.05..0.95)
            }
        })
        .collect();
    nodes.sort_by(f64::total_cmp);
    x.extend(nodes);
    x.push(rng.gen_range(0.2..1.2));
    for _ in 0..s * (s - 1) / 2 {
        x.push(rng.gen_range(-1.0..1.0));
    }
    let rest = spec.dimension() - x.len();
    for _ in 0..rest {
        x.push(rng.gen_range(-1.5..1.5));
    }
    x
}

fn start_point(spec: &SearchSpec, k: usize) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(k as u64);
    match &spec.start {
        StartPolicy::Random => Ok(random_start(spec, &mut rng)),
        StartPolicy::Around { method, scale } => {
            let params = builtin_params(method)?;
            if params.c.len() != spec.stages {
                return Err(Error::InvalidSpec(format!(
                    "start method {method} has {} stages, search has {}",
                    params.c.len(),
                    spec.stages
                )));
            }
            let x = encode(&params, spec.parameterization);
            Ok(x.iter()
                .map(|v| v + scale * v.abs().max(0.1) * rng.gen_range(-1.0..1.0))
                .collect())
        }
    }
}

struct StartResult {
    candidate: std::result::Result<SearchCandidate, String>,
    evals: usize,
}

fn run_start(spec: &SearchSpec, k: usize, budget: usize) -> StartResult {
    let mut evals = 0;
    let x0 = match start_point(spec, k) {
        Ok(x) => x,
        Err(e) => {
            return StartResult {
                candidate: Err(e.to_string()),
                evals,
            }
        }
    };
    let opts = NelderMeadOptions {
        max_evals: spec.simplex.max_evals.min(budget),
        ..spec.simplex
    };
    let nm = nelder_mead(|x| implicit_objective(x, spec), &x0, &opts);
    evals += nm.evals;
    let mut x = nm.x;
    if !polish_implicit(&mut x, spec, &mut evals) {
        return StartResult {
            candidate: Err(format!(
                "start {k}: implicit super-convergence polish failed"
            )),
            evals,
        };
    }
    let base = match decode(&x, spec).build() {
        Ok(t) => t.with_label(format!("search-{}s-{k}", spec.stages)),
        Err(e) => {
            return StartResult {
                candidate: Err(format!("start {k}: {e}")),
                evals,
            }
        }
    };
    let implicit_value = implicit_objective_for(&base, spec);
    evals += 1;

    let mut s2 = vec![0.0; spec.stages * (spec.stages - 1) / 2];
    if spec.explicit_max_evals > 0 {
        let nm = nelder_mead(
            |y| explicit_objective(y, &base, spec),
            &s2,
            &NelderMeadOptions {
                max_evals: spec.explicit_max_evals,
                initial_step: 0.5,
                ..spec.simplex
            },
        );
        evals += nm.evals;
        s2 = nm.x;
    }
    if !polish_explicit(&mut s2, &base, &mut evals) {
        return StartResult {
            candidate: Err(format!(
                "start {k}: explicit super-convergence polish failed"
            )),
            evals,
        };
    }
    let tab = match base.with_s2(strict_from(&s2, spec.stages)) {
        Ok(t) => t.with_label(base.label().to_string()),
        Err(e) => {
            return StartResult {
                candidate: Err(format!("start {k}: {e}")),
                evals,
            }
        }
    };
    let explicit_value = explicit_objective_for(&tab, spec);
    evals += 1;
    let report = certify(&tab);
    let accepted = report.stage_order_ok()
        && report.superconv_implicit < 1e-7
        && report.superconv_explicit < 1e-7
        && report.zero_stable
        && report.a_stable;
    StartResult {
        candidate: if accepted {
            Ok(SearchCandidate {
                tableau: tab,
                report,
                implicit_objective: implicit_value,
                explicit_objective: explicit_value,
                start: k,
            })
        } else {
            Err(format!(
                "start {k}: rejected by certification ({})",
                report.failures().join(", ")
            ))
        },
        evals,
    }
}

/// Runs all starts (in parallel under `exec`) and returns the certified
/// candidates sorted by explicit, then implicit objective. Deterministic for a
/// given spec.
pub fn run_search(spec: &SearchSpec, exec: Execution) -> Result<SearchOutcome> {
    spec.validate()?;
    let per_start = (spec.max_total_evals / spec.multistart).max(1);
    let results = exec.map_range(spec.multistart, |k| run_start(spec, k, per_start));
    let evaluations = results.iter().map(|r| r.evals).sum();
    let mut candidates = Vec::new();
    let mut diagnostics = Vec::new();
    for r in results {
        match r.candidate {
            Ok(c) => candidates.push(c),
            Err(msg) => diagnostics.push(msg),
        }
    }
    candidates.sort_by(|a, b| {
        a.explicit_objective
            .total_cmp(&b.explicit_objective)
            .then(a.implicit_objective.total_cmp(&b.implicit_objective))
            .then(a.start.cmp(&b.start))
    });
    Ok(SearchOutcome {
        candidates,
        evaluations,
        diagnostics,
    })
}
