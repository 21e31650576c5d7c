//! Benchmark problems, error norms and convergence-order fits.

use std::io::Write;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::integrator::{integrate, IntegrationOptions, Jacobian, Mode, SplitOdeProblem};
use crate::linalg::RealMatrix;
use crate::methods::builtin;
use crate::tableau::MethodTableau;

/// Stiff Prothero–Robinson pair with exact solution `(cos t, sin t)` on `[0, 5]`.
#[derive(Debug, Clone, Copy)]
pub struct ProtheroRobinson {
    pub t_end: f64,
}

pub fn prothero_robinson() -> ProtheroRobinson {
    ProtheroRobinson { t_end: 5.0 }
}

impl SplitOdeProblem for ProtheroRobinson {
    fn dimension(&self) -> usize {
        2
    }
    fn t0(&self) -> f64 {
        0.0
    }
    fn t_end(&self) -> f64 {
        self.t_end
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![1.0, 0.0]
    }
    fn explicit_rhs(&self, t: f64, y: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = y[0] + y[1] - t.sin();
    }
    fn implicit_rhs(&self, t: f64, y: &[f64], out: &mut [f64]) {
        let (s, c) = t.sin_cos();
        out[0] = -1e6 * (y[0] - c) + 1e3 * (y[1] - s) - s;
        out[1] = 0.0;
    }
    fn implicit_jacobian(&self, _t: f64, _y: &[f64]) -> Jacobian {
        Jacobian::Dense(RealMatrix::from_rows(&[vec![-1e6, 1e3], vec![0.0, 0.0]]))
    }
    fn explicit_jacobian(&self, _t: f64, _y: &[f64]) -> Option<Jacobian> {
        Some(Jacobian::Dense(RealMatrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 1.0],
        ])))
    }
    fn exact(&self, t: f64) -> Option<Vec<f64>> {
        Some(vec![t.cos(), t.sin()])
    }
    fn stiffness_bound(&self) -> Option<f64> {
        Some(1e6 + 1e3 + 2.0)
    }
}

/// Linear advection–reaction system on `x ∈ (0, 1]` after a method-of-lines
/// discretization with `m` nodes `x_j = j/m`. The state interleaves
/// `[u_1, v_1, u_2, v_2, …]`; only `u` is advected (speed 1, inflow at 0).
#[derive(Debug, Clone, Copy)]
pub struct AdvectionReaction {
    pub m: usize,
    pub k1: f64,
    pub k2: f64,
    pub s1: f64,
    pub s2: f64,
    pub t_end: f64,
}

pub fn advection_reaction(m: usize) -> Result<AdvectionReaction> {
    if m < 8 {
        return Err(Error::InvalidSpec(format!(
            "need at least 8 grid nodes, got {m}"
        )));
    }
    Ok(AdvectionReaction {
        m,
        k1: 1e6,
        k2: 2e6,
        s1: 0.0,
        s2: 1.0,
        t_end: 1.0,
    })
}

impl AdvectionReaction {
    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn inflow(t: f64) -> f64 {
        1.0 - (12.0 * t).sin().powi(4)
    }

    /// `∂u/∂x` at all nodes, given the inflow value `u0`.
    pub fn derivative(&self, u0: f64, u: &[f64], out: &mut [f64]) {
        let m = self.m;
        let h = self.h();
        let (a, b) = (1.0 / (6.0 * h), 1.0 / (12.0 * h));
        out[0] = (-2.0 * u0 - 3.0 * u[0] + 6.0 * u[1] - u[2]) * a;
        out[1] = (u0 - 6.0 * u[0] + 3.0 * u[1] + 2.0 * u[2]) * a;
        for j in 2..m - 2 {
            out[j] = (u[j - 2] - 8.0 * u[j - 1] + 8.0 * u[j + 1] - u[j + 2]) * b;
        }
        out[m - 2] = (u[m - 4] - 6.0 * u[m - 3] + 3.0 * u[m - 2] + 2.0 * u[m - 1]) * a;
        out[m - 1] = (-2.0 * u[m - 4] + 9.0 * u[m - 3] - 18.0 * u[m - 2] + 11.0 * u[m - 1]) * a;
    }

    /// `u_j + v_j` per node.
    pub fn total_concentration(state: &[f64]) -> Vec<f64> {
        state.chunks(2).map(|p| p[0] + p[1]).collect()
    }
}

impl SplitOdeProblem for AdvectionReaction {
    fn dimension(&self) -> usize {
        2 * self.m
    }
    fn t0(&self) -> f64 {
        0.0
    }
    fn t_end(&self) -> f64 {
        self.t_end
    }
    fn initial_state(&self) -> Vec<f64> {
        let h = self.h();
        (1..=self.m)
            .flat_map(|j| {
                let u = 1.0 + self.s2 * j as f64 * h;
                [u, (self.k1 * u + self.s2) / self.k2]
            })
            .collect()
    }
    fn explicit_rhs(&self, t: f64, y: &[f64], out: &mut [f64]) {
        let u: Vec<f64> = y.iter().step_by(2).copied().collect();
        let mut ux = vec![0.0; self.m];
        self.derivative(Self::inflow(t), &u, &mut ux);
        for j in 0..self.m {
            out[2 * j] = -ux[j] + self.s1;
            out[2 * j + 1] = self.s2;
        }
    }
    fn implicit_rhs(&self, _t: f64, y: &[f64], out: &mut [f64]) {
        for (o, p) in out.chunks_mut(2).zip(y.chunks(2)) {
            let r = self.k1 * p[0] - self.k2 * p[1];
            o[0] = -r;
            o[1] = r;
        }
    }
    fn implicit_jacobian(&self, _t: f64, _y: &[f64]) -> Jacobian {
        let blk = [-self.k1, self.k2, self.k1, -self.k2];
        Jacobian::BlockDiagonal {
            block: 2,
            data: blk.iter().copied().cycle().take(4 * self.m).collect(),
        }
    }
    fn stiffness_bound(&self) -> Option<f64> {
        Some(self.k1 + self.k2 + 3.0 / self.h())
    }
}

/// `max_i |y_i − r_i| / (1 + |r_i|)`
pub fn scaled_max_error(y: &[f64], y_ref: &[f64]) -> f64 {
    y.iter()
        .zip(y_ref)
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}

/// `sqrt(Σ (y_i − r_i)²)`
pub fn l2_error(y: &[f64], y_ref: &[f64]) -> f64 {
    y.iter()
        .zip(y_ref)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Least-squares slope of `log(err)` over `log(Δt)`.
pub fn convergence_order(step_sizes: &[f64], errors: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = step_sizes
        .iter()
        .zip(errors)
        .filter(|(h, e)| **h > 0.0 && **e > 0.0 && e.is_finite())
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidSpec("all step sizes are equal".into()));
    }
    Ok(sxy / sxx)
}

/// `Δt = 5/(100 + 60 i)`, `i = 0..8`.
pub fn pr_ladder() -> Vec<f64> {
    (0..=8).map(|i| 5.0 / (100.0 + 60.0 * i as f64)).collect()
}

/// Full step-size ladder of the advection–reaction experiment.
pub fn ar_ladder() -> Vec<f64> {
    [4.0, 2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.025]
        .iter()
        .map(|x| x * 1e-3)
        .collect()
}

/// Mid-range of [`ar_ladder`], before order reduction and round-off set in.
pub fn ar_mid_ladder() -> Vec<f64> {
    vec![2e-3, 1e-3, 5e-4, 2.5e-4, 1e-4]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorNorm {
    ScaledMax,
    L2,
}

impl ErrorNorm {
    pub fn name(self) -> &'static str {
        match self {
            ErrorNorm::ScaledMax => "scaled-max",
            ErrorNorm::L2 => "l2",
        }
    }
}

/// What the advection–reaction error is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArQuantity {
    #[default]
    TotalConcentration,
    FullState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExperimentKind {
    ProtheroRobinson,
    AdvectionReaction { m: usize },
}

impl ExperimentKind {
    pub fn parse(name: &str, m: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "prothero-robinson" | "pr" => Ok(ExperimentKind::ProtheroRobinson),
            "advection-reaction" | "ar" => Ok(ExperimentKind::AdvectionReaction { m }),
            _ => Err(Error::UnknownExperiment(name.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::ProtheroRobinson => "prothero-robinson",
            ExperimentKind::AdvectionReaction { .. } => "advection-reaction",
        }
    }

    pub fn default_ladder(&self) -> Vec<f64> {
        match self {
            ExperimentKind::ProtheroRobinson => pr_ladder(),
            ExperimentKind::AdvectionReaction { .. } => ar_ladder(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub methods: Vec<MethodTableau>,
    pub step_sizes: Vec<f64>,
    pub mode: Mode,
    pub ar_quantity: ArQuantity,
    /// Reference step is the smallest tested step divided by this.
    pub reference_refinement: f64,
    pub reference_method: String,
    /// Only steps in `[lo, hi]` enter the fitted order.
    pub fit_range: Option<(f64, f64)>,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, methods: Vec<MethodTableau>) -> Self {
        ExperimentSpec {
            step_sizes: kind.default_ladder(),
            kind,
            methods,
            mode: Mode::Imex,
            ar_quantity: ArQuantity::default(),
            reference_refinement: 8.0,
            reference_method: "imex-peer3s".into(),
            fit_range: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub method: String,
    pub step_sizes: Vec<f64>,
    /// `None` where the run failed.
    pub errors: Vec<Option<f64>>,
    pub failures: Vec<Option<String>>,
    pub fitted_order: Option<f64>,
    pub norm: ErrorNorm,
}

impl ExperimentResult {
    pub fn error_at(&self, dt: f64) -> Option<f64> {
        self.step_sizes
            .iter()
            .position(|h| (h - dt).abs() <= 1e-12 * dt)
            .and_then(|k| self.errors[k])
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub experiment: String,
    pub results: Vec<ExperimentResult>,
    pub reference_dt: Option<f64>,
}

impl ExperimentReport {
    pub const CSV_HEADER: &'static str = "method,dt,error,failed,fitted_order";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.results {
            let order = r
                .fitted_order
                .map(|o| format!("{o:.16e}"))
                .unwrap_or_default();
            for (k, dt) in r.step_sizes.iter().enumerate() {
                let err = r.errors[k].map(|e| format!("{e:.16e}")).unwrap_or_default();
                writeln!(
                    w,
                    "{},{:.16e},{},{},{}",
                    r.method,
                    dt,
                    err,
                    u8::from(r.failures[k].is_some()),
                    order
                )?;
            }
        }
        Ok(())
    }

    pub fn result(&self, method: &str) -> Option<&ExperimentResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

type ErrorFn<'a> = &'a (dyn Fn(&[f64], &[f64]) -> f64 + Sync);

fn ar_error(quantity: ArQuantity) -> impl Fn(&[f64], &[f64]) -> f64 + Sync {
    move |y, r| match quantity {
        ArQuantity::FullState => l2_error(y, r),
        ArQuantity::TotalConcentration => l2_error(
            &AdvectionReaction::total_concentration(y),
            &AdvectionReaction::total_concentration(r),
        ),
    }
}

fn run_ladder<P: SplitOdeProblem>(
    spec: &ExperimentSpec,
    problem: &P,
    reference: &[f64],
    target: ErrorFn<'_>,
    norm: ErrorNorm,
    exec: Execution,
) -> Vec<ExperimentResult> {
    let opts = IntegrationOptions {
        mode: spec.mode,
        ..Default::default()
    };
    let jobs: Vec<(usize, f64)> = (0..spec.methods.len())
        .flat_map(|m| spec.step_sizes.iter().map(move |&dt| (m, dt)))
        .collect();
    let outcomes = exec.map(&jobs, |&(m, dt)| {
        match integrate(&spec.methods[m], problem, dt, &opts) {
            Ok(out) => {
                let err = target(&out.state, reference);
                if err.is_finite() {
                    Ok(err)
                } else {
                    Err("non-finite solution".to_string())
                }
            }
            Err(e) => Err(e.to_string()),
        }
    });
    let n = spec.step_sizes.len();
    spec.methods
        .iter()
        .enumerate()
        .map(|(m, tab)| {
            let slice = &outcomes[m * n..(m + 1) * n];
            let errors: Vec<Option<f64>> = slice.iter().map(|o| o.as_ref().ok().copied()).collect();
            let failures = slice.iter().map(|o| o.as_ref().err().cloned()).collect();
            let (hs, es): (Vec<f64>, Vec<f64>) = spec
                .step_sizes
                .iter()
                .zip(&errors)
                .filter(|(h, _)| match spec.fit_range {
                    Some((lo, hi)) => **h >= lo * (1.0 - 1e-12) && **h <= hi * (1.0 + 1e-12),
                    None => true,
                })
                .filter_map(|(h, e)| e.map(|e| (*h, e)))
                .unzip();
            ExperimentResult {
                method: tab.label().to_string(),
                step_sizes: spec.step_sizes.clone(),
                errors,
                failures,
                fitted_order: convergence_order(&hs, &es).ok(),
                norm,
            }
        })
        .collect()
}

/// Runs every method over every step size. Individual failures are recorded;
/// only a failing reference computation aborts.
pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<ExperimentReport> {
    if spec.methods.is_empty() || spec.step_sizes.is_empty() {
        return Err(Error::InvalidSpec(
            "need at least one method and one step size".into(),
        ));
    }
    if spec.step_sizes.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidSpec("step sizes must be positive".into()));
    }
    match spec.kind {
        ExperimentKind::ProtheroRobinson => {
            let problem = prothero_robinson();
            let reference = problem.exact(problem.t_end).expect("analytic solution");
            let results = run_ladder(
                spec,
                &problem,
                &reference,
                &scaled_max_error,
                ErrorNorm::ScaledMax,
                exec,
            );
            Ok(ExperimentReport {
                experiment: spec.kind.name().into(),
                results,
                reference_dt: None,
            })
        }
        ExperimentKind::AdvectionReaction { m } => {
            let problem = advection_reaction(m)?;
            let dt_min = spec
                .step_sizes
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let dt_ref = dt_min / spec.reference_refinement;
            let reference = ar_reference(&problem, &spec.reference_method, dt_ref)?;
            let results = run_ladder(
                spec,
                &problem,
                &reference,
                &ar_error(spec.ar_quantity),
                ErrorNorm::L2,
                exec,
            );
            Ok(ExperimentReport {
                experiment: spec.kind.name().into(),
                results,
                reference_dt: Some(dt_ref),
            })
        }
    }
}

/// Fine-step reference solution of the advection–reaction problem at `t_end`.
pub fn ar_reference(problem: &AdvectionReaction, method: &str, dt: f64) -> Result<Vec<f64>> {
    let tab = builtin(method).map_err(|e| Error::Reference(Box::new(e)))?;
    integrate(&tab, problem, dt, &IntegrationOptions::default())
        .map(|o| o.state)
        .map_err(|e| Error::Reference(Box::new(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn norms() {
        assert_eq!(scaled_max_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(scaled_max_error(&[2.0, 0.0], &[1.0, 0.0]), 0.5);
        assert_eq!(scaled_max_error(&[0.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(l2_error(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
    }

    #[test]
    fn order_of_exact_power_law() {
        let hs = [0.1, 0.05, 0.02, 0.01];
        let es: Vec<f64> = hs.iter().map(|h: &f64| 7.0 * h.powi(3)).collect();
        assert_abs_diff_eq!(convergence_order(&hs, &es).unwrap(), 3.0, epsilon = 1e-12);
        assert!(matches!(
            convergence_order(&hs[..2], &es[..2]),
            Err(Error::InsufficientPoints { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn prothero_robinson_is_consistent_with_exact_solution() {
        let p = prothero_robinson();
        assert_eq!(p.exact(0.0).unwrap(), vec![1.0, 0.0]);
        for t in [0.0, 0.3, 1.0, 2.7, 5.0] {
            let y = p.exact(t).unwrap();
            let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
            p.explicit_rhs(t, &y, &mut a);
            p.implicit_rhs(t, &y, &mut b);
            assert!((a[0] + b[0] + t.sin()).abs() < 1e-12);
            assert!((a[1] + b[1] - t.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn advection_stencil_kills_constants_and_is_fourth_order_inside() {
        let p = advection_reaction(48).unwrap();
        let mut d = vec![0.0; 48];
        p.derivative(3.0, &vec![3.0; 48], &mut d);
        assert!(d.iter().all(|x| x.abs() < 1e-11));

        let interior_err = |m: usize| {
            let p = advection_reaction(m).unwrap();
            let h = p.h();
            let f = |x: f64| (2.0 * std::f64::consts::PI * x).sin();
            let df = |x: f64| 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x).cos();
            let u: Vec<f64> = (1..=m).map(|j| f(j as f64 * h)).collect();
            let mut d = vec![0.0; m];
            p.derivative(f(0.0), &u, &mut d);
            (2..m - 2)
                .map(|j| (d[j] - df((j + 1) as f64 * h)).abs())
                .fold(0.0, f64::max)
        };
        let ratio = interior_err(48) / interior_err(96);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn boundary_stencils_are_exact_on_cubics() {
        let p = advection_reaction(10).unwrap();
        let h = p.h();
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x + 3.0 * x * x * x;
        let df = |x: f64| -2.0 + x + 9.0 * x * x;
        let u: Vec<f64> = (1..=10).map(|j| f(j as f64 * h)).collect();
        let mut d = vec![0.0; 10];
        p.derivative(f(0.0), &u, &mut d);
        for j in [0usize, 1, 8, 9] {
            assert!(
                (d[j] - df((j + 1) as f64 * h)).abs() < 1e-10,
                "node {}",
                j + 1
            );
        }
    }

    #[test]
    fn advection_reaction_initial_data() {
        let p = advection_reaction(8).unwrap();
        let y = p.initial_state();
        assert_abs_diff_eq!(y[0], 1.125, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], (1e6 * 1.125 + 1.0) / 2e6, epsilon = 1e-15);
        assert_abs_diff_eq!(y[14], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn ladders() {
        let l = pr_ladder();
        assert_eq!(l.len(), 9);
        assert_eq!(l[0], 0.05);
        assert_eq!(*l.last().unwrap(), 5.0 / 580.0);
        assert_eq!(ar_ladder().len(), 8);
    }
}
