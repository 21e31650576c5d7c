//! Constant step integration of split systems `u' = F0(t,u) + F1(t,u)`.
//!
//! Stage `i` of block `n` approximates `u(t_n + c_i Δt)`. Since `c_s = 1` the
//! last stage of the block started at `t_n` lands on `t_n + Δt`; reaching
//! `t_end = t0 + N Δt` from a starting block at `t0` takes `N − 1` steps.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{Lu, RealMatrix, SINGULAR_PIVOT_RTOL};
use crate::tableau::{norm_inf, MethodTableau};

/// A split ODE. `F0` is advanced explicitly in IMEX mode, `F1` implicitly.
pub trait SplitOdeProblem: Sync {
    fn dimension(&self) -> usize;
    fn t0(&self) -> f64;
    fn t_end(&self) -> f64;
    fn initial_state(&self) -> Vec<f64>;
    fn explicit_rhs(&self, t: f64, u: &[f64], out: &mut [f64]);
    fn implicit_rhs(&self, t: f64, u: &[f64], out: &mut [f64]);
    fn implicit_jacobian(&self, t: f64, u: &[f64]) -> Jacobian;
    /// Used by the fully implicit mode when available; otherwise that mode
    /// runs a simplified Newton iteration with `∂F1/∂u` only.
    fn explicit_jacobian(&self, _t: f64, _u: &[f64]) -> Option<Jacobian> {
        None
    }
    fn exact(&self, _t: f64) -> Option<Vec<f64>> {
        None
    }
    /// Bound on the stiffness (`‖∂F/∂u‖`) for explicit starting substeps.
    fn stiffness_bound(&self) -> Option<f64> {
        None
    }
}

/// Jacobians with the structures the test problems produce.
#[derive(Debug, Clone, PartialEq)]
pub enum Jacobian {
    Zero(usize),
    Dense(RealMatrix),
    /// Square blocks of size `block` along the diagonal, each row-major.
    BlockDiagonal {
        block: usize,
        data: Vec<f64>,
    },
}

impl Jacobian {
    pub fn dim(&self) -> usize {
        match self {
            Jacobian::Zero(n) => *n,
            Jacobian::Dense(m) => m.rows(),
            Jacobian::BlockDiagonal { block, data } => data.len() / block,
        }
    }

    pub fn to_dense(&self) -> RealMatrix {
        match self {
            Jacobian::Zero(n) => RealMatrix::zeros(*n, *n),
            Jacobian::Dense(m) => m.clone(),
            Jacobian::BlockDiagonal { block, data } => {
                let b = *block;
                let n = self.dim();
                let mut m = RealMatrix::zeros(n, n);
                for (k, chunk) in data.chunks(b * b).enumerate() {
                    for i in 0..b {
                        for j in 0..b {
                            m[(k * b + i, k * b + j)] = chunk[i * b + j];
                        }
                    }
                }
                m
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Jacobian::Zero(n) => vec![0.0; *n],
            Jacobian::Dense(m) => m.mul_vec(x),
            Jacobian::BlockDiagonal { block, data } => {
                let b = *block;
                let mut out = vec![0.0; x.len()];
                for (k, chunk) in data.chunks(b * b).enumerate() {
                    for i in 0..b {
                        out[k * b + i] = (0..b).map(|j| chunk[i * b + j] * x[k * b + j]).sum();
                    }
                }
                out
            }
        }
    }

    pub fn sum(self, other: Jacobian) -> Result<Jacobian> {
        if self.dim() != other.dim() {
            return Err(Error::dims(self.dim(), other.dim()));
        }
        Ok(match (self, other) {
            (Jacobian::Zero(_), j) | (j, Jacobian::Zero(_)) => j,
            (
                Jacobian::BlockDiagonal { block: a, data: da },
                Jacobian::BlockDiagonal { block: b, data: db },
            ) if a == b => Jacobian::BlockDiagonal {
                block: a,
                data: da.iter().zip(&db).map(|(x, y)| x + y).collect(),
            },
            (a, b) => Jacobian::Dense(&a.to_dense() + &b.to_dense()),
        })
    }
}

/// Factorization of `I − h J`.
#[derive(Debug, Clone)]
pub struct NewtonMatrix {
    kind: NewtonKind,
}

#[derive(Debug, Clone)]
enum NewtonKind {
    Identity,
    Dense(Lu<f64>),
    Blocks {
        block: usize,
        lu: Vec<f64>,
        piv: Vec<usize>,
    },
}

fn factor_block(a: &mut [f64], piv: &mut [usize], b: usize) -> Result<()> {
    let scale = (0..b)
        .map(|i| a[i * b..(i + 1) * b].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let threshold = SINGULAR_PIVOT_RTOL * scale;
    for k in 0..b {
        let p = (k..b)
            .max_by(|&i, &j| a[i * b + k].abs().total_cmp(&a[j * b + k].abs()))
            .unwrap_or(k);
        let pivot = a[p * b + k];
        if !(pivot.abs() > threshold) {
            return Err(Error::SingularMatrix {
                pivot: pivot.abs(),
                threshold,
            });
        }
        piv[k] = p;
        if p != k {
            for j in 0..b {
                a.swap(k * b + j, p * b + j);
            }
        }
        for i in k + 1..b {
            let l = a[i * b + k] / a[k * b + k];
            a[i * b + k] = l;
            for j in k + 1..b {
                a[i * b + j] -= l * a[k * b + j];
            }
        }
    }
    Ok(())
}

fn solve_block(lu: &[f64], piv: &[usize], x: &mut [f64], b: usize) {
    for k in 0..b {
        x.swap(k, piv[k]);
    }
    for i in 1..b {
        let s: f64 = (0..i).map(|j| lu[i * b + j] * x[j]).sum();
        x[i] -= s;
    }
    for i in (0..b).rev() {
        let s: f64 = (i + 1..b).map(|j| lu[i * b + j] * x[j]).sum();
        x[i] = (x[i] - s) / lu[i * b + i];
    }
}

impl NewtonMatrix {
    pub fn factor(jac: &Jacobian, h: f64) -> Result<Self> {
        let kind = match jac {
            Jacobian::Zero(_) => NewtonKind::Identity,
            Jacobian::Dense(j) => {
                let n = j.rows();
                let a =
                    RealMatrix::from_fn(n, n, |r, c| f64::from(u8::from(r == c)) - h * j[(r, c)]);
                NewtonKind::Dense(Lu::factor(&a)?)
            }
            Jacobian::BlockDiagonal { block, data } => {
                let b = *block;
                let mut lu: Vec<f64> = data.iter().map(|x| -h * x).collect();
                let nblocks = data.len() / (b * b);
                let mut piv = vec![0; nblocks * b];
                for k in 0..nblocks {
                    let blk = &mut lu[k * b * b..(k + 1) * b * b];
                    for i in 0..b {
                        blk[i * b + i] += 1.0;
                    }
                    factor_block(blk, &mut piv[k * b..(k + 1) * b], b)?;
                }
                NewtonKind::Blocks { block: b, lu, piv }
            }
        };
        Ok(NewtonMatrix { kind })
    }

    /// Overwrites `x` with `(I − hJ)⁻¹ x`.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        match &self.kind {
            NewtonKind::Identity => {}
            NewtonKind::Dense(lu) => {
                let y = lu.solve_vec(x);
                x.copy_from_slice(&y);
            }
            NewtonKind::Blocks { block, lu, piv } => {
                let b = *block;
                for (k, xs) in x.chunks_mut(b).enumerate() {
                    solve_block(
                        &lu[k * b * b..(k + 1) * b * b],
                        &piv[k * b..(k + 1) * b],
                        xs,
                        b,
                    );
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    /// Corrections applied even when the guess already meets the tolerance.
    /// A guess within tolerance still leaves its residual in directions the
    /// implicit Jacobian does not damp, and that drift adds up over long runs.
    pub min_iters: usize,
    /// Factor the Newton matrix once per stage instead of every iteration.
    pub reuse_jacobian: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_iters: 25,
            min_iters: 1,
            reuse_jacobian: false,
        }
    }
}

impl NewtonOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0)
            || !(self.rel_tol > 0.0)
            || self.max_iters == 0
            || self.min_iters > self.max_iters
        {
            return Err(Error::InvalidSpec(format!(
                "invalid Newton options {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub w: Vec<f64>,
    /// Implicit right-hand side at `w`, already evaluated by the last residual.
    pub f: Vec<f64>,
    pub iterations: usize,
    /// `‖w_k − hF(w_k) − rhs‖_∞` for every iterate, starting with the guess.
    pub residuals: Vec<f64>,
}

/// Solves `w − h F(w) = rhs` by Newton's method. `eval` writes `F(w)`, `jac`
/// returns `∂F/∂w`. `stage` (1-based) only labels errors.
pub fn newton_solve<E, J>(
    stage: usize,
    h: f64,
    rhs: &[f64],
    guess: Vec<f64>,
    mut eval: E,
    mut jac: J,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome>
where
    E: FnMut(&[f64], &mut [f64]),
    J: FnMut(&[f64]) -> Jacobian,
{
    let n = rhs.len();
    let tol = opts.abs_tol + opts.rel_tol * norm_inf(rhs);
    let mut w = guess;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut residuals = Vec::new();
    let mut factored: Option<NewtonMatrix> = None;
    for k in 0..=opts.max_iters {
        eval(&w, &mut f);
        for i in 0..n {
            g[i] = w[i] - h * f[i] - rhs[i];
        }
        let r = norm_inf(&g);
        if !r.is_finite() {
            return Err(Error::NonFinite(format!(
                "Newton residual of stage {stage}"
            )));
        }
        residuals.push(r);
        if r <= tol && (k >= opts.min_iters || r == 0.0) {
            return Ok(NewtonOutcome {
                w,
                f,
                iterations: k,
                residuals,
            });
        }
        if k == opts.max_iters {
            break;
        }
        if factored.is_none() || !opts.reuse_jacobian {
            factored = Some(NewtonMatrix::factor(&jac(&w), h)?);
        }
        let m = factored.as_ref().expect("factored above");
        m.solve_in_place(&mut g);
        for i in 0..n {
            w[i] -= g[i];
        }
    }
    Err(Error::NewtonNoConvergence {
        stage,
        iterations: opts.max_iters,
        residual: *residuals.last().unwrap_or(&f64::NAN),
    })
}

/// Solves `w − Δt γ F1(t, w) = rhs` for one stage of `problem`.
pub fn newton_solve_stage<P: SplitOdeProblem + ?Sized>(
    gamma: f64,
    dt: f64,
    rhs: &[f64],
    problem: &P,
    t: f64,
    guess: Vec<f64>,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome> {
    newton_solve(
        1,
        dt * gamma,
        rhs,
        guess,
        |w, out| problem.implicit_rhs(t, w, out),
        |w| problem.implicit_jacobian(t, w),
        opts,
    )
}

/// Which parts of the right-hand side are treated implicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Imex,
    /// `F = F0 + F1`, all implicit.
    Implicit,
    /// `F = F0 + F1`, all explicit through the extrapolation matrices.
    Explicit,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Imex => "imex",
            Mode::Implicit => "implicit",
            Mode::Explicit => "explicit",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imex" => Ok(Mode::Imex),
            "implicit" => Ok(Mode::Implicit),
            "explicit" => Ok(Mode::Explicit),
            _ => Err(Error::InvalidSpec(format!("unknown mode `{s}`"))),
        }
    }
}

/// Stage values of one block plus their cached right-hand sides, stored
/// stage-major (`s` contiguous vectors of length `dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct StageBlock {
    pub t: f64,
    pub dt: f64,
    pub stages: usize,
    pub dim: usize,
    pub w: Vec<f64>,
    /// Rounding remainders of `w`; the carried stage values are `w + lo`.
    pub lo: Vec<f64>,
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
}

impl StageBlock {
    /// Block at base time `t` from explicit stage values; evaluates `F0`, `F1`.
    pub fn from_stages<P: SplitOdeProblem + ?Sized>(
        problem: &P,
        nodes: &[f64],
        t: f64,
        dt: f64,
        stages: &[Vec<f64>],
    ) -> Result<Self> {
        let s = nodes.len();
        let dim = problem.dimension();
        if stages.len() != s {
            return Err(Error::dims(format!("{s} stages"), stages.len()));
        }
        let mut w = Vec::with_capacity(s * dim);
        for st in stages {
            if st.len() != dim {
                return Err(Error::dims(dim, st.len()));
            }
            w.extend_from_slice(st);
        }
        let mut f0 = vec![0.0; s * dim];
        let mut f1 = vec![0.0; s * dim];
        for i in 0..s {
            let ti = t + nodes[i] * dt;
            let wi = &w[i * dim..(i + 1) * dim];
            problem.explicit_rhs(ti, wi, &mut f0[i * dim..(i + 1) * dim]);
            problem.implicit_rhs(ti, wi, &mut f1[i * dim..(i + 1) * dim]);
        }
        let block = StageBlock {
            t,
            dt,
            stages: s,
            dim,
            lo: vec![0.0; w.len()],
            w,
            f0,
            f1,
        };
        block.check_finite("starting stages")?;
        Ok(block)
    }

    pub fn stage(&self, i: usize) -> &[f64] {
        &self.w[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_stage(&self) -> &[f64] {
        self.stage(self.stages - 1)
    }

    /// Last stage including its rounding remainder.
    pub fn last_stage_value(&self) -> Vec<f64> {
        let n = self.dim;
        let lo = &self.lo[(self.stages - 1) * n..];
        self.last_stage()
            .iter()
            .zip(lo)
            .map(|(w, l)| w + l)
            .collect()
    }

    /// Time of the last stage, `t + Δt`.
    pub fn end_time(&self) -> f64 {
        self.t + self.dt
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if self
            .w
            .iter()
            .chain(&self.f0)
            .chain(&self.f1)
            .all(|x| x.is_finite())
        {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub newton_iterations: usize,
    /// Final Newton residual per stage (0 for explicit stages).
    pub stage_residuals: Vec<f64>,
}

/// Coefficients of one step variant: previous-block matrices `a0`, `a1` act
/// on `F0`, `F1` of the last block, strictly lower `b0`, `b1` on the current
/// one, and `implicit` names the parts carrying the diagonal `γ`.
#[derive(Debug, Clone)]
pub struct PeerStepper<'a> {
    tab: &'a MethodTableau,
    mode: Mode,
    a0: RealMatrix,
    a1: RealMatrix,
    b0: RealMatrix,
    b1: RealMatrix,
    newton: NewtonOptions,
}

/// `a + b` as a rounded sum and its exact rounding error.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Remainder of an implicit stage: the solve used `rhs` only, so the stage
/// misses `rhs_lo` and its own residual `w − h f − rhs`.
fn carry_remainder(lo: &mut [f64], out: &NewtonOutcome, h: f64, rhs: &[f64], rhs_lo: &[f64]) {
    for k in 0..lo.len() {
        lo[k] = rhs_lo[k] - ((out.w[k] - rhs[k]) - h * out.f[k]);
    }
}

fn strictly_lower(m: &RealMatrix) -> RealMatrix {
    RealMatrix::from_fn(
        m.rows(),
        m.cols(),
        |i, j| if j < i { m[(i, j)] } else { 0.0 },
    )
}

impl<'a> PeerStepper<'a> {
    pub fn new(tab: &'a MethodTableau, mode: Mode, newton: NewtonOptions) -> Self {
        let (a0, a1, b0, b1) = match mode {
            Mode::Imex => (
                tab.q_hat().clone(),
                tab.q().clone(),
                tab.r_hat().clone(),
                strictly_lower(tab.r()),
            ),
            Mode::Implicit => (
                tab.q().clone(),
                tab.q().clone(),
                strictly_lower(tab.r()),
                strictly_lower(tab.r()),
            ),
            Mode::Explicit => (
                tab.q_hat().clone(),
                tab.q_hat().clone(),
                tab.r_hat().clone(),
                tab.r_hat().clone(),
            ),
        };
        PeerStepper {
            tab,
            mode,
            a0,
            a1,
            b0,
            b1,
            newton,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Advances `prev` by one step of size `prev.dt`.
    pub fn step<P: SplitOdeProblem + ?Sized>(
        &self,
        problem: &P,
        prev: &StageBlock,
    ) -> Result<(StageBlock, StepStats)> {
        let s = self.tab.stages();
        let n = prev.dim;
        if prev.stages != s || n != problem.dimension() {
            return Err(Error::dims(
                format!("{s} stages of dimension {}", problem.dimension()),
                format!("{} stages of dimension {n}", prev.stages),
            ));
        }
        let dt = prev.dt;
        let t = prev.t + dt;
        let c = self.tab.nodes();
        let p = self.tab.p();
        let gamma = self.tab.gamma();
        let w_last = prev.last_stage();

        let mut next = StageBlock {
            t,
            dt,
            stages: s,
            dim: n,
            w: vec![0.0; s * n],
            lo: vec![0.0; s * n],
            f0: vec![0.0; s * n],
            f1: vec![0.0; s * n],
        };
        let mut stats = StepStats {
            newton_iterations: 0,
            stage_residuals: vec![0.0; s],
        };
        let lo_last = &prev.lo[(s - 1) * n..];
        let mut incr = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut rhs_lo = vec![0.0; n];
        for i in 0..s {
            // P w_{n−1} in difference form, exact for constants since Σ_j p_ij = 1.
            // The small increment is added to w_s with its rounding error kept:
            // constant increments would otherwise drift by an ulp per step.
            incr.copy_from_slice(lo_last);
            for j in 0..s - 1 {
                let pij = p[(i, j)];
                if pij != 0.0 {
                    let wj = prev.stage(j);
                    let lj = &prev.lo[j * n..(j + 1) * n];
                    for k in 0..n {
                        incr[k] += pij * ((wj[k] - w_last[k]) + (lj[k] - lo_last[k]));
                    }
                }
            }
            let mut axpy = |coef: f64, v: &[f64]| {
                if coef != 0.0 {
                    let a = dt * coef;
                    for k in 0..n {
                        incr[k] += a * v[k];
                    }
                }
            };
            for j in 0..s {
                axpy(self.a0[(i, j)], &prev.f0[j * n..(j + 1) * n]);
                axpy(self.a1[(i, j)], &prev.f1[j * n..(j + 1) * n]);
            }
            for j in 0..i {
                axpy(self.b0[(i, j)], &next.f0[j * n..(j + 1) * n]);
                axpy(self.b1[(i, j)], &next.f1[j * n..(j + 1) * n]);
            }
            for k in 0..n {
                (rhs[k], rhs_lo[k]) = two_sum(w_last[k], incr[k]);
            }

            let ti = t + c[i] * dt;
            let range = i * n..(i + 1) * n;
            match self.mode {
                Mode::Explicit => {
                    next.w[range.clone()].copy_from_slice(&rhs);
                    next.lo[range.clone()].copy_from_slice(&rhs_lo);
                    let (w, f0, f1) = (&next.w[range.clone()], &mut next.f0, &mut next.f1);
                    problem.explicit_rhs(ti, w, &mut f0[range.clone()]);
                    problem.implicit_rhs(ti, w, &mut f1[range.clone()]);
                }
                Mode::Imex => {
                    let out = newton_solve(
                        i + 1,
                        dt * gamma,
                        &rhs,
                        prev.stage(i).to_vec(),
                        |w, out| problem.implicit_rhs(ti, w, out),
                        |w| problem.implicit_jacobian(ti, w),
                        &self.newton,
                    )?;
                    stats.newton_iterations += out.iterations;
                    stats.stage_residuals[i] = *out.residuals.last().unwrap_or(&0.0);
                    carry_remainder(&mut next.lo[range.clone()], &out, dt * gamma, &rhs, &rhs_lo);
                    next.w[range.clone()].copy_from_slice(&out.w);
                    next.f1[range.clone()].copy_from_slice(&out.f);
                    problem.explicit_rhs(ti, &out.w, &mut next.f0[range.clone()]);
                }
                Mode::Implicit => {
                    let mut f0_tmp = vec![0.0; n];
                    let out = newton_solve(
                        i + 1,
                        dt * gamma,
                        &rhs,
                        prev.stage(i).to_vec(),
                        |w, out| {
                            problem.explicit_rhs(ti, w, &mut f0_tmp);
                            problem.implicit_rhs(ti, w, out);
                            for k in 0..n {
                                out[k] += f0_tmp[k];
                            }
                        },
                        |w| {
                            let j1 = problem.implicit_jacobian(ti, w);
                            match problem.explicit_jacobian(ti, w) {
                                Some(j0) => j1.clone().sum(j0).unwrap_or(j1),
                                None => j1,
                            }
                        },
                        &self.newton,
                    )?;
                    stats.newton_iterations += out.iterations;
                    stats.stage_residuals[i] = *out.residuals.last().unwrap_or(&0.0);
                    carry_remainder(&mut next.lo[range.clone()], &out, dt * gamma, &rhs, &rhs_lo);
                    next.w[range.clone()].copy_from_slice(&out.w);
                    problem.explicit_rhs(ti, &out.w, &mut next.f0[range.clone()]);
                    problem.implicit_rhs(ti, &out.w, &mut next.f1[range.clone()]);
                }
            }
        }
        next.check_finite("stage values")?;
        Ok((next, stats))
    }
}

pub fn imex_step<P: SplitOdeProblem + ?Sized>(
    tab: &MethodTableau,
    problem: &P,
    block: &StageBlock,
    options: &NewtonOptions,
) -> Result<StageBlock> {
    Ok(PeerStepper::new(tab, Mode::Imex, *options)
        .step(problem, block)?
        .0)
}

pub fn implicit_step<P: SplitOdeProblem + ?Sized>(
    tab: &MethodTableau,
    problem: &P,
    block: &StageBlock,
    options: &NewtonOptions,
) -> Result<StageBlock> {
    Ok(PeerStepper::new(tab, Mode::Implicit, *options)
        .step(problem, block)?
        .0)
}

pub fn explicit_step<P: SplitOdeProblem + ?Sized>(
    tab: &MethodTableau,
    problem: &P,
    block: &StageBlock,
) -> Result<StageBlock> {
    Ok(
        PeerStepper::new(tab, Mode::Explicit, NewtonOptions::default())
            .step(problem, block)?
            .0,
    )
}

// ---------------------------------------------------------------------------
// Starting values
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartOptions {
    /// Substeps per `Δt` for the one-step starter (before the stiffness cap).
    pub substeps_per_dt: usize,
    /// Combine runs with `h` and `h/2` to cancel the leading error term.
    /// `None` enables it for `s ≥ 4`.
    pub richardson: Option<bool>,
    /// Ignore `exact` even if the problem provides it.
    pub force_numerical: bool,
}

impl Default for StartOptions {
    fn default() -> Self {
        StartOptions {
            substeps_per_dt: 50,
            richardson: None,
            force_numerical: false,
        }
    }
}

fn full_rhs<P: SplitOdeProblem + ?Sized>(
    problem: &P,
    t: f64,
    u: &[f64],
    out: &mut [f64],
    tmp: &mut [f64],
) {
    problem.explicit_rhs(t, u, out);
    problem.implicit_rhs(t, u, tmp);
    for (o, x) in out.iter_mut().zip(tmp.iter()) {
        *o += x;
    }
}

/// Classical RK4 on `u' = F0 + F1` from `t_a` to `t_b` with `n` equal substeps.
pub fn rk4<P: SplitOdeProblem + ?Sized>(problem: &P, t_a: f64, t_b: f64, u: &mut [f64], n: usize) {
    let d = u.len();
    let h = (t_b - t_a) / n as f64;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    let mut y = vec![0.0; d];
    for step in 0..n {
        let t = t_a + step as f64 * h;
        full_rhs(problem, t, u, &mut k1, &mut tmp);
        for i in 0..d {
            y[i] = u[i] + 0.5 * h * k1[i];
        }
        full_rhs(problem, t + 0.5 * h, &y, &mut k2, &mut tmp);
        for i in 0..d {
            y[i] = u[i] + 0.5 * h * k2[i];
        }
        full_rhs(problem, t + 0.5 * h, &y, &mut k3, &mut tmp);
        for i in 0..d {
            y[i] = u[i] + h * k3[i];
        }
        full_rhs(problem, t + h, &y, &mut k4, &mut tmp);
        for i in 0..d {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Whole steps the starting block sits after `t0`: nodes left of the block
/// base time must not reach before `t0`, because stiff parts make backward
/// integration unstable.
pub fn start_offset(nodes: &[f64]) -> usize {
    let c_min = nodes.iter().copied().fold(f64::INFINITY, f64::min);
    if c_min >= 0.0 {
        0
    } else {
        (-c_min).ceil() as usize
    }
}

/// Starting stages sampled from `u` at forward times only.
fn numerical_stages<P: SplitOdeProblem + ?Sized>(
    problem: &P,
    times: &[f64],
    h_max: f64,
) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut u = problem.initial_state();
    let mut t = problem.t0();
    let mut out = vec![Vec::new(); times.len()];
    for idx in order {
        let target = times[idx];
        let span = target - t;
        if span > 0.0 {
            let n = (span / h_max).ceil().max(1.0) as usize;
            rk4(problem, t, target, &mut u, n);
            t = target;
        }
        out[idx] = u.clone();
    }
    out
}

/// Starting block: exact values when available, else a fine explicit
/// one-step integration. Returns the block and its offset in steps.
pub fn generate_starting_stages<P: SplitOdeProblem + ?Sized>(
    tab: &MethodTableau,
    problem: &P,
    dt: f64,
    opts: &StartOptions,
) -> Result<(StageBlock, usize)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "step size must be positive, got {dt}"
        )));
    }
    let c = tab.nodes();
    let t0 = problem.t0();
    if !opts.force_numerical {
        if let Some(stages) = c
            .iter()
            .map(|ci| problem.exact(t0 + ci * dt))
            .collect::<Option<Vec<_>>>()
        {
            return Ok((StageBlock::from_stages(problem, c, t0, dt, &stages)?, 0));
        }
    }
    let k = start_offset(c);
    let base = t0 + k as f64 * dt;
    let times: Vec<f64> = c.iter().map(|ci| base + ci * dt).collect();
    let mut h = dt / opts.substeps_per_dt.max(1) as f64;
    if let Some(l) = problem.stiffness_bound() {
        if l > 0.0 {
            h = h.min(0.5 / l);
        }
    }
    let richardson = opts.richardson.unwrap_or(tab.stages() >= 4);
    let stages = if richardson {
        let coarse = numerical_stages(problem, &times, h);
        let fine = numerical_stages(problem, &times, 0.5 * h);
        fine.iter()
            .zip(&coarse)
            .map(|(f, c)| {
                f.iter()
                    .zip(c)
                    .map(|(a, b)| (16.0 * a - b) / 15.0)
                    .collect()
            })
            .collect()
    } else {
        numerical_stages(problem, &times, h)
    };
    Ok((StageBlock::from_stages(problem, c, base, dt, &stages)?, k))
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub mode: Mode,
    pub newton: NewtonOptions,
    pub start: StartOptions,
    /// Record one trace row per step.
    pub trace: bool,
    /// Relative tolerance for `(t_end − t0)/Δt` being an integer.
    pub step_count_rtol: f64,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        IntegrationOptions {
            mode: Mode::Imex,
            newton: NewtonOptions::default(),
            start: StartOptions::default(),
            trace: false,
            step_count_rtol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub newton_iterations: usize,
    pub stage_residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IntegrationOutcome {
    pub block: StageBlock,
    /// Approximation of `u(t_end)`.
    pub state: Vec<f64>,
    pub t_end: f64,
    pub steps: usize,
    pub newton_iterations: usize,
    pub max_stage_residual: f64,
    pub trace: Vec<TraceRow>,
}

impl IntegrationOutcome {
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let s = self.block.stages;
        let cols: Vec<String> = (1..=s).map(|i| format!("residual_stage{i}")).collect();
        writeln!(w, "step,t,newton_iterations,{}", cols.join(","))?;
        for row in &self.trace {
            let res: Vec<String> = row
                .stage_residuals
                .iter()
                .map(|r| format!("{r:.16e}"))
                .collect();
            writeln!(
                w,
                "{},{:.16e},{},{}",
                row.step,
                row.t,
                row.newton_iterations,
                res.join(",")
            )?;
        }
        Ok(())
    }
}

/// `N` with `t_end = t0 + N dt`, or an error if `dt` does not divide the interval.
pub fn step_count(t0: f64, t_end: f64, dt: f64, rtol: f64) -> Result<usize> {
    let ratio = (t_end - t0) / dt;
    let n = ratio.round();
    if !(dt > 0.0) || n < 0.0 || (ratio - n).abs() > rtol * n.max(1.0) {
        return Err(Error::StepSizeMismatch { dt, t0, t_end });
    }
    Ok(n as usize)
}

/// Integrates `problem` from its `t0` to its `t_end` with constant `dt`.
pub fn integrate<P: SplitOdeProblem + ?Sized>(
    tab: &MethodTableau,
    problem: &P,
    dt: f64,
    opts: &IntegrationOptions,
) -> Result<IntegrationOutcome> {
    opts.newton.validate()?;
    let t0 = problem.t0();
    let t_end = problem.t_end();
    let n = step_count(t0, t_end, dt, opts.step_count_rtol)?;
    if n == 0 {
        let (block, _) = generate_starting_stages(tab, problem, dt, &opts.start)?;
        return Ok(IntegrationOutcome {
            block,
            state: problem.initial_state(),
            t_end,
            steps: 0,
            newton_iterations: 0,
            max_stage_residual: 0.0,
            trace: Vec::new(),
        });
    }
    let (mut block, offset) = generate_starting_stages(tab, problem, dt, &opts.start)?;
    if n < offset + 1 {
        return Err(Error::InvalidSpec(format!(
            "{n} steps are too few for a starting block {offset} steps after t0"
        )));
    }
    let steps = n - 1 - offset;
    let stepper = PeerStepper::new(tab, opts.mode, opts.newton);
    let mut trace = Vec::new();
    let mut newton_iterations = 0;
    let mut max_stage_residual = 0.0f64;
    for k in 0..steps {
        let (next, stats) = stepper
            .step(problem, &block)
            .map_err(|e| Error::StepFailed {
                step: k + 1,
                source: Box::new(e),
            })?;
        block = next;
        // repeated `t + dt` drifts by an ulp per step; pin to the grid
        block.t = t0 + (offset + k + 1) as f64 * dt;
        newton_iterations += stats.newton_iterations;
        max_stage_residual = stats
            .stage_residuals
            .iter()
            .copied()
            .fold(max_stage_residual, f64::max);
        if opts.trace {
            trace.push(TraceRow {
                step: k + 1,
                t: block.end_time(),
                newton_iterations: stats.newton_iterations,
                stage_residuals: stats.stage_residuals,
            });
        }
    }
    Ok(IntegrationOutcome {
        state: block.last_stage_value(),
        block,
        t_end,
        steps,
        newton_iterations,
        max_stage_residual,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Closure-backed problems
// ---------------------------------------------------------------------------

type RhsFn = Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
type JacFn = Box<dyn Fn(f64, &[f64]) -> Jacobian + Send + Sync>;
type ExactFn = Box<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

/// A [`SplitOdeProblem`] assembled from closures.
pub struct ClosureProblem {
    pub dim: usize,
    pub t0: f64,
    pub t_end: f64,
    pub u0: Vec<f64>,
    pub f0: RhsFn,
    pub f1: RhsFn,
    pub j1: JacFn,
    pub j0: Option<JacFn>,
    pub exact: Option<ExactFn>,
    pub stiffness: Option<f64>,
}

impl ClosureProblem {
    /// `u' = 0 + 0` on `[t0, t_end]`.
    pub fn zero(u0: Vec<f64>, t0: f64, t_end: f64) -> Self {
        let dim = u0.len();
        ClosureProblem {
            dim,
            t0,
            t_end,
            u0,
            f0: Box::new(|_, _, out| out.fill(0.0)),
            f1: Box::new(|_, _, out| out.fill(0.0)),
            j1: Box::new(move |_, _| Jacobian::Zero(dim)),
            j0: None,
            exact: None,
            stiffness: None,
        }
    }

    /// Split Dahlquist `y' = λ0 y + λ1 y` for complex `λ`, as a real system
    /// in `(Re y, Im y)`.
    pub fn dahlquist(
        l0: num_complex::Complex64,
        l1: num_complex::Complex64,
        y0: num_complex::Complex64,
    ) -> Self {
        let mult = |l: num_complex::Complex64| {
            move |_: f64, u: &[f64], out: &mut [f64]| {
                out[0] = l.re * u[0] - l.im * u[1];
                out[1] = l.im * u[0] + l.re * u[1];
            }
        };
        let jac = |l: num_complex::Complex64| {
            move |_: f64, _: &[f64]| {
                Jacobian::Dense(RealMatrix::from_rows(&[
                    vec![l.re, -l.im],
                    vec![l.im, l.re],
                ]))
            }
        };
        ClosureProblem {
            dim: 2,
            t0: 0.0,
            t_end: 1.0,
            u0: vec![y0.re, y0.im],
            f0: Box::new(mult(l0)),
            f1: Box::new(mult(l1)),
            j1: Box::new(jac(l1)),
            j0: Some(Box::new(jac(l0))),
            exact: None,
            stiffness: Some(l0.norm() + l1.norm()),
        }
    }
}

impl SplitOdeProblem for ClosureProblem {
    fn dimension(&self) -> usize {
        self.dim
    }
    fn t0(&self) -> f64 {
        self.t0
    }
    fn t_end(&self) -> f64 {
        self.t_end
    }
    fn initial_state(&self) -> Vec<f64> {
        self.u0.clone()
    }
    fn explicit_rhs(&self, t: f64, u: &[f64], out: &mut [f64]) {
        (self.f0)(t, u, out)
    }
    fn implicit_rhs(&self, t: f64, u: &[f64], out: &mut [f64]) {
        (self.f1)(t, u, out)
    }
    fn implicit_jacobian(&self, t: f64, u: &[f64]) -> Jacobian {
        (self.j1)(t, u)
    }
    fn explicit_jacobian(&self, t: f64, u: &[f64]) -> Option<Jacobian> {
        self.j0.as_ref().map(|j| j(t, u))
    }
    fn exact(&self, t: f64) -> Option<Vec<f64>> {
        self.exact.as_ref().map(|e| e(t))
    }
    fn stiffness_bound(&self) -> Option<f64> {
        self.stiffness
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::builtin;
    use approx::assert_relative_eq;

    #[test]
    fn newton_on_zero_rhs_takes_one_iteration() {
        let rhs = vec![0.3, -2.0];
        let out = newton_solve(
            1,
            0.1,
            &rhs,
            vec![5.0, 5.0],
            |_, f| f.fill(0.0),
            |_| Jacobian::Zero(2),
            &NewtonOptions::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        for (a, b) in out.w.iter().zip(&rhs) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
        }
    }

    #[test]
    fn newton_stiff_linear_scalar_closed_form() {
        let lambda = -1e6;
        let h = 0.01 * 0.4;
        let rhs = [0.75];
        let out = newton_solve(
            1,
            h,
            &rhs,
            vec![0.0],
            |w, f| f[0] = lambda * w[0],
            |_| Jacobian::Dense(RealMatrix::from_rows(&[vec![lambda]])),
            &NewtonOptions::default(),
        )
        .unwrap();
        let exact = 0.75 / (1.0 - h * lambda);
        assert_relative_eq!(out.w[0], exact, max_relative = 1e-13);
        assert!(out.iterations <= 2);
    }

    #[test]
    fn newton_cubic_contracts_quadratically() {
        let out = newton_solve(
            1,
            1.0,
            &[1.0],
            vec![1.0],
            |w, f| f[0] = -w[0].powi(3),
            |w| Jacobian::Dense(RealMatrix::from_rows(&[vec![-3.0 * w[0] * w[0]]])),
            &NewtonOptions {
                abs_tol: 1e-15,
                rel_tol: 1e-16,
                ..Default::default()
            },
        )
        .unwrap();
        assert_relative_eq!(out.w[0], 0.682327803828019, max_relative = 1e-14);
        let r = &out.residuals;
        for k in 1..r.len() - 1 {
            if r[k] < 1e-2 && r[k + 1] > 1e-14 {
                assert!(r[k + 1] / (r[k] * r[k]) < 10.0, "{r:?}");
            }
        }
    }

    #[test]
    fn block_and_dense_newton_matrices_agree() {
        let data = vec![1.0, 2.0, -3.0, 4.0, 0.5, -1.0, 2.0, 0.25];
        let jb = Jacobian::BlockDiagonal { block: 2, data };
        let jd = Jacobian::Dense(jb.to_dense());
        let mut x1 = vec![1.0, -2.0, 3.0, 0.5];
        let mut x2 = x1.clone();
        NewtonMatrix::factor(&jb, 0.3)
            .unwrap()
            .solve_in_place(&mut x1);
        NewtonMatrix::factor(&jd, 0.3)
            .unwrap()
            .solve_in_place(&mut x2);
        for (a, b) in x1.iter().zip(&x2) {
            assert_relative_eq!(a, b, max_relative = 1e-13);
        }
        // block sum stays block-structured
        let s = jb.clone().sum(jb.clone()).unwrap();
        assert!(matches!(s, Jacobian::BlockDiagonal { .. }));
        assert_eq!(s.apply(&[1.0, 0.0, 0.0, 0.0]), vec![2.0, -6.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_solution_is_preserved() {
        for name in crate::methods::BUILTIN_NAMES {
            let t = builtin(name).unwrap();
            let p = ClosureProblem::zero(vec![1.0, -3.5], 0.0, 1.0);
            let out = integrate(&t, &p, 0.1, &IntegrationOptions::default()).unwrap();
            assert_eq!(out.state, vec![1.0, -3.5]);
        }
    }

    #[test]
    fn zero_steps_return_start() {
        let t = builtin("imex-peer2s").unwrap();
        let p = ClosureProblem::zero(vec![2.0], 0.5, 0.5);
        let out = integrate(&t, &p, 0.1, &IntegrationOptions::default()).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.state, vec![2.0]);
    }

    #[test]
    fn step_count_rejects_non_divisors() {
        assert_eq!(step_count(0.0, 5.0, 5.0 / 160.0, 1e-9).unwrap(), 160);
        assert_eq!(step_count(0.0, 1.0, 2.5e-5, 1e-9).unwrap(), 40000);
        assert!(step_count(0.0, 1.0, 0.3, 1e-9).is_err());
    }

    #[test]
    fn start_offset_for_negative_nodes() {
        assert_eq!(start_offset(&[0.2, 1.0]), 0);
        assert_eq!(start_offset(&[-0.93, 0.2, 1.0]), 1);
    }

    #[test]
    fn numerical_start_matches_exponential() {
        let t = builtin("imex-peer4s").unwrap();
        let mut p = ClosureProblem::zero(vec![1.0], 0.0, 1.0);
        p.f0 = Box::new(|_, u, out| out[0] = -2.0 * u[0]);
        let dt = 0.01;
        let (block, k) = generate_starting_stages(&t, &p, dt, &StartOptions::default()).unwrap();
        assert_eq!(k, 1);
        for (i, c) in t.nodes().iter().enumerate() {
            let exact = (-2.0 * (dt + c * dt)).exp();
            assert!((block.stage(i)[0] - exact).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_increments_do_not_drift() {
        // u' = 1 + 1: every step adds the same increment, whose rounding
        // would otherwise pile up to about 1e-11 here
        for t in crate::methods::builtins() {
            let mut p = ClosureProblem::zero(vec![0.1], 0.0, 1.0);
            p.f0 = Box::new(|_, _, out| out[0] = 1.0);
            p.f1 = Box::new(|_, _, out| out[0] = 1.0);
            p.exact = Some(Box::new(|t| vec![0.1 + 2.0 * t]));
            let out = integrate(&t, &p, 2e-5, &IntegrationOptions::default()).unwrap();
            assert!(
                (out.state[0] - 2.1).abs() <= 1e-13,
                "{}: {:e}",
                t.label(),
                out.state[0] - 2.1
            );
        }
    }
}
