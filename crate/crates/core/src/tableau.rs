//! Coefficient sets of s-stage IMEX-Peer methods.
//!
//! A method is fixed by its nodes `c` (with `c_s = 1`), the pre-consistent
//! matrix `P`, the singly diagonally implicit `R` (diagonal `gamma`) and the
//! strictly lower triangular extrapolation matrix `S2`. Everything else is
//! derived:
//!
//! * `Q = (C V0 − P (C − I) V1 − R V0 D)(V1 D)⁻¹` gives stage order s,
//! * `S1 = (I − S2) V0 V1⁻¹` gives extrapolation order s,
//! * `Q̂ = Q + R S1` and `R̂ = R S2` define the explicit companion.
//!
//! Stage vectors are never expanded into Kronecker products; all s×s
//! matrices act block-wise on the s stage vectors.

use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{eigenvalues, lu_solve, null_space, spectral_radius, RealMatrix};
use crate::stability::{is_a_stable, AStabilitySampling};

pub const STAGE_ORDER_TOL: f64 = 1e-10;
pub const SUPERCONVERGENCE_TOL: f64 = 1e-9;
pub const PRECONSISTENCY_TOL: f64 = 1e-12;
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-9;
/// Rank threshold for the left null vector of `I − Pᵀ`.
pub const NULL_SPACE_RTOL: f64 = 1e-8;

const MIN_STAGES: usize = 2;
const MAX_STAGES: usize = 4;

/// The free coefficients of a method, exactly what the text format stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TableauParams {
    pub label: String,
    pub c: Vec<f64>,
    pub gamma: f64,
    pub p: RealMatrix,
    /// Strictly lower part of `R`; the diagonal is `gamma`.
    pub r_strict: RealMatrix,
    pub s2: RealMatrix,
}

#[derive(Debug, Clone)]
pub struct MethodTableau {
    params: TableauParams,
    r: RealMatrix,
    q: RealMatrix,
    s1: RealMatrix,
    q_hat: RealMatrix,
    r_hat: RealMatrix,
    v: Option<Vec<f64>>,
}

impl TableauParams {
    /// Validates the structural invariants and derives the full tableau.
    pub fn build(self) -> Result<MethodTableau> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidTableau(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        self.build_any_gamma()
    }

    /// Like [`TableauParams::build`] but accepts `gamma <= 0`. Only useful for
    /// constructing deliberately unstable control tableaus.
    pub fn build_any_gamma(self) -> Result<MethodTableau> {
        self.validate_structure()?;
        let s = self.c.len();
        let mut r = self.r_strict.clone();
        for i in 0..s {
            r[(i, i)] = self.gamma;
        }
        let q = compute_q(&self.p, &r, &self.c)?;
        let s1 = compute_s1(&self.s2, &self.c)?;
        let q_hat = &q + &(&r * &s1);
        let r_hat = &r * &self.s2;
        let v = left_eigvec(&self.p).ok();
        Ok(MethodTableau {
            params: self,
            r,
            q,
            s1,
            q_hat,
            r_hat,
            v,
        })
    }

    fn validate_structure(&self) -> Result<()> {
        let s = self.c.len();
        if !(MIN_STAGES..=MAX_STAGES).contains(&s) {
            return Err(Error::InvalidTableau(format!(
                "stage count must be in {MIN_STAGES}..={MAX_STAGES}, got {s}"
            )));
        }
        for (name, m) in [("P", &self.p), ("R", &self.r_strict), ("S2", &self.s2)] {
            if m.rows() != s || m.cols() != s {
                return Err(Error::InvalidTableau(format!(
                    "{name} must be {s}x{s}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::InvalidTableau(format!(
                    "{name} has non-finite entries"
                )));
            }
        }
        if self.c.iter().any(|x| !x.is_finite()) || !self.gamma.is_finite() {
            return Err(Error::InvalidTableau("non-finite node or gamma".into()));
        }
        if (self.c[s - 1] - 1.0).abs() > 1e-14 {
            return Err(Error::InvalidTableau(format!(
                "last node must equal 1, got {}",
                self.c[s - 1]
            )));
        }
        for i in 0..s {
            for j in i + 1..s {
                if (self.c[i] - self.c[j]).abs() <= 1e-12 {
                    return Err(Error::InvalidTableau(format!(
                        "nodes c{} and c{} coincide ({})",
                        i + 1,
                        j + 1,
                        self.c[i]
                    )));
                }
            }
        }
        for (name, m) in [("R", &self.r_strict), ("S2", &self.s2)] {
            for i in 0..s {
                for j in i..s {
                    if m[(i, j)] != 0.0 {
                        return Err(Error::InvalidTableau(format!(
                            "{name} must be strictly lower triangular, entry ({},{}) = {}",
                            i + 1,
                            j + 1,
                            m[(i, j)]
                        )));
                    }
                }
            }
        }
        let pe_defect = row_sum_defect(&self.p);
        if pe_defect > PRECONSISTENCY_TOL {
            return Err(Error::InvalidTableau(format!(
                "P is not pre-consistent: max |Pe - e| = {pe_defect:e}"
            )));
        }
        Ok(())
    }
}

fn row_sum_defect(p: &RealMatrix) -> f64 {
    (0..p.rows())
        .map(|i| (p.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

impl MethodTableau {
    pub fn label(&self) -> &str {
        &self.params.label
    }
    pub fn stages(&self) -> usize {
        self.params.c.len()
    }
    pub fn nodes(&self) -> &[f64] {
        &self.params.c
    }
    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }
    pub fn p(&self) -> &RealMatrix {
        &self.params.p
    }
    pub fn q(&self) -> &RealMatrix {
        &self.q
    }
    pub fn r(&self) -> &RealMatrix {
        &self.r
    }
    pub fn s1(&self) -> &RealMatrix {
        &self.s1
    }
    pub fn s2(&self) -> &RealMatrix {
        &self.params.s2
    }
    pub fn q_hat(&self) -> &RealMatrix {
        &self.q_hat
    }
    pub fn r_hat(&self) -> &RealMatrix {
        &self.r_hat
    }
    /// Normalized left eigenvector of `P` for eigenvalue 1, if it is simple.
    pub fn v(&self) -> Option<&[f64]> {
        self.v.as_deref()
    }
    pub fn params(&self) -> &TableauParams {
        &self.params
    }

    /// Same method with another diagonal `gamma`; `Q` is re-derived.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        TableauParams {
            gamma,
            ..self.params.clone()
        }
        .build_any_gamma()
    }

    pub fn with_s2(&self, s2: RealMatrix) -> Result<Self> {
        TableauParams {
            s2,
            ..self.params.clone()
        }
        .build_any_gamma()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.params.label = label.into();
        self
    }

    /// Defect vector `d_j`, see [`defect_d`].
    pub fn defect(&self, j: usize) -> Vec<f64> {
        defect_d(j, self)
    }

    /// `R⁻¹Q`, the stability matrix of the implicit method at infinity.
    pub fn r_inv_q(&self) -> Result<RealMatrix> {
        lu_solve(&self.r, &self.q)
    }
}

fn powers(x: &[f64], j: usize) -> Vec<f64> {
    // powi(0) == 1 for every x, including 0
    x.iter().map(|&xi| xi.powi(j as i32)).collect()
}

fn shifted_nodes(c: &[f64]) -> Vec<f64> {
    c.iter().map(|ci| ci - 1.0).collect()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

pub fn norm_2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `V0 = (c_i^{j−1})`, `V1 = ((c_i − 1)^{j−1})` with `0⁰ = 1`.
pub fn vandermonde_pair(c: &[f64]) -> (RealMatrix, RealMatrix) {
    let s = c.len();
    let v0 = RealMatrix::from_fn(s, s, |i, j| c[i].powi(j as i32));
    let v1 = RealMatrix::from_fn(s, s, |i, j| (c[i] - 1.0).powi(j as i32));
    (v0, v1)
}

/// The unique `Q` giving stage order s for the given `P`, `R` and nodes.
pub fn compute_q(p: &RealMatrix, r: &RealMatrix, c: &[f64]) -> Result<RealMatrix> {
    let s = c.len();
    let (v0, v1) = vandermonde_pair(c);
    let cm = RealMatrix::diag(c);
    let cm_minus_i = RealMatrix::diag(&shifted_nodes(c));
    let d = RealMatrix::diag(&(1..=s).map(|k| k as f64).collect::<Vec<_>>());
    let lhs = &(&(&cm * &v0) - &(&(p * &cm_minus_i) * &v1)) - &(&(r * &v0) * &d);
    let v1d = &v1 * &d;
    // Q (V1 D) = lhs  <=>  (V1 D)ᵀ Qᵀ = lhsᵀ
    Ok(lu_solve(&v1d.transpose(), &lhs.transpose())?.transpose())
}

/// `d_j = (1/j!)(c^j − P(c−e)^j − j Q (c−e)^{j−1} − j R c^{j−1})`.
pub fn defect_d(j: usize, tab: &MethodTableau) -> Vec<f64> {
    assert!(j >= 1, "defect index starts at 1");
    let c = tab.nodes();
    let cm1 = shifted_nodes(c);
    let cj = powers(c, j);
    let p_term = tab.p().mul_vec(&powers(&cm1, j));
    let q_term = tab.q().mul_vec(&powers(&cm1, j - 1));
    let r_term = tab.r().mul_vec(&powers(c, j - 1));
    let jf = j as f64;
    let scale = 1.0 / factorial(j);
    (0..c.len())
        .map(|i| scale * (cj[i] - p_term[i] - jf * q_term[i] - jf * r_term[i]))
        .collect()
}

/// `S1 = (I − S2) V0 V1⁻¹`.
pub fn compute_s1(s2: &RealMatrix, c: &[f64]) -> Result<RealMatrix> {
    let s = c.len();
    let (v0, v1) = vandermonde_pair(c);
    let lhs = &(&RealMatrix::identity(s) - s2) * &v0;
    // S1 V1 = lhs
    Ok(lu_solve(&v1.transpose(), &lhs.transpose())?.transpose())
}

/// Residual of the extrapolation condition `(I − S2)c^j − S1(c−e)^j` for one `j`.
pub fn extrapolation_residual(tab: &MethodTableau, j: usize) -> Vec<f64> {
    let s = tab.stages();
    let c = tab.nodes();
    let i_minus_s2 = &RealMatrix::identity(s) - tab.s2();
    let a = i_minus_s2.mul_vec(&powers(c, j));
    let b = tab.s1().mul_vec(&powers(&shifted_nodes(c), j));
    a.iter().zip(&b).map(|(x, y)| x - y).collect()
}

/// `l_s = (1/s!)((I − S2)c^s − S1(c−e)^s)`.
pub fn extrap_defect_l(tab: &MethodTableau) -> Vec<f64> {
    let s = tab.stages();
    let scale = 1.0 / factorial(s);
    extrapolation_residual(tab, s)
        .into_iter()
        .map(|x| scale * x)
        .collect()
}

/// Left eigenvector of `P` for eigenvalue 1, normalized by `vᵀe = 1`.
pub fn left_eigvec(p: &RealMatrix) -> Result<Vec<f64>> {
    let s = p.rows();
    let a = &RealMatrix::identity(s) - &p.transpose();
    let (rank, basis) = null_space(&a, NULL_SPACE_RTOL);
    if s - rank != 1 {
        return Err(Error::EigenvalueOneNotSimple { nullity: s - rank });
    }
    let raw = &basis[0];
    let sum: f64 = raw.iter().sum();
    if sum.abs() < 1e-12 * norm_inf(raw) {
        return Err(Error::InvalidTableau(
            "left null vector of I - Pᵀ is orthogonal to e".into(),
        ));
    }
    Ok(raw.iter().map(|x| x / sum).collect())
}

/// Nodes outside the recommended design ranges, `(0,1]` for s = 2, 3 and
/// `(−1,1]` for s = 4. Advisory only.
pub fn node_warnings(tab: &MethodTableau) -> Vec<String> {
    let lower = if tab.stages() >= 4 { -1.0 } else { 0.0 };
    tab.nodes()
        .iter()
        .enumerate()
        .filter(|(_, &c)| !(c > lower && c <= 1.0))
        .map(|(i, c)| format!("node c{} = {c} outside ({lower}, 1]", i + 1))
        .collect()
}

#[derive(Debug, Clone)]
pub struct CertificationReport {
    pub label: String,
    pub stages: usize,
    /// `‖d_j‖_∞` for `j = 1..=s+1`.
    pub stage_order_defects: Vec<f64>,
    /// `max_{0≤j<s} ‖(I − S2)c^j − S1(c−e)^j‖_∞`.
    pub extrapolation_defect: f64,
    pub preconsistency_defect: f64,
    /// `|vᵀ d_{s+1}|`; infinite when `v` does not exist.
    pub superconv_implicit: f64,
    /// `|vᵀ R l_s|`; infinite when `v` does not exist.
    pub superconv_explicit: f64,
    pub v: Option<Vec<f64>>,
    pub p_eigenvalues: Vec<Complex64>,
    pub zero_stable: bool,
    pub optimally_zero_stable: bool,
    pub a_stable: bool,
    /// Worst sampled point of the A-stability check; `None` means `z = ∞`.
    pub a_stability_worst_z: Option<Complex64>,
    pub a_stability_worst_rho: f64,
    pub rho_r_inv_q: f64,
    /// `‖d_{s+1}‖₂`
    pub c_im: f64,
    /// `‖R l_s‖₂`
    pub c_ex: f64,
    /// `‖P^{s−1} d_{s+1}‖_∞`
    pub p_power_defect: f64,
    pub node_warnings: Vec<String>,
}

/// Norm used for the error constants `c_im` and `c_ex`.
pub const ERROR_CONSTANT_NORM: &str = "euclidean";

impl CertificationReport {
    pub fn stage_order_ok(&self) -> bool {
        self.stage_order_defects[..self.stages]
            .iter()
            .all(|&d| d < STAGE_ORDER_TOL)
    }

    pub fn superconvergent(&self) -> bool {
        self.superconv_implicit < SUPERCONVERGENCE_TOL
            && self.superconv_explicit < SUPERCONVERGENCE_TOL
    }

    /// Names of the checks that did not pass.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.preconsistency_defect > PRECONSISTENCY_TOL {
            out.push("pre-consistency");
        }
        if !self.stage_order_ok() {
            out.push("stage order");
        }
        if self.extrapolation_defect > 1e-11 {
            out.push("extrapolation order");
        }
        if self.superconv_implicit >= SUPERCONVERGENCE_TOL {
            out.push("super-convergence (implicit)");
        }
        if self.superconv_explicit >= SUPERCONVERGENCE_TOL {
            out.push("super-convergence (explicit)");
        }
        if !self.zero_stable {
            out.push("zero-stability");
        }
        if !self.a_stable {
            out.push("A-stability");
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// `(name, value)` rows for CSV export.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("label".to_string(), self.label.clone()),
            ("stages".to_string(), self.stages.to_string()),
        ];
        for (j, d) in self.stage_order_defects.iter().enumerate() {
            rows.push((format!("defect_d{}_inf", j + 1), fmt_f64(*d)));
        }
        let mut push = |k: &str, v: String| rows.push((k.to_string(), v));
        push("extrapolation_defect", fmt_f64(self.extrapolation_defect));
        push("preconsistency_defect", fmt_f64(self.preconsistency_defect));
        push("superconv_implicit", fmt_f64(self.superconv_implicit));
        push("superconv_explicit", fmt_f64(self.superconv_explicit));
        push("zero_stable", self.zero_stable.to_string());
        push(
            "optimally_zero_stable",
            self.optimally_zero_stable.to_string(),
        );
        push("a_stable", self.a_stable.to_string());
        push("a_stability_worst_rho", fmt_f64(self.a_stability_worst_rho));
        push("rho_r_inv_q", fmt_f64(self.rho_r_inv_q));
        push("c_im", fmt_f64(self.c_im));
        push("c_ex", fmt_f64(self.c_ex));
        push("error_constant_norm", ERROR_CONSTANT_NORM.to_string());
        push("p_power_defect", fmt_f64(self.p_power_defect));
        push("passed", self.passed().to_string());
        rows
    }
}

impl fmt::Display for CertificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        let complex = |z: Complex64| {
            let sign = if z.im.is_sign_negative() { '-' } else { '+' };
            format!("{}{sign}{}i", fmt_f64(z.re), fmt_f64(z.im.abs()))
        };
        let max_defect = self.stage_order_defects[..self.stages]
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        writeln!(f, "method {} (s = {})", self.label, self.stages)?;
        writeln!(
            f,
            "  stage order s       max ||d_j||_inf, j<=s = {}  [{}]",
            fmt_f64(max_defect),
            mark(self.stage_order_ok())
        )?;
        writeln!(
            f,
            "  pre-consistency     ||Pe - e||_inf = {}",
            fmt_f64(self.preconsistency_defect)
        )?;
        writeln!(
            f,
            "  super-convergence   |v'd_(s+1)| = {}, |v'R l_s| = {}  [{}]",
            fmt_f64(self.superconv_implicit),
            fmt_f64(self.superconv_explicit),
            mark(self.superconvergent())
        )?;
        let eigs: Vec<String> = self.p_eigenvalues.iter().map(|&z| complex(z)).collect();
        writeln!(
            f,
            "  zero-stability      eig(P) = [{}]  [{}{}]",
            eigs.join(", "),
            mark(self.zero_stable),
            if self.optimally_zero_stable {
                ", optimal"
            } else {
                ""
            }
        )?;
        let worst = match self.a_stability_worst_z {
            Some(z) => format!("z = {}", complex(z)),
            None => "z = inf".to_string(),
        };
        writeln!(
            f,
            "  A-stability         alpha = {}, worst rho = {} at {}  [{}]",
            if self.a_stable { "90" } else { "< 90" },
            fmt_f64(self.a_stability_worst_rho),
            worst,
            mark(self.a_stable)
        )?;
        writeln!(f, "  rho(R^-1 Q)         {}", fmt_f64(self.rho_r_inv_q))?;
        writeln!(
            f,
            "  error constants     c_im = {}, c_ex = {} ({} norm)",
            fmt_f64(self.c_im),
            fmt_f64(self.c_ex),
            ERROR_CONSTANT_NORM
        )?;
        writeln!(f, "  ||P^(s-1) d_(s+1)||  {}", fmt_f64(self.p_power_defect))?;
        for w in &self.node_warnings {
            writeln!(f, "  warning: {w}")?;
        }
        write!(
            f,
            "  result: {}",
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Runs every consistency, order, super-convergence and stability check.
pub fn certify(tab: &MethodTableau) -> CertificationReport {
    certify_with(tab, &AStabilitySampling::default())
}

pub fn certify_with(tab: &MethodTableau, sampling: &AStabilitySampling) -> CertificationReport {
    let s = tab.stages();
    let stage_order_defects: Vec<f64> = (1..=s + 1).map(|j| norm_inf(&tab.defect(j))).collect();
    let extrapolation_defect = (0..s)
        .map(|j| norm_inf(&extrapolation_residual(tab, j)))
        .fold(0.0, f64::max);
    let d_next = tab.defect(s + 1);
    let r_l = tab.r().mul_vec(&extrap_defect_l(tab));
    let v = tab.v().map(<[f64]>::to_vec);
    let (superconv_implicit, superconv_explicit) = match &v {
        Some(v) => (dot(v, &d_next).abs(), dot(v, &r_l).abs()),
        None => (f64::INFINITY, f64::INFINITY),
    };

    let p_eigenvalues = eigenvalues(tab.p()).unwrap_or_default();
    let (zero_stable, optimally_zero_stable) = classify_zero_stability(&p_eigenvalues);

    let a = is_a_stable(tab, sampling);
    let rho_r_inv_q = tab
        .r_inv_q()
        .and_then(|m| spectral_radius(&m))
        .unwrap_or(f64::INFINITY);

    let mut p_pow = RealMatrix::identity(s);
    for _ in 0..s.saturating_sub(1) {
        p_pow = &p_pow * tab.p();
    }
    let p_power_defect = norm_inf(&p_pow.mul_vec(&d_next));

    CertificationReport {
        label: tab.label().to_string(),
        stages: s,
        stage_order_defects,
        extrapolation_defect,
        preconsistency_defect: row_sum_defect(tab.p()),
        superconv_implicit,
        superconv_explicit,
        v,
        p_eigenvalues,
        zero_stable,
        optimally_zero_stable,
        a_stable: a.stable,
        a_stability_worst_z: a.worst_z,
        a_stability_worst_rho: a.worst_rho,
        rho_r_inv_q,
        c_im: norm_2(&d_next),
        c_ex: norm_2(&r_l),
        p_power_defect,
        node_warnings: node_warnings(tab),
    }
}

/// `(zero_stable, optimally_zero_stable)`: a simple eigenvalue 1 with the
/// rest strictly inside the unit disc, resp. all of the rest at zero.
pub fn classify_zero_stability(eigs: &[Complex64]) -> (bool, bool) {
    if eigs.is_empty() {
        return (false, false);
    }
    let one = Complex64::new(1.0, 0.0);
    let (idx, dist) = eigs
        .iter()
        .enumerate()
        .map(|(i, z)| (i, (z - one).norm()))
        .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
    if dist > 1e-8 {
        return (false, false);
    }
    let others = eigs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, z)| z.norm());
    let max_other = others.fold(0.0, f64::max);
    (max_other < 1.0 - 1e-12, max_other < ZERO_EIGENVALUE_TOL)
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

const FORMAT_HEADER: &str = "# imexpeer tableau v1";

impl MethodTableau {
    /// Serializes the free coefficients. `Q`, `S1`, `Q̂`, `R̂` are not stored.
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let s = self.stages();
        let join =
            |xs: &mut dyn Iterator<Item = f64>| xs.map(fmt_f64).collect::<Vec<_>>().join(", ");
        let strict = |m: &RealMatrix| {
            let mut vals = Vec::new();
            for i in 1..s {
                for j in 0..i {
                    vals.push(m[(i, j)]);
                }
            }
            vals
        };
        let mut out = String::new();
        out.push_str(FORMAT_HEADER);
        out.push('\n');
        out.push_str(&format!("label = {}\n", p.label));
        out.push_str(&format!("s = {s}\n"));
        out.push_str(&format!("c = {}\n", join(&mut p.c.iter().copied())));
        out.push_str(&format!("gamma = {}\n", fmt_f64(p.gamma)));
        out.push_str(&format!("p = {}\n", join(&mut p.p.data().iter().copied())));
        out.push_str(&format!(
            "r = {}\n",
            join(&mut strict(&p.r_strict).into_iter())
        ));
        out.push_str(&format!("s2 = {}\n", join(&mut strict(&p.s2).into_iter())));
        out
    }
}

struct Field {
    line: usize,
    value: String,
}

fn parse_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_list(field: &str, f: &Field, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = if f.value.trim().is_empty() {
        Vec::new()
    } else {
        f.value
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(f.line, field, format!("`{}`: {e}", tok.trim())))
            })
            .collect::<Result<_>>()?
    };
    if vals.len() != expected {
        return Err(parse_err(
            f.line,
            field,
            format!("expected {expected} values, got {}", vals.len()),
        ));
    }
    Ok(vals)
}

fn strict_lower_from(vals: &[f64], s: usize) -> RealMatrix {
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

/// Parses the free coefficients from the text format.
pub fn parse_params(text: &str) -> Result<TableauParams> {
    let mut fields: std::collections::BTreeMap<String, Field> = Default::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, content, "expected `key = value`"))?;
        let key = key.trim().to_ascii_lowercase();
        if !matches!(
            key.as_str(),
            "label" | "s" | "c" | "gamma" | "p" | "r" | "s2"
        ) {
            return Err(parse_err(line, &key, "unknown field"));
        }
        if fields.contains_key(&key) {
            return Err(parse_err(line, &key, "duplicate field"));
        }
        fields.insert(
            key,
            Field {
                line,
                value: value.trim().to_string(),
            },
        );
    }
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| parse_err(text.lines().count().max(1), k, "missing field"))
    };
    let s_field = get("s")?;
    let s: usize = s_field
        .value
        .parse()
        .map_err(|e| parse_err(s_field.line, "s", format!("{e}")))?;
    if !(MIN_STAGES..=MAX_STAGES).contains(&s) {
        return Err(parse_err(
            s_field.line,
            "s",
            format!("stage count must be in {MIN_STAGES}..={MAX_STAGES}"),
        ));
    }
    let label = fields
        .get("label")
        .map(|f| f.value.clone())
        .unwrap_or_else(|| format!("user-{s}s"));
    let c = parse_list("c", get("c")?, s)?;
    let gamma = parse_list("gamma", get("gamma")?, 1)?[0];
    let p = RealMatrix::new(s, s, parse_list("p", get("p")?, s * s)?)?;
    let n_strict = s * (s - 1) / 2;
    let r_strict = strict_lower_from(&parse_list("r", get("r")?, n_strict)?, s);
    let s2 = strict_lower_from(&parse_list("s2", get("s2")?, n_strict)?, s);
    Ok(TableauParams {
        label,
        c,
        gamma,
        p,
        r_strict,
        s2,
    })
}

impl MethodTableau {
    pub fn from_text(text: &str) -> Result<Self> {
        parse_params(text)?.build()
    }
}
