//! Linear stability of the IMEX pair on `y' = λ0 y + λ1 y`.
//!
//! With `z0 = Δt λ0` (explicit part) and `z1 = Δt λ1` (implicit part) one step
//! is `w_n = M(z0, z1) w_{n−1}` with
//! `M(z0, z1) = (I − z0 R̂ − z1 R)⁻¹ (P + z0 Q̂ + z1 Q)`.

use std::io::Write;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{spectral_radius, ComplexMatrix, Lu};
use crate::tableau::{extrap_defect_l, fmt_f64, norm_2, MethodTableau};

/// Strict membership margin: `ρ < 1 − MEMBERSHIP_MARGIN`.
pub const MEMBERSHIP_MARGIN: f64 = 1e-10;
/// Slack of the A-stability test: `ρ ≤ 1 + A_STABILITY_SLACK`.
pub const A_STABILITY_SLACK: f64 = 1e-8;
/// Growth allowed on the imaginary axis when measuring `y_max`. Along the
/// axis `ρ(M(iy, 0))` sits just above 1 for small `y` (it equals 1 at the
/// origin), so a strict test would report 0 for every method.
pub const AXIS_GROWTH_TOL: f64 = 1e-2;

/// Complex copies of the matrices entering `M(z0, z1)`.
#[derive(Debug, Clone)]
pub struct StabilityOperators {
    s: usize,
    p: ComplexMatrix,
    q: ComplexMatrix,
    q_hat: ComplexMatrix,
    r: ComplexMatrix,
    r_hat: ComplexMatrix,
    rho_inf: f64,
}

impl StabilityOperators {
    pub fn new(tab: &MethodTableau) -> Self {
        StabilityOperators {
            s: tab.stages(),
            p: tab.p().to_complex(),
            q: tab.q().to_complex(),
            q_hat: tab.q_hat().to_complex(),
            r: tab.r().to_complex(),
            r_hat: tab.r_hat().to_complex(),
            rho_inf: rho_infinity(tab).unwrap_or(f64::INFINITY),
        }
    }

    pub fn m_imex(&self, z0: Complex64, z1: Complex64) -> Result<ComplexMatrix> {
        let s = self.s;
        let one = Complex64::new(1.0, 0.0);
        let a = ComplexMatrix::from_fn(s, s, |i, j| {
            let id = if i == j { one } else { Complex64::default() };
            id - z0 * self.r_hat[(i, j)] - z1 * self.r[(i, j)]
        });
        let b = ComplexMatrix::from_fn(s, s, |i, j| {
            self.p[(i, j)] + z0 * self.q_hat[(i, j)] + z1 * self.q[(i, j)]
        });
        Lu::factor(&a)?.solve(&b)
    }

    pub fn rho(&self, z0: Complex64, z1: Complex64) -> Result<f64> {
        spectral_radius(&self.m_imex(z0, z1)?)
    }

    /// `ρ`, with singular or non-convergent evaluations counted as unstable.
    pub fn rho_or_inf(&self, z0: Complex64, z1: Complex64) -> f64 {
        match self.rho(z0, z1) {
            Ok(r) if r.is_finite() => r,
            _ => f64::INFINITY,
        }
    }

    /// `ρ(R⁻¹Q)`, the limit of `ρ(M(z0, z1))` for `|z1| → ∞`.
    pub fn rho_infinity(&self) -> f64 {
        self.rho_inf
    }
}

pub fn m_imex(tab: &MethodTableau, z0: Complex64, z1: Complex64) -> Result<ComplexMatrix> {
    StabilityOperators::new(tab).m_imex(z0, z1)
}

/// `M_im(z) = (I − zR)⁻¹(P + zQ)`.
pub fn m_implicit(tab: &MethodTableau, z: Complex64) -> Result<ComplexMatrix> {
    m_imex(tab, Complex64::default(), z)
}

/// `M(z, 0) = (I − z R̂)⁻¹(P + z Q̂)`.
pub fn m_explicit(tab: &MethodTableau, z: Complex64) -> Result<ComplexMatrix> {
    m_imex(tab, z, Complex64::default())
}

pub fn rho_infinity(tab: &MethodTableau) -> Result<f64> {
    spectral_radius(&tab.r_inv_q()?)
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
        .collect()
}

/// Rays `z = r e^{iθ}` covering the closed left half-plane. Conjugate
/// symmetry of real tableaus makes `θ ∈ [90°, 180°]` sufficient.
#[derive(Debug, Clone)]
pub struct AStabilitySampling {
    pub angles_deg: Vec<f64>,
    pub radii: Vec<f64>,
}

impl Default for AStabilitySampling {
    fn default() -> Self {
        AStabilitySampling {
            angles_deg: (0..=36).map(|k| 90.0 + 2.5 * k as f64).collect(),
            radii: log_space(1e-3, 1e6, 64),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AStabilityResult {
    pub stable: bool,
    /// `None` stands for the limit `z → ∞`.
    pub worst_z: Option<Complex64>,
    pub worst_rho: f64,
}

pub fn is_a_stable(tab: &MethodTableau, sampling: &AStabilitySampling) -> AStabilityResult {
    let ops = StabilityOperators::new(tab);
    let mut worst_z = None;
    let mut worst_rho = ops.rho_infinity();
    for &deg in &sampling.angles_deg {
        let dir = Complex64::from_polar(1.0, deg.to_radians());
        for &r in &sampling.radii {
            let z = dir * r;
            let rho = ops.rho_or_inf(Complex64::default(), z);
            if rho > worst_rho {
                worst_rho = rho;
                worst_z = Some(z);
            }
        }
    }
    AStabilityResult {
        stable: worst_rho <= 1.0 + A_STABILITY_SLACK,
        worst_z,
        worst_rho,
    }
}

/// Sampling of the sector `|Im z1| ≤ −tan(α) Re z1`: rays at `f·α` from the
/// negative real axis for each fraction `f`, each with the same radii.
#[derive(Debug, Clone)]
pub struct SectorSampling {
    pub fractions: Vec<f64>,
    pub radii: Vec<f64>,
}

impl Default for SectorSampling {
    fn default() -> Self {
        SectorSampling {
            fractions: vec![0.0, 0.25, -0.25, 0.5, -0.5, 0.75, -0.75, 1.0, -1.0],
            radii: log_space(1e-3, 1e6, 24),
        }
    }
}

impl SectorSampling {
    pub fn points(&self, alpha_deg: f64) -> Vec<Complex64> {
        let alpha = alpha_deg.to_radians();
        let mut out = Vec::with_capacity(self.fractions.len() * self.radii.len());
        for &f in &self.fractions {
            let dir = -Complex64::from_polar(1.0, f * alpha);
            for &r in &self.radii {
                out.push(dir * r);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegionKind {
    /// `S_E`: `ρ(M(z0, 0)) < 1`.
    Explicit,
    /// `S_α` for the given angle in degrees.
    Alpha(f64),
}

impl RegionKind {
    pub fn name(&self) -> String {
        match self {
            RegionKind::Explicit => "explicit".into(),
            RegionKind::Alpha(a) => format!("alpha{a}"),
        }
    }
}

/// Cell-centered grid over `[x_lo, x_hi] × [y_lo, y_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    pub nx: usize,
    pub ny: usize,
    /// Count every cell twice (mirror image in the lower half-plane).
    pub reflect: bool,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            x_lo: -12.0,
            x_hi: 0.5,
            y_lo: 0.0,
            y_hi: 5.0,
            nx: 400,
            ny: 400,
            reflect: true,
        }
    }
}

impl Grid {
    pub fn with_resolution(nx: usize, ny: usize) -> Self {
        Grid {
            nx,
            ny,
            ..Grid::default()
        }
    }
    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.nx as f64
    }
    pub fn dy(&self) -> f64 {
        (self.y_hi - self.y_lo) / self.ny as f64
    }
    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }
    /// Center of cell `k`, row-major with `x` fastest.
    pub fn point(&self, k: usize) -> Complex64 {
        let (i, j) = (k % self.nx, k / self.nx);
        Complex64::new(
            self.x_lo + (i as f64 + 0.5) * self.dx(),
            self.y_lo + (j as f64 + 0.5) * self.dy(),
        )
    }
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || !(self.x_hi > self.x_lo) || !(self.y_hi > self.y_lo) {
            return Err(Error::InvalidSpec(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }
}

/// Region membership tester with precomputed sector points.
pub struct RegionTester {
    ops: StabilityOperators,
    kind: RegionKind,
    z1: Vec<Complex64>,
}

impl RegionTester {
    pub fn new(tab: &MethodTableau, kind: RegionKind, sampling: &SectorSampling) -> Self {
        let z1 = match kind {
            RegionKind::Explicit => Vec::new(),
            RegionKind::Alpha(a) => sampling.points(a),
        };
        RegionTester {
            ops: StabilityOperators::new(tab),
            kind,
            z1,
        }
    }

    /// Largest sampled `ρ` at `z0`, stopping early once it reaches `stop`.
    pub fn max_rho(&self, z0: Complex64, stop: f64) -> f64 {
        let zero = Complex64::default();
        let mut worst = self.ops.rho_or_inf(z0, zero);
        if worst >= stop {
            return worst;
        }
        if let RegionKind::Alpha(_) = self.kind {
            worst = worst.max(self.ops.rho_infinity());
            if worst >= stop {
                return worst;
            }
            for &z1 in &self.z1 {
                worst = worst.max(self.ops.rho_or_inf(z0, z1));
                if worst >= stop {
                    return worst;
                }
            }
        }
        worst
    }

    pub fn is_member(&self, z0: Complex64) -> bool {
        let thresh = 1.0 - MEMBERSHIP_MARGIN;
        self.max_rho(z0, thresh) < thresh
    }

    fn is_member_relaxed(&self, z0: Complex64, tol: f64) -> bool {
        let thresh = 1.0 + tol;
        self.max_rho(z0, f64::from_bits(thresh.to_bits() + 1)) <= thresh
    }
}

#[derive(Debug, Clone)]
pub struct StabilityScan {
    pub kind: RegionKind,
    pub grid: Grid,
    pub sampling: SectorSampling,
    /// Row-major over the grid, `x` fastest.
    pub membership: Vec<bool>,
    pub area: f64,
    /// Most negative real-axis point in the region; 0 if there is none.
    pub x_max: f64,
    /// Imaginary-axis extent with growth tolerance [`AXIS_GROWTH_TOL`].
    pub y_max: f64,
    /// Largest `y` on the sampled imaginary axis that is a strict member.
    pub y_max_strict: f64,
}

const AXIS_SAMPLES: usize = 2000;
const BISECTION_STEPS: usize = 50;

fn bisect(mut inside: f64, mut outside: f64, test: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (inside + outside);
        if test(mid) {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    inside
}

fn axis_extents(tester: &RegionTester, grid: &Grid, exec: Execution) -> (f64, f64, f64) {
    // real axis, from 0 towards x_lo
    let x_lo = grid.x_lo.min(0.0);
    let xs: Vec<f64> = (1..=AXIS_SAMPLES)
        .map(|k| x_lo * k as f64 / AXIS_SAMPLES as f64)
        .collect();
    let on_real = exec.map(&xs, |&x| tester.is_member(Complex64::new(x, 0.0)));
    let x_max = match on_real.iter().rposition(|&m| m) {
        None => 0.0,
        Some(k) if k + 1 == xs.len() => xs[k],
        Some(k) => bisect(xs[k], xs[k + 1], |x| {
            tester.is_member(Complex64::new(x, 0.0))
        }),
    };

    let y_hi = grid.y_hi.max(0.0);
    let ys: Vec<f64> = (1..=AXIS_SAMPLES)
        .map(|k| y_hi * k as f64 / AXIS_SAMPLES as f64)
        .collect();
    let relaxed = |y: f64| tester.is_member_relaxed(Complex64::new(0.0, y), AXIS_GROWTH_TOL);
    let strict = |y: f64| tester.is_member(Complex64::new(0.0, y));
    let flags = exec.map(&ys, |&y| (relaxed(y), strict(y)));
    let y_max = match flags.iter().position(|f| !f.0) {
        None => y_hi,
        Some(0) => bisect(0.0, ys[0], relaxed),
        Some(k) => bisect(ys[k - 1], ys[k], relaxed),
    };
    let y_max_strict = match flags.iter().rposition(|f| f.1) {
        None => 0.0,
        Some(k) if k + 1 == ys.len() => ys[k],
        Some(k) => bisect(ys[k], ys[k + 1], strict),
    };
    (x_max, y_max, y_max_strict)
}

pub fn scan_region(
    tab: &MethodTableau,
    grid: Grid,
    kind: RegionKind,
    sampling: &SectorSampling,
    exec: Execution,
) -> Result<StabilityScan> {
    grid.validate()?;
    if let RegionKind::Alpha(a) = kind {
        if !(0.0..=90.0).contains(&a) {
            return Err(Error::InvalidSpec(format!(
                "alpha must be in [0, 90], got {a}"
            )));
        }
    }
    let tester = RegionTester::new(tab, kind, sampling);
    let membership = exec.map_range(grid.len(), |k| tester.is_member(grid.point(k)));
    let count = membership.iter().filter(|&&m| m).count();
    let factor = if grid.reflect { 2.0 } else { 1.0 };
    let (x_max, y_max, y_max_strict) = axis_extents(&tester, &grid, exec);
    Ok(StabilityScan {
        kind,
        grid,
        sampling: sampling.clone(),
        membership,
        area: factor * grid.cell_area() * count as f64,
        x_max,
        y_max,
        y_max_strict,
    })
}

impl StabilityScan {
    pub fn member_count(&self) -> usize {
        self.membership.iter().filter(|&&m| m).count()
    }

    /// `x,y,member` for every cell of the scanned (upper) half.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,member")?;
        for (k, &m) in self.membership.iter().enumerate() {
            let z = self.grid.point(k);
            writeln!(w, "{},{},{}", fmt_f64(z.re), fmt_f64(z.im), u8::from(m))?;
        }
        Ok(())
    }
}

/// Largest `α ∈ [0°, 90°]` (to `tol_deg`) for which `S_α` is non-empty on the grid.
pub fn max_alpha(
    tab: &MethodTableau,
    grid: Grid,
    sampling: &SectorSampling,
    exec: Execution,
    tol_deg: f64,
) -> Result<f64> {
    grid.validate()?;
    let nonempty = |alpha: f64| {
        let tester = RegionTester::new(tab, RegionKind::Alpha(alpha), sampling);
        exec.map_range(grid.len(), |k| tester.is_member(grid.point(k)))
            .into_iter()
            .any(|m| m)
    };
    if nonempty(90.0) {
        return Ok(90.0);
    }
    if !nonempty(0.0) {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 90.0);
    while hi - lo > tol_deg {
        let mid = 0.5 * (lo + hi);
        if nonempty(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// One row of the method comparison table.
#[derive(Debug, Clone)]
pub struct RegionSummary {
    pub label: String,
    pub alpha_deg: f64,
    pub rho_r_inv_q: f64,
    pub c_im: f64,
    pub c_ex: f64,
    pub area_explicit: f64,
    pub area_alpha: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub y_max_strict: f64,
}

impl RegionSummary {
    pub const CSV_HEADER: &'static str =
        "method,alpha_deg,rho_r_inv_q,c_im,c_ex,area_explicit,area_alpha,x_max,y_max,y_max_strict";

    pub fn csv_line(&self) -> String {
        let values = [
            self.alpha_deg,
            self.rho_r_inv_q,
            self.c_im,
            self.c_ex,
            self.area_explicit,
            self.area_alpha,
            self.x_max,
            self.y_max,
            self.y_max_strict,
        ];
        let mut line = self.label.clone();
        for v in values {
            line.push(',');
            line.push_str(&fmt_f64(v));
        }
        line
    }
}

/// `|S_E|`, `|S_α|`, `x_max` of `S_α`, `y_max` of `S_E` and the error constants.
/// `alpha_deg = None` uses 90° if the method is A-stable and otherwise the
/// bisected maximal angle.
pub fn region_summary(
    tab: &MethodTableau,
    grid: Grid,
    alpha_deg: Option<f64>,
    exec: Execution,
) -> Result<(RegionSummary, StabilityScan, StabilityScan)> {
    let sampling = SectorSampling::default();
    let alpha = match alpha_deg {
        Some(a) => a,
        None if is_a_stable(tab, &AStabilitySampling::default()).stable => 90.0,
        None => max_alpha(tab, grid, &sampling, exec, 0.1)?,
    };
    let se = scan_region(tab, grid, RegionKind::Explicit, &sampling, exec)?;
    let sa = scan_region(tab, grid, RegionKind::Alpha(alpha), &sampling, exec)?;
    let s = tab.stages();
    let c_im = norm_2(&tab.defect(s + 1));
    let c_ex = norm_2(&tab.r().mul_vec(&extrap_defect_l(tab)));
    let summary = RegionSummary {
        label: tab.label().to_string(),
        alpha_deg: alpha,
        rho_r_inv_q: rho_infinity(tab).unwrap_or(f64::INFINITY),
        c_im,
        c_ex,
        area_explicit: se.area,
        area_alpha: sa.area,
        x_max: sa.x_max,
        y_max: se.y_max,
        y_max_strict: se.y_max_strict,
    };
    Ok((summary, se, sa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::builtin;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn origin_gives_p() {
        let t = builtin("imex-peer3s").unwrap();
        let m = m_imex(&t, c(0.0, 0.0), c(0.0, 0.0)).unwrap();
        let p = t.p().to_complex();
        assert!((&m - &p).max_abs() < 1e-15);
        assert_abs_diff_eq!(spectral_radius(&m).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_arguments_match_single_part_matrices() {
        let t = builtin("imex-peer2s").unwrap();
        let z = c(-0.7, 0.4);
        let imp = m_implicit(&t, z).unwrap();
        let r = t.r().to_complex();
        let q = t.q().to_complex();
        let p = t.p().to_complex();
        let lhs = &ComplexMatrix::identity(2) - &r.scale(z);
        let direct = Lu::factor(&lhs)
            .unwrap()
            .solve(&(&p + &q.scale(z)))
            .unwrap();
        assert!((&imp - &direct).max_abs() < 1e-14);

        let exp = m_explicit(&t, z).unwrap();
        let rs2 = (t.r() * t.s2()).to_complex();
        let qrs1 = (&(t.r() * t.s1()) + t.q()).to_complex();
        let lhs = &ComplexMatrix::identity(2) - &rs2.scale(z);
        let direct = Lu::factor(&lhs)
            .unwrap()
            .solve(&(&p + &qrs1.scale(z)))
            .unwrap();
        assert!((&exp - &direct).max_abs() < 1e-14);
    }

    #[test]
    fn large_z_approaches_r_inv_q() {
        let t = builtin("imex-peer2s").unwrap();
        let far = spectral_radius(&m_implicit(&t, c(-1e9, 0.0)).unwrap()).unwrap();
        let lim = rho_infinity(&t).unwrap();
        assert_abs_diff_eq!(far, lim, epsilon = 1e-6);
        assert!((lim - 0.128).abs() < 0.005 * 0.128);
    }

    #[test]
    fn conjugate_symmetry() {
        let t = builtin("imex-peer4s").unwrap();
        let ops = StabilityOperators::new(&t);
        for (z0, z1) in [(c(-1.0, 0.3), c(-2.0, 5.0)), (c(0.2, 1.1), c(-0.1, -0.4))] {
            let a = ops.rho(z0, z1).unwrap();
            let b = ops.rho(z0.conj(), z1.conj()).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn flipped_gamma_is_not_a_stable() {
        let t = builtin("imex-peer2s").unwrap();
        let flipped = t.with_gamma(-t.gamma()).unwrap();
        let res = is_a_stable(&flipped, &AStabilitySampling::default());
        assert!(!res.stable);
        assert!(res.worst_rho > 1.0);
    }

    #[test]
    fn sector_points_stay_in_sector() {
        let s = SectorSampling::default();
        for alpha in [0.0, 30.0, 89.0] {
            let tan = f64::tan(f64::to_radians(alpha));
            for z in s.points(alpha) {
                assert!(z.re < 0.0);
                assert!(z.im.abs() <= -tan * z.re * (1.0 + 1e-12) + 1e-300);
            }
        }
        assert_eq!(s.points(90.0).len(), 9 * 24);
    }

    #[test]
    fn grid_cells_and_area() {
        let g = Grid {
            x_lo: -1.0,
            x_hi: 1.0,
            y_lo: 0.0,
            y_hi: 1.0,
            nx: 4,
            ny: 2,
            reflect: false,
        };
        assert_abs_diff_eq!(g.cell_area(), 0.25);
        assert_eq!(g.point(0), c(-0.75, 0.25));
        assert_eq!(g.point(7), c(0.75, 0.75));
    }

    #[test]
    fn explicit_membership_spot_checks() {
        // ρ(M(0,0)) = ρ(P) = 1, so the origin is never a strict member
        let t = builtin("imex-peer2s").unwrap();
        let tester = RegionTester::new(&t, RegionKind::Explicit, &SectorSampling::default());
        assert!(!tester.is_member(c(0.0, 0.0)));
        assert!(tester.is_member(c(-1.0, 0.0)));
        assert!(!tester.is_member(c(-11.0, 4.0)));
    }

    #[test]
    fn coarse_scan_monotone_in_alpha() {
        let t = builtin("imex-peer2s").unwrap();
        let g = Grid::with_resolution(50, 20);
        let s = SectorSampling::default();
        let e = scan_region(&t, g, RegionKind::Explicit, &s, Execution::Sequential).unwrap();
        let a45 = scan_region(&t, g, RegionKind::Alpha(45.0), &s, Execution::Sequential).unwrap();
        let a90 = scan_region(&t, g, RegionKind::Alpha(90.0), &s, Execution::Sequential).unwrap();
        for k in 0..g.len() {
            assert!(!a90.membership[k] || a45.membership[k]);
            assert!(!a45.membership[k] || e.membership[k]);
        }
        assert!(a90.area <= a45.area && a45.area <= e.area);
    }

    #[test]
    fn scan_is_identical_across_execution_policies() {
        let t = builtin("imex-peer3s").unwrap();
        let g = Grid::with_resolution(30, 15);
        let s = SectorSampling::default();
        let a = scan_region(&t, g, RegionKind::Alpha(90.0), &s, Execution::Sequential).unwrap();
        let b = scan_region(&t, g, RegionKind::Alpha(90.0), &s, Execution::Parallel).unwrap();
        assert_eq!(a.membership, b.membership);
        assert_eq!(a.area, b.area);
        assert_eq!(a.x_max, b.x_max);
    }
}
