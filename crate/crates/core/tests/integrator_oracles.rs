use imexpeer::experiments::{
    advection_reaction, prothero_robinson, scaled_max_error, AdvectionReaction,
};
use imexpeer::integrator::{
    generate_starting_stages, integrate, ClosureProblem, IntegrationOptions, Jacobian, Mode,
    NewtonOptions, PeerStepper, SplitOdeProblem, StageBlock, StartOptions,
};
use imexpeer::linalg::ComplexMatrix;
use imexpeer::methods::builtins;
use imexpeer::stability::{m_explicit, m_implicit};
use imexpeer::MethodTableau;
use num_complex::Complex64;
use proptest::prelude::*;

fn random_block(tab: &MethodTableau, problem: &ClosureProblem, w: &[Complex64]) -> StageBlock {
    let stages: Vec<Vec<f64>> = w.iter().map(|z| vec![z.re, z.im]).collect();
    StageBlock::from_stages(problem, tab.nodes(), 0.0, 1.0, &stages).unwrap()
}

fn as_complex(block: &StageBlock) -> Vec<Complex64> {
    (0..block.stages)
        .map(|i| Complex64::new(block.stage(i)[0], block.stage(i)[1]))
        .collect()
}

fn max_dev(a: &[Complex64], b: &[Complex64]) -> f64 {
    let scale = b.iter().map(|z| z.norm()).fold(1e-300, f64::max);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
        / scale
}

fn stage_vec(s: usize, seed: &[f64]) -> Vec<Complex64> {
    (0..s)
        .map(|i| Complex64::new(seed[2 * i], seed[2 * i + 1]))
        .collect()
}

fn step(tab: &MethodTableau, mode: Mode, p: &ClosureProblem, b: &StageBlock) -> StageBlock {
    PeerStepper::new(tab, mode, NewtonOptions::default())
        .step(p, b)
        .unwrap()
        .0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn single_step_transfer_matrices(
        zr in -20.0f64..0.0, zi in -20.0f64..20.0,
        seed in proptest::collection::vec(-1.0f64..1.0, 8),
    ) {
        let z = Complex64::new(zr, zi);
        let zero = Complex64::new(0.0, 0.0);
        for tab in builtins() {
            let s = tab.stages();
            let w0 = stage_vec(s, &seed);

            let p = ClosureProblem::dahlquist(zero, z, w0[s - 1]);
            let b = step(&tab, Mode::Implicit, &p, &random_block(&tab, &p, &w0));
            let m: ComplexMatrix = m_implicit(&tab, z).unwrap();
            prop_assert!(max_dev(&as_complex(&b), &m.mul_vec(&w0)) < 1e-12);

            let p = ClosureProblem::dahlquist(z * 0.05, zero, w0[s - 1]);
            let b = step(&tab, Mode::Explicit, &p, &random_block(&tab, &p, &w0));
            let m = m_explicit(&tab, z * 0.05).unwrap();
            prop_assert!(max_dev(&as_complex(&b), &m.mul_vec(&w0)) < 1e-12);
        }
    }

    #[test]
    fn splitting_degenerates_to_single_schemes(
        zr in -5.0f64..0.0, zi in -5.0f64..5.0,
        seed in proptest::collection::vec(-1.0f64..1.0, 8),
    ) {
        let z = Complex64::new(zr, zi);
        let zero = Complex64::new(0.0, 0.0);
        for tab in builtins() {
            let s = tab.stages();
            let w0 = stage_vec(s, &seed);

            let p = ClosureProblem::dahlquist(z, zero, w0[s - 1]);
            let (mut a, mut b) = (random_block(&tab, &p, &w0), random_block(&tab, &p, &w0));
            for _ in 0..5 {
                a = step(&tab, Mode::Imex, &p, &a);
                b = step(&tab, Mode::Explicit, &p, &b);
                prop_assert!(max_dev(&as_complex(&a), &as_complex(&b)) < 1e-13);
            }

            let p = ClosureProblem::dahlquist(zero, z, w0[s - 1]);
            let (mut a, mut b) = (random_block(&tab, &p, &w0), random_block(&tab, &p, &w0));
            for _ in 0..5 {
                a = step(&tab, Mode::Imex, &p, &a);
                b = step(&tab, Mode::Implicit, &p, &b);
                prop_assert!(max_dev(&as_complex(&a), &as_complex(&b)) < 1e-13);
            }
        }
    }
}

/// `u' = μ(u − p) + p'/2 + λ(u − p) + p'/2` with solution `p`, a polynomial of degree `s`.
fn polynomial_problem(coef: Vec<f64>, lambda: f64) -> ClosureProblem {
    let eval = |c: &[f64], t: f64| c.iter().rev().fold(0.0, |acc, a| acc * t + a);
    let deriv: Vec<f64> = coef
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, a)| k as f64 * a)
        .collect();
    let mu = -1.0;
    let mut p = ClosureProblem::zero(vec![eval(&coef, 0.0)], 0.0, 0.5);
    let (c0, d0) = (coef.clone(), deriv.clone());
    p.f0 = Box::new(move |t, u, out| out[0] = mu * (u[0] - eval(&c0, t)) + 0.5 * eval(&d0, t));
    let (c1, d1) = (coef.clone(), deriv);
    p.f1 = Box::new(move |t, u, out| out[0] = lambda * (u[0] - eval(&c1, t)) + 0.5 * eval(&d1, t));
    p.j1 = Box::new(move |_, _| {
        Jacobian::Dense(imexpeer::linalg::RealMatrix::from_rows(&[vec![lambda]]))
    });
    p.j0 = Some(Box::new(move |_, _| {
        Jacobian::Dense(imexpeer::linalg::RealMatrix::from_rows(&[vec![mu]]))
    }));
    p.exact = Some(Box::new(move |t| vec![eval(&coef, t)]));
    p
}

#[test]
fn all_modes_are_exact_on_degree_s_polynomials() {
    for tab in builtins() {
        let s = tab.stages();
        let coef: Vec<f64> = (0..=s).map(|k| 0.7 - 0.3 * k as f64).collect();
        for mode in [Mode::Imex, Mode::Implicit, Mode::Explicit] {
            // keep the explicit scheme inside its stability region
            let lambda = if mode == Mode::Explicit { -5.0 } else { -50.0 };
            let problem = polynomial_problem(coef.clone(), lambda);
            let opts = IntegrationOptions {
                mode,
                ..Default::default()
            };
            let out = integrate(&tab, &problem, 0.05, &opts).unwrap();
            let exact = problem.exact(0.5).unwrap();
            let err = (out.state[0] - exact[0]).abs();
            assert!(err < 1e-11, "{} {:?}: {err:e}", tab.label(), mode);
            for i in 0..s {
                let t = out.block.t + tab.nodes()[i] * out.block.dt;
                let e = (out.block.stage(i)[0] - problem.exact(t).unwrap()[0]).abs();
                assert!(e < 1e-11, "{} {:?} stage {i}: {e:e}", tab.label(), mode);
            }
        }
    }
}

#[test]
fn prothero_robinson_two_stage_error_drops_by_eight() {
    let tab = imexpeer::builtin("imex-peer2s").unwrap();
    let p = prothero_robinson();
    let exact = p.exact(5.0).unwrap();
    let opts = IntegrationOptions::default();
    let e1 = scaled_max_error(&integrate(&tab, &p, 0.05, &opts).unwrap().state, &exact);
    let e2 = scaled_max_error(&integrate(&tab, &p, 0.025, &opts).unwrap().state, &exact);
    let ratio = e1 / e2;
    assert!((6.0..11.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn dahlquist_inside_region_stays_bounded() {
    // z0 = -0.5 lies well inside S_90 of every builtin
    let z0 = Complex64::new(-0.5, 0.2);
    let z1 = Complex64::new(-1e3, 400.0);
    for tab in builtins() {
        let s = tab.stages();
        let w0: Vec<Complex64> = (0..s)
            .map(|i| Complex64::new(1.0, 0.1 * i as f64))
            .collect();
        let p = ClosureProblem::dahlquist(z0, z1, w0[s - 1]);
        let stepper = PeerStepper::new(&tab, Mode::Imex, NewtonOptions::default());
        let mut b = random_block(&tab, &p, &w0);
        let mut peak = 0.0f64;
        for _ in 0..10_000 {
            b = stepper.step(&p, &b).unwrap().0;
            peak = peak.max(as_complex(&b).iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
        assert!(peak < 1e3, "{}: peak {peak:e}", tab.label());
        assert!(as_complex(&b).iter().all(|z| z.norm() < 1e-12));
    }
}

/// Same problem, but a larger stiffness bound forces finer starter substeps.
struct Finer(AdvectionReaction, f64);

impl SplitOdeProblem for Finer {
    fn dimension(&self) -> usize {
        self.0.dimension()
    }
    fn t0(&self) -> f64 {
        self.0.t0()
    }
    fn t_end(&self) -> f64 {
        self.0.t_end()
    }
    fn initial_state(&self) -> Vec<f64> {
        self.0.initial_state()
    }
    fn explicit_rhs(&self, t: f64, u: &[f64], out: &mut [f64]) {
        self.0.explicit_rhs(t, u, out)
    }
    fn implicit_rhs(&self, t: f64, u: &[f64], out: &mut [f64]) {
        self.0.implicit_rhs(t, u, out)
    }
    fn implicit_jacobian(&self, t: f64, u: &[f64]) -> Jacobian {
        self.0.implicit_jacobian(t, u)
    }
    fn stiffness_bound(&self) -> Option<f64> {
        self.0.stiffness_bound().map(|l| l * self.1)
    }
}

#[test]
fn advection_reaction_starting_stages_match_finer_start() {
    let ar = advection_reaction(48).unwrap();
    for tab in builtins() {
        let dt = 1e-3;
        let (a, ka) = generate_starting_stages(&tab, &ar, dt, &StartOptions::default()).unwrap();
        let (b, kb) =
            generate_starting_stages(&tab, &Finer(ar, 100.0), dt, &StartOptions::default())
                .unwrap();
        assert_eq!(ka, kb);
        let dev =
            a.w.iter()
                .zip(&b.w)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
        assert!(dev < 1e-10, "{}: {dev:e}", tab.label());
    }
}
