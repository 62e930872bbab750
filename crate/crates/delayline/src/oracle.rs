//! Reference computations that never touch the chain: the single-excitation
//! delay equation, plain Lindblad evolution and regression, and the closed
//! system interval decomposition.

use thiserror::Error;

use crate::model::{Insertion, NetworkSpec, ObservableSeries, Rational, Side};
use crate::qlinalg::{
    kron_all, matrix_units_basis, partial_trace, ComplexMatrix, FactorShape, Integrator, LinalgError, Tolerance, C64,
    I, ONE, ZERO,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("kernel term {index} has nonzero delay; the reference solver needs a Markovian kernel")]
    NonzeroDelay { index: usize },
    #[error("invalid delay equation parameters: {0}")]
    InvalidParams(String),
    #[error("times must be ascending and nonnegative")]
    BadGrid,
    #[error("operator dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Hamiltonian is not Hermitian (residue {0:e})")]
    NonHermitian(f64),
    #[error("delay equation did not converge to {tol:e} within {steps} steps per delay")]
    NoConvergence { tol: f64, steps: usize },
    #[error(transparent)]
    Propagation(#[from] LinalgError),
}

/// Undriven single-excitation amplitude with one delayed feedback path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdeParams {
    pub gamma: f64,
    pub phi: f64,
    pub tau: f64,
    pub c0: C64,
}

const MAX_STEPS_PER_DELAY: usize = 1 << 20;

/// Solution of c' = -gamma c - gamma e^{i phi} c(t - tau) theta(t - tau) with
/// zero history, by the method of steps (RK4 on a grid aligned with tau and
/// cubic Hermite history). Step count doubles until successive grids agree to `tol`.
pub fn dde_amplitude(params: &DdeParams, times: &[f64], tol: f64) -> Result<Vec<C64>, OracleError> {
    if !(params.gamma >= 0.0) || !(params.tau > 0.0) || !params.phi.is_finite() {
        return Err(OracleError::InvalidParams(format!("gamma={}, tau={}", params.gamma, params.tau)));
    }
    if !(tol > 0.0) {
        return Err(OracleError::InvalidParams(format!("tol={tol}")));
    }
    if times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(OracleError::BadGrid);
    }
    let mut m = 16;
    let mut coarse = DdeGrid::solve(params, m, times.last().copied().unwrap_or(0.0)).sample(times);
    loop {
        m *= 2;
        let fine = DdeGrid::solve(params, m, times.last().copied().unwrap_or(0.0)).sample(times);
        let diff = coarse.iter().zip(&fine).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        if diff <= tol {
            return Ok(fine);
        }
        if m >= MAX_STEPS_PER_DELAY {
            return Err(OracleError::NoConvergence { tol, steps: m });
        }
        coarse = fine;
    }
}

/// Nodes with one-sided derivatives per step: breakpoints at multiples of tau
/// fall on nodes, so each step sees a smooth history piece.
struct DdeGrid {
    h: f64,
    c: Vec<C64>,
    // derivative at the start and end of step k, from inside the step
    d_start: Vec<C64>,
    d_end: Vec<C64>,
}

impl DdeGrid {
    fn solve(p: &DdeParams, m: usize, t_end: f64) -> Self {
        let h = p.tau / m as f64;
        let steps = ((t_end / h).ceil() as usize).max(1);
        let fb = C64::from_polar(p.gamma, p.phi);
        let rhs = |c: C64, delayed: C64| -p.gamma * c - fb * delayed;
        let mut grid = DdeGrid {
            h,
            c: Vec::with_capacity(steps + 1),
            d_start: Vec::with_capacity(steps),
            d_end: Vec::with_capacity(steps),
        };
        grid.c.push(p.c0);
        for k in 0..steps {
            let delayed = |s: f64| if k < m { ZERO } else { grid.hermite(k - m, s) };
            let (g0, g1, g2) = (delayed(0.0), delayed(0.5), delayed(1.0));
            let c = grid.c[k];
            let k1 = rhs(c, g0);
            let k2 = rhs(c + k1 * (h / 2.0), g1);
            let k3 = rhs(c + k2 * (h / 2.0), g1);
            let k4 = rhs(c + k3 * h, g2);
            let next = c + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            grid.d_start.push(k1);
            grid.d_end.push(rhs(next, g2));
            grid.c.push(next);
        }
        grid
    }

    fn hermite(&self, k: usize, s: f64) -> C64 {
        let (c0, c1) = (self.c[k], self.c[k + 1]);
        let (d0, d1) = (self.d_start[k] * self.h, self.d_end[k] * self.h);
        let s2 = s * s;
        let s3 = s2 * s;
        c0 * (2.0 * s3 - 3.0 * s2 + 1.0) + d0 * (s3 - 2.0 * s2 + s) + c1 * (-2.0 * s3 + 3.0 * s2) + d1 * (s3 - s2)
    }

    fn sample(&self, times: &[f64]) -> Vec<C64> {
        let last = self.d_start.len() - 1;
        times
            .iter()
            .map(|&t| {
                let k = ((t / self.h).floor() as usize).min(last);
                self.hermite(k, t / self.h - k as f64)
            })
            .collect()
    }
}

/// Single-copy Lindblad generator of a Markovian spec.
fn markov_generator(spec: &NetworkSpec) -> Result<impl Fn(&[C64], &mut [C64]) + '_, OracleError> {
    let zero = Rational::from_integer(0);
    let d = spec.copy_dim();
    let mut k_eff = spec.h_internal.clone();
    let mut jumps = Vec::new();
    for (index, term) in spec.kernel.iter().enumerate() {
        if term.delay != zero {
            if term.gamma == ZERO {
                continue;
            }
            return Err(OracleError::NonzeroDelay { index });
        }
        let g = term.gamma.re;
        let a = spec.coupling(term.alpha).expect("validated coupling").clone();
        k_eff.add_scaled(&a.adjoint().matmul(&a), C64::new(0.0, -g));
        jumps.push((a, g));
    }
    let k_dag = k_eff.adjoint();
    Ok(move |x: &[C64], out: &mut [C64]| {
        let rho = ComplexMatrix::from_vec(d, x.to_vec()).unwrap();
        let mut l = k_eff.matmul(&rho).scale(-I);
        l.add_scaled(&rho.matmul(&k_dag), I);
        for (a, g) in &jumps {
            l.add_scaled(&a.matmul(&rho).matmul(&a.adjoint()), C64::new(2.0 * g, 0.0));
        }
        out.copy_from_slice(l.as_slice());
    })
}

fn check_dim(spec: &NetworkSpec, m: &ComplexMatrix) -> Result<(), OracleError> {
    if m.dim() != spec.copy_dim() {
        return Err(OracleError::DimensionMismatch { expected: spec.copy_dim(), got: m.dim() });
    }
    Ok(())
}

/// Direct master-equation expectation series for a spec without delays.
pub fn lindblad_reference(
    spec: &NetworkSpec,
    rho0: &ComplexMatrix,
    observable: &ComplexMatrix,
    times: &[f64],
    tol: f64,
) -> Result<ObservableSeries, OracleError> {
    check_dim(spec, rho0)?;
    check_dim(spec, observable)?;
    if times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(OracleError::BadGrid);
    }
    let gen = markov_generator(spec)?;
    let tol = Tolerance::from_scalar(tol)?;
    let d = spec.copy_dim();
    let mut y = rho0.as_slice().to_vec();
    let mut integ = Integrator::new(d * d);
    let (mut values, mut imag, mut trace_err) = (Vec::with_capacity(times.len()), 0.0f64, 0.0f64);
    integ.integrate(&gen, &mut y, 0.0, times, tol, |_, v| {
        let rho = ComplexMatrix::from_vec(d, v.to_vec()).unwrap();
        let e = observable.trace_product(&rho);
        imag = imag.max(e.im.abs());
        trace_err = trace_err.max((rho.trace() - ONE).norm());
        values.push(e.re);
    })?;
    Ok(ObservableSeries { times: times.to_vec(), values, imag_residue: imag, max_trace_error: trace_err })
}

/// Standard quantum regression on one copy: evolve, apply the insertions at
/// their times (left ones as L1 L2 .. X, right ones as X .. R1 R2 in supplied
/// order), and take the trace at the latest insertion time.
pub fn lindblad_regression(
    spec: &NetworkSpec,
    rho0: &ComplexMatrix,
    insertions: &[Insertion],
    tol: f64,
) -> Result<C64, OracleError> {
    check_dim(spec, rho0)?;
    for ins in insertions {
        check_dim(spec, &ins.op)?;
        if !(ins.time >= 0.0) {
            return Err(OracleError::BadGrid);
        }
    }
    let gen = markov_generator(spec)?;
    let tol = Tolerance::from_scalar(tol)?;
    let d = spec.copy_dim();
    let mut order: Vec<usize> = (0..insertions.len()).collect();
    order.sort_by(|&a, &b| insertions[a].time.total_cmp(&insertions[b].time).then(a.cmp(&b)));
    let mut rho = rho0.clone();
    let mut integ = Integrator::new(d * d);
    let mut t = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = insertions[order[i]].time;
        if s > t {
            let mut y = rho.into_vec();
            integ.integrate(&gen, &mut y, t, &[s], tol, |_, _| {})?;
            rho = ComplexMatrix::from_vec(d, y).unwrap();
            t = s;
        }
        let (mut left, mut right) = (ComplexMatrix::identity(d), ComplexMatrix::identity(d));
        while i < order.len() && insertions[order[i]].time == s {
            let ins = &insertions[order[i]];
            match ins.side {
                Side::Left => left = left.matmul(&ins.op),
                Side::Right => right = right.matmul(&ins.op),
            }
            i += 1;
        }
        rho = left.matmul(&rho).matmul(&right);
    }
    Ok(rho.trace())
}

/// Max-norm deviation between direct unitary evolution of `rho0` to `t` and
/// the interval decomposition with `n` copies. The interval length is
/// xi = 2t / (2n - 1), so the final time sits mid-way through interval n.
pub fn closed_decomposition_check(
    h: &ComplexMatrix,
    rho0: &ComplexMatrix,
    t: f64,
    n: usize,
    tol: f64,
) -> Result<f64, OracleError> {
    if h.hermiticity_residue() > tol {
        return Err(OracleError::NonHermitian(h.hermiticity_residue()));
    }
    if rho0.dim() != h.dim() {
        return Err(OracleError::DimensionMismatch { expected: h.dim(), got: rho0.dim() });
    }
    if n == 0 || !(t >= 0.0) {
        return Err(OracleError::InvalidParams(format!("n={n}, t={t}")));
    }
    let d = h.dim();
    let direct = {
        let u = h.unitary_evolution(t);
        u.matmul(rho0).matmul(&u.adjoint())
    };
    let xi = 2.0 * t / (2 * n - 1) as f64;
    let t_rel = t - (n - 1) as f64 * xi;
    // U^(n-1)(xi, t') U^(n)(t', 0): copies 1..n-1 see a full interval, copy n sees t'.
    let u_fwd = h.unitary_evolution(t_rel);
    let u_rest = h.unitary_evolution(xi - t_rel);
    let mut factors = vec![u_rest.matmul(&u_fwd); n - 1];
    factors.push(u_fwd);
    let v = kron_all(&factors);
    let v_dag = v.adjoint();
    let units = matrix_units_basis(d);
    let shape = FactorShape::uniform(d, n)?;
    let traced: Vec<usize> = (0..n - 1).collect();
    let mut out = ComplexMatrix::zeros(d);
    let count = (d * d).pow((n - 1) as u32);
    for j in 0..count {
        let mut rest = j;
        let mut picks = vec![0; n - 1];
        for p in picks.iter_mut().rev() {
            *p = rest % (d * d);
            rest /= d * d;
        }
        let mut input = vec![rho0.clone()];
        input.extend(picks.iter().map(|&k| units[k].clone()));
        let mut dual: Vec<ComplexMatrix> = picks.iter().map(|&k| units[k].adjoint()).collect();
        dual.push(ComplexMatrix::identity(d));
        let evolved = v.matmul(&kron_all(&input)).matmul(&v_dag);
        let contracted = evolved.matmul(&kron_all(&dual));
        let part = if n == 1 { contracted } else { partial_trace(&contracted, &shape, &traced)? };
        out.add_scaled(&part, ONE);
    }
    Ok(out.max_abs_diff(&direct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{driven_qubit, KernelTerm};
    use crate::qlinalg::ops;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// c(t) = c0 e^{-gt} sum_m (-g e^{i phi} e^{g tau})^m (t - m tau)^m / m!, t >= m tau.
    fn dde_closed_form(p: &DdeParams, t: f64) -> C64 {
        let a = -C64::from_polar(p.gamma, p.phi) * (p.gamma * p.tau).exp();
        let mut sum = ZERO;
        let mut m = 0;
        while t - m as f64 * p.tau >= 0.0 {
            let s = t - m as f64 * p.tau;
            let mut term = ONE;
            for k in 1..=m {
                term *= a * s / k as f64;
            }
            sum += term;
            m += 1;
        }
        p.c0 * sum * (-p.gamma * t).exp()
    }

    fn excited() -> ComplexMatrix {
        ComplexMatrix::from_real(&[&[0.0, 0.0], &[0.0, 1.0]])
    }

    fn markov_qubit(omega: f64, gamma: f64) -> NetworkSpec {
        driven_qubit(omega, vec![KernelTerm::new(0, 0, C64::new(gamma, 0.0), Rational::from_integer(0))])
    }

    fn random_hermitian(rng: &mut impl Rng, d: usize) -> ComplexMatrix {
        let a = ComplexMatrix::from_fn(d, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        &a + &a.adjoint()
    }

    fn random_state(rng: &mut impl Rng, d: usize) -> ComplexMatrix {
        let a = ComplexMatrix::from_fn(d, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let p = a.matmul(&a.adjoint());
        let tr = p.trace();
        p.scale(ONE / tr)
    }

    #[test]
    fn dde_before_delay_is_pure_decay() {
        let p = DdeParams { gamma: 1.0, phi: std::f64::consts::PI, tau: 5.0, c0: ONE };
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.25).collect();
        let c = dde_amplitude(&p, &times, 1e-11).unwrap();
        for (t, c) in times.iter().zip(c) {
            assert!((c.norm_sqr() - (-2.0 * t).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn dde_matches_series_solution() {
        let p = DdeParams { gamma: 1.0, phi: std::f64::consts::PI, tau: 5.0, c0: ONE };
        let times: Vec<f64> = (0..=60).map(|i| i as f64 * 0.25 + 0.01).collect();
        let c = dde_amplitude(&p, &times, 1e-11).unwrap();
        for (t, c) in times.iter().zip(c) {
            assert!((c - dde_closed_form(&p, *t)).norm() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn dde_zero_delay_limit_cancels() {
        let p = DdeParams { gamma: 1.0, phi: std::f64::consts::PI, tau: 1e-3, c0: ONE };
        let c = dde_amplitude(&p, &[0.5], 1e-10).unwrap();
        assert!((c[0].norm_sqr() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn dde_converges_at_fourth_order() {
        let p = DdeParams { gamma: 1.0, phi: 0.7, tau: 1.0, c0: ONE };
        let exact = dde_closed_form(&p, 2.6);
        let err = |m| (DdeGrid::solve(&p, m, 2.6).sample(&[2.6])[0] - exact).norm();
        let ratio = err(16) / err(32);
        assert!(ratio > 4.0, "ratio {ratio}");
    }

    #[test]
    fn lindblad_decay_and_trace() {
        let spec = markov_qubit(0.0, 0.7);
        let times = [0.0, 0.5, 1.0, 2.0];
        let s = lindblad_reference(&spec, &excited(), &ops::excitation(), &times, 1e-11).unwrap();
        for (t, v) in times.iter().zip(&s.values) {
            assert!((v - (-1.4 * t).exp()).abs() < 1e-9);
        }
        let one = lindblad_reference(&markov_qubit(0.4, 1.0), &excited(), &ComplexMatrix::identity(2), &times, 1e-11)
            .unwrap();
        assert!(one.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn lindblad_rejects_delays() {
        let spec = driven_qubit(0.3, vec![KernelTerm::new(0, 0, ONE, Rational::from_integer(2))]);
        assert!(matches!(
            lindblad_reference(&spec, &excited(), &ops::excitation(), &[1.0], 1e-10),
            Err(OracleError::NonzeroDelay { index: 0 })
        ));
    }

    #[test]
    fn regression_equal_time_is_population() {
        let spec = markov_qubit(0.8, 1.0);
        let ins = [
            Insertion { time: 1.3, op: ops::sigma_plus(), side: Side::Left },
            Insertion { time: 1.3, op: ops::sigma_minus(), side: Side::Left },
        ];
        let v = lindblad_regression(&spec, &excited(), &ins, 1e-11).unwrap();
        let pop = lindblad_reference(&spec, &excited(), &ops::excitation(), &[1.3], 1e-11).unwrap();
        assert!((v - C64::new(pop.values[0], 0.0)).norm() < 1e-9);
    }

    #[test]
    fn regression_equal_time_g2_vanishes() {
        let spec = markov_qubit(0.8, 1.0);
        let ins = [
            Insertion { time: 0.9, op: ops::sigma_plus(), side: Side::Left },
            Insertion { time: 0.9, op: ops::sigma_minus(), side: Side::Left },
            Insertion { time: 0.9, op: ops::sigma_minus(), side: Side::Left },
            Insertion { time: 0.9, op: ops::sigma_plus(), side: Side::Right },
        ];
        assert!(lindblad_regression(&spec, &excited(), &ins, 1e-11).unwrap().norm() < 1e-14);
    }

    #[test]
    fn closed_decomposition_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = random_state(&mut rng, 2);
        let h = random_hermitian(&mut rng, 2);
        assert!(closed_decomposition_check(&h, &rho, 0.7, 1, 1e-12).unwrap() <= 1e-12);
        assert_eq!(closed_decomposition_check(&ComplexMatrix::zeros(3), &random_state(&mut rng, 3), 1.0, 3, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn oracle_is_chain_free() {
        let src = include_str!("oracle.rs");
        let needle = ["crate", "::", "cascade"].concat();
        assert!(!src.contains(&needle));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn closed_decomposition_matches_direct(seed in 0u64..1000, d in 2usize..=3, n in 1usize..=4, t in 0.1f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_hermitian(&mut rng, d);
            let rho = random_state(&mut rng, d);
            prop_assert!(closed_decomposition_check(&h, &rho, t, n, 1e-12).unwrap() <= 1e-10);
        }
    }
}
