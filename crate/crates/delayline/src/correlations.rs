//! Multi-time correlations by operator insertion on the chain, the output
//! field in terms of system operators, and g2.

use thiserror::Error;

use crate::cascade::{evolve_with_insertions, place, sandwich_traces, CascadeError, ChainInsertion, Closing};
use crate::model::{ChainPlan, NetworkSpec};
pub use crate::model::{Insertion, Side};
use crate::qlinalg::{ComplexMatrix, C64, I, ONE};

pub const FLUX_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("correlation times must satisfy 0 <= t1 <= t2, got t1={t1}, t2={t2}")]
    Ordering { t1: f64, t2: f64 },
    #[error("insertion time {0} is negative or not finite")]
    BadTime(f64),
    #[error("unknown subsystem {0}")]
    UnknownSubsystem(usize),
    #[error("photon flux {flux:.3e} at t={t} is below the floor; g2 is undefined there")]
    ZeroFlux { t: f64, flux: f64 },
    #[error(transparent)]
    Cascade(#[from] CascadeError),
}

/// One term w * a_beta(t - tau) of the output field.
#[derive(Clone, Debug)]
pub struct FieldTerm {
    /// Delay in units of xi.
    pub copy_offset: usize,
    /// Chain copy (1-based) and relative time where the term acts.
    pub copy: usize,
    pub rel: f64,
    pub weight: C64,
    pub channel: usize,
    pub op: ComplexMatrix,
}

/// E_alpha(t) with the vacuum input dropped.
#[derive(Clone, Debug)]
pub struct FieldExpansion {
    pub time: f64,
    pub terms: Vec<FieldTerm>,
}

impl FieldExpansion {
    /// E (adjoint = false) or E^dagger as a sum of chain insertions, one
    /// summand per distinct relative time.
    pub fn chain_insertions(&self, side: Side, adjoint: bool) -> Vec<ChainInsertion> {
        let mut out: Vec<ChainInsertion> = Vec::new();
        for t in &self.terms {
            let op = if adjoint { t.op.adjoint().scale(t.weight.conj()) } else { t.op.scale(t.weight) };
            match out.iter_mut().find(|c| c.rel == t.rel) {
                Some(c) => match c.terms.iter_mut().find(|(l, _)| *l == t.copy) {
                    Some((_, m)) => m.add_scaled(&op, ONE),
                    None => c.terms.push((t.copy, op)),
                },
                None => out.push(ChainInsertion { rel: t.rel, side, terms: vec![(t.copy, op)] }),
            }
        }
        out
    }

    /// The field as one single-copy operator, valid when every term acts at t.
    pub fn local_operator(&self) -> Option<ComplexMatrix> {
        let first = self.terms.first()?;
        let mut m = ComplexMatrix::zeros(first.op.dim());
        for t in &self.terms {
            if t.copy_offset != 0 {
                return None;
            }
            m.add_scaled(&t.op, t.weight);
        }
        Some(m)
    }
}

/// Output field of subsystem `alpha` at time t: one term per kernel entry
/// with t - tau >= 0. Zero-delay terms carry -i Re(gamma), delayed ones
/// -i gamma, halved when t - tau sits exactly on zero.
pub fn field_expansion(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    alpha: usize,
    t: f64,
) -> Result<FieldExpansion, CorrelationError> {
    if alpha >= spec.subsystems.len() {
        return Err(CorrelationError::UnknownSubsystem(alpha));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(CorrelationError::BadTime(t));
    }
    let xi = plan.xi_f64();
    let (l, rel) = place(plan, t);
    let mut terms = Vec::new();
    for (term, &k) in spec.kernel.iter().zip(&plan.offsets) {
        if term.alpha != alpha || term.gamma == C64::new(0.0, 0.0) {
            continue;
        }
        let op = spec.coupling(term.beta).ok_or(CorrelationError::UnknownSubsystem(term.beta))?.clone();
        if k == 0 {
            if term.gamma.re != 0.0 {
                terms.push(FieldTerm { copy_offset: 0, copy: l, rel, weight: -I * term.gamma.re, channel: term.beta, op });
            }
            continue;
        }
        let lag = t - k as f64 * xi;
        if lag < -1e-12 * xi {
            continue;
        }
        let (copy, rel, weight) = if l > k { (l - k, rel, -I * term.gamma) } else { (1, 0.0, -I * term.gamma * 0.5) };
        terms.push(FieldTerm { copy_offset: k, copy, rel, weight, channel: term.beta, op });
    }
    Ok(FieldExpansion { time: t, terms })
}

fn check_time(t: f64) -> Result<(), CorrelationError> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(CorrelationError::BadTime(t));
    }
    Ok(())
}

fn chain_trace(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    t_final: f64,
    insertions: Vec<ChainInsertion>,
    tol: f64,
) -> Result<C64, CorrelationError> {
    Ok(evolve_with_insertions(spec, plan, rho0, t_final, insertions, tol)?.trace())
}

/// Trace of the state after applying the insertions at their times; the
/// trace is taken at the latest insertion time. Simultaneous left insertions
/// compose as L1 L2 .. X in supplied order, right ones as X .. R1 R2.
pub fn multi_time_correlation(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    insertions: &[Insertion],
    tol: f64,
) -> Result<C64, CorrelationError> {
    for ins in insertions {
        check_time(ins.time)?;
    }
    let t_final = insertions.iter().map(|i| i.time).fold(0.0, f64::max);
    let chain = insertions
        .iter()
        .map(|i| {
            let (copy, rel) = place(plan, i.time);
            ChainInsertion::single(copy, rel, i.op.clone(), i.side)
        })
        .collect();
    chain_trace(spec, plan, rho0, t_final, chain, tol)
}

/// <A(t1) B(t2) C(t1)> = tr[B rho_{CA}(t2)] for t2 >= t1.
#[allow(clippy::too_many_arguments)]
pub fn two_time_correlation(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    a: &ComplexMatrix,
    b: &ComplexMatrix,
    c: &ComplexMatrix,
    t1: f64,
    t2: f64,
    tol: f64,
) -> Result<C64, CorrelationError> {
    check_time(t1)?;
    check_time(t2)?;
    if t2 < t1 {
        return Err(CorrelationError::Ordering { t1, t2 });
    }
    let ins = [
        Insertion { time: t2, op: b.clone(), side: Side::Left },
        Insertion { time: t1, op: c.clone(), side: Side::Left },
        Insertion { time: t1, op: a.clone(), side: Side::Right },
    ];
    multi_time_correlation(spec, plan, rho0, &ins, tol)
}

#[derive(Clone, Debug, PartialEq)]
pub struct G2Value {
    pub g2: f64,
    pub numerator: C64,
    pub flux_t1: C64,
    pub flux_t2: C64,
    /// Largest |Im| / |value| over the three correlators.
    pub imag_residue: f64,
}

/// Photon flux <E^dagger E (t)> of the output field.
pub fn output_flux(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    alpha: usize,
    t: f64,
    tol: f64,
) -> Result<C64, CorrelationError> {
    let e = field_expansion(spec, plan, alpha, t)?;
    expanded_trace(spec, plan, rho0, t, vec![e.chain_insertions(Side::Left, false), e.chain_insertions(Side::Right, true)], tol)
}

/// Sum over one summand from each factor, in factor order.
fn expanded_trace(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    t_final: f64,
    factors: Vec<Vec<ChainInsertion>>,
    tol: f64,
) -> Result<C64, CorrelationError> {
    let mut total = C64::new(0.0, 0.0);
    for ins in expand(&factors) {
        total += chain_trace(spec, plan, rho0, t_final, ins, tol)?;
    }
    Ok(total)
}

fn expand(factors: &[Vec<ChainInsertion>]) -> Vec<Vec<ChainInsertion>> {
    factors.iter().fold(vec![Vec::new()], |acc, f| {
        acc.iter()
            .flat_map(|prefix| {
                f.iter().map(move |c| {
                    let mut p = prefix.clone();
                    p.push(c.clone());
                    p
                })
            })
            .collect()
    })
}

/// Normalized second-order correlation of the output field of `alpha`:
/// <E^dag(t1) E^dag(t2) E(t2) E(t1)> / (<E^dag E(t1)> <E^dag E(t2)>).
pub fn g2(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    alpha: usize,
    t1: f64,
    t2: f64,
    tol: f64,
) -> Result<G2Value, CorrelationError> {
    check_time(t1)?;
    check_time(t2)?;
    if t2 < t1 {
        return Err(CorrelationError::Ordering { t1, t2 });
    }
    let e1 = field_expansion(spec, plan, alpha, t1)?;
    let e2 = field_expansion(spec, plan, alpha, t2)?;
    // left side anti-chronological, right side chronological
    let factors = vec![
        e2.chain_insertions(Side::Left, false),
        e1.chain_insertions(Side::Left, false),
        e1.chain_insertions(Side::Right, true),
        e2.chain_insertions(Side::Right, true),
    ];
    let flux_t1 = output_flux(spec, plan, rho0, alpha, t1, tol)?;
    if flux_t1.re < FLUX_FLOOR {
        return Err(CorrelationError::ZeroFlux { t: t1, flux: flux_t1.re });
    }
    let flux_t2 = if t2 == t1 { flux_t1 } else { output_flux(spec, plan, rho0, alpha, t2, tol)? };
    if flux_t2.re < FLUX_FLOOR {
        return Err(CorrelationError::ZeroFlux { t: t2, flux: flux_t2.re });
    }
    let numerator = expanded_trace(spec, plan, rho0, t2, factors, tol)?;
    let residue = |z: C64| if z.norm() > 0.0 { z.im.abs() / z.norm() } else { 0.0 };
    let imag_residue = residue(numerator).max(residue(flux_t1)).max(residue(flux_t2));
    Ok(G2Value { g2: numerator.re / (flux_t1.re * flux_t2.re), numerator, flux_t1, flux_t2, imag_residue })
}

/// The field of `alpha` as a closing on the last copies: one term per kernel
/// entry, copy n - k for delay k xi.
fn field_closing(spec: &NetworkSpec, plan: &ChainPlan, alpha: usize) -> Result<Closing, CorrelationError> {
    let mut closing = Closing::default();
    for (term, &k) in spec.kernel.iter().zip(&plan.offsets) {
        if term.alpha != alpha {
            continue;
        }
        let w = if k == 0 { C64::new(term.gamma.re, 0.0) } else { term.gamma };
        if w == C64::new(0.0, 0.0) {
            continue;
        }
        let a = spec.coupling(term.beta).ok_or(CorrelationError::UnknownSubsystem(term.beta))?;
        let e = a.scale(-I * w);
        closing.right.push((k, e.adjoint()));
        closing.left.push((k, e));
    }
    Ok(closing)
}

/// Times where a delayed field term sits exactly at t - tau = 0 and carries
/// half weight at the chain origin.
fn on_delay_edge(spec: &NetworkSpec, plan: &ChainPlan, alpha: usize, t: f64) -> bool {
    let xi = plan.xi_f64();
    spec.kernel
        .iter()
        .zip(&plan.offsets)
        .any(|(term, &k)| term.alpha == alpha && k > 0 && (t - k as f64 * xi).abs() <= 1e-12 * xi)
}

/// <E^dag E(t)> at ascending times; points inside one interval share a run.
pub fn flux_series(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    alpha: usize,
    times: &[f64],
    tol: f64,
) -> Result<Vec<C64>, CorrelationError> {
    closed_series(spec, plan, rho0, alpha, times, &[], tol, |t| output_flux(spec, plan, rho0, alpha, t, tol))
}

#[allow(clippy::too_many_arguments)]
fn closed_series(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    alpha: usize,
    times: &[f64],
    insertions: &[ChainInsertion],
    tol: f64,
    single: impl Fn(f64) -> Result<C64, CorrelationError>,
) -> Result<Vec<C64>, CorrelationError> {
    if alpha >= spec.subsystems.len() {
        return Err(CorrelationError::UnknownSubsystem(alpha));
    }
    for &t in times {
        check_time(t)?;
    }
    let closing = field_closing(spec, plan, alpha)?;
    let regular: Vec<f64> = times.iter().copied().filter(|&t| !on_delay_edge(spec, plan, alpha, t)).collect();
    let mut batch = sandwich_traces(spec, plan, rho0, &regular, insertions, &closing, tol)?.into_iter();
    times
        .iter()
        .map(|&t| if on_delay_edge(spec, plan, alpha, t) { single(t) } else { Ok(batch.next().expect("one value per time")) })
        .collect()
}

/// g2(t1, t2) for ascending t2 >= t1 with shared chain runs. Points whose
/// flux at t2 is below the floor come back as `ZeroFlux`.
pub fn g2_series(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    alpha: usize,
    t1: f64,
    t2: &[f64],
    tol: f64,
) -> Result<Vec<Result<G2Value, CorrelationError>>, CorrelationError> {
    check_time(t1)?;
    if let Some(&bad) = t2.iter().find(|&&t| t < t1) {
        return Err(CorrelationError::Ordering { t1, t2: bad });
    }
    let flux_t1 = output_flux(spec, plan, rho0, alpha, t1, tol)?;
    if flux_t1.re < FLUX_FLOOR {
        return Err(CorrelationError::ZeroFlux { t: t1, flux: flux_t1.re });
    }
    let e1 = field_expansion(spec, plan, alpha, t1)?;
    let mut numerators = vec![C64::new(0.0, 0.0); t2.len()];
    let single = |t| -> Result<C64, CorrelationError> {
        let e2 = field_expansion(spec, plan, alpha, t)?;
        let factors = vec![
            e2.chain_insertions(Side::Left, false),
            e1.chain_insertions(Side::Left, false),
            e1.chain_insertions(Side::Right, true),
            e2.chain_insertions(Side::Right, true),
        ];
        expanded_trace(spec, plan, rho0, t, factors, tol)
    };
    let edge: Vec<bool> = t2.iter().map(|&t| on_delay_edge(spec, plan, alpha, t)).collect();
    for ins in expand(&[e1.chain_insertions(Side::Left, false), e1.chain_insertions(Side::Right, true)]) {
        let part = closed_series(spec, plan, rho0, alpha, t2, &ins, tol, |_| Ok(C64::new(0.0, 0.0)))?;
        for (acc, v) in numerators.iter_mut().zip(part) {
            *acc += v;
        }
    }
    for (k, &t) in t2.iter().enumerate() {
        if edge[k] {
            numerators[k] = single(t)?;
        }
    }
    let fluxes = flux_series(spec, plan, rho0, alpha, t2, tol)?;
    let residue = |z: C64| if z.norm() > 0.0 { z.im.abs() / z.norm() } else { 0.0 };
    Ok(t2
        .iter()
        .zip(numerators.into_iter().zip(fluxes))
        .map(|(&t, (numerator, flux_t2))| {
            if flux_t2.re < FLUX_FLOOR {
                return Err(CorrelationError::ZeroFlux { t, flux: flux_t2.re });
            }
            let imag_residue = residue(numerator).max(residue(flux_t1)).max(residue(flux_t2));
            Ok(G2Value { g2: numerator.re / (flux_t1.re * flux_t2.re), numerator, flux_t1, flux_t2, imag_residue })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::observable_series;
    use crate::model::{driven_qubit, plan_chain, KernelTerm, Rational};
    use crate::oracle::lindblad_regression;
    use crate::qlinalg::ops;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn ground() -> ComplexMatrix {
        ComplexMatrix::diag(&[c(1.0), c(0.0)])
    }

    fn excited() -> ComplexMatrix {
        ComplexMatrix::diag(&[c(0.0), c(1.0)])
    }

    /// Driven qubit whose delayed term has zero amplitude: the chain is
    /// built with copies but the dynamics are Markovian.
    fn silent_feedback(omega: f64, gamma: f64) -> NetworkSpec {
        driven_qubit(
            omega,
            vec![
                KernelTerm::new(0, 0, c(gamma), Rational::from_integer(0)),
                KernelTerm::new(0, 0, c(0.0), Rational::new(1, 2)),
            ],
        )
    }

    fn feedback(omega: f64, gamma: f64, phi: f64) -> NetworkSpec {
        driven_qubit(
            omega,
            vec![
                KernelTerm::new(0, 0, c(gamma), Rational::from_integer(0)),
                KernelTerm::new(0, 0, C64::from_polar(gamma, phi), Rational::from_integer(1)),
            ],
        )
    }

    #[test]
    fn field_terms_follow_the_delay() {
        let spec = crate::model::validate(&feedback(0.5, 0.8, 0.3)).unwrap();
        let plan = plan_chain(&spec, 3.0).unwrap();
        let early = field_expansion(&spec, &plan, 0, 0.4).unwrap();
        assert_eq!(early.terms.len(), 1);
        assert!((early.terms[0].weight - C64::new(0.0, -0.8)).norm() < 1e-15);
        let late = field_expansion(&spec, &plan, 0, 1.4).unwrap();
        assert_eq!(late.terms.len(), 2);
        let delayed = late.terms.iter().find(|t| t.copy_offset == 1).unwrap();
        assert_eq!(delayed.copy, 1);
        assert!((delayed.rel - 0.4).abs() < 1e-12);
        assert!((delayed.weight - -I * C64::from_polar(0.8, 0.3)).norm() < 1e-15);
        let edge = field_expansion(&spec, &plan, 0, 1.0).unwrap();
        let half = edge.terms.iter().find(|t| t.copy_offset == 1).unwrap();
        assert_eq!((half.copy, half.rel), (1, 0.0));
        assert!((half.weight - -I * C64::from_polar(0.4, 0.3)).norm() < 1e-15);
        assert_eq!(edge.chain_insertions(Side::Left, false).len(), 2);
    }

    #[test]
    fn identity_insertions_give_observable() {
        let spec = feedback(0.9, 0.6, 1.1);
        let plan = plan_chain(&spec, 2.5).unwrap();
        let rho0 = excited();
        let pop = ops::sigma_plus().matmul(&ops::sigma_minus());
        let id = ComplexMatrix::identity(2);
        for &t2 in &[0.7, 1.6, 2.3] {
            let want = observable_series(&spec, &plan, &rho0, &pop, &[t2], 1e-11).unwrap().values[0];
            let got = two_time_correlation(&spec, &plan, &rho0, &id, &pop, &id, 0.3, t2, 1e-11).unwrap();
            assert!((got - c(want)).norm() < 1e-10, "t2={t2}: {got} vs {want}");
        }
        let one = multi_time_correlation(&spec, &plan, &rho0, &[], 1e-11).unwrap();
        assert!((one - ONE).norm() < 1e-12);
    }

    #[test]
    fn equal_times_sandwich_the_state() {
        let spec = feedback(0.7, 0.5, 0.4);
        let plan = plan_chain(&spec, 2.0).unwrap();
        let rho0 = excited();
        let (a, b, cc) = (ops::sigma_plus(), ops::sigma_x(), ops::sigma_minus());
        let t = 1.3;
        let got = two_time_correlation(&spec, &plan, &rho0, &a, &b, &cc, t, t, 1e-11).unwrap();
        let rho = crate::cascade::reconstruct_state(&spec, &plan, &rho0, t, 1e-11).unwrap().rho;
        let want = b.matmul(&cc).matmul(&rho).matmul(&a).trace();
        assert!((got - want).norm() < 1e-10);
    }

    #[test]
    fn hermitian_symmetry_with_feedback() {
        let spec = feedback(1.1, 0.7, 2.0);
        let plan = plan_chain(&spec, 3.0).unwrap();
        let rho0 = excited();
        let (a, b, cc) = (ops::sigma_plus(), ops::sigma_y(), ops::sigma_x().matmul(&ops::sigma_minus()));
        for &(t1, t2) in &[(0.4, 0.9), (0.8, 1.3), (1.7, 2.6), (0.3, 2.9)] {
            let lhs = two_time_correlation(&spec, &plan, &rho0, &a, &b, &cc, t1, t2, 1e-11).unwrap();
            let rhs = two_time_correlation(&spec, &plan, &rho0, &cc.adjoint(), &b.adjoint(), &a.adjoint(), t1, t2, 1e-11)
                .unwrap();
            assert!((lhs.conj() - rhs).norm() < 1e-10, "({t1},{t2}): {lhs} vs {rhs}");
        }
    }

    #[test]
    fn no_feedback_matches_regression_oracle() {
        let spec = silent_feedback(1.3, 0.6);
        let plan = plan_chain(&spec, 2.0).unwrap();
        let markov = spec.without_feedback();
        let rho0 = ground();
        let (sp, sm) = (ops::sigma_plus(), ops::sigma_minus());
        let pop = sp.matmul(&sm);
        // t1 and t2 fall in different intervals and on both sides of t2'
        for &(t1, t2) in &[(0.2, 0.4), (0.45, 0.7), (0.3, 1.9), (1.2, 1.6)] {
            let got = two_time_correlation(&spec, &plan, &rho0, &sp, &pop, &sm, t1, t2, 1e-11).unwrap();
            let ins = [
                Insertion { time: t1, op: sm.clone(), side: Side::Left },
                Insertion { time: t1, op: sp.clone(), side: Side::Right },
                Insertion { time: t2, op: pop.clone(), side: Side::Left },
            ];
            let want = lindblad_regression(&markov, &rho0, &ins, 1e-12).unwrap();
            assert!((got - want).norm() < 1e-8, "({t1},{t2}): {got} vs {want}");
        }
    }

    #[test]
    fn four_point_matches_regression_oracle() {
        let spec = silent_feedback(0.9, 0.5);
        let plan = plan_chain(&spec, 2.0).unwrap();
        let markov = spec.without_feedback();
        let rho0 = excited();
        let (sp, sm) = (ops::sigma_plus(), ops::sigma_minus());
        let (t1, t2) = (0.35, 1.8);
        let ins = [
            Insertion { time: t2, op: sm.clone(), side: Side::Left },
            Insertion { time: t1, op: sm.clone(), side: Side::Left },
            Insertion { time: t1, op: sp.clone(), side: Side::Right },
            Insertion { time: t2, op: sp.clone(), side: Side::Right },
        ];
        let got = multi_time_correlation(&spec, &plan, &rho0, &ins, 1e-11).unwrap();
        let want = lindblad_regression(&markov, &rho0, &ins, 1e-12).unwrap();
        assert!((got - want).norm() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn g2_without_feedback_matches_oracle() {
        let spec = silent_feedback(std::f64::consts::PI * 0.5, 0.5);
        let plan = plan_chain(&spec, 2.0).unwrap();
        let markov = spec.without_feedback();
        let rho0 = ground();
        let e = ops::sigma_minus().scale(C64::new(0.0, -0.5));
        let ed = e.adjoint();
        let oracle = |ins: &[(f64, &ComplexMatrix, Side)]| {
            let ins: Vec<Insertion> = ins.iter().map(|(t, m, s)| Insertion { time: *t, op: (*m).clone(), side: *s }).collect();
            lindblad_regression(&markov, &rho0, &ins, 1e-12).unwrap()
        };
        for &(t1, t2) in &[(0.6, 0.6), (0.6, 1.3), (1.1, 1.9)] {
            let got = g2(&spec, &plan, &rho0, 0, t1, t2, 1e-11).unwrap();
            let num = oracle(&[(t2, &e, Side::Left), (t1, &e, Side::Left), (t1, &ed, Side::Right), (t2, &ed, Side::Right)]);
            let f1 = oracle(&[(t1, &e, Side::Left), (t1, &ed, Side::Right)]);
            let f2 = oracle(&[(t2, &e, Side::Left), (t2, &ed, Side::Right)]);
            let want = num.re / (f1.re * f2.re);
            assert!((got.g2 - want).abs() < 1e-8, "({t1},{t2}): {} vs {want}", got.g2);
            assert!(got.imag_residue < 1e-9);
            if t1 == t2 {
                assert!(got.g2.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn g2_with_feedback_is_real_and_antibunched() {
        let spec = feedback(std::f64::consts::PI, 1.0, 0.0);
        let plan = plan_chain(&spec, 2.0).unwrap();
        let rho0 = ground();
        let same = g2(&spec, &plan, &rho0, 0, 1.5, 1.5, 1e-10).unwrap();
        assert!(same.imag_residue < 1e-9);
        let later = g2(&spec, &plan, &rho0, 0, 0.5, 1.7, 1e-10).unwrap();
        assert!(later.imag_residue < 1e-9);
        assert!(later.g2 > 0.0);
    }

    #[test]
    fn series_matches_pointwise_g2() {
        let spec = feedback(std::f64::consts::PI, 1.0, std::f64::consts::PI);
        let plan = plan_chain(&spec, 3.0).unwrap();
        let rho0 = ground();
        let t1 = 0.7;
        // includes t2 = t1, an exact delay edge and points on both sides of t1'
        let t2 = [0.7, 0.9, 1.0, 1.2, 1.65, 1.7, 1.85, 2.4, 2.95];
        let series = g2_series(&spec, &plan, &rho0, 0, t1, &t2, 1e-11).unwrap();
        for (&t, got) in t2.iter().zip(series) {
            let got = got.unwrap();
            let want = g2(&spec, &plan, &rho0, 0, t1, t, 1e-11).unwrap();
            assert!((got.g2 - want.g2).abs() < 1e-9, "t2={t}: {} vs {}", got.g2, want.g2);
            assert!((got.flux_t2 - want.flux_t2).norm() < 1e-10);
        }
    }

    #[test]
    fn mean_field_at_delay_edge_is_midpoint() {
        let spec = crate::model::validate(&feedback(0.6, 0.9, 0.8)).unwrap();
        let plan = plan_chain(&spec, 2.0).unwrap();
        let rho0 = ComplexMatrix::from_real(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let mean = |t: f64| {
            let e = field_expansion(&spec, &plan, 0, t).unwrap();
            expanded_trace(&spec, &plan, &rho0, t, vec![e.chain_insertions(Side::Left, false)], 1e-12).unwrap()
        };
        let mid = (mean(1.0 - 1e-7) + mean(1.0 + 1e-7)) * 0.5;
        assert!((mean(1.0) - mid).norm() < 1e-6);
        assert!((mean(1.0 - 1e-7) - mean(1.0 + 1e-7)).norm() > 0.1);
    }

    #[test]
    fn ground_start_has_no_flux_at_zero() {
        let spec = feedback(1.0, 1.0, 0.0);
        let plan = plan_chain(&spec, 1.0).unwrap();
        let err = g2(&spec, &plan, &ground(), 0, 0.0, 0.5, 1e-10).unwrap_err();
        assert!(matches!(err, CorrelationError::ZeroFlux { .. }));
        let err = g2(&spec, &plan, &ground(), 0, 0.5, 0.2, 1e-10).unwrap_err();
        assert!(matches!(err, CorrelationError::Ordering { .. }));
    }
}
