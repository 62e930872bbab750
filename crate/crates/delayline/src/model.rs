//! Network specification, kernel terms and chain layout.

use std::collections::BTreeMap;

use num_integer::Integer;
use num_rational::Ratio;
use thiserror::Error;

use crate::qlinalg::{ComplexMatrix, FactorShape, C64};

pub type Rational = Ratio<i64>;

/// Largest copy offset tau/xi accepted before the delays are treated as
/// incommensurable in practice.
pub const MAX_OFFSET: i64 = 1000;

const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("internal Hamiltonian is not Hermitian (residue {residue:e})")]
    NonHermitianHamiltonian { residue: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: String, expected: usize, got: usize },
    #[error("cross-channel kernel term {alpha} <- {beta} with zero delay is not supported")]
    CrossChannelZeroDelay { alpha: String, beta: String },
    #[error("kernel has no terms")]
    EmptyKernel,
    #[error("unknown subsystem id {0}")]
    UnknownSubsystem(usize),
    #[error("subsystem {0} has a kernel term but no coupling operator")]
    MissingCoupling(String),
    #[error("duplicate subsystem name {0}")]
    DuplicateName(String),
    #[error("subsystem dimension must be positive")]
    EmptySubsystem,
    #[error("delay must be non-negative, got {0}")]
    NegativeDelay(Rational),
    #[error("no nonzero delay: supply an explicit interval length")]
    NoNonzeroDelay,
    #[error("delays are not commensurable within bounds: {0}")]
    DenominatorOverflow(String),
    #[error("invalid time {0}")]
    InvalidTime(f64),
    #[error("kernel sample at zero is not real (imaginary part {0:e})")]
    NonHermitianSample(f64),
    #[error("discretization step must be positive")]
    InvalidStep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subsystem {
    pub name: String,
    pub dim: usize,
}

/// One pair gamma*delta(t - delay) + conj(gamma)*delta(t + delay) of F_{alpha beta}.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTerm {
    pub alpha: usize,
    pub beta: usize,
    pub gamma: C64,
    pub delay: Rational,
}

impl KernelTerm {
    pub fn new(alpha: usize, beta: usize, gamma: C64, delay: Rational) -> Self {
        KernelTerm { alpha, beta, gamma, delay }
    }

    pub fn delay_f64(&self) -> f64 {
        ratio_to_f64(self.delay)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub subsystems: Vec<Subsystem>,
    pub h_internal: ComplexMatrix,
    pub couplings: BTreeMap<usize, ComplexMatrix>,
    pub kernel: Vec<KernelTerm>,
}

impl NetworkSpec {
    pub fn copy_dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.dim).product()
    }

    pub fn subsystem_id(&self, name: &str) -> Option<usize> {
        self.subsystems.iter().position(|s| s.name == name)
    }

    pub fn coupling(&self, id: usize) -> Option<&ComplexMatrix> {
        self.couplings.get(&id)
    }

    pub fn nonzero_delays(&self) -> Vec<Rational> {
        self.kernel.iter().map(|k| k.delay).filter(|d| *d != Rational::from_integer(0)).collect()
    }

    /// Copy of the spec with only the zero-delay terms kept.
    pub fn without_feedback(&self) -> NetworkSpec {
        let mut s = self.clone();
        s.kernel.retain(|k| k.delay == Rational::from_integer(0));
        s
    }

    fn name(&self, id: usize) -> String {
        self.subsystems.get(id).map(|s| s.name.clone()).unwrap_or_else(|| id.to_string())
    }
}

pub fn ratio_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn validate(spec: &NetworkSpec) -> Result<NetworkSpec, ModelError> {
    let mut names = std::collections::HashSet::new();
    for s in &spec.subsystems {
        if s.dim == 0 {
            return Err(ModelError::EmptySubsystem);
        }
        if !names.insert(s.name.clone()) {
            return Err(ModelError::DuplicateName(s.name.clone()));
        }
    }
    if spec.subsystems.is_empty() {
        return Err(ModelError::EmptySubsystem);
    }
    let d = spec.copy_dim();
    if spec.h_internal.dim() != d {
        return Err(ModelError::DimensionMismatch {
            what: "hamiltonian".into(),
            expected: d,
            got: spec.h_internal.dim(),
        });
    }
    let residue = spec.h_internal.hermiticity_residue();
    if residue > HERMITIAN_TOL {
        return Err(ModelError::NonHermitianHamiltonian { residue });
    }
    for (&id, a) in &spec.couplings {
        if id >= spec.subsystems.len() {
            return Err(ModelError::UnknownSubsystem(id));
        }
        if a.dim() != d {
            return Err(ModelError::DimensionMismatch {
                what: format!("coupling {}", spec.name(id)),
                expected: d,
                got: a.dim(),
            });
        }
    }
    if spec.kernel.is_empty() {
        return Err(ModelError::EmptyKernel);
    }
    for k in &spec.kernel {
        for id in [k.alpha, k.beta] {
            if id >= spec.subsystems.len() {
                return Err(ModelError::UnknownSubsystem(id));
            }
            if !spec.couplings.contains_key(&id) {
                return Err(ModelError::MissingCoupling(spec.name(id)));
            }
        }
        if k.delay < Rational::from_integer(0) {
            return Err(ModelError::NegativeDelay(k.delay));
        }
        if k.delay == Rational::from_integer(0) && k.alpha != k.beta {
            return Err(ModelError::CrossChannelZeroDelay { alpha: spec.name(k.alpha), beta: spec.name(k.beta) });
        }
    }
    let mut out = spec.clone();
    out.kernel.sort_by_key(|k| (k.alpha, k.beta, k.delay));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainPlan {
    pub xi: Rational,
    pub n: usize,
    /// k = delay / xi, aligned with the spec's kernel order.
    pub offsets: Vec<usize>,
    pub copy_dim: usize,
    pub chain_shape: FactorShape,
    /// Interval cap override; `None` uses the per-dimension default.
    pub max_intervals: Option<usize>,
}

impl ChainPlan {
    pub fn xi_f64(&self) -> f64 {
        ratio_to_f64(self.xi)
    }

    /// Interval index n = ceil(t/xi) and relative time t' in (0, xi];
    /// boundary times go to the earlier interval, t = 0 maps to (1, 0).
    pub fn interval_of(&self, t: f64) -> (usize, f64) {
        interval_of(self.xi_f64(), t)
    }

    pub fn with_cap(mut self, cap: Option<usize>) -> ChainPlan {
        self.max_intervals = cap;
        self
    }

    pub fn max_offset(&self) -> usize {
        self.offsets.iter().copied().max().unwrap_or(0)
    }

    /// Same layout with a different interval count.
    pub fn with_n(&self, n: usize) -> ChainPlan {
        let mut p = self.clone();
        p.n = n.max(1);
        p.chain_shape = FactorShape::uniform(self.copy_dim, p.n).expect("positive dims");
        p
    }
}

pub fn interval_of(xi: f64, t: f64) -> (usize, f64) {
    if t <= 0.0 {
        return (1, 0.0);
    }
    let q = t / xi;
    let r = q.round();
    let n = if r >= 1.0 && (q - r).abs() <= 1e-12 * r { r } else { q.ceil() };
    let n = n.max(1.0) as usize;
    let tp = (t - (n as f64 - 1.0) * xi).clamp(0.0, xi);
    (n, tp)
}

fn overflow(msg: &str) -> ModelError {
    ModelError::DenominatorOverflow(msg.to_string())
}

fn rational_gcd(a: Rational, b: Rational) -> Result<Rational, ModelError> {
    let (an, ad) = (*a.numer() as i128, *a.denom() as i128);
    let (bn, bd) = (*b.numer() as i128, *b.denom() as i128);
    let num = (an * bd).gcd(&(bn * ad));
    let den = ad * bd;
    let g = num.gcd(&den);
    let (num, den) = (num / g, den / g);
    let num = i64::try_from(num).map_err(|_| overflow("gcd numerator"))?;
    let den = i64::try_from(den).map_err(|_| overflow("gcd denominator"))?;
    Ok(Rational::new(num, den))
}

pub fn plan_chain(spec: &NetworkSpec, t_final: f64) -> Result<ChainPlan, ModelError> {
    let delays = spec.nonzero_delays();
    let mut it = delays.into_iter();
    let first = it.next().ok_or(ModelError::NoNonzeroDelay)?;
    let xi = it.try_fold(first, rational_gcd)?;
    plan_chain_with_xi(spec, t_final, xi)
}

/// Layout with a caller-chosen interval length; every delay must be an
/// integer multiple of it.
pub fn plan_chain_with_xi(spec: &NetworkSpec, t_final: f64, xi: Rational) -> Result<ChainPlan, ModelError> {
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(ModelError::InvalidTime(t_final));
    }
    if xi <= Rational::from_integer(0) {
        return Err(ModelError::InvalidTime(ratio_to_f64(xi)));
    }
    let mut offsets = Vec::with_capacity(spec.kernel.len());
    for k in &spec.kernel {
        let q = k.delay / xi;
        if !q.is_integer() {
            return Err(overflow(&format!("delay {} is not a multiple of {}", k.delay, xi)));
        }
        let q = q.to_integer();
        if q > MAX_OFFSET {
            return Err(overflow(&format!("offset {} exceeds {}", q, MAX_OFFSET)));
        }
        offsets.push(q as usize);
    }
    let (n, _) = interval_of(ratio_to_f64(xi), t_final);
    let copy_dim = spec.copy_dim();
    Ok(ChainPlan {
        xi,
        n,
        offsets,
        copy_dim,
        chain_shape: FactorShape::uniform(copy_dim, n).map_err(|_| ModelError::EmptySubsystem)?,
        max_intervals: None,
    })
}

/// Left-Riemann discretization of a Hermitian kernel f into terms of one
/// channel pair. The j = 0 sample carries half weight per term so that the
/// term pair reproduces h*f(0)*delta(t).
pub fn discretize_kernel(
    f: impl Fn(f64) -> C64,
    alpha: usize,
    beta: usize,
    h: Rational,
    cutoff: Rational,
) -> Result<Vec<KernelTerm>, ModelError> {
    if h <= Rational::from_integer(0) {
        return Err(ModelError::InvalidStep);
    }
    let f0 = f(0.0);
    if f0.im.abs() > 1e-12 {
        return Err(ModelError::NonHermitianSample(f0.im));
    }
    let jmax = (cutoff / h).floor().to_integer().max(0);
    let hf = ratio_to_f64(h);
    let mut terms = Vec::with_capacity(jmax as usize + 1);
    for j in 0..=jmax {
        let delay = h * Rational::from_integer(j);
        let sample = if j == 0 { C64::new(f0.re, 0.0) } else { f(ratio_to_f64(delay)) };
        let w = if j == 0 { 2.0 } else { 1.0 };
        terms.push(KernelTerm { alpha, beta, gamma: sample * (hf / w), delay });
    }
    Ok(terms)
}

/// Single-qubit network A with H = omega (sigma_- + sigma_+) and coupling sigma_-.
pub fn driven_qubit(omega: f64, kernel: Vec<KernelTerm>) -> NetworkSpec {
    use crate::qlinalg::ops;
    let h = (&ops::sigma_minus() + &ops::sigma_plus()).scale_real(omega);
    let mut couplings = BTreeMap::new();
    couplings.insert(0, ops::sigma_minus());
    NetworkSpec {
        subsystems: vec![Subsystem { name: "A".into(), dim: 2 }],
        h_internal: h,
        couplings,
        kernel,
    }
}

/// Expectation values on a time grid with diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservableSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub imag_residue: f64,
    pub max_trace_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Single-copy operator applied at a physical time, on the left or right of the state.
#[derive(Clone, Debug)]
pub struct Insertion {
    pub time: f64,
    pub op: ComplexMatrix,
    pub side: Side,
}

/// Driven qubits A and B emitting into each other: A reaches B after `ab`,
/// B reaches A after `ba`, both with phase `phi`.
pub fn backscatter_pair(omega: f64, gamma: f64, phi: f64, ab: Rational, ba: Rational) -> NetworkSpec {
    use crate::qlinalg::{embed, ops};
    let shape = FactorShape::new(vec![2, 2]).unwrap();
    let a = embed(&ops::sigma_minus(), &shape, 0).unwrap();
    let b = embed(&ops::sigma_minus(), &shape, 1).unwrap();
    let drive_b = b.scale(C64::from_polar(omega, phi));
    let h = &(&a + &a.adjoint()).scale_real(omega) + &(&drive_b + &drive_b.adjoint());
    let mut couplings = BTreeMap::new();
    couplings.insert(0, a);
    couplings.insert(1, b);
    let zero = Rational::from_integer(0);
    let g = C64::new(gamma, 0.0);
    let gp = C64::from_polar(gamma, phi);
    NetworkSpec {
        subsystems: vec![Subsystem { name: "A".into(), dim: 2 }, Subsystem { name: "B".into(), dim: 2 }],
        h_internal: h,
        couplings,
        kernel: vec![
            KernelTerm::new(0, 0, g, zero),
            KernelTerm::new(1, 1, g, zero),
            KernelTerm::new(1, 0, gp, ab),
            KernelTerm::new(0, 1, gp, ba),
        ],
    }
}
