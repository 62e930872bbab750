//! The two-interval chain run as a teleportation protocol: S0 and S2 share a
//! maximally entangled pair, S1 starts in rho(0), S1 S2 evolve under the
//! chain maps and S0 S1 are measured in the Bell basis.

use std::f64::consts::PI;

use thiserror::Error;

use crate::cascade::{chain_liouvillian, CascadeError};
use crate::model::{ChainPlan, NetworkSpec};
use crate::qlinalg::{kron, propagate, ComplexMatrix, LinalgError, C64, ONE, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeleportError {
    #[error("time {t} outside ({xi}, {two_xi}]")]
    TimeOutOfRange { t: f64, xi: f64, two_xi: f64 },
    #[error("outcome ({p}, {q}) outside 0..{d}")]
    BadOutcome { p: usize, q: usize, d: usize },
    #[error("initial state has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Propagation(#[from] LinalgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeleportMode {
    /// Bob applies nothing; outcome 00 carries the chain state.
    Postselect,
    /// Bob applies U^(pq) to S2 before the evolution; the chain state then
    /// appears on outcome (p, -q mod D).
    Precorrect { p: usize, q: usize },
}

#[derive(Clone, Debug)]
pub struct BellOutcome {
    pub p: usize,
    pub q: usize,
    pub probability: f64,
    /// State of S2 given the outcome; zero when the probability vanishes.
    pub conditional_state: ComplexMatrix,
}

fn phase(k: usize, d: usize) -> C64 {
    C64::from_polar(1.0, 2.0 * PI * (k % d) as f64 / d as f64)
}

/// |psi^(pq)> = D^{-1/2} sum_mu e^{2 pi i mu p / D} |mu> |mu + q mod D>,
/// ordered by p * D + q.
pub fn bell_basis(d: usize) -> Vec<Vec<C64>> {
    let norm = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(d * d);
    for p in 0..d {
        for q in 0..d {
            let mut v = vec![ZERO; d * d];
            for mu in 0..d {
                v[mu * d + (mu + q) % d] = phase(mu * p, d) * norm;
            }
            out.push(v);
        }
    }
    out
}

/// U^(pq) = sum_mu e^{2 pi i mu p / D} |mu><mu + q mod D|.
pub fn correction_unitary(p: usize, q: usize, d: usize) -> ComplexMatrix {
    let mut u = ComplexMatrix::zeros(d);
    for mu in 0..d {
        u[(mu, (mu + q) % d)] = phase(mu * p, d);
    }
    u
}

/// Bob's after-the-fact correction for outcome (p, q): X^q Z^p, i.e.
/// sum_mu e^{2 pi i mu p / D} |mu + q mod D><mu|. Without dynamics it maps
/// every conditional state back to rho(0).
pub fn bob_correction(p: usize, q: usize, d: usize) -> ComplexMatrix {
    let mut v = ComplexMatrix::zeros(d);
    for mu in 0..d {
        v[((mu + q) % d, mu)] = phase(mu * p, d);
    }
    v
}

/// Run the protocol to time t in (xi, 2 xi] and return every Bell outcome
/// with its probability and conditional S2 state, ordered by p * D + q.
pub fn teleport_protocol(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    t: f64,
    mode: TeleportMode,
    tol: f64,
) -> Result<Vec<BellOutcome>, TeleportError> {
    let d = spec.copy_dim();
    if rho0.dim() != d {
        return Err(TeleportError::DimensionMismatch { expected: d, got: rho0.dim() });
    }
    let xi = plan.xi_f64();
    if !(t > xi && t <= 2.0 * xi * (1.0 + 1e-12)) {
        return Err(TeleportError::TimeOutOfRange { t, xi, two_xi: 2.0 * xi });
    }
    let u = match mode {
        TeleportMode::Postselect => ComplexMatrix::identity(d),
        TeleportMode::Precorrect { p, q } => {
            if p >= d || q >= d {
                return Err(TeleportError::BadOutcome { p, q, d });
            }
            correction_unitary(p, q, d)
        }
    };
    let t_rel = (t - xi).min(xi);
    let two = plan.with_n(2);
    let joint = chain_liouvillian(spec, &two, 2)?;
    let first_only = chain_liouvillian(spec, &two, 1)?;

    // rho_012 = (1/D) sum |mu><nu| (x) rho(0) (x) U|mu><nu|U^dag; S0 is
    // untouched, so each block evolves on S1 S2 alone.
    let dd = d * d;
    let mut rho012 = ComplexMatrix::zeros(d * dd);
    for mu in 0..d {
        for nu in 0..d {
            let mut e = ComplexMatrix::zeros(d);
            e[(mu, nu)] = ONE;
            let s2 = u.matmul(&e).matmul(&u.adjoint());
            let x = kron(rho0, &s2).scale_real(1.0 / d as f64);
            let x = propagate(&joint, &x, 0.0, t_rel, tol)?;
            let x = propagate(&first_only, &x, t_rel, xi, tol)?;
            for a in 0..dd {
                for b in 0..dd {
                    rho012[(mu * dd + a, nu * dd + b)] = x[(a, b)];
                }
            }
        }
    }

    let mut out = Vec::with_capacity(dd);
    for (k, psi) in bell_basis(d).iter().enumerate() {
        // sigma_{ab} = sum <psi|_{01} rho_012 |psi>_{01}
        let mut sigma = ComplexMatrix::zeros(d);
        for i in 0..dd {
            if psi[i] == ZERO {
                continue;
            }
            for j in 0..dd {
                if psi[j] == ZERO {
                    continue;
                }
                let w = psi[i].conj() * psi[j];
                for a in 0..d {
                    for b in 0..d {
                        sigma[(a, b)] += w * rho012[(i * d + a, j * d + b)];
                    }
                }
            }
        }
        let probability = sigma.trace().re;
        let conditional_state = if probability > 0.0 { sigma.scale_real(1.0 / probability) } else { sigma };
        out.push(BellOutcome { p: k / d, q: k % d, probability, conditional_state });
    }
    Ok(out)
}
