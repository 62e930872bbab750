//! Dense complex matrices, tensor-product helpers and an adaptive
//! Runge-Kutta propagator.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("factor position {position} out of range for {factors} factors")]
    PositionOutOfRange { position: usize, factors: usize },
    #[error("invalid factor index set for partial trace")]
    InvalidTraceIndex,
    #[error("matrix must be square and non-empty")]
    NotSquare,
    #[error("factor dimensions must be positive")]
    EmptyFactor,
    #[error("invalid time interval [{t0}, {t1}]")]
    InvalidInterval { t0: f64, t1: f64 },
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("step size underflow at t = {t} (h = {h}); generator too stiff for explicit integration")]
    StepUnderflow { t: f64, h: f64 },
}

/// Square complex matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    dim: usize,
    data: Vec<C64>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix({}x{})", self.dim, self.dim)?;
        for i in 0..self.dim {
            let row: Vec<String> = (0..self.dim)
                .map(|j| {
                    let z = self[(i, j)];
                    format!("{:+.4}{:+.4}i", z.re, z.im)
                })
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

impl ComplexMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be at least 1");
        ComplexMatrix { dim, data: vec![ZERO; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = ONE;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.data[i * dim + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_vec(dim: usize, data: Vec<C64>) -> Result<Self, LinalgError> {
        if dim == 0 {
            return Err(LinalgError::NotSquare);
        }
        if data.len() != dim * dim {
            return Err(LinalgError::DimensionMismatch { expected: dim * dim, got: data.len() });
        }
        Ok(ComplexMatrix { dim, data })
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self, LinalgError> {
        let dim = rows.len();
        if dim == 0 {
            return Err(LinalgError::NotSquare);
        }
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            if r.len() != dim {
                return Err(LinalgError::NotSquare);
            }
            data.extend_from_slice(r);
        }
        Ok(ComplexMatrix { dim, data })
    }

    pub fn from_real(rows: &[&[f64]]) -> Self {
        let rows: Vec<Vec<C64>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| C64::new(x, 0.0)).collect())
            .collect();
        Self::from_rows(&rows).expect("square real matrix")
    }

    pub fn diag(values: &[C64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// |v><w| for column vectors v, w.
    pub fn outer(v: &[C64], w: &[C64]) -> Self {
        assert_eq!(v.len(), w.len());
        Self::from_fn(v.len(), |i, j| v[i] * w[j].conj())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn adjoint(&self) -> Self {
        let d = self.dim;
        Self::from_fn(d, |i, j| self.data[j * d + i].conj())
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        Self::from_fn(d, |i, j| self.data[j * d + i])
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).sum()
    }

    pub fn scale(&self, s: C64) -> Self {
        ComplexMatrix { dim: self.dim, data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        ComplexMatrix { dim: self.dim, data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn add_scaled(&mut self, other: &ComplexMatrix, s: C64) {
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> Self {
        assert_eq!(self.dim, other.dim, "matmul dimension mismatch");
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                if a == ZERO {
                    continue;
                }
                let row = &other.data[k * d..(k + 1) * d];
                let dst = &mut out.data[i * d..(i + 1) * d];
                for (o, b) in dst.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn commutator(&self, other: &ComplexMatrix) -> Self {
        &self.matmul(other) - &other.matmul(self)
    }

    /// tr(self^dagger other)
    pub fn hs_inner(&self, other: &ComplexMatrix) -> C64 {
        assert_eq!(self.dim, other.dim);
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
    }

    /// tr(self other)
    pub fn trace_product(&self, other: &ComplexMatrix) -> C64 {
        assert_eq!(self.dim, other.dim);
        let d = self.dim;
        let mut s = ZERO;
        for i in 0..d {
            for k in 0..d {
                s += self.data[i * d + k] * other.data[k * d + i];
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &ComplexMatrix) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    pub fn hermiticity_residue(&self) -> f64 {
        let d = self.dim;
        let mut r: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                r = r.max((self.data[i * d + j] - self.data[j * d + i].conj()).norm());
            }
        }
        r
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_residue() <= tol
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.matmul(&self.adjoint()).max_abs_diff(&Self::identity(self.dim)) <= tol
    }

    /// Eigenvalues (ascending) and eigenvectors (columns) of the Hermitian part.
    pub fn hermitian_eigen(&self) -> (Vec<f64>, ComplexMatrix) {
        let d = self.dim;
        let m = nalgebra::DMatrix::<C64>::from_fn(d, d, |i, j| {
            0.5 * (self.data[i * d + j] + self.data[j * d + i].conj())
        });
        let eig = m.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = Self::from_fn(d, |i, j| eig.eigenvectors[(i, order[j])]);
        (values, vectors)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.hermitian_eigen().0[0]
    }

    /// exp(-i H t) for Hermitian H.
    pub fn unitary_evolution(&self, t: f64) -> ComplexMatrix {
        let (vals, vecs) = self.hermitian_eigen();
        let phases: Vec<C64> = vals.iter().map(|&v| (-I * v * t).exp()).collect();
        let d = self.dim;
        let scaled = Self::from_fn(d, |i, j| vecs[(i, j)] * phases[j]);
        scaled.matmul(&vecs.adjoint())
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.dim + j]
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, rhs.dim);
        ComplexMatrix {
            dim: self.dim,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, rhs.dim);
        ComplexMatrix {
            dim: self.dim,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(rhs)
    }
}

/// Common single-qubit operators in the {|0>, |1>} basis, |1> excited.
pub mod ops {
    use super::*;

    pub fn sigma_minus() -> ComplexMatrix {
        ComplexMatrix::from_real(&[&[0.0, 1.0], &[0.0, 0.0]])
    }
    pub fn sigma_plus() -> ComplexMatrix {
        sigma_minus().adjoint()
    }
    pub fn sigma_x() -> ComplexMatrix {
        ComplexMatrix::from_real(&[&[0.0, 1.0], &[1.0, 0.0]])
    }
    pub fn sigma_y() -> ComplexMatrix {
        ComplexMatrix::from_rows(&[vec![ZERO, -I], vec![I, ZERO]]).unwrap()
    }
    pub fn sigma_z() -> ComplexMatrix {
        ComplexMatrix::from_real(&[&[1.0, 0.0], &[0.0, -1.0]])
    }
    /// sigma_+ sigma_-, the excitation number.
    pub fn excitation() -> ComplexMatrix {
        ComplexMatrix::from_real(&[&[0.0, 0.0], &[0.0, 1.0]])
    }
}

/// Tensor-factor dimensions of a composite space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorShape {
    dims: Vec<usize>,
}

impl FactorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self, LinalgError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(LinalgError::EmptyFactor);
        }
        Ok(FactorShape { dims })
    }

    pub fn uniform(d: usize, n: usize) -> Result<Self, LinalgError> {
        Self::new(vec![d; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn factors(&self) -> usize {
        self.dims.len()
    }

    pub fn total(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major stride of factor `position`.
    pub fn stride(&self, position: usize) -> usize {
        self.dims[position + 1..].iter().product()
    }
}

pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let (da, db) = (a.dim, b.dim);
    let d = da * db;
    let mut out = ComplexMatrix::zeros(d);
    for i in 0..da {
        for j in 0..da {
            let x = a.data[i * da + j];
            if x == ZERO {
                continue;
            }
            for k in 0..db {
                for l in 0..db {
                    out.data[(i * db + k) * d + (j * db + l)] = x * b.data[k * db + l];
                }
            }
        }
    }
    out
}

pub fn kron_all(factors: &[ComplexMatrix]) -> ComplexMatrix {
    let mut it = factors.iter();
    let first = it.next().expect("at least one factor").clone();
    it.fold(first, |acc, f| kron(&acc, f))
}

pub fn embed(a: &ComplexMatrix, shape: &FactorShape, position: usize) -> Result<ComplexMatrix, LinalgError> {
    if position >= shape.factors() {
        return Err(LinalgError::PositionOutOfRange { position, factors: shape.factors() });
    }
    if a.dim != shape.dims[position] {
        return Err(LinalgError::DimensionMismatch { expected: shape.dims[position], got: a.dim });
    }
    let left = ComplexMatrix::identity(shape.dims[..position].iter().product());
    let right = ComplexMatrix::identity(shape.stride(position));
    Ok(kron(&kron(&left, a), &right))
}

pub fn partial_trace(x: &ComplexMatrix, shape: &FactorShape, traced: &[usize]) -> Result<ComplexMatrix, LinalgError> {
    if x.dim != shape.total() {
        return Err(LinalgError::DimensionMismatch { expected: shape.total(), got: x.dim });
    }
    let nf = shape.factors();
    let mut is_traced = vec![false; nf];
    for &t in traced {
        if t >= nf || is_traced[t] {
            return Err(LinalgError::InvalidTraceIndex);
        }
        is_traced[t] = true;
    }
    let kept: Vec<usize> = (0..nf).filter(|&f| !is_traced[f]).collect();
    let gone: Vec<usize> = (0..nf).filter(|&f| is_traced[f]).collect();
    let kept_dims: Vec<usize> = kept.iter().map(|&f| shape.dims[f]).collect();
    let gone_dims: Vec<usize> = gone.iter().map(|&f| shape.dims[f]).collect();
    let dk: usize = kept_dims.iter().product();
    let dg: usize = gone_dims.iter().product();
    let strides: Vec<usize> = (0..nf).map(|f| shape.stride(f)).collect();

    // Full-space offset contributed by each kept / traced multi-index.
    let offsets = |sel: &[usize], dims: &[usize], count: usize| -> Vec<usize> {
        (0..count)
            .map(|mut r| {
                let mut off = 0;
                for (f, &d) in sel.iter().zip(dims).rev() {
                    off += (r % d) * strides[*f];
                    r /= d;
                }
                off
            })
            .collect()
    };
    let kept_off = offsets(&kept, &kept_dims, dk);
    let gone_off = offsets(&gone, &gone_dims, dg);

    let mut out = ComplexMatrix::zeros(dk.max(1));
    let d = x.dim;
    for a in 0..dk {
        for b in 0..dk {
            let mut s = ZERO;
            for &g in &gone_off {
                s += x.data[(kept_off[a] + g) * d + kept_off[b] + g];
            }
            out.data[a * dk.max(1) + b] = s;
        }
    }
    Ok(out)
}

/// Matrix units |mu><nu|, ordered with index mu*d + nu.
pub fn matrix_units_basis(d: usize) -> Vec<ComplexMatrix> {
    assert!(d >= 1);
    let mut basis = Vec::with_capacity(d * d);
    for mu in 0..d {
        for nu in 0..d {
            let mut e = ComplexMatrix::zeros(d);
            e[(mu, nu)] = ONE;
            basis.push(e);
        }
    }
    basis
}

/// Linear action X -> G(X) on a flattened row-major operator.
pub trait Generator {
    fn apply(&self, x: &[C64], out: &mut [C64]);
}

impl<F: Fn(&[C64], &mut [C64])> Generator for F {
    fn apply(&self, x: &[C64], out: &mut [C64]) {
        self(x, out)
    }
}

mod dop853 {
    pub const STAGES: usize = 12;
    // nodes; generators here are autonomous, so only the tableau check reads them
    #[cfg_attr(not(test), allow(dead_code))]
    pub const C: [f64; 12] = [
        0.0,
        0.05260015195876773,
        0.0789002279381516,
        0.1183503419072274,
        0.2816496580927726,
        0.3333333333333333,
        0.25,
        0.3076923076923077,
        0.6512820512820513,
        0.6,
        0.8571428571428571,
        1.0,
    ];
    pub const A: [&[f64]; 12] = [
        &[],
        &[0.05260015195876773],
        &[0.0197250569845379, 0.0591751709536137],
        &[0.02958758547680685, 0.0, 0.08876275643042054],
        &[0.2413651341592667, 0.0, -0.8845494793282861, 0.924834003261792],
        &[0.037037037037037035, 0.0, 0.0, 0.17082860872947386, 0.12546768756682242],
        &[0.037109375, 0.0, 0.0, 0.17025221101954405, 0.06021653898045596, -0.017578125],
        &[
            0.03709200011850479,
            0.0,
            0.0,
            0.17038392571223998,
            0.10726203044637328,
            -0.015319437748624402,
            0.008273789163814023,
        ],
        &[
            0.6241109587160757,
            0.0,
            0.0,
            -3.3608926294469414,
            -0.868219346841726,
            27.59209969944671,
            20.154067550477894,
            -43.48988418106996,
        ],
        &[
            0.47766253643826434,
            0.0,
            0.0,
            -2.4881146199716677,
            -0.590290826836843,
            21.230051448181193,
            15.279233632882423,
            -33.28821096898486,
            -0.020331201708508627,
        ],
        &[
            -0.9371424300859873,
            0.0,
            0.0,
            5.186372428844064,
            1.0914373489967295,
            -8.149787010746927,
            -18.52006565999696,
            22.739487099350505,
            2.4936055526796523,
            -3.0467644718982196,
        ],
        &[
            2.273310147516538,
            0.0,
            0.0,
            -10.53449546673725,
            -2.0008720582248625,
            -17.9589318631188,
            27.94888452941996,
            -2.8589982771350235,
            -8.87285693353063,
            12.360567175794303,
            0.6433927460157636,
        ],
    ];
    pub const B: [f64; 12] = [
        0.054293734116568765,
        0.0,
        0.0,
        0.0,
        0.0,
        4.450312892752409,
        1.8915178993145003,
        -5.801203960010585,
        0.3111643669578199,
        -0.1521609496625161,
        0.20136540080403034,
        0.04471061572777259,
    ];
    pub const E3: [f64; 12] = [
        -0.18980075407240762,
        0.0,
        0.0,
        0.0,
        0.0,
        4.450312892752409,
        1.8915178993145003,
        -5.801203960010585,
        -0.4226823213237919,
        -0.1521609496625161,
        0.20136540080403034,
        0.02265179219836082,
    ];
    pub const E5: [f64; 12] = [
        0.01312004499419488,
        0.0,
        0.0,
        0.0,
        0.0,
        -1.2251564463762044,
        -0.4957589496572502,
        1.6643771824549864,
        -0.35032884874997366,
        0.3341791187130175,
        0.08192320648511571,
        -0.022355307863886294,
    ];
}

/// Relative/absolute tolerance pair derived from a single scalar `tol`.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Tolerance {
    pub fn from_scalar(tol: f64) -> Result<Self, LinalgError> {
        if !(tol > 0.0) || !tol.is_finite() {
            return Err(LinalgError::InvalidTolerance(tol));
        }
        Ok(Tolerance { rtol: tol, atol: tol * 1e-2 })
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rtol: 1e-10, atol: 1e-12 }
    }
}

/// Sequence of accepted step sizes, with the step counts at which each
/// requested stop time is reached.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub t0: f64,
    pub steps: Vec<f64>,
    pub stops: Vec<(f64, usize)>,
}

impl StepSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Reusable DOP853 stage storage for operators of a fixed flattened length.
pub struct Integrator {
    len: usize,
    k: Vec<Vec<C64>>,
    tmp: Vec<C64>,
    y_new: Vec<C64>,
}

impl Integrator {
    pub fn new(len: usize) -> Self {
        Integrator {
            len,
            k: (0..dop853::STAGES).map(|_| vec![ZERO; len]).collect(),
            tmp: vec![ZERO; len],
            y_new: vec![ZERO; len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// One DOP853 step from y into self.y_new; k[0] must hold G(y).
    fn step<G: Generator + ?Sized>(&mut self, g: &G, y: &[C64], h: f64) {
        for s in 1..dop853::STAGES {
            self.tmp.copy_from_slice(y);
            for (j, &a) in dop853::A[s].iter().enumerate() {
                if a != 0.0 {
                    let ha = h * a;
                    for (t, kj) in self.tmp.iter_mut().zip(&self.k[j]) {
                        *t += kj * ha;
                    }
                }
            }
            let (done, rest) = self.k.split_at_mut(s);
            let _ = done;
            g.apply(&self.tmp, &mut rest[0]);
        }
        self.y_new.copy_from_slice(y);
        for (j, &b) in dop853::B.iter().enumerate() {
            if b != 0.0 {
                let hb = h * b;
                for (t, kj) in self.y_new.iter_mut().zip(&self.k[j]) {
                    *t += kj * hb;
                }
            }
        }
    }

    fn error_norm(&self, y: &[C64], h: f64, tol: Tolerance) -> f64 {
        let mut e5 = 0.0;
        let mut e3 = 0.0;
        for i in 0..self.len {
            let mut s5 = ZERO;
            let mut s3 = ZERO;
            for j in 0..dop853::STAGES {
                let kj = self.k[j][i];
                if dop853::E5[j] != 0.0 {
                    s5 += kj * dop853::E5[j];
                }
                if dop853::E3[j] != 0.0 {
                    s3 += kj * dop853::E3[j];
                }
            }
            let scale = tol.atol + tol.rtol * y[i].norm().max(self.y_new[i].norm());
            e5 += (s5 / scale).norm_sqr();
            e3 += (s3 / scale).norm_sqr();
        }
        if e5 == 0.0 && e3 == 0.0 {
            return 0.0;
        }
        let denom = e5 + 0.01 * e3;
        h.abs() * e5 / (denom * self.len as f64).sqrt()
    }

    fn initial_step<G: Generator + ?Sized>(&mut self, g: &G, y: &[C64], tol: Tolerance, span: f64) -> f64 {
        let scale: Vec<f64> = y.iter().map(|z| tol.atol + tol.rtol * z.norm()).collect();
        let rms = |v: &[C64]| -> f64 {
            (v.iter().zip(&scale).map(|(z, s)| (z / s).norm_sqr()).sum::<f64>() / v.len() as f64).sqrt()
        };
        let d0 = rms(y);
        let d1 = rms(&self.k[0]);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        for (t, (yi, fi)) in self.tmp.iter_mut().zip(y.iter().zip(&self.k[0])) {
            *t = yi + fi * h0;
        }
        let mut f1 = vec![ZERO; self.len];
        g.apply(&self.tmp, &mut f1);
        let diff: Vec<C64> = f1.iter().zip(&self.k[0]).map(|(a, b)| a - b).collect();
        let d2 = rms(&diff) / h0;
        let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 8.0)
        };
        (100.0 * h0).min(h1).min(span)
    }

    /// Adaptive integration of dX/dt = G(X) through each stop time in
    /// ascending order, calling `at_stop(index, y)` on arrival. Returns the
    /// accepted step sequence.
    pub fn integrate<G, F>(
        &mut self,
        g: &G,
        y: &mut [C64],
        t0: f64,
        stops: &[f64],
        tol: Tolerance,
        mut at_stop: F,
    ) -> Result<StepSchedule, LinalgError>
    where
        G: Generator + ?Sized,
        F: FnMut(usize, &[C64]),
    {
        assert_eq!(y.len(), self.len);
        let mut schedule = StepSchedule { t0, steps: Vec::new(), stops: Vec::new() };
        let mut t = t0;
        let mut prev = t0;
        for &s in stops {
            if !(s >= prev) || !s.is_finite() {
                return Err(LinalgError::InvalidInterval { t0: prev, t1: s });
            }
            prev = s;
        }
        let t_end = stops.last().copied().unwrap_or(t0);
        g.apply(y, &mut self.k[0]);
        let mut h = if t_end > t0 { self.initial_step(g, y, tol, t_end - t0) } else { 0.0 };
        const SAFETY: f64 = 0.9;
        for (idx, &stop) in stops.iter().enumerate() {
            while t < stop {
                let remaining = stop - t;
                let last = h >= remaining * (1.0 - 1e-12);
                let h_try = if last { remaining } else { h };
                let min_step = 1e-14 * t.abs().max(1.0);
                if h_try < min_step && !last {
                    return Err(LinalgError::StepUnderflow { t, h: h_try });
                }
                self.step(g, y, h_try);
                let err = self.error_norm(y, h_try, tol);
                if err <= 1.0 || h_try < min_step {
                    y.copy_from_slice(&self.y_new);
                    t = if last { stop } else { t + h_try };
                    schedule.steps.push(h_try);
                    g.apply(y, &mut self.k[0]);
                    let factor = if err == 0.0 { 10.0 } else { (SAFETY * err.powf(-1.0 / 8.0)).clamp(0.2, 10.0) };
                    if !last {
                        h = h_try * factor;
                    } else {
                        h = h.max(h_try * factor);
                    }
                } else {
                    h = h_try * (SAFETY * err.powf(-1.0 / 8.0)).clamp(0.2, 1.0);
                    if h < min_step {
                        return Err(LinalgError::StepUnderflow { t, h });
                    }
                }
            }
            schedule.stops.push((stop, schedule.steps.len()));
            at_stop(idx, y);
        }
        Ok(schedule)
    }

    /// Replay a fixed step sequence (no error control). `at_stop` fires at
    /// every recorded stop.
    pub fn replay<G, F>(&mut self, g: &G, y: &mut [C64], schedule: &StepSchedule, mut at_stop: F)
    where
        G: Generator + ?Sized,
        F: FnMut(usize, &mut [C64]),
    {
        assert_eq!(y.len(), self.len);
        let mut next = 0;
        for (idx, &(_, count)) in schedule.stops.iter().enumerate() {
            while next < count {
                g.apply(y, &mut self.k[0]);
                self.step(g, y, schedule.steps[next]);
                y.copy_from_slice(&self.y_new);
                next += 1;
            }
            at_stop(idx, y);
        }
    }
}

/// Solve dX/dt = G(X), X(t0) = x0, up to t1 with an adaptive DOP853 pair.
pub fn propagate<G: Generator + ?Sized>(
    generator: &G,
    x0: &ComplexMatrix,
    t0: f64,
    t1: f64,
    tol: f64,
) -> Result<ComplexMatrix, LinalgError> {
    if !(t1 >= t0) {
        return Err(LinalgError::InvalidInterval { t0, t1 });
    }
    let tol = Tolerance::from_scalar(tol)?;
    let mut y = x0.data.clone();
    let mut integ = Integrator::new(y.len());
    integ.integrate(generator, &mut y, t0, &[t1], tol, |_, _| {})?;
    Ok(ComplexMatrix { dim: x0.dim, data: y })
}
