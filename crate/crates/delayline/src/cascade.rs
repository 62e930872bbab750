//! Chain of interval copies: cascaded Liouvillian, evolution of product
//! basis operators and the contraction back onto a single copy.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{ChainPlan, KernelTerm, NetworkSpec};
pub use crate::model::{ObservableSeries, Side};
use crate::qlinalg::{
    matrix_units_basis, ComplexMatrix, Generator, Integrator, LinalgError, StepSchedule, Tolerance, C64, I, ONE, ZERO,
};

mod split;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error("copy count {m} out of range 1..={n}")]
    CopyOutOfRange { m: usize, n: usize },
    #[error("time {t} outside [0, {t_max}]")]
    TimeOutOfRange { t: f64, t_max: f64 },
    #[error("times must be ascending")]
    UnsortedTimes,
    #[error("{n} intervals exceed the cap of {cap} for copy dimension {copy_dim} (~{work:.2e} operator entries to evolve); raise --max-intervals to override")]
    ResourceCap { n: usize, cap: usize, copy_dim: usize, work: f64 },
    #[error("operator dimension {got} does not match copy dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("basis must contain {expected} operators, got {got}")]
    BadBasis { expected: usize, got: usize },
    #[error("insertion on copy {copy} at relative time {rel} lies after the final time")]
    InsertionAfterFinal { copy: usize, rel: f64 },
    #[error(transparent)]
    Propagation(#[from] LinalgError),
}

/// Default interval cap: 8 for qubits, 5 for two-qubit copies, otherwise the
/// largest n keeping a chain operator below 2^20 entries.
pub fn default_interval_cap(copy_dim: usize) -> usize {
    match copy_dim {
        1 => 64,
        2 => 8,
        3 | 4 => 5,
        d => {
            let mut n = 1;
            while (d as f64).powi(2 * (n as i32 + 1)) <= (1u64 << 20) as f64 {
                n += 1;
            }
            n
        }
    }
}

/// Operator entries touched per reconstruction: D^(2(n-1)) chain operators
/// of D^(2n) entries each.
pub fn work_estimate(copy_dim: usize, n: usize) -> f64 {
    let d2 = (copy_dim * copy_dim) as f64;
    d2.powi(n as i32 - 1) * d2.powi(n as i32)
}

pub fn check_cap(copy_dim: usize, n: usize, cap: Option<usize>) -> Result<(), CascadeError> {
    let cap = cap.unwrap_or_else(|| default_interval_cap(copy_dim));
    if n > cap {
        return Err(CascadeError::ResourceCap { n, cap, copy_dim, work: work_estimate(copy_dim, n) });
    }
    Ok(())
}

/// Compressed sparse row operator.
#[derive(Clone, Debug)]
pub(crate) struct SparseOp {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOp {
    fn from_rows(dim: usize, rows: Vec<Vec<(usize, C64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in r {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        let mut op = SparseOp { dim, row_ptr, cols, vals };
        op.prune();
        op
    }

    fn prune(&mut self) {
        let mut rows = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            rows.push(self.row(i).filter(|(_, v)| *v != ZERO).collect::<Vec<_>>());
        }
        self.row_ptr.clear();
        self.cols.clear();
        self.vals.clear();
        self.row_ptr.push(0);
        for r in rows {
            for (c, v) in r {
                self.cols.push(c);
                self.vals.push(v);
            }
            self.row_ptr.push(self.cols.len());
        }
    }

    fn zero(dim: usize) -> Self {
        SparseOp { dim, row_ptr: vec![0; dim + 1], cols: vec![], vals: vec![] }
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    fn nnz(&self) -> usize {
        self.vals.len()
    }

    fn approx_eq(&self, other: &SparseOp, tol: f64) -> bool {
        let scale = self.vals.iter().chain(&other.vals).map(|v| v.norm()).fold(1.0, f64::max);
        self.dim == other.dim
            && self.row_ptr == other.row_ptr
            && self.cols == other.cols
            && self.vals.iter().zip(&other.vals).all(|(a, b)| (a - b).norm() <= tol * scale)
    }

    /// Single-copy operator `a` placed on copy `l` (0-based) of `n` copies.
    fn embed_copy(a: &ComplexMatrix, n: usize, l: usize) -> Self {
        SparseOp::embed_factor(a, &vec![a.dim(); n], l)
    }

    /// `a` placed on factor `pos` of a tensor product with the given dims.
    fn embed_factor(a: &ComplexMatrix, dims: &[usize], pos: usize) -> Self {
        let d = a.dim();
        let dim: usize = dims.iter().product();
        let stride: usize = dims[pos + 1..].iter().product();
        let entries: Vec<Vec<(usize, C64)>> = (0..d)
            .map(|p| (0..d).filter(|&q| a[(p, q)] != ZERO).map(|q| (q, a[(p, q)])).collect())
            .collect();
        let rows = (0..dim)
            .map(|r| {
                let digit = (r / stride) % d;
                entries[digit].iter().map(|&(q, v)| (r + q * stride - digit * stride, v)).collect()
            })
            .collect();
        SparseOp::from_rows(dim, rows)
    }

    fn scale(&self, s: C64) -> Self {
        let mut o = self.clone();
        o.vals.iter_mut().for_each(|v| *v *= s);
        o.prune();
        o
    }

    fn add(&self, other: &SparseOp) -> Self {
        let rows = (0..self.dim).map(|i| self.row(i).chain(other.row(i)).collect()).collect();
        SparseOp::from_rows(self.dim, rows)
    }

    fn matmul(&self, other: &SparseOp) -> Self {
        let rows = (0..self.dim)
            .map(|i| {
                let mut r = Vec::new();
                for (k, a) in self.row(i) {
                    for (j, b) in other.row(k) {
                        r.push((j, a * b));
                    }
                }
                r
            })
            .collect();
        SparseOp::from_rows(self.dim, rows)
    }

    fn adjoint(&self) -> Self {
        let mut rows = vec![Vec::new(); self.dim];
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                rows[j].push((i, v.conj()));
            }
        }
        SparseOp::from_rows(self.dim, rows)
    }

    /// out += S x, x and out row-major dim x dim.
    fn left_acc(&self, x: &[C64], out: &mut [C64]) {
        let n = self.dim;
        for i in 0..n {
            let dst = &mut out[i * n..(i + 1) * n];
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let (k, v) = (self.cols[p], self.vals[p]);
                let src = &x[k * n..(k + 1) * n];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    /// row_out += row_x S for a single row vector.
    fn right_acc_row(&self, xrow: &[C64], dst: &mut [C64]) {
        for (k, &xk) in xrow.iter().enumerate() {
            if xk == ZERO {
                continue;
            }
            for p in self.row_ptr[k]..self.row_ptr[k + 1] {
                dst[self.cols[p]] += xk * self.vals[p];
            }
        }
    }
}

/// Generator X -> left X + X right + sum_k P_k X Q_k on a chain of copies.
#[derive(Clone, Debug)]
pub struct ChainLiouvillian {
    dim: usize,
    copies: usize,
    active: usize,
    left: SparseOp,
    right: SparseOp,
    sandwiches: Vec<(SparseOp, SparseOp)>,
}

impl ChainLiouvillian {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn active_copies(&self) -> usize {
        self.active
    }

    pub fn apply_matrix(&self, x: &ComplexMatrix) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.dim);
        self.apply(x.as_slice(), out.as_mut_slice());
        out
    }

    /// Generator of tr[L(X) W] = tr[X L^T(W)], the bilinear transpose.
    pub fn transpose(&self) -> ChainLiouvillian {
        ChainLiouvillian {
            dim: self.dim,
            copies: self.copies,
            active: self.active,
            left: self.right.clone(),
            right: self.left.clone(),
            sandwiches: self.sandwiches.iter().map(|(p, q)| (q.clone(), p.clone())).collect(),
        }
    }

    /// Nonzeros across all sparse factors, a proxy for per-step cost.
    pub fn cost(&self) -> usize {
        self.left.nnz() + self.right.nnz() + self.sandwiches.iter().map(|(p, q)| p.nnz() + q.nnz()).sum::<usize>()
    }
}

impl Generator for ChainLiouvillian {
    fn apply(&self, x: &[C64], out: &mut [C64]) {
        let n = self.dim;
        out.fill(ZERO);
        self.left.left_acc(x, out);
        let mut tmp = vec![ZERO; n];
        for i in 0..n {
            let (xrow, dst) = (&x[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
            self.right.right_acc_row(xrow, dst);
        }
        for (p, q) in &self.sandwiches {
            for i in 0..n {
                let r = p.row_ptr[i]..p.row_ptr[i + 1];
                if r.is_empty() {
                    continue;
                }
                tmp.fill(ZERO);
                for idx in r {
                    let (k, v) = (p.cols[idx], p.vals[idx]);
                    for (t, s) in tmp.iter_mut().zip(&x[k * n..(k + 1) * n]) {
                        *t += v * s;
                    }
                }
                q.right_acc_row(&tmp, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Factor dimensions of a generator's space and the factor holding each
/// (unit, copy) slot.
pub(crate) struct Layout {
    pub(crate) dims: Vec<usize>,
    pub(crate) pos: BTreeMap<(usize, usize), usize>,
}

/// Hamiltonian pieces and coupling operators, each tagged with its unit.
pub(crate) struct Parts {
    pub(crate) h: Vec<(usize, ComplexMatrix)>,
    pub(crate) coupling: BTreeMap<usize, (usize, ComplexMatrix)>,
}

/// Cascaded generator acting on the first `m` of `copies` copies; later
/// copies are spectators.
fn build_liouvillian(spec: &NetworkSpec, offsets: &[usize], copies: usize, m: usize) -> ChainLiouvillian {
    let layout = Layout { dims: vec![spec.copy_dim(); copies], pos: (0..copies).map(|l| ((0, l), l)).collect() };
    let parts = Parts {
        h: vec![(0, spec.h_internal.clone())],
        coupling: spec.couplings.iter().map(|(&ch, a)| (ch, (0, a.clone()))).collect(),
    };
    build_on(&layout, &parts, &spec.kernel, offsets, copies, m)
}

/// Generator on the slots present in `layout`, copies below `m` active.
pub(crate) fn build_on(
    layout: &Layout,
    parts: &Parts,
    kernel: &[KernelTerm],
    offsets: &[usize],
    copies: usize,
    m: usize,
) -> ChainLiouvillian {
    let dims = &layout.dims;
    let dim = dims.iter().product();
    let at = |unit: usize, l: usize| layout.pos.get(&(unit, l)).copied();
    let mut k_eff = SparseOp::zero(dim);
    for l in 0..m {
        for (u, h) in &parts.h {
            if let Some(p) = at(*u, l) {
                k_eff = k_eff.add(&SparseOp::embed_factor(h, dims, p));
            }
        }
    }
    // Sandwich terms grouped by their left factor (channel, copy).
    let mut groups: Vec<((usize, usize), SparseOp)> = Vec::new();
    let mut push = |key: (usize, usize), right: SparseOp| {
        if let Some(g) = groups.iter_mut().find(|g| g.0 == key) {
            g.1 = g.1.add(&right);
        } else {
            groups.push((key, right));
        }
    };
    for (term, &k) in kernel.iter().zip(offsets) {
        let (ua, a_alpha) = &parts.coupling[&term.alpha];
        let (ub, a_beta) = &parts.coupling[&term.beta];
        for l in k..m {
            let Some(pa) = at(*ua, l) else { continue };
            let src = l - k;
            let a = SparseOp::embed_factor(a_alpha, dims, pa);
            let a_dag = a.adjoint();
            if k == 0 {
                let g = term.gamma.re;
                if g == 0.0 {
                    continue;
                }
                k_eff = k_eff.add(&a_dag.matmul(&a).scale(C64::new(0.0, -g)));
                push((term.alpha, l), a_dag.scale(C64::new(2.0 * g, 0.0)));
            } else {
                let gamma = term.gamma;
                if gamma == ZERO {
                    continue;
                }
                let pb = at(*ub, src).expect("layout closed under delayed couplings");
                let b = SparseOp::embed_factor(a_beta, dims, pb);
                k_eff = k_eff.add(&a_dag.matmul(&b).scale(-I * gamma));
                push((term.beta, src), a_dag.scale(gamma));
                push((term.alpha, l), b.adjoint().scale(gamma.conj()));
            }
        }
    }
    let sandwiches = groups
        .into_iter()
        .filter(|(_, r)| r.nnz() > 0)
        .map(|((ch, l), r)| {
            let (u, a) = &parts.coupling[&ch];
            (SparseOp::embed_factor(a, dims, at(*u, l).unwrap()), r)
        })
        .collect();
    ChainLiouvillian {
        dim,
        copies,
        active: m,
        left: k_eff.scale(-I),
        right: k_eff.adjoint().scale(I),
        sandwiches,
    }
}

/// Generator L^(m) on the plan's n copies.
pub fn chain_liouvillian(spec: &NetworkSpec, plan: &ChainPlan, m: usize) -> Result<ChainLiouvillian, CascadeError> {
    if m < 1 || m > plan.n {
        return Err(CascadeError::CopyOutOfRange { m, n: plan.n });
    }
    Ok(build_liouvillian(spec, &plan.offsets, plan.n, m))
}

#[derive(Clone, Debug)]
pub struct ChainOperator {
    pub plan: ChainPlan,
    pub matrix: ComplexMatrix,
}

impl ChainOperator {
    pub fn new(plan: ChainPlan, matrix: ComplexMatrix) -> Result<Self, CascadeError> {
        let expected = plan.chain_shape.total();
        if matrix.dim() != expected {
            return Err(CascadeError::DimensionMismatch { expected, got: matrix.dim() });
        }
        Ok(ChainOperator { plan, matrix })
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub time: f64,
    pub rho: ComplexMatrix,
    pub trace_error: f64,
    pub hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

impl ReconstructionResult {
    fn from_rho(time: f64, rho: ComplexMatrix) -> Self {
        ReconstructionResult {
            time,
            trace_error: (rho.trace() - ONE).norm(),
            hermiticity_error: rho.hermiticity_residue(),
            min_eigenvalue: rho.min_eigenvalue(),
            rho,
        }
    }
}

/// Sum of single-copy operators, each on its chain copy (1-based), inserted
/// at relative time `rel`.
#[derive(Clone, Debug)]
pub struct ChainInsertion {
    pub rel: f64,
    pub side: Side,
    pub terms: Vec<(usize, ComplexMatrix)>,
}

impl ChainInsertion {
    pub fn single(copy: usize, rel: f64, op: ComplexMatrix, side: Side) -> Self {
        ChainInsertion { rel, side, terms: vec![(copy, op)] }
    }

    pub fn max_copy(&self) -> usize {
        self.terms.iter().map(|t| t.0).max().unwrap_or(1)
    }
}

/// Operators applied to the whole chain at each output time, after the
/// insertions; copies are counted back from the last (0 = copy n).
#[derive(Clone, Debug, Default)]
pub struct Closing {
    pub left: Vec<(usize, ComplexMatrix)>,
    pub right: Vec<(usize, ComplexMatrix)>,
}

impl Closing {
    fn embed(&self, terms: &[(usize, ComplexMatrix)], d: usize, n: usize) -> Option<SparseOp> {
        if terms.is_empty() {
            return None;
        }
        let mut op = SparseOp::zero(d.pow(n as u32));
        for (back, a) in terms.iter().filter(|t| t.0 < n) {
            op = op.add(&SparseOp::embed_copy(a, n, n - 1 - back));
        }
        Some(op)
    }
}

/// Place a physical time on the chain: (copy, relative time).
pub fn place(plan: &ChainPlan, t: f64) -> (usize, f64) {
    plan.interval_of(t)
}

/// Fixed generic operator used to drive the step-size pilot.
fn pilot_factor(d: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(d, |i, j| {
        let x = 0.61 + 0.37 * ((i * 7 + j * 3) % 5) as f64;
        let y = 0.29 * ((i + 2 * j) % 3) as f64 - 0.2;
        C64::new(x, y) / d as f64
    })
}

fn product(factors: &[&ComplexMatrix]) -> ComplexMatrix {
    let owned: Vec<ComplexMatrix> = factors.iter().map(|m| (*m).clone()).collect();
    crate::qlinalg::kron_all(&owned)
}

/// Combined action of simultaneous insertions: X -> L X R.
struct InsertionEvent {
    rel: f64,
    left: Option<SparseOp>,
    right: Option<SparseOp>,
}

const REL_MERGE: f64 = 1e-12;

fn group_events(ins: &[&ChainInsertion], copies: usize) -> Vec<InsertionEvent> {
    let mut out: Vec<InsertionEvent> = Vec::new();
    let mut sorted: Vec<(usize, &&ChainInsertion)> = ins.iter().enumerate().collect();
    sorted.sort_by(|a, b| a.1.rel.total_cmp(&b.1.rel).then(a.0.cmp(&b.0)));
    // relative times equal up to rounding form one event, applied in supplied order
    let mut start = 0;
    while start < sorted.len() {
        let base = sorted[start].1.rel;
        let mut end = start + 1;
        while end < sorted.len() && sorted[end].1.rel - base <= REL_MERGE * base.max(1.0) {
            end += 1;
        }
        sorted[start..end].sort_by_key(|e| e.0);
        start = end;
    }
    for (_, c) in sorted {
        let op = c
            .terms
            .iter()
            .fold(SparseOp::zero(copies_dim(&c.terms, copies)), |acc, (l, a)| acc.add(&SparseOp::embed_copy(a, copies, l - 1)));
        let ev = match out.last_mut() {
            Some(e) if c.rel - e.rel <= REL_MERGE * e.rel.max(1.0) => e,
            _ => {
                out.push(InsertionEvent { rel: c.rel, left: None, right: None });
                out.last_mut().unwrap()
            }
        };
        match c.side {
            // left insertions in supplied order: L1 L2 ... X
            Side::Left => ev.left = Some(ev.left.take().map_or(op.clone(), |l| l.matmul(&op))),
            // right insertions in supplied order: X R1 R2 ...
            Side::Right => ev.right = Some(ev.right.take().map_or(op.clone(), |r| r.matmul(&op))),
        }
    }
    out
}

fn copies_dim(terms: &[(usize, ComplexMatrix)], copies: usize) -> usize {
    terms.first().map_or(1, |t| t.1.dim()).pow(copies as u32)
}

impl InsertionEvent {
    /// X -> L X L^dagger, so the event commutes with the adjoint.
    fn is_adjoint_pair(&self) -> bool {
        match (&self.left, &self.right) {
            (None, None) => true,
            (Some(l), Some(r)) => l.adjoint().approx_eq(r, 1e-14),
            _ => false,
        }
    }
}

fn apply_lr(left: Option<&SparseOp>, right: Option<&SparseOp>, x: &mut [C64], n: usize) {
    if let Some(l) = left {
        let mut out = vec![ZERO; n * n];
        l.left_acc(x, &mut out);
        x.copy_from_slice(&out);
    }
    if let Some(r) = right {
        let mut out = vec![ZERO; n * n];
        for i in 0..n {
            r.right_acc_row(&x[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        x.copy_from_slice(&out);
    }
}

/// tr_{1..n-1}[X (W (x) I)] for X on n copies and W on the first n-1.
fn contract(x: &[C64], w: &[C64], d: usize, n: usize) -> ComplexMatrix {
    let big = d.pow(n as u32);
    let small = big / d;
    let mut out = ComplexMatrix::zeros(d);
    for p in 0..small {
        for q in 0..small {
            let wqp = w[q * small + p];
            if wqp == ZERO {
                continue;
            }
            for a in 0..d {
                let row = &x[(p * d + a) * big + q * d..(p * d + a) * big + q * d + d];
                for b in 0..d {
                    out[(a, b)] += row[b] * wqp;
                }
            }
        }
    }
    out
}

/// Chain computation for one interval count n: the reduced single-copy
/// operators at each requested relative time, optionally with insertions.
struct IntervalJob<'a> {
    spec: &'a NetworkSpec,
    plan: &'a ChainPlan,
    rho0: &'a ComplexMatrix,
    n: usize,
    outputs: Vec<f64>,
    insertions: Vec<ChainInsertion>,
    closing: Option<&'a Closing>,
    basis: Option<&'a [ComplexMatrix]>,
    tol: Tolerance,
}

impl<'a> IntervalJob<'a> {
    fn run(&self) -> Result<Vec<ComplexMatrix>, CascadeError> {
        let d = self.spec.copy_dim();
        let n = self.n;
        let xi = self.plan.xi_f64();
        // Insertions at or before the first output act in phase A; the rest
        // on earlier copies act during the completion. Callers split outputs
        // so that no insertion falls between two of them.
        let cut = self.outputs[0] + 1e-12 * xi;
        for c in &self.insertions {
            if c.max_copy() > n || (c.max_copy() == n && c.rel > cut) {
                return Err(CascadeError::InsertionAfterFinal { copy: c.max_copy(), rel: c.rel });
            }
        }
        let units;
        let basis: &[ComplexMatrix] = match self.basis {
            Some(b) => b,
            None => {
                units = matrix_units_basis(d);
                &units
            }
        };
        if basis.len() != d * d {
            return Err(CascadeError::BadBasis { expected: d * d, got: basis.len() });
        }

        // Phase A: all n copies up to each output time.
        let fwd = build_liouvillian(self.spec, &self.plan.offsets, n, n);
        // last-copy insertions within rounding of the output act before it
        let clamped: Vec<ChainInsertion> = self
            .insertions
            .iter()
            .filter(|c| c.max_copy() == n || c.rel <= cut)
            .map(|c| ChainInsertion { rel: c.rel.min(self.outputs[0]), ..c.clone() })
            .collect();
        let in_a: Vec<&ChainInsertion> = clamped.iter().collect();
        let events_a = group_events(&in_a, n);
        let (stops_a, kinds_a) = merge_stops(&events_a.iter().map(|e| e.rel).collect::<Vec<_>>(), &self.outputs);

        // Phase B, transposed on n-1 copies: from xi back to each output.
        let bwd = if n >= 2 { Some(build_liouvillian(self.spec, &self.plan.offsets, n - 1, n - 1).transpose()) } else { None };
        let in_b: Vec<&ChainInsertion> =
            self.insertions.iter().filter(|c| c.max_copy() < n && c.rel > cut).collect();
        let events_b = if n >= 2 { group_events(&in_b, n - 1) } else { Vec::new() };
        let sigma_events: Vec<f64> = events_b.iter().rev().map(|e| xi - e.rel).collect();
        let sigma_outputs: Vec<f64> = self.outputs.iter().rev().map(|t| xi - t).collect();
        let (stops_b, kinds_b) = merge_stops(&sigma_events, &sigma_outputs);

        let big = d.pow(n as u32);
        let small = big / d;
        let mut integ_a = Integrator::new(big * big);
        let mut integ_b = Integrator::new(small * small);

        // Pilot runs fix the step sequences shared by every multi-index.
        let pilot = pilot_factor(d);
        let mut fac: Vec<&ComplexMatrix> = vec![self.rho0];
        for _ in 1..n {
            fac.push(&pilot);
        }
        let mut y = product(&fac).into_vec();
        let sched_a = self.drive(&fwd, &mut integ_a, &mut y, &stops_a, &kinds_a, &events_a, big, None, |_, _| {})?;
        let sched_b = match &bwd {
            Some(g) => {
                let mut w = product(&vec![&pilot; n - 1]).into_vec();
                let rev_events: Vec<&InsertionEvent> = events_b.iter().rev().collect();
                Some(self.drive_b(g, &mut integ_b, &mut w, &stops_b, &kinds_b, &rev_events, small, None, |_, _| {})?)
            }
            None => None,
        };

        let d2 = d * d;
        let count = d2.pow((n - 1) as u32);
        let n_out = self.outputs.len();
        let closing = self.closing.map(|c| InsertionEvent {
            rel: 0.0,
            left: c.embed(&c.left, d, n),
            right: c.embed(&c.right, d, n),
        });
        let pairing = self.basis.is_none()
            && self.rho0.hermiticity_residue() == 0.0
            && events_a.iter().chain(&events_b).chain(&closing).all(InsertionEvent::is_adjoint_pair);
        let mut contrib: Vec<Vec<ComplexMatrix>> = vec![Vec::new(); count];
        let adj_basis: Vec<ComplexMatrix> = basis.iter().map(|e| e.adjoint()).collect();
        let dagger_index = |j: usize| -> usize {
            // matrix unit mu*d+nu <-> nu*d+mu, digit by digit
            let mut r = 0;
            let mut jj = j;
            let mut mult = 1;
            for _ in 1..n {
                let digit = jj % d2;
                jj /= d2;
                let (mu, nu) = (digit / d, digit % d);
                r += (nu * d + mu) * mult;
                mult *= d2;
            }
            r
        };

        for j in 0..count {
            if pairing {
                let jd = dagger_index(j);
                if jd < j {
                    contrib[j] = contrib[jd].iter().map(|m| m.adjoint()).collect();
                    continue;
                }
            }
            let digits: Vec<usize> = (0..n - 1).map(|c| (j / d2.pow((n - 2 - c) as u32)) % d2).collect();
            // W_g for each output (indexed in output order).
            let mut ws: Vec<Vec<C64>> = vec![Vec::new(); n_out];
            if let (Some(g), Some(sb)) = (&bwd, &sched_b) {
                let fac: Vec<&ComplexMatrix> = digits.iter().map(|&k| &adj_basis[k]).collect();
                let mut w = product(&fac).into_vec();
                let rev_events: Vec<&InsertionEvent> = events_b.iter().rev().collect();
                self.drive_b(g, &mut integ_b, &mut w, &stops_b, &kinds_b, &rev_events, small, Some(sb), |out_idx, wv| {
                    ws[n_out - 1 - out_idx] = wv.to_vec();
                })?;
            }
            let mut fac: Vec<&ComplexMatrix> = vec![self.rho0];
            for &k in &digits {
                fac.push(&basis[k]);
            }
            let mut x = product(&fac).into_vec();
            let mut results = vec![ComplexMatrix::zeros(d); n_out];
            let mut closed = Vec::new();
            self.drive(&fwd, &mut integ_a, &mut x, &stops_a, &kinds_a, &events_a, big, Some(&sched_a), |out_idx, xv| {
                let xv = match &closing {
                    Some(ev) => {
                        closed.clear();
                        closed.extend_from_slice(xv);
                        apply_lr(ev.left.as_ref(), ev.right.as_ref(), &mut closed, big);
                        &closed[..]
                    }
                    None => xv,
                };
                results[out_idx] = if n == 1 {
                    ComplexMatrix::from_vec(d, xv.to_vec()).unwrap()
                } else {
                    contract(xv, &ws[out_idx], d, n)
                };
            })?;
            contrib[j] = results;
        }

        let mut out = vec![ComplexMatrix::zeros(d); n_out];
        for c in &contrib {
            for (o, m) in out.iter_mut().zip(c) {
                o.add_scaled(m, ONE);
            }
        }
        Ok(out)
    }

    /// Forward phase A with insertions; `on_output(k, y)` at each output.
    #[allow(clippy::too_many_arguments)]
    fn drive<G: Generator, F: FnMut(usize, &[C64])>(
        &self,
        g: &G,
        integ: &mut Integrator,
        y: &mut [C64],
        stops: &[f64],
        kinds: &[StopKind],
        events: &[InsertionEvent],
        dim: usize,
        schedule: Option<&StepSchedule>,
        mut on_output: F,
    ) -> Result<StepSchedule, CascadeError> {
        // events at relative time zero act before any evolution
        let mut first = 0;
        for ev in events.iter().take_while(|e| e.rel <= 0.0) {
            apply_lr(ev.left.as_ref(), ev.right.as_ref(), y, dim);
            first += 1;
        }
        self.run_stops(g, integ, y, stops, kinds, schedule, |kind, v| match kind {
            StopKind::Event(e) => {
                if e >= first {
                    apply_lr(events[e].left.as_ref(), events[e].right.as_ref(), v, dim);
                }
            }
            StopKind::Output(o) => on_output(o, v),
            StopKind::Both(e, o) => {
                if e >= first {
                    apply_lr(events[e].left.as_ref(), events[e].right.as_ref(), v, dim);
                }
                on_output(o, v)
            }
        })
    }

    /// Transposed phase B: events hold the forward (L, R); the transpose
    /// applies W -> R W L.
    #[allow(clippy::too_many_arguments)]
    fn drive_b<G: Generator, F: FnMut(usize, &[C64])>(
        &self,
        g: &G,
        integ: &mut Integrator,
        w: &mut [C64],
        stops: &[f64],
        kinds: &[StopKind],
        events: &[&InsertionEvent],
        dim: usize,
        schedule: Option<&StepSchedule>,
        mut on_output: F,
    ) -> Result<StepSchedule, CascadeError> {
        let xi = self.plan.xi_f64();
        let mut first = 0;
        for ev in events.iter().take_while(|e| xi - e.rel <= 0.0) {
            apply_lr(ev.right.as_ref(), ev.left.as_ref(), w, dim);
            first += 1;
        }
        self.run_stops(g, integ, w, stops, kinds, schedule, |kind, v| match kind {
            StopKind::Event(e) => {
                if e >= first {
                    apply_lr(events[e].right.as_ref(), events[e].left.as_ref(), v, dim);
                }
            }
            StopKind::Output(o) => on_output(o, v),
            StopKind::Both(e, o) => {
                if e >= first {
                    apply_lr(events[e].right.as_ref(), events[e].left.as_ref(), v, dim);
                }
                on_output(o, v)
            }
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stops<G: Generator, F: FnMut(StopKind, &mut [C64])>(
        &self,
        g: &G,
        integ: &mut Integrator,
        y: &mut [C64],
        stops: &[f64],
        kinds: &[StopKind],
        schedule: Option<&StepSchedule>,
        mut at: F,
    ) -> Result<StepSchedule, CascadeError> {
        match schedule {
            Some(s) => {
                integ.replay(g, y, s, |idx, v| at(kinds[idx], v));
                Ok(s.clone())
            }
            None => {
                // Insertions change the state between stops, so integrate
                // segment by segment, splicing the schedules.
                let mut sched = StepSchedule { t0: 0.0, steps: Vec::new(), stops: Vec::new() };
                let mut t = 0.0;
                for (idx, &s) in stops.iter().enumerate() {
                    let part = integ.integrate(g, y, t, &[s], self.tol, |_, _| {})?;
                    sched.steps.extend(part.steps);
                    sched.stops.push((s, sched.steps.len()));
                    at(kinds[idx], y);
                    t = s;
                }
                Ok(sched)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum StopKind {
    Event(usize),
    Output(usize),
    Both(usize, usize),
}

/// Merge ascending event and output times into one stop list.
fn merge_stops(events: &[f64], outputs: &[f64]) -> (Vec<f64>, Vec<StopKind>) {
    let mut stops = Vec::new();
    let mut kinds = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < events.len() || j < outputs.len() {
        let te = events.get(i).copied().unwrap_or(f64::INFINITY);
        let to = outputs.get(j).copied().unwrap_or(f64::INFINITY);
        if te < to {
            if te > 0.0 {
                stops.push(te);
                kinds.push(StopKind::Event(i));
            }
            i += 1;
        } else if to < te {
            stops.push(to.max(0.0));
            kinds.push(StopKind::Output(j));
            j += 1;
        } else {
            stops.push(to.max(0.0));
            kinds.push(if te > 0.0 { StopKind::Both(i, j) } else { StopKind::Output(j) });
            i += 1;
            j += 1;
        }
    }
    (stops, kinds)
}

fn check_rho0(spec: &NetworkSpec, rho0: &ComplexMatrix) -> Result<(), CascadeError> {
    if rho0.dim() != spec.copy_dim() {
        return Err(CascadeError::DimensionMismatch { expected: spec.copy_dim(), got: rho0.dim() });
    }
    Ok(())
}

fn t_max(plan: &ChainPlan) -> f64 {
    plan.n as f64 * plan.xi_f64()
}

/// Reduced operators at ascending times, grouped per interval.
pub fn reconstruct_series(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    times: &[f64],
    tol: f64,
) -> Result<Vec<ReconstructionResult>, CascadeError> {
    reconstruct_series_in_basis(spec, plan, rho0, times, tol, None)
}

fn reconstruct_series_in_basis(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    times: &[f64],
    tol: f64,
    basis: Option<&[ComplexMatrix]>,
) -> Result<Vec<ReconstructionResult>, CascadeError> {
    check_rho0(spec, rho0)?;
    let tol = Tolerance::from_scalar(tol)?;
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(CascadeError::UnsortedTimes);
    }
    let t_hi = t_max(plan) * (1.0 + 1e-12);
    for &t in times {
        if !(t >= 0.0) || t > t_hi {
            return Err(CascadeError::TimeOutOfRange { t, t_max: t_max(plan) });
        }
    }
    if let Some(&last) = times.last() {
        check_cap(plan.copy_dim, plan.interval_of(last).0, plan_cap(plan))?;
    }
    let parts = if basis.is_none() { split::local_parts(spec) } else { None };
    let mut out = Vec::with_capacity(times.len());
    let mut i = 0;
    while i < times.len() {
        let (n, _) = plan.interval_of(times[i]);
        let mut group = Vec::new();
        while i < times.len() && plan.interval_of(times[i]).0 == n {
            group.push(times[i]);
            i += 1;
        }
        let rel: Vec<f64> = group.iter().map(|&t| plan.interval_of(t).1).collect();
        let job = IntervalJob {
            spec,
            plan,
            rho0,
            n,
            outputs: rel,
            insertions: Vec::new(),
            closing: None,
            basis,
            tol,
        };
        let rhos = match &parts {
            Some(p) => match split::run(spec, p, plan, rho0, n, &job.outputs, tol)? {
                Some(r) => r,
                None => job.run()?,
            },
            None => job.run()?,
        };
        for (t, rho) in group.into_iter().zip(rhos) {
            out.push(ReconstructionResult::from_rho(t, rho));
        }
    }
    Ok(out)
}

fn plan_cap(plan: &ChainPlan) -> Option<usize> {
    plan.max_intervals
}

pub fn reconstruct_state(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    t: f64,
    tol: f64,
) -> Result<ReconstructionResult, CascadeError> {
    Ok(reconstruct_series(spec, plan, rho0, &[t], tol)?.remove(0))
}

/// Reconstruction with an arbitrary Hilbert-Schmidt orthonormal operator basis.
pub fn reconstruct_state_in_basis(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    t: f64,
    tol: f64,
    basis: &[ComplexMatrix],
) -> Result<ReconstructionResult, CascadeError> {
    Ok(reconstruct_series_in_basis(spec, plan, rho0, &[t], tol, Some(basis))?.remove(0))
}

pub fn observable_series(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    observable: &ComplexMatrix,
    times: &[f64],
    tol: f64,
) -> Result<ObservableSeries, CascadeError> {
    if observable.dim() != spec.copy_dim() {
        return Err(CascadeError::DimensionMismatch { expected: spec.copy_dim(), got: observable.dim() });
    }
    let states = reconstruct_series(spec, plan, rho0, times, tol)?;
    Ok(series_from_states(&states, std::slice::from_ref(observable)).remove(0))
}

/// Expectation series of several observables from one set of states.
pub fn series_from_states(states: &[ReconstructionResult], observables: &[ComplexMatrix]) -> Vec<ObservableSeries> {
    let max_trace_error = states.iter().map(|s| s.trace_error).fold(0.0, f64::max);
    observables
        .iter()
        .map(|o| {
            let mut imag: f64 = 0.0;
            let values = states
                .iter()
                .map(|s| {
                    let v = o.trace_product(&s.rho);
                    imag = imag.max(v.im.abs());
                    v.re
                })
                .collect();
            ObservableSeries { times: states.iter().map(|s| s.time).collect(), values, imag_residue: imag, max_trace_error }
        })
        .collect()
}

/// Reduced single-copy operator at time `t_final` with operators inserted
/// on the chain; returns the operator whose trace against an observable
/// gives the correlation.
pub fn evolve_with_insertions(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    t_final: f64,
    insertions: Vec<ChainInsertion>,
    tol: f64,
) -> Result<ComplexMatrix, CascadeError> {
    check_rho0(spec, rho0)?;
    let tol = Tolerance::from_scalar(tol)?;
    if !(t_final >= 0.0) || t_final > t_max(plan) * (1.0 + 1e-12) {
        return Err(CascadeError::TimeOutOfRange { t: t_final, t_max: t_max(plan) });
    }
    for (_, op) in insertions.iter().flat_map(|c| &c.terms) {
        if op.dim() != spec.copy_dim() {
            return Err(CascadeError::DimensionMismatch { expected: spec.copy_dim(), got: op.dim() });
        }
    }
    let (n, rel) = plan.interval_of(t_final);
    check_cap(plan.copy_dim, n, plan_cap(plan))?;
    let job = IntervalJob { spec, plan, rho0, n, outputs: vec![rel], insertions, closing: None, basis: None, tol };
    Ok(job.run()?.remove(0))
}

/// tr[L X(t) R] at each time, where X(t) is the chain state carrying
/// `insertions` and (L, R) is `closing` placed at the output time. Times
/// that share an interval and the same set of preceding insertions run as
/// one job.
pub fn sandwich_traces(
    spec: &NetworkSpec,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    times: &[f64],
    insertions: &[ChainInsertion],
    closing: &Closing,
    tol: f64,
) -> Result<Vec<C64>, CascadeError> {
    check_rho0(spec, rho0)?;
    let tol = Tolerance::from_scalar(tol)?;
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(CascadeError::UnsortedTimes);
    }
    let t_hi = t_max(plan) * (1.0 + 1e-12);
    for &t in times {
        if !(t >= 0.0) || t > t_hi {
            return Err(CascadeError::TimeOutOfRange { t, t_max: t_max(plan) });
        }
    }
    let d = spec.copy_dim();
    for (_, op) in insertions.iter().flat_map(|c| &c.terms).chain(closing.left.iter().chain(&closing.right)) {
        if op.dim() != d {
            return Err(CascadeError::DimensionMismatch { expected: d, got: op.dim() });
        }
    }
    if let Some(&last) = times.last() {
        check_cap(plan.copy_dim, plan.interval_of(last).0, plan_cap(plan))?;
    }
    let xi = plan.xi_f64();
    let key = |t: f64| {
        let (n, rel) = plan.interval_of(t);
        let before: Vec<bool> = insertions.iter().map(|c| c.rel <= rel + 1e-12 * xi).collect();
        (n, before)
    };
    let mut out = Vec::with_capacity(times.len());
    let mut i = 0;
    while i < times.len() {
        let k = key(times[i]);
        let mut rel = Vec::new();
        while i < times.len() && key(times[i]) == k {
            rel.push(plan.interval_of(times[i]).1);
            i += 1;
        }
        let job = IntervalJob {
            spec,
            plan,
            rho0,
            n: k.0,
            outputs: rel,
            insertions: insertions.to_vec(),
            closing: Some(closing),
            basis: None,
            tol,
        };
        out.extend(job.run()?.iter().map(|m| m.trace()));
    }
    Ok(out)
}

/// Trace of the reduced chain over copies m+1..n of an n-copy chain operator.
pub fn reduce_copies(x: &ComplexMatrix, d: usize, n: usize, m: usize) -> ComplexMatrix {
    let shape = crate::qlinalg::FactorShape::uniform(d, n).unwrap();
    let traced: Vec<usize> = (m..n).collect();
    if traced.is_empty() {
        return x.clone();
    }
    crate::qlinalg::partial_trace(x, &shape, &traced).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{driven_qubit, plan_chain, plan_chain_with_xi, KernelTerm, Rational};
    use crate::qlinalg::{embed, kron, ops, propagate, FactorShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn feedback_qubit(omega: f64, gamma: f64, tau: i64, phi: f64) -> NetworkSpec {
        driven_qubit(
            omega,
            vec![
                KernelTerm::new(0, 0, c(gamma), Rational::from_integer(0)),
                KernelTerm::new(0, 0, C64::from_polar(gamma, phi), Rational::from_integer(tau)),
            ],
        )
    }

    fn random_matrix(rng: &mut impl Rng, d: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(d, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn dense_lindblad(h: &ComplexMatrix, jumps: &[(ComplexMatrix, f64)], x: &ComplexMatrix) -> ComplexMatrix {
        let mut out = h.commutator(x).scale(-I);
        for (a, g) in jumps {
            let ad = a.adjoint();
            let ada = ad.matmul(a);
            out.add_scaled(&a.matmul(x).matmul(&ad), c(2.0 * g));
            out.add_scaled(&ada.matmul(x), c(-g));
            out.add_scaled(&x.matmul(&ada), c(-g));
        }
        out
    }

    #[test]
    fn single_copy_generator_is_standard_dissipator() {
        let spec = driven_qubit(0.4, vec![KernelTerm::new(0, 0, c(0.7), Rational::from_integer(0))]);
        let plan = plan_chain_with_xi(&spec, 1.0, Rational::from_integer(1)).unwrap();
        let l = chain_liouvillian(&spec, &plan, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 2);
        let want = dense_lindblad(&spec.h_internal, &[(ops::sigma_minus(), 0.7)], &x);
        assert!(l.apply_matrix(&x).max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn two_copy_generator_has_one_cross_pair() {
        let (gamma, phi) = (0.8, 0.9);
        let spec = feedback_qubit(0.3, gamma, 1, phi);
        let plan = plan_chain(&spec, 2.0).unwrap();
        assert_eq!(plan.n, 2);
        let l = chain_liouvillian(&spec, &plan, 2).unwrap();
        let shape = FactorShape::uniform(2, 2).unwrap();
        let a1 = embed(&ops::sigma_minus(), &shape, 0).unwrap();
        let a2 = embed(&ops::sigma_minus(), &shape, 1).unwrap();
        let h = &embed(&spec.h_internal, &shape, 0).unwrap() + &embed(&spec.h_internal, &shape, 1).unwrap();
        let g = C64::from_polar(gamma, phi);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 4);
        let mut want = dense_lindblad(&h, &[(a1.clone(), gamma), (a2.clone(), gamma)], &x);
        let cross1 = a1.matmul(&x).commutator(&a2.adjoint()).scale(g);
        let cross2 = a2.commutator(&x.matmul(&a1.adjoint())).scale(g.conj());
        want.add_scaled(&cross1, ONE);
        want.add_scaled(&cross2, ONE);
        assert!(l.apply_matrix(&x).max_abs_diff(&want) < 1e-13);
    }

    #[test]
    fn generator_respects_causality_blocks() {
        let spec = feedback_qubit(0.5, 1.0, 1, 2.0);
        let plan = plan_chain(&spec, 3.0).unwrap();
        let l3 = chain_liouvillian(&spec, &plan, 3).unwrap();
        let plan2 = plan.with_n(2);
        let l2 = chain_liouvillian(&spec, &plan2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x2 = random_matrix(&mut rng, 4);
        let x3 = kron(&x2, &random_matrix(&mut rng, 2));
        let lhs = reduce_copies(&l3.apply_matrix(&x3), 2, 3, 2);
        let rhs = l2.apply_matrix(&reduce_copies(&x3, 2, 3, 2));
        assert!(lhs.max_abs_diff(&rhs) < 1e-13);
    }

    #[test]
    fn transpose_generator_pairs_with_forward() {
        let spec = feedback_qubit(0.5, 1.0, 1, 2.0);
        let plan = plan_chain(&spec, 2.0).unwrap();
        let l = chain_liouvillian(&spec, &plan, 2).unwrap();
        let lt = l.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 4);
        let w = random_matrix(&mut rng, 4);
        let a = l.apply_matrix(&x).trace_product(&w);
        let b = x.trace_product(&lt.apply_matrix(&w));
        assert!((a - b).norm() < 1e-13);
    }

    #[test]
    fn rejects_copy_count_out_of_range() {
        let spec = feedback_qubit(0.5, 1.0, 1, 2.0);
        let plan = plan_chain(&spec, 2.0).unwrap();
        assert!(matches!(chain_liouvillian(&spec, &plan, 0), Err(CascadeError::CopyOutOfRange { .. })));
        assert!(matches!(chain_liouvillian(&spec, &plan, 3), Err(CascadeError::CopyOutOfRange { .. })));
    }

    fn excited() -> ComplexMatrix {
        ops::excitation()
    }

    fn plain_lindblad(spec: &NetworkSpec, rho0: &ComplexMatrix, t: f64) -> ComplexMatrix {
        let jumps: Vec<(ComplexMatrix, f64)> = spec
            .kernel
            .iter()
            .filter(|k| k.delay == Rational::from_integer(0))
            .map(|k| (spec.coupling(k.alpha).unwrap().clone(), k.gamma.re))
            .collect();
        let h = spec.h_internal.clone();
        let d = h.dim();
        let g = move |x: &[C64], out: &mut [C64]| {
            let xm = ComplexMatrix::from_vec(d, x.to_vec()).unwrap();
            out.copy_from_slice(dense_lindblad(&h, &jumps, &xm).as_slice());
        };
        propagate(&g, rho0, 0.0, t, 1e-12).unwrap()
    }

    #[test]
    fn first_interval_is_plain_lindblad() {
        let spec = feedback_qubit(0.25, 1.0, 5, std::f64::consts::PI);
        let plan = plan_chain(&spec, 10.0).unwrap();
        let rho0 = ComplexMatrix::from_real(&[&[1.0, 0.0], &[0.0, 0.0]]);
        for &t in &[0.5, 2.0, 5.0] {
            let r = reconstruct_state(&spec, &plan, &rho0, t, 1e-10).unwrap();
            assert!(r.rho.max_abs_diff(&plain_lindblad(&spec, &rho0, t)) < 1e-9);
        }
    }

    #[test]
    fn trace_and_hermiticity_hold_with_feedback() {
        let spec = feedback_qubit(0.6, 1.0, 1, 1.3);
        let plan = plan_chain(&spec, 3.0).unwrap();
        let times = [0.4, 1.0, 1.7, 2.0, 2.6, 3.0];
        let states = reconstruct_series(&spec, &plan, &excited(), &times, 1e-10).unwrap();
        for s in &states {
            assert!(s.trace_error < 1e-12, "trace error {}", s.trace_error);
            assert!(s.hermiticity_error < 1e-12);
            assert!(s.min_eigenvalue > -1e-9);
        }
    }

    #[test]
    fn series_matches_single_queries() {
        let spec = feedback_qubit(0.6, 1.0, 1, 1.3);
        let plan = plan_chain(&spec, 3.0).unwrap();
        let times = [1.2, 1.9, 2.5];
        let states = reconstruct_series(&spec, &plan, &excited(), &times, 1e-11).unwrap();
        for s in &states {
            let single = reconstruct_state(&spec, &plan, &excited(), s.time, 1e-11).unwrap();
            assert!(single.rho.max_abs_diff(&s.rho) < 1e-9);
        }
    }

    #[test]
    fn boundary_continuity() {
        let spec = feedback_qubit(0.6, 1.0, 1, 2.1);
        let plan = plan_chain(&spec, 3.0).unwrap();
        for b in [1.0, 2.0] {
            let eps = 1e-6;
            let lo = reconstruct_state(&spec, &plan, &excited(), b - eps, 1e-11).unwrap();
            let hi = reconstruct_state(&spec, &plan, &excited(), b + eps, 1e-11).unwrap();
            assert!(lo.rho.max_abs_diff(&hi.rho) < 1e-5 * 2.0);
        }
    }

    #[test]
    fn identity_observable_is_one() {
        let spec = feedback_qubit(0.6, 1.0, 1, 0.3);
        let plan = plan_chain(&spec, 2.5).unwrap();
        let s = observable_series(&spec, &plan, &excited(), &ComplexMatrix::identity(2), &[0.3, 1.4, 2.5], 1e-10)
            .unwrap();
        for v in s.values {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn errors_for_bad_queries() {
        let spec = feedback_qubit(0.6, 1.0, 1, 0.3);
        let plan = plan_chain(&spec, 2.0).unwrap();
        assert!(matches!(
            reconstruct_state(&spec, &plan, &excited(), 2.5, 1e-10),
            Err(CascadeError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            reconstruct_series(&spec, &plan, &excited(), &[1.0, 0.5], 1e-10),
            Err(CascadeError::UnsortedTimes)
        ));
    }

    #[test]
    fn cap_refuses_long_chains() {
        let spec = feedback_qubit(0.6, 1.0, 1, 0.3);
        let plan = plan_chain(&spec, 9.0).unwrap();
        let e = reconstruct_state(&spec, &plan, &excited(), 9.0, 1e-10);
        assert!(matches!(e, Err(CascadeError::ResourceCap { n: 9, cap: 8, .. })));
        assert_eq!(default_interval_cap(4), 5);
    }
}
