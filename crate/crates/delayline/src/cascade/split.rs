//! Reconstruction when the chain falls apart into independent groups of
//! (subsystem, copy) slots. This happens for a Hamiltonian that is a sum of
//! single-subsystem terms with couplings acting on their own subsystem, as in
//! cascaded systems with backscatter. Each group is evolved on its own and the
//! groups are contracted back together as a small tensor network.

use std::collections::BTreeMap;

use super::{build_on, pilot_factor, CascadeError, ChainLiouvillian, Layout, Parts};
use crate::model::{ChainPlan, NetworkSpec};
use crate::qlinalg::{
    embed, kron_all, matrix_units_basis, partial_trace, ComplexMatrix, FactorShape, Integrator, StepSchedule,
    Tolerance, C64, ONE, ZERO,
};

const LOCAL_TOL: f64 = 1e-13;

/// Per-subsystem pieces of the network, or None when some term couples
/// subsystems within a copy.
pub(crate) fn local_parts(spec: &NetworkSpec) -> Option<Parts> {
    let dims: Vec<usize> = spec.subsystems.iter().map(|s| s.dim).collect();
    let count = dims.len();
    if count < 2 {
        return None;
    }
    let shape = FactorShape::new(dims.clone()).ok()?;
    let total = shape.total();
    let reduce = |x: &ComplexMatrix, s: usize| -> ComplexMatrix {
        let others: Vec<usize> = (0..count).filter(|&o| o != s).collect();
        partial_trace(x, &shape, &others).unwrap().scale_real(dims[s] as f64 / total as f64)
    };
    let h = &spec.h_internal;
    let shift = h.trace() / total as f64;
    let mut pieces = Vec::with_capacity(count);
    let mut sum = ComplexMatrix::zeros(total);
    for s in 0..count {
        let mut r = reduce(h, s);
        if s > 0 {
            r.add_scaled(&ComplexMatrix::identity(dims[s]), -shift);
        }
        sum = &sum + &embed(&r, &shape, s).unwrap();
        pieces.push((s, r));
    }
    if h.max_abs_diff(&sum) > LOCAL_TOL * h.max_abs().max(1.0) {
        return None;
    }
    let mut coupling = BTreeMap::new();
    for (&ch, a) in &spec.couplings {
        let r = reduce(a, ch);
        if a.max_abs_diff(&embed(&r, &shape, ch).unwrap()) > LOCAL_TOL * a.max_abs().max(1.0) {
            return None;
        }
        coupling.insert(ch, (ch, r));
    }
    Some(Parts { h: pieces, coupling })
}

fn digits_of(mut x: usize, radix: &[usize]) -> Vec<usize> {
    let mut out = vec![0; radix.len()];
    for (o, &r) in out.iter_mut().zip(radix).rev() {
        *o = x % r;
        x /= r;
    }
    out
}

fn encode(digits: impl Iterator<Item = usize>, radix: impl Iterator<Item = usize>) -> usize {
    digits.zip(radix).fold(0, |acc, (d, r)| acc * r + d)
}

/// rho0 as a sum of products over subsystems.
fn product_terms(rho0: &ComplexMatrix, dims: &[usize]) -> Vec<(C64, Vec<ComplexMatrix>)> {
    let shape = FactorShape::new(dims.to_vec()).unwrap();
    let count = dims.len();
    let tr = rho0.trace();
    if tr.norm() > 1e-12 {
        let locals: Vec<ComplexMatrix> = (0..count)
            .map(|s| {
                let others: Vec<usize> = (0..count).filter(|&o| o != s).collect();
                partial_trace(rho0, &shape, &others).unwrap().scale(ONE / tr)
            })
            .collect();
        if kron_all(&locals).scale(tr).max_abs_diff(rho0) <= LOCAL_TOL * rho0.max_abs().max(1.0) {
            return vec![(tr, locals)];
        }
    }
    let total = shape.total();
    let mut out = Vec::new();
    for a in 0..total {
        for b in 0..total {
            let v = rho0[(a, b)];
            if v == ZERO {
                continue;
            }
            let (da, db) = (digits_of(a, dims), digits_of(b, dims));
            let factors = (0..count)
                .map(|s| ComplexMatrix::from_fn(dims[s], |i, j| if i == da[s] && j == db[s] { ONE } else { ZERO }))
                .collect();
            out.push((v, factors));
        }
    }
    out
}

/// Connected groups of slots g = copy * subsystems + subsystem over `m` copies.
fn groups_of(spec: &NetworkSpec, offsets: &[usize], m: usize) -> Vec<Vec<usize>> {
    let count = spec.subsystems.len();
    let mut parent: Vec<usize> = (0..m * count).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (term, &k) in spec.kernel.iter().zip(offsets) {
        if k == 0 || term.gamma == ZERO {
            continue;
        }
        for l in k..m {
            let (x, y) = (root(&mut parent, l * count + term.alpha), root(&mut parent, (l - k) * count + term.beta));
            parent[x.max(y)] = x.min(y);
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for g in 0..m * count {
        let r = root(&mut parent, g);
        by_root.entry(r).or_default().push(g);
    }
    by_root.into_values().collect()
}

struct Group {
    slots: Vec<usize>,
    dims: Vec<usize>,
    gen: ChainLiouvillian,
    sched: StepSchedule,
}

impl Group {
    #[allow(clippy::too_many_arguments)]
    fn new(
        spec: &NetworkSpec,
        parts: &Parts,
        offsets: &[usize],
        m: usize,
        slots: Vec<usize>,
        transposed: bool,
        stops: &[f64],
        tol: Tolerance,
    ) -> Result<Self, CascadeError> {
        let count = spec.subsystems.len();
        let dims: Vec<usize> = slots.iter().map(|&g| spec.subsystems[g % count].dim).collect();
        let layout =
            Layout { dims: dims.clone(), pos: slots.iter().enumerate().map(|(i, &g)| ((g % count, g / count), i)).collect() };
        let gen = build_on(&layout, parts, &spec.kernel, offsets, m, m);
        let gen = if transposed { gen.transpose() } else { gen };
        let pilot: Vec<ComplexMatrix> = dims.iter().map(|&d| pilot_factor(d)).collect();
        let mut y = kron_all(&pilot).into_vec();
        let mut integ = Integrator::new(y.len());
        let sched = integ.integrate(&gen, &mut y, 0.0, stops, tol, |_, _| {})?;
        Ok(Group { slots, dims, gen, sched })
    }

    fn local_dim(&self) -> usize {
        self.dims.iter().product()
    }

    /// Evolve kron(factors) along the pilot schedule; one operator per stop.
    fn evolve(&self, integ: &mut Integrator, factors: &[ComplexMatrix]) -> Vec<Vec<C64>> {
        let mut y = kron_all(factors).into_vec();
        let mut out = Vec::with_capacity(self.sched.stops.len());
        integ.replay(&self.gen, &mut y, &self.sched, |_, v| out.push(v.to_vec()));
        out
    }
}

/// A set of forward and completion groups joined by shared slots on the
/// first n-1 copies; its contraction leaves an operator on its last-copy slots.
struct Cluster {
    fwd: Vec<usize>,
    bwd: Vec<usize>,
    digits: Vec<usize>,
    last: Vec<usize>,
    bond_dim: usize,
    last_dim: usize,
    // forward group local index for bond index p and last index a: [p * last_dim + a]
    fwd_index: Vec<Vec<usize>>,
    // completion group local index for bond index p
    bwd_index: Vec<Vec<usize>>,
    // positions in `digits` read by each group
    fwd_sel: Vec<Vec<usize>>,
    bwd_sel: Vec<Vec<usize>>,
}

/// Reduced operators at each relative output time of interval `n`, or None
/// when the chain forms a single group and the dense path applies.
pub(super) fn run(
    spec: &NetworkSpec,
    parts: &Parts,
    plan: &ChainPlan,
    rho0: &ComplexMatrix,
    n: usize,
    outputs: &[f64],
    tol: Tolerance,
) -> Result<Option<Vec<ComplexMatrix>>, CascadeError> {
    let fwd_slots = groups_of(spec, &plan.offsets, n);
    if fwd_slots.len() < 2 {
        return Ok(None);
    }
    let count = spec.subsystems.len();
    let sdim: Vec<usize> = spec.subsystems.iter().map(|s| s.dim).collect();
    let dim_of = |g: usize| sdim[g % count];
    let xi = plan.xi_f64();
    let n_out = outputs.len();
    let stops_a: Vec<f64> = outputs.iter().map(|&t| t.max(0.0)).collect();
    let stops_b: Vec<f64> = outputs.iter().rev().map(|&t| (xi - t).max(0.0)).collect();

    let mut fwd = Vec::new();
    for slots in fwd_slots {
        fwd.push(Group::new(spec, parts, &plan.offsets, n, slots, false, &stops_a, tol)?);
    }
    let mut bwd = Vec::new();
    if n >= 2 {
        for slots in groups_of(spec, &plan.offsets, n - 1) {
            bwd.push(Group::new(spec, parts, &plan.offsets, n - 1, slots, true, &stops_b, tol)?);
        }
    }

    // Clusters: union of groups sharing a slot below the last copy.
    let bond_end = (n - 1) * count;
    let total_groups = fwd.len() + bwd.len();
    let mut cluster_of: Vec<usize> = (0..total_groups).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut owner_a = vec![0; n * count];
    for (i, g) in fwd.iter().enumerate() {
        for &s in &g.slots {
            owner_a[s] = i;
        }
    }
    for (i, h) in bwd.iter().enumerate() {
        for &s in &h.slots {
            let (x, y) = (root(&mut cluster_of, owner_a[s]), root(&mut cluster_of, fwd.len() + i));
            cluster_of[x.max(y)] = x.min(y);
        }
    }
    let mut members: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for i in 0..total_groups {
        let r = root(&mut cluster_of, i);
        let e = members.entry(r).or_default();
        if i < fwd.len() {
            e.0.push(i);
        } else {
            e.1.push(i - fwd.len());
        }
    }

    let clusters: Vec<Cluster> = members
        .into_values()
        .map(|(fa, fb)| {
            let mut bond: Vec<usize> = fa.iter().flat_map(|&i| fwd[i].slots.iter().copied()).filter(|&g| g < bond_end).collect();
            let mut last: Vec<usize> = fa.iter().flat_map(|&i| fwd[i].slots.iter().copied()).filter(|&g| g >= bond_end).collect();
            let mut digits: Vec<usize> = fa
                .iter()
                .flat_map(|&i| fwd[i].slots.iter().copied())
                .filter(|&g| g >= count)
                .chain(fb.iter().flat_map(|&i| bwd[i].slots.iter().map(|&g| g + count)))
                .collect();
            bond.sort_unstable();
            last.sort_unstable();
            digits.sort_unstable();
            digits.dedup();
            let bond_radix: Vec<usize> = bond.iter().map(|&g| dim_of(g)).collect();
            let last_radix: Vec<usize> = last.iter().map(|&g| dim_of(g)).collect();
            let bond_dim: usize = bond_radix.iter().product();
            let last_dim: usize = last_radix.iter().product();
            let mut slot_digit: BTreeMap<usize, usize> = BTreeMap::new();
            let mut fwd_index = vec![Vec::with_capacity(bond_dim * last_dim); fa.len()];
            let mut bwd_index = vec![Vec::with_capacity(bond_dim); fb.len()];
            for p in 0..bond_dim {
                for (g, d) in bond.iter().zip(digits_of(p, &bond_radix)) {
                    slot_digit.insert(*g, d);
                }
                for (k, &i) in fb.iter().enumerate() {
                    let h = &bwd[i];
                    bwd_index[k].push(encode(h.slots.iter().map(|g| slot_digit[g]), h.dims.iter().copied()));
                }
                for a in 0..last_dim {
                    for (g, d) in last.iter().zip(digits_of(a, &last_radix)) {
                        slot_digit.insert(*g, d);
                    }
                    for (k, &i) in fa.iter().enumerate() {
                        let c = &fwd[i];
                        fwd_index[k].push(encode(c.slots.iter().map(|g| slot_digit[g]), c.dims.iter().copied()));
                    }
                }
            }
            let pos = |g: usize| digits.binary_search(&g).unwrap();
            let fwd_sel = fa.iter().map(|&i| fwd[i].slots.iter().filter(|&&g| g >= count).map(|&g| pos(g)).collect()).collect();
            let bwd_sel = fb.iter().map(|&i| bwd[i].slots.iter().map(|&g| pos(g + count)).collect()).collect();
            Cluster { fwd: fa, bwd: fb, digits, last, bond_dim, last_dim, fwd_index, bwd_index, fwd_sel, bwd_sel }
        })
        .collect();

    // Completion operators do not depend on rho0.
    let mut bwd_ops: Vec<Vec<Vec<Vec<C64>>>> = Vec::with_capacity(bwd.len());
    for h in &bwd {
        let radix: Vec<usize> = h.dims.iter().map(|d| d * d).collect();
        let bases: Vec<Vec<ComplexMatrix>> =
            h.dims.iter().map(|&d| matrix_units_basis(d).iter().map(|e| e.adjoint()).collect()).collect();
        let mut integ = Integrator::new(h.local_dim() * h.local_dim());
        let combos: usize = radix.iter().product();
        let mut table = Vec::with_capacity(combos);
        for combo in 0..combos {
            let factors: Vec<ComplexMatrix> =
                digits_of(combo, &radix).iter().enumerate().map(|(k, &d)| bases[k][d].clone()).collect();
            let mut ws = h.evolve(&mut integ, &factors);
            ws.reverse();
            table.push(ws);
        }
        bwd_ops.push(table);
    }

    let global_digits: Vec<usize> = (count..n * count).collect();
    let global_radix: Vec<usize> = global_digits.iter().map(|&g| dim_of(g) * dim_of(g)).collect();
    let n_j: usize = global_radix.iter().product();
    let d_copy = spec.copy_dim();
    // index into each cluster's last-copy operator for a copy-level index
    let last_of: Vec<Vec<usize>> = clusters
        .iter()
        .map(|k| {
            (0..d_copy)
                .map(|a| {
                    let da = digits_of(a, &sdim);
                    encode(k.last.iter().map(|&g| da[g - bond_end]), k.last.iter().map(|&g| dim_of(g)))
                })
                .collect()
        })
        .collect();

    let mut out = vec![ComplexMatrix::zeros(d_copy); n_out];
    for (coef, locals) in product_terms(rho0, &sdim) {
        let mut fwd_ops: Vec<Vec<Vec<Vec<C64>>>> = Vec::with_capacity(fwd.len());
        for c in &fwd {
            let inputs: Vec<usize> = c.slots.iter().copied().filter(|&g| g >= count).collect();
            let radix: Vec<usize> = inputs.iter().map(|&g| dim_of(g) * dim_of(g)).collect();
            let mut integ = Integrator::new(c.local_dim() * c.local_dim());
            let combos: usize = radix.iter().product();
            let mut table = Vec::with_capacity(combos);
            for combo in 0..combos {
                let digits = digits_of(combo, &radix);
                let mut next = digits.iter();
                let factors: Vec<ComplexMatrix> = c
                    .slots
                    .iter()
                    .map(|&g| {
                        if g < count {
                            locals[g].clone()
                        } else {
                            matrix_units_basis(dim_of(g))[*next.next().unwrap()].clone()
                        }
                    })
                    .collect();
                table.push(c.evolve(&mut integ, &factors));
            }
            fwd_ops.push(table);
        }

        // Per-cluster contraction tables: [combo][output] -> last_dim^2.
        let tables: Vec<Vec<Vec<Vec<C64>>>> = clusters
            .iter()
            .map(|k| cluster_table(k, &fwd, &bwd, &fwd_ops, &bwd_ops, n_out, |g| dim_of(g) * dim_of(g)))
            .collect();

        let positions: Vec<Vec<usize>> =
            clusters.iter().map(|k| k.digits.iter().map(|g| g - count).collect()).collect();
        let mut combo_k = vec![0; clusters.len()];
        for j in 0..n_j {
            let dj = digits_of(j, &global_radix);
            for (ck, (k, pos)) in combo_k.iter_mut().zip(clusters.iter().zip(&positions)) {
                *ck = encode(pos.iter().map(|&p| dj[p]), k.digits.iter().map(|&g| dim_of(g) * dim_of(g)));
            }
            for (o, rho) in out.iter_mut().enumerate() {
                for a in 0..d_copy {
                    for b in 0..d_copy {
                        let mut v = coef;
                        for (ki, k) in clusters.iter().enumerate() {
                            v *= tables[ki][combo_k[ki]][o][last_of[ki][a] * k.last_dim + last_of[ki][b]];
                        }
                        rho[(a, b)] += v;
                    }
                }
            }
        }
    }
    Ok(Some(out))
}

/// T_K[a, b] = sum_{p, q} W[q, p] Y[(p, a), (q, b)] for every digit combination.
fn cluster_table(
    k: &Cluster,
    fwd: &[Group],
    bwd: &[Group],
    fwd_ops: &[Vec<Vec<Vec<C64>>>],
    bwd_ops: &[Vec<Vec<Vec<C64>>>],
    n_out: usize,
    radix_of: impl Fn(usize) -> usize,
) -> Vec<Vec<Vec<C64>>> {
    let radix: Vec<usize> = k.digits.iter().map(|&g| radix_of(g)).collect();
    let combos: usize = radix.iter().product();
    let (bd, ld) = (k.bond_dim, k.last_dim);
    let fwd_dims: Vec<usize> = k.fwd.iter().map(|&i| fwd[i].local_dim()).collect();
    let bwd_dims: Vec<usize> = k.bwd.iter().map(|&i| bwd[i].local_dim()).collect();
    let sel_radix = |sel: &[usize]| -> Vec<usize> { sel.iter().map(|&p| radix[p]).collect() };
    let fwd_radix: Vec<Vec<usize>> = k.fwd_sel.iter().map(|s| sel_radix(s)).collect();
    let bwd_radix: Vec<Vec<usize>> = k.bwd_sel.iter().map(|s| sel_radix(s)).collect();
    let mut table = Vec::with_capacity(combos);
    let mut w = vec![ZERO; bd * bd];
    for combo in 0..combos {
        let dk = digits_of(combo, &radix);
        let fc: Vec<usize> = k
            .fwd_sel
            .iter()
            .zip(&fwd_radix)
            .map(|(s, r)| encode(s.iter().map(|&p| dk[p]), r.iter().copied()))
            .collect();
        let bc: Vec<usize> = k
            .bwd_sel
            .iter()
            .zip(&bwd_radix)
            .map(|(s, r)| encode(s.iter().map(|&p| dk[p]), r.iter().copied()))
            .collect();
        let mut per_out = Vec::with_capacity(n_out);
        for o in 0..n_out {
            for q in 0..bd {
                for p in 0..bd {
                    let mut v = ONE;
                    for (m, &i) in k.bwd.iter().enumerate() {
                        let idx = &k.bwd_index[m];
                        v *= bwd_ops[i][bc[m]][o][idx[q] * bwd_dims[m] + idx[p]];
                    }
                    w[q * bd + p] = v;
                }
            }
            let mut t = vec![ZERO; ld * ld];
            for p in 0..bd {
                for q in 0..bd {
                    let wqp = w[q * bd + p];
                    if wqp == ZERO {
                        continue;
                    }
                    for a in 0..ld {
                        for b in 0..ld {
                            let mut v = wqp;
                            for (m, &i) in k.fwd.iter().enumerate() {
                                let idx = &k.fwd_index[m];
                                v *= fwd_ops[i][fc[m]][o][idx[p * ld + a] * fwd_dims[m] + idx[q * ld + b]];
                            }
                            t[a * ld + b] += v;
                        }
                    }
                }
            }
            per_out.push(t);
        }
        table.push(per_out);
    }
    table
}
