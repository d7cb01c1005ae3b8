//! Reverse-mode differentiation over the dense-matrix primitives.
//!
//! The tape is eager: every builder method computes its value immediately
//! and records the operation, so a forward pass and graph construction are
//! the same thing. `backward` then walks the records in reverse and
//! accumulates adjoints. Only the handful of operations the evidence lower
//! bound needs are implemented; the delicate ones are the Cholesky and
//! triangular-solve adjoints, which are pinned down by finite-difference
//! tests below and in the trainer.
//!
//! Convention: matrices are adjoint-carrying values; "leaf" records hold
//! parameters (or constants nobody differentiates). The root passed to
//! `backward` must be a 1x1 scalar.

use crate::error::Result;
use crate::numerics::{cholesky_psd, DenseMatrix};

pub(crate) type NodeId = usize;

enum Op {
    Leaf,
    /// Symmetric RBF gram matrix of z with itself.
    GramSym {
        z: NodeId,
        log_ls: NodeId,
        log_sv: NodeId,
    },
    /// Cross gram k(x, z); x is constant data and receives no adjoint.
    GramCross {
        x: NodeId,
        z: NodeId,
        log_ls: NodeId,
        log_sv: NodeId,
    },
    /// n x 1 column of the RBF prior variance exp(log_sv).
    SignalDiag {
        log_sv: NodeId,
    },
    Cholesky {
        a: NodeId,
    },
    TriSolve {
        l: NodeId,
        b: NodeId,
        transposed: bool,
    },
    /// L X = B where B is a structurally lower-triangular parameter (its
    /// strict upper is not a degree of freedom), so X and every adjoint can
    /// be kept to the lower triangle.
    TriSolveTri {
        l: NodeId,
        b: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// Column vector of per-column squared norms.
    ColSqNorms {
        a: NodeId,
    },
    FrobSq {
        a: NodeId,
    },
    SumLogDiag {
        a: NodeId,
    },
    /// Dense lower triangle from a packed column, diagonal exponentiated.
    TriFromPacked {
        packed: NodeId,
        m: usize,
        diag_only: bool,
    },
    ColumnOf {
        a: NodeId,
        col: usize,
    },
    /// Elementwise max with a constant floor.
    MaxScalar {
        a: NodeId,
        floor: f64,
    },
    /// Closed-form Gaussian expected log-likelihood against constant
    /// targets y with constant noise s2.
    GaussLik {
        mean: NodeId,
        var: NodeId,
        y: DenseMatrix,
        s2: DenseMatrix,
    },
    /// bias + sum of coefficient * scalar-node terms. The bias is folded
    /// into the stored value and carries no gradient.
    AxpyScalars { terms: Vec<(f64, NodeId)> },
}

pub(crate) struct Tape {
    ops: Vec<Op>,
    vals: Vec<DenseMatrix>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        self.ops.push(op);
        self.vals.push(value);
        self.vals.len() - 1
    }

    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.vals[id]
    }

    pub fn gram_sym(&mut self, z: NodeId, log_ls: NodeId, log_sv: NodeId) -> NodeId {
        let (zv, w, sv2) = self.kernel_inputs(z, log_ls, log_sv);
        let m = zv.rows();
        let mut k = DenseMatrix::zeros(m, m);
        for i in 0..m {
            k.set(i, i, sv2);
            for j in 0..i {
                let mut q = 0.0;
                for (d, &wd) in w.iter().enumerate() {
                    let u = zv.get(i, d) - zv.get(j, d);
                    q += u * u * wd;
                }
                let val = sv2 * (-0.5 * q).exp();
                k.set(i, j, val);
                k.set(j, i, val);
            }
        }
        self.push(Op::GramSym { z, log_ls, log_sv }, k)
    }

    pub fn gram_cross(&mut self, x: NodeId, z: NodeId, log_ls: NodeId, log_sv: NodeId) -> NodeId {
        let (zv, w, sv2) = self.kernel_inputs(z, log_ls, log_sv);
        let xv = &self.vals[x];
        let mut k = DenseMatrix::zeros(xv.rows(), zv.rows());
        for i in 0..xv.rows() {
            for j in 0..zv.rows() {
                let mut q = 0.0;
                for (d, &wd) in w.iter().enumerate() {
                    let u = xv.get(i, d) - zv.get(j, d);
                    q += u * u * wd;
                }
                k.set(i, j, sv2 * (-0.5 * q).exp());
            }
        }
        self.push(Op::GramCross { x, z, log_ls, log_sv }, k)
    }

    fn kernel_inputs(&self, z: NodeId, log_ls: NodeId, log_sv: NodeId) -> (&DenseMatrix, Vec<f64>, f64) {
        let zv = &self.vals[z];
        let w: Vec<f64> = self.vals[log_ls]
            .data()
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect();
        debug_assert_eq!(w.len(), zv.cols());
        let sv2 = self.vals[log_sv].as_scalar().exp();
        (zv, w, sv2)
    }

    pub fn signal_diag(&mut self, log_sv: NodeId, n: usize) -> NodeId {
        let sv2 = self.vals[log_sv].as_scalar().exp();
        let col = DenseMatrix::column(&vec![sv2; n]);
        self.push(Op::SignalDiag { log_sv }, col)
    }

    pub fn cholesky(&mut self, a: NodeId, base_jitter: f64) -> Result<NodeId> {
        let factor = cholesky_psd(&self.vals[a], base_jitter)?;
        Ok(self.push(Op::Cholesky { a }, factor.into_lower()))
    }

    pub fn tri_solve(&mut self, l: NodeId, b: NodeId, transposed: bool) -> NodeId {
        let x = crate::numerics::tri_solve_lower(&self.vals[l], &self.vals[b], transposed)
            .expect("tape shapes are constructed consistently");
        self.push(Op::TriSolve { l, b, transposed }, x)
    }

    /// Solve L X = B for a right-hand side that is lower-triangular by
    /// construction (a `tri_from_packed` node, or anything whose strict
    /// upper is structurally zero rather than incidentally zero). X is then
    /// lower-triangular too, and both the solve and its adjoint run on
    /// triangles only, at a third of the dense cost.
    pub fn tri_solve_tri(&mut self, l: NodeId, b: NodeId) -> NodeId {
        let x = crate::numerics::tri_solve_lower_tri(&self.vals[l], &self.vals[b], false)
            .expect("tape shapes are constructed consistently");
        self.push(Op::TriSolveTri { l, b }, x)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let av = &self.vals[a];
        let bv = &self.vals[b];
        let value = match (ta, tb) {
            (false, false) => av.matmul(bv),
            (true, false) => av.matmul_tn(bv),
            (false, true) => av.matmul_nt(bv),
            (true, true) => bv.matmul(av).transpose(),
        };
        self.push(Op::MatMul { a, b, ta, tb }, value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.vals[a].transpose();
        self.push(Op::Transpose { a }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.vals[a].add(&self.vals[b]);
        self.push(Op::Add { a, b }, value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.vals[a].sub(&self.vals[b]);
        self.push(Op::Sub { a, b }, value)
    }

    pub fn col_sq_norms(&mut self, a: NodeId) -> NodeId {
        let value = DenseMatrix::column(&self.vals[a].col_sq_norms());
        self.push(Op::ColSqNorms { a }, value)
    }

    pub fn frob_sq(&mut self, a: NodeId) -> NodeId {
        let value = DenseMatrix::scalar(self.vals[a].frob_sq());
        self.push(Op::FrobSq { a }, value)
    }

    pub fn sum_log_diag(&mut self, a: NodeId) -> NodeId {
        let av = &self.vals[a];
        let s: f64 = (0..av.rows()).map(|i| av.get(i, i).ln()).sum();
        self.push(Op::SumLogDiag { a }, DenseMatrix::scalar(s))
    }

    pub fn tri_from_packed(&mut self, packed: NodeId, m: usize, diag_only: bool) -> NodeId {
        let p = self.vals[packed].data();
        let mut l = DenseMatrix::zeros(m, m);
        if diag_only {
            for i in 0..m {
                l.set(i, i, p[i].exp());
            }
        } else {
            let mut k = 0;
            for i in 0..m {
                for j in 0..i {
                    l.set(i, j, p[k]);
                    k += 1;
                }
                l.set(i, i, p[k].exp());
                k += 1;
            }
        }
        self.push(Op::TriFromPacked { packed, m, diag_only }, l)
    }

    pub fn column_of(&mut self, a: NodeId, col: usize) -> NodeId {
        let value = DenseMatrix::column(&self.vals[a].col_to_vec(col));
        self.push(Op::ColumnOf { a, col }, value)
    }

    pub fn max_scalar(&mut self, a: NodeId, floor: f64) -> NodeId {
        let mut value = self.vals[a].clone();
        for x in value.data_mut().iter_mut() {
            *x = x.max(floor);
        }
        self.push(Op::MaxScalar { a, floor }, value)
    }

    pub fn gauss_lik(&mut self, mean: NodeId, var: NodeId, y: DenseMatrix, s2: DenseMatrix) -> NodeId {
        let value = crate::svgp::gaussian_ell(
            self.vals[mean].data(),
            self.vals[var].data(),
            y.data(),
            s2.data(),
        );
        self.push(Op::GaussLik { mean, var, y, s2 }, DenseMatrix::scalar(value))
    }

    pub fn axpy_scalars(&mut self, terms: Vec<(f64, NodeId)>, bias: f64) -> NodeId {
        let value = bias
            + terms
                .iter()
                .map(|&(c, id)| c * self.vals[id].as_scalar())
                .sum::<f64>();
        self.push(Op::AxpyScalars { terms }, DenseMatrix::scalar(value))
    }

    /// Adjoints of all nodes reachable from `root`, which must be a scalar;
    /// `seed` is d(objective)/d(root). Leaf adjoints stay in the result,
    /// indexed by NodeId; unreached nodes are None.
    pub fn backward(&self, root: NodeId, seed: f64) -> Vec<Option<DenseMatrix>> {
        assert_eq!(self.vals[root].shape(), (1, 1), "backward root must be scalar");
        let mut adj: Vec<Option<DenseMatrix>> = (0..self.ops.len()).map(|_| None).collect();
        adj[root] = Some(DenseMatrix::scalar(seed));

        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.ops[id] {
                Op::Leaf => {
                    adj[id] = Some(g);
                }
                Op::GramSym { z, log_ls, log_sv } => {
                    let (zbar, lbar, svbar) = self.gram_backward(&g, id, None, *z, *log_ls);
                    accum(&mut adj, *z, zbar);
                    accum(&mut adj, *log_ls, lbar);
                    accum(&mut adj, *log_sv, DenseMatrix::scalar(svbar));
                }
                Op::GramCross { x, z, log_ls, log_sv } => {
                    let (zbar, lbar, svbar) = self.gram_backward(&g, id, Some(*x), *z, *log_ls);
                    accum(&mut adj, *z, zbar);
                    accum(&mut adj, *log_ls, lbar);
                    accum(&mut adj, *log_sv, DenseMatrix::scalar(svbar));
                }
                Op::SignalDiag { log_sv } => {
                    let sv2 = self.vals[id].get(0, 0);
                    let total: f64 = g.data().iter().sum();
                    accum(&mut adj, *log_sv, DenseMatrix::scalar(total * sv2));
                }
                Op::Cholesky { a } => {
                    accum(&mut adj, *a, self.cholesky_backward(&g, id));
                }
                Op::TriSolve { l, b, transposed } => {
                    let lv = &self.vals[*l];
                    let xv = &self.vals[id];
                    let (bbar, lbar) = if !*transposed {
                        // X = L^{-1} B:  Bbar = L^{-T} Gbar, Lbar = tril(-Bbar X^T)
                        let bbar = crate::numerics::tri_solve_lower(lv, &g, true)
                            .expect("shape preserved");
                        let lbar = bbar.matmul_nt_lower(xv).scaled(-1.0);
                        (bbar, lbar)
                    } else {
                        // X = L^{-T} B:  Bbar = L^{-1} Gbar, Lbar = tril(-X Bbar^T)
                        let bbar = crate::numerics::tri_solve_lower(lv, &g, false)
                            .expect("shape preserved");
                        let lbar = xv.matmul_nt_lower(&bbar).scaled(-1.0);
                        (bbar, lbar)
                    };
                    accum(&mut adj, *b, bbar);
                    accum(&mut adj, *l, lbar);
                }
                Op::TriSolveTri { l, b } => {
                    let lv = &self.vals[*l];
                    let xv = &self.vals[id];
                    // The strict upper of X is identically zero for every
                    // input, so any upstream adjoint there carries no
                    // information: only tril(Gbar) enters.
                    let gl = g.lower_triangle();
                    let bbar = crate::numerics::tri_solve_lower_tri(lv, &gl, true)
                        .expect("shape preserved");
                    // Lbar = tril(-Bbar X^T); row q of X stops at column q,
                    // so each dot product does too.
                    let m = lv.rows();
                    let mut lbar = DenseMatrix::zeros(m, m);
                    for p in 0..m {
                        let bp = bbar.row(p);
                        for q in 0..=p {
                            let xq = &xv.row(q)[..=q];
                            let mut s = 0.0;
                            for (&bv, &xv_) in bp[..=q].iter().zip(xq) {
                                s += bv * xv_;
                            }
                            lbar.set(p, q, -s);
                        }
                    }
                    accum(&mut adj, *b, bbar);
                    accum(&mut adj, *l, lbar);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let av = &self.vals[*a];
                    let bv = &self.vals[*b];
                    let (abar, bbar) = match (ta, tb) {
                        (false, false) => (g.matmul_nt(bv), av.matmul_tn(&g)),
                        (true, false) => (bv.matmul_nt(&g), av.matmul(&g)),
                        (false, true) => (g.matmul(bv), g.matmul_tn(av)),
                        (true, true) => (
                            g.matmul(bv).transpose(),
                            av.matmul(&g).transpose(),
                        ),
                    };
                    accum(&mut adj, *a, abar);
                    accum(&mut adj, *b, bbar);
                }
                Op::Transpose { a } => {
                    accum(&mut adj, *a, g.transpose());
                }
                Op::Add { a, b } => {
                    accum(&mut adj, *a, g.clone());
                    accum(&mut adj, *b, g);
                }
                Op::Sub { a, b } => {
                    accum(&mut adj, *b, g.scaled(-1.0));
                    accum(&mut adj, *a, g);
                }
                Op::ColSqNorms { a } => {
                    let av = &self.vals[*a];
                    let mut abar = DenseMatrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        for j in 0..av.cols() {
                            abar.set(i, j, 2.0 * g.get(j, 0) * av.get(i, j));
                        }
                    }
                    accum(&mut adj, *a, abar);
                }
                Op::FrobSq { a } => {
                    accum(&mut adj, *a, self.vals[*a].scaled(2.0 * g.get(0, 0)));
                }
                Op::SumLogDiag { a } => {
                    let av = &self.vals[*a];
                    let s = g.get(0, 0);
                    let mut abar = DenseMatrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        abar.set(i, i, s / av.get(i, i));
                    }
                    accum(&mut adj, *a, abar);
                }
                Op::TriFromPacked { packed, m, diag_only } => {
                    let lv = &self.vals[id];
                    let len = self.vals[*packed].data().len();
                    let mut pbar = vec![0.0; len];
                    if *diag_only {
                        for i in 0..*m {
                            pbar[i] = g.get(i, i) * lv.get(i, i);
                        }
                    } else {
                        let mut k = 0;
                        for i in 0..*m {
                            for j in 0..i {
                                pbar[k] = g.get(i, j);
                                k += 1;
                            }
                            pbar[k] = g.get(i, i) * lv.get(i, i);
                            k += 1;
                        }
                    }
                    accum(&mut adj, *packed, DenseMatrix::column(&pbar));
                }
                Op::ColumnOf { a, col } => {
                    let av = &self.vals[*a];
                    let mut abar = DenseMatrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        abar.set(i, *col, g.get(i, 0));
                    }
                    accum(&mut adj, *a, abar);
                }
                Op::MaxScalar { a, floor } => {
                    let av = &self.vals[*a];
                    let mut abar = g;
                    for (out, &inp) in abar.data_mut().iter_mut().zip(av.data()) {
                        if inp <= *floor {
                            *out = 0.0;
                        }
                    }
                    accum(&mut adj, *a, abar);
                }
                Op::GaussLik { mean, var, y, s2 } => {
                    let s = g.get(0, 0);
                    let mv = &self.vals[*mean];
                    let (r, c) = mv.shape();
                    let mut mbar = DenseMatrix::zeros(r, c);
                    let mut vbar = DenseMatrix::zeros(r, c);
                    for (k, out) in mbar.data_mut().iter_mut().enumerate() {
                        *out = s * (y.data()[k] - mv.data()[k]) / s2.data()[k];
                    }
                    for (k, out) in vbar.data_mut().iter_mut().enumerate() {
                        *out = -s * 0.5 / s2.data()[k];
                    }
                    accum(&mut adj, *mean, mbar);
                    accum(&mut adj, *var, vbar);
                }
                Op::AxpyScalars { terms, .. } => {
                    let s = g.get(0, 0);
                    for &(c, node) in terms {
                        accum(&mut adj, node, DenseMatrix::scalar(s * c));
                    }
                }
            }
        }
        adj
    }

    /// Shared backward rule for the two gram operations. When `x` is None
    /// the gram is symmetric (z against itself); otherwise rows come from
    /// the constant x, which gets no adjoint.
    fn gram_backward(
        &self,
        g: &DenseMatrix,
        id: NodeId,
        x: Option<NodeId>,
        z: NodeId,
        log_ls: NodeId,
    ) -> (DenseMatrix, DenseMatrix, f64) {
        let k = &self.vals[id];
        let zv = &self.vals[z];
        let d = zv.cols();
        let w: Vec<f64> = self.vals[log_ls]
            .data()
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect();
        let mut zbar = DenseMatrix::zeros(zv.rows(), d);
        let mut lbar = DenseMatrix::zeros(d, 1);
        let mut svbar = 0.0;
        match x {
            None => {
                for i in 0..zv.rows() {
                    for j in 0..zv.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let c = gij * k.get(i, j);
                        svbar += c;
                        if i == j {
                            continue;
                        }
                        for dd in 0..d {
                            let u = zv.get(i, dd) - zv.get(j, dd);
                            let uw = u * w[dd];
                            lbar.set(dd, 0, lbar.get(dd, 0) + c * u * uw);
                            zbar.set(i, dd, zbar.get(i, dd) - c * uw);
                            zbar.set(j, dd, zbar.get(j, dd) + c * uw);
                        }
                    }
                }
            }
            Some(x) => {
                let xv = &self.vals[x];
                for i in 0..xv.rows() {
                    for j in 0..zv.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let c = gij * k.get(i, j);
                        svbar += c;
                        for dd in 0..d {
                            let u = xv.get(i, dd) - zv.get(j, dd);
                            let uw = u * w[dd];
                            lbar.set(dd, 0, lbar.get(dd, 0) + c * u * uw);
                            zbar.set(j, dd, zbar.get(j, dd) + c * uw);
                        }
                    }
                }
            }
        }
        (zbar, lbar, svbar)
    }

    /// Murray's Cholesky adjoint: with L = chol(A) and upstream Lbar,
    /// Abar = 1/2 (Pbar + Pbar^T) where Pbar = L^{-T} Phi(L^T Lbar) L^{-1}
    /// and Phi keeps the lower triangle with the diagonal halved.
    fn cholesky_backward(&self, g: &DenseMatrix, id: NodeId) -> DenseMatrix {
        let l = &self.vals[id];
        // Upstream may have scribbled on the strict upper triangle (e.g. a
        // transpose contribution); only the lower part of L exists.
        let gl = g.lower_triangle();
        let p = phi_product(l, &gl);
        let q = crate::numerics::tri_solve_lower(l, &p, true).expect("square system");
        let bbar = crate::numerics::tri_solve_lower(l, &q.transpose(), true)
            .expect("square system")
            .transpose();
        let mut abar = bbar.transpose();
        abar.add_assign(&bbar);
        abar.scale_inplace(0.5);
        abar
    }
}

/// Phi(L^T G) for lower-triangular L and G: the lower triangle of the
/// product with the diagonal halved, everything above left zero. Both
/// factors only have entries from row max(i, j) down, so the dense product
/// would spend most of its time multiplying structural zeros.
fn phi_product(l: &DenseMatrix, g: &DenseMatrix) -> DenseMatrix {
    let m = l.rows();
    let mut p = DenseMatrix::zeros(m, m);
    for i in 0..m {
        let width = i + 1;
        let pi = &mut p.row_mut(i)[..width];
        let mut k = i;
        while k + 4 <= m {
            let c = [l.get(k, i), l.get(k + 1, i), l.get(k + 2, i), l.get(k + 3, i)];
            let g0 = &g.row(k)[..width];
            let g1 = &g.row(k + 1)[..width];
            let g2 = &g.row(k + 2)[..width];
            let g3 = &g.row(k + 3)[..width];
            for ((((o, &v0), &v1), &v2), &v3) in
                pi.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3)
            {
                *o += c[0] * v0 + c[1] * v1 + c[2] * v2 + c[3] * v3;
            }
            k += 4;
        }
        while k < m {
            let c = l.get(k, i);
            if c != 0.0 {
                for (o, &v) in pi.iter_mut().zip(&g.row(k)[..width]) {
                    *o += c * v;
                }
            }
            k += 1;
        }
        pi[width - 1] *= 0.5;
    }
    p
}

fn accum(adj: &mut [Option<DenseMatrix>], id: NodeId, delta: DenseMatrix) {
    match &mut adj[id] {
        Some(a) => a.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
