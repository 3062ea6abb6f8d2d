//! Block-sparse symmetric normal equations and their Cholesky solution.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DMatrixView, DVector};

use super::{GraphError, VariableIndex};
use crate::scalar::Real;

/// Variables taking part in a solve, in a fixed order, with their offsets in
/// the stacked increment vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    vars: Vec<VariableIndex>,
    offsets: Vec<usize>,
    lookup: BTreeMap<VariableIndex, usize>,
    dim: usize,
}

impl BlockLayout {
    pub fn new(vars: Vec<VariableIndex>) -> Self {
        let mut offsets = Vec::with_capacity(vars.len());
        let mut dim = 0;
        for v in &vars {
            offsets.push(dim);
            dim += v.dim();
        }
        let lookup = vars.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        Self { vars, offsets, lookup, dim }
    }

    pub fn vars(&self) -> &[VariableIndex] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, var: &VariableIndex) -> Option<usize> {
        self.lookup.get(var).copied()
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    pub fn block_dim(&self, block: usize) -> usize {
        self.vars[block].dim()
    }
}

/// Symmetric block matrix `A` (lower triangle stored) and right-hand side `b`
/// of `A δ = b`.
#[derive(Debug, Clone)]
pub struct SparseBlockSystem<T: Real> {
    layout: BlockLayout,
    diag: Vec<DMatrix<T>>,
    /// Keyed `(row, col)` with `row > col`.
    lower: BTreeMap<(usize, usize), DMatrix<T>>,
    rhs: Vec<DVector<T>>,
}

impl<T: Real> SparseBlockSystem<T> {
    pub fn zeros(layout: BlockLayout) -> Self {
        let diag = (0..layout.len()).map(|i| DMatrix::zeros(layout.block_dim(i), layout.block_dim(i))).collect();
        let rhs = (0..layout.len()).map(|i| DVector::zeros(layout.block_dim(i))).collect();
        Self { layout, diag, lower: BTreeMap::new(), rhs }
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn diagonal(&self, i: usize) -> &DMatrix<T> {
        &self.diag[i]
    }

    /// Block `(i, j)` of the full symmetric matrix, if structurally nonzero.
    pub fn block(&self, i: usize, j: usize) -> Option<DMatrix<T>> {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Equal => Some(self.diag[i].clone()),
            Greater => self.lower.get(&(i, j)).cloned(),
            Less => self.lower.get(&(j, i)).map(|b| b.transpose()),
        }
    }

    pub fn rhs(&self) -> &[DVector<T>] {
        &self.rhs
    }

    /// Structurally nonzero off-diagonal blocks `(row, col)`, `row > col`.
    pub fn off_diagonal_pattern(&self) -> Vec<(usize, usize)> {
        self.lower.keys().copied().collect()
    }

    /// Adds `block` to `A(i, j)` and, for `i != j`, its transpose to `A(j, i)`.
    pub fn add_block(&mut self, i: usize, j: usize, block: &DMatrix<T>) {
        if i == j {
            self.diag[i] += block;
        } else if i > j {
            self.lower
                .entry((i, j))
                .and_modify(|b| *b += block)
                .or_insert_with(|| block.clone());
        } else {
            let t = block.transpose();
            self.lower.entry((j, i)).and_modify(|b| *b += &t).or_insert(t);
        }
    }

    pub fn add_rhs(&mut self, i: usize, v: &DVector<T>) {
        self.rhs[i] += v;
    }

    /// `A(i, j) += aᵀ b` for `i ≥ j`, in place. Diagonal blocks filled this
    /// way need [`SparseBlockSystem::symmetrize_diagonal`] afterwards.
    pub fn add_gram(&mut self, i: usize, j: usize, a: DMatrixView<'_, T>, b: DMatrixView<'_, T>) {
        debug_assert!(i >= j);
        let target = if i == j {
            &mut self.diag[i]
        } else {
            self.lower.entry((i, j)).or_insert_with(|| DMatrix::zeros(a.ncols(), b.ncols()))
        };
        // Reprojection residuals are two rows against pose/landmark blocks; the
        // fixed-size products are far cheaper than the dynamic gemm.
        macro_rules! fixed {
            ($($ra:literal, $ca:literal, $cb:literal);*) => {
                $(if a.nrows() == $ra && a.ncols() == $ca && b.ncols() == $cb {
                    let fa = a.fixed_view::<$ra, $ca>(0, 0);
                    let fb = b.fixed_view::<$ra, $cb>(0, 0);
                    let mut t = target.fixed_view_mut::<$ca, $cb>(0, 0);
                    t += fa.tr_mul(&fb);
                    return;
                })*
            };
        }
        fixed!(2, 12, 12; 2, 12, 3; 2, 3, 12; 2, 3, 3; 12, 12, 12);
        target.gemm_tr(T::one(), &a, &b, T::one());
    }

    /// `b(i) −= aᵀ v`, in place.
    pub fn sub_rhs_tr(&mut self, i: usize, a: DMatrixView<'_, T>, v: &DVector<T>) {
        self.rhs[i].gemv_tr(-T::one(), &a, v, T::one());
    }

    pub fn symmetrize_diagonal(&mut self) {
        let half = T::lit(0.5);
        for d in &mut self.diag {
            let t = d.transpose();
            *d += t;
            *d *= half;
        }
    }

    pub fn to_dense(&self) -> (DMatrix<T>, DVector<T>) {
        let n = self.layout.dim();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for i in 0..self.layout.len() {
            let (oi, di) = (self.layout.offset(i), self.layout.block_dim(i));
            a.view_mut((oi, oi), (di, di)).copy_from(&self.diag[i]);
            b.rows_mut(oi, di).copy_from(&self.rhs[i]);
        }
        for (&(i, j), blk) in &self.lower {
            let (oi, oj) = (self.layout.offset(i), self.layout.offset(j));
            a.view_mut((oi, oj), blk.shape()).copy_from(blk);
            a.view_mut((oj, oi), (blk.ncols(), blk.nrows())).copy_from(&blk.transpose());
        }
        (a, b)
    }

    fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.layout.len()];
        for &(i, j) in self.lower.keys() {
            adj[i].insert(j);
            adj[j].insert(i);
        }
        adj
    }
}

/// Elimination order by minimum degree on the block graph. Degrees count
/// scalar dimensions so that a landmark (3) is cheaper than a state (12);
/// ties go to the lowest block index.
pub fn minimum_degree_ordering(block_dims: &[usize], adjacency: &[BTreeSet<usize>]) -> Vec<usize> {
    let n = block_dims.len();
    let mut adj: Vec<BTreeSet<usize>> = adjacency.to_vec();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let pivot = (0..n)
            .filter(|&v| !eliminated[v])
            .min_by_key(|&v| (adj[v].iter().map(|&u| block_dims[u]).sum::<usize>(), v))
            .expect("remaining vertex");
        eliminated[pivot] = true;
        order.push(pivot);
        let nbrs: Vec<usize> = adj[pivot].iter().copied().collect();
        for &a in &nbrs {
            adj[a].remove(&pivot);
            for &b in &nbrs {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
        adj[pivot].clear();
    }
    order
}

/// In-place dense Cholesky `A = L Lᵀ`, failing on pivots that are not
/// positive relative to the original diagonal.
fn dense_cholesky<T: Real>(a: &DMatrix<T>) -> Option<DMatrix<T>> {
    let n = a.nrows();
    let rel_tol = T::default_epsilon().sqrt() * T::lit(1e-2);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        let scale = a[(j, j)].abs().max(T::lit(1e-30));
        if !(d > rel_tol * scale) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `L X = B` for lower-triangular `L`.
fn forward_sub<T: Real>(l: &DMatrix<T>, b: &mut DMatrix<T>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
fn backward_sub<T: Real>(l: &DMatrix<T>, b: &mut DMatrix<T>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = b[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

/// Block Cholesky factor `P A Pᵀ = L Lᵀ` under a fill-reducing ordering.
#[derive(Debug, Clone)]
pub struct BlockCholesky<T: Real> {
    order: Vec<usize>,
    diag: Vec<DMatrix<T>>,
    /// For each eliminated block (by elimination step), the below-diagonal
    /// blocks `(row block, L_rc)`.
    columns: Vec<Vec<(usize, DMatrix<T>)>>,
    position: Vec<usize>,
}

impl<T: Real> BlockCholesky<T> {
    pub fn factor(sys: &SparseBlockSystem<T>) -> Result<Self, GraphError> {
        let n = sys.layout.len();
        let dims: Vec<usize> = (0..n).map(|i| sys.layout.block_dim(i)).collect();
        let order = minimum_degree_ordering(&dims, &sys.adjacency());
        let mut position = vec![0; n];
        for (p, &b) in order.iter().enumerate() {
            position[b] = p;
        }

        // Working lower triangle keyed by (row, col) with position[row] > position[col].
        let mut work: BTreeMap<(usize, usize), DMatrix<T>> = BTreeMap::new();
        for (&(i, j), blk) in &sys.lower {
            if position[i] > position[j] {
                work.insert((i, j), blk.clone());
            } else {
                work.insert((j, i), blk.transpose());
            }
        }
        // Column structure per block, grown by fill as elimination proceeds.
        let mut structure: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(r, c) in work.keys() {
            structure[c].insert(r);
        }
        let mut diag_work: Vec<DMatrix<T>> = sys.diag.clone();
        let mut diag = vec![DMatrix::zeros(0, 0); n];
        let mut columns = Vec::with_capacity(n);

        for &c in &order {
            let l_cc = dense_cholesky(&diag_work[c]).ok_or(GraphError::RankDeficient { variable: sys.layout.vars[c] })?;
            let rows: Vec<usize> = structure[c].iter().copied().collect();
            let mut col_blocks = Vec::with_capacity(rows.len());
            for &r in &rows {
                // L_rc = M_rc L_cc⁻ᵀ  ⇔  L_cc L_rcᵀ = M_rcᵀ
                let mut t = work.remove(&(r, c)).expect("structural block").transpose();
                forward_sub(&l_cc, &mut t);
                col_blocks.push((r, t.transpose()));
            }
            for (a, (ra, la)) in col_blocks.iter().enumerate() {
                diag_work[*ra] -= la * la.transpose();
                for (rb, lb) in col_blocks.iter().skip(a + 1) {
                    let (hi, lo, upd) = if position[*ra] > position[*rb] {
                        (*ra, *rb, la * lb.transpose())
                    } else {
                        (*rb, *ra, lb * la.transpose())
                    };
                    work.entry((hi, lo)).and_modify(|m| *m -= &upd).or_insert_with(|| -upd);
                    structure[lo].insert(hi);
                }
            }
            diag[c] = l_cc;
            columns.push(col_blocks);
        }
        Ok(Self { order, diag, columns, position })
    }

    pub fn ordering(&self) -> &[usize] {
        &self.order
    }

    /// Number of stored below-diagonal blocks in the factor (fill included).
    pub fn factor_blocks(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    pub fn solve(&self, rhs: &[DVector<T>]) -> Vec<DVector<T>> {
        let mut y: Vec<DMatrix<T>> = rhs.iter().map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice())).collect();
        for (step, &c) in self.order.iter().enumerate() {
            forward_sub(&self.diag[c], &mut y[c]);
            let yc = y[c].clone();
            for (r, l_rc) in &self.columns[step] {
                y[*r] -= l_rc * &yc;
            }
        }
        for (step, &c) in self.order.iter().enumerate().rev() {
            let mut acc = y[c].clone();
            for (r, l_rc) in &self.columns[step] {
                acc -= l_rc.transpose() * &y[*r];
            }
            backward_sub(&self.diag[c], &mut acc);
            y[c] = acc;
        }
        debug_assert!(self.position.len() == y.len());
        y.into_iter().map(|m| DVector::from_column_slice(m.as_slice())).collect()
    }
}

/// Solves `A δ = b`, returning `δ` stacked in layout order.
pub fn solve_normal_equations<T: Real>(sys: &SparseBlockSystem<T>) -> Result<DVector<T>, GraphError> {
    let chol = BlockCholesky::factor(sys)?;
    let blocks = chol.solve(&sys.rhs);
    let mut out = DVector::zeros(sys.layout.dim());
    for (i, b) in blocks.iter().enumerate() {
        out.rows_mut(sys.layout.offset(i), b.len()).copy_from(b);
    }
    Ok(out)
}
