//! Dense two-phase simplex for small linear programs of the form
//!
//! ```text
//! minimize c . t   subject to   G t <= h,   0 <= t <= w
//! ```
//!
//! Used to settle branch-and-bound leaves where every ReLU phase is fixed and
//! the network is affine on a polyhedral region. Bland's rule keeps it
//! cycle-free; problem sizes here are tens of variables and rows.

const EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, point: Vec<f64> },
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct BoxedLp {
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub upper: Vec<f64>,
}

struct Tableau {
    // m rows of [coefficients..., rhs]
    a: Vec<Vec<f64>>,
    basis: Vec<usize>,
    ncols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize, obj: &mut [f64]) {
        let p = self.a[row][col];
        for v in self.a[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.a[row].clone();
        for (r, line) in self.a.iter_mut().enumerate() {
            if r != row {
                let f = line[col];
                if f != 0.0 {
                    for (v, pv) in line.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        let f = obj[col];
        if f != 0.0 {
            for (v, pv) in obj.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
        }
        self.basis[row] = col;
    }

    /// Minimises the reduced-cost row `obj` (last entry holds -value) over the
    /// columns allowed by `allowed`. Returns false if unbounded.
    fn optimize(&mut self, obj: &mut [f64], allowed: &dyn Fn(usize) -> bool) -> bool {
        loop {
            let Some(col) = (0..self.ncols).find(|&j| allowed(j) && obj[j] < -EPS) else {
                return true;
            };
            let mut best: Option<(usize, f64)> = None;
            for (r, line) in self.a.iter().enumerate() {
                if line[col] > EPS {
                    let ratio = line[self.ncols] / line[col];
                    best = match best {
                        None => Some((r, ratio)),
                        Some((br, bv)) => {
                            if ratio < bv - EPS || (ratio <= bv + EPS && self.basis[r] < self.basis[br]) {
                                Some((r, ratio))
                            } else {
                                Some((br, bv))
                            }
                        }
                    };
                }
            }
            match best {
                Some((row, _)) => self.pivot(row, col, obj),
                None => return false,
            }
        }
    }
}

impl BoxedLp {
    pub fn solve(&self) -> LpOutcome {
        let n = self.objective.len();
        // Constraint rows: the general rows followed by t_j <= w_j.
        let mut rows: Vec<(Vec<f64>, f64)> = self
            .rows
            .iter()
            .cloned()
            .zip(self.rhs.iter().copied())
            .collect();
        for j in 0..n {
            let mut r = vec![0.0; n];
            r[j] = 1.0;
            rows.push((r, self.upper[j]));
        }
        let m = rows.len();
        let negative: Vec<usize> = (0..m).filter(|&i| rows[i].1 < 0.0).collect();
        let n_art = negative.len();
        let ncols = n + m + n_art;
        let mut a = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        for (i, (coef, h)) in rows.iter().enumerate() {
            let mut line = vec![0.0; ncols + 1];
            let sign = if *h < 0.0 { -1.0 } else { 1.0 };
            for j in 0..n {
                line[j] = sign * coef[j];
            }
            line[n + i] = sign;
            line[ncols] = sign * h;
            if let Some(k) = negative.iter().position(|&r| r == i) {
                line[n + m + k] = 1.0;
                basis.push(n + m + k);
            } else {
                basis.push(n + i);
            }
            a.push(line);
        }
        let mut t = Tableau { a, basis, ncols };

        if n_art > 0 {
            // Phase 1: minimise the sum of artificials.
            let mut obj = vec![0.0; ncols + 1];
            for k in 0..n_art {
                obj[n + m + k] = 1.0;
            }
            for (r, &b) in t.basis.clone().iter().enumerate() {
                if b >= n + m {
                    for (o, v) in obj.iter_mut().zip(&t.a[r]) {
                        *o -= v;
                    }
                }
            }
            t.optimize(&mut obj, &|_| true);
            if -obj[ncols] > 1e-9 {
                return LpOutcome::Infeasible;
            }
            // Drive remaining artificials out of the basis.
            for r in 0..m {
                if t.basis[r] >= n + m {
                    if let Some(col) = (0..n + m).find(|&j| t.a[r][j].abs() > EPS) {
                        let mut dummy = vec![0.0; ncols + 1];
                        t.pivot(r, col, &mut dummy);
                    }
                }
            }
        }

        let mut obj = vec![0.0; ncols + 1];
        obj[..n].copy_from_slice(&self.objective);
        for (r, &b) in t.basis.clone().iter().enumerate() {
            let cb = if b < n { self.objective[b] } else { 0.0 };
            if cb != 0.0 {
                for (o, v) in obj.iter_mut().zip(&t.a[r]) {
                    *o -= cb * v;
                }
            }
        }
        let bounded = t.optimize(&mut obj, &|j| j < n + m);
        debug_assert!(bounded, "boxed LP cannot be unbounded");
        let mut point = vec![0.0; n];
        for (r, &b) in t.basis.iter().enumerate() {
            if b < n {
                point[b] = t.a[r][ncols].clamp(0.0, self.upper[b]);
            }
        }
        let value = self.objective.iter().zip(&point).map(|(c, x)| c * x).sum();
        LpOutcome::Optimal { value, point }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force optimum over vertices of the 2-D polygon: every pair of
    /// tight constraints, kept when feasible.
    fn vertex_oracle(lp: &BoxedLp) -> Option<f64> {
        let mut cons: Vec<(Vec<f64>, f64)> = lp.rows.iter().cloned().zip(lp.rhs.iter().copied()).collect();
        for j in 0..2 {
            let mut e = vec![0.0; 2];
            e[j] = 1.0;
            cons.push((e.clone(), lp.upper[j]));
            e[j] = -1.0;
            cons.push((e, 0.0));
        }
        let mut best: Option<f64> = None;
        for i in 0..cons.len() {
            for k in i + 1..cons.len() {
                let (a, b) = (&cons[i], &cons[k]);
                let det = a.0[0] * b.0[1] - a.0[1] * b.0[0];
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (a.1 * b.0[1] - a.0[1] * b.1) / det;
                let y = (a.0[0] * b.1 - a.1 * b.0[0]) / det;
                if cons.iter().all(|(c, h)| c[0] * x + c[1] * y <= h + 1e-9) {
                    let v = lp.objective[0] * x + lp.objective[1] * y;
                    best = Some(best.map_or(v, |bv: f64| bv.min(v)));
                }
            }
        }
        best
    }

    #[test]
    fn simple_corner() {
        let lp = BoxedLp {
            objective: vec![1.0, -1.0],
            rows: vec![],
            rhs: vec![],
            upper: vec![2.0, 3.0],
        };
        assert_eq!(
            lp.solve(),
            LpOutcome::Optimal {
                value: -3.0,
                point: vec![0.0, 3.0]
            }
        );
    }

    #[test]
    fn infeasible_region() {
        // t0 >= 2 with t0 <= 1
        let lp = BoxedLp {
            objective: vec![1.0],
            rows: vec![vec![-1.0]],
            rhs: vec![-2.0],
            upper: vec![1.0],
        };
        assert_eq!(lp.solve(), LpOutcome::Infeasible);
    }

    #[test]
    fn lower_cut_needs_phase_one() {
        // minimise t0 + t1 subject to t0 + t1 >= 1, box [0,1]^2
        let lp = BoxedLp {
            objective: vec![1.0, 1.0],
            rows: vec![vec![-1.0, -1.0]],
            rhs: vec![-1.0],
            upper: vec![1.0, 1.0],
        };
        match lp.solve() {
            LpOutcome::Optimal { value, point } => {
                assert!((value - 1.0).abs() < 1e-12);
                assert!((point[0] + point[1] - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn agrees_with_vertex_enumeration(
            obj in prop::collection::vec(-2.0f64..2.0, 2),
            rows in prop::collection::vec((prop::collection::vec(-2.0f64..2.0, 2), -1.0f64..2.0), 0..6),
            upper in prop::collection::vec(0.1f64..2.0, 2),
        ) {
            let lp = BoxedLp {
                objective: obj,
                rows: rows.iter().map(|r| r.0.clone()).collect(),
                rhs: rows.iter().map(|r| r.1).collect(),
                upper,
            };
            match (lp.solve(), vertex_oracle(&lp)) {
                (LpOutcome::Optimal { value, point }, Some(v)) => {
                    prop_assert!((value - v).abs() < 1e-7, "simplex {} vs vertices {}", value, v);
                    for (r, h) in lp.rows.iter().zip(&lp.rhs) {
                        prop_assert!(r[0] * point[0] + r[1] * point[1] <= h + 1e-7);
                    }
                }
                (LpOutcome::Infeasible, None) => {}
                (got, want) => prop_assert!(false, "simplex {:?} vs vertices {:?}", got, want),
            }
        }
    }
}
