//! Minimax relay-selection linear program.
//!
//! Given candidate (entry, exit) pairs and, for every adversary, the pairs it
//! can observe, find the distribution over pairs that minimizes the largest
//! observation probability of any single adversary:
//!
//! ```text
//! minimize z
//! subject to  z >= sum_{ij} P_ij * X_ijA   for every adversary A
//!             sum_{ij} P_ij = 1,  P_ij >= 0
//! ```
//!
//! Solved exactly with a dense two-phase simplex using Bland's rule.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::hash::Hash;

use serde::Serialize;
use thiserror::Error;

const EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LpError {
    #[error("selection problem has no candidate pairs")]
    EmptyPairs,
    #[error("adversary #{0} observes no candidate pair")]
    EmptyAdversary(usize),
    #[error("adversary #{adversary} references pair {pair} but only {pairs} pairs exist")]
    PairOutOfRange {
        adversary: usize,
        pair: usize,
        pairs: usize,
    },
    #[error("unknown adversary")]
    UnknownAdversary,
    #[error("linear program infeasible")]
    Infeasible,
    #[error("linear program unbounded")]
    Unbounded,
}

/// Candidate pairs and the adversaries observing each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem<A> {
    pairs: Vec<(usize, usize)>,
    adversaries: Vec<A>,
    /// Pair indices observed by each adversary, ascending.
    incidence: Vec<Vec<usize>>,
}

impl<A: Clone + Eq + Hash> SelectionProblem<A> {
    /// `incidence[k]` lists the pair indices adversary `k` observes.
    pub fn new(
        pairs: Vec<(usize, usize)>,
        adversaries: Vec<A>,
        incidence: Vec<Vec<usize>>,
    ) -> Result<Self, LpError> {
        if pairs.is_empty() {
            return Err(LpError::EmptyPairs);
        }
        assert_eq!(adversaries.len(), incidence.len(), "one incidence row per adversary");
        let mut rows = Vec::with_capacity(incidence.len());
        for (k, mut row) in incidence.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            if row.is_empty() {
                return Err(LpError::EmptyAdversary(k));
            }
            if let Some(&p) = row.iter().find(|&&p| p >= pairs.len()) {
                return Err(LpError::PairOutOfRange {
                    adversary: k,
                    pair: p,
                    pairs: pairs.len(),
                });
            }
            rows.push(row);
        }
        Ok(SelectionProblem {
            pairs,
            adversaries,
            incidence: rows,
        })
    }

    /// Builds a problem from the attacker set of every pair. Adversaries are
    /// listed in order of first appearance.
    pub fn from_pair_attackers<I, S>(pairs: Vec<(usize, usize)>, attackers: I) -> Result<Self, LpError>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = A>,
    {
        let mut index: HashMap<A, usize> = HashMap::new();
        let mut adversaries = Vec::new();
        let mut incidence: Vec<Vec<usize>> = Vec::new();
        for (p, set) in attackers.into_iter().enumerate() {
            for a in set {
                let k = *index.entry(a.clone()).or_insert_with(|| {
                    adversaries.push(a);
                    incidence.push(Vec::new());
                    incidence.len() - 1
                });
                incidence[k].push(p);
            }
        }
        Self::new(pairs, adversaries, incidence)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn adversaries(&self) -> &[A] {
        &self.adversaries
    }

    pub fn incidence(&self, k: usize) -> &[usize] {
        &self.incidence[k]
    }

    /// Observation probability of `adversary` under `dist`.
    pub fn exposure(&self, dist: &SelectionDistribution, adversary: &A) -> Result<f64, LpError> {
        let k = self
            .adversaries
            .iter()
            .position(|a| a == adversary)
            .ok_or(LpError::UnknownAdversary)?;
        Ok(self.exposure_of(&dist.probs, k))
    }

    fn exposure_of(&self, probs: &[f64], k: usize) -> f64 {
        self.incidence[k].iter().map(|&p| probs[p]).sum()
    }

    /// Largest per-adversary exposure under `probs`; zero with no adversaries.
    pub fn max_exposure(&self, probs: &[f64]) -> f64 {
        (0..self.adversaries.len())
            .map(|k| self.exposure_of(probs, k))
            .fold(0.0, f64::max)
    }

    /// Incidence rows with duplicates removed, in first-appearance order.
    fn distinct_rows(&self) -> Vec<&[usize]> {
        let mut seen = std::collections::HashSet::new();
        self.incidence
            .iter()
            .filter(|row| seen.insert(row.as_slice()))
            .map(Vec::as_slice)
            .collect()
    }

    fn standard_form(&self) -> Lp {
        let m = self.pairs.len();
        let rows = self.distinct_rows();
        let n = m + 1;
        let z = m;
        let mut lp = Lp::new(n);
        lp.cost[z] = 1.0;
        for row in rows {
            let mut coeffs = vec![0.0; n];
            for &p in row {
                coeffs[p] = 1.0;
            }
            coeffs[z] = -1.0;
            lp.add(coeffs, Sense::Le, 0.0);
        }
        let mut sum = vec![1.0; n];
        sum[z] = 0.0;
        lp.add(sum, Sense::Eq, 1.0);
        lp
    }
}

/// A distribution over the pairs of a [`SelectionProblem`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionDistribution {
    pub probs: Vec<f64>,
    /// Largest per-adversary exposure, i.e. the LP optimum.
    pub objective: f64,
}

/// Solves the minimax program. Deterministic for a fixed input order.
pub fn solve_minimax<A: Clone + Eq + Hash>(
    problem: &SelectionProblem<A>,
) -> Result<SelectionDistribution, LpError> {
    let lp = problem.standard_form();
    let solution = lp.solve()?;
    let m = problem.pairs.len();
    let mut probs: Vec<f64> = solution[..m].iter().map(|&p| p.max(0.0)).collect();
    let total: f64 = probs.iter().sum();
    if total <= EPS {
        return Err(LpError::Infeasible);
    }
    for p in &mut probs {
        *p /= total;
    }
    let objective = problem.max_exposure(&probs);
    Ok(SelectionDistribution { probs, objective })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sense {
    Le,
    Eq,
}

/// `minimize cost . x` subject to rows, `x >= 0`, every rhs nonnegative.
#[derive(Debug, Clone)]
struct Lp {
    n: usize,
    cost: Vec<f64>,
    rows: Vec<(Vec<f64>, Sense, f64)>,
}

impl Lp {
    fn new(n: usize) -> Self {
        Lp {
            n,
            cost: vec![0.0; n],
            rows: Vec::new(),
        }
    }

    fn add(&mut self, coeffs: Vec<f64>, sense: Sense, rhs: f64) {
        debug_assert!(rhs >= 0.0);
        self.rows.push((coeffs, sense, rhs));
    }

    fn tableau(&self) -> Tableau {
        let m = self.rows.len();
        let slacks = self.rows.iter().filter(|r| r.1 == Sense::Le).count();
        let artificials = m - slacks;
        let width = self.n + slacks + artificials;
        let mut t = Tableau {
            m,
            width,
            data: vec![0.0; (m + 1) * (width + 1)],
            basis: Vec::with_capacity(m),
            first_artificial: self.n + slacks,
            names: Vec::with_capacity(width),
        };
        let (mut s, mut a) = (self.n, self.n + slacks);
        for (i, (coeffs, sense, rhs)) in self.rows.iter().enumerate() {
            t.row_mut(i)[..self.n].copy_from_slice(coeffs);
            *t.rhs_mut(i) = *rhs;
            let col = match sense {
                Sense::Le => {
                    s += 1;
                    s - 1
                }
                Sense::Eq => {
                    a += 1;
                    a - 1
                }
            };
            t.row_mut(i)[col] = 1.0;
            t.basis.push(col);
        }
        t
    }

    fn solve(&self) -> Result<Vec<f64>, LpError> {
        let mut t = self.tableau();
        let art = t.first_artificial;

        // Phase 1: minimize the sum of artificials.
        if art < t.width {
            let mut phase1 = vec![0.0; t.width];
            for c in &mut phase1[art..] {
                *c = 1.0;
            }
            t.set_objective(&phase1);
            t.run(t.width)?;
            if -t.objective_value() > 1e-7 {
                return Err(LpError::Infeasible);
            }
            t.expel_artificials();
        }

        // Phase 2 over the structural and slack columns only.
        let mut cost = vec![0.0; t.width];
        cost[..self.n].copy_from_slice(&self.cost);
        t.set_objective(&cost);
        t.run(art)?;

        let mut x = vec![0.0; self.n];
        for (i, &b) in t.basis.iter().enumerate() {
            if b < self.n {
                x[b] = t.rhs(i);
            }
        }
        Ok(x)
    }
}

/// Dense simplex tableau. Row `m` is the reduced-cost row; the last column
/// holds the right-hand side.
struct Tableau {
    m: usize,
    width: usize,
    data: Vec<f64>,
    basis: Vec<usize>,
    first_artificial: usize,
    names: Vec<String>,
}

impl Tableau {
    fn stride(&self) -> usize {
        self.width + 1
    }

    fn row(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.data[i * s..(i + 1) * s]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.row(i)[self.width]
    }

    fn rhs_mut(&mut self, i: usize) -> &mut f64 {
        let w = self.width;
        &mut self.row_mut(i)[w]
    }

    fn objective_value(&self) -> f64 {
        self.rhs(self.m)
    }

    /// Loads `cost` as the objective row, priced out against the basis.
    fn set_objective(&mut self, cost: &[f64]) {
        let m = self.m;
        let w = self.width;
        {
            let obj = self.row_mut(m);
            obj[..w].copy_from_slice(cost);
            obj[w] = 0.0;
        }
        for i in 0..m {
            let b = self.basis[i];
            let factor = self.row(m)[b];
            if factor != 0.0 {
                self.axpy(m, i, -factor);
            }
        }
    }

    /// `row[dst] += factor * row[src]`.
    fn axpy(&mut self, dst: usize, src: usize, factor: f64) {
        let s = self.stride();
        let (a, b) = if dst < src {
            let (lo, hi) = self.data.split_at_mut(src * s);
            (&mut lo[dst * s..(dst + 1) * s], &hi[..s])
        } else {
            let (lo, hi) = self.data.split_at_mut(dst * s);
            (&mut hi[..s], &lo[src * s..(src + 1) * s])
        };
        for (x, y) in a.iter_mut().zip(b) {
            *x += factor * y;
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.row(r)[c];
        for x in self.row_mut(r) {
            *x /= p;
        }
        self.row_mut(r)[c] = 1.0;
        for i in 0..=self.m {
            if i != r {
                let f = self.row(i)[c];
                if f != 0.0 {
                    self.axpy(i, r, -f);
                    self.row_mut(i)[c] = 0.0;
                }
            }
        }
        self.basis[r] = c;
    }

    /// Runs Bland's-rule simplex, letting only columns `< limit` enter.
    fn run(&mut self, limit: usize) -> Result<(), LpError> {
        loop {
            let obj = self.row(self.m);
            let Some(c) = (0..limit).find(|&j| obj[j] < -EPS) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.row(i)[c];
                if a > EPS {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((k, best)) => {
                            if ratio < best - EPS
                                || (ratio <= best + EPS && self.basis[i] < self.basis[k])
                            {
                                Some((i, ratio))
                            } else {
                                Some((k, best))
                            }
                        }
                    };
                }
            }
            let (r, _) = leave.ok_or(LpError::Unbounded)?;
            self.pivot(r, c);
        }
    }

    /// After phase 1, pivots zero-level artificials out of the basis. Rows
    /// with no usable column are redundant and left on their artificial,
    /// which phase 2 can never re-enter.
    fn expel_artificials(&mut self) {
        for i in 0..self.m {
            if self.basis[i] >= self.first_artificial {
                if let Some(c) = (0..self.first_artificial).find(|&j| self.row(i)[j].abs() > EPS) {
                    self.pivot(i, c);
                }
            }
        }
    }

    fn render(&self, out: &mut String) {
        let _ = write!(out, "{:>8}", "basis");
        for name in &self.names {
            let _ = write!(out, " {name:>8}");
        }
        let _ = writeln!(out, " {:>8}", "rhs");
        for i in 0..=self.m {
            let label = if i == self.m {
                "obj".to_string()
            } else {
                self.names[self.basis[i]].clone()
            };
            let _ = write!(out, "{label:>8}");
            for x in self.row(i) {
                let _ = write!(out, " {x:>8.4}");
            }
            let _ = writeln!(out);
        }
    }
}

/// Plain-text dump of the program, its initial tableau and the solution.
pub fn dump_tableau<A: Clone + Eq + Hash + fmt::Display>(problem: &SelectionProblem<A>) -> String {
    let mut out = String::new();
    let m = problem.pairs.len();
    let _ = writeln!(out, "# minimax relay selection");
    let _ = writeln!(out, "pairs: {m}");
    for (k, (e, x)) in problem.pairs.iter().enumerate() {
        let _ = writeln!(out, "  P{k} = (entry {e}, exit {x})");
    }
    let _ = writeln!(out, "adversaries: {}", problem.adversaries.len());
    for (k, a) in problem.adversaries.iter().enumerate() {
        let terms: Vec<String> = problem.incidence[k].iter().map(|p| format!("P{p}")).collect();
        let _ = writeln!(out, "  z >= {}   [{a}]", terms.join(" + "));
    }
    let lp = problem.standard_form();
    let mut t = lp.tableau();
    let slacks = t.first_artificial - lp.n;
    t.names = (0..m)
        .map(|p| format!("P{p}"))
        .chain(std::iter::once("z".to_string()))
        .chain((0..slacks).map(|s| format!("s{s}")))
        .chain((0..t.width - t.first_artificial).map(|a| format!("a{a}")))
        .collect();
    let mut cost = vec![0.0; t.width];
    cost[m] = 1.0;
    t.set_objective(&cost);
    let _ = writeln!(out, "\n# initial tableau (minimize z)");
    t.render(&mut out);
    match solve_minimax(problem) {
        Ok(dist) => {
            let _ = writeln!(out, "\n# solution");
            let _ = writeln!(out, "z* = {:.9}", dist.objective);
            for (k, p) in dist.probs.iter().enumerate() {
                let _ = writeln!(out, "  P{k} = {p:.9}");
            }
        }
        Err(e) => {
            let _ = writeln!(out, "\n# solver error: {e}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp_example() -> SelectionProblem<&'static str> {
        // Three entries; AS1 sees entries 1 and 2, AS2 sees entry 3.
        SelectionProblem::new(
            vec![(0, 0), (1, 0), (2, 0)],
            vec!["AS1", "AS2"],
            vec![vec![0, 1], vec![2]],
        )
        .unwrap()
    }

    #[test]
    fn figure_example() {
        let p = lp_example();
        let uniform = SelectionDistribution {
            probs: vec![1.0 / 3.0; 3],
            objective: 0.0,
        };
        assert!((p.exposure(&uniform, &"AS1").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let d = solve_minimax(&p).unwrap();
        assert!((d.objective - 0.5).abs() < 1e-9);
        assert!((d.probs[2] - 0.5).abs() < 1e-9);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_pair() {
        let p = SelectionProblem::new(vec![(0, 0)], vec!["A"], vec![vec![0]]).unwrap();
        let d = solve_minimax(&p).unwrap();
        assert_eq!(d.probs, vec![1.0]);
        assert!((d.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singletons_spread_uniformly() {
        for k in 1..=6usize {
            let p = SelectionProblem::new(
                (0..k).map(|i| (i, 0)).collect(),
                (0..k).collect(),
                (0..k).map(|i| vec![i]).collect(),
            )
            .unwrap();
            let d = solve_minimax(&p).unwrap();
            assert!((d.objective - 1.0 / k as f64).abs() < 1e-9);
            for i in 0..k {
                assert!((p.exposure(&d, &i).unwrap() - 1.0 / k as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adversary_everywhere_forces_one() {
        let p = SelectionProblem::new(
            vec![(0, 0), (0, 1), (1, 0)],
            vec!["all", "one"],
            vec![vec![0, 1, 2], vec![1]],
        )
        .unwrap();
        let d = solve_minimax(&p).unwrap();
        assert!((d.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            SelectionProblem::<u8>::new(vec![], vec![], vec![]).unwrap_err(),
            LpError::EmptyPairs
        );
        assert_eq!(
            SelectionProblem::new(vec![(0, 0)], vec![1u8], vec![vec![]]).unwrap_err(),
            LpError::EmptyAdversary(0)
        );
        assert!(matches!(
            SelectionProblem::new(vec![(0, 0)], vec![1u8], vec![vec![3]]).unwrap_err(),
            LpError::PairOutOfRange { .. }
        ));
        let p = lp_example();
        let d = SelectionDistribution {
            probs: vec![1.0, 0.0, 0.0],
            objective: 1.0,
        };
        assert_eq!(p.exposure(&d, &"AS9"), Err(LpError::UnknownAdversary));
        assert_eq!(p.exposure(&d, &"AS2"), Ok(0.0));
    }

    #[test]
    fn duplicate_rows_and_no_adversaries() {
        let p = SelectionProblem::from_pair_attackers(
            vec![(0, 0), (1, 0)],
            vec![vec!["a", "b"], vec!["c"]],
        )
        .unwrap();
        assert_eq!(p.adversaries(), &["a", "b", "c"]);
        let d = solve_minimax(&p).unwrap();
        assert!((d.objective - 0.5).abs() < 1e-9);

        let p = SelectionProblem::<u8>::new(vec![(0, 0), (1, 1)], vec![], vec![]).unwrap();
        let d = solve_minimax(&p).unwrap();
        assert_eq!(d.objective, 0.0);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dump_mentions_every_pair() {
        let text = dump_tableau(&lp_example());
        assert!(text.contains("P2 = (entry 2, exit 0)"));
        assert!(text.contains("z* = 0.5"));
        assert!(text.contains("initial tableau"));
    }
}
