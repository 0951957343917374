//! POVM reconstruction from coherent-probe statistics.
//!
//! The detector response is modelled as `p[n][j] = sum_m Pi[n][m] q[m][j]`
//! with `q` the Poisson statistics of probe `j`. Given measured `p`, we
//! minimize
//!
//! ```text
//! D(Pi) + w S(Pi),   D = sum_{n,j} (sum_m Pi[n][m] q[m][j] - p[n][j])^2
//!                    S = sum_n sum_m (Delta^k Pi[n][.])_m^2
//! ```
//!
//! over column-stochastic `Pi` (each column on the probability simplex),
//! where `Delta^k` is the `k`-th forward difference along the photon number
//! (`k = 1` is the plain first-difference penalty; the default is `k = 2`).
//! Photon numbers at or beyond the truncation are handled by
//! [`TailPolicy`]; the default folds the probe tail into the last column.
//!
//! The solver takes gradient steps, projects every column back onto the
//! simplex, and adds restarted momentum; a step that would raise the
//! objective is replaced by a plain projected-gradient step, so the
//! objective history never increases. Step sizes are either `1/L` for a
//! global Lipschitz bound `L` or, by default, one per column from the
//! Gershgorin row sums of the Hessian; both majorize the objective, and a
//! per-column scale leaves the simplex projection Euclidean.

mod simplex;

pub use simplex::project_simplex;

use serde::{Deserialize, Serialize};

use crate::calibration::CountTable;
use crate::error::{Error, Result};
use crate::photon_stats::{binomial_pmf, check_eta, PovmMatrix, ProbeEnsemble, ProbeMatrix, TailPolicy};

/// Starting point of the iteration. The problem is convex, so this only
/// changes the number of iterations and, where the data leave directions
/// unconstrained, which of the equivalent minimizers is returned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "eta")]
pub enum Initialization {
    /// Every column uniform over the outcomes.
    Uniform,
    /// Linear-detector POVM at the given efficiency.
    Binomial(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    /// Fock-space truncation `M`.
    pub truncation: usize,
    /// Number of outcomes `N`; the last one is cumulative.
    pub n_outcomes: usize,
    /// Weight of the smoothness penalty.
    pub reg_weight: f64,
    pub max_iters: usize,
    /// Stop once the relative objective decrease stays below this.
    pub tol: f64,
    pub init: Initialization,
    /// Momentum on top of projected gradient; off gives the plain method.
    pub accelerated: bool,
    /// Per-column (diagonal) step sizes instead of one global `1/L`.
    pub preconditioned: bool,
    /// Order of the finite difference along `m` in the smoothness penalty.
    pub smoothness_order: usize,
    /// Treatment of probe photon numbers at or beyond the truncation.
    pub tail_policy: TailPolicy,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            truncation: 140,
            n_outcomes: 12,
            reg_weight: 1e-3,
            max_iters: 200_000,
            tol: 1e-10,
            init: Initialization::Uniform,
            accelerated: true,
            preconditioned: true,
            smoothness_order: 2,
            tail_policy: TailPolicy::Absorb,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outcomes < 2 {
            return Err(Error::config("need at least 2 outcomes"));
        }
        if self.truncation == 0 {
            return Err(Error::config("truncation must be at least 1"));
        }
        if !(self.reg_weight.is_finite() && self.reg_weight >= 0.0) {
            return Err(Error::config(format!("reg_weight must be >= 0, got {}", self.reg_weight)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::config(format!("tol must be positive, got {}", self.tol)));
        }
        if !(1..=3).contains(&self.smoothness_order) {
            return Err(Error::config(format!("smoothness_order must be 1, 2 or 3, got {}", self.smoothness_order)));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be positive"));
        }
        if let Initialization::Binomial(eta) = self.init {
            check_eta(eta).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub povm: PovmMatrix,
    /// Objective after initialization and after every iteration.
    pub objective_history: Vec<f64>,
    pub data_term: f64,
    pub reg_term: f64,
    /// Euclidean norm of the residual column of each probe, in input order.
    pub per_probe_residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Global Lipschitz bound of the gradient (the step size unless
    /// per-column steps are enabled).
    pub lipschitz: f64,
    /// Poisson mass beyond the truncation for each probe, in input order.
    pub probe_tail_mass: Vec<f64>,
}

/// `r[n][j] = sum_m Pi[n][m] q[m][j]`, returned row-major `N x K`.
pub fn forward_model(povm: &PovmMatrix, q: &ProbeMatrix) -> Result<Vec<f64>> {
    if povm.truncation() != q.truncation() {
        return Err(Error::shape(format!(
            "POVM truncation {} does not match probe matrix truncation {}",
            povm.truncation(),
            q.truncation()
        )));
    }
    let k = q.n_probes();
    let mut out = vec![0.0; povm.n_outcomes() * k];
    for n in 0..povm.n_outcomes() {
        let row = povm.row(n);
        for j in 0..k {
            out[n * k + j] = row.iter().enumerate().map(|(m, p)| p * q.get(m, j)).sum();
        }
    }
    Ok(out)
}

/// Reconstructs the POVM from a count table. Columns are matched to probes by id.
pub fn reconstruct_povm(
    counts: &CountTable,
    ensemble: &ProbeEnsemble,
    cfg: &ReconstructionConfig,
) -> Result<ReconstructionResult> {
    if counts.n_probes() != ensemble.len() {
        return Err(Error::shape(format!(
            "count table has {} probes, ensemble has {}",
            counts.n_probes(),
            ensemble.len()
        )));
    }
    if counts.n_outcomes() != cfg.n_outcomes {
        return Err(Error::shape(format!(
            "count table has {} outcomes, configuration expects {}",
            counts.n_outcomes(),
            cfg.n_outcomes
        )));
    }
    let mut probs = Vec::with_capacity(ensemble.len());
    for probe in ensemble.probes() {
        let j = counts
            .index_of(probe.id)
            .ok_or_else(|| Error::shape(format!("probe {} missing from count table", probe.id)))?;
        if counts.total(j) == 0 {
            return Err(Error::Domain(format!("probe {} has no events", probe.id)));
        }
        probs.push(counts.probs(j));
    }
    reconstruct_from_probabilities(&probs, &ensemble.mean_photons(), cfg)
}

/// Reconstructs the POVM from measured outcome distributions, one per probe.
pub fn reconstruct_from_probabilities(
    probs: &[Vec<f64>],
    means: &[f64],
    cfg: &ReconstructionConfig,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    if probs.is_empty() || probs.len() != means.len() {
        return Err(Error::shape(format!("{} distributions for {} probes", probs.len(), means.len())));
    }
    for (j, p) in probs.iter().enumerate() {
        if p.len() != cfg.n_outcomes {
            return Err(Error::shape(format!("probe {j}: {} outcomes, expected {}", p.len(), cfg.n_outcomes)));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("probe {j} distribution")));
        }
    }
    if means.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("mean photon number".into()));
    }

    // The objective is a sum over probes; fixing the summation order makes
    // the result independent of the order probes were supplied in.
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| {
        means[a].total_cmp(&means[b]).then_with(|| {
            probs[a]
                .iter()
                .zip(&probs[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let sorted_means: Vec<f64> = order.iter().map(|&j| means[j]).collect();
    let q = ProbeMatrix::with_policy(&sorted_means, cfg.truncation, cfg.tail_policy)?;
    let problem = Problem::new(cfg, &q, order.iter().map(|&j| probs[j].as_slice()));
    let mut solution = problem.solve(cfg);

    let mut per_probe_residuals = vec![0.0; means.len()];
    let mut probe_tail_mass = vec![0.0; means.len()];
    for (sorted_j, &orig_j) in order.iter().enumerate() {
        per_probe_residuals[orig_j] = solution.residual_norms[sorted_j];
        probe_tail_mass[orig_j] = q.tail_mass()[sorted_j];
    }
    let povm = PovmMatrix::from_parts_unchecked(cfg.n_outcomes, cfg.truncation, std::mem::take(&mut solution.x), true);
    Ok(ReconstructionResult {
        povm,
        objective_history: solution.history,
        data_term: solution.data_term,
        reg_term: solution.reg_term,
        per_probe_residuals,
        converged: solution.converged,
        iterations: solution.iterations,
        lipschitz: problem.lipschitz,
        probe_tail_mass,
    })
}

/// Quadratic program data in solver layout.
struct Problem {
    n: usize,
    m: usize,
    k: usize,
    /// `q` transposed, row-major `K x M`.
    qt: Vec<f64>,
    /// Measured distributions, row-major `N x K`.
    p: Vec<f64>,
    reg: f64,
    stencil: &'static [f64],
    lipschitz: f64,
    /// Per-column step sizes (all equal to `1 / lipschitz` unless preconditioned).
    steps: Vec<f64>,
}

struct Evaluation {
    data_term: f64,
    reg_term: f64,
    residual: Vec<f64>,
}

impl Evaluation {
    fn objective(&self, reg: f64) -> f64 {
        self.data_term + reg * self.reg_term
    }
}

struct Solution {
    x: Vec<f64>,
    history: Vec<f64>,
    data_term: f64,
    reg_term: f64,
    residual_norms: Vec<f64>,
    converged: bool,
    iterations: usize,
}

impl Problem {
    fn new<'a>(cfg: &ReconstructionConfig, q: &ProbeMatrix, probs: impl Iterator<Item = &'a [f64]>) -> Self {
        let (n, m, k) = (cfg.n_outcomes, cfg.truncation, q.n_probes());
        let mut qt = vec![0.0; k * m];
        for j in 0..k {
            for mm in 0..m {
                qt[j * m + mm] = q.get(mm, j);
            }
        }
        let mut p = vec![0.0; n * k];
        for (j, col) in probs.enumerate() {
            for (nn, &v) in col.iter().enumerate() {
                p[nn * k + j] = v;
            }
        }
        let stencil = difference_stencil(cfg.smoothness_order);
        let lipschitz = 2.0 * (gram_spectral_bound(&qt, k, m) + cfg.reg_weight * difference_spectral_bound(stencil, m));
        let lipschitz = lipschitz.max(f64::MIN_POSITIVE);
        let steps = if cfg.preconditioned {
            // Gershgorin row sums of the Hessian majorize it by a diagonal, and a
            // per-column scale keeps the column-simplex projection Euclidean.
            let gram = gram_row_sums(&qt, k, m);
            let diff = difference_row_sums(stencil, m);
            gram.iter().zip(&diff).map(|(g, d)| 1.0 / (2.0 * (g + cfg.reg_weight * d)).max(f64::MIN_POSITIVE)).collect()
        } else {
            vec![1.0 / lipschitz; m]
        };
        Problem { n, m, k, qt, p, reg: cfg.reg_weight, stencil, lipschitz, steps }
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let (n, m, k) = (self.n, self.m, self.k);
        let mut residual = vec![0.0; n * k];
        let mut data_term = 0.0;
        for nn in 0..n {
            let row = &x[nn * m..(nn + 1) * m];
            for j in 0..k {
                let q = &self.qt[j * m..(j + 1) * m];
                let r = dot(row, q) - self.p[nn * k + j];
                residual[nn * k + j] = r;
                data_term += r * r;
            }
        }
        let mut reg_term = 0.0;
        if self.reg > 0.0 {
            for nn in 0..n {
                let row = &x[nn * m..(nn + 1) * m];
                reg_term += row.windows(self.stencil.len()).map(|w| dot(w, self.stencil).powi(2)).sum::<f64>();
            }
        }
        Evaluation { data_term, reg_term, residual }
    }

    /// `x - grad / L`, written into `out`.
    fn gradient_step(&self, x: &[f64], eval: &Evaluation, out: &mut [f64]) {
        let (n, m, k) = (self.n, self.m, self.k);
        let mut grad = vec![0.0; m];
        for nn in 0..n {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for j in 0..k {
                let scale = 2.0 * eval.residual[nn * k + j];
                let q = &self.qt[j * m..(j + 1) * m];
                for (g, qv) in grad.iter_mut().zip(q) {
                    *g += scale * qv;
                }
            }
            let row = &x[nn * m..(nn + 1) * m];
            if self.reg > 0.0 {
                let s = 2.0 * self.reg;
                let width = self.stencil.len();
                if m >= width {
                    for start in 0..=m - width {
                        let d = s * dot(&row[start..start + width], self.stencil);
                        for (g, c) in grad[start..start + width].iter_mut().zip(self.stencil) {
                            *g += d * c;
                        }
                    }
                }
            }
            let row_out = &mut out[nn * m..(nn + 1) * m];
            for ((o, (xv, g)), step) in row_out.iter_mut().zip(row.iter().zip(&grad)).zip(&self.steps) {
                *o = xv - step * g;
            }
        }
    }

    fn project_columns(&self, x: &mut [f64], column: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        let (n, m) = (self.n, self.m);
        for mm in 0..m {
            column.clear();
            column.extend((0..n).map(|nn| x[nn * m + mm]));
            simplex::project_in_place(column, scratch);
            for nn in 0..n {
                x[nn * m + mm] = column[nn];
            }
        }
    }

    fn initial_point(&self, init: Initialization) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        match init {
            Initialization::Uniform => vec![1.0 / n as f64; n * m],
            Initialization::Binomial(eta) => {
                let mut x = vec![0.0; n * m];
                for mm in 0..m {
                    let mut head = 0.0;
                    for nn in 0..n - 1 {
                        let b = binomial_pmf(mm, nn, eta);
                        x[nn * m + mm] = b;
                        head += b;
                    }
                    x[(n - 1) * m + mm] = (1.0 - head).max(0.0);
                }
                x
            }
        }
    }

    fn solve(&self, cfg: &ReconstructionConfig) -> Solution {
        // Consecutive sub-tolerance steps required before declaring convergence.
        const PATIENCE: usize = 5;
        let mut column = Vec::with_capacity(self.n);
        let mut scratch = Vec::with_capacity(self.n);

        let mut x = self.initial_point(cfg.init);
        self.project_columns(&mut x, &mut column, &mut scratch);
        let mut eval = self.evaluate(&x);
        let mut f = eval.objective(self.reg);
        let mut history = vec![f];

        let mut y = x.clone();
        let mut y_eval = self.evaluate(&y);
        let mut t = 1.0f64;
        let mut candidate = vec![0.0; x.len()];
        let mut converged = false;
        let mut quiet = 0;
        let mut iterations = 0;

        while iterations < cfg.max_iters {
            if f == 0.0 {
                converged = true;
                break;
            }
            iterations += 1;
            self.gradient_step(&y, &y_eval, &mut candidate);
            self.project_columns(&mut candidate, &mut column, &mut scratch);
            let mut cand_eval = self.evaluate(&candidate);
            let mut f_new = cand_eval.objective(self.reg);
            let mut restarted = false;
            if f_new > f {
                // Momentum overshot: restart from a plain projected step.
                self.gradient_step(&x, &eval, &mut candidate);
                self.project_columns(&mut candidate, &mut column, &mut scratch);
                cand_eval = self.evaluate(&candidate);
                f_new = cand_eval.objective(self.reg);
                restarted = true;
                if f_new > f {
                    // Only reachable through rounding at the optimum.
                    f_new = f;
                    candidate.copy_from_slice(&x);
                    cand_eval = self.evaluate(&candidate);
                }
            }

            if cfg.accelerated && !restarted {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let beta = (t - 1.0) / t_next;
                for i in 0..y.len() {
                    y[i] = candidate[i] + beta * (candidate[i] - x[i]);
                }
                t = t_next;
            } else {
                y.copy_from_slice(&candidate);
                t = 1.0;
            }
            std::mem::swap(&mut x, &mut candidate);
            eval = cand_eval;
            y_eval = if y == x { self.evaluate(&x) } else { self.evaluate(&y) };

            let decrease = (f - f_new) / f.abs().max(f64::MIN_POSITIVE);
            f = f_new;
            history.push(f);
            if decrease < cfg.tol {
                quiet += 1;
                if quiet >= PATIENCE {
                    converged = true;
                    break;
                }
            } else {
                quiet = 0;
            }
        }

        let residual_norms = (0..self.k)
            .map(|j| (0..self.n).map(|nn| eval.residual[nn * self.k + j].powi(2)).sum::<f64>().sqrt())
            .collect();
        Solution {
            x,
            history,
            data_term: eval.data_term,
            reg_term: eval.reg_term,
            residual_norms,
            converged,
            iterations,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Upper bound on the largest eigenvalue of `q q^T` (an `M x M` nonnegative
/// matrix), via the Collatz-Wielandt ratio of a power-iteration vector,
/// capped by the Gershgorin row-sum bound.
fn gram_spectral_bound(qt: &[f64], k: usize, m: usize) -> f64 {
    // (q q^T v)_a = sum_j q[a][j] (sum_b q[b][j] v_b)
    let apply = |v: &[f64]| -> Vec<f64> {
        let proj: Vec<f64> = (0..k).map(|j| dot(&qt[j * m..(j + 1) * m], v)).collect();
        (0..m).map(|a| (0..k).map(|j| qt[j * m + a] * proj[j]).sum()).collect()
    };
    let ones = vec![1.0; m];
    let row_sums = apply(&ones);
    let gershgorin = row_sums.iter().cloned().fold(0.0, f64::max);

    let mut v = ones;
    for _ in 0..50 {
        let w = apply(&v);
        let norm = w.iter().cloned().fold(0.0, f64::max);
        if norm <= 0.0 {
            return gershgorin;
        }
        v = w.into_iter().map(|x| x / norm).collect();
    }
    let w = apply(&v);
    let mut cw = 0.0f64;
    for (wa, va) in w.iter().zip(&v) {
        if *va <= 0.0 || !va.is_normal() {
            return gershgorin;
        }
        cw = cw.max(wa / va);
    }
    cw.min(gershgorin)
}

/// Row sums of `q q^T`; all entries are nonnegative, so these are also the
/// absolute row sums.
fn gram_row_sums(qt: &[f64], k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for j in 0..k {
        let q = &qt[j * m..(j + 1) * m];
        let total: f64 = q.iter().sum();
        for (o, v) in out.iter_mut().zip(q) {
            *o += v * total;
        }
    }
    out
}

/// Absolute row sums of `D^T D` for the difference operator on `m` points.
fn difference_row_sums(stencil: &[f64], m: usize) -> Vec<f64> {
    let w = stencil.len();
    let mut out = vec![0.0; m];
    if m < w {
        return out;
    }
    // (D^T D)[a][b] = sum over windows s covering both a and b of c[a-s] c[b-s].
    for (a, o) in out.iter_mut().enumerate() {
        let lo = a.saturating_sub(w - 1);
        let hi = (a + w - 1).min(m - 1);
        for b in lo..=hi {
            let mut v = 0.0;
            for s in a.max(b).saturating_sub(w - 1)..=a.min(b).min(m - w) {
                v += stencil[a - s] * stencil[b - s];
            }
            *o += f64::abs(v);
        }
    }
    out
}

fn difference_stencil(order: usize) -> &'static [f64] {
    match order {
        1 => &[-1.0, 1.0],
        2 => &[1.0, -2.0, 1.0],
        3 => &[-1.0, 3.0, -3.0, 1.0],
        _ => unreachable!("validated smoothness order"),
    }
}

/// Upper bound on the largest eigenvalue of `D^T D` for a difference
/// operator on `m` points: `(sum |c|)^2` bounds every row sum of `|D^T D|`.
fn difference_spectral_bound(stencil: &[f64], m: usize) -> f64 {
    if m < stencil.len() {
        return 0.0;
    }
    stencil.iter().map(|c| c.abs()).sum::<f64>().powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photon_stats::{binomial_povm, column_fidelity, poisson_cumulative};

    fn exact_probs(povm: &PovmMatrix, means: &[f64]) -> Vec<Vec<f64>> {
        // Independent of the solver: predict each probe through the POVM
        // with a generous truncation of its own.
        means
            .iter()
            .map(|&mu| {
                (0..povm.n_outcomes())
                    .map(|n| {
                        (0..povm.truncation())
                            .map(|m| povm.get(n, m) * crate::photon_stats::poisson_pmf(mu, m).unwrap())
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn forward_model_identity_detector() {
        let povm = binomial_povm(1.0, 8, 40).unwrap();
        let q = ProbeMatrix::from_means(&[1.0], 40).unwrap();
        let r = forward_model(&povm, &q).unwrap();
        let oracle = poisson_cumulative(1.0, 8);
        for (a, b) in r.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_model_constant_rows() {
        let c = [0.1, 0.2, 0.7];
        let m = 30;
        let entries: Vec<f64> = c.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
        let povm = PovmMatrix::new(3, m, entries, true).unwrap();
        let q = ProbeMatrix::from_means(&[2.0, 25.0], m).unwrap();
        let r = forward_model(&povm, &q).unwrap();
        for j in 0..2 {
            let mass: f64 = q.column(j).iter().sum();
            for n in 0..3 {
                assert!((r[n * 2 + j] - c[n] * mass).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_model_thinning() {
        let povm = binomial_povm(0.051, 12, 140).unwrap();
        let q = ProbeMatrix::from_means(&[31.0], 140).unwrap();
        let r = forward_model(&povm, &q).unwrap();
        let oracle = poisson_cumulative(1.581, 12);
        for (a, b) in r.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_model_shape_mismatch() {
        let povm = binomial_povm(0.5, 4, 10).unwrap();
        let q = ProbeMatrix::from_means(&[1.0], 11).unwrap();
        assert!(matches!(forward_model(&povm, &q), Err(Error::Shape(_))));
    }

    #[test]
    fn vacuum_probe_only_fixes_first_column() {
        let cfg = ReconstructionConfig { truncation: 20, n_outcomes: 4, max_iters: 5000, ..Default::default() };
        let r = reconstruct_from_probabilities(&[vec![0.7, 0.2, 0.1, 0.0]], &[0.0], &cfg).unwrap();
        let checked = PovmMatrix::new(4, 20, r.povm.entries().to_vec(), true).expect("valid POVM");
        assert!((checked.get(0, 0) - 0.7).abs() < 1e-3);
        assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn objective_non_increasing_for_both_variants() {
        let truth = binomial_povm(0.2, 6, 40).unwrap();
        let means = [1.0, 3.0, 6.0, 10.0];
        let probs = exact_probs(&truth, &means);
        for accelerated in [false, true] {
            let cfg = ReconstructionConfig {
                truncation: 40,
                n_outcomes: 6,
                max_iters: 3000,
                accelerated,
                ..Default::default()
            };
            let r = reconstruct_from_probabilities(&probs, &means, &cfg).unwrap();
            assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]), "accelerated={accelerated}");
        }
    }

    #[test]
    fn identity_detector_is_recovered_on_probed_range() {
        let truth = binomial_povm(1.0, 8, 30).unwrap();
        let means: Vec<f64> = (0..12).map(|i| 0.3 + 0.5 * i as f64).collect();
        let probs = exact_probs(&truth, &means);
        let cfg = ReconstructionConfig { truncation: 30, n_outcomes: 8, reg_weight: 0.0, ..Default::default() };
        let r = reconstruct_from_probabilities(&probs, &means, &cfg).unwrap();
        for m in 0..5 {
            assert!(r.povm.get(m, m) > 0.95, "column {m}: {:?}", r.povm.column(m));
            assert!(column_fidelity(&r.povm, &truth, m).unwrap() > 0.99);
        }
    }

    #[test]
    fn probe_order_does_not_matter() {
        let truth = binomial_povm(0.1, 6, 50).unwrap();
        let means = [2.0, 30.0, 9.0, 15.0];
        let probs = exact_probs(&truth, &means);
        let cfg = ReconstructionConfig { truncation: 50, n_outcomes: 6, max_iters: 2000, ..Default::default() };
        let a = reconstruct_from_probabilities(&probs, &means, &cfg).unwrap();
        let perm = [3, 1, 0, 2];
        let pp: Vec<Vec<f64>> = perm.iter().map(|&i| probs[i].clone()).collect();
        let pm: Vec<f64> = perm.iter().map(|&i| means[i]).collect();
        let b = reconstruct_from_probabilities(&pp, &pm, &cfg).unwrap();
        assert_eq!(a.povm, b.povm);
        assert_eq!(a.objective_history, b.objective_history);
        for (i, &orig) in perm.iter().enumerate() {
            assert_eq!(b.per_probe_residuals[i], a.per_probe_residuals[orig]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = ReconstructionConfig { truncation: 10, n_outcomes: 3, ..Default::default() };
        assert!(reconstruct_from_probabilities(&[vec![0.5, 0.5]], &[1.0], &cfg).is_err());
        assert!(reconstruct_from_probabilities(&[vec![0.5, f64::NAN, 0.5]], &[1.0], &cfg).is_err());
        let bad_tol = ReconstructionConfig { tol: 0.0, ..cfg.clone() };
        assert!(matches!(
            reconstruct_from_probabilities(&[vec![0.5, 0.5, 0.0]], &[1.0], &bad_tol),
            Err(Error::Config(_))
        ));
        assert!(reconstruct_from_probabilities(&[], &[], &cfg).is_err());
    }

    #[test]
    fn spectral_bounds_dominate_true_eigenvalues() {
        let q = ProbeMatrix::from_means(&[1.0, 5.0, 20.0, 50.0], 80).unwrap();
        let (k, m) = (4, 80);
        let mut qt = vec![0.0; k * m];
        for j in 0..k {
            for a in 0..m {
                qt[j * m + a] = q.get(a, j);
            }
        }
        let bound = gram_spectral_bound(&qt, k, m);
        // q^T q is K x K and shares the nonzero spectrum of q q^T.
        let small = nalgebra::DMatrix::from_fn(k, k, |i, j| dot(&qt[i * m..(i + 1) * m], &qt[j * m..(j + 1) * m]));
        let largest = small.symmetric_eigenvalues().max();
        assert!(bound >= largest * (1.0 - 1e-12), "{bound} < {largest}");
        assert!(bound <= largest * 1.01);

        let d = nalgebra::DMatrix::from_fn(m - 1, m, |i, j| {
            if j == i + 1 {
                1.0
            } else if j == i {
                -1.0
            } else {
                0.0
            }
        });
        let dtd = d.transpose() * d;
        let lmax = dtd.symmetric_eigenvalues().max();
        let bound = difference_spectral_bound(difference_stencil(1), m);
        assert!(bound >= lmax && bound <= 4.0 + 1e-12);
    }
}
