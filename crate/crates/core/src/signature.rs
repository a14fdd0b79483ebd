//! Sparse embedding signatures: train-split standardization, elastic-net
//! logistic regression, validation-driven regularization choice and
//! cross-fold stability statistics.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::evaluation;
use crate::exec::Exec;
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Column means and population standard deviations; zero-variance columns
/// get a unit scale.
pub fn fit_standardizer(train: &Matrix) -> Result<Standardizer> {
    let n = train.rows();
    if n < 2 {
        return Err(Error::Data(format!(
            "standardizer needs >= 2 rows, got {n}"
        )));
    }
    let p = train.cols();
    let mut mean = vec![0.0; p];
    for row in train.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; p];
    for row in train.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok(Standardizer { mean, std })
}

impl Standardizer {
    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                m.cols()
            )));
        }
        let mut data = Vec::with_capacity(m.data().len());
        for row in m.iter_rows() {
            for ((v, mu), sd) in row.iter().zip(&self.mean).zip(&self.std) {
                data.push((v - mu) / sd);
            }
        }
        Matrix::new(m.rows(), m.cols(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseModel {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
    /// Indices of the exact nonzeros of `beta`, ascending.
    pub support: Vec<usize>,
    pub converged: bool,
    pub sweeps: usize,
    /// Objective value after each sweep.
    pub trace: Vec<f64>,
}

impl SparseModel {
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.beta).map(|(d, b)| d * b).sum::<f64>()
    }

    pub fn predict_proba(&self, d: &Matrix) -> Vec<f64> {
        d.iter_rows()
            .map(|r| 1.0 / (1.0 + (-self.decision(r)).exp()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// `sigmoid(eta)` and the bound curvature `tanh(eta / 2) / (2 eta)`, the
/// latter written as `(2 sigmoid(eta) - 1) / (2 eta)` and inflated by a
/// relative 1e-9 so rounding never makes it an underestimate.
#[inline]
fn prob_and_weight(eta: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-eta).exp());
    let w = if eta.abs() < 1e-3 {
        0.25 - eta * eta / 48.0
    } else {
        (2.0 * p - 1.0) / (2.0 * eta)
    };
    (p, w * (1.0 + 1e-9))
}

/// `(1/n) sum l(y, sigmoid(b0 + d'b)) + alpha |b|_1 + gamma/2 |b|^2`.
pub fn objective(
    d: &Matrix,
    y: &[f64],
    intercept: f64,
    beta: &[f64],
    alpha: f64,
    gamma: f64,
) -> f64 {
    let n = d.rows() as f64;
    let nll: f64 = d
        .iter_rows()
        .zip(y)
        .map(|(r, &yi)| {
            let eta = intercept + r.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            crate::autodiff::softplus(eta) - yi * eta
        })
        .sum();
    nll / n
        + alpha * beta.iter().map(|b| b.abs()).sum::<f64>()
        + 0.5 * gamma * beta.iter().map(|b| b * b).sum::<f64>()
}

fn objective_from_eta(eta: &[f64], y: &[f64], beta: &[f64], alpha: f64, gamma: f64) -> f64 {
    let nll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| crate::autodiff::softplus(e) - yi * e)
        .sum();
    nll / eta.len() as f64
        + alpha * beta.iter().map(|b| b.abs()).sum::<f64>()
        + 0.5 * gamma * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Smallest `alpha` at which the all-zero coefficient vector is optimal.
pub fn alpha_max(d: &Matrix, y: &[f64]) -> f64 {
    let n = d.rows() as f64;
    let ybar = y.iter().sum::<f64>() / n;
    (0..d.cols())
        .map(|j| {
            (d.iter_rows()
                .zip(y)
                .map(|(r, yi)| r[j] * (yi - ybar))
                .sum::<f64>()
                / n)
                .abs()
        })
        .fold(0.0, f64::max)
}

fn check_labels(y: &[f64]) -> Result<f64> {
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Fit("labels must be 0 or 1".into()));
    }
    let ybar = y.iter().sum::<f64>() / y.len().max(1) as f64;
    if y.is_empty() || ybar == 0.0 || ybar == 1.0 {
        return Err(Error::Fit("both classes must be present".into()));
    }
    Ok(ybar)
}

pub fn fit_sparse_logistic(d: &Matrix, y: &[f64], alpha: f64, gamma: f64) -> Result<SparseModel> {
    fit_sparse_logistic_with(d, y, alpha, gamma, &FitOptions::default())
}

/// Proximal Newton on the elastic-net logistic objective.
///
/// Each outer step builds the second-order model of the log-likelihood at
/// the current linear predictor and minimises it plus the exact penalty by
/// cyclic coordinate descent, which gives soft-threshold updates and exact
/// zeros. A backtracking line search keeps the objective non-increasing. If
/// it fails, the step falls back to the Jaakkola-Jordan quadratic upper
/// bound (per-sample curvature `tanh(eta / 2) / (2 eta)`), which never
/// increases the objective. The intercept is unpenalized and starts at
/// `logit(mean(y))`. `sweeps` counts outer steps.
pub fn fit_sparse_logistic_with(
    d: &Matrix,
    y: &[f64],
    alpha: f64,
    gamma: f64,
    opts: &FitOptions,
) -> Result<SparseModel> {
    fit_sparse_logistic_from(d, y, alpha, gamma, opts, None)
}

/// Same as [`fit_sparse_logistic_with`], starting from the coefficients of
/// `start` (a fit on the same data) instead of the null model.
pub fn fit_sparse_logistic_from(
    d: &Matrix,
    y: &[f64],
    alpha: f64,
    gamma: f64,
    opts: &FitOptions,
    start: Option<&SparseModel>,
) -> Result<SparseModel> {
    if !(alpha >= 0.0 && gamma >= 0.0 && alpha.is_finite() && gamma.is_finite()) {
        return Err(Error::Fit(format!(
            "alpha {alpha} and gamma {gamma} must be >= 0"
        )));
    }
    if d.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} labels",
            d.rows(),
            y.len()
        )));
    }
    let ybar = check_labels(y)?;
    let (n, p) = (d.rows(), d.cols());

    let mut intercept = (ybar / (1.0 - ybar)).ln();
    let mut beta = vec![0.0; p];
    // Zero is optimal here; skip the sweeps so rounding cannot leak a
    // coefficient past the threshold.
    if alpha >= alpha_max(d, y) {
        let eta = vec![intercept; n];
        return Ok(SparseModel {
            intercept,
            trace: vec![objective_from_eta(&eta, y, &beta, alpha, gamma)],
            beta,
            alpha,
            gamma,
            support: Vec::new(),
            converged: true,
            sweeps: 0,
        });
    }
    let mut eta = vec![intercept; n];
    if let Some(m) = start {
        if m.beta.len() != p {
            return Err(Error::Shape(format!(
                "start has {} coefficients, data has {p} columns",
                m.beta.len()
            )));
        }
        intercept = m.intercept;
        beta.clone_from(&m.beta);
        for (e, r) in eta.iter_mut().zip(d.iter_rows()) {
            *e = intercept + r.iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>();
        }
    }
    let q = p + 1; // coordinate p is the intercept
    let mut quad = Quadratic::new(q);
    let mut f = objective_from_eta(&eta, y, &beta, alpha, gamma);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let b0: Vec<f64> = beta.iter().copied().chain([intercept]).collect();
        let mut accepted = None;
        for curvature in [Curvature::Hessian, Curvature::Bound] {
            quad.build(d, y, &eta, curvature);
            let b = quad.minimize(&b0, alpha, gamma, opts.tol * 1e-3);
            let mut t = 1.0;
            for _ in 0..LINE_SEARCH_STEPS {
                let cand: Vec<f64> = b0.iter().zip(&b).map(|(z, v)| z + t * (v - z)).collect();
                let e = linear_predictor(d, &cand);
                let fc = objective_from_eta(&e, y, &cand[..p], alpha, gamma);
                if fc <= f {
                    accepted = Some((cand, e, fc));
                    break;
                }
                if curvature == Curvature::Bound {
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        // The bound step never increases the objective, so this only
        // happens at a rounding-level optimum.
        let Some((b, e, fc)) = accepted else {
            converged = true;
            break;
        };
        let max_change = b
            .iter()
            .zip(&b0)
            .map(|(a, z)| (a - z).abs())
            .fold(0.0, f64::max);
        beta.copy_from_slice(&b[..p]);
        intercept = b[p];
        eta = e;
        f = fc;
        trace.push(f);
        if max_change < opts.tol {
            converged = true;
            break;
        }
    }
    let support = beta
        .iter()
        .enumerate()
        .filter(|(_, b)| **b != 0.0)
        .map(|(j, _)| j)
        .collect();
    Ok(SparseModel {
        intercept,
        beta,
        alpha,
        gamma,
        support,
        converged,
        sweeps,
        trace,
    })
}

const INNER_SWEEPS: usize = 10_000;
const LINE_SEARCH_STEPS: usize = 40;

fn linear_predictor(d: &Matrix, b: &[f64]) -> Vec<f64> {
    let p = d.cols();
    d.iter_rows()
        .map(|r| b[p] + r.iter().zip(b).map(|(x, c)| x * c).sum::<f64>())
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Curvature {
    /// Exact logistic curvature `p (1 - p)`; a Newton model, needs a line search.
    Hessian,
    /// Jaakkola-Jordan bound; a global majorizer.
    Bound,
}

/// `c'(b - b0) + (b - b0)' H (b - b0) / 2` over the coefficients with the
/// intercept last, stored densely.
struct Quadratic {
    q: usize,
    h: Vec<f64>,
    c: Vec<f64>,
    hd: Vec<f64>,
}

impl Quadratic {
    fn new(q: usize) -> Self {
        Self {
            q,
            h: vec![0.0; q * q],
            c: vec![0.0; q],
            hd: vec![0.0; q],
        }
    }

    fn build(&mut self, d: &Matrix, y: &[f64], eta: &[f64], curvature: Curvature) {
        let (q, p) = (self.q, self.q - 1);
        let nf = d.rows() as f64;
        let (h, c) = (&mut self.h, &mut self.c);
        h.fill(0.0);
        c.fill(0.0);
        for ((row, &e), &yi) in d.iter_rows().zip(eta).zip(y) {
            let (pr, w) = match curvature {
                Curvature::Bound => prob_and_weight(e),
                Curvature::Hessian => {
                    let pr = 1.0 / (1.0 + (-e).exp());
                    (pr, pr * (1.0 - pr))
                }
            };
            let (g, w) = ((pr - yi) / nf, w / nf);
            for j in 0..p {
                c[j] += row[j] * g;
                let wx = w * row[j];
                let hj = &mut h[j * q..(j + 1) * q];
                for k in j..p {
                    hj[k] += wx * row[k];
                }
                hj[p] += wx;
            }
            c[p] += g;
            h[p * q + p] += w;
        }
        for j in 0..q {
            for k in 0..j {
                h[j * q + k] = h[k * q + j];
            }
        }
    }

    /// Coordinate descent on the model plus the elastic-net penalty,
    /// starting at `b0`.
    fn minimize(&mut self, b0: &[f64], alpha: f64, gamma: f64, tol: f64) -> Vec<f64> {
        let (q, p) = (self.q, self.q - 1);
        let mut b = b0.to_vec();
        self.hd.fill(0.0);
        for _ in 0..INNER_SWEEPS {
            let mut change: f64 = 0.0;
            for j in std::iter::once(p).chain(0..p) {
                let hjj = self.h[j * q + j];
                if hjj == 0.0 {
                    continue;
                }
                let grad = self.c[j] + self.hd[j];
                let new = if j == p {
                    b[j] - grad / hjj
                } else {
                    soft_threshold(hjj * b[j] - grad, alpha) / (hjj + gamma)
                };
                let delta = new - b[j];
                if delta != 0.0 {
                    b[j] = new;
                    for (r, hk) in self.hd.iter_mut().zip(&self.h[j * q..(j + 1) * q]) {
                        *r += hk * delta;
                    }
                    change = change.max(delta.abs());
                }
            }
            if change < tol {
                break;
            }
        }
        b
    }
}

pub const DEFAULT_ALPHA_STEPS: usize = 9;
pub const DEFAULT_GAMMAS: [f64; 3] = [0.0, 1e-4, 1e-2];

/// `alpha_max * 10^(-k/2)` for `k < steps`, crossed with `gammas`.
pub fn alpha_grid(alpha_max: f64, steps: usize, gammas: &[f64]) -> Vec<(f64, f64)> {
    let mut grid = Vec::with_capacity(steps * gammas.len());
    for k in 0..steps {
        let a = alpha_max * 10f64.powf(-(k as f64) / 2.0);
        for &g in gammas {
            grid.push((a, g));
        }
    }
    grid
}

/// Log-spaced path from `alpha_max` down four decades, crossed with three
/// ridge strengths.
pub fn default_grid(alpha_max: f64) -> Vec<(f64, f64)> {
    alpha_grid(alpha_max, DEFAULT_ALPHA_STEPS, &DEFAULT_GAMMAS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub alpha: f64,
    pub gamma: f64,
    pub val_auc: f64,
    pub support_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub alpha: f64,
    pub gamma: f64,
    pub val_auc: f64,
    pub model: SparseModel,
    pub evaluated: Vec<GridPoint>,
}

pub fn select_regularization(
    train: (&Matrix, &[f64]),
    val: (&Matrix, &[f64]),
    grid: &[(f64, f64)],
) -> Result<Selection> {
    select_regularization_with(Exec::default(), train, val, grid)
}

/// Fits every grid point on the training split and keeps the one with the
/// best validation AUC; ties go to the smaller support, then the larger
/// alpha, then the earlier grid entry. Points sharing a gamma are fitted in
/// order of decreasing alpha, each starting from the previous solution.
pub fn select_regularization_with(
    exec: Exec,
    train: (&Matrix, &[f64]),
    val: (&Matrix, &[f64]),
    grid: &[(f64, f64)],
) -> Result<Selection> {
    if grid.is_empty() {
        return Err(Error::Selection("empty grid".into()));
    }
    // One warm-started path per gamma, alpha decreasing.
    let mut paths: Vec<Vec<usize>> = Vec::new();
    for (i, &(_, g)) in grid.iter().enumerate() {
        match paths.iter_mut().find(|p| grid[p[0]].1 == g) {
            Some(p) => p.push(i),
            None => paths.push(vec![i]),
        }
    }
    for p in &mut paths {
        p.sort_by(|&a, &b| grid[b].0.total_cmp(&grid[a].0));
    }
    let opts = FitOptions::default();
    let path_fits = exec.map(&paths, |path| {
        let mut prev: Option<SparseModel> = None;
        let mut out = Vec::with_capacity(path.len());
        for &i in path {
            let (a, g) = grid[i];
            let fit = fit_sparse_logistic_from(train.0, train.1, a, g, &opts, prev.as_ref())
                .and_then(|model| {
                    let scores: Vec<f64> = val.0.iter_rows().map(|r| model.decision(r)).collect();
                    let auc = evaluation::auc_scores(val.1, &scores)?;
                    Ok((model, auc))
                });
            if let Ok((m, _)) = &fit {
                prev = Some(m.clone());
            }
            out.push((i, fit));
        }
        out
    });
    let mut fits: Vec<Option<Result<(SparseModel, f64)>>> = (0..grid.len()).map(|_| None).collect();
    for (i, fit) in path_fits.into_iter().flatten() {
        fits[i] = Some(fit);
    }
    let fits = fits
        .into_iter()
        .map(|f| f.expect("every grid point fitted"));
    let mut best: Option<(usize, SparseModel, f64)> = None;
    let mut evaluated = Vec::new();
    let mut last_err = None;
    for (i, fit) in fits.into_iter().enumerate() {
        let (model, auc) = match fit {
            Ok(v) => v,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        evaluated.push(GridPoint {
            alpha: grid[i].0,
            gamma: grid[i].1,
            val_auc: auc,
            support_size: model.support.len(),
        });
        let better = match &best {
            None => true,
            Some((_, bm, bauc)) => {
                auc > *bauc
                    || (auc == *bauc
                        && (model.support.len() < bm.support.len()
                            || (model.support.len() == bm.support.len() && model.alpha > bm.alpha)))
            }
        };
        if better {
            best = Some((i, model, auc));
        }
    }
    let (i, model, val_auc) = best.ok_or_else(|| {
        Error::Selection(format!(
            "every grid point failed; last error: {}",
            last_err.map_or_else(|| "none".to_string(), |e| e.to_string())
        ))
    })?;
    Ok(Selection {
        alpha: grid[i].0,
        gamma: grid[i].1,
        val_auc,
        model,
        evaluated,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub labels: Vec<String>,
    pub sizes: Vec<usize>,
    pub frequencies: Vec<f64>,
    pub jaccard: Vec<Vec<f64>>,
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Selection frequency of each dimension and the pairwise Jaccard matrix of
/// the per-fold supports. Two empty supports count as identical.
pub fn stability_report(supports: &[Vec<usize>], p: usize) -> Result<StabilityReport> {
    let sets: Vec<BTreeSet<usize>> = supports
        .iter()
        .map(|s| s.iter().copied().collect())
        .collect();
    for s in &sets {
        if let Some(&j) = s.iter().find(|&&j| j >= p) {
            return Err(Error::Index(format!("dimension {j} with p = {p}")));
        }
    }
    let m = sets.len().max(1) as f64;
    let frequencies = (0..p)
        .map(|j| sets.iter().filter(|s| s.contains(&j)).count() as f64 / m)
        .collect();
    let jaccard_m = sets
        .iter()
        .map(|a| sets.iter().map(|b| jaccard(a, b)).collect())
        .collect();
    Ok(StabilityReport {
        labels: (0..sets.len()).map(|i| i.to_string()).collect(),
        sizes: sets.iter().map(BTreeSet::len).collect(),
        frequencies,
        jaccard: jaccard_m,
    })
}

impl StabilityReport {
    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.labels = labels;
        self
    }

    pub fn mean_size(&self) -> f64 {
        self.sizes.iter().sum::<usize>() as f64 / self.sizes.len().max(1) as f64
    }

    pub fn mean_off_diagonal_jaccard(&self) -> f64 {
        let k = self.jaccard.len();
        if k < 2 {
            return 1.0;
        }
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += self.jaccard[i][j];
                }
            }
        }
        s / (k * (k - 1)) as f64
    }
}

impl StabilityReport {
    /// Structured text with every section header prefixed, e.g.
    /// `[grl.sizes]` for prefix `"grl."`.
    pub fn write_sections<W: fmt::Write>(&self, f: &mut W, prefix: &str) -> fmt::Result {
        writeln!(f, "[{prefix}sizes]")?;
        for (l, s) in self.labels.iter().zip(&self.sizes) {
            writeln!(f, "{l} = {s}")?;
        }
        writeln!(f, "mean = {}", self.mean_size())?;
        writeln!(f, "[{prefix}frequencies]")?;
        for (j, p) in self.frequencies.iter().enumerate() {
            if *p > 0.0 {
                writeln!(f, "{j} = {p}")?;
            }
        }
        writeln!(f, "[{prefix}jaccard]")?;
        writeln!(f, "folds = {}", self.labels.join(","))?;
        for (l, row) in self.labels.iter().zip(&self.jaccard) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{l} = {}", cells.join(","))?;
        }
        writeln!(
            f,
            "mean_off_diagonal = {}",
            self.mean_off_diagonal_jaccard()
        )
    }
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_sections(f, "")
    }
}

/// Rows of `(fold, dimension, coefficient)` for the support of each model.
pub fn write_coefficients<W: Write>(
    out: W,
    models: &[(String, &SparseModel)],
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "fold,dimension,coefficient")?;
    for (fold, m) in models {
        writeln!(w, "{fold},intercept,{}", m.intercept)?;
        for &j in &m.support {
            writeln!(w, "{fold},{j},{}", m.beta[j])?;
        }
    }
    w.flush()
}
