//! Sparse inference: exact basis-pursuit solving by cyclic coordinate
//! descent, compound-loss inference by proximal gradient, a single forward
//! pass for approximate inference, and a brute-force enumeration oracle used
//! as ground truth in tests.

use ndarray::{Array1, Array2};

use crate::error::{PsdError, Result};
use crate::model::{
    compound_loss, predictor_forward, Code, Dictionary, Hyperparams, Mode, Predictor, Signal,
    UNIT_NORM_TOL,
};

/// Step-size policy for proximal-gradient inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    /// Fixed step 1 / (2 (sigma_max(B)^2 + alpha)).
    FixedLipschitz,
    /// Halving line search on the quadratic majorization.
    Backtracking,
}

/// Convergence controls shared by the iterative solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Stop when the relative loss decrease falls below this.
    pub tol: f64,
    /// Iteration cap (sweeps for coordinate descent, proximal steps for
    /// gradient inference).
    pub max_iter: usize,
    pub step_rule: StepRule,
}

impl SolveOptions {
    pub fn new(tol: f64, max_iter: usize, step_rule: StepRule) -> Result<Self> {
        if !tol.is_finite() || tol <= 0.0 {
            return Err(PsdError::InvalidParameter(format!(
                "tol must be > 0, got {tol}"
            )));
        }
        if max_iter == 0 {
            return Err(PsdError::InvalidParameter("max_iter must be >= 1".into()));
        }
        Ok(SolveOptions {
            tol,
            max_iter,
            step_rule,
        })
    }
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 1000,
            step_rule: StepRule::FixedLipschitz,
        }
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub code: Code,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Relative per-iteration movement below which an iterate is considered to
/// have reached its floating-point fixed point (a few ulps).
const ITERATE_RESOLUTION: f64 = 1e-15;

/// Proximal operator of `t * |.|`: `sign(x) * max(|x| - t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn check_unit_columns(b: &Dictionary) -> Result<()> {
    for (j, col) in b.basis().columns().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(PsdError::Precondition(format!(
                "solver requires unit-norm dictionary columns; column {j} has norm {norm}"
            )));
        }
    }
    Ok(())
}

/// Exact minimization of `0.5 ||y - Bz||^2 + lambda ||z||_1` by cyclic
/// coordinate descent. With unit-norm columns each coordinate update is a
/// pure soft-threshold: `z_j <- st(b_j^T (y - Bz + b_j z_j), lambda)`.
/// Deterministic for fixed inputs (cyclic order 1..m, start at z = 0).
pub fn solve_bpdn_cd(
    y: &Signal,
    b: &Dictionary,
    lambda: f64,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    if lambda < 0.0 {
        return Err(PsdError::InvalidParameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if y.len() != b.signal_dim() {
        return Err(PsdError::ShapeMismatch(format!(
            "signal length {} vs dictionary rows {}",
            y.len(),
            b.signal_dim()
        )));
    }
    check_unit_columns(b)?;

    let basis = b.basis();
    let m = b.code_dim();
    let mut z = Array1::<f64>::zeros(m);
    let mut residual = y.values().clone();
    let mut prev_loss = 0.5 * residual.dot(&residual);
    let mut converged = false;
    let mut sweeps = 0;

    for _ in 0..opts.max_iter {
        sweeps += 1;
        let mut max_move = 0.0f64;
        for j in 0..m {
            let col = basis.column(j);
            let c = col.dot(&residual) + z[j];
            let znew = soft_threshold(c, lambda);
            let delta = znew - z[j];
            if delta != 0.0 {
                ndarray::Zip::from(&mut residual)
                    .and(&col)
                    .for_each(|r, &bij| *r -= bij * delta);
                z[j] = znew;
                max_move = max_move.max(delta.abs() / (1.0 + znew.abs()));
            }
        }
        // exact residual also resets accumulated drift
        residual = y.values() - &basis.dot(&z);
        let l1: f64 = z.iter().map(|v| v.abs()).sum();
        let loss = 0.5 * residual.dot(&residual) + lambda * l1;
        let rel = (prev_loss - loss) / prev_loss.abs().max(f64::MIN_POSITIVE);
        prev_loss = loss;
        // a sweep that moves nothing beyond ulp scale is at the iterate's
        // floating-point resolution. The loss plateaus (decrease rounds to
        // zero) well before that, so a zero measured decrease with a moving
        // iterate keeps sweeping rather than claiming convergence.
        if max_move <= ITERATE_RESOLUTION || (rel > 0.0 && rel < opts.tol) {
            converged = true;
            break;
        }
    }

    Ok(SolveResult {
        code: Code::new(z)?,
        final_loss: prev_loss,
        iterations: sweeps,
        converged,
    })
}

/// Maximum violation of the basis-pursuit optimality conditions at `z`:
/// `|b_j^T (y - Bz)| <= lambda` where `z_j = 0` and
/// `b_j^T (y - Bz) = lambda sign(z_j)` elsewhere. Zero at the exact minimizer.
pub fn bpdn_kkt_violation(y: &Signal, b: &Dictionary, lambda: f64, z: &Code) -> Result<f64> {
    if y.len() != b.signal_dim() || z.len() != b.code_dim() {
        return Err(PsdError::ShapeMismatch(
            "kkt check operand sizes disagree".into(),
        ));
    }
    let residual = y.values() - &b.basis().dot(z.values());
    let corr = b.basis().t().dot(&residual);
    let mut worst = 0.0f64;
    for j in 0..z.len() {
        let v = if z.values()[j] == 0.0 {
            (corr[j].abs() - lambda).max(0.0)
        } else {
            (corr[j] - lambda * z.values()[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Objective selector for the enumeration oracle.
#[derive(Debug, Clone)]
pub enum OracleObjective<'a> {
    /// `0.5 ||y - Bz||^2 + lambda ||z||_1`.
    Bpdn { lambda: f64 },
    /// `||y - Bz||^2 + lambda ||z||_1 + alpha ||z - F(y)||^2`.
    Compound {
        predictor: &'a Predictor,
        hyper: &'a Hyperparams,
    },
}

/// Enumeration bound for the oracle.
const ORACLE_MAX_CODE: usize = 12;

/// Slack when testing the off-support stationarity bound; spurious
/// candidates admitted by the slack can only have larger objectives, so the
/// minimum is unaffected.
const ORACLE_FEASIBILITY_SLACK: f64 = 1e-9;

/// Brute-force ground truth: enumerates every support-and-sign pattern,
/// solves the stationarity system restricted to the support, keeps patterns
/// that are sign-consistent and satisfy the off-support condition
/// `|grad_j smooth| <= lambda`, and returns the feasible candidate with the
/// smallest objective. Ties within 1e-12 go to the smaller support, then the
/// lexicographically smallest support and sign pattern (minus before plus).
pub fn solve_oracle(y: &Signal, b: &Dictionary, objective: &OracleObjective) -> Result<Code> {
    let n = b.signal_dim();
    let m = b.code_dim();
    if y.len() != n {
        return Err(PsdError::ShapeMismatch(format!(
            "signal length {} vs dictionary rows {n}",
            y.len()
        )));
    }
    if m > ORACLE_MAX_CODE {
        return Err(PsdError::SizeLimit(format!(
            "oracle enumeration requires m <= {ORACLE_MAX_CODE}, got {m}"
        )));
    }

    // Problem data in the common quadratic form:
    //   smooth(z) = c2 * ||y - Bz||^2 + alpha * ||z - f||^2,  penalty lambda ||z||_1
    let (c2, lambda, alpha, f) = match objective {
        OracleObjective::Bpdn { lambda } => {
            if *lambda < 0.0 {
                return Err(PsdError::InvalidParameter(format!(
                    "lambda must be >= 0, got {lambda}"
                )));
            }
            (0.5, *lambda, 0.0, Array1::zeros(m))
        }
        OracleObjective::Compound { predictor, hyper } => {
            let pred = predictor_forward(y, predictor)?;
            (1.0, hyper.lambda, hyper.alpha, pred.values().clone())
        }
    };

    let basis = b.basis();
    let gram = basis.t().dot(basis);
    let bty = basis.t().dot(y.values());
    let yty = y.values().dot(y.values());
    let ftf = f.dot(&f);

    let objective_of = |z: &Array1<f64>| -> f64 {
        let residual = y.values() - &basis.dot(z);
        let l1: f64 = z.iter().map(|v| v.abs()).sum();
        let diff = z - &f;
        c2 * residual.dot(&residual) + lambda * l1 + alpha * diff.dot(&diff)
    };

    let slack = lambda + ORACLE_FEASIBILITY_SLACK * (1.0 + lambda);
    let mut best: Option<(f64, Array1<f64>)> = None;

    // z = 0 candidate: objective c2 ||y||^2 + alpha ||f||^2; feasible when
    // the smooth gradient at 0 fits under lambda everywhere.
    {
        let feasible = (0..m).all(|j| (-2.0 * c2 * bty[j] - 2.0 * alpha * f[j]).abs() <= slack);
        if feasible {
            best = Some((c2 * yty + alpha * ftf, Array1::zeros(m)));
        }
    }

    let mut support = Vec::new();
    for size in 1..=m {
        combinations(m, size, &mut support, &mut |s| {
            let k = s.len();
            for mask in 0..(1u32 << k) {
                // lexicographic sign order: minus sorts before plus
                let signs: Vec<f64> = (0..k)
                    .map(|i| {
                        if mask & (1 << (k - 1 - i)) != 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect();
                // stationarity on the support:
                //   (2 c2 G_SS + 2 alpha I) z_S = 2 c2 (B^T y)_S + 2 alpha f_S - lambda s
                let mut a = vec![vec![0.0; k]; k];
                let mut rhs = vec![0.0; k];
                for (r, &jr) in s.iter().enumerate() {
                    for (c, &jc) in s.iter().enumerate() {
                        a[r][c] =
                            2.0 * c2 * gram[[jr, jc]] + if r == c { 2.0 * alpha } else { 0.0 };
                    }
                    rhs[r] = 2.0 * c2 * bty[jr] + 2.0 * alpha * f[jr] - lambda * signs[r];
                }
                let Some(zs) = solve_dense(a, rhs) else {
                    continue;
                };
                if zs.iter().zip(&signs).any(|(&z, &s)| z * s <= 0.0) {
                    continue;
                }
                let mut z = Array1::zeros(m);
                for (r, &jr) in s.iter().enumerate() {
                    z[jr] = zs[r];
                }
                // off-support optimality of the smooth part
                let bz = basis.dot(&z);
                let mut ok = true;
                for j in 0..m {
                    if s.contains(&j) {
                        continue;
                    }
                    let col = basis.column(j);
                    let grad_j = 2.0 * c2 * (col.dot(&bz) - bty[j]) - 2.0 * alpha * f[j];
                    if grad_j.abs() > slack {
                        ok = false;
                        break;
                    }
                }
                if !ok {
                    continue;
                }
                let obj = objective_of(&z);
                match &best {
                    Some((bobj, _)) if obj >= bobj - 1e-12 => {}
                    _ => best = Some((obj, z)),
                }
            }
        });
    }

    match best {
        Some((_, z)) => Code::new(z),
        // every pattern skipped as singular: fall back to the zero code
        None => Code::new(Array1::zeros(m)),
    }
}

/// Visit all `size`-element subsets of `0..m` in lexicographic order.
fn combinations(m: usize, size: usize, scratch: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    fn rec(
        m: usize,
        size: usize,
        start: usize,
        scratch: &mut Vec<usize>,
        visit: &mut impl FnMut(&[usize]),
    ) {
        if scratch.len() == size {
            visit(scratch);
            return;
        }
        let remaining = size - scratch.len();
        for i in start..=(m - remaining) {
            scratch.push(i);
            rec(m, size, i + 1, scratch, visit);
            scratch.pop();
        }
    }
    scratch.clear();
    rec(m, size, 0, scratch, visit);
}

/// Gaussian elimination with partial pivoting; None when singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let mut piv = k;
        for r in k + 1..n {
            if a[r][k].abs() > a[piv][k].abs() {
                piv = r;
            }
        }
        if a[piv][k].abs() < 1e-12 {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        let pivot_row = a[k].clone();
        for r in k + 1..n {
            let factor = a[r][k] / pivot_row[k];
            if factor != 0.0 {
                for (dst, pv) in a[r][k..].iter_mut().zip(&pivot_row[k..]) {
                    *dst -= factor * pv;
                }
                b[r] -= factor * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = b[k];
        for c in k + 1..n {
            s -= a[k][c] * x[c];
        }
        x[k] = s / a[k][k];
    }
    Some(x)
}

/// Largest squared singular value of the basis, by power iteration on B^T B
/// (at most 50 iterations, Rayleigh-quotient tolerance 1e-10). The returned
/// value is a lower bound on sigma_max^2; callers that need an upper bound
/// for step sizing must add their own safety margin.
pub fn spectral_norm_sq(basis: &Array2<f64>) -> f64 {
    let m = basis.ncols();
    // deterministic start, slightly tilted so it is never orthogonal to the
    // leading eigenvector by symmetry
    let mut v = Array1::from_shape_fn(m, |i| 1.0 + 1e-4 * i as f64);
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);
    let mut rq = 0.0;
    for _ in 0..50 {
        let w = basis.t().dot(&basis.dot(&v));
        let new_rq = v.dot(&w);
        let wnorm = w.dot(&w).sqrt();
        if wnorm == 0.0 {
            return 0.0;
        }
        v = w / wnorm;
        if (new_rq - rq).abs() <= 1e-10 * new_rq.abs().max(1.0) {
            return new_rq;
        }
        rq = new_rq;
    }
    rq
}

/// Margin applied to the spectral-norm estimate so the fixed step stays
/// strictly below 1/L even though power iteration approaches sigma_max^2
/// from below.
const SIGMA_SAFETY: f64 = 1e-6;

/// Minimize the compound loss over z by proximal gradient (ISTA), starting
/// from the regressor output. In Separate mode the objective uses alpha = 0;
/// in Autoencoder mode the code is the regressor output by definition and no
/// iteration happens. Returns the iterate path loss in `trace` (entry 0 is
/// the starting loss).
pub fn infer_optimal_with_trace(
    y: &Signal,
    b: &Dictionary,
    p: &Predictor,
    h: &Hyperparams,
    opts: &SolveOptions,
) -> Result<(SolveResult, Vec<f64>)> {
    if y.len() != b.signal_dim() {
        return Err(PsdError::ShapeMismatch(format!(
            "signal length {} vs dictionary rows {}",
            y.len(),
            b.signal_dim()
        )));
    }
    if p.code_dim() != b.code_dim() {
        return Err(PsdError::ShapeMismatch(format!(
            "predictor output size {} vs dictionary columns {}",
            p.code_dim(),
            b.code_dim()
        )));
    }
    check_unit_columns(b)?;

    let eff = Hyperparams::new(h.lambda, h.effective_alpha(), h.eta, h.mode)?;
    let start = predictor_forward(y, p)?;

    if h.mode == Mode::Autoencoder {
        let loss = compound_loss(y, &start, b, p, &eff)?;
        return Ok((
            SolveResult {
                code: start,
                final_loss: loss,
                iterations: 0,
                converged: true,
            },
            vec![loss],
        ));
    }

    let alpha = eff.alpha;
    let lambda = eff.lambda;
    let basis = b.basis();
    let f = start.values().clone();

    let objective = |z: &Array1<f64>| -> f64 {
        let residual = y.values() - &basis.dot(z);
        let l1: f64 = z.iter().map(|v| v.abs()).sum();
        let diff = z - &f;
        residual.dot(&residual) + lambda * l1 + alpha * diff.dot(&diff)
    };
    let smooth = |z: &Array1<f64>| -> f64 {
        let residual = y.values() - &basis.dot(z);
        let diff = z - &f;
        residual.dot(&residual) + alpha * diff.dot(&diff)
    };
    let grad = |z: &Array1<f64>| -> Array1<f64> {
        let recon_err = basis.dot(z) - y.values();
        let mut g = basis.t().dot(&recon_err) * 2.0;
        if alpha != 0.0 {
            g += &((z - &f) * (2.0 * alpha));
        }
        g
    };

    let fixed_step = match opts.step_rule {
        StepRule::FixedLipschitz => {
            let sigma_sq = spectral_norm_sq(basis);
            Some(1.0 / (2.0 * (sigma_sq * (1.0 + SIGMA_SAFETY) + alpha)))
        }
        StepRule::Backtracking => None,
    };

    let mut z = f.clone();
    let mut prev = objective(&z);
    let mut trace = vec![prev];
    let mut converged = false;
    let mut iterations = 0;
    let mut bt_step = 1.0;

    for _ in 0..opts.max_iter {
        iterations += 1;
        let g = grad(&z);
        let znext = match fixed_step {
            Some(s) => {
                let mut zn = &z - &(&g * s);
                zn.mapv_inplace(|v| soft_threshold(v, s * lambda));
                zn
            }
            None => loop {
                let mut zn = &z - &(&g * bt_step);
                zn.mapv_inplace(|v| soft_threshold(v, bt_step * lambda));
                let dz = &zn - &z;
                let quad = smooth(&z) + g.dot(&dz) + dz.dot(&dz) / (2.0 * bt_step);
                if smooth(&zn) <= quad + 1e-15 || bt_step < 1e-18 {
                    break zn;
                }
                bt_step *= 0.5;
            },
        };
        let max_move = znext
            .iter()
            .zip(z.iter())
            .map(|(&a, &b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0f64, f64::max);
        z = znext;
        let cur = objective(&z);
        trace.push(cur);
        let rel = (prev - cur) / prev.abs().max(f64::MIN_POSITIVE);
        prev = cur;
        // same plateau handling as coordinate descent: zero measured
        // decrease with a moving iterate is not convergence, ulp-scale
        // movement is
        if max_move <= ITERATE_RESOLUTION || (rel > 0.0 && rel < opts.tol) {
            converged = true;
            break;
        }
    }

    Ok((
        SolveResult {
            code: Code::new(z)?,
            final_loss: prev,
            iterations,
            converged,
        },
        trace,
    ))
}

/// See [`infer_optimal_with_trace`].
pub fn infer_optimal(
    y: &Signal,
    b: &Dictionary,
    p: &Predictor,
    h: &Hyperparams,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    infer_optimal_with_trace(y, b, p, h, opts).map(|(r, _)| r)
}

/// Approximate inference: a single regressor forward pass. Identical to the
/// initialization point of [`infer_optimal`].
pub fn infer_approx(y: &Signal, p: &Predictor) -> Result<Code> {
    predictor_forward(y, p)
}
