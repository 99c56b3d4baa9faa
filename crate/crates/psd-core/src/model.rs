//! Model types and objectives: the linear basis, the feed-forward regressor,
//! the reconstruction/sparsity losses and their analytic gradients.
//!
//! Note on the two objectives: the basis-pursuit loss carries a 1/2 factor on
//! the reconstruction term, the compound loss does not. Both are implemented
//! exactly as defined; callers must state which objective they mean.

use ndarray::{Array1, Array2};

use crate::error::{PsdError, Result};
use crate::rng::Rng;

/// Tolerance for the dictionary unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-10;

fn all_finite_1(v: &Array1<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn all_finite_2(v: &Array2<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Input signal (an image patch after normalization), length n.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    values: Array1<f64>,
}

impl Signal {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PsdError::InvalidInput(
                "signal must have length >= 1".into(),
            ));
        }
        if !all_finite_1(&values) {
            return Err(PsdError::NonFinite("signal entries must be finite".into()));
        }
        Ok(Signal { values })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Signal::new(Array1::from_vec(values))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sparse representation, length m.
#[derive(Debug, Clone, PartialEq)]
pub struct Code {
    values: Array1<f64>,
}

impl Code {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PsdError::InvalidInput("code must have length >= 1".into()));
        }
        if !all_finite_1(&values) {
            return Err(PsdError::NonFinite("code entries must be finite".into()));
        }
        Ok(Code { values })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Code::new(Array1::from_vec(values))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|z| z.abs()).sum()
    }
}

/// Basis matrix, n rows by m columns, every column unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    basis: Array2<f64>,
}

impl Dictionary {
    /// Wrap a matrix whose columns are already unit-norm (within
    /// [`UNIT_NORM_TOL`]).
    pub fn new(basis: Array2<f64>) -> Result<Self> {
        if basis.nrows() == 0 || basis.ncols() == 0 {
            return Err(PsdError::InvalidInput(
                "dictionary must be at least 1x1".into(),
            ));
        }
        if !all_finite_2(&basis) {
            return Err(PsdError::NonFinite(
                "dictionary entries must be finite".into(),
            ));
        }
        for (j, col) in basis.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(PsdError::Precondition(format!(
                    "dictionary column {j} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Dictionary { basis })
    }

    /// Normalize each column of `basis` to unit norm and wrap the result.
    pub fn from_unnormalized(basis: Array2<f64>) -> Result<Self> {
        if basis.nrows() == 0 || basis.ncols() == 0 {
            return Err(PsdError::InvalidInput(
                "dictionary must be at least 1x1".into(),
            ));
        }
        if !all_finite_2(&basis) {
            return Err(PsdError::NonFinite(
                "dictionary entries must be finite".into(),
            ));
        }
        let mut basis = basis;
        for (j, mut col) in basis.columns_mut().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm == 0.0 {
                return Err(PsdError::DegenerateColumn(j));
            }
            col.mapv_inplace(|x| x / norm);
        }
        Ok(Dictionary { basis })
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    /// Signal dimension n.
    pub fn signal_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Code dimension m.
    pub fn code_dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Feed-forward regressor parameters: per-unit gain, filter matrix, bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    gain: Array1<f64>,
    filters: Array2<f64>,
    bias: Array1<f64>,
}

impl Predictor {
    pub fn new(gain: Array1<f64>, filters: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let m = filters.nrows();
        if m == 0 || filters.ncols() == 0 {
            return Err(PsdError::InvalidInput(
                "filter matrix must be at least 1x1".into(),
            ));
        }
        if gain.len() != m || bias.len() != m {
            return Err(PsdError::ShapeMismatch(format!(
                "gain ({}) and bias ({}) must match filter rows ({m})",
                gain.len(),
                bias.len()
            )));
        }
        if !all_finite_1(&gain) || !all_finite_2(&filters) || !all_finite_1(&bias) {
            return Err(PsdError::NonFinite(
                "predictor parameters must be finite".into(),
            ));
        }
        Ok(Predictor {
            gain,
            filters,
            bias,
        })
    }

    pub fn gain(&self) -> &Array1<f64> {
        &self.gain
    }

    pub fn filters(&self) -> &Array2<f64> {
        &self.filters
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// Signal dimension n.
    pub fn signal_dim(&self) -> usize {
        self.filters.ncols()
    }

    /// Code dimension m.
    pub fn code_dim(&self) -> usize {
        self.filters.nrows()
    }
}

/// Inference / training regime selected by the prediction-weight handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Basis and regressor optimized against the full compound loss.
    Joint,
    /// Code inference ignores the prediction term; the regressor is fitted
    /// to the resulting codes on the side.
    Separate,
    /// The code is clamped to the regressor output; no code optimization.
    Autoencoder,
}

/// Scalar knobs shared by inference and training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lambda: f64,
    pub alpha: f64,
    pub eta: f64,
    pub mode: Mode,
}

impl Hyperparams {
    /// lambda >= 0, alpha >= 0, eta >= 0 (eta = 0 means "no parameter
    /// updates" and is permitted so that inference-only configurations are
    /// expressible).
    pub fn new(lambda: f64, alpha: f64, eta: f64, mode: Mode) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(PsdError::InvalidParameter(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(PsdError::InvalidParameter(format!(
                "alpha must be >= 0, got {alpha}"
            )));
        }
        if !eta.is_finite() || eta < 0.0 {
            return Err(PsdError::InvalidParameter(format!(
                "eta must be >= 0, got {eta}"
            )));
        }
        Ok(Hyperparams {
            lambda,
            alpha,
            eta,
            mode,
        })
    }

    /// Prediction weight seen by the code-inference objective: Separate mode
    /// forces it to zero.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            Mode::Separate => 0.0,
            _ => self.alpha,
        }
    }
}

/// Gradients of the compound loss with respect to every learned parameter.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub d_basis: Array2<f64>,
    pub d_gain: Array1<f64>,
    pub d_filters: Array2<f64>,
    pub d_bias: Array1<f64>,
}

impl ModelGradients {
    pub fn all_finite(&self) -> bool {
        all_finite_2(&self.d_basis)
            && all_finite_1(&self.d_gain)
            && all_finite_2(&self.d_filters)
            && all_finite_1(&self.d_bias)
    }
}

fn check_signal_dict(y: &Signal, b: &Dictionary) -> Result<()> {
    if y.len() != b.signal_dim() {
        return Err(PsdError::ShapeMismatch(format!(
            "signal length {} vs dictionary rows {}",
            y.len(),
            b.signal_dim()
        )));
    }
    Ok(())
}

fn check_code_dict(z: &Code, b: &Dictionary) -> Result<()> {
    if z.len() != b.code_dim() {
        return Err(PsdError::ShapeMismatch(format!(
            "code length {} vs dictionary columns {}",
            z.len(),
            b.code_dim()
        )));
    }
    Ok(())
}

fn check_signal_pred(y: &Signal, p: &Predictor) -> Result<()> {
    if y.len() != p.signal_dim() {
        return Err(PsdError::ShapeMismatch(format!(
            "signal length {} vs predictor input size {}",
            y.len(),
            p.signal_dim()
        )));
    }
    Ok(())
}

/// Regressor forward pass: `gain_k * tanh((W y + D)_k)`.
pub fn predictor_forward(y: &Signal, p: &Predictor) -> Result<Code> {
    check_signal_pred(y, p)?;
    let mut u = p.filters.dot(y.values());
    u += &p.bias;
    let out = ndarray::Zip::from(&u)
        .and(&p.gain)
        .map_collect(|&u, &g| g * u.tanh());
    Code::new(out)
}

/// Basis-pursuit objective: `0.5 * ||y - Bz||^2 + lambda * ||z||_1`.
pub fn bpdn_loss(y: &Signal, z: &Code, b: &Dictionary, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(PsdError::InvalidParameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    check_signal_dict(y, b)?;
    check_code_dict(z, b)?;
    let residual = y.values() - &b.basis.dot(z.values());
    Ok(0.5 * residual.dot(&residual) + lambda * z.l1_norm())
}

/// Compound objective: `||y - Bz||^2 + lambda * ||z||_1 + alpha * ||z - F(y)||^2`
/// (no 1/2 on the reconstruction term).
pub fn compound_loss(
    y: &Signal,
    z: &Code,
    b: &Dictionary,
    p: &Predictor,
    h: &Hyperparams,
) -> Result<f64> {
    check_signal_dict(y, b)?;
    check_code_dict(z, b)?;
    check_signal_pred(y, p)?;
    if z.len() != p.code_dim() {
        return Err(PsdError::ShapeMismatch(format!(
            "code length {} vs predictor output size {}",
            z.len(),
            p.code_dim()
        )));
    }
    let residual = y.values() - &b.basis.dot(z.values());
    let pred = predictor_forward(y, p)?;
    let diff = z.values() - pred.values();
    Ok(residual.dot(&residual) + h.lambda * z.l1_norm() + h.alpha * diff.dot(&diff))
}

/// Gradient in z of the smooth part of the compound loss:
/// `2 B^T (Bz - y) + 2 alpha (z - F(y))`. The l1 term is handled by the
/// proximal step in the solvers, never by a subgradient here.
pub fn grad_z_smooth(
    y: &Signal,
    z: &Code,
    b: &Dictionary,
    p: &Predictor,
    h: &Hyperparams,
) -> Result<Code> {
    check_signal_dict(y, b)?;
    check_code_dict(z, b)?;
    check_signal_pred(y, p)?;
    let recon_err = b.basis.dot(z.values()) - y.values();
    let mut grad = b.basis.t().dot(&recon_err) * 2.0;
    if h.alpha != 0.0 {
        let pred = predictor_forward(y, p)?;
        grad += &((z.values() - pred.values()) * (2.0 * h.alpha));
    }
    Code::new(grad)
}

fn outer(a: &Array1<f64>, bv: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), bv.len()), |(i, j)| a[i] * bv[j])
}

/// Gradients of the compound loss with respect to B, G, W, D with z held
/// fixed. In Autoencoder mode z is replaced by F(y) and gradients flow
/// through the substitution (the l1 term then reaches the regressor
/// parameters through sign(F); sign(0) is taken as 0).
pub fn grad_params(
    y: &Signal,
    z: &Code,
    b: &Dictionary,
    p: &Predictor,
    h: &Hyperparams,
) -> Result<ModelGradients> {
    check_signal_dict(y, b)?;
    check_code_dict(z, b)?;
    check_signal_pred(y, p)?;

    let mut u = p.filters.dot(y.values());
    u += &p.bias;
    let t = u.mapv(f64::tanh);
    let pred = &t * &p.gain;

    match h.mode {
        Mode::Joint | Mode::Separate => {
            let recon_err = b.basis.dot(z.values()) - y.values();
            let d_basis = outer(&(recon_err * 2.0), z.values());
            // d/dF of alpha * ||z - F||^2 = -2 alpha (z - F)
            let d_pred = (pred - z.values()) * (2.0 * h.alpha);
            let d_gain = &d_pred * &t;
            let d_u = ndarray::Zip::from(&d_pred)
                .and(&p.gain)
                .and(&t)
                .map_collect(|&dp, &g, &t| dp * g * (1.0 - t * t));
            let d_filters = outer(&d_u, y.values());
            Ok(ModelGradients {
                d_basis,
                d_gain,
                d_filters,
                d_bias: d_u,
            })
        }
        Mode::Autoencoder => {
            let recon_err = b.basis.dot(&pred) - y.values();
            let d_basis = outer(&(recon_err.clone() * 2.0), &pred);
            let mut d_pred = b.basis.t().dot(&recon_err) * 2.0;
            d_pred += &pred.mapv(|f| h.lambda * sign0(f));
            let d_gain = &d_pred * &t;
            let d_u = ndarray::Zip::from(&d_pred)
                .and(&p.gain)
                .and(&t)
                .map_collect(|&dp, &g, &t| dp * g * (1.0 - t * t));
            let d_filters = outer(&d_u, y.values());
            Ok(ModelGradients {
                d_basis,
                d_gain,
                d_filters,
                d_bias: d_u,
            })
        }
    }
}

/// Gradients of the plain regression objective `||z - F(y)||^2` with respect
/// to the predictor parameters. Used by post-hoc regressor fitting and by
/// Separate-mode training, where the prediction term trains the regressor
/// with unit weight regardless of alpha.
pub fn grad_predictor_fit(
    y: &Signal,
    z: &Code,
    p: &Predictor,
) -> Result<(Array1<f64>, Array2<f64>, Array1<f64>)> {
    check_signal_pred(y, p)?;
    if z.len() != p.code_dim() {
        return Err(PsdError::ShapeMismatch(format!(
            "code length {} vs predictor output size {}",
            z.len(),
            p.code_dim()
        )));
    }
    let mut u = p.filters.dot(y.values());
    u += &p.bias;
    let t = u.mapv(f64::tanh);
    let pred = &t * &p.gain;
    let d_pred = (pred - z.values()) * 2.0;
    let d_gain = &d_pred * &t;
    let d_u = ndarray::Zip::from(&d_pred)
        .and(&p.gain)
        .and(&t)
        .map_collect(|&dp, &g, &t| dp * g * (1.0 - t * t));
    let d_filters = outer(&d_u, y.values());
    Ok((d_gain, d_filters, d_u))
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rescale every column to unit norm. Errors on a zero column.
pub fn normalize_columns(b: &Dictionary) -> Result<Dictionary> {
    Dictionary::from_unnormalized(b.basis.clone())
}

/// Seeded model initialization: basis columns uniform on [-1, 1] then
/// normalized, filters uniform on [-1/sqrt(n), 1/sqrt(n)], zero bias, unit
/// gain.
pub fn init_model(n: usize, m: usize, seed: u64) -> Result<(Dictionary, Predictor)> {
    if n == 0 || m == 0 {
        return Err(PsdError::InvalidParameter(format!(
            "n and m must be >= 1, got n={n}, m={m}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut basis = Array2::zeros((n, m));
    for j in 0..m {
        for i in 0..n {
            basis[[i, j]] = rng.uniform(-1.0, 1.0);
        }
    }
    let dict = Dictionary::from_unnormalized(basis)?;
    let bound = 1.0 / (n as f64).sqrt();
    let mut filters = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            filters[[i, j]] = rng.uniform(-bound, bound);
        }
    }
    let pred = Predictor::new(Array1::ones(m), filters, Array1::zeros(m))?;
    Ok((dict, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use ndarray::array;

    fn random_instance(rng: &mut Rng, n: usize, m: usize) -> (Signal, Code, Dictionary, Predictor) {
        let y = Signal::new(Array1::from_shape_fn(n, |_| rng.next_gaussian())).unwrap();
        let z = Code::new(Array1::from_shape_fn(m, |_| rng.next_gaussian())).unwrap();
        let b =
            Dictionary::from_unnormalized(Array2::from_shape_fn((n, m), |_| rng.next_gaussian()))
                .unwrap();
        let p = Predictor::new(
            Array1::from_shape_fn(m, |_| rng.uniform(0.5, 2.0)),
            Array2::from_shape_fn((m, n), |_| rng.next_gaussian()),
            Array1::from_shape_fn(m, |_| rng.uniform(-0.5, 0.5)),
        )
        .unwrap();
        (y, z, b, p)
    }

    // Scalar-loop re-evaluations, kept free of ndarray dot products so they
    // stay independent of the implementation path.
    fn forward_scalar(y: &Signal, p: &Predictor) -> Vec<f64> {
        let n = y.len();
        let m = p.code_dim();
        let mut out = vec![0.0; m];
        for k in 0..m {
            let mut u = p.bias()[k];
            for j in 0..n {
                u += p.filters()[[k, j]] * y.values()[j];
            }
            out[k] = p.gain()[k] * u.tanh();
        }
        out
    }

    fn bpdn_scalar(y: &Signal, z: &Code, b: &Dictionary, lambda: f64) -> f64 {
        let mut sq = 0.0;
        for i in 0..y.len() {
            let mut r = y.values()[i];
            for j in 0..z.len() {
                r -= b.basis()[[i, j]] * z.values()[j];
            }
            sq += r * r;
        }
        let l1: f64 = z.values().iter().map(|v| v.abs()).sum();
        0.5 * sq + lambda * l1
    }

    fn compound_scalar(
        y: &Signal,
        z: &Code,
        b: &Dictionary,
        p: &Predictor,
        h: &Hyperparams,
    ) -> f64 {
        let mut sq = 0.0;
        for i in 0..y.len() {
            let mut r = y.values()[i];
            for j in 0..z.len() {
                r -= b.basis()[[i, j]] * z.values()[j];
            }
            sq += r * r;
        }
        let l1: f64 = z.values().iter().map(|v| v.abs()).sum();
        let f = forward_scalar(y, p);
        let mut pd = 0.0;
        for k in 0..z.len() {
            let d = z.values()[k] - f[k];
            pd += d * d;
        }
        sq + h.lambda * l1 + h.alpha * pd
    }

    #[test]
    fn forward_zero_filters_gives_zero_code() {
        let p = Predictor::new(array![3.0, -1.0], Array2::zeros((2, 3)), Array1::zeros(2)).unwrap();
        let y = Signal::from_vec(vec![0.3, -0.7, 2.0]).unwrap();
        let out = predictor_forward(&y, &p).unwrap();
        assert_eq!(out.values(), &array![0.0, 0.0]);
    }

    #[test]
    fn forward_gain_bounds_output() {
        let p = Predictor::new(array![2.0], array![[0.5]], array![0.0]).unwrap();
        let zero = predictor_forward(&Signal::from_vec(vec![0.0]).unwrap(), &p).unwrap();
        assert_eq!(zero.values()[0], 0.0);
        let sat = predictor_forward(&Signal::from_vec(vec![1e6]).unwrap(), &p).unwrap();
        assert!((sat.values()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let mut rng = Rng::new(101);
        let (y, _, _, p) = random_instance(&mut rng, 4, 6);
        let fast = predictor_forward(&y, &p).unwrap();
        let slow = forward_scalar(&y, &p);
        for k in 0..6 {
            assert!((fast.values()[k] - slow[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_bounded_by_gain() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let (y, _, _, p) = random_instance(&mut rng, 5, 7);
            let out = predictor_forward(&y, &p).unwrap();
            for k in 0..7 {
                assert!(out.values()[k].abs() <= p.gain()[k].abs() + 1e-15);
            }
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let p = Predictor::new(array![1.0], array![[1.0, 2.0]], array![0.0]).unwrap();
        let y = Signal::from_vec(vec![1.0]).unwrap();
        assert!(matches!(
            predictor_forward(&y, &p),
            Err(PsdError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn bpdn_loss_zero_code() {
        let y = Signal::from_vec(vec![3.0, 4.0]).unwrap();
        let b = Dictionary::from_unnormalized(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let z = Code::from_vec(vec![0.0, 0.0]).unwrap();
        let l = bpdn_loss(&y, &z, &b, 0.7).unwrap();
        assert_eq!(l, 0.5 * 25.0);
    }

    #[test]
    fn bpdn_loss_exact_reconstruction() {
        let y = Signal::from_vec(vec![2.0]).unwrap();
        let b = Dictionary::new(array![[1.0]]).unwrap();
        let z = Code::from_vec(vec![2.0]).unwrap();
        assert_eq!(bpdn_loss(&y, &z, &b, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn losses_match_scalar_loop() {
        let mut rng = Rng::new(2024);
        for _ in 0..20 {
            let (y, z, b, p) = random_instance(&mut rng, 5, 8);
            let h = Hyperparams::new(0.3, 1.2, 0.01, Mode::Joint).unwrap();
            let fast_bp = bpdn_loss(&y, &z, &b, 0.3).unwrap();
            assert!((fast_bp - bpdn_scalar(&y, &z, &b, 0.3)).abs() < 1e-12);
            let fast_cp = compound_loss(&y, &z, &b, &p, &h).unwrap();
            assert!((fast_cp - compound_scalar(&y, &z, &b, &p, &h)).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_nonnegative() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let (y, z, b, p) = random_instance(&mut rng, 4, 6);
            let h = Hyperparams::new(0.2, 0.8, 0.01, Mode::Joint).unwrap();
            assert!(bpdn_loss(&y, &z, &b, 0.2).unwrap() >= 0.0);
            assert!(compound_loss(&y, &z, &b, &p, &h).unwrap() >= 0.0);
        }
    }

    #[test]
    fn compound_alpha_zero_vs_bpdn_half_factor() {
        // compound(alpha=0) - bpdn = 0.5 ||y - Bz||^2, the documented
        // half-factor difference between the two objectives.
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let (y, z, b, p) = random_instance(&mut rng, 4, 6);
            let lambda = 0.4;
            let h = Hyperparams::new(lambda, 0.0, 0.01, Mode::Joint).unwrap();
            let c = compound_loss(&y, &z, &b, &p, &h).unwrap();
            let bp = bpdn_loss(&y, &z, &b, lambda).unwrap();
            let residual = y.values() - &b.basis().dot(z.values());
            let half_sq = 0.5 * residual.dot(&residual);
            assert!((c - bp - half_sq).abs() < 1e-12);
        }
    }

    #[test]
    fn compound_zero_at_consistent_point() {
        // z = F(y), y = Bz, lambda = 0 -> loss 0.
        let b = Dictionary::from_unnormalized(array![[1.0, 1.0], [0.0, 1.0]]).unwrap();
        let z = Code::from_vec(vec![0.5, -0.25]).unwrap();
        let y_arr = b.basis().dot(z.values());
        let y = Signal::new(y_arr).unwrap();
        // pick gains so that F(y) = z with fixed filters/bias
        let filters = array![[0.3, 0.1], [0.2, -0.4]];
        let bias = array![0.1, 0.2];
        let u = filters.dot(y.values()) + &bias;
        let gain = ndarray::Zip::from(z.values())
            .and(&u)
            .map_collect(|&zk, &uk| zk / uk.tanh());
        let p = Predictor::new(gain, filters, bias).unwrap();
        let h = Hyperparams::new(0.0, 1.0, 0.01, Mode::Joint).unwrap();
        let c = compound_loss(&y, &z, &b, &p, &h).unwrap();
        assert!(c.abs() < 1e-24);
    }

    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn grad_z_matches_finite_differences() {
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let (y, z, b, p) = random_instance(&mut rng, 5, 8);
            let h = Hyperparams::new(0.0, 0.7, 0.01, Mode::Joint).unwrap();
            let g = grad_z_smooth(&y, &z, &b, &p, &h).unwrap();
            let f = |zv: &[f64]| {
                let zc = Code::from_vec(zv.to_vec()).unwrap();
                let residual = y.values() - &b.basis().dot(zc.values());
                let pred = predictor_forward(&y, &p).unwrap();
                let diff = zc.values() - pred.values();
                residual.dot(&residual) + h.alpha * diff.dot(&diff)
            };
            let fd = finite_diff(f, z.values().as_slice().unwrap(), 1e-5);
            for k in 0..8 {
                assert!(
                    rel_err(g.values()[k], fd[k]) <= 1e-5,
                    "coord {k}: {} vs {}",
                    g.values()[k],
                    fd[k]
                );
            }
        }
    }

    #[test]
    fn grad_z_zero_at_ridge_solution() {
        // lambda = 0 optimum: (2 B^T B + 2 alpha I) z = 2 B^T y + 2 alpha F(y).
        let mut rng = Rng::new(12);
        let (y, _, b, p) = random_instance(&mut rng, 6, 4);
        let alpha = 0.9;
        let h = Hyperparams::new(0.0, alpha, 0.01, Mode::Joint).unwrap();
        let f = predictor_forward(&y, &p).unwrap();
        let m = 4;
        // assemble and solve the normal equations with a local elimination
        let mut a = vec![vec![0.0; m]; m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for r in 0..6 {
                    s += b.basis()[[r, i]] * b.basis()[[r, j]];
                }
                a[i][j] = 2.0 * s + if i == j { 2.0 * alpha } else { 0.0 };
            }
            let mut s = 0.0;
            for r in 0..6 {
                s += b.basis()[[r, i]] * y.values()[r];
            }
            rhs[i] = 2.0 * s + 2.0 * alpha * f.values()[i];
        }
        // gaussian elimination with partial pivoting
        for k in 0..m {
            let mut piv = k;
            for r in k + 1..m {
                if a[r][k].abs() > a[piv][k].abs() {
                    piv = r;
                }
            }
            a.swap(k, piv);
            rhs.swap(k, piv);
            for r in k + 1..m {
                let fkt = a[r][k] / a[k][k];
                for c in k..m {
                    a[r][c] -= fkt * a[k][c];
                }
                rhs[r] -= fkt * rhs[k];
            }
        }
        let mut zstar = vec![0.0; m];
        for k in (0..m).rev() {
            let mut s = rhs[k];
            for c in k + 1..m {
                s -= a[k][c] * zstar[c];
            }
            zstar[k] = s / a[k][k];
        }
        let z = Code::from_vec(zstar).unwrap();
        let g = grad_z_smooth(&y, &z, &b, &p, &h).unwrap();
        for k in 0..m {
            assert!(
                g.values()[k].abs() < 1e-8,
                "grad coord {k} = {}",
                g.values()[k]
            );
        }
    }

    #[test]
    fn grad_z_zero_for_orthonormal_transpose_solution() {
        let b = Dictionary::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let y = Signal::from_vec(vec![0.4, -1.1]).unwrap();
        let z = Code::new(b.basis().t().dot(y.values())).unwrap();
        let p = Predictor::new(array![1.0, 1.0], Array2::zeros((2, 2)), Array1::zeros(2)).unwrap();
        let h = Hyperparams::new(0.0, 0.0, 0.01, Mode::Joint).unwrap();
        let g = grad_z_smooth(&y, &z, &b, &p, &h).unwrap();
        for k in 0..2 {
            assert!(g.values()[k].abs() < 1e-14);
        }
    }

    #[test]
    fn grad_params_alpha_zero_leaves_predictor_still() {
        let mut rng = Rng::new(21);
        let (y, z, b, p) = random_instance(&mut rng, 5, 8);
        for mode in [Mode::Joint, Mode::Separate] {
            let h = Hyperparams::new(0.3, 0.0, 0.01, mode).unwrap();
            let g = grad_params(&y, &z, &b, &p, &h).unwrap();
            assert!(g.d_gain.iter().all(|&v| v == 0.0));
            assert!(g.d_filters.iter().all(|&v| v == 0.0));
            assert!(g.d_bias.iter().all(|&v| v == 0.0));
            // reconstruction still drives the basis
            assert!(g.d_basis.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn grad_params_zero_at_consistent_point() {
        let b = Dictionary::from_unnormalized(array![[2.0, 1.0], [0.0, 1.0]]).unwrap();
        let z = Code::from_vec(vec![0.7, -0.2]).unwrap();
        let y = Signal::new(b.basis().dot(z.values())).unwrap();
        let filters = array![[0.3, 0.1], [0.2, -0.4]];
        let bias = array![0.1, 0.2];
        let u = filters.dot(y.values()) + &bias;
        let gain = ndarray::Zip::from(z.values())
            .and(&u)
            .map_collect(|&zk, &uk| zk / uk.tanh());
        let p = Predictor::new(gain, filters, bias).unwrap();
        let h = Hyperparams::new(0.5, 1.0, 0.01, Mode::Joint).unwrap();
        let g = grad_params(&y, &z, &b, &p, &h).unwrap();
        for v in g.d_basis.iter().chain(g.d_filters.iter()) {
            assert!(v.abs() < 1e-12);
        }
        for v in g.d_gain.iter().chain(g.d_bias.iter()) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn grad_params_matches_finite_differences() {
        let mut rng = Rng::new(31);
        for trial in 0..5 {
            let (y, z, b, p) = random_instance(&mut rng, 5, 8);
            let h = Hyperparams::new(0.3, 1.1, 0.01, Mode::Joint).unwrap();
            let g = grad_params(&y, &z, &b, &p, &h).unwrap();

            let loss_of =
                |bm: &Array2<f64>, gv: &Array1<f64>, wv: &Array2<f64>, dv: &Array1<f64>| {
                    let resid = y.values() - &bm.dot(z.values());
                    let mut u = wv.dot(y.values());
                    u += dv;
                    let pred = ndarray::Zip::from(&u)
                        .and(gv)
                        .map_collect(|&u, &g| g * u.tanh());
                    let diff = z.values() - &pred;
                    resid.dot(&resid) + h.lambda * z.l1_norm() + h.alpha * diff.dot(&diff)
                };

            let hstep = 1e-5;
            // basis entries
            for i in 0..5 {
                for j in 0..8 {
                    let mut bp_ = b.basis().clone();
                    bp_[[i, j]] += hstep;
                    let mut bm_ = b.basis().clone();
                    bm_[[i, j]] -= hstep;
                    let fd = (loss_of(&bp_, p.gain(), p.filters(), p.bias())
                        - loss_of(&bm_, p.gain(), p.filters(), p.bias()))
                        / (2.0 * hstep);
                    assert!(
                        rel_err(g.d_basis[[i, j]], fd) <= 1e-5,
                        "trial {trial} basis ({i},{j}): {} vs {fd}",
                        g.d_basis[[i, j]]
                    );
                }
            }
            // gain, bias
            for k in 0..8 {
                let mut gp = p.gain().clone();
                gp[k] += hstep;
                let mut gm = p.gain().clone();
                gm[k] -= hstep;
                let fd = (loss_of(b.basis(), &gp, p.filters(), p.bias())
                    - loss_of(b.basis(), &gm, p.filters(), p.bias()))
                    / (2.0 * hstep);
                assert!(rel_err(g.d_gain[k], fd) <= 1e-5);

                let mut dp = p.bias().clone();
                dp[k] += hstep;
                let mut dm = p.bias().clone();
                dm[k] -= hstep;
                let fd = (loss_of(b.basis(), p.gain(), p.filters(), &dp)
                    - loss_of(b.basis(), p.gain(), p.filters(), &dm))
                    / (2.0 * hstep);
                assert!(rel_err(g.d_bias[k], fd) <= 1e-5);
            }
            // filters
            for i in 0..8 {
                for j in 0..5 {
                    let mut wp = p.filters().clone();
                    wp[[i, j]] += hstep;
                    let mut wm = p.filters().clone();
                    wm[[i, j]] -= hstep;
                    let fd = (loss_of(b.basis(), p.gain(), &wp, p.bias())
                        - loss_of(b.basis(), p.gain(), &wm, p.bias()))
                        / (2.0 * hstep);
                    assert!(rel_err(g.d_filters[[i, j]], fd) <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn normalize_columns_basic() {
        let raw = array![[3.0], [4.0]];
        let d = Dictionary::from_unnormalized(raw).unwrap();
        assert!((d.basis()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((d.basis()[[1, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_columns_idempotent_and_scale_invariant() {
        let mut rng = Rng::new(55);
        let raw = Array2::from_shape_fn((6, 9), |_| rng.next_gaussian());
        let once = Dictionary::from_unnormalized(raw.clone()).unwrap();
        let twice = normalize_columns(&once).unwrap();
        for (a, b) in once.basis().iter().zip(twice.basis().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let scaled = Dictionary::from_unnormalized(raw.clone() * 3.7).unwrap();
        for (a, b) in once.basis().iter().zip(scaled.basis().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for col in once.basis().columns() {
            assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_columns_rejects_zero_column() {
        let raw = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(
            Dictionary::from_unnormalized(raw),
            Err(PsdError::DegenerateColumn(1))
        ));
    }

    #[test]
    fn init_model_deterministic() {
        let (d1, p1) = init_model(4, 8, 99).unwrap();
        let (d2, p2) = init_model(4, 8, 99).unwrap();
        assert_eq!(d1.basis(), d2.basis());
        assert_eq!(p1.filters(), p2.filters());
        assert_eq!(p1.gain(), p2.gain());
        assert_eq!(p1.bias(), p2.bias());
        // unit-norm invariant holds
        assert!(Dictionary::new(d1.basis().clone()).is_ok());
        // different seeds differ somewhere
        let (d3, _) = init_model(4, 8, 100).unwrap();
        assert!(d1
            .basis()
            .iter()
            .zip(d3.basis().iter())
            .any(|(a, b)| a != b));
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::new(-0.1, 1.0, 0.1, Mode::Joint).is_err());
        assert!(Hyperparams::new(0.1, -1.0, 0.1, Mode::Joint).is_err());
        assert!(Hyperparams::new(0.1, 1.0, -0.1, Mode::Joint).is_err());
        assert!(Hyperparams::new(0.0, 0.0, 0.0, Mode::Joint).is_ok());
        let sep = Hyperparams::new(0.1, 1.0, 0.1, Mode::Separate).unwrap();
        assert_eq!(sep.effective_alpha(), 0.0);
        let joint = Hyperparams::new(0.1, 1.0, 0.1, Mode::Joint).unwrap();
        assert_eq!(joint.effective_alpha(), 1.0);
    }
}
