//! Online block-coordinate training: per-sample code inference followed by
//! one stochastic gradient step on the basis and the regressor, with
//! unit-norm rescaling of the basis columns after every step.

use ndarray::Array2;

use crate::error::{PsdError, Result};
use crate::model::{
    compound_loss, grad_params, grad_predictor_fit, init_model, Code, Dictionary, Hyperparams,
    Mode, Predictor, Signal,
};
use crate::rng::Rng;
use crate::solvers::{infer_approx, infer_optimal, SolveOptions};

/// Near-zero column threshold below which a basis column is re-randomized
/// instead of renormalized.
const COLUMN_RESCUE_TOL: f64 = 1e-12;

/// Full training configuration. `code_size` is the representation length m;
/// the signal length n is taken from the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub hyper: Hyperparams,
    pub code_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub infer_opts: SolveOptions,
    /// Per-sample multiplicative step decay: eta <- max(floor, eta * (1 - decay)).
    pub eta_decay: f64,
    pub eta_floor: f64,
}

impl TrainConfig {
    pub fn new(
        hyper: Hyperparams,
        code_size: usize,
        epochs: usize,
        seed: u64,
        infer_opts: SolveOptions,
        eta_decay: f64,
        eta_floor: f64,
    ) -> Result<Self> {
        if code_size == 0 {
            return Err(PsdError::InvalidParameter("code_size must be >= 1".into()));
        }
        if epochs == 0 {
            return Err(PsdError::InvalidParameter("epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&eta_decay) {
            return Err(PsdError::InvalidParameter(format!(
                "eta_decay must be in [0, 1], got {eta_decay}"
            )));
        }
        if !eta_floor.is_finite() || eta_floor < 0.0 || eta_floor > hyper.eta {
            return Err(PsdError::InvalidParameter(format!(
                "eta_floor must satisfy 0 <= eta_floor <= eta, got {eta_floor}"
            )));
        }
        Ok(TrainConfig {
            hyper,
            code_size,
            epochs,
            seed,
            infer_opts,
            eta_decay,
            eta_floor,
        })
    }
}

/// Mutable training state; the dictionary invariant holds after every
/// completed step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub dict: Dictionary,
    pub pred: Predictor,
    pub samples_seen: u64,
    pub current_eta: f64,
}

impl TrainState {
    /// Fresh state from the seeded initializer.
    pub fn init(n: usize, cfg: &TrainConfig) -> Result<Self> {
        let (dict, pred) = init_model(n, cfg.code_size, cfg.seed)?;
        Ok(TrainState {
            dict,
            pred,
            samples_seen: 0,
            current_eta: cfg.hyper.eta,
        })
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// Compound loss at the inferred code, before the parameter update.
    pub loss: f64,
    /// l1 norm of the inferred code.
    pub code_l1: f64,
    /// True when non-finite gradients forced the step to be skipped.
    pub rejected: bool,
}

/// One sample of block-coordinate descent: infer the code for `y`, take one
/// SGD step on all parameters, rescale the basis columns to unit norm.
///
/// Mode behavior: Separate infers with the prediction term off and fits the
/// regressor to the inferred code with unit weight; Autoencoder clamps the
/// code to the regressor output and differentiates through it. A step with
/// non-finite gradients is rejected and leaves the state untouched.
pub fn train_step(y: &Signal, state: &mut TrainState, cfg: &TrainConfig) -> Result<StepReport> {
    let z: Code = match cfg.hyper.mode {
        Mode::Autoencoder => infer_approx(y, &state.pred)?,
        _ => infer_optimal(y, &state.dict, &state.pred, &cfg.hyper, &cfg.infer_opts)?.code,
    };
    let loss = compound_loss(y, &z, &state.dict, &state.pred, &cfg.hyper)?;
    let code_l1 = z.l1_norm();

    let mut grads = grad_params(y, &z, &state.dict, &state.pred, &cfg.hyper)?;
    if cfg.hyper.mode == Mode::Separate {
        let (d_gain, d_filters, d_bias) = grad_predictor_fit(y, &z, &state.pred)?;
        grads.d_gain = d_gain;
        grads.d_filters = d_filters;
        grads.d_bias = d_bias;
    }

    if !grads.all_finite() || !loss.is_finite() {
        return Ok(StepReport {
            loss,
            code_l1,
            rejected: true,
        });
    }

    let eta = state.current_eta;
    if eta != 0.0 {
        let mut basis = state.dict.basis() - &(&grads.d_basis * eta);
        rescue_zero_columns(&mut basis, cfg.seed, state.samples_seen);
        let gain = state.pred.gain() - &(&grads.d_gain * eta);
        let filters = state.pred.filters() - &(&grads.d_filters * eta);
        let bias = state.pred.bias() - &(&grads.d_bias * eta);
        if basis.iter().any(|v| !v.is_finite())
            || gain.iter().any(|v| !v.is_finite())
            || filters.iter().any(|v| !v.is_finite())
            || bias.iter().any(|v| !v.is_finite())
        {
            return Ok(StepReport {
                loss,
                code_l1,
                rejected: true,
            });
        }
        state.dict = Dictionary::from_unnormalized(basis)?;
        state.pred = Predictor::new(gain, filters, bias)?;
    }
    state.samples_seen += 1;
    state.current_eta = (state.current_eta * (1.0 - cfg.eta_decay)).max(cfg.eta_floor);
    Ok(StepReport {
        loss,
        code_l1,
        rejected: false,
    })
}

/// Re-draw any column whose norm collapsed below [`COLUMN_RESCUE_TOL`] from
/// the init distribution; renormalization is undefined there. Deterministic
/// given (seed, step, column).
fn rescue_zero_columns(basis: &mut Array2<f64>, seed: u64, step: u64) {
    let n = basis.nrows();
    for j in 0..basis.ncols() {
        let norm = basis.column(j).dot(&basis.column(j)).sqrt();
        if norm < COLUMN_RESCUE_TOL {
            let mut rng =
                Rng::new(seed ^ 0xD1C7).fork(step.wrapping_mul(131).wrapping_add(j as u64));
            for i in 0..n {
                basis[[i, j]] = rng.uniform(-1.0, 1.0);
            }
        }
    }
}

/// One row of the training progress log.
#[derive(Debug, Clone, Copy)]
pub struct ProgressRow {
    pub samples: u64,
    pub avg_loss: f64,
    pub avg_l1: f64,
    pub eta: f64,
}

/// Train over a seeded shuffle of `patches` for `cfg.epochs` epochs.
/// Deterministic given the seed.
pub fn train(patches: &[Signal], cfg: &TrainConfig) -> Result<TrainState> {
    train_with_progress(patches, cfg, usize::MAX, |_| {})
}

/// As [`train`], emitting one [`ProgressRow`] per `log_every` completed
/// samples (averages taken over the window since the previous row) and a
/// final partial row if samples remain.
pub fn train_with_progress(
    patches: &[Signal],
    cfg: &TrainConfig,
    log_every: usize,
    mut sink: impl FnMut(&ProgressRow),
) -> Result<TrainState> {
    if patches.is_empty() {
        return Err(PsdError::InvalidInput("training set is empty".into()));
    }
    let n = patches[0].len();
    if patches.iter().any(|p| p.len() != n) {
        return Err(PsdError::InvalidInput(
            "training patches have unequal lengths".into(),
        ));
    }
    let log_every = log_every.max(1);

    let mut state = TrainState::init(n, cfg)?;
    let base_rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut window_loss = 0.0;
    let mut window_l1 = 0.0;
    let mut window_count = 0usize;

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = base_rng.fork(0x5803_u64.wrapping_add(epoch as u64));
        shuffle_rng.shuffle(&mut order);
        for &idx in &order {
            let report = train_step(&patches[idx], &mut state, cfg)?;
            if !report.rejected {
                window_loss += report.loss;
                window_l1 += report.code_l1;
                window_count += 1;
            }
            if window_count == log_every {
                sink(&ProgressRow {
                    samples: state.samples_seen,
                    avg_loss: window_loss / window_count as f64,
                    avg_l1: window_l1 / window_count as f64,
                    eta: state.current_eta,
                });
                window_loss = 0.0;
                window_l1 = 0.0;
                window_count = 0;
            }
        }
    }
    if window_count > 0 {
        sink(&ProgressRow {
            samples: state.samples_seen,
            avg_loss: window_loss / window_count as f64,
            avg_l1: window_l1 / window_count as f64,
            eta: state.current_eta,
        });
    }
    Ok(state)
}

/// Fit a regressor to precomputed (signal, code) pairs by SGD on the squared
/// prediction error, using the same step schedule as the main loop. This is
/// the post-hoc regressor: codes typically come from an exact solver against
/// a fixed dictionary.
pub fn train_regressor_posthoc(
    pairs: &[(Signal, Code)],
    pred_init: &Predictor,
    cfg: &TrainConfig,
) -> Result<Predictor> {
    if pairs.is_empty() {
        return Err(PsdError::InvalidInput(
            "no (signal, code) pairs supplied".into(),
        ));
    }
    for (y, z) in pairs {
        if y.len() != pred_init.signal_dim() || z.len() != pred_init.code_dim() {
            return Err(PsdError::ShapeMismatch(format!(
                "pair ({}, {}) vs predictor ({}, {})",
                y.len(),
                z.len(),
                pred_init.signal_dim(),
                pred_init.code_dim()
            )));
        }
    }

    let mut pred = pred_init.clone();
    let mut eta = cfg.hyper.eta;
    let base_rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = base_rng.fork(0xF17_u64.wrapping_add(epoch as u64));
        shuffle_rng.shuffle(&mut order);
        for &idx in &order {
            let (y, z) = &pairs[idx];
            let (d_gain, d_filters, d_bias) = grad_predictor_fit(y, z, &pred)?;
            let fin = d_gain.iter().all(|v| v.is_finite())
                && d_filters.iter().all(|v| v.is_finite())
                && d_bias.iter().all(|v| v.is_finite());
            if fin && eta != 0.0 {
                let gain = pred.gain() - &(&d_gain * eta);
                let filters = pred.filters() - &(&d_filters * eta);
                let bias = pred.bias() - &(&d_bias * eta);
                if gain.iter().all(|v| v.is_finite())
                    && filters.iter().all(|v| v.is_finite())
                    && bias.iter().all(|v| v.is_finite())
                {
                    pred = Predictor::new(gain, filters, bias)?;
                }
            }
            eta = (eta * (1.0 - cfg.eta_decay)).max(cfg.eta_floor);
        }
    }
    Ok(pred)
}
