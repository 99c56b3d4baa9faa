//! Wall-clock comparison of approximate (one forward pass) and exact
//! (coordinate-descent) inference over a patch batch. Runs single-threaded
//! so the ratio reflects algorithmic cost, not parallelism.

use std::time::Instant;

use crate::error::{PsdError, Result};
use crate::model::{Dictionary, Hyperparams, Predictor, Signal};
use crate::solvers::{infer_approx, infer_optimal, solve_bpdn_cd, SolveOptions};

/// Raw and aggregate wall-clock statistics over benchmark repetitions.
#[derive(Debug, Clone)]
pub struct TimingStats {
    /// Per-repetition wall time in seconds.
    pub times_s: Vec<f64>,
    pub median_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
}

impl TimingStats {
    fn from_times(times_s: Vec<f64>) -> Self {
        let mut sorted = times_s.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let median_s = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean_s = sorted.iter().sum::<f64>() / n as f64;
        let std_s = (sorted.iter().map(|t| (t - mean_s).powi(2)).sum::<f64>() / n as f64).sqrt();
        TimingStats {
            times_s,
            median_s,
            mean_s,
            std_s,
        }
    }
}

/// Time `repetitions` runs of `f` (no warm-up; callers warm up separately).
pub fn time_repetitions(repetitions: usize, mut f: impl FnMut()) -> TimingStats {
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        f();
        times.push(start.elapsed().as_secs_f64());
    }
    TimingStats::from_times(times)
}

/// Benchmark report; `speedup_approx_vs_exact` is
/// median(exact coordinate descent) / median(approximate inference).
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub batch: usize,
    pub signal_dim: usize,
    pub code_dim: usize,
    pub repetitions: usize,
    pub approx: TimingStats,
    pub exact_cd: TimingStats,
    pub optimal: Option<TimingStats>,
    pub speedup_approx_vs_exact: f64,
}

/// Time approximate inference and exact coordinate descent (optionally also
/// compound-loss inference) over the whole batch, `repetitions` times each
/// after one untimed warm-up pass. Outputs are checked finite during warm-up.
pub fn bench_inference(
    patches: &[Signal],
    dict: &Dictionary,
    pred: &Predictor,
    h: &Hyperparams,
    opts: &SolveOptions,
    repetitions: usize,
    include_optimal: bool,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(PsdError::InvalidParameter(format!(
            "need at least 3 repetitions, got {repetitions}"
        )));
    }
    if patches.is_empty() {
        return Err(PsdError::InvalidInput("benchmark batch is empty".into()));
    }

    // warm-up, with finiteness checks on every output
    for y in patches {
        let a = infer_approx(y, pred)?;
        if a.values().iter().any(|v| !v.is_finite()) {
            return Err(PsdError::NonFinite("approximate inference output".into()));
        }
        let e = solve_bpdn_cd(y, dict, h.lambda, opts)?;
        if e.code.values().iter().any(|v| !v.is_finite()) {
            return Err(PsdError::NonFinite("exact inference output".into()));
        }
        if include_optimal {
            infer_optimal(y, dict, pred, h, opts)?;
        }
    }

    let approx = time_repetitions(repetitions, || {
        for y in patches {
            std::hint::black_box(infer_approx(y, pred).expect("warmed up"));
        }
    });
    let exact_cd = time_repetitions(repetitions, || {
        for y in patches {
            std::hint::black_box(solve_bpdn_cd(y, dict, h.lambda, opts).expect("warmed up"));
        }
    });
    let optimal = include_optimal.then(|| {
        time_repetitions(repetitions, || {
            for y in patches {
                std::hint::black_box(infer_optimal(y, dict, pred, h, opts).expect("warmed up"));
            }
        })
    });

    let speedup = exact_cd.median_s / approx.median_s;
    Ok(BenchReport {
        batch: patches.len(),
        signal_dim: dict.signal_dim(),
        code_dim: dict.code_dim(),
        repetitions,
        approx,
        exact_cd,
        optimal,
        speedup_approx_vs_exact: speedup,
    })
}
