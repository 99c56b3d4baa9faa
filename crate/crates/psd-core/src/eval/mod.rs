//! Measurements over code sets: reconstruction fidelity between
//! representations (SNR), measured sparsity, threshold calibration, and
//! sign-transition stability across frame sequences.

mod bench;
mod classifier;
mod features;

pub use bench::{bench_inference, time_repetitions, BenchReport, TimingStats};
pub use classifier::{train_linear_classifier, LinearClassifier};
pub use features::{abs_rectify, avg_downsample, encode_convolutional, ConvEncoder};

use crate::error::{PsdError, Result};
use crate::model::Code;

/// Aligned collection of codes of uniform length. Ids pair entries across
/// compared sets; sets built with [`CodeSet::new`] get sequential ids.
#[derive(Debug, Clone)]
pub struct CodeSet {
    codes: Vec<Code>,
    ids: Vec<u64>,
}

impl CodeSet {
    pub fn new(codes: Vec<Code>) -> Result<Self> {
        let ids = (0..codes.len() as u64).collect();
        CodeSet::with_ids(codes, ids)
    }

    pub fn with_ids(codes: Vec<Code>, ids: Vec<u64>) -> Result<Self> {
        if codes.is_empty() {
            return Err(PsdError::InvalidInput("code set is empty".into()));
        }
        let m = codes[0].len();
        if codes.iter().any(|c| c.len() != m) {
            return Err(PsdError::InvalidInput("codes have unequal lengths".into()));
        }
        if ids.len() != codes.len() {
            return Err(PsdError::InvalidInput(
                "id count must match code count".into(),
            ));
        }
        Ok(CodeSet { codes, ids })
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code_dim(&self) -> usize {
        self.codes[0].len()
    }

    /// Entry-wise magnitude threshold: |z| <= theta maps to exactly 0.
    pub fn apply_threshold(&self, theta: f64) -> CodeSet {
        let codes = self
            .codes
            .iter()
            .map(|c| {
                Code::new(c.values().mapv(|z| if z.abs() <= theta { 0.0 } else { z }))
                    .expect("thresholding preserves validity")
            })
            .collect();
        CodeSet {
            codes,
            ids: self.ids.clone(),
        }
    }

    /// Fraction of entries that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        let total = self.len() * self.code_dim();
        let zeros: usize = self
            .codes
            .iter()
            .map(|c| c.values().iter().filter(|&&z| z == 0.0).count())
            .sum();
        zeros as f64 / total as f64
    }
}

fn check_aligned(a: &CodeSet, b: &CodeSet) -> Result<()> {
    if a.len() != b.len() || a.code_dim() != b.code_dim() || a.ids != b.ids {
        return Err(PsdError::InvalidInput(
            "code sets are misaligned (size, code length, or ids differ)".into(),
        ));
    }
    Ok(())
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut count = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        count += 1;
    }
    let mean = sum / count as f64;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64
}

/// Signal-to-noise result; `mean_snr_db` is positive infinity when every
/// pair had zero noise variance.
#[derive(Debug, Clone, Copy)]
pub struct SnrReport {
    /// Per-pair SNR averaged over pairs.
    pub mean_snr_db: f64,
    /// SNR of the variances pooled over all entries, for transparency.
    pub pooled_snr_db: f64,
    pub pairs: usize,
    /// Pairs excluded from the mean because their noise variance was zero.
    pub excluded_zero_noise: usize,
}

/// Average signal-to-noise ratio in dB between aligned code sets, with
/// noise defined as (reference - approximation). Per-pair variances are
/// population variances over the code coordinates.
pub fn snr_report(reference: &CodeSet, approximation: &CodeSet) -> Result<SnrReport> {
    check_aligned(reference, approximation)?;
    let mut sum_db = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for (r, a) in reference.codes.iter().zip(&approximation.codes) {
        let vs = population_variance(r.values().iter().copied());
        let vn = population_variance(r.values().iter().zip(a.values().iter()).map(|(x, y)| x - y));
        if vn == 0.0 {
            excluded += 1;
        } else {
            sum_db += 10.0 * (vs / vn).log10();
            included += 1;
        }
    }
    let mean = if included == 0 {
        f64::INFINITY
    } else {
        sum_db / included as f64
    };

    let pooled_vs = population_variance(
        reference
            .codes
            .iter()
            .flat_map(|c| c.values().iter().copied()),
    );
    let pooled_vn = population_variance(
        reference
            .codes
            .iter()
            .zip(&approximation.codes)
            .flat_map(|(r, a)| r.values().iter().zip(a.values().iter()).map(|(x, y)| x - y)),
    );
    let pooled = if pooled_vn == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (pooled_vs / pooled_vn).log10()
    };

    Ok(SnrReport {
        mean_snr_db: mean,
        pooled_snr_db: pooled,
        pairs: reference.len(),
        excluded_zero_noise: excluded,
    })
}

/// Mean per-pair SNR in dB; see [`snr_report`].
pub fn snr(reference: &CodeSet, approximation: &CodeSet) -> Result<f64> {
    snr_report(reference, approximation).map(|r| r.mean_snr_db)
}

/// Measured sparsity: mean l1 norm over the set.
pub fn avg_l1(codes: &CodeSet) -> f64 {
    codes.codes.iter().map(|c| c.l1_norm()).sum::<f64>() / codes.len() as f64
}

/// Smallest magnitude threshold whose induced zero fraction is as close as
/// possible to `target_zero_fraction` (ties resolved toward the smaller
/// threshold). Thresholding maps |z| <= theta to zero.
pub fn calibrate_threshold(codes: &CodeSet, target_zero_fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_zero_fraction) {
        return Err(PsdError::InvalidParameter(format!(
            "target zero fraction must be in [0, 1], got {target_zero_fraction}"
        )));
    }
    let mut mags: Vec<f64> = codes
        .codes
        .iter()
        .flat_map(|c| c.values().iter().map(|z| z.abs()))
        .collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let total = mags.len() as f64;

    // candidate thresholds: 0 and each distinct magnitude; the induced zero
    // fraction is a step function that only changes at those points
    let mut best_theta = 0.0;
    let zeros_at_0 = mags.iter().take_while(|&&v| v == 0.0).count();
    let mut best_gap = (zeros_at_0 as f64 / total - target_zero_fraction).abs();
    let mut i = 0;
    while i < mags.len() {
        let theta = mags[i];
        let mut j = i;
        while j < mags.len() && mags[j] == theta {
            j += 1;
        }
        let frac = j as f64 / total;
        let gap = (frac - target_zero_fraction).abs();
        if gap < best_gap {
            best_gap = gap;
            best_theta = theta;
        }
        i = j;
    }
    Ok(best_theta)
}

/// Row/column labels of [`TransitionStats`] in order.
pub const STATE_LABELS: [&str; 3] = ["-", "0", "+"];

/// Sign-transition statistics over consecutive frames: counts and
/// conditional probabilities P(next | previous) over states (-, 0, +).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStats {
    pub counts: [[u64; 3]; 3],
    pub probs: [[f64; 3]; 3],
}

impl TransitionStats {
    /// Probability that the state changes between consecutive frames
    /// (off-diagonal mass over all transitions).
    pub fn change_probability(&self) -> f64 {
        let mut total = 0u64;
        let mut off = 0u64;
        for i in 0..3 {
            for j in 0..3 {
                total += self.counts[i][j];
                if i != j {
                    off += self.counts[i][j];
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            off as f64 / total as f64
        }
    }

    /// Marginal distribution of the next state.
    pub fn next_marginal(&self) -> [f64; 3] {
        let mut col = [0u64; 3];
        let mut total = 0u64;
        for row in &self.counts {
            for (j, &c) in row.iter().enumerate() {
                col[j] += c;
                total += c;
            }
        }
        if total == 0 {
            [0.0; 3]
        } else {
            [
                col[0] as f64 / total as f64,
                col[1] as f64 / total as f64,
                col[2] as f64 / total as f64,
            ]
        }
    }
}

fn sign_state(z: f64, threshold: f64) -> usize {
    if z.abs() <= threshold {
        1
    } else if z > 0.0 {
        2
    } else {
        0
    }
}

/// Accumulate sign transitions over every (unit, patch, consecutive-frame)
/// triple. Frames must be aligned code sets of equal shape.
pub fn sign_transition_matrix(frames: &[CodeSet], threshold: f64) -> Result<TransitionStats> {
    if frames.len() < 2 {
        return Err(PsdError::InvalidInput("need at least 2 frames".into()));
    }
    if threshold < 0.0 {
        return Err(PsdError::InvalidParameter("threshold must be >= 0".into()));
    }
    for f in &frames[1..] {
        check_aligned(&frames[0], f)?;
    }
    let mut counts = [[0u64; 3]; 3];
    for pair in frames.windows(2) {
        for (prev_code, next_code) in pair[0].codes.iter().zip(pair[1].codes.iter()) {
            for (&zp, &zn) in prev_code.values().iter().zip(next_code.values().iter()) {
                counts[sign_state(zp, threshold)][sign_state(zn, threshold)] += 1;
            }
        }
    }
    let mut probs = [[0.0; 3]; 3];
    for i in 0..3 {
        let row_total: u64 = counts[i].iter().sum();
        if row_total > 0 {
            for j in 0..3 {
                probs[i][j] = counts[i][j] as f64 / row_total as f64;
            }
        }
    }
    Ok(TransitionStats { counts, probs })
}
