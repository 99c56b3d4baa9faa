//! Convolutional application of an encoder over an image, absolute-value
//! rectification, and average down-sampling: the feature-extraction stages
//! of the recognition pipeline.

use ndarray::Array3;

use crate::error::{PsdError, Result};
use crate::model::{Dictionary, Predictor, Signal};
use crate::solvers::{infer_approx, solve_bpdn_cd, SolveOptions};

/// Encoder applied at every window position.
#[derive(Debug, Clone)]
pub enum ConvEncoder<'a> {
    /// One regressor forward pass per window.
    Approx(&'a Predictor),
    /// Exact basis-pursuit solve per window.
    Exact {
        dict: &'a Dictionary,
        lambda: f64,
        opts: SolveOptions,
    },
}

impl ConvEncoder<'_> {
    fn signal_dim(&self) -> usize {
        match self {
            ConvEncoder::Approx(p) => p.signal_dim(),
            ConvEncoder::Exact { dict, .. } => dict.signal_dim(),
        }
    }

    fn code_dim(&self) -> usize {
        match self {
            ConvEncoder::Approx(p) => p.code_dim(),
            ConvEncoder::Exact { dict, .. } => dict.code_dim(),
        }
    }

    fn encode(&self, window: &Signal) -> Result<Vec<f64>> {
        match self {
            ConvEncoder::Approx(p) => Ok(infer_approx(window, p)?.values().to_vec()),
            ConvEncoder::Exact { dict, lambda, opts } => {
                Ok(solve_bpdn_cd(window, dict, *lambda, opts)?
                    .code
                    .values()
                    .to_vec())
            }
        }
    }
}

/// Encode every stride-1 k x k window (flattened row-major, not
/// re-normalized per window) and write the codes into per-unit feature maps
/// of shape m x (H-k+1) x (W-k+1).
pub fn encode_convolutional(
    img: &crate::data::GrayImage,
    encoder: &ConvEncoder,
    k: usize,
) -> Result<Array3<f64>> {
    let (h, w) = (img.height(), img.width());
    if k == 0 || k > h.min(w) {
        return Err(PsdError::SizeLimit(format!(
            "window side {k} does not fit image {h}x{w}"
        )));
    }
    if encoder.signal_dim() != k * k {
        return Err(PsdError::ShapeMismatch(format!(
            "encoder expects input length {}, window has {}",
            encoder.signal_dim(),
            k * k
        )));
    }
    let m = encoder.code_dim();
    let out_h = h - k + 1;
    let out_w = w - k + 1;
    let mut maps = Array3::zeros((m, out_h, out_w));
    let mut window = vec![0.0; k * k];
    for r in 0..out_h {
        for c in 0..out_w {
            for dr in 0..k {
                for dc in 0..k {
                    window[dr * k + dc] = img.pixels()[[r + dr, c + dc]];
                }
            }
            let code = encoder.encode(&Signal::from_vec(window.clone())?)?;
            for (u, &v) in code.iter().enumerate() {
                maps[[u, r, c]] = v;
            }
        }
    }
    Ok(maps)
}

/// Element-wise absolute value.
pub fn abs_rectify(t: &Array3<f64>) -> Array3<f64> {
    t.mapv(f64::abs)
}

/// Average pooling onto an out_h x out_w grid with cell boundaries at
/// round(i * H / out_h); each output value is the mean of its cell.
pub fn avg_downsample(t: &Array3<f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (m, h, w) = t.dim();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(PsdError::InvalidParameter(format!(
            "output {out_h}x{out_w} must be between 1x1 and {h}x{w}"
        )));
    }
    let bound = |i: usize, total: usize, parts: usize| -> usize {
        ((i as f64) * (total as f64) / (parts as f64)).round() as usize
    };
    let mut out = Array3::zeros((m, out_h, out_w));
    for u in 0..m {
        for i in 0..out_h {
            let r0 = bound(i, h, out_h);
            let r1 = bound(i + 1, h, out_h);
            for j in 0..out_w {
                let c0 = bound(j, w, out_w);
                let c1 = bound(j + 1, w, out_w);
                let mut acc = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc += t[[u, r, c]];
                    }
                }
                out[[u, i, j]] = acc / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    Ok(out)
}
