//! Image ingestion, patch extraction and the recognition preprocessing
//! pipeline (grayscale, resize, global and local contrast normalization,
//! zero-padding to a fixed canvas).

use ndarray::{Array1, Array2};

use crate::error::{PsdError, Result};
use crate::model::Signal;
use crate::rng::Rng;

/// Defaults for the recognition pipeline.
pub const DEFAULT_LONG_SIDE: usize = 151;
pub const DEFAULT_PAD_TO: usize = 143;
pub const DEFAULT_LCN_SIDE: usize = 9;
/// Gaussian sigma for the 9x9 local-normalization window (side / 5.655,
/// about 3 sigma of support).
pub const DEFAULT_LCN_SIGMA: f64 = 1.591;

/// Grayscale image with finite real pixels, row-major H x W.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Array2<f64>,
}

impl GrayImage {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.nrows() == 0 || pixels.ncols() == 0 {
            return Err(PsdError::InvalidInput("image must be at least 1x1".into()));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(PsdError::NonFinite("image pixels must be finite".into()));
        }
        Ok(GrayImage { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Source position of an extracted patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

/// A set of equally sized square patches, flattened row-major.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Signal>,
    pub patch_side: usize,
    /// One origin per patch when provenance is known, empty otherwise.
    pub origins: Vec<PatchOrigin>,
}

impl PatchSet {
    pub fn new(patches: Vec<Signal>, patch_side: usize, origins: Vec<PatchOrigin>) -> Result<Self> {
        if patches.is_empty() {
            return Err(PsdError::InvalidInput("patch set is empty".into()));
        }
        let len = patch_side * patch_side;
        if patches.iter().any(|p| p.len() != len) {
            return Err(PsdError::InvalidInput(format!(
                "all patches must have length {len} (side {patch_side})"
            )));
        }
        if !origins.is_empty() && origins.len() != patches.len() {
            return Err(PsdError::InvalidInput(
                "origin count must match patch count".into(),
            ));
        }
        Ok(PatchSet {
            patches,
            patch_side,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Parse a binary PGM (`P5`) with maxval <= 255. Pixels map to [0, 1] as
/// value / maxval. Header comments (`#` to end of line) are skipped.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PsdError::Parse {
            offset: 0,
            message: "expected magic 'P5'".into(),
        });
    }
    let mut pos = 2;
    let width = parse_header_int(bytes, &mut pos)?;
    let height = parse_header_int(bytes, &mut pos)?;
    let maxval_offset = skip_separators(bytes, pos);
    let maxval = parse_header_int(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(PsdError::Parse {
            offset: maxval_offset,
            message: format!("maxval {maxval} out of range 1..=255"),
        });
    }
    if width == 0 || height == 0 {
        return Err(PsdError::Parse {
            offset: 2,
            message: format!("degenerate dimensions {width}x{height}"),
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PsdError::Parse {
            offset: pos,
            message: "expected single whitespace before pixel data".into(),
        });
    }
    pos += 1;
    let expected = width.checked_mul(height).ok_or_else(|| PsdError::Parse {
        offset: 2,
        message: "dimension overflow".into(),
    })?;
    let actual = bytes.len() - pos;
    if actual < expected {
        return Err(PsdError::Parse {
            offset: pos,
            message: format!("truncated pixel data: expected {expected} bytes, found {actual}"),
        });
    }
    if actual > expected {
        return Err(PsdError::Parse {
            offset: pos + expected,
            message: format!("{} trailing bytes after pixel data", actual - expected),
        });
    }
    let scale = 1.0 / maxval as f64;
    let pixels = Array2::from_shape_fn((height, width), |(r, c)| {
        bytes[pos + r * width + c] as f64 * scale
    });
    GrayImage::new(pixels)
}

fn skip_separators(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn parse_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let start = skip_separators(bytes, *pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(PsdError::Parse {
            offset: start,
            message: "expected unsigned integer".into(),
        });
    }
    let mut value: usize = 0;
    for &b in &bytes[start..end] {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| PsdError::Parse {
                offset: start,
                message: "integer overflow".into(),
            })?;
    }
    *pos = end;
    Ok(value)
}

/// Draw `count` k x k patches from seeded uniform top-left positions (with
/// replacement), flattened row-major.
pub fn extract_patches(img: &GrayImage, k: usize, count: usize, seed: u64) -> Result<PatchSet> {
    if k == 0 || k > img.height().min(img.width()) {
        return Err(PsdError::SizeLimit(format!(
            "patch side {k} does not fit image {}x{}",
            img.height(),
            img.width()
        )));
    }
    if count == 0 {
        return Err(PsdError::InvalidParameter(
            "patch count must be >= 1".into(),
        ));
    }
    let rows = img.height() - k + 1;
    let cols = img.width() - k + 1;
    let mut rng = Rng::new(seed);
    let mut patches = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for _ in 0..count {
        let r0 = rng.below(rows);
        let c0 = rng.below(cols);
        let mut values = Vec::with_capacity(k * k);
        for r in 0..k {
            for c in 0..k {
                values.push(img.pixels[[r0 + r, c0 + c]]);
            }
        }
        patches.push(Signal::from_vec(values)?);
        origins.push(PatchOrigin {
            image: 0,
            row: r0,
            col: c0,
        });
    }
    PatchSet::new(patches, k, origins)
}

/// Zero-mean, unit population-standard-deviation normalization. A patch with
/// std below 1e-8 carries no signal and maps to the zero vector.
pub fn normalize_patch(p: &Signal) -> Signal {
    let n = p.len();
    let mean = p.values().sum() / n as f64;
    let var = p.values().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if n < 2 || std < 1e-8 {
        return Signal::new(Array1::zeros(n)).expect("zero vector is a valid signal");
    }
    Signal::new(p.values().mapv(|x| (x - mean) / std)).expect("normalized patch is finite")
}

/// Sampled Gaussian on an odd side x side integer grid centered at 0,
/// normalized to sum 1.
pub fn gaussian_window(side: usize, sigma: f64) -> Result<Array2<f64>> {
    if side == 0 || side.is_multiple_of(2) {
        return Err(PsdError::InvalidParameter(format!(
            "window side must be odd, got {side}"
        )));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(PsdError::InvalidParameter(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let half = (side / 2) as isize;
    let mut w = Array2::zeros((side, side));
    let mut total = 0.0;
    for r in 0..side {
        for c in 0..side {
            let x = r as isize - half;
            let y = c as isize - half;
            let v = (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp();
            w[[r, c]] = v;
            total += v;
        }
    }
    w.mapv_inplace(|v| v / total);
    Ok(w)
}

/// Separable weighted local average with border renormalization: at each
/// pixel the window weights falling inside the image are rescaled to sum 1.
/// `kernel` is the 1-D factor of the (outer-product) window, summing to 1.
fn local_weighted_mean(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let half = kernel.len() / 2;
    // row pass: numerator and in-bounds weight sums
    let mut num = Array2::zeros((h, w));
    let mut den_r = vec![0.0; h];
    for (r, den) in den_r.iter_mut().enumerate() {
        let mut wsum = 0.0;
        for (t, &kv) in kernel.iter().enumerate() {
            let rr = r as isize + t as isize - half as isize;
            if rr >= 0 && (rr as usize) < h {
                wsum += kv;
            }
        }
        *den = wsum;
    }
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let rr = r as isize + t as isize - half as isize;
                if rr >= 0 && (rr as usize) < h {
                    acc += kv * img[[rr as usize, c]];
                }
            }
            num[[r, c]] = acc;
        }
    }
    // column pass
    let mut den_c = vec![0.0; w];
    for (c, den) in den_c.iter_mut().enumerate() {
        let mut wsum = 0.0;
        for (t, &kv) in kernel.iter().enumerate() {
            let cc = c as isize + t as isize - half as isize;
            if cc >= 0 && (cc as usize) < w {
                wsum += kv;
            }
        }
        *den = wsum;
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let cc = c as isize + t as isize - half as isize;
                if cc >= 0 && (cc as usize) < w {
                    acc += kv * num[[r, cc as usize]];
                }
            }
            out[[r, c]] = acc / (den_r[r] * den_c[c]);
        }
    }
    out
}

/// 1-D factor of [`gaussian_window`]: the window is the outer product of
/// this kernel with itself.
fn gaussian_kernel_1d(side: usize, sigma: f64) -> Vec<f64> {
    let half = (side / 2) as isize;
    let mut k: Vec<f64> = (0..side)
        .map(|i| {
            let x = (i as isize - half) as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Local contrast normalization: subtract the Gaussian-weighted local mean,
/// then divide by the Gaussian-weighted local norm where that norm exceeds 1.
pub fn local_contrast_normalize(img: &GrayImage, side: usize, sigma: f64) -> Result<GrayImage> {
    if side == 0 || side.is_multiple_of(2) {
        return Err(PsdError::InvalidParameter(format!(
            "window side must be odd, got {side}"
        )));
    }
    let kernel = gaussian_kernel_1d(side, sigma);
    let mean = local_weighted_mean(img.pixels(), &kernel);
    let v = img.pixels() - &mean;
    let vsq = v.mapv(|x| x * x);
    let norm = local_weighted_mean(&vsq, &kernel).mapv(f64::sqrt);
    let out = ndarray::Zip::from(&v)
        .and(&norm)
        .map_collect(|&v, &d| v / d.max(1.0));
    GrayImage::new(out)
}

/// Bilinear resize to the given dimensions (pixel-center sampling, edges
/// clamped).
pub fn bilinear_resize(img: &GrayImage, new_h: usize, new_w: usize) -> Result<GrayImage> {
    if new_h == 0 || new_w == 0 {
        return Err(PsdError::InvalidParameter(
            "resize target must be at least 1x1".into(),
        ));
    }
    let (h, w) = img.pixels.dim();
    let out = Array2::from_shape_fn((new_h, new_w), |(i, j)| {
        let y = ((i as f64 + 0.5) * h as f64 / new_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let x = ((j as f64 + 0.5) * w as f64 / new_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        img.pixels[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + img.pixels[[y0, x1]] * (1.0 - fy) * fx
            + img.pixels[[y1, x0]] * fy * (1.0 - fx)
            + img.pixels[[y1, x1]] * fy * fx
    });
    GrayImage::new(out)
}

/// Recognition preprocessing: resize so the longest side equals `long_side`,
/// standardize globally, locally contrast-normalize with the 9x9 Gaussian
/// window, then center the result in a `pad_to` x `pad_to` zero canvas
/// (cropping centrally in any dimension that exceeds the canvas).
pub fn preprocess_recognition(
    img: &GrayImage,
    long_side: usize,
    pad_to: usize,
) -> Result<GrayImage> {
    if long_side == 0 || pad_to == 0 {
        return Err(PsdError::InvalidParameter(
            "long_side and pad_to must be >= 1".into(),
        ));
    }
    // step 2: aspect-preserving resize
    let (h, w) = img.pixels.dim();
    let scale = long_side as f64 / h.max(w) as f64;
    let (new_h, new_w) = if h >= w {
        (long_side, ((w as f64 * scale).round() as usize).max(1))
    } else {
        (((h as f64 * scale).round() as usize).max(1), long_side)
    };
    let resized = bilinear_resize(img, new_h, new_w)?;

    // step 3: global standardization; a flat image (std under the 1e-8
    // floor) carries no signal and collapses to zero like degenerate patches
    let count = (new_h * new_w) as f64;
    let mean = resized.pixels().sum() / count;
    let var = resized
        .pixels()
        .iter()
        .map(|p| (p - mean).powi(2))
        .sum::<f64>()
        / count;
    let std = var.sqrt();
    let standardized = if std < 1e-8 {
        GrayImage::new(Array2::zeros((new_h, new_w)))?
    } else {
        GrayImage::new(resized.pixels().mapv(|p| (p - mean) / std))?
    };

    // step 4: local contrast normalization
    let lcn = local_contrast_normalize(&standardized, DEFAULT_LCN_SIDE, DEFAULT_LCN_SIGMA)?;

    // step 5: center in a zero canvas, cropping where the image is larger
    let mut canvas = Array2::zeros((pad_to, pad_to));
    let (src_h, src_w) = lcn.pixels().dim();
    let copy_h = src_h.min(pad_to);
    let copy_w = src_w.min(pad_to);
    let src_r0 = (src_h - copy_h) / 2;
    let src_c0 = (src_w - copy_w) / 2;
    let dst_r0 = (pad_to - copy_h) / 2;
    let dst_c0 = (pad_to - copy_w) / 2;
    for r in 0..copy_h {
        for c in 0..copy_w {
            canvas[[dst_r0 + r, dst_c0 + c]] = lcn.pixels()[[src_r0 + r, src_c0 + c]];
        }
    }
    GrayImage::new(canvas)
}
