//! Command implementations. Each returns `Ok(())` on success; errors carry
//! the exit code policy (1 validation / I-O, 2 numerical).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use psd_core::data::{
    extract_patches, load_pgm, normalize_patch, preprocess_recognition, GrayImage,
};
use psd_core::eval::{
    abs_rectify, avg_downsample, avg_l1, bench_inference, calibrate_threshold,
    encode_convolutional, sign_transition_matrix, snr_report, train_linear_classifier, CodeSet,
    ConvEncoder, STATE_LABELS,
};
use psd_core::io::{read_model, read_tensor, write_model, write_tensor};
use psd_core::model::{Code, Dictionary, Hyperparams, Predictor, Signal};
use psd_core::rng::Rng;
use psd_core::solvers::{infer_approx, infer_optimal, solve_bpdn_cd, SolveOptions, StepRule};
use psd_core::training::{train_with_progress, ProgressRow, TrainConfig};

use crate::config::ExperimentConfig;
use crate::report::{fmt_f64, write_atomic, write_report, JsonValue};
use crate::{CliError, EncodeMethod, FeatureMethod};

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<(Dictionary, Predictor), CliError> {
    let bytes = read_file(path)?;
    read_model(&bytes).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// Load a rank-2 patch/code tensor as signals. Errors name the offending
/// dimension.
fn load_signal_matrix(path: &Path, what: &str) -> Result<Vec<Signal>, CliError> {
    let bytes = read_file(path)?;
    let (dims, data) = read_tensor(&bytes)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if dims.len() != 2 {
        return Err(CliError::validation(format!(
            "{}: expected a rank-2 {what} tensor, got rank {}",
            path.display(),
            dims.len()
        )));
    }
    let (count, len) = (dims[0] as usize, dims[1] as usize);
    if count == 0 || len == 0 {
        return Err(CliError::validation(format!(
            "{}: empty {what} tensor ({count}x{len})",
            path.display()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let slice = &data[i * len..(i + 1) * len];
        out.push(
            Signal::from_vec(slice.to_vec())
                .map_err(|e| CliError::validation(format!("{} row {i}: {e}", path.display())))?,
        );
    }
    Ok(out)
}

fn load_code_set(path: &Path) -> Result<CodeSet, CliError> {
    let signals = load_signal_matrix(path, "code")?;
    let codes: Vec<Code> = signals
        .into_iter()
        .map(|s| Code::new(s.values().clone()).expect("validated above"))
        .collect();
    CodeSet::new(codes).map_err(CliError::from)
}

fn signals_to_tensor(signals: &[Signal]) -> Result<Vec<u8>, CliError> {
    let count = signals.len();
    let len = signals[0].len();
    let mut data = Vec::with_capacity(count * len);
    for s in signals {
        data.extend(s.values().iter());
    }
    write_tensor(&[count as u32, len as u32], &data).map_err(CliError::from)
}

fn codes_to_tensor(codes: &[Code]) -> Result<Vec<u8>, CliError> {
    let count = codes.len();
    let len = codes[0].len();
    let mut data = Vec::with_capacity(count * len);
    for c in codes {
        data.extend(c.values().iter());
    }
    write_tensor(&[count as u32, len as u32], &data).map_err(CliError::from)
}

fn solver_opts(cfg: &ExperimentConfig) -> Result<SolveOptions, CliError> {
    SolveOptions::new(cfg.tol()?, cfg.max_iter()?, StepRule::FixedLipschitz).map_err(CliError::from)
}

fn hyperparams(cfg: &ExperimentConfig) -> Result<Hyperparams, CliError> {
    Hyperparams::new(cfg.lambda()?, cfg.alpha()?, cfg.eta()?, cfg.mode()?).map_err(CliError::from)
}

/// Extract normalized training patches from PGM images, splitting the total
/// count as evenly as possible and deriving one seed stream per image.
fn patches_from_images(
    images: &[PathBuf],
    patch_side: usize,
    total: usize,
    seed: u64,
    normalize: bool,
) -> Result<Vec<Signal>, CliError> {
    if total == 0 {
        return Err(CliError::validation("patch_count must be >= 1".into()));
    }
    let per = total / images.len();
    let extra = total % images.len();
    let mut out = Vec::with_capacity(total);
    for (i, path) in images.iter().enumerate() {
        let img = load_pgm(&read_file(path)?)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let count = per + usize::from(i < extra);
        if count == 0 {
            continue;
        }
        let image_seed = Rng::new(seed)
            .fork(0x1A6_u64.wrapping_add(i as u64))
            .next_u64();
        let set = extract_patches(&img, patch_side, count, image_seed)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        for p in &set.patches {
            out.push(if normalize {
                normalize_patch(p)
            } else {
                p.clone()
            });
        }
    }
    Ok(out)
}

pub fn cmd_train(
    config: &Path,
    inputs: &[PathBuf],
    output: &Path,
    log: Option<&Path>,
    log_every: usize,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let n = cfg.n()?;
    let hyper = hyperparams(&cfg)?;
    let train_cfg = TrainConfig::new(
        hyper,
        cfg.m()?,
        cfg.epochs()?,
        cfg.seed()?,
        solver_opts(&cfg)?,
        cfg.eta_decay()?,
        cfg.eta_floor()?,
    )?;

    let patches: Vec<Signal> =
        if inputs.len() == 1 && inputs[0].extension().is_some_and(|e| e == "tnsr") {
            load_signal_matrix(&inputs[0], "patch")?
        } else {
            patches_from_images(
                inputs,
                cfg.patch_side()?,
                cfg.patch_count()?,
                cfg.seed()?,
                true,
            )?
        };
    if patches.is_empty() {
        return Err(CliError::validation("no training patches".into()));
    }
    if patches[0].len() != n {
        return Err(CliError::validation(format!(
            "patch length {} does not match config n = {n}",
            patches[0].len()
        )));
    }

    let mut rows: Vec<ProgressRow> = Vec::new();
    let state = train_with_progress(&patches, &train_cfg, log_every, |r| rows.push(*r))?;

    let model_bytes = write_model(&state.dict, &state.pred)?;
    write_atomic(output, &model_bytes)?;

    if let Some(log_path) = log {
        let mut csv = String::from("samples,avg_loss,avg_l1,eta\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.samples,
                fmt_f64(r.avg_loss),
                fmt_f64(r.avg_l1),
                fmt_f64(r.eta)
            ));
        }
        write_atomic(log_path, csv.as_bytes())?;
    }
    println!(
        "trained {} samples ({} patches x {} epochs); model written to {}",
        state.samples_seen,
        patches.len(),
        train_cfg.epochs,
        output.display()
    );
    Ok(())
}

pub fn cmd_patches(
    config: &Path,
    images: &[PathBuf],
    output: &Path,
    raw: bool,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let patches = patches_from_images(
        images,
        cfg.patch_side()?,
        cfg.patch_count()?,
        cfg.seed()?,
        !raw,
    )?;
    write_atomic(output, &signals_to_tensor(&patches)?)?;
    println!(
        "wrote {} patches of length {} to {}",
        patches.len(),
        patches[0].len(),
        output.display()
    );
    Ok(())
}

pub fn cmd_encode(
    model: &Path,
    patches: &Path,
    method: EncodeMethod,
    config: Option<&Path>,
    output: &Path,
) -> Result<(), CliError> {
    let (dict, pred) = load_model(model)?;
    let signals = load_signal_matrix(patches, "patch")?;
    if signals[0].len() != dict.signal_dim() {
        return Err(CliError::validation(format!(
            "patch length {} does not match model input size {}",
            signals[0].len(),
            dict.signal_dim()
        )));
    }

    let need_config = || {
        config
            .map(ExperimentConfig::load)
            .transpose()?
            .ok_or_else(|| {
                CliError::validation(format!(
                    "--config is required for method `{}`",
                    method.as_str()
                ))
            })
    };

    let codes: Vec<Code> = match method {
        EncodeMethod::Approx => signals
            .iter()
            .map(|y| infer_approx(y, &pred))
            .collect::<Result<_, _>>()
            .map_err(CliError::from)?,
        EncodeMethod::Optimal => {
            let cfg = need_config()?;
            let h = hyperparams(&cfg)?;
            let opts = solver_opts(&cfg)?;
            signals
                .iter()
                .map(|y| infer_optimal(y, &dict, &pred, &h, &opts).map(|r| r.code))
                .collect::<Result<_, _>>()
                .map_err(CliError::from)?
        }
        EncodeMethod::ExactCd => {
            let cfg = need_config()?;
            let lambda = cfg.lambda()?;
            let opts = solver_opts(&cfg)?;
            signals
                .iter()
                .map(|y| solve_bpdn_cd(y, &dict, lambda, &opts).map(|r| r.code))
                .collect::<Result<_, _>>()
                .map_err(CliError::from)?
        }
    };
    write_atomic(output, &codes_to_tensor(&codes)?)?;
    println!(
        "encoded {} patches to {}-dimensional codes: {}",
        codes.len(),
        codes[0].len(),
        output.display()
    );
    Ok(())
}

pub fn cmd_eval_snr(reference: &Path, approximation: &Path, output: &Path) -> Result<(), CliError> {
    let r = load_code_set(reference)?;
    let a = load_code_set(approximation)?;
    let rep = snr_report(&r, &a)?;
    let csv = format!(
        "pairs,excluded_zero_noise,mean_snr_db,pooled_snr_db\n{},{},{},{}\n",
        rep.pairs,
        rep.excluded_zero_noise,
        fmt_f64(rep.mean_snr_db),
        fmt_f64(rep.pooled_snr_db)
    );
    write_report(
        output,
        &csv,
        &[
            ("pairs", JsonValue::Int(rep.pairs as u64)),
            (
                "excluded_zero_noise",
                JsonValue::Int(rep.excluded_zero_noise as u64),
            ),
            ("mean_snr_db", JsonValue::Num(rep.mean_snr_db)),
            ("pooled_snr_db", JsonValue::Num(rep.pooled_snr_db)),
        ],
    )?;
    println!(
        "mean SNR {} dB over {} pairs -> {}",
        fmt_f64(rep.mean_snr_db),
        rep.pairs,
        output.display()
    );
    Ok(())
}

pub fn cmd_eval_sparsity(codes: &Path, output: &Path) -> Result<(), CliError> {
    let set = load_code_set(codes)?;
    let value = avg_l1(&set);
    let csv = format!(
        "codes,code_size,avg_l1\n{},{},{}\n",
        set.len(),
        set.code_dim(),
        fmt_f64(value)
    );
    write_report(
        output,
        &csv,
        &[
            ("codes", JsonValue::Int(set.len() as u64)),
            ("code_size", JsonValue::Int(set.code_dim() as u64)),
            ("avg_l1", JsonValue::Num(value)),
        ],
    )?;
    println!(
        "average l1 {} over {} codes -> {}",
        fmt_f64(value),
        set.len(),
        output.display()
    );
    Ok(())
}

/// Threshold used for exact-solver codes, whose zeros are exact.
const EXACT_ZERO_THRESHOLD: f64 = 1e-12;

pub fn cmd_eval_stability(
    frames_dir: &Path,
    exact: bool,
    target_zero_fraction: Option<f64>,
    output: &Path,
) -> Result<(), CliError> {
    let mut frame_paths: Vec<PathBuf> = std::fs::read_dir(frames_dir)
        .map_err(|e| CliError::validation(format!("cannot list {}: {e}", frames_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tnsr"))
        .collect();
    frame_paths.sort();
    if frame_paths.len() < 2 {
        return Err(CliError::validation(format!(
            "{}: need at least 2 frame tensors, found {}",
            frames_dir.display(),
            frame_paths.len()
        )));
    }
    let frames: Vec<CodeSet> = frame_paths
        .iter()
        .map(|p| load_code_set(p))
        .collect::<Result<_, _>>()?;

    let threshold = if exact {
        EXACT_ZERO_THRESHOLD
    } else {
        let target = target_zero_fraction.ok_or_else(|| {
            CliError::validation(
                "--target-zero-fraction is required unless --exact is given".into(),
            )
        })?;
        let pooled: Vec<Code> = frames.iter().flat_map(|f| f.codes().to_vec()).collect();
        calibrate_threshold(&CodeSet::new(pooled)?, target)?
    };

    let stats = sign_transition_matrix(&frames, threshold)?;
    let zero_fraction = {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for f in &frames {
            for c in f.codes() {
                zeros += c.values().iter().filter(|z| z.abs() <= threshold).count();
                total += c.len();
            }
        }
        zeros as f64 / total as f64
    };

    let mut csv = String::from("prev,p_to_neg,p_to_zero,p_to_pos,n_to_neg,n_to_zero,n_to_pos\n");
    for (i, label) in STATE_LABELS.iter().enumerate() {
        csv.push_str(&format!(
            "{label},{},{},{},{},{},{}\n",
            fmt_f64(stats.probs[i][0]),
            fmt_f64(stats.probs[i][1]),
            fmt_f64(stats.probs[i][2]),
            stats.counts[i][0],
            stats.counts[i][1],
            stats.counts[i][2],
        ));
    }
    let probs_flat: Vec<f64> = stats.probs.iter().flatten().copied().collect();
    write_report(
        output,
        &csv,
        &[
            ("frames", JsonValue::Int(frames.len() as u64)),
            (
                "thresholding",
                JsonValue::Str(if exact {
                    "exact".into()
                } else {
                    "calibrated".into()
                }),
            ),
            ("threshold", JsonValue::Num(threshold)),
            ("zero_fraction", JsonValue::Num(zero_fraction)),
            (
                "change_probability",
                JsonValue::Num(stats.change_probability()),
            ),
            ("probs_row_major", JsonValue::NumList(probs_flat)),
        ],
    )?;
    println!(
        "P(state change) {} at threshold {} (zero fraction {}) -> {}",
        fmt_f64(stats.change_probability()),
        fmt_f64(threshold),
        fmt_f64(zero_fraction),
        output.display()
    );
    Ok(())
}

pub fn cmd_eval_bench(
    model: &Path,
    patches: &Path,
    config: &Path,
    repetitions: usize,
    include_optimal: bool,
    output: &Path,
) -> Result<(), CliError> {
    let (dict, pred) = load_model(model)?;
    let signals = load_signal_matrix(patches, "patch")?;
    let cfg = ExperimentConfig::load(config)?;
    let h = hyperparams(&cfg)?;
    let opts = solver_opts(&cfg)?;
    let report = bench_inference(
        &signals,
        &dict,
        &pred,
        &h,
        &opts,
        repetitions,
        include_optimal,
    )?;

    let mut csv =
        String::from("repetition,approx_s,exact_cd_s,optimal_s,speedup_approx_vs_exact\n");
    for i in 0..report.repetitions {
        let optimal = report
            .optimal
            .as_ref()
            .map(|t| fmt_f64(t.times_s[i]))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            fmt_f64(report.approx.times_s[i]),
            fmt_f64(report.exact_cd.times_s[i]),
            optimal,
            fmt_f64(report.speedup_approx_vs_exact)
        ));
    }
    let mut fields = vec![
        ("batch", JsonValue::Int(report.batch as u64)),
        ("signal_dim", JsonValue::Int(report.signal_dim as u64)),
        ("code_dim", JsonValue::Int(report.code_dim as u64)),
        ("repetitions", JsonValue::Int(report.repetitions as u64)),
        ("approx_median_s", JsonValue::Num(report.approx.median_s)),
        ("approx_mean_s", JsonValue::Num(report.approx.mean_s)),
        ("approx_std_s", JsonValue::Num(report.approx.std_s)),
        (
            "exact_cd_median_s",
            JsonValue::Num(report.exact_cd.median_s),
        ),
        ("exact_cd_mean_s", JsonValue::Num(report.exact_cd.mean_s)),
        ("exact_cd_std_s", JsonValue::Num(report.exact_cd.std_s)),
        (
            "speedup_approx_vs_exact",
            JsonValue::Num(report.speedup_approx_vs_exact),
        ),
    ];
    if let Some(o) = &report.optimal {
        fields.push(("optimal_median_s", JsonValue::Num(o.median_s)));
    }
    write_report(output, &csv, &fields)?;
    println!(
        "speedup (exact cd / approx, medians): {:.1}x -> {}",
        report.speedup_approx_vs_exact,
        output.display()
    );
    Ok(())
}

fn load_image_any(path: &Path) -> Result<GrayImage, CliError> {
    if path.extension().is_some_and(|e| e == "tnsr") {
        let bytes = read_file(path)?;
        let (dims, data) = read_tensor(&bytes)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        if dims.len() != 2 {
            return Err(CliError::validation(format!(
                "{}: expected a rank-2 image tensor, got rank {}",
                path.display(),
                dims.len()
            )));
        }
        let arr = Array2::from_shape_vec((dims[0] as usize, dims[1] as usize), data)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        GrayImage::new(arr).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    } else {
        load_pgm(&read_file(path)?)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval_features(
    model: &Path,
    images: &[PathBuf],
    method: FeatureMethod,
    config: Option<&Path>,
    k: usize,
    out_h: usize,
    out_w: usize,
    output: &Path,
    labels: Option<&Path>,
    train_fraction: f64,
    l2: f64,
    epochs: usize,
    seed: u64,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let (dict, pred) = load_model(model)?;
    let exact_params = match method {
        FeatureMethod::Approx => None,
        FeatureMethod::ExactCd => {
            let cfg = config
                .map(ExperimentConfig::load)
                .transpose()?
                .ok_or_else(|| {
                    CliError::validation("--config is required for method `exact-cd`".into())
                })?;
            Some((cfg.lambda()?, solver_opts(&cfg)?))
        }
    };

    let m = dict.code_dim();
    let mut all = Vec::with_capacity(images.len() * m * out_h * out_w);
    for path in images {
        let img = load_image_any(path)?;
        let encoder = match &exact_params {
            None => ConvEncoder::Approx(&pred),
            Some((lambda, opts)) => ConvEncoder::Exact {
                dict: &dict,
                lambda: *lambda,
                opts: *opts,
            },
        };
        let maps = encode_convolutional(&img, &encoder, k)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let pooled = avg_downsample(&abs_rectify(&maps), out_h, out_w)?;
        all.extend(pooled.iter());
    }
    write_atomic(
        output,
        &write_tensor(
            &[images.len() as u32, m as u32, out_h as u32, out_w as u32],
            &all,
        )?,
    )?;
    println!(
        "wrote {} feature tensors of {}x{}x{} to {}",
        images.len(),
        m,
        out_h,
        out_w,
        output.display()
    );

    if let Some(labels_path) = labels {
        let report_path = report.ok_or_else(|| {
            CliError::validation("--report is required when --labels is given".into())
        })?;
        let text = std::fs::read_to_string(labels_path).map_err(|e| {
            CliError::validation(format!("cannot read {}: {e}", labels_path.display()))
        })?;
        let label_list: Vec<usize> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim().parse::<usize>().map_err(|_| {
                    CliError::validation(format!("label line `{l}` is not a class id"))
                })
            })
            .collect::<Result<_, _>>()?;
        if label_list.len() != images.len() {
            return Err(CliError::validation(format!(
                "{} labels for {} images",
                label_list.len(),
                images.len()
            )));
        }
        if !(0.0 < train_fraction && train_fraction < 1.0) {
            return Err(CliError::validation(
                "--train-fraction must be in (0, 1)".into(),
            ));
        }
        let dim = m * out_h * out_w;
        let features =
            Array2::from_shape_vec((images.len(), dim), all).expect("feature buffer matches dims");
        let mut order: Vec<usize> = (0..images.len()).collect();
        Rng::new(seed).shuffle(&mut order);
        let train_count = ((images.len() as f64) * train_fraction).ceil() as usize;
        let (train_idx, test_idx) = order.split_at(train_count.clamp(1, images.len() - 1));
        let gather = |idx: &[usize]| -> (Array2<f64>, Vec<usize>) {
            let mut x = Array2::zeros((idx.len(), dim));
            let mut y = Vec::with_capacity(idx.len());
            for (row, &i) in idx.iter().enumerate() {
                x.row_mut(row).assign(&features.row(i));
                y.push(label_list[i]);
            }
            (x, y)
        };
        let (x_train, y_train) = gather(train_idx);
        let (x_test, y_test) = gather(test_idx);
        let clf = train_linear_classifier(&x_train, &y_train, l2, epochs, seed)?;
        let train_acc = clf.accuracy(&x_train, &y_train);
        let test_acc = clf.accuracy(&x_test, &y_test);
        let csv = format!(
            "train_samples,test_samples,classes,train_accuracy,test_accuracy\n{},{},{},{},{}\n",
            y_train.len(),
            y_test.len(),
            clf.n_classes(),
            fmt_f64(train_acc),
            fmt_f64(test_acc)
        );
        write_report(
            report_path,
            &csv,
            &[
                ("train_samples", JsonValue::Int(y_train.len() as u64)),
                ("test_samples", JsonValue::Int(y_test.len() as u64)),
                ("classes", JsonValue::Int(clf.n_classes() as u64)),
                ("train_accuracy", JsonValue::Num(train_acc)),
                ("test_accuracy", JsonValue::Num(test_acc)),
            ],
        )?;
        println!(
            "classifier: train accuracy {}, test accuracy {} -> {}",
            fmt_f64(train_acc),
            fmt_f64(test_acc),
            report_path.display()
        );
    }
    Ok(())
}

pub fn cmd_preprocess(
    input: &Path,
    output: &Path,
    long_side: usize,
    pad_to: usize,
) -> Result<(), CliError> {
    let img = load_pgm(&read_file(input)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", input.display())))?;
    let processed = preprocess_recognition(&img, long_side, pad_to)?;
    let data: Vec<f64> = processed.pixels().iter().copied().collect();
    write_atomic(
        output,
        &write_tensor(
            &[processed.height() as u32, processed.width() as u32],
            &data,
        )?,
    )?;
    println!(
        "preprocessed {} -> {}x{} tensor {}",
        input.display(),
        processed.height(),
        processed.width(),
        output.display()
    );
    Ok(())
}
