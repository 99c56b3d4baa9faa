//! End-to-end tests driving the `psd` binary: exit codes, determinism,
//! format fidelity, and report consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use psd_core::io::{read_model, read_tensor, write_tensor};
use psd_core::model::Signal;
use psd_core::rng::Rng;
use psd_core::solvers::{infer_approx, solve_oracle, OracleObjective};

static DIR_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn temp_dir(tag: &str) -> PathBuf {
    let id = DIR_COUNTER.fetch_add(1, Ordering::SeqCst);
    let dir = std::env::temp_dir().join(format!("psd-cli-test-{}-{tag}-{id}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn psd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_pgm(path: &Path, h: usize, w: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for _ in 0..h * w {
        bytes.push((rng.below(256)) as u8);
    }
    std::fs::write(path, bytes).unwrap();
}

fn write_config(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const TRAIN_CONFIG: &str = "\
n = 9\n\
m = 8\n\
lambda = 0.3\n\
alpha = 1.0\n\
eta = 0.02\n\
epochs = 2\n\
seed = 11\n\
patch_side = 3\n\
patch_count = 150\n\
tol = 1e-7\n\
max_iter = 200\n";

#[test]
fn help_exits_zero_everywhere() {
    for args in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["patches", "--help"],
        vec!["encode", "--help"],
        vec!["eval", "--help"],
        vec!["eval", "snr", "--help"],
        vec!["eval", "sparsity", "--help"],
        vec!["eval", "stability", "--help"],
        vec!["eval", "bench", "--help"],
        vec!["eval", "features", "--help"],
        vec!["preprocess", "--help"],
    ] {
        let out = psd(&args);
        assert_exit(&out, 0);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("Usage"), "no usage text for {args:?}");
    }
}

#[test]
fn missing_config_key_names_it() {
    let dir = temp_dir("missing-key");
    let cfg = dir.join("exp.cfg");
    write_config(
        &cfg,
        "n = 9\nm = 8\nepochs = 1\nseed = 1\npatch_side = 3\npatch_count = 10\n",
    );
    let img = dir.join("a.pgm");
    write_pgm(&img, 16, 16, 5);
    let model = dir.join("model.psd1");
    let out = psd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        model.to_str().unwrap(),
        img.to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lambda"), "stderr: {stderr}");
    assert!(!model.exists(), "no partial model file may remain");
}

#[test]
fn zero_epochs_rejected() {
    let dir = temp_dir("epochs");
    let cfg = dir.join("exp.cfg");
    write_config(&cfg, &TRAIN_CONFIG.replace("epochs = 2", "epochs = 0"));
    let img = dir.join("a.pgm");
    write_pgm(&img, 16, 16, 5);
    let out = psd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        dir.join("m.psd1").to_str().unwrap(),
        img.to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epochs"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_rejected() {
    let dir = temp_dir("unknown-key");
    let cfg = dir.join("exp.cfg");
    write_config(&cfg, &format!("{TRAIN_CONFIG}verbosity = 3\n"));
    let img = dir.join("a.pgm");
    write_pgm(&img, 16, 16, 5);
    let out = psd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        dir.join("m.psd1").to_str().unwrap(),
        img.to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("verbosity"));
}

#[test]
fn train_is_byte_deterministic_and_logs() {
    let dir = temp_dir("determinism");
    let cfg = dir.join("exp.cfg");
    write_config(&cfg, TRAIN_CONFIG);
    for (i, seed) in [(0usize, 21u64), (1, 21)] {
        let img = dir.join(format!("img{i}.pgm"));
        write_pgm(&img, 24, 24, seed);
    }
    let imgs: Vec<String> = (0..2)
        .map(|i| {
            dir.join(format!("img{i}.pgm"))
                .to_str()
                .unwrap()
                .to_string()
        })
        .collect();

    let run = |tag: &str| -> Vec<u8> {
        let model = dir.join(format!("model-{tag}.psd1"));
        let log = dir.join(format!("log-{tag}.csv"));
        let mut args = vec![
            "train".to_string(),
            "--config".into(),
            cfg.to_str().unwrap().into(),
            "--output".into(),
            model.to_str().unwrap().into(),
            "--log".into(),
            log.to_str().unwrap().into(),
            "--log-every".into(),
            "50".into(),
        ];
        args.extend(imgs.iter().cloned());
        let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = psd(&argrefs);
        assert_exit(&out, 0);
        let log_text = std::fs::read_to_string(&log).unwrap();
        assert!(log_text.starts_with("samples,avg_loss,avg_l1,eta\n"));
        assert!(log_text.lines().count() > 2);
        std::fs::read(&model).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(
        a, b,
        "same config and inputs must give byte-identical models"
    );
    // and the model parses
    read_model(&a).unwrap();
}

/// Build a tiny trained model plus a patch tensor; shared by the encode and
/// bench tests.
fn trained_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = dir.join("exp.cfg");
    write_config(&cfg, TRAIN_CONFIG);
    let img = dir.join("img.pgm");
    write_pgm(&img, 32, 32, 77);
    let model = dir.join("model.psd1");
    let out = psd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        model.to_str().unwrap(),
        img.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    let patches = dir.join("patches.tnsr");
    let out = psd(&[
        "patches",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        patches.to_str().unwrap(),
        img.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    (cfg, model, patches)
}

#[test]
fn encode_approx_matches_library_bits() {
    let dir = temp_dir("encode-approx");
    let (_cfg, model, patches) = trained_fixture(&dir);
    let codes = dir.join("codes.tnsr");
    let out = psd(&[
        "encode",
        "--model",
        model.to_str().unwrap(),
        "--patches",
        patches.to_str().unwrap(),
        "--method",
        "approx",
        "--output",
        codes.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    let (_, pred) = read_model(&std::fs::read(&model).unwrap()).unwrap();
    let (pdims, pdata) = read_tensor(&std::fs::read(&patches).unwrap()).unwrap();
    let (cdims, cdata) = read_tensor(&std::fs::read(&codes).unwrap()).unwrap();
    assert_eq!(cdims[0], pdims[0]);
    assert_eq!(cdims[1], 8);
    let n = pdims[1] as usize;
    for i in 0..pdims[0] as usize {
        let y = Signal::from_vec(pdata[i * n..(i + 1) * n].to_vec()).unwrap();
        let expected = infer_approx(&y, &pred).unwrap();
        for (j, &v) in expected.values().iter().enumerate() {
            assert_eq!(
                v.to_bits(),
                cdata[i * 8 + j].to_bits(),
                "patch {i} unit {j}"
            );
        }
    }
}

#[test]
fn encode_exact_cd_matches_oracle() {
    let dir = temp_dir("encode-exact");
    let (_train_cfg, model, patches) = trained_fixture(&dir);
    // oracle-tight solver settings for the encode itself
    let cfg = dir.join("encode.cfg");
    write_config(
        &cfg,
        "n = 9\nm = 8\nlambda = 0.3\nseed = 11\nepochs = 1\ntol = 1e-300\nmax_iter = 200000\n",
    );
    let codes = dir.join("codes.tnsr");
    let out = psd(&[
        "encode",
        "--model",
        model.to_str().unwrap(),
        "--patches",
        patches.to_str().unwrap(),
        "--method",
        "exact-cd",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        codes.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    let (dict, _) = read_model(&std::fs::read(&model).unwrap()).unwrap();
    let (pdims, pdata) = read_tensor(&std::fs::read(&patches).unwrap()).unwrap();
    let (_, cdata) = read_tensor(&std::fs::read(&codes).unwrap()).unwrap();
    let n = pdims[1] as usize;
    // spot-check the first 10 patches against the enumeration oracle
    for i in 0..10.min(pdims[0] as usize) {
        let y = Signal::from_vec(pdata[i * n..(i + 1) * n].to_vec()).unwrap();
        let oracle = solve_oracle(&y, &dict, &OracleObjective::Bpdn { lambda: 0.3 }).unwrap();
        for j in 0..8 {
            let diff = (oracle.values()[j] - cdata[i * 8 + j]).abs();
            assert!(diff <= 1e-6, "patch {i} unit {j}: {diff}");
        }
    }
}

#[test]
fn encode_rejects_empty_and_mismatched_input() {
    let dir = temp_dir("encode-bad");
    let (_cfg, model, _) = trained_fixture(&dir);

    let empty = dir.join("empty.tnsr");
    std::fs::write(&empty, write_tensor(&[0, 9], &[]).unwrap()).unwrap();
    let out = psd(&[
        "encode",
        "--model",
        model.to_str().unwrap(),
        "--patches",
        empty.to_str().unwrap(),
        "--method",
        "approx",
        "--output",
        dir.join("c.tnsr").to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    let wrong = dir.join("wrong.tnsr");
    std::fs::write(&wrong, write_tensor(&[2, 5], &[0.1; 10]).unwrap()).unwrap();
    let out = psd(&[
        "encode",
        "--model",
        model.to_str().unwrap(),
        "--patches",
        wrong.to_str().unwrap(),
        "--method",
        "approx",
        "--output",
        dir.join("c.tnsr").to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains('5') && stderr.contains('9'),
        "must name both sizes: {stderr}"
    );

    // config-requiring method without config
    let (_, _, patches) = trained_fixture(&temp_dir("encode-noconfig"));
    let out = psd(&[
        "encode",
        "--model",
        model.to_str().unwrap(),
        "--patches",
        patches.to_str().unwrap(),
        "--method",
        "optimal",
        "--output",
        dir.join("c2.tnsr").to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
}

#[test]
fn snr_of_identical_sets_reports_infinity() {
    let dir = temp_dir("snr");
    let codes = dir.join("codes.tnsr");
    let mut rng = Rng::new(3);
    let data: Vec<f64> = (0..40).map(|_| rng.next_gaussian()).collect();
    std::fs::write(&codes, write_tensor(&[5, 8], &data).unwrap()).unwrap();
    let report = dir.join("snr.csv");
    let out = psd(&[
        "eval",
        "snr",
        "--reference",
        codes.to_str().unwrap(),
        "--approximation",
        codes.to_str().unwrap(),
        "--output",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("pairs,excluded_zero_noise,mean_snr_db,pooled_snr_db\n"));
    assert!(csv.contains("inf"), "csv: {csv}");
    let json = std::fs::read_to_string(dir.join("snr.json")).unwrap();
    assert!(json.contains("\"mean_snr_db\": \"inf\""), "json: {json}");
}

#[test]
fn sparsity_report_matches_hand_value() {
    let dir = temp_dir("sparsity");
    let codes = dir.join("codes.tnsr");
    std::fs::write(
        &codes,
        write_tensor(&[2, 3], &[1.0, -2.0, 0.0, 0.5, 0.5, -1.0]).unwrap(),
    )
    .unwrap();
    let report = dir.join("sparsity.csv");
    let out = psd(&[
        "eval",
        "sparsity",
        "--codes",
        codes.to_str().unwrap(),
        "--output",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    // l1 norms: 3 and 2 -> mean 2.5
    assert!(csv.contains("2,3,2.5"), "csv: {csv}");
}

#[test]
fn stability_identity_on_identical_frames() {
    let dir = temp_dir("stability");
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    let mut rng = Rng::new(9);
    let data: Vec<f64> = (0..60).map(|_| rng.next_gaussian()).collect();
    for i in 0..3 {
        std::fs::write(
            frames.join(format!("frame{i:03}.tnsr")),
            write_tensor(&[10, 6], &data).unwrap(),
        )
        .unwrap();
    }
    let report = dir.join("stability.csv");
    let out = psd(&[
        "eval",
        "stability",
        "--frames",
        frames.to_str().unwrap(),
        "--exact",
        "--output",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "prev,p_to_neg,p_to_zero,p_to_pos,n_to_neg,n_to_zero,n_to_pos"
    );
    // identical frames: every populated row is the identity
    assert!(lines[1].starts_with("-,1,0,0"), "{}", lines[1]);
    assert!(lines[3].starts_with("+,0,0,1"), "{}", lines[3]);
    let json = std::fs::read_to_string(dir.join("stability.json")).unwrap();
    assert!(json.contains("\"change_probability\": 0"), "json: {json}");
}

#[test]
fn bench_speedup_consistent_with_raw_columns() {
    let dir = temp_dir("bench");
    let (cfg, model, patches) = trained_fixture(&dir);
    let report = dir.join("bench.csv");
    let out = psd(&[
        "eval",
        "bench",
        "--model",
        model.to_str().unwrap(),
        "--patches",
        patches.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--repetitions",
        "3",
        "--output",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut approx = Vec::new();
    let mut exact = Vec::new();
    let mut speedup = None;
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        approx.push(cells[1].parse::<f64>().unwrap());
        exact.push(cells[2].parse::<f64>().unwrap());
        let s = cells[4].parse::<f64>().unwrap();
        if let Some(prev) = speedup {
            assert_eq!(prev, s, "speedup column must be constant");
        }
        speedup = Some(s);
    }
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let recomputed = median(exact) / median(approx);
    let reported = speedup.unwrap();
    assert!(
        (recomputed - reported).abs() <= 1e-9 * reported.abs(),
        "reported {reported} vs recomputed {recomputed}"
    );
}

#[test]
fn preprocess_emits_fixed_canvas() {
    let dir = temp_dir("preprocess");
    let img = dir.join("in.pgm");
    write_pgm(&img, 60, 45, 12);
    let out_path = dir.join("out.tnsr");
    let out = psd(&[
        "preprocess",
        "--input",
        img.to_str().unwrap(),
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let (dims, data) = read_tensor(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(dims, vec![143, 143]);
    assert!(data.iter().all(|v| v.is_finite()));
}

#[test]
fn features_pipeline_with_classifier_report() {
    let dir = temp_dir("features");
    let (_cfg, model, _) = trained_fixture(&dir);
    // four tiny images, two classes by different seeds
    let mut image_args = Vec::new();
    for i in 0..4 {
        let p = dir.join(format!("f{i}.pgm"));
        write_pgm(&p, 8, 8, 100 + i as u64);
        image_args.push(p.to_str().unwrap().to_string());
    }
    let labels = dir.join("labels.txt");
    std::fs::write(&labels, "0\n0\n1\n1\n").unwrap();
    let feats = dir.join("features.tnsr");
    let report = dir.join("clf.csv");
    let mut args = vec![
        "eval".to_string(),
        "features".into(),
        "--model".into(),
        model.to_str().unwrap().into(),
        "--method".into(),
        "approx".into(),
        "--k".into(),
        "3".into(),
        "--out-h".into(),
        "2".into(),
        "--out-w".into(),
        "2".into(),
        "--output".into(),
        feats.to_str().unwrap().into(),
        "--labels".into(),
        labels.to_str().unwrap().into(),
        "--train-fraction".into(),
        "0.5".into(),
        "--report".into(),
        report.to_str().unwrap().into(),
    ];
    args.extend(image_args);
    let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = psd(&argrefs);
    assert_exit(&out, 0);
    let (dims, _) = read_tensor(&std::fs::read(&feats).unwrap()).unwrap();
    assert_eq!(dims, vec![4, 8, 2, 2]);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("train_samples,test_samples,classes,train_accuracy,test_accuracy\n"));
}

#[test]
fn patches_deterministic_per_seed() {
    let dir = temp_dir("patches");
    let cfg = dir.join("exp.cfg");
    write_config(&cfg, TRAIN_CONFIG);
    let img = dir.join("img.pgm");
    write_pgm(&img, 32, 32, 8);
    let run = |tag: &str| -> Vec<u8> {
        let out_path = dir.join(format!("p-{tag}.tnsr"));
        let out = psd(&[
            "patches",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out_path.to_str().unwrap(),
            img.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
        std::fs::read(&out_path).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let (dims, _) = read_tensor(&a).unwrap();
    assert_eq!(dims, vec![150, 9]);
}
