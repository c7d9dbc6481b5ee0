use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dicc_core::datasets::{read_disparity_pfm, read_manifest, read_pfm};
use dicc_core::model::{ModelConfig, ModelWeights};
use dicc_core::training::load_checkpoint;
use tempfile::TempDir;

fn dicc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dicc"))
        .args(args)
        .output()
        .expect("dicc runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn ok(args: &[&str]) -> String {
    let o = dicc(args);
    assert!(o.status.success(), "dicc {args:?}: {}", stderr(&o));
    stdout(&o)
}

#[track_caller]
fn exit_code(args: &[&str], code: i32) -> String {
    let o = dicc(args);
    assert_eq!(
        o.status.code(),
        Some(code),
        "dicc {args:?}: {}{}",
        stdout(&o),
        stderr(&o)
    );
    stderr(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 6 samples of 48x48, 5 train / 1 val.
fn dataset(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("rds");
    ok(&[
        "gen-rds",
        "--out",
        s(&out),
        "--count",
        "6",
        "--width",
        "48",
        "--height",
        "48",
        "--max-disp",
        "12",
        "--val-fraction",
        "0.2",
        "--seed",
        "3",
    ]);
    out
}

fn trained(dir: &TempDir, data: &Path) -> PathBuf {
    let ckpt = dir.path().join("m.ckpt");
    ok(&[
        "train",
        "--data",
        s(&data.join("train.txt")),
        "--max-disp",
        "12",
        "--epochs",
        "1",
        "--out",
        s(&ckpt),
    ]);
    ckpt
}

#[test]
fn help_documents_every_flag() {
    let top = ok(&["--help"]);
    for sub in ["gen-rds", "train", "infer", "eval", "gradcheck", "estimate-resources"] {
        assert!(top.contains(sub), "{top}");
    }
    let train = ok(&["train", "--help"]);
    for flag in [
        "--data",
        "--val",
        "--profile",
        "--max-disp",
        "--epochs",
        "--lr",
        "--lambda",
        "--seed",
        "--crop",
        "--context-only",
        "--resume",
        "--out",
        "--log",
        "--config",
        "--threads",
    ] {
        assert!(train.contains(flag), "{flag} missing from\n{train}");
    }
    assert!(!train.contains("inject"));
}

#[test]
fn gen_rds_default_split_and_naming() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    let text = ok(&[
        "gen-rds",
        "--out",
        s(&out),
        "--count",
        "20",
        "--width",
        "40",
        "--height",
        "36",
        "--max-disp",
        "9",
    ]);
    assert!(text.contains("train.txt") && text.contains("val.txt"), "{text}");
    let train = read_manifest(out.join("train.txt")).unwrap();
    let val = read_manifest(out.join("val.txt")).unwrap();
    assert_eq!((train.len(), val.len()), (18, 2));
    assert!(out.join("left_00000.pgm").exists());
    assert!(out.join("right_00019.pgm").exists());
    let gt = read_disparity_pfm(out.join("gt_00019.pfm")).unwrap();
    assert_eq!((gt.height(), gt.width()), (36, 40));
}

#[test]
fn gen_rds_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    let err = exit_code(
        &[
            "gen-rds",
            "--out",
            s(&out),
            "--count",
            "2",
            "--width",
            "24",
            "--max-disp",
            "24",
        ],
        2,
    );
    assert!(err.contains("--max-disp"), "{err}");
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let err = exit_code(
        &[
            "gen-rds",
            "--out",
            s(&file.join("sub")),
            "--count",
            "2",
            "--width",
            "48",
            "--height",
            "48",
            "--max-disp",
            "12",
        ],
        2,
    );
    assert!(err.contains("plain"), "{err}");
    exit_code(&["gen-rds", "--out", s(&out), "--bogus"], 2);
}

#[test]
fn train_zero_epochs_writes_initial_weights_and_header() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let ckpt = dir.path().join("init.ckpt");
    let text = ok(&[
        "train",
        "--data",
        s(&data.join("train.txt")),
        "--max-disp",
        "12",
        "--epochs",
        "0",
        "--seed",
        "4",
        "--out",
        s(&ckpt),
    ]);
    let header = text.lines().next().unwrap();
    assert!(
        header.contains("lr=0.001") && header.contains("lambda=1.25"),
        "{header}"
    );
    let log = fs::read_to_string(dir.path().join("init.ckpt.log")).unwrap();
    assert_eq!(log.lines().next().unwrap(), header);
    let ck = load_checkpoint(&ckpt).unwrap();
    let cfg = ModelConfig::tiny(1, 12);
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.weights, ModelWeights::<f32>::init(&cfg, 4).unwrap());
    assert_eq!(ck.epoch, 0);
}

#[test]
fn train_logs_epochs_and_keeps_best_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let ckpt = dir.path().join("run.ckpt");
    let text = ok(&[
        "train",
        "--data",
        s(&data.join("train.txt")),
        "--val",
        s(&data.join("val.txt")),
        "--max-disp",
        "12",
        "--epochs",
        "2",
        "--crop",
        "48x48",
        "--out",
        s(&ckpt),
    ]);
    assert!(text.contains("epoch=1 ") && text.contains("epoch=2 "), "{text}");
    assert!(dir.path().join("run.best.ckpt").exists());
    assert_eq!(load_checkpoint(&ckpt).unwrap().epoch, 2);
    let log = fs::read_to_string(dir.path().join("run.ckpt.log")).unwrap();
    assert!(
        log.lines().any(|l| l.starts_with("epoch=2 ") && l.contains("val_epe=")),
        "{log}"
    );

    // Resuming for one more epoch continues the count.
    let more = dir.path().join("more.ckpt");
    ok(&[
        "train",
        "--data",
        s(&data.join("train.txt")),
        "--max-disp",
        "12",
        "--epochs",
        "3",
        "--crop",
        "48x48",
        "--resume",
        s(&ckpt),
        "--out",
        s(&more),
    ]);
    assert_eq!(load_checkpoint(&more).unwrap().epoch, 3);
}

#[test]
fn train_usage_errors() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let out = dir.path().join("x.ckpt");
    let train = data.join("train.txt");
    exit_code(&["train", "--data", s(&train), "--crop", "big", "--out", s(&out)], 2);
    exit_code(&["train", "--data", s(&train), "--max-disp", "13", "--out", s(&out)], 2);
    let err = exit_code(
        &["train", "--data", s(&dir.path().join("none.txt")), "--out", s(&out)],
        2,
    );
    assert!(err.contains("none.txt"), "{err}");
}

#[test]
fn divergence_exits_3_and_names_last_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let ckpt = dir.path().join("boom.ckpt");
    let err = exit_code(
        &[
            "train",
            "--data",
            s(&data.join("train.txt")),
            "--max-disp",
            "12",
            "--epochs",
            "5",
            "--lr",
            "3e38",
            "--out",
            s(&ckpt),
        ],
        3,
    );
    assert!(
        err.contains("last good checkpoint") && err.contains("boom.ckpt"),
        "{err}"
    );
    assert!(load_checkpoint(&ckpt).is_ok());
}

#[test]
fn infer_modes_write_identical_files() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let ckpt = trained(&dir, &data);
    let (l, r) = (data.join("left_00005.pgm"), data.join("right_00005.pgm"));
    let mut outs = Vec::new();
    for mode in ["sequential", "parallel"] {
        let disp = dir.path().join(format!("{mode}.pfm"));
        let ent = dir.path().join(format!("{mode}.entropy.pfm"));
        let text = ok(&[
            "infer",
            "--ckpt",
            s(&ckpt),
            "--left",
            s(&l),
            "--right",
            s(&r),
            "--out-disp",
            s(&disp),
            "--out-entropy",
            s(&ent),
            "--mode",
            mode,
        ]);
        for stage in [
            "features_ms=",
            "cost_volume_ms=",
            "projection_ms=",
            "refine_ms=",
            "total_ms=",
        ] {
            assert!(text.contains(stage), "{text}");
        }
        let e = read_pfm(&ent).unwrap();
        assert!(e.data().iter().all(|&v| (-1e-5..=4f32.ln() + 1e-5).contains(&v)));
        outs.push((fs::read(&disp).unwrap(), fs::read(&ent).unwrap()));
    }
    assert_eq!(outs[0], outs[1]);
    let d = read_disparity_pfm(dir.path().join("sequential.pfm")).unwrap();
    assert_eq!((d.height(), d.width()), (48, 48));
}

#[test]
fn infer_input_errors() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let out = dir.path().join("o.pfm");
    let l = data.join("left_00000.pgm");
    let missing = dir.path().join("nothing.ckpt");
    let err = exit_code(
        &[
            "infer",
            "--ckpt",
            s(&missing),
            "--left",
            s(&l),
            "--right",
            s(&l),
            "--out-disp",
            s(&out),
        ],
        2,
    );
    assert!(err.contains("nothing.ckpt"), "{err}");

    let ckpt = trained(&dir, &data);
    let small = dir.path().join("small");
    ok(&[
        "gen-rds",
        "--out",
        s(&small),
        "--count",
        "1",
        "--width",
        "51",
        "--height",
        "48",
        "--max-disp",
        "12",
        "--val-fraction",
        "0",
    ]);
    let err = exit_code(
        &[
            "infer",
            "--ckpt",
            s(&ckpt),
            "--left",
            s(&l),
            "--right",
            s(&small.join("right_00000.pgm")),
            "--out-disp",
            s(&out),
        ],
        2,
    );
    assert!(err.contains("right"), "{err}");
}

#[test]
fn eval_reports_and_errors() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let gts = data.join("train.txt");
    let text = ok(&[
        "eval",
        "--pred-manifest",
        s(&gts),
        "--gt-manifest",
        s(&gts),
        "--max-disp",
        "12",
    ]);
    let header = text.lines().next().unwrap();
    for col in ["epe", "rmse", "bad-1.0", "bad-2.0", "bad-3.0", "bad-4.0", "a99"] {
        assert!(header.contains(col), "{header}");
    }
    let all = text.lines().find(|l| l.starts_with("image=all ")).unwrap();
    assert!(
        all.contains("epe=0.000000") && all.contains("bad4=0.0000") && all.contains("a99=0.000000"),
        "{all}"
    );
    assert_eq!(text.lines().filter(|l| l.starts_with("image=")).count(), 6);

    let kv = ok(&[
        "eval",
        "--pred-manifest",
        s(&gts),
        "--gt-manifest",
        s(&gts),
        "--thresholds",
        "0.5,3",
        "--format",
        "kv",
    ]);
    assert!(
        kv.contains("bad0.5=") && kv.contains("bad3=") && !kv.contains("bad1="),
        "{kv}"
    );

    let val = data.join("val.txt");
    exit_code(&["eval", "--pred-manifest", s(&gts), "--gt-manifest", s(&val)], 2);

    let list = dir.path().join("list.txt");
    fs::write(&list, format!("{}\n", s(&dir.path().join("gone.pfm")))).unwrap();
    let err = exit_code(&["eval", "--pred-manifest", s(&val), "--gt-manifest", s(&list)], 2);
    assert!(err.contains("gone.pfm"), "{err}");
}

#[test]
fn gradcheck_exit_codes() {
    let text = ok(&["gradcheck"]);
    assert!(text.contains("conv2d") && text.contains("refine composite"), "{text}");
    let o = dicc(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stdout(&o).contains("FAILED") && stdout(&o).contains("relu (injected fault)"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn estimate_resources_prints_peaks_and_formulas() {
    let text = ok(&["estimate-resources"]);
    assert!(text.contains("sequential_peak=3686400"), "{text}");
    assert!(text.contains("parallel_peak=235929600"), "{text}");
    assert!(text.contains("volume_4d_peak=235929600"), "{text}");
    assert!(
        text.contains("(H/3)(W/3)(2F)") && text.contains("(H/3)(W/3)(D/3)(2F)"),
        "{text}"
    );
    let tiny = ok(&[
        "estimate-resources",
        "--profile",
        "tiny",
        "--height",
        "96",
        "--width",
        "96",
        "--max-disp",
        "24",
        "--format",
        "kv",
    ]);
    assert!(
        tiny.contains("sequential_peak=32768") && tiny.contains("parallel_peak=262144"),
        "{tiny}"
    );
}

#[test]
fn config_file_overlay_and_precedence() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("res.cfg");
    fs::write(
        &cfg,
        "# resources\nprofile = tiny\nheight=96\nwidth=96\nmax_disp=24\nformat=kv\n",
    )
    .unwrap();
    let text = ok(&["estimate-resources", "--config", s(&cfg)]);
    assert!(text.contains("sequential_peak=32768"), "{text}");
    let text = ok(&["--config", s(&cfg), "estimate-resources", "--max-disp", "48"]);
    assert!(text.contains("parallel_peak=524288"), "{text}");

    fs::write(&cfg, "height=96\nflavour=mint\n").unwrap();
    let err = exit_code(&["estimate-resources", "--config", s(&cfg)], 2);
    assert!(err.contains("flavour"), "{err}");
    exit_code(
        &["estimate-resources", "--config", s(&dir.path().join("absent.cfg"))],
        2,
    );
}

#[test]
fn threads_flag_and_environment() {
    ok(&["--threads", "2", "estimate-resources", "--format", "kv"]);
    let o = Command::new(env!("CARGO_BIN_EXE_dicc"))
        .args(["estimate-resources", "--format", "kv"])
        .env("DICC_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    exit_code(&["--threads", "many", "estimate-resources"], 2);
}
