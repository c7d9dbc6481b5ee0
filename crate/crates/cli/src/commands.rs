use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use dicc_core::baseline::estimate_resources;
use dicc_core::datasets::{
    gen_rds, load_dataset, normalize_image, read_disparity_pfm, read_map_list, read_pnm, write_dataset,
    write_disparity_pfm, write_manifest, write_pfm, RdsConfig,
};
use dicc_core::evaluation::{aggregate, evaluate_maps, format_table, MetricReport};
use dicc_core::gradcheck::{run_suite, SuiteOptions};
use dicc_core::model::{infer, CostMode, ModelConfig, ModelWeights, Profile};
use dicc_core::training::{
    best_checkpoint_path, load_checkpoint, save_checkpoint, train, AdamConfig, Checkpoint, LossConfig, TrainOptions,
};
use dicc_core::{Error, Tensor};

use crate::args::*;
use crate::{Failure, Status};

type CmdResult = Result<Status, Failure>;

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenRds(a) => gen_rds_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::EstimateResources(a) => resources_cmd(a),
    }
}

fn profile(p: ProfileArg) -> Profile {
    match p {
        ProfileArg::Tiny => Profile::Tiny,
        ProfileArg::Full => Profile::Full,
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn gen_rds_cmd(a: GenRdsArgs) -> CmdResult {
    if a.max_disp >= a.width {
        return Err(usage(format!(
            "--max-disp {} must be less than --width {}",
            a.max_disp, a.width
        )));
    }
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(usage("--val-fraction must be in [0, 1)"));
    }
    let mut cfg = RdsConfig::new(a.width, a.height, a.max_disp, a.seed);
    cfg.dot_density = a.density;
    cfg.num_shapes = a.shapes;
    println!(
        "# gen-rds out={} count={} width={} height={} density={} max_disp={} shapes={} val_fraction={} seed={}",
        a.out.display(),
        a.count,
        a.width,
        a.height,
        a.density,
        a.max_disp,
        a.shapes,
        a.val_fraction,
        a.seed
    );
    let samples = gen_rds(&cfg, a.count)?;
    let entries = write_dataset(&a.out, &samples, 0)?;
    let n_val = (a.count as f64 * a.val_fraction).round() as usize;
    let (train_entries, val_entries) = entries.split_at(a.count - n_val);
    let train_path = a.out.join("train.txt");
    let val_path = a.out.join("val.txt");
    write_manifest(&train_path, train_entries)?;
    write_manifest(&val_path, val_entries)?;
    println!(
        "train manifest: {} ({} samples)",
        train_path.display(),
        train_entries.len()
    );
    println!("val manifest: {} ({} samples)", val_path.display(), val_entries.len());
    Ok(Status::Success)
}

fn parse_crop(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("--crop `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn append_line(path: &Path, line: &str) -> Result<(), Failure> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    writeln!(f, "{line}").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let crop = a.crop.as_deref().map(parse_crop).transpose()?;
    let train_set = load_dataset(&a.data, a.max_disp)?;
    let val_set = match &a.val {
        Some(p) => load_dataset(p, a.max_disp)?,
        None => Vec::new(),
    };
    let channels = train_set
        .first()
        .map(|s| s.left.shape().c())
        .ok_or_else(|| usage(format!("{} lists no samples", a.data.display())))?;
    let mut config = ModelConfig::for_profile(profile(a.profile), channels, a.max_disp);
    config.context_only = a.context_only;
    let opts = TrainOptions {
        epochs: a.epochs,
        crop,
        seed: a.seed,
        adam: AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
        loss: LossConfig { lambda: a.lambda },
    };
    let start = match &a.resume {
        Some(p) => load_checkpoint(p)?,
        None => Checkpoint {
            config: config.clone(),
            weights: ModelWeights::init(&config, a.seed)?,
            adam: None,
            epoch: 0,
            seed: a.seed,
        },
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let header = format!(
        "# train data={} val={} samples={} val_samples={} profile={} channels={} max_disp={} epochs={} lr={} lambda={} \
         beta1={} beta2={} epsilon={} seed={} crop={} context_only={} resume={} out={}",
        a.data.display(),
        a.val.as_ref().map_or("none".into(), |p| p.display().to_string()),
        train_set.len(),
        val_set.len(),
        config.profile.name(),
        channels,
        a.max_disp,
        a.epochs,
        opts.adam.lr,
        opts.loss.lambda,
        opts.adam.beta1,
        opts.adam.beta2,
        opts.adam.epsilon,
        a.seed,
        crop.map_or("none".into(), |(h, w)| format!("{h}x{w}")),
        a.context_only,
        a.resume.as_ref().map_or("none".into(), |p| p.display().to_string()),
        a.out.display(),
    );
    println!("{header}");
    append_line(&log_path, &header)?;

    let best_path = best_checkpoint_path(&a.out);
    let mut best = f64::INFINITY;
    save_checkpoint(&start, &a.out)?;
    let result = train(&config, &train_set, &val_set, &opts, Some(start), |entry, ck| {
        save_checkpoint(ck, &a.out)?;
        if let Some(v) = entry.val_epe {
            if v < best {
                best = v;
                save_checkpoint(ck, &best_path)?;
            }
        }
        println!("{entry}");
        append_line(&log_path, &entry.to_string()).map_err(|f| match f {
            Failure::Core(e) => e,
            Failure::Usage(m) => Error::InvalidInput(m),
        })
    });
    match result {
        Ok(_) => {
            println!("checkpoint: {}", a.out.display());
            Ok(Status::Success)
        }
        Err(Error::Divergence(m)) => Err(Failure::Core(Error::Divergence(format!(
            "{m}; last good checkpoint: {}",
            a.out.display()
        )))),
        Err(e) => Err(e.into()),
    }
}

fn infer_cmd(a: InferArgs) -> CmdResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let left = read_pnm(&a.left)?;
    let right = read_pnm(&a.right)?;
    if left.shape() != right.shape() {
        return Err(usage(format!(
            "left image {} is {} but right image {} is {}",
            a.left.display(),
            left.shape(),
            a.right.display(),
            right.shape()
        )));
    }
    if left.shape().c() != ck.config.in_channels {
        return Err(usage(format!(
            "images have {} channels but the checkpoint expects {}",
            left.shape().c(),
            ck.config.in_channels
        )));
    }
    let mode = match a.mode {
        ModeArg::Sequential => CostMode::Sequential,
        ModeArg::Parallel => CostMode::Parallel,
    };
    let pred = infer(
        &ck.config,
        &ck.weights,
        &normalize_image::<f32>(&left),
        &normalize_image::<f32>(&right),
        mode,
    )?;
    write_disparity_pfm(&pred.refined, &a.out_disp)?;
    if let Some(p) = &a.out_entropy {
        let e = &pred.entropy;
        write_pfm(&Tensor::from_plane(e.height, e.width, e.values.clone())?, p)?;
    }
    let t = pred.timings;
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    println!(
        "features_ms={:.3} cost_volume_ms={:.3} projection_ms={:.3} refine_ms={:.3} total_ms={:.3} mode={:?}",
        ms(t.features),
        ms(t.cost_volume),
        ms(t.projection),
        ms(t.refine),
        ms(t.features + t.cost_volume + t.projection + t.refine),
        a.mode
    );
    println!("disparity: {}", a.out_disp.display());
    Ok(Status::Success)
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    if a.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(usage("thresholds must be finite and non-negative"));
    }
    let preds = read_map_list(&a.pred_manifest)?;
    let gts = read_map_list(&a.gt_manifest)?;
    if preds.len() != gts.len() {
        return Err(usage(format!(
            "{} lists {} predictions but {} lists {} ground-truth maps",
            a.pred_manifest.display(),
            preds.len(),
            a.gt_manifest.display(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(usage("manifests are empty"));
    }
    let mut rows: Vec<(String, MetricReport)> = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(&gts) {
        let pred = read_disparity_pfm(p)?;
        let gt = read_disparity_pfm(g)?;
        let report =
            evaluate_maps(&pred, &gt, a.max_disp, &a.thresholds).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let label = p
            .file_name()
            .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push((label, report));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let total = aggregate(&reports)?;
    rows.push(("all".to_string(), total));
    if matches!(a.format, FormatArg::Table | FormatArg::Both) {
        let refs: Vec<(String, &MetricReport)> = rows.iter().map(|(l, r)| (l.clone(), r)).collect();
        print!("{}", format_table(&refs));
    }
    if matches!(a.format, FormatArg::Kv | FormatArg::Both) {
        for (label, r) in &rows {
            println!("image={label} {}", r.key_values());
        }
    }
    Ok(Status::Success)
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(usage("--tol must be positive"));
    }
    let opts = SuiteOptions {
        profile: profile(a.profile),
        composite_tolerance: a.tol,
        inject_fault: a.inject_fault,
        ..Default::default()
    };
    println!(
        "# gradcheck profile={} op_tol={:e} composite_tol={:e} precision=f64",
        opts.profile.name(),
        opts.op_tolerance,
        opts.composite_tolerance
    );
    let reports = run_suite(&opts)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.label.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(Status::Success)
    } else {
        println!("FAILED: {}", failed.join(", "));
        Ok(Status::CheckFailed)
    }
}

fn resources_cmd(a: ResourceArgs) -> CmdResult {
    let cfg = ModelConfig::for_profile(profile(a.profile), a.in_channels, a.max_disp);
    let r = estimate_resources(&cfg, a.height, a.width)?;
    println!(
        "# estimate-resources profile={} height={} width={} max_disp={} in_channels={}",
        cfg.profile.name(),
        a.height,
        a.width,
        a.max_disp,
        a.in_channels
    );
    if matches!(a.format, FormatArg::Table | FormatArg::Both) {
        print!("{}", r.to_table());
    }
    if matches!(a.format, FormatArg::Kv | FormatArg::Both) {
        println!("{}", r.key_values());
    }
    Ok(Status::Success)
}
