use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use maskgate::checkpoint;
use maskgate::data::{
    generate_synthetic_3d, load_csv, load_idx, split_holdout, Dataset, SyntheticSpec,
};
use maskgate::model::MaskedNetwork;
use maskgate::prune::{derive_keep_plan, make_report, rebuild_pruned};
use maskgate::tensor::Tensor;
use maskgate::train::{
    evaluate_top1, export_trace, format_log, read_trace, train as fit, TrainConfig,
};
use maskgate::{Error, ModelConfig, ModelKind, Result};

use crate::config::{RawConfig, Settings};
use crate::RunArgs;

type Data = Dataset<f64>;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn settings(args: &RunArgs) -> Result<Settings> {
    let mut raw = match &args.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for o in &args.overrides {
        raw.set(o)?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("data.dataset", args.dataset.clone()),
        ("model.kind", args.model.clone()),
        ("train.epochs", args.epochs.map(|v| v.to_string())),
        ("train.seed", args.seed.map(|v| v.to_string())),
        ("model.mask_placement", args.mask_placement.clone()),
        (
            "model.ste_sign_convention",
            args.ste_sign_convention.clone(),
        ),
        (
            "data.samples_per_class",
            args.samples_per_class.map(|v| v.to_string()),
        ),
        ("data.noise", args.noise.map(|v| v.to_string())),
        ("data.separation", args.separation.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            raw.put(key, v);
        }
    }
    if args.freeze_branches {
        raw.put("train.freeze_branches", "true");
    }
    Settings::resolve(raw)
}

/// Square single-channel shape from the field count of the first data row.
fn infer_csv_shape(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let fields = text
        .lines()
        .find(|l| {
            l.split(',')
                .next()
                .is_some_and(|f| f.trim().parse::<f64>().is_ok())
        })
        .map(|l| l.split(',').count())
        .ok_or_else(|| Error::Data(format!("{}: no data rows", path.display())))?;
    let pixels = fields.saturating_sub(1);
    let side = (pixels as f64).sqrt().round() as usize;
    if side == 0 || side * side != pixels {
        return Err(Error::Config(format!(
            "{}: {pixels} pixels per row is not a square image; set data.image_shape=C,H,W",
            path.display()
        )));
    }
    Ok(vec![1, side, side])
}

fn load_dataset(s: &Settings) -> Result<Data> {
    let selector = s.data.dataset.as_str();
    if selector == "synthetic" {
        return generate_synthetic_3d(&SyntheticSpec {
            samples_per_class: s.data.samples_per_class,
            noise: s.data.noise,
            separation: s.data.separation,
            seed: s.seed,
        });
    }
    if let Some(rest) = selector.strip_prefix("idx:") {
        let (img, lbl) = rest.split_once(',').ok_or_else(|| {
            Error::Config(format!("expected idx:<images>,<labels>, got {selector:?}"))
        })?;
        return load_idx(Path::new(img), Path::new(lbl));
    }
    if let Some(path) = selector.strip_prefix("csv:") {
        let path = Path::new(path);
        let shape = match &s.data.image_shape {
            Some(shape) => shape.clone(),
            None => infer_csv_shape(path)?,
        };
        if shape.len() != 3 {
            return Err(Error::Config("data.image_shape must be C,H,W".into()));
        }
        return load_csv(path, shape[2], shape[1], shape[0]);
    }
    Err(Error::Config(format!(
        "unknown dataset {selector:?} (expected synthetic, idx:<images>,<labels> or csv:<path>)"
    )))
}

/// Flattens images for fully-connected models.
fn fit_to(kind: ModelKind, data: Data) -> Result<Data> {
    match (kind, data.inputs.rank()) {
        (ModelKind::Mlp, r) if r > 2 => {
            let n = data.len();
            let d = data.inputs.len() / n;
            let inputs = Tensor::new(vec![n, d], data.inputs.into_data())?;
            Dataset::new(inputs, data.labels, data.name, data.classes)
        }
        (ModelKind::ConvNet, r) if r != 4 => Err(Error::Config(
            "convnet-m needs image data (idx or csv), not feature vectors".into(),
        )),
        _ => Ok(data),
    }
}

fn split(data: Data, s: &Settings) -> Result<(Data, Option<Data>)> {
    if s.data.holdout == 0 {
        Ok((data, None))
    } else {
        split_holdout(&data, s.data.holdout, s.seed)
    }
}

fn model_config(s: &Settings, data: &Data) -> Result<ModelConfig> {
    let m = &s.model;
    let shape = data.sample_shape();
    let mut cfg = match m.kind {
        ModelKind::Mlp => ModelConfig::mlp_m(shape[0], data.classes),
        ModelKind::ConvNet => ModelConfig::convnet_m([shape[0], shape[1], shape[2]], data.classes),
    };
    if let Some(w) = &m.widths {
        cfg.widths = w.clone();
    }
    if let Some(p) = &m.mask_placement {
        cfg.mask_placement = p.clone();
    }
    if let Some(k) = m.kernel_size {
        cfg.kernel_size = k;
    }
    cfg.residual = m.residual;
    cfg.channel_affine = m.channel_affine;
    cfg.mask_hidden = m.mask_hidden;
    cfg.branch_width = m.branch_width;
    cfg.ste = m.ste;
    cfg.tau = m.tau;
    Ok(cfg)
}

fn out_dir(args: &RunArgs) -> Result<PathBuf> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn require_checkpoint(args: &RunArgs) -> Result<&Path> {
    let path = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Usage("--checkpoint is required".into()))?;
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    Ok(path)
}

pub fn train(args: &RunArgs) -> Result<()> {
    let s = settings(args)?;
    let data = fit_to(s.model.kind, load_dataset(&s)?)?;
    let cfg = model_config(&s, &data)?;
    let dir = out_dir(args)?;
    let ck = dir.join("checkpoint.mgk");
    guard_overwrite(&ck, args.force)?;

    let (train_set, holdout) = split(data, &s)?;
    let mut net = MaskedNetwork::<f64>::build(&cfg, s.seed)?;
    let out = fit(&mut net, &train_set, holdout.as_ref(), &s.train)?;
    checkpoint::save(&net, &ck)?;
    export_trace(&out.trace, &dir.join("trace.csv"))?;
    write_file(&dir.join("train.log"), format_log(&out.log))?;
    write_file(&dir.join("mask_state.txt"), out.mask_state_text())?;

    let top1 = evaluate_top1(&net, holdout.as_ref().unwrap_or(&train_set))?;
    let split_name = if holdout.is_some() {
        "holdout"
    } else {
        "train"
    };
    println!(
        "trained {} for {} epochs; {split_name} top1={top1:.6}; wrote {}",
        cfg.kind,
        s.train.epochs,
        ck.display()
    );
    Ok(())
}

pub fn eval(args: &RunArgs) -> Result<()> {
    let path = require_checkpoint(args)?;
    let s = settings(args)?;
    let net: MaskedNetwork<f64> = checkpoint::load(path)?;
    let data = fit_to(net.kind, load_dataset(&s)?)?;
    let (train_set, holdout) = split(data, &s)?;
    let top1 = evaluate_top1(&net, holdout.as_ref().unwrap_or(&train_set))?;
    println!("top1={top1:.6}");
    Ok(())
}

pub fn trace(args: &RunArgs) -> Result<()> {
    let path = require_checkpoint(args)?;
    let trace_path = path.with_file_name("trace.csv");
    let bytes = fs::read(&trace_path).map_err(|e| io_err(&trace_path, e))?;
    // Validate before re-emitting.
    read_trace(&trace_path)?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(&bytes)
        .and_then(|_| stdout.flush())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

pub fn prune(args: &RunArgs) -> Result<()> {
    let path = require_checkpoint(args)?;
    let s = settings(args)?;
    let net: MaskedNetwork<f64> = checkpoint::load(path)?;
    let data = fit_to(net.kind, load_dataset(&s)?)?;
    let dir = out_dir(args)?;
    let pruned_path = dir.join("pruned.mgk");
    guard_overwrite(&pruned_path, args.force)?;

    let (train_set, holdout) = split(data, &s)?;
    let eval_set = holdout.as_ref().unwrap_or(&train_set);
    let plan = derive_keep_plan(&net)?;
    let pruned = rebuild_pruned(&net, &plan)?;
    let acc_before = evaluate_top1(&net, eval_set)?;
    let acc_pruned = evaluate_top1(&pruned, eval_set)?;

    let mut tuned = pruned.clone();
    let base = TrainConfig::finetune(s.finetune_epochs);
    let cfg = TrainConfig {
        sgd: maskgate::optim::SgdConfig {
            lr: s.finetune_lr,
            ..base.sgd
        },
        batch_size: s.train.batch_size,
        seed: s.seed,
        ..base
    };
    let out = fit(&mut tuned, &train_set, holdout.as_ref(), &cfg)?;
    let acc_tuned = evaluate_top1(&tuned, eval_set)?;

    checkpoint::save(&tuned, &pruned_path)?;
    write_file(&dir.join("finetune.log"), format_log(&out.log))?;
    let report = make_report(
        &net.kind.to_string(),
        &net,
        &pruned,
        [acc_before, acc_pruned, acc_tuned],
    );
    report.write(&dir.join("prune_report.csv"), &dir.join("prune_report.txt"))?;
    print!("{}", report.to_text());
    Ok(())
}
