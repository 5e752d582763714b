//! Training loop with separate optimizers for the backbone and the mask
//! modules, top-1 evaluation, and per-epoch proportion traces.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::model::MaskedNetwork;
use crate::optim::{schedule_multiplier, Adam, AdamConfig, Sgd, SgdConfig};
use crate::params::ParamGroup;
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    /// `(epoch, multiplier)` milestones; multipliers compound and apply to
    /// both optimizers from that epoch on.
    pub schedule: Vec<(usize, f64)>,
    pub seed: u64,
    /// Keep branch-head parameters fixed.
    pub freeze_branches: bool,
    /// Skip the mask optimizer entirely.
    pub freeze_masks: bool,
}

impl TrainConfig {
    /// SGD (lr 0.05, momentum 0.9, wd 1e-4) with ×0.1 at 50% and 75% of
    /// `epochs`, Adam defaults for the masks, batch 32.
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: 32,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            schedule: default_schedule(epochs),
            seed: 0,
            freeze_branches: false,
            freeze_masks: false,
        }
    }

    /// Post-pruning fine-tuning: lr 0.001, ×0.1 at epochs 10 and 20, masks frozen.
    pub fn finetune(epochs: usize) -> Self {
        TrainConfig {
            sgd: SgdConfig {
                lr: 0.001,
                ..SgdConfig::default()
            },
            schedule: vec![(10, 0.1), (20, 0.1)],
            freeze_masks: true,
            ..TrainConfig::new(epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let rates = [
            self.sgd.lr,
            self.sgd.momentum,
            self.sgd.weight_decay,
            self.adam.lr,
            self.adam.weight_decay,
        ];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "learning rates, momentum and weight decay must be finite and >= 0".into(),
            ));
        }
        if self
            .schedule
            .iter()
            .any(|&(_, m)| !m.is_finite() || m < 0.0)
        {
            return Err(Error::Config(
                "schedule multipliers must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Backbone learning rate in effect during `epoch`.
    pub fn backbone_lr(&self, epoch: usize) -> f64 {
        self.sgd.lr * schedule_multiplier(&self.schedule, epoch)
    }

    pub fn mask_lr(&self, epoch: usize) -> f64 {
        self.adam.lr * schedule_multiplier(&self.schedule, epoch)
    }
}

pub fn default_schedule(epochs: usize) -> Vec<(usize, f64)> {
    [epochs / 2, epochs * 3 / 4]
        .into_iter()
        .filter(|&e| e > 0)
        .map(|e| (e, 0.1))
        .collect()
}

/// `P_nonlinear` of every gated block, sampled once before training and after
/// each completed epoch. Row `k` holds the state after `k` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionTrace {
    pub modules: usize,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl ProportionTrace {
    pub fn new(modules: usize) -> Self {
        ProportionTrace {
            modules,
            rows: Vec::new(),
        }
    }

    /// Values of one module across all rows.
    pub fn series(&self, module: usize) -> Vec<f64> {
        self.rows.iter().map(|(_, v)| v[module]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for m in 0..self.modules {
            let _ = write!(out, ",module_{m}");
        }
        out.push('\n');
        for (epoch, values) in &self.rows {
            let _ = write!(out, "{epoch}");
            for v in values {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::format("trace CSV", reason);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"epoch")
            || cols[1..]
                .iter()
                .enumerate()
                .any(|(i, c)| *c != format!("module_{i}"))
        {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let modules = cols.len() - 1;
        let mut trace = ProportionTrace::new(modules);
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != modules + 1 {
                return Err(bad(format!("line {} has {} fields", n + 2, fields.len())));
            }
            let epoch = fields[0]
                .parse()
                .map_err(|_| bad(format!("line {}: bad epoch", n + 2)))?;
            let values = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| bad(format!("line {}: bad value {f:?}", n + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            trace.rows.push((epoch, values));
        }
        Ok(trace)
    }
}

pub fn export_trace(trace: &ProportionTrace, path: &Path) -> Result<()> {
    if trace.rows.is_empty() {
        return Err(Error::Usage("cannot export an empty trace".into()));
    }
    fs::write(path, trace.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<ProportionTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ProportionTrace::parse_csv(&text)
}

/// Gate outputs and mask bits of one module at one trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub epoch: usize,
    pub module: usize,
    pub z: Vec<f64>,
    pub mask1: Vec<u8>,
}

impl MaskState {
    /// `epoch=E module=I c=C z=z0;z1;... mask1=0110...`
    pub fn to_line(&self) -> String {
        let z: Vec<String> = self.z.iter().map(|v| format!("{v:.6}")).collect();
        let bits: String = self
            .mask1
            .iter()
            .map(|b| if *b == 1 { '1' } else { '0' })
            .collect();
        format!(
            "epoch={} module={} c={} z={} mask1={}",
            self.epoch,
            self.module,
            self.z.len(),
            z.join(";"),
            bits
        )
    }
}

fn mask_states<S: Scalar>(net: &MaskedNetwork<S>, epoch: usize) -> Result<Vec<MaskState>> {
    let mut out = Vec::new();
    for (module, block) in net.gated_blocks().into_iter().enumerate() {
        let (z, mask1) = match net.mask_params(block) {
            Some(p) => (
                p.gate_values()?
                    .into_iter()
                    .map(Scalar::to_f64_lossy)
                    .collect(),
                p.masks()?.mask1().to_vec(),
            ),
            None => {
                let masks = &net.current_masks()?[module];
                (vec![f64::NAN; masks.channels()], masks.mask1().to_vec())
            }
        };
        out.push(MaskState {
            epoch,
            module,
            z,
            mask1,
        });
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss,top1,lr";

pub fn format_log(records: &[EpochRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6e}",
            r.epoch, r.split, r.loss, r.top1, r.lr
        );
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
    let bad = |reason: String| Error::format("training log", reason);
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(bad("missing header".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("line {} has {} fields", n + 2, f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("line {}: bad number {s:?}", n + 2)))
            };
            Ok(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad epoch", n + 2)))?,
                split: f[1].to_string(),
                loss: num(f[2])?,
                top1: num(f[3])?,
                lr: num(f[4])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: ProportionTrace,
    pub mask_states: Vec<MaskState>,
    /// One `train` record per epoch, plus a `holdout` record when evaluating.
    pub log: Vec<EpochRecord>,
    /// Mean cross-entropy of every optimization step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn mask_state_text(&self) -> String {
        self.mask_states
            .iter()
            .map(|s| s.to_line() + "\n")
            .collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate_top1<S: Scalar>(net: &MaskedNetwork<S>, data: &Dataset<S>) -> Result<f64> {
    Ok(evaluate(net, data)?.1)
}

/// Mean cross-entropy and top-1 accuracy over `data`.
pub fn evaluate<S: Scalar>(net: &MaskedNetwork<S>, data: &Dataset<S>) -> Result<(f64, f64)> {
    let mut correct = 0;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pass = net.forward(&mut tape, xv)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
        loss_sum += tape.value(loss).data()[0].to_f64_lossy() * chunk.len() as f64;
        correct += count_correct(tape.value(pass.logits), &y);
    }
    let n = data.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

fn record_trace<S: Scalar>(
    net: &MaskedNetwork<S>,
    probe: &Tensor<S>,
    epoch: usize,
    trace: &mut ProportionTrace,
    states: &mut Vec<MaskState>,
) -> Result<()> {
    let (_, _, proportions) = net.forward_collect(probe)?;
    trace.rows.push((epoch, proportions));
    states.extend(mask_states(net, epoch)?);
    Ok(())
}

/// Trains `net` in place on `data`, optionally logging holdout metrics after
/// every epoch.
pub fn train<S: Scalar>(
    net: &mut MaskedNetwork<S>,
    data: &Dataset<S>,
    holdout: Option<&Dataset<S>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.sample_shape() != net.input_shape.as_slice() {
        let mut expected = vec![data.len()];
        expected.extend_from_slice(&net.input_shape);
        return Err(Error::dim("training data", data.inputs.shape(), &expected));
    }
    if data.classes > net.classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes but the network predicts {}",
            data.classes,
            net.classes()
        )));
    }

    let groups: &[ParamGroup] = if cfg.freeze_branches {
        &[ParamGroup::Backbone]
    } else {
        &[ParamGroup::Backbone, ParamGroup::Branch]
    };
    let mut sgd = Sgd::new(cfg.sgd, groups);
    let mut adam = Adam::new(cfg.adam, &[ParamGroup::Mask]);
    let mut rng = substream(cfg.seed, "shuffle");
    let probe = data.batch(&[0])?.0;

    let mut trace = ProportionTrace::new(net.gated_blocks().len());
    let mut states = Vec::new();
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    record_trace(net, &probe, 0, &mut trace, &mut states)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.backbone_lr(epoch);
        let mask_lr = cfg.mask_lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(idx)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pass = net.forward(&mut tape, xv)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
            let value = tape.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch });
            }
            tape.backward(loss)?;
            net.store.zero_grad();
            net.store.accumulate_grads(&tape, &pass.bound)?;
            sgd.step(&mut net.store, lr)?;
            if !cfg.freeze_masks {
                adam.step(&mut net.store, mask_lr)?;
            }
            step_losses.push(value);
            loss_sum += value * idx.len() as f64;
            correct += count_correct(tape.value(pass.logits), &y);
        }
        net.store.zero_grad();
        let n = data.len() as f64;
        log.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            top1: correct as f64 / n,
            lr,
        });
        if let Some(h) = holdout {
            let (loss, top1) = evaluate(net, h)?;
            log.push(EpochRecord {
                epoch,
                split: "holdout".into(),
                loss,
                top1,
                lr,
            });
        }
        record_trace(net, &probe, epoch + 1, &mut trace, &mut states)?;
    }
    Ok(TrainOutcome {
        trace,
        mask_states: states,
        log,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }

    #[test]
    fn trace_csv_shape_and_round_trip() {
        let mut t = ProportionTrace::new(2);
        t.rows.push((0, vec![1.0, 1.0]));
        t.rows.push((1, vec![0.5, 0.25]));
        t.rows.push((2, vec![0.125, 0.0]));
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(1), Some("0,1.000000,1.000000"));
        assert_eq!(ProportionTrace::parse_csv(&csv).unwrap(), t);
    }

    #[test]
    fn log_round_trip() {
        let r = vec![EpochRecord {
            epoch: 3,
            split: "train".into(),
            loss: 0.5,
            top1: 0.75,
            lr: 1e-5,
        }];
        assert_eq!(parse_log(&format_log(&r)).unwrap(), r);
    }

    #[test]
    fn finetune_schedule() {
        let c = TrainConfig::finetune(40);
        assert_eq!(c.backbone_lr(9), 0.001);
        assert!((c.backbone_lr(25) - 1e-5).abs() < 1e-18);
        assert!(TrainConfig::new(1).schedule.is_empty());
    }
}
