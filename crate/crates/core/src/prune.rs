//! Mask-guided structural pruning.
//!
//! The first gated block keeps its full width and its branch head (its masks
//! become constants). Every later gated block loses the filters producing its
//! linear channels, together with its mask module and branch head, and the
//! consumer of its output loses the matching input slices.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MaskedNetwork;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub block: usize,
    /// Channel count of the gated feature map.
    pub channels: usize,
    /// Sorted `mask1 == 1` channels.
    pub keep: Vec<usize>,
    pub fast_track: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepPlan {
    pub blocks: Vec<BlockPlan>,
}

impl KeepPlan {
    pub fn fast_track(&self) -> &BlockPlan {
        &self.blocks[0]
    }

    pub fn later(&self) -> &[BlockPlan] {
        &self.blocks[1..]
    }
}

/// Reads the current masks of every gated block.
pub fn derive_keep_plan<S: Scalar>(net: &MaskedNetwork<S>) -> Result<KeepPlan> {
    let gated = net.gated_blocks();
    if gated.is_empty() {
        return Err(Error::Plan("network has no mask modules".into()));
    }
    let masks = net.current_masks()?;
    let blocks: Vec<BlockPlan> = gated
        .iter()
        .zip(&masks)
        .enumerate()
        .map(|(k, (&block, m))| BlockPlan {
            block,
            channels: m.channels(),
            keep: m.nonlinear_indices(),
            fast_track: k == 0,
        })
        .collect();
    if let Some(empty) = blocks[1..].iter().find(|b| b.keep.is_empty()) {
        return Err(Error::Plan(format!(
            "block {} marks every channel linear; no non-linear path would remain",
            empty.block
        )));
    }
    Ok(KeepPlan { blocks })
}

fn check_plan<S: Scalar>(net: &MaskedNetwork<S>, plan: &KeepPlan) -> Result<()> {
    let gated = net.gated_blocks();
    let masks = net.current_masks()?;
    let bad = |reason: String| Err(Error::Structure(reason));
    if plan.blocks.len() != gated.len() {
        return bad(format!(
            "plan covers {} blocks, network has {} gated",
            plan.blocks.len(),
            gated.len()
        ));
    }
    for (k, (p, (&block, m))) in plan.blocks.iter().zip(gated.iter().zip(&masks)).enumerate() {
        if p.block != block || p.channels != m.channels() {
            return bad(format!(
                "plan entry {k} is block {} with {} channels, network has block {block} with {}",
                p.block,
                p.channels,
                m.channels()
            ));
        }
        if p.fast_track != (k == 0) {
            return bad("exactly the first gated block must be the fast track".into());
        }
        if p.keep.windows(2).any(|w| w[0] >= w[1]) || p.keep.iter().any(|&i| i >= p.channels) {
            return bad(format!(
                "retained channels of block {block} must be sorted, unique and < {}",
                p.channels
            ));
        }
        if k > 0 && p.keep.is_empty() {
            return bad(format!("block {block} would keep no channels"));
        }
    }
    Ok(())
}

fn as_indices(t: &Tensor<f64>) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

fn index_tensor(v: &[usize]) -> Tensor<f64> {
    let data: Vec<f64> = v.iter().map(|&i| i as f64).collect();
    Tensor::from_f64(vec![data.len()], &data).expect("non-empty selection")
}

struct Entries(HashMap<String, Tensor<f64>>);

impl Entries {
    fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Structure(format!("network has no entry {name}")))
    }

    fn update(
        &mut self,
        name: &str,
        f: impl FnOnce(&Tensor<f64>) -> Result<Tensor<f64>>,
    ) -> Result<()> {
        let t = f(self.get(name)?)?;
        self.0.insert(name.to_string(), t);
        Ok(())
    }

    fn rows(&mut self, name: &str, keep: &[usize]) -> Result<()> {
        self.update(name, |t| t.gather_rows(keep))
    }

    fn cols(&mut self, name: &str, keep: &[usize]) -> Result<()> {
        self.update(name, |t| t.select_axis1(keep))
    }

    fn remove_prefix(&mut self, prefix: &str) {
        self.0.retain(|k, _| !k.starts_with(prefix));
    }
}

/// Slices the input of whatever consumes block `i`'s output.
fn slice_consumer(
    e: &mut Entries,
    blocks: usize,
    i: usize,
    positions: &[usize],
    final_width: usize,
) -> Result<()> {
    if i + 1 < blocks {
        return e.cols(&format!("block{}.layer.weight", i + 1), positions);
    }
    let total = e.get("classifier.weight")?.shape()[1];
    let offset = total - final_width;
    let keep: Vec<usize> = (0..offset)
        .chain(positions.iter().map(|&p| offset + p))
        .collect();
    e.cols("classifier.weight", &keep)
}

/// Builds the compact network described by `plan`. `net` is left untouched.
pub fn rebuild_pruned<S: Scalar>(
    net: &MaskedNetwork<S>,
    plan: &KeepPlan,
) -> Result<MaskedNetwork<S>> {
    check_plan(net, plan)?;
    let n = net.blocks.len();
    let mut e = Entries(net.to_entries().into_iter().collect());
    // Branch columns of the classifier, in gated-block order.
    let head_widths: Vec<usize> = plan
        .blocks
        .iter()
        .map(|p| {
            e.get(&format!("block{}.head.weight", p.block))
                .map(|t| t.shape()[0])
        })
        .collect::<Result<_>>()?;
    let mut final_width = net.final_width();

    let ft = plan.fast_track();
    let name = format!("block{}", ft.block);
    if e.0.remove(&format!("{name}.mask.tau")).is_some() {
        e.remove_prefix(&format!("{name}.mask."));
        let bits: Vec<f64> = (0..ft.channels)
            .map(|c| f64::from(u8::from(ft.keep.binary_search(&c).is_ok())))
            .collect();
        e.0.insert(
            format!("{name}.frozen_mask1"),
            Tensor::from_f64(vec![bits.len()], &bits)?,
        );
    }
    // Linear channels of the fast-track block carry zeros past the activation,
    // so only their downstream slices go; the branch still reads them.
    let select_key = format!("{name}.output_select");
    let current: Vec<usize> =
        e.0.get(&select_key)
            .map_or_else(|| (0..ft.channels).collect(), as_indices);
    let positions: Vec<usize> = (0..current.len())
        .filter(|&j| ft.keep.binary_search(&current[j]).is_ok())
        .collect();
    if !positions.is_empty() && positions.len() < current.len() {
        let selected: Vec<usize> = positions.iter().map(|&j| current[j]).collect();
        e.0.insert(select_key, index_tensor(&selected));
        slice_consumer(&mut e, n, ft.block, &positions, final_width)?;
        if ft.block + 1 == n {
            final_width = positions.len();
        }
    }

    for p in plan.later() {
        let name = format!("block{}", p.block);
        if p.keep.len() < p.channels {
            let residual = e.0.contains_key(&format!("{name}.inner.weight"));
            let producer = if residual { "inner" } else { "layer" };
            e.rows(&format!("{name}.{producer}.weight"), &p.keep)?;
            e.rows(&format!("{name}.{producer}.bias"), &p.keep)?;
            if residual {
                e.0.insert(format!("{name}.skip_select"), index_tensor(&p.keep));
            }
            if e.0.contains_key(&format!("{name}.affine.scale")) {
                e.rows(&format!("{name}.affine.scale"), &p.keep)?;
                e.rows(&format!("{name}.affine.shift"), &p.keep)?;
            }
            slice_consumer(&mut e, n, p.block, &p.keep, final_width)?;
            if p.block + 1 == n {
                final_width = p.keep.len();
            }
        }
        e.0.remove(&format!("{name}.mask.tau"));
        e.0.remove(&format!("{name}.frozen_mask1"));
        e.remove_prefix(&format!("{name}.mask."));
        e.remove_prefix(&format!("{name}.head."));
    }

    // Drop the classifier columns fed by removed branch heads.
    let mut keep_cols = Vec::new();
    let mut offset = 0;
    for (k, &w) in head_widths.iter().enumerate() {
        if k == 0 {
            keep_cols.extend(offset..offset + w);
        }
        offset += w;
    }
    let total = e.get("classifier.weight")?.shape()[1];
    keep_cols.extend(offset..total);
    e.cols("classifier.weight", &keep_cols)?;

    MaskedNetwork::from_entries(e.0.into_iter().collect())
}

/// Copy of `net` whose later branch heads output exactly zero: the reference
/// that a pruned network must reproduce.
pub fn zero_later_branches<S: Scalar>(net: &MaskedNetwork<S>) -> MaskedNetwork<S> {
    let mut probe = net.clone();
    for block in probe.blocks.iter().filter(|b| b.gate.is_gated()).skip(1) {
        if let Some(head) = block.gate.head() {
            for id in [head.affine.weight, head.affine.bias] {
                probe
                    .store
                    .get_mut(id)
                    .value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = S::zero());
            }
        }
    }
    probe
}

pub fn count_params<S: Scalar>(net: &MaskedNetwork<S>) -> usize {
    net.count_params()
}

/// Fine-tuning after pruning: SGD from lr 0.001, ×0.1 at epochs 10 and 20,
/// masks held constant.
pub fn finetune<S: Scalar>(
    net: &mut MaskedNetwork<S>,
    data: &Dataset<S>,
    holdout: Option<&Dataset<S>>,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::finetune(epochs)
    };
    train(net, data, holdout, &cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub model: String,
    pub params_before: usize,
    pub params_after: usize,
    pub accuracy_before: f64,
    pub accuracy_after_prune: f64,
    pub accuracy_after_finetune: f64,
}

impl PruneReport {
    pub fn params_reduction(&self) -> f64 {
        1.0 - self.params_after as f64 / self.params_before as f64
    }

    pub fn acc_drop(&self) -> f64 {
        self.accuracy_before - self.accuracy_after_finetune
    }

    pub fn to_csv(&self) -> String {
        format!(
            "model,params_before,params_after,params_reduction_pct,acc_before,acc_after_prune,acc_after_finetune,acc_drop\n\
             {},{},{},{:.4},{:.6},{:.6},{:.6},{:.6}\n",
            self.model,
            self.params_before,
            self.params_after,
            100.0 * self.params_reduction(),
            self.accuracy_before,
            self.accuracy_after_prune,
            self.accuracy_after_finetune,
            self.acc_drop()
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model: {}", self.model);
        let _ = writeln!(
            out,
            "params: {} -> {}",
            self.params_before, self.params_after
        );
        let _ = writeln!(
            out,
            "params reduction: {:.1}%",
            100.0 * self.params_reduction()
        );
        let _ = writeln!(
            out,
            "top-1 before pruning: {:.2}%",
            100.0 * self.accuracy_before
        );
        let _ = writeln!(
            out,
            "top-1 after pruning: {:.2}%",
            100.0 * self.accuracy_after_prune
        );
        let _ = writeln!(
            out,
            "top-1 after fine-tuning: {:.2}%",
            100.0 * self.accuracy_after_finetune
        );
        let _ = writeln!(out, "accuracy drop: {:.2}%", 100.0 * self.acc_drop());
        out
    }

    pub fn write(&self, csv_path: &Path, text_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        fs::write(text_path, self.to_text()).map_err(|e| Error::io(text_path, e))
    }
}

pub fn make_report<S: Scalar>(
    model: &str,
    before: &MaskedNetwork<S>,
    after: &MaskedNetwork<S>,
    accuracies: [f64; 3],
) -> PruneReport {
    let [accuracy_before, accuracy_after_prune, accuracy_after_finetune] = accuracies;
    PruneReport {
        model: model.to_string(),
        params_before: count_params(before),
        params_after: count_params(after),
        accuracy_before,
        accuracy_after_prune,
        accuracy_after_finetune,
    }
}
