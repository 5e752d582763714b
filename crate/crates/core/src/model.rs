//! Masked networks: backbone blocks, mask modules placed before block
//! activations, affine branch heads for linear features, and a classifier over
//! the concatenation of every branch embedding and the final features.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::layers::{
    uniform_tensor, ChannelAffine, Conv, Layer, Linear, LinearBranchHead, RELU_GAIN,
};
use crate::mask::{
    binarize_ste, constant_masks, default_hidden, gate_logits, split_on_tape, GateVars,
    MaskModuleParams, MaskPair, SteConvention,
};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Fully-connected blocks over feature vectors.
    Mlp,
    /// 3×3 convolution blocks with 2×2 max-pooling between blocks.
    ConvNet,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-m" | "mlp" => Ok(ModelKind::Mlp),
            "convnet-m" | "convnet" => Ok(ModelKind::ConvNet),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected mlp-m|convnet-m)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mlp => "mlp-m",
            ModelKind::ConvNet => "convnet-m",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Shape of one sample: `[features]` for mlp-m, `[C, H, W]` for convnet-m.
    pub input_shape: Vec<usize>,
    /// Output width (mlp-m) or channel count (convnet-m) of each block.
    pub widths: Vec<usize>,
    /// Block indices carrying a mask module, strictly increasing.
    pub mask_placement: Vec<usize>,
    pub residual: bool,
    pub channel_affine: bool,
    pub classes: usize,
    pub kernel_size: usize,
    /// Hidden width of every gate; `None` uses [`default_hidden`].
    pub mask_hidden: Option<usize>,
    /// Output width of every branch head; `None` uses the gated channel count.
    pub branch_width: Option<usize>,
    pub ste: SteConvention,
    pub tau: f64,
}

impl ModelConfig {
    /// Two 16-wide hidden blocks with a mask module on the second.
    pub fn mlp_m(inputs: usize, classes: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            input_shape: vec![inputs],
            widths: vec![16, 16],
            mask_placement: vec![1],
            residual: false,
            channel_affine: false,
            classes,
            kernel_size: 3,
            mask_hidden: None,
            branch_width: None,
            ste: SteConvention::Paper,
            tau: 0.0,
        }
    }

    /// Three convolution blocks (16, 32, 64 channels) with mask modules on the first two.
    pub fn convnet_m(input_shape: [usize; 3], classes: usize) -> Self {
        ModelConfig {
            kind: ModelKind::ConvNet,
            input_shape: input_shape.to_vec(),
            widths: vec![16, 32, 64],
            mask_placement: vec![0, 1],
            residual: false,
            channel_affine: false,
            classes,
            kernel_size: 3,
            mask_hidden: None,
            branch_width: None,
            ste: SteConvention::Paper,
            tau: 0.0,
        }
    }

    pub fn without_masks(mut self) -> Self {
        self.mask_placement.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!(
                "block widths must be non-empty and positive, got {:?}",
                self.widths
            ));
        }
        if self.classes == 0 {
            return bad("class count must be positive".into());
        }
        match self.kind {
            ModelKind::Mlp if self.input_shape.len() != 1 => {
                return bad(format!(
                    "mlp-m expects a 1-d input shape, got {:?}",
                    self.input_shape
                ))
            }
            ModelKind::ConvNet if self.input_shape.len() != 3 => {
                return bad(format!(
                    "convnet-m expects a C×H×W input shape, got {:?}",
                    self.input_shape
                ))
            }
            _ => {}
        }
        if self.input_shape.contains(&0) {
            return bad(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            ));
        }
        if !self.mask_placement.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!(
                "mask placement {:?} is not strictly increasing",
                self.mask_placement
            ));
        }
        if let Some(&last) = self.mask_placement.last() {
            if last >= self.widths.len() {
                return bad(format!(
                    "mask placement index {last} out of range for {} blocks",
                    self.widths.len()
                ));
            }
        }
        if self.mask_hidden == Some(0) || self.branch_width == Some(0) {
            return bad("mask hidden width and branch width must be positive".into());
        }
        if !self.tau.is_finite() {
            return bad("threshold must be finite".into());
        }
        if self.kind == ModelKind::ConvNet && self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        Ok(())
    }
}

/// Mask module registered in a network's parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskModule<S> {
    pub m: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    pub tau: S,
}

impl<S: Scalar> MaskModule<S> {
    pub fn register(store: &mut ParamStore<S>, name: &str, p: MaskModuleParams<S>) -> Self {
        let m = store.add(format!("{name}.m"), p.m, ParamGroup::Mask);
        let fc1 = Linear::from_tensors(store, &format!("{name}.fc1"), p.w1, p.b1, ParamGroup::Mask);
        let fc2 = Linear::from_tensors(store, &format!("{name}.fc2"), p.w2, p.b2, ParamGroup::Mask);
        MaskModule {
            m,
            fc1,
            fc2,
            tau: p.tau,
        }
    }

    pub fn params(&self, store: &ParamStore<S>) -> MaskModuleParams<S> {
        MaskModuleParams {
            m: store.value(self.m).clone(),
            w1: store.value(self.fc1.weight).clone(),
            b1: store.value(self.fc1.bias).clone(),
            w2: store.value(self.fc2.weight).clone(),
            b2: store.value(self.fc2.bias).clone(),
            tau: self.tau,
        }
    }

    pub fn set_params(&mut self, store: &mut ParamStore<S>, p: MaskModuleParams<S>) -> Result<()> {
        let pairs = [
            (self.m, p.m),
            (self.fc1.weight, p.w1),
            (self.fc1.bias, p.b1),
            (self.fc2.weight, p.w2),
            (self.fc2.bias, p.b2),
        ];
        for (id, value) in pairs {
            let slot = &mut store.get_mut(id).value;
            if slot.shape() != value.shape() {
                return Err(Error::dim("set mask params", slot.shape(), value.shape()));
            }
            *slot = value;
        }
        self.tau = p.tau;
        Ok(())
    }

    pub fn gate_vars(&self, bound: &Bound) -> GateVars {
        GateVars {
            m: bound.var(self.m),
            w1: bound.var(self.fc1.weight),
            b1: bound.var(self.fc1.bias),
            w2: bound.var(self.fc2.weight),
            b2: bound.var(self.fc2.bias),
        }
    }

    pub fn channels(&self, store: &ParamStore<S>) -> usize {
        store.value(self.m).len()
    }

    pub fn masks(&self, store: &ParamStore<S>) -> Result<MaskPair> {
        self.params(store).masks()
    }
}

/// What happens to a block's pre-activation features.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate<S> {
    /// Everything goes through the activation.
    None,
    /// Learned split; linear channels go to `head`.
    Learned {
        module: MaskModule<S>,
        head: LinearBranchHead,
    },
    /// Split by constant masks (after pruning); linear channels go to `head`.
    Frozen {
        masks: MaskPair,
        head: LinearBranchHead,
    },
}

impl<S> Gate<S> {
    pub fn head(&self) -> Option<&LinearBranchHead> {
        match self {
            Gate::None => None,
            Gate::Learned { head, .. } | Gate::Frozen { head, .. } => Some(head),
        }
    }

    pub fn is_gated(&self) -> bool {
        !matches!(self, Gate::None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub layer: Layer,
    /// Second layer of a residual block; its output is added to `layer`'s output.
    pub inner: Option<Layer>,
    /// Channels of `layer`'s output that feed the skip addition (set by pruning).
    pub skip_select: Option<Vec<usize>>,
    pub affine: Option<ChannelAffine>,
    pub gate: Gate<S>,
    /// Max-pool window and stride applied after the activation.
    pub pool: Option<(usize, usize)>,
    /// Channels of the block output passed on to the next block (set by pruning).
    pub output_select: Option<Vec<usize>>,
}

impl<S: Scalar> Block<S> {
    /// Layer whose output channels are the gated channels.
    pub fn last_layer(&self) -> &Layer {
        self.inner.as_ref().unwrap_or(&self.layer)
    }

    /// Channels of the pre-activation feature map.
    pub fn feature_channels(&self, store: &ParamStore<S>) -> usize {
        self.last_layer().out_channels(store)
    }

    /// Channels handed to the next block.
    pub fn output_channels(&self, store: &ParamStore<S>) -> usize {
        self.output_select
            .as_ref()
            .map_or_else(|| self.feature_channels(store), Vec::len)
    }
}

/// Tape handles and mask state of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub bound: Bound,
    /// Masks of gated blocks, in block order.
    pub masks: Vec<MaskPair>,
    /// Gate output `z` of each learned mask module, in block order.
    pub gate_z: Vec<Var>,
    /// Classifier input (branch embeddings then final features).
    pub features: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNetwork<S> {
    pub kind: ModelKind,
    pub input_shape: Vec<usize>,
    pub ste: SteConvention,
    pub store: ParamStore<S>,
    pub blocks: Vec<Block<S>>,
    pub classifier: Linear,
}

impl<S: Scalar> MaskedNetwork<S> {
    /// Deterministic construction from `config` and `seed`.
    ///
    /// Each component draws from its own named random stream, so a network
    /// without mask modules gets exactly the same backbone and final-feature
    /// classifier columns as its masked counterpart.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut head_widths = Vec::new();
        let mut in_width = config.input_shape[0];
        let last = config.widths.len() - 1;
        for (i, &width) in config.widths.iter().enumerate() {
            let mut rng = substream(seed, &format!("init/block{i}"));
            let name = format!("block{i}");
            let make = |store: &mut ParamStore<S>, rng: &mut _, suffix: &str, inp: usize| {
                match config.kind {
                    ModelKind::Mlp => Layer::Linear(Linear::new(
                        store,
                        &format!("{name}.{suffix}"),
                        inp,
                        width,
                        ParamGroup::Backbone,
                        rng,
                        RELU_GAIN,
                    )),
                    ModelKind::ConvNet => Layer::Conv(Conv::new(
                        store,
                        &format!("{name}.{suffix}"),
                        inp,
                        width,
                        config.kernel_size,
                        1,
                        config.kernel_size / 2,
                        rng,
                    )),
                }
            };
            let layer = make(&mut store, &mut rng, "layer", in_width);
            let inner = config
                .residual
                .then(|| make(&mut store, &mut rng, "inner", width));
            let affine = config
                .channel_affine
                .then(|| ChannelAffine::new(&mut store, &format!("{name}.affine"), width));
            let gate = if config.mask_placement.contains(&i) {
                let hidden = config.mask_hidden.unwrap_or_else(|| default_hidden(width));
                let mut mrng = substream(seed, &format!("init/mask{i}"));
                let mut p = MaskModuleParams::init_positive_from(width, hidden, &mut mrng)?;
                p.tau = S::of(config.tau);
                let module = MaskModule::register(&mut store, &format!("{name}.mask"), p);
                let d = config.branch_width.unwrap_or(width);
                let mut hrng = substream(seed, &format!("init/head{i}"));
                let head =
                    LinearBranchHead::new(&mut store, &format!("{name}.head"), width, d, &mut hrng);
                head_widths.push((i, d));
                Gate::Learned { module, head }
            } else {
                Gate::None
            };
            let pool = (config.kind == ModelKind::ConvNet && i < last).then_some((2, 2));
            blocks.push(Block {
                layer,
                inner,
                skip_select: None,
                affine,
                gate,
                pool,
                output_select: None,
            });
            in_width = width;
        }

        let final_width = config.widths[last];
        let total = final_width + head_widths.iter().map(|&(_, d)| d).sum::<usize>();
        let mut weight = Vec::with_capacity(config.classes * total);
        let mut segments: Vec<Tensor<S>> = head_widths
            .iter()
            .map(|&(i, d)| {
                let mut rng = substream(seed, &format!("init/classifier/branch{i}"));
                uniform_tensor(&mut rng, vec![config.classes, d], d, 1.0)
            })
            .collect();
        let mut rng = substream(seed, "init/classifier");
        segments.push(uniform_tensor(
            &mut rng,
            vec![config.classes, final_width],
            final_width,
            1.0,
        ));
        for k in 0..config.classes {
            for seg in &segments {
                let w = seg.shape()[1];
                weight.extend_from_slice(&seg.data()[k * w..(k + 1) * w]);
            }
        }
        let classifier = Linear::from_tensors(
            &mut store,
            "classifier",
            Tensor::new(vec![config.classes, total], weight)?,
            Tensor::zeros(vec![config.classes]),
            ParamGroup::Backbone,
        );

        let net = MaskedNetwork {
            kind: config.kind,
            input_shape: config.input_shape.clone(),
            ste: config.ste,
            store,
            blocks,
            classifier,
        };
        net.check_shapes()?;
        Ok(net)
    }

    /// Dry run on one zero sample, surfacing geometry problems as configuration errors.
    pub(crate) fn check_shapes(&self) -> Result<()> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let x = Tensor::zeros(shape);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        self.forward(&mut tape, xv)
            .map(|_| ())
            .map_err(|e| match e {
                Error::Dimension { .. } | Error::Config(_) | Error::Data(_) => {
                    Error::Config(format!("network geometry is inconsistent: {e}"))
                }
                other => other,
            })
    }

    /// Records the forward pass for the batch `x` on `tape`.
    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<ForwardPass> {
        let xs = tape.shape(x);
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            let mut expected = vec![xs.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::dim("network input", xs, &expected));
        }
        let bound = self.store.bind(tape);
        let mut h = x;
        let mut embeddings = Vec::new();
        let mut masks = Vec::new();
        let mut gate_z = Vec::new();
        for block in &self.blocks {
            let a = block.layer.forward(tape, &bound, h)?;
            let mut f = match &block.inner {
                Some(inner) => {
                    let r = tape.relu(a);
                    let b = inner.forward(tape, &bound, r)?;
                    let skip = match &block.skip_select {
                        Some(idx) => tape.select_channels(a, idx)?,
                        None => a,
                    };
                    tape.add(b, skip)?
                }
                None => a,
            };
            if let Some(affine) = &block.affine {
                f = affine.forward(tape, &bound, f)?;
            }
            let tape_masks = match &block.gate {
                Gate::None => None,
                Gate::Learned { module, head } => {
                    let z = gate_logits(tape, &module.gate_vars(&bound))?;
                    gate_z.push(z);
                    Some((binarize_ste(tape, z, module.tau, self.ste)?, head))
                }
                Gate::Frozen { masks, head } => Some((constant_masks(tape, masks), head)),
            };
            if let Some((m, head)) = tape_masks {
                let (nonlinear, linear) = split_on_tape(tape, f, &m)?;
                embeddings.push(head.forward(tape, &bound, linear)?);
                masks.push(m.pair);
                f = nonlinear;
            }
            h = tape.relu(f);
            if let Some((k, stride)) = block.pool {
                h = tape.maxpool2d(h, k, stride)?;
            }
            if let Some(idx) = &block.output_select {
                h = tape.select_channels(h, idx)?;
            }
        }
        let final_features = match self.kind {
            ModelKind::Mlp => h,
            ModelKind::ConvNet => tape.global_avg_pool(h)?,
        };
        let features = if embeddings.is_empty() {
            final_features
        } else {
            embeddings.push(final_features);
            tape.concat(&embeddings, 1)?
        };
        let logits = self.classifier.forward(tape, &bound, features)?;
        Ok(ForwardPass {
            logits,
            bound,
            masks,
            gate_z,
            features,
        })
    }

    /// Logits for a batch, without keeping the graph.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.forward(&mut tape, xv)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Logits together with the current masks and `P_nonlinear` of every gated block.
    pub fn forward_collect(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<MaskPair>, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.forward(&mut tape, xv)?;
        let proportions = pass
            .masks
            .iter()
            .map(MaskPair::proportion_nonlinear)
            .collect();
        Ok((tape.value(pass.logits).clone(), pass.masks, proportions))
    }

    /// Current masks of gated blocks without running the backbone.
    pub fn current_masks(&self) -> Result<Vec<MaskPair>> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.gate {
                Gate::None => None,
                Gate::Learned { module, .. } => Some(module.masks(&self.store)),
                Gate::Frozen { masks, .. } => Some(Ok(masks.clone())),
            })
            .collect()
    }

    /// Indices of blocks carrying a gate, in order.
    pub fn gated_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&i| self.blocks[i].gate.is_gated())
            .collect()
    }

    /// Learned mask module of block `block`, if any.
    pub fn mask_module(&self, block: usize) -> Option<&MaskModule<S>> {
        match &self.blocks.get(block)?.gate {
            Gate::Learned { module, .. } => Some(module),
            _ => None,
        }
    }

    pub fn mask_params(&self, block: usize) -> Option<MaskModuleParams<S>> {
        self.mask_module(block).map(|m| m.params(&self.store))
    }

    pub fn set_mask_params(&mut self, block: usize, p: MaskModuleParams<S>) -> Result<()> {
        match self.blocks.get_mut(block).map(|b| &mut b.gate) {
            Some(Gate::Learned { module, .. }) => module.set_params(&mut self.store, p),
            _ => Err(Error::Usage(format!(
                "block {block} has no learned mask module"
            ))),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_features(&self.store)
    }

    pub fn classifier_width(&self) -> usize {
        self.classifier.in_features(&self.store)
    }

    /// Width of the final non-linear features entering the classifier.
    pub fn final_width(&self) -> usize {
        self.blocks
            .last()
            .map_or(0, |b| b.output_channels(&self.store))
    }

    /// Total trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.store.scalar_count(None)
    }

    /// Named tensors describing the whole network, parameters and structure.
    pub fn to_entries(&self) -> Vec<(String, Tensor<f64>)> {
        let f = |v: &[f64]| Tensor::<f64>::from_f64(vec![v.len().max(1)], v).expect("non-empty");
        let idx = |v: &[usize]| f(&v.iter().map(|&i| i as f64).collect::<Vec<_>>());
        let mut out = vec![
            (
                "meta.kind".to_string(),
                f(&[if self.kind == ModelKind::ConvNet {
                    1.0
                } else {
                    0.0
                }]),
            ),
            ("meta.input_shape".to_string(), idx(&self.input_shape)),
            ("meta.ste".to_string(), f(&[self.ste.mask2_weight()])),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let (stride, padding) = match &b.layer {
                Layer::Conv(c) => (c.stride, c.padding),
                Layer::Linear(_) => (0, 0),
            };
            let (pk, ps) = b.pool.unwrap_or((0, 0));
            out.push((format!("block{i}.layout"), idx(&[pk, ps, stride, padding])));
            if let Some(s) = &b.skip_select {
                out.push((format!("block{i}.skip_select"), idx(s)));
            }
            if let Some(s) = &b.output_select {
                out.push((format!("block{i}.output_select"), idx(s)));
            }
            match &b.gate {
                Gate::Learned { module, .. } => {
                    out.push((
                        format!("block{i}.mask.tau"),
                        f(&[module.tau.to_f64_lossy()]),
                    ));
                }
                Gate::Frozen { masks, .. } => {
                    let bits: Vec<f64> = masks.mask1().iter().map(|&b| f64::from(b)).collect();
                    out.push((format!("block{i}.frozen_mask1"), f(&bits)));
                }
                Gate::None => {}
            }
        }
        for p in self.store.iter() {
            let data: Vec<f64> = p.value.data().iter().map(|v| v.to_f64_lossy()).collect();
            out.push((
                p.name.clone(),
                Tensor::new(p.value.shape().to_vec(), data).expect("same shape"),
            ));
        }
        out
    }

    /// Inverse of [`MaskedNetwork::to_entries`].
    pub fn from_entries(entries: Vec<(String, Tensor<f64>)>) -> Result<Self> {
        let mut map: HashMap<String, Tensor<f64>> = HashMap::with_capacity(entries.len());
        for (name, t) in entries {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::format(
                    "checkpoint",
                    format!("duplicate entry {name}"),
                ));
            }
        }
        let missing = |name: &str| Error::format("checkpoint", format!("missing entry {name}"));
        let take = |map: &mut HashMap<String, Tensor<f64>>, name: &str| {
            map.remove(name).ok_or_else(|| missing(name))
        };
        let as_indices = |t: &Tensor<f64>| -> Result<Vec<usize>> {
            t.data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::format(
                            "checkpoint",
                            format!("non-integral index {v}"),
                        ))
                    }
                })
                .collect()
        };
        let cast = |t: Tensor<f64>| -> Tensor<S> {
            let shape = t.shape().to_vec();
            Tensor::new(shape, t.into_data().into_iter().map(S::of).collect()).expect("same shape")
        };

        let kind = match take(&mut map, "meta.kind")?.data()[0] {
            0.0 => ModelKind::Mlp,
            1.0 => ModelKind::ConvNet,
            v => {
                return Err(Error::format(
                    "checkpoint",
                    format!("unknown model kind {v}"),
                ))
            }
        };
        let input_shape = as_indices(&take(&mut map, "meta.input_shape")?)?;
        let ste_weight = take(&mut map, "meta.ste")?.data()[0];
        let ste = SteConvention::from_mask2_weight(ste_weight).ok_or_else(|| {
            Error::format("checkpoint", format!("unknown STE weight {ste_weight}"))
        })?;

        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let mut i = 0;
        while let Some(layout) = map.remove(&format!("block{i}.layout")) {
            let layout = as_indices(&layout)?;
            if layout.len() != 4 {
                return Err(Error::format(
                    "checkpoint",
                    format!("block{i}.layout has {} entries", layout.len()),
                ));
            }
            let name = format!("block{i}");
            let layer_of = |store: &mut ParamStore<S>,
                            map: &mut HashMap<String, Tensor<f64>>,
                            suffix: &str|
             -> Result<Option<Layer>> {
                let wname = format!("{name}.{suffix}.weight");
                let Some(w) = map.remove(&wname) else {
                    return Ok(None);
                };
                let b = map
                    .remove(&format!("{name}.{suffix}.bias"))
                    .ok_or_else(|| missing(&wname))?;
                let lname = format!("{name}.{suffix}");
                Ok(Some(match w.rank() {
                    2 => Layer::Linear(Linear::from_tensors(
                        store,
                        &lname,
                        cast(w),
                        cast(b),
                        ParamGroup::Backbone,
                    )),
                    4 => Layer::Conv(Conv::from_tensors(
                        store,
                        &lname,
                        cast(w),
                        cast(b),
                        layout[2],
                        layout[3],
                    )),
                    r => return Err(Error::format("checkpoint", format!("{wname} has rank {r}"))),
                }))
            };
            let layer = layer_of(&mut store, &mut map, "layer")?
                .ok_or_else(|| missing(&format!("{name}.layer.weight")))?;
            let inner = layer_of(&mut store, &mut map, "inner")?;
            let affine = match map.remove(&format!("{name}.affine.scale")) {
                Some(scale) => {
                    let shift = map
                        .remove(&format!("{name}.affine.shift"))
                        .ok_or_else(|| missing(&format!("{name}.affine.shift")))?;
                    Some(ChannelAffine::from_tensors(
                        &mut store,
                        &format!("{name}.affine"),
                        cast(scale),
                        cast(shift),
                    ))
                }
                None => None,
            };
            let head_of = |store: &mut ParamStore<S>,
                           map: &mut HashMap<String, Tensor<f64>>|
             -> Result<LinearBranchHead> {
                let w = map
                    .remove(&format!("{name}.head.weight"))
                    .ok_or_else(|| missing(&format!("{name}.head.weight")))?;
                let b = map
                    .remove(&format!("{name}.head.bias"))
                    .ok_or_else(|| missing(&format!("{name}.head.bias")))?;
                Ok(LinearBranchHead {
                    affine: Linear::from_tensors(
                        store,
                        &format!("{name}.head"),
                        cast(w),
                        cast(b),
                        ParamGroup::Branch,
                    ),
                })
            };
            let gate = if let Some(tau) = map.remove(&format!("{name}.mask.tau")) {
                let mut grab = |suffix: &str| -> Result<Tensor<S>> {
                    let key = format!("{name}.mask.{suffix}");
                    map.remove(&key).map(cast).ok_or_else(|| missing(&key))
                };
                let p = MaskModuleParams {
                    m: grab("m")?,
                    w1: grab("fc1.weight")?,
                    b1: grab("fc1.bias")?,
                    w2: grab("fc2.weight")?,
                    b2: grab("fc2.bias")?,
                    tau: S::of(tau.data()[0]),
                };
                let module = MaskModule::register(&mut store, &format!("{name}.mask"), p);
                let head = head_of(&mut store, &mut map)?;
                Gate::Learned { module, head }
            } else if let Some(bits) = map.remove(&format!("{name}.frozen_mask1")) {
                let masks = MaskPair::from_nonlinear(bits.data().iter().map(|&b| b == 1.0));
                let head = head_of(&mut store, &mut map)?;
                Gate::Frozen { masks, head }
            } else {
                Gate::None
            };
            let skip_select = map
                .remove(&format!("{name}.skip_select"))
                .map(|t| as_indices(&t))
                .transpose()?;
            let output_select = map
                .remove(&format!("{name}.output_select"))
                .map(|t| as_indices(&t))
                .transpose()?;
            blocks.push(Block {
                layer,
                inner,
                skip_select,
                affine,
                gate,
                pool: (layout[0] > 0).then_some((layout[0], layout[1])),
                output_select,
            });
            i += 1;
        }
        if blocks.is_empty() {
            return Err(Error::format("checkpoint", "no blocks"));
        }
        let cw = take(&mut map, "classifier.weight")?;
        let cb = take(&mut map, "classifier.bias")?;
        let classifier = Linear::from_tensors(
            &mut store,
            "classifier",
            cast(cw),
            cast(cb),
            ParamGroup::Backbone,
        );
        if let Some(extra) = map.keys().min() {
            return Err(Error::format(
                "checkpoint",
                format!("unexpected entry {extra}"),
            ));
        }
        let net = MaskedNetwork {
            kind,
            input_shape,
            ste,
            store,
            blocks,
            classifier,
        };
        net.check_shapes()
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_classifier_width_counts_branch() {
        let net = MaskedNetwork::<f64>::build(&ModelConfig::mlp_m(3, 2), 0).unwrap();
        assert_eq!(net.classifier_width(), 16 + 16);
        assert_eq!(net.gated_blocks(), vec![1]);
    }

    #[test]
    fn empty_placement_is_plain_baseline() {
        let cfg = ModelConfig::convnet_m([1, 8, 8], 3).without_masks();
        let net = MaskedNetwork::<f64>::build(&cfg, 0).unwrap();
        assert_eq!(net.classifier_width(), 64);
        assert!(net.gated_blocks().is_empty());
    }

    #[test]
    fn invalid_placement_rejected() {
        let mut cfg = ModelConfig::mlp_m(3, 2);
        cfg.mask_placement = vec![2];
        assert!(matches!(
            MaskedNetwork::<f64>::build(&cfg, 0),
            Err(Error::Config(_))
        ));
        cfg.mask_placement = vec![1, 0];
        assert!(matches!(
            MaskedNetwork::<f64>::build(&cfg, 0),
            Err(Error::Config(_))
        ));
        cfg.mask_placement = vec![1, 1];
        assert!(matches!(
            MaskedNetwork::<f64>::build(&cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn too_small_image_is_a_config_error() {
        let cfg = ModelConfig::convnet_m([1, 2, 2], 3);
        assert!(matches!(
            MaskedNetwork::<f64>::build(&cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let net = MaskedNetwork::<f64>::build(&ModelConfig::mlp_m(3, 2), 0).unwrap();
        let x = Tensor::zeros(vec![2, 4]);
        assert!(matches!(net.logits(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn entries_round_trip() {
        let mut cfg = ModelConfig::convnet_m([1, 8, 8], 3);
        cfg.residual = true;
        cfg.channel_affine = true;
        let net = MaskedNetwork::<f64>::build(&cfg, 5).unwrap();
        let back = MaskedNetwork::<f64>::from_entries(net.to_entries()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn convnet_gates_stay_under_five_percent_of_backbone() {
        for shape in [[1, 16, 16], [3, 32, 32]] {
            let net = MaskedNetwork::<f64>::build(&ModelConfig::convnet_m(shape, 10), 0).unwrap();
            let gates = net.store.scalar_count(Some(ParamGroup::Mask));
            let backbone = net.store.scalar_count(Some(ParamGroup::Backbone));
            assert!(gates * 20 < backbone, "{gates} vs {backbone}");
        }
    }
}
