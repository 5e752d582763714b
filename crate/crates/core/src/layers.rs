//! Trainable layers. Each layer holds [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward pass on a [`Tape`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gain for layers followed by a ReLU (He-uniform bound `√6/√fan_in`).
pub const RELU_GAIN: f64 = 2.449_489_742_783_178;

pub(crate) fn uniform_tensor<S: Scalar>(
    rng: &mut impl Rng,
    shape: Vec<usize>,
    fan_in: usize,
    gain: f64,
) -> Tensor<S> {
    let bound = gain / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| S::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}

/// Fully-connected map `x · Wᵀ + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
        gain: f64,
    ) -> Self {
        let w = uniform_tensor(rng, vec![out_features, in_features], in_features, gain);
        Self::from_tensors(store, name, w, Tensor::zeros(vec![out_features]), group)
    }

    pub fn from_tensors<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        weight: Tensor<S>,
        bias: Tensor<S>,
        group: ParamGroup,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), weight, group),
            bias: store.add(format!("{name}.bias"), bias, group),
        }
    }

    pub fn in_features<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store.value(self.weight).shape()[1]
    }

    pub fn out_features<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store.value(self.weight).shape()[0]
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let w = bound.var(self.weight);
        let (sx, sw) = (tape.shape(x), tape.shape(w));
        if sx.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim("linear", sx, sw));
        }
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_channel(y, bound.var(self.bias))
    }
}

/// Square-kernel convolution with per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = uniform_tensor(
            rng,
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            RELU_GAIN,
        );
        Self::from_tensors(
            store,
            name,
            w,
            Tensor::zeros(vec![out_channels]),
            stride,
            padding,
        )
    }

    pub fn from_tensors<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        weight: Tensor<S>,
        bias: Tensor<S>,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv {
            weight: store.add(format!("{name}.weight"), weight, ParamGroup::Backbone),
            bias: store.add(format!("{name}.bias"), bias, ParamGroup::Backbone),
            stride,
            padding,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(self.weight), self.stride, self.padding)?;
        tape.add_channel(y, bound.var(self.bias))
    }
}

/// A backbone layer: fully-connected for feature vectors, convolutional for images.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv),
}

impl Layer {
    pub fn weight(&self) -> ParamId {
        match self {
            Layer::Linear(l) => l.weight,
            Layer::Conv(c) => c.weight,
        }
    }

    pub fn bias(&self) -> ParamId {
        match self {
            Layer::Linear(l) => l.bias,
            Layer::Conv(c) => c.bias,
        }
    }

    pub fn out_channels<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store.value(self.weight()).shape()[0]
    }

    pub fn in_channels<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store.value(self.weight()).shape()[1]
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        match self {
            Layer::Linear(l) => l.forward(tape, bound, x),
            Layer::Conv(c) => c.forward(tape, bound, x),
        }
    }
}

/// Learnable per-channel scale and shift, standing in for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ChannelAffine {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self::from_tensors(
            store,
            name,
            Tensor::ones(vec![channels]),
            Tensor::zeros(vec![channels]),
        )
    }

    pub fn from_tensors<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        scale: Tensor<S>,
        shift: Tensor<S>,
    ) -> Self {
        ChannelAffine {
            scale: store.add(format!("{name}.scale"), scale, ParamGroup::Backbone),
            shift: store.add(format!("{name}.shift"), shift, ParamGroup::Backbone),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.mul_channel(x, bound.var(self.scale))?;
        tape.add_channel(y, bound.var(self.shift))
    }
}

/// Affine-only path for linear features: spatial mean per channel, then one
/// fully-connected map. No activation anywhere on this path.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBranchHead {
    pub affine: Linear,
}

impl LinearBranchHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LinearBranchHead {
            affine: Linear::new(store, name, channels, width, ParamGroup::Branch, rng, 1.0),
        }
    }

    pub fn in_channels<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        self.affine.in_features(store)
    }

    pub fn out_width<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        self.affine.out_features(store)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        f_linear: Var,
    ) -> Result<Var> {
        let pooled = tape.global_avg_pool(f_linear)?;
        self.affine.forward(tape, bound, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn store_with_linear(
        w: &[f64],
        b: &[f64],
        out: usize,
        inp: usize,
    ) -> (ParamStore<f64>, Linear) {
        let mut store = ParamStore::new();
        let l = Linear::from_tensors(
            &mut store,
            "fc",
            Tensor::from_f64(vec![out, inp], w).unwrap(),
            Tensor::from_f64(vec![out], b).unwrap(),
            ParamGroup::Backbone,
        );
        (store, l)
    }

    #[test]
    fn fc_identity_and_constant() {
        let (store, l) = store_with_linear(&[1., 0., 0., 1.], &[0., 0.], 2, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(vec![2, 2], &[1., -2., 3., 4.]).unwrap());
        let y = l.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1., -2., 3., 4.]);

        let (store, l) = store_with_linear(&[0.; 6], &[7., -1.], 2, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let y = l.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[7., -1., 7., -1.]);

        let bad = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(l.forward(&mut tape, &bound, bad).is_err());
    }

    #[test]
    fn conv_identity_kernel_and_zero_kernels() {
        let mut store = ParamStore::<f64>::new();
        let id = Conv::from_tensors(
            &mut store,
            "id",
            Tensor::ones(vec![1, 1, 1, 1]),
            Tensor::zeros(vec![1]),
            1,
            0,
        );
        let zero = Conv::from_tensors(
            &mut store,
            "z",
            Tensor::zeros(vec![3, 1, 3, 3]),
            Tensor::zeros(vec![3]),
            1,
            1,
        );
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = Tensor::from_f64(vec![1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let xv = tape.constant(x.clone());
        let y = id.forward(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(y), &x);
        let y = zero.forward(&mut tape, &bound, xv).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branch_head_on_zeros_is_bias_and_identity_is_mean() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(0, "t");
        let head = LinearBranchHead::new(&mut store, "head", 2, 3, &mut rng);
        store.get_mut(head.affine.bias).value = Tensor::from_f64(vec![3], &[0.5, -1., 2.]).unwrap();
        let ident = LinearBranchHead {
            affine: Linear::from_tensors(
                &mut store,
                "ident",
                Tensor::from_f64(vec![2, 2], &[1., 0., 0., 1.]).unwrap(),
                Tensor::zeros(vec![2]),
                ParamGroup::Branch,
            ),
        };
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let zeros = tape.constant(Tensor::zeros(vec![2, 2, 3, 3]));
        let y = head.forward(&mut tape, &bound, zeros).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1., 2., 0.5, -1., 2.]);

        let x = tape.constant(Tensor::from_f64(vec![1, 2, 1, 2], &[1., 3., -2., 6.]).unwrap());
        let y = ident.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 2.]);
    }

    #[test]
    fn channel_affine_scales_and_shifts() {
        let mut store = ParamStore::<f64>::new();
        let a = ChannelAffine::from_tensors(
            &mut store,
            "aff",
            Tensor::from_f64(vec![2], &[2., -1.]).unwrap(),
            Tensor::from_f64(vec![2], &[1., 0.5]).unwrap(),
        );
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(vec![1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let y = a.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 5., -2.5, -3.5]);
    }
}
