//! Learnable channel masks that split a feature map into a non-linear part and
//! a linear part.
//!
//! A mask module owns a free vector `m` (one entry per channel) and a small
//! gate `z = tanh(W2 · relu(W1 · m + b1) + b2)`. Thresholding `z` at `tau`
//! gives two complementary binary masks: `mask1` selects channels that go on
//! through the activation, `mask2` selects channels that are routed to an
//! affine-only branch. Binarization has no useful derivative, so its backward
//! rule is a straight-through surrogate (see [`SteConvention`]).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Surrogate Jacobian of the two masks with respect to `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SteConvention {
    /// Both `d mask1/dz` and `d mask2/dz` are taken as `+1`.
    #[default]
    Paper,
    /// `d mask1/dz = +1` and `d mask2/dz = -1`, consistent with `mask2 = 1 - mask1`.
    Chain,
}

impl SteConvention {
    pub fn mask2_weight(self) -> f64 {
        match self {
            SteConvention::Paper => 1.0,
            SteConvention::Chain => -1.0,
        }
    }

    pub fn from_mask2_weight(weight: f64) -> Option<Self> {
        if weight == 1.0 {
            Some(SteConvention::Paper)
        } else if weight == -1.0 {
            Some(SteConvention::Chain)
        } else {
            None
        }
    }
}

impl FromStr for SteConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(SteConvention::Paper),
            "chain" => Ok(SteConvention::Chain),
            other => Err(Error::Config(format!(
                "unknown STE sign convention {other:?} (expected paper|chain)"
            ))),
        }
    }
}

impl fmt::Display for SteConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SteConvention::Paper => "paper",
            SteConvention::Chain => "chain",
        })
    }
}

/// Default hidden width of the gate for `c` channels.
pub fn default_hidden(c: usize) -> usize {
    (c / 4).max(4)
}

/// Parameters of one mask module gating `c` channels through a hidden width `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskModuleParams<S> {
    /// Free vector, length `c`.
    pub m: Tensor<S>,
    /// `h × c`
    pub w1: Tensor<S>,
    /// length `h`
    pub b1: Tensor<S>,
    /// `c × h`
    pub w2: Tensor<S>,
    /// length `c`
    pub b2: Tensor<S>,
    pub tau: S,
}

/// Tape handles of a bound [`MaskModuleParams`].
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub m: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<S: Scalar> MaskModuleParams<S> {
    /// All-zero parameters with `tau = 0`.
    pub fn zeros(c: usize, h: usize) -> Result<Self> {
        if c == 0 || h == 0 {
            return Err(Error::Config(format!(
                "mask module needs c >= 1 and h >= 1, got c={c}, h={h}"
            )));
        }
        Ok(MaskModuleParams {
            m: Tensor::zeros(vec![c]),
            w1: Tensor::zeros(vec![h, c]),
            b1: Tensor::zeros(vec![h]),
            w2: Tensor::zeros(vec![c, h]),
            b2: Tensor::zeros(vec![c]),
            tau: S::zero(),
        })
    }

    /// Random parameters whose gate output is strictly positive everywhere, so
    /// every channel starts on the non-linear side.
    ///
    /// `m ~ N(0, 1)`, `W1`, `W2 ~ U(±1/√fan_in)`, `b1 = 0`. `b2` starts at `+1`
    /// and any entry whose random contribution `W2 · relu(W1 m)` is negative is
    /// raised by that amount, so every pre-activation logit is at least `1`.
    pub fn init_positive(c: usize, h: usize, seed: u64) -> Result<Self> {
        Self::init_positive_from(c, h, &mut substream(seed, "mask-init"))
    }

    /// [`MaskModuleParams::init_positive`] drawing from a caller-owned generator.
    pub fn init_positive_from(c: usize, h: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(c, h)?;
        for v in p.m.data_mut() {
            let x: f64 = StandardNormal.sample(rng);
            *v = S::of(x);
        }
        fill_uniform(rng, p.w1.data_mut(), 1.0 / (c as f64).sqrt());
        fill_uniform(rng, p.w2.data_mut(), 1.0 / (h as f64).sqrt());
        let pre = p.pre_activation()?;
        for (b, &r) in p.b2.data_mut().iter_mut().zip(&pre) {
            // b2 is still zero here, so `pre` is the random part alone
            *b = S::one() + (-r).max(S::zero());
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.m.len()
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> GateVars {
        GateVars {
            m: tape.leaf(self.m.clone()),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    /// `W2 · relu(W1 · m + b1) + b2` evaluated off-tape.
    fn pre_activation(&self) -> Result<Vec<S>> {
        let (c, h) = (self.channels(), self.hidden());
        let hidden: Vec<S> = (0..h)
            .map(|i| {
                let row = &self.w1.data()[i * c..(i + 1) * c];
                let v = row
                    .iter()
                    .zip(self.m.data())
                    .map(|(&w, &x)| w * x)
                    .sum::<S>()
                    + self.b1.data()[i];
                v.max(S::zero())
            })
            .collect();
        Ok((0..c)
            .map(|j| {
                let row = &self.w2.data()[j * h..(j + 1) * h];
                row.iter().zip(&hidden).map(|(&w, &x)| w * x).sum::<S>() + self.b2.data()[j]
            })
            .collect())
    }

    /// Current gate values `z` without recording a graph.
    pub fn gate_values(&self) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let z = gate_logits(&mut tape, &vars)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Current mask pair.
    pub fn masks(&self) -> Result<MaskPair> {
        Ok(binarize(&self.gate_values()?, self.tau))
    }
}

fn fill_uniform<S: Scalar>(rng: &mut impl Rng, out: &mut [S], bound: f64) {
    for v in out {
        *v = S::of(rng.random_range(-bound..bound));
    }
}

/// Records `z = tanh(W2 · relu(W1 · m + b1) + b2)` on `tape`; returns a length-`c` vector.
pub fn gate_logits<S: Scalar>(tape: &mut Tape<S>, g: &GateVars) -> Result<Var> {
    let c = tape.shape(g.m)[0];
    let row = tape.reshape(g.m, vec![1, c])?;
    let w1t = tape.transpose(g.w1)?;
    let hidden = tape.matmul(row, w1t)?;
    let hidden = tape.add_channel(hidden, g.b1)?;
    let hidden = tape.relu(hidden);
    let w2t = tape.transpose(g.w2)?;
    let out = tape.matmul(hidden, w2t)?;
    let out = tape.add_channel(out, g.b2)?;
    let z = tape.tanh(out);
    tape.reshape(z, vec![c])
}

/// Complementary binary channel masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    mask1: Vec<u8>,
    mask2: Vec<u8>,
}

impl MaskPair {
    /// Builds the pair from the non-linear selector; `mask2` is its complement.
    pub fn from_nonlinear(nonlinear: impl IntoIterator<Item = bool>) -> Self {
        let mask1: Vec<u8> = nonlinear.into_iter().map(u8::from).collect();
        let mask2 = mask1.iter().map(|&b| 1 - b).collect();
        MaskPair { mask1, mask2 }
    }

    pub fn all_nonlinear(c: usize) -> Self {
        Self::from_nonlinear(std::iter::repeat_n(true, c))
    }

    /// Non-linear selector.
    pub fn mask1(&self) -> &[u8] {
        &self.mask1
    }

    /// Linear selector.
    pub fn mask2(&self) -> &[u8] {
        &self.mask2
    }

    pub fn channels(&self) -> usize {
        self.mask1.len()
    }

    /// Indices of channels marked non-linear, ascending.
    pub fn nonlinear_indices(&self) -> Vec<usize> {
        self.mask1
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }

    pub fn proportion_nonlinear(&self) -> f64 {
        proportion_nonlinear(&self.mask1)
    }

    pub fn mask1_tensor<S: Scalar>(&self) -> Tensor<S> {
        to_tensor(&self.mask1)
    }

    pub fn mask2_tensor<S: Scalar>(&self) -> Tensor<S> {
        to_tensor(&self.mask2)
    }
}

fn to_tensor<S: Scalar>(bits: &[u8]) -> Tensor<S> {
    Tensor::vector(
        bits.iter()
            .map(|&b| if b == 1 { S::one() } else { S::zero() })
            .collect(),
    )
    .expect("mask has at least one channel")
}

/// `mask1[i] = 1` iff `z[i] > tau`; ties go to the linear side.
pub fn binarize<S: Scalar>(z: &[S], tau: S) -> MaskPair {
    MaskPair::from_nonlinear(z.iter().map(|&v| v > tau))
}

/// `Σ mask1 / c`.
pub fn proportion_nonlinear(mask1: &[u8]) -> f64 {
    if mask1.is_empty() {
        return 0.0;
    }
    let on = mask1.iter().filter(|&&b| b == 1).count();
    on as f64 / mask1.len() as f64
}

/// Gradient reaching `z` from the binarization node, given the upstream
/// gradients on `mask1` and `mask2`.
pub fn ste_backward<S: Scalar>(
    upstream_mask1: &[S],
    upstream_mask2: &[S],
    convention: SteConvention,
) -> Vec<S> {
    let w2 = S::of(convention.mask2_weight());
    upstream_mask1
        .iter()
        .zip(upstream_mask2)
        .map(|(&g1, &g2)| g1 + w2 * g2)
        .collect()
}

/// Feature map split by a [`MaskPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSplit<S> {
    pub nonlinear: Tensor<S>,
    pub linear: Tensor<S>,
}

/// Multiplies each channel of `features` (`N×C×…`) by `mask1` and by `mask2`.
pub fn split_features<S: Scalar>(
    features: &Tensor<S>,
    masks: &MaskPair,
) -> Result<FeatureSplit<S>> {
    let s = features.shape();
    if s.len() < 2 || s[1] != masks.channels() {
        return Err(Error::dim("split_features", s, &[masks.channels()]));
    }
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let mut nonlinear = features.clone();
    let mut linear = features.clone();
    for (i, (a, b)) in nonlinear
        .data_mut()
        .iter_mut()
        .zip(linear.data_mut())
        .enumerate()
    {
        let ch = (i / inner) % c;
        *a *= if masks.mask1[ch] == 1 {
            S::one()
        } else {
            S::zero()
        };
        *b *= if masks.mask2[ch] == 1 {
            S::one()
        } else {
            S::zero()
        };
    }
    Ok(FeatureSplit { nonlinear, linear })
}

/// Masks recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeMasks {
    pub mask1: Var,
    pub mask2: Var,
    pub pair: MaskPair,
}

/// Binarizes the tape vector `z` with straight-through backward rules.
pub fn binarize_ste<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    tau: S,
    convention: SteConvention,
) -> Result<TapeMasks> {
    let pair = binarize(tape.value(z).data(), tau);
    let mask1 = tape.straight_through(z, pair.mask1_tensor(), S::one())?;
    let mask2 = tape.straight_through(z, pair.mask2_tensor(), S::of(convention.mask2_weight()))?;
    Ok(TapeMasks { mask1, mask2, pair })
}

/// Fixed masks placed on the tape as constants.
pub fn constant_masks<S: Scalar>(tape: &mut Tape<S>, pair: &MaskPair) -> TapeMasks {
    TapeMasks {
        mask1: tape.constant(pair.mask1_tensor()),
        mask2: tape.constant(pair.mask2_tensor()),
        pair: pair.clone(),
    }
}

/// `(mask1 ⊙ F, mask2 ⊙ F)` on the tape, channel-wise.
pub fn split_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    masks: &TapeMasks,
) -> Result<(Var, Var)> {
    let nonlinear = tape.mul_channel(features, masks.mask1)?;
    let linear = tape.mul_channel(features, masks.mask2)?;
    Ok((nonlinear, linear))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_examples() {
        let p = binarize(&[0.5, -0.3, 0.0], 0.0);
        assert_eq!(p.mask1(), &[1, 0, 0]);
        assert_eq!(p.mask2(), &[0, 1, 1]);

        let p = binarize(&[0.1, 0.2, 0.9], 0.0);
        assert_eq!(p.mask1(), &[1, 1, 1]);
        assert_eq!(p.mask2(), &[0, 0, 0]);

        let p = binarize(&[-1.0, 1.0, -1.0, 1.0], 0.0);
        assert_eq!(p.mask1(), &[0, 1, 0, 1]);
        assert_eq!(p.mask2(), &[1, 0, 1, 0]);
    }

    #[test]
    fn proportion_examples() {
        assert_eq!(proportion_nonlinear(&[1, 0, 1, 1]), 0.75);
        assert_eq!(proportion_nonlinear(&[1, 1, 1]), 1.0);
        assert_eq!(proportion_nonlinear(&[0, 0]), 0.0);
    }

    #[test]
    fn gate_with_zero_output_layer() {
        let mut p = MaskModuleParams::<f64>::init_positive(6, 4, 3).unwrap();
        p.w2 = Tensor::zeros(vec![6, 4]);
        p.b2 = Tensor::zeros(vec![6]);
        assert!(p.gate_values().unwrap().iter().all(|&z| z == 0.0));

        p.b2 = Tensor::full(vec![6], 20.0);
        let z = p.gate_values().unwrap();
        assert!(z.iter().all(|&v| v > 0.0 && (1.0 - v) < 1e-12));
    }

    #[test]
    fn init_positive_gives_all_nonlinear() {
        for seed in 0..20 {
            let p = MaskModuleParams::<f64>::init_positive(16, 4, seed).unwrap();
            assert!(p.gate_values().unwrap().iter().all(|&z| z > 0.0));
            assert_eq!(p.masks().unwrap().proportion_nonlinear(), 1.0);
        }
        let a = MaskModuleParams::<f64>::init_positive(8, 4, 1).unwrap();
        let b = MaskModuleParams::<f64>::init_positive(8, 4, 2).unwrap();
        assert_ne!(a.m, b.m);
    }

    #[test]
    fn ste_backward_examples() {
        let g = ste_backward(&[0.3, -0.2], &[0.0, 0.0], SteConvention::Paper);
        assert_eq!(g, vec![0.3, -0.2]);
        let g = ste_backward(&[0.0, 0.0], &[0.0, 0.0], SteConvention::Paper);
        assert_eq!(g, vec![0.0, 0.0]);
        let g = ste_backward(&[1.0], &[0.25], SteConvention::Chain);
        assert_eq!(g, vec![0.75]);
    }

    #[test]
    fn split_all_nonlinear_and_channel_mismatch() {
        let f = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let s = split_features(&f, &MaskPair::all_nonlinear(2)).unwrap();
        assert_eq!(s.nonlinear, f);
        assert!(s.linear.data().iter().all(|&v| v == 0.0));
        assert!(split_features(&f, &MaskPair::all_nonlinear(3)).is_err());
    }

    #[test]
    fn convention_parses() {
        assert_eq!(
            "paper".parse::<SteConvention>().unwrap(),
            SteConvention::Paper
        );
        assert_eq!(
            "chain".parse::<SteConvention>().unwrap(),
            SteConvention::Chain
        );
        assert!("other".parse::<SteConvention>().is_err());
    }
}
