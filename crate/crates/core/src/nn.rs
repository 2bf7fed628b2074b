//! A small convolutional network with hand-written forward and backward passes.
//!
//! Architecture: `N` blocks of `conv3x3 (pad 1) → SiLU → avgpool 2×2`, then a
//! dense head on the flattened last pooled map. Block activations (post-SiLU,
//! pre-pool) are exposed as named feature layers `conv1 … convN`.
//!
//! SiLU and average pooling keep the network smooth, so pixel gradients can be
//! checked against finite differences without landing on activation kinks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    /// Square input side the dense head is sized for.
    pub input_size: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub label_names: Vec<String>,
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.channels.len()) || self.channels.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "expected 1-5 non-empty conv blocks, got {:?}",
                self.channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.pooled_side() == 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {} vanishes after {} poolings",
                self.input_size,
                self.channels.len()
            )));
        }
        if !self.label_names.is_empty() && self.label_names.len() != self.num_classes {
            return Err(Error::InvalidConfig("label_names length must equal num_classes".into()));
        }
        Ok(())
    }

    fn pooled_side(&self) -> usize {
        self.channels.iter().fold(self.input_size, |s, _| s / 2)
    }

    /// Length of the flattened vector fed to the dense head.
    pub fn head_inputs(&self) -> usize {
        let s = self.pooled_side();
        s * s * self.channels.last().copied().unwrap_or(0)
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.channels.len()).map(|i| format!("conv{i}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `out × in × 3 × 3`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv3x3<T> {
    fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_ch * 9) as f64).sqrt();
        Self {
            in_ch,
            out_ch,
            weight: (0..out_ch * in_ch * 9)
                .map(|_| T::lit(rng.gen_range(-bound..bound)))
                .collect(),
            bias: vec![T::zero(); out_ch],
        }
    }

    #[inline]
    fn w(&self, co: usize, ci: usize, ky: usize, kx: usize) -> T {
        self.weight[((co * self.in_ch + ci) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Tensor3<T> {
        let (c, h, w) = x.shape();
        assert_eq!(c, self.in_ch, "conv input channels");
        let mut out = Tensor3::zeros(self.out_ch, h, w);
        for co in 0..self.out_ch {
            let dst = out.plane_mut(co);
            dst.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.in_ch {
                let src = x.plane(ci);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wt = self.w(co, ci, ky, kx);
                        let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        for y in 0..h {
                            let sy = y + ky;
                            if sy == 0 || sy > h {
                                continue;
                            }
                            let sy = sy - 1;
                            let s0 = x0 + kx - 1;
                            axpy(
                                wt,
                                &src[sy * w + s0..sy * w + s0 + (x1 - x0)],
                                &mut dst[y * w + x0..y * w + x1],
                            );
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates the input gradient (if requested) and parameter gradients
    /// (if requested) for upstream gradient `g`.
    fn backward(
        &self,
        x: &Tensor3<T>,
        g: &Tensor3<T>,
        grad_in: Option<&mut Tensor3<T>>,
        grads: Option<(&mut [T], &mut [T])>,
    ) {
        let (_, h, w) = x.shape();
        if let Some(gi) = grad_in {
            for co in 0..self.out_ch {
                let gp = g.plane(co);
                for ci in 0..self.in_ch {
                    let dst = gi.plane_mut(ci);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wt = self.w(co, ci, ky, kx);
                            let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                            for y in 0..h {
                                let sy = y + ky;
                                if sy == 0 || sy > h {
                                    continue;
                                }
                                let sy = sy - 1;
                                let s0 = x0 + kx - 1;
                                axpy(
                                    wt,
                                    &gp[y * w + x0..y * w + x1],
                                    &mut dst[sy * w + s0..sy * w + s0 + (x1 - x0)],
                                );
                            }
                        }
                    }
                }
            }
        }
        if let Some((gw, gb)) = grads {
            for co in 0..self.out_ch {
                let gp = g.plane(co);
                gb[co] += gp.iter().copied().sum();
                for ci in 0..self.in_ch {
                    let src = x.plane(ci);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                            let mut acc = T::zero();
                            for y in 0..h {
                                let sy = y + ky;
                                if sy == 0 || sy > h {
                                    continue;
                                }
                                let sy = sy - 1;
                                let s0 = x0 + kx - 1;
                                acc += dot(&gp[y * w + x0..y * w + x1], &src[sy * w + s0..sy * w + s0 + (x1 - x0)]);
                            }
                            gw[((co * self.in_ch + ci) * 3 + ky) * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| T::lit(rng.gen_range(-bound..bound)))
                .collect(),
            bias: vec![T::zero(); outputs],
        }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| self.bias[o] + dot(&self.weight[o * self.inputs..(o + 1) * self.inputs], x))
            .collect()
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
fn silu<T: Scalar>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
fn silu_grad<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

fn avg_pool2<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    Tensor3::from_fn(c, oh, ow, |ch, y, xx| {
        (x.get(ch, 2 * y, 2 * xx)
            + x.get(ch, 2 * y, 2 * xx + 1)
            + x.get(ch, 2 * y + 1, 2 * xx)
            + x.get(ch, 2 * y + 1, 2 * xx + 1))
            * q
    })
}

fn avg_pool2_backward<T: Scalar>(g: &Tensor3<T>, h: usize, w: usize, acc: &mut Tensor3<T>) {
    let q = T::lit(0.25);
    for c in 0..g.channels() {
        for y in 0..g.height() {
            for x in 0..g.width() {
                let v = g.get(c, y, x) * q;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = acc.index(c, 2 * y + dy, 2 * x + dx);
                    acc.data_mut()[i] += v;
                }
            }
        }
    }
    debug_assert!(acc.height() == h && acc.width() == w);
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    inputs: Vec<Tensor3<T>>,
    pre: Vec<Tensor3<T>>,
    /// Post-activation feature maps, one per evaluated block.
    pub activations: Vec<Tensor3<T>>,
    /// Pooled output of the deepest evaluated block.
    pub pooled: Tensor3<T>,
}

/// Parameter gradients, laid out like [`SmallCnn::params_mut`].
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub bufs: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(net: &SmallCnn<T>) -> Self {
        let mut bufs = Vec::new();
        for c in &net.convs {
            bufs.push(vec![T::zero(); c.weight.len()]);
            bufs.push(vec![T::zero(); c.bias.len()]);
        }
        bufs.push(vec![T::zero(); net.head.weight.len()]);
        bufs.push(vec![T::zero(); net.head.bias.len()]);
        Self { bufs }
    }

    pub fn clear(&mut self) {
        self.bufs
            .iter_mut()
            .for_each(|b| b.iter_mut().for_each(|v| *v = T::zero()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnn<T> {
    config: CnnConfig,
    pub(crate) convs: Vec<Conv3x3<T>>,
    pub(crate) head: Dense<T>,
}

impl<T: Scalar> SmallCnn<T> {
    pub fn new_random(config: CnnConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut in_ch = 3;
        for &out_ch in &config.channels {
            convs.push(Conv3x3::init(in_ch, out_ch, rng));
            in_ch = out_ch;
        }
        let head = Dense::init(config.head_inputs(), config.num_classes, rng);
        Ok(Self { config, convs, head })
    }

    pub fn from_parts(config: CnnConfig, convs: Vec<Conv3x3<T>>, head: Dense<T>) -> Result<Self> {
        config.validate()?;
        let mut in_ch = 3;
        for (conv, &out_ch) in convs.iter().zip(&config.channels) {
            if conv.in_ch != in_ch
                || conv.out_ch != out_ch
                || conv.weight.len() != in_ch * out_ch * 9
                || conv.bias.len() != out_ch
            {
                return Err(Error::ShapeMismatch(format!(
                    "conv block {in_ch}->{out_ch} has wrong parameter shapes"
                )));
            }
            in_ch = out_ch;
        }
        if convs.len() != config.channels.len()
            || head.inputs != config.head_inputs()
            || head.outputs != config.num_classes
            || head.weight.len() != head.inputs * head.outputs
            || head.bias.len() != head.outputs
        {
            return Err(Error::ShapeMismatch("dense head does not match the config".into()));
        }
        Ok(Self { config, convs, head })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    pub fn cast<U: Scalar>(&self) -> SmallCnn<U> {
        let cv = |v: &[T]| v.iter().map(|x| x.cast()).collect::<Vec<U>>();
        SmallCnn {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| Conv3x3 {
                    in_ch: c.in_ch,
                    out_ch: c.out_ch,
                    weight: cv(&c.weight),
                    bias: cv(&c.bias),
                })
                .collect(),
            head: Dense {
                inputs: self.head.inputs,
                outputs: self.head.outputs,
                weight: cv(&self.head.weight),
                bias: cv(&self.head.bias),
            },
        }
    }

    /// Runs the first `blocks` conv blocks on a (preprocessed) input.
    pub fn trunk_forward(&self, x: &Tensor3<T>, blocks: usize) -> Trace<T> {
        assert!(blocks >= 1 && blocks <= self.depth(), "block count out of range");
        let mut inputs = Vec::with_capacity(blocks);
        let mut pre = Vec::with_capacity(blocks);
        let mut activations = Vec::with_capacity(blocks);
        let mut cur = x.clone();
        for conv in &self.convs[..blocks] {
            let z = conv.forward(&cur);
            let a = z.map(silu);
            let p = avg_pool2(&a);
            inputs.push(std::mem::replace(&mut cur, p));
            pre.push(z);
            activations.push(a);
        }
        Trace {
            inputs,
            pre,
            activations,
            pooled: cur,
        }
    }

    /// Backpropagates through the evaluated blocks.
    ///
    /// `grad_acts[i]` is an optional gradient on block `i`'s activation,
    /// `grad_pooled` an optional gradient on the deepest pooled map. Returns the
    /// gradient on the network input when `want_input` is set.
    pub fn trunk_backward(
        &self,
        trace: &Trace<T>,
        grad_acts: &[Option<&Tensor3<T>>],
        grad_pooled: Option<&Tensor3<T>>,
        mut param_grads: Option<&mut ParamGrads<T>>,
        want_input: bool,
    ) -> Option<Tensor3<T>> {
        let blocks = trace.activations.len();
        let mut g_pool = grad_pooled.cloned();
        for i in (0..blocks).rev() {
            let a = &trace.activations[i];
            let (c, h, w) = a.shape();
            let mut g_a = match grad_acts.get(i).copied().flatten() {
                Some(g) => g.clone(),
                None => Tensor3::zeros(c, h, w),
            };
            if let Some(gp) = &g_pool {
                avg_pool2_backward(gp, h, w, &mut g_a);
            }
            let z = &trace.pre[i];
            for (gv, &zv) in g_a.data_mut().iter_mut().zip(z.data()) {
                *gv *= silu_grad(zv);
            }
            let need_input = i > 0 || want_input;
            let x = &trace.inputs[i];
            let mut g_in = need_input.then(|| Tensor3::zeros(x.channels(), x.height(), x.width()));
            let pg = param_grads.as_deref_mut().map(|pg| {
                let (wb, rest) = pg.bufs[2 * i..].split_at_mut(1);
                (wb[0].as_mut_slice(), rest[0].as_mut_slice())
            });
            self.convs[i].backward(x, &g_a, g_in.as_mut(), pg);
            g_pool = g_in;
        }
        g_pool
    }

    /// Logits for an input already at `input_size × input_size`.
    pub fn logits(&self, x: &Tensor3<T>) -> (Trace<T>, Vec<T>) {
        let trace = self.trunk_forward(x, self.depth());
        let logits = self.head.forward(trace.pooled.data());
        (trace, logits)
    }

    /// Gradient of a scalar with `∂/∂logits = grad_logits` with respect to the
    /// input, optionally accumulating parameter gradients.
    pub fn logits_backward(
        &self,
        trace: &Trace<T>,
        grad_logits: &[T],
        mut param_grads: Option<&mut ParamGrads<T>>,
        want_input: bool,
    ) -> Option<Tensor3<T>> {
        let n = self.head.inputs;
        let flat = trace.pooled.data();
        let mut g_flat = vec![T::zero(); n];
        for (o, &g) in grad_logits.iter().enumerate() {
            let row = &self.head.weight[o * n..(o + 1) * n];
            axpy(g, row, &mut g_flat);
        }
        if let Some(pg) = param_grads.as_deref_mut() {
            let k = pg.bufs.len();
            let (wb, bb) = pg.bufs[k - 2..].split_at_mut(1);
            for (o, &g) in grad_logits.iter().enumerate() {
                axpy(g, flat, &mut wb[0][o * n..(o + 1) * n]);
                bb[0][o] += g;
            }
        }
        let p = &trace.pooled;
        let g_pooled =
            Tensor3::from_vec(p.channels(), p.height(), p.width(), g_flat).expect("head input matches pooled shape");
        self.trunk_backward(trace, &[], Some(&g_pooled), param_grads, want_input)
    }

    /// Mutable parameter slices in a fixed order (conv weight, conv bias, ...,
    /// head weight, head bias).
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pulls a gradient on softmax probabilities back to the logits.
pub fn softmax_backward<T: Scalar>(probs: &[T], grad_probs: &[T]) -> Vec<T> {
    let inner = dot(probs, grad_probs);
    probs.iter().zip(grad_probs).map(|(&p, &g)| p * (g - inner)).collect()
}
