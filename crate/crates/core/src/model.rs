//! Attention-gated U-Net with an iterative feedback loop.
//!
//! Pass `t = 0` runs the four-stage encoder once. Every later pass fuses the
//! previous full-resolution decoder feature `d1` into the stored stage 2-4
//! encoder features, re-gates the skips, and decodes again. All passes share
//! one set of decoder, head and normalization layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::LabelMask;
use crate::params::{Binding, ParamId, ParamStore};
use crate::preprocess::InputChannels;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Channel-attention bottleneck ratio.
pub const CA_REDUCTION: usize = 8;
pub const SA_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipAttention {
    /// CA on s1, residual CA+SA on s2 and s3.
    #[default]
    Default,
    /// Skips pass through ungated.
    None,
    /// Residual CA+SA on every skip.
    SaAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub base_width: usize,
    /// Feedback iterations `T`; the network makes `T + 1` passes.
    pub iterations: usize,
    pub use_luma_channels: bool,
    pub skip_attention: SkipAttention,
    pub use_ifm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            base_width: 48,
            iterations: 3,
            use_luma_channels: true,
            skip_attention: SkipAttention::Default,
            use_ifm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < CA_REDUCTION {
            return Err(Error::Config(format!("base_width {} is below {CA_REDUCTION}", self.base_width)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} is below 2", self.num_classes)));
        }
        Ok(())
    }

    /// `T` actually run; disabling the feedback module leaves a single pass.
    pub fn effective_iterations(&self) -> usize {
        if self.use_ifm {
            self.iterations
        } else {
            0
        }
    }

    pub fn input_channels(&self) -> InputChannels {
        if self.use_luma_channels {
            InputChannels::RgbLuma
        } else {
            InputChannels::Rgb
        }
    }

    /// Width of encoder stage `k` (1-based).
    pub fn stage_width(&self, k: usize) -> usize {
        self.base_width << (k - 1)
    }
}

/// `eta_t = w * (t + 1)` for `t = 0..=T`.
///
/// Evaluated as `(t + 1) / (1 / w)` so that decimal steps such as `0.1` give
/// the nearest doubles to `0.3`, `0.7`, ... rather than accumulating a product error.
pub fn iteration_weights(iterations: usize, w: f64) -> Vec<f64> {
    let inv = 1.0 / w;
    (0..=iterations).map(|t| (t + 1) as f64 / inv).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// One forward pass over a graph.
pub struct Pass<'a, F> {
    pub graph: &'a mut Graph<F>,
    pub store: &'a mut ParamStore<F>,
    pub binding: &'a mut Binding,
    pub mode: Mode,
}

impl<F: Scalar> Pass<'_, F> {
    fn param(&mut self, id: ParamId) -> Var {
        self.binding.var(self.graph, self.store, id)
    }
}

fn kaiming<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| F::lit(rng.normal() * std))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        padding: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming(&[cout, cin, k, k], cin * k * k, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self { weight, bias, stride: 1, padding }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Pass<F>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[c]), false),
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Pass<F>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let eps = F::lit(BN_EPS);
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.graph.batchnorm2d_train(x, gamma, beta, eps)?;
                let m = F::lit(BN_MOMENTUM);
                let keep = F::one() - m;
                let unbias = F::lit(stats.count as f64 / (stats.count - 1) as f64);
                for (r, &b) in cx.store.value_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in cx.store.value_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * b * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = cx.store.value(self.running_mean).data().to_vec();
                let var = cx.store.value(self.running_var).data().to_vec();
                cx.graph.batchnorm2d_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }
}

/// 3x3 convolution, batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut SeededRng) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, 3, 1, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Pass<F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(cx.graph.relu(y))
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl ChannelAttention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, c: usize, rng: &mut SeededRng) -> Result<Self> {
        if c < CA_REDUCTION {
            return Err(Error::Config(format!("channel attention needs at least {CA_REDUCTION} channels, got {c}")));
        }
        let hidden = c / CA_REDUCTION;
        Ok(Self {
            squeeze: Conv::new(store, &format!("{name}.squeeze"), c, hidden, 1, 0, true, rng),
            excite: Conv::new(store, &format!("{name}.excite"), hidden, c, 1, 0, true, rng),
        })
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Pass<F>, x: Var) -> Result<Var> {
        let s = cx.graph.global_avg_pool(x)?;
        let s = self.squeeze.forward(cx, s)?;
        let s = cx.graph.relu(s);
        let s = self.excite.forward(cx, s)?;
        let gate = cx.graph.sigmoid(s);
        cx.graph.mul_channel(x, gate)
    }
}

/// Spatial gate from channel-mean and channel-max maps.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, rng: &mut SeededRng) -> Self {
        Self { conv: Conv::new(store, &format!("{name}.conv"), 2, 1, SA_KERNEL, SA_KERNEL / 2, true, rng) }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Pass<F>, x: Var) -> Result<Var> {
        let avg = cx.graph.channel_mean(x)?;
        let max = cx.graph.channel_max(x)?;
        let maps = cx.graph.concat_channels(&[avg, max])?;
        let s = self.conv.forward(cx, maps)?;
        let gate = cx.graph.sigmoid(s);
        cx.graph.mul_spatial(x, gate)
    }
}

/// Merges a stored stage feature with the previous full-resolution decoder feature.
#[derive(Clone, Debug)]
pub struct FeedbackFuse {
    pub stage: usize,
    pub project: Conv,
    pub fuse: ConvBnRelu,
}

impl FeedbackFuse {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        stage: usize,
        feedback_width: usize,
        stage_width: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !(2..=4).contains(&stage) {
            return Err(Error::Contract(format!("feedback fuse is defined for stages 2-4, not {stage}")));
        }
        let name = format!("ff{stage}");
        Ok(Self {
            stage,
            project: Conv::new(store, &format!("{name}.project"), feedback_width, stage_width, 1, 0, true, rng),
            fuse: ConvBnRelu::new(store, &format!("{name}.fuse"), 2 * stage_width, stage_width, rng),
        })
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Pass<F>, e0: Var, d1_prev: Var) -> Result<Var> {
        let pooled = cx.graph.avgpool2d(d1_prev, 1 << (self.stage - 1))?;
        let projected = self.project.forward(cx, pooled)?;
        let joined = cx.graph.concat_channels(&[e0, projected])?;
        self.fuse.forward(cx, joined)
    }
}

/// Encoder outputs at strides 1, 2, 4, 8.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub e1: Var,
    pub e2: Var,
    pub e3: Var,
    pub e4: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GatedSkips {
    pub s1: Var,
    pub s2: Var,
    pub s3: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<[ConvBnRelu; 2]>,
}

impl Encoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cin: usize, base: usize, rng: &mut SeededRng) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut c = cin;
        for k in 1..=4 {
            let w = base << (k - 1);
            stages.push([
                ConvBnRelu::new(store, &format!("enc{k}.block1"), c, w, rng),
                ConvBnRelu::new(store, &format!("enc{k}.block2"), w, w, rng),
            ]);
            c = w;
        }
        Self { stages }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Pass<F>, x: Var) -> Result<EncoderFeatures> {
        let (_, _, h, w) = cx.graph.value(x).dims4("encoder")?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Sizing { height: h, width: w, multiple: 8 });
        }
        let mut feats = Vec::with_capacity(4);
        let mut y = x;
        for (k, [a, b]) in self.stages.iter().enumerate() {
            y = match k {
                0 => y,
                1 => cx.graph.blurpool2d(y)?,
                _ => cx.graph.maxpool2d(y, 2)?,
            };
            y = a.forward(cx, y)?;
            y = b.forward(cx, y)?;
            feats.push(y);
        }
        Ok(EncoderFeatures { e1: feats[0], e2: feats[1], e3: feats[2], e4: feats[3] })
    }
}

#[derive(Clone, Debug)]
pub struct SkipGates {
    pub mode: SkipAttention,
    pub ca: Vec<ChannelAttention>,
    pub sa: Vec<Option<SpatialAttention>>,
}

impl SkipGates {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        mode: SkipAttention,
        base: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut ca = Vec::new();
        let mut sa = Vec::new();
        if mode != SkipAttention::None {
            for j in 1..=3 {
                ca.push(ChannelAttention::new(store, &format!("skip{j}.ca"), base << (j - 1), rng)?);
                let spatial = j > 1 || mode == SkipAttention::SaAll;
                sa.push(spatial.then(|| SpatialAttention::new(store, &format!("skip{j}.sa"), rng)));
            }
        }
        Ok(Self { mode, ca, sa })
    }

    /// Gate for skip `j` (1-based): `CA(e)` alone, or `SA(CA(e)) + e`.
    pub fn gate<F: Scalar>(&self, cx: &mut Pass<F>, j: usize, e: Var) -> Result<Var> {
        if self.mode == SkipAttention::None {
            return Ok(e);
        }
        let c = self.ca[j - 1].forward(cx, e)?;
        match &self.sa[j - 1] {
            Some(sa) => {
                let s = sa.forward(cx, c)?;
                cx.graph.add(s, e)
            }
            None => Ok(c),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Deepest first: output widths 4b, 2b, b.
    pub stages: Vec<[ConvBnRelu; 2]>,
}

impl Decoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, base: usize, rng: &mut SeededRng) -> Self {
        let mut stages = Vec::with_capacity(3);
        let mut below = base << 3;
        for j in (1..=3).rev() {
            let w = base << (j - 1);
            stages.push([
                ConvBnRelu::new(store, &format!("dec{j}.block1"), below + w, w, rng),
                ConvBnRelu::new(store, &format!("dec{j}.block2"), w, w, rng),
            ]);
            below = w;
        }
        Self { stages }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Pass<F>, e4: Var, skips: &GatedSkips) -> Result<Var> {
        let mut y = e4;
        for ([a, b], skip) in self.stages.iter().zip([skips.s3, skips.s2, skips.s1]) {
            let up = cx.graph.upsample_bilinear2x(y)?;
            let joined = cx.graph.concat_channels(&[up, skip])?;
            y = a.forward(cx, joined)?;
            y = b.forward(cx, y)?;
        }
        Ok(y)
    }
}

/// Graph handles for every pass `t = 0..=T`.
#[derive(Clone, Debug)]
pub struct IterationOutputs {
    pub features: Vec<EncoderFeatures>,
    pub skips: Vec<GatedSkips>,
    pub decoded: Vec<Var>,
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

impl IterationOutputs {
    pub fn passes(&self) -> usize {
        self.logits.len()
    }

    pub fn final_logits(&self) -> Var {
        *self.logits.last().expect("at least one pass")
    }

    pub fn final_probs(&self) -> Var {
        *self.probs.last().expect("at least one pass")
    }

    /// Per-image argmax of `p^(t)`; ties resolve to the lowest class.
    pub fn predictions<F: Scalar>(&self, g: &Graph<F>, t: usize) -> Result<Vec<LabelMask>> {
        let p = g.value(self.probs[t]);
        (0..p.shape()[0]).map(|n| LabelMask::argmax(&p.index_first(n)?)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Misra<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub encoder: Encoder,
    pub context: ConvBnRelu,
    pub feedback: Vec<FeedbackFuse>,
    pub gates: SkipGates,
    pub decoder: Decoder,
    pub head: Conv,
}

impl<F: Scalar> Misra<F> {
    /// Builds the network with seeded fan-in initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamStore::new();
        let b = config.base_width;
        let encoder = Encoder::new(&mut params, config.input_channels().count(), b, &mut rng);
        let context = ConvBnRelu::new(&mut params, "context", b << 3, b << 3, &mut rng);
        let feedback = if config.effective_iterations() > 0 {
            (2..=4)
                .map(|k| FeedbackFuse::new(&mut params, k, b, config.stage_width(k), &mut rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let gates = SkipGates::new(&mut params, config.skip_attention, b, &mut rng)?;
        let decoder = Decoder::new(&mut params, b, &mut rng);
        let head = Conv::new(&mut params, "head", b, config.num_classes, 1, 0, true, &mut rng);
        Ok(Self { config, params, encoder, context, feedback, gates, decoder, head })
    }

    /// Same network in another precision.
    pub fn cast<G: Scalar>(&self) -> Misra<G> {
        Misra {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            context: self.context.clone(),
            feedback: self.feedback.clone(),
            gates: self.gates.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    /// Runs all `T + 1` passes on a `[N, C_in, H, W]` batch.
    pub fn forward(&mut self, g: &mut Graph<F>, binding: &mut Binding, x: Var, mode: Mode) -> Result<IterationOutputs> {
        let cin = self.config.input_channels().count();
        let (_, c, _, _) = g.value(x).dims4("misra_forward")?;
        if c != cin {
            return Err(Error::dim("misra_forward", format!("axis 1: input has {c} channels, model expects {cin}")));
        }
        let mut cx = Pass { graph: g, store: &mut self.params, binding, mode };
        let e0 = self.encoder.forward(&mut cx, x)?;
        let s1 = self.gates.gate(&mut cx, 1, e0.e1)?;
        let passes = self.config.effective_iterations() + 1;
        let mut out = IterationOutputs {
            features: Vec::with_capacity(passes),
            skips: Vec::with_capacity(passes),
            decoded: Vec::with_capacity(passes),
            logits: Vec::with_capacity(passes),
            probs: Vec::with_capacity(passes),
        };
        for t in 0..passes {
            let e = if t == 0 {
                e0
            } else {
                let d1 = out.decoded[t - 1];
                EncoderFeatures {
                    e1: e0.e1,
                    e2: self.feedback[0].forward(&mut cx, e0.e2, d1)?,
                    e3: self.feedback[1].forward(&mut cx, e0.e3, d1)?,
                    e4: self.feedback[2].forward(&mut cx, e0.e4, d1)?,
                }
            };
            let skips =
                GatedSkips { s1, s2: self.gates.gate(&mut cx, 2, e.e2)?, s3: self.gates.gate(&mut cx, 3, e.e3)? };
            let ctx = self.context.forward(&mut cx, e.e4)?;
            let d1 = self.decoder.forward(&mut cx, ctx, &skips)?;
            let z = self.head.forward(&mut cx, d1)?;
            let p = cx.graph.softmax_channel(z)?;
            out.features.push(e);
            out.skips.push(skips);
            out.decoded.push(d1);
            out.logits.push(z);
            out.probs.push(p);
        }
        Ok(out)
    }

    /// Eval-mode forward without gradient tracking; returns `p^(t)` for every pass.
    pub fn predict(&mut self, batch: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let mut binding = Binding::new(&self.params, false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &mut binding, x, Mode::Eval)?;
        Ok(out.probs.iter().map(|&p| g.value(p).clone()).collect())
    }
}
