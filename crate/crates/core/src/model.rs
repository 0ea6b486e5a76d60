//! Mixture-of-experts network with depth-wise feature fusion.
//!
//! The shared backbone is a chain of `S` stages whose outputs `f_1..f_S`
//! are all exposed. Each expert owns one exclusive stage applied to `f_S`,
//! an alignment path that maps its tapped intermediate feature `f_s` to the
//! exclusive feature's shape, and a linear head. With fusion enabled the
//! head sees the global-average-pooled Hadamard product of the aligned and
//! exclusive features; without it, the exclusive feature alone.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Shape3;
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm, Conv2d, Layer, Linear, Mode, Param, Sequential, SequentialCache};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Fully connected stages over flattened inputs.
    Mlp,
    /// 3x3 convolution stages; every stage after the first halves the
    /// spatial size.
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: Family,
    pub input_shape: Shape3,
    /// Units (MLP) or channels (CNN) produced by each shared stage.
    pub stage_widths: Vec<usize>,
    /// Batch normalization after every backbone and exclusive stage.
    pub batch_norm: bool,
}

impl BackboneConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Units or channels of every expert's exclusive stage.
    pub expert_width: usize,
    pub num_classes: usize,
    /// One-based backbone depth tapped by each expert; its length is `M`.
    pub tap_depths: Vec<usize>,
    /// Depth-wise fusion of tapped features into each expert.
    pub fusion: bool,
}

impl ModelConfig {
    pub fn num_experts(&self) -> usize {
        self.tap_depths.len()
    }

    pub fn num_stages(&self) -> usize {
        self.backbone.num_stages()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_stages();
        if s == 0 {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.backbone.stage_widths.contains(&0) || self.expert_width == 0 {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.backbone.input_shape.is_empty() {
            return Err(Error::Config("input shape must be non-empty".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.tap_depths.is_empty() {
            return Err(Error::Config("need at least one expert".into()));
        }
        if let Some(&d) = self.tap_depths.iter().find(|&&d| d == 0 || d > s) {
            return Err(Error::Config(format!("tap depth {d} outside 1..={s}")));
        }
        Ok(())
    }
}

/// Tap depth for each of `M` experts over `S` shared stages.
///
/// Up to `S` experts get distinct depths spread evenly from shallow to
/// deep (a single expert taps the deepest stage). With `S + 1` experts the
/// two shallowest share depth 1. Beyond that depths cycle `1, 2, .., S, 1, ..`.
pub fn assign_depths(num_experts: usize, num_stages: usize) -> Vec<usize> {
    let (m, s) = (num_experts, num_stages);
    if m == 0 || s == 0 {
        return Vec::new();
    }
    if m == 1 {
        return vec![s];
    }
    if m <= s {
        return (0..m)
            .map(|i| 1 + ((i * (s - 1)) as f64 / (m - 1) as f64).round() as usize)
            .collect();
    }
    if m == s + 1 {
        return std::iter::once(1).chain(1..=s).collect();
    }
    (0..m).map(|i| i % s + 1).collect()
}

/// Parse a depth arrangement such as `"ABC"` or `"A B C A"` (A = depth 1).
pub fn parse_arrangement(arrangement: &str, num_stages: usize) -> Result<Vec<usize>> {
    let depths: Vec<usize> = arrangement
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| {
            let c = c.to_ascii_uppercase();
            if !c.is_ascii_uppercase() {
                return Err(Error::invalid("arrangement", format!("unexpected symbol {c:?}")));
            }
            let d = (c as u8 - b'A') as usize + 1;
            if d > num_stages {
                return Err(Error::invalid(
                    "arrangement",
                    format!("depth {c} exceeds the {num_stages} shared stages"),
                ));
            }
            Ok(d)
        })
        .collect::<Result<_>>()?;
    if depths.is_empty() {
        return Err(Error::invalid("arrangement", "empty arrangement"));
    }
    Ok(depths)
}

pub fn arrangement_label(depths: &[usize]) -> String {
    depths.iter().map(|&d| (b'A' + (d - 1) as u8) as char).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Alignment,
    Exclusive,
    Head,
}

/// Per-stage outputs of one backbone pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub features: Vec<Array2<f64>>,
    pub shapes: Vec<Shape3>,
}

impl FeatureStack {
    pub fn depth(&self) -> usize {
        self.features.len()
    }

    /// Feature of one-based depth `s`.
    pub fn at(&self, s: usize) -> &Array2<f64> {
        &self.features[s - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEOutput {
    /// Fused (or plain exclusive) pre-pooling feature per expert.
    pub fused: Vec<Array2<f64>>,
    /// Pooled head input per expert.
    pub pooled: Vec<Array2<f64>>,
    /// `batch x C` logits per expert.
    pub logits: Vec<Array2<f64>>,
    /// Sum of the per-expert logits.
    pub ensemble: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub tap_depth: usize,
    pub exclusive: Sequential,
    pub alignment: Option<Sequential>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
struct ExpertCache {
    exclusive: SequentialCache,
    high: Array2<f64>,
    alignment: Option<(SequentialCache, Array2<f64>)>,
    pooled: Array2<f64>,
}

/// Everything needed to backpropagate one training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    backbone: Vec<SequentialCache>,
    experts: Vec<ExpertCache>,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub alignment: bool,
    pub exclusive: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        backbone: true,
        alignment: true,
        exclusive: true,
        head: true,
    };
    pub const HEADS_ONLY: Trainable = Trainable {
        backbone: false,
        alignment: false,
        exclusive: false,
        head: true,
    };

    pub fn allows(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Alignment => self.alignment,
            ParamGroup::Exclusive => self.exclusive,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEModel {
    config: ModelConfig,
    stages: Vec<Sequential>,
    experts: Vec<Expert>,
}

fn stage_block<R: Rng>(
    family: Family,
    input: Shape3,
    width: usize,
    downsample: bool,
    batch_norm: bool,
    rng: &mut R,
) -> Result<Sequential> {
    let mut seq = Sequential::new(input);
    seq = match family {
        Family::Mlp => seq.push(Layer::Linear(Linear::he(input.len(), width, rng)))?,
        Family::Cnn => {
            let stride = if downsample { 2 } else { 1 };
            seq.push(Layer::Conv(Conv2d::he(input, width, stride, rng)))?
        }
    };
    if batch_norm {
        let shape = seq.output;
        seq = seq.push(Layer::BatchNorm(BatchNorm::new(shape)))?;
    }
    seq.push(Layer::Relu)
}

impl MoEModel {
    /// Build and randomly initialize a model; initialization is a pure
    /// function of `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let bb = &config.backbone;
        let mut stages = Vec::with_capacity(bb.num_stages());
        let mut shape = bb.input_shape;
        let mut shapes = Vec::with_capacity(bb.num_stages());
        for (i, &w) in bb.stage_widths.iter().enumerate() {
            let stage = stage_block(bb.family, shape, w, i > 0, bb.batch_norm, &mut r)?;
            shape = stage.output;
            shapes.push(shape);
            stages.push(stage);
        }
        let last = shape;
        let mut experts = Vec::with_capacity(config.num_experts());
        for &tap in &config.tap_depths {
            let exclusive = stage_block(bb.family, last, config.expert_width, true, bb.batch_norm, &mut r)?;
            let alignment = if config.fusion {
                let mut widths: Vec<usize> = bb.stage_widths[tap..].to_vec();
                widths.push(config.expert_width);
                let mut path = Sequential::new(shapes[tap - 1]);
                for w in widths {
                    let block = stage_block(bb.family, path.output, w, true, true, &mut r)?;
                    for layer in block.layers {
                        path = path.push(layer)?;
                    }
                }
                if path.output != exclusive.output {
                    return Err(Error::Config(format!(
                        "alignment from depth {tap} yields {} but the exclusive stage yields {}",
                        path.output, exclusive.output
                    )));
                }
                Some(path)
            } else {
                None
            };
            let head = Linear::uniform(exclusive.output.channels, config.num_classes, &mut r);
            experts.push(Expert {
                tap_depth: tap,
                exclusive,
                alignment,
                head,
            });
        }
        Ok(MoEModel {
            config,
            stages,
            experts,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn stages(&self) -> &[Sequential] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Sequential] {
        &mut self.stages
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Expert] {
        &mut self.experts
    }

    pub fn input_shape(&self) -> Shape3 {
        self.config.backbone.input_shape
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        let want = self.input_shape();
        if x.ncols() != want.len() {
            return Err(Error::ShapeMismatch {
                context: "model input",
                expected: want.to_string(),
                actual: format!("{} values per sample", x.ncols()),
            });
        }
        Ok(())
    }

    /// Shared-stage features `f_1..f_S` in inference mode.
    pub fn backbone_forward(&self, x: &Array2<f64>) -> Result<FeatureStack> {
        self.check_input(x)?;
        let mut features = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward_eval(&h);
            features.push(h.clone());
        }
        Ok(FeatureStack {
            features,
            shapes: self.stages.iter().map(|s| s.output).collect(),
        })
    }

    /// Aligned intermediate feature for expert `m`, or `None` without fusion.
    pub fn align(&self, m: usize, tapped: &Array2<f64>) -> Result<Option<Array2<f64>>> {
        let expert = &self.experts[m];
        match &expert.alignment {
            None => Ok(None),
            Some(path) => {
                if tapped.ncols() != path.input.len() {
                    return Err(Error::ShapeMismatch {
                        context: "alignment input",
                        expected: path.input.to_string(),
                        actual: tapped.ncols().to_string(),
                    });
                }
                Ok(Some(path.forward_eval(tapped)))
            }
        }
    }

    /// Exclusive stage of expert `m` on `f_S`.
    pub fn exclusive_forward(&self, m: usize, last: &Array2<f64>) -> Array2<f64> {
        self.experts[m].exclusive.forward_eval(last)
    }

    /// Fuse an aligned feature with expert `m`'s exclusive feature and apply
    /// its head. Returns `(fused, logits)`.
    pub fn expert_forward(
        &self,
        m: usize,
        last: &Array2<f64>,
        aligned: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let expert = &self.experts[m];
        let high = expert.exclusive.forward_eval(last);
        let fused = match aligned {
            Some(a) => {
                if a.dim() != high.dim() {
                    return Err(Error::ShapeMismatch {
                        context: "fusion operands",
                        expected: format!("{:?}", high.dim()),
                        actual: format!("{:?}", a.dim()),
                    });
                }
                a * &high
            }
            None => high,
        };
        let pooled = nn::global_avg_pool(&fused, expert.exclusive.output);
        let logits = expert.head.forward(&pooled);
        Ok((fused, logits))
    }

    /// Inference-mode forward through backbone and every expert.
    pub fn forward(&self, x: &Array2<f64>) -> Result<MoEOutput> {
        let stack = self.backbone_forward(x)?;
        let last = stack.at(stack.depth());
        let mut out = MoEOutput {
            fused: Vec::with_capacity(self.experts.len()),
            pooled: Vec::with_capacity(self.experts.len()),
            logits: Vec::with_capacity(self.experts.len()),
            ensemble: Array2::zeros((x.nrows(), self.num_classes())),
        };
        for (m, expert) in self.experts.iter().enumerate() {
            let aligned = self.align(m, stack.at(expert.tap_depth))?;
            let (fused, logits) = self.expert_forward(m, last, aligned.as_ref())?;
            out.pooled.push(nn::global_avg_pool(&fused, expert.exclusive.output));
            out.ensemble += &logits;
            out.fused.push(fused);
            out.logits.push(logits);
        }
        Ok(out)
    }

    /// Pooled head inputs per expert in inference mode.
    pub fn head_inputs(&self, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward(x)?.pooled)
    }

    /// Forward pass that records what [`MoEModel::backward`] needs.
    /// Batch-norm layers use batch statistics when `mode` is `Train`.
    pub fn forward_train(&mut self, x: &Array2<f64>, mode: Mode) -> Result<(MoEOutput, ForwardCache)> {
        self.check_input(x)?;
        let mut features = Vec::with_capacity(self.stages.len());
        let mut backbone = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &mut self.stages {
            let (y, c) = stage.forward(&h, mode);
            backbone.push(c);
            features.push(y.clone());
            h = y;
        }
        let last = features.last().expect("at least one stage").clone();
        let c = self.config.num_classes;
        let mut out = MoEOutput {
            fused: Vec::new(),
            pooled: Vec::new(),
            logits: Vec::new(),
            ensemble: Array2::zeros((x.nrows(), c)),
        };
        let mut experts = Vec::with_capacity(self.experts.len());
        for expert in &mut self.experts {
            let (high, ex_cache) = expert.exclusive.forward(&last, mode);
            let alignment = expert
                .alignment
                .as_mut()
                .map(|path| path.forward(&features[expert.tap_depth - 1], mode));
            let fused = match &alignment {
                Some((aligned, _)) => aligned * &high,
                None => high.clone(),
            };
            let pooled = nn::global_avg_pool(&fused, expert.exclusive.output);
            let logits = expert.head.forward(&pooled);
            out.ensemble += &logits;
            out.fused.push(fused);
            out.pooled.push(pooled.clone());
            out.logits.push(logits);
            experts.push(ExpertCache {
                exclusive: ex_cache,
                high,
                alignment: alignment.map(|(a, c)| (c, a)),
                pooled,
            });
        }
        Ok((out, ForwardCache { backbone, experts }))
    }

    /// Accumulate parameter gradients for `dL/dz^m` given per expert.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &[Array2<f64>], trainable: Trainable) {
        assert_eq!(dlogits.len(), self.experts.len(), "one logit gradient per expert");
        let mut dfeat: Vec<Option<Array2<f64>>> = vec![None; self.stages.len()];
        let add = |slot: &mut Option<Array2<f64>>, g: Array2<f64>| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        };
        let s = self.stages.len();
        for ((expert, ec), dz) in self.experts.iter_mut().zip(&cache.experts).zip(dlogits) {
            let dpooled = expert.head.backward(&ec.pooled, dz, !trainable.head);
            let dfused = nn::global_avg_pool_backward(&dpooled, expert.exclusive.output);
            let dhigh = match (&mut expert.alignment, &ec.alignment) {
                (Some(path), Some((acache, aligned))) => {
                    let dal = &dfused * &ec.high;
                    let dtap = path.backward(acache, &dal, !trainable.alignment);
                    add(&mut dfeat[expert.tap_depth - 1], dtap);
                    &dfused * aligned
                }
                _ => dfused,
            };
            let dlast = expert.exclusive.backward(&ec.exclusive, &dhigh, !trainable.exclusive);
            add(&mut dfeat[s - 1], dlast);
        }
        for i in (0..s).rev() {
            let Some(g) = dfeat[i].take() else { continue };
            let dx = self.stages[i].backward(&cache.backbone[i], &g, !trainable.backbone);
            if i > 0 {
                add(&mut dfeat[i - 1], dx);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param_mut(&mut |_, _, p| p.zero_grad());
    }

    /// Fresh heads drawn from `seed`, replacing the current ones.
    pub fn reinit_heads(&mut self, seed: u64) {
        let mut r = rng::stream(seed, &[rng::tag::HEAD_REINIT]);
        let c = self.config.num_classes;
        for e in &mut self.experts {
            e.head = Linear::uniform(e.exclusive.output.channels, c, &mut r);
        }
    }

    /// Visit parameters in a fixed order with stable names.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, ParamGroup, &Param)) {
        for (i, st) in self.stages.iter().enumerate() {
            st.for_each_param(&mut |n, p| f(&format!("backbone.{i}.{n}"), ParamGroup::Backbone, p));
        }
        for (m, e) in self.experts.iter().enumerate() {
            e.exclusive
                .for_each_param(&mut |n, p| f(&format!("expert.{m}.exclusive.{n}"), ParamGroup::Exclusive, p));
            if let Some(a) = &e.alignment {
                a.for_each_param(&mut |n, p| f(&format!("expert.{m}.align.{n}"), ParamGroup::Alignment, p));
            }
            f(&format!("expert.{m}.head.weight"), ParamGroup::Head, &e.head.weight);
            f(&format!("expert.{m}.head.bias"), ParamGroup::Head, &e.head.bias);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param)) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.for_each_param_mut(&mut |n, p| f(&format!("backbone.{i}.{n}"), ParamGroup::Backbone, p));
        }
        for (m, e) in self.experts.iter_mut().enumerate() {
            e.exclusive.for_each_param_mut(&mut |n, p| {
                f(&format!("expert.{m}.exclusive.{n}"), ParamGroup::Exclusive, p)
            });
            if let Some(a) = &mut e.alignment {
                a.for_each_param_mut(&mut |n, p| f(&format!("expert.{m}.align.{n}"), ParamGroup::Alignment, p));
            }
            f(&format!("expert.{m}.head.weight"), ParamGroup::Head, &mut e.head.weight);
            f(&format!("expert.{m}.head.bias"), ParamGroup::Head, &mut e.head.bias);
        }
    }

    /// Visit batch-norm running statistics.
    pub fn for_each_buffer(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, st) in self.stages.iter().enumerate() {
            st.for_each_buffer(&mut |n, b| f(&format!("backbone.{i}.{n}"), b));
        }
        for (m, e) in self.experts.iter().enumerate() {
            e.exclusive.for_each_buffer(&mut |n, b| f(&format!("expert.{m}.exclusive.{n}"), b));
            if let Some(a) = &e.alignment {
                a.for_each_buffer(&mut |n, b| f(&format!("expert.{m}.align.{n}"), b));
            }
        }
    }

    pub fn for_each_buffer_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.for_each_buffer_mut(&mut |n, b| f(&format!("backbone.{i}.{n}"), b));
        }
        for (m, e) in self.experts.iter_mut().enumerate() {
            e.exclusive
                .for_each_buffer_mut(&mut |n, b| f(&format!("expert.{m}.exclusive.{n}"), b));
            if let Some(a) = &mut e.alignment {
                a.for_each_buffer_mut(&mut |n, b| f(&format!("expert.{m}.align.{n}"), b));
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, _, p| n += p.len());
        n
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Ensemble prediction per sample: argmax of the summed expert logits.
pub fn ensemble_predict(out: &MoEOutput) -> Vec<usize> {
    out.ensemble
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("contiguous row")))
        .collect()
}
