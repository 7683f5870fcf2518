//! Encoder, projection and prediction heads, and the online/target pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FeatureGridSpec;
use crate::rng::{child_rng, STREAM_INIT};
use crate::tensor::{BatchStats, Graph, ParamId, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running batch-norm estimates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub stride: usize,
}

/// Plain convnet: every stage is conv3x3 (padding 1) → BN → ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub input_size: usize,
    pub stages: Vec<ConvStage>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::with_widths(64, &[16, 32, 64, 64])
    }
}

impl EncoderSpec {
    /// Stride-2 stages with the given widths.
    pub fn with_widths(input_size: usize, widths: &[usize]) -> Self {
        EncoderSpec {
            in_channels: 3,
            input_size,
            stages: widths
                .iter()
                .map(|&c| ConvStage { out_channels: c, stride: 2 })
                .collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn feature_size(&self) -> usize {
        self.stages
            .iter()
            .fold(self.input_size, |n, s| (n + 2 - 3) / s.stride + 1)
    }

    pub fn feature_grid(&self) -> Result<FeatureGridSpec> {
        self.validate()?;
        let f = self.feature_size();
        FeatureGridSpec::new(self.input_size, self.input_size, f, f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.in_channels == 0 {
            return Err(Error::Config("encoder needs at least one stage and one input channel".into()));
        }
        if self.stages.iter().any(|s| s.out_channels == 0 || s.stride == 0) {
            return Err(Error::Config("encoder stage widths and strides must be positive".into()));
        }
        let stride = self.total_stride();
        if self.input_size % stride != 0 || self.feature_size() * stride != self.input_size {
            return Err(Error::Config(format!(
                "input size {} is not divisible by total stride {stride}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// linear → [BN] → ReLU → linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: usize,
    pub out: usize,
    pub batch_norm: bool,
    pub bias: bool,
}

impl HeadSpec {
    pub fn new(hidden: usize, out: usize) -> Self {
        HeadSpec {
            hidden,
            out,
            batch_norm: true,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out == 0 {
            return Err(Error::Config("head dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec::new(256, 64)
    }
}

/// Whether batch norm normalizes with the current batch or with running
/// estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    stride: usize,
    bn: BnLayer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeadLayers {
    fc1_w: ParamId,
    fc1_b: Option<ParamId>,
    bn: Option<BnLayer>,
    fc2_w: ParamId,
    fc2_b: Option<ParamId>,
}

/// Batch statistics observed during a forward pass, to be folded into the
/// running estimates once the step is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

/// Parameters bound into one graph, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Projector,
    Predictor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: EncoderSpec,
    pub projector: HeadSpec,
    pub predictor: Option<HeadSpec>,
    pub params: ParamStore,
    conv: Vec<ConvLayer>,
    proj: HeadLayers,
    pred: Option<HeadLayers>,
}

fn add_bn(ps: &mut ParamStore, prefix: &str, c: usize) -> BnLayer {
    BnLayer {
        gamma: ps.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0), true),
        beta: ps.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), true),
        mean: ps.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false),
        var: ps.add(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0), false),
    }
}

fn add_head(ps: &mut ParamStore, prefix: &str, input: usize, spec: &HeadSpec) -> HeadLayers {
    let fc1_w = ps.add(format!("{prefix}.fc1.weight"), Tensor::zeros(&[spec.hidden, input]), true);
    let fc1_b = spec
        .bias
        .then(|| ps.add(format!("{prefix}.fc1.bias"), Tensor::zeros(&[spec.hidden]), true));
    let bn = spec
        .batch_norm
        .then(|| add_bn(ps, &format!("{prefix}.bn"), spec.hidden));
    let fc2_w = ps.add(format!("{prefix}.fc2.weight"), Tensor::zeros(&[spec.out, spec.hidden]), true);
    let fc2_b = spec
        .bias
        .then(|| ps.add(format!("{prefix}.fc2.bias"), Tensor::zeros(&[spec.out]), true));
    HeadLayers {
        fc1_w,
        fc1_b,
        bn,
        fc2_w,
        fc2_b,
    }
}

fn he_uniform<R: Rng + ?Sized>(t: &mut Tensor, fan_in: usize, rng: &mut R) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

impl Network {
    /// Builds the layer structure with batch-norm identity statistics and
    /// all weights zero; call [`Network::init`] to draw weights.
    pub fn zeroed(encoder: EncoderSpec, projector: HeadSpec, predictor: Option<HeadSpec>) -> Result<Self> {
        encoder.validate()?;
        projector.validate()?;
        if let Some(p) = &predictor {
            p.validate()?;
            if p.out != projector.out {
                return Err(Error::Config(format!(
                    "predictor output {} must equal projector output {}",
                    p.out, projector.out
                )));
            }
        }
        let mut ps = ParamStore::new();
        let mut conv = Vec::new();
        let mut cin = encoder.in_channels;
        for (i, st) in encoder.stages.iter().enumerate() {
            let weight = ps.add(
                format!("encoder.{i}.conv.weight"),
                Tensor::zeros(&[st.out_channels, cin, 3, 3]),
                true,
            );
            let bn = add_bn(&mut ps, &format!("encoder.{i}.bn"), st.out_channels);
            conv.push(ConvLayer {
                weight,
                stride: st.stride,
                bn,
            });
            cin = st.out_channels;
        }
        let proj = add_head(&mut ps, "projector", cin, &projector);
        let pred = predictor
            .as_ref()
            .map(|p| add_head(&mut ps, "predictor", projector.out, p));
        Ok(Network {
            encoder,
            projector,
            predictor,
            params: ps,
            conv,
            proj,
            pred,
        })
    }

    /// He-uniform weights in registration order; biases zero, BN γ=1, β=0.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut weights: Vec<(ParamId, usize)> = self
            .conv
            .iter()
            .map(|l| {
                let s = self.params.tensor(l.weight).shape();
                (l.weight, s[1] * 9)
            })
            .collect();
        for h in std::iter::once(&self.proj).chain(self.pred.iter()) {
            for w in [h.fc1_w, h.fc2_w] {
                weights.push((w, self.params.tensor(w).shape()[1]));
            }
        }
        for (id, fan_in) in weights {
            he_uniform(self.params.tensor_mut(id), fan_in, rng);
        }
    }

    pub fn new<R: Rng + ?Sized>(
        encoder: EncoderSpec,
        projector: HeadSpec,
        predictor: Option<HeadSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut n = Self::zeroed(encoder, projector, predictor)?;
        n.init(rng);
        Ok(n)
    }

    pub fn feature_grid(&self) -> FeatureGridSpec {
        self.encoder.feature_grid().expect("validated at construction")
    }

    /// Binds every parameter into `g`. Trainable parameters become gradient
    /// leaves when `grad` is set; everything else is a constant.
    pub fn bind(&self, g: &mut Graph, grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if grad && p.trainable {
                    g.param(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn bn(
        &self,
        g: &mut Graph,
        b: &Bound,
        layer: &BnLayer,
        x: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        match mode {
            BnMode::Batch => {
                let (y, stats) = g.batch_norm_train(x, b.var(layer.gamma), b.var(layer.beta), BN_EPS)?;
                updates.push(BnUpdate {
                    mean: layer.mean,
                    var: layer.var,
                    stats,
                });
                Ok(y)
            }
            BnMode::Running => g.batch_norm_eval(
                x,
                b.var(layer.gamma),
                b.var(layer.beta),
                self.params.tensor(layer.mean).data(),
                self.params.tensor(layer.var).data(),
                BN_EPS,
            ),
        }
    }

    /// `[N, 3, H, W]` pixels to the `[N, C, fh, fw]` feature map (no pooling).
    pub fn forward_spatial(
        &self,
        g: &mut Graph,
        b: &Bound,
        pixels: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let s = g.value(pixels).shape();
        let want = self.encoder.input_size;
        if s.len() != 4 || s[1] != self.encoder.in_channels || s[2] != want || s[3] != want {
            return Err(Error::Shape(format!(
                "encoder expects [N, {}, {want}, {want}], got {s:?}",
                self.encoder.in_channels
            )));
        }
        let mut x = pixels;
        for l in &self.conv {
            x = g.conv2d(x, b.var(l.weight), l.stride, 1)?;
            x = self.bn(g, b, &l.bn, x, mode, updates)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    pub fn head(
        &self,
        which: Head,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let h = match which {
            Head::Projector => &self.proj,
            Head::Predictor => self
                .pred
                .as_ref()
                .ok_or_else(|| Error::Shape("network has no predictor".into()))?,
        };
        let mut y = g.linear(x, b.var(h.fc1_w), h.fc1_b.map(|id| b.var(id)))?;
        if let Some(bn) = &h.bn {
            y = self.bn(g, b, bn, y, mode, updates)?;
        }
        y = g.relu(y);
        g.linear(y, b.var(h.fc2_w), h.fc2_b.map(|id| b.var(id)))
    }

    /// Projection `z` and, when this network has a predictor, prediction `q`.
    pub fn project_predict(
        &self,
        g: &mut Graph,
        b: &Bound,
        pooled: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, Option<Var>)> {
        let z = self.head(Head::Projector, g, b, pooled, mode, updates)?;
        let q = match self.pred {
            Some(_) => Some(self.head(Head::Predictor, g, b, z, mode, updates)?),
            None => None,
        };
        Ok((z, q))
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        self.apply_bn_updates_with(updates, BN_MOMENTUM);
    }

    /// As [`Network::apply_bn_updates`] with an explicit weight for the new
    /// batch.
    pub fn apply_bn_updates_with(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let mean = self.params.tensor_mut(u.mean);
            for (m, s) in mean.data_mut().iter_mut().zip(&u.stats.mean) {
                *m = (1.0 - momentum) * *m + momentum * s;
            }
            let var = self.params.tensor_mut(u.var);
            for (v, s) in var.data_mut().iter_mut().zip(&u.stats.var) {
                *v = (1.0 - momentum) * *v + momentum * s;
            }
        }
    }

    /// Running estimates back to mean 0, variance 1.
    pub fn reset_running_stats(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.ends_with(".running_mean") {
                p.tensor.data_mut().fill(0.0);
            } else if p.name.ends_with(".running_var") {
                p.tensor.data_mut().fill(1.0);
            }
        }
    }

    /// Frozen forward to features, without a gradient tape.
    pub fn features(&self, pixels: Tensor, mode: BnMode) -> Result<(Tensor, Vec<BnUpdate>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(pixels);
        let mut updates = Vec::new();
        let f = self.forward_spatial(&mut g, &b, x, mode, &mut updates)?;
        Ok((g.value(f).clone(), updates))
    }

    /// Copy of this network with the predictor removed; shared layers keep
    /// their exact values.
    pub fn without_predictor(&self) -> Self {
        let mut t = Self::zeroed(self.encoder.clone(), self.projector, None).expect("validated specs");
        for p in t.params.iter_mut() {
            let src = self.params.find(&p.name).expect("shared layer");
            p.tensor = self.params.tensor(src).clone();
        }
        t
    }

    pub fn records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.tensor.clone()))
            .collect()
    }

    /// Loads every parameter from `records` (names prefixed by `prefix`).
    pub fn load_records(&mut self, records: &[(String, Tensor)], prefix: &str) -> Result<()> {
        for p in self.params.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let t = records
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing record {key}")))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "record {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}

/// Online network θ (with predictor) and target network ξ (without).
#[derive(Debug, Clone, PartialEq)]
pub struct SiamesePair {
    pub online: Network,
    pub target: Network,
}

impl SiamesePair {
    /// Online weights from the init stream of `seed`; the target starts as an
    /// exact copy.
    pub fn new(encoder: EncoderSpec, projector: HeadSpec, predictor: HeadSpec, seed: u64) -> Result<Self> {
        let mut rng = child_rng(seed, &[STREAM_INIT]);
        let online = Network::new(encoder, projector, Some(predictor), &mut rng)?;
        let target = online.without_predictor();
        Ok(SiamesePair { online, target })
    }

    /// `ξ ← τξ + (1 − τ)θ` over every trainable target parameter.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        ema_update(&mut self.target.params, &self.online.params, tau)
    }
}

/// Moving average of `target` towards `online`, matched by name. Buffers
/// (non-trainable entries) are left alone.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    for p in target.iter_mut().filter(|p| p.trainable) {
        let src = online
            .find(&p.name)
            .map(|id| online.tensor(id))
            .ok_or_else(|| Error::Shape(format!("online network has no layer {}", p.name)))?;
        if src.shape() != p.tensor.shape() {
            return Err(Error::Shape(format!(
                "layer {}: target {:?} vs online {:?}",
                p.name,
                p.tensor.shape(),
                src.shape()
            )));
        }
        for (x, th) in p.tensor.data_mut().iter_mut().zip(src.data()) {
            *x = tau * *x + (1.0 - tau) * th;
        }
    }
    Ok(())
}
