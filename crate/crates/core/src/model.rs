//! The residual slice classifier: parameters, initialization, forward pass and gradients.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{MilError, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Number of output neurons of the classifier head.
pub const NUM_CLASSES: usize = 2;

/// Shape of the residual classifier.
///
/// A 3x3 stem convolution is followed by one stage per entry of `widths`. Each
/// stage holds `blocks_per_stage` residual blocks and halves the spatial size
/// in its first block. Global average pooling feeds a dense layer with two
/// outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Constant multiplier applied to raw intensities on entry to the network.
    pub input_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            stem_channels: 16,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            input_scale: 0.05,
        }
    }
}

impl ArchConfig {
    /// The smallest configuration used for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_height: 16,
            input_width: 16,
            stem_channels: 4,
            widths: vec![4, 8],
            blocks_per_stage: 1,
            input_scale: 0.05,
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.stem_channels == 0 {
            return Err(MilError::Config("channel widths must be positive and nonempty".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(MilError::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.widths.len() >= usize::BITS as usize - 1 {
            return Err(MilError::Config("too many stages".into()));
        }
        let factor = self.downsampling();
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % factor != 0
            || self.input_width % factor != 0
        {
            return Err(MilError::Config(format!(
                "input {}x{} is not divisible by the downsampling factor {factor}",
                self.input_height, self.input_width
            )));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(MilError::Config("input_scale must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.input_height, self.input_width]
    }

    /// Parameter specs in flat enumeration order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| {
            specs.push(ParamSpec { name, shape, kind })
        };
        push("stem.kernel".into(), vec![self.stem_channels, 1, 3, 3], ParamKind::ConvKernel);
        push("stem.bias".into(), vec![self.stem_channels], ParamKind::Bias);
        let mut in_ch = self.stem_channels;
        for (s, &width) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                let p = format!("stage{s}.block{b}");
                push(format!("{p}.conv1.kernel"), vec![width, in_ch, 3, 3], ParamKind::ConvKernel);
                push(format!("{p}.conv1.bias"), vec![width], ParamKind::Bias);
                push(format!("{p}.conv2.kernel"), vec![width, width, 3, 3], ParamKind::ConvKernel);
                push(format!("{p}.conv2.bias"), vec![width], ParamKind::Bias);
                if in_ch != width || stride != 1 {
                    push(format!("{p}.proj.kernel"), vec![width, in_ch, 1, 1], ParamKind::ConvKernel);
                    push(format!("{p}.proj.bias"), vec![width], ParamKind::Bias);
                }
                in_ch = width;
            }
        }
        push("head.weight".into(), vec![in_ch, NUM_CLASSES], ParamKind::DenseWeight);
        push("head.bias".into(), vec![NUM_CLASSES], ParamKind::Bias);
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    DenseWeight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn fan_in(&self) -> usize {
        match self.kind {
            ParamKind::ConvKernel => self.shape[1..].iter().product(),
            ParamKind::DenseWeight => self.shape[0],
            ParamKind::Bias => 1,
        }
    }
}

/// All weights of the classifier, in the order given by [`ArchConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ArchConfig,
    tensors: Vec<Tensor>,
}

/// Per-parameter gradients, aligned with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

/// He-style initialization: kernels ~ N(0, 2 / fan_in), head ~ N(0, 1 / fan_in), biases zero.
pub fn init_params(config: &ArchConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .layout()
        .into_iter()
        .map(|spec| {
            let gain = match spec.kind {
                ParamKind::ConvKernel => 2.0,
                ParamKind::DenseWeight => 1.0,
                ParamKind::Bias => return Tensor::zeros(spec.shape),
            };
            let normal = Normal::new(0.0, (gain / spec.fan_in() as f64).sqrt()).expect("positive std");
            let n = spec.shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(spec.shape, data).expect("layout shape")
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

impl ModelParams {
    /// Rebuilds parameters from a flat vector in enumeration order.
    pub fn from_flat(config: &ArchConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let total: usize = layout.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if total != flat.len() {
            return Err(MilError::Shape(format!(
                "architecture has {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = layout
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let t = Tensor::new(spec.shape, flat[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(MilError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn head_index(&self) -> usize {
        self.tensors.len() - 2
    }

    /// Sets the dense head (weights and biases) to zero.
    pub fn zero_head(&mut self) {
        let h = self.head_index();
        for t in &mut self.tensors[h..] {
            t.data_mut().fill(0.0);
        }
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        self.tensors.len() == params.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&params.tensors)
                .all(|(g, p)| g.shape() == p.shape())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logits: [f64; NUM_CLASSES],
    pub probs: [f64; NUM_CLASSES],
}

impl Prediction {
    /// Probability of the positive class (index 1).
    pub fn positive(&self) -> f64 {
        self.probs[1]
    }
}

fn check_instance(params: &ModelParams, instance: &Tensor) -> Result<()> {
    let want = params.config.input_shape();
    if instance.shape() != want {
        return Err(MilError::Shape(format!(
            "instance has shape {:?}, model expects {want:?}",
            instance.shape()
        )));
    }
    Ok(())
}

/// Records the network on `tape` and returns the logits node plus one node per parameter.
fn record<'a>(tape: &mut Tape<'a>, params: &'a ModelParams, instance: &Tensor) -> Result<(Var, Vec<Var>)> {
    check_instance(params, instance)?;
    let mut scaled = instance.clone();
    scaled.scale(params.config.input_scale);
    let x = tape.constant(Cow::Owned(scaled));
    let pvars: Vec<Var> = params.tensors.iter().map(|t| tape.param(t)).collect();
    let mut next = pvars.iter().copied();
    let mut take = || next.next().expect("layout covers every parameter");

    let (k, b) = (take(), take());
    let stem = tape.conv2d(x, k, b, 1)?;
    let mut h = tape.relu(stem);

    let mut in_ch = params.config.stem_channels;
    for &width in &params.config.widths {
        for blk in 0..params.config.blocks_per_stage {
            let stride = if blk == 0 { 2 } else { 1 };
            let (k1, b1, k2, b2) = (take(), take(), take(), take());
            let a = tape.conv2d(h, k1, b1, stride)?;
            let a = tape.relu(a);
            let a = tape.conv2d(a, k2, b2, 1)?;
            let shortcut = if in_ch != width || stride != 1 {
                let (kp, bp) = (take(), take());
                tape.conv2d(h, kp, bp, stride)?
            } else {
                h
            };
            let sum = tape.add(a, shortcut)?;
            h = tape.relu(sum);
            in_ch = width;
        }
    }
    let pooled = tape.global_avg_pool(h)?;
    let (w, b) = (take(), take());
    let logits = tape.dense(pooled, w, b)?;
    Ok((logits, pvars))
}

fn prediction(logits: &Tensor) -> Prediction {
    let z = [logits.data()[0], logits.data()[1]];
    let p = ops::softmax(&z);
    Prediction {
        logits: z,
        probs: [p[0], p[1]],
    }
}

/// Class probabilities of one instance (`(1, H, W)` raw intensities).
pub fn model_forward(params: &ModelParams, instance: &Tensor) -> Result<Prediction> {
    let mut tape = Tape::new();
    let (logits, _) = record(&mut tape, params, instance)?;
    let pred = prediction(tape.value(logits));
    if !pred.logits.iter().all(|v| v.is_finite()) {
        return Err(MilError::Numeric("non-finite logits".into()));
    }
    Ok(pred)
}

/// Result of a forward and backward pass on a single labelled instance.
#[derive(Debug, Clone)]
pub struct InstanceGradient {
    pub grads: Gradients,
    pub loss: f64,
    pub prediction: Prediction,
}

/// Gradient of the cross-entropy loss at `instance` with target class `label`.
pub fn backward(params: &ModelParams, instance: &Tensor, label: usize) -> Result<InstanceGradient> {
    if label >= NUM_CLASSES {
        return Err(MilError::Shape(format!("label {label} is not a class index")));
    }
    let mut tape = Tape::new();
    let (logits, pvars) = record(&mut tape, params, instance)?;
    let prediction = prediction(tape.value(logits));
    let loss_var = tape.softmax_cross_entropy(logits, label)?;
    let loss = tape.value(loss_var).data()[0];
    let mut grads = tape.backward(loss_var)?;
    let tensors = pvars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(p)))
        .collect();
    let grads = Gradients { tensors };
    if !loss.is_finite() || !grads.is_finite() {
        return Err(MilError::Numeric("non-finite loss or gradient".into()));
    }
    Ok(InstanceGradient {
        grads,
        loss,
        prediction,
    })
}

/// Cross-entropy at `instance` without computing gradients.
pub fn instance_loss(params: &ModelParams, instance: &Tensor, label: usize) -> Result<f64> {
    let pred = model_forward(params, instance)?;
    ops::softmax_cross_entropy(&pred.logits, label)
}


#[cfg(test)]
mod gradient_check {
    use super::*;
    use rand::Rng;

    #[test]
    fn full_model_gradient_matches_central_differences() {
        let cfg = ArchConfig::tiny();
        let params = init_params(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = cfg.input_height * cfg.input_width;
        let x = Tensor::new(cfg.input_shape().to_vec(), (0..n).map(|_| rng.gen_range(0.0..80.0)).collect()).unwrap();
        let analytic = backward(&params, &x, 1).unwrap().grads.flat();
        let base = params.flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = params.clone();
            let mut f = base.clone();
            f[i] = base[i] + h;
            p.set_flat(&f).unwrap();
            let up = instance_loss(&p, &x, 1).unwrap();
            f[i] = base[i] - h;
            p.set_flat(&f).unwrap();
            let down = instance_loss(&p, &x, 1).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
