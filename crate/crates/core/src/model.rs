//! AlexNet-L assembly: five conv(4x4, same padding) -> batchnorm -> ReLU ->
//! maxpool blocks, then flatten and two dense layers down to K logits.
//! The pool schedule halves both spatial dims while they allow it, then
//! pools frequency only, so [128 x 20] survives all five blocks at [4 x 1].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::ckpt::{CkptKind, Container, DType, ParamRecord};
use crate::divergence::softmax_rows;
use crate::error::{CoreError, Result};
use crate::layer::{BatchNorm, Conv2d, Dense, Flatten, Layer, MaxPool, Mode, PadSpec, Relu};
use crate::real::Real;
use crate::tensor::Tensor;

pub const NUM_CONV_BLOCKS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Frequency bins of a segment (mel bands).
    pub input_mels: usize,
    /// Time frames of a segment.
    pub input_frames: usize,
    /// Output channels per conv block; exactly five entries.
    pub conv_channels: Vec<usize>,
    /// Square kernel edge.
    pub kernel: usize,
    /// Hidden width of the first dense layer.
    pub fc_hidden: usize,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_mels: 128,
            input_frames: 20,
            conv_channels: alloc::vec![32, 64, 128, 128, 64],
            kernel: 4,
            fc_hidden: 1024,
            num_classes: 10,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != NUM_CONV_BLOCKS {
            return Err(CoreError::Config(format!(
                "conv_channels must list {NUM_CONV_BLOCKS} blocks, got {}",
                self.conv_channels.len()
            )));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(CoreError::Config("conv channel widths must be positive".into()));
        }
        if self.input_mels == 0 || self.input_frames == 0 {
            return Err(CoreError::Config("input dims must be positive".into()));
        }
        if self.kernel == 0 {
            return Err(CoreError::Config("kernel must be positive".into()));
        }
        if self.fc_hidden == 0 || self.num_classes == 0 {
            return Err(CoreError::Config("dense widths must be positive".into()));
        }
        if self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(CoreError::Config("invalid batchnorm settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Source,
    Target,
}

impl ModelRole {
    pub fn label(self) -> &'static str {
        match self {
            ModelRole::Source => "source",
            ModelRole::Target => "target",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub role: ModelRole,
    pub config: ModelConfig,
    layers: Vec<Layer<T>>,
    layer_names: Vec<String>,
}

/// Build a model with deterministic seeded initialization: Kaiming-uniform
/// fan-in for conv/dense weights, zeros for biases, ones/zeros for
/// batchnorm scale/shift.
pub fn build_model<T: Real>(config: &ModelConfig, role: ModelRole, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut layers = Vec::new();
    let mut names = Vec::new();
    let mut shape_trace = Vec::new();
    let (mut h, mut w) = (config.input_mels, config.input_frames);
    let mut channels = 1usize;
    shape_trace.push(format!("input [{channels} x {h} x {w}]"));
    for (b, &out_ch) in config.conv_channels.iter().enumerate() {
        let block = b + 1;
        let conv = Conv2d::new(
            channels,
            out_ch,
            config.kernel,
            config.kernel,
            PadSpec::same(config.kernel, config.kernel),
            seed,
            "model.conv.weight",
            b as u64,
        );
        let (ch, cw) = conv.out_dims(h, w).map_err(|e| {
            CoreError::Config(format!(
                "block{block} conv infeasible after {}: {e}",
                shape_trace.join(" -> ")
            ))
        })?;
        layers.push(Layer::Conv2d(conv));
        names.push(format!("block{block}.conv"));
        layers.push(Layer::BatchNorm(BatchNorm::new(
            out_ch,
            config.bn_eps,
            config.bn_momentum,
        )));
        names.push(format!("block{block}.bn"));
        layers.push(Layer::Relu(Relu::default()));
        names.push(format!("block{block}.relu"));
        // 2x2 stride 2 while both spatial dims allow it, else pool the
        // frequency axis only.
        let (pw_h, pw_w) = if ch >= 2 && cw >= 2 { (2, 2) } else { (2, 1) };
        let pool = MaxPool::new(pw_h, pw_w, pw_h, pw_w);
        let (ph, pw) = pool.out_dims(ch, cw).map_err(|e| {
            CoreError::Config(format!(
                "block{block} pool infeasible after {}: {e}",
                shape_trace.join(" -> ")
            ))
        })?;
        layers.push(Layer::MaxPool(pool));
        names.push(format!("block{block}.pool"));
        shape_trace.push(format!("block{block} [{out_ch} x {ph} x {pw}]"));
        channels = out_ch;
        h = ph;
        w = pw;
    }
    layers.push(Layer::Flatten(Flatten::default()));
    names.push("flatten".into());
    let flat = channels * h * w;
    layers.push(Layer::Dense(Dense::new(
        flat,
        config.fc_hidden,
        seed,
        "model.fc1.weight",
        0,
    )));
    names.push("fc1".into());
    layers.push(Layer::Relu(Relu::default()));
    names.push("fc1.relu".into());
    layers.push(Layer::Dense(Dense::new(
        config.fc_hidden,
        config.num_classes,
        seed,
        "model.fc2.weight",
        0,
    )));
    names.push("fc2".into());
    Ok(Model {
        role,
        config: config.clone(),
        layers,
        layer_names: names,
    })
}

impl<T: Real> Model<T> {
    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Train-mode forward to logits, arming every layer's backward cache.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in self.layers.iter_mut() {
            cur = layer.forward(&cur, Mode::Train)?;
        }
        Ok(cur)
    }

    /// Backward from a logit gradient; parameter gradients accumulate in
    /// the layers' parameter tensors.
    pub fn backward(&mut self, logit_grad: &Tensor<T>) -> Result<()> {
        let mut grad = logit_grad.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(())
    }

    /// Eval-mode logits; read-only and shareable across threads.
    pub fn infer_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    /// softmax(logits / temperature) per segment row.
    pub fn infer_posteriors(&self, segments: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
        let logits = self.infer_logits(segments)?;
        softmax_rows(&logits, temperature)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, name) in self.layers.iter().zip(&self.layer_names) {
            for (pname, p) in layer.params() {
                out.push((format!("{name}.{pname}"), p));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, name) in self.layers.iter_mut().zip(&self.layer_names) {
            for (pname, p) in layer.params_mut() {
                out.push((format!("{name}.{pname}"), p));
            }
        }
        out
    }

    fn named_state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, name) in self.layers.iter().zip(&self.layer_names) {
            for (sname, s) in layer.state_tensors() {
                out.push((format!("{name}.{sname}"), s));
            }
        }
        out
    }

    fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, name) in self.layers.iter_mut().zip(&self.layer_names) {
            for (sname, s) in layer.state_tensors_mut() {
                out.push((format!("{name}.{sname}"), s));
            }
        }
        out
    }

    /// Drop caches and gradients everywhere.
    pub fn reset(&mut self) {
        for layer in self.layers.iter_mut() {
            layer.reset();
        }
    }

    /// Freeze or thaw batchnorm: when frozen, training forward uses running
    /// statistics (achieved by the trainer calling infer on those layers).
    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            role: self.role,
            config: self.config.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            layer_names: self.layer_names.clone(),
        }
    }
}

fn encode_config(config: &ModelConfig, role: ModelRole) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(config.input_mels as u32).to_le_bytes());
    out.extend_from_slice(&(config.input_frames as u32).to_le_bytes());
    out.push(config.conv_channels.len() as u8);
    for &c in &config.conv_channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(config.kernel as u32).to_le_bytes());
    out.extend_from_slice(&(config.fc_hidden as u32).to_le_bytes());
    out.extend_from_slice(&(config.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&config.bn_eps.to_le_bytes());
    out.extend_from_slice(&config.bn_momentum.to_le_bytes());
    out.push(match role {
        ModelRole::Source => 0,
        ModelRole::Target => 1,
    });
    out
}

fn decode_config(bytes: &[u8]) -> Result<(ModelConfig, ModelRole)> {
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(CoreError::Persistence("truncated model config blob".into()));
        }
        let v = u32::from_le_bytes([bytes[*pos], bytes[*pos + 1], bytes[*pos + 2], bytes[*pos + 3]]);
        *pos += 4;
        Ok(v)
    };
    let take_f64 = |pos: &mut usize| -> Result<f64> {
        if *pos + 8 > bytes.len() {
            return Err(CoreError::Persistence("truncated model config blob".into()));
        }
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[*pos..*pos + 8]);
        *pos += 8;
        Ok(f64::from_le_bytes(b))
    };
    let mut pos = 0usize;
    let input_mels = take_u32(&mut pos)? as usize;
    let input_frames = take_u32(&mut pos)? as usize;
    if pos >= bytes.len() {
        return Err(CoreError::Persistence("truncated model config blob".into()));
    }
    let n_conv = bytes[pos] as usize;
    pos += 1;
    let mut conv_channels = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv_channels.push(take_u32(&mut pos)? as usize);
    }
    let kernel = take_u32(&mut pos)? as usize;
    let fc_hidden = take_u32(&mut pos)? as usize;
    let num_classes = take_u32(&mut pos)? as usize;
    let bn_eps = take_f64(&mut pos)?;
    let bn_momentum = take_f64(&mut pos)?;
    if pos >= bytes.len() {
        return Err(CoreError::Persistence("truncated model config blob".into()));
    }
    let role = match bytes[pos] {
        0 => ModelRole::Source,
        1 => ModelRole::Target,
        other => {
            return Err(CoreError::Persistence(format!("unknown role tag {other}")))
        }
    };
    Ok((
        ModelConfig {
            input_mels,
            input_frames,
            conv_channels,
            kernel,
            fc_hidden,
            num_classes,
            bn_eps,
            bn_momentum,
        },
        role,
    ))
}

/// Serialize a trained (f32) model: parameters first, then batchnorm
/// running statistics, in layer order.
pub fn model_to_container(model: &Model<f32>) -> Container {
    let mut params = Vec::new();
    for (name, p) in model.named_params() {
        params.push(ParamRecord::from_tensor_f32(&name, p));
    }
    for (name, s) in model.named_state() {
        params.push(ParamRecord::from_tensor_f32(&name, s));
    }
    Container {
        kind: CkptKind::Model,
        config: encode_config(&model.config, model.role),
        params,
        optimizer: None,
        rng_seed: None,
    }
}

/// Rebuild a model from a decoded container; every parameter and running
/// statistic must be present with a matching shape.
pub fn model_from_container(c: &Container) -> Result<Model<f32>> {
    if c.kind != CkptKind::Model {
        return Err(CoreError::Persistence("checkpoint does not hold a model".into()));
    }
    let (config, role) = decode_config(&c.config)?;
    let mut model = build_model::<f32>(&config, role, 0)?;
    let mut fill = |slots: Vec<(String, &mut Tensor<f32>)>| -> Result<()> {
        for (name, slot) in slots {
            let rec = c
                .params
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| CoreError::Persistence(format!("missing parameter {name}")))?;
            if rec.dtype != DType::F32 {
                return Err(CoreError::Persistence(format!(
                    "parameter {name} has unexpected dtype"
                )));
            }
            let t = rec.to_tensor_f32()?;
            if t.shape() != slot.shape() {
                return Err(CoreError::Persistence(format!(
                    "parameter {name} shape {:?} does not match model {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    };
    fill(model.named_params_mut())?;
    fill(model.named_state_mut())?;
    Ok(model)
}
