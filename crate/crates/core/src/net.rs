//! Fully-connected ReLU classifiers used as teacher and student backbones.
//!
//! A model is split into a feature extractor and a classifier at
//! `feature_layer_index`: the activation of that layer is the feature vector
//! that feeds the memory bank, and the final layer's output is the logits.
//!
//! Parameters are stored flat, layer by layer: the `out x in` weight matrix
//! row-major, followed by the `out` biases.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ordered_sum, DenseVector};
use crate::rng::{SeededRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArchitecture {
    layer_widths: Vec<usize>,
    activation: Activation,
}

impl MlpArchitecture {
    /// `widths` runs from the input dimension to the class count.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid(format!(
                "architecture needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::invalid(format!("zero-width layer in {widths:?}")));
        }
        Ok(Self {
            layer_widths: widths,
            activation: Activation::Relu,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of widths, input and output included.
    pub fn layer_count(&self) -> usize {
        self.layer_widths.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Penultimate layer, i.e. the input of the final affine map.
    pub fn default_feature_layer(&self) -> usize {
        self.layer_widths.len() - 2
    }

    /// `(weight offset, bias offset)` of each affine layer.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.layer_widths.len() - 1);
        let mut at = 0;
        for w in self.layer_widths.windows(2) {
            out.push((at, at + w[0] * w[1]));
            at += w[0] * w[1] + w[1];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    architecture: MlpArchitecture,
    parameters: Vec<f64>,
    feature_layer_index: usize,
}

impl MlpModel {
    pub fn new(architecture: MlpArchitecture, parameters: Vec<f64>, feature_layer_index: usize) -> Result<Self> {
        if parameters.len() != architecture.parameter_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                architecture.parameter_count(),
                parameters.len()
            )));
        }
        if feature_layer_index >= architecture.layer_count() {
            return Err(Error::invalid(format!(
                "feature layer {feature_layer_index} out of range for {} layers",
                architecture.layer_count()
            )));
        }
        if let Some(i) = parameters.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("non-finite parameter at index {i}")));
        }
        Ok(Self {
            architecture,
            parameters,
            feature_layer_index,
        })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.architecture
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    pub fn feature_layer_index(&self) -> usize {
        self.feature_layer_index
    }

    pub fn feature_dim(&self) -> usize {
        self.architecture.layer_widths[self.feature_layer_index]
    }

    pub fn with_feature_layer(self, index: usize) -> Result<Self> {
        Self::new(self.architecture, self.parameters, index)
    }

    /// Same architecture and feature split, new parameters.
    pub fn with_parameters(&self, parameters: Vec<f64>) -> Result<Self> {
        Self::new(self.architecture.clone(), parameters, self.feature_layer_index)
    }
}

/// Weights ~ N(0, 1/fan_in) from the `Init` stream, biases zero.
pub fn init_model(arch: &MlpArchitecture, seed: u64) -> MlpModel {
    let mut rng = SeededRng::new(seed, Stream::Init);
    let mut parameters = Vec::with_capacity(arch.parameter_count());
    for w in arch.layer_widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        parameters.extend((0..fan_in * fan_out).map(|_| rng.normal() * scale));
        parameters.extend(std::iter::repeat_n(0.0, fan_out));
    }
    MlpModel {
        feature_layer_index: arch.default_feature_layer(),
        architecture: arch.clone(),
        parameters,
    }
}

/// Everything a forward pass produces, including what backprop needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub features: DenseVector,
    pub logits: DenseVector,
    /// Input of each affine layer (index 0 is the network input).
    activations: Vec<Vec<f64>>,
    /// Pre-activation output of each affine layer.
    pre_activations: Vec<Vec<f64>>,
    widths: Vec<usize>,
}

pub fn forward(model: &MlpModel, input: &[f64]) -> Result<ForwardRecord> {
    let arch = &model.architecture;
    if input.len() != arch.input_dim() {
        return Err(Error::invalid(format!(
            "input has {} entries, model expects {}",
            input.len(),
            arch.input_dim()
        )));
    }
    let n_affine = arch.layer_count() - 1;
    let mut activations = Vec::with_capacity(n_affine);
    let mut pre_activations = Vec::with_capacity(n_affine);
    let mut current = input.to_vec();
    for (l, (w_off, b_off)) in arch.offsets().into_iter().enumerate() {
        let (fan_in, fan_out) = (arch.layer_widths[l], arch.layer_widths[l + 1]);
        let weights = &model.parameters[w_off..w_off + fan_in * fan_out];
        let biases = &model.parameters[b_off..b_off + fan_out];
        let pre: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                ordered_sum(row.iter().zip(&current).map(|(w, x)| w * x)) + biases[o]
            })
            .collect();
        let next = if l + 1 < n_affine {
            pre.iter().map(|&v| v.max(0.0)).collect()
        } else {
            pre.clone()
        };
        activations.push(std::mem::replace(&mut current, next));
        pre_activations.push(pre);
    }
    let logits = current;
    let features = if model.feature_layer_index == n_affine {
        logits.clone()
    } else {
        activations[model.feature_layer_index].clone()
    };
    Ok(ForwardRecord {
        features: DenseVector::new(features)?,
        logits: DenseVector::new(logits)
            .map_err(|_| Error::NumericInstability("forward pass produced non-finite logits".into()))?,
        activations,
        pre_activations,
        widths: arch.layer_widths.clone(),
    })
}

/// Parameter gradient given `d loss / d logits`.
pub fn backward(model: &MlpModel, record: &ForwardRecord, logit_gradient: &[f64]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; model.parameters.len()];
    backward_accumulate(model, record, logit_gradient, &mut grad)?;
    Ok(grad)
}

/// Adds the parameter gradient into `grad`.
pub fn backward_accumulate(
    model: &MlpModel,
    record: &ForwardRecord,
    logit_gradient: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let arch = &model.architecture;
    if record.widths != arch.layer_widths {
        return Err(Error::invalid(format!(
            "forward record for widths {:?} used with model {:?}",
            record.widths, arch.layer_widths
        )));
    }
    if logit_gradient.len() != arch.class_count() {
        return Err(Error::invalid(format!(
            "logit gradient has {} entries, expected {}",
            logit_gradient.len(),
            arch.class_count()
        )));
    }
    if grad.len() != model.parameters.len() {
        return Err(Error::invalid("gradient buffer has the wrong length"));
    }
    let offsets = arch.offsets();
    let mut delta = logit_gradient.to_vec();
    for l in (0..offsets.len()).rev() {
        let (w_off, b_off) = offsets[l];
        let (fan_in, fan_out) = (arch.layer_widths[l], arch.layer_widths[l + 1]);
        let input = &record.activations[l];
        for o in 0..fan_out {
            let d = delta[o];
            let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
            grad[b_off + o] += d;
        }
        if l > 0 {
            let weights = &model.parameters[w_off..w_off + fan_in * fan_out];
            let below = &record.pre_activations[l - 1];
            delta = (0..fan_in)
                .map(|i| {
                    if below[i] > 0.0 {
                        ordered_sum((0..fan_out).map(|o| weights[o * fan_in + i] * delta[o]))
                    } else {
                        0.0
                    }
                })
                .collect();
        }
    }
    Ok(())
}

/// SGD hyperparameters for a single step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffer(Vec<f64>);

impl MomentumBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `v <- momentum * v + g + weight_decay * theta;  theta <- theta - lr * v`
pub fn sgd_step(
    model: MlpModel,
    gradient: &[f64],
    params: SgdParams,
    state: MomentumBuffer,
) -> Result<(MlpModel, MomentumBuffer)> {
    if gradient.len() != model.parameters.len() || state.0.len() != model.parameters.len() {
        return Err(Error::invalid(format!(
            "sgd_step: {} parameters, gradient {}, momentum buffer {}",
            model.parameters.len(),
            gradient.len(),
            state.0.len()
        )));
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericInstability(format!(
            "non-finite gradient at parameter {i}"
        )));
    }
    let MlpModel {
        architecture,
        mut parameters,
        feature_layer_index,
    } = model;
    let mut velocity = state.0;
    for ((theta, v), g) in parameters.iter_mut().zip(velocity.iter_mut()).zip(gradient) {
        *v = params.momentum * *v + g + params.weight_decay * *theta;
        *theta -= params.lr * *v;
    }
    if let Some(i) = parameters.iter().position(|p| !p.is_finite()) {
        return Err(Error::NumericInstability(format!("parameter {i} diverged")));
    }
    Ok((
        MlpModel {
            architecture,
            parameters,
            feature_layer_index,
        },
        MomentumBuffer(velocity),
    ))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ICKD";
const CHECKPOINT_VERSION: u16 = 1;

/// Binary checkpoint: magic `ICKD`, version u16, layer count u16, widths u32
/// each, feature layer index u16, then the parameters as f64. Little-endian.
pub fn checkpoint_bytes(model: &MlpModel) -> Vec<u8> {
    let widths = &model.architecture.layer_widths;
    let mut out = Vec::with_capacity(12 + 4 * widths.len() + 8 * model.parameters.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(widths.len() as u16).to_le_bytes());
    for &w in widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.feature_layer_index as u16).to_le_bytes());
    for p in &model.parameters {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = crate::io::Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version_at = r.offset();
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            version_at,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = r.u16()? as usize;
    let widths = (0..count)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let feature_at = r.offset();
    let feature_layer_index = r.u16()? as usize;
    let arch = MlpArchitecture::new(widths).map_err(|e| Error::format(6, e.to_string()))?;
    let parameters = (0..arch.parameter_count())
        .map(|_| r.f64())
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    MlpModel::new(arch, parameters, feature_layer_index).map_err(|e| Error::format(feature_at, e.to_string()))
}

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
