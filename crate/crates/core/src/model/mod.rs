//! Differentiable models over flat parameter vectors.
//!
//! A [`ModelSpec`] describes an architecture; every parameter of that
//! architecture lives in one [`ParamVector`], segmented per layer by a
//! [`Layout`] (weights first, then biases, inside each segment). Loss is the
//! mean softmax cross-entropy over a [`Batch`], and gradients are exact
//! backpropagation through the same computation.

mod gradcheck;
mod network;

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};

pub use gradcheck::{grad_check, grad_check_against, GradCheckReport, GRAD_CHECK_FLOOR};
pub(crate) use network::Network;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One named, contiguous range of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl LayerSlice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Ordered layer segmentation of a parameter vector. Segments tile `[0, dim)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    slices: Vec<LayerSlice>,
}

impl Layout {
    pub fn new(slices: Vec<LayerSlice>) -> Result<Self, ModelError> {
        if slices.is_empty() {
            return Err(ModelError::InvalidLayout("layout has no segments".into()));
        }
        let mut next = 0;
        for s in &slices {
            if s.start != next {
                return Err(ModelError::InvalidLayout(format!(
                    "segment `{}` starts at {} but previous segment ends at {}",
                    s.name, s.start, next
                )));
            }
            if s.len == 0 {
                return Err(ModelError::InvalidLayout(format!("segment `{}` is empty", s.name)));
            }
            next += s.len;
        }
        Ok(Self { slices })
    }

    /// A layout with a single segment covering `len` values.
    pub fn single(name: &str, len: usize) -> Self {
        Self::new(vec![LayerSlice { name: name.to_string(), start: 0, len }])
            .expect("single segment layout with len > 0")
    }

    pub fn dim(&self) -> usize {
        self.slices.last().map(|s| s.start + s.len).unwrap_or(0)
    }

    pub fn slices(&self) -> &[LayerSlice] {
        &self.slices
    }

    pub fn get(&self, name: &str) -> Option<&LayerSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slices.iter().map(|s| s.name.as_str())
    }
}

/// Flat parameter (or update, or gradient) vector with its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self, ModelError> {
        if values.len() != layout.dim() {
            return Err(ModelError::Shape(format!(
                "{} values for a layout of dimension {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self { values: vec![0.0; layout.dim()], layout }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self::zeros(other.layout.clone())
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(values, self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn shared_layout(&self) -> Arc<Layout> {
        self.layout.clone()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.values[s.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    /// `self - other`
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        ParamVector { values, layout: self.layout.clone() }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Largest `|a - b| / max(|a|, |b|, floor)` over coordinates.
    pub fn max_rel_diff(&self, other: &ParamVector, floor: f64) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Shape of one input sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputShape::Flat(d) => write!(f, "{d}"),
            InputShape::Image { channels, height, width } => write!(f, "{channels}x{height}x{width}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Multinomial logistic regression (one dense layer).
    Logistic,
    /// Dense ReLU network with the given hidden widths.
    Mlp(Vec<usize>),
    /// conv(32, 5x5) -> ReLU -> pool -> conv(64, 5x5) -> ReLU -> pool -> fc(512) -> ReLU -> fc(C)
    PaperCnn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input: InputShape,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic(features: usize, num_classes: usize) -> Self {
        Self { kind: ModelKind::Logistic, input: InputShape::Flat(features), num_classes }
    }

    pub fn mlp(features: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self { kind: ModelKind::Mlp(hidden), input: InputShape::Flat(features), num_classes }
    }

    pub fn paper_cnn(channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::PaperCnn,
            input: InputShape::Image { channels, height, width },
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input.is_empty() {
            return Err(ModelError::InvalidSpec("input has zero features".into()));
        }
        match &self.kind {
            ModelKind::Logistic => {}
            ModelKind::Mlp(hidden) => {
                if hidden.contains(&0) {
                    return Err(ModelError::InvalidSpec("mlp hidden width must be positive".into()));
                }
            }
            ModelKind::PaperCnn => match self.input {
                InputShape::Image { height, width, .. } if height >= 4 && width >= 4 => {}
                InputShape::Image { .. } => {
                    return Err(ModelError::InvalidSpec("paper_cnn needs images of at least 4x4".into()))
                }
                InputShape::Flat(_) => {
                    return Err(ModelError::InvalidSpec(
                        "paper_cnn requires image input (channels, height, width)".into(),
                    ))
                }
            },
        }
        Ok(())
    }
}

/// A labeled mini-batch, features stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_len: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, feature_len: usize) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::Shape("batch must hold at least one sample".into()));
        }
        if feature_len == 0 || features.len() != labels.len() * feature_len {
            return Err(ModelError::Shape(format!(
                "{} feature values for {} samples of length {}",
                features.len(),
                labels.len(),
                feature_len
            )));
        }
        Ok(Self { features, labels, feature_len })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_len..(i + 1) * self.feature_len]
    }

    /// Concatenate two batches (`self` first).
    pub fn concat(&self, other: &Batch) -> Result<Batch, ModelError> {
        if self.feature_len != other.feature_len {
            return Err(ModelError::Shape("cannot concatenate batches of different widths".into()));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Batch::new(features, labels, self.feature_len)
    }
}

/// Parameter segmentation for `spec`, in forward order.
pub fn layer_slices(spec: &ModelSpec) -> Result<Layout, ModelError> {
    Ok(Network::build(spec)?.layout().clone())
}

/// Fan-in scaled uniform weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector, ModelError> {
    let net = Network::build(spec)?;
    let mut values = vec![0.0; net.layout().dim()];
    let mut rng = rng::stream(seed, Purpose::Init, &[]);
    for block in net.weight_blocks() {
        let bound = (6.0 / block.fan_in as f64).sqrt();
        for v in &mut values[block.weights.clone()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    ParamVector::new(values, Arc::new(net.layout().clone()))
}

/// Mean cross-entropy of the softmax outputs over the batch.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64, ModelError> {
    let net = Network::build(spec)?;
    net.check(params, batch)?;
    let (sum, _) = net.loss_sum_and_correct(params.values(), batch);
    Ok(sum / batch.len() as f64)
}

/// Gradient of [`loss`] with respect to the parameters.
pub fn grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector, ModelError> {
    loss_and_grad(spec, params, batch).map(|(_, g)| g)
}

/// Loss and gradient from one forward/backward sweep.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector), ModelError> {
    let net = Network::build(spec)?;
    net.check(params, batch)?;
    let (loss, grad) = net.loss_and_grad(params.values(), batch);
    Ok((loss, params.with_values(grad)?))
}

/// Fraction of samples whose arg-max logit (lowest index on ties) is the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64, ModelError> {
    let (_, correct) = loss_sum_and_correct(spec, params, batch)?;
    Ok(correct as f64 / batch.len() as f64)
}

/// Summed (not averaged) loss and number of correct top-1 predictions.
pub fn loss_sum_and_correct(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, usize), ModelError> {
    let net = Network::build(spec)?;
    net.check(params, batch)?;
    Ok(net.loss_sum_and_correct(params.values(), batch))
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_batch() -> Batch {
        Batch::new(vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7, 1.5, -2.0], vec![0, 1], 4).unwrap()
    }

    #[test]
    fn logistic_param_count_and_layout() {
        let spec = ModelSpec::logistic(4, 2);
        let p = init_params(&spec, 7).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(p.layout().slices(), &[LayerSlice { name: "fc1".into(), start: 0, len: 10 }]);
        assert_eq!(p, init_params(&spec, 7).unwrap());
        // biases are the last two entries of the fc1 segment
        assert_eq!(&p.values()[8..], &[0.0, 0.0]);
    }

    #[test]
    fn paper_cnn_layers_and_zero_biases() {
        let spec = ModelSpec::paper_cnn(3, 32, 32, 10);
        let layout = layer_slices(&spec).unwrap();
        let names: Vec<&str> = layout.names().collect();
        assert_eq!(names, ["conv1", "conv2", "fc1", "fc2"]);
        let p = init_params(&spec, 3).unwrap();
        assert_eq!(p.layout(), &layout);
        let net = Network::build(&spec).unwrap();
        for block in net.weight_blocks() {
            assert!(p.values()[block.biases.clone()].iter().all(|&b| b == 0.0));
            assert!(p.values()[block.weights.clone()].iter().any(|&w| w != 0.0));
        }
        // conv1 32*3*25+32, conv2 64*32*25+64, fc1 4096*512+512, fc2 512*10+10
        assert_eq!(layout.dim(), 2432 + 51264 + 2_097_664 + 5130);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(init_params(&ModelSpec::logistic(4, 1), 0).is_err());
        let bad = ModelSpec { kind: ModelKind::PaperCnn, input: InputShape::Flat(10), num_classes: 10 };
        assert!(matches!(bad.validate(), Err(ModelError::InvalidSpec(_))));
        assert!(ModelSpec::mlp(4, vec![0], 3).validate().is_err());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let spec = ModelSpec::logistic(3, 10);
        let params = ParamVector::zeros(Arc::new(layer_slices(&spec).unwrap()));
        let batch = Batch::new(vec![0.0; 6], vec![3, 9], 3).unwrap();
        let l = loss(&spec, &params, &batch).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let spec = ModelSpec::logistic(3, 2);
        let params = init_params(&spec, 0).unwrap();
        assert!(matches!(loss(&spec, &params, &tiny_batch()), Err(ModelError::Shape(_))));
        let wrong_label = Batch::new(vec![0.0; 3], vec![5], 3).unwrap();
        assert!(loss(&spec, &params, &wrong_label).is_err());
        let other = init_params(&ModelSpec::logistic(4, 2), 0).unwrap();
        assert!(grad(&spec, &other, &Batch::new(vec![0.0; 3], vec![1], 3).unwrap()).is_err());
    }

    #[test]
    fn layout_rejects_gaps() {
        let err = Layout::new(vec![
            LayerSlice { name: "a".into(), start: 0, len: 2 },
            LayerSlice { name: "b".into(), start: 3, len: 2 },
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
