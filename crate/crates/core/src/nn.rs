//! Attribute classifiers and identity embedders.
//!
//! Both network families are small MLPs over the flattened image. The
//! attribute network has one softmax head per schema attribute on a shared
//! trunk; the embedder emits a unit-norm vector and carries an identity
//! classification head that is only used while training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{AttributeSchema, Dataset, LabeledSample, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::tape::{Tape, Var};
use crate::tenfile;
use crate::tensor::{argmax, quantize_f32, Tensor};

/// Anything that maps a flattened image to per-attribute logits on a tape.
pub trait AttributeModel: Sync {
    fn schema(&self) -> &AttributeSchema;

    /// Number of input values, i.e. the flattened image length.
    fn input_len(&self) -> usize;

    /// Logits for each attribute. `input` has dims `[d]` or `[n, d]`.
    fn logits(&self, tape: &mut Tape, input: Var) -> Result<Vec<Var>>;

    /// Per-attribute class probabilities for one image.
    fn probabilities(&self, image: &Tensor) -> Result<Vec<Vec<f64>>> {
        if image.len() != self.input_len() {
            return Err(Error::shape("forward_attributes", &[self.input_len()], image.dims()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_parts(vec![image.len()], image.data().to_vec()));
        let heads = self.logits(&mut tape, x)?;
        heads
            .into_iter()
            .map(|h| {
                let p = tape.softmax(h)?;
                Ok(tape.value(p).data().to_vec())
            })
            .collect()
    }

    /// Predicted class per attribute.
    fn predict(&self, image: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(image)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }
}

/// Anything that maps a flattened image to a unit-norm identity embedding.
pub trait IdentityModel: Sync {
    fn input_len(&self) -> usize;

    fn embedding_dim(&self) -> usize;

    /// Normalized embedding; `input` has dims `[d]` or `[n, d]`.
    fn embed_on_tape(&self, tape: &mut Tape, input: Var) -> Result<Var>;

    fn embed(&self, image: &Tensor) -> Result<Tensor> {
        if image.len() != self.input_len() {
            return Err(Error::shape("embed", &[self.input_len()], image.dims()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_parts(vec![image.len()], image.data().to_vec()));
        let e = self.embed_on_tape(&mut tape, x)?;
        Ok(tape.value(e).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    weight: Arc<Tensor>,
    bias: Arc<Tensor>,
}

impl Dense {
    fn init(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Arc::new(Tensor::from_parts(vec![fan_in, fan_out], w)),
            bias: Arc::new(Tensor::zeros(&[fan_out])),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Arc::new(Tensor::zeros(&[fan_in, fan_out])),
            bias: Arc::new(Tensor::zeros(&[fan_out])),
        }
    }
}

/// Named parameter slots, in a fixed order shared by binding and checkpoints.
trait Parameterized {
    fn layers(&self) -> Vec<(String, &Dense)>;
    fn layers_mut(&mut self) -> Vec<&mut Dense>;

    fn named_params(&self) -> Vec<(String, &Arc<Tensor>)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    (format!("{name}.weight"), &d.weight),
                    (format!("{name}.bias"), &d.bias),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }
}

/// Binds each layer as two tape leaves.
fn bind(tape: &mut Tape, layers: &[(String, &Dense)], trainable: bool) -> Vec<(Var, Var)> {
    layers
        .iter()
        .map(|(_, d)| {
            if trainable {
                (
                    tape.variable_shared(d.weight.clone()),
                    tape.variable_shared(d.bias.clone()),
                )
            } else {
                (
                    tape.constant_shared(d.weight.clone()),
                    tape.constant_shared(d.bias.clone()),
                )
            }
        })
        .collect()
}

fn trunk_forward(tape: &mut Tape, layers: &[(Var, Var)], input: Var) -> Result<Var> {
    let mut h = input;
    for &(w, b) in layers {
        let z = tape.affine(h, w, b)?;
        h = tape.relu(z)?;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of the target mass spread uniformly over all classes. Keeps the
    /// softmax away from saturation, where its gradients vanish.
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            label_smoothing: 0.0,
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "epochs, batch size and learning rate must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

pub const TRUNK_WIDTHS: [usize; 2] = [256, 128];
pub const HELD_OUT_TRUNK_WIDTHS: [usize; 2] = [192, 96];
pub const EMBEDDING_DIM: usize = 64;
/// Logit scale applied to the unit embedding before the identity head.
const EMBEDDING_LOGIT_SCALE: f64 = 10.0;

/// Shared-trunk classifier with one softmax head per attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeNet {
    schema: AttributeSchema,
    input_dims: Vec<usize>,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
    seed: u64,
}

impl Parameterized for AttributeNet {
    fn layers(&self) -> Vec<(String, &Dense)> {
        let trunk = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("trunk.{i}"), d));
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("head.{i}"), d));
        trunk.chain(heads).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        self.trunk.iter_mut().chain(self.heads.iter_mut()).collect()
    }
}

impl AttributeNet {
    pub fn new(schema: AttributeSchema, input_dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d: usize = input_dims.iter().product();
        let trunk = vec![
            Dense::init(&mut rng, d, TRUNK_WIDTHS[0]),
            Dense::init(&mut rng, TRUNK_WIDTHS[0], TRUNK_WIDTHS[1]),
        ];
        let heads = (0..schema.len())
            .map(|i| Dense::init(&mut rng, TRUNK_WIDTHS[1], schema.classes(i)))
            .collect();
        Self {
            schema,
            input_dims: input_dims.to_vec(),
            trunk,
            heads,
            seed,
        }
    }

    /// All weights and biases zero.
    pub fn zeroed(schema: AttributeSchema, input_dims: &[usize]) -> Self {
        let d: usize = input_dims.iter().product();
        let trunk = vec![
            Dense::zeros(d, TRUNK_WIDTHS[0]),
            Dense::zeros(TRUNK_WIDTHS[0], TRUNK_WIDTHS[1]),
        ];
        let heads = (0..schema.len())
            .map(|i| Dense::zeros(TRUNK_WIDTHS[1], schema.classes(i)))
            .collect();
        Self {
            schema,
            input_dims: input_dims.to_vec(),
            trunk,
            heads,
            seed: 0,
        }
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn forward_bound(&self, tape: &mut Tape, bound: &[(Var, Var)], input: Var) -> Result<Vec<Var>> {
        let h = trunk_forward(tape, &bound[..self.trunk.len()], input)?;
        bound[self.trunk.len()..]
            .iter()
            .map(|&(w, b)| tape.affine(h, w, b))
            .collect()
    }

    /// Per-attribute probability vectors for one image.
    pub fn forward_attributes(&self, image: &Tensor) -> Result<Vec<Vec<f64>>> {
        if image.dims() != self.input_dims.as_slice() {
            return Err(Error::shape("forward_attributes", &self.input_dims, image.dims()));
        }
        self.probabilities(image)
    }

    /// Predicted classes for a batch, one row per image.
    pub fn predict_batch(&self, images: &[&Tensor]) -> Result<Vec<Vec<usize>>> {
        Ok(self
            .probabilities_batch(images)?
            .into_iter()
            .map(|heads| heads.iter().map(|p| argmax(p)).collect())
            .collect())
    }

    /// Probabilities for a batch: `[image][attribute][class]`.
    pub fn probabilities_batch(&self, images: &[&Tensor]) -> Result<Vec<Vec<Vec<f64>>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(stack(images, self.input_len())?);
        let heads = self.logits(&mut tape, x)?;
        let mut out = vec![Vec::with_capacity(heads.len()); images.len()];
        for h in heads {
            let p = tape.softmax(h)?;
            let t = tape.value(p);
            let cols = t.last_axis().unwrap();
            for (row, probs) in out.iter_mut().zip(t.data().chunks(cols)) {
                row.push(probs.to_vec());
            }
        }
        Ok(out)
    }
}

impl AttributeModel for AttributeNet {
    fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    fn logits(&self, tape: &mut Tape, input: Var) -> Result<Vec<Var>> {
        let bound = bind(tape, &self.layers(), false);
        self.forward_bound(tape, &bound, input)
    }
}

fn stack(images: &[&Tensor], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * d);
    for img in images {
        if img.len() != d {
            return Err(Error::shape("stack", &[d], img.dims()));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), d], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderVariant {
    /// The embedder whose gradients the attack uses.
    WhiteBox,
    /// A differently shaped, differently seeded embedder for transfer checks.
    HeldOut,
}

impl EmbedderVariant {
    pub fn trunk_widths(self) -> [usize; 2] {
        match self {
            EmbedderVariant::WhiteBox => TRUNK_WIDTHS,
            EmbedderVariant::HeldOut => HELD_OUT_TRUNK_WIDTHS,
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            EmbedderVariant::WhiteBox => 0x5752_4954_4542_4f58,
            EmbedderVariant::HeldOut => 0x4845_4c44_4f55_5421,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbedderVariant::WhiteBox => "white-box",
            EmbedderVariant::HeldOut => "held-out",
        }
    }
}

/// Identity embedder: trunk, linear embedding layer, L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    variant: EmbedderVariant,
    input_dims: Vec<usize>,
    subjects: usize,
    trunk: Vec<Dense>,
    embedding: Dense,
    classifier: Dense,
    seed: u64,
}

impl Parameterized for EmbeddingNet {
    fn layers(&self) -> Vec<(String, &Dense)> {
        let mut out: Vec<(String, &Dense)> = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("trunk.{i}"), d))
            .collect();
        out.push(("embedding".into(), &self.embedding));
        out.push(("classifier".into(), &self.classifier));
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.trunk.iter_mut().collect();
        out.push(&mut self.embedding);
        out.push(&mut self.classifier);
        out
    }
}

impl EmbeddingNet {
    pub fn new(variant: EmbedderVariant, input_dims: &[usize], subjects: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ variant.seed_offset());
        let d: usize = input_dims.iter().product();
        let [h1, h2] = variant.trunk_widths();
        Self {
            variant,
            input_dims: input_dims.to_vec(),
            subjects,
            trunk: vec![Dense::init(&mut rng, d, h1), Dense::init(&mut rng, h1, h2)],
            embedding: Dense::init(&mut rng, h2, EMBEDDING_DIM),
            classifier: Dense::init(&mut rng, EMBEDDING_DIM, subjects),
            seed,
        }
    }

    pub fn variant(&self) -> EmbedderVariant {
        self.variant
    }

    pub fn subjects(&self) -> usize {
        self.subjects
    }

    /// Shapes of every parameter, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.dims().to_vec()))
            .collect()
    }

    fn embed_bound(&self, tape: &mut Tape, bound: &[(Var, Var)], input: Var) -> Result<Var> {
        let n = self.trunk.len();
        let h = trunk_forward(tape, &bound[..n], input)?;
        let (w, b) = bound[n];
        let z = tape.affine(h, w, b)?;
        tape.normalize(z)
    }

    /// Embeddings for a batch of images, one row each.
    pub fn embed_batch(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(stack(images, self.input_len())?);
        let e = self.embed_on_tape(&mut tape, x)?;
        let t = tape.value(e);
        let d = t.last_axis().unwrap();
        Ok(t
            .data()
            .chunks(d)
            .map(|row| Tensor::vector(row.to_vec()))
            .collect())
    }
}

impl IdentityModel for EmbeddingNet {
    fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    fn embedding_dim(&self) -> usize {
        EMBEDDING_DIM
    }

    fn embed_on_tape(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        // The classifier head is not needed for embeddings.
        let layers = self.layers();
        let bound = bind(tape, &layers[..layers.len() - 1], false);
        self.embed_bound(tape, &bound, input)
    }
}

/// Minibatch Adam over `params`, minimizing the loss built by `loss`.
///
/// Returns the mean loss of the final epoch. Parameters are rounded to `f32`
/// precision afterwards so that a checkpoint round trip is exact.
fn fit(
    params: Vec<&mut Arc<Tensor>>,
    count: usize,
    config: &TrainConfig,
    mut loss: impl FnMut(&mut Tape, &[Var], &[usize]) -> Result<Var>,
) -> Result<f64> {
    config.validate()?;
    let mut params = params;
    let adam_config = AdamConfig::with_learning_rate(config.learning_rate);
    let mut states = params
        .iter()
        .map(|p| AdamState::new(p.dims(), adam_config))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(0x7368_7566);
    let mut order: Vec<usize> = (0..count).collect();
    let mut last_epoch_loss = f64::NAN;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params
                .iter()
                .map(|p| tape.variable_shared(Arc::clone(p)))
                .collect();
            let root = loss(&mut tape, &vars, batch)?;
            total += tape.value(root).item()? * batch.len() as f64;
            let mut grads = tape.backward(root)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).expect("trainable leaf has a gradient"))
                .collect();
            drop(tape);
            for ((p, g), state) in params.iter_mut().zip(&grads).zip(&mut states) {
                state.step(Arc::make_mut(p), g)?;
            }
        }
        last_epoch_loss = total / count as f64;
    }

    for p in params.iter_mut() {
        for x in Arc::make_mut(p).data_mut() {
            *x = quantize_f32(*x);
        }
    }
    Ok(last_epoch_loss)
}

/// Mean cross-entropy of `labels` under `logits` (dims `[n, c]`), against
/// targets that put `smoothing` of the mass uniformly on all classes.
fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, labels)?;
    let mean = tape.mean(picked)?;
    let hard = tape.scale(mean, -(1.0 - smoothing))?;
    if smoothing == 0.0 {
        return Ok(hard);
    }
    // mean over all entries = (1 / n) sum_rows (1 / c) sum_classes
    let uniform = tape.mean(logp)?;
    let soft = tape.scale(uniform, -smoothing)?;
    tape.add(hard, soft)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub name: String,
    pub train: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub final_loss: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub attributes: Vec<AttributeAccuracy>,
}

fn require_split(dataset: &Dataset, split: Split) -> Result<Vec<&LabeledSample>> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Precondition(format!("{} split is empty", split.name())));
    }
    Ok(samples)
}

/// Per-attribute accuracy of `net` on `samples`.
pub fn attribute_accuracy(net: &AttributeNet, samples: &[&LabeledSample]) -> Result<Vec<f64>> {
    let k = net.schema().len();
    if samples.is_empty() {
        return Ok(vec![0.0; k]);
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let predictions = net.predict_batch(&images)?;
    Ok((0..k)
        .map(|i| {
            let hits = predictions
                .iter()
                .zip(samples)
                .filter(|(p, s)| p[i] == s.labels[i])
                .count();
            hits as f64 / samples.len() as f64
        })
        .collect())
}

pub fn train_attribute_net(dataset: &Dataset, config: &TrainConfig) -> Result<(AttributeNet, TrainingReport)> {
    config.validate()?;
    let train = require_split(dataset, Split::Train)?;
    let test = require_split(dataset, Split::Test)?;
    let mut net = AttributeNet::new(
        dataset.schema().clone(),
        &dataset.spec().image_dims(),
        config.seed,
    );
    let d = net.input_len();
    let k = net.schema().len();
    let trunk_len = net.trunk.len();

    let final_loss = {
        let params = net.params_mut();
        fit(params, train.len(), config, |tape, vars, batch| {
            let bound: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
            let images: Vec<&Tensor> = batch.iter().map(|&i| &train[i].image).collect();
            let x = tape.constant(stack(&images, d)?);
            let h = trunk_forward(tape, &bound[..trunk_len], x)?;
            let mut total: Option<Var> = None;
            for (i, &(w, b)) in bound[trunk_len..].iter().enumerate() {
                let logits = tape.affine(h, w, b)?;
                let labels: Vec<usize> = batch.iter().map(|&j| train[j].labels[i]).collect();
                let ce = cross_entropy(tape, logits, &labels, config.label_smoothing)?;
                total = Some(match total {
                    Some(t) => tape.add(t, ce)?,
                    None => ce,
                });
            }
            debug_assert!(k > 0);
            Ok(total.expect("schema has at least one attribute"))
        })?
    };

    let train_acc = attribute_accuracy(&net, &train)?;
    let test_acc = attribute_accuracy(&net, &test)?;
    let report = TrainingReport {
        final_loss,
        train_samples: train.len(),
        test_samples: test.len(),
        attributes: (0..k)
            .map(|i| AttributeAccuracy {
                name: net.schema().name(i).to_string(),
                train: train_acc[i],
                test: test_acc[i],
            })
            .collect(),
    };
    Ok((net, report))
}

pub fn train_embedding_net(
    dataset: &Dataset,
    config: &TrainConfig,
    variant: EmbedderVariant,
) -> Result<EmbeddingNet> {
    config.validate()?;
    let subjects = dataset.spec().subjects;
    if subjects < 2 {
        return Err(Error::Precondition(format!(
            "identity training needs at least 2 subjects, got {subjects}"
        )));
    }
    let train = require_split(dataset, Split::Train)?;
    let mut net = EmbeddingNet::new(variant, &dataset.spec().image_dims(), subjects, config.seed);
    let d = net.input_len();
    let trunk_len = net.trunk.len();
    {
        let params = net.params_mut();
        fit(params, train.len(), config, |tape, vars, batch| {
            let bound: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
            let images: Vec<&Tensor> = batch.iter().map(|&i| &train[i].image).collect();
            let x = tape.constant(stack(&images, d)?);
            let h = trunk_forward(tape, &bound[..trunk_len], x)?;
            let (we, be) = bound[trunk_len];
            let z = tape.affine(h, we, be)?;
            let e = tape.normalize(z)?;
            let e = tape.scale(e, EMBEDDING_LOGIT_SCALE)?;
            let (wc, bc) = bound[trunk_len + 1];
            let logits = tape.affine(e, wc, bc)?;
            let labels: Vec<usize> = batch.iter().map(|&j| train[j].subject).collect();
            cross_entropy(tape, logits, &labels, config.label_smoothing)
        })?;
    }
    Ok(net)
}

/// Euclidean distance between two embeddings.
pub fn identity_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("identity_distance", a.dims(), b.dims()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Distance threshold for declaring two images the same identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchThreshold {
    pub tau: f64,
    pub eer: f64,
    pub split: Split,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

/// Genuine and impostor distances over all unordered pairs.
pub fn pair_distances(embeddings: &[Tensor], subjects: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let d = identity_distance(&embeddings[i], &embeddings[j])?;
            if subjects[i] == subjects[j] {
                genuine.push(d);
            } else {
                impostor.push(d);
            }
        }
    }
    Ok((genuine, impostor))
}

/// Calibrates the equal-error-rate threshold on training-split pairs.
pub fn calibrate_threshold(net: &EmbeddingNet, dataset: &Dataset) -> Result<MatchThreshold> {
    let train = dataset.split(Split::Train);
    let images: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
    let subjects: Vec<usize> = train.iter().map(|s| s.subject).collect();
    let embeddings = net.embed_batch(&images)?;
    let (genuine, impostor) = pair_distances(&embeddings, &subjects)?;
    let point = metrics::equal_error_point(&genuine, &impostor)?;
    Ok(MatchThreshold {
        tau: point.threshold,
        eer: point.eer,
        split: Split::Train,
        genuine_pairs: genuine.len(),
        impostor_pairs: impostor.len(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
enum ModelKind {
    Attribute,
    Embedding {
        variant: EmbedderVariant,
        subjects: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    #[serde(flatten)]
    kind: ModelKind,
    input_dims: Vec<usize>,
    trunk_widths: Vec<usize>,
    schema: AttributeSchema,
    schema_hash: String,
    seed: u64,
    params: BTreeMap<String, Vec<usize>>,
}

fn save_params(dir: &Path, params: &[(String, &Arc<Tensor>)]) -> Result<()> {
    let weights = dir.join("weights");
    fs::create_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
    for (name, t) in params {
        tenfile::write(&weights.join(format!("{name}.ten")), t)?;
    }
    Ok(())
}

fn load_params(dir: &Path, slots: Vec<(String, &mut Arc<Tensor>)>) -> Result<()> {
    for (name, slot) in slots {
        let path = dir.join("weights").join(format!("{name}.ten"));
        let t = tenfile::read(&path).map_err(|e| match e {
            Error::MissingFile { path } => Error::format(path, format!("missing weight for parameter {name}")),
            other => other,
        })?;
        if t.dims() != slot.dims() {
            return Err(Error::format(
                &path,
                format!(
                    "parameter {name} has dims {:?}, architecture expects {:?}",
                    t.dims(),
                    slot.dims()
                ),
            ));
        }
        *slot = Arc::new(t);
    }
    Ok(())
}

fn manifest_params(params: &[(String, &Arc<Tensor>)]) -> BTreeMap<String, Vec<usize>> {
    params
        .iter()
        .map(|(n, t)| (n.clone(), t.dims().to_vec()))
        .collect()
}

/// Checks a checkpoint's schema against the schema it will be used with.
pub fn ensure_schema(found: &AttributeSchema, expected: &AttributeSchema, what: &str) -> Result<()> {
    if found.fingerprint() != expected.fingerprint() {
        return Err(Error::Config(format!(
            "{what} was trained for schema {} but the dataset has schema {}",
            found.fingerprint(),
            expected.fingerprint()
        )));
    }
    Ok(())
}

impl AttributeNet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = self.named_params();
        save_params(dir, &params)?;
        let manifest = ModelManifest {
            kind: ModelKind::Attribute,
            input_dims: self.input_dims.clone(),
            trunk_widths: TRUNK_WIDTHS.to_vec(),
            schema: self.schema.clone(),
            schema_hash: self.schema.fingerprint(),
            seed: self.seed,
            params: manifest_params(&params),
        };
        crate::write_json(&dir.join("model.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let manifest: ModelManifest = crate::read_json(&path)?;
        if !matches!(manifest.kind, ModelKind::Attribute) {
            return Err(Error::format(&path, "not an attribute-network checkpoint"));
        }
        if manifest.schema_hash != manifest.schema.fingerprint() {
            return Err(Error::format(&path, "schema hash does not match schema"));
        }
        if manifest.trunk_widths != TRUNK_WIDTHS {
            return Err(Error::format(
                &path,
                format!("unsupported trunk widths {:?}", manifest.trunk_widths),
            ));
        }
        let mut net = AttributeNet::zeroed(manifest.schema, &manifest.input_dims);
        net.seed = manifest.seed;
        check_param_list(&path, &net.named_params(), &manifest.params)?;
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        load_params(dir, names.into_iter().zip(net.params_mut()).collect())?;
        Ok(net)
    }
}

fn check_param_list(
    path: &Path,
    expected: &[(String, &Arc<Tensor>)],
    found: &BTreeMap<String, Vec<usize>>,
) -> Result<()> {
    let expected = manifest_params(expected);
    if &expected != found {
        return Err(Error::format(
            path,
            format!("architecture mismatch: expected parameters {expected:?}, checkpoint lists {found:?}"),
        ));
    }
    Ok(())
}

impl EmbeddingNet {
    /// Saves the network; `schema` records the dataset it was trained on.
    pub fn save(&self, dir: &Path, schema: &AttributeSchema) -> Result<()> {
        let params = self.named_params();
        save_params(dir, &params)?;
        let manifest = ModelManifest {
            kind: ModelKind::Embedding {
                variant: self.variant,
                subjects: self.subjects,
            },
            input_dims: self.input_dims.clone(),
            trunk_widths: self.variant.trunk_widths().to_vec(),
            schema: schema.clone(),
            schema_hash: schema.fingerprint(),
            seed: self.seed,
            params: manifest_params(&params),
        };
        crate::write_json(&dir.join("model.json"), &manifest)
    }

    /// Loads an embedder together with the schema it was saved with.
    pub fn load(dir: &Path) -> Result<(Self, AttributeSchema)> {
        let path = dir.join("model.json");
        let manifest: ModelManifest = crate::read_json(&path)?;
        let ModelKind::Embedding { variant, subjects } = manifest.kind else {
            return Err(Error::format(&path, "not an embedding-network checkpoint"));
        };
        if manifest.trunk_widths != variant.trunk_widths() {
            return Err(Error::format(
                &path,
                format!(
                    "trunk widths {:?} do not match variant {}",
                    manifest.trunk_widths,
                    variant.name()
                ),
            ));
        }
        let mut net = EmbeddingNet::new(variant, &manifest.input_dims, subjects, manifest.seed);
        check_param_list(&path, &net.named_params(), &manifest.params)?;
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        load_params(dir, names.into_iter().zip(net.params_mut()).collect())?;
        Ok((net, manifest.schema))
    }
}
