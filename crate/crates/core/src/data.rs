//! Procedurally generated face-like images with controllable attributes.
//!
//! Each image is a smooth per-subject texture plus one pattern per attribute,
//! where the pattern depends on the attribute's class and lives in that
//! attribute's horizontal band. All randomness comes from ChaCha streams keyed
//! by the master seed and a per-purpose stream id, so any sample can be
//! regenerated on its own.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tenfile;
use crate::tensor::{quantize_f32, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub classes: usize,
}

/// Ordered attribute set with per-attribute class counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl TryFrom<Vec<Attribute>> for AttributeSchema {
    type Error = Error;

    fn try_from(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Config("schema needs at least one attribute".into()));
        }
        let mut seen = HashSet::new();
        for a in &attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Config(format!("duplicate attribute name {:?}", a.name)));
            }
            if a.classes < 2 {
                return Err(Error::Config(format!(
                    "attribute {:?} needs at least 2 classes, got {}",
                    a.name, a.classes
                )));
            }
        }
        Ok(Self { attributes })
    }
}

impl From<AttributeSchema> for Vec<Attribute> {
    fn from(s: AttributeSchema) -> Self {
        s.attributes
    }
}

impl AttributeSchema {
    pub fn new<S: Into<String>>(attributes: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        attributes
            .into_iter()
            .map(|(name, classes)| Attribute {
                name: name.into(),
                classes,
            })
            .collect::<Vec<_>>()
            .try_into()
    }

    /// Five binary attributes; the first three are the ones suppressed in the
    /// multi-attribute experiments, the last two are preserved.
    pub fn five_binary() -> Self {
        Self::new([
            ("gender", 2),
            ("attractive", 2),
            ("smiling", 2),
            ("makeup", 2),
            ("cheekbones", 2),
        ])
        .expect("static schema is valid")
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn classes(&self, index: usize) -> usize {
        self.attributes[index].classes
    }

    pub fn name(&self, index: usize) -> &str {
        &self.attributes[index].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Resolves an attribute name, with an error listing the valid names.
    pub fn resolve(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| {
            let names: Vec<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
            Error::Config(format!("unknown attribute {name:?}; schema has {names:?}"))
        })
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.attributes).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Gallery,
    Probe,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Test, Split::Gallery, Split::Probe];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Generator parameters.
///
/// Within each subject, image 0 is the gallery image, the next
/// `train_per_subject` go to train, the next `test_per_subject` to test and
/// the remainder to probe. Counts are truncated when a subject has fewer
/// images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub subjects: usize,
    pub images_per_subject: usize,
    pub train_per_subject: usize,
    pub test_per_subject: usize,
    pub schema: AttributeSchema,
    pub amplitude: f64,
    pub noise: f64,
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            subjects: 40,
            images_per_subject: 10,
            train_per_subject: 4,
            test_per_subject: 3,
            schema: AttributeSchema::five_binary(),
            amplitude: 0.08,
            noise: 0.05,
            overlap: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.images_per_subject == 0 {
            return Err(Error::Config(
                "dataset needs at least one subject and one image per subject".into(),
            ));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("image dims must be positive".into()));
        }
        if self.height < self.schema.len() {
            return Err(Error::Config(format!(
                "height {} cannot hold {} attribute bands",
                self.height,
                self.schema.len()
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap must be in [0, 1), got {}", self.overlap)));
        }
        if !(self.amplitude >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("amplitude and noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn image_dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn sample_count(&self) -> usize {
        self.subjects * self.images_per_subject
    }

    /// Split of the `index`-th image of a subject.
    pub fn split_of(&self, index: usize) -> Split {
        let train_end = 1 + self.train_per_subject;
        let test_end = train_end + self.test_per_subject;
        match index {
            0 => Split::Gallery,
            i if i < train_end => Split::Train,
            i if i < test_end => Split::Test,
            _ => Split::Probe,
        }
    }

    /// Row range `[start, end)` of attribute `i`'s band, widened by the overlap.
    pub fn band_rows(&self, attribute: usize) -> (usize, usize) {
        let k = self.schema.len();
        let start = attribute * self.height / k;
        let end = (attribute + 1) * self.height / k;
        let grow = (self.overlap * (end - start) as f64).round() as usize;
        (start.saturating_sub(grow), (end + grow).min(self.height))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: usize,
    pub subject: usize,
    pub image: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    spec: SyntheticSpec,
    samples: Vec<LabeledSample>,
}

const STREAM_TEXTURE: u64 = 1 << 40;
const STREAM_PATTERN: u64 = 2 << 40;
const STREAM_SAMPLE: u64 = 3 << 40;
const TEXTURE_GRID: usize = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Smooth field in [-1, 1]: bilinear upsampling of a coarse random grid.
fn smooth_field(rng: &mut ChaCha20Rng, h: usize, w: usize, c: usize) -> Vec<f64> {
    let g = TEXTURE_GRID;
    let coarse: Vec<f64> = (0..g * g * c).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let fy = y as f64 * (g - 1) as f64 / (h.max(2) - 1) as f64;
        let y0 = (fy.floor() as usize).min(g - 2);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 * (g - 1) as f64 / (w.max(2) - 1) as f64;
            let x0 = (fx.floor() as usize).min(g - 2);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| coarse[(yy * g + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[(y * w + x) * c + ch] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Identity texture for a subject, centred on 1 so that half of it sits
/// mid-range.
pub fn identity_texture(spec: &SyntheticSpec, subject: usize) -> Vec<f64> {
    let mut rng = stream_rng(spec.seed, STREAM_TEXTURE | subject as u64);
    smooth_field(&mut rng, spec.height, spec.width, spec.channels)
        .into_iter()
        .map(|v| 1.0 + 0.6 * v)
        .collect()
}

/// Pattern for `(attribute, class)`: uniform in `[-amplitude, amplitude]`
/// inside the attribute's band, zero elsewhere.
pub fn attribute_pattern(spec: &SyntheticSpec, attribute: usize, class: usize) -> Vec<f64> {
    let mut rng = stream_rng(
        spec.seed,
        STREAM_PATTERN | ((attribute as u64) << 20) | class as u64,
    );
    let (start, end) = spec.band_rows(attribute);
    let row = spec.width * spec.channels;
    let mut out = vec![0.0; spec.pixels()];
    for v in &mut out[start * row..end * row] {
        *v = spec.amplitude * rng.random_range(-1.0..=1.0);
    }
    out
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.schema.len();
    let textures: Vec<Vec<f64>> = (0..spec.subjects)
        .into_par_iter()
        .map(|s| identity_texture(spec, s))
        .collect();
    let patterns: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|i| {
            (0..spec.schema.classes(i))
                .map(|c| attribute_pattern(spec, i, c))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;

    let samples = (0..spec.sample_count())
        .into_par_iter()
        .map(|id| {
            let subject = id / spec.images_per_subject;
            let index = id % spec.images_per_subject;
            let mut rng = stream_rng(spec.seed, STREAM_SAMPLE | id as u64);
            let labels: Vec<usize> = (0..k)
                .map(|i| rng.random_range(0..spec.schema.classes(i)))
                .collect();
            let mut pixels: Vec<f64> = textures[subject].iter().map(|t| 0.5 * t).collect();
            for (i, &c) in labels.iter().enumerate() {
                for (p, q) in pixels.iter_mut().zip(&patterns[i][c]) {
                    *p += q;
                }
            }
            for p in &mut pixels {
                *p = quantize_f32((*p + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
            LabeledSample {
                id,
                subject,
                image: Tensor::from_parts(spec.image_dims().to_vec(), pixels),
                labels,
                split: spec.split_of(index),
            }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: usize,
    subject: usize,
    labels: Vec<usize>,
    split: Split,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SyntheticSpec,
    schema: AttributeSchema,
    seed: u64,
    splits: BTreeMap<Split, Vec<usize>>,
    samples: Vec<ManifestSample>,
}

pub fn image_file_name(id: usize) -> String {
    format!("images/{id:06}.ten")
}

impl Dataset {
    /// Assembles a dataset from explicit samples, checking labels and shapes.
    pub fn from_samples(spec: SyntheticSpec, samples: Vec<LabeledSample>) -> Result<Self> {
        let dims = spec.image_dims();
        let mut ids = HashSet::new();
        for s in &samples {
            if !ids.insert(s.id) {
                return Err(Error::Config(format!("duplicate sample id {}", s.id)));
            }
            if s.image.dims() != dims {
                return Err(Error::shape("dataset", &dims, s.image.dims()));
            }
            if s.labels.len() != spec.schema.len()
                || s.labels
                    .iter()
                    .enumerate()
                    .any(|(i, &l)| l >= spec.schema.classes(i))
            {
                return Err(Error::Config(format!(
                    "sample {} has labels {:?} outside the schema",
                    s.id, s.labels
                )));
            }
        }
        Ok(Self { spec, samples })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.spec.schema
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Samples from any of `splits`, in id order.
    pub fn splits(&self, splits: &[Split]) -> Vec<&LabeledSample> {
        self.samples
            .iter()
            .filter(|s| splits.contains(&s.split))
            .collect()
    }

    pub fn split_indices(&self) -> BTreeMap<Split, Vec<usize>> {
        let mut out: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.split).or_default().push(s.id);
        }
        out
    }

    pub fn by_id(&self, id: usize) -> Option<&LabeledSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            spec: self.spec.clone(),
            schema: self.spec.schema.clone(),
            seed: self.spec.seed,
            splits: self.split_indices(),
            samples: self
                .samples
                .iter()
                .map(|s| ManifestSample {
                    id: s.id,
                    subject: s.subject,
                    labels: s.labels.clone(),
                    split: s.split,
                    file: image_file_name(s.id),
                })
                .collect(),
        };
        for s in &self.samples {
            tenfile::write(&dir.join(image_file_name(s.id)), &s.image)?;
        }
        crate::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = crate::read_json(&manifest_path)?;
        if manifest.schema != manifest.spec.schema {
            return Err(Error::format(&manifest_path, "schema disagrees with spec.schema"));
        }
        if manifest.seed != manifest.spec.seed {
            return Err(Error::format(&manifest_path, "seed disagrees with spec.seed"));
        }
        let dims = manifest.spec.image_dims();
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for m in manifest.samples {
            let path = dir.join(&m.file);
            let image = tenfile::read(&path)?;
            if image.dims() != dims {
                return Err(Error::format(
                    &path,
                    format!("image dims {:?} do not match manifest {:?}", image.dims(), dims),
                ));
            }
            samples.push(LabeledSample {
                id: m.id,
                subject: m.subject,
                image,
                labels: m.labels,
                split: m.split,
            });
        }
        let dataset = Dataset::from_samples(manifest.spec, samples)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if dataset.split_indices() != manifest.splits {
            return Err(Error::format(&manifest_path, "split index lists disagree with samples"));
        }
        Ok(dataset)
    }
}
