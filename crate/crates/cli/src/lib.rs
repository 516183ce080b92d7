//! Experiment configuration and the end-to-end pipeline behind the
//! `attrcloak` command.
//!
//! A run lays out its output directory as
//!
//! ```text
//! <out>/config.resolved.json
//! <out>/data/                      dataset (manifest.json, images/)
//! <out>/models/attribute/          attribute classifier
//! <out>/models/white-box/          identity embedder used by the attack
//! <out>/models/held-out/           identity embedder never seen by the attack
//! <out>/attack/                    results.json, anonymized/, perturbation/
//! <out>/report/                    report.json, CSV and SVG files
//! ```
//!
//! Each data and model directory carries a `stage.json` with the settings
//! that produced it. A rerun whose settings match loads the stage instead of
//! rebuilding it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use attrcloak::anonymize::{batch_attack, AttackSpec, BatchOutcome, Embedders, IdentityOptions, ScoreSpace, TargetMode};
use attrcloak::data::{generate_dataset, AttributeSchema, Dataset, Split, SyntheticSpec};
use attrcloak::nn::{
    calibrate_threshold, ensure_schema, train_attribute_net, train_embedding_net, AttributeModel, AttributeNet, EmbedderVariant,
    EmbeddingNet, MatchThreshold, TrainConfig, TrainingReport,
};
use attrcloak::report::{build_report, write_report, EmbedderEval, EvalReport, ReportFormats, ReportInputs};
use serde::{Deserialize, Serialize};

pub use attrcloak::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation: conflicting or unknown options. Exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] attrcloak::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        use attrcloak::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                E::Config(_) => "config",
                E::Precondition(_) => "precondition",
                E::MissingFile { .. } => "missing-file",
                E::Io { .. } => "io",
                E::Json { .. } | E::Format { .. } => "format",
                _ => "internal",
            },
        }
    }

    /// One JSON object on one line.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Attribute names to suppress.
    pub suppress: Vec<String>,
    /// Optional fixed target class per suppressed attribute; others switch
    /// to whichever non-true class scores highest.
    pub targets: BTreeMap<String, usize>,
    /// Attribute names whose prediction must not change.
    pub preserve: Vec<String>,
    pub preserve_identity: bool,
    pub identity_weight: f64,
    pub confidence: f64,
    pub distortion_weight: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub score_space: ScoreSpace,
    pub box_epsilon: f64,
    /// Splits the attacked images are drawn from.
    pub splits: Vec<Split>,
    /// Attack at most this many candidates, in dataset order.
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let spec = AttackSpec::default();
        Self {
            suppress: Vec::new(),
            targets: BTreeMap::new(),
            preserve: Vec::new(),
            preserve_identity: false,
            identity_weight: 1.0,
            confidence: spec.confidence,
            distortion_weight: spec.distortion_weight,
            iterations: spec.iterations,
            learning_rate: spec.learning_rate,
            score_space: spec.score_space,
            box_epsilon: spec.box_epsilon,
            splits: vec![Split::Gallery, Split::Test, Split::Probe],
            max_samples: None,
            seed: spec.seed,
        }
    }
}

impl AttackConfig {
    /// Resolves names against `schema`. `tau` is the white-box match
    /// threshold, required when identity preservation is on.
    pub fn to_spec(&self, schema: &AttributeSchema, tau: Option<f64>) -> Result<AttackSpec> {
        let overlap: Vec<&String> = self.suppress.iter().filter(|n| self.preserve.contains(n)).collect();
        if !overlap.is_empty() {
            return Err(CliError::Usage(format!(
                "attributes {overlap:?} are both suppressed and preserved"
            )));
        }
        if self.suppress.is_empty() && self.preserve.is_empty() && !self.preserve_identity {
            log::warn!("attack has no constraints; every image is its own anonymization");
        }
        if let Some(name) = self.targets.keys().find(|n| !self.suppress.contains(n)) {
            return Err(CliError::Usage(format!("target class given for {name:?}, which is not suppressed")));
        }
        let resolve = |n: &String| schema.resolve(n).map_err(|e| CliError::Usage(e.to_string()));
        let mut suppress = BTreeMap::new();
        for name in &self.suppress {
            let mode = match self.targets.get(name) {
                Some(&j) => TargetMode::Class(j),
                None => TargetMode::AnyOther,
            };
            suppress.insert(resolve(name)?, mode);
        }
        let preserve = self.preserve.iter().map(resolve).collect::<Result<BTreeSet<_>>>()?;
        let identity = if self.preserve_identity {
            let threshold = tau.ok_or_else(|| {
                CliError::Usage("identity preservation needs a white-box embedder".into())
            })?;
            Some(IdentityOptions {
                weight: self.identity_weight,
                threshold,
            })
        } else {
            None
        };
        let spec = AttackSpec {
            suppress,
            preserve,
            confidence: self.confidence,
            distortion_weight: self.distortion_weight,
            identity,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            score_space: self.score_space,
            box_epsilon: self.box_epsilon,
            seed: self.seed,
        };
        spec.validate(schema)?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub histogram_bins: usize,
    /// Train identity embedders and report CMC and ROC even when the attack
    /// does not use them.
    pub identity: bool,
    pub csv: bool,
    pub svg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            histogram_bins: 10,
            identity: true,
            csv: true,
            svg: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed. When set it replaces the data, training and attack seeds
    /// with `seed`, `seed + 1`, `seed + 2` and `seed`.
    pub seed: Option<u64>,
    pub data: SyntheticSpec,
    pub attribute_training: TrainConfig,
    pub identity_training: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    /// Worker threads for attacks; 0 uses every core. Results do not depend
    /// on it.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: None,
            data: SyntheticSpec::default(),
            attribute_training: TrainConfig::default(),
            identity_training: TrainConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(attrcloak::read_json(path)?)
    }

    /// Applies the master seed; the result is what gets echoed to disk.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.data.seed = seed;
            self.attribute_training.seed = seed.wrapping_add(1);
            self.identity_training.seed = seed.wrapping_add(2);
            self.attack.seed = seed;
        }
        self
    }

    pub fn needs_identity(&self) -> bool {
        self.eval.identity || self.attack.preserve_identity
    }
}

pub fn write_resolved_config<T: Serialize>(out: &Path, config: &T) -> Result<()> {
    Ok(attrcloak::write_json(&out.join("config.resolved.json"), config)?)
}

/// Configures the global rayon pool once; later calls are ignored.
pub fn init_threads(jobs: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
}

fn stage_matches<T: Serialize>(dir: &Path, settings: &T) -> bool {
    let Ok(found) = attrcloak::read_json::<serde_json::Value>(&dir.join("stage.json")) else {
        return false;
    };
    serde_json::to_value(settings).is_ok_and(|want| want == found)
}

fn mark_stage<T: Serialize>(dir: &Path, settings: &T) -> Result<()> {
    Ok(attrcloak::write_json(&dir.join("stage.json"), settings)?)
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn model_dir(out: &Path, name: &str) -> PathBuf {
    out.join("models").join(name)
}

pub fn load_or_generate_data(spec: &SyntheticSpec, dir: &Path) -> Result<Dataset> {
    if stage_matches(dir, spec) {
        log::info!("reusing dataset in {}", dir.display());
        return Ok(Dataset::load(dir)?);
    }
    log::info!("generating {} images", spec.sample_count());
    let dataset = generate_dataset(spec)?;
    dataset.save(dir)?;
    mark_stage(dir, spec)?;
    Ok(dataset)
}

#[derive(Serialize)]
struct ModelStage<'a> {
    data: &'a SyntheticSpec,
    training: &'a TrainConfig,
    variant: Option<EmbedderVariant>,
}

pub fn load_or_train_attribute(
    dataset: &Dataset,
    config: &TrainConfig,
    dir: &Path,
) -> Result<(AttributeNet, TrainingReport)> {
    let stage = ModelStage {
        data: dataset.spec(),
        training: config,
        variant: None,
    };
    if stage_matches(dir, &stage) {
        let net = AttributeNet::load(dir)?;
        ensure_schema(net.schema(), dataset.schema(), "attribute model")?;
        let report = attrcloak::read_json(&dir.join("training.json"))?;
        return Ok((net, report));
    }
    log::info!("training attribute classifier");
    let (net, report) = train_attribute_net(dataset, config)?;
    net.save(dir)?;
    attrcloak::write_json(&dir.join("training.json"), &report)?;
    mark_stage(dir, &stage)?;
    Ok((net, report))
}

pub fn load_or_train_embedder(
    dataset: &Dataset,
    config: &TrainConfig,
    variant: EmbedderVariant,
    dir: &Path,
) -> Result<(EmbeddingNet, MatchThreshold)> {
    let stage = ModelStage {
        data: dataset.spec(),
        training: config,
        variant: Some(variant),
    };
    if stage_matches(dir, &stage) {
        let (net, schema) = EmbeddingNet::load(dir)?;
        ensure_schema(&schema, dataset.schema(), "identity model")?;
        let threshold = attrcloak::read_json(&dir.join("threshold.json"))?;
        return Ok((net, threshold));
    }
    log::info!("training {} identity embedder", variant.name());
    let net = train_embedding_net(dataset, config, variant)?;
    let threshold = calibrate_threshold(&net, dataset)?;
    net.save(dir, dataset.schema())?;
    attrcloak::write_json(&dir.join("threshold.json"), &threshold)?;
    mark_stage(dir, &stage)?;
    Ok((net, threshold))
}

/// Dataset and trained models shared by attack runs.
pub struct Prepared {
    pub dataset: Dataset,
    pub attribute: AttributeNet,
    pub training: TrainingReport,
    pub white_box: Option<(EmbeddingNet, MatchThreshold)>,
    pub held_out: Option<(EmbeddingNet, MatchThreshold)>,
}

pub fn prepare(config: &ExperimentConfig, out: &Path) -> Result<Prepared> {
    let dataset = load_or_generate_data(&config.data, &data_dir(out))?;
    let (attribute, training) =
        load_or_train_attribute(&dataset, &config.attribute_training, &model_dir(out, "attribute"))?;
    let (white_box, held_out) = if config.needs_identity() {
        let wb = EmbedderVariant::WhiteBox;
        let ho = EmbedderVariant::HeldOut;
        (
            Some(load_or_train_embedder(&dataset, &config.identity_training, wb, &model_dir(out, wb.name()))?),
            Some(load_or_train_embedder(&dataset, &config.identity_training, ho, &model_dir(out, ho.name()))?),
        )
    } else {
        (None, None)
    };
    Ok(Prepared {
        dataset,
        attribute,
        training,
        white_box,
        held_out,
    })
}

/// Attack candidates: the configured splits in dataset order, truncated to
/// `max_samples`.
pub fn attack_candidates<'a>(dataset: &'a Dataset, config: &AttackConfig) -> Vec<&'a attrcloak::data::LabeledSample> {
    let mut samples = dataset.splits(&config.splits);
    if let Some(n) = config.max_samples {
        samples.truncate(n);
    }
    samples
}

pub fn run_attacks(prepared: &Prepared, config: &AttackConfig) -> Result<(AttackSpec, BatchOutcome)> {
    let tau = prepared.white_box.as_ref().map(|(_, t)| t.tau);
    let spec = config.to_spec(prepared.dataset.schema(), tau)?;
    let candidates = attack_candidates(&prepared.dataset, config);
    let embedders = Embedders {
        white_box: prepared.white_box.as_ref().map(|(n, _)| n as _),
        held_out: prepared.held_out.as_ref().map(|(n, _)| n as _),
    };
    let outcome = batch_attack(&candidates, &spec, &prepared.attribute, embedders)?;
    Ok((spec, outcome))
}

pub fn evaluate(
    name: &str,
    prepared: &Prepared,
    spec: &AttackSpec,
    outcome: &BatchOutcome,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let mut embedders = Vec::new();
    for (label, model) in [("white-box", &prepared.white_box), ("held-out", &prepared.held_out)] {
        if let Some((net, t)) = model {
            embedders.push(EmbedderEval {
                name: label,
                model: net,
                threshold: Some(t.tau),
            });
        }
    }
    Ok(build_report(&ReportInputs {
        experiment: name,
        dataset: &prepared.dataset,
        spec,
        outcome,
        embedders,
        histogram_bins: eval.histogram_bins,
    })?)
}

pub fn formats(eval: &EvalConfig) -> ReportFormats {
    ReportFormats {
        csv: eval.csv,
        svg: eval.svg,
    }
}

/// Runs the attack stage on prepared models and writes attack results and
/// the report under `out`.
pub fn attack_and_report(prepared: &Prepared, config: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let (spec, outcome) = run_attacks(prepared, &config.attack)?;
    outcome.save(&out.join("attack"), &spec)?;
    let report = evaluate(&config.name, prepared, &spec, &outcome, &config.eval)?;
    write_report(&report, &out.join("report"), formats(&config.eval))?;
    Ok(report)
}

/// Generates or loads data and models, attacks, evaluates and reports.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let config = config.clone().resolved();
    write_resolved_config(out, &config)?;
    let prepared = prepare(&config, out)?;
    attack_and_report(&prepared, &config, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_is_a_usage_error() {
        let config = AttackConfig {
            suppress: vec!["gender".into()],
            preserve: vec!["gender".into()],
            ..AttackConfig::default()
        };
        let err = config.to_spec(&AttributeSchema::five_binary(), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_json_line().contains("\"usage\""));
    }

    #[test]
    fn names_resolve_to_indices() {
        let config = AttackConfig {
            suppress: vec!["smiling".into()],
            targets: BTreeMap::from([("smiling".into(), 0)]),
            preserve: vec!["makeup".into()],
            ..AttackConfig::default()
        };
        let schema = AttributeSchema::five_binary();
        let spec = config.to_spec(&schema, None).unwrap();
        let smiling = schema.index_of("smiling").unwrap();
        assert_eq!(spec.suppress[&smiling], TargetMode::Class(0));
        assert!(spec.preserve.contains(&schema.index_of("makeup").unwrap()));
        assert_eq!(spec.iterations, 10_000);
    }

    #[test]
    fn unknown_name_lists_choices() {
        let config = AttackConfig {
            suppress: vec!["hat".into()],
            ..AttackConfig::default()
        };
        let err = config.to_spec(&AttributeSchema::five_binary(), None).unwrap_err();
        assert!(err.to_string().contains("gender"), "{err}");
    }

    #[test]
    fn identity_needs_threshold() {
        let config = AttackConfig {
            suppress: vec!["gender".into()],
            preserve_identity: true,
            ..AttackConfig::default()
        };
        let schema = AttributeSchema::five_binary();
        assert!(config.to_spec(&schema, None).is_err());
        let spec = config.to_spec(&schema, Some(0.4)).unwrap();
        assert_eq!(spec.identity.unwrap().threshold, 0.4);
    }

    #[test]
    fn master_seed_fans_out() {
        let c = ExperimentConfig {
            seed: Some(100),
            ..ExperimentConfig::default()
        }
        .resolved();
        assert_eq!(c.data.seed, 100);
        assert_eq!(c.attribute_training.seed, 101);
        assert_eq!(c.identity_training.seed, 102);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"atack": {}}"#);
        assert!(err.is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"attack": {"iterations": 5}}"#).unwrap();
        assert_eq!(c.attack.iterations, 5);
        assert_eq!(c.data, SyntheticSpec::default());
    }
}
