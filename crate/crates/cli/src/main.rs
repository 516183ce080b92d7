use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrcloak::anonymize::{BatchOutcome, ScoreSpace};
use attrcloak::data::{Dataset, Split};
use attrcloak::nn::{ensure_schema, AttributeModel, AttributeNet, EmbedderVariant, EmbeddingNet, MatchThreshold, TrainConfig};
use attrcloak::report::{build_report, write_report, EmbedderEval, EvalReport, ReportFormats, ReportInputs};
use attrcloak_cli::{
    init_threads, load_or_generate_data, load_or_train_attribute, load_or_train_embedder, run_attacks,
    write_resolved_config, CliError, ExperimentConfig, Prepared, Result,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attrcloak", version, about = "Selective attribute anonymization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (see `seed` in the config file).
    #[arg(long, env = "ATTRCLOAK_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Training {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
}

impl Training {
    fn apply(&self, config: &mut TrainConfig) {
        if let Some(e) = self.epochs {
            config.epochs = e;
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
        if let Some(lr) = self.lr {
            config.learning_rate = lr;
        }
        if let Some(s) = self.label_smoothing {
            config.label_smoothing = s;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        images_per_subject: Option<usize>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        overlap: Option<f64>,
    },
    /// Train the attribute classifier.
    TrainAttr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        training: Training,
    },
    /// Train an identity embedder and calibrate its match threshold.
    TrainEmbed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "white-box")]
        variant: Variant,
        #[command(flatten)]
        training: Training,
    },
    /// Anonymize images against a trained classifier.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Compute evaluation metrics for attack results (writes report.json).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding attack results.json.
        #[arg(long)]
        attack: PathBuf,
        #[arg(long)]
        embedder: Option<PathBuf>,
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Render report.json as CSV tables and SVG charts.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding report.json.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        no_csv: bool,
        #[arg(long)]
        no_svg: bool,
    },
    /// Run the full pipeline from a config file.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Variant {
    WhiteBox,
    HeldOut,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Space {
    Probability,
    Logit,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    data: PathBuf,
    /// Attribute classifier directory.
    #[arg(long)]
    model: PathBuf,
    /// White-box identity embedder directory.
    #[arg(long)]
    embedder: Option<PathBuf>,
    /// Held-out identity embedder directory, for transfer metrics.
    #[arg(long)]
    held_out: Option<PathBuf>,
    /// Attributes to suppress, by name.
    #[arg(long, value_delimiter = ',')]
    suppress: Vec<String>,
    /// Fixed target class for a suppressed attribute, as `name=class`.
    #[arg(long, value_parser = parse_target)]
    target: Vec<(String, usize)>,
    /// Attributes to preserve, by name.
    #[arg(long, value_delimiter = ',')]
    preserve: Vec<String>,
    #[arg(long)]
    preserve_identity: bool,
    #[arg(long)]
    identity_weight: Option<f64>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    distortion_weight: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    score_space: Option<Space>,
    /// Splits to draw images from.
    #[arg(long, value_delimiter = ',', value_parser = parse_split)]
    split: Vec<Split>,
    #[arg(long)]
    max_samples: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_target(s: &str) -> std::result::Result<(String, usize), String> {
    let (name, class) = s.split_once('=').ok_or("expected name=class")?;
    Ok((name.to_string(), class.parse().map_err(|e| format!("bad class: {e}"))?))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if common.seed.is_some() {
        config.seed = common.seed;
    }
    Ok(config.resolved())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(dir)?)
}

fn load_embedder(dir: &Path, dataset: &Dataset) -> Result<(EmbeddingNet, MatchThreshold)> {
    let (net, schema) = EmbeddingNet::load(dir)?;
    ensure_schema(&schema, dataset.schema(), "identity model")?;
    let threshold = attrcloak::read_json(&dir.join("threshold.json"))?;
    Ok((net, threshold))
}

fn report_inputs_embedders<'a>(
    white_box: &'a Option<(EmbeddingNet, MatchThreshold)>,
    held_out: &'a Option<(EmbeddingNet, MatchThreshold)>,
) -> Vec<EmbedderEval<'a>> {
    [("white-box", white_box), ("held-out", held_out)]
        .into_iter()
        .filter_map(|(name, m)| {
            m.as_ref().map(|(net, t)| EmbedderEval {
                name,
                model: net as _,
                threshold: Some(t.tau),
            })
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            subjects,
            images_per_subject,
            amplitude,
            noise,
            overlap,
        } => {
            let mut config = base_config(&common)?;
            let d = &mut config.data;
            d.subjects = subjects.unwrap_or(d.subjects);
            d.images_per_subject = images_per_subject.unwrap_or(d.images_per_subject);
            d.amplitude = amplitude.unwrap_or(d.amplitude);
            d.noise = noise.unwrap_or(d.noise);
            d.overlap = overlap.unwrap_or(d.overlap);
            write_resolved_config(&common.out, &config)?;
            let dataset = load_or_generate_data(&config.data, &common.out)?;
            println!("wrote {} images to {}", dataset.samples().len(), common.out.display());
        }
        Command::TrainAttr { common, data, training } => {
            let mut config = base_config(&common)?;
            training.apply(&mut config.attribute_training);
            write_resolved_config(&common.out, &config)?;
            let dataset = load_dataset(&data)?;
            let (_, report) = load_or_train_attribute(&dataset, &config.attribute_training, &common.out)?;
            for a in &report.attributes {
                println!("{}: train {:.4} test {:.4}", a.name, a.train, a.test);
            }
        }
        Command::TrainEmbed {
            common,
            data,
            variant,
            training,
        } => {
            let mut config = base_config(&common)?;
            training.apply(&mut config.identity_training);
            write_resolved_config(&common.out, &config)?;
            let dataset = load_dataset(&data)?;
            let variant = match variant {
                Variant::WhiteBox => EmbedderVariant::WhiteBox,
                Variant::HeldOut => EmbedderVariant::HeldOut,
            };
            let (_, t) = load_or_train_embedder(&dataset, &config.identity_training, variant, &common.out)?;
            println!("{}: threshold {:.6} eer {:.4}", variant.name(), t.tau, t.eer);
        }
        Command::Attack { common, attack: a } => {
            let mut config = base_config(&common)?;
            let c = &mut config.attack;
            if !a.suppress.is_empty() {
                c.suppress = a.suppress.clone();
            }
            if !a.target.is_empty() {
                c.targets = a.target.iter().cloned().collect();
            }
            if !a.preserve.is_empty() {
                c.preserve = a.preserve.clone();
            }
            c.preserve_identity |= a.preserve_identity;
            c.identity_weight = a.identity_weight.unwrap_or(c.identity_weight);
            c.confidence = a.confidence.unwrap_or(c.confidence);
            c.distortion_weight = a.distortion_weight.unwrap_or(c.distortion_weight);
            c.iterations = a.iters.unwrap_or(c.iterations);
            c.learning_rate = a.lr.unwrap_or(c.learning_rate);
            if let Some(s) = a.score_space {
                c.score_space = match s {
                    Space::Probability => ScoreSpace::Probability,
                    Space::Logit => ScoreSpace::Logit,
                };
            }
            if !a.split.is_empty() {
                c.splits = a.split.clone();
            }
            if a.max_samples.is_some() {
                c.max_samples = a.max_samples;
            }
            config.jobs = a.jobs.unwrap_or(config.jobs);
            if config.attack.preserve_identity && a.embedder.is_none() {
                return Err(CliError::Usage("--preserve-identity needs --embedder".into()));
            }
            write_resolved_config(&common.out, &config)?;
            init_threads(config.jobs);

            let dataset = load_dataset(&a.data)?;
            let attribute = AttributeNet::load(&a.model)?;
            ensure_schema(attribute.schema(), dataset.schema(), "attribute model")?;
            let white_box = a.embedder.as_deref().map(|d| load_embedder(d, &dataset)).transpose()?;
            let held_out = a.held_out.as_deref().map(|d| load_embedder(d, &dataset)).transpose()?;
            let training = attrcloak::read_json(&a.model.join("training.json")).unwrap_or_else(|_| {
                attrcloak::nn::TrainingReport {
                    final_loss: f64::NAN,
                    train_samples: 0,
                    test_samples: 0,
                    attributes: Vec::new(),
                }
            });
            let prepared = Prepared {
                dataset,
                attribute,
                training,
                white_box,
                held_out,
            };
            let (spec, outcome) = run_attacks(&prepared, &config.attack)?;
            outcome.save(&common.out, &spec)?;
            let s = &outcome.summary;
            println!(
                "attacked {} of {} candidates: success rate {:.4}",
                s.eligible, s.candidates, s.success_rate
            );
        }
        Command::Eval {
            common,
            data,
            attack,
            embedder,
            held_out,
            bins,
        } => {
            let mut config = base_config(&common)?;
            config.eval.histogram_bins = bins.unwrap_or(config.eval.histogram_bins);
            write_resolved_config(&common.out, &config)?;
            let dataset = load_dataset(&data)?;
            let (outcome, spec) = BatchOutcome::load(&attack)?;
            let white_box = embedder.as_deref().map(|d| load_embedder(d, &dataset)).transpose()?;
            let held_out = held_out.as_deref().map(|d| load_embedder(d, &dataset)).transpose()?;
            let report = build_report(&ReportInputs {
                experiment: &config.name,
                dataset: &dataset,
                spec: &spec,
                outcome: &outcome,
                embedders: report_inputs_embedders(&white_box, &held_out),
                histogram_bins: config.eval.histogram_bins,
            })?;
            write_report(&report, &common.out, ReportFormats { csv: false, svg: false })?;
            println!("wrote {}", common.out.join("report.json").display());
        }
        Command::Report {
            common,
            from,
            no_csv,
            no_svg,
        } => {
            let mut config = base_config(&common)?;
            config.eval.csv &= !no_csv;
            config.eval.svg &= !no_svg;
            write_resolved_config(&common.out, &config)?;
            let report: EvalReport = attrcloak::read_json(&from.join("report.json"))?;
            let files = write_report(&report, &common.out, attrcloak_cli::formats(&config.eval))?;
            println!("wrote {} files to {}", files.len(), common.out.display());
        }
        Command::RunExperiment { common, iters, jobs } => {
            if common.config.is_none() {
                return Err(CliError::Usage("run-experiment needs --config".into()));
            }
            let mut config = base_config(&common)?;
            config.attack.iterations = iters.unwrap_or(config.attack.iterations);
            config.jobs = jobs.unwrap_or(config.jobs);
            init_threads(config.jobs);
            let report = attrcloak_cli::run_experiment(&config, &common.out)?;
            let s = &report.summary;
            println!(
                "{}: attacked {} of {} candidates, success rate {:.4}",
                report.experiment, s.eligible, s.candidates, s.success_rate
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
