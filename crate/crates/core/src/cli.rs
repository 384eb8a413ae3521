//! Command-line entry point.
//!
//! Every subcommand reads an optional TOML config (`--config`), applies
//! `--set section.key=value` overrides and dedicated flags on top, and
//! writes the merged config with its digest next to whatever it produces.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::annotate::endpoint::{build_text_request, ChatEndpoint, HttpEndpoint};
use crate::annotate::{
    annotate_dataset, endpoint_class_logits, image_refs, oracle_annotate, oracle_class_logits, AnnotationStore,
    EndpointConfig, OracleSettings, OracleSpec,
};
use crate::aspects::{
    build_generation_prompt, build_selection_prompt, parse_question_list, sha256_hex, OfflineGenerator, Provenance,
    QuestionSet,
};
use crate::data::{generate_synthetic, Dataset, Split, SyntheticConfig};
use crate::evalreport::{
    accuracy, compare_model_vs_store, export_aspect_logits, run_plan, write_export, Axis, Benchmark, CellSpec,
    ExperimentPlan,
};
use crate::model::{Activation, Model, ModelConfig};
use crate::train::{scaled_milestones, train, train_with_kd, train_with_random_targets, TargetSource, TrainConfig};

type BoxError = Box<dyn std::error::Error + Send + Sync>;
type CliResult<T> = std::result::Result<T, BoxError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Deterministic templates built from the class names.
    #[default]
    Offline,
    Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuestionsSection {
    pub generator: Generator,
    pub candidates: usize,
    pub select: usize,
}

impl Default for QuestionsSection {
    fn default() -> Self {
        Self {
            generator: Generator::Offline,
            candidates: 100,
            select: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128, 64],
            activation: Activation::Relu,
        }
    }
}

/// Oracle teacher used when `train.kd.teacher = "oracle"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSection {
    pub scale: f64,
    pub noise_sd: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let b = Benchmark::default();
        Self {
            scale: b.teacher_scale,
            noise_sd: b.teacher_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanSection {
    /// `name=v1,v2,...` per swept axis.
    pub axes: Vec<String>,
    pub seeds: Vec<u64>,
    pub baselines: bool,
    pub defaults: CellSpec,
}

impl Default for PlanSection {
    fn default() -> Self {
        let p = ExperimentPlan::default();
        Self {
            axes: Vec::new(),
            seeds: p.seeds,
            baselines: p.baselines,
            defaults: p.defaults,
        }
    }
}

/// Merged configuration for every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub questions: QuestionsSection,
    pub endpoint: EndpointConfig,
    pub oracle: OracleSettings,
    pub teacher: TeacherSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub plan: PlanSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            synthetic: SyntheticConfig::default(),
            questions: QuestionsSection::default(),
            endpoint: EndpointConfig::default(),
            oracle: OracleSettings::default(),
            teacher: TeacherSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::with_epochs(60),
            plan: PlanSection::default(),
        }
    }
}

impl Config {
    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    pub fn to_toml(&self) -> String {
        format!(
            "# digest {}\n{}",
            self.digest(),
            toml::to_string(self).expect("config serialises")
        )
    }

    fn benchmark(&self) -> Benchmark {
        Benchmark {
            synthetic: self.synthetic.clone(),
            oracle: self.oracle.clone(),
            candidates: self.questions.candidates,
            hidden_dims: self.model.hidden_dims.clone(),
            teacher_scale: self.teacher.scale,
            teacher_noise: self.teacher.noise_sd,
        }
    }

    fn plan(&self, output_dir: Option<PathBuf>) -> CliResult<ExperimentPlan> {
        let axes = self
            .plan
            .axes
            .iter()
            .map(|a| a.parse::<Axis>())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ExperimentPlan {
            benchmark: self.benchmark(),
            train: self.train.clone(),
            defaults: self.plan.defaults.clone(),
            axes,
            seeds: self.plan.seeds.clone(),
            baselines: self.plan.baselines,
            output_dir,
        })
    }
}

/// Parses `key=value`; the value is read as a TOML value when it parses as
/// one and as a bare string otherwise.
fn parse_override(raw: &str) -> CliResult<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| format!("override '{raw}' is not key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(format!("override key '{key}' has an empty segment").into());
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> CliResult<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| format!("'{p}' is not a section"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file; sections as in `Config`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.alpha=0.5`. Repeatable;
    /// applied after the file, before dedicated flags.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for data generation, oracle noise, initialisation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl Common {
    /// File, then `--set`, then `extra` (dedicated flags), then `--seed`.
    pub fn load(&self, extra: &[(Vec<String>, toml::Value)]) -> CliResult<Config> {
        let mut table = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => toml::Table::new(),
        };
        for raw in &self.overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut table, &path, value)?;
        }
        for (path, value) in extra {
            set_path(&mut table, path, value.clone())?;
        }
        if let Some(seed) = self.seed {
            set_path(&mut table, &["seed".into()], toml::Value::Integer(seed as i64))?;
        }
        let mut config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| format!("config: {e}"))?;
        config.synthetic.seed = config.seed;
        config.train.seed = config.seed;
        config.train.validate()?;
        Ok(config)
    }
}

fn key(path: &str) -> Vec<String> {
    path.split('.').map(str::to_string).collect()
}

fn epochs_override(epochs: Option<usize>) -> Vec<(Vec<String>, toml::Value)> {
    epochs
        .map(|e| {
            let ms = scaled_milestones(e)
                .into_iter()
                .map(|m| toml::Value::Integer(m as i64))
                .collect();
            vec![
                (key("train.epochs"), toml::Value::Integer(e as i64)),
                (key("train.lr_milestones"), toml::Value::Array(ms)),
            ]
        })
        .unwrap_or_default()
}

#[derive(Debug, Parser)]
#[command(name = "makd", version, about = "Multi-aspect knowledge distillation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark into a dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate candidate aspect questions for a dataset's classes.
    GenQuestions {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of candidates (questions.candidates).
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Select the top questions from a candidate set.
    Select {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number to keep (questions.select).
        #[arg(long)]
        q: Option<usize>,
    },
    /// Answer every (image, question) pair with the configured endpoint.
    Annotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Root for relative image paths in the manifest.
        #[arg(long)]
        images: PathBuf,
    },
    /// Answer every pair with the synthetic oracle; needs latent attributes.
    OracleAnnotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Train one model and write its checkpoint and epoch table.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Aspect targets; required when train.alpha > 0 with oracle or endpoint targets.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Image root, for an endpoint KD teacher.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Aspect loss weight (train.alpha).
        #[arg(long)]
        alpha: Option<f64>,
        /// Epochs; milestones are rescaled proportionally.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Report accuracy, and aspect fidelity when a store is given.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Run an experiment grid on the synthetic benchmark.
    Ablate {
        /// Swept axis as name=v1,v2,... (alpha, q, fraction, loss, targets, kd). Repeatable.
        #[arg(long)]
        axis: Vec<String>,
        /// Comma-separated replicate seeds (plan.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Epochs; milestones are rescaled proportionally.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-image aspect probabilities beside the stored targets.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Writes `config.toml` into `dir`.
fn write_config_dir(dir: &Path, config: &Config) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(())
}

/// Writes `<file>.config.toml` beside `file`.
fn write_config_beside(file: &Path, config: &Config) -> CliResult<()> {
    let mut name = file.file_name().ok_or("output path has no file name")?.to_os_string();
    name.push(".config.toml");
    ensure_parent(file)?;
    std::fs::write(file.with_file_name(name), config.to_toml())?;
    Ok(())
}

fn ensure_parent(file: &Path) -> CliResult<()> {
    if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn http_endpoint(config: &EndpointConfig) -> CliResult<HttpEndpoint> {
    Ok(HttpEndpoint::new(
        &config.base_url,
        config.api_key_env.as_deref(),
        Duration::from_secs(config.timeout_secs),
    )?)
}

fn ask_text(
    endpoint: &dyn ChatEndpoint,
    config: &EndpointConfig,
    system: Option<&str>,
    user: &str,
) -> CliResult<String> {
    let request = build_text_request(&config.model, system, user);
    let response = endpoint.complete(&request)?;
    Ok(response.text().ok_or("endpoint returned no text")?.to_string())
}

fn gen_questions(config: &Config, dataset: &Dataset) -> CliResult<QuestionSet> {
    let m = &dataset.manifest;
    let n = config.questions.candidates;
    match config.questions.generator {
        Generator::Offline => Ok(OfflineGenerator.generate(&m.dataset_id, &m.class_names, m.num_images(), n)?),
        Generator::Endpoint => {
            let prompt = build_generation_prompt(&m.class_names, m.num_images(), n)?;
            let endpoint = http_endpoint(&config.endpoint)?;
            let raw = ask_text(&endpoint, &config.endpoint, Some(&prompt.system), &prompt.instruction)?;
            let provenance = Provenance::new(
                config.endpoint.model.clone(),
                &format!("{}\n{}", prompt.system, prompt.instruction),
            );
            let questions = parse_question_list(&raw)?
                .into_iter()
                .map(|mut q| {
                    q.provenance = provenance.clone();
                    q
                })
                .collect();
            Ok(QuestionSet::new(&m.dataset_id, m.class_names.clone(), questions)?)
        }
    }
}

fn select_questions(config: &Config, set: &QuestionSet) -> CliResult<QuestionSet> {
    let q = config.questions.select;
    match config.questions.generator {
        Generator::Offline => Ok(OfflineGenerator.select(set, q)?),
        Generator::Endpoint => {
            let prompt = build_selection_prompt(&set.all_questions, q)?;
            let endpoint = http_endpoint(&config.endpoint)?;
            let raw = ask_text(&endpoint, &config.endpoint, None, &prompt)?;
            Ok(set.apply_selection(&raw, q)?)
        }
    }
}

fn load_store(path: &Path, dataset: &Dataset) -> CliResult<AnnotationStore> {
    let store = AnnotationStore::load(path)?;
    if store.dataset_id != dataset.manifest.dataset_id {
        return Err(format!(
            "store {} belongs to dataset '{}', not '{}'",
            path.display(),
            store.dataset_id,
            dataset.manifest.dataset_id
        )
        .into());
    }
    store.ensure_complete()?;
    Ok(store)
}

fn run_train(config: &Config, data: &Path, store: Option<&Path>, images: Option<&Path>, out: &Path) -> CliResult<()> {
    let dataset = Dataset::load(data)?;
    let tc = &config.train;
    let store = store.map(|p| load_store(p, &dataset)).transpose()?;
    let q = match (tc.aspect_target_source, &store) {
        (TargetSource::Random, _) => config.questions.select,
        (_, Some(s)) => s.num_questions(),
        (_, None) if tc.alpha > 0.0 => {
            return Err("train.alpha > 0 needs --store (or train.aspect_target_source = \"random\")".into())
        }
        (_, None) => 0,
    };
    let model = Model::build(ModelConfig {
        hidden_dims: config.model.hidden_dims.clone(),
        activation: config.model.activation,
        ..ModelConfig::new(dataset.feature_dim(), dataset.num_classes(), q, config.seed)
    })?;
    let (model, record) = match (tc.kd, tc.aspect_target_source) {
        (Some(kd), source) => {
            let teacher = match kd.teacher {
                TargetSource::Oracle => oracle_class_logits(
                    &dataset.manifest,
                    config.teacher.scale,
                    config.teacher.noise_sd,
                    config.seed,
                )?,
                TargetSource::Endpoint => {
                    let root = images.ok_or("an endpoint teacher needs --images")?;
                    let refs = image_refs(&dataset.manifest, root);
                    let endpoint = http_endpoint(&config.endpoint)?;
                    endpoint_class_logits(&dataset.manifest, &refs, &endpoint, &config.endpoint)?
                }
                TargetSource::Random => return Err("train.kd.teacher cannot be \"random\"".into()),
            };
            if source == TargetSource::Random {
                return Err("random aspect targets cannot be combined with kd".into());
            }
            train_with_kd(model, &dataset, &teacher, store.as_ref(), tc)?
        }
        (None, TargetSource::Random) => train_with_random_targets(model, &dataset, tc)?,
        (None, _) => train(model, &dataset, store.as_ref(), tc)?,
    };
    std::fs::create_dir_all(out)?;
    model.save(&out.join("model.ckpt"))?;
    std::fs::write(out.join("epochs.tsv"), record.to_tsv())?;
    write_config_dir(out, config)?;
    println!(
        "test accuracy {:.2}% after {} epochs; wrote {}",
        record.final_accuracy().unwrap_or(f64::NAN),
        record.epochs.len(),
        out.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { out } => {
            let config = common.load(&[])?;
            let (dataset, _) = generate_synthetic(&config.synthetic)?;
            dataset.save(out)?;
            write_config_dir(out, &config)?;
            println!(
                "wrote {} images of {} classes to {}",
                dataset.manifest.num_images(),
                dataset.num_classes(),
                out.display()
            );
        }
        Command::GenQuestions { data, out, candidates } => {
            let extra: Vec<_> = candidates
                .map(|n| (key("questions.candidates"), toml::Value::Integer(n as i64)))
                .into_iter()
                .collect();
            let config = common.load(&extra)?;
            let dataset = Dataset::load(data)?;
            let set = gen_questions(&config, &dataset)?;
            ensure_parent(out)?;
            set.save(out)?;
            write_config_beside(out, &config)?;
            println!(
                "wrote {} candidate questions to {}",
                set.all_questions.len(),
                out.display()
            );
        }
        Command::Select { questions, out, q } => {
            let extra: Vec<_> = q
                .map(|n| (key("questions.select"), toml::Value::Integer(n as i64)))
                .into_iter()
                .collect();
            let config = common.load(&extra)?;
            let set = QuestionSet::load(questions)?;
            let selected = select_questions(&config, &set)?;
            ensure_parent(out)?;
            selected.save(out)?;
            write_config_beside(out, &config)?;
            println!("selected {} questions into {}", selected.num_selected(), out.display());
        }
        Command::Annotate {
            data,
            questions,
            store,
            images,
        } => {
            let config = common.load(&[])?;
            let dataset = Dataset::load(data)?;
            let set = QuestionSet::load(questions)?;
            let endpoint = http_endpoint(&config.endpoint)?;
            let refs = image_refs(&dataset.manifest, images);
            let result = annotate_dataset(&dataset.manifest, &refs, &set, &endpoint, &config.endpoint, store)?;
            write_config_beside(store, &config)?;
            println!("store complete: {} pairs in {}", result.num_complete(), store.display());
        }
        Command::OracleAnnotate { data, questions, store } => {
            let config = common.load(&[])?;
            let dataset = Dataset::load(data)?;
            let set = QuestionSet::load(questions)?;
            let names = dataset.manifest.attribute_names.clone().unwrap_or_default();
            let spec = OracleSpec::for_questions(&set, &names, &config.oracle, config.seed);
            let result = oracle_annotate(&dataset.manifest, &set, &spec)?;
            ensure_parent(store)?;
            result.save(store)?;
            write_config_beside(store, &config)?;
            println!("wrote {} oracle pairs to {}", result.num_complete(), store.display());
        }
        Command::Train {
            data,
            store,
            images,
            out,
            alpha,
            epochs,
        } => {
            let mut extra = epochs_override(*epochs);
            if let Some(a) = alpha {
                extra.push((key("train.alpha"), toml::Value::Float(*a)));
            }
            let config = common.load(&extra)?;
            run_train(&config, data, store.as_deref(), images.as_deref(), out)?;
        }
        Command::Eval {
            data,
            checkpoint,
            store,
            split,
        } => {
            let dataset = Dataset::load(data)?;
            let model = Model::load(checkpoint)?;
            let view = dataset.view((*split).into())?;
            println!("metric\tvalue");
            println!("accuracy\t{}", accuracy(&model, &view)?);
            if let Some(path) = store {
                let store = load_store(path, &dataset)?;
                let fid = compare_model_vs_store(&model, &store, &dataset, (*split).into())?;
                println!("aspect_mad\t{}", fid.overall);
                for (qid, v) in store.question_ids.iter().zip(&fid.per_question) {
                    println!("aspect_mad_q{qid}\t{v}");
                }
            }
        }
        Command::Ablate {
            axis,
            seeds,
            epochs,
            out,
        } => {
            let mut extra = epochs_override(*epochs);
            if !axis.is_empty() {
                let axes = axis.iter().map(|a| toml::Value::String(a.clone())).collect();
                extra.push((key("plan.axes"), toml::Value::Array(axes)));
            }
            if let Some(s) = seeds {
                let s = s.iter().map(|&v| toml::Value::Integer(v as i64)).collect();
                extra.push((key("plan.seeds"), toml::Value::Array(s)));
            }
            let config = common.load(&extra)?;
            let plan = config.plan(Some(out.clone()))?;
            let report = run_plan(&plan)?;
            write_config_dir(out, &config)?;
            print!("{}", crate::evalreport::summary_tsv(&report));
            let failed = report.failures();
            if failed > 0 {
                eprintln!(
                    "{failed} of {} runs failed; see {}",
                    report.runs.len(),
                    out.join("runs.tsv").display()
                );
                return Ok(1);
            }
        }
        Command::Export {
            data,
            checkpoint,
            store,
            out,
            split,
        } => {
            let config = common.load(&[])?;
            let dataset = Dataset::load(data)?;
            let model = Model::load(checkpoint)?;
            let store = load_store(store, &dataset)?;
            let rows = export_aspect_logits(&model, &store, &dataset, (*split).into())?;
            ensure_parent(out)?;
            std::fs::write(out, write_export(&rows)?)?;
            write_config_beside(out, &config)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(0)
}

/// Parses `args` and runs one subcommand. Usage errors exit with status 2,
/// runtime errors with 1.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
