//! Command implementations behind the `debias-cl` binary: configuration
//! files, presets and ablation overlays, run directories, and the pivoted
//! comparison table. Lives in the library so every piece is unit-testable;
//! the binary itself only parses argv and maps errors to exit codes.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::encoder::{self, Activation, CheckpointError, EncoderConfig};
use crate::engine::{self, EngineError, Protocol, RunConfig, TrainConfig};
use crate::losses::{BiasModel, DistillKind, LossConfig};
use crate::retrieval::{self, RetrievalConfig, RetrievalRow};
use crate::stats::{self, StatsError};
use crate::suite;
use crate::synth::{self, DatasetFileError, GenConfig, SynthError};

// ─── errors and exit codes ───────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<u32>, message: String },
    #[error("i/o error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("file format error: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// Stable exit codes: 2 config, 3 i/o or file format, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Io { .. } | CliError::Format(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

fn config_err(line: impl Into<Option<u32>>, message: impl Into<String>) -> CliError {
    CliError::Config {
        line: line.into(),
        message: message.into(),
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

impl From<DatasetFileError> for CliError {
    fn from(e: DatasetFileError) -> Self {
        match e {
            DatasetFileError::Io(source) => CliError::Io {
                context: "dataset file".into(),
                source,
            },
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(source) => CliError::Io {
                context: "checkpoint file".into(),
                source,
            },
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        config_err(None, e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::BadProtocol(_)
            | EngineError::BadTrainConfig(_)
            | EngineError::DimensionMismatch { .. }
            | EngineError::EmptyStep { .. } => config_err(None, e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Io(source) => CliError::Io {
                context: "report output".into(),
                source,
            },
            StatsError::Engine(inner) => (*inner).into(),
            other => config_err(None, other.to_string()),
        }
    }
}

impl From<crate::retrieval::RetrievalError> for CliError {
    fn from(e: crate::retrieval::RetrievalError) -> Self {
        use crate::retrieval::RetrievalError as R;
        match e {
            R::BadConfig(_) | R::EmptyRange(_, _) => config_err(None, e.to_string()),
            R::Io(source) => CliError::Io {
                context: "evaluation output".into(),
                source,
            },
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<crate::encoder::EncoderError> for CliError {
    fn from(e: crate::encoder::EncoderError) -> Self {
        match e {
            crate::encoder::EncoderError::BadConfig(_) => config_err(None, e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

// ─── presets and ablation overlays ───────────────────────────────────────────

/// Scale preset: `paper` keeps the published hyperparameters, `desk` shrinks
/// epochs and the candidate-set size so full experiments finish in minutes on
/// one CPU core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Preset, CliError> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(config_err(
                None,
                format!("unknown preset `{other}` (known: paper, desk)"),
            )),
        }
    }
}

/// Method overlays named after the ablation rows: each one pins the loss
/// composition, the rehearsal fraction, and whether training is incremental.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Plain contrastive training, no forgetting mitigation at all.
    WoCl,
    /// Non-incremental control: retrains on everything seen so far.
    Exp1NonCl,
    /// Plain contrastive + squared-distance feature distillation.
    Exp2Baseline,
    /// De-biased contrastive (response-accuracy weights) + squared-distance distillation.
    Exp3DclL2,
    /// De-biased contrastive (activation weights) + angular distillation.
    Exp4DclBaAfm,
    /// Full method plus a 10% rehearsal buffer (which replaces distillation).
    Exp5Rehearsal,
    /// Full method: de-biased contrastive (response-accuracy weights) + angular distillation.
    Exp6Ours,
}

pub const ABLATIONS: [Ablation; 7] = [
    Ablation::WoCl,
    Ablation::Exp1NonCl,
    Ablation::Exp2Baseline,
    Ablation::Exp3DclL2,
    Ablation::Exp4DclBaAfm,
    Ablation::Exp5Rehearsal,
    Ablation::Exp6Ours,
];

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::WoCl => "wo_cl",
            Ablation::Exp1NonCl => "exp1_noncl",
            Ablation::Exp2Baseline => "exp2_baseline",
            Ablation::Exp3DclL2 => "exp3_dcl_l2",
            Ablation::Exp4DclBaAfm => "exp4_dcl_ba_afm",
            Ablation::Exp5Rehearsal => "exp5_rehearsal",
            Ablation::Exp6Ours => "exp6_ours",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation, CliError> {
        ABLATIONS
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = ABLATIONS.iter().map(|a| a.name()).collect();
                config_err(
                    None,
                    format!("unknown ablation `{s}` (known: {})", known.join(", ")),
                )
            })
    }

    /// (bias model, distillation, rehearsal fraction, joint training)
    fn overlay(self) -> (BiasModel, DistillKind, f64, bool) {
        match self {
            Ablation::WoCl => (BiasModel::None, DistillKind::None, 0.0, false),
            Ablation::Exp1NonCl => (BiasModel::None, DistillKind::None, 0.0, true),
            Ablation::Exp2Baseline => (BiasModel::None, DistillKind::L2, 0.0, false),
            Ablation::Exp3DclL2 => (BiasModel::ResponseAccuracy, DistillKind::L2, 0.0, false),
            Ablation::Exp4DclBaAfm => (BiasModel::BrainActivation, DistillKind::Afm, 0.0, false),
            Ablation::Exp5Rehearsal => (BiasModel::ResponseAccuracy, DistillKind::Afm, 0.1, false),
            Ablation::Exp6Ours => (BiasModel::ResponseAccuracy, DistillKind::Afm, 0.0, false),
        }
    }
}

// ─── resolved run specification ──────────────────────────────────────────────

/// A fully resolved experiment: every knob explicit, nothing left to
/// defaults. This is what gets echoed into the run directory.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub name: String,
    pub preset: Preset,
    pub ablation: Option<Ablation>,
    /// Session-block size for the per-window analysis.
    pub window: u32,
    pub data: GenConfig,
    pub protocol: Protocol,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub retrieval: RetrievalConfig,
}

impl RunSpec {
    /// Defaults plus the preset's scale deltas.
    pub fn new(preset: Preset) -> RunSpec {
        let mut spec = RunSpec {
            name: "run".into(),
            preset,
            ablation: None,
            window: 5,
            data: GenConfig::default(),
            protocol: Protocol::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            retrieval: RetrievalConfig::default(),
        };
        if preset == Preset::Desk {
            spec.train.epochs = 15;
            spec.train.lr0 = 5e-3;
            spec.retrieval.n_way = 50;
        }
        spec
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        let (bias, distill, rehearsal, joint) = ablation.overlay();
        self.loss.bias = bias;
        self.loss.distill = distill;
        self.train.rehearsal_fraction = rehearsal;
        self.protocol.joint = joint;
        self.ablation = Some(ablation);
    }

    /// Apply a key=value config file on top of the current values.
    pub fn apply_ini(&mut self, text: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = (i + 1) as u32;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(line_no, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(config_err(
                        line_no,
                        format!("unknown section `[{name}]` (known: {})", SECTIONS.join(", ")),
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_err(line_no, format!("expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let section = section.as_deref().ok_or_else(|| {
                config_err(line_no, format!("key `{key}` appears before any [section]"))
            })?;
            self.set(section, key, value, line_no)?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: u32) -> Result<(), CliError> {
        match (section, key) {
            ("run", "name") => self.name = value.to_string(),
            ("run", "window") => self.window = pv(key, value, line)?,
            ("data", "n_sessions") => self.data.n_sessions = pv(key, value, line)?,
            ("data", "samples_per_session") => {
                self.data.samples_per_session = pv(key, value, line)?
            }
            ("data", "input_dim") => self.data.input_dim = pv(key, value, line)?,
            ("data", "embed_dim") => self.data.embed_dim = pv(key, value, line)?,
            ("data", "r_max") => self.data.r_max = pv(key, value, line)?,
            ("data", "r_min") => self.data.r_min = pv(key, value, line)?,
            ("data", "gain_floor") => self.data.gain_floor = pv(key, value, line)?,
            ("data", "noise_base") => self.data.noise_base = pv(key, value, line)?,
            ("data", "noise_growth") => self.data.noise_growth = pv(key, value, line)?,
            ("data", "map_drift") => self.data.map_drift = pv(key, value, line)?,
            ("data", "test_fraction") => self.data.test_fraction = pv(key, value, line)?,
            ("data", "seed") => self.data.seed = pv(key, value, line)?,
            ("protocol", "n_init") => self.protocol.n_init = pv(key, value, line)?,
            ("protocol", "n_step") => self.protocol.n_step = pv(key, value, line)?,
            ("protocol", "joint") => self.protocol.joint = pv(key, value, line)?,
            ("train", "lr0") => self.train.lr0 = pv(key, value, line)?,
            ("train", "epochs") => self.train.epochs = pv(key, value, line)?,
            ("train", "batch_size") => self.train.batch_size = pv(key, value, line)?,
            ("train", "rehearsal_fraction") => {
                self.train.rehearsal_fraction = pv(key, value, line)?
            }
            ("train", "run_seed") => self.train.run_seed = pv(key, value, line)?,
            ("loss", "temperature") => self.loss.temperature = pv(key, value, line)?,
            ("loss", "lambda_cl") => self.loss.lambda_cl = pv(key, value, line)?,
            ("loss", "bias") => {
                self.loss.bias = match value {
                    "none" => BiasModel::None,
                    "response_accuracy" => BiasModel::ResponseAccuracy,
                    "brain_activation" => BiasModel::BrainActivation,
                    other => {
                        return Err(config_err(
                            line,
                            format!(
                                "key `bias` expects none | response_accuracy | brain_activation, got `{other}`"
                            ),
                        ))
                    }
                }
            }
            ("loss", "distill") => {
                self.loss.distill = match value {
                    "none" => DistillKind::None,
                    "l2" => DistillKind::L2,
                    "afm" => DistillKind::Afm,
                    other => {
                        return Err(config_err(
                            line,
                            format!("key `distill` expects none | l2 | afm, got `{other}`"),
                        ))
                    }
                }
            }
            ("loss", "symmetric_contrastive") => {
                self.loss.symmetric_contrastive = pv(key, value, line)?
            }
            ("encoder", "input_dim") => self.encoder.input_dim = pv(key, value, line)?,
            ("encoder", "hidden_dim") => self.encoder.hidden_dim = pv(key, value, line)?,
            ("encoder", "tap_count") => self.encoder.tap_count = pv(key, value, line)?,
            ("encoder", "output_dim") => self.encoder.output_dim = pv(key, value, line)?,
            ("encoder", "activation") => {
                self.encoder.activation = match value {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    other => {
                        return Err(config_err(
                            line,
                            format!("key `activation` expects tanh | relu, got `{other}`"),
                        ))
                    }
                }
            }
            ("encoder", "init_seed") => self.encoder.init_seed = pv(key, value, line)?,
            ("retrieval", "n_way") => self.retrieval.n_way = pv(key, value, line)?,
            ("retrieval", "trials") => self.retrieval.trials = pv(key, value, line)?,
            ("retrieval", "seed") => self.retrieval.seed = pv(key, value, line)?,
            (section, key) => {
                return Err(config_err(
                    line,
                    format!("unknown key `{key}` in [{section}]"),
                ))
            }
        }
        Ok(())
    }

    /// Cross-field validation beyond what each module enforces on use.
    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.train.validate().map_err(CliError::from)?;
        if self.encoder.input_dim as u32 != self.data.input_dim
            || self.encoder.output_dim as u32 != self.data.embed_dim
        {
            return Err(config_err(
                None,
                format!(
                    "encoder dims ({} → {}) do not match data dims ({} → {})",
                    self.encoder.input_dim,
                    self.encoder.output_dim,
                    self.data.input_dim,
                    self.data.embed_dim
                ),
            ));
        }
        engine::plan_steps(self.protocol, self.data.n_sessions).map_err(CliError::from)?;
        if self.retrieval.n_way < 2 || self.retrieval.trials == 0 {
            return Err(config_err(
                None,
                "retrieval needs n_way ≥ 2 and trials ≥ 1",
            ));
        }
        if self.window == 0 || self.data.n_sessions % self.window != 0 {
            return Err(config_err(
                None,
                format!(
                    "window {} does not evenly divide {} sessions",
                    self.window, self.data.n_sessions
                ),
            ));
        }
        Ok(())
    }

    /// Echo every resolved value as a config file that reproduces this run.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fully resolved run configuration");
        let _ = writeln!(s, "# preset = {}", self.preset.name());
        let _ = writeln!(
            s,
            "# ablation = {}",
            self.ablation.map_or("none", |a| a.name())
        );
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "n_sessions = {}", self.data.n_sessions);
        let _ = writeln!(s, "samples_per_session = {}", self.data.samples_per_session);
        let _ = writeln!(s, "input_dim = {}", self.data.input_dim);
        let _ = writeln!(s, "embed_dim = {}", self.data.embed_dim);
        let _ = writeln!(s, "r_max = {:?}", self.data.r_max);
        let _ = writeln!(s, "r_min = {:?}", self.data.r_min);
        let _ = writeln!(s, "gain_floor = {:?}", self.data.gain_floor);
        let _ = writeln!(s, "noise_base = {:?}", self.data.noise_base);
        let _ = writeln!(s, "noise_growth = {:?}", self.data.noise_growth);
        let _ = writeln!(s, "map_drift = {:?}", self.data.map_drift);
        let _ = writeln!(s, "test_fraction = {:?}", self.data.test_fraction);
        let _ = writeln!(s, "seed = {}", self.data.seed);
        let _ = writeln!(s, "\n[protocol]");
        let _ = writeln!(s, "n_init = {}", self.protocol.n_init);
        let _ = writeln!(s, "n_step = {}", self.protocol.n_step);
        let _ = writeln!(s, "joint = {}", self.protocol.joint);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "lr0 = {:?}", self.train.lr0);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "rehearsal_fraction = {:?}", self.train.rehearsal_fraction);
        let _ = writeln!(s, "run_seed = {}", self.train.run_seed);
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(s, "temperature = {:?}", self.loss.temperature);
        let _ = writeln!(s, "lambda_cl = {:?}", self.loss.lambda_cl);
        let _ = writeln!(
            s,
            "bias = {}",
            match self.loss.bias {
                BiasModel::None => "none",
                BiasModel::ResponseAccuracy => "response_accuracy",
                BiasModel::BrainActivation => "brain_activation",
            }
        );
        let _ = writeln!(
            s,
            "distill = {}",
            match self.loss.distill {
                DistillKind::None => "none",
                DistillKind::L2 => "l2",
                DistillKind::Afm => "afm",
            }
        );
        let _ = writeln!(
            s,
            "symmetric_contrastive = {}",
            self.loss.symmetric_contrastive
        );
        let _ = writeln!(s, "\n[encoder]");
        let _ = writeln!(s, "input_dim = {}", self.encoder.input_dim);
        let _ = writeln!(s, "hidden_dim = {}", self.encoder.hidden_dim);
        let _ = writeln!(s, "tap_count = {}", self.encoder.tap_count);
        let _ = writeln!(s, "output_dim = {}", self.encoder.output_dim);
        let _ = writeln!(
            s,
            "activation = {}",
            match self.encoder.activation {
                Activation::Tanh => "tanh",
                Activation::Relu => "relu",
            }
        );
        let _ = writeln!(s, "init_seed = {}", self.encoder.init_seed);
        let _ = writeln!(s, "\n[retrieval]");
        let _ = writeln!(s, "n_way = {}", self.retrieval.n_way);
        let _ = writeln!(s, "trials = {}", self.retrieval.trials);
        let _ = writeln!(s, "seed = {}", self.retrieval.seed);
        s
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            protocol: self.protocol,
            train: self.train,
            loss: self.loss.clone(),
            encoder: self.encoder.clone(),
            retrieval: self.retrieval,
        }
    }
}

const SECTIONS: [&str; 7] = [
    "run",
    "data",
    "protocol",
    "train",
    "loss",
    "encoder",
    "retrieval",
];

fn strip_comment(line: &str) -> &str {
    for (i, ch) in line.char_indices() {
        if (ch == '#' || ch == ';')
            && (i == 0 || line[..i].ends_with(char::is_whitespace))
        {
            return &line[..i];
        }
    }
    line
}

fn pv<T: std::str::FromStr>(key: &str, value: &str, line: u32) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| {
        config_err(
            line,
            format!("key `{key}`: cannot parse `{value}` ({e})"),
        )
    })
}

// ─── shared command plumbing ─────────────────────────────────────────────────

/// Global flags common to every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
}

impl CommonArgs {
    fn spec(&self) -> Result<RunSpec, CliError> {
        let mut spec = RunSpec::new(self.preset.unwrap_or(Preset::Desk));
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(io_err(format!("reading config {}", path.display())))?;
            spec.apply_ini(&text)?;
        }
        Ok(spec)
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

// ─── gen-data ────────────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct DatasetSummary<'a> {
    header: &'a crate::synth::DatasetHeader,
    sessions: Vec<crate::synth::SessionStat>,
}

/// Generate the synthetic dataset described by the config and write it plus a
/// JSON summary under the output directory. Returns the dataset path.
pub fn cmd_gen_data(common: &CommonArgs) -> Result<PathBuf, CliError> {
    let mut spec = common.spec()?;
    if let Some(seed) = common.seed {
        spec.data.seed = seed;
    }
    spec.data.validate()?;
    let dataset = synth::generate(&spec.data)?;
    let stats = synth::session_stats(&dataset)?;

    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    ensure_dir(&dir)?;
    let data_path = dir.join("dataset.vbcl");
    synth::write_dataset(&data_path, &dataset)?;
    let summary = DatasetSummary {
        header: &dataset.header,
        sessions: stats.clone(),
    };
    write_file(
        &dir.join("dataset_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;

    println!(
        "dataset: {} sessions × {} samples ({} train / {} test per session)",
        dataset.header.n_sessions,
        dataset.header.samples_per_session,
        dataset.header.samples_per_session - spec.data.test_count(),
        spec.data.test_count(),
    );
    println!("session  response_rate  observed_acc  consistency  activation");
    for s in stats.iter().take(3).chain(stats.iter().rev().take(3).rev()) {
        println!(
            "{:>7}  {:>13.4}  {:>12.4}  {:>11.4}  {:>10.4}",
            s.session, s.response_rate, s.observed_accuracy, s.consistency, s.activation
        );
        if s.session == 3 && stats.len() > 6 {
            println!("    ...");
        }
    }
    println!("wrote {}", data_path.display());
    Ok(data_path)
}

// ─── train ───────────────────────────────────────────────────────────────────

#[derive(serde::Serialize, serde::Deserialize)]
pub struct ManifestStep {
    pub index: u32,
    pub train_sessions: (u32, u32),
    pub eval_sessions: (u32, u32),
    pub checkpoint: String,
}

/// Everything needed to reproduce and consume a finished run.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub name: String,
    pub preset: String,
    pub ablation: Option<String>,
    pub dataset: String,
    pub dataset_seed: u64,
    pub run_seed: u64,
    pub config: String,
    pub report_csv: String,
    pub report_json: String,
    pub steps: Vec<ManifestStep>,
}

/// Run the full protocol and leave a self-describing run directory behind.
pub fn cmd_train(
    common: &CommonArgs,
    dataset_path: Option<&Path>,
    ablation: Option<Ablation>,
) -> Result<PathBuf, CliError> {
    let mut spec = common.spec()?;
    if let Some(a) = ablation {
        spec.apply_ablation(a);
    }
    if let Some(seed) = common.seed {
        spec.train.run_seed = seed;
    }
    spec.validate()?;

    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&spec.name));
    ensure_dir(&dir)?;
    ensure_dir(&dir.join("checkpoints"))?;

    let (dataset, dataset_ref) = match dataset_path {
        Some(path) => {
            let d = synth::read_dataset_expecting(
                path,
                spec.encoder.input_dim as u32,
                spec.encoder.output_dim as u32,
            )?;
            (d, path.display().to_string())
        }
        None => {
            // no file given: generate from [data] and keep a copy in the run
            let d = synth::generate(&spec.data)?;
            let p = dir.join("dataset.vbcl");
            synth::write_dataset(&p, &d)?;
            (d, "dataset.vbcl".to_string())
        }
    };

    let outcome = engine::run_protocol(&dataset, &spec.run_config())?;

    let mut steps = Vec::with_capacity(outcome.steps.len());
    for record in &outcome.steps {
        let rel = format!("checkpoints/step_{:02}.brnc", record.plan.index);
        encoder::write_checkpoint(
            &dir.join(&rel),
            &spec.encoder,
            record.plan.index,
            &record.params,
        )?;
        steps.push(ManifestStep {
            index: record.plan.index,
            train_sessions: record.plan.train_sessions,
            eval_sessions: record.plan.eval_sessions,
            checkpoint: rel,
        });
        let [b2i, i2b] = &record.reports;
        println!(
            "step {:>2}  train {:>2}-{:<2}  eval 1-{:<2}  brain→image {:.4}  image→brain {:.4}",
            record.plan.index,
            record.plan.train_sessions.0,
            record.plan.train_sessions.1,
            record.plan.eval_sessions.1,
            b2i.top1,
            i2b.top1,
        );
    }

    let rows = outcome.rows();
    retrieval::write_rows_csv(&dir.join("report.csv"), &rows)?;
    retrieval::write_rows_json(&dir.join("report.json"), &rows)?;
    write_file(&dir.join("config.ini"), &spec.to_ini())?;
    let manifest = Manifest {
        name: spec.name.clone(),
        preset: spec.preset.name().to_string(),
        ablation: spec.ablation.map(|a| a.name().to_string()),
        dataset: dataset_ref,
        dataset_seed: dataset.header.seed,
        run_seed: spec.train.run_seed,
        config: "config.ini".into(),
        report_csv: "report.csv".into(),
        report_json: "report.json".into(),
        steps,
    };
    write_file(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    println!("run directory: {}", dir.display());
    Ok(dir)
}

// ─── eval ────────────────────────────────────────────────────────────────────

pub fn parse_range(s: &str) -> Result<(u32, u32), CliError> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| config_err(None, format!("range `{s}` must look like `21-30`")))?;
    let lo: u32 = pv("range", a.trim(), 0).map_err(|_| {
        config_err(None, format!("range `{s}` must be two session numbers"))
    })?;
    let hi: u32 = pv("range", b.trim(), 0).map_err(|_| {
        config_err(None, format!("range `{s}` must be two session numbers"))
    })?;
    if lo == 0 || hi < lo {
        return Err(config_err(None, format!("range `{s}` is empty or zero-based")));
    }
    Ok((lo, hi))
}

/// Evaluate a checkpoint on a session range of a dataset; prints one accuracy
/// per direction.
pub fn cmd_eval(
    common: &CommonArgs,
    checkpoint: &Path,
    dataset_path: &Path,
    range: Option<(u32, u32)>,
) -> Result<[RetrievalRow; 2], CliError> {
    let mut spec = common.spec()?;
    if let Some(seed) = common.seed {
        spec.retrieval.seed = seed;
    }
    let (enc_cfg, step, params) = encoder::read_checkpoint(checkpoint)?;
    let dataset = synth::read_dataset_expecting(
        dataset_path,
        enc_cfg.input_dim as u32,
        enc_cfg.output_dim as u32,
    )?;
    let (lo, hi) = range.unwrap_or((1, dataset.header.n_sessions));
    let rows = retrieval::evaluate_step(&params, &enc_cfg, &dataset, lo..=hi, step, &spec.retrieval)?;
    for row in &rows {
        println!("{} {:.6}", row.direction, row.top1);
    }
    if let Some(dir) = &common.out {
        ensure_dir(dir)?;
        retrieval::write_rows_csv(&dir.join("eval.csv"), &rows)?;
        println!("wrote {}", dir.join("eval.csv").display());
    }
    Ok(rows)
}

// ─── analyze ─────────────────────────────────────────────────────────────────

/// Behavioral decline curves plus the per-window fresh-model probe; writes
/// CSV/JSON/SVG for both and prints the fitted statistics.
pub fn cmd_analyze(common: &CommonArgs, dataset_path: &Path) -> Result<(), CliError> {
    let mut spec = common.spec()?;
    if let Some(seed) = common.seed {
        spec.train.run_seed = seed;
    }
    let dataset = synth::read_dataset_expecting(
        dataset_path,
        spec.encoder.input_dim as u32,
        spec.encoder.output_dim as u32,
    )?;
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("analysis"));
    ensure_dir(&dir)?;

    let behavioral = stats::behavioral_curves(&dataset.sessions)?;
    behavioral.write_csv(&dir.join("behavioral.csv"))?;
    behavioral.write_json(&dir.join("behavioral.json"))?;
    behavioral.write_svg(&dir.join("behavioral.svg"))?;
    println!("behavioral decline over {} sessions:", dataset.sessions.len());
    for m in &behavioral.metrics {
        println!(
            "  {:<14} slope {:>9.5}  ρ {:>7.3}{}",
            m.metric,
            m.slope,
            m.spearman,
            if m.tied { "  (all values tied)" } else { "" }
        );
    }

    let windows = stats::per_window_models(
        &dataset,
        spec.window,
        &spec.encoder,
        &spec.train,
        &spec.loss,
        &spec.retrieval,
    )?;
    windows.write_csv(&dir.join("windows.csv"))?;
    windows.write_json(&dir.join("windows.json"))?;
    windows.write_svg(&dir.join("windows.svg"))?;
    println!(
        "fresh-model probe, {} windows of {} sessions:",
        dataset.header.n_sessions / spec.window,
        spec.window
    );
    for m in &windows.metrics {
        println!(
            "  {:<28} slope {:>9.5}  ρ {:>7.3}{}",
            m.metric,
            m.slope,
            m.spearman,
            if m.tied { "  (all values tied)" } else { "" }
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

// ─── grad-check ──────────────────────────────────────────────────────────────

/// Finite-difference verification of every differentiable objective.
/// Fails (exit 4) if any family's worst error reaches the tolerance.
pub fn cmd_grad_check(instances: u32) -> Result<(), CliError> {
    let entries = suite::run(instances)
        .map_err(|e| CliError::Numeric(format!("gradient suite could not run: {e}")))?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        println!(
            "{:<24} {:>3} instances  {:>6} entries  max rel err {:.3e}",
            e.name, e.instances, e.entries_checked, e.max_rel_err
        );
        worst = worst.max(e.max_rel_err);
    }
    println!("overall max rel err {worst:.3e} (tolerance {:.0e})", suite::TOLERANCE);
    if worst >= suite::TOLERANCE {
        return Err(CliError::Numeric(format!(
            "gradient check failed: {worst:.3e} ≥ {:.0e}",
            suite::TOLERANCE
        )));
    }
    Ok(())
}

// ─── report ──────────────────────────────────────────────────────────────────

/// Merge finished runs into one comparison table: a row per run, a column per
/// evaluation window, one block per retrieval direction.
pub fn cmd_report(common: &CommonArgs, run_dirs: &[PathBuf]) -> Result<String, CliError> {
    if run_dirs.is_empty() {
        return Err(config_err(None, "report needs at least one run directory"));
    }
    let mut runs: Vec<(String, Vec<RetrievalRow>)> = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)
            .map_err(io_err(format!("reading {}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Format(format!("{}: {e}", manifest_path.display())))?;
        let rows_path = dir.join(&manifest.report_json);
        let rows_text = fs::read_to_string(&rows_path)
            .map_err(io_err(format!("reading {}", rows_path.display())))?;
        let rows: Vec<RetrievalRow> = serde_json::from_str(&rows_text)
            .map_err(|e| CliError::Format(format!("{}: {e}", rows_path.display())))?;
        let label = manifest.ablation.unwrap_or(manifest.name);
        runs.push((label, rows));
    }

    // all runs must have evaluated the same windows
    let columns: Vec<(u32, u32, u32)> = {
        let mut cols: Vec<(u32, u32, u32)> = runs[0]
            .1
            .iter()
            .map(|r| (r.step, r.range_start, r.range_end))
            .collect();
        cols.sort_unstable();
        cols.dedup();
        cols
    };
    for (label, rows) in &runs {
        let mut cols: Vec<(u32, u32, u32)> = rows
            .iter()
            .map(|r| (r.step, r.range_start, r.range_end))
            .collect();
        cols.sort_unstable();
        cols.dedup();
        if cols != columns {
            return Err(config_err(
                None,
                format!("run `{label}` evaluated different windows than the first run"),
            ));
        }
    }

    let mut out = String::from("direction,method");
    for &(_, lo, hi) in &columns {
        let _ = write!(out, ",{lo}-{hi}");
    }
    out.push('\n');
    for direction in ["brain_to_image", "image_to_brain"] {
        for (label, rows) in &runs {
            let _ = write!(out, "{direction},{label}");
            for &(step, lo, hi) in &columns {
                let cell = rows
                    .iter()
                    .find(|r| {
                        r.step == step
                            && r.range_start == lo
                            && r.range_end == hi
                            && r.direction.to_string() == direction
                    })
                    .ok_or_else(|| {
                        config_err(
                            None,
                            format!("run `{label}` is missing {direction} for window {lo}-{hi}"),
                        )
                    })?;
                let _ = write!(out, ",{:.6}", cell.top1);
            }
            out.push('\n');
        }
    }

    print!("{out}");
    if let Some(dir) = &common.out {
        ensure_dir(dir)?;
        write_file(&dir.join("comparison.csv"), &out)?;
        println!("wrote {}", dir.join("comparison.csv").display());
    }
    Ok(out)
}
