//! `hiproto` command-line tool.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "hiproto", version, about = "Hierarchical few-shot audio classification")]
pub struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Tsv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Tsv,
    Pretty,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Taxonomy files.
    #[command(subcommand)]
    Taxonomy(TaxonomyCmd),
    /// Manifests, folds and the synthetic corpus.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Log-mel feature caches.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Episodic training.
    Train(TrainArgs),
    /// Prototype banks.
    #[command(subcommand)]
    Bank(BankCmd),
    /// Add recordings of a (possibly new) leaf class to a bank.
    Enroll(EnrollArgs),
    /// Classify one recording at every level.
    Classify(ClassifyArgs),
    /// Post-training metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Compare analytic and finite-difference gradients on the test encoder.
    Gradcheck(GradcheckArgs),
    /// Parameter and multiply-accumulate counts of an encoder.
    Describe(DescribeArgs),
}

#[derive(Debug, Subcommand)]
pub enum TaxonomyCmd {
    /// Parse and check a taxonomy file.
    Validate { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Generate the synthetic toy corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        /// Tree shape as TOPxMIDxLEAVES.
        #[arg(long, default_value = "2x2x3")]
        shape: String,
        #[arg(long)]
        seed: u64,
    },
    /// Assign manifest entries to stratified folds.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCmd {
    /// Cut one seeded segment per recording and cache its log-mel matrix.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossMode {
    Hierarchical,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Distance {
    Euclidean,
    Angular,
}

/// Episode-shape flags shared by training and evaluation.
#[derive(Debug, Args)]
pub struct EpisodeFlags {
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    /// SED, SED&SID and SID draw weights in percent, e.g. 60,20,20.
    #[arg(long)]
    pub mix: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold file from `corpus split`; training skips the evaluation folds.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub episode: EpisodeFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossMode>,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long, value_enum)]
    pub distance: Option<Distance>,
    /// Conv block widths, e.g. 8,16,32,64.
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Train on clean segments.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum BankCmd {
    /// Embed every manifest recording and build leaf and ancestor prototypes.
    Build {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Directory for `bank.hpb`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub leaf: String,
    /// Parent node for a leaf that is not in the taxonomy yet.
    #[arg(long)]
    pub parent: Option<String>,
    /// Tag a new leaf as a speaker.
    #[arg(long)]
    pub speaker: bool,
    #[arg(long = "wav", required = true)]
    pub wavs: Vec<PathBuf>,
    /// Directory for the updated `bank.hpb` and `taxonomy.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    /// Distance cutoff applied at every level.
    #[arg(long, conflicts_with = "thresholds")]
    pub threshold: Option<f64>,
    /// Per-level distance cutoffs, top level first.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Replace upper-level predictions by the predicted leaf's ancestors.
    #[arg(long)]
    pub consistent: bool,
}

#[derive(Debug, Args)]
pub struct EvalInputs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Fold file; only the evaluation folds are used.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report and merged config here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Per-level episodic accuracy and hierarchical mistake severity.
    Accuracy {
        #[command(flatten)]
        inputs: EvalInputs,
        #[command(flatten)]
        episode: EpisodeFlags,
        #[arg(long)]
        episodes: Option<usize>,
        /// Fail unless every level reaches this mean accuracy.
        #[arg(long)]
        min_accuracy: Option<f64>,
        /// Fail if the mean hierarchical mistake exceeds this.
        #[arg(long)]
        max_hm: Option<f64>,
    },
    /// Speaker-verification equal error rate.
    Eer {
        #[command(flatten)]
        inputs: EvalInputs,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        pairs: Option<usize>,
        /// Fail if the mean EER exceeds this.
        #[arg(long)]
        max_eer: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: u64,
    /// Sampled parameters per configuration.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Check only this α (default: −1, 0 and 1).
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Check only this distance (default: both).
    #[arg(long, value_enum)]
    pub distance: Option<Distance>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    /// Describe a trained weight file.
    #[arg(long, conflicts_with = "config")]
    pub weights: Option<PathBuf>,
    /// Describe the encoder section of a settings file (default settings otherwise).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
