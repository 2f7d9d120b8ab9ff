use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "themeforge", version, about = "Theme-aware 3D-to-3D generation with dual score distillation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Configuration file (TOML); missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Base denoiser: analytic, toy or external:PATH.
    #[arg(long, global = true, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Fail with exit code 3 when a requested metric is unavailable.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render exemplar colour, normal and mask views of every OBJ in a directory.
    RenderExemplars {
        /// Directory holding the exemplar meshes.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Tune the theme prior on the exemplars and sample concept images.
    Stage1 {
        #[command(flatten)]
        exemplars: ExemplarArgs,
        #[command(flatten)]
        tokens: TokenArgs,
        /// Number of concept images to sample.
        #[arg(long, value_name = "N")]
        n_concepts: Option<usize>,
    },
    /// Lift one concept image to a 3D model.
    Stage2 {
        #[command(flatten)]
        input: ConceptArgs,
        #[command(flatten)]
        opts: Stage2Args,
    },
    /// Stage I followed by Stage II for every sampled concept.
    Generate {
        #[command(flatten)]
        exemplars: ExemplarArgs,
        #[command(flatten)]
        tokens: TokenArgs,
        #[arg(long, value_name = "N")]
        n_concepts: Option<usize>,
        #[command(flatten)]
        opts: Stage2Args,
    },
    /// Compute metrics, tables and diagnostic plots over finished runs.
    Evaluate {
        /// Run directories (Stage II runs, Stage I runs, or directories containing them).
        #[arg(required = true, value_name = "RUN")]
        runs: Vec<PathBuf>,
    },
    /// Run Stage II under several distillation settings with shared seeds.
    Ablate {
        #[command(flatten)]
        input: ConceptArgs,
        #[command(flatten)]
        opts: Stage2Args,
        /// Comma-separated settings, or "all": baseline, naive, dsd, reverse, ref_dominated.
        #[arg(long, default_value = "all", value_name = "LIST")]
        modes: String,
    },
    /// Serve the selected local backend over the external-backend protocol on stdin/stdout.
    ServeBackend,
    /// Print the normalized configuration document.
    Config,
    /// Re-execute the command recorded in a run manifest.
    Rerun {
        /// Run directory holding manifest.json.
        #[arg(value_name = "RUN")]
        run: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ExemplarArgs {
    /// Exemplar OBJ files or directories of them.
    #[arg(long = "exemplars", required = true, num_args = 1.., value_name = "PATH")]
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TokenArgs {
    /// Subject token used when sampling concepts.
    #[arg(long, value_name = "ID")]
    pub subject_token: Option<u16>,
    /// Attribute token used when sampling concepts.
    #[arg(long, value_name = "ID")]
    pub attribute_token: Option<u16>,
}

#[derive(Debug, Clone, Args)]
pub struct ConceptArgs {
    /// A Stage I run directory to take the concept, theme prior and exemplars from.
    #[arg(long, value_name = "DIR", conflicts_with = "concept")]
    pub stage1_run: Option<PathBuf>,
    /// Index of the concept within the Stage I run.
    #[arg(long, default_value_t = 0, value_name = "K")]
    pub concept_index: usize,
    /// A concept image (PNG) instead of a Stage I run.
    #[arg(long, value_name = "PNG", requires = "exemplars")]
    pub concept: Option<PathBuf>,
    /// Azimuth of the concept camera in degrees.
    #[arg(long, default_value_t = 0.0, value_name = "DEG", allow_hyphen_values = true)]
    pub azimuth: f64,
    /// Elevation of the concept camera in degrees.
    #[arg(long, default_value_t = 0.0, value_name = "DEG", allow_hyphen_values = true)]
    pub elevation: f64,
    /// Exemplar OBJ files or directories (required with --concept).
    #[arg(long, num_args = 1.., value_name = "PATH")]
    pub exemplars: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Stage2Args {
    /// Number of optimization steps, overriding the configuration.
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    /// Initial model (OBJ or grid container) instead of the visual hull.
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
}
