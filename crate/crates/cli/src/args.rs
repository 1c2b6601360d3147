use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-domain nuclei segmentation at desk scale.
///
/// `train` and `ablate` also accept `--section.key=value` overrides for any
/// config field, e.g. `--train.epochs=5`.
#[derive(Debug, Parser)]
#[command(name = "nucleiforge", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic domains as PPM/PGM files plus a manifest.
    GenData(GenData),
    /// Train one model and write its run directory.
    Train(Train),
    /// Score a checkpoint on one split.
    Eval(Eval),
    /// Run one of the comparison protocols over several seeds.
    Ablate(Ablate),
    /// Compare analytic gradients with finite differences.
    Gradcheck(Gradcheck),
    /// Segment a single PPM image.
    Infer(Infer),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size defaults.
    Default,
    /// Small model used by the comparison protocols.
    Ablation,
    /// Ablation model at a native size above the base decoder resolution.
    HrSplit,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML); overrides apply on top.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in starting config when no file is given.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Domain presets to generate (repeatable).
    #[arg(long = "preset", default_values_t = ["primary".to_string(), "aux1".into(), "aux2".into(), "aux3".into()])]
    pub presets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "NUCLEIFORGE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Images per domain.
    #[arg(long, default_value_t = 57)]
    pub count: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory for the config snapshot, metrics and checkpoints.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Replaces `train.seed`.
    #[arg(long, env = "NUCLEIFORGE_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `config.toml` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest; defaults to the config's data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "val", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Per-image report CSV; defaults to `eval_<split>.csv` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_parser = ["alignment", "decoder", "aux-count"])]
    pub protocol: String,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, env = "NUCLEIFORGE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    /// Suite to run; all suites when absent.
    #[arg(long, value_parser = ["primitives", "cgrl", "decoder", "full"])]
    pub scope: Option<String>,
    #[arg(long, env = "NUCLEIFORGE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Infer {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `config.toml` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    /// Directory for `<stem>_prob.pgm` and `<stem>_mask.pgm`.
    #[arg(long)]
    pub out: PathBuf,
    /// Resample images whose size differs from the model's instead of failing.
    #[arg(long)]
    pub resize: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

/// Splits `--section.key=value` (or `--section.key value`) config overrides
/// from the arguments clap should see.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("override --{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_separated_in_both_spellings() {
        let (rest, ov) =
            split_overrides(strings(&["nf", "train", "--train.epochs=3", "--out", "a.b", "--align.mode", "grl"]))
                .unwrap();
        assert_eq!(rest, strings(&["nf", "train", "--out", "a.b"]));
        assert_eq!(ov, vec![("train.epochs".into(), "3".into()), ("align.mode".into(), "grl".into())]);
        assert!(split_overrides(strings(&["nf", "--train.epochs"])).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
