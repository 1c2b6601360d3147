use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nucleiforge::data::{load_manifest, read_ppm, write_dataset, write_pgm8, DomainSpec, Split};
use nucleiforge::diagnostics::{check_scope, SCOPES};
use nucleiforge::metrics::Report;
use nucleiforge::model::Model;
use nucleiforge::nn::ParamStore;
use nucleiforge::tensor::{Checkpoint, Tensor};
use nucleiforge::train::{ablate, evaluate, train, Config, Protocol, RunCache, TrainData};
use nucleiforge::AlignMode;

use crate::args::{self, ConfigArgs, Preset};

/// A problem with how the command was invoked rather than with its work.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn preset_config(p: Preset) -> Config {
    match p {
        Preset::Default => Config::default(),
        Preset::Ablation => Config::ablation_preset(),
        Preset::HrSplit => Config::hr_split_preset(),
    }
}

/// Base config from a file or preset, then the overrides. A base that fails
/// is a runtime error; overrides that fail are a usage error.
fn build_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<Config> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?,
        None => preset_config(args.preset).to_toml(),
    };
    Config::from_toml(&text, &[]).context("invalid config")?;
    let config = Config::from_toml(&text, overrides).map_err(|e| UsageError(format!("bad override: {e}")))?;
    let lambda_set = overrides.iter().any(|(k, _)| k == "align.lambda");
    if lambda_set && config.align.mode == AlignMode::None {
        eprintln!("warning: align.lambda has no effect with align.mode = none");
    }
    Ok(config)
}

/// Config stored next to a checkpoint unless one is given explicitly.
fn checkpoint_config(checkpoint: &Path, explicit: Option<&PathBuf>) -> Result<Config> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("config.toml"),
    };
    Config::load(&path, &[]).with_context(|| format!("loading config {}", path.display()))
}

fn load_model(checkpoint: &Path, config: &Config) -> Result<(Model, ParamStore<f64>)> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let hidden = (config.align.mode != AlignMode::None).then_some(config.align.discriminator_hidden);
    let (model, mut params) = Model::new::<f64>(&config.model, &config.decoder, hidden, config.train.seed)?;
    params
        .load_checkpoint(&ck)
        .with_context(|| format!("{} does not fit the configured model", checkpoint.display()))?;
    Ok((model, params))
}

pub fn gen_data(a: &args::GenData) -> Result<()> {
    let specs = a
        .presets
        .iter()
        .map(|name| DomainSpec::preset(name, a.size))
        .collect::<nucleiforge::Result<Vec<_>>>()
        .map_err(|e| UsageError(e.to_string()))?;
    let manifest = write_dataset(&a.out, &specs, a.seed, a.count)?;
    for spec in &specs {
        let n = manifest.entries.iter().filter(|e| e.domain_id == spec.domain_id).count();
        println!("{:<8} domain {}  {n} images", spec.name, spec.domain_id);
    }
    println!("manifest {}", a.out.join("manifest.tsv").display());
    Ok(())
}

pub fn train_cmd(a: &args::Train, overrides: &[(String, String)]) -> Result<()> {
    let mut config = build_config(&a.config, overrides)?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    let data = TrainData::load(&config)?;
    let sizes: Vec<String> = data.sizes().iter().map(|(d, n)| format!("{d}:{n}")).collect();
    println!("training on domains {} with {} validation images", sizes.join(" "), data.val.len());
    let out = train::<f64>(&config, &data, None, Some(&a.out), |log| {
        let val = log
            .val
            .as_ref()
            .map_or(String::new(), |(s, i)| format!("  val dsc {:.4} aji {:.4}", s.dsc, i.aji));
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.4} (fine {:.4} cgrl {:.4} coarse {:.4}){val}",
            log.epoch, log.lr, log.loss.total, log.loss.fine, log.loss.cgrl, log.loss.coarse
        );
    })?;
    let (trainable, total) = out.session.params.counts();
    println!("trainable parameters {trainable} of {total}");
    if let Some(r) = &out.best_val {
        println!("best epoch {} val dsc {:.6}", out.best_epoch, r.semantic().dsc);
    }
    println!("run directory {}", a.out.display());
    Ok(())
}

fn split_samples(config: &Config, data: Option<&Path>, split: Split) -> Result<Vec<nucleiforge::data::DomainSample>> {
    let primary = config.data.primary_id;
    let manifest = data.map(Path::to_path_buf).or_else(|| config.data.manifest.clone());
    if let Some(path) = manifest {
        let m = load_manifest(&path)?;
        let samples: Vec<_> = m
            .load_samples(Some(split), primary)?
            .into_iter()
            .filter(|s| s.label.is_primary)
            .collect();
        if samples.is_empty() {
            bail!("{}: no {split} rows for primary domain {primary}", path.display());
        }
        return Ok(samples);
    }
    let d = TrainData::synthetic(config)?;
    Ok(match split {
        Split::Train => d.train.get(&primary).cloned().unwrap_or_default(),
        Split::Val => d.val,
        Split::Test => d.test,
    })
}

fn print_report(report: &Report) {
    for (name, s) in report.summary() {
        println!("{name:<5} {}", s.display());
    }
}

pub fn eval_cmd(a: &args::Eval) -> Result<()> {
    let config = checkpoint_config(&a.checkpoint, a.config.as_ref())?;
    let (model, params) = load_model(&a.checkpoint, &config)?;
    let split: Split = a.split.parse()?;
    let samples = split_samples(&config, a.data.as_deref(), split)?;
    let report = evaluate(&model, &params, &samples)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{split}.csv"))
    });
    report.write(&out, false)?;
    println!("{split} split, {} images", samples.len());
    print_report(&report);
    let s = report.semantic();
    println!("dsc {:.6}", s.dsc);
    println!("report {}", out.display());
    Ok(())
}

pub fn ablate_cmd(a: &args::Ablate, overrides: &[(String, String)]) -> Result<()> {
    let config = build_config(&a.config, overrides)?;
    let protocol: Protocol = a.protocol.parse()?;
    if a.seeds == 0 {
        return Err(UsageError("--seeds must be at least 1".into()).into());
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds as u64).collect();
    let table = ablate(protocol, &config, &seeds, a.jobs, &RunCache::new())?;
    table.write(&a.out)?;
    print!("{}", table.render());
    let names: Vec<&str> = table.arms.iter().map(|arm| arm.name.as_str()).collect();
    for pair in names.windows(2) {
        let (w, l, t) = table.pairwise(pair[1], pair[0]).expect("arms exist");
        println!("{} vs {}: {w} wins {l} losses {t} ties", pair[1], pair[0]);
    }
    println!("tables in {}", a.out.display());
    Ok(())
}

/// Returns whether every check passed.
pub fn gradcheck_cmd(a: &args::Gradcheck) -> Result<bool> {
    let scopes: Vec<&str> = match &a.scope {
        Some(s) => vec![s.as_str()],
        None => SCOPES.to_vec(),
    };
    let mut ok = true;
    println!("{:<32} {:>12} {:>10}", "check", "max rel err", "tolerance");
    for scope in scopes {
        for r in check_scope(scope, a.seed)? {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            println!("{:<32} {:>12.3e} {:>10.0e}  {verdict}", r.name, r.max_rel_err, r.tolerance);
            ok &= r.passed();
        }
    }
    Ok(ok)
}

/// Nearest-neighbour resample of every channel to `h x w`.
fn resample(t: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let s = t.shape();
    let (c, sh, sw) = (s[0], s[1], s[2]);
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        t.data()[ch * sh * sw + (y * sh / h) * sw + x * sw / w]
    })
}

pub fn infer_cmd(a: &args::Infer) -> Result<()> {
    let config = checkpoint_config(&a.checkpoint, a.config.as_ref())?;
    let (model, params) = load_model(&a.checkpoint, &config)?;
    let image = read_ppm(&a.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let size = model.image_size();
    let fits = h == size && w == size;
    if !fits && !a.resize {
        bail!(
            "{}: image is {h}x{w} but the model expects {size}x{size} (sides divisible by 4); pass --resize to resample",
            a.image.display()
        );
    }
    if !fits {
        eprintln!("warning: resampling {h}x{w} to {size}x{size} and back");
    }
    let input = if fits { image } else { resample(&image, size, size) };
    let mut prob = model.predict(&params, &input)?;
    if !fits {
        prob = resample(&prob, h, w);
    }
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let prob_path = a.out.join(format!("{stem}_prob.pgm"));
    let mask_path = a.out.join(format!("{stem}_mask.pgm"));
    let mask: Vec<f64> = prob.data().iter().map(|&p| f64::from(p >= a.threshold)).collect();
    write_pgm8(&prob_path, prob.data(), h, w)?;
    write_pgm8(&mask_path, &mask, h, w)?;
    let fg = mask.iter().filter(|&&m| m > 0.0).count();
    println!("{h}x{w}, {fg} foreground pixels");
    println!("{}\n{}", prob_path.display(), mask_path.display());
    Ok(())
}
