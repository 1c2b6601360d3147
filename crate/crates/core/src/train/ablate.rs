use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::Config;
use super::run::{pretrain_base, train, TrainData};
use crate::align::AlignMode;
use crate::decoder::DecoderMode;
use crate::error::{Error, Result};
use crate::metrics::{ImageMetrics, InstanceReport, MetricSummary, SemanticReport};
use crate::tensor::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// primary-only, naive-mix, grl, cgrl
    Alignment,
    /// base vs high-resolution decoder
    Decoder,
    /// cgrl with 0..=k auxiliary domains
    AuxCount,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Alignment => "alignment",
            Protocol::Decoder => "decoder",
            Protocol::AuxCount => "aux-count",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alignment" => Ok(Protocol::Alignment),
            "decoder" => Ok(Protocol::Decoder),
            "aux-count" => Ok(Protocol::AuxCount),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?} (expected alignment, decoder or aux-count)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: Config,
}

impl Arm {
    fn new(name: &str, mut config: Config, aux: Option<usize>, mode: AlignMode) -> Self {
        if let Some(k) = aux {
            config.data.aux_presets.truncate(k);
        }
        config.align.mode = if config.data.aux_presets.is_empty() {
            AlignMode::None
        } else {
            mode
        };
        Self {
            name: name.to_string(),
            config,
        }
    }
}

/// The arms of `protocol` derived from `base`. Arms without auxiliary data
/// carry no alignment branch, so equivalent arms of different protocols
/// share one configuration.
pub fn arms(protocol: Protocol, base: &Config) -> Vec<Arm> {
    match protocol {
        Protocol::Alignment => vec![
            Arm::new("primary-only", base.clone(), Some(0), AlignMode::None),
            Arm::new("naive-mix", base.clone(), None, AlignMode::None),
            Arm::new("grl", base.clone(), None, AlignMode::Grl),
            Arm::new("cgrl", base.clone(), None, AlignMode::Cgrl),
        ],
        Protocol::AuxCount => (0..=base.data.aux_presets.len())
            .map(|k| Arm::new(&format!("aux{k}"), base.clone(), Some(k), AlignMode::Cgrl))
            .collect(),
        Protocol::Decoder => [DecoderMode::Base, DecoderMode::Hr]
            .into_iter()
            .map(|m| {
                let mut c = base.clone();
                c.decoder.mode = m;
                Arm::new(&m.to_string(), c, None, base.align.mode)
            })
            .collect(),
    }
}

/// Validation metrics of the best checkpoint of one run.
pub type ArmMetrics = ImageMetrics;

/// Memo of finished runs and pretrained bases, shared across protocols.
#[derive(Default)]
pub struct RunCache {
    runs: Mutex<HashMap<String, ArmMetrics>>,
    bases: Mutex<HashMap<String, Checkpoint>>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.runs.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn base_key(c: &Config) -> String {
    let mut k = c.clone();
    k.decoder.mode = DecoderMode::Base;
    k.align = Default::default();
    k.data = Default::default();
    k.train.epochs = 1;
    k.to_toml()
}

/// Trains `config` (with its seed) and reports the best checkpoint's mean
/// validation metrics.
pub fn run_config(config: &Config, cache: &RunCache) -> Result<ArmMetrics> {
    let key = config.to_toml();
    if let Some(m) = cache.runs.lock().expect("cache lock").get(&key) {
        return Ok(*m);
    }
    if config.data.manifest.is_some() {
        return Err(Error::Config("ablation protocols run on the synthetic presets; unset data.manifest".into()));
    }
    let base = if config.train.pretrain_epochs > 0 {
        let bk = base_key(config);
        let cached = cache.bases.lock().expect("cache lock").get(&bk).cloned();
        Some(match cached {
            Some(ck) => ck,
            None => {
                let ck = pretrain_base::<f64>(config)?;
                cache.bases.lock().expect("cache lock").insert(bk, ck.clone());
                ck
            }
        })
    } else {
        None
    };
    let data = TrainData::synthetic(config)?;
    let out = train::<f64>(config, &data, base.as_ref(), None, |_| {})?;
    let report = out
        .best_val
        .ok_or_else(|| Error::Config("ablation needs a non-empty primary validation split".into()))?;
    let m = ImageMetrics {
        semantic: report.semantic(),
        instance: report.instance(),
    };
    cache.runs.lock().expect("cache lock").insert(key, m);
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub name: String,
    /// `(seed, metrics)` in seed order.
    pub runs: Vec<(u64, ArmMetrics)>,
}

const METRICS: [&str; 8] = ["dsc", "miou", "f1", "hd", "aji", "dq", "sq", "pq"];

impl ArmResult {
    pub fn summary(&self, metric: usize) -> MetricSummary {
        MetricSummary::of(self.runs.iter().filter_map(|(_, m)| m.values()[metric]))
    }

    pub fn mean_dsc(&self) -> f64 {
        self.summary(0).mean
    }

    pub fn mean_hd(&self) -> f64 {
        self.summary(3).mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
}

impl AblationTable {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// `(wins, losses, ties)` of arm `a` over arm `b` by per-seed DSC.
    pub fn pairwise(&self, a: &str, b: &str) -> Option<(usize, usize, usize)> {
        let (a, b) = (self.arm(a)?, self.arm(b)?);
        let mut out = (0, 0, 0);
        for ((_, x), (_, y)) in a.runs.iter().zip(&b.runs) {
            let (x, y) = (x.semantic.dsc, y.semantic.dsc);
            if x > y {
                out.0 += 1;
            } else if x < y {
                out.1 += 1;
            } else {
                out.2 += 1;
            }
        }
        Some(out)
    }

    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["arm".to_string(), "seeds".to_string()];
        for m in METRICS {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header).expect("in-memory write");
        for arm in &self.arms {
            let mut rec = vec![arm.name.clone(), arm.runs.len().to_string()];
            for i in 0..METRICS.len() {
                let s = arm.summary(i);
                rec.push(format!("{:.6}", s.mean));
                rec.push(format!("{:.6}", s.std));
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn runs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["arm", "seed"];
        header.extend(METRICS);
        w.write_record(&header).expect("in-memory write");
        for arm in &self.arms {
            for (seed, m) in &arm.runs {
                let mut rec = vec![arm.name.clone(), seed.to_string()];
                rec.extend(m.values().iter().map(|v| v.map_or("undefined".into(), |x| format!("{x:.6}"))));
                w.write_record(&rec).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn pairwise_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "versus", "wins", "losses", "ties"]).expect("in-memory write");
        for a in &self.arms {
            for b in &self.arms {
                if a.name != b.name {
                    let (x, y, z) = self.pairwise(&a.name, &b.name).expect("arms exist");
                    w.write_record([&a.name, &b.name, &x.to_string(), &y.to_string(), &z.to_string()])
                        .expect("in-memory write");
                }
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Human-readable table with `mean±std` per metric.
    pub fn render(&self) -> String {
        let mut out = format!("protocol {} over {} seeds\n", self.protocol, self.seeds.len());
        out.push_str(&format!("{:<14}", "arm"));
        for m in METRICS {
            out.push_str(&format!("{m:>18}"));
        }
        out.push('\n');
        for arm in &self.arms {
            out.push_str(&format!("{:<14}", arm.name));
            for i in 0..METRICS.len() {
                out.push_str(&format!("{:>18}", arm.summary(i).display()));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<protocol>_summary.csv`, `<protocol>_runs.csv` and
    /// `<protocol>_pairwise.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (suffix, text) in [
            ("summary", self.summary_csv()),
            ("runs", self.runs_csv()),
            ("pairwise", self.pairwise_csv()),
        ] {
            let path = dir.join(format!("{}_{suffix}.csv", self.protocol));
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Runs every arm of `protocol` for every seed on up to `jobs` threads.
/// Arms share data and initialisation per seed.
pub fn ablate(protocol: Protocol, base: &Config, seeds: &[u64], jobs: usize, cache: &RunCache) -> Result<AblationTable> {
    let arms = arms(protocol, base);
    let work: Vec<(usize, usize, Config)> = arms
        .iter()
        .enumerate()
        .flat_map(|(a, arm)| {
            seeds.iter().enumerate().map(move |(s, &seed)| {
                let mut c = arm.config.clone();
                c.train.seed = seed;
                (a, s, c)
            })
        })
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ArmMetrics>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, _, cfg)) = work.get(i) else { break };
                let r = run_config(cfg, cache);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut table = AblationTable {
        protocol,
        seeds: seeds.to_vec(),
        arms: arms
            .iter()
            .map(|a| ArmResult {
                name: a.name.clone(),
                runs: Vec::new(),
            })
            .collect(),
    };
    for ((a, s, _), r) in work.iter().zip(results) {
        let m = r.expect("every job ran")?;
        table.arms[*a].runs.push((seeds[*s], m));
    }
    Ok(table)
}

/// Mean semantic metrics of an arm (convenience for reporting).
pub fn arm_semantic(arm: &ArmResult) -> SemanticReport {
    SemanticReport {
        dsc: arm.summary(0).mean,
        miou: arm.summary(1).mean,
        f1: arm.summary(2).mean,
        hd: Some(arm.summary(3).mean),
    }
}

/// Mean instance metrics of an arm.
pub fn arm_instance(arm: &ArmResult) -> InstanceReport {
    InstanceReport {
        aji: arm.summary(4).mean,
        dq: arm.summary(5).mean,
        sq: arm.summary(6).mean,
        pq: arm.summary(7).mean,
    }
}
