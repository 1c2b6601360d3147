use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::Config;
use super::loss::{coarse_loss, fine_loss, LossBundle, LossValues};
use super::optim::{clip_global_norm, lr_at, Adam};
use crate::align::{cgrl_loss, domain_weights, lambda_at, AlignMode, AlignmentBatch, DomainWeights};
use crate::data::{generate, split_counts, BatchSampler, DomainSample, DomainSpec, Split};
use crate::decoder::DecoderMode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, InstanceReport, Report, SemanticReport};
use crate::model::{Model, BASE_PREFIXES};
use crate::nn::{derive_seed, Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Checkpoint, Tape};

/// Training samples per domain plus primary-domain validation and test sets.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: BTreeMap<u32, Vec<DomainSample>>,
    pub val: Vec<DomainSample>,
    pub test: Vec<DomainSample>,
}

impl TrainData {
    /// In-memory synthetic domains: the `primary` preset plus
    /// `data.aux_presets`, at the model's image size.
    pub fn synthetic(config: &Config) -> Result<Self> {
        let d = &config.data;
        let size = config.model.image_size;
        let seed = derive_seed(config.train.seed, "data");
        let primary = DomainSpec::preset("primary", size)?;
        let mut samples = generate(&primary, seed, d.primary_count)?;
        let (tr, va, _) = split_counts(d.primary_count);
        let test = samples.split_off(tr + va);
        let val = samples.split_off(tr);
        let mut train = BTreeMap::from([(primary.domain_id, samples)]);
        for name in &d.aux_presets {
            let spec = DomainSpec::preset(name, size)?;
            let (atr, _, _) = split_counts(d.aux_count);
            let mut aux = generate(&spec, seed, d.aux_count)?;
            aux.truncate(atr);
            if !aux.is_empty() {
                train.insert(spec.domain_id, aux);
            }
        }
        Ok(Self { train, val, test }.tagged(primary.domain_id))
    }

    /// Samples listed in `data.manifest`.
    pub fn from_manifest(config: &Config, manifest: &Path) -> Result<Self> {
        let m = crate::data::load_manifest(manifest)?;
        let primary = config.data.primary_id;
        let keep = |id: u32| id == primary || config.data.aux_ids.as_ref().map_or(true, |ids| ids.contains(&id));
        let mut out = Self::default();
        for s in m.load_samples(Some(Split::Train), primary)? {
            if keep(s.label.domain_id) {
                out.train.entry(s.label.domain_id).or_default().push(s);
            }
        }
        for (split, dst) in [(Split::Val, &mut out.val), (Split::Test, &mut out.test)] {
            dst.extend(
                m.load_samples(Some(split), primary)?
                    .into_iter()
                    .filter(|s| s.label.is_primary),
            );
        }
        if out.train.get(&primary).map_or(true, Vec::is_empty) {
            return Err(Error::InvalidBatch(format!(
                "{}: no training rows for primary domain {primary}",
                manifest.display()
            )));
        }
        let size = config.model.image_size;
        if let Some(s) = out.train.values().flatten().chain(&out.val).find(|s| s.size() != size) {
            return Err(Error::Config(format!(
                "{}: image size {} differs from model.image_size {size}",
                manifest.display(),
                s.size()
            )));
        }
        Ok(out)
    }

    pub fn load(config: &Config) -> Result<Self> {
        match &config.data.manifest {
            Some(m) => Self::from_manifest(config, m),
            None => Self::synthetic(config),
        }
    }

    fn tagged(mut self, primary_id: u32) -> Self {
        for v in self.train.values_mut() {
            for s in v.iter_mut() {
                s.label = crate::align::DomainLabel::new(s.label.domain_id, primary_id);
            }
        }
        self
    }

    /// Keeps only the first `k` auxiliary domains (by id).
    pub fn with_aux_limit(&self, primary_id: u32, k: usize) -> Self {
        let mut out = self.clone();
        let aux: Vec<u32> = out.train.keys().copied().filter(|&d| d != primary_id).collect();
        for d in aux.into_iter().skip(k) {
            out.train.remove(&d);
        }
        out
    }

    pub fn sizes(&self) -> BTreeMap<u32, usize> {
        self.train.iter().map(|(&k, v)| (k, v.len())).collect()
    }
}

/// Model, parameters and optimizer state of one training context.
pub struct Session<S> {
    pub config: Config,
    pub model: Model,
    pub params: ParamStore<S>,
    pub adam: Adam<S>,
    pub steps: usize,
}

impl<S: Scalar> Session<S> {
    /// Fresh model from `config.train.seed`. A supplied `base` checkpoint
    /// replaces the frozen encoder and decoder weights; otherwise they are
    /// pretrained when `train.pretrain_epochs > 0`.
    pub fn new(config: &Config, base: Option<&Checkpoint>) -> Result<Self> {
        config.validate()?;
        let hidden = (config.align.mode != AlignMode::None).then_some(config.align.discriminator_hidden);
        let (model, mut params) = Model::new(&config.model, &config.decoder, hidden, config.train.seed)?;
        match base {
            Some(ck) => params.load_prefixed(ck, &BASE_PREFIXES)?,
            None if config.train.pretrain_epochs > 0 => {
                let ck = pretrain_base::<S>(config)?;
                params.load_prefixed(&ck, &BASE_PREFIXES)?;
            }
            None => {}
        }
        Ok(Self {
            config: config.clone(),
            model,
            params,
            adam: Adam::new(),
            steps: 0,
        })
    }

    /// One optimizer step on `batch`. `align` enables the discriminator branch.
    pub fn train_step(
        &mut self,
        batch: &[&DomainSample],
        weights: DomainWeights,
        lr: f64,
        lambda: f64,
        align: bool,
    ) -> Result<LossValues> {
        if batch.is_empty() {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        let cfg = &self.config;
        let size = self.model.image_size();
        // Non-finite values surface as the loss diagnostic below rather than
        // as an error from whichever op produced them first.
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let mut g = Graph::with_tape(&self.params, tape);
        let mut fine_terms = Vec::new();
        let mut coarse_terms = Vec::new();
        let mut pooled = Vec::new();
        let labels: Vec<_> = batch.iter().map(|s| s.label).collect();
        for s in batch {
            let x = g.input(s.image.cast())?;
            let out = self.model.forward(&mut g, x, size)?;
            if !cfg.train.fine_on_primary_only || s.label.is_primary {
                fine_terms.push(fine_loss(&mut g, out.decoder.logits, &s.mask.cast())?);
            }
            coarse_terms.push(coarse_loss(&mut g, out.coarse, &s.mask)?);
            pooled.push(out.pooled);
        }
        let fine = mean_of(&mut g, &fine_terms)?;
        let coarse = mean_of(&mut g, &coarse_terms)?;
        let cgrl = match (&self.model.discriminator, align) {
            (Some(disc), true) => {
                let features = g.concat(&pooled, 0)?;
                let ab = AlignmentBatch {
                    features,
                    labels: &labels,
                    lambda,
                    weights,
                };
                Some(cgrl_loss(&mut g, &ab, disc, cfg.align.mode)?)
            }
            _ => None,
        };
        let bundle = LossBundle::assemble(&mut g, fine, cgrl, coarse, cfg.train.alpha, cfg.train.beta)?;
        let values = bundle.values(&g);
        if !values.total.is_finite() {
            return Err(Error::NanLoss {
                step: self.steps,
                lr,
                fine: values.fine,
                cgrl: values.cgrl,
                coarse: values.coarse,
            });
        }
        let grads = g.backward(bundle.total)?;
        let mut pg = g.param_grads(&grads);
        drop(g);
        clip_global_norm(&mut pg, cfg.train.clip_norm);
        self.adam.update(&mut self.params, &pg, lr);
        self.steps += 1;
        Ok(values)
    }

    /// Tape-free evaluation at native resolution, one report row per sample.
    pub fn evaluate(&self, samples: &[DomainSample]) -> Result<Report> {
        evaluate(&self.model, &self.params, samples)
    }
}

fn mean_of<S: Scalar>(g: &mut Graph<'_, S>, terms: &[crate::tensor::Var]) -> Result<crate::tensor::Var> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return g.constant(crate::tensor::Tensor::scalar(S::zero())),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, S::of(1.0 / terms.len() as f64))
}

pub fn evaluate<S: Scalar>(model: &Model, params: &ParamStore<S>, samples: &[DomainSample]) -> Result<Report> {
    let mut report = Report::default();
    for (i, s) in samples.iter().enumerate() {
        let prob = model.predict(params, &s.image)?;
        report.push(format!("d{}_{i:04}", s.label.domain_id), evaluate_pair(&prob, &s.instances)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossValues,
    pub val: Option<(SemanticReport, InstanceReport)>,
}

pub struct TrainOutcome<S> {
    pub session: Session<S>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Validation report of the best checkpoint, when a validation set exists.
    pub best_val: Option<Report>,
    pub best: Checkpoint,
}

const METRICS_HEADER: [&str; 14] = [
    "epoch", "lr", "loss", "fine", "cgrl", "coarse", "val_dsc", "val_miou", "val_f1", "val_hd", "val_aji", "val_dq",
    "val_sq", "val_pq",
];

fn metrics_row(log: &EpochLog) -> Vec<String> {
    let mut row = vec![
        log.epoch.to_string(),
        format!("{:e}", log.lr),
        format!("{:.9}", log.loss.total),
        format!("{:.9}", log.loss.fine),
        format!("{:.9}", log.loss.cgrl),
        format!("{:.9}", log.loss.coarse),
    ];
    match &log.val {
        Some((s, i)) => {
            let hd = s.hd.map_or("undefined".into(), |h| format!("{h:.6}"));
            row.extend([
                format!("{:.6}", s.dsc),
                format!("{:.6}", s.miou),
                format!("{:.6}", s.f1),
                hd,
                format!("{:.6}", i.aji),
                format!("{:.6}", i.dq),
                format!("{:.6}", i.sq),
                format!("{:.6}", i.pq),
            ]);
        }
        None => row.extend(std::iter::repeat(String::new()).take(8)),
    }
    row
}

/// Per-epoch metrics as CSV text.
pub fn metrics_csv(history: &[EpochLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for log in history {
        w.write_record(metrics_row(log)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full training run. With a `run_dir`, writes `config.toml`, `metrics.csv`
/// (rewritten every epoch), `best.nfck` and `last.nfck` there.
pub fn train<S: Scalar>(
    config: &Config,
    data: &TrainData,
    base: Option<&Checkpoint>,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    let mut session = Session::<S>::new(config, base)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("config.toml"), &config.to_toml())?;
    }
    let primary = config.data.primary_id;
    let sizes = data.sizes();
    let n_primary = sizes.get(&primary).copied().unwrap_or(0);
    let t = &config.train;
    let sampler = BatchSampler::new(
        &sizes,
        primary,
        t.batch_size,
        config.data.primary_fraction,
        derive_seed(t.seed, "batches"),
    )?;
    let weights = domain_weights(&sizes, primary)?;
    let align = config.align.mode != AlignMode::None && sizes.len() > 1;
    let total_steps = t.epochs * sampler.epoch_len();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint, Report)> = None;
    for epoch in 0..t.epochs {
        let lr = lr_at(epoch, n_primary, t.lr_ref, t.lr_ref_images, t.decay);
        let mut sum = LossValues::default();
        let batches = sampler.epoch(epoch);
        for b in &batches {
            let items: Vec<&DomainSample> = b.items.iter().map(|&(d, i)| &data.train[&d][i]).collect();
            let lambda = lambda_at(config.align.lambda, config.align.warmup_frac, session.steps, total_steps);
            let v = session.train_step(&items, weights, lr, lambda, align)?;
            sum.fine += v.fine;
            sum.cgrl += v.cgrl;
            sum.coarse += v.coarse;
            sum.total += v.total;
        }
        let n = batches.len() as f64;
        let loss = LossValues {
            fine: sum.fine / n,
            cgrl: sum.cgrl / n,
            coarse: sum.coarse / n,
            total: sum.total / n,
        };
        let val = if data.val.is_empty() {
            None
        } else {
            let report = session.evaluate(&data.val)?;
            let dsc = report.semantic().dsc;
            if best.as_ref().map_or(true, |(b, ..)| dsc > *b) {
                best = Some((dsc, epoch, session.params.to_checkpoint(), report.clone()));
            }
            Some((report.semantic(), report.instance()))
        };
        let log = EpochLog { epoch, lr, loss, val };
        on_epoch(&log);
        history.push(log);
        if let Some(dir) = run_dir {
            write_text(&dir.join("metrics.csv"), &metrics_csv(&history))?;
        }
    }
    let last = session.params.to_checkpoint();
    let (best_epoch, best_ck, best_val) = match best {
        Some((_, e, ck, r)) => (e, ck, Some(r)),
        None => (t.epochs - 1, last.clone(), None),
    };
    if let Some(dir) = run_dir {
        best_ck.save(dir.join("best.nfck"))?;
        last.save(dir.join("last.nfck"))?;
    }
    Ok(TrainOutcome {
        session,
        history,
        best_epoch,
        best_val,
        best: best_ck,
    })
}

/// Trains the whole base model (encoder, decoder, prompt head) on the
/// held-out `pretrain` preset and returns its parameters.
pub fn pretrain_base<S: Scalar>(config: &Config) -> Result<Checkpoint> {
    let mut pc = config.clone();
    pc.model.freeze_base = false;
    pc.decoder.mode = DecoderMode::Base;
    pc.align.mode = AlignMode::None;
    pc.train.epochs = config.train.pretrain_epochs;
    pc.train.pretrain_epochs = 0;
    pc.train.seed = derive_seed(config.train.seed, "pretrain");
    let spec = DomainSpec::preset("pretrain", config.model.image_size)?;
    let samples = generate(&spec, pc.train.seed, config.train.pretrain_count)?
        .into_iter()
        .map(|s| s.with_primary(spec.domain_id))
        .collect();
    pc.data.primary_id = spec.domain_id;
    let data = TrainData {
        train: BTreeMap::from([(spec.domain_id, samples)]),
        val: Vec::new(),
        test: Vec::new(),
    };
    let out = train::<S>(&pc, &data, None, None, |_| {})?;
    Ok(out.session.params.to_checkpoint())
}
