use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    append_line, mean, prepare_run_dir, read_json, require_split, stream_rng, write_json, Dataset,
    OptimConfig, RunConfig, Sample, FPN_CHECKPOINT, FPN_META, STREAM_BASELINE, STREAM_FPN_INIT,
    STREAM_FPN_ORDER,
};
use crate::autodiff::Tape;
use crate::error::{config_err, Error, Result};
use crate::metrics::plm;
use crate::nn::{checkpoint, GradBuffer, LrSchedule, Sgd};
use crate::prompter::{predict_regions, Fpn, FpnConfig, Registry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_plm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainFpnReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_plm: f64,
    /// PLM of the best checkpoint on the test split.
    pub test_plm: f64,
    /// PLM of random region sets on the test split.
    pub random_set_plm: f64,
    pub final_train_loss: f64,
    pub checkpoint_sha256: String,
}

/// What a prompter checkpoint was trained against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FpnMeta {
    config: FpnConfig,
    registry: Vec<String>,
}

pub(crate) fn schedule(opt: &OptimConfig, steps_per_epoch: usize) -> LrSchedule {
    LrSchedule {
        base: opt.lr,
        warmup: opt.warmup_steps,
        total: opt.epochs * steps_per_epoch,
    }
}

/// Mean PLM of thresholded predictions over `samples`.
pub(crate) fn evaluate_plm(fpn: &Fpn, samples: &[Sample], registry: &Registry, threshold: f64) -> Result<f64> {
    let scores = samples
        .iter()
        .map(|s| {
            let (logits, _) = fpn.infer(&s.image)?;
            let pred = predict_regions(&logits, registry, threshold);
            plm(&pred, &registry.names_where(&s.labels), registry)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&scores))
}

/// PLM of a random guess: a uniformly random set of 1 to 11 registry regions.
pub fn random_set_plm<R: Rng + ?Sized>(truths: &[Vec<String>], registry: &Registry, rng: &mut R) -> Result<f64> {
    let scores = truths
        .iter()
        .map(|gt| {
            let k = rng.random_range(1..=11.min(registry.len()));
            let pick: Vec<&str> = rand::seq::index::sample(rng, registry.len(), k)
                .into_iter()
                .map(|i| registry.name(i))
                .collect();
            plm(&pick, gt, registry)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&scores))
}

/// One optimizer update from the mean gradient over `batch`; returns the
/// mean loss before the update.
pub fn fpn_sgd_step(fpn: &mut Fpn, opt: &mut Sgd, batch: &[&Sample], lr: f64) -> Result<f64> {
    let mut buf = GradBuffer::new(&fpn.store);
    let mut total = 0.0;
    for s in batch {
        let tape = Tape::new();
        let p = fpn.bind(&tape, true);
        let out = fpn.forward(&p, tape.constant(s.image.clone()))?;
        let loss = fpn.loss(&out, &s.labels)?;
        let l = loss.item();
        if !l.is_finite() {
            return Err(Error::Diverged(format!("prompter loss {l} on {}", s.entry.id)));
        }
        total += l;
        buf.accumulate(&p.grads(&tape.backward(loss)?));
    }
    opt.step(&mut fpn.store, &buf.take_mean(), lr, None)?;
    Ok(total / batch.len().max(1) as f64)
}

/// Loads the prompter checkpoint of `run` and the registry it was trained on.
/// With `expect`, a checkpoint trained on another registry is refused.
pub fn load_fpn(run: &Path, expect: Option<&Registry>) -> Result<(Fpn, Registry)> {
    let meta: FpnMeta = read_json(&run.join(FPN_META))?;
    let registry = Registry::from_names(meta.registry)?;
    if expect.is_some_and(|r| *r != registry) {
        return Err(config_err!(
            "{} was trained on a different region registry",
            run.join(FPN_CHECKPOINT).display()
        ));
    }
    // initial values are overwritten by the checkpoint
    let mut fpn = Fpn::new(meta.config, &mut stream_rng(0, STREAM_FPN_INIT))?;
    checkpoint::load(&mut fpn.store, &run.join(FPN_CHECKPOINT))?;
    Ok((fpn, registry))
}

/// Trains the region prompter and keeps the checkpoint with the best
/// validation PLM.
pub fn cmd_train_fpn(
    cfg: &RunConfig,
    data: &Path,
    run: &Path,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainFpnReport> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    require_split(&ds.split.train, "train")?;
    require_split(&ds.split.val, "validation")?;
    require_split(&ds.split.test, "test")?;
    prepare_run_dir(run, cfg)?;
    let train = ds.load(&ds.split.train)?;
    let val = ds.load(&ds.split.val)?;
    let test = ds.load(&ds.split.test)?;

    let opt_cfg = &cfg.train_fpn;
    let mut fpn = Fpn::new(cfg.fpn.clone(), &mut stream_rng(cfg.seed, STREAM_FPN_INIT))?;
    let mut sgd = Sgd::new(&fpn.store, opt_cfg.momentum, opt_cfg.clip())?;
    let steps_per_epoch = train.len().div_ceil(opt_cfg.batch);
    let lr = schedule(opt_cfg, steps_per_epoch);
    let mut order_rng = stream_rng(cfg.seed, STREAM_FPN_ORDER);
    let log_path = run.join("train_fpn.log.jsonl");
    write_json(
        &run.join(FPN_META),
        &FpnMeta {
            config: cfg.fpn.clone(),
            registry: ds.registry.names().to_vec(),
        },
    )?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(opt_cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..opt_cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        let mut last_lr = 0.0;
        for chunk in order.chunks(opt_cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            last_lr = lr.at(step);
            losses.push(fpn_sgd_step(&mut fpn, &mut sgd, &batch, last_lr)?);
            step += 1;
        }
        let val_plm = evaluate_plm(&fpn, &val, &ds.registry, cfg.thresholds.region)?;
        let log = EpochLog {
            epoch,
            steps: step,
            lr: last_lr,
            train_loss: mean(&losses),
            val_plm,
        };
        append_line(&log_path, &serde_json::to_string(&log).expect("log serializes"))?;
        progress(&log);
        if best.is_none_or(|(_, b)| val_plm > b) {
            best = Some((epoch, val_plm));
            checkpoint::save(&fpn.store, &run.join(FPN_CHECKPOINT))?;
        }
        epochs.push(log);
    }

    let (best_epoch, best_val_plm) = best.expect("at least one epoch");
    let (best_fpn, _) = load_fpn(run, Some(&ds.registry))?;
    let test_plm = evaluate_plm(&best_fpn, &test, &ds.registry, cfg.thresholds.region)?;
    let truths: Vec<Vec<String>> = test.iter().map(|s| ds.registry.names_where(&s.labels)).collect();
    let random = random_set_plm(&truths, &ds.registry, &mut stream_rng(cfg.seed, STREAM_BASELINE))?;
    let report = TrainFpnReport {
        final_train_loss: epochs.last().map_or(0.0, |e| e.train_loss),
        epochs,
        best_epoch,
        best_val_plm,
        test_plm,
        random_set_plm: random,
        checkpoint_sha256: super::file_sha256(&run.join(FPN_CHECKPOINT))?,
    };
    write_json(&run.join("train_fpn.json"), &report)?;
    Ok(report)
}
