use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::fpn::{load_fpn, schedule};
use super::{
    append_line, mean, prepare_run_dir, read_json, require_split, stream_rng, write_json, Dataset,
    PromptSource, RunConfig, Sample, FPN_CHECKPOINT, PREDICTIONS, STAGE2_CHECKPOINT, STAGE2_META,
    STREAM_STAGE2_INIT, STREAM_STAGE2_ORDER, VOCAB,
};
use crate::autodiff::Tape;
use crate::error::{config_err, Error, Result};
use crate::forge::{image_to_tensor, read_rgb_png, write_jsonl};
use crate::instruct::{build_instruction, QFormerConfig, Stage2Model, Stage2Sample, Vocab};
use crate::mask::{binarize, write_mask_png, MaskDecoderConfig};
use crate::metrics::Prediction;
use crate::nn::{checkpoint, GradBuffer, Sgd};
use crate::prompter::{predict_regions, Fpn, Registry};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_lm_loss: f64,
    pub train_mask_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStage2Report {
    pub epochs: Vec<Stage2EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub vocab_size: usize,
    /// Prompter parameter digests before and after the run; equal when frozen.
    pub fpn_digest_before: String,
    pub fpn_digest_after: String,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stage2Meta {
    qformer: QFormerConfig,
    mask_decoder: MaskDecoderConfig,
    image_size: usize,
    patch_size: usize,
    fpn_dim: usize,
    fpn_digest: String,
    caption_max_len: usize,
}

/// A sample with its frozen prompter outputs and token ids.
struct Prepared {
    sample: Sample,
    fpn_tokens: Tensor,
    instruction: Vec<usize>,
    caption: Vec<usize>,
}

fn prompt_regions(fpn_logits: &[f64], truth: &[String], source: PromptSource, registry: &Registry, threshold: f64) -> Vec<String> {
    match source {
        PromptSource::Predicted => predict_regions(fpn_logits, registry, threshold),
        PromptSource::GroundTruth => truth.to_vec(),
    }
}

fn prepare(
    samples: Vec<Sample>,
    fpn: &Fpn,
    registry: &Registry,
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<Vec<Prepared>> {
    samples
        .into_iter()
        .map(|sample| {
            let (logits, fpn_tokens) = fpn.infer(&sample.image)?;
            let regions = prompt_regions(
                &logits,
                &sample.entry.regions,
                cfg.stage2.train_prompt,
                registry,
                cfg.thresholds.region,
            );
            let instruction = build_instruction(&regions)?.token_ids(vocab);
            let caption = vocab.tokenize(&sample.entry.caption);
            if caption.len() + 1 > cfg.stage2.caption_max_len {
                return Err(config_err!(
                    "caption of {} has {} tokens; stage2.caption_max_len {} leaves room for {}",
                    sample.entry.id,
                    caption.len(),
                    cfg.stage2.caption_max_len,
                    cfg.stage2.caption_max_len - 1
                ));
            }
            if instruction.len() > cfg.qformer.max_len {
                return Err(config_err!(
                    "instruction for {} has {} tokens, above qformer.max_len {}",
                    sample.entry.id,
                    instruction.len(),
                    cfg.qformer.max_len
                ));
            }
            Ok(Prepared {
                sample,
                fpn_tokens,
                instruction,
                caption,
            })
        })
        .collect()
}

fn as_sample(p: &Prepared) -> Stage2Sample<'_> {
    Stage2Sample {
        image: &p.sample.image,
        fpn_tokens: &p.fpn_tokens,
        instruction: &p.instruction,
        caption: &p.caption,
        mask: &p.sample.mask,
    }
}

fn validation_loss(model: &Stage2Model, val: &[Prepared]) -> Result<f64> {
    let losses = val
        .iter()
        .map(|p| {
            let tape = Tape::new();
            let b = model.bind(&tape, false);
            Ok(model.loss(&b, &as_sample(p))?.0.item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(&losses))
}

/// Loads the stage-2 model and vocabulary of `run`.
pub fn load_stage2(run: &Path) -> Result<(Stage2Model, Vocab)> {
    let meta: Stage2Meta = read_json(&run.join(STAGE2_META))?;
    let vocab = Vocab::load(&run.join(VOCAB))?;
    let mut model = Stage2Model::new(
        meta.qformer,
        meta.mask_decoder,
        (3, meta.image_size),
        meta.patch_size,
        meta.fpn_dim,
        vocab.len(),
        &mut stream_rng(0, STREAM_STAGE2_INIT),
    )?;
    checkpoint::load(&mut model.store, &run.join(STAGE2_CHECKPOINT))?;
    Ok((model, vocab))
}

/// Second stage: the prompter at `fpn_run` stays frozen while the fusion,
/// caption decoder and mask decoder train on `L_t + L_m`.
pub fn cmd_train_stage2(
    cfg: &RunConfig,
    data: &Path,
    fpn_run: &Path,
    run: &Path,
    progress: &mut dyn FnMut(&Stage2EpochLog),
) -> Result<TrainStage2Report> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    require_split(&ds.split.train, "train")?;
    require_split(&ds.split.val, "validation")?;
    let (fpn, _) = load_fpn(fpn_run, Some(&ds.registry))?;
    if fpn.cfg.image_size != cfg.data.forge.image_size {
        return Err(config_err!(
            "prompter expects {} px images, dataset config has {}",
            fpn.cfg.image_size,
            cfg.data.forge.image_size
        ));
    }
    let fpn_digest_before = fpn.store.digest();
    prepare_run_dir(run, cfg)?;

    let train_samples = ds.load(&ds.split.train)?;
    let captions: Vec<&str> = train_samples.iter().map(|s| s.entry.caption.as_str()).collect();
    let mut names: Vec<&str> = ds.registry.names().iter().map(String::as_str).collect();
    names.extend(captions);
    let vocab = Vocab::build(&names);
    vocab.save(&run.join(VOCAB))?;
    let train = prepare(train_samples, &fpn, &ds.registry, &vocab, cfg)?;
    let val = prepare(ds.load(&ds.split.val)?, &fpn, &ds.registry, &vocab, cfg)?;

    let mut model = Stage2Model::new(
        cfg.qformer.clone(),
        cfg.mask_decoder.clone(),
        (cfg.fpn.channels, cfg.fpn.image_size),
        cfg.fpn.patch_size,
        fpn.cfg.embed_dim,
        vocab.len(),
        &mut stream_rng(cfg.seed, STREAM_STAGE2_INIT),
    )?;
    write_json(
        &run.join(STAGE2_META),
        &Stage2Meta {
            qformer: cfg.qformer.clone(),
            mask_decoder: cfg.mask_decoder.clone(),
            image_size: cfg.fpn.image_size,
            patch_size: cfg.fpn.patch_size,
            fpn_dim: fpn.cfg.embed_dim,
            fpn_digest: fpn_digest_before.clone(),
            caption_max_len: cfg.stage2.caption_max_len,
        },
    )?;

    let opt_cfg = &cfg.train_stage2;
    let mut sgd = Sgd::new(&model.store, opt_cfg.momentum, opt_cfg.clip())?;
    let steps_per_epoch = train.len().div_ceil(opt_cfg.batch);
    let lr = schedule(opt_cfg, steps_per_epoch);
    let mut order_rng = stream_rng(cfg.seed, STREAM_STAGE2_ORDER);
    let log_path = run.join("train_stage2.log.jsonl");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..opt_cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut lms, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        let mut last_lr = 0.0;
        for chunk in order.chunks(opt_cfg.batch) {
            let mut buf = GradBuffer::new(&model.store);
            for &i in chunk {
                let tape = Tape::new();
                let p = model.bind(&tape, true);
                let (loss, lt, lm) = model.loss(&p, &as_sample(&train[i]))?;
                let l = loss.item();
                if !l.is_finite() {
                    return Err(Error::Diverged(format!(
                        "stage-2 loss {l} on {} at step {step}",
                        train[i].sample.entry.id
                    )));
                }
                total.push(l);
                lms.push(lt.item());
                masks.push(lm.item());
                buf.accumulate(&p.grads(&tape.backward(loss)?));
            }
            last_lr = lr.at(step);
            sgd.step(&mut model.store, &buf.take_mean(), last_lr, None)?;
            step += 1;
        }
        let val_loss = validation_loss(&model, &val)?;
        let log = Stage2EpochLog {
            epoch,
            steps: step,
            lr: last_lr,
            train_loss: mean(&total),
            train_lm_loss: mean(&lms),
            train_mask_loss: mean(&masks),
            val_loss,
        };
        append_line(&log_path, &serde_json::to_string(&log).expect("log serializes"))?;
        progress(&log);
        if best.is_none_or(|(_, b)| val_loss < b) {
            best = Some((epoch, val_loss));
            checkpoint::save(&model.store, &run.join(STAGE2_CHECKPOINT))?;
        }
        epochs.push(log);
    }

    let fpn_digest_after = load_fpn(fpn_run, Some(&ds.registry))?.0.store.digest();
    if fpn.store.digest() != fpn_digest_before || fpn_digest_after != fpn_digest_before {
        return Err(config_err!("prompter parameters changed during stage 2"));
    }
    let (best_epoch, best_val_loss) = best.expect("at least one epoch");
    let report = TrainStage2Report {
        epochs,
        best_epoch,
        best_val_loss,
        vocab_size: vocab.len(),
        fpn_digest_before,
        fpn_digest_after,
        checkpoint_sha256: super::file_sha256(&run.join(STAGE2_CHECKPOINT))?,
    };
    write_json(&run.join("train_stage2.json"), &report)?;
    Ok(report)
}

/// One image to run through the full pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct InferInput {
    pub id: String,
    pub image: PathBuf,
    /// True regions, used when prompting from ground truth.
    pub truth: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferFailure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub prompt: PromptSource,
    pub written: usize,
    pub failures: Vec<InferFailure>,
    /// Mean fraction of prompted regions named in the generated caption.
    pub mention_rate: f64,
    /// Mean fraction of the true modified regions named in the caption, over
    /// inputs whose truth is known.
    pub truth_mention_rate: Option<f64>,
}

/// Fraction of `prompted` regions that `caption` mentions.
pub fn mention_rate<S: AsRef<str>>(prompted: &[S], caption: &str, registry: &Registry) -> f64 {
    if prompted.is_empty() {
        return 1.0;
    }
    let named = registry.mentions(caption);
    let hit = prompted
        .iter()
        .filter(|r| registry.index_of(r.as_ref()).is_some_and(|i| named.contains(&i)))
        .count();
    hit as f64 / prompted.len() as f64
}

fn infer_one(
    input: &InferInput,
    fpn: &Fpn,
    registry: &Registry,
    model: &Stage2Model,
    vocab: &Vocab,
    cfg: &RunConfig,
    prompt: PromptSource,
    out: &Path,
) -> Result<(Prediction, f64, Option<f64>)> {
    let image = read_rgb_png(&input.image)?;
    let size = fpn.cfg.image_size as u32;
    if image.dimensions() != (size, size) {
        return Err(crate::error::dim_err!(
            "{} is {:?}, the models expect {size}×{size}",
            input.image.display(),
            image.dimensions()
        ));
    }
    let tensor = image_to_tensor(&image);
    let (logits, tokens) = fpn.infer(&tensor)?;
    let predicted = predict_regions(&logits, registry, cfg.thresholds.region);
    let prompted = match (prompt, &input.truth) {
        (PromptSource::GroundTruth, Some(t)) => t.clone(),
        (PromptSource::GroundTruth, None) => {
            return Err(config_err!("no true regions for {} to prompt with", input.id))
        }
        (PromptSource::Predicted, _) => predicted.clone(),
    };
    let instruction = build_instruction(&prompted)?.token_ids(vocab);
    let (probs, ids) = model.predict(&tensor, &tokens, &instruction, cfg.stage2.caption_max_len)?;
    let caption = vocab.detokenize(&ids);
    let mask_rel = format!("masks/{}.png", input.id);
    write_mask_png(&binarize(&probs, cfg.thresholds.mask), &out.join(&mask_rel))?;
    let rate = mention_rate(&prompted, &caption, registry);
    let truth_rate = input.truth.as_ref().map(|t| mention_rate(t, &caption, registry));
    Ok((
        Prediction {
            id: input.id.clone(),
            mask: mask_rel,
            caption,
            regions: predicted,
        },
        rate,
        truth_rate,
    ))
}

/// Runs every input through prompter, fusion, mask decoder and caption
/// decoder. Unreadable inputs are reported and skipped.
pub fn cmd_infer(
    cfg: &RunConfig,
    fpn_run: &Path,
    stage2_run: &Path,
    inputs: &[InferInput],
    prompt: PromptSource,
    out: &Path,
) -> Result<InferReport> {
    let (fpn, registry) = load_fpn(fpn_run, None)?;
    let (model, vocab) = load_stage2(stage2_run)?;
    let meta: Stage2Meta = read_json(&stage2_run.join(STAGE2_META))?;
    if meta.fpn_digest != fpn.store.digest() {
        return Err(config_err!(
            "{} is not the prompter the stage-2 model in {} was trained with",
            fpn_run.join(FPN_CHECKPOINT).display(),
            stage2_run.display()
        ));
    }
    let masks = out.join("masks");
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut preds = Vec::new();
    let mut rates = Vec::new();
    let mut truth_rates = Vec::new();
    let mut failures = Vec::new();
    for input in inputs {
        match infer_one(input, &fpn, &registry, &model, &vocab, cfg, prompt, out) {
            Ok((p, rate, truth_rate)) => {
                preds.push(p);
                rates.push(rate);
                truth_rates.extend(truth_rate);
            }
            Err(e) => failures.push(InferFailure {
                id: input.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    write_jsonl(&out.join(PREDICTIONS), &preds)?;
    let report = InferReport {
        prompt,
        written: preds.len(),
        failures,
        mention_rate: mean(&rates),
        truth_mention_rate: (!truth_rates.is_empty()).then(|| mean(&truth_rates)),
    };
    write_json(&out.join("infer.json"), &report)?;
    Ok(report)
}

/// Inputs for one split of a dataset, with true regions attached.
pub fn split_inputs(ds: &Dataset, ids: &[String]) -> Vec<InferInput> {
    ids.iter()
        .filter_map(|id| ds.entry(id))
        .map(|e| InferInput {
            id: e.id.clone(),
            image: ds.root.join(&e.image),
            truth: Some(e.regions.clone()),
        })
        .collect()
}
