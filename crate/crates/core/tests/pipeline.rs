use std::fs;
use std::path::Path;

use forgetalk_core::forge::{read_manifest, MANIFEST};
use forgetalk_core::harness::*;
use forgetalk_core::metrics::Prediction;
use forgetalk_core::prompter::Fpn;
use forgetalk_core::qc::compute_stats;
use forgetalk_core::Error;

/// A configuration small enough to run every stage in a few seconds.
fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.samples = 20;
    cfg.data.forge.image_size = 16;
    cfg.fpn.image_size = 16;
    cfg.fpn.embed_dim = 16;
    cfg.fpn.depth = 2;
    cfg.fpn.heads = 2;
    cfg.fpn.conv_channels = 4;
    cfg.qformer.embed_dim = 16;
    cfg.qformer.heads = 2;
    cfg.qformer.depth = 1;
    cfg.qformer.decoder_depth = 1;
    cfg.qformer.num_query_tokens = 2;
    cfg.mask_decoder.depth = 1;
    for opt in [&mut cfg.train_fpn, &mut cfg.train_stage2] {
        opt.epochs = 1;
        opt.batch = 4;
        opt.warmup_steps = 1;
    }
    cfg
}

fn synth(dir: &Path) -> RunConfig {
    let cfg = tiny();
    cmd_synth(&cfg, dir, false).unwrap();
    cfg
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let mut none = tiny();
    none.train_fpn.clip_norm = 0.0;
    assert_eq!(RunConfig::from_toml(&none.to_toml()).unwrap(), none);
}

#[test]
fn config_rejects_unknown_and_inconsistent_fields() {
    assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Config(_))));
    assert!(matches!(
        RunConfig::from_toml("[fpn]\nimage_size = 32"),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        RunConfig::from_toml("[thresholds]\nregion = 1.5"),
        Err(Error::Config(_))
    ));
    let partial = RunConfig::from_toml("seed = 9\n[train_fpn]\nepochs = 3").unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.train_fpn.epochs, 3);
    assert_eq!(partial.train_fpn.batch, RunConfig::default().train_fpn.batch);
}

#[test]
fn synth_refuses_zero_samples_and_occupied_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.data.samples = 0;
    assert!(matches!(cmd_synth(&cfg, dir.path(), false), Err(Error::Config(_))));

    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    assert!(matches!(cmd_synth(&tiny(), dir.path(), false), Err(Error::Config(_))));
    assert!(cmd_synth(&tiny(), dir.path(), true).is_ok());
    assert!(dir.path().join("keep.txt").exists());
}

#[test]
fn synth_is_deterministic_and_passes_qc() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_synth(&tiny(), a.path(), false).unwrap();
    let rb = cmd_synth(&tiny(), b.path(), false).unwrap();
    assert_eq!(ra, rb);
    assert_eq!((ra.train, ra.val, ra.test), (16, 2, 2));
    assert_eq!(
        fs::read(a.path().join(SPLIT)).unwrap(),
        fs::read(b.path().join(SPLIT)).unwrap()
    );

    let qc = cmd_qc(a.path()).unwrap();
    assert_eq!(qc.total, 20);
    assert!(qc.all_passed(), "{:?}", qc.counts);

    let ds = Dataset::open(a.path()).unwrap();
    let direct = compute_stats(&read_manifest(a.path()).unwrap(), &ds.registry).unwrap();
    assert_eq!(cmd_stats(a.path()).unwrap(), direct);

    let mut other = tiny();
    other.seed = 1;
    let c = tempfile::tempdir().unwrap();
    assert_ne!(cmd_synth(&other, c.path(), false).unwrap().manifest_sha256, ra.manifest_sha256);
}

#[test]
fn qc_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let entry = read_manifest(dir.path()).unwrap().remove(3);
    fs::remove_file(dir.path().join(&entry.image)).unwrap();
    match cmd_qc(dir.path()) {
        Err(Error::Io { source, .. }) => assert!(source.to_string().contains(&entry.image)),
        other => panic!("expected an I/O error, got {other:?}"),
    }
}

#[test]
fn run_dir_belongs_to_one_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    prepare_run_dir(dir.path(), &cfg).unwrap();
    prepare_run_dir(dir.path(), &cfg).unwrap();
    let mut other = cfg.clone();
    other.seed = 5;
    assert!(matches!(prepare_run_dir(dir.path(), &other), Err(Error::Config(_))));
}

#[test]
fn prompter_step_reduces_batch_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let ds = Dataset::open(dir.path()).unwrap();
    let samples = ds.load(&ds.split.train[..4]).unwrap();
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut fpn = Fpn::new(cfg.fpn.clone(), &mut stream_rng(0, 2)).unwrap();
    let mut sgd = forgetalk_core::nn::Sgd::new(&fpn.store, 0.0, None).unwrap();
    let before = fpn_sgd_step(&mut fpn, &mut sgd, &batch, 0.05).unwrap();
    let after = fpn_sgd_step(&mut fpn, &mut sgd, &batch, 0.0).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let fpn_run = root.path().join("fpn");
    let s2_run = root.path().join("stage2");
    let out = root.path().join("infer");
    let cfg = synth(&data);

    let mut seen = 0;
    let fpn = cmd_train_fpn(&cfg, &data, &fpn_run, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 1);
    assert_eq!(fpn.epochs.len(), 1);
    assert!((0.0..=1.0).contains(&fpn.test_plm));
    for f in [FPN_CHECKPOINT, FPN_META, CONFIG, "train_fpn.json", "train_fpn.log.jsonl"] {
        assert!(fpn_run.join(f).exists(), "{f}");
    }
    assert_eq!(file_sha256(&fpn_run.join(FPN_CHECKPOINT)).unwrap(), fpn.checkpoint_sha256);

    let s2 = cmd_train_stage2(&cfg, &data, &fpn_run, &s2_run, &mut |_| {}).unwrap();
    assert_eq!(s2.fpn_digest_before, s2.fpn_digest_after);
    assert_eq!(file_sha256(&fpn_run.join(FPN_CHECKPOINT)).unwrap(), fpn.checkpoint_sha256);
    for f in [STAGE2_CHECKPOINT, STAGE2_META, VOCAB, CONFIG] {
        assert!(s2_run.join(f).exists(), "{f}");
    }

    let ds = Dataset::open(&data).unwrap();
    let mut inputs = split_inputs(&ds, &ds.split.test);
    let broken = root.path().join("broken.png");
    fs::write(&broken, b"not an image").unwrap();
    inputs.push(InferInput {
        id: "broken".into(),
        image: broken,
        truth: None,
    });
    let report = cmd_infer(&cfg, &fpn_run, &s2_run, &inputs, PromptSource::Predicted, &out).unwrap();
    assert_eq!(report.written, 2);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].id, "broken");
    assert!(report.truth_mention_rate.is_some());
    for id in &ds.split.test {
        assert!(out.join(format!("masks/{id}.png")).exists());
    }

    let metrics = cmd_eval(&out.join(PREDICTIONS), &data).unwrap();
    assert_eq!(metrics.samples, 2);
    assert!(out.join("metrics.json").exists());
    assert!((0.0..=1.0).contains(&metrics.iou));

    let gt = cmd_infer(&cfg, &fpn_run, &s2_run, &inputs[..2], PromptSource::GroundTruth, &root.path().join("gt")).unwrap();
    assert_eq!(gt.written, 2);
    assert_eq!(Some(gt.mention_rate), gt.truth_mention_rate);
}

#[test]
fn truth_as_predictions_scores_perfectly() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data);
    let entries = read_manifest(&data).unwrap();
    let lines: Vec<String> = entries
        .iter()
        .map(|e| {
            let p = Prediction {
                id: e.id.clone(),
                mask: data.join(&e.mask).display().to_string(),
                caption: e.caption.clone(),
                regions: e.regions.clone(),
            };
            serde_json::to_string(&p).unwrap()
        })
        .collect();
    let preds = root.path().join(PREDICTIONS);
    fs::write(&preds, lines.join("\n") + "\n").unwrap();
    let m = cmd_eval(&preds, &data).unwrap();
    assert_eq!(m.samples, entries.len());
    assert_eq!((m.plm, m.iou, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(m.bleu, [1.0; 4]);
    assert_eq!(m.rouge_l, 1.0);
    assert!(data.join(MANIFEST).exists());
}
