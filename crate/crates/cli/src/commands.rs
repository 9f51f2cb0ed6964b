//! Command implementations.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::Parser;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tsdiff_core::data::{load_csv, load_labels, synth_dataset, window, write_csv};
use tsdiff_core::heads::{accuracy, classifier_features, detect, finetune_classifier, finetune_projection};
use tsdiff_core::masking::{forecasting_mask, imputation_mask_with};
use tsdiff_core::metrics::auroc;
use tsdiff_core::sampler::generate;
use tsdiff_core::{
    Checkpoint, ClassifierLayout, DatasetManifest, EpochStats, HeadTrainConfig, Matrix, Model, Normalizer, RawSeries,
    SampleSet, SamplerConfig, Series, SeriesBatch, SynthConfig, ThresholdRule, TrainConfig,
};

use crate::args::{
    AnomalyArgs, ClassifyArgs, Cli, Command, EmbedArgs, EvaluateArgs, FinetuneArgs, ForecastArgs, GenerateOpts,
    ImputeArgs, PretrainArgs, ReplayArgs, RunOpts, Split, SynthArgs, TaskMask, TrainOpts,
};
use crate::output::{self, Generated};
use crate::run::RunManifest;

const CHECKPOINT: &str = "model.ckpt";

pub fn dispatch(command: Command, argv: &[OsString]) -> Result<()> {
    match &command {
        Command::Replay(a) => return replay(a),
        Command::Evaluate(a) => return evaluate(a),
        _ => {}
    }
    let run = command.run_opts().expect("command writes a run directory").clone();
    let seed = run.seed.unwrap_or(command.default_seed());
    std::fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    let manifest = RunManifest::new(&command, argv, Some(seed), run.deterministic)?;
    match &command {
        Command::Synth(a) => synth(a, seed),
        Command::Pretrain(a) => pretrain(a, seed),
        Command::Finetune(a) => finetune(a, seed),
        Command::Impute(a) => impute(a, seed, false),
        Command::Interpolate(a) => impute(a, seed, true),
        Command::Forecast(a) => forecast(a, seed),
        Command::Embed(a) => embed(a),
        Command::Anomaly(a) => anomaly(a, seed),
        Command::Classify(a) => classify(a, seed),
        Command::Evaluate(_) | Command::Replay(_) => unreachable!(),
    }?;
    manifest.write(&run.out)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    ensure!(manifest.command != "replay", "a replay manifest cannot be replayed");
    let mut argv: Vec<OsString> = std::iter::once(OsString::from("tsdiff"))
        .chain(manifest.argv.iter().map(OsString::from))
        .collect();
    if let Some(out) = &a.out {
        argv.extend([OsString::from("--out"), out.clone().into_os_string()]);
    }
    let cli = Cli::try_parse_from(&argv).context("recorded arguments no longer parse")?;
    dispatch(cli.command, &argv)
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    ensure!(a.instances >= 3, "need at least 3 instances for train, val and test splits");
    let batch = synth_dataset(&SynthConfig {
        len: a.len,
        instances: a.instances,
        period: a.period,
        noise_std: a.noise_std,
        random_phase: a.random_phase,
        seed,
    })?;
    let n = batch.len();
    let held = ((n as f64 * 0.1).round() as usize).max(1);
    let n_train = n - 2 * held;
    let names: Vec<String> = ["trend", "seasonal", "noise"].map(String::from).to_vec();
    let parts = [("train", 0..n_train), ("val", n_train..n_train + held), ("test", n_train + held..n)];
    for (name, range) in parts.iter().cloned() {
        let (values, mask) = concat(&batch.series[range]);
        write_csv(a.run.out.join(format!("{name}.csv")), &names, &values, &mask, "NaN")?;
    }
    let manifest = DatasetManifest {
        train: "train.csv".into(),
        val: Some("val.csv".into()),
        test: Some("test.csv".into()),
        missing_token: "NaN".into(),
        window: a.len,
        stride: a.len,
        horizon: Some((a.len / 4).max(1).min(a.len - 1)),
        feature_sample: None,
        train_labels: None,
        test_labels: None,
        anomaly_labels: None,
    };
    std::fs::write(a.run.out.join("dataset.toml"), manifest.to_toml())?;
    eprintln!("wrote {n_train} train, {held} val and {held} test windows of length {}", a.len);
    Ok(())
}

/// Joins windows end to end along time.
fn concat(series: &[Series]) -> (Matrix, Matrix) {
    let k = series[0].n_features();
    let l = series[0].len();
    let at = |f: fn(&Series) -> &Matrix| Matrix::from_fn(k, l * series.len(), |r, c| f(&series[c / l]).get(r, c % l));
    (at(|s| &s.values), at(|s| &s.mask))
}

fn load_split(manifest: &DatasetManifest, split: Split) -> Result<RawSeries> {
    let path = match split {
        Split::Train => Some(&manifest.train),
        Split::Val => manifest.val.as_ref(),
        Split::Test => manifest.test.as_ref(),
    }
    .with_context(|| format!("dataset manifest has no {split:?} split"))?;
    load_csv(path, &manifest.missing_token).with_context(|| format!("loading {}", path.display()))
}

/// Normalised windows of a split. Training windows use the manifest stride;
/// validation and test windows do not overlap.
fn split_windows(manifest: &DatasetManifest, split: Split, norm: &Normalizer) -> Result<Vec<Series>> {
    let raw = load_split(manifest, split)?;
    ensure!(
        raw.n_features() == norm.mean.len(),
        "{split:?} split has {} features, expected {}",
        raw.n_features(),
        norm.mean.len()
    );
    let stride = match split {
        Split::Train => manifest.stride,
        _ => manifest.window,
    };
    Ok(window(&norm.normalize_raw(&raw), manifest.window, stride)?)
}

/// A checkpoint, its model and the normaliser for a dataset.
struct Loaded {
    ckpt: Checkpoint,
    model: Model,
    norm: Normalizer,
    manifest: DatasetManifest,
}

fn load_model(checkpoint: &Path, data: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ckpt.model()?;
    let manifest = DatasetManifest::load(data)?;
    let norm = match &ckpt.normalizer {
        Some(n) => n.clone(),
        None => Normalizer::fit_raw(&load_split(&manifest, Split::Train)?),
    };
    ensure!(
        norm.mean.len() == model.config.n_features,
        "checkpoint expects {} features, data has {}",
        model.config.n_features,
        norm.mean.len()
    );
    Ok(Loaded { ckpt, model, norm, manifest })
}

fn train_config(base: TrainConfig, t: &TrainOpts, manifest: &DatasetManifest, deterministic: bool) -> TrainConfig {
    TrainConfig {
        batch_size: t.batch_size,
        lr: t.lr,
        weight_decay: t.weight_decay,
        feature_sample: t.feature_sample.or(manifest.feature_sample),
        deterministic,
        ..base
    }
}

fn log_epoch(s: &EpochStats) {
    eprintln!("epoch {:>4}  loss {:.6}  lr {:e}", s.epoch, s.loss, s.lr);
}

fn write_losses(path: &Path, history: &[EpochStats]) -> Result<()> {
    output::write_rows(
        path,
        &["epoch", "loss", "lr"],
        history.iter().map(|s| vec![s.epoch.to_string(), s.loss.to_string(), s.lr.to_string()]),
    )
}

fn pretrain(a: &PretrainArgs, seed: u64) -> Result<()> {
    let manifest = DatasetManifest::load(&a.data)?;
    let raw = load_split(&manifest, Split::Train)?;
    let norm = Normalizer::fit_raw(&raw);
    let train = SeriesBatch::new(window(&norm.normalize_raw(&raw), manifest.window, manifest.stride)?)?;
    let mut config = a.preset.config(raw.n_features());
    if let Some(steps) = a.steps {
        config.schedule.steps = steps;
    }
    let model = Model::new(config, seed)?;
    let tc = train_config(TrainConfig::pretrain(a.train.epochs, seed), &a.train, &manifest, a.run.deterministic);
    let mut trainer = tsdiff_core::Trainer::new(model, tc)?;
    trainer.fit(&train, None, log_epoch)?;
    let mut ckpt = Checkpoint::from_trainer(&trainer);
    ckpt.normalizer = Some(norm);
    ckpt.save(a.run.out.join(CHECKPOINT))?;
    write_losses(&a.run.out.join("losses.csv"), &trainer.history)
}

fn finetune(a: &FinetuneArgs, seed: u64) -> Result<()> {
    let loaded = load_model(&a.checkpoint, &a.data)?;
    let train = SeriesBatch::new(split_windows(&loaded.manifest, Split::Train, &loaded.norm)?)?;
    let mut base = TrainConfig::finetune(a.train.epochs, seed, a.mask.into());
    if a.mask == TaskMask::Forecasting {
        base.horizon = Some(
            a.horizon
                .or(loaded.manifest.horizon)
                .context("forecasting needs --horizon or a manifest horizon")?,
        );
    }
    let tc = train_config(base, &a.train, &loaded.manifest, a.run.deterministic);
    let mut trainer = loaded.ckpt.trainer(Some(tc))?;
    let pool = (a.mask == TaskMask::History).then_some(&train);
    trainer.fit(&train, pool, log_epoch)?;
    let mut ckpt = Checkpoint::from_trainer(&trainer);
    ckpt.normalizer = Some(loaded.norm);
    ckpt.save(a.run.out.join(CHECKPOINT))?;
    write_losses(&a.run.out.join("losses.csv"), &trainer.history)
}

/// Runs the sampler over every window of a split with the visible mask
/// chosen by `hide`, then writes the bundle and the metric report.
fn generate_split(
    g: &GenerateOpts,
    run: &RunOpts,
    seed: u64,
    mut hide: impl FnMut(&Matrix, &mut ChaCha8Rng) -> Result<Matrix>,
) -> Result<()> {
    ensure!(g.samples > 0, "--samples must be at least 1");
    let loaded = load_model(&g.checkpoint, &g.data)?;
    let windows = split_windows(&loaded.manifest, g.split, &loaded.norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(windows.len());
    for (i, s) in windows.iter().enumerate() {
        let m = hide(&s.mask, &mut rng)?;
        let cfg = SamplerConfig {
            samples: g.samples,
            seed: rng.random(),
            terminal_noise: g.terminal_noise,
            deterministic: run.deterministic,
        };
        let set = generate(&loaded.model, &s.values, &m, &s.feature_ids, &cfg)?;
        let ids = &s.feature_ids;
        let draws: Vec<Matrix> = set.samples.iter().map(|x| loaded.norm.denormalize(x, ids)).collect();
        let set = SampleSet::from_samples(draws, set.target_mask)?;
        let truth = loaded.norm.denormalize(&s.values, ids).zip_map(&s.mask, |v, w| v * w);
        let eval = s.mask.zip_map(&m, |a, b| a - b);
        let samples = set.samples.iter().map(|x| x.zip_map(&eval, |v, e| if e != 0.0 { v } else { 0.0 })).collect();
        records.push(Generated {
            truth,
            median: set.median,
            q05: set.q05,
            q95: set.q95,
            m_gt: s.mask.clone(),
            m,
            samples,
        });
        eprintln!("window {}/{}", i + 1, windows.len());
    }
    output::write_generated(&run.out, &records, !g.no_samples)?;
    let report = output::generation_metrics(&records, g.gamma, true)?;
    output::write_report(&run.out, &report)
}

fn impute(a: &ImputeArgs, seed: u64, timestamps: bool) -> Result<()> {
    ensure!(a.ratio > 0.0 && a.ratio < 1.0, "--ratio must be in (0, 1)");
    let ratio = a.ratio;
    if timestamps {
        generate_split(&a.gen, &a.run, seed, |m, rng| {
            let l = m.cols();
            let n = ((l as f64 * ratio).round() as usize).clamp(1, l);
            let mut vis = m.clone();
            for c in sample_indices(rng, l, n) {
                for r in 0..m.rows() {
                    vis.set(r, c, 0.0);
                }
            }
            Ok(vis)
        })
    } else {
        generate_split(&a.gen, &a.run, seed, |m, rng| Ok(imputation_mask_with(m, ratio, rng).m_iif))
    }
}

fn forecast(a: &ForecastArgs, seed: u64) -> Result<()> {
    let manifest = DatasetManifest::load(&a.gen.data)?;
    let h = a
        .horizon
        .or(manifest.horizon)
        .context("forecasting needs --horizon or a manifest horizon")?;
    generate_split(&a.gen, &a.run, seed, |m, _| Ok(forecasting_mask(m, h)?.m_iif))
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let loaded = load_model(&a.checkpoint, &a.data)?;
    let windows = split_windows(&loaded.manifest, a.split, &loaded.norm)?;
    let channels = loaded.model.config.embedding_channels();
    let mut header = vec!["instance".to_string(), "feature".into(), "time".into()];
    header.extend((0..channels).map(|c| format!("z{c}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for (i, s) in windows.iter().enumerate() {
        let emb = loaded.model.embed(&s.values, &s.mask, &s.feature_ids)?;
        for k in 0..s.n_features() {
            for l in 0..s.len() {
                let mut row = vec![i.to_string(), s.feature_ids[k].to_string(), l.to_string()];
                row.extend((0..channels).map(|c| emb.get(k, l, c).to_string()));
                rows.push(row);
            }
        }
    }
    output::write_rows(&a.run.out.join("embeddings.csv"), &header, rows)?;
    eprintln!("embedded {} windows into {channels} channels", windows.len());
    Ok(())
}

fn anomaly(a: &AnomalyArgs, seed: u64) -> Result<()> {
    let loaded = load_model(&a.checkpoint, &a.data)?;
    let m = &loaded.manifest;
    let train = split_windows(m, Split::Train, &loaded.norm)?;
    let test = split_windows(m, Split::Test, &loaded.norm)?;
    let (rule, val) = match a.threshold {
        Some(d) => (ThresholdRule::Fixed(d), None),
        None => {
            ensure!(m.val.is_some(), "thresholding by --ratio needs a validation split; pass --threshold instead");
            (ThresholdRule::ValidationRatio(a.ratio), Some(split_windows(m, Split::Val, &loaded.norm)?))
        }
    };
    let covered = test.len() * m.window;
    let labels = match &m.anomaly_labels {
        Some(p) => {
            let raw = load_labels(p)?;
            ensure!(raw.len() >= covered, "{} labels for {covered} test timestamps", raw.len());
            let gt: Vec<bool> = raw[..covered].iter().map(|&y| y > 0).collect();
            if gt.iter().any(|&y| y) {
                Some(gt)
            } else {
                eprintln!("warning: no anomalous test timestamps; skipping precision and recall");
                None
            }
        }
        None => None,
    };
    let cfg = HeadTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        ..HeadTrainConfig::projection(a.epochs, seed)
    };
    let (head, losses) = finetune_projection(&loaded.model, &train, &cfg)?;
    let det = detect(&loaded.model, &head, &test, rule, val.as_deref(), labels.as_deref())?;
    let mut header = vec!["time", "score", "raw", "flagged"];
    if labels.is_some() {
        header.push("label");
    }
    let rows = (0..det.scores.len()).map(|t| {
        let mut row = vec![
            t.to_string(),
            det.scores[t].to_string(),
            u8::from(det.raw[t]).to_string(),
            u8::from(det.predictions[t]).to_string(),
        ];
        if let Some(gt) = &labels {
            row.push(u8::from(gt[t]).to_string());
        }
        row
    });
    output::write_rows(&a.run.out.join("scores.csv"), &header, rows)?;
    output::write_rows(
        &a.run.out.join("head_losses.csv"),
        &["epoch", "loss"],
        losses.iter().enumerate().map(|(e, l)| vec![(e + 1).to_string(), l.to_string()]),
    )?;
    let flagged = det.predictions.iter().filter(|&&p| p).count();
    let mut report = json!({ "threshold": det.threshold, "flagged": flagged, "timestamps": det.scores.len() });
    println!("threshold = {} ({} of {} timestamps flagged)", det.threshold, flagged, det.scores.len());
    if let (Some(prf), Some(gt)) = (det.metrics, &labels) {
        report["precision"] = json!(prf.precision);
        report["recall"] = json!(prf.recall);
        report["f1"] = json!(prf.f1);
        println!("precision = {}\nrecall = {}\nf1 = {}", prf.precision, prf.recall, prf.f1);
        if let Ok(auc) = auroc(&det.scores, gt) {
            report["auroc"] = json!(auc);
            println!("auroc = {auc}");
        }
    }
    std::fs::write(a.run.out.join(output::METRICS_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut ckpt = loaded.ckpt;
    ckpt.set_head(head.to_record());
    ckpt.save(a.run.out.join(CHECKPOINT))?;
    Ok(())
}

/// Median completion of each window, or the window itself when complete.
fn complete(loaded: &Loaded, s: &Series, samples: usize, seed: u64, deterministic: bool) -> Result<Matrix> {
    if s.mask.as_slice().iter().all(|&m| m != 0.0) {
        return Ok(s.values.clone());
    }
    let cfg = SamplerConfig { samples, seed, terminal_noise: false, deterministic };
    Ok(generate(&loaded.model, &s.values, &s.mask, &s.feature_ids, &cfg)?.median)
}

fn labelled(path: Option<&PathBuf>, what: &str, windows: usize) -> Result<Option<Vec<usize>>> {
    let Some(p) = path else { return Ok(None) };
    let labels = load_labels(p)?;
    ensure!(labels.len() == windows, "{} {what} labels for {windows} windows", labels.len());
    Ok(Some(labels))
}

fn classify(a: &ClassifyArgs, seed: u64) -> Result<()> {
    ensure!(a.samples > 0, "--samples must be at least 1");
    let loaded = load_model(&a.checkpoint, &a.data)?;
    let m = &loaded.manifest;
    let norm = &loaded.norm;
    let raw_windows = |split| -> Result<Vec<Series>> {
        Ok(window(&norm.normalize_raw(&load_split(m, split)?), m.window, m.stride)?)
    };
    let train = raw_windows(Split::Train)?;
    let test = raw_windows(Split::Test)?;
    let train_y = labelled(m.train_labels.as_ref(), "train", train.len())?
        .context("classification needs train_labels in the dataset manifest")?;
    let test_y = labelled(m.test_labels.as_ref(), "test", test.len())?;
    let n_classes = train_y.iter().chain(test_y.iter().flatten()).max().map_or(0, |&y| y + 1).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut featurise = |set: &[Series]| -> Result<Vec<Matrix>> {
        set.iter()
            .map(|s| {
                let full = complete(&loaded, s, a.samples, rng.random(), a.run.deterministic)?;
                Ok(classifier_features(&loaded.model, &full, &s.feature_ids)?)
            })
            .collect()
    };
    let train_x = featurise(&train)?;
    let test_x = featurise(&test)?;
    let (k, l) = (train[0].n_features(), train[0].len());
    let layout = ClassifierLayout {
        hidden: a.hidden,
        dropout: a.dropout,
        ..ClassifierLayout::new(k, l, loaded.model.config.embedding_channels(), n_classes)
    };
    let cfg = HeadTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        ..HeadTrainConfig::classifier(seed)
    };
    let (head, losses) = finetune_classifier(&train_x, &train_y, layout, &cfg)?;
    let width = layout.input_width();
    let stacked = Matrix::from_vec(test_x.len(), width, test_x.iter().flat_map(|x| x.as_slice().to_vec()).collect())?;
    let probs = head.predict_proba(&stacked)?;
    let predicted: Vec<usize> = (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
        })
        .collect();
    let mut header = vec!["instance".to_string(), "predicted".into()];
    header.extend((0..n_classes).map(|c| format!("p{c}")));
    if test_y.is_some() {
        header.push("label".into());
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..probs.rows()).map(|r| {
        let mut row = vec![r.to_string(), predicted[r].to_string()];
        row.extend(probs.row(r).iter().map(f64::to_string));
        if let Some(y) = &test_y {
            row.push(y[r].to_string());
        }
        row
    });
    output::write_rows(&a.run.out.join("probabilities.csv"), &header, rows)?;
    output::write_rows(
        &a.run.out.join("head_losses.csv"),
        &["epoch", "loss"],
        losses.iter().enumerate().map(|(e, l)| vec![(e + 1).to_string(), l.to_string()]),
    )?;
    let mut report = json!({ "classes": n_classes, "test_windows": test.len() });
    if let Some(y) = &test_y {
        let acc = accuracy(&probs, y);
        report["accuracy"] = json!(acc);
        println!("accuracy = {acc} ({} windows)", y.len());
        if n_classes == 2 {
            let pos: Vec<f64> = (0..probs.rows()).map(|r| probs.get(r, 1)).collect();
            let gt: Vec<bool> = y.iter().map(|&c| c == 1).collect();
            if let Ok(auc) = auroc(&pos, &gt) {
                report["auroc"] = json!(auc);
                println!("auroc = {auc}");
            }
        }
    }
    std::fs::write(a.run.out.join(output::METRICS_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut ckpt = loaded.ckpt;
    ckpt.set_head(head.to_record());
    ckpt.save(a.run.out.join(CHECKPOINT))?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (records, with_samples) = output::read_generated(&a.predictions)?;
    if !with_samples {
        eprintln!("no {} found; reporting point metrics only", output::SAMPLES);
    }
    let report = output::generation_metrics(&records, a.gamma, with_samples)?;
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            output::write_report(dir, &report)
        }
        None => {
            print!("{}", output::format_report(&report));
            Ok(())
        }
    }
}
