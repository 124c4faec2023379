use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::ExperimentConfig;
use super::eval::{evaluate, predict_image};
use super::model::{stream_rng, Network, SelectionPolicy, TrainedModel, ML_SHUFFLE_STREAM, SHUFFLE_STREAM};
use super::report::{tau_rank_correlation, CostReport, LossRecord, RunReport};
use crate::data::{Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::loss::{asymmetric_loss, selected_ce, total_loss};
use crate::tensor::{adam_step, AdamConfig, Gradients, ParamGroup, Real, Tape, TensorError};

/// Checks that `dataset` has the extents and label set `cfg` expects.
pub fn check_dataset(cfg: &ExperimentConfig, dataset: &Dataset, key: &str) -> Result<()> {
    let s = &cfg.data.synthetic;
    let got = (dataset.num_classes, dataset.channels, dataset.height, dataset.width);
    let want = (s.num_classes, s.channels, s.height, s.width);
    if got != want {
        return Err(Error::Config(format!(
            "{key}: dataset has (classes, channels, height, width) = {got:?}, configuration expects {want:?}"
        )));
    }
    Ok(())
}

fn adam_config(cfg: &ExperimentConfig) -> AdamConfig {
    let mut adam = AdamConfig {
        base_lr: cfg.train.base_lr,
        ..AdamConfig::default()
    };
    adam.group_lr_multipliers
        .insert(ParamGroup::MlHead, cfg.train.ml_head_lr_multiplier);
    adam
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(source @ TensorError::NonFinite { .. }) => Error::Diverged { step, source },
        other => other,
    }
}

struct SampleStep<T> {
    grads: Gradients<T>,
    total: f64,
    seg: f64,
    ml: f64,
    selected: usize,
}

/// Forward and backward pass of one training image for the segmenter.
fn segmenter_step<T: Real>(
    model: &TrainedModel<T>,
    sample: &SyntheticSample,
    presence: Option<&[f64]>,
    policy: SelectionPolicy,
    scale: f64,
    ml_evals: &mut u64,
) -> Result<SampleStep<T>> {
    let cfg = &model.config;
    let net = &model.segmenter;
    let mut tape = Tape::new();
    let tokens = net.embed(&mut tape, &sample.image)?;
    let (ml_out, ml_loss) = if model.multilabel.is_none() && net.ml_head.is_some() {
        let out = net.multilabel(&mut tape, tokens)?;
        *ml_evals += 1;
        let loss = asymmetric_loss(&mut tape, out.probs, &sample.multilabel, &cfg.asl)?;
        (Some(out), Some(loss))
    } else {
        (None, None)
    };
    let joint_probs: Option<Vec<f64>> = ml_out
        .as_ref()
        .map(|out| tape.value(out.probs).iter().map(|v| v.f64()).collect());
    let sel = policy.select(presence.or(joint_probs.as_deref()), &sample.multilabel)?;
    let shared = policy.is_complete() || !cfg.mode.rank_adaptive();
    let categories = model.categories(&mut tape, ml_out.as_ref());
    let cls = net.classify(&mut tape, tokens, categories, &sel, shared)?;
    let (seg, _) = selected_ce(&mut tape, cls.z, &sample.seg_map, &sel, cfg.ignore_index())?;
    let total = total_loss(&mut tape, seg, ml_loss, &cfg.loss)?;
    let record = (
        tape.item(total)?.f64(),
        tape.item(seg)?.f64(),
        match ml_loss {
            Some(l) => tape.item(l)?.f64(),
            None => 0.0,
        },
    );
    let grads = tape.backward_scaled(total, T::of(scale))?;
    Ok(SampleStep {
        grads,
        total: record.0,
        seg: record.1,
        ml: record.2,
        selected: sel.len(),
    })
}

fn multilabel_step<T: Real>(
    net: &Network<T>,
    cfg: &ExperimentConfig,
    sample: &SyntheticSample,
    scale: f64,
) -> Result<(Gradients<T>, f64)> {
    let mut tape = Tape::new();
    let tokens = net.embed(&mut tape, &sample.image)?;
    let out = net.multilabel(&mut tape, tokens)?;
    let loss = asymmetric_loss(&mut tape, out.probs, &sample.multilabel, &cfg.asl)?;
    let value = tape.item(loss)?.f64();
    Ok((tape.backward_scaled(loss, T::of(scale))?, value))
}

fn mean_record(index: usize, records: &[(f64, f64, f64)]) -> LossRecord {
    let n = records.len().max(1) as f64;
    LossRecord {
        index,
        total: records.iter().map(|r| r.0).sum::<f64>() / n,
        seg: records.iter().map(|r| r.1).sum::<f64>() / n,
        ml: records.iter().map(|r| r.2).sum::<f64>() / n,
    }
}

/// Trains the standalone multi-label model of the independent scheme.
fn train_multilabel<T: Real>(
    net: &mut Network<T>,
    cfg: &ExperimentConfig,
    train: &Dataset,
    ml_evals: &mut u64,
    on_epoch: &mut dyn FnMut(&str, &LossRecord),
) -> Result<Vec<LossRecord>> {
    let adam = adam_config(cfg);
    let mut rng = stream_rng(cfg.train.seed, ML_SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.train.independent_ml_epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.train.batch_size) {
            net.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (grads, value) = multilabel_step(net, cfg, &train.samples[i], scale).map_err(diverged(step))?;
                *ml_evals += 1;
                grads.accumulate_into(&mut net.store)?;
                seen.push((value, 0.0, value));
            }
            adam_step(&mut net.store, &adam)?;
            step += 1;
        }
        let record = mean_record(epoch, &seen);
        on_epoch("multilabel", &record);
        epochs.push(record);
    }
    Ok(epochs)
}

fn cost_report<T: Real>(model: &TrainedModel<T>, sample: &SyntheticSample) -> Result<CostReport> {
    let seg = &model.segmenter.store;
    let policy = SelectionPolicy::for_evaluation(&model.config);
    let (presence, ml_macs) = match &model.multilabel {
        Some(ml) => {
            let mut tape = Tape::new();
            let tokens = ml.embed(&mut tape, &sample.image)?;
            let out = ml.multilabel(&mut tape, tokens)?;
            let p: Vec<f64> = tape.value(out.probs).iter().map(|v| v.f64()).collect();
            (Some(p), tape.macs())
        }
        None => (None, 0),
    };
    let pred = predict_image(model, &sample.image, &sample.multilabel, policy, presence.as_deref())?;
    let ml_params = model.multilabel.as_ref().map_or(0, |m| m.store.num_elements());
    Ok(CostReport {
        params_total: seg.num_elements() + ml_params,
        params_backbone: seg.num_elements_in(ParamGroup::Backbone),
        params_ml_head: seg.num_elements_in(ParamGroup::MlHead),
        params_seg_head: seg.num_elements_in(ParamGroup::SegHead),
        params_multilabel_model: ml_params,
        macs_per_image: pred.macs + ml_macs,
    })
}

/// Trains under `cfg` and evaluates on `test`.
pub fn train<T: Real>(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<(TrainedModel<T>, RunReport)> {
    train_with_progress(cfg, train, test, &mut |_, _| {})
}

/// As [`train`], reporting every finished epoch as `(phase, losses)`.
pub fn train_with_progress<T: Real>(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(&str, &LossRecord),
) -> Result<(TrainedModel<T>, RunReport)> {
    let start = Instant::now();
    cfg.validate()?;
    check_dataset(cfg, train, "data.train_path")?;
    check_dataset(cfg, test, "data.test_path")?;
    let mut model = TrainedModel::<T>::init(cfg)?;
    let mut ml_evals = 0u64;

    let mut multilabel_epochs = Vec::new();
    let mut presence: Option<Vec<Vec<f64>>> = None;
    if let Some(ml) = model.multilabel.as_mut() {
        multilabel_epochs = train_multilabel(ml, cfg, train, &mut ml_evals, on_epoch)?;
        ml.store.set_frozen(true);
        // The frozen model's predictions never change, so score each image once.
        let mut scores = Vec::with_capacity(train.len());
        for s in &train.samples {
            scores.push(ml.predict_presence(&s.image)?.expect("multi-label network"));
            ml_evals += 1;
        }
        presence = Some(scores);
    }

    let adam = adam_config(cfg);
    let policy = SelectionPolicy::for_training(cfg);
    let mut rng = stream_rng(cfg.train.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut ranks_trained = 0;
    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.train.batch_size) {
            model.segmenter.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_records = Vec::with_capacity(batch.len());
            for &i in batch {
                let p = presence.as_ref().map(|v| v[i].as_slice());
                let out = segmenter_step(&model, &train.samples[i], p, policy, scale, &mut ml_evals)
                    .map_err(diverged(step))?;
                out.grads.accumulate_into(&mut model.segmenter.store)?;
                ranks_trained = ranks_trained.max(out.selected);
                batch_records.push((out.total, out.seg, out.ml));
            }
            adam_step(&mut model.segmenter.store, &adam)?;
            steps.push(mean_record(step, &batch_records));
            seen.extend(batch_records);
            step += 1;
        }
        let record = mean_record(epoch, &seen);
        on_epoch("segmenter", &record);
        epochs.push(record);
    }

    let metrics = evaluate(&model, test, SelectionPolicy::for_evaluation(cfg))?;
    if model.presence_network().is_some() {
        ml_evals += test.len() as u64;
    }
    let cost = match train.samples.first().or(test.samples.first()) {
        Some(s) => cost_report(&model, s)?,
        None => CostReport::default(),
    };
    let (inverse_tau, tau_shared) = model.inverse_tau();
    let tau_rank_spearman = if tau_shared {
        None
    } else {
        tau_rank_correlation(&inverse_tau, ranks_trained)
    };
    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.train.seed,
        steps,
        epochs,
        multilabel_epochs,
        metrics,
        inverse_tau,
        tau_shared,
        ranks_trained,
        tau_rank_spearman,
        ml_head_evaluations: ml_evals,
        cost,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
