//! Data preparation, the training loop, evaluation and hyper-graph dumps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RunConfig};
use crate::dataset::{Dataset, QaMode, SituationAnnotation};
use crate::error::{Error, Result};
use crate::hypergraph::{predict_sets, PredictedLabel};
use crate::metrics::{mean_average_precision, mean_duplicates, vqa_accuracy, ApVariant};
use crate::model::{compose_qa, ClipInput, Phase, QaModel, QuestionInput};
use crate::nn::Ctx;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::report::{CategoryAccuracy, DumpItem, DumpTriplet, GraphDump, GraphItemKind, LossPoint, MetricsReport};
use crate::scalar::Scalar;
use crate::synth::{derive_seed, generate_splits, resolve_features};
use crate::tape::{sum_all, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{PredicateTriplet, Tokenizer, Vocabularies};

/// One clip with resolved features and tokenized questions.
#[derive(Clone, Debug)]
pub struct PreparedClip<S> {
    pub features: Tensor<S>,
    pub annotation: SituationAnnotation,
    pub questions: Vec<QuestionInput>,
    pub categories: Vec<Option<String>>,
}

#[derive(Clone, Debug)]
pub struct PreparedData<S> {
    pub vocab: Vocabularies,
    pub clips: Vec<PreparedClip<S>>,
}

impl<S: Scalar> PreparedData<S> {
    pub fn num_questions(&self) -> usize {
        self.clips.iter().map(|c| c.questions.len()).sum()
    }

    pub fn clip(&self, clip_id: &str) -> Option<&PreparedClip<S>> {
        self.clips.iter().find(|c| c.annotation.clip_id == clip_id)
    }
}

pub fn prepare<S: Scalar>(ds: &Dataset, cfg: &ModelConfig, noise_sigma: f64) -> Result<PreparedData<S>> {
    ds.validate()?;
    let features = resolve_features::<S>(ds, cfg.cells(), cfg.feature_dim, noise_sigma)?;
    let tok = Tokenizer::new(ds.vocab.words.clone());
    let index = ds.clip_index();
    let mut clips: Vec<PreparedClip<S>> = ds
        .clips
        .iter()
        .zip(features)
        .map(|(c, features)| PreparedClip {
            features,
            annotation: c.annotation.clone(),
            questions: Vec::new(),
            categories: Vec::new(),
        })
        .collect();
    for q in &ds.qa {
        let i = index[q.clip_id.as_str()];
        let choices = match q.mode {
            QaMode::MultipleChoice => q.choices.as_deref(),
            QaMode::OpenEnded => None,
        };
        let tokens = compose_qa(&tok, &q.question, choices).map_err(|e| e.context(format!("clip {}", q.clip_id)))?;
        clips[i].questions.push(QuestionInput {
            tokens,
            answer: q.answer,
        });
        clips[i].categories.push(q.category.clone());
    }
    Ok(PreparedData {
        vocab: ds.vocab.clone(),
        clips,
    })
}

/// Train and validation datasets named by the run, or a fresh synthetic
/// pair; sets larger than the query counts are truncated.
pub fn load_data(run: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut val) = match (&run.data.train, &run.data.val) {
        (Some(t), Some(v)) => (Dataset::load(t)?, Dataset::load(v)?),
        (None, None) => generate_splits(run.seed, &run.data.synth, run.data.val_episodes)?,
        _ => return Err(Error::Config("data.train and data.val must be given together".into())),
    };
    for ds in [&mut train, &mut val] {
        ds.truncate_sets(run.model.action_queries, run.model.relation_queries);
    }
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_category: BTreeMap<String, CategoryAccuracy>,
    pub action_map: f64,
    pub relation_map: f64,
    /// Mean total loss per clip.
    pub loss: f64,
    /// Mean surplus same-class predictions per frame, both decoders.
    pub duplicates: f64,
}

impl Evaluation {
    /// The report for a run whose selected parameters scored `self`.
    pub fn report(&self, run: &RunConfig, loss_curve: Vec<LossPoint>) -> Result<MetricsReport> {
        let report = MetricsReport {
            overall_accuracy: self.accuracy,
            per_category: self.per_category.clone(),
            action_map: self.action_map,
            relation_map: self.relation_map,
            loss_curve,
            config: serde_json::from_str(&run.to_json()?)?,
            seed: run.seed,
        };
        report.validate()?;
        Ok(report)
    }
}

fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn set_map(pred: &[Vec<PredictedLabel>], truth: &[Vec<usize>], classes: usize, variant: ApVariant) -> Result<f64> {
    if truth.iter().all(Vec::is_empty) {
        return Ok(0.0);
    }
    let p: Vec<&[PredictedLabel]> = pred.iter().map(Vec::as_slice).collect();
    let t: Vec<&[usize]> = truth.iter().map(Vec::as_slice).collect();
    mean_average_precision(&p, &t, classes, variant)
}

/// Evaluation with every graph token visible. Set mAP is 0 for a decoder the
/// run does not use.
pub fn evaluate<S: Scalar>(model: &QaModel, store: &ParamStore<S>, data: &PreparedData<S>, variant: ApVariant) -> Result<Evaluation> {
    let cfg = &model.config;
    let mut outcomes: Vec<(Option<&str>, bool)> = Vec::with_capacity(data.num_questions());
    let mut act_pred = Vec::new();
    let mut act_truth = Vec::new();
    let mut rel_pred = Vec::new();
    let mut rel_truth = Vec::new();
    let mut loss = 0.0;
    for clip in &data.clips {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, store);
        let input = ClipInput {
            features: &clip.features,
            annotation: Some(&clip.annotation),
            questions: &clip.questions,
        };
        let out = model.forward(&ctx, &input, Phase::Eval, None)?;
        if let Some(t) = out.total {
            loss += t.item().as_f64();
        }
        for ((logits, q), cat) in out.answer_logits.iter().zip(&clip.questions).zip(&clip.categories) {
            let hit = logits.with_data(argmax) == q.answer;
            outcomes.push((cat.as_deref(), hit));
        }
        if let Some(l) = out.action_logits {
            act_pred.extend(predict_sets(&l.value(), cfg.action_queries)?);
            act_truth.extend(clip.annotation.actions.iter().cloned());
        }
        if let Some(l) = out.relation_logits {
            rel_pred.extend(predict_sets(&l.value(), cfg.relation_queries)?);
            rel_truth.extend(clip.annotation.relations.iter().cloned());
        }
    }
    let (accuracy, per_category) = vqa_accuracy(&outcomes)?;
    let all_frames: Vec<&[PredictedLabel]> = act_pred.iter().chain(&rel_pred).map(Vec::as_slice).collect();
    let frames = act_pred.len().max(rel_pred.len()).max(1) as f64;
    Ok(Evaluation {
        accuracy,
        per_category,
        action_map: set_map(&act_pred, &act_truth, cfg.num_actions, variant)?,
        relation_map: set_map(&rel_pred, &rel_truth, cfg.num_predicates, variant)?,
        loss: loss / data.clips.len().max(1) as f64,
        duplicates: mean_duplicates(&all_frames) * all_frames.len() as f64 / frames,
    })
}

pub struct TrainOutcome<S> {
    pub model: QaModel,
    pub store: ParamStore<S>,
    /// The run with vocabulary sizes filled in.
    pub run: RunConfig,
    pub report: MetricsReport,
    /// Validation metrics after each epoch (index 0 is the initialization).
    pub history: Vec<Evaluation>,
    pub best: Evaluation,
    pub steps: usize,
}

/// Trains on `train`, early-stopping on validation accuracy (ties go to the
/// lower validation loss), and returns the best parameters.
pub fn train<S: Scalar>(run: &RunConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome<S>> {
    run.validate()?;
    if train.vocab != val.vocab {
        return Err(Error::Config("train and validation vocabularies differ".into()));
    }
    let mut run = run.clone();
    run.model.resolve(train)?;
    run.model.resolve(val)?;
    let sigma = run.data.noise_sigma;
    let train_data = prepare::<S>(train, &run.model, sigma)?;
    let val_data = prepare::<S>(val, &run.model, sigma)?;
    if train_data.clips.is_empty() {
        return Err(Error::Config("training set has no clips".into()));
    }

    let (model, mut store) = QaModel::new::<S>(&run.model, run.flags, run.match_scope, derive_seed(run.seed, 10))?;
    let batch = run.batch_size;
    let per_epoch = train_data.clips.len().div_ceil(batch);
    let planned = run.max_steps.map_or(per_epoch * run.max_epochs, |m| m.min(per_epoch * run.max_epochs));
    run.optim.total_steps = planned.max(1);
    let mut adam = Adam::new(run.optim.clone(), &store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, 11));
    let dropout_seed = derive_seed(run.seed, 12);

    let initial = evaluate(&model, &store, &val_data, run.map_variant)?;
    let mut history = vec![initial.clone()];
    let mut best = initial;
    let mut best_params = store.snapshot();
    let mut stale = 0;
    let mut curve = Vec::with_capacity(planned);
    let mut order: Vec<usize> = (0..train_data.clips.len()).collect();
    let mut step = 0;

    'epochs: for _epoch in 0..run.max_epochs {
        if step >= planned {
            break;
        }
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(batch) {
            if step >= planned {
                break 'epochs;
            }
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store).with_dropout(run.model.dropout, derive_seed(dropout_seed, step as u64));
            let clips: Vec<&PreparedClip<S>> = chunk.iter().map(|&i| &train_data.clips[i]).collect();
            let Some((sum, n)) = batch_loss(&model, &ctx, &clips)? else {
                continue;
            };
            let loss = tape.adopt(sum.scale(S::lit(1.0 / n as f64)));
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Contract(format!("loss became {value} at step {}", step + 1)));
            }
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            adam.step(&mut store)?;
            step += 1;
            curve.push(LossPoint { step, loss: value });
        }
        let eval = evaluate(&model, &store, &val_data, run.map_variant)?;
        let better = eval.accuracy > best.accuracy || (eval.accuracy == best.accuracy && eval.loss < best.loss);
        history.push(eval.clone());
        if better {
            best = eval;
            best_params = store.snapshot();
            stale = 0;
        } else {
            stale += 1;
            if stale >= run.patience {
                break;
            }
        }
    }
    store.restore(&best_params);

    let report = best.report(&run, curve)?;
    Ok(TrainOutcome {
        model,
        store,
        run,
        report,
        history,
        best,
        steps: step,
    })
}

/// Sum of the training losses of `clips` and the number of clips that
/// contributed one. Clips are independent; only the sum couples them.
pub fn batch_loss<'t, S: Scalar>(
    model: &QaModel,
    ctx: &Ctx<'t, S>,
    clips: &[&PreparedClip<S>],
) -> Result<Option<(Var<'t, S>, usize)>> {
    let mut terms = Vec::with_capacity(clips.len());
    for clip in clips {
        let input = ClipInput {
            features: &clip.features,
            annotation: Some(&clip.annotation),
            questions: &clip.questions,
        };
        let out = model
            .forward(ctx, &input, Phase::Train, None)
            .map_err(|e| e.context(format!("clip {}", clip.annotation.clip_id)))?;
        terms.extend(out.total);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some((sum_all(&terms)?, terms.len())))
}

/// Predicted frame-wise sets of one clip, labelled through `vocab`.
pub fn dump_graph<S: Scalar>(model: &QaModel, store: &ParamStore<S>, clip: &PreparedClip<S>, vocab: &Vocabularies) -> Result<GraphDump> {
    if model.flags.gt_graph {
        return Err(Error::Config("ground-truth graph runs have no decoders to dump".into()));
    }
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, store);
    let input = ClipInput {
        features: &clip.features,
        annotation: None,
        questions: &[],
    };
    let cfg = &model.config;
    let out = model.forward(&ctx, &input, Phase::Eval, None)?;
    let mut frames: Vec<Vec<DumpItem>> = vec![Vec::new(); cfg.frames];
    if let Some(l) = out.action_logits {
        for (t, set) in predict_sets(&l.value(), cfg.action_queries)?.into_iter().enumerate() {
            for p in set {
                frames[t].push(DumpItem {
                    kind: GraphItemKind::Action,
                    label: vocab.actions.label(p.class).unwrap_or("?").to_string(),
                    triplet: None,
                    score: p.score,
                    raw_count: p.raw_count,
                });
            }
        }
    }
    if let Some(l) = out.relation_logits {
        for (t, set) in predict_sets(&l.value(), cfg.relation_queries)?.into_iter().enumerate() {
            for p in set {
                let label = vocab.predicates.label(p.class).unwrap_or("?").to_string();
                let triplet = PredicateTriplet::unflatten(&label).ok().map(|tr| DumpTriplet {
                    subject: tr.subject,
                    relation: tr.relation,
                    object: tr.object,
                });
                frames[t].push(DumpItem {
                    kind: GraphItemKind::Relation,
                    label,
                    triplet,
                    score: p.score,
                    raw_count: p.raw_count,
                });
            }
        }
    }
    Ok(GraphDump {
        clip_id: clip.annotation.clip_id.clone(),
        frames,
    })
}
