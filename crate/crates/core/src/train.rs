//! Mini-batch training, evaluation and the aggregation-weight sweep.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::corpus::LabeledCorpus;
use crate::encoding::{Alphabet, CharMatrix};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{loss_on_tape, predict_many, CrnnConfig, CrnnParams};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds the batch order.
    pub seed: u64,
    /// Evaluate on the held-out split every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Ceiling on the global gradient norm.
    pub clip: f64,
    pub lr: f64,
    /// Samples per forward/backward pass; gradients are accumulated up to `batch_size`.
    /// 0 processes the whole batch at once.
    pub micro_batch: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            steps: 1000,
            batch_size: 50,
            seed: 0,
            eval_every: 0,
            clip: 5.0,
            lr: 0.01,
            micro_batch: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }
}

/// Endless sequence of batches over `0..len`, reshuffled at every full pass.
///
/// A batch may straddle two passes.
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Shuffle);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchStream {
            order,
            pos: 0,
            batch_size,
            rng,
        }
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.order.is_empty() {
            return None;
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        Some(batch)
    }
}

/// Encodes every text of `corpus` at the configured length and checks labels against `classes`.
pub fn encode_corpus(config: &CrnnConfig, corpus: &LabeledCorpus) -> Result<(Vec<CharMatrix>, Vec<usize>)> {
    corpus.require_non_empty()?;
    if let Some(&bad) = corpus.targets().iter().find(|&&t| t >= config.classes) {
        return Err(Error::TargetOutOfRange {
            target: bad,
            classes: config.classes,
        });
    }
    let alphabet = Alphabet::standard();
    let inputs = corpus
        .texts()
        .iter()
        .map(|t| alphabet.encode(t, config.length))
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, corpus.targets().to_vec()))
}

/// Mean loss and summed gradients of one batch, processed `micro` samples at a time.
pub fn batch_gradients(
    config: &CrnnConfig,
    params: &CrnnParams,
    inputs: &[&CharMatrix],
    labels: &[usize],
    micro: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let total = inputs.len();
    let micro = if micro == 0 { total } else { micro };
    let mut grads: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.numel()]).collect();
    let mut loss = 0.0;
    for (xs, ys) in inputs.chunks(micro).zip(labels.chunks(micro)) {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, true);
        let mean = loss_on_tape(&mut tape, config, &model, xs, ys)?;
        // Weight each chunk's mean by its share so the sum is the batch mean.
        let weighted = tape.scale(mean, xs.len() as f64 / total as f64)?;
        tape.backward(weighted)?;
        loss += tape.value(weighted).item();
        for (acc, var) in grads.iter_mut().zip(model.vars()) {
            let g = tape.grad(var).expect("trainable leaf");
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok((loss, grads))
}

/// One optimizer step; returns the batch loss and the pre-clip gradient norm.
pub fn train_step(
    config: &CrnnConfig,
    params: &mut CrnnParams,
    adam: &mut AdamState,
    inputs: &[&CharMatrix],
    labels: &[usize],
    plan: &TrainPlan,
) -> Result<(f64, f64)> {
    let (loss, mut grads) = batch_gradients(config, params, inputs, labels, plan.micro_batch)?;
    let names = params.block_names();
    for (name, g) in names.iter().zip(&grads) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let norm = clip_global_norm(&mut grads, plan.clip);
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam.step(&mut params.blocks_mut(), &grad_refs, &names)?;
    Ok((loss, norm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub test_f1: Option<f64>,
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,loss,test_f1\n");
    for p in trace {
        let f1 = p.test_f1.map(|f| format!("{f:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.10},{}", p.step, p.loss, f1);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: CrnnParams,
    pub trace: Vec<TracePoint>,
    /// Held-out metrics after the last step, when a test split was given.
    pub test_metrics: Option<MetricsReport>,
}

/// Trains from the configuration's seeded initialization.
pub fn train(config: &CrnnConfig, train_set: &LabeledCorpus, test_set: Option<&LabeledCorpus>, plan: &TrainPlan) -> Result<TrainOutcome> {
    config.validate()?;
    plan.validate()?;
    let (inputs, labels) = encode_corpus(config, train_set)?;
    let test = test_set.map(|t| encode_corpus(config, t)).transpose()?;
    let mut params = CrnnParams::init(config)?;
    let adam_config = AdamConfig {
        lr: plan.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, &params.blocks())?;
    let mut trace = Vec::with_capacity(plan.steps);
    let mut batches = BatchStream::new(inputs.len(), plan.batch_size, plan.seed);
    let mut test_metrics = None;
    for step in 1..=plan.steps {
        let batch = batches.next().expect("non-empty corpus");
        let xs: Vec<&CharMatrix> = batch.iter().map(|&i| &inputs[i]).collect();
        let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let (loss, norm) = train_step(config, &mut params, &mut adam, &xs, &ys, plan)?;
        let due = step == plan.steps || (plan.eval_every > 0 && step % plan.eval_every == 0);
        let test_f1 = match (&test, due) {
            (Some((tx, ty)), true) => {
                let report = evaluate_encoded(config, &params, tx, ty)?;
                let f1 = report.macro_f1;
                test_metrics = Some(report);
                Some(f1)
            }
            _ => None,
        };
        log::info!("step {step} loss {loss:.5} grad norm {norm:.3}{}", test_f1.map(|f| format!(" test f1 {f:.4}")).unwrap_or_default());
        trace.push(TracePoint { step, loss, test_f1 });
    }
    Ok(TrainOutcome {
        params,
        trace,
        test_metrics,
    })
}

/// Chunk size used when scoring many texts.
const EVAL_CHUNK: usize = 64;

pub fn evaluate_encoded(config: &CrnnConfig, params: &CrnnParams, inputs: &[CharMatrix], targets: &[usize]) -> Result<MetricsReport> {
    let predicted: Vec<usize> = predict_many(config, params, inputs, EVAL_CHUNK)?.into_iter().map(|p| p.label).collect();
    MetricsReport::from_predictions(config.classes, targets, &predicted)
}

/// Predicts every record of `test` and reports macro metrics.
pub fn evaluate(config: &CrnnConfig, params: &CrnnParams, test: &LabeledCorpus) -> Result<MetricsReport> {
    let (inputs, targets) = encode_corpus(config, test)?;
    evaluate_encoded(config, params, &inputs, &targets)
}

/// Fraction of records whose prediction equals the label.
pub fn accuracy(config: &CrnnConfig, params: &CrnnParams, corpus: &LabeledCorpus) -> Result<f64> {
    let (inputs, targets) = encode_corpus(config, corpus)?;
    let preds = predict_many(config, params, &inputs, EVAL_CHUNK)?;
    let hits = preds.iter().zip(&targets).filter(|(p, &t)| p.label == t).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// `0.1, 0.2, ..., 0.9`
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Trains one model per alpha with shared seeds; rows come back sorted by F1, best first.
pub fn sweep_alpha(
    config: &CrnnConfig,
    train_set: &LabeledCorpus,
    test_set: &LabeledCorpus,
    alphas: &[f64],
    plan: &TrainPlan,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("alpha sweep needs at least one value".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let c = CrnnConfig { alpha, ..config.clone() };
        let outcome = train(&c, train_set, Some(test_set), plan)?;
        let m = outcome.test_metrics.expect("test split given");
        rows.push(SweepRow {
            alpha,
            precision: m.macro_precision,
            recall: m.macro_recall,
            f1: m.macro_f1,
        });
    }
    rows.sort_by(|a, b| b.f1.total_cmp(&a.f1));
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,precision,recall,f1\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.alpha, r.precision, r.recall, r.f1);
    }
    out
}
