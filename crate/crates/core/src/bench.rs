//! Per-step training time of each recurrent cell on an identical batch stream.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use crate::cells::{param_count, CellKind};
use crate::corpus::LabeledCorpus;
use crate::encoding::CharMatrix;
use crate::error::{Error, Result};
use crate::model::{CrnnConfig, CrnnParams};
use crate::optim::{AdamConfig, AdamState};
use crate::train::{encode_corpus, train_step, BatchStream, TrainPlan};

/// Fewest timed steps accepted.
pub const MIN_TIMED_STEPS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchPlan {
    pub steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            steps: MIN_TIMED_STEPS,
            warmup: 3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub cell: CellKind,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub std_ms: f64,
    pub steps: usize,
    /// Recurrent parameters at `D = F`, `H`.
    pub cell_params: usize,
    /// Hash of the configuration and every batch drawn, warmup included.
    pub fingerprint: u64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct Runner {
    cell: CellKind,
    config: CrnnConfig,
    params: CrnnParams,
    adam: AdamState,
    batches: BatchStream,
    hasher: DefaultHasher,
    times: Vec<f64>,
}

/// Times forward, backward and update of each cell, one step per cell in turn so
/// that slow drift of the machine affects every cell alike. Runs on the calling thread.
pub fn bench_cells(config: &CrnnConfig, corpus: &LabeledCorpus, cells: &[CellKind], plan: &BenchPlan) -> Result<Vec<BenchResult>> {
    if plan.steps < MIN_TIMED_STEPS {
        return Err(Error::Config(format!(
            "bench needs at least {MIN_TIMED_STEPS} timed steps, got {}",
            plan.steps
        )));
    }
    if cells.is_empty() || plan.batch_size == 0 {
        return Err(Error::Config("bench needs at least one cell and a positive batch size".into()));
    }
    let (inputs, labels) = encode_corpus(config, corpus)?;
    let train_plan = TrainPlan {
        batch_size: plan.batch_size,
        ..TrainPlan::default()
    };
    let mut runners = cells
        .iter()
        .map(|&cell| {
            let config = CrnnConfig { cell, ..config.clone() };
            let params = CrnnParams::init(&config)?;
            let adam = AdamState::new(AdamConfig::default(), &params.blocks())?;
            let mut hasher = DefaultHasher::new();
            let mut shared = config.clone();
            shared.cell = CellKind::Gru;
            shared.to_kv().hash(&mut hasher);
            Ok(Runner {
                cell,
                config,
                params,
                adam,
                batches: BatchStream::new(inputs.len(), plan.batch_size, plan.seed),
                hasher,
                times: Vec::with_capacity(plan.steps),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for step in 0..plan.warmup + plan.steps {
        for r in &mut runners {
            let batch = r.batches.next().expect("non-empty corpus");
            batch.hash(&mut r.hasher);
            let xs: Vec<&CharMatrix> = batch.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let start = Instant::now();
            train_step(&r.config, &mut r.params, &mut r.adam, &xs, &ys, &train_plan)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if step >= plan.warmup {
                r.times.push(ms);
            }
        }
    }
    Ok(runners
        .into_iter()
        .map(|r| {
            let (mean_ms, std_ms) = mean_std(&r.times);
            BenchResult {
                cell: r.cell,
                mean_ms,
                median_ms: median(&r.times),
                std_ms,
                steps: r.times.len(),
                cell_params: param_count(r.cell, config.filters, config.hidden),
                fingerprint: r.hasher.finish(),
            }
        })
        .collect())
}

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("cell,mean_ms,median_ms,std_ms,steps,cell_params\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{},{}",
            r.cell, r.mean_ms, r.median_ms, r.std_ms, r.steps, r.cell_params
        );
    }
    out
}
