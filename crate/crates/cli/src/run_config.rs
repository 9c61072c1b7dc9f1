//! Every tunable of a run as flat `key=value` text.

use crnn::cells::CellKind;
use crnn::corpus::{FilterOptions, SplitPlan};
use crnn::model::CrnnConfig;
use crnn::train::TrainPlan;
use crnn::{Error, Result};

pub const KEYS: [&str; 19] = [
    "filters",
    "hidden",
    "window",
    "pool",
    "length",
    "classes",
    "alpha",
    "cell",
    "seed",
    "steps",
    "batch_size",
    "eval_every",
    "clip",
    "lr",
    "micro_batch",
    "train_count",
    "test_count",
    "min_freq",
    "max_len",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `classes = 0` means "take the count from the corpus".
    pub model: CrnnConfig,
    pub plan: TrainPlan,
    /// Zero on both means a 90/10 split of the corpus.
    pub train_count: usize,
    pub test_count: usize,
    /// Zero disables rare-word filtering.
    pub min_freq: usize,
    /// Zero disables word truncation.
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CrnnConfig {
                classes: 0,
                ..CrnnConfig::full(2)
            },
            plan: TrainPlan::default(),
            train_count: 0,
            test_count: 0,
            min_freq: 0,
            max_len: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "filters" => self.model.filters = num(key, v)?,
            "hidden" => self.model.hidden = num(key, v)?,
            "window" => self.model.window = num(key, v)?,
            "pool" => self.model.pool = num(key, v)?,
            "length" => self.model.length = num(key, v)?,
            "classes" => self.model.classes = num(key, v)?,
            "alpha" => self.model.alpha = num(key, v)?,
            "cell" => self.model.cell = v.parse::<CellKind>()?,
            "seed" => {
                let seed = num(key, v)?;
                self.model.seed = seed;
                self.plan.seed = seed;
            }
            "steps" => self.plan.steps = num(key, v)?,
            "batch_size" => self.plan.batch_size = num(key, v)?,
            "eval_every" => self.plan.eval_every = num(key, v)?,
            "clip" => self.plan.clip = num(key, v)?,
            "lr" => self.plan.lr = num(key, v)?,
            "micro_batch" => self.plan.micro_batch = num(key, v)?,
            "train_count" => self.train_count = num(key, v)?,
            "test_count" => self.test_count = num(key, v)?,
            "min_freq" => self.min_freq = num(key, v)?,
            "max_len" => self.max_len = num(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies a whole file body on top of `self`: one pair per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.assign(line)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "filters" => self.model.filters.to_string(),
            "hidden" => self.model.hidden.to_string(),
            "window" => self.model.window.to_string(),
            "pool" => self.model.pool.to_string(),
            "length" => self.model.length.to_string(),
            "classes" => self.model.classes.to_string(),
            "alpha" => self.model.alpha.to_string(),
            "cell" => self.model.cell.to_string(),
            "seed" => self.model.seed.to_string(),
            "steps" => self.plan.steps.to_string(),
            "batch_size" => self.plan.batch_size.to_string(),
            "eval_every" => self.plan.eval_every.to_string(),
            "clip" => self.plan.clip.to_string(),
            "lr" => self.plan.lr.to_string(),
            "micro_batch" => self.plan.micro_batch.to_string(),
            "train_count" => self.train_count.to_string(),
            "test_count" => self.test_count.to_string(),
            "min_freq" => self.min_freq.to_string(),
            "max_len" => self.max_len.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    pub fn to_kv(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k))).collect()
    }

    /// Checks everything that does not depend on the corpus.
    pub fn validate(&self) -> Result<()> {
        let mut probe = self.model.clone();
        if probe.classes == 0 {
            probe.classes = 2;
        }
        probe.validate()?;
        self.plan.validate()
    }

    /// The model configuration for a corpus with `classes` labels.
    pub fn model_for(&self, classes: usize) -> Result<CrnnConfig> {
        if self.model.classes != 0 && self.model.classes != classes {
            return Err(Error::Config(format!(
                "config has classes={} but the corpus has {classes} classes",
                self.model.classes
            )));
        }
        let config = CrnnConfig {
            classes,
            ..self.model.clone()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn filter_options(&self) -> Option<FilterOptions> {
        (self.min_freq > 0 || self.max_len > 0).then(|| FilterOptions {
            min_freq: self.min_freq,
            max_len: (self.max_len > 0).then_some(self.max_len),
        })
    }

    pub fn split_plan(&self, size: usize) -> SplitPlan {
        let (train_count, test_count) = match (self.train_count, self.test_count) {
            (0, 0) => {
                let test = (size / 10).max(1);
                (size.saturating_sub(test), test)
            }
            (0, test) => (size.saturating_sub(test), test),
            (train, 0) => (train, size.saturating_sub(train)),
            pair => pair,
        };
        SplitPlan {
            train_count,
            test_count,
            batch_size: self.plan.batch_size,
            seed: self.model.seed,
        }
    }
}
