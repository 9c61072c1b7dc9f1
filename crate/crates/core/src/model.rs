//! The assembled classifier.
//!
//! ```text
//! chars [n, 70] ─ conv+ReLU ─ [T, F] ─┬─ max pool (P) ─ max over time ─ v [F] ─┐
//!                                     └─ recurrent cell over T frames ─ h [H] ──┴─ α·v + (1-α)·h ─ dense ─ softmax
//! ```
//!
//! Batches are processed column-wise: the feature map is `[T, F, B]`, the branch
//! encodings `[F, B]` / `[H, B]` and the logits `[C, B]`.

use std::collections::BTreeMap;
use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::cells::{BoundCell, CellKind, CellParams};
use crate::cnn::{conv_relu, pooled_features, ConvParams};
use crate::encoding::{batch_tensor, CharMatrix, ALPHABET_SIZE, DEFAULT_LENGTH};
use crate::error::{Error, LayerContext, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Aggregation weight given to the convolutional encoding by default.
pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct CrnnConfig {
    pub filters: usize,
    pub hidden: usize,
    pub window: usize,
    pub pool: usize,
    /// Padded character length `n`.
    pub length: usize,
    pub classes: usize,
    /// Weight of the convolutional encoding in the aggregation, in `[0, 1]`.
    pub alpha: f64,
    pub cell: CellKind,
    pub seed: u64,
}

impl CrnnConfig {
    /// 400 filters, hidden size 400, window 20, pool 2, length 500.
    pub fn full(classes: usize) -> Self {
        CrnnConfig {
            filters: 400,
            hidden: 400,
            window: 20,
            pool: 2,
            length: DEFAULT_LENGTH,
            classes,
            alpha: DEFAULT_ALPHA,
            cell: CellKind::Gru,
            seed: 0,
        }
    }

    /// Desk-sized configuration used by the gradient checks: n=40, window 5, F=H=8.
    pub fn small(classes: usize, cell: CellKind) -> Self {
        CrnnConfig {
            filters: 8,
            hidden: 8,
            window: 5,
            pool: 2,
            length: 40,
            classes,
            alpha: DEFAULT_ALPHA,
            cell,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.filters == 0 || self.hidden == 0 || self.window == 0 || self.pool == 0 {
            return fail("filters, hidden, window and pool must be positive".into());
        }
        if self.filters != self.hidden {
            return fail(format!(
                "filters ({}) must equal hidden ({}) for the aggregation layer",
                self.filters, self.hidden
            ));
        }
        if self.length <= self.window {
            return fail(format!("length ({}) must exceed window ({})", self.length, self.window));
        }
        if self.frames() < self.pool {
            return fail(format!("{} frames cannot fill a pooling window of {}", self.frames(), self.pool));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        Ok(())
    }

    /// Frames produced by the valid convolution, `n - window + 1`.
    pub fn frames(&self) -> usize {
        self.length + 1 - self.window
    }

    pub fn pooled_frames(&self) -> usize {
        self.frames() / self.pool
    }

    pub fn to_kv(&self) -> String {
        format!(
            "filters={}\nhidden={}\nwindow={}\npool={}\nlength={}\nclasses={}\nalpha={}\ncell={}\nseed={}\n",
            self.filters, self.hidden, self.window, self.pool, self.length, self.classes, self.alpha, self.cell, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| map.remove(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")));
        fn num<T: std::str::FromStr>(key: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let config = CrnnConfig {
            filters: num("filters", take("filters")?)?,
            hidden: num("hidden", take("hidden")?)?,
            window: num("window", take("window")?)?,
            pool: num("pool", take("pool")?)?,
            length: num("length", take("length")?)?,
            classes: num("classes", take("classes")?)?,
            alpha: num("alpha", take("alpha")?)?,
            cell: take("cell")?.parse()?,
            seed: num("seed", take("seed")?)?,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        Ok(config)
    }
}

impl fmt::Display for CrnnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} F={} H={} window={} pool={} n={} C={} alpha={}",
            self.cell, self.filters, self.hidden, self.window, self.pool, self.length, self.classes, self.alpha
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrnnParams {
    pub conv: ConvParams,
    pub cell: CellParams,
    /// `[C, H]`
    pub out_weight: Tensor,
    /// `[C]`
    pub out_bias: Tensor,
}

impl CrnnParams {
    /// Fresh parameters drawn from the configuration's seed.
    pub fn init(config: &CrnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::Init);
        let conv = ConvParams::init(config.filters, config.window, &mut rng)?;
        let cell = CellParams::init(config.cell, config.filters, config.hidden, &mut rng)?;
        let bound = (6.0 / (config.hidden + config.classes) as f64).sqrt();
        let out_weight = Tensor::uniform(&[config.classes, config.hidden], bound, &mut rng)?;
        let out_bias = Tensor::zeros(&[config.classes])?;
        Ok(CrnnParams {
            conv,
            cell,
            out_weight,
            out_bias,
        })
    }

    /// Block names in a stable order, e.g. `conv.kernel`, `gru.w_z`, `out.bias`.
    pub fn block_names(&self) -> Vec<String> {
        let cell = self.cell.kind();
        ["conv.kernel".to_string(), "conv.bias".to_string()]
            .into_iter()
            .chain(self.cell.block_names().iter().map(|n| format!("{cell}.{n}")))
            .chain(["out.weight".to_string(), "out.bias".to_string()])
            .collect()
    }

    pub fn blocks(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.conv.kernel, &self.conv.bias];
        v.extend(self.cell.blocks());
        v.push(&self.out_weight);
        v.push(&self.out_bias);
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.conv.kernel, &mut self.conv.bias];
        v.extend(self.cell.blocks_mut());
        v.push(&mut self.out_weight);
        v.push(&mut self.out_bias);
        v
    }

    pub fn named_blocks(&self) -> Vec<(String, Tensor)> {
        self.block_names().into_iter().zip(self.blocks().into_iter().cloned()).collect()
    }

    /// Inverse of [`CrnnParams::blocks`].
    pub fn from_blocks(kind: CellKind, blocks: Vec<Tensor>) -> Result<Self> {
        let n = blocks.len();
        if n < 5 {
            return Err(Error::InvalidArgument(format!("{n} parameter blocks is too few")));
        }
        let mut it = blocks.into_iter();
        let kernel = it.next().unwrap();
        let bias = it.next().unwrap();
        let mut rest: Vec<Tensor> = it.collect();
        let out_bias = rest.pop().unwrap();
        let out_weight = rest.pop().unwrap();
        Ok(CrnnParams {
            conv: ConvParams::new(kernel, bias)?,
            cell: CellParams::from_blocks(kind, rest)?,
            out_weight,
            out_bias,
        })
    }

    pub fn numel(&self) -> usize {
        self.blocks().iter().map(|t| t.numel()).sum()
    }

    /// The shape every block must have under `config`.
    pub fn expected_dims(config: &CrnnConfig) -> Result<Vec<Vec<usize>>> {
        let template = CellParams::zeros(config.cell, config.filters, config.hidden)?;
        let mut dims = vec![vec![config.filters, config.window, ALPHABET_SIZE], vec![config.filters]];
        dims.extend(template.blocks().iter().map(|t| t.dims().to_vec()));
        dims.push(vec![config.classes, config.hidden]);
        dims.push(vec![config.classes]);
        Ok(dims)
    }

    pub fn check_config(&self, config: &CrnnConfig) -> Result<()> {
        config.validate()?;
        if self.cell.kind() != config.cell {
            return Err(Error::Config(format!(
                "parameters are for a {} cell, config asks for {}",
                self.cell.kind(),
                config.cell
            )));
        }
        for ((name, t), want) in self.block_names().iter().zip(self.blocks()).zip(Self::expected_dims(config)?) {
            if t.dims() != want.as_slice() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: crate::tensor::Shape::new(&want)?,
                    found: t.shape().clone(),
                });
            }
        }
        Ok(())
    }

    /// Records every block on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let put = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let conv_kernel = put(tape, &self.conv.kernel);
        let conv_bias = put(tape, &self.conv.bias);
        let cell = self.cell.bind(tape, trainable);
        let out_weight = put(tape, &self.out_weight);
        let out_bias = put(tape, &self.out_bias);
        BoundModel {
            conv_kernel,
            conv_bias,
            cell,
            out_weight,
            out_bias,
        }
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub conv_kernel: Var,
    pub conv_bias: Var,
    pub cell: BoundCell,
    pub out_weight: Var,
    pub out_bias: Var,
}

impl BoundModel {
    /// Variables in [`CrnnParams::blocks`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.conv_kernel, self.conv_bias];
        v.extend(&self.cell.vars);
        v.push(self.out_weight);
        v.push(self.out_bias);
        v
    }

    /// Rebuilds the handles from variables in [`CrnnParams::blocks`] order.
    pub fn from_vars(kind: CellKind, hidden: usize, vars: &[Var]) -> Self {
        let n = vars.len();
        BoundModel {
            conv_kernel: vars[0],
            conv_bias: vars[1],
            cell: BoundCell {
                kind,
                hidden,
                vars: vars[2..n - 2].to_vec(),
            },
            out_weight: vars[n - 2],
            out_bias: vars[n - 1],
        }
    }
}

/// Intermediate nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[T, F, B]`
    pub feature_map: Var,
    /// `[F, B]`
    pub cnn: Var,
    /// `[H, B]`
    pub rnn: Var,
}

/// Stacks encoded texts into a `[B, n, 70]` constant after checking their length.
pub fn input_batch(tape: &mut Tape, config: &CrnnConfig, inputs: &[&CharMatrix]) -> Result<Var> {
    if let Some(bad) = inputs.iter().find(|m| m.len() != config.length) {
        return Err(Error::InvalidArgument(format!(
            "input has {} rows, model expects {}",
            bad.len(),
            config.length
        )))
        .layer("input");
    }
    let t = batch_tensor(inputs).layer("input")?;
    Ok(tape.constant(t))
}

/// Runs both branches on a `[B, n, 70]` input.
pub fn encode(tape: &mut Tape, config: &CrnnConfig, model: &BoundModel, input: Var) -> Result<Encoded> {
    let feature_map = conv_relu(tape, input, model.conv_kernel, model.conv_bias).layer("conv")?;
    let cnn = pooled_features(tape, feature_map, config.pool).layer("cnn-branch")?;
    let rnn = model.cell.unroll(tape, feature_map).layer("rnn-branch")?.h;
    Ok(Encoded { feature_map, cnn, rnn })
}

/// `alpha·cnn + (1 - alpha)·rnn`
pub fn aggregate_vars(tape: &mut Tape, cnn: Var, rnn: Var, alpha: f64) -> Result<Var> {
    let a = tape.scale(cnn, alpha)?;
    let b = tape.scale(rnn, 1.0 - alpha)?;
    tape.add(a, b)
}

/// Aggregation and output layer: `[F, B]`, `[H, B]` to `[C, B]` logits.
pub fn head(tape: &mut Tape, config: &CrnnConfig, model: &BoundModel, cnn: Var, rnn: Var) -> Result<Var> {
    let agg = aggregate_vars(tape, cnn, rnn, config.alpha).layer("aggregate")?;
    let z = tape.matmul(model.out_weight, agg).layer("output")?;
    tape.add_bias(z, model.out_bias).layer("output")
}

/// `[C, B]` logits for a batch.
pub fn logits_on_tape(tape: &mut Tape, config: &CrnnConfig, model: &BoundModel, inputs: &[&CharMatrix]) -> Result<Var> {
    let x = input_batch(tape, config, inputs)?;
    let enc = encode(tape, config, model, x)?;
    head(tape, config, model, enc.cnn, enc.rnn)
}

/// Mean cross-entropy node for a labelled batch.
pub fn loss_on_tape(
    tape: &mut Tape,
    config: &CrnnConfig,
    model: &BoundModel,
    inputs: &[&CharMatrix],
    labels: &[usize],
) -> Result<Var> {
    let logits = logits_on_tape(tape, config, model, inputs)?;
    Ok(tape.softmax_cross_entropy(logits, labels).layer("softmax")?.0)
}

/// Elementwise `alpha·v + (1 - alpha)·h`.
pub fn aggregate(v_cnn: &[f64], h_rnn: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if v_cnn.len() != h_rnn.len() {
        return Err(Error::InvalidArgument(format!(
            "aggregate needs equal lengths, got {} and {}",
            v_cnn.len(),
            h_rnn.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(v_cnn.iter().zip(h_rnn).map(|(v, h)| alpha * v + (1.0 - alpha) * h).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Logits of one text.
pub fn forward(config: &CrnnConfig, params: &CrnnParams, input: &CharMatrix) -> Result<Vec<f64>> {
    Ok(forward_batch(config, params, &[input])?.remove(0))
}

/// Logits for each text, one tape for the whole batch.
pub fn forward_batch(config: &CrnnConfig, params: &CrnnParams, inputs: &[&CharMatrix]) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let logits = logits_on_tape(&mut tape, config, &model, inputs)?;
    let z = tape.value(logits).data();
    let b = inputs.len();
    Ok((0..b).map(|s| (0..config.classes).map(|c| z[c * b + s]).collect()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

pub fn predict(config: &CrnnConfig, params: &CrnnParams, input: &CharMatrix) -> Result<Prediction> {
    let z = forward(config, params, input)?;
    Ok(Prediction {
        label: argmax(&z),
        probs: softmax(&z),
    })
}

/// Predictions for many texts, evaluated `chunk` at a time.
pub fn predict_many(config: &CrnnConfig, params: &CrnnParams, inputs: &[CharMatrix], chunk: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(inputs.len());
    for part in inputs.chunks(chunk.max(1)) {
        let refs: Vec<&CharMatrix> = part.iter().collect();
        for z in forward_batch(config, params, &refs)? {
            out.push(Prediction {
                label: argmax(&z),
                probs: softmax(&z),
            });
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over a labelled batch.
pub fn loss(config: &CrnnConfig, params: &CrnnParams, batch: &[(CharMatrix, usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss needs a non-empty batch".into()));
    }
    config.validate()?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let inputs: Vec<&CharMatrix> = batch.iter().map(|(m, _)| m).collect();
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let l = loss_on_tape(&mut tape, config, &model, &inputs, &labels)?;
    Ok(tape.value(l).item())
}

/// Layer-by-layer shapes of a single-text forward pass.
pub fn shape_trace(config: &CrnnConfig, params: &CrnnParams, input: &CharMatrix) -> Result<Vec<(&'static str, Vec<usize>)>> {
    config.validate()?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let x = input_batch(&mut tape, config, &[input])?;
    let feature_map = conv_relu(&mut tape, x, model.conv_kernel, model.conv_bias)?;
    let pooled = tape.max_pool(feature_map, config.pool)?;
    let cnn = tape.reduce(crate::autodiff::Reduction::Max, pooled, 0)?;
    let rnn = model.cell.unroll(&mut tape, feature_map)?.h;
    let logits = head(&mut tape, config, &model, cnn, rnn)?;
    // Drop the trailing batch axis of size one.
    let dims = |tape: &Tape, v: Var| {
        let d = tape.shape(v).dims();
        d[..d.len() - 1].to_vec()
    };
    Ok(vec![
        ("input", vec![input.len(), ALPHABET_SIZE]),
        ("conv", dims(&tape, feature_map)),
        ("pool", dims(&tape, pooled)),
        ("max_over_time", dims(&tape, cnn)),
        ("rnn_steps", vec![tape.shape(feature_map).dims()[0]]),
        ("rnn", dims(&tape, rnn)),
        ("logits", dims(&tape, logits)),
    ])
}
