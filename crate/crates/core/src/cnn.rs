//! Convolutional branch: valid temporal convolution with ReLU, non-overlapping
//! temporal max pooling and max-over-time reduction.
//!
//! Feature maps are time-major: `[T, F]` for one text, `[T, F, B]` for a batch.

use rand::Rng;

use crate::autodiff::{Reduction, Tape, Var};
use crate::encoding::{CharMatrix, ALPHABET_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[F, window, alphabet]`
    pub kernel: Tensor,
    /// `[F]`
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        if kernel.dims().len() != 3 || bias.dims() != [kernel.dims()[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv params",
                left: kernel.shape().clone(),
                right: bias.shape().clone(),
            });
        }
        Ok(ConvParams { kernel, bias })
    }

    /// Uniform weights in `[-r, r]` with `r = sqrt(6 / (window·70 + F))` and zero bias.
    pub fn init(filters: usize, window: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (6.0 / (window * ALPHABET_SIZE + filters) as f64).sqrt();
        Ok(ConvParams {
            kernel: Tensor::uniform(&[filters, window, ALPHABET_SIZE], bound, rng)?,
            bias: Tensor::zeros(&[filters])?,
        })
    }

    pub fn filters(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn window(&self) -> usize {
        self.kernel.dims()[1]
    }
}

/// `ReLU(conv1d(input) + bias)` on the tape.
pub fn conv_relu(tape: &mut Tape, input: Var, kernel: Var, bias: Var) -> Result<Var> {
    let window = tape.shape(kernel).dims().get(1).copied().unwrap_or(0);
    let dims = tape.shape(input).dims();
    let length = dims[dims.len().saturating_sub(2)];
    if length < window {
        return Err(Error::InvalidArgument(format!(
            "sequence length {length} is shorter than the convolution window {window}"
        )));
    }
    let c = tape.conv1d(input, kernel, bias)?;
    tape.relu(c)
}

/// Pooled then max-over-time reduced feature vector: `[T, F(, B)] -> [F(, B)]`.
pub fn pooled_features(tape: &mut Tape, map: Var, pool: usize) -> Result<Var> {
    let pooled = tape.max_pool(map, pool)?;
    tape.reduce(Reduction::Max, pooled, 0)
}

/// Valid convolution of one encoded text, `[n, 70] -> [n - window + 1, F]`.
pub fn conv1d_valid(input: &CharMatrix, params: &ConvParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.to_tensor());
    let k = tape.constant(params.kernel.clone());
    let b = tape.constant(params.bias.clone());
    let out = conv_relu(&mut tape, x, k, b)?;
    Ok(tape.value(out).clone())
}

/// Non-overlapping max pooling over frames, `[T, F] -> [T / window, F]`.
pub fn maxpool_temporal(map: &Tensor, window: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let out = tape.max_pool(m, window)?;
    Ok(tape.value(out).clone())
}

/// Per-channel maximum across all frames, `[T, F] -> [F]`.
pub fn max_over_time(map: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let out = tape.reduce(Reduction::Max, m, 0)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Alphabet;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_sizes_give_481_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ConvParams::init(4, 20, &mut rng).unwrap();
        let m = Alphabet::standard().encode("hello world", 500).unwrap();
        let out = conv1d_valid(&m, &params).unwrap();
        assert_eq!(out.dims(), &[481, 4]);
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let params = ConvParams::new(Tensor::zeros(&[3, 2, 70]).unwrap(), Tensor::zeros(&[3]).unwrap()).unwrap();
        let m = Alphabet::standard().encode("abcdef", 6).unwrap();
        let out = conv1d_valid(&m, &params).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn window_longer_than_input_is_an_error() {
        let params = ConvParams::new(Tensor::zeros(&[1, 5, 70]).unwrap(), Tensor::zeros(&[1]).unwrap()).unwrap();
        let m = Alphabet::standard().encode("ab", 4).unwrap();
        assert!(conv1d_valid(&m, &params).is_err());
    }

    /// Direct summation over a 2-symbol alphabet.
    #[test]
    fn toy_alphabet_matches_direct_summation() {
        let input = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let kernel = [[0.5, -1.0], [2.0, 0.25]];
        let bias = 0.1;
        let mut expected = Vec::new();
        for t in 0..2 {
            let mut s = bias;
            for j in 0..2 {
                for c in 0..2 {
                    s += input[t + j][c] * kernel[j][c];
                }
            }
            expected.push(f64::max(s, 0.0));
        }
        // t=0: 0.5 + 0.25 + 0.1, t=1: -1.0 + 2.0 + 0.1
        assert_eq!(expected, vec![0.85, 1.1]);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 2], input.concat()).unwrap());
        let k = tape.constant(Tensor::new(&[1, 2, 2], kernel.concat()).unwrap());
        let b = tape.constant(Tensor::vector(vec![bias]).unwrap());
        let out = conv_relu(&mut tape, x, k, b).unwrap();
        assert_eq!(tape.shape(out).dims(), &[2, 1]);
        for (got, want) in tape.value(out).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_examples() {
        let col = Tensor::new(&[6, 1], vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0]).unwrap();
        assert_eq!(maxpool_temporal(&col, 2).unwrap().data(), &[3.0, 4.0, 9.0]);
        assert_eq!(maxpool_temporal(&col, 1).unwrap(), col);
        let odd = Tensor::new(&[481, 1], vec![0.0; 481]).unwrap();
        assert_eq!(maxpool_temporal(&odd, 2).unwrap().dims(), &[240, 1]);
        let even = Tensor::new(&[480, 1], vec![0.0; 480]).unwrap();
        assert_eq!(maxpool_temporal(&even, 2).unwrap().dims(), &[240, 1]);
        assert!(maxpool_temporal(&col, 0).is_err());
    }

    #[test]
    fn max_over_time_examples() {
        let one = Tensor::new(&[1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(max_over_time(&one).unwrap().data(), one.data());
        let two = Tensor::from_rows(&[vec![1.0, 8.0], vec![5.0, 2.0]]).unwrap();
        assert_eq!(max_over_time(&two).unwrap().data(), &[5.0, 8.0]);
    }

    #[test]
    fn max_over_time_gradient_hits_argmax_frames_only() {
        let map = Tensor::from_rows(&[vec![1.0, 8.0], vec![5.0, 2.0], vec![0.5, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let m = tape.leaf(map.clone());
        let v = tape.reduce(Reduction::Max, m, 0).unwrap();
        let s = tape.sum_all(v).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

        let mut params = vec![("map".to_string(), map)];
        let report = grad_check(
            |tape, v| {
                let r = tape.reduce(Reduction::Max, v[0], 0)?;
                tape.sum_all(r)
            },
            &mut params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.skipped(), 0);
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = ConvParams::init(3, 4, &mut rng).unwrap();
        let bias = Tensor::uniform(&[3], 0.3, &mut rng).unwrap();
        let text = Alphabet::standard().encode("the quick brown fox jumps", 20).unwrap().to_tensor();
        let mut params = vec![("kernel".to_string(), conv.kernel), ("bias".to_string(), bias)];
        let report = grad_check(
            |tape, v| {
                let x = tape.constant(text.clone());
                let fm = conv_relu(tape, x, v[0], v[1])?;
                let pooled = pooled_features(tape, fm, 2)?;
                let sq = tape.hadamard(pooled, pooled)?;
                tape.sum_all(sq)
            },
            &mut params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.checked() > 0);
    }

    #[test]
    fn shifted_pattern_shifts_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ConvParams::init(2, 3, &mut rng).unwrap();
        let a = Alphabet::standard();
        let base = conv1d_valid(&a.encode("      abc          ", 19).unwrap(), &params).unwrap();
        let shifted = conv1d_valid(&a.encode("         abc       ", 19).unwrap(), &params).unwrap();
        for t in 4..10 {
            for f in 0..2 {
                assert_eq!(base.at(&[t, f]), shifted.at(&[t + 3, f]));
            }
        }
    }

    proptest! {
        #[test]
        fn max_pool_dominates_mean_pool(values in proptest::collection::vec(-5.0f64..5.0, 12), window in 1usize..4) {
            let map = Tensor::new(&[6, 2], values).unwrap();
            let max = maxpool_temporal(&map, window).unwrap();
            let frames = 6 / window;
            for t in 0..frames {
                for f in 0..2 {
                    let mean = (0..window).map(|k| map.at(&[t * window + k, f])).sum::<f64>() / window as f64;
                    prop_assert!(max.at(&[t, f]) >= mean - 1e-12);
                }
            }
        }
    }
}
