//! Whole-model properties: aggregation extremes, prediction invariances, determinism.

use crnn::autodiff::Tape;
use crnn::cells::CellKind;
use crnn::encoding::{Alphabet, CharMatrix};
use crnn::model::{
    aggregate, argmax, encode, forward, head, input_batch, loss, loss_on_tape, predict, softmax, CrnnConfig, CrnnParams,
};
use proptest::prelude::*;

fn texts(config: &CrnnConfig) -> Vec<CharMatrix> {
    ["where is the eiffel tower?", "name 3 rivers in asia"]
        .iter()
        .map(|t| Alphabet::standard().encode(t, config.length).unwrap())
        .collect()
}

#[test]
fn aggregate_spec_examples() {
    let v = [0.4, -1.0, 2.0];
    let h = [1.0, 0.5, -0.5];
    let a = aggregate(&v, &h, 0.7).unwrap();
    for j in 0..3 {
        assert!((a[j] - (0.7 * v[j] + 0.3 * h[j])).abs() < 1e-15);
    }
    assert_eq!(aggregate(&v, &v, 0.5).unwrap(), v.to_vec());
    let basis = aggregate(&[1.0, 0.0], &[0.0, 1.0], 0.9).unwrap();
    assert!((basis[0] - 0.9).abs() < 1e-15 && (basis[1] - 0.1).abs() < 1e-15);
}

#[test]
fn predict_examples() {
    assert_eq!(argmax(&[2.0, 1.0, 0.0]), 0);
    assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
}

#[test]
fn alpha_one_ignores_the_cell() {
    for kind in CellKind::ALL {
        let mut config = CrnnConfig::small(3, kind);
        config.alpha = 1.0;
        let params = CrnnParams::init(&config).unwrap();
        let inputs = texts(&config);
        let base = forward(&config, &params, &inputs[0]).unwrap();
        let mut perturbed = params.clone();
        for t in perturbed.cell.blocks_mut() {
            for v in t.data_mut() {
                *v += 0.5;
            }
        }
        assert_eq!(forward(&config, &perturbed, &inputs[0]).unwrap(), base, "{kind}");

        let mut tape = Tape::new();
        let model = params.bind(&mut tape, true);
        let refs: Vec<&CharMatrix> = inputs.iter().collect();
        let l = loss_on_tape(&mut tape, &config, &model, &refs, &[0, 2]).unwrap();
        tape.backward(l).unwrap();
        for &v in &model.cell.vars {
            assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.0), "{kind}");
        }
    }
}

/// With alpha = 0 the loss does not depend on the pooled encoding: perturbing it
/// leaves the loss unchanged, while perturbing the recurrent encoding does not.
#[test]
fn alpha_zero_ignores_the_pooled_encoding() {
    let mut config = CrnnConfig::small(3, CellKind::Gru);
    config.alpha = 0.0;
    let params = CrnnParams::init(&config).unwrap();
    let inputs = texts(&config);
    let refs: Vec<&CharMatrix> = inputs.iter().collect();
    let eval = |dv: f64, dh: f64| -> f64 {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let x = input_batch(&mut tape, &config, &refs).unwrap();
        let enc = encode(&mut tape, &config, &model, x).unwrap();
        let shift = |tape: &mut Tape, v, d: f64| {
            let dims = tape.shape(v).dims().to_vec();
            let c = tape.constant(crnn::tensor::Tensor::full(&dims, d).unwrap());
            tape.add(v, c).unwrap()
        };
        let cnn = shift(&mut tape, enc.cnn, dv);
        let rnn = shift(&mut tape, enc.rnn, dh);
        let logits = head(&mut tape, &config, &model, cnn, rnn).unwrap();
        let (l, _) = tape.softmax_cross_entropy(logits, &[1, 2]).unwrap();
        tape.value(l).item()
    };
    let base = eval(0.0, 0.0);
    let h = 1e-4;
    assert_eq!((eval(h, 0.0) - eval(-h, 0.0)) / (2.0 * h), 0.0);
    assert!(((eval(0.0, h) - eval(0.0, -h)) / (2.0 * h)).abs() > 1e-6);
    assert_eq!(eval(0.0, 0.0), base);

    let mut tape = Tape::new();
    let model = params.bind(&mut tape, true);
    let l = loss_on_tape(&mut tape, &config, &model, &refs, &[1, 2]).unwrap();
    tape.backward(l).unwrap();
    let cell_grad: f64 = model.cell.vars.iter().map(|&v| tape.grad(v).unwrap().iter().map(|g| g.abs()).sum::<f64>()).sum();
    assert!(cell_grad > 0.0);
}

#[test]
fn two_sample_loss_is_the_mean() {
    let config = CrnnConfig::small(3, CellKind::Mgu);
    let params = CrnnParams::init(&config).unwrap();
    let inputs = texts(&config);
    let a = loss(&config, &params, &[(inputs[0].clone(), 1)]).unwrap();
    let b = loss(&config, &params, &[(inputs[1].clone(), 2)]).unwrap();
    let both = loss(&config, &params, &[(inputs[0].clone(), 1), (inputs[1].clone(), 2)]).unwrap();
    assert!((both - (a + b) / 2.0).abs() < 1e-12);
    assert!(loss(&config, &params, &[]).is_err());
    assert!(loss(&config, &params, &[(inputs[0].clone(), 3)]).is_err());
}

#[test]
fn confident_correct_prediction_has_zero_loss() {
    let config = CrnnConfig::small(2, CellKind::Gru);
    let mut params = CrnnParams::init(&config).unwrap();
    params.out_weight.data_mut().fill(0.0);
    params.out_bias.data_mut().copy_from_slice(&[1e3, -1e3]);
    let x = texts(&config).remove(0);
    assert_eq!(loss(&config, &params, &[(x.clone(), 0)]).unwrap(), 0.0);
    assert_eq!(predict(&config, &params, &x).unwrap().probs, vec![1.0, 0.0]);
}

#[test]
fn fixed_seed_gives_identical_logits() {
    for kind in CellKind::ALL {
        let mut config = CrnnConfig::small(4, kind);
        config.seed = 42;
        let x = texts(&config).remove(1);
        let a = forward(&config, &CrnnParams::init(&config).unwrap(), &x).unwrap();
        let b = forward(&config, &CrnnParams::init(&config).unwrap(), &x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

proptest! {
    #[test]
    fn argmax_ignores_shift_and_scale(
        logits in proptest::collection::vec(-10.0f64..10.0, 2..8),
        shift in -100.0f64..100.0,
        scale in 0.01f64..100.0,
    ) {
        let base = argmax(&softmax(&logits));
        let moved: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let scaled: Vec<f64> = logits.iter().map(|z| z * scale).collect();
        prop_assert_eq!(argmax(&logits), base);
        prop_assert_eq!(argmax(&scaled), argmax(&logits));
        // Shifting can perturb the last bit; compare only when the lead is clear.
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] > 1e-9 {
            prop_assert_eq!(argmax(&moved), base);
        }
    }
}
