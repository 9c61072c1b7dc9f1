//! Recurrent cells checked against straight-line scalar re-implementations.

use crnn::autodiff::Tape;
use crnn::cells::{
    cell_step, gru_step, lstm_step, mgu_step, param_count, unroll, CellKind, CellParams, CellState, GruParams,
    LstmParams, MguParams,
};
use crnn::gradcheck::{grad_check, GradCheckOptions};
use crnn::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row `j` of `w` dotted with `x`.
fn dot_row(w: &Tensor, j: usize, x: &[f64]) -> f64 {
    let cols = w.dims()[1];
    (0..cols).map(|k| w.data()[j * cols + k] * x[k]).sum()
}

fn lstm_oracle(p: &LstmParams, x: &[f64], h: &[f64], m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let mut m_next = vec![0.0; n];
    let mut h_next = vec![0.0; n];
    for j in 0..n {
        let i = sig(dot_row(&p.w_i, j, x) + dot_row(&p.u_i, j, h) + p.v_i.data()[j] * m[j] + p.b_i.data()[j]);
        let f = sig(dot_row(&p.w_f, j, x) + dot_row(&p.u_f, j, h) + p.v_f.data()[j] * m[j] + p.b_f.data()[j]);
        let cand = (dot_row(&p.w_m, j, x) + dot_row(&p.u_m, j, h) + p.b_m.data()[j]).tanh();
        m_next[j] = f * m[j] + i * cand;
    }
    for j in 0..n {
        let o = sig(dot_row(&p.w_o, j, x) + dot_row(&p.u_o, j, h) + p.v_o.data()[j] * m_next[j] + p.b_o.data()[j]);
        h_next[j] = o * m_next[j].tanh();
    }
    (h_next, m_next)
}

fn gru_oracle(p: &GruParams, x: &[f64], prev: &[f64]) -> Vec<f64> {
    let n = prev.len();
    let z: Vec<f64> = (0..n).map(|j| sig(dot_row(&p.w_z, j, x) + dot_row(&p.u_z, j, prev) + p.b_z.data()[j])).collect();
    let r: Vec<f64> = (0..n).map(|j| sig(dot_row(&p.w_r, j, x) + dot_row(&p.u_r, j, prev) + p.b_r.data()[j])).collect();
    let reset: Vec<f64> = (0..n).map(|j| r[j] * prev[j]).collect();
    (0..n)
        .map(|j| {
            let cand = (dot_row(&p.w, j, x) + dot_row(&p.u, j, &reset) + p.b.data()[j]).tanh();
            (1.0 - z[j]) * prev[j] + z[j] * cand
        })
        .collect()
}

fn mgu_oracle(p: &MguParams, x: &[f64], prev: &[f64]) -> Vec<f64> {
    let n = prev.len();
    let f: Vec<f64> = (0..n).map(|j| sig(dot_row(&p.w_f, j, x) + dot_row(&p.u_f, j, prev) + p.b_f.data()[j])).collect();
    let gated: Vec<f64> = (0..n).map(|j| f[j] * prev[j]).collect();
    (0..n)
        .map(|j| {
            let cand = (dot_row(&p.w_h, j, x) + dot_row(&p.u_h, j, &gated) + p.b_h.data()[j]).tanh();
            (1.0 - f[j]) * prev[j] + f[j] * cand
        })
        .collect()
}

/// Every block, peepholes and biases included, uniform in `[-1, 1]`.
fn random_params(kind: CellKind, d: usize, h: usize, rng: &mut ChaCha8Rng) -> CellParams {
    let mut p = CellParams::zeros(kind, d, h).unwrap();
    for t in p.blocks_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    p
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn steps_match_scalar_oracles_on_100_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(2, &mut rng);
        let h = random_vec(2, &mut rng);
        let m = random_vec(2, &mut rng);

        let CellParams::Lstm(p) = random_params(CellKind::Lstm, 2, 2, &mut rng) else { unreachable!() };
        let got = lstm_step(&p, &x, &CellState { h: h.clone(), m: m.clone() }).unwrap();
        let (oh, om) = lstm_oracle(&p, &x, &h, &m);
        assert!(max_abs_diff(&got.h, &oh) < 1e-12, "lstm h, seed {seed}");
        assert!(max_abs_diff(&got.m, &om) < 1e-12, "lstm m, seed {seed}");
        assert!(got.h.iter().all(|v| v.abs() < 1.0));

        let CellParams::Gru(p) = random_params(CellKind::Gru, 2, 2, &mut rng) else { unreachable!() };
        let got = gru_step(&p, &x, &CellState { h: h.clone(), m: vec![] }).unwrap();
        assert!(max_abs_diff(&got.h, &gru_oracle(&p, &x, &h)) < 1e-12, "gru, seed {seed}");

        let CellParams::Mgu(p) = random_params(CellKind::Mgu, 2, 2, &mut rng) else { unreachable!() };
        let got = mgu_step(&p, &x, &CellState { h: h.clone(), m: vec![] }).unwrap();
        assert!(max_abs_diff(&got.h, &mgu_oracle(&p, &x, &h)) < 1e-12, "mgu, seed {seed}");
    }
}

#[test]
fn zero_params_and_state_give_zero_output() {
    for kind in CellKind::ALL {
        let p = CellParams::zeros(kind, 3, 2).unwrap();
        let next = cell_step(&p, &[0.5, -1.0, 2.0], &CellState::zeros(kind, 2)).unwrap();
        assert_eq!(next.h, vec![0.0, 0.0], "{kind}");
        if kind == CellKind::Lstm {
            assert_eq!(next.m, vec![0.0, 0.0]);
        }
    }
}

#[test]
fn lstm_memory_is_preserved_when_forget_open_and_input_closed() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let CellParams::Lstm(mut p) = random_params(CellKind::Lstm, 3, 4, &mut rng) else { unreachable!() };
    p.b_f = Tensor::full(&[4], 1e3).unwrap();
    p.b_i = Tensor::full(&[4], -1e3).unwrap();
    let m0 = vec![0.3, -0.7, 0.05, 0.9];
    let mut state = CellState { h: vec![0.0; 4], m: m0.clone() };
    for _ in 0..50 {
        let x = random_vec(3, &mut rng);
        state = lstm_step(&p, &x, &state).unwrap();
        assert_eq!(state.m, m0);
    }
}

#[test]
fn gru_degenerate_update_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let CellParams::Gru(mut p) = random_params(CellKind::Gru, 2, 3, &mut rng) else { unreachable!() };
    let prev = vec![0.25, -0.5, 0.75];
    let x = vec![0.4, -0.9];

    p.b_z = Tensor::full(&[3], -1e3).unwrap();
    let held = gru_step(&p, &x, &CellState { h: prev.clone(), m: vec![] }).unwrap();
    assert_eq!(held.h, prev);

    // z = 1 leaves only the candidate; compute the candidate with z's gate
    // removed from the oracle.
    p.b_z = Tensor::full(&[3], 1e3).unwrap();
    let moved = gru_step(&p, &x, &CellState { h: prev.clone(), m: vec![] }).unwrap();
    let r: Vec<f64> = (0..3).map(|j| sig(dot_row(&p.w_r, j, &x) + dot_row(&p.u_r, j, &prev) + p.b_r.data()[j])).collect();
    let reset: Vec<f64> = (0..3).map(|j| r[j] * prev[j]).collect();
    let cand: Vec<f64> = (0..3).map(|j| (dot_row(&p.w, j, &x) + dot_row(&p.u, j, &reset) + p.b.data()[j]).tanh()).collect();
    assert_eq!(moved.h, cand);
}

#[test]
fn gru_closed_update_gate_never_leaves_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = random_params(CellKind::Gru, 2, 3, &mut rng);
    if let CellParams::Gru(g) = &mut p {
        g.b_z = Tensor::full(&[3], -1e3).unwrap();
    }
    let seq: Vec<Vec<f64>> = (0..7).map(|_| random_vec(2, &mut rng)).collect();
    assert_eq!(unroll(&p, &seq).unwrap().h, vec![0.0; 3]);
}

#[test]
fn mgu_closed_forget_gate_holds_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let CellParams::Mgu(mut p) = random_params(CellKind::Mgu, 2, 2, &mut rng) else { unreachable!() };
    p.b_f = Tensor::full(&[2], -1e3).unwrap();
    let prev = vec![0.6, -0.1];
    let next = mgu_step(&p, &[1.0, 1.0], &CellState { h: prev.clone(), m: vec![] }).unwrap();
    assert_eq!(next.h, prev);
}

#[test]
fn unroll_of_one_is_a_single_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in CellKind::ALL {
        let p = random_params(kind, 3, 2, &mut rng);
        let x = random_vec(3, &mut rng);
        let a = unroll(&p, std::slice::from_ref(&x)).unwrap();
        let b = cell_step(&p, &x, &CellState::zeros(kind, 2)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn unroll_rejects_empty_and_ragged_sequences() {
    let p = CellParams::zeros(CellKind::Gru, 2, 2).unwrap();
    assert!(unroll(&p, &[]).is_err());
    assert!(unroll(&p, &[vec![1.0, 2.0], vec![1.0]]).is_err());
    assert!(cell_step(&p, &[1.0], &CellState::zeros(CellKind::Gru, 2)).is_err());
}

#[test]
fn unrolled_gradients_match_finite_differences() {
    for kind in CellKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = random_params(kind, 3, 2, &mut rng);
        for v in params.blocks() {
            assert!(v.is_finite());
        }
        let seq = Tensor::new(&[3, 3, 1], random_vec(9, &mut rng)).unwrap();
        let mut blocks: Vec<(String, Tensor)> = params
            .block_names()
            .iter()
            .zip(params.blocks())
            .map(|(n, t)| (n.to_string(), t.scale_for_test(0.1)))
            .collect();
        let report = grad_check(
            |tape: &mut Tape, vars| {
                let bound = crnn::cells::BoundCell {
                    kind,
                    hidden: 2,
                    vars: vars.to_vec(),
                };
                let x = tape.constant(seq.clone());
                let last = bound.unroll(tape, x)?;
                let sq = tape.hadamard(last.h, last.h)?;
                let s = tape.sum_all(sq)?;
                tape.scale(s, 0.5)
            },
            &mut blocks,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{kind}\n{report}");
    }
}

trait ScaleForTest {
    fn scale_for_test(&self, c: f64) -> Tensor;
}

impl ScaleForTest for Tensor {
    fn scale_for_test(&self, c: f64) -> Tensor {
        Tensor::new(self.dims(), self.data().iter().map(|x| x * c).collect()).unwrap()
    }
}

#[test]
fn param_count_examples() {
    assert_eq!(param_count(CellKind::Gru, 400, 400), 961_200);
    assert_eq!(param_count(CellKind::Lstm, 1, 1), 15);
    for kind in CellKind::ALL {
        let p = CellParams::zeros(kind, 5, 3).unwrap();
        assert_eq!(p.numel(), param_count(kind, 5, 3), "{kind}");
    }
}

proptest! {
    #[test]
    fn mgu_has_two_thirds_of_gru(d in 1usize..600, h in 1usize..600) {
        prop_assert_eq!(param_count(CellKind::Mgu, d, h) * 3, param_count(CellKind::Gru, d, h) * 2);
        prop_assert!(param_count(CellKind::Mgu, d, h) < param_count(CellKind::Gru, d, h));
        prop_assert!(param_count(CellKind::Gru, d, h) < param_count(CellKind::Lstm, d, h));
    }

    #[test]
    fn gru_output_is_a_convex_combination(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let CellParams::Gru(p) = random_params(CellKind::Gru, 2, 3, &mut rng) else { unreachable!() };
        let x = random_vec(2, &mut rng);
        let prev = random_vec(3, &mut rng);
        let next = gru_step(&p, &x, &CellState { h: prev.clone(), m: vec![] }).unwrap();
        let r: Vec<f64> = (0..3).map(|j| sig(dot_row(&p.w_r, j, &x) + dot_row(&p.u_r, j, &prev) + p.b_r.data()[j])).collect();
        let reset: Vec<f64> = (0..3).map(|j| r[j] * prev[j]).collect();
        for j in 0..3 {
            let cand = (dot_row(&p.w, j, &x) + dot_row(&p.u, j, &reset) + p.b.data()[j]).tanh();
            let (lo, hi) = (prev[j].min(cand), prev[j].max(cand));
            prop_assert!(next.h[j] >= lo - 1e-15 && next.h[j] <= hi + 1e-15);
        }
    }

    #[test]
    fn lstm_output_stays_in_open_unit_interval(seed in any::<u64>(), steps in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(CellKind::Lstm, 2, 3, &mut rng);
        let mut state = CellState::zeros(CellKind::Lstm, 3);
        for _ in 0..steps {
            state = cell_step(&p, &random_vec(2, &mut rng), &state).unwrap();
            prop_assert!(state.h.iter().all(|v| v.abs() < 1.0));
        }
    }
}
