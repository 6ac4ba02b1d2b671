//! Sequence-level layers: unidirectional LSTM over a window, bidirectional
//! LSTM with a per-step merge, and a dense output projection.
//!
//! Missing timesteps use skip-and-carry semantics: the recurrent state passes
//! from step `t-1` straight to step `t+1`, the step's output is marked
//! missing, and masked steps never contribute gradients. The output mask of
//! every layer equals its input mask.

use serde::{Deserialize, Serialize};

use crate::cells::{lstm_step, lstm_step_backward, LstmCellGrads, LstmCellParams, LstmState, StepCache};
use crate::linalg::{hadamard, matvec, matvec_t, Mat};

/// A window of per-step feature vectors with an observation mask
/// (`true` = observed). Masked steps carry sentinel zeros that are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    pub steps: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl SeqInput {
    pub fn observed(steps: Vec<Vec<f64>>) -> Self {
        let mask = vec![true; steps.len()];
        SeqInput { steps, mask }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Feature width of the observed steps.
    pub fn width(&self) -> usize {
        self.steps.first().map(|s| s.len()).unwrap_or(0)
    }

    /// Time-reversed copy (steps and mask both reversed).
    pub fn reversed(&self) -> Self {
        SeqInput {
            steps: self.steps.iter().rev().cloned().collect(),
            mask: self.mask.iter().rev().copied().collect(),
        }
    }
}

/// How the forward and backward hidden sequences of a bidirectional layer
/// are combined per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Concat,
    Sum,
    Average,
    Multiply,
}

impl MergeMode {
    pub fn output_width(&self, fwd_hidden: usize, bwd_hidden: usize) -> usize {
        match self {
            MergeMode::Concat => fwd_hidden + bwd_hidden,
            _ => {
                assert_eq!(
                    fwd_hidden, bwd_hidden,
                    "merge {self:?}: forward hidden {fwd_hidden} vs backward hidden {bwd_hidden}"
                );
                fwd_hidden
            }
        }
    }
}

impl std::str::FromStr for MergeMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "concat" => Ok(MergeMode::Concat),
            "sum" => Ok(MergeMode::Sum),
            "average" => Ok(MergeMode::Average),
            "multiply" => Ok(MergeMode::Multiply),
            other => Err(crate::Error::Config(format!(
                "unknown merge mode {other:?} (expected concat|sum|average|multiply)"
            ))),
        }
    }
}

impl std::fmt::Display for MergeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MergeMode::Concat => "concat",
            MergeMode::Sum => "sum",
            MergeMode::Average => "average",
            MergeMode::Multiply => "multiply",
        };
        f.write_str(s)
    }
}

/// Forward and backward cells of a bidirectional layer plus the merge choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdLayerParams {
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
    pub merge: MergeMode,
}

impl BdLayerParams {
    pub fn output_width(&self) -> usize {
        self.merge.output_width(self.fwd.hidden_size(), self.bwd.hidden_size())
    }
}

/// Dense projection `y = W·h + b` with identity output activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        DenseParams { w: Mat::zeros(output, input), b: vec![0.0; output] }
    }
}

/// Per-step caches of one unidirectional pass; `None` at masked steps.
#[derive(Debug, Clone)]
pub struct LstmLayerCache {
    pub steps: Vec<Option<StepCache>>,
}

/// Caches of one bidirectional pass. The backward-direction cache is stored
/// in reversed time (the order it was computed in); the merged hidden
/// sequences are stored in input time order for the multiply-merge backward.
#[derive(Debug, Clone)]
pub struct BdLayerCache {
    pub fwd: LstmLayerCache,
    pub bwd_rev: LstmLayerCache,
    pub fwd_h: Vec<Vec<f64>>,
    pub bwd_h: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

/// Runs one LSTM cell across a window with skip-and-carry masking.
pub fn lstm_layer_forward(cell: &LstmCellParams, input: &SeqInput) -> (SeqInput, LstmLayerCache) {
    let hidden = cell.hidden_size();
    let mut state = LstmState::zeros(hidden);
    let mut outputs = Vec::with_capacity(input.len());
    let mut caches = Vec::with_capacity(input.len());
    for (x, &observed) in input.steps.iter().zip(&input.mask) {
        if observed {
            let (next, cache) = lstm_step(cell, x, &state);
            outputs.push(next.h.clone());
            caches.push(Some(cache));
            state = next;
        } else {
            outputs.push(vec![0.0; hidden]);
            caches.push(None);
        }
    }
    (
        SeqInput { steps: outputs, mask: input.mask.clone() },
        LstmLayerCache { steps: caches },
    )
}

/// Combines the two directions' hidden vectors for one step.
pub fn merge_step(h_fwd: &[f64], h_bwd: &[f64], mode: MergeMode) -> Vec<f64> {
    match mode {
        MergeMode::Concat => {
            let mut out = h_fwd.to_vec();
            out.extend_from_slice(h_bwd);
            out
        }
        MergeMode::Sum => crate::linalg::add(h_fwd, h_bwd),
        MergeMode::Average => {
            assert_eq!(h_fwd.len(), h_bwd.len(), "merge average: lengths {} vs {}", h_fwd.len(), h_bwd.len());
            h_fwd.iter().zip(h_bwd).map(|(a, b)| 0.5 * (a + b)).collect()
        }
        MergeMode::Multiply => hadamard(h_fwd, h_bwd),
    }
}

/// Bidirectional pass: the forward cell reads the window in input order, the
/// backward cell reads it time-reversed (mask reversed too), and the two
/// hidden sequences are merged per observed step.
pub fn bdlstm_layer_forward(params: &BdLayerParams, input: &SeqInput) -> (SeqInput, BdLayerCache) {
    let (fwd_out, fwd_cache) = lstm_layer_forward(&params.fwd, input);
    let (bwd_out_rev, bwd_cache_rev) = lstm_layer_forward(&params.bwd, &input.reversed());
    let bwd_out = bwd_out_rev.reversed();

    let merged_width = params.output_width();
    let mut outputs = Vec::with_capacity(input.len());
    for t in 0..input.len() {
        if input.mask[t] {
            outputs.push(merge_step(&fwd_out.steps[t], &bwd_out.steps[t], params.merge));
        } else {
            outputs.push(vec![0.0; merged_width]);
        }
    }

    let cache = BdLayerCache {
        fwd: fwd_cache,
        bwd_rev: bwd_cache_rev,
        fwd_h: fwd_out.steps,
        bwd_h: bwd_out.steps,
        mask: input.mask.clone(),
    };
    (SeqInput { steps: outputs, mask: input.mask.clone() }, cache)
}

pub fn dense_forward(params: &DenseParams, h: &[f64]) -> Vec<f64> {
    let mut y = matvec(&params.w, h);
    crate::linalg::add_assign(&mut y, &params.b);
    y
}

/// Gradients of the dense projection plus the gradient w.r.t. its input.
pub fn dense_backward(params: &DenseParams, h: &[f64], dy: &[f64]) -> (DenseParams, Vec<f64>) {
    let mut grads = DenseParams::zeros(params.w.cols(), params.w.rows());
    grads.w.add_outer(dy, h);
    grads.b.copy_from_slice(dy);
    let dh = matvec_t(&params.w, dy);
    (grads, dh)
}

/// Time-unrolled backward pass of [`lstm_layer_forward`].
///
/// `upstream` holds per-step output gradients; entries at masked steps are
/// ignored (they must be zero by contract). Returns accumulated cell
/// gradients and per-step input gradients (zeros at masked steps).
pub fn lstm_layer_backward(
    cell: &LstmCellParams,
    cache: &LstmLayerCache,
    upstream: &[Vec<f64>],
) -> (LstmCellGrads, Vec<Vec<f64>>) {
    assert_eq!(
        cache.steps.len(),
        upstream.len(),
        "lstm_layer_backward: cache has {} steps, upstream has {}",
        cache.steps.len(),
        upstream.len()
    );
    let hidden = cell.hidden_size();
    let input = cell.input_size();
    let mut grads = LstmCellGrads::zeros(input, hidden);
    let mut input_grads = vec![vec![0.0; input]; upstream.len()];
    let mut dh_carry = vec![0.0; hidden];
    let mut dc_carry = vec![0.0; hidden];

    for t in (0..upstream.len()).rev() {
        match &cache.steps[t] {
            Some(step) => {
                let dh_total = crate::linalg::add(&upstream[t], &dh_carry);
                let (step_grads, dx, dh_prev, dc_prev) =
                    lstm_step_backward(cell, step, &dh_total, &dc_carry);
                grads.accumulate(&step_grads);
                input_grads[t] = dx;
                dh_carry = dh_prev;
                dc_carry = dc_prev;
            }
            None => {
                // Masked step: state gradients pass through untouched.
            }
        }
    }
    (grads, input_grads)
}

/// Backward pass of [`bdlstm_layer_forward`]: splits the merge gradient per
/// [`MergeMode`], runs each direction's unrolled backward, and sums the two
/// directions' input gradients.
pub fn bdlstm_layer_backward(
    params: &BdLayerParams,
    cache: &BdLayerCache,
    upstream: &[Vec<f64>],
) -> (LstmCellGrads, LstmCellGrads, Vec<Vec<f64>>) {
    let n = upstream.len();
    assert_eq!(cache.mask.len(), n, "bdlstm_layer_backward: cache has {} steps, upstream has {}", cache.mask.len(), n);
    let hf = params.fwd.hidden_size();
    let hb = params.bwd.hidden_size();

    let mut up_fwd = vec![vec![0.0; hf]; n];
    let mut up_bwd = vec![vec![0.0; hb]; n];
    for t in 0..n {
        if !cache.mask[t] {
            continue;
        }
        let dy = &upstream[t];
        match params.merge {
            MergeMode::Concat => {
                up_fwd[t].copy_from_slice(&dy[..hf]);
                up_bwd[t].copy_from_slice(&dy[hf..]);
            }
            MergeMode::Sum => {
                up_fwd[t].copy_from_slice(dy);
                up_bwd[t].copy_from_slice(dy);
            }
            MergeMode::Average => {
                for k in 0..hf {
                    up_fwd[t][k] = 0.5 * dy[k];
                    up_bwd[t][k] = 0.5 * dy[k];
                }
            }
            MergeMode::Multiply => {
                up_fwd[t] = hadamard(dy, &cache.bwd_h[t]);
                up_bwd[t] = hadamard(dy, &cache.fwd_h[t]);
            }
        }
    }

    let (fwd_grads, fwd_input_grads) = lstm_layer_backward(&params.fwd, &cache.fwd, &up_fwd);
    up_bwd.reverse();
    let (bwd_grads, bwd_input_grads_rev) = lstm_layer_backward(&params.bwd, &cache.bwd_rev, &up_bwd);

    let mut input_grads = fwd_input_grads;
    for (t, g) in bwd_input_grads_rev.into_iter().rev().enumerate() {
        crate::linalg::add_assign(&mut input_grads[t], &g);
    }
    (fwd_grads, bwd_grads, input_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cell(input: usize, hidden: usize, rng: &mut impl Rng) -> LstmCellParams {
        let mut p = LstmCellParams::zeros(input, hidden);
        for buf in p.buffers_mut() {
            for v in buf.iter_mut() {
                *v = rng.gen_range(-0.8..0.8);
            }
        }
        p
    }

    fn random_seq(n: usize, width: usize, rng: &mut impl Rng) -> SeqInput {
        SeqInput::observed(
            (0..n).map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        )
    }

    #[test]
    fn fully_masked_input_stays_silent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = random_cell(2, 3, &mut rng);
        let input = SeqInput { steps: vec![vec![0.0; 2]; 4], mask: vec![false; 4] };
        let (out, _) = lstm_layer_forward(&cell, &input);
        assert!(out.mask.iter().all(|&m| !m));
        assert!(out.steps.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_step_equals_lstm_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = random_cell(3, 2, &mut rng);
        let x = vec![0.4, -0.2, 0.9];
        let (out, _) = lstm_layer_forward(&cell, &SeqInput::observed(vec![x.clone()]));
        let (state, _) = lstm_step(&cell, &x, &LstmState::zeros(2));
        assert_eq!(out.steps[0], state.h);
    }

    /// Masked middle step: outputs at observed positions must equal running
    /// the layer on the compacted (missing-removed) sequence.
    #[test]
    fn mask_skip_equals_compacted_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = random_cell(2, 3, &mut rng);
        let a = vec![0.3, -0.7];
        let c = vec![-0.1, 0.8];
        let masked = SeqInput {
            steps: vec![a.clone(), vec![0.0; 2], c.clone()],
            mask: vec![true, false, true],
        };
        let compact = SeqInput::observed(vec![a, c]);
        let (out_masked, _) = lstm_layer_forward(&cell, &masked);
        let (out_compact, _) = lstm_layer_forward(&cell, &compact);
        assert_eq!(out_masked.steps[0], out_compact.steps[0]);
        assert_eq!(out_masked.steps[2], out_compact.steps[1]);
        assert!(!out_masked.mask[1]);
    }

    #[test]
    fn mask_skip_equivalence_random_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let cell = random_cell(2, 3, &mut rng);
            let n = rng.gen_range(2..9);
            let mut input = random_seq(n, 2, &mut rng);
            for t in 0..n {
                if rng.gen_bool(0.4) {
                    input.mask[t] = false;
                    input.steps[t] = vec![0.0; 2];
                }
            }
            let compact = SeqInput::observed(
                input
                    .steps
                    .iter()
                    .zip(&input.mask)
                    .filter(|(_, &m)| m)
                    .map(|(s, _)| s.clone())
                    .collect(),
            );
            let (out, _) = lstm_layer_forward(&cell, &input);
            let (out_compact, _) = lstm_layer_forward(&cell, &compact);
            let mut j = 0;
            for t in 0..n {
                if input.mask[t] {
                    for k in 0..3 {
                        assert!((out.steps[t][k] - out_compact.steps[j][k]).abs() < 1e-12);
                    }
                    j += 1;
                }
            }
            assert_eq!(out.mask, input.mask);
        }
    }

    #[test]
    fn merge_step_cases() {
        assert_eq!(merge_step(&[1.0, 2.0], &[3.0, 4.0], MergeMode::Sum), vec![4.0, 6.0]);
        assert_eq!(merge_step(&[1.0, 2.0], &[3.0, 4.0], MergeMode::Concat), vec![1.0, 2.0, 3.0, 4.0]);
        let v = [0.5, -2.5];
        assert_eq!(merge_step(&v, &[1.0, 1.0], MergeMode::Multiply), v.to_vec());
        assert_eq!(merge_step(&v, &v, MergeMode::Average), v.to_vec());
    }

    #[test]
    #[should_panic(expected = "merge average: lengths 2 vs 3")]
    fn merge_length_mismatch_panics() {
        merge_step(&[1.0, 2.0], &[1.0, 2.0, 3.0], MergeMode::Average);
    }

    #[test]
    fn bdlstm_zero_params_sum_merge() {
        let params = BdLayerParams {
            fwd: LstmCellParams::zeros(2, 3),
            bwd: LstmCellParams::zeros(2, 3),
            merge: MergeMode::Sum,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_seq(4, 2, &mut rng);
        let (out, _) = bdlstm_layer_forward(&params, &input);
        assert!(out.steps.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn palindrome_symmetry_with_tied_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cell = random_cell(2, 3, &mut rng);
        let params = BdLayerParams { fwd: cell.clone(), bwd: cell, merge: MergeMode::Sum };
        let a = vec![0.2, -0.4];
        let b = vec![0.9, 0.1];
        let input = SeqInput::observed(vec![a.clone(), b, a]);
        let (out, _) = bdlstm_layer_forward(&params, &input);
        for k in 0..3 {
            assert!((out.steps[0][k] - out.steps[2][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_first_half_is_unidirectional_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = BdLayerParams {
            fwd: random_cell(2, 3, &mut rng),
            bwd: random_cell(2, 3, &mut rng),
            merge: MergeMode::Concat,
        };
        let input = random_seq(5, 2, &mut rng);
        let (out, _) = bdlstm_layer_forward(&params, &input);
        let (uni, _) = lstm_layer_forward(&params.fwd, &input);
        for t in 0..5 {
            assert_eq!(out.steps[t].len(), 6);
            assert_eq!(&out.steps[t][..3], &uni.steps[t][..]);
        }
    }

    /// Reversal symmetry: swap the direction cells and time-reverse the
    /// input; for symmetric merges the output is the reversed output, for
    /// concat the halves also swap.
    #[test]
    fn bidirectional_reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mode in [MergeMode::Sum, MergeMode::Average, MergeMode::Multiply, MergeMode::Concat] {
            let params = BdLayerParams {
                fwd: random_cell(2, 3, &mut rng),
                bwd: random_cell(2, 3, &mut rng),
                merge: mode,
            };
            let swapped = BdLayerParams {
                fwd: params.bwd.clone(),
                bwd: params.fwd.clone(),
                merge: mode,
            };
            let input = random_seq(5, 2, &mut rng);
            let (out, _) = bdlstm_layer_forward(&params, &input);
            let (out_swapped, _) = bdlstm_layer_forward(&swapped, &input.reversed());
            let back = out_swapped.reversed();
            for t in 0..5 {
                match mode {
                    MergeMode::Concat => {
                        for k in 0..3 {
                            assert!((out.steps[t][k] - back.steps[t][3 + k]).abs() < 1e-12);
                            assert!((out.steps[t][3 + k] - back.steps[t][k]).abs() < 1e-12);
                        }
                    }
                    _ => {
                        for k in 0..3 {
                            assert!((out.steps[t][k] - back.steps[t][k]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dense_forward_cases() {
        let p = DenseParams { w: Mat::identity(3), b: vec![0.0; 3] };
        assert_eq!(dense_forward(&p, &[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        let p = DenseParams { w: Mat::zeros(2, 3), b: vec![0.5, -0.5] };
        assert_eq!(dense_forward(&p, &[9.0, 9.0, 9.0]), vec![0.5, -0.5]);
        let p = DenseParams { w: Mat::from_rows(&[&[1.0, 1.0]]), b: vec![0.5] };
        assert_eq!(dense_forward(&p, &[2.0, 3.0]), vec![5.5]);
    }

    fn layer_loss(cell: &LstmCellParams, input: &SeqInput, upstream: &[Vec<f64>]) -> f64 {
        let (out, _) = lstm_layer_forward(cell, input);
        out.steps
            .iter()
            .zip(upstream)
            .zip(&out.mask)
            .filter(|(_, &m)| m)
            .map(|((o, u), _)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [1usize, 3, 5] {
            let cell = random_cell(2, 4, &mut rng);
            let mut input = random_seq(n, 2, &mut rng);
            if n >= 3 {
                input.mask[1] = false;
                input.steps[1] = vec![0.0; 2];
            }
            let upstream: Vec<Vec<f64>> = (0..n)
                .map(|t| {
                    if input.mask[t] {
                        (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()
                    } else {
                        vec![0.0; 4]
                    }
                })
                .collect();
            let (_, cache) = lstm_layer_forward(&cell, &input);
            let (grads, input_grads) = lstm_layer_backward(&cell, &cache, &upstream);

            let mut max_rel = 0.0f64;
            for k in 0..cell.num_params() {
                let numeric = {
                    let mut plus = cell.clone();
                    bump(&mut plus, k, eps);
                    let mut minus = cell.clone();
                    bump(&mut minus, k, -eps);
                    (layer_loss(&plus, &input, &upstream) - layer_loss(&minus, &input, &upstream))
                        / (2.0 * eps)
                };
                let analytic = flat(&grads, k);
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-5, "n={n}: max relative error {max_rel}");

            // Input gradients via finite differences too.
            for t in 0..n {
                if !input.mask[t] {
                    assert!(input_grads[t].iter().all(|&v| v == 0.0));
                    continue;
                }
                for j in 0..2 {
                    let mut plus = input.clone();
                    plus.steps[t][j] += eps;
                    let mut minus = input.clone();
                    minus.steps[t][j] -= eps;
                    let numeric =
                        (layer_loss(&cell, &plus, &upstream) - layer_loss(&cell, &minus, &upstream))
                            / (2.0 * eps);
                    let analytic = input_grads[t][j];
                    let rel =
                        (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                    assert!(rel < 1e-5, "input grad t={t} j={j}: rel {rel}");
                }
            }
        }
    }

    fn bd_loss(params: &BdLayerParams, input: &SeqInput, upstream: &[Vec<f64>]) -> f64 {
        let (out, _) = bdlstm_layer_forward(params, input);
        out.steps
            .iter()
            .zip(upstream)
            .zip(&out.mask)
            .filter(|(_, &m)| m)
            .map(|((o, u), _)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn bd_layer_backward_matches_finite_differences_all_merges() {
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for mode in [MergeMode::Concat, MergeMode::Sum, MergeMode::Average, MergeMode::Multiply] {
            let params = BdLayerParams {
                fwd: random_cell(2, 3, &mut rng),
                bwd: random_cell(2, 3, &mut rng),
                merge: mode,
            };
            let n = 5;
            let mut input = random_seq(n, 2, &mut rng);
            input.mask[2] = false;
            input.steps[2] = vec![0.0; 2];
            let width = params.output_width();
            let upstream: Vec<Vec<f64>> = (0..n)
                .map(|t| {
                    if input.mask[t] {
                        (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()
                    } else {
                        vec![0.0; width]
                    }
                })
                .collect();
            let (_, cache) = bdlstm_layer_forward(&params, &input);
            let (fwd_grads, bwd_grads, _) = bdlstm_layer_backward(&params, &cache, &upstream);

            let mut max_rel = 0.0f64;
            let per_cell = params.fwd.num_params();
            for k in 0..2 * per_cell {
                let numeric = {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    if k < per_cell {
                        bump(&mut plus.fwd, k, eps);
                        bump(&mut minus.fwd, k, -eps);
                    } else {
                        bump(&mut plus.bwd, k - per_cell, eps);
                        bump(&mut minus.bwd, k - per_cell, -eps);
                    }
                    (bd_loss(&plus, &input, &upstream) - bd_loss(&minus, &input, &upstream))
                        / (2.0 * eps)
                };
                let analytic = if k < per_cell {
                    flat(&fwd_grads, k)
                } else {
                    flat(&bwd_grads, k - per_cell)
                };
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-5, "merge {mode}: max relative error {max_rel}");
        }
    }

    fn bump(p: &mut LstmCellParams, k: usize, delta: f64) {
        let mut idx = k;
        for buf in p.buffers_mut() {
            if idx < buf.len() {
                buf[idx] += delta;
                return;
            }
            idx -= buf.len();
        }
        panic!("bump: index {k} out of range");
    }

    fn flat(p: &LstmCellParams, k: usize) -> f64 {
        let mut idx = k;
        for buf in p.buffers() {
            if idx < buf.len() {
                return buf[idx];
            }
            idx -= buf.len();
        }
        panic!("flat: index {k} out of range");
    }
}
