//! The honest-but-curious server's toolkit. Three attacks on a shared
//! gradient, all batch-size-1:
//!
//! - [`infer_label`]: the output-bias gradient is `ŷ − y`, so the unique
//!   strictly negative entry names the true class;
//! - [`reconstruct_fc_input`]: each active row of the first linear layer's
//!   weight gradient is the input scaled by the matching bias gradient, so
//!   dividing recovers the input exactly;
//! - [`dlg_attack`]: iterative gradient matching — optimize a dummy input
//!   (and optionally a soft label) until its gradients reproduce the shared
//!   ones.
//!
//! [`SharingScenario`] controls which secrets of a key-locked victim the
//! attacker additionally holds: nothing, the key, the lock-layer gradients,
//! or both.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::keylock::Key;
use crate::layers::one_hot;
use crate::metrics::{score_unit_pair, MetricReport};
use crate::model::{
    forward_backward, forward_backward_soft, GradientBundle, Model,
};
use crate::rng;
use crate::tensor::Tensor;

/// How the dummy label is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Analytic sign rule on the output-bias gradient; falls back to
    /// `Optimized` when the rule is ambiguous.
    Inferred,
    /// Jointly optimize soft label logits with the input.
    Optimized,
    /// The attacker already knows the label.
    Given(usize),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub max_iters: usize,
    /// Optimizer trust scale (reciprocal damping). Halved when a candidate
    /// step increases the matching loss, grown when it decreases.
    pub step: f64,
    /// Central finite-difference step for the matching-loss derivatives.
    pub fd_step: f64,
    /// Stop once the matching loss falls to this level.
    pub tol: f64,
    pub seed: u64,
    pub label_mode: LabelMode,
    /// Min-max rescale the reconstruction onto the data range afterwards.
    /// Batch-1 normalization leaves the shared gradient exactly invariant
    /// under per-channel affine changes of the pre-norm activations (its
    /// backward is channel-mean-free), so gradient matching pins the input
    /// only up to a global scale and shift; an attacker facing a normalized
    /// victim resolves that family with the public pixel range.
    #[serde(default)]
    pub rescale_output: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            max_iters: 2000,
            step: 1e3,
            fd_step: 1e-4,
            tol: 1e-12,
            seed: 0,
            label_mode: LabelMode::Inferred,
            rescale_output: false,
        }
    }
}

/// Which pieces of a key-locked victim the attacker was handed (§ the
/// sharing-strategy ablation). `None` is the FedKL default: secrets stay
/// local.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingScenario {
    None,
    KeyOnly,
    LockGradOnly,
    Both,
}

/// What one attack run gets to see: the gradient targets it may match and
/// the key it may use to align the twin model.
#[derive(Debug, Clone)]
pub struct VisibleInfo {
    pub targets: GradientBundle,
    pub key: Option<Key>,
}

/// Resolve a scenario into the visible gradient set.
///
/// - `None`: shareable gradients only;
/// - `KeyOnly`: shareable gradients plus the key. The lock-layer gradients
///   need not be shared — they are rank-one in the key, so the attacker can
///   re-derive every one of them from quantities its aligned twin computes;
/// - `LockGradOnly`: shareable plus lock gradients, but no key;
/// - `Both`: everything the victim computed.
pub fn scenario_visible_grads(
    shareable: &GradientBundle,
    lock_grads: Option<&GradientBundle>,
    key: Option<&Key>,
    scenario: SharingScenario,
) -> Result<VisibleInfo> {
    let need_key = matches!(scenario, SharingScenario::KeyOnly | SharingScenario::Both);
    let need_lock = matches!(scenario, SharingScenario::LockGradOnly | SharingScenario::Both);
    if need_key && key.is_none() {
        return Err(Error::InvalidArgument {
            op: "scenario_visible_grads",
            msg: format!("scenario {scenario:?} requires a key but none was provided"),
        });
    }
    if need_lock && lock_grads.is_none() {
        return Err(Error::InvalidArgument {
            op: "scenario_visible_grads",
            msg: format!("scenario {scenario:?} requires lock gradients but none were provided"),
        });
    }
    let targets = if need_lock {
        GradientBundle::merge(shareable, lock_grads.unwrap())?
    } else {
        shareable.clone()
    };
    Ok(VisibleInfo {
        targets,
        key: if need_key { key.cloned() } else { None },
    })
}

/// Analytic label inference: index of the unique strictly negative entry of
/// the output-bias gradient (whose value is `ŷ_c − 1`). Zero or multiple
/// negative entries signal a batch larger than one or a defended gradient.
pub fn infer_label(grad_out_bias: &Tensor) -> Result<usize> {
    if grad_out_bias.ndim() != 1 {
        return Err(Error::InvalidArgument {
            op: "infer_label",
            msg: format!("expected a bias gradient vector, got {:?}", grad_out_bias.shape()),
        });
    }
    let negatives: Vec<usize> = grad_out_bias
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < 0.0)
        .map(|(i, _)| i)
        .collect();
    match negatives.as_slice() {
        [single] => Ok(*single),
        other => Err(Error::AmbiguousLabel {
            negatives: other.len(),
        }),
    }
}

/// Closed-form reconstruction of the first linear layer's input from its
/// gradients (batch 1): rows with `|grad_b[i]| > tau` each yield the exact
/// candidate `grad_W[i,:] / grad_b[i]`; the candidates are averaged.
pub fn reconstruct_fc_input(grad_w: &Tensor, grad_b: &Tensor, tau: f64) -> Result<Tensor> {
    if grad_w.ndim() != 2 || grad_b.ndim() != 1 || grad_w.shape()[0] != grad_b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "reconstruct_fc_input",
            lhs: grad_w.shape().to_vec(),
            rhs: grad_b.shape().to_vec(),
        });
    }
    let (rows, cols) = (grad_w.shape()[0], grad_w.shape()[1]);
    let mut acc = vec![0.0; cols];
    let mut active = 0usize;
    for i in 0..rows {
        let b = grad_b.get(i);
        if b.abs() > tau {
            for j in 0..cols {
                acc[j] += grad_w.get(i * cols + j) / b;
            }
            active += 1;
        }
    }
    if active == 0 {
        return Err(Error::NoActiveRow);
    }
    for v in &mut acc {
        *v /= active as f64;
    }
    Tensor::new(vec![cols], acc)
}

/// Default dead-row threshold: exact zeros come from ReLU masks, so anything
/// materially above rounding noise counts as active.
pub const ACTIVE_ROW_TAU: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Reconstructed input, in the model's batch-1 input shape.
    pub x_hat: Tensor,
    /// Label the attack settled on.
    pub label: usize,
    /// Matching loss after each optimizer iteration.
    pub trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    /// Scores against the ground truth, when the caller supplied it.
    pub metrics: Option<MetricReport>,
}

/// Everything the attacker brings to a run: its copy of the model
/// (architecture, the victim's shareable weights, and the publicly
/// distributed initial lock weights) plus the shared gradient material.
#[derive(Debug, Clone, Copy)]
pub struct AttackerKnowledge<'a> {
    pub model: &'a Model,
    pub shareable: &'a GradientBundle,
    pub lock_grads: Option<&'a GradientBundle>,
    pub key: Option<&'a Key>,
}

/// The dummy input the optimizer starts from: uniform in the data range.
pub fn initial_guess(model: &Model, seed: u64) -> Tensor {
    let mut shape = vec![1];
    shape.extend(model.spec().input_shape());
    rng::uniform_tensor(&mut rng::substream(seed, 0xD1A6), &shape, 0.0, 1.0)
}

/// Central finite-difference gradient of a scalar objective over a flat
/// state vector. Non-finite objective values are surfaced as errors.
pub fn fd_gradient(
    state: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = state.to_vec();
    let mut grad = vec![0.0; state.len()];
    for i in 0..state.len() {
        let v = state[i];
        probe[i] = v + h;
        let up = f(&probe)?;
        probe[i] = v - h;
        let down = f(&probe)?;
        probe[i] = v;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Iterative gradient-matching reconstruction. Minimizes the squared L2
/// distance between the twin model's gradients and every visible target,
/// over the dummy input (and soft label logits when the label is optimized).
/// The loss gradient comes from central finite differences; the step size
/// adapts — halve and retry on an increase, grow 1.1x on a decrease.
pub fn dlg_attack(
    knowledge: &AttackerKnowledge,
    scenario: SharingScenario,
    config: &AttackConfig,
    ground_truth: Option<&Tensor>,
) -> Result<AttackResult> {
    if config.max_iters == 0 || config.fd_step <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "dlg_attack",
            msg: "max_iters must be >= 1 and fd_step positive".to_string(),
        });
    }
    let model = knowledge.model;
    let visible = scenario_visible_grads(
        knowledge.shareable,
        knowledge.lock_grads,
        knowledge.key,
        scenario,
    )?;
    // without the true key the attacker still needs one to run its twin
    let twin_key: Option<Key> = match &visible.key {
        Some(k) => Some(k.clone()),
        None if model.has_keylock() => Some(Key::generate(
            rng::substream(config.seed, 0x6E55).next_u64(),
            model.spec().key_len(),
        )?),
        None => None,
    };

    let classes = model.classes();
    let label_mode = match config.label_mode {
        LabelMode::Inferred => {
            let bias_name = model.output_bias_name()?;
            let grad = visible.targets.get(&bias_name).ok_or_else(|| {
                Error::RegistryMismatch {
                    msg: format!("target bundle lacks {bias_name}"),
                }
            })?;
            match infer_label(grad) {
                Ok(label) => LabelMode::Given(label),
                Err(Error::AmbiguousLabel { .. }) => LabelMode::Optimized,
                Err(e) => return Err(e),
            }
        }
        other => other,
    };

    let x0 = initial_guess(model, config.seed);
    let input_len = x0.len();
    let input_shape = x0.shape().to_vec();
    let mut state: Vec<f64> = x0.data().to_vec();
    if label_mode == LabelMode::Optimized {
        state.extend(std::iter::repeat(0.0).take(classes));
    }

    // residual vector: twin gradients minus targets, in registry name order
    let eval_residual = |state: &[f64]| -> Result<Option<Vec<f64>>> {
        let x = match Tensor::new(input_shape.clone(), state[..input_len].to_vec()) {
            Ok(t) => t,
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let out = match label_mode {
            LabelMode::Given(label) => {
                let y = one_hot(&[label], classes)?;
                forward_backward(model, &x, &y, twin_key.as_ref())
            }
            LabelMode::Optimized => {
                let logits = match Tensor::new(vec![1, classes], state[input_len..].to_vec()) {
                    Ok(t) => t,
                    Err(Error::NonFinite { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let soft = softmax_row(&logits)?;
                forward_backward_soft(model, &x, &soft, twin_key.as_ref())
            }
            LabelMode::Inferred => unreachable!("resolved above"),
        };
        let out = match out {
            Ok(o) => o,
            // a dummy input that overflows is a rejected candidate, not a
            // failure of the attack
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut r = Vec::new();
        for (name, entry) in visible.targets.iter() {
            let got = out.grads.get(name).ok_or_else(|| Error::RegistryMismatch {
                msg: format!("twin bundle lacks target {name}"),
            })?;
            for (g, t) in got.data().iter().zip(entry.grad.data()) {
                r.push(g - t);
            }
        }
        Ok(Some(r))
    };
    let sq = |r: &[f64]| -> f64 { r.iter().map(|v| v * v).sum() };

    let mut residual = eval_residual(&state)?.ok_or(Error::NonFinite { op: "dlg_attack" })?;
    let mut current = sq(&residual);
    let initial_loss = current;
    let mut trace = Vec::new();
    let mut trust = config.step;
    let mut iterations = 0usize;
    let dim = state.len();

    // Damped Gauss-Newton on the residuals. The Jacobian comes from the
    // same central differences the loss gradient would (∇D = 2·Jᵀr); the
    // damping is the step controller — shrink the trust scale when a
    // candidate increases the loss, grow it when one decreases.
    if current > config.tol {
        'outer: for _ in 0..config.max_iters {
            iterations += 1;
            // J columns by central differences over the state coordinates
            let mut jac: Vec<Vec<f64>> = Vec::with_capacity(dim);
            let mut probe = state.clone();
            for i in 0..dim {
                let v = state[i];
                probe[i] = v + config.fd_step;
                let up = eval_residual(&probe)?;
                probe[i] = v - config.fd_step;
                let down = eval_residual(&probe)?;
                probe[i] = v;
                let col = match (up, down) {
                    (Some(u), Some(d)) => u
                        .iter()
                        .zip(&d)
                        .map(|(a, b)| (a - b) / (2.0 * config.fd_step))
                        .collect(),
                    _ => vec![0.0; residual.len()],
                };
                jac.push(col);
            }
            // normal equations: A = JᵀJ, g = Jᵀr
            let mut a = vec![0.0; dim * dim];
            let mut g = vec![0.0; dim];
            for i in 0..dim {
                g[i] = jac[i].iter().zip(&residual).map(|(j, r)| j * r).sum();
                for j in i..dim {
                    let v: f64 = jac[i].iter().zip(&jac[j]).map(|(a, b)| a * b).sum();
                    a[i * dim + j] = v;
                    a[j * dim + i] = v;
                }
            }
            if g.iter().all(|v| *v == 0.0) {
                trace.push(current);
                break;
            }
            let mut accepted = false;
            loop {
                let lambda = 1.0 / trust.max(1e-300);
                // damp the diagonal; the epsilon keeps dead coordinates solvable
                let mut damped = a.clone();
                for i in 0..dim {
                    damped[i * dim + i] += lambda * (a[i * dim + i] + 1e-12);
                }
                let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
                let delta = match solve_symmetric(&damped, &rhs) {
                    Some(d) => d,
                    None => {
                        trust *= 0.5;
                        if trust < 1e-12 {
                            break;
                        }
                        continue;
                    }
                };
                let candidate: Vec<f64> =
                    state.iter().zip(&delta).map(|(v, d)| v + d).collect();
                match eval_residual(&candidate)? {
                    Some(r) if sq(&r) < current => {
                        current = sq(&r);
                        residual = r;
                        state = candidate;
                        trust *= 2.0;
                        accepted = true;
                        break;
                    }
                    _ => {
                        trust *= 0.5;
                        if trust < 1e-12 {
                            break;
                        }
                    }
                }
            }
            trace.push(current);
            if !accepted || current <= config.tol {
                break 'outer;
            }
            // a run that stopped making headway will not recover; stop
            // instead of rebuilding Jacobians at a stall point
            const STALL_WINDOW: usize = 20;
            if trace.len() >= STALL_WINDOW {
                let before = trace[trace.len() - STALL_WINDOW];
                if (before - current) < before * 1e-4 {
                    break;
                }
            }
        }
    }

    let mut x_hat = Tensor::new(input_shape, state[..input_len].to_vec())?;
    if config.rescale_output {
        let lo = x_hat.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x_hat.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-9 {
            x_hat = x_hat.map("rescale_output", |v| (v - lo) / (hi - lo))?;
        }
    }
    let label = match label_mode {
        LabelMode::Given(label) => label,
        LabelMode::Optimized => {
            let logits = &state[input_len..];
            let mut best = 0;
            for j in 1..classes {
                if logits[j] > logits[best] {
                    best = j;
                }
            }
            best
        }
        LabelMode::Inferred => unreachable!(),
    };
    // score in the ground truth's (image) shape, whatever the model consumed
    let metrics = match ground_truth {
        Some(truth) => Some(score_unit_pair(
            truth,
            &x_hat.reshape(truth.shape().to_vec())?,
        )?),
        None => None,
    };
    Ok(AttackResult {
        x_hat,
        label,
        trace,
        initial_loss,
        final_loss: current,
        iterations,
        metrics,
    })
}

/// Gaussian elimination with partial pivoting for the (small, damped)
/// normal-equation systems. Returns `None` when the matrix is singular to
/// working precision.
fn solve_symmetric(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[row * n + col].abs() > m[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if m[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = rhs[col];
        for k in col + 1..n {
            acc -= m[col * n + k] * x[k];
        }
        x[col] = acc / m[col * n + col];
        if !x[col].is_finite() {
            return None;
        }
    }
    Some(x)
}

fn softmax_row(logits: &Tensor) -> Result<Tensor> {
    let n = logits.len();
    let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.data().iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    for v in &mut e {
        *v /= sum;
    }
    Tensor::new(vec![1, n], e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp, ModelSpec, NormKind, ParamTag};
    use crate::rng::{normal_tensor, seeded, uniform_tensor};

    #[test]
    fn infer_label_sign_rule() {
        let g = Tensor::new(vec![4], vec![0.2, -0.7, 0.25, 0.25]).unwrap();
        assert_eq!(infer_label(&g).unwrap(), 1);
    }

    #[test]
    fn infer_label_ambiguous() {
        let g = Tensor::new(vec![4], vec![0.1, 0.1, 0.1, 0.1]).unwrap();
        assert!(matches!(
            infer_label(&g),
            Err(Error::AmbiguousLabel { negatives: 0 })
        ));
        let g = Tensor::new(vec![4], vec![-0.1, -0.1, 0.1, 0.1]).unwrap();
        assert!(matches!(
            infer_label(&g),
            Err(Error::AmbiguousLabel { negatives: 2 })
        ));
    }

    #[test]
    fn infer_label_correct_on_random_nets() {
        // forward-backward oracle over random single-sample nets
        for trial in 0..200u64 {
            let classes = 4 + (trial % 7) as usize;
            let m = build_mlp(&[6, 5, classes], NormKind::None, 0, true, 500 + trial).unwrap();
            let x = normal_tensor(&mut seeded(700 + trial), &[1, 6], 1.0);
            let label = (trial as usize * 31) % classes;
            let y = one_hot(&[label], classes).unwrap();
            let out = forward_backward(&m, &x, &y, None).unwrap();
            let g = out.grads.get(&m.output_bias_name().unwrap()).unwrap();
            assert_eq!(infer_label(g).unwrap(), label, "trial {trial}");
        }
    }

    #[test]
    fn reconstruct_exact_outer_product() {
        let x = Tensor::new(vec![3], vec![0.4, -1.2, 2.0]).unwrap();
        let delta = Tensor::new(vec![2], vec![0.5, 0.0]).unwrap();
        let grad_w = delta.outer(&x).unwrap();
        let recon = reconstruct_fc_input(&grad_w, &delta, ACTIVE_ROW_TAU).unwrap();
        for j in 0..3 {
            assert!((recon.get(j) - x.get(j)).abs() <= 1e-15);
        }
    }

    #[test]
    fn reconstruct_rejects_dead_rows() {
        let grad_w = Tensor::zeros(&[4, 3]);
        let grad_b = Tensor::zeros(&[4]);
        assert!(matches!(
            reconstruct_fc_input(&grad_w, &grad_b, ACTIVE_ROW_TAU),
            Err(Error::NoActiveRow)
        ));
    }

    #[test]
    fn reconstruct_recovers_mlp_inputs_exactly() {
        // exact whenever at least one ReLU row is active; an all-dead draw
        // is the legitimate "no active row" outcome
        let mut exact = 0;
        for trial in 0..20u64 {
            let m = build_mlp(&[8, 6, 4], NormKind::None, 0, true, 900 + trial).unwrap();
            let x = uniform_tensor(&mut seeded(1000 + trial), &[1, 8], 0.0, 1.0);
            let y = one_hot(&[(trial % 4) as usize], 4).unwrap();
            let grads = forward_backward(&m, &x, &y, None).unwrap().grads;
            let (wn, bn) = m.first_linear_names().unwrap();
            match reconstruct_fc_input(
                grads.get(&wn).unwrap(),
                grads.get(&bn).unwrap(),
                ACTIVE_ROW_TAU,
            ) {
                Ok(recon) => {
                    for j in 0..8 {
                        assert!((recon.get(j) - x.get(j)).abs() <= 1e-8, "trial {trial}");
                    }
                    exact += 1;
                }
                Err(Error::NoActiveRow) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(exact >= 12, "only {exact} of 20 trials had active rows");
    }

    #[test]
    fn reconstruction_fails_behind_a_keylock_block() {
        // batch-1 statistics saturate the normalization, so the first-layer
        // gradient is exactly zero and carries nothing about the input
        let key = Key::generate(3, 16).unwrap();
        for trial in 0..20u64 {
            let m = build_mlp(&[8, 6, 4], NormKind::Keylock, 16, true, 1100 + trial).unwrap();
            let x = uniform_tensor(&mut seeded(1200 + trial), &[1, 8], 0.0, 1.0);
            let y = one_hot(&[(trial % 4) as usize], 4).unwrap();
            let grads = forward_backward(&m, &x, &y, Some(&key)).unwrap().grads;
            let (wn, bn) = m.first_linear_names().unwrap();
            let outcome = reconstruct_fc_input(
                grads.get(&wn).unwrap(),
                grads.get(&bn).unwrap(),
                ACTIVE_ROW_TAU,
            );
            match outcome {
                Err(Error::NoActiveRow) => {}
                Ok(recon) => {
                    let residual = recon
                        .reshape(vec![1, 8])
                        .unwrap()
                        .sub(&x)
                        .unwrap()
                        .max_abs();
                    assert!(residual >= 0.1, "trial {trial}: residual {residual}");
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    fn keylock_cnn_spec() -> ModelSpec {
        ModelSpec::TinyCnn {
            in_channels: 1,
            height: 6,
            width: 6,
            channels: 3,
            kernel: 3,
            classes: 3,
            norm: NormKind::Keylock,
            key_len: 16,
            lock_bias: true,
        }
    }

    #[test]
    fn scenarios_expose_the_right_information() {
        let m = crate::model::Model::build(&keylock_cnn_spec(), 7).unwrap();
        let key = Key::generate(11, 16).unwrap();
        let x = uniform_tensor(&mut seeded(13), &[1, 1, 6, 6], 0.0, 1.0);
        let y = one_hot(&[1], 3).unwrap();
        let grads = forward_backward(&m, &x, &y, Some(&key)).unwrap().grads;
        let (share, lock) = grads.partition();
        assert_eq!(lock.len(), 4);

        let none = scenario_visible_grads(&share, Some(&lock), Some(&key), SharingScenario::None)
            .unwrap();
        assert_eq!(none.targets.len(), grads.len() - 4);
        assert!(none.key.is_none());

        let key_only =
            scenario_visible_grads(&share, None, Some(&key), SharingScenario::KeyOnly).unwrap();
        assert_eq!(key_only.targets.len(), share.len());
        assert_eq!(key_only.key.as_ref().unwrap(), &key);

        let lock_only =
            scenario_visible_grads(&share, Some(&lock), None, SharingScenario::LockGradOnly)
                .unwrap();
        assert!(lock_only.targets.get("norm1.lock_w_gamma").is_some());
        assert!(lock_only.key.is_none());

        let both =
            scenario_visible_grads(&share, Some(&lock), Some(&key), SharingScenario::Both)
                .unwrap();
        assert_eq!(both.targets, grads); // the undefended information set
        assert!(both.key.is_some());

        assert!(scenario_visible_grads(&share, None, None, SharingScenario::KeyOnly).is_err());
        assert!(
            scenario_visible_grads(&share, None, None, SharingScenario::LockGradOnly).is_err()
        );
    }

    #[test]
    fn fixed_point_returns_immediately() {
        let m = build_mlp(&[8, 6, 3], NormKind::None, 0, true, 21).unwrap();
        let config = AttackConfig {
            seed: 5,
            ..AttackConfig::default()
        };
        let x0 = initial_guess(&m, config.seed);
        let y = one_hot(&[2], 3).unwrap();
        let grads = forward_backward(&m, &x0, &y, None).unwrap().grads;
        let (share, _) = grads.partition();
        let k = AttackerKnowledge {
            model: &m,
            shareable: &share,
            lock_grads: None,
            key: None,
        };
        let result = dlg_attack(&k, SharingScenario::None, &config, None).unwrap();
        assert_eq!(result.iterations, 0);
        assert_eq!(result.final_loss, 0.0);
        assert_eq!(result.label, 2);
        assert_eq!(result.x_hat, x0);
    }

    #[test]
    fn dlg_recovers_a_small_mlp_input() {
        let m = build_mlp(&[16, 8, 3], NormKind::None, 0, true, 31).unwrap();
        let truth = uniform_tensor(&mut seeded(37), &[1, 16], 0.0, 1.0);
        let y = one_hot(&[1], 3).unwrap();
        let grads = forward_backward(&m, &truth, &y, None).unwrap().grads;
        let (share, _) = grads.partition();
        let config = AttackConfig {
            max_iters: 600,
            seed: 41,
            ..AttackConfig::default()
        };
        let k = AttackerKnowledge {
            model: &m,
            shareable: &share,
            lock_grads: None,
            key: None,
        };
        let result = dlg_attack(&k, SharingScenario::None, &config, None).unwrap();
        assert_eq!(result.label, 1, "label inferred analytically");
        assert!(
            result.final_loss < result.initial_loss * 1e-6,
            "matching loss {} -> {}",
            result.initial_loss,
            result.final_loss
        );
        let err = result
            .x_hat
            .sub(&truth)
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / 16.0;
        assert!(err <= 1e-2, "reconstruction mse {err}");
        assert!(result.trace.len() <= config.max_iters);
    }

    #[test]
    fn dlg_errors_when_scenario_needs_missing_key() {
        let m = crate::model::Model::build(&keylock_cnn_spec(), 7).unwrap();
        let key = Key::generate(11, 16).unwrap();
        let x = uniform_tensor(&mut seeded(13), &[1, 1, 6, 6], 0.0, 1.0);
        let y = one_hot(&[1], 3).unwrap();
        let grads = forward_backward(&m, &x, &y, Some(&key)).unwrap().grads;
        let (share, _) = grads.partition();
        let k = AttackerKnowledge {
            model: &m,
            shareable: &share,
            lock_grads: None,
            key: None,
        };
        assert!(dlg_attack(&k, SharingScenario::KeyOnly, &AttackConfig::default(), None).is_err());
    }

    #[test]
    fn linear_solver_recovers_known_solution() {
        // A·x = b with known x, A symmetric positive definite
        let a = vec![4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let x_true = [1.0, -2.0, 0.5];
        let b: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| a[i * 3 + j] * x_true[j]).sum())
            .collect();
        let x = solve_symmetric(&a, &b).unwrap();
        for (got, want) in x.iter().zip(x_true) {
            assert!((got - want).abs() <= 1e-12);
        }
        // singular matrix is rejected
        let singular = vec![1.0, 2.0, 2.0, 4.0];
        assert!(solve_symmetric(&singular, &[1.0, 2.0]).is_none());
    }

    #[test]
    fn fd_matching_gradient_matches_analytic_double_backward() {
        // one-parameter linear regression: the model gradient is
        // g(x) = 2x(θx − y), so the matching loss D(x) = (g(x) − g*)² has
        // the hand-derivable derivative D'(x) = 2(g(x) − g*)(4θx − 2y).
        let theta = 1.3;
        let y_true = 0.7;
        let g_target = {
            let x = 0.9;
            2.0 * x * (theta * x - y_true)
        };
        let d = |state: &[f64]| -> Result<f64> {
            let x = state[0];
            let g = 2.0 * x * (theta * x - y_true);
            Ok((g - g_target) * (g - g_target))
        };
        for x in [0.1, 0.5, 1.4, -0.8] {
            let fd = fd_gradient(&[x], 1e-4, d).unwrap()[0];
            let g = 2.0 * x * (theta * x - y_true);
            let analytic = 2.0 * (g - g_target) * (4.0 * theta * x - 2.0 * y_true);
            let denom = analytic.abs().max(fd.abs()).max(1e-9);
            assert!(
                (fd - analytic).abs() / denom <= 1e-3,
                "x {x}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn optimized_label_mode_recovers_input_and_label() {
        let m = build_mlp(&[8, 6, 3], NormKind::None, 0, true, 51).unwrap();
        let truth = uniform_tensor(&mut seeded(53), &[1, 8], 0.0, 1.0);
        let y = one_hot(&[2], 3).unwrap();
        let grads = forward_backward(&m, &truth, &y, None).unwrap().grads;
        let (share, _) = grads.partition();
        let config = AttackConfig {
            max_iters: 800,
            seed: 59,
            label_mode: LabelMode::Optimized,
            ..AttackConfig::default()
        };
        let k = AttackerKnowledge {
            model: &m,
            shareable: &share,
            lock_grads: None,
            key: None,
        };
        let result = dlg_attack(&k, SharingScenario::None, &config, None).unwrap();
        assert_eq!(result.label, 2);
        // soft labels approach the one-hot only asymptotically, so this mode
        // converges slower than the analytic-label path
        assert!(result.final_loss < result.initial_loss * 1e-3);
    }

    #[test]
    fn target_bundles_keep_their_tags() {
        let m = crate::model::Model::build(&keylock_cnn_spec(), 7).unwrap();
        let key = Key::generate(11, 16).unwrap();
        let x = uniform_tensor(&mut seeded(13), &[1, 1, 6, 6], 0.0, 1.0);
        let y = one_hot(&[0], 3).unwrap();
        let grads = forward_backward(&m, &x, &y, Some(&key)).unwrap().grads;
        let (share, lock) = grads.partition();
        let both = scenario_visible_grads(&share, Some(&lock), Some(&key), SharingScenario::Both)
            .unwrap();
        assert!(both
            .targets
            .iter()
            .filter(|(n, _)| n.contains("lock"))
            .all(|(_, e)| e.tag == ParamTag::LockPrivate));
    }
}
