//! Loss, exact reverse-mode gradients through time, and stochastic gradient
//! descent.
//!
//! A [`Tape`] records one forward pass: every gate activation of every cell
//! at every frame plus the dropout masks that were sampled. [`backward`]
//! walks it in reverse and returns [`Gradients`] shaped exactly like the
//! model. The sequence loss is the sum of per-frame cross entropies over
//! labeled frames; a mini-batch loss is the mean of its sequence losses.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::error::{Error, Result};
use crate::model::{
    trace_sequence, Architecture, CellKind, CellParams, CellTrace, Direction, GateParams, Masks, Model, Prediction,
    RunMode, TensorRef,
};
use crate::numeric::{Matrix, Rng, Vector};

/// Lower clamp for the probability inside the log.
pub const LOG_FLOOR: f64 = 1e-300;

/// One labeled sequence as seen by the trainer.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub inputs: &'a Matrix,
    pub labels: &'a [usize],
    pub mask: &'a [bool],
}

impl Example<'_> {
    fn validate(&self, n_classes: usize) -> Result<()> {
        let t = self.inputs.rows();
        if self.labels.len() != t || self.mask.len() != t {
            return Err(Error::shape(
                "Example",
                format!("{t} frames"),
                format!("{} labels, {} mask flags", self.labels.len(), self.mask.len()),
            ));
        }
        if let Some((f, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|&(f, &l)| self.mask[f] && l >= n_classes)
        {
            return Err(Error::contract(format!("label {l} at frame {f} is out of range for {n_classes} classes")));
        }
        Ok(())
    }
}

/// Cross entropy of one frame, `-Σ_k y_k log ŷ_k`, for a one-hot `y_true`.
pub fn step_loss(y_true: &Vector, y_hat: &Vector) -> Result<f64> {
    if y_true.len() != y_hat.len() {
        return Err(Error::shape("step_loss", y_true.len(), y_hat.len()));
    }
    let ones = y_true.iter().filter(|&&v| v == 1.0).count();
    let zeros = y_true.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != y_true.len() {
        return Err(Error::contract("step_loss expects a one-hot target"));
    }
    let label = y_true.iter().position(|&v| v == 1.0).expect("one entry is hot");
    Ok(label_loss(label, y_hat))
}

#[inline]
pub(crate) fn label_loss(label: usize, probs: &[f64]) -> f64 {
    -probs[label].max(LOG_FLOOR).ln()
}

/// Sum of frame losses over frames where `mask` is set. An all-masked
/// sequence has loss 0 and logs a warning.
pub fn sequence_loss(labels: &[usize], pred: &Prediction, mask: &[bool]) -> Result<f64> {
    sequence_loss_probs(labels, &pred.probs, mask)
}

fn sequence_loss_probs(labels: &[usize], probs: &Matrix, mask: &[bool]) -> Result<f64> {
    if labels.len() != probs.rows() || mask.len() != probs.rows() {
        return Err(Error::shape(
            "sequence_loss",
            format!("{} frames", probs.rows()),
            format!("{} labels, {} mask flags", labels.len(), mask.len()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        log::warn!("sequence_loss: every frame is masked; loss is 0");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (t, (&label, &keep)) in labels.iter().zip(mask).enumerate() {
        if keep {
            if label >= probs.cols() {
                return Err(Error::contract(format!("label {label} out of range for {} classes", probs.cols())));
            }
            total += label_loss(label, probs.row(t));
        }
    }
    Ok(total)
}

/// Recorded forward pass over one sequence.
pub struct Tape<'a> {
    model: &'a Model,
    inputs: &'a Matrix,
    trace: crate::model::SequenceTrace,
    targets: Option<(Vec<usize>, Vec<bool>)>,
    loss: Option<f64>,
}

impl<'a> Tape<'a> {
    /// Runs the model and records every intermediate value. Dropout masks are
    /// drawn from `rng` in [`RunMode::Train`].
    pub fn record(model: &'a Model, inputs: &'a Matrix, mode: RunMode, rng: &mut Rng) -> Result<Self> {
        let masks = match mode {
            RunMode::Train { dropout } if dropout > 0.0 => Masks::Sample { rng, p_drop: dropout },
            RunMode::Train { dropout } if dropout < 0.0 => {
                return Err(Error::contract(format!("dropout probability must be in [0, 1), got {dropout}")));
            }
            _ => Masks::None,
        };
        let trace = trace_sequence(model, inputs, masks)?;
        Ok(Tape {
            model,
            inputs,
            trace,
            targets: None,
            loss: None,
        })
    }

    /// Terminates the tape with the sequence loss against `labels`.
    pub fn attach_loss(&mut self, labels: &[usize], mask: &[bool]) -> Result<f64> {
        Example {
            inputs: self.inputs,
            labels,
            mask,
        }
        .validate(self.model.arch.n_classes)?;
        let loss = sequence_loss_probs(labels, &self.trace.probs, mask)?;
        self.targets = Some((labels.to_vec(), mask.to_vec()));
        self.loss = Some(loss);
        Ok(loss)
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss
    }

    pub fn prediction(&self) -> Prediction {
        Prediction::from_probs(self.trace.probs.clone())
    }

    /// Recomputes the loss from scratch with the recorded dropout masks.
    pub fn replay(&self) -> Result<f64> {
        let (labels, mask) = self
            .targets
            .as_ref()
            .ok_or_else(|| Error::contract("tape has no loss to replay"))?;
        let masks: Vec<Option<Vec<f64>>> = self.trace.layers.iter().map(|l| l.mask.clone()).collect();
        let trace = trace_sequence(self.model, self.inputs, Masks::Fixed(&masks))?;
        sequence_loss_probs(labels, &trace.probs, mask)
    }
}

/// Parameter-shaped gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    inner: Model,
}

impl Gradients {
    pub fn zeros_for(model: &Model) -> Self {
        Gradients {
            inner: model.zeros_like(),
        }
    }

    /// Gradient values laid out like `model`'s parameters.
    pub fn as_model(&self) -> &Model {
        &self.inner
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.inner.tensors()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    pub fn global_norm(&self) -> f64 {
        self.inner
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.inner.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.inner.arch != other.inner.arch {
            return Err(Error::shape("Gradients::accumulate", "same architecture", "different architecture"));
        }
        for (dst, src) in self.inner.tensors_mut().into_iter().zip(other.inner.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
        Ok(())
    }

    /// Name of the first tensor containing a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.inner
            .tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|g| !g.is_finite()))
            .map(|t| t.name)
    }

    fn from_flat(model: &Model, flat: &[f64]) -> Result<Self> {
        let mut inner = model.zeros_like();
        inner.set_flat(flat)?;
        Ok(Gradients { inner })
    }
}

/// Exact gradient of the recorded loss with respect to every parameter.
pub fn backward(tape: &Tape<'_>) -> Result<Gradients> {
    let mut grads = Gradients::zeros_for(tape.model);
    backward_into(tape, &mut grads)?;
    Ok(grads)
}

/// [`backward`], adding into an existing buffer.
pub fn backward_into(tape: &Tape<'_>, grads: &mut Gradients) -> Result<()> {
    let (labels, mask) = tape
        .targets
        .as_ref()
        .ok_or_else(|| Error::contract("backward needs a tape terminated by attach_loss"))?;
    let model = tape.model;
    if grads.inner.arch != model.arch {
        return Err(Error::shape("backward", "gradients shaped like the model", "different architecture"));
    }
    let arch = &model.arch;
    let trace = &tape.trace;
    let t_len = tape.inputs.rows();
    let h = arch.hidden;
    let g = &mut grads.inner;

    // softmax + cross entropy: dL/dlogits = ŷ - y on labeled frames
    let top = &trace.layers.last().expect("at least one layer").output;
    let mut d_out = Matrix::zeros(t_len, arch.output_width());
    let mut dlogits = vec![0.0; arch.n_classes];
    for t in 0..t_len {
        if !mask[t] {
            continue;
        }
        dlogits.copy_from_slice(trace.probs.row(t));
        dlogits[labels[t]] -= 1.0;
        g.output.w_ym.outer_acc(&dlogits, top.row(t));
        for (b, d) in g.output.b_y.iter_mut().zip(&dlogits) {
            *b += d;
        }
        model.output.w_ym.tr_matvec_acc(&dlogits, d_out.row_mut(t));
    }

    for l in (0..model.layers.len()).rev() {
        let lt = &trace.layers[l];
        if let Some(m) = &lt.mask {
            for t in 0..t_len {
                for (d, k) in d_out.row_mut(t).iter_mut().zip(m) {
                    *d *= k;
                }
            }
        }
        let input = if l == 0 { tape.inputs } else { &trace.layers[l - 1].output };
        let mut d_in = (l > 0).then(|| Matrix::zeros(t_len, input.cols()));
        let params = &model.layers[l];
        let layer_grads = &mut g.layers[l];
        cell_backward(
            &params.forward,
            &mut layer_grads.forward,
            &lt.forward,
            input,
            &d_out,
            0,
            false,
            d_in.as_mut(),
        )?;
        if let (Some(p), Some(gb), Some(tb)) = (&params.backward, &mut layer_grads.backward, &lt.backward) {
            cell_backward(p, gb, tb, input, &d_out, h, true, d_in.as_mut())?;
        }
        if let Some(d) = d_in {
            d_out = d;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cell_backward(
    params: &CellParams,
    grads: &mut CellParams,
    trace: &CellTrace,
    input: &Matrix,
    d_out: &Matrix,
    offset: usize,
    reversed: bool,
    mut d_in: Option<&mut Matrix>,
) -> Result<()> {
    let t_len = input.rows();
    let time = |s: usize| if reversed { t_len - 1 - s } else { s };
    match (params, grads, trace) {
        (CellParams::Vanilla(p), CellParams::Vanilla(g), CellTrace::Vanilla { h: hs }) => {
            let hidden = p.hidden();
            let zeros = vec![0.0; hidden];
            let mut dh_next = vec![0.0; hidden];
            let mut dz = vec![0.0; hidden];
            for s in (0..t_len).rev() {
                let t = time(s);
                let h_prev = if s > 0 { hs.row(s - 1) } else { &zeros };
                let d_row = &d_out.row(t)[offset..offset + hidden];
                for k in 0..hidden {
                    let hk = hs.get(s, k);
                    dz[k] = (d_row[k] + dh_next[k]) * (1.0 - hk * hk);
                    g.b[k] += dz[k];
                }
                let x = input.row(t);
                g.w_x.outer_acc(&dz, x);
                g.w_h.outer_acc(&dz, h_prev);
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                p.w_h.tr_matvec_acc(&dz, &mut dh_next);
                if let Some(d_in) = d_in.as_deref_mut() {
                    p.w_x.tr_matvec_acc(&dz, d_in.row_mut(t));
                }
            }
            Ok(())
        }
        (
            CellParams::Lstm(p),
            CellParams::Lstm(g),
            CellTrace::Lstm {
                candidate,
                input: gate_i,
                forget,
                output,
                c,
                tanh_c,
                m,
            },
        ) => {
            let hidden = p.hidden();
            let zeros = vec![0.0; hidden];
            let mut dm_next = vec![0.0; hidden];
            let mut dc_next = vec![0.0; hidden];
            // pre-activation gradients: candidate, input, forget, output
            let mut dz: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
            for s in (0..t_len).rev() {
                let t = time(s);
                let c_prev = if s > 0 { c.row(s - 1) } else { &zeros };
                let m_prev = if s > 0 { m.row(s - 1) } else { &zeros };
                let d_row = &d_out.row(t)[offset..offset + hidden];
                {
                    let [dzg, dzi, dzf, dzo] = &mut dz;
                    for k in 0..hidden {
                        let dm = d_row[k] + dm_next[k];
                        let (o, tc) = (output.get(s, k), tanh_c.get(s, k));
                        let (i, f, cand) = (gate_i.get(s, k), forget.get(s, k), candidate.get(s, k));
                        let zo = dm * tc * o * (1.0 - o);
                        // c_t reaches the loss through m_t and through the output peephole
                        let dc = dc_next[k] + dm * o * (1.0 - tc * tc) + zo * p.peep_output[k];
                        let zi = dc * cand * i * (1.0 - i);
                        let zf = dc * c_prev[k] * f * (1.0 - f);
                        let zg = dc * i * (1.0 - cand * cand);
                        dc_next[k] = dc * f + zi * p.peep_input[k] + zf * p.peep_forget[k];
                        g.peep_input[k] += zi * c_prev[k];
                        g.peep_forget[k] += zf * c_prev[k];
                        g.peep_output[k] += zo * c.get(s, k);
                        dzg[k] = zg;
                        dzi[k] = zi;
                        dzf[k] = zf;
                        dzo[k] = zo;
                    }
                }
                let x = input.row(t);
                dm_next.iter_mut().for_each(|v| *v = 0.0);
                let gates: [(&GateParams, &mut GateParams); 4] = [
                    (&p.candidate, &mut g.candidate),
                    (&p.input, &mut g.input),
                    (&p.forget, &mut g.forget),
                    (&p.output, &mut g.output),
                ];
                for ((gp, gg), dzk) in gates.into_iter().zip(&dz) {
                    for (b, d) in gg.b.iter_mut().zip(dzk) {
                        *b += d;
                    }
                    gg.w_x.outer_acc(dzk, x);
                    gg.w_m.outer_acc(dzk, m_prev);
                    gp.w_m.tr_matvec_acc(dzk, &mut dm_next);
                    if let Some(d_in) = d_in.as_deref_mut() {
                        gp.w_x.tr_matvec_acc(dzk, d_in.row_mut(t));
                    }
                }
            }
            Ok(())
        }
        _ => Err(Error::shape("backward", "matching cell kinds", "mismatched cell kinds")),
    }
}

/// Central differences `(f(p+ε) − f(p−ε)) / 2ε` of a scalar function.
pub fn central_difference<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    central_difference_terms(|p| Ok(vec![f(p)?]), point, eps)
}

/// Central differences of a function given as a sum of terms. Terms are
/// differenced before summing, so the rounding step of the total (large
/// for long sequences) does not enter the estimate.
pub fn central_difference_terms<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut p = point.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + eps;
        let plus = f(&p)?;
        p[k] = orig - eps;
        let minus = f(&p)?;
        p[k] = orig;
        if plus.len() != minus.len() {
            return Err(Error::shape("central_difference_terms", plus.len(), minus.len()));
        }
        let delta: f64 = plus.iter().zip(&minus).map(|(a, b)| a - b).sum();
        out.push(delta / (2.0 * eps));
    }
    Ok(out)
}

/// Finite-difference gradient of the sequence loss, with dropout off.
pub fn finite_diff_grad(model: &Model, example: Example<'_>, eps: f64) -> Result<Gradients> {
    example.validate(model.arch.n_classes)?;
    let mut work = model.clone();
    let flat = model.to_flat();
    let grad = central_difference_terms(
        |p| {
            work.set_flat(p)?;
            let trace = trace_sequence(&work, example.inputs, Masks::None)?;
            Ok((0..example.labels.len())
                .filter(|&t| example.mask[t])
                .map(|t| label_loss(example.labels[t], trace.probs.row(t)))
                .collect())
        },
        &flat,
        eps,
    )?;
    Gradients::from_flat(model, &grad)
}

/// `p ← p − η·g`, after rescaling `g` to global norm `clip` when it exceeds it.
pub fn sgd_update(model: &mut Model, grads: &Gradients, learning_rate: f64, clip: Option<f64>) -> Result<()> {
    if grads.inner.arch != model.arch {
        return Err(Error::shape("sgd_update", "gradients shaped like the model", "different architecture"));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    let mut step = learning_rate;
    if let Some(ceiling) = clip {
        let norm = grads.global_norm();
        if norm > ceiling {
            step *= ceiling / norm;
        }
    }
    for (p, g) in model.tensors_mut().into_iter().zip(grads.inner.tensors()) {
        for (pv, gv) in p.data.iter_mut().zip(g.data) {
            *pv -= step * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs at the base rate before halving starts.
    pub halve_after: usize,
    /// Epochs between successive halvings.
    pub halve_every: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub hidden: usize,
    pub layers: usize,
    pub cell: CellKind,
    pub direction: Direction,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
    /// Initial LSTM forget-gate bias.
    pub forget_bias: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1.0,
            epochs: 80,
            halve_after: 40,
            halve_every: 5,
            batch_size: 5,
            dropout: 0.5,
            hidden: 1024,
            layers: 1,
            cell: CellKind::Lstm,
            direction: Direction::Bidirectional,
            seed: 0,
            grad_clip: None,
            init_scale: 0.1,
            forget_bias: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.halve_every == 0 {
            return Err(Error::contract("halve_every must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::contract("hidden size must be at least 1"));
        }
        if self.layers == 0 || self.layers > Architecture::MAX_LAYERS {
            return Err(Error::contract(format!("layers must be 1..={}", Architecture::MAX_LAYERS)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::contract(format!("grad_clip must be positive, got {c}")));
            }
        }
        if !self.forget_bias.is_finite() {
            return Err(Error::contract("forget_bias must be finite"));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::contract("init_scale must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self, n_inputs: usize, n_classes: usize) -> Architecture {
        Architecture {
            cell: self.cell,
            direction: self.direction,
            layers: self.layers,
            hidden: self.hidden,
            n_inputs,
            n_classes,
        }
    }
}

/// Learning rate for zero-based `epoch`: the base rate for the first
/// `halve_after` epochs, then halved every `halve_every` epochs.
pub fn lr_schedule(epoch: usize, cfg: &TrainingConfig) -> f64 {
    if epoch < cfg.halve_after {
        return cfg.learning_rate;
    }
    let halvings = (epoch - cfg.halve_after) / cfg.halve_every.max(1) + 1;
    cfg.learning_rate * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// Progress record emitted after each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean of the epoch's mini-batch losses.
    pub loss: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={} loss={}", self.epoch, self.learning_rate, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, ThisError)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),
    /// Training diverged; `last_good` holds the parameters after the last
    /// completed epoch.
    #[error("training aborted in epoch {epoch}: {reason}")]
    Aborted {
        epoch: usize,
        reason: String,
        last_good: Box<Model>,
        history: Vec<EpochRecord>,
    },
}

/// Trains a freshly initialized model with mini-batch SGD.
///
/// Draw order from the seeded generator is fixed (initialization, then per
/// epoch one shuffle followed by one dropout seed per visited sequence), so
/// equal seeds give bit-identical runs.
pub fn train(
    examples: &[Example<'_>],
    n_inputs: usize,
    n_classes: usize,
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::contract("training split is empty").into());
    }
    let arch = cfg.architecture(n_inputs, n_classes);
    arch.validate()?;
    for (i, ex) in examples.iter().enumerate() {
        if ex.inputs.cols() != n_inputs {
            return Err(Error::shape("train", format!("{n_inputs} features"), format!("sequence {i}: {}", ex.inputs.cols())).into());
        }
        ex.validate(n_classes)?;
    }

    let mut master = Rng::seed(cfg.seed);
    let mut model = Model::init(arch, &mut master.fork(), cfg.init_scale)?;
    model.set_forget_bias(cfg.forget_bias);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut batch_grads = Gradients::zeros_for(&model);
    let mode = RunMode::Train { dropout: cfg.dropout };

    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        let lr = lr_schedule(epoch, cfg);
        master.shuffle(&mut order);
        let mut batch_losses = Vec::new();
        let abort = |reason: String, history: &Vec<EpochRecord>| TrainError::Aborted {
            epoch,
            reason,
            last_good: Box::new(last_good.clone()),
            history: history.clone(),
        };
        for batch in order.chunks(cfg.batch_size) {
            batch_grads.scale(0.0);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let ex = examples[idx];
                let mut rng = master.fork();
                let mut tape = Tape::record(&model, ex.inputs, mode, &mut rng)?;
                batch_loss += tape.attach_loss(ex.labels, ex.mask)?;
                backward_into(&tape, &mut batch_grads)?;
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(abort(format!("non-finite batch loss {batch_loss}"), &history));
            }
            batch_grads.scale(1.0 / n);
            if let Err(e) = sgd_update(&mut model, &batch_grads, lr, cfg.grad_clip) {
                return Err(abort(e.to_string(), &history));
            }
            batch_losses.push(batch_loss);
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

/// Relative error `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Gate for analytic-vs-numeric gradient agreement.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckCase {
    pub cell: CellKind,
    pub direction: Direction,
    pub layers: usize,
    pub hidden: usize,
    pub length: usize,
    pub n_inputs: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl fmt::Display for GradCheckCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cell={} mode={} layers={} hidden={} T={} seed={}",
            self.cell, self.direction, self.layers, self.hidden, self.length, self.seed
        )
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub case: GradCheckCase,
    pub max_rel_error: f64,
    /// Tensor holding the worst entry, with the entry's flat index.
    pub worst_param: String,
    pub worst_index: usize,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// {vanilla, LSTM} × {forward, bidirectional} × hidden {3, 5} × T {1, 7} ×
/// `seeds` seeds, with 3 inputs and 4 classes.
pub fn gradcheck_grid(seeds: u64) -> Vec<GradCheckCase> {
    let mut cases = Vec::new();
    for cell in [CellKind::Vanilla, CellKind::Lstm] {
        for direction in [Direction::Forward, Direction::Bidirectional] {
            for hidden in [3, 5] {
                for length in [1, 7] {
                    for seed in 0..seeds {
                        cases.push(GradCheckCase {
                            cell,
                            direction,
                            layers: 1,
                            hidden,
                            length,
                            n_inputs: 3,
                            n_classes: 4,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cases
}

/// Random model and data for `case`: parameters uniform in [-0.5, 0.5],
/// standard normal inputs, random labels, frame 1 unlabeled when T ≥ 3.
pub fn gradcheck_instance(case: &GradCheckCase) -> Result<(Model, Matrix, Vec<usize>, Vec<bool>)> {
    let mut rng = Rng::seed(0x9AD0_C4EC ^ case.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let arch = Architecture {
        cell: case.cell,
        direction: case.direction,
        layers: case.layers,
        hidden: case.hidden,
        n_inputs: case.n_inputs,
        n_classes: case.n_classes,
    };
    let mut model = Model::zeros(arch)?;
    let flat: Vec<f64> = (0..model.param_count()).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
    model.set_flat(&flat)?;
    let t = case.length;
    let xs = Matrix::new(t, case.n_inputs, (0..t * case.n_inputs).map(|_| rng.normal()).collect())?;
    let labels = (0..t).map(|_| rng.below(case.n_classes)).collect();
    let mask = (0..t).map(|f| !(t >= 3 && f == 1)).collect();
    Ok((model, xs, labels, mask))
}

/// Compares [`backward`] with [`finite_diff_grad`] on one random instance.
/// `corrupt` perturbs one analytic entry as a negative control.
pub fn gradient_check(case: &GradCheckCase, eps: f64, corrupt: bool) -> Result<GradCheckResult> {
    let (model, xs, labels, mask) = gradcheck_instance(case)?;
    let mut tape = Tape::record(&model, &xs, RunMode::Eval, &mut Rng::seed(0))?;
    tape.attach_loss(&labels, &mask)?;
    let mut analytic = backward(&tape)?.to_flat();
    if corrupt {
        let k = analytic.len() / 2;
        analytic[k] += 1e-2 * (1.0 + analytic[k].abs());
    }
    let numeric = finite_diff_grad(
        &model,
        Example {
            inputs: &xs,
            labels: &labels,
            mask: &mask,
        },
        eps,
    )?
    .to_flat();

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let mut offset = 0;
    let mut worst_param = String::new();
    for t in model.tensors() {
        if worst_index < offset + t.data.len() {
            worst_param = t.name;
            break;
        }
        offset += t.data.len();
    }
    Ok(GradCheckResult {
        case: case.clone(),
        max_rel_error,
        worst_param,
        worst_index: worst_index - offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict, LayerParams};

    fn tiny_arch(cell: CellKind, direction: Direction) -> Architecture {
        Architecture {
            cell,
            direction,
            layers: 1,
            hidden: 3,
            n_inputs: 2,
            n_classes: 3,
        }
    }

    fn random_model(arch: Architecture, seed: u64) -> Model {
        let mut rng = Rng::seed(seed);
        let mut m = Model::zeros(arch).unwrap();
        let flat: Vec<f64> = (0..m.param_count()).map(|_| rng.uniform_range(-0.6, 0.6)).collect();
        m.set_flat(&flat).unwrap();
        m
    }

    fn random_xs(seed: u64, t: usize, d: usize) -> Matrix {
        let mut rng = Rng::seed(seed);
        Matrix::new(t, d, (0..t * d).map(|_| rng.normal()).collect()).unwrap()
    }

    fn grads_of(model: &Model, xs: &Matrix, labels: &[usize], mask: &[bool]) -> Gradients {
        let mut tape = Tape::record(model, xs, RunMode::Eval, &mut Rng::seed(0)).unwrap();
        tape.attach_loss(labels, mask).unwrap();
        backward(&tape).unwrap()
    }

    #[test]
    fn step_loss_examples() {
        let uniform = Vector::filled(4, 0.25);
        let y = Vector::from([0.0, 1.0, 0.0, 0.0]);
        assert!((step_loss(&y, &uniform).unwrap() - 1.3862943611198906).abs() < 1e-15);
        let perfect = Vector::from([0.0, 1.0, 0.0, 0.0]);
        assert_eq!(step_loss(&y, &perfect).unwrap(), 0.0);
        let y3 = Vector::from([0.0, 1.0, 0.0]);
        let p = Vector::from([0.5, 0.25, 0.25]);
        assert!((step_loss(&y3, &p).unwrap() - 1.3862943611198906).abs() < 1e-15);
    }

    #[test]
    fn step_loss_clamps_zero_probability() {
        let y = Vector::from([1.0, 0.0]);
        let l = step_loss(&y, &Vector::from([0.0, 1.0])).unwrap();
        assert!(l.is_finite() && l > 690.0);
        assert!(step_loss(&Vector::from([1.0, 1.0]), &Vector::from([0.5, 0.5])).is_err());
    }

    #[test]
    fn sequence_loss_examples() {
        let pred = Prediction::from_probs(Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap());
        let l = sequence_loss(&[0, 1], &pred, &[true, true]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(sequence_loss(&[0, 1], &pred, &[false, false]).unwrap(), 0.0);

        let pred = Prediction::from_probs(Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]).unwrap());
        let (a, c) = (-(0.9f64.ln()), -(0.4f64.ln()));
        let l = sequence_loss(&[0, 0, 1], &pred, &[true, false, true]).unwrap();
        assert!((l - (a + c)).abs() < 1e-15);
        assert!(sequence_loss(&[0], &pred, &[true]).is_err());
    }

    #[test]
    fn readout_bias_gradient_is_prediction_minus_target() {
        let arch = Architecture {
            n_classes: 2,
            n_inputs: 1,
            hidden: 1,
            ..tiny_arch(CellKind::Lstm, Direction::Forward)
        };
        let model = Model::zeros(arch).unwrap();
        let xs = Matrix::from_rows(&[[0.7]]).unwrap();
        // true class 1 in the 1-based sense is index 0
        let g = grads_of(&model, &xs, &[0], &[true]);
        assert_eq!(&g.as_model().output.b_y[..], &[-0.5, 0.5]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let model = random_model(tiny_arch(CellKind::Lstm, Direction::Bidirectional), 4);
        let xs = random_xs(5, 4, 2);
        let g = grads_of(&model, &xs, &[0, 1, 2, 0], &[false; 4]);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_terminal_loss() {
        let model = random_model(tiny_arch(CellKind::Vanilla, Direction::Forward), 1);
        let xs = random_xs(1, 3, 2);
        let tape = Tape::record(&model, &xs, RunMode::Eval, &mut Rng::seed(0)).unwrap();
        assert!(matches!(backward(&tape), Err(Error::Contract(_))));
        assert!(tape.replay().is_err());
    }

    #[test]
    fn replay_reproduces_loss_bitwise() {
        let model = random_model(tiny_arch(CellKind::Lstm, Direction::Bidirectional), 8);
        let xs = random_xs(9, 6, 2);
        let mut tape = Tape::record(&model, &xs, RunMode::Train { dropout: 0.5 }, &mut Rng::seed(3)).unwrap();
        let loss = tape.attach_loss(&[0, 1, 2, 2, 1, 0], &[true; 6]).unwrap();
        assert_eq!(tape.replay().unwrap().to_bits(), loss.to_bits());
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
        let g = central_difference(|p| Ok(p[0].cosh()), &[0.0], 1e-5).unwrap();
        assert!(g[0].abs() < 1e-10);
        assert!(central_difference(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_two_layers() {
        for cell in [CellKind::Vanilla, CellKind::Lstm] {
            for direction in [Direction::Forward, Direction::Bidirectional] {
                let case = GradCheckCase {
                    cell,
                    direction,
                    layers: 2,
                    hidden: 3,
                    length: 5,
                    n_inputs: 3,
                    n_classes: 4,
                    seed: 17,
                };
                let r = gradient_check(&case, GRADCHECK_EPS, false).unwrap();
                assert!(r.passed(), "{case}: {} at {}", r.max_rel_error, r.worst_param);
            }
        }
    }

    #[test]
    fn dropout_gradients_match_fixed_mask_differences() {
        // Differentiate the recorded train-mode loss with its masks frozen.
        let model = random_model(
            Architecture {
                layers: 2,
                ..tiny_arch(CellKind::Lstm, Direction::Bidirectional)
            },
            2,
        );
        let xs = random_xs(3, 5, 2);
        let labels = [0, 2, 1, 1, 0];
        let mask = [true; 5];
        let mut tape = Tape::record(&model, &xs, RunMode::Train { dropout: 0.3 }, &mut Rng::seed(12)).unwrap();
        tape.attach_loss(&labels, &mask).unwrap();
        let analytic = backward(&tape).unwrap().to_flat();
        let masks: Vec<Option<Vec<f64>>> = tape.trace.layers.iter().map(|l| l.mask.clone()).collect();
        assert!(masks.iter().all(|m| m.as_ref().is_some_and(|m| m.contains(&0.0))));
        let mut work = model.clone();
        let numeric = central_difference(
            |p| {
                work.set_flat(p)?;
                let tr = trace_sequence(&work, &xs, Masks::Fixed(&masks))?;
                sequence_loss_probs(&labels, &tr.probs, &mask)
            },
            &model.to_flat(),
            1e-5,
        )
        .unwrap();
        // entries below 1e-6 sit at the difference quotient's roundoff floor
        // (loss ≈ 5, ε = 1e-5), so they are held to an absolute bound instead
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let ok = relative_error(a, n) < 1e-4 || (a.abs().max(n.abs()) < 1e-6 && (a - n).abs() < 1e-9);
            assert!(ok, "parameter {i}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn masked_tail_frames_are_gradient_inert() {
        let model = random_model(tiny_arch(CellKind::Lstm, Direction::Forward), 6);
        let xs = random_xs(7, 6, 2);
        let labels = [0, 1, 2, 1, 0, 2];
        let mask = [true, true, true, true, false, false];
        let g1 = grads_of(&model, &xs, &labels, &mask);
        let mut zeroed = xs.clone();
        for t in 4..6 {
            zeroed.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
        }
        let g2 = grads_of(&model, &zeroed, &labels, &mask);
        let bits = |g: &Gradients| g.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn sequence_gradient_is_sum_of_frame_gradients() {
        let model = random_model(tiny_arch(CellKind::Lstm, Direction::Bidirectional), 10);
        let xs = random_xs(11, 5, 2);
        let labels = [2, 0, 1, 1, 2];
        let full = grads_of(&model, &xs, &labels, &[true; 5]).to_flat();
        let mut summed = vec![0.0; full.len()];
        for t in 0..5 {
            let mut mask = [false; 5];
            mask[t] = true;
            for (s, g) in summed.iter_mut().zip(grads_of(&model, &xs, &labels, &mask).to_flat()) {
                *s += g;
            }
        }
        for (a, b) in full.iter().zip(&summed) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn sgd_update_examples() {
        let arch = Architecture {
            n_classes: 1,
            n_inputs: 1,
            hidden: 1,
            ..tiny_arch(CellKind::Vanilla, Direction::Forward)
        };
        let mut model = Model::zeros(arch).unwrap();
        model.output.b_y = Vector::from([1.0]);
        let mut grads = Gradients::zeros_for(&model);
        let before = model.clone();
        sgd_update(&mut model, &grads, 1.0, None).unwrap();
        assert_eq!(model, before);

        grads.inner.output.b_y = Vector::from([0.25]);
        sgd_update(&mut model, &grads, 1.0, None).unwrap();
        assert_eq!(model.output.b_y[0], 0.75);

        // global norm 4 clipped to 1: the step shrinks to a quarter
        let mut clipped = before.clone();
        grads.inner.output.b_y = Vector::from([4.0]);
        sgd_update(&mut clipped, &grads, 0.1, Some(1.0)).unwrap();
        assert!((clipped.output.b_y[0] - (1.0 - 0.1)).abs() < 1e-15);

        grads.inner.layers[0] = LayerParams {
            forward: CellParams::Vanilla(crate::model::VanillaRnnParams {
                w_x: Matrix::from_rows(&[[f64::NAN]]).unwrap(),
                w_h: Matrix::zeros(1, 1),
                b: Vector::zeros(1),
            }),
            backward: None,
        };
        match sgd_update(&mut clipped, &grads, 0.1, None) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "layer0.fwd.w_x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainingConfig::default();
        for e in 0..40 {
            assert_eq!(lr_schedule(e, &cfg), 1.0);
        }
        assert_eq!(lr_schedule(40, &cfg), 0.5);
        assert_eq!(lr_schedule(44, &cfg), 0.5);
        assert_eq!(lr_schedule(45, &cfg), 0.25);
        assert_eq!(lr_schedule(50, &cfg), 0.125);
        let rates: Vec<f64> = (0..200).map(|e| lr_schedule(e, &cfg)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    fn toy_examples() -> (Vec<Matrix>, Vec<Vec<usize>>, Vec<Vec<bool>>) {
        // class is the sign of the single input
        let xs = vec![
            Matrix::new(6, 1, vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0]).unwrap(),
            Matrix::new(6, 1, vec![-1.0, -1.0, 1.0, -1.0, 1.0, 1.0]).unwrap(),
        ];
        let labels = xs
            .iter()
            .map(|m| m.as_slice().iter().map(|&v| usize::from(v > 0.0)).collect())
            .collect();
        (xs, labels, vec![vec![true; 6]; 2])
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let (xs, labels, masks) = toy_examples();
        let examples: Vec<Example> = (0..2)
            .map(|i| Example {
                inputs: &xs[i],
                labels: &labels[i],
                mask: &masks[i],
            })
            .collect();
        let cfg = TrainingConfig {
            epochs: 30,
            hidden: 4,
            batch_size: 1,
            learning_rate: 0.1,
            seed: 5,
            direction: Direction::Forward,
            ..TrainingConfig::default()
        };
        let mut lines = Vec::new();
        let a = train(&examples, 1, 2, &cfg, |r| lines.push(r.to_string())).unwrap();
        let b = train(&examples, 1, 2, &cfg, |_| {}).unwrap();
        assert_eq!(a.history.len(), 30);
        assert!(a.history.last().unwrap().loss < a.history[0].loss);
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert!(lines[0].starts_with("epoch=0 lr=0.1 loss="));
        let pred = predict(&a.model, &xs[0]).unwrap();
        assert_eq!(pred.labels, labels[0]);
    }

    #[test]
    fn duplicated_batch_keeps_update_direction() {
        let model = random_model(tiny_arch(CellKind::Lstm, Direction::Forward), 30);
        let xs = [random_xs(1, 4, 2), random_xs(2, 5, 2)];
        let labels = [vec![0, 1, 2, 0], vec![1, 1, 0, 2, 2]];
        let batch_mean = |copies: usize| {
            let mut acc = Gradients::zeros_for(&model);
            let mut n = 0.0;
            for _ in 0..copies {
                for (x, l) in xs.iter().zip(&labels) {
                    let mut tape = Tape::record(&model, x, RunMode::Eval, &mut Rng::seed(0)).unwrap();
                    tape.attach_loss(l, &vec![true; l.len()]).unwrap();
                    backward_into(&tape, &mut acc).unwrap();
                    n += 1.0;
                }
            }
            acc.scale(1.0 / n);
            acc.to_flat()
        };
        for (a, b) in batch_mean(1).iter().zip(batch_mean(2)) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn divergence_aborts_with_last_good_model() {
        let (mut xs, labels, masks) = toy_examples();
        xs[0].set(1, 0, f64::NAN);
        let examples = [Example {
            inputs: &xs[0],
            labels: &labels[0],
            mask: &masks[0],
        }];
        let cfg = TrainingConfig {
            epochs: 3,
            hidden: 2,
            direction: Direction::Forward,
            ..TrainingConfig::default()
        };
        match train(&examples, 1, 2, &cfg, |_| {}) {
            Err(TrainError::Aborted { epoch, last_good, history, .. }) => {
                assert_eq!(epoch, 0);
                assert!(history.is_empty());
                assert!(last_good.to_flat().iter().all(|v| v.is_finite()));
            }
            Ok(_) => panic!("expected divergence"),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainingConfig {
                hidden: 0,
                ..Default::default()
            },
            TrainingConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainingConfig {
                dropout: 1.0,
                ..Default::default()
            },
            TrainingConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainingConfig {
                layers: 3,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        TrainingConfig::default().validate().unwrap();
    }

    #[test]
    fn corrupted_gradient_fails_the_gate() {
        let case = &gradcheck_grid(1)[0];
        assert!(gradient_check(case, GRADCHECK_EPS, false).unwrap().passed());
        let bad = gradient_check(case, GRADCHECK_EPS, true).unwrap();
        assert!(!bad.passed());
        assert!(!bad.worst_param.is_empty());
    }
}
