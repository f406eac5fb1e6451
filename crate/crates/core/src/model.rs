//! Recurrent cells, the softmax readout and full-sequence forward passes.
//!
//! A [`Model`] is a stack of one or two recurrent layers followed by a linear
//! readout and a softmax. Each layer holds a forward-in-time cell and, in
//! bidirectional mode, a second cell run over the reversed sequence; their
//! outputs are concatenated per frame. Initial states are zero.
//!
//! The LSTM variant has forget gates and diagonal peephole connections. The
//! peephole weights are stored as vectors, so the diagonal constraint holds
//! by construction. The output gate peeks at the *updated* cell `c_t`, the
//! input and forget gates at `c_{t-1}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, init_uniform, init_uniform_vector, sigmoid_scalar, softmax_in_place, Matrix, Rng, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Bidirectional,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Vanilla => "vanilla",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "rnn" => Ok(CellKind::Vanilla),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::contract(format!("unknown cell kind `{other}`"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Bidirectional => "bidirectional",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "bidirectional" | "bidir" => Ok(Direction::Bidirectional),
            other => Err(Error::contract(format!("unknown direction `{other}`"))),
        }
    }
}

/// Shape-determining hyperparameters of a [`Model`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub cell: CellKind,
    pub direction: Direction,
    pub layers: usize,
    pub hidden: usize,
    pub n_inputs: usize,
    pub n_classes: usize,
}

impl Architecture {
    pub const MAX_LAYERS: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::contract("hidden size must be at least 1"));
        }
        if self.layers == 0 || self.layers > Self::MAX_LAYERS {
            return Err(Error::contract(format!(
                "layer count must be 1..={}, got {}",
                Self::MAX_LAYERS,
                self.layers
            )));
        }
        if self.n_inputs == 0 {
            return Err(Error::contract("input width must be at least 1"));
        }
        if self.n_classes == 0 {
            return Err(Error::contract("class count must be at least 1"));
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        match self.direction {
            Direction::Forward => 1,
            Direction::Bidirectional => 2,
        }
    }

    /// Width of a layer's concatenated output, `d_m`.
    pub fn output_width(&self) -> usize {
        self.hidden * self.directions()
    }

    pub fn layer_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.n_inputs
        } else {
            self.output_width()
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let h = self.hidden;
        let recurrent: usize = (0..self.layers)
            .map(|l| {
                let d = self.layer_input_width(l);
                let per_cell = match self.cell {
                    CellKind::Vanilla => h * (d + h) + h,
                    CellKind::Lstm => 4 * h * (d + h) + 3 * h + 4 * h,
                };
                per_cell * self.directions()
            })
            .sum();
        let readout = self.n_classes * self.output_width() + self.n_classes;
        Ok(recurrent + readout)
    }
}

/// `h_t = tanh(W_x x_t + W_h h_{t-1} + b)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaRnnParams {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Vector,
}

/// Input and recurrent weights plus bias of one LSTM gate (or the candidate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w_x: Matrix,
    pub w_m: Matrix,
    pub b: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub candidate: GateParams,
    pub input: GateParams,
    pub forget: GateParams,
    pub output: GateParams,
    /// Diagonal peephole weights, one per unit.
    pub peep_input: Vector,
    pub peep_forget: Vector,
    pub peep_output: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellParams {
    Vanilla(VanillaRnnParams),
    Lstm(LstmParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub forward: CellParams,
    pub backward: Option<CellParams>,
}

/// Linear readout `W_ym m + b_y` feeding the softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputParams {
    pub w_ym: Matrix,
    pub b_y: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub layers: Vec<LayerParams>,
    pub output: OutputParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub c: Vector,
    pub m: Vector,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            c: Vector::zeros(hidden),
            m: Vector::zeros(hidden),
        }
    }
}

/// Per-frame class distributions and their argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `T × n_y`, one distribution per row.
    pub probs: Matrix,
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn from_probs(probs: Matrix) -> Self {
        let labels = probs
            .iter_rows()
            .map(|row| argmax(row).unwrap_or(0))
            .collect();
        Prediction { probs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn mat_ref<'a>(out: &mut Vec<TensorRef<'a>>, name: String, m: &'a Matrix) {
    out.push(TensorRef {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    });
}

fn vec_ref<'a>(out: &mut Vec<TensorRef<'a>>, name: String, v: &'a Vector) {
    out.push(TensorRef {
        name,
        shape: vec![v.len()],
        data: v,
    });
}

fn mat_mut<'a>(out: &mut Vec<TensorMut<'a>>, name: String, m: &'a mut Matrix) {
    let shape = vec![m.rows(), m.cols()];
    out.push(TensorMut {
        name,
        shape,
        data: m.as_mut_slice(),
    });
}

fn vec_mut<'a>(out: &mut Vec<TensorMut<'a>>, name: String, v: &'a mut Vector) {
    out.push(TensorMut {
        name,
        shape: vec![v.len()],
        data: v,
    });
}

impl GateParams {
    fn zeros(hidden: usize, d_in: usize) -> Self {
        GateParams {
            w_x: Matrix::zeros(hidden, d_in),
            w_m: Matrix::zeros(hidden, hidden),
            b: Vector::zeros(hidden),
        }
    }

    fn random(rng: &mut Rng, hidden: usize, d_in: usize, scale: f64) -> Result<Self> {
        Ok(GateParams {
            w_x: init_uniform(rng, hidden, d_in, scale)?,
            w_m: init_uniform(rng, hidden, hidden, scale)?,
            b: Vector::zeros(hidden),
        })
    }

    fn refs<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        mat_ref(out, format!("{prefix}.w_x"), &self.w_x);
        mat_ref(out, format!("{prefix}.w_m"), &self.w_m);
        vec_ref(out, format!("{prefix}.b"), &self.b);
    }

    fn muts<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        mat_mut(out, format!("{prefix}.w_x"), &mut self.w_x);
        mat_mut(out, format!("{prefix}.w_m"), &mut self.w_m);
        vec_mut(out, format!("{prefix}.b"), &mut self.b);
    }

    fn check(&self, hidden: usize, d_in: usize) -> bool {
        self.w_x.shape() == (hidden, d_in)
            && self.w_m.shape() == (hidden, hidden)
            && self.b.len() == hidden
    }
}

impl VanillaRnnParams {
    pub fn zeros(hidden: usize, d_in: usize) -> Self {
        VanillaRnnParams {
            w_x: Matrix::zeros(hidden, d_in),
            w_h: Matrix::zeros(hidden, hidden),
            b: Vector::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b.len()
    }

    pub fn input_width(&self) -> usize {
        self.w_x.cols()
    }

    fn is_consistent(&self) -> bool {
        let h = self.hidden();
        self.w_x.rows() == h && self.w_h.shape() == (h, h)
    }
}

impl LstmParams {
    pub fn zeros(hidden: usize, d_in: usize) -> Self {
        LstmParams {
            candidate: GateParams::zeros(hidden, d_in),
            input: GateParams::zeros(hidden, d_in),
            forget: GateParams::zeros(hidden, d_in),
            output: GateParams::zeros(hidden, d_in),
            peep_input: Vector::zeros(hidden),
            peep_forget: Vector::zeros(hidden),
            peep_output: Vector::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.candidate.b.len()
    }

    pub fn input_width(&self) -> usize {
        self.candidate.w_x.cols()
    }

    fn is_consistent(&self) -> bool {
        let (h, d) = (self.hidden(), self.input_width());
        [&self.candidate, &self.input, &self.forget, &self.output]
            .iter()
            .all(|g| g.check(h, d))
            && [&self.peep_input, &self.peep_forget, &self.peep_output]
                .iter()
                .all(|p| p.len() == h)
    }
}

impl CellParams {
    pub fn zeros(kind: CellKind, hidden: usize, d_in: usize) -> Self {
        match kind {
            CellKind::Vanilla => CellParams::Vanilla(VanillaRnnParams::zeros(hidden, d_in)),
            CellKind::Lstm => CellParams::Lstm(LstmParams::zeros(hidden, d_in)),
        }
    }

    fn random(kind: CellKind, rng: &mut Rng, hidden: usize, d_in: usize, scale: f64) -> Result<Self> {
        Ok(match kind {
            CellKind::Vanilla => CellParams::Vanilla(VanillaRnnParams {
                w_x: init_uniform(rng, hidden, d_in, scale)?,
                w_h: init_uniform(rng, hidden, hidden, scale)?,
                b: Vector::zeros(hidden),
            }),
            CellKind::Lstm => CellParams::Lstm(LstmParams {
                candidate: GateParams::random(rng, hidden, d_in, scale)?,
                input: GateParams::random(rng, hidden, d_in, scale)?,
                forget: GateParams::random(rng, hidden, d_in, scale)?,
                output: GateParams::random(rng, hidden, d_in, scale)?,
                peep_input: init_uniform_vector(rng, hidden, scale)?,
                peep_forget: init_uniform_vector(rng, hidden, scale)?,
                peep_output: init_uniform_vector(rng, hidden, scale)?,
            }),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Vanilla(_) => CellKind::Vanilla,
            CellParams::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            CellParams::Vanilla(p) => p.hidden(),
            CellParams::Lstm(p) => p.hidden(),
        }
    }

    fn refs<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        match self {
            CellParams::Vanilla(p) => {
                mat_ref(out, format!("{prefix}.w_x"), &p.w_x);
                mat_ref(out, format!("{prefix}.w_h"), &p.w_h);
                vec_ref(out, format!("{prefix}.b"), &p.b);
            }
            CellParams::Lstm(p) => {
                p.candidate.refs(&format!("{prefix}.candidate"), out);
                p.input.refs(&format!("{prefix}.input"), out);
                p.forget.refs(&format!("{prefix}.forget"), out);
                p.output.refs(&format!("{prefix}.output"), out);
                vec_ref(out, format!("{prefix}.input.peep"), &p.peep_input);
                vec_ref(out, format!("{prefix}.forget.peep"), &p.peep_forget);
                vec_ref(out, format!("{prefix}.output.peep"), &p.peep_output);
            }
        }
    }

    fn muts<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        match self {
            CellParams::Vanilla(p) => {
                mat_mut(out, format!("{prefix}.w_x"), &mut p.w_x);
                mat_mut(out, format!("{prefix}.w_h"), &mut p.w_h);
                vec_mut(out, format!("{prefix}.b"), &mut p.b);
            }
            CellParams::Lstm(p) => {
                p.candidate.muts(&format!("{prefix}.candidate"), out);
                p.input.muts(&format!("{prefix}.input"), out);
                p.forget.muts(&format!("{prefix}.forget"), out);
                p.output.muts(&format!("{prefix}.output"), out);
                vec_mut(out, format!("{prefix}.input.peep"), &mut p.peep_input);
                vec_mut(out, format!("{prefix}.forget.peep"), &mut p.peep_forget);
                vec_mut(out, format!("{prefix}.output.peep"), &mut p.peep_output);
            }
        }
    }

    fn matches(&self, kind: CellKind, hidden: usize, d_in: usize) -> bool {
        match self {
            CellParams::Vanilla(p) => {
                kind == CellKind::Vanilla && p.is_consistent() && p.hidden() == hidden && p.input_width() == d_in
            }
            CellParams::Lstm(p) => {
                kind == CellKind::Lstm && p.is_consistent() && p.hidden() == hidden && p.input_width() == d_in
            }
        }
    }
}

impl OutputParams {
    pub fn zeros(n_classes: usize, width: usize) -> Self {
        OutputParams {
            w_ym: Matrix::zeros(n_classes, width),
            b_y: Vector::zeros(n_classes),
        }
    }
}

impl Model {
    /// All-zero parameters of the given shape.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = (0..arch.layers)
            .map(|l| {
                let d = arch.layer_input_width(l);
                LayerParams {
                    forward: CellParams::zeros(arch.cell, arch.hidden, d),
                    backward: (arch.direction == Direction::Bidirectional)
                        .then(|| CellParams::zeros(arch.cell, arch.hidden, d)),
                }
            })
            .collect();
        let output = OutputParams::zeros(arch.n_classes, arch.output_width());
        Ok(Model {
            arch,
            layers,
            output,
        })
    }

    /// Weights uniform in `[-scale, scale]`; gate biases zero. Draw order is
    /// fixed: layer by layer, forward cell before backward cell, readout last.
    pub fn init(arch: Architecture, rng: &mut Rng, scale: f64) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::with_capacity(arch.layers);
        for l in 0..arch.layers {
            let d = arch.layer_input_width(l);
            let forward = CellParams::random(arch.cell, rng, arch.hidden, d, scale)?;
            let backward = match arch.direction {
                Direction::Forward => None,
                Direction::Bidirectional => Some(CellParams::random(arch.cell, rng, arch.hidden, d, scale)?),
            };
            layers.push(LayerParams { forward, backward });
        }
        let output = OutputParams {
            w_ym: init_uniform(rng, arch.n_classes, arch.output_width(), scale)?,
            b_y: Vector::zeros(arch.n_classes),
        };
        Ok(Model {
            arch,
            layers,
            output,
        })
    }

    /// Sets every LSTM forget-gate bias to `value`; vanilla cells are untouched.
    pub fn set_forget_bias(&mut self, value: f64) {
        for layer in &mut self.layers {
            for cell in std::iter::once(&mut layer.forward).chain(layer.backward.as_mut()) {
                if let CellParams::Lstm(p) = cell {
                    p.forget.b.fill(value);
                }
            }
        }
    }

    /// Checks that every tensor has the shape implied by `arch`.
    pub fn validate(&self) -> Result<()> {
        let arch = &self.arch;
        arch.validate()?;
        if self.layers.len() != arch.layers {
            return Err(Error::shape("Model", format!("{} layers", arch.layers), self.layers.len()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let d = arch.layer_input_width(l);
            let bidir = arch.direction == Direction::Bidirectional;
            let ok = layer.forward.matches(arch.cell, arch.hidden, d)
                && match (&layer.backward, bidir) {
                    (Some(b), true) => b.matches(arch.cell, arch.hidden, d),
                    (None, false) => true,
                    _ => false,
                };
            if !ok {
                return Err(Error::shape(
                    "Model",
                    format!("layer {l}: {} cells of hidden {} over input {d}", arch.cell, arch.hidden),
                    "inconsistent parameter tensors",
                ));
            }
        }
        if self.output.w_ym.shape() != (arch.n_classes, arch.output_width()) || self.output.b_y.len() != arch.n_classes
        {
            return Err(Error::shape(
                "Model readout",
                format!("{}x{}", arch.n_classes, arch.output_width()),
                &self.output.w_ym,
            ));
        }
        Ok(())
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward.refs(&format!("layer{l}.fwd"), &mut out);
            if let Some(b) = &layer.backward {
                b.refs(&format!("layer{l}.bwd"), &mut out);
            }
        }
        mat_ref(&mut out, "readout.w_ym".into(), &self.output.w_ym);
        vec_ref(&mut out, "readout.b_y".into(), &self.output.b_y);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.forward.muts(&format!("layer{l}.fwd"), &mut out);
            if let Some(b) = &mut layer.backward {
                b.muts(&format!("layer{l}.bwd"), &mut out);
            }
        }
        mat_mut(&mut out, "readout.w_ym".into(), &mut self.output.w_ym);
        vec_mut(&mut out, "readout.b_y".into(), &mut self.output.b_y);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// All parameters concatenated in [`Model::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(Error::shape("Model::set_flat", n, flat.len()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Same architecture, every entry zero.
    pub fn zeros_like(&self) -> Model {
        Model::zeros(self.arch.clone()).expect("architecture of a built model is valid")
    }
}

/// Total scalar parameter count for `arch`; errors on a degenerate shape.
pub fn count_params(arch: &Architecture) -> Result<usize> {
    arch.param_count()
}

fn check_len(op: &'static str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("{what} of length {want}"), format!("length {got}")));
    }
    Ok(())
}

/// One step of the vanilla recurrence.
pub fn vanilla_step(p: &VanillaRnnParams, h_prev: &Vector, x: &Vector) -> Result<Vector> {
    if !p.is_consistent() {
        return Err(Error::shape("vanilla_step", "consistent params", "ragged params"));
    }
    check_len("vanilla_step", "h_prev", h_prev.len(), p.hidden())?;
    check_len("vanilla_step", "x", x.len(), p.input_width())?;
    let mut h = Vector::zeros(p.hidden());
    vanilla_kernel(p, h_prev, x, &mut h);
    Ok(h)
}

fn vanilla_kernel(p: &VanillaRnnParams, h_prev: &[f64], x: &[f64], h: &mut [f64]) {
    h.copy_from_slice(&p.b);
    p.w_x.matvec_acc(x, h);
    p.w_h.matvec_acc(h_prev, h);
    for v in h.iter_mut() {
        *v = v.tanh();
    }
}

/// Gate activations of one LSTM step, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStepTrace {
    pub candidate: Vector,
    pub input: Vector,
    pub forget: Vector,
    pub output: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
    pub m: Vector,
}

/// One step of the peephole LSTM.
pub fn lstm_step(p: &LstmParams, s_prev: &LstmState, x: &Vector) -> Result<LstmState> {
    let trace = lstm_step_traced(p, s_prev, x)?;
    Ok(LstmState {
        c: trace.c,
        m: trace.m,
    })
}

/// [`lstm_step`] returning every intermediate activation.
pub fn lstm_step_traced(p: &LstmParams, s_prev: &LstmState, x: &Vector) -> Result<LstmStepTrace> {
    if !p.is_consistent() {
        return Err(Error::shape("lstm_step", "consistent params", "ragged params"));
    }
    let h = p.hidden();
    check_len("lstm_step", "c_prev", s_prev.c.len(), h)?;
    check_len("lstm_step", "m_prev", s_prev.m.len(), h)?;
    check_len("lstm_step", "x", x.len(), p.input_width())?;
    let mut bufs: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; h]);
    {
        let [cand, i, f, o, c, tanh_c, m] = &mut bufs;
        lstm_kernel(
            p,
            x,
            &s_prev.c,
            &s_prev.m,
            LstmSlots {
                cand,
                i,
                f,
                o,
                c,
                tanh_c,
                m,
            },
        );
    }
    let [candidate, input, forget, output, c, tanh_c, m] = bufs.map(Vector::from);
    Ok(LstmStepTrace {
        candidate,
        input,
        forget,
        output,
        c,
        tanh_c,
        m,
    })
}

struct LstmSlots<'a> {
    cand: &'a mut [f64],
    i: &'a mut [f64],
    f: &'a mut [f64],
    o: &'a mut [f64],
    c: &'a mut [f64],
    tanh_c: &'a mut [f64],
    m: &'a mut [f64],
}

fn gate_preactivation(g: &GateParams, x: &[f64], m_prev: &[f64], out: &mut [f64]) {
    out.copy_from_slice(&g.b);
    g.w_x.matvec_acc(x, out);
    g.w_m.matvec_acc(m_prev, out);
}

fn lstm_kernel(p: &LstmParams, x: &[f64], c_prev: &[f64], m_prev: &[f64], s: LstmSlots<'_>) {
    gate_preactivation(&p.candidate, x, m_prev, s.cand);
    gate_preactivation(&p.input, x, m_prev, s.i);
    gate_preactivation(&p.forget, x, m_prev, s.f);
    gate_preactivation(&p.output, x, m_prev, s.o);
    for k in 0..s.c.len() {
        let cand = s.cand[k].tanh();
        let i = sigmoid_scalar(s.i[k] + p.peep_input[k] * c_prev[k]);
        let f = sigmoid_scalar(s.f[k] + p.peep_forget[k] * c_prev[k]);
        let c = i * cand + f * c_prev[k];
        let o = sigmoid_scalar(s.o[k] + p.peep_output[k] * c);
        let tc = c.tanh();
        s.cand[k] = cand;
        s.i[k] = i;
        s.f[k] = f;
        s.c[k] = c;
        s.o[k] = o;
        s.tanh_c[k] = tc;
        s.m[k] = o * tc;
    }
}

/// Softmax readout for one frame.
pub fn output_step(p: &OutputParams, m: &Vector) -> Result<Vector> {
    check_len("output_step", "m", m.len(), p.w_ym.cols())?;
    if p.b_y.len() != p.w_ym.rows() {
        return Err(Error::shape("output_step", &p.w_ym, format!("bias of length {}", p.b_y.len())));
    }
    let mut y = Vector::zeros(p.b_y.len());
    readout_kernel(p, m, &mut y);
    Ok(y)
}

fn readout_kernel(p: &OutputParams, m: &[f64], y: &mut [f64]) {
    y.copy_from_slice(&p.b_y);
    p.w_ym.matvec_acc(m, y);
    softmax_in_place(y);
}

/// Inverted-dropout mask: each entry is 0 with probability `p_drop`, else
/// `1 / (1 - p_drop)`.
pub fn dropout_mask(rng: &mut Rng, len: usize, p_drop: f64) -> Result<Vector> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::contract(format!("dropout probability must be in [0, 1), got {p_drop}")));
    }
    let keep = 1.0 / (1.0 - p_drop);
    Ok((0..len)
        .map(|_| if rng.bernoulli(p_drop) { 0.0 } else { keep })
        .collect::<Vec<_>>()
        .into())
}

/// Whether a forward pass samples dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RunMode {
    Eval,
    Train { dropout: f64 },
}

/// Activations of one cell over a whole sequence, in processing order (the
/// backward cell of a bidirectional layer processes time in reverse).
#[derive(Clone, Debug)]
pub(crate) enum CellTrace {
    Vanilla {
        h: Matrix,
    },
    Lstm {
        candidate: Matrix,
        input: Matrix,
        forget: Matrix,
        output: Matrix,
        c: Matrix,
        tanh_c: Matrix,
        m: Matrix,
    },
}

impl CellTrace {
    /// Cell output at processing step `s`.
    pub(crate) fn output_row(&self, s: usize) -> &[f64] {
        match self {
            CellTrace::Vanilla { h } => h.row(s),
            CellTrace::Lstm { m, .. } => m.row(s),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerTrace {
    pub forward: CellTrace,
    pub backward: Option<CellTrace>,
    /// Dropout mask over the concatenated layer output, if sampled.
    pub mask: Option<Vec<f64>>,
    /// Layer output after dropout: the next layer's (or the readout's) input.
    pub output: Matrix,
}

/// Everything a forward pass computed, enough to run BPTT.
#[derive(Clone, Debug)]
pub(crate) struct SequenceTrace {
    pub layers: Vec<LayerTrace>,
    pub probs: Matrix,
}

/// Source of the per-layer dropout masks.
pub(crate) enum Masks<'a> {
    None,
    Sample { rng: &'a mut Rng, p_drop: f64 },
    Fixed(&'a [Option<Vec<f64>>]),
}

pub(crate) fn run_cell(cell: &CellParams, inputs: &Matrix, reversed: bool) -> CellTrace {
    let t_len = inputs.rows();
    let h = cell.hidden();
    let time = |s: usize| if reversed { t_len - 1 - s } else { s };
    match cell {
        CellParams::Vanilla(p) => {
            let mut hs = Matrix::zeros(t_len, h);
            let zero = vec![0.0; h];
            let mut prev = zero.clone();
            for s in 0..t_len {
                let row = hs.row_mut(s);
                vanilla_kernel(p, &prev, inputs.row(time(s)), row);
                prev.copy_from_slice(row);
            }
            CellTrace::Vanilla { h: hs }
        }
        CellParams::Lstm(p) => {
            let mut mats: [Matrix; 7] = std::array::from_fn(|_| Matrix::zeros(t_len, h));
            let mut c_prev = vec![0.0; h];
            let mut m_prev = vec![0.0; h];
            for s in 0..t_len {
                let [cand, i, f, o, c, tanh_c, m] = &mut mats;
                lstm_kernel(
                    p,
                    inputs.row(time(s)),
                    &c_prev,
                    &m_prev,
                    LstmSlots {
                        cand: cand.row_mut(s),
                        i: i.row_mut(s),
                        f: f.row_mut(s),
                        o: o.row_mut(s),
                        c: c.row_mut(s),
                        tanh_c: tanh_c.row_mut(s),
                        m: m.row_mut(s),
                    },
                );
                c_prev.copy_from_slice(c.row(s));
                m_prev.copy_from_slice(m.row(s));
            }
            let [candidate, input, forget, output, c, tanh_c, m] = mats;
            CellTrace::Lstm {
                candidate,
                input,
                forget,
                output,
                c,
                tanh_c,
                m,
            }
        }
    }
}

pub(crate) fn trace_sequence(model: &Model, xs: &Matrix, mut masks: Masks<'_>) -> Result<SequenceTrace> {
    model.validate()?;
    let arch = &model.arch;
    if xs.rows() == 0 {
        return Err(Error::contract("cannot run a model over an empty sequence"));
    }
    if xs.cols() != arch.n_inputs {
        return Err(Error::shape("forward_sequence", format!("{} input features", arch.n_inputs), xs.cols()));
    }
    if let Masks::Fixed(m) = &masks {
        if m.len() != model.layers.len() {
            return Err(Error::shape("forward_sequence", "one mask slot per layer", m.len()));
        }
    }
    let t_len = xs.rows();
    let h = arch.hidden;
    let width = arch.output_width();
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let input = if l == 0 { xs } else { &layers[l - 1].output };
        let forward = run_cell(&layer.forward, input, false);
        let backward = layer.backward.as_ref().map(|b| run_cell(b, input, true));
        let mut output = Matrix::zeros(t_len, width);
        for t in 0..t_len {
            let row = output.row_mut(t);
            row[..h].copy_from_slice(forward.output_row(t));
            if let Some(b) = &backward {
                row[h..].copy_from_slice(b.output_row(t_len - 1 - t));
            }
        }
        let mask = match &mut masks {
            Masks::None => None,
            Masks::Sample { rng, p_drop } => {
                // one mask per direction per sequence, fwd half first
                let mut m = dropout_mask(rng, h, *p_drop)?.into_vec();
                if backward.is_some() {
                    m.extend(dropout_mask(rng, h, *p_drop)?.iter());
                }
                Some(m)
            }
            Masks::Fixed(all) => all[l].clone(),
        };
        if let Some(m) = &mask {
            if m.len() != width {
                return Err(Error::shape("dropout mask", width, m.len()));
            }
            for t in 0..t_len {
                for (v, k) in output.row_mut(t).iter_mut().zip(m) {
                    *v *= k;
                }
            }
        }
        layers.push(LayerTrace {
            forward,
            backward,
            mask,
            output,
        });
    }
    let top = &layers.last().expect("at least one layer").output;
    let mut probs = Matrix::zeros(t_len, arch.n_classes);
    for t in 0..t_len {
        readout_kernel(&model.output, top.row(t), probs.row_mut(t));
    }
    Ok(SequenceTrace { layers, probs })
}

/// Runs the model over a whole sequence (`T × n_x`). In forward mode the row
/// for frame `t` depends only on frames `..=t`. Dropout is sampled from `rng`
/// only in [`RunMode::Train`]; `rng` is untouched in [`RunMode::Eval`].
pub fn forward_sequence(model: &Model, xs: &Matrix, mode: RunMode, rng: &mut Rng) -> Result<Prediction> {
    let masks = match mode {
        RunMode::Eval => Masks::None,
        RunMode::Train { dropout: 0.0 } => Masks::None,
        RunMode::Train { dropout } => Masks::Sample { rng, p_drop: dropout },
    };
    let trace = trace_sequence(model, xs, masks)?;
    Ok(Prediction::from_probs(trace.probs))
}

/// Inference-mode forward pass.
pub fn predict(model: &Model, xs: &Matrix) -> Result<Prediction> {
    let trace = trace_sequence(model, xs, Masks::None)?;
    Ok(Prediction::from_probs(trace.probs))
}
