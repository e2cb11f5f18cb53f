//! Neural layers built on the tape: linear, MLP with BatchNorm, LayerNorm-GRU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamKey, ParameterGroup, StatUpdate};
use super::tape::{Tape, Var};
use super::{NnError, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Layer widths `[input, hidden..., output]` plus activation and BatchNorm flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// BatchNorm after the input layer and each hidden layer.
    pub batch_norm: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, batch_norm: bool) -> Result<Self, NnError> {
        if widths.len() < 3 {
            return Err(NnError::InvalidArgument(format!(
                "an MLP needs at least one hidden layer, got widths {widths:?}"
            )));
        }
        Ok(Self { widths, activation, batch_norm })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamKey,
    pub bias: ParamKey,
    name: String,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(group: &mut ParameterGroup, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = group.add_uniform(&format!("{name}.weight"), inp, out, bound, rng);
        let bias = group.add_uniform(&format!("{name}.bias"), 1, out, bound, rng);
        Self { weight, bias, name: name.to_string() }
    }

    pub fn forward(&self, tape: &mut Tape, group: &ParameterGroup, x: Var) -> Result<Var, NnError> {
        let w = tape.param(group, self.weight);
        let b = tape.param(group, self.bias);
        tape.linear(x, w, Some(b)).map_err(|e| e.in_layer(&self.name))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamKey,
    pub shift: ParamKey,
    pub running_mean: ParamKey,
    pub running_var: ParamKey,
    name: String,
}

impl BatchNorm {
    pub fn new(group: &mut ParameterGroup, name: &str, width: usize) -> Self {
        Self {
            gain: group.add(&format!("{name}.gain"), Tensor::filled(1, width, 1.0)),
            shift: group.add(&format!("{name}.shift"), Tensor::zeros(1, width)),
            running_mean: group.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(1, width)),
            running_var: group.add_buffer(&format!("{name}.running_var"), Tensor::filled(1, width, 1.0)),
            name: name.to_string(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, group: &ParameterGroup, x: Var, mode: Mode) -> Result<Var, NnError> {
        let g = tape.param(group, self.gain);
        let s = tape.param(group, self.shift);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape
                    .batch_norm_train(x, g, s, BATCH_NORM_EPS)
                    .map_err(|e| e.in_layer(&self.name))?;
                tape.record_stat_update(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean: mean,
                    batch_var_unbiased: var,
                    momentum: BATCH_NORM_MOMENTUM,
                });
                Ok(y)
            }
            Mode::Eval => tape
                .batch_norm_eval(
                    x,
                    g,
                    s,
                    group.value(self.running_mean).data(),
                    group.value(self.running_var).data(),
                    BATCH_NORM_EPS,
                )
                .map_err(|e| e.in_layer(&self.name)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
    norms: Vec<BatchNorm>,
    name: String,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(group: &mut ParameterGroup, name: &str, spec: MlpSpec, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let depth = spec.widths.len() - 1;
        for l in 0..depth {
            let (i, o) = (spec.widths[l], spec.widths[l + 1]);
            layers.push(Linear::new(group, &format!("{name}.l{l}"), i, o, rng));
            if spec.batch_norm && l + 1 < depth {
                norms.push(BatchNorm::new(group, &format!("{name}.bn{l}"), o));
            }
        }
        Self { spec, layers, norms, name: name.to_string() }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn norms(&self) -> &[BatchNorm] {
        &self.norms
    }

    pub fn forward(&self, tape: &mut Tape, group: &ParameterGroup, x: Var, mode: Mode) -> Result<Var, NnError> {
        let width = tape.value(x).cols();
        if width != self.spec.input_width() {
            return Err(NnError::Shape {
                op: "mlp",
                detail: format!("{}: input width {} but spec expects {}", self.name, width, self.spec.input_width()),
            });
        }
        let depth = self.layers.len();
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, group, h)?;
            if l + 1 < depth {
                if self.spec.batch_norm {
                    h = self.norms[l].forward(tape, group, h, mode)?;
                }
                h = self.spec.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamKey,
    pub shift: ParamKey,
}

impl LayerNorm {
    pub fn new(group: &mut ParameterGroup, name: &str, width: usize) -> Self {
        Self {
            gain: group.add(&format!("{name}.gain"), Tensor::filled(1, width, 1.0)),
            shift: group.add(&format!("{name}.shift"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, group: &ParameterGroup, x: Var) -> Result<Var, NnError> {
        let g = tape.param(group, self.gain);
        let s = tape.param(group, self.shift);
        tape.layer_norm(x, g, s, LAYER_NORM_EPS)
    }
}

/// GRU cell with LayerNorm on the reset, update and candidate
/// pre-activations (one gain/shift pair each):
///
/// ```text
/// r  = σ(LN_r(x W_r + h U_r + b_r))
/// z  = σ(LN_z(x W_z + h U_z + b_z))
/// n  = tanh(LN_n(x W_n + b_n + r ⊙ (h U_n + c_n)))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_width: usize,
    pub hidden_width: usize,
    pub w_input: ParamKey,
    pub w_hidden: ParamKey,
    pub b_input: ParamKey,
    pub b_hidden: ParamKey,
    pub ln_reset: LayerNorm,
    pub ln_update: LayerNorm,
    pub ln_candidate: LayerNorm,
    name: String,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        group: &mut ParameterGroup,
        name: &str,
        input_width: usize,
        hidden_width: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden_width as f64).sqrt();
        let h3 = 3 * hidden_width;
        Self {
            input_width,
            hidden_width,
            w_input: group.add_uniform(&format!("{name}.w_input"), input_width, h3, bound, rng),
            w_hidden: group.add_uniform(&format!("{name}.w_hidden"), hidden_width, h3, bound, rng),
            b_input: group.add_uniform(&format!("{name}.b_input"), 1, h3, bound, rng),
            b_hidden: group.add_uniform(&format!("{name}.b_hidden"), 1, h3, bound, rng),
            ln_reset: LayerNorm::new(group, &format!("{name}.ln_reset"), hidden_width),
            ln_update: LayerNorm::new(group, &format!("{name}.ln_update"), hidden_width),
            ln_candidate: LayerNorm::new(group, &format!("{name}.ln_candidate"), hidden_width),
            name: name.to_string(),
        }
    }

    pub fn step(&self, tape: &mut Tape, group: &ParameterGroup, input: Var, state: Var) -> Result<Var, NnError> {
        let (xi, hs) = (tape.value(input).cols(), tape.value(state).cols());
        if xi != self.input_width || hs != self.hidden_width {
            return Err(NnError::Shape {
                op: "gru",
                detail: format!(
                    "{}: input/state widths {}/{} but cell expects {}/{}",
                    self.name, xi, hs, self.input_width, self.hidden_width
                ),
            });
        }
        let h = self.hidden_width;
        let wx = tape.param(group, self.w_input);
        let wh = tape.param(group, self.w_hidden);
        let bx = tape.param(group, self.b_input);
        let bh = tape.param(group, self.b_hidden);
        let gx = tape.linear(input, wx, Some(bx))?;
        let gh = tape.linear(state, wh, Some(bh))?;

        let xr = tape.slice_cols(gx, 0, h)?;
        let hr = tape.slice_cols(gh, 0, h)?;
        let r_pre = tape.add(xr, hr)?;
        let r_pre = self.ln_reset.forward(tape, group, r_pre)?;
        let r = tape.sigmoid(r_pre);

        let xz = tape.slice_cols(gx, h, h)?;
        let hz = tape.slice_cols(gh, h, h)?;
        let z_pre = tape.add(xz, hz)?;
        let z_pre = self.ln_update.forward(tape, group, z_pre)?;
        let z = tape.sigmoid(z_pre);

        let xn = tape.slice_cols(gx, 2 * h, h)?;
        let hn = tape.slice_cols(gh, 2 * h, h)?;
        let rhn = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, rhn)?;
        let n_pre = self.ln_candidate.forward(tape, group, n_pre)?;
        let n = tape.tanh(n_pre);

        // h' = n + z ⊙ (h − n)
        let diff = tape.sub(state, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}
