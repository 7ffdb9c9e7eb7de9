//! Layer types shared by every network: affine maps, GRU cells, the
//! bidirectional GRU used over message sequences, and layer normalization.

use rand::Rng;

use crate::error::NnError;
use crate::graph::{Graph, Matrix, Var, Weights};
use crate::params::{ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Gru,
    BiGru,
    LayerNorm,
    Activation,
}

/// Shape description of a layer. For `BiGru` the output width is the
/// concatenation of both directions, so it must be even.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn linear(input: usize, output: usize, activation: Activation) -> Self {
        Self { kind: LayerKind::Linear, input, output, activation }
    }

    pub fn gru(input: usize, hidden: usize) -> Self {
        Self { kind: LayerKind::Gru, input, output: hidden, activation: Activation::None }
    }

    pub fn bigru(input: usize, hidden: usize) -> Self {
        Self { kind: LayerKind::BiGru, input, output: 2 * hidden, activation: Activation::None }
    }

    pub fn layer_norm(width: usize) -> Self {
        Self { kind: LayerKind::LayerNorm, input: width, output: width, activation: Activation::None }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input == 0 || self.output == 0 {
            return Err(NnError::Config(format!("{:?}: widths must be positive", self.kind)));
        }
        match self.kind {
            LayerKind::BiGru if self.output % 2 != 0 => Err(NnError::Config(
                "BiGRU output width must be twice the hidden width".into(),
            )),
            LayerKind::LayerNorm | LayerKind::Activation if self.input != self.output => Err(
                NnError::Config(format!("{:?} cannot change width", self.kind)),
            ),
            LayerKind::LayerNorm if self.input < 2 => {
                Err(NnError::Config("layer norm needs width >= 2".into()))
            }
            _ => Ok(()),
        }
    }
}

fn expect_width(g: &Graph, x: Var, width: usize, what: &str) -> Result<(), NnError> {
    let got = g.shape(x).1;
    if got != width {
        return Err(NnError::Config(format!("{what}: expected input width {width}, got {got}")));
    }
    Ok(())
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::None => x,
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

/// `y = act(x W + b)` with `W` stored as `input x output`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: LayerSpec,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: LayerSpec,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        let bound = 1.0 / (spec.input as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), spec.input, spec.output, bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, spec.output, bound, rng);
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, g: &mut Graph, w: &Weights<'_>, x: Var) -> Result<Var, NnError> {
        expect_width(g, x, self.spec.input, "linear")?;
        let wv = g.weight(w, self.weight);
        let bv = g.weight(w, self.bias);
        let xw = g.matmul(x, wv)?;
        let y = g.add_row(xw, bv)?;
        Ok(activate(g, y, self.spec.activation))
    }
}

/// Stack of [`Linear`] layers applied in order.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; every layer uses `hidden` except the last, which uses `last`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if widths.len() < 2 {
            return Err(NnError::Config("mlp needs at least input and output width".into()));
        }
        let mut layers = Vec::new();
        for (k, pair) in widths.windows(2).enumerate() {
            let act = if k + 2 == widths.len() { last } else { hidden };
            let spec = LayerSpec::linear(pair[0], pair[1], act);
            layers.push(Linear::new(store, &format!("{name}.{k}"), spec, rng)?);
        }
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].spec.input
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output
    }

    pub fn forward(&self, g: &mut Graph, w: &Weights<'_>, mut x: Var) -> Result<Var, NnError> {
        for layer in &self.layers {
            x = layer.forward(g, w, x)?;
        }
        Ok(x)
    }
}

/// Single GRU cell with reset / update / candidate gates, packed in that
/// order along the columns of the input and recurrent weight matrices.
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        LayerSpec::gru(input, hidden).validate()?;
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: store.add_uniform(format!("{name}.w_ih"), input, 3 * hidden, bound, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), hidden, 3 * hidden, bound, rng),
            b_ih: store.add_uniform(format!("{name}.b_ih"), 1, 3 * hidden, bound, rng),
            b_hh: store.add_uniform(format!("{name}.b_hh"), 1, 3 * hidden, bound, rng),
            input,
            hidden,
        })
    }

    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> Var {
        g.constant(Matrix::zeros((rows, self.hidden)))
    }

    pub fn step(&self, g: &mut Graph, w: &Weights<'_>, x: Var, h: Var) -> Result<Var, NnError> {
        expect_width(g, x, self.input, "gru input")?;
        expect_width(g, h, self.hidden, "gru hidden")?;
        if g.shape(x).0 != g.shape(h).0 {
            return Err(NnError::Shape { op: "gru", left: g.shape(x), right: g.shape(h) });
        }
        let hd = self.hidden;
        let w_ih = g.weight(w, self.w_ih);
        let w_hh = g.weight(w, self.w_hh);
        let b_ih = g.weight(w, self.b_ih);
        let b_hh = g.weight(w, self.b_hh);

        let gi = g.matmul(x, w_ih)?;
        let gi = g.add_row(gi, b_ih)?;
        let gh = g.matmul(h, w_hh)?;
        let gh = g.add_row(gh, b_hh)?;

        let gi_rz = g.slice_cols(gi, 0, 2 * hd)?;
        let gh_rz = g.slice_cols(gh, 0, 2 * hd)?;
        let rz = g.add(gi_rz, gh_rz)?;
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hd)?;
        let z = g.slice_cols(rz, hd, 2 * hd)?;

        let gi_n = g.slice_cols(gi, 2 * hd, 3 * hd)?;
        let gh_n = g.slice_cols(gh, 2 * hd, 3 * hd)?;
        let rn = g.mul(r, gh_n)?;
        let n = g.add(gi_n, rn)?;
        let n = g.tanh(n);

        // h' = n + z ⊙ (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// Bidirectional GRU over a sequence of equally-shaped row batches. Output
/// at each position is `[forward_t, backward_t]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: Gru,
    pub backward: Gru,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        LayerSpec::bigru(input, hidden).validate()?;
        Ok(Self {
            forward: Gru::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            backward: Gru::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn output_width(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward(&self, g: &mut Graph, w: &Weights<'_>, seq: &[Var]) -> Result<Vec<Var>, NnError> {
        if seq.is_empty() {
            return Err(NnError::Config("BiGRU over an empty sequence".into()));
        }
        let rows = g.shape(seq[0]).0;
        let mut h = self.forward.zero_state(g, rows);
        let mut fwd = Vec::with_capacity(seq.len());
        for &x in seq {
            h = self.forward.step(g, w, x, h)?;
            fwd.push(h);
        }
        let mut h = self.backward.zero_state(g, rows);
        let mut bwd = vec![h; seq.len()];
        for (t, &x) in seq.iter().enumerate().rev() {
            h = self.backward.step(g, w, x, h)?;
            bwd[t] = h;
        }
        fwd.iter()
            .zip(bwd.iter())
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect()
    }
}

/// Per-row normalization followed by a learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self, NnError> {
        LayerSpec::layer_norm(width).validate()?;
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::ones((1, width))),
            beta: store.add(format!("{name}.beta"), Matrix::zeros((1, width))),
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, w: &Weights<'_>, x: Var) -> Result<Var, NnError> {
        expect_width(g, x, self.width, "layer norm")?;
        let gamma = g.weight(w, self.gamma);
        let beta = g.weight(w, self.beta);
        let n = g.normalize_rows(x, LAYER_NORM_EPS);
        let scaled = g.mul_row(n, gamma)?;
        g.add_row(scaled, beta)
    }
}
