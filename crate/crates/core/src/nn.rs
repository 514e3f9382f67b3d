//! Dense networks that carry input derivatives through every layer.
//!
//! A forward pass propagates, next to the values, up to two first-order
//! directional derivatives and one second derivative along a chosen input
//! direction. The matching backward pass returns parameter gradients of any
//! scalar built from those outputs, including the paths through the
//! derivative channels.
//!
//! Batches are stored channel-major: a matrix `width × (C·P)` where the
//! block of columns `[c·P, (c+1)·P)` holds channel `c` for all `P` points.
//! Channel 0 is the value, channels `1..=k` the tangents, and the last
//! channel (when requested) the second derivative.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensing::Standardizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    /// `(σ, σ', σ'', σ''')` at `a`. The relu kink uses subgradient 0.
    #[inline]
    fn derivs(self, a: f64) -> (f64, f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let s = a.tanh();
                let d1 = 1.0 - s * s;
                (s, d1, -2.0 * s * d1, d1 * (6.0 * s * s - 2.0))
            }
            Activation::Relu => {
                if a > 0.0 {
                    (a, 1.0, 0.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0, 0.0)
                }
            }
            Activation::Linear => (a, 1.0, 0.0, 0.0),
        }
    }
}

/// Which derivative channels a pass carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    /// Number of first-order directions; direction `d` seeds input `d`.
    pub tangents: usize,
    /// Tangent direction along which the second derivative is propagated.
    pub second: Option<usize>,
}

impl Channels {
    pub const VALUE: Channels = Channels { tangents: 0, second: None };

    pub fn count(&self) -> usize {
        1 + self.tangents + usize::from(self.second.is_some())
    }

    fn second_channel(&self) -> Option<usize> {
        self.second.map(|_| 1 + self.tangents)
    }
}

/// Layer sizes and activations; parameters are laid out per layer as the
/// row-major weight matrix (`out × in`) followed by the bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Architecture {
    pub fn new(sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 || sizes.contains(&0) {
            return Err(Error::config(format!("incompatible layer sizes {sizes:?} / activations {activations:?}")));
        }
        Ok(Self { sizes, activations })
    }

    /// `hidden` layers of `width` with activation `act`, then a linear output.
    pub fn mlp(inputs: usize, width: usize, hidden: usize, outputs: usize, act: Activation) -> Result<Self> {
        let mut sizes = vec![inputs];
        sizes.extend(std::iter::repeat(width).take(hidden));
        sizes.push(outputs);
        let mut activations = vec![act; hidden];
        activations.push(Activation::Linear);
        Self::new(sizes, activations)
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Offsets of `(weights, bias)` for layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.sizes[..l + 1].windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        (start, start + self.sizes[l + 1] * self.sizes[l])
    }
}

/// Saved intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    channels: Channels,
    n_points: usize,
    /// Layer inputs, `in × C·P`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations, `out × C·P`.
    pre: Vec<Array2<f64>>,
}

/// A dense feed-forward network `Θ_L ∘ … ∘ Θ_1` with `Θ_l(h) = σ(b + W h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetwork {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

impl DenseNetwork {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.n_params();
        Self { arch, params: vec![0.0; n] }
    }

    /// Glorot-uniform weights for tanh/linear layers, He-uniform for relu,
    /// zero biases.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(arch);
        for l in 0..net.arch.n_layers() {
            let (fan_in, fan_out) = (net.arch.sizes[l], net.arch.sizes[l + 1]);
            let limit = match net.arch.activations[l] {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let (w, b) = net.arch.offsets(l);
            for p in &mut net.params[w..b] {
                *p = rng.gen_range(-limit..=limit);
            }
        }
        net
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn pack(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn unpack(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params.len() {
            return Err(Error::config(format!("expected {} parameters, got {}", self.params.len(), flat.len())));
        }
        self.params.copy_from_slice(flat);
        Ok(())
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, _) = self.arch.offsets(l);
        let (rows, cols) = (self.arch.sizes[l + 1], self.arch.sizes[l]);
        ArrayView2::from_shape((rows, cols), &self.params[w..w + rows * cols]).expect("layer shape")
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.arch.offsets(l);
        &self.params[b..b + self.arch.sizes[l + 1]]
    }

    /// Forward pass on `inputs` (`in × P`). Tangent `d` is seeded with the
    /// unit vector on input `d`; the second-derivative seed is zero.
    /// Returns the output block `out × C·P` and the tape.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>, channels: Channels) -> (Array2<f64>, Tape) {
        let p = inputs.ncols();
        let c = channels.count();
        assert_eq!(inputs.nrows(), self.arch.inputs(), "input dimension");
        assert!(channels.tangents <= self.arch.inputs());
        let mut h = Array2::<f64>::zeros((self.arch.inputs(), c * p));
        h.slice_mut(s![.., 0..p]).assign(&inputs);
        for d in 0..channels.tangents {
            h.slice_mut(s![d, (1 + d) * p..(2 + d) * p]).fill(1.0);
        }
        let mut tape = Tape {
            channels,
            n_points: p,
            inputs: Vec::with_capacity(self.arch.n_layers()),
            pre: Vec::with_capacity(self.arch.n_layers()),
        };
        for l in 0..self.arch.n_layers() {
            let mut a = self.weights(l).dot(&h);
            {
                let mut value = a.slice_mut(s![.., 0..p]);
                for (mut row, &bias) in value.axis_iter_mut(Axis(0)).zip(self.bias(l)) {
                    row += bias;
                }
            }
            let out = activate(self.arch.activations[l], &a, channels, p);
            tape.inputs.push(std::mem::replace(&mut h, out));
            tape.pre.push(a);
        }
        (h, tape)
    }

    /// Reverse pass. `out_adjoint` has the shape of the forward output;
    /// parameter gradients are accumulated into `grad` and the adjoint of
    /// the input values (`in × P`) is returned.
    pub fn backward(&self, tape: &Tape, out_adjoint: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        assert_eq!(grad.len(), self.params.len());
        let p = tape.n_points;
        let channels = tape.channels;
        let mut adj = out_adjoint;
        for l in (0..self.arch.n_layers()).rev() {
            let a_bar = activate_adjoint(self.arch.activations[l], &tape.pre[l], &adj, channels, p);
            let (w_off, b_off) = self.arch.offsets(l);
            let (rows, cols) = (self.arch.sizes[l + 1], self.arch.sizes[l]);
            let w_grad = a_bar.dot(&tape.inputs[l].t());
            let mut gw =
                ArrayViewMut2::from_shape((rows, cols), &mut grad[w_off..w_off + rows * cols]).expect("layer shape");
            gw += &w_grad;
            let gb = &mut grad[b_off..b_off + rows];
            for (g, row) in gb.iter_mut().zip(a_bar.slice(s![.., 0..p]).axis_iter(Axis(0))) {
                *g += row.sum();
            }
            adj = self.weights(l).t().dot(&a_bar);
        }
        adj.slice(s![.., 0..p]).to_owned()
    }

    /// Values only, for a batch of inputs.
    pub fn eval(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward(inputs, Channels::VALUE).0
    }
}

fn activate(act: Activation, a: &Array2<f64>, ch: Channels, p: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(a.raw_dim());
    let sec = ch.second_channel();
    for r in 0..a.nrows() {
        let arow = a.row(r);
        let mut orow = out.row_mut(r);
        for j in 0..p {
            let (s0, s1, s2, _) = act.derivs(arow[j]);
            orow[j] = s0;
            for d in 0..ch.tangents {
                orow[(1 + d) * p + j] = s1 * arow[(1 + d) * p + j];
            }
            if let (Some(sc), Some(dir)) = (sec, ch.second) {
                let ad = arow[(1 + dir) * p + j];
                orow[sc * p + j] = s2 * ad * ad + s1 * arow[sc * p + j];
            }
        }
    }
    out
}

fn activate_adjoint(act: Activation, a: &Array2<f64>, y_bar: &Array2<f64>, ch: Channels, p: usize) -> Array2<f64> {
    if act == Activation::Linear {
        return y_bar.clone();
    }
    let mut out = Array2::<f64>::zeros(a.raw_dim());
    let sec = ch.second_channel();
    Zip::from(out.rows_mut()).and(a.rows()).and(y_bar.rows()).for_each(|mut orow, arow, yrow| {
        for j in 0..p {
            let (_, s1, s2, s3) = act.derivs(arow[j]);
            let mut v = yrow[j] * s1;
            for d in 0..ch.tangents {
                let k = (1 + d) * p + j;
                v += yrow[k] * s2 * arow[k];
                orow[k] = yrow[k] * s1;
            }
            if let (Some(sc), Some(dir)) = (sec, ch.second) {
                let k2 = sc * p + j;
                let kd = (1 + dir) * p + j;
                let ad = arow[kd];
                v += yrow[k2] * (s3 * ad * ad + s2 * arow[k2]);
                orow[kd] += yrow[k2] * 2.0 * s2 * ad;
                orow[k2] = yrow[k2] * s1;
            }
            orow[j] = v;
        }
    });
    out
}

/// Value and physical-coordinate derivatives of the density network.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThetaJet {
    pub value: f64,
    pub dt: f64,
    pub dx: f64,
    pub dxx: f64,
}

/// Density network `(t, x) ↦ ρ̄`: tanh hidden layers and a linear output,
/// fed with standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaNet {
    pub net: DenseNetwork,
}

/// Default density-network size: `8T/100` layers of `20L/7000` neurons,
/// clamped to `[4, 12]` layers and `[20, 64]` neurons.
pub fn default_theta_size(t_max: f64, length: f64) -> (usize, usize) {
    let layers = (8.0 * t_max / 100.0).round().clamp(4.0, 12.0) as usize;
    let width = (20.0 * length / 7000.0).round().clamp(20.0, 64.0) as usize;
    (layers, width)
}

impl ThetaNet {
    pub const CHANNELS: Channels = Channels { tangents: 2, second: Some(1) };

    pub fn new(hidden: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { net: DenseNetwork::init(Architecture::mlp(2, width, hidden, 1, Activation::Tanh)?, rng) })
    }

    pub fn from_network(net: DenseNetwork) -> Result<Self> {
        if net.arch.inputs() != 2 || net.arch.outputs() != 1 {
            return Err(Error::config("density network must map 2 inputs to 1 output"));
        }
        Ok(Self { net })
    }

    /// Builds the `2 × P` standardized input block.
    pub fn inputs(std: &Standardizer, points: &[(f64, f64)]) -> Array2<f64> {
        let mut x = Array2::zeros((2, points.len()));
        for (j, &(t, xp)) in points.iter().enumerate() {
            x[[0, j]] = std.t_to_std(t);
            x[[1, j]] = std.x_to_std(xp);
        }
        x
    }

    /// Value, `∂t`, `∂x`, `∂xx` at physical points.
    pub fn jets(&self, std: &Standardizer, points: &[(f64, f64)]) -> Vec<ThetaJet> {
        let x = Self::inputs(std, points);
        let (out, _) = self.net.forward(x.view(), Self::CHANNELS);
        let p = points.len();
        let (ts, xs) = (std.t_scale(), std.x_scale());
        (0..p)
            .map(|j| ThetaJet {
                value: out[[0, j]],
                dt: out[[0, p + j]] * ts,
                dx: out[[0, 2 * p + j]] * xs,
                dxx: out[[0, 3 * p + j]] * xs * xs,
            })
            .collect()
    }

    pub fn value(&self, std: &Standardizer, t: f64, x: f64) -> f64 {
        let inp = Self::inputs(std, &[(t, x)]);
        self.net.eval(inp.view())[[0, 0]]
    }

    pub fn values(&self, std: &Standardizer, points: &[(f64, f64)]) -> Vec<f64> {
        let inp = Self::inputs(std, points);
        self.net.eval(inp.view()).row(0).to_vec()
    }
}

/// `(value, ∂t, ∂x, ∂xx)` of the density network in physical coordinates.
pub fn theta_forward_derivs(net: &ThetaNet, std: &Standardizer, t: f64, x: f64) -> ThetaJet {
    net.jets(std, &[(t, x)])[0]
}

/// Trajectory network `t ↦ (y_1, …, y_N)`: a tanh branch and a relu branch,
/// each with 3 hidden layers of `2N` neurons, mixed by two trainable weights.
/// Outputs are standardized positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiNet {
    pub smooth: DenseNetwork,
    pub kinked: DenseNetwork,
    pub mix: [f64; 2],
}

/// Result of a trajectory-network pass at a batch of times.
#[derive(Debug, Clone)]
pub struct PhiOutput {
    /// Standardized positions, `N × P`.
    pub positions: Array2<f64>,
    /// `d(position_std)/dτ`, `N × P`.
    pub slopes: Array2<f64>,
    smooth_out: Array2<f64>,
    kinked_out: Array2<f64>,
    smooth_tape: Tape,
    kinked_tape: Tape,
}

impl PhiNet {
    pub fn new(n_agents: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = 2 * n_agents;
        Ok(Self {
            smooth: DenseNetwork::init(Architecture::mlp(1, w, 3, n_agents, Activation::Tanh)?, rng),
            kinked: DenseNetwork::init(Architecture::mlp(1, w, 3, n_agents, Activation::Relu)?, rng),
            mix: [0.5, 0.5],
        })
    }

    pub fn n_agents(&self) -> usize {
        self.smooth.arch.outputs()
    }

    pub fn n_params(&self) -> usize {
        self.smooth.n_params() + self.kinked.n_params() + 2
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = self.smooth.pack();
        v.extend(self.kinked.pack());
        v.extend(self.mix);
        v
    }

    pub fn unpack(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::config("trajectory network parameter count mismatch"));
        }
        let a = self.smooth.n_params();
        let b = a + self.kinked.n_params();
        self.smooth.unpack(&flat[..a])?;
        self.kinked.unpack(&flat[a..b])?;
        self.mix = [flat[b], flat[b + 1]];
        Ok(())
    }

    /// Forward pass at standardized times.
    pub fn forward(&self, taus: &[f64]) -> PhiOutput {
        let p = taus.len();
        let inp = Array2::from_shape_vec((1, p), taus.to_vec()).expect("shape");
        let ch = Channels { tangents: 1, second: None };
        let (so, st) = self.smooth.forward(inp.view(), ch);
        let (ko, kt) = self.kinked.forward(inp.view(), ch);
        let mixed = &so * self.mix[0] + &ko * self.mix[1];
        PhiOutput {
            positions: mixed.slice(s![.., 0..p]).to_owned(),
            slopes: mixed.slice(s![.., p..2 * p]).to_owned(),
            smooth_out: so,
            kinked_out: ko,
            smooth_tape: st,
            kinked_tape: kt,
        }
    }

    /// Backward pass given adjoints of the standardized positions and
    /// slopes. `grad` is laid out like [`PhiNet::pack`].
    pub fn backward(&self, out: &PhiOutput, pos_bar: &Array2<f64>, slope_bar: &Array2<f64>, grad: &mut [f64]) {
        let p = pos_bar.ncols();
        let n = pos_bar.nrows();
        let mut adj = Array2::<f64>::zeros((n, 2 * p));
        adj.slice_mut(s![.., 0..p]).assign(pos_bar);
        adj.slice_mut(s![.., p..2 * p]).assign(slope_bar);
        let a = self.smooth.n_params();
        let b = a + self.kinked.n_params();
        grad[b] += (&adj * &out.smooth_out).sum();
        grad[b + 1] += (&adj * &out.kinked_out).sum();
        let (gs, rest) = grad.split_at_mut(a);
        self.smooth.backward(&out.smooth_tape, &adj * self.mix[0], gs);
        self.kinked.backward(&out.kinked_tape, &adj * self.mix[1], &mut rest[..b - a]);
    }
}

/// Physical positions and velocities of every agent at time `t`.
pub fn phi_forward_derivs(net: &PhiNet, std: &Standardizer, t: f64) -> (Vec<f64>, Vec<f64>) {
    let out = net.forward(&[std.t_to_std(t)]);
    let ratio = std.t_scale() / std.x_scale();
    let pos = out.positions.column(0).iter().map(|&p| std.x_from_std(p)).collect();
    let vel = out.slopes.column(0).iter().map(|&v| v * ratio).collect();
    (pos, vel)
}

/// Header of a model checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub seed: u64,
    pub standardizer: Standardizer,
    pub theta: Architecture,
    pub phi_smooth: Architecture,
    pub phi_kinked: Architecture,
    pub v_f: f64,
    pub n_params: usize,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TRCKPT01";

/// Checkpoint layout: magic `TRCKPT01`, `u64` header length, JSON header,
/// then `n_params` little-endian `f64` values.
pub fn write_checkpoint(path: impl AsRef<Path>, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    if header.n_params != params.len() {
        return Err(Error::config("header parameter count does not match"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_vec(header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in params {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let params = crate::godunov::read_f64s(&mut r, header.n_params)?;
    Ok((header, params))
}
