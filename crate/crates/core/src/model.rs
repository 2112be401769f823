//! Dense encoder and decoder networks and the reconstruction loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SLOPE: f64 = 0.2;

/// Fully connected network with leaky-rectifier hidden layers and a linear
/// output layer. Weights are stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    slope: f64,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// An [`Mlp`] whose parameters have been placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
    slope: f64,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(layer_dims: &[usize], slope: f64, rng: &mut R) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], w)?.with_grad());
            biases.push(Tensor::zeros(vec![fan_out]).with_grad());
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            slope,
            weights,
            biases,
        })
    }

    pub fn from_params(
        layer_dims: &[usize],
        slope: f64,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        let mlp = Self {
            layer_dims: layer_dims.to_vec(),
            slope,
            weights,
            biases,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    /// Single linear layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self {
            layer_dims: vec![dim, dim],
            slope: DEFAULT_SLOPE,
            weights: vec![Tensor::new(vec![dim, dim], w).unwrap().with_grad()],
            biases: vec![Tensor::zeros(vec![dim]).with_grad()],
        }
    }

    pub fn zeros(layer_dims: &[usize], slope: f64) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| Tensor::zeros(vec![p[0], p[1]]).with_grad())
            .collect();
        let biases = layer_dims[1..]
            .iter()
            .map(|&d| Tensor::zeros(vec![d]).with_grad())
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            slope,
            weights,
            biases,
        })
    }

    fn check_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::invalid(format!(
                "network needs at least two positive layer dims, got {layer_dims:?}"
            )));
        }
        Ok(())
    }

    /// Checks that weight and bias shapes agree with `layer_dims`.
    pub fn validate(&self) -> Result<()> {
        Self::check_dims(&self.layer_dims)?;
        let layers = self.layer_dims.len() - 1;
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(Error::invalid(format!(
                "expected {layers} layers, found {} weights and {} biases",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (l, pair) in self.layer_dims.windows(2).enumerate() {
            if self.weights[l].shape() != [pair[0], pair[1]] {
                return Err(Error::ShapeMismatch {
                    op: "mlp weight",
                    left: pair.to_vec(),
                    right: self.weights[l].shape().to_vec(),
                });
            }
            if self.biases[l].len() != pair[1] {
                return Err(Error::ShapeMismatch {
                    op: "mlp bias",
                    left: vec![pair[1]],
                    right: self.biases[l].shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.leaf(w)).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b)).collect(),
            slope: self.slope,
        }
    }

    pub fn write_grads(&mut self, tape: &Tape, bound: &BoundMlp) -> Result<()> {
        for (t, v) in self.weights.iter_mut().zip(&bound.weights) {
            tape.write_grad(*v, t)?;
        }
        for (t, v) in self.biases.iter_mut().zip(&bound.biases) {
            tape.write_grad(*v, t)?;
        }
        Ok(())
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("{prefix}.w{l}"), w));
            out.push((format!("{prefix}.b{l}"), b));
        }
        out
    }

    /// Forward pass outside of training; rows in, rows out.
    pub fn apply(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_rows(rows)?);
        let bound = self.bind(&mut tape);
        let y = bound.forward(&mut tape, x)?;
        Ok(tape.to_tensor(y).to_rows())
    }
}

impl BoundMlp {
    /// Parameter nodes in the order of [`Mlp::named_params_mut`].
    pub fn params(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let lin = tape.matmul(h, *w)?;
            h = tape.add_row(lin, *b)?;
            if l < last {
                h = tape.leaky_relu(h, self.slope);
            }
        }
        Ok(h)
    }
}

/// Encoder F and decoder H.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    /// Encoder dims `[input, hidden.., latent]`; the decoder mirrors them.
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        let encoder = Mlp::new(&dims, slope, rng)?;
        dims.reverse();
        let decoder = Mlp::new(&dims, slope, rng)?;
        Self::from_parts(encoder, decoder)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || decoder.output_dim() != encoder.input_dim()
        {
            return Err(Error::invalid(format!(
                "encoder {:?} and decoder {:?} do not mirror each other",
                encoder.layer_dims(),
                decoder.layer_dims()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAutoencoder {
        BoundAutoencoder {
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
        }
    }

    pub fn write_grads(&mut self, tape: &Tape, bound: &BoundAutoencoder) -> Result<()> {
        self.encoder.write_grads(tape, &bound.encoder)?;
        self.decoder.write_grads(tape, &bound.decoder)
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_params_mut("encoder");
        out.extend(self.decoder.named_params_mut("decoder"));
        out
    }

    pub fn encode_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.encoder.apply(rows)
    }
}

#[derive(Debug, Clone)]
pub struct BoundAutoencoder {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
}

impl BoundAutoencoder {
    /// Parameter nodes in the order of [`Autoencoder::named_params_mut`].
    pub fn params(&self) -> Vec<Var> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encoder.forward(tape, x)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.decoder.forward(tape, z)
    }
}

/// Batch of latent pairs with their time gaps.
#[derive(Debug, Clone)]
pub struct LatentPair {
    pub z_u: Var,
    pub z_v: Var,
    pub delta_t: Vec<f64>,
}

impl LatentPair {
    pub fn encode(
        tape: &mut Tape,
        model: &BoundAutoencoder,
        x_u: Var,
        x_v: Var,
        delta_t: &[f64],
    ) -> Result<Self> {
        if let Some(bad) = delta_t.iter().find(|&&dt| !(dt > 0.0)) {
            return Err(Error::invalid(format!("time gap must be positive, got {bad}")));
        }
        Ok(Self {
            z_u: model.encode(tape, x_u)?,
            z_v: model.encode(tape, x_v)?,
            delta_t: delta_t.to_vec(),
        })
    }
}

fn batch_rows(tape: &Tape, x: Var) -> usize {
    tape.shape(x).first().copied().unwrap_or(1).max(1)
}

/// Batch mean of `‖x − H(z)‖²` plus, when nearest SOM representations are
/// given, `‖x − H(g_ε)‖²`, over both time points.
#[allow(clippy::too_many_arguments)]
pub fn recon_loss(
    tape: &mut Tape,
    decoder: &BoundMlp,
    x_u: Var,
    x_v: Var,
    z_u: Var,
    z_v: Var,
    g_eps_u: Option<Var>,
    g_eps_v: Option<Var>,
) -> Result<Var> {
    let n = batch_rows(tape, x_u);
    let mut terms = Vec::with_capacity(4);
    for (x, z, g) in [(x_u, z_u, g_eps_u), (x_v, z_v, g_eps_v)] {
        for source in std::iter::once(z).chain(g) {
            let recon = decoder.forward(tape, source)?;
            let resid = tape.sub(x, recon)?;
            terms.push(tape.sq_norm(resid));
        }
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    Ok(tape.scale(total, 1.0 / n as f64))
}
