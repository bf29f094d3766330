//! Learned building blocks: MLPs, a pre-norm transformer encoder layer,
//! set max-pooling and the loss primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

use super::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// `[input, hidden..., output]`.
    pub widths: Vec<usize>,
    /// One activation per affine layer.
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, seed: u64) -> Result<Self, AutodiffError> {
        if widths.len() < 2 {
            return Err(AutodiffError::Config("an MLP needs at least one layer".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(AutodiffError::Config(format!("MLP widths must be positive: {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(AutodiffError::Config(format!(
                "{} activations for {} layers",
                activations.len(),
                widths.len() - 1
            )));
        }
        Ok(Self {
            widths,
            activations,
            seed,
        })
    }

    /// ReLU on every hidden layer, linear output.
    pub fn relu_hidden(widths: Vec<usize>, seed: u64) -> Result<Self, AutodiffError> {
        let layers = widths.len().saturating_sub(1);
        let acts = (0..layers)
            .map(|i| if i + 1 < layers { Activation::Relu } else { Activation::None })
            .collect();
        Self::new(widths, acts, seed)
    }

    /// ReLU after every layer including the last.
    pub fn relu_all(widths: Vec<usize>, seed: u64) -> Result<Self, AutodiffError> {
        let layers = widths.len().saturating_sub(1);
        Self::new(widths, vec![Activation::Relu; layers], seed)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
fn init_uniform<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, in_width, &[in_width, out_width]));
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, in_width, &[out_width]));
        Self {
            weight,
            bias,
            in_width,
            out_width,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: MlpSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], &mut rng))
            .collect();
        Self { spec, layers }
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    /// Row-wise affine + activation chain.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_width() {
            return Err(AutodiffError::Shape(format!(
                "MLP expects N x {}, got {:?}",
                self.input_width(),
                shape
            )));
        }
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.spec.activations) {
            h = layer.forward(tape, store, h)?;
            if *act == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Overwrites every weight and bias with zeros.
    pub fn zero_out<T: Real>(&self, store: &mut ParamStore<T>) {
        for l in &self.layers {
            store.value_mut(l.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
            store.value_mut(l.bias).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerSpec {
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub seed: u64,
}

impl TransformerLayerSpec {
    pub fn new(width: usize, heads: usize, ff_width: usize, seed: u64) -> Result<Self, AutodiffError> {
        if width == 0 || heads == 0 || ff_width == 0 {
            return Err(AutodiffError::Config("transformer dimensions must be positive".into()));
        }
        if width % heads != 0 {
            return Err(AutodiffError::Config(format!(
                "model width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            width,
            heads,
            ff_width,
            seed,
        })
    }
}

/// Pre-norm encoder layer:
/// `y = x + Wo * MHA(LN1(x))`, `out = y + FFN(LN2(y))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub spec: TransformerLayerSpec,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
}

const LN_EPS: f64 = 1e-5;

impl TransformerLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: TransformerLayerSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.width;
        let ln1_gain = store.add(format!("{name}.ln1.gain"), Tensor::filled(&[d], T::one()));
        let ln1_bias = store.add(format!("{name}.ln1.bias"), Tensor::zeros(&[d]));
        let query = Linear::new(store, &format!("{name}.q"), d, d, &mut rng);
        let key = Linear::new(store, &format!("{name}.k"), d, d, &mut rng);
        let value = Linear::new(store, &format!("{name}.v"), d, d, &mut rng);
        let out = Linear::new(store, &format!("{name}.o"), d, d, &mut rng);
        let ln2_gain = store.add(format!("{name}.ln2.gain"), Tensor::filled(&[d], T::one()));
        let ln2_bias = store.add(format!("{name}.ln2.bias"), Tensor::zeros(&[d]));
        let ff1 = Linear::new(store, &format!("{name}.ff1"), d, spec.ff_width, &mut rng);
        let ff2 = Linear::new(store, &format!("{name}.ff2"), spec.ff_width, d, &mut rng);
        Self {
            spec,
            ln1_gain,
            ln1_bias,
            query,
            key,
            value,
            out,
            ln2_gain,
            ln2_bias,
            ff1,
            ff2,
        }
    }

    fn norm<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        gain: ParamId,
        bias: ParamId,
    ) -> Result<Var, AutodiffError> {
        let n = tape.layer_norm(x, T::lit(LN_EPS))?;
        let g = tape.param(store, gain);
        let b = tape.param(store, bias);
        let h = tape.mul_row(n, g)?;
        tape.add_row(h, b)
    }

    /// Multi-head self-attention over the rows of `x`.
    pub fn attention<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let dh = self.spec.width / self.spec.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.spec.heads);
        for h in 0..self.spec.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.out.forward(tape, store, cat)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.spec.width {
            return Err(AutodiffError::Shape(format!(
                "transformer expects S x {} with S >= 1, got {:?}",
                self.spec.width, shape
            )));
        }
        let n1 = self.norm(tape, store, x, self.ln1_gain, self.ln1_bias)?;
        let a = self.attention(tape, store, n1)?;
        let y = tape.add(x, a)?;
        let n2 = self.norm(tape, store, y, self.ln2_gain, self.ln2_bias)?;
        let f = self.ff1.forward(tape, store, n2)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f)?;
        tape.add(y, f)
    }

    pub fn zero_out<T: Real>(&self, store: &mut ParamStore<T>) {
        for l in [&self.query, &self.key, &self.value, &self.out, &self.ff1, &self.ff2] {
            store.value_mut(l.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
            store.value_mut(l.bias).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Channel-wise max over the rows of a `K x C` set.
pub fn maxpool_set<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var, AutodiffError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(AutodiffError::Shape(format!("maxpool_set expects K x C, got {shape:?}")));
    }
    if shape[0] == 0 {
        return Err(AutodiffError::Empty("maxpool over an empty set".into()));
    }
    let pooled = tape.segment_max(x, &[0, shape[0]])?;
    tape.reshape(pooled, &[shape[1]])
}

pub fn loss_smooth_l1<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, beta: T) -> Result<Var, AutodiffError> {
    tape.smooth_l1(pred, target, beta)
}

/// Mean binary focal loss of probabilities `s` against 0/1 targets.
pub fn loss_focal_binary<T: Real>(tape: &mut Tape<T>, s: Var, targets: &[T], gamma: T) -> Result<Var, AutodiffError> {
    let per = tape.focal(s, targets, gamma)?;
    tape.mean(per)
}
