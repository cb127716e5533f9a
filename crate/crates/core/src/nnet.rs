//! Minimal differentiable network substrate.
//!
//! Dense multilayer perceptrons with hand-written forward and backward passes,
//! a reparameterized diagonal Gaussian head, FLOP accounting, and a flat binary
//! checkpoint format.
//!
//! Weights of a layer `in -> out` are stored row-major as `[out][in]`, followed
//! by the `out` biases. Layers are concatenated in order.

use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Lower and upper clamp applied to Gaussian log-variances.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Linear => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            input,
            output,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// Ordered layer descriptors of an MLP. Consecutive widths must chain.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    layers: Vec<LayerSpec>,
}

impl Layout {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 {
                return Err(Error::InvalidLayout(format!("layer {i} has a zero width")));
            }
            if i > 0 && layers[i - 1].output != l.input {
                return Err(Error::InvalidLayout(format!(
                    "layer {i} expects width {} but layer {} produces {}",
                    l.input,
                    i - 1,
                    layers[i - 1].output
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Tanh hidden layers followed by a linear output layer.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerSpec::new(prev, h, Activation::Tanh));
            prev = h;
        }
        layers.push(LayerSpec::new(prev, output, Activation::Linear));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }
}

/// Flat parameter storage for one MLP.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let n = layout.param_count();
        Self {
            layout,
            values: vec![0.0; n],
            generation: 0,
        }
    }

    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init<R: Rng + ?Sized>(layout: Layout, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(layout.param_count());
        for l in layout.layers() {
            let bound = 1.0 / (l.input as f64).sqrt();
            values.extend((0..l.input * l.output).map(|_| rng.random_range(-bound..=bound)));
            values.extend(std::iter::repeat_n(0.0, l.output));
        }
        Self {
            layout,
            values,
            generation: 0,
        }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        ensure_len("parameter vector", layout.param_count(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self {
            layout,
            values,
            generation: 0,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; invalidates tapes recorded against the old values.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation = self.generation.wrapping_add(1);
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Activation cache recorded by [`mlp_forward`].
#[derive(Clone, Debug)]
pub struct Tape {
    fingerprint: u64,
    generation: u64,
    // activations[0] is the input, activations[l + 1] the output of layer l.
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map_or(&[], Vec::as_slice)
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

pub fn mlp_forward(params: &ParamVector, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let layout = params.layout();
    if layout.is_empty() {
        return Err(Error::InvalidLayout("empty layout cannot be evaluated".into()));
    }
    ensure_len("mlp input", layout.input_width(), input.len())?;

    let mut activations = Vec::with_capacity(layout.layers().len() + 1);
    activations.push(input.to_vec());
    let mut offset = 0;
    for l in layout.layers() {
        let x = activations.last().expect("non-empty");
        let (w, rest) = params.values[offset..].split_at(l.input * l.output);
        let b = &rest[..l.output];
        let mut y: Vec<f64> = b.to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * l.input..(o + 1) * l.input];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *yo += acc;
        }
        if l.activation == Activation::Tanh {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        offset += l.param_count();
        activations.push(y);
    }
    let out = activations.last().expect("non-empty").clone();
    Ok((
        out,
        Tape {
            fingerprint: layout.fingerprint(),
            generation: params.generation,
            activations,
        },
    ))
}

/// Backward pass accumulating parameter gradients into `param_grad`.
///
/// Returns the gradient with respect to the network input.
pub fn mlp_backward_accumulate(
    params: &ParamVector,
    tape: &Tape,
    output_gradient: &[f64],
    param_grad: &mut [f64],
) -> Result<Vec<f64>> {
    let layout = params.layout();
    if tape.fingerprint != layout.fingerprint() {
        return Err(Error::StaleTape("tape was recorded for a different layout"));
    }
    if tape.generation != params.generation {
        return Err(Error::StaleTape("parameters changed since the forward pass"));
    }
    ensure_len("parameter gradient", params.len(), param_grad.len())?;
    ensure_len("output gradient", layout.output_width(), output_gradient.len())?;

    let mut offset = params.len();
    let mut delta = output_gradient.to_vec();
    for (li, l) in layout.layers().iter().enumerate().rev() {
        offset -= l.param_count();
        let x = &tape.activations[li];
        let y = &tape.activations[li + 1];
        if l.activation == Activation::Tanh {
            for (d, yv) in delta.iter_mut().zip(y) {
                *d *= 1.0 - yv * yv;
            }
        }
        let w = &params.values[offset..offset + l.input * l.output];
        let (gw, gb) = param_grad[offset..offset + l.param_count()].split_at_mut(l.input * l.output);
        let mut prev = vec![0.0; l.input];
        for (o, &d) in delta.iter().enumerate() {
            gb[o] += d;
            if d == 0.0 {
                continue;
            }
            let row = o * l.input..(o + 1) * l.input;
            for ((g, xi), (p, wi)) in gw[row.clone()]
                .iter_mut()
                .zip(x)
                .zip(prev.iter_mut().zip(&w[row]))
            {
                *g += d * xi;
                *p += d * wi;
            }
        }
        delta = prev;
    }
    Ok(delta)
}

/// Backward pass returning fresh `(param_gradient, input_gradient)`.
pub fn mlp_backward(
    params: &ParamVector,
    tape: &Tape,
    output_gradient: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let input_grad = mlp_backward_accumulate(params, tape, output_gradient, &mut grad)?;
    Ok((
        ParamVector {
            layout: params.layout.clone(),
            values: grad,
            generation: 0,
        },
        input_grad,
    ))
}

/// Diagonal Gaussian `p(c|s)` with clamped log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    mean: Vec<f64>,
    logvar: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        ensure_len("posterior logvar", mean.len(), logvar.len())?;
        if mean.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian posterior".into()));
        }
        let logvar = logvar
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok(Self { mean, logvar })
    }

    /// Splits an encoder output `mean ‖ logvar`.
    pub fn from_encoder_output(raw: &[f64]) -> Result<Self> {
        if raw.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder output width {} is not even",
                raw.len()
            )));
        }
        let (m, l) = raw.split_at(raw.len() / 2);
        Self::new(m.to_vec(), l.to_vec())
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Reparameterized draw `mean + exp(logvar / 2) * noise`.
pub fn gaussian_sample(post: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>> {
    ensure_len("gaussian noise", post.dim(), noise.len())?;
    Ok(post
        .mean
        .iter()
        .zip(&post.logvar)
        .zip(noise)
        .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
        .collect())
}

/// Gradients of a sample with respect to `(mean, logvar)` given the
/// downstream gradient. The clamp is not differentiated through; callers
/// that hold raw log-variances zero the clamped entries themselves.
pub fn gaussian_sample_backward(
    post: &GaussianPosterior,
    noise: &[f64],
    sample_gradient: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_len("gaussian noise", post.dim(), noise.len())?;
    ensure_len("sample gradient", post.dim(), sample_gradient.len())?;
    let dmean = sample_gradient.to_vec();
    let dlogvar = post
        .logvar
        .iter()
        .zip(noise)
        .zip(sample_gradient)
        .map(|((lv, n), g)| g * n * 0.5 * (0.5 * lv).exp())
        .collect();
    Ok((dmean, dlogvar))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub forward_flops: u64,
    pub param_count: u64,
}

impl FlopReport {
    pub fn mflops(&self) -> f64 {
        self.forward_flops as f64 / 1e6
    }
}

impl std::ops::Add for FlopReport {
    type Output = FlopReport;

    fn add(self, rhs: Self) -> Self {
        FlopReport {
            forward_flops: self.forward_flops + rhs.forward_flops,
            param_count: self.param_count + rhs.param_count,
        }
    }
}

/// Per-sample forward FLOPs: a multiply-add counts 2, a bias add 1, and each
/// non-linear activation 1 per element.
pub fn count_flops(layout: &Layout) -> FlopReport {
    layout
        .layers()
        .iter()
        .fold(FlopReport::default(), |acc, l| {
            let (i, o) = (l.input as u64, l.output as u64);
            let act = match l.activation {
                Activation::Linear => 0,
                Activation::Tanh => o,
            };
            acc + FlopReport {
                forward_flops: 2 * i * o + o + act,
                param_count: i * o + o,
            }
        })
}

/// Writes `u32 layer count`, `(in, out, activation)` u32 triples, then the
/// parameters as little-endian f64.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamVector) -> std::io::Result<()> {
    let layers = params.layout().layers();
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        for v in [l.input as u32, l.output as u32, l.activation.code()] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamVector> {
    fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    let n = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let input = read_u32(&mut r)? as usize;
        let output = read_u32(&mut r)? as usize;
        let code = read_u32(&mut r)?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::InvalidLayout(format!("unknown activation code {code}")))?;
        layers.push(LayerSpec::new(input, output, activation));
    }
    let layout = Layout::new(layers)?;
    let mut values = Vec::with_capacity(layout.param_count());
    let mut b = [0u8; 8];
    for _ in 0..layout.param_count() {
        r.read_exact(&mut b)?;
        values.push(f64::from_le_bytes(b));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::InvalidLayout(format!(
            "{} trailing bytes after parameters",
            rest.len()
        )));
    }
    ParamVector::from_values(layout, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(i: usize, o: usize, act: Activation, values: Vec<f64>) -> ParamVector {
        let layout = Layout::new(vec![LayerSpec::new(i, o, act)]).unwrap();
        ParamVector::from_values(layout, values).unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = ParamVector::zeros(Layout::mlp(3, &[4], 2).unwrap());
        let (out, _) = mlp_forward(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let p = single(2, 2, Activation::Linear, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (out, _) = mlp_forward(&p, &[3.0, -1.0]).unwrap();
        assert_eq!(out, vec![3.0, -1.0]);
    }

    #[test]
    fn tanh_layer_hand_value() {
        let p = single(1, 1, Activation::Tanh, vec![2.0, 1.0]);
        let (out, _) = mlp_forward(&p, &[0.5]).unwrap();
        assert!((out[0] - 0.964_027_580_075_817).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = ParamVector::zeros(Layout::mlp(3, &[], 2).unwrap());
        assert!(matches!(
            mlp_forward(&p, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_backward_by_hand() {
        let (w, x, g) = (1.7, -0.3, 2.5);
        let p = single(1, 1, Activation::Linear, vec![w, 0.2]);
        let (_, tape) = mlp_forward(&p, &[x]).unwrap();
        let (pg, ig) = mlp_backward(&p, &tape, &[g]).unwrap();
        assert_eq!(pg.values(), &[g * x, g]);
        assert_eq!(ig, vec![g * w]);
    }

    #[test]
    fn zero_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ParamVector::init(Layout::mlp(3, &[5], 2).unwrap(), &mut rng);
        let (_, tape) = mlp_forward(&p, &[0.1, 0.2, 0.3]).unwrap();
        let (pg, ig) = mlp_backward(&p, &tape, &[0.0, 0.0]).unwrap();
        assert!(pg.values().iter().all(|&v| v == 0.0));
        assert!(ig.iter().all(|&v| v == 0.0));
        assert_eq!(pg.len(), p.len());
        assert_eq!(ig.len(), 3);
    }

    #[test]
    fn stale_and_mismatched_tapes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamVector::init(Layout::mlp(2, &[3], 1).unwrap(), &mut rng);
        let other = ParamVector::init(Layout::mlp(2, &[4], 1).unwrap(), &mut rng);
        let (_, tape) = mlp_forward(&p, &[1.0, 1.0]).unwrap();
        assert!(matches!(
            mlp_backward(&other, &tape, &[1.0]),
            Err(Error::StaleTape(_))
        ));
        p.values_mut()[0] += 1.0;
        assert!(matches!(mlp_backward(&p, &tape, &[1.0]), Err(Error::StaleTape(_))));
    }

    #[test]
    fn gaussian_sample_cases() {
        let post = GaussianPosterior::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(gaussian_sample(&post, &[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);

        let post = GaussianPosterior::new(vec![1.0], vec![4f64.ln()]).unwrap();
        let s = gaussian_sample(&post, &[0.5]).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-15);

        let post = GaussianPosterior::new(vec![0.3, -1.2], vec![3.0, -4.0]).unwrap();
        assert_eq!(gaussian_sample(&post, &[0.0, 0.0]).unwrap(), post.mean());
        assert!(gaussian_sample(&post, &[0.0]).is_err());
    }

    #[test]
    fn logvar_is_clamped() {
        let post = GaussianPosterior::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(post.logvar(), &[LOGVAR_MIN, LOGVAR_MAX]);
    }

    #[test]
    fn flop_counts() {
        let l = Layout::new(vec![LayerSpec::new(4, 3, Activation::Linear)]).unwrap();
        assert_eq!(count_flops(&l).forward_flops, 27);
        assert_eq!(count_flops(&Layout::default()).forward_flops, 0);
        let l = Layout::new(vec![
            LayerSpec::new(4, 3, Activation::Tanh),
            LayerSpec::new(3, 2, Activation::Linear),
        ])
        .unwrap();
        let r = count_flops(&l);
        assert_eq!(r.forward_flops, 44);
        assert_eq!(r.param_count, 15 + 8);
    }

    #[test]
    fn layout_rejects_broken_chain() {
        assert!(Layout::new(vec![
            LayerSpec::new(4, 3, Activation::Tanh),
            LayerSpec::new(2, 2, Activation::Linear),
        ])
        .is_err());
        assert!(Layout::new(vec![LayerSpec::new(0, 3, Activation::Tanh)]).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ParamVector::init(Layout::mlp(16, &[], 4).unwrap(), &mut rng);
        let (w, b) = p.values().split_at(64);
        assert!(w.iter().all(|v| v.abs() <= 0.25));
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_and_header() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ParamVector::init(Layout::mlp(3, &[2], 1).unwrap(), &mut rng);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert_eq!(buf.len(), 4 + 2 * 12 + 8 * p.len());
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..8], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, p);

        buf.push(0);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
