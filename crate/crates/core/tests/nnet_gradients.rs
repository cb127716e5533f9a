use emcomm::nnet::{
    count_flops, gaussian_sample, gaussian_sample_backward, mlp_backward, mlp_backward_accumulate, mlp_forward,
    Activation, GaussianPosterior, LayerSpec, Layout, ParamVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_layout(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Layout {
    let depth = rng.random_range(0..3);
    let mut layers = Vec::new();
    let mut prev = input;
    for _ in 0..depth {
        let w = rng.random_range(1..6);
        let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Linear };
        layers.push(LayerSpec::new(prev, w, act));
        prev = w;
    }
    let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Linear };
    layers.push(LayerSpec::new(prev, output, act));
    Layout::new(layers).unwrap()
}

fn vec_of(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Encoder → Gaussian sample → decoder, scored by `Σ w·y + ½ Σ y²`.
struct Pipeline {
    encoder: ParamVector,
    decoder: ParamVector,
    input: Vec<f64>,
    noise: Vec<f64>,
    weights: Vec<f64>,
}

impl Pipeline {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = rng.random_range(1..5);
        let latent = rng.random_range(1..4);
        let out = rng.random_range(1..4);
        let enc_layout = random_layout(&mut rng, input_dim, 2 * latent);
        let dec_layout = random_layout(&mut rng, latent, out);
        let encoder = ParamVector::init(enc_layout, &mut rng);
        let decoder = ParamVector::init(dec_layout, &mut rng);
        Self {
            encoder,
            decoder,
            input: vec_of(&mut rng, input_dim),
            noise: vec_of(&mut rng, latent),
            weights: vec_of(&mut rng, out),
        }
    }

    fn loss_of(&self, encoder: &ParamVector, decoder: &ParamVector) -> f64 {
        let (raw, _) = mlp_forward(encoder, &self.input).unwrap();
        let post = GaussianPosterior::from_encoder_output(&raw).unwrap();
        let z = gaussian_sample(&post, &self.noise).unwrap();
        let (y, _) = mlp_forward(decoder, &z).unwrap();
        y.iter().zip(&self.weights).map(|(y, w)| w * y + 0.5 * y * y).sum()
    }

    fn analytic(&self) -> (Vec<f64>, Vec<f64>) {
        let (raw, etape) = mlp_forward(&self.encoder, &self.input).unwrap();
        let post = GaussianPosterior::from_encoder_output(&raw).unwrap();
        let z = gaussian_sample(&post, &self.noise).unwrap();
        let (y, dtape) = mlp_forward(&self.decoder, &z).unwrap();
        let dy: Vec<f64> = y.iter().zip(&self.weights).map(|(y, w)| w + y).collect();
        let (dgrad, dz) = mlp_backward(&self.decoder, &dtape, &dy).unwrap();
        let (dmean, dlogvar) = gaussian_sample_backward(&post, &self.noise, &dz).unwrap();
        let draw: Vec<f64> = dmean.into_iter().chain(dlogvar).collect();
        let (egrad, _) = mlp_backward(&self.encoder, &etape, &draw).unwrap();
        (egrad.values().to_vec(), dgrad.values().to_vec())
    }
}

#[test]
fn composed_gradients_match_central_differences() {
    for seed in 0..100 {
        let p = Pipeline::new(seed);
        let (egrad, dgrad) = p.analytic();
        for i in 0..p.encoder.len() {
            let mut plus = p.encoder.clone();
            plus.values_mut()[i] += H;
            let mut minus = p.encoder.clone();
            minus.values_mut()[i] -= H;
            let fd = (p.loss_of(&plus, &p.decoder) - p.loss_of(&minus, &p.decoder)) / (2.0 * H);
            assert!(rel_err(egrad[i], fd) < TOL, "seed {seed} encoder[{i}]: {} vs {fd}", egrad[i]);
        }
        for i in 0..p.decoder.len() {
            let mut plus = p.decoder.clone();
            plus.values_mut()[i] += H;
            let mut minus = p.decoder.clone();
            minus.values_mut()[i] -= H;
            let fd = (p.loss_of(&p.encoder, &plus) - p.loss_of(&p.encoder, &minus)) / (2.0 * H);
            assert!(rel_err(dgrad[i], fd) < TOL, "seed {seed} decoder[{i}]: {} vs {fd}", dgrad[i]);
        }
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n_in, n_out) = (rng.random_range(1..6), rng.random_range(1..6));
        let params = ParamVector::init(random_layout(&mut rng, n_in, n_out), &mut rng);
        let x = vec_of(&mut rng, n_in);
        let g = vec_of(&mut rng, n_out);
        let f = |x: &[f64]| -> f64 {
            let (y, _) = mlp_forward(&params, x).unwrap();
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = mlp_forward(&params, &x).unwrap();
        let (_, dx) = mlp_backward(&params, &tape, &g).unwrap();
        for i in 0..n_in {
            let mut xp = x.clone();
            xp[i] += H;
            let mut xm = x.clone();
            xm[i] -= H;
            let fd = (f(&xp) - f(&xm)) / (2.0 * H);
            assert!(rel_err(dx[i], fd) < TOL, "seed {seed} input[{i}]");
        }
    }
}

#[test]
fn accumulation_adds_to_existing_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ParamVector::init(Layout::mlp(3, &[4], 2).unwrap(), &mut rng);
    let (_, tape) = mlp_forward(&params, &[0.1, -0.2, 0.3]).unwrap();
    let (fresh, _) = mlp_backward(&params, &tape, &[1.0, -1.0]).unwrap();
    let mut acc = vec![0.5; params.len()];
    mlp_backward_accumulate(&params, &tape, &[1.0, -1.0], &mut acc).unwrap();
    for (a, f) in acc.iter().zip(fresh.values()) {
        assert_eq!(*a, 0.5 + f);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ParamVector::init(Layout::mlp(5, &[7, 3], 4).unwrap(), &mut rng);
    let x = vec_of(&mut rng, 5);
    let (a, _) = mlp_forward(&params, &x).unwrap();
    let (b, _) = mlp_forward(&params.clone(), &x).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn zero_noise_sample_is_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let d = rng.random_range(1..8);
        let mean = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect::<Vec<f64>>();
        let logvar = (0..d).map(|_| rng.random_range(-20.0..20.0)).collect();
        let post = GaussianPosterior::new(mean.clone(), logvar).unwrap();
        assert_eq!(gaussian_sample(&post, &vec![0.0; d]).unwrap(), mean);
    }
}

#[test]
fn flops_follow_layer_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (n_in, n_out) = (rng.random_range(1..10), rng.random_range(1..10));
        let layout = random_layout(&mut rng, n_in, n_out);
        let expected: u64 = layout
            .layers()
            .iter()
            .map(|l| {
                let dense = 2 * l.input * l.output + l.output;
                let act = if l.activation == Activation::Tanh { l.output } else { 0 };
                (dense + act) as u64
            })
            .sum();
        let report = count_flops(&layout);
        assert_eq!(report.forward_flops, expected);
        assert_eq!(report.param_count as usize, layout.param_count());
        assert_eq!(count_flops(&layout), report);
    }
}
