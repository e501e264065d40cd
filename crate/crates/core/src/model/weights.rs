use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Array1<f32>,
    pub ln1_bias: Array1<f32>,
    /// `d × 3d`, columns ordered as `[Q | K | V]`, head `h` owning columns `h*d_head..(h+1)*d_head` of each block.
    pub qkv_weight: Array2<f32>,
    pub qkv_bias: Array1<f32>,
    /// `d × d`; rows `h*d_head..(h+1)*d_head` are head `h`'s slice.
    pub out_weight: Array2<f32>,
    pub out_bias: Array1<f32>,
    pub ln2_gain: Array1<f32>,
    pub ln2_bias: Array1<f32>,
    pub fc_weight: Array2<f32>,
    pub fc_bias: Array1<f32>,
    pub proj_weight: Array2<f32>,
    pub proj_bias: Array1<f32>,
}

const LAYER_TENSORS: [&str; 12] = [
    "ln_1.gain",
    "ln_1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln_2.gain",
    "ln_2.bias",
    "mlp.fc.weight",
    "mlp.fc.bias",
    "mlp.proj.weight",
    "mlp.proj.bias",
];

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.d_mlp();
        LayerWeights {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            qkv_weight: Array2::zeros((d, 3 * d)),
            qkv_bias: Array1::zeros(3 * d),
            out_weight: Array2::zeros((d, d)),
            out_bias: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            fc_weight: Array2::zeros((d, m)),
            fc_bias: Array1::zeros(m),
            proj_weight: Array2::zeros((m, d)),
            proj_bias: Array1::zeros(d),
        }
    }

    fn slices(&self) -> [&[f32]; 12] {
        [
            slice1(&self.ln1_gain),
            slice1(&self.ln1_bias),
            slice2(&self.qkv_weight),
            slice1(&self.qkv_bias),
            slice2(&self.out_weight),
            slice1(&self.out_bias),
            slice1(&self.ln2_gain),
            slice1(&self.ln2_bias),
            slice2(&self.fc_weight),
            slice1(&self.fc_bias),
            slice2(&self.proj_weight),
            slice1(&self.proj_bias),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f32]; 12] {
        [
            self.ln1_gain.as_slice_mut().unwrap(),
            self.ln1_bias.as_slice_mut().unwrap(),
            self.qkv_weight.as_slice_mut().unwrap(),
            self.qkv_bias.as_slice_mut().unwrap(),
            self.out_weight.as_slice_mut().unwrap(),
            self.out_bias.as_slice_mut().unwrap(),
            self.ln2_gain.as_slice_mut().unwrap(),
            self.ln2_bias.as_slice_mut().unwrap(),
            self.fc_weight.as_slice_mut().unwrap(),
            self.fc_bias.as_slice_mut().unwrap(),
            self.proj_weight.as_slice_mut().unwrap(),
            self.proj_bias.as_slice_mut().unwrap(),
        ]
    }

    fn shapes(&self) -> [Vec<usize>; 12] {
        [
            self.ln1_gain.shape().to_vec(),
            self.ln1_bias.shape().to_vec(),
            self.qkv_weight.shape().to_vec(),
            self.qkv_bias.shape().to_vec(),
            self.out_weight.shape().to_vec(),
            self.out_bias.shape().to_vec(),
            self.ln2_gain.shape().to_vec(),
            self.ln2_bias.shape().to_vec(),
            self.fc_weight.shape().to_vec(),
            self.fc_bias.shape().to_vec(),
            self.proj_weight.shape().to_vec(),
            self.proj_bias.shape().to_vec(),
        ]
    }
}

fn slice1(a: &Array1<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

fn slice2(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

/// All transformer parameters. Also used as the gradient and optimizer-moment
/// container during pretraining, since those mirror the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `|V| × d`
    pub token_embedding: Array2<f32>,
    /// `max_seq_len × d`
    pub position_embedding: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Array1<f32>,
    pub final_ln_bias: Array1<f32>,
    /// `d × |V|`
    pub unembedding: Array2<f32>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Weights {
            token_embedding: Array2::zeros((cfg.vocab_size, cfg.d_model)),
            position_embedding: Array2::zeros((cfg.max_seq_len, cfg.d_model)),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            final_ln_gain: Array1::zeros(cfg.d_model),
            final_ln_bias: Array1::zeros(cfg.d_model),
            unembedding: Array2::zeros((cfg.d_model, cfg.vocab_size)),
        }
    }

    /// GPT-2 style initialization: N(0, std) matrices, zero biases, unit
    /// layernorm gains, residual projections scaled by `1/sqrt(2 * n_layers)`.
    pub fn random(cfg: &ModelConfig, seed: u64, std: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut w = Weights::zeros(cfg);
        let resid_std = std / (2.0 * cfg.n_layers as f32).sqrt();
        let mut fill = |s: &mut [f32], scale: f32| {
            for v in s {
                *v = normal.sample(&mut rng) * scale;
            }
        };
        fill(w.token_embedding.as_slice_mut().unwrap(), std);
        fill(w.position_embedding.as_slice_mut().unwrap(), std * 0.5);
        for layer in &mut w.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            fill(layer.qkv_weight.as_slice_mut().unwrap(), std);
            fill(layer.out_weight.as_slice_mut().unwrap(), resid_std);
            fill(layer.fc_weight.as_slice_mut().unwrap(), std);
            fill(layer.proj_weight.as_slice_mut().unwrap(), resid_std);
        }
        w.final_ln_gain.fill(1.0);
        fill(w.unembedding.as_slice_mut().unwrap(), std);
        w
    }

    /// Tensor names in serialization order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["wte".to_string(), "wpe".to_string()];
        for i in 0..self.layers.len() {
            names.extend(LAYER_TENSORS.iter().map(|n| format!("h.{i}.{n}")));
        }
        names.extend(["ln_f.gain", "ln_f.bias", "unembed"].map(String::from));
        names
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![
            self.token_embedding.shape().to_vec(),
            self.position_embedding.shape().to_vec(),
        ];
        for layer in &self.layers {
            shapes.extend(layer.shapes());
        }
        shapes.push(self.final_ln_gain.shape().to_vec());
        shapes.push(self.final_ln_bias.shape().to_vec());
        shapes.push(self.unembedding.shape().to_vec());
        shapes
    }

    pub fn slices(&self) -> Vec<&[f32]> {
        let mut out = vec![slice2(&self.token_embedding), slice2(&self.position_embedding)];
        for layer in &self.layers {
            out.extend(layer.slices());
        }
        out.push(slice1(&self.final_ln_gain));
        out.push(slice1(&self.final_ln_bias));
        out.push(slice2(&self.unembedding));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = vec![
            self.token_embedding.as_slice_mut().unwrap(),
            self.position_embedding.as_slice_mut().unwrap(),
        ];
        for layer in &mut self.layers {
            out.extend(layer.slices_mut());
        }
        out.push(self.final_ln_gain.as_slice_mut().unwrap());
        out.push(self.final_ln_bias.as_slice_mut().unwrap());
        out.push(self.unembedding.as_slice_mut().unwrap());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += other`, elementwise over every tensor.
    pub fn add_assign(&mut self, other: &Weights) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}
