//! The parametric denoiser `p̂(z_0 | z_t)`: a small non-causal transformer
//! with timestep conditioning, its hand-written backward pass, Adam, binary
//! checkpoints and the exact Bayes denoiser for toy data.

mod checkpoint;
mod model;
mod optim;
mod oracle;

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayView1, ArrayView2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{loss_grad, Forward};
pub use optim::{AdamConfig, OptState};
pub use oracle::ToyOracle;

/// Floating-point type the transformer can run in. Training uses `f32`;
/// gradient checks use `f64`.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeEmbedding {
    /// Fixed sinusoidal features of `t` followed by a learned projection.
    #[default]
    Sinusoidal,
    /// One learned vector per timestep.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Number of diffusion steps `T` the model is conditioned on.
    pub steps: usize,
    #[serde(default)]
    pub time_embedding: TimeEmbedding,
    /// Present for config compatibility; only 0 is accepted.
    #[serde(default)]
    pub dropout: f64,
    pub seed: u64,
}

impl DenoiserConfig {
    /// 2 layers, width 64, 4 heads, feed-forward 256.
    pub fn small(vocab_size: usize, max_len: usize, steps: usize, seed: u64) -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 256,
            vocab_size,
            max_len,
            steps,
            time_embedding: TimeEmbedding::Sinusoidal,
            dropout: 0.0,
            seed,
        }
    }

    /// 4 layers, width 256, 4 heads, feed-forward 1024.
    pub fn text8(vocab_size: usize, max_len: usize, steps: usize, seed: u64) -> Self {
        Self { layers: 4, model_dim: 256, ff_dim: 1024, ..Self::small(vocab_size, max_len, steps, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("steps", self.steps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::BadConfig(format!("{name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::BadConfig(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::BadConfig("dropout is not supported".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum TimeIdx {
    Sinusoidal { w: usize, b: usize },
    Learned { table: usize },
}

/// Names, shapes and offsets of every tensor, derived from the config alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
    pub(crate) tok: usize,
    pub(crate) pos: usize,
    pub(crate) time: TimeIdx,
    pub(crate) layers: Vec<LayerIdx>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) out_w: usize,
    pub(crate) out_b: usize,
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut specs: Vec<TensorSpec> = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset: total };
            total += spec.len();
            specs.push(spec);
            specs.len() - 1
        };
        let (d, f, v) = (cfg.model_dim, cfg.ff_dim, cfg.vocab_size);
        let tok = add("tok_emb".into(), vec![v + 1, d]);
        let pos = add("pos_emb".into(), vec![cfg.max_len, d]);
        let time = match cfg.time_embedding {
            TimeEmbedding::Sinusoidal => TimeIdx::Sinusoidal {
                w: add("time.w".into(), vec![d, d]),
                b: add("time.b".into(), vec![d]),
            },
            TimeEmbedding::Learned => TimeIdx::Learned { table: add("time.table".into(), vec![cfg.steps + 1, d]) },
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut a = |n: &str, shape: Vec<usize>| add(format!("layer{l}.{n}"), shape);
                LayerIdx {
                    ln1_g: a("ln1.g", vec![d]),
                    ln1_b: a("ln1.b", vec![d]),
                    wq: a("attn.wq", vec![d, d]),
                    bq: a("attn.bq", vec![d]),
                    wk: a("attn.wk", vec![d, d]),
                    bk: a("attn.bk", vec![d]),
                    wv: a("attn.wv", vec![d, d]),
                    bv: a("attn.bv", vec![d]),
                    wo: a("attn.wo", vec![d, d]),
                    bo: a("attn.bo", vec![d]),
                    ln2_g: a("ln2.g", vec![d]),
                    ln2_b: a("ln2.b", vec![d]),
                    w1: a("ff.w1", vec![d, f]),
                    b1: a("ff.b1", vec![f]),
                    w2: a("ff.w2", vec![f, d]),
                    b2: a("ff.b2", vec![d]),
                }
            })
            .collect();
        let lnf_g = add("lnf.g".into(), vec![d]);
        let lnf_b = add("lnf.b".into(), vec![d]);
        let out_w = add("out.w".into(), vec![d, v]);
        let out_b = add("out.b".into(), vec![v]);
        Ok(Self { specs, total, tok, pos, time, layers, lnf_g, lnf_b, out_w, out_b })
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn parameter_count(&self) -> usize {
        self.total
    }
}

/// All weights in one flat buffer, addressed through the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub config: DenoiserConfig,
    pub layout: Layout,
    pub data: Vec<F>,
}

impl<F: Scalar> Parameters<F> {
    /// Uniform weights with standard deviation `1/√fan_in`; embedding tables
    /// use `1/√model_dim`; biases zero; layer-norm gains one.
    pub fn init(config: &DenoiserConfig) -> Result<Self> {
        let layout = Layout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut data = vec![F::zero(); layout.total];
        for spec in &layout.specs {
            let slot = &mut data[spec.offset..spec.offset + spec.len()];
            let leaf = spec.name.rsplit('.').next().unwrap_or("");
            if leaf == "g" {
                slot.fill(F::one());
            } else if spec.shape.len() == 2 {
                let fan_in = if spec.name.ends_with("emb") || spec.name == "time.table" {
                    config.model_dim
                } else {
                    spec.shape[0]
                };
                let half_width = (3.0 / fan_in as f64).sqrt();
                for x in slot.iter_mut() {
                    *x = F::of(rng.gen_range(-half_width..half_width));
                }
            }
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn parameter_count(&self) -> usize {
        self.data.len()
    }

    pub(crate) fn v1(&self, id: usize) -> ArrayView1<'_, F> {
        let s = &self.layout.specs[id];
        ArrayView1::from(&self.data[s.offset..s.offset + s.len()])
    }

    pub(crate) fn v2(&self, id: usize) -> ArrayView2<'_, F> {
        let s = &self.layout.specs[id];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &self.data[s.offset..s.offset + s.len()])
            .expect("layout shapes are consistent")
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| G::of(x.to_f64().expect("finite"))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A trained (or freshly initialized) transformer ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<F = f32> {
    pub params: Parameters<F>,
}

impl<F: Scalar> Transformer<F> {
    pub fn new(params: Parameters<F>) -> Self {
        Self { params }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.params.config
    }
}

/// Largest number of sequences pushed through one forward pass at inference.
const PREDICT_CHUNK: usize = 128;

impl<F: Scalar> Denoiser for Transformer<F> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn predict(&self, zt: &[TokenId], t: usize) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[(zt, t)])?.pop().expect("one output"))
    }

    fn predict_batch(&self, inputs: &[(&[TokenId], usize)]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        let mut start = 0;
        while start < inputs.len() {
            let len = inputs[start].0.len();
            let mut end = start + 1;
            while end < inputs.len() && end - start < PREDICT_CHUNK && inputs[end].0.len() == len {
                end += 1;
            }
            let seqs: Vec<&[TokenId]> = inputs[start..end].iter().map(|(z, _)| *z).collect();
            let ts: Vec<usize> = inputs[start..end].iter().map(|(_, t)| *t).collect();
            let fwd = Forward::run(&self.params, &seqs, &ts, false)?;
            let v = self.vocab_size();
            for b in 0..seqs.len() {
                let rows = fwd.logits.slice(ndarray::s![b * len..(b + 1) * len, ..]);
                let mut probs = Vec::with_capacity(len * v);
                for row in rows.rows() {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64().unwrap()));
                    let e: Vec<f64> = row.iter().map(|x| (x.to_f64().unwrap() - max).exp()).collect();
                    let s: f64 = e.iter().sum();
                    probs.extend(e.iter().map(|x| x / s));
                }
                out.push(probs);
            }
            start = end;
        }
        Ok(out)
    }
}
