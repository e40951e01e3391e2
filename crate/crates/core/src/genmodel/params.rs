use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{CELLS, NUM_CELL_CODES};
use crate::lang::vocab;
use crate::vision::{FusionMode, SEMANTIC_DIM};

/// How the image head produces a next-state image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    /// N learnable query slots read out all image tokens in one pass.
    #[default]
    OneStep,
    /// Image tokens emitted one at a time, each conditioned on the previous ones.
    AR,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub image_queries: usize,
    pub codebook_size: usize,
    pub max_seq_len: usize,
    pub variant: Variant,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: vocab().len(),
            image_queries: CELLS,
            codebook_size: NUM_CELL_CODES,
            max_seq_len: 192,
            variant: Variant::OneStep,
            fusion: FusionMode::Full,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for finite-difference checks (under 5k
    /// parameters).
    pub fn tiny() -> Self {
        ModelConfig { d_model: 4, n_layers: 1, n_heads: 2, d_ff: 8, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.image_queries != CELLS {
            return Err(Error::Config(format!("image_queries must equal the grid cell count {CELLS}")));
        }
        if self.vocab_size < vocab().len() {
            return Err(Error::Config(format!("vocab_size must be at least {}", vocab().len())));
        }
        if self.codebook_size < NUM_CELL_CODES {
            return Err(Error::Config(format!("codebook_size must be at least {NUM_CELL_CODES}")));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("layer count, d_ff and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub img_emb: Range<usize>,
    pub grid_pos: Range<usize>,
    pub seq_pos: Range<usize>,
    pub sem_w: Range<usize>,
    pub sem_b: Range<usize>,
    pub queries: Range<usize>,
    pub ar_start: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub text_w: Range<usize>,
    pub text_b: Range<usize>,
    pub img_w: Range<usize>,
    pub img_b: Range<usize>,
    /// (name, range, shape) for every tensor in storage order.
    pub tensors: Vec<(String, Range<usize>, Vec<usize>)>,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder {
    offset: usize,
    tensors: Vec<(String, Range<usize>, Vec<usize>)>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Range<usize> {
        let n: usize = shape.iter().product();
        let r = self.offset..self.offset + n;
        self.offset += n;
        self.tensors.push((name.into(), r.clone(), shape.to_vec()));
        self.inits.push(init);
        r
    }
}

impl Layout {
    fn build(cfg: &ModelConfig) -> (Layout, Vec<Init>) {
        let d = cfg.d_model;
        let emb = Init::Normal(0.02);
        let proj = Init::Normal(1.0 / (d as f64).sqrt());
        let out_proj = Init::Normal(1.0 / ((d * 2 * cfg.n_layers) as f64).sqrt());
        let mut b = Builder { offset: 0, tensors: Vec::new(), inits: Vec::new() };
        let tok_emb = b.add("tok_emb", &[cfg.vocab_size, d], emb);
        let img_emb = b.add("img_emb", &[cfg.codebook_size, d], emb);
        let grid_pos = b.add("grid_pos", &[cfg.image_queries, d], emb);
        let seq_pos = b.add("seq_pos", &[cfg.max_seq_len, d], emb);
        let sem_w = b.add("sem_w", &[d, SEMANTIC_DIM], Init::Normal(1.0 / (SEMANTIC_DIM as f64).sqrt()));
        let sem_b = b.add("sem_b", &[d], Init::Zeros);
        let (queries, ar_start) = match cfg.variant {
            Variant::OneStep => (b.add("queries", &[cfg.image_queries, d], emb), 0..0),
            Variant::AR => (0..0, b.add("ar_start", &[d], emb)),
        };
        let layers = (0..cfg.n_layers)
            .map(|l| LayerLayout {
                ln1_g: b.add(format!("layers.{l}.ln1_g"), &[d], Init::Ones),
                ln1_b: b.add(format!("layers.{l}.ln1_b"), &[d], Init::Zeros),
                wq: b.add(format!("layers.{l}.wq"), &[d, d], proj),
                wk: b.add(format!("layers.{l}.wk"), &[d, d], proj),
                wv: b.add(format!("layers.{l}.wv"), &[d, d], proj),
                wo: b.add(format!("layers.{l}.wo"), &[d, d], out_proj),
                ln2_g: b.add(format!("layers.{l}.ln2_g"), &[d], Init::Ones),
                ln2_b: b.add(format!("layers.{l}.ln2_b"), &[d], Init::Zeros),
                w1: b.add(format!("layers.{l}.w1"), &[d, cfg.d_ff], proj),
                b1: b.add(format!("layers.{l}.b1"), &[cfg.d_ff], Init::Zeros),
                w2: b.add(format!("layers.{l}.w2"), &[cfg.d_ff, d], Init::Normal(1.0 / ((cfg.d_ff * 2 * cfg.n_layers) as f64).sqrt())),
                b2: b.add(format!("layers.{l}.b2"), &[d], Init::Zeros),
            })
            .collect();
        let lnf_g = b.add("lnf_g", &[d], Init::Ones);
        let lnf_b = b.add("lnf_b", &[d], Init::Zeros);
        let text_w = b.add("text_w", &[d, cfg.vocab_size], proj);
        let text_b = b.add("text_b", &[cfg.vocab_size], Init::Zeros);
        let img_w = b.add("img_w", &[d, cfg.codebook_size], proj);
        let img_b = b.add("img_b", &[cfg.codebook_size], Init::Zeros);
        let layout = Layout {
            tok_emb,
            img_emb,
            grid_pos,
            seq_pos,
            sem_w,
            sem_b,
            queries,
            ar_start,
            layers,
            lnf_g,
            lnf_b,
            text_w,
            text_b,
            img_w,
            img_b,
            tensors: b.tensors,
            total: b.offset,
        };
        (layout, b.inits)
    }

    pub fn new(cfg: &ModelConfig) -> Layout {
        Layout::build(cfg).0
    }

    /// Whether weight decay applies to the tensor (matrices only; gains,
    /// biases and embeddings are exempt).
    pub fn decays(&self, name: &str) -> bool {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        matches!(leaf, "wq" | "wk" | "wv" | "wo" | "w1" | "w2" | "text_w" | "img_w" | "sem_w")
    }
}

/// All trainable parameters in one flat vector, plus an instrumented counter
/// of model forward calls.
#[derive(Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
    forward_calls: AtomicU64,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.clone(),
            forward_calls: AtomicU64::new(self.forward_calls()),
        }
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let data = vec![0.0; layout.total];
        Ok(ModelParams { config: config.clone(), layout, data, forward_calls: AtomicU64::new(0) })
    }

    pub fn from_data(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        let mut p = ModelParams::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} entries, layout needs {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub(crate) fn count_forward(&self) {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn reset_forward_calls(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with i.i.d. N(0, std²) noise added to every entry. Gradient checks
    /// probe such points: at initialization the small embeddings sit right
    /// where layer norm is most curved.
    pub fn jittered(&self, std: f64, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for w in out.data.iter_mut() {
            *w += std * standard_normal(&mut rng);
        }
        out
    }

    /// (tensor name, element count) for every tensor, plus the total.
    pub fn census(&self) -> (Vec<(String, usize)>, usize) {
        let rows = self.layout.tensors.iter().map(|(n, r, _)| (n.clone(), r.len())).collect();
        (rows, self.layout.total)
    }
}

/// Seeded initialization: embeddings and query vectors N(0, 0.02²); input
/// projections N(0, 1/d); residual output projections N(0, 1/(2·layers·fan_in));
/// layer-norm gains 1; every bias 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let (layout, inits) = Layout::build(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; layout.total];
    for ((_, range, _), init) in layout.tensors.iter().zip(&inits) {
        for v in &mut data[range.clone()] {
            *v = match init {
                Init::Normal(std) => std * standard_normal(&mut rng),
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
            };
        }
    }
    Ok(ModelParams { config: config.clone(), layout, data, forward_calls: AtomicU64::new(0) })
}

/// Box-Muller draw.
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
