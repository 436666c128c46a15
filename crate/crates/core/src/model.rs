//! Dual encoder: a small convolutional vision tower and a bag-of-tokens
//! text tower, each with a projection head into a shared unit-norm space.

use mammoclip_autodiff::{Array, Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::ClassPromptSet;
use crate::grid::Grid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    /// Stride (and window) of the max-pool closing the block; 1 disables it.
    pub pool_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisionEncoderConfig {
    pub input_size: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub embed_dim: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        let block = |channels| ConvBlock {
            channels,
            kernel: 3,
            pool_stride: 2,
        };
        Self {
            input_size: 224,
            conv_blocks: vec![block(8), block(16), block(32), block(32)],
            embed_dim: 64,
        }
    }
}

impl VisionEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("input_size and embed_dim must be positive".into()));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::Config("vision encoder needs at least one conv block".into()));
        }
        for b in &self.conv_blocks {
            if b.channels == 0 || b.pool_stride == 0 || b.kernel == 0 || b.kernel % 2 == 0 {
                return Err(Error::Config(format!("invalid conv block {b:?}")));
            }
        }
        if self.saliency_size() == 0 {
            return Err(Error::Config("conv blocks pool the input away entirely".into()));
        }
        Ok(())
    }

    /// Spatial side length of the final block's activation map.
    pub fn saliency_size(&self) -> usize {
        self.conv_blocks.iter().fold(self.input_size, |s, b| {
            if b.pool_stride > 1 {
                if s < b.pool_stride {
                    0
                } else {
                    (s - b.pool_stride) / b.pool_stride + 1
                }
            } else {
                s
            }
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.conv_blocks.last().map_or(0, |b| b.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocabulary: Vec<String>,
    pub token_embed_dim: usize,
    pub embed_dim: usize,
}

impl TextEncoderConfig {
    pub fn for_prompts(prompts: &ClassPromptSet, token_embed_dim: usize, embed_dim: usize) -> Self {
        Self {
            vocabulary: prompts.vocabulary(),
            token_embed_dim,
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() || self.token_embed_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.vocabulary {
            if t.is_empty() || t.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if !seen.insert(t) {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(())
    }

    pub fn covers(&self, prompts: &ClassPromptSet) -> Result<()> {
        for tokens in prompts.tokenized() {
            if let Some(t) = tokens.iter().find(|t| !self.vocabulary.contains(t)) {
                return Err(Error::Config(format!("vocabulary lacks prompt token {t:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualEncoderConfig {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
}

impl DualEncoderConfig {
    pub fn for_prompts(prompts: &ClassPromptSet) -> Self {
        let vision = VisionEncoderConfig::default();
        let text = TextEncoderConfig::for_prompts(prompts, 32, vision.embed_dim);
        Self { vision, text }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.embed_dim != self.text.embed_dim {
            return Err(Error::Config(format!(
                "vision embed_dim {} differs from text embed_dim {}",
                self.vision.embed_dim, self.text.embed_dim
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut in_ch = 1;
        for (i, b) in self.vision.conv_blocks.iter().enumerate() {
            layout.push((format!("vision.block{i}.weight"), vec![b.channels, in_ch, b.kernel, b.kernel]));
            layout.push((format!("vision.block{i}.bias"), vec![b.channels]));
            in_ch = b.channels;
        }
        let d = self.vision.embed_dim;
        layout.push(("vision.proj.weight".into(), vec![in_ch, d]));
        layout.push(("vision.proj.bias".into(), vec![d]));
        let (v, t) = (self.text.vocabulary.len(), self.text.token_embed_dim);
        layout.push(("text.embedding".into(), vec![v, t]));
        layout.push(("text.proj.weight".into(), vec![t, d]));
        layout.push(("text.proj.bias".into(), vec![d]));
        layout.push(("log_temperature".into(), vec![]));
        layout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
}

/// All learned state of the dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel {
    config: DualEncoderConfig,
    params: Vec<Param>,
}

/// Initial similarity scale, `1/τ = 10`.
pub const INITIAL_LOG_TEMPERATURE: f64 = std::f64::consts::LN_10;

/// Model parameters bound into one graph.
pub struct BoundModel<'g> {
    vars: Vec<Var<'g>>,
    blocks: usize,
}

impl<'g> BoundModel<'g> {
    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    fn block(&self, i: usize) -> (Var<'g>, Var<'g>) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn tail(&self, offset: usize) -> Var<'g> {
        self.vars[2 * self.blocks + offset]
    }

    pub fn log_temperature(&self) -> Var<'g> {
        self.tail(5)
    }
}

/// Cosine similarities between images (rows) and prompts (columns) plus the
/// similarity scale `exp(log_temperature)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarities {
    pub cosine: Array,
    pub scale: f64,
}

impl Similarities {
    pub fn from_embeddings(images: &Array, prompts: &Array, scale: f64) -> Result<Self> {
        let g = Graph::new();
        let cosine = g
            .constant(images.clone())?
            .cosine_similarity(g.constant(prompts.clone())?)?
            .value();
        Ok(Self { cosine, scale })
    }

    pub fn rows(&self) -> usize {
        self.cosine.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.cosine.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.cols();
        &self.cosine.data()[i * k..(i + 1) * k]
    }

    pub fn scaled(&self) -> Array {
        let data = self.cosine.data().iter().map(|v| v * self.scale).collect();
        Array::new(self.cosine.shape().to_vec(), data).expect("same shape")
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Array {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("shape")
}

impl DualEncoderModel {
    /// Fresh model: Glorot-uniform weights, zero biases, `log_temperature = ln 10`.
    pub fn new(config: DualEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name == "log_temperature" {
                    Array::scalar(INITIAL_LOG_TEMPERATURE)
                } else if name.ends_with(".bias") {
                    Array::zeros(&shape)
                } else {
                    let (fan_in, fan_out) = match shape.as_slice() {
                        [oc, ic, kh, kw] => (ic * kh * kw, oc * kh * kw),
                        [a, b] => (*a, *b),
                        _ => unreachable!("weights are matrices or kernels"),
                    };
                    glorot(&mut rng, &shape, fan_in, fan_out)
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuild from stored tensors, checking names and shapes against the
    /// configuration.
    pub fn from_parts(config: DualEncoderConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::format(
                "model",
                format!("expected {} tensors, found {}", layout.len(), params.len()),
            ));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::format(
                    "model",
                    format!("expected {name} {shape:?}, found {} {:?}", p.name, p.value.shape()),
                ));
            }
            if !p.value.is_finite() {
                return Err(Error::Numerical(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DualEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Parameter-update entry point used by the optimizers.
    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn log_temperature(&self) -> f64 {
        self.params.last().and_then(|p| p.value.item()).expect("log_temperature")
    }

    pub fn set_log_temperature(&mut self, value: f64) {
        self.params.last_mut().expect("log_temperature").value = Array::scalar(value);
    }

    /// Similarity scale `1/τ`.
    pub fn scale(&self) -> f64 {
        self.log_temperature().exp()
    }

    /// Copy whose parameters are exactly representable as `f32`.
    pub fn round_to_f32(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.round_to_f32(),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Result<BoundModel<'g>> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), trainable))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BoundModel {
            vars,
            blocks: self.config.vision.conv_blocks.len(),
        })
    }

    pub fn check_image(&self, image: &Grid) -> Result<()> {
        let s = self.config.vision.input_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Data(format!(
                "image is {}x{}, encoder expects {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        if !image.is_finite() {
            return Err(Error::Data("image contains non-finite pixels".into()));
        }
        Ok(())
    }

    pub fn image_input<'g>(&self, graph: &'g Graph, image: &Grid) -> Result<Var<'g>> {
        self.check_image(image)?;
        let s = self.config.vision.input_size;
        Ok(graph.constant(Array::new(vec![1, 1, s, s], image.data().to_vec())?)?)
    }

    /// Conv blocks up to and including the saliency layer, `[1, C, h, w]`.
    pub fn vision_features<'g>(&self, bound: &BoundModel<'g>, image: Var<'g>) -> Result<Var<'g>> {
        let mut x = image;
        for (i, block) in self.config.vision.conv_blocks.iter().enumerate() {
            let (w, b) = bound.block(i);
            x = x.conv2d(w, Some(b), 1, block.kernel / 2)?.relu()?;
            if block.pool_stride > 1 {
                x = x.max_pool2d(block.pool_stride, block.pool_stride)?;
            }
        }
        Ok(x)
    }

    /// Pool, project and normalize saliency-layer activations to `[1, D]`.
    pub fn vision_head<'g>(&self, bound: &BoundModel<'g>, features: Var<'g>) -> Result<Var<'g>> {
        Ok(features
            .global_avg_pool()?
            .dense(bound.tail(0), bound.tail(1))?
            .l2_normalize()?)
    }

    pub fn token_ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Data("empty prompt".into()));
        }
        tokens
            .iter()
            .map(|t| {
                self.config
                    .text
                    .vocabulary
                    .iter()
                    .position(|v| v == t)
                    .ok_or_else(|| Error::Data(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Mean token embedding, projected and normalized to `[1, D]`.
    pub fn text_embedding<'g>(&self, bound: &BoundModel<'g>, token_ids: &[usize]) -> Result<Var<'g>> {
        Ok(bound
            .tail(2)
            .gather_rows(token_ids)?
            .mean_rows()?
            .dense(bound.tail(3), bound.tail(4))?
            .l2_normalize()?)
    }

    /// `[K, D]` embeddings of several prompts inside one graph.
    pub fn prompt_embeddings<'g>(
        &self,
        bound: &BoundModel<'g>,
        prompts: &[Vec<String>],
    ) -> Result<Var<'g>> {
        let rows = prompts
            .iter()
            .map(|p| self.text_embedding(bound, &self.token_ids(p)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::concat(&rows, 0)?)
    }

    pub fn encode_image(&self, image: &Grid) -> Result<Array> {
        Ok(self.encode_image_with_activations(image)?.0)
    }

    /// Unit-norm `[D]` embedding plus the `[1, C, h, w]` saliency-layer
    /// activations.
    pub fn encode_image_with_activations(&self, image: &Grid) -> Result<(Array, Array)> {
        let g = Graph::new();
        let bound = self.bind(&g, false)?;
        let feats = self.vision_features(&bound, self.image_input(&g, image)?)?;
        let emb = self.vision_head(&bound, feats)?.value();
        let d = emb.len();
        Ok((emb.reshape(vec![d])?, feats.value()))
    }

    pub fn encode_text(&self, tokens: &[String]) -> Result<Array> {
        let g = Graph::new();
        let bound = self.bind(&g, false)?;
        let emb = self.text_embedding(&bound, &self.token_ids(tokens)?)?.value();
        let d = emb.len();
        Ok(emb.reshape(vec![d])?)
    }

    /// `[K, D]` embeddings of the class prompts.
    pub fn encode_prompts(&self, prompts: &[Vec<String>]) -> Result<Array> {
        let g = Graph::new();
        let bound = self.bind(&g, false)?;
        Ok(self.prompt_embeddings(&bound, prompts)?.value())
    }

    /// `[B, D]` embeddings, computed image-parallel.
    pub fn encode_images(&self, images: &[Grid]) -> Result<Array> {
        if images.is_empty() {
            return Err(Error::Data("empty image batch".into()));
        }
        let rows = images
            .par_iter()
            .map(|im| self.encode_image(im))
            .collect::<Result<Vec<_>>>()?;
        let d = self.config.vision.embed_dim;
        Ok(Array::new(vec![rows.len(), d], rows.into_iter().flat_map(Array::into_data).collect())?)
    }

    pub fn similarity_matrix(&self, images: &[Grid], prompts: &[Vec<String>]) -> Result<Similarities> {
        if prompts.len() < 2 {
            return Err(Error::Data("need at least two prompts".into()));
        }
        let img = self.encode_images(images)?;
        let txt = self.encode_prompts(prompts)?;
        Similarities::from_embeddings(&img, &txt, self.scale())
    }
}
