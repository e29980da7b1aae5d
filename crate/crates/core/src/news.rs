//! News encoders: the text-encoder families, the category encoder, and the
//! multi-feature aggregation strategies that combine them.
//!
//! A news encoder maps one article to a dense vector. The text side comes in
//! five families:
//!
//! * `cnn_addatt` — word embeddings → 1-D convolution + ReLU → additive
//!   attention pooling;
//! * `mhsa_addatt` — word embeddings → multi-head self-attention → additive
//!   attention pooling;
//! * `cnn_mhsa_addatt` — both contextualizers stacked before pooling;
//! * `frozen_cls` — a precomputed per-article vector from a frozen store,
//!   passed through a trainable linear projection;
//! * `frozen_tokens_att` — precomputed per-token vectors pooled by trainable
//!   additive attention.
//!
//! In multi-feature mode a category encoder (category + subcategory
//! embeddings, summed, then a dense layer with ReLU) runs alongside the text
//! encoder and the two vectors are combined by one of three aggregation
//! strategies: additive attention over the pair, a trainable linear map on
//! the concatenation, or plain concatenation.
//!
//! Encoders are built through [`ParamBuilder`], so the same construction code
//! either initializes fresh parameters or re-binds to checkpointed ones by
//! name.

use serde::{Deserialize, Serialize};

use crate::data::frozen::{token_key, FrozenStore};
use crate::data::wordvec::WordVectorTable;
use crate::data::{NewsArticle, NewsCatalog, PAD_INDEX};
use crate::tensor::nn::{additive_attention_pool, multi_head_self_attention, AddAttParams, MhsaParams};
use crate::tensor::param::{ParamBuilder, ParamId, ParamSet};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Text-encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextFamily {
    /// Convolution + additive attention.
    CnnAddatt,
    /// Self-attention + additive attention.
    MhsaAddatt,
    /// Convolution, then self-attention, then additive attention.
    CnnMhsaAddatt,
    /// Frozen per-article vector + linear projection.
    FrozenCls,
    /// Frozen per-token vectors + trainable additive attention.
    FrozenTokensAtt,
}

impl TextFamily {
    /// Stable identifier used in configs and model labels.
    pub fn name(self) -> &'static str {
        match self {
            TextFamily::CnnAddatt => "cnn_addatt",
            TextFamily::MhsaAddatt => "mhsa_addatt",
            TextFamily::CnnMhsaAddatt => "cnn_mhsa_addatt",
            TextFamily::FrozenCls => "frozen_cls",
            TextFamily::FrozenTokensAtt => "frozen_tokens_att",
        }
    }

    /// Whether the family consumes the trainable word-embedding table.
    pub fn uses_word_embeddings(self) -> bool {
        matches!(self, TextFamily::CnnAddatt | TextFamily::MhsaAddatt | TextFamily::CnnMhsaAddatt)
    }

    /// Whether the family reads per-article frozen vectors.
    pub fn uses_frozen_cls(self) -> bool {
        matches!(self, TextFamily::FrozenCls)
    }

    /// Whether the family reads per-token frozen vectors.
    pub fn uses_frozen_tokens(self) -> bool {
        matches!(self, TextFamily::FrozenTokensAtt)
    }

    fn has_conv(self) -> bool {
        matches!(self, TextFamily::CnnAddatt | TextFamily::CnnMhsaAddatt)
    }

    fn has_mhsa(self) -> bool {
        matches!(self, TextFamily::MhsaAddatt | TextFamily::CnnMhsaAddatt)
    }
}

/// Strategy for combining the text vector with the category vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Project both features to the text dimension, pool with additive
    /// attention over the two-element set.
    Addatt,
    /// Concatenate, then a trainable linear map back to the text dimension.
    Linear,
    /// Plain concatenation; the news dimension grows by the category
    /// dimension.
    Con,
}

impl Aggregation {
    /// Stable identifier used in configs and model labels.
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Addatt => "addatt",
            Aggregation::Linear => "linear",
            Aggregation::Con => "con",
        }
    }
}

/// Configuration of a news encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewsEncoderConfig {
    /// Text-encoder family.
    pub family: TextFamily,
    /// Word-embedding dimension (trainable families only).
    pub word_dim: usize,
    /// Output dimension of the text path (frozen_tokens_att instead keeps
    /// its store's dimension).
    pub output_dim: usize,
    /// Convolution window (odd; CNN families only).
    pub cnn_window: usize,
    /// Self-attention heads (MHSA families only).
    pub heads: usize,
    /// Query dimension of every additive-attention block.
    pub query_dim: usize,
    /// Output dimension of the category encoder.
    pub category_dim: usize,
    /// Multi-feature aggregation; `None` = title-only (mono-feature) mode.
    pub aggregation: Option<Aggregation>,
}

impl Default for NewsEncoderConfig {
    fn default() -> Self {
        NewsEncoderConfig {
            family: TextFamily::CnnAddatt,
            word_dim: 300,
            output_dim: 256,
            cnn_window: 3,
            heads: 16,
            query_dim: 200,
            category_dim: 100,
            aggregation: None,
        }
    }
}

impl NewsEncoderConfig {
    /// Check internal consistency.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.output_dim == 0 || self.query_dim == 0 {
            return bad("output_dim and query_dim must be positive".into());
        }
        if self.family.uses_word_embeddings() && self.word_dim == 0 {
            return bad(format!("family {} requires word_dim > 0", self.family.name()));
        }
        if self.family.has_conv() && self.cnn_window % 2 == 0 {
            return bad(format!("cnn_window must be odd, got {}", self.cnn_window));
        }
        if self.family.has_mhsa() {
            if self.heads == 0 {
                return bad("heads must be positive for self-attention families".into());
            }
            if self.output_dim % self.heads != 0 {
                return bad(format!(
                    "output_dim {} not divisible by heads {}",
                    self.output_dim, self.heads
                ));
            }
        }
        if self.aggregation.is_some() && self.category_dim == 0 {
            return bad("category_dim must be positive in multi-feature mode".into());
        }
        Ok(())
    }
}

/// Data-derived dimensions an encoder is built against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NewsDims {
    /// Vocabulary size (including pad and unknown slots).
    pub vocab: usize,
    /// Number of distinct categories.
    pub categories: usize,
    /// Number of distinct subcategories.
    pub subcategories: usize,
    /// Dimension of the per-article frozen store (0 when absent).
    pub frozen_cls_dim: usize,
    /// Dimension of the per-token frozen store (0 when absent).
    pub frozen_token_dim: usize,
}

impl NewsDims {
    /// Collect the dimensions from a catalog and the available stores.
    pub fn from_data(catalog: &NewsCatalog, frozen: &FrozenInputs) -> Self {
        NewsDims {
            vocab: catalog.vocab.len(),
            categories: catalog.categories.len(),
            subcategories: catalog.subcategories.len(),
            frozen_cls_dim: frozen.cls.map_or(0, |s| s.dim()),
            frozen_token_dim: frozen.tokens.map_or(0, |s| s.dim()),
        }
    }
}

/// Frozen vector stores available at encode time.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenInputs<'a> {
    /// Per-article vectors, keyed by news id.
    pub cls: Option<&'a FrozenStore>,
    /// Per-token vectors, keyed `newsid#position`.
    pub tokens: Option<&'a FrozenStore>,
}

impl<'a> FrozenInputs<'a> {
    /// No frozen stores (trainable families only).
    pub fn none() -> Self {
        FrozenInputs::default()
    }
}

/// A single encoded article.
#[derive(Debug, Clone)]
pub struct NewsEmbedding<R: Real> {
    /// The article id.
    pub news_id: String,
    /// Row vector `[1 × d_news]`.
    pub vector: Tensor<R>,
}

/// Category-encoder parameters.
#[derive(Debug, Clone)]
struct CategoryParams {
    table: ParamId,
    subtable: ParamId,
    dense_w: ParamId,
    dense_b: ParamId,
}

/// Aggregation-strategy parameters.
#[derive(Debug, Clone)]
enum AggParams {
    Addatt { text_proj: ParamId, cat_proj: ParamId, pool: AddAttParams },
    Linear { w: ParamId, b: ParamId },
    Con,
}

/// A fully wired news encoder.
#[derive(Debug, Clone)]
pub struct NewsEncoder {
    config: NewsEncoderConfig,
    text_dim: usize,
    output_dim: usize,
    word_embed: Option<ParamId>,
    conv_kernels: Option<ParamId>,
    conv_bias: Option<ParamId>,
    mhsa: Option<MhsaParams>,
    pool: Option<AddAttParams>,
    frozen_proj: Option<(ParamId, ParamId)>,
    category: Option<CategoryParams>,
    agg: Option<AggParams>,
}

/// Declare a zero-initialized bias row.
fn bias_param<R: Real>(pb: &mut ParamBuilder<R>, name: &str, cols: usize) -> Result<ParamId> {
    pb.param_with(name, &[1, cols], |_| Tensor::zeros(vec![1, cols]))
}

impl NewsEncoder {
    /// Build (or re-bind) the encoder's parameters under the `news.` prefix.
    pub fn build<R: Real>(
        pb: &mut ParamBuilder<R>,
        config: &NewsEncoderConfig,
        dims: &NewsDims,
        word_init: Option<&WordVectorTable>,
    ) -> Result<Self> {
        config.validate()?;
        let family = config.family;
        let mut enc = NewsEncoder {
            config: config.clone(),
            text_dim: 0,
            output_dim: 0,
            word_embed: None,
            conv_kernels: None,
            conv_bias: None,
            mhsa: None,
            pool: None,
            frozen_proj: None,
            category: None,
            agg: None,
        };

        if family.uses_word_embeddings() {
            if dims.vocab < 2 {
                return Err(Error::Config("vocabulary has no real tokens".into()));
            }
            if let Some(table) = word_init {
                if table.dim() != config.word_dim {
                    return Err(Error::Config(format!(
                        "word vectors have dimension {}, config says {}",
                        table.dim(),
                        config.word_dim
                    )));
                }
                if table.len() != dims.vocab {
                    return Err(Error::Config(format!(
                        "word-vector table covers {} tokens, vocabulary has {}",
                        table.len(),
                        dims.vocab
                    )));
                }
            }
            let shape = [dims.vocab, config.word_dim];
            enc.word_embed = Some(match word_init {
                Some(table) => pb.param_with("news.word_embed", &shape, |_| table.to_tensor())?,
                None => pb.param_with("news.word_embed", &shape, |rng| {
                    crate::tensor::param::init_uniform(shape.to_vec(), 100, rng)
                })?,
            });
        }

        // The contextualizer stack fixes the text-path dimension.
        let mut d_seq = config.word_dim;
        if family.has_conv() {
            let shape = [config.cnn_window, d_seq, config.output_dim];
            enc.conv_kernels =
                Some(pb.param("news.conv.kernels", &shape, config.cnn_window * d_seq)?);
            enc.conv_bias = Some(bias_param(pb, "news.conv.bias", config.output_dim)?);
            d_seq = config.output_dim;
        }
        if family.has_mhsa() {
            enc.mhsa =
                Some(MhsaParams::build(pb, "news.mhsa", d_seq, config.output_dim, config.heads)?);
            d_seq = config.output_dim;
        }

        enc.text_dim = match family {
            TextFamily::CnnAddatt | TextFamily::MhsaAddatt | TextFamily::CnnMhsaAddatt => {
                enc.pool = Some(AddAttParams::build(pb, "news.pool", d_seq, config.query_dim)?);
                d_seq
            }
            TextFamily::FrozenCls => {
                if dims.frozen_cls_dim == 0 {
                    return Err(Error::Config(
                        "frozen_cls family requires a per-article vector store".into(),
                    ));
                }
                let w = pb.param(
                    "news.frozen_proj.w",
                    &[dims.frozen_cls_dim, config.output_dim],
                    dims.frozen_cls_dim,
                )?;
                let b = bias_param(pb, "news.frozen_proj.b", config.output_dim)?;
                enc.frozen_proj = Some((w, b));
                config.output_dim
            }
            TextFamily::FrozenTokensAtt => {
                if dims.frozen_token_dim == 0 {
                    return Err(Error::Config(
                        "frozen_tokens_att family requires a per-token vector store".into(),
                    ));
                }
                enc.pool = Some(AddAttParams::build(
                    pb,
                    "news.pool",
                    dims.frozen_token_dim,
                    config.query_dim,
                )?);
                dims.frozen_token_dim
            }
        };

        enc.output_dim = enc.text_dim;
        if let Some(strategy) = config.aggregation {
            if dims.categories == 0 || dims.subcategories == 0 {
                return Err(Error::Config(
                    "multi-feature aggregation requires category and subcategory labels".into(),
                ));
            }
            let d_cat = config.category_dim;
            enc.category = Some(CategoryParams {
                table: pb.param("news.cat.table", &[dims.categories, d_cat], d_cat)?,
                subtable: pb.param("news.cat.subtable", &[dims.subcategories, d_cat], d_cat)?,
                dense_w: pb.param("news.cat.dense.w", &[d_cat, d_cat], d_cat)?,
                dense_b: bias_param(pb, "news.cat.dense.b", d_cat)?,
            });
            enc.agg = Some(match strategy {
                Aggregation::Addatt => AggParams::Addatt {
                    text_proj: pb.param(
                        "news.agg.text_proj",
                        &[enc.text_dim, enc.text_dim],
                        enc.text_dim,
                    )?,
                    cat_proj: pb.param("news.agg.cat_proj", &[d_cat, enc.text_dim], d_cat)?,
                    pool: AddAttParams::build(pb, "news.agg.pool", enc.text_dim, config.query_dim)?,
                },
                Aggregation::Linear => AggParams::Linear {
                    w: pb.param(
                        "news.agg.linear.w",
                        &[enc.text_dim + d_cat, enc.text_dim],
                        enc.text_dim + d_cat,
                    )?,
                    b: bias_param(pb, "news.agg.linear.b", enc.text_dim)?,
                },
                Aggregation::Con => AggParams::Con,
            });
            if matches!(strategy, Aggregation::Con) {
                enc.output_dim = enc.text_dim + d_cat;
            }
        }
        Ok(enc)
    }

    /// The encoder's configuration.
    pub fn config(&self) -> &NewsEncoderConfig {
        &self.config
    }

    /// Dimension of the final news embedding.
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Dimension of the text path alone.
    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    /// Encode the title (or frozen stand-in) of one article: `[1 × d_text]`.
    pub fn encode_text<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        article: &NewsArticle,
        frozen: &FrozenInputs,
    ) -> Result<NodeId> {
        match self.config.family {
            TextFamily::FrozenCls => {
                let store = frozen.cls.ok_or_else(|| {
                    Error::Config("frozen_cls family needs a per-article vector store".into())
                })?;
                let v = store.require(&article.id)?;
                let data: Vec<R> = v.iter().map(|&f| R::of(f as f64)).collect();
                let x = tape.input(Tensor::new(vec![1, v.len()], data)?);
                let (w, b) = self.frozen_proj.expect("frozen_cls builds a projection");
                let wn = tape.param(params, w);
                let bn = tape.param(params, b);
                let y = tape.matmul(x, wn)?;
                tape.add_row(y, bn)
            }
            TextFamily::FrozenTokensAtt => {
                let store = frozen.tokens.ok_or_else(|| {
                    Error::Config("frozen_tokens_att family needs a per-token vector store".into())
                })?;
                let real = article.features.real_len();
                if real == 0 {
                    return Err(Error::Degenerate(format!(
                        "article '{}' has an empty title",
                        article.id
                    )));
                }
                let d = store.dim();
                let mut data: Vec<R> = Vec::with_capacity(real * d);
                for pos in 0..real {
                    let v = store.require(&token_key(&article.id, pos))?;
                    data.extend(v.iter().map(|&f| R::of(f as f64)));
                }
                let seq = tape.input(Tensor::new(vec![real, d], data)?);
                let pool = self.pool.as_ref().expect("frozen_tokens_att builds a pool");
                let (pooled, _) =
                    additive_attention_pool(tape, params, seq, &vec![true; real], pool, None)?;
                Ok(pooled)
            }
            _ => {
                let feats = &article.features;
                if feats.real_len() == 0 {
                    return Err(Error::Degenerate(format!(
                        "article '{}' has an empty title",
                        article.id
                    )));
                }
                let table = tape.param(params, self.word_embed.expect("trainable family"));
                let mut seq = tape.embed(table, &feats.tokens, Some(PAD_INDEX))?;
                if self.config.family.has_conv() {
                    let k = tape.param(params, self.conv_kernels.expect("conv family"));
                    let b = tape.param(params, self.conv_bias.expect("conv family"));
                    seq = tape.conv1d_same(seq, k, b)?;
                    seq = tape.relu(seq)?;
                }
                if self.config.family.has_mhsa() {
                    let p = self.mhsa.as_ref().expect("mhsa family");
                    seq = multi_head_self_attention(tape, params, seq, &feats.mask, p)?;
                }
                let pool = self.pool.as_ref().expect("trainable family builds a pool");
                let (pooled, _) =
                    additive_attention_pool(tape, params, seq, &feats.mask, pool, None)?;
                Ok(pooled)
            }
        }
    }

    /// Encode category + subcategory ids: `[1 × d_cat]`.
    pub fn encode_category<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        category: Option<usize>,
        subcategory: Option<usize>,
    ) -> Result<NodeId> {
        let cp = self
            .category
            .as_ref()
            .ok_or_else(|| Error::Config("encoder was built without a category path".into()))?;
        let cat = category.ok_or_else(|| {
            Error::Config("multi-feature encoding requires a category label".into())
        })?;
        let sub = subcategory.ok_or_else(|| {
            Error::Config("multi-feature encoding requires a subcategory label".into())
        })?;
        let t = tape.param(params, cp.table);
        let s = tape.param(params, cp.subtable);
        let ce = tape.embed(t, &[cat], None)?;
        let se = tape.embed(s, &[sub], None)?;
        let summed = tape.add(ce, se)?;
        let w = tape.param(params, cp.dense_w);
        let b = tape.param(params, cp.dense_b);
        let y = tape.matmul(summed, w)?;
        let y = tape.add_row(y, b)?;
        tape.relu(y)
    }

    /// Combine text and category vectors: `[1 × d_news]`.
    pub fn aggregate<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        text: NodeId,
        cat: NodeId,
    ) -> Result<NodeId> {
        let agg = self
            .agg
            .as_ref()
            .ok_or_else(|| Error::Config("mono-feature encoder has no aggregation".into()))?;
        match agg {
            AggParams::Addatt { text_proj, cat_proj, pool } => {
                let wt = tape.param(params, *text_proj);
                let wc = tape.param(params, *cat_proj);
                let tp = tape.matmul(text, wt)?;
                let cp = tape.matmul(cat, wc)?;
                let seq = tape.concat_rows(&[tp, cp])?;
                let (pooled, _) =
                    additive_attention_pool(tape, params, seq, &[true, true], pool, None)?;
                Ok(pooled)
            }
            AggParams::Linear { w, b } => {
                let x = tape.concat_cols(&[text, cat])?;
                let wn = tape.param(params, *w);
                let bn = tape.param(params, *b);
                let y = tape.matmul(x, wn)?;
                tape.add_row(y, bn)
            }
            AggParams::Con => tape.concat_cols(&[text, cat]),
        }
    }

    /// Full news encoding: text path plus, in multi-feature mode, the
    /// category path and aggregation.
    pub fn encode<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        article: &NewsArticle,
        frozen: &FrozenInputs,
    ) -> Result<NodeId> {
        let text = self.encode_text(tape, params, article, frozen)?;
        if self.agg.is_none() {
            return Ok(text);
        }
        let cat = self.encode_category(
            tape,
            params,
            article.features.category,
            article.features.subcategory,
        )?;
        self.aggregate(tape, params, text, cat)
    }
}
