//! User encoders: from parameter-free late fusion to candidate-aware
//! attention.
//!
//! A user encoder aggregates the embeddings of a user's clicked news into a
//! single user vector of the same dimension as the news embeddings, so that
//! recommendation reduces to a dot product. Seven families are provided:
//!
//! * `lf` — late fusion: the unweighted mean of the clicked embeddings; has
//!   no parameters at all;
//! * `addatt` — additive attention pooling over the history;
//! * `mhsa_addatt` — self-attention across the history, then additive
//!   attention pooling;
//! * `gru_ini` — a GRU over the history whose initial state is a trainable
//!   per-user long-term embedding; the output is the final state;
//! * `gru_con` — a GRU initialized at zero whose final state is concatenated
//!   with the long-term embedding and projected back to the news dimension;
//! * `gru_mhsa_addatt` — GRU states re-contextualized by self-attention and
//!   pooled by additive attention;
//! * `cand_aware` — convolution + self-attention over the history with an
//!   additive-attention pooling whose logits also see the candidate:
//!   `a_i = q · tanh(W h_i + V n_c + b)`; recomputed per candidate.
//!
//! Empty histories are legal everywhere: `lf` and the attention families
//! produce the zero vector, the GRU families their (transformed) initial
//! state. Users without a long-term-table slot get a zero initial state.

use serde::{Deserialize, Serialize};

use crate::tensor::nn::{
    additive_attention_pool, gru_forward, multi_head_self_attention, AddAttParams, GruParams,
    MhsaParams,
};
use crate::tensor::param::{ParamBuilder, ParamId, ParamSet};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// User-encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserFamily {
    /// Late fusion: mean of clicked embeddings, no parameters.
    Lf,
    /// Additive attention pooling.
    Addatt,
    /// Self-attention, then additive attention.
    MhsaAddatt,
    /// GRU initialized from a per-user long-term embedding.
    GruIni,
    /// GRU concatenated with the long-term embedding, then projected.
    GruCon,
    /// GRU states through self-attention and additive attention.
    GruMhsaAddatt,
    /// Candidate-aware attention over a convolved, self-attended history.
    CandAware,
}

impl UserFamily {
    /// Stable identifier used in configs and model labels.
    pub fn name(self) -> &'static str {
        match self {
            UserFamily::Lf => "lf",
            UserFamily::Addatt => "addatt",
            UserFamily::MhsaAddatt => "mhsa_addatt",
            UserFamily::GruIni => "gru_ini",
            UserFamily::GruCon => "gru_con",
            UserFamily::GruMhsaAddatt => "gru_mhsa_addatt",
            UserFamily::CandAware => "cand_aware",
        }
    }

    /// Whether encoding depends on the candidate article.
    pub fn is_candidate_aware(self) -> bool {
        matches!(self, UserFamily::CandAware)
    }

    /// Whether the family keeps a per-user long-term embedding table.
    pub fn uses_long_term_table(self) -> bool {
        matches!(self, UserFamily::GruIni | UserFamily::GruCon)
    }

    fn has_gru(self) -> bool {
        matches!(
            self,
            UserFamily::GruIni | UserFamily::GruCon | UserFamily::GruMhsaAddatt
        )
    }

    fn has_mhsa(self) -> bool {
        matches!(self, UserFamily::MhsaAddatt | UserFamily::GruMhsaAddatt | UserFamily::CandAware)
    }

    fn has_pool(self) -> bool {
        matches!(
            self,
            UserFamily::Addatt
                | UserFamily::MhsaAddatt
                | UserFamily::GruMhsaAddatt
                | UserFamily::CandAware
        )
    }
}

/// Configuration of a user encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UserEncoderConfig {
    /// Family.
    pub family: UserFamily,
    /// Long-term embedding dimension for `gru_con`; 0 means "use the news
    /// dimension". `gru_ini` always uses the news dimension (its table seeds
    /// the GRU state directly).
    pub long_term_dim: usize,
    /// Self-attention heads (attention families).
    pub heads: usize,
    /// Query dimension of the additive-attention blocks.
    pub query_dim: usize,
    /// Convolution window for `cand_aware`.
    pub cnn_window: usize,
}

impl Default for UserEncoderConfig {
    fn default() -> Self {
        UserEncoderConfig {
            family: UserFamily::Lf,
            long_term_dim: 0,
            heads: 16,
            query_dim: 200,
            cnn_window: 3,
        }
    }
}

impl UserEncoderConfig {
    /// Check internal consistency against the news dimension.
    pub fn validate(&self, news_dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if news_dim == 0 {
            return bad("news dimension must be positive".into());
        }
        if self.family.has_pool() && self.query_dim == 0 {
            return bad("query_dim must be positive for attention families".into());
        }
        if self.family.has_mhsa() {
            if self.heads == 0 {
                return bad("heads must be positive for self-attention families".into());
            }
            if news_dim % self.heads != 0 {
                return bad(format!(
                    "news dimension {news_dim} not divisible by heads {}",
                    self.heads
                ));
            }
        }
        if self.family == UserFamily::CandAware && self.cnn_window % 2 == 0 {
            return bad(format!("cnn_window must be odd, got {}", self.cnn_window));
        }
        Ok(())
    }
}

/// A single encoded user.
#[derive(Debug, Clone)]
pub struct UserEmbedding<R: Real> {
    /// The user id.
    pub user_id: String,
    /// Row vector `[1 × d_user]`.
    pub vector: Tensor<R>,
}

/// A fully wired user encoder.
#[derive(Debug, Clone)]
pub struct UserEncoder {
    config: UserEncoderConfig,
    news_dim: usize,
    long_term_dim: usize,
    long_term: Option<ParamId>,
    gru: Option<GruParams>,
    mhsa: Option<MhsaParams>,
    pool: Option<AddAttParams>,
    conv_kernels: Option<ParamId>,
    conv_bias: Option<ParamId>,
    cand_v: Option<ParamId>,
    con_proj: Option<(ParamId, ParamId)>,
}

impl UserEncoder {
    /// Build (or re-bind) the encoder's parameters under the `user.` prefix.
    ///
    /// `news_dim` is the news-encoder output dimension; `users` sizes the
    /// long-term embedding table for the GRU families (ignored elsewhere).
    pub fn build<R: Real>(
        pb: &mut ParamBuilder<R>,
        config: &UserEncoderConfig,
        news_dim: usize,
        users: usize,
    ) -> Result<Self> {
        config.validate(news_dim)?;
        let family = config.family;
        let mut enc = UserEncoder {
            config: config.clone(),
            news_dim,
            long_term_dim: 0,
            long_term: None,
            gru: None,
            mhsa: None,
            pool: None,
            conv_kernels: None,
            conv_bias: None,
            cand_v: None,
            con_proj: None,
        };

        if family.uses_long_term_table() {
            if users == 0 {
                return Err(Error::Config(
                    "long-term user embeddings require at least one known user".into(),
                ));
            }
            enc.long_term_dim = match family {
                UserFamily::GruIni => news_dim,
                _ => {
                    if config.long_term_dim == 0 {
                        news_dim
                    } else {
                        config.long_term_dim
                    }
                }
            };
            enc.long_term =
                Some(pb.param("user.long_term", &[users, enc.long_term_dim], enc.long_term_dim)?);
        }
        if family.has_gru() {
            enc.gru = Some(GruParams::build(pb, "user.gru", news_dim, news_dim)?);
        }
        if family == UserFamily::CandAware {
            let w = config.cnn_window;
            enc.conv_kernels =
                Some(pb.param("user.conv.kernels", &[w, news_dim, news_dim], w * news_dim)?);
            enc.conv_bias =
                Some(pb.param_with("user.conv.bias", &[1, news_dim], |_| {
                    Tensor::zeros(vec![1, news_dim])
                })?);
            enc.cand_v = Some(pb.param("user.cand.v", &[news_dim, config.query_dim], news_dim)?);
        }
        if family.has_mhsa() {
            enc.mhsa = Some(MhsaParams::build(pb, "user.mhsa", news_dim, news_dim, config.heads)?);
        }
        if family.has_pool() {
            enc.pool = Some(AddAttParams::build(pb, "user.pool", news_dim, config.query_dim)?);
        }
        if family == UserFamily::GruCon {
            let joint = news_dim + enc.long_term_dim;
            enc.con_proj = Some((
                pb.param("user.gru_con.proj.w", &[joint, news_dim], joint)?,
                pb.param_with("user.gru_con.proj.b", &[1, news_dim], |_| {
                    Tensor::zeros(vec![1, news_dim])
                })?,
            ));
        }
        Ok(enc)
    }

    /// The encoder's configuration.
    pub fn config(&self) -> &UserEncoderConfig {
        &self.config
    }

    /// Dimension of the produced user embedding (always the news dimension).
    pub fn output_dim(&self) -> usize {
        self.news_dim
    }

    fn zero_vector<R: Real>(&self, tape: &mut Tape<R>) -> NodeId {
        tape.input(Tensor::zeros(vec![1, self.news_dim]))
    }

    /// The user's long-term embedding (zero for users without a table slot).
    fn long_term_node<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        user_index: Option<usize>,
    ) -> Result<NodeId> {
        let table = self.long_term.expect("family keeps a long-term table");
        match user_index {
            Some(ix) => {
                let t = tape.param(params, table);
                tape.embed(t, &[ix], None)
            }
            None => Ok(tape.input(Tensor::zeros(vec![1, self.long_term_dim]))),
        }
    }

    /// Encode a click history into a user embedding `[1 × d_news]`.
    ///
    /// `history` holds the clicked-news embeddings (each `[1 × d_news]`,
    /// most recent last) with `mask[i]` true for real entries. `user_index`
    /// addresses the long-term table (GRU families; `None` for users unseen
    /// at training time). `candidate` is required by — and only consumed
    /// by — the candidate-aware family.
    pub fn encode_user<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        history: &[NodeId],
        mask: &[bool],
        user_index: Option<usize>,
        candidate: Option<NodeId>,
    ) -> Result<NodeId> {
        if history.len() != mask.len() {
            return Err(Error::Usage(format!(
                "user encoding: {} history entries but {} mask slots",
                history.len(),
                mask.len()
            )));
        }
        if self.config.family == UserFamily::CandAware && candidate.is_none() {
            return Err(Error::Config(
                "cand_aware encoding requires a candidate embedding".into(),
            ));
        }
        for (i, &h) in history.iter().enumerate() {
            let shape = tape.value(h).shape();
            if shape != [1, self.news_dim] {
                return Err(Error::Usage(format!(
                    "history entry {i} has shape {shape:?}, expected [1, {}]",
                    self.news_dim
                )));
            }
        }
        let real = mask.iter().filter(|&&m| m).count();

        // Degenerate path: nothing clicked.
        if real == 0 {
            return match self.config.family {
                UserFamily::GruIni => self.long_term_node(tape, params, user_index),
                UserFamily::GruCon => {
                    let last = self.zero_vector(tape);
                    let lt = self.long_term_node(tape, params, user_index)?;
                    self.project_concat(tape, params, last, lt)
                }
                _ => Ok(self.zero_vector(tape)),
            };
        }

        match self.config.family {
            UserFamily::Lf => {
                let seq = tape.concat_rows(history)?;
                let w = R::of(1.0 / real as f64);
                let weights = Tensor::new(
                    vec![1, history.len()],
                    mask.iter().map(|&m| if m { w } else { R::of(0.0) }).collect(),
                )?;
                let wn = tape.input(weights);
                tape.matmul(wn, seq)
            }
            UserFamily::Addatt => {
                let seq = tape.concat_rows(history)?;
                let pool = self.pool.as_ref().expect("addatt builds a pool");
                let (pooled, _) = additive_attention_pool(tape, params, seq, mask, pool, None)?;
                Ok(pooled)
            }
            UserFamily::MhsaAddatt => {
                let seq = tape.concat_rows(history)?;
                let p = self.mhsa.as_ref().expect("mhsa family");
                let ctx = multi_head_self_attention(tape, params, seq, mask, p)?;
                let pool = self.pool.as_ref().expect("mhsa_addatt builds a pool");
                let (pooled, _) = additive_attention_pool(tape, params, ctx, mask, pool, None)?;
                Ok(pooled)
            }
            UserFamily::GruIni => {
                let seq = tape.concat_rows(history)?;
                let h0 = self.long_term_node(tape, params, user_index)?;
                let gru = self.gru.as_ref().expect("gru family");
                let (_, last) = gru_forward(tape, params, seq, mask, h0, gru)?;
                Ok(last)
            }
            UserFamily::GruCon => {
                let seq = tape.concat_rows(history)?;
                let h0 = self.zero_vector(tape);
                let gru = self.gru.as_ref().expect("gru family");
                let (_, last) = gru_forward(tape, params, seq, mask, h0, gru)?;
                let lt = self.long_term_node(tape, params, user_index)?;
                self.project_concat(tape, params, last, lt)
            }
            UserFamily::GruMhsaAddatt => {
                let seq = tape.concat_rows(history)?;
                let h0 = self.zero_vector(tape);
                let gru = self.gru.as_ref().expect("gru family");
                let (states, _) = gru_forward(tape, params, seq, mask, h0, gru)?;
                let states = tape.concat_rows(&states)?;
                let p = self.mhsa.as_ref().expect("mhsa family");
                let ctx = multi_head_self_attention(tape, params, states, mask, p)?;
                let pool = self.pool.as_ref().expect("pool family");
                let (pooled, _) = additive_attention_pool(tape, params, ctx, mask, pool, None)?;
                Ok(pooled)
            }
            UserFamily::CandAware => {
                let seq = tape.concat_rows(history)?;
                let k = tape.param(params, self.conv_kernels.expect("cand_aware conv"));
                let b = tape.param(params, self.conv_bias.expect("cand_aware conv"));
                let conv = tape.conv1d_same(seq, k, b)?;
                let conv = tape.relu(conv)?;
                let p = self.mhsa.as_ref().expect("mhsa family");
                let ctx = multi_head_self_attention(tape, params, conv, mask, p)?;
                let v = tape.param(params, self.cand_v.expect("cand_aware v"));
                let cand = candidate.expect("checked above");
                let extra = tape.matmul(cand, v)?;
                let pool = self.pool.as_ref().expect("pool family");
                let (pooled, _) =
                    additive_attention_pool(tape, params, ctx, mask, pool, Some(extra))?;
                Ok(pooled)
            }
        }
    }

    fn project_concat<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamSet<R>,
        last: NodeId,
        lt: NodeId,
    ) -> Result<NodeId> {
        let (w, b) = self.con_proj.expect("gru_con builds a projection");
        let joint = tape.concat_cols(&[last, lt])?;
        let wn = tape.param(params, w);
        let bn = tape.param(params, b);
        let y = tape.matmul(joint, wn)?;
        tape.add_row(y, bn)
    }
}
