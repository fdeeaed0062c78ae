//! A small pre-LayerNorm transformer encoder.
//!
//! The same parameter layout serves the shared query/passage tower of the
//! dual-encoder/late-interaction pair and, with a linear scoring head, the
//! cross-encoder. Forward passes are batched: sequences are right-padded to a
//! common length and padded keys are masked out of attention.

use kd_autograd::{RngState, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{TokenSequence, PAD_ID};

const LN_EPS: f64 = 1e-5;
const MASK_BIAS: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            dropout_p: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 || self.max_len < 3 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("degenerate encoder config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} not in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone)]
struct Layer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Encoder parameters. Cloning shares the underlying tensors.
#[derive(Clone)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    seg_emb: Tensor,
    layers: Vec<Layer>,
    lnf_g: Tensor,
    lnf_b: Tensor,
}

/// Output of a batched forward pass.
pub struct BatchEncoding {
    /// `[batch, padded_len, d_model]`, after the final LayerNorm.
    pub hidden: Tensor,
    /// Final-layer attention probabilities, `[batch, n_heads, padded_len, padded_len]`.
    pub attn: Tensor,
    /// Non-padding length of each sequence.
    pub lengths: Vec<usize>,
    pub padded_len: usize,
}

/// Representations of one sequence.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    /// `[length, d_model]`, special tokens included.
    pub token_reps: Tensor,
    /// `[d_model]`
    pub cls_rep: Tensor,
    /// `[n_heads, length, length]`, final layer, post-softmax.
    pub attn_maps: Tensor,
}

impl EncodedSequence {
    /// Token representations without `[CLS]` and the closing `[SEP]`.
    pub fn content_reps(&self) -> Result<Tensor> {
        let len = self.token_reps.shape()[0];
        if len < 3 {
            return Err(Error::Contract(format!(
                "sequence of length {len} has no content tokens"
            )));
        }
        Ok(self.token_reps.slice(0, 1..len - 1)?)
    }

    pub fn len(&self) -> usize {
        self.token_reps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut RngState) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::param(
        shape,
        (0..n).map(|_| rng.normal() * std).collect(),
    )?)
}

fn const_param(shape: &[usize], value: f64) -> Result<Tensor> {
    Ok(Tensor::param(shape, vec![value; shape.iter().product()])?)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(w)?.add_bias(b)?)
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let w_std = 1.0 / (d as f64).sqrt();
        let w2_std = 1.0 / (ff as f64).sqrt();
        let tok_emb = normal_tensor(&[config.vocab_size, d], 1.0, rng)?;
        let pos_emb = normal_tensor(&[config.max_len, d], 0.1, rng)?;
        let seg_emb = normal_tensor(&[2, d], 0.1, rng)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                ln1_g: const_param(&[d], 1.0)?,
                ln1_b: const_param(&[d], 0.0)?,
                wq: normal_tensor(&[d, d], w_std, rng)?,
                bq: const_param(&[d], 0.0)?,
                wk: normal_tensor(&[d, d], w_std, rng)?,
                wv: normal_tensor(&[d, d], w_std, rng)?,
                bv: const_param(&[d], 0.0)?,
                wo: normal_tensor(&[d, d], w_std, rng)?,
                bo: const_param(&[d], 0.0)?,
                ln2_g: const_param(&[d], 1.0)?,
                ln2_b: const_param(&[d], 0.0)?,
                w1: normal_tensor(&[d, ff], w_std, rng)?,
                b1: const_param(&[ff], 0.0)?,
                w2: normal_tensor(&[ff, d], w2_std, rng)?,
                b2: const_param(&[d], 0.0)?,
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            seg_emb,
            layers,
            lnf_g: const_param(&[d], 1.0)?,
            lnf_b: const_param(&[d], 0.0)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
            ("seg_emb".to_string(), self.seg_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named = [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ];
            out.extend(
                named
                    .iter()
                    .map(|(n, t)| (format!("layer{i}.{n}"), (*t).clone())),
            );
        }
        out.push(("lnf_g".to_string(), self.lnf_g.clone()));
        out.push(("lnf_b".to_string(), self.lnf_b.clone()));
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Deep copy with fresh parameter leaves.
    pub fn duplicate(&self) -> Result<Self> {
        let mut copy = Encoder::new(self.config.clone(), &mut RngState::new(0))?;
        copy.load_values(
            &self
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.to_vec()))
                .collect::<Vec<_>>(),
        )?;
        Ok(copy)
    }

    /// Overwrites parameter values by name; every parameter must be supplied
    /// with the right number of values.
    pub fn load_values(&mut self, values: &[(String, Vec<f64>)]) -> Result<()> {
        let params = self.named_params();
        if values.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                params.len(),
                values.len()
            )));
        }
        for (name, t) in &params {
            let (_, v) = values
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if v.len() != t.numel() {
                return Err(Error::Format(format!(
                    "parameter {name}: expected {} values for shape {:?}, found {}",
                    t.numel(),
                    t.shape(),
                    v.len()
                )));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    fn check_ids(&self, seq: &TokenSequence) -> Result<()> {
        if let Some(&bad) = seq
            .token_ids()
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: self.config.vocab_size,
                context: String::new(),
            });
        }
        if seq.token_ids().len() > self.config.max_len {
            return Err(Error::Length {
                len: seq.token_ids().len(),
                max_len: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Encodes a batch. Dropout is active only in `train` mode and draws from `rng`.
    pub fn forward(
        &self,
        seqs: &[&TokenSequence],
        rng: &mut RngState,
        train: bool,
    ) -> Result<BatchEncoding> {
        if seqs.is_empty() {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        for s in seqs {
            self.check_ids(s)?;
        }
        let cfg = &self.config;
        let (b, d, h, dh) = (seqs.len(), cfg.d_model, cfg.n_heads, cfg.head_dim());
        let l = seqs.iter().map(|s| s.token_ids().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(b * l);
        let mut segs = Vec::with_capacity(b * l);
        let mut pos = Vec::with_capacity(b * l);
        let mut real = Vec::with_capacity(b * l);
        for s in seqs {
            let seg = s.segments();
            for i in 0..l {
                let t = s.token_ids().get(i).copied().unwrap_or(PAD_ID);
                ids.push(t as usize);
                segs.push(*seg.get(i).unwrap_or(&0) as usize);
                pos.push(i);
                real.push(t != PAD_ID);
            }
        }
        let p = if train { cfg.dropout_p } else { 0.0 };

        let mut x = self
            .tok_emb
            .index_select(&ids)?
            .add(&self.pos_emb.index_select(&pos)?)?
            .add(&self.seg_emb.index_select(&segs)?)?;
        x = x.dropout(p, rng)?;

        // additive key mask, shared by every head and query row
        let mut bias = vec![0.0; b * h * l * l];
        for s in 0..b {
            for j in 0..l {
                if !real[s * l + j] {
                    for hh in 0..h {
                        for i in 0..l {
                            bias[((s * h + hh) * l + i) * l + j] = MASK_BIAS;
                        }
                    }
                }
            }
        }
        let bias = Tensor::new(&[b * h, l, l], bias)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape(&[b, l, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, l, dh])?)
        };

        let mut last_attn = None;
        for layer in &self.layers {
            let hn = x.layer_norm(&layer.ln1_g, &layer.ln1_b, LN_EPS)?;
            let q = split(linear(&hn, &layer.wq, &layer.bq)?)?;
            // no key bias: it shifts every logit in a row equally
            let k = split(hn.matmul(&layer.wk)?)?;
            let v = split(linear(&hn, &layer.wv, &layer.bv)?)?;
            let probs = q.bmm_nt(&k)?.scale(scale).add(&bias)?.softmax(2)?;
            let ctx = probs
                .bmm(&v)?
                .reshape(&[b, h, l, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * l, d])?;
            let attn_out = linear(&ctx, &layer.wo, &layer.bo)?.dropout(p, rng)?;
            x = x.add(&attn_out)?;
            let hn = x.layer_norm(&layer.ln2_g, &layer.ln2_b, LN_EPS)?;
            let ff = linear(
                &linear(&hn, &layer.w1, &layer.b1)?.gelu(),
                &layer.w2,
                &layer.b2,
            )?
            .dropout(p, rng)?;
            x = x.add(&ff)?;
            last_attn = Some(probs);
        }
        let hidden = x
            .layer_norm(&self.lnf_g, &self.lnf_b, LN_EPS)?
            .reshape(&[b, l, d])?;
        let attn = last_attn.expect("n_layers >= 1").reshape(&[b, h, l, l])?;
        Ok(BatchEncoding {
            hidden,
            attn,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            padded_len: l,
        })
    }

    /// Encodes a single sequence.
    pub fn encode(
        &self,
        seq: &TokenSequence,
        rng: &mut RngState,
        train: bool,
    ) -> Result<EncodedSequence> {
        self.forward(&[seq], rng, train)?.sequence(0)
    }
}

impl BatchEncoding {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// `[batch, d_model]` representations of the `[CLS]` position.
    pub fn cls(&self) -> Result<Tensor> {
        let b = self.batch_size();
        let d = self.hidden.shape()[2];
        Ok(self.hidden.slice(1, 0..1)?.reshape(&[b, d])?)
    }

    /// Unpadded view of sequence `i`.
    pub fn sequence(&self, i: usize) -> Result<EncodedSequence> {
        let len = *self
            .lengths
            .get(i)
            .ok_or_else(|| Error::Contract(format!("sequence {i} not in batch")))?;
        let (l, d) = (self.padded_len, self.hidden.shape()[2]);
        let h = self.attn.shape()[1];
        let token_reps = self
            .hidden
            .slice(0, i..i + 1)?
            .reshape(&[l, d])?
            .slice(0, 0..len)?;
        let cls_rep = token_reps.slice(0, 0..1)?.reshape(&[d])?;
        let attn_maps = self
            .attn
            .slice(0, i..i + 1)?
            .reshape(&[h, l, l])?
            .slice(1, 0..len)?
            .slice(2, 0..len)?;
        Ok(EncodedSequence {
            token_reps,
            cls_rep,
            attn_maps,
        })
    }
}

/// Encoder plus a linear head on the final `[CLS]` state.
#[derive(Clone)]
pub struct CrossEncoder {
    pub encoder: Encoder,
    head_w: Tensor,
    head_b: Tensor,
}

/// Scores and attention for a batch of (query, passage) pairs.
pub struct CrossBatch {
    /// `[pairs]`
    pub scores: Tensor,
    /// `[pairs, n_heads, padded_len, padded_len]`
    pub attn: Tensor,
    /// Content lengths `(l, k)` of each pair.
    pub layouts: Vec<(usize, usize)>,
}

impl CrossEncoder {
    /// Random encoder body with a zero-initialised head.
    pub fn new(config: EncoderConfig, rng: &mut RngState) -> Result<Self> {
        let encoder = Encoder::new(config, rng)?;
        Self::from_encoder(encoder)
    }

    pub fn from_encoder(encoder: Encoder) -> Result<Self> {
        let d = encoder.config().d_model;
        Ok(Self {
            encoder,
            head_w: Tensor::param(&[d, 1], vec![0.0; d])?,
            head_b: Tensor::param(&[1], vec![0.0])?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut p = self.encoder.named_params();
        p.push(("head_w".into(), self.head_w.clone()));
        p.push(("head_b".into(), self.head_b.clone()));
        p
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn load_values(&mut self, values: &[(String, Vec<f64>)]) -> Result<()> {
        let (head, body): (Vec<_>, Vec<_>) = values
            .iter()
            .cloned()
            .partition(|(n, _)| n.starts_with("head_"));
        self.encoder.load_values(&body)?;
        for (name, t) in [("head_w", &self.head_w), ("head_b", &self.head_b)] {
            let (_, v) = head
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if v.len() != t.numel() {
                return Err(Error::Format(format!("parameter {name} has wrong size")));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// Scores `(query, passage)` pairs from joint `[CLS] q [SEP] p [SEP]` inputs.
    pub fn forward_pairs(
        &self,
        pairs: &[(&TokenSequence, &TokenSequence)],
        rng: &mut RngState,
        train: bool,
    ) -> Result<CrossBatch> {
        let joint: Vec<TokenSequence> = pairs
            .iter()
            .map(|(q, p)| TokenSequence::joint(q, p))
            .collect();
        let refs: Vec<&TokenSequence> = joint.iter().collect();
        let enc = self.encoder.forward(&refs, rng, train)?;
        let scores = linear(&enc.cls()?, &self.head_w, &self.head_b)?.reshape(&[pairs.len()])?;
        Ok(CrossBatch {
            scores,
            attn: enc.attn,
            layouts: pairs
                .iter()
                .map(|(q, p)| (q.content().len(), p.content().len()))
                .collect(),
        })
    }

    /// Relevance score `s_ce(q, p)` and the final-layer attention over the joint sequence.
    pub fn cross_encode(
        &self,
        query: &TokenSequence,
        passage: &TokenSequence,
        rng: &mut RngState,
        train: bool,
    ) -> Result<(Tensor, Tensor)> {
        let out = self.forward_pairs(&[(query, passage)], rng, train)?;
        let h = self.config().n_heads;
        let l = out.attn.shape()[2];
        Ok((out.scores.reshape(&[])?, out.attn.reshape(&[h, l, l])?))
    }
}

impl CrossBatch {
    /// Final-layer maps of pair `i`, `[n_heads, L, L]` (possibly padded).
    pub fn pair_attention(&self, i: usize) -> Result<Tensor> {
        let s = self.attn.shape();
        Ok(self.attn.slice(0, i..i + 1)?.reshape(&[s[1], s[2], s[3]])?)
    }
}

/// Query-row × passage-column block of joint-sequence attention maps,
/// renormalised per row: rows `1..=l` (query tokens) and columns
/// `l+2..=l+k+1` (passage tokens) of each head. Output `[n_heads, l, k]`.
pub fn extract_cross_attention(attn_maps: &Tensor, l: usize, k: usize) -> Result<Tensor> {
    let s = attn_maps.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Contract(format!(
            "expected [heads, L, L] maps, got {s:?}"
        )));
    }
    if l == 0 || k == 0 || l + k + 3 > s[1] {
        return Err(Error::Contract(format!(
            "query length {l} and passage length {k} do not fit maps of size {}",
            s[1]
        )));
    }
    Ok(attn_maps
        .slice(1, 1..l + 1)?
        .slice(2, l + 2..l + k + 2)?
        .renormalize_last()?)
}
