//! Compact post-norm transformer encoder.
//!
//! Token + learned absolute position (+ optional segment) embeddings, then
//! `layers` blocks of multi-head self-attention and a feed-forward network,
//! each followed by a residual add and layer norm. A tanh pooler over the
//! first (`CLS`) position gives the sequence representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, Initializer, ParamStore, INIT_STD};
use crate::tensor::{Graph, Real, Tensor, Var, MASKED_LOGIT};

/// Longest input any task feeds the encoder.
pub const LONGEST_TASK_SEQUENCE: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// Dropout on the representations handed to the task heads.
    pub dropout_output: f64,
    /// Dropout on embeddings and sub-layer outputs inside the encoder.
    pub dropout_internal: f64,
    pub segment_embeddings: bool,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn: 512,
            max_positions: LONGEST_TASK_SEQUENCE,
            vocab_size: 1000,
            dropout_output: 0.30,
            dropout_internal: 0.10,
            segment_embeddings: false,
            activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.layers == 0 {
            problems.push("layers must be >= 1".to_string());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            problems.push(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.ffn == 0 {
            problems.push("ffn must be >= 1".to_string());
        }
        if self.max_positions < LONGEST_TASK_SEQUENCE {
            problems.push(format!(
                "max_positions ({}) must cover sequences of {LONGEST_TASK_SEQUENCE}",
                self.max_positions
            ));
        }
        if self.vocab_size <= crate::tokenizer::SPECIAL_TOKENS.len() {
            problems.push(format!("vocab_size ({}) leaves no room for symbols", self.vocab_size));
        }
        for (name, p) in [
            ("dropout_output", self.dropout_output),
            ("dropout_internal", self.dropout_internal),
        ] {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("{name} ({p}) must be in [0, 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (h, f) = (self.hidden, self.ffn);
        let embeddings =
            self.vocab_size * h + self.max_positions * h + if self.segment_embeddings { 2 * h } else { 0 } + 2 * h;
        let layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
        embeddings + self.layers * layer + (h * h + h)
    }

    /// Fresh encoder parameters under the `encoder.` prefix.
    pub fn init_params<T: Real, R: Rng>(&self, rng: R) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut init = Initializer::new(rng);
        let mut p = ParamStore::new();
        let h = self.hidden;
        p.insert(
            "encoder.tok_emb",
            init.trunc_normal(&[self.vocab_size, h], INIT_STD),
            true,
        );
        p.insert(
            "encoder.pos_emb",
            init.trunc_normal(&[self.max_positions, h], INIT_STD),
            true,
        );
        if self.segment_embeddings {
            p.insert("encoder.seg_emb", init.trunc_normal(&[2, h], INIT_STD), true);
        }
        init.layer_norm(&mut p, "encoder.emb_ln", h);
        for l in 0..self.layers {
            let pre = format!("encoder.layer{l}");
            for proj in ["q", "k", "v", "o"] {
                init.linear(&mut p, &format!("{pre}.attn.{proj}"), h, h);
            }
            init.layer_norm(&mut p, &format!("{pre}.ln1"), h);
            init.linear(&mut p, &format!("{pre}.ffn.in"), h, self.ffn);
            init.linear(&mut p, &format!("{pre}.ffn.out"), self.ffn, h);
            init.layer_norm(&mut p, &format!("{pre}.ln2"), h);
        }
        init.linear(&mut p, "encoder.pooler", h, h);
        Ok(p)
    }
}

/// One input sequence. `mask[i]` is false on padding.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub ids: &'a [u32],
    pub segments: &'a [u32],
    pub mask: &'a [bool],
}

/// Encoder results for one item, as graph handles.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Pooled `CLS` representation `[1, hidden]`, after output dropout.
    pub seq_rep: Var,
    /// Final hidden states `[len, hidden]` before output dropout.
    pub tok_reps: Var,
    /// `tok_reps` after output dropout; what span heads consume.
    pub head_tok_reps: Var,
    pub mask: Vec<bool>,
}

/// `x @ W + b` for a `[n, in]` input.
pub(crate) fn linear<T: Real>(g: &mut Graph<T>, bind: &mut Binding<T>, name: &str, x: Var) -> Result<Var> {
    let w = bind.get(g, &format!("{name}.weight"))?;
    let b = bind.get(g, &format!("{name}.bias"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

fn norm<T: Real>(g: &mut Graph<T>, bind: &mut Binding<T>, name: &str, x: Var) -> Result<Var> {
    let gain = bind.get(g, &format!("{name}.gain"))?;
    let bias = bind.get(g, &format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias)
}

impl EncoderConfig {
    /// Forward one item. `train` enables dropout, drawn from `rng`.
    pub fn forward<T: Real, R: Rng>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binding<T>,
        input: EncoderInput<'_>,
        train: bool,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        let n = input.ids.len();
        if n == 0 || n > self.max_positions {
            return Err(Error::Invalid(format!(
                "sequence length {n} outside 1..={}",
                self.max_positions
            )));
        }
        if input.mask.len() != n || input.segments.len() != n {
            return Err(Error::shape(
                "encoder",
                format!("ids {n}, segments {}, mask {}", input.segments.len(), input.mask.len()),
            ));
        }
        let p_int = if train { self.dropout_internal } else { 0.0 };
        let p_out = if train { self.dropout_output } else { 0.0 };

        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let tok_table = bind.get(g, "encoder.tok_emb")?;
        let pos_table = bind.get(g, "encoder.pos_emb")?;
        let tok = g.embedding(tok_table, &ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        if self.segment_embeddings {
            let seg_table = bind.get(g, "encoder.seg_emb")?;
            let segs: Vec<usize> = input.segments.iter().map(|&s| s.min(1) as usize).collect();
            let seg = g.embedding(seg_table, &segs)?;
            x = g.add(x, seg)?;
        }
        x = norm(g, bind, "encoder.emb_ln", x)?;
        x = g.dropout(x, p_int, rng)?;

        let key_mask: Vec<f64> = input.mask.iter().map(|&m| if m { 0.0 } else { MASKED_LOGIT }).collect();
        let key_mask = g.constant(Tensor::from_f64(&key_mask));
        let dh = self.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        for l in 0..self.layers {
            let pre = format!("encoder.layer{l}");
            let q = linear(g, bind, &format!("{pre}.attn.q"), x)?;
            let k = linear(g, bind, &format!("{pre}.attn.k"), x)?;
            let v = linear(g, bind, &format!("{pre}.attn.v"), x)?;
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let scores = g.add_row(scores, key_mask)?;
                let probs = g.softmax(scores);
                heads.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat_cols(&heads)?;
            let attn = linear(g, bind, &format!("{pre}.attn.o"), ctx)?;
            let attn = g.dropout(attn, p_int, rng)?;
            let res = g.add(x, attn)?;
            x = norm(g, bind, &format!("{pre}.ln1"), res)?;

            let hidden = linear(g, bind, &format!("{pre}.ffn.in"), x)?;
            let hidden = match self.activation {
                Activation::Gelu => g.gelu(hidden),
                Activation::Relu => g.relu(hidden),
            };
            let out = linear(g, bind, &format!("{pre}.ffn.out"), hidden)?;
            let out = g.dropout(out, p_int, rng)?;
            let res = g.add(x, out)?;
            x = norm(g, bind, &format!("{pre}.ln2"), res)?;
        }

        let cls = g.gather_rows(x, &[0])?;
        let pooled = linear(g, bind, "encoder.pooler", cls)?;
        let pooled = g.tanh(pooled);
        let seq_rep = g.dropout(pooled, p_out, rng)?;
        let head_tok_reps = g.dropout(x, p_out, rng)?;
        Ok(EncoderOutput {
            seq_rep,
            tok_reps: x,
            head_tok_reps,
            mask: input.mask.to_vec(),
        })
    }

    /// Forward a batch of items in one graph.
    pub fn encode_batch<T: Real, R: Rng>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binding<T>,
        inputs: &[EncoderInput<'_>],
        train: bool,
        rng: &mut R,
    ) -> Result<Vec<EncoderOutput>> {
        for inp in inputs {
            if let Some(&bad) = inp.ids.iter().find(|&&i| i as usize >= self.vocab_size) {
                return Err(Error::Invalid(format!(
                    "token id {bad} >= vocab size {}",
                    self.vocab_size
                )));
            }
        }
        inputs
            .iter()
            .map(|&inp| self.forward(g, bind, inp, train, rng))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            vocab_size: 40,
            ..Default::default()
        }
    }

    fn run(
        cfg: &EncoderConfig,
        params: &ParamStore<f64>,
        items: &[(Vec<u32>, Vec<bool>)],
        train: bool,
    ) -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let mut bind = Binding::new(params);
        let segs: Vec<Vec<u32>> = items.iter().map(|(i, _)| vec![0; i.len()]).collect();
        let inputs: Vec<EncoderInput> = items
            .iter()
            .zip(&segs)
            .map(|((ids, mask), s)| EncoderInput { ids, segments: s, mask })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        cfg.encode_batch(&mut g, &mut bind, &inputs, train, &mut rng)
            .unwrap()
            .iter()
            .map(|o| g.value(o.tok_reps).clone())
            .collect()
    }

    #[test]
    fn validate_lists_violations() {
        let cfg = EncoderConfig {
            hidden: 10,
            heads: 3,
            max_positions: 100,
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible") && msg.contains("max_positions"), "{msg}");
    }

    #[test]
    fn same_seed_same_params_and_unit_gains() {
        let cfg = small();
        let a: ParamStore<f32> = cfg.init_params(ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: ParamStore<f32> = cfg.init_params(ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let gain = &a.get("encoder.layer1.ln2.gain").unwrap().tensor;
        assert!(gain.data().iter().all(|&v| v == 1.0));
        assert_eq!(a.count(), cfg.param_count());
    }

    #[test]
    fn default_param_count_regression() {
        // Frozen from an independent count of the default layout, vocab 1000.
        assert_eq!(EncoderConfig::default().param_count(), 987_008);
        let p: ParamStore<f32> = EncoderConfig::default()
            .init_params(ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(p.count(), 987_008);
    }

    #[test]
    fn padding_does_not_leak() {
        let cfg = small();
        let params: ParamStore<f64> = cfg.init_params(ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ids = vec![0u32, 7, 9, 11, 1];
        let mut padded = ids.clone();
        padded.extend([2, 2, 2]);
        let mut mask = vec![true; 5];
        mask.extend([false; 3]);
        let out = run(&cfg, &params, &[(ids, vec![true; 5]), (padded, mask)], false);
        for r in 0..5 {
            for (a, b) in out[0].row(r).iter().zip(out[1].row(r)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identical_items_identical_outputs() {
        let cfg = small();
        let params: ParamStore<f64> = cfg.init_params(ChaCha8Rng::seed_from_u64(2)).unwrap();
        let item = (vec![0u32, 5, 6, 1], vec![true; 4]);
        let out = run(&cfg, &params, &[item.clone(), item], false);
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut cfg = small();
        cfg.dropout_internal = 0.0;
        cfg.dropout_output = 0.0;
        let params: ParamStore<f64> = cfg.init_params(ChaCha8Rng::seed_from_u64(2)).unwrap();
        let item = (vec![0u32, 5, 6, 1], vec![true; 4]);
        let a = run(&cfg, &params, std::slice::from_ref(&item), false);
        let b = run(&cfg, &params, &[item], true);
        assert_eq!(a, b);
    }

    #[test]
    fn segment_ids_ignored_without_segment_embeddings() {
        let cfg = small();
        let params: ParamStore<f64> = cfg.init_params(ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ids = [0u32, 5, 6, 1];
        let mask = [true; 4];
        let mut outs = Vec::new();
        for segs in [[0u32, 0, 0, 0], [0, 0, 1, 1]] {
            let mut g = Graph::new();
            let mut bind = Binding::new(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let o = cfg
                .forward(
                    &mut g,
                    &mut bind,
                    EncoderInput {
                        ids: &ids,
                        segments: &segs,
                        mask: &mask,
                    },
                    false,
                    &mut rng,
                )
                .unwrap();
            outs.push(g.value(o.tok_reps).clone());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn oversize_sequence_is_rejected() {
        let cfg = small();
        let params: ParamStore<f64> = cfg.init_params(ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ids = vec![5u32; cfg.max_positions + 1];
        let mask = vec![true; ids.len()];
        let segs = vec![0; ids.len()];
        let mut g = Graph::new();
        let mut bind = Binding::new(&params);
        let r = cfg.forward(
            &mut g,
            &mut bind,
            EncoderInput {
                ids: &ids,
                segments: &segs,
                mask: &mask,
            },
            false,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(r.is_err());
    }
}
