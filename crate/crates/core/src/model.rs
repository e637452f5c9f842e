//! Encoder plus heads: per-task batch losses and DST prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AuxFeatures, TurnFeatures};
use crate::encoder::{EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::heads::dst::{dst_forward, dst_loss};
use crate::heads::{classify_sequence, dst_decode, predict_span, DstLogits, GateClass, CLS_HEAD, SPAN_HEAD};
use crate::ontology::{DialogState, Ontology};
use crate::params::{Binding, ParamGrads, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Head-side settings shared by training and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Dropout on head inputs at train time.
    pub dropout: f64,
    pub max_span_len: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            dropout: 0.10,
            max_span_len: crate::heads::MAX_SPAN_LEN,
        }
    }
}

/// A dialog-state tracker: encoder config, ontology and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DstModel<T> {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub ontology: Ontology,
    pub params: ParamStore<T>,
}

fn encode_one<T: Real, R: Rng>(
    g: &mut Graph<T>,
    bind: &mut Binding<T>,
    cfg: &EncoderConfig,
    ids: &[u32],
    segments: &[u32],
    train: bool,
    rng: &mut R,
) -> Result<crate::encoder::EncoderOutput> {
    let mask = vec![true; ids.len()];
    cfg.encode_batch(
        g,
        bind,
        &[EncoderInput {
            ids,
            segments,
            mask: &mask,
        }],
        train,
        rng,
    )
    .map(|mut v| v.remove(0))
}

/// Summed loss of one DST turn. `ids` overrides the feature's token ids.
#[allow(clippy::too_many_arguments)]
pub fn dst_item_loss<T: Real, R: Rng>(
    g: &mut Graph<T>,
    bind: &mut Binding<T>,
    cfg: &EncoderConfig,
    heads: &HeadConfig,
    ontology: &Ontology,
    f: &TurnFeatures,
    ids: Option<&[u32]>,
    train: bool,
    rng: &mut R,
) -> Result<(Var, crate::heads::DstHeadOutput)> {
    let enc = encode_one(g, bind, cfg, ids.unwrap_or(&f.seq.ids), &f.seq.segment_ids, train, rng)?;
    let p = if train { heads.dropout } else { 0.0 };
    let out = dst_forward(g, bind, ontology, &enc, &f.span_valid, p, rng)?;
    let loss = dst_loss(g, ontology, &out, &f.labels)?;
    Ok((loss, out))
}

/// Loss of one auxiliary example.
pub fn aux_item_loss<T: Real, R: Rng>(
    g: &mut Graph<T>,
    bind: &mut Binding<T>,
    cfg: &EncoderConfig,
    heads: &HeadConfig,
    f: &AuxFeatures,
    train: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let seq = f.seq();
    let enc = encode_one(g, bind, cfg, &seq.ids, &seq.segment_ids, train, rng)?;
    let p = if train { heads.dropout } else { 0.0 };
    match f {
        AuxFeatures::Classification { label, .. } => {
            let logits = classify_sequence(g, bind, CLS_HEAD, enc.seq_rep, p, rng)?;
            Ok((g.cross_entropy(logits, &[Some(*label)])?, logits))
        }
        AuxFeatures::Span { valid, target, .. } => {
            let logits = predict_span(g, bind, SPAN_HEAD, enc.head_tok_reps, valid, p, rng)?;
            Ok((g.cross_entropy(logits, &[Some(target.0), Some(target.1)])?, logits))
        }
    }
}

/// Mean loss over a batch and its gradient for every parameter the batch
/// touched.
pub fn batch_gradients<T: Real, F>(
    params: &ParamStore<T>,
    items: usize,
    mut item_loss: F,
) -> Result<(f64, ParamGrads<T>)>
where
    F: FnMut(&mut Graph<T>, &mut Binding<T>, usize) -> Result<Var>,
{
    if items == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut g = Graph::new();
    let mut bind = Binding::new(params);
    let losses = (0..items)
        .map(|i| item_loss(&mut g, &mut bind, i))
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_all(&losses)?;
    let mean = g.scale(total, T::of(1.0 / items as f64));
    let value = g.value(mean).item().to_f64().unwrap_or(f64::NAN);
    let mut grads = g.backward(mean)?;
    Ok((value, bind.collect(&mut grads)))
}

/// Head outputs of one evaluated turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    pub logits: DstLogits,
    pub loss: f64,
}

/// Eval-mode logits and loss for every turn, `chunk` turns per graph.
pub fn dst_outputs<T: Real>(model: &DstModel<T>, feats: &[TurnFeatures], chunk: usize) -> Result<Vec<TurnOutput>> {
    let mut rng = crate::seed::rng(0);
    let mut out = Vec::with_capacity(feats.len());
    for part in feats.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let mut bind = Binding::new(&model.params);
        for f in part {
            let (loss, heads) = dst_item_loss(
                &mut g,
                &mut bind,
                &model.encoder,
                &model.heads,
                &model.ontology,
                f,
                None,
                false,
                &mut rng,
            )?;
            out.push(TurnOutput {
                logits: DstLogits::from_graph(&g, &heads),
                loss: g.value(loss).item().to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(out)
}

/// Predicted state and per-slot decisions of one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialog_id: String,
    pub turn_index: usize,
    pub state: DialogState,
    pub gates: Vec<GateClass>,
    pub spans: Vec<Option<(usize, usize)>>,
}

/// Track every dialog turn by turn, feeding each predicted state forward.
/// Also returns the mean per-turn loss against the gold labels.
pub fn predict_dialogs<T: Real>(model: &DstModel<T>, feats: &[TurnFeatures]) -> Result<(Vec<TurnPrediction>, f64)> {
    let outputs = dst_outputs(model, feats, 32)?;
    let mut preds = Vec::with_capacity(feats.len());
    let mut state = DialogState::new();
    let mut current: Option<&str> = None;
    for (f, o) in feats.iter().zip(&outputs) {
        if current != Some(f.dialog_id.as_str()) || f.turn_index == 0 {
            state = DialogState::new();
            current = Some(&f.dialog_id);
        }
        let (next, slots) = dst_decode(
            &o.logits,
            &model.ontology,
            &state,
            &f.informs,
            &f.seq,
            model.heads.max_span_len,
        )?;
        preds.push(TurnPrediction {
            dialog_id: f.dialog_id.clone(),
            turn_index: f.turn_index,
            state: next.clone(),
            gates: slots.iter().map(|s| s.gate).collect(),
            spans: slots.iter().map(|s| s.span).collect(),
        });
        state = next;
    }
    let loss = if outputs.is_empty() {
        0.0
    } else {
        outputs.iter().map(|o| o.loss).sum::<f64>() / outputs.len() as f64
    };
    Ok((preds, loss))
}

/// Accuracy of the auxiliary head on `feats` (exact span match for QA) and
/// the mean loss.
pub fn aux_accuracy<T: Real>(
    cfg: &EncoderConfig,
    heads: &HeadConfig,
    params: &ParamStore<T>,
    feats: &[AuxFeatures],
) -> Result<(f64, f64)> {
    if feats.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut rng = crate::seed::rng(0);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for part in feats.chunks(32) {
        let mut g = Graph::new();
        let mut bind = Binding::new(params);
        for f in part {
            let (l, logits) = aux_item_loss(&mut g, &mut bind, cfg, heads, f, false, &mut rng)?;
            loss += g.value(l).item().to_f64().unwrap_or(f64::NAN);
            let v = g.value(logits).to_f64();
            let hit = match f {
                AuxFeatures::Classification { label, .. } => crate::heads::argmax(&v) == *label,
                AuxFeatures::Span { target, .. } => {
                    let n = v.len() / 2;
                    crate::heads::decode_span(&v[..n], &v[n..], heads.max_span_len) == *target
                }
            };
            correct += usize::from(hit);
        }
    }
    Ok((correct as f64 / feats.len() as f64, loss / feats.len() as f64))
}

/// Fresh parameters: encoder, DST heads, and optionally an auxiliary head.
pub fn init_dst_params<T: Real>(
    cfg: &EncoderConfig,
    ontology: &Ontology,
    encoder_seed: u64,
    heads_seed: u64,
) -> Result<ParamStore<T>> {
    let mut p = cfg.init_params(crate::seed::rng(encoder_seed))?;
    p.extend(crate::heads::dst::init_params(
        ontology,
        cfg.hidden,
        crate::seed::rng(heads_seed),
    ));
    Ok(p)
}

/// Whether `params` has every head `ontology` needs; names the first gap.
pub fn check_heads<T: Real>(params: &ParamStore<T>, ontology: &Ontology, hidden: usize) -> Result<()> {
    let want: ParamStore<T> = crate::heads::dst::init_params(ontology, hidden, crate::seed::rng(0));
    for (name, p) in want.iter() {
        let have = params.get(name)?;
        if have.tensor.shape() != p.tensor.shape() {
            return Err(Error::shape(
                "heads",
                format!("`{name}` is {:?}, expected {:?}", have.tensor.shape(), p.tensor.shape()),
            ));
        }
    }
    Ok(())
}

/// Finite-difference check of the summed DST and auxiliary losses with
/// respect to every parameter of `model`. Dropout masks are replayed from
/// `seed` on every evaluation.
pub fn model_grad_check(
    model: &DstModel<f64>,
    dst: &[TurnFeatures],
    aux: &[AuxFeatures],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<crate::tensor::GradCheckReport> {
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut tensors: Vec<_> = model.params.iter().map(|(_, p)| p.tensor.clone()).collect();
    crate::tensor::grad_check(
        &mut tensors,
        |g, vars| {
            let mut bind = Binding::prebound(names.iter().cloned().zip(vars.iter().copied()).collect());
            let mut rng = crate::seed::rng(seed);
            let mut losses = Vec::new();
            for f in dst {
                let (l, _) = dst_item_loss(
                    g,
                    &mut bind,
                    &model.encoder,
                    &model.heads,
                    &model.ontology,
                    f,
                    None,
                    true,
                    &mut rng,
                )?;
                losses.push(l);
            }
            for f in aux {
                losses.push(aux_item_loss(g, &mut bind, &model.encoder, &model.heads, f, true, &mut rng)?.0);
            }
            g.add_all(&losses)
        },
        eps,
        samples,
        seed,
    )
}
