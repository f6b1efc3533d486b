//! Optimization loop, hyperparameter sweep, and metric tracking for the
//! three objectives.
//!
//! Batches are differentiated example by example on independent tapes
//! (rayon-parallel in fixed-size chunks) and reduced in example order, so
//! results are identical regardless of thread count. The contrastive
//! objective couples the batch through in-batch negatives: encoder tapes
//! are kept from the forward pass, the loss gradient is computed on the
//! collected embedding matrices, and each tape is then re-entered with
//! its embedding-row gradients.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Matrix, ParamStore, Tape};
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::corpus::AssemblyRecord;
use crate::encoder::{EncoderModel, Mode};
use crate::error::{Error, Result};
use crate::objectives::{
    contrastive_loss_with_grads, embed_unit, mlm_corrupt, mlm_loss, pair_probability, MlmRates,
    MlmTarget, MlmTransform, Objective, PairHead, ProjectionHead, Temperature,
};
use crate::sentence::{SentenceCase, SentencePair};
use crate::tokenizer::{encode_pair, encode_single, TokenSequence, Vocab};

/// Examples processed per parallel chunk; constant so the gradient
/// reduction order never depends on thread count.
const PAR_CHUNK: usize = 16;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable combination of seed components (run seed, epoch, step, example).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub epochs: usize,
    /// None resolves per objective: 64 for pair/mlm, 128 for contrastive.
    pub batch_size: Option<usize>,
    pub dropout_p: f64,
    pub max_len: usize,
    pub output_attention_heads: usize,
    pub frozen_layers: usize,
    pub temperature: f64,
    pub temperature_learnable: bool,
    pub use_projection: bool,
    pub seed: u64,
    /// Recorded for provenance when pairs are built by the same run.
    pub sentence_case: Option<SentenceCase>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_embed: usize,
    pub vocab_min_freq: usize,
    pub vocab_max_size: usize,
    /// Epochs without validation improvement before stopping (pair
    /// objective); 0 disables early stopping.
    pub early_stop_patience: usize,
    /// Apply the dense+norm transform before the tied MLM projection.
    pub mlm_transform: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Pair,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: None,
            dropout_p: 0.1,
            max_len: 128,
            output_attention_heads: 0,
            frozen_layers: 0,
            temperature: 0.07,
            temperature_learnable: false,
            use_projection: true,
            seed: 0,
            sentence_case: None,
            d_model: 64,
            n_layers: 4,
            n_heads: 8,
            d_ff: 256,
            d_embed: 64,
            vocab_min_freq: 1,
            vocab_max_size: 20_000,
            early_stop_patience: 3,
            mlm_transform: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.max_len < 8 {
            return Err(Error::Config(format!("max_len must be at least 8, got {}", self.max_len)));
        }
        let batch = self.resolved_batch_size();
        if batch == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(self.objective, Objective::Contrastive) && batch < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for the contrastive objective".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        // Dimension constraints are shared with the encoder.
        self.encoder_config(crate::tokenizer::N_SPECIALS).validate()
    }

    pub fn resolved_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.objective {
            Objective::Contrastive => 128,
            _ => 64,
        })
    }

    pub fn encoder_config(&self, vocab_size: usize) -> crate::encoder::EncoderConfig {
        crate::encoder::EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout_p: self.dropout_p,
            output_attention_heads: self.output_attention_heads,
            frozen_layers: self.frozen_layers,
            seed: self.seed,
        }
    }
}

/// Objective-specific trainable head(s) on top of the encoder.
#[derive(Debug, Clone)]
pub enum ObjectiveHead {
    Pair(PairHead),
    Contrastive {
        projection: Option<ProjectionHead>,
        temperature: Temperature,
    },
    /// Output projection is tied to the token embedding, optionally
    /// through a dense+norm transform.
    Mlm { transform: Option<MlmTransform> },
}

/// Everything one model needs to run: parameters, encoder wiring, the
/// vocabulary it was built with, and its head.
#[derive(Clone)]
pub struct ModelBundle {
    pub store: ParamStore,
    pub encoder: EncoderModel,
    pub vocab: Vocab,
    pub head: ObjectiveHead,
}

impl ModelBundle {
    pub fn init(config: &TrainConfig, vocab: Vocab) -> Result<ModelBundle> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = EncoderModel::init(config.encoder_config(vocab.size()), &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x4EAD]));
        let head = match config.objective {
            Objective::Pair => ObjectiveHead::Pair(PairHead::init(&mut store, config.d_model, &mut rng)),
            Objective::Contrastive => ObjectiveHead::Contrastive {
                projection: if config.use_projection {
                    Some(ProjectionHead::init(&mut store, config.d_model, config.d_embed, &mut rng))
                } else {
                    None
                },
                temperature: if config.temperature_learnable {
                    Temperature::learnable(&mut store, config.temperature)?
                } else {
                    Temperature::fixed(config.temperature)?
                },
            },
            Objective::Mlm => ObjectiveHead::Mlm {
                transform: config
                    .mlm_transform
                    .then(|| MlmTransform::init(&mut store, config.d_model, &mut rng)),
            },
        };
        Ok(ModelBundle {
            store,
            encoder,
            vocab,
            head,
        })
    }

    pub fn objective(&self) -> Objective {
        match self.head {
            ObjectiveHead::Pair(_) => Objective::Pair,
            ObjectiveHead::Contrastive { .. } => Objective::Contrastive,
            ObjectiveHead::Mlm { .. } => Objective::Mlm,
        }
    }

    fn projection(&self) -> Option<&ProjectionHead> {
        match &self.head {
            ObjectiveHead::Contrastive { projection, .. } => projection.as_ref(),
            _ => None,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection()
            .map(|p| p.d_embed)
            .unwrap_or(self.encoder.config.d_model)
    }

    /// Deterministic unit embedding of one text (eval mode); contrastive
    /// bundles apply their projection head first.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let seq = encode_single(text, &self.vocab, self.encoder.config.max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let out = self.encoder.forward(&mut tape, &self.store, &seq, Mode::Eval, &mut rng);
        let unit = embed_unit(&mut tape, &self.store, out.cls, self.projection());
        tape.value(unit).row(0).to_vec()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (use_projection, d_embed) = match self.projection() {
            Some(p) => (true, p.d_embed),
            None => (false, 0),
        };
        let (temperature, temperature_learnable) = match &self.head {
            ObjectiveHead::Contrastive { temperature, .. } => (
                temperature.value(&self.store),
                matches!(temperature, Temperature::Learnable(_)),
            ),
            _ => (0.07, false),
        };
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: self.objective(),
            encoder_config: self.encoder.config.clone(),
            use_projection,
            d_embed,
            temperature,
            temperature_learnable,
            mlm_transform: matches!(&self.head, ObjectiveHead::Mlm { transform: Some(_) }),
            vocab_words: self.vocab.word_tokens().to_vec(),
            tensors: Checkpoint::capture_store(&self.store),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<ModelBundle> {
        let vocab = Vocab::from_word_tokens(ckpt.vocab_words.clone());
        if vocab.size() != ckpt.encoder_config.vocab_size {
            return Err(Error::Data(format!(
                "checkpoint dimension mismatch: encoder was built for a vocabulary of {} \
                 tokens but the stored vocabulary has {}",
                ckpt.encoder_config.vocab_size,
                vocab.size()
            )));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderModel::init(ckpt.encoder_config.clone(), &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = match ckpt.kind {
            Objective::Pair => {
                ObjectiveHead::Pair(PairHead::init(&mut store, ckpt.encoder_config.d_model, &mut rng))
            }
            Objective::Contrastive => ObjectiveHead::Contrastive {
                projection: if ckpt.use_projection {
                    Some(ProjectionHead::init(
                        &mut store,
                        ckpt.encoder_config.d_model,
                        ckpt.d_embed,
                        &mut rng,
                    ))
                } else {
                    None
                },
                temperature: if ckpt.temperature_learnable {
                    Temperature::learnable(&mut store, ckpt.temperature)?
                } else {
                    Temperature::fixed(ckpt.temperature)?
                },
            },
            Objective::Mlm => ObjectiveHead::Mlm {
                transform: ckpt
                    .mlm_transform
                    .then(|| MlmTransform::init(&mut store, ckpt.encoder_config.d_model, &mut rng)),
            },
        };
        ckpt.restore_store(&mut store)?;
        Ok(ModelBundle {
            store,
            encoder,
            vocab,
            head,
        })
    }
}

/// Adam hyperparameters; β and ε follow the usual defaults.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn with_lr(learning_rate: f64) -> AdamParams {
        AdamParams {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second-moment state aligned with a [`ParamStore`].
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: usize,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        AdamState {
            m: store.ids().map(|id| Matrix::zeros(store.get(id).raw_dim())).collect(),
            v: store.ids().map(|id| Matrix::zeros(store.get(id).raw_dim())).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

/// Bias-corrected Adam update over the trainable tensors. Returns false
/// (and leaves everything untouched) when the gradients are not finite.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    params: &AdamParams,
) -> bool {
    if !grads.all_finite() {
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - params.beta1.powi(t);
    let bc2 = 1.0 - params.beta2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        if !store.is_trainable(id) {
            continue;
        }
        let g = grads.get(id);
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
            *m = params.beta1 * *m + (1.0 - params.beta1) * g;
        });
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
            *v = params.beta2 * *v + (1.0 - params.beta2) * g * g;
        });
        let w = store.get_mut(id);
        ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *w -= params.learning_rate * m_hat / (v_hat.sqrt() + params.epsilon);
        });
    }
    true
}

/// Mean loss, accuracy and summed-to-mean gradients for one mini-batch.
pub struct BatchResult {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: Gradients,
    pub n_examples: usize,
}

/// Pair-classification batch in train mode with gradients.
pub fn pair_train_batch(
    bundle: &ModelBundle,
    pairs: &[SentencePair],
    step_seed: u64,
) -> Result<BatchResult> {
    let head = match &bundle.head {
        ObjectiveHead::Pair(h) => h,
        _ => return Err(Error::Config("bundle is not a pair model".into())),
    };
    if pairs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let n = pairs.len();
    let inv = 1.0 / n as f64;
    let max_len = bundle.encoder.config.max_len;
    let mut grads = Gradients::zeros_like(&bundle.store);
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for (chunk_idx, chunk) in pairs.chunks(PAR_CHUNK).enumerate() {
        let base = chunk_idx * PAR_CHUNK;
        let results: Vec<(f64, bool, Gradients)> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[step_seed, (base + i) as u64]));
                let mut tape = Tape::new();
                let seq = encode_pair(&pair.sentence_a, &pair.sentence_b, &bundle.vocab, max_len);
                let out =
                    bundle.encoder.forward(&mut tape, &bundle.store, &seq, Mode::Train, &mut rng);
                let prob = pair_probability(&mut tape, &bundle.store, out.cls, head);
                let loss = tape.bce_loss(prob, f64::from(pair.label));
                let mut g = Gradients::zeros_like(&bundle.store);
                tape.backward(&[(loss, Matrix::from_elem((1, 1), inv))], &bundle.store, &mut g);
                let p = tape.scalar(prob);
                (tape.scalar(loss), (p >= 0.5) == (pair.label == 1), g)
            })
            .collect();
        for (loss, hit, g) in results {
            total_loss += loss;
            correct += usize::from(hit);
            grads.accumulate(&g);
        }
    }
    Ok(BatchResult {
        loss: total_loss * inv,
        accuracy: correct as f64 / n as f64,
        grads,
        n_examples: n,
    })
}

/// Deterministic eval-mode loss/accuracy over pairs.
pub fn pair_eval(bundle: &ModelBundle, pairs: &[SentencePair]) -> Result<(f64, f64)> {
    let head = match &bundle.head {
        ObjectiveHead::Pair(h) => h,
        _ => return Err(Error::Config("bundle is not a pair model".into())),
    };
    if pairs.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let max_len = bundle.encoder.config.max_len;
    let results: Vec<(f64, bool)> = pairs
        .par_iter()
        .map(|pair| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let seq = encode_pair(&pair.sentence_a, &pair.sentence_b, &bundle.vocab, max_len);
            let out = bundle.encoder.forward(&mut tape, &bundle.store, &seq, Mode::Eval, &mut rng);
            let prob = pair_probability(&mut tape, &bundle.store, out.cls, head);
            let loss = tape.bce_loss(prob, f64::from(pair.label));
            let p = tape.scalar(prob);
            (tape.scalar(loss), (p >= 0.5) == (pair.label == 1))
        })
        .collect();
    let n = results.len() as f64;
    let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = results.iter().filter(|(_, hit)| *hit).count() as f64 / n;
    Ok((loss, acc))
}

/// Contrastive batch: encode both sides of every record, differentiate
/// the symmetric in-batch loss, then push row gradients back through the
/// per-example tapes.
pub fn contrastive_train_batch(
    bundle: &ModelBundle,
    records: &[AssemblyRecord],
    step_seed: u64,
) -> Result<BatchResult> {
    let (projection, temperature) = match &bundle.head {
        ObjectiveHead::Contrastive {
            projection,
            temperature,
        } => (projection.as_ref(), temperature),
        _ => return Err(Error::Config("bundle is not a contrastive model".into())),
    };
    let b = records.len();
    if b < 2 {
        return Err(Error::Data("contrastive batch needs at least 2 records".into()));
    }
    let max_len = bundle.encoder.config.max_len;

    struct ExampleTape {
        tape: Tape,
        assembly: crate::autograd::Var,
        parts: crate::autograd::Var,
    }

    let mut tapes: Vec<ExampleTape> = Vec::with_capacity(b);
    for (chunk_idx, chunk) in records.chunks(PAR_CHUNK).enumerate() {
        let base = chunk_idx * PAR_CHUNK;
        let mut chunk_tapes: Vec<ExampleTape> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, record)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[step_seed, (base + i) as u64]));
                let mut tape = Tape::new();
                let name_seq = encode_single(&record.assembly_name, &bundle.vocab, max_len);
                let parts_seq = encode_single(&record.parts_text(), &bundle.vocab, max_len);
                let name_out =
                    bundle.encoder.forward(&mut tape, &bundle.store, &name_seq, Mode::Train, &mut rng);
                let parts_out =
                    bundle.encoder.forward(&mut tape, &bundle.store, &parts_seq, Mode::Train, &mut rng);
                let assembly = embed_unit(&mut tape, &bundle.store, name_out.cls, projection);
                let parts = embed_unit(&mut tape, &bundle.store, parts_out.cls, projection);
                ExampleTape {
                    tape,
                    assembly,
                    parts,
                }
            })
            .collect();
        tapes.append(&mut chunk_tapes);
    }

    let d = bundle.embedding_dim();
    let mut assembly_rows = Matrix::zeros((b, d));
    let mut parts_rows = Matrix::zeros((b, d));
    for (i, ex) in tapes.iter().enumerate() {
        assembly_rows.row_mut(i).assign(&ex.tape.value(ex.assembly).row(0));
        parts_rows.row_mut(i).assign(&ex.tape.value(ex.parts).row(0));
    }
    let tau = temperature.value(&bundle.store);
    let batch = contrastive_loss_with_grads(&assembly_rows, &parts_rows, tau)?;

    let mut grads = Gradients::zeros_like(&bundle.store);
    if let Some(id) = temperature.param_id() {
        if bundle.store.is_trainable(id) {
            grads.get_mut(id)[[0, 0]] += batch.grad_log_tau;
        }
    }
    for (chunk_idx, chunk) in tapes.chunks(PAR_CHUNK).enumerate() {
        let base = chunk_idx * PAR_CHUNK;
        let results: Vec<Gradients> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let row = base + i;
                let mut g = Gradients::zeros_like(&bundle.store);
                let seed_a = batch
                    .grad_assembly
                    .row(row)
                    .to_owned()
                    .insert_axis(ndarray::Axis(0));
                let seed_p = batch
                    .grad_parts
                    .row(row)
                    .to_owned()
                    .insert_axis(ndarray::Axis(0));
                ex.tape.backward(
                    &[(ex.assembly, seed_a), (ex.parts, seed_p)],
                    &bundle.store,
                    &mut g,
                );
                g
            })
            .collect();
        for g in results {
            grads.accumulate(&g);
        }
    }

    Ok(BatchResult {
        loss: batch.loss,
        accuracy: batch.diagonal_top1,
        grads,
        n_examples: b,
    })
}

/// Eval-mode in-batch diagonal top-1 over `records`, grouped into batches
/// of `batch_size`; a trailing remainder below 2 is dropped. Returns None
/// when no batch can be formed.
pub fn contrastive_eval_top1(
    bundle: &ModelBundle,
    records: &[AssemblyRecord],
    batch_size: usize,
) -> Result<Option<f64>> {
    let (projection, temperature) = match &bundle.head {
        ObjectiveHead::Contrastive {
            projection,
            temperature,
        } => (projection.as_ref(), temperature),
        _ => return Err(Error::Config("bundle is not a contrastive model".into())),
    };
    let tau = temperature.value(&bundle.store);
    let max_len = bundle.encoder.config.max_len;
    let d = bundle.embedding_dim();
    let mut hits = 0.0;
    let mut total = 0usize;
    for group in records.chunks(batch_size) {
        if group.len() < 2 {
            continue;
        }
        let rows: Vec<(Vec<f64>, Vec<f64>)> = group
            .par_iter()
            .map(|record| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut tape = Tape::new();
                let name_seq = encode_single(&record.assembly_name, &bundle.vocab, max_len);
                let parts_seq = encode_single(&record.parts_text(), &bundle.vocab, max_len);
                let name_out =
                    bundle.encoder.forward(&mut tape, &bundle.store, &name_seq, Mode::Eval, &mut rng);
                let parts_out =
                    bundle.encoder.forward(&mut tape, &bundle.store, &parts_seq, Mode::Eval, &mut rng);
                let a = embed_unit(&mut tape, &bundle.store, name_out.cls, projection);
                let p = embed_unit(&mut tape, &bundle.store, parts_out.cls, projection);
                (
                    tape.value(a).row(0).to_vec(),
                    tape.value(p).row(0).to_vec(),
                )
            })
            .collect();
        let n = rows.len();
        let mut a = Matrix::zeros((n, d));
        let mut p = Matrix::zeros((n, d));
        for (i, (ar, pr)) in rows.iter().enumerate() {
            a.row_mut(i).assign(&ndarray::ArrayView1::from(&ar[..]));
            p.row_mut(i).assign(&ndarray::ArrayView1::from(&pr[..]));
        }
        let batch = contrastive_loss_with_grads(&a, &p, tau)?;
        hits += batch.diagonal_top1 * n as f64;
        total += n;
    }
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(hits / total as f64))
}

/// MLM batch over pre-corrupted sequences.
pub fn mlm_train_batch(
    bundle: &ModelBundle,
    examples: &[(TokenSequence, Vec<MlmTarget>)],
    step_seed: u64,
) -> Result<BatchResult> {
    let transform = match &bundle.head {
        ObjectiveHead::Mlm { transform } => transform.as_ref(),
        _ => return Err(Error::Config("bundle is not an mlm model".into())),
    };
    if examples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let n_supervised = examples.iter().filter(|(_, t)| !t.is_empty()).count().max(1);
    let inv = 1.0 / n_supervised as f64;
    let token_embedding = bundle.encoder.token_embedding_id();
    let mut grads = Gradients::zeros_like(&bundle.store);
    let mut total_loss = 0.0;
    let mut n_targets = 0usize;
    let mut n_correct = 0usize;
    for (chunk_idx, chunk) in examples.chunks(PAR_CHUNK).enumerate() {
        let base = chunk_idx * PAR_CHUNK;
        let results: Vec<(f64, usize, usize, Gradients)> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, (seq, targets))| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[step_seed, (base + i) as u64]));
                let mut tape = Tape::new();
                let out =
                    bundle.encoder.forward(&mut tape, &bundle.store, seq, Mode::Train, &mut rng);
                let mut g = Gradients::zeros_like(&bundle.store);
                match mlm_loss(&mut tape, &bundle.store, out.states, targets, token_embedding, transform) {
                    Some((loss, logits)) => {
                        tape.backward(
                            &[(loss, Matrix::from_elem((1, 1), inv))],
                            &bundle.store,
                            &mut g,
                        );
                        let logit_rows = tape.value(logits);
                        let correct = targets
                            .iter()
                            .enumerate()
                            .filter(|(row, target)| {
                                let r = logit_rows.row(*row);
                                let mut best = 0usize;
                                for c in 1..r.len() {
                                    if r[c] > r[best] {
                                        best = c;
                                    }
                                }
                                best == target.original_id as usize
                            })
                            .count();
                        (tape.scalar(loss), targets.len(), correct, g)
                    }
                    None => (0.0, 0, 0, g),
                }
            })
            .collect();
        for (loss, t, c, g) in results {
            total_loss += loss;
            n_targets += t;
            n_correct += c;
            grads.accumulate(&g);
        }
    }
    Ok(BatchResult {
        loss: total_loss * inv,
        accuracy: if n_targets == 0 {
            0.0
        } else {
            n_correct as f64 / n_targets as f64
        },
        grads,
        n_examples: examples.len(),
    })
}

/// Corrupt a whole encoded dataset with per-example seeded RNG.
pub fn corrupt_dataset(
    sequences: &[TokenSequence],
    vocab_size: usize,
    rates: &MlmRates,
    seed: u64,
) -> Vec<(TokenSequence, Vec<MlmTarget>)> {
    sequences
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
            mlm_corrupt(seq, vocab_size, rates, &mut rng)
        })
        .collect()
}

/// Eval-mode MLM accuracy under a fixed corruption seed.
pub fn mlm_eval_accuracy(bundle: &ModelBundle, texts: &[String], seed: u64) -> Result<Option<f64>> {
    let transform = match &bundle.head {
        ObjectiveHead::Mlm { transform } => transform.as_ref(),
        _ => return Err(Error::Config("bundle is not an mlm model".into())),
    };
    if texts.is_empty() {
        return Ok(None);
    }
    let max_len = bundle.encoder.config.max_len;
    let sequences: Vec<TokenSequence> = texts
        .iter()
        .map(|t| encode_single(t, &bundle.vocab, max_len))
        .collect();
    let corrupted = corrupt_dataset(&sequences, bundle.vocab.size(), &MlmRates::default(), seed);
    let token_embedding = bundle.encoder.token_embedding_id();
    let counts: Vec<(usize, usize)> = corrupted
        .par_iter()
        .map(|(seq, targets)| {
            if targets.is_empty() {
                return (0, 0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let out = bundle.encoder.forward(&mut tape, &bundle.store, seq, Mode::Eval, &mut rng);
            match mlm_loss(&mut tape, &bundle.store, out.states, targets, token_embedding, transform) {
                Some((_, logits)) => {
                    let rows = tape.value(logits);
                    let correct = targets
                        .iter()
                        .enumerate()
                        .filter(|(row, target)| {
                            let r = rows.row(*row);
                            let mut best = 0usize;
                            for c in 1..r.len() {
                                if r[c] > r[best] {
                                    best = c;
                                }
                            }
                            best == target.original_id as usize
                        })
                        .count();
                    (targets.len(), correct)
                }
                None => (0, 0),
            }
        })
        .collect();
    let total: usize = counts.iter().map(|(t, _)| t).sum();
    let correct: usize = counts.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(correct as f64 / total as f64))
}

/// Per-epoch training curves. Wall-clock timings are kept out of the
/// serialized form so metric files are byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<Option<f64>>,
    pub skipped_steps: usize,
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl MetricsHistory {
    fn new() -> Self {
        MetricsHistory {
            train_loss: Vec::new(),
            train_accuracy: Vec::new(),
            val_accuracy: Vec::new(),
            skipped_steps: 0,
            epoch_seconds: Vec::new(),
        }
    }

    pub fn epochs_completed(&self) -> usize {
        self.train_loss.len()
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.val_accuracy
            .iter()
            .flatten()
            .copied()
            .fold(None, |best, v| Some(best.map_or(v, |b: f64| b.max(v))))
    }
}

/// Datasets for one training run.
pub enum TrainData {
    Pair {
        train: Vec<SentencePair>,
        val: Vec<SentencePair>,
    },
    Contrastive {
        train: Vec<AssemblyRecord>,
        val: Vec<AssemblyRecord>,
    },
    Mlm {
        train: Vec<String>,
        val: Vec<String>,
    },
}

impl TrainData {
    fn objective(&self) -> Objective {
        match self {
            TrainData::Pair { .. } => Objective::Pair,
            TrainData::Contrastive { .. } => Objective::Contrastive,
            TrainData::Mlm { .. } => Objective::Mlm,
        }
    }

    fn train_len(&self) -> usize {
        match self {
            TrainData::Pair { train, .. } => train.len(),
            TrainData::Contrastive { train, .. } => train.len(),
            TrainData::Mlm { train, .. } => train.len(),
        }
    }
}

/// Build the training vocabulary for a dataset.
pub fn build_vocab(data: &TrainData, config: &TrainConfig) -> Result<Vocab> {
    let mut texts: Vec<&str> = Vec::new();
    let joined: Vec<String>;
    match data {
        TrainData::Pair { train, .. } => {
            for p in train {
                texts.push(&p.sentence_a);
                texts.push(&p.sentence_b);
            }
        }
        TrainData::Contrastive { train, .. } => {
            joined = train.iter().map(|r| r.parts_text()).collect();
            for (r, parts) in train.iter().zip(&joined) {
                texts.push(&r.assembly_name);
                texts.push(parts);
            }
        }
        TrainData::Mlm { train, .. } => {
            for t in train {
                texts.push(t);
            }
        }
    }
    Vocab::build(texts, config.vocab_min_freq, config.vocab_max_size)
}

/// Seeded epoch-shuffled mini-batch training. Pair runs keep the
/// best-validation parameters and may stop early; contrastive and MLM
/// runs return the final parameters.
pub fn train(data: &TrainData, config: &TrainConfig) -> Result<(ModelBundle, MetricsHistory)> {
    config.validate()?;
    if data.objective() != config.objective {
        return Err(Error::Config(format!(
            "config objective {:?} does not match provided data",
            config.objective
        )));
    }
    if data.train_len() == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if let TrainData::Pair { val, .. } = data {
        if val.is_empty() {
            return Err(Error::Data("pair objective requires a validation set".into()));
        }
    }
    let vocab = build_vocab(data, config)?;
    let mut bundle = ModelBundle::init(config, vocab)?;
    let batch_size = config.resolved_batch_size();
    let adam = AdamParams::with_lr(config.learning_rate);
    let mut adam_state = AdamState::new(&bundle.store);
    let mut history = MetricsHistory::new();

    // Pre-encode MLM texts once; corruption is redrawn per epoch.
    let mlm_sequences: Vec<TokenSequence> = match data {
        TrainData::Mlm { train, .. } => train
            .iter()
            .map(|t| encode_single(t, &bundle.vocab, config.max_len))
            .collect(),
        _ => Vec::new(),
    };

    let mut best_val: Option<f64> = None;
    let mut best_params: Option<Vec<Matrix>> = None;
    let mut epochs_without_improvement = 0usize;

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let n = data.train_len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x5AFF, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_acc = 0.0;
        let mut seen = 0usize;

        let corrupted: Vec<(TokenSequence, Vec<MlmTarget>)> = match data {
            TrainData::Mlm { .. } => corrupt_dataset(
                &mlm_sequences,
                bundle.vocab.size(),
                &MlmRates::default(),
                mix_seed(&[config.seed, 0xC0_u64, epoch as u64]),
            ),
            _ => Vec::new(),
        };

        for (step, batch_idx) in order.chunks(batch_size).enumerate() {
            if matches!(config.objective, Objective::Contrastive) && batch_idx.len() < 2 {
                continue;
            }
            let step_seed = mix_seed(&[config.seed, epoch as u64, step as u64]);
            let result = match data {
                TrainData::Pair { train, .. } => {
                    let batch: Vec<SentencePair> =
                        batch_idx.iter().map(|&i| train[i].clone()).collect();
                    pair_train_batch(&bundle, &batch, step_seed)?
                }
                TrainData::Contrastive { train, .. } => {
                    let batch: Vec<AssemblyRecord> =
                        batch_idx.iter().map(|&i| train[i].clone()).collect();
                    contrastive_train_batch(&bundle, &batch, step_seed)?
                }
                TrainData::Mlm { .. } => {
                    let batch: Vec<(TokenSequence, Vec<MlmTarget>)> =
                        batch_idx.iter().map(|&i| corrupted[i].clone()).collect();
                    mlm_train_batch(&bundle, &batch, step_seed)?
                }
            };
            if !result.loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            if !adam_step(&mut bundle.store, &result.grads, &mut adam_state, &adam) {
                history.skipped_steps += 1;
            }
            epoch_loss += result.loss * result.n_examples as f64;
            epoch_acc += result.accuracy * result.n_examples as f64;
            seen += result.n_examples;
        }

        let seen = seen.max(1);
        history.train_loss.push(epoch_loss / seen as f64);
        history.train_accuracy.push(epoch_acc / seen as f64);

        let val_acc = match data {
            TrainData::Pair { val, .. } => {
                if val.is_empty() {
                    None
                } else {
                    Some(pair_eval(&bundle, val)?.1)
                }
            }
            TrainData::Contrastive { val, .. } => {
                contrastive_eval_top1(&bundle, val, batch_size)?
            }
            TrainData::Mlm { val, .. } => {
                mlm_eval_accuracy(&bundle, val, mix_seed(&[config.seed, 0xEE_u64]))?
            }
        };
        history.val_accuracy.push(val_acc);
        history.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());

        if matches!(config.objective, Objective::Pair) {
            if let Some(acc) = val_acc {
                let improved = best_val.is_none_or(|b| acc > b);
                if improved {
                    best_val = Some(acc);
                    best_params = Some(
                        bundle.store.ids().map(|id| bundle.store.get(id).clone()).collect(),
                    );
                    epochs_without_improvement = 0;
                } else {
                    epochs_without_improvement += 1;
                    if config.early_stop_patience > 0
                        && epochs_without_improvement >= config.early_stop_patience
                    {
                        break;
                    }
                }
            }
        }
    }

    if let Some(snapshot) = best_params {
        for (id, tensor) in bundle.store.ids().collect::<Vec<_>>().into_iter().zip(snapshot) {
            *bundle.store.get_mut(id) = tensor;
        }
    }
    Ok((bundle, history))
}

/// Axes of the sweep; every combination is trained.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub max_lens: Vec<usize>,
    pub output_attention_heads: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            learning_rates: vec![1e-3],
            dropouts: vec![0.1],
            max_lens: vec![128],
            output_attention_heads: vec![0],
            seeds: vec![0],
        }
    }
}

impl SweepGrid {
    /// The full grid the pair task reports on: three learning rates and
    /// dropouts, two sequence lengths, plus the base model and the two
    /// output-attention widths.
    pub fn full() -> SweepGrid {
        SweepGrid {
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            dropouts: vec![0.0, 0.1, 0.3],
            max_lens: vec![128, 256],
            output_attention_heads: vec![0, 8, 32],
            seeds: vec![0],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.learning_rates.len()
            * self.dropouts.len()
            * self.max_lens.len()
            * self.output_attention_heads.len()
            * self.seeds.len()
    }
}

/// One sweep cell outcome; accuracies are absent for failed cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub learning_rate: f64,
    pub dropout: f64,
    pub max_len: usize,
    pub heads: usize,
    pub seed: u64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub status: String,
}

fn variant_name(heads: usize) -> String {
    if heads == 0 {
        "base".to_string()
    } else {
        format!("heads{heads}")
    }
}

/// Train one cell per grid combination; failures are isolated into the
/// row's status. With `parallel > 1` the cells run on that many threads.
pub fn run_sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    data: &TrainData,
    parallel: usize,
) -> Vec<SweepRow> {
    let mut cells: Vec<TrainConfig> = Vec::with_capacity(grid.n_cells());
    for &heads in &grid.output_attention_heads {
        for &lr in &grid.learning_rates {
            for &dropout in &grid.dropouts {
                for &max_len in &grid.max_lens {
                    for &seed in &grid.seeds {
                        let mut config = base.clone();
                        config.output_attention_heads = heads;
                        config.learning_rate = lr;
                        config.dropout_p = dropout;
                        config.max_len = max_len;
                        config.seed = seed;
                        cells.push(config);
                    }
                }
            }
        }
    }
    let run_cell = |config: &TrainConfig| -> SweepRow {
        let mut row = SweepRow {
            variant: variant_name(config.output_attention_heads),
            learning_rate: config.learning_rate,
            dropout: config.dropout_p,
            max_len: config.max_len,
            heads: config.output_attention_heads,
            seed: config.seed,
            train_acc: None,
            val_acc: None,
            status: "ok".to_string(),
        };
        match train(data, config) {
            Ok((_, history)) => {
                row.train_acc = history.train_accuracy.last().copied();
                row.val_acc = history.best_val_accuracy();
            }
            Err(e) => {
                row.status = match e {
                    Error::Diverged { .. } => "diverged".to_string(),
                    other => format!("error: {other}"),
                };
            }
        }
        row
    };
    if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .expect("thread pool");
        pool.install(|| cells.par_iter().map(run_cell).collect())
    } else {
        cells.iter().map(run_cell).collect()
    }
}

/// Sweep table as CSV with the columns
/// variant, lr, dropout, max_len, heads, train_acc, val_acc, status.
pub fn write_sweep_csv(rows: &[SweepRow], path: &std::path::Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::Runtime(format!("cannot write {}: {e}", path.display()))
    })?;
    writer
        .write_record(["variant", "lr", "dropout", "max_len", "heads", "train_acc", "val_acc", "status"])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        writer
            .write_record([
                row.variant.clone(),
                row.learning_rate.to_string(),
                row.dropout.to_string(),
                row.max_len.to_string(),
                row.heads.to_string(),
                fmt(row.train_acc),
                fmt(row.val_acc),
                row.status.clone(),
            ])
            .map_err(|e| Error::Runtime(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
