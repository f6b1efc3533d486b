//! From-scratch transformer text encoder.
//!
//! Post-norm residual blocks over word embeddings with sinusoidal
//! positions and learned segment embeddings. Two architectural knobs
//! beyond the usual ones: an optional extra multi-head attention layer
//! that re-reads the final states from the CLS position, and freezing of
//! the bottom `frozen_layers` blocks (embeddings included).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, N_SPECIALS};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    /// 0 disables the extra attention layer on top of the final states.
    pub output_attention_heads: usize,
    /// Number of blocks, counted from the bottom, excluded from training;
    /// any nonzero value also freezes the embedding tables.
    pub frozen_layers: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: trains in minutes on CPU while keeping the
    /// sweep axes (heads, dropout, sequence length) meaningful.
    pub fn desk_default(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 8,
            d_ff: 256,
            max_len: 128,
            dropout_p: 0.1,
            output_attention_heads: 0,
            frozen_layers: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < N_SPECIALS {
            return Err(Error::Config(format!(
                "vocab_size {} below the {N_SPECIALS} special tokens",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_len < 2 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.output_attention_heads > 0 && self.d_model % self.output_attention_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by output_attention_heads {}",
                self.d_model, self.output_attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        if self.frozen_layers > self.n_layers {
            return Err(Error::Config(format!(
                "frozen_layers {} exceeds n_layers {}",
                self.frozen_layers, self.n_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct AttentionParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct LayerParams {
    attention: AttentionParams,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln1_gain: ParamId,
    ln1_shift: ParamId,
    ln2_gain: ParamId,
    ln2_shift: ParamId,
}

impl LayerParams {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.attention.wq,
            self.attention.bq,
            self.attention.wk,
            self.attention.bk,
            self.attention.wv,
            self.attention.bv,
            self.attention.wo,
            self.attention.bo,
            self.ff_w1,
            self.ff_b1,
            self.ff_w2,
            self.ff_b2,
            self.ln1_gain,
            self.ln1_shift,
            self.ln2_gain,
            self.ln2_shift,
        ]
    }
}

/// Encoder parameter handles plus the constant position table.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    token_embedding: ParamId,
    segment_embedding: ParamId,
    layers: Vec<LayerParams>,
    output_attention: Option<AttentionParams>,
    position_table: Matrix,
}

/// Forward outputs: handles into the tape for the pooled CLS state and
/// the per-position states (rows 0..len).
pub struct EncoderVars {
    pub cls: Var,
    pub states: Var,
    pub len: usize,
}

fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl EncoderModel {
    /// Register all encoder tensors in `store` with seeded scaled-uniform
    /// init (bound 1/sqrt(fan_in)), zero biases, identity layer norms.
    pub fn init(config: EncoderConfig, store: &mut ParamStore) -> Result<EncoderModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        // Embeddings are table lookups (fan_in 1), so their bound is 1.
        // This also keeps token content on the same scale as the O(1)
        // sinusoidal position entries; a 1/sqrt(d) init leaves every CLS
        // state dominated by the shared position anchor and the encoder
        // starts from a collapsed representation.
        let token_embedding = store.add(
            "token_embedding",
            Matrix::from_shape_fn((config.vocab_size, d), |_| rng.random_range(-1.0..1.0)),
        );
        let segment_embedding = store.add(
            "segment_embedding",
            Matrix::from_shape_fn((2, d), |_| rng.random_range(-1.0..1.0)),
        );
        let attention = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| AttentionParams {
            wq: store.add(format!("{prefix}.wq"), init_weight(rng, d, d)),
            bq: store.add(format!("{prefix}.bq"), Matrix::zeros((1, d))),
            wk: store.add(format!("{prefix}.wk"), init_weight(rng, d, d)),
            bk: store.add(format!("{prefix}.bk"), Matrix::zeros((1, d))),
            wv: store.add(format!("{prefix}.wv"), init_weight(rng, d, d)),
            bv: store.add(format!("{prefix}.bv"), Matrix::zeros((1, d))),
            wo: store.add(format!("{prefix}.wo"), init_weight(rng, d, d)),
            bo: store.add(format!("{prefix}.bo"), Matrix::zeros((1, d))),
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let prefix = format!("layer{i}");
            let attn = attention(store, &mut rng, &format!("{prefix}.attn"));
            layers.push(LayerParams {
                attention: attn,
                ff_w1: store.add(format!("{prefix}.ff.w1"), init_weight(&mut rng, d, config.d_ff)),
                ff_b1: store.add(format!("{prefix}.ff.b1"), Matrix::zeros((1, config.d_ff))),
                ff_w2: store.add(format!("{prefix}.ff.w2"), init_weight(&mut rng, config.d_ff, d)),
                ff_b2: store.add(format!("{prefix}.ff.b2"), Matrix::zeros((1, d))),
                ln1_gain: store.add(format!("{prefix}.ln1.gain"), Matrix::ones((1, d))),
                ln1_shift: store.add(format!("{prefix}.ln1.shift"), Matrix::zeros((1, d))),
                ln2_gain: store.add(format!("{prefix}.ln2.gain"), Matrix::ones((1, d))),
                ln2_shift: store.add(format!("{prefix}.ln2.shift"), Matrix::zeros((1, d))),
            });
        }
        let output_attention = if config.output_attention_heads > 0 {
            Some(attention(store, &mut rng, "output_attn"))
        } else {
            None
        };
        let model = EncoderModel {
            position_table: position_table(config.max_len, d),
            config,
            token_embedding,
            segment_embedding,
            layers,
            output_attention,
        };
        model.apply_freezing(store);
        Ok(model)
    }

    /// Mark the bottom `frozen_layers` blocks (and, when nonzero, the
    /// embedding tables) as untrainable.
    fn apply_freezing(&self, store: &mut ParamStore) {
        if self.config.frozen_layers == 0 {
            return;
        }
        store.set_trainable(self.token_embedding, false);
        store.set_trainable(self.segment_embedding, false);
        for layer in self.layers.iter().take(self.config.frozen_layers) {
            for id in layer.param_ids() {
                store.set_trainable(id, false);
            }
        }
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.token_embedding
    }

    /// All encoder parameter handles, embeddings first, in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.segment_embedding];
        for layer in &self.layers {
            ids.extend(layer.param_ids());
        }
        if let Some(attn) = &self.output_attention {
            ids.extend([attn.wq, attn.bq, attn.wk, attn.bk, attn.wv, attn.bv, attn.wo, attn.bo]);
        }
        ids
    }

    /// Handles for the bottom `frozen_layers` blocks plus embeddings.
    pub fn frozen_param_ids(&self) -> Vec<ParamId> {
        if self.config.frozen_layers == 0 {
            return Vec::new();
        }
        let mut ids = vec![self.token_embedding, self.segment_embedding];
        for layer in self.layers.iter().take(self.config.frozen_layers) {
            ids.extend(layer.param_ids());
        }
        ids
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }

    /// Run the encoder over the first `true_length` positions of a
    /// sequence. Padding never enters the computation, so the outputs are
    /// independent of whatever sits in the PAD region.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &TokenSequence,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> EncoderVars {
        let len = tokens.true_length;
        assert!(len >= 1, "empty token sequence");
        let ids: Vec<usize> = tokens.ids[..len]
            .iter()
            .map(|&id| {
                let id = id as usize;
                assert!(id < self.config.vocab_size, "token id {id} out of range");
                id
            })
            .collect();
        let segments: Vec<usize> = tokens.segment_ids[..len].iter().map(|&s| s as usize).collect();

        let tok = tape.gather(store, self.token_embedding, &ids);
        let seg = tape.gather(store, self.segment_embedding, &segments);
        let pos = tape.input(self.position_table.slice(ndarray::s![..len, ..]).to_owned());
        let sum = tape.add(tok, seg);
        let mut hidden = tape.add(sum, pos);

        let dropout_active = matches!(mode, Mode::Train) && self.config.dropout_p > 0.0;
        let valid = vec![true; len];
        for layer in &self.layers {
            let attn = self.mha(tape, store, hidden, hidden, &layer.attention, self.config.n_heads, &valid);
            let attn = if dropout_active {
                let mask = dropout_mask(rng, len, self.config.d_model, self.config.dropout_p);
                tape.dropout(attn, mask)
            } else {
                attn
            };
            let post_attn = tape.add(hidden, attn);
            let normed = tape.layer_norm(post_attn);
            let normed = tape.scale_rows(store, normed, layer.ln1_gain);
            let normed = tape.bias(store, normed, layer.ln1_shift);

            let ff = tape.linear(store, normed, layer.ff_w1);
            let ff = tape.bias(store, ff, layer.ff_b1);
            let ff = tape.relu(ff);
            let ff = tape.linear(store, ff, layer.ff_w2);
            let ff = tape.bias(store, ff, layer.ff_b2);
            let ff = if dropout_active {
                let mask = dropout_mask(rng, len, self.config.d_model, self.config.dropout_p);
                tape.dropout(ff, mask)
            } else {
                ff
            };
            let post_ff = tape.add(normed, ff);
            let normed2 = tape.layer_norm(post_ff);
            let normed2 = tape.scale_rows(store, normed2, layer.ln2_gain);
            hidden = tape.bias(store, normed2, layer.ln2_shift);
        }

        let cls = match &self.output_attention {
            Some(attn) => {
                let query = tape.gather_rows(hidden, &[0]);
                self.mha(tape, store, query, hidden, attn, self.config.output_attention_heads, &valid)
            }
            None => tape.gather_rows(hidden, &[0]),
        };
        EncoderVars {
            cls,
            states: hidden,
            len,
        }
    }

    fn mha(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        context: Var,
        params: &AttentionParams,
        n_heads: usize,
        key_valid: &[bool],
    ) -> Var {
        let d_head = self.config.d_model / n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let q = tape.linear(store, query, params.wq);
        let q = tape.bias(store, q, params.bq);
        let k = tape.linear(store, context, params.wk);
        let k = tape.bias(store, k, params.bk);
        let v = tape.linear(store, context, params.wv);
        let v = tape.bias(store, v, params.bv);
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * d_head, d_head);
            let kh = tape.slice_cols(k, h * d_head, d_head);
            let vh = tape.slice_cols(v, h * d_head, d_head);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax_rows(scores, key_valid);
            heads.push(tape.matmul(probs, vh));
        }
        let cat = tape.concat_cols(&heads);
        let out = tape.linear(store, cat, params.wo);
        tape.bias(store, out, params.bo)
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    Matrix::from_shape_fn((rows, cols), |_| if rng.random_bool(p) { 0.0 } else { keep })
}

/// Standard sinusoidal position encodings.
fn position_table(max_len: usize, d_model: usize) -> Matrix {
    Matrix::from_shape_fn((max_len, d_model), |(pos, i)| {
        let exponent = (2 * (i / 2)) as f64 / d_model as f64;
        let angle = pos as f64 / 10_000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Scaled-dot-product attention as a plain function:
/// softmax(q·kᵀ/sqrt(d_k)) · v with invalid key columns excluded (their
/// probability is exactly zero).
pub fn attention(query: &Matrix, keys: &Matrix, values: &Matrix, key_valid: &[bool]) -> Matrix {
    assert_eq!(keys.nrows(), values.nrows());
    assert_eq!(keys.nrows(), key_valid.len());
    assert_eq!(query.ncols(), keys.ncols());
    assert!(key_valid.iter().any(|&v| v));
    let scale = 1.0 / (keys.ncols() as f64).sqrt();
    let scores = query.dot(&keys.t()) * scale;
    let mut out = Matrix::zeros((query.nrows(), values.ncols()));
    for r in 0..scores.nrows() {
        let row = scores.row(r);
        let max = row
            .iter()
            .zip(key_valid)
            .filter(|(_, &v)| v)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; row.len()];
        let mut denom = 0.0;
        for (c, s) in row.iter().enumerate() {
            if key_valid[c] {
                probs[c] = (s - max).exp();
                denom += probs[c];
            }
        }
        for (c, p) in probs.iter().enumerate() {
            let weight = p / denom;
            for j in 0..values.ncols() {
                out[[r, j]] += weight * values[[c, j]];
            }
        }
    }
    out
}

/// Gradients flow only to unfrozen tensors; see [`ParamStore`] flags.
pub fn backward(tape: &Tape, loss: Var, store: &ParamStore, grads: &mut Gradients) {
    tape.backward(&[(loss, Matrix::from_elem((1, 1), 1.0))], store, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode_single, Vocab};
    use approx::assert_relative_eq;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 30,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 12,
            dropout_p: 0.0,
            output_attention_heads: 0,
            frozen_layers: 0,
            seed: 7,
        }
    }

    fn tiny_vocab() -> Vocab {
        let words: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        Vocab::from_word_tokens(words)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut s1 = ParamStore::new();
        let m1 = EncoderModel::init(tiny_config(), &mut s1).unwrap();
        let mut s2 = ParamStore::new();
        let m2 = EncoderModel::init(tiny_config(), &mut s2).unwrap();
        for (a, b) in m1.param_ids().iter().zip(m2.param_ids()) {
            assert_eq!(s1.get(*a), s2.get(b));
        }
    }

    #[test]
    fn layer_norm_gains_start_at_one() {
        let mut store = ParamStore::new();
        let model = EncoderModel::init(tiny_config(), &mut store).unwrap();
        let gain = model.layers[0].ln1_gain;
        assert!(store.get(gain).iter().all(|&v| v == 1.0));
        assert_eq!(store.name(gain), "layer0.ln1.gain");
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        let config = EncoderConfig {
            vocab_size: 100,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            max_len: 16,
            dropout_p: 0.0,
            output_attention_heads: 0,
            frozen_layers: 0,
            seed: 1,
        };
        let mut store = ParamStore::new();
        let model = EncoderModel::init(config, &mut store).unwrap();
        // Independent count: embeddings + per-layer attention, feed
        // forward, and two layer norms.
        let (v, d, f) = (100usize, 32usize, 64usize);
        let embeddings = v * d + 2 * d;
        let attention = 4 * (d * d + d);
        let feed_forward = d * f + f + f * d + d;
        let norms = 4 * d;
        let expected = embeddings + 2 * (attention + feed_forward + norms);
        assert_eq!(model.parameter_count(&store), expected);
    }

    #[test]
    fn output_attention_layer_adds_params_and_changes_cls() {
        let mut config = tiny_config();
        let mut store = ParamStore::new();
        let base = EncoderModel::init(config.clone(), &mut store).unwrap();
        config.output_attention_heads = 4;
        let mut store2 = ParamStore::new();
        let with_attn = EncoderModel::init(config, &mut store2).unwrap();
        assert!(with_attn.parameter_count(&store2) > base.parameter_count(&store));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut store = ParamStore::new();
        let model = EncoderModel::init(tiny_config(), &mut store).unwrap();
        let vocab = tiny_vocab();
        let seq = encode_single("w1 w2 w3", &vocab, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape1 = Tape::new();
        let out1 = model.forward(&mut tape1, &store, &seq, Mode::Eval, &mut rng);
        let mut tape2 = Tape::new();
        let out2 = model.forward(&mut tape2, &store, &seq, Mode::Eval, &mut rng);
        assert_eq!(tape1.value(out1.cls), tape2.value(out2.cls));
    }

    #[test]
    fn train_without_dropout_equals_eval() {
        let mut store = ParamStore::new();
        let model = EncoderModel::init(tiny_config(), &mut store).unwrap();
        let vocab = tiny_vocab();
        let seq = encode_single("w1 w2 w3 w4", &vocab, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape1 = Tape::new();
        let train = model.forward(&mut tape1, &store, &seq, Mode::Train, &mut rng);
        let mut tape2 = Tape::new();
        let eval = model.forward(&mut tape2, &store, &seq, Mode::Eval, &mut rng);
        assert_eq!(tape1.value(train.cls), tape2.value(eval.cls));
    }

    #[test]
    fn dropout_changes_train_forward_only() {
        let mut config = tiny_config();
        config.dropout_p = 0.3;
        let mut store = ParamStore::new();
        let model = EncoderModel::init(config, &mut store).unwrap();
        let vocab = tiny_vocab();
        let seq = encode_single("w1 w2 w3 w4", &vocab, 12);
        let mut rng1 = ChaCha8Rng::seed_from_u64(1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let mut tape1 = Tape::new();
        let t1 = model.forward(&mut tape1, &store, &seq, Mode::Train, &mut rng1);
        let mut tape2 = Tape::new();
        let t2 = model.forward(&mut tape2, &store, &seq, Mode::Train, &mut rng2);
        assert_ne!(tape1.value(t1.cls), tape2.value(t2.cls));
        let mut tape3 = Tape::new();
        let e1 = model.forward(&mut tape3, &store, &seq, Mode::Eval, &mut rng1);
        let mut tape4 = Tape::new();
        let e2 = model.forward(&mut tape4, &store, &seq, Mode::Eval, &mut rng2);
        assert_eq!(tape3.value(e1.cls), tape4.value(e2.cls));
    }

    #[test]
    fn pad_content_does_not_affect_cls() {
        let mut store = ParamStore::new();
        let model = EncoderModel::init(tiny_config(), &mut store).unwrap();
        let vocab = tiny_vocab();
        let clean = encode_single("w1 w2", &vocab, 12);
        let mut noisy = clean.clone();
        for pos in noisy.true_length..noisy.ids.len() {
            noisy.ids[pos] = 9; // arbitrary in-vocab junk in the PAD region
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape1 = Tape::new();
        let a = model.forward(&mut tape1, &store, &clean, Mode::Eval, &mut rng);
        let mut tape2 = Tape::new();
        let b = model.forward(&mut tape2, &store, &noisy, Mode::Eval, &mut rng);
        let diff = (tape1.value(a.cls) - tape2.value(b.cls))
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn attention_uniform_when_scores_equal() {
        let q = Matrix::zeros((2, 4));
        let k = Matrix::zeros((4, 4));
        let v = Matrix::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let out = attention(&q, &k, &v, &[true; 4]);
        // Uniform rows average the value rows.
        let mean = v.sum_axis(ndarray::Axis(0)) / 4.0;
        for r in 0..2 {
            for c in 0..4 {
                assert_relative_eq!(out[[r, c]], mean[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_valid_key_returns_its_value_row() {
        let q = Matrix::from_elem((1, 4), 0.3);
        let k = Matrix::from_shape_fn((3, 4), |(r, c)| (r + c) as f64);
        let v = Matrix::from_shape_fn((3, 4), |(r, c)| (10 * r + c) as f64);
        let out = attention(&q, &k, &v, &[false, true, false]);
        for c in 0..4 {
            assert_relative_eq!(out[[0, c]], v[[1, c]], epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_matches_scalar_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Matrix::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
        };
        let q = rand(&mut rng, 3, 3);
        let k = rand(&mut rng, 3, 3);
        let v = rand(&mut rng, 3, 3);
        let out = attention(&q, &k, &v, &[true; 3]);
        // Naive triple-loop reference.
        let scale = 1.0 / (3.0f64).sqrt();
        for r in 0..3 {
            let mut scores = [0.0f64; 3];
            for (c, score) in scores.iter_mut().enumerate() {
                for j in 0..3 {
                    *score += q[[r, j]] * k[[c, j]];
                }
                *score *= scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exp.iter().sum();
            for j in 0..3 {
                let mut expect = 0.0;
                for c in 0..3 {
                    expect += exp[c] / denom * v[[c, j]];
                }
                assert!((out[[r, j]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frozen_layers_get_zero_gradients() {
        let mut config = tiny_config();
        config.frozen_layers = 2; // everything except heads
        let mut store = ParamStore::new();
        let model = EncoderModel::init(config, &mut store).unwrap();
        let head = store.add("probe_head", Matrix::from_elem((8, 1), 0.1));
        let vocab = tiny_vocab();
        let seq = encode_single("w1 w2 w3", &vocab, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &seq, Mode::Train, &mut rng);
        let logit = tape.linear(&store, out.cls, head);
        let p = tape.sigmoid(logit);
        let loss = tape.bce_loss(p, 1.0);
        let mut grads = Gradients::zeros_like(&store);
        backward(&tape, loss, &store, &mut grads);
        for id in model.param_ids() {
            assert!(
                grads.get(id).iter().all(|&g| g == 0.0),
                "frozen tensor {} received gradient",
                store.name(id)
            );
        }
        assert!(grads.get(head).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn forward_is_stable_on_random_inputs() {
        let mut store = ParamStore::new();
        let model = EncoderModel::init(tiny_config(), &mut store).unwrap();
        let vocab = tiny_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let n_words = rng.random_range(0..8);
            let text: Vec<String> = (0..n_words)
                .map(|_| format!("w{}", rng.random_range(0..30)))
                .collect();
            let seq = encode_single(&text.join(" "), &vocab, 12);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &seq, Mode::Eval, &mut rng);
            assert!(tape.value(out.cls).iter().all(|v| v.is_finite()));
            assert!(tape.value(out.states).iter().all(|v| v.is_finite()));
        }
    }
}
