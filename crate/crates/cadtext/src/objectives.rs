//! The three training objectives: binary pair classification, symmetric
//! contrastive alignment with temperature, and the masked-language-model
//! baseline.
//!
//! The contrastive loss couples a whole batch, so it is computed directly
//! on the collected embedding matrices together with its analytic
//! gradient; per-example encoder tapes are then re-entered with those
//! row gradients as seeds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, CLS, MASK, N_SPECIALS, PAD, SEP};

/// Logits are capped at this magnitude before softmax/sigmoid so small
/// temperatures cannot overflow.
pub const LOGIT_CLAMP: f64 = 50.0;

/// Which loss a model was (or is being) trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Pair,
    Contrastive,
    Mlm,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "pair" => Ok(Objective::Pair),
            "contrastive" => Ok(Objective::Contrastive),
            "mlm" => Ok(Objective::Mlm),
            other => Err(Error::Config(format!(
                "unknown objective '{other}'; valid: pair, contrastive, mlm"
            ))),
        }
    }
}

/// Dense d_model → 1 head for pair classification.
#[derive(Debug, Clone)]
pub struct PairHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PairHead {
    pub fn init(store: &mut ParamStore, d_model: usize, rng: &mut ChaCha8Rng) -> PairHead {
        let bound = 1.0 / (d_model as f64).sqrt();
        PairHead {
            weight: store.add(
                "pair_head.weight",
                Matrix::from_shape_fn((d_model, 1), |_| rng.random_range(-bound..bound)),
            ),
            bias: store.add("pair_head.bias", Matrix::zeros((1, 1))),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Related-probability for a CLS state: sigmoid of the affine map.
pub fn pair_probability(tape: &mut Tape, store: &ParamStore, cls: Var, head: &PairHead) -> Var {
    let logit = tape.linear(store, cls, head.weight);
    let logit = tape.bias(store, logit, head.bias);
    tape.sigmoid(logit)
}

/// Standalone binary cross-entropy with the probability clamped to
/// [1e-7, 1 − 1e-7].
pub fn binary_ce_loss(p: f64, label: u8) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    let y = f64::from(label);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Dense d_model → d_embed head used before normalization in contrastive
/// training.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_embed: usize,
}

impl ProjectionHead {
    pub fn init(
        store: &mut ParamStore,
        d_model: usize,
        d_embed: usize,
        rng: &mut ChaCha8Rng,
    ) -> ProjectionHead {
        let bound = 1.0 / (d_model as f64).sqrt();
        ProjectionHead {
            weight: store.add(
                "projection.weight",
                Matrix::from_shape_fn((d_model, d_embed), |_| rng.random_range(-bound..bound)),
            ),
            bias: store.add("projection.bias", Matrix::zeros((1, d_embed))),
            d_embed,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Unit-norm embedding of a CLS state, optionally through a projection
/// head. The output row always has L2 norm 1 ± 1e-6.
pub fn embed_unit(
    tape: &mut Tape,
    store: &ParamStore,
    cls: Var,
    projection: Option<&ProjectionHead>,
) -> Var {
    let pre = match projection {
        Some(head) => {
            let projected = tape.linear(store, cls, head.weight);
            tape.bias(store, projected, head.bias)
        }
        None => cls,
    };
    tape.normalize_rows(pre, 1e-12)
}

/// Contrastive temperature; stored as ln τ when learnable so τ stays
/// positive under gradient updates.
#[derive(Debug, Clone)]
pub enum Temperature {
    Fixed(f64),
    Learnable(ParamId),
}

impl Temperature {
    pub fn fixed(tau: f64) -> Result<Temperature> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature::Fixed(tau))
    }

    pub fn learnable(store: &mut ParamStore, tau0: f64) -> Result<Temperature> {
        if tau0 <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau0}")));
        }
        let id = store.add("temperature.log_tau", Matrix::from_elem((1, 1), tau0.ln()));
        Ok(Temperature::Learnable(id))
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        match self {
            Temperature::Fixed(tau) => *tau,
            Temperature::Learnable(id) => store.get(*id)[[0, 0]].exp(),
        }
    }

    pub fn param_id(&self) -> Option<ParamId> {
        match self {
            Temperature::Fixed(_) => None,
            Temperature::Learnable(id) => Some(*id),
        }
    }
}

/// Loss plus everything needed to continue backpropagation through the
/// per-example encoder tapes.
#[derive(Debug)]
pub struct ContrastiveBatch {
    pub loss: f64,
    /// d loss / d assembly-embedding rows.
    pub grad_assembly: Matrix,
    /// d loss / d parts-embedding rows.
    pub grad_parts: Matrix,
    /// d loss / d ln τ.
    pub grad_log_tau: f64,
    /// Fraction of rows and columns whose best logit is the diagonal.
    pub diagonal_top1: f64,
}

/// Symmetric cross-entropy over in-batch logits A·Pᵀ/τ with matched pairs
/// on the diagonal, averaged over the row and column directions.
pub fn contrastive_loss_with_grads(
    assembly: &Matrix,
    parts: &Matrix,
    tau: f64,
) -> Result<ContrastiveBatch> {
    let b = assembly.nrows();
    if b < 2 {
        return Err(Error::Data(format!("contrastive batch needs at least 2 rows, got {b}")));
    }
    if parts.nrows() != b || parts.ncols() != assembly.ncols() {
        return Err(Error::Data("contrastive embedding shape mismatch".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let raw = assembly.dot(&parts.t()) / tau;
    let clamped = raw.mapv(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));

    let mut row_softmax = Matrix::zeros((b, b));
    let mut col_softmax = Matrix::zeros((b, b));
    let mut loss = 0.0;
    for i in 0..b {
        let row = clamped.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..b {
            row_softmax[[i, j]] = (clamped[[i, j]] - max).exp() / denom;
        }
        loss += -(clamped[[i, i]] - max) + denom.ln();
    }
    for j in 0..b {
        let col = clamped.column(j);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = col.iter().map(|v| (v - max).exp()).sum();
        for i in 0..b {
            col_softmax[[i, j]] = (clamped[[i, j]] - max).exp() / denom;
        }
        loss += -(clamped[[j, j]] - max) + denom.ln();
    }
    let scale = 1.0 / (2.0 * b as f64);
    loss *= scale;

    // d loss / d logits, with clamped entries cut out of the chain.
    let mut grad_logits = Matrix::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let identity = f64::from(u8::from(i == j));
            let g = scale * (row_softmax[[i, j]] - identity + col_softmax[[i, j]] - identity);
            let pass = raw[[i, j]].abs() < LOGIT_CLAMP;
            grad_logits[[i, j]] = if pass { g } else { 0.0 };
        }
    }
    let grad_assembly = grad_logits.dot(parts) / tau;
    let grad_parts = grad_logits.t().dot(assembly) / tau;
    // logits = S · e^{-ln τ}, so d logits / d ln τ = −logits.
    let grad_log_tau = -(&grad_logits * &clamped).sum();

    let mut row_hits = 0usize;
    let mut col_hits = 0usize;
    for i in 0..b {
        let mut best = 0;
        for j in 1..b {
            if clamped[[i, j]] > clamped[[i, best]] {
                best = j;
            }
        }
        if best == i {
            row_hits += 1;
        }
        let mut best = 0;
        for r in 1..b {
            if clamped[[r, i]] > clamped[[best, i]] {
                best = r;
            }
        }
        if best == i {
            col_hits += 1;
        }
    }
    let diagonal_top1 = (row_hits + col_hits) as f64 / (2.0 * b as f64);

    Ok(ContrastiveBatch {
        loss,
        grad_assembly,
        grad_parts,
        grad_log_tau,
        diagonal_top1,
    })
}

/// Loss value only.
pub fn contrastive_loss(assembly: &Matrix, parts: &Matrix, tau: f64) -> Result<f64> {
    contrastive_loss_with_grads(assembly, parts, tau).map(|out| out.loss)
}

/// Corruption probabilities for MLM. Of the selected positions,
/// `mask_share` become MASK, `random_share` a random word token, the rest
/// stay unchanged.
#[derive(Debug, Clone, Copy)]
pub struct MlmRates {
    pub mask_rate: f64,
    pub mask_share: f64,
    pub random_share: f64,
}

impl Default for MlmRates {
    fn default() -> Self {
        MlmRates {
            mask_rate: 0.15,
            mask_share: 0.8,
            random_share: 0.1,
        }
    }
}

/// A supervised position produced by [`mlm_corrupt`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmTarget {
    pub position: usize,
    pub original_id: u32,
}

/// Dense + ReLU + layer-norm applied to target states before the tied
/// vocabulary projection. Without it the tied embedding table has to
/// serve simultaneously as input lookup and softmax decoder, which
/// measurably wrecks the encoder's similarity geometry on this corpus;
/// the transform absorbs the decoder-specific geometry instead.
#[derive(Debug, Clone)]
pub struct MlmTransform {
    pub weight: ParamId,
    pub bias: ParamId,
    pub ln_gain: ParamId,
    pub ln_shift: ParamId,
}

impl MlmTransform {
    pub fn init(store: &mut ParamStore, d_model: usize, rng: &mut ChaCha8Rng) -> MlmTransform {
        let bound = 1.0 / (d_model as f64).sqrt();
        MlmTransform {
            weight: store.add(
                "mlm_transform.weight",
                Matrix::from_shape_fn((d_model, d_model), |_| rng.random_range(-bound..bound)),
            ),
            bias: store.add("mlm_transform.bias", Matrix::zeros((1, d_model))),
            ln_gain: store.add("mlm_transform.ln.gain", Matrix::ones((1, d_model))),
            ln_shift: store.add("mlm_transform.ln.shift", Matrix::zeros((1, d_model))),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias, self.ln_gain, self.ln_shift]
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, states: Var) -> Var {
        let h = tape.linear(store, states, self.weight);
        let h = tape.bias(store, h, self.bias);
        let h = tape.relu(h);
        let h = tape.layer_norm(h);
        let h = tape.scale_rows(store, h, self.ln_gain);
        tape.bias(store, h, self.ln_shift)
    }
}

/// Independently select non-special positions at `mask_rate` and corrupt
/// them BERT-style. If nothing is selected the draw is retried once, after
/// which an empty target set is allowed.
pub fn mlm_corrupt(
    tokens: &TokenSequence,
    vocab_size: usize,
    rates: &MlmRates,
    rng: &mut ChaCha8Rng,
) -> (TokenSequence, Vec<MlmTarget>) {
    let candidates: Vec<usize> = (0..tokens.true_length)
        .filter(|&pos| {
            let id = tokens.ids[pos];
            id != CLS && id != SEP && id != PAD && id != MASK
        })
        .collect();
    let mut corrupted = tokens.clone();
    let mut targets = Vec::new();
    for attempt in 0..2 {
        for &pos in &candidates {
            if !rng.random_bool(rates.mask_rate) {
                continue;
            }
            let original_id = tokens.ids[pos];
            let roll: f64 = rng.random();
            if roll < rates.mask_share {
                corrupted.ids[pos] = MASK;
            } else if roll < rates.mask_share + rates.random_share && vocab_size > N_SPECIALS {
                corrupted.ids[pos] = rng.random_range(N_SPECIALS as u32..vocab_size as u32);
            }
            targets.push(MlmTarget { position: pos, original_id });
        }
        if !targets.is_empty() || candidates.is_empty() || rates.mask_rate == 0.0 {
            break;
        }
        let _ = attempt;
    }
    (corrupted, targets)
}

/// Mean cross-entropy at the target positions of softmax(h · Eᵀ), where
/// h is the target state (optionally passed through an [`MlmTransform`])
/// and E the token embedding (weight tying). Returns the loss and logits
/// nodes, or `None` when there are no targets.
pub fn mlm_loss(
    tape: &mut Tape,
    store: &ParamStore,
    states: Var,
    targets: &[MlmTarget],
    token_embedding: ParamId,
    transform: Option<&MlmTransform>,
) -> Option<(Var, Var)> {
    if targets.is_empty() {
        return None;
    }
    let positions: Vec<usize> = targets.iter().map(|t| t.position).collect();
    let ids: Vec<usize> = targets.iter().map(|t| t.original_id as usize).collect();
    let mut picked = tape.gather_rows(states, &positions);
    if let Some(t) = transform {
        picked = t.apply(tape, store, picked);
    }
    let logits = tape.linear_nt(store, picked, token_embedding);
    Some((tape.softmax_ce_rows(logits, &ids), logits))
}
