//! Word-level vocabulary and fixed-length sequence encoding.
//!
//! The cleaned corpus is short noun phrases, so tokens are whitespace
//! words. Special ids are fixed: PAD=0, UNK=1, CLS=2, SEP=3, MASK=4.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const N_SPECIALS: usize = 5;
const SPECIAL_NAMES: [&str; N_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Word-level tokenization: split on whitespace, then peel leading and
/// trailing punctuation runs off into their own tokens. Interior
/// punctuation stays put, so "11.78" and "t-bracket" survive while the
/// template's "'name'," yields ' name ' , as four tokens. Without this,
/// quoted assembly names and comma-joined part lists never share a token
/// with their bare forms.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        loop {
            let lead = rest
                .char_indices()
                .take_while(|(_, c)| !c.is_alphanumeric())
                .last()
                .map(|(i, c)| i + c.len_utf8())
                .unwrap_or(0);
            if lead == 0 {
                break;
            }
            tokens.push(&rest[..lead]);
            rest = &rest[lead..];
        }
        if rest.is_empty() {
            continue;
        }
        let trail_start = rest
            .char_indices()
            .rev()
            .take_while(|(_, c)| !c.is_alphanumeric())
            .last()
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if trail_start < rest.len() {
            tokens.push(&rest[..trail_start]);
            tokens.push(&rest[trail_start..]);
        } else {
            tokens.push(rest);
        }
    }
    tokens
}

/// Immutable token↔id map with the five reserved specials at ids 0..=4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from corpus texts: whitespace tokens with frequency at least
    /// `min_freq`, ordered most-frequent-first with lexicographic
    /// tie-break, capped at `max_size` total entries (specials included).
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(
        texts: I,
        min_freq: usize,
        max_size: usize,
    ) -> Result<Vocab> {
        if max_size < N_SPECIALS {
            return Err(Error::Config(format!(
                "max vocab size {max_size} is below the {N_SPECIALS} special tokens"
            )));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        entries.truncate(max_size - N_SPECIALS);

        let mut id_to_token: Vec<String> =
            SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(entries.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(N_SPECIALS)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Non-special tokens in id order, for serialization.
    pub fn word_tokens(&self) -> &[String] {
        &self.id_to_token[N_SPECIALS..]
    }

    /// Rebuild from the word list produced by [`Vocab::word_tokens`].
    pub fn from_word_tokens(words: Vec<String>) -> Vocab {
        let mut id_to_token: Vec<String> =
            SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(N_SPECIALS)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// One token per line; the header records the special-token order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "#specials {}", SPECIAL_NAMES.join(" ")).map_err(|e| Error::io(path, e))?;
        for token in self.word_tokens() {
            writeln!(w, "{token}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty vocab file", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let expected = format!("#specials {}", SPECIAL_NAMES.join(" "));
        if header != expected {
            return Err(Error::Data(format!(
                "{}: unexpected vocab header '{header}'",
                path.display()
            )));
        }
        let mut words = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.is_empty() {
                words.push(line);
            }
        }
        Ok(Vocab::from_word_tokens(words))
    }
}

/// Fixed-length encoding: ids, segment ids and attention mask all have
/// length `max_len`; positions at or past `true_length` are PAD with
/// mask 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Encode a sentence pair as `[CLS] a [SEP] b [SEP] [PAD]...`. Segment 0
/// runs through the first SEP inclusive, segment 1 covers b and the
/// second SEP. When the pair is too long, the longer side is trimmed
/// token by token from its end (ties trim the first).
pub fn encode_pair(a: &str, b: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 8, "encode_pair requires max_len >= 8");
    let mut a_ids: Vec<u32> = tokenize(a).into_iter().map(|t| vocab.id_of(t)).collect();
    let mut b_ids: Vec<u32> = tokenize(b).into_iter().map(|t| vocab.id_of(t)).collect();
    while a_ids.len() + b_ids.len() + 3 > max_len {
        if a_ids.len() >= b_ids.len() {
            a_ids.pop();
        } else {
            b_ids.pop();
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS);
    segments.push(0u8);
    for id in &a_ids {
        ids.push(*id);
        segments.push(0);
    }
    ids.push(SEP);
    segments.push(0);
    for id in &b_ids {
        ids.push(*id);
        segments.push(1);
    }
    ids.push(SEP);
    segments.push(1);
    finish(ids, segments, max_len)
}

/// Encode one sentence as `[CLS] tokens [SEP] [PAD]...`, all segment 0,
/// tail truncation.
pub fn encode_single(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "encode_single requires max_len >= 2");
    let mut ids = vec![CLS];
    ids.extend(
        tokenize(text)
            .into_iter()
            .take(max_len - 2)
            .map(|t| vocab.id_of(t)),
    );
    ids.push(SEP);
    let segments = vec![0u8; ids.len()];
    finish(ids, segments, max_len)
}

fn finish(mut ids: Vec<u32>, mut segments: Vec<u8>, max_len: usize) -> TokenSequence {
    let true_length = ids.len();
    debug_assert!(true_length <= max_len);
    let mut mask = vec![1u8; true_length];
    ids.resize(max_len, PAD);
    segments.resize(max_len, 0);
    mask.resize(max_len, 0);
    TokenSequence {
        ids,
        segment_ids: segments,
        attention_mask: mask,
        true_length,
    }
}

/// In-vocab word tokens of an encoding, specials removed; pairs come back
/// as the (a, b) halves.
pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> (Vec<String>, Vec<String>) {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for pos in 0..seq.true_length {
        let id = seq.ids[pos];
        if id == CLS || id == SEP || id == PAD {
            continue;
        }
        if seq.segment_ids[pos] == 0 {
            first.push(vocab.token_of(id).to_string());
        } else {
            second.push(vocab.token_of(id).to_string());
        }
    }
    (first, second)
}
