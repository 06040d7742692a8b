//! Patient histories as token sequences for the masked-language model.

use rand::Rng;

use crate::corpus::Corpus;
use crate::rng;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
/// Extended-vocabulary id of the first real code.
pub const FIRST_CODE: usize = 4;
/// Ages above this many years share the last age bucket.
pub const MAX_AGE_YEARS: usize = 119;

/// Extended-vocabulary id of code index `i`.
pub fn code_token(i: usize) -> usize {
    FIRST_CODE + i
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub age_days: u32,
    /// 0-based visit ordinal; CLS shares the first visit's ordinal.
    pub visit: u32,
}

impl Token {
    pub fn age_bucket(&self) -> usize {
        ((f64::from(self.age_days) / 365.25) as usize).min(MAX_AGE_YEARS)
    }

    pub fn segment(&self) -> usize {
        (self.visit % 2) as usize
    }

    pub fn is_code(&self) -> bool {
        self.id >= FIRST_CODE
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `[CLS, v1 codes, SEP, v2 codes, SEP, ...]`, codes sorted within a visit.
/// Sequences longer than `max_seq` keep CLS and the most recent tokens, with
/// visit ordinals renumbered from 0.
pub fn build_behrt_sequences(corpus: &Corpus, max_seq: usize) -> Vec<TokenSequence> {
    assert!(max_seq >= 2, "max_seq must leave room for CLS and one token");
    corpus
        .patients()
        .iter()
        .map(|p| {
            let mut tokens = Vec::new();
            for (k, v) in p.visits.iter().enumerate() {
                let age_days = p.age_days_at(v.date_offset_days);
                let visit = k as u32;
                if k == 0 {
                    tokens.push(Token { id: CLS, age_days, visit });
                }
                let mut codes = v.codes.clone();
                codes.sort_unstable();
                tokens.extend(codes.into_iter().map(|c| Token { id: code_token(c), age_days, visit }));
                tokens.push(Token { id: SEP, age_days, visit });
            }
            if tokens.len() > max_seq {
                let tail = tokens.split_off(tokens.len() - (max_seq - 1));
                let first = tail[0].visit;
                let mut cls = tokens[0];
                cls.age_days = tail[0].age_days;
                tokens = std::iter::once(cls).chain(tail).collect();
                for t in &mut tokens {
                    t.visit = t.visit.saturating_sub(first);
                }
            }
            TokenSequence { tokens }
        })
        .collect()
}

/// A masked sequence and, for each selected position, the real code index
/// the model must recover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<Token>,
    pub labels: Vec<(usize, usize)>,
}

/// Selects each code token with probability `mask_rate`; a selected token
/// becomes MASK (80%), a random code (10%) or stays unchanged (10%).
pub fn mask_tokens(seq: &TokenSequence, mask_rate: f64, n_codes: usize, rng: &mut impl Rng) -> MaskedSequence {
    let mut tokens = seq.tokens.clone();
    let mut labels = Vec::new();
    for (pos, tok) in tokens.iter_mut().enumerate() {
        if !tok.is_code() || rng.random::<f64>() >= mask_rate {
            continue;
        }
        labels.push((pos, tok.id - FIRST_CODE));
        let r: f64 = rng.random();
        if r < 0.8 {
            tok.id = MASK;
        } else if r < 0.9 {
            tok.id = code_token(rng.random_range(0..n_codes));
        }
    }
    MaskedSequence { tokens, labels }
}

/// [`mask_tokens`] with its own seeded generator.
pub fn mask_tokens_seeded(seq: &TokenSequence, mask_rate: f64, n_codes: usize, seed: u64) -> MaskedSequence {
    mask_tokens(seq, mask_rate, n_codes, &mut rng::derive(seed, "behrt-mask"))
}
