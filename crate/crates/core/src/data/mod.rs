//! Synthetic training data from weighted grammars.
//!
//! A [`Grammar`] is loaded from text, sampled into a token [`Corpus`], cut
//! into shuffled training [`Batch`]es, and corrupted into agreement
//! [`MinimalPair`]s for grammaticality scoring. Everything is a pure
//! function of (grammar, seed, size), so artifacts regenerate bit-identically
//! from their provenance.

mod earley;
mod grammar;

pub use grammar::Grammar;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::IntTensor;

/// Token id reserved for padding; ignored by the training loss.
pub const PAD_ID: u32 = 0;
/// Token id separating sentences; also the scoring prefix for sequences.
pub const SEP_ID: u32 = 1;

/// Token-string ↔ id map. Ids 0 and 1 are reserved; grammar terminals
/// follow in sorted order, so the same grammar always yields the same ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_grammar(grammar: &Grammar) -> Vocab {
        let mut words = vec!["<pad>".to_string(), "<sep>".to_string()];
        words.extend(grammar.terminal_words().iter().map(|w| w.to_string()));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }
}

/// A generated token stream plus the provenance needed to regenerate it.
#[derive(Debug, Clone)]
pub struct Corpus {
    ids: Vec<u32>,
    vocab: Vocab,
    grammar_hash: u64,
    seed: u64,
}

impl Corpus {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn grammar_hash(&self) -> u64 {
        self.grammar_hash
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Sample sentences until `n_tokens` tokens accumulate, separating sentences
/// with [`SEP_ID`], then truncate to exactly `n_tokens`.
pub fn generate_corpus(grammar: &Grammar, seed: u64, n_tokens: usize) -> Result<Corpus> {
    if n_tokens == 0 {
        return Err(invalid!("corpus size must be positive"));
    }
    let vocab = Vocab::from_grammar(grammar);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(n_tokens + 16);
    while ids.len() < n_tokens {
        for (term, _) in grammar.sample_derivation(&mut rng)? {
            let word = grammar_word(grammar, term);
            let id = vocab.id(word).expect("terminal words are in the vocabulary");
            ids.push(id);
        }
        ids.push(SEP_ID);
    }
    ids.truncate(n_tokens);
    Ok(Corpus {
        ids,
        vocab,
        grammar_hash: grammar.source_hash(),
        seed,
    })
}

fn grammar_word(grammar: &Grammar, term: usize) -> &str {
    grammar.symbol_name(term)
}

/// One training batch: `targets[i, t] = inputs[i, t + 1]`, with the final
/// target taken from the token after the input window.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: IntTensor,
    pub targets: IntTensor,
}

/// Cut the corpus into non-overlapping windows of `l + 1` tokens, shuffle
/// them with the seed, and group into batches of `n` (remainder dropped).
pub fn make_batches(corpus: &Corpus, n: usize, l: usize, seed: u64) -> Result<Vec<Batch>> {
    if n == 0 || l == 0 {
        return Err(invalid!("batch size and sequence length must be positive"));
    }
    let window = l + 1;
    let n_windows = corpus.len() / window;
    if n_windows < n {
        return Err(invalid!(
            "corpus of {} tokens yields {n_windows} windows of {window}, fewer than one batch of {n}",
            corpus.len()
        ));
    }
    let mut order: Vec<usize> = (0..n_windows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::with_capacity(n_windows / n);
    for group in order.chunks(n) {
        if group.len() < n {
            break;
        }
        let mut inputs = Vec::with_capacity(n * l);
        let mut targets = Vec::with_capacity(n * l);
        for &w in group {
            let slice = &corpus.ids()[w * window..(w + 1) * window];
            inputs.extend_from_slice(&slice[..l]);
            targets.extend_from_slice(&slice[1..]);
        }
        batches.push(Batch {
            inputs: IntTensor::from_vec(vec![n, l], inputs)?,
            targets: IntTensor::from_vec(vec![n, l], targets)?,
        });
    }
    Ok(batches)
}

/// A grammatical sentence and a one-token corruption of it that the grammar
/// cannot derive, with the violated agreement rule named.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimalPair {
    pub grammatical: Vec<u32>,
    pub ungrammatical: Vec<u32>,
    pub rule: String,
}

/// Derive sentences and corrupt one agreement-bearing token per sentence,
/// keeping only corruptions the recognizer confirms are underivable.
pub fn generate_minimal_pairs(
    grammar: &Grammar,
    seed: u64,
    n_pairs: usize,
) -> Result<Vec<MinimalPair>> {
    if !grammar.has_agreements() {
        return Err(invalid!("grammar declares no agreement rules"));
    }
    if n_pairs == 0 {
        return Err(invalid!("pair count must be positive"));
    }
    let vocab = Vocab::from_grammar(grammar);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    const MAX_ATTEMPTS: usize = 50;

    'pair: while pairs.len() < n_pairs {
        for _ in 0..MAX_ATTEMPTS {
            let derivation = grammar.sample_derivation(&mut rng)?;
            let sentence: Vec<usize> = derivation.iter().map(|&(t, _)| t).collect();

            // Candidate positions: tokens emitted by an agreement preterminal.
            let mut candidates: Vec<usize> = derivation
                .iter()
                .enumerate()
                .filter(|(_, &(_, lhs))| grammar.counterpart(lhs).is_some())
                .map(|(i, _)| i)
                .collect();
            candidates.shuffle(&mut rng);

            for pos in candidates {
                let (term, lhs) = derivation[pos];
                let (feature, other) = grammar.counterpart(lhs).expect("filtered above");
                let mut alternatives = grammar.terminals_of(other);
                alternatives.shuffle(&mut rng);
                for alt in alternatives {
                    if alt == term {
                        continue;
                    }
                    let mut corrupted = sentence.clone();
                    corrupted[pos] = alt;
                    if !earley_ok(grammar, &corrupted) {
                        debug_assert!(
                            earley_ok(grammar, &sentence),
                            "sampled sentence must re-parse"
                        );
                        let rule = format!(
                            "{feature}: {} -> {}",
                            grammar.symbol_name(lhs),
                            grammar.symbol_name(other)
                        );
                        pairs.push(MinimalPair {
                            grammatical: to_ids(grammar, &vocab, &sentence),
                            ungrammatical: to_ids(grammar, &vocab, &corrupted),
                            rule,
                        });
                        continue 'pair;
                    }
                }
            }
        }
        return Err(invalid!(
            "no underivable corruption found in {MAX_ATTEMPTS} derivations; \
             agreement rules do not constrain this grammar"
        ));
    }
    Ok(pairs)
}

fn earley_ok(grammar: &Grammar, sentence: &[usize]) -> bool {
    let words: Vec<&str> = sentence.iter().map(|&s| grammar.symbol_name(s)).collect();
    grammar.recognizes(&words)
}

fn to_ids(grammar: &Grammar, vocab: &Vocab, sentence: &[usize]) -> Vec<u32> {
    sentence
        .iter()
        .map(|&s| {
            vocab
                .id(grammar.symbol_name(s))
                .expect("terminal words are in the vocabulary")
        })
        .collect()
}
