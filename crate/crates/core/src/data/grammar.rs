//! Weighted context-free grammars loaded from a small text format.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::util::fnv1a;

/// Interned symbol index into [`Grammar::symbols`].
pub(crate) type SymId = usize;

#[derive(Debug, Clone)]
pub(crate) struct Production {
    pub lhs: SymId,
    pub rhs: Vec<SymId>,
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct AgreementRule {
    pub feature: String,
    pub a: SymId,
    pub b: SymId,
}

/// A validated weighted grammar.
///
/// Symbols appearing on a left-hand side are nonterminals; all others are
/// terminals. The start symbol is the first production's left-hand side.
/// Production weights are normalized to probabilities per nonterminal at
/// load time. Empty right-hand sides are rejected, so every derivation has
/// at least one token.
pub struct Grammar {
    symbols: Vec<String>,
    productions: Vec<Production>,
    by_lhs: Vec<Vec<usize>>, // indexed by SymId; empty for terminals
    start: SymId,
    agreements: Vec<AgreementRule>,
    terminals: Vec<SymId>, // sorted by symbol name
    source_hash: u64,
}

const MAX_DERIVATION_STEPS: usize = 100_000;

impl Grammar {
    /// Parse and validate grammar text. Errors name the offending line.
    pub fn parse(text: &str) -> Result<Grammar> {
        let mut symbols: Vec<String> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut intern = |name: &str, symbols: &mut Vec<String>| -> SymId {
            *index.entry(name.to_string()).or_insert_with(|| {
                symbols.push(name.to_string());
                symbols.len() - 1
            })
        };

        let mut raw: Vec<(SymId, Vec<SymId>, f64)> = Vec::new();
        let mut agree_lines: Vec<(String, String, String, usize)> = Vec::new();

        for (lineno, raw_line) in text.lines().enumerate() {
            let n = lineno + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("agree:") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(invalid!(
                        "line {n}: agreement rule needs `agree: FEATURE SYM SYM`, got {line:?}"
                    ));
                }
                agree_lines.push((
                    parts[0].to_string(),
                    parts[1].to_string(),
                    parts[2].to_string(),
                    n,
                ));
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() < 5 || tokens[1] != "->" || tokens[tokens.len() - 2] != "@" {
                return Err(invalid!(
                    "line {n}: expected `LHS -> SYMBOL... @ weight`, got {line:?}"
                ));
            }
            let weight: f64 = tokens[tokens.len() - 1].parse().map_err(|_| {
                invalid!("line {n}: weight {:?} is not a number", tokens[tokens.len() - 1])
            })?;
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(invalid!("line {n}: weight must be positive and finite, got {weight}"));
            }
            for name in &tokens[..tokens.len() - 2] {
                if *name == "<pad>" || *name == "<sep>" {
                    return Err(invalid!("line {n}: symbol name {name:?} is reserved"));
                }
            }
            let lhs = intern(tokens[0], &mut symbols);
            let rhs: Vec<SymId> = tokens[2..tokens.len() - 2]
                .iter()
                .map(|t| intern(t, &mut symbols))
                .collect();
            raw.push((lhs, rhs, weight));
        }
        if raw.is_empty() {
            return Err(invalid!("grammar has no productions"));
        }

        // Normalize weights to per-nonterminal probabilities.
        let mut by_lhs: Vec<Vec<usize>> = vec![Vec::new(); symbols.len()];
        for (i, (lhs, _, _)) in raw.iter().enumerate() {
            by_lhs[*lhs].push(i);
        }
        let mut productions = Vec::with_capacity(raw.len());
        for (lhs, rhs, weight) in &raw {
            let total: f64 = by_lhs[*lhs].iter().map(|&i| raw[i].2).sum();
            productions.push(Production {
                lhs: *lhs,
                rhs: rhs.clone(),
                prob: weight / total,
            });
        }
        for (sym, prods) in by_lhs.iter().enumerate() {
            if prods.is_empty() {
                continue;
            }
            let sum: f64 = prods.iter().map(|&i| productions[i].prob).sum();
            debug_assert!(
                (sum - 1.0).abs() <= 1e-12,
                "probabilities of {} sum to {sum}",
                symbols[sym]
            );
        }

        // Every nonterminal must be productive: able to derive a finite
        // terminal string. A cycle with no terminating alternative fails.
        let is_nonterminal: Vec<bool> = by_lhs.iter().map(|p| !p.is_empty()).collect();
        let mut productive: Vec<bool> = is_nonterminal.iter().map(|nt| !nt).collect();
        loop {
            let mut changed = false;
            for p in &productions {
                if !productive[p.lhs] && p.rhs.iter().all(|&s| productive[s]) {
                    productive[p.lhs] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let dead: Vec<&str> = (0..symbols.len())
            .filter(|&s| is_nonterminal[s] && !productive[s])
            .map(|s| symbols[s].as_str())
            .collect();
        if !dead.is_empty() {
            return Err(invalid!(
                "nonterminals cannot derive any finite sentence: {}",
                dead.join(", ")
            ));
        }

        // Agreement rules must name nonterminals whose productions all emit
        // exactly one terminal, so corruption swaps one token for one token.
        let mut agreements = Vec::new();
        for (feature, an, bn, n) in agree_lines {
            let resolve = |name: &str| -> Result<SymId> {
                let sym = *index
                    .get(name)
                    .ok_or_else(|| invalid!("line {n}: agreement symbol {name:?} never appears"))?;
                if !is_nonterminal[sym] {
                    return Err(invalid!("line {n}: agreement symbol {name:?} is a terminal"));
                }
                for &pi in &by_lhs[sym] {
                    let p = &productions[pi];
                    if p.rhs.len() != 1 || is_nonterminal[p.rhs[0]] {
                        return Err(invalid!(
                            "line {n}: agreement symbol {name:?} must only emit single terminals"
                        ));
                    }
                }
                Ok(sym)
            };
            let a = resolve(&an)?;
            let b = resolve(&bn)?;
            if a == b {
                return Err(invalid!("line {n}: agreement rule pairs {an:?} with itself"));
            }
            agreements.push(AgreementRule { feature, a, b });
        }

        let mut terminals: Vec<SymId> =
            (0..symbols.len()).filter(|&s| !is_nonterminal[s]).collect();
        terminals.sort_by(|&a, &b| symbols[a].cmp(&symbols[b]));

        let start = productions[0].lhs;
        Ok(Grammar {
            symbols,
            productions,
            by_lhs,
            start,
            agreements,
            terminals,
            source_hash: fnv1a(text.as_bytes()),
        })
    }

    /// The bundled subject-verb agreement grammar.
    pub fn builtin() -> Grammar {
        Grammar::parse(include_str!("agreement.gr")).expect("bundled grammar is valid")
    }

    /// FNV-1a hash of the source text, recorded as corpus provenance.
    pub fn source_hash(&self) -> u64 {
        self.source_hash
    }

    pub fn has_agreements(&self) -> bool {
        !self.agreements.is_empty()
    }

    /// Terminal symbol names in sorted order (the vocabulary order).
    pub fn terminal_words(&self) -> Vec<&str> {
        self.terminals.iter().map(|&s| self.symbols[s].as_str()).collect()
    }

    /// True if the word sequence is derivable from the start symbol.
    pub fn recognizes(&self, words: &[&str]) -> bool {
        let mut ids = Vec::with_capacity(words.len());
        for w in words {
            match self.symbols.iter().position(|s| s == w) {
                Some(sym) if self.by_lhs[sym].is_empty() => ids.push(sym),
                _ => return false, // unknown word or a nonterminal name
            }
        }
        super::earley::recognize(self, &ids)
    }

    pub(crate) fn symbol_name(&self, sym: SymId) -> &str {
        &self.symbols[sym]
    }

    pub(crate) fn productions(&self) -> &[Production] {
        &self.productions
    }

    pub(crate) fn productions_of(&self, sym: SymId) -> &[usize] {
        &self.by_lhs[sym]
    }

    pub(crate) fn start_symbol(&self) -> SymId {
        self.start
    }

    pub(crate) fn is_nonterminal(&self, sym: SymId) -> bool {
        !self.by_lhs[sym].is_empty()
    }

    /// The agreement counterpart of `sym`, with the feature name.
    pub(crate) fn counterpart(&self, sym: SymId) -> Option<(&str, SymId)> {
        for rule in &self.agreements {
            if rule.a == sym {
                return Some((&rule.feature, rule.b));
            }
            if rule.b == sym {
                return Some((&rule.feature, rule.a));
            }
        }
        None
    }

    /// Terminals a single-terminal preterminal can emit, in production order.
    pub(crate) fn terminals_of(&self, sym: SymId) -> Vec<SymId> {
        self.by_lhs[sym]
            .iter()
            .map(|&pi| self.productions[pi].rhs[0])
            .collect()
    }

    fn pick_production(&self, sym: SymId, rng: &mut ChaCha8Rng) -> usize {
        let choices = &self.by_lhs[sym];
        let roll: f64 = rng.random();
        let mut acc = 0.0;
        for &pi in choices {
            acc += self.productions[pi].prob;
            if roll < acc {
                return pi;
            }
        }
        *choices.last().expect("nonterminal has productions")
    }

    /// Sample one sentence, returning each terminal together with the
    /// preterminal that emitted it. Expansion is leftmost (via an explicit
    /// work stack, so recursion depth cannot overflow) and consumes the RNG
    /// in a fixed order, so a seeded RNG reproduces the derivation.
    pub(crate) fn sample_derivation(
        &self,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(SymId, SymId)>> {
        let mut out = Vec::new();
        // (symbol, the nonterminal that produced it); leftmost on top.
        let mut stack: Vec<(SymId, SymId)> = vec![(self.start, self.start)];
        let mut steps = 0usize;
        while let Some((sym, parent)) = stack.pop() {
            if !self.is_nonterminal(sym) {
                out.push((sym, parent));
                continue;
            }
            steps += 1;
            if steps > MAX_DERIVATION_STEPS {
                return Err(invalid!(
                    "derivation exceeded {MAX_DERIVATION_STEPS} expansions; grammar recursion too heavy"
                ));
            }
            let pi = self.pick_production(sym, rng);
            for &s in self.productions[pi].rhs.iter().rev() {
                stack.push((s, sym));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn parses_and_normalizes_weights() {
        let g = Grammar::parse("S -> a @ 3\nS -> b @ 1\n").unwrap();
        let probs: Vec<f64> = g.productions().iter().map(|p| p.prob).collect();
        assert_eq!(probs, vec![0.75, 0.25]);
        assert_eq!(g.terminal_words(), vec!["a", "b"]);
    }

    #[test]
    fn rejects_malformed_lines() {
        for (text, why) in [
            ("S a b @ 1", "missing arrow"),
            ("S -> a b 1", "missing @"),
            ("S -> @ 1", "empty right-hand side"),
            ("S -> a @ zero", "non-numeric weight"),
            ("S -> a @ -1", "negative weight"),
            ("S -> a @ 0", "zero weight"),
            ("S -> <pad> @ 1", "reserved symbol"),
            ("", "no productions"),
        ] {
            let err = Grammar::parse(text);
            assert!(err.is_err(), "{why}: {text:?} should be rejected");
        }
    }

    #[test]
    fn rejects_unproductive_cycles() {
        // A can only rewrite to itself; no derivation ever terminates.
        let err = Grammar::parse("S -> A @ 1\nA -> A x @ 1\n");
        let msg = format!("{}", err.err().expect("must fail"));
        assert!(msg.contains('A'), "error should name the bad nonterminal: {msg}");
        // The same shape with a terminating alternative is fine.
        assert!(Grammar::parse("S -> A @ 1\nA -> A x @ 1\nA -> x @ 1\n").is_ok());
    }

    #[test]
    fn agreement_rules_are_validated() {
        let base = "S -> N_SG V @ 1\nN_SG -> dog @ 1\nN_PL -> dogs @ 1\nV -> barks @ 1\n";
        let ok = Grammar::parse(&format!("{base}agree: number N_SG N_PL\n")).unwrap();
        assert!(ok.has_agreements());
        // Unknown symbol, terminal symbol, self-pair, multi-token emitter.
        for bad in [
            "agree: number N_SG MISSING\n",
            "agree: number N_SG dog\n",
            "agree: number N_SG N_SG\n",
            "agree: number N_SG S\n",
        ] {
            assert!(
                Grammar::parse(&format!("{base}{bad}")).is_err(),
                "{bad:?} should be rejected"
            );
        }
    }

    #[test]
    fn derivations_are_seed_deterministic() {
        let g = Grammar::builtin();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = g.sample_derivation(&mut r1).unwrap();
        let b = g.sample_derivation(&mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn builtin_grammar_shape() {
        let g = Grammar::builtin();
        assert_eq!(g.terminal_words().len(), 61);
        assert!(g.has_agreements());
        assert!(g.recognizes(&["the", "dog", "sleeps"]));
        assert!(g.recognizes(&["these", "clever", "dogs", "chase", "a", "cat"]));
        assert!(!g.recognizes(&["the", "dog", "sleep"]), "number mismatch");
        assert!(!g.recognizes(&["dog", "the", "sleeps"]), "word order");
        assert!(!g.recognizes(&["the", "dog"]), "missing verb");
    }

    #[test]
    fn recursive_grammar_samples_terminate_or_error() {
        // Heavily recursive but productive; the step guard must cut off
        // pathological expansions instead of hanging.
        let g = Grammar::parse("S -> S S @ 19\nS -> a @ 1\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            match g.sample_derivation(&mut rng) {
                Ok(d) => assert!(!d.is_empty()),
                Err(e) => {
                    assert!(format!("{e}").contains("expansions"));
                    return;
                }
            }
        }
    }
}
