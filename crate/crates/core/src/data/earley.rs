//! Earley recognizer used to verify minimal pairs.
//!
//! The parser handles any context-free grammar this crate can load
//! (ambiguity included); empty right-hand sides are rejected at parse time,
//! which keeps the classic three-rule algorithm free of nullable handling.

use std::collections::HashSet;

use super::grammar::{Grammar, SymId};

type Item = (usize, usize, usize); // (production, dot, origin set)

/// True if `tokens` (terminal symbol ids) derive from the start symbol.
pub(crate) fn recognize(grammar: &Grammar, tokens: &[SymId]) -> bool {
    if tokens.is_empty() {
        return false; // no empty productions, so no empty sentences
    }
    let n = tokens.len();
    let mut chart: Vec<Vec<Item>> = vec![Vec::new(); n + 1];
    let mut seen: Vec<HashSet<Item>> = vec![HashSet::new(); n + 1];
    let push = |set: &mut Vec<Item>, seen: &mut HashSet<Item>, item: Item| {
        if seen.insert(item) {
            set.push(item);
        }
    };

    for &pi in grammar.productions_of(grammar.start_symbol()) {
        push(&mut chart[0], &mut seen[0], (pi, 0, 0));
    }

    for i in 0..=n {
        let mut cursor = 0;
        while cursor < chart[i].len() {
            let (pi, dot, origin) = chart[i][cursor];
            cursor += 1;
            let rhs = &grammar.productions()[pi].rhs;
            if dot == rhs.len() {
                // Completer: advance every item waiting on this nonterminal.
                // Sets before `i` are final (no empty productions), and an
                // item completing in its own origin set cannot occur.
                let lhs = grammar.productions()[pi].lhs;
                let waiting: Vec<Item> = chart[origin]
                    .iter()
                    .filter(|&&(pj, d2, _)| {
                        let r = &grammar.productions()[pj].rhs;
                        d2 < r.len() && r[d2] == lhs
                    })
                    .cloned()
                    .collect();
                for (pj, d2, o2) in waiting {
                    let (set, seen_i) = (&mut chart[i], &mut seen[i]);
                    push(set, seen_i, (pj, d2 + 1, o2));
                }
            } else {
                let next = rhs[dot];
                if grammar.is_nonterminal(next) {
                    // Predictor.
                    for &pj in grammar.productions_of(next) {
                        let (set, seen_i) = (&mut chart[i], &mut seen[i]);
                        push(set, seen_i, (pj, 0, i));
                    }
                } else if i < n && tokens[i] == next {
                    // Scanner.
                    let item = (pi, dot + 1, origin);
                    // Split the borrow: chart[i] is only read hereafter.
                    let (left, right) = chart.split_at_mut(i + 1);
                    let _ = left;
                    push(&mut right[0], &mut seen[i + 1], item);
                }
            }
        }
    }

    chart[n].iter().any(|&(pi, dot, origin)| {
        origin == 0
            && dot == grammar.productions()[pi].rhs.len()
            && grammar.productions()[pi].lhs == grammar.start_symbol()
    })
}
