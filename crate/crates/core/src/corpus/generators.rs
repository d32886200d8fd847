//! Sample generators, one per domain family. Each emits a single sample
//! (without the trailing separator).

use coop_numerics::rng::{self, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::vocab;
use crate::model::TokenId;

fn number_tokens(mut n: u64, out: &mut Vec<TokenId>) {
    let mut digits = Vec::new();
    loop {
        digits.push((n % 10) as u32);
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out.extend(digits.iter().rev().map(|&d| vocab::digit(d)));
}

/// `a+b=c`, `a-b=c` (never negative) or `a*b=c`, results always correct.
pub fn arithmetic(rng: &mut Rng) -> Vec<TokenId> {
    let op = rng.random_range(0..3);
    let (a, b, c, sym) = match op {
        0 => {
            let (a, b) = (rng.random_range(0..1000u64), rng.random_range(0..1000u64));
            (a, b, a + b, '+')
        }
        1 => {
            let (x, y) = (rng.random_range(0..1000u64), rng.random_range(0..1000u64));
            let (a, b) = (x.max(y), x.min(y));
            (a, b, a - b, '-')
        }
        _ => {
            let (a, b) = (rng.random_range(0..100u64), rng.random_range(0..100u64));
            (a, b, a * b, '*')
        }
    };
    let mut out = Vec::new();
    number_tokens(a, &mut out);
    out.push(vocab::punct(sym));
    number_tokens(b, &mut out);
    out.push(vocab::punct('='));
    number_tokens(c, &mut out);
    out
}

/// A random well-nested bracket string over four bracket kinds, followed by a
/// marker giving its maximum nesting depth.
pub fn balanced_brackets(rng: &mut Rng) -> Vec<TokenId> {
    let pairs = rng.random_range(1..=8usize);
    let mut out = Vec::with_capacity(2 * pairs + 1);
    let mut stack: Vec<u32> = Vec::new();
    let (mut opened, mut max_depth) = (0usize, 0usize);
    while opened < pairs || !stack.is_empty() {
        let open = opened < pairs && (stack.is_empty() || rng.random_bool(0.5));
        if open {
            let kind = rng.random_range(0..4u32);
            stack.push(kind);
            opened += 1;
            max_depth = max_depth.max(stack.len());
            out.push(vocab::bracket(kind, true));
        } else {
            let kind = stack.pop().expect("non-empty");
            out.push(vocab::bracket(kind, false));
        }
    }
    out.push(vocab::depth_marker(max_depth));
    out
}

/// Sorted digit run, ascending or descending, comma separated, `;` terminated.
pub fn sorted_runs(rng: &mut Rng) -> Vec<TokenId> {
    let len = rng.random_range(3..=9usize);
    let mut digits: Vec<u32> = (0..len).map(|_| rng.random_range(0..10)).collect();
    digits.sort_unstable();
    if rng.random_bool(0.5) {
        digits.reverse();
    }
    let mut out = Vec::with_capacity(2 * len);
    for (i, d) in digits.into_iter().enumerate() {
        if i > 0 {
            out.push(vocab::punct(','));
        }
        out.push(vocab::digit(d));
    }
    out.push(vocab::punct(';'));
    out
}

/// `prefix <copy> prefix` over upper-case letters.
pub fn copy_task(rng: &mut Rng) -> Vec<TokenId> {
    let len = rng.random_range(3..=8usize);
    let prefix: Vec<TokenId> = (0..len).map(|_| vocab::upper(rng.random_range(0..26))).collect();
    let mut out = prefix.clone();
    out.push(vocab::COPY);
    out.extend(prefix);
    out
}

/// Second-order Markov chain over a dialect-specific letter subset plus space.
///
/// The chain is a function of `id` alone, so every corpus of the same dialect
/// shares its statistics regardless of the corpus seed.
#[derive(Debug, Clone)]
pub struct MarkovDialect {
    symbols: Vec<TokenId>,
    /// `transitions[prev2 * n + prev1]` = cumulative weights over `symbols`.
    transitions: Vec<Vec<f64>>,
}

const DIALECT_LETTERS: usize = 8;
const BRANCHING: usize = 3;

impl MarkovDialect {
    pub fn new(id: u32) -> Self {
        let mut rng = rng::indexed_stream(0x6D61726B, "markov-dialect", id as u64);
        let mut letters: Vec<u32> = (0..26).collect();
        letters.shuffle(&mut rng);
        let mut symbols: Vec<TokenId> =
            letters[..DIALECT_LETTERS].iter().map(|&l| vocab::lower(l)).collect();
        symbols.push(vocab::space());
        let n = symbols.len();
        let transitions = (0..n * n)
            .map(|_| {
                let mut w = vec![0.0; n];
                let mut picks: Vec<usize> = (0..n).collect();
                picks.shuffle(&mut rng);
                for &p in &picks[..BRANCHING] {
                    w[p] = rng.random_range(0.2..1.0);
                }
                let total: f64 = w.iter().sum();
                let mut acc = 0.0;
                w.iter()
                    .map(|x| {
                        acc += x / total;
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { symbols, transitions }
    }

    pub fn symbols(&self) -> &[TokenId] {
        &self.symbols
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<TokenId> {
        let n = self.symbols.len();
        let len = rng.random_range(12..=24usize);
        let space = n - 1;
        let (mut p2, mut p1) = (space, space);
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let cdf = &self.transitions[p2 * n + p1];
            let u: f64 = rng.random();
            let next = cdf.iter().position(|&c| u < c).unwrap_or(n - 1);
            // no leading or doubled spaces
            if next == space && (out.is_empty() || p1 == space) {
                p2 = p1;
                p1 = next;
                continue;
            }
            out.push(self.symbols[next]);
            p2 = p1;
            p1 = next;
        }
        if out.last() == Some(&vocab::space()) {
            out.pop();
        }
        out
    }
}
