//! Fixed 128-symbol vocabulary shared by every domain.
//!
//! | ids      | symbols                               |
//! |----------|---------------------------------------|
//! | 0–7      | `<pad> <sep> <bos> <copy> <unk>` + 3 reserved |
//! | 8–17     | digits `0`–`9`                        |
//! | 18–43    | `a`–`z`                               |
//! | 44–69    | `A`–`Z`                               |
//! | 70–85    | `+ - * / = ^ % . , ; : ! ? _` space `#` |
//! | 86–93    | `( ) [ ] { } < >`                     |
//! | 94–109   | depth markers `<d0>`–`<d15>`          |
//! | 110–127  | reserved                              |

use std::sync::OnceLock;

use crate::model::TokenId;

pub const VOCAB_SIZE: usize = 128;

pub const PAD: TokenId = 0;
pub const SEP: TokenId = 1;
pub const BOS: TokenId = 2;
pub const COPY: TokenId = 3;
pub const UNK: TokenId = 4;

const DIGIT_BASE: TokenId = 8;
const LOWER_BASE: TokenId = 18;
const UPPER_BASE: TokenId = 44;
const PUNCT_BASE: TokenId = 70;
const BRACKET_BASE: TokenId = 86;
const DEPTH_BASE: TokenId = 94;
pub const MAX_DEPTH_MARKER: usize = 15;

const PUNCT: [char; 16] = ['+', '-', '*', '/', '=', '^', '%', '.', ',', ';', ':', '!', '?', '_', ' ', '#'];
const BRACKETS: [char; 8] = ['(', ')', '[', ']', '{', '}', '<', '>'];

pub fn digit(d: u32) -> TokenId {
    debug_assert!(d < 10);
    DIGIT_BASE + d
}

pub fn lower(i: u32) -> TokenId {
    debug_assert!(i < 26);
    LOWER_BASE + i
}

pub fn upper(i: u32) -> TokenId {
    debug_assert!(i < 26);
    UPPER_BASE + i
}

pub fn depth_marker(depth: usize) -> TokenId {
    DEPTH_BASE + depth.min(MAX_DEPTH_MARKER) as TokenId
}

/// Bracket pair `kind` (0..4): `()`, `[]`, `{}`, `<>`.
pub fn bracket(kind: u32, open: bool) -> TokenId {
    BRACKET_BASE + 2 * kind + if open { 0 } else { 1 }
}

pub fn punct(c: char) -> TokenId {
    let i = PUNCT.iter().position(|&p| p == c).expect("known punctuation");
    PUNCT_BASE + i as TokenId
}

pub fn space() -> TokenId {
    punct(' ')
}

fn symbols() -> &'static [String] {
    static SYMBOLS: OnceLock<Vec<String>> = OnceLock::new();
    SYMBOLS.get_or_init(|| {
        let mut s: Vec<String> = ["<pad>", "<sep>", "<bos>", "<copy>", "<unk>", "<r5>", "<r6>", "<r7>"]
            .iter()
            .map(|x| x.to_string())
            .collect();
        s.extend(('0'..='9').map(String::from));
        s.extend(('a'..='z').map(String::from));
        s.extend(('A'..='Z').map(String::from));
        s.extend(PUNCT.iter().map(|c| c.to_string()));
        s.extend(BRACKETS.iter().map(|c| c.to_string()));
        s.extend((0..=MAX_DEPTH_MARKER).map(|d| format!("<d{d}>")));
        while s.len() < VOCAB_SIZE {
            s.push(format!("<r{}>", s.len()));
        }
        s
    })
}

/// Printable form of a token id.
pub fn symbol(id: TokenId) -> &'static str {
    symbols().get(id as usize).map(String::as_str).unwrap_or("<oov>")
}

/// Renders a token sequence.
pub fn decode(tokens: &[TokenId]) -> String {
    tokens.iter().map(|&t| symbol(t)).collect()
}
