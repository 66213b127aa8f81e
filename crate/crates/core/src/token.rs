//! Word-level tokenizer with a reserved vocabulary and per-byte fallback.
//!
//! The id space is laid out as:
//!
//! | ids      | meaning                                  |
//! |----------|------------------------------------------|
//! | 0        | end-of-sequence (not producible from text) |
//! | 1        | `;` record separator                     |
//! | 2..=11   | digits `0`..`9`, one id per digit        |
//! | 12..=16  | `UP` `DOWN` `YES` `NO` `ANSWER`          |
//! | 17..=21  | `O` `H` `L` `C` `V` field markers        |
//! | 22..=277 | raw bytes 0..=255 (fallback)             |
//!
//! Input splits on whitespace. A word is either a reserved word (one token),
//! a run of ASCII digits (one token per digit), or anything else (one token
//! per byte); a space byte is emitted between two adjacent byte-fallback
//! words to preserve their boundary. Detokenization joins tokens with
//! single spaces except inside digit runs and byte runs, which
//! re-concatenate, so canonical text such as `O 12 H 14 L 11 C 13 V 57 ;`
//! and plain prose both survive a round trip.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

pub const EOS: TokenId = TokenId(0);
pub const SEPARATOR: TokenId = TokenId(1);
const DIGIT_BASE: u32 = 2;
const WORD_BASE: u32 = 12;
const BYTE_BASE: u32 = 22;

/// ids 0..RESERVED_VOCAB_SIZE are meaningful; anything above is dead weight
/// in the logit vector (legal argmax targets that detokenize to nothing).
pub const RESERVED_VOCAB_SIZE: usize = (BYTE_BASE + 256) as usize;

const RESERVED_WORDS: [&str; 10] = ["UP", "DOWN", "YES", "NO", "ANSWER", "O", "H", "L", "C", "V"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenClass {
    Eos,
    Separator,
    Digit,
    Word,
    Byte,
    Unused,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab_size: u32,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < RESERVED_VOCAB_SIZE {
            return Err(CoreError::InvalidConfig(format!(
                "vocab_size {vocab_size} < reserved vocabulary {RESERVED_VOCAB_SIZE}"
            )));
        }
        Ok(Self { vocab_size: vocab_size as u32 })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn separator(&self) -> TokenId {
        SEPARATOR
    }

    pub fn digit(&self, d: u8) -> TokenId {
        debug_assert!(d < 10);
        TokenId(DIGIT_BASE + d as u32)
    }

    /// Id of a reserved word, if the string is one.
    pub fn reserved_word(&self, word: &str) -> Option<TokenId> {
        if word == ";" {
            return Some(SEPARATOR);
        }
        if word.len() == 1 {
            let b = word.as_bytes()[0];
            if b.is_ascii_digit() {
                return Some(self.digit(b - b'0'));
            }
        }
        RESERVED_WORDS
            .iter()
            .position(|w| *w == word)
            .map(|i| TokenId(WORD_BASE + i as u32))
    }

    /// Total function: any UTF-8 text tokenizes.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut prev_was_bytes = false;
        for word in text.split_whitespace() {
            if let Some(id) = self.reserved_word(word) {
                out.push(id);
                prev_was_bytes = false;
            } else if !word.is_empty() && word.bytes().all(|b| b.is_ascii_digit()) {
                for b in word.bytes() {
                    out.push(self.digit(b - b'0'));
                }
                prev_was_bytes = false;
            } else {
                if prev_was_bytes {
                    out.push(TokenId(BYTE_BASE + b' ' as u32));
                }
                for b in word.bytes() {
                    out.push(TokenId(BYTE_BASE + b as u32));
                }
                prev_was_bytes = true;
            }
        }
        out
    }

    fn class_of(&self, t: TokenId) -> TokenClass {
        match t.0 {
            0 => TokenClass::Eos,
            1 => TokenClass::Separator,
            x if (DIGIT_BASE..DIGIT_BASE + 10).contains(&x) => TokenClass::Digit,
            x if (WORD_BASE..WORD_BASE + RESERVED_WORDS.len() as u32).contains(&x) => {
                TokenClass::Word
            }
            x if (BYTE_BASE..BYTE_BASE + 256).contains(&x) => TokenClass::Byte,
            _ => TokenClass::Unused,
        }
    }

    /// Inverse of `tokenize` for canonical sequences. EOS and ids past the
    /// reserved range render as nothing.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        let mut text = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        let mut prev: Option<TokenClass> = None;
        let flush_bytes = |text: &mut String, bytes: &mut Vec<u8>| {
            if !bytes.is_empty() {
                text.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &t in tokens {
            let class = self.class_of(t);
            if matches!(class, TokenClass::Eos | TokenClass::Unused) {
                continue;
            }
            let glue = match (prev, class) {
                (None, _) => false,
                (Some(TokenClass::Digit), TokenClass::Digit) => true,
                (Some(TokenClass::Byte), TokenClass::Byte) => true,
                _ => false,
            };
            if !glue && class != TokenClass::Byte {
                flush_bytes(&mut text, &mut bytes);
            }
            if prev.is_some() && !glue {
                if class == TokenClass::Byte {
                    flush_bytes(&mut text, &mut bytes);
                }
                text.push(' ');
            }
            match class {
                TokenClass::Separator => text.push(';'),
                TokenClass::Digit => {
                    text.push(char::from(b'0' + (t.0 - DIGIT_BASE) as u8));
                }
                TokenClass::Word => {
                    text.push_str(RESERVED_WORDS[(t.0 - WORD_BASE) as usize]);
                }
                TokenClass::Byte => bytes.push((t.0 - BYTE_BASE) as u8),
                TokenClass::Eos | TokenClass::Unused => unreachable!(),
            }
            prev = Some(class);
        }
        flush_bytes(&mut text, &mut bytes);
        text
    }

    /// Single-token convenience used by the speculative-exit path.
    pub fn detokenize_one(&self, t: TokenId) -> String {
        self.detokenize(&[t])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(512).unwrap()
    }

    #[test]
    fn canonical_record_is_exactly_16_tokens() {
        let t = tok();
        // 5 field markers + 10 digit tokens + 1 separator.
        let toks = t.tokenize("O 12 H 14 L 11 C 13 V 57 ;");
        assert_eq!(toks.len(), 16);
        assert_eq!(t.detokenize(&toks), "O 12 H 14 L 11 C 13 V 57 ;");
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(tok().tokenize("").is_empty());
        assert!(tok().tokenize("   \t\n").is_empty());
    }

    #[test]
    fn reserved_word_round_trip() {
        let t = tok();
        let toks = t.tokenize("UP");
        assert_eq!(toks.len(), 1);
        assert_eq!(t.detokenize(&toks), "UP");
    }

    #[test]
    fn digit_runs_reconcatenate() {
        let t = tok();
        let toks = t.tokenize("101");
        assert_eq!(toks.len(), 3);
        assert_eq!(t.detokenize(&toks), "101");
    }

    #[test]
    fn byte_fallback_round_trips() {
        let t = tok();
        for text in ["hello world", "ANSWER:", "naïve ?", "a1 2b"] {
            let toks = t.tokenize(text);
            assert_eq!(t.detokenize(&toks), text, "text {text:?}");
        }
    }

    #[test]
    fn eos_and_unused_ids_render_empty() {
        let t = tok();
        assert_eq!(t.detokenize(&[EOS]), "");
        assert_eq!(t.detokenize(&[TokenId(400)]), "");
        assert_eq!(t.detokenize(&[TokenId(12), EOS, TokenId(13)]), "UP DOWN");
    }

    #[test]
    fn case_sensitive_reserved_match() {
        let t = tok();
        assert_eq!(t.tokenize("UP").len(), 1);
        assert_eq!(t.tokenize("up").len(), 2); // bytes
    }

    proptest::proptest! {
        // Token-level round trip: the canonical text of any tokenization
        // re-tokenizes to the same ids.
        #[test]
        fn tokenize_detokenize_fixpoint(text in "\\PC{0,64}") {
            let t = tok();
            let toks = t.tokenize(&text);
            let canon = t.detokenize(&toks);
            proptest::prop_assert_eq!(t.tokenize(&canon), toks);
        }
    }
}
