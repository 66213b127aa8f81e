//! Synthetic OHLCV stream with realistic phase structure.
//!
//! Every field is a two-digit integer so one record in canonical form
//! (`O dd H dd L dd C dd V dd ;`) tokenizes to exactly 16 tokens: five
//! field markers, ten digit tokens, one separator. The generator cycles
//! uptrend, correction, and consolidation phases:
//!
//! - uptrend: strictly higher highs and higher lows bar over bar
//! - correction: non-increasing closes drifting down
//! - consolidation: all prices inside a fixed band around the entry close

use serde::{Deserialize, Serialize};
use streamkv_core::rng::Xorshift64Star;
use thiserror::Error;

pub const RECORD_TOKENS: usize = 16;

const PRICE_MIN: i64 = 10;
const PRICE_MAX: i64 = 99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OhlcvRecord {
    pub open: u8,
    pub high: u8,
    pub low: u8,
    pub close: u8,
    pub volume: u8,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("record must have 11 whitespace fields ending in ';', got {0}")]
    Shape(usize),
    #[error("expected field marker {expected} at position {pos}")]
    Marker { expected: &'static str, pos: usize },
    #[error("field {field} is not a two-digit integer: {value:?}")]
    Digits { field: &'static str, value: String },
    #[error("price invariant violated: low <= open,close <= high")]
    Invariant,
}

impl OhlcvRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        let in_range = |v: u8| (PRICE_MIN..=PRICE_MAX).contains(&(v as i64));
        if !(in_range(self.open)
            && in_range(self.high)
            && in_range(self.low)
            && in_range(self.close)
            && in_range(self.volume))
        {
            return Err(RecordError::Invariant);
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(RecordError::Invariant);
        }
        Ok(())
    }

    /// Canonical 16-token record form.
    pub fn to_record_string(&self) -> String {
        format!(
            "O {:02} H {:02} L {:02} C {:02} V {:02} ;",
            self.open, self.high, self.low, self.close, self.volume
        )
    }

    /// Strict inverse of `to_record_string`.
    pub fn parse(s: &str) -> Result<Self, RecordError> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 11 || fields[10] != ";" {
            return Err(RecordError::Shape(fields.len()));
        }
        let expect_marker = |pos: usize, expected: &'static str| {
            if fields[pos] == expected {
                Ok(())
            } else {
                Err(RecordError::Marker { expected, pos })
            }
        };
        expect_marker(0, "O")?;
        expect_marker(2, "H")?;
        expect_marker(4, "L")?;
        expect_marker(6, "C")?;
        expect_marker(8, "V")?;
        let two_digit = |pos: usize, field: &'static str| {
            let v = fields[pos];
            if v.len() == 2 && v.bytes().all(|b| b.is_ascii_digit()) {
                Ok(v.parse::<u8>().expect("two ascii digits"))
            } else {
                Err(RecordError::Digits { field, value: v.to_string() })
            }
        };
        let rec = OhlcvRecord {
            open: two_digit(1, "open")?,
            high: two_digit(3, "high")?,
            low: two_digit(5, "low")?,
            close: two_digit(7, "close")?,
            volume: two_digit(9, "volume")?,
        };
        rec.validate()?;
        Ok(rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarketPhase {
    Uptrend,
    Correction,
    Consolidation,
}

/// Deterministic dataset with per-record phase labels.
pub fn gen_dataset_labeled(seed: u64, n: usize) -> Vec<(OhlcvRecord, MarketPhase)> {
    let mut rng = Xorshift64Star::new(seed ^ 0x0DD5_EEDD);
    let mut out = Vec::with_capacity(n);
    let clamp = |v: i64| v.clamp(PRICE_MIN, PRICE_MAX) as u8;
    let mut close: i64 = 40 + rng.next_below(20) as i64;
    let mut prev_high: i64 = close + 2;
    let mut prev_low: i64 = close - 2;
    let mut phase = MarketPhase::Uptrend;
    let mut anchor = close;
    let mut remaining = 5 + rng.next_below(8) as usize;
    while out.len() < n {
        if remaining == 0 {
            phase = match phase {
                MarketPhase::Uptrend => MarketPhase::Correction,
                MarketPhase::Correction => MarketPhase::Consolidation,
                MarketPhase::Consolidation => MarketPhase::Uptrend,
            };
            remaining = 5 + rng.next_below(8) as usize;
            // Re-base before a fresh uptrend so higher highs have headroom.
            if phase == MarketPhase::Uptrend && close > 70 {
                close = 25 + rng.next_below(15) as i64;
                prev_high = close + 2;
                prev_low = close - 2;
            }
            anchor = close;
        }
        let (low, high, open, new_close) = match phase {
            MarketPhase::Uptrend => {
                let low = (prev_low + 1 + rng.next_below(2) as i64).min(PRICE_MAX - 3);
                let high = (prev_high + 1 + rng.next_below(2) as i64)
                    .max(low + 2)
                    .min(PRICE_MAX);
                let open = low + rng.next_below((high - low) as u64 / 2 + 1) as i64;
                let c = high - rng.next_below(2) as i64;
                if high >= PRICE_MAX - 1 {
                    remaining = 1; // out of headroom, let the phase roll over
                }
                (low, high, open, c)
            }
            MarketPhase::Correction => {
                let c = (close - rng.next_below(3) as i64).max(PRICE_MIN + 2);
                let low = (c - 1 - rng.next_below(2) as i64).max(PRICE_MIN);
                let open = close.clamp(low, PRICE_MAX - 1);
                let high = open.max(c) + rng.next_below(2) as i64;
                (low, high.min(PRICE_MAX), open, c)
            }
            MarketPhase::Consolidation => {
                // Anchored at the phase entry close: sideways movement.
                let low = (anchor - 2 - rng.next_below(2) as i64).max(PRICE_MIN);
                let high = (anchor + 2 + rng.next_below(2) as i64).min(PRICE_MAX);
                let open = close.clamp(low, high);
                let c = (anchor + rng.next_below(3) as i64 - 1).clamp(low, high);
                (low, high, open, c)
            }
        };
        let low = low.min(open).min(new_close);
        let high = high.max(open).max(new_close);
        let volume = match phase {
            MarketPhase::Uptrend => 40 + rng.next_below(60) as i64,
            _ => 10 + rng.next_below(50) as i64,
        };
        let rec = OhlcvRecord {
            open: clamp(open),
            high: clamp(high),
            low: clamp(low),
            close: clamp(new_close),
            volume: clamp(volume),
        };
        debug_assert!(rec.validate().is_ok(), "generator invariant: {rec:?}");
        out.push((rec, phase));
        prev_high = high;
        prev_low = low;
        close = new_close;
        remaining -= 1;
    }
    out
}

pub fn gen_dataset(seed: u64, n: usize) -> Vec<OhlcvRecord> {
    gen_dataset_labeled(seed, n).into_iter().map(|(r, _)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use streamkv_core::Tokenizer;

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen_dataset(7, 200), gen_dataset(7, 200));
        assert_ne!(gen_dataset(7, 200), gen_dataset(8, 200));
    }

    #[test]
    fn full_scenario_size_generates() {
        let data = gen_dataset(42, 925);
        assert_eq!(data.len(), 925);
        for r in &data {
            r.validate().unwrap();
        }
    }

    #[test]
    fn every_record_is_exactly_16_tokens() {
        let tok = Tokenizer::new(512).unwrap();
        for r in gen_dataset(3, 300) {
            let toks = tok.tokenize(&r.to_record_string());
            assert_eq!(toks.len(), RECORD_TOKENS, "record {:?}", r.to_record_string());
        }
    }

    #[test]
    fn uptrend_segments_have_strictly_increasing_highs_and_lows() {
        let labeled = gen_dataset_labeled(11, 600);
        let mut prev: Option<&OhlcvRecord> = None;
        for (rec, phase) in &labeled {
            if *phase == MarketPhase::Uptrend {
                if let Some(p) = prev {
                    assert!(rec.high > p.high, "higher highs: {rec:?} after {p:?}");
                    assert!(rec.low > p.low, "higher lows: {rec:?} after {p:?}");
                }
                prev = Some(rec);
            } else {
                prev = None;
            }
        }
    }

    #[test]
    fn consolidation_stays_in_band() {
        let labeled = gen_dataset_labeled(19, 600);
        let mut run: Vec<&OhlcvRecord> = Vec::new();
        for (rec, phase) in &labeled {
            if *phase == MarketPhase::Consolidation {
                run.push(rec);
            } else {
                if run.len() > 1 {
                    let hi = run.iter().map(|r| r.high).max().unwrap();
                    let lo = run.iter().map(|r| r.low).min().unwrap();
                    assert!(hi - lo <= 12, "consolidation range bounded, got {}", hi - lo);
                }
                run.clear();
            }
        }
    }

    #[test]
    fn record_round_trip() {
        for r in gen_dataset(5, 50) {
            let s = r.to_record_string();
            assert_eq!(OhlcvRecord::parse(&s).unwrap(), r);
        }
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(OhlcvRecord::parse("").is_err());
        assert!(OhlcvRecord::parse("O 12 H 14 L 11 C 13 V 57").is_err(), "missing separator");
        assert!(OhlcvRecord::parse("O 123 H 14 L 11 C 13 V 57 ;").is_err(), "three digits");
        assert!(OhlcvRecord::parse("X 12 H 14 L 11 C 13 V 57 ;").is_err(), "bad marker");
        assert!(OhlcvRecord::parse("O 12 H 11 L 13 C 13 V 57 ;").is_err(), "low > high");
    }

    proptest::proptest! {
        #[test]
        fn parse_never_panics(s in "\\PC{0,64}") {
            let _ = OhlcvRecord::parse(&s);
        }
    }
}
