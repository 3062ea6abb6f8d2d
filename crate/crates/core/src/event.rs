//! Asynchronous event observations.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Parses the usual textual encodings: `1`/`+1` positive, `0`/`-1` negative.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "1" | "+1" => Some(Self::Positive),
            "0" | "-1" => Some(Self::Negative),
            _ => None,
        }
    }

    /// Dataset encoding, `1` or `0`.
    pub fn as_bit(self) -> u8 {
        match self {
            Self::Positive => 1,
            Self::Negative => 0,
        }
    }
}

/// One event. The polarity is carried through but no cost term reads it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EventObservation<T: Real> {
    pub timestamp: T,
    pub pixel: Vector2<T>,
    pub polarity: Polarity,
    pub track_id: Option<u64>,
}

impl<T: Real> EventObservation<T> {
    pub fn new(timestamp: T, pixel: Vector2<T>, polarity: Polarity, track_id: Option<u64>) -> Self {
        Self { timestamp, pixel, polarity, track_id }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polarity_encodings() {
        assert_eq!(Polarity::parse("1"), Some(Polarity::Positive));
        assert_eq!(Polarity::parse("+1"), Some(Polarity::Positive));
        assert_eq!(Polarity::parse("0"), Some(Polarity::Negative));
        assert_eq!(Polarity::parse("-1"), Some(Polarity::Negative));
        assert_eq!(Polarity::parse("2"), None);
        assert_eq!(Polarity::Positive.as_bit(), 1);
    }
}
