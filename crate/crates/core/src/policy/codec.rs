//! Text <-> token mapping over 7-bit ASCII.

use thiserror::Error;

use crate::types::Token;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("character {ch:?} at byte {position} is outside the ASCII vocabulary")]
pub struct CodecError {
    pub ch: char,
    pub position: usize,
}

pub fn encode(text: &str) -> Result<Vec<Token>, CodecError> {
    text.char_indices()
        .map(|(position, ch)| {
            u8::try_from(ch)
                .ok()
                .and_then(Token::new)
                .ok_or(CodecError { ch, position })
        })
        .collect()
}

pub fn decode(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.value() as char).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_ascii() {
        let err = encode("ab\u{e9}").unwrap_err();
        assert_eq!(err.position, 2);
    }

    proptest! {
        #[test]
        fn ascii_round_trip(s in "[\\x00-\\x7f]{0,64}") {
            prop_assert_eq!(decode(&encode(&s).unwrap()), s);
        }
    }
}
