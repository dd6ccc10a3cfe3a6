//! Hashed context features.
//!
//! The last `window` tokens of a context produce one unigram feature per
//! token and one bigram feature per adjacent pair. Each feature is a 64-bit
//! key mixed with the SplitMix64 finalizer; the top 16 bits of the mix give
//! the bucket. Key layout (offset 1 is the last token of the context):
//!
//! ```text
//! BEGIN    0
//! unigram  (1 << 60) | (offset << 8)  | token
//! bigram   (2 << 60) | (offset << 16) | (previous << 8) | token
//! ```
//!
//! For a bigram, `offset` is the offset of its second token. An empty context
//! yields only the BEGIN bucket.

use crate::types::Token;

pub const NUM_BUCKETS: usize = 1 << 16;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_B: u64 = 0x94D0_49BB_1331_11EB;

/// SplitMix64 output function.
pub fn mix64(key: u64) -> u64 {
    let mut z = key.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
    z ^ (z >> 31)
}

pub fn bucket_of(key: u64) -> u16 {
    (mix64(key) >> 48) as u16
}

pub const BEGIN_KEY: u64 = 0;

pub fn begin_bucket() -> u16 {
    bucket_of(BEGIN_KEY)
}

pub fn unigram_key(offset: usize, token: Token) -> u64 {
    (1u64 << 60) | ((offset as u64) << 8) | token.value() as u64
}

pub fn bigram_key(offset: usize, previous: Token, token: Token) -> u64 {
    (2u64 << 60) | ((offset as u64) << 16) | ((previous.value() as u64) << 8) | token.value() as u64
}

/// Feature buckets of a context, as a multiset in a fixed order.
pub fn features(context: &[Token], window: usize) -> Vec<u16> {
    let window = window.max(1);
    if context.is_empty() {
        return vec![begin_bucket()];
    }
    let tail = &context[context.len().saturating_sub(window)..];
    let n = tail.len();
    let mut out = Vec::with_capacity(2 * n);
    for (i, &tok) in tail.iter().enumerate() {
        let offset = n - i;
        out.push(bucket_of(unigram_key(offset, tok)));
        if i > 0 {
            out.push(bucket_of(bigram_key(offset, tail[i - 1], tok)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        s.bytes().map(|b| Token::new(b).unwrap()).collect()
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference SplitMix64 generator seeded with 0
        assert_eq!(mix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(mix64(GOLDEN), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn empty_context_is_begin_only() {
        assert_eq!(features(&[], 8), vec![begin_bucket()]);
    }

    #[test]
    fn deterministic() {
        assert_eq!(features(&toks("3+4="), 8), features(&toks("3+4="), 8));
    }

    #[test]
    fn window_truncation_drops_leading_tokens() {
        let abc = features(&toks("abc"), 2);
        let zbc = features(&toks("zbc"), 2);
        assert_eq!(abc, zbc);
        // hand expansion from the key layout: b at offset 2, c at offset 1, (b,c) at offset 1
        let b = Token::new(b'b').unwrap();
        let c = Token::new(b'c').unwrap();
        let expected = vec![
            bucket_of(unigram_key(2, b)),
            bucket_of(unigram_key(1, c)),
            bucket_of(bigram_key(1, b, c)),
        ];
        assert_eq!(abc, expected);
        assert_ne!(features(&toks("abc"), 3), features(&toks("zbc"), 3));
    }
}
