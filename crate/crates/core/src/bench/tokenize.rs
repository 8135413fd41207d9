use serde::{Deserialize, Serialize};

use crate::model::{FIRST_WORD_TOKEN, SEP_TOKEN, UNK_TOKEN};

/// Whitespace tokenizer over a fixed hashed vocabulary.
///
/// Words are lower-cased and stripped to alphanumerics, then hashed
/// (FNV-1a) into ids `FIRST_WORD_TOKEN..vocab_size`. Words with nothing
/// left after stripping map to the unknown id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTokenizer {
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl HashTokenizer {
    pub fn token_id(&self, word: &str) -> u32 {
        let norm: String = word
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        if norm.is_empty() {
            return UNK_TOKEN;
        }
        let mut h = FNV_OFFSET;
        for b in norm.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        let buckets = (self.vocab_size as u64).saturating_sub(FIRST_WORD_TOKEN as u64).max(1);
        FIRST_WORD_TOKEN + (h % buckets) as u32
    }

    fn words(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.token_id(w)).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = self.words(text);
        ids.truncate(self.max_seq_len);
        if ids.is_empty() {
            ids.push(UNK_TOKEN);
        }
        ids
    }

    /// `a SEP b`, trimming the longer side first so that exactly one
    /// separator survives truncation.
    pub fn encode_pair(&self, a: &str, b: &str) -> Vec<u32> {
        let (mut a, mut b) = (self.words(a), self.words(b));
        let budget = self.max_seq_len.saturating_sub(1);
        while a.len() + b.len() > budget {
            if a.len() >= b.len() {
                a.pop();
            } else {
                b.pop();
            }
        }
        a.push(SEP_TOKEN);
        a.extend(b);
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_is_stable_and_in_range() {
        let t = HashTokenizer { vocab_size: 50, max_seq_len: 8 };
        let ids = t.encode("The cat, the CAT!");
        assert_eq!(ids[0], ids[2]);
        assert_eq!(ids[1], ids[3]);
        assert!(ids.iter().all(|&i| i >= FIRST_WORD_TOKEN && (i as usize) < 50));
        assert_eq!(t.encode("?? !!"), vec![UNK_TOKEN, UNK_TOKEN]);
        assert_eq!(t.encode(""), vec![UNK_TOKEN]);
    }

    #[test]
    fn pair_keeps_one_separator() {
        let t = HashTokenizer { vocab_size: 50, max_seq_len: 6 };
        let ids = t.encode_pair("one two three four five", "six seven eight");
        assert_eq!(ids.len(), 6);
        assert_eq!(ids.iter().filter(|&&i| i == SEP_TOKEN).count(), 1);
    }
}
