//! Decoder vocabulary: grammar words, special tokens and hashed buckets for
//! out-of-vocabulary control words.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthworld::{Color, Predicate, Shape, Size, Texture};

pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SEP: &str = crate::controlparse::SEP;
pub const PAD: &str = "[PAD]";
pub const OOV_BUCKETS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    first_oov: u32,
}

impl Vocab {
    /// Every word the caption grammar can emit, sorted, followed by the
    /// special tokens and the OOV buckets.
    pub fn synthetic() -> Self {
        let mut words: Vec<String> = Shape::ALL
            .iter()
            .map(|s| s.word())
            .chain(Color::ALL.iter().map(|c| c.word()))
            .chain(Size::ALL.iter().map(|s| s.word()))
            .chain(Texture::ALL.iter().map(|t| t.word()))
            .chain(Predicate::ALL.iter().flat_map(|p| p.tokens().iter().copied()))
            .chain(["a"])
            .map(String::from)
            .collect();
        words.sort();
        words.dedup();
        Self::from_words(words).expect("grammar words are valid")
    }

    /// Builds a vocabulary from plain words; specials and buckets are
    /// appended.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut tokens = words;
        tokens.extend([BOS, EOS, SEP, PAD].map(String::from));
        tokens.extend((0..OOV_BUCKETS).map(|i| format!("[OOV{i}]")));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("invalid or duplicate vocabulary token {t:?}")));
            }
        }
        let first_oov = *index
            .get("[OOV0]")
            .ok_or_else(|| Error::Config("vocabulary lacks OOV buckets".into()))?;
        for s in [BOS, EOS, SEP, PAD] {
            if !index.contains_key(s) {
                return Err(Error::Config(format!("vocabulary lacks {s}")));
            }
        }
        for i in 0..OOV_BUCKETS {
            if index.get(&format!("[OOV{i}]")) != Some(&(first_oov + i as u32)) {
                return Err(Error::Config("OOV buckets must be contiguous".into()));
            }
        }
        Ok(Self {
            tokens,
            index,
            first_oov,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    fn special(&self, s: &str) -> u32 {
        self.index[s]
    }

    pub fn bos(&self) -> u32 {
        self.special(BOS)
    }

    pub fn eos(&self) -> u32 {
        self.special(EOS)
    }

    pub fn sep(&self) -> u32 {
        self.special(SEP)
    }

    pub fn pad(&self) -> u32 {
        self.special(PAD)
    }

    pub fn oov_id(&self, bucket: usize) -> u32 {
        assert!(bucket < OOV_BUCKETS);
        self.first_oov + bucket as u32
    }

    /// Bucket index if `id` is an OOV row.
    pub fn oov_bucket_of(&self, id: u32) -> Option<usize> {
        (id >= self.first_oov && id < self.first_oov + OOV_BUCKETS as u32).then(|| (id - self.first_oov) as usize)
    }

    /// Known words map to themselves, anything else to its trigram bucket.
    pub fn encode_word(&self, word: &str) -> u32 {
        self.id(word).unwrap_or_else(|| self.oov_id(oov_bucket(word)))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().map(|w| self.encode_word(w.as_ref())).collect()
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic bucket of a word from its character trigrams (the word is
/// padded with `^` and `$` so short words still produce trigrams).
pub fn oov_bucket(word: &str) -> usize {
    let padded: Vec<char> = std::iter::once('^').chain(word.chars()).chain(std::iter::once('$')).collect();
    let mut h: u64 = 0;
    let mut buf = [0u8; 12];
    for tri in padded.windows(3) {
        let mut n = 0;
        for c in tri {
            n += c.encode_utf8(&mut buf[n..]).len();
        }
        h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(fnv1a(&buf[..n]));
    }
    // Final avalanche so the low bits depend on every trigram.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h % OOV_BUCKETS as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthetic_vocab_layout() {
        let v = Vocab::synthetic();
        assert_eq!(v.token(v.bos()), BOS);
        assert_eq!(v.oov_bucket_of(v.oov_id(5)), Some(5));
        assert_eq!(v.oov_bucket_of(v.eos()), None);
        for w in ["a", "of", "left", "striped", "circle", "solid"] {
            assert!(v.id(w).is_some(), "{w}");
        }
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn oov_words_hash_deterministically() {
        let v = Vocab::synthetic();
        assert_eq!(v.encode_word("FAFACHL"), v.encode_word("FAFACHL"));
        assert!(v.oov_bucket_of(v.encode_word("lamborghini")).is_some());
        assert_eq!(v.encode_word("red"), v.id("red").unwrap());
    }

    #[test]
    fn bucket_collisions_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let words: Vec<String> = (0..1000)
            .map(|_| {
                let n = rng.random_range(3..10);
                (0..n).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
            })
            .collect();
        let mut counts = [0usize; OOV_BUCKETS];
        for w in &words {
            counts[oov_bucket(w)] += 1;
        }
        let pairs = (words.len() * (words.len() - 1) / 2) as f64;
        let colliding: f64 = counts.iter().map(|&c| (c * c.saturating_sub(1) / 2) as f64).sum();
        let rate = colliding / pairs;
        // Uniform hashing gives 1/64 = 0.0156; allow sampling noise.
        assert!(rate <= 1.0 / 64.0 * 1.15, "collision rate {rate}");
    }
}
