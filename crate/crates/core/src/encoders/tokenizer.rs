use serde::{Deserialize, Serialize};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const PAD: u32 = 2;
const RESERVED: u32 = 3;

/// Fixed-length token id sequence starting with `CLS`, padded with `PAD`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Number of non-padding positions.
    pub fn content_len(&self) -> usize {
        self.ids.iter().position(|&t| t == PAD).unwrap_or(self.ids.len())
    }

    /// The non-padding prefix.
    pub fn content(&self) -> &[u32] {
        &self.ids[..self.content_len()]
    }

    /// Word ids between `CLS` and the first `SEP`/`PAD`.
    pub fn words(&self) -> &[u32] {
        let body = &self.content()[1..];
        let end = body.iter().position(|&t| t == SEP).unwrap_or(body.len());
        &body[..end]
    }

    /// Segment id per content position: 0 up to and including `SEP`, 1 after.
    pub fn segments(&self) -> Vec<usize> {
        let mut seg = 0;
        self.content()
            .iter()
            .map(|&t| {
                let s = seg;
                if t == SEP {
                    seg = 1;
                }
                s
            })
            .collect()
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Re-pads to a longer fixed length; content is unchanged.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut ids = self.content().to_vec();
        ids.resize(len.max(ids.len()), PAD);
        Self { ids }
    }
}

/// Lower-casing, whitespace-splitting hashing tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: u32,
    pub max_len: usize,
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Tokenizer {
    pub fn new(vocab_size: u32, max_len: usize) -> Self {
        assert!(vocab_size > RESERVED, "vocab must exceed the special ids");
        assert!(max_len >= 2, "room for CLS and SEP");
        Self { vocab_size, max_len }
    }

    pub fn word_id(&self, word: &str) -> u32 {
        RESERVED + (fnv1a(word) % (self.vocab_size - RESERVED) as u64) as u32
    }

    fn finish(&self, mut ids: Vec<u32>) -> TokenSequence {
        ids.truncate(self.max_len);
        ids.resize(self.max_len, PAD);
        TokenSequence { ids }
    }

    /// Lowercases and splits on any non-alphanumeric character; punctuation
    /// is dropped.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let lower = text.to_lowercase();
        let mut ids = vec![CLS];
        ids.extend(lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| self.word_id(w)));
        self.finish(ids)
    }

    /// `[CLS] premise [SEP] hypothesis`, truncating the premise first when
    /// the pair does not fit.
    pub fn pack_pair(&self, premise: &TokenSequence, hypothesis: &TokenSequence) -> TokenSequence {
        let budget = self.max_len - 2;
        let h = hypothesis.words();
        let h = &h[..h.len().min(budget)];
        let p = premise.words();
        let p = &p[..p.len().min(budget - h.len())];
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(CLS);
        ids.extend_from_slice(p);
        ids.push(SEP);
        ids.extend_from_slice(h);
        self.finish(ids)
    }
}
