/// Tokenizer side of a text backend.
pub trait Tokenizer: Send + Sync {
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    fn vocab_size(&self) -> usize;
    /// Tokenizes free text. Special-token spellings are not recognized here.
    fn tokenize(&self, text: &str) -> Vec<u32>;
}

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub(crate) const FIRST_REGULAR_ID: u32 = 3;

/// Lowercasing whitespace/punctuation splitter with a hashed vocabulary.
#[derive(Debug, Clone)]
pub struct HashTokenizer {
    vocab_size: usize,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > FIRST_REGULAR_ID as usize, "vocabulary too small");
        Self { vocab_size }
    }

    /// Splits into alphanumeric runs and single punctuation characters.
    pub fn pieces(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    pub fn piece_id(&self, piece: &str) -> u32 {
        let span = self.vocab_size as u64 - FIRST_REGULAR_ID as u64;
        FIRST_REGULAR_ID + (fnv1a(piece.as_bytes()) % span) as u32
    }

    /// Like `tokenize`, but whitespace-delimited `[CLS]` / `[SEP]` become
    /// their special ids. Handy for writing expected sequences.
    pub fn encode_marked(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for chunk in text.split_whitespace() {
            match chunk {
                "[CLS]" => ids.push(CLS_ID),
                "[SEP]" => ids.push(SEP_ID),
                other => ids.extend(self.tokenize(other)),
            }
        }
        ids
    }
}

impl Tokenizer for HashTokenizer {
    fn cls_id(&self) -> u32 {
        CLS_ID
    }

    fn sep_id(&self) -> u32 {
        SEP_ID
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        Self::pieces(text).iter().map(|p| self.piece_id(p)).collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(
            HashTokenizer::pieces("Leonardo finally won an Oscar."),
            ["leonardo", "finally", "won", "an", "oscar", "."]
        );
        assert_eq!(HashTokenizer::pieces("  "), Vec::<String>::new());
        assert_eq!(HashTokenizer::pieces("U.S.A"), ["u", ".", "s", ".", "a"]);
    }

    #[test]
    fn ids_are_stable_and_in_range() {
        let t = HashTokenizer::new(100);
        let a = t.tokenize("hello world, hello");
        assert_eq!(a[0], a[3]);
        assert!(a.iter().all(|&id| id >= FIRST_REGULAR_ID && (id as usize) < 100));
        // Case-insensitive.
        assert_eq!(t.tokenize("Hello"), t.tokenize("hello"));
    }
}
