//! Byte-level tokenizer shared by every model in the lab.

/// 256 byte tokens plus BOS and EOS.
pub const VOCAB_SIZE: usize = 258;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| u32::from(b)).collect()
    }

    /// `BOS text EOS`.
    pub fn encode_document(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len() + 2);
        out.push(BOS);
        out.extend(bytes.iter().map(|&b| u32::from(b)));
        out.push(EOS);
        out
    }

    /// Drops BOS/EOS and anything outside the vocabulary.
    pub fn decode(&self, tokens: &[u32]) -> Vec<u8> {
        tokens
            .iter()
            .filter_map(|&t| u8::try_from(t).ok())
            .collect()
    }

    pub fn decode_lossy(&self, tokens: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode(tokens)).into_owned()
    }
}
