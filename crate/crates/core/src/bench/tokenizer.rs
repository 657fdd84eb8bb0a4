//! Byte-level tokenizer: ids `0..256` are bytes, then two specials.

pub const EOS: u32 = 256;
pub const PAD: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn byte_tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Bytes of `ids`, skipping specials.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn detokenize_lossy(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize(ids)).into_owned()
}
