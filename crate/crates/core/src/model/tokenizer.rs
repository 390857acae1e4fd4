//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by the five
//! special tokens. Encoding never fails and decode(encode(s)) == s.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const QSEP: u32 = 259;
pub const ASEP: u32 = 260;
pub const VOCAB_SIZE: usize = 261;

#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Inverse of `encode`; special tokens are stripped. Byte sequences
    /// that came from `encode` are always valid UTF-8.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= 256
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn round_trips_random_strings() {
        let tok = Tokenizer;
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..500 {
            let len = rng.gen_range(0..64);
            let s: String = (0..len)
                .map(|_| {
                    // Mix of ASCII and multi-byte code points.
                    if rng.gen_bool(0.8) {
                        rng.gen_range(' '..='~')
                    } else {
                        char::from_u32(rng.gen_range(0x00A1..0x2000)).unwrap_or('x')
                    }
                })
                .collect();
            assert_eq!(tok.decode(&tok.encode(&s)), s);
        }
    }

    #[test]
    fn decode_strips_specials() {
        let tok = Tokenizer;
        let mut ids = vec![BOS, QSEP];
        ids.extend(tok.encode("hello"));
        ids.extend([ASEP, EOS, PAD, PAD]);
        assert_eq!(tok.decode(&ids), "hello");
    }

    #[test]
    fn special_ids_are_disjoint_from_bytes() {
        for id in [BOS, EOS, PAD, QSEP, ASEP] {
            assert!(id >= 256 && (id as usize) < VOCAB_SIZE);
        }
    }
}
