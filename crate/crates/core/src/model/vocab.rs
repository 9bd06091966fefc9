//! Closed vocabulary of the synthetic QA task.

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const LATENT_START: u32 = 2;
pub const LATENT_PAD: u32 = 3;
pub const LATENT_END: u32 = 4;

const TOKENS: &[&str] = &[
    "<bos>",
    "<eos>",
    "<|latent_start|>",
    "<|latent_pad|>",
    "<|latent_end|>",
    "A",
    "B",
    "C",
    "D",
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "9",
    "which",
    "direction",
    "before",
    "after",
    "the",
    "turn",
    "did",
    "motion",
    "change",
    "order",
    "of",
    "axes",
    "options",
    "?",
    "up",
    "down",
    "left",
    "right",
    "yes",
    "no",
    "maybe",
    "unsure",
    "hv",
    "vh",
    "hh",
    "vv",
];

/// Token table with lookups in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        Vocab {
            tokens: TOKENS.iter().map(|s| s.to_string()).collect(),
        }
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
        self.tokens.iter().position(|t| t == token).map(|i| i as u32)
    }

    /// Id of a token known to be in the standard table.
    pub fn expect(&self, token: &str) -> u32 {
        self.id(token)
            .unwrap_or_else(|| panic!("token {token:?} missing from vocabulary"))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_tokens_are_distinct_and_named() {
        let v = Vocab::standard();
        let ids = [LATENT_START, LATENT_PAD, LATENT_END];
        assert!(ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2]);
        assert_eq!(v.token(LATENT_PAD), Some("<|latent_pad|>"));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert!(v.len() >= 16);
    }
}
