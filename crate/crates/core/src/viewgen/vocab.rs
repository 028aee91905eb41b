//! Closed instruction vocabulary and tokenizer.
//!
//! The vocabulary is the exhaustive word list of the template bank plus
//! every category, color, container, ordinal, and direction word. Instruction
//! generation never steps outside it, which the dataset tests assert.

use crate::model::features::{TOKEN_FIRST_WORD, TOKEN_UNK};

/// Every word the template bank can emit, in a fixed order.
pub const WORDS: &[&str] = &[
    // categories
    "cup", "plate", "apple", "bottle", "basket", "mug", "bowl", "banana", "orange", "jar", "can",
    "carton", "book", "sponge", "soap", "toothbrush", "towel", "fork", "spoon", "pot", "vase",
    "lemon",
    // colors
    "red", "green", "blue", "yellow", "white", "black",
    // containers
    "drawer", "cabinet",
    // directions and ordinals
    "left", "right", "up", "down", "first", "second", "third", "fourth",
    // superlatives
    "biggest", "smallest",
    // template words
    "pick", "the", "grab", "please", "lift", "take", "from", "to", "counting", "find", "and",
    "it", "is", "not", "currently", "visible", "turn", "look", "for", "hidden", "move", "your",
    "view", "i", "want", "drink", "water", "me", "something", "am", "thirsty", "get", "hungry",
    "a", "fruit", "eat", "read", "table", "dirty", "clean", "with", "need", "if", "you", "see",
    "then", "otherwise", "should", "there", "be", "when", "present", "else", "open", "out",
    "inside", "pull", "of",
    // benchmark task words
    "close", "pour", "into", "put", "place", "rotate", "at", "marked", "spot", "liquid",
];

/// Token id of a word, or `TOKEN_UNK` if it is out of vocabulary.
pub fn word_id(word: &str) -> usize {
    WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| TOKEN_FIRST_WORD + i)
        .unwrap_or(TOKEN_UNK)
}

/// Total id capacity required by the vocabulary (reserved ids included).
pub fn vocab_size() -> usize {
    TOKEN_FIRST_WORD + WORDS.len()
}

fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_ascii_alphabetic())
                .collect::<String>()
                .to_ascii_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Tokenizes `text`; returns the ids and the number of UNK substitutions.
pub fn tokenize(text: &str) -> (Vec<usize>, usize) {
    let mut unk = 0;
    let ids = normalize(text)
        .iter()
        .map(|w| {
            let id = word_id(w);
            if id == TOKEN_UNK {
                unk += 1;
            }
            id
        })
        .collect();
    (ids, unk)
}

/// Inverse of `tokenize` up to normalization; UNK renders as `<unk>`.
pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| {
            if id >= TOKEN_FIRST_WORD && id - TOKEN_FIRST_WORD < WORDS.len() {
                WORDS[id - TOKEN_FIRST_WORD]
            } else {
                "<unk>"
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_duplicate_words() {
        for (i, w) in WORDS.iter().enumerate() {
            assert_eq!(WORDS.iter().position(|x| x == w), Some(i), "duplicate {w}");
        }
    }

    #[test]
    fn tokenize_roundtrip() {
        let text = "Pick up the RED cup, please!";
        let (ids, unk) = tokenize(text);
        assert_eq!(unk, 0);
        assert_eq!(detokenize(&ids), "pick up the red cup please");
    }

    #[test]
    fn unk_is_counted() {
        let (ids, unk) = tokenize("pick up the zorp");
        assert_eq!(unk, 1);
        assert_eq!(*ids.last().unwrap(), crate::model::features::TOKEN_UNK);
    }

    #[test]
    fn vocab_fits_default_model() {
        assert!(vocab_size() <= crate::config::ModelConfig::default().vocab);
    }
}
