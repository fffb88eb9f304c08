//! Tokenisation: subword BPE for the model, plus the word and sentence
//! splitters shared by the oracle, the metrics and the extractive baselines.

mod bpe;

pub use bpe::{BpeModel, TokenSeq, BOS, EOS, NUM_SPECIALS, PAD, SPECIALS, UNK};

/// Lowercases, splits on whitespace and trims non-alphanumeric characters
/// from both ends of every token. Empty tokens are dropped.
pub fn word_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits after runs of `.`, `!` or `?` that are followed by whitespace or the
/// end of the text. A run such as `...` counts as one terminator.
pub fn sentence_split(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if is_terminator(chars[i]) {
            let mut j = i;
            while j < chars.len() && is_terminator(chars[j]) {
                j += 1;
            }
            if j == chars.len() || chars[j].is_whitespace() {
                push_sentence(&mut out, &chars[start..j]);
                start = j;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    push_sentence(&mut out, &chars[start..]);
    out
}

fn push_sentence(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_tokenize_examples() {
        assert_eq!(word_tokenize("The cat sat."), vec!["the", "cat", "sat"]);
        assert!(word_tokenize("").is_empty());
        assert_eq!(word_tokenize("I, I!"), vec!["i", "i"]);
        assert_eq!(word_tokenize("-- ... I've"), vec!["i've"]);
    }

    #[test]
    fn sentence_split_examples() {
        assert_eq!(sentence_split("A. B!"), vec!["A.", "B!"]);
        assert_eq!(sentence_split("no terminator"), vec!["no terminator"]);
        assert_eq!(sentence_split("Hi... ok."), vec!["Hi...", "ok."]);
        assert_eq!(sentence_split("v1.5 is out. Yes"), vec!["v1.5 is out.", "Yes"]);
        assert!(sentence_split("   ").is_empty());
    }

    proptest::proptest! {
        #[test]
        fn word_tokens_are_lowercase_and_non_empty(s in "[A-Za-zÀ-ÿ0-9 ,.!?'-]{0,60}") {
            for w in word_tokenize(&s) {
                proptest::prop_assert!(!w.is_empty());
                proptest::prop_assert!(!w.chars().any(|c| c.is_uppercase()));
            }
        }

        #[test]
        fn sentences_are_non_empty(s in "[a-z .!?]{0,60}") {
            for sent in sentence_split(&s) {
                proptest::prop_assert!(!sent.trim().is_empty());
            }
        }
    }
}
