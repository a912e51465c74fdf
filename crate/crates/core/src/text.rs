//! Shared tokenization.
//!
//! One tokenizer backs BM25, ROUGE, the hashing embedder, and the oracle
//! judge so that their scores are comparable: Unicode-aware lowercase,
//! split on non-alphanumeric runs, no stemming, no stopword removal.

/// Lowercased alphanumeric tokens in input order.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lower in ch.to_lowercase() {
                current.push(lower);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Function words ignored by the oracle judge's token-coverage rule.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "had", "has", "have", "he",
    "her", "his", "in", "is", "it", "its", "of", "on", "or", "she", "that", "the", "their",
    "there", "they", "this", "to", "was", "were", "with",
];

/// Tokens that carry content for the coverage heuristic: everything except
/// [`STOPWORDS`].
pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Pulse is 116/min."),
            vec!["pulse", "is", "116", "min"]
        );
    }

    #[test]
    fn unicode_aware() {
        assert_eq!(tokenize("Müller's café"), vec!["müller", "s", "café"]);
    }

    #[test]
    fn empty_and_symbol_only() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("?!***").is_empty());
    }

    #[test]
    fn content_tokens_drop_function_words() {
        assert_eq!(
            content_tokens("The patient is in the ward"),
            vec!["patient", "ward"]
        );
    }
}
