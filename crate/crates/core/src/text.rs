//! Shared text normalizer and tokenizer.
//!
//! Every component that compares or indexes text (catalog features, search,
//! metrics, token accounting) goes through [`normalize`] so that matching
//! rules never diverge between the retriever and the evaluator.

use unicode_normalization::UnicodeNormalization;

/// Lowercase, NFC-compose, replace punctuation with spaces and collapse
/// whitespace. A `.` survives only when it sits between two digits, so
/// `2.5mm` stays one token.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.to_lowercase().nfc().collect();
    let chars: Vec<char> = lowered.chars().collect();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for (i, &c) in chars.iter().enumerate() {
        let keep = if c.is_alphanumeric() {
            true
        } else if c == '.' {
            let prev = i.checked_sub(1).map(|j| chars[j]);
            let next = chars.get(i + 1).copied();
            matches!((prev, next), (Some(p), Some(n)) if p.is_ascii_digit() && n.is_ascii_digit())
        } else {
            false
        };
        if keep {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Normalized whitespace tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    normalize(text)
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Approximate model-free token count used by manifests and trajectory
/// factors. Counts normalized tokens plus one per run of punctuation, so
/// JSON-heavy text is not reported as nearly empty.
pub fn count_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

/// Light normalization for structured values: case-folded, NFC, trimmed,
/// whitespace collapsed, punctuation kept.
pub fn fold_value(text: &str) -> String {
    let lowered: String = text.to_lowercase().nfc().collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenizer_examples() {
        assert_eq!(
            tokenize("Tulip ETIMO Rose 2.5mm"),
            vec!["tulip", "etimo", "rose", "2.5mm"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("100% cotton — yarn!!"), vec!["100", "cotton", "yarn"]);
    }

    #[test]
    fn dots_outside_numbers_split() {
        assert_eq!(normalize("end. Next"), "end next");
        assert_eq!(normalize("v1.2.3"), "v1.2.3");
        assert_eq!(normalize("1..2"), "1 2");
        assert_eq!(normalize("eu:30"), "eu 30");
    }

    #[test]
    fn token_count_includes_punctuation() {
        assert_eq!(count_tokens("a b"), 2);
        assert_eq!(count_tokens("{\"q\":1}"), 7);
        assert_eq!(count_tokens(""), 0);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once.clone());
        }

        #[test]
        fn tokens_have_no_whitespace(s in "\\PC{0,40}") {
            for t in tokenize(&s) {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
        }
    }
}
