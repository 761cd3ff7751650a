/// Characters split off as standalone tokens.
pub const PUNCTUATION: [char; 6] = ['.', ',', '!', '?', '\'', '"'];

/// Lowercases, isolates punctuation, and splits on whitespace.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(line.len() + 8);
    for ch in line.chars().flat_map(char::to_lowercase) {
        if PUNCTUATION.contains(&ch) {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced.split_whitespace().map(String::from).collect()
}

/// Space-joins tokens; the inverse of [`tokenize`] on already-normalized text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_contractions_and_punctuation() {
        assert_eq!(tokenize("Don't stop!"), ["don", "'", "t", "stop", "!"]);
    }

    #[test]
    fn empty_and_whitespace() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A  B"), ["a", "b"]);
        assert_eq!(tokenize("say \"hi\", ok?"), ["say", "\"", "hi", "\"", ",", "ok", "?"]);
    }

    proptest! {
        #[test]
        fn normalized_text_round_trips(words in prop::collection::vec("[a-z]{1,6}|[.,!?'\"]", 0..12)) {
            let text = detokenize(&words);
            prop_assert_eq!(tokenize(&text), words);
        }
    }
}
