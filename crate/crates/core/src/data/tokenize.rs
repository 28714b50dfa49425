/// Lowercase, split on whitespace, and split every ASCII punctuation
/// character into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Is the MAN  holding a cup?Yes."),
            vec!["is", "the", "man", "holding", "a", "cup", "?", "yes", "."]
        );
        assert!(tokenize("   ").is_empty());
        assert_eq!(tokenize("<sos>"), vec!["<", "sos", ">"]);
    }

    #[test]
    fn detokenize_round_trips() {
        let toks = tokenize("he doesn't, really.");
        assert_eq!(tokenize(&detokenize(&toks)), toks);
    }
}
