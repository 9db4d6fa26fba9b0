/// Lowercases, strips ASCII punctuation, splits on whitespace and drops the
/// articles `a`, `an`, `the`.
pub fn normalize_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_case_punctuation_articles() {
        assert_eq!(normalize_words("The Eiffel-Tower, a landmark!"), ["eiffeltower", "landmark"]);
        assert!(normalize_words(" . ; ").is_empty());
        assert_eq!(normalize_words("An apple"), ["apple"]);
    }
}
