//! Tokenization shared by embedding, tagging and substitution.
//!
//! A word is a maximal run of Unicode alphanumeric characters. Tokens are the
//! lowercased words; surface words keep their original casing so that
//! substituted text can be re-cased.

/// Surface words of `text`, original casing preserved.
pub fn words(text: &str) -> Vec<&str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Lowercased token sequence of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    words(text).into_iter().map(str::to_lowercase).collect()
}

/// Join tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Re-case `replacement` to follow the casing of `original`.
///
/// All-caps originals (length > 1) give an all-caps replacement, an initial
/// capital gives a capitalized replacement, anything else is left lowercase.
pub fn match_case(original: &str, replacement: &str) -> String {
    let mut chars = original.chars();
    let Some(first) = chars.next() else {
        return replacement.to_string();
    };
    if !first.is_uppercase() {
        return replacement.to_string();
    }
    let all_upper = original.chars().count() > 1
        && original
            .chars()
            .filter(|c| c.is_alphabetic())
            .all(char::is_uppercase);
    if all_upper {
        return replacement.to_uppercase();
    }
    let mut rc = replacement.chars();
    match rc.next() {
        Some(f) => f.to_uppercase().chain(rc).collect(),
        None => String::new(),
    }
}
