//! Word tokenization shared by every module that reads raw text.
//!
//! Lowercases, splits on Unicode whitespace, and detaches every non-word
//! character into its own token. `detokenize` is the inverse up to spacing
//! around punctuation.

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in line.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if is_word_char(c) {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Remove a `lang@` prefix if present.
pub fn strip_prefix(token: &str) -> &str {
    match token.split_once('@') {
        Some((lang, rest)) if !lang.is_empty() && lang.bytes().all(|b| b.is_ascii_lowercase()) => rest,
        _ => token,
    }
}

const CLOSING: &[&str] = &[".", ",", "!", "?", ";", ":", ")", "]", "}", "%"];
const OPENING: &[&str] = &["(", "[", "{"];

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for tok in tokens {
        let t = strip_prefix(tok.as_ref());
        if !glue_next && !CLOSING.contains(&t) {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = OPENING.contains(&t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detaches_punctuation_and_lowercases() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize("  Ärger (heute)  "), vec!["ärger", "(", "heute", ")"]);
    }

    #[test]
    fn detokenize_strips_prefixes_and_reattaches_punctuation() {
        let toks = ["en@hello", "en@,", "en@world", "en@!"];
        assert_eq!(detokenize(&toks), "hello, world!");
        assert_eq!(detokenize(&["(", "a", ")", "b"]), "(a) b");
    }

    #[test]
    fn roundtrip_on_plain_words() {
        let line = "kapo rime sulat";
        assert_eq!(detokenize(&tokenize(line)), line);
    }
}
