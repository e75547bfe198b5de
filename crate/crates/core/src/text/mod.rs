//! Text normalisation and BPE subword segmentation.

mod bpe;

pub use bpe::{BpeModel, Tokenizer, Vocabulary, BOS, EOS, EOW, PAD, UNK};

fn map_char(c: char) -> char {
    match c {
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{2032}' => '\'',
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{2033}' => '"',
        '\u{2010}'..='\u{2015}' | '\u{2212}' => '-',
        '\u{2026}' => '.',
        _ => c,
    }
}

/// Lowercases, maps typographic quotes and dashes to ASCII, and splits
/// punctuation into standalone tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().map(map_char) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_ascii()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.extend(c.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Hello,  world!"), ["hello", ",", "world", "!"]);
        assert!(normalize("").is_empty());
        assert_eq!(
            normalize("it\u{2019}s a\u{2014}test"),
            ["it", "'", "s", "a", "-", "test"]
        );
        assert_eq!(normalize("  \t\n "), Vec::<String>::new());
        assert_eq!(normalize("\u{201C}ÄBC\u{201D}"), ["\"", "äbc", "\""]);
    }
}
