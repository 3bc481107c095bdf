/// Tokenization mode: text lowercases, code preserves case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Text,
    Code,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte spans of tokens in `s`.
///
/// Runs of alphanumeric characters (and `_`) form words; every other
/// non-whitespace character is a token on its own.
pub fn tokenize_spans(s: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in s.char_indices() {
        if is_word_char(c) {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = word_start.take() {
            spans.push((start, i));
        }
        if !c.is_whitespace() {
            spans.push((i, i + c.len_utf8()));
        }
    }
    if let Some(start) = word_start {
        spans.push((start, s.len()));
    }
    spans
}

/// Per-character lowercasing; characters whose lowercase form expands to
/// several characters are kept as they are so token boundaries never move.
fn lowercase(tok: &str) -> String {
    tok.chars()
        .map(|c| {
            let mut lower = c.to_lowercase();
            match (lower.next(), lower.next()) {
                (Some(l), None) => l,
                _ => c,
            }
        })
        .collect()
}

pub fn tokenize(s: &str, mode: TokenMode) -> Vec<String> {
    tokenize_spans(s)
        .into_iter()
        .map(|(a, b)| match mode {
            TokenMode::Text => lowercase(&s[a..b]),
            TokenMode::Code => s[a..b].to_string(),
        })
        .collect()
}

/// Longest prefix of `s` holding at most `max_tokens` tokens.
/// Returns the input unchanged when it is already short enough.
pub fn truncate_to_tokens(s: &str, max_tokens: usize) -> &str {
    let spans = tokenize_spans(s);
    if spans.len() <= max_tokens {
        return s;
    }
    match max_tokens {
        0 => "",
        m => &s[..spans[m - 1].1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_and_code_modes() {
        assert_eq!(tokenize("Hello, world", TokenMode::Text), ["hello", ",", "world"]);
        assert_eq!(tokenize("x=1", TokenMode::Code), ["x", "=", "1"]);
        assert_eq!(tokenize("Foo.Bar()", TokenMode::Code), ["Foo", ".", "Bar", "(", ")"]);
        assert!(tokenize("", TokenMode::Text).is_empty());
        assert!(tokenize("  \n\t ", TokenMode::Code).is_empty());
        assert_eq!(tokenize("snake_case id", TokenMode::Code), ["snake_case", "id"]);
    }

    #[test]
    fn truncation_keeps_prefix() {
        assert_eq!(truncate_to_tokens("a b c d", 2), "a b");
        assert_eq!(truncate_to_tokens("f(x) + 1", 3), "f(x");
        assert_eq!(truncate_to_tokens("a b", 5), "a b");
    }

    proptest! {
        #[test]
        fn rejoined_tokens_keep_count(s in "\\PC{0,60}") {
            for mode in [TokenMode::Text, TokenMode::Code] {
                let toks = tokenize(&s, mode);
                let again = tokenize(&toks.join(" "), mode);
                prop_assert_eq!(toks.len(), again.len());
            }
        }

        #[test]
        fn truncation_yields_exact_count(s in "[a-z(),=. ]{0,80}", m in 1usize..12) {
            let t = truncate_to_tokens(&s, m);
            let n = tokenize(&s, TokenMode::Code).len();
            prop_assert_eq!(tokenize(t, TokenMode::Code).len(), n.min(m));
            prop_assert!(s.starts_with(t));
        }
    }
}
