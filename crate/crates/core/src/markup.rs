//! `{{…}}` marker rendering and parsing shared by the prompt builder and the
//! response parser.
//!
//! Token text is escaped before it is placed in a prompt: `\` becomes `\\`,
//! a newline becomes `\n`, and `{` / `}` become `\{` / `\}`. Parsing undoes
//! these escapes, also reads `↵` as a newline, and treats any other
//! backslash literally. A `{{` with no later `}}` is literal text.

/// Appends `text` to `out` with prompt escapes applied.
pub fn escape_into(out: &mut String, text: &str) {
    for ch in text.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '{' => out.push_str("\\{"),
            '}' => out.push_str("\\}"),
            c => out.push(c),
        }
    }
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    escape_into(&mut out, text);
    out
}

/// Concatenates token texts, wrapping each span of token indices in `{{…}}`.
/// Spans are half-open, sorted and non-overlapping.
pub fn render_marked(texts: &[String], spans: &[(usize, usize)]) -> String {
    let mut out = String::new();
    let mut spans = spans.iter().peekable();
    let mut open_until: Option<usize> = None;
    for (i, text) in texts.iter().enumerate() {
        if open_until == Some(i) {
            out.push_str("}}");
            open_until = None;
        }
        if let Some(&&(start, end)) = spans.peek() {
            if start == i && end > start {
                out.push_str("{{");
                open_until = Some(end);
                spans.next();
            }
        }
        escape_into(&mut out, text);
    }
    if open_until.is_some() {
        out.push_str("}}");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece {
    Char(char),
    Open,
    Close,
}

/// Result of parsing marked-up text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub clean: String,
    /// Byte ranges of marked content in `clean`.
    pub spans: Vec<(usize, usize)>,
    /// Whether any `{{` or `}}` had no partner and was kept as text.
    pub unbalanced: bool,
}

fn lex(raw: &str) -> Vec<Piece> {
    let chars: Vec<char> = raw.chars().collect();
    let mut pieces = Vec::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match (c, next) {
            ('\\', Some('n')) => {
                pieces.push(Piece::Char('\n'));
                i += 2;
            }
            ('\\', Some(e @ ('\\' | '{' | '}'))) => {
                pieces.push(Piece::Char(e));
                i += 2;
            }
            ('↵', _) => {
                pieces.push(Piece::Char('\n'));
                i += 1;
            }
            ('{', Some('{')) => {
                pieces.push(Piece::Open);
                i += 2;
            }
            ('}', Some('}')) => {
                pieces.push(Piece::Close);
                i += 2;
            }
            (c, _) => {
                pieces.push(Piece::Char(c));
                i += 1;
            }
        }
    }
    pieces
}

pub fn parse_marked(raw: &str) -> Parsed {
    let pieces = lex(raw);
    let mut clean = String::with_capacity(raw.len());
    let mut spans = Vec::new();
    let mut unbalanced = false;
    let mut open_at: Option<usize> = None;
    for (idx, piece) in pieces.iter().enumerate() {
        match piece {
            Piece::Char(c) => clean.push(*c),
            Piece::Open if open_at.is_none() => {
                if pieces[idx + 1..].contains(&Piece::Close) {
                    open_at = Some(clean.len());
                } else {
                    unbalanced = true;
                    clean.push_str("{{");
                }
            }
            Piece::Open => {
                unbalanced = true;
                clean.push_str("{{");
            }
            Piece::Close => match open_at.take() {
                Some(start) => {
                    if clean.len() > start {
                        spans.push((start, clean.len()));
                    }
                }
                None => {
                    unbalanced = true;
                    clean.push_str("}}");
                }
            },
        }
    }
    Parsed {
        clean,
        spans,
        unbalanced,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn render_wraps_runs() {
        let t = texts(&["a", " b", " c", " d"]);
        assert_eq!(render_marked(&t, &[(1, 2), (3, 4)]), "a{{ b}} c{{ d}}");
        assert_eq!(render_marked(&t, &[(0, 4)]), "{{a b c d}}");
        assert_eq!(render_marked(&t, &[]), "a b c d");
    }

    #[test]
    fn render_escapes_braces_and_newlines() {
        let t = texts(&["if", " {{", "\n", "x\\"]);
        assert_eq!(render_marked(&t, &[(2, 3)]), "if \\{\\{{{\\n}}x\\\\");
        let p = parse_marked(&render_marked(&t, &[(2, 3)]));
        assert_eq!(p.clean, "if {{\nx\\");
        assert_eq!(p.spans, vec![(5, 6)]);
    }

    #[test]
    fn parse_basic() {
        let p = parse_marked("A {{x}} B");
        assert_eq!(p.clean, "A x B");
        assert_eq!(p.spans, vec![(2, 3)]);
        assert!(!p.unbalanced);
    }

    #[test]
    fn parse_unbalanced_is_literal() {
        let p = parse_marked("a {{b c");
        assert_eq!(p.clean, "a {{b c");
        assert!(p.spans.is_empty());
        assert!(p.unbalanced);
        let p = parse_marked("a}} {{b}}");
        assert_eq!(p.clean, "a}} b");
        assert_eq!(p.spans, vec![(4, 5)]);
    }

    #[test]
    fn parse_decodes_newline_forms() {
        let p = parse_marked("x{{\\n}}y{{↵}}z \\t");
        assert_eq!(p.clean, "x\ny\nz \\t");
        assert_eq!(p.spans, vec![(1, 2), (3, 4)]);
    }

    #[test]
    fn empty_markers_yield_no_span() {
        let p = parse_marked("a{{}}b");
        assert_eq!(p.clean, "ab");
        assert!(p.spans.is_empty());
    }

    proptest! {
        #[test]
        fn markers_round_trip(
            parts in proptest::collection::vec(("[a-z ]{0,6}", any::<bool>()), 1..8)
        ) {
            let mut raw = String::new();
            let mut clean = String::new();
            let mut spans = Vec::new();
            for (text, marked) in &parts {
                if *marked && !text.is_empty() {
                    raw.push_str("{{");
                    raw.push_str(text);
                    raw.push_str("}}");
                    spans.push((clean.len(), clean.len() + text.len()));
                } else {
                    raw.push_str(text);
                }
                clean.push_str(text);
            }
            let p = parse_marked(&raw);
            prop_assert_eq!(&p.clean, &clean);
            prop_assert_eq!(&p.spans, &spans);
            // Re-inserting markers reproduces the raw text.
            let mut rebuilt = String::new();
            let mut last = 0;
            for &(s, e) in &p.spans {
                rebuilt.push_str(&p.clean[last..s]);
                rebuilt.push_str("{{");
                rebuilt.push_str(&p.clean[s..e]);
                rebuilt.push_str("}}");
                last = e;
            }
            rebuilt.push_str(&p.clean[last..]);
            prop_assert_eq!(rebuilt, raw);
        }

        #[test]
        fn escaped_text_parses_back(text in "[a-z{}\\\\\n ]{0,20}") {
            let p = parse_marked(&escape(&text));
            prop_assert_eq!(p.clean, text);
            prop_assert!(p.spans.is_empty());
        }
    }
}
