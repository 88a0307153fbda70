use super::{Sentence, Token};

/// Abbreviations whose trailing period never ends a sentence.
pub const ABBREVIATIONS: &[&str] = &["Dr.", "Mr.", "Mrs.", "Ms.", "M.D.", "vs.", "e.g.", "i.e."];

/// Splits text into sentences of tokens.
///
/// Tokens are maximal alphanumeric runs; every other non-space character is
/// a token of its own. Sentences end at newline runs and at `.`, `!` or `?`
/// followed by whitespace and an uppercase letter, unless the period closes
/// one of [`ABBREVIATIONS`].
pub fn tokenize(text: &str) -> Vec<Sentence> {
    tokenize_aligned(text, &[])
}

/// Like [`tokenize`], but also splits any token that straddles a span edge
/// and never breaks a sentence inside a span.
pub fn tokenize_aligned(text: &str, spans: &[(usize, usize)]) -> Vec<Sentence> {
    let chars: Vec<char> = text.chars().collect();
    let mut cuts: Vec<usize> = spans.iter().flat_map(|&(s, e)| [s, e]).collect();
    cuts.sort_unstable();
    cuts.dedup();

    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            let mut newline = false;
            while i < chars.len() && chars[i].is_whitespace() {
                newline |= chars[i] == '\n';
                i += 1;
            }
            if newline && !current.is_empty() && !inside_span(spans, i) {
                sentences.push(finish(&mut current));
            }
            continue;
        }

        let chunk_start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        for (start, end) in split_chunk(&chars, chunk_start, i, &cuts) {
            let surface: String = chars[start..end].iter().collect();
            let is_terminal = matches!(surface.as_str(), "." | "!" | "?");
            current.push(Token { start, end, surface });
            if is_terminal
                && end == i
                && breaks_after(&chars, end)
                && !(chars[start] == '.' && closes_abbreviation(&chars, chunk_start, end))
                && !inside_span(spans, end)
            {
                sentences.push(finish(&mut current));
            }
        }
    }
    if !current.is_empty() {
        sentences.push(finish(&mut current));
    }
    sentences
}

fn finish(tokens: &mut Vec<Token>) -> Sentence {
    Sentence {
        tokens: std::mem::take(tokens),
        domain_id: 0,
    }
}

/// True when a boundary at `pos` would fall strictly inside some span.
fn inside_span(spans: &[(usize, usize)], pos: usize) -> bool {
    spans.iter().any(|&(s, e)| s < pos && pos < e)
}

fn breaks_after(chars: &[char], end: usize) -> bool {
    if end >= chars.len() || !chars[end].is_whitespace() {
        return false;
    }
    chars[end..]
        .iter()
        .find(|c| !c.is_whitespace())
        .is_some_and(|c| c.is_uppercase())
}

fn closes_abbreviation(chars: &[char], chunk_start: usize, end: usize) -> bool {
    let mut start = chunk_start;
    while start < end && !chars[start].is_alphanumeric() {
        start += 1;
    }
    let word: String = chars[start..end].iter().collect();
    ABBREVIATIONS.contains(&word.as_str())
}

fn split_chunk(chars: &[char], start: usize, end: usize, cuts: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = start;
    while i < end {
        if chars[i].is_alphanumeric() {
            let mut j = i;
            while j < end && chars[j].is_alphanumeric() {
                j += 1;
            }
            let mut s = i;
            for &c in cuts.iter().filter(|&&c| c > i && c < j) {
                out.push((s, c));
                s = c;
            }
            out.push((s, j));
            i = j;
        } else {
            out.push((i, i + 1));
            i += 1;
        }
    }
    out
}
