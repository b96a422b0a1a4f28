//! Input construction for the concatenation baselines.

use std::ops::Range;

use crate::text::DELIM;

/// Text before the first blank line; without one, the first three sentences.
pub fn first_paragraph(text: &str) -> &str {
    let blank = text.find("\n\n").into_iter().chain(text.find("\r\n\r\n")).min();
    if let Some(pos) = blank {
        let head = text[..pos].trim_end();
        if !head.trim().is_empty() {
            return head;
        }
    }
    let mut sentences = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let at_break = chars.get(k + 1).is_none_or(|&(_, n)| n.is_whitespace());
            if at_break {
                sentences += 1;
                if sentences == 3 {
                    return &text[..i + c.len_utf8()];
                }
            }
        }
    }
    text
}

/// `ctx₁ DELIM ctx₂ DELIM … DELIM main`, oldest context first, plus the span
/// of the main tokens. When the sequence exceeds `max_len` the oldest context
/// tokens are cut first; the main article is only truncated (at its end) if it
/// alone does not fit.
pub fn build_concat_input(contexts: &[&[usize]], main: &[usize], max_len: usize) -> (Vec<usize>, Range<usize>) {
    let main = &main[..main.len().min(max_len)];
    let mut ctx: Vec<usize> = Vec::new();
    for c in contexts {
        ctx.extend_from_slice(c);
        ctx.push(DELIM);
    }
    let room = max_len - main.len();
    if ctx.len() > room {
        log::debug!("concatenated input: cutting {} oldest context tokens", ctx.len() - room);
        ctx.drain(..ctx.len() - room);
        // A leading separator carries nothing once its article is gone.
        while ctx.first() == Some(&DELIM) {
            ctx.remove(0);
        }
    }
    let start = ctx.len();
    ctx.extend_from_slice(main);
    let end = ctx.len();
    (ctx, start..end)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paragraph_rules() {
        assert_eq!(first_paragraph("Lead line.\nMore.\n\nSecond para."), "Lead line.\nMore.");
        assert_eq!(first_paragraph("A one. B two! C three? D four."), "A one. B two! C three?");
        assert_eq!(first_paragraph("Short text"), "Short text");
        assert_eq!(first_paragraph("Pi is 3.14 today. Two. Three. Four."), "Pi is 3.14 today. Two. Three.");
    }

    #[test]
    fn concat_layout() {
        let (seq, span) = build_concat_input(&[&[10, 11], &[12]], &[20, 21, 22], 100);
        assert_eq!(seq, [10, 11, DELIM, 12, DELIM, 20, 21, 22]);
        assert_eq!(span, 5..8);
        assert_eq!(seq.iter().filter(|&&t| t == DELIM).count(), 2);
        let (seq, span) = build_concat_input(&[], &[5, 6], 100);
        assert_eq!((seq, span), (vec![5, 6], 0..2));
    }

    #[test]
    fn overflow_cuts_oldest_first() {
        let (seq, span) = build_concat_input(&[&[10, 11, 12], &[13, 14]], &[20, 21], 6);
        assert_eq!(seq, [13, 14, DELIM, 20, 21]);
        assert_eq!(span, 3..5);
        let (seq, _) = build_concat_input(&[&[10, 11, 12], &[13, 14]], &[20, 21], 7);
        assert_eq!(seq, [12, DELIM, 13, 14, DELIM, 20, 21]);
        let (seq, span) = build_concat_input(&[&[10]], &[1, 2, 3, 4], 3);
        assert_eq!((seq, span), (vec![1, 2, 3], 0..3));
    }
}
