mod common;

use proptest::prelude::*;

use mempo_core::error::ParseErrorKind;
use mempo_core::trajectory::{check_order, parse_step, render_step, Segment, SegmentKind, Step};
use mempo_core::vocab::{Token, TAGS};

use common::word_vocab;

fn tokens(max: usize) -> impl Strategy<Value = Vec<Token>> {
    let n = word_vocab().len() as u32;
    prop::collection::vec((TAGS.len() as u32..n).prop_map(Token), 0..=max)
}

/// Steps following `Mem? Think (ToolCall Information? | Answer)`.
fn step() -> impl Strategy<Value = Step> {
    (
        1usize..6,
        prop::option::of(tokens(4)),
        tokens(3),
        prop::bool::ANY,
        tokens(3),
        prop::option::of(tokens(6)),
    )
        .prop_map(|(index, mem, think, call, action, info)| {
            let mut segments = Vec::new();
            if let Some(m) = mem {
                segments.push(Segment::new(SegmentKind::Mem, m));
            }
            segments.push(Segment::new(SegmentKind::Think, think));
            if call {
                segments.push(Segment::new(SegmentKind::ToolCall, action));
                if let Some(i) = info {
                    segments.push(Segment::new(SegmentKind::Information, i));
                }
            } else {
                segments.push(Segment::new(SegmentKind::Answer, action));
            }
            Step { index, segments }
        })
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(s in step()) {
        let vocab = word_vocab();
        let text = render_step(&s, &vocab);
        prop_assert_eq!(parse_step(&text, s.index, &vocab), Ok(s));
    }

    #[test]
    fn whitespace_between_segments_is_ignored(s in step(), pad in "[ \n\t]{0,3}") {
        let vocab = word_vocab();
        let text = render_step(&s, &vocab).replace('\n', &format!("\n{pad}"));
        prop_assert_eq!(parse_step(&format!("{pad}{text}{pad}"), s.index, &vocab), Ok(s));
    }

    #[test]
    fn missing_close_tag_is_located(s in step(), pick in any::<prop::sample::Index>()) {
        let vocab = word_vocab();
        let text = render_step(&s, &vocab);
        let closes: Vec<usize> = text.match_indices("</").map(|(i, _)| i).collect();
        let at = closes[pick.index(closes.len())];
        let end = at + text[at..].find('>').unwrap() + 1;
        let bad = format!("{}{}", &text[..at], &text[end..]);
        let e = parse_step(&bad, s.index, &vocab).unwrap_err();
        prop_assert!(e.offset <= bad.len());
        prop_assert!(matches!(
            e.kind,
            ParseErrorKind::UnclosedTag(_) | ParseErrorKind::NestedTag
        ));
    }

    #[test]
    fn stray_text_is_located(s in step(), pick in any::<prop::sample::Index>()) {
        let vocab = word_vocab();
        let text = render_step(&s, &vocab);
        let opens: Vec<usize> = text
            .match_indices('<')
            .filter(|(i, _)| !text[i + 1..].starts_with('/'))
            .map(|(i, _)| i)
            .collect();
        let at = opens[pick.index(opens.len())];
        let bad = format!("{}rimu {}", &text[..at], &text[at..]);
        let e = parse_step(&bad, s.index, &vocab).unwrap_err();
        prop_assert_eq!(e.kind, ParseErrorKind::StrayText);
        prop_assert_eq!(e.offset, at);
    }

    #[test]
    fn order_check_agrees_with_grammar(kinds in prop::collection::vec(0usize..5, 0..6)) {
        let kinds: Vec<SegmentKind> = kinds.into_iter().map(|k| SegmentKind::ALL[k]).collect();
        use SegmentKind::*;
        let rest = match kinds.first() {
            Some(Mem) => &kinds[1..],
            _ => &kinds[..],
        };
        let grammatical = matches!(
            rest,
            [Think, ToolCall] | [Think, ToolCall, Information] | [Think, Answer]
        );
        prop_assert_eq!(check_order(&kinds, true).is_ok(), grammatical);
    }
}
