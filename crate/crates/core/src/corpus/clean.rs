//! Named cleaning rules.
//!
//! | rule          | sources                          | effect                                              |
//! |---------------|----------------------------------|-----------------------------------------------------|
//! | `wiki_html`   | wikipedia, simple_wikipedia      | strips `<...>` tags                                 |
//! | `subs_cues`   | open_subtitles, qed              | strips `[...]` / `(...)` cues at the start of lines |
//! | `ocr_l_to_i`  | gutenberg                        | `l` inside an all-caps word becomes `I`             |
//! | `whitespace`  | every source                     | collapses blanks, trims lines, squeezes blank lines |
//!
//! Rules run in that order and the whole pass repeats until the text stops
//! changing, so cleaning is idempotent.

use std::sync::LazyLock;

use regex::Regex;

use super::{RawDocument, SourceKind};
use crate::error::Result;
use crate::registry::Registry;

pub trait Cleaner: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, text: &str) -> String;
}

static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^<>]+>").unwrap());
static CUE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^[ \t]*(?:(?:\[[^\]\n]*\]|\([^)\n]*\))[ \t]*)+").unwrap());
static CAPS_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b[A-Zl]{2,}\b").unwrap());
static BLANKS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t]+").unwrap());

struct WikiHtml;
struct SubtitleCues;
struct OcrLToI;
struct Whitespace;

impl Cleaner for WikiHtml {
    fn name(&self) -> &'static str {
        "wiki_html"
    }
    fn apply(&self, text: &str) -> String {
        TAG.replace_all(text, "").into_owned()
    }
}

impl Cleaner for SubtitleCues {
    fn name(&self) -> &'static str {
        "subs_cues"
    }
    fn apply(&self, text: &str) -> String {
        CUE.replace_all(text, "").into_owned()
    }
}

impl Cleaner for OcrLToI {
    fn name(&self) -> &'static str {
        "ocr_l_to_i"
    }
    fn apply(&self, text: &str) -> String {
        CAPS_WORD
            .replace_all(text, |c: &regex::Captures| {
                let w = &c[0];
                if w.bytes().any(|b| b.is_ascii_uppercase()) {
                    w.replace('l', "I")
                } else {
                    w.to_string()
                }
            })
            .into_owned()
    }
}

impl Cleaner for Whitespace {
    fn name(&self) -> &'static str {
        "whitespace"
    }
    fn apply(&self, text: &str) -> String {
        let normalized = text.replace("\r\n", "\n").replace('\r', "\n");
        let mut lines: Vec<String> = Vec::new();
        for line in normalized.split('\n') {
            let line = BLANKS.replace_all(line, " ").trim().to_string();
            if line.is_empty() && lines.last().is_none_or(|l| l.is_empty()) {
                continue;
            }
            lines.push(line);
        }
        while lines.last().is_some_and(|l| l.is_empty()) {
            lines.pop();
        }
        let mut out = lines.join("\n");
        if !out.is_empty() && normalized.ends_with('\n') {
            out.push('\n');
        }
        out
    }
}

/// All cleaning rules by name.
pub fn cleaners() -> Registry<dyn Cleaner> {
    let mut r: Registry<dyn Cleaner> = Registry::new("cleaning rule");
    r.register("wiki_html", |_| Ok(Box::new(WikiHtml)));
    r.register("subs_cues", |_| Ok(Box::new(SubtitleCues)));
    r.register("ocr_l_to_i", |_| Ok(Box::new(OcrLToI)));
    r.register("whitespace", |_| Ok(Box::new(Whitespace)));
    r
}

/// Rule names applied to `source`, in order.
pub fn rules_for(source: &SourceKind) -> Vec<&'static str> {
    let mut rules = match source {
        SourceKind::Wikipedia | SourceKind::SimpleWikipedia => vec!["wiki_html"],
        SourceKind::OpenSubtitles | SourceKind::Qed => vec!["subs_cues"],
        SourceKind::Gutenberg => vec!["ocr_l_to_i"],
        _ => vec![],
    };
    rules.push("whitespace");
    rules
}

const MAX_PASSES: usize = 16;

pub fn clean_document(doc: &RawDocument) -> Result<String> {
    let registry = cleaners();
    let rules = rules_for(&doc.source)
        .into_iter()
        .map(|n| registry.create(n, &()))
        .collect::<Result<Vec<_>>>()?;
    let mut text = doc.text.clone();
    for _ in 0..MAX_PASSES {
        let next = rules.iter().fold(text.clone(), |t, r| r.apply(&t));
        if next == text {
            break;
        }
        text = next;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clean(source: SourceKind, text: &str) -> String {
        clean_document(&RawDocument {
            source,
            text: text.into(),
            origin_path: "t".into(),
        })
        .unwrap()
    }

    #[test]
    fn rule_examples() {
        assert_eq!(clean(SourceKind::Wikipedia, "<b>Paris</b> is a city"), "Paris is a city");
        assert_eq!(clean(SourceKind::OpenSubtitles, "[LAUGHTER] Hello there"), "Hello there");
        assert_eq!(clean(SourceKind::Qed, "(applause) (music) Thanks\n[SIGHS] ok"), "Thanks\nok");
        assert_eq!(clean(SourceKind::Gutenberg, "STOP lT NOW"), "STOP IT NOW");
        assert_eq!(clean(SourceKind::Gutenberg, "hello lovely SAlD ALL"), "hello lovely SAID ALL");
        assert_eq!(clean(SourceKind::Aochildes, "  a \t b  \r\n\r\n\n\nc\n\n"), "a b\n\nc\n");
        assert_eq!(clean(SourceKind::Other("x".into()), "<b>kept</b> [kept]"), "<b>kept</b> [kept]");
    }

    fn any_source() -> impl Strategy<Value = SourceKind> {
        prop_oneof![
            prop::sample::select(SourceKind::KNOWN.to_vec()),
            "[a-z]{1,6}".prop_map(SourceKind::Other)
        ]
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(source in any_source(), text in r"[a-zA-Z lI<>/\[\]()\t\r\n.]{0,80}") {
            let once = clean(source.clone(), &text);
            prop_assert_eq!(clean(source, &once), once);
        }

        #[test]
        fn cleaning_never_grows(source in any_source(), text in r"[a-zA-Z lI<>/\[\]()\t\r\n.]{0,80}") {
            prop_assert!(clean(source, &text).len() <= text.len());
        }
    }
}
