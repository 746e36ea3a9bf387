use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ClassName;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub present: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmAnswer {
    pub raw_text: String,
    /// Exactly one entry per class.
    pub parsed: BTreeMap<ClassName, Verdict>,
}

fn marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\*\*\s*(wood|settlement)\s*\?\s*\*\*").expect("valid regex"))
}

fn parse_error(message: impl Into<String>, raw: &str) -> Error {
    Error::Parse {
        message: message.into(),
        raw: raw.to_string(),
    }
}

/// Parse the verdict following a class marker: `Yes: reason`, `[No] : reason`, ...
fn parse_tail(tail: &str) -> Option<Verdict> {
    let t = tail.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '[' | '-'));
    let word: String = t.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    let present = match word.to_ascii_lowercase().as_str() {
        "yes" => true,
        "no" => false,
        _ => return None,
    };
    let rest = t[word.len()..].trim_start_matches(|c: char| c.is_whitespace() || c == ']');
    // "Yes/No" echoes the template instead of answering.
    if rest.starts_with('/') {
        return None;
    }
    let reason = rest
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '-' | ','))
        .trim()
        .to_string();
    Some(Verdict { present, reason })
}

/// Extract one Yes/No verdict per class. Missing, repeated or unreadable
/// verdicts are errors; nothing defaults to "No".
pub fn parse_answer(raw_text: &str) -> Result<LlmAnswer> {
    let mut parsed = BTreeMap::new();
    for line in raw_text.lines() {
        let found: Vec<_> = marker().captures_iter(line).collect();
        if found.len() > 1 {
            return Err(parse_error("several class markers on one line", raw_text));
        }
        let Some(cap) = found.first() else { continue };
        let class: ClassName = cap[1].parse().expect("regex only matches class names");
        let tail = &line[cap.get(0).expect("whole match").end()..];
        let verdict = parse_tail(tail)
            .ok_or_else(|| parse_error(format!("no clear Yes/No for {class}"), raw_text))?;
        if parsed.insert(class, verdict).is_some() {
            return Err(parse_error(format!("{class} answered more than once"), raw_text));
        }
    }
    for class in ClassName::ALL {
        if !parsed.contains_key(&class) {
            return Err(parse_error(format!("missing answer for {class}"), raw_text));
        }
    }
    Ok(LlmAnswer {
        raw_text: raw_text.to_string(),
        parsed,
    })
}

/// Render verdicts in the requested answer structure.
pub fn format_answer(parsed: &BTreeMap<ClassName, Verdict>) -> String {
    ClassName::ALL
        .iter()
        .enumerate()
        .filter_map(|(i, class)| {
            parsed.get(class).map(|v| {
                let word = if v.present { "Yes" } else { "No" };
                format!("{}. **{}?** {word}: {}", i + 1, class.title(), v.reason)
            })
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn both_yes() {
        let a = parse_answer("1. **Wood?** Yes: clusters of circles\n2. **Settlement?** Yes: dotted patterns").unwrap();
        assert!(a.parsed[&ClassName::Wood].present);
        assert_eq!(a.parsed[&ClassName::Wood].reason, "clusters of circles");
        assert!(a.parsed[&ClassName::Settlement].present);
    }

    #[test]
    fn both_no_and_variants() {
        let a = parse_answer("1. **Wood?** No: plain\n2. **Settlement?** No: plain").unwrap();
        assert!(!a.parsed[&ClassName::Wood].present);
        assert!(!a.parsed[&ClassName::Settlement].present);
        let b = parse_answer("**wood?** [YES] : many rings\n**SETTLEMENT?**: no - nothing").unwrap();
        assert!(b.parsed[&ClassName::Wood].present);
        assert_eq!(b.parsed[&ClassName::Wood].reason, "many rings");
        assert!(!b.parsed[&ClassName::Settlement].present);
        assert_eq!(b.parsed[&ClassName::Settlement].reason, "nothing");
    }

    #[test]
    fn failures_carry_raw_text() {
        for raw in [
            "I cannot help with that",
            "1. **Wood?** Yes: x",
            "1. **Wood?** [Yes/No] : [reason]\n2. **Settlement?** [Yes/No] : [reason]",
            "1. **Wood?** Maybe\n2. **Settlement?** No",
            "1. **Wood?** Yes\n1. **Wood?** No\n2. **Settlement?** No",
            "**Wood?** Yes **Settlement?** No",
        ] {
            match parse_answer(raw) {
                Err(Error::Parse { raw: r, .. }) => assert_eq!(r, raw),
                other => panic!("{raw:?} gave {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(
            wood in any::<bool>(),
            settlement in any::<bool>(),
            r1 in "[A-Za-z0-9][A-Za-z0-9 ,.]{0,40}",
            r2 in "[A-Za-z0-9][A-Za-z0-9 ,.]{0,40}",
        ) {
            let mut parsed = BTreeMap::new();
            parsed.insert(ClassName::Wood, Verdict { present: wood, reason: r1.trim().to_string() });
            parsed.insert(ClassName::Settlement, Verdict { present: settlement, reason: r2.trim().to_string() });
            let text = format_answer(&parsed);
            prop_assert_eq!(parse_answer(&text).unwrap().parsed, parsed);
        }
    }
}
