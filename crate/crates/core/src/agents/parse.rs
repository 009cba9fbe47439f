//! Line-tagged reply grammars.

use std::ops::Range;

use crate::domain::{Action, ActionOutput, Verdict};

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOperator {
    pub output: ActionOutput,
    /// Bytes of the action type name inside the reply.
    pub action_type_span: Range<usize>,
}

/// Lines with their byte offsets.
fn lines(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        out.push((offset, raw.trim_end_matches(['\n', '\r'])));
        offset += raw.len();
    }
    out
}

/// If `line` starts with `tag:` (any case, ignoring markdown emphasis),
/// returns the offset within `line` where the value begins.
fn tag_value(line: &str, tag: &str) -> Option<usize> {
    let lead = line.len() - line.trim_start_matches([' ', '\t', '*', '#', '-', '>']).len();
    let body = &line[lead..];
    let head = body.get(..tag.len())?;
    if !head.eq_ignore_ascii_case(tag) {
        return None;
    }
    let after = &body[tag.len()..];
    let after_emph = after.trim_start_matches('*');
    let colon = after_emph.strip_prefix(':')?;
    let colon = colon.trim_start_matches('*');
    Some(line.len() - colon.len())
}

pub fn parse_operator(reply: &str) -> Result<ParsedOperator, String> {
    let ls = lines(reply);
    let find = |tag: &str| ls.iter().position(|(_, l)| tag_value(l, tag).is_some());
    let thought_at = find("Thought").ok_or("missing `Thought:` line")?;
    let action_at = find("Action").ok_or("missing `Action:` line")?;
    let desc_at = find("Description").ok_or("missing `Description:` line")?;
    if !(thought_at < action_at && action_at < desc_at) {
        return Err("expected Thought, Action and Description in that order".into());
    }

    let collect = |from: usize, to: usize, tag: &str| {
        let (_, first) = ls[from];
        let mut parts = vec![first[tag_value(first, tag).unwrap()..].trim().to_string()];
        parts.extend(ls[from + 1..to].iter().map(|(_, l)| l.trim().to_string()));
        parts.retain(|p| !p.is_empty());
        parts.join("\n")
    };
    let thought = collect(thought_at, action_at, "Thought");
    let description = collect(desc_at, ls.len(), "Description");
    if description.is_empty() {
        return Err("empty description".into());
    }

    // The action object is on the Action line or the next non-empty line.
    let (line_off, line) = ls[action_at];
    let value_off = tag_value(line, "Action").unwrap();
    let candidates = std::iter::once((line_off + value_off, &line[value_off..]))
        .chain(ls[action_at + 1..desc_at].iter().map(|(o, l)| (*o, *l)));
    let (json_off, json) = candidates
        .filter_map(|(off, text)| {
            let start = text.find('{')?;
            let end = text.rfind('}')?;
            (end > start).then(|| (off + start, &text[start..=end]))
        })
        .next()
        .ok_or("no JSON object after `Action:`")?;
    let action = Action::parse(json).map_err(|e| format!("invalid action: {e}"))?;
    let span = action_type_span(json).ok_or("cannot locate the action_type value")?;
    let span = json_off + span.start..json_off + span.end;
    Ok(ParsedOperator { output: ActionOutput { thought, action, description }, action_type_span: span })
}

/// Byte range of the `action_type` string value inside a JSON object text.
pub fn action_type_span(json: &str) -> Option<Range<usize>> {
    let key = json.find("\"action_type\"")?;
    let mut i = key + "\"action_type\"".len();
    let bytes = json.as_bytes();
    let skip_ws = |i: &mut usize| {
        while *i < bytes.len() && bytes[*i].is_ascii_whitespace() {
            *i += 1;
        }
    };
    skip_ws(&mut i);
    if bytes.get(i) != Some(&b':') {
        return None;
    }
    i += 1;
    skip_ws(&mut i);
    if bytes.get(i) != Some(&b'"') {
        return None;
    }
    let start = i + 1;
    let end = start + json[start..].find('"')?;
    (end > start).then_some(start..end)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReflection {
    pub verdict: Verdict,
    pub explanation: String,
    pub suggestion: Option<String>,
}

/// `VERDICT: OK|ERROR|INCOMPLETE`, free-text explanation, optional
/// `SUGGESTION:`. `None` when there is no verdict line.
pub fn parse_reflection(reply: &str) -> Option<ParsedReflection> {
    let ls = lines(reply);
    let mut verdict = None;
    let mut explanation = Vec::new();
    let mut suggestion: Vec<String> = Vec::new();
    let mut in_suggestion = false;
    for (_, line) in &ls {
        if verdict.is_none() {
            if let Some(at) = tag_value(line, "VERDICT") {
                let word: String = line[at..]
                    .trim()
                    .chars()
                    .take_while(|c| c.is_ascii_alphabetic())
                    .collect::<String>()
                    .to_ascii_uppercase();
                verdict = Some(match word.as_str() {
                    "OK" => Verdict::Ok,
                    "ERROR" => Verdict::Error,
                    "INCOMPLETE" => Verdict::Incomplete,
                    _ => return None,
                });
                let rest = line[at..].trim().trim_start_matches(|c: char| c.is_ascii_alphabetic());
                let rest = rest.trim_start_matches(['.', ':', ',', '-', ' ']).trim();
                if !rest.is_empty() {
                    explanation.push(rest.to_string());
                }
                continue;
            }
            continue;
        }
        if let Some(at) = tag_value(line, "SUGGESTION") {
            in_suggestion = true;
            suggestion.push(line[at..].trim().to_string());
            continue;
        }
        let text = match tag_value(line, "EXPLANATION") {
            Some(at) => line[at..].trim(),
            None => line.trim(),
        };
        if text.is_empty() {
            continue;
        }
        if in_suggestion {
            suggestion.push(text.to_string());
        } else {
            explanation.push(text.to_string());
        }
    }
    let verdict = verdict?;
    let suggestion = suggestion.join(" ").trim().to_string();
    Some(ParsedReflection {
        verdict,
        explanation: explanation.join(" "),
        suggestion: (!suggestion.is_empty()).then_some(suggestion),
    })
}

/// Text after `tag:` through the end of the reply, or `None` without the tag.
pub fn tagged_text(reply: &str, tag: &str) -> Option<String> {
    let ls = lines(reply);
    let at = ls.iter().position(|(_, l)| tag_value(l, tag).is_some())?;
    let (_, first) = ls[at];
    let mut parts = vec![first[tag_value(first, tag).unwrap()..].trim()];
    parts.extend(ls[at + 1..].iter().map(|(_, l)| l.trim()));
    Some(parts.into_iter().filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" "))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryBullet {
    pub text: String,
    pub tags: Vec<String>,
}

/// Bulleted knowledge items; `Some(vec![])` for `NONE`, `None` when the
/// reply has neither.
pub fn parse_summary(reply: &str) -> Option<Vec<SummaryBullet>> {
    let trimmed = reply.trim().trim_end_matches('.');
    if trimmed.eq_ignore_ascii_case("none") {
        return Some(Vec::new());
    }
    let mut items = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        let body = if let Some(b) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")).or_else(|| line.strip_prefix("• ")) {
            b
        } else {
            let digits = line.chars().take_while(char::is_ascii_digit).count();
            match line[digits..].strip_prefix(". ").or_else(|| line[digits..].strip_prefix(") ")) {
                Some(b) if digits > 0 => b,
                _ => continue,
            }
        };
        let (text, tags) = match body.rfind("[tags:") {
            Some(at) if body.trim_end().ends_with(']') => {
                let inner = body[at + "[tags:".len()..].trim_end().trim_end_matches(']');
                let tags = inner.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
                (body[..at].trim().to_string(), tags)
            }
            _ => (body.trim().to_string(), Vec::new()),
        };
        if !text.is_empty() {
            items.push(SummaryBullet { text, tags });
        }
    }
    (!items.is_empty()).then_some(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Point;

    const OP: &str = "Thought: The add button is at the bottom.\nAction: {\"action_type\": \"click\", \"coordinate\": [540, 1200]}\nDescription: Tap the add button.";

    #[test]
    fn operator_grammar() {
        let p = parse_operator(OP).unwrap();
        assert_eq!(p.output.action, Action::Click { coordinate: Point::new(540, 1200) });
        assert_eq!(p.output.thought, "The add button is at the bottom.");
        assert_eq!(p.output.description, "Tap the add button.");
        assert_eq!(&OP[p.action_type_span], "click");
    }

    #[test]
    fn operator_tolerates_markdown_and_next_line_json() {
        let reply = "**Thought:** hmm\n**Action:**\n```\n{\"action_type\": \"clear_text\"}\n```\n**Description:** Clear it.";
        let p = parse_operator(reply).unwrap();
        assert_eq!(p.output.action, Action::ClearText);
        assert_eq!(&reply[p.action_type_span], "clear_text");
    }

    #[test]
    fn operator_missing_parts() {
        assert!(parse_operator("Thought: x\nDescription: y").unwrap_err().contains("Action"));
        assert!(parse_operator("Thought: x\nAction: {\"action_type\": \"wait\"}\nDescription: y").is_err());
        assert!(parse_operator("Thought: x\nAction: {\"action_type\": \"clear_text\"}\nDescription:").is_err());
    }

    #[test]
    fn reflection_grammar() {
        let r = parse_reflection("VERDICT: ERROR\nThe input box still shows the default name.\nSUGGESTION: Clear the field first.").unwrap();
        assert_eq!(r.verdict, Verdict::Error);
        assert_eq!(r.explanation, "The input box still shows the default name.");
        assert_eq!(r.suggestion.as_deref(), Some("Clear the field first."));
        assert_eq!(parse_reflection("VERDICT: OK").unwrap().verdict, Verdict::Ok);
        assert_eq!(parse_reflection("verdict: incomplete - the time was never set").unwrap().explanation, "the time was never set");
        assert_eq!(parse_reflection("Looks fine to me."), None);
        assert_eq!(parse_reflection("VERDICT: MAYBE"), None);
    }

    #[test]
    fn summary_grammar() {
        let items = parse_summary("- Swipe left to delete a task [tags: delete, swipe]\n- The flag icon sets priority").unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].tags, ["delete", "swipe"]);
        assert_eq!(items[1].text, "The flag icon sets priority");
        assert_eq!(parse_summary("NONE"), Some(vec![]));
        assert_eq!(parse_summary("1. numbered works").unwrap()[0].text, "numbered works");
        assert_eq!(parse_summary("just prose"), None);
    }

    #[test]
    fn tagged() {
        assert_eq!(tagged_text("GUIDANCE: try the three-dot menu", "GUIDANCE").as_deref(), Some("try the three-dot menu"));
        assert_eq!(tagged_text("nothing", "Progress"), None);
    }
}
