//! Structured multi-clip prompts with character tags.
//!
//! Canonical form:
//!
//! ```text
//! Two video clips. Characters: Person1: a woman in a red coat. Person2: a man
//! with glasses. First clip: Person1 waves. Second clip: Person2 replies.
//! ```
//!
//! Tokens are counted by whitespace splitting; that count is what the
//! 256-token budget applies to.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOKEN_BUDGET: usize = 256;

const COUNT_WORDS: [&str; 8] = ["One", "Two", "Three", "Four", "Five", "Six", "Seven", "Eight"];
const ORDINALS: [&str; 8] = [
    "First", "Second", "Third", "Fourth", "Fifth", "Sixth", "Seventh", "Eighth",
];

static HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(\w+) video clips?\s*[.:]?").unwrap());
static CHARACTERS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bcharacters\s*:").unwrap());
static CLIP_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(first|second|third|fourth|fifth|sixth|seventh|eighth|(\d+)(?:st|nd|rd|th)) clip\s*:")
        .unwrap()
});
static TAG_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(Person\d+)\s*:").unwrap());
static MENTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bPerson\d+\b").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Character {
    pub tag: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub clip_count: usize,
    pub characters: Vec<Character>,
    pub clips: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    CountMismatch { declared: usize, found: usize },
    NoClips,
    BadTag { tag: String },
    DuplicateTag { tag: String },
    TagGap { position: usize, expected: String, found: String },
    UnknownTag { tag: String, clip: usize },
    EmptyField { field: String },
    NonCanonical { field: String },
    TokenBudget { tokens: usize, limit: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CountMismatch { declared, found } => {
                write!(f, "header announces {declared} clips but {found} are described")
            }
            Violation::NoClips => write!(f, "prompt describes no clips"),
            Violation::BadTag { tag } => write!(f, "tag {tag} does not match Person<N> with N ≥ 1"),
            Violation::DuplicateTag { tag } => write!(f, "tag {tag} declared more than once"),
            Violation::TagGap {
                position,
                expected,
                found,
            } => write!(f, "character {position} should be {expected}, found {found}"),
            Violation::UnknownTag { tag, clip } => {
                write!(f, "clip {clip} mentions undeclared tag {tag}")
            }
            Violation::EmptyField { field } => write!(f, "{field} is empty"),
            Violation::NonCanonical { field } => {
                write!(f, "{field} has stray whitespace, a trailing period, or a reserved marker")
            }
            Violation::TokenBudget { tokens, limit } => {
                write!(f, "rendered prompt has {tokens} tokens, budget is {limit}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("prompt is empty")]
    Empty,
    #[error("missing \"<N> video clips\" header")]
    MissingHeader,
    #[error("malformed prompt: {0}")]
    Format(String),
    #[error("clip {clip} mentions undeclared tag {tag}")]
    UnknownTag { tag: String, clip: usize },
    #[error("tag {0} declared more than once")]
    DuplicateTag(String),
    #[error("header announces {declared} clips but {found} are described")]
    CountMismatch { declared: usize, found: usize },
    #[error("prompt has {tokens} tokens, budget is {limit}")]
    TokenBudget { tokens: usize, limit: usize },
    #[error("invalid prompt: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn clean_field(s: &str) -> String {
    normalize(s.trim().trim_end_matches(|c: char| c == '.' || c.is_whitespace()))
}

fn parse_count(word: &str) -> Option<usize> {
    COUNT_WORDS
        .iter()
        .position(|w| w.eq_ignore_ascii_case(word))
        .map(|i| i + 1)
        .or_else(|| word.parse().ok())
}

fn count_word(n: usize) -> String {
    match n {
        1..=8 => COUNT_WORDS[n - 1].to_string(),
        _ => n.to_string(),
    }
}

/// `First` … `Eighth`, then `9th`, `10th`, `21st`, …
pub fn ordinal(n: usize) -> String {
    if (1..=8).contains(&n) {
        return ORDINALS[n - 1].to_string();
    }
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

fn ordinal_value(caps: &regex::Captures<'_>) -> usize {
    if let Some(d) = caps.get(2) {
        return d.as_str().parse().unwrap_or(0);
    }
    let word = caps.get(1).map_or("", |m| m.as_str());
    ORDINALS
        .iter()
        .position(|w| w.eq_ignore_ascii_case(word))
        .map_or(0, |i| i + 1)
}

fn tag_number(tag: &str) -> Option<usize> {
    let digits = tag.strip_prefix("Person")?;
    if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn has_reserved_marker(s: &str) -> bool {
    TAG_MARKER.is_match(s) || CLIP_MARKER.is_match(s) || CHARACTERS.is_match(s)
}

fn is_canonical(s: &str) -> bool {
    s == normalize(s) && !s.ends_with('.') && !has_reserved_marker(s)
}

/// Parses the template, whitespace-insensitively.
pub fn parse_prompt(text: &str) -> Result<StructuredPrompt, PromptError> {
    let text = normalize(text);
    if text.is_empty() {
        return Err(PromptError::Empty);
    }
    let header = HEADER.captures(&text).ok_or(PromptError::MissingHeader)?;
    let declared = parse_count(&header[1]).ok_or(PromptError::MissingHeader)?;
    let body = &text[header.get(0).expect("whole match").end()..];

    let markers: Vec<_> = CLIP_MARKER.captures_iter(body).collect();
    let first_clip = markers.first().map_or(body.len(), |c| c.get(0).unwrap().start());
    let head = &body[..first_clip];

    let characters = match CHARACTERS.find(head) {
        Some(m) => {
            if !head[..m.start()].trim().is_empty() {
                return Err(PromptError::Format(format!(
                    "unexpected text before Characters: {:?}",
                    head[..m.start()].trim()
                )));
            }
            parse_characters(&head[m.end()..])?
        }
        None if head.trim().is_empty() => Vec::new(),
        None => {
            return Err(PromptError::Format(format!(
                "unexpected text after header: {:?}",
                head.trim()
            )))
        }
    };

    let mut clips = Vec::with_capacity(markers.len());
    for (i, caps) in markers.iter().enumerate() {
        let n = ordinal_value(caps);
        if n != i + 1 {
            return Err(PromptError::Format(format!(
                "clip marker {:?} out of sequence, expected {} clip",
                &caps[0],
                ordinal(i + 1)
            )));
        }
        let start = caps.get(0).unwrap().end();
        let end = markers.get(i + 1).map_or(body.len(), |c| c.get(0).unwrap().start());
        clips.push(clean_field(&body[start..end]));
    }

    let declared_tags: BTreeSet<&str> = characters.iter().map(|c| c.tag.as_str()).collect();
    for (i, clip) in clips.iter().enumerate() {
        if let Some(m) = MENTION.find_iter(clip).find(|m| !declared_tags.contains(m.as_str())) {
            return Err(PromptError::UnknownTag {
                tag: m.as_str().to_string(),
                clip: i + 1,
            });
        }
    }
    if declared != clips.len() {
        return Err(PromptError::CountMismatch {
            declared,
            found: clips.len(),
        });
    }

    let sp = StructuredPrompt {
        clip_count: declared,
        characters,
        clips,
    };
    match validate(&sp) {
        Ok(()) => Ok(sp),
        Err(v) => match v.as_slice() {
            [Violation::TokenBudget { tokens, limit }] => Err(PromptError::TokenBudget {
                tokens: *tokens,
                limit: *limit,
            }),
            _ => Err(PromptError::Invalid(v)),
        },
    }
}

fn parse_characters(section: &str) -> Result<Vec<Character>, PromptError> {
    let markers: Vec<_> = TAG_MARKER.captures_iter(section).collect();
    let lead_end = markers.first().map_or(section.len(), |c| c.get(0).unwrap().start());
    if !section[..lead_end].trim().is_empty() {
        return Err(PromptError::Format(format!(
            "character entry without a tag: {:?}",
            section[..lead_end].trim()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(markers.len());
    for (i, caps) in markers.iter().enumerate() {
        let tag = caps[1].to_string();
        if !seen.insert(tag.clone()) {
            return Err(PromptError::DuplicateTag(tag));
        }
        let start = caps.get(0).unwrap().end();
        let end = markers.get(i + 1).map_or(section.len(), |c| c.get(0).unwrap().start());
        out.push(Character {
            tag,
            description: clean_field(&section[start..end]),
        });
    }
    Ok(out)
}

fn render_clip_list(sp: &StructuredPrompt, clip_text: impl Fn(&str) -> String) -> String {
    sp.clips
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{} clip: {}.", ordinal(i + 1), clip_text(c)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn render_unchecked(sp: &StructuredPrompt) -> String {
    let mut out = format!(
        "{} video clip{}.",
        count_word(sp.clip_count),
        if sp.clip_count == 1 { "" } else { "s" }
    );
    if !sp.characters.is_empty() {
        out.push_str(" Characters:");
        for c in &sp.characters {
            out.push_str(&format!(" {}: {}.", c.tag, c.description));
        }
    }
    out.push(' ');
    out.push_str(&render_clip_list(sp, str::to_string));
    out
}

/// Canonical text form; `parse_prompt(render_prompt(sp)) == sp`.
pub fn render_prompt(sp: &StructuredPrompt) -> Result<String, PromptError> {
    validate(sp).map_err(PromptError::Invalid)?;
    Ok(render_unchecked(sp))
}

/// The clip section of the canonical rendering, tags left in place.
pub fn render_clips(sp: &StructuredPrompt) -> Result<String, PromptError> {
    validate(sp).map_err(PromptError::Invalid)?;
    Ok(render_clip_list(sp, str::to_string))
}

/// Clip section with every tag replaced by its full description, the way
/// an untagged caption would read. Measurement baseline only.
pub fn expand_naive(sp: &StructuredPrompt) -> Result<String, PromptError> {
    validate(sp).map_err(PromptError::Invalid)?;
    Ok(render_clip_list(sp, |clip| {
        MENTION
            .replace_all(clip, |m: &regex::Captures<'_>| {
                sp.characters
                    .iter()
                    .find(|c| c.tag == m[0])
                    .map_or_else(|| m[0].to_string(), |c| c.description.clone())
            })
            .into_owned()
    }))
}

/// Every invariant violation, including the rendered token budget.
pub fn validate(sp: &StructuredPrompt) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if sp.clips.is_empty() {
        v.push(Violation::NoClips);
    }
    if sp.clip_count != sp.clips.len() {
        v.push(Violation::CountMismatch {
            declared: sp.clip_count,
            found: sp.clips.len(),
        });
    }
    let mut seen = BTreeSet::new();
    for (i, c) in sp.characters.iter().enumerate() {
        if tag_number(&c.tag).is_none() {
            v.push(Violation::BadTag { tag: c.tag.clone() });
        } else if c.tag != format!("Person{}", i + 1) {
            v.push(Violation::TagGap {
                position: i + 1,
                expected: format!("Person{}", i + 1),
                found: c.tag.clone(),
            });
        }
        if !seen.insert(c.tag.as_str()) {
            v.push(Violation::DuplicateTag { tag: c.tag.clone() });
        }
        let field = format!("description of {}", c.tag);
        if c.description.is_empty() {
            v.push(Violation::EmptyField { field });
        } else if !is_canonical(&c.description) {
            v.push(Violation::NonCanonical { field });
        }
    }
    for (i, clip) in sp.clips.iter().enumerate() {
        let field = format!("clip {}", i + 1);
        if clip.is_empty() {
            v.push(Violation::EmptyField { field });
        } else if !is_canonical(clip) {
            v.push(Violation::NonCanonical { field });
        }
        for m in MENTION.find_iter(clip) {
            if !seen.contains(m.as_str()) {
                v.push(Violation::UnknownTag {
                    tag: m.as_str().to_string(),
                    clip: i + 1,
                });
            }
        }
    }
    let tokens = token_count(&render_unchecked(sp));
    if tokens > TOKEN_BUDGET {
        v.push(Violation::TokenBudget {
            tokens,
            limit: TOKEN_BUDGET,
        });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Number of times `tag` appears across all clips.
pub fn tag_uses(sp: &StructuredPrompt, tag: &str) -> usize {
    sp.clips
        .iter()
        .map(|c| MENTION.find_iter(c).filter(|m| m.as_str() == tag).count())
        .sum()
}

const ADJECTIVES: [&str; 10] = [
    "tall", "young", "bearded", "smiling", "elderly", "curious", "tired", "cheerful", "quiet", "nervous",
];
const NOUNS: [&str; 8] = ["woman", "man", "chef", "student", "doctor", "singer", "child", "pilot"];
const DETAILS: [&str; 6] = [
    "in a red coat",
    "with glasses",
    "wearing a hat",
    "in a blue shirt",
    "with curly hair",
    "holding a cup",
];
const VERBS: [&str; 8] = ["talks", "waves", "laughs", "nods", "listens", "points", "sits", "sings"];
const SCENES: [&str; 6] = [
    "in a kitchen",
    "on a bench",
    "near the window",
    "in a garden",
    "at a desk",
    "under a lamp",
];

/// A random valid prompt: up to three characters with multi-word
/// descriptions and one to five clips that mention them.
pub fn random_prompt<R: Rng + ?Sized>(rng: &mut R) -> StructuredPrompt {
    let n_chars = rng.random_range(0..=3);
    let characters: Vec<Character> = (1..=n_chars)
        .map(|i| {
            let mut d = format!(
                "a {} {}",
                ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
                NOUNS[rng.random_range(0..NOUNS.len())]
            );
            if rng.random_bool(0.5) {
                d.push(' ');
                d.push_str(DETAILS[rng.random_range(0..DETAILS.len())]);
            }
            Character {
                tag: format!("Person{i}"),
                description: d,
            }
        })
        .collect();
    let n_clips = rng.random_range(1..=5);
    let clips = (0..n_clips)
        .map(|_| {
            let mut words = Vec::new();
            for _ in 0..rng.random_range(1..=3) {
                if n_chars > 0 && rng.random_bool(0.8) {
                    words.push(format!("Person{}", rng.random_range(1..=n_chars)));
                } else {
                    words.push("someone".to_string());
                }
                words.push(VERBS[rng.random_range(0..VERBS.len())].to_string());
            }
            words.push(SCENES[rng.random_range(0..SCENES.len())].to_string());
            words.join(" ")
        })
        .collect();
    StructuredPrompt {
        clip_count: n_clips,
        characters,
        clips,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG5: &str = "Two video clips. Characters: Person1: a woman in a red coat. \
        Person2: a man with glasses. First clip: Person1 waves. Second clip: Person2 replies.";

    fn sample() -> StructuredPrompt {
        parse_prompt(FIG5).unwrap()
    }

    #[test]
    fn parses_two_clip_template() {
        let sp = sample();
        assert_eq!(sp.clip_count, 2);
        assert_eq!(sp.characters.len(), 2);
        assert_eq!(sp.characters[0].description, "a woman in a red coat");
        assert_eq!(sp.clips, vec!["Person1 waves", "Person2 replies"]);
    }

    #[test]
    fn parses_minimal_prompt() {
        let sp = parse_prompt("One video clip. Characters: Person1: a chef. First clip: Person1 chops vegetables.")
            .unwrap();
        assert_eq!(sp.clip_count, 1);
        assert_eq!(sp.clips[0], "Person1 chops vegetables");
    }

    #[test]
    fn unknown_tag_names_tag_and_clip() {
        let err = parse_prompt(
            "Two video clips. Characters: Person1: a. Person2: b. First clip: Person1 waves. \
             Second clip: Person3 replies.",
        )
        .unwrap_err();
        assert_eq!(
            err,
            PromptError::UnknownTag {
                tag: "Person3".into(),
                clip: 2
            }
        );
    }

    #[test]
    fn structural_errors() {
        assert_eq!(parse_prompt("   "), Err(PromptError::Empty));
        assert_eq!(
            parse_prompt("Characters: Person1: a. First clip: x."),
            Err(PromptError::MissingHeader)
        );
        assert_eq!(
            parse_prompt("One video clip. Characters: Person1: a. Person1: b. First clip: x."),
            Err(PromptError::DuplicateTag("Person1".into()))
        );
        assert_eq!(
            parse_prompt("Three video clips. First clip: x. Second clip: y."),
            Err(PromptError::CountMismatch {
                declared: 3,
                found: 2
            })
        );
        assert!(matches!(
            parse_prompt("Two video clips. Second clip: x. First clip: y."),
            Err(PromptError::Format(_))
        ));
    }

    #[test]
    fn round_trip_and_determinism() {
        let sp = sample();
        let text = render_prompt(&sp).unwrap();
        assert_eq!(text, render_prompt(&sp).unwrap());
        assert_eq!(parse_prompt(&text).unwrap(), sp);
        assert_eq!(text, FIG5.split_whitespace().collect::<Vec<_>>().join(" "));
    }

    #[test]
    fn rendering_normalizes_whitespace() {
        let messy = "  two   video clips .\n Characters :\tPerson1:  a   woman.\n\nPerson2: a man .  \
                     first clip:   Person1   waves .  second clip: Person2 replies";
        let sp = parse_prompt(messy).unwrap();
        let text = render_prompt(&sp).unwrap();
        assert_eq!(
            text,
            "Two video clips. Characters: Person1: a woman. Person2: a man. First clip: Person1 waves. Second clip: Person2 replies."
        );
        assert_eq!(render_prompt(&parse_prompt(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn ordinals_beyond_eighth_use_digits() {
        assert_eq!(ordinal(9), "9th");
        assert_eq!(ordinal(11), "11th");
        assert_eq!(ordinal(21), "21st");
        let sp = StructuredPrompt {
            clip_count: 10,
            characters: vec![],
            clips: (0..10).map(|i| format!("scene {i}")).collect(),
        };
        let text = render_prompt(&sp).unwrap();
        assert!(text.starts_with("10 video clips."));
        assert!(text.contains("Eighth clip: scene 7. 9th clip: scene 8. 10th clip: scene 9."));
        assert_eq!(parse_prompt(&text).unwrap(), sp);
    }

    #[test]
    fn naive_expansion_repeats_descriptions() {
        let sp = StructuredPrompt {
            clip_count: 1,
            characters: vec![Character {
                tag: "Person1".into(),
                description: "a girl in yellow dress".into(),
            }],
            clips: vec!["Person1 waves then Person1 sits".into()],
        };
        let naive = expand_naive(&sp).unwrap();
        assert_eq!(naive.matches("a girl in yellow dress").count(), 2);
        assert!(token_count(&naive) > token_count(&render_clips(&sp).unwrap()));
    }

    #[test]
    fn naive_expansion_without_tags_matches_clip_section() {
        let sp = StructuredPrompt {
            clip_count: 2,
            characters: vec![Character {
                tag: "Person1".into(),
                description: "a chef".into(),
            }],
            clips: vec!["a busy kitchen".into(), "steam rises".into()],
        };
        assert_eq!(expand_naive(&sp).unwrap(), render_clips(&sp).unwrap());
    }

    #[test]
    fn validate_reports_budget_and_gaps() {
        assert_eq!(validate(&sample()), Ok(()));
        let long = StructuredPrompt {
            clip_count: 1,
            characters: vec![],
            clips: vec![vec!["word"; 300].join(" ")],
        };
        let v = validate(&long).unwrap_err();
        assert!(v.iter().any(|x| matches!(x, Violation::TokenBudget { limit: 256, .. })));

        let gap = StructuredPrompt {
            clip_count: 1,
            characters: vec![
                Character {
                    tag: "Person1".into(),
                    description: "a".into(),
                },
                Character {
                    tag: "Person3".into(),
                    description: "b".into(),
                },
            ],
            clips: vec!["Person3 talks".into()],
        };
        let v = validate(&gap).unwrap_err();
        assert!(v.iter().any(|x| matches!(x, Violation::TagGap { position: 2, .. })));
    }

    #[test]
    fn over_budget_text_is_rejected_by_parser() {
        let text = format!("One video clip. First clip: {}.", vec!["word"; 260].join(" "));
        assert!(matches!(parse_prompt(&text), Err(PromptError::TokenBudget { limit: 256, .. })));
    }

    #[test]
    fn descriptions_never_leak_into_clips() {
        let sp = sample();
        let text = render_prompt(&sp).unwrap();
        let clips_at = text.find("First clip:").unwrap();
        for c in &sp.characters {
            assert_eq!(text.matches(&c.description).count(), 1);
            assert!(!text[clips_at..].contains(&c.description));
        }
    }

    #[test]
    fn counts_tag_uses() {
        let sp = sample();
        assert_eq!(tag_uses(&sp, "Person1"), 1);
        assert_eq!(tag_uses(&sp, "Person2"), 1);
    }
}
