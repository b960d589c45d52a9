//! Structured three-section analysis answers.
//!
//! Canonical text form:
//!
//! ```text
//! Image description: <free text>
//! Forgery reasoning: <free text>
//! Analysis result: <real|fake>; probability: <p>; forgery type: <type>
//! ```
//!
//! Sections are introduced by line-initial headers and run until the next
//! header line or end of text. Probabilities may be decimals in `[0, 1]` or
//! percentages (`85%`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Authenticity, ForgeryType};

pub const DESCRIPTION_HEADER: &str = "Image description:";
pub const REASONING_HEADER: &str = "Forgery reasoning:";
pub const RESULT_HEADER: &str = "Analysis result:";
pub const MASK_PLACEHOLDER: &str = "[MASKED]";

const HEADERS: [&str; 3] = [DESCRIPTION_HEADER, REASONING_HEADER, RESULT_HEADER];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnswerError {
    #[error("format error: {0}")]
    Format(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("consistency error: {0}")]
    Consistency(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub label: Authenticity,
    pub probability: f64,
    pub forgery_type: ForgeryType,
}

impl AnalysisResult {
    pub fn new(
        label: Authenticity,
        probability: f64,
        forgery_type: ForgeryType,
    ) -> Result<Self, AnswerError> {
        let r = Self {
            label,
            probability,
            forgery_type,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), AnswerError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(AnswerError::Value(format!(
                "probability {} outside [0, 1]",
                self.probability
            )));
        }
        match (self.label, self.forgery_type) {
            (Authenticity::Real, ForgeryType::None) => Ok(()),
            (Authenticity::Real, t) => Err(AnswerError::Consistency(format!(
                "label real with forgery type {t}"
            ))),
            (Authenticity::Fake, ForgeryType::None) => Err(AnswerError::Consistency(
                "label fake with forgery type none".into(),
            )),
            _ => Ok(()),
        }
    }

    fn render(&self) -> String {
        format!(
            "{}; probability: {}; forgery type: {}",
            self.label,
            self.probability,
            self.forgery_type.phrase()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfaCotAnswer {
    pub description: String,
    pub reasoning: String,
    pub result: AnalysisResult,
    pub raw_text: String,
}

impl FfaCotAnswer {
    /// Builds a canonical answer; `raw_text` is set to the serialization.
    pub fn new(
        description: impl Into<String>,
        reasoning: impl Into<String>,
        result: AnalysisResult,
    ) -> Result<Self, AnswerError> {
        let description = description.into();
        let reasoning = reasoning.into();
        check_section("description", &description)?;
        check_section("reasoning", &reasoning)?;
        result.validate()?;
        let raw_text = render(&description, &reasoning, &result.render());
        Ok(Self {
            description,
            reasoning,
            result,
            raw_text,
        })
    }

    pub fn verdict(&self) -> Authenticity {
        self.result.label
    }
}

fn check_section(name: &str, body: &str) -> Result<(), AnswerError> {
    if body.trim().is_empty() {
        return Err(AnswerError::Format(format!("empty {name}")));
    }
    if body.trim() != body {
        return Err(AnswerError::Format(format!(
            "{name} has leading or trailing whitespace"
        )));
    }
    if body.lines().any(|l| header_at(l).is_some()) {
        return Err(AnswerError::Format(format!(
            "{name} contains a section header at line start"
        )));
    }
    Ok(())
}

fn render(description: &str, reasoning: &str, result_body: &str) -> String {
    format!(
        "{DESCRIPTION_HEADER} {description}\n{REASONING_HEADER} {reasoning}\n{RESULT_HEADER} {result_body}"
    )
}

fn header_at(line: &str) -> Option<usize> {
    HEADERS.iter().position(|h| line.starts_with(h))
}

/// Canonical text of an answer.
pub fn serialize(answer: &FfaCotAnswer) -> String {
    render(
        &answer.description,
        &answer.reasoning,
        &answer.result.render(),
    )
}

/// Splits text into the three section bodies, enforcing order and uniqueness.
fn split_sections(text: &str) -> Result<[String; 3], AnswerError> {
    let mut bodies: [Option<Vec<&str>>; 3] = [None, None, None];
    let mut current: Option<usize> = None;
    let mut last_index: Option<usize> = None;
    for line in text.lines() {
        if let Some(h) = header_at(line) {
            if bodies[h].is_some() {
                return Err(AnswerError::Format(format!(
                    "duplicated section `{}`",
                    HEADERS[h]
                )));
            }
            if last_index.is_some_and(|prev| h < prev) {
                return Err(AnswerError::Format(format!(
                    "section `{}` out of order",
                    HEADERS[h]
                )));
            }
            bodies[h] = Some(vec![&line[HEADERS[h].len()..]]);
            current = Some(h);
            last_index = Some(h);
        } else if let Some(c) = current {
            bodies[c].as_mut().expect("current section open").push(line);
        } else if !line.trim().is_empty() {
            return Err(AnswerError::Format(
                "text before the first section header".into(),
            ));
        }
    }
    let mut out: [String; 3] = Default::default();
    for (i, b) in bodies.into_iter().enumerate() {
        let lines =
            b.ok_or_else(|| AnswerError::Format(format!("missing section `{}`", HEADERS[i])))?;
        let body = lines.join("\n").trim().to_string();
        if body.is_empty() {
            return Err(AnswerError::Format(format!(
                "empty section `{}`",
                HEADERS[i]
            )));
        }
        out[i] = body;
    }
    Ok(out)
}

fn parse_probability(s: &str) -> Result<f64, AnswerError> {
    let s = s.trim();
    let (num, scale) = match s.strip_suffix('%') {
        Some(n) => (n.trim(), 100.0),
        None => (s, 1.0),
    };
    let v: f64 = num
        .parse()
        .map_err(|_| AnswerError::Value(format!("unparseable probability `{s}`")))?;
    let p = v / scale;
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(AnswerError::Value(format!(
            "probability `{s}` outside [0, 1]"
        )));
    }
    Ok(p)
}

fn strip_key<'a>(part: &'a str, key: &str) -> Result<&'a str, AnswerError> {
    let trimmed = part.trim();
    let lower = trimmed.to_ascii_lowercase();
    if !lower.starts_with(key) {
        return Err(AnswerError::Format(format!("expected `{key}` in result")));
    }
    let rest = trimmed[key.len()..].trim_start();
    rest.strip_prefix(':')
        .map(str::trim)
        .ok_or_else(|| AnswerError::Format(format!("expected `:` after `{key}`")))
}

/// Parses the body of the result section into (label, probability, type).
pub fn parse_result_body(body: &str) -> Result<AnalysisResult, AnswerError> {
    let body = body.trim().trim_end_matches('.');
    let parts: Vec<&str> = body.split(';').collect();
    if parts.len() != 3 {
        return Err(AnswerError::Format(format!(
            "result section needs 3 `;`-separated fields, found {}",
            parts.len()
        )));
    }
    let label = Authenticity::parse_loose(parts[0])
        .ok_or_else(|| AnswerError::Value(format!("unknown label `{}`", parts[0].trim())))?;
    let probability = parse_probability(strip_key(parts[1], "probability")?)?;
    let type_text = strip_key(parts[2], "forgery type")?;
    let forgery_type = ForgeryType::from_phrase(type_text)
        .ok_or_else(|| AnswerError::Value(format!("unknown forgery type `{type_text}`")))?;
    let result = AnalysisResult {
        label,
        probability,
        forgery_type,
    };
    result.validate()?;
    Ok(result)
}

/// Parses generator output into a structured answer.
pub fn parse(text: &str) -> Result<FfaCotAnswer, AnswerError> {
    let [description, reasoning, result_body] = split_sections(text)?;
    let result = parse_result_body(&result_body)?;
    Ok(FfaCotAnswer {
        description,
        reasoning,
        result,
        raw_text: text.to_string(),
    })
}

/// An answer whose result section has been replaced by [`MASK_PLACEHOLDER`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedAnswer {
    pub description: String,
    pub reasoning: String,
}

impl MaskedAnswer {
    pub fn render(&self) -> String {
        render(&self.description, &self.reasoning, MASK_PLACEHOLDER)
    }
}

impl From<&FfaCotAnswer> for MaskedAnswer {
    fn from(a: &FfaCotAnswer) -> Self {
        Self {
            description: a.description.clone(),
            reasoning: a.reasoning.clone(),
        }
    }
}

/// Masked serialization: the verdict, probability and type are hidden.
pub fn mask_result(answer: &FfaCotAnswer) -> String {
    MaskedAnswer::from(answer).render()
}

/// Parses text in masked shape (section three must be the placeholder).
pub fn parse_masked(text: &str) -> Result<MaskedAnswer, AnswerError> {
    let [description, reasoning, result_body] = split_sections(text)?;
    if result_body != MASK_PLACEHOLDER {
        return Err(AnswerError::Format(
            "result section is not the mask placeholder".into(),
        ));
    }
    Ok(MaskedAnswer {
        description,
        reasoning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> FfaCotAnswer {
        FfaCotAnswer::new(
            "A frontal face of an adult under soft light.",
            "Skin texture uniform; no blending seams.",
            AnalysisResult::new(Authenticity::Real, 0.9, ForgeryType::None).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn serialize_has_three_headers() {
        let text = serialize(&sample());
        assert_eq!(
            text,
            "Image description: A frontal face of an adult under soft light.\n\
             Forgery reasoning: Skin texture uniform; no blending seams.\n\
             Analysis result: real; probability: 0.9; forgery type: none"
        );
        assert_eq!(parse(&text).unwrap(), sample());
    }

    #[test]
    fn reordered_sections_fail() {
        let text = "Forgery reasoning: r\nImage description: d\nAnalysis result: real; probability: 0.9; forgery type: none";
        assert!(matches!(parse(text), Err(AnswerError::Format(_))));
    }

    #[test]
    fn duplicated_and_missing_sections_fail() {
        let dup = "Image description: d\nImage description: e\nForgery reasoning: r\nAnalysis result: real; probability: 0.9; forgery type: none";
        assert!(matches!(parse(dup), Err(AnswerError::Format(_))));
        let missing =
            "Image description: d\nAnalysis result: real; probability: 0.9; forgery type: none";
        assert!(matches!(parse(missing), Err(AnswerError::Format(_))));
    }

    #[test]
    fn percentage_and_case_are_normalized() {
        let text = "Image description: d\nForgery reasoning: r\nAnalysis result: FAKE; probability: 85%; forgery type: identity exchange";
        let a = parse(text).unwrap();
        assert_eq!(a.result.label, Authenticity::Fake);
        assert_eq!(a.result.probability, 0.85);
        assert_eq!(a.result.forgery_type, ForgeryType::IdentityExchange);
    }

    #[test]
    fn out_of_range_probability_is_value_error() {
        let text = "Image description: d\nForgery reasoning: r\nAnalysis result: fake; probability: 1.7; forgery type: identity exchange";
        assert!(matches!(parse(text), Err(AnswerError::Value(_))));
        let pct = text.replace("1.7", "140%");
        assert!(matches!(parse(&pct), Err(AnswerError::Value(_))));
    }

    #[test]
    fn unknown_label_and_inconsistency() {
        let bad = "Image description: d\nForgery reasoning: r\nAnalysis result: maybe; probability: 0.5; forgery type: none";
        assert!(matches!(parse(bad), Err(AnswerError::Value(_))));
        let inc = "Image description: d\nForgery reasoning: r\nAnalysis result: real; probability: 0.5; forgery type: entire face synthesis";
        assert!(matches!(parse(inc), Err(AnswerError::Consistency(_))));
    }

    #[test]
    fn multiline_sections_end_at_next_header() {
        let text = "Image description: line one\nline two\n\nForgery reasoning: r1\n  r2\nAnalysis result: real; probability: 0.7; forgery type: none\n";
        let a = parse(text).unwrap();
        assert_eq!(a.description, "line one\nline two");
        assert_eq!(a.reasoning, "r1\n  r2");
    }

    #[test]
    fn masking_hides_the_result() {
        let a = sample();
        let mut b = a.clone();
        b.result = AnalysisResult::new(Authenticity::Fake, 0.61, ForgeryType::EntireFaceSynthesis)
            .unwrap();
        assert_eq!(mask_result(&a), mask_result(&b));
        let masked = parse_masked(&mask_result(&a)).unwrap();
        assert_eq!(masked.description, a.description);
        assert_eq!(masked.reasoning, a.reasoning);
        assert!(parse(&mask_result(&a)).is_err());
    }

    fn section_text() -> impl Strategy<Value = String> {
        "[A-Za-z0-9 ,.;'()-]{1,60}(\n[A-Za-z0-9 ,.;'()-]{1,40}){0,2}"
            .prop_map(|s| s.trim().to_string())
            .prop_filter("non-empty", |s| !s.is_empty())
    }

    fn result() -> impl Strategy<Value = AnalysisResult> {
        (0usize..4, 0.0f64..=1.0).prop_map(|(t, p)| {
            let ft = ForgeryType::ALL[t];
            let label = if ft == ForgeryType::None {
                Authenticity::Real
            } else {
                Authenticity::Fake
            };
            AnalysisResult::new(label, p, ft).unwrap()
        })
    }

    proptest! {
        #[test]
        fn round_trip(d in section_text(), r in section_text(), res in result()) {
            let a = FfaCotAnswer::new(d, r, res).unwrap();
            prop_assert_eq!(parse(&serialize(&a)).unwrap(), a);
        }

        #[test]
        fn serialize_is_injective(
            d1 in section_text(), r1 in section_text(), x1 in result(),
            d2 in section_text(), r2 in section_text(), x2 in result(),
        ) {
            let a = FfaCotAnswer::new(d1, r1, x1).unwrap();
            let b = FfaCotAnswer::new(d2, r2, x2).unwrap();
            let same = a.description == b.description && a.reasoning == b.reasoning && a.result == b.result;
            prop_assert_eq!(serialize(&a) == serialize(&b), same);
        }

        #[test]
        fn masking_is_idempotent(d in section_text(), r in section_text(), res in result()) {
            let a = FfaCotAnswer::new(d, r, res).unwrap();
            let once = mask_result(&a);
            let twice = parse_masked(&once).unwrap().render();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn parse_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse(&text);
            let _ = parse_masked(&text);
        }

        #[test]
        fn parse_never_panics_on_near_misses(
            d in section_text(), noise in "[A-Za-z:;%. 0-9]{0,40}"
        ) {
            let text = format!("Image description: {d}\nForgery reasoning: x\nAnalysis result: {noise}");
            let _ = parse(&text);
        }
    }
}
