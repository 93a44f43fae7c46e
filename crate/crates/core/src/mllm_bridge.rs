//! Prompt templates for a downstream multimodal language model and parsing
//! of its grounded text responses. No model is run here; `<image>` always
//! binds to a reference into an exported feature file.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::BoundingBox;
use crate::error::{Error, Result};

/// The registry shipped with the crate.
pub const BUILTIN_PROMPTS: &str = include_str!("../assets/prompts.txt");

pub const DEFAULT_SYSTEM_MESSAGE: &str =
    "You are an assistant that answers questions about a visual scene given as brain-derived features.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Captioning,
    Rec,
    SpottingCaptioning,
    Qa,
    QaCot,
    QaCotBox,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Captioning,
        Task::Rec,
        Task::SpottingCaptioning,
        Task::Qa,
        Task::QaCot,
        Task::QaCotBox,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Task::Captioning => "captioning",
            Task::Rec => "rec",
            Task::SpottingCaptioning => "spotting_captioning",
            Task::Qa => "qa",
            Task::QaCot => "qa_cot",
            Task::QaCotBox => "qa_cot_box",
        }
    }

    pub fn required_placeholders(self) -> &'static [Placeholder] {
        match self {
            Task::Captioning | Task::SpottingCaptioning => &[Placeholder::Image],
            Task::Rec => &[Placeholder::Image, Placeholder::Expr],
            Task::Qa | Task::QaCot | Task::QaCotBox => &[Placeholder::Image, Placeholder::Question],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::Argument(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    Image,
    Expr,
    Question,
}

impl Placeholder {
    pub const ALL: [Placeholder; 3] = [Placeholder::Image, Placeholder::Expr, Placeholder::Question];

    pub fn token(self) -> &'static str {
        match self {
            Placeholder::Image => "<image>",
            Placeholder::Expr => "<expr>",
            Placeholder::Question => "<question>",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: Task,
    pub template: String,
}

impl PromptTemplate {
    pub fn new(task: Task, template: impl Into<String>) -> Result<Self> {
        let t = Self {
            task,
            template: template.into(),
        };
        for p in task.required_placeholders() {
            if !t.template.contains(p.token()) {
                return Err(Error::Format(format!(
                    "{task} template lacks {}: {}",
                    p.token(),
                    t.template
                )));
            }
        }
        Ok(t)
    }

    pub fn placeholders(&self) -> Vec<Placeholder> {
        Placeholder::ALL
            .into_iter()
            .filter(|p| self.template.contains(p.token()))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptRegistry {
    templates: BTreeMap<Task, Vec<PromptTemplate>>,
}

impl PromptRegistry {
    /// Parses `task<TAB>template` lines; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, template) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("prompt registry line {}: missing tab", i + 1)))?;
            reg.add(PromptTemplate::new(tag.trim().parse()?, template.trim())?);
        }
        Ok(reg)
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PROMPTS).expect("shipped registry is well formed")
    }

    pub fn add(&mut self, template: PromptTemplate) {
        self.templates.entry(template.task).or_default().push(template);
    }

    pub fn templates(&self, task: Task) -> &[PromptTemplate] {
        self.templates.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, task: Task, index: usize) -> Result<&PromptTemplate> {
        self.templates(task)
            .get(index)
            .ok_or_else(|| Error::Argument(format!("no {task} template #{index}")))
    }

    pub fn len(&self) -> usize {
        self.templates.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row `index` of an exported feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub path: String,
    pub index: usize,
}

impl fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<features:{}#{}>", self.path, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptFields {
    pub image: Option<FeatureRef>,
    pub expr: Option<String>,
    pub question: Option<String>,
}

impl PromptFields {
    pub fn image(image: FeatureRef) -> Self {
        Self {
            image: Some(image),
            ..Self::default()
        }
    }

    fn binding(&self, p: Placeholder) -> Option<String> {
        match p {
            Placeholder::Image => self.image.as_ref().map(ToString::to_string),
            Placeholder::Expr => self.expr.clone(),
            Placeholder::Question => self.question.clone(),
        }
    }
}

/// The instruction with every placeholder substituted.
pub fn render_instruction(template: &PromptTemplate, fields: &PromptFields) -> Result<String> {
    let mut out = template.template.clone();
    for p in template.placeholders() {
        let value = fields
            .binding(p)
            .ok_or_else(|| Error::Argument(format!("placeholder {} is unbound", p.token())))?;
        out = out.replace(p.token(), &value);
    }
    Ok(out)
}

/// A full single-turn conversation: system message, the user instruction and
/// an open assistant turn.
pub fn render_prompt(template: &PromptTemplate, fields: &PromptFields, system: &str) -> Result<String> {
    let instruction = render_instruction(template, fields)?;
    Ok(format!("{system}\nuser: {instruction}\nassistant:"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedSpan {
    pub span: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundedParse {
    pub pairs: Vec<GroundedSpan>,
    pub warnings: Vec<String>,
}

const CONNECTIVES: &[&str] = &["and", "or", "with", "plus"];

/// The noun phrase before a bracket: text since the last bracket or clause
/// punctuation, minus leading connectives.
fn span_before(segment: &str) -> String {
    let tail = segment
        .rsplit([',', '.', ';', ':', '!', '?', '(', ')'])
        .next()
        .unwrap_or("");
    let mut words: Vec<&str> = tail.split_whitespace().collect();
    while words
        .first()
        .is_some_and(|w| CONNECTIVES.contains(&w.to_lowercase().as_str()))
    {
        words.remove(0);
    }
    words.join(" ")
}

fn parse_tuple(inner: &str, warnings: &mut Vec<String>) -> Option<BoundingBox> {
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        warnings.push(format!("skipped `[{inner}]`: expected 4 coordinates"));
        return None;
    }
    let mut v = [0.0f64; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        match p.parse::<f64>() {
            Ok(x) if x.is_finite() => *slot = x,
            _ => {
                warnings.push(format!("skipped `[{inner}]`: `{p}` is not a decimal"));
                return None;
            }
        }
    }
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        warnings.push(format!("clamped `[{inner}]` to the unit square"));
        v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    }
    Some(BoundingBox::new(v[0], v[1], v[2], v[3]))
}

/// Extracts every `[x1,y1,x2,y2]` tuple with its preceding span, keeping
/// the warnings for skipped or clamped tuples.
pub fn parse_grounded_detailed(text: &str) -> GroundedParse {
    let mut out = GroundedParse::default();
    let mut rest = text;
    let mut segment_start = 0usize;
    let mut consumed = 0usize;
    while let Some(open) = rest.find('[') {
        let Some(close) = rest[open..].find(']').map(|c| open + c) else {
            out.warnings.push("unterminated `[`".into());
            break;
        };
        let segment = &text[segment_start..consumed + open];
        let inner = &rest[open + 1..close];
        if let Some(bbox) = parse_tuple(inner, &mut out.warnings) {
            out.pairs.push(GroundedSpan {
                span: span_before(segment),
                bbox,
            });
        }
        consumed += close + 1;
        segment_start = consumed;
        rest = &text[consumed..];
    }
    out
}

pub fn parse_grounded_response(text: &str) -> Vec<GroundedSpan> {
    let parsed = parse_grounded_detailed(text);
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    parsed.pairs
}

/// Renders pairs as `span [x1,y1,x2,y2]` joined by `, `.
pub fn format_grounded(pairs: &[GroundedSpan]) -> String {
    pairs
        .iter()
        .map(|p| format!("{} [{},{},{},{}]", p.span, p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2))
        .collect::<Vec<_>>()
        .join(", ")
}
