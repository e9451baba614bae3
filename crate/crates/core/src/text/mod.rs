//! Instruction templates and a deterministic stand-in text encoder.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

const BUILTIN_TEMPLATES: &str = include_str!("../../data/templates.tsv");
const SLOT: &str = "{}";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("template {template:?} has {slots} slots but {given} captions were given")]
    Arity {
        template: String,
        slots: usize,
        given: usize,
    },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("template {template:?} has {slots} slots, which is not valid for {task}")]
    TaskArity {
        task: Task,
        template: String,
        slots: usize,
    },
    #[error("template file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TextError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Add,
    Drop,
    Replace,
    Inpaint,
    SuperResolution,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Add,
        Task::Drop,
        Task::Replace,
        Task::Inpaint,
        Task::SuperResolution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Add => "add",
            Task::Drop => "drop",
            Task::Replace => "replace",
            Task::Inpaint => "inpaint",
            Task::SuperResolution => "super-resolution",
        }
    }

    /// Allowed slot counts for templates of this task.
    pub fn slot_range(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Task::Add | Task::Drop => 1..=1,
            Task::Replace => 2..=2,
            Task::Inpaint | Task::SuperResolution => 0..=1,
        }
    }

    /// Whether the edit is confined to a time span of the clip.
    pub fn is_time_domain(self) -> bool {
        !matches!(self, Task::SuperResolution)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "add" => Ok(Task::Add),
            "drop" => Ok(Task::Drop),
            "replace" => Ok(Task::Replace),
            "inpaint" => Ok(Task::Inpaint),
            "super-resolution" | "superres" | "super-res" => Ok(Task::SuperResolution),
            other => Err(TextError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    task: Task,
    template: String,
}

impl InstructionTemplate {
    pub fn new(task: Task, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        let slots = count_slots(&template);
        if !task.slot_range().contains(&slots) {
            return Err(TextError::TaskArity {
                task,
                template,
                slots,
            });
        }
        Ok(Self { task, template })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn text(&self) -> &str {
        &self.template
    }

    pub fn slots(&self) -> usize {
        count_slots(&self.template)
    }

    pub fn fill(&self, captions: &[&str]) -> Result<String> {
        fill_template(&self.template, captions)
    }
}

fn count_slots(template: &str) -> usize {
    template.matches(SLOT).count()
}

/// Replace each `{}` in `template` with the next caption, in order.
pub fn fill_template(template: &str, captions: &[&str]) -> Result<String> {
    let slots = count_slots(template);
    if slots != captions.len() {
        return Err(TextError::Arity {
            template: template.to_string(),
            slots,
            given: captions.len(),
        });
    }
    let mut out = String::with_capacity(template.len() + captions.iter().map(|c| c.len()).sum::<usize>());
    let mut pieces = template.split(SLOT);
    out.push_str(pieces.next().unwrap_or(""));
    for (piece, caption) in pieces.zip(captions) {
        out.push_str(caption);
        out.push_str(piece);
    }
    Ok(out)
}

/// The template inventory, grouped by task.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<InstructionTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATES).expect("shipped template file is valid")
    }

    /// Parse `task<TAB>template` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (task, template) = line.split_once('\t').ok_or_else(|| TextError::Parse {
                line: i + 1,
                msg: "expected task<TAB>template".into(),
            })?;
            let task: Task = task.parse().map_err(|e: TextError| TextError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            templates.push(InstructionTemplate::new(task, template).map_err(|e| TextError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(Self { templates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn all(&self) -> &[InstructionTemplate] {
        &self.templates
    }

    pub fn for_task(&self, task: Task) -> Vec<&InstructionTemplate> {
        self.templates.iter().filter(|t| t.task == task).collect()
    }

    pub fn find(&self, task: Task, text: &str) -> Option<&InstructionTemplate> {
        self.templates.iter().find(|t| t.task == task && t.template == text)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// How corpus captions are shortened before going into a template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPolicy {
    /// Leading phrases removed case-insensitively; the longest match wins.
    pub strip_prefixes: Vec<String>,
    pub lowercase: bool,
}

impl Default for CaptionPolicy {
    fn default() -> Self {
        Self {
            strip_prefixes: ["the sound of", "sound of", "someone", "somebody"]
                .map(String::from)
                .to_vec(),
            lowercase: true,
        }
    }
}

impl CaptionPolicy {
    pub fn verbatim() -> Self {
        Self {
            strip_prefixes: Vec::new(),
            lowercase: false,
        }
    }

    pub fn shorten(&self, caption: &str) -> String {
        let mut s = caption.trim();
        let best = self
            .strip_prefixes
            .iter()
            .filter(|p| {
                s.len() > p.len()
                    && s.is_char_boundary(p.len())
                    && s[..p.len()].eq_ignore_ascii_case(p)
                    && s[p.len()..].starts_with(char::is_whitespace)
            })
            .max_by_key(|p| p.len());
        if let Some(p) = best {
            s = s[p.len()..].trim_start();
        }
        if self.lowercase {
            s.to_lowercase()
        } else {
            s.to_string()
        }
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A sequence of token vectors, `len x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    vectors: Array2<f64>,
    null: bool,
}

impl TextEmbedding {
    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn token(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    /// Whether this is the reserved empty-text embedding.
    pub fn is_null(&self) -> bool {
        self.null
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_length: 300,
            seed: 0x7e47,
        }
    }
}

/// Hash-based encoder: every token maps to a fixed pseudo-random unit vector.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    null: TextEmbedding,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Self {
        let null = TextEmbedding {
            vectors: unit_vector(seed::derive_seed(config.seed, "text/null"), config.dim)
                .insert_axis(ndarray::Axis(0)),
            null: true,
        };
        Self { config, null }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// The empty-text embedding used for unconditional guidance.
    pub fn null(&self) -> &TextEmbedding {
        &self.null
    }

    pub fn token_vector(&self, token: &str) -> ndarray::Array1<f64> {
        let s = seed::derive_seed(self.config.seed, &format!("text/token/{token}"));
        unit_vector(s, self.config.dim)
    }

    pub fn encode(&self, s: &str) -> TextEmbedding {
        let tokens = tokenize(s);
        if tokens.is_empty() {
            return self.null.clone();
        }
        let n = tokens.len().min(self.config.max_length.max(1));
        let mut vectors = Array2::zeros((n, self.config.dim));
        for (i, tok) in tokens.iter().take(n).enumerate() {
            vectors.row_mut(i).assign(&self.token_vector(tok));
        }
        TextEmbedding {
            vectors,
            null: false,
        }
    }
}

impl Default for TextEncoder {
    fn default() -> Self {
        Self::new(TextEncoderConfig::default())
    }
}

/// Encode with the default encoder.
pub fn encode_text(s: &str) -> TextEmbedding {
    TextEncoder::default().encode(s)
}

fn unit_vector(seed: u64, dim: usize) -> ndarray::Array1<f64> {
    let mut rng = seed::rng_from(seed);
    let v = ndarray::Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
    let norm = v.dot(&v).sqrt().max(1e-300);
    v / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn fills_quoted_examples() {
        assert_eq!(
            fill_template("Add {} in the background", &["baby crying"]).unwrap(),
            "Add baby crying in the background"
        );
        assert_eq!(
            fill_template("Replace {} with {}", &["clapping", "guitar"]).unwrap(),
            "Replace clapping with guitar"
        );
        assert_eq!(fill_template("Inpaint", &[]).unwrap(), "Inpaint");
        assert!(matches!(
            fill_template("Replace {} with {}", &["x"]),
            Err(TextError::Arity { slots: 2, given: 1, .. })
        ));
    }

    #[test]
    fn builtin_inventory() {
        let set = TemplateSet::builtin();
        let counts: Vec<usize> = Task::ALL.iter().map(|&t| set.for_task(t).len()).collect();
        assert_eq!(counts, [5, 2, 2, 4, 4]);
        for t in set.all() {
            let caps = vec!["x"; t.slots()];
            let filled = t.fill(&caps).unwrap();
            assert_eq!(filled.replace('x', "{}"), t.text().replace('x', "{}"));
        }
        assert!(set.find(Task::Add, "Add {} in the background").is_some());
    }

    #[test]
    fn template_file_errors() {
        assert!(TemplateSet::parse("add\tAdd {} and {}\n").is_err());
        assert!(TemplateSet::parse("nope\tX\n").is_err());
        assert!(TemplateSet::parse("no tab here\n").is_err());
        let set = TemplateSet::parse("# extra\n\ndrop\tErase {}\n").unwrap();
        assert_eq!(set.all().len(), 1);
    }

    #[test]
    fn caption_shortening() {
        let p = CaptionPolicy::default();
        assert_eq!(p.shorten("Someone clapping"), "clapping");
        assert_eq!(p.shorten("The sound of guitar"), "guitar");
        assert_eq!(p.shorten("Baby crying"), "baby crying");
        assert_eq!(p.shorten("someones"), "someones");
        let keep_case = CaptionPolicy {
            lowercase: false,
            ..CaptionPolicy::default()
        };
        assert_eq!(keep_case.shorten("Dog Barking"), "Dog Barking");
        assert_eq!(
            fill_template(
                "Replace {} with {}",
                &[&p.shorten("Someone clapping"), &p.shorten("The sound of guitar")]
            )
            .unwrap(),
            "Replace clapping with guitar"
        );
    }

    #[test]
    fn encoder_is_deterministic_and_reserves_null() {
        let enc = TextEncoder::default();
        let a = enc.encode("Drop dog barking");
        assert_eq!(a, enc.encode("Drop dog barking"));
        assert_eq!(a.len(), 3);
        let e = enc.encode("");
        assert!(e.is_null());
        assert_eq!(e.len(), 1);
        assert_eq!(enc.encode(" ,.! "), e);
        for i in 0..a.len() {
            assert_ne!(a.token(i), e.token(0));
        }
        for i in 0..a.len() {
            assert!((a.token(i).dot(&a.token(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn differing_tokens_differ_only_in_place() {
        let enc = TextEncoder::default();
        let a = enc.encode("drop dog barking");
        let b = enc.encode("drop cat meowing");
        assert_eq!(a.token(0), b.token(0));
        assert_ne!(a.token(1), b.token(1));
        assert_ne!(a.token(2), b.token(2));
    }

    #[test]
    fn truncates_at_max_length() {
        let enc = TextEncoder::new(TextEncoderConfig {
            max_length: 4,
            ..TextEncoderConfig::default()
        });
        assert_eq!(enc.encode("a b c d e f g").len(), 4);
    }

    #[test]
    fn no_collisions_over_a_vocabulary() {
        let enc = TextEncoder::default();
        let mut seen = HashSet::new();
        let words = "add drop remove replace inpaint inpainting increase resolution perform super \
            with to in the beginning end middle background dog barking cat meowing baby crying bell \
            ringing machine gun clapping guitar bird singing rain thunder siren engine tone chirp noise";
        for w in words.split_whitespace() {
            let bits: Vec<u64> = enc.token_vector(w).iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(bits), "collision on {w}");
        }
    }

    proptest! {
        #[test]
        fn fill_preserves_non_slot_text(
            pieces in proptest::collection::vec("[^{}]{0,12}", 1..4),
            caps in proptest::collection::vec(".{0,10}", 3),
        ) {
            let template = pieces.join(SLOT);
            let n = pieces.len() - 1;
            let refs: Vec<&str> = caps[..n].iter().map(String::as_str).collect();
            let out = fill_template(&template, &refs).unwrap();
            let mut expected = pieces[0].clone();
            for (p, c) in pieces[1..].iter().zip(&refs) {
                expected.push_str(c);
                expected.push_str(p);
            }
            prop_assert_eq!(out, expected);
        }
    }
}
