//! Aspect questions: prompt construction, response parsing, rank selection
//! and the on-disk question set.
//!
//! Questions are produced in two rounds. A generation prompt asks a language
//! model for `N` yes/no questions about the dataset's classes; a selection
//! prompt then asks for the `Q` most relevant and distinct ones. The order of
//! the selection response is the rank order (first line is rank 1), and every
//! Q-sweep prefix is taken from it.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const QUESTION_FORMAT: &str = "makd-questions";
pub const QUESTION_FORMAT_VERSION: u32 = 1;

pub const GENERATION_SYSTEM_PROMPT: &str = "You are a good question maker.";

#[derive(Debug, Error)]
pub enum AspectError {
    #[error("class list is empty")]
    EmptyClassList,
    #[error("must request at least one question")]
    ZeroQuestions,
    #[error("cannot select {requested} of {available} questions")]
    SelectionTooLarge { requested: usize, available: usize },
    #[error("no questions could be parsed from response: {raw:?}")]
    ParseFailure { raw: String },
    #[error("selected id {0} is not in the question list")]
    UnknownId(u32),
    #[error("duplicate question id {0}")]
    DuplicateId(u32),
    #[error("invalid question text {0:?}")]
    InvalidText(String),
    #[error("question file: {0}")]
    Format(String),
    #[error("question file io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AspectError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub prompt_digest: String,
}

impl Provenance {
    pub fn new(generator: impl Into<String>, prompt: &str) -> Self {
        Self {
            generator: generator.into(),
            prompt_digest: sha256_hex(prompt.as_bytes()),
        }
    }

    pub fn unknown() -> Self {
        Self {
            generator: "unknown".into(),
            prompt_digest: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectQuestion {
    pub id: u32,
    pub text: String,
    /// 1 is the most relevant; `None` until the question is selected.
    pub rank: Option<u32>,
    pub provenance: Provenance,
}

impl AspectQuestion {
    pub fn new(id: u32, text: impl Into<String>, provenance: Provenance) -> Result<Self> {
        let text = text.into();
        validate_text(&text)?;
        Ok(Self {
            id,
            text,
            rank: None,
            provenance,
        })
    }
}

fn validate_text(text: &str) -> Result<()> {
    let t = text.trim();
    if t.len() < 2 || !t.ends_with('?') || t != text || text.contains('\n') {
        return Err(AspectError::InvalidText(text.to_string()));
    }
    Ok(())
}

/// The generation prompt: a fixed system message and an instruction with
/// the class count, image count, class list and requested question count
/// substituted in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPrompt {
    pub system: String,
    pub instruction: String,
}

pub fn build_generation_prompt(
    classes: &[String],
    num_images: usize,
    num_questions: usize,
) -> Result<GenerationPrompt> {
    if classes.is_empty() {
        return Err(AspectError::EmptyClassList);
    }
    if num_questions == 0 {
        return Err(AspectError::ZeroQuestions);
    }
    let instruction = format!(
        "The dataset consists of {} classes and {} images. The class list is as follows: [{}], \
         Generate {} feature-specific Yes or No questions, focusing on clear and distinct aspects \
         of the objects in the images in the dataset.",
        classes.len(),
        num_images,
        classes.join(", "),
        num_questions,
    );
    Ok(GenerationPrompt {
        system: GENERATION_SYSTEM_PROMPT.to_string(),
        instruction,
    })
}

/// Selection prompt over an enumerated question list.
pub fn build_selection_prompt(questions: &[AspectQuestion], select: usize) -> Result<String> {
    if select > questions.len() {
        return Err(AspectError::SelectionTooLarge {
            requested: select,
            available: questions.len(),
        });
    }
    if select == 0 {
        return Err(AspectError::ZeroQuestions);
    }
    let mut prompt = format!(
        "Select {select} of the most relevant and distinct questions from the list, focusing on \
         various key features that distinguish different class in the dataset.\n"
    );
    for (i, q) in questions.iter().enumerate() {
        let _ = writeln!(prompt, "{}. {}", i + 1, q.text);
    }
    Ok(prompt)
}

/// Strips list markers (`1.`, `2)`, `(3)`, `Q4:`, `-`, `*`, `•`) and emphasis
/// from a response line.
fn strip_marker(line: &str) -> &str {
    let mut s = line.trim().trim_matches('*').trim();
    for bullet in ["- ", "* ", "• ", "+ "] {
        if let Some(rest) = s.strip_prefix(bullet) {
            s = rest.trim_start();
        }
    }
    let s2 = s.strip_prefix('(').unwrap_or(s);
    let s2 = s2.strip_prefix(['Q', 'q']).unwrap_or(s2);
    let digits = s2.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &s2[digits..];
        for sep in [".", ")", ":", " -"] {
            if let Some(r) = rest.strip_prefix(sep) {
                return r.trim().trim_matches('*').trim();
            }
        }
    }
    s.trim_matches('*').trim()
}

fn normalise(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Parses a numbered or bulleted list of questions. Lines that are not
/// questions are dropped; repeated questions keep their first occurrence.
/// Ids are assigned `0, 1, 2, ...` in order.
pub fn parse_question_list(raw: &str) -> Result<Vec<AspectQuestion>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in raw.lines() {
        let text = strip_marker(line);
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.len() < 2 || !text.ends_with('?') {
            continue;
        }
        if !seen.insert(normalise(&text)) {
            continue;
        }
        out.push(AspectQuestion {
            id: out.len() as u32,
            text,
            rank: None,
            provenance: Provenance::unknown(),
        });
    }
    if out.is_empty() {
        return Err(AspectError::ParseFailure { raw: raw.to_string() });
    }
    Ok(out)
}

/// Renders questions as a numbered list that [`parse_question_list`] reads back.
pub fn format_question_list(questions: &[AspectQuestion]) -> String {
    let mut s = String::new();
    for (i, q) in questions.iter().enumerate() {
        let _ = writeln!(s, "{}. {}", i + 1, q.text);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub dataset_id: String,
    pub classes: Vec<String>,
    pub all_questions: Vec<AspectQuestion>,
    /// Ids in rank order.
    pub selected: Vec<u32>,
}

impl QuestionSet {
    /// A set with every question selected in list order.
    pub fn new(dataset_id: impl Into<String>, classes: Vec<String>, questions: Vec<AspectQuestion>) -> Result<Self> {
        let selected = questions.iter().map(|q| q.id).collect();
        let mut set = Self {
            dataset_id: dataset_id.into(),
            classes,
            all_questions: questions,
            selected,
        };
        set.assign_ranks();
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for q in &self.all_questions {
            validate_text(&q.text)?;
            if !ids.insert(q.id) {
                return Err(AspectError::DuplicateId(q.id));
            }
        }
        let mut sel = HashSet::new();
        for &id in &self.selected {
            if !ids.contains(&id) {
                return Err(AspectError::UnknownId(id));
            }
            if !sel.insert(id) {
                return Err(AspectError::DuplicateId(id));
            }
        }
        Ok(())
    }

    fn assign_ranks(&mut self) {
        for q in &mut self.all_questions {
            q.rank = None;
        }
        for (r, id) in self.selected.iter().enumerate() {
            if let Some(q) = self.all_questions.iter_mut().find(|q| q.id == *id) {
                q.rank = Some(r as u32 + 1);
            }
        }
    }

    pub fn num_selected(&self) -> usize {
        self.selected.len()
    }

    pub fn question(&self, id: u32) -> Option<&AspectQuestion> {
        self.all_questions.iter().find(|q| q.id == id)
    }

    /// Selected questions in rank order.
    pub fn selected_questions(&self) -> Vec<&AspectQuestion> {
        self.selected.iter().filter_map(|id| self.question(*id)).collect()
    }

    /// Replaces the selection with the questions named in a selection
    /// response, in response order. Response lines are matched to the
    /// existing list by normalised text; unmatched lines are ignored.
    pub fn apply_selection(&self, response: &str, select: usize) -> Result<Self> {
        let picked = parse_question_list(response)?;
        let mut selected = Vec::new();
        for p in &picked {
            let key = normalise(&p.text);
            if let Some(q) = self.all_questions.iter().find(|q| normalise(&q.text) == key) {
                if !selected.contains(&q.id) {
                    selected.push(q.id);
                }
            }
            if selected.len() == select {
                break;
            }
        }
        if selected.is_empty() {
            return Err(AspectError::ParseFailure {
                raw: response.to_string(),
            });
        }
        let mut out = self.clone();
        out.selected = selected;
        out.assign_ranks();
        Ok(out)
    }

    /// Keeps the first `k` selected questions in rank order.
    pub fn select_top(&self, k: usize) -> Result<Self> {
        if k > self.selected.len() {
            return Err(AspectError::SelectionTooLarge {
                requested: k,
                available: self.selected.len(),
            });
        }
        let mut out = self.clone();
        out.selected.truncate(k);
        out.assign_ranks();
        Ok(out)
    }

    /// SHA-256 over the dataset id and the selected `(id, text)` pairs in
    /// rank order. Annotation stores carry this to detect staleness.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dataset_id.as_bytes());
        h.update([0]);
        for q in self.selected_questions() {
            h.update(q.id.to_le_bytes());
            h.update(q.text.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    /// One JSON header line followed by one JSON record per question.
    pub fn to_text(&self) -> String {
        let header = serde_json::json!({
            "format": QUESTION_FORMAT,
            "version": QUESTION_FORMAT_VERSION,
            "dataset_id": self.dataset_id,
            "classes": self.classes,
        });
        let mut s = header.to_string();
        s.push('\n');
        for q in &self.all_questions {
            s.push_str(&serde_json::to_string(q).expect("question serialises"));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value =
            serde_json::from_str(lines.next().ok_or_else(|| AspectError::Format("empty file".into()))?)
                .map_err(|e| AspectError::Format(e.to_string()))?;
        if header["format"] != QUESTION_FORMAT {
            return Err(AspectError::Format("not a question set".into()));
        }
        if header["version"] != QUESTION_FORMAT_VERSION {
            return Err(AspectError::Format(format!(
                "unsupported version {}",
                header["version"]
            )));
        }
        let dataset_id = header["dataset_id"]
            .as_str()
            .ok_or_else(|| AspectError::Format("missing dataset_id".into()))?
            .to_string();
        let classes: Vec<String> =
            serde_json::from_value(header["classes"].clone()).map_err(|e| AspectError::Format(e.to_string()))?;
        let all_questions = lines
            .map(|l| serde_json::from_str(l).map_err(|e| AspectError::Format(e.to_string())))
            .collect::<Result<Vec<AspectQuestion>>>()?;
        let mut ranked: Vec<(u32, u32)> = all_questions.iter().filter_map(|q| q.rank.map(|r| (r, q.id))).collect();
        ranked.sort_unstable();
        let set = Self {
            dataset_id,
            classes,
            all_questions,
            selected: ranked.into_iter().map(|(_, id)| id).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const FEATURE_WORDS: &[&str] = &[
    "color",
    "shape",
    "texture",
    "pattern",
    "size",
    "outline",
    "background",
    "surface finish",
    "proportions",
    "markings",
];

/// Deterministic stand-in for a language model: questions come from the
/// tokens of the class names, then from generic feature templates.
#[derive(Debug, Clone, Default)]
pub struct OfflineGenerator;

impl OfflineGenerator {
    pub const NAME: &'static str = "offline-template-v1";

    /// Raw numbered-list response to a generation prompt.
    pub fn respond(&self, classes: &[String], num_questions: usize) -> String {
        let mut tokens: Vec<String> = Vec::new();
        for class in classes {
            for tok in class
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| t.len() > 1 && !t.chars().all(|c| c.is_ascii_digit()))
            {
                let tok = tok.to_lowercase();
                if !tokens.contains(&tok) {
                    tokens.push(tok);
                }
            }
        }
        let mut lines: Vec<String> = tokens
            .iter()
            .map(|t| format!("Does the object in the image appear {t}?"))
            .collect();
        'outer: for round in 0.. {
            for (i, word) in FEATURE_WORDS.iter().enumerate() {
                if lines.len() >= num_questions {
                    break 'outer;
                }
                let line = match round {
                    0 => format!("Is the {word} of the main object clearly visible?"),
                    1 => format!("Does the {word} of the object stand out from similar classes?"),
                    n => format!("Is feature {word} variant {} present?", n * FEATURE_WORDS.len() + i),
                };
                lines.push(line);
            }
        }
        lines.truncate(num_questions);
        format_question_list(
            &lines
                .into_iter()
                .enumerate()
                .map(|(i, text)| AspectQuestion {
                    id: i as u32,
                    text,
                    rank: None,
                    provenance: Provenance::unknown(),
                })
                .collect::<Vec<_>>(),
        )
    }

    /// Generates a full question set with every question selected in
    /// generation order.
    pub fn generate(
        &self,
        dataset_id: &str,
        classes: &[String],
        num_images: usize,
        num_questions: usize,
    ) -> Result<QuestionSet> {
        let prompt = build_generation_prompt(classes, num_images, num_questions)?;
        let raw = self.respond(classes, num_questions);
        let provenance = Provenance::new(Self::NAME, &format!("{}\n{}", prompt.system, prompt.instruction));
        let questions = parse_question_list(&raw)?
            .into_iter()
            .map(|mut q| {
                q.provenance = provenance.clone();
                q
            })
            .collect();
        QuestionSet::new(dataset_id, classes.to_vec(), questions)
    }

    /// Answers a selection prompt by keeping list order.
    pub fn select(&self, set: &QuestionSet, select: usize) -> Result<QuestionSet> {
        let all: Vec<AspectQuestion> = set.all_questions.clone();
        build_selection_prompt(&all, select)?;
        let response = format_question_list(&all[..select]);
        set.apply_selection(&response, select)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes() -> Vec<String> {
        vec!["cat".into(), "dog".into()]
    }

    #[test]
    fn generation_prompt_template() {
        let p = build_generation_prompt(&classes(), 100, 100).unwrap();
        assert_eq!(p.system, "You are a good question maker.");
        assert!(p.instruction.contains("consists of 2 classes and 100 images"));
        assert!(p.instruction.contains("[cat, dog]"));
        assert!(p
            .instruction
            .contains("Generate 100 feature-specific Yes or No questions"));
        let one = build_generation_prompt(&classes(), 100, 1).unwrap();
        assert!(one.instruction.contains("Generate 1 feature-specific"));
        assert_eq!(p, build_generation_prompt(&classes(), 100, 100).unwrap());
        assert!(matches!(
            build_generation_prompt(&[], 1, 1),
            Err(AspectError::EmptyClassList)
        ));
    }

    fn numbered(n: usize) -> Vec<AspectQuestion> {
        (0..n)
            .map(|i| AspectQuestion::new(i as u32, format!("Question {i}?"), Provenance::unknown()).unwrap())
            .collect()
    }

    #[test]
    fn selection_prompt_template() {
        let qs = numbered(100);
        let p = build_selection_prompt(&qs, 50).unwrap();
        assert!(p.starts_with("Select 50 of the most relevant and distinct questions from the list"));
        assert!(p.contains("\n100. Question 99?\n"));
        assert!(build_selection_prompt(&qs, 10).unwrap().contains("Select 10"));
        assert!(build_selection_prompt(&qs, 100).is_ok());
        assert!(matches!(
            build_selection_prompt(&qs, 101),
            Err(AspectError::SelectionTooLarge { .. })
        ));
    }

    #[test]
    fn parse_examples() {
        let qs =
            parse_question_list("1. Does the car have a convertible roof?\n2. Is the car a roadster model?").unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].text, "Does the car have a convertible roof?");
        assert_eq!(qs[1].id, 1);
        assert!(matches!(parse_question_list(""), Err(AspectError::ParseFailure { .. })));
        let one = parse_question_list("- Does the animal have floppy ears?").unwrap();
        assert_eq!(one[0].text, "Does the animal have floppy ears?");
    }

    #[test]
    fn parse_drops_noise_and_duplicates() {
        let raw = "Here are the questions:\n\n**1. Is it red?**\n2) Is it red?\n(3) Is it  blue?\nQ4: Is it tall?\n• Is it furry?\nThanks!";
        let texts: Vec<String> = parse_question_list(raw).unwrap().into_iter().map(|q| q.text).collect();
        assert_eq!(texts, ["Is it red?", "Is it blue?", "Is it tall?", "Is it furry?"]);
    }

    fn ranked_set(n: usize) -> QuestionSet {
        QuestionSet::new("d", classes(), numbered(n)).unwrap()
    }

    #[test]
    fn select_top_prefixes() {
        let s = ranked_set(50);
        let top = s.select_top(10).unwrap();
        assert_eq!(top.selected, (0..10).collect::<Vec<u32>>());
        assert_eq!(top.question(3).unwrap().rank, Some(4));
        assert_eq!(top.question(20).unwrap().rank, None);
        assert_eq!(s.select_top(50).unwrap(), s);
        assert_eq!(s.select_top(30).unwrap().select_top(10).unwrap(), top);
        assert!(s.select_top(51).is_err());
    }

    #[test]
    fn selection_response_defines_rank() {
        let s = ranked_set(5);
        let picked = s
            .apply_selection("1. Question 3?\n2. Question 0?\n3. Not in the list?\n4. Question 4?", 3)
            .unwrap();
        assert_eq!(picked.selected, vec![3, 0, 4]);
        assert_eq!(picked.question(3).unwrap().rank, Some(1));
        assert_ne!(picked.digest(), s.digest());
    }

    #[test]
    fn file_round_trip() {
        let s = ranked_set(6).select_top(4).unwrap();
        let back = QuestionSet::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        assert!(QuestionSet::from_text("{\"format\":\"other\"}").is_err());
    }

    #[test]
    fn offline_generator_is_deterministic() {
        let cls = vec!["red-striped".to_string(), "blue-striped".to_string()];
        let a = OfflineGenerator.generate("d", &cls, 10, 8).unwrap();
        let b = OfflineGenerator.generate("d", &cls, 10, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.all_questions.len(), 8);
        assert_eq!(a.all_questions[0].text, "Does the object in the image appear red?");
        assert_eq!(a.all_questions[1].text, "Does the object in the image appear striped?");
        let sel = OfflineGenerator.select(&a, 5).unwrap();
        assert_eq!(sel.selected, vec![0, 1, 2, 3, 4]);
        let many = OfflineGenerator.generate("d", &cls, 10, 100).unwrap();
        assert_eq!(many.all_questions.len(), 100);
    }

    proptest! {
        #[test]
        fn parse_format_parse_round_trips(words in proptest::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,4}", 1..12)) {
            let raw: String = words.iter().map(|w| format!("- {w}?\n")).collect();
            let first = parse_question_list(&raw).unwrap();
            let second = parse_question_list(&format_question_list(&first)).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
