//! Per-category attribute descriptions: prompt construction for a language
//! model, answer parsing, sampling, validation and JSON persistence.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{category}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Llm,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub attributes: Vec<String>,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(rename = "dataset")]
    pub dataset_name: String,
    pub categories: Vec<CategoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.text.matches(PLACEHOLDER).count() {
            1 => Ok(()),
            n => Err(Error::Template {
                id: self.id.clone(),
                reason: format!("expected exactly one {PLACEHOLDER} placeholder, found {n}"),
            }),
        }
    }

    pub fn render(&self, category: &str) -> Result<String> {
        self.validate()?;
        Ok(self.text.replace(PLACEHOLDER, category))
    }
}

/// The five built-in question templates.
pub fn default_templates() -> Vec<PromptTemplate> {
    [
        ("T1", "Describe what a {category} looks like in the image."),
        ("T2", "How can you identify a {category} in the image?"),
        ("T3", "What are the characteristics of a {category} in the image?"),
        ("T4", "What are visual features of a {category} in the image?"),
        ("T5", "List all attributes for distinguishing a {category} in a photo."),
    ]
    .into_iter()
    .map(|(id, text)| PromptTemplate::new(id, text))
    .collect()
}

/// One question per template, in template order.
pub fn build_prompts(category: &str, templates: &[PromptTemplate]) -> Result<Vec<String>> {
    if category.trim().is_empty() {
        return Err(Error::Invalid("category name is empty".into()));
    }
    templates.iter().map(|t| t.render(category)).collect()
}

const FEW_SHOT_EXAMPLE: &str = "Q: Describe what a flamingo looks like in the image.\n\
A: wading bird; pink or reddish color; long legs; long neck; curved beak; webbed feet; \
black-tipped wings; black flight feathers; pink or red eyes.";

/// Wraps a question with a worked example so the answer comes back as a
/// semicolon-separated list that [`parse_llm_answer`] can split.
pub fn few_shot_prompt(category: &str, template: &PromptTemplate) -> Result<String> {
    let question = build_prompts(category, std::slice::from_ref(template))?.remove(0);
    Ok(format!(
        "{FEW_SHOT_EXAMPLE}\n\nQ: {question} Give me the answer in the above pattern.\nA: "
    ))
}

/// Plain-text prompt file: one question per line, categories in order.
pub fn emit_prompts(categories: &[&str], templates: &[PromptTemplate]) -> Result<String> {
    let mut out = String::new();
    for c in categories {
        for q in build_prompts(c, templates)? {
            out.push_str(&q);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Splits on `;`, trims, drops empties and keeps the first occurrence of
/// each attribute.
pub fn parse_llm_answer(raw: &str) -> Vec<String> {
    dedupe(raw.split(';').map(str::trim).filter(|s| !s.is_empty()))
}

/// Concatenates the parsed answers of several questions, deduplicated.
pub fn combine_answers<S: AsRef<str>>(answers: &[S]) -> Vec<String> {
    dedupe(
        answers
            .iter()
            .flat_map(|a| parse_llm_answer(a.as_ref()))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str),
    )
}

fn dedupe<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .filter(|s| seen.insert(s.to_string()))
        .map(str::to_string)
        .collect()
}

/// Case-insensitive whole-word (or whole-phrase) containment.
pub fn contains_whole_word(haystack: &str, needle: &str) -> bool {
    let hay = haystack.to_lowercase();
    let needle = needle.trim().to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let is_word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    hay.match_indices(&needle).any(|(start, m)| {
        let before = hay[..start].chars().next_back();
        let after = hay[start + m.len()..].chars().next();
        !is_word(before) && !is_word(after)
    })
}

impl CategoryEntry {
    pub fn new(name: impl Into<String>, attributes: Vec<String>, source: Source) -> Self {
        Self {
            name: name.into(),
            synonyms: Vec::new(),
            attributes,
            source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::Catalog {
            category: self.name.clone(),
            reason,
        };
        if self.name.trim().is_empty() {
            return Err(err("category name is empty".into()));
        }
        let mut seen = HashSet::new();
        for a in &self.attributes {
            if a.trim().is_empty() {
                return Err(err("empty attribute string".into()));
            }
            if a.trim() != a {
                return Err(err(format!("attribute `{a}` has surrounding whitespace")));
            }
            if !seen.insert(a.as_str()) {
                return Err(err(format!("duplicate attribute `{a}`")));
            }
            for label in std::iter::once(&self.name).chain(&self.synonyms) {
                if contains_whole_word(a, label) {
                    return Err(err(format!("attribute `{a}` leaks the name `{label}`")));
                }
            }
        }
        Ok(())
    }
}

impl Catalog {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for entry in &self.categories {
            entry.validate()?;
            if !names.insert(entry.name.as_str()) {
                return Err(Error::Catalog {
                    category: entry.name.clone(),
                    reason: "duplicate category".into(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&CategoryEntry> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let catalog: Catalog = serde_json::from_str(&fs::read_to_string(path)?)?;
    catalog.validate()?;
    Ok(catalog)
}

pub fn save_catalog(catalog: &Catalog, path: &Path) -> Result<()> {
    catalog.validate()?;
    fs::write(path, serde_json::to_string_pretty(catalog)?)?;
    Ok(())
}

/// Draws `count` attributes uniformly with replacement.
pub fn sample_attributes<R: Rng>(
    entry: &CategoryEntry,
    count: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if entry.attributes.is_empty() {
        return Err(Error::EmptyPool(entry.name.clone()));
    }
    Ok((0..count)
        .map(|_| entry.attributes[rng.random_range(0..entry.attributes.len())].clone())
        .collect())
}

pub fn sample_attributes_seeded(
    entry: &CategoryEntry,
    count: usize,
    seed: u64,
) -> Result<Vec<String>> {
    sample_attributes(entry, count, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A twenty-category catalog in the PASCAL VOC class layout with manually
/// written attributes.
pub fn pascal_fixture() -> Catalog {
    serde_json::from_str(include_str!("../fixtures/pascal_catalog.json"))
        .expect("bundled fixture parses")
}
