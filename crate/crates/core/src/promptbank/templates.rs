use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

/// The literal placeholder token substituted with a category name.
pub const PLACEHOLDER: &str = "{}";

/// Ordered, unique prompt templates, each holding exactly one `{}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateBank {
    templates: Vec<String>,
}

impl TemplateBank {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::EmptyBank);
        }
        let mut seen = HashSet::new();
        for (i, t) in templates.iter().enumerate() {
            let count = t.matches(PLACEHOLDER).count();
            if count != 1 {
                return Err(Error::MalformedTemplate {
                    line: i + 1,
                    reason: format!("expected exactly one {PLACEHOLDER} placeholder, found {count}"),
                });
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::MalformedTemplate {
                    line: i + 1,
                    reason: format!("duplicate template {t:?}"),
                });
            }
        }
        Ok(Self { templates })
    }

    /// One template per line. A trailing newline does not count as a line.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::new(lines)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// The first `m` templates.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot keep {m} of {} templates",
                self.len()
            )));
        }
        Ok(Self {
            templates: self.templates[..m].to_vec(),
        })
    }

    /// `n` generic photo-style templates, enough for desk-scale template sweeps.
    pub fn generic(n: usize) -> Result<Self> {
        const STEMS: [&str; 16] = [
            "a photo of a {}",
            "a {} in the scene",
            "a photo of many {}",
            "a close-up photo of the {}",
            "a cropped photo of a {}",
            "a bright photo of a {}",
            "a dark photo of the {}",
            "a photo of a small {}",
            "a photo of a large {}",
            "a blurry photo of a {}",
            "a rendering of a {}",
            "there is a {} in the scene",
            "a photo of the {} texture",
            "a good photo of a {}",
            "a low resolution photo of a {}",
            "itap of a {}",
        ];
        let templates = (0..n)
            .map(|i| {
                let stem = STEMS[i % STEMS.len()];
                match i / STEMS.len() {
                    0 => stem.to_string(),
                    round => format!("{stem} (variant {round})"),
                }
            })
            .collect();
        Self::new(templates)
    }
}

/// Ordered, unique, non-empty category names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategorySet {
    names: Vec<String>,
}

impl CategorySet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidCategories("no categories".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::InvalidCategories("empty category name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidCategories(format!("duplicate category {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Literal substitution of every category into every template, category-major:
/// `out[k * M + m]` is template `m` applied to category `k`.
pub fn render_prompts(bank: &TemplateBank, cats: &CategorySet) -> Vec<String> {
    cats.names()
        .iter()
        .flat_map(|c| bank.templates().iter().map(move |t| t.replacen(PLACEHOLDER, c, 1)))
        .collect()
}
