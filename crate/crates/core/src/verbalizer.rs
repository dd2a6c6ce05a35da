//! Rendering of knowledge-base records into label verbalizations.
//!
//! A verbalization is the title, followed by `"; "` and the remaining
//! components joined with `", "`. Every non-title component is soft-truncated
//! on its own: text past the limit is cut just before the next punctuation
//! mark.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::corpus::EntityRecord;
use crate::error::{Error, Result};

pub const DEFAULT_SOFT_LIMIT: usize = 50;
pub const PUNCTUATION: [char; 6] = [',', ';', '.', ':', '!', '?'];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Title,
    Description,
    Categories,
    Paragraph,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatSpec {
    pub components: Vec<Component>,
    pub paragraph_limit: usize,
    pub soft_limit: usize,
}

/// Named verbalization formats exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Title,
    TitleDesc,
    TitleCat,
    TitleDescCat,
    TitlePara100,
    TitlePara500,
}

impl Format {
    pub const ALL: [Format; 6] = [
        Format::Title,
        Format::TitleDesc,
        Format::TitleCat,
        Format::TitleDescCat,
        Format::TitlePara100,
        Format::TitlePara500,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Format::Title => "title",
            Format::TitleDesc => "title_desc",
            Format::TitleCat => "title_cat",
            Format::TitleDescCat => "title_desc_cat",
            Format::TitlePara100 => "title_para100",
            Format::TitlePara500 => "title_para500",
        }
    }

    pub fn spec(self) -> FormatSpec {
        use Component::*;
        let (components, paragraph_limit) = match self {
            Format::Title => (vec![Title], 100),
            Format::TitleDesc => (vec![Title, Description], 100),
            Format::TitleCat => (vec![Title, Categories], 100),
            Format::TitleDescCat => (vec![Title, Description, Categories], 100),
            Format::TitlePara100 => (vec![Title, Paragraph], 100),
            Format::TitlePara500 => (vec![Title, Paragraph], 500),
        };
        FormatSpec {
            components,
            paragraph_limit,
            soft_limit: DEFAULT_SOFT_LIMIT,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Format::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verbalization format '{s}'")))
    }
}

impl FormatSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.first() != Some(&Component::Title) {
            return Err(Error::Config("format must start with the title".into()));
        }
        if self.components[1..].contains(&Component::Title) {
            return Err(Error::Config("title may appear only once".into()));
        }
        if self.components.contains(&Component::Description)
            && self.components.contains(&Component::Paragraph)
        {
            return Err(Error::Config(
                "description and paragraph cannot be combined".into(),
            ));
        }
        if self.soft_limit == 0 || self.paragraph_limit == 0 {
            return Err(Error::Config("truncation limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verbalization {
    pub entity_id: String,
    pub text: String,
    /// Character offsets of the title inside `text`.
    pub title_char_span: (usize, usize),
}

pub fn verbalize(record: &EntityRecord, spec: &FormatSpec) -> Result<Verbalization> {
    spec.validate()?;
    let mut parts: Vec<String> = Vec::new();
    for component in &spec.components[1..] {
        let rendered = match component {
            Component::Title => None,
            Component::Description => record
                .description
                .as_deref()
                .map(|d| truncate_soft(d.trim(), spec.soft_limit)),
            Component::Categories => {
                let cats = render_categories(record);
                (!cats.is_empty()).then(|| truncate_soft(&cats, spec.soft_limit))
            }
            Component::Paragraph => record
                .paragraph
                .as_deref()
                .map(|p| truncate_soft(p.trim(), spec.paragraph_limit)),
        };
        if let Some(text) = rendered.filter(|t| !t.is_empty()) {
            parts.push(text);
        }
    }

    let mut text = record.title.clone();
    if !parts.is_empty() {
        text.push_str("; ");
        text.push_str(&parts.join(", "));
    }
    Ok(Verbalization {
        entity_id: record.id.clone(),
        title_char_span: (0, record.title.chars().count()),
        text,
    })
}

fn render_categories(record: &EntityRecord) -> String {
    record
        .categories
        .iter()
        .filter(|(_, values)| !values.is_empty())
        .map(|(rel, values)| format!("{}: {}", rel.display_name(), values.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Cuts `text` just before the first punctuation mark at character index
/// `>= limit`, then trims trailing whitespace. Text within the limit, or
/// without such a mark, is returned unchanged.
pub fn truncate_soft(text: &str, limit: usize) -> String {
    let cut = text
        .char_indices()
        .enumerate()
        .skip(limit)
        .find(|(_, (_, c))| PUNCTUATION.contains(c))
        .map(|(_, (byte, _))| byte);
    match cut {
        Some(byte) => text[..byte].trim_end().to_string(),
        None => text.to_string(),
    }
}
