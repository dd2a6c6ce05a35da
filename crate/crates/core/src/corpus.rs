//! Corpus and label-set file formats, plus document chunking.
//!
//! Both files are line-delimited JSON. All offsets are counted in Unicode
//! scalar values, never bytes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default chunk limits used while batching.
pub const DEFAULT_MAX_CHUNK_MENTIONS: usize = 100;
pub const DEFAULT_MAX_CHUNK_CHARS: usize = 2_800;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub gold: String,
    pub surface: String,
    /// Set when the gold label is missing from the loaded label set.
    pub unlinkable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    InstanceOf,
    SubclassOf,
    Country,
    Occupation,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::InstanceOf,
        Relation::SubclassOf,
        Relation::Country,
        Relation::Occupation,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Relation::InstanceOf => "instance_of",
            Relation::SubclassOf => "subclass_of",
            Relation::Country => "country",
            Relation::Occupation => "occupation",
        }
    }

    /// Human-readable form used inside verbalizations.
    pub fn display_name(self) -> &'static str {
        match self {
            Relation::InstanceOf => "instance of",
            Relation::SubclassOf => "subclass of",
            Relation::Country => "country",
            Relation::Occupation => "occupation",
        }
    }

    pub fn from_key(key: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.key() == key)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EntityRecord {
    pub id: String,
    pub title: String,
    pub description: Option<String>,
    pub categories: BTreeMap<Relation, Vec<String>>,
    pub paragraph: Option<String>,
}

impl EntityRecord {
    pub fn new(id: impl Into<String>, title: impl Into<String>) -> Self {
        EntityRecord {
            id: id.into(),
            title: title.into(),
            ..Default::default()
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }

    pub fn with_category<I, S>(mut self, relation: Relation, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.categories
            .insert(relation, values.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_paragraph(mut self, paragraph: impl Into<String>) -> Self {
        self.paragraph = Some(paragraph.into());
        self
    }
}

/// The fixed label set, ordered by file position. Row `i` of every label
/// cache corresponds to `records[i]`.
#[derive(Debug, Clone, Default)]
pub struct LabelSet {
    records: Vec<EntityRecord>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn from_records(records: Vec<EntityRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            validate_record(rec, i + 1)?;
            if let Some(prev) = index.insert(rec.id.clone(), i) {
                return Err(Error::DuplicateId {
                    id: rec.id.clone(),
                    first: prev + 1,
                    second: i + 1,
                });
            }
        }
        Ok(LabelSet { records, index })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EntityRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

/// A contiguous slice of a parent document with mentions re-offset to
/// chunk-local coordinates. `offset` is the chunk start in the parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub parent_doc: String,
    pub offset: usize,
    pub text: String,
    pub mentions: Vec<Mention>,
}

impl Chunk {
    pub fn from_document(doc: &Document) -> Self {
        Chunk {
            parent_doc: doc.id.clone(),
            offset: 0,
            text: doc.text.clone(),
            mentions: doc.mentions.clone(),
        }
    }
}

#[derive(Deserialize)]
struct RawMention {
    start: i64,
    end: i64,
    label: String,
}

#[derive(Deserialize)]
struct RawDocument {
    id: String,
    text: String,
    #[serde(default)]
    mentions: Vec<RawMention>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    title: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    categories: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    paragraph: Option<String>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn read_lines<R: BufRead>(reader: R, path: Option<&Path>) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.unwrap_or(Path::new("<reader>")), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    read_corpus(open(path)?)
}

/// Parses and validates a JSONL corpus. Either every document validates or
/// an error is returned.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in read_lines(reader, None)? {
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(first) = seen.insert(raw.id.clone(), line_no) {
            return Err(Error::DuplicateId {
                id: raw.id,
                first,
                second: line_no,
            });
        }
        docs.push(build_document(raw)?);
    }
    Ok(docs)
}

fn build_document(raw: RawDocument) -> Result<Document> {
    let invalid = |message: String| Error::InvalidDocument {
        doc: raw.id.clone(),
        message,
    };
    let chars: Vec<char> = raw.text.chars().collect();
    if !raw.mentions.is_empty() && chars.is_empty() {
        return Err(invalid("text is empty but mentions are present".into()));
    }
    let mut mentions: Vec<Mention> = Vec::with_capacity(raw.mentions.len());
    for (i, m) in raw.mentions.iter().enumerate() {
        if m.start < 0 || m.end < 0 {
            return Err(invalid(format!("mention {i}: negative offset")));
        }
        let (start, end) = (m.start as usize, m.end as usize);
        if start >= end {
            return Err(invalid(format!("mention {i}: start ≥ end ({start} ≥ {end})")));
        }
        if end > chars.len() {
            return Err(invalid(format!(
                "mention {i}: end {end} exceeds text length {}",
                chars.len()
            )));
        }
        if let Some(prev) = mentions.last() {
            if start < prev.end {
                let kind = if start >= prev.start {
                    "overlapping"
                } else {
                    "unsorted"
                };
                return Err(invalid(format!(
                    "{kind} mentions [{}, {}) and [{start}, {end})",
                    prev.start, prev.end
                )));
            }
        }
        let surface: String = chars[start..end].iter().collect();
        if !surface.chars().any(char::is_alphanumeric) {
            return Err(invalid(format!(
                "mention {i}: span '{surface}' contains no alphanumeric character"
            )));
        }
        mentions.push(Mention {
            start,
            end,
            gold: m.label.clone(),
            surface,
            unlinkable: false,
        });
    }
    Ok(Document {
        id: raw.id,
        text: raw.text,
        mentions,
    })
}

pub fn load_label_set(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    read_label_set(open(path)?)
}

pub fn read_label_set<R: BufRead>(reader: R) -> Result<LabelSet> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in read_lines(reader, None)? {
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(first) = seen.insert(raw.id.clone(), line_no) {
            return Err(Error::DuplicateId {
                id: raw.id,
                first,
                second: line_no,
            });
        }
        let mut categories = BTreeMap::new();
        for (key, values) in raw.categories.unwrap_or_default() {
            let relation = Relation::from_key(&key)
                .ok_or_else(|| parse_err(format!("unknown relation key '{key}'")))?;
            if !values.is_empty() {
                categories.insert(relation, values);
            }
        }
        let record = EntityRecord {
            id: raw.id,
            title: raw.title,
            description: raw.description.filter(|s| !s.trim().is_empty()),
            categories,
            paragraph: raw.paragraph.filter(|s| !s.trim().is_empty()),
        };
        validate_record(&record, line_no)?;
        records.push(record);
        lines.push(line_no);
    }
    LabelSet::from_records(records).map_err(|e| match e {
        // from_records reports positions; translate them to file lines
        Error::DuplicateId { id, first, second } => Error::DuplicateId {
            id,
            first: lines[first - 1],
            second: lines[second - 1],
        },
        other => other,
    })
}

fn validate_record(rec: &EntityRecord, line: usize) -> Result<()> {
    if rec.title.trim().is_empty() {
        return Err(Error::Parse {
            line,
            message: format!("entity '{}' has an empty title", rec.id),
        });
    }
    if !rec.title.chars().any(char::is_alphanumeric) {
        return Err(Error::Parse {
            line,
            message: format!("entity '{}' title has no alphanumeric character", rec.id),
        });
    }
    Ok(())
}

/// Writes documents in the JSONL corpus format accepted by [`read_corpus`].
pub fn write_corpus(docs: &[Document], w: &mut impl Write) -> std::io::Result<()> {
    for d in docs {
        let mentions: Vec<serde_json::Value> = d
            .mentions
            .iter()
            .map(|m| serde_json::json!({"start": m.start, "end": m.end, "label": m.gold}))
            .collect();
        let line = serde_json::json!({"id": d.id, "text": d.text, "mentions": mentions});
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes records in the JSONL label-set format accepted by
/// [`read_label_set`].
pub fn write_label_set(labels: &LabelSet, w: &mut impl Write) -> std::io::Result<()> {
    for r in labels.records() {
        let categories: BTreeMap<&str, &Vec<String>> =
            r.categories.iter().map(|(k, v)| (k.key(), v)).collect();
        let line = serde_json::json!({
            "id": r.id,
            "title": r.title,
            "description": r.description,
            "categories": categories,
            "paragraph": r.paragraph,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Flags mentions whose gold label is absent from `labels`. Returns how many
/// were flagged.
pub fn mark_unlinkable(docs: &mut [Document], labels: &LabelSet) -> usize {
    let mut flagged = 0;
    for m in docs.iter_mut().flat_map(|d| d.mentions.iter_mut()) {
        m.unlinkable = !labels.contains(&m.gold);
        flagged += m.unlinkable as usize;
    }
    flagged
}

/// Splits a document greedily into chunks holding at most `max_mentions`
/// mentions and `max_chars` characters.
///
/// Each cut lands on the latest whitespace character that keeps both limits
/// and does not fall inside a mention; that whitespace character belongs to
/// no chunk. Without such whitespace the cut is a hard split at the limit.
pub fn chunk_document(doc: &Document, max_mentions: usize, max_chars: usize) -> Result<Vec<Chunk>> {
    let fail = |message: String| Error::Chunking {
        doc: doc.id.clone(),
        message,
    };
    if max_mentions == 0 || max_chars == 0 {
        return Err(fail("limits must be at least 1".into()));
    }
    if let Some(m) = doc.mentions.iter().find(|m| m.end - m.start > max_chars) {
        return Err(fail(format!(
            "mention [{}, {}) is longer than {max_chars} characters",
            m.start, m.end
        )));
    }

    let chars: Vec<char> = doc.text.chars().collect();
    let len = chars.len();
    let mentions = &doc.mentions;
    let inside = |c: usize| mentions.iter().any(|m| m.start < c && c < m.end);
    let covers = |c: usize| mentions.iter().any(|m| m.start <= c && c < m.end);

    let mut chunks = Vec::new();
    let mut pos = 0usize;
    let mut next_mention = 0usize;
    loop {
        let remaining_mentions = mentions.len() - next_mention;
        if len - pos <= max_chars && remaining_mentions <= max_mentions {
            chunks.push(make_chunk(doc, &chars, pos, len, next_mention, mentions.len()));
            break;
        }
        let mut hi = (pos + max_chars).min(len);
        if remaining_mentions > max_mentions {
            hi = hi.min(mentions[next_mention + max_mentions].start);
        }

        // latest whitespace cut in (pos, hi]
        let soft = (pos + 1..=hi)
            .rev()
            .find(|&c| c < len && chars[c].is_whitespace() && !covers(c));
        let (end, resume) = match soft {
            Some(c) => (c, c + 1),
            None => {
                let mut cut = hi;
                if inside(cut) {
                    // back off to the start of the straddling mention
                    cut = mentions
                        .iter()
                        .find(|m| m.start < cut && cut < m.end)
                        .map(|m| m.start)
                        .unwrap_or(cut);
                }
                if cut <= pos {
                    return Err(fail(format!("no admissible split point after offset {pos}")));
                }
                (cut, cut)
            }
        };
        let mention_end = next_mention
            + mentions[next_mention..]
                .iter()
                .take_while(|m| m.end <= end)
                .count();
        chunks.push(make_chunk(doc, &chars, pos, end, next_mention, mention_end));
        next_mention = mention_end;
        pos = resume;
        if pos >= len && next_mention == mentions.len() {
            break;
        }
    }
    Ok(chunks)
}

fn make_chunk(
    doc: &Document,
    chars: &[char],
    start: usize,
    end: usize,
    first_mention: usize,
    last_mention: usize,
) -> Chunk {
    let mentions = doc.mentions[first_mention..last_mention]
        .iter()
        .map(|m| Mention {
            start: m.start - start,
            end: m.end - start,
            ..m.clone()
        })
        .collect();
    Chunk {
        parent_doc: doc.id.clone(),
        offset: start,
        text: chars[start..end].iter().collect(),
        mentions,
    }
}

/// Character-offset slice of `text`.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let b_start = indices.nth(start).unwrap_or(text.len());
    let b_end = if end > start {
        indices.nth(end - start - 1).unwrap_or(text.len())
    } else {
        b_start
    };
    &text[b_start..b_end]
}
