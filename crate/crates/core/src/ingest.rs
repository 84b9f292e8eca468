//! Document loading and structure-respecting chunking.
//!
//! Three input formats are accepted: plain text and markdown with
//! `<<<page N>>>` marker lines, and `block_json` (one block object per line).
//! Chunks are built by a greedy forward pass over paragraph blocks: headings
//! close the current chunk and update the section path, oversized paragraphs
//! are split at sentence boundaries, and short trailing chunks are folded into
//! their predecessor within the same section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator inserted between paragraphs merged into one chunk.
pub const PARAGRAPH_SEPARATOR: &str = "\n\n";

/// Bundled three-page markdown corpus on station electrical power classes.
pub const SAMPLE_CORPUS: &str = include_str!("../assets/sample_corpus.md");
pub const SAMPLE_DOC_ID: &str = "station_power";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed block: {reason}")]
    MalformedBlock { line: usize, reason: String },
    #[error("line {line}: page {page} decreases from page {previous}")]
    PageDecrease { line: usize, page: u32, previous: u32 },
    #[error("invalid chunking config: {0}")]
    Config(String),
    #[error("invalid document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentFormat {
    PlainText,
    Markdown,
    BlockJson,
}

impl DocumentFormat {
    /// Guess a format from a file extension: `.md` is markdown, `.jsonl` and
    /// `.json` are block_json, anything else is plain text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("md" | "markdown") => Self::Markdown,
            Some("jsonl" | "json") => Self::BlockJson,
            _ => Self::PlainText,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Heading,
    Paragraph,
    PageBreak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    #[serde(default)]
    pub text: String,
    pub page: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading_level: Option<u8>,
}

impl Block {
    pub fn heading(text: impl Into<String>, level: u8, page: u32) -> Self {
        Self { kind: BlockKind::Heading, text: text.into(), page, heading_level: Some(level) }
    }

    pub fn paragraph(text: impl Into<String>, page: u32) -> Self {
        Self { kind: BlockKind::Paragraph, text: text.into(), page, heading_level: None }
    }

    pub fn page_break(page: u32) -> Self {
        Self { kind: BlockKind::PageBreak, text: String::new(), page, heading_level: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub blocks: Vec<Block>,
}

impl Document {
    /// Check the block-level invariants: non-empty id, non-decreasing pages,
    /// non-blank paragraphs, heading levels present and at least one.
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.doc_id.trim().is_empty() {
            return Err(IngestError::Document("doc_id is empty".into()));
        }
        let mut previous = 1;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.page == 0 {
                return Err(IngestError::Document(format!("block {i}: page must be positive")));
            }
            if block.page < previous {
                return Err(IngestError::PageDecrease { line: i + 1, page: block.page, previous });
            }
            previous = block.page;
            match block.kind {
                BlockKind::Paragraph if block.text.trim().is_empty() => {
                    return Err(IngestError::Document(format!("block {i}: empty paragraph")));
                }
                BlockKind::Heading if block.heading_level.unwrap_or(0) == 0 => {
                    return Err(IngestError::Document(format!("block {i}: heading without level")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn paragraphs(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Paragraph)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub page_start: u32,
    pub page_end: u32,
    pub section_path: Vec<String>,
    pub char_count: usize,
}

impl Chunk {
    /// Human-readable provenance, e.g. `essential-candu pp. 14-15`.
    pub fn source_ref(&self) -> String {
        if self.page_start == self.page_end {
            format!("{} p. {}", self.doc_id, self.page_start)
        } else {
            format!("{} pp. {}-{}", self.doc_id, self.page_start, self.page_end)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    pub target_chars: usize,
    pub max_chars: usize,
    pub min_chars: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { target_chars: 1500, max_chars: 3000, min_chars: 200 }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.min_chars == 0 {
            return Err(IngestError::Config("min_chars must be positive".into()));
        }
        if !(self.min_chars <= self.target_chars && self.target_chars <= self.max_chars) {
            return Err(IngestError::Config(format!(
                "expected min_chars <= target_chars <= max_chars, got {} / {} / {}",
                self.min_chars, self.target_chars, self.max_chars
            )));
        }
        Ok(())
    }
}

/// Read a document from disk. The file stem becomes the `doc_id`.
pub fn load_document(path: &Path, format: DocumentFormat) -> Result<Document, IngestError> {
    let raw = fs::read(path)
        .map_err(|source| IngestError::Read { path: path.display().to_string(), source })?;
    let text = String::from_utf8(raw).map_err(|e| IngestError::Read {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    let doc_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .unwrap_or("document")
        .to_string();
    parse_document(&doc_id, &text, format)
}

/// Parse document text already in memory.
pub fn parse_document(
    doc_id: &str,
    text: &str,
    format: DocumentFormat,
) -> Result<Document, IngestError> {
    let blocks = match format {
        DocumentFormat::PlainText => parse_lines(text, false)?,
        DocumentFormat::Markdown => parse_lines(text, true)?,
        DocumentFormat::BlockJson => parse_block_json(text)?,
    };
    let title = blocks
        .iter()
        .find(|b| b.kind == BlockKind::Heading)
        .map(|b| b.text.clone())
        .unwrap_or_else(|| doc_id.to_string());
    let doc = Document { doc_id: doc_id.to_string(), title, blocks };
    doc.validate()?;
    Ok(doc)
}

fn page_marker(line: &str) -> Option<&str> {
    line.trim().strip_prefix("<<<page ")?.strip_suffix(">>>").map(str::trim)
}

fn markdown_heading(line: &str) -> Option<(u8, &str)> {
    let hashes = line.bytes().take_while(|&b| b == b'#').count();
    if hashes == 0 || hashes > 6 {
        return None;
    }
    let rest = &line[hashes..];
    if !(rest.is_empty() || rest.starts_with(' ') || rest.starts_with('\t')) {
        return None;
    }
    let title = rest.trim().trim_end_matches('#').trim();
    Some((hashes as u8, title))
}

fn parse_lines(text: &str, markdown: bool) -> Result<Vec<Block>, IngestError> {
    let mut blocks = Vec::new();
    let mut page = 1u32;
    let mut para: Vec<&str> = Vec::new();

    fn flush(para: &mut Vec<&str>, page: u32, blocks: &mut Vec<Block>) {
        if !para.is_empty() {
            blocks.push(Block::paragraph(para.join("\n"), page));
            para.clear();
        }
    }

    for (idx, line) in text.lines().enumerate() {
        if let Some(number) = page_marker(line) {
            flush(&mut para, page, &mut blocks);
            let next: u32 = number.parse().map_err(|_| IngestError::MalformedBlock {
                line: idx + 1,
                reason: format!("bad page number {number:?}"),
            })?;
            if next == 0 {
                return Err(IngestError::MalformedBlock {
                    line: idx + 1,
                    reason: "page numbers start at 1".into(),
                });
            }
            if next < page {
                return Err(IngestError::PageDecrease { line: idx + 1, page: next, previous: page });
            }
            page = next;
            blocks.push(Block::page_break(page));
            continue;
        }
        if line.trim().is_empty() {
            flush(&mut para, page, &mut blocks);
            continue;
        }
        if markdown {
            if let Some((level, title)) = markdown_heading(line) {
                flush(&mut para, page, &mut blocks);
                if !title.is_empty() {
                    blocks.push(Block::heading(title, level, page));
                }
                continue;
            }
        }
        para.push(line.trim());
    }
    flush(&mut para, page, &mut blocks);
    Ok(blocks)
}

fn parse_block_json(text: &str) -> Result<Vec<Block>, IngestError> {
    let mut blocks = Vec::new();
    let mut page = 1u32;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let block: Block = serde_json::from_str(line).map_err(|e| IngestError::MalformedBlock {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if block.page == 0 {
            return Err(IngestError::MalformedBlock {
                line: idx + 1,
                reason: "page numbers start at 1".into(),
            });
        }
        if block.page < page {
            return Err(IngestError::PageDecrease { line: idx + 1, page: block.page, previous: page });
        }
        page = block.page;
        match block.kind {
            BlockKind::Paragraph if block.text.trim().is_empty() => {
                return Err(IngestError::MalformedBlock {
                    line: idx + 1,
                    reason: "paragraph text is empty".into(),
                });
            }
            BlockKind::Heading if block.heading_level.unwrap_or(0) == 0 => {
                return Err(IngestError::MalformedBlock {
                    line: idx + 1,
                    reason: "heading requires heading_level >= 1".into(),
                });
            }
            _ => {}
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// A piece of paragraph text waiting to be placed in a chunk.
#[derive(Debug, Clone)]
struct Segment {
    text: String,
    chars: usize,
    page: u32,
    paragraph: usize,
}

#[derive(Debug, Default)]
struct PendingChunk {
    segments: Vec<Segment>,
}

impl PendingChunk {
    fn joined_len_with(&self, next: &Segment) -> usize {
        self.len() + separator_len(self.segments.last(), next) + next.chars
    }

    fn len(&self) -> usize {
        let mut total = 0;
        let mut prev: Option<&Segment> = None;
        for seg in &self.segments {
            total += separator_len(prev, seg) + seg.chars;
            prev = Some(seg);
        }
        total
    }

    fn text(&self) -> String {
        let mut out = String::new();
        let mut prev: Option<&Segment> = None;
        for seg in &self.segments {
            if separator_len(prev, seg) > 0 {
                out.push_str(PARAGRAPH_SEPARATOR);
            }
            out.push_str(&seg.text);
            prev = Some(seg);
        }
        out
    }
}

// Pieces of one split paragraph are rejoined without a separator.
fn separator_len(prev: Option<&Segment>, next: &Segment) -> usize {
    match prev {
        Some(p) if p.paragraph != next.paragraph => PARAGRAPH_SEPARATOR.len(),
        _ => 0,
    }
}

/// Split text after each sentence delimiter (". ", "? ", "! ", or a newline).
/// The delimiter, including its trailing whitespace, stays with the left side.
fn sentence_atoms(text: &str) -> Vec<&str> {
    let mut atoms = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let cut = match c {
            '\n' => Some(i + 1),
            '.' | '?' | '!' => match chars.peek() {
                Some(&(j, ' ')) => {
                    chars.next();
                    Some(j + 1)
                }
                _ => None,
            },
            _ => None,
        };
        if let Some(end) = cut {
            atoms.push(&text[start..end]);
            start = end;
        }
    }
    if start < text.len() {
        atoms.push(&text[start..]);
    }
    atoms
}

/// Cut a string into pieces of at most `max` characters.
fn hard_split(text: &str, max: usize) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut count = 0;
    for (i, _) in text.char_indices() {
        if count == max {
            out.push(&text[start..i]);
            start = i;
            count = 0;
        }
        count += 1;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Break an oversized paragraph into pieces of at most `max_chars`, packing
/// sentences greedily while each piece stays under `target_chars`.
fn split_paragraph(text: &str, cfg: &ChunkingConfig) -> Vec<String> {
    let mut atoms: Vec<&str> = Vec::new();
    for atom in sentence_atoms(text) {
        if atom.chars().count() > cfg.max_chars {
            atoms.extend(hard_split(atom, cfg.max_chars));
        } else {
            atoms.push(atom);
        }
    }
    let mut pieces = Vec::new();
    let mut current = String::new();
    let mut current_len = 0;
    for atom in atoms {
        let len = atom.chars().count();
        if current_len > 0 && current_len + len >= cfg.target_chars {
            pieces.push(std::mem::take(&mut current));
            current_len = 0;
        }
        current.push_str(atom);
        current_len += len;
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces
}

struct ChunkBuilder<'a> {
    doc_id: &'a str,
    cfg: &'a ChunkingConfig,
    chunks: Vec<Chunk>,
    /// Segments of chunks emitted in the current section, kept so a short
    /// trailing chunk can be folded back into its predecessor.
    section_segments: Vec<Vec<Segment>>,
    pending: PendingChunk,
    section_path: Vec<String>,
    section_start: usize,
}

impl<'a> ChunkBuilder<'a> {
    fn push(&mut self, seg: Segment) {
        if !self.pending.segments.is_empty()
            && self.pending.joined_len_with(&seg) >= self.cfg.target_chars
        {
            self.close_chunk();
        }
        self.pending.segments.push(seg);
    }

    fn close_chunk(&mut self) {
        if self.pending.segments.is_empty() {
            return;
        }
        let pending = std::mem::take(&mut self.pending);
        self.chunks.push(self.make_chunk(&pending, self.chunks.len()));
        self.section_segments.push(pending.segments);
    }

    fn make_chunk(&self, pending: &PendingChunk, ordinal: usize) -> Chunk {
        let text = pending.text();
        Chunk {
            chunk_id: format!("{}#{:04}", self.doc_id, ordinal),
            doc_id: self.doc_id.to_string(),
            char_count: text.chars().count(),
            text,
            page_start: pending.segments.first().map_or(1, |s| s.page),
            page_end: pending.segments.last().map_or(1, |s| s.page),
            section_path: self.section_path.clone(),
        }
    }

    fn close_section(&mut self) {
        self.close_chunk();
        let emitted = self.chunks.len() - self.section_start;
        if emitted >= 2 {
            let last = self.chunks.len() - 1;
            if self.chunks[last].char_count < self.cfg.min_chars {
                let mut merged = PendingChunk::default();
                merged.segments.extend(self.section_segments[emitted - 2].iter().cloned());
                merged.segments.extend(self.section_segments[emitted - 1].iter().cloned());
                if merged.len() <= self.cfg.max_chars {
                    self.chunks.pop();
                    self.chunks[last - 1] = self.make_chunk(&merged, last - 1);
                }
            }
        }
        self.section_segments.clear();
        self.section_start = self.chunks.len();
    }
}

/// Split a document into chunks. Headings never appear in chunk text; they
/// are carried in `section_path`, and all heading levels close a chunk.
pub fn chunk_document(doc: &Document, cfg: &ChunkingConfig) -> Vec<Chunk> {
    let mut builder = ChunkBuilder {
        doc_id: &doc.doc_id,
        cfg,
        chunks: Vec::new(),
        section_segments: Vec::new(),
        pending: PendingChunk::default(),
        section_path: Vec::new(),
        section_start: 0,
    };
    let mut levels: Vec<u8> = Vec::new();
    let mut paragraph = 0;

    for block in &doc.blocks {
        match block.kind {
            BlockKind::PageBreak => {}
            BlockKind::Heading => {
                builder.close_section();
                let level = block.heading_level.unwrap_or(1);
                while levels.last().is_some_and(|&l| l >= level) {
                    levels.pop();
                    builder.section_path.pop();
                }
                levels.push(level);
                builder.section_path.push(block.text.trim().to_string());
            }
            BlockKind::Paragraph => {
                let chars = block.text.chars().count();
                if chars > cfg.max_chars {
                    for piece in split_paragraph(&block.text, cfg) {
                        let chars = piece.chars().count();
                        builder.push(Segment { text: piece, chars, page: block.page, paragraph });
                    }
                } else {
                    builder.push(Segment {
                        text: block.text.clone(),
                        chars,
                        page: block.page,
                        paragraph,
                    });
                }
                paragraph += 1;
            }
        }
    }
    builder.close_section();
    builder.chunks
}

/// The bundled sample corpus, parsed.
pub fn sample_corpus() -> Document {
    parse_document(SAMPLE_DOC_ID, SAMPLE_CORPUS, DocumentFormat::Markdown).expect("bundled corpus parses")
}
