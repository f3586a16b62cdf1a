// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary, WordPiece tokenization, document assembly and segment labels.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
/// Newline marker. Optional in a vocabulary; without it newlines are plain whitespace.
pub const NL: &str = "[NL]";

const MAX_WORD_CHARS: usize = 100;

/// Token ↔ id map. Ids are line numbers of the vocabulary file.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
    pub pad: usize,
    pub unk: usize,
    pub newline: Option<usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Invalid(format!("empty token on vocabulary line {}", id + 1)));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Invalid(format!("duplicate token {tok:?} on line {}", id + 1)));
            }
        }
        let need = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("vocabulary is missing {name}")))
        };
        Ok(Self {
            cls: need(CLS)?,
            sep: need(SEP)?,
            mask: need(MASK)?,
            pad: need(PAD)?,
            unk: need(UNK)?,
            newline: index.get(NL).copied(),
            tokens,
            index,
        })
    }

    /// Reads a one-token-per-line file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Builds a desk-scale vocabulary from raw texts: the specials, every
    /// character seen (bare and `##`-prefixed), then whole words by
    /// descending frequency until `max_size` entries.
    pub fn build(texts: &[&str], max_size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK, NL].iter().map(|s| s.to_string()).collect();
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for text in texts {
            for piece in basic_tokenize(text) {
                if let BasicPiece::Word(w) = piece {
                    let s: String = w.iter().map(|c| c.ch).collect();
                    for c in s.chars() {
                        chars.insert(c, ());
                    }
                    *word_freq.entry(s).or_default() += 1;
                }
            }
        }
        for &c in chars.keys() {
            tokens.push(c.to_string());
        }
        for &c in chars.keys() {
            tokens.push(format!("##{c}"));
        }
        let mut words: Vec<(String, usize)> = word_freq.into_iter().filter(|(w, _)| w.chars().count() > 1).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (w, _) in words {
            if tokens.len() >= max_size {
                break;
            }
            tokens.push(w);
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens excluded from masking, probes and AP attention.
    pub fn is_special(&self, id: usize) -> bool {
        id == self.cls || id == self.sep || id == self.pad
    }

    /// Ids that can stand in as random MLM replacements.
    pub fn replacement_ids(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&id| !self.is_special(id) && id != self.mask && id != self.unk)
            .collect()
    }

    /// Inverse of [`tokenize`] up to casing and whitespace.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            if Some(id) == self.newline {
                out.push('\n');
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK);
            if let Some(rest) = tok.strip_prefix("##") {
                out.push_str(rest);
            } else {
                if !out.is_empty() && !out.ends_with('\n') {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct LoweredChar {
    ch: char,
    start: usize,
    end: usize,
}

#[derive(Debug)]
enum BasicPiece {
    Word(Vec<LoweredChar>),
    Newline(usize),
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Lowercases, splits on whitespace and isolates punctuation. Runs of
/// newlines collapse into one newline piece.
fn basic_tokenize(text: &str) -> Vec<BasicPiece> {
    let mut pieces = Vec::new();
    let mut word: Vec<LoweredChar> = Vec::new();
    let flush = |word: &mut Vec<LoweredChar>, pieces: &mut Vec<BasicPiece>| {
        if !word.is_empty() {
            pieces.push(BasicPiece::Word(std::mem::take(word)));
        }
    };
    for (start, c) in text.char_indices() {
        let end = start + c.len_utf8();
        if c == '\n' {
            flush(&mut word, &mut pieces);
            if !matches!(pieces.last(), Some(BasicPiece::Newline(_))) {
                pieces.push(BasicPiece::Newline(start));
            }
        } else if c.is_whitespace() {
            flush(&mut word, &mut pieces);
        } else if c.is_control() {
            continue;
        } else if is_punct(c) {
            flush(&mut word, &mut pieces);
            pieces.push(BasicPiece::Word(vec![LoweredChar { ch: c, start, end }]));
        } else {
            for ch in c.to_lowercase() {
                word.push(LoweredChar { ch, start, end });
            }
        }
    }
    flush(&mut word, &mut pieces);
    pieces
}

/// Greedy longest-match WordPiece. A word with any unmatched remainder
/// becomes a single `[UNK]`.
fn wordpiece(word: &[LoweredChar], vocab: &Vocab, out: &mut Vec<(usize, (usize, usize))>) {
    let span = (word[0].start, word[word.len() - 1].end);
    if word.len() > MAX_WORD_CHARS {
        out.push((vocab.unk, span));
        return;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < word.len() {
        let mut end = word.len();
        let mut found = None;
        while end > start {
            let mut cand: String = word[start..end].iter().map(|c| c.ch).collect();
            if start > 0 {
                cand.insert_str(0, "##");
            }
            if let Some(id) = vocab.id(&cand) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                pieces.push((id, (word[start].start, word[end - 1].end)));
                start = end;
            }
            None => {
                out.push((vocab.unk, span));
                return;
            }
        }
    }
    out.extend(pieces);
}

/// Tokenizes without [CLS]/[SEP]. Each id is paired with its byte span in `text`.
pub fn encode_body(text: &str, vocab: &Vocab) -> Vec<(usize, (usize, usize))> {
    let mut out = Vec::new();
    for piece in basic_tokenize(text) {
        match piece {
            BasicPiece::Word(w) => wordpiece(&w, vocab, &mut out),
            BasicPiece::Newline(at) => {
                if let Some(nl) = vocab.newline {
                    out.push((nl, (at, at + 1)));
                }
            }
        }
    }
    out
}

/// A token sequence wrapped in [CLS] … [SEP].
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub ids: Vec<usize>,
    /// Byte span of each token in its source text; specials carry `(0, 0)`.
    pub offsets: Vec<(usize, usize)>,
}

impl Document {
    pub fn from_body(body: &[(usize, (usize, usize))], vocab: &Vocab) -> Self {
        let mut ids = Vec::with_capacity(body.len() + 2);
        let mut offsets = Vec::with_capacity(body.len() + 2);
        ids.push(vocab.cls);
        offsets.push((0, 0));
        for &(id, span) in body {
            ids.push(id);
            offsets.push(span);
        }
        ids.push(vocab.sep);
        offsets.push((0, 0));
        Self { ids, offsets }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Special-token flags used by the attention rules.
    pub fn special_mask(&self, vocab: &Vocab) -> Vec<bool> {
        self.ids.iter().map(|&id| vocab.is_special(id)).collect()
    }

    pub fn validate(&self, vocab: &Vocab, max_len: usize) -> Result<()> {
        let n = self.ids.len();
        if n < 2 || self.ids[0] != vocab.cls || self.ids[n - 1] != vocab.sep {
            return Err(Error::Invalid("document must start with [CLS] and end with [SEP]".into()));
        }
        if self.ids[1..n - 1].iter().any(|&id| id == vocab.cls || id == vocab.sep) {
            return Err(Error::Invalid("document has interior [CLS]/[SEP]".into()));
        }
        if n > max_len {
            return Err(Error::Invalid(format!("document of {n} tokens exceeds {max_len}")));
        }
        if self.ids.iter().any(|&id| id >= vocab.len()) {
            return Err(Error::Invalid("token id outside vocabulary".into()));
        }
        Ok(())
    }
}

/// Tokenizes `text` into a document of at most `max_len` tokens.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Document> {
    if max_len < 3 {
        return Err(Error::Invalid(format!("max_len {max_len} leaves no room for text")));
    }
    let mut body = encode_body(text, vocab);
    if body.is_empty() {
        return Err(Error::Invalid("cannot tokenize empty text".into()));
    }
    body.truncate(max_len - 2);
    Ok(Document::from_body(&body, vocab))
}

/// Which token strings close a segment. `'\n'` stands for the [NL] token.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySet {
    chars: Vec<char>,
}

impl Default for BoundarySet {
    fn default() -> Self {
        Self { chars: vec!['.', '!', '?', '\n'] }
    }
}

impl BoundarySet {
    pub fn from_chars(spec: &str) -> Self {
        let mut chars: Vec<char> = spec.chars().collect();
        chars.dedup();
        Self { chars }
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    fn ids(&self, vocab: &Vocab) -> Vec<usize> {
        self.chars
            .iter()
            .filter_map(|&c| if c == '\n' { vocab.newline } else { vocab.id(&c.to_string()) })
            .collect()
    }
}

/// Per-token segment structure. Specials carry `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentLabels {
    pub segment: Vec<Option<usize>>,
    /// `(index − segment start) / (L_k − 1)`; 0 for singleton segments.
    pub intra: Vec<Option<f64>>,
    pub lengths: Vec<usize>,
    /// Tokens whose segment has length 1.
    pub singleton: Vec<bool>,
}

impl SegmentLabels {
    pub fn num_segments(&self) -> usize {
        self.lengths.len()
    }
}

pub fn segment_labels(doc: &Document, vocab: &Vocab, boundaries: &BoundarySet) -> SegmentLabels {
    let boundary_ids = boundaries.ids(vocab);
    let n = doc.len();
    let mut segment = vec![None; n];
    let mut lengths: Vec<usize> = Vec::new();
    let mut current = 0usize;
    let mut open = false;
    for (i, &id) in doc.ids.iter().enumerate() {
        if vocab.is_special(id) {
            continue;
        }
        if !open {
            lengths.push(0);
            open = true;
        }
        segment[i] = Some(current);
        lengths[current] += 1;
        if boundary_ids.contains(&id) {
            current += 1;
            open = false;
        }
    }
    let mut intra = vec![None; n];
    let mut singleton = vec![false; n];
    let mut seen = vec![0usize; lengths.len()];
    for i in 0..n {
        if let Some(s) = segment[i] {
            let len = lengths[s];
            intra[i] = Some(if len > 1 { seen[s] as f64 / (len - 1) as f64 } else { 0.0 });
            singleton[i] = len == 1;
            seen[s] += 1;
        }
    }
    SegmentLabels { segment, intra, lengths, singleton }
}

fn list_text_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no .txt files in {}", dir.display())));
    }
    Ok(files)
}

/// Reads every `.txt` file of a directory, sorted by name.
pub fn read_texts(dir: &Path) -> Result<Vec<String>> {
    list_text_files(dir)?
        .into_iter()
        .map(|p| fs::read_to_string(&p).map_err(|e| Error::io(&p, e)))
        .collect()
}

/// Builds documents from texts. With `concat`, texts are joined by newlines
/// and cut into documents of exactly `max_len` tokens (the trailing partial
/// chunk is dropped); otherwise each text becomes one truncated document.
pub fn build_documents(texts: &[String], vocab: &Vocab, max_len: usize, concat: bool) -> Result<Vec<Document>> {
    if max_len < 3 {
        return Err(Error::Invalid(format!("max_len {max_len} leaves no room for text")));
    }
    if concat {
        let joined = texts.join("\n");
        let body = encode_body(&joined, vocab);
        Ok(body.chunks_exact(max_len - 2).map(|c| Document::from_body(c, vocab)).collect())
    } else {
        texts.iter().filter(|t| !t.trim().is_empty()).map(|t| tokenize(t, vocab, max_len)).collect()
    }
}

/// The small corpus shipped with this crate.
pub fn bundled_corpus_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("corpus")
}

/// Tokens per desk training document, `[CLS]` and `[SEP]` included.
pub const DESK_DOC_LEN: usize = 32;
/// Upper bound on the generated desk vocabulary.
pub const DESK_VOCAB_MAX: usize = 2000;

/// Vocabulary and fixed-length documents for a directory of texts.
pub fn desk_corpus(dir: &Path) -> Result<(Vocab, Vec<Document>)> {
    let texts = read_texts(dir)?;
    let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
    let vocab = Vocab::build(&refs, DESK_VOCAB_MAX)?;
    let docs = build_documents(&texts, &vocab, DESK_DOC_LEN, true)?;
    Ok((vocab, docs))
}

pub fn build_corpus(dir: &Path, vocab: &Vocab, max_len: usize, concat: bool) -> Result<Vec<Document>> {
    build_documents(&read_texts(dir)?, vocab, max_len, concat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocab {
        let mut toks: Vec<String> = [PAD, UNK, CLS, SEP, MASK, NL].iter().map(|s| s.to_string()).collect();
        toks.extend(words.iter().map(|s| s.to_string()));
        Vocab::from_tokens(toks).unwrap()
    }

    #[test]
    fn load_assigns_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        fs::write(&p, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n").unwrap();
        let v = Vocab::load(&p).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!((v.pad, v.unk, v.cls, v.sep, v.mask), (0, 1, 2, 3, 4));
        assert_eq!(v.newline, None);
    }

    #[test]
    fn load_rejects_missing_mask_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        fs::write(&p, "[PAD]\n[UNK]\n[CLS]\n[SEP]\nhello\n").unwrap();
        assert!(Vocab::load(&p).unwrap_err().to_string().contains("[MASK]"));
        fs::write(&p, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\na\n").unwrap();
        assert!(Vocab::load(&p).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn tokenize_edge_cases() {
        let v = vocab(&["hello", "un", "##aff", "##able", "."]);
        assert!(tokenize("", &v, 16).is_err());
        assert!(tokenize("  \t ", &v, 16).is_err());
        let d = tokenize("Hello", &v, 16).unwrap();
        assert_eq!(d.ids, vec![v.cls, v.id("hello").unwrap(), v.sep]);
        let d = tokenize("unaffable.", &v, 16).unwrap();
        let names: Vec<_> = d.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(names, [CLS, "un", "##aff", "##able", ".", SEP]);
        // "unaffx" can match "un" + "##aff" but not the trailing "x".
        let d = tokenize("unaffx hello", &v, 16).unwrap();
        assert_eq!(d.ids[1..3], [v.unk, v.id("hello").unwrap()]);
    }

    #[test]
    fn truncation_keeps_wrapping() {
        let v = vocab(&["a"]);
        let d = tokenize("a a a a a a a a", &v, 5).unwrap();
        assert_eq!(d.len(), 5);
        d.validate(&v, 5).unwrap();
    }

    #[test]
    fn newline_runs_collapse() {
        let v = vocab(&["a", "b"]);
        let d = tokenize("a\n\n\nb", &v, 16).unwrap();
        assert_eq!(d.ids[1..4], [v.id("a").unwrap(), v.newline.unwrap(), v.id("b").unwrap()]);
    }

    #[test]
    fn segments_follow_boundaries() {
        let v = vocab(&["a", "b", "c", "d", ".", "!"]);
        let d = tokenize("a b. c d.", &v, 32).unwrap();
        let s = segment_labels(&d, &v, &BoundarySet::default());
        let body: Vec<_> = s.segment[1..d.len() - 1].iter().map(|x| x.unwrap()).collect();
        assert_eq!(body, [0, 0, 0, 1, 1, 1]);
        assert_eq!(s.segment[0], None);
        assert_eq!(s.intra[1], Some(0.0));
        assert_eq!(s.intra[3], Some(1.0));
        assert_eq!(s.intra[2], Some(0.5));

        let d = tokenize("a b c", &v, 32).unwrap();
        let s = segment_labels(&d, &v, &BoundarySet::default());
        assert!(s.segment[1..4].iter().all(|x| *x == Some(0)));
    }

    #[test]
    fn singleton_segments_are_flagged() {
        let v = vocab(&["a", "."]);
        let d = tokenize("a. . a", &v, 32).unwrap();
        let s = segment_labels(&d, &v, &BoundarySet::default());
        assert_eq!(s.lengths, vec![2, 1, 1]);
        assert_eq!(s.intra[3], Some(0.0));
        assert!(s.singleton[3]);
        assert!(!s.singleton[1]);
    }

    #[test]
    fn boundary_override() {
        let v = vocab(&["a", ";", "."]);
        let d = tokenize("a ; a . a", &v, 32).unwrap();
        let s = segment_labels(&d, &v, &BoundarySet::from_chars(";"));
        assert_eq!(s.num_segments(), 2);
    }

    #[test]
    fn concat_chunks_exactly() {
        let v = vocab(&["w"]);
        let text = vec!["w ".repeat(1030)];
        let docs = build_documents(&text, &v, 512, true).unwrap();
        assert_eq!(docs.len(), 2);
        assert!(docs.iter().all(|d| d.len() == 512 && d.validate(&v, 512).is_ok()));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab(&[]);
        assert!(build_corpus(dir.path(), &v, 64, true).is_err());
    }
}
