//! ABC notation: the fixed 164-token target vocabulary, greedy tokenization,
//! header parsing and the structural checks used for filtering and probing.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// The shipped list of merged notations, one per line.
pub const MERGED_TOKENS: &str = include_str!("../data/abc_merged_tokens.txt");

pub const ABC_VOCAB_SIZE: usize = 164;
pub const MERGED_TOKEN_COUNT: usize = 65;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SPECIAL_NAMES: [&str; 3] = ["<pad>", "<s>", "</s>"];

/// Barline tokens, longest first so scanning is greedy.
const BARLINES: [&str; 6] = ["|:", ":|", "||", "|]", "[|", "|"];

/// Character-level vocabulary over printable ASCII plus newline, with a set of
/// merged multi-character notations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbcVocab {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
    /// Merged tokens sorted by descending length for longest-match lookup.
    merged_by_len: Vec<(String, usize)>,
    max_merged_len: usize,
}

impl AbcVocab {
    /// Builds the vocabulary from the list compiled into the crate.
    pub fn standard() -> Self {
        Self::from_merged_list(MERGED_TOKENS).expect("shipped merged-token list is valid")
    }

    /// Builds the vocabulary from a newline-separated merged-token list.
    pub fn from_merged_list(list: &str) -> Result<Self> {
        let merged: Vec<&str> = list.lines().filter(|l| !l.is_empty()).collect();

        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.push("\n".to_string());
        tokens.extend((0x20u8..=0x7e).map(|b| (b as char).to_string()));
        let base_len = tokens.len();

        for tok in &merged {
            if tok.chars().count() < 2 {
                return Err(Error::Config(format!("merged token {tok:?} is not multi-character")));
            }
            if let Some(c) = tok.chars().find(|c| !is_base_char(*c)) {
                return Err(Error::Config(format!("merged token {tok:?} contains {c:?}")));
            }
            if SPECIAL_NAMES.contains(tok) {
                return Err(Error::Config(format!("merged token {tok:?} shadows a special")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() != ABC_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "ABC vocabulary has {} tokens ({} base + {} merged), expected {ABC_VOCAB_SIZE}",
                tokens.len(),
                base_len,
                merged.len()
            )));
        }

        let mut id_of = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if id_of.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
        }

        let mut merged_by_len: Vec<(String, usize)> = tokens[base_len..]
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), base_len + i))
            .collect();
        merged_by_len.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        let max_merged_len = merged_by_len.first().map_or(0, |(t, _)| t.len());

        Ok(AbcVocab {
            tokens,
            id_of,
            merged_by_len,
            max_merged_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIAL_NAMES.len()
    }

    /// Greedy longest-match segmentation, falling back to single characters.
    pub fn tokenize(&self, s: &str) -> Result<Vec<usize>> {
        let bytes = s.as_bytes();
        let mut ids = Vec::with_capacity(s.len());
        let mut pos = 0;
        'outer: while pos < bytes.len() {
            let rest = &s[pos..];
            if rest.len() >= 2 {
                for (tok, id) in &self.merged_by_len {
                    if tok.len() <= rest.len() && rest.as_bytes().starts_with(tok.as_bytes()) {
                        ids.push(*id);
                        pos += tok.len();
                        continue 'outer;
                    }
                }
            }
            let ch = rest.chars().next().expect("non-empty");
            if !is_base_char(ch) {
                return Err(Error::Untokenizable { offset: pos, ch });
            }
            ids.push(self.id_of[&ch.to_string()]);
            pos += 1;
        }
        Ok(ids)
    }

    /// Concatenates token strings, skipping PAD/BOS/EOS.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            let tok = self.tokens.get(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.tokens.len(),
            })?;
            if !self.is_special(id) {
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    pub fn max_merged_len(&self) -> usize {
        self.max_merged_len
    }
}

impl Default for AbcVocab {
    fn default() -> Self {
        Self::standard()
    }
}

fn is_base_char(c: char) -> bool {
    c == '\n' || (' '..='~').contains(&c)
}

/// Free-function form of [`AbcVocab::standard`].
pub fn build_abc_vocab() -> AbcVocab {
    AbcVocab::standard()
}

/// A tune split into its header block and music body.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TuneDocument {
    pub headers: Vec<(char, String)>,
    pub body: String,
    /// Whether the last header line ended with a newline. Only false when the
    /// input ends on a header line.
    pub header_terminated: bool,
}

impl TuneDocument {
    /// Reproduces the original string byte-for-byte.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let n = self.headers.len();
        for (i, (letter, value)) in self.headers.iter().enumerate() {
            let _ = write!(out, "{letter}:{value}");
            if i + 1 < n || self.header_terminated {
                out.push('\n');
            }
        }
        out.push_str(&self.body);
        out
    }

    pub fn header(&self, letter: char) -> Option<&str> {
        self.headers
            .iter()
            .rev()
            .find(|(l, _)| *l == letter)
            .map(|(_, v)| v.as_str())
    }
}

fn header_line(line: &str) -> Option<(char, &str)> {
    let mut chars = line.chars();
    let letter = chars.next()?;
    if letter.is_ascii_uppercase() && chars.next() == Some(':') {
        Some((letter, &line[2..]))
    } else {
        None
    }
}

/// Splits leading `<Letter>:<value>` lines from the body; the first `K:` line
/// closes the header block.
pub fn parse_headers(s: &str) -> TuneDocument {
    let mut doc = TuneDocument {
        header_terminated: true,
        ..TuneDocument::default()
    };
    let mut pos = 0;
    while pos < s.len() {
        let (line, next, terminated) = match s[pos..].find('\n') {
            Some(i) => (&s[pos..pos + i], pos + i + 1, true),
            None => (&s[pos..], s.len(), false),
        };
        let Some((letter, value)) = header_line(line) else {
            break;
        };
        doc.headers.push((letter, value.to_string()));
        doc.header_terminated = terminated;
        pos = next;
        if letter == 'K' {
            break;
        }
    }
    doc.body = s[pos..].to_string();
    doc
}

/// Key, meter and unit length as written in a tune's header.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetaInfo {
    pub key: Option<String>,
    pub meter: Option<String>,
    pub unit_length: Option<String>,
}

/// Last occurrence of each field wins.
pub fn extract_meta(doc: &TuneDocument) -> MetaInfo {
    let field = |letter| doc.header(letter).map(|v| v.trim().to_string());
    MetaInfo {
        key: field('K'),
        meter: field('M'),
        unit_length: field('L'),
    }
}

/// Splits a body into the music spans between barlines (spans may be blank).
fn bar_spans(body: &str) -> Vec<&str> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    let bytes = body.as_bytes();
    while pos < bytes.len() {
        if let Some(bar) = BARLINES.iter().find(|b| bytes[pos..].starts_with(b.as_bytes())) {
            spans.push(&body[start..pos]);
            pos += bar.len();
            start = pos;
        } else {
            pos += 1;
        }
    }
    spans.push(&body[start..]);
    spans
}

/// Number of non-blank music spans separated by barlines. Repeat barlines
/// separate bars; they are not bars themselves.
pub fn count_bars(body: &str) -> usize {
    bar_spans(body)
        .into_iter()
        .filter(|s| !s.trim().is_empty())
        .count()
}

/// Returns the unit when some bar repeats at least `min_repeats` times in a row.
pub fn detect_degeneration(body: &str, min_repeats: usize) -> Option<String> {
    let min_repeats = min_repeats.max(2);
    let units: Vec<&str> = bar_spans(body)
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let mut run = 1;
    for i in 1..units.len() {
        if units[i] == units[i - 1] {
            run += 1;
            if run >= min_repeats {
                return Some(units[i].to_string());
            }
        } else {
            run = 1;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &AbcVocab, s: &str) -> Vec<String> {
        v.tokenize(s)
            .unwrap()
            .into_iter()
            .map(|id| v.token(id).unwrap().to_string())
            .collect()
    }

    #[test]
    fn vocab_has_paper_size_and_bijection() {
        let v = build_abc_vocab();
        assert_eq!(v.len(), 164);
        for (id, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id_of(t), Some(id));
        }
        let c = v.id_of("C").unwrap();
        assert_eq!(v.token(c), Some("C"));
        assert!(v.id_of("|:").is_some());
        for b in 0x20u8..=0x7e {
            assert!(v.id_of(&(b as char).to_string()).is_some());
        }
        assert!(v.id_of("\n").is_some());
    }

    #[test]
    fn merged_list_size_is_checked() {
        let short: String = MERGED_TOKENS.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(AbcVocab::from_merged_list(&short), Err(Error::Config(_))));
        assert!(AbcVocab::from_merged_list("").is_err());
        let dup = format!("{MERGED_TOKENS}|:\n");
        assert!(AbcVocab::from_merged_list(&dup).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = build_abc_vocab();
        assert_eq!(toks(&v, "C D E|"), ["C", " ", "D", " ", "E", "|"]);
        assert_eq!(toks(&v, "|:G2:|"), ["|:", "G", "2", ":|"]);
        assert!(v.tokenize("").unwrap().is_empty());
    }

    /// Independent greedy longest-match: try every candidate length from the
    /// longest possible down to two characters.
    fn greedy_oracle(s: &str) -> Vec<String> {
        let merged: Vec<&str> = MERGED_TOKENS.lines().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < s.len() {
            let mut taken = None;
            for len in (2..=s.len() - i).rev() {
                if merged.contains(&&s[i..i + len]) {
                    taken = Some(len);
                    break;
                }
            }
            let len = taken.unwrap_or(1);
            out.push(s[i..i + len].to_string());
            i += len;
        }
        out
    }

    #[test]
    fn tokenize_agrees_with_oracle() {
        let v = build_abc_vocab();
        for s in ["|:G2:|", "X:1\nM:6/8\nL:1/8\nK:D\n|:dAF z8 :|", "[1 abc :|[2 def |]", "!trill!c2 (3abc"] {
            assert_eq!(toks(&v, s), greedy_oracle(s), "{s:?}");
        }
    }

    #[test]
    fn untokenizable_reports_offset() {
        let v = build_abc_vocab();
        match v.tokenize("AB\u{e9}C") {
            Err(Error::Untokenizable { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        assert!(v.tokenize("a\tb").is_err());
    }

    #[test]
    fn detokenize_roundtrip_and_specials() {
        let v = build_abc_vocab();
        let s = "X:1\nK:C\nCDEF|";
        let ids = v.tokenize(s).unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), s);
        assert_eq!(v.detokenize(&[]).unwrap(), "");
        let mut with = vec![BOS];
        with.extend(&ids);
        with.push(EOS);
        assert_eq!(v.detokenize(&with).unwrap(), s);
        assert!(matches!(
            v.detokenize(&[164]),
            Err(Error::TokenOutOfRange { id: 164, .. })
        ));
    }

    #[test]
    fn header_examples() {
        let d = parse_headers("X:1\nK:D\nDEF|");
        assert_eq!(d.headers, vec![('X', "1".into()), ('K', "D".into())]);
        assert_eq!(d.body, "DEF|");

        let d = parse_headers("DEF|");
        assert!(d.headers.is_empty());
        assert_eq!(d.body, "DEF|");

        let d = parse_headers("X:1\nM:6/8\nK:D\nA|");
        assert_eq!(d.headers.len(), 3);
        assert_eq!(d.body, "A|");

        let d = parse_headers("X:1\nK:D\nw:lyrics\nK:G\nA|");
        assert_eq!(d.headers.len(), 2);
        assert_eq!(d.body, "w:lyrics\nK:G\nA|");
    }

    #[test]
    fn serialize_is_byte_exact() {
        for s in [
            "X:1\nK:D\nDEF|",
            "DEF|",
            "",
            "X:1\nK:D",
            "X:1\nT:t\n",
            "X: 1 \r\nK:D\r\nA|\r\n",
            "x:1\nK:D\n",
        ] {
            assert_eq!(parse_headers(s).serialize(), s, "{s:?}");
        }
    }

    #[test]
    fn meta_examples() {
        let doc = TuneDocument {
            headers: vec![('K', "D".into()), ('M', "6/8".into())],
            ..Default::default()
        };
        let m = extract_meta(&doc);
        assert_eq!(m.key.as_deref(), Some("D"));
        assert_eq!(m.meter.as_deref(), Some("6/8"));
        assert_eq!(m.unit_length, None);

        assert_eq!(extract_meta(&TuneDocument::default()), MetaInfo::default());

        let doc = TuneDocument {
            headers: vec![('M', "4/4".into()), ('M', " 6/8 ".into())],
            ..Default::default()
        };
        assert_eq!(extract_meta(&doc).meter.as_deref(), Some("6/8"));
    }

    #[test]
    fn bar_count_examples() {
        assert_eq!(count_bars("A|B|C|D|E|F|G|A|"), 8);
        assert_eq!(count_bars(""), 0);
        assert_eq!(count_bars("ab|:cd:|ef||"), 3);
        assert_eq!(count_bars("[|ab|]"), 1);
        assert_eq!(count_bars("ab | cd |\n"), 2);
    }

    #[test]
    fn degeneration_examples() {
        assert_eq!(detect_degeneration("z8|z8|z8|z8", 3).as_deref(), Some("z8"));
        assert_eq!(detect_degeneration("A|B|C|D", 2), None);
        assert_eq!(detect_degeneration("ab|ab|cd", 2).as_deref(), Some("ab"));
        assert_eq!(detect_degeneration("ab|ab|cd", 3), None);
    }
}
