//! Text-tune pair files, corpus filters and a rule-based synthetic corpus.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::abc::{count_bars, parse_headers, AbcVocab};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Tunes shorter than this many bars are filtered out.
pub const MIN_BARS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextTunePair {
    pub text: String,
    pub abc: String,
}

/// A skipped record in lenient loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadWarning {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadedPairs {
    pub pairs: Vec<TextTunePair>,
    pub warnings: Vec<LoadWarning>,
}

/// Parses JSON-lines records `{"text": ..., "abc": ...}`. Blank lines are
/// ignored. Malformed lines become warnings, or an error when `strict`.
pub fn parse_pairs(content: &str, strict: bool) -> Result<LoadedPairs> {
    let mut out = LoadedPairs::default();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TextTunePair>(line) {
            Ok(p) => out.pairs.push(p),
            Err(e) if strict => {
                return Err(Error::Malformed {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
            Err(e) => out.warnings.push(LoadWarning {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn load_pairs(path: impl AsRef<Path>, strict: bool) -> Result<LoadedPairs> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&content, strict)
}

pub fn pairs_to_string(pairs: &[TextTunePair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[TextTunePair]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(pairs_to_string(pairs)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    EmptyText,
    EmptyTune,
    Untokenizable,
    TooFewBars,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::EmptyText => "empty_text",
            RejectReason::EmptyTune => "empty_tune",
            RejectReason::Untokenizable => "untokenizable",
            RejectReason::TooFewBars => "too_few_bars",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilterOutcome {
    pub kept: Vec<TextTunePair>,
    pub rejected: Vec<(TextTunePair, RejectReason)>,
}

/// First failing check for a pair, if any.
pub fn check_pair(pair: &TextTunePair, vocab: &AbcVocab) -> Option<RejectReason> {
    if pair.text.trim().is_empty() {
        return Some(RejectReason::EmptyText);
    }
    if pair.abc.trim().is_empty() {
        return Some(RejectReason::EmptyTune);
    }
    if vocab.tokenize(&pair.abc).is_err() {
        return Some(RejectReason::Untokenizable);
    }
    if count_bars(&parse_headers(&pair.abc).body) < MIN_BARS {
        return Some(RejectReason::TooFewBars);
    }
    None
}

pub fn filter_pairs(pairs: Vec<TextTunePair>, vocab: &AbcVocab) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for p in pairs {
        match check_pair(&p, vocab) {
            None => out.kept.push(p),
            Some(r) => out.rejected.push((p, r)),
        }
    }
    out
}

/// Pairs sharing an identical tune body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateCluster {
    pub body: String,
    /// Indices into the input, ascending.
    pub members: Vec<usize>,
}

impl DuplicateCluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Groups pairs by exact body equality. Every pair lands in exactly one
/// cluster; clusters are ordered by their first member.
pub fn dedupe_report(pairs: &[TextTunePair]) -> Vec<DuplicateCluster> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut clusters: Vec<DuplicateCluster> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let body = parse_headers(&p.abc).body;
        match index.get(&body) {
            Some(&c) => clusters[c].members.push(i),
            None => {
                index.insert(body.clone(), clusters.len());
                clusters.push(DuplicateCluster {
                    body,
                    members: vec![i],
                });
            }
        }
    }
    clusters
}

/// A key the generator can use: ABC header value and spoken name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthKey {
    pub header: &'static str,
    pub name: &'static str,
    /// Tonic letter as written in the lower octave.
    pub tonic: char,
}

pub const SYNTH_KEYS: [SynthKey; 12] = [
    SynthKey { header: "D", name: "D major", tonic: 'D' },
    SynthKey { header: "G", name: "G major", tonic: 'G' },
    SynthKey { header: "A", name: "A major", tonic: 'A' },
    SynthKey { header: "C", name: "C major", tonic: 'C' },
    SynthKey { header: "F", name: "F major", tonic: 'F' },
    SynthKey { header: "Emin", name: "E minor", tonic: 'E' },
    SynthKey { header: "Amin", name: "A minor", tonic: 'A' },
    SynthKey { header: "Bmin", name: "B minor", tonic: 'B' },
    SynthKey { header: "Dmin", name: "D minor", tonic: 'D' },
    SynthKey { header: "ADor", name: "A dorian", tonic: 'A' },
    SynthKey { header: "EDor", name: "E dorian", tonic: 'E' },
    SynthKey { header: "DMix", name: "D mixolydian", tonic: 'D' },
];

pub const SYNTH_METERS: [&str; 3] = ["4/4", "3/4", "6/8"];

const STYLES_4_4: [&str; 4] = ["reel", "hornpipe", "march", "barndance"];
const STYLES_3_4: [&str; 3] = ["waltz", "mazurka", "air"];
const STYLES_6_8: [&str; 3] = ["jig", "single jig", "march"];

const ADJECTIVES: [&str; 12] = [
    "Green", "Lonely", "Merry", "Silver", "Windy", "Old", "Humours", "Bright", "Wandering", "Quiet",
    "Golden", "Stony",
];
const NOUNS: [&str; 12] = [
    "Meadow", "Harbour", "Piper", "Hills", "Lark", "Miller", "Road", "Bridge", "Widow", "Fiddler",
    "Shore", "Garden",
];
const MOODS: [&str; 8] = [
    "lively", "gentle", "cheerful", "brisk", "wistful", "sprightly", "stately", "bouncy",
];

/// Pitch ladder from C to b; notes are written diatonically and the key
/// signature supplies accidentals.
const LADDER: [&str; 14] = [
    "C", "D", "E", "F", "G", "A", "B", "c", "d", "e", "f", "g", "a", "b",
];

fn style_for(meter: &str, rng: &mut Rng) -> &'static str {
    match meter {
        "4/4" => *rng.choose(&STYLES_4_4),
        "3/4" => *rng.choose(&STYLES_3_4),
        _ => *rng.choose(&STYLES_6_8),
    }
}

fn duration(len: usize) -> String {
    if len == 1 {
        String::new()
    } else {
        len.to_string()
    }
}

struct Melody<'a> {
    rng: &'a mut Rng,
    pos: usize,
}

impl Melody<'_> {
    fn note(&mut self, len: usize) -> String {
        const STEPS: [i32; 7] = [-2, -1, -1, 0, 1, 1, 2];
        let step = *self.rng.choose(&STEPS);
        self.pos = (self.pos as i32 + step).clamp(1, 12) as usize;
        format!("{}{}", LADDER[self.pos], duration(len))
    }

    fn beat(&mut self, eighths: usize) -> String {
        let pattern: &[usize] = if eighths == 2 {
            if self.rng.bernoulli(0.7) {
                &[1, 1]
            } else {
                &[2]
            }
        } else {
            let u = self.rng.uniform();
            if u < 0.6 {
                &[1, 1, 1]
            } else if u < 0.9 {
                &[2, 1]
            } else {
                &[3]
            }
        };
        pattern.iter().map(|&l| self.note(l)).collect()
    }

    fn bar(&mut self, meter: &str) -> String {
        match meter {
            "4/4" => {
                let first: String = (0..2).map(|_| self.beat(2)).collect();
                let second: String = (0..2).map(|_| self.beat(2)).collect();
                format!("{first} {second}")
            }
            "3/4" => (0..3).map(|_| self.beat(2)).collect::<Vec<_>>().join(" "),
            _ => (0..2).map(|_| self.beat(3)).collect::<Vec<_>>().join(" "),
        }
    }
}

fn final_bar(key: &SynthKey, meter: &str) -> String {
    let len = if meter == "4/4" { 8 } else { 6 };
    format!("{}{}", key.tonic, len)
}

fn tonic_position(key: &SynthKey) -> usize {
    LADDER
        .iter()
        .position(|n| n.starts_with(key.tonic))
        .expect("tonic on ladder")
}

/// Bars joined with `|`, a line break after every fourth bar.
fn join_bars(bars: &[String], open: &str, close: &str) -> String {
    let mut out = String::from(open);
    for (i, bar) in bars.iter().enumerate() {
        out.push_str(bar);
        if i + 1 == bars.len() {
            out.push_str(close);
        } else {
            out.push('|');
            if (i + 1) % 4 == 0 {
                out.push('\n');
            }
        }
    }
    out
}

fn tune_body(key: &SynthKey, meter: &str, rng: &mut Rng) -> String {
    let aabb = rng.bernoulli(0.4);
    let part = |rng: &mut Rng, n: usize| -> Vec<String> {
        let mut m = Melody {
            pos: tonic_position(key),
            rng,
        };
        let mut bars: Vec<String> = (0..n - 1).map(|_| m.bar(meter)).collect();
        bars.push(final_bar(key, meter));
        bars
    };
    if aabb {
        let n = if rng.bernoulli(0.5) { 4 } else { 8 };
        let a = part(rng, n);
        let b = part(rng, n);
        format!("{}\n{}", join_bars(&a, "|:", ":|"), join_bars(&b, "|:", ":|"))
    } else {
        let n = 8 + rng.below(9);
        join_bars(&part(rng, n), "", "|]")
    }
}

fn list_description(title: &str, key: &SynthKey, meter: &str, style: &str) -> String {
    format!("Title: {title}; Key: {}; Meter: {meter}; Style: {style}", key.name)
}

fn prose_description(title: &str, key: &SynthKey, meter: &str, style: &str, rng: &mut Rng) -> String {
    let mood = *rng.choose(&MOODS);
    let k = key.name;
    match rng.below(5) {
        0 => format!("A {mood} {style} in {k}, in {meter} time."),
        1 => format!("This {style} is set in {k} and moves along in {meter}."),
        2 => format!("{title} is a {mood} tune in {meter}, played in the key of {k}."),
        3 => format!("Written in {meter}, this {mood} {style} sits comfortably in {k}."),
        _ => format!("A {style} called {title}. It is in {k} with a {meter} pulse and a {mood} feel."),
    }
}

/// Rule-generated pairs. `format_mix` is the fraction of list-format
/// descriptions; the rest are prose. Key and meter stated in the text always
/// match the tune header.
pub fn synth_corpus(n: usize, seed: u64, format_mix: f64) -> Result<Vec<TextTunePair>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&format_mix) {
        return Err(Error::InvalidArgument(format!(
            "format mix {format_mix} outside [0, 1]"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let key = *rng.choose(&SYNTH_KEYS);
        let meter = *rng.choose(&SYNTH_METERS);
        let style = style_for(meter, &mut rng);
        let title = format!("The {} {}", rng.choose(&ADJECTIVES), rng.choose(&NOUNS));
        let body = tune_body(&key, meter, &mut rng);
        // Each record is a standalone single-tune file, hence always X:1.
        let abc = format!("X:1\nT:{title}\nM:{meter}\nL:1/8\nK:{}\n{body}", key.header);
        let text = if rng.uniform() < format_mix {
            list_description(&title, &key, meter, style)
        } else {
            prose_description(&title, &key, meter, style, &mut rng)
        };
        out.push(TextTunePair { text, abc });
    }
    Ok(out)
}

/// Key header and meter named in a generated description, if recognisable.
pub fn described_meta(text: &str) -> (Option<&'static str>, Option<&'static str>) {
    let key = SYNTH_KEYS
        .iter()
        .filter_map(|k| text.find(k.name).map(|pos| (pos, k)))
        .min_by_key(|(pos, k)| (*pos, std::cmp::Reverse(k.name.len())))
        .map(|(_, k)| k.header);
    let meter = SYNTH_METERS
        .iter()
        .filter_map(|m| text.find(m).map(|pos| (pos, *m)))
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, m)| m);
    (key, meter)
}
