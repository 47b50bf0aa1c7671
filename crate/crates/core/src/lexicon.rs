//! Target vocabulary, semantic domains and the label functions used by the
//! secondary probe tasks.
//!
//! The lexicon is a tab-separated file with one word per line:
//!
//! ```text
//! word  pronunciation  count  domain  animacy  concreteness
//! ```
//!
//! Pronunciations are space-separated ARPAbet phones (stress digits allowed).
//! Missing optional annotations are written as `-` or left empty; lines
//! starting with `#` are comments.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The vocabulary shipped with the crate.
pub const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");

pub const DEFAULT_MIN_COUNT: u64 = 200;
pub const DEFAULT_MAX_COUNT: u64 = 450;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("word `{word}` has unknown phone `{phone}`")]
    UnknownPhone { word: String, phone: String },
    #[error("word `{0}` is not in the lexicon")]
    UnknownWord(String),
    #[error("word `{0}` has an empty pronunciation")]
    EmptyPronunciation(String),
    #[error("duplicate lexicon entry `{0}`")]
    Duplicate(String),
}

pub type Result<T> = std::result::Result<T, LexiconError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticDomain {
    #[serde(rename = "academic")]
    Academic,
    #[serde(rename = "language")]
    Language,
    #[serde(rename = "location")]
    Location,
    #[serde(rename = "media/arts")]
    MediaArts,
    #[serde(rename = "political")]
    Political,
    #[serde(rename = "community")]
    Community,
    #[serde(rename = "quantity")]
    Quantity,
    #[serde(rename = "science")]
    Science,
    #[serde(rename = "social")]
    Social,
    #[serde(rename = "time")]
    Time,
}

impl SemanticDomain {
    pub const ALL: [SemanticDomain; 10] = [
        SemanticDomain::Academic,
        SemanticDomain::Language,
        SemanticDomain::Location,
        SemanticDomain::MediaArts,
        SemanticDomain::Political,
        SemanticDomain::Community,
        SemanticDomain::Quantity,
        SemanticDomain::Science,
        SemanticDomain::Social,
        SemanticDomain::Time,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SemanticDomain::Academic => "academic",
            SemanticDomain::Language => "language",
            SemanticDomain::Location => "location",
            SemanticDomain::MediaArts => "media/arts",
            SemanticDomain::Political => "political",
            SemanticDomain::Community => "community",
            SemanticDomain::Quantity => "quantity",
            SemanticDomain::Science => "science",
            SemanticDomain::Social => "social",
            SemanticDomain::Time => "time",
        }
    }

    /// Position in [`SemanticDomain::ALL`]; used as the ventral class index.
    pub fn index(self) -> usize {
        SemanticDomain::ALL.iter().position(|&d| d == self).unwrap()
    }
}

impl fmt::Display for SemanticDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SemanticDomain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        SemanticDomain::ALL
            .iter()
            .copied()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown semantic domain `{s}`"))
    }
}

/// Articulatory manner of a single phone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manner {
    Stop,
    Affricate,
    Fricative,
    Nasal,
    Liquid,
    Glide,
    Vowel,
}

impl Manner {
    /// Manner class of an ARPAbet symbol; stress digits are ignored.
    pub fn of_arpabet(symbol: &str) -> Option<Manner> {
        let base = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
        let manner = match base {
            "P" | "B" | "T" | "D" | "K" | "G" => Manner::Stop,
            "CH" | "JH" => Manner::Affricate,
            "F" | "V" | "TH" | "DH" | "S" | "Z" | "SH" | "ZH" | "HH" => Manner::Fricative,
            "M" | "N" | "NG" => Manner::Nasal,
            "L" | "R" => Manner::Liquid,
            "W" | "Y" => Manner::Glide,
            "AA" | "AE" | "AH" | "AO" | "AW" | "AY" | "EH" | "ER" | "EY" | "IH" | "IY" | "OW"
            | "OY" | "UH" | "UW" => Manner::Vowel,
            _ => return None,
        };
        Some(manner)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phone {
    /// ARPAbet symbol without stress digits.
    pub symbol: String,
    pub manner: Manner,
}

impl Phone {
    pub fn parse(symbol: &str) -> Option<Phone> {
        let manner = Manner::of_arpabet(symbol)?;
        Some(Phone {
            symbol: symbol
                .trim_end_matches(|c: char| c.is_ascii_digit())
                .to_string(),
            manner,
        })
    }

    pub fn is_vowel(&self) -> bool {
        self.manner == Manner::Vowel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetClass {
    Fricative,
    Nasal,
    Stop,
    Liquid,
    VowelGlide,
}

impl OnsetClass {
    pub const ALL: [OnsetClass; 5] = [
        OnsetClass::Fricative,
        OnsetClass::Nasal,
        OnsetClass::Stop,
        OnsetClass::Liquid,
        OnsetClass::VowelGlide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OnsetClass::Fricative => "fricative",
            OnsetClass::Nasal => "nasal",
            OnsetClass::Stop => "stop",
            OnsetClass::Liquid => "liquid",
            OnsetClass::VowelGlide => "vowel/glide",
        }
    }

    pub fn index(self) -> usize {
        OnsetClass::ALL.iter().position(|&c| c == self).unwrap()
    }

    fn from_manner(manner: Manner) -> OnsetClass {
        match manner {
            Manner::Fricative => OnsetClass::Fricative,
            Manner::Nasal => OnsetClass::Nasal,
            // affricates begin with a stop closure
            Manner::Stop | Manner::Affricate => OnsetClass::Stop,
            Manner::Liquid => OnsetClass::Liquid,
            Manner::Vowel | Manner::Glide => OnsetClass::VowelGlide,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Animacy {
    Animate,
    Inanimate,
}

impl Animacy {
    pub fn index(self) -> usize {
        match self {
            Animacy::Animate => 0,
            Animacy::Inanimate => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concreteness {
    Abstract,
    Concrete,
}

impl Concreteness {
    pub fn index(self) -> usize {
        match self {
            Concreteness::Abstract => 0,
            Concreteness::Concrete => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub pronunciation: Vec<Phone>,
    pub corpus_count: u64,
    pub domain: SemanticDomain,
    pub animacy: Option<Animacy>,
    pub concreteness: Option<Concreteness>,
}

/// Manner class of the first phone, folded into the five-way onset scheme.
pub fn onset_class_of(entry: &LexiconEntry) -> Result<OnsetClass> {
    let first = entry
        .pronunciation
        .first()
        .ok_or_else(|| LexiconError::EmptyPronunciation(entry.word.clone()))?;
    Ok(OnsetClass::from_manner(first.manner))
}

/// Number of vowel nuclei, or `None` when the word falls outside the 1..=4
/// range used by the syllable-length probe.
pub fn syllable_count_of(entry: &LexiconEntry) -> Option<u8> {
    let nuclei = entry.pronunciation.iter().filter(|p| p.is_vowel()).count();
    if (1..=4).contains(&nuclei) {
        Some(nuclei as u8)
    } else {
        log::warn!(
            "`{}` has {nuclei} syllables; excluded from the syllable probe",
            entry.word
        );
        None
    }
}

/// Words whose count lies in `[min_count, max_count]`, sorted.
pub fn select_vocabulary<S: AsRef<str>>(
    token_counts: impl IntoIterator<Item = (S, u64)>,
    min_count: u64,
    max_count: u64,
) -> Vec<String> {
    let mut words: Vec<String> = token_counts
        .into_iter()
        .filter(|(_, c)| (min_count..=max_count).contains(c))
        .map(|(w, _)| w.as_ref().to_string())
        .collect();
    words.sort();
    words.dedup();
    words
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn bundled() -> Lexicon {
        Lexicon::parse(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Lexicon> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Lexicon::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            entries.push(parse_line(line, line_no)?);
        }
        Lexicon::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<LexiconEntry>) -> Result<Lexicon> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.pronunciation.is_empty() {
                return Err(LexiconError::EmptyPronunciation(e.word.clone()));
            }
            if index.insert(e.word.clone(), i).is_some() {
                return Err(LexiconError::Duplicate(e.word.clone()));
            }
        }
        Ok(Lexicon { entries, index })
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Result<&LexiconEntry> {
        self.index
            .get(word)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| LexiconError::UnknownWord(word.to_string()))
    }

    pub fn domain_of(&self, word: &str) -> Result<SemanticDomain> {
        Ok(self.get(word)?.domain)
    }

    pub fn counts(&self) -> BTreeMap<&str, u64> {
        self.entries
            .iter()
            .map(|e| (e.word.as_str(), e.corpus_count))
            .collect()
    }

    /// Words whose lexicon count is inside the selection band.
    pub fn vocabulary(&self, min_count: u64, max_count: u64) -> Vec<String> {
        select_vocabulary(self.counts(), min_count, max_count)
    }

    /// Member count per domain, in [`SemanticDomain::ALL`] order.
    pub fn domain_sizes(&self) -> [usize; 10] {
        let mut sizes = [0; 10];
        for e in &self.entries {
            sizes[e.domain.index()] += 1;
        }
        sizes
    }
}

fn parse_line(line: &str, line_no: usize) -> Result<LexiconEntry> {
    let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
    let err = |message: String| LexiconError::Parse {
        line: line_no,
        message,
    };
    if cols.len() < 4 {
        return Err(err(format!("expected at least 4 columns, got {}", cols.len())));
    }
    let word = cols[0].to_string();
    if word.is_empty() {
        return Err(err("empty word".into()));
    }
    let mut pronunciation = Vec::new();
    for sym in cols[1].split_whitespace() {
        let phone = Phone::parse(sym).ok_or_else(|| LexiconError::UnknownPhone {
            word: word.clone(),
            phone: sym.to_string(),
        })?;
        pronunciation.push(phone);
    }
    if pronunciation.is_empty() {
        return Err(LexiconError::EmptyPronunciation(word));
    }
    let corpus_count = cols[2]
        .parse::<u64>()
        .map_err(|e| err(format!("bad count `{}`: {e}", cols[2])))?;
    let domain = cols[3].parse::<SemanticDomain>().map_err(err)?;
    let optional = |idx: usize| cols.get(idx).copied().filter(|s| !s.is_empty() && *s != "-");
    let animacy = match optional(4) {
        None => None,
        Some("animate") => Some(Animacy::Animate),
        Some("inanimate") => Some(Animacy::Inanimate),
        Some(other) => return Err(err(format!("bad animacy `{other}`"))),
    };
    let concreteness = match optional(5) {
        None => None,
        Some("abstract") => Some(Concreteness::Abstract),
        Some("concrete") => Some(Concreteness::Concrete),
        Some(other) => return Err(err(format!("bad concreteness `{other}`"))),
    };
    Ok(LexiconEntry {
        word,
        pronunciation,
        corpus_count,
        domain,
        animacy,
        concreteness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocabulary_band_is_inclusive() {
        assert!(select_vocabulary([("w", 199u64)], 200, 450).is_empty());
        assert_eq!(
            select_vocabulary([("w", 200u64), ("v", 450)], 200, 450),
            vec!["v", "w"]
        );
        assert!(select_vocabulary([("w", 451u64)], 200, 450).is_empty());
    }

    #[test]
    fn bundled_partition_matches_domain_lists() {
        let lex = Lexicon::bundled();
        assert_eq!(lex.len(), 178);
        let sizes = lex.domain_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 178);
        assert_eq!(*sizes.iter().min().unwrap(), 9);
        assert_eq!(*sizes.iter().max().unwrap(), 26);
        assert_eq!(sizes[SemanticDomain::Time.index()], 9);
        let mut sorted = sizes;
        sorted.sort();
        // even count: median is the mean of the middle pair
        assert_eq!((sorted[4] + sorted[5]) as f64 / 2.0, 17.0);
    }

    #[test]
    fn domain_lookup() {
        let lex = Lexicon::bundled();
        assert_eq!(lex.domain_of("album").unwrap(), SemanticDomain::MediaArts);
        assert_eq!(lex.domain_of("radio").unwrap(), SemanticDomain::MediaArts);
        assert_eq!(lex.domain_of("region").unwrap(), SemanticDomain::Location);
        assert_eq!(lex.domain_of("station").unwrap(), SemanticDomain::Location);
        assert_eq!(lex.domain_of("century").unwrap(), SemanticDomain::Time);
        match lex.domain_of("zebra") {
            Err(LexiconError::UnknownWord(w)) => assert_eq!(w, "zebra"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn onset_classes() {
        let lex = Lexicon::bundled();
        let onset = |w: &str| onset_class_of(lex.get(w).unwrap()).unwrap();
        assert_eq!(onset("station"), OnsetClass::Fricative);
        assert_eq!(onset("million"), OnsetClass::Nasal);
        assert_eq!(onset("above"), OnsetClass::VowelGlide);
        assert_eq!(onset("general"), OnsetClass::Stop);
        assert_eq!(onset("world"), OnsetClass::VowelGlide);
        assert_eq!(onset("legal"), OnsetClass::Liquid);
        assert_eq!(onset("party"), OnsetClass::Stop);
    }

    #[test]
    fn syllable_counts() {
        let lex = Lexicon::bundled();
        let syl = |w: &str| syllable_count_of(lex.get(w).unwrap());
        assert_eq!(syl("world"), Some(1));
        assert_eq!(syl("album"), Some(2));
        assert_eq!(syl("community"), Some(4));
        assert_eq!(syl("international"), None);
    }

    #[test]
    fn every_word_has_a_dorsal_label_and_phones_with_manner() {
        let lex = Lexicon::bundled();
        let vocab = lex.vocabulary(DEFAULT_MIN_COUNT, DEFAULT_MAX_COUNT);
        assert_eq!(vocab.len(), 178);
        for w in &vocab {
            let e = lex.get(w).unwrap();
            assert!(!e.pronunciation.is_empty());
            onset_class_of(e).unwrap();
        }
    }

    #[test]
    fn parse_errors_are_located() {
        let err = Lexicon::parse("# c\nfoo\tF UW\tabc\ttime\n").unwrap_err();
        assert!(matches!(err, LexiconError::Parse { line: 2, .. }), "{err}");
        let err = Lexicon::parse("foo\tF QQ\t3\ttime\n").unwrap_err();
        assert!(matches!(err, LexiconError::UnknownPhone { .. }));
        let err = Lexicon::parse("foo\tF UW\t3\tsports\n").unwrap_err();
        assert!(matches!(err, LexiconError::Parse { .. }));
        let err = Lexicon::parse("foo\t\t3\ttime\n").unwrap_err();
        assert!(matches!(err, LexiconError::EmptyPronunciation(_)));
    }

    #[test]
    fn optional_annotations() {
        let lex = Lexicon::parse("a\tAH0\t1\ttime\n b\tB IY1\t2\ttime\tanimate\tconcrete\n").unwrap();
        assert_eq!(lex.get("a").unwrap().animacy, None);
        let b = lex.get("b").unwrap();
        assert_eq!(b.animacy, Some(Animacy::Animate));
        assert_eq!(b.concreteness, Some(Concreteness::Concrete));
    }

    proptest! {
        #[test]
        fn widening_the_band_never_removes_words(
            counts in proptest::collection::btree_map("[a-z]{1,6}", 0u64..1000, 0..40),
            lo in 0u64..500, width in 0u64..500, widen_lo in 0u64..200, widen_hi in 0u64..200,
        ) {
            let hi = lo + width;
            let narrow = select_vocabulary(counts.iter().map(|(w, &c)| (w, c)), lo, hi);
            let wide = select_vocabulary(
                counts.iter().map(|(w, &c)| (w, c)),
                lo.saturating_sub(widen_lo),
                hi + widen_hi,
            );
            for w in &narrow {
                prop_assert!(wide.contains(w));
            }
            prop_assert!(narrow.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
