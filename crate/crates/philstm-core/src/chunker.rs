//! Noun-phrase chunking from dependency parses.
//!
//! A parse is read from CoNLL-U text. Edges whose relation marks a noun-phrase
//! constituent (det, nummod, amod, compound, nmod:of, nmod:poss, and advmod
//! when it modifies an adjective) are selected; each selected edge covers the
//! whole index interval between governor and dependent, and overlapping or
//! abutting intervals are merged. Merged intervals of two or more tokens
//! become phrase units, everything else stays a standalone word unit.

use crate::error::{Error, Result};

/// One token of a dependency parse. `head == 0` marks the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseToken {
    /// 1-based position in the sentence.
    pub index: usize,
    /// Lowercased surface form.
    pub surface: String,
    /// Universal POS tag, e.g. "NOUN", "ADJ".
    pub upos: String,
    /// Index of the governor token, 0 for the root.
    pub head: usize,
    /// Dependency relation label, e.g. "det", "nmod:of".
    pub relation: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyParse {
    pub tokens: Vec<ParseToken>,
}

impl DependencyParse {
    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }
}

/// A segmentation unit: a standalone word, or a phrase covering a token span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Unit {
    Word(String),
    /// Words of the phrase in sentence order, plus the covered 1-based
    /// inclusive span `[start, end]`.
    Phrase {
        words: Vec<String>,
        span: (usize, usize),
    },
}

impl Unit {
    pub fn words(&self) -> Vec<&str> {
        match self {
            Unit::Word(w) => vec![w.as_str()],
            Unit::Phrase { words, .. } => words.iter().map(|w| w.as_str()).collect(),
        }
    }

    pub fn is_phrase(&self) -> bool {
        matches!(self, Unit::Phrase { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedSentence {
    pub units: Vec<Unit>,
    pub source: DependencyParse,
}

impl ChunkedSentence {
    /// Token surfaces in order, reproducing the source sentence.
    pub fn flatten(&self) -> Vec<&str> {
        self.units.iter().flat_map(|u| u.words()).collect()
    }

    /// One-line rendering with phrases bracketed: `[a man] in [a dimly lit room]`.
    pub fn bracketed(&self) -> String {
        self.units
            .iter()
            .map(|u| match u {
                Unit::Word(w) => w.clone(),
                Unit::Phrase { words, .. } => format!("[{}]", words.join(" ")),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Parse CoNLL-U text into one `DependencyParse` per sentence.
///
/// Comment lines (`#`) and multiword-range lines (ID containing `-`) are
/// skipped; FORM is lowercased. Malformed ID/HEAD fields, duplicate or
/// non-contiguous indices and root-count violations are reported with the
/// offending line number.
pub fn parse_conllu(text: &str) -> Result<Vec<DependencyParse>> {
    let mut parses = Vec::new();
    let mut tokens: Vec<ParseToken> = Vec::new();
    let mut sentence_start_line = 0;

    let flush = |tokens: &mut Vec<ParseToken>, parses: &mut Vec<DependencyParse>, line: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        validate_sentence(tokens, line)?;
        parses.push(DependencyParse {
            tokens: std::mem::take(tokens),
        });
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut parses, sentence_start_line)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 8 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least 8 tab-separated columns, got {}", cols.len()),
            });
        }
        if cols[0].contains('-') {
            // multiword token range
            continue;
        }
        let index: usize = cols[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("malformed ID {:?}", cols[0]),
        })?;
        let head: usize = cols[6].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("malformed HEAD {:?}", cols[6]),
        })?;
        if head == index {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("token {} is its own head", index),
            });
        }
        if tokens.is_empty() {
            sentence_start_line = line_no;
        }
        tokens.push(ParseToken {
            index,
            surface: cols[1].to_lowercase(),
            upos: cols[3].to_string(),
            head,
            relation: cols[7].to_string(),
        });
    }
    flush(&mut tokens, &mut parses, sentence_start_line)?;
    Ok(parses)
}

fn validate_sentence(tokens: &[ParseToken], line: usize) -> Result<()> {
    let n = tokens.len();
    let mut seen = vec![false; n + 1];
    for t in tokens {
        if t.index == 0 || t.index > n || seen[t.index] {
            return Err(Error::Parse {
                line,
                msg: format!("token indices not contiguous 1..{} (offending ID {})", n, t.index),
            });
        }
        seen[t.index] = true;
        if t.head > n {
            return Err(Error::Parse {
                line,
                msg: format!("HEAD {} out of range 1..{}", t.head, n),
            });
        }
    }
    let roots = tokens.iter().filter(|t| t.head == 0).count();
    if roots != 1 {
        return Err(Error::Parse {
            line,
            msg: format!("expected exactly one root, found {}", roots),
        });
    }
    Ok(())
}

const PHRASE_RELATIONS: &[&str] = &["det", "nummod", "amod", "compound", "nmod:of", "nmod:poss"];

/// Edges marking noun-phrase membership, as `(governor, dependent)` index
/// pairs. `advmod` counts only when its governor is an adjective.
pub fn select_relations(parse: &DependencyParse) -> Vec<(usize, usize)> {
    let upos_of = |idx: usize| {
        parse
            .tokens
            .iter()
            .find(|t| t.index == idx)
            .map(|t| t.upos.as_str())
    };
    let mut edges = Vec::new();
    for t in &parse.tokens {
        if t.head == 0 {
            continue;
        }
        let selected = PHRASE_RELATIONS.contains(&t.relation.as_str())
            || (t.relation == "advmod" && upos_of(t.head) == Some("ADJ"));
        if selected {
            edges.push((t.head, t.index));
        }
    }
    edges
}

/// Segment a parse into word and phrase units.
///
/// Each selected edge covers `[min(g,d), max(g,d)]`; covered intervals that
/// overlap or abut are merged, and merged intervals of length >= 2 become
/// phrases. Tokens outside every interval remain words, in sentence order.
pub fn chunk(parse: &DependencyParse) -> ChunkedSentence {
    let mut intervals: Vec<(usize, usize)> = select_relations(parse)
        .into_iter()
        .map(|(g, d)| (g.min(d), g.max(d)))
        .collect();
    intervals.sort_unstable();

    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in intervals {
        match merged.last_mut() {
            Some((_, last_end)) if s <= *last_end + 1 => *last_end = (*last_end).max(e),
            _ => merged.push((s, e)),
        }
    }

    let mut tokens_sorted: Vec<&ParseToken> = parse.tokens.iter().collect();
    tokens_sorted.sort_by_key(|t| t.index);

    let mut units = Vec::new();
    let mut next_interval = merged.iter().peekable();
    let mut i = 0;
    while i < tokens_sorted.len() {
        let idx = tokens_sorted[i].index;
        match next_interval.peek() {
            Some(&&(s, e)) if idx == s && e > s => {
                let words: Vec<String> = tokens_sorted[i..]
                    .iter()
                    .take_while(|t| t.index <= e)
                    .map(|t| t.surface.clone())
                    .collect();
                i += words.len();
                units.push(Unit::Phrase { words, span: (s, e) });
                next_interval.next();
            }
            Some(&&(s, e)) if idx == s && e == s => {
                // degenerate single-token interval: emit as a word
                units.push(Unit::Word(tokens_sorted[i].surface.clone()));
                i += 1;
                next_interval.next();
            }
            _ => {
                units.push(Unit::Word(tokens_sorted[i].surface.clone()));
                i += 1;
            }
        }
    }

    ChunkedSentence {
        units,
        source: parse.clone(),
    }
}
