//! Vocabulary construction, caption preprocessing, special tokens, and
//! image-feature ingestion.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::chunker::{ChunkedSentence, Unit};
use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Characters stripped from raw captions before tokenization.
const STRIP_CHARS: &[char] = &['.', ',', '!', '?', '"', ';', ':'];

pub const UNK: &str = "<unk>";
pub const START_PHRASE: &str = "<sp>";
pub const END_PHRASE: &str = "</sp>";
pub const START_SENT: &str = "<ss>";
pub const END_SENT: &str = "</ss>";
pub const PHRASE_TOKEN: &str = "<phrase>";

/// All reserved tokens, in id order. Ids 0..SPECIALS.len() are fixed.
pub const SPECIALS: &[&str] = &[UNK, START_PHRASE, END_PHRASE, START_SENT, END_SENT, PHRASE_TOKEN];

pub const ID_UNK: usize = 0;
pub const ID_START_PHRASE: usize = 1;
pub const ID_END_PHRASE: usize = 2;
pub const ID_START_SENT: usize = 3;
pub const ID_END_SENT: usize = 4;
pub const ID_PHRASE_TOKEN: usize = 5;

/// Lowercase, strip frequent punctuation, whitespace-tokenize.
pub fn preprocess(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .replace(STRIP_CHARS, "")
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

/// Word dictionary with dense ids; specials occupy ids `0..SPECIALS.len()`
/// and never collide with corpus words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
    counts: Vec<u64>,
}

impl Vocab {
    /// Build a vocabulary from tokenized captions, keeping words whose
    /// occurrence count is at least `min_count`. Corpus words are ordered by
    /// descending count then lexicographically, so id assignment is
    /// insensitive to caption order.
    pub fn build<S: AsRef<str>>(captions: &[Vec<S>], min_count: u64) -> Result<Vocab> {
        assert!(min_count >= 1, "min_count must be >= 1");
        if captions.iter().all(|c| c.is_empty()) {
            return Err(Error::Validation("empty corpus".into()));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for caption in captions {
            for w in caption {
                let w = w.as_ref();
                if SPECIALS.contains(&w) {
                    return Err(Error::Validation(format!(
                        "corpus word {:?} collides with a reserved token",
                        w
                    )));
                }
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> =
            freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut id_to_word: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts: Vec<u64> = vec![0; SPECIALS.len()];
        for (w, c) in kept {
            id_to_word.push(w.to_string());
            counts.push(c);
        }
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocab {
            word_to_id,
            id_to_word,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.is_empty()
    }

    /// Id of a word, falling back to the unknown-word id.
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.word_to_id.get(word).copied().unwrap_or(self.unk())
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.id_to_word[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn unk(&self) -> usize {
        ID_UNK
    }
    pub fn start_phrase(&self) -> usize {
        ID_START_PHRASE
    }
    pub fn end_phrase(&self) -> usize {
        ID_END_PHRASE
    }
    pub fn start_sent(&self) -> usize {
        ID_START_SENT
    }
    pub fn end_sent(&self) -> usize {
        ID_END_SENT
    }
    pub fn phrase_token(&self) -> usize {
        ID_PHRASE_TOKEN
    }

    /// Ids of ordinary corpus words plus UNK: everything a generated phrase
    /// or sentence may emit as a word.
    pub fn word_ids(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.unk()).chain(SPECIALS.len()..self.len())
    }

    /// Text serialization: `word<TAB>count` per line, specials first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, c) in self.id_to_word.iter().zip(&self.counts) {
            out.push_str(w);
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let mut id_to_word = Vec::new();
        let mut counts = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (w, c) = line.split_once('\t').ok_or(Error::Parse {
                line: idx + 1,
                msg: "expected word<TAB>count".into(),
            })?;
            let c: u64 = c.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("malformed count {:?}", c),
            })?;
            id_to_word.push(w.to_string());
            counts.push(c);
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if id_to_word.get(i).map(|w| w.as_str()) != Some(*s) {
                return Err(Error::Format(format!(
                    "vocab file must list special {:?} at position {}",
                    s, i
                )));
            }
        }
        let word_to_id: HashMap<String, usize> = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        if word_to_id.len() != id_to_word.len() {
            return Err(Error::Format("duplicate word in vocab file".into()));
        }
        Ok(Vocab {
            word_to_id,
            id_to_word,
            counts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        Vocab::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical text serialization; stored in checkpoints to
    /// detect checkpoint/vocabulary mismatches.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        h.finalize().into()
    }
}

/// Precomputed image feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature {
    pub id: String,
    pub data: Vector,
}

const FEATURE_MAGIC: &[u8; 4] = b"PHIF";
const FEATURE_VERSION: u32 = 1;

/// Write the feature blob: magic "PHIF", u32 version, u32 D, u32 count, then
/// per record a u16 id length, the UTF-8 id and D little-endian f32 values.
pub fn save_features(path: &Path, dim: usize, features: &[ImageFeature]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(features.len() as u32).to_le_bytes());
    for f in features {
        if f.data.len() != dim {
            return Err(Error::Validation(format!(
                "feature {:?} has dimension {}, expected {}",
                f.id,
                f.data.len(),
                dim
            )));
        }
        let id_bytes = f.id.as_bytes();
        if id_bytes.len() > u16::MAX as usize {
            return Err(Error::Validation(format!("feature id too long: {:?}", f.id)));
        }
        buf.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(id_bytes);
        for &v in f.data.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Feature map keyed by image id, plus the declared dimension.
pub struct FeatureSet {
    pub dim: usize,
    pub by_id: HashMap<String, ImageFeature>,
    /// Ids in file order, for deterministic iteration.
    pub order: Vec<String>,
}

impl FeatureSet {
    pub fn get(&self, id: &str) -> Option<&ImageFeature> {
        self.by_id.get(id)
    }
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature magic {:?}", magic)));
    }
    let version = cur.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature version {}", version)));
    }
    let dim = cur.u32()? as usize;
    let count = cur.u32()? as usize;

    let mut by_id = HashMap::new();
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = cur.u16()? as usize;
        let id_bytes = cur.take(id_len)?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| Error::Format("feature id is not UTF-8".into()))?
            .to_string();
        let mut data = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = cur.f32()? as f64;
            if !v.is_finite() {
                return Err(Error::Format(format!("non-finite value in feature {:?}", id)));
            }
            data.push(v);
        }
        if by_id
            .insert(id.clone(), ImageFeature { id: id.clone(), data: Vector(data) })
            .is_some()
        {
            return Err(Error::Format(format!("duplicate image id {:?}", id)));
        }
        order.push(id);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last feature record".into()));
    }
    Ok(FeatureSet { dim, by_id, order })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated record".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// One training pair: a caption chunked into units, with per-unit word ids.
#[derive(Clone, Debug)]
pub struct CaptionRecord {
    pub image_id: String,
    pub chunked: ChunkedSentence,
    /// Per-unit id sequences: one id for a word unit, one per word for a phrase.
    pub token_ids: Vec<Vec<usize>>,
}

impl CaptionRecord {
    pub fn new(image_id: String, chunked: ChunkedSentence, vocab: &Vocab) -> CaptionRecord {
        let token_ids = chunked
            .units
            .iter()
            .map(|u| match u {
                Unit::Word(w) => vec![vocab.id_or_unk(w)],
                Unit::Phrase { words, .. } => {
                    words.iter().map(|w| vocab.id_or_unk(w)).collect()
                }
            })
            .collect();
        CaptionRecord {
            image_id,
            chunked,
            token_ids,
        }
    }
}

/// One loaded dataset entry: caption paired positionally with its parse.
#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub image_id: String,
    pub caption: String,
    pub chunked: ChunkedSentence,
}

pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
    pub features: FeatureSet,
}

/// Load a data directory: `captions.tsv`, `parses.conllu` (aligned line by
/// line with the captions) and `features.phif`. Each caption's preprocessed
/// tokens must match its parse surface forms, and every image id must have a
/// feature vector.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let captions = parse_captions_tsv(&std::fs::read_to_string(dir.join("captions.tsv"))?)?;
    let parses = crate::chunker::parse_conllu(&std::fs::read_to_string(dir.join("parses.conllu"))?)?;
    let features = load_features(&dir.join("features.phif"))?;

    if captions.len() != parses.len() {
        return Err(Error::Validation(format!(
            "{} captions but {} parses",
            captions.len(),
            parses.len()
        )));
    }
    let mut entries = Vec::with_capacity(captions.len());
    for ((image_id, caption), parse) in captions.into_iter().zip(parses) {
        let tokens = preprocess(&caption);
        let surfaces: Vec<String> = parse.tokens.iter().map(|t| t.surface.clone()).collect();
        if tokens != surfaces {
            return Err(Error::Validation(format!(
                "caption for {:?} does not match its parse: {:?} vs {:?}",
                image_id, tokens, surfaces
            )));
        }
        if features.get(&image_id).is_none() {
            return Err(Error::Validation(format!("no feature for image {:?}", image_id)));
        }
        entries.push(DatasetEntry {
            image_id,
            caption,
            chunked: crate::chunker::chunk(&parse),
        });
    }
    Ok(Dataset { entries, features })
}

/// Parse a captions TSV (`image_id<TAB>raw caption` per line).
pub fn parse_captions_tsv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line.split_once('\t').ok_or(Error::Parse {
            line: idx + 1,
            msg: "expected image_id<TAB>caption".into(),
        })?;
        out.push((id.to_string(), caption.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn preprocess_strips_and_lowercases() {
        assert_eq!(preprocess("A man, running."), vec!["a", "man", "running"]);
    }

    #[test]
    fn preprocess_empty() {
        assert!(preprocess("").is_empty());
    }

    #[test]
    fn preprocess_hand_case() {
        assert_eq!(
            preprocess("Two dogs; one ball!"),
            vec!["two", "dogs", "one", "ball"]
        );
    }

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn build_vocab_keeps_all_with_min_count_one() {
        let caps = vec![toks(&["a", "dog"]), toks(&["a", "cat"])];
        let v = Vocab::build(&caps, 1).unwrap();
        assert_eq!(v.len(), SPECIALS.len() + 3);
        assert!(v.id_of("dog").is_some());
        assert!(v.id_of("cat").is_some());
    }

    #[test]
    fn build_vocab_min_count_boundary() {
        // a occurs 5 times, b occurs 4; "less than 5" is discarded
        let mut caps = vec![toks(&["a", "b"]); 4];
        caps.push(toks(&["a"]));
        let v = Vocab::build(&caps, 5).unwrap();
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_none());
        assert_eq!(v.id_or_unk("b"), v.unk());
    }

    #[test]
    fn build_vocab_empty_corpus_errors() {
        let caps: Vec<Vec<String>> = vec![vec![]];
        assert!(Vocab::build(&caps, 1).is_err());
    }

    #[test]
    fn vocab_round_trip_ids() {
        let caps = vec![toks(&["red", "ball", "red"])];
        let v = Vocab::build(&caps, 1).unwrap();
        for id in 0..v.len() {
            assert_eq!(v.id_of(v.word(id)), Some(id));
        }
    }

    #[test]
    fn vocab_order_insensitive() {
        let a = Vocab::build(&[toks(&["x", "y"]), toks(&["z"])], 1).unwrap();
        let b = Vocab::build(&[toks(&["z"]), toks(&["y", "x"])], 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::build(&[toks(&["dog", "dog", "cat"])], 1).unwrap();
        let text = v.to_text();
        let v2 = Vocab::from_text(&text).unwrap();
        assert_eq!(v, v2);
        assert_eq!(v.hash(), v2.hash());
        // specials first, count 0
        assert!(text.starts_with("<unk>\t0\n"));
    }

    #[test]
    fn feature_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.phif");
        let feats = vec![ImageFeature {
            id: "img1".into(),
            data: Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
        }];
        save_features(&path, 4, &feats).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.dim, 4);
        assert_eq!(loaded.by_id.len(), 1);
        let f = loaded.get("img1").unwrap();
        assert_eq!(f.data.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn feature_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.phif");
        save_features(&path, 8, &[]).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.dim, 8);
        assert!(loaded.by_id.is_empty());
    }

    #[test]
    fn feature_duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.phif");
        let f = ImageFeature {
            id: "dup".into(),
            data: Vector::from_vec(vec![0.5]),
        };
        save_features(&path, 1, &[f.clone(), f]).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn feature_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.phif");
        let feats = vec![ImageFeature {
            id: "img1".into(),
            data: Vector::from_vec(vec![1.0, 2.0]),
        }];
        save_features(&path, 2, &feats).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn feature_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.phif");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn feature_random_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.phif");
        let mut rng = Rng::new(9);
        let dim = 16;
        let feats: Vec<ImageFeature> = (0..10)
            .map(|i| ImageFeature {
                id: format!("img{:03}", i),
                data: Vector(
                    (0..dim)
                        // f32 round trip must be exact, so draw f32-representable values
                        .map(|_| rng.uniform(-4.0, 4.0) as f32 as f64)
                        .collect(),
                ),
            })
            .collect();
        save_features(&path, dim, &feats).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.order.len(), 10);
        for f in &feats {
            assert_eq!(loaded.get(&f.id).unwrap().data, f.data);
        }
    }

    #[test]
    fn captions_tsv_parses() {
        let recs = parse_captions_tsv("img1\ta red ball\nimg2\ta blue cat\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].0, "img1");
        assert_eq!(recs[1].1, "a blue cat");
    }

    #[test]
    fn captions_tsv_missing_tab_errors() {
        assert!(parse_captions_tsv("no tab here\n").is_err());
    }
}
