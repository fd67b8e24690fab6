//! Deterministic toy world for end-to-end tests: captions from a small
//! template grammar over colored objects, actions and scenes, matching
//! dependency parses, and feature vectors that multi-hot encode the content
//! words of each image.
//!
//! Two profiles are available. `Rich` captions carry two noun phrases
//! (subject and scene, both with determiners); because both phrases of an
//! image share the phrase-level input prefix, a corpus of R-phrase captions
//! has an irreducible perplexity of about R*log2(R)/N bits per target.
//! `Simple` captions carry exactly one noun phrase (the scene is a bare
//! mass noun), which keeps the corpus fully memorizable for overfit tests.

use std::path::Path;

use crate::corpus::{save_features, ImageFeature};
use crate::error::Result;
use crate::linalg::{Rng, Vector};

const COLORS: &[&str] = &["red", "blue", "green", "brown", "black", "white", "yellow", "orange"];
const OBJECTS: &[&str] = &["ball", "dog", "cat", "car", "bird", "book", "hat", "fish"];
const VERBS: &[&str] = &["sits", "stands", "runs", "sleeps", "waits", "plays"];
const PREPS: &[&str] = &["in", "on", "near", "by"];
const SCENES: &[&str] = &["park", "room", "field", "street", "beach", "garden", "kitchen", "yard"];
/// Determiner-free scene nouns for the single-phrase profile.
const BARE_SCENES: &[&str] = &["water", "grass", "snow", "sand", "mud", "gravel"];

/// Feature dimension: one slot per color, object, verb, scene and bare scene.
pub const FEATURE_DIM: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Two noun phrases per caption: `a [color] object verb prep a [color] scene`.
    Rich,
    /// One noun phrase per caption: `a color object verb prep bare-scene`.
    Simple,
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub image_id: String,
    pub caption: String,
    pub conllu: String,
    pub feature: Vector,
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub pairs: Vec<SynthPair>,
    pub dim: usize,
}

struct Scene {
    color1: Option<usize>,
    object: usize,
    verb: usize,
    prep: usize,
    color2: Option<usize>,
    /// Index into SCENES, or into BARE_SCENES when `bare` is set.
    scene: usize,
    bare: bool,
}

fn feature_of(s: &Scene) -> Vector {
    let mut f = vec![0.0; FEATURE_DIM];
    let mut bump = |slot: usize| f[slot] += 1.0;
    if let Some(c) = s.color1 {
        bump(c);
    }
    if let Some(c) = s.color2 {
        bump(c);
    }
    bump(COLORS.len() + s.object);
    bump(COLORS.len() + OBJECTS.len() + s.verb);
    let scene_base = COLORS.len() + OBJECTS.len() + VERBS.len();
    if s.bare {
        bump(scene_base + SCENES.len() + s.scene);
    } else {
        bump(scene_base + s.scene);
    }
    Vector(f)
}

fn caption_of(s: &Scene) -> Vec<String> {
    let mut words = vec!["a".to_string()];
    if let Some(c) = s.color1 {
        words.push(COLORS[c].to_string());
    }
    words.push(OBJECTS[s.object].to_string());
    words.push(VERBS[s.verb].to_string());
    words.push(PREPS[s.prep].to_string());
    if s.bare {
        words.push(BARE_SCENES[s.scene].to_string());
    } else {
        words.push("a".to_string());
        if let Some(c) = s.color2 {
            words.push(COLORS[c].to_string());
        }
        words.push(SCENES[s.scene].to_string());
    }
    words
}

/// Render the dependency parse of a template caption in CoNLL-U.
///
/// The subject noun hangs off the verb root; determiners and color
/// adjectives attach to their nouns, the preposition is a case marker and
/// the scene noun an oblique of the verb.
fn conllu_of(s: &Scene, image_id: &str) -> String {
    let words = caption_of(s);
    let obj_idx = if s.color1.is_some() { 3 } else { 2 };
    let verb_idx = obj_idx + 1;
    let prep_idx = verb_idx + 1;
    let scene_idx = words.len();

    let mut lines = vec![
        format!("# sent_id = {}", image_id),
        format!("# text = {}", words.join(" ")),
    ];
    let mut push = |idx: usize, form: &str, upos: &str, head: usize, rel: &str| {
        lines.push(format!(
            "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t_",
            idx, form, form, upos, head, rel
        ));
    };
    push(1, &words[0], "DET", obj_idx, "det");
    if let Some(c) = s.color1 {
        push(2, COLORS[c], "ADJ", obj_idx, "amod");
    }
    push(obj_idx, OBJECTS[s.object], "NOUN", verb_idx, "nsubj");
    push(verb_idx, VERBS[s.verb], "VERB", 0, "root");
    push(prep_idx, PREPS[s.prep], "ADP", scene_idx, "case");
    if s.bare {
        push(scene_idx, BARE_SCENES[s.scene], "NOUN", verb_idx, "obl");
    } else {
        push(prep_idx + 1, "a", "DET", scene_idx, "det");
        if let Some(c) = s.color2 {
            push(prep_idx + 2, COLORS[c], "ADJ", scene_idx, "amod");
        }
        push(scene_idx, SCENES[s.scene], "NOUN", verb_idx, "obl");
    }
    lines.join("\n")
}

/// Generate `count` distinct image/caption pairs, bitwise reproducible for a
/// given seed and profile.
pub fn generate(seed: u64, count: usize, profile: Profile) -> SynthWorld {
    let mut rng = Rng::new(seed);
    let mut pairs = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    let mut attempts = 0usize;
    while pairs.len() < count {
        attempts += 1;
        assert!(
            attempts < 1000 * (count + 1),
            "synthetic world exhausted after {} attempts",
            attempts
        );
        let scene = match profile {
            Profile::Rich => {
                let template = rng.next_below(3);
                Scene {
                    color1: (template != 2).then(|| rng.next_below(COLORS.len())),
                    object: rng.next_below(OBJECTS.len()),
                    verb: rng.next_below(VERBS.len()),
                    prep: rng.next_below(PREPS.len()),
                    color2: (template != 1).then(|| rng.next_below(COLORS.len())),
                    scene: rng.next_below(SCENES.len()),
                    bare: false,
                }
            }
            Profile::Simple => Scene {
                color1: Some(rng.next_below(COLORS.len())),
                object: rng.next_below(OBJECTS.len()),
                verb: rng.next_below(VERBS.len()),
                prep: rng.next_below(PREPS.len()),
                color2: None,
                scene: rng.next_below(BARE_SCENES.len()),
                bare: true,
            },
        };
        // dedupe on the feature-determining content so every image gets a
        // distinct feature vector (the preposition is not image content)
        let content = (scene.color1, scene.object, scene.verb, scene.color2, scene.scene, scene.bare);
        if !seen.insert(content) {
            continue;
        }
        let caption = caption_of(&scene).join(" ");
        let image_id = format!("img{:04}", pairs.len());
        let conllu = conllu_of(&scene, &image_id);
        pairs.push(SynthPair {
            image_id,
            caption,
            conllu,
            feature: feature_of(&scene),
        });
    }
    SynthWorld {
        pairs,
        dim: FEATURE_DIM,
    }
}

impl SynthWorld {
    /// Write captions.tsv, parses.conllu and features.phif into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let captions: String = self
            .pairs
            .iter()
            .map(|p| format!("{}\t{}\n", p.image_id, p.caption))
            .collect();
        std::fs::write(dir.join("captions.tsv"), captions)?;

        let parses: String = self
            .pairs
            .iter()
            .map(|p| format!("{}\n\n", p.conllu))
            .collect();
        std::fs::write(dir.join("parses.conllu"), parses)?;

        let feats: Vec<ImageFeature> = self
            .pairs
            .iter()
            .map(|p| ImageFeature {
                id: p.image_id.clone(),
                data: p.feature.clone(),
            })
            .collect();
        save_features(&dir.join("features.phif"), self.dim, &feats)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::{chunk, parse_conllu};
    use crate::corpus::{load_dataset, preprocess};

    #[test]
    fn generation_is_reproducible() {
        for profile in [Profile::Rich, Profile::Simple] {
            let a = generate(42, 10, profile);
            let b = generate(42, 10, profile);
            for (x, y) in a.pairs.iter().zip(&b.pairs) {
                assert_eq!(x.caption, y.caption);
                assert_eq!(x.conllu, y.conllu);
                assert_eq!(x.feature, y.feature);
            }
        }
    }

    #[test]
    fn captions_are_distinct_and_clean() {
        let w = generate(7, 25, Profile::Rich);
        let mut seen = std::collections::HashSet::new();
        for p in &w.pairs {
            assert!(seen.insert(&p.caption));
            // already lowercase and punctuation-free
            assert_eq!(preprocess(&p.caption).join(" "), p.caption);
        }
    }

    #[test]
    fn rich_parses_chunk_into_two_phrases() {
        let w = generate(3, 20, Profile::Rich);
        for p in &w.pairs {
            let parses = parse_conllu(&p.conllu).unwrap();
            assert_eq!(parses.len(), 1);
            let surfaces: Vec<String> =
                parses[0].tokens.iter().map(|t| t.surface.clone()).collect();
            assert_eq!(surfaces.join(" "), p.caption);
            let chunked = chunk(&parses[0]);
            let n_phrases = chunked.units.iter().filter(|u| u.is_phrase()).count();
            assert_eq!(n_phrases, 2, "caption {:?} chunked {:?}", p.caption, chunked.bracketed());
        }
    }

    #[test]
    fn simple_parses_chunk_into_one_phrase() {
        let w = generate(3, 20, Profile::Simple);
        for p in &w.pairs {
            let parses = parse_conllu(&p.conllu).unwrap();
            let chunked = chunk(&parses[0]);
            let n_phrases = chunked.units.iter().filter(|u| u.is_phrase()).count();
            assert_eq!(n_phrases, 1, "caption {:?} chunked {:?}", p.caption, chunked.bracketed());
            // phrase is the 3-word subject; the rest are standalone words
            assert_eq!(chunked.units.len(), 4);
        }
    }

    #[test]
    fn written_dir_loads_as_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate(11, 8, Profile::Rich);
        w.write_dir(dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.entries.len(), 8);
        assert_eq!(ds.features.dim, FEATURE_DIM);
        for e in &ds.entries {
            assert!(ds.features.get(&e.image_id).is_some());
        }
    }

    #[test]
    fn features_encode_content_words() {
        let w = generate(5, 12, Profile::Rich);
        for p in &w.pairs {
            let active: f64 = p.feature.0.iter().sum();
            // between 3 (object, verb, scene) and 5 (two colors) activations
            assert!((3.0..=5.0).contains(&active), "{}", active);
        }
    }

    #[test]
    fn distinct_images_have_distinct_features() {
        for profile in [Profile::Rich, Profile::Simple] {
            let w = generate(13, 30, profile);
            for i in 0..w.pairs.len() {
                for j in i + 1..w.pairs.len() {
                    assert_ne!(
                        w.pairs[i].feature, w.pairs[j].feature,
                        "{:?} vs {:?}",
                        w.pairs[i].caption, w.pairs[j].caption
                    );
                }
            }
        }
    }
}
