//! Class set, caption parsing into subject/object region tags, and control
//! sentence construction.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{Color, Predicate, Shape, Size, TemplateId, Texture};

pub const SEP: &str = "[SEP]";

/// Ordered, duplicate-free word list with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Vocabulary the class set is drawn from.
#[derive(Debug, Clone, Default)]
pub struct GrammarVocabulary {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub textures: Vec<String>,
    pub relations: Vec<String>,
}

impl GrammarVocabulary {
    /// The synthetic world's grammar. Only non-solid textures are class
    /// words: `solid` never appears in a caption.
    pub fn synthetic() -> Self {
        let w = |s: &str| s.to_string();
        Self {
            shapes: Shape::ALL.iter().map(|s| w(s.word())).collect(),
            colors: Color::ALL.iter().map(|c| w(c.word())).collect(),
            sizes: Size::ALL.iter().map(|s| w(s.word())).collect(),
            textures: Texture::ALL[1..].iter().map(|t| w(t.word())).collect(),
            relations: Predicate::ALL.iter().map(|p| w(p.head_word())).collect(),
        }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.shapes
            .iter()
            .chain(&self.colors)
            .chain(&self.sizes)
            .chain(&self.textures)
            .chain(&self.relations)
    }
}

impl ClassSet {
    /// Builds the lexicographically sorted class set. Duplicates are rejected.
    pub fn build(grammar: &GrammarVocabulary) -> Result<Self> {
        Self::from_words(grammar.all().cloned().collect::<Vec<_>>(), true)
    }

    fn from_words(mut words: Vec<String>, sort: bool) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::ClassSet("empty vocabulary".into()));
        }
        if sort {
            words.sort();
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::ClassSet(format!("invalid class word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::ClassSet(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn synthetic() -> Self {
        Self::build(&GrammarVocabulary::synthetic()).expect("grammar vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn index_of(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn contains(&self, w: &str) -> bool {
        self.index.contains_key(w)
    }

    /// One word per line, in index order.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_words(
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
            false,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Disjoint subject / object partitions of a caption's class words.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSets {
    pub subject: BTreeSet<String>,
    pub object: BTreeSet<String>,
}

impl TagSets {
    pub fn all(&self) -> BTreeSet<String> {
        self.subject.union(&self.object).cloned().collect()
    }
}

fn is_shape_word(w: &str) -> bool {
    Shape::from_word(w).is_some()
}

/// Splits a caption's class-set words into subject and object tags.
///
/// The subject phrase ends at the first shape word. For grammar captions the
/// template id fixes this boundary exactly; without one the same first
/// shape-word boundary is used as a heuristic. Words already in the subject
/// set are excluded from the object set.
pub fn parse_caption(caption: &[String], class_set: &ClassSet, template: Option<TemplateId>) -> TagSets {
    let boundary = match template {
        Some(TemplateId::T0) | Some(TemplateId::T1) => caption.len(),
        _ => caption
            .iter()
            .position(|w| is_shape_word(w))
            .map(|i| i + 1)
            .unwrap_or(caption.len()),
    };
    let mut tags = TagSets::default();
    for (i, w) in caption.iter().enumerate() {
        if !class_set.contains(w) {
            continue;
        }
        if i < boundary {
            tags.subject.insert(w.clone());
        }
    }
    for w in &caption[boundary.min(caption.len())..] {
        if class_set.contains(w) && !tags.subject.contains(w) {
            tags.object.insert(w.clone());
        }
    }
    tags
}

/// First noun (shape word) of a caption.
pub fn first_noun(caption: &[String], class_set: &ClassSet) -> Option<String> {
    caption
        .iter()
        .find(|w| is_shape_word(w) && class_set.contains(w))
        .cloned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlSource {
    SelfTags,
    Interactive,
    GoldDropout,
}

/// Control words followed by a terminal `[SEP]`; empty when no word survives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSentence {
    pub tokens: Vec<String>,
    pub source: ControlSource,
}

impl ControlSentence {
    pub fn empty(source: ControlSource) -> Self {
        Self { tokens: Vec::new(), source }
    }

    /// Sentence from words in the given order (no dropout, no shuffle).
    pub fn from_words<S: AsRef<str>>(words: &[S], source: ControlSource) -> Self {
        let mut tokens: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        if !tokens.is_empty() {
            tokens.push(SEP.to_string());
        }
        Self { tokens, source }
    }

    /// The control words without the terminal separator.
    pub fn words(&self) -> &[String] {
        match self.tokens.split_last() {
            Some((last, rest)) if last == SEP => rest,
            _ => &self.tokens,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Bernoulli keep with probability `keep_prob`, uniform shuffle of the
/// survivors, `[SEP]` appended when anything survives.
pub fn make_control_sentence<S: AsRef<str>>(words: &[S], rng: &mut impl Rng, keep_prob: f64) -> ControlSentence {
    let p = keep_prob.clamp(0.0, 1.0);
    let mut kept: Vec<String> = words
        .iter()
        .filter(|_| rng.random_bool(p))
        .map(|w| w.as_ref().to_string())
        .collect();
    kept.shuffle(rng);
    ControlSentence::from_words(&kept, ControlSource::GoldDropout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn synthetic_class_set_has_24_sorted_words() {
        let cs = ClassSet::synthetic();
        assert_eq!(cs.len(), 24);
        let mut sorted = cs.words().to_vec();
        sorted.sort();
        assert_eq!(sorted, cs.words());
        assert!(!cs.contains("solid"));
    }

    #[test]
    fn empty_and_duplicate_vocabularies_are_rejected() {
        assert!(ClassSet::build(&GrammarVocabulary::default()).is_err());
        let mut g = GrammarVocabulary::synthetic();
        g.colors.push("red".into());
        assert!(ClassSet::build(&g).is_err());
    }

    #[test]
    fn class_set_round_trips() {
        let cs = ClassSet::synthetic();
        let back = ClassSet::from_text(&cs.to_text()).unwrap();
        assert_eq!(back, cs);
        for w in cs.words() {
            assert_eq!(back.index_of(w), cs.index_of(w));
        }
    }

    #[test]
    fn parses_grammar_captions() {
        let cs = ClassSet::synthetic();
        let t1 = parse_caption(&toks("a striped red circle"), &cs, Some(TemplateId::T1));
        assert_eq!(t1.subject, set(&["striped", "red", "circle"]));
        assert!(t1.object.is_empty());
        let t2 = parse_caption(&toks("a red circle left of a blue square"), &cs, Some(TemplateId::T2));
        assert_eq!(t2.subject, set(&["red", "circle"]));
        assert_eq!(t2.object, set(&["left", "blue", "square"]));
        // Free text uses the same boundary.
        assert_eq!(parse_caption(&toks("a red circle left of a blue square"), &cs, None), t2);
        let none = parse_caption(&toks("the dog runs"), &cs, None);
        assert!(none.subject.is_empty() && none.object.is_empty());
    }

    #[test]
    fn shared_words_stay_in_the_subject_set() {
        let cs = ClassSet::synthetic();
        let t = parse_caption(&toks("a red circle near a red square"), &cs, Some(TemplateId::T2));
        assert_eq!(t.subject, set(&["red", "circle"]));
        assert_eq!(t.object, set(&["near", "square"]));
    }

    #[test]
    fn first_noun_is_first_shape_word() {
        let cs = ClassSet::synthetic();
        assert_eq!(first_noun(&toks("a striped red circle"), &cs).as_deref(), Some("circle"));
        assert_eq!(first_noun(&toks("a red circle left of a blue square"), &cs).as_deref(), Some("circle"));
        assert_eq!(first_noun(&toks("a red thing"), &cs), None);
    }

    #[test]
    fn control_sentence_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let words = ["red", "circle"];
        let all = make_control_sentence(&words, &mut rng, 1.0);
        assert_eq!(all.tokens.len(), 3);
        assert_eq!(all.tokens[2], SEP);
        assert_eq!(set(&[&all.tokens[0], &all.tokens[1]]), set(&words));
        assert!(make_control_sentence(&words, &mut rng, 0.0).tokens.is_empty());
        assert_eq!(all.words().len(), 2);
    }

    #[test]
    fn half_keep_probability_keeps_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let words = ["red", "circle"];
        let total: usize = (0..10_000)
            .map(|_| make_control_sentence(&words, &mut rng, 0.5).words().len())
            .sum();
        let mean = total as f64 / 10_000.0;
        assert!((0.95..=1.05).contains(&mean), "mean survivors {mean}");
    }

    #[test]
    fn shuffle_covers_both_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let firsts: BTreeSet<String> = (0..50)
            .map(|_| make_control_sentence(&["red", "circle"], &mut rng, 1.0).tokens[0].clone())
            .collect();
        assert_eq!(firsts.len(), 2);
    }
}
