//! Word-level vocabulary, tokenizer, edit records, and a deterministic
//! synthetic fact world.
//!
//! Text is whitespace-tokenized against a closed vocabulary; there is
//! no unknown-token fallback, so any out-of-vocabulary word is an
//! error naming the word. Token indices 0 and 1 are reserved for the
//! begin and end markers.
//!
//! The synthetic world holds `entities x relations` subject–relation
//! facts (e.g. "bosa lives in paris"), renders each through several
//! templates to form a pretraining corpus, and derives edit requests
//! whose new objects differ from the trained ones. Every edit record
//! carries paraphrase contexts, rephrase portability probes, and
//! locality probes drawn from facts no edit in the dataset touches.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Reserved begin-of-sequence token index.
pub const BOS: usize = 0;
/// Reserved end-of-sequence token index.
pub const EOS: usize = 1;

/// Printable names of the reserved tokens.
pub const BOS_TEXT: &str = "<bos>";
pub const EOS_TEXT: &str = "<eos>";

/// Token sequence; every entry is an index into one [`Vocab`].
pub type TokenSeq = Vec<usize>;

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusError {
    /// A word in the input is not in the vocabulary.
    UnknownWord(String),
    /// Dataset construction parameters are inconsistent.
    BadWorld(String),
    /// A record refers to text that cannot be tokenized.
    BadRecord { index: usize, detail: String },
}

impl core::fmt::Display for CorpusError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CorpusError::UnknownWord(w) => write!(f, "word {w:?} is not in the vocabulary"),
            CorpusError::BadWorld(msg) => write!(f, "bad world parameters: {msg}"),
            CorpusError::BadRecord { index, detail } => {
                write!(f, "edit record {index}: {detail}")
            }
        }
    }
}

/// Closed word-level vocabulary with reserved begin/end tokens at
/// indices [`BOS`] and [`EOS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from the word list (reserved markers are added in front;
    /// duplicates collapse, order of first appearance is kept).
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        let mut tokens = vec![BOS_TEXT.to_string(), EOS_TEXT.to_string()];
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.as_ref();
            assert!(!w.is_empty() && !w.contains(char::is_whitespace), "invalid vocab word {w:?}");
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
        Vocab { tokens }
    }

    /// Rebuild from a full token list that already starts with the
    /// reserved markers (checkpoint loading path).
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < 2 || tokens[BOS] != BOS_TEXT || tokens[EOS] != EOS_TEXT {
            return Err(CorpusError::BadWorld(
                "token list must start with the reserved begin/end markers".to_string(),
            ));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(CorpusError::BadWorld("token list contains duplicates".to_string()));
        }
        Ok(Vocab { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn token_list(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization against the closed vocabulary. The empty
    /// string maps to the empty sequence. Reserved marker names are
    /// accepted so datasets can mention them explicitly.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq, CorpusError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| CorpusError::UnknownWord(w.to_string())))
            .collect()
    }

    /// Inverse of [`Vocab::tokenize`] up to whitespace normalization.
    pub fn detokenize(&self, seq: &[usize]) -> String {
        let mut out = String::new();
        for (i, &t) in seq.iter().enumerate() {
            assert!(t < self.tokens.len(), "token {t} out of range for vocab {}", self.tokens.len());
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&self.tokens[t]);
        }
        out
    }
}

/// One knowledge-edit request, mirroring the usual counterfactual
/// editing datasets: a query prompt, the answer the model was trained
/// on, the new answer, natural-language contexts stating the new fact,
/// and optional probe sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub prompt: String,
    pub ground_truth: Vec<String>,
    pub target_new: String,
    #[serde(default)]
    pub context: Vec<String>,
    /// Rephrasings of the prompt that should also produce the new
    /// answer after the edit.
    #[serde(default)]
    pub portability_probes: Vec<Probe>,
    /// Prompts about unrelated facts whose answers must not change.
    #[serde(default)]
    pub locality_probes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub prompt: String,
    pub target: String,
}

/// Where a dataset came from; recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64, entities: usize, relations: usize },
    Loaded { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDataset {
    pub vocab: Vocab,
    pub records: Vec<EditRecord>,
    pub provenance: Provenance,
}

/// An [`EditRecord`] resolved against a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedRecord {
    pub query: TokenSeq,
    pub old_target: TokenSeq,
    pub new_target: TokenSeq,
    pub contexts: Vec<TokenSeq>,
    pub portability: Vec<(TokenSeq, TokenSeq)>,
    pub locality: Vec<TokenSeq>,
}

/// Tokenize one record; errors carry the record index and offending
/// field.
pub fn tokenize_record(
    vocab: &Vocab,
    record: &EditRecord,
    index: usize,
) -> Result<TokenizedRecord, CorpusError> {
    let field = |name: &str, text: &str| -> Result<TokenSeq, CorpusError> {
        let seq = vocab
            .tokenize(text)
            .map_err(|e| CorpusError::BadRecord { index, detail: format!("{name}: {e}") })?;
        Ok(seq)
    };
    let query = field("prompt", &record.prompt)?;
    if query.is_empty() {
        return Err(CorpusError::BadRecord { index, detail: "prompt is empty".to_string() });
    }
    let new_target = field("target_new", &record.target_new)?;
    if new_target.is_empty() {
        return Err(CorpusError::BadRecord { index, detail: "target_new is empty".to_string() });
    }
    let old_target = match record.ground_truth.first() {
        Some(t) => field("ground_truth", t)?,
        None => TokenSeq::new(),
    };
    // Contexts are complete statements; when one is prepended to a
    // query the two must be joined the way the corpus joins sentences
    // ("stmt . stmt"), so each context carries a trailing separator.
    let mut contexts = Vec::with_capacity(record.context.len());
    for c in &record.context {
        let mut seq = field("context", c)?;
        if let Some(sep) = vocab.id(".") {
            seq.push(sep);
        }
        contexts.push(seq);
    }
    let mut portability = Vec::with_capacity(record.portability_probes.len());
    for p in &record.portability_probes {
        portability.push((field("portability prompt", &p.prompt)?, field("portability target", &p.target)?));
    }
    let mut locality = Vec::with_capacity(record.locality_probes.len());
    for l in &record.locality_probes {
        locality.push(field("locality prompt", l)?);
    }
    Ok(TokenizedRecord { query, old_target, new_target, contexts, portability, locality })
}

/// A synthetic world: the pretraining corpus (token sequences and their
/// text) plus the edit dataset derived from it.
#[derive(Debug, Clone)]
pub struct World {
    pub corpus: Vec<TokenSeq>,
    pub corpus_text: Vec<String>,
    pub dataset: EditDataset,
    /// `(entity, relation, object)` index triples of the true facts.
    pub facts: Vec<(usize, usize, usize)>,
}

const SYLLABLES: [&str; 16] = [
    "ba", "ce", "do", "fu", "gi", "ha", "jo", "ku", "la", "me", "ni", "po", "ra", "su", "ti", "vo",
];

/// Relation templates. Each relation has one base statement/query pair
/// and two rephrasings; `{s}` is the subject, `{o}` the object.
struct Relation {
    statements: [&'static str; 3],
    queries: [&'static str; 3],
    objects: &'static [&'static str],
}

const RELATIONS: [Relation; 3] = [
    Relation {
        statements: ["{s} lives in {o}", "the home of {s} is {o}", "{s} stays in {o}"],
        queries: ["{s} lives in", "the home of {s} is", "{s} stays in"],
        objects: &["paris", "oslo", "cairo", "lima", "kyoto", "quito", "accra", "hanoi"],
    },
    Relation {
        statements: ["{s} works as {o}", "the job of {s} is {o}", "{s} serves as {o}"],
        queries: ["{s} works as", "the job of {s} is", "{s} serves as"],
        objects: &["baker", "pilot", "farmer", "singer", "doctor", "weaver", "sailor", "judge"],
    },
    Relation {
        statements: ["{s} speaks {o}", "the language of {s} is {o}", "{s} talks in {o}"],
        queries: ["{s} speaks", "the language of {s} is", "{s} talks in"],
        objects: &["latin", "norse", "khmer", "welsh", "zulu", "hindi", "tamil", "creole"],
    },
];

/// Maximum entities the name generator can produce.
pub const MAX_ENTITIES: usize = SYLLABLES.len() * SYLLABLES.len();

fn entity_name(i: usize) -> String {
    format!("{}{}", SYLLABLES[i / SYLLABLES.len()], SYLLABLES[i % SYLLABLES.len()])
}

fn render(template: &str, subject: &str, object: &str) -> String {
    template.replace("{s}", subject).replace("{o}", object)
}

/// Number of paraphrase contexts each synthetic edit record carries.
pub const CONTEXTS_PER_RECORD: usize = 5;
/// Locality probes per synthetic edit record.
pub const LOCALITY_PROBES_PER_RECORD: usize = 3;

/// Build a deterministic synthetic world.
///
/// * every entity gets one object per relation (drawn by seed);
/// * the pretraining corpus renders every fact through all three
///   statement templates, plus "statement . paraphrase" lines that
///   teach the follow-up-paraphrase pattern in-context sampling relies
///   on;
/// * `n_edits` records pick distinct (entity, relation) pairs, a new
///   object different from the trained one, five paraphrase contexts,
///   two rephrase portability probes, and three locality probes about
///   pairs no edit in the dataset touches.
pub fn synth_world(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_edits: usize,
) -> Result<World, CorpusError> {
    if n_entities == 0 || n_entities > MAX_ENTITIES {
        return Err(CorpusError::BadWorld(format!(
            "entity count must be in 1..={MAX_ENTITIES}, got {n_entities}"
        )));
    }
    if n_relations == 0 || n_relations > RELATIONS.len() {
        return Err(CorpusError::BadWorld(format!(
            "relation count must be in 1..={}, got {n_relations}",
            RELATIONS.len()
        )));
    }
    let n_pairs = n_entities * n_relations;
    if n_edits > n_pairs {
        return Err(CorpusError::BadWorld(format!(
            "{n_edits} edits requested but only {n_pairs} (entity, relation) pairs exist"
        )));
    }
    if n_edits > 0 && n_edits + LOCALITY_PROBES_PER_RECORD > n_pairs {
        return Err(CorpusError::BadWorld(format!(
            "no untouched pairs left for locality probes ({n_edits} edits of {n_pairs} pairs)"
        )));
    }

    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let entities: Vec<String> = (0..n_entities).map(entity_name).collect();

    // Vocabulary: all template words, all entity names, all objects —
    // fixed up front so loaded and synthetic paths agree.
    let mut words: Vec<String> = Vec::new();
    words.push(".".to_string());
    for rel in RELATIONS.iter().take(n_relations) {
        for t in rel.statements {
            for w in t.split_whitespace() {
                if w != "{s}" && w != "{o}" {
                    words.push(w.to_string());
                }
            }
        }
        for &o in rel.objects {
            words.push(o.to_string());
        }
    }
    words.extend(entities.iter().cloned());
    let vocab = Vocab::new(words);

    // True facts: object index per (entity, relation).
    let mut facts = Vec::with_capacity(n_pairs);
    for e in 0..n_entities {
        for r in 0..n_relations {
            let o = (rng.next_u64() as usize) % RELATIONS[r].objects.len();
            facts.push((e, r, o));
        }
    }

    // Corpus: every fact through every statement template, then every
    // ordered pair of templates joined sentence-style (including a
    // template with itself), then the two three-sentence shapes that a
    // two-sentence context followed by the base query produces. The
    // paragraph shapes matter: a prepended context plus a query must
    // always be a prefix of some trained line shape or the model has
    // never seen those positions.
    //
    // The same shapes are repeated with a counterfactual object that
    // the paragraph asserts and then restates. Within those lines the
    // later objects are only predictable by reading the first
    // sentence, which is what lets a prepended context override a
    // memorized fact.
    let pair_shapes: [(usize, usize); 9] =
        [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)];
    let cf_pair_shapes: [(usize, usize); 3] = [(0, 0), (1, 0), (2, 0)];
    let triple_shapes: [(usize, usize, usize); 2] = [(0, 1, 0), (2, 0, 0)];
    let mut corpus_text = Vec::new();
    for &(e, r, o) in &facts {
        let subject = &entities[e];
        let object = RELATIONS[r].objects[o];
        let s: Vec<String> =
            RELATIONS[r].statements.iter().map(|t| render(t, subject, object)).collect();
        for line in &s {
            corpus_text.push(line.clone());
        }
        for &(i, j) in &pair_shapes {
            corpus_text.push(format!("{} . {}", s[i], s[j]));
        }
        for &(i, j, k) in &triple_shapes {
            corpus_text.push(format!("{} . {} . {}", s[i], s[j], s[k]));
        }
        let mut alt_line = |shape_len: usize, ix: &[usize]| {
            let mut alt = (rng.next_u64() as usize) % (RELATIONS[r].objects.len() - 1);
            if alt >= o {
                alt += 1;
            }
            let alt_object = RELATIONS[r].objects[alt];
            let parts: Vec<String> = ix[..shape_len]
                .iter()
                .map(|&i| render(RELATIONS[r].statements[i], subject, alt_object))
                .collect();
            parts.join(" . ")
        };
        for &(i, j) in &cf_pair_shapes {
            corpus_text.push(alt_line(2, &[i, j]));
        }
        for &(i, j, k) in &triple_shapes {
            corpus_text.push(alt_line(3, &[i, j, k]));
        }
    }
    let mut corpus = Vec::with_capacity(corpus_text.len());
    for line in &corpus_text {
        let mut seq = vec![BOS];
        seq.extend(vocab.tokenize(line).expect("corpus words are in the vocabulary"));
        seq.push(EOS);
        corpus.push(seq);
    }

    // Pick distinct (entity, relation) pairs to edit.
    let mut pair_order: Vec<usize> = (0..n_pairs).collect();
    for i in (1..pair_order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        pair_order.swap(i, j);
    }
    let edited: Vec<usize> = pair_order[..n_edits].to_vec();
    let edited_set: BTreeSet<usize> = edited.iter().copied().collect();
    let untouched: Vec<usize> = (0..n_pairs).filter(|p| !edited_set.contains(p)).collect();

    let mut records = Vec::with_capacity(n_edits);
    for (k, &pair) in edited.iter().enumerate() {
        let (e, r, o) = facts[pair];
        let rel = &RELATIONS[r];
        let subject = &entities[e];
        let old_object = rel.objects[o];
        // New object: any other object of the same relation.
        let mut new_ix = (rng.next_u64() as usize) % (rel.objects.len() - 1);
        if new_ix >= o {
            new_ix += 1;
        }
        let new_object = rel.objects[new_ix];

        let base = render(rel.statements[0], subject, new_object);
        let re1 = render(rel.statements[1], subject, new_object);
        let re2 = render(rel.statements[2], subject, new_object);
        let context = vec![
            base.clone(),
            re1.clone(),
            re2.clone(),
            format!("{base} . {re1}"),
            format!("{re2} . {base}"),
        ];
        let portability_probes = vec![
            Probe { prompt: render(rel.queries[1], subject, ""), target: new_object.to_string() },
            Probe { prompt: render(rel.queries[2], subject, ""), target: new_object.to_string() },
        ];
        // Locality probes rotate deterministically through untouched pairs.
        let mut locality_probes = Vec::with_capacity(LOCALITY_PROBES_PER_RECORD);
        for i in 0..LOCALITY_PROBES_PER_RECORD {
            let pick = untouched[(k * LOCALITY_PROBES_PER_RECORD + i) % untouched.len()];
            let (le, lr, _) = facts[pick];
            locality_probes.push(render(RELATIONS[lr].queries[0], &entities[le], ""));
        }
        records.push(EditRecord {
            prompt: render(rel.queries[0], subject, ""),
            ground_truth: vec![old_object.to_string()],
            target_new: new_object.to_string(),
            context,
            portability_probes,
            locality_probes,
        });
    }

    let dataset = EditDataset {
        vocab,
        records,
        provenance: Provenance::Synthetic { seed, entities: n_entities, relations: n_relations },
    };
    Ok(World { corpus, corpus_text, dataset, facts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_tokens_sit_at_fixed_indices() {
        let v = Vocab::new(["alpha", "beta"]);
        assert_eq!(v.id(BOS_TEXT), Some(BOS));
        assert_eq!(v.id(EOS_TEXT), Some(EOS));
        assert_eq!(v.id("alpha"), Some(2));
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn tokenize_round_trips_and_rejects_unknown_words() {
        let v = Vocab::new(["the", "cat", "sat"]);
        let seq = v.tokenize("the cat  sat").unwrap();
        assert_eq!(v.detokenize(&seq), "the cat sat");
        assert_eq!(v.tokenize("").unwrap(), Vec::<usize>::new());
        match v.tokenize("the dog sat") {
            Err(CorpusError::UnknownWord(w)) => assert_eq!(w, "dog"),
            other => panic!("expected unknown-word error, got {other:?}"),
        }
    }

    #[test]
    fn synth_world_is_deterministic_in_its_seed() {
        let w1 = synth_world(42, 6, 2, 4).unwrap();
        let w2 = synth_world(42, 6, 2, 4).unwrap();
        assert_eq!(w1.dataset, w2.dataset);
        assert_eq!(w1.corpus, w2.corpus);
        let w3 = synth_world(43, 6, 2, 4).unwrap();
        assert!(w1.dataset != w3.dataset || w1.corpus != w3.corpus);
    }

    #[test]
    fn synth_world_validates_sizes() {
        assert!(matches!(synth_world(1, 0, 1, 0), Err(CorpusError::BadWorld(_))));
        assert!(matches!(synth_world(1, 4, 9, 0), Err(CorpusError::BadWorld(_))));
        assert!(matches!(synth_world(1, 2, 2, 5), Err(CorpusError::BadWorld(_))));
    }

    #[test]
    fn edits_change_the_object_and_carry_probes() {
        let w = synth_world(7, 8, 3, 10).unwrap();
        assert_eq!(w.dataset.records.len(), 10);
        for rec in &w.dataset.records {
            assert_ne!(rec.ground_truth[0], rec.target_new);
            assert_eq!(rec.context.len(), CONTEXTS_PER_RECORD);
            assert_eq!(rec.portability_probes.len(), 2);
            assert_eq!(rec.locality_probes.len(), LOCALITY_PROBES_PER_RECORD);
            // Context statements mention the new object, never the old one.
            for c in &rec.context {
                assert!(c.contains(&rec.target_new));
                assert!(!c.contains(&rec.ground_truth[0]));
            }
        }
    }

    #[test]
    fn locality_probes_avoid_every_edited_pair() {
        let w = synth_world(3, 6, 3, 8).unwrap();
        // An edited query prompt must never appear as a locality probe
        // of any record in the dataset.
        let edited_prompts: BTreeSet<&str> =
            w.dataset.records.iter().map(|r| r.prompt.as_str()).collect();
        for rec in &w.dataset.records {
            for l in &rec.locality_probes {
                assert!(!edited_prompts.contains(l.as_str()), "locality probe {l:?} was edited");
            }
        }
    }

    #[test]
    fn corpus_lines_are_marked_and_in_vocab() {
        let w = synth_world(5, 4, 2, 2).unwrap();
        // 4 entities * 2 relations * (3 statements + 9 pairs + 2 triples
        // + 3 counterfactual pairs + 2 counterfactual triples)
        assert_eq!(w.corpus.len(), 4 * 2 * 19);
        for seq in &w.corpus {
            assert_eq!(seq[0], BOS);
            assert_eq!(*seq.last().unwrap(), EOS);
            for &t in seq {
                assert!(t < w.dataset.vocab.len());
            }
        }
    }

    #[test]
    fn tokenized_records_resolve_against_the_world_vocab() {
        let w = synth_world(11, 5, 3, 6).unwrap();
        for (i, rec) in w.dataset.records.iter().enumerate() {
            let tr = tokenize_record(&w.dataset.vocab, rec, i).unwrap();
            assert!(!tr.query.is_empty());
            assert_eq!(tr.new_target.len(), 1); // objects are single words
            assert_eq!(tr.contexts.len(), CONTEXTS_PER_RECORD);
        }
        let bad = EditRecord {
            prompt: "unknownword lives in".to_string(),
            ground_truth: vec!["paris".to_string()],
            target_new: "oslo".to_string(),
            context: vec![],
            portability_probes: vec![],
            locality_probes: vec![],
        };
        assert!(matches!(
            tokenize_record(&w.dataset.vocab, &bad, 3),
            Err(CorpusError::BadRecord { index: 3, .. })
        ));
    }
}
