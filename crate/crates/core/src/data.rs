//! Corpus files, vocabularies, and the synthetic long-tail generator.
//!
//! A corpus file holds one instance per line with seven tab-separated
//! fields:
//!
//! ```text
//! split  relation  head  head_index  tail  tail_index  tokens
//! ```
//!
//! `split` is `train` or `test`, indices point at the first token of each
//! mention, and tokens are separated by single spaces. Blank lines and lines
//! starting with `#` are skipped.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Instance;
use crate::error::{Error, Result};
use crate::hierarchy::{RelationVocab, NA};
use crate::kg::TripleStore;

/// Sentences longer than this are cut.
pub const MAX_LEN: usize = 120;
pub const UNK: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub split: Split,
    pub relation: String,
    pub head: String,
    pub head_pos: usize,
    pub tail: String,
    pub tail_pos: usize,
    pub tokens: Vec<String>,
}

impl Record {
    /// Cuts the sentence to `max_len` tokens, moving entity indices past the
    /// cut onto the last kept token.
    pub fn truncate(&mut self, max_len: usize) {
        if self.tokens.len() > max_len {
            self.tokens.truncate(max_len);
        }
        let last = self.tokens.len().saturating_sub(1);
        self.head_pos = self.head_pos.min(last);
        self.tail_pos = self.tail_pos.min(last);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
}

fn field<'a>(it: &mut impl Iterator<Item = &'a str>, name: &str, path: &Path, line: usize) -> Result<&'a str> {
    it.next()
        .ok_or_else(|| Error::parse(path, line, format!("missing field `{name}`")))
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parses corpus text, truncating each sentence to [`MAX_LEN`] tokens.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let mut it = raw.split('\t');
            let split = match field(&mut it, "split", origin, line)? {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::parse(origin, line, format!("unknown split `{other}`"))),
            };
            let relation = field(&mut it, "relation", origin, line)?.to_string();
            let head = field(&mut it, "head", origin, line)?.to_string();
            let head_pos = field(&mut it, "head_index", origin, line)?
                .parse::<usize>()
                .map_err(|e| Error::parse(origin, line, format!("head index: {e}")))?;
            let tail = field(&mut it, "tail", origin, line)?.to_string();
            let tail_pos = field(&mut it, "tail_index", origin, line)?
                .parse::<usize>()
                .map_err(|e| Error::parse(origin, line, format!("tail index: {e}")))?;
            let tokens: Vec<String> = field(&mut it, "tokens", origin, line)?
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect();
            if it.next().is_some() {
                return Err(Error::parse(origin, line, "more than 7 fields"));
            }
            if relation.is_empty() || head.is_empty() || tail.is_empty() {
                return Err(Error::parse(origin, line, "empty relation or entity"));
            }
            if tokens.is_empty() {
                return Err(Error::parse(origin, line, "no tokens"));
            }
            if head_pos >= tokens.len() || tail_pos >= tokens.len() {
                return Err(Error::parse(
                    origin,
                    line,
                    format!("entity index beyond sentence of {} tokens", tokens.len()),
                ));
            }
            let mut rec = Record {
                split,
                relation,
                head,
                head_pos,
                tail,
                tail_pos,
                tokens,
            };
            rec.truncate(MAX_LEN);
            records.push(rec);
        }
        Ok(Corpus { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.split.as_str(),
                r.relation,
                r.head,
                r.head_pos,
                r.tail,
                r.tail_pos,
                r.tokens.join(" ")
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// NA first, then the other relations sorted by name. Counts are the
    /// number of training instances per relation.
    pub fn relation_vocab(&self) -> Result<RelationVocab> {
        let names: BTreeSet<&str> = self
            .records
            .iter()
            .map(|r| r.relation.as_str())
            .filter(|&n| n != NA)
            .collect();
        let mut vocab = RelationVocab::new(std::iter::once(NA).chain(names))?;
        let mut counts = vec![0; vocab.len()];
        for r in self.split(Split::Train) {
            counts[vocab.id(&r.relation).unwrap_or(0)] += 1;
        }
        vocab.set_counts(counts)?;
        Ok(vocab)
    }

    /// Training facts `(head, relation, tail)` for every non-NA training record.
    pub fn kg_triples(&self) -> TripleStore {
        let mut store = TripleStore::new();
        for r in self.split(Split::Train).filter(|r| r.relation != NA) {
            store.add_fact(&r.head, &r.relation, &r.tail);
        }
        store
    }
}

/// Token vocabulary; id 0 is the unknown-word token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub fn from_words<I, T>(words: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut v = WordVocab {
            words: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for w in words {
            let w = w.into();
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    /// Every token of the corpus, in order of first appearance.
    pub fn build(corpus: &Corpus) -> Self {
        Self::from_words(corpus.records.iter().flat_map(|r| r.tokens.iter().cloned()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// An encoded instance with its entity pair and relation id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledInstance {
    pub head: String,
    pub tail: String,
    pub relation: usize,
    pub instance: Instance,
}

/// Corpus mapped onto relation and word ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub relations: RelationVocab,
    pub words: WordVocab,
    pub train: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
}

impl Dataset {
    /// Vocabularies built from the corpus itself.
    pub fn build(corpus: &Corpus) -> Result<Self> {
        let relations = corpus.relation_vocab()?;
        let words = WordVocab::build(corpus);
        Self::with_vocab(corpus, relations, words)
    }

    /// Maps `corpus` with existing vocabularies; unseen words become the
    /// unknown token and unseen relations are an error.
    pub fn with_vocab(corpus: &Corpus, relations: RelationVocab, words: WordVocab) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, r) in corpus.records.iter().enumerate() {
            let relation = relations
                .id(&r.relation)
                .ok_or_else(|| Error::Data(format!("record {}: relation `{}` not in vocabulary", i + 1, r.relation)))?;
            let tokens = r.tokens.iter().map(|t| words.id(t)).collect();
            let li = LabeledInstance {
                head: r.head.clone(),
                tail: r.tail.clone(),
                relation,
                instance: Instance::new(tokens, r.head_pos, r.tail_pos)?,
            };
            match r.split {
                Split::Train => train.push(li),
                Split::Test => test.push(li),
            }
        }
        Ok(Dataset {
            relations,
            words,
            train,
            test,
        })
    }
}

/// Shape of a synthetic corpus with a known three-level hierarchy.
///
/// Relation `/g{a}/p{b}/{name}` has parent `/g{a}/p{b}` and grandparent
/// `/g{a}`. Every parent holds one head relation; tail relation `i` joins
/// the parent of head relation `i mod head_relations`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub head_relations: usize,
    pub tail_relations: usize,
    /// Parents per grandparent.
    pub branching: usize,
    /// Training bags per head relation.
    pub head_bags: usize,
    /// Training bags per tail relation.
    pub tail_bags: usize,
    /// Test bags per relation, head and tail alike.
    pub test_bags: usize,
    pub bag_size: usize,
    pub na_bags: usize,
    pub test_na_bags: usize,
    /// Filler words besides cue words and entity names.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an instance carries no cue words.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            head_relations: 4,
            tail_relations: 4,
            branching: 2,
            head_bags: 40,
            tail_bags: 4,
            test_bags: 0,
            bag_size: 1,
            na_bags: 0,
            test_na_bags: 0,
            vocab_size: 50,
            min_len: 8,
            max_len: 16,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.head_relations == 0 || self.tail_relations == 0 {
            return bad("need at least one head and one tail relation".into());
        }
        if self.tail_bags >= self.head_bags {
            return bad(format!(
                "tail bags {} must be fewer than head bags {}",
                self.tail_bags, self.head_bags
            ));
        }
        if self.branching == 0 || self.bag_size == 0 || self.vocab_size == 0 {
            return bad("branching, bag size and vocabulary must be positive".into());
        }
        if self.min_len < 5 || self.max_len < self.min_len {
            return bad(format!(
                "sentence length range {}..={} (minimum 5)",
                self.min_len, self.max_len
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} not in [0, 1]", self.noise));
        }
        // every bag of a parent draws a distinct pair from its entity pools
        let tails_per_parent = self.tail_relations.div_ceil(self.head_relations);
        let per_parent = self.head_bags + self.test_bags + tails_per_parent * (self.tail_bags + self.test_bags);
        if per_parent > POOL * POOL {
            return bad(format!(
                "{per_parent} bags share one parent's {} entity pairs",
                POOL * POOL
            ));
        }
        if self.na_bags + self.test_na_bags > POOL * POOL {
            return bad(format!(
                "{} NA bags exceed {} entity pairs",
                self.na_bags + self.test_na_bags,
                POOL * POOL
            ));
        }
        Ok(())
    }

    pub fn relation_names(&self) -> Vec<String> {
        let parent = |p: usize| format!("/g{}/p{}", p / self.branching, p);
        let heads = (0..self.head_relations).map(|i| format!("{}/h{i}", parent(i)));
        let tails = (0..self.tail_relations).map(|i| format!("{}/t{i}", parent(i % self.head_relations)));
        heads.chain(tails).collect()
    }

    /// Names of the tail relations.
    pub fn tail_names(&self) -> Vec<String> {
        self.relation_names().split_off(self.head_relations)
    }
}

const POOL: usize = 12;

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    used_pairs: HashSet<(String, String)>,
}

impl Generator<'_> {
    fn filler(&mut self) -> String {
        format!("w{}", self.rng.gen_range(0..self.cfg.vocab_size))
    }

    fn pair(&mut self, heads: &str, tails: &str) -> (String, String) {
        loop {
            let h = format!("{heads}{}", self.rng.gen_range(0..POOL));
            let t = format!("{tails}{}", self.rng.gen_range(0..POOL));
            if self.used_pairs.insert((h.clone(), t.clone())) {
                return (h, t);
            }
        }
    }

    fn sentence(&mut self, head: &str, tail: &str, cues: &[String]) -> (Vec<String>, usize, usize) {
        let len = self.rng.gen_range(self.cfg.min_len..=self.cfg.max_len);
        let mut tokens: Vec<String> = (0..len).map(|_| self.filler()).collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(&mut self.rng);
        let (hp, tp) = (slots[0], slots[1]);
        tokens[hp] = head.to_string();
        tokens[tp] = tail.to_string();
        for (cue, &slot) in cues.iter().zip(&slots[2..]) {
            tokens[slot] = cue.clone();
        }
        (tokens, hp, tp)
    }

    fn bags(
        &mut self,
        out: &mut Vec<Record>,
        split: Split,
        relation: &str,
        pools: (&str, &str),
        cues: &[String],
        count: usize,
    ) {
        for _ in 0..count {
            let (head, tail) = self.pair(pools.0, pools.1);
            for _ in 0..self.cfg.bag_size {
                let noisy = cues.is_empty() || self.rng.gen_bool(self.cfg.noise);
                let used: &[String] = if noisy { &[] } else { cues };
                let (tokens, head_pos, tail_pos) = self.sentence(&head, &tail, used);
                out.push(Record {
                    split,
                    relation: relation.to_string(),
                    head: head.clone(),
                    head_pos,
                    tail: tail.clone(),
                    tail_pos,
                    tokens,
                });
            }
        }
    }
}

/// Generates a seeded corpus whose relations follow the hierarchy encoded in
/// their names, together with the training facts as a triple store.
///
/// Non-noise sentences carry three cue words: one for the grandparent, one
/// for the parent and one for the relation itself, so siblings share two of
/// three cues. Head entities come from a pool per grandparent and tail
/// entities from a pool per parent, which ties sibling relations together in
/// the knowledge graph. NA sentences carry filler only.
pub fn synth_longtail(cfg: &SynthConfig) -> Result<(Corpus, TripleStore)> {
    cfg.validate()?;
    let mut g = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        used_pairs: HashSet::new(),
    };
    let names = cfg.relation_names();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let parent = if i < cfg.head_relations {
            i
        } else {
            (i - cfg.head_relations) % cfg.head_relations
        };
        let grand = parent / cfg.branching;
        let cues = vec![format!("cg{grand}"), format!("cp{parent}"), format!("cr{i}")];
        let pools = (format!("eg{grand}_"), format!("ep{parent}_"));
        let n = if i < cfg.head_relations {
            cfg.head_bags
        } else {
            cfg.tail_bags
        };
        g.bags(&mut train, Split::Train, name, (&pools.0, &pools.1), &cues, n);
        g.bags(&mut test, Split::Test, name, (&pools.0, &pools.1), &cues, cfg.test_bags);
    }
    g.bags(&mut train, Split::Train, NA, ("na_h", "na_t"), &[], cfg.na_bags);
    g.bags(&mut test, Split::Test, NA, ("na_h", "na_t"), &[], cfg.test_na_bags);
    train.extend(test);
    let corpus = Corpus { records: train };
    let kg = corpus.kg_triples();
    Ok((corpus, kg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_records() {
        let text = "train\t/a/b\tx\t0\ty\t2\tx likes y\ntest\tNA\tp\t1\tq\t0\tq p\n";
        let c = Corpus::parse(text, Path::new("c.tsv")).unwrap();
        assert_eq!(c.len(), 2);
        let ds = Dataset::build(&c).unwrap();
        assert_eq!(ds.words.len(), 6);
        assert_eq!(ds.relations.names(), ["NA", "/a/b"]);
        assert_eq!(ds.relations.counts(), [0, 1]);
        assert_eq!(c.to_text(), text);
    }

    #[test]
    fn long_sentence_is_cut() {
        let tokens: Vec<String> = (0..150).map(|i| format!("t{i}")).collect();
        let text = format!("train\tr\th\t3\tt\t130\t{}\n", tokens.join(" "));
        let c = Corpus::parse(&text, Path::new("c.tsv")).unwrap();
        assert_eq!(c.records[0].tokens.len(), 120);
        assert_eq!(c.records[0].tail_pos, 119);
        assert_eq!(c.records[0].head_pos, 3);
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let bad = [
            "train\tr\th\t0\tt\t1\n",
            "dev\tr\th\t0\tt\t1\ta b\n",
            "train\tr\th\tx\tt\t1\ta b\n",
            "train\tr\th\t0\tt\t5\ta b\n",
        ];
        for b in bad {
            let text = format!("# header\n{b}");
            match Corpus::parse(&text, Path::new("c.tsv")) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn synth_counts() {
        let (c, kg) = synth_longtail(&SynthConfig::default()).unwrap();
        assert_eq!(c.len(), 176);
        let vocab = c.relation_vocab().unwrap();
        for name in SynthConfig::default().relation_names() {
            let n = vocab.counts()[vocab.id(&name).unwrap()];
            assert_eq!(n, if name.contains("/h") { 40 } else { 4 });
        }
        assert_eq!(kg.facts().len(), 176);
    }

    #[test]
    fn synth_is_seeded() {
        let cfg = SynthConfig {
            noise: 0.3,
            seed: 9,
            ..SynthConfig::default()
        };
        assert_eq!(synth_longtail(&cfg).unwrap().0, synth_longtail(&cfg).unwrap().0);
        let other = SynthConfig {
            seed: 10,
            ..cfg.clone()
        };
        assert_ne!(synth_longtail(&cfg).unwrap().0, synth_longtail(&other).unwrap().0);
    }

    #[test]
    fn synth_config_checked() {
        let cfg = SynthConfig {
            tail_bags: 40,
            ..SynthConfig::default()
        };
        assert!(synth_longtail(&cfg).is_err());
        let cfg = SynthConfig {
            tail_relations: 0,
            ..SynthConfig::default()
        };
        assert!(synth_longtail(&cfg).is_err());
        let cfg = SynthConfig {
            test_bags: 60,
            ..SynthConfig::default()
        };
        assert!(synth_longtail(&cfg).is_err());
    }
}
