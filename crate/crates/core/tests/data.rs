use std::collections::HashSet;

use katt::data::{synth_longtail, Corpus, Dataset, Split, SynthConfig};
use katt::eval::group_pairs;
use katt::trainer::make_bags;
use proptest::prelude::*;

fn small(seed: u64, noise: f64) -> SynthConfig {
    SynthConfig {
        test_bags: 3,
        bag_size: 2,
        na_bags: 5,
        test_na_bags: 2,
        noise,
        seed,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn corpus_text_round_trips(seed: u64) {
        let (corpus, kg) = synth_longtail(&small(seed, 0.3)).unwrap();
        let back = Corpus::parse(&corpus.to_text(), std::path::Path::new("c.tsv")).unwrap();
        prop_assert_eq!(&back, &corpus);
        let kg_back = katt::kg::TripleStore::parse(&kg.to_text(), std::path::Path::new("k.tsv")).unwrap();
        prop_assert_eq!(kg_back.facts(), kg.facts());
    }

    #[test]
    fn noiseless_sentences_carry_their_relation_cue(seed: u64) {
        let cfg = small(seed, 0.0);
        let (corpus, _) = synth_longtail(&cfg).unwrap();
        let names = cfg.relation_names();
        for r in &corpus.records {
            let cue = names.iter().position(|n| *n == r.relation).map(|i| format!("cr{i}"));
            match cue {
                Some(c) => prop_assert_eq!(r.tokens.iter().filter(|t| **t == c).count(), 1),
                None => prop_assert!(r.tokens.iter().all(|t| !t.starts_with("cr"))),
            }
            prop_assert_eq!(&r.tokens[r.head_pos], &r.head);
            prop_assert_eq!(&r.tokens[r.tail_pos], &r.tail);
        }
    }

    #[test]
    fn entity_pairs_are_unique_per_bag(seed: u64) {
        let cfg = small(seed, 0.5);
        let (corpus, _) = synth_longtail(&cfg).unwrap();
        let data = Dataset::build(&corpus).unwrap();
        let bags = make_bags(&data.train);
        let pairs: HashSet<(&str, &str)> = bags.iter().map(|b| (b.head.as_str(), b.tail.as_str())).collect();
        prop_assert_eq!(pairs.len(), bags.len());
        let expected = cfg.head_relations * cfg.head_bags + cfg.tail_relations * cfg.tail_bags + cfg.na_bags;
        prop_assert_eq!(bags.len(), expected);
        prop_assert!(bags.iter().all(|b| b.instances.len() == cfg.bag_size));
        let test = group_pairs(&data.test, &data.relations);
        prop_assert_eq!(test.len(), (cfg.head_relations + cfg.tail_relations) * cfg.test_bags + cfg.test_na_bags);
    }
}

#[test]
fn relation_counts_follow_training_split() {
    let cfg = small(1, 0.0);
    let (corpus, _) = synth_longtail(&cfg).unwrap();
    let vocab = corpus.relation_vocab().unwrap();
    assert_eq!(vocab.name(0), "NA");
    for name in cfg.tail_names() {
        let id = vocab.id(&name).unwrap();
        assert_eq!(vocab.counts()[id], cfg.tail_bags * cfg.bag_size);
    }
    let test = corpus.split(Split::Test).count();
    assert_eq!(
        test,
        ((cfg.head_relations + cfg.tail_relations) * cfg.test_bags + cfg.test_na_bags) * cfg.bag_size
    );
}

#[test]
fn long_records_are_cut_on_load() {
    let tokens: Vec<String> = (0..150).map(|i| format!("t{i}")).collect();
    let line = format!("train\t/a/r\tt3\t3\tt140\t140\t{}\n", tokens.join(" "));
    let corpus = Corpus::parse(&line, std::path::Path::new("c.tsv")).unwrap();
    let r = &corpus.records[0];
    assert_eq!(r.tokens.len(), 120);
    assert_eq!((r.head_pos, r.tail_pos), (3, 119));
}

#[test]
fn noiseless_corpus_is_token_lookup_separable() {
    use std::collections::HashMap;
    let (corpus, _) = synth_longtail(&small(4, 0.0)).unwrap();
    let words = |r: &katt::data::Record| -> Vec<String> {
        let ents = [r.head_pos, r.tail_pos];
        r.tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| !ents.contains(i))
            .map(|(_, t)| t.clone())
            .collect()
    };
    let mut seen: HashMap<String, HashSet<String>> = HashMap::new();
    for r in corpus.split(Split::Train) {
        for w in words(r) {
            seen.entry(w).or_default().insert(r.relation.clone());
        }
    }
    let lookup = |r: &katt::data::Record| -> String {
        words(r)
            .iter()
            .filter_map(|w| {
                seen.get(w)
                    .filter(|s| s.len() == 1)
                    .and_then(|s| s.iter().next().cloned())
            })
            .next()
            .unwrap_or_else(|| "NA".into())
    };
    for r in &corpus.records {
        assert_eq!(lookup(r), r.relation);
    }
}
