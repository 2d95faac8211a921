//! End-to-end assembly from a run configuration: TransE relation vectors,
//! hierarchy construction, model initialization, encoder pretraining and
//! training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{HierarchyMode, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hierarchy::{
    build_agglomerative, build_amie, build_kmeans, init_node_vectors, parse_predefined, HierarchyGraph, RelationVocab,
};
use crate::kg::{train_transe, TripleStore, VectorTable};
use crate::model::{AttentionKind, Model};
use crate::scalar::Scalar;
use crate::trainer::{make_bags, pretrain_encoder, Bag, Trainer};

/// TransE relation vectors learned from `store`.
pub fn relation_vectors<S: Scalar>(cfg: &RunConfig, store: &TripleStore) -> Result<VectorTable<S>> {
    Ok(train_transe::<S>(store, &cfg.transe_config()?)?.table.relations)
}

/// Hierarchy over the non-NA relations of `vocab` using `cfg.hierarchy`.
/// The clustering builders need `vectors`; AMIE needs `store`.
pub fn build_hierarchy<S: Scalar>(
    cfg: &RunConfig,
    vocab: &RelationVocab,
    vectors: Option<&VectorTable<S>>,
    store: Option<&TripleStore>,
) -> Result<HierarchyGraph> {
    let need_vectors = || vectors.ok_or(Error::Uninitialized("relation vectors for clustering"));
    match cfg.hierarchy {
        HierarchyMode::Predefined => parse_predefined(vocab),
        HierarchyMode::Kmeans => build_kmeans(vocab, need_vectors()?, cfg.hierarchy_layers, &cfg.kmeans_k, cfg.seed),
        HierarchyMode::Hc => build_agglomerative(vocab, need_vectors()?, cfg.hierarchy_layers),
        HierarchyMode::Amie => build_amie(
            vocab,
            store.ok_or(Error::Uninitialized("triple store for rule mining"))?,
            cfg.amie_threshold,
        ),
    }
}

/// Fresh model for `cfg.attention`. The hierarchical model needs the
/// hierarchy and the relation vectors its node vectors are averaged from.
pub fn init_model<S: Scalar>(
    cfg: &RunConfig,
    relations: &RelationVocab,
    vocab_size: usize,
    hierarchy: Option<HierarchyGraph>,
    vectors: Option<&VectorTable<S>>,
) -> Result<Model<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.attention {
        AttentionKind::Att => Model::att(cfg.model_config(), relations.clone(), vocab_size, &mut rng),
        AttentionKind::Katt => {
            let hierarchy = hierarchy.ok_or(Error::Uninitialized("hierarchy"))?;
            hierarchy.check_leaves(relations)?;
            let vectors = vectors.ok_or(Error::Uninitialized("relation vectors"))?;
            let implicit = init_node_vectors(&hierarchy, vectors)?;
            Model::katt(
                cfg.model_config(),
                relations.clone(),
                vocab_size,
                hierarchy,
                implicit,
                &mut rng,
            )
        }
    }
}

/// Initialized trainer and the training bags. The hierarchical model's
/// encoder is pretrained under the flat head first; its log rows lead the
/// trainer's log.
pub fn prepare_training<S: Scalar>(
    cfg: &RunConfig,
    dataset: &Dataset,
    hierarchy: Option<HierarchyGraph>,
    vectors: Option<&VectorTable<S>>,
) -> Result<(Trainer<S>, Vec<Bag>)> {
    cfg.validate()?;
    let bags = make_bags(&dataset.train);
    if bags.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mut model = init_model(cfg, &dataset.relations, dataset.words.len(), hierarchy, vectors)?;
    let tc = cfg.train_config();
    let mut pre_log = Vec::new();
    if cfg.attention == AttentionKind::Katt && tc.pretrain_epochs > 0 {
        let (encoder, log) = pretrain_encoder(model.encoder.clone(), &model.config, &dataset.relations, &bags, &tc)?;
        model.encoder = encoder;
        pre_log = log;
    }
    let mut trainer = Trainer::new(model, tc)?;
    trainer.check_bags(&bags)?;
    trainer.prepend_log(pre_log);
    Ok((trainer, bags))
}

/// Full run on `dataset`: TransE on the training facts (hierarchical model
/// only), hierarchy, pretraining and training.
pub fn run_training<S: Scalar>(cfg: &RunConfig, dataset: &Dataset, store: &TripleStore) -> Result<Trainer<S>> {
    let (hierarchy, vectors) = match cfg.attention {
        AttentionKind::Att => (None, None),
        AttentionKind::Katt => {
            let vectors = relation_vectors::<S>(cfg, store)?;
            let h = build_hierarchy(cfg, &dataset.relations, Some(&vectors), Some(store))?;
            (Some(h), Some(vectors))
        }
    };
    let (mut trainer, bags) = prepare_training(cfg, dataset, hierarchy, vectors.as_ref())?;
    trainer.train(&bags)?;
    Ok(trainer)
}
