use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use katt::config::{HierarchyMode, RunConfig};
use katt::data::{synth_longtail, Corpus, Dataset, SynthConfig};
use katt::encoder::EncoderKind;
use katt::eval::{
    attention_csv, export_class_embeddings, group_pairs, hits_csv, hits_table, inspect_attention, patn_csv, pr_curve,
    precision_at_n_table, prediction_records, FrequencyIndex,
};
use katt::hierarchy::{HierarchyGraph, RelationVocab};
use katt::kg::{link_prediction_eval, load_embeddings, save_embeddings, train_transe, TripleStore, VectorTable};
use katt::model::AttentionKind;
use katt::pipeline::{build_hierarchy, prepare_training, relation_vectors};
use katt::trainer::{log_to_csv, make_bags, Checkpoint};
use katt::{Error, Model64, Result};

#[derive(Parser, Debug)]
#[command(
    name = "katt",
    version,
    about = "Knowledge-aware attention for long-tail relation extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train TransE on a triple file; writes entities.txt, relations.txt and loss.csv.
    TranseTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kg: PathBuf,
    },
    /// Build a relation hierarchy file.
    HierarchyBuild {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// One relation name per line.
        #[arg(long)]
        relations: PathBuf,
        /// Relation vectors, needed by kmeans and hc.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Triples, needed by amie.
        #[arg(long)]
        kg: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.json and loss.csv to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        encoder: Option<EncoderArg>,
        #[arg(long, value_enum)]
        attention: Option<AttentionArg>,
        /// Triples for TransE; defaults to the training facts of the corpus.
        #[arg(long)]
        kg: Option<PathBuf>,
        /// Hierarchy file; built from the configuration when absent.
        #[arg(long)]
        hierarchy: Option<PathBuf>,
        /// Relation vectors; trained with TransE when absent.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long = "k", value_delimiter = ',', default_values_t = [10, 15, 20])]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [100, 200])]
        freq_threshold: Vec<usize>,
        #[arg(long = "n", value_delimiter = ',', default_values_t = [100, 200, 300])]
        n: Vec<usize>,
    },
    /// Dump instance attention weights at every hierarchy layer.
    InspectAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Relation whose chain is queried; defaults to each bag's label.
        #[arg(long)]
        relation: Option<String>,
        /// Maximum number of bags to dump.
        #[arg(long)]
        bags: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Write every hierarchy node's class embedding.
    ExportClassEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate a synthetic long-tail corpus; `--config` is a synthetic-corpus
    /// TOML. Writes corpus.tsv, kg.tsv and relations.txt.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Predefined,
    Kmeans,
    Hc,
    Amie,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncoderArg {
    Cnn,
    Pcnn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttentionArg {
    Katt,
    Att,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Pr,
    Patn,
    Hits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NonFinite(_) => 3,
                _ => 2,
            })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TranseTrain { common, kg } => transe(&common, &kg),
        Command::HierarchyBuild {
            common,
            mode,
            relations,
            embeddings,
            kg,
        } => hierarchy_build(&common, mode, &relations, embeddings.as_deref(), kg.as_deref()),
        Command::Train {
            common,
            corpus,
            encoder,
            attention,
            kg,
            hierarchy,
            embeddings,
            epochs,
            resume,
        } => {
            let mut cfg = common.run_config()?;
            if let Some(e) = encoder {
                cfg.encoder = match e {
                    EncoderArg::Cnn => EncoderKind::Cnn,
                    EncoderArg::Pcnn => EncoderKind::Pcnn,
                };
            }
            if let Some(a) = attention {
                cfg.attention = match a {
                    AttentionArg::Katt => AttentionKind::Katt,
                    AttentionArg::Att => AttentionKind::Att,
                };
            }
            if let Some(n) = epochs {
                cfg.epochs = n;
            }
            cfg.validate()?;
            let sources = TrainSources {
                corpus: &corpus,
                kg: kg.as_deref(),
                hierarchy: hierarchy.as_deref(),
                embeddings: embeddings.as_deref(),
            };
            match resume {
                Some(ck) => resume_training(&cfg, &common, &corpus, &ck, epochs),
                None => train(&cfg, &common.out, &sources),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            metric,
            k,
            freq_threshold,
            n,
        } => eval(&common, &checkpoint, &corpus, metric, &k, &freq_threshold, &n),
        Command::InspectAttention {
            common,
            checkpoint,
            corpus,
            relation,
            bags,
            split,
        } => inspect(&common, &checkpoint, &corpus, relation.as_deref(), bags, split),
        Command::ExportClassEmbeddings { common, checkpoint } => {
            common.run_config()?;
            let model: Model64 = Checkpoint::load(&checkpoint)?.model()?;
            export_class_embeddings(&model, &common.out)
        }
        Command::Synth { common } => synth(&common),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))
}

fn transe(common: &Common, kg: &Path) -> Result<()> {
    let cfg = common.run_config()?;
    let store = TripleStore::load(kg)?;
    let tc = cfg.transe_config()?;
    let run = train_transe::<f64>(&store, &tc)?;
    if run.epoch_loss.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("TransE loss".into()));
    }
    let lp = link_prediction_eval(&run.table, &store, tc.norm)?;
    create_dir(&common.out)?;
    save_embeddings(&run.table.entities, common.out.join("entities.txt"))?;
    save_embeddings(&run.table.relations, common.out.join("relations.txt"))?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in run.epoch_loss.iter().enumerate() {
        loss.push_str(&format!("{},{l}\n", i + 1));
    }
    write(&common.out.join("loss.csv"), &loss)?;
    println!("filtered mean rank {:.3}, hits@10 {:.3}", lp.mean_rank, lp.hits_at_10);
    Ok(())
}

fn read_relations(path: &Path) -> Result<RelationVocab> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    RelationVocab::new(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#')),
    )
}

fn hierarchy_build(
    common: &Common,
    mode: Option<ModeArg>,
    relations: &Path,
    embeddings: Option<&Path>,
    kg: Option<&Path>,
) -> Result<()> {
    let mut cfg = common.run_config()?;
    if let Some(m) = mode {
        cfg.hierarchy = match m {
            ModeArg::Predefined => HierarchyMode::Predefined,
            ModeArg::Kmeans => HierarchyMode::Kmeans,
            ModeArg::Hc => HierarchyMode::Hc,
            ModeArg::Amie => HierarchyMode::Amie,
        };
    }
    let vocab = read_relations(relations)?;
    let vectors: Option<VectorTable<f64>> = embeddings.map(load_embeddings).transpose()?;
    let store = kg.map(TripleStore::load).transpose()?;
    let graph = build_hierarchy(&cfg, &vocab, vectors.as_ref(), store.as_ref())?;
    graph.save(&common.out)?;
    println!("{} nodes, {} layers", graph.len(), graph.depth());
    Ok(())
}

struct TrainSources<'a> {
    corpus: &'a Path,
    kg: Option<&'a Path>,
    hierarchy: Option<&'a Path>,
    embeddings: Option<&'a Path>,
}

fn train(cfg: &RunConfig, out: &Path, src: &TrainSources) -> Result<()> {
    let corpus = Corpus::load(src.corpus)?;
    let dataset = Dataset::build(&corpus)?;
    let (hierarchy, vectors) = match cfg.attention {
        AttentionKind::Att => (None, None),
        AttentionKind::Katt => {
            let store = match src.kg {
                Some(p) => TripleStore::load(p)?,
                None => corpus.kg_triples(),
            };
            let vectors: VectorTable<f64> = match src.embeddings {
                Some(p) => load_embeddings(p)?,
                None => relation_vectors(cfg, &store)?,
            };
            let hierarchy = match src.hierarchy {
                Some(p) => HierarchyGraph::load(p)?,
                None => build_hierarchy(cfg, &dataset.relations, Some(&vectors), Some(&store))?,
            };
            (Some(hierarchy), Some(vectors))
        }
    };
    let (mut trainer, bags) = prepare_training::<f64>(cfg, &dataset, hierarchy, vectors.as_ref())?;
    trainer.train(&bags)?;
    finish_training(cfg, out, &trainer, &dataset)
}

fn finish_training(
    cfg: &RunConfig,
    out: &Path,
    trainer: &katt::trainer::Trainer<f64>,
    dataset: &Dataset,
) -> Result<()> {
    create_dir(out)?;
    Checkpoint::capture(trainer, &dataset.words, Some(cfg)).save(out.join("checkpoint.json"))?;
    write(&out.join("loss.csv"), &log_to_csv(trainer.log()))?;
    if let Some(last) = trainer.log().last() {
        println!(
            "epoch {} loss {:.6} accuracy {:.4}",
            last.epoch, last.loss, last.accuracy
        );
    }
    Ok(())
}

fn resume_training(cfg: &RunConfig, common: &Common, corpus: &Path, ck: &Path, epochs: Option<usize>) -> Result<()> {
    let ckpt = Checkpoint::load(ck)?;
    let cfg = match (&common.config, &ckpt.run_config) {
        (None, Some(saved)) => {
            let mut c = saved.clone();
            if let Some(n) = epochs {
                c.epochs = n;
            }
            c
        }
        _ => cfg.clone(),
    };
    let mut trainer = ckpt.trainer::<f64>()?;
    trainer.config.epochs = cfg.epochs;
    let corpus = Corpus::load(corpus)?;
    let dataset = Dataset::with_vocab(&corpus, ckpt.relation_vocab()?, ckpt.word_vocab())?;
    let bags = make_bags(&dataset.train);
    trainer.train(&bags)?;
    finish_training(&cfg, &common.out, &trainer, &dataset)
}

fn load_eval(checkpoint: &Path, corpus: &Path) -> Result<(Model64, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model: Model64 = ckpt.model()?;
    let corpus = Corpus::load(corpus)?;
    let dataset = Dataset::with_vocab(&corpus, ckpt.relation_vocab()?, ckpt.word_vocab())?;
    Ok((model, dataset))
}

fn eval(
    common: &Common,
    checkpoint: &Path,
    corpus: &Path,
    metric: Metric,
    ks: &[usize],
    thresholds: &[usize],
    ns: &[usize],
) -> Result<()> {
    let cfg = common.run_config()?;
    let (model, dataset) = load_eval(checkpoint, corpus)?;
    let pairs = group_pairs(&dataset.test, &model.relations);
    if pairs.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let encoder = model.config.encoder.kind.name();
    let attention = model.config.attention.name();
    let text = match metric {
        Metric::Pr => {
            let curve = pr_curve(&prediction_records(&model, &pairs)?)?;
            println!("auc {:.6}", curve.auc);
            format!("{}{}", curve.to_csv(), curve.auc_line())
        }
        Metric::Patn => {
            let rows = precision_at_n_table(&model, &pairs, ns, cfg.seed)?;
            patn_csv(&format!("{encoder}+{attention}"), ns, &rows)
        }
        Metric::Hits => {
            let records = prediction_records(&model, &pairs)?;
            let freq = FrequencyIndex::from_vocab(&model.relations);
            hits_csv(encoder, attention, &hits_table(&records, &freq, thresholds, ks)?)
        }
    };
    write(&common.out, &text)
}

fn inspect(
    common: &Common,
    checkpoint: &Path,
    corpus: &Path,
    relation: Option<&str>,
    limit: Option<usize>,
    split: SplitArg,
) -> Result<()> {
    common.run_config()?;
    let (model, dataset) = load_eval(checkpoint, corpus)?;
    let items = if split == SplitArg::Test {
        &dataset.test
    } else {
        &dataset.train
    };
    let fixed = relation
        .map(|r| {
            model
                .relations
                .id(r)
                .ok_or_else(|| Error::UnknownRelation(r.to_string()))
        })
        .transpose()?;
    let mut rows = Vec::new();
    let mut dumped = 0usize;
    for (id, bag) in make_bags(items).iter().enumerate() {
        if limit.is_some_and(|l| dumped >= l) {
            break;
        }
        let r = fixed.unwrap_or(bag.label);
        if model.relations.is_na(r) {
            continue;
        }
        rows.extend(inspect_attention(&model, id, &bag.instances, r)?);
        dumped += 1;
    }
    write(&common.out, &attention_csv(&rows))
}

fn synth(common: &Common) -> Result<()> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let (corpus, store) = synth_longtail(&cfg)?;
    create_dir(&common.out)?;
    corpus.save(common.out.join("corpus.tsv"))?;
    store.save(common.out.join("kg.tsv"))?;
    let vocab = corpus.relation_vocab()?;
    let mut names = vocab.names().join("\n");
    names.push('\n');
    write(&common.out.join("relations.txt"), &names)?;
    println!("{} instances, {} relations", corpus.len(), vocab.len());
    Ok(())
}
