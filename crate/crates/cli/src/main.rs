use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clwe_nmt::alignment::{align_to_hub, BilingualDictionary, HubAlignment};
use clwe_nmt::embeddings::{load_vectors, save_vectors, train_skipgram, SkipgramConfig, SubwordBank};
use clwe_nmt::metrics::{score, Metric, MetricConfig};
use clwe_nmt::model::{train, Model, ParallelSet};
use clwe_nmt::pipeline::family::all_pairs;
use clwe_nmt::pipeline::stages::sha256_file;
use clwe_nmt::pipeline::{
    metric_table_tsv, run_plan, verify_stage_isolation, ArtifactStore, BtData, ExperimentConfig, PipelineLock, Stage,
    StageManifest, TestSet,
};
use clwe_nmt::tokenize::tokenize;
use clwe_nmt::translate::{mapped_language_vocab, plug_in_language, translate_lines, PlugIn};
use clwe_nmt::vocab::{merge, MultiVocab};
use clwe_nmt::{Error, Result};

/// Decoupled-vocabulary multilingual NMT: embeddings, alignment, training,
/// zero-shot extension and back-translation.
#[derive(Parser)]
#[command(name = "clwe-nmt", version)]
struct Cli {
    /// Experiment configuration (TOML with `schema_version`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment directory; inputs and outputs default to paths inside it.
    #[arg(long, global = true, default_value = "experiment")]
    out: PathBuf,
    /// Turn warnings that would otherwise only be reported into failures.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Chrfpp,
    Bleu,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum StageArg {
    Base,
    Extension,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic language family into `<out>/data`.
    Synth,
    /// Train skip-gram embeddings for one language.
    Embed {
        #[arg(long)]
        lang: String,
        /// Defaults to `<out>/data/<lang>.mono.txt`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "base")]
        stage: StageArg,
    },
    /// Align languages into the pivot's space.
    Align {
        #[arg(long)]
        pivot: String,
        #[arg(long = "lang", required = true)]
        langs: Vec<String>,
        /// Output `<out>/<name>.align`.
        #[arg(long, default_value = "hub")]
        name: String,
        #[arg(long, value_enum, default_value = "base")]
        stage: StageArg,
    },
    /// Build the merged, corpus-restricted vocabulary.
    Vocab {
        #[arg(long = "lang", required = true)]
        langs: Vec<String>,
        #[arg(long, default_value = "hub")]
        alignment: String,
    },
    /// Train the base translator on parallel data.
    Train {
        /// Ordered pairs `a-b`; all pairs of vocabulary languages by default.
        #[arg(long = "pair")]
        pairs: Vec<String>,
    },
    /// Plug a new language into a trained model through its aligned embeddings.
    Extend {
        #[arg(long)]
        lang: String,
        #[arg(long)]
        pivot: String,
        #[arg(long, default_value = "ext")]
        alignment: String,
        /// Leave out the target tag (source-side use only).
        #[arg(long)]
        no_target: bool,
    },
    /// Translate a file of sentences.
    Translate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Iterative back-translation between a new language and its partners.
    Backtranslate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        new: String,
        #[arg(long = "partner", required = true)]
        partners: Vec<String>,
    },
    /// Score hypotheses against references.
    Evaluate {
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Check that no extension-language input reached the base stage.
    VerifyStages {
        /// Defaults to `<out>/manifests/base.json`.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Defaults to `<out>/manifests/extension.json`.
        #[arg(long)]
        extension: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    strict: bool,
}

impl Ctx {
    fn data(&self, name: &str) -> PathBuf {
        self.out.join("data").join(name)
    }

    fn emb(&self, name: &str) -> PathBuf {
        self.out.join("emb").join(name)
    }

    fn model_path(&self, lang: Option<&str>) -> PathBuf {
        match lang {
            Some(l) => self.out.join(format!("model.{l}.ckpt")),
            None => self.out.join("model.ckpt"),
        }
    }

    /// Record consumed files in the stage manifest under `<out>/manifests`.
    fn record(&self, stage: StageArg, files: &[PathBuf]) -> Result<()> {
        let (stage, name) = match stage {
            StageArg::Base => (Stage::Base, "base.json"),
            StageArg::Extension => (Stage::Extension, "extension.json"),
        };
        let mut langs = self.cfg.family.seen_ids();
        if stage == Stage::Extension {
            langs.push(self.cfg.family.held_out.id.clone());
        }
        let dir = self.out.join("manifests");
        mkdir(&dir)?;
        let path = dir.join(name);
        let mut m = if path.exists() { StageManifest::load(&path)? } else { StageManifest::scan(stage, &langs, &[])? };
        let fresh = StageManifest::scan(stage, &langs, files)?;
        for f in fresh.files {
            m.files.retain(|g| g.path != f.path);
            m.files.push(f);
        }
        m.languages = fresh.languages;
        m.save(&path)
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path).map_err(|e| Error::io(path, e))?.lines().map(str::to_string).collect())
}

fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

fn split_pair(p: &str) -> Result<(String, String)> {
    p.split_once('-')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| Error::Config(format!("`{p}` is not a language pair `a-b`")))
}

fn parallel_files(ctx: &Ctx, a: &str, b: &str, split: Option<&str>) -> (PathBuf, PathBuf) {
    let stem = match split {
        Some(s) => format!("{a}-{b}.{s}"),
        None => format!("{a}-{b}"),
    };
    (ctx.data(&format!("{stem}.src.txt")), ctx.data(&format!("{stem}.tgt.txt")))
}

fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let (s, t) = (read_corpus(src)?, read_corpus(tgt)?);
    if s.len() != t.len() {
        return Err(Error::Input(format!("{} and {} differ in line count", src.display(), tgt.display())));
    }
    Ok(s.into_iter().zip(t).filter(|(a, b)| !a.is_empty() && !b.is_empty()).collect())
}

fn to_set(model: &Model, a: &str, b: &str, pairs: &[(Vec<String>, Vec<String>)]) -> Result<ParallelSet> {
    let examples = pairs.iter().map(|(s, t)| model.example(a, s, b, t)).collect::<Result<_>>()?;
    Ok(ParallelSet { src_lang: a.into(), tgt_lang: b.into(), examples })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let ctx = Ctx { cfg, out: cli.out, strict: cli.strict };
    mkdir(&ctx.out)?;
    match cli.command {
        Command::Synth => {
            let _lock = PipelineLock::acquire(&ctx.out)?;
            let family = ctx.cfg.family.build_family()?;
            family.write_dir(&ctx.out.join("data"))?;
            println!("wrote {} languages to {}", family.language_ids().len(), ctx.out.join("data").display());
        }
        Command::Embed { lang, corpus, stage } => {
            let _lock = PipelineLock::acquire(&ctx.out)?;
            let path = corpus.unwrap_or_else(|| ctx.data(&format!("{lang}.mono.txt")));
            let sents = read_corpus(&path)?;
            let sg = SkipgramConfig { language: lang.clone(), ..ctx.cfg.family.skipgram.clone() };
            let (table, bank) = train_skipgram(&sents, &sg)?;
            mkdir(&ctx.out.join("emb"))?;
            save_vectors(&table, &ctx.emb(&format!("{lang}.vec")))?;
            bank.save(&ctx.emb(&format!("{lang}.subwords")))?;
            ctx.record(stage, &[path])?;
            println!("{lang}: {} vectors of dimension {}", table.len(), table.dim());
        }
        Command::Align { pivot, langs, name, stage } => {
            let _lock = PipelineLock::acquire(&ctx.out)?;
            let mut tables = BTreeMap::new();
            let mut dicts = BTreeMap::new();
            let mut consumed = Vec::new();
            for l in langs.iter().chain(std::iter::once(&pivot)) {
                tables.insert(l.clone(), load_vectors(&ctx.emb(&format!("{l}.vec")), l)?);
                if l != &pivot {
                    let p = ctx.data(&format!("dict.{l}-{pivot}.txt"));
                    dicts.insert(l.clone(), BilingualDictionary::load(&p, l, &pivot)?);
                    consumed.push(p);
                }
            }
            let hub = align_to_hub(&tables, &dicts, &pivot, &ctx.cfg.align)?;
            hub.save(&ctx.out.join(format!("{name}.align")))?;
            ctx.record(stage, &consumed)?;
            for (l, p) in &hub.train_p_at_1 {
                println!("{l}→{pivot}\tP@1 {p:.3}");
            }
        }
        Command::Vocab { langs, alignment } => {
            let _lock = PipelineLock::acquire(&ctx.out)?;
            let hub = HubAlignment::load(&ctx.out.join(format!("{alignment}.align")))?;
            let mut per = Vec::new();
            let mut consumed = Vec::new();
            for l in &langs {
                let table = load_vectors(&ctx.emb(&format!("{l}.vec")), l)?;
                let bank = SubwordBank::load(&ctx.emb(&format!("{l}.subwords")))?;
                let path = ctx.data(&format!("{l}.mono.txt"));
                let corpus = read_corpus(&path)?;
                let lv = mapped_language_vocab(&table, Some(&bank), hub.map(l)?, Some(&corpus), l, ctx.cfg.family.renormalize)?;
                if ctx.strict && !lv.hard_oov.is_empty() {
                    return Err(Error::Input(format!("{} `{l}` types have no vector", lv.hard_oov.len())));
                }
                per.push(lv);
                consumed.push(path);
            }
            let vocab = merge(&per)?;
            vocab.save(&ctx.out.join("vocab.bin"))?;
            ctx.record(StageArg::Base, &consumed)?;
            println!("{} tokens over {} languages", vocab.len(), vocab.languages().len());
        }
        Command::Train { pairs } => {
            let _lock = PipelineLock::acquire(&ctx.out)?;
            let vocab = MultiVocab::load(&ctx.out.join("vocab.bin"))?;
            let pairs = if pairs.is_empty() {
                all_pairs(vocab.languages())
            } else {
                pairs.iter().map(|p| split_pair(p)).collect::<Result<_>>()?
            };
            let mut model = Model::new(ctx.cfg.model.clone(), vocab, ctx.cfg.train.seed)?;
            let (mut tr, mut dev, mut consumed) = (Vec::new(), Vec::new(), Vec::new());
            for (a, b) in &pairs {
                let (s, t) = parallel_files(&ctx, a, b, None);
                tr.push(to_set(&model, a, b, &read_parallel(&s, &t)?)?);
                consumed.extend([s, t]);
                let (s, t) = parallel_files(&ctx, a, b, Some("dev"));
                if s.exists() {
                    dev.push(to_set(&model, a, b, &read_parallel(&s, &t)?)?);
                }
            }
            let report = train(&mut model, &tr, &dev, &ctx.cfg.train)?;
            model.save(&ctx.model_path(None))?;
            ctx.record(StageArg::Base, &consumed)?;
            println!("{} updates, best dev loss {:?}", report.updates, report.best_dev_loss);
        }
        Command::Extend { lang, pivot, alignment, no_target } => {
            let _lock = PipelineLock::acquire(&ctx.out)?;
            let model = Model::load(&ctx.model_path(None))?;
            let hub = HubAlignment::load(&ctx.out.join(format!("{alignment}.align")))?;
            let table = load_vectors(&ctx.emb(&format!("{lang}.vec")), &lang)?;
            let bank = SubwordBank::load(&ctx.emb(&format!("{lang}.subwords")))?;
            let path = ctx.data(&format!("{lang}.mono.txt"));
            let corpus = read_corpus(&path)?;
            let opts = PlugIn {
                language: &lang,
                pivot: &pivot,
                renormalize: ctx.cfg.family.renormalize,
                corpus: Some(&corpus),
                bank: Some(&bank),
                add_tag: !no_target,
            };
            let extended = plug_in_language(&model, &table, hub.map(&lang)?, &opts)?;
            extended.save(&ctx.model_path(Some(&lang)))?;
            ctx.record(StageArg::Extension, &[path])?;
            println!("{lang}: {} tokens added", extended.vocab.len() - model.vocab.len());
        }
        Command::Translate { model, src, tgt, input, output, beam } => {
            let model = Model::load(&model.unwrap_or_else(|| ctx.model_path(None)))?;
            let lines = read_lines(&input)?;
            let out = translate_lines(&model, &src, &tgt, &lines, beam)?.join("\n") + "\n";
            match output {
                Some(p) => fs::write(&p, out).map_err(|e| Error::io(&p, e))?,
                None => print!("{out}"),
            }
        }
        Command::Backtranslate { model, new, partners } => {
            let _lock = PipelineLock::acquire(&ctx.out)?;
            let model_path = model.unwrap_or_else(|| ctx.model_path(Some(&new)));
            let model = Model::load(&model_path)?;
            let plan = ctx.cfg.backtranslate.plan(&new, &partners, &ctx.cfg.train);
            let mut data = BtData::default();
            let mut consumed = vec![model_path.clone()];
            for l in plan.languages() {
                let p = ctx.data(&format!("{l}.mono.txt"));
                data.mono.insert(l.clone(), read_corpus(&p)?);
                consumed.push(p);
            }
            for (a, b) in plan.directions() {
                let (s, t) = parallel_files(&ctx, &a, &b, Some("dev"));
                if s.exists() {
                    data.tests.push(TestSet { name: "dev".into(), pairs: read_parallel(&s, &t)?, src_lang: a, tgt_lang: b });
                }
            }
            // identical inputs resolve to the same run directory, which makes reruns no-ops
            let store = ArtifactStore::open(&ctx.out.join("store"))?;
            let mut parts = vec![toml::to_string(&plan).map_err(|e| Error::Config(e.to_string()))?];
            for p in &consumed {
                parts.push(sha256_file(p)?);
            }
            let key = ArtifactStore::key(&parts.iter().map(|s| s.as_bytes()).collect::<Vec<_>>());
            let ref_name = format!("backtranslate-{key}");
            if let Some(hash) = store.get_ref(&ref_name) {
                println!("up to date: {}", ctx.out.join("bt").join(&key).display());
                print!("{}", String::from_utf8_lossy(&store.get(&hash)?));
                return Ok(ExitCode::SUCCESS);
            }
            let report = run_plan(&model, &plan, &data)?;
            let dir = ctx.out.join("bt").join(&key);
            mkdir(&dir)?;
            report.model.save(&dir.join("model.ckpt"))?;
            let mut rows = report.baseline.clone();
            rows.extend(report.table.iter().cloned());
            let table = metric_table_tsv(&rows);
            fs::write(dir.join("metrics.tsv"), &table).map_err(|e| Error::io(dir.join("metrics.tsv"), e))?;
            let summary = serde_json::to_string_pretty(&report.iterations).expect("serializable");
            fs::write(dir.join("iterations.json"), summary).map_err(|e| Error::io(dir.join("iterations.json"), e))?;
            let hash = store.put(table.as_bytes())?;
            store.set_ref(&ref_name, &hash)?;
            ctx.record(StageArg::Extension, &consumed)?;
            print!("{table}");
        }
        Command::Evaluate { metric, hyp, reference, json } => {
            let metric = match metric {
                MetricArg::Chrfpp => Metric::Chrfpp,
                MetricArg::Bleu => Metric::Bleu,
            };
            let report = score(&read_lines(&hyp)?, &read_lines(&reference)?, &MetricConfig::for_metric(metric))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            } else {
                println!("{metric}\t{:.1}\t{}", report.score, report.signature);
            }
        }
        Command::VerifyStages { base, extension, json } => {
            let base = StageManifest::load(&base.unwrap_or_else(|| ctx.out.join("manifests/base.json")))?;
            let ext = StageManifest::load(&extension.unwrap_or_else(|| ctx.out.join("manifests/extension.json")))?;
            let report = verify_stage_isolation(&base, &ext)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            } else {
                for v in &report.violations {
                    println!("violation\t{}\t{}", v.file.display(), v.reason);
                }
                println!("{} violation(s)", report.violations.len());
            }
            if ctx.strict && !report.is_clean() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
