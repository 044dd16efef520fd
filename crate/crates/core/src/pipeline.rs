//! Stage runners, artifact files and the serving snapshot.
//!
//! Every stage writes into its own directory under the work directory and
//! finishes by writing `meta.json`, which carries the stage's configuration
//! hash. A stage refuses to run unless every earlier stage has a current
//! `meta.json`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::align::{mine_pairs, train_alignment, AlignTokenizer, TextEncoder};
use crate::config::{RunConfig, Stage};
use crate::corpus::{
    build_preference_groups, build_sft_dataset, generate_catalog, page_views, simulate_logs, Catalog, CatalogEntry,
    HistoryIndex, InteractionRecord, MpcTrie, PairPolicy, PreferenceGroup, UserProfile,
};
use crate::enhance::{build_index, indexable_queries, prefix2query, Enhancer};
use crate::error::{CoreError, Result};
use crate::evalkit::{run_ablation, EvalCase, EvalReport, Metric, Popularity, SystemFn};
use crate::feedback::export_feedback_dataset;
use crate::par;
use crate::prefalign::{prepare_groups, train_dpo, DpoEpoch, LossMode, PreferenceLoss};
use crate::rqvae::{train_rqvae, IndexEntry, QueryIndex, RqvaeModel};
use crate::sugmodel::{
    assemble_input, beam_search, train_sft, BeamConfig, GenModel, InputLimits, TokenizedExample, UserContext, Vocab,
};

pub const META_FILE: &str = "meta.json";

/// Completion marker of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub config_hash: String,
    /// Wall-clock time of completion; the only non-reproducible field.
    pub created_unix: u64,
    #[serde(default)]
    pub stats: Value,
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_error(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_error(path))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn read_file(path: &Path, stage: Stage) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CoreError::MissingArtifact {
            stage: stage.command(),
            path: path.to_path_buf(),
        }),
        Err(e) => Err(io_error(path)(e)),
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<Vec<T>> {
    read_file(path, stage)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CoreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<T> {
    serde_json::from_str(&read_file(path, stage)?).map_err(|e| CoreError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    body: Value,
}

fn write_checkpoint(path: &Path, hash: &str, body: Value) -> Result<()> {
    let c = Checkpoint {
        config_hash: hash.to_string(),
        body,
    };
    write_atomic(path, serde_json::to_string(&c)?.as_bytes())
}

fn read_checkpoint(path: &Path, stage: Stage, expected: &str) -> Result<Value> {
    let c: Checkpoint = read_json(path, stage)?;
    if c.config_hash != expected {
        return Err(CoreError::StaleArtifact {
            stage: stage.command(),
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: c.config_hash,
        });
    }
    Ok(c.body)
}

pub fn read_meta(cfg: &RunConfig, stage: Stage) -> Result<Option<StageMeta>> {
    let path = cfg.stage_dir(stage).join(META_FILE);
    match read_json(&path, stage) {
        Ok(m) => Ok(Some(m)),
        Err(CoreError::MissingArtifact { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Checks that `stage` and every stage before it completed under the current
/// configuration; reports the earliest one that did not.
pub fn require(cfg: &RunConfig, stage: Stage) -> Result<()> {
    for s in Stage::ALL.into_iter().take_while(|s| *s <= stage) {
        let path = cfg.stage_dir(s).join(META_FILE);
        match read_meta(cfg, s)? {
            None => {
                return Err(CoreError::MissingArtifact {
                    stage: s.command(),
                    path,
                })
            }
            Some(m) if m.config_hash != cfg.stage_hash(s) => {
                return Err(CoreError::StaleArtifact {
                    stage: s.command(),
                    path,
                    expected: cfg.stage_hash(s),
                    found: m.config_hash,
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn previous(stage: Stage) -> Option<Stage> {
    Stage::ALL.into_iter().take_while(|s| *s < stage).last()
}

/// Verifies prerequisites and clears the stage's completion marker.
fn begin(cfg: &RunConfig, stage: Stage) -> Result<PathBuf> {
    if let Some(p) = previous(stage) {
        require(cfg, p)?;
    }
    let dir = cfg.stage_dir(stage);
    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let meta = dir.join(META_FILE);
    if meta.exists() {
        std::fs::remove_file(&meta).map_err(io_error(&meta))?;
    }
    Ok(dir)
}

fn finish(cfg: &RunConfig, stage: Stage, stats: Value) -> Result<StageMeta> {
    let meta = StageMeta {
        stage: stage.command().to_string(),
        config_hash: cfg.stage_hash(stage),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        stats,
    };
    let path = cfg.stage_dir(stage).join(META_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(meta)
}

/// Splits records at a page-view boundary: the latest `test_fraction` of
/// page views form the test side.
pub fn split_records(records: &[InteractionRecord], test_fraction: f64) -> (Vec<InteractionRecord>, Vec<InteractionRecord>) {
    let times: Vec<i64> = records.iter().map(|r| r.ts).collect::<BTreeSet<_>>().into_iter().collect();
    if times.is_empty() || test_fraction <= 0.0 {
        return (records.to_vec(), Vec::new());
    }
    let n_train = ((times.len() as f64) * (1.0 - test_fraction)).round() as usize;
    if n_train >= times.len() {
        return (records.to_vec(), Vec::new());
    }
    let cut = times[n_train];
    records.iter().cloned().partition(|r| r.ts < cut)
}

/// Generated catalog, users and logs.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub catalog: Catalog,
    pub users: Vec<UserProfile>,
    pub records: Vec<InteractionRecord>,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        require(cfg, Stage::Corpus)?;
        let dir = cfg.stage_dir(Stage::Corpus);
        let entries: Vec<CatalogEntry> = read_jsonl(&dir.join("catalog.jsonl"), Stage::Corpus)?;
        Ok(Self {
            catalog: Catalog::from_entries(entries)?,
            users: read_jsonl(&dir.join("users.jsonl"), Stage::Corpus)?,
            records: read_jsonl(&dir.join("records.jsonl"), Stage::Corpus)?,
        })
    }

    pub fn profiles(&self) -> HashMap<String, String> {
        self.users.iter().map(|u| (u.user_id.clone(), u.profile_string())).collect()
    }

    pub fn split(&self, cfg: &RunConfig) -> (Vec<InteractionRecord>, Vec<InteractionRecord>) {
        split_records(&self.records, cfg.corpus.test_fraction)
    }

    pub fn train(&self, cfg: &RunConfig) -> Vec<InteractionRecord> {
        self.split(cfg).0
    }
}

pub fn gen_corpus(cfg: &RunConfig) -> Result<StageMeta> {
    let dir = begin(cfg, Stage::Corpus)?;
    let c = &cfg.corpus;
    let seed = cfg.stage_seed(Stage::Corpus);
    let catalog = generate_catalog(seed, c.n_categories, c.n_queries, c.words_per_category, c.popularity_exponent)?;
    let sim = simulate_logs(&catalog, &c.sim, seed)?;
    write_jsonl(&dir.join("catalog.jsonl"), catalog.entries())?;
    write_jsonl(&dir.join("users.jsonl"), &sim.users)?;
    write_jsonl(&dir.join("records.jsonl"), &sim.records)?;
    let (train, test) = split_records(&sim.records, c.test_fraction);
    finish(
        cfg,
        Stage::Corpus,
        json!({
            "queries": catalog.len(),
            "users": sim.users.len(),
            "records": sim.records.len(),
            "train_records": train.len(),
            "test_records": test.len(),
        }),
    )
}

pub fn train_align(cfg: &RunConfig) -> Result<StageMeta> {
    let dir = begin(cfg, Stage::Align)?;
    let corpus = Corpus::load(cfg)?;
    let train = corpus.train(cfg);
    let seed = cfg.stage_seed(Stage::Align);
    let texts = corpus
        .catalog
        .entries()
        .iter()
        .map(|e| e.query.as_str())
        .chain(train.iter().map(|r| r.prefix.as_str()));
    let mut encoder = TextEncoder::new(AlignTokenizer::fit(texts), cfg.align.dims, cfg.align.tau, seed);
    let pairs = mine_pairs(&train, &cfg.align.mining, &encoder);
    let curve = train_alignment(&mut encoder, &pairs, &cfg.align.training, seed)?;
    write_checkpoint(&dir.join("encoder.json"), &cfg.stage_hash(Stage::Align), encoder.to_json())?;
    finish(cfg, Stage::Align, json!({ "pairs": pairs.len(), "loss": curve }))
}

pub fn load_encoder(cfg: &RunConfig) -> Result<TextEncoder> {
    require(cfg, Stage::Align)?;
    let body = read_checkpoint(&cfg.stage_dir(Stage::Align).join("encoder.json"), Stage::Align, &cfg.stage_hash(Stage::Align))?;
    TextEncoder::from_json(body)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddedQuery {
    query: String,
    embedding: Vec<f64>,
}

/// Embeds the indexable queries and records each prefix's co-occurring
/// queries.
pub fn build_index_stage(cfg: &RunConfig) -> Result<StageMeta> {
    let dir = begin(cfg, Stage::Index)?;
    let corpus = Corpus::load(cfg)?;
    let encoder = load_encoder(cfg)?;
    let train = corpus.train(cfg);
    let queries = indexable_queries(&train, cfg.index.min_positive);
    let refs: Vec<&str> = queries.iter().map(String::as_str).collect();
    let embedded: Vec<EmbeddedQuery> = queries
        .iter()
        .zip(encoder.encode_batch(&refs))
        .map(|(q, e)| EmbeddedQuery {
            query: q.clone(),
            embedding: e,
        })
        .collect();
    let p2q = prefix2query(&train, cfg.index.prefix_queries);
    write_jsonl(&dir.join("embeddings.jsonl"), &embedded)?;
    write_checkpoint(
        &dir.join("prefix_queries.json"),
        &cfg.stage_hash(Stage::Index),
        serde_json::to_value(&p2q)?,
    )?;
    finish(cfg, Stage::Index, json!({ "queries": embedded.len(), "prefixes": p2q.len() }))
}

pub fn train_rqvae_stage(cfg: &RunConfig) -> Result<StageMeta> {
    let dir = begin(cfg, Stage::Rqvae)?;
    let embedded: Vec<EmbeddedQuery> = read_jsonl(&cfg.stage_dir(Stage::Index).join("embeddings.jsonl"), Stage::Index)?;
    let data: Vec<Vec<f64>> = embedded.iter().map(|e| e.embedding.clone()).collect();
    let seed = cfg.stage_seed(Stage::Rqvae);
    let mut model = RqvaeModel::new(cfg.rqvae.dims, cfg.rqvae.beta, seed)?;
    let curve = train_rqvae(&mut model, &data, &cfg.rqvae.training, seed)?;
    let index = build_index(&model, embedded.into_iter().map(|e| (e.query, e.embedding)).collect())?;
    write_checkpoint(&dir.join("model.json"), &cfg.stage_hash(Stage::Rqvae), model.to_json())?;
    write_jsonl(&dir.join("index.jsonl"), index.entries())?;
    let distinct: BTreeSet<_> = index.entries().iter().map(|e| &e.codes).collect();
    finish(
        cfg,
        Stage::Rqvae,
        json!({ "curve": curve, "indexed": index.len(), "distinct_ids": distinct.len() }),
    )
}

/// Encoder, codebooks, index and prefix map of the current run.
pub fn load_enhancer(cfg: &RunConfig) -> Result<Enhancer> {
    require(cfg, Stage::Rqvae)?;
    let encoder = load_encoder(cfg)?;
    let p2q: BTreeMap<String, Vec<String>> = serde_json::from_value(read_checkpoint(
        &cfg.stage_dir(Stage::Index).join("prefix_queries.json"),
        Stage::Index,
        &cfg.stage_hash(Stage::Index),
    )?)?;
    let dir = cfg.stage_dir(Stage::Rqvae);
    let rqvae = RqvaeModel::from_json(read_checkpoint(&dir.join("model.json"), Stage::Rqvae, &cfg.stage_hash(Stage::Rqvae))?)?;
    let entries: Vec<IndexEntry> = read_jsonl(&dir.join("index.jsonl"), Stage::Rqvae)?;
    Ok(Enhancer::new(encoder, rqvae, QueryIndex::new(entries)?, p2q, cfg.enhance.clone()))
}

/// Fills `related` of every context, computing each distinct prefix once.
pub fn fill_related(cfg: &RunConfig, enhancer: &Enhancer, contexts: &mut [&mut UserContext]) -> Result<()> {
    let prefixes: Vec<&str> = contexts
        .iter()
        .map(|c| c.prefix.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let related: Vec<Vec<String>> = par::map(cfg.exec, &prefixes, |p| enhancer.related(p))
        .into_iter()
        .collect::<Result<_>>()?;
    let table: HashMap<String, Vec<String>> = prefixes.iter().map(|p| p.to_string()).zip(related).collect();
    for c in contexts.iter_mut() {
        c.related = table[&c.prefix].clone();
    }
    Ok(())
}

/// Characters of every catalog query and profile string.
pub fn fit_vocab(corpus: &Corpus) -> Vocab {
    let profiles: Vec<String> = corpus.users.iter().map(UserProfile::profile_string).collect();
    let texts = corpus
        .catalog
        .entries()
        .iter()
        .map(|e| e.query.as_str())
        .chain(profiles.iter().map(String::as_str));
    Vocab::fit(texts)
}

/// SFT examples from `records`, with related queries when an enhancer is
/// given.
pub fn sft_examples(
    cfg: &RunConfig,
    vocab: &Vocab,
    records: &[InteractionRecord],
    profiles: &HashMap<String, String>,
    enhancer: Option<&Enhancer>,
) -> Result<Vec<TokenizedExample>> {
    let limits = &cfg.sft.limits;
    let mut examples = build_sft_dataset(records, profiles, limits.max_history);
    if let Some(e) = enhancer {
        fill_related(cfg, e, &mut examples.iter_mut().map(|x| &mut x.context).collect::<Vec<_>>())?;
    }
    examples
        .iter()
        .map(|x| {
            Ok(TokenizedExample {
                input: assemble_input(&x.context, vocab, limits)?,
                target: vocab.encode_query(&x.target),
            })
        })
        .collect()
}

pub fn train_generator(cfg: &RunConfig, vocab: Vocab, examples: &[TokenizedExample]) -> Result<(GenModel, Vec<f64>)> {
    let seed = cfg.stage_seed(Stage::Sft);
    let mut model = GenModel::new(vocab, cfg.sft.model, seed)?;
    let mut training = cfg.sft.training.clone();
    training.exec = cfg.exec;
    let curve = train_sft(&mut model, examples, &training, seed, |_, _, _| Ok(()))?;
    Ok((model, curve))
}

fn model_body(model: &GenModel) -> Result<Value> {
    Ok(serde_json::from_str(&model.to_json())?)
}

pub fn train_sft_stage(cfg: &RunConfig) -> Result<StageMeta> {
    let dir = begin(cfg, Stage::Sft)?;
    let corpus = Corpus::load(cfg)?;
    let enhancer = load_enhancer(cfg)?;
    let vocab = fit_vocab(&corpus);
    let examples = sft_examples(cfg, &vocab, &corpus.train(cfg), &corpus.profiles(), Some(&enhancer))?;
    let (model, curve) = train_generator(cfg, vocab, &examples)?;
    write_atomic(&dir.join("tokenizer.txt"), model.vocab.to_file_string().as_bytes())?;
    write_checkpoint(&dir.join("model.json"), &cfg.stage_hash(Stage::Sft), model_body(&model)?)?;
    finish(cfg, Stage::Sft, json!({ "examples": examples.len(), "loss": curve }))
}

/// A generator checkpoint of `stage` (`Sft` or `Dpo`).
pub fn load_generator(cfg: &RunConfig, stage: Stage) -> Result<GenModel> {
    require(cfg, stage)?;
    let body = read_checkpoint(&cfg.stage_dir(stage).join("model.json"), stage, &cfg.stage_hash(stage))?;
    let model = GenModel::from_json(&body.to_string())?;
    let tok_path = cfg.stage_dir(Stage::Sft).join("tokenizer.txt");
    let vocab = Vocab::parse_file(&read_file(&tok_path, Stage::Sft)?)?;
    if vocab.tokens() != model.vocab.tokens() {
        return Err(CoreError::Parse {
            path: tok_path,
            line: 0,
            msg: "tokenizer does not match the generator checkpoint".into(),
        });
    }
    Ok(model)
}

/// Preference groups over `records` for the given loss mode.
pub fn preference_groups(
    cfg: &RunConfig,
    corpus: &Corpus,
    records: &[InteractionRecord],
    mode: LossMode,
    enhancer: Option<&Enhancer>,
) -> Result<Vec<PreferenceGroup>> {
    let policy = PairPolicy {
        listwise: mode == LossMode::List,
        ..cfg.corpus.pairs.clone()
    };
    let mut groups = build_preference_groups(
        records,
        &corpus.catalog,
        &corpus.profiles(),
        &policy,
        &cfg.dpo.reward,
        cfg.sft.limits.max_history,
        cfg.stage_seed(Stage::Dpo),
    )?;
    if let Some(e) = enhancer {
        fill_related(cfg, e, &mut groups.iter_mut().map(|g| &mut g.context).collect::<Vec<_>>())?;
    }
    Ok(groups)
}

pub fn align_generator(
    cfg: &RunConfig,
    reference: &GenModel,
    groups: &[PreferenceGroup],
    mode: LossMode,
) -> Result<(GenModel, Vec<DpoEpoch>)> {
    let dpo = prepare_groups(reference, groups, &cfg.sft.limits, cfg.exec)?;
    let mut policy = reference.clone();
    let mut training = cfg.dpo.training;
    training.exec = cfg.exec;
    // The batch size counts wins, so both modes take the same number of steps.
    let wins: BTreeSet<(&str, i64, &str)> = groups.iter().map(|g| (g.user_id.as_str(), g.ts, g.win.query.as_str())).collect();
    if !wins.is_empty() {
        training.batch = (training.batch * groups.len()).div_ceil(wins.len()).max(1);
    }
    let loss = PreferenceLoss {
        mode,
        ..cfg.dpo.loss
    };
    let curve = train_dpo(
        &mut policy,
        &dpo,
        &loss,
        &cfg.dpo.reward,
        &training,
        cfg.stage_seed(Stage::Dpo),
        |_, _, _| Ok(()),
    )?;
    Ok((policy, curve))
}

pub fn train_dpo_stage(cfg: &RunConfig) -> Result<StageMeta> {
    let dir = begin(cfg, Stage::Dpo)?;
    let corpus = Corpus::load(cfg)?;
    let enhancer = load_enhancer(cfg)?;
    let reference = load_generator(cfg, Stage::Sft)?;
    let mut records = corpus.train(cfg);
    let mut feedback = json!(null);
    if cfg.dpo.use_feedback {
        let export = export_feedback_dataset(&cfg.feedback_log())?;
        feedback = json!({ "records": export.records.len(), "corrupt": export.corrupt });
        records.extend(export.records);
    }
    let groups = preference_groups(cfg, &corpus, &records, cfg.dpo.loss.mode, Some(&enhancer))?;
    let (policy, curve) = align_generator(cfg, &reference, &groups, cfg.dpo.loss.mode)?;
    write_checkpoint(&dir.join("model.json"), &cfg.stage_hash(Stage::Dpo), model_body(&policy)?)?;
    finish(
        cfg,
        Stage::Dpo,
        json!({ "groups": groups.len(), "curve": curve, "feedback": feedback }),
    )
}

/// Top `k` finished, non-empty beam hypotheses as `(query, log-prob)`, one
/// per distinct text.
pub fn generate(
    model: &GenModel,
    ctx: &UserContext,
    limits: &InputLimits,
    beam: &BeamConfig,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let input = assemble_input(ctx, &model.vocab, limits)?;
    let mut seen = HashSet::new();
    Ok(beam_search(model, &input, beam)?
        .into_iter()
        .filter(|h| h.finished && !h.text.is_empty() && seen.insert(h.text.clone()))
        .take(k)
        .map(|h| (h.text, h.score))
        .collect())
}

/// Held-out page views with at least one positive item.
pub fn eval_cases(cfg: &RunConfig, corpus: &Corpus, enhancer: &Enhancer) -> Result<Vec<EvalCase>> {
    let (train, test) = corpus.split(cfg);
    let history = HistoryIndex::new(&corpus.records);
    let profiles = corpus.profiles();
    let mut prefix_counts: HashMap<String, usize> = HashMap::new();
    for r in &train {
        *prefix_counts.entry(r.prefix.clone()).or_default() += 1;
    }
    let mut cases: Vec<EvalCase> = page_views(&test)
        .into_iter()
        .filter_map(|pv| {
            let relevant: BTreeSet<String> = pv.positives().map(str::to_string).collect();
            (!relevant.is_empty()).then(|| EvalCase {
                context: UserContext {
                    prefix: pv.prefix.clone(),
                    related: Vec::new(),
                    history: history.before(&pv.user_id, pv.ts, cfg.sft.limits.max_history),
                    profile: profiles.get(&pv.user_id).cloned().unwrap_or_default(),
                },
                relevant,
                popularity: Popularity::LongTail,
            })
        })
        .collect();
    fill_related(cfg, enhancer, &mut cases.iter_mut().map(|c| &mut c.context).collect::<Vec<_>>())?;
    crate::evalkit::slice_by_popularity(cases, &prefix_counts, &cfg.eval.thresholds)
}

pub const SYS_MPC: &str = "mpc";
pub const SYS_SFT: &str = "sft";
pub const SYS_PAIR: &str = "sft+pair";
pub const SYS_LIST: &str = "sft+list";
pub const SYS_NO_PRE: &str = "sft+list-no-related";

fn mode_name(mode: LossMode) -> &'static str {
    match mode {
        LossMode::Pair => SYS_PAIR,
        LossMode::List => SYS_LIST,
    }
}

/// Scores the baseline, the SFT model and the aligned model on held-out page
/// views. With `eval.ablation`, also trains and scores the other loss mode
/// and a list-wise model built without related queries, then evaluates the
/// ordering checks.
pub fn eval_stage(cfg: &RunConfig) -> Result<(StageMeta, EvalReport)> {
    let dir = begin(cfg, Stage::Eval)?;
    let corpus = Corpus::load(cfg)?;
    let enhancer = load_enhancer(cfg)?;
    let sft = load_generator(cfg, Stage::Sft)?;
    let aligned = load_generator(cfg, Stage::Dpo)?;
    let train = corpus.train(cfg);
    let cases = eval_cases(cfg, &corpus, &enhancer)?;
    let (k, limits, beam) = (cfg.eval.k, cfg.sft.limits, cfg.eval.beam);

    let mut models: Vec<(&str, GenModel, bool)> = vec![(SYS_SFT, sft.clone(), true), (mode_name(cfg.dpo.loss.mode), aligned, true)];
    if cfg.eval.ablation {
        let other = match cfg.dpo.loss.mode {
            LossMode::Pair => LossMode::List,
            LossMode::List => LossMode::Pair,
        };
        let groups = preference_groups(cfg, &corpus, &train, other, Some(&enhancer))?;
        models.push((mode_name(other), align_generator(cfg, &sft, &groups, other)?.0, true));

        let vocab = fit_vocab(&corpus);
        let examples = sft_examples(cfg, &vocab, &train, &corpus.profiles(), None)?;
        let (bare, _) = train_generator(cfg, vocab, &examples)?;
        let groups = preference_groups(cfg, &corpus, &train, LossMode::List, None)?;
        models.push((SYS_NO_PRE, align_generator(cfg, &bare, &groups, LossMode::List)?.0, false));
    }
    models.sort_by_key(|(name, _, _)| [SYS_SFT, SYS_PAIR, SYS_LIST, SYS_NO_PRE].iter().position(|n| n == name));

    let trie = MpcTrie::build(&train);
    let mpc = move |ctx: &UserContext| -> Result<Vec<String>> { Ok(trie.suggest(&ctx.prefix, k).into_iter().map(|(q, _)| q).collect()) };
    let gens: Vec<_> = models
        .iter()
        .map(|(_, m, with_related)| {
            move |ctx: &UserContext| -> Result<Vec<String>> {
                let mut c = ctx.clone();
                if !with_related {
                    c.related.clear();
                }
                Ok(generate(m, &c, &limits, &beam, k)?.into_iter().map(|(q, _)| q).collect())
            }
        })
        .collect();
    let mut systems: Vec<(&str, SystemFn<'_>)> = vec![(SYS_MPC, &mpc)];
    for ((name, _, _), f) in models.iter().zip(&gens) {
        systems.push((name, f));
    }
    let mut report = run_ablation(&systems, &cases, k, cfg.exec, &cfg.stage_hash(Stage::Eval), cfg.seed)?;

    if cfg.eval.ablation {
        for m in [Metric::Hr, Metric::Mrr] {
            report.check(SYS_LIST, SYS_PAIR, m, None, 0.0)?;
            report.check(SYS_PAIR, SYS_SFT, m, None, 0.0)?;
            report.check(SYS_SFT, SYS_MPC, m, None, 0.0)?;
        }
        report.check(SYS_LIST, SYS_SFT, Metric::Hr, None, cfg.eval.list_over_sft)?;
        report.check(SYS_LIST, SYS_NO_PRE, Metric::Hr, Some(Popularity::LongTail), cfg.eval.enhancement_gain)?;
    }
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())?;
    let meta = finish(
        cfg,
        Stage::Eval,
        json!({ "cases": cases.len(), "checks_passed": report.all_passed() }),
    )?;
    Ok((meta, report))
}

/// Runs one stage; `eval` discards the report after writing it.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<StageMeta> {
    match stage {
        Stage::Corpus => gen_corpus(cfg),
        Stage::Align => train_align(cfg),
        Stage::Index => build_index_stage(cfg),
        Stage::Rqvae => train_rqvae_stage(cfg),
        Stage::Sft => train_sft_stage(cfg),
        Stage::Dpo => train_dpo_stage(cfg),
        Stage::Eval => eval_stage(cfg).map(|(m, _)| m),
    }
}

/// Everything serving needs, loaded from one run and checked against its
/// configuration.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub config: RunConfig,
    /// Hash of the aligned generator's stage, which covers every earlier stage.
    pub config_hash: String,
    pub created_unix: u64,
    /// Hash each component was built under, by stage command.
    pub component_hashes: BTreeMap<String, String>,
    pub enhancer: Enhancer,
    pub generator: GenModel,
}

impl ModelSnapshot {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        require(cfg, Stage::Dpo)?;
        let enhancer = load_enhancer(cfg)?;
        let generator = load_generator(cfg, Stage::Dpo)?;
        let meta = read_meta(cfg, Stage::Dpo)?.ok_or_else(|| CoreError::MissingArtifact {
            stage: Stage::Dpo.command(),
            path: cfg.stage_dir(Stage::Dpo).join(META_FILE),
        })?;
        let component_hashes = [Stage::Align, Stage::Index, Stage::Rqvae, Stage::Sft, Stage::Dpo]
            .into_iter()
            .map(|s| (s.command().to_string(), cfg.stage_hash(s)))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            config_hash: cfg.stage_hash(Stage::Dpo),
            created_unix: meta.created_unix,
            component_hashes,
            enhancer,
            generator,
        })
    }

    /// Recomputes every stage hash from the embedded configuration.
    pub fn verify(&self) -> Result<()> {
        let stale = |stage: &str, found: &str, expected: String| CoreError::StaleArtifact {
            stage: Stage::ALL.into_iter().find(|s| s.command() == stage).map_or("train-dpo", Stage::command),
            path: self.config.workdir.clone(),
            expected,
            found: found.to_string(),
        };
        let want = self.config.stage_hash(Stage::Dpo);
        if self.config_hash != want {
            return Err(stale("train-dpo", &self.config_hash, want));
        }
        for s in [Stage::Align, Stage::Index, Stage::Rqvae, Stage::Sft, Stage::Dpo] {
            let found = self.component_hashes.get(s.command()).map(String::as_str).unwrap_or("");
            let want = self.config.stage_hash(s);
            if found != want {
                return Err(stale(s.command(), found, want));
            }
        }
        Ok(())
    }

    /// Ranked suggestions; `ctx.related` is recomputed from the prefix.
    pub fn suggest(&self, ctx: &UserContext, k: usize) -> Result<Vec<(String, f64)>> {
        let mut ctx = ctx.clone();
        self.enhancer.enhance(&mut ctx)?;
        generate(&self.generator, &ctx, &self.config.sft.limits, &self.config.eval.beam, k)
    }
}
