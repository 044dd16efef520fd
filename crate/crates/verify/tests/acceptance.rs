//! Acceptance checks, run in order by a plain `main` so that every verdict
//! line is printed. Exits non-zero when any check fails.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Barrier, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use onesug_core::align::{batch_contrastive_loss, AlignTokenizer, EncoderDims, TextEncoder};
use onesug_core::config::{RunConfig, Stage};
use onesug_core::corpus::{generate_catalog, simulate_logs, FeedbackLevel, InteractionRecord, MpcTrie, SimConfig};
use onesug_core::evalkit::EvalReport;
use onesug_core::nn::check_gradient;
use onesug_core::pipeline::{eval_stage, run_stage, ModelSnapshot, StageMeta, META_FILE};
use onesug_core::prefalign::{
    group_loss, group_loss_value, reward, reward_weight, DpoGroup, LossMode, PreferenceLoss, RewardParams,
};
use onesug_core::rqvae::{
    related_query_search, screen_candidates, IndexEntry, QueryIndex, RqvaeDims, RqvaeModel, SearchParams, SemanticId,
};
use onesug_core::sugmodel::{
    beam_search, score_sequence, sft_loss, BeamConfig, GenConfig, GenModel, TokenizedExample, Vocab, CLS, EOS, SEP,
    SPECIALS,
};
use onesug_serve::{router, FeedbackLog, Service, SuggestResponse, UserStore};
use onesug_verify::verdict;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

const DESK_CONFIG: &str = include_str!("../../../configs/desk.json");
const TRAINING: [Stage; 6] = [Stage::Corpus, Stage::Align, Stage::Index, Stage::Rqvae, Stage::Sft, Stage::Dpo];

type Outcome = (bool, String);

fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Specials plus three letters: exactly four generatable tokens.
fn abc_vocab() -> Vocab {
    let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(["a", "b", "c"].map(String::from));
    Vocab::from_tokens(tokens.collect()).unwrap()
}

fn tiny_gen() -> GenConfig {
    GenConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 12,
        max_enc_len: 40,
        max_dec_len: 10,
    }
}

fn random_model(vocab: Vocab, seed: u64) -> GenModel {
    let mut m = GenModel::new(vocab, tiny_gen(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in m.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    m
}

const INPUT: [usize; 8] = [CLS, 6, 7, SEP, 8, SEP, SEP, 6];

// ---- 1 ----

fn criterion_1_gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let seeds = 0..20u64;

    let tok = AlignTokenizer::fit(["red dress", "red dresses", "usb cable", "dress blue"]);
    let dims = EncoderDims {
        d_emb: 8,
        d_hidden: 12,
        d_out: 6,
    };
    let mut w = 0f64;
    for s in seeds.clone() {
        let enc = TextEncoder::new(tok.clone(), dims, 0.5, s);
        let e = check_gradient(
            |g, p| {
                let a = enc.forward(g, p, &["re", "us", "dr"])?;
                let b = enc.forward(g, p, &["red dress", "usb cable", "dress blue"])?;
                batch_contrastive_loss(g, a, b, enc.tau)
            },
            &enc.params,
            1e-5,
        )
        .unwrap();
        w = w.max(e);
    }
    worst.push(("contrastive", w));

    let rq_dims = RqvaeDims {
        d_in: 4,
        d_hidden: 5,
        d_latent: 3,
        blocks: 2,
        levels: 2,
        codebook_size: 3,
    };
    let mut w = 0f64;
    for s in seeds.clone() {
        let mut m = RqvaeModel::new(rq_dims, 0.25, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        for t in m.params.iter_mut().filter(|t| t.shape().len() == 1) {
            t.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
        let batch: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 4)).collect();
        let codes = m.assign_batch(&batch).unwrap();
        let stops = m.stop_values(&batch, &codes).unwrap();
        let e = check_gradient(|g, p| Ok(m.frozen_loss(g, p, &batch, &codes, &stops)?.total), &m.params, 1e-5).unwrap();
        w = w.max(e);
    }
    worst.push(("rq-vae", w));

    let v = abc_vocab();
    let ex = TokenizedExample {
        input: vec![CLS, 6, SEP, 7, SEP, SEP, 8],
        target: vec![6, 7, EOS],
    };
    let mut w = 0f64;
    for s in seeds.clone() {
        let m = random_model(v.clone(), 100 + s);
        let e = check_gradient(|g, p| sft_loss(&m, g, p, &ex, 3.0), &m.params, 1e-5).unwrap();
        w = w.max(e);
    }
    worst.push(("sft", w));

    let params = RewardParams {
        beta_dpo: 1.0,
        ..RewardParams::default()
    };
    // Reference scores are shifted so the implicit rewards sit at `r_win`
    // and `r_loses`, away from the hinge kinks.
    let placed = |m: &GenModel, r_win: f64, r_loses: &[f64]| {
        let n = r_loses.len();
        let loses: Vec<Vec<usize>> = [vec![8, 7, EOS], vec![7, EOS], vec![8, 6, 8, EOS]][..n].to_vec();
        let mut g = DpoGroup::new(m, INPUT.to_vec(), vec![6, 7, 8, EOS], loses, [1.5, 0.4, 3.0][..n].to_vec()).unwrap();
        g.ref_win -= r_win / params.beta_dpo;
        for (r, off) in g.ref_loses.iter_mut().zip(r_loses) {
            *r -= off / params.beta_dpo;
        }
        g
    };
    let pair = |corrected| PreferenceLoss {
        mode: LossMode::Pair,
        corrected_pair_hinge: corrected,
    };
    let modes: [(&str, PreferenceLoss, f64, &[f64]); 3] = [
        ("pairwise", pair(false), 2.0, &[0.0]),
        ("pairwise corrected", pair(true), -1.0, &[0.0]),
        ("listwise", PreferenceLoss::default(), 0.2, &[3.0, 0.5, -2.0]),
    ];
    for (name, loss, r_win, r_loses) in modes {
        let mut w = 0f64;
        for s in seeds.clone() {
            let m = random_model(v.clone(), 200 + s);
            let g = placed(&m, r_win, r_loses);
            let e = check_gradient(|gr, ps| Ok(group_loss(&m, gr, ps, &g, &loss, &params, 2.0)?.total), &m.params, 1e-5).unwrap();
            w = w.max(e);
        }
        worst.push((name, w));
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = worst.iter().all(|(_, e)| *e <= 1e-4) && secs < 60.0;
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    (ok, format!("max rel. error over 20 seeds: {detail}; {secs:.1}s"))
}

// ---- 2 ----

fn criterion_2_closed_forms_at_reference() -> Outcome {
    let p = RewardParams::default();
    let v = abc_vocab();
    let pair = PreferenceLoss {
        mode: LossMode::Pair,
        corrected_pair_hinge: false,
    };
    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut worst = 0f64;
    for seed in 0..10 {
        let m = random_model(v.clone(), seed);
        let win = vec![8, 6, 7, EOS];
        let nll = -score_sequence(&m, &INPUT, &win).unwrap() / win.len() as f64;
        let one = DpoGroup::new(&m, INPUT.to_vec(), win.clone(), vec![vec![7, 7, EOS]], vec![3.0]).unwrap();
        let want = 2f64.ln() + p.alpha * nll;
        worst = worst.max((group_loss_value(&m, &one, &pair, &p).unwrap() - want).abs());
        for n in 1..=5usize {
            let loses: Vec<Vec<usize>> = (0..n).map(|i| vec![6 + i % 3, 6 + (i + 1) % 3, EOS]).collect();
            let rw = (0..n).map(|i| 0.5 + i as f64).collect();
            let g = DpoGroup::new(&m, INPUT.to_vec(), win.clone(), loses, rw).unwrap();
            let want = -sigma(-(n as f64).ln()).ln() + p.alpha * nll;
            worst = worst.max((group_loss_value(&m, &g, &PreferenceLoss::default(), &p).unwrap() - want).abs());
        }
    }
    (worst <= 1e-10, format!("max abs. error {worst:.1e}"))
}

// ---- 3 ----

fn criterion_3_reward_arithmetic() -> Outcome {
    let p = RewardParams::default();
    let click = reward(FeedbackLevel::Click, 0.0, &p).unwrap();
    let rand = reward(FeedbackLevel::Rand, 0.9, &p).unwrap();
    let order = reward(FeedbackLevel::Order, 0.0, &p).unwrap();
    let rw = reward_weight(order, reward(FeedbackLevel::Rand, 0.0, &p).unwrap(), &p).unwrap();
    let ok = click == 1.0 && rand == 0.0 && rw == 0.5;
    (ok, format!("click {click}, rand {rand}, rw(order, rand) {rw}"))
}

// ---- 4 ----

fn brute_argmin(r: &[f64], table: &[f64]) -> usize {
    let d = r.len();
    let dists: Vec<f64> = table.chunks(d).map(|c| r.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum()).collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&x| x == min).unwrap()
}

fn semantic_ids_agree() -> bool {
    let dims = RqvaeDims {
        d_in: 8,
        d_hidden: 12,
        d_latent: 4,
        blocks: 3,
        levels: 4,
        codebook_size: 16,
    };
    let m = RqvaeModel::new(dims, 0.25, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xs: Vec<Vec<f64>> = (0..1000).map(|_| rand_vec(&mut rng, 8)).collect();
    let ids = m.assign_batch(&xs).unwrap();
    m.encode(&xs).unwrap().iter().zip(&ids).all(|(z, id)| {
        let mut r = z.clone();
        (0..4).all(|l| {
            let table = m.codebook(l).data();
            let i = brute_argmin(&r, table);
            r.iter_mut().zip(&table[i * 4..(i + 1) * 4]).for_each(|(a, c)| *a -= c);
            id.0[l] == i
        })
    })
}

fn beam_agrees_with_enumeration() -> bool {
    let v = abc_vocab();
    let allowed: Vec<usize> = (0..v.len()).filter(|&i| v.is_generatable(i)).collect();
    assert_eq!(allowed.len(), 4);
    // Every sequence of length <= 3; EOS ends a sequence early.
    let mut all: Vec<Vec<usize>> = Vec::new();
    let mut frontier = vec![Vec::new()];
    for depth in 0..3 {
        let mut next = Vec::new();
        for seq in &frontier {
            for &t in &allowed {
                let s = [seq.clone(), vec![t]].concat();
                if t == EOS || depth == 2 {
                    all.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    (0..5).all(|seed| {
        let m = random_model(v.clone(), seed);
        let cfg = BeamConfig {
            beam_size: 64,
            max_len: 3,
            length_penalty: 0.0,
        };
        let got = beam_search(&m, &INPUT, &cfg).unwrap();
        let mut want: Vec<(f64, Vec<usize>)> = all.iter().map(|s| (score_sequence(&m, &INPUT, s).unwrap(), s.clone())).collect();
        want.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        got.len() == want.len() && got.iter().zip(&want).all(|(h, (s, ids))| &h.ids == ids && (h.score - s).abs() <= 1e-12)
    })
}

fn mpc_agrees_with_scan() -> bool {
    let catalog = generate_catalog(31, 6, 240, 4, 1.0).unwrap();
    let sim = SimConfig {
        n_users: 50,
        n_events: 5000,
        ..SimConfig::default()
    };
    let records = simulate_logs(&catalog, &sim, 31).unwrap().records;
    let trie = MpcTrie::build(&records);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records.iter().filter(|r| r.level.is_positive()) {
        *counts.entry(&r.query).or_default() += 1;
    }
    let prefixes: HashSet<&str> = records.iter().map(|r| r.prefix.as_str()).collect();
    prefixes.into_iter().all(|p| {
        let mut want: Vec<(String, usize)> =
            counts.iter().filter(|(q, _)| q.starts_with(p)).map(|(q, c)| (q.to_string(), *c)).collect();
        want.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        [1, 3, 16].iter().all(|&k| trie.suggest(p, k) == want[..k.min(want.len())])
    })
}

fn related_search_agrees_with_staged_scan() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let entries = (0..200)
        .map(|i| IndexEntry {
            query: format!("q{}", i % 193),
            embedding: unit(rand_vec(&mut rng, 5)),
            codes: SemanticId((0..3).map(|_| rng.random_range(0..3)).collect()),
        })
        .collect();
    let index = QueryIndex::new(entries).unwrap();
    let staged = |id: &SemanticId, emb: &[f64], p: &SearchParams| {
        let mut picked: Vec<&IndexEntry> = Vec::new();
        for l in (1..=id.0.len()).rev() {
            for e in index.entries() {
                if e.codes.0[..l] == id.0[..l] && !picked.iter().any(|x| std::ptr::eq(*x, e)) {
                    picked.push(e);
                }
            }
            if picked.len() >= p.candidate_factor * p.k {
                break;
            }
        }
        let c: Vec<(&str, &[f64])> = picked.iter().map(|e| (e.query.as_str(), e.embedding.as_slice())).collect();
        screen_candidates(&c, emb, p.k, p.lambda_div)
    };
    (0..100).all(|_| {
        let id = SemanticId((0..3).map(|_| rng.random_range(0..4)).collect());
        let emb = unit(rand_vec(&mut rng, 5));
        [1, 3, 10].iter().all(|&k| {
            let p = SearchParams {
                k,
                lambda_div: 0.6,
                candidate_factor: 4,
            };
            related_query_search(&index, &id, &emb, &p) == staged(&id, &emb, &p)
        })
    })
}

fn criterion_4_oracle_equivalences() -> Outcome {
    let results = [
        ("semantic ids", semantic_ids_agree()),
        ("beam search", beam_agrees_with_enumeration()),
        ("mpc", mpc_agrees_with_scan()),
        ("related search", related_search_agrees_with_staged_scan()),
    ];
    let detail = results.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "differs" })).collect::<Vec<_>>();
    (results.iter().all(|r| r.1), detail.join(", "))
}

// ---- 5, 6: the bundled desk configuration ----

struct DeskRun {
    _dir: tempfile::TempDir,
    metas: Vec<StageMeta>,
    report: EvalReport,
    elapsed: Duration,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::from_json(DESK_CONFIG).unwrap();
        cfg.workdir = dir.path().join("run");
        let start = Instant::now();
        let metas = TRAINING.iter().map(|&s| run_stage(&cfg, s).unwrap()).collect();
        let (_, report) = eval_stage(&cfg).unwrap();
        DeskRun {
            _dir: dir,
            metas,
            report,
            elapsed: start.elapsed(),
        }
    })
}

fn criterion_5_ordering_reproduction() -> Outcome {
    let run = desk_run();
    println!("{}", run.report.to_table());
    let failed: Vec<String> = run.report.checks.iter().filter(|c| !c.passed).map(|c| c.describe()).collect();
    let secs = run.elapsed.as_secs_f64();
    let ok = failed.is_empty() && secs < 600.0;
    let detail = if failed.is_empty() {
        format!("all {} orderings hold; {secs:.0}s", run.report.checks.len())
    } else {
        format!("{} of {} orderings fail ({}); {secs:.0}s", failed.len(), run.report.checks.len(), failed.join("; "))
    };
    (ok, detail)
}

fn criterion_6_rqvae_training() -> Outcome {
    let run = desk_run();
    let meta = run.metas.iter().find(|m| m.stage == Stage::Rqvae.command()).unwrap();
    let curve = meta.stats["curve"].as_array().unwrap();
    let (first, last) = (&curve[0], curve.last().unwrap());
    let r0 = first["recon"].as_f64().unwrap();
    let r1 = last["recon"].as_f64().unwrap();
    let util = last["utilization"].as_f64().unwrap();
    let w = RunConfig::from_json(DESK_CONFIG).unwrap().rqvae.dims.codebook_size;
    let ok = r1 <= 0.5 * r0 && util > 0.5 && w == 64;
    (ok, format!("recon {r0:.4} -> {r1:.4}, utilization {util:.3} at W = {w}"))
}

// ---- 7, 8: a small trained run ----

struct SmokeRun {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
}

fn smoke_run() -> &'static SmokeRun {
    static RUN: OnceLock<SmokeRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::smoke(dir.path().join("a"));
        for s in TRAINING {
            run_stage(&cfg, s).unwrap();
        }
        SmokeRun { _dir: dir, cfg }
    })
}

/// Every file under `dir` except stage-marker timestamps.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = std::fs::read(&path).unwrap();
            if path.file_name().unwrap() == META_FILE {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("created_unix");
                bytes = v.to_string().into_bytes();
            }
            out.push((path.strip_prefix(dir).unwrap().display().to_string(), bytes));
        }
    }
    out.sort();
    out
}

fn busiest_prefix(records: &[InteractionRecord]) -> String {
    let mut counts = HashMap::<&str, usize>::new();
    for r in records {
        *counts.entry(&r.prefix).or_default() += 1;
    }
    counts.into_iter().max_by_key(|(p, c)| (*c, std::cmp::Reverse(*p))).unwrap().0.to_string()
}

fn smoke_service(log: &Path) -> (Arc<Service>, ModelSnapshot) {
    let cfg = &smoke_run().cfg;
    let snap = ModelSnapshot::load(cfg).unwrap();
    let svc = Service::new(snap.clone(), UserStore::load(cfg).unwrap(), FeedbackLog::open(log).unwrap()).unwrap();
    (Arc::new(svc), snap)
}

fn criterion_7_determinism() -> Outcome {
    let a = &smoke_run().cfg;
    let dir = tempfile::tempdir().unwrap();
    let b = RunConfig {
        workdir: dir.path().join("b"),
        ..a.clone()
    };
    for s in TRAINING {
        run_stage(&b, s).unwrap();
    }
    let fresh_equal = artifacts(&a.workdir) == artifacts(&b.workdir);
    let before = artifacts(&b.workdir);
    for s in TRAINING {
        run_stage(&b, s).unwrap();
    }
    let rerun_equal = artifacts(&b.workdir) == before;

    let (svc, _) = smoke_service(&dir.path().join("fb.jsonl"));
    let records = onesug_core::pipeline::Corpus::load(a).unwrap().records;
    let prefix = busiest_prefix(&records);
    let user = records[0].user_id.clone();
    let responses: Vec<Vec<u8>> =
        (0..3).map(|_| serde_json::to_vec(&svc.suggest(&user, &prefix, None).unwrap()).unwrap()).collect();
    let bytes_equal = responses.windows(2).all(|w| w[0] == w[1]);

    let n = before.len();
    (
        fresh_equal && rerun_equal && bytes_equal,
        format!("{n} artifacts identical across runs {fresh_equal}, after re-run {rerun_equal}; suggest bytes identical {bytes_equal}"),
    )
}

async fn call(svc: &Arc<Service>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn criterion_8_service_contract() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("fb.jsonl");
    let (svc, snap) = smoke_service(&log);
    let cfg = &smoke_run().cfg;
    let records = onesug_core::pipeline::Corpus::load(cfg).unwrap().records;
    let prefix = busiest_prefix(&records);
    let user = records[0].user_id.clone();
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();

    // /suggest: at most 16 distinct items, best first, from a 32-wide beam.
    let uri = format!("/suggest?user={user}&prefix={}", prefix.replace(' ', "%20"));
    let (status, body) = rt.block_on(call(&svc, Request::get(uri).body(Body::empty()).unwrap()));
    let resp: SuggestResponse = serde_json::from_slice(&body).unwrap();
    let items = &resp.suggestions;
    let distinct: HashSet<&str> = items.iter().map(|s| s.query.as_str()).collect();
    let suggest_ok = status == StatusCode::OK
        && !items.is_empty()
        && items.len() <= 16
        && distinct.len() == items.len()
        && items.windows(2).all(|w| w[0].score >= w[1].score)
        && snap.config.eval.beam.beam_size == 32;

    // /feedback: 100 concurrent posts, each landing as exactly one intact line.
    let posts = rt.block_on(async {
        let tasks: Vec<_> = (0..100)
            .map(|i| {
                let svc = svc.clone();
                let body = serde_json::json!({
                    "user": format!("load{i:03}"),
                    "prefix": "re",
                    "query": format!("query number {i}"),
                    "level": "Click",
                    "ts": 1_700_000_000_000i64 + i,
                });
                tokio::spawn(async move {
                    let req = Request::post("/feedback")
                        .header("content-type", "application/json")
                        .body(Body::from(body.to_string()))
                        .unwrap();
                    call(&svc, req).await.0
                })
            })
            .collect();
        let mut ok = 0;
        for t in tasks {
            ok += usize::from(t.await.unwrap() == StatusCode::OK);
        }
        ok
    });
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    let users: HashSet<String> = lines.iter().map(|v| v["user"].as_str().unwrap_or("").to_string()).collect();
    let stamps: Vec<i64> = lines.iter().map(|v| v["server_ts"].as_i64().unwrap()).collect();
    let feedback_ok = posts == 100
        && text.lines().count() == 100
        && lines.len() == 100
        && users.len() == 100
        && lines.iter().all(|v| {
            let i: usize = v["user"].as_str().unwrap()[4..].parse().unwrap();
            v["query"] == format!("query number {i}")
        })
        && stamps.windows(2).all(|w| w[0] < w[1]);

    // Swaps racing with readers: every response matches one snapshot exactly.
    let mut other = snap.clone();
    let last = other.generator.params.len() - 1;
    for (i, x) in other.generator.params[last].data_mut().iter_mut().enumerate() {
        *x += ((i * 7919) % 13) as f64 * 0.4 - 2.4;
    }
    let want_a = svc.suggest_on(&snap, &user, &prefix, None).unwrap();
    let want_b = svc.suggest_on(&other, &user, &prefix, None).unwrap();
    let start = Arc::new(Barrier::new(5));
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (svc, user, prefix, start) = (svc.clone(), user.clone(), prefix.clone(), start.clone());
            std::thread::spawn(move || {
                start.wait();
                (0..6).map(|_| svc.suggest(&user, &prefix, None).unwrap()).collect::<Vec<_>>()
            })
        })
        .collect();
    start.wait();
    for i in 0..12 {
        svc.swap(if i % 2 == 0 { other.clone() } else { snap.clone() }).unwrap();
    }
    let seen: Vec<SuggestResponse> = readers.into_iter().flat_map(|r| r.join().unwrap()).collect();
    let swap_ok = want_a != want_b && seen.iter().all(|r| *r == want_a || *r == want_b);

    (
        suggest_ok && feedback_ok && swap_ok,
        format!(
            "suggest {} items ok {suggest_ok}; feedback {posts}/100 accepted, {} lines, ok {feedback_ok}; {} responses during swaps, ok {swap_ok}",
            items.len(),
            lines.len(),
            seen.len()
        ),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 8] = [
        ("gradient integrity", criterion_1_gradient_integrity),
        ("closed forms at reference", criterion_2_closed_forms_at_reference),
        ("reward arithmetic", criterion_3_reward_arithmetic),
        ("oracle equivalences", criterion_4_oracle_equivalences),
        ("ordering reproduction", criterion_5_ordering_reproduction),
        ("rq-vae training", criterion_6_rqvae_training),
        ("determinism", criterion_7_determinism),
        ("service contract", criterion_8_service_contract),
    ];
    let mut lines = Vec::new();
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let (passed, detail) = match std::panic::catch_unwind(check) {
            Ok(outcome) => outcome,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        let line = verdict(i + 1, name, passed, &detail);
        println!("{line}");
        lines.push((passed, line));
    }
    let failed = lines.iter().filter(|(p, _)| !p).count();
    println!("\nacceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
