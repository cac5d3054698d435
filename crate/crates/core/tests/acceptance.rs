//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clwe_nmt::alignment::{eval_p_at_1, procrustes_map, rcsls_refine, BilingualDictionary, CslsParams, LinearMap, RefineOptions};
use clwe_nmt::embeddings::EmbeddingTable;
use clwe_nmt::metrics::{bleu, chrf_pp, MetricConfig};
use clwe_nmt::model::{
    evaluate, make_batches, update_step, HeadKind, Model, OptimizerState, ParallelSet, Schedule, TrainConfig, TransformerConfig,
};
use clwe_nmt::pipeline::family::{base_vocab, bt_data, chrf_on, desk_bt_plan, desk_train_config, plug_in_held_out, train_base, BaseRun, FamilySetup};
use clwe_nmt::pipeline::{run_plan, verify_stage_isolation, Stage, StageManifest};
use clwe_nmt::synthlang::Split;
use clwe_nmt::tensor::Mat;
use clwe_nmt::translate::{beam_search, plug_in_language, PlugIn, TranslationRequest};
use clwe_nmt::vocab::{merge, LanguageVocab};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Verdict = Result<String, String>;
type Check = Box<dyn FnOnce(&mut BTreeMap<u64, Base>) -> Verdict>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

struct Rotated {
    src: EmbeddingTable,
    tgt: EmbeddingTable,
    train: BilingualDictionary,
    test: BilingualDictionary,
}

/// 500 unit-norm Gaussian words in 32 dimensions and their image under a
/// random orthogonal matrix (QR of a Gaussian matrix), plus per-coordinate noise.
fn rotated_pair(seed: u64, sigma: f64) -> Rotated {
    let (n, d) = (500, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = DMatrix::<f64>::from_fn(n, d, |_, _| normal.sample(&mut rng));
    for mut row in x.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    let q = DMatrix::<f64>::from_fn(d, d, |_, _| normal.sample(&mut rng)).qr().q();
    let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let y = &x * q.transpose();
    let to_mat = |m: &DMatrix<f64>, rng: &mut ChaCha8Rng, sigma: f64| {
        let mut out = Mat::zeros(0, d);
        for i in 0..n {
            let row: Vec<f32> = (0..d).map(|j| (m[(i, j)] + if sigma > 0.0 { noise.sample(rng) } else { 0.0 }) as f32).collect();
            out.push_row(&row);
        }
        out
    };
    let xs = to_mat(&x, &mut rng, 0.0);
    let ys = to_mat(&y, &mut rng, sigma);
    let src = EmbeddingTable::new("xx", (0..n).map(|i| format!("x{i}")).collect(), xs).unwrap();
    let tgt = EmbeddingTable::new("yy", (0..n).map(|i| format!("y{i}")).collect(), ys).unwrap();
    let pairs: Vec<(String, String)> = (0..n).map(|i| (format!("x{i}"), format!("y{i}"))).collect();
    Rotated {
        src,
        tgt,
        train: BilingualDictionary::new("xx", "yy", pairs[..300].to_vec()).unwrap(),
        test: BilingualDictionary::new("xx", "yy", pairs[300..].to_vec()).unwrap(),
    }
}

fn criterion_1() -> Verdict {
    let csls = CslsParams::default();
    let t = Instant::now();
    let r = rotated_pair(1, 0.0);
    let map = procrustes_map(&r.train, &r.src, &r.tgt).map_err(|e| e.to_string())?;
    let p = eval_p_at_1(&map, &r.src, &r.tgt, &r.test, &csls).map_err(|e| e.to_string())?;
    let took = secs(t.elapsed());
    let mut detail = format!("exact rotation: Procrustes P@1 {:.3} in {took:.2}s;", p.accuracy);
    let mut ok = p.accuracy >= 0.99 && took < 5.0;
    for seed in 1..=3 {
        let r = rotated_pair(seed, 0.05);
        let w0 = procrustes_map(&r.train, &r.src, &r.tgt).map_err(|e| e.to_string())?;
        let refined = rcsls_refine(&w0, &r.train, &r.src, &r.tgt, &csls, &RefineOptions::default()).map_err(|e| e.to_string())?;
        let a = eval_p_at_1(&w0, &r.src, &r.tgt, &r.test, &csls).map_err(|e| e.to_string())?.accuracy;
        let b = eval_p_at_1(&refined.map, &r.src, &r.tgt, &r.test, &csls).map_err(|e| e.to_string())?.accuracy;
        detail += &format!(" σ=0.05 seed {seed}: Procrustes {a:.3} RCSLS {b:.3};");
        ok &= b >= a;
    }
    check(ok, detail)
}

// ---------------------------------------------------------------- 2, 5, 6

struct Base {
    run: BaseRun,
    initial_words: String,
    seconds: f64,
}

fn desk_base(seed: u64, cache: &mut BTreeMap<u64, Base>) -> Result<&Base, String> {
    if !cache.contains_key(&seed) {
        let t = Instant::now();
        let setup = FamilySetup::desk(seed, 32);
        let tcfg = TransformerConfig::desk(32, 2, HeadKind::Softmax);
        let run = train_base(&setup, &tcfg, &desk_train_config(seed), Some(3000)).map_err(|e| e.to_string())?;
        // the vocabulary the model started from, rebuilt from the same inputs
        let initial = base_vocab(&run.family, &run.tables, &run.hub, &setup.seen_ids(), setup.renormalize).map_err(|e| e.to_string())?;
        cache.insert(seed, Base { initial_words: initial.word_rows_checksum(), run, seconds: secs(t.elapsed()) });
    }
    Ok(&cache[&seed])
}

fn criterion_2(cache: &mut BTreeMap<u64, Base>) -> Verdict {
    let b = desk_base(1, cache)?;
    let now = b.run.model.vocab.word_rows_checksum();
    let updates = b.run.report.updates;
    check(
        updates >= 1000 && now == b.initial_words,
        format!("{updates} updates; word-row checksum {}… before, {}… after", &b.initial_words[..12], &now[..12]),
    )
}

fn criterion_5(cache: &mut BTreeMap<u64, Base>) -> Verdict {
    let t = Instant::now();
    let base = desk_base(1, cache)?;
    let setup = FamilySetup::desk(1, 32);
    let plugged = plug_in_held_out(&setup, &base.run, None).map_err(|e| e.to_string())?;
    let control = plug_in_held_out(&setup, &base.run, Some(7)).map_err(|e| e.to_string())?;
    let test = base.run.family.parallel("sd", "sa", Split::Test);
    let z = chrf_on(&plugged, "sd", "sa", &test, 1).map_err(|e| e.to_string())?;
    let c = chrf_on(&control, "sd", "sa", &test, 1).map_err(|e| e.to_string())?;
    let same = plugged.transformer_checksum() == base.run.model.transformer_checksum()
        && control.transformer_checksum() == base.run.model.transformer_checksum();
    let took = base.seconds + secs(t.elapsed());
    check(
        z - c >= 15.0 && same && took < 1800.0,
        format!(
            "sd→sa test chrF++ zero-shot {z:.1} vs shuffled control {c:.1} (gap {:.1}); transformer tensors identical: {same}; {took:.0}s with base training",
            z - c
        ),
    )
}

fn criterion_6(cache: &mut BTreeMap<u64, Base>) -> Verdict {
    let mut ok = true;
    let mut detail = String::new();
    let mut took = 0.0;
    for seed in 1..=3 {
        let t = Instant::now();
        let base = desk_base(seed, cache)?;
        took += base.seconds;
        let setup = FamilySetup::desk(seed, 32);
        let model = plug_in_held_out(&setup, &base.run, None).map_err(|e| e.to_string())?;
        let plan = desk_bt_plan(&setup, seed);
        let data = bt_data(&base.run.family, &plan);
        let report = run_plan(&model, &plan, &data).map_err(|e| e.to_string())?;
        let score = |rows: &[clwe_nmt::pipeline::MetricRow], it: usize| {
            rows.iter().find(|r| r.iteration == it && r.direction == "sd-sa" && r.test_set == "dev").map(|r| r.chrfpp)
        };
        let (Some(z), Some(after)) = (score(&report.baseline, 0), score(&report.table, 2)) else {
            return Err(format!("seed {seed}: missing sd-sa dev rows"));
        };
        let parity = report.iterations.iter().all(|it| {
            if it.iteration % 2 == 1 {
                it.encoder_checksum_before == it.encoder_checksum_after
            } else {
                it.decoder_checksum_before == it.decoder_checksum_after
            }
        });
        took += secs(t.elapsed());
        ok &= after - z >= 5.0 && parity;
        detail += &format!(" seed {seed}: {z:.1} → {after:.1} ({:+.1}), frozen half unchanged: {parity};", after - z);
    }
    ok &= took < 2700.0;
    check(ok, format!("sd→sa dev chrF++ after two rounds:{detail} {took:.0}s with base training"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let t = Instant::now();
    let (s, ns) = common::fd::softmax_loss_worst(11, 4);
    let (v, nv) = common::fd::vmf_loss_worst(12, 3);
    let ms = common::fd::worst_f64(&common::tiny_model(&["aa", "bb"], 10, 16, 2, HeadKind::Softmax, 3), 24, 3);
    let mv = common::fd::worst_f64(&common::tiny_model(&["aa", "bb"], 10, 16, 2, HeadKind::Vmf, 4), 24, 4);
    let fs = common::fd::worst_f32(&common::tiny_model(&["aa", "bb"], 10, 16, 2, HeadKind::Softmax, 5), 40, 5);
    let fv = common::fd::worst_f32(&common::tiny_model(&["aa", "bb"], 10, 16, 2, HeadKind::Vmf, 6), 40, 6);
    let took = secs(t.elapsed());
    check(
        s < 1e-4 && v < 1e-4 && ms < 1e-4 && mv < 1e-4 && ns >= 20 && nv >= 20 && fs < 1e-3 && fv < 1e-3 && took < 60.0,
        format!(
            "f64: softmax loss {s:.1e} ({ns} coords), vMF loss {v:.1e} ({nv}), model softmax {ms:.1e}, model vMF {mv:.1e} (24 each); \
             f32 whole model d=16: softmax {fs:.1e}, vMF {fv:.1e} (40 each); {took:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Vocabulary with a random unit row for every word of `corpora[l]`.
fn random_rows_vocab(corpora: &[(&str, Vec<Vec<String>>)], dim: usize, seed: u64) -> clwe_nmt::vocab::MultiVocab {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: Vec<LanguageVocab> = corpora
        .iter()
        .map(|(l, sents)| {
            let words: Vec<String> = sents.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            let rows = common::unit_rows(words.len(), dim, &mut rng);
            LanguageVocab { language: l.to_string(), words, rows, hard_oov: vec![], composed: vec![] }
        })
        .collect();
    merge(&per).unwrap()
}

fn criterion_4() -> Verdict {
    let t = Instant::now();
    let mut setup = FamilySetup::desk(1, 32);
    setup.grammar.sentences = 2000;
    let family = setup.build_family().map_err(|e| e.to_string())?;
    let pairs: Vec<_> = family.parallel("sa", "sc", Split::Train).into_iter().take(64).collect();
    let (src, tgt): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let vocab = random_rows_vocab(&[("sa", src), ("sc", tgt)], 32, 1);
    let tcfg = TransformerConfig { dropout: 0.0, ..TransformerConfig::desk(32, 2, HeadKind::Softmax) };
    let mut model = Model::new(tcfg, vocab, 1).map_err(|e| e.to_string())?;
    let examples = pairs.iter().map(|(s, t)| model.example("sa", s, "sc", t)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let sets = vec![ParallelSet { src_lang: "sa".into(), tgt_lang: "sc".into(), examples }];
    let masks = vec![model.vocab.target_mask("sc").unwrap().allowed];
    let mut cfg = TrainConfig { batch_tokens: 4096, label_smoothing: 0.0, seed: 1, ..TrainConfig::default() };
    cfg.optimizer.schedule = Schedule::Noam { warmup: 100 };
    let mut state = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut acc = 0.0;
    let mut updates = 0;
    while updates < 2000 {
        let batches = make_batches(&sets, cfg.batch_tokens, &mut rng);
        updates += 1;
        update_step(&mut model, &sets, &masks, &batches, &cfg, &mut state, updates).map_err(|e| e.to_string())?;
        if updates % 25 == 0 {
            acc = evaluate(&model, &sets, &cfg).map_err(|e| e.to_string())?.accuracy;
            if acc >= 0.99 {
                break;
            }
        }
    }
    let took = secs(t.elapsed());
    check(
        acc >= 0.99 && took < 300.0,
        format!("64 pairs sa→sc, 2 layers, d=32: training token accuracy {:.2}% after {updates} updates, {took:.0}s", 100.0 * acc),
    )
}

// ---------------------------------------------------------------- 7

/// Mean seconds per update over `steps` updates after `warmup` untimed ones.
fn step_time(words: usize, head: HeadKind, warmup: usize, steps: usize) -> f64 {
    let corpora: Vec<(&str, usize)> = vec![("aa", words), ("bb", words)];
    let langs: Vec<&str> = corpora.iter().map(|c| c.0).collect();
    let tcfg = TransformerConfig::desk(32, 2, head);
    let mut model = Model::new(tcfg, common::random_vocab(&langs, words, 32, 3), 3).unwrap();
    // the same 40 sentences over the first 100 words, whatever the vocabulary size
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let examples = (0..40)
        .map(|_| {
            let s: Vec<usize> = (0..rng.random_range(5..12)).map(|_| rng.random_range(0..100)).collect();
            let t: Vec<usize> = (0..rng.random_range(5..12)).map(|_| rng.random_range(0..100)).collect();
            model.example("aa", &common::words(&s), "bb", &common::words(&t)).unwrap()
        })
        .collect();
    let sets = vec![ParallelSet { src_lang: "aa".into(), tgt_lang: "bb".into(), examples }];
    let masks = vec![model.vocab.target_mask("bb").unwrap().allowed];
    let cfg = TrainConfig { batch_tokens: 1 << 20, seed: 3, ..TrainConfig::default() };
    let batches = make_batches(&sets, cfg.batch_tokens, &mut rng);
    let mut state = OptimizerState::new();
    let mut timed = Duration::ZERO;
    for u in 1..=warmup + steps {
        let t = Instant::now();
        update_step(&mut model, &sets, &masks, &batches, &cfg, &mut state, u).unwrap();
        if u > warmup {
            timed += t.elapsed();
        }
    }
    secs(timed) / steps as f64
}

fn criterion_7() -> Verdict {
    let (small, large) = (1000, 8000);
    let steps = 200;
    let vs = step_time(small, HeadKind::Vmf, 20, steps);
    let vl = step_time(large, HeadKind::Vmf, 20, steps);
    let ss = step_time(small, HeadKind::Softmax, 20, steps);
    let sl = step_time(large, HeadKind::Softmax, 20, steps);
    let dv = (vl / vs - 1.0).abs();
    let gs = sl / ss;
    check(
        dv < 0.25 && gs > 1.5,
        format!(
            "{small}→{large} words per language, {steps} timed steps: vMF {:.1}→{:.1} ms ({:+.0}%), softmax {:.1}→{:.1} ms (×{gs:.2})",
            vs * 1e3,
            vl * 1e3,
            (vl / vs - 1.0) * 100.0,
            ss * 1e3,
            sl * 1e3
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics");
    let read = |f: &str| std::fs::read_to_string(dir.join(f)).map_err(|e| e.to_string());
    let lines = |s: String| s.lines().map(str::to_string).collect::<Vec<_>>();
    let (hyp, rf) = (lines(read("hyp.txt")?), lines(read("ref.txt")?));
    let expected: toml::Table = read("expected.toml")?.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let c = chrf_pp(&hyp, &rf, &MetricConfig::chrfpp()).map_err(|e| e.to_string())?.score;
    let b = bleu(&hyp, &rf, &MetricConfig::bleu()).map_err(|e| e.to_string())?.score;
    let (wc, wb) = (expected["chrfpp"].as_float().unwrap(), expected["bleu"].as_float().unwrap());
    check(
        (c - wc).abs() <= 0.1 && (b - wb).abs() <= 0.1,
        format!("chrF++ {c:.3} vs reference {wc:.3}; BLEU {b:.3} vs reference {wb:.3}"),
    )
}

// ---------------------------------------------------------------- 9

fn fuzz_model(head: HeadKind, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [("aa", 30), ("bb", 50), ("cc", 20)];
    let per: Vec<LanguageVocab> = sizes
        .iter()
        .map(|&(l, n)| LanguageVocab {
            language: l.into(),
            words: (0..n).map(|i| format!("w{i}")).collect(),
            rows: common::unit_rows(n, 16, &mut rng),
            hard_oov: vec![],
            composed: vec![],
        })
        .collect();
    let cfg = TransformerConfig::desk(16, 1, head);
    let model = Model::new(cfg, merge(&per).unwrap(), seed).unwrap();
    // plus one language plugged in after the fact
    let table = EmbeddingTable::new("dd", (0..25).map(|i| format!("w{i}")).collect(), common::unit_rows(25, 16, &mut rng)).unwrap();
    let map = LinearMap { source_language: "dd".into(), target_language: "aa".into(), matrix: Mat::identity(16), orthogonal: true };
    let opts = PlugIn { language: "dd", pivot: "aa", renormalize: true, corpus: None, bank: None, add_tag: true };
    plug_in_language(&model, &table, &map, &opts).unwrap()
}

fn criterion_9() -> Verdict {
    let t = Instant::now();
    let models = [fuzz_model(HeadKind::Softmax, 1), fuzz_model(HeadKind::Vmf, 2)];
    let langs = ["aa", "bb", "cc", "dd"];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut decodes, mut emitted, mut bad) = (0, 0, 0);
    while decodes < 1000 {
        let model = &models[decodes % 2];
        let (src, tgt) = (langs[rng.random_range(0..4)], langs[rng.random_range(0..4)]);
        let len = rng.random_range(1..9);
        // out-of-vocabulary words map to <unk>
        let sent: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..40))).collect();
        let beam = rng.random_range(1..4);
        let allowed: BTreeSet<usize> = model.vocab.target_mask(tgt).unwrap().allowed.into_iter().collect();
        let mut req = TranslationRequest::new(src, tgt, vec![sent]).with_beam(beam);
        if rng.random_bool(0.5) {
            req.suppress_repeats = None;
        }
        let hyp = beam_search(model, &req).map_err(|e| e.to_string())?.remove(0).ok_or("no hypothesis")?;
        emitted += hyp.tokens.len();
        bad += hyp.tokens.iter().filter(|t| !allowed.contains(t)).count();
        decodes += 1;
    }
    check(bad == 0, format!("{decodes} decodes, {emitted} tokens emitted, {bad} outside the target language; {:.1}s", secs(t.elapsed())))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Verdict {
    let mut setup = FamilySetup::desk(1, 16);
    setup.grammar.sentences = 2000;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    setup.build_family().map_err(|e| e.to_string())?.write_dir(dir.path()).map_err(|e| e.to_string())?;
    let seen = setup.seen_ids();
    let all = setup.languages();
    let path = |n: &str| dir.path().join(n);
    let mut base_files = Vec::new();
    for a in &seen {
        base_files.push(path(&format!("{a}.mono.txt")));
        for b in &seen {
            if a != b {
                base_files.push(path(&format!("{a}-{b}.src.txt")));
                base_files.push(path(&format!("{a}-{b}.tgt.txt")));
                base_files.push(path(&format!("dict.{a}-{b}.txt")));
            }
        }
    }
    let ext_files: Vec<PathBuf> = ["sd.mono.txt", "dict.sd-sa.txt", "sd-sa.dev.src.txt", "sd-sa.dev.tgt.txt", "sa-sd.dev.src.txt", "sa-sd.dev.tgt.txt"]
        .iter()
        .map(|n| path(n))
        .collect();
    let ext = StageManifest::scan(Stage::Extension, &all, &ext_files).map_err(|e| e.to_string())?;
    let clean_base = StageManifest::scan(Stage::Base, &seen, &base_files).map_err(|e| e.to_string())?;
    let clean = verify_stage_isolation(&clean_base, &ext).map_err(|e| e.to_string())?;
    let mut leaked_files = base_files.clone();
    leaked_files.push(path("sd-sa.dev.tgt.txt"));
    let leaked_base = StageManifest::scan(Stage::Base, &seen, &leaked_files).map_err(|e| e.to_string())?;
    let leak = verify_stage_isolation(&leaked_base, &ext).map_err(|e| e.to_string())?;
    let named = leak.violations.first().is_some_and(|v| v.file.ends_with("sd-sa.dev.tgt.txt"));
    check(
        clean.violations.is_empty() && leak.violations.len() == 1 && named,
        format!(
            "clean run: {} violations over {} base files; with sd-sa.dev.tgt.txt leaked: {} violation(s), naming the file: {named}",
            clean.violations.len(),
            base_files.len(),
            leak.violations.len()
        ),
    )
}

/// Pass criterion numbers as arguments to run only those.
fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cache = BTreeMap::new();
    let criteria: Vec<(&str, Check)> = vec![
        ("alignment recovers rotations; refinement helps under noise", Box::new(|_| criterion_1())),
        ("pretrained word rows never change during training", Box::new(criterion_2)),
        ("analytic gradients match finite differences", Box::new(|_| criterion_3())),
        ("a small model overfits 64 pairs", Box::new(|_| criterion_4())),
        ("zero-shot plug-in beats a shuffled-embedding control", Box::new(criterion_5)),
        ("back-translation improves the plugged-in language", Box::new(criterion_6)),
        ("vMF step time does not depend on vocabulary size", Box::new(|_| criterion_7())),
        ("metrics agree with the reference scorer", Box::new(|_| criterion_8())),
        ("decoding never leaves the target language", Box::new(|_| criterion_9())),
        ("stage isolation flags leaked extension files", Box::new(|_| criterion_10())),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let t = Instant::now();
        let verdict = run(&mut cache);
        let took = secs(t.elapsed());
        match verdict {
            Ok(d) => println!("PASS {:>2} {name}: {d} [{took:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} [{took:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
