//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion to
//! stderr (uncaptured) and fails if any criterion fails.

use std::io::Write;
use std::process::Command;
use std::time::Instant;

use ctkt::checkpoint;
use ctkt::config::ExperimentConfig;
use ctkt::losses::AuxKind;
use ctkt::model::Variant;
use ctkt::synthdata::{generate_corpus, Corpus};
use ctkt::teacher::TeacherLM;
use ctkt::trainer::{benchmark_iterations, evaluate, train_experiment, DecodeMode, EvalContext};
use ctkt::verify::{self, SuiteReport, VerifyOptions};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(id: usize, name: &str, o: &Outcome, secs: f64) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "criterion {id:>2} {verdict}  {name}: {} [{secs:.1}s]", o.detail).unwrap();
}

fn suite(r: SuiteReport, limit_secs: f64) -> Outcome {
    let pass = r.ok() && r.secs < limit_secs;
    let mut detail = format!("{}/{} cases in {:.2}s", r.passed, r.total, r.secs);
    if limit_secs.is_finite() {
        detail += &format!(" (limit {limit_secs}s)");
    }
    if let Some(f) = r.first_failure {
        detail += &format!("; first failure {}: {}", f.case, f.detail);
    }
    Outcome { pass, detail }
}

fn default_config(variant: Variant, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults("unused");
    cfg.train.variant = variant;
    cfg.train.seed = seed;
    cfg
}

fn teacher_for(cfg: &ExperimentConfig, corpus: &Corpus) -> Option<TeacherLM> {
    (cfg.train.variant != Variant::Vanilla).then(|| cfg.build_teacher(cfg.variant_directionality(), corpus).unwrap())
}

/// Greedy test CER after the full recipe.
fn test_cer(cfg: &ExperimentConfig, corpus: &Corpus, teacher: Option<&TeacherLM>) -> f64 {
    let out = train_experiment(&cfg.train, corpus, teacher, |_, _| Ok(())).unwrap();
    let ctx = EvalContext { params: &out.params, model: &cfg.train.model, lm: None, cl_teacher: None };
    evaluate(&ctx, &corpus.test, DecodeMode::Greedy).unwrap().cer
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(" "))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn engineering() -> Outcome {
    let mut notes = Vec::new();
    let tmp = tempfile::tempdir().unwrap();

    let cfg = ExperimentConfig::defaults(tmp.path());
    let text = cfg.serialize();
    let config_ok = ExperimentConfig::parse(&text).map(|c| c == cfg && c.serialize() == text).unwrap_or(false);
    notes.push(format!("config round-trip {}", if config_ok { "exact" } else { "BROKEN" }));

    let mut small = ExperimentConfig::defaults(tmp.path());
    small.corpus.train = 64;
    small.corpus.dev = 8;
    small.corpus.test = 8;
    small.train.epochs = 2;
    small.train.variant = Variant::KtRlCif;
    let corpus = generate_corpus(&small.corpus).unwrap();
    let teacher = teacher_for(&small, &corpus);
    let run = || train_experiment(&small.train, &corpus, teacher.as_ref(), |_, _| Ok(())).unwrap().params;
    let (a, b) = (run(), run());
    let det_ok = a.checksum() == b.checksum();
    notes.push(format!("training checksums {:016x}/{:016x}", a.checksum(), b.checksum()));

    let path = tmp.path().join("m.ckpt");
    checkpoint::save(&path, &a).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let again = tmp.path().join("m2.ckpt");
    checkpoint::save(&again, &loaded).unwrap();
    let ckpt_ok = std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap() && loaded.checksum() == a.checksum();
    notes.push(format!("checkpoint round-trip {}", if ckpt_ok { "bit-exact" } else { "BROKEN" }));

    let status = Command::new(env!("CARGO_BIN_EXE_ctkt")).arg("verify").output().unwrap().status;
    notes.push(format!("verify exit {:?}", status.code()));

    Outcome { pass: config_ok && det_ok && ckpt_ok && status.success(), detail: notes.join("; ") }
}

#[test]
fn acceptance_criteria() {
    let opts = VerifyOptions::default();
    let mut results: Vec<(usize, &str, bool)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        line(id, name, &o, start.elapsed().as_secs_f64());
        results.push((id, name, o.pass));
    };

    record(1, "CTC oracle", &mut || suite(verify::ctc_oracle_suite(&opts), 30.0));
    record(2, "gradient suite", &mut || suite(verify::gradient_suite(&opts), 120.0));
    record(3, "CIF invariants", &mut || suite(verify::cif_suite(&opts), f64::INFINITY));
    record(4, "masking", &mut || suite(verify::masking_suite(&opts), f64::INFINITY));
    record(5, "decoder", &mut || suite(verify::decoder_suite(&opts), f64::INFINITY));

    let base = default_config(Variant::Vanilla, 1);
    let corpus = generate_corpus(&base.corpus).unwrap();

    record(8, "KT-RL-ATT faster than KT-RL-CIF per iteration", &mut || {
        let iters = 200;
        let mut per_iter = Vec::new();
        for variant in [Variant::KtRlAtt, Variant::KtRlCif] {
            let cfg = default_config(variant, 1);
            let teacher = teacher_for(&cfg, &corpus);
            let t = benchmark_iterations(&cfg.train, &corpus.train, teacher.as_ref(), iters).unwrap();
            per_iter.push(t.iter().map(|x| x.total()).sum::<f64>() / iters as f64);
        }
        Outcome {
            pass: per_iter[0] < per_iter[1],
            detail: format!("{iters} iterations: ATT {:.5}s vs CIF {:.5}s", per_iter[0], per_iter[1]),
        }
    });

    record(9, "noiseless corpus reaches greedy CER 0", &mut || {
        let mut cfg = default_config(Variant::Vanilla, 1);
        cfg.corpus.noise_sigma = 0.0;
        let clean = generate_corpus(&cfg.corpus).unwrap();
        let cer = test_cer(&cfg, &clean, None);
        Outcome { pass: cer == 0.0, detail: format!("test CER {cer:.4}") }
    });

    let mut cif_cosine = Vec::new();
    record(6, "KT-RL-CIF beats vanilla in >= 4/5 seeds", &mut || {
        let mut vanilla = Vec::new();
        for seed in SEEDS {
            let v = default_config(Variant::Vanilla, seed);
            vanilla.push(test_cer(&v, &corpus, None));
            let c = default_config(Variant::KtRlCif, seed);
            let teacher = teacher_for(&c, &corpus);
            cif_cosine.push(test_cer(&c, &corpus, teacher.as_ref()));
        }
        let wins = vanilla.iter().zip(&cif_cosine).filter(|(v, c)| c < v).count();
        Outcome {
            pass: wins >= 4,
            detail: format!("wins {wins}/5; vanilla {} KT-RL-CIF {}", fmt(&vanilla), fmt(&cif_cosine)),
        }
    });

    record(7, "cosine aux <= MSE aux (mean over 5 seeds)", &mut || {
        let mut mse = Vec::new();
        for seed in SEEDS {
            let mut c = default_config(Variant::KtRlCif, seed);
            c.train.loss.aux_kind = AuxKind::Mse;
            let teacher = teacher_for(&c, &corpus);
            mse.push(test_cer(&c, &corpus, teacher.as_ref()));
        }
        let (mc, mm) = (mean(&cif_cosine), mean(&mse));
        Outcome {
            pass: mc <= mm,
            detail: format!("mean cosine {mc:.4} vs MSE {mm:.4}; cosine {} MSE {}", fmt(&cif_cosine), fmt(&mse)),
        }
    });

    record(10, "engineering", &mut engineering);

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2).map(|r| format!("{} ({})", r.0, r.1)).collect();
    let mut err = std::io::stderr().lock();
    writeln!(err, "acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len()).unwrap();
    drop(err);
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
