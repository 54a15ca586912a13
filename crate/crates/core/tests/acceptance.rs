//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gated criterion fails.

use std::time::Instant;

use attend_affect::dataset::{generate_synthetic, split_by_target, Corpus, Partition, Split, SynthConfig};
use attend_affect::embedder::{Embedder, EmbedderConfig, GateKind};
use attend_affect::metrics::{ccc, ewe, EweOptions, EvalReport};
use attend_affect::mfn::DMAN_TAG;
use attend_affect::models::{
    build_model, gradcheck_model, model_check_options, toy_config, toy_inputs, Model, ModelConfig, ModelKind,
};
use attend_affect::nn::Init;
use attend_affect::tensor::{Graph, ParamStore, RngState, Tensor};
use attend_affect::trainer::{evaluate, train, TrainConfig, TrainHistory};
use attend_affect::transformer::{attention_single_head, PositionalMode, ATTENTION_TAG};
use attend_affect::windowing::WindowPlan;
use attend_affect::{Modality, ModalitySet};

type Outcome = Result<String, String>;

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

// ---- 1 -------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    const TOL: f64 = 1e-3;
    let start = Instant::now();
    let mut worst: Vec<(ModelKind, f64)> = Vec::new();
    for kind in ModelKind::ALL {
        let mut w: f64 = 0.0;
        for seed in 0..10 {
            let r = gradcheck_model(kind, ModalitySet::all(), seed, &model_check_options(seed)).map_err(|e| e.to_string())?;
            if r.checked == 0 {
                return Err(format!("{kind}: no coordinates checked"));
            }
            w = w.max(r.max_rel_error);
        }
        worst.push((kind, w));
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = worst
        .iter()
        .map(|(k, w)| format!("{k} {w:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let ok = worst.iter().all(|(_, w)| *w < TOL) && secs < 300.0;
    check(
        ok,
        format!("max rel. err {summary}; {secs:.0}s"),
        format!("max rel. err {summary}; {secs:.0}s (limit {TOL:.0e}, 300s)"),
    )
}

// ---- 2 -------------------------------------------------------------------

fn direct_ccc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n;
    let syy = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / n;
    let sxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    2.0 * sxy / (sxx + syy + (mx - my) * (mx - my))
}

fn metric_oracles() -> Outcome {
    let mut rng = RngState::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + rng.below(60);
        let x: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.6 * v + rng.normal(0.1, 0.4)).collect();
        let got = ccc(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((got - direct_ccc(&x, &y)).abs());
    }
    let small = ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;

    let r: Vec<f64> = (0..40).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let single = ewe(&[&r], EweOptions::default()).map_err(|e| e.to_string())?;
    let copies = ewe(&[&r, &r, &r], EweOptions::default()).map_err(|e| e.to_string())?;
    let mean_of_copies: Vec<f64> = r.iter().map(|v| (v + v + v) / 3.0).collect();

    let ok = worst < 1e-10 && (small - 4.0 / 7.0).abs() < 1e-12 && single.values == r && copies.values == mean_of_copies;
    check(
        ok,
        format!("ccc vs direct max diff {worst:.1e}; ccc([1,2,3],[2,3,4]) = {small}; EWE identities exact"),
        format!(
            "ccc diff {worst:.1e}, small case {small}, single identity {}, equal-weight mean {}",
            single.values == r,
            copies.values == mean_of_copies
        ),
    )
}

// ---- 3 -------------------------------------------------------------------

/// Largest |row sum − 1| over the last axis of every tensor tagged `label`.
fn row_sum_error(g: &Graph<'_>, label: &str) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for v in g.tagged(label) {
        let t = g.value(v);
        let width = *t.shape().last().unwrap();
        for row in t.data().chunks(width) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            rows += 1;
        }
    }
    (rows, worst)
}

fn normalization() -> Outcome {
    let mut worst: f64 = 0.0;
    let (mut att_rows, mut dman_rows) = (0, 0);
    for trial in 0..100u64 {
        for kind in [ModelKind::Mft, ModelKind::Sft] {
            let mut cfg = toy_config(kind, ModalitySet::all(), trial);
            cfg.causal = trial % 2 == 1;
            let model = build_model(cfg).map_err(|e| e.to_string())?;
            let mut rng = RngState::with_stream(trial, 3);
            let n = 2 + rng.below(7);
            let inputs = toy_inputs(&model.config, n, &mut rng).map_err(|e| e.to_string())?;
            let mut g = Graph::train(&model.params, RngState::with_stream(trial, 4));
            model.forward(&mut g, &inputs).map_err(|e| e.to_string())?;
            let (r, e) = row_sum_error(&g, ATTENTION_TAG);
            att_rows += r;
            worst = worst.max(e);
            let (r, e) = row_sum_error(&g, DMAN_TAG);
            dman_rows += r;
            worst = worst.max(e);
        }
    }
    check(
        worst <= 1e-12 && att_rows > 0 && dman_rows > 0,
        format!("{att_rows} attention rows, {dman_rows} DMAN rows; max |sum − 1| = {worst:.1e}"),
        format!("max |sum − 1| = {worst:.1e} over {att_rows} attention / {dman_rows} DMAN rows"),
    )
}

// ---- 4 -------------------------------------------------------------------

fn random_tensor(rng: &mut RngState, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, scale)).collect()).unwrap()
}

fn structural() -> Outcome {
    // permutation equivariance without positions
    let mut perm_err: f64 = 0.0;
    for seed in 0..10u64 {
        let mut cfg = toy_config(ModelKind::B2Trans, ModalitySet::all(), seed);
        cfg.positional = PositionalMode::None;
        let model = build_model(cfg).map_err(|e| e.to_string())?;
        let mut rng = RngState::with_stream(seed, 9);
        let n = 6;
        let inputs = toy_inputs(&model.config, n, &mut rng).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let base = model.predict(&inputs).map_err(|e| e.to_string())?;
        let shuffled = model.predict(&inputs.permuted(&perm).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for (i, &p) in perm.iter().enumerate() {
            perm_err = perm_err.max((shuffled.values[i] - base.values[p]).abs());
        }
    }

    // convex-combination bounds
    let mut violations = 0;
    let mut rng = RngState::new(44);
    for draw in 0..1000u64 {
        let d = 2 + rng.below(6);
        let gate = if draw % 2 == 0 { GateKind::Softmax } else { GateKind::Sigmoid };
        let mut store = ParamStore::new();
        let mut init_rng = RngState::new(draw);
        let e = Embedder::new(
            &mut Init::new(&mut store, &mut init_rng),
            "e",
            EmbedderConfig {
                modality: Modality::Visual,
                input_dim: 1,
                n_max: 2,
                d_out: d,
                kernel: 2,
                dropout: 0.0,
                gate,
            },
        )
        .map_err(|e| e.to_string())?;
        let x = random_tensor(&mut rng, &[3, d], 2.0);
        let mut g = Graph::eval(&store);
        let xv = g.constant(x.clone());
        let out = e.highway(&mut g, xv).map_err(|e| e.to_string())?;
        let proj = e.proj.forward(&mut g, xv).map_err(|e| e.to_string())?;
        let (o, p) = (g.value(out).data().to_vec(), g.value(proj).data().to_vec());
        for ((o, p), x) in o.iter().zip(&p).zip(x.data()) {
            if *o < p.min(*x) - 1e-12 || *o > p.max(*x) + 1e-12 {
                violations += 1;
            }
        }

        let n = 1 + rng.below(6);
        let dk = 1 + rng.below(4);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut rng, &[n, d], 1.5));
        let wq = g.constant(random_tensor(&mut rng, &[d, dk], 1.0));
        let wk = g.constant(random_tensor(&mut rng, &[d, dk], 1.0));
        let wv = g.constant(random_tensor(&mut rng, &[d, dk], 1.0));
        let (out, _) = attention_single_head(&mut g, x, wq, wk, wv, draw % 3 == 0).map_err(|e| e.to_string())?;
        let v = g.matmul(x, wv).map_err(|e| e.to_string())?;
        let (o, v) = (g.value(out).clone(), g.value(v).clone());
        for i in 0..n {
            for j in 0..dk {
                let col: Vec<f64> = (0..n).map(|r| v.at(r, j)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if o.at(i, j) < lo - 1e-12 || o.at(i, j) > hi + 1e-12 {
                    violations += 1;
                }
            }
        }
    }
    check(
        perm_err < 1e-9 && violations == 0,
        format!("B2 permutation max abs diff {perm_err:.1e}; 0 bound violations in 1000 draws"),
        format!("B2 permutation max abs diff {perm_err:.1e}; {violations} bound violations"),
    )
}

// ---- 5, 6 ----------------------------------------------------------------

struct Learned {
    untrained: f64,
    trained: EvalReport,
    history: TrainHistory,
    secs: f64,
}

fn fit_plan(corpus: &Corpus, split: &Split, cfg: &mut ModelConfig) -> attend_affect::Result<()> {
    let mut plan = WindowPlan::default();
    let clips = split.clips(corpus, Partition::Train);
    plan.fit(clips.iter().map(|c| (&c.streams, c.duration)), cfg.kernel)?;
    cfg.window = plan;
    Ok(())
}

fn learn(kind: ModelKind, corpus: &Corpus, split: &Split, budget: f64) -> attend_affect::Result<Learned> {
    let mut cfg = ModelConfig::desk(kind, ModalitySet::all(), corpus.meta.dims.clone());
    fit_plan(corpus, split, &mut cfg)?;
    let mut model = build_model(cfg)?;
    let start = Instant::now();
    let untrained = evaluate(&model, corpus, split, Partition::Test, None)?.mean;
    let tc = TrainConfig {
        time_budget: Some(budget),
        ..TrainConfig::default()
    };
    let history = train(&mut model, corpus, split, &tc)?;
    let trained = evaluate(&model, corpus, split, Partition::Test, Some(&history))?;
    Ok(Learned {
        untrained,
        trained,
        history,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn learn_corpus() -> attend_affect::Result<(Corpus, Split, f64)> {
    let corpus = generate_synthetic(&SynthConfig {
        targets: 20,
        duration_mean: 120.0,
        duration_jitter: 0.0,
        observer_noise: 0.15,
        seed: 5,
        ..SynthConfig::default()
    })?;
    let split = split_by_target(&corpus, [0.6, 0.2, 0.2], 5)?;
    let human: Vec<f64> = split
        .clips(&corpus, Partition::Test)
        .iter()
        .map(|c| c.human_benchmark())
        .collect::<attend_affect::Result<_>>()?;
    Ok((corpus, split, human.iter().sum::<f64>() / human.len() as f64))
}

fn learnability(mft: &Result<Learned, String>, human: f64) -> Outcome {
    let r = mft.as_ref().map_err(|e| e.clone())?;
    let gain = r.trained.mean - r.untrained;
    let detail = format!(
        "MFT test CCC {:.3} ± {:.3} (untrained {:.3}, gain {:.3}, human {:.3}); best epoch {} of {}, {:.0}s",
        r.trained.mean,
        r.trained.std,
        r.untrained,
        gain,
        human,
        r.history.best_epoch,
        r.history.epochs.len() - 1,
        r.secs
    );
    check(r.trained.mean >= 0.5 && gain >= 0.4 && r.secs < 900.0, detail.clone(), detail)
}

fn trend(mft: &Result<Learned, String>, b1: &Result<Learned, String>) -> Outcome {
    let (m, b) = match (mft, b1) {
        (Ok(m), Ok(b)) => (m, b),
        (Err(e), _) | (_, Err(e)) => return Err(e.clone()),
    };
    let detail = format!(
        "MFT {:.3} vs B1-LSTM {:.3} test CCC (corpus seed 5, split seed 5, model seed 0)",
        m.trained.mean, b.trained.mean
    );
    check(m.trained.mean >= b.trained.mean, detail.clone(), detail)
}

// ---- 7 -------------------------------------------------------------------

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap()
}

fn small_run() -> attend_affect::Result<(Corpus, Split, Model, TrainHistory, EvalReport)> {
    let corpus = generate_synthetic(&SynthConfig {
        targets: 6,
        duration_mean: 30.0,
        duration_jitter: 5.0,
        observers: 4,
        seed: 77,
        ..SynthConfig::default()
    })?;
    let split = split_by_target(&corpus, [0.6, 0.2, 0.2], 77)?;
    let mut cfg = ModelConfig::desk(ModelKind::Mft, ModalitySet::all(), corpus.meta.dims.clone());
    cfg.seed = 77;
    fit_plan(&corpus, &split, &mut cfg)?;
    let mut model = build_model(cfg)?;
    let tc = TrainConfig {
        max_epochs: 3,
        seed: 77,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &corpus, &split, &tc)?;
    let report = evaluate(&model, &corpus, &split, Partition::Test, Some(&history))?;
    Ok((corpus, split, model, history, report))
}

fn determinism() -> Outcome {
    let (c1, s1, m1, h1, r1) = small_run().map_err(|e| e.to_string())?;
    let (c2, s2, _, h2, r2) = small_run().map_err(|e| e.to_string())?;
    let corpus_same = c1 == c2;
    let history_same = json(&h1) == json(&h2) && s1 == s2;
    let report_same = json(&r1) == json(&r2);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mft.json");
    m1.save(&path).map_err(|e| e.to_string())?;
    let loaded = Model::load(&path).map_err(|e| e.to_string())?;
    let r3 = evaluate(&loaded, &c1, &s1, Partition::Test, Some(&h1)).map_err(|e| e.to_string())?;
    let roundtrip_same = json(&r1) == json(&r3);

    check(
        corpus_same && history_same && report_same && roundtrip_same,
        format!("corpus, history ({} epochs) and report reproduce bit-exactly; checkpoint round trip exact", h1.epochs.len() - 1),
        format!(
            "corpus {corpus_same}, history {history_same}, report {report_same}, checkpoint round trip {roundtrip_same}"
        ),
    )
}

// ---- 8 -------------------------------------------------------------------

fn protocol() -> Outcome {
    let corpus = generate_synthetic(&SynthConfig {
        duration_mean: 20.0,
        duration_jitter: 0.0,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let split = split_by_target(&corpus, [0.6, 0.2, 0.2], 0).map_err(|e| e.to_string())?;
    let sizes = (split.train.len(), split.val.len(), split.test.len());
    let disjoint = split.check_disjoint().is_ok()
        && split.train.iter().all(|t| !split.val.contains(t) && !split.test.contains(t))
        && split.val.iter().all(|t| !split.test.contains(t));
    let total = corpus.targets().len();
    check(
        total == 49 && sizes == (29, 10, 10) && disjoint,
        format!("{total} targets → {}/{}/{}, pairwise disjoint", sizes.0, sizes.1, sizes.2),
        format!("{total} targets → {sizes:?}, disjoint {disjoint}"),
    )
}

fn main() {
    // Cargo passes harness flags such as `--nocapture`; listing mode gets nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    let mut report = |n: u32, name: &str, gated: bool, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS — {detail}"),
            Err(detail) if gated => {
                println!("criterion {n} ({name}): FAIL — {detail}");
                failed.push(n);
            }
            Err(detail) => println!("criterion {n} ({name}): FAIL (reported, not gated) — {detail}"),
        }
    };

    report(1, "gradient fidelity", true, gradient_fidelity());
    report(2, "metric oracles", true, metric_oracles());
    report(3, "attention/gate normalization", true, normalization());
    report(4, "structural invariants", true, structural());

    let (mft, b1, human) = match learn_corpus() {
        Ok((corpus, split, human)) => (
            learn(ModelKind::Mft, &corpus, &split, 840.0).map_err(|e| e.to_string()),
            learn(ModelKind::B1Lstm, &corpus, &split, 840.0).map_err(|e| e.to_string()),
            human,
        ),
        Err(e) => (Err(e.to_string()), Err(e.to_string()), f64::NAN),
    };
    report(5, "learnability", true, learnability(&mft, human));
    report(6, "MFT ≥ B1-LSTM trend", false, trend(&mft, &b1));
    report(7, "determinism and round trip", true, determinism());
    report(8, "dataset protocol", true, protocol());

    if !failed.is_empty() {
        println!("acceptance: {} gated criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all gated criteria passed");
}
