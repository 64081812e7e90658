//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::Instant;

use fgsi::autodiff::{softmax, ParamStore, Tape, Var};
use fgsi::bag_attention::{bag_repr, gate_and_normalize};
use fgsi::checkpoint::{decode, encode};
use fgsi::classifier::{predict_probs, ClassifierParams};
use fgsi::config::ModelConfig;
use fgsi::embedding::{intra_attention, segment_vectors, SegmentSpans};
use fgsi::encoder::{convolve, piecewise_max_pool, ConvBank, FilterBank};
use fgsi::eval::{evaluate, p_at_n, pn_report, pr_auc, pr_curve, write_pr_csv, PredictionRecord};
use fgsi::gradcheck::{check_all, max_loss_change, sentence_word_elements, tiny_fixture};
use fgsi::pipeline::{ablation_config, build_model, eval_bags, train_and_evaluate, training_bags};
use fgsi::synth::{generate_synthetic, SynthConfig};
use fgsi::trainer::{adam_step, AdamState, Trainer};
use fgsi::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn rand_spans(rng: &mut ChaCha8Rng, m: usize) -> SegmentSpans {
    let a = rng.gen_range(0..m - 1);
    let b = rng.gen_range(a + 1..m);
    SegmentSpans::from_boundaries(a, b, m)
}

// 1 ------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut fx = tiny_fixture(1, -1.0);
    let report = check_all(&mut fx.model, &fx.bag, 1e-5, 1e-4).expect("grad check runs");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        report.passed() && secs < 60.0,
        format!(
            "{} elements, {} failed, max rel err {:.2e}, {:.2}s",
            report.entries.len(),
            report.failures().count(),
            report.max_rel_error(),
            secs
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn gate_boundary() -> Outcome {
    let mut fx = tiny_fixture(1, 0.0);
    let j = fx.filtered[0];
    let elements = sentence_word_elements(&fx.model, &fx.bag, j);
    let change = max_loss_change(&mut fx.model, &fx.bag, &elements, 1e-5);
    let report = check_all(&mut fx.model, &fx.bag, 1e-5, 1e-4).expect("grad check runs");
    outcome(
        change < 1e-10 && report.passed() && !elements.is_empty(),
        format!(
            "sentence {j} filtered; max loss change over {} elements {:.1e}; survivor check max rel err {:.2e}",
            elements.len(),
            change,
            report.max_rel_error()
        ),
    )
}

// 3 ------------------------------------------------------------------------

const TRIALS: usize = 1000;

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (x.rows(), x.cols());
    let (n, width) = (w.shape()[0], w.shape()[1]);
    let pad = (width - 1) / 2;
    let mut out = vec![0.0; n * m];
    for f in 0..n {
        for i in 0..m {
            let mut acc = b.data()[f];
            for d in 0..width {
                let row = i as isize + d as isize - pad as isize;
                if row < 0 || row >= m as isize {
                    continue;
                }
                for c in 0..k {
                    acc += w.data()[(f * width + d) * k + c] * x.data()[row as usize * k + c];
                }
            }
            out[f * m + i] = acc;
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn oracle_suites() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 5];
    for _ in 0..TRIALS {
        // Convolution.
        let (m, k, width, n) = (
            rng.gen_range(2..16),
            rng.gen_range(1..7),
            rng.gen_range(1..6),
            rng.gen_range(1..5),
        );
        let x = rand_tensor(&mut rng, &[m, k]);
        let w = rand_tensor(&mut rng, &[n, width, k]);
        let b = rand_tensor(&mut rng, &[n]);
        let expected = conv_oracle(&x, &w, &b);
        let mut ps = ParamStore::new();
        let bank = FilterBank {
            banks: vec![ConvBank {
                width,
                weight: ps.insert("w", w).unwrap(),
                bias: ps.insert("b", b).unwrap(),
            }],
        };
        let mut tape = Tape::new(&ps);
        let xv = tape.constant(x);
        let maps = convolve(&mut tape, xv, &bank).unwrap();
        worst[0] = worst[0].max(max_abs_diff(tape.value(maps[0]).data(), &expected));

        // Piecewise max pooling.
        let map = rand_tensor(&mut rng, &[n, m]);
        let spans = rand_spans(&mut rng, m);
        let mut expected = Vec::new();
        for f in 0..n {
            for piece in &spans.pieces {
                let row = map.row(f);
                expected.push(
                    piece
                        .clone()
                        .map(|j| row[j])
                        .fold(None, |acc: Option<f64>, v| {
                            Some(acc.map_or(v, |a| a.max(v)))
                        })
                        .unwrap_or(0.0),
                );
            }
        }
        let mv = tape.constant(map);
        let pooled = piecewise_max_pool(&mut tape, &[mv], &spans).unwrap();
        worst[1] = worst[1].max(max_abs_diff(tape.value(pooled).data(), &expected));

        // Intra-sentence attention.
        let words = rand_tensor(&mut rng, &[m, k]);
        let query = rand_tensor(&mut rng, &[k]);
        let cos = |v: &[f64], q: &[f64]| {
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nv == 0.0 || nq == 0.0 {
                0.0
            } else {
                v.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (nv * nq)
            }
        };
        let seg_means: Vec<Vec<f64>> = spans
            .pieces
            .iter()
            .map(|p| {
                let mut mean = vec![0.0; k];
                for r in p.clone() {
                    for (acc, v) in mean.iter_mut().zip(words.row(r)) {
                        *acc += v;
                    }
                }
                let len = p.len().max(1) as f64;
                mean.iter()
                    .map(|v| if p.is_empty() { 0.0 } else { v / len })
                    .collect()
            })
            .collect();
        let expected = softmax(
            &seg_means
                .iter()
                .map(|s| cos(s, query.data()))
                .collect::<Vec<_>>(),
        );
        let wv = tape.constant(words);
        let qv = tape.constant(query);
        let segs = segment_vectors(&mut tape, wv, &spans).unwrap();
        let alpha = intra_attention(&mut tape, &segs, qv).unwrap();
        worst[2] = worst[2].max(max_abs_diff(tape.value(alpha).data(), &expected));

        // Bag attention.
        let t = rng.gen_range(1..6);
        let d = rng.gen_range(1..8);
        let feats: Vec<Tensor> = (0..t).map(|_| rand_tensor(&mut rng, &[d])).collect();
        let q = rand_tensor(&mut rng, &[d]);
        let beta = rng.gen_range(-1.0..1.0);
        let e: Vec<f64> = feats.iter().map(|f| cos(f.data(), q.data())).collect();
        let mut keep: Vec<usize> = (0..t).filter(|&i| e[i] >= beta).collect();
        if keep.is_empty() {
            let best = (0..t).fold(0, |b, i| if e[i] > e[b] { i } else { b });
            keep.push(best);
        }
        let gamma = softmax(&keep.iter().map(|&i| e[i]).collect::<Vec<_>>());
        let mut g = vec![0.0; d];
        for (gi, &i) in gamma.iter().zip(&keep) {
            for (acc, v) in g.iter_mut().zip(feats[i].data()) {
                *acc += gi * v;
            }
        }
        let fv: Vec<Var> = feats.into_iter().map(|f| tape.constant(f)).collect();
        let qv = tape.constant(q);
        let ev: Vec<Var> = fv.iter().map(|&f| tape.cosine(f, qv).unwrap()).collect();
        let weights = gate_and_normalize(&mut tape, &ev, beta).unwrap();
        let gv = bag_repr(&mut tape, &fv, &weights).unwrap();
        let survivors_match = weights.survivors == keep;
        let diff = max_abs_diff(tape.value(weights.gamma).data(), &gamma)
            .max(max_abs_diff(tape.value(gv).data(), &g));
        worst[3] = worst[3].max(if survivors_match { diff } else { f64::INFINITY });

        // Classifier.
        let h = rng.gen_range(2..6);
        let wo = rand_tensor(&mut rng, &[h, d]);
        let bo = rand_tensor(&mut rng, &[h]);
        let gin = rand_tensor(&mut rng, &[d]);
        let z: Vec<f64> = (0..h)
            .map(|r| {
                bo.data()[r]
                    + wo.row(r)
                        .iter()
                        .zip(gin.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let expected = softmax(&z);
        let mut ps = ParamStore::new();
        let cp = ClassifierParams {
            weight: ps.insert("w", wo).unwrap(),
            bias: ps.insert("b", bo).unwrap(),
        };
        let mut tape = Tape::new(&ps);
        let gv = tape.constant(gin);
        let p = predict_probs(&mut tape, gv, &cp).unwrap();
        worst[4] = worst[4].max(max_abs_diff(tape.value(p).data(), &expected));
    }
    let names = ["convolve", "pool", "alpha", "gamma/g", "classifier"];
    outcome(
        worst.iter().all(|w| *w <= 1e-12),
        format!(
            "{TRIALS} trials each; max abs diff {}",
            names
                .iter()
                .zip(worst)
                .map(|(n, w)| format!("{n} {w:.1e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ps = ParamStore::new();
    let mut worst = [0.0f64; 3];
    for _ in 0..10_000 {
        let mut tape = Tape::new(&ps);
        let m = rng.gen_range(2..20);
        let k = rng.gen_range(1..10);
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let words = Tensor::uniform(&[m, k], scale, &mut rng);
        let q = Tensor::uniform(&[k], scale, &mut rng);
        let spans = rand_spans(&mut rng, m);
        let wv = tape.constant(words);
        let qv = tape.constant(q);
        let segs = segment_vectors(&mut tape, wv, &spans).unwrap();
        let alpha = intra_attention(&mut tape, &segs, qv).unwrap();
        worst[0] = worst[0].max((tape.value(alpha).data().iter().sum::<f64>() - 1.0).abs());

        let t = rng.gen_range(1..8);
        let e: Vec<Var> = (0..t)
            .map(|_| tape.constant(Tensor::scalar(rng.gen_range(-1.0..=1.0))))
            .collect();
        let w = gate_and_normalize(&mut tape, &e, rng.gen_range(-1.0..=1.0)).unwrap();
        worst[1] = worst[1].max((tape.value(w.gamma).data().iter().sum::<f64>() - 1.0).abs());

        let h = rng.gen_range(2..10);
        let z = Tensor::uniform(&[h], 50.0 * scale.min(10.0), &mut rng);
        let zv = tape.constant(z);
        let p = tape.softmax(zv).unwrap();
        worst[2] = worst[2].max((tape.value(p).data().iter().sum::<f64>() - 1.0).abs());
    }
    outcome(
        worst.iter().all(|w| *w <= 1e-9),
        format!(
            "10000 inputs; max |sum-1| alpha {:.1e}, gamma {:.1e}, probs {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn adam() -> Outcome {
    let mut ps = ParamStore::new();
    let id = ps.insert("w", Tensor::scalar(0.0)).unwrap();
    ps.grad_mut(id).data_mut()[0] = 0.5;
    let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
    adam_step(&mut ps, &mut st, 0.01).unwrap();
    let update = ps.value(id).item();
    let trace_ok = (update - (-0.01)).abs() < 1e-9;

    let mut ps = ParamStore::new();
    let id = ps.insert("w", Tensor::scalar(1.0)).unwrap();
    let mut st = AdamState::new(&ps, 0.9, 0.999, 1e-8);
    let mut reached = None;
    for step in 1..=2000 {
        let w = ps.value(id).item();
        ps.grad_mut(id).data_mut()[0] = 2.0 * w;
        adam_step(&mut ps, &mut st, 0.01).unwrap();
        if reached.is_none() && ps.value(id).item().abs() < 1e-3 {
            reached = Some(step);
        }
    }
    let final_w = ps.value(id).item();
    outcome(
        trace_ok && reached.is_some() && final_w.abs() < 1e-3,
        format!(
            "first update {update:.11}; |w| < 1e-3 first at step {}, final |w| {:.1e}",
            reached.map_or("never".into(), |s| s.to_string()),
            final_w.abs()
        ),
    )
}

// 6 ------------------------------------------------------------------------

/// Desk-scale model used for the synthetic experiments. The gate threshold
/// was chosen on validation seeds 11-13, disjoint from the seeds below.
fn experiment_config(beta: f64) -> ModelConfig {
    ModelConfig {
        word_dim: 16,
        pos_dim: 4,
        window_widths: vec![3],
        filters_per_width: 32,
        beta,
        batch_size: 16,
        epochs: 15,
        pos_clip: 30,
        max_sentence_len: 40,
        ..ModelConfig::default()
    }
}

const EXPERIMENT_BETA: f64 = -0.25;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn synth(seed: u64, noise: f64) -> fgsi::synth::SynthCorpus {
    generate_synthetic(&SynthConfig {
        seed,
        num_relations: 8,
        vocab_size: 500,
        train_bags: 600,
        test_bags: 200,
        noise_rate: noise,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config")
}

fn denoising() -> Vec<(String, Outcome)> {
    let start = Instant::now();
    let full = experiment_config(EXPERIMENT_BETA);

    let mut clean = Vec::new();
    for seed in SEEDS {
        let data = synth(seed, 0.0);
        let (_, ev) =
            train_and_evaluate(&full, &data.train, &data.test, None, seed, |_| {}).unwrap();
        clean.push(ev.p_at(50).precision);
    }
    let a_ok = clean.iter().all(|p| *p >= 0.90) && full.epochs <= 50;

    let mut wins = 0;
    let mut pairs = Vec::new();
    let mut default_wins = 0;
    let mut gated = Vec::new();
    for seed in SEEDS {
        let data = synth(seed, 0.30);
        let mut last_gated = 0.0;
        let (_, ev_full) = train_and_evaluate(&full, &data.train, &data.test, None, seed, |r| {
            last_gated = r.gated_fraction
        })
        .unwrap();
        let (_, ev_abl) = train_and_evaluate(
            &ablation_config(&full),
            &data.train,
            &data.test,
            None,
            seed,
            |_| {},
        )
        .unwrap();
        let (_, ev_def) = train_and_evaluate(
            &experiment_config(0.0),
            &data.train,
            &data.test,
            None,
            seed,
            |_| {},
        )
        .unwrap();
        wins += usize::from(ev_full.auc > ev_abl.auc);
        default_wins += usize::from(ev_def.auc > ev_abl.auc);
        gated.push(last_gated);
        pairs.push(format!("{:.4}/{:.4}", ev_full.auc, ev_abl.auc));
    }
    let secs = start.elapsed().as_secs_f64();
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|p| format!("{p:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    vec![
        (
            "6a".into(),
            outcome(a_ok, format!("noise 0, {} epochs, P@50 per seed: {}", full.epochs, fmt(&clean))),
        ),
        (
            "6b".into(),
            outcome(
                wins >= 4 && secs < 900.0,
                format!(
                    "noise 0.30, beta {EXPERIMENT_BETA}: full beats ablation on {wins}/5 seeds (AUC full/ablated {}); final gated fraction {}; at beta 0 full wins {default_wins}/5; {secs:.0}s total",
                    pairs.join(" "),
                    fmt(&gated)
                ),
            ),
        ),
    ]
}

fn loss_decreases() -> Outcome {
    let mut ok = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let data = generate_synthetic(&SynthConfig {
            seed,
            num_relations: 4,
            vocab_size: 80,
            train_bags: 60,
            test_bags: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let config = ModelConfig {
            epochs: 30,
            batch_size: 8,
            ..experiment_config(0.0)
        };
        let model = build_model(&config, &data.train, None, seed).unwrap();
        let bags = training_bags(&model, &data.train).unwrap();
        let mut trainer = Trainer::new(model, seed, bags.len());
        let mut losses = Vec::new();
        trainer.fit(&bags, |r| losses.push(r.mean_loss)).unwrap();
        let decreasing = losses[..5].windows(2).all(|w| w[1] < w[0]);
        ok += usize::from(decreasing);
        detail.push(if decreasing { "y" } else { "n" });
    }
    outcome(
        ok >= 4,
        format!(
            "tiny corpus, 30 epochs: loss strictly decreasing over epochs 1-5 on {ok}/5 seeds ({})",
            detail.join("")
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn run_reports(seed: u64, threads: usize) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| {
        let data = synth(seed, 0.3);
        let config = ModelConfig {
            epochs: 2,
            ..experiment_config(0.0)
        };
        let (trainer, ev) =
            train_and_evaluate(&config, &data.train, &data.test, None, seed, |_| {}).unwrap();
        let mut csv = Vec::new();
        write_pr_csv(&mut csv, &ev.records, &ev.curve).unwrap();
        let json = serde_json::to_vec(&pn_report(
            &ev,
            &[50, 100],
            serde_json::to_value(&config).unwrap(),
            seed,
        ))
        .unwrap();
        (encode(&trainer), csv, json)
    })
}

fn determinism() -> Outcome {
    let (ck1, csv1, json1) = run_reports(7, 1);
    let (ck2, csv2, json2) = run_reports(7, 4);
    let identical = ck1 == ck2 && csv1 == csv2 && json1 == json2;

    // Resume at step k against an uninterrupted run.
    let data = synth(8, 0.3);
    let config = ModelConfig {
        epochs: 3,
        ..experiment_config(0.0)
    };
    let fresh = || {
        let model = build_model(&config, &data.train, None, 8).unwrap();
        let bags = training_bags(&model, &data.train).unwrap();
        (Trainer::new(model, 8, bags.len()), bags)
    };
    let (mut straight, bags) = fresh();
    straight.fit(&bags, |_| {}).unwrap();

    let k = 45; // mid-way through the second epoch
    let (mut first, _) = fresh();
    while first.adam.t < k {
        first.train_until(&bags, Some(k)).unwrap();
    }
    let bytes = encode(&first);
    let mut resumed = decode(&bytes).unwrap();
    let round_trip = encode(&resumed) == bytes;
    resumed.fit(&bags, |_| {}).unwrap();
    let resumed_ok = encode(&resumed) == encode(&straight);

    let test = eval_bags(&straight.model, &data.test).unwrap();
    let e1 = evaluate(&straight.model, &test).unwrap();
    let e2 = evaluate(&resumed.model, &test).unwrap();
    outcome(
        identical && round_trip && resumed_ok && e1.records == e2.records,
        format!(
            "repeat runs identical (1 vs 4 threads): {identical}; save-load-save identical: {round_trip}; resume at step {k} of {} identical: {resumed_ok}",
            straight.adam.t
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn metrics() -> Outcome {
    let rec = |head: &str, score: f64, correct: bool| PredictionRecord {
        head: head.into(),
        tail: "t".into(),
        relation: "r".into(),
        score,
        correct,
    };
    let records = vec![
        rec("a", 0.9, true),
        rec("b", 0.6, false),
        rec("c", 0.3, true),
    ];
    let curve = pr_curve(&records, 2);
    let expected = [(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)];
    let curve_ok = curve.len() == 3
        && curve
            .iter()
            .zip(expected)
            .all(|(p, (pr, rc))| (p.precision - pr).abs() < 1e-12 && (p.recall - rc).abs() < 1e-12);
    let auc = pr_auc(&curve);
    let auc_ok = (auc - (0.5 * 1.0 + 0.0 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12;
    let p2 = p_at_n(&records, 2);
    let p_ok =
        p2.precision == 0.5 && !p2.truncated && p_at_n(&records, 3).precision == curve[2].precision;
    outcome(
        curve_ok && auc_ok && p_ok,
        format!(
            "curve {:?}; auc {auc:.4}; P@2 {}",
            curve
                .iter()
                .map(|p| (round3(p.precision), round3(p.recall)))
                .collect::<Vec<_>>(),
            p2.precision
        ),
    )
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(String, Outcome)> = vec![
        ("1".into(), gradient_check()),
        ("2".into(), gate_boundary()),
        ("3".into(), oracle_suites()),
        ("4".into(), normalization()),
        ("5".into(), adam()),
    ];
    results.extend(denoising());
    results.push(("6c".into(), loss_decreases()));
    results.push(("7".into(), determinism()));
    results.push(("8".into(), metrics()));

    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "criterion {name:<3} {}  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
