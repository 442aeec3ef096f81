//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ftvsr::attention::{
    freq_attention, gfa, grid_attention, init_projections, lfa, AttentionConfig, Grouping, Projections,
};
use ftvsr::dct::{from_spectral, to_spectral_aligned, BlockDct};
use ftvsr::degradation::{degrade, synthetic_clip, DegradationSpec};
use ftvsr::grad_suite;
use ftvsr::metrics::{psnr, ssim};
use ftvsr::model::{Augment, Model, Network};
use ftvsr::params::ParamStore;
use ftvsr::tokenizer::{detokenize, tokenize};
use ftvsr::toy::{train_toy, ToyCorpus, ToyRun, ToySetup};
use ftvsr::video_attention::{
    attend_divided, attend_joint, attend_sf, attend_tf, InnerAttention, Order, SchemeKind, StageWeights,
};
use ftvsr::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn dct_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut round, mut parseval, mut ortho, mut closed_form) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for b in [2usize, 4, 8] {
        let dct = BlockDct::new(b).unwrap();
        let basis = dct.basis();
        let gram = basis.matmul(&basis.transpose_last().unwrap()).unwrap();
        ortho = ortho.max(max_diff(&gram, &Tensor::eye(b)));
        // Closed-form DCT-II rows.
        for u in 0..b {
            let alpha = if u == 0 { (1.0 / b as f64).sqrt() } else { (2.0 / b as f64).sqrt() };
            for x in 0..b {
                let expect = alpha * ((2 * x + 1) as f64 * u as f64 * PI / (2 * b) as f64).cos();
                closed_form = closed_form.max((basis.get(&[u, x]).unwrap() - expect).abs());
            }
        }
    }
    for i in 0..1000 {
        let b = [2usize, 4, 8][i % 3];
        let dct = BlockDct::new(b).unwrap();
        let scale = rng.random_range(0.01..100.0);
        let patch = Tensor::from_fn(&[b, b], |_| scale * rng.random_range(-1.0..1.0));
        let coeffs = dct.dct2(&patch).unwrap();
        round = round.max(max_diff(&dct.idct2(&coeffs).unwrap(), &patch));
        let energy = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        parseval = parseval.max((energy(&coeffs) - energy(&patch)).abs() / energy(&patch));
    }
    let elapsed = start.elapsed();
    verdict(
        round < 1e-9 && parseval < 1e-6 && ortho <= 1e-10 && closed_form <= 1e-12 && secs(elapsed) < 5.0,
        format!(
            "round trip {:.1e} (<1e-9), Parseval {:.1e} (<1e-6), basis orthonormality {:.1e} (<=1e-10), closed-form basis {:.1e}, {:.2} s (<5 s)",
            round,
            parseval,
            ortho,
            closed_form,
            secs(elapsed)
        ),
    )
}

fn tokenization_round_trip() -> Verdict {
    let mut cases = 0;
    let mut failures = Vec::new();
    for b in [2usize, 4] {
        for k in [1usize, 2] {
            for t in [1usize, 3] {
                for c in [1usize, 3] {
                    // Odd extents exercise padding.
                    let (h, w) = (b * k * 2 + 1, b * k + 3);
                    let frames = random(&[t, c, h, w], (b * 1000 + k * 100 + t * 10 + c) as u64);
                    let map = to_spectral_aligned(&frames, b, k).unwrap();
                    let grid = tokenize(&map, k).unwrap();
                    let back = detokenize(&grid).unwrap();
                    let pixels = from_spectral(&back).unwrap();
                    cases += 1;
                    if back != map || max_diff(&pixels, &frames) > 1e-12 {
                        failures.push(format!("B={} K={} T={} C={}", b, k, t, c));
                    }
                }
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!("{} configurations, tokens bit-exact; failures: {:?}", cases, failures),
    )
}

/// Loop-based multi-head attention, independent of the tensor kernels.
fn loop_attention(q: &Tensor, k: &Tensor, v: &Tensor, store: &ParamStore, prefix: &str, heads: usize) -> Tensor {
    let w = |n: &str| store.get(&format!("{}.{}", prefix, n)).unwrap().clone();
    let project = |x: &Tensor, m: &Tensor| {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let e = m.shape()[1];
        Tensor::from_fn(&[n, e], |i| {
            let (r, c) = (i / e, i % e);
            (0..d).map(|j| x.data()[r * d + j] * m.data()[j * e + c]).sum()
        })
    };
    let (qp, kp, vp) = (project(q, &w("wq")), project(k, &w("wk")), project(v, &w("wv")));
    let (nq, nk, d) = (q.shape()[0], k.shape()[0], q.shape()[1]);
    let dk = d / heads;
    let mut cat = Tensor::zeros(&[nq, d]);
    for h in 0..heads {
        for i in 0..nq {
            let scores: Vec<f64> = (0..nk)
                .map(|j| {
                    (0..dk).map(|c| qp.data()[i * d + h * dk + c] * kp.data()[j * d + h * dk + c]).sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dk {
                cat.data_mut()[i * d + h * dk + c] = (0..nk).map(|j| e[j] / z * vp.data()[j * d + h * dk + c]).sum();
            }
        }
    }
    project(&cat, &w("wo"))
}

fn attention_invariants() -> Verdict {
    let d = 4;
    let mut store = ParamStore::new();
    init_projections(&mut store, "a", d, &mut ChaCha8Rng::seed_from_u64(3));
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let p = Projections::bind(&bound, "a").unwrap();
    let cfg = AttentionConfig::new(d, 2).unwrap();

    let mut stochastic = 0.0f64;
    for (i, g) in [Grouping::Global, Grouping::Local, Grouping::Time, Grouping::Joint].into_iter().enumerate() {
        let x = tape.constant(random(&[2, 3, 4, d], 10 + i as u64)).unwrap();
        let w = grid_attention(x, x, x, g, cfg, &p).unwrap().weights.value();
        let nk = *w.shape().last().unwrap();
        for row in w.data().chunks(nk) {
            stochastic = stochastic.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let (nq, nk) = (5, 7);
    let q = random(&[nq, d], 20);
    let k = random(&[nk, d], 21);
    let v = random(&[nk, d], 22);
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let permute = |t: &Tensor| {
        let mut data = Vec::new();
        for &r in &perm {
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        Tensor::new(vec![nk, d], data).unwrap()
    };
    let c = |t: &Tensor| tape.constant(t.clone()).unwrap();
    let base = freq_attention(c(&q), c(&k), c(&v), &p).unwrap().output.value();
    let permuted = freq_attention(c(&q), c(&permute(&k)), c(&permute(&v)), &p).unwrap().output.value();
    let permutation = max_diff(&base, &permuted);

    let one_k = random(&[1, d], 23);
    let one_v = random(&[1, d], 24);
    let single = freq_attention(c(&q), c(&one_k), c(&one_v), &p).unwrap().output.value();
    let value_path = one_v.matmul(store.get("a.wv").unwrap()).unwrap().matmul(store.get("a.wo").unwrap()).unwrap();
    let mut single_key = 0.0f64;
    for r in 0..nq {
        let row = Tensor::new(vec![1, d], single.data()[r * d..(r + 1) * d].to_vec()).unwrap();
        single_key = single_key.max(max_diff(&row, &value_path));
    }

    let grid = random(&[1, 3, 4, d], 25);
    let local = lfa(c(&grid), cfg, &p).unwrap().output.value().reshape(&[12, d]).unwrap();
    let flat = grid.reshape(&[12, d]).unwrap();
    let lfa_flat = max_diff(&local, &loop_attention(&flat, &flat, &flat, &store, "a", 2));

    // Degenerate grids: one frame and one block leave nothing to distinguish
    // the groupings; one frame makes joint attention spatial.
    let w = StageWeights::Plain(p);
    let x = c(&random(&[1, 1, 4, d], 26));
    let s = attend_sf(x, x, cfg, &w).unwrap().value();
    let mut lattice = [
        max_diff(&s, &attend_tf(x, x, cfg, &w).unwrap().value()),
        max_diff(&s, &attend_joint(x, x, cfg, &w).unwrap().value()),
        max_diff(&s, &gfa(x, cfg, &p).unwrap().output.value()),
        max_diff(
            &attend_divided(x, x, x, cfg, Order::SpaceTime, &w, &w).unwrap().second.value(),
            &attend_divided(x, x, x, cfg, Order::TimeSpace, &w, &w).unwrap().second.value(),
        ),
    ]
    .into_iter()
    .fold(0.0f64, f64::max);
    let y = c(&random(&[1, 3, 4, d], 27));
    lattice = lattice.max(max_diff(
        &attend_joint(y, y, cfg, &w).unwrap().value(),
        &attend_sf(y, y, cfg, &w).unwrap().value(),
    ));

    verdict(
        stochastic <= 1e-10 && permutation <= 1e-12 && single_key <= 1e-12 && lfa_flat <= 1e-12 && lattice <= 1e-12,
        format!(
            "row sums {:.1e} (<=1e-10), key/value permutation {:.1e}, single key {:.1e}, lfa vs flattened {:.1e}, lattice {:.1e} (each <=1e-12)",
            stochastic, permutation, single_key, lfa_flat, lattice
        ),
    )
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = grad_suite::run(None).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0f64, f64::max);
    let has_model = reports.iter().any(|r| r.name.starts_with("model"));
    verdict(
        failed.is_empty() && has_model && secs(elapsed) < 60.0,
        format!(
            "{} checks incl. full model, worst relative error {:.1e} (<1e-4), {:.1} s (<60 s); failed: {:?}",
            reports.len(),
            worst,
            secs(elapsed),
            failed
        ),
    )
}

fn residual_identity() -> Verdict {
    let mut checked = 0;
    let mut bad = Vec::new();
    for kind in SchemeKind::ALL {
        for inner in [InnerAttention::Fa, InnerAttention::Dfa] {
            let mut run = ToyRun::new(3, kind);
            run.model.attention = inner;
            let model = Model::new(run.model, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let plan = model.plan(8, 8).unwrap();
            let tape = Tape::new();
            let net = Network::bind(&run.model, &model.params, &tape).unwrap();
            let lr = tape.constant(random(&[1, 3, 8, 8], 6).map(|v| 0.5 + 0.4 * v)).unwrap();
            let state = tape.constant(random(&plan.state_shape(), 7)).unwrap();
            let out = net.forward_frame(&plan, lr, state, None).unwrap();
            checked += 1;
            if out.sr.value() != out.upsampled.value() {
                bad.push(format!("{} {}", kind.name(), inner.name()));
            }
        }
    }
    verdict(
        bad.is_empty(),
        format!("{} scheme/attention variants, output == upsampled frame bit for bit; mismatches: {:?}", checked, bad),
    )
}

fn toy_training() -> Verdict {
    let corpus = ToyCorpus::generate(&ToySetup::default()).unwrap();
    let run = ToyRun::new(3, SchemeKind::SpaceTime);
    let (_, out) = train_toy(&corpus, &run).unwrap();
    let rises = out.moving_average_rises(50);
    let ma = out.moving_average(50);
    verdict(
        rises.is_empty() && out.gain_db() >= 0.5 && secs(out.elapsed) < 900.0,
        format!(
            "{} steps x {} clips: 50-step mean loss {:.5} -> {:.5}, {} rises {:?}; held-out {:.3} dB vs bicubic {:.3} dB, gain {:+.3} dB (>=0.5); {:.0} s (<900 s)",
            run.steps,
            run.batch,
            ma.first().copied().unwrap_or(f64::NAN),
            ma.last().copied().unwrap_or(f64::NAN),
            rises.len(),
            &rises[..rises.len().min(8)],
            out.model_psnr,
            out.bicubic_psnr,
            out.gain_db(),
            secs(out.elapsed)
        ),
    )
}

fn scheme_ablation() -> Verdict {
    let corpus = ToyCorpus::generate(&ToySetup::default()).unwrap();
    let mut rows = Vec::new();
    let mut ok = true;
    for kind in SchemeKind::ALL {
        let mut run = ToyRun::new(3, kind);
        run.steps = 50;
        run.batch = 4;
        run.augment = Augment::Flips;
        match train_toy(&corpus, &run) {
            Ok((_, out)) if out.model_psnr.is_finite() => {
                rows.push(format!("{} {:.3} dB", kind.name(), out.model_psnr));
            }
            Ok(_) => {
                ok = false;
                rows.push(format!("{} non-finite", kind.name()));
            }
            Err(e) => {
                ok = false;
                rows.push(format!("{} error: {}", kind.name(), e));
            }
        }
    }
    let bicubic = corpus.bicubic_psnr(2).unwrap();
    verdict(ok, format!("50 steps x 4 clips, flips, each: {}; bicubic {:.3} dB", rows.join(", "), bicubic))
}

fn degradation_monotonicity() -> Verdict {
    let qs = [0.0, 1.0, 2.0, 4.0, 8.0];
    let sigmas = [0.0, 5.0 / 255.0, 15.0 / 255.0];
    let seeds = 10u64;
    let mut broken = Vec::new();
    let (mut q_means, mut s_means) = (vec![0.0; qs.len()], vec![0.0; sigmas.len()]);
    for seed in 0..seeds {
        let hr = synthetic_clip(100 + seed, 2, 3, 32, 32);
        let clean = degrade(&hr, &DegradationSpec::bi(2), seed).unwrap();
        let score = |spec: &DegradationSpec| psnr(&degrade(&hr, spec, seed).unwrap(), &clean, 1.0).unwrap();
        let by_q: Vec<f64> = qs.iter().map(|&q| score(&DegradationSpec::bi(2).with_quantization(q))).collect();
        let by_s: Vec<f64> = sigmas.iter().map(|&s| score(&DegradationSpec::bi(2).with_noise(s))).collect();
        if by_q.windows(2).any(|w| w[1] > w[0]) {
            broken.push(format!("q seed {}: {:?}", seed, by_q));
        }
        if by_s.windows(2).any(|w| w[1] > w[0]) {
            broken.push(format!("sigma seed {}: {:?}", seed, by_s));
        }
        for (m, v) in q_means.iter_mut().zip(&by_q) {
            *m += v / seeds as f64;
        }
        for (m, v) in s_means.iter_mut().zip(&by_s) {
            *m += v / seeds as f64;
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.2}", x)).collect::<Vec<_>>().join(" >= ");
    verdict(
        broken.is_empty(),
        format!(
            "{} seeds, every seed non-increasing; mean PSNR over q: {}; over sigma: {}; violations: {:?}",
            seeds,
            fmt(&q_means),
            fmt(&s_means),
            broken
        ),
    )
}

fn metrics_closed_form() -> Verdict {
    let a = Tensor::from_fn(&[3, 16, 16], |i| ((i * 29) % 200) as f64 / 255.0);
    let b = a.map(|v| v + 1.0 / 255.0);
    let expect = 20.0 * 255.0f64.log10();
    let p = psnr(&a, &b, 1.0).unwrap();
    let s = ssim(&a, &a, 1.0).unwrap();
    verdict(
        (p - 48.1308).abs() <= 1e-3 && (p - expect).abs() <= 1e-9 && (s - 1.0).abs() <= 1e-9,
        format!("psnr {:.6} dB (48.1308 +/-1e-3), ssim(a,a) - 1 = {:.1e} (+/-1e-9)", p, s - 1.0),
    )
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ftvsr_cli::clips::write_toy_corpus(&r.join("hr"), 2, 3, 3, 16, 11).unwrap();
    let hr = r.join("hr").display().to_string();
    let tiny = [
        "--scale", "2", "--block", "2", "--cells", "2", "--channels", "3", "--dim", "4", "--heads", "2",
        "--hidden-channels", "2", "--phi-width", "4", "--seed", "9",
    ];
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = r.join(name);
        let (lr, train) = (out.join("lr").display().to_string(), out.join("train").display().to_string());
        let mut degrade = vec!["ftvsr", "degrade", "--input", &hr, "--output", &lr, "--noise-sigma", "0.02"];
        degrade.extend(["--compression", "quantize", "--q", "2"]);
        degrade.extend(tiny);
        ftvsr_cli::run(degrade).unwrap();
        let mut train_args = vec!["ftvsr", "train", "--lr", &lr, "--hr", &hr, "--output", &train];
        train_args.extend(["--total-steps", "6", "--checkpoint-every", "3"]);
        train_args.extend(tiny);
        ftvsr_cli::run(train_args).unwrap();
        // config.txt echoes this run's own paths; everything else must match byte for byte
        let own = out.display().to_string();
        let unpath = |files: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
            files
                .into_iter()
                .map(|(n, b)| match n.ends_with("config.txt") {
                    true => (n, String::from_utf8(b).unwrap().replace(&own, "RUN").into_bytes()),
                    false => (n, b),
                })
                .collect()
        };
        runs.push((unpath(tree(&out.join("lr"))), unpath(tree(&out.join("train")))));
    }
    let (ref a, ref b) = (&runs[0], &runs[1]);
    let files = a.0.len() + a.1.len();
    let log_present = a.1.iter().any(|(n, _)| n.ends_with("loss.csv"));
    verdict(
        a.0 == b.0 && a.1 == b.1 && log_present,
        format!("degrade and train each run twice: {} output files incl. loss log and checkpoint, byte-identical up to the echoed output paths: {}", files, a == b),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("DCT correctness", dct_correctness),
        ("tokenization round trip", tokenization_round_trip),
        ("attention invariants", attention_invariants),
        ("gradient suite", gradient_suite),
        ("residual identity at init", residual_identity),
        ("toy training efficacy", toy_training),
        ("scheme ablation report", scheme_ablation),
        ("degradation monotonicity", degradation_monotonicity),
        ("metric closed forms", metrics_closed_form),
        ("determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !only.is_empty() && !only.iter().any(|o| *o == id || name.contains(o.as_str())) {
            continue;
        }
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!("{} {:>2} {}: {}", if v.pass { "PASS" } else { "FAIL" }, id, name, v.detail);
    }
    if failed > 0 {
        println!("{} criteria failed", failed);
        std::process::exit(1);
    }
}
