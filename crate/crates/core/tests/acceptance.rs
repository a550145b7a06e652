//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line (run with
//! `--nocapture` to see them) and then asserts.

mod common;

use std::time::Instant;

use common::{oracle_range_auc, oracle_vus};
use left_core::data::{load_dataset, synth_generate, SynthConfig};
use left_core::fusion::{fuse_tri_view, TriViewFusion};
use left_core::losses::LossWeights;
use left_core::metrics::{auc_roc, range_auc, vus, LabeledScores, VusConfig};
use left_core::model::{Ablation, LeftModel, ModelConfig};
use left_core::nn::{gaussian, ParamStore};
use left_core::pipeline::{evaluate_model, model_config_for, train_on};
use left_core::prototypes::js_divergence;
use left_core::scoring::{score_cycle, ScoreWeights};
use left_core::spectral::filterbank::{decompose_on_tape, masks_for_length};
use left_core::spectral::{
    aliasing_energy_oracle, band_decompose_downsample, learned_edges, stft_forward, stft_inverse, FilterbankState,
    StftConfig, StftOperator,
};
use left_core::tape::{smooth_l1_scalar, Mat, Tape};
use left_core::tokenizers::{build_block_mask, EncoderConfig, MultiScaleEncoder, TokenStream, View};
use left_core::training::TrainConfig;
use left_core::{CycleOutputs, FusionConfig, FusionStrategy};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, ok: bool, detail: impl AsRef<str>) {
    println!("criterion {n}: {} ({})", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "criterion {n} failed: {}", detail.as_ref());
}

fn noise(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((t, c), |_| rng.random::<f64>() - 0.5)
}

fn norm(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_factors(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = rng.random_range(1..=5);
    let mut r: Vec<usize> = (0..k).map(|_| 1 << rng.random_range(0..6)).collect();
    r.sort_unstable_by(|a, b| b.cmp(a));
    r
}

#[test]
fn c01_filterbank_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut bad = 0;
    for _ in 0..1000 {
        let r = random_factors(&mut rng);
        let u: Vec<f64> = r.iter().map(|_| rng.random_range(-30.0..30.0)).collect();
        let state = FilterbankState::with_params(u, r, 0.01).unwrap();
        let e = learned_edges(&state);
        let c = state.cutoffs();
        let monotone = e.windows(2).all(|w| w[0] <= w[1]);
        let below = e[1..].iter().zip(&c).all(|(e, c)| e <= c);
        bad += usize::from(!(monotone && below && e[0] == 0.0));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(1, bad == 0 && secs < 5.0, format!("{bad} infeasible draws of 1000 in {secs:.3}s"));
}

#[test]
fn c02_partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let r = random_factors(&mut rng);
        let u: Vec<f64> = r.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let tau = 10f64.powf(rng.random_range(-3.0..-1.0));
        let state = FilterbankState::with_params(u, r, tau).unwrap();
        let m = masks_for_length(&state, 96).unwrap();
        for (cov, sum) in m.coverage().iter().zip(m.partition_sum()) {
            if *cov > 1e-4 {
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    verdict(2, worst <= 1e-3, format!("max |sum - 1| = {worst:.2e} over 100 draws"));
}

#[test]
fn c03_aliasing_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sharp = FilterbankState::with_params(vec![0.0; 3], vec![16, 8, 4], 1e-4).unwrap();
    let base = FilterbankState::new(vec![16, 8, 4]).unwrap();
    let path = [0.1, 0.01, 0.001];
    let mut worst_limited = 0.0f64;
    let mut violations = [0usize; 3];
    for _ in 0..50 {
        let x = noise(96, 2, &mut rng);
        let n = norm(&x);
        for k in 0..3 {
            worst_limited = worst_limited.max(aliasing_energy_oracle(x.view(), &sharp, k).unwrap() / n);
            let a: Vec<f64> = path
                .iter()
                .map(|&tau| aliasing_energy_oracle(x.view(), &base.with_tau(tau).unwrap(), k).unwrap())
                .collect();
            if a.windows(2).any(|w| w[1] > w[0]) {
                violations[k] += 1;
            }
        }
    }
    let ok = worst_limited < 1e-6 && violations.iter().all(|&v| v == 0);
    verdict(
        3,
        ok,
        format!(
            "band-limited max alias/|x| = {worst_limited:.2e}; annealing violations per band {violations:?} of 50"
        ),
    );
}

#[test]
fn c04_stft_cycle_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = StftConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = noise(96, 3, &mut rng);
        let y = stft_inverse(&stft_forward(x.view(), &cfg).unwrap()).unwrap();
        worst = worst.max(norm(&(&y - &x)) / norm(&x));
    }
    let (a, b) = StftOperator::new(cfg, 96).unwrap().frame_bounds();
    let slack = 1e-9;
    let mut broken = 0;
    for _ in 0..1000 {
        let x = noise(96, 2, &mut rng);
        let x_hat = &x + &(noise(96, 2, &mut rng) * rng.random_range(0.01..2.0));
        let err = norm(&(&x_hat - &x));
        let spec_err = stft_forward((&x_hat - &x).view(), &cfg).unwrap().l2_norm();
        let lower = err <= spec_err / a.sqrt() * (1.0 + slack);
        let upper = spec_err <= b.sqrt() * err * (1.0 + slack);
        broken += usize::from(!(lower && upper));
    }
    verdict(
        4,
        worst < 1e-5 && broken == 0,
        format!("round-trip max rel err {worst:.2e}; frame bounds A = {a:.4}, B = {b:.4}, {broken} of 1000 pairs violate"),
    );
}

fn filterbank_fd_error(rng: &mut ChaCha8Rng) -> f64 {
    let state = FilterbankState::with_params(vec![0.3, -0.7, 1.1], vec![16, 8, 4], 0.01).unwrap();
    let x = noise(96, 2, rng);
    let weights: Vec<Array2<f64>> = state.scale_lengths(96).iter().map(|&tk| noise(tk, 2, rng)).collect();
    let objective = |s: &FilterbankState| -> f64 {
        let out = band_decompose_downsample(x.view(), s).unwrap();
        out.components.iter().zip(&weights).map(|(c, w)| (c * w).sum() + c.mapv(|v| v * v).sum()).sum()
    };
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let uv = tape.leaf(Mat::from_shape_vec((1, 3), state.u.clone()).unwrap());
    let bands = decompose_on_tape(&tape, xv, uv, &state).unwrap();
    let mut loss = tape.constant(Mat::zeros((1, 1)));
    for (&c, w) in bands.components.iter().zip(&weights) {
        let lin = tape.sum_all(tape.mul(c, tape.constant(w.clone())));
        loss = tape.add(loss, tape.add(lin, tape.sum_all(tape.mul(c, c))));
    }
    let g = tape.backward(loss).get(uv).unwrap().clone();
    let h = 1e-5;
    (0..3)
        .map(|k| {
            let (mut up, mut down) = (state.u.clone(), state.u.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (objective(&state.with_u(up).unwrap()) - objective(&state.with_u(down).unwrap())) / (2.0 * h);
            (g[[0, k]] - fd).abs() / fd.abs().max(1e-8)
        })
        .fold(0.0, f64::max)
}

fn model_fd_error(rng: &mut ChaCha8Rng) -> f64 {
    let mut cfg = ModelConfig::new(96, 2);
    cfg.encoder.d_model = 16;
    cfg.encoder.heads = 2;
    cfg.fusion.d_model = 16;
    cfg.fusion.heads = 2;
    cfg.prototypes = 4;
    let model = LeftModel::new(cfg, 5).unwrap();
    let x = gaussian(96, 2, 1.0, rng);
    let w = LossWeights::default();
    let loss = |store: &ParamStore| {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mut m = model.clone();
        m.store = store.clone();
        tape.scalar(m.forward(&tape, &p, &x, 0.3, &w).unwrap().total)
    };
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let f = model.forward(&tape, &p, &x, 0.3, &w).unwrap();
    let mut g = tape.backward(f.total);
    let grads = p.collect(&model.store, &mut g);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for name in ["filterbank.u", "time.conv0.weight", "freq.conv0.weight", "ms.layer0.attn.k.weight", "fusion.layer0.tf.q.weight", "proto.freq", "latent.0.weight", "dec.ms_full.0.weight"] {
        let id = model.store.find(name).unwrap_or_else(|| panic!("{name}"));
        let (r, c) = model.store.get(id).dim();
        for (i, j) in [(0, 0), (r / 2, c / 2), (r - 1, c - 1)] {
            let mut plus = model.store.clone();
            plus.get_mut(id)[[i, j]] += h;
            let mut minus = model.store.clone();
            minus.get_mut(id)[[i, j]] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max((fd - grads[id.0][[i, j]]).abs() / fd.abs().max(1e-4));
        }
    }
    worst
}

#[test]
fn c05_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fb = filterbank_fd_error(&mut rng);
    let model = model_fd_error(&mut rng);
    verdict(5, fb < 1e-4 && model < 1e-4, format!("max rel err: filterbank edges {fb:.2e}, toy model {model:.2e}"));
}

#[test]
fn c06_smooth_l1_and_pinsker() {
    let grid_ok = (-4000..=4000).map(|i| i as f64 * 2.5e-3).all(|r| r.abs() <= 2.0 * smooth_l1_scalar(r) + 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::INFINITY;
    for _ in 0..10_000 {
        let m = rng.random_range(2..=16);
        let draw = |rng: &mut ChaCha8Rng| {
            let v = Array1::from_shape_fn(m, |_| rng.random::<f64>().powi(3));
            &v / v.sum()
        };
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let l1: f64 = (&p - &q).mapv(f64::abs).sum();
        worst = worst.min(js_divergence(p.view(), q.view()) - l1 * l1 / 8.0);
    }
    verdict(
        6,
        grid_ok && worst >= 0.0,
        format!("SmoothL1 grid holds: {grid_ok}; min JS - l1^2/8 = {worst:.3e} over 10^4 pairs"),
    );
}

#[test]
fn c07_score_lower_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = ScoreWeights::default();
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        let t = 96;
        let lo = rng.random_range(0..t - 20);
        let hi = rng.random_range(lo + w.kappa + 1..=t.min(lo + 60));
        let (dt, df, dc) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let x = noise(t, 3, &mut rng);
        let mut bump = |floor: f64| {
            Array2::from_shape_fn((t, 3), |(i, _)| {
                let m = if (lo..hi).contains(&i) { floor + rng.random_range(0.0..1.0) } else { rng.random_range(0.0..0.1) };
                if rng.random_bool(0.5) { m } else { -m }
            })
        };
        let x_hat = &x + &bump(dt);
        let x_f = &x + &bump(df);
        let c: Array1<f64> = (0..t).map(|i| if (lo..hi).contains(&i) { dc + rng.random_range(0.0..1.0) } else { 0.0 }).collect();
        let g = Array1::from_shape_fn(t, |_| rng.random_range(0.0..1.0));
        let s = stft_forward(x.view(), &StftConfig::default()).unwrap();
        let cyc = CycleOutputs { x_hat, s_hat: s.clone(), x_from_freq: x_f, s_from_time: s };
        let score = score_cycle(&x, &cyc, &g, &c, &w).unwrap();
        let bound = w.alpha_t * dt + w.alpha_f * df + w.alpha_c * dc;
        let half = w.kappa / 2;
        for i in lo + half..hi - half {
            worst = worst.min(score[i] - bound);
        }
    }
    verdict(7, worst >= 0.0, format!("min A_cyc - bound = {worst:.3e} over 200 constructed windows"));
}

fn compare(scores: &[f64], labels: &[u8], max_buffer: usize) -> f64 {
    let ls = LabeledScores::new(scores.to_vec(), labels.to_vec()).unwrap();
    let mut worst = 0.0f64;
    for buffer in 0..=max_buffer {
        match (range_auc(&ls, buffer), oracle_range_auc(scores, labels, buffer)) {
            (Ok((r, p)), Some((ro, po))) => worst = worst.max((r - ro).abs()).max((p - po).abs()),
            (Err(_), None) => {}
            _ => return f64::INFINITY,
        }
    }
    match (vus(&ls, &VusConfig { max_buffer, buffer_steps: 16 }), oracle_vus(scores, labels, max_buffer)) {
        (Ok((r, p)), Some((ro, po))) => worst.max((r - ro).abs()).max((p - po).abs()),
        (Err(_), None) => worst,
        _ => f64::INFINITY,
    }
}

#[test]
fn c08_metric_oracles() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut instances = 0;
    // Exhaustive over N ≤ 5 with three score levels, then random instances up to N = 32.
    for n in 1..=5usize {
        for mask in 0..1u32 << n {
            let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            for code in 0..3usize.pow(n as u32) {
                let scores: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64 / 2.0).collect();
                worst = worst.max(compare(&scores, &labels, 4));
                instances += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5000 {
        let n = rng.random_range(6..=32);
        let density = rng.random_range(0.05..0.5);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(density))).collect();
        let levels = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        worst = worst.max(compare(&scores, &labels, rng.random_range(0..=4)));
        instances += 1;
    }
    let example = auc_roc(&LabeledScores::new(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1]).unwrap()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        worst <= 1e-9 && example == 0.75 && secs < 60.0,
        format!("{instances} instances, max |diff| = {worst:.1e}; AUC example = {example}; {secs:.1}s"),
    );
}

#[test]
fn c09_synthetic_end_to_end() {
    let seed = 7;
    let mut ds = synth_generate(&SynthConfig::acceptance(seed)).unwrap();
    ds.standardize();
    let train = TrainConfig { learning_rate: 1e-3, batch_size: 4, epochs: 20, seed, ..TrainConfig::default() };
    let run = |ablation: Ablation| {
        let mut cfg = model_config_for(&ds);
        cfg.ablation = ablation;
        let start = Instant::now();
        let trainer = train_on(&ds, cfg, train.clone()).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let report = evaluate_model(&trainer.model, &ds, trainer.lambda(), &ScoreWeights::default()).unwrap();
        (report.metrics.get("vus_roc").unwrap(), report.metrics.get("vus_pr").unwrap(), secs)
    };
    let (roc, pr, secs) = run(Ablation::FULL);
    let (roc_nc, pr_nc, secs_nc) = run(Ablation { cycle: false, ..Ablation::FULL });
    let ok = secs < 600.0 && secs_nc < 600.0 && roc >= 0.85 && pr >= 0.5 && roc_nc < roc && pr_nc < pr;
    verdict(
        9,
        ok,
        format!(
            "full VUS-ROC {roc:.3} VUS-PR {pr:.3} ({secs:.0}s); w/o cycle VUS-ROC {roc_nc:.3} VUS-PR {pr_nc:.3} ({secs_nc:.0}s)"
        ),
    );
}

#[test]
fn c10_scale_and_fusion_isolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig::default();
    let d = cfg.d_model;
    let lengths = [1usize, 2, 4];
    let enc = MultiScaleEncoder::new(&mut store, &cfg, &lengths, &mut rng);
    let mask = build_block_mask(&lengths);
    let frags: Vec<TokenStream> =
        lengths.iter().map(|&l| TokenStream::new(gaussian(l, d, 1.0, &mut rng), View::Multiscale)).collect();
    let base = enc.encode(&store, &frags, &mask).unwrap();
    let offsets: Vec<usize> = std::iter::once(0).chain(lengths.iter().scan(0, |s, &l| { *s += l; Some(*s) })).collect();
    let mut leaks = 0;
    for k in 0..lengths.len() {
        for _ in 0..20 {
            let mut moved = frags.clone();
            moved[k].tokens = gaussian(lengths[k], d, 5.0, &mut rng);
            let out = enc.encode(&store, &moved, &mask).unwrap();
            for i in (0..offsets[3]).filter(|&i| !(offsets[k]..offsets[k + 1]).contains(&i)) {
                leaks += usize::from(out.tokens.row(i) != base.tokens.row(i));
            }
        }
    }
    let mut fusion_store = ParamStore::new();
    let fusion_cfg = FusionConfig { strategy: FusionStrategy::Tf, ..FusionConfig::default() };
    let fusion = TriViewFusion::new(&mut fusion_store, fusion_cfg, &mut rng).unwrap();
    let h_time = TokenStream::new(gaussian(96, d, 1.0, &mut rng), View::Time);
    let h_freq = TokenStream::new(gaussian(33, d, 1.0, &mut rng), View::Frequency);
    let (t_out, _, ms_out) = fuse_tri_view(&fusion_store, &fusion, &h_time, &h_freq, &base).unwrap();
    let ms_identical = ms_out.tokens == base.tokens;
    let time_changed = t_out.tokens != h_time.tokens;
    verdict(
        10,
        leaks == 0 && ms_identical && time_changed,
        format!("cross-scale changed rows {leaks}; TF keeps H^ms bit-identical: {ms_identical}"),
    );
}

#[test]
fn c11_msl_reproduction() {
    let Some(root) = std::env::var_os("LEFT_DATA_ROOT") else {
        println!("criterion 11: SKIP (LEFT_DATA_ROOT not set)");
        return;
    };
    let root = std::path::PathBuf::from(root);
    if !root.join("MSL").exists() {
        println!("criterion 11: SKIP (no MSL under {})", root.display());
        return;
    }
    let ds = load_dataset(&root, "MSL").unwrap();
    let trainer = train_on(&ds, model_config_for(&ds), TrainConfig::default()).unwrap();
    let report = evaluate_model(&trainer.model, &ds, trainer.lambda(), &ScoreWeights::default()).unwrap();
    let roc = report.metrics.get("vus_roc").unwrap();
    verdict(11, roc >= 0.78, format!("MSL VUS-ROC {roc:.4}"));
}
