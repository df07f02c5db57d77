//! Acceptance suite. Each test implements one release criterion at its
//! stated tolerance and runtime budget and prints one PASS line on
//! success (run with `--nocapture` to see them; a failing criterion fails
//! its test).
//!
//! Criteria:
//!  1. forward-process statistics and exact-oracle x0 recovery
//!  2. guidance anchors (w = 0 / w = -1, conditional-only equivalence)
//!  3. analytic gradients vs central finite differences, per layer type
//!  4. condition-embedding layout
//!  5. long-term sampling chain contract
//!  6. autoregressive continuity ablation
//!  7. oracle learnability of the lip stage
//!  8. training sanity on the constant-zero dataset
//!  9. bit-exact serialization and command reruns

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use blenddiff_engine::blendshape::{ChannelLayout, ExpressionFrame, ExpressionSequence};
use blenddiff_engine::checkpoint;
use blenddiff_engine::conditioning::{build_condition, fuse_audio, AudioFeatureSequence};
use blenddiff_engine::data::{build_lip_dataset, chunk_dataset, generate_oracle, load_dataset, OracleSpec};
use blenddiff_engine::denoiser::{
    self, DenoiserHyper, DenoiserModel, DiffusionTrainConfig, DiffusionDataset, DiffusionTrainItem,
};
use blenddiff_engine::diffusion::{cfg_combine, forward_sample, reverse_step, sample_noise, simple_loss};
use blenddiff_engine::lip::{refine, train_lip, LipHyper, LipModel, LipTrainConfig, StyleSource};
use blenddiff_engine::metrics::mouth_mse_against;
use blenddiff_engine::nn::adam::AdamState;
use blenddiff_engine::nn::gradcheck::{finite_diff_gradient, max_relative_error};
use blenddiff_engine::sampler::{
    continuity_jump, long_term_sample, sample_chunk, ChunkStep, Guidance, SamplerConfig,
};
use blenddiff_engine::schedule::NoiseSchedule;

fn report(criterion: u32, name: &str, start: Instant, budget_secs: u64) {
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE {criterion} ({name}): PASS in {:.1}s (budget {budget_secs}s)",
        elapsed.as_secs_f64()
    );
    assert!(
        elapsed.as_secs() < budget_secs,
        "criterion {criterion} exceeded its {budget_secs}s budget: {:?}",
        elapsed
    );
}

// ---------------------------------------------------------------------
// Criterion 1: forward_sample moments match the closed form within 3
// standard errors over 1e5 draws for 5 (x0, t) pairs; iterated
// exact-oracle inversion recovers x0 to 1e-6 relative error.
#[test]
fn criterion_1_diffusion_identities() {
    let start = Instant::now();
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(0xACCE01);

    let draws = 100_000usize;
    for _pair in 0..5 {
        let t = rng.random_range(1..=schedule.steps());
        let x0 = sample_noise(1, 4, &mut rng);
        let alpha_bar = schedule.alpha_bar(t).unwrap();
        let sigma = (1.0 - alpha_bar).sqrt();

        let mut sums = [0.0f64; 4];
        let mut sumsq = [0.0f64; 4];
        for _ in 0..draws {
            let eps = sample_noise(1, 4, &mut rng);
            let x_t = forward_sample(&x0, t, &eps, &schedule).unwrap();
            for j in 0..4 {
                sums[j] += x_t[[0, j]];
                sumsq[j] += x_t[[0, j]] * x_t[[0, j]];
            }
        }
        for j in 0..4 {
            let mean = sums[j] / draws as f64;
            let var = sumsq[j] / draws as f64 - mean * mean;
            let want_mean = alpha_bar.sqrt() * x0[[0, j]];
            let want_var = 1.0 - alpha_bar;
            let se_mean = sigma / (draws as f64).sqrt();
            let se_var = want_var * (2.0 / (draws as f64 - 1.0)).sqrt();
            assert!(
                (mean - want_mean).abs() <= 3.0 * se_mean,
                "t={t} entry {j}: mean {mean} vs {want_mean} (3SE={})",
                3.0 * se_mean
            );
            assert!(
                (var - want_var).abs() <= 3.0 * se_var,
                "t={t} entry {j}: var {var} vs {want_var} (3SE={})",
                3.0 * se_var
            );
        }
    }

    // Exact-oracle recovery: a predictor returning the current iterate's
    // effective noise inverts the chain onto x0 exactly.
    let x0 = sample_noise(4, 6, &mut rng) * 0.6;
    let zeros = Array2::zeros(x0.dim());
    for &t_start in &[1usize, 17, 55, 100] {
        let eps = sample_noise(4, 6, &mut rng);
        let mut x = forward_sample(&x0, t_start, &eps, &schedule).unwrap();
        for t in (1..=t_start).rev() {
            let ab = schedule.alpha_bar(t).unwrap();
            let eps_eff = (&x - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
            x = reverse_step(&x, t, &eps_eff, &zeros, &schedule).unwrap();
        }
        let num: f64 = (&x - &x0).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den: f64 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            num / den < 1e-6,
            "recovery from t={t_start}: relative error {}",
            num / den
        );
    }

    report(1, "diffusion identities", start, 60);
}

// ---------------------------------------------------------------------
// Criterion 2: cfg_combine is exact at the anchor weights, and a full
// w = 0 chain is bit-identical to conditional-only sampling under a
// shared noise stream.
#[test]
fn criterion_2_guidance_anchors() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xACCE02);
    let cond = sample_noise(6, 5, &mut rng);
    let uncond = sample_noise(6, 5, &mut rng);
    assert_eq!(cfg_combine(&cond, &uncond, 0.0).unwrap(), cond);
    assert_eq!(cfg_combine(&cond, &uncond, -1.0).unwrap(), uncond);

    let hyper = DenoiserHyper {
        input_dim: 3,
        cond_dim: 6,
        layers: 1,
        heads: 2,
        width: 8,
        ff_width: 16,
    };
    let mut model = DenoiserModel::new(hyper, &mut rng).unwrap();
    model.randomize_for_test(&mut rng, 0.3);
    let schedule = NoiseSchedule::linear(15, 2e-3, 0.35).unwrap();
    let fused = sample_noise(8, 6, &mut rng);

    let a = sample_chunk(
        &model,
        3,
        &fused,
        &schedule,
        Guidance::ClassifierFree(0.0),
        &mut ChaCha20Rng::seed_from_u64(777),
    )
    .unwrap();
    let b = sample_chunk(
        &model,
        3,
        &fused,
        &schedule,
        Guidance::ConditionalOnly,
        &mut ChaCha20Rng::seed_from_u64(777),
    )
    .unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.to_bits(), y.to_bits(), "w=0 chain must be bit-identical");
    }

    report(2, "guidance anchors", start, 60);
}

// ---------------------------------------------------------------------
// Criterion 3: analytic gradients match central finite differences
// (h = 1e-4) within 1e-4 max relative error on >= 100 random coordinates
// per layer type, for both models.
#[test]
fn criterion_3_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xACCE03);

    // --- Denoiser.
    let hyper = DenoiserHyper {
        input_dim: 4,
        cond_dim: 7,
        layers: 2,
        heads: 2,
        width: 12,
        ff_width: 24,
    };
    let mut model = DenoiserModel::new(hyper, &mut rng).unwrap();
    model.randomize_for_test(&mut rng, 0.4);
    let x_t = sample_noise(5, 4, &mut rng);
    let cond = sample_noise(5, 7, &mut rng);
    let target = sample_noise(5, 4, &mut rng);
    let t = 3usize;

    let analytic = {
        let mut grads = vec![0.0; model.n_params()];
        model.grad_against_target(&x_t, t, &cond, &target, &mut grads).unwrap();
        grads
    };
    let base = model.params().to_vec();
    let layout = model.layout().clone();
    let loss = |p: &[f64]| -> f64 {
        let m = DenoiserModel::from_params(hyper, p.to_vec()).unwrap();
        let y = m.denoise(&x_t, t, &cond).unwrap();
        simple_loss(&target, &y).unwrap()
    };

    let group_of = |name: &str| -> &'static str {
        if name.contains("attn") {
            "attention"
        } else if name.contains("ffn") {
            "feed-forward"
        } else if name.contains("norm") {
            "normalization"
        } else {
            "embeddings"
        }
    };
    for group in ["attention", "feed-forward", "normalization", "embeddings"] {
        let mut coords: Vec<usize> = layout
            .specs()
            .iter()
            .filter(|s| group_of(&s.name) == group)
            .flat_map(|s| s.offset..s.offset + s.len())
            .collect();
        assert!(
            coords.len() >= 100,
            "denoiser group {group} has only {} coordinates",
            coords.len()
        );
        coords.shuffle(&mut rng);
        coords.truncate(100);
        let numeric = finite_diff_gradient(loss, &base, &coords, 1e-4);
        let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        let err = max_relative_error(&picked, &numeric);
        assert!(err < 1e-4, "denoiser {group}: max relative error {err}");
    }

    // --- Lip model.
    let lip_hyper = LipHyper {
        audio_dim: 5,
        style_dim: 6,
        mouth_dim: 6,
        lstm_hidden: 10,
        emo_width: 6,
    };
    let mut lip = LipModel::new(lip_hyper, &mut rng).unwrap();
    lip.randomize_for_test(&mut rng, 0.4);
    let audio = sample_noise(6, 5, &mut rng);
    let style = sample_noise(3, 6, &mut rng);
    let lip_target = sample_noise(6, 6, &mut rng);
    let mut lip_grads = vec![0.0; lip.n_params()];
    lip.loss_and_grad_window(&audio, &style, &lip_target, 1.0, &mut lip_grads)
        .unwrap();
    let lip_base = lip.params().to_vec();
    let lip_layout = lip.layout().clone();
    let lip_loss = |p: &[f64]| -> f64 {
        let m = LipModel::from_params(lip_hyper, p.to_vec()).unwrap();
        let y = m.predict(&audio, &style).unwrap();
        (&y - &lip_target).mapv(|v| v * v).sum() / y.len() as f64
    };
    let lip_group = |name: &str| -> &'static str {
        if name.starts_with("lstm") {
            "recurrent"
        } else if name.starts_with("conv") {
            "convolution"
        } else {
            "projection"
        }
    };
    for group in ["recurrent", "convolution", "projection"] {
        let mut coords: Vec<usize> = lip_layout
            .specs()
            .iter()
            .filter(|s| lip_group(&s.name) == group)
            .flat_map(|s| s.offset..s.offset + s.len())
            .collect();
        assert!(
            coords.len() >= 100,
            "lip group {group} has only {} coordinates",
            coords.len()
        );
        coords.shuffle(&mut rng);
        coords.truncate(100);
        let numeric = finite_diff_gradient(lip_loss, &lip_base, &coords, 1e-4);
        let picked: Vec<f64> = coords.iter().map(|&i| lip_grads[i]).collect();
        let err = max_relative_error(&picked, &numeric);
        assert!(err < 1e-4, "lip {group}: max relative error {err}");
    }

    report(3, "gradient correctness", start, 300);
}

// ---------------------------------------------------------------------
// Criterion 4: indicator ones exactly at rows {0, N/2-1, N/2, N/2+1};
// all other state/style entries zero; N = 32 anchors the layout and the
// property holds for every N in 4..=64.
#[test]
fn criterion_4_embedding_layout() {
    let start = Instant::now();
    let dim = 3usize;
    let init = ExpressionFrame::new(vec![0.7, 0.2, 0.9]);
    let s1 = ExpressionFrame::new(vec![0.1, 0.2, 0.3]);
    let s2 = ExpressionFrame::new(vec![0.4, 0.5, 0.6]);
    let s3 = ExpressionFrame::new(vec![0.7, 0.8, 0.9]);

    let c32 = build_condition(Some(&init), Some([&s1, &s2, &s3]), 32, dim).unwrap();
    let m = c32.state_style();
    for row in 0..32 {
        let expect_one = matches!(row, 0 | 15 | 16 | 17);
        assert_eq!(m[[row, dim]] == 1.0, expect_one, "N=32 indicator row {row}");
    }

    for n in 4..=64usize {
        let c = build_condition(Some(&init), Some([&s1, &s2, &s3]), n, dim).unwrap();
        let m = c.state_style();
        let mid = n / 2;
        let occupied = [0, mid - 1, mid, mid + 1];
        for row in 0..n {
            if occupied.contains(&row) {
                assert_eq!(m[[row, dim]], 1.0, "N={n} row {row} indicator");
            } else {
                assert_eq!(m[[row, dim]], 0.0, "N={n} row {row} indicator");
                for col in 0..dim {
                    assert_eq!(m[[row, col]], 0.0, "N={n} row {row} col {col}");
                }
            }
        }
        // Row 0 holds the initial state, the middle three hold the style.
        for col in 0..dim {
            assert_eq!(m[[0, col]], init.values()[col]);
            assert_eq!(m[[mid - 1, col]], s1.values()[col]);
            assert_eq!(m[[mid, col]], s2.values()[col]);
            assert_eq!(m[[mid + 1, col]], s3.values()[col]);
        }
    }

    report(4, "embedding layout", start, 60);
}

// ---------------------------------------------------------------------
// Criterion 5: for L_A = 2N-1 the run uses exactly two chunks; chunk 2's
// initial-state condition equals chunk 1's final emitted frame bit-exact;
// the output is fully populated; style triples are re-drawn per chunk;
// everything is deterministic under the seed.
#[test]
fn criterion_5_long_term_chaining() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xACCE05);
    let d = 3usize;
    let a_dim = 2usize;
    let n = 8usize;
    let hyper = DenoiserHyper {
        input_dim: d,
        cond_dim: d + 1 + a_dim,
        layers: 1,
        heads: 2,
        width: 8,
        ff_width: 16,
    };
    let mut model = DenoiserModel::new(hyper, &mut rng).unwrap();
    model.randomize_for_test(&mut rng, 0.2);
    let schedule = NoiseSchedule::linear(12, 2e-3, 0.35).unwrap();

    let pool: Vec<ExpressionFrame> = (0..16)
        .map(|_| ExpressionFrame::new((0..d).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let style = blenddiff_engine::blendshape::EmotionStyleClip::new(
        ExpressionSequence::new(pool.clone(), 25.0).unwrap(),
        "style".into(),
        "s0".into(),
    )
    .unwrap();
    let audio = AudioFeatureSequence::new(
        Array2::from_shape_simple_fn((2 * n - 1, a_dim), || rng.random_range(-1.0..1.0)),
        25.0,
    )
    .unwrap();
    let cfg = SamplerConfig {
        chunk_len: n,
        guidance: 1.0,
        step: ChunkStep::Overlap,
        use_initial_state: true,
    };

    let (seq, trace) =
        long_term_sample(&model, d, &audio, &style, &cfg, &schedule, &mut ChaCha20Rng::seed_from_u64(404)).unwrap();
    assert_eq!(seq.len(), 2 * n - 1);
    assert_eq!(trace.chunk_starts, vec![0, n - 1], "exactly two chunks");

    // Replay the rng stream to reconstruct chunk 1 independently.
    let mut replay = ChaCha20Rng::seed_from_u64(404);
    let init_idx = replay.random_range(0..pool.len());
    let sidx = [
        replay.random_range(0..pool.len()),
        replay.random_range(0..pool.len()),
        replay.random_range(0..pool.len()),
    ];
    assert_eq!(trace.style_indices[0], sidx);
    let cond = build_condition(
        Some(&pool[init_idx]),
        Some([&pool[sidx[0]], &pool[sidx[1]], &pool[sidx[2]]]),
        n,
        d,
    )
    .unwrap();
    let fused = fuse_audio(&cond, &audio.slice_padded(0, n)).unwrap();
    let chunk1 = sample_chunk(
        &model,
        d,
        fused.fused().unwrap(),
        &schedule,
        Guidance::ClassifierFree(cfg.guidance),
        &mut replay,
    )
    .unwrap();
    let fed = trace.initial_rows[1].as_deref().expect("chunk 2 had an initial state");
    for (a, b) in fed.iter().zip(chunk1.row(n - 1).iter()) {
        assert_eq!(a.to_bits(), b.to_bits(), "initial state must be chunk 1's last frame, bit-exact");
    }

    // Fully populated: a randomized model leaves no frame at zero init.
    for (i, f) in seq.frames().iter().enumerate() {
        assert!(f.values().iter().any(|&v| v != 0.0), "frame {i} never written");
    }

    // Style triples re-drawn per chunk.
    assert_ne!(trace.style_indices[0], trace.style_indices[1]);

    // Deterministic under the seed.
    let (seq2, trace2) =
        long_term_sample(&model, d, &audio, &style, &cfg, &schedule, &mut ChaCha20Rng::seed_from_u64(404)).unwrap();
    assert_eq!(seq, seq2);
    assert_eq!(trace, trace2);

    report(5, "long-term chaining", start, 60);
}

// ---------------------------------------------------------------------
// Criterion 6: with a tiny model trained on the synthetic oracle, the
// median chunk-boundary jump over 20 seeds is strictly lower with
// initial-state conditioning than with it disabled.
#[test]
fn criterion_6_autoregressive_continuity() {
    let start = Instant::now();
    let shared = shared();
    let (model, schedule, clips, layout) =
        (&shared.model, &shared.schedule, &shared.clips, &shared.layout);
    let d = layout.total_dim();
    let n = CHUNK_LEN;

    let style = clips[1].style_clip().unwrap();
    let audio = clips.last().unwrap().audio.clone();

    let mut jumps_on = Vec::new();
    let mut jumps_off = Vec::new();
    for seed in 0..20u64 {
        for (on, bucket) in [(true, &mut jumps_on), (false, &mut jumps_off)] {
            let cfg = SamplerConfig {
                chunk_len: n,
                guidance: 1.5,
                step: ChunkStep::Overlap,
                use_initial_state: on,
            };
            let mut rng = ChaCha20Rng::seed_from_u64(9000 + seed);
            let (seq, trace) =
                long_term_sample(model, d, &audio, &style, &cfg, schedule, &mut rng).unwrap();
            let (per, _) = continuity_jump(&seq, &trace.boundaries()).unwrap();
            bucket.extend(per);
        }
    }
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        v[v.len() / 2]
    };
    let m_on = median(&mut jumps_on);
    let m_off = median(&mut jumps_off);
    println!("  continuity: median boundary jump on={m_on:.4} off={m_off:.4}");
    assert!(
        m_on < m_off,
        "autoregressive conditioning must reduce the median boundary jump: on={m_on} off={m_off}"
    );

    report(6, "autoregressive continuity", start, 1800);
}

// ---------------------------------------------------------------------
// Criterion 7: the trained lip model improves held-out mouth-channel MSE
// by >= 30% over the diffusion output, and non-mouth channels pass
// through bit-identically.
#[test]
fn criterion_7_oracle_learnability() {
    let start = Instant::now();
    let shared = shared();
    let (model, schedule, clips, layout) =
        (&shared.model, &shared.schedule, &shared.clips, &shared.layout);
    let truth = &shared.truth;
    let d = layout.total_dim();
    let n = CHUNK_LEN;

    // Hold out the last clip: its audio never entered training.
    let held = clips.last().unwrap().clone();
    let train_clips: Vec<_> = clips[..clips.len() - 1].to_vec();

    // Stage-two training on the training clips.
    let mut rng = ChaCha20Rng::seed_from_u64(0xACCE07);
    let windows = build_lip_dataset(&train_clips, layout, 8, 1, &mut rng).unwrap();
    let lip_hyper = LipHyper {
        audio_dim: held.audio.feature_dim(),
        style_dim: d,
        mouth_dim: layout.mouth_indices().len(),
        lstm_hidden: 24,
        emo_width: 12,
    };
    let mut lip = LipModel::new(lip_hyper, &mut rng).unwrap();
    let lip_cfg = LipTrainConfig {
        window: 8,
        epochs: 50,
        batch_size: 32,
        learning_rate: 2e-3,
    };
    let mut adam = AdamState::new(lip.n_params());
    train_lip(&mut lip, &windows, &lip_cfg, &mut adam, &mut rng).unwrap();

    // Diffusion output for the held-out audio.
    let style = train_clips[1].style_clip().unwrap();
    let cfg = SamplerConfig {
        chunk_len: n,
        guidance: 1.5,
        step: ChunkStep::Overlap,
        use_initial_state: true,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(0x5EED07);
    let (gen_seq, trace) =
        long_term_sample(model, d, &held.audio, &style, &cfg, schedule, &mut rng).unwrap();

    let truth_mouth = truth
        .apply_map(&held.emotion_label, held.audio.feats())
        .unwrap();
    let mse_diffusion = mouth_mse_against(&gen_seq, &truth_mouth, layout).unwrap();

    let styles = StyleSource::from_trace(&style, &trace, gen_seq.len()).unwrap();
    let refined = refine(&lip, &gen_seq, &held.audio, &styles, layout, 8).unwrap();
    let mse_refined = mouth_mse_against(&refined, &truth_mouth, layout).unwrap();
    println!(
        "  learnability: mouth MSE diffusion={mse_diffusion:.6} refined={mse_refined:.6} (ratio {:.4})",
        mse_refined / mse_diffusion
    );
    assert!(
        mse_refined <= 0.7 * mse_diffusion,
        "refinement must improve held-out mouth MSE by >= 30%: {mse_refined} vs {mse_diffusion}"
    );

    // Non-mouth channels are bit-identical pre/post refinement.
    let mouth: std::collections::BTreeSet<usize> = layout.mouth_mask().iter().copied().collect();
    for (rf, bf) in refined.frames().iter().zip(gen_seq.frames()) {
        for ch in 0..d {
            if !mouth.contains(&ch) {
                assert_eq!(
                    rf.values()[ch].to_bits(),
                    bf.values()[ch].to_bits(),
                    "non-mouth channel {ch} changed"
                );
            }
        }
    }

    report(7, "oracle learnability", start, 1200);
}

// ---------------------------------------------------------------------
// Criterion 8: a tiny denoiser on the constant-zero dataset halves the
// epoch-mean loss within 200 epochs, and chains sampled afterward stay
// within |x| < 0.05.
#[test]
fn criterion_8_training_sanity() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xACCE08);
    let d = 2usize;
    let a_dim = 1usize;
    let n = 4usize;
    let hyper = DenoiserHyper {
        input_dim: d,
        cond_dim: d + 1 + a_dim,
        layers: 1,
        heads: 2,
        width: 32,
        ff_width: 64,
    };
    let mut model = DenoiserModel::new(hyper, &mut rng).unwrap();
    let schedule = NoiseSchedule::linear(20, 0.02, 0.42).unwrap();
    let dataset = DiffusionDataset {
        items: (0..256)
            .map(|_| DiffusionTrainItem {
                x0: Array2::zeros((n, d)),
                audio: Array2::zeros((n, a_dim)),
                initial: vec![0.0; d],
                clip: 0,
            })
            .collect(),
        style_pools: vec![vec![vec![0.0; d]; 8]],
    };
    let cfg = DiffusionTrainConfig {
        epochs: 200,
        batch_size: 4,
        learning_rate: 3e-3,
        drop_prob: 0.1,
        chunk_len: n,
    };
    let mut adam = AdamState::new(model.n_params());
    let record = denoiser::train(&mut model, &dataset, &cfg, &schedule, &mut adam, &mut rng).unwrap();
    let first = record.epoch_losses[0];
    let last = *record.epoch_losses.last().unwrap();
    println!("  training sanity: epoch-mean loss {first:.4} -> {last:.4}");
    assert!(
        last <= 0.5 * first,
        "loss must drop by >= 50% within 200 epochs: {first} -> {last}"
    );

    let mut max_abs = 0.0f64;
    for seed in 0..3u64 {
        let fused = Array2::zeros((n, d + 1 + a_dim));
        let chunk = sample_chunk(
            &model,
            d,
            &fused,
            &schedule,
            Guidance::ClassifierFree(0.0),
            &mut ChaCha20Rng::seed_from_u64(100 + seed),
        )
        .unwrap();
        max_abs = max_abs.max(chunk.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    println!("  training sanity: sampled max|x| = {max_abs:.4}");
    assert!(max_abs < 0.05, "sampled sequences must satisfy max|x| < 0.05, got {max_abs}");

    report(8, "training sanity", start, 600);
}

// ---------------------------------------------------------------------
// Criterion 9: checkpoint and sequence-file round-trips are bit-exact,
// and CLI reruns from resolved-config snapshots reproduce the outputs
// bit-exactly.
#[test]
fn criterion_9_serialization() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    // Library round-trips.
    let mut rng = ChaCha20Rng::seed_from_u64(0xACCE09);
    let hyper = DenoiserHyper {
        input_dim: 3,
        cond_dim: 6,
        layers: 1,
        heads: 2,
        width: 8,
        ff_width: 16,
    };
    let mut model = DenoiserModel::new(hyper, &mut rng).unwrap();
    model.randomize_for_test(&mut rng, 0.5);
    let adam = AdamState::new(model.n_params());
    let ckpt_path = dir.path().join("m.ckpt");
    checkpoint::save_denoiser(&ckpt_path, &model, &adam, 1, &rng).unwrap();
    let loaded = checkpoint::load_denoiser(&ckpt_path).unwrap();
    for (a, b) in model.params().iter().zip(loaded.model.params()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    let layout = ChannelLayout::arkit();
    let seq = ExpressionSequence::from_matrix(
        &Array2::from_shape_simple_fn((9, layout.total_dim()), || rng.random_range(-1.5..1.5)),
        25.0,
    )
    .unwrap();
    let seq_path = dir.path().join("seq.csv");
    blenddiff_engine::fileio::save_sequence(&seq_path, &seq, &layout).unwrap();
    let back = blenddiff_engine::fileio::load_sequence(&seq_path, &layout, 25.0, false).unwrap();
    assert_eq!(seq, back, "sequence CSV round-trip is bit-exact");

    // CLI rerun from the resolved snapshot: train a micro model, generate
    // through the CLI binary, rerun the snapshot, compare bytes.
    let mut cfg = blenddiff_engine::config::RunConfig::new(dir.path().join("out"), 31);
    cfg.schedule = blenddiff_engine::schedule::ScheduleConfig {
        steps: 24,
        beta_start: 4e-3,
        beta_end: 0.35,
        kind: blenddiff_engine::schedule::ScheduleKind::Linear,
    };
    cfg.oracle.clip_count = 2;
    cfg.oracle.frames_per_clip = 24;
    cfg.oracle.feature_dim = 4;
    cfg.denoiser.layers = 1;
    cfg.denoiser.heads = 2;
    cfg.denoiser.width = 8;
    cfg.denoiser.ff_width = Some(16);
    cfg.diffusion_train.epochs = 2;
    cfg.diffusion_train.batch_size = 3;
    cfg.diffusion_train.chunk_len = 8;
    cfg.sampler.chunk_len = 8;

    let oracle = blenddiff_engine::pipeline::run_oracle_gen(&cfg).unwrap();
    cfg.dataset = Some(oracle.manifest.clone());
    let trained = blenddiff_engine::pipeline::run_train_diffusion(&cfg).unwrap();
    let cfg_path = dir.path().join("cfg.json");
    cfg.save(&cfg_path).unwrap();

    let audio = oracle
        .manifest
        .parent()
        .unwrap()
        .join("clips")
        .join(format!("{}.fmat", oracle.clip_ids[0]));
    let bin = env!("CARGO_BIN_EXE_blenddiff");
    let out = std::process::Command::new(bin)
        .args([
            "generate",
            "--config",
            cfg_path.to_str().unwrap(),
            "--audio",
            audio.to_str().unwrap(),
            "--style",
            &oracle.clip_ids[1],
            "--checkpoint",
            trained.checkpoint.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "generate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let seq_csv = cfg.output_dir.join("generated.csv");
    let snapshot = cfg.output_dir.join("resolved_generate.json");
    let bytes_before = std::fs::read(&seq_csv).unwrap();

    let out = std::process::Command::new(bin)
        .args(["rerun", "--snapshot", snapshot.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "rerun failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let bytes_after = std::fs::read(&seq_csv).unwrap();
    assert_eq!(bytes_before, bytes_after, "CLI rerun must reproduce outputs bit-exactly");

    report(9, "serialization", start, 600);
}

// ---------------------------------------------------------------------
// Shared trained model for criteria 6 and 7. Training runs once; both
// criteria read the same artifacts.

const CHUNK_LEN: usize = 16;

struct SharedArtifacts {
    _dir: tempfile::TempDir,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    clips: Vec<blenddiff_engine::data::LoadedClip>,
    layout: ChannelLayout,
    truth: blenddiff_engine::data::OracleGroundTruth,
}

/// Criteria 6 and 7 share one oracle dataset and one trained denoiser;
/// the first caller trains, the second reuses (OnceLock blocks until the
/// initializer finishes).
fn shared() -> &'static SharedArtifacts {
    use std::sync::OnceLock;
    static SHARED: OnceLock<SharedArtifacts> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = tempfile::tempdir().expect("create shared dir");
        let layout = ChannelLayout::arkit();
        let schedule = NoiseSchedule::linear(36, 3e-3, 0.27).unwrap();
        let spec = OracleSpec {
            seed: 21,
            clip_count: 5,
            frames_per_clip: 96,
            feature_dim: 8,
            ..OracleSpec::default()
        };
        let outcome = generate_oracle(&spec, &layout, &dir.path().join("dataset")).unwrap();
        let (_, clips) = load_dataset(&outcome.manifest_path).unwrap();
        // The last clip is held out of all training.
        let train_clips: Vec<_> = clips[..clips.len() - 1].to_vec();
        let dataset = chunk_dataset(&train_clips, CHUNK_LEN).unwrap();
        let d = layout.total_dim();
        let hyper = DenoiserHyper {
            input_dim: d,
            cond_dim: d + 1 + spec.feature_dim,
            layers: 2,
            heads: 4,
            width: 96,
            ff_width: 192,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let mut model = DenoiserModel::new(hyper, &mut rng).unwrap();
        let cfg = DiffusionTrainConfig {
            epochs: 3000,
            batch_size: 12,
            learning_rate: 2e-3,
            drop_prob: 0.1,
            chunk_len: CHUNK_LEN,
        };
        let mut adam = AdamState::new(model.n_params());
        denoiser::train(&mut model, &dataset, &cfg, &schedule, &mut adam, &mut rng).unwrap();
        SharedArtifacts {
            truth: outcome.ground_truth,
            model,
            schedule,
            clips,
            layout,
            _dir: dir,
        }
    })
}
