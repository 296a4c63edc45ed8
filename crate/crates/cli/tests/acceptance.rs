//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each; exits non-zero if any fails.
//!
//! `cargo test --test acceptance` runs everything; extra arguments select
//! criteria by number, e.g. `cargo test --test acceptance -- 1 5`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jtss_cli::config::LoadedConfig;
use jtss_cli::{cmd_ablate, cmd_extract_teacher, cmd_gen_data, cmd_train, RunConfig, Sweep, ABLATE_FILE, METRICS_FILE, STEPS_FILE};
use jtss_core::audio::{add_noise, compute_fbank, FeatureMatrix, Waveform};
use jtss_core::backbones::{Backbone, EncoderConfig, FrameMap, NUM_TAP_LAYERS};
use jtss_core::evaluation::{compute_eer, compute_min_dcf, DcfParams};
use jtss_core::graph::Graph;
use jtss_core::losses::{aam_softmax_graph, aam_softmax_loss, align, speech_loss, speech_loss_graph, time_max_pool, AamConfig, Projection};
use jtss_core::ops::conv1d;
use jtss_core::teacher::{teacher_dir_checksum, TeacherSequence, TeacherSource};
use jtss_core::tensor::Tensor;
use jtss_core::trainer::{fit, train_step, Adam, Batch, JtssModel, Manifest, TrainConfig, CLASSIFIER_WEIGHT};

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-9;
const SNR_TOL_DB: f64 = 1e-6;
const TOY_EER_MAX: f64 = 0.15;
const TOY_LOSS_RATIO_MAX: f64 = 0.5;
const TOY_BUDGET: Duration = Duration::from_secs(600);
const QUICK_BUDGET: Duration = Duration::from_secs(60);

const TOY_CONFIG: &str = include_str!("../../../configs/toy.toml");

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + GRAD_STEP;
            let up = f(&p);
            p[i] = x[i] - GRAD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * GRAD_STEP)
        })
        .collect()
}

fn to_array2(shape: (usize, usize), data: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(shape, data.to_vec()).unwrap()
}

fn criterion_1() -> Result<String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut shapes = 0;
    for _ in 0..12 {
        let b = rng.random_range(1..5);
        let e = rng.random_range(2..9);
        let n = rng.random_range(2..7);
        let cfg = AamConfig {
            margin: rng.random_range(0.0..0.5),
            scale: rng.random_range(5.0..30.0),
        };
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let emb = tensor(&[b, e], &mut rng, -1.0, 1.0);
        let w = tensor(&[n, e], &mut rng, -1.0, 1.0);
        let mut g = Graph::new();
        let ev = g.param(emb.clone());
        let wv = g.param(w.clone());
        let l = aam_softmax_graph(&mut g, ev, wv, &labels, &cfg)?;
        let grads = g.backward(l);
        let wa = to_array2((n, e), w.data());
        let ea = to_array2((b, e), emb.data());
        let ne = numeric_grad(emb.data(), |x| aam_softmax_loss(&to_array2((b, e), x), &labels, &wa, &cfg).unwrap());
        let nw = numeric_grad(w.data(), |x| aam_softmax_loss(&ea, &labels, &to_array2((n, e), x), &cfg).unwrap());
        worst = worst.max(rel_err(grads.get(ev).unwrap().data(), &ne));
        worst = worst.max(rel_err(grads.get(wv).unwrap().data(), &nw));
        shapes += 1;
    }
    for _ in 0..12 {
        let t = rng.random_range(1..8);
        let tx = rng.random_range(t..3 * t + 2);
        let d = rng.random_range(2..7);
        let dt = loop {
            let k = rng.random_range(1..7);
            if k != d {
                break k;
            }
        };
        let x = tensor(&[1, d, tx], &mut rng, -1.0, 1.0);
        let w = tensor(&[dt, d, 1], &mut rng, -1.0, 1.0);
        let bias = tensor(&[dt], &mut rng, -0.5, 0.5);
        let v = tensor(&[1, dt, t], &mut rng, -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let bv = g.param(bias.clone());
        let pooled = time_max_pool(&mut g, xv, t)?;
        let z = conv1d(&mut g, pooled, wv, Some(bv), 1, 0);
        let (l, _) = speech_loss_graph(&mut g, z, &v)?;
        let grads = g.backward(l);

        // Value path through the public align + speech_loss functions.
        let teacher = TeacherSequence {
            utt_id: "u".into(),
            vectors: Array2::from_shape_fn((t, dt), |(i, c)| v.data()[c * t + i]),
        };
        let value = |xd: &[f64], wd: &[f64], bd: &[f64]| -> f64 {
            let frames = FrameMap {
                frames: Array2::from_shape_fn((tx, d), |(i, c)| xd[c * tx + i]),
                tap_layer: 0,
            };
            let proj = Projection {
                weight: to_array2((dt, d), wd),
                bias: Array1::from(bd.to_vec()),
            };
            let z = align(&frames, t, Some(&proj)).unwrap();
            speech_loss(&z, &teacher).unwrap().loss
        };
        let nx = numeric_grad(x.data(), |p| value(p, w.data(), bias.data()));
        let nw = numeric_grad(w.data(), |p| value(x.data(), p, bias.data()));
        let nb = numeric_grad(bias.data(), |p| value(x.data(), w.data(), p));
        worst = worst.max(rel_err(grads.get(xv).unwrap().data(), &nx));
        worst = worst.max(rel_err(grads.get(wv).unwrap().data(), &nw));
        worst = worst.max(rel_err(grads.get(bv).unwrap().data(), &nb));
        shapes += 1;
    }
    let elapsed = start.elapsed();
    ensure!(worst < GRAD_REL_TOL, "worst relative error {worst:.3e}");
    ensure!(elapsed < QUICK_BUDGET, "took {elapsed:?}");
    Ok(format!("{shapes} shapes, worst relative error {worst:.2e}, {elapsed:.1?}"))
}

/// Brute-force sweep over every candidate threshold (accept when score >= t).
fn oracle_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let mut thr: Vec<f64> = scores.to_vec();
    thr.sort_by(f64::total_cmp);
    thr.dedup();
    thr.push(f64::INFINITY);
    let nt = labels.iter().filter(|&&l| l).count() as f64;
    let nn = labels.len() as f64 - nt;
    thr.iter()
        .map(|&t| {
            let miss = scores.iter().zip(labels).filter(|(s, l)| **l && **s < t).count() as f64;
            let fa = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
            (miss / nt, fa / nn)
        })
        .collect()
}

fn oracle_eer(points: &[(f64, f64)]) -> f64 {
    // p_miss rises and p_fa falls with the threshold; interpolate the first crossing.
    let i = points.iter().position(|(m, f)| m >= f).unwrap();
    let (m1, f1) = points[i];
    if i == 0 || m1 == f1 {
        return m1;
    }
    let (m0, f0) = points[i - 1];
    let a = (f0 - m0) / ((m1 - f1) + (f0 - m0));
    m0 + a * (m1 - m0)
}

fn oracle_min_dcf(points: &[(f64, f64)], p: &DcfParams) -> f64 {
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    points
        .iter()
        .map(|(m, f)| (p.c_miss * p.p_target * m + p.c_fa * (1.0 - p.p_target) * f) / norm)
        .fold(f64::INFINITY, f64::min)
}

fn criterion_2() -> Result<String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for set in 0..100 {
        let n = rng.random_range(2..=500);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let sep = rng.random_range(0.0..3.0);
        // Every fourth set is quantized so that tied scores occur.
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s = rng.random_range(-1.0f64..1.0) + if l { sep } else { 0.0 };
                if set % 4 == 0 {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        let params = DcfParams {
            p_target: [0.01, 0.05, 0.5][set % 3],
            c_miss: rng.random_range(0.5..2.0),
            c_fa: rng.random_range(0.5..2.0),
        };
        let pts = oracle_points(&scores, &labels);
        let (eer, _) = compute_eer(&scores, &labels)?;
        let (dcf, _) = compute_min_dcf(&scores, &labels, &params)?;
        worst = worst.max((eer - oracle_eer(&pts)).abs());
        worst = worst.max((dcf - oracle_min_dcf(&pts, &params)).abs());
    }
    let elapsed = start.elapsed();
    ensure!(worst <= METRIC_TOL, "worst deviation {worst:.3e}");
    ensure!(elapsed < QUICK_BUDGET, "took {elapsed:?}");
    Ok(format!("100 score sets, worst deviation {worst:.1e}, {elapsed:.1?}"))
}

/// A few-second corpus and encoder for the training criteria.
fn tiny_config(root: &Path) -> Result<LoadedConfig> {
    let text = r#"
corpus_dir = "corpus"
output_dir = "runs"

[synth]
n_speakers = 3
utts_per_speaker = 4
utt_seconds = 1.0
seed = 5

[data]
train_manifest = "corpus/train.jsonl"
cohort_manifest = "corpus/train.jsonl"

[[data.eval]]
name = "clean"
manifest = "corpus/eval_clean.jsonl"
trials = "corpus/trials_clean.txt"

[encoder]
channels = 16
embed_dim = 8
num_mels = 20
attention_channels = 8
se_channels = 4

[train]
lr = 0.01
epochs = 2
batch_size = 4
crop_seconds = 0.5
lambda = 0.1
seed = 3

[teacher]
dim = 6
dir = "teacher"

[eval]
top_k = 4
"#;
    Ok(LoadedConfig {
        config: RunConfig::parse(text)?,
        base_dir: root.to_path_buf(),
    })
}

fn train_manifest(cfg: &LoadedConfig) -> Result<Manifest> {
    Ok(Manifest::load(cfg.resolve(&cfg.config.data.train_manifest))?)
}

fn criterion_3() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = tiny_config(dir.path())?;
    cmd_gen_data(&cfg, None, None)?;
    let manifest = train_manifest(&cfg)?;
    let setup = cfg.config.setup();
    let src = cfg.teacher_source().context("lambda > 0 needs a teacher")?;
    let lambda = setup.train.lambda;
    let joint = fit(&manifest, Some(&src), &setup)?;
    for (i, s) in joint.steps.iter().enumerate() {
        ensure!(
            s.l_total.to_bits() == (s.l_speaker + lambda * s.l_speech).to_bits(),
            "step {i}: {} != {} + {lambda}*{}",
            s.l_total,
            s.l_speaker,
            s.l_speech
        );
    }
    for e in &joint.log {
        ensure!(e.l_total.to_bits() == (e.l_speaker + lambda * e.l_speech).to_bits(), "epoch {} row", e.epoch);
    }

    // Run level: lambda = 0 with a teacher configured vs. no teacher at all.
    let mut zero = setup.clone();
    zero.train.lambda = 0.0;
    let a = fit(&manifest, Some(&src), &zero)?;
    let b = fit(&manifest, None, &zero)?;
    ensure!(a.checkpoint.to_bytes()? == b.checkpoint.to_bytes()?, "lambda=0 checkpoint differs from baseline");
    let bits = |o: &jtss_core::trainer::FitOutcome| o.steps.iter().map(|s| s.l_speaker.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&a) == bits(&b), "lambda=0 losses differ from baseline");

    // Step level: a model carrying a projection and a batch carrying teacher
    // vectors still update exactly like the teacher-free model.
    let enc = setup.encoder_config();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let batch = Batch {
        features: tensor(&[4, enc.num_mels, 40], &mut rng, -2.0, 2.0),
        labels: vec![0, 1, 2, 0],
        teacher: Some(tensor(&[4, 6, 20], &mut rng, -1.0, 1.0)),
    };
    let plain = Batch {
        teacher: None,
        ..batch.clone()
    };
    let tc = TrainConfig {
        lambda: 0.0,
        ..setup.train.clone()
    };
    let mut with_t = JtssModel::new(enc.clone(), 3, Some(6), 9)?;
    let mut base = JtssModel::new(enc, 3, None, 9)?;
    ensure!(with_t.has_projection(), "expected a projection for width 16 -> 6");
    let (mut o1, mut o2) = (Adam::default(), Adam::default());
    for _ in 0..3 {
        let s1 = train_step(&mut with_t, &mut o1, &batch, tc.lr, &tc)?;
        let s2 = train_step(&mut base, &mut o2, &plain, tc.lr, &tc)?;
        ensure!(s1.l_total.to_bits() == s2.l_total.to_bits(), "step losses differ");
    }
    ensure!(with_t.encoder == base.encoder, "encoder weights differ");
    ensure!(
        with_t.head.param(CLASSIFIER_WEIGHT) == base.head.param(CLASSIFIER_WEIGHT),
        "classifier weights differ"
    );
    Ok(format!(
        "{} joint steps exact, lambda=0 bit-identical at run and step level",
        joint.steps.len()
    ))
}

fn criterion_4() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = tiny_config(dir.path())?;
    cmd_gen_data(&cfg, None, None)?;
    let tdir = cfg.resolve(&cfg.config.teacher.dir);
    let n = cmd_extract_teacher(&cfg, None, None)?;
    let before = teacher_dir_checksum(&tdir)?;
    let src = TeacherSource::FileBacked {
        root: tdir.clone(),
        dim: cfg.config.teacher.dim,
    };
    let outcome = fit(&train_manifest(&cfg)?, Some(&src), &cfg.config.setup())?;
    let after = teacher_dir_checksum(&tdir)?;
    ensure!(before == after, "teacher files changed during training");
    let (b, a) = outcome.teacher_checksum.context("file-backed run reports checksums")?;
    ensure!(b == before && a == before, "reported checksums disagree");

    let model = &outcome.checkpoint.model;
    let names = model.parameter_names();
    let foreign: Vec<&String> = names
        .iter()
        .filter(|n| !(n.starts_with("encoder.") || n.starts_with("classifier.") || n.starts_with("projection.")))
        .collect();
    ensure!(foreign.is_empty(), "unexpected parameters {foreign:?}");
    ensure!(!names.iter().any(|n| n.contains("teacher")), "teacher parameter registered");
    let mut optimized: Vec<String> = outcome.checkpoint.optimizer.moments().map(|(n, _, _)| n.to_string()).collect();
    optimized.sort();
    ensure!(optimized == names, "optimizer state does not match the parameter registry");
    Ok(format!("{n} teacher files unchanged ({}...), 0 teacher parameters among {}", &before[..12], names.len()))
}

fn criterion_5() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cases = 300;
    for case in 0..cases {
        let t = rng.random_range(1..40);
        let tx = if case % 5 == 0 { t } else { rng.random_range(t..4 * t + 3) };
        let d = rng.random_range(1..8);
        let frames = Array2::from_shape_fn((tx, d), |_| rng.random_range(-3.0..3.0));
        let map = FrameMap {
            frames: frames.clone(),
            tap_layer: rng.random_range(0..NUM_TAP_LAYERS),
        };
        let z = align(&map, t, None)?;
        ensure!(z.vectors.dim() == (t, d), "({tx}, {t}): got {:?}", z.vectors.dim());
        ensure!(z.source_tap == map.tap_layer, "tap layer not carried");
        if tx == t {
            ensure!(z.vectors == frames, "not the identity for T_x == T = {t}");
        }
        for i in 0..t {
            let (s, e) = (i * tx / t, (i + 1) * tx / t);
            ensure!(e > s, "empty bin");
            for c in 0..d {
                let m = (s..e).map(|j| frames[[j, c]]).fold(f64::NEG_INFINITY, f64::max);
                ensure!(z.vectors[[i, c]] == m, "({tx}, {t}) bin {i} channel {c}");
            }
        }
        // Projected output is the affine map of the pooled frames.
        let dt = rng.random_range(1..6);
        let proj = Projection {
            weight: Array2::from_shape_fn((dt, d), |_| rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(dt, |_| rng.random_range(-1.0..1.0)),
        };
        let zp = align(&map, t, Some(&proj))?;
        ensure!(zp.vectors.dim() == (t, dt), "projected shape");
        let want = z.vectors.dot(&proj.weight.t()) + &proj.bias;
        let dev = (&zp.vectors - &want).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        ensure!(dev < 1e-12, "projection deviates by {dev:e}");
    }
    ensure!(align(&FrameMap { frames: Array2::zeros((3, 2)), tap_layer: 0 }, 4, None).is_err(), "T_x < T accepted");
    Ok(format!("{cases} random (T_x, T) pairs match the bin-max oracle"))
}

fn criterion_6() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let ecapa = EncoderConfig::ecapa();
    ensure!(ecapa.channels == 512 && ecapa.embed_dim == 192, "ECAPA defaults");
    let t_in = 120;
    let feats = FeatureMatrix::new(Array2::from_shape_fn((t_in, ecapa.num_mels), |_| rng.random_range(-2.0..2.0)));
    let net = Backbone::new(ecapa.clone(), 0)?;
    let mut counts = Vec::new();
    for tap in 0..NUM_TAP_LAYERS {
        let (map, emb) = net.with_tap(tap)?.encoder_forward(&feats)?;
        ensure!(emb.dim() == 192, "ECAPA embedding length {}", emb.dim());
        ensure!(map.dim() == ecapa.layer_width(tap), "layer {tap} width {}", map.dim());
        counts.push(map.num_frames());
    }
    ensure!(counts.iter().all(|&c| c == t_in), "ECAPA frame counts {counts:?} for {t_in} input frames");
    ensure!((0..4).all(|l| ecapa.layer_width(l) == 512), "ECAPA layers 0-3 are not 512 wide");

    let xv = EncoderConfig::xvector();
    let xfeats = FeatureMatrix::new(Array2::from_shape_fn((t_in, xv.num_mels), |_| rng.random_range(-2.0..2.0)));
    let (_, emb) = Backbone::new(xv, 0)?.encoder_forward(&xfeats)?;
    ensure!(emb.dim() == 512, "x-vector embedding length {}", emb.dim());
    Ok(format!("ECAPA 512 ch -> 192, x-vector -> 512, ECAPA frames {t_in} at taps 0-4"))
}

fn toy_config(root: &Path) -> Result<LoadedConfig> {
    // The shipped config addresses `../toy/...` from its own directory.
    let base = root.join("configs");
    fs::create_dir_all(&base)?;
    Ok(LoadedConfig {
        config: RunConfig::parse(TOY_CONFIG)?,
        base_dir: base,
    })
}

fn criterion_7() -> Result<String> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let cfg = toy_config(dir.path())?;
    let corpus = cmd_gen_data(&cfg, None, None)?;
    ensure!(corpus.manifest.len() == 20 * 20 * 2, "corpus has {} utterances", corpus.manifest.len());
    let out = dir.path().join("ablate");
    let rows = cmd_ablate(&cfg, &"lambda=0,0.1".parse::<Sweep>()?, Some(&out))?;
    let elapsed = start.elapsed();

    let csv = fs::read_to_string(out.join(ABLATE_FILE))?;
    let header = csv.lines().next().unwrap_or_default();
    for col in ["clean_eer", "farfield_eer"] {
        ensure!(header.split(',').any(|c| c == col), "ablate CSV lacks {col}");
    }
    ensure!(csv.lines().count() == 3, "ablate CSV should have two rows");
    ensure!(rows.len() == 2, "{} runs finished", rows.len());

    let mut notes = Vec::new();
    let mut by_lambda = BTreeMap::new();
    for r in &rows {
        let ratio = r.final_l_speaker / r.initial_l_speaker;
        ensure!(ratio < TOY_LOSS_RATIO_MAX, "lambda={}: l_speaker ratio {ratio:.3}", r.value);
        let set = |n: &str| r.sets.iter().find(|s| s.name == n).context("missing eval set");
        let clean = set("clean")?.selected().eer;
        let far = set("farfield")?.selected().eer;
        ensure!(clean < TOY_EER_MAX, "lambda={}: clean EER {clean:.3}", r.value);
        notes.push(format!("lambda={} loss x{ratio:.3} clean {clean:.3} farfield {far:.3}", r.value));
        by_lambda.insert(r.value.to_bits(), (clean, far));
    }
    let (b, j) = (by_lambda[&0f64.to_bits()], by_lambda[&0.1f64.to_bits()]);
    notes.push(format!("JTSS-baseline EER gap clean {:+.3} farfield {:+.3}", j.0 - b.0, j.1 - b.1));
    ensure!(elapsed < TOY_BUDGET, "took {elapsed:?}");
    Ok(format!("{}; {elapsed:.0?}", notes.join("; ")))
}

fn criterion_8() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for _ in 0..50 {
        let n = rng.random_range(400..48_000);
        let w = Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect())?;
        let f = compute_fbank(&w, 40)?;
        // Count the 400-sample windows that fit at a 160-sample shift.
        let mut frames = 0;
        while frames * 160 + 400 <= n {
            frames += 1;
        }
        ensure!(f.num_frames() == frames, "{n} samples: {} frames, expected {frames}", f.num_frames());
    }
    ensure!(compute_fbank(&Waveform::new(vec![0.1; 399])?, 40).is_err(), "short input accepted");

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1000..20_000);
        let lead = rng.random_range(0..n / 4);
        let tail = rng.random_range(0..n / 4);
        let clean: Vec<f64> = (0..n)
            .map(|i| {
                if i < lead || i >= n - tail {
                    0.0
                } else {
                    rng.random_range(-0.8..0.8)
                }
            })
            .collect();
        let noise_len = rng.random_range(200..2 * n);
        let noise: Vec<f64> = (0..noise_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = rng.random_range(-10.0..30.0);
        let mixed = add_noise(&Waveform::new(clean.clone())?, &Waveform::new(noise)?, target)?;
        let support: Vec<usize> = (0..n).filter(|&i| clean[i] != 0.0).collect();
        let ps = support.iter().map(|&i| clean[i].powi(2)).sum::<f64>();
        let pn = support.iter().map(|&i| (mixed.samples()[i] - clean[i]).powi(2)).sum::<f64>();
        worst = worst.max((10.0 * (ps / pn).log10() - target).abs());
    }
    ensure!(worst <= SNR_TOL_DB, "worst SNR error {worst:.3e} dB");
    Ok(format!("50 frame counts exact, 50 mixes within {worst:.1e} dB"))
}

fn tree_bytes(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn criterion_9() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = tiny_config(dir.path())?;
    let c1 = dir.path().join("c1");
    let c2 = dir.path().join("c2");
    let c3 = dir.path().join("c3");
    cmd_gen_data(&cfg, Some(11), Some(&c1))?;
    cmd_gen_data(&cfg, Some(11), Some(&c2))?;
    cmd_gen_data(&cfg, Some(12), Some(&c3))?;
    let (t1, t2, t3) = (tree_bytes(&c1)?, tree_bytes(&c2)?, tree_bytes(&c3)?);
    ensure!(t1 == t2, "corpora differ for equal seeds");
    ensure!(t1 != t3, "corpora equal for different seeds");

    cmd_gen_data(&cfg, None, None)?;
    let r1 = cmd_train(&cfg, Some(21), Some(&dir.path().join("r1")))?;
    let r2 = cmd_train(&cfg, Some(21), Some(&dir.path().join("r2")))?;
    let r3 = cmd_train(&cfg, Some(22), Some(&dir.path().join("r3")))?;
    let read = |r: &jtss_cli::TrainArtifacts, f: &str| fs::read(r.dir.join(f));
    ensure!(read(&r1, METRICS_FILE)? == read(&r2, METRICS_FILE)?, "metric logs differ");
    ensure!(read(&r1, STEPS_FILE)? == read(&r2, STEPS_FILE)?, "step logs differ");
    ensure!(fs::read(&r1.checkpoint)? == fs::read(&r2.checkpoint)?, "checkpoints differ");
    ensure!(read(&r1, METRICS_FILE)? != read(&r3, METRICS_FILE)?, "seed has no effect");
    Ok(format!("{} corpus files byte-identical, metric logs identical", t1.len()))
}

type Criterion = fn() -> Result<String>;

fn main() {
    let criteria: [(u32, &str, Criterion); 9] = [
        (1, "gradient checks", criterion_1),
        (2, "metric oracle", criterion_2),
        (3, "loss decomposition", criterion_3),
        (4, "teacher freezing", criterion_4),
        (5, "alignment contracts", criterion_5),
        (6, "shape conformance", criterion_6),
        (7, "toy end-to-end", criterion_7),
        (8, "fbank frames and snr", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let outcome = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(r) => r,
            Err(p) => Err(anyhow::anyhow!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| p.downcast_ref::<&str>().copied())
                    .unwrap_or("?")
            )),
        };
        match outcome {
            Ok(detail) => println!("PASS  {id} {name}: {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {id} {name}: {e:#}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
