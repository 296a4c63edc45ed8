use jtss_core::audio::{compute_fbank, fbank_frames};
use jtss_core::backbones::{Backbone, EncoderConfig, NUM_TAP_LAYERS};
use jtss_core::evaluation::{extract_embeddings, run_trials, DcfParams};
use jtss_core::losses::{align, speech_loss};
use jtss_core::synth::{generate_corpus, Condition, SynthSpec};
use jtss_core::teacher::{synthetic_teacher, teacher_frames, TeacherSource};
use jtss_core::trainer::{fit, Checkpoint, TrainConfig, TrainSetup};

fn small_encoder(tap_layer: usize) -> EncoderConfig {
    EncoderConfig {
        channels: 16,
        embed_dim: 8,
        num_mels: 24,
        attention_channels: 8,
        se_channels: 4,
        tap_layer,
        ..EncoderConfig::ecapa()
    }
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_speakers: 3,
        utts_per_speaker: 4,
        utt_seconds: 1.0,
        seed: 2,
        ..SynthSpec::default()
    }
}

#[test]
fn corpus_features_teacher_and_alignment_fit_together() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small_spec(), dir.path()).unwrap();
    let entry = &corpus.manifest.entries[0];
    let w = corpus.manifest.load_waveform(entry).unwrap();
    let feats = compute_fbank(&w, 24).unwrap();
    assert_eq!(Some(feats.num_frames()), fbank_frames(w.len()));
    let teacher = synthetic_teacher(&w, 6, 0).unwrap();
    assert_eq!(teacher.num_frames(), teacher_frames(w.len()).unwrap());
    // 10 ms student frames always outnumber 20 ms teacher frames.
    assert!(feats.num_frames() >= teacher.num_frames());

    for tap in 0..NUM_TAP_LAYERS {
        let net = Backbone::new(small_encoder(tap), 1).unwrap();
        let (map, _) = net.encoder_forward(&feats).unwrap();
        let z = align(&map, teacher.num_frames(), None).unwrap();
        assert_eq!(z.vectors.nrows(), teacher.num_frames());
        if map.dim() == teacher.dim() {
            let l = speech_loss(&z, &teacher).unwrap();
            assert!((0.0..=2.0).contains(&l.loss));
        }
    }
}

#[test]
fn trained_checkpoint_scores_its_own_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small_spec(), dir.path().join("corpus")).unwrap();
    let setup = TrainSetup {
        encoder: small_encoder(0),
        train: TrainConfig {
            lr: 0.01,
            epochs: 2,
            batch_size: 4,
            crop_seconds: 0.5,
            lambda: 0.1,
            tap_layer: 2,
            ..TrainConfig::default()
        },
        augment: Default::default(),
    };
    let src = TeacherSource::Synthetic { seed: 0, dim: 6 };
    let out = fit(&corpus.train, Some(&src), &setup).unwrap();
    assert_eq!(out.checkpoint.model.encoder.config().tap_layer, 2);
    assert!(out.checkpoint.model.has_projection());

    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let eval = &corpus.eval_by_condition[&Condition::Clean];
    let embs = extract_embeddings(&ck.model.encoder, eval).unwrap();
    assert_eq!(embs.len(), eval.len());
    let report = run_trials(&corpus.trials[&Condition::Clean], &embs, None, &DcfParams::default()).unwrap();
    assert!((0.0..=1.0).contains(&report.raw.eer));
    assert_eq!(report.raw.n_target, report.raw.n_nontarget);
}
