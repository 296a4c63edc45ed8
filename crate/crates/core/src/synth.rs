//! Deterministic toy corpus: harmonic "speakers" in clean and far-field
//! conditions, with manifests and balanced trial lists.
//!
//! A speaker is a fundamental frequency, a vocal-tract scale applied to a
//! shared vowel inventory, a spectral tilt and a breathiness level. An
//! utterance is a sequence of vowel segments rendered as a sum of harmonics
//! shaped by three formant resonances, with per-utterance pitch offset,
//! vibrato and syllable-rate amplitude modulation. The far-field version of
//! an utterance is the clean one reverberated with a synthetic room response
//! and then mixed with synthetic noise, music or babble.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! wav/<utt_id>.wav         16 kHz mono PCM
//! manifest.jsonl           every utterance
//! train.jsonl              training utterances, all conditions
//! train_<cond>.jsonl       training utterances of one condition
//! eval.jsonl               held-out utterances, all conditions
//! eval_<cond>.jsonl        held-out utterances of one condition
//! trials_<cond>.txt        balanced trial list over eval_<cond>
//! ```
//!
//! Utterance ids are `spk<SSS>_utt<UUU>_<cond>`. Each speaker's last
//! `eval_utts_per_speaker()` utterances are held out for evaluation; the
//! rest train the classifier, so speaker ids double as dense class labels.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{augment, save_waveform, AugmentConfig, AugmentKind, FbankExtractor, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::evaluation::{cosine_score, Trial, TrialLabel, TrialList};
use crate::trainer::{Manifest, ManifestEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Farfield,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Farfield => "farfield",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub utt_seconds: f64,
    pub seed: u64,
    pub conditions: Vec<Condition>,
    /// Share of each speaker's utterances held out for trials.
    pub eval_fraction: f64,
    /// SNR range of the far-field noise.
    pub farfield_snr_db: (f64, f64),
    pub farfield_rt60: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 20,
            utt_seconds: 2.0,
            seed: 0,
            conditions: vec![Condition::Clean, Condition::Farfield],
            eval_fraction: 0.25,
            farfield_snr_db: (5.0, 15.0),
            farfield_rt60: (0.4, 0.9),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::invalid("need at least 2 speakers"));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::invalid("need at least 2 utterances per speaker"));
        }
        if !(self.utt_seconds >= 0.05 && self.utt_seconds.is_finite()) {
            return Err(Error::invalid(format!("utt_seconds {} too short", self.utt_seconds)));
        }
        if self.conditions.is_empty() {
            return Err(Error::invalid("need at least one condition"));
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(Error::invalid("eval_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    /// `min(n - 1, max(2, round(eval_fraction · n)))`.
    pub fn eval_utts_per_speaker(&self) -> usize {
        let n = self.utts_per_speaker;
        (n - 1).min(((self.eval_fraction * n as f64).round() as usize).max(2))
    }

    pub fn utt_samples(&self) -> usize {
        (self.utt_seconds * SAMPLE_RATE as f64).round() as usize
    }

    fn conditions_sorted(&self) -> Vec<Condition> {
        let mut c = self.conditions.clone();
        c.sort();
        c.dedup();
        c
    }
}

pub fn utt_id(speaker: usize, utt: usize, cond: Condition) -> String {
    format!("spk{speaker:03}_utt{utt:03}_{cond}")
}

/// Vowel formants (F1, F2, F3) in Hz for an average adult tract.
const VOWELS: [(f64, f64, f64); 8] = [
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (530.0, 1840.0, 2480.0),
    (660.0, 1720.0, 2410.0),
    (570.0, 840.0, 2410.0),
    (300.0, 870.0, 2240.0),
    (640.0, 1190.0, 2390.0),
    (490.0, 1350.0, 1690.0),
];
const FORMANT_BANDWIDTH: [f64; 3] = [90.0, 110.0, 170.0];
const MAX_HARMONICS: usize = 48;
const HARMONIC_CEILING_HZ: f64 = 7000.0;

/// Fixed per-speaker voice parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub tract_scale: f64,
    pub tilt: f64,
    pub breath: f64,
}

/// Voices with fundamentals stratified over 90-260 Hz so no two collide.
pub fn speaker_voices(n: usize, seed: u64) -> Vec<Voice> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    slots
        .into_iter()
        .map(|slot| {
            let u = (slot as f64 + rng.random_range(0.2..0.8)) / n as f64;
            Voice {
                f0: 90.0 * (260.0f64 / 90.0).powf(u),
                tract_scale: rng.random_range(0.85..1.15),
                tilt: rng.random_range(0.6..1.4),
                breath: rng.random_range(0.005..0.03),
            }
        })
        .collect()
}

fn resonance(f: f64, center: f64, bw: f64) -> f64 {
    let x = (f - center) / bw;
    1.0 / (1.0 + x * x)
}

/// One utterance of `voice`, peak-normalized to 0.5.
pub fn render_utterance(voice: &Voice, n_samples: usize, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let f0 = voice.f0 * (1.0 + 0.03 * rng.random_range(-1.0..1.0));
    let vib_rate = rng.random_range(4.0..6.5);
    let vib_phase = rng.random_range(0.0..TAU);
    let syl_rate = rng.random_range(3.0..6.0);
    let syl_phase = rng.random_range(0.0..TAU);
    let n_harm = MAX_HARMONICS.min((HARMONIC_CEILING_HZ / (f0 * 1.03)) as usize).max(1);
    let phases: Vec<(f64, f64)> = (0..n_harm)
        .map(|_| {
            let p: f64 = rng.random_range(0.0..TAU);
            (p.cos(), p.sin())
        })
        .collect();

    // vowel segments of 80-200 ms
    let mut targets = Vec::new();
    let mut pos = 0;
    while pos < n_samples {
        let len = (rng.random_range(0.08..0.2) * sr) as usize;
        targets.push((pos, VOWELS[rng.random_range(0..VOWELS.len())]));
        pos += len.max(1);
    }

    let block = 80;
    let smooth = 0.25;
    let mut formants = {
        let v = targets[0].1;
        [v.0, v.1, v.2].map(|f| f * voice.tract_scale)
    };
    let mut seg = 0;
    let mut amps = vec![0.0; n_harm];
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n_samples);
    let (mut sin_h, mut cos_h) = (vec![0.0; n_harm + 1], vec![0.0; n_harm + 1]);
    for start in (0..n_samples).step_by(block) {
        while seg + 1 < targets.len() && targets[seg + 1].0 <= start {
            seg += 1;
        }
        let v = targets[seg].1;
        let target = [v.0, v.1, v.2].map(|f| f * voice.tract_scale);
        for (f, t) in formants.iter_mut().zip(target) {
            *f += smooth * (t - *f);
        }
        for (h, a) in amps.iter_mut().enumerate() {
            let fh = f0 * (h + 1) as f64;
            let env: f64 = (0..3).map(|k| resonance(fh, formants[k], FORMANT_BANDWIDTH[k])).sum();
            *a = env * ((h + 1) as f64).powf(-voice.tilt);
        }
        for n in start..(start + block).min(n_samples) {
            let t = n as f64 / sr;
            let inst_f0 = f0 * (1.0 + 0.01 * (TAU * vib_rate * t + vib_phase).sin());
            phase = (phase + TAU * inst_f0 / sr) % TAU;
            // sin(hφ), cos(hφ) by the angle-addition recurrence
            let (s1, c1) = phase.sin_cos();
            sin_h[0] = 0.0;
            cos_h[0] = 1.0;
            let mut acc = 0.0;
            for h in 1..=n_harm {
                sin_h[h] = sin_h[h - 1] * c1 + cos_h[h - 1] * s1;
                cos_h[h] = cos_h[h - 1] * c1 - sin_h[h - 1] * s1;
                let (pc, ps) = phases[h - 1];
                acc += amps[h - 1] * (sin_h[h] * pc + cos_h[h] * ps);
            }
            let env = 0.6 + 0.4 * (TAU * syl_rate * t + syl_phase).sin();
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(env * acc + voice.breath * z);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Waveform::new(out)
}

/// Reverberation followed by additive noise, music or babble.
pub fn farfield(clean: &Waveform, spec: &SynthSpec, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = AugmentConfig {
        prob: 1.0,
        kinds: vec![AugmentKind::Reverb],
        num_rirs: 1,
        rt60_range: spec.farfield_rt60,
        ..AugmentConfig::default()
    };
    let wet = augment(clean, &room.policy(rng.random())?)?;
    let noise = AugmentConfig {
        prob: 1.0,
        kinds: vec![AugmentKind::Noise, AugmentKind::Music, AugmentKind::Babble],
        snr_db_range: spec.farfield_snr_db,
        num_rirs: 0,
        ..AugmentConfig::default()
    };
    let noisy = augment(&wet, &noise.policy(rng.random())?)?;
    let peak = noisy.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(if peak > 0.9 { noisy.scaled(0.9 / peak) } else { noisy })
}

/// Paths and manifests of a generated corpus.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Manifest,
    pub eval: Manifest,
    pub train_by_condition: BTreeMap<Condition, Manifest>,
    pub eval_by_condition: BTreeMap<Condition, Manifest>,
    pub trials: BTreeMap<Condition, TrialList>,
}

impl SynthCorpus {
    pub fn trials_path(&self, cond: Condition) -> PathBuf {
        self.root.join(format!("trials_{cond}.txt"))
    }

    pub fn train_path(&self, cond: Condition) -> PathBuf {
        self.root.join(format!("train_{cond}.jsonl"))
    }

    pub fn eval_path(&self, cond: Condition) -> PathBuf {
        self.root.join(format!("eval_{cond}.jsonl"))
    }
}

/// Every same-speaker pair as a target, plus as many different-speaker pairs
/// drawn without replacement.
pub fn balanced_trials(utts: &[(String, usize)], seed: u64) -> TrialList {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            let pair = (utts[i].0.clone(), utts[j].0.clone());
            if utts[i].1 == utts[j].1 {
                targets.push(pair);
            } else {
                nontargets.push(pair);
            }
        }
    }
    let n = targets.len().min(nontargets.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nontargets.shuffle(&mut rng);
    nontargets.truncate(n);
    nontargets.sort();
    targets.shuffle(&mut rng);
    targets.truncate(n);
    targets.sort();
    let trials = targets
        .into_iter()
        .map(|(e, t)| (e, t, TrialLabel::Target))
        .chain(nontargets.into_iter().map(|(e, t)| (e, t, TrialLabel::Nontarget)))
        .map(|(enroll, test, label)| Trial { enroll, test, label })
        .collect();
    TrialList { trials }
}

/// Writes the corpus described by `spec` under `out_dir`.
pub fn generate_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthCorpus> {
    spec.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    let wav_dir = root.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let conditions = spec.conditions_sorted();
    let voices = speaker_voices(spec.n_speakers, spec.seed);
    let n_samples = spec.utt_samples();
    let n_eval = spec.eval_utts_per_speaker();
    let n_train = spec.utts_per_speaker - n_eval;

    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    seeds.set_stream(1);
    let mut all = Vec::new();
    let mut train: BTreeMap<Condition, Vec<ManifestEntry>> = BTreeMap::new();
    let mut eval: BTreeMap<Condition, Vec<ManifestEntry>> = BTreeMap::new();
    for (s, voice) in voices.iter().enumerate() {
        for u in 0..spec.utts_per_speaker {
            let render_seed: u64 = seeds.random();
            let far_seed: u64 = seeds.random();
            let clean = render_utterance(voice, n_samples, render_seed)?;
            for &cond in &conditions {
                let w = match cond {
                    Condition::Clean => clean.clone(),
                    Condition::Farfield => farfield(&clean, spec, far_seed)?,
                };
                let id = utt_id(s, u, cond);
                let rel = PathBuf::from("wav").join(format!("{id}.wav"));
                save_waveform(root.join(&rel), &w)?;
                let entry = ManifestEntry {
                    utt_id: id,
                    speaker_id: s,
                    path: rel,
                    n_samples,
                };
                let split = if u < n_train { &mut train } else { &mut eval };
                split.entry(cond).or_default().push(entry.clone());
                all.push(entry);
            }
        }
    }

    let manifest = Manifest::new(all, &root);
    manifest.save(root.join("manifest.jsonl"))?;
    let flatten = |m: &BTreeMap<Condition, Vec<ManifestEntry>>| Manifest::new(m.values().flatten().cloned().collect(), &root);
    let train_all = flatten(&train);
    let eval_all = flatten(&eval);
    train_all.save(root.join("train.jsonl"))?;
    eval_all.save(root.join("eval.jsonl"))?;

    let mut corpus = SynthCorpus {
        root: root.clone(),
        manifest,
        train: train_all,
        eval: eval_all,
        train_by_condition: BTreeMap::new(),
        eval_by_condition: BTreeMap::new(),
        trials: BTreeMap::new(),
    };
    for &cond in &conditions {
        let tm = Manifest::new(train.remove(&cond).unwrap_or_default(), &root);
        tm.save(corpus.train_path(cond))?;
        let em = Manifest::new(eval.remove(&cond).unwrap_or_default(), &root);
        em.save(corpus.eval_path(cond))?;
        let utts: Vec<(String, usize)> = em.entries.iter().map(|e| (e.utt_id.clone(), e.speaker_id)).collect();
        // Same seed for every condition: trial pairs line up across conditions.
        let trials = balanced_trials(&utts, spec.seed);
        trials.save(corpus.trials_path(cond))?;
        corpus.train_by_condition.insert(cond, tm);
        corpus.eval_by_condition.insert(cond, em);
        corpus.trials.insert(cond, trials);
    }
    Ok(corpus)
}

/// Mean within-speaker minus mean between-speaker cosine similarity of
/// utterance-level Fbank means, after removing the mean over all utterances.
pub fn sanity_separation(manifest: &Manifest, num_mels: usize) -> Result<f64> {
    let fbank = FbankExtractor::new(num_mels)?;
    let mut means = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let f = fbank.compute(&manifest.load_waveform(e)?)?;
        let m: Array1<f64> = f.frames().mean_axis(ndarray::Axis(0)).expect("non-empty fbank");
        means.push((e.speaker_id, m));
    }
    if means.len() < 2 {
        return Err(Error::invalid("need at least two utterances"));
    }
    let global = means.iter().fold(Array1::<f64>::zeros(num_mels), |acc, (_, m)| acc + m) / means.len() as f64;
    let centered: Vec<(usize, Array1<f64>)> = means.into_iter().map(|(s, m)| (s, m - &global)).collect();
    let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..centered.len() {
        for j in i + 1..centered.len() {
            let c = cosine_score(&centered[i].1, &centered[j].1)?;
            let acc = if centered[i].0 == centered[j].0 { &mut within } else { &mut between };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    if within.1 == 0 || between.1 == 0 {
        return Err(Error::invalid("need same-speaker and different-speaker pairs"));
    }
    Ok(within.0 / within.1 as f64 - between.0 / between.1 as f64)
}
