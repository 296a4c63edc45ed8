//! Commands behind the `jtss` binary. Each command is a plain function so the
//! pipeline can also be driven from tests.

pub mod config;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use log::info;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use jtss_core::evaluation::{extract_embeddings, run_trials, Cohort, DcfParams, Metrics, TrialList, TrialReport};
use jtss_core::synth::{generate_corpus, sanity_separation, SynthCorpus};
use jtss_core::teacher::{synthetic_teacher, write_jtsf};
use jtss_core::trainer::{fit, metric_log_string, Checkpoint, FitOutcome, Manifest};

pub use config::{LoadedConfig, RunConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATE_FILE: &str = "ablate.csv";

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("cannot create directory {}", p.display()))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display()))
}

fn load_manifest(p: &Path) -> Result<Manifest> {
    Manifest::load(p).with_context(|| format!("cannot load manifest {}", p.display()))
}

fn load_trials(p: &Path) -> Result<TrialList> {
    TrialList::load(p).with_context(|| format!("cannot load trial list {}", p.display()))
}

pub fn cmd_dump_config(cfg: &LoadedConfig) -> Result<String> {
    cfg.config.to_toml()
}

/// Generates the synthetic corpus and reports per-condition separation.
pub fn cmd_gen_data(cfg: &LoadedConfig, seed: Option<u64>, out: Option<&Path>) -> Result<SynthCorpus> {
    let mut spec = cfg.config.synth.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let dir = out.map_or_else(|| cfg.resolve(&cfg.config.corpus_dir), Path::to_path_buf);
    let corpus = generate_corpus(&spec, &dir).with_context(|| format!("generating corpus in {}", dir.display()))?;
    for (cond, m) in &corpus.eval_by_condition {
        let sep = sanity_separation(m, cfg.config.encoder.num_mels)?;
        info!("{cond}: {} eval utterances, separation margin {sep:.4}", m.len());
        if sep <= 0.0 {
            log::warn!("{cond} speakers are not separable by Fbank means (margin {sep:.4})");
        }
    }
    Ok(corpus)
}

/// Writes synthetic-teacher `.jtsf` files for every utterance of the given
/// manifest (default: all manifests named in the config).
pub fn cmd_extract_teacher(cfg: &LoadedConfig, manifest: Option<&Path>, out: Option<&Path>) -> Result<usize> {
    let t = &cfg.config.teacher;
    let dir = out.map_or_else(|| cfg.resolve(&t.dir), Path::to_path_buf);
    create_dir(&dir)?;
    let manifests: Vec<PathBuf> = match manifest {
        Some(m) => vec![m.to_path_buf()],
        None => std::iter::once(&cfg.config.data.train_manifest)
            .chain(cfg.config.data.eval.iter().map(|e| &e.manifest))
            .map(|p| cfg.resolve(p))
            .collect(),
    };
    let mut written = std::collections::BTreeSet::new();
    for mp in manifests {
        let m = load_manifest(&mp)?;
        for e in &m.entries {
            if written.contains(&e.utt_id) {
                continue;
            }
            let seq = synthetic_teacher(&m.load_waveform(e)?, t.dim, t.seed)?;
            write_jtsf(dir.join(format!("{}.jtsf", e.utt_id)), &seq.vectors)?;
            written.insert(e.utt_id.clone());
        }
    }
    info!("wrote {} teacher files to {}", written.len(), dir.display());
    Ok(written.len())
}

fn steps_csv(outcome: &FitOutcome) -> String {
    let mut s = String::from("step,l_speaker,l_speech,l_total,grad_norm,clipped\n");
    for (i, m) in outcome.steps.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{},{}", m.l_speaker, m.l_speech, m.l_total, m.grad_norm, m.clipped as u8);
    }
    s
}

pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub outcome: FitOutcome,
}

/// Trains on `data.train_manifest`; writes the checkpoint, the per-epoch
/// metric log, a per-step log and the effective config into the output dir.
pub fn cmd_train(cfg: &LoadedConfig, seed: Option<u64>, out: Option<&Path>) -> Result<TrainArtifacts> {
    let mut setup = cfg.config.setup();
    if let Some(s) = seed {
        setup.train.seed = s;
    }
    let dir = out.map_or_else(|| cfg.resolve(&cfg.config.output_dir), Path::to_path_buf);
    create_dir(&dir)?;
    let manifest = load_manifest(&cfg.resolve(&cfg.config.data.train_manifest))?;
    let teacher = cfg.teacher_source();
    let outcome = fit(&manifest, teacher.as_ref(), &setup).context("training failed")?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&checkpoint)?;
    let metrics = dir.join(METRICS_FILE);
    write_file(&metrics, metric_log_string(&outcome.log))?;
    write_file(&dir.join(STEPS_FILE), steps_csv(&outcome))?;
    let mut effective = cfg.config.clone();
    effective.train = setup.train.clone();
    write_file(&dir.join("config.toml"), effective.to_toml()?)?;
    info!("checkpoint written to {}", checkpoint.display());
    Ok(TrainArtifacts {
        dir,
        checkpoint,
        metrics,
        outcome,
    })
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    utt_id: String,
    vector: Vec<f64>,
}

pub fn write_embeddings(path: &Path, embs: &HashMap<String, Array1<f64>>) -> Result<()> {
    let mut keys: Vec<&String> = embs.keys().collect();
    keys.sort();
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for k in keys {
        let rec = EmbeddingRecord {
            utt_id: k.clone(),
            vector: embs[k].to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<HashMap<String, Array1<f64>>> {
    let file = fs::File::open(path).with_context(|| format!("cannot read embeddings {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(rec.utt_id, Array1::from(rec.vector));
    }
    Ok(out)
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    Checkpoint::load(p).with_context(|| format!("cannot load checkpoint {}", p.display()))
}

pub fn cmd_extract_embeddings(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<usize> {
    let ck = load_checkpoint(checkpoint)?;
    let m = load_manifest(manifest)?;
    let embs = extract_embeddings(&ck.model.encoder, &m)?;
    write_embeddings(out, &embs)?;
    Ok(embs.len())
}

fn write_scores(path: &Path, report: &TrialReport) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    report.scores.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Scores a trial list from an embeddings file, optionally AS-normalized
/// against a cohort embeddings file.
pub fn cmd_score(
    embeddings: &Path,
    trials: &Path,
    cohort: Option<&Path>,
    top_k: usize,
    dcf: &DcfParams,
    out: &Path,
) -> Result<TrialReport> {
    let embs = read_embeddings(embeddings)?;
    let trials = load_trials(trials)?;
    let cohort_embs: Option<Vec<Array1<f64>>> = cohort
        .map(|p| read_embeddings(p).map(|m| sorted_values(&m)))
        .transpose()?;
    let report = run_trials(
        &trials,
        &embs,
        cohort_embs.as_deref().map(|e| Cohort { embeddings: e, top_k }),
        dcf,
    )?;
    write_scores(out, &report)?;
    Ok(report)
}

fn sorted_values(m: &HashMap<String, Array1<f64>>) -> Vec<Array1<f64>> {
    let mut keys: Vec<&String> = m.keys().collect();
    keys.sort();
    keys.into_iter().map(|k| m[k].clone()).collect()
}

/// Metrics for one evaluation set.
#[derive(Clone, Debug, Serialize)]
pub struct SetResult {
    pub name: String,
    pub raw: Metrics,
    pub normalized: Option<Metrics>,
}

impl SetResult {
    pub fn selected(&self) -> &Metrics {
        self.normalized.as_ref().unwrap_or(&self.raw)
    }
}

fn describe(name: &str, column: &str, m: &Metrics) -> String {
    format!(
        "{name} {column}: EER {:.2}% minDCF {:.4} ({} target, {} nontarget)",
        100.0 * m.eer,
        m.min_dcf,
        m.n_target,
        m.n_nontarget
    )
}

/// Evaluation sets to run: an explicit `(manifest, trials)` pair, or every
/// set of the config.
pub struct EvalRequest<'a> {
    pub manifest: Option<&'a Path>,
    pub trials: Option<&'a Path>,
    /// Cohort manifest overriding the config.
    pub cohort: Option<&'a Path>,
}

/// Embeds the evaluation utterances with the checkpoint's encoder and writes
/// per-set score CSVs plus a JSON report into `out`.
pub fn cmd_evaluate(cfg: &LoadedConfig, checkpoint: &Path, req: &EvalRequest<'_>, out: &Path) -> Result<Vec<SetResult>> {
    let ck = load_checkpoint(checkpoint)?;
    evaluate_checkpoint(cfg, &ck, req, out)
}

fn evaluate_checkpoint(cfg: &LoadedConfig, ck: &Checkpoint, req: &EvalRequest<'_>, out: &Path) -> Result<Vec<SetResult>> {
    create_dir(out)?;
    let ec = &cfg.config.eval;
    let sets: Vec<(String, PathBuf, PathBuf)> = match (req.manifest, req.trials) {
        (Some(m), Some(t)) => vec![("custom".into(), m.to_path_buf(), t.to_path_buf())],
        (None, None) => cfg
            .config
            .data
            .eval
            .iter()
            .map(|s| (s.name.clone(), cfg.resolve(&s.manifest), cfg.resolve(&s.trials)))
            .collect(),
        _ => bail!("--manifest and --trials must be given together"),
    };
    ensure!(!sets.is_empty(), "no evaluation sets configured");
    let cohort_path = match req.cohort {
        Some(p) => Some(p.to_path_buf()),
        None if ec.asnorm => cfg.config.data.cohort_manifest.as_deref().map(|p| cfg.resolve(p)),
        None => None,
    };
    let encoder = &ck.model.encoder;
    let cohort = cohort_path
        .map(|p| -> Result<Vec<Array1<f64>>> {
            let m = load_manifest(&p)?;
            Ok(sorted_values(&extract_embeddings(encoder, &m)?))
        })
        .transpose()?;
    let mut results = Vec::new();
    for (name, manifest, trials) in sets {
        let m = load_manifest(&manifest)?;
        let trials = load_trials(&trials)?;
        let embs = extract_embeddings(encoder, &m)?;
        let report = run_trials(
            &trials,
            &embs,
            cohort.as_deref().map(|e| Cohort {
                embeddings: e,
                top_k: ec.top_k,
            }),
            &ec.dcf,
        )
        .with_context(|| format!("scoring {name}"))?;
        write_scores(&out.join(format!("scores_{name}.csv")), &report)?;
        let r = SetResult {
            name: name.clone(),
            raw: report.raw,
            normalized: report.normalized,
        };
        println!("{}", describe(&name, "raw", &r.raw));
        if let Some(n) = &r.normalized {
            println!("{}", describe(&name, "as-norm", n));
        }
        results.push(r);
    }
    write_file(&out.join(REPORT_FILE), serde_json::to_string_pretty(&results)?)?;
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    TapLayer,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::TapLayer => "tap_layer",
            SweepParam::Lambda => "lambda",
        }
    }
}

/// `tap_layer=0,1,2` or `lambda=0,0.1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, list) = s
            .split_once('=')
            .with_context(|| format!("sweep {s:?} must look like lambda=0,0.1 or tap_layer=0,1"))?;
        let param = match key.trim() {
            "tap_layer" | "tap" => SweepParam::TapLayer,
            "lambda" => SweepParam::Lambda,
            other => bail!("unknown sweep parameter {other:?} (expected tap_layer or lambda)"),
        };
        let mut values = list
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| v.parse::<f64>().with_context(|| format!("bad sweep value {v:?}")))
            .collect::<Result<Vec<f64>>>()?;
        ensure!(!values.is_empty(), "sweep list for {} is empty", param.name());
        for &v in &values {
            match param {
                SweepParam::TapLayer => ensure!(
                    v.fract() == 0.0 && (0.0..5.0).contains(&v),
                    "tap layer {v} is not one of 0..4"
                ),
                SweepParam::Lambda => ensure!(v >= 0.0 && v.is_finite(), "lambda {v} must be >= 0"),
            }
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self { param, values })
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub param: SweepParam,
    pub value: f64,
    pub initial_l_speaker: f64,
    pub final_l_speaker: f64,
    pub sets: Vec<SetResult>,
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,value,initial_l_speaker,final_l_speaker");
    if let Some(first) = rows.first() {
        for set in &first.sets {
            let _ = write!(s, ",{0}_eer,{0}_min_dcf,{0}_raw_eer,{0}_raw_min_dcf", set.name);
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{},{}", r.param.name(), r.value, r.initial_l_speaker, r.final_l_speaker);
        for set in &r.sets {
            let sel = set.selected();
            let _ = write!(s, ",{},{},{},{}", sel.eer, sel.min_dcf, set.raw.eer, set.raw.min_dcf);
        }
        s.push('\n');
    }
    s
}

/// One train + evaluate run per sweep value (shared seed), in ascending
/// order. The CSV is rewritten after every run so a failure keeps the rows
/// finished so far.
pub fn cmd_ablate(cfg: &LoadedConfig, sweep: &Sweep, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let dir = out.map_or_else(|| cfg.resolve(&cfg.config.output_dir).join("ablate"), Path::to_path_buf);
    create_dir(&dir)?;
    let csv = dir.join(ABLATE_FILE);
    let mut rows = Vec::new();
    for &value in &sweep.values {
        let mut run = cfg.clone();
        match sweep.param {
            SweepParam::TapLayer => run.config.train.tap_layer = value as usize,
            SweepParam::Lambda => run.config.train.lambda = value,
        }
        run.config.validate()?;
        let run_dir = dir.join(format!("{}_{value}", sweep.param.name()));
        info!("ablation run {}={value}", sweep.param.name());
        let trained = cmd_train(&run, None, Some(&run_dir))
            .with_context(|| format!("run {}={value} failed; finished rows kept in {}", sweep.param.name(), csv.display()))?;
        let sets = evaluate_checkpoint(
            &run,
            &trained.outcome.checkpoint,
            &EvalRequest {
                manifest: None,
                trials: None,
                cohort: None,
            },
            &run_dir,
        )?;
        let log = &trained.outcome.log;
        rows.push(AblationRow {
            param: sweep.param,
            value,
            initial_l_speaker: log.first().map_or(f64::NAN, |m| m.l_speaker),
            final_l_speaker: log.last().map_or(f64::NAN, |m| m.l_speaker),
            sets,
        });
        write_file(&csv, ablation_csv(&rows))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let s: Sweep = "lambda=0.4, 0.001,0.1,0.01,0.004".parse().unwrap();
        assert_eq!(s.param, SweepParam::Lambda);
        assert_eq!(s.values, vec![0.001, 0.004, 0.01, 0.1, 0.4]);
        let t: Sweep = "tap_layer=4,3,2,1,0".parse().unwrap();
        assert_eq!(t.values.len(), 5);
        assert!("lambda=".parse::<Sweep>().is_err());
        assert!("tap_layer=5".parse::<Sweep>().is_err());
        assert!("tap_layer=1.5".parse::<Sweep>().is_err());
        assert!("margin=0.2".parse::<Sweep>().is_err());
        assert!("lambda=-1".parse::<Sweep>().is_err());
    }
}
