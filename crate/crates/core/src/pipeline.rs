//! End-to-end runs: data for one replicate, the four training regimes,
//! evaluation, and the artifacts written to disk.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Regime};
use crate::corpus::{
    build_vocab, corpus_to_string, generate_corpus_with_workers, generate_pretraining_corpus, problem_set,
    CorpusHeader, CorpusSpec, Dialogue,
};
use crate::error::PipelineError;
use crate::eval::{
    build_probes, check_contamination, mean_report, paradox_report, partition_problems, write_probes, EvalInputs,
    EvalReport, EvalSettings, ProbeItem, Stamp,
};
use crate::model::checkpoint::Checkpoint;
use crate::rules::Problem;
use crate::seeds::derive_seed;
use crate::training::{pretrain, train, TrainRun, TrainingMode};
use crate::vocab::Vocab;
use crate::TOOL_VERSION;

/// Everything a replicate trains and evaluates on.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub seed: u64,
    pub vocab: Vocab,
    pub train_problems: Vec<Problem>,
    pub probe_problems: Vec<Problem>,
    pub pretrain_spec: CorpusSpec,
    pub student_spec: CorpusSpec,
    pub heldout_spec: CorpusSpec,
    pub clean: Vec<Dialogue>,
    pub student: Vec<Dialogue>,
    pub heldout: Vec<Dialogue>,
    pub probes: Vec<ProbeItem>,
}

pub fn stamp(cfg: &ExperimentConfig, seed: u64) -> Stamp {
    Stamp { tool_version: TOOL_VERSION.to_string(), config_hash: cfg.hash(), seed }
}

/// Probe problems never appear in the pretraining or fine-tuning corpora;
/// held-out dialogues are drawn from them.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<ReplicateData, PipelineError> {
    let all = cfg.range().problems();
    let (train_problems, probe_problems) = partition_problems(&all, derive_seed(seed, "partition"));
    let student_spec = cfg.corpus_spec(seed, Some(train_problems.clone()))?;
    let pretrain_spec = CorpusSpec {
        n_dialogues: cfg.corpus.pretrain_dialogues,
        seed: derive_seed(seed, "pretrain-corpus"),
        ..student_spec.clone()
    };
    let heldout_spec = CorpusSpec {
        n_dialogues: cfg.corpus.heldout_dialogues,
        seed: derive_seed(seed, "heldout-corpus"),
        problem_pool: Some(probe_problems.clone()),
        ..student_spec.clone()
    };
    let vocab = build_vocab(&student_spec);
    let clean = generate_pretraining_corpus(&pretrain_spec)?;
    let student = generate_corpus_with_workers(&student_spec, cfg.global.workers)?;
    let heldout = generate_corpus_with_workers(&heldout_spec, cfg.global.workers)?;
    let probes = build_probes(
        &probe_problems,
        cfg.eval.probe_framing,
        &student_spec.templates,
        &vocab,
        derive_seed(seed, "probes"),
    )?;
    let mut seen = problem_set(&clean);
    seen.extend(problem_set(&student));
    check_contamination(&probes, &seen)?;
    Ok(ReplicateData {
        seed,
        vocab,
        train_problems,
        probe_problems,
        pretrain_spec,
        student_spec,
        heldout_spec,
        clean,
        student,
        heldout,
        probes,
    })
}

/// Checkpoint file stem and report row name of a regime.
pub fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::Pretrain => "baseline",
        Regime::Fine(m) => m.as_str(),
    }
}

pub fn regime_from_name(name: &str) -> Option<Regime> {
    match name {
        "baseline" | "pretrain" => Some(Regime::Pretrain),
        other => other.parse::<TrainingMode>().ok().map(Regime::Fine),
    }
}

/// One trained regime: its checkpoint and stamped loss curve.
#[derive(Debug, Clone)]
pub struct TrainedRegime {
    pub regime: Regime,
    pub checkpoint: Checkpoint,
    pub loss_csv: String,
}

fn finish(cfg: &ExperimentConfig, data: &ReplicateData, regime: Regime, run: TrainRun) -> TrainedRegime {
    let name = regime_name(regime);
    let checkpoint = run.checkpoint(&data.vocab, name, data.seed, &cfg.hash());
    let loss_csv = format!("{}{}", stamp(cfg, data.seed).header(), run.curve_csv());
    TrainedRegime { regime, checkpoint, loss_csv }
}

pub fn train_pretrain(cfg: &ExperimentConfig, data: &ReplicateData) -> Result<TrainedRegime, PipelineError> {
    let mc = cfg.model_config(data.vocab.len(), data.seed);
    let tc = cfg.train_config(Regime::Pretrain, data.seed);
    let run = pretrain(&data.clean, &mc, &data.vocab, &tc)
        .map_err(|source| PipelineError::Train { regime: "baseline".into(), source })?;
    Ok(finish(cfg, data, Regime::Pretrain, run))
}

/// Fine-tunes from `init`, which is read back at checkpoint precision.
pub fn train_fine(
    cfg: &ExperimentConfig,
    data: &ReplicateData,
    mode: TrainingMode,
    init: &Checkpoint,
) -> Result<TrainedRegime, PipelineError> {
    let regime = Regime::Fine(mode);
    let tc = cfg.train_config(regime, data.seed);
    let start = init.parameters()?;
    let run = train(&data.student, mode, &start, &data.vocab, &tc)
        .map_err(|source| PipelineError::Train { regime: mode.as_str().into(), source })?;
    Ok(finish(cfg, data, regime, run))
}

/// Baseline, tutor, student, student-hal.
pub fn train_all(
    cfg: &ExperimentConfig,
    data: &ReplicateData,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<TrainedRegime>, PipelineError> {
    progress(&format!("seed {}: pretraining", data.seed));
    let base = train_pretrain(cfg, data)?;
    let mut out = vec![base];
    for mode in [TrainingMode::Tutor, TrainingMode::Student, TrainingMode::StudentHal] {
        progress(&format!("seed {}: fine-tuning {mode}", data.seed));
        let t = train_fine(cfg, data, mode, &out[0].checkpoint)?;
        out.push(t);
    }
    Ok(out)
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &ReplicateData,
    checkpoints: [&Checkpoint; 4],
) -> Result<EvalReport, PipelineError> {
    let inputs = EvalInputs {
        probes: &data.probes,
        heldout: &data.heldout,
        sample_problems: &data.train_problems,
        profile: &data.student_spec.profile,
        templates: &data.student_spec.templates,
        vocab: &data.vocab,
    };
    let settings = EvalSettings { n_samples: cfg.eval.n_samples, seed: derive_seed(data.seed, "eval") };
    Ok(paradox_report(checkpoints, &inputs, &settings)?)
}

#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub data: ReplicateData,
    pub trained: Vec<TrainedRegime>,
    pub report: EvalReport,
}

impl ReplicateResult {
    pub fn checkpoints(&self) -> [&Checkpoint; 4] {
        [0, 1, 2, 3].map(|i| &self.trained[i].checkpoint)
    }
}

pub fn run_replicate(
    cfg: &ExperimentConfig,
    replicate: usize,
    progress: &mut dyn FnMut(&str),
) -> Result<ReplicateResult, PipelineError> {
    let seed = cfg.replicate_seed(replicate);
    let data = prepare(cfg, seed)?;
    let trained = train_all(cfg, &data, progress)?;
    progress(&format!("seed {seed}: evaluating"));
    let report = evaluate(cfg, &data, [0, 1, 2, 3].map(|i| &trained[i].checkpoint))?;
    Ok(ReplicateResult { data, trained, report })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

pub fn write_corpora(dir: &Path, cfg: &ExperimentConfig, data: &ReplicateData) -> Result<(), PipelineError> {
    let hash = cfg.hash();
    for (name, spec, corpus) in [
        ("pretrain", &data.pretrain_spec, &data.clean),
        ("student", &data.student_spec, &data.student),
        ("heldout", &data.heldout_spec, &data.heldout),
    ] {
        let text = corpus_to_string(&CorpusHeader::new(spec, &data.vocab, &hash), corpus)?;
        write_file(&dir.join(format!("{name}.jsonl")), text.as_bytes())?;
    }
    let mut buf = Vec::new();
    write_probes(&mut buf, &data.probes, cfg.eval.probe_framing, &data.vocab, &stamp(cfg, data.seed))?;
    write_file(&dir.join("probes.jsonl"), &buf)
}

pub fn write_trained(dir: &Path, t: &TrainedRegime) -> Result<(), PipelineError> {
    let name = regime_name(t.regime);
    write_file(&dir.join(format!("{name}.sdpx")), &t.checkpoint.to_bytes())?;
    write_file(&dir.join(format!("{name}.loss.csv")), t.loss_csv.as_bytes())
}

pub fn write_report(dir: &Path, stem: &str, report: &EvalReport, stamp: &Stamp) -> Result<(), PipelineError> {
    write_file(&dir.join(format!("{stem}.csv")), report.to_csv(stamp).as_bytes())?;
    write_file(&dir.join(format!("{stem}.txt")), report.to_table(stamp).as_bytes())
}

/// `<out>/seed-<seed>/` holds corpora, probes, checkpoints, loss curves and
/// the per-replicate report.
pub fn replicate_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn write_replicate(out: &Path, cfg: &ExperimentConfig, r: &ReplicateResult) -> Result<(), PipelineError> {
    let dir = replicate_dir(out, r.data.seed);
    write_corpora(&dir.join("corpus"), cfg, &r.data)?;
    for t in &r.trained {
        write_trained(&dir.join("checkpoints"), t)?;
    }
    write_report(&dir, "report", &r.report, &stamp(cfg, r.data.seed))
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<EvalReport>,
    pub mean: EvalReport,
}

/// The full experiment: every replicate, then `summary.csv`/`summary.txt`
/// with the mean over replicates.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentResult, PipelineError> {
    let s = stamp(cfg, cfg.global.seed);
    write_file(&out.join("config.toml"), format!("{}{}", s.header(), cfg.to_toml()).as_bytes())?;
    let mut reports = Vec::with_capacity(cfg.global.replicates);
    for r in 0..cfg.global.replicates {
        let res = run_replicate(cfg, r, progress)?;
        write_replicate(out, cfg, &res)?;
        progress(&format!("seed {}:\n{}", res.data.seed, res.report.to_table(&stamp(cfg, res.data.seed))));
        reports.push(res.report);
    }
    let mean = mean_report(&reports)?;
    write_report(out, "summary", &mean, &s)?;
    Ok(ExperimentResult { reports, mean })
}

/// Guards an output directory against concurrent runs. The lock file is
/// removed on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = ".sdplab.lock";

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.display().to_string())),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::REGIMES;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_toml_with_overrides(
            "",
            &[
                "corpus.n_dialogues=24".into(),
                "corpus.pretrain_dialogues=24".into(),
                "corpus.heldout_dialogues=8".into(),
                "model.d_model=8".into(),
                "model.n_heads=2".into(),
                "model.n_layers=1".into(),
                "train.epochs=1".into(),
                "train.batch_size=8".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn probes_are_disjoint_from_training_data() {
        let cfg = tiny();
        let d = prepare(&cfg, 3).unwrap();
        let seen: std::collections::BTreeSet<_> = problem_set(&d.clean).into_iter().chain(problem_set(&d.student)).collect();
        assert!(d.probes.iter().all(|p| !seen.contains(&p.problem)));
        assert!(d.heldout.iter().all(|h| d.probe_problems.contains(&h.problem)));
        assert_eq!(d.probes.len(), d.probe_problems.len());
    }

    #[test]
    fn replicate_runs_and_writes_stamped_artifacts() {
        let cfg = tiny();
        let r = run_replicate(&cfg, 0, &mut |_| {}).unwrap();
        assert_eq!(r.report.rows.len(), 4);
        let rows: Vec<&str> = r.report.rows.iter().map(|x| x.regime.as_str()).collect();
        assert_eq!(rows, REGIMES);
        for t in &r.trained {
            assert_eq!(t.checkpoint.meta.config_hash, cfg.hash());
            assert_eq!(t.checkpoint.meta.regime, regime_name(t.regime));
        }
        let dir = tempfile::tempdir().unwrap();
        write_replicate(dir.path(), &cfg, &r).unwrap();
        let rd = replicate_dir(dir.path(), 0);
        let csv = fs::read_to_string(rd.join("report.csv")).unwrap();
        assert!(csv.contains(&format!("# config_hash={}", cfg.hash())));
        let loss = fs::read_to_string(rd.join("checkpoints/student.loss.csv")).unwrap();
        assert!(loss.starts_with("# tool_version="));
        let back = Checkpoint::load(&rd.join("checkpoints/student-hal.sdpx")).unwrap();
        assert_eq!(&back, &r.trained[3].checkpoint);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(a);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(regime_from_name(regime_name(r)), Some(r));
        }
        assert_eq!(regime_from_name("nope"), None);
    }
}
