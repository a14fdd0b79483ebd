//! Config-driven experiment runner.
//!
//! One [`Experiment`] owns the dataset, the patient-disjoint split and the
//! four leave-one-magnification-out folds. Stages write into a fixed
//! artifact tree under the output directory:
//!
//! ```text
//! run_manifest.toml            config hash, seed, version, methods, folds
//! config.resolved.toml
//! split/split_manifest.csv     sample_id,patient_id,split
//! split/fold_manifest.csv      sample_id,split,fold,role
//! split/audit.txt
//! <method>/<fold>/checkpoint.bin, history.csv        (train)
//! <method>/<fold>/metrics.csv, roc.csv, predictions.csv  (eval)
//! <method>/summary.csv, <method>/calibration.csv      (eval)
//! gan/<fold>/synthetic.csv, gan/<fold>/gan_losses.csv (train, gan only)
//! signature/<method>_coefficients.csv, signature/table.csv,
//! signature/stability.txt                             (signature)
//! FAILED                                              (only after a failure)
//! ```

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, GanConfig};
use crate::benchmark;
use crate::dataset::{
    generate_synthetic, ingest_feature_table, AccessLog, DatasetTable, FeatureSchema, Label,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsReport, ScoredSet};
use crate::exec::{self, Exec};
use crate::signature::{self, DEFAULT_ALPHA_STEPS, DEFAULT_GAMMAS};
use crate::splitting::{
    audit_leakage, build_lomo_folds, stratified_group_split, write_fold_manifest,
    write_split_manifest, LomoFold, SplitAssignment, DEFAULT_FRACTIONS,
};
use crate::training::{self, EncoderConfig, Method, TrainedModel};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Feature table to ingest; the synthetic generator is used when unset.
    pub path: Option<PathBuf>,
    pub schema: FeatureSchema,
    pub synthetic: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSet {
    pub baseline: EncoderConfig,
    pub gan: EncoderConfig,
    pub grl: EncoderConfig,
}

impl EncoderSet {
    pub fn get(&self, m: Method) -> &EncoderConfig {
        match m {
            Method::Baseline => &self.baseline,
            Method::Gan => &self.gan,
            Method::Grl => &self.grl,
        }
    }

    fn get_mut(&mut self, m: Method) -> &mut EncoderConfig {
        match m {
            Method::Baseline => &mut self.baseline,
            Method::Gan => &mut self.gan,
            Method::Grl => &mut self.grl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignatureConfig {
    pub alpha_steps: usize,
    pub gammas: Vec<f64>,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        Self {
            alpha_steps: DEFAULT_ALPHA_STEPS,
            gammas: DEFAULT_GAMMAS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub threshold: f64,
    pub calibration_bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            threshold: evaluation::DEFAULT_THRESHOLD,
            calibration_bins: evaluation::DEFAULT_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Added to every section seed.
    pub seed: u64,
    /// Worker threads for fold x method jobs; all cores when unset.
    pub jobs: Option<usize>,
    pub methods: Vec<Method>,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub encoder: EncoderSet,
    pub gan: GanConfig,
    pub signature: SignatureConfig,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            methods: vec![Method::Baseline, Method::Gan, Method::Grl],
            data: DataConfig::default(),
            split: SplitConfig::default(),
            encoder: EncoderSet::default(),
            gan: GanConfig::default(),
            signature: SignatureConfig::default(),
            evaluation: EvaluationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every structural and range problem, keyed by dotted field path.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.methods.is_empty() {
            out.push(("methods".into(), "must name at least one method".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            out.push(("methods".into(), "contains duplicates".into()));
        }
        let f = &self.split.fractions;
        if f.len() != 3 {
            out.push((
                "split.fractions".into(),
                format!("needs 3 entries, got {}", f.len()),
            ));
        } else if f.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            out.push((
                "split.fractions".into(),
                format!(
                    "must be positive and sum to 1, got {f:?} (sum {})",
                    f.iter().sum::<f64>()
                ),
            ));
        }
        if self.jobs == Some(0) {
            out.push(("jobs".into(), "must be >= 1".into()));
        }
        if let Some(p) = &self.data.path {
            if !p.is_file() {
                out.push((
                    "data.path".into(),
                    format!("{} is not a readable file", p.display()),
                ));
            }
        }
        out.extend(
            self.data
                .synthetic
                .violations()
                .into_iter()
                .map(|(k, v)| (format!("data.synthetic.{k}"), v)),
        );
        for m in [Method::Baseline, Method::Gan, Method::Grl] {
            out.extend(
                self.encoder
                    .get(m)
                    .violations(&format!("encoder.{}", m.name())),
            );
        }
        out.extend(self.gan.violations());
        if self.signature.alpha_steps < 1 {
            out.push(("signature.alpha_steps".into(), "must be >= 1".into()));
        }
        if self.signature.gammas.is_empty()
            || self
                .signature
                .gammas
                .iter()
                .any(|g| !(g.is_finite() && *g >= 0.0))
        {
            out.push((
                "signature.gammas".into(),
                "must be a nonempty list of values >= 0".into(),
            ));
        }
        let t = self.evaluation.threshold;
        if !(0.0..=1.0).contains(&t) {
            out.push(("evaluation.threshold".into(), "must lie in [0, 1]".into()));
        }
        if self.evaluation.calibration_bins < 1 {
            out.push(("evaluation.calibration_bins".into(), "must be >= 1".into()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            return Ok(());
        }
        if let [(field, reason)] = &v[..] {
            return Err(Error::Config {
                field: field.clone(),
                reason: reason.clone(),
            });
        }
        let reason = v
            .iter()
            .map(|(k, r)| format!("{k}: {r}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Config {
            field: format!("{} fields", v.len()),
            reason,
        })
    }

    /// Section seeds offset by the global seed.
    pub fn resolved_seeds(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.data.synthetic.seed = c.data.synthetic.seed.wrapping_add(s);
        c.split.seed = c.split.seed.wrapping_add(s);
        c.gan.seed = c.gan.seed.wrapping_add(s);
        for m in [Method::Baseline, Method::Gan, Method::Grl] {
            let e = c.encoder.get_mut(m);
            e.seed = e.seed.wrapping_add(s);
        }
        c
    }

    /// SHA-256 of the canonical TOML with the output directory and worker
    /// count removed, since neither changes any exported number.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        c.jobs = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text)
}

/// All problems in a config file at once; an empty list means valid. Only
/// an unreadable file is an error.
pub fn validate_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(match ExperimentConfig::from_toml(&text) {
        Ok(cfg) => cfg.violations(),
        Err(Error::Config { field, reason }) => vec![(field, reason)],
        Err(e) => vec![("config".into(), e.to_string())],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Split,
    Train,
    Eval,
    Signature,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Signature => "signature",
            Stage::All => "all",
        }
    }
}

pub const FAILED_MARKER: &str = "FAILED";

pub struct Experiment {
    cfg: ExperimentConfig,
    out: PathBuf,
    ds: DatasetTable,
    split: SplitAssignment,
    folds: Vec<LomoFold>,
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

impl Experiment {
    /// Validates the config, loads or generates the data and builds the
    /// split and folds. Section seeds are resolved against the global seed.
    pub fn new(cfg: &ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved_seeds();
        let ds = match &cfg.data.path {
            Some(p) => ingest_feature_table(p, &cfg.data.schema),
            None => generate_synthetic(&cfg.data.synthetic),
        }
        .map_err(stage_err("data"))?;
        let f = &cfg.split.fractions;
        let split = stratified_group_split(&ds, [f[0], f[1], f[2]], cfg.split.seed)
            .map_err(stage_err("split"))?;
        let folds = build_lomo_folds(&ds, &split).map_err(stage_err("split"))?;
        Ok(Self {
            cfg,
            out: out.into(),
            ds,
            split,
            folds,
        })
    }

    /// Records every sample the stages read through dataset views.
    pub fn with_access_log(mut self, log: Arc<AccessLog>) -> Self {
        self.ds = self.ds.with_access_log(log);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &DatasetTable {
        &self.ds
    }

    pub fn folds(&self) -> &[LomoFold] {
        &self.folds
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn method_dir(&self, m: Method, fold: &LomoFold) -> PathBuf {
        self.out.join(m.name()).join(fold.name())
    }

    /// Runs one stage (or all of them). On failure a `FAILED` marker naming
    /// the stage is written next to whatever artifacts were completed.
    pub fn run(&self, stage: Stage) -> Result<()> {
        let result = self.run_inner(stage);
        let marker = self.out.join(FAILED_MARKER);
        match &result {
            Ok(()) => {
                if marker.exists() {
                    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
                }
            }
            Err(e) => {
                let stage_name = match e {
                    Error::Stage { stage, .. } => stage,
                    _ => stage.name(),
                };
                // Best effort: the original error matters more than this one.
                let _ = write_with(&marker, |w| {
                    writeln!(w, "stage = \"{stage_name}\"\nerror = {:?}", e.to_string())
                });
            }
        }
        result
    }

    fn run_inner(&self, stage: Stage) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        self.write_manifest()?;
        match stage {
            Stage::Split => self.split_stage().map_err(stage_err("split")),
            Stage::Train => self.train_stage(),
            Stage::Eval => self.eval_stage().map_err(stage_err("eval")),
            Stage::Signature => self.signature_stage().map_err(stage_err("signature")),
            Stage::All => {
                self.split_stage().map_err(stage_err("split"))?;
                self.train_stage()?;
                self.eval_stage().map_err(stage_err("eval"))?;
                self.signature_stage().map_err(stage_err("signature"))
            }
        }
    }

    fn write_manifest(&self) -> Result<()> {
        let folds: Vec<String> = self.folds.iter().map(LomoFold::name).collect();
        let methods: Vec<&str> = self.cfg.methods.iter().map(|m| m.name()).collect();
        let manifest = toml::toml! {
            tool = "lomo"
            version = (env!("CARGO_PKG_VERSION"))
            config_sha256 = (self.cfg.hash())
            seed = (self.cfg.seed as i64)
            data_seed = (self.cfg.data.synthetic.seed as i64)
            split_seed = (self.cfg.split.seed as i64)
            gan_seed = (self.cfg.gan.seed as i64)
            encoder_seed = (self.cfg.encoder.baseline.seed as i64)
            methods = (methods)
            folds = (folds)
            samples = (self.ds.len() as i64)
        };
        write_with(&self.out.join("run_manifest.toml"), |w| {
            w.write_all(manifest.to_string().as_bytes())
        })?;
        write_with(&self.out.join("config.resolved.toml"), |w| {
            w.write_all(self.cfg.to_toml().as_bytes())
        })
    }

    pub fn split_stage(&self) -> Result<()> {
        let dir = self.out.join("split");
        write_with(&dir.join("split_manifest.csv"), |w| {
            write_split_manifest(w, &self.ds, &self.split)
        })?;
        write_with(&dir.join("fold_manifest.csv"), |w| {
            write_fold_manifest(w, &self.ds, &self.split, &self.folds)
        })?;
        let mut text = String::new();
        let fr = self.split.sample_fractions();
        let pf = self.split.patient_fractions();
        writeln!(
            text,
            "sample_fractions = {fr:?}\npatient_fractions = {pf:?}"
        )
        .unwrap();
        let mut failed = Vec::new();
        for fold in &self.folds {
            let report = audit_leakage(fold, &self.ds);
            if !report.passed() {
                failed.push(fold.name());
            }
            writeln!(text, "\n{report}").unwrap();
        }
        write_with(&dir.join("audit.txt"), |w| w.write_all(text.as_bytes()))?;
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity(format!(
                "leakage audit failed for {}",
                failed.join(", ")
            )))
        }
    }

    fn jobs(&self) -> Vec<(Method, usize)> {
        self.cfg
            .methods
            .iter()
            .flat_map(|&m| (0..self.folds.len()).map(move |i| (m, i)))
            .collect()
    }

    fn parallel<T: Send, F>(&self, jobs: &[(Method, usize)], f: F) -> Vec<T>
    where
        F: Fn(&(Method, usize)) -> T + Sync + Send,
    {
        exec::with_workers(self.cfg.jobs, || Exec::default().map(jobs, f))
    }

    /// Trains every method on every fold. A failing job does not stop the
    /// others; the first failure in job order is reported, naming the stage
    /// (`gan` for augmentation failures, `train` otherwise).
    pub fn train_stage(&self) -> Result<()> {
        let jobs = self.jobs();
        let results = self.parallel(&jobs, |&(m, i)| self.train_job(m, &self.folds[i]));
        for ((m, i), r) in jobs.iter().zip(results) {
            if let Err(e) = r {
                let stage = if *m == Method::Gan { "gan" } else { "train" };
                return Err(Error::Stage {
                    stage,
                    source: Box::new(Error::Training(format!(
                        "{}/{}: {e}",
                        m.name(),
                        self.folds[*i].name()
                    ))),
                });
            }
        }
        Ok(())
    }

    fn train_job(&self, m: Method, fold: &LomoFold) -> Result<()> {
        let cfg = self.cfg.encoder.get(m);
        let dir = self.method_dir(m, fold);
        let model = match m {
            Method::Baseline => training::train_baseline(fold, &self.ds, cfg)?,
            Method::Grl => training::train_grl(fold, &self.ds, cfg)?,
            Method::Gan => {
                let benign = augment::train_gan(fold, &self.ds, Label::Benign, &self.cfg.gan)?;
                let malignant =
                    augment::train_gan(fold, &self.ds, Label::Malignant, &self.cfg.gan)?;
                let aug =
                    augment::mix_augmented(fold, &self.ds, &benign, &malignant, &self.cfg.gan)?;
                write_with(&dir.join("synthetic.csv"), |w| {
                    augment::write_synthetic(w, &aug.synthetic)
                })?;
                write_with(&dir.join("gan_losses.csv"), |w| {
                    writeln!(w, "class,step,d_loss,g_loss")?;
                    for (name, pair) in [("benign", &benign), ("malignant", &malignant)] {
                        for s in &pair.history {
                            writeln!(w, "{name},{},{},{}", s.step, s.d_loss, s.g_loss)?;
                        }
                    }
                    Ok(())
                })?;
                training::train_variant(fold, &self.ds, cfg, false, &aug.synthetic)?
            }
        };
        write_with(&dir.join("checkpoint.bin"), |w| model.write_checkpoint(w))?;
        write_with(&dir.join("history.csv"), |w| model.write_history(w))
    }

    fn load_model(&self, m: Method, fold: &LomoFold) -> Result<TrainedModel> {
        let path = self.method_dir(m, fold).join("checkpoint.bin");
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        TrainedModel::read_checkpoint(std::io::BufReader::new(file))
    }

    /// Test-split metrics per method and fold, plus per-method averages and
    /// the pooled calibration curve. First stage to read test samples.
    pub fn eval_stage(&self) -> Result<()> {
        let jobs = self.jobs();
        let ev = &self.cfg.evaluation;
        let results = self.parallel(&jobs, |&(m, i)| -> Result<(ScoredSet, MetricsReport)> {
            let fold = &self.folds[i];
            let model = self.load_model(m, fold)?;
            let scored = benchmark::test_scores(&model, &self.ds, fold, m)?;
            let report = evaluation::evaluate(&scored, ev.threshold, ev.calibration_bins)?;
            let dir = self.method_dir(m, fold);
            write_with(&dir.join("metrics.csv"), |w| {
                evaluation::write_report(w, m.name(), &fold.name(), &report)
            })?;
            write_with(&dir.join("roc.csv"), |w| {
                evaluation::write_roc(w, &report.roc_points)
            })?;
            write_with(&dir.join("predictions.csv"), |w| {
                evaluation::write_predictions(w, &fold.test_ids, &scored)
            })?;
            Ok((scored, report))
        });
        let results: Vec<(ScoredSet, MetricsReport)> =
            results.into_iter().collect::<Result<_>>()?;
        for &m in &self.cfg.methods {
            let mine: Vec<&(ScoredSet, MetricsReport)> = jobs
                .iter()
                .zip(&results)
                .filter(|((jm, _), _)| *jm == m)
                .map(|(_, r)| r)
                .collect();
            let reports: Vec<MetricsReport> = mine.iter().map(|(_, r)| r.clone()).collect();
            let mean = evaluation::aggregate_report(&reports)?;
            let dir = self.out.join(m.name());
            write_with(&dir.join("summary.csv"), |w| {
                writeln!(w, "method,fold,metric,value")?;
                for (s, r) in &mine {
                    for (k, v) in r.scalar_fields() {
                        writeln!(w, "{},{},{k},{v}", m.name(), s.fold)?;
                    }
                }
                for (k, v) in mean.scalar_fields() {
                    writeln!(w, "{},mean,{k},{v}", m.name())?;
                }
                Ok(())
            })?;
            let pooled = ScoredSet::pooled(mine.iter().map(|(s, _)| s), m.name());
            let bins = evaluation::calibration_curve(&pooled, ev.calibration_bins)?;
            write_with(&dir.join("calibration.csv"), |w| {
                evaluation::write_calibration(w, &bins)
            })?;
        }
        Ok(())
    }

    /// Sparse signatures on baseline and GRL embeddings: coefficients, the
    /// per-fold sparse-model test AUC and size, and one stability report
    /// covering both methods.
    pub fn signature_stage(&self) -> Result<()> {
        let methods: Vec<Method> = self
            .cfg
            .methods
            .iter()
            .copied()
            .filter(|m| matches!(m, Method::Baseline | Method::Grl))
            .collect();
        if methods.is_empty() {
            return Ok(());
        }
        let jobs: Vec<(Method, usize)> = methods
            .iter()
            .flat_map(|&m| (0..self.folds.len()).map(move |i| (m, i)))
            .collect();
        let sc = &self.cfg.signature;
        let fits = self.parallel(&jobs, |&(m, i)| -> Result<(signature::SparseModel, f64)> {
            let fold = &self.folds[i];
            let model = self.load_model(m, fold)?;
            let sparse =
                benchmark::fold_signature_with(&model, &self.ds, fold, sc.alpha_steps, &sc.gammas)?;
            let auc = benchmark::sparse_test_auc(&model, &sparse, &self.ds, fold)?;
            Ok((sparse.model, auc))
        });
        let fits: Vec<(signature::SparseModel, f64)> = fits.into_iter().collect::<Result<_>>()?;
        let dir = self.out.join("signature");
        let mut stability = String::new();
        let mut table = String::from("method,fold,metric,value\n");
        for &m in &methods {
            let mine: Vec<(String, &(signature::SparseModel, f64))> = jobs
                .iter()
                .zip(&fits)
                .filter(|((jm, _), _)| *jm == m)
                .map(|((_, i), f)| (self.folds[*i].name(), f))
                .collect();
            let named: Vec<(String, &signature::SparseModel)> =
                mine.iter().map(|(n, f)| (n.clone(), &f.0)).collect();
            write_with(&dir.join(format!("{}_coefficients.csv", m.name())), |w| {
                signature::write_coefficients(w, &named)
            })?;
            let supports: Vec<Vec<usize>> = mine.iter().map(|(_, f)| f.0.support.clone()).collect();
            let p = self.cfg.encoder.get(m).embedding_dim;
            let report = signature::stability_report(&supports, p)?
                .with_labels(mine.iter().map(|(n, _)| n.clone()).collect());
            report
                .write_sections(&mut stability, &format!("{}.", m.name()))
                .unwrap();
            let rows: Vec<MetricsReport> = mine
                .iter()
                .map(|(_, f)| MetricsReport::scalars(f.1, Some(f.0.support.len() as f64)))
                .collect();
            for ((name, _), r) in mine.iter().zip(&rows) {
                writeln!(table, "{},{name},auc,{}", m.name(), r.auc).unwrap();
                writeln!(
                    table,
                    "{},{name},signature_size,{}",
                    m.name(),
                    r.signature_size.unwrap()
                )
                .unwrap();
            }
            let mean = evaluation::aggregate_report(&rows)?;
            writeln!(table, "{},mean,auc,{}", m.name(), mean.auc).unwrap();
            writeln!(
                table,
                "{},mean,signature_size,{}",
                m.name(),
                mean.signature_size.unwrap()
            )
            .unwrap();
            writeln!(
                table,
                "{},mean,jaccard_off_diagonal,{}",
                m.name(),
                report.mean_off_diagonal_jaccard()
            )
            .unwrap();
        }
        write_with(&dir.join("stability.txt"), |w| {
            w.write_all(stability.as_bytes())
        })?;
        write_with(&dir.join("table.csv"), |w| w.write_all(table.as_bytes()))
    }
}
