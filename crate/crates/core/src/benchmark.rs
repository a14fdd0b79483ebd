//! Desk-scale invariance benchmark: baseline versus gradient-reversal
//! encoders on a synthetic dataset with magnification-specific style.
//!
//! Per fold it measures how well a linear probe recovers the magnification
//! from frozen embeddings, the pathology AUC on the held-out magnification,
//! and the sparse signature selected on the embeddings.

use crate::dataset::{generate_synthetic, DatasetTable, SampleId, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, ScoredSet};
use crate::exec::Exec;
use crate::matrix::Matrix;
use crate::signature::{self, SparseModel};
use crate::splitting::{build_lomo_folds, stratified_group_split, LomoFold, DEFAULT_FRACTIONS};
use crate::training::{self, EncoderConfig, Method, TrainedModel};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchmarkConfig {
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldOutcome {
    pub fold: String,
    pub method: Method,
    pub probe_accuracy: f64,
    pub test_auc: f64,
    /// Filled in by [`BenchmarkOutcome::attach_signatures`].
    pub signature: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutcome {
    pub seed: u64,
    pub folds: Vec<FoldOutcome>,
    ds: DatasetTable,
    lomo: Vec<LomoFold>,
    models: Vec<TrainedModel>,
}

/// Probe and signature thresholds of the invariance check.
pub const GRL_PROBE_MAX: f64 = 0.45;
pub const BASELINE_PROBE_MIN: f64 = 0.60;
pub const AUC_SLACK: f64 = 0.05;

impl BenchmarkOutcome {
    fn of(&self, m: Method) -> impl Iterator<Item = &FoldOutcome> {
        self.folds.iter().filter(move |f| f.method == m)
    }

    pub fn mean_probe(&self, m: Method) -> f64 {
        let v: Vec<f64> = self.of(m).map(|f| f.probe_accuracy).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_jaccard(&self, m: Method, dim: usize) -> Result<f64> {
        let supports = self
            .of(m)
            .map(|f| f.signature.clone())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Data("signatures not attached".into()))?;
        Ok(signature::stability_report(&supports, dim)?.mean_off_diagonal_jaccard())
    }

    /// Selects a sparse signature for every trained model.
    pub fn attach_signatures(&mut self, exec: Exec) -> Result<()> {
        let idx: Vec<usize> = (0..self.folds.len()).collect();
        let lomo = &self.lomo;
        let (ds, models, folds) = (&self.ds, &self.models, &self.folds);
        let sigs = exec.map(&idx, |&j| {
            let fold = lomo
                .iter()
                .find(|f| f.name() == folds[j].fold)
                .expect("fold exists");
            fold_signature(&models[j], ds, fold).map(|m| m.support)
        });
        for (f, s) in self.folds.iter_mut().zip(sigs) {
            f.signature = Some(s?);
        }
        Ok(())
    }

    /// GRL probe near chance, baseline probe well above it, and no fold where
    /// GRL loses more than the slack in held-out AUC.
    pub fn invariance_holds(&self) -> bool {
        let aucs_ok = self.of(Method::Grl).all(|g| {
            self.of(Method::Baseline)
                .find(|b| b.fold == g.fold)
                .is_some_and(|b| g.test_auc >= b.test_auc - AUC_SLACK)
        });
        self.mean_probe(Method::Grl) <= GRL_PROBE_MAX
            && self.mean_probe(Method::Baseline) >= BASELINE_PROBE_MIN
            && aucs_ok
    }

    pub fn stability_holds(&self, dim: usize) -> Result<bool> {
        Ok(self.mean_jaccard(Method::Grl, dim)? >= self.mean_jaccard(Method::Baseline, dim)?)
    }
}

/// Embeddings of the given samples, plus their labels and domain indices
/// where the fold defines one.
fn embed_split(
    model: &TrainedModel,
    ds: &DatasetTable,
    fold: &LomoFold,
    ids: &[SampleId],
) -> Result<(Matrix, Vec<f64>, Vec<usize>)> {
    let samples = ds.view(ids)?;
    let z = training::embed_samples(model, &samples)?;
    let y = samples.iter().map(|s| s.label.as_f64()).collect();
    let d = samples
        .iter()
        .map(|s| fold.domain_index(s.magnification).unwrap_or(0))
        .collect();
    Ok((z, y, d))
}

/// Elastic-net signature on standardized embeddings, tuned on validation
/// over the default grid.
pub fn fold_signature(
    model: &TrainedModel,
    ds: &DatasetTable,
    fold: &LomoFold,
) -> Result<SparseModel> {
    Ok(fold_signature_with(
        model,
        ds,
        fold,
        signature::DEFAULT_ALPHA_STEPS,
        &signature::DEFAULT_GAMMAS,
    )?
    .model)
}

/// A selected sparse model with the standardizer it was fit under.
#[derive(Clone, Debug)]
pub struct FoldSignature {
    pub standardizer: signature::Standardizer,
    pub model: SparseModel,
}

pub fn fold_signature_with(
    model: &TrainedModel,
    ds: &DatasetTable,
    fold: &LomoFold,
    alpha_steps: usize,
    gammas: &[f64],
) -> Result<FoldSignature> {
    let (zt, yt, _) = embed_split(model, ds, fold, &fold.train_ids)?;
    let (zv, yv, _) = embed_split(model, ds, fold, &fold.val_ids)?;
    let st = signature::fit_standardizer(&zt)?;
    let (zt, zv) = (st.transform(&zt)?, st.transform(&zv)?);
    let grid = signature::alpha_grid(signature::alpha_max(&zt, &yt), alpha_steps, gammas);
    let sel =
        signature::select_regularization_with(Exec::Sequential, (&zt, &yt), (&zv, &yv), &grid)?;
    Ok(FoldSignature {
        standardizer: st,
        model: sel.model,
    })
}

/// Held-out-magnification AUC of the sparse model on test embeddings.
pub fn sparse_test_auc(
    model: &TrainedModel,
    sig: &FoldSignature,
    ds: &DatasetTable,
    fold: &LomoFold,
) -> Result<f64> {
    let (z, y, _) = embed_split(model, ds, fold, &fold.test_ids)?;
    let probs = sig.model.predict_proba(&sig.standardizer.transform(&z)?);
    evaluation::auc_scores(&y, &probs)
}

pub fn fold_probe(model: &TrainedModel, ds: &DatasetTable, fold: &LomoFold) -> Result<f64> {
    let (zt, _, dt) = embed_split(model, ds, fold, &fold.train_ids)?;
    let (zv, _, dv) = embed_split(model, ds, fold, &fold.val_ids)?;
    training::domain_probe_accuracy(&zt, &dt, &zv, &dv, fold.n_domains())
}

pub fn test_scores(
    model: &TrainedModel,
    ds: &DatasetTable,
    fold: &LomoFold,
    method: Method,
) -> Result<ScoredSet> {
    let samples = ds.view(&fold.test_ids)?;
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.values.as_slice()).collect();
    let probs = training::predict_proba(model, &rows)?;
    ScoredSet::new(
        samples.iter().map(|s| s.label.as_u8()).collect(),
        probs,
        fold.name(),
        method.name(),
    )
}

/// One benchmark repetition without signatures; `seed` drives data
/// generation, the split and encoder initialisation.
pub fn run_invariance_benchmark(
    cfg: &BenchmarkConfig,
    seed: u64,
    exec: Exec,
) -> Result<BenchmarkOutcome> {
    let synth = SynthConfig {
        seed,
        ..cfg.synth.clone()
    };
    let ds = generate_synthetic(&synth)?;
    let split = stratified_group_split(&ds, DEFAULT_FRACTIONS, seed)?;
    let folds = build_lomo_folds(&ds, &split)?;
    let encoder = EncoderConfig {
        seed,
        ..cfg.encoder.clone()
    };
    let jobs: Vec<(usize, Method)> = (0..folds.len())
        .flat_map(|i| [(i, Method::Baseline), (i, Method::Grl)])
        .collect();
    let trained = exec.map(
        &jobs,
        |&(i, method)| -> Result<(FoldOutcome, TrainedModel)> {
            let fold = &folds[i];
            let model = match method {
                Method::Grl => training::train_grl(fold, &ds, &encoder)?,
                _ => training::train_baseline(fold, &ds, &encoder)?,
            };
            let scored = test_scores(&model, &ds, fold, method)?;
            let outcome = FoldOutcome {
                fold: fold.name(),
                method,
                probe_accuracy: fold_probe(&model, &ds, fold)?,
                test_auc: evaluation::auc(&scored)?,
                signature: None,
            };
            Ok((outcome, model))
        },
    );
    let (outcomes, models): (Vec<_>, Vec<_>) = trained
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(BenchmarkOutcome {
        seed,
        folds: outcomes,
        ds,
        lomo: folds,
        models,
    })
}
