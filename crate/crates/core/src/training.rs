//! Encoder training for the three model variants and the frozen-embedding
//! domain probe.
//!
//! All variants share one loop: shuffled mini-batches, weighted BCE on the
//! pathology head, plain SGD, per-epoch validation loss and early stopping.
//! The adversarial variant adds a domain head fed through a gradient
//! reversal node, so a single backward pass trains the domain head to
//! predict magnification while pushing the encoder the other way.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::SyntheticSample;
use crate::autodiff::{self, Graph, Tensor};
use crate::dataset::{DatasetTable, Label, Magnification, Sample, SampleId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Mlp;
use crate::splitting::{audit_leakage, LomoFold};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Width of the input vectors; 0 means "take it from the data".
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Gradient reversal strength.
    pub lambda: f64,
    /// Linear ramp of lambda from 0 over this many epochs; 0 disables it.
    pub lambda_warmup_epochs: usize,
    pub patience: usize,
    /// Maximum joint gradient norm per optimizer step; 0 disables clipping.
    pub grad_clip: f64,
    /// Domain head learning rate as a multiple of `lr`.
    pub domain_lr_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden_widths: vec![64, 32],
            embedding_dim: 32,
            seed: 0,
            lr: 0.01,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 150,
            lambda: 0.1,
            lambda_warmup_epochs: 0,
            patience: 20,
            grad_clip: 5.0,
            domain_lr_scale: 5.0,
        }
    }
}

impl EncoderConfig {
    pub fn violations(&self, prefix: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |f: &str, r: &str| out.push((format!("{prefix}.{f}"), r.to_string()));
        if self.embedding_dim < 1 {
            push("embedding_dim", "must be >= 1");
        }
        if self.max_epochs < 1 {
            push("max_epochs", "must be >= 1");
        }
        if self.batch_size < 1 {
            push("batch_size", "must be >= 1");
        }
        if self.hidden_widths.contains(&0) {
            push("hidden_widths", "widths must be >= 1");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            push("lambda", "must be finite and >= 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            push("lr", "must be > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            push("weight_decay", "must be >= 0");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            push("grad_clip", "must be >= 0");
        }
        if !(self.domain_lr_scale.is_finite() && self.domain_lr_scale > 0.0) {
            push("domain_lr_scale", "must be > 0");
        }
        out
    }

    fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.hidden_widths);
        s.push(self.embedding_dim);
        s
    }

    fn lambda_at(&self, epoch: usize) -> f64 {
        if self.lambda_warmup_epochs == 0 {
            self.lambda
        } else {
            self.lambda * ((epoch - 1) as f64 / self.lambda_warmup_epochs as f64).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Gan,
    Grl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Gan => "gan",
            Method::Grl => "grl",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub encoder: Mlp,
    pub pathology_head: Mlp,
    pub domain_head: Option<Mlp>,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

/// Flattened training rows; `domain` is `None` for rows that must not reach
/// the domain loss.
struct Design {
    x: Vec<f64>,
    dim: usize,
    y: Vec<f64>,
    domain: Vec<Option<usize>>,
}

impl Design {
    fn new(dim: usize) -> Self {
        Self {
            x: Vec::new(),
            dim,
            y: Vec::new(),
            domain: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.y.len()
    }

    fn push(&mut self, values: &[f64], label: Label, domain: Option<usize>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Shape(format!(
                "sample has {} values, encoder expects {}",
                values.len(),
                self.dim
            )));
        }
        self.x.extend_from_slice(values);
        self.y.push(label.as_f64());
        self.domain.push(domain);
        Ok(())
    }

    fn batch(&self, idx: &[usize]) -> (Tensor, Vec<f64>, Vec<usize>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        let mut rows = Vec::new();
        let mut doms = Vec::new();
        for (r, &i) in idx.iter().enumerate() {
            x.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
            y.push(self.y[i]);
            if let Some(d) = self.domain[i] {
                rows.push(r);
                doms.push(d);
            }
        }
        let x = Tensor::new(vec![idx.len(), self.dim], x).expect("sized");
        (x, y, rows, doms)
    }

    fn rows(&self) -> Vec<&[f64]> {
        self.x.chunks(self.dim.max(1)).take(self.len()).collect()
    }
}

fn design_from(
    ds: &DatasetTable,
    ids: &[SampleId],
    dim: usize,
    domain_of: impl Fn(Magnification) -> Option<usize>,
) -> Result<Design> {
    let mut d = Design::new(dim);
    for s in ds.view(ids)? {
        d.push(&s.values, s.label, domain_of(s.magnification))?;
    }
    Ok(d)
}

pub fn train_baseline(
    fold: &LomoFold,
    ds: &DatasetTable,
    cfg: &EncoderConfig,
) -> Result<TrainedModel> {
    train_variant(fold, ds, cfg, false, &[])
}

pub fn train_grl(fold: &LomoFold, ds: &DatasetTable, cfg: &EncoderConfig) -> Result<TrainedModel> {
    train_variant(fold, ds, cfg, true, &[])
}

/// Trains on the fold's real training samples plus `extra` synthetic ones.
/// Synthetic samples never enter the domain loss, and `pos_weight` stays
/// the fold's real-sample ratio.
pub fn train_variant(
    fold: &LomoFold,
    ds: &DatasetTable,
    cfg: &EncoderConfig,
    adversarial: bool,
    extra: &[SyntheticSample],
) -> Result<TrainedModel> {
    let report = audit_leakage(fold, ds);
    if !report.passed() {
        return Err(Error::Training(format!(
            "fold {} fails the leakage audit",
            fold.held_out
        )));
    }
    if fold.train_ids.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let dim = if cfg.input_dim == 0 {
        ds.input_dim()
    } else {
        cfg.input_dim
    };
    let encode = |m: Magnification| fold.domain_index(m);
    let mut train = design_from(ds, &fold.train_ids, dim, encode)?;
    for s in extra {
        train.push(&s.values, s.label, None)?;
    }
    let val = design_from(ds, &fold.val_ids, dim, encode)?;
    let k = adversarial.then(|| fold.n_domains());
    fit(&train, &val, cfg, fold.pos_weight, k)
}

fn fit(
    train: &Design,
    val: &Design,
    cfg: &EncoderConfig,
    pos_weight: f64,
    domains: Option<usize>,
) -> Result<TrainedModel> {
    if let Some((field, reason)) = cfg.violations("encoder").into_iter().next() {
        return Err(Error::Config { field, reason });
    }
    if train.len() == 0 {
        return Err(Error::Training("empty training split".into()));
    }
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Mlp::new(&cfg.layer_sizes(train.dim), &mut init);
    let mut head = Mlp::new(&[cfg.embedding_dim, 1], &mut init);
    // Separate stream so the shared parameters match across variants.
    let mut domain_head = domains.map(|k| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(2);
        Mlp::new(&[cfg.embedding_dim, k], &mut r)
    });
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (
        f64::INFINITY,
        0usize,
        encoder.clone(),
        head.clone(),
        domain_head.clone(),
    );

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let lambda = cfg.lambda_at(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y, dom_rows, doms) = train.batch(chunk);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let (z, enc_vars) = encoder.forward(&mut g, xv)?;
            let (logit, head_vars) = head.forward(&mut g, z)?;
            let path = g.weighted_bce(logit, &y, pos_weight)?;
            loss_sum += g.scalar(path) * chunk.len() as f64;

            let mut dom_vars = None;
            let total = match domain_head.as_ref() {
                Some(dh) if !dom_rows.is_empty() => {
                    let zd = g.gather_rows(z, &dom_rows)?;
                    let rev = g.grad_reverse(zd, lambda);
                    let (dl, vars) = dh.forward(&mut g, rev)?;
                    dom_vars = Some(vars);
                    let mag = g.multiclass_ce(dl, &doms)?;
                    g.add(path, mag)?
                }
                _ => path,
            };
            let grads = g.backward(total)?;
            encoder.accumulate(&grads, &enc_vars);
            head.accumulate(&grads, &head_vars);
            if cfg.grad_clip > 0.0 {
                autodiff::clip_grad_norm(
                    encoder.params_mut().chain(head.params_mut()),
                    cfg.grad_clip,
                );
            }
            autodiff::sgd_step(
                encoder.params_mut().chain(head.params_mut()),
                cfg.lr,
                cfg.weight_decay,
            )?;
            if let (Some(dh), Some(vars)) = (domain_head.as_mut(), dom_vars) {
                dh.accumulate(&grads, &vars);
                if cfg.grad_clip > 0.0 {
                    autodiff::clip_grad_norm(dh.params_mut(), cfg.grad_clip);
                }
                autodiff::sgd_step(
                    dh.params_mut(),
                    cfg.lr * cfg.domain_lr_scale,
                    cfg.weight_decay,
                )?;
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = if val.len() == 0 {
            train_loss
        } else {
            pathology_loss(&encoder, &head, val, pos_weight)?
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numeric { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (
                val_loss,
                epoch,
                encoder.clone(),
                head.clone(),
                domain_head.clone(),
            );
        } else if epoch - best.1 >= cfg.patience.max(1) {
            break;
        }
    }
    let (_, selected_epoch, encoder, pathology_head, domain_head) = best;
    Ok(TrainedModel {
        encoder,
        pathology_head,
        domain_head,
        history,
        selected_epoch,
    })
}

fn pathology_loss(encoder: &Mlp, head: &Mlp, d: &Design, pos_weight: f64) -> Result<f64> {
    let z = encoder.infer(&d.rows())?;
    let logits: Vec<f64> = head.infer(&z)?.into_iter().map(|r| r[0]).collect();
    let mut g = Graph::new();
    let s = g.constant(&Tensor::new(vec![logits.len()], logits)?);
    let l = g.weighted_bce(s, &d.y, pos_weight)?;
    Ok(g.scalar(l))
}

/// Embeddings `f(x)` of each row, as an `n x p` matrix.
pub fn embed<R: AsRef<[f64]>>(model: &TrainedModel, rows: &[R]) -> Result<Matrix> {
    let p = model.encoder.output_dim();
    let z = model.encoder.infer(rows)?;
    Matrix::from_rows(&z, p)
}

pub fn embed_samples(model: &TrainedModel, samples: &[&Sample]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.values.as_slice()).collect();
    embed(model, &rows)
}

const PROB_FLOOR: f64 = f64::MIN_POSITIVE;
const PROB_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Malignancy probabilities, kept strictly inside (0, 1).
pub fn predict_proba<R: AsRef<[f64]>>(model: &TrainedModel, rows: &[R]) -> Result<Vec<f64>> {
    let z = model.encoder.infer(rows)?;
    let logits = model.pathology_head.infer(&z)?;
    Ok(logits
        .into_iter()
        .map(|r| (1.0 / (1.0 + (-r[0]).exp())).clamp(PROB_FLOOR, PROB_CEIL))
        .collect())
}

impl TrainedModel {
    pub fn checkpoint_entries(&self) -> Vec<(String, &Tensor)> {
        let mut e = self.encoder.named("encoder");
        e.extend(self.pathology_head.named("pathology_head"));
        if let Some(dh) = &self.domain_head {
            e.extend(dh.named("domain_head"));
        }
        e
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> std::io::Result<()> {
        autodiff::write_checkpoint(w, &self.checkpoint_entries())
    }

    /// Restores the parameters; history is not part of a checkpoint.
    pub fn read_checkpoint<R: std::io::Read>(r: R) -> Result<Self> {
        let entries: BTreeMap<String, Tensor> = autodiff::read_checkpoint(r)?.into_iter().collect();
        let domain_head = if entries.keys().any(|k| k.starts_with("domain_head.")) {
            Some(Mlp::from_named("domain_head", &entries)?)
        } else {
            None
        };
        Ok(Self {
            encoder: Mlp::from_named("encoder", &entries)?,
            pathology_head: Mlp::from_named("pathology_head", &entries)?,
            domain_head,
            history: Vec::new(),
            selected_epoch: 0,
        })
    }

    pub fn write_history<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "epoch,train_loss,val_loss")?;
        for h in &self.history {
            writeln!(w, "{},{},{}", h.epoch, h.train_loss, h.val_loss)?;
        }
        w.flush()
    }
}

/// Accuracy of a multinomial logistic probe that predicts the domain index
/// from frozen embeddings: fit on `train`, scored on `eval`.
///
/// Features are standardized with training statistics; the probe runs a
/// fixed number of full-batch gradient steps from zero weights, so it is
/// deterministic.
pub fn domain_probe_accuracy(
    train: &Matrix,
    train_domains: &[usize],
    eval: &Matrix,
    eval_domains: &[usize],
    n_domains: usize,
) -> Result<f64> {
    if train.rows() != train_domains.len() || eval.rows() != eval_domains.len() {
        return Err(Error::Shape(
            "probe rows and domain labels differ in length".into(),
        ));
    }
    if eval.rows() == 0 {
        return Err(Error::Data("probe needs evaluation rows".into()));
    }
    let st = crate::signature::fit_standardizer(train)?;
    let xt = st.transform(train)?;
    let xe = st.transform(eval)?;
    let p = train.cols();
    let mut w = Tensor::zeros(vec![p, n_domains]).requires_grad(true);
    let mut b = Tensor::zeros(vec![n_domains]).requires_grad(true);
    let x = Tensor::new(vec![xt.rows(), p], xt.data().to_vec())?;
    for _ in 0..PROBE_STEPS {
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let (wv, bv) = (g.param(&w), g.param(&b));
        let logits = g.linear(xv, wv, bv)?;
        let loss = g.multiclass_ce(logits, train_domains)?;
        let grads = g.backward(loss)?;
        grads.accumulate_into(wv, &mut w);
        grads.accumulate_into(bv, &mut b);
        autodiff::sgd_step([&mut w, &mut b], PROBE_LR, PROBE_L2)?;
    }
    let mut correct = 0usize;
    for (row, &d) in xe.iter_rows().zip(eval_domains) {
        let scores: Vec<f64> = (0..n_domains)
            .map(|c| {
                b.data()[c]
                    + row
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * w.data()[j * n_domains + c])
                        .sum::<f64>()
            })
            .collect();
        let pred = scores
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc },
            )
            .0;
        correct += (pred == d) as usize;
    }
    Ok(correct as f64 / eval.rows() as f64)
}

const PROBE_STEPS: usize = 500;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};
    use crate::splitting::{build_fold, stratified_group_split, DEFAULT_FRACTIONS};
    use rand::Rng;
    use std::collections::BTreeSet;

    fn small_setup() -> (DatasetTable, LomoFold) {
        let ds = generate_synthetic(&SynthConfig {
            n_patients: 20,
            patches_per_patient_per_mag: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = stratified_group_split(&ds, DEFAULT_FRACTIONS, 0).unwrap();
        let fold = build_fold(&ds, &split, Magnification::M40).unwrap();
        (ds, fold)
    }

    fn quick_cfg() -> EncoderConfig {
        EncoderConfig {
            hidden_widths: vec![16],
            embedding_dim: 8,
            max_epochs: 15,
            seed: 3,
            ..EncoderConfig::default()
        }
    }

    fn params_bits(m: &Mlp) -> Vec<u64> {
        m.layers()
            .iter()
            .flat_map(|l| {
                l.weight
                    .data()
                    .iter()
                    .chain(l.bias.data())
                    .map(|v| v.to_bits())
            })
            .collect()
    }

    #[test]
    fn same_seed_same_parameters() {
        let (ds, fold) = small_setup();
        let a = train_baseline(&fold, &ds, &quick_cfg()).unwrap();
        let b = train_baseline(&fold, &ds, &quick_cfg()).unwrap();
        assert_eq!(params_bits(&a.encoder), params_bits(&b.encoder));
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn zero_lambda_matches_baseline() {
        let (ds, fold) = small_setup();
        let cfg = EncoderConfig {
            lambda: 0.0,
            ..quick_cfg()
        };
        let base = train_baseline(&fold, &ds, &cfg).unwrap();
        let grl = train_grl(&fold, &ds, &cfg).unwrap();
        assert_eq!(params_bits(&base.encoder), params_bits(&grl.encoder));
        assert_eq!(
            params_bits(&base.pathology_head),
            params_bits(&grl.pathology_head)
        );
        assert!(grl.domain_head.is_some());
    }

    #[test]
    fn selected_epoch_is_validation_argmin() {
        let (ds, fold) = small_setup();
        let m = train_baseline(&fold, &ds, &quick_cfg()).unwrap();
        let best = m
            .history
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .unwrap();
        assert_eq!(m.selected_epoch, best.epoch);
        // Returned parameters reproduce the recorded validation loss.
        let val = ds.view(&fold.val_ids).unwrap();
        let rows: Vec<&[f64]> = val.iter().map(|s| s.values.as_slice()).collect();
        let mut d = Design::new(ds.input_dim());
        for s in &val {
            d.push(&s.values, s.label, None).unwrap();
        }
        let loss = pathology_loss(&m.encoder, &m.pathology_head, &d, fold.pos_weight).unwrap();
        assert_eq!(loss, best.val_loss);
        assert_eq!(predict_proba(&m, &rows).unwrap().len(), rows.len());
    }

    #[test]
    fn training_never_reads_test_samples() {
        let (ds, fold) = small_setup();
        let log = crate::dataset::AccessLog::new();
        let ds = ds.with_access_log(log.clone());
        train_grl(&fold, &ds, &quick_cfg()).unwrap();
        let seen = log.ids();
        let test: BTreeSet<_> = fold.test_ids.iter().copied().collect();
        assert!(seen.is_disjoint(&test));
        assert!(!seen.is_empty());
    }

    #[test]
    fn separable_toy_reaches_low_loss() {
        // Oracle: the plane x0 + x1 = 0 separates the classes with margin.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut samples = Vec::new();
        for i in 0..64 {
            let label = if i % 2 == 0 {
                Label::Malignant
            } else {
                Label::Benign
            };
            let sign = if label == Label::Malignant { 1.0 } else { -1.0 };
            let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            v[0] += sign * 2.0;
            v[1] += sign * 2.0;
            assert!(sign * (v[0] + v[1]) > 0.0);
            samples.push(Sample {
                sample_id: i,
                patient_id: i,
                label,
                magnification: Magnification::ALL[1 + (i as usize % 3)],
                values: v,
            });
        }
        let ds = DatasetTable::from_samples(samples).unwrap();
        let train_ids: Vec<i64> = (0..64).collect();
        let mut test = ds.samples()[0].clone();
        test.sample_id = 1000;
        test.patient_id = 1000;
        test.magnification = Magnification::M40;
        let mut all = ds.samples().to_vec();
        all.push(test);
        let ds = DatasetTable::from_samples(all).unwrap();
        let fold = LomoFold {
            held_out: Magnification::M40,
            train_ids,
            val_ids: vec![],
            test_ids: vec![1000],
            domain_encoding: [
                Magnification::M100,
                Magnification::M200,
                Magnification::M400,
            ]
            .into_iter()
            .enumerate()
            .map(|(i, m)| (m, i))
            .collect(),
            pos_weight: 1.0,
        };
        let cfg = EncoderConfig {
            hidden_widths: vec![8],
            embedding_dim: 4,
            max_epochs: 200,
            patience: 200,
            batch_size: 16,
            weight_decay: 0.0,
            ..EncoderConfig::default()
        };
        let m = train_baseline(&fold, &ds, &cfg).unwrap();
        let last = m.history.last().unwrap();
        assert!(last.train_loss < 0.05, "{}", last.train_loss);
    }

    #[test]
    fn embed_edge_cases() {
        let (ds, fold) = small_setup();
        let m = train_baseline(&fold, &ds, &quick_cfg()).unwrap();
        let empty = embed::<Vec<f64>>(&m, &[]).unwrap();
        assert_eq!((empty.rows(), empty.cols()), (0, 8));
        let row = ds.samples()[0].values.clone();
        let e = embed(&m, &[row.clone(), row.clone()]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(
            embed(&m, &[row.clone()]).unwrap(),
            embed(&m, &[row]).unwrap()
        );
        assert!(matches!(embed(&m, &[vec![1.0, 2.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_edge_cases() {
        let (ds, fold) = small_setup();
        let mut m = train_baseline(&fold, &ds, &quick_cfg()).unwrap();
        let rows: Vec<Vec<f64>> = ds
            .samples()
            .iter()
            .take(20)
            .map(|s| s.values.clone())
            .collect();
        let batch = predict_proba(&m, &rows).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let one = predict_proba(&m, &[r]).unwrap();
            assert!((one[0] - batch[i]).abs() < 1e-12);
        }
        assert!(batch.iter().all(|p| *p > 0.0 && *p < 1.0));
        m.pathology_head = Mlp::zeros(&[8, 1]);
        assert!(predict_proba(&m, &rows).unwrap().iter().all(|p| *p == 0.5));
        let huge = vec![vec![1e6; ds.input_dim()]];
        let p = predict_proba(&train_baseline(&fold, &ds, &quick_cfg()).unwrap(), &huge).unwrap();
        assert!(p[0] > 0.0 && p[0] < 1.0);
    }

    #[test]
    fn checkpoint_restores_model() {
        let (ds, fold) = small_setup();
        let m = train_grl(&fold, &ds, &quick_cfg()).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = TrainedModel::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.encoder, m.encoder);
        assert_eq!(back.domain_head, m.domain_head);
        let mut h = Vec::new();
        m.write_history(&mut h).unwrap();
        assert_eq!(
            String::from_utf8(h).unwrap().lines().count(),
            m.history.len() + 1
        );
    }

    #[test]
    fn probe_detects_linear_domain_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut make = |n: usize, shift: f64| {
            let mut rows = Vec::new();
            let mut d = Vec::new();
            for i in 0..n {
                let k = i % 3;
                rows.push(vec![
                    shift * k as f64 + rng.random_range(-0.5..0.5),
                    rng.random_range(-1.0..1.0),
                ]);
                d.push(k);
            }
            (Matrix::from_rows(&rows, 2).unwrap(), d)
        };
        let (a, da) = make(300, 3.0);
        let (b, db) = make(150, 3.0);
        assert!(domain_probe_accuracy(&a, &da, &b, &db, 3).unwrap() > 0.95);
        let (a, da) = make(300, 0.0);
        let (b, db) = make(300, 0.0);
        assert!(domain_probe_accuracy(&a, &da, &b, &db, 3).unwrap() < 0.45);
    }
}
