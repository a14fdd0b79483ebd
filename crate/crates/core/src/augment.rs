//! Class-specific GAN augmentation with a real-dominant mixing policy.
//!
//! Each fold gets one generator/discriminator pair per class, trained only
//! on that fold's training samples of that class. Generated samples carry
//! negative ids and the `SYNTH` tag, and never count as a magnification.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Tensor, Var};
use crate::dataset::{
    write_feature_rows, DatasetTable, FeatureRow, Label, Magnification, PatientId, SampleId,
};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::splitting::LomoFold;

pub const SYNTH_TAG: &str = "SYNTH";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Upper bound on synthetic / total in the augmented training set.
    pub synth_fraction_cap: f64,
    /// Use the literal `E[log(1 - D(G(z)))]` generator objective instead of
    /// the non-saturating `-E[log D(G(z))]`.
    pub saturating: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            gen_hidden: vec![32],
            disc_hidden: vec![32],
            steps: 1500,
            batch_size: 32,
            lr: 0.02,
            seed: 0,
            synth_fraction_cap: 0.5,
            saturating: false,
        }
    }
}

impl GanConfig {
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |f: &str, r: &str| out.push((format!("gan.{f}"), r.to_string()));
        if self.latent_dim < 1 {
            push("latent_dim", "must be >= 1");
        }
        if self.batch_size < 1 {
            push("batch_size", "must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            push("lr", "must be > 0");
        }
        if !(0.0..=0.5).contains(&self.synth_fraction_cap) {
            push("synth_fraction_cap", "must lie in [0, 0.5]");
        }
        if self.gen_hidden.contains(&0) || self.disc_hidden.contains(&0) {
            push("gen_hidden", "widths must be >= 1");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanStep {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Smallest and largest discriminator probability seen in the step.
    pub d_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanPair {
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub label: Label,
    pub fold: Magnification,
    /// Generator output lives in standardized units; these map it back.
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub history: Vec<GanStep>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: SampleId,
    pub patient_id: PatientId,
    pub label: Label,
    pub values: Vec<f64>,
}

/// `-mean log D(x_real) - mean log(1 - D(G(z)))`: the negated value of the
/// minimax objective, minimised by the discriminator.
pub fn discriminator_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let n_real = g.value(real_logits).len();
    let n_fake = g.value(fake_logits).len();
    let real = g.weighted_bce(real_logits, &vec![1.0; n_real], 1.0)?;
    let fake = g.weighted_bce(fake_logits, &vec![0.0; n_fake], 1.0)?;
    g.add(real, fake)
}

/// Generator loss: `mean log(1 - D(G(z)))` when `saturating`, otherwise
/// `-mean log D(G(z))`.
pub fn generator_loss(g: &mut Graph, fake_logits: Var, saturating: bool) -> Result<Var> {
    let n = g.value(fake_logits).len();
    if saturating {
        let l = g.weighted_bce(fake_logits, &vec![0.0; n], 1.0)?;
        Ok(g.scale(l, -1.0))
    } else {
        g.weighted_bce(fake_logits, &vec![1.0; n], 1.0)
    }
}

fn sigmoid_open(s: f64) -> f64 {
    (1.0 / (1.0 + (-s).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn latent(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![n, dim], data).expect("sized")
}

// Same computation as Mlp::forward but with the weights as constants.
fn forward_frozen(net: &Mlp, g: &mut Graph, x: Var) -> Result<Var> {
    let mut h = x;
    let n = net.layers().len();
    for (i, layer) in net.layers().iter().enumerate() {
        let w = g.constant(&layer.weight);
        let b = g.constant(&layer.bias);
        h = g.linear(h, w, b)?;
        if i + 1 < n {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Alternating minimax training on the fold's training samples of one class.
pub fn train_gan(
    fold: &LomoFold,
    ds: &DatasetTable,
    class_label: Label,
    cfg: &GanConfig,
) -> Result<GanPair> {
    if let Some((field, reason)) = cfg.violations().into_iter().next() {
        return Err(Error::Config { field, reason });
    }
    let ids: Vec<SampleId> = fold
        .train_ids
        .iter()
        .copied()
        .filter(|&id| ds.meta(id).is_some_and(|s| s.label == class_label))
        .collect();
    if ids.len() < cfg.batch_size {
        return Err(Error::Training(format!(
            "{} training samples of class {class_label:?}, batch needs {}",
            ids.len(),
            cfg.batch_size
        )));
    }
    let real = ds.view(&ids)?;
    let dim = ds.input_dim();
    let n = real.len() as f64;
    let center: Vec<f64> = (0..dim)
        .map(|j| real.iter().map(|s| s.values[j]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let v = real
                .iter()
                .map(|s| (s.values[j] - center[j]).powi(2))
                .sum::<f64>()
                / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardized: Vec<Vec<f64>> = real
        .iter()
        .map(|s| {
            (0..dim)
                .map(|j| (s.values[j] - center[j]) / scale[j])
                .collect()
        })
        .collect();

    let mut gen_sizes = vec![cfg.latent_dim];
    gen_sizes.extend(&cfg.gen_hidden);
    gen_sizes.push(dim);
    let mut disc_sizes = vec![dim];
    disc_sizes.extend(&cfg.disc_hidden);
    disc_sizes.push(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut generator = Mlp::new(&gen_sizes, &mut rng);
    let mut discriminator = Mlp::new(&disc_sizes, &mut rng);
    let mut history = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size;

    for step in 1..=cfg.steps {
        // Discriminator ascent on the objective.
        let rows: Vec<&[f64]> = (0..b)
            .map(|_| standardized[rng.random_range(0..standardized.len())].as_slice())
            .collect();
        let x = Tensor::from_rows(&rows, dim)?;
        let z = latent(&mut rng, b, cfg.latent_dim);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let (real_logits, real_vars) = discriminator.forward(&mut g, xv)?;
        let zv = g.constant(&z);
        let fake = forward_frozen(&generator, &mut g, zv)?;
        let (fake_logits, fake_vars) = discriminator.forward(&mut g, fake)?;
        let d_loss = discriminator_loss(&mut g, real_logits, fake_logits)?;
        let mut d_range = (f64::INFINITY, f64::NEG_INFINITY);
        for &s in g.value(real_logits).iter().chain(g.value(fake_logits)) {
            let p = sigmoid_open(s);
            d_range = (d_range.0.min(p), d_range.1.max(p));
        }
        let d_value = g.scalar(d_loss);
        let grads = g.backward(d_loss)?;
        discriminator.accumulate(&grads, &real_vars);
        discriminator.accumulate(&grads, &fake_vars);
        autodiff::sgd_step(discriminator.params_mut(), cfg.lr, 0.0)?;

        // Generator step against the updated discriminator.
        let z = latent(&mut rng, b, cfg.latent_dim);
        let mut g = Graph::new();
        let zv = g.constant(&z);
        let (fake, gen_vars) = generator.forward(&mut g, zv)?;
        let fake_logits = forward_frozen(&discriminator, &mut g, fake)?;
        let g_loss = generator_loss(&mut g, fake_logits, cfg.saturating)?;
        let g_value = g.scalar(g_loss);
        let grads = g.backward(g_loss)?;
        generator.accumulate(&grads, &gen_vars);
        autodiff::sgd_step(generator.params_mut(), cfg.lr, 0.0)?;

        if !d_value.is_finite() || !g_value.is_finite() {
            return Err(Error::Numeric { epoch: step });
        }
        history.push(GanStep {
            step,
            d_loss: d_value,
            g_loss: g_value,
            d_range,
        });
    }
    Ok(GanPair {
        generator,
        discriminator,
        label: class_label,
        fold: fold.held_out,
        center,
        scale,
        history,
    })
}

impl GanPair {
    /// `D(x)` for raw (unstandardized) rows, strictly inside (0, 1).
    pub fn discriminate<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>> {
        let std_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                r.as_ref()
                    .iter()
                    .zip(self.center.iter().zip(&self.scale))
                    .map(|(v, (c, s))| (v - c) / s)
                    .collect()
            })
            .collect();
        Ok(self
            .discriminator
            .infer(&std_rows)?
            .into_iter()
            .map(|r| sigmoid_open(r[0]))
            .collect())
    }
}

/// `n` samples from the generator. Ids are `-1, -2, ...`; each sample is its
/// own pseudo-patient.
pub fn generate(gan: &GanPair, n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = latent(&mut rng, n, gan.generator.input_dim());
    let rows: Vec<&[f64]> = z.data().chunks(gan.generator.input_dim()).collect();
    let out = gan.generator.infer(&rows)?;
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let values = row
                .iter()
                .zip(gan.center.iter().zip(&gan.scale))
                .map(|(v, (c, s))| v * s + c)
                .collect();
            let id = -(i as i64) - 1;
            SyntheticSample {
                sample_id: id,
                patient_id: id,
                label: gan.label,
                values,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixPlan {
    pub real: usize,
    pub synthetic_benign: usize,
    pub synthetic_malignant: usize,
}

impl MixPlan {
    pub fn synthetic(&self) -> usize {
        self.synthetic_benign + self.synthetic_malignant
    }

    pub fn synthetic_fraction(&self) -> f64 {
        let s = self.synthetic();
        if s == 0 {
            0.0
        } else {
            s as f64 / (s + self.real) as f64
        }
    }
}

/// Largest synthetic count `s` with `s / (real + s) <= cap`.
pub fn cap_count(real: usize, cap: f64) -> usize {
    if cap <= 0.0 {
        return 0;
    }
    let mut s = (cap * real as f64 / (1.0 - cap)).floor() as usize;
    while s > 0 && s as f64 > cap * (real + s) as f64 {
        s -= 1;
    }
    while ((s + 1) as f64) <= cap * (real + s + 1) as f64 {
        s += 1;
    }
    s
}

/// Class-balancing synthetic counts bounded by the cap. A `requested`
/// `[benign, malignant]` pair overrides the balancing rule but must still
/// respect the cap.
pub fn mix_plan(
    benign: usize,
    malignant: usize,
    cap: f64,
    requested: Option<[usize; 2]>,
) -> Result<MixPlan> {
    if !(0.0..=0.5).contains(&cap) {
        return Err(Error::Policy(format!("cap {cap} outside [0, 0.5]")));
    }
    let real = benign + malignant;
    let plan = match requested {
        Some([b, m]) => {
            let plan = MixPlan {
                real,
                synthetic_benign: b,
                synthetic_malignant: m,
            };
            if plan.synthetic_fraction() > cap {
                return Err(Error::Policy(format!(
                    "{} synthetic of {} total exceeds cap {cap}",
                    plan.synthetic(),
                    plan.synthetic() + real
                )));
            }
            plan
        }
        None => {
            let allowed = cap_count(real, cap);
            let need = benign.abs_diff(malignant).min(allowed);
            let (b, m) = if benign < malignant {
                (need, 0)
            } else {
                (0, need)
            };
            MixPlan {
                real,
                synthetic_benign: b,
                synthetic_malignant: m,
            }
        }
    };
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSet {
    pub real_ids: Vec<SampleId>,
    pub synthetic: Vec<SyntheticSample>,
    pub plan: MixPlan,
}

impl AugmentedSet {
    pub fn synthetic_fraction(&self) -> f64 {
        let total = self.real_ids.len() + self.synthetic.len();
        if total == 0 {
            0.0
        } else {
            self.synthetic.len() as f64 / total as f64
        }
    }
}

/// Real training ids of the fold plus generated samples sized by
/// [`mix_plan`]. Validation and test ids are never touched.
pub fn mix_augmented(
    fold: &LomoFold,
    ds: &DatasetTable,
    benign_gan: &GanPair,
    malignant_gan: &GanPair,
    cfg: &GanConfig,
) -> Result<AugmentedSet> {
    for (gan, label) in [
        (benign_gan, Label::Benign),
        (malignant_gan, Label::Malignant),
    ] {
        if gan.label != label || gan.fold != fold.held_out {
            return Err(Error::Policy(format!(
                "generator for {:?}/{} used for {label:?}/{}",
                gan.label, gan.fold, fold.held_out
            )));
        }
    }
    let (mut b, mut m) = (0, 0);
    for id in &fold.train_ids {
        match ds.meta(*id).map(|s| s.label) {
            Some(Label::Benign) => b += 1,
            Some(Label::Malignant) => m += 1,
            None => return Err(Error::Index(format!("unknown sample_id {id}"))),
        }
    }
    let plan = mix_plan(b, m, cfg.synth_fraction_cap, None)?;
    let mut synthetic = generate(
        benign_gan,
        plan.synthetic_benign,
        cfg.seed.wrapping_add(101),
    )?;
    synthetic.extend(generate(
        malignant_gan,
        plan.synthetic_malignant,
        cfg.seed.wrapping_add(202),
    )?);
    for (i, s) in synthetic.iter_mut().enumerate() {
        s.sample_id = -(i as i64) - 1;
        s.patient_id = s.sample_id;
    }
    Ok(AugmentedSet {
        real_ids: fold.train_ids.clone(),
        synthetic,
        plan,
    })
}

/// Writes generated samples in the feature-table layout with the `SYNTH` tag.
pub fn write_synthetic<W: Write>(out: W, samples: &[SyntheticSample]) -> std::io::Result<()> {
    let dim = samples.first().map_or(0, |s| s.values.len());
    write_feature_rows(
        out,
        dim,
        samples.iter().map(|s| FeatureRow {
            sample_id: s.sample_id,
            patient_id: s.patient_id,
            label: s.label,
            tag: SYNTH_TAG.to_string(),
            values: &s.values,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, AccessLog, Sample, SynthConfig};
    use crate::splitting::{build_fold, stratified_group_split, DEFAULT_FRACTIONS};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn ln_sigmoid(s: f64) -> f64 {
        let p = 1.0 / (1.0 + (-s).exp());
        p.ln()
    }

    #[test]
    fn losses_match_hand_formulas() {
        let real = [0.3, -1.2, 2.0];
        let fake = [-0.5, 0.1];
        let mut g = Graph::new();
        let r = g.constant(&Tensor::new(vec![3, 1], real.to_vec()).unwrap());
        let f = g.constant(&Tensor::new(vec![2, 1], fake.to_vec()).unwrap());
        let d = discriminator_loss(&mut g, r, f).unwrap();
        let hand_d = -real.iter().map(|&s| ln_sigmoid(s)).sum::<f64>() / 3.0
            - fake
                .iter()
                .map(|&s| (1.0 - 1.0 / (1.0 + (-s).exp())).ln())
                .sum::<f64>()
                / 2.0;
        assert!((g.scalar(d) - hand_d).abs() < 1e-12);

        let ns = generator_loss(&mut g, f, false).unwrap();
        let hand_ns = -fake.iter().map(|&s| ln_sigmoid(s)).sum::<f64>() / 2.0;
        assert!((g.scalar(ns) - hand_ns).abs() < 1e-12);

        let sat = generator_loss(&mut g, f, true).unwrap();
        let hand_sat = fake
            .iter()
            .map(|&s| (1.0 - 1.0 / (1.0 + (-s).exp())).ln())
            .sum::<f64>()
            / 2.0;
        assert!((g.scalar(sat) - hand_sat).abs() < 1e-12);
    }

    fn fold_and_ds() -> (DatasetTable, LomoFold) {
        let ds = generate_synthetic(&SynthConfig {
            n_patients: 24,
            patches_per_patient_per_mag: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = stratified_group_split(&ds, DEFAULT_FRACTIONS, 0).unwrap();
        let fold = build_fold(&ds, &split, Magnification::M400).unwrap();
        (ds, fold)
    }

    fn quick() -> GanConfig {
        GanConfig {
            steps: 60,
            batch_size: 16,
            seed: 5,
            ..GanConfig::default()
        }
    }

    #[test]
    fn gan_reads_only_its_class_train_samples() {
        let (ds, fold) = fold_and_ds();
        let log = AccessLog::new();
        let ds = ds.with_access_log(log.clone());
        let pair = train_gan(&fold, &ds, Label::Malignant, &quick()).unwrap();
        let seen = log.ids();
        let train: BTreeSet<_> = fold.train_ids.iter().copied().collect();
        assert!(seen.is_subset(&train));
        assert!(seen
            .iter()
            .all(|id| ds.meta(*id).unwrap().label == Label::Malignant));
        assert!(pair
            .history
            .iter()
            .all(|h| h.d_range.0 > 0.0 && h.d_range.1 < 1.0));
        let out = generate(&pair, 7, 1).unwrap();
        assert!(out
            .iter()
            .all(|s| s.values.len() == ds.input_dim() && s.patient_id < 0));
        assert_eq!(out, generate(&pair, 7, 1).unwrap());
        assert!(generate(&pair, 0, 1).unwrap().is_empty());
        let d = pair.discriminate(&[vec![1e9; ds.input_dim()]]).unwrap();
        assert!(d[0] > 0.0 && d[0] < 1.0);
    }

    #[test]
    fn gan_is_deterministic() {
        let (ds, fold) = fold_and_ds();
        let a = train_gan(&fold, &ds, Label::Benign, &quick()).unwrap();
        let b = train_gan(&fold, &ds, Label::Benign, &quick()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gan_rejects_small_class() {
        let (ds, fold) = fold_and_ds();
        let cfg = GanConfig {
            batch_size: 10_000,
            ..quick()
        };
        assert!(matches!(
            train_gan(&fold, &ds, Label::Benign, &cfg),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn plan_examples() {
        let p = mix_plan(100, 220, 0.5, None).unwrap();
        assert_eq!((p.synthetic_benign, p.synthetic_malignant), (120, 0));
        assert!((p.synthetic_fraction() - 120.0 / 440.0).abs() < 1e-12);
        let p = mix_plan(100, 220, 0.0, None).unwrap();
        assert_eq!(p.synthetic(), 0);
        // Cap binds before balance: 320 real at cap 0.1 allows 35.
        let p = mix_plan(100, 220, 0.1, None).unwrap();
        assert_eq!(p.synthetic_benign, 35);
        assert!(p.synthetic_fraction() <= 0.1);
        assert!(matches!(mix_plan(10, 10, 0.6, None), Err(Error::Policy(_))));
        assert!(matches!(
            mix_plan(10, 10, 0.2, Some([5, 5])),
            Err(Error::Policy(_))
        ));
        assert!(mix_plan(10, 10, 0.2, Some([5, 0])).is_ok());
    }

    proptest! {
        #[test]
        fn plan_never_exceeds_cap(b in 0usize..2000, m in 0usize..2000, cap in 0.0f64..=0.5) {
            let p = mix_plan(b, m, cap, None).unwrap();
            prop_assert!(p.synthetic_fraction() <= cap);
            let (tb, tm) = (b + p.synthetic_benign, m + p.synthetic_malignant);
            // Never overshoots the balance point.
            prop_assert!(tb.abs_diff(tm) <= b.abs_diff(m));
        }
    }

    #[test]
    fn mixing_keeps_real_samples_and_cap() {
        let (ds, fold) = fold_and_ds();
        let benign = train_gan(&fold, &ds, Label::Benign, &quick()).unwrap();
        let malignant = train_gan(&fold, &ds, Label::Malignant, &quick()).unwrap();
        for cap in [0.0, 0.1, 0.5] {
            let cfg = GanConfig {
                synth_fraction_cap: cap,
                ..quick()
            };
            let set = mix_augmented(&fold, &ds, &benign, &malignant, &cfg).unwrap();
            assert_eq!(set.real_ids, fold.train_ids);
            assert!(set.synthetic_fraction() <= cap);
            if cap == 0.0 {
                assert!(set.synthetic.is_empty());
            }
            let ids: BTreeSet<_> = set.synthetic.iter().map(|s| s.sample_id).collect();
            assert_eq!(ids.len(), set.synthetic.len());
        }
        let err = mix_augmented(&fold, &ds, &malignant, &benign, &quick()).unwrap_err();
        assert!(matches!(err, Error::Policy(_)));
    }

    #[test]
    fn synthetic_export_uses_tag() {
        let s = vec![SyntheticSample {
            sample_id: -1,
            patient_id: -1,
            label: Label::Benign,
            values: vec![0.5, 1.5],
        }];
        let mut buf = Vec::new();
        write_synthetic(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "sample_id,patient_id,label,magnification,f0,f1\n-1,-1,0,SYNTH,0.5,1.5\n"
        );
    }

    #[test]
    fn player_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = Mlp::new(&[2, 3, 2], &mut rng);
        let disc = Mlp::new(&[2, 3, 1], &mut rng);
        let z = latent(&mut rng, 4, 2);
        let x = latent(&mut rng, 4, 2);
        let h = 1e-5;

        let d_loss = |disc: &Mlp| {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let r = forward_frozen(disc, &mut g, xv).unwrap();
            let zv = g.constant(&z);
            let f = forward_frozen(&gen, &mut g, zv).unwrap();
            let fl = forward_frozen(disc, &mut g, f).unwrap();
            let l = discriminator_loss(&mut g, r, fl).unwrap();
            g.scalar(l)
        };
        let mut d = disc.clone();
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let (r, rv) = d.forward(&mut g, xv).unwrap();
        let zv = g.constant(&z);
        let f = forward_frozen(&gen, &mut g, zv).unwrap();
        let (fl, fv) = d.forward(&mut g, f).unwrap();
        let l = discriminator_loss(&mut g, r, fl).unwrap();
        let grads = g.backward(l).unwrap();
        d.accumulate(&grads, &rv);
        d.accumulate(&grads, &fv);
        for (li, layer) in d.layers().iter().enumerate() {
            let analytic = layer.weight.grad().unwrap();
            for k in 0..layer.weight.len() {
                let mut p = disc.clone();
                let mut m = disc.clone();
                bump(&mut p, li, k, h);
                bump(&mut m, li, k, -h);
                let num = (d_loss(&p) - d_loss(&m)) / (2.0 * h);
                assert!(
                    (num - analytic[k]).abs() <= 1e-4 * num.abs().max(1e-3),
                    "{num} {}",
                    analytic[k]
                );
            }
        }

        for saturating in [false, true] {
            let g_loss = |gen: &Mlp| {
                let mut g = Graph::new();
                let zv = g.constant(&z);
                let f = forward_frozen(gen, &mut g, zv).unwrap();
                let fl = forward_frozen(&disc, &mut g, f).unwrap();
                let l = generator_loss(&mut g, fl, saturating).unwrap();
                g.scalar(l)
            };
            let mut gm = gen.clone();
            let mut g = Graph::new();
            let zv = g.constant(&z);
            let (f, vars) = gm.forward(&mut g, zv).unwrap();
            let fl = forward_frozen(&disc, &mut g, f).unwrap();
            let l = generator_loss(&mut g, fl, saturating).unwrap();
            let grads = g.backward(l).unwrap();
            gm.accumulate(&grads, &vars);
            for (li, layer) in gm.layers().iter().enumerate() {
                let analytic = layer.weight.grad().unwrap();
                for k in 0..layer.weight.len() {
                    let mut p = gen.clone();
                    let mut m = gen.clone();
                    bump(&mut p, li, k, h);
                    bump(&mut m, li, k, -h);
                    let num = (g_loss(&p) - g_loss(&m)) / (2.0 * h);
                    assert!((num - analytic[k]).abs() <= 1e-4 * num.abs().max(1e-3));
                }
            }
        }
    }

    fn bump(net: &mut Mlp, layer: usize, k: usize, h: f64) {
        let mut n = 0;
        for (li, t) in net.params_mut().enumerate() {
            if li == layer * 2 {
                t.data_mut()[k] += h;
                n += 1;
            }
        }
        assert_eq!(n, 1);
    }

    #[test]
    fn toy_mixture_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let centers = [(-2.0, 0.0), (2.0, 1.0)];
        let samples: Vec<Sample> = (0..400)
            .map(|i| {
                let (cx, cy) = centers[i % 2];
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                Sample {
                    sample_id: i as i64,
                    patient_id: i as i64,
                    label: Label::Benign,
                    magnification: if i < 380 {
                        Magnification::M40
                    } else {
                        Magnification::M400
                    },
                    values: vec![cx + 0.5 * nx, cy + 0.5 * ny],
                }
            })
            .collect();
        let ds = DatasetTable::from_samples(samples).unwrap();
        let fold = LomoFold {
            held_out: Magnification::M400,
            train_ids: (0..380).collect(),
            val_ids: vec![],
            test_ids: (380..400).collect(),
            domain_encoding: Default::default(),
            pos_weight: 1.0,
        };
        let cfg = GanConfig {
            steps: 5000,
            batch_size: 32,
            latent_dim: 2,
            gen_hidden: vec![16],
            disc_hidden: vec![16],
            seed: 1,
            ..GanConfig::default()
        };
        let pair = train_gan(&fold, &ds, Label::Benign, &cfg).unwrap();
        let out = generate(&pair, 2000, 9).unwrap();
        for j in 0..2 {
            let real: Vec<f64> = (0..380).map(|i| ds.samples()[i].values[j]).collect();
            let mr = real.iter().sum::<f64>() / 380.0;
            let sd = (real.iter().map(|v| (v - mr).powi(2)).sum::<f64>() / 380.0).sqrt();
            let mg = out.iter().map(|s| s.values[j]).sum::<f64>() / out.len() as f64;
            assert!(
                (mg - mr).abs() < 0.5 * sd,
                "coord {j}: {mg} vs {mr} (sd {sd})"
            );
        }
    }
}
