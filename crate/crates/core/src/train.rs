//! Training loop, evaluation and K-fold cross-validation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, stratified_kfold, ClassLabel, DatasetIndex, Fold, SampleLoader, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::layers::softmax_cross_entropy;
use crate::model::{forward, loss_and_gradients, Mode, ModelSpec, Parameters};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

/// Figures reported for the full-size model on the public corpus. They are
/// comparison targets for a full run, not test thresholds.
pub mod reference {
    pub const TRAIN_ACCURACY: f64 = 0.9996;
    pub const TRAIN_LOSS: f64 = 0.0050;
    pub const VAL_ACCURACY: f64 = 0.9805;
    pub const VAL_LOSS: f64 = 0.0644;
    pub const NON_DEMENTED_ACCURACY: f64 = 0.99;
    pub const MODERATE_ACCURACY: f64 = 0.88;
    pub const KFOLD_MEAN: f64 = 0.87;
    pub const KFOLD_STD: f64 = 0.12;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub seed: u64,
    pub spec: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            spec: ModelSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::param("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        self.spec.validate()
    }
}

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, config: &TrainConfig) -> Result<()> {
        if params.tensors().count() != self.m.len() {
            return Err(Error::param("optimizer state does not match parameters"));
        }
        for ((p, g), m) in params.tensors().zip(grads.tensors()).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let (b1, b2, lr, eps) = (config.beta1, config.beta2, config.learning_rate, config.epsilon);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Newline-delimited JSON, one object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("metrics serialize") + "\n")
            .collect()
    }
}

/// Rows are the true class, columns the prediction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: ClassLabel, predicted: usize) {
        self.counts[truth.index()][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|row| row.iter().sum())
    }

    /// Diagonal over row sum; `None` for classes absent from the evaluation set.
    pub fn per_class_accuracy(&self) -> [Option<f64>; NUM_CLASSES] {
        let rows = self.row_sums();
        std::array::from_fn(|i| (rows[i] > 0).then(|| self.counts[i][i] as f64 / rows[i] as f64))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in ClassLabel::ALL {
            out.push(',');
            out.push_str(c.name());
        }
        out.push('\n');
        for c in ClassLabel::ALL {
            out.push_str(c.name());
            for n in self.counts[c.index()] {
                let _ = write!(out, ",{n}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[cfg(feature = "parallel")]
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Eval-mode pass over `index`. Predictions are the logit argmax with ties
/// toward the lower class index.
pub fn evaluate(spec: &ModelSpec, params: &Parameters, index: &DatasetIndex, loader: &dyn SampleLoader) -> Result<EvalReport> {
    if index.is_empty() {
        return Err(Error::param("cannot evaluate an empty index"));
    }
    let samples = index.samples();
    let results = par_map(samples.len(), |i| -> Result<(f32, usize)> {
        let x = loader.load(&samples[i])?;
        let trace = forward(spec, params, &x, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&trace.logits, samples[i].label.index())?;
        Ok((loss, trace.logits.argmax()))
    });
    let mut confusion = ConfusionMatrix::default();
    let mut total_loss = 0.0f64;
    let mut correct = 0usize;
    for (s, r) in samples.iter().zip(results) {
        let (loss, pred) = r?;
        total_loss += loss as f64;
        if pred == s.label.index() {
            correct += 1;
        }
        confusion.record(s.label, pred);
    }
    Ok(EvalReport {
        loss: total_loss / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
        confusion,
    })
}

pub fn train(
    config: &TrainConfig,
    train_index: &DatasetIndex,
    val_index: &DatasetIndex,
    loader: &dyn SampleLoader,
) -> Result<(Parameters, Metrics)> {
    train_with_progress(config, train_index, val_index, loader, &mut |_| {})
}

/// Mini-batch Adam training. After every epoch both sets are re-evaluated in
/// eval mode and `progress` receives the epoch's metrics.
pub fn train_with_progress(
    config: &TrainConfig,
    train_index: &DatasetIndex,
    val_index: &DatasetIndex,
    loader: &dyn SampleLoader,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<(Parameters, Metrics)> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = Metrics::default();
    for _ in 0..config.epochs {
        let m = trainer.run_epoch(train_index, val_index, loader)?;
        progress(&m);
        metrics.epochs.push(m);
    }
    Ok((trainer.into_parameters(), metrics))
}

/// Training state advanced one epoch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    params: Parameters,
    adam: AdamState,
    epoch: usize,
}

impl Trainer {
    /// Freshly initialized parameters drawn from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = Parameters::seeded(&config.spec, config.seed)?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            config,
            params,
            adam,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn into_parameters(self) -> Parameters {
        self.params
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One shuffled pass of Adam steps over `train_index`, then an eval-mode
    /// pass over both sets.
    pub fn run_epoch(
        &mut self,
        train_index: &DatasetIndex,
        val_index: &DatasetIndex,
        loader: &dyn SampleLoader,
    ) -> Result<EpochMetrics> {
        if train_index.is_empty() || val_index.is_empty() {
            return Err(Error::param("training and validation sets must be nonempty"));
        }
        let config = &self.config;
        let spec = &config.spec;
        let samples = train_index.samples();
        let epoch = self.epoch + 1;
        let batches = make_batches(samples.len(), config.batch_size, config.seed, epoch as u64)?;
        for (b, batch) in batches.iter().enumerate() {
            let snapshot = &self.params;
            let results = par_map(batch.len(), |pos| {
                let sample = &samples[batch[pos]];
                let x = loader.load(sample)?;
                let mut rng = SeededRng::derived(config.seed, Stream::Dropout, &[epoch as u64, b as u64, pos as u64]);
                loss_and_gradients(spec, snapshot, &x, sample.label.index(), Mode::Train(&mut rng))
            });
            let mut sum = Parameters::zeros(spec);
            for r in results {
                let (loss, _, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: b + 1,
                        loss,
                    });
                }
                sum.accumulate(&grads);
            }
            sum.scale_in_place(1.0 / batch.len() as f32);
            self.adam.step(&mut self.params, &sum, config)?;
        }
        self.epoch = epoch;

        let tr = evaluate(spec, &self.params, train_index, loader)?;
        let va = evaluate(spec, &self.params, val_index, loader)?;
        Ok(EpochMetrics {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            val_loss: va.loss,
            val_acc: va.accuracy,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub train_size: usize,
    pub val_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    /// Sample standard deviation (denominator `k − 1`).
    pub std: f64,
}

impl KFoldReport {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let accs: Vec<f64> = folds.iter().map(|f| f.val_accuracy).collect();
        let (mean, std) = mean_and_sample_std(&accs);
        KFoldReport { folds, mean, std }
    }
}

pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

/// Runs `trainer` once per fold and summarizes the returned validation
/// `(accuracy, loss)` pairs.
pub fn kfold_with(
    folds: &[Fold],
    mut trainer: impl FnMut(usize, &Fold) -> Result<(f64, f64)>,
) -> Result<KFoldReport> {
    let mut results = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let (val_accuracy, val_loss) = trainer(i, fold)?;
        results.push(FoldResult {
            fold: i,
            val_accuracy,
            val_loss,
            train_size: fold.train.len(),
            val_size: fold.val.len(),
        });
    }
    Ok(KFoldReport::from_folds(results))
}

/// Stratified K-fold: a fresh model per fold, seeded with `seed ⊕ fold`.
pub fn kfold_run(
    config: &TrainConfig,
    index: &DatasetIndex,
    loader: &dyn SampleLoader,
    k: usize,
    on_fold: &mut dyn FnMut(usize, &Metrics),
) -> Result<KFoldReport> {
    let folds = stratified_kfold(index, k, config.seed)?;
    kfold_with(&folds, |i, fold| {
        let fold_config = TrainConfig {
            seed: config.seed ^ i as u64,
            ..config.clone()
        };
        let (_, metrics) = train(&fold_config, &fold.train, &fold.val, loader)?;
        on_fold(i, &metrics);
        let last = metrics.last().expect("at least one epoch");
        Ok((last.val_acc, last.val_loss))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            spec: ModelSpec::with_filters(16, &[4, 4, 8, 4]),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size), (20, 32));
        assert_eq!(c.learning_rate, 1e-3);
        let bad = TrainConfig { epochs: 0, ..c.clone() };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        let bad = TrainConfig { learning_rate: 0.0, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let cfg = tiny_config();
        let mut p = Parameters::seeded(&cfg.spec, 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        state.step(&mut p, &Parameters::zeros(&cfg.spec), &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // With bias correction m̂ = g and v̂ = g², so Δ = lr·g/(|g| + ε).
        let cfg = tiny_config();
        for c in [0.5f32, -3.0, 1e-3] {
            let mut p = Parameters::zeros(&cfg.spec);
            let mut g = Parameters::zeros(&cfg.spec);
            for t in g.tensors_mut() {
                t.data_mut().fill(c);
            }
            AdamState::new(&p).step(&mut p, &g, &cfg).unwrap();
            let expected = -(1e-3f64 * c as f64 / (c.abs() as f64 + 1e-8));
            for t in p.tensors() {
                for &w in t.data() {
                    assert!(((w as f64 - expected) / expected).abs() < 1e-6, "{w} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let cfg = tiny_config();
        let mut p = Parameters::zeros(&cfg.spec);
        let other = ModelSpec::with_filters(16, &[2, 2, 2, 2]);
        let mut state = AdamState::new(&Parameters::zeros(&other));
        assert!(state.step(&mut p, &Parameters::zeros(&cfg.spec), &cfg).is_err());
    }

    #[test]
    fn confusion_bookkeeping() {
        let mut cm = ConfusionMatrix::default();
        for c in ClassLabel::ALL {
            cm.record(c, c.index());
        }
        cm.record(ClassLabel::ModerateDemented, 1);
        assert_eq!(cm.row_sums(), [1, 1, 1, 2]);
        assert_eq!(cm.total(), 5);
        assert!((cm.accuracy() - 0.8).abs() < 1e-12);
        assert_eq!(cm.per_class_accuracy()[3], Some(0.5));
        let csv = cm.to_csv();
        assert!(csv.starts_with("true\\predicted,NonDemented,VeryMildDemented,MildDemented,ModerateDemented\n"));
        assert!(csv.contains("ModerateDemented,0,1,0,1\n"));
    }

    #[test]
    fn majority_baseline_on_reference_validation_split() {
        // Everything predicted NonDemented on the 640/448/180/13 validation split.
        let mut cm = ConfusionMatrix::default();
        for (c, n) in ClassLabel::ALL.into_iter().zip([640, 448, 180, 13]) {
            for _ in 0..n {
                cm.record(c, 0);
            }
        }
        assert_eq!(cm.total(), 1281);
        assert!((cm.accuracy() - 640.0 / 1281.0).abs() < 1e-12);
        assert!((cm.accuracy() - 0.4996).abs() < 1e-4);
    }

    #[test]
    fn kfold_summary_formula() {
        let folds = vec![
            Fold {
                train: DatasetIndex::with_counts([1, 0, 0, 0]),
                val: DatasetIndex::with_counts([1, 0, 0, 0]),
            };
            5
        ];
        let same = kfold_with(&folds, |_, _| Ok((0.9, 0.1))).unwrap();
        assert!((same.mean - 0.9).abs() < 1e-12);
        assert_eq!(same.std, 0.0);

        let accs = [0.75, 0.99, 0.95, 0.62, 1.0];
        let r = kfold_with(&folds, |i, _| Ok((accs[i], 0.0))).unwrap();
        let mean = (0.75 + 0.99 + 0.95 + 0.62 + 1.0) / 5.0;
        let ss: f64 = accs.iter().map(|a| (a - mean) * (a - mean)).sum();
        assert!((r.mean - 0.862).abs() < 1e-12);
        assert!((r.std - (ss / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.folds.len(), 5);
    }
}
