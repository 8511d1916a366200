//! Quantitative evaluation of conditional generation.
//!
//! A separately trained regressor predicts binary attributes from images.
//! Conditional models are scored by generating images for requested
//! attribute vectors and measuring how well the regressor recovers the
//! request: cosine similarity (best of several samples per request, then
//! averaged) and squared error summed over attributes (averaged over all
//! samples), with mean and spread over repeated seeded runs.
//!
//! Scores are comparable only between models evaluated with the same
//! regressor, attribute rows, and sample counts.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Container};
use crate::data::{batch_iterator, AttributedDataset, DataError};
use crate::layers::{BnStats, LayerError, LayerSpec, Network, NetworkSpec, ParameterStore, Phase};
use crate::losses::{LossError, PROB_CLAMP};
use crate::models::{scaled_units, ModelError, VaeGan};
use crate::optim::{self, OptimizerStates};
use crate::rng::SeedRng;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has no attributes")]
    NoAttributes,
    #[error("model is unconditional; conditional scoring needs attribute inputs")]
    UnconditionalModel,
    #[error("attribute width mismatch: regressor {regressor}, other {other}")]
    WidthMismatch { regressor: usize, other: usize },
    #[error("need at least {0} models to compare")]
    NotEnoughModels(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorConfig {
    pub resolution: usize,
    pub channels: usize,
    pub scale: f64,
    pub attr_count: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl RegressorConfig {
    pub fn new(resolution: usize, channels: usize, scale: f64, attr_count: usize, seed: u64) -> Self {
        RegressorConfig {
            resolution,
            channels,
            scale,
            attr_count,
            steps: 800,
            batch_size: 32,
            learning_rate: 3e-4,
            seed,
        }
    }
}

/// Attribute predictor with the encoder's trunk architecture and a sigmoid
/// head, one output per attribute.
pub struct Regressor {
    pub config: RegressorConfig,
    params: ParameterStore,
    bn: BnStats,
    net: Network,
}

fn regressor_spec(config: &RegressorConfig) -> NetworkSpec {
    let s = config.scale;
    NetworkSpec {
        name: "reg".into(),
        input_shape: vec![config.channels, config.resolution, config.resolution],
        layers: vec![
            LayerSpec::conv_down(scaled_units(64, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_down(scaled_units(128, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_down(scaled_units(256, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::flatten(),
            LayerSpec::dense(scaled_units(2048, s)).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::dense(config.attr_count),
            LayerSpec::sigmoid(),
        ],
    }
}

impl Regressor {
    pub fn new(config: RegressorConfig, rng: &mut SeedRng) -> Result<Self> {
        if config.attr_count == 0 {
            return Err(EvalError::NoAttributes);
        }
        let mut params = ParameterStore::new();
        let mut bn = BnStats::default();
        let net = regressor_spec(&config).build(&mut params, &mut bn, rng)?;
        Ok(Regressor { config, params, bn, net })
    }

    /// Attribute probabilities, [N, A] in (0,1).
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let binding = self.net.bind(&mut g, &self.params, false)?;
        let y = self.net.forward_eval(&mut g, x, &binding, &self.bn, None)?;
        Ok(g.value(y).clone())
    }

    /// Per-attribute accuracy at a 0.5 threshold.
    pub fn accuracy(&self, dataset: &AttributedDataset) -> Result<Vec<f64>> {
        let a = self.config.attr_count;
        let mut correct = vec![0usize; a];
        let chunk = 64;
        let mut start = 0;
        while start < dataset.len() {
            let end = (start + chunk).min(dataset.len());
            let idx: Vec<usize> = (start..end).collect();
            let (images, attrs) = dataset.gather(&idx);
            let preds = self.predict(&images)?;
            for i in 0..idx.len() {
                for j in 0..a {
                    let p = if preds.data()[i * a + j] > 0.5 { 1.0 } else { 0.0 };
                    if p == attrs.data()[i * a + j] {
                        correct[j] += 1;
                    }
                }
            }
            start = end;
        }
        Ok(correct.iter().map(|&c| c as f64 / dataset.len() as f64).collect())
    }
}

/// Train the regressor with elementwise binary cross-entropy and RMSProp.
pub fn train_regressor(dataset: &AttributedDataset, config: RegressorConfig) -> Result<Regressor> {
    if dataset.attr_count() == 0 || config.attr_count != dataset.attr_count() {
        return Err(EvalError::NoAttributes);
    }
    let mut rng = SeedRng::new(config.seed);
    let mut reg = Regressor::new(config.clone(), &mut rng)?;
    let mut opt = OptimizerStates::default();

    let batches_per_epoch = dataset.len() / config.batch_size;
    if batches_per_epoch == 0 {
        return Err(EvalError::Data(DataError::BatchTooLarge {
            batch: config.batch_size,
            n: dataset.len(),
        }));
    }
    let mut epoch = u64::MAX;
    let mut batches: Vec<(Tensor, Tensor)> = Vec::new();
    for step in 0..config.steps {
        let step_epoch = step / batches_per_epoch as u64;
        if step_epoch != epoch {
            epoch = step_epoch;
            batches = batch_iterator(dataset, config.batch_size, config.seed, epoch)?.collect();
        }
        let (images, attrs) = &batches[(step % batches_per_epoch as u64) as usize];

        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let t = g.constant(attrs.clone());
        let binding = reg.net.bind(&mut g, &reg.params, true)?;
        let y = reg.net.forward_train(&mut g, x, &binding, &mut reg.bn, None)?;
        let yc = g.clamp(y, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let ln_y = g.ln(yc);
        let neg_y = g.neg(yc);
        let one_minus_y = g.add_scalar(neg_y, 1.0);
        let ln_omy = g.ln(one_minus_y);
        let neg_t = g.neg(t);
        let one_minus_t = g.add_scalar(neg_t, 1.0);
        let pos = g.mul(t, ln_y)?;
        let negp = g.mul(one_minus_t, ln_omy)?;
        let s = g.add(pos, negp)?;
        let mean = g.mean_all(s);
        let loss = g.neg(mean);
        g.backward(loss)?;

        for (name, &id) in binding.iter() {
            if let Some(grad) = g.grad(id) {
                let grad = grad.clone();
                let param = reg.params.get_mut(name)?;
                let state = opt.ensure(name, grad.shape());
                optim::rmsprop_update(
                    param,
                    &grad,
                    state,
                    config.learning_rate,
                    optim::DEFAULT_RHO,
                    optim::DEFAULT_EPS,
                );
            }
        }
    }
    Ok(reg)
}

// ---------------------------------------------------------------------------
// Regressor persistence (same container format as model checkpoints)
// ---------------------------------------------------------------------------

pub fn save_regressor(reg: &Regressor, path: &Path) -> Result<()> {
    let lines = vec![
        ("kind".to_string(), "regressor".to_string()),
        ("resolution".to_string(), reg.config.resolution.to_string()),
        ("channels".to_string(), reg.config.channels.to_string()),
        ("scale".to_string(), reg.config.scale.to_string()),
        ("attr_count".to_string(), reg.config.attr_count.to_string()),
        ("steps".to_string(), reg.config.steps.to_string()),
        ("batch_size".to_string(), reg.config.batch_size.to_string()),
        ("learning_rate".to_string(), reg.config.learning_rate.to_string()),
        ("seed".to_string(), reg.config.seed.to_string()),
    ];
    let mut tensors = BTreeMap::new();
    for (name, t) in reg.params.iter() {
        tensors.insert(format!("param/{name}"), t.clone().detached());
    }
    for (key, state) in &reg.bn.entries {
        tensors.insert(format!("bnstat/{key}/mean"), state.running_mean.clone());
        tensors.insert(format!("bnstat/{key}/var"), state.running_var.clone());
    }
    checkpoint::write_container(path, &lines, &tensors)?;
    Ok(())
}

pub fn load_regressor(path: &Path) -> Result<Regressor> {
    let c = checkpoint::read_container(path)?;
    if c.get("kind")? != "regressor" {
        return Err(EvalError::Checkpoint(CheckpointError::Malformed(
            "not a regressor file".into(),
        )));
    }
    let config = RegressorConfig {
        resolution: c.parse("resolution")?,
        channels: c.parse("channels")?,
        scale: c.parse("scale")?,
        attr_count: c.parse("attr_count")?,
        steps: c.parse("steps")?,
        batch_size: c.parse("batch_size")?,
        learning_rate: c.parse("learning_rate")?,
        seed: c.parse("seed")?,
    };
    let mut rng = SeedRng::new(config.seed);
    let mut reg = Regressor::new(config, &mut rng)?;
    restore_from_container(&c, &mut reg.params, &mut reg.bn)?;
    Ok(reg)
}

fn restore_from_container(c: &Container, params: &mut ParameterStore, bn: &mut BnStats) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let stored = c.tensor(&format!("param/{name}"))?;
        *params.get_mut(&name)? = stored.clone();
    }
    let keys: Vec<String> = bn.entries.keys().cloned().collect();
    for key in keys {
        let mean = c.tensor(&format!("bnstat/{key}/mean"))?.clone();
        let var = c.tensor(&format!("bnstat/{key}/var"))?.clone();
        let entry = bn.entries.get_mut(&key).unwrap();
        entry.running_mean = mean;
        entry.running_var = var;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Conditional scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttributeScore {
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub runs: usize,
    pub samples_per_vector: usize,
    /// Requested rows skipped because their attribute vector has zero norm.
    pub excluded_rows: usize,
}

/// Best cosine over the sample predictions against the request, plus the
/// mean over samples of the squared error summed across attributes. Returns
/// `None` for the cosine when the request has zero norm.
pub fn score_predictions(preds: &Tensor, target: &[f64]) -> (Option<f64>, f64) {
    let a = target.len();
    let s = preds.shape()[0];
    let target_norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best: Option<f64> = None;
    let mut sq_sum = 0.0;
    for i in 0..s {
        let row = &preds.data()[i * a..(i + 1) * a];
        sq_sum += row.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        if target_norm > 0.0 {
            let dot: f64 = row.iter().zip(target).map(|(p, t)| p * t).sum();
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = if norm > 0.0 { dot / (norm * target_norm) } else { 0.0 };
            best = Some(best.map_or(cos, |b: f64| b.max(cos)));
        }
    }
    (best, sq_sum / s as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Generate `samples_per_vector` conditional samples per requested attribute
/// row, score them with the regressor, and aggregate over `runs` repeated
/// seeded runs. Deterministic given (model, regressor, seed, attrs).
pub fn score_conditional(
    model: &mut VaeGan,
    regressor: &Regressor,
    attrs: &Tensor,
    samples_per_vector: usize,
    runs: usize,
    seed: u64,
) -> Result<AttributeScore> {
    if !model.is_conditional() {
        return Err(EvalError::UnconditionalModel);
    }
    let a = regressor.config.attr_count;
    if attrs.rank() != 2 || attrs.shape()[1] != a || model.config().attr_count != a {
        return Err(EvalError::WidthMismatch {
            regressor: a,
            other: if attrs.rank() == 2 { attrs.shape()[1] } else { 0 },
        });
    }
    let rows = attrs.shape()[0];
    let d_z = model.config().latent_dim;

    let mut cosine_runs = Vec::with_capacity(runs);
    let mut mse_runs = Vec::with_capacity(runs);
    let mut excluded = 0usize;
    for run in 0..runs {
        let mut best_cosines = Vec::new();
        let mut sq_errors = Vec::new();
        for row in 0..rows {
            let mut rng = SeedRng::derived(seed, ((run as u64) << 32) | row as u64);
            let target = &attrs.data()[row * a..(row + 1) * a];
            let z = rng.normal_tensor(&[samples_per_vector, d_z]);
            let row_attrs = Tensor::from_vec(
                &[samples_per_vector, a],
                target.iter().cycle().take(samples_per_vector * a).copied().collect(),
            )
            .unwrap();
            let images = model.decode(&z, Some(&row_attrs))?;
            let preds = regressor.predict(&images)?;
            let (best, mse) = score_predictions(&preds, target);
            match best {
                Some(b) => best_cosines.push(b),
                None => {
                    if run == 0 {
                        excluded += 1;
                    }
                }
            }
            sq_errors.push(mse);
        }
        let cos_run = if best_cosines.is_empty() {
            0.0
        } else {
            best_cosines.iter().sum::<f64>() / best_cosines.len() as f64
        };
        cosine_runs.push(cos_run);
        mse_runs.push(sq_errors.iter().sum::<f64>() / sq_errors.len() as f64);
    }
    let (cosine_mean, cosine_std) = mean_std(&cosine_runs);
    let (mse_mean, mse_std) = mean_std(&mse_runs);
    Ok(AttributeScore {
        cosine_mean,
        cosine_std,
        mse_mean,
        mse_std,
        runs,
        samples_per_vector,
        excluded_rows: excluded,
    })
}

pub const REPORT_CSV_HEADER: &str = "model,cosine_mean,cosine_std,mse_mean,mse_std,runs,samples_per_vector";

/// Score several models against the same regressor and attribute rows.
pub fn compare_models(
    models: &mut [(String, VaeGan)],
    regressor: &Regressor,
    attrs: &Tensor,
    samples_per_vector: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<(String, AttributeScore)>> {
    if models.len() < 2 {
        return Err(EvalError::NotEnoughModels(2));
    }
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models.iter_mut() {
        let score = score_conditional(model, regressor, attrs, samples_per_vector, runs, seed)?;
        rows.push((name.clone(), score));
    }
    Ok(rows)
}

pub fn render_csv(rows: &[(String, AttributeScore)]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for (name, s) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name, s.cosine_mean, s.cosine_std, s.mse_mean, s.mse_std, s.runs, s.samples_per_vector
        ));
    }
    out
}

/// Plain-text comparison table. Binary-attribute squared errors are not
/// comparable with real-valued attribute benchmarks; only relative
/// comparisons between rows of one report are meaningful.
pub fn render_table(rows: &[(String, AttributeScore)]) -> String {
    let mut out = String::new();
    out.push_str("model            cosine (mean +/- std)    mse (mean +/- std)\n");
    for (name, s) in rows {
        out.push_str(&format!(
            "{:<16} {:.4} +/- {:.4}         {:.4} +/- {:.4}\n",
            name, s.cosine_mean, s.cosine_std, s.mse_mean, s.mse_std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_perfectly() {
        // Predictions equal to the request: cosine 1, squared error 0.
        let target = [1.0, 0.0, 1.0];
        let preds = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let (best, mse) = score_predictions(&preds, &target);
        assert!((best.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn constant_half_prediction_squared_error() {
        // Constant 0.5 prediction against binary targets: per-row squared
        // error 0.25 per attribute.
        let target = [1.0, 0.0, 1.0, 0.0];
        let preds = Tensor::filled(&[3, 4], 0.5);
        let (_, mse) = score_predictions(&preds, &target);
        assert!((mse - 0.25 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_request_excluded() {
        let target = [0.0, 0.0];
        let preds = Tensor::filled(&[2, 2], 0.3);
        let (best, mse) = score_predictions(&preds, &target);
        assert!(best.is_none());
        assert!(mse > 0.0);
    }

    #[test]
    fn mean_std_over_runs() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2.0f64.sqrt()).abs() < 1e-12);
        let (m1, s1) = mean_std(&[5.0]);
        assert_eq!((m1, s1), (5.0, 0.0));
    }

    #[test]
    fn regressor_shapes_and_determinism() {
        let ds = crate::data::generate_synthetic(&crate::data::SyntheticSpec::new(16, 64, 9)).unwrap();
        let mut config = RegressorConfig::new(16, 3, 0.125, 3, 4);
        config.steps = 3;
        config.batch_size = 8;
        let r1 = train_regressor(&ds, config.clone()).unwrap();
        let r2 = train_regressor(&ds, config).unwrap();
        let preds1 = r1.predict(ds.images()).unwrap();
        let preds2 = r2.predict(ds.images()).unwrap();
        assert_eq!(preds1.shape(), &[64, 3]);
        assert!(preds1.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(preds1.bits_eq(&preds2));
    }

    #[test]
    fn regressor_roundtrips_through_file() {
        let ds = crate::data::generate_synthetic(&crate::data::SyntheticSpec::new(16, 32, 9)).unwrap();
        let mut config = RegressorConfig::new(16, 3, 0.125, 3, 4);
        config.steps = 2;
        config.batch_size = 8;
        let reg = train_regressor(&ds, config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.vgcp");
        save_regressor(&reg, &path).unwrap();
        let loaded = load_regressor(&path).unwrap();
        let a = reg.predict(ds.images()).unwrap();
        let b = loaded.predict(ds.images()).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn scoring_requires_conditional_model() {
        let mut rng = SeedRng::new(2);
        let mut model = VaeGan::new(
            crate::models::ModelConfig::new(16, 3, 0.125).with_latent_dim(4),
            &mut rng,
        )
        .unwrap();
        let mut reg_rng = SeedRng::new(3);
        let reg = Regressor::new(RegressorConfig::new(16, 3, 0.125, 3, 3), &mut reg_rng).unwrap();
        let attrs = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            score_conditional(&mut model, &reg, &attrs, 2, 1, 0),
            Err(EvalError::UnconditionalModel)
        ));
    }

    #[test]
    fn scoring_is_deterministic_and_reports_shape() {
        let mut rng = SeedRng::new(5);
        let mut model = VaeGan::new(
            crate::models::ModelConfig::new(16, 3, 0.125)
                .with_latent_dim(4)
                .with_attrs(3),
            &mut rng,
        )
        .unwrap();
        let mut reg_rng = SeedRng::new(6);
        let reg = Regressor::new(RegressorConfig::new(16, 3, 0.125, 3, 6), &mut reg_rng).unwrap();
        let attrs = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();

        let s1 = score_conditional(&mut model, &reg, &attrs, 2, 2, 11).unwrap();
        let s2 = score_conditional(&mut model, &reg, &attrs, 2, 2, 11).unwrap();
        assert_eq!(s1.cosine_mean.to_bits(), s2.cosine_mean.to_bits());
        assert_eq!(s1.mse_mean.to_bits(), s2.mse_mean.to_bits());
        assert_eq!(s1.excluded_rows, 1); // the all-zero row
        assert!(s1.cosine_mean >= -1.0 && s1.cosine_mean <= 1.0);

        // A model compared against itself produces identical rows.
        let mut models = vec![("a".to_string(), model.clone()), ("b".to_string(), model)];
        let rows = compare_models(&mut models, &reg, &attrs, 2, 2, 11).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].1.mse_mean.to_bits(), rows[1].1.mse_mean.to_bits());
        let csv = render_csv(&rows);
        assert!(csv.starts_with(REPORT_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}
