//! Joint training of the encoder, decoder/generator, and discriminator.
//!
//! One step runs every forward path once, takes gradients of each loss term
//! separately (all at the step's initial parameters), and applies exactly one
//! RMSProp update per trainable tensor:
//!
//! * encoder descends `prior + recon`
//! * decoder descends `gamma * recon + gan_dec`
//! * discriminator ascends its objective (descends the negation)
//!
//! Error-signal routing is structural, not a bookkeeping convention: the
//! reconstruction error reaches the decoder through features of a *frozen*
//! discriminator binding, so its gradient w.r.t. the trainable discriminator
//! is exactly zero, and the GAN streams decode from a stop-gradient of z, so
//! no adversarial signal reaches the encoder.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::data::{batch_iterator, AttributedDataset, DataError};
use crate::layers::{LayerError, Phase};
use crate::losses::{self, DecGanStyle, GanTerms, LossBundle, LossError, ReconKind};
use crate::models::{EncBinding, ModelConfig, ModelError, VaeGan};
use crate::optim::{self, OptimizerStates};
use crate::rng::SeedRng;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
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
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Plain VAE with pixel-space reconstruction; the discriminator is never
    /// touched.
    Vae,
    /// Adversarial pretraining of the discriminator, then encoder/decoder
    /// training against the frozen discriminator's features.
    VaeFrozenDis,
    /// Full joint training.
    VaeGan,
    /// Generator/discriminator only; the encoder is never touched.
    Gan,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Vae => "vae",
            TrainMode::VaeFrozenDis => "vae-disl",
            TrainMode::VaeGan => "vaegan",
            TrainMode::Gan => "gan",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vae" => Some(TrainMode::Vae),
            "vae-disl" => Some(TrainMode::VaeFrozenDis),
            "vaegan" => Some(TrainMode::VaeGan),
            "gan" => Some(TrainMode::Gan),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Weight of the reconstruction term in decoder updates.
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub scale: f64,
    pub resolution: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Conditioning width; 0 trains unconditionally.
    pub attr_count: usize,
    pub recon_kind: ReconKind,
    pub gan_terms: GanTerms,
    pub dec_style: DecGanStyle,
    pub rho: f64,
    pub eps_hat: f64,
    pub telemetry_every: u64,
    /// Steps of pure adversarial pretraining in `VaeFrozenDis` mode.
    pub gan_pretrain_steps: u64,
    /// Optional wall-clock budget; the loop stops early when exceeded.
    pub wall_clock_budget_secs: Option<f64>,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, resolution: usize, scale: f64, seed: u64) -> Self {
        let recon_kind = match mode {
            TrainMode::Vae => ReconKind::Pixel,
            _ => ReconKind::Feature,
        };
        TrainConfig {
            mode,
            gamma: 1.0,
            learning_rate: 3e-4,
            batch_size: 64,
            max_steps: 1000,
            seed,
            scale,
            resolution,
            channels: 3,
            latent_dim: crate::models::scaled_units(128, scale),
            attr_count: 0,
            recon_kind,
            gan_terms: GanTerms::Three,
            dec_style: DecGanStyle::NonSaturating,
            rho: optim::DEFAULT_RHO,
            eps_hat: optim::DEFAULT_EPS,
            telemetry_every: 10,
            gan_pretrain_steps: 500,
            wall_clock_budget_secs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(TrainError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch size must be at least 2 (batch normalization), got {}",
                self.batch_size
            )));
        }
        if self.learning_rate < 0.0 {
            return Err(TrainError::Config("learning rate must be nonnegative".into()));
        }
        if self.mode == TrainMode::Vae && self.recon_kind != ReconKind::Pixel {
            return Err(TrainError::Config(
                "plain VAE mode uses the pixel reconstruction error; use mode vae-disl for the feature variant"
                    .into(),
            ));
        }
        if self.mode == TrainMode::VaeFrozenDis && self.recon_kind != ReconKind::Feature {
            return Err(TrainError::Config(
                "vae-disl mode exists to use the feature reconstruction error".into(),
            ));
        }
        if self.telemetry_every == 0 {
            return Err(TrainError::Config("telemetry interval must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.resolution, self.channels, self.scale)
            .with_latent_dim(self.latent_dim)
            .with_attrs(self.attr_count)
    }
}

/// Gradient maps of one step, decomposed by loss term at the step's initial
/// parameters. `dec_recon` is unscaled; the reconstruction weight is applied
/// at update time.
pub struct StepGrads {
    pub enc: Option<BTreeMap<String, Tensor>>,
    pub dec_recon: Option<BTreeMap<String, Tensor>>,
    pub dec_gan: Option<BTreeMap<String, Tensor>>,
    pub dis: Option<BTreeMap<String, Tensor>>,
}

/// Cross-term gradients that must be exactly zero under the routing rules.
pub struct RoutingReport {
    pub gan_wrt_enc: BTreeMap<String, Option<Tensor>>,
    pub recon_wrt_dis: BTreeMap<String, Option<Tensor>>,
    pub prior_wrt_dec: BTreeMap<String, Option<Tensor>>,
    pub prior_wrt_dis: BTreeMap<String, Option<Tensor>>,
}

struct StepGraph {
    g: Graph,
    enc: Option<EncBinding>,
    dec: Option<crate::layers::Binding>,
    dis: Option<crate::layers::Binding>,
    prior: Option<NodeId>,
    recon: Option<NodeId>,
    gan_obj: Option<NodeId>,
    dis_loss: Option<NodeId>,
    dec_gan: Option<NodeId>,
}

#[derive(Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: VaeGan,
    pub opt: OptimizerStates,
    pub rng: SeedRng,
    pub step: u64,
    /// Computed attribute direction vectors, by attribute index.
    pub attr_vectors: BTreeMap<usize, Tensor>,
    pub attr_names: Vec<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedRng::new(config.seed);
        let model = VaeGan::new(config.model_config(), &mut rng)?;
        Ok(Trainer {
            config,
            model,
            opt: OptimizerStates::default(),
            rng,
            step: 0,
            attr_vectors: BTreeMap::new(),
            attr_names: Vec::new(),
        })
    }

    /// Whether the current step of `VaeFrozenDis` mode is still in the
    /// adversarial pretraining phase.
    fn in_gan_pretrain(&self) -> bool {
        self.config.mode == TrainMode::VaeFrozenDis && self.step < self.config.gan_pretrain_steps
    }

    /// Effective step recipe for the current step.
    fn step_recipe(&self) -> StepRecipe {
        match self.config.mode {
            TrainMode::Vae => StepRecipe::VaeOnly,
            TrainMode::VaeGan => StepRecipe::Joint,
            TrainMode::Gan => StepRecipe::GanOnly,
            TrainMode::VaeFrozenDis => {
                if self.in_gan_pretrain() {
                    StepRecipe::GanOnly
                } else {
                    StepRecipe::VaeFrozen
                }
            }
        }
    }

    fn attrs_node(&self, g: &mut Graph, attrs: &Tensor) -> Option<NodeId> {
        if self.config.attr_count > 0 {
            Some(g.constant(attrs.clone()))
        } else {
            None
        }
    }

    /// Build the step graph for a batch. Consumes reparameterization noise
    /// and prior samples from the training stream in a fixed order.
    fn build_step_graph(&mut self, images: &Tensor, attrs: &Tensor) -> Result<StepGraph> {
        let recipe = self.step_recipe();
        let batch = images.shape()[0];
        let d_z = self.config.latent_dim;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let a = self.attrs_node(&mut g, attrs);

        match recipe {
            StepRecipe::VaeOnly | StepRecipe::VaeFrozen => {
                let enc = self.model.bind_enc(&mut g, true)?;
                let dec = self.model.bind_dec(&mut g, true)?;
                let (mu, log_var) = self.model.encode_g(&mut g, &enc, x, a, Phase::Train)?;
                let prior = losses::kl_prior(&mut g, mu, log_var)?;
                let eps = g.constant(self.rng.normal_tensor(&[batch, d_z]));
                let z = self.model.reparameterize_g(&mut g, mu, log_var, eps)?;
                let recon_img = self.model.decode_g(&mut g, &dec, z, a, Phase::Train)?;
                let recon = match recipe {
                    StepRecipe::VaeOnly => losses::recon_pixel(&mut g, x, recon_img)?,
                    _ => {
                        // Frozen discriminator features as the similarity space.
                        let dis_frozen = self.model.bind_dis(&mut g, false)?;
                        let fx = self.model.discriminate_g(&mut g, &dis_frozen, x, a, Phase::Train)?;
                        let fr = self
                            .model
                            .discriminate_g(&mut g, &dis_frozen, recon_img, a, Phase::Train)?;
                        losses::recon_feature(&mut g, fx.feature, fr.feature)?
                    }
                };
                Ok(StepGraph {
                    g,
                    enc: Some(enc),
                    dec: Some(dec),
                    dis: None,
                    prior: Some(prior),
                    recon: Some(recon),
                    gan_obj: None,
                    dis_loss: None,
                    dec_gan: None,
                })
            }
            StepRecipe::GanOnly => {
                let dec = self.model.bind_dec(&mut g, true)?;
                let dis = self.model.bind_dis(&mut g, true)?;
                let z_p = g.constant(self.rng.normal_tensor(&[batch, d_z]));
                let x_p = self.model.decode_g(&mut g, &dec, z_p, a, Phase::Train)?;
                let y_real = self.model.discriminate_g(&mut g, &dis, x, a, Phase::Train)?.y;
                let y_fake = self.model.discriminate_g(&mut g, &dis, x_p, a, Phase::Train)?.y;
                let gan_obj = losses::gan_dis_objective(&mut g, y_real, y_fake, None)?;
                let dis_loss = g.neg(gan_obj);
                let dec_gan = losses::gan_dec_loss(&mut g, y_fake, None, self.config.dec_style)?;
                Ok(StepGraph {
                    g,
                    enc: None,
                    dec: Some(dec),
                    dis: Some(dis),
                    prior: None,
                    recon: None,
                    gan_obj: Some(gan_obj),
                    dis_loss: Some(dis_loss),
                    dec_gan: Some(dec_gan),
                })
            }
            StepRecipe::Joint => {
                let enc = self.model.bind_enc(&mut g, true)?;
                let dec = self.model.bind_dec(&mut g, true)?;
                let dis = self.model.bind_dis(&mut g, true)?;

                let (mu, log_var) = self.model.encode_g(&mut g, &enc, x, a, Phase::Train)?;
                let prior = losses::kl_prior(&mut g, mu, log_var)?;
                let eps = g.constant(self.rng.normal_tensor(&[batch, d_z]));
                let z = self.model.reparameterize_g(&mut g, mu, log_var, eps)?;
                let recon_img = self.model.decode_g(&mut g, &dec, z, a, Phase::Train)?;

                let recon = match self.config.recon_kind {
                    ReconKind::Pixel => losses::recon_pixel(&mut g, x, recon_img)?,
                    ReconKind::Feature => {
                        let dis_frozen = self.model.bind_dis(&mut g, false)?;
                        let fx = self.model.discriminate_g(&mut g, &dis_frozen, x, a, Phase::Train)?;
                        let fr = self
                            .model
                            .discriminate_g(&mut g, &dis_frozen, recon_img, a, Phase::Train)?;
                        losses::recon_feature(&mut g, fx.feature, fr.feature)?
                    }
                };

                // Adversarial streams. The reconstruction stream decodes from
                // a stop-gradient of z so the encoder receives no GAN signal.
                let z_p = g.constant(self.rng.normal_tensor(&[batch, d_z]));
                let x_p = self.model.decode_g(&mut g, &dec, z_p, a, Phase::Train)?;
                let y_real = self.model.discriminate_g(&mut g, &dis, x, a, Phase::Train)?.y;
                let y_fake_prior = self.model.discriminate_g(&mut g, &dis, x_p, a, Phase::Train)?.y;
                let y_fake_recon = match self.config.gan_terms {
                    GanTerms::Three => {
                        let z_sg = g.stop_gradient(z);
                        let recon_gan = self.model.decode_g(&mut g, &dec, z_sg, a, Phase::Train)?;
                        Some(self.model.discriminate_g(&mut g, &dis, recon_gan, a, Phase::Train)?.y)
                    }
                    GanTerms::Two => None,
                };

                let gan_obj = losses::gan_dis_objective(&mut g, y_real, y_fake_prior, y_fake_recon)?;
                let dis_loss = g.neg(gan_obj);
                let dec_gan = losses::gan_dec_loss(&mut g, y_fake_prior, y_fake_recon, self.config.dec_style)?;
                Ok(StepGraph {
                    g,
                    enc: Some(enc),
                    dec: Some(dec),
                    dis: Some(dis),
                    prior: Some(prior),
                    recon: Some(recon),
                    gan_obj: Some(gan_obj),
                    dis_loss: Some(dis_loss),
                    dec_gan: Some(dec_gan),
                })
            }
        }
    }

    fn bundle_from(&self, sg: &StepGraph) -> LossBundle {
        let v = |id: Option<NodeId>| id.map(|n| sg.g.value(n).item()).unwrap_or(0.0);
        LossBundle {
            prior: v(sg.prior),
            recon: v(sg.recon),
            gan_dis: v(sg.gan_obj),
            gan_dec: v(sg.dec_gan),
            recon_kind: self.config.recon_kind,
            gan_terms: self.config.gan_terms,
            dec_style: self.config.dec_style,
        }
    }

    fn check_finite(&self, bundle: &LossBundle) -> Result<()> {
        for (term, v) in [
            ("l_prior", bundle.prior),
            ("l_llike", bundle.recon),
            ("l_gan_dis", bundle.gan_dis),
            ("l_gan_dec", bundle.gan_dec),
        ] {
            if !v.is_finite() {
                return Err(TrainError::NonFiniteLoss { term, step: self.step });
            }
        }
        Ok(())
    }

    /// Loss values and per-term gradient maps for one batch, all evaluated at
    /// the current parameters. Advances the noise stream exactly as
    /// `train_step` would.
    pub fn compute_gradients(&mut self, images: &Tensor, attrs: &Tensor) -> Result<(LossBundle, StepGrads)> {
        let mut sg = self.build_step_graph(images, attrs)?;
        let bundle = self.bundle_from(&sg);
        self.check_finite(&bundle)?;

        let mut grads = StepGrads {
            enc: None,
            dec_recon: None,
            dec_gan: None,
            dis: None,
        };

        if let (Some(prior), Some(enc)) = (sg.prior, sg.enc.as_ref()) {
            sg.g.backward(prior)?;
            let mut enc_grads = collect_enc(&sg.g, enc);
            if let Some(recon) = sg.recon {
                sg.g.backward(recon)?;
                add_into(&mut enc_grads, &collect_enc(&sg.g, enc));
                if let Some(dec) = sg.dec.as_ref() {
                    grads.dec_recon = Some(collect_binding(&sg.g, dec));
                }
            }
            grads.enc = Some(enc_grads);
        } else if let (Some(recon), Some(dec)) = (sg.recon, sg.dec.as_ref()) {
            sg.g.backward(recon)?;
            grads.dec_recon = Some(collect_binding(&sg.g, dec));
        }

        if let (Some(dec_gan), Some(dec)) = (sg.dec_gan, sg.dec.as_ref()) {
            sg.g.backward(dec_gan)?;
            grads.dec_gan = Some(collect_binding(&sg.g, dec));
        }
        if let (Some(dis_loss), Some(dis)) = (sg.dis_loss, sg.dis.as_ref()) {
            sg.g.backward(dis_loss)?;
            grads.dis = Some(collect_binding(&sg.g, dis));
        }
        Ok((bundle, grads))
    }

    /// Cross-term gradients for routing verification; every returned entry
    /// must be `None` (no gradient reached the parameter at all).
    pub fn routing_report(&mut self, images: &Tensor, attrs: &Tensor) -> Result<RoutingReport> {
        let mut sg = self.build_step_graph(images, attrs)?;
        let mut report = RoutingReport {
            gan_wrt_enc: BTreeMap::new(),
            recon_wrt_dis: BTreeMap::new(),
            prior_wrt_dec: BTreeMap::new(),
            prior_wrt_dis: BTreeMap::new(),
        };
        if let (Some(gan_obj), Some(enc)) = (sg.gan_obj, sg.enc.as_ref()) {
            sg.g.backward(gan_obj)?;
            report.gan_wrt_enc = collect_enc_optional(&sg.g, enc);
        }
        if let (Some(recon), Some(dis)) = (sg.recon, sg.dis.as_ref()) {
            sg.g.backward(recon)?;
            report.recon_wrt_dis = collect_binding_optional(&sg.g, dis);
        }
        if let Some(prior) = sg.prior {
            sg.g.backward(prior)?;
            if let Some(dec) = sg.dec.as_ref() {
                report.prior_wrt_dec = collect_binding_optional(&sg.g, dec);
            }
            if let Some(dis) = sg.dis.as_ref() {
                report.prior_wrt_dis = collect_binding_optional(&sg.g, dis);
            }
        }
        Ok(report)
    }

    fn apply_group(&mut self, grads: &BTreeMap<String, Tensor>) {
        for (name, grad) in grads {
            let param = self.model.params.get_mut(name).expect("parameter exists");
            let state = self.opt.ensure(name, grad.shape());
            optim::rmsprop_update(
                param,
                grad,
                state,
                self.config.learning_rate,
                self.config.rho,
                self.config.eps_hat,
            );
        }
    }

    /// One full training step: gradients at the initial parameters, then the
    /// encoder, decoder, and discriminator updates in that order.
    pub fn train_step(&mut self, images: &Tensor, attrs: &Tensor) -> Result<LossBundle> {
        let (bundle, grads) = self.compute_gradients(images, attrs)?;

        if let Some(enc) = &grads.enc {
            self.apply_group(enc);
        }
        match (&grads.dec_recon, &grads.dec_gan) {
            (Some(recon), Some(gan)) => {
                let combined = combine_scaled(recon, self.config.gamma, gan);
                self.apply_group(&combined);
            }
            (Some(recon), None) => {
                let scaled = scale_map(recon, self.config.gamma);
                self.apply_group(&scaled);
            }
            (None, Some(gan)) => self.apply_group(gan),
            (None, None) => {}
        }
        if let Some(dis) = &grads.dis {
            self.apply_group(dis);
        }
        self.step += 1;
        Ok(bundle)
    }
}

enum StepRecipe {
    VaeOnly,
    VaeFrozen,
    GanOnly,
    Joint,
}

fn collect_binding(g: &Graph, binding: &crate::layers::Binding) -> BTreeMap<String, Tensor> {
    binding
        .iter()
        .map(|(name, &id)| {
            let grad = g
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()));
            (name.clone(), grad)
        })
        .collect()
}

fn collect_binding_optional(g: &Graph, binding: &crate::layers::Binding) -> BTreeMap<String, Option<Tensor>> {
    binding
        .iter()
        .map(|(name, &id)| (name.clone(), g.grad(id).cloned()))
        .collect()
}

fn collect_enc(g: &Graph, enc: &EncBinding) -> BTreeMap<String, Tensor> {
    let mut out = collect_binding(g, &enc.trunk);
    out.extend(collect_binding(g, &enc.mu));
    out.extend(collect_binding(g, &enc.log_var));
    out
}

fn collect_enc_optional(g: &Graph, enc: &EncBinding) -> BTreeMap<String, Option<Tensor>> {
    let mut out = collect_binding_optional(g, &enc.trunk);
    out.extend(collect_binding_optional(g, &enc.mu));
    out.extend(collect_binding_optional(g, &enc.log_var));
    out
}

fn add_into(target: &mut BTreeMap<String, Tensor>, other: &BTreeMap<String, Tensor>) {
    for (name, add) in other {
        let t = target.get_mut(name).expect("same binding keys");
        for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
            *a += b;
        }
    }
}

fn scale_map(map: &BTreeMap<String, Tensor>, factor: f64) -> BTreeMap<String, Tensor> {
    map.iter()
        .map(|(k, v)| (k.clone(), v.map(|x| x * factor)))
        .collect()
}

/// `factor * recon + gan`, elementwise per parameter.
fn combine_scaled(
    recon: &BTreeMap<String, Tensor>,
    factor: f64,
    gan: &BTreeMap<String, Tensor>,
) -> BTreeMap<String, Tensor> {
    recon
        .iter()
        .map(|(k, r)| {
            let g = &gan[k];
            let data: Vec<f64> = r
                .data()
                .iter()
                .zip(g.data())
                .map(|(&rv, &gv)| factor * rv + gv)
                .collect();
            (k.clone(), Tensor::from_vec(r.shape(), data).unwrap())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training loop and telemetry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TelemetryRecord {
    pub step: u64,
    pub losses: LossBundle,
    pub wall_seconds: f64,
}

/// Telemetry sink: in-memory records, optional stdout echo, optional CSV.
/// The CSV columns are exactly the deterministic loss values, so reruns with
/// the same seed produce byte-identical files.
pub struct Telemetry {
    pub records: Vec<TelemetryRecord>,
    pub echo_stdout: bool,
    csv: Option<std::io::BufWriter<std::fs::File>>,
}

pub const TELEMETRY_CSV_HEADER: &str = "step,l_prior,l_llike,l_gan_dis,l_gan_dec";

impl Telemetry {
    pub fn in_memory() -> Self {
        Telemetry {
            records: Vec::new(),
            echo_stdout: false,
            csv: None,
        }
    }

    pub fn with_stdout() -> Self {
        Telemetry {
            records: Vec::new(),
            echo_stdout: true,
            csv: None,
        }
    }

    pub fn with_csv(path: &Path, echo_stdout: bool) -> std::io::Result<Self> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "{TELEMETRY_CSV_HEADER}")?;
        Ok(Telemetry {
            records: Vec::new(),
            echo_stdout,
            csv: Some(file),
        })
    }

    fn emit(&mut self, record: TelemetryRecord) -> std::io::Result<()> {
        if self.echo_stdout {
            println!(
                "step {:>6}  l_prior {:.6}  l_llike {:.6}  l_gan_dis {:.6}  l_gan_dec {:.6}  wall {:.1}s",
                record.step,
                record.losses.prior,
                record.losses.recon,
                record.losses.gan_dis,
                record.losses.gan_dec,
                record.wall_seconds
            );
        }
        if let Some(csv) = &mut self.csv {
            writeln!(
                csv,
                "{},{},{},{},{}",
                record.step, record.losses.prior, record.losses.recon, record.losses.gan_dis, record.losses.gan_dec
            )?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some(csv) = &mut self.csv {
            csv.flush()?;
        }
        Ok(())
    }
}

/// Run `config.max_steps` steps over seeded per-epoch shuffles of the
/// dataset. Batch order is a pure function of (seed, step), so a resumed run
/// consumes exactly the batches the unbroken run would have.
pub fn train_loop(
    trainer: &mut Trainer,
    dataset: &AttributedDataset,
    telemetry: &mut Telemetry,
    checkpoint_every: Option<(u64, &Path)>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    let batch_size = trainer.config.batch_size;
    let batches_per_epoch = dataset.len() / batch_size;
    if batches_per_epoch == 0 {
        return Err(TrainError::Data(DataError::BatchTooLarge {
            batch: batch_size,
            n: dataset.len(),
        }));
    }
    let start = Instant::now();
    let mut epoch = trainer.step / batches_per_epoch as u64;
    let mut batches: Vec<(Tensor, Tensor)> =
        batch_iterator(dataset, batch_size, trainer.config.seed, epoch)?.collect();

    while trainer.step < trainer.config.max_steps {
        if let Some(budget) = trainer.config.wall_clock_budget_secs {
            if start.elapsed().as_secs_f64() > budget {
                break;
            }
        }
        let step_epoch = trainer.step / batches_per_epoch as u64;
        if step_epoch != epoch {
            epoch = step_epoch;
            batches = batch_iterator(dataset, batch_size, trainer.config.seed, epoch)?.collect();
        }
        let idx = (trainer.step % batches_per_epoch as u64) as usize;
        let (images, attrs) = &batches[idx];
        let losses = trainer.train_step(images, attrs)?;

        if trainer.step % trainer.config.telemetry_every == 0 {
            telemetry.emit(TelemetryRecord {
                step: trainer.step,
                losses,
                wall_seconds: start.elapsed().as_secs_f64(),
            })?;
        }
        if let Some((every, dir)) = checkpoint_every {
            if every > 0 && trainer.step % every == 0 && trainer.step < trainer.config.max_steps {
                let path = dir.join(format!("checkpoint_step{}.vgcp", trainer.step));
                crate::checkpoint::save(trainer, &path)?;
            }
        }
    }
    telemetry.flush()?;
    Ok(())
}
