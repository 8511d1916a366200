//! The encoder, decoder/generator, and discriminator.
//!
//! The decoder and the GAN generator are one network: sampling from the
//! prior and decoding a posterior sample run through the same parameter
//! entries, so there is no separate generator parameter set anywhere.
//!
//! Architecture (at scale 1, 64x64 RGB input):
//!
//! ```text
//! enc: 5x5 64 conv s2, BN, ReLU / 5x5 128 conv s2, BN, ReLU /
//!      5x5 256 conv s2, BN, ReLU / flatten (256*8*8) /
//!      2048 dense, BN, ReLU / two linear heads -> (mu, log_var)
//! dec: 8*8*256 dense, BN, ReLU / reshape / 5x5 256 convT s2, BN, ReLU /
//!      5x5 128 convT s2, BN, ReLU / 5x5 32 convT s2, BN, ReLU /
//!      5x5 C conv s1, tanh
//! dis: 5x5 32 conv s1, ReLU / 5x5 128 conv s2, BN, ReLU /
//!      5x5 256 conv s2, BN, ReLU / 5x5 256 conv s2, BN, ReLU /  <- feature tap
//!      flatten / 512 dense, BN, ReLU / 1 dense, sigmoid
//! ```
//!
//! A scale factor in {1, 1/2, 1/4, 1/8} divides every channel and unit count
//! so reduced-resolution configurations stay cheap; the number of
//! downsampling steps is always three, so the feature tap keeps its meaning
//! (spatial extent resolution/8) at every scale.
//!
//! Conditioning: the attribute vector is concatenated to the decoder input
//! and to the flattened convolutional feature right before the top dense
//! layer of the encoder and the discriminator.

use thiserror::Error;

use crate::layers::{
    Binding, BnForward, BnStats, LayerError, LayerSpec, Network, NetworkSpec, ParameterStore, Phase,
};
use crate::rng::SeedRng;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input resolution {got} does not match configured {expected}")]
    ResolutionMismatch { expected: usize, got: usize },
    #[error("attribute width {got} does not match configured {expected}")]
    AttrWidthMismatch { expected: usize, got: usize },
    #[error("attributes must be binary (0/1), found {0}")]
    AttrsNotBinary(f64),
    #[error("model is unconditional (no attribute inputs configured)")]
    Unconditional,
    #[error("resolution must be a positive multiple of 8, got {0}")]
    BadResolution(usize),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Clamp bounds applied to `log_var` before exponentiation.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Probability guard keeping discriminator outputs strictly inside (0,1).
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub channels: usize,
    /// Divides all channel/unit counts; 1.0 is the full-size architecture.
    pub scale: f64,
    pub latent_dim: usize,
    /// Number of binary conditioning attributes; 0 = unconditional.
    pub attr_count: usize,
}

impl ModelConfig {
    pub fn new(resolution: usize, channels: usize, scale: f64) -> Self {
        ModelConfig {
            resolution,
            channels,
            scale,
            latent_dim: scaled_units(128, scale),
            attr_count: 0,
        }
    }

    pub fn with_latent_dim(mut self, d: usize) -> Self {
        self.latent_dim = d;
        self
    }

    pub fn with_attrs(mut self, a: usize) -> Self {
        self.attr_count = a;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 8 != 0 {
            return Err(ModelError::BadResolution(self.resolution));
        }
        Ok(())
    }
}

pub fn scaled_units(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

/// Posterior parameters of one batch, plus the sample when drawn.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub mu: Tensor,
    pub log_var: Tensor,
    pub z: Option<Tensor>,
}

/// Discriminator verdicts and the hidden representation the feature-wise
/// reconstruction loss compares in.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// Probability each row is a dataset sample, strictly inside (0,1).
    pub y: Tensor,
    /// Activation after the configured tap layer.
    pub feature: Tensor,
}

/// Graph handles returned by the graph-building forward passes.
pub struct DisNodes {
    pub y: NodeId,
    pub feature: NodeId,
}

pub struct EncBinding {
    pub trunk: Binding,
    pub mu: Binding,
    pub log_var: Binding,
}

#[derive(Clone)]
pub struct VaeGan {
    config: ModelConfig,
    pub params: ParameterStore,
    pub bn: BnStats,
    enc_trunk: Network,
    enc_mu: Network,
    enc_log_var: Network,
    dec: Network,
    dis: Network,
    dis_tap: usize,
}

impl VaeGan {
    pub fn new(config: ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let mut bn = BnStats::default();
        let s = config.scale;
        let r = config.resolution;
        let low = r / 8;
        let a = config.attr_count;

        let mut enc_layers = vec![
            LayerSpec::conv_down(scaled_units(64, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_down(scaled_units(128, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_down(scaled_units(256, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::flatten(),
        ];
        if a > 0 {
            enc_layers.push(LayerSpec::concat_extra(a));
        }
        enc_layers.push(LayerSpec::dense(scaled_units(2048, s)).with_bnorm());
        enc_layers.push(LayerSpec::relu());
        let enc_trunk = NetworkSpec {
            name: "enc".into(),
            input_shape: vec![config.channels, r, r],
            layers: enc_layers,
        }
        .build(&mut params, &mut bn, rng)?;

        let head_in = enc_trunk.output_shape()[0];
        let enc_mu = NetworkSpec {
            name: "enc/mu".into(),
            input_shape: vec![head_in],
            layers: vec![LayerSpec::dense(config.latent_dim)],
        }
        .build(&mut params, &mut bn, rng)?;
        let enc_log_var = NetworkSpec {
            name: "enc/logvar".into(),
            input_shape: vec![head_in],
            layers: vec![LayerSpec::dense(config.latent_dim)],
        }
        .build(&mut params, &mut bn, rng)?;

        let dec_c = scaled_units(256, s);
        let mut dec_layers = Vec::new();
        if a > 0 {
            dec_layers.push(LayerSpec::concat_extra(a));
        }
        dec_layers.extend([
            LayerSpec::dense(low * low * dec_c).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::unflatten(dec_c, low, low),
            LayerSpec::conv_up(scaled_units(256, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_up(scaled_units(128, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_up(scaled_units(32, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_down(config.channels, 5, 1),
            LayerSpec::tanh(),
        ]);
        let dec = NetworkSpec {
            name: "dec".into(),
            input_shape: vec![config.latent_dim],
            layers: dec_layers,
        }
        .build(&mut params, &mut bn, rng)?;

        let mut dis_layers = vec![
            LayerSpec::conv_down(scaled_units(32, s), 5, 1),
            LayerSpec::relu(),
            LayerSpec::conv_down(scaled_units(128, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_down(scaled_units(256, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::conv_down(scaled_units(256, s), 5, 2).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::flatten(),
        ];
        if a > 0 {
            dis_layers.push(LayerSpec::concat_extra(a));
        }
        dis_layers.extend([
            LayerSpec::dense(scaled_units(512, s)).with_bnorm(),
            LayerSpec::relu(),
            LayerSpec::dense(1),
            LayerSpec::sigmoid(),
        ]);
        let dis = NetworkSpec {
            name: "dis".into(),
            input_shape: vec![config.channels, r, r],
            layers: dis_layers,
        }
        .build(&mut params, &mut bn, rng)?;

        // Feature tap: post-activation after the third downsampling.
        let dis_tap = dis
            .post_downsampling_activation(3)
            .expect("discriminator has three downsampling convolutions");

        Ok(VaeGan {
            config,
            params,
            bn,
            enc_trunk,
            enc_mu,
            enc_log_var,
            dec,
            dis,
            dis_tap,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_conditional(&self) -> bool {
        self.config.attr_count > 0
    }

    pub fn enc_trunk(&self) -> &Network {
        &self.enc_trunk
    }

    pub fn dec_net(&self) -> &Network {
        &self.dec
    }

    pub fn dis_net(&self) -> &Network {
        &self.dis
    }

    /// Layer index of the discriminator feature tap, fixed for the lifetime
    /// of the model and recorded in checkpoints.
    pub fn dis_tap_layer(&self) -> usize {
        self.dis_tap
    }

    pub fn set_dis_tap_layer(&mut self, tap: usize) {
        self.dis_tap = tap;
    }

    /// Parameter name prefixes per trainable network group. The decoder
    /// group is also the GAN generator.
    pub fn group_prefix(group: NetGroup) -> &'static str {
        match group {
            NetGroup::Enc => "enc/",
            NetGroup::Dec => "dec/",
            NetGroup::Dis => "dis/",
        }
    }

    pub fn group_param_names(&self, group: NetGroup) -> Vec<String> {
        let prefix = Self::group_prefix(group);
        self.params
            .names_with_prefix(prefix)
            .cloned()
            .collect()
    }

    // -- graph-level forwards (shared by training and inference) ------------

    pub fn bind_enc(&self, g: &mut Graph, trainable: bool) -> Result<EncBinding> {
        Ok(EncBinding {
            trunk: self.enc_trunk.bind(g, &self.params, trainable)?,
            mu: self.enc_mu.bind(g, &self.params, trainable)?,
            log_var: self.enc_log_var.bind(g, &self.params, trainable)?,
        })
    }

    pub fn bind_dec(&self, g: &mut Graph, trainable: bool) -> Result<Binding> {
        Ok(self.dec.bind(g, &self.params, trainable)?)
    }

    pub fn bind_dis(&self, g: &mut Graph, trainable: bool) -> Result<Binding> {
        Ok(self.dis.bind(g, &self.params, trainable)?)
    }

    fn check_image(&self, g: &Graph, x: NodeId) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[2] != self.config.resolution || shape[3] != self.config.resolution {
            return Err(ModelError::ResolutionMismatch {
                expected: self.config.resolution,
                got: if shape.len() == 4 { shape[2] } else { 0 },
            });
        }
        Ok(())
    }

    fn check_attrs(&self, g: &Graph, attrs: Option<NodeId>) -> Result<()> {
        match (self.config.attr_count, attrs) {
            (0, _) => Ok(()),
            (a, Some(id)) => {
                let shape = g.value(id).shape();
                if shape.len() != 2 || shape[1] != a {
                    return Err(ModelError::AttrWidthMismatch {
                        expected: a,
                        got: if shape.len() == 2 { shape[1] } else { 0 },
                    });
                }
                Ok(())
            }
            (a, None) => Err(ModelError::AttrWidthMismatch { expected: a, got: 0 }),
        }
    }

    /// Encoder forward: posterior parameters from a batch of images.
    /// `log_var` is clamped to [-LOG_VAR_CLAMP, LOG_VAR_CLAMP] so downstream
    /// exponentiation cannot overflow early in training.
    pub fn encode_g(
        &mut self,
        g: &mut Graph,
        b: &EncBinding,
        x: NodeId,
        attrs: Option<NodeId>,
        phase: Phase,
    ) -> Result<(NodeId, NodeId)> {
        self.check_image(g, x)?;
        self.check_attrs(g, attrs)?;
        let extra = if self.config.attr_count > 0 { attrs } else { None };
        let h = match phase {
            Phase::Train => self.enc_trunk.forward_train(g, x, &b.trunk, &mut self.bn, extra)?,
            Phase::Eval => self.enc_trunk.forward_eval(g, x, &b.trunk, &self.bn, extra)?,
        };
        let mu = match phase {
            Phase::Train => self.enc_mu.forward_train(g, h, &b.mu, &mut self.bn, None)?,
            Phase::Eval => self.enc_mu.forward_eval(g, h, &b.mu, &self.bn, None)?,
        };
        let lv_raw = match phase {
            Phase::Train => self.enc_log_var.forward_train(g, h, &b.log_var, &mut self.bn, None)?,
            Phase::Eval => self.enc_log_var.forward_eval(g, h, &b.log_var, &self.bn, None)?,
        };
        let log_var = g.clamp(lv_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        Ok((mu, log_var))
    }

    /// z = mu + exp(log_var / 2) * eps.
    pub fn reparameterize_g(&self, g: &mut Graph, mu: NodeId, log_var: NodeId, eps: NodeId) -> Result<NodeId> {
        let half = g.mul_scalar(log_var, 0.5);
        let sigma = g.exp(half);
        let scaled = g.mul(sigma, eps)?;
        Ok(g.add(mu, scaled)?)
    }

    pub fn decode_g(
        &mut self,
        g: &mut Graph,
        b: &Binding,
        z: NodeId,
        attrs: Option<NodeId>,
        phase: Phase,
    ) -> Result<NodeId> {
        self.check_attrs(g, attrs)?;
        let extra = if self.config.attr_count > 0 { attrs } else { None };
        Ok(match phase {
            Phase::Train => self.dec.forward_train(g, z, b, &mut self.bn, extra)?,
            Phase::Eval => self.dec.forward_eval(g, z, b, &self.bn, extra)?,
        })
    }

    pub fn discriminate_g(
        &mut self,
        g: &mut Graph,
        b: &Binding,
        x: NodeId,
        attrs: Option<NodeId>,
        phase: Phase,
    ) -> Result<DisNodes> {
        self.check_image(g, x)?;
        self.check_attrs(g, attrs)?;
        let extra = if self.config.attr_count > 0 { attrs } else { None };
        let bn = match phase {
            Phase::Train => BnForward::Train(&mut self.bn),
            Phase::Eval => BnForward::Eval(&self.bn),
        };
        let (raw, feature) = self.dis.forward_with_tap(g, x, b, bn, extra, self.dis_tap)?;
        let y = g.clamp(raw, PROB_EPS, 1.0 - PROB_EPS);
        Ok(DisNodes { y, feature })
    }

    // -- value-level inference (eval phase, own graph) -----------------------

    pub fn encode(&mut self, x: &Tensor, attrs: Option<&Tensor>) -> Result<LatentCode> {
        validate_binary_attrs(attrs)?;
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let aid = attrs.map(|a| g.constant(a.clone()));
        let b = self.bind_enc(&mut g, false)?;
        let (mu, log_var) = self.encode_g(&mut g, &b, xid, aid, Phase::Eval)?;
        Ok(LatentCode {
            mu: g.value(mu).clone(),
            log_var: g.value(log_var).clone(),
            z: None,
        })
    }

    /// Draw z for a code using caller-supplied standard-normal noise.
    pub fn reparameterize(code: &LatentCode, eps: &Tensor) -> Result<LatentCode> {
        if eps.shape() != code.mu.shape() {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "reparameterize",
                lhs: code.mu.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            }));
        }
        let z: Vec<f64> = code
            .mu
            .data()
            .iter()
            .zip(code.log_var.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        Ok(LatentCode {
            mu: code.mu.clone(),
            log_var: code.log_var.clone(),
            z: Some(Tensor::from_vec(code.mu.shape(), z).unwrap()),
        })
    }

    pub fn decode(&mut self, z: &Tensor, attrs: Option<&Tensor>) -> Result<Tensor> {
        validate_binary_attrs(attrs)?;
        let mut g = Graph::new();
        let zid = g.constant(z.clone());
        let aid = attrs.map(|a| g.constant(a.clone()));
        let b = self.bind_dec(&mut g, false)?;
        let out = self.decode_g(&mut g, &b, zid, aid, Phase::Eval)?;
        Ok(g.value(out).clone())
    }

    pub fn discriminate(&mut self, x: &Tensor, attrs: Option<&Tensor>) -> Result<DiscriminatorOutput> {
        validate_binary_attrs(attrs)?;
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let aid = attrs.map(|a| g.constant(a.clone()));
        let b = self.bind_dis(&mut g, false)?;
        let nodes = self.discriminate_g(&mut g, &b, xid, aid, Phase::Eval)?;
        Ok(DiscriminatorOutput {
            y: g.value(nodes.y).clone(),
            feature: g.value(nodes.feature).clone(),
        })
    }

    /// Reconstruction from the posterior mean (no sampling noise).
    pub fn reconstruct(&mut self, x: &Tensor, attrs: Option<&Tensor>) -> Result<Tensor> {
        let code = self.encode(x, attrs)?;
        self.decode(&code.mu, attrs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetGroup {
    Enc,
    Dec,
    Dis,
}

fn validate_binary_attrs(attrs: Option<&Tensor>) -> Result<()> {
    if let Some(a) = attrs {
        for &v in a.data() {
            if v != 0.0 && v != 1.0 {
                return Err(ModelError::AttrsNotBinary(v));
            }
        }
    }
    Ok(())
}
