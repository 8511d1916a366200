//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VGCP" | u32 version
//! u32 line_count | per line: u32 byte_len, UTF-8 "key=value"
//! u32 tensor_count | per tensor: u32 name_len, name bytes,
//!                    u32 rank, u64 extents[rank], f64 values (raw LE bits)
//! u32 crc32 of every preceding byte
//! ```
//!
//! Config lines are written in a fixed order and tensors sorted by name, so
//! save -> load -> save reproduces the file byte for byte. A full checkpoint
//! carries the train config, step counter, every parameter, batch-norm
//! running statistic and optimizer accumulator, computed attribute vectors,
//! and the generator state (seed + word position), which is what makes
//! resumed runs bit-identical to unbroken ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::losses::{DecGanStyle, GanTerms, ReconKind};
use crate::models::VaeGan;
use crate::optim::RmsPropState;
use crate::rng::{RngState, SeedRng};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainMode, Trainer};

pub const MAGIC: &[u8; 4] = b"VGCP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

// ---------------------------------------------------------------------------
// Raw container
// ---------------------------------------------------------------------------

pub struct Container {
    /// key=value lines in file order.
    pub lines: Vec<(String, String)>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::Malformed(format!("missing config key {key}")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("unparsable value for {key}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))
    }
}

pub fn write_container(path: &Path, lines: &[(String, String)], tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    buf.extend_from_slice(&(lines.len() as u32).to_le_bytes());
    for (k, v) in lines {
        let line = format!("{k}={v}");
        buf.extend_from_slice(&(line.len() as u32).to_le_bytes());
        buf.extend_from_slice(line.as_bytes());
    }

    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "unexpected end of file at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(CheckpointError::Malformed("file too short".into()));
    }
    // Verify the trailing checksum before trusting any content.
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let line_count = r.u32()? as usize;
    let mut lines = Vec::with_capacity(line_count);
    for _ in 0..line_count {
        let len = r.u32()? as usize;
        let raw = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("config line is not UTF-8".into()))?;
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("config line without '=': {raw}")))?;
        lines.push((k.to_string(), v.to_string()));
    }

    let tensor_count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..tensor_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after tensor table",
            body.len() - r.pos
        )));
    }
    Ok(Container { lines, tensors })
}

// ---------------------------------------------------------------------------
// Trainer <-> container
// ---------------------------------------------------------------------------

fn recon_kind_str(k: ReconKind) -> &'static str {
    match k {
        ReconKind::Pixel => "pixel",
        ReconKind::Feature => "feature",
    }
}

fn gan_terms_str(t: GanTerms) -> &'static str {
    match t {
        GanTerms::Two => "two",
        GanTerms::Three => "three",
    }
}

fn dec_style_str(s: DecGanStyle) -> &'static str {
    match s {
        DecGanStyle::Saturating => "saturating",
        DecGanStyle::NonSaturating => "non_saturating",
    }
}

pub fn config_lines(config: &TrainConfig) -> Vec<(String, String)> {
    let mut lines = vec![
        ("mode".to_string(), config.mode.as_str().to_string()),
        ("gamma".to_string(), config.gamma.to_string()),
        ("learning_rate".to_string(), config.learning_rate.to_string()),
        ("batch_size".to_string(), config.batch_size.to_string()),
        ("max_steps".to_string(), config.max_steps.to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("scale".to_string(), config.scale.to_string()),
        ("resolution".to_string(), config.resolution.to_string()),
        ("channels".to_string(), config.channels.to_string()),
        ("latent_dim".to_string(), config.latent_dim.to_string()),
        ("attr_count".to_string(), config.attr_count.to_string()),
        ("recon".to_string(), recon_kind_str(config.recon_kind).to_string()),
        ("gan_terms".to_string(), gan_terms_str(config.gan_terms).to_string()),
        ("dec_style".to_string(), dec_style_str(config.dec_style).to_string()),
        ("rho".to_string(), config.rho.to_string()),
        ("eps_hat".to_string(), config.eps_hat.to_string()),
        ("telemetry_every".to_string(), config.telemetry_every.to_string()),
        ("gan_pretrain_steps".to_string(), config.gan_pretrain_steps.to_string()),
    ];
    if let Some(b) = config.wall_clock_budget_secs {
        lines.push(("wall_clock_budget_secs".to_string(), b.to_string()));
    }
    lines
}

pub fn parse_config(c: &Container) -> Result<TrainConfig> {
    let mode_str = c.get("mode")?;
    let mode = TrainMode::parse(mode_str)
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown mode {mode_str}")))?;
    let recon_kind = match c.get("recon")? {
        "pixel" => ReconKind::Pixel,
        "feature" => ReconKind::Feature,
        other => return Err(CheckpointError::Malformed(format!("unknown recon kind {other}"))),
    };
    let gan_terms = match c.get("gan_terms")? {
        "two" => GanTerms::Two,
        "three" => GanTerms::Three,
        other => return Err(CheckpointError::Malformed(format!("unknown gan term count {other}"))),
    };
    let dec_style = match c.get("dec_style")? {
        "saturating" => DecGanStyle::Saturating,
        "non_saturating" => DecGanStyle::NonSaturating,
        other => return Err(CheckpointError::Malformed(format!("unknown decoder style {other}"))),
    };
    Ok(TrainConfig {
        mode,
        gamma: c.parse("gamma")?,
        learning_rate: c.parse("learning_rate")?,
        batch_size: c.parse("batch_size")?,
        max_steps: c.parse("max_steps")?,
        seed: c.parse("seed")?,
        scale: c.parse("scale")?,
        resolution: c.parse("resolution")?,
        channels: c.parse("channels")?,
        latent_dim: c.parse("latent_dim")?,
        attr_count: c.parse("attr_count")?,
        recon_kind,
        gan_terms,
        dec_style,
        rho: c.parse("rho")?,
        eps_hat: c.parse("eps_hat")?,
        telemetry_every: c.parse("telemetry_every")?,
        gan_pretrain_steps: c.parse("gan_pretrain_steps")?,
        wall_clock_budget_secs: c.get_opt("wall_clock_budget_secs").and_then(|v| v.parse().ok()),
    })
}

fn rng_state_lines(state: &RngState) -> Vec<(String, String)> {
    let seed_hex: String = state.seed.iter().map(|b| format!("{b:02x}")).collect();
    vec![
        ("rng_seed".to_string(), seed_hex),
        ("rng_word_pos".to_string(), state.word_pos.to_string()),
    ]
}

fn parse_rng_state(c: &Container) -> Result<RngState> {
    let hex = c.get("rng_seed")?;
    if hex.len() != 64 {
        return Err(CheckpointError::Malformed("rng_seed must be 64 hex chars".into()));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).unwrap();
        seed[i] = u8::from_str_radix(s, 16)
            .map_err(|_| CheckpointError::Malformed("rng_seed is not hex".into()))?;
    }
    let word_pos: u128 = c.parse("rng_word_pos")?;
    Ok(RngState { seed, word_pos })
}

/// Save the full training state. `extras` lets callers record provenance
/// such as the data source; keys are prefixed with `extra.`.
pub fn save_with_extras(trainer: &Trainer, path: &Path, extras: &BTreeMap<String, String>) -> Result<()> {
    let mut lines = vec![("step".to_string(), trainer.step.to_string())];
    lines.extend(config_lines(&trainer.config));
    lines.push(("dis_tap".to_string(), trainer.model.dis_tap_layer().to_string()));
    lines.extend(rng_state_lines(&trainer.rng.state()));
    lines.push(("attr_names".to_string(), trainer.attr_names.join(",")));
    for (k, v) in extras {
        lines.push((format!("extra.{k}"), v.clone()));
    }

    let mut tensors = BTreeMap::new();
    for (name, t) in trainer.model.params.iter() {
        tensors.insert(format!("param/{name}"), t.clone().detached());
    }
    for (key, state) in &trainer.model.bn.entries {
        tensors.insert(format!("bnstat/{key}/mean"), state.running_mean.clone());
        tensors.insert(format!("bnstat/{key}/var"), state.running_var.clone());
    }
    for (name, state) in &trainer.opt.states {
        tensors.insert(format!("opt/{name}"), state.accumulator.clone());
    }
    for (idx, vec) in &trainer.attr_vectors {
        tensors.insert(format!("attrvec/{idx}"), vec.clone());
    }
    write_container(path, &lines, &tensors)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    save_with_extras(trainer, path, &BTreeMap::new())
}

/// Restore a trainer. The checkpoint must contain a tensor for every model
/// parameter; loading never leaves partial state behind.
pub fn load(path: &Path) -> Result<Trainer> {
    let c = read_container(path)?;
    let config = parse_config(&c)?;
    let step: u64 = c.parse("step")?;
    let dis_tap: usize = c.parse("dis_tap")?;
    let rng_state = parse_rng_state(&c)?;
    let attr_names: Vec<String> = match c.get("attr_names")? {
        "" => Vec::new(),
        s => s.split(',').map(str::to_string).collect(),
    };

    // Build the model skeleton, then overwrite every tensor from the file.
    let mut init_rng = SeedRng::new(config.seed);
    let mut model = VaeGan::new(config.model_config(), &mut init_rng)
        .map_err(|e| CheckpointError::Malformed(format!("cannot rebuild model: {e}")))?;
    model.set_dis_tap_layer(dis_tap);

    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let stored = c.tensor(&format!("param/{name}"))?;
        let slot = model.params.get_mut(&name).unwrap();
        if stored.shape() != slot.shape() {
            return Err(CheckpointError::Malformed(format!(
                "shape mismatch for {name}: file {:?}, model {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        *slot = stored.clone();
    }
    let bn_keys: Vec<String> = model.bn.entries.keys().cloned().collect();
    for key in bn_keys {
        let mean = c.tensor(&format!("bnstat/{key}/mean"))?.clone();
        let var = c.tensor(&format!("bnstat/{key}/var"))?.clone();
        let entry = model.bn.entries.get_mut(&key).unwrap();
        entry.running_mean = mean;
        entry.running_var = var;
    }

    let mut opt = crate::optim::OptimizerStates::default();
    for (name, t) in &c.tensors {
        if let Some(param) = name.strip_prefix("opt/") {
            opt.states.insert(
                param.to_string(),
                RmsPropState {
                    accumulator: t.clone(),
                },
            );
        }
    }
    let mut attr_vectors = BTreeMap::new();
    for (name, t) in &c.tensors {
        if let Some(idx) = name.strip_prefix("attrvec/") {
            let idx: usize = idx
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("bad attribute index in {name}")))?;
            attr_vectors.insert(idx, t.clone());
        }
    }

    Ok(Trainer {
        config,
        model,
        opt,
        rng: SeedRng::restore(&rng_state),
        step,
        attr_vectors,
        attr_names,
    })
}

/// Extra provenance lines stored by `save_with_extras`.
pub fn extras(c: &Container) -> BTreeMap<String, String> {
    c.lines
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{TrainConfig, TrainMode, Trainer};

    fn small_trainer() -> Trainer {
        let mut config = TrainConfig::new(TrainMode::VaeGan, 16, 0.125, 7);
        config.latent_dim = 6;
        config.batch_size = 4;
        Trainer::new(config).unwrap()
    }

    #[test]
    fn container_roundtrip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vgcp");
        let p2 = dir.path().join("b.vgcp");
        let trainer = small_trainer();
        save(&trainer, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_state_matches_saved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vgcp");
        let mut trainer = small_trainer();
        trainer.step = 42;
        trainer.attr_names = vec!["bright_disk".into()];
        trainer
            .attr_vectors
            .insert(0, Tensor::from_vec(&[6], vec![0.5; 6]).unwrap());
        save(&trainer, &path).unwrap();

        let loaded = load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config, trainer.config);
        assert_eq!(loaded.attr_names, trainer.attr_names);
        assert!(loaded.attr_vectors[&0].bits_eq(&trainer.attr_vectors[&0]));
        for (name, t) in trainer.model.params.iter() {
            assert!(loaded.model.params.get(name).unwrap().bits_eq(t), "{name}");
        }
        assert_eq!(loaded.rng.state(), trainer.rng.state());
    }

    #[test]
    fn corruption_detected_by_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vgcp");
        save(&small_trainer(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Checksum { .. })));

        // Truncation is also caught by the checksum.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[mid] ^= 0xFF; // restore
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vgcp");
        // A file with the right CRC but wrong magic.
        let mut buf = b"NOPE".to_vec();
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &buf).unwrap();
        assert!(matches!(read_container(&path), Err(CheckpointError::BadMagic)));
    }
}
