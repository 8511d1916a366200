//! Training-step semantics: gradient routing, reconstruction weighting,
//! determinism, persistence, and the per-mode update lattice.

use vaegan::checkpoint;
use vaegan::data::{batch_iterator, generate_synthetic, SyntheticSpec};
use vaegan::losses::ReconKind;
use vaegan::tensor::Tensor;
use vaegan::train::{train_loop, Telemetry, TrainConfig, TrainMode, Trainer};

fn small_config(mode: TrainMode, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(mode, 16, 0.125, seed);
    c.latent_dim = 6;
    c.batch_size = 4;
    c.max_steps = 6;
    c.telemetry_every = 2;
    c.gan_pretrain_steps = 3;
    c
}

fn small_dataset(seed: u64, n: usize) -> vaegan::data::AttributedDataset {
    generate_synthetic(&SyntheticSpec::new(16, n, seed)).unwrap()
}

fn first_batch(ds: &vaegan::data::AttributedDataset, bs: usize) -> (Tensor, Tensor) {
    batch_iterator(ds, bs, 0, 0).unwrap().next().unwrap()
}

fn params_snapshot(t: &Trainer) -> Vec<(String, Tensor)> {
    t.model.params.iter().map(|(n, v)| (n.clone(), v.clone())).collect()
}

fn assert_params_eq(a: &[(String, Tensor)], b: &[(String, Tensor)]) {
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        assert_eq!(na, nb);
        assert!(ta.bits_eq(tb), "parameter {na} differs");
    }
}

#[test]
fn zero_learning_rate_reports_losses_but_freezes_parameters() {
    let mut config = small_config(TrainMode::VaeGan, 3);
    config.learning_rate = 0.0;
    let mut trainer = Trainer::new(config).unwrap();
    let ds = small_dataset(1, 8);
    let (images, attrs) = first_batch(&ds, 4);

    let before = params_snapshot(&trainer);
    let losses = trainer.train_step(&images, &attrs).unwrap();
    let after = params_snapshot(&trainer);

    assert_params_eq(&before, &after);
    assert!(losses.prior.is_finite());
    assert!(losses.recon.is_finite());
    assert!(losses.gan_dis.is_finite());
    assert!(losses.gan_dec.is_finite());
}

#[test]
fn routing_cross_gradients_are_exact_zeros() {
    // No gradient at all may reach: encoder from the GAN objective,
    // discriminator from the reconstruction error, decoder/discriminator
    // from the prior term.
    for seed in [0u64, 1, 2] {
        let mut trainer = Trainer::new(small_config(TrainMode::VaeGan, seed)).unwrap();
        let ds = small_dataset(seed + 10, 8);
        let (images, attrs) = first_batch(&ds, 4);
        let report = trainer.routing_report(&images, &attrs).unwrap();

        assert!(!report.gan_wrt_enc.is_empty());
        for (name, grad) in &report.gan_wrt_enc {
            assert!(grad.is_none(), "GAN objective leaked into encoder parameter {name}");
        }
        assert!(!report.recon_wrt_dis.is_empty());
        for (name, grad) in &report.recon_wrt_dis {
            assert!(grad.is_none(), "reconstruction error leaked into discriminator parameter {name}");
        }
        assert!(!report.prior_wrt_dec.is_empty());
        for (name, grad) in &report.prior_wrt_dec {
            assert!(grad.is_none(), "prior term leaked into decoder parameter {name}");
        }
        for (name, grad) in &report.prior_wrt_dis {
            assert!(grad.is_none(), "prior term leaked into discriminator parameter {name}");
        }
    }
}

#[test]
fn reconstruction_weight_scales_only_the_decoder_recon_term() {
    // gamma=2 vs gamma=1 on identical state and batch: the decoder's
    // reconstruction gradient doubles exactly, encoder and discriminator
    // gradients are bit-identical.
    let base = Trainer::new(small_config(TrainMode::VaeGan, 5)).unwrap();
    let ds = small_dataset(6, 8);
    let (images, attrs) = first_batch(&ds, 4);

    let mut t1 = base.clone();
    t1.config.gamma = 1.0;
    let (_, g1) = t1.compute_gradients(&images, &attrs).unwrap();

    let mut t2 = base.clone();
    t2.config.gamma = 2.0;
    let (_, g2) = t2.compute_gradients(&images, &attrs).unwrap();

    let (e1, e2) = (g1.enc.unwrap(), g2.enc.unwrap());
    for (name, t) in &e1 {
        assert!(t.bits_eq(&e2[name]), "encoder gradient {name} changed with gamma");
    }
    let (d1, d2) = (g1.dis.unwrap(), g2.dis.unwrap());
    for (name, t) in &d1 {
        assert!(t.bits_eq(&d2[name]), "discriminator gradient {name} changed with gamma");
    }

    // The unscaled reconstruction component is identical...
    let (r1, r2) = (g1.dec_recon.unwrap(), g2.dec_recon.unwrap());
    for (name, t) in &r1 {
        assert!(t.bits_eq(&r2[name]), "unscaled reconstruction gradient {name} differs");
    }
    // ...so the applied contribution gamma * recon doubles exactly
    // (multiplication by 2 is exact in binary floating point).
    for (name, t) in &r1 {
        let applied1 = t.map(|v| 1.0 * v);
        let applied2 = r2[name].map(|v| 2.0 * v);
        let doubled = applied1.map(|v| 2.0 * v);
        assert!(applied2.bits_eq(&doubled), "contribution for {name} does not double exactly");
    }
    // The GAN component of the decoder gradient is unaffected.
    let (ga1, ga2) = (g1.dec_gan.unwrap(), g2.dec_gan.unwrap());
    for (name, t) in &ga1 {
        assert!(t.bits_eq(&ga2[name]), "decoder GAN gradient {name} changed with gamma");
    }
}

#[test]
fn mode_lattice_updates_only_the_right_networks() {
    let ds = small_dataset(20, 8);
    let (images, attrs) = first_batch(&ds, 4);

    // vae: discriminator untouched.
    let mut t = Trainer::new(small_config(TrainMode::Vae, 1)).unwrap();
    let dis_before: Vec<(String, Tensor)> = t
        .model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("dis/"))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    for _ in 0..3 {
        t.train_step(&images, &attrs).unwrap();
    }
    for (name, before) in &dis_before {
        assert!(t.model.params.get(name).unwrap().bits_eq(before), "vae touched {name}");
    }
    assert!(t.opt.states.keys().all(|k| !k.starts_with("dis/")));

    // gan: encoder untouched.
    let mut t = Trainer::new(small_config(TrainMode::Gan, 2)).unwrap();
    let enc_before: Vec<(String, Tensor)> = t
        .model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("enc/"))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    for _ in 0..3 {
        t.train_step(&images, &attrs).unwrap();
    }
    for (name, before) in &enc_before {
        assert!(t.model.params.get(name).unwrap().bits_eq(before), "gan touched {name}");
    }

    // vae-disl: discriminator trains during pretraining, then freezes.
    let mut t = Trainer::new(small_config(TrainMode::VaeFrozenDis, 3)).unwrap();
    let dis_init: Vec<(String, Tensor)> = t
        .model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("dis/"))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    // 3 pretraining steps (gan_pretrain_steps = 3).
    for _ in 0..3 {
        t.train_step(&images, &attrs).unwrap();
    }
    let changed = dis_init
        .iter()
        .any(|(name, before)| !t.model.params.get(name).unwrap().bits_eq(before));
    assert!(changed, "pretraining phase must update the discriminator");

    let dis_after_pretrain: Vec<(String, Tensor)> = t
        .model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("dis/"))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    for _ in 0..3 {
        let losses = t.train_step(&images, &attrs).unwrap();
        assert_eq!(losses.gan_dis, 0.0, "no GAN term after the pretraining phase");
        assert_eq!(losses.recon_kind, ReconKind::Feature);
    }
    for (name, before) in &dis_after_pretrain {
        assert!(
            t.model.params.get(name).unwrap().bits_eq(before),
            "frozen phase touched {name}"
        );
    }
}

#[test]
fn one_rmsprop_update_per_trainable_tensor() {
    let mut t = Trainer::new(small_config(TrainMode::VaeGan, 9)).unwrap();
    let ds = small_dataset(9, 8);
    let (images, attrs) = first_batch(&ds, 4);
    t.train_step(&images, &attrs).unwrap();

    let trainable: usize = t.model.params.len();
    assert_eq!(t.opt.states.len(), trainable, "every tensor gets exactly one accumulator");

    // A second step decays/updates each accumulator exactly once: with
    // rho<1 and any gradient, accumulators change every step.
    let acc_before: Vec<Tensor> = t.opt.states.values().map(|s| s.accumulator.clone()).collect();
    t.train_step(&images, &attrs).unwrap();
    let changed = t
        .opt
        .states
        .values()
        .zip(&acc_before)
        .filter(|(s, b)| !s.accumulator.bits_eq(b))
        .count();
    assert!(changed > 0);
}

#[test]
fn same_seed_gives_bitwise_identical_telemetry() {
    let run = || {
        let mut trainer = Trainer::new(small_config(TrainMode::VaeGan, 11)).unwrap();
        let ds = small_dataset(12, 12);
        let mut telemetry = Telemetry::in_memory();
        train_loop(&mut trainer, &ds, &mut telemetry, None).unwrap();
        (telemetry, trainer)
    };
    let (t1, tr1) = run();
    let (t2, tr2) = run();
    assert_eq!(t1.records.len(), t2.records.len());
    assert!(!t1.records.is_empty());
    for (a, b) in t1.records.iter().zip(&t2.records) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.losses.prior.to_bits(), b.losses.prior.to_bits());
        assert_eq!(a.losses.recon.to_bits(), b.losses.recon.to_bits());
        assert_eq!(a.losses.gan_dis.to_bits(), b.losses.gan_dis.to_bits());
        assert_eq!(a.losses.gan_dec.to_bits(), b.losses.gan_dec.to_bits());
    }
    assert_params_eq(&params_snapshot(&tr1), &params_snapshot(&tr2));
}

#[test]
fn max_steps_zero_returns_initialized_state() {
    let mut config = small_config(TrainMode::Vae, 13);
    config.max_steps = 0;
    let mut trainer = Trainer::new(config).unwrap();
    let before = params_snapshot(&trainer);
    let ds = small_dataset(13, 8);
    let mut telemetry = Telemetry::in_memory();
    train_loop(&mut trainer, &ds, &mut telemetry, None).unwrap();
    assert_eq!(trainer.step, 0);
    assert!(telemetry.records.is_empty());
    assert_params_eq(&before, &params_snapshot(&trainer));
}

#[test]
fn save_load_resume_matches_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.vgcp");
    let ds = small_dataset(30, 12);

    // Unbroken run: 8 steps.
    let mut config = small_config(TrainMode::VaeGan, 17);
    config.max_steps = 8;
    let mut unbroken = Trainer::new(config.clone()).unwrap();
    let mut tel = Telemetry::in_memory();
    train_loop(&mut unbroken, &ds, &mut tel, None).unwrap();

    // Split run: 4 steps, save, load, 4 more.
    config.max_steps = 4;
    let mut first = Trainer::new(config).unwrap();
    let mut tel1 = Telemetry::in_memory();
    train_loop(&mut first, &ds, &mut tel1, None).unwrap();
    checkpoint::save(&first, &ckpt).unwrap();

    let mut resumed = checkpoint::load(&ckpt).unwrap();
    resumed.config.max_steps = 8;
    let mut tel2 = Telemetry::in_memory();
    train_loop(&mut resumed, &ds, &mut tel2, None).unwrap();

    assert_eq!(unbroken.step, resumed.step);
    assert_params_eq(&params_snapshot(&unbroken), &params_snapshot(&resumed));
    assert_eq!(unbroken.rng.state(), resumed.rng.state());

    // Combined telemetry of the two halves matches the unbroken run.
    let unbroken_records: Vec<_> = tel
        .records
        .iter()
        .map(|r| (r.step, r.losses.recon.to_bits()))
        .collect();
    let split_records: Vec<_> = tel1
        .records
        .iter()
        .chain(&tel2.records)
        .map(|r| (r.step, r.losses.recon.to_bits()))
        .collect();
    assert_eq!(unbroken_records, split_records);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = small_config(TrainMode::Vae, 1);
    c.gamma = 0.0;
    assert!(Trainer::new(c).is_err());

    let mut c = small_config(TrainMode::Vae, 1);
    c.batch_size = 1;
    assert!(Trainer::new(c).is_err());

    let mut c = small_config(TrainMode::Vae, 1);
    c.recon_kind = ReconKind::Feature;
    assert!(Trainer::new(c).is_err());

    let mut c = small_config(TrainMode::VaeFrozenDis, 1);
    c.recon_kind = ReconKind::Pixel;
    assert!(Trainer::new(c).is_err());
}

#[test]
fn conditional_training_step_runs() {
    let mut config = small_config(TrainMode::VaeGan, 23);
    config.attr_count = 3;
    let mut trainer = Trainer::new(config).unwrap();
    let ds = small_dataset(23, 8);
    let (images, attrs) = first_batch(&ds, 4);
    let losses = trainer.train_step(&images, &attrs).unwrap();
    assert!(losses.recon.is_finite());
    assert!(losses.gan_dis.is_finite());
}
