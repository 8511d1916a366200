use std::time::Instant;
use vaegan::data::{batch_iterator, generate_synthetic, SyntheticSpec};
use vaegan::train::{TrainConfig, TrainMode, Trainer};

fn main() {
    let mut config = TrainConfig::new(TrainMode::VaeGan, 16, 0.125, 7);
    config.batch_size = 16;
    let mut trainer = Trainer::new(config).unwrap();
    let ds = generate_synthetic(&SyntheticSpec::new(16, 200, 1)).unwrap();
    let (images, attrs) = batch_iterator(&ds, 16, 0, 0).unwrap().next().unwrap();

    // warmup
    for _ in 0..3 { trainer.train_step(&images, &attrs).unwrap(); }

    let t0 = Instant::now();
    for _ in 0..20 { trainer.compute_gradients(&images, &attrs).unwrap(); }
    println!("compute_gradients: {:.1} ms/step", t0.elapsed().as_secs_f64() * 50.0);

    let t1 = Instant::now();
    for _ in 0..20 { trainer.train_step(&images, &attrs).unwrap(); }
    println!("full train_step:   {:.1} ms/step", t1.elapsed().as_secs_f64() * 50.0);
}
