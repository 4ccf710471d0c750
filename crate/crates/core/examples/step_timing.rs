//! Times one paired training step, prediction and a baseline step at default sizes.
//! `cargo run --release -p stockdd --example step_timing`
use std::time::Instant;
use stockdd::data::*;
use stockdd::model::*;
use stockdd::optim::AdamConfig;
use stockdd::rng::sub_rng;
use stockdd::synth::*;
fn main() {
    stockdd::runtime::tune_allocator();
    let bars = generate_synthetic_market(100, 300, 1, &SynthParams::default()).unwrap();
    let ds = normalize_features(build_samples(&bars, WINDOW, DatasetSplit::for_series(300, WINDOW).unwrap()).unwrap()).unwrap();
    let refs: Vec<&StockSample> = ds.samples.iter().take(256).collect();
    let b = Batch::from_samples(&refs, WINDOW, ds.label_std()).unwrap();
    let mut m = DisentangleModel::new(ModelConfig::default(), 1).unwrap();
    let mut o1 = m.main_optimizer(AdamConfig::default());
    let mut o2 = m.adv_optimizer(AdamConfig::default());
    let mut rng = sub_rng(1, "x");
    let w = LossWeights::default();
    let t = Instant::now();
    for _ in 0..10 { m.train_step_pair(&b, &mut o1, &mut o2, &w, None, &mut rng).unwrap(); }
    println!("pair {:?}/step", t.elapsed() / 10);
    let t = Instant::now();
    let _ = m.predict(&refs, 256).unwrap();
    println!("predict {:?}/256", t.elapsed());
    let mut bl = GruBaseline::new(ModelConfig::default(), 1);
    let mut o = bl.optimizer(AdamConfig::default());
    let t = Instant::now();
    for _ in 0..10 { bl.train_step(&b, &mut o).unwrap(); }
    println!("baseline {:?}/step", t.elapsed() / 10);
}
