use amec_core::baselines::{vanilla_config, LstmPredictor};
use amec_core::geo::{self, SynthParams};
use amec_core::predictor::*;
use amec_core::rng;

fn dataset(seed: u64, stride: usize, period: f64, drift: f64) -> geo::DatasetSplit {
    let mut p = SynthParams::default();
    p.sine_period_range = (period, period);
    p.drift_speed = drift;
    let traces = geo::gen_synthetic_traces_with(10, 2000, rng::splitmix64(seed), &p).unwrap();
    geo::build_dataset(&traces, 60, 10, stride)
}

fn cfg(layers: usize, epochs: usize, patience: usize, warmup: usize) -> PredictorConfig {
    PredictorConfig {
        stages: 3, slice_widths: vec![2, 2, 2], d_model: 32, heads: 4,
        layers_per_stage: layers, d_ff: 64, history_len: 60, horizon: 10,
        learning_rate: 1e-3, batch_size: 64, max_epochs: epochs, patience,
        warmup_epochs: warmup,
    }
}

fn triple(tag: &str, data: &geo::DatasetSplit, c: &PredictorConfig, seed: u64) {
    let t0 = std::time::Instant::now();
    let mut hier = Predictor::new(c.clone(), &mut rng::stream(seed, "hier-init")).unwrap();
    let eh = train_sequence_model_warmup(&mut hier, data, c.learning_rate, c.batch_size, c.max_epochs, c.patience, c.warmup_epochs, seed).unwrap();
    let h = test_rmse(&hier, &data.test).unwrap();

    let vc = vanilla_config(c);
    let mut van = Predictor::new(vc.clone(), &mut rng::stream(seed, "vanilla-init")).unwrap();
    let ev = train_sequence_model_warmup(&mut van, data, vc.learning_rate, vc.batch_size, vc.max_epochs, vc.patience, vc.warmup_epochs, seed).unwrap();
    let v = test_rmse(&van, &data.test).unwrap();

    let mut lstm = LstmPredictor::new(60, 10, 128, 64, &mut rng::stream(seed, "lstm-init"));
    let el = train_sequence_model_warmup(&mut lstm, data, c.learning_rate, c.batch_size, c.max_epochs, c.patience, c.warmup_epochs, seed).unwrap();
    let l = test_rmse(&lstm, &data.test).unwrap();

    println!(
        "{tag} seed {seed}: hier {h:.3}/{}ep vanilla {v:.3}/{}ep lstm {l:.3}/{}ep ordered={} h/l={:.2} in {:.0?}",
        eh.len(), ev.len(), el.len(), h <= v && v <= l, h / l, t0.elapsed()
    );
}

#[test]
#[ignore]
fn probe_c() {
    let data = dataset(0, 40, 50.0, 0.35);
    triple("P50-L1", &data, &cfg(1, 150, 20, 8), 0);
}

#[test]
#[ignore]
fn probe_vanilla_p30() {
    let data = dataset(0, 40, 30.0, 0.4);
    let c = cfg(2, 150, 25, 5);
    let vc = vanilla_config(&c);
    let t0 = std::time::Instant::now();
    let mut van = Predictor::new(vc.clone(), &mut rng::stream(0, "vanilla-init")).unwrap();
    let ev = train_sequence_model_warmup(&mut van, &data, vc.learning_rate, vc.batch_size, vc.max_epochs, vc.patience, vc.warmup_epochs, 0).unwrap();
    let v = test_rmse(&van, &data.test).unwrap();
    println!("vanilla-P30-L2: {v:.3}/{}ep in {:.0?}", ev.len(), t0.elapsed());
}

#[test]
#[ignore]
fn probe_l1_b32_p30() {
    let data = dataset(0, 40, 30.0, 0.4);
    let mut c = cfg(1, 150, 25, 8);
    c.batch_size = 32;
    triple("P30-L1-b32", &data, &c, 0);
}

#[test]
#[ignore]
fn probe_lowjitter() {
    let mut p = SynthParams::default();
    p.sine_period_range = (30.0, 30.0);
    p.drift_speed = 0.4;
    p.jitter_amplitude = 0.1;
    let traces = geo::gen_synthetic_traces_with(10, 2000, rng::splitmix64(0), &p).unwrap();
    let data = geo::build_dataset(&traces, 60, 10, 40);
    triple("P30-j0.1-L2", &data, &cfg(2, 150, 25, 5), 0);
}
