//! Calibration of the synthetic shift knob: the unadapted transfer accuracy
//! of a source-trained model across shift levels.

use chrono::Duration;

use helios::adaptation::{evaluate_checkpoint, evaluate_transfer};
use helios::data::{prepare_frame, PrepareOptions, PreparedDomain, TimeSeriesFrame};
use helios::model::{ArchitectureSpec, Model};
use helios::synth::{make_domain_pair, ClimateParams};
use helios::training::{train_source, TrainConfig};

const FEATURES: [&str; 6] = ["ghi", "dni", "dhi", "temp", "wind_dir", "wind_speed"];

fn prepare(frame: &TimeSeriesFrame, id: &str) -> PreparedDomain {
    let opts = PrepareOptions {
        features: FEATURES.map(String::from).to_vec(),
        ..PrepareOptions::new(id)
    };
    prepare_frame(frame, &opts).unwrap()
}

#[test]
fn transfer_accuracy_falls_with_shift() {
    for seed in [0u64, 1] {
        let base = ClimateParams {
            seed: 100 + seed,
            ..ClimateParams::default()
        };
        let (source, _) = make_domain_pair(&base, 0.0, 420, Duration::hours(1)).unwrap();
        let source = prepare(&source, "source");
        let cfg = TrainConfig {
            max_epochs: 100,
            seed,
            ..TrainConfig::default()
        };
        let model = Model::build(&ArchitectureSpec::default_for(FEATURES.len(), 5), seed).unwrap();
        let (ck, _) = train_source(model, &source.train, &source.val, &cfg).unwrap();
        let source_acc = evaluate_checkpoint(&ck, &source.test).unwrap().accuracy;

        let transfer: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&shift| {
                let (_, target) = make_domain_pair(&base, shift, 420, Duration::hours(1)).unwrap();
                evaluate_transfer(&ck, &prepare(&target, "target").test).unwrap().accuracy
            })
            .collect();
        println!("seed {seed}: source {source_acc:.4}, transfer at shift 0/0.5/1 {transfer:.4?}");
        assert!((source_acc - transfer[0]).abs() <= 0.02, "seed {seed}: shift 0 moved accuracy");
        assert!(transfer[0] >= transfer[1] && transfer[1] >= transfer[2], "seed {seed}: not monotone");
        assert!(source_acc - transfer[2] >= 0.08, "seed {seed}: shift 1 drop below 8 points");
    }
}
