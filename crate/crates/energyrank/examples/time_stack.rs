use energyrank::datagen::{gen_labeled, GenConfig};
use energyrank::featurizer::FeaturizerSalts;
use energyrank::msdae::PretrainConfig;
use energyrank::pipeline::train_pipeline;
use energyrank::trainer::TrainConfig;

fn main() {
    let gen = GenConfig { seed: 600, ..GenConfig::default() };
    let splits = gen_labeled(&gen, 1.0 / 12.0).unwrap();
    let pre = PretrainConfig { epochs: 8, seed: 0, ..Default::default() };
    let cfg = TrainConfig {
        max_epochs: 40,
        patience: 40,
        seed: 0,
        ..Default::default()
    };
    let salts = FeaturizerSalts::default();
    let (pipe, curve, report) =
        train_pipeline(&splits.train, &splits.validation, salts, &pre, &cfg).unwrap();
    println!("pretrain curve: {curve:?}");
    for m in &report.metrics {
        println!("{}", serde_json::to_string(m).unwrap());
    }
    let test = pipe.evaluate(&splits.test).unwrap();
    println!("test error {:.4}", test.error_rate);
}
