use seqattn::config::RunConfig;
use seqattn::data::{generate, SynthSpec};
use seqattn::network::Model;
use seqattn::training::Trainer;

/// Two identities, one sequence per view, 200 desk epochs.
#[test]
fn desk_training_drives_loss_down() {
    let spec = SynthSpec {
        identities: 2,
        sequences_per_view: 1,
        ..SynthSpec::default()
    };
    let ds = generate(&spec).unwrap();
    assert_eq!(ds.sequence_count(), 4);
    let mut cfg = RunConfig::parse(include_str!("../../../configs/desk.txt")).unwrap();
    cfg.train.epochs = 200;
    // With more frames than cells the penalty cannot reach zero.
    cfg.train.window = Model::new(cfg.model.clone()).unwrap().cells();
    let mut trainer = Trainer::new(cfg).unwrap();
    let logs = trainer.fit(&ds).unwrap();
    assert_eq!(logs.len(), 200);
    let (first, last) = (logs[0].mean_loss, logs[199].mean_loss);
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}
