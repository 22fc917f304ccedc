use modalfuse::fusion::{FusionParams, FusionVariant, Modality};
use modalfuse::synth::{generate, SyntheticSpec};
use modalfuse::trainer::{run_stage2, run_stage3, Stage, TrainConfig};

#[test]
fn separable_fusion_training_halves_the_loss() {
    let ds = generate(&SyntheticSpec::separable()).unwrap();
    for v in FusionVariant::ALL {
        let cfg = TrainConfig { variant: v, ..TrainConfig::default() };
        let params = FusionParams::init(cfg.fusion_shape(ds.dim()), cfg.seed).unwrap();
        let (_, history) = run_stage3(&ds, params, &cfg).unwrap();
        let t = history.totals();
        assert!(t[t.len() - 1] < 0.5 * t[0], "{v}: first {} last {}", t[0], t[t.len() - 1]);
    }
}

#[test]
fn separable_text_alignment_reaches_low_loss() {
    let ds = generate(&SyntheticSpec::separable()).unwrap();
    let cfg = TrainConfig { stage: Stage::QueryTextAlign, ..TrainConfig::default() };
    let params = FusionParams::init(cfg.fusion_shape(ds.dim()), cfg.seed).unwrap();
    let (_, history) = run_stage2(&ds, Modality::Text, params, &cfg).unwrap();
    let last = *history.totals().last().unwrap();
    assert!(last < 0.01, "final stage II loss {last}");
}

#[test]
fn gate_only_training_does_not_increase_loss() {
    let ds = generate(&SyntheticSpec::separable()).unwrap();
    let cfg = TrainConfig { variant: FusionVariant::Moe, train_adapters: false, epochs: 10, ..TrainConfig::default() };
    let params = FusionParams::init(cfg.fusion_shape(ds.dim()), cfg.seed).unwrap();
    let (after, history) = run_stage3(&ds, params.clone(), &cfg).unwrap();
    let t = history.totals();
    assert!(t[t.len() - 1] <= t[0], "{t:?}");
    for m in [Modality::Query, Modality::Text, Modality::Image] {
        assert_eq!(after.adapter(m), params.adapter(m));
    }
}
