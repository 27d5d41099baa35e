use molekit::data::{generate_dataset, GenConfig, TaskOracle};
use molekit::potential::{ModelConfig, PotentialModel};
use molekit::reference::ReferenceScheme;
use molekit::systems::ElementTable;
use molekit::train::{batch_loss, prepare_samples, LossKind, Stage, TrainConfig};

fn tiny_model(direct: bool) -> PotentialModel {
    let cfg = ModelConfig { channels: 6, blocks: 2, experts: 3, ffn_hidden: 8, router_hidden: 5, direct_head: direct, ..Default::default() };
    PotentialModel::new(cfg, 9).unwrap()
}

fn check_gradient(stage: Stage, loss: LossKind) {
    let oracle = TaskOracle::bundled("lj-b").unwrap();
    let systems = generate_dataset(&oracle, &GenConfig { n_systems: 12, min_atoms: 3, max_atoms: 6, seed: 5, ..Default::default() }).unwrap();
    let scheme = ReferenceScheme::fit(&systems, &ElementTable::bundled()).unwrap();
    let model = tiny_model(stage == Stage::Direct);
    let cfg = TrainConfig { stage, loss, ..TrainConfig::for_stage(stage) };
    let samples = prepare_samples(&systems[..3], &scheme, &model, cfg.max_neighbors).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    let mut grad = vec![0.0; model.params.total()];
    batch_loss(&model, &batch, &cfg, Some(&mut grad)).unwrap();
    let n = model.params.total();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in (0..n).step_by(n / 40 + 1) {
        let mut p = model.clone();
        p.params.data[i] += h;
        let mut m = model.clone();
        m.params.data[i] -= h;
        let lp = batch_loss(&p, &batch, &cfg, None).unwrap().0.total;
        let lm = batch_loss(&m, &batch, &cfg, None).unwrap().0.total;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - grad[i]).abs() / (1e-3 + fd.abs().max(grad[i].abs()));
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{stage:?} {loss:?}: worst relative gradient error {worst}");
}

#[test]
fn direct_stage_gradient_matches_finite_differences() {
    check_gradient(Stage::Direct, LossKind::Mse);
    check_gradient(Stage::Direct, LossKind::Mae);
}

#[test]
fn conservative_stage_gradient_matches_finite_differences() {
    check_gradient(Stage::Conservative, LossKind::Mse);
    check_gradient(Stage::Conservative, LossKind::Mae);
}

fn short_run(seed: u64) -> (Vec<molekit::train::TraceRow>, molekit::train::TrainState) {
    let oracle = TaskOracle::bundled("morse").unwrap();
    let systems = generate_dataset(&oracle, &GenConfig { n_systems: 20, min_atoms: 2, max_atoms: 8, seed: 1, ..Default::default() }).unwrap();
    let scheme = ReferenceScheme::fit(&systems, &ElementTable::bundled()).unwrap();
    let cfg = TrainConfig { steps: 15, max_atoms: 24, seed, model: tiny_model(true).config, ..Default::default() };
    let mut state = molekit::train::TrainState::new(PotentialModel::new(cfg.model.clone(), seed).unwrap(), Stage::Direct, seed);
    state.reference = Some(scheme.clone());
    let mut trace = Vec::new();
    molekit::train::train_stage(&mut state, &systems, &scheme, &cfg, &mut trace).unwrap();
    (trace, state)
}

#[test]
fn same_seed_same_trace() {
    let (a, sa) = short_run(4);
    let (b, sb) = short_run(4);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let (c, _) = short_run(5);
    assert_ne!(a, c);
}

#[test]
fn trained_state_roundtrips_through_checkpoint() {
    use molekit::checkpoint::Checkpoint;
    let (_, state) = short_run(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    Checkpoint::from_state(&state).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().into_state().unwrap();
    assert_eq!(back, state);
    assert_eq!(Checkpoint::from_state(&back).encode(), std::fs::read(&path).unwrap());

    // Stage two starts from the stage-one weights without the force head.
    let next = back.begin_conservative().unwrap();
    assert!(!next.model.has_direct_head());
    assert_eq!(next.stage, Stage::Conservative);
    assert_eq!(next.reference, state.reference);
}
