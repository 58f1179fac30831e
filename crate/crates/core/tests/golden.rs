//! Seed-0 regression fixtures, recorded from the first run of each quantity.

use demul_core::encoders::prompt_assemble;
use demul_core::eval::{eval_zero_shot, ExperimentConfig, World};
use demul_core::mapping::MappingPair;
use demul_core::num::SeededRng;
use demul_core::trainer::{advance, init_state};

fn close(got: f64, want: f64) {
    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "got {got:?}, want {want:?}");
}

fn world() -> (ExperimentConfig, World) {
    let cfg = ExperimentConfig::default();
    let world = World::build(&cfg).unwrap();
    (cfg, world)
}

#[test]
fn encoders_at_seed_zero() {
    let (_, world) = world();
    let name = &world.class_names[0];
    assert_eq!(name, "zobi");
    let ids = world.tokens.tokens(name).unwrap().to_vec();
    assert_eq!(ids, [5]);
    let ctx: Vec<f64> = (0..32).map(|i| 0.01 * i as f64 - 0.1).collect();
    let seq = prompt_assemble(&ctx, &ids, &world.tokens).unwrap();
    let g = world.encoders.encode_text_g(&seq).unwrap();
    for (got, want) in g.iter().zip([
        -0.034044844959170525,
        0.029446976764468034,
        -0.031534887694042876,
        -0.08122068891497419,
    ]) {
        close(*got, want);
    }
    let x: Vec<f64> = (0..32).map(|i| 0.05 * i as f64 - 0.8).collect();
    let f = world.encoders.encode_image_f(&x).unwrap();
    for (got, want) in f.iter().zip([0.43015149756409343, 0.7719248245259279, 0.7336431028047221, 0.5051829072346858]) {
        close(*got, want);
    }
    close(world.encoders.text_lipschitz_bound(17), 1.8686644583302054);
}

#[test]
fn fresh_phi_shrinks_norms() {
    let (_, world) = world();
    let mut rng = SeededRng::derive(0, "mapping-init");
    let pair = MappingPair::new(32, 48, &mut rng);
    let t = world.encoders.encode_class_name(&world.tokens, &world.class_names[0]).unwrap();
    let ratio = pair.phi_apply(&t).unwrap().norm() / t.norm();
    close(ratio, 0.5841407938013472);
    assert!(ratio < 1.0);
}

#[test]
fn reference_zero_shot_accuracy() {
    let (cfg, world) = world();
    let task = world.task(&cfg.task, 0).unwrap();
    let r = eval_zero_shot(&task, &world.encoders, &world.tokens).unwrap();
    assert_eq!(r.accuracy, 0.775);
    assert!((0.4..=0.9).contains(&r.accuracy));
}

#[test]
fn first_training_step_on_the_reference_task() {
    let (cfg, world) = world();
    let (mapping, report) = world.pretrain(&cfg).unwrap();
    close(report.final_train_loss, 0.0018311049186360284);
    close(report.held_out_cycle_cosine, 0.99734757916035);
    let task = world.task(&cfg.task, 0).unwrap();
    let problem = world.problem(&task, cfg.train.loss.tau, None).unwrap();
    let mut state = init_state(&cfg.train, &problem, mapping).unwrap();
    advance(&mut state, &problem, &cfg.train, Some(1), &mut ()).unwrap();
    let r = state.history[0];
    assert_eq!((r.step, r.epoch, r.lr, r.clamped), (0, 0, 0.01, 0));
    close(r.cls, 19.956454796493723);
    close(r.distill, 4.338269649694377);
    close(r.mapping, 0.002099070617759047);
    close(r.total, 22.12558962134091);
}
