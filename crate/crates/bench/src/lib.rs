//! Shared fixtures for the benchmarks.

use cultlab::model::Model;
use cultlab::world::{build_suite, generate_world, Suite, SuiteSizes, WorldSizes, WorldSpec};
use cultlab::ModelConfig;

pub struct Fixture {
    pub world: WorldSpec,
    pub suite: Suite,
    pub model: Model,
}

/// Desk-sized untrained model over the default world, with a reduced suite.
pub fn fixture() -> Fixture {
    let world = generate_world(1, &WorldSizes::default()).expect("default world");
    let sizes = SuiteSizes {
        variants: 1,
        ..SuiteSizes::default()
    };
    let suite = build_suite(&world, &sizes).expect("default suite");
    let cfg = ModelConfig::desk(world.vocab.len(), 20);
    let model = Model::init_with_std(cfg, 1, 0.05).expect("valid config");
    Fixture { world, suite, model }
}
