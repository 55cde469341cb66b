//! Shared fixtures for the criterion benchmarks under `benches/`.

use rlattr::ppo::{collect_rollout, ObjectiveCoefs, PpoConfig};
use rlattr::rng::{labels, stream};
use rlattr::{Arch, EnvId, PolicyValueParams, RolloutBuffer};

pub struct Fixture {
    pub params: PolicyValueParams,
    pub buffer: RolloutBuffer,
    pub config: PpoConfig,
    pub coefs: ObjectiveCoefs,
}

/// Freshly initialized networks and one collected buffer of `n_steps`.
pub fn fixture(env_id: EnvId, n_steps: usize, seed: u64) -> Fixture {
    let mut env = env_id.make();
    let arch = Arch::standard(env.obs_dim(), env.n_actions());
    let params = PolicyValueParams::init(arch, &mut stream(seed, labels::INIT, 0));
    let config = PpoConfig {
        n_steps,
        ..PpoConfig::default()
    };
    let buffer = collect_rollout(env.as_mut(), &params, &config, &mut stream(seed, labels::COLLECT, 0))
        .expect("collection on a built-in environment succeeds");
    let coefs = ObjectiveCoefs::from(&config);
    Fixture {
        params,
        buffer,
        config,
        coefs,
    }
}
