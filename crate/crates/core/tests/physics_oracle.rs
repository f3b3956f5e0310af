mod common;

use common::{lorenz_spec, stream_messages};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use streamtrain::eval::{rollout, ExactDerivative};
use streamtrain::lorenz::{
    generate_trajectory, sample_initial_state, trajectory_samples, Sample, State, DEFAULT_BETA, DEFAULT_SIGMA,
};
use streamtrain::protocol::{decode_stream, encode, pair_steps};

const ORACLE: ExactDerivative = ExactDerivative {
    sigma: DEFAULT_SIGMA,
    beta: DEFAULT_BETA,
};

#[test]
fn exact_derivative_rollout_reproduces_simulator() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for rho in [0.0, 28.0, 60.0] {
        let spec = lorenz_spec(rho, sample_initial_state(&mut rng) * 0.1, 2000);
        let reference = generate_trajectory(&spec).unwrap();
        let predicted = rollout(&ORACLE, rho, spec.initial_state, spec.dt, spec.n_steps).unwrap();
        assert_eq!(predicted.len(), reference.len());
        for (t, (p, r)) in predicted.iter().zip(&reference).enumerate() {
            assert_eq!(p.to_array().map(f64::to_bits), r.to_array().map(f64::to_bits), "step {t}");
        }
    }
}

#[test]
fn substepped_simulator_matches_fine_rollout_from_wide_initial_states() {
    let substeps = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for rho in [0.0, 20.0, 28.0, 60.0, 100.0] {
        let spec = lorenz_spec(rho, sample_initial_state(&mut rng), 2000).with_substeps(substeps);
        let reference = generate_trajectory(&spec).unwrap();
        let fine = (spec.n_steps - 1) * substeps as usize + 1;
        let predicted = rollout(&ORACLE, rho, spec.initial_state, spec.dt / f64::from(substeps), fine).unwrap();
        let recorded: Vec<&State> = predicted.iter().step_by(substeps as usize).collect();
        assert_eq!(recorded.len(), reference.len());
        for (t, (p, r)) in recorded.iter().zip(&reference).enumerate() {
            assert_eq!(p.to_array().map(f64::to_bits), r.to_array().map(f64::to_bits), "rho {rho} step {t}");
        }
    }
}

#[test]
fn paired_stream_reproduces_direct_finite_differences() {
    let spec = lorenz_spec(28.0, State::new(1.0, 1.0, 1.0), 500);
    let states = generate_trajectory(&spec).unwrap();
    let direct = trajectory_samples(28.0, &states, spec.dt);
    let bytes: Vec<u8> = stream_messages(3, &spec, &states).iter().flat_map(encode).collect();
    let paired = pair_steps(decode_stream(&bytes).unwrap()).unwrap();
    assert_eq!(paired.len(), 499);
    let bits = |s: &Sample| [s.rho, s.state.x, s.state.y, s.state.z, s.velocity.x, s.velocity.y, s.velocity.z].map(f64::to_bits);
    for (a, b) in paired.iter().zip(&direct) {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn velocity_times_dt_recovers_next_state_closely() {
    let spec = lorenz_spec(40.0, State::new(-3.0, 2.0, 20.0), 200);
    let states = generate_trajectory(&spec).unwrap();
    for (s, next) in trajectory_samples(40.0, &states, spec.dt).iter().zip(&states[1..]) {
        let rebuilt = s.state + s.velocity * spec.dt;
        assert!((rebuilt - *next).norm() <= 1e-12 * next.norm().max(1.0));
    }
}
