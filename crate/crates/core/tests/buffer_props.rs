mod common;

use common::{check_buffer_interleaving, draw_uniformity_max_z, Op};
use proptest::prelude::*;

use streamtrain::buffer::{BufferConfig, PolicyKind};

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (1usize..40).prop_map(Op::Push),
        5 => Just(Op::Draw),
        1 => Just(Op::Drain),
    ]
}

fn config() -> impl Strategy<Value = BufferConfig> {
    (1usize..8, 0usize..20, 0usize..20, 0usize..20).prop_map(|(batch, min_extra, ready_extra, cap_extra)| {
        let min_threshold = min_extra;
        let ready_threshold = (min_threshold + ready_extra).max(batch);
        let capacity = (ready_threshold + cap_extra).max(min_threshold + batch);
        BufferConfig {
            capacity,
            ready_threshold,
            min_threshold,
            batch_size: batch,
        }
    })
}

fn policy() -> impl Strategy<Value = PolicyKind> {
    prop_oneof![Just(PolicyKind::RandomEvictOnSelect), Just(PolicyKind::FifoPassThrough)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn random_interleavings_keep_invariants(
        cfg in config(),
        kind in policy(),
        seed in any::<u64>(),
        ops in proptest::collection::vec(op(), 1..120),
    ) {
        prop_assert!(cfg.validate().is_ok());
        if let Err(e) = check_buffer_interleaving(cfg, kind, seed, &ops) {
            return Err(TestCaseError::fail(e));
        }
    }

    #[test]
    fn draining_always_empties(
        cfg in config(),
        kind in policy(),
        seed in any::<u64>(),
        pushes in 0usize..200,
    ) {
        let mut ops = vec![Op::Push(pushes), Op::Drain];
        ops.extend(std::iter::repeat_n(Op::Draw, pushes / cfg.batch_size + 2));
        if let Err(e) = check_buffer_interleaving(cfg, kind, seed, &ops) {
            return Err(TestCaseError::fail(e));
        }
    }
}

#[test]
fn selection_is_uniform() {
    let z = draw_uniformity_max_z(20, 5, 4000, 99);
    assert!(z < 3.0, "max z {z}");
}
