mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilepart::ir::{interpret, interpret_exact, parse_module, print_module, structurally_eq, verify_core, verify_module};
use tilepart::nest::{fuse_loops, NestProgram};
use tilepart::rewrite::{apply_tile, propagate};
use tilepart::spmd::{spmd_interpret, to_device_program, FuseOptions};

/// Tiles a random argument dim on a random axis, then propagates.
fn random_partition(m: &tilepart::ir::Module, rng: &mut ChaCha8Rng, steps: usize) -> tilepart::ir::Module {
    let mut cur = m.clone();
    for _ in 0..steps {
        let f = cur.main().unwrap();
        let params = f.params().to_vec();
        let v = params[rng.gen_range(0..params.len())];
        let name = f.name(v).unwrap().to_string();
        let dim = rng.gen_range(0..f.tensor_ty(v).rank());
        let axis = ["B", "M"][rng.gen_range(0..2)];
        if let Ok(t) = apply_tile(&cur, &name, dim, axis) {
            cur = propagate(&t).unwrap().0;
        }
    }
    cur
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn print_parse_is_a_fixpoint(seed in any::<u64>(), ops in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_program(&mut rng, ops);
        let p = random_partition(&m, &mut rng, 2);
        for m in [m, p.clone(), fuse_loops(&p)] {
            let text = print_module(&m);
            let back = parse_module(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
            prop_assert!(structurally_eq(&m, &back), "{text}");
            prop_assert_eq!(print_module(&back), text);
        }
    }

    #[test]
    fn registry_entries_are_homomorphisms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tmr_soundness(1, 1e-5, &mut rng).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn propagation_preserves_semantics(seed in any::<u64>(), ops in 1usize..7, steps in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_program(&mut rng, ops);
        let p = random_partition(&m, &mut rng, steps);
        prop_assert!(verify_module(&p).is_empty(), "{:?}", verify_module(&p));
        prop_assert!(verify_core(&p).is_empty(), "{:?}", verify_core(&p));
        let xs = random_inputs(&m, &mut rng);
        let want = interpret_exact(&m, &xs).unwrap();
        let got = interpret_exact(&p, &xs).unwrap();
        prop_assert!(max_err(&got, &want) < 1e-12, "{}", print_module(&p));
        let fused = interpret_exact(&fuse_loops(&p), &xs).unwrap();
        prop_assert!(max_err(&fused, &want) < 1e-12);
    }

    #[test]
    fn device_programs_match_reference(seed in any::<u64>(), ops in 1usize..7, steps in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_program(&mut rng, ops);
        let p = random_partition(&m, &mut rng, steps);
        let dp = to_device_program(&p, &FuseOptions::default()).unwrap();
        prop_assert!(verify_module(&dp.module).is_empty(), "{:?}", verify_module(&dp.module));
        let xs = random_inputs(&m, &mut rng);
        let want = interpret(&m, &xs).unwrap();
        let got = spmd_interpret(&dp.module, &dp.spec, &xs).map_err(|e| TestCaseError::fail(format!("{e}\n{}", print_module(&dp.module))))?;
        prop_assert!(max_err(&got, &want) < 1e-5, "{}", print_module(&dp.module));
    }

    #[test]
    fn nest_form_roundtrips(seed in any::<u64>(), ops in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_partition(&random_program(&mut rng, ops), &mut rng, 2);
        let np = NestProgram::from_module(&m).unwrap();
        prop_assert!(structurally_eq(&np.to_module(), &m));
    }
}
