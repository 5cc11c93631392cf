//! Replays the checked-in fuzz corpus through the fuzz checks, plus random
//! byte mutations of each seed, so decoders are exercised without cargo-fuzz.

#[path = "../fuzz/fuzz_targets/checks.rs"]
mod checks;

use std::path::Path;

use proptest::prelude::*;

type Check = fn(&[u8]);

const TARGETS: [(&str, Check); 6] = [
    ("parse_prompt", checks::parse_prompt_bytes),
    ("parse_config", checks::parse_config_bytes),
    ("decode_checkpoint", checks::decode_checkpoint_bytes),
    ("decode_latent", checks::decode_latent_bytes),
    ("prompt_record", checks::prompt_record_bytes),
    ("detection_record", checks::detection_record_bytes),
];

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fuzz/corpus")
        .join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn every_target_has_seeds_and_accepts_them() {
    for (name, check) in TARGETS {
        let s = seeds(name);
        assert!(!s.is_empty(), "{name} has no corpus");
        for bytes in &s {
            check(bytes);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn mutated_seeds_never_panic(
        target in 0..TARGETS.len(),
        pick in any::<usize>(),
        edits in prop::collection::vec((any::<usize>(), any::<u8>()), 0..6),
        cut in any::<usize>(),
    ) {
        let (name, check) = TARGETS[target];
        let s = seeds(name);
        let mut bytes = s[pick % s.len()].clone();
        for (at, b) in edits {
            if !bytes.is_empty() {
                let i = at % bytes.len();
                bytes[i] = b;
            }
        }
        let keep = if bytes.is_empty() { 0 } else { cut % (bytes.len() + 1) };
        bytes.truncate(keep.max(bytes.len() / 2));
        check(&bytes);
    }

    #[test]
    fn random_bytes_never_panic(target in 0..TARGETS.len(), bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        (TARGETS[target].1)(&bytes);
    }
}
