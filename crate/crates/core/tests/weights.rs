use mipeaks::toy::{decode_weights, encode_weights, ToyConfig, ToyTransformer};
use mipeaks::trace_io::ParseError;
use proptest::prelude::*;

fn small(seed: u64) -> ToyTransformer {
    ToyTransformer::new(ToyConfig {
        vocab_size: 9,
        model_dim: 8,
        layers: 1,
        heads: 2,
        context: 6,
        ff_dim: 8,
        seed,
    })
    .unwrap()
}

fn reseal(bytes: &mut [u8]) {
    let body = bytes.len() - 4;
    let crc = crc32fast::hash(&bytes[..body]);
    bytes[body..].copy_from_slice(&crc.to_le_bytes());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn accepted_mutations_round_trip(
        seed in 0u64..50,
        edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4),
    ) {
        let mut bytes = encode_weights(&small(seed));
        let body = bytes.len() - 4;
        for (pos, v) in edits {
            bytes[pos.index(body)] = v;
        }
        reseal(&mut bytes);
        if let Ok(model) = decode_weights(&bytes) {
            prop_assert_eq!(encode_weights(&model), bytes);
        }
    }

    #[test]
    fn truncations_are_rejected(seed in 0u64..50, cut in any::<prop::sample::Index>()) {
        let bytes = encode_weights(&small(seed));
        prop_assert!(decode_weights(&bytes[..cut.index(bytes.len())]).is_err());
    }
}

#[test]
fn version_and_layout_mismatches() {
    let bytes = encode_weights(&small(2));
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(decode_weights(&v), Err(ParseError::UnsupportedVersion(9))));

    // a manifest whose layout disagrees with its config
    let mut v = bytes;
    let text = String::from_utf8_lossy(&v[12..]).into_owned();
    let at = 12 + text.find("ff.in.weight").unwrap();
    v[at] = b'g';
    reseal(&mut v);
    assert!(matches!(decode_weights(&v), Err(ParseError::Malformed(_))));
}

#[test]
fn fuzz_corpus_seeds_decode_and_re_encode() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/decode_weights");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        assert_eq!(encode_weights(&decode_weights(&bytes).unwrap()), bytes);
        seen += 1;
    }
    assert!(seen >= 2);
}
