use std::collections::BTreeMap;

use proptest::prelude::*;
use swarmshare::bencode::{decode, decode_with, encode, DecodeError, DecodeOptions, Value};

fn value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        any::<i64>().prop_map(Value::Int),
        prop::collection::vec(any::<u8>(), 0..24).prop_map(Value::Bytes),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(Value::List),
            prop::collection::btree_map(prop::collection::vec(any::<u8>(), 0..8), inner, 0..6)
                .prop_map(Value::Dict),
        ]
    })
}

#[test]
fn metainfo_shaped_document() {
    let mut info = BTreeMap::new();
    info.insert(b"length".to_vec(), Value::Int(1 << 20));
    info.insert(b"name".to_vec(), Value::from("data.bin"));
    info.insert(b"piece length".to_vec(), Value::Int(262_144));
    info.insert(b"pieces".to_vec(), Value::Bytes(vec![0xaa; 80]));
    let mut root = BTreeMap::new();
    root.insert(b"announce".to_vec(), Value::from("http://127.0.0.1:6969/announce"));
    root.insert(b"info".to_vec(), Value::Dict(info));
    let doc = Value::Dict(root);
    let bytes = encode(&doc);
    assert!(bytes.starts_with(b"d8:announce30:http://127.0.0.1:6969/announce4:infod6:lengthi1048576e"));
    assert_eq!(decode(&bytes).unwrap(), doc);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip(v in value()) {
        let bytes = encode(&v);
        prop_assert_eq!(decode(&bytes).unwrap(), v);
    }

    #[test]
    fn strict_decode_accepts_only_canonical_bytes(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        if let Ok(v) = decode(&bytes) {
            prop_assert_eq!(encode(&v), bytes);
        }
    }

    #[test]
    fn mutations_yield_typed_errors(v in value(), at in any::<prop::sample::Index>(), byte: u8, cut: bool) {
        let mut bytes = encode(&v);
        let i = at.index(bytes.len());
        if cut {
            bytes.truncate(i);
        } else {
            bytes[i] = byte;
        }
        match decode(&bytes) {
            Ok(d) => prop_assert_eq!(encode(&d), bytes),
            Err(DecodeError::Malformed { .. } | DecodeError::TrailingBytes { .. } | DecodeError::DepthExceeded { .. }) => {}
        }
    }

    #[test]
    fn lenient_decode_sorts_keys(entries in prop::collection::btree_map("[a-z]{1,6}", any::<i64>(), 2..8)) {
        // Emit the entries in descending order, then let lenient mode repair it.
        let mut raw = b"d".to_vec();
        for (k, v) in entries.iter().rev() {
            raw.extend(format!("{}:{}i{}e", k.len(), k, v).bytes());
        }
        raw.push(b'e');
        prop_assert!(decode(&raw).is_err());
        let v = decode_with(&raw, DecodeOptions::lenient()).unwrap();
        let sorted: BTreeMap<Vec<u8>, Value> =
            entries.into_iter().map(|(k, v)| (k.into_bytes(), Value::Int(v))).collect();
        prop_assert_eq!(v, Value::Dict(sorted));
    }
}
