use minima::container::{read_index, Container, Data, RawEntry, ALIGN};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn entry() -> impl Strategy<Value = RawEntry> {
    (prop::collection::vec(0usize..5, 0..4), any::<bool>(), any::<u64>()).prop_map(|(shape, wide, seed)| {
        let len: usize = shape.iter().product();
        let mut x = seed | 1;
        let mut next = move || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x
        };
        if wide {
            RawEntry::f64("", shape, (0..len).map(|_| f64::from_bits(next())).collect())
        } else {
            RawEntry::f32("", shape, (0..len).map(|_| f32::from_bits(next() as u32)).collect())
        }
    })
}

fn container() -> impl Strategy<Value = Container> {
    (prop::collection::vec(entry(), 0..6), prop::option::of(prop::collection::vec(any::<u8>(), 1..64))).prop_map(|(entries, metadata)| {
        let entries = entries
            .into_iter()
            .enumerate()
            .map(|(i, mut e)| {
                e.name = format!("entry.{i}");
                e
            })
            .collect();
        Container { entries, metadata }
    })
}

proptest! {
    #[test]
    fn round_trip_is_byte_identical(c in container()) {
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.entries.len(), c.entries.len());
        for (a, b) in back.entries.iter().zip(&c.entries) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
            prop_assert!(a.data.bit_eq(&b.data));
        }
        prop_assert_eq!(&back.metadata, &c.metadata);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());

        let (index, _) = read_index(&bytes).unwrap();
        prop_assert!(index.iter().all(|e| e.offset % ALIGN == 0));
        prop_assert!(index.windows(2).all(|w| w[0].offset < w[1].offset));
    }

    #[test]
    fn every_truncation_is_rejected(c in container(), cut in 0.0f64..1.0) {
        let bytes = c.to_bytes().unwrap();
        let n = (cut * bytes.len() as f64) as usize;
        prop_assert!(Container::from_bytes(&bytes[..n]).is_err());
    }
}

#[test]
fn ten_megabyte_file_hashes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.mnma");
    let n = 10 * 1024 * 1024 / 8;
    let data: Vec<f64> = (0..n).map(|i| (i as f64 * 0.618).sin()).collect();
    let c = Container {
        entries: vec![
            RawEntry::f64("big", vec![1024, n / 1024], data),
            RawEntry::f32("small", vec![3], vec![1.0, -0.0, f32::NAN]),
        ],
        metadata: Some(br#"{"note": "large"}"#.to_vec()),
    };
    c.write(&path).unwrap();
    let written = std::fs::read(&path).unwrap();
    assert!(written.len() > 10 * 1024 * 1024);
    let back = Container::read(&path).unwrap();
    let again = dir.path().join("again.mnma");
    back.write(&again).unwrap();
    assert_eq!(Sha256::digest(&written), Sha256::digest(std::fs::read(&again).unwrap()));
    match &back.get("small").unwrap().data {
        Data::F32(v) => assert!(v[1].is_sign_negative() && v[2].is_nan()),
        Data::F64(_) => panic!("dtype changed"),
    }
}
