use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlab::persist::{
    read_checkpoint_header, verify_checksums, Checkpoint, DataSource, Dataset, PersistError,
    CHECKPOINT_MAGIC, FORMAT_VERSION,
};
use rlab::tensor::Tensor;
use rlab::transformer::{ModelConfig, ModelWeights};

fn random_weights(rng: &mut ChaCha8Rng) -> ModelWeights {
    let mut w = ModelWeights::new();
    for i in 0..rng.random_range(0..6) {
        let shape: Vec<usize> = (0..rng.random_range(0..4))
            .map(|_| rng.random_range(1..5))
            .collect();
        let n = shape.iter().product();
        // Arbitrary bit patterns, NaN payloads and subnormals included.
        let data = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        w.insert(
            format!("layers.{i}.t{}", rng.random::<u16>()),
            Tensor::new(&shape, data).unwrap(),
        );
    }
    w
}

fn bits(w: &ModelWeights) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    w.iter()
        .map(|(n, t)| {
            (
                n.to_string(),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

/// Re-frames a header and payload the way the writer does.
fn frame(header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

pub fn thousand_roundtrips_without_drift() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..1000 {
        let w = random_weights(&mut rng);
        let ck = Checkpoint::model(ModelConfig::desk(), w.clone());
        let back = if i % 10 == 0 {
            let path = dir.path().join(format!("{i}.ckpt"));
            ck.save(&path).unwrap();
            Checkpoint::load(&path).unwrap()
        } else {
            Checkpoint::decode(&ck.encode()).unwrap()
        };
        assert_eq!(bits(&back.weights), bits(&w), "roundtrip {i}");
        assert_eq!(back.config, ck.config);
        assert!(verify_checksums(&ck.encode()).unwrap().is_empty());
    }
}

pub fn chained_roundtrips_are_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let first = Checkpoint::model(ModelConfig::desk(), random_weights(&mut rng)).encode();
    let mut bytes = first.clone();
    for _ in 0..1000 {
        bytes = Checkpoint::decode(&bytes).unwrap().encode();
    }
    assert_eq!(bytes, first);
}

fn sample_bytes() -> Vec<u8> {
    let mut w = ModelWeights::new();
    w.insert("a", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    w.insert("b", Tensor::new(&[2], vec![5.0, 6.0]).unwrap());
    Checkpoint::model(ModelConfig::desk(), w).encode()
}

pub fn each_fault_maps_to_its_own_error() {
    let bytes = sample_bytes();
    let (header, payload) = read_checkpoint_header(&bytes).unwrap();

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"NOPE");
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&7u32.to_le_bytes());
    let mut overlap = header.clone();
    overlap.tensors[1].offset = 8;
    let mut short_shape = header.clone();
    short_shape.tensors[0].shape = vec![3];
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    let mut extra = bytes.clone();
    extra.push(0);

    let cases: Vec<(&str, Vec<u8>, fn(&PersistError) -> bool)> = vec![
        (
            "magic",
            magic,
            |e| matches!(e, PersistError::BadMagic(m) if m == b"NOPE"),
        ),
        ("version", version, |e| {
            matches!(e, PersistError::UnknownVersion(7))
        }),
        ("truncated preamble", bytes[..10].to_vec(), |e| {
            matches!(e, PersistError::Truncated { .. })
        }),
        (
            "truncated payload",
            bytes[..bytes.len() - 1].to_vec(),
            |e| {
                matches!(
                    e,
                    PersistError::Truncated { .. } | PersistError::PayloadLength { .. }
                )
            },
        ),
        ("trailing bytes", extra, |e| {
            matches!(e, PersistError::PayloadLength { .. })
        }),
        ("header json", frame(b"{not json", payload), |e| {
            matches!(e, PersistError::Header(_))
        }),
        (
            "overlap",
            frame(&serde_json::to_vec(&overlap).unwrap(), payload),
            |e| matches!(e, PersistError::OverlappingOffsets { name, .. } if name == "b"),
        ),
        (
            "shape",
            frame(&serde_json::to_vec(&short_shape).unwrap(), payload),
            |e| matches!(e, PersistError::BadTensor { name, .. } if name == "a"),
        ),
    ];
    for (what, bad, expected) in cases {
        match Checkpoint::decode(&bad) {
            Err(e) => assert!(expected(&e), "{what}: unexpected error {e}"),
            Ok(_) => panic!("{what}: decoded a corrupted file"),
        }
    }

    assert!(Checkpoint::decode(&flipped).is_ok());
    assert_eq!(verify_checksums(&flipped).unwrap(), vec!["b".to_string()]);
}

pub fn dataset_faults() {
    let ds = Dataset::new(
        vec![vec![256, 10, 20, 257], vec![256, 30, 257]],
        258,
        1,
        None,
        DataSource::Corpus {
            split: "holdout".into(),
        },
    );
    let bytes = ds.encode();
    assert_eq!(Dataset::decode(&bytes).unwrap(), ds);
    assert!(matches!(
        Dataset::decode(&bytes[..bytes.len() - 2]),
        Err(PersistError::Truncated { .. })
    ));
    assert!(matches!(
        Dataset::decode(&sample_bytes()),
        Err(PersistError::BadMagic(_))
    ));
    let mut wide = ds.clone();
    wide.records[0][2] = 999;
    assert!(matches!(
        Dataset::decode(&wide.encode()),
        Err(PersistError::BadRecord { index: 0, .. })
    ));
}

pub fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        Checkpoint::load(dir.path().join("absent.ckpt")),
        Err(PersistError::Io(_))
    ));
}

pub const CASES: &[(&str, fn())] = &[
    (
        "thousand_roundtrips_without_drift",
        thousand_roundtrips_without_drift,
    ),
    (
        "chained_roundtrips_are_stable",
        chained_roundtrips_are_stable,
    ),
    (
        "each_fault_maps_to_its_own_error",
        each_fault_maps_to_its_own_error,
    ),
    ("dataset_faults", dataset_faults),
    ("missing_file_is_an_io_error", missing_file_is_an_io_error),
];
