//! Checkpoint container encoding, integrity checks and model round trips.

use proptest::prelude::*;
use rmadapter::checkpoint::{
    adapter_checkpoint, backbone_checkpoint, load_adapters, load_backbone, Checkpoint, Header,
    ADAPTER_SECTION, BACKBONE_SECTION, FORMAT_VERSION, MAGIC,
};
use rmadapter_core::{attach, DualEncoderModel, EncoderConfig, RecDepth, SharingMode, Tensor};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        vision_width: 16,
        text_width: 16,
        latent_width: 8,
        heads: 2,
        ..Default::default()
    }
}

fn sample_checkpoint() -> Checkpoint {
    let mut ck = Checkpoint::new(&Header {
        encoder: small_encoder(),
        seed: 7,
    });
    let a = Tensor::new(
        &[2, 3],
        vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1],
    )
    .unwrap();
    let b = Tensor::scalar(f64::NAN);
    ck.push_section(
        "first",
        "{\"k\":1}".into(),
        [("a".to_string(), &a), ("b".to_string(), &b)],
    );
    ck.push_section("empty", String::new(), []);
    ck
}

#[test]
fn layout_starts_with_magic_and_version() {
    let bytes = sample_checkpoint().encode();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
        FORMAT_VERSION
    );
}

#[test]
fn decode_then_encode_is_byte_exact() {
    let bytes = sample_checkpoint().encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);
    assert_eq!(back.sections.len(), 2);
    assert!(back.sections[0].tensors[1].1.data()[0].is_nan());
    assert_eq!(
        back.sections[0].tensors[0].1.data()[1].to_bits(),
        (-0.0f64).to_bits()
    );
    assert_eq!(back.header().unwrap().seed, 7);
}

#[test]
fn damage_is_detected() {
    let bytes = sample_checkpoint().encode();
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(Checkpoint::decode(&flipped)
        .unwrap_err()
        .contains("checksum"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::decode(&magic).unwrap_err().contains("magic"));
    let mut version = bytes.clone();
    version[8] = 99;
    assert!(Checkpoint::decode(&version)
        .unwrap_err()
        .contains("version"));
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::decode(&bytes[..10]).is_err());
}

#[test]
fn backbone_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ckpt");
    let mut model = DualEncoderModel::new(small_encoder(), 3).unwrap();
    model.freeze();
    let ck = backbone_checkpoint(&model, 3);
    ck.write(&path).unwrap();
    let (back, header) = load_backbone(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(header.seed, 3);
    assert_eq!(header.encoder, small_encoder());
    assert_eq!(
        backbone_checkpoint(&back, 3).encode(),
        std::fs::read(&path).unwrap()
    );
    let names: Vec<String> = ck
        .section(BACKBONE_SECTION)
        .unwrap()
        .tensors
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let expected: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, expected);
}

#[test]
fn adapters_round_trip_and_refuse_a_foreign_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let backbone = DualEncoderModel::new(small_encoder(), 3).unwrap();
    let placement = rmadapter_core::AdapterPlacement::top_layers(2, 1);
    for mode in SharingMode::ALL {
        for depth in RecDepth::ALL {
            let mut model = attach(backbone.clone(), placement.clone(), mode, depth, 5).unwrap();
            model.perturb(0.3, 1);
            adapter_checkpoint(&model, 5).write(&path).unwrap();
            let back = load_adapters(&path, model.backbone.clone()).unwrap();
            assert_eq!(back, model);
            let section = Checkpoint::read(&path).unwrap();
            assert_eq!(
                section.section(ADAPTER_SECTION).unwrap().element_count(),
                model.added_parameters()
            );
        }
    }
    let other = DualEncoderModel::new(small_encoder(), 4).unwrap();
    let err = load_adapters(&path, other).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_and_garbage_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    assert_eq!(load_backbone(&missing).unwrap_err().exit_code(), 3);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a checkpoint, just some bytes").unwrap();
    assert_eq!(load_backbone(&junk).unwrap_err().exit_code(), 3);
}

fn tensor_strategy() -> impl Strategy<Value = (String, Tensor)> {
    ("[a-z.0-9]{0,12}", prop::collection::vec(0usize..4, 0..4))
        .prop_flat_map(|(name, shape)| {
            let n: usize = shape.iter().product();
            (
                Just(name),
                Just(shape),
                prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n),
            )
        })
        .prop_map(|(name, shape, data)| (name, Tensor::new(&shape, data).unwrap()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn arbitrary_containers_round_trip(
        seed in any::<u64>(),
        sections in prop::collection::vec(
            ("[a-z]{1,8}", "\\PC{0,20}", prop::collection::vec(tensor_strategy(), 0..4)),
            0..4,
        ),
    ) {
        let mut ck = Checkpoint::new(&Header { encoder: EncoderConfig::default(), seed });
        for (name, meta, tensors) in &sections {
            ck.push_section(name, meta.clone(), tensors.iter().map(|(n, t)| (n.clone(), t)));
        }
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back.sections.len(), sections.len());
    }
}
