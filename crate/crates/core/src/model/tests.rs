use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocks::BlockKind;
use crate::tensor::ops::sigmoid_scalar;

fn toy(width: f64, size: usize) -> ModelConfig {
    ModelConfig {
        width,
        input_size: size,
        in_channels: 1,
        n_classes: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn backbone_totals() {
    let rec = build_backbone(BackboneVariant::Reconstructed, 640).unwrap();
    let orig = build_backbone(BackboneVariant::Original, 640).unwrap();
    assert_eq!(rec.param_count(), 6023584);
    assert_eq!(orig.param_count(), 13371808);
    let ratio = 6023584.0 / 13371808.0;
    assert_eq!((ratio * 100.0f64).round(), 45.0);
    assert_eq!(rec.modules().len(), 9);
    assert_eq!(orig.modules().len(), 11);
    let shapes = rec.output_shapes(&[Shape::new(1, 3, 640, 640)]).unwrap();
    assert_eq!(
        shapes,
        vec![Shape::new(1, 256, 160, 160), Shape::new(1, 512, 80, 80), Shape::new(1, 1024, 40, 40)]
    );
    let shapes = orig.output_shapes(&[Shape::new(1, 3, 640, 640)]).unwrap();
    assert_eq!(shapes[3], Shape::new(1, 1024, 20, 20));
    assert!(build_backbone(BackboneVariant::Reconstructed, 630).is_err());
    assert!(build_backbone(BackboneVariant::Reconstructed, 0).is_err());
}

#[test]
fn ltsn_channel_plan_and_scale_surgery() {
    let model = Model::build(&ModelConfig::default()).unwrap();
    let net = model.net();
    let out = |name: &str| net.modules().iter().find(|m| m.name == name).unwrap().spec.c_out;
    assert_eq!((out("neck.out_p2"), out("neck.out_p3"), out("neck.out_p4")), (128, 256, 512));
    assert_eq!(net.count_kind(BlockKind::SimAM), 2);
    assert_eq!(net.simam_layers(), 2);
    assert_eq!(net.outputs().len(), 3);
    let shapes = model.output_shapes(1).unwrap();
    assert_eq!(
        shapes,
        vec![Shape::new(1, 30, 160, 160), Shape::new(1, 30, 80, 80), Shape::new(1, 30, 40, 40)]
    );
    let all = net.infer_shapes(&[model.input_shape(1)]).unwrap();
    assert!(all.iter().all(|s| s.h >= 40), "a stride-32 map exists");
}

#[test]
fn simam_adds_no_parameters() {
    let with = Model::build(&ModelConfig::default()).unwrap();
    let without = Model::build(&ModelConfig {
        simam: false,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_eq!(without.net().simam_layers(), 0);
    assert_eq!(with.count_params(), without.count_params());
}

#[test]
fn ltsn_is_lighter_than_elanw_baseline() {
    let ltsn = Model::build(&ModelConfig::default()).unwrap();
    let base = Model::build(&ModelConfig {
        variant: NeckVariant::ElanwBaseline,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_eq!(base.net().simam_layers(), 0);
    assert_eq!(base.net().count_kind(BlockKind::ElanW), 4);
    assert!(ltsn.count_params() < base.count_params());
    assert_eq!(ltsn.output_shapes(1).unwrap(), base.output_shapes(1).unwrap());
    assert!(ltsn.count_flops().unwrap() < base.count_flops().unwrap());
}

#[test]
fn width_multiplier() {
    assert_eq!(scale_channels(256, 1.0), 256);
    assert_eq!(scale_channels(256, 0.125), 32);
    assert_eq!(scale_channels(32, 0.125), 4);
    assert_eq!(scale_channels(32, 0.01), 4);
    let m = Model::build(&toy(0.25, 64)).unwrap();
    assert_eq!(
        m.output_shapes(2).unwrap(),
        vec![Shape::new(2, 21, 16, 16), Shape::new(2, 21, 8, 8), Shape::new(2, 21, 4, 4)]
    );
}

#[test]
fn config_validation_and_toml() {
    let cfg = toy(0.25, 64);
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(ModelConfig::from_toml_str(&text).unwrap(), cfg);
    let partial = ModelConfig::from_toml_str("variant = \"elanw_baseline\"\ninput_size = 160\n").unwrap();
    assert_eq!(partial.variant, NeckVariant::ElanwBaseline);
    assert_eq!(partial.anchors, AnchorSet::default());
    assert!(ModelConfig::from_toml_str("input_size = 100").is_err());
    assert!(ModelConfig::from_toml_str("bogus = 1").is_err());
    assert!(ModelConfig::from_toml_str("simam_lambda = 0.0").is_err());
    let unsorted = "anchors = [[[8.0, 8.0], [4.0, 4.0], [12.0, 12.0]], [[16.0, 16.0], [24.0, 24.0], [32.0, 32.0]], [[40.0, 40.0], [56.0, 56.0], [72.0, 72.0]]]";
    assert!(ModelConfig::from_toml_str(unsorted).is_err());
}

#[test]
fn forward_properties() {
    let m = Model::build(&toy(0.25, 64)).unwrap();
    let store = m.init_params(1);
    let zeros = m.predict(&store, &Tensor::zeros(m.input_shape(1))).unwrap();
    assert!(zeros.iter().all(|t| t.is_finite()));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(m.input_shape(1), 0.0, 1.0, &mut rng);
    let a = m.predict(&store, &x).unwrap();
    let b = m.predict(&store, &x).unwrap();
    assert_eq!(a, b);

    let twice = Tensor::stack(&[x.clone(), x]).unwrap();
    let d = m.predict(&store, &twice).unwrap();
    for (single, double) in a.iter().zip(&d) {
        assert_eq!(&double.batch_item(0), single);
        assert_eq!(&double.batch_item(1), single);
    }

    assert!(m.predict(&store, &Tensor::zeros(Shape::new(1, 1, 32, 32))).is_err());
    assert!(m.predict(&store, &Tensor::zeros(Shape::new(1, 3, 64, 64))).is_err());
}

#[test]
fn zero_head_gives_even_objectness() {
    let m = Model::build(&toy(0.25, 64)).unwrap();
    let mut store = m.init_params(3);
    for name in SCALE_NAMES {
        for suffix in ["weight", "bias"] {
            let t = store.get_mut(&format!("head.{name}.{suffix}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = Tensor::full(m.input_shape(1), 0.3);
    for raw in m.predict(&store, &x).unwrap() {
        for a in 0..3 {
            let obj = raw.at(0, a * 7 + 4, 1, 1);
            assert_eq!(sigmoid_scalar(obj), 0.5);
        }
    }
    let dets = m.detect(&store, &x, 0.0).unwrap();
    assert!(dets[0].iter().all(|d| d.score == 0.25));
}

fn blank_maps(n_classes: usize, fill: f64) -> Vec<Tensor> {
    let c = 3 * (5 + n_classes);
    [(16, 16), (8, 8), (4, 4)]
        .iter()
        .map(|&(h, w)| Tensor::full(Shape::new(1, c, h, w), fill))
        .collect()
}

#[test]
fn decode_cases() {
    let anchors = AnchorSet::default();
    let raw = blank_maps(2, -20.0);
    let dets = decode(&raw, &anchors, &STRIDES, 2, 0.25, (64.0, 64.0)).unwrap();
    assert!(dets[0].is_empty());

    // one hand-set cell: scale 1 (stride 8), anchor 2, row 3, col 5
    let mut raw = blank_maps(2, -20.0);
    let base = 2 * 7;
    let logits = [0.3, -0.7, 0.2, -0.4, 2.0, -1.0, 1.5];
    for (j, v) in logits.iter().enumerate() {
        raw[1].set(0, base + j, 3, 5, *v);
    }
    let dets = decode(&raw, &anchors, &STRIDES, 2, 0.25, (64.0, 64.0)).unwrap();
    assert_eq!(dets[0].len(), 1);
    let d = dets[0][0];
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let cx = (2.0 * sig(0.3) - 0.5 + 5.0) * 8.0;
    let cy = (2.0 * sig(-0.7) - 0.5 + 3.0) * 8.0;
    let w = (2.0 * sig(0.2)).powi(2) * 32.0;
    let h = (2.0 * sig(-0.4)).powi(2) * 32.0;
    assert_eq!(d.class_id, 1);
    assert!((d.score - sig(2.0) * sig(1.5)).abs() < 1e-15);
    let (x1, x2) = ((cx - w / 2.0).max(0.0), (cx + w / 2.0).min(64.0));
    let (y1, y2) = ((cy - h / 2.0).max(0.0), (cy + h / 2.0).min(64.0));
    assert!((d.bbox.x1() - x1).abs() < 1e-12 && (d.bbox.x2() - x2).abs() < 1e-12);
    assert!((d.bbox.y1() - y1).abs() < 1e-12 && (d.bbox.y2() - y2).abs() < 1e-12);

    assert!(decode(&raw, &anchors, &STRIDES, 2, 1.5, (64.0, 64.0)).is_err());
    assert!(decode(&raw, &anchors, &STRIDES, 3, 0.5, (64.0, 64.0)).is_err());
}

#[test]
fn decoded_sizes_stay_below_four_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut raw = blank_maps(1, 0.0);
    for t in raw.iter_mut() {
        *t = Tensor::uniform(t.shape(), -8.0, 8.0, &mut rng);
    }
    let dets = decode(&raw, &AnchorSet::default(), &STRIDES, 1, 0.0, (64.0, 64.0)).unwrap();
    assert!(!dets[0].is_empty());
    for d in &dets[0] {
        assert!(d.bbox.w > 0.0 && d.bbox.w < 4.0 * 72.0);
        assert!((0.0..=1.0).contains(&d.score));
    }
}

#[test]
fn weights_round_trip() {
    let m = Model::build(&toy(0.125, 64)).unwrap();
    let mut store = m.init_params(5);
    for (i, r) in store.running.values_mut().enumerate() {
        r.mean.iter_mut().for_each(|v| *v = 0.01 * i as f64);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    save_weights(&store, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"ISTD1");
    let back = m.load_params(&path).unwrap();
    assert_eq!(back.names(), store.names());
    assert_eq!(back.running.len(), store.running.len());
    for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
    // f32 values survive a second trip unchanged
    let path2 = dir.path().join("w2.bin");
    save_weights(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path2).unwrap(), bytes);

    assert!(read_weights(&b"ISTD2"[..]).is_err());
    assert!(read_weights(&bytes[..bytes.len() - 3]).is_err());
    let other = Model::build(&toy(0.25, 64)).unwrap();
    assert!(other.load_params(&path).is_err());
}

#[test]
fn first_record_layout() {
    let mut store = ParamStore::default();
    store.insert("a".into(), Tensor::vector(vec![1.5, -2.0]));
    let mut bytes = Vec::new();
    write_weights(&store, &mut bytes).unwrap();
    let mut want = b"ISTD1".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(b"a");
    want.extend(1u32.to_le_bytes());
    want.extend(2u32.to_le_bytes());
    want.extend(1.5f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    assert_eq!(bytes, want);
}
