mod common;

use std::collections::BTreeMap;

use common::oracles::*;
use metarcnn::detector::{predictor_head, Bound, Params};
use metarcnn::eval::attentive_vector_report;
use metarcnn::prn::{remodel_rois, AttentiveVector, FusionMode};
use metarcnn::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn roi_align_matches_bilinear_oracle() {
    let err = roi_align_max_error(1000, 1);
    assert!(err <= 1e-6, "max error {err:e}");
}

#[test]
fn roi_align_oracle_hand_case() {
    // 1×2×2 map, stride 1: the bin center of the full box is the map center
    let fm = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!(roi_align_oracle(&fm, [0.0, 0.0, 2.0, 2.0], 1.0, 1), vec![1.5]);
}

#[test]
fn nms_matches_quadratic_oracle() {
    assert_eq!(nms_mismatches(1000, 2), 0);
}

#[test]
fn nms_oracle_hand_case() {
    let b = [[0.0, 0.0, 10.0, 10.0], [1.0, 1.0, 11.0, 11.0], [2.0, 2.0, 12.0, 12.0]];
    // 0 suppresses 1; 2 overlaps 0 at 64/136 < 0.5 and survives because 1 is gone
    assert_eq!(nms_oracle(&b, &[0.9, 0.8, 0.7], 0.5), vec![0, 2]);
}

#[test]
fn average_precision_matches_threshold_oracle() {
    let bad = ap_mismatches(50, 3);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn encode_decode_round_trip() {
    let err = encode_decode_max_error(1000, 4);
    assert!(err < 1e-5, "max error {err:e}");
}

#[test]
fn vector_report_matches_pairwise_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let protos: Vec<Vec<f64>> = (0..3).map(|_| (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut vectors = Vec::new();
    for (c, p) in protos.iter().enumerate() {
        for i in 0..10 {
            // f32 values so both sides see identical inputs
            let v: Vec<f32> = p.iter().map(|x| (x + rng.gen_range(-0.2..0.2)) as f32).collect();
            groups.entry(c).or_default().push(v.iter().map(|&x| x as f64).collect());
            vectors.push(AttentiveVector {
                values: Tensor::from_vec(&[16, 1], v),
                class_id: c,
                source: format!("{c}#{i}"),
            });
        }
    }
    let (intra, inter) = cosine_oracle(&groups);
    let r = attentive_vector_report(&vectors).unwrap();
    assert!((r.intra_class_cosine.unwrap() - intra).abs() < 1e-12);
    assert!((r.inter_class_cosine - inter).abs() < 1e-12);
    assert!(intra > inter);
}

#[test]
fn hand_traced_head_forward() {
    // z = [1, 2]ᵀ, v = [0.5, 1] → fused [0.5, 2]
    // hidden = relu(I·fused + [0, −1]) = [0.5, 1]
    // cls = [[1, 1], [−1, 1]]·hidden + [0, 0.25] = [1.5, 0.75]
    // box = [[2, 0], [0, 2], [1, 0], [0, 1]]·hidden = [1, 2, 0.5, 1]
    let mut params = Params::<f64>::new();
    params.insert("head.fc.w", Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    params.insert("head.fc.b", Tensor::from_vec(&[2], vec![0.0, -1.0]));
    params.insert("head.cls.w", Tensor::from_vec(&[2, 2], vec![1.0, 1.0, -1.0, 1.0]));
    params.insert("head.cls.b", Tensor::from_vec(&[2], vec![0.0, 0.25]));
    params.insert("head.box.w", Tensor::from_vec(&[4, 2], vec![2.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 1.0]));
    params.insert("head.box.b", Tensor::zeros(&[4]));
    let mut g = Graph::<f64>::inference();
    let p = Bound::bind_frozen(&mut g, &params);
    let z = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, 2.0]));
    let v = g.constant(Tensor::from_vec(&[2, 1], vec![0.5, 1.0]));
    let fused = remodel_rois(&mut g, z, v, FusionMode::Channelwise).unwrap();
    assert_eq!(g.value(fused).data(), &[0.5, 2.0]);
    let out = predictor_head(&mut g, &p, fused, None).unwrap();
    assert_eq!(g.value(out.cls_logits).data(), &[1.5, 0.75]);
    assert_eq!(g.value(out.box_deltas).data(), &[1.0, 2.0, 0.5, 1.0]);
    // plus fusion adds, concat stacks
    let plus = remodel_rois(&mut g, z, v, FusionMode::Plus).unwrap();
    assert_eq!(g.value(plus).data(), &[1.5, 3.0]);
    let cat = remodel_rois(&mut g, z, v, FusionMode::Concat).unwrap();
    assert_eq!(g.value(cat).shape(), &[4, 1]);
}
