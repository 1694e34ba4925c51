mod common;

use common::{randn3, random_tree, rng};
use pointgmm::em::{EmConfig, fit_tree};
use pointgmm::hgmm::{Point3, PointCloud, depth_log_likelihood};
use pointgmm::io::{
    Model, format_ply, format_xyz, model_from_json, parse_ply, parse_xyz, read_checkpoint, read_cloud, read_model,
    read_tree, write_checkpoint, write_cloud, write_tree,
};
use pointgmm::model::VaeModel;
use pointgmm::shapes::{ProceduralShape, sample_shape};
use pointgmm::Error;
use proptest::prelude::*;

fn arb_cloud() -> impl Strategy<Value = PointCloud> {
    let coord = prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), -1e3..1e3f64];
    prop::collection::vec(prop::array::uniform3(coord), 1..40)
        .prop_map(|rows| PointCloud::new(rows.into_iter().map(Point3::from).collect()).unwrap())
}

proptest! {
    #[test]
    fn xyz_and_ply_round_trip(cloud in arb_cloud()) {
        prop_assert_eq!(&parse_xyz(&format_xyz(&cloud)).unwrap(), &cloud);
        prop_assert_eq!(&parse_ply(&format_ply(&cloud)).unwrap(), &cloud);
    }
}

#[test]
fn cloud_files_round_trip_by_extension() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(1);
    let cloud = PointCloud::new((0..25).map(|_| randn3(&mut r) * 1e-7).collect()).unwrap();
    for name in ["a.xyz", "b.ply"] {
        let path = dir.path().join(name);
        write_cloud(&path, &cloud).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), cloud);
    }
}

#[test]
fn ply_property_order_is_enforced() {
    let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float y\nproperty float x\nproperty float z\nend_header\n1 2 3\n";
    let err = parse_ply(bad).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
    let binary = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    assert!(parse_ply(binary).is_err());
    let extra = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 2 3 255\n4 5 6 0\n";
    assert_eq!(parse_ply(extra).unwrap(), PointCloud::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
}

#[test]
fn malformed_lines_report_line_numbers() {
    match parse_xyz("0 0 0\n# note\n1 2\n").unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 3),
        e => panic!("{e}"),
    }
    match parse_xyz("0 0 0\n1 two 3\n").unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("{e}"),
    }
}

#[test]
fn tree_json_round_trips_bit_exactly() {
    let mut r = rng(2);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..20 {
        let tree = random_tree(&mut r, &[3, 2, 2][..1 + i % 3]);
        let path = dir.path().join("t.json");
        write_tree(&path, &tree).unwrap();
        assert_eq!(read_tree(&path).unwrap(), tree);
    }
}

#[test]
fn unknown_format_version_is_rejected() {
    let mut r = rng(3);
    let text = pointgmm::io::tree_to_json(&random_tree(&mut r, &[2])).replace("\"format_version\": 1", "\"format_version\": 7");
    match model_from_json(&text).unwrap_err() {
        Error::Version { found, expected } => assert_eq!((found, expected), (7, 1)),
        e => panic!("{e}"),
    }
}

#[test]
fn em_model_file_reproduces_likelihood() {
    let mut r = rng(4);
    let cloud = PointCloud::new((0..200).map(|_| randn3(&mut r)).collect()).unwrap();
    let tree = fit_tree(&cloud, &EmConfig { branching: vec![3, 2], ..EmConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("em.json");
    write_tree(&path, &tree).unwrap();
    let Model::Tree(loaded) = read_model(&path).unwrap() else { panic!("expected a tree") };
    for level in 1..=2 {
        assert_eq!(
            depth_log_likelihood(&loaded, &cloud, level).unwrap().to_bits(),
            depth_log_likelihood(&tree, &cloud, level).unwrap().to_bits()
        );
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let model = VaeModel::new(common::tiny_vae_config(vec![2, 2]), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.json");
    write_checkpoint(&path, &model.to_checkpoint()).unwrap();
    let loaded = VaeModel::from_checkpoint(&read_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(loaded.config, model.config);
    let z = [0.3, -1.0, 2.0, 0.5];
    assert_eq!(loaded.decode(&z).unwrap(), model.decode(&z).unwrap());
    assert!(read_tree(&path).is_err());
}

#[test]
fn box_faces_receive_area_proportional_counts() {
    let n = 60_000;
    let cloud = sample_shape(&ProceduralShape::cuboid([1.0, 1.0, 1.0]), n, 0).unwrap();
    let mut counts = [0usize; 6];
    for p in cloud.points() {
        let face = (0..3).find_map(|a| {
            if (p[a] + 0.5).abs() < 1e-12 {
                Some(2 * a)
            } else if (p[a] - 0.5).abs() < 1e-12 {
                Some(2 * a + 1)
            } else {
                None
            }
        });
        counts[face.expect("point off the surface")] += 1;
    }
    for c in counts {
        assert!((c as f64 - n as f64 / 6.0).abs() <= 0.02 * n as f64 / 6.0, "{counts:?}");
    }
}

#[test]
fn single_sample_lies_on_surface_and_is_reproducible() {
    let shape = ProceduralShape::cuboid([2.0, 1.0, 0.5]);
    for seed in 0..50 {
        let a = sample_shape(&shape, 1, seed).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, sample_shape(&shape, 1, seed).unwrap());
        let p = a.points()[0];
        let half = [1.0, 0.5, 0.25];
        let on_face = (0..3).any(|k| (p[k].abs() - half[k]).abs() < 1e-12);
        let inside = (0..3).all(|k| p[k].abs() <= half[k] + 1e-12);
        assert!(on_face && inside, "{p:?}");
    }
}
