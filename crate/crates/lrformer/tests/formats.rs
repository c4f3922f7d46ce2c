use lrformer::netpbm::{self, Mask, NetpbmError};
use lrformer::weights::{self, WeightError};
use lrformer_core::model::{self, param_layout, Task, VariantSpec};
use lrformer_core::Tensor;

fn micro() -> VariantSpec {
    VariantSpec::registered("micro", Task::Segmentation, 2).unwrap()
}

#[test]
fn micro_weight_file_has_closed_form_size() {
    let spec = micro();
    let store = model::build::<f32>(&spec, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("micro.lrw");
    weights::save_weights(&store, &path).unwrap();
    // 12-byte file header, then per entry: name length, name, dtype, rank,
    // extents and four bytes per value
    let expected: usize = 12
        + param_layout(&spec)
            .iter()
            .map(|(name, shape)| 4 + name.len() + 1 + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>())
            .sum::<usize>();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);
}

#[test]
fn weights_round_trip_through_files_bit_for_bit() {
    let store = model::build::<f32>(&micro(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.lrw"), dir.path().join("b.lrw"));
    weights::save_weights(&store, &a).unwrap();
    let back = weights::load_weights(&a).unwrap();
    assert_eq!(back.names().collect::<Vec<_>>(), store.names().collect::<Vec<_>>());
    for ((_, x), (_, y)) in back.iter().zip(store.iter()) {
        assert_eq!(x.shape(), y.shape());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    weights::save_weights(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn truncated_file_names_the_missing_entry() {
    let store = model::build::<f32>(&micro(), 0).unwrap();
    let bytes = weights::encode(&store).unwrap();
    let last = store.names().last().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.lrw");
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    let e = weights::load_weights(&path).unwrap_err();
    assert!(matches!(e, WeightError::Truncated { .. }));
    assert!(e.to_string().contains(&last), "{e}");
}

#[test]
fn weights_of_another_variant_do_not_fit() {
    let store = model::build::<f32>(&micro(), 0).unwrap();
    let bytes = weights::encode(&store).unwrap();
    let back = weights::decode(&bytes).unwrap();
    let t = model::build::<f32>(&VariantSpec::registered("T", Task::Segmentation, 2).unwrap(), 0).unwrap();
    assert!(matches!(
        back.check_layout(&t),
        Err(lrformer_core::Error::ParamShape { .. } | lrformer_core::Error::MissingParam(_))
    ));
    let three = model::build::<f32>(&VariantSpec::registered("micro", Task::Segmentation, 3).unwrap(), 0).unwrap();
    assert!(matches!(back.check_layout(&three), Err(lrformer_core::Error::ParamShape { .. })));
}

#[test]
fn images_and_masks_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn([3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
    let p = dir.path().join("x.ppm");
    netpbm::write_image(&p, &img).unwrap();
    assert_eq!(netpbm::read_image(&p).unwrap(), img);
    let bytes = std::fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
    assert_eq!(bytes.len(), 11 + 3 * 35);

    let mask = Mask {
        height: 3,
        width: 2,
        labels: vec![0, 1, 1, 0, 2, 2],
    };
    let m = dir.path().join("y.pgm");
    netpbm::write_mask(&m, &mask).unwrap();
    assert_eq!(netpbm::read_mask(&m, 3).unwrap(), mask);
    let e = netpbm::read_mask(&m, 2).unwrap_err();
    assert!(matches!(e, NetpbmError::Format { .. }));
    assert!(e.to_string().contains("label 2 out of range"), "{e}");
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("absent.ppm");
    assert!(matches!(netpbm::read_image(&p), Err(NetpbmError::Io { .. })));
    assert!(matches!(weights::load_weights(&p), Err(WeightError::Io { .. })));
}
