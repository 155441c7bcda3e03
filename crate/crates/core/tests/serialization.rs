use std::io::Cursor;

use emov2::backbone::{Backbone, BackboneConfig};
use emov2::checks::random_tensor;
use emov2::io::{
    assign_weights, load_tensor, load_weights, read_tensor, read_weights, save_tensor, save_weights, write_tensor,
    write_weights, DType,
};
use emov2::nn::{named_tensors, ForwardCtx};
use emov2::tensor::no_grad;
use emov2::{Error, Tensor};
use tempfile::TempDir;

fn logits(model: &Backbone, x: &Tensor) -> Vec<u64> {
    no_grad(|| model.classify(x, &ForwardCtx::eval()))
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

fn stored(model: &Backbone) -> Vec<(String, Tensor)> {
    named_tensors(model).into_iter().map(|(n, t, _)| (n, t)).collect()
}

#[test]
fn emov2_1m_checkpoint_round_trip() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("1m.emow");
    let config = BackboneConfig::preset("emov2-1m").unwrap();
    let source = Backbone::build(&config, 11).unwrap();
    save_weights(&path, &source).unwrap();

    let mut target = Backbone::build(&config, 12).unwrap();
    let x = random_tensor(&[1, 3, 224, 224], 5, 1.0);
    assert_ne!(logits(&source, &x), logits(&target, &x));
    load_weights(&path, &mut target).unwrap();
    assert_eq!(logits(&source, &x), logits(&target, &x));
    for ((na, ta), (nb, tb)) in stored(&source).iter().zip(stored(&target).iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        assert!(ta.data().iter().zip(tb.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{na}");
    }
}

#[test]
fn load_is_name_keyed_not_ordered() {
    let config = BackboneConfig::toy();
    let source = Backbone::build(&config, 1).unwrap();
    let mut tensors = stored(&source);
    tensors.reverse();
    let mut target = Backbone::build(&config, 2).unwrap();
    assign_weights(&mut target, tensors).unwrap();
    let x = random_tensor(&[2, 3, 32, 32], 0, 1.0);
    assert_eq!(logits(&source, &x), logits(&target, &x));
}

#[test]
fn renamed_tensor_names_missing_key() {
    let config = BackboneConfig::toy();
    let mut tensors = stored(&Backbone::build(&config, 1).unwrap());
    let original = tensors[3].0.clone();
    tensors[3].0 = format!("{original}_renamed");
    let mut buf = Vec::new();
    write_weights(&mut buf, &tensors, DType::F64).unwrap();
    let mut model = Backbone::build(&config, 2).unwrap();
    let err = assign_weights(&mut model, read_weights(&mut Cursor::new(buf)).unwrap()).unwrap_err();
    match err {
        Error::MissingTensor(name) => assert_eq!(name, original),
        other => panic!("expected missing tensor, got {other}"),
    }
}

#[test]
fn shape_mismatch_names_tensor() {
    let mut tensors = stored(&Backbone::build(&BackboneConfig::toy(), 1).unwrap());
    let name = tensors[0].0.clone();
    tensors[0].1 = Tensor::zeros(&[1]);
    let err = assign_weights(&mut Backbone::build(&BackboneConfig::toy(), 1).unwrap(), tensors).unwrap_err();
    assert!(matches!(&err, Error::Format(m) if m.contains(&name)), "{err}");
}

#[test]
fn truncated_checkpoint_is_format_error() {
    let mut buf = Vec::new();
    write_weights(&mut buf, &stored(&Backbone::build(&BackboneConfig::toy(), 1).unwrap()), DType::F64).unwrap();
    for cut in [3, 10, 40, buf.len() / 2, buf.len() - 1] {
        let err = read_weights(&mut Cursor::new(&buf[..cut])).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_weights(&mut Cursor::new(bad)), Err(Error::Format(_))));
    let mut bad = buf;
    bad[4] = 2;
    assert!(matches!(read_weights(&mut Cursor::new(bad)), Err(Error::Format(_))));
}

#[test]
fn tensor_file_round_trip() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.emot");
    let specials = Tensor::from_vec(vec![0.0, -0.0, f64::MAX, f64::MIN_POSITIVE, 1e-310, -3.5], &[2, 3]).unwrap();
    for t in [random_tensor(&[2, 3, 5, 7], 1, 10.0), specials, Tensor::scalar(4.25)] {
        save_tensor(&path, &t, DType::F64).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let halves = Tensor::from_vec(vec![0.5, -1.25, 3.0, 1024.0], &[4]).unwrap();
    let mut buf = Vec::new();
    write_tensor(&mut buf, &halves, DType::F32).unwrap();
    let (back, dtype) = read_tensor(&mut Cursor::new(buf)).unwrap();
    assert_eq!(dtype, DType::F32);
    assert_eq!(back.to_vec(), halves.to_vec());
}
