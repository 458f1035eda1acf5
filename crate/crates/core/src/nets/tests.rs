use super::*;
use crate::contrast::{contrast_on_tape, ContrastConfig};
use crate::diffcore::{grad_check, grad_check_coords, DEFAULT_FD_EPS};
use crate::maskio::make_patch_grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.gen())
}

#[test]
fn backbone_shapes_and_ranges() {
    let params = init_params(1, 5).unwrap();
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, false);
    let x = tape.constant(image(2, 48, 64));
    let p = backbone_forward(&mut tape, &vars, x).unwrap();
    assert_eq!(tape.value(p.seg).shape(), &[5, 48, 64]);
    assert_eq!(tape.value(p.depth).shape(), &[1, 48, 64]);
    assert_eq!(tape.value(p.normal).shape(), &[3, 48, 64]);
    assert!(tape
        .value(p.depth)
        .data()
        .iter()
        .all(|&d| d > 0.0 && d < 1.0));
    let n = tape.value(p.normal).data();
    let hw = 48 * 64;
    for i in 0..hw {
        let norm = (n[i].powi(2) + n[hw + i].powi(2) + n[2 * hw + i].powi(2)).sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }
    let odd = tape.constant(image(2, 6, 7));
    assert!(backbone_forward(&mut tape, &vars, odd).is_err());
}

#[test]
fn adapter_inputs() {
    let mut tape = Tape::new();
    let v = task_to_adapter_input(
        &mut tape,
        Task::Segmentation,
        AdapterValue::SegLabel {
            classes: &[0, 1],
            num_classes: 2,
            height: 1,
            width: 2,
        },
    )
    .unwrap();
    assert_eq!(tape.value(v).data(), &[1.0, 0.0, 0.0, 1.0]);
    assert!(!tape.requires_grad(v));

    let ignore = one_hot(&[IGNORE_ID, 1], 3, 1, 2).unwrap();
    assert_eq!(ignore.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);

    let logits = tape.leaf(Tensor::full(&[5, 2, 2], 0.3), true);
    let p = task_to_adapter_input(
        &mut tape,
        Task::Segmentation,
        AdapterValue::Prediction(logits),
    )
    .unwrap();
    assert!(tape
        .value(p)
        .data()
        .iter()
        .all(|&x| (x - 0.2).abs() < 1e-15));

    let depth = Tensor::full(&[1, 2, 2], 0.7);
    let d =
        task_to_adapter_input(&mut tape, Task::Depth, AdapterValue::DenseLabel(&depth)).unwrap();
    assert_eq!(tape.value(d), &depth);
    assert!(
        task_to_adapter_input(&mut tape, Task::Normal, AdapterValue::DenseLabel(&depth)).is_err()
    );
}

#[test]
fn aux_mapper_shape_and_shared_trunk() {
    let params = init_params(3, 5).unwrap();
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, false);
    let seg = tape.constant(Tensor::from_fn(&[5, 48, 64], |i| (i as f64 * 0.01).sin()));
    let out = aux_map_forward(&mut tape, &vars, Task::Segmentation, seg).unwrap();
    assert_eq!(tape.value(out).shape(), &[C_JOINT, 24, 32]);

    let depth = Tensor::from_fn(&[1, 8, 8], |i| (i as f64 * 0.37).sin());
    let eval = |p: &ModelParams| {
        let mut tape = Tape::new();
        let vars = p.to_tape(&mut tape, false);
        let s = tape.constant(Tensor::from_fn(&[5, 8, 8], |i| (i as f64 * 0.11).cos()));
        let d = tape.constant(depth.clone());
        let a = aux_map_forward(&mut tape, &vars, Task::Segmentation, s).unwrap();
        let b = aux_map_forward(&mut tape, &vars, Task::Depth, d).unwrap();
        (tape.value(a).clone(), tape.value(b).clone())
    };
    let (a0, b0) = eval(&params);
    let mut bumped = params.clone();
    bumped.tensors_mut()[2 * Layer::Trunk(1).slot()].data_mut()[0] += 0.5;
    let (a1, b1) = eval(&bumped);
    assert_ne!(a0, a1);
    assert_ne!(b0, b1);
}

#[test]
fn aux_mapper_gradients() {
    for seed in 0..5 {
        let params = init_params(10 + seed, 3).unwrap();
        let input = image(20 + seed, 6, 8);
        let r = grad_check(
            |t, x| {
                let vars = params.to_tape(t, false);
                let y = aux_map_forward(t, &vars, Task::Normal, x)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &input,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
        // trunk kernel
        let slot = 2 * Layer::Trunk(0).slot();
        let r = grad_check(
            |t, k| {
                let mut vars = params.to_tape(t, false);
                vars.0[slot] = k;
                let x = t.constant(input.clone());
                let y = aux_map_forward(t, &vars, Task::Normal, x)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &params.tensors()[slot],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}

#[test]
fn squashing_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[3, 4, 5], |_| rng.gen_range(-3.0..3.0));
    let w = Tensor::from_fn(&[3, 4, 5], |_| rng.gen_range(-1.0..1.0));
    for norm in [false, true] {
        let r = grad_check(
            |t, v| {
                let y = if norm {
                    normalize_pixels(t, v)?
                } else {
                    sigmoid(t, v)?
                };
                let c = t.constant(w.clone());
                let p = t.mul(y, c)?;
                t.sum(p)
            },
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
    let mut tape = Tape::new();
    let big = tape.constant(Tensor::new(vec![2], vec![-800.0, 800.0]).unwrap());
    let s = sigmoid(&mut tape, big).unwrap();
    assert_eq!(tape.value(s).data(), &[0.0, 1.0]);
}

#[test]
fn init_is_seeded_and_bounded() {
    let a = init_params(7, 5).unwrap();
    let b = init_params(7, 5).unwrap();
    let c = init_params(8, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for layer in Layer::ALL {
        let bound = (6.0 / layer.fan_in(5) as f64).sqrt();
        assert!(a.kernel(layer).data().iter().all(|w| w.abs() <= bound));
        assert!(a.bias(layer).data().iter().all(|&b| b == 0.0));
        let (o, i) = layer.channels(5);
        assert_eq!(a.kernel(layer).shape(), &[o, i, 3, 3]);
    }
    assert!(init_params(7, 1).is_err());
}

#[test]
fn adam_cases() {
    let mut p = vec![Tensor::scalar(1.5), Tensor::zeros(&[2, 2])];
    let mut st = OptimState::new(&p, 0.1);
    adam_step(&mut p, &[vec![0.0], vec![0.0; 4]], &mut st).unwrap();
    assert_eq!(p[0].item(), 1.5);
    assert_eq!(st.step, 1);

    let mut p = vec![Tensor::scalar(0.0)];
    let mut st = OptimState::new(&p, 0.1);
    adam_step(&mut p, &[vec![1.0]], &mut st).unwrap();
    assert!((p[0].item() + 0.1).abs() < 1e-6);

    let mut p = vec![Tensor::scalar(3.0)];
    let mut st = OptimState::new(&p, 0.1);
    for _ in 0..100 {
        let g = 2.0 * p[0].item();
        adam_step(&mut p, &[vec![g]], &mut st).unwrap();
    }
    assert!(p[0].item().abs() < 0.1, "{}", p[0].item());
    assert!(adam_step(&mut p, &[vec![1.0, 2.0]], &mut st).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let a = init_params(9, 4).unwrap();
    save_checkpoint(&a, &path).unwrap();
    let b = load_checkpoint(&path).unwrap();
    assert_eq!(b.num_classes(), 4);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(x.shape(), y.shape());
        assert!(x
            .data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"RDC1");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

/// Contrast of the label of `src` against the prediction of `dst` only.
fn label_vs_prediction_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    img: &Tensor,
    depth: &Tensor,
) -> Result<Var> {
    let x = tape.constant(img.clone());
    let p = backbone_forward(tape, vars, x)?;
    let label = task_to_adapter_input(tape, Task::Depth, AdapterValue::DenseLabel(depth))?;
    let pred = task_to_adapter_input(tape, Task::Segmentation, AdapterValue::Prediction(p.seg))?;
    let a = aux_map_forward(tape, vars, Task::Depth, label)?;
    let b = aux_map_forward(tape, vars, Task::Segmentation, pred)?;
    let (_, h, w) = tape.value(a).chw()?;
    let mask = make_patch_grid(h, w, h / 2, w / 2)?;
    Ok(contrast_on_tape(tape, a, b, &mask, &ContrastConfig::default())?.0)
}

#[test]
fn label_branch_is_constant() {
    let params = init_params(11, 3).unwrap();
    let img = image(12, 8, 8);
    let depth = Tensor::from_fn(&[1, 8, 8], |i| (i % 8) as f64 / 8.0);
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, true);
    let loss = label_vs_prediction_loss(&mut tape, &vars, &img, &depth).unwrap();
    tape.backward(loss).unwrap();
    let g = vars.grads(&tape);
    let nz = |layer: Layer| g[2 * layer.slot()].iter().any(|&v| v != 0.0);
    assert!(!nz(Layer::Head(Task::Depth)));
    assert!(!nz(Layer::Head(Task::Normal)));
    assert!(nz(Layer::Head(Task::Segmentation)));
    assert!(nz(Layer::Encoder(0)));
    assert!(nz(Layer::Adapter(Task::Depth)));
    assert!(nz(Layer::Trunk(0)));

    // bitwise repeatable forward and backward
    let mut tape2 = Tape::new();
    let vars2 = params.to_tape(&mut tape2, true);
    let loss2 = label_vs_prediction_loss(&mut tape2, &vars2, &img, &depth).unwrap();
    tape2.backward(loss2).unwrap();
    assert_eq!(
        tape.value(loss).item().to_bits(),
        tape2.value(loss2).item().to_bits()
    );
    assert_eq!(g, vars2.grads(&tape2));
}

#[test]
fn backbone_gradients_reach_first_layer() {
    let params = init_params(13, 3).unwrap();
    let img = image(14, 8, 8);
    let depth = Tensor::from_fn(&[1, 8, 8], |i| (i % 8) as f64 / 8.0);
    let slot = 2 * Layer::Encoder(0).slot();
    let coords: Vec<usize> = (0..params.tensors()[slot].len()).step_by(7).collect();
    let r = grad_check_coords(
        |t, k| {
            let mut vars = params.to_tape(t, false);
            vars.0[slot] = k;
            label_vs_prediction_loss(t, &vars, &img, &depth)
        },
        &params.tensors()[slot],
        DEFAULT_FD_EPS,
        &coords,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}
