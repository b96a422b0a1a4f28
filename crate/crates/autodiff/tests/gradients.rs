use proptest::prelude::*;
use psc_autodiff::gradcheck::check_gradients;
use psc_autodiff::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(n, sh)| s.add_normal(*n, sh, 0.7, &mut rng).unwrap())
        .collect();
    (s, ids)
}

fn check(
    shapes: &[(&str, &[usize])],
    f: impl Fn(&mut Tape, &[Var]) -> psc_autodiff::Result<Var>,
) {
    for seed in 0..3 {
        let (mut s, ids) = store(shapes, seed);
        let report = check_gradients(&mut s, &ids.clone(), EPS, 64, |s, tape| {
            let vars = ids
                .iter()
                .map(|&id| tape.param(id, s.get(id)))
                .collect::<Result<Vec<_>, _>>()?;
            f(tape, &vars)
        })
        .unwrap();
        for p in &report.params {
            assert!(
                p.max_rel_error < TOL,
                "seed {seed} param {} rel err {}",
                p.name,
                p.max_rel_error
            );
        }
    }
}

/// Reduces any tensor to a scalar through a fixed random projection so that
/// every output element receives a distinct upstream gradient.
fn project(tape: &mut Tape, x: Var) -> psc_autodiff::Result<Var> {
    let n = tape.value(x).len();
    let shape = tape.value(x).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?)?;
    let m = tape.mul(x, w)?;
    tape.sum(m)
}

#[test]
fn matmul_and_variants() {
    check(&[("a", &[3, 4]), ("b", &[4, 2])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y)
    });
    check(&[("a", &[3, 4]), ("b", &[5, 4])], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        project(t, y)
    });
    check(&[("a", &[3, 4])], |t, v| {
        let y = t.transpose(v[0])?;
        project(t, y)
    });
}

#[test]
fn elementwise_ops() {
    check(&[("a", &[2, 3]), ("b", &[2, 3])], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let m = t.scale(m, 1.7)?;
        project(t, m)
    });
    check(&[("a", &[2, 3]), ("r", &[3])], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y)
    });
    check(&[("a", &[2, 3])], |t, v| {
        let g = t.gelu(v[0])?;
        let h = t.tanh(g)?;
        let s = t.sigmoid(h)?;
        project(t, s)
    });
}

#[test]
fn softmax_and_masked_softmax() {
    check(&[("a", &[3, 4])], |t, v| {
        let y = t.softmax(v[0])?;
        project(t, y)
    });
    let mask = [
        true, false, true, true, //
        true, true, false, false, //
        false, false, false, true,
    ];
    check(&[("a", &[3, 4])], move |t, v| {
        let y = t.softmax_masked(v[0], Some(&mask))?;
        project(t, y)
    });
}

#[test]
fn layer_norm() {
    check(&[("x", &[3, 5]), ("g", &[5]), ("b", &[5])], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y)
    });
}

#[test]
fn structural_ops() {
    check(&[("table", &[6, 3])], |t, v| {
        let y = t.gather_rows(v[0], &[1, 4, 1, 0])?;
        project(t, y)
    });
    check(&[("a", &[2, 3]), ("b", &[1, 3])], |t, v| {
        let y = t.concat_rows(&[v[0], v[1], v[0]])?;
        project(t, y)
    });
    check(&[("a", &[2, 3]), ("b", &[2, 1])], |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        project(t, y)
    });
    check(&[("a", &[4, 5])], |t, v| {
        let r = t.slice_rows(v[0], 1, 3)?;
        let c = t.slice_cols(r, 2, 5)?;
        project(t, c)
    });
    check(&[("a", &[4, 5])], |t, v| {
        let y = t.mean_rows(v[0], 1, 4)?;
        project(t, y)
    });
    check(&[("a", &[4, 6])], |t, v| {
        let y = t.rotary(v[0], &[0, 1, 5, 9], 10_000.0)?;
        project(t, y)
    });
}

#[test]
fn losses() {
    check(&[("logits", &[3, 5])], |t, v| t.cross_entropy(v[0], &[4, 0, 2]));
    check(&[("logits", &[4, 1])], |t, v| {
        t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0])
    });
}

#[test]
fn small_attention_block() {
    check(
        &[("x", &[4, 6]), ("wq", &[6, 6]), ("wk", &[6, 6]), ("wv", &[6, 6])],
        |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let k = t.matmul(v[0], v[2])?;
            let val = t.matmul(v[0], v[3])?;
            let q = t.rotary(q, &[0, 0, 1, 2], 100.0)?;
            let k = t.rotary(k, &[0, 0, 1, 2], 100.0)?;
            let s = t.matmul_nt(q, k)?;
            let s = t.scale(s, 1.0 / 6f64.sqrt())?;
            let mask: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4 || i % 4 < 2).collect();
            let a = t.softmax_masked(s, Some(&mask))?;
            let o = t.matmul(a, val)?;
            let p = t.mean_rows(o, 2, 4)?;
            project(t, p)
        },
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (mut s, _) = store(&[("enc.w", &[3, 4]), ("enc.b", &[4]), ("x", &[])], 9);
    let id = s.id("enc.b").unwrap();
    s.get_mut(id).value.data_mut()[0] = f64::MIN_POSITIVE;
    s.get_mut(id).trainable = false;
    let ck = Checkpoint::from_store(r#"{"kind":"test"}"#, &s);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    for (a, b) in ck.entries.iter().zip(&back.entries) {
        let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    let mut other = store(&[("enc.w", &[3, 4]), ("enc.b", &[4]), ("x", &[])], 1).0;
    back.load_into(&mut other).unwrap();
    for ((_, p), (_, q)) in s.iter().zip(other.iter()) {
        assert_eq!(p.value, q.value);
    }
    let mut bytes = Vec::new();
    back.write_to(&mut bytes).unwrap();
    assert_eq!(bytes, std::fs::read(&path).unwrap());
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let (s, ids) = store(&[("a", &[5, 7]), ("b", &[7, 3])], 42);
        let mut t = Tape::new();
        let a = t.param(ids[0], s.get(ids[0])).unwrap();
        let b = t.param(ids[1], s.get(ids[1])).unwrap();
        let c = t.matmul(a, b).unwrap();
        let c = t.softmax(c).unwrap();
        t.value(c).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..6)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let y = t.softmax(x).unwrap();
        let y = t.value(y);
        for i in 0..y.rows() {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 8), 1..5)) {
        prop_assume!(rows.iter().all(|r| {
            let m = r.iter().sum::<f64>() / 8.0;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0 > 1e-2
        }));
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let g = t.constant(Tensor::full(&[8], 1.0)).unwrap();
        let b = t.constant(Tensor::zeros(&[8])).unwrap();
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let y = t.value(y);
        for i in 0..y.rows() {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }
}
