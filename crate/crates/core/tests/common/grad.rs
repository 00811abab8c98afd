//! Reverse-mode gradients against central finite differences.

use emofuse::attention::multi_head_attention;
use emofuse::data::{Label, LabelMode};
use emofuse::encoder::{mask_corrupt, EncoderConfig, EncoderState, LAYER_NORM_EPS};
use emofuse::fusion::{FusionConfig, FusionHead, FusionKind};
use emofuse::model::{FusedModel, PreparedExample};
use emofuse::params::ParamStore;
use emofuse::rng::seeded;
use emofuse::tensor::{Tape, Tensor, Var};
use emofuse::tokens::{Modality, TokenSequence};
use emofuse::training::{batch_gradients, TrainConfig};
use rand::Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Checks d(sum(out * w)) / d(inputs) for a graph built by `build`.
pub fn check_op(name: &str, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = seeded(99);
    let eval = |ins: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let w = weights.cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(ins)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (tape.value(loss).item(), w, g)
    };
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let weights = Tensor::randn(&shape, 1.0, &mut rng);
    let (_, _, analytic) = eval(inputs, Some(&weights));
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * H);
        }
        let e = rel_err(analytic[k].data(), &numeric);
        assert!(e < TOL, "{name}: input {k} relative error {e:e}");
    }
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut seeded(seed))
}

pub fn elementwise_and_linear_ops() {
    check_op("matmul", &[rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1]).unwrap());
    check_op("transpose", &[rand_t(&[3, 4], 3)], |t, v| t.transpose(v[0]).unwrap());
    check_op("add", &[rand_t(&[2, 3], 4), rand_t(&[2, 3], 5)], |t, v| t.add(v[0], v[1]).unwrap());
    check_op("add_row", &[rand_t(&[3, 4], 6), rand_t(&[4], 7)], |t, v| t.add_row(v[0], v[1]).unwrap());
    check_op("linear", &[rand_t(&[2, 3], 8), rand_t(&[3, 5], 9), rand_t(&[5], 10)], |t, v| {
        t.linear(v[0], v[1], v[2]).unwrap()
    });
    check_op("mul", &[rand_t(&[2, 3], 11), rand_t(&[2, 3], 12)], |t, v| t.mul(v[0], v[1]).unwrap());
    check_op("scale", &[rand_t(&[2, 3], 13)], |t, v| t.scale(v[0], -1.7));
    check_op("reshape", &[rand_t(&[2, 6], 14)], |t, v| t.reshape(v[0], &[4, 3]).unwrap());
    check_op("gelu", &[rand_t(&[3, 4], 15)], |t, v| t.gelu(v[0]));
    check_op("sum", &[rand_t(&[3, 2], 16)], |t, v| t.sum(v[0]));
    check_op("mean", &[rand_t(&[3, 2], 17)], |t, v| t.mean(v[0]));
}

pub fn normalization_and_softmax() {
    check_op("softmax", &[rand_t(&[3, 5], 20)], |t, v| t.softmax_rows(v[0]).unwrap());
    check_op(
        "layer_norm",
        &[rand_t(&[3, 6], 21), rand_t(&[6], 22), rand_t(&[6], 23)],
        |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap(),
    );
}

pub fn indexing_ops() {
    check_op("gather_rows", &[rand_t(&[5, 3], 30)], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    check_op("slice_cols", &[rand_t(&[3, 6], 31)], |t, v| t.slice_cols(v[0], 2, 3).unwrap());
    check_op("concat_cols", &[rand_t(&[2, 3], 32), rand_t(&[2, 2], 33)], |t, v| {
        t.concat_cols(&[v[0], v[1]]).unwrap()
    });
}

pub fn dropout_with_fixed_mask() {
    check_op("dropout", &[rand_t(&[4, 5], 40)], |t, v| t.dropout(v[0], 0.3, &mut seeded(7)).unwrap());
}

pub fn losses() {
    check_op("cross_entropy", &[rand_t(&[4, 6], 50)], |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2]).unwrap());
    // targets kept well away from the kinks of |x|
    let pred = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
    check_op("l1", &[pred], |t, v| t.l1_loss(v[0], &[1.0, 0.0, -0.5]).unwrap());
}

pub fn multi_head_attention_paths() {
    check_op(
        "attention",
        &[rand_t(&[3, 4], 60), rand_t(&[5, 4], 61), rand_t(&[5, 4], 62)],
        |t, v| multi_head_attention(t, v[0], v[1], v[2], 2).unwrap().0,
    );
    check_op(
        "attention weights",
        &[rand_t(&[2, 4], 63), rand_t(&[3, 4], 64), rand_t(&[3, 4], 65)],
        |t, v| multi_head_attention(t, v[0], v[1], v[2], 2).unwrap().1[1],
    );
}

/// Compares analytic and numeric gradients for every entry of every tensor
/// in `store` (or `max_per_tensor` seeded entries of larger ones).
fn check_store(
    name: &str,
    store: &mut ParamStore,
    analytic: &[Tensor],
    max_per_tensor: usize,
    loss: &dyn Fn(&ParamStore) -> f64,
) {
    let mut rng = seeded(123);
    let n = store.len();
    for k in 0..n {
        let len = analytic[k].len();
        let idx: Vec<usize> = if len <= max_per_tensor {
            (0..len).collect()
        } else {
            (0..max_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let mut a = Vec::new();
        let mut num = Vec::new();
        for &i in &idx {
            let orig = entry(store, k, i);
            set_entry(store, k, i, orig + H);
            let lp = loss(store);
            set_entry(store, k, i, orig - H);
            let lm = loss(store);
            set_entry(store, k, i, orig);
            a.push(analytic[k].data()[i]);
            num.push((lp - lm) / (2.0 * H));
        }
        let e = rel_err(&a, &num);
        let pname = store.iter().nth(k).unwrap().0.to_string();
        assert!(e < TOL, "{name}: {pname} relative error {e:e}");
    }
}

fn entry(store: &ParamStore, k: usize, i: usize) -> f64 {
    store.iter().nth(k).unwrap().1.data()[i]
}

fn set_entry(store: &mut ParamStore, k: usize, i: usize, v: f64) {
    store.tensors_mut().nth(k).unwrap().1.data_mut()[i] = v;
}

fn seq(modality: Modality, body: &[u32]) -> TokenSequence {
    TokenSequence::with_cls(modality, body.iter().copied())
}

pub fn masked_lm_loss_all_parameters() {
    let mut cfg = EncoderConfig::tiny(11);
    cfg.dropout = 0.1;
    let mut enc = EncoderState::new(cfg, &mut seeded(1)).unwrap();
    // larger weights than the default init so every path carries signal
    for (_, t) in enc.params_mut().tensors_mut() {
        if t.shape().len() == 2 {
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
    }
    let s = seq(Modality::Speech, &[5, 9, 10, 7, 8, 5, 6, 10]);
    let ex = mask_corrupt(&s, 0.4, 11, &mut seeded(2)).unwrap();
    let loss_of = |e: &EncoderState| {
        let mut tape = Tape::new();
        let b = e.params().bind(&mut tape, false);
        let l = e.masked_lm_loss(&mut tape, &b, &ex, Some(&mut seeded(3))).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let b = enc.params().bind(&mut tape, true);
    let l = enc.masked_lm_loss(&mut tape, &b, &ex, Some(&mut seeded(3))).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic = b.gradients(enc.params(), &grads);
    let mut store = enc.params().clone();
    check_store("mlm", &mut store, &analytic, usize::MAX, &|p| {
        let mut e = enc.clone();
        *e.params_mut() = p.clone();
        loss_of(&e)
    });
}

fn tiny_fusion(kind: FusionKind, n_outputs: usize) -> FusionHead {
    let cfg = FusionConfig {
        kind,
        d_speech: 8,
        d_text: 12,
        n_outputs,
        n_heads: 2,
        dropout: 0.2,
    };
    let mut f = FusionHead::new(cfg, &mut seeded(4)).unwrap();
    for (_, t) in f.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = *v * 25.0 + 0.05;
        }
    }
    f
}

pub fn fusion_heads_all_parameters_and_inputs() {
    for kind in FusionKind::ALL {
        let head = tiny_fusion(kind, 8);
        let hs = rand_t(&[5, 8], 70);
        let ht = rand_t(&[4, 12], 71);
        let loss_of = |f: &FusionHead, hs: &Tensor, ht: &Tensor, grads: bool| {
            let mut tape = Tape::new();
            let b = f.params().bind(&mut tape, grads);
            let vs = tape.leaf(hs.clone(), grads);
            let vt = tape.leaf(ht.clone(), grads);
            let tr = f
                .forward(&mut tape, &b, Some(vs), Some(vt), Some(&mut seeded(5)))
                .unwrap();
            let pairs = tape.reshape(tr.logits, &[4, 2]).unwrap();
            let l = tape.cross_entropy(pairs, &[0, 1, 0, 0]).unwrap();
            (tape, b, vs, vt, l)
        };
        let (tape, b, vs, vt, l) = loss_of(&head, &hs, &ht, true);
        let grads = tape.backward(l).unwrap();
        let analytic = b.gradients(head.params(), &grads);
        let mut store = head.params().clone();
        check_store(kind.name(), &mut store, &analytic, usize::MAX, &|p| {
            let mut f = head.clone();
            *f.params_mut() = p.clone();
            let (tape, _, _, _, l) = loss_of(&f, &hs, &ht, false);
            tape.value(l).item()
        });
        // gradients flowing back into the encoder outputs
        for (which, v, x) in [(0, vs, &hs), (1, vt, &ht)] {
            if (which == 0 && !kind.uses_speech()) || (which == 1 && !kind.uses_text()) {
                continue;
            }
            let a = grads.get(v).unwrap().data().to_vec();
            let mut num = vec![0.0; x.len()];
            for i in 0..x.len() {
                let mut p = x.clone();
                p.data_mut()[i] += H;
                let mut m = x.clone();
                m.data_mut()[i] -= H;
                let (lp, lm) = if which == 0 {
                    (loss_of(&head, &p, &ht, false), loss_of(&head, &m, &ht, false))
                } else {
                    (loss_of(&head, &hs, &p, false), loss_of(&head, &hs, &m, false))
                };
                num[i] = (lp.0.value(lp.4).item() - lm.0.value(lm.4).item()) / (2.0 * H);
            }
            let e = rel_err(&a, &num);
            assert!(e < TOL, "{}: input {which} relative error {e:e}", kind.name());
        }
    }
}

fn tiny_model(kind: FusionKind, mode: LabelMode) -> FusedModel {
    let mut s = EncoderState::new(EncoderConfig::tiny(14), &mut seeded(10)).unwrap();
    let mut t = EncoderState::new(EncoderConfig::tiny(18), &mut seeded(11)).unwrap();
    for enc in [&mut s, &mut t] {
        for (_, p) in enc.params_mut().tensors_mut() {
            if p.shape().len() == 2 {
                p.data_mut().iter_mut().for_each(|v| *v *= 10.0);
            }
        }
    }
    let fc = FusionConfig {
        kind,
        d_speech: 16,
        d_text: 16,
        n_outputs: mode.n_outputs(),
        n_heads: 2,
        dropout: 0.0,
    };
    let mut f = FusionHead::new(fc, &mut seeded(12)).unwrap();
    for (_, p) in f.params_mut().tensors_mut() {
        p.data_mut().iter_mut().for_each(|v| *v *= 20.0);
    }
    FusedModel::new(s, t, f, mode).unwrap()
}

fn tiny_batch(mode: LabelMode) -> Vec<PreparedExample> {
    let label = |i: usize| match mode {
        LabelMode::Categorical4 => Label::Class(i % 4),
        LabelMode::Score => Label::Score(if i == 0 { 2.4 } else { -1.7 }),
    };
    vec![
        PreparedExample {
            id: "a".into(),
            speech: seq(Modality::Speech, &[5, 8, 13, 9, 9]),
            text: seq(Modality::Text, &[6, 17, 4]),
            label: label(0),
        },
        PreparedExample {
            id: "b".into(),
            speech: seq(Modality::Speech, &[12, 6, 7]),
            text: seq(Modality::Text, &[8, 9, 10, 11, 5]),
            label: label(1),
        },
    ]
}

/// End to end: training-loss gradients of the whole model (both encoders and
/// the head) against the independently computed evaluation loss.
pub fn full_model_classification_and_regression() {
    for (kind, mode) in [
        (FusionKind::CoAttention, LabelMode::Categorical4),
        (FusionKind::Shallow, LabelMode::Score),
    ] {
        let model = tiny_model(kind, mode);
        let batch = tiny_batch(mode);
        let cfg = TrainConfig {
            dropout: 0.0,
            batch_size: 2,
            ..Default::default()
        };
        let g = batch_gradients(&model, &batch, &cfg, 0).unwrap();
        let eval_loss = |m: &FusedModel| m.evaluate(&batch).unwrap().loss;
        assert!((g.loss - eval_loss(&model)).abs() < 1e-12);

        let mut store = model.fusion.params().clone();
        check_store("model.fusion", &mut store, &g.fusion, 24, &|p| {
            let mut m = model.clone();
            *m.fusion.params_mut() = p.clone();
            eval_loss(&m)
        });
        let mut store = model.speech.params().clone();
        check_store("model.speech", &mut store, g.speech.as_ref().unwrap(), 24, &|p| {
            let mut m = model.clone();
            *m.speech.params_mut() = p.clone();
            eval_loss(&m)
        });
        let mut store = model.text.params().clone();
        check_store("model.text", &mut store, g.text.as_ref().unwrap(), 24, &|p| {
            let mut m = model.clone();
            *m.text.params_mut() = p.clone();
            eval_loss(&m)
        });
    }
}
