mod common;

use std::sync::Arc;

use common::{check, random_image, random_leaf, random_tensor, tiny_config, Projector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textrec_core::encoder::{build_targets, PAD};
use textrec_core::mdcdp::{causal_mask, cbi_s, cbi_v, dsf, sae, stack_forward, AttentionBlock, Mdcdp, SharedGate};
use textrec_core::numerics::{Linear, Param, ParamStore, Tensor};
use textrec_core::recognizer::Recognizer;

const TOL: f64 = 1e-5;
const N: usize = 2;
const L: usize = 4;
const E: usize = 8;

fn params(store: &ParamStore<f64>) -> Vec<Param<f64>> {
    store.iter().cloned().collect()
}

fn block(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, inner: usize) -> AttentionBlock<f64> {
    AttentionBlock::new(&mut store.builder(rng), "b", E, inner, 8, 2).unwrap()
}

#[test]
fn sae_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let b = block(&mut store, &mut rng, E / 2);
    let proj = Projector::new(2, N * L * E);
    let x = random_tensor(&mut rng, &[N, L, E]);
    let err = check(&params(&store), &[x], 64, |t| {
        Ok(proj.loss(&sae(&t[0], &causal_mask(L, L), &b)?))
    });
    assert!(err < TOL, "sae relative error {err:e}");
}

#[test]
fn cbi_semantic_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let b = block(&mut store, &mut rng, E);
    let proj = Projector::new(4, N * L * E);
    let pos = random_tensor(&mut rng, &[N, L, E]);
    let sem = random_tensor(&mut rng, &[N, L, E]);
    let err = check(&params(&store), &[pos, sem], 64, |t| {
        Ok(proj.loss(&cbi_s(&t[0], &t[1], &causal_mask(L, L), &b)?.0))
    });
    assert!(err < TOL, "cbi_s relative error {err:e}");
}

#[test]
fn cbi_visual_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let b = block(&mut store, &mut rng, E);
    let proj = Projector::new(6, N * L * E);
    let pos = random_tensor(&mut rng, &[N, L, E]);
    let vis = random_tensor(&mut rng, &[N, 4, E]);
    let err = check(&params(&store), &[pos, vis], 64, |t| Ok(proj.loss(&cbi_v(&t[0], &t[1], &b)?.0)));
    assert!(err < TOL, "cbi_v relative error {err:e}");
}

#[test]
fn dsf_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let gate = SharedGate::new(&mut store.builder(&mut rng), "dsf", E).unwrap();
    gate.bias.set(random_tensor(&mut rng, &[E]).data().to_vec()).unwrap();
    let proj = Projector::new(8, N * L * E);
    let a = random_tensor(&mut rng, &[N, L, E]);
    let b = random_tensor(&mut rng, &[N, L, E]);
    let err = check(&params(&store), &[a, b], 128, |t| Ok(proj.loss(&dsf(&t[0], &t[1], &gate)?)));
    assert!(err < TOL, "dsf relative error {err:e}");
}

#[test]
fn classifier_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let cls = Linear::new(&mut store.builder(&mut rng), "classifier", E, 6).unwrap();
    let x = random_tensor(&mut rng, &[N, L, E]);
    let targets = [3, 4, 2, 0, 5, 2, 0, 0];
    let err = check(&params(&store), &[x], 64, |t| cls.forward(&t[0])?.cross_entropy(&targets, PAD));
    assert!(err < TOL, "classifier relative error {err:e}");
}

#[test]
fn decoder_stack_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let layers: Vec<Mdcdp<f64>> = {
        let mut pb = store.builder(&mut rng);
        let gate = Arc::new(SharedGate::new(&mut pb, "dsf", E).unwrap());
        (0..3).map(|i| Mdcdp::new(&mut pb, i, &cfg, Some(&gate)).unwrap()).collect()
    };
    let proj = Projector::new(12, N * L * E);
    let pos = random_tensor(&mut rng, &[N, L, E]);
    let vis = random_tensor(&mut rng, &[N, 4, E]);
    let sem = random_tensor(&mut rng, &[N, L, E]);
    let err = check(&params(&store), &[pos, vis, sem], 24, |t| {
        Ok(proj.loss(&stack_forward(&t[0], &t[1], &t[2], &layers)?.0))
    });
    assert!(err < TOL, "stack relative error {err:e}");
}

#[test]
fn end_to_end_loss_gradient() {
    // Seed chosen so no ReLU pre-activation sits within STEP of its kink.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = Recognizer::<f64>::new(&tiny_config()).unwrap();
    let imgs = [random_image(&mut rng, 8, 16), random_image(&mut rng, 8, 16)];
    let x = model.prepare_images(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let labels = vec![vec![3, 5], vec![4]];
    let targets = build_targets(&labels, 4).unwrap();
    let err = check(&params(model.params()), &[], 6, |_| {
        model.forward_train(&x, &labels)?.cross_entropy(&targets, PAD)
    });
    assert!(err < TOL, "end-to-end relative error {err:e}");
}

#[test]
fn primitive_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let proj = Projector::new(16, 256);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&[Tensor<f64>]) -> textrec_core::Result<Tensor<f64>>>)> = vec![
        (
            "broadcast matmul",
            vec![random_leaf(&mut rng, &[2, 3, 4]), random_leaf(&mut rng, &[1, 4, 5])],
            Box::new(|t| Ok(proj.loss(&t[0].matmul(&t[1])?))),
        ),
        (
            "layer norm",
            vec![random_leaf(&mut rng, &[3, 8]), random_leaf(&mut rng, &[8]), random_leaf(&mut rng, &[8])],
            Box::new(|t| Ok(proj.loss(&t[0].layer_norm(&t[1], &t[2])?))),
        ),
        (
            "masked softmax",
            vec![random_leaf(&mut rng, &[2, 4, 4])],
            Box::new(|t| Ok(proj.loss(&t[0].masked_softmax(Some(&causal_mask(4, 4).blocked))?))),
        ),
        (
            "im2col",
            vec![random_leaf(&mut rng, &[1, 4, 5, 2])],
            Box::new(|t| Ok(proj.loss(&t[0].im2col(3, 2, 1)?))),
        ),
        (
            "embedding",
            vec![random_leaf(&mut rng, &[5, 4])],
            Box::new(|t| Ok(proj.loss(&Tensor::embedding(&t[0], &[1, 4, 4, 0], &[2, 2])?))),
        ),
        (
            "sigmoid gate arithmetic",
            vec![random_leaf(&mut rng, &[6]), random_leaf(&mut rng, &[6])],
            Box::new(|t| {
                let s = t[0].sigmoid();
                Ok(proj.loss(&s.mul(&t[1])?.add(&s.one_minus().mul(&t[1].exp())?)?))
            }),
        ),
        (
            "permute and concat",
            vec![random_leaf(&mut rng, &[2, 3, 4]), random_leaf(&mut rng, &[2, 3, 2])],
            Box::new(|t| {
                let c = Tensor::concat(&[&t[0], &t[1]], 2)?;
                Ok(proj.loss(&c.permute(&[2, 0, 1])?.narrow(0, 1, 4)?))
            }),
        ),
    ];
    for (name, inputs, f) in &cases {
        let err = check(&[], inputs, 256, f);
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}
