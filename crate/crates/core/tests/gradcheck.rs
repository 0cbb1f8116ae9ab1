//! Central-finite-difference verification of every differentiable op and of
//! the full parsing loss through the biaffine head and encoder.

use arbor_core::biaffine::{parsing_loss, BiaffineHead};
use arbor_core::encoder::{parser_inputs, pool_words, AdapterConfig, Encoder, EncoderConfig};
use arbor_core::tensor::{Tape, Tensor};
use arbor_core::tokenizer::{Alignment, Encoded};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
    .with_grad()
}

/// Max relative error between analytic and central-difference gradients for
/// every parameter, where `f` rebuilds the scalar loss from scratch.
fn check_gradients(params: &[Tensor], f: impl Fn() -> f64, analytic: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (p, grad) in params.iter().zip(analytic.iter()) {
        let base = p.data();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += H_STEP;
            p.assign(plus).unwrap();
            let up = f();
            let mut minus = base.clone();
            minus[i] -= H_STEP;
            p.assign(minus).unwrap();
            let down = f();
            p.assign(base.clone()).unwrap();
            let numeric = (up - down) / (2.0 * H_STEP);
            let denom = numeric.abs().max(grad[i].abs()).max(1e-8);
            let rel = (numeric - grad[i]).abs() / denom;
            worst = worst.max(rel);
        }
    }
    worst
}

/// Runs `build` to produce a loss, backpropagates, then compares against
/// finite differences of the same construction.
fn assert_grad_ok(name: &str, params: &[Tensor], build: impl Fn() -> Tensor) {
    let tape = Tape::new();
    let loss = build();
    tape.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().expect("gradient populated"))
        .collect();
    for p in params {
        p.zero_grad();
    }
    let worst = check_gradients(params, || build().item(), &analytic);
    assert!(
        worst < TOLERANCE,
        "{name}: max relative error {worst:.3e} exceeds {TOLERANCE:.0e}"
    );
}

#[test]
fn matmul_add_mul_chain() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[4, 2], &mut rng);
        let bias = random_tensor(&[2], &mut rng);
        let c = random_tensor(&[3, 2], &mut rng);
        let tape = Tape::new();
        let build = || {
            let prod = tape.matmul(&a, &b).unwrap();
            let biased = tape.add(&prod, &bias).unwrap();
            let scaled = tape.mul_scalar(&biased, 1.7).unwrap();
            let had = tape.mul(&scaled, &c).unwrap();
            tape.sum_all(&had).unwrap()
        };
        let loss = build();
        tape.backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = [&a, &b, &bias, &c]
            .iter()
            .map(|p| p.grad().unwrap())
            .collect();
        for p in [&a, &b, &bias, &c] {
            p.zero_grad();
        }
        let eval = || {
            let t = Tape::eval();
            let prod = t.matmul(&a, &b).unwrap();
            let biased = t.add(&prod, &bias).unwrap();
            let scaled = t.mul_scalar(&biased, 1.7).unwrap();
            let had = t.mul(&scaled, &c).unwrap();
            t.sum_all(&had).unwrap().item()
        };
        let worst = check_gradients(
            &[a.clone(), b.clone(), bias.clone(), c.clone()],
            eval,
            &analytic,
        );
        assert!(worst < TOLERANCE, "seed {seed}: {worst:.3e}");
    }
}

fn check_unary(name: &str, op: impl Fn(&Tape, &Tensor) -> Tensor) {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = random_tensor(&[2, 5], &mut rng);
        let tape = Tape::new();
        let loss = tape.sum_all(&op(&tape, &x)).unwrap();
        tape.backward(&loss).unwrap();
        let analytic = vec![x.grad().unwrap()];
        x.zero_grad();
        let eval = || {
            let t = Tape::eval();
            t.sum_all(&op(&t, &x)).unwrap().item()
        };
        let worst = check_gradients(std::slice::from_ref(&x), eval, &analytic);
        assert!(worst < TOLERANCE, "{name} seed {seed}: {worst:.3e}");
    }
}

#[test]
fn gelu_gradients() {
    check_unary("gelu", |t, x| t.gelu(x).unwrap());
}

#[test]
fn tanh_gradients() {
    check_unary("tanh", |t, x| t.tanh(x).unwrap());
}

#[test]
fn transpose_and_slicing_gradients() {
    check_unary("transpose", |t, x| t.transpose(x).unwrap());
    check_unary("slice_rows", |t, x| t.slice_rows(x, 0, 1).unwrap());
    check_unary("slice_cols", |t, x| t.slice_cols(x, 1, 4).unwrap());
    check_unary("reshape", |t, x| t.reshape(x, vec![5, 2]).unwrap());
    check_unary("mean_rows", |t, x| t.mean_rows(x).unwrap());
    check_unary("gather_rows", |t, x| t.gather_rows(x, &[1, 1, 0]).unwrap());
}

#[test]
fn concat_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let a = random_tensor(&[2, 3], &mut rng);
        let b = random_tensor(&[1, 3], &mut rng);
        let c = random_tensor(&[2, 2], &mut rng);
        // rows: [a; b], then cols: [a | c]
        let build = |t: &Tape| {
            let rows = t.concat_rows(&[a.clone(), b.clone()]).unwrap();
            let first_two = t.slice_rows(&rows, 0, 2).unwrap();
            let cols = t.concat_cols(&[first_two, c.clone()]).unwrap();
            t.sum_all(&t.mul(&cols, &cols).unwrap()).unwrap()
        };
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = [&a, &b, &c].iter().map(|p| p.grad().unwrap()).collect();
        for p in [&a, &b, &c] {
            p.zero_grad();
        }
        let worst = check_gradients(
            &[a.clone(), b.clone(), c.clone()],
            || build(&Tape::eval()).item(),
            &analytic,
        );
        assert!(worst < TOLERANCE, "seed {seed}: {worst:.3e}");
    }
}

#[test]
fn softmax_and_log_softmax_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let x = random_tensor(&[3, 4], &mut rng);
        let w = random_tensor(&[3, 4], &mut rng);
        let build = |t: &Tape| {
            let sm = t.softmax_rows(&x).unwrap();
            let lsm = t.log_softmax_rows(&x).unwrap();
            let mixed = t.add(&t.mul(&sm, &w).unwrap(), &t.mul(&lsm, &w).unwrap()).unwrap();
            t.sum_all(&mixed).unwrap()
        };
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        let analytic = vec![x.grad().unwrap()];
        x.zero_grad();
        let worst = check_gradients(
            std::slice::from_ref(&x),
            || build(&Tape::eval()).item(),
            &analytic,
        );
        assert!(worst < TOLERANCE, "seed {seed}: {worst:.3e}");
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let x = random_tensor(&[3, 6], &mut rng);
        let gamma = random_tensor(&[6], &mut rng);
        let beta = random_tensor(&[6], &mut rng);
        let w = random_tensor(&[3, 6], &mut rng);
        let build = |t: &Tape| {
            let ln = t.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
            t.sum_all(&t.mul(&ln, &w).unwrap()).unwrap()
        };
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = [&x, &gamma, &beta].iter().map(|p| p.grad().unwrap()).collect();
        for p in [&x, &gamma, &beta] {
            p.zero_grad();
        }
        let worst = check_gradients(
            &[x.clone(), gamma.clone(), beta.clone()],
            || build(&Tape::eval()).item(),
            &analytic,
        );
        assert!(worst < TOLERANCE, "seed {seed}: {worst:.3e}");
    }
}

#[test]
fn dropout_gradients_with_frozen_mask() {
    // identical rng seed per evaluation keeps the mask fixed, which makes
    // the finite differences well-defined
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let x = random_tensor(&[4, 4], &mut rng);
        let build = |t: &Tape| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(42 + seed);
            let dropped = t.dropout(&x, 0.4, true, &mut mask_rng).unwrap();
            t.sum_all(&t.mul(&dropped, &dropped).unwrap()).unwrap()
        };
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        let analytic = vec![x.grad().unwrap()];
        x.zero_grad();
        let worst = check_gradients(
            std::slice::from_ref(&x),
            || build(&Tape::eval()).item(),
            &analytic,
        );
        assert!(worst < TOLERANCE, "seed {seed}: {worst:.3e}");
    }
}

#[test]
fn negative_pick_mean_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let x = random_tensor(&[3, 5], &mut rng);
        let idx = [4usize, 0, 2];
        let build = |t: &Tape| {
            let logp = t.log_softmax_rows(&x).unwrap();
            t.negative_pick_mean(&logp, &idx).unwrap()
        };
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        let analytic = vec![x.grad().unwrap()];
        x.zero_grad();
        let worst = check_gradients(
            std::slice::from_ref(&x),
            || build(&Tape::eval()).item(),
            &analytic,
        );
        assert!(worst < TOLERANCE, "seed {seed}: {worst:.3e}");
    }
}

#[test]
fn parsing_loss_gradients_through_biaffine_head() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let (n, h, r) = (3usize, 5usize, 3usize);
        let head = BiaffineHead::new(h, r, &mut rng);
        let x = random_tensor(&[n, h], &mut rng);
        let xp = random_tensor(&[n + 1, h], &mut rng);
        let gold_heads = [0usize, 1, 2];
        let gold_rels = [2usize, 0, 1];
        let build = |t: &Tape| {
            let scores = head.score(t, &x, &xp).unwrap();
            parsing_loss(t, &scores, &gold_heads, &gold_rels).unwrap()
        };
        let params = [
            head.w_arc.clone(),
            head.b_arc.clone(),
            head.w_rel.clone(),
            head.b_rel.clone(),
            x.clone(),
            xp.clone(),
        ];
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap()).collect();
        for p in &params {
            p.zero_grad();
        }
        let worst = check_gradients(&params, || build(&Tape::eval()).item(), &analytic);
        assert!(worst < TOLERANCE, "seed {seed}: {worst:.3e}");
    }
}

#[test]
fn end_to_end_gradients_through_tiny_encoder() {
    // the full chain: embeddings -> attention/ffn/adapters -> pooling ->
    // biaffine scores -> parsing loss, spot-checked on a few parameters
    let cfg = EncoderConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        ffn: 12,
        max_len: 10,
        dropout: 0.0,
        vocab_size: 270,
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        let mut encoder = Encoder::new(cfg.clone(), &mut rng);
        encoder
            .inject_adapters(AdapterConfig { size: 4 }, &mut rng)
            .unwrap();
        // give the zero-init adapter up-projection mass so its path is live
        let up = encoder.params.get("adapter/layer0/attn/up_w").unwrap();
        up.assign((0..up.len()).map(|i| 0.01 * (i % 7) as f64).collect())
            .unwrap();
        let head = BiaffineHead::new(cfg.hidden, 2, &mut rng);
        let ids = [1u32, 265, 266, 267, 2];
        let encoded = Encoded {
            ids: ids.to_vec(),
            alignment: Alignment {
                spans: vec![(1, 2), (2, 4)],
            },
        };
        let gold_heads = [0usize, 1];
        let gold_rels = [1usize, 0];
        let build = |t: &Tape| {
            let states = encoder.encode_single(t, &ids, None).unwrap();
            let x = pool_words(t, states.final_state(), &encoded).unwrap();
            let xp = parser_inputs(t, states.final_state(), &x).unwrap();
            let scores = head.score(t, &x, &xp).unwrap();
            parsing_loss(t, &scores, &gold_heads, &gold_rels).unwrap()
        };
        let checked = [
            encoder.params.get("base/embed/token").unwrap().clone(),
            encoder.params.get("base/layer0/attn/wq").unwrap().clone(),
            encoder.params.get("base/layer0/ffn/w1").unwrap().clone(),
            encoder.params.get("base/ln_f/gamma").unwrap().clone(),
            encoder.params.get("adapter/layer0/attn/down_w").unwrap().clone(),
            head.w_arc.clone(),
        ];
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = checked.iter().map(|p| p.grad().unwrap()).collect();
        encoder.params.zero_grads();
        head.w_arc.zero_grad();
        let worst = check_gradients(&checked, || build(&Tape::eval()).item(), &analytic);
        assert!(worst < TOLERANCE, "seed {seed}: {worst:.3e}");
    }
}
