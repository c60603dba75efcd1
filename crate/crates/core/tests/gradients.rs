//! Central-difference gradient checks and algebraic identities of the
//! network building blocks.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cavseg::autodiff::{grad_check, AutodiffError, ParamVars, Tape, Tensor, Var};
use cavseg::model::{build_unet, compute_receptive_field, tversky_loss, LossConfig, ModelError, UNetConfig};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `sum(out * w)` with a fixed random `w`, so every output element carries
/// a distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(out).to_vec(), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn model_err(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

/// Runs `f` forward on constants and reports the kink margin it leaves.
fn margin<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&mut tape, &vars).unwrap();
    tape.kink_margin()
}

/// Draws inputs until none sits within `100 * H` of a relu or pooling kink,
/// then grad-checks.
fn check<F, G>(name: &str, f: F, mut draw: G)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
    G: FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
{
    let mut rng =
        ChaCha8Rng::seed_from_u64(name.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b))));
    for _ in 0..5 {
        let inputs = draw(&mut rng);
        let inputs = loop {
            if margin(&f, &inputs) > 100.0 * H {
                break inputs;
            }
            let again = draw(&mut rng);
            if margin(&f, &again) > 100.0 * H {
                break again;
            }
        };
        let report = grad_check(&f, &inputs, H, TOL).unwrap();
        assert!(report.passed, "{name}: {report:?}");
    }
}

fn dims(rng: &mut ChaCha8Rng, even: bool) -> [usize; 3] {
    [0; 3].map(|_| if even { 2 * rng.gen_range(1..=3) } else { rng.gen_range(1..=6) })
}

#[test]
fn conv3d_gradients() {
    check(
        "conv3d",
        |t, v| {
            let y = t.conv3d(v[0], v[1], v[2])?;
            project(t, y, 1)
        },
        |rng| {
            let d = dims(rng, false);
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let k = if rng.gen_bool(0.5) { 3 } else { 1 };
            vec![
                rand_tensor(rng, vec![ci, d[0], d[1], d[2]], -1.0, 1.0),
                rand_tensor(rng, vec![co, ci, k, k, k], -1.0, 1.0),
                rand_tensor(rng, vec![co], -1.0, 1.0),
            ]
        },
    );
}

#[test]
fn maxpool_gradients() {
    check(
        "maxpool",
        |t, v| {
            let y = t.maxpool3d(v[0])?;
            project(t, y, 2)
        },
        |rng| {
            let d = dims(rng, true);
            let c = rng.gen_range(1..=2);
            vec![rand_tensor(rng, vec![c, d[0], d[1], d[2]], -1.0, 1.0)]
        },
    );
}

#[test]
fn upconv_gradients() {
    check(
        "upconv",
        |t, v| {
            let y = t.upconv3d(v[0], v[1])?;
            project(t, y, 3)
        },
        |rng| {
            let d = [0; 3].map(|_| rng.gen_range(1..=3));
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            vec![
                rand_tensor(rng, vec![ci, d[0], d[1], d[2]], -1.0, 1.0),
                rand_tensor(rng, vec![ci, co, 2, 2, 2], -1.0, 1.0),
            ]
        },
    );
}

#[test]
fn concat_gradients() {
    check(
        "concat",
        |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, 4)
        },
        |rng| {
            let d = dims(rng, false);
            let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            vec![
                rand_tensor(rng, vec![ca, d[0], d[1], d[2]], -1.0, 1.0),
                rand_tensor(rng, vec![cb, d[0], d[1], d[2]], -1.0, 1.0),
            ]
        },
    );
}

#[test]
fn elementwise_gradients() {
    let shape = |rng: &mut ChaCha8Rng| {
        let d = dims(rng, false);
        vec![rng.gen_range(1..=2), d[0], d[1], d[2]]
    };
    check(
        "relu",
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 5)
        },
        |rng| {
            let s = shape(rng);
            vec![rand_tensor(rng, s, -1.0, 1.0)]
        },
    );
    check(
        "sigmoid",
        |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 6)
        },
        |rng| {
            let s = shape(rng);
            vec![rand_tensor(rng, s, -4.0, 4.0)]
        },
    );
    check(
        "add-mul-div-affine",
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[0])?;
            let q = t.div(m, v[1])?;
            let a = t.affine(q, -1.7, 0.3);
            project(t, a, 7)
        },
        |rng| {
            let s = shape(rng);
            vec![rand_tensor(rng, s.clone(), -2.0, 2.0), rand_tensor(rng, s, 0.5, 2.0)]
        },
    );
}

#[test]
fn unet_with_tversky_gradients() {
    let cfg = UNetConfig { levels: 2, base_channels: 2, seed: 5, ..Default::default() };
    let (net, params) = build_unet(&cfg).unwrap();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target =
        Tensor::new(vec![1, 4, 4, 4], (0..64).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect()).unwrap();
    let loss_cfg = LossConfig::default();
    let f = |t: &mut Tape, v: &[Var]| {
        let pv: ParamVars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let y = net.forward(t, &pv, v[0]).map_err(model_err)?;
        let g = t.constant(target.clone());
        tversky_loss(t, y, g, &loss_cfg).map_err(model_err)
    };
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![rand_tensor(&mut rng, vec![1, 4, 4, 4], -1.0, 1.0)];
        inputs.extend(params.iter().map(|(_, p)| p.clone()));
        if margin(&f, &inputs) <= 100.0 * H {
            continue;
        }
        let report = grad_check(f, &inputs, H, TOL).unwrap();
        assert!(report.passed, "{report:?}");
        checked += 1;
        if checked == 2 {
            return;
        }
    }
    panic!("no kink-free draw found");
}

#[test]
fn conv3d_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_tensor(&mut rng, vec![2, 5, 4, 3], -1.0, 1.0);
    let y = rand_tensor(&mut rng, vec![2, 5, 4, 3], -1.0, 1.0);
    let k1 = rand_tensor(&mut rng, vec![3, 2, 3, 3, 3], -1.0, 1.0);
    let k2 = rand_tensor(&mut rng, vec![3, 2, 3, 3, 3], -1.0, 1.0);
    let (a, b) = (0.7, -1.3);
    let zero_bias = Tensor::zeros(vec![3]);
    let conv = |input: &Tensor, kernel: &Tensor| {
        let mut t = Tape::new();
        let (i, k, bias) = (t.constant(input.clone()), t.constant(kernel.clone()), t.constant(zero_bias.clone()));
        let out = t.conv3d(i, k, bias).unwrap();
        t.value(out).to_vec()
    };
    let combine = |p: &Tensor, q: &Tensor| {
        Tensor::new(p.shape().to_vec(), p.data().iter().zip(q.data()).map(|(u, v)| a * u + b * v).collect()).unwrap()
    };
    let lhs = conv(&combine(&x, &y), &k1);
    let (fx, fy) = (conv(&x, &k1), conv(&y, &k1));
    assert!(lhs.iter().zip(fx.iter().zip(&fy)).all(|(l, (u, v))| (l - (a * u + b * v)).abs() < 1e-10));
    let lhs = conv(&x, &combine(&k1, &k2));
    let (g1, g2) = (conv(&x, &k1), conv(&x, &k2));
    assert!(lhs.iter().zip(g1.iter().zip(&g2)).all(|(l, (u, v))| (l - (a * u + b * v)).abs() < 1e-10));
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let cfg = UNetConfig { levels: 2, base_channels: 3, seed: 2, ..Default::default() };
    let run = || {
        let (net, params) = build_unet(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let x = t.constant(rand_tensor(&mut rng, vec![1, 6, 4, 6], -1.0, 1.0));
        let y = net.forward(&mut t, &vars, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        let grads: Vec<u64> = vars.values().flat_map(|&v| t.grad(v).unwrap().to_vec()).map(f64::to_bits).collect();
        (t.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), grads)
    };
    assert_eq!(run(), run());
}

fn loss_value(pred: &[f64], target: &[f64], cfg: &LossConfig) -> f64 {
    let mut t = Tape::new();
    let p = t.constant(Tensor::new(vec![pred.len()], pred.to_vec()).unwrap());
    let g = t.constant(Tensor::new(vec![target.len()], target.to_vec()).unwrap());
    let l = tversky_loss(&mut t, p, g, cfg).unwrap();
    t.value(l)[0]
}

#[test]
fn tversky_half_half_is_soft_dice() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = LossConfig { alpha: 0.5, beta: 0.5, epsilon: 0.0 };
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut g: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.0..1.0) }).collect();
        g[0] = 1.0;
        let spg: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let soft_dice = 1.0 - 2.0 * spg / (p.iter().sum::<f64>() + g.iter().sum::<f64>());
        assert!((loss_value(&p, &g, &cfg) - soft_dice).abs() < 1e-10);
    }
}

#[test]
fn tversky_worked_example() {
    let cfg = LossConfig { alpha: 0.2, beta: 0.8, epsilon: 0.0 };
    assert_eq!(loss_value(&[0.5, 0.5], &[1.0, 0.0], &cfg), 0.5);
    let with_eps = loss_value(&[0.5, 0.5], &[1.0, 0.0], &LossConfig::default());
    assert!((with_eps - 0.5).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tversky_is_monotone_in_predictions(
        pg in prop::collection::vec((0.01f64..0.99, any::<bool>()), 2..20),
        i in any::<prop::sample::Index>(),
    ) {
        let p: Vec<f64> = pg.iter().map(|x| x.0).collect();
        let g: Vec<f64> = pg.iter().map(|x| f64::from(u8::from(x.1))).collect();
        let cfg = LossConfig::default();
        let i = i.index(p.len());
        let mut up = p.clone();
        up[i] += 1e-3;
        let (base, moved) = (loss_value(&p, &g, &cfg), loss_value(&up, &g, &cfg));
        if g[i] == 1.0 {
            prop_assert!(moved <= base + 1e-15);
        } else {
            prop_assert!(moved >= base - 1e-15);
        }
    }

    #[test]
    fn larger_beta_costs_more_with_false_negatives(
        pg in prop::collection::vec((0.01f64..0.99, any::<bool>()), 1..20),
        alpha in 0.0f64..1.0,
        beta in 0.0f64..1.0,
        bump in 0.01f64..1.0,
    ) {
        let p: Vec<f64> = pg.iter().map(|x| x.0).collect();
        let mut g: Vec<f64> = pg.iter().map(|x| f64::from(u8::from(x.1))).collect();
        g[0] = 1.0;
        prop_assume!(alpha + beta > 0.0);
        let lo = loss_value(&p, &g, &LossConfig { alpha, beta, epsilon: 1e-6 });
        let hi = loss_value(&p, &g, &LossConfig { alpha, beta: beta + bump, epsilon: 1e-6 });
        prop_assert!(hi > lo);
    }

    #[test]
    fn forward_preserves_spatial_shape(
        levels in 2usize..4,
        base in 1usize..3,
        four in any::<bool>(),
        m in prop::array::uniform3(1usize..3),
        seed in any::<u64>(),
    ) {
        let cfg = UNetConfig { levels, base_channels: base, in_channels: if four { 4 } else { 1 }, seed, ..Default::default() };
        let (net, params) = build_unet(&cfg).unwrap();
        let d = m.map(|v| v * cfg.size_divisor());
        let mut t = Tape::new();
        let vars = params.bind_frozen(&mut t);
        let x = t.constant(Tensor::filled(vec![cfg.in_channels, d[0], d[1], d[2]], 0.25));
        let y = net.forward(&mut t, &vars, x).unwrap();
        prop_assert_eq!(t.shape(y), &[1, d[0], d[1], d[2]][..]);
        prop_assert!(t.value(y).iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn receptive_field_default_and_monotone() {
    assert_eq!(compute_receptive_field(&UNetConfig::default()), 44);
    let mut prev = 0;
    for levels in 2..9 {
        let rf = compute_receptive_field(&UNetConfig { levels, ..Default::default() });
        assert!(rf > prev, "levels {levels}: {rf} <= {prev}");
        prev = rf;
    }
}
