use super::{ParamId, Tape, Tensor, Var};
use crate::error::Result;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-8)
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// step `h` and returns the worst relative error over all elements.
pub fn fd_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let id = ParamId(0);
    let leaf = x.clone().param();
    let mut tape = Tape::new();
    let xv = tape.param(&leaf, id);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .param(id)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: &[f64]| -> Result<f64> {
        let probe = Tensor::new(x.shape(), data.to_vec())?;
        let mut tape = Tape::inference();
        let xv = tape.constant(&probe);
        let out = f(&mut tape, xv)?;
        Ok(tape.item(out))
    };
    let all: Vec<usize> = (0..x.numel()).collect();
    fd_check_elements(&analytic, x.data(), &all, h, eval)
}

/// Central-difference check of `analytic` against `eval` on the chosen
/// element indices of the flat parameter vector `x`.
pub fn fd_check_elements<E>(analytic: &[f64], x: &[f64], indices: &[usize], h: f64, mut eval: E) -> Result<f64>
where
    E: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in indices {
        probe[i] = x[i] + h;
        let plus = eval(&probe)?;
        probe[i] = x[i] - h;
        let minus = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

type Builder = Box<dyn Fn(&mut Tape, Var, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    wrt: Vec<usize>,
    others: Vec<Vec<usize>>,
    positive: bool,
    build: Builder,
}

fn case(
    name: &'static str,
    wrt: &[usize],
    others: &[&[usize]],
    build: impl Fn(&mut Tape, Var, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        wrt: wrt.to_vec(),
        others: others.iter().map(|s| s.to_vec()).collect(),
        positive: false,
        build: Box::new(build),
    }
}

/// Runs [`fd_check`] over every primitive on seeded inputs drawn from
/// [-2, 2]. Each output is contracted with fixed random weights so that
/// constant-sum outputs such as softmax still have informative gradients.
/// Returns `(primitive, max relative error)` pairs.
pub fn primitive_suite(h: f64, seed: u64) -> Result<Vec<(String, f64)>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut cases = vec![
        case("add", &[2, 3, 4], &[&[3, 4]], |t, x, o| t.add(x, o[0])),
        case("add/bcast-operand", &[3, 4], &[&[2, 3, 4]], |t, x, o| t.add(o[0], x)),
        case("sub", &[3, 4], &[&[3, 4]], |t, x, o| t.sub(o[0], x)),
        case("mul", &[2, 3, 4], &[&[4]], |t, x, o| t.mul(x, o[0])),
        case("mul/bcast-operand", &[4], &[&[2, 3, 4]], |t, x, o| t.mul(o[0], x)),
        case("scale", &[3, 4], &[], |t, x, _| Ok(t.scale(x, -1.7))),
        case("add_scalar", &[3, 4], &[], |t, x, _| Ok(t.add_scalar(x, 0.3))),
        case("matmul/lhs", &[3, 4], &[&[4, 2]], |t, x, o| t.matmul(x, o[0])),
        case("matmul/rhs", &[4, 2], &[&[3, 4]], |t, x, o| t.matmul(o[0], x)),
        case("matmul/batched", &[2, 3, 3, 4], &[&[2, 3, 4, 2]], |t, x, o| {
            t.matmul(x, o[0])
        }),
        case("matmul/shared-rhs", &[4, 2], &[&[2, 3, 4]], |t, x, o| t.matmul(o[0], x)),
        case("matmul/shared-lhs", &[3, 4], &[&[2, 4, 2]], |t, x, o| t.matmul(x, o[0])),
        case("gelu", &[3, 5], &[], |t, x, _| Ok(t.gelu(x))),
        case("sigmoid", &[3, 5], &[], |t, x, _| Ok(t.sigmoid(x))),
        case("exp", &[3, 5], &[], |t, x, _| Ok(t.exp(x))),
        case("tanh", &[3, 5], &[], |t, x, _| Ok(t.tanh(x))),
        case("softplus", &[3, 5], &[], |t, x, _| Ok(t.softplus(x))),
        case("relu", &[3, 5], &[], |t, x, _| Ok(t.relu(x))),
        case("softmax/last", &[3, 5], &[], |t, x, _| t.softmax(x, 1)),
        case("softmax/inner", &[2, 4, 3], &[], |t, x, _| t.softmax(x, 1)),
        case("log_softmax", &[3, 5], &[], |t, x, _| Ok(t.log_softmax(x))),
        case("layernorm/x", &[3, 6], &[&[6], &[6]], |t, x, o| {
            t.layernorm(x, o[0], o[1], 1e-8)
        }),
        case("layernorm/gain", &[6], &[&[3, 6], &[6]], |t, x, o| {
            t.layernorm(o[0], x, o[1], 1e-8)
        }),
        case("layernorm/bias", &[6], &[&[3, 6], &[6]], |t, x, o| {
            t.layernorm(o[0], o[1], x, 1e-8)
        }),
        case("sum", &[3, 4], &[], |t, x, _| Ok(t.sum(x))),
        case("mean", &[2, 3, 4], &[], |t, x, _| t.mean(x, 1)),
        case("concat", &[2, 3, 4], &[&[2, 2, 4]], |t, x, o| {
            t.concat(&[o[0], x, o[0]], 1)
        }),
        case("slice", &[2, 5, 3], &[], |t, x, _| t.slice(x, 1, 1, 3)),
        case("reshape", &[2, 6], &[], |t, x, _| t.reshape(x, &[3, 4])),
        case("transpose", &[2, 3, 4], &[], |t, x, _| t.transpose(x, 0, 2)),
        case("broadcast_batch", &[3, 4], &[], |t, x, _| Ok(t.broadcast_batch(x, 3))),
        case("pick", &[3, 4], &[], |t, x, _| t.pick(x, &[1, 3, 0])),
        case("select_rows", &[4, 3], &[], |t, x, _| t.select_rows(x, &[2, 0, 2])),
        case("normalize_rows", &[3, 4], &[], |t, x, _| Ok(t.normalize_rows(x, 1e-8))),
    ];
    let mut log = case("log", &[3, 5], &[], |t, x, _| Ok(t.log(x)));
    log.positive = true;
    cases.push(log);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let mut draw = |shape: &[usize], positive: bool| {
            Tensor::from_fn(shape, |_| {
                let v: f64 = rng.gen_range(-2.0..2.0);
                if positive {
                    v.abs() + 0.5
                } else {
                    v
                }
            })
        };
        let x = draw(&c.wrt, c.positive);
        let others: Vec<Tensor> = c.others.iter().map(|s| draw(s, false)).collect();
        let build = &c.build;
        // Weights are created lazily once the output shape is known.
        let probe = {
            let mut t = Tape::inference();
            let xv = t.constant(&x);
            let ov: Vec<Var> = others.iter().map(|o| t.constant(o)).collect();
            let y = build(&mut t, xv, &ov)?;
            t.to_tensor(y)
        };
        let weights = draw(probe.shape(), false);
        let err = fd_check(
            |t, xv| {
                let ov: Vec<Var> = others.iter().map(|o| t.constant(o)).collect();
                let y = build(t, xv, &ov)?;
                let w = t.constant(&weights);
                let yw = t.mul(y, w)?;
                Ok(t.sum(yw))
            },
            &x,
            h,
        )?;
        out.push((c.name.to_string(), err));
    }
    Ok(out)
}
