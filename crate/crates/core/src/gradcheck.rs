//! Central-difference gradient checks in 64-bit arithmetic.
//!
//! Error is norm-wise: `‖g_num − g_tape‖ / max(‖g_num‖ + ‖g_tape‖, 1e-12)`
//! over every input that receives a gradient. Inputs are drawn away from
//! kinks (relu, abs, max ties) so the finite difference is well defined.

use rand::Rng as _;

use crate::autodiff::{AttentionSpec, Reduce, Tape, Var};
use crate::error::Result;
use crate::rng;
use crate::sparsity::{displaced_tape, hoyer_tape};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;

/// Builds the checked expression from the input vars.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Norm-wise relative error of tape gradients against central differences.
/// Non-scalar outputs are contracted with a fixed random tensor first.
pub fn check(inputs: &[Tensor<f64>], grad: &[bool], seed: u64, build: &Build) -> Result<f64> {
    let probe = {
        let mut t = Tape::<f64>::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars)?;
        t.value(out).shape().to_vec()
    };
    let weights = {
        let mut r = rng::stream(seed, "gradcheck-weights");
        let n: usize = probe.iter().product();
        Tensor::new(
            probe.clone(),
            (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        )?
    };
    let loss_of = |t: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let out = build(t, vars)?;
        if t.value(out).is_scalar() {
            return Ok(out);
        }
        let w = t.constant(weights.clone());
        let p = t.mul(out, w)?;
        t.sum(p, Reduce::All)
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(grad)
        .map(|(x, &g)| tape.leaf(x.clone(), g))
        .collect();
    let loss = loss_of(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let value_at = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::no_grad();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = loss_of(&mut t, &v)?;
        Ok(t.value(l).item())
    };
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    let mut xs = inputs.to_vec();
    for (i, &g) in grad.iter().enumerate() {
        if !g {
            continue;
        }
        let an = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let up = value_at(&xs)?;
            xs[i].data_mut()[j] = x0 - STEP;
            let down = value_at(&xs)?;
            xs[i].data_mut()[j] = x0;
            let num = (up - down) / (2.0 * STEP);
            let a = an.data()[j];
            diff += (num - a).powi(2);
            norm += num.powi(2) + a.powi(2);
        }
    }
    Ok(diff.sqrt() / norm.sqrt().max(1e-12))
}

fn normal(r: &mut rng::Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    rng::normal_tensor(r, shape, std).cast()
}

/// Normal entries pushed at least `gap` away from zero.
fn away_from_zero(r: &mut rng::Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    normal(r, shape, 1.0).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Distinct values with pairwise gaps of at least `gap`, shuffled.
fn distinct(r: &mut rng::Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * gap + r.random_range(0.0..gap * 0.1))
        .collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

/// One named case of the suite.
pub struct Case {
    pub name: &'static str,
    pub error: f64,
}

/// Every autodiff op, the Hoyer penalty and the displaced-GELU penalty
/// path, each checked once for `seed`.
pub fn suite(seed: u64) -> Result<Vec<Case>> {
    let mut r = rng::stream(seed, "gradcheck-inputs");
    let mut out = Vec::new();
    let mut push = |name: &'static str, e: Result<f64>| -> Result<()> {
        out.push(Case { name, error: e? });
        Ok(())
    };
    let (a, b) = (normal(&mut r, &[3, 4], 1.0), normal(&mut r, &[4, 5], 1.0));
    push(
        "matmul",
        check(&[a, b], &[true, true], seed, &|t, v| t.matmul(v[0], v[1])),
    )?;
    let (a, b) = (normal(&mut r, &[3, 4], 1.0), normal(&mut r, &[3, 4], 1.0));
    push(
        "add",
        check(&[a.clone(), b.clone()], &[true, true], seed, &|t, v| {
            t.add(v[0], v[1])
        }),
    )?;
    push(
        "mul",
        check(&[a, b], &[true, true], seed, &|t, v| t.mul(v[0], v[1])),
    )?;
    let (x, bias) = (normal(&mut r, &[3, 4], 1.0), normal(&mut r, &[4], 1.0));
    push(
        "add_bias",
        check(&[x, bias], &[true, true], seed, &|t, v| {
            t.add_bias(v[0], v[1])
        }),
    )?;
    let x = away_from_zero(&mut r, &[3, 5], 1e-3);
    push(
        "relu",
        check(std::slice::from_ref(&x), &[true], seed, &|t, v| {
            t.relu(v[0])
        }),
    )?;
    push(
        "abs",
        check(std::slice::from_ref(&x), &[true], seed, &|t, v| t.abs(v[0])),
    )?;
    let x = normal(&mut r, &[3, 5], 2.0);
    push(
        "gelu",
        check(std::slice::from_ref(&x), &[true], seed, &|t, v| {
            t.gelu(v[0])
        }),
    )?;
    push(
        "square",
        check(std::slice::from_ref(&x), &[true], seed, &|t, v| {
            t.square(v[0])
        }),
    )?;
    for (name, red) in [
        ("sum_reduce_all", Reduce::All),
        ("sum_reduce_rows", Reduce::Rows),
        ("sum_reduce_cols", Reduce::Cols),
    ] {
        push(
            name,
            check(std::slice::from_ref(&x), &[true], seed, &move |t, v| {
                t.sum(v[0], red)
            }),
        )?;
    }
    let x = distinct(&mut r, &[3, 5], 0.05);
    for (name, red) in [
        ("max_reduce_all", Reduce::All),
        ("max_reduce_rows", Reduce::Rows),
        ("max_reduce_cols", Reduce::Cols),
    ] {
        push(
            name,
            check(std::slice::from_ref(&x), &[true], seed, &move |t, v| {
                t.max(v[0], red)
            }),
        )?;
    }
    let num = normal(&mut r, &[3, 4], 1.0);
    let den = normal(&mut r, &[3, 4], 1.0).map(|v| v.abs() + 0.5);
    push(
        "div",
        check(&[num, den], &[true, true], seed, &|t, v| t.div(v[0], v[1])),
    )?;
    let (x, g, bt) = (
        normal(&mut r, &[4, 6], 1.0),
        normal(&mut r, &[6], 1.0),
        normal(&mut r, &[6], 1.0),
    );
    push(
        "layernorm",
        check(&[x, g, bt], &[true, true, true], seed, &|t, v| {
            t.layernorm(v[0], v[1], v[2], 1e-5)
        }),
    )?;
    let x = normal(&mut r, &[3, 5], 1.0);
    push(
        "softmax",
        check(std::slice::from_ref(&x), &[true], seed, &|t, v| {
            t.softmax(v[0])
        }),
    )?;
    let targets: Vec<usize> = (0..3).map(|_| r.random_range(0..5)).collect();
    push(
        "cross_entropy",
        check(std::slice::from_ref(&x), &[true], seed, &move |t, v| {
            t.cross_entropy(v[0], &targets)
        }),
    )?;
    let table = normal(&mut r, &[6, 4], 1.0);
    let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
    push(
        "embedding_lookup",
        check(&[table], &[true], seed, &move |t, v| {
            t.embedding(v[0], &ids)
        }),
    )?;
    let (a, b) = (normal(&mut r, &[3, 4], 1.0), normal(&mut r, &[3, 4], 1.0));
    push(
        "mse",
        check(&[a, b], &[true, true], seed, &|t, v| t.mse(v[0], v[1])),
    )?;
    let x = away_from_zero(&mut r, &[3, 4], 0.3);
    push(
        "l2_norm_rows",
        check(&[x], &[true], seed, &|t, v| t.l2_norm_rows(v[0])),
    )?;
    for (name, causal) in [("attention", false), ("attention_causal", true)] {
        let spec = AttentionSpec {
            batch: 2,
            seq: 3,
            heads: 2,
            causal,
        };
        let qkv: Vec<Tensor<f64>> = (0..3).map(|_| normal(&mut r, &[6, 4], 1.0)).collect();
        push(
            name,
            check(&qkv, &[true, true, true], seed, &move |t, v| {
                t.attention(v[0], v[1], v[2], spec)
            }),
        )?;
    }
    let logits = normal(&mut r, &[3, 4], 2.0);
    let labels = Tensor::new(
        vec![3, 4],
        (0..12).map(|_| r.random_range(0.0..1.0)).collect(),
    )?;
    push(
        "bce_with_logits",
        check(&[logits, labels], &[true, false], seed, &|t, v| {
            t.bce_with_logits(v[0], v[1])
        }),
    )?;
    let l0 = away_from_zero(&mut r, &[4, 6], 1e-2);
    let l1 = away_from_zero(&mut r, &[4, 6], 1e-2);
    push(
        "hoyer",
        check(&[l0, l1], &[true, true], seed, &|t, v| {
            hoyer_tape(t, v).map(|(h, _)| h)
        }),
    )?;
    // Pre-activations kept clear of the displacement so relu(z - d) has no kink in reach.
    let d = -0.5;
    let z0 = away_from_zero(&mut r, &[4, 6], 1e-2).map(|v| v + d);
    let z1 = away_from_zero(&mut r, &[4, 6], 1e-2).map(|v| v + d);
    push(
        "displaced_gelu_hoyer",
        check(&[z0, z1], &[true, true], seed, &move |t, v| {
            let a = displaced_tape(t, v[0], d)?;
            let b = displaced_tape(t, v[1], d)?;
            hoyer_tape(t, &[a, b]).map(|(h, _)| h)
        }),
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_detached_path() {
        // x * stop_grad(x): the tape sees x, the finite difference sees 2x.
        let x = Tensor::from_vec(vec![-1.0, 2.0, -3.0]);
        let good = check(std::slice::from_ref(&x), &[true], 0, &|t, v| t.square(v[0])).unwrap();
        assert!(good < 1e-8, "{good}");
        let wrong = check(std::slice::from_ref(&x), &[true], 0, &|t, v| {
            let c = t.constant(t.value(v[0]).clone());
            t.mul(v[0], c)
        })
        .unwrap();
        assert!(wrong > 0.1, "{wrong}");
    }
}
