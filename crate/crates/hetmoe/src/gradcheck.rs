//! Finite-difference battery over every differentiable op plus an
//! end-to-end two-block MoE model. Used by the `gradcheck` CLI command and
//! the test suite.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::ndgrad::check::{central_diff, max_rel_err};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::synthdata::{Batch, TaskKind, Targets};

pub const TOLERANCE: f64 = 1e-4;
const POINTS: usize = 20;
const H: f64 = 1e-6;

/// One battery entry: name and worst relative error over all points.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

/// Compare tape gradients of `build` (a scalar function of one leaf) with
/// central finite differences at `POINTS` random inputs.
fn check_op(
    name: &str,
    shape: &[usize],
    rng: &mut Rng,
    build: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<CheckResult> {
    let numel: usize = shape.iter().product();
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let data: Vec<f64> = (0..numel).map(|_| rng.normal() * 0.7).collect();
        let t = Tensor::new(shape.to_vec(), data.clone())?;

        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let loss = build(&mut tape, x)?;
        tape.backward(loss)?;
        let grad = tape.grad(x);

        let fd = central_diff(
            |v| {
                let mut tape = Tape::new();
                let x = tape.leaf(&Tensor::new(shape.to_vec(), v.to_vec()).unwrap());
                let loss = build(&mut tape, x).unwrap();
                tape.value(loss).data[0]
            },
            &data,
            H,
        );
        worst = worst.max(max_rel_err(&grad.data, &fd));
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
    })
}

/// End-to-end check: gradient of the cross-entropy loss of a 2-block MoE
/// model with respect to a buried expert weight and the embedding.
fn check_model(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let cfg = ModelConfig {
        d_in: 5,
        d: 8,
        n_blocks: 2,
        moe_every: 1,
        n_experts: 3,
        top_k: 2,
        hidden_budget: 8,
        flops_matched: true,
        expert_hidden: None,
    };
    let mut model = Model::new(cfg, rng.next_u64())?;
    model.register_dataset(0, TaskKind::Classification, 3, None, rng.next_u64())?;
    let n = 4;
    let batch = Batch {
        x: Tensor::matrix(n, 5, (0..n * 5).map(|_| rng.normal()).collect())?,
        targets: Targets::Labels((0..n).map(|i| i % 3).collect()),
        dataset_id: 0,
    };
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();

    let mut results = Vec::new();
    let targets: [(&str, Box<dyn Fn(&Model) -> &Tensor>); 3] = [
        (
            "model/expert.w1",
            Box::new(|m| &m.blocks[1].moe.as_ref().unwrap().experts[0].w1.value),
        ),
        ("model/embed.w", Box::new(|m| &m.embed.w.value)),
        (
            "model/router.w_g",
            Box::new(|m| &m.blocks[0].moe.as_ref().unwrap().routers[&0].w_g.value),
        ),
    ];
    for (name, get) in &targets {
        let base = get(&model).clone();
        let loss_at = |v: &[f64]| {
            let mut m = model.clone();
            let dst = match *name {
                "model/expert.w1" => &mut m.blocks[1].moe.as_mut().unwrap().experts[0].w1.value,
                "model/embed.w" => &mut m.embed.w.value,
                _ => {
                    &mut m.blocks[0]
                        .moe
                        .as_mut()
                        .unwrap()
                        .routers
                        .get_mut(&0)
                        .unwrap()
                        .w_g
                        .value
                }
            };
            *dst = Tensor::new(base.shape.clone(), v.to_vec()).unwrap();
            let mut tape = Tape::new();
            let (out, _) = m.forward(&mut tape, &batch).unwrap();
            let l = tape.cross_entropy(out, &labels).unwrap();
            tape.value(l).data[0]
        };
        let fd = central_diff(loss_at, &base.data, H);

        model.clear_vars();
        let mut tape = Tape::new();
        let (out, _) = model.forward(&mut tape, &batch)?;
        let l = tape.cross_entropy(out, &labels)?;
        tape.backward(l)?;
        let param = match *name {
            "model/expert.w1" => &model.blocks[1].moe.as_ref().unwrap().experts[0].w1,
            "model/embed.w" => &model.embed.w,
            _ => &model.blocks[0].moe.as_ref().unwrap().routers[&0].w_g,
        };
        // an expert that no row selected never enters the graph; its
        // gradient (and the finite difference) is identically zero
        let grad = match param.last_var() {
            Some(v) => tape.grad(v),
            None => Tensor::zeros(&base.shape),
        };
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: max_rel_err(&grad.data, &fd),
        });
    }
    Ok(results)
}

/// Run the whole battery. Every entry's error must stay below [`TOLERANCE`].
pub fn run_battery(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::stream(seed, 31337);
    let w = Tensor::matrix(3, 4, (0..12).map(|i| 0.3 * (i as f64) - 1.7).collect())?;
    let labels = vec![0usize, 2, 1];
    let mut out = Vec::new();

    out.push(check_op("matmul", &[2, 3], &mut rng, |t, x| {
        let wv = t.leaf(&w);
        let y = t.matmul(x, wv)?;
        Ok(t.sum(y))
    })?);
    out.push(check_op("add_bias", &[2, 4], &mut rng, |t, x| {
        let b = t.leaf(&Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]));
        let y = t.add_bias(x, b)?;
        let y = t.tanh(y);
        Ok(t.sum(y))
    })?);
    out.push(check_op("mul", &[6], &mut rng, |t, x| {
        let y = t.mul(x, x)?;
        Ok(t.sum(y))
    })?);
    out.push(check_op("scale+sub", &[5], &mut rng, |t, x| {
        let a = t.scale(x, -1.4);
        let y = t.sub(a, x)?;
        let y = t.tanh(y);
        Ok(t.sum(y))
    })?);
    out.push(check_op("tanh", &[7], &mut rng, |t, x| {
        let y = t.tanh(x);
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    })?);
    out.push(check_op("log", &[6], &mut rng, |t, x| {
        // keep the argument positive: log(softmax)
        let y = t.softmax(x)?;
        let y = t.log(y)?;
        Ok(t.mean(y))
    })?);
    out.push(check_op("softmax", &[2, 5], &mut rng, |t, x| {
        let p = t.softmax(x)?;
        let sq = t.mul(p, p)?;
        Ok(t.sum(sq))
    })?);
    out.push(check_op("cross_entropy", &[3, 4], &mut rng, |t, x| {
        t.cross_entropy(x, &labels)
    })?);
    out.push(check_op("mse", &[3, 4], &mut rng, |t, x| {
        let target = t.leaf(&Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64).collect())?);
        t.mse(x, target)
    })?);
    out.push(check_op("mean_axis0", &[4, 3], &mut rng, |t, x| {
        let m = t.mean_axis0(x)?;
        let s = t.mul(m, m)?;
        Ok(t.sum(s))
    })?);
    out.push(check_op("sum_axis0", &[4, 3], &mut rng, |t, x| {
        let m = t.sum_axis0(x)?;
        let s = t.tanh(m);
        Ok(t.sum(s))
    })?);
    out.push(check_op("l2_norm", &[9], &mut rng, |t, x| Ok(t.l2_norm(x)))?);
    out.push(check_op("gather_rows/scatter_rows", &[4, 3], &mut rng, |t, x| {
        let g = t.gather_rows(x, &[2, 0, 2])?;
        let g = t.tanh(g);
        let s = t.scatter_rows(g, &[1, 3, 1], 5)?;
        Ok(t.sum(s))
    })?);
    out.push(check_op("scale_rows", &[3, 4], &mut rng, |t, x| {
        let w = t.leaf(&Tensor::vector(vec![0.5, -1.0, 2.0]));
        let y = t.scale_rows(x, w)?;
        Ok(t.sum(y))
    })?);
    out.push(check_op("gather+reshape+softmax", &[2, 5], &mut rng, |t, x| {
        // the routing path: softmax over gathered selected logits
        let g = t.gather(x, &[0, 3, 6, 9])?;
        let g = t.reshape(g, &[2, 2])?;
        let p = t.softmax(g)?;
        let sq = t.mul(p, p)?;
        Ok(t.sum(sq))
    })?);
    out.push(check_op("dot_const", &[6], &mut rng, |t, x| {
        t.dot_const(x, &[0.1, -0.4, 1.3, 0.0, 2.0, -0.7])
    })?);
    out.extend(check_model(&mut rng)?);
    Ok(out)
}

/// Battery with a hard failure on any entry above tolerance.
pub fn run_battery_strict(seed: u64) -> Result<Vec<CheckResult>> {
    let results = run_battery(seed)?;
    for r in &results {
        if !(r.max_rel_err < TOLERANCE) {
            return Err(Error::Numeric {
                op: "gradcheck",
                msg: format!("{}: rel err {:.3e} exceeds {TOLERANCE:.0e}", r.name, r.max_rel_err),
            });
        }
    }
    Ok(results)
}
