//! Finite-difference gradient checks for the differentiable ops.
//!
//! Each case builds a graph from a list of input tensors, reduces its output
//! to a scalar with a fixed random projection `sum(out * R)`, and compares
//! the reverse-mode gradient of every input against central differences.
//! The error of one trial is `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-12)`
//! with norms taken per input tensor.

use crate::adapters::{
    text_adapter_forward, visual_adapter_forward, AdapterConfig, InitMode, TextAdapter, Variant,
    VisualAdapter,
};
use crate::backbone::{
    class_logits, encode_image, encode_text, Adapted, BackboneConfig, ModelAdapters, ToyBackbone,
};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::objective::lsce_loss;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds the output node; returns it and the input vars in input order.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)> + 'a;

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

pub fn relative_error(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(n.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.l2_norm().max(n.l2_norm()).max(1e-12)
}

fn projected(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(out, rv)?;
    Ok(g.sum(p))
}

/// Max relative error over all inputs of one case.
pub fn check_case(
    build: &Builder<'_>,
    inputs: &[Tensor<f64>],
    rng: &mut Rng,
    h: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let (out, vars) = build(&mut g, inputs)?;
    let r = Tensor::randn(g.shape(out), 1.0, rng);
    let loss = projected(&mut g, out, &r)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let f = |x: &Tensor<f64>| -> f64 {
            let mut xs = inputs.to_vec();
            xs[i] = x.clone();
            let mut g = Graph::new();
            let (out, _) = build(&mut g, &xs).expect("builder succeeded on the unperturbed inputs");
            let loss = projected(&mut g, out, &r).expect("projection shape fixed");
            g.value(loss).data()[0]
        };
        let numeric = finite_diff_grad(&f, &inputs[i], h);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

fn params(g: &mut Graph<f64>, xs: &[Tensor<f64>]) -> Vec<Var> {
    xs.iter().map(|x| g.param(x.clone())).collect()
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Small backbone used by the model-level case.
pub fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        image_size: 8,
        patch_size: 2,
        text_len: 3,
        vocab_size: 10,
        mlp_ratio: 2,
        logit_temperature: 5.0,
    }
}

fn tiny_adapter_config() -> AdapterConfig {
    AdapterConfig {
        embed_dim: 8,
        reduction: 4,
        grid_side: 4,
        ..AdapterConfig::default()
    }
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut Rng) -> (Box<Builder<'static>>, Vec<Tensor<f64>>)>,
);

fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = Vec::new();
    v.push((
        "matmul",
        Box::new(|rng| {
            let b: Box<Builder> = Box::new(|g, xs| {
                let p = params(g, xs);
                Ok((g.matmul(p[0], p[1])?, p))
            });
            (b, vec![randn(&[3, 4], rng), randn(&[4, 5], rng)])
        }),
    ));
    v.push((
        "depthwise_conv",
        Box::new(|rng| {
            let b: Box<Builder> = Box::new(|g, xs| {
                let p = params(g, xs);
                Ok((g.conv2d_depthwise(p[0], p[1])?, p))
            });
            (b, vec![randn(&[2, 3, 4, 5], rng), randn(&[3, 3, 3], rng)])
        }),
    ));
    v.push((
        "pointwise_conv",
        Box::new(|rng| {
            let b: Box<Builder> = Box::new(|g, xs| {
                let p = params(g, xs);
                Ok((g.conv2d_pointwise(p[0], p[1])?, p))
            });
            (b, vec![randn(&[2, 3, 4, 4], rng), randn(&[5, 3], rng)])
        }),
    ));
    v.push((
        "gelu",
        Box::new(|rng| {
            let b: Box<Builder> = Box::new(|g, xs| {
                let p = params(g, xs);
                Ok((g.gelu(p[0]), p))
            });
            (b, vec![Tensor::randn(&[4, 6], 2.0, rng)])
        }),
    ));
    v.push((
        "layer_norm",
        Box::new(|rng| {
            let b: Box<Builder> = Box::new(|g, xs| {
                let p = params(g, xs);
                Ok((g.layer_norm(p[0], p[1], p[2], 1e-5)?, p))
            });
            (
                b,
                vec![randn(&[3, 2, 6], rng), randn(&[6], rng), randn(&[6], rng)],
            )
        }),
    ));
    v.push((
        "softmax",
        Box::new(|rng| {
            let b: Box<Builder> = Box::new(|g, xs| {
                let p = params(g, xs);
                Ok((g.softmax(p[0]), p))
            });
            (b, vec![Tensor::randn(&[3, 5], 2.0, rng)])
        }),
    ));
    v.push((
        "log_softmax",
        Box::new(|rng| {
            let b: Box<Builder> = Box::new(|g, xs| {
                let p = params(g, xs);
                Ok((g.log_softmax(p[0]), p))
            });
            (b, vec![Tensor::randn(&[3, 5], 2.0, rng)])
        }),
    ));
    v.push((
        "visual_adapter",
        Box::new(|rng| {
            let cfg = tiny_adapter_config();
            let a = VisualAdapter::<f64>::new(&cfg, InitMode::Kaiming, rng);
            let x = randn(&[2, 16, 8], rng);
            let b: Box<Builder> = Box::new(move |g, xs| {
                let p = params(g, xs);
                let bound = crate::adapters::BoundVisual {
                    w_down: p[1],
                    k_dw: p[2],
                    w_up: p[3],
                    b_up: p[4],
                };
                Ok((visual_adapter_forward(g, &bound, p[0], &cfg)?, p))
            });
            (
                b,
                vec![x, a.w_down, a.k_dw, a.w_up, Tensor::randn(&[8], 0.1, rng)],
            )
        }),
    ));
    v.push((
        "text_adapter",
        Box::new(|rng| {
            let cfg = tiny_adapter_config();
            let a = TextAdapter::<f64>::new(&cfg, InitMode::Kaiming, rng);
            let x = randn(&[3, 4, 8], rng);
            let b: Box<Builder> = Box::new(|g, xs| {
                let p = params(g, xs);
                let bound = crate::adapters::BoundText {
                    w_down: p[1],
                    b_down: p[2],
                    w_up: p[3],
                    b_up: p[4],
                };
                Ok((text_adapter_forward(g, &bound, p[0])?, p))
            });
            let bd = Tensor::randn(&[2], 0.1, rng);
            let bu = Tensor::randn(&[8], 0.1, rng);
            (b, vec![x, a.w_down, bd, a.w_up, bu])
        }),
    ));
    v.push((
        "lsce_loss",
        Box::new(|rng| {
            let targets: Vec<usize> = (0..4).map(|_| rng.below(6)).collect();
            let b: Box<Builder> = Box::new(move |g, xs| {
                let p = params(g, xs);
                Ok((lsce_loss(g, p[0], &targets, 0.1, None)?, p))
            });
            (b, vec![Tensor::randn(&[4, 6], 2.0, rng)])
        }),
    ));
    v.push((
        "adapted_model_1block",
        Box::new(|rng| {
            let bc = tiny_backbone_config();
            let ac = tiny_adapter_config();
            let bb = ToyBackbone::<f64>::init(&bc, rng).expect("tiny config is valid");
            let ads = ModelAdapters::<f64>::new(&ac, &bc, Variant::Full, rng)
                .expect("tiny config is valid");
            let images = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, rng);
            let prompts: Vec<Vec<usize>> = (0..3)
                .map(|_| (0..3).map(|_| rng.below(10)).collect())
                .collect();
            let targets: Vec<usize> = vec![rng.below(3), rng.below(3)];
            // Nonzero biases so every branch carries gradient signal.
            let inputs: Vec<Tensor<f64>> = ads
                .named_tensors()
                .into_iter()
                .map(|(_, t)| {
                    let mut t = t.clone();
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v += 0.05 * rng.standard_normal());
                    t
                })
                .collect();
            let b: Box<Builder> = Box::new(move |g, xs| {
                let mut m = ads.clone();
                for ((_, t), x) in m.named_tensors_mut().into_iter().zip(xs) {
                    *t = x.clone();
                }
                let bound_bb = bb.bind(g);
                let bound = m.bind(g);
                let ad = Adapted {
                    adapters: &bound,
                    scale: 0.5,
                };
                let imgs = g.constant(images.clone());
                let fi = encode_image(g, &bound_bb, imgs, Some(&ad))?;
                let ft = encode_text(g, &bound_bb, &prompts, Some(&ad))?;
                let lg = class_logits(g, fi, ft, bc.logit_temperature)?;
                let loss = lsce_loss(g, lg, &targets, 0.1, None)?;
                Ok((loss, bound.params.clone()))
            });
            (b, inputs)
        }),
    ));
    v
}

/// Runs every case `trials` times on seeded random inputs.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for (i, (op, make)) in cases().into_iter().enumerate() {
        let mut rng = Rng::with_stream(seed, i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let (build, inputs) = make(&mut rng);
            worst = worst.max(check_case(&*build, &inputs, &mut rng, DEFAULT_STEP)?);
        }
        log::debug!("gradcheck {op}: {worst:.3e}");
        out.push(CaseReport {
            op,
            trials,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let f = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        let d = finite_diff_grad(&f, &x, 1e-5);
        for (a, b) in d.data().iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_of_equal_is_zero() {
        let a = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        assert_eq!(relative_error(&a, &a), 0.0);
        assert_eq!(
            relative_error(&Tensor::zeros(&[2]), &Tensor::zeros(&[2])),
            0.0
        );
    }

    #[test]
    fn single_trial_suite_passes() {
        for r in run_suite(1, 99).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{}: {}", r.op, r.max_rel_err);
        }
    }
}
