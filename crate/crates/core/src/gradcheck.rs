//! Central finite-difference verification of the analytic gradients.
//!
//! `grad_check` compares the tape's backward pass against (f(x+eps) -
//! f(x-eps)) / (2 eps), evaluated coordinate by coordinate with f64
//! accumulation of the quotient. The finite-difference side only ever calls
//! the forward pass, so it stays independent of the gradient code it checks.

use crate::error::{Error, Result};
use crate::losses::{self, Reduction};
use crate::models::{self, HeadKind, NetConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::types::LabelMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds the scalar function under test: given parameter values, returns the
/// tape, the scalar loss node, and the parameter leaves in argument order.
pub type LossBuilder<'a> = dyn Fn(&[Tensor]) -> Result<(Tape, NodeId, Vec<NodeId>)> + 'a;

/// Maximum over all parameter coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check(build: &LossBuilder, params: &[Tensor], eps: f32) -> Result<f32> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Range(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let (mut tape, loss, ids) = build(params)?;
    if ids.len() != params.len() {
        return Err(Error::Config("builder must return one node per parameter".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err = 0.0f32;
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let orig = param.values()[ci];
            work[pi].values_mut()[ci] = orig + eps;
            let (tp, lp, _) = build(&work)?;
            let plus = tp.value_scalar_f64(lp);
            work[pi].values_mut()[ci] = orig - eps;
            let (tm, lm, _) = build(&work)?;
            let minus = tm.value_scalar_f64(lm);
            work[pi].values_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps as f64);
            let a = analytic[pi][ci] as f64;
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            let err = ((a - numeric).abs() / denom) as f32;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f32,
    pub tolerance: f32,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

fn randn(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Pushes values away from zero so finite differences never straddle a
/// relu/leaky-relu kink.
fn away_from_zero(mut t: Tensor, min_abs: f32) -> Tensor {
    for v in t.values_mut() {
        if v.abs() < min_abs {
            *v = min_abs.copysign(if *v == 0.0 { 1.0 } else { *v });
        }
    }
    t
}

fn random_labels(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let classes: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect();
    LabelMap::new(h, w, classes, c).unwrap()
}

/// The complete verification suite: every differentiable operation plus the
/// full generator and discriminator loss pipelines on 8x8 inputs with C=4.
pub fn full_suite(eps: f32, tolerance: f32) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    // conv2d, plain and strided/dilated. Loss: mean(conv^2), kept at unit
    // scale so FD noise from f32 forward rounding stays far below tolerance.
    for (name, stride, pad, dilation) in
        [("conv2d(s1,p1,d1)", 1usize, 1usize, 1usize), ("conv2d(s2,p1,d2)", 2, 1, 2)]
    {
        let input = randn(&[3, 8, 8], 0.7, &mut rng);
        let kernel = randn(&[4, 3, 3, 3], 0.3, &mut rng);
        let bias = randn(&[4], 0.2, &mut rng);
        let params = vec![input, kernel, bias];
        let build = move |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(&p[0]);
            let k = tape.leaf(&p[1]);
            let b = tape.leaf(&p[2]);
            let y = tape.conv2d(x, k, b, stride, pad, dilation)?;
            let sq = tape.mul_elem(y, y)?;
            let total = tape.sum_all(sq);
            let n = tape.values(y).len() as f32;
            let loss = tape.scale(total, 1.0 / n);
            Ok((tape, loss, vec![x, k, b]))
        };
        let err = grad_check(&build, &params, eps)?;
        out.push(CheckOutcome { name: name.into(), max_rel_err: err, tolerance });
    }

    // Elementwise activations. Loss: sum(act(x) * w).
    {
        let acts: Vec<(&str, Box<dyn Fn(&mut Tape, NodeId) -> NodeId>)> = vec![
            ("relu", Box::new(|t: &mut Tape, x| t.relu(x))),
            ("leaky_relu(0.2)", Box::new(|t: &mut Tape, x| t.leaky_relu(x, 0.2))),
            ("sigmoid", Box::new(|t: &mut Tape, x| t.sigmoid(x))),
        ];
        for (name, act) in acts {
            let x = away_from_zero(randn(&[2, 4, 4], 1.0, &mut rng), 0.05);
            let w = randn(&[2, 4, 4], 1.0, &mut rng);
            let params = vec![x, w];
            let act = &act;
            let build = move |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
                let mut tape = Tape::new();
                let x = tape.leaf(&p[0]);
                let w = tape.leaf(&p[1]);
                let y = act(&mut tape, x);
                let prod = tape.mul_elem(y, w)?;
                let loss = tape.sum_all(prod);
                Ok((tape, loss, vec![x, w]))
            };
            let err = grad_check(&build, &params, eps)?;
            out.push(CheckOutcome { name: name.into(), max_rel_err: err, tolerance });
        }
    }

    // softmax_channels. Loss: sum(softmax(x) * w).
    {
        let x = randn(&[4, 4, 4], 1.0, &mut rng);
        let w = randn(&[4, 4, 4], 1.0, &mut rng);
        let params = vec![x, w];
        let build = |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(&p[0]);
            let w = tape.leaf(&p[1]);
            let y = tape.softmax_channels(x)?;
            let prod = tape.mul_elem(y, w)?;
            let loss = tape.sum_all(prod);
            Ok((tape, loss, vec![x, w]))
        };
        let err = grad_check(&build, &params, eps)?;
        out.push(CheckOutcome { name: "softmax_channels".into(), max_rel_err: err, tolerance });
    }

    // upsample_nearest2x and global_avg_pool.
    {
        let x = randn(&[2, 4, 4], 1.0, &mut rng);
        let w = randn(&[2, 8, 8], 1.0, &mut rng);
        let params = vec![x, w];
        let build = |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(&p[0]);
            let w = tape.leaf(&p[1]);
            let y = tape.upsample_nearest2x(x)?;
            let prod = tape.mul_elem(y, w)?;
            let loss = tape.sum_all(prod);
            Ok((tape, loss, vec![x, w]))
        };
        let err = grad_check(&build, &params, eps)?;
        out.push(CheckOutcome { name: "upsample_nearest2x".into(), max_rel_err: err, tolerance });
    }
    {
        let x = randn(&[3, 4, 4], 1.0, &mut rng);
        let params = vec![x];
        let build = |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(&p[0]);
            let y = tape.global_avg_pool(x)?;
            let sq = tape.mul_elem(y, y)?;
            let loss = tape.sum_all(sq);
            Ok((tape, loss, vec![x]))
        };
        let err = grad_check(&build, &params, eps)?;
        out.push(CheckOutcome { name: "global_avg_pool".into(), max_rel_err: err, tolerance });
    }

    // Loss primitives on a sigmoid-squashed confidence map.
    {
        let x = randn(&[1, 4, 4], 1.0, &mut rng);
        let params = vec![x];
        for (name, target_one) in [("bce(target=1)", true), ("bce(target=0)", false)] {
            let build = move |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
                let mut tape = Tape::new();
                let x = tape.leaf(&p[0]);
                let conf = tape.sigmoid(x);
                let loss = tape.bce_const(conf, target_one, true);
                Ok((tape, loss, vec![x]))
            };
            let err = grad_check(&build, &params, eps)?;
            out.push(CheckOutcome { name: name.into(), max_rel_err: err, tolerance });
        }
    }
    {
        let x = randn(&[4, 4, 4], 1.0, &mut rng);
        let labels = random_labels(4, 4, 4, &mut rng);
        let params = vec![x];
        let build = move |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(&p[0]);
            let probs = tape.softmax_channels(x)?;
            let loss = losses::mce_loss(&mut tape, probs, &labels, Reduction::Mean)?;
            Ok((tape, loss, vec![x]))
        };
        let err = grad_check(&build, &params, eps)?;
        out.push(CheckOutcome { name: "softmax+mce".into(), max_rel_err: err, tolerance });
    }

    // Full pipelines at 8x8 with C = 4.
    let cfg = NetConfig { in_channels: 3, num_classes: 4, base_width: 4, depth: 2, leaky_slope: 0.2 };
    let image = {
        let mut r = ChaCha8Rng::seed_from_u64(0xface);
        Tensor::new(vec![3, 8, 8], (0..3 * 64).map(|_| r.gen_range(0.0f32..1.0)).collect())?
    };
    let labels = random_labels(8, 8, 4, &mut rng);

    // Generator + cross entropy.
    {
        let gen = models::build_generator(cfg, 41)?;
        let params: Vec<Tensor> = gen.params().iter().map(|p| p.tensor.clone()).collect();
        let image = image.clone();
        let labels = labels.clone();
        let gen = gen.clone();
        let build = move |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let net = gen.with_param_values(&p.iter().map(|t| t.values().to_vec()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let x = tape.leaf(&image);
            let (logits, ids) = net.forward_on_tape(&mut tape, x)?;
            let probs = tape.softmax_channels(logits)?;
            let loss = losses::mce_loss(&mut tape, probs, &labels, Reduction::Mean)?;
            Ok((tape, loss, ids))
        };
        let err = grad_check(&build, &params, eps)?;
        out.push(CheckOutcome { name: "generator+mce".into(), max_rel_err: err, tolerance });
    }

    // Generator + combined objective through a fixed discriminator.
    {
        let gen = models::build_generator(cfg, 42)?;
        let disc = models::build_discriminator(cfg, 43, HeadKind::Pixelwise)?;
        let params: Vec<Tensor> = gen.params().iter().map(|p| p.tensor.clone()).collect();
        let image = image.clone();
        let labels = labels.clone();
        let build = move |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let net = gen.with_param_values(&p.iter().map(|t| t.values().to_vec()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let x = tape.leaf(&image);
            let (logits, ids) = net.forward_on_tape(&mut tape, x)?;
            let probs = tape.softmax_channels(logits)?;
            let (conf, _) = disc.forward_on_tape(&mut tape, probs)?;
            let loss =
                losses::gen_loss(&mut tape, probs, &labels, Some(conf), 0.01, Reduction::Mean)?;
            Ok((tape, loss, ids))
        };
        let err = grad_check(&build, &params, eps)?;
        out.push(CheckOutcome { name: "generator+mce+adv".into(), max_rel_err: err, tolerance });
    }

    // Discriminator + its objective, for both heads.
    for (name, head) in [
        ("discriminator+disc_loss(pixelwise)", HeadKind::Pixelwise),
        ("discriminator+disc_loss(standard)", HeadKind::Standard),
    ] {
        let disc = models::build_discriminator(cfg, 44, head)?;
        let params: Vec<Tensor> = disc.params().iter().map(|p| p.tensor.clone()).collect();
        // Fixed fake map (softmax of noise) and one-hot style real map.
        let fake = {
            let mut t = Tape::new();
            let raw = randn(&[4, 8, 8], 1.0, &mut rng);
            let leaf = t.leaf(&raw);
            let sm = t.softmax_channels(leaf)?;
            t.tensor(sm)
        };
        let real = {
            let labels = random_labels(8, 8, 4, &mut rng);
            crate::data::one_hot(&labels)?
        };
        let build = move |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let net =
                disc.with_param_values(&p.iter().map(|t| t.values().to_vec()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let ids = net.register_params(&mut tape);
            let fake_leaf = tape.leaf(&fake);
            let real_leaf = tape.leaf(&real);
            let conf_fake = net.forward_with(&mut tape, &ids, fake_leaf)?;
            let conf_real = net.forward_with(&mut tape, &ids, real_leaf)?;
            let loss = losses::disc_loss(&mut tape, conf_fake, conf_real, Reduction::Mean)?;
            Ok((tape, loss, ids))
        };
        let err = grad_check(&build, &params, eps)?;
        out.push(CheckOutcome { name: name.into(), max_rel_err: err, tolerance });
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_matched_almost_exactly() {
        // A power-of-two eps keeps every f32 perturbation and square exact,
        // so central differences recover the quadratic's gradient exactly.
        let params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap()];
        let build = |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let mut tape = Tape::new();
            let w = tape.leaf(&p[0]);
            let sq = tape.mul_elem(w, w)?;
            let loss = tape.sum_all(sq);
            Ok((tape, loss, vec![w]))
        };
        let err = grad_check(&build, &params, 2f32.powi(-10)).unwrap();
        assert!(err < 1e-6, "quadratic check error {err}");
    }

    #[test]
    fn eps_outside_contract_is_rejected() {
        let params = vec![Tensor::scalar(1.0)];
        let build = |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
            let mut tape = Tape::new();
            let w = tape.leaf(&p[0]);
            let loss = tape.sum_all(w);
            Ok((tape, loss, vec![w]))
        };
        assert!(grad_check(&build, &params, 1e-1).is_err());
        assert!(grad_check(&build, &params, 1e-6).is_err());
    }

    #[test]
    fn random_op_compositions_pass_over_many_seeds() {
        // Property-style sweep: 20 seeds of conv -> leaky -> softmax -> nll.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = Tensor::randn(vec![2, 4, 4], 1.0, &mut rng);
            let kernel = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
            let bias = Tensor::randn(vec![3], 0.2, &mut rng);
            let labels = random_labels(4, 4, 3, &mut rng);
            let params = vec![input, kernel, bias];
            let labels2 = labels.clone();
            let build = move |p: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
                let mut tape = Tape::new();
                let x = tape.leaf(&p[0]);
                let k = tape.leaf(&p[1]);
                let b = tape.leaf(&p[2]);
                let c = tape.conv2d(x, k, b, 1, 1, 1)?;
                let a = tape.leaky_relu(c, 0.2);
                let probs = tape.softmax_channels(a)?;
                let loss = losses::mce_loss(&mut tape, probs, &labels2, Reduction::Mean)?;
                Ok((tape, loss, vec![x, k, b]))
            };
            let err = grad_check(&build, &params, 1e-3).unwrap();
            assert!(err < 1e-3, "seed {seed}: gradient error {err}");
        }
    }
}
