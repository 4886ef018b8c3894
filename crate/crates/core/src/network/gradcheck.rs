//! Finite-difference checks of the blocks and of the whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_at, GradCheck, Graph, Var};
use crate::error::Result;
use crate::losses::{make_target_pyramid, total_loss, ScaleOutputs};
use crate::tensor::{Shape, Tensor};

use super::{init_block_params, init_params, mlwnet_forward_bound, BlockKind, Binder, Mode, NetworkConfig, NetworkParams};

fn random(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("sized to shape")
}

/// Moves every bank a little off its initial value so bank gradients of
/// the reconstruction penalty are not identically zero.
fn jitter_banks(params: &mut NetworkParams<f64>, rng: &mut ChaCha8Rng, amount: f64) {
    let ids: Vec<_> = (0..params.len())
        .map(crate::autodiff::ParamId)
        .filter(|&id| params.is_bank_param(id))
        .collect();
    for id in ids {
        for v in params.tensors_mut()[id.0].data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

/// Checks one block on a `1×4×8×8` input with live residual branches.
/// The scalar under test is `Σ out ⊙ w` for a fixed random `w`.
pub fn block_grad_check(kind: BlockKind, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_block_params::<f64>(kind, 4, 2, 4, seed, true)?;
    jitter_banks(&mut params, &mut rng, 0.05);
    let x = random(Shape::new(1, 4, 8, 8), &mut rng, -1.0, 1.0);
    let w = random(Shape::new(1, 4, 8, 8), &mut rng, -1.0, 1.0);
    let tensors = params.tensors().to_vec();
    grad_check(
        |g: &mut Graph<f64>, vars: &[Var]| {
            let mut p = Binder::with_vars(&params, vars)?;
            let xv = g.constant(x.clone());
            let out = kind.forward(g, xv, &mut p, "blk")?;
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv)?;
            g.sum(prod)
        },
        &tensors,
        1e-6,
        3,
        1e-6,
    )
}

/// Checks `coords` randomly chosen parameter coordinates of a network with
/// live heads and residual branches against the training loss on a
/// `height × width` input.
pub fn network_grad_check(config: &NetworkConfig, height: usize, width: usize, coords: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: NetworkParams<f64> = init_params(config, seed)?;
    for t in params.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) && t.shape().c() > 1 {
            *t = random(t.shape(), &mut rng, -0.2, 0.2);
        }
    }
    jitter_banks(&mut params, &mut rng, 0.05);
    let x = random(Shape::new(1, 3, height, width), &mut rng, 0.0, 1.0);
    let y = random(Shape::new(1, 3, height, width), &mut rng, 0.0, 1.0);
    let targets = make_target_pyramid(&y, config.scales)?;

    let picks: Vec<(usize, usize)> = (0..coords)
        .map(|_| {
            let pi = rng.gen_range(0..params.len());
            (pi, rng.gen_range(0..params.tensors()[pi].len()))
        })
        .collect();
    let tensors = params.tensors().to_vec();
    grad_check_at(
        |g: &mut Graph<f64>, vars: &[Var]| {
            let mut p = Binder::with_vars(&params, vars)?;
            let xv = g.constant(x.clone());
            let out = mlwnet_forward_bound(g, xv, &mut p, config, Mode::Train)?;
            let tv: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
            Ok(total_loss(g, &ScaleOutputs::new(out.images), &tv, &out.banks, 1.0)?.total)
        },
        &tensors,
        &picks,
        1e-6,
        1e-6,
    )
}
