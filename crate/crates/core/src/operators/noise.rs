use rand_chacha::ChaCha8Rng;

use super::InvocationContext;
use crate::rng::{keyed_stream, standard_normals};
use crate::tensor::ActivationTensor;

/// Gaussian stream for one (seed, step, layer) invocation.
pub fn noise_stream(ctx: &InvocationContext) -> ChaCha8Rng {
    keyed_stream(
        "bend-noise",
        &[
            &ctx.base_seed.to_le_bytes(),
            &(ctx.step_index as u64).to_le_bytes(),
            ctx.target_path.to_string().as_bytes(),
        ],
    )
}

pub(super) fn add_noise_raw(x: &ActivationTensor, sigma: f64, ctx: &InvocationContext) -> ActivationTensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let sigma = sigma as f32;
    let g = standard_normals(&mut noise_stream(ctx), x.len());
    let mut out = x.clone();
    for (o, n) in out.as_mut_slice().iter_mut().zip(g) {
        *o += sigma * n;
    }
    out
}
