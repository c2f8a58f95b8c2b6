//! Finite-difference checks: a small composite function, then the full
//! stage-2 loss on a toy model with a clamp surrogate for the quantizer.

use rdpb::channel::ChannelConfig;
use rdpb::model::{init_params_for_input, Arch};
use rdpb::objective::{rdpvb_grad_check, RdpbWeights, Stage};
use rdpb::{grad_check, Tensor};

fn main() -> rdpb::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.6]])?;
    let w = Tensor::from_rows(&[vec![0.5, -0.4], vec![0.2, 0.9], vec![-0.7, 0.3]])?;
    let err = grad_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let h = g.matmul(v, wv)?;
            let s = g.sigmoid(h);
            let l = g.log_softmax(s)?;
            g.mean(l)
        },
        &x,
        1e-5,
    )?;
    println!("matmul -> sigmoid -> log_softmax -> mean: max relative error {err:.2e}");

    let arch = Arch {
        encoder_hidden: vec![],
        inference_hidden: vec![],
        reconstruction_hidden: vec![],
    };
    let params = init_params_for_input(5, &arch, 1, 3)?;
    let x = Tensor::from_rows(&[vec![0.1, 0.9, 0.4], vec![0.7, 0.2, 0.5], vec![0.3, 0.3, 0.8]])?;
    let channel = ChannelConfig {
        dim: 1,
        levels: 4,
        clip: 2.5,
        sigma: 0.1,
    };
    let weights = RdpbWeights {
        beta: 0.5,
        lambda: 1.5,
        mu: 0.8,
        threshold: 0.0,
    };
    let err = rdpvb_grad_check(&params, &x, &[2, 5, 2], &channel, &weights, Stage::Full, 3, 1e-5)?;
    println!("stage-2 loss, {} parameters: max relative error {err:.2e}", params.param_count());
    Ok(())
}
