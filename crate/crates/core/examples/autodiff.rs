//! Builds a small transformer block on the autodiff tape, takes a few Adam
//! steps and verifies the gradients against central differences.

use kmtalk::nn::gradcheck::{grad_check, GradCheckOptions};
use kmtalk::nn::layers::{EncoderBlock, Linear};
use kmtalk::nn::{Adam, AdamConfig, Graph, Mat, ParamStore};

fn main() -> kmtalk::Result<()> {
    let mut store = ParamStore::new(3);
    let input = Linear::new(&mut store, "in", 4, 8);
    let block = EncoderBlock::new(&mut store, "block", 8, 2, 16)?;
    let output = Linear::new(&mut store, "out", 8, 1);
    let x = Mat::from_vec(6, 4, (0..24).map(|i| ((i * 7 % 5) as f64 - 2.0) / 2.0).collect())?;
    let target = Mat::from_vec(6, 1, (0..6).map(|t| (t as f64 * 0.9).sin()).collect())?;

    let loss = |g: &mut Graph<'_>| {
        let xv = g.constant(x.clone());
        let h = input.forward(g, xv)?;
        let h = block.forward(g, h)?;
        let y = output.forward(g, h)?;
        let t = g.constant(target.clone());
        g.mse(y, t)
    };

    let report = grad_check(&store, loss, GradCheckOptions::default())?;
    println!("checked {} coordinates, max relative error {:.2e}", report.checked, report.max_rel_error);

    let mut adam = Adam::new(&store, AdamConfig {
        lr: 1e-2,
        ..Default::default()
    });
    for step in 0..=50 {
        let mut g = Graph::new(&store);
        let l = loss(&mut g)?;
        let value = g.value(l).item();
        let grads = g.backward(l);
        drop(g);
        adam.step(&mut store, &grads)?;
        if step % 10 == 0 {
            println!("step {step:>2} loss {value:.5}");
        }
    }
    Ok(())
}
