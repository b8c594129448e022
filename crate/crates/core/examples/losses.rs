//! Evaluates the triplet, MSE and combined losses and their gradients on a
//! few hand-sized embeddings.
//!
//! cargo run --example losses

use maskverify::losses::{
    combined_loss, combined_loss_grad, cross_entropy, mse, triplet_loss, LossConfig, QuadEmbeddings,
};
use maskverify::numkit::Vec64;

fn v(x: &[f64]) -> Vec64 {
    Vec64::new(x.to_vec()).expect("finite")
}

fn main() -> maskverify::Result<()> {
    let cfg = LossConfig::default();
    let zero = v(&[0.0, 0.0]);
    println!(
        "a == p == n            triplet = {}",
        triplet_loss(&zero, &zero, &zero, &cfg)?
    );
    println!(
        "positive 2 away        triplet = {}",
        triplet_loss(&zero, &v(&[2.0, 0.0]), &zero, &cfg)?
    );
    println!(
        "negative well outside  triplet = {}",
        triplet_loss(&zero, &zero, &v(&[3.0, 0.0]), &cfg)?
    );

    let quad = QuadEmbeddings::new(zero.clone(), v(&[2.0, 2.0]), v(&[2.0, 0.0]), zero.clone())?;
    println!("MSE(am, a)             = {}", mse(&quad.am, &quad.a)?);
    println!("combined (lambda = 1)  = {}", combined_loss(&quad, &cfg)?);
    let g = combined_loss_grad(&quad, &cfg)?;
    println!("d/da  = {:?}", g.d_a.as_slice());
    println!("d/dam = {:?}", g.d_am.as_slice());
    println!("d/dp  = {:?}", g.d_p.as_slice());
    println!("d/dn  = {:?}", g.d_n.as_slice());

    let (ce, d_logits) = cross_entropy(&v(&[2.0, 0.5, -1.0]), 0)?;
    println!(
        "cross-entropy = {ce:.6}, d/dlogits = {:?}",
        d_logits.as_slice()
    );
    Ok(())
}
