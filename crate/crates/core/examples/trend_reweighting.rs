//! Positive and negative loss weights from score trends across epochs.
//!
//! Three positives of one object: one keeps improving, one plateaus and one
//! is fading. A fourth location is background whose score keeps rising.

use robust_tod::tls::{gt_positive_weights, negative_weight, PositiveScale};

fn main() {
    let rising = [0.05, 0.12, 0.25, 0.40, 0.55];
    let flat = [0.20, 0.22, 0.22, 0.22, 0.22];
    let fading = [0.30, 0.28, 0.20, 0.15, 0.10];
    let background = [0.01, 0.02, 0.05, 0.09, 0.12];
    let alpha = 0.5;

    println!("epoch  rising  flat    fading  | scaled by max         | background w_neg");
    for epoch in 0..rising.len() {
        let cur = [rising[epoch], flat[epoch], fading[epoch]];
        let prev: Vec<Option<f64>> = if epoch == 0 {
            vec![None; 3]
        } else {
            vec![Some(rising[epoch - 1]), Some(flat[epoch - 1]), Some(fading[epoch - 1])]
        };
        let raw = gt_positive_weights(&prev, &cur, alpha);
        let mut scaled = raw.clone();
        PositiveScale::Max.apply(&mut scaled);
        let neg = if epoch == 0 {
            1.0
        } else {
            negative_weight(background[epoch - 1], background[epoch])
        };
        println!(
            "{epoch:>5}  {:.3}   {:.3}   {:.3}   | {:.3}  {:.3}  {:.3}   | {neg:.3}",
            raw[0], raw[1], raw[2], scaled[0], scaled[1], scaled[2]
        );
    }
}
