//! The Laplace-Cauchy mixture: density, CDF and confidence half-widths for
//! a few parameter sets, then a single-knot fit to samples drawn from one.
//!
//! cargo run --release --example lcm_density

use lcmflow::likelihood::{
    fit_lut, ks_lcm, lcm_cdf, lcm_confidence_halfwidth, lcm_pdf, FitOptions, LcmParams, TrainingSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> lcmflow::Result<()> {
    println!(
        "{:>5} {:>6} {:>5} | {:>9} {:>9} {:>9} | {:>8} {:>8}",
        "beta", "gamma", "w_L", "pdf(0)", "pdf(1)", "cdf(1)", "hw 90%", "hw 99%"
    );
    for (beta, gamma, w_l) in [
        (0.2, 1.0, 0.9),
        (0.6, 0.1, 0.8),
        (0.9, 0.05, 0.5),
        (0.5, 2.0, 0.1),
    ] {
        let p = LcmParams::new(beta, gamma, w_l)?;
        println!(
            "{beta:>5} {gamma:>6} {w_l:>5} | {:>9.4} {:>9.4} {:>9.4} | {:>8.3} {:>8.3}",
            lcm_pdf(0.0, &p)?,
            lcm_pdf(1.0, &p)?,
            lcm_cdf(1.0, &p)?,
            lcm_confidence_halfwidth(&p, 0.9)?,
            lcm_confidence_halfwidth(&p, 0.99)?,
        );
    }

    // Draw from a known mixture and recover it with a one-knot LUT.
    let truth = LcmParams::new(0.6, 0.1, 0.8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rate = truth.laplace_rate();
    let z: Vec<f64> = (0..50_000)
        .map(|_| {
            let u: f64 = rng.random::<f64>() - 0.5;
            if rng.random::<f64>() < truth.w_l {
                -u.signum() * (1.0 - 2.0 * u.abs()).ln() / rate
            } else {
                truth.gamma * (std::f64::consts::PI * u).tan()
            }
        })
        .collect();
    let data = TrainingSet::new(z.clone(), vec![1.0; z.len()])?;
    let fit = fit_lut(&data, &[1.0], &FitOptions::default())?;
    let e = fit.lut.entries()[0];
    println!(
        "\nfit to {} samples: beta {:.3} gamma {:.4} w_L {:.3}, K-S {:.4}",
        z.len(),
        e.beta,
        e.gamma,
        e.w_l,
        ks_lcm(&fit.lut, &data)?
    );
    Ok(())
}
