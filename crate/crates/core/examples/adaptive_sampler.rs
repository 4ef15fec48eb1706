//! The weighted-least-squares interval controller on a traffic step and on
//! constant traffic.
//!
//!     cargo run --example adaptive_sampler

use hostguard::sampler::{wls_fit, Sampler, SamplerConfig};

fn main() {
    let fit = wls_fit(&[(0.0, 0.0), (1.0, 1.0), (2.0, 4.0)], 0.5);
    println!("fit of (0,0),(1,1),(2,4) with lambda 0.5: slope {:.6} intercept {:.6}", fit.slope, fit.intercept);

    let cfg = SamplerConfig {
        lambda: 0.8,
        window: 6,
        t_init_ms: 1000,
        t_min_ms: 125,
        t_max_ms: 8000,
        theta_low: 0.1,
        theta_high: 0.5,
        epsilon: 1.0,
    };
    for (name, series) in [
        ("step x10", [100.0; 8].into_iter().chain([1000.0; 8]).collect::<Vec<f64>>()),
        ("constant", vec![100.0; 12]),
    ] {
        let mut s = Sampler::new(cfg.clone()).unwrap();
        println!("\n{name}:");
        for y in series {
            let predicted = s.predict_next();
            let t = s.update_interval(y);
            println!("  observed {y:>6} predicted {predicted:>8.1} -> T={t:>5} ms ({:?})", s.last_change());
        }
    }
}
