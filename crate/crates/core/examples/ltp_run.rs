//! A short end-to-end run of every method on a label-partitioned stream.
//! Results land under `target/examples-out/ltp`.

use affcl::runner::{load_pool, run_on_pool, ExperimentConfig, Method};

fn main() -> affcl::Result<()> {
    let mut cfg = ExperimentConfig::from_toml_str(
        "profile = \"desk\"\nseeds = [0]\n[federation]\nnum_steps = 2\n",
    )?;
    cfg.output.dir = "target/examples-out/ltp".into();
    let pool = load_pool(&cfg)?;
    for method in Method::ALL {
        cfg.method = method;
        let s = run_on_pool(&cfg, &pool)?;
        let f = s.forgetting.map(|f| f.mean).unwrap_or(f64::NAN);
        println!("{method} accuracy {:.3}  forgetting {f:.3}", s.accuracy.mean);
    }
    Ok(())
}
