//! Clean-task accuracy as the number of noisy clients grows, followed by the
//! plot-ready CSV series. Results land under `target/examples-out/noisy`.

use affcl::runner::{emit_plot_data, sweep_noisy, ExperimentConfig};

fn main() -> affcl::Result<()> {
    let mut cfg = ExperimentConfig::from_toml_str(
        "profile = \"desk\"\nseeds = [0]\n[federation]\nkind = \"noisy\"\nnum_steps = 6\n[optim]\nrounds_per_task = 3\n",
    )?;
    cfg.output.dir = "target/examples-out/noisy".into();
    for row in sweep_noisy(&cfg, &[0, 2])? {
        println!("{} M={}  clean accuracy {:.3}", row.method, row.noisy_clients, row.clean_accuracy.mean);
    }
    for path in emit_plot_data(&cfg.output.dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
