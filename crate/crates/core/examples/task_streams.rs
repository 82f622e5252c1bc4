//! Builds the synthetic pool and the task streams over it: label-based
//! partitioning, shared-shuffled tasks and noisy clients.

use affcl::streams::{make_federation, make_synthetic, FederationSpec, StreamKind, SyntheticSpec};

fn main() -> affcl::Result<()> {
    let pool = make_synthetic(&SyntheticSpec::default())?;
    println!("pool: {} images of {:?}, {} classes", pool.len(), pool.shape(), pool.classes().len());

    for (kind, noisy) in [(StreamKind::Ltp, 0), (StreamKind::Shuffle, 0), (StreamKind::Noisy, 2)] {
        let spec = FederationSpec {
            kind,
            num_steps: 6,
            noisy_clients: noisy,
            ..FederationSpec::default()
        };
        let fed = make_federation(&spec, &pool)?;
        println!("\n{kind:?}");
        for k in 0..fed.num_clients() {
            let tasks: Vec<String> = (0..fed.num_steps())
                .map(|t| {
                    let task = fed.task(k, t);
                    let mark = if task.spec.noisy { "*" } else { "" };
                    format!("{:?}{mark}", task.spec.class_list)
                })
                .collect();
            println!("  client {k}: {}", tasks.join(" "));
        }
    }
    Ok(())
}
