//! Server-side aggregation: count-weighted averaging, the proximal penalty,
//! and per-round client selection with derived seeds.

use affcl::federation::{aggregate, fedprox_penalty, RoundPlan};
use affcl::params::ParameterVector;

fn main() -> affcl::Result<()> {
    let clients = vec![
        ParameterVector(vec![1.0, 0.0, 2.0]),
        ParameterVector(vec![3.0, 4.0, 2.0]),
        ParameterVector(vec![0.0, 8.0, 2.0]),
    ];
    let counts = [100, 300, 100];
    let global = aggregate(&clients, &counts)?;
    println!("aggregate {:?}", global.as_slice());

    for (k, c) in clients.iter().enumerate() {
        println!("client {k} prox penalty (mu=0.01) {:.4}", fedprox_penalty(c, &global, 0.01)?);
    }

    for round in 0..3 {
        let plan = RoundPlan::new(42, 0, round, 8, 0.5);
        println!("round {round}: clients {:?}", plan.selected_clients);
    }
    Ok(())
}
