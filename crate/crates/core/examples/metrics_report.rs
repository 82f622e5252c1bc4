//! Average accuracy and forgetting from a filled accuracy matrix.

use affcl::metrics::{average_accuracy, evaluate_clean_subset, forgetting_with, AccuracyMatrix, Forgetting};

fn main() -> affcl::Result<()> {
    let mut m = AccuracyMatrix::new(2, 3);
    let rows = [
        [[0.90, 0.0, 0.0], [0.70, 0.85, 0.0], [0.60, 0.75, 0.80]],
        [[0.80, 0.0, 0.0], [0.82, 0.90, 0.0], [0.55, 0.70, 0.95]],
    ];
    for (k, client) in rows.iter().enumerate() {
        for task in 0..3 {
            m.set_count(k, task, 100 + 50 * k)?;
        }
        for (step, row) in client.iter().enumerate() {
            for (task, &a) in row.iter().enumerate().take(step + 1) {
                m.set(k, step, task, a)?;
            }
        }
    }
    println!("average accuracy    {:.4}", average_accuracy(&m)?);
    println!("forgetting (signed)  {:.4}", forgetting_with(&m, Forgetting::Signed)?);
    println!("forgetting (clamped) {:.4}", forgetting_with(&m, Forgetting::Clamped)?);
    println!("accuracy on tasks 1,2 {:.4}", evaluate_clean_subset(&m, &[1, 2])?);
    Ok(())
}
