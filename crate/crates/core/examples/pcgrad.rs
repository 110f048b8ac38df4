//! Projecting two conflicting gradients with PCGrad.

use tplf::trainer::pcgrad_project;

fn main() -> tplf::Result<()> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for (g1, g2) in [
        (vec![1.0, 0.0], vec![-1.0, 1.0]),
        (vec![2.0, 1.0, -1.0], vec![-1.0, 0.5, 2.0]),
        (vec![1.0, 1.0], vec![1.0, 2.0]),
    ] {
        let (p1, p2) = pcgrad_project(&g1, &g2)?;
        println!("g1 {g1:?} g2 {g2:?}  dot {:+.3}", dot(&g1, &g2));
        println!(
            "  -> {p1:?} {p2:?}  dots {:+.3} {:+.3}",
            dot(&p1, &g2),
            dot(&p2, &g1)
        );
    }
    Ok(())
}
