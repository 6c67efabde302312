//! A bias test built by hand from two-dimensional "embeddings": effect
//! size, its classification, and an exact permutation p-value.

use ndarray::array;
use speatforge::speat::{classify_bias, effect_size, permutation_test, BiasTest, EmbeddingSequence};

fn seq(id: &str, group: &str, v: [f64; 2]) -> EmbeddingSequence {
    // one layer, two frames around the same direction
    let frames = array![[v[0], v[1]], [v[0] * 1.1, v[1] * 0.9]];
    EmbeddingSequence::new(vec![frames], id, group).expect("finite")
}

pub fn main() -> anyhow::Result<()> {
    let x = vec![seq("x0", "X", [1.0, 0.1]), seq("x1", "X", [0.9, 0.3]), seq("x2", "X", [1.0, -0.1])];
    let y = vec![seq("y0", "Y", [0.1, 1.0]), seq("y1", "Y", [0.3, 0.8]), seq("y2", "Y", [-0.2, 1.0])];
    let a = vec![seq("a0", "A", [1.0, 0.0]), seq("a1", "A", [0.8, 0.2])];
    let b = vec![seq("b0", "B", [0.0, 1.0]), seq("b1", "B", [0.2, 0.8])];
    let test = BiasTest::new("toy", x, y, a, b)?;

    let report = effect_size(&test)?;
    let perm = permutation_test(&test, 1000, 7)?;
    println!("d = {:.4} ({})", report.d_aggregate, report.classification);
    println!(
        "p = {:.4} over {} partitions (enumerated: {})",
        perm.p_value, perm.n_permutations, perm.enumerated
    );

    // swapping the target sets flips the sign
    let swapped = effect_size(&test.swap_targets())?.d_aggregate;
    println!("swapped d = {swapped:.4}");

    for d in [1.21, 0.50, -0.32, 0.85, 0.07] {
        println!("{d:>5} -> {}", classify_bias(d)?.label().as_str());
    }
    Ok(())
}
