//! Checks reverse-mode gradients of a small attention-style expression
//! against central finite differences.

use coldrec::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, w: &Tensor) -> coldrec::Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let x = g.leaf(&x.clone().with_grad());
    let w = g.constant(w.clone());
    let q = g.matmul(x, w)?;
    let s = g.matmul_bt(q, x)?;
    let a = g.softmax_rows(s, None)?;
    let h = g.matmul(a, x)?;
    let h = g.gelu(h)?;
    let l = g.sum(h)?;
    g.backward(l)?;
    Ok((g.value(l).item(), g.grad(x).expect("leaf has a gradient").to_vec()))
}

fn main() -> coldrec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |r, c| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let x = random(4, 3)?;
    let w = random(3, 3)?;
    let (_, analytic) = loss(&x, &w)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let numeric = (loss(&up, &w)?.0 - loss(&down, &w)?.0) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
        println!("x[{i:>2}]  analytic {:>10.6}  numeric {numeric:>10.6}  rel {rel:.1e}", analytic[i]);
        worst = worst.max(rel);
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
