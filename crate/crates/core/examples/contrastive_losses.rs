//! The rating-ranking and alignment losses on hand-made embeddings, with and
//! without false-negative filtering.

use coldrec::objective::{combined_loss, LossConfig, Minibatch};
use coldrec::tensor::{Graph, Tensor};

fn main() -> coldrec::Result<()> {
    let users = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let items = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.3], vec![0.1, 0.9]])?;
    let image = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.7, 0.7], vec![0.0, 1.0]])?;
    let text = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.8], vec![0.1, 1.0]])?;
    // User 0 appears twice, so its second item is a false negative in row 0.
    let pairs = vec![(0, 0), (0, 1), (1, 2)];
    for filter in [false, true] {
        let mut g = Graph::new();
        let batch = Minibatch {
            pairs: pairs.clone(),
            users: g.constant(users.clone()),
            items: g.constant(items.clone()),
            modalities: vec![g.constant(image.clone()), g.constant(text.clone())],
            positives: None,
        };
        let cfg = LossConfig {
            lambda: 0.5,
            filter_false_negatives: filter,
            ..LossConfig::default()
        };
        let v = combined_loss(&mut g, &batch, &cfg)?.value(&g);
        println!(
            "filter={filter}: total {:.4} = rating {:.4} + {} × alignment {:.4}",
            v.total, v.rating_part, v.lambda, v.alignment_part
        );
    }
    Ok(())
}
