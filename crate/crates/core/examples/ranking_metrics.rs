//! Ranks candidates for one user and reports P/R/NDCG at several cutoffs.

use std::collections::HashSet;

use coldrec::eval::{ndcg_at_k, precision_at_k, rank, recall_at_k};

fn main() -> coldrec::Result<()> {
    let ids: Vec<String> = ["a", "b", "c", "d", "e", "f"].iter().map(|s| s.to_string()).collect();
    // Ties resolve by ascending id: `b` ranks before `e`.
    let scores = [0.1, 0.9, 0.4, 0.7, 0.9, 0.2];
    let positives: HashSet<String> = ["e", "c", "a"].iter().map(|s| s.to_string()).collect();
    let top = rank("u1", &ids, &scores, 6)?;
    let order: Vec<&str> = top.ids().collect();
    println!("ranking: {order:?}");
    for k in [1, 3, 5] {
        println!(
            "K={k}: precision {:.3}  recall {:.3}  ndcg {:.3}",
            precision_at_k(&order, &positives, k),
            recall_at_k(&order, &positives, k).unwrap(),
            ndcg_at_k(&order, &positives, k).unwrap()
        );
    }
    Ok(())
}
