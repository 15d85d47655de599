//! Retrieval metrics on a handful of ranked candidate lists, including the
//! overlap statistics of two models.

use dialrank::metrics::{complementarity, MetricReport, RankedInstance};

fn main() -> anyhow::Result<()> {
    let a = vec![
        RankedInstance { scores: vec![0.9, 0.1, 0.3, 0.2], gt_index: 0, relevance: Some(vec![1.0, 0.0, 0.5, 0.0]) },
        RankedInstance { scores: vec![0.2, 0.8, 0.1, 0.4], gt_index: 3, relevance: Some(vec![0.0, 0.5, 0.0, 1.0]) },
        RankedInstance { scores: vec![0.5, 0.5, 0.1, 0.0], gt_index: 1, relevance: Some(vec![0.0, 1.0, 0.0, 0.0]) },
    ];
    let mut b = a.clone();
    b[1].scores = vec![0.2, 0.1, 0.1, 0.9];
    b[0].scores = vec![0.1, 0.9, 0.3, 0.2];
    for (name, x) in [("A", &a), ("B", &b)] {
        println!("model {name}\n{}\n{}", MetricReport::evaluate(x)?, MetricReport::evaluate(x)?.to_json());
    }
    println!("{}", complementarity(&a, &b)?);
    Ok(())
}
