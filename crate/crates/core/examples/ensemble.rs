//! Test-time ensembling by summing aligned logit matrices.

use dialrank::fusion::{ensemble, InstanceId, LogitMatrix, Provenance};
use dialrank::metrics::{align, Annotation, MetricReport};
use dialrank::Tensor;

fn main() -> anyhow::Result<()> {
    let ids = vec![InstanceId { example_id: 0, round: 1 }, InstanceId { example_id: 0, round: 2 }];
    let a = LogitMatrix::new(ids.clone(), Tensor::matrix(2, 3, vec![2.0, 1.0, 0.0, 0.0, 0.5, 0.4])?, Provenance::ImageOnly)?;
    let b = LogitMatrix::new(ids.clone(), Tensor::matrix(2, 3, vec![0.0, 1.5, 0.0, 0.0, 1.0, 0.0])?, Provenance::Joint)?;
    let ann: Vec<Annotation> = ids
        .iter()
        .zip([1, 1])
        .map(|(&id, gt)| Annotation { id, gt_index: gt, relevance: None })
        .collect();
    for (name, l) in [("image-only", &a), ("joint", &b), ("sum", &ensemble(&[a.clone(), b.clone()])?)] {
        let r = MetricReport::evaluate(&align(l, &ann)?)?;
        println!("{name:<10} rankings {:?}  R@1 {:.2}", l.rankings(), r.r1);
    }
    Ok(())
}
