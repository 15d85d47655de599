//! Question-guided attention over objects with multi-modal factorized
//! bilinear pooling, then candidate scoring by the image-only head.

use dialrank::gradcheck::random_tensor;
use dialrank::image_only::{attention_weights, init_image_only_params, init_visual_projection, mfb, ImageOnlyDims, ImageOnlyParams};
use dialrank::params::ParamStore;
use dialrank::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = ImageOnlyDims { d_v: 16, d: 8, factors: 2, d_m: 6 };
    let mut store = ParamStore::new();
    init_visual_projection(&mut store, dims.d_v, dims.d, &mut rng);
    init_image_only_params(&mut store, dims, &mut rng);

    let tape = Tape::new();
    let p = ImageOnlyParams::from_bound(&store.bind_frozen(&tape))?;
    let objects = tape.constant(random_tensor(&mut rng, &[5, 16], 1.0));
    let question = tape.constant(random_tensor(&mut rng, &[1, 8], 1.0));
    let answers = tape.constant(random_tensor(&mut rng, &[4, 8], 1.0));

    let v = dialrank::image_only::project_visual(objects, &p.vis_proj)?;
    let z = mfb(v, question, &p.mfb)?;
    let alpha = attention_weights(z, &p.mfb)?;
    println!("pooled features {:?}, unit rows", z.shape());
    println!("attention over 5 objects: {:?}", alpha.value().data());
    println!("candidate logits: {:?}", p.forward(objects, question, answers)?.value().data());
    Ok(())
}
