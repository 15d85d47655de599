//! The joint head: object and history rows attend to each other through a
//! trilinear similarity, then both fused modalities are pooled with the
//! question.

use dialrank::gradcheck::random_tensor;
use dialrank::joint::{fuse_history, fuse_visual, init_joint_params, similarity, JointDims, JointParams};
use dialrank::image_only::init_visual_projection;
use dialrank::params::ParamStore;
use dialrank::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d_v, d) = (16, 8);
    let mut store = ParamStore::new();
    init_visual_projection(&mut store, d_v, d, &mut rng);
    init_joint_params(&mut store, JointDims { d, factors: 2, d_m: 6 }, &mut rng);

    let tape = Tape::new();
    let p = JointParams::from_bound(&store.bind_frozen(&tape))?;
    let objects = tape.constant(random_tensor(&mut rng, &[4, d_v], 1.0));
    let history = tape.constant(random_tensor(&mut rng, &[3, d], 1.0));
    let question = tape.constant(random_tensor(&mut rng, &[1, d], 1.0));
    let answers = tape.constant(random_tensor(&mut rng, &[6, d], 1.0));

    let v = dialrank::image_only::project_visual(objects, &p.vis_proj)?;
    let s = similarity(v, history, p.w_s)?;
    println!("similarity {:?}", s.shape());
    println!("fused objects {:?}, fused history {:?}", fuse_visual(v, history, s)?.shape(), fuse_history(v, history, s)?.shape());
    println!("candidate logits: {:?}", p.forward(objects, history, question, answers)?.value().data());
    Ok(())
}
