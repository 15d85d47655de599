//! The image-only head: MFB attention of the question over projected object
//! features, followed by fusion and dot-product candidate scoring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_linear, uniform, xavier, Bound, Linear, ParamStore};
use crate::tape::Var;

/// Sizes of one MFB block. `d_in` is the width of the attended rows and
/// `d_q` the width of the question vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MfbDims {
    pub factors: usize,
    pub d_m: usize,
    pub d_in: usize,
    pub d_q: usize,
}

/// `<prefix>.m: [m × d_m × d_in]`, `<prefix>.n: [m × d_m × d_q]` and
/// `<prefix>.l: [1 × d_m]`.
pub fn init_mfb_params<R: Rng>(store: &mut ParamStore, prefix: &str, dims: MfbDims, rng: &mut R) {
    let a_m = (6.0 / (dims.d_in + dims.d_m) as f64).sqrt();
    let a_n = (6.0 / (dims.d_q + dims.d_m) as f64).sqrt();
    store.insert(
        format!("{prefix}.m"),
        uniform(rng, &[dims.factors, dims.d_m, dims.d_in], a_m),
    );
    store.insert(
        format!("{prefix}.n"),
        uniform(rng, &[dims.factors, dims.d_m, dims.d_q], a_n),
    );
    store.insert(format!("{prefix}.l"), xavier(rng, 1, dims.d_m));
}

/// An MFB block bound on a tape, with the factor stacks flattened to
/// `[m·d_m × d]` so that row `i·d_m + j` is row `j` of factor `i`.
#[derive(Debug, Clone, Copy)]
pub struct MfbParams<'t> {
    pub m: Var<'t>,
    pub n: Var<'t>,
    pub l: Var<'t>,
    pub factors: usize,
    pub d_m: usize,
}

impl<'t> MfbParams<'t> {
    pub fn from_bound(bound: &Bound<'t>, prefix: &str) -> Result<Self> {
        let m = bound.get(&format!("{prefix}.m"))?;
        let n = bound.get(&format!("{prefix}.n"))?;
        let l = bound.get(&format!("{prefix}.l"))?;
        let (ms, ns) = (m.shape(), n.shape());
        if ms.len() != 3 || ns.len() != 3 || ms[..2] != ns[..2] {
            return Err(Error::shape("mfb factors", &ms, &ns));
        }
        let (factors, d_m) = (ms[0], ms[1]);
        if l.shape() != [1, d_m] {
            return Err(Error::shape("mfb projection", &l.shape(), &[1, d_m]));
        }
        Ok(Self {
            m: m.reshape(&[factors * d_m, ms[2]])?,
            n: n.reshape(&[factors * d_m, ns[2]])?,
            l,
            factors,
            d_m,
        })
    }
}

/// Factor-summed bilinear pooling before normalisation: row `j` is
/// `Σ_i (M_i V_j) ⊙ (N_i q)`, giving `[k × d_m]`.
pub fn mfb_pooled<'t>(v: Var<'t>, q: Var<'t>, p: &MfbParams<'t>) -> Result<Var<'t>> {
    let (k, _) = v.dims2();
    if q.dims2().0 != 1 {
        return Err(Error::shape("mfb question", &q.shape(), &[1, p.n.dims2().1]));
    }
    let vm = v.matmul_t(p.m)?;
    let qn = q.matmul_t(p.n)?.broadcast_to(k, p.factors * p.d_m)?;
    vm.mul(qn)?.block_sum_cols(p.factors)
}

/// Pooled features followed by signed square root and row-wise ℓ2
/// normalisation.
pub fn mfb<'t>(v: Var<'t>, q: Var<'t>, p: &MfbParams<'t>) -> Result<Var<'t>> {
    mfb_pooled(v, q, p)?.power_norm().l2_normalize(1)
}

/// Attention weights `softmax_k(ẑ Lᵀ)` as a `[k × 1]` column.
pub fn attention_weights<'t>(z: Var<'t>, p: &MfbParams<'t>) -> Result<Var<'t>> {
    z.matmul_t(p.l)?.softmax(0)
}

/// Attention-weighted sum of the rows of `v`, returned as `[1 × d]`.
pub fn attend<'t>(z: Var<'t>, v: Var<'t>, p: &MfbParams<'t>) -> Result<Var<'t>> {
    let (kz, _) = z.dims2();
    let (kv, _) = v.dims2();
    if kz != kv {
        return Err(Error::shape("attend", &z.shape(), &v.shape()));
    }
    attention_weights(z, p)?.transpose()?.matmul(v)
}

/// `fc_f(fc_v(v) ⊙ fc_q(q))`.
pub fn fuse<'t>(v: Var<'t>, q: Var<'t>, fc_v: &Linear<'t>, fc_q: &Linear<'t>, fc_f: &Linear<'t>) -> Result<Var<'t>> {
    fc_f.apply(fc_v.apply(v)?.mul(fc_q.apply(q)?)?)
}

/// Dot product of the fused feature `f: [1 × d]` with every candidate row
/// of `answers: [C × d]`, as a `[1 × C]` logit row.
pub fn score_candidates<'t>(f: Var<'t>, answers: Var<'t>) -> Result<Var<'t>> {
    let (c, _) = answers.dims2();
    if c == 0 {
        return Err(Error::Invalid("no candidate answers".into()));
    }
    f.matmul_t(answers)
}

/// Image-only sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageOnlyDims {
    pub d_v: usize,
    pub d: usize,
    pub factors: usize,
    pub d_m: usize,
}

/// Shared visual projection `vis_proj.*`.
pub fn init_visual_projection<R: Rng>(store: &mut ParamStore, d_v: usize, d: usize, rng: &mut R) {
    init_linear(store, "vis_proj", d, d_v, rng);
}

/// The head's private parameters under `img.*`.
pub fn init_image_only_params<R: Rng>(store: &mut ParamStore, dims: ImageOnlyDims, rng: &mut R) {
    let d = dims.d;
    init_mfb_params(
        store,
        "img.mfb",
        MfbDims {
            factors: dims.factors,
            d_m: dims.d_m,
            d_in: d,
            d_q: d,
        },
        rng,
    );
    init_linear(store, "img.fc_v", d, d, rng);
    init_linear(store, "img.fc_q", d, d, rng);
    init_linear(store, "img.fc_f", d, d, rng);
}

/// `V = Linear(V_rcnn)` over every object row.
pub fn project_visual<'t>(v_rcnn: Var<'t>, proj: &Linear<'t>) -> Result<Var<'t>> {
    if v_rcnn.dims2().1 != proj.in_dim() {
        return Err(Error::shape(
            "project_visual",
            &v_rcnn.shape(),
            &[v_rcnn.dims2().0, proj.in_dim()],
        ));
    }
    proj.apply(v_rcnn)
}

#[derive(Debug, Clone, Copy)]
pub struct ImageOnlyParams<'t> {
    pub vis_proj: Linear<'t>,
    pub mfb: MfbParams<'t>,
    pub fc_v: Linear<'t>,
    pub fc_q: Linear<'t>,
    pub fc_f: Linear<'t>,
}

impl<'t> ImageOnlyParams<'t> {
    pub fn from_bound(bound: &Bound<'t>) -> Result<Self> {
        Ok(Self {
            vis_proj: Linear::from_bound(bound, "vis_proj")?,
            mfb: MfbParams::from_bound(bound, "img.mfb")?,
            fc_v: Linear::from_bound(bound, "img.fc_v")?,
            fc_q: Linear::from_bound(bound, "img.fc_q")?,
            fc_f: Linear::from_bound(bound, "img.fc_f")?,
        })
    }

    /// Candidate logits `[1 × C]` from already projected objects `v: [k × d]`.
    pub fn score(&self, v: Var<'t>, q: Var<'t>, answers: Var<'t>) -> Result<Var<'t>> {
        let z = mfb(v, q, &self.mfb)?;
        let att = attend(z, v, &self.mfb)?;
        fuse_and_score(att, q, answers, self)
    }

    /// Candidate logits from raw object features `[k × d_v]`.
    pub fn forward(&self, v_rcnn: Var<'t>, q: Var<'t>, answers: Var<'t>) -> Result<Var<'t>> {
        self.score(project_visual(v_rcnn, &self.vis_proj)?, q, answers)
    }
}

/// Fused feature of the attended image vector and the question, scored
/// against every candidate.
pub fn fuse_and_score<'t>(v: Var<'t>, q: Var<'t>, answers: Var<'t>, p: &ImageOnlyParams<'t>) -> Result<Var<'t>> {
    score_candidates(fuse(v, q, &p.fc_v, &p.fc_q, &p.fc_f)?, answers)
}
