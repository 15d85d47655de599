//! The image-history joint head: a similarity matrix between objects and
//! history rows, cross-attended fusion of both modalities, one MFB block
//! per modality and an integrated representation scored against candidates.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image_only::{attend, init_mfb_params, mfb, project_visual, score_candidates, MfbDims, MfbParams};
use crate::params::{init_linear, xavier, Bound, Linear, ParamStore};
use crate::tape::{concat_cols, Var};

/// Joint-head sizes. The MFB blocks read `3d`-wide fused rows and a
/// `d`-wide question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointDims {
    pub d: usize,
    pub factors: usize,
    pub d_m: usize,
}

/// The head's private parameters under `joint.*`.
pub fn init_joint_params<R: Rng>(store: &mut ParamStore, dims: JointDims, rng: &mut R) {
    let d = dims.d;
    store.insert("joint.w_s", xavier(rng, 1, 3 * d));
    let mfb_dims = MfbDims {
        factors: dims.factors,
        d_m: dims.d_m,
        d_in: 3 * d,
        d_q: d,
    };
    init_mfb_params(store, "joint.mfb_v", mfb_dims, rng);
    init_mfb_params(store, "joint.mfb_h", mfb_dims, rng);
    init_linear(store, "joint.fc_v", d, 3 * d, rng);
    init_linear(store, "joint.fc_h", d, 3 * d, rng);
    init_linear(store, "joint.fc_q", d, d, rng);
    init_linear(store, "joint.fc_f", d, 2 * d, rng);
}

#[derive(Debug, Clone, Copy)]
pub struct JointParams<'t> {
    pub vis_proj: Linear<'t>,
    /// `[1 × 3d]` similarity weights.
    pub w_s: Var<'t>,
    pub mfb_v: MfbParams<'t>,
    pub mfb_h: MfbParams<'t>,
    pub fc_v: Linear<'t>,
    pub fc_h: Linear<'t>,
    pub fc_q: Linear<'t>,
    pub fc_f: Linear<'t>,
}

impl<'t> JointParams<'t> {
    pub fn from_bound(bound: &Bound<'t>) -> Result<Self> {
        Ok(Self {
            vis_proj: Linear::from_bound(bound, "vis_proj")?,
            w_s: bound.get("joint.w_s")?,
            mfb_v: MfbParams::from_bound(bound, "joint.mfb_v")?,
            mfb_h: MfbParams::from_bound(bound, "joint.mfb_h")?,
            fc_v: Linear::from_bound(bound, "joint.fc_v")?,
            fc_h: Linear::from_bound(bound, "joint.fc_h")?,
            fc_q: Linear::from_bound(bound, "joint.fc_q")?,
            fc_f: Linear::from_bound(bound, "joint.fc_f")?,
        })
    }

    /// Candidate logits `[1 × C]` from already projected objects.
    pub fn score(&self, v: Var<'t>, h: Var<'t>, q: Var<'t>, answers: Var<'t>) -> Result<Var<'t>> {
        let s = similarity(v, h, self.w_s)?;
        let v_f = fuse_visual(v, h, s)?;
        let h_f = fuse_history(v, h, s)?;
        joint_forward(v_f, h_f, q, answers, self)
    }

    /// Candidate logits from raw object features and history rows `[r × d]`.
    pub fn forward(&self, v_rcnn: Var<'t>, h: Var<'t>, q: Var<'t>, answers: Var<'t>) -> Result<Var<'t>> {
        self.score(project_visual(v_rcnn, &self.vis_proj)?, h, q, answers)
    }
}

/// `S_ij = w_sᵀ [V_i; H_j; V_i ⊙ H_j]` as a `[k × r]` matrix.
pub fn similarity<'t>(v: Var<'t>, h: Var<'t>, w_s: Var<'t>) -> Result<Var<'t>> {
    let (k, d) = v.dims2();
    let (r, dh) = h.dims2();
    if d != dh {
        return Err(Error::shape("similarity", &v.shape(), &h.shape()));
    }
    if w_s.shape() != [1, 3 * d] {
        return Err(Error::shape("similarity weights", &w_s.shape(), &[1, 3 * d]));
    }
    let w_v = w_s.slice_cols(0, d)?;
    let w_h = w_s.slice_cols(d, d)?;
    let w_vh = w_s.slice_cols(2 * d, d)?;
    let from_v = v.matmul_t(w_v)?.broadcast_to(k, r)?;
    let from_h = w_h.matmul_t(h)?.broadcast_to(k, r)?;
    let cross = v.mul(w_vh.broadcast_to(k, d)?)?.matmul_t(h)?;
    from_v.add(from_h)?.add(cross)
}

fn check_similarity(v: Var<'_>, h: Var<'_>, s: Var<'_>) -> Result<()> {
    let (k, d) = v.dims2();
    let (r, dh) = h.dims2();
    if d != dh || s.dims2() != (k, r) {
        return Err(Error::shape("cross attention", &s.shape(), &[k, r]));
    }
    Ok(())
}

/// `H^f = [H; V^h; H ⊙ V^h]` with `V^h = softmax(Sᵀ) V`, each history row
/// attending over the objects. Returns `[r × 3d]`.
pub fn fuse_history<'t>(v: Var<'t>, h: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    check_similarity(v, h, s)?;
    let v_h = s.transpose()?.softmax(1)?.matmul(v)?;
    concat_cols(&[h, v_h, h.mul(v_h)?])
}

/// `V^f = [V; H^v; V ⊙ H^v]` with `H^v = softmax(S) H`, each object
/// attending over the history rows. Returns `[k × 3d]`.
pub fn fuse_visual<'t>(v: Var<'t>, h: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    check_similarity(v, h, s)?;
    let h_v = s.softmax(1)?.matmul(h)?;
    concat_cols(&[v, h_v, v.mul(h_v)?])
}

/// Attends over both fused modalities with the question and scores
/// `fc_f([fc_v(v) ⊙ fc_q(q); fc_h(h) ⊙ fc_q(q)])` against the candidates.
pub fn joint_forward<'t>(
    v_f: Var<'t>,
    h_f: Var<'t>,
    q: Var<'t>,
    answers: Var<'t>,
    p: &JointParams<'t>,
) -> Result<Var<'t>> {
    let v_att = attend(mfb(v_f, q, &p.mfb_v)?, v_f, &p.mfb_v)?;
    let h_att = attend(mfb(h_f, q, &p.mfb_h)?, h_f, &p.mfb_h)?;
    let q_proj = p.fc_q.apply(q)?;
    let f_v = p.fc_v.apply(v_att)?.mul(q_proj)?;
    let f_h = p.fc_h.apply(h_att)?.mul(q_proj)?;
    let f = p.fc_f.apply(concat_cols(&[f_v, f_h])?)?;
    score_candidates(f, answers)
}

/// Most QA rows ever dropped in one round.
pub const MAX_DROPPED_ROUNDS: usize = 3;

/// Number of history rows dropped when `n_h` rows (caption included) are
/// available: `max(0, n_h − 2)` up to five rows, three beyond.
pub fn dropped_count(n_h: usize) -> usize {
    if n_h <= 5 {
        n_h.saturating_sub(2)
    } else {
        MAX_DROPPED_ROUNDS
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundDropoutPlan {
    pub round: usize,
    pub n_h: usize,
    pub n_d: usize,
    /// 1-based history row indices, ascending; row 1 is the caption and is
    /// never listed.
    pub dropped: Vec<usize>,
}

impl RoundDropoutPlan {
    /// 0-based indices of the surviving rows, in order.
    pub fn kept_rows(&self) -> Vec<usize> {
        (1..=self.n_h)
            .filter(|i| !self.dropped.contains(i))
            .map(|i| i - 1)
            .collect()
    }
}

/// Samples which QA rows to drop, uniformly without replacement.
pub fn round_dropout<R: Rng>(round: usize, n_h: usize, rng: &mut R) -> RoundDropoutPlan {
    let n_d = dropped_count(n_h);
    let mut dropped: Vec<usize> = if n_d == 0 {
        Vec::new()
    } else {
        sample(rng, n_h - 1, n_d).into_iter().map(|i| i + 2).collect()
    };
    dropped.sort_unstable();
    RoundDropoutPlan {
        round,
        n_h,
        n_d,
        dropped,
    }
}

/// 0-based rows kept when only the `keep_last` most recent QA rows are
/// used alongside the caption.
pub fn truncated_rows(n_rows: usize, keep_last: usize) -> Vec<usize> {
    if n_rows == 0 {
        return Vec::new();
    }
    let qa = n_rows - 1;
    let start = 1 + qa.saturating_sub(keep_last);
    std::iter::once(0).chain(start..n_rows).collect()
}

/// Caption row plus the `keep_last` most recent QA rows.
pub fn truncate_history<'t>(h: Var<'t>, keep_last: usize) -> Result<Var<'t>> {
    let (r, _) = h.dims2();
    if keep_last + 1 >= r {
        return Ok(h);
    }
    h.gather_rows(&truncated_rows(r, keep_last))
}
