//! Dual knowledge-distillation losses and the local update loop.
//!
//! Each client trains a private teacher and a shared student on the same
//! minibatches. Besides its own cross-entropy, each model is pulled toward
//! the other's (detached) representation through the auxiliary projection
//! and toward the other's (detached) prediction through a KL term. Both
//! distillation terms are divided by the summed task losses, so distillation
//! is strong while the models are already accurate and weak otherwise.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::models::{backbone_forward, head_forward, renormalize_aux, ClientModels, ModelConfig};
use crate::nn::{Graph, NodeId, SgdState, Tensor};
use crate::rng::StreamRng;

pub const DEFAULT_EPS_P: f64 = 1e-7;
pub const DEFAULT_EPS_D: f64 = 1e-8;

/// Which parts of the distillation objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistillVariant {
    #[default]
    Full,
    /// Representation loss computed without the auxiliary matrix.
    IdentityAux,
    /// Representation term dropped from both totals.
    NoRepTerm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability floor inside logarithms.
    pub eps_p: f64,
    /// Floor added to the task-loss sum in the adaptive denominators.
    pub eps_d: f64,
    pub train_aux: bool,
    /// Use `KL(p_s‖p_t)` for the student and `KL(p_t‖p_s)` for the teacher.
    pub swap_kl: bool,
    pub variant: DistillVariant,
}

impl Default for LocalUpdateConfig {
    fn default() -> Self {
        LocalUpdateConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            eps_p: DEFAULT_EPS_P,
            eps_d: DEFAULT_EPS_D,
            train_aux: true,
            swap_kl: false,
            variant: DistillVariant::Full,
        }
    }
}

impl LocalUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        for (name, v) in [("eps_p", self.eps_p), ("eps_d", self.eps_d)] {
            if !(v > 0.0 && v <= 1e-3) {
                return Err(Error::Config(format!("{name} = {v} outside (0, 1e-3]")));
            }
        }
        Ok(())
    }
}

/// Loss components for one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub task_t: f64,
    pub task_s: f64,
    pub rep: f64,
    pub dec_r: f64,
    pub dec_d_t: f64,
    pub dec_d_s: f64,
    pub total_t: f64,
    pub total_s: f64,
}

impl LossBundle {
    pub fn mean(history: &[LossBundle]) -> LossBundle {
        let n = history.len().max(1) as f64;
        let sum = |f: fn(&LossBundle) -> f64| history.iter().map(f).sum::<f64>() / n;
        LossBundle {
            task_t: sum(|b| b.task_t),
            task_s: sum(|b| b.task_s),
            rep: sum(|b| b.rep),
            dec_r: sum(|b| b.dec_r),
            dec_d_t: sum(|b| b.dec_d_t),
            dec_d_s: sum(|b| b.dec_d_s),
            total_t: sum(|b| b.total_t),
            total_s: sum(|b| b.total_s),
        }
    }
}

/// Mean cross-entropy with probabilities floored at `eps_p`.
pub fn task_loss_node(g: &mut Graph, logits: NodeId, labels: &[usize], eps_p: f64) -> Result<NodeId> {
    let p = g.softmax(logits)?;
    let p = g.clamp_min(p, eps_p)?;
    let picked = g.gather(p, labels)?;
    let logp = g.log(picked)?;
    let m = g.mean(logp)?;
    g.scale(m, -1.0)
}

/// Mean of `((H_s − H_t) · W)²` over all entries.
pub fn rep_loss_node(g: &mut Graph, hs: NodeId, ht: NodeId, w: NodeId) -> Result<NodeId> {
    let d = g.sub(hs, ht)?;
    let proj = g.matmul(d, w)?;
    let sq = g.square(proj)?;
    g.mean(sq)
}

/// `KL(target ‖ model)` summed over classes, averaged over rows.
pub fn kl_node(g: &mut Graph, target: NodeId, model: NodeId, eps_p: f64) -> Result<NodeId> {
    let n = g.value(target).shape()[0] as f64;
    let t = g.clamp_min(target, eps_p)?;
    let m = g.clamp_min(model, eps_p)?;
    let lt = g.log(t)?;
    let lm = g.log(m)?;
    let diff = g.sub(lt, lm)?;
    let prod = g.mul(target, diff)?;
    let s = g.sum(prod)?;
    g.scale(s, 1.0 / n)
}

fn scalar_loss(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.scalar(out))
}

pub fn task_loss(logits: &Tensor, labels: &[usize], eps_p: f64) -> Result<f64> {
    scalar_loss(|g| {
        let l = g.constant(logits.clone());
        task_loss_node(g, l, labels, eps_p)
    })
}

pub fn rep_distill_loss(hs: &Tensor, ht: &Tensor, w: &Tensor) -> Result<f64> {
    scalar_loss(|g| {
        let (a, b, c) = (g.constant(hs.clone()), g.constant(ht.clone()), g.constant(w.clone()));
        rep_loss_node(g, a, b, c)
    })
}

pub fn ddl_rep(rep: f64, task_t: f64, task_s: f64, eps_d: f64) -> f64 {
    rep / (task_t + task_s + eps_d)
}

/// Returns `(loss_t, loss_s)`: the teacher's and student's decision terms.
pub fn ddl_dec(p_t: &Tensor, p_s: &Tensor, task_t: f64, task_s: f64, eps_p: f64, eps_d: f64) -> Result<(f64, f64)> {
    for (name, p) in [("teacher", p_t), ("student", p_s)] {
        if p.ndim() != 2 {
            return Err(Error::Dimension(format!("{name} probabilities must be N×C, got {:?}", p.shape())));
        }
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("{name} probability row {i} sums to {s}")));
            }
        }
    }
    if p_t.shape() != p_s.shape() {
        return Err(Error::Dimension(format!("probability shapes {:?} and {:?}", p_t.shape(), p_s.shape())));
    }
    let den = task_t + task_s + eps_d;
    let kl = |a: &Tensor, b: &Tensor| {
        scalar_loss(|g| {
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            kl_node(g, x, y, eps_p)
        })
    };
    Ok((kl(p_s, p_t)? / den, kl(p_t, p_s)? / den))
}

/// `(L_t, L_s)` from their parts.
pub fn total_losses(dec_d_t: f64, dec_d_s: f64, dec_r: f64, task_t: f64, task_s: f64) -> (f64, f64) {
    (dec_d_t + dec_r + task_t, dec_d_s + dec_r + task_s)
}

/// Node ids of one minibatch's full objective.
pub struct LossGraph {
    pub graph: Graph,
    pub teacher: Vec<NodeId>,
    pub student: Vec<NodeId>,
    /// Present when `W_aux` is trainable in this configuration.
    pub aux: Option<NodeId>,
    pub task_t: NodeId,
    pub task_s: NodeId,
    pub rep: NodeId,
    pub dec_r: Option<NodeId>,
    pub dec_d_t: NodeId,
    pub dec_d_s: NodeId,
    pub total_t: NodeId,
    pub total_s: NodeId,
}

impl LossGraph {
    pub fn bundle(&self) -> LossBundle {
        let v = |id: NodeId| self.graph.scalar(id);
        LossBundle {
            task_t: v(self.task_t),
            task_s: v(self.task_s),
            rep: v(self.rep),
            dec_r: self.dec_r.map_or(0.0, v),
            dec_d_t: v(self.dec_d_t),
            dec_d_s: v(self.dec_d_s),
            total_t: v(self.total_t),
            total_s: v(self.total_s),
        }
    }
}

/// Builds both models' objectives on one batch. Every cross-model quantity
/// enters the other model's loss as a detached constant.
pub fn build_losses(models: &ClientModels, x: &Tensor, labels: &[usize], cfg: &LocalUpdateConfig) -> Result<LossGraph> {
    let mcfg: &ModelConfig = &models.config;
    let nb = mcfg.backbone_shapes().len();
    let mut g = Graph::new();
    let teacher: Vec<NodeId> = models.teacher.iter().map(|p| g.param(p.clone())).collect();
    let student: Vec<NodeId> = models.student.iter().map(|p| g.param(p.clone())).collect();
    let (w, aux) = match cfg.variant {
        DistillVariant::IdentityAux => (g.constant(Tensor::eye(mcfg.rep_dim)), None),
        _ if cfg.train_aux => {
            let id = g.param(models.aux.clone());
            (id, Some(id))
        }
        _ => (g.constant(models.aux.clone()), None),
    };
    let xin = g.constant(x.clone());

    let ht = backbone_forward(&mut g, mcfg, &teacher[..nb], xin)?;
    let hs = backbone_forward(&mut g, mcfg, &student[..nb], xin)?;
    let lt = head_forward(&mut g, &teacher[nb..], ht)?;
    let ls = head_forward(&mut g, &student[nb..], hs)?;
    let pt = g.softmax(lt)?;
    let ps = g.softmax(ls)?;
    let task_t = task_loss_node(&mut g, lt, labels, cfg.eps_p)?;
    let task_s = task_loss_node(&mut g, ls, labels, cfg.eps_p)?;

    let (ht_d, hs_d) = (g.detach(ht), g.detach(hs));
    let (pt_d, ps_d) = (g.detach(pt), g.detach(ps));
    let (task_t_d, task_s_d) = (g.detach(task_t), g.detach(task_s));

    // teacher side
    let den_t = g.add(task_t, task_s_d)?;
    let den_t = g.add_const(den_t, cfg.eps_d)?;
    let rep_t = rep_loss_node(&mut g, hs_d, ht, w)?;
    let kl_t = if cfg.swap_kl { kl_node(&mut g, pt, ps_d, cfg.eps_p)? } else { kl_node(&mut g, ps_d, pt, cfg.eps_p)? };
    let dec_d_t = g.div_scalar(kl_t, den_t)?;

    // student side
    let den_s = g.add(task_t_d, task_s)?;
    let den_s = g.add_const(den_s, cfg.eps_d)?;
    let rep_s = rep_loss_node(&mut g, hs, ht_d, w)?;
    let kl_s = if cfg.swap_kl { kl_node(&mut g, ps, pt_d, cfg.eps_p)? } else { kl_node(&mut g, pt_d, ps, cfg.eps_p)? };
    let dec_d_s = g.div_scalar(kl_s, den_s)?;

    let (total_t, total_s, dec_r) = if cfg.variant == DistillVariant::NoRepTerm {
        let tt = g.add(dec_d_t, task_t)?;
        let ts = g.add(dec_d_s, task_s)?;
        (tt, ts, None)
    } else {
        let dec_r_t = g.div_scalar(rep_t, den_t)?;
        let dec_r_s = g.div_scalar(rep_s, den_s)?;
        let tt = g.add(dec_d_t, dec_r_t)?;
        let tt = g.add(tt, task_t)?;
        let ts = g.add(dec_d_s, dec_r_s)?;
        let ts = g.add(ts, task_s)?;
        (tt, ts, Some(dec_r_s))
    };

    Ok(LossGraph {
        graph: g,
        teacher,
        student,
        aux,
        task_t,
        task_s,
        rep: rep_s,
        dec_r,
        dec_d_t,
        dec_d_s,
        total_t,
        total_s,
    })
}

/// Copies rows `idx` of an `N×D` matrix.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.len() / x.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("rows of a valid tensor")
}

fn batches(n: usize, cfg: &LocalUpdateConfig, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

fn check_shard(x: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Contract("local update on an empty shard".into()));
    }
    if x.shape()[0] != labels.len() {
        return Err(Error::Dimension(format!("{} samples but {} labels", x.shape()[0], labels.len())));
    }
    Ok(())
}

fn take_grads(grads: &mut crate::nn::Gradients, ids: &[NodeId], params: &[Tensor]) -> Vec<Tensor> {
    ids.iter()
        .zip(params)
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Dual-distillation training of teacher, student and `W_aux` on one shard.
/// Returns the loss bundle of every minibatch.
pub fn local_update(
    models: &mut ClientModels,
    x: &Tensor,
    labels: &[usize],
    cfg: &LocalUpdateConfig,
    rng: &mut StreamRng,
) -> Result<Vec<LossBundle>> {
    check_shard(x, labels)?;
    cfg.validate()?;
    for opt in [&mut models.opt_teacher, &mut models.opt_student, &mut models.opt_aux] {
        opt.learning_rate = cfg.learning_rate;
    }
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        for idx in batches(labels.len(), cfg, rng) {
            let xb = gather_rows(x, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let lg = build_losses(models, &xb, &yb, cfg)?;
            history.push(lg.bundle());
            let mut g = lg.graph;
            let both = g.add(lg.total_t, lg.total_s)?;
            let mut grads = g.backward(both)?;
            let gt = take_grads(&mut grads, &lg.teacher, &models.teacher);
            let gs = take_grads(&mut grads, &lg.student, &models.student);
            models.opt_teacher.step(&mut models.teacher, &gt)?;
            models.opt_student.step(&mut models.student, &gs)?;
            if let Some(aux) = lg.aux {
                let ga = grads.take(aux).unwrap_or_else(|| Tensor::zeros(models.aux.shape()));
                models.opt_aux.step(std::slice::from_mut(&mut models.aux), &[ga])?;
                renormalize_aux(&mut models.aux, rng);
            }
        }
    }
    Ok(history)
}

/// Plain cross-entropy training of a single model (baselines). Loss values
/// are reported in the student slots.
pub fn local_update_single(
    params: &mut [Tensor],
    opt: &mut SgdState,
    mcfg: &ModelConfig,
    x: &Tensor,
    labels: &[usize],
    cfg: &LocalUpdateConfig,
    rng: &mut StreamRng,
) -> Result<Vec<LossBundle>> {
    check_shard(x, labels)?;
    cfg.validate()?;
    opt.learning_rate = cfg.learning_rate;
    let nb = mcfg.backbone_shapes().len();
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        for idx in batches(labels.len(), cfg, rng) {
            let xb = gather_rows(x, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
            let xin = g.constant(xb);
            let h = backbone_forward(&mut g, mcfg, &ids[..nb], xin)?;
            let logits = head_forward(&mut g, &ids[nb..], h)?;
            let loss = task_loss_node(&mut g, logits, &yb, cfg.eps_p)?;
            let task = g.scalar(loss);
            history.push(LossBundle { task_s: task, total_s: task, ..LossBundle::default() });
            let mut grads = g.backward(loss)?;
            let gp = take_grads(&mut grads, &ids, params);
            opt.step(params, &gp)?;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
