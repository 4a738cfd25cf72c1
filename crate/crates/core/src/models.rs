//! Teacher/student networks and the auxiliary projection matrix.
//!
//! Both networks share one architecture: a backbone producing a `d_h`-wide
//! representation and a single affine head. Parameters are kept as a flat,
//! canonically ordered tensor list: each backbone layer contributes its weight
//! then (for linear layers) its bias, and the head's weight and bias come last.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gpd::{decode_model, encode_model, wire, CodecConfig};
use crate::linalg::orthonormalize_columns;
use crate::nn::{Conv2dSpec, Graph, NodeId, SgdState, Tensor};
use crate::rng::{stream, tag, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    /// Two 3×3 conv + ReLU + 2×2 average-pool blocks, then a linear layer.
    Cnn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Input shape `(C, H, W)`.
    pub input: [usize; 3],
    /// Hidden widths for the MLP, or the two conv channel counts for the CNN.
    pub hidden: Vec<usize>,
    /// Representation width `d_h`.
    pub rep_dim: usize,
    pub n_classes: usize,
    /// Columns of `W_aux`; defaults to `rep_dim`.
    pub aux_dim: Option<usize>,
}

impl ModelConfig {
    /// Flatten → 512 → 256 MLP.
    pub fn default_mlp(input: [usize; 3], n_classes: usize) -> Self {
        ModelConfig { kind: ModelKind::Mlp, input, hidden: vec![512], rep_dim: 256, n_classes, aux_dim: None }
    }

    pub fn default_cnn(input: [usize; 3], n_classes: usize) -> Self {
        ModelConfig { kind: ModelKind::Cnn, input, hidden: vec![8, 16], rep_dim: 64, n_classes, aux_dim: None }
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_dim.unwrap_or(self.rep_dim)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input.contains(&0) {
            return bad(format!("input shape {:?} has a zero dimension", self.input));
        }
        if self.rep_dim == 0 {
            return bad("representation width must be at least 1".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.hidden.contains(&0) {
            return bad(format!("hidden widths {:?} must all be positive", self.hidden));
        }
        if self.aux_dim() == 0 || self.aux_dim() > self.rep_dim {
            return bad(format!("aux width {} must lie in 1..={}", self.aux_dim(), self.rep_dim));
        }
        if self.kind == ModelKind::Cnn {
            if self.hidden.len() != 2 {
                return bad(format!("cnn needs exactly two channel counts, got {:?}", self.hidden));
            }
            if self.input[1] < 4 || self.input[2] < 4 {
                return bad(format!("cnn input {:?} is smaller than 4×4", self.input));
            }
        }
        Ok(())
    }

    /// Shapes of the backbone tensors, in canonical order.
    pub fn backbone_shapes(&self) -> Vec<Vec<usize>> {
        match self.kind {
            ModelKind::Mlp => {
                let mut widths = vec![self.input_len()];
                widths.extend(&self.hidden);
                widths.push(self.rep_dim);
                widths.windows(2).flat_map(|w| [vec![w[0], w[1]], vec![w[1]]]).collect()
            }
            ModelKind::Cnn => {
                let [c, h, w] = self.input;
                let (c1, c2) = (self.hidden[0], self.hidden[1]);
                let flat = c2 * (h / 2 / 2) * (w / 2 / 2);
                vec![vec![c1, c, 3, 3], vec![c2, c1, 3, 3], vec![flat, self.rep_dim], vec![self.rep_dim]]
            }
        }
    }

    /// Shapes of every parameter tensor (backbone then head).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut s = self.backbone_shapes();
        s.push(vec![self.rep_dim, self.n_classes]);
        s.push(vec![self.n_classes]);
        s
    }

    pub fn n_params(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
pub fn init_params(cfg: &ModelConfig, rng: &mut StreamRng) -> Vec<Tensor> {
    cfg.param_shapes()
        .iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        })
        .collect()
}

/// A column-orthonormal `d_h × d_aux` matrix from a seeded Gaussian.
pub fn init_aux(cfg: &ModelConfig, rng: &mut StreamRng) -> Tensor {
    let mut w = Tensor::from_fn(&[cfg.rep_dim, cfg.aux_dim()], |_| rng.sample(StandardNormal));
    orthonormalize_columns(&mut w);
    w
}

/// Everything a single client keeps locally.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModels {
    pub config: ModelConfig,
    pub teacher: Vec<Tensor>,
    pub student: Vec<Tensor>,
    pub aux: Tensor,
    pub opt_teacher: SgdState,
    pub opt_student: SgdState,
    pub opt_aux: SgdState,
}

pub fn init_models(config: &ModelConfig, client_seed: u64) -> Result<ClientModels> {
    config.validate()?;
    let teacher = init_params(config, &mut stream(&[client_seed, tag::TEACHER_INIT]));
    let student = init_params(config, &mut stream(&[client_seed, tag::STUDENT_INIT]));
    let aux = init_aux(config, &mut stream(&[client_seed, tag::AUX_INIT]));
    Ok(ClientModels {
        config: config.clone(),
        teacher,
        student,
        aux,
        opt_teacher: SgdState::new(1e-3),
        opt_student: SgdState::new(1e-3),
        opt_aux: SgdState::new(1e-3),
    })
}

/// Backbone over a batch shaped `N×C×H×W` or `N×(C·H·W)`; `params` are the
/// backbone nodes in canonical order.
pub fn backbone_forward(g: &mut Graph, cfg: &ModelConfig, params: &[NodeId], x: NodeId) -> Result<NodeId> {
    let n_backbone = cfg.backbone_shapes().len();
    if params.len() < n_backbone {
        return Err(Error::Dimension(format!("backbone needs {n_backbone} tensors, got {}", params.len())));
    }
    let shape = g.value(x).shape().to_vec();
    let n = shape[0];
    let per_sample: usize = shape[1..].iter().product();
    if per_sample != cfg.input_len() {
        return Err(Error::Dimension(format!("batch {shape:?} does not match model input {:?}", cfg.input)));
    }
    match cfg.kind {
        ModelKind::Mlp => {
            let mut h = if shape.len() == 2 { x } else { g.reshape(x, &[n, per_sample])? };
            for layer in params[..n_backbone].chunks(2) {
                let z = g.matmul(h, layer[0])?;
                let z = g.add_bias(z, layer[1])?;
                h = g.relu(z)?;
            }
            Ok(h)
        }
        ModelKind::Cnn => {
            let [c, hh, ww] = cfg.input;
            let mut h = if shape.len() == 4 { x } else { g.reshape(x, &[n, c, hh, ww])? };
            let spec = Conv2dSpec { stride: 1, padding: 1 };
            for &kernel in &params[..2] {
                let z = g.conv2d(h, kernel, spec)?;
                let z = g.relu(z)?;
                h = g.avg_pool2(z)?;
            }
            let flat = g.value(h).len() / n;
            let h = g.reshape(h, &[n, flat])?;
            let z = g.matmul(h, params[2])?;
            let z = g.add_bias(z, params[3])?;
            g.relu(z)
        }
    }
}

/// Affine classifier head; returns logits.
pub fn head_forward(g: &mut Graph, head: &[NodeId], h: NodeId) -> Result<NodeId> {
    let z = g.matmul(h, head[0])?;
    g.add_bias(z, head[1])
}

/// Forward pass without gradient tracking; returns `(H, logits)`.
pub fn forward_values(cfg: &ModelConfig, params: &[Tensor], batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let x = g.constant(batch.clone());
    let nb = cfg.backbone_shapes().len();
    let h = backbone_forward(&mut g, cfg, &ids[..nb], x)?;
    let logits = head_forward(&mut g, &ids[nb..], h)?;
    Ok((g.value(h).clone(), g.value(logits).clone()))
}

/// Scales every column of `W_aux` to unit length. Exactly-zero columns are
/// redrawn from `rng` first. Columns already within a few ulps of unit
/// length are left untouched so that a zero step changes nothing.
pub fn renormalize_aux(aux: &mut Tensor, rng: &mut StreamRng) {
    let (rows, cols) = (aux.rows(), aux.cols());
    let data = aux.data_mut();
    for j in 0..cols {
        let mut norm = (0..rows).map(|i| data[i * cols + j].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            while norm == 0.0 {
                for i in 0..rows {
                    data[i * cols + j] = rng.sample(StandardNormal);
                }
                norm = (0..rows).map(|i| data[i * cols + j].powi(2)).sum::<f64>().sqrt();
            }
        } else if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            continue;
        }
        for i in 0..rows {
            data[i * cols + j] /= norm;
        }
    }
}

/// Writes parameters as an all-raw packet.
pub fn save_checkpoint(params: &[Tensor], path: &Path) -> Result<()> {
    wire::save_packet(&encode_model(params, &CodecConfig::raw())?, path)
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    decode_model(&wire::load_packet(path)?, &cfg.param_shapes())
}
