use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::seeding::rng_from_seed;
use crate::synthdata::RoiSample;
use crate::uncertainty::AuEncoding;

pub const POINT_DIM: usize = 3;
pub const ENC1: usize = 64;
pub const ENC2: usize = 128;
pub const TRUNK: usize = 128;
pub const NUM_RESIDUALS: usize = 7;

/// Init std of the three output heads.
const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Enc1W,
    Enc1B,
    Enc2W,
    Enc2B,
    TrunkW,
    TrunkB,
    RegW,
    RegB,
    VarW,
    VarB,
    ClsW,
    ClsB,
}

impl ParamId {
    pub const ALL: [ParamId; 12] = [
        ParamId::Enc1W,
        ParamId::Enc1B,
        ParamId::Enc2W,
        ParamId::Enc2B,
        ParamId::TrunkW,
        ParamId::TrunkB,
        ParamId::RegW,
        ParamId::RegB,
        ParamId::VarW,
        ParamId::VarB,
        ParamId::ClsW,
        ParamId::ClsB,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamId::Enc1W => "encoder.0.weight",
            ParamId::Enc1B => "encoder.0.bias",
            ParamId::Enc2W => "encoder.1.weight",
            ParamId::Enc2B => "encoder.1.bias",
            ParamId::TrunkW => "trunk.weight",
            ParamId::TrunkB => "trunk.bias",
            ParamId::RegW => "head.reg.weight",
            ParamId::RegB => "head.reg.bias",
            ParamId::VarW => "head.log_var.weight",
            ParamId::VarB => "head.log_var.bias",
            ParamId::ClsW => "head.cls.weight",
            ParamId::ClsB => "head.cls.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// `[rows, cols]` for weights, `[len]` for biases.
    pub fn shape(&self, encoding: AuEncoding) -> Vec<usize> {
        let v = encoding.num_variances();
        match self {
            ParamId::Enc1W => vec![ENC1, POINT_DIM],
            ParamId::Enc1B => vec![ENC1],
            ParamId::Enc2W => vec![ENC2, ENC1],
            ParamId::Enc2B => vec![ENC2],
            ParamId::TrunkW => vec![TRUNK, ENC2],
            ParamId::TrunkB => vec![TRUNK],
            ParamId::RegW => vec![NUM_RESIDUALS, TRUNK],
            ParamId::RegB => vec![NUM_RESIDUALS],
            ParamId::VarW => vec![v, TRUNK],
            ParamId::VarB => vec![v],
            ParamId::ClsW => vec![1, TRUNK],
            ParamId::ClsB => vec![1],
        }
    }

    fn index(&self) -> usize {
        Self::ALL.iter().position(|p| p == self).expect("listed")
    }
}

/// All network parameters in one flat buffer, addressed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefineNetParams {
    encoding: AuEncoding,
    offsets: [usize; 13],
    data: Vec<f64>,
}

impl RefineNetParams {
    pub fn zeros(encoding: AuEncoding) -> Self {
        let mut offsets = [0usize; 13];
        for (i, id) in ParamId::ALL.iter().enumerate() {
            offsets[i + 1] = offsets[i] + id.shape(encoding).iter().product::<usize>();
        }
        Self {
            encoding,
            offsets,
            data: vec![0.0; offsets[12]],
        }
    }

    /// He-normal hidden layers, small-normal heads, zero biases.
    pub fn init(encoding: AuEncoding, seed: u64) -> Self {
        let mut params = Self::zeros(encoding);
        let mut rng = rng_from_seed(seed);
        for id in [ParamId::Enc1W, ParamId::Enc2W, ParamId::TrunkW, ParamId::RegW, ParamId::VarW, ParamId::ClsW] {
            let fan_in = id.shape(encoding)[1] as f64;
            let std = match id {
                ParamId::RegW | ParamId::VarW | ParamId::ClsW => HEAD_INIT_STD,
                _ => (2.0 / fan_in).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in params.get_mut(id) {
                *v = normal.sample(&mut rng);
            }
        }
        params
    }

    pub fn encoding(&self) -> AuEncoding {
        self.encoding
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let i = id.index();
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let i = id.index();
        &mut self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn range(&self, id: ParamId) -> std::ops::Range<usize> {
        let i = id.index();
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.encoding == other.encoding && self.data.len() == other.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Encoded deltas against the anchor.
    pub residuals: [f64; NUM_RESIDUALS],
    /// Pre-activation of the variances (8 corner or 7 box values).
    pub log_vars: Vec<f64>,
    pub objectness_logit: f64,
}

/// Intermediate values kept for the backward pass.
pub(crate) struct Activations {
    /// First encoder layer output per point, `n × ENC1`.
    h1: Vec<f64>,
    pooled: [f64; ENC2],
    /// Point that produced each pooled channel, `None` when the channel is 0.
    argmax: [Option<usize>; ENC2],
    trunk: [f64; TRUNK],
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn check_points(points: &[Vec3]) -> Result<()> {
    match points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        Some(i) => Err(Error::InvalidInput(format!("non-finite coordinate in point {i}: {:?}", points[i]))),
        None => Ok(()),
    }
}

pub(crate) fn forward_with_activations(params: &RefineNetParams, points: &[Vec3]) -> Result<(Prediction, Activations)> {
    check_points(points)?;
    let w1 = params.get(ParamId::Enc1W);
    let b1 = params.get(ParamId::Enc1B);
    let w2 = params.get(ParamId::Enc2W);
    let b2 = params.get(ParamId::Enc2B);

    let mut h1 = vec![0.0; points.len() * ENC1];
    let mut pooled = [0.0; ENC2];
    let mut argmax = [None; ENC2];
    for (k, p) in points.iter().enumerate() {
        let hk = &mut h1[k * ENC1..(k + 1) * ENC1];
        for (j, h) in hk.iter_mut().enumerate() {
            let row = &w1[j * POINT_DIM..(j + 1) * POINT_DIM];
            *h = (b1[j] + row[0] * p[0] + row[1] * p[1] + row[2] * p[2]).max(0.0);
        }
        let hk = &h1[k * ENC1..(k + 1) * ENC1];
        for c in 0..ENC2 {
            let z = b2[c] + dot(&w2[c * ENC1..(c + 1) * ENC1], hk);
            if z > pooled[c] {
                pooled[c] = z;
                argmax[c] = Some(k);
            }
        }
    }

    let w3 = params.get(ParamId::TrunkW);
    let b3 = params.get(ParamId::TrunkB);
    let mut trunk = [0.0; TRUNK];
    for (j, t) in trunk.iter_mut().enumerate() {
        *t = (b3[j] + dot(&w3[j * ENC2..(j + 1) * ENC2], &pooled)).max(0.0);
    }

    let head = |w: ParamId, b: ParamId, n: usize| -> Vec<f64> {
        let (w, b) = (params.get(w), params.get(b));
        (0..n).map(|i| b[i] + dot(&w[i * TRUNK..(i + 1) * TRUNK], &trunk)).collect()
    };
    let reg = head(ParamId::RegW, ParamId::RegB, NUM_RESIDUALS);
    let log_vars = head(ParamId::VarW, ParamId::VarB, params.encoding().num_variances());
    let logit = head(ParamId::ClsW, ParamId::ClsB, 1)[0];

    let mut residuals = [0.0; NUM_RESIDUALS];
    residuals.copy_from_slice(&reg);
    Ok((
        Prediction {
            residuals,
            log_vars,
            objectness_logit: logit,
        },
        Activations { h1, pooled, argmax, trunk },
    ))
}

/// Per-point encoder, channel-wise max over points, trunk and the three
/// heads. An empty RoI pools to the zero vector.
pub fn forward(params: &RefineNetParams, sample: &RoiSample) -> Result<Prediction> {
    forward_with_activations(params, &sample.points).map(|(p, _)| p)
}

/// Gradient of the loss with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct OutputGrad {
    pub residuals: [f64; NUM_RESIDUALS],
    pub log_vars: Vec<f64>,
    pub logit: f64,
}

/// Accumulates parameter gradients for one sample into `grad`.
pub(crate) fn backward(
    params: &RefineNetParams,
    points: &[Vec3],
    acts: &Activations,
    dout: &OutputGrad,
    grad: &mut [f64],
) {
    let nvar = params.encoding().num_variances();
    let mut dtrunk = [0.0; TRUNK];

    let mut head = |w: ParamId, b: ParamId, d: &[f64]| {
        let (rw, rb) = (params.range(w), params.range(b));
        let wv = params.get(w);
        for (i, &di) in d.iter().enumerate() {
            if di == 0.0 {
                continue;
            }
            grad[rb.start + i] += di;
            let gw = &mut grad[rw.start + i * TRUNK..rw.start + (i + 1) * TRUNK];
            for j in 0..TRUNK {
                gw[j] += di * acts.trunk[j];
                dtrunk[j] += di * wv[i * TRUNK + j];
            }
        }
    };
    head(ParamId::RegW, ParamId::RegB, &dout.residuals);
    head(ParamId::VarW, ParamId::VarB, &dout.log_vars[..nvar]);
    head(ParamId::ClsW, ParamId::ClsB, &[dout.logit]);

    let w3 = params.get(ParamId::TrunkW);
    let (r3w, r3b) = (params.range(ParamId::TrunkW), params.range(ParamId::TrunkB));
    let mut dpooled = [0.0; ENC2];
    for j in 0..TRUNK {
        if acts.trunk[j] <= 0.0 || dtrunk[j] == 0.0 {
            continue;
        }
        let d = dtrunk[j];
        grad[r3b.start + j] += d;
        let gw = &mut grad[r3w.start + j * ENC2..r3w.start + (j + 1) * ENC2];
        let wrow = &w3[j * ENC2..(j + 1) * ENC2];
        for c in 0..ENC2 {
            gw[c] += d * acts.pooled[c];
            dpooled[c] += d * wrow[c];
        }
    }

    let w2 = params.get(ParamId::Enc2W);
    let (r2w, r2b) = (params.range(ParamId::Enc2W), params.range(ParamId::Enc2B));
    let mut dh1 = vec![0.0; points.len() * ENC1];
    let mut touched = vec![false; points.len()];
    for c in 0..ENC2 {
        let Some(k) = acts.argmax[c] else { continue };
        let d = dpooled[c];
        if d == 0.0 {
            continue;
        }
        touched[k] = true;
        grad[r2b.start + c] += d;
        let hk = &acts.h1[k * ENC1..(k + 1) * ENC1];
        let gw = &mut grad[r2w.start + c * ENC1..r2w.start + (c + 1) * ENC1];
        let wrow = &w2[c * ENC1..(c + 1) * ENC1];
        let dk = &mut dh1[k * ENC1..(k + 1) * ENC1];
        for j in 0..ENC1 {
            gw[j] += d * hk[j];
            dk[j] += d * wrow[j];
        }
    }

    let (r1w, r1b) = (params.range(ParamId::Enc1W), params.range(ParamId::Enc1B));
    for (k, p) in points.iter().enumerate() {
        if !touched[k] {
            continue;
        }
        for j in 0..ENC1 {
            if acts.h1[k * ENC1 + j] <= 0.0 {
                continue;
            }
            let d = dh1[k * ENC1 + j];
            grad[r1b.start + j] += d;
            let g = &mut grad[r1w.start + j * POINT_DIM..r1w.start + (j + 1) * POINT_DIM];
            g[0] += d * p[0];
            g[1] += d * p[1];
            g[2] += d * p[2];
        }
    }
}

/// Which ReLUs fire and which point wins each pooled channel. Two parameter
/// sets with equal patterns on a sample lie in the same smooth piece of the
/// network, which is what finite-difference checks need to know.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    hidden: Vec<bool>,
    argmax: Vec<Option<usize>>,
}

pub fn activation_pattern(params: &RefineNetParams, points: &[Vec3]) -> Result<ActivationPattern> {
    let (_, acts) = forward_with_activations(params, points)?;
    Ok(ActivationPattern {
        hidden: acts.h1.iter().chain(acts.trunk.iter()).map(|v| *v > 0.0).collect(),
        argmax: acts.argmax.to_vec(),
    })
}
