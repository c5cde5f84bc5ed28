//! Linear degradation operators `H`, their pseudo-inverses and back projection.
//!
//! Images use the `[height, width, channels]` layout. Separable operators act
//! on each channel independently as `A_h X A_w^T`.

mod separable;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsdError};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

pub use separable::{
    average_downsample_matrix, bicubic_downsample_matrix, bicubic_weight, circular_conv_matrix, gaussian_taps, AxisSvd,
    RCOND,
};

pub const DEFAULT_BLUR_SIGMA: f64 = 15.0;
pub const DEFAULT_BLUR_KSIZE: usize = 9;

fn default_blur_sigma() -> f64 {
    DEFAULT_BLUR_SIGMA
}

fn default_blur_ksize() -> usize {
    DEFAULT_BLUR_KSIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Degradation {
    Identity,
    SrBicubic {
        scale: usize,
    },
    SrAverage {
        scale: usize,
    },
    Colorization,
    GaussianBlur {
        #[serde(default = "default_blur_sigma")]
        sigma: f64,
        #[serde(default = "default_blur_ksize")]
        ksize: usize,
    },
    InpaintRandom {
        drop_prob: f64,
        seed: u64,
    },
    InpaintBox {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    },
}

impl Degradation {
    pub fn label(&self) -> String {
        match self {
            Degradation::Identity => "identity".into(),
            Degradation::SrBicubic { scale } => format!("sr_bicubic_x{scale}"),
            Degradation::SrAverage { scale } => format!("sr_average_x{scale}"),
            Degradation::Colorization => "colorization".into(),
            Degradation::GaussianBlur { sigma, ksize } => format!("blur_s{sigma}_k{ksize}"),
            Degradation::InpaintRandom { drop_prob, .. } => format!("inpaint_random_p{drop_prob}"),
            Degradation::InpaintBox { x, y, w, h } => format!("inpaint_box_{x}_{y}_{w}x{h}"),
        }
    }

    pub fn is_colorization(&self) -> bool {
        matches!(self, Degradation::Colorization)
    }

    /// Image shape whose measurement under this degradation has shape `measured`.
    pub fn image_shape_for(&self, measured: &[usize]) -> Result<Vec<usize>> {
        let (h, w, c) = image_dims(measured)?;
        Ok(match *self {
            Degradation::SrBicubic { scale } | Degradation::SrAverage { scale } => vec![h * scale, w * scale, c],
            Degradation::Colorization if c == 1 => vec![h, w, 3],
            Degradation::Colorization => {
                return Err(SsdError::invalid("colorization measurements have one channel"));
            }
            _ => measured.to_vec(),
        })
    }
}

/// Additive measurement noise `n ~ N(0, s^2)` with `s ~ U[0, sigma_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseAugmentation {
    pub sigma_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    #[serde(default)]
    pub noise: Option<NoiseAugmentation>,
}

impl DegradationSpec {
    pub fn noiseless(degradation: Degradation) -> Self {
        Self {
            degradation,
            noise: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.noise {
            if !(n.sigma_max >= 0.0 && n.sigma_max.is_finite()) {
                return Err(SsdError::invalid(format!(
                    "noise sigma_max {} must be finite and non-negative",
                    n.sigma_max
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Repr {
    Identity,
    Separable { rows: AxisSvd, cols: AxisSvd },
    ChannelMean,
    Mask(Vec<bool>),
}

#[derive(Debug, Clone)]
pub struct LinearOperator {
    label: String,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    repr: Repr,
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] if h > 0 && w > 0 && (c == 1 || c == 3) => Ok((h, w, c)),
        _ => Err(SsdError::invalid(format!(
            "image shape must be [h, w, 1|3], got {shape:?}"
        ))),
    }
}

pub fn build_operator(spec: &Degradation, image_shape: &[usize]) -> Result<LinearOperator> {
    let (h, w, c) = image_dims(image_shape)?;
    let label = spec.label();
    let same = |repr| LinearOperator {
        label: label.clone(),
        in_shape: image_shape.to_vec(),
        out_shape: image_shape.to_vec(),
        repr,
    };
    let op = match *spec {
        Degradation::Identity => same(Repr::Identity),
        Degradation::SrBicubic { scale } | Degradation::SrAverage { scale } => {
            let make = if matches!(spec, Degradation::SrBicubic { .. }) {
                bicubic_downsample_matrix
            } else {
                average_downsample_matrix
            };
            let rows = AxisSvd::new(make(h, scale)?)?;
            let cols = AxisSvd::new(make(w, scale)?)?;
            LinearOperator {
                label,
                in_shape: image_shape.to_vec(),
                out_shape: vec![h / scale, w / scale, c],
                repr: Repr::Separable { rows, cols },
            }
        }
        Degradation::GaussianBlur { sigma, ksize } => {
            let taps = gaussian_taps(sigma, ksize)?;
            let rows = AxisSvd::new(circular_conv_matrix(h, &taps))?;
            let cols = AxisSvd::new(circular_conv_matrix(w, &taps))?;
            same(Repr::Separable { rows, cols })
        }
        Degradation::Colorization => {
            if c != 3 {
                return Err(SsdError::invalid("colorization needs a 3-channel image"));
            }
            LinearOperator {
                label,
                in_shape: image_shape.to_vec(),
                out_shape: vec![h, w, 1],
                repr: Repr::ChannelMean,
            }
        }
        Degradation::InpaintRandom { drop_prob, seed } => {
            if !(0.0..=1.0).contains(&drop_prob) {
                return Err(SsdError::invalid(format!("drop_prob {drop_prob} outside [0, 1]")));
            }
            let mut rng = crate::rng::seeded(seed);
            let keep = (0..h * w).map(|_| rng.random::<f64>() >= drop_prob).collect();
            same(Repr::Mask(keep))
        }
        Degradation::InpaintBox { x, y, w: bw, h: bh } => {
            if x + bw > w || y + bh > h {
                return Err(SsdError::invalid(format!(
                    "box {bw}x{bh} at ({x}, {y}) exceeds {w}x{h} image"
                )));
            }
            let keep = (0..h * w)
                .map(|p| {
                    let (r, col) = (p / w, p % w);
                    !(r >= y && r < y + bh && col >= x && col < x + bw)
                })
                .collect();
            same(Repr::Mask(keep))
        }
    };
    Ok(op)
}

impl LinearOperator {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// The 1-D factors `(A_h, A_w)` for separable operators.
    pub fn separable_factors(&self) -> Option<(&AxisSvd, &AxisSvd)> {
        match &self.repr {
            Repr::Separable { rows, cols } => Some((rows, cols)),
            _ => None,
        }
    }

    /// Kept-pixel mask for inpainting operators, one entry per pixel.
    pub fn mask(&self) -> Option<&[bool]> {
        match &self.repr {
            Repr::Mask(m) => Some(m),
            _ => None,
        }
    }

    /// `y = H x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.ensure_shape(&self.in_shape)?;
        match &self.repr {
            Repr::Identity => Ok(x.clone()),
            Repr::Separable { rows, cols } => {
                separable_map(x, &self.out_shape, |m| rows.matrix() * m * cols.matrix().transpose())
            }
            Repr::ChannelMean => {
                let data = x.data().chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
                Tensor::new(self.out_shape.clone(), data)
            }
            Repr::Mask(keep) => Ok(mask_map(x, keep)),
        }
    }

    /// `x = H^+ y`, the minimum-norm least-squares preimage.
    pub fn pinv_apply(&self, y: &Tensor) -> Result<Tensor> {
        y.ensure_shape(&self.out_shape)?;
        match &self.repr {
            Repr::Identity => Ok(y.clone()),
            Repr::Separable { rows, cols } => separable_map(y, &self.in_shape, |m| separable::kron_pinv(rows, cols, m)),
            Repr::ChannelMean => {
                let data = y.data().iter().flat_map(|&v| [v, v, v]).collect();
                Tensor::new(self.in_shape.clone(), data)
            }
            Repr::Mask(keep) => Ok(mask_map(y, keep)),
        }
    }

    /// `x' = (I - H^+ H) x + H^+ y`.
    pub fn back_project(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        x.ensure_shape(&self.in_shape)?;
        y.ensure_shape(&self.out_shape)?;
        match &self.repr {
            Repr::Identity => Ok(y.clone()),
            Repr::Mask(keep) => {
                let c = x.shape()[2];
                let mut out = x.clone();
                for (i, (o, &v)) in out.data_mut().iter_mut().zip(y.data()).enumerate() {
                    if keep[i / c] {
                        *o = v;
                    }
                }
                Ok(out)
            }
            _ => {
                let residual = y.sub(&self.apply(x)?)?;
                x.add(&self.pinv_apply(&residual)?)
            }
        }
    }

    /// Measurement `y = H x + n`; returns `y` and the noise level drawn.
    pub fn degrade<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        noise: Option<NoiseAugmentation>,
        rng: &mut R,
    ) -> Result<(Tensor, f64)> {
        let clean = self.apply(x)?;
        let Some(n) = noise else {
            return Ok((clean, 0.0));
        };
        let sigma = n.sigma_max * rng.random::<f64>();
        let z = standard_normal(rng, &self.out_shape);
        Ok((clean.axpby(1.0, &z, sigma)?, sigma))
    }
}

fn separable_map(x: &Tensor, out_shape: &[usize], f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Tensor> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let mut out = vec![0.0; oh * ow * c];
    for ch in 0..c {
        let m = DMatrix::from_fn(h, w, |i, j| x.data()[(i * w + j) * c + ch]);
        let r = f(&m);
        for i in 0..oh {
            for j in 0..ow {
                out[(i * ow + j) * c + ch] = r[(i, j)];
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out)
}

fn mask_map(x: &Tensor, keep: &[bool]) -> Tensor {
    let c = x.shape()[2];
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !keep[i / c] {
            *v = 0.0;
        }
    }
    out
}
