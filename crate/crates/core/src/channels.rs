//! Regularized channel features: LUV color, gradient magnitude, and oriented
//! gradient histograms, each normalized to zero mean and unit variance.
//!
//! Color pipeline: sRGB components in [0,1] are linearized
//! (c/12.92 below 0.04045, else ((c+0.055)/1.055)^2.4), mapped to XYZ with the
//! D65 sRGB matrix, and converted to CIE 1976 L*u*v*:
//! L* = 116 t^(1/3) - 16 for t = Y/Yn > (6/29)^3, else (29/3)^3 t;
//! u* = 13 L* (u' - u'n), v* = 13 L* (v' - v'n) with u' = 4X/(X+15Y+3Z),
//! v' = 9Y/(X+15Y+3Z). The white point is the matrix applied to (1,1,1), so
//! reference white maps exactly to (100, 0, 0).
//!
//! Gradients use central differences [-1,0,1]/2 with replicated borders,
//! computed on the L* plane. Orientation is folded to [0, pi) and each pixel's
//! full magnitude lands in exactly one equal-width bin, so the orientation
//! channels sum back to the magnitude channel exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// sRGB -> XYZ (D65) row-major matrix.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Channels below this variance normalize to all zeros.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Default orientation bin count.
pub const DEFAULT_BINS: usize = 6;

/// Default window geometry (height, width).
pub const DEFAULT_WINDOW: (usize, usize) = (84, 28);

/// A window's normalized channel stack, fixed channel order
/// [L, U, V, |G|, G1..Gbins].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    tensor: Tensor,
}

impl ChannelStack {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn window(&self) -> (usize, usize) {
        (self.tensor.dim(1), self.tensor.dim(2))
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Wrap a raw [channels,H,W] tensor. Intended for tests and file loading;
    /// `extract_stack` is the production path.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.ndim() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "channel stack must be [C,H,W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(ChannelStack { tensor })
    }
}

fn srgb_linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn luv_from_xyz(x: f64, y: f64, z: f64, white: &(f64, f64, f64, f64)) -> (f64, f64, f64) {
    let (yn, _xn, un, vn) = (white.1, white.0, white.2, white.3);
    let t = y / yn;
    let l = if t > (6.0f64 / 29.0).powi(3) {
        116.0 * t.cbrt() - 16.0
    } else {
        (29.0f64 / 3.0).powi(3) * t
    };
    let den = x + 15.0 * y + 3.0 * z;
    if den == 0.0 {
        return (l, 0.0, 0.0);
    }
    let u_prime = 4.0 * x / den;
    let v_prime = 9.0 * y / den;
    (l, 13.0 * l * (u_prime - un), 13.0 * l * (v_prime - vn))
}

/// White point (Xn, Yn, u'n, v'n) derived from the matrix so that RGB white
/// converts to exactly (100, 0, 0).
fn white_point() -> (f64, f64, f64, f64) {
    let xn = SRGB_TO_XYZ[0][0] + SRGB_TO_XYZ[0][1] + SRGB_TO_XYZ[0][2];
    let yn = SRGB_TO_XYZ[1][0] + SRGB_TO_XYZ[1][1] + SRGB_TO_XYZ[1][2];
    let zn = SRGB_TO_XYZ[2][0] + SRGB_TO_XYZ[2][1] + SRGB_TO_XYZ[2][2];
    let den = xn + 15.0 * yn + 3.0 * zn;
    (xn, yn, 4.0 * xn / den, 9.0 * yn / den)
}

/// Convert an sRGB image [3,H,W] with components in [0,1] to L*u*v* planes.
pub fn rgb_to_luv(image: &Tensor) -> Result<Tensor> {
    if image.ndim() != 3 || image.dim(0) != 3 {
        return Err(Error::ShapeMismatch(format!(
            "rgb_to_luv expects [3,H,W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let n = h * w;
    let data = image.data();
    if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "RGB component {bad} outside [0,1]"
        )));
    }
    let white = white_point();
    let mut out = vec![0.0f64; 3 * n];
    for i in 0..n {
        let r = srgb_linearize(data[i]);
        let g = srgb_linearize(data[n + i]);
        let b = srgb_linearize(data[2 * n + i]);
        let mut xyz = [0.0f64; 3];
        for (k, row) in SRGB_TO_XYZ.iter().enumerate() {
            xyz[k] = row[0] * r + row[1] * g + row[2] * b;
        }
        let (l, u, v) = luv_from_xyz(xyz[0], xyz[1], xyz[2], &white);
        out[i] = l;
        out[n + i] = u;
        out[2 * n + i] = v;
    }
    Tensor::new(vec![3, h, w], out)
}

/// Gradient magnitude and hard-binned orientation channels of a gray plane.
///
/// Returns (mag [H,W], orient [bins,H,W]); each pixel's magnitude is added to
/// exactly one orientation bin, so the bins partition the magnitude.
pub fn gradient_channels(gray: &Tensor, bins: usize) -> Result<(Tensor, Tensor)> {
    if gray.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "gradient_channels expects [H,W], got {:?}",
            gray.shape()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    let (h, w) = (gray.dim(0), gray.dim(1));
    if h < 3 || w < 3 {
        return Err(Error::ShapeMismatch(format!(
            "gradient_channels needs at least 3x3, got {h}x{w}"
        )));
    }
    let g = gray.data();
    let mut mag = vec![0.0f64; h * w];
    let mut orient = vec![0.0f64; bins * h * w];
    let bin_width = std::f64::consts::PI / bins as f64;
    for i in 0..h {
        let up = if i == 0 { 0 } else { i - 1 };
        let down = if i + 1 == h { i } else { i + 1 };
        for j in 0..w {
            let left = if j == 0 { 0 } else { j - 1 };
            let right = if j + 1 == w { j } else { j + 1 };
            let gx = (g[i * w + right] - g[i * w + left]) / 2.0;
            let gy = (g[down * w + j] - g[up * w + j]) / 2.0;
            let m = (gx * gx + gy * gy).sqrt();
            mag[i * w + j] = m;
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            let bin = ((theta / bin_width) as usize).min(bins - 1);
            orient[bin * h * w + i * w + j] = m;
        }
    }
    Ok((
        Tensor::new(vec![h, w], mag)?,
        Tensor::new(vec![bins, h, w], orient)?,
    ))
}

/// Normalize to zero mean and unit variance (population statistics), or to all
/// zeros when the variance is below [`VARIANCE_FLOOR`].
pub fn normalize_channel(channel: &Tensor) -> Tensor {
    let n = channel.len() as f64;
    let mean = channel.iter().sum::<f64>() / n;
    let var = channel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < VARIANCE_FLOOR {
        return Tensor::zeros(channel.shape().to_vec());
    }
    let inv_std = 1.0 / var.sqrt();
    let data = channel.iter().map(|v| (v - mean) * inv_std).collect();
    Tensor::new(channel.shape().to_vec(), data).expect("shape preserved")
}

/// Extract the normalized channel stack of one RGB window.
///
/// LUV planes come from [`rgb_to_luv`]; gradients are taken on the
/// un-normalized L plane; all 4+bins channels are normalized independently.
pub fn extract_stack(image: &Tensor, window: (usize, usize), bins: usize) -> Result<ChannelStack> {
    if image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != window.0 || image.dim(2) != window.1
    {
        return Err(Error::ShapeMismatch(format!(
            "extract_stack expects [3,{},{}], got {:?}",
            window.0,
            window.1,
            image.shape()
        )));
    }
    let (h, w) = window;
    let n = h * w;
    let luv = rgb_to_luv(image)?;
    let l_plane = Tensor::new(vec![h, w], luv.data()[..n].to_vec())?;
    let (mag, orient) = gradient_channels(&l_plane, bins)?;

    let mut stacked = Vec::with_capacity((4 + bins) * n);
    for c in 0..3 {
        let plane = Tensor::new(vec![h, w], luv.data()[c * n..(c + 1) * n].to_vec())?;
        stacked.extend_from_slice(normalize_channel(&plane).data());
    }
    stacked.extend_from_slice(normalize_channel(&mag).data());
    for b in 0..bins {
        let plane = Tensor::new(vec![h, w], orient.data()[b * n..(b + 1) * n].to_vec())?;
        stacked.extend_from_slice(normalize_channel(&plane).data());
    }
    Ok(ChannelStack {
        tensor: Tensor::new(vec![4 + bins, h, w], stacked)?,
    })
}
