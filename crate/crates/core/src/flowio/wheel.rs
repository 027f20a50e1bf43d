use super::{FlowField, RgbImage};
use crate::error::{Error, Result};

/// Hue segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue,
/// blue-magenta, magenta-red.
pub const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55-entry Middlebury color wheel.
pub fn color_wheel() -> Vec<[u8; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let ramp = |i: usize, n: usize| (255 * i / n) as u8;
    let mut wheel = Vec::with_capacity(WHEEL_SEGMENTS.iter().sum());
    wheel.extend((0..ry).map(|i| [255, ramp(i, ry), 0]));
    wheel.extend((0..yg).map(|i| [255 - ramp(i, yg), 255, 0]));
    wheel.extend((0..gc).map(|i| [0, 255, ramp(i, gc)]));
    wheel.extend((0..cb).map(|i| [0, 255 - ramp(i, cb), 255]));
    wheel.extend((0..bm).map(|i| [ramp(i, bm), 0, 255]));
    wheel.extend((0..mr).map(|i| [255, 0, 255 - ramp(i, mr)]));
    wheel
}

/// Encodes flow direction as hue and magnitude as saturation.
///
/// Vectors are divided by `max_magnitude` (or the frame's largest magnitude,
/// floored at 1e-3, when `None`). Unit-or-smaller vectors blend from white
/// towards the wheel color; longer ones are darkened to 75%.
pub fn flow_to_rgb(flow: &FlowField, max_magnitude: Option<f32>) -> Result<RgbImage> {
    if let Some(i) = flow.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite flow value at pixel {}", i / 2)));
    }
    let scale = match max_magnitude {
        Some(m) if m > 0.0 && m.is_finite() => m as f64,
        Some(m) => return Err(Error::Invalid(format!("max_magnitude must be positive, got {m}"))),
        None => (flow.max_magnitude() as f64).max(1e-3),
    };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut out = Vec::with_capacity(flow.width * flow.height * 3);
    for px in flow.data.chunks_exact(2) {
        let (u, v) = (px[0] as f64 / scale, px[1] as f64 / scale);
        let rad = (u * u + v * v).sqrt();
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = fk.floor() as usize;
        let k1 = if k0 + 1 == ncols { 0 } else { k0 + 1 };
        let f = fk - k0 as f64;
        for (&c0, &c1) in wheel[k0].iter().zip(&wheel[k1]) {
            let (c0, c1) = (c0 as f64 / 255.0, c1 as f64 / 255.0);
            let mut col = (1.0 - f) * c0 + f * c1;
            if rad <= 1.0 {
                col = 1.0 - rad * (1.0 - col);
            } else {
                col *= 0.75;
            }
            out.push((255.0 * col).floor() as u8);
        }
    }
    RgbImage::new(flow.width, flow.height, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_rgb(&FlowField::zeros(3, 2), None).unwrap();
        assert!(img.data.iter().all(|&v| v == 255));
    }

    #[test]
    fn rejects_non_finite() {
        let mut f = FlowField::zeros(2, 2);
        f.data[3] = f32::NAN;
        assert!(flow_to_rgb(&f, None).is_err());
        assert!(flow_to_rgb(&FlowField::zeros(2, 2), Some(0.0)).is_err());
    }

    #[test]
    fn wheel_has_55_entries() {
        assert_eq!(color_wheel().len(), 55);
    }
}
