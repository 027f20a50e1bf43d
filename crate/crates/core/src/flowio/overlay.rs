use super::{Mask, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::BBox;

const GREEN: [u8; 3] = [0, 255, 0];
const BLUE: [u8; 3] = [0, 0, 255];

fn blend(px: [u8; 3], color: [u8; 3]) -> [u8; 3] {
    let mix = |a: u8, b: u8| (a as u16 + b as u16).div_ceil(2) as u8;
    [mix(px[0], color[0]), mix(px[1], color[1]), mix(px[2], color[2])]
}

/// Draws moving pixels as a 50% green tint and boxes as 50% blue outlines.
pub fn overlay(rgb: &RgbImage, mask: &Mask, boxes: &[BBox]) -> Result<RgbImage> {
    if (mask.width, mask.height) != (rgb.width, rgb.height) {
        return Err(Error::shape(
            "overlay",
            format!(
                "mask {}x{} vs image {}x{}",
                mask.width, mask.height, rgb.width, rgb.height
            ),
        ));
    }
    let mut out = rgb.clone();
    for y in 0..rgb.height {
        for x in 0..rgb.width {
            if mask.get(x, y) {
                out.set_pixel(x, y, blend(rgb.pixel(x, y), GREEN));
            }
        }
    }
    let (w, h) = (rgb.width as f64, rgb.height as f64);
    for b in boxes {
        let c = b.clip(w, h);
        if c.area() <= 0.0 {
            continue;
        }
        let x0 = c.x0().floor() as usize;
        let y0 = c.y0().floor() as usize;
        let x1 = ((c.x1().ceil() as usize).max(x0 + 1) - 1).min(rgb.width - 1);
        let y1 = ((c.y1().ceil() as usize).max(y0 + 1) - 1).min(rgb.height - 1);
        let mut edge = Vec::new();
        for x in x0..=x1 {
            edge.push((x, y0));
            edge.push((x, y1));
        }
        for y in y0..=y1 {
            edge.push((x0, y));
            edge.push((x1, y));
        }
        edge.sort_unstable();
        edge.dedup();
        for (x, y) in edge {
            let px = out.pixel(x, y);
            out.set_pixel(x, y, blend(px, BLUE));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_overlay_is_identity() {
        let img = RgbImage::filled(5, 4, [10, 20, 30]);
        assert_eq!(overlay(&img, &Mask::zeros(5, 4), &[]).unwrap(), img);
    }

    #[test]
    fn full_mask_is_half_green() {
        let img = RgbImage::filled(3, 3, [100, 100, 100]);
        let mask = Mask::new(3, 3, vec![1; 9]).unwrap();
        let out = overlay(&img, &mask, &[]).unwrap();
        assert!(out.data.chunks(3).all(|p| p == [50, 178, 50]));
    }

    #[test]
    fn box_outline_is_blue_tinted() {
        let img = RgbImage::filled(8, 8, [0, 0, 0]);
        let out = overlay(&img, &Mask::zeros(8, 8), &[BBox::from_corners(2.0, 2.0, 6.0, 6.0)]).unwrap();
        assert_eq!(out.pixel(2, 2), [0, 0, 128]);
        assert_eq!(out.pixel(5, 3), [0, 0, 128]);
        assert_eq!(out.pixel(3, 3), [0, 0, 0]);
        assert_eq!(out.pixel(0, 0), [0, 0, 0]);
    }
}
