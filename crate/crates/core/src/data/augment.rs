use rand::Rng;

use super::LabeledImage;

/// Zero border added on each side before cropping back to the original size.
pub const CROP_PAD: usize = 4;

/// Places the image in a zero canvas padded by [`CROP_PAD`] pixels and cuts out
/// the original size at offset `(oy, ox)` of the canvas; `(4, 4)` is the identity.
pub fn augment_crop_at(img: &LabeledImage, oy: usize, ox: usize) -> LabeledImage {
    assert!(
        oy <= 2 * CROP_PAD && ox <= 2 * CROP_PAD,
        "crop offset ({oy}, {ox}) outside the padded canvas"
    );
    let (h, w) = (img.height, img.width);
    let mut pixels = vec![0u8; img.pixels.len()];
    for c in 0..img.channels {
        for y in 0..h {
            // canvas row oy + y holds source row oy + y − pad
            let sy = (oy + y) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (ox + x) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                pixels[(c * h + y) * w + x] = img.pixels[(c * h + sy as usize) * w + sx as usize];
            }
        }
    }
    LabeledImage { pixels, ..img.clone() }
}

/// Uniform random crop offset in `0..=8` per axis.
pub fn augment_crop<R: Rng + ?Sized>(img: &LabeledImage, rng: &mut R) -> LabeledImage {
    let oy = rng.random_range(0..=2 * CROP_PAD);
    let ox = rng.random_range(0..=2 * CROP_PAD);
    augment_crop_at(img, oy, ox)
}
