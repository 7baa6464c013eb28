use super::render::{object_mask, BG_PALETTE, OBJ_PALETTE};
use super::{AttributeVector, Image};

/// Decode the generating attributes of an image by nearest-prototype search.
///
/// Background color is read off the top/bottom border rows (always outside
/// the object), then the best (shape, size, position, object color)
/// combination is chosen by whole-image L1 distance against the re-rendered
/// prototype. Total on any image of valid shape: exact on clean renders,
/// nearest prototype otherwise.
pub fn attribute_oracle(img: &Image) -> AttributeVector {
    let (_, h, w) = img.dim();
    // border rows are guaranteed background: the object never extends past
    // 0.5*h +/- 0.17*min(h,w) vertically
    let border = (h / 4).max(1);
    let mut bg_mean = [0.0f64; 3];
    let mut count = 0.0;
    for i in (0..border).chain(h - border..h) {
        for j in 0..w {
            for c in 0..3 {
                bg_mean[c] += img[[c, i, j]];
            }
            count += 1.0;
        }
    }
    for m in bg_mean.iter_mut() {
        *m /= count;
    }
    let bg = nearest_color(&bg_mean, &BG_PALETTE);

    let mut best = (0usize, 0usize, 0usize, 0usize);
    let mut best_score = f64::INFINITY;
    for shape in 0..3 {
        for size in 0..4 {
            for position in 0..5 {
                let mask = object_mask(shape, size, position, h, w);
                // object color candidate: mean over the candidate mask
                let mut obj_mean = [0.0f64; 3];
                let mut n = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        if mask[[i, j]] {
                            for c in 0..3 {
                                obj_mean[c] += img[[c, i, j]];
                            }
                            n += 1.0;
                        }
                    }
                }
                if n > 0.0 {
                    for m in obj_mean.iter_mut() {
                        *m /= n;
                    }
                }
                let oc = nearest_color(&obj_mean, &OBJ_PALETTE);
                let mut score = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        let proto = if mask[[i, j]] {
                            OBJ_PALETTE[oc]
                        } else {
                            BG_PALETTE[bg]
                        };
                        for c in 0..3 {
                            score += (img[[c, i, j]] - proto[c]).abs();
                        }
                    }
                }
                if score < best_score {
                    best_score = score;
                    best = (shape, size, position, oc);
                }
            }
        }
    }
    let (shape, size, position, oc) = best;
    AttributeVector::from_cats(&[
        ("bg_color", bg),
        ("obj_color", oc),
        ("shape", shape),
        ("size", size),
        ("position", position),
    ])
}

fn nearest_color(rgb: &[f64; 3], palette: &[[f64; 3]; 8]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in palette.iter().enumerate() {
        let d: f64 = (0..3).map(|c| (rgb[c] - p[c]).abs()).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
