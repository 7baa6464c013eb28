use ndarray::Array2;

use super::{AttributeVector, Image};
use crate::{Result, RiftError};

/// Background palette: corners of the RGB cube at amplitude 0.8. Indexed by
/// the bit pattern b2b1b0 -> (r, g, b) signs.
pub const BG_PALETTE: [[f64; 3]; 8] = signed_palette(0.8);
/// Object palette: corners at amplitude 0.4, disjoint from the background
/// palette so an object is always visible against any background.
pub const OBJ_PALETTE: [[f64; 3]; 8] = signed_palette(0.4);

const fn signed_palette(a: f64) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    let mut i = 0;
    while i < 8 {
        out[i] = [
            if i & 4 != 0 { a } else { -a },
            if i & 2 != 0 { a } else { -a },
            if i & 1 != 0 { a } else { -a },
        ];
        i += 1;
    }
    out
}

/// The canonical toy attribute set: (name, arity) in canonical order.
pub const CANONICAL_ATTRIBUTES: [(&str, usize); 5] = [
    ("bg_color", 8),
    ("obj_color", 8),
    ("shape", 3),
    ("size", 4),
    ("position", 5),
];

pub const SHAPE_SQUARE: usize = 0;
pub const SHAPE_CIRCLE: usize = 1;
pub const SHAPE_TRIANGLE: usize = 2;

/// Geometry of the rendered object in pixel units. The per-shape radius
/// multiplier keeps the rasterized masks of different shapes distinct even
/// at the smallest size, where a circle and a square would otherwise cover
/// the same pixel block.
fn geometry(shape: usize, size: usize, position: usize, h: usize, w: usize) -> (f64, f64, f64) {
    let cy = 0.5 * h as f64;
    let cx = (0.5 + (position as f64 - 2.0) * 0.14) * w as f64;
    let base = (0.065 + 0.03 * size as f64) * h.min(w) as f64;
    let mult = match shape {
        SHAPE_SQUARE => 1.0,
        SHAPE_CIRCLE => 1.25,
        _ => 1.3,
    };
    (cy, cx, base * mult)
}

/// Boolean mask of pixels covered by the object for the given geometry
/// attributes. Pure function of its arguments.
pub fn object_mask(
    shape: usize,
    size: usize,
    position: usize,
    h: usize,
    w: usize,
) -> Array2<bool> {
    let (cy, cx, r) = geometry(shape, size, position, h, w);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let di = i as f64 + 0.5 - cy;
        let dj = j as f64 + 0.5 - cx;
        match shape {
            SHAPE_SQUARE => di.abs() <= r && dj.abs() <= r,
            SHAPE_CIRCLE => di * di + dj * dj <= r * r,
            SHAPE_TRIANGLE => in_triangle(di, dj, r),
            _ => unreachable!("shape index validated by render"),
        }
    })
}

/// Upward-pointing triangle with apex at (-r, 0) and base corners at
/// (r, -r), (r, r), in (dy, dx) coordinates relative to the center.
fn in_triangle(di: f64, dj: f64, r: f64) -> bool {
    let v = [(-r, 0.0), (r, -r), (r, r)];
    let mut sign = 0.0f64;
    for k in 0..3 {
        let (y0, x0) = v[k];
        let (y1, x1) = v[(k + 1) % 3];
        let cross = (x1 - x0) * (di - y0) - (y1 - y0) * (dj - x0);
        if cross.abs() > 1e-12 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

pub(crate) fn validated_categorical(attrs: &AttributeVector, name: &str) -> Result<usize> {
    let arity = CANONICAL_ATTRIBUTES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, a)| *a)
        .ok_or_else(|| RiftError::UnknownAttribute(name.to_string()))?;
    let idx = attrs.get_cat(name)?;
    if idx >= arity {
        return Err(RiftError::AttributeOutOfRange {
            name: name.to_string(),
            index: idx,
            arity,
        });
    }
    Ok(idx)
}

/// Render the toy scene for a complete canonical attribute vector.
/// Deterministic; pixel values in [-1, 1], CHW layout.
pub fn render(attrs: &AttributeVector, resolution: (usize, usize)) -> Result<Image> {
    for name in attrs.names() {
        if !CANONICAL_ATTRIBUTES.iter().any(|(n, _)| *n == name) {
            return Err(RiftError::UnknownAttribute(name.to_string()));
        }
    }
    let bg = validated_categorical(attrs, "bg_color")?;
    let oc = validated_categorical(attrs, "obj_color")?;
    let shape = validated_categorical(attrs, "shape")?;
    let size = validated_categorical(attrs, "size")?;
    let position = validated_categorical(attrs, "position")?;
    let (h, w) = resolution;
    let mask = object_mask(shape, size, position, h, w);
    let bg_rgb = BG_PALETTE[bg];
    let obj_rgb = OBJ_PALETTE[oc];
    let img = Image::from_shape_fn((3, h, w), |(c, i, j)| {
        if mask[[i, j]] {
            obj_rgb[c]
        } else {
            bg_rgb[c]
        }
    });
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::AttributeVector;

    fn attrs(bg: usize, oc: usize, sh: usize, sz: usize, pos: usize) -> AttributeVector {
        AttributeVector::from_cats(&[
            ("bg_color", bg),
            ("obj_color", oc),
            ("shape", sh),
            ("size", sz),
            ("position", pos),
        ])
    }

    #[test]
    fn render_is_deterministic() {
        let a = attrs(3, 5, 1, 2, 4);
        let r1 = render(&a, (32, 32)).unwrap();
        let r2 = render(&a, (32, 32)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn background_change_only_touches_background_mask() {
        let a1 = attrs(0, 5, 1, 2, 4);
        let a2 = attrs(7, 5, 1, 2, 4);
        let r1 = render(&a1, (32, 32)).unwrap();
        let r2 = render(&a2, (32, 32)).unwrap();
        let mask = object_mask(1, 2, 4, 32, 32);
        for i in 0..32 {
            for j in 0..32 {
                let differ = (0..3).any(|c| r1[[c, i, j]] != r2[[c, i, j]]);
                assert_eq!(differ, !mask[[i, j]], "pixel ({i},{j})");
            }
        }
    }

    #[test]
    fn unknown_attribute_rejected() {
        let mut a = attrs(0, 0, 0, 0, 0);
        a.set_cat("frobnication", 1);
        let err = render(&a, (32, 32)).unwrap_err();
        assert!(err.to_string().contains("frobnication"));
    }

    #[test]
    fn out_of_arity_rejected() {
        let a = attrs(0, 0, 9, 0, 0);
        let err = render(&a, (32, 32)).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    /// Full canonical grid: all 3840 renders pairwise distinct, checked by
    /// hashing each image.
    #[test]
    fn canonical_grid_is_pairwise_distinct() {
        use std::collections::HashSet;
        let mut seen = HashSet::new();
        for bg in 0..8 {
            for oc in 0..8 {
                for sh in 0..3 {
                    for sz in 0..4 {
                        for pos in 0..5 {
                            let img = render(&attrs(bg, oc, sh, sz, pos), (32, 32)).unwrap();
                            let bytes: Vec<u8> = img
                                .iter()
                                .flat_map(|v| v.to_le_bytes())
                                .collect();
                            assert!(
                                seen.insert(bytes),
                                "duplicate render at {bg},{oc},{sh},{sz},{pos}"
                            );
                        }
                    }
                }
            }
        }
        assert_eq!(seen.len(), 3840);
    }
}
