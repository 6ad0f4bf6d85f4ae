use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    fn quarter_turns(self) -> usize {
        self.degrees() as usize / 90
    }
}

/// Bilinear resampling of a row-major `src_w x src_h` plane with corner
/// pixels aligned (source coordinate `x * (src_w - 1) / (dst_w - 1)`).
pub fn resize_bilinear(src: &[f32], src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Vec<f32> {
    assert_eq!(src.len(), src_w * src_h);
    let scale = |src: usize, dst: usize| {
        if dst > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let (sx, sy) = (scale(src_w, dst_w), scale(src_h, dst_h));
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for y in 0..dst_h {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as usize).min(src_h - 1);
        let y1 = (y0 + 1).min(src_h - 1);
        let ty = fy - y0 as f64;
        for x in 0..dst_w {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as usize).min(src_w - 1);
            let x1 = (x0 + 1).min(src_w - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| src[yy * src_w + xx] as f64;
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

/// Rotates a square `size x size` plane clockwise. Pure index permutation,
/// so composing rotations is bit-exact.
pub fn rotate(src: &[f32], size: usize, rotation: Rotation) -> Vec<f32> {
    assert_eq!(src.len(), size * size);
    let mut cur = src.to_vec();
    for _ in 0..rotation.quarter_turns() {
        let mut next = vec![0.0; cur.len()];
        for y in 0..size {
            for x in 0..size {
                // clockwise: (y, x) -> (x, size - 1 - y)
                next[x * size + (size - 1 - y)] = cur[y * size + x];
            }
        }
        cur = next;
    }
    cur
}
