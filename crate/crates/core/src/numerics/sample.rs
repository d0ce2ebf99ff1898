//! Bilinear sampling at fractional (row, col) positions with zero padding.

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

struct Corners {
    r0: isize,
    c0: isize,
    fr: f64,
    fc: f64,
}

impl Corners {
    fn new(r: f64, c: f64) -> Self {
        let rf = r.floor();
        let cf = c.floor();
        Corners {
            r0: rf as isize,
            c0: cf as isize,
            fr: r - rf,
            fc: c - cf,
        }
    }
}

#[inline]
fn read(plane: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
        0.0
    } else {
        plane[r as usize * w + c as usize]
    }
}

fn check(input: &[usize], coords: &[usize]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match input {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::shape(
                "bilinear_sample",
                format!("input must be C×H×W, got {:?}", input),
            ))
        }
    };
    if coords != [2, h, w] {
        return Err(Error::shape(
            "bilinear_sample",
            format!("coords must be [2, {h}, {w}], got {:?}", coords),
        ));
    }
    Ok((c, h, w))
}

/// Samples every channel of `input` at the positions in `coords`.
pub fn bilinear_sample_forward(input: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (ch, h, w) = check(input.shape(), coords.shape())?;
    let plane = h * w;
    let (rows, cols) = coords.data().split_at(plane);
    let mut out = vec![0.0; ch * plane];
    for p in 0..plane {
        let k = Corners::new(rows[p], cols[p]);
        let wts = [
            (1.0 - k.fr) * (1.0 - k.fc),
            (1.0 - k.fr) * k.fc,
            k.fr * (1.0 - k.fc),
            k.fr * k.fc,
        ];
        for c in 0..ch {
            let src = &input.data()[c * plane..(c + 1) * plane];
            out[c * plane + p] = wts[0] * read(src, h, w, k.r0, k.c0)
                + wts[1] * read(src, h, w, k.r0, k.c0 + 1)
                + wts[2] * read(src, h, w, k.r0 + 1, k.c0)
                + wts[3] * read(src, h, w, k.r0 + 1, k.c0 + 1);
        }
    }
    Ok(Tensor::from_parts(vec![ch, h, w], out))
}

/// Integer pixel grid as a `2×H×W` coordinate field.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        data.extend(std::iter::repeat_n(r as f64, w));
    }
    for _ in 0..h {
        data.extend((0..w).map(|c| c as f64));
    }
    Tensor::from_parts(vec![2, h, w], data)
}

impl<'t> Var<'t> {
    /// Bilinear interpolation of `self` (C×H×W) at `coords` (2×H×W, rows then cols).
    /// Reads outside the grid are zero. Differentiable in both arguments.
    pub fn bilinear_sample(self, coords: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let cv = coords.value();
        let out = bilinear_sample_forward(&xv, &cv)?;
        let (ch, h, w) = check(xv.shape(), cv.shape())?;
        Ok(self.tape.record(out, &[self, coords], move |g, wants| {
            let plane = h * w;
            let (rows, cols) = cv.data().split_at(plane);
            let x = xv.data();
            let gd = g.data();
            let mut gx = wants[0].then(|| vec![0.0; x.len()]);
            let mut gc = wants[1].then(|| vec![0.0; 2 * plane]);
            for p in 0..plane {
                let k = Corners::new(rows[p], cols[p]);
                let corners = [
                    (k.r0, k.c0, (1.0 - k.fr) * (1.0 - k.fc)),
                    (k.r0, k.c0 + 1, (1.0 - k.fr) * k.fc),
                    (k.r0 + 1, k.c0, k.fr * (1.0 - k.fc)),
                    (k.r0 + 1, k.c0 + 1, k.fr * k.fc),
                ];
                let (mut dr, mut dc) = (0.0, 0.0);
                for c in 0..ch {
                    let gv = gd[c * plane + p];
                    if gv == 0.0 {
                        continue;
                    }
                    if let Some(gx) = &mut gx {
                        for &(r, cc, wt) in &corners {
                            if r >= 0 && cc >= 0 && (r as usize) < h && (cc as usize) < w {
                                gx[c * plane + r as usize * w + cc as usize] += gv * wt;
                            }
                        }
                    }
                    if gc.is_some() {
                        let src = &x[c * plane..(c + 1) * plane];
                        let v00 = read(src, h, w, k.r0, k.c0);
                        let v01 = read(src, h, w, k.r0, k.c0 + 1);
                        let v10 = read(src, h, w, k.r0 + 1, k.c0);
                        let v11 = read(src, h, w, k.r0 + 1, k.c0 + 1);
                        dr += gv * ((1.0 - k.fc) * (v10 - v00) + k.fc * (v11 - v01));
                        dc += gv * ((1.0 - k.fr) * (v01 - v00) + k.fr * (v11 - v10));
                    }
                }
                if let Some(gc) = &mut gc {
                    gc[p] += dr;
                    gc[plane + p] += dc;
                }
            }
            vec![
                gx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                gc.map(|d| Tensor::from_parts(cv.shape().to_vec(), d)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn integer_grid_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 5, 4], 1.0, &mut rng);
        let y = bilinear_sample_forward(&x, &identity_grid(5, 4)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn far_outside_reads_zero() {
        let x = Tensor::ones(&[2, 3, 3]);
        let coords = Tensor::full(&[2, 3, 3], -10.0);
        let y = bilinear_sample_forward(&x, &coords).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn midpoint_is_mean_of_corners() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let coords = Tensor::full(&[2, 2, 2], 0.5);
        let y = bilinear_sample_forward(&x, &coords).unwrap();
        assert_eq!(y.data()[0], 1.5);
    }

    #[test]
    fn wrong_coord_shape_rejected() {
        let x = Tensor::ones(&[1, 3, 3]);
        assert!(bilinear_sample_forward(&x, &Tensor::zeros(&[2, 3, 4])).is_err());
        assert!(bilinear_sample_forward(&x, &Tensor::zeros(&[3, 3, 3])).is_err());
    }
}
