use crate::error::{Error, Result};

/// A rotation composed of Givens rotations by the same angle, applied in the
/// listed coordinate planes from first to last.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationSpec {
    pub angle: f64,
    pub planes: Vec<(usize, usize)>,
}

impl RotationSpec {
    pub fn identity() -> Self {
        RotationSpec {
            angle: 0.0,
            planes: Vec::new(),
        }
    }

    /// 45° in plane (0,1), followed by (1,2) in three dimensions.
    pub fn default_for(dim: usize) -> Self {
        let planes = if dim >= 3 { vec![(0, 1), (1, 2)] } else { vec![(0, 1)] };
        RotationSpec {
            angle: std::f64::consts::FRAC_PI_4,
            planes,
        }
    }

    /// Row-major `dim × dim` matrix `R` such that a point maps to `R p`.
    ///
    /// Fails when the composed map is not orthogonal to 1e-12, which also
    /// catches degenerate planes such as `(1, 1)`.
    pub fn matrix(&self, dim: usize) -> Result<Vec<f64>> {
        let mut r = vec![0.0; dim * dim];
        for k in 0..dim {
            r[k * dim + k] = 1.0;
        }
        let (s, c) = self.angle.sin_cos();
        for &(a, b) in &self.planes {
            if a >= dim || b >= dim {
                return Err(Error::Config(format!(
                    "rotation plane ({a}, {b}) outside dimension {dim}"
                )));
            }
            // left-multiply by the Givens rotation G(a, b)
            let mut g = vec![0.0; dim * dim];
            for k in 0..dim {
                g[k * dim + k] = 1.0;
            }
            g[a * dim + a] = c;
            g[b * dim + b] = c;
            g[a * dim + b] = -s;
            g[b * dim + a] = s;
            r = matmul_sq(&g, &r, dim);
        }
        let rtr = matmul_sq(&transpose_sq(&r, dim), &r, dim);
        for i in 0..dim {
            for j in 0..dim {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr[i * dim + j] - want).abs() > 1e-12 {
                    return Err(Error::Config(format!("rotation {self:?} is not orthogonal")));
                }
            }
        }
        Ok(r)
    }

    /// Rotates every row of a `[n × dim]` position matrix.
    pub fn apply(&self, positions: &[f64], dim: usize) -> Result<Vec<f64>> {
        let r = self.matrix(dim)?;
        let mut out = vec![0.0; positions.len()];
        for (p, o) in positions.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            for i in 0..dim {
                o[i] = (0..dim).map(|k| r[i * dim + k] * p[k]).sum();
            }
        }
        Ok(out)
    }
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                out[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    out
}

fn transpose_sq(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balltree::BallTree;

    #[test]
    fn default_rotation_is_orthogonal() {
        for d in [2, 3] {
            assert!(RotationSpec::default_for(d).matrix(d).is_ok());
        }
    }

    #[test]
    fn degenerate_plane_is_rejected() {
        let rot = RotationSpec {
            angle: 0.3,
            planes: vec![(1, 1)],
        };
        assert!(matches!(rot.matrix(3), Err(Error::Config(_))));
        let rot = RotationSpec {
            angle: 0.3,
            planes: vec![(0, 2)],
        };
        assert!(matches!(rot.matrix(2), Err(Error::Config(_))));
    }

    #[test]
    fn rotation_preserves_distances() {
        let pts = [0.0, 0.0, 1.0, 2.0, -1.0, 0.5];
        let out = RotationSpec::default_for(2).apply(&pts, 2).unwrap();
        let d = |p: &[f64], a: usize, b: usize| {
            ((p[2 * a] - p[2 * b]).powi(2) + (p[2 * a + 1] - p[2 * b + 1]).powi(2)).sqrt()
        };
        assert!((d(&pts, 1, 2) - d(&out, 1, 2)).abs() < 1e-12);
    }

    #[test]
    fn identity_rotation_reproduces_the_plain_tree() {
        let pts: Vec<f64> = (0..37)
            .flat_map(|i| [(i * 7 % 11) as f64, (i * 5 % 13) as f64])
            .collect();
        let plain = BallTree::build(&pts, 2).unwrap();
        let rot = BallTree::build_rotated(&pts, 2, &RotationSpec::identity()).unwrap();
        assert_eq!(plain.perm(), rot.perm());
    }

    #[test]
    fn two_points_give_the_same_partition() {
        let pts = [0.0, 0.0, 1.0, 0.2];
        let plain = BallTree::build(&pts, 2).unwrap();
        let rot = BallTree::build_rotated(&pts, 2, &RotationSpec::default_for(2)).unwrap();
        let mut a = plain.perm().to_vec();
        let mut b = rot.perm().to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
