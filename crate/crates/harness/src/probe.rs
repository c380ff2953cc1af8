//! Receptive fields: which input points can influence one output point.

use std::collections::VecDeque;

use erwin_core::geometry::{generate, CloudView, PointCloud, SyntheticKind, SyntheticSpec};
use erwin_core::model::{Erwin, ErwinConfig, ForwardOptions, Neighborhood, Prepared};
use erwin_core::numerics::{Tape, Tensor};
use erwin_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// A gradient entry above this magnitude marks a point as influential.
pub const GRADIENT_THRESHOLD: f64 = 1e-12;
/// Size of the bump added to one input feature.
pub const PERTURBATION_STEP: f64 = 1.0;
/// An output change above this magnitude marks a point as influential: the
/// change a bump of [`PERTURBATION_STEP`] causes at the gradient threshold.
/// Points without influence leave the output bit-for-bit unchanged.
pub const PERTURBATION_THRESHOLD: f64 = GRADIENT_THRESHOLD * PERTURBATION_STEP;

/// Uniform cloud with `config.in_features` random features in `[-1, 1)`.
pub fn probe_cloud(config: &ErwinConfig, n: usize, seed: u64) -> Result<PointCloud> {
    let base = generate(&SyntheticSpec::new(SyntheticKind::UniformBox, n, config.dim, seed))?;
    if config.in_features == 0 {
        return Ok(base);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let f = (0..n * config.in_features)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Ok(PointCloud::with_features(
        base.positions().to_vec(),
        config.dim,
        f,
        config.in_features,
    )?)
}

/// The model bound to one cloud, ready for repeated evaluation.
pub struct Probe<'m> {
    model: &'m Erwin,
    prep: Prepared,
    nbhd: Neighborhood,
    input: Tensor<f64>,
}

impl<'m> Probe<'m> {
    pub fn new(model: &'m Erwin, cloud: &CloudView<'_>) -> Result<Self> {
        let prep = model.prepare(cloud)?;
        let nbhd = model.neighborhood(&prep)?;
        let input = model.input_tensor(cloud)?;
        Ok(Probe {
            model,
            prep,
            nbhd,
            input,
        })
    }

    pub fn len(&self) -> usize {
        self.prep.num_points()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prep
    }

    pub fn neighborhood(&self) -> &Neighborhood {
        &self.nbhd
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.len() {
            return Err(Error::Argument(format!("target {target} out of range for {} points", self.len())).into());
        }
        Ok(())
    }

    /// Output row of `target` for the given input features.
    fn output_row(&self, input: &Tensor<f64>, target: usize) -> Result<Vec<f64>> {
        let tape = Tape::<f64>::new();
        let b = self.model.params.bind(&tape);
        let x = tape.constant(input.clone());
        let out = self
            .model
            .forward(&b, &self.prep, &self.nbhd, &x, ForwardOptions::default())?;
        Ok(out.out.gather_rows(&[target])?.data())
    }

    /// `max_k ‖∂out[target, k] / ∂x[i]‖∞` for every point `i`.
    pub fn gradient_magnitudes(&self, target: usize) -> Result<Vec<f64>> {
        self.check_target(target)?;
        let n = self.len();
        let feats = self.input.cols();
        let mut mag = vec![0.0f64; n];
        for k in 0..self.model.config.out_features {
            let tape = Tape::<f64>::new();
            let b = self.model.params.bind(&tape);
            let x = tape.param(self.input.clone());
            let out = self
                .model
                .forward(&b, &self.prep, &self.nbhd, &x, ForwardOptions::default())?;
            let y = out.out.gather_rows(&[target])?.slice_last(k, k + 1)?.sum()?;
            let grads = tape.backward(y)?;
            for (i, row) in grads.wrt(x).chunks(feats).enumerate() {
                let m = row.iter().fold(0.0f64, |a, g| a.max(g.abs()));
                mag[i] = mag[i].max(m);
            }
        }
        Ok(mag)
    }

    /// Points whose input gradient exceeds [`GRADIENT_THRESHOLD`].
    pub fn gradient_field(&self, target: usize) -> Result<Vec<bool>> {
        Ok(self
            .gradient_magnitudes(target)?
            .into_iter()
            .map(|m| m > GRADIENT_THRESHOLD)
            .collect())
    }

    /// Points for which bumping any single input feature by
    /// [`PERTURBATION_STEP`] moves the target's output by more than
    /// [`PERTURBATION_THRESHOLD`]. One forward pass per feature entry.
    pub fn perturbation_field(&self, target: usize) -> Result<Vec<bool>> {
        self.check_target(target)?;
        let base = self.output_row(&self.input, target)?;
        let feats = self.input.cols();
        let mut mask = vec![false; self.len()];
        let mut bumped = self.input.clone();
        for (i, m) in mask.iter_mut().enumerate() {
            for f in 0..feats {
                let idx = i * feats + f;
                let orig = bumped.data()[idx];
                bumped.data_mut()[idx] = orig + PERTURBATION_STEP;
                let row = self.output_row(&bumped, target)?;
                bumped.data_mut()[idx] = orig;
                if row
                    .iter()
                    .zip(&base)
                    .any(|(a, b)| (a - b).abs() > PERTURBATION_THRESHOLD)
                {
                    *m = true;
                    break;
                }
            }
        }
        Ok(mask)
    }
}

/// Points within `hops` steps of `target` when every point `i` receives
/// from `sources(i)`.
pub fn hop_set<'a>(n: usize, target: usize, hops: usize, sources: impl Fn(usize) -> &'a [usize]) -> Vec<bool> {
    let mut depth = vec![usize::MAX; n];
    let mut queue = VecDeque::from([target]);
    depth[target] = 0;
    while let Some(i) = queue.pop_front() {
        if depth[i] == hops {
            continue;
        }
        for &j in sources(i) {
            if depth[j] == usize::MAX {
                depth[j] = depth[i] + 1;
                queue.push_back(j);
            }
        }
    }
    depth.into_iter().map(|d| d != usize::MAX).collect()
}

pub fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|m| **m).count()
}

/// `a ⊆ b`.
pub fn is_subset(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(x, y)| !*x || *y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hop_set_on_a_path() {
        let next: Vec<Vec<usize>> = (0..5).map(|i| if i + 1 < 5 { vec![i + 1] } else { vec![] }).collect();
        assert_eq!(hop_set(5, 0, 2, |i| &next[i]), vec![true, true, true, false, false]);
        assert_eq!(hop_set(5, 3, 0, |i| &next[i]), vec![false, false, false, true, false]);
    }

    #[test]
    fn subset_relation() {
        assert!(is_subset(&[true, false], &[true, true]));
        assert!(!is_subset(&[true, true], &[true, false]));
    }
}
