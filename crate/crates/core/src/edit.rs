//! Embedding arithmetic for the editing stage.
//!
//! Vector subtraction moves the optimized source embedding toward the
//! target embedding by an edit strength γ:
//!
//! ```text
//! e_edit = e_opt + γ · (e_tgt − e_opt)
//! ```
//!
//! γ = 0 reproduces the input image, γ = 1 is the pure target prompt and the
//! default sweep straddles 1 on both sides.
//!
//! Vector projection splits `e_tgt` into its component along `e_opt` and
//! the orthogonal residual, over the flattened `L·D` vector, and recombines
//! them with two weights:
//!
//! ```text
//! e_par  = (⟨e_tgt, e_opt⟩ / ⟨e_opt, e_opt⟩) · e_opt
//! e_orth = e_tgt − e_par
//! result = α · e_opt + β · e_orth
//! ```
//!
//! All arithmetic runs in `f64` and is rounded once to `f32` at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TextEmbedding;

/// Reference embeddings with a smaller norm than this cannot anchor a
/// projection.
pub const MIN_REFERENCE_NORM: f64 = 1e-12;

/// Strictly increasing, finite, non-empty list of edit strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GammaGrid(Vec<f64>);

impl GammaGrid {
    pub const DEFAULT_LO: f64 = 0.8;
    pub const DEFAULT_HI: f64 = 1.6;
    pub const DEFAULT_COUNT: usize = 8;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("grid must not be empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("grid values must be finite"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("grid values must be strictly increasing"));
        }
        Ok(GammaGrid(values))
    }

    /// 0.8 to 1.6 in eight steps.
    pub fn default_grid() -> Self {
        gamma_grid(Self::DEFAULT_LO, Self::DEFAULT_HI, Self::DEFAULT_COUNT)
            .expect("default grid parameters are valid")
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for GammaGrid {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        GammaGrid::new(values)
    }
}

impl From<GammaGrid> for Vec<f64> {
    fn from(grid: GammaGrid) -> Self {
        grid.0
    }
}

/// `n` evenly spaced values from `lo` to `hi`, both endpoints included
/// exactly.
pub fn gamma_grid(lo: f64, hi: f64, n: usize) -> Result<GammaGrid> {
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::contract(format!("grid needs finite lo < hi, got {lo}..{hi}")));
    }
    if n < 2 {
        return Err(Error::contract(format!("grid needs at least two values, got {n}")));
    }
    let last = (n - 1) as f64;
    let values = (0..n)
        .map(|i| match i {
            0 => lo,
            _ if i == n - 1 => hi,
            _ => lo + (hi - lo) * (i as f64 / last),
        })
        .collect();
    GammaGrid::new(values)
}

/// `e_opt + γ · (e_tgt − e_opt)`, entrywise.
pub fn vector_subtract(e_opt: &TextEmbedding, e_tgt: &TextEmbedding, gamma: f64) -> Result<TextEmbedding> {
    e_opt.check_same_shape(e_tgt)?;
    if !gamma.is_finite() {
        return Err(Error::contract("gamma must be finite"));
    }
    let data = e_opt
        .data()
        .iter()
        .zip(e_tgt.data())
        .map(|(&o, &t)| {
            let (o, t) = (o as f64, t as f64);
            (o + gamma * (t - o)) as f32
        })
        .collect();
    TextEmbedding::new(e_opt.tokens(), e_opt.dims(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCoefficients {
    /// Weight on the `e_opt` direction.
    pub alpha: f64,
    /// Weight on the residual orthogonal to `e_opt`.
    pub beta: f64,
}

impl ProjectionCoefficients {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) {
            return Err(Error::contract("projection coefficients must be finite"));
        }
        Ok(ProjectionCoefficients { alpha, beta })
    }
}

/// Whether projection treats the whole matrix as one vector or projects
/// each token row separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionScope {
    #[default]
    Flattened,
    PerToken,
}

/// The parallel and orthogonal parts of `e_tgt` relative to `e_opt`, in
/// `f64`.
#[derive(Clone, Debug)]
pub struct Decomposition {
    /// `⟨e_tgt, e_opt⟩ / ⟨e_opt, e_opt⟩` (one entry per token for
    /// [`ProjectionScope::PerToken`]).
    pub ratios: Vec<f64>,
    pub parallel: Vec<f64>,
    pub orthogonal: Vec<f64>,
}

pub fn decompose(e_opt: &TextEmbedding, e_tgt: &TextEmbedding, scope: ProjectionScope) -> Result<Decomposition> {
    e_opt.check_same_shape(e_tgt)?;
    let chunk = match scope {
        ProjectionScope::Flattened => e_opt.data().len(),
        ProjectionScope::PerToken => e_opt.dims(),
    };
    let mut out = Decomposition {
        ratios: Vec::new(),
        parallel: Vec::with_capacity(e_opt.data().len()),
        orthogonal: Vec::with_capacity(e_opt.data().len()),
    };
    for (o, t) in e_opt.data().chunks(chunk).zip(e_tgt.data().chunks(chunk)) {
        let oo: f64 = o.iter().map(|&x| x as f64 * x as f64).sum();
        if oo.sqrt() <= MIN_REFERENCE_NORM {
            return Err(Error::DegenerateReference { norm: oo.sqrt() });
        }
        let to: f64 = o.iter().zip(t).map(|(&a, &b)| a as f64 * b as f64).sum();
        let ratio = to / oo;
        out.ratios.push(ratio);
        for (&oi, &ti) in o.iter().zip(t) {
            let par = ratio * oi as f64;
            out.parallel.push(par);
            out.orthogonal.push(ti as f64 - par);
        }
    }
    Ok(out)
}

/// `α · e_opt + β · e_orth` over the flattened embedding.
pub fn vector_project(
    e_opt: &TextEmbedding,
    e_tgt: &TextEmbedding,
    coeffs: ProjectionCoefficients,
) -> Result<TextEmbedding> {
    vector_project_scoped(e_opt, e_tgt, coeffs, ProjectionScope::Flattened)
}

pub fn vector_project_scoped(
    e_opt: &TextEmbedding,
    e_tgt: &TextEmbedding,
    coeffs: ProjectionCoefficients,
    scope: ProjectionScope,
) -> Result<TextEmbedding> {
    let ProjectionCoefficients { alpha, beta } = ProjectionCoefficients::new(coeffs.alpha, coeffs.beta)?;
    let d = decompose(e_opt, e_tgt, scope)?;
    let data = e_opt
        .data()
        .iter()
        .zip(&d.orthogonal)
        .map(|(&o, &orth)| (alpha * o as f64 + beta * orth) as f32)
        .collect();
    TextEmbedding::new(e_opt.tokens(), e_opt.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(rows: &[&[f32]]) -> TextEmbedding {
        TextEmbedding::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn subtraction_endpoints_and_arithmetic() {
        let o = emb(&[&[0.0, 0.0]]);
        let t = emb(&[&[2.0, 4.0]]);
        assert_eq!(vector_subtract(&o, &t, 0.0).unwrap(), o);
        assert_eq!(vector_subtract(&o, &t, 1.0).unwrap(), t);
        assert_eq!(vector_subtract(&o, &t, 1.5).unwrap(), emb(&[&[3.0, 6.0]]));
        assert!(vector_subtract(&o, &t, f64::NAN).is_err());
        assert!(vector_subtract(&o, &emb(&[&[1.0]]), 1.0).is_err());
    }

    #[test]
    fn default_grid_values() {
        let g = GammaGrid::default_grid();
        let expected = [0.8, 0.9143, 1.0286, 1.1429, 1.2571, 1.3714, 1.4857, 1.6];
        assert_eq!(g.len(), 8);
        assert_eq!(g.values()[0], 0.8);
        assert_eq!(g.values()[7], 1.6);
        for (v, e) in g.values().iter().zip(expected) {
            assert_eq!(format!("{v:.4}"), format!("{e:.4}"));
        }
    }

    #[test]
    fn grid_preconditions() {
        assert_eq!(gamma_grid(0.0, 1.0, 2).unwrap().values(), &[0.0, 1.0]);
        assert!(gamma_grid(1.0, 1.0, 8).is_err());
        assert!(gamma_grid(2.0, 1.0, 8).is_err());
        assert!(gamma_grid(0.0, 1.0, 1).is_err());
        assert!(GammaGrid::new(vec![1.0, 1.0]).is_err());
        assert!(GammaGrid::new(vec![]).is_err());
        assert!(serde_json::from_str::<GammaGrid>("[2.0, 1.0]").is_err());
        assert_eq!(serde_json::from_str::<GammaGrid>("[0.5]").unwrap().values(), &[0.5]);
    }

    #[test]
    fn projection_hand_cases() {
        let o = emb(&[&[1.0, 0.0]]);
        let t = emb(&[&[1.0, 1.0]]);
        let r = vector_project(&o, &t, ProjectionCoefficients::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(r, emb(&[&[1.0, 1.0]]));
        let d = decompose(&o, &t, ProjectionScope::Flattened).unwrap();
        assert_eq!(d.orthogonal, vec![0.0, 1.0]);

        // alpha = <t,o>/<o,o>, beta = 1 reconstructs the target.
        let o = emb(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let t = emb(&[&[1.0, 3.0], &[-2.0, 0.5]]);
        let ratio = decompose(&o, &t, ProjectionScope::Flattened).unwrap().ratios[0];
        let r = vector_project(&o, &t, ProjectionCoefficients::new(ratio, 1.0).unwrap()).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn degenerate_reference() {
        let o = emb(&[&[0.0, 0.0]]);
        let t = emb(&[&[1.0, 1.0]]);
        assert!(matches!(
            vector_project(&o, &t, ProjectionCoefficients { alpha: 1.0, beta: 1.0 }),
            Err(Error::DegenerateReference { .. })
        ));
    }

    #[test]
    fn per_token_projection_is_rowwise() {
        let o = emb(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let t = emb(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let r = vector_project_scoped(&o, &t, ProjectionCoefficients { alpha: 0.0, beta: 1.0 }, ProjectionScope::PerToken)
            .unwrap();
        assert_eq!(r, emb(&[&[0.0, 4.0], &[5.0, 0.0]]));
    }

    fn embedding_strategy() -> impl Strategy<Value = (TextEmbedding, TextEmbedding)> {
        (prop::collection::vec(-3.0f32..3.0, 12), prop::collection::vec(-3.0f32..3.0, 12)).prop_map(|(a, b)| {
            (TextEmbedding::new(3, 4, a).unwrap(), TextEmbedding::new(3, 4, b).unwrap())
        })
    }

    proptest! {
        #[test]
        fn subtraction_is_linear_in_gamma((o, t) in embedding_strategy(), g1 in -2.0f64..2.0, g2 in -2.0f64..2.0) {
            let a = vector_subtract(&o, &t, g1).unwrap();
            let b = vector_subtract(&o, &t, g2).unwrap();
            let z = vector_subtract(&o, &t, 0.0).unwrap();
            let s = vector_subtract(&o, &t, g1 + g2).unwrap();
            for i in 0..12 {
                let lhs = a.data()[i] as f64 + b.data()[i] as f64 - z.data()[i] as f64;
                prop_assert!((lhs - s.data()[i] as f64).abs() <= 1e-6 * (1.0 + lhs.abs()));
            }
        }

        #[test]
        fn projection_matches_a_direct_formula((o, t) in embedding_strategy(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            prop_assume!(o.data().iter().any(|v| v.abs() > 1e-3));
            let r = vector_project(&o, &t, ProjectionCoefficients { alpha, beta }).unwrap();
            let oo: f64 = o.data().iter().map(|&x| (x as f64).powi(2)).sum();
            let to: f64 = o.data().iter().zip(t.data()).map(|(&x, &y)| x as f64 * y as f64).sum();
            for i in 0..12 {
                let orth = t.data()[i] as f64 - to / oo * o.data()[i] as f64;
                let expected = (alpha * o.data()[i] as f64 + beta * orth) as f32;
                prop_assert_eq!(r.data()[i], expected);
            }
        }

        #[test]
        fn grid_has_exact_endpoints_and_constant_spacing(lo in -5.0f64..5.0, width in 0.01f64..5.0, n in 2usize..40) {
            let hi = lo + width;
            let g = gamma_grid(lo, hi, n).unwrap();
            prop_assert_eq!(g.values()[0], lo);
            prop_assert_eq!(g.values()[n - 1], hi);
            let step = (hi - lo) / (n - 1) as f64;
            for w in g.values().windows(2) {
                prop_assert!(((w[1] - w[0]) - step).abs() <= 1e-12);
            }
        }
    }
}
