// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy text-basis description of a single head's output.
//!
//! The head's centered contributions are reduced to their top-`rank`
//! principal subspace; texts are then picked one at a time by the variance
//! of the contributions along the text direction, deflating both the
//! contributions and the dictionary after each pick.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::decomposition::HeadId;
use crate::error::{DecompositionError, TextSpanError};
use crate::store::{HeadContributionStore, PrototypeSet, TextCategory};

/// Dictionary residuals shorter than this are dropped.
pub const RESIDUAL_EPS: f64 = 1e-8;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_RANK: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectedText {
    pub index: usize,
    pub name: String,
    pub category: TextCategory,
    pub attribute: Option<String>,
    pub value: Option<String>,
    /// Variance of the deflated contributions along the text direction.
    pub variance: f64,
    /// `variance` over the total variance of the rank-reduced contributions.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextSpanResult {
    pub head: HeadId,
    pub rank: usize,
    pub total_variance: f64,
    pub texts: Vec<SelectedText>,
    /// Every selected text explains zero variance.
    pub degenerate: bool,
    /// The dictionary ran out before `k` texts were chosen.
    pub truncated: bool,
}

/// Raw greedy output over matrices, independent of the store.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedySelection {
    pub rank: usize,
    pub total_variance: f64,
    pub indices: Vec<usize>,
    pub variances: Vec<f64>,
    /// Unit directions actually used for deflation, one per pick.
    pub directions: Vec<DVector<f64>>,
    pub truncated: bool,
}

/// Rank-`rank` approximation of the column-centered `c` (rows are samples).
pub fn centered_low_rank(c: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let n = c.nrows();
    let mut centered = c.clone();
    if n > 0 {
        for mut col in centered.column_iter_mut() {
            let mean = col.sum() / n as f64;
            col.add_scalar_mut(-mean);
        }
    }
    let d = c.ncols();
    let r = rank.min(n).min(d);
    if r == d {
        return centered;
    }
    // Projection onto the top right singular vectors.
    let m = faer::Mat::<f64>::from_fn(n, d, |i, j| centered[(i, j)]);
    let svd = m.thin_svd().expect("SVD of a finite matrix converges");
    let sigma = svd.S().column_vector();
    let v = svd.V();
    let mut order: Vec<usize> = (0..sigma.nrows()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::<f64>::zeros(d, r);
    for (j, &i) in order.iter().take(r).enumerate() {
        for row in 0..d {
            basis[(row, j)] = v[(row, i)];
        }
    }
    let projector = &basis * basis.transpose();
    centered * projector
}

/// Greedy selection of up to `k` rows of `dictionary` (texts x d) for the
/// contributions `c` (images x d).
pub fn greedy_select(
    c: &DMatrix<f64>,
    dictionary: &DMatrix<f64>,
    k: usize,
    rank: usize,
) -> Result<GreedySelection, TextSpanError> {
    if k == 0 {
        return Err(TextSpanError::ZeroK);
    }
    if rank == 0 {
        return Err(TextSpanError::ZeroRank);
    }
    if dictionary.nrows() == 0 {
        return Err(TextSpanError::EmptyDictionary);
    }
    if dictionary.ncols() != c.ncols() {
        return Err(TextSpanError::Dimension {
            dict: dictionary.ncols(),
            store: c.ncols(),
        });
    }
    let n = c.nrows().max(1) as f64;
    let reduced = centered_low_rank(c, rank);
    let used_rank = rank.min(c.nrows()).min(c.ncols());
    // Variance along a unit t is t' S t with S the covariance.
    let mut cov = reduced.transpose() * &reduced / n;
    let total_variance = cov.trace();
    let mut dict = dictionary.clone();
    let mut alive: Vec<bool> = dict.row_iter().map(|r| r.norm() >= RESIDUAL_EPS).collect();

    let mut out = GreedySelection {
        rank: used_rank,
        total_variance,
        indices: Vec::new(),
        variances: Vec::new(),
        directions: Vec::new(),
        truncated: false,
    };
    while out.indices.len() < k {
        let projected = &dict * &cov;
        let mut best: Option<(usize, f64)> = None;
        for (i, live) in alive.iter().enumerate() {
            if !live {
                continue;
            }
            let row = dict.row(i);
            let norm2 = row.norm_squared();
            let score = (projected.row(i).dot(&row) / norm2).max(0.0);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let Some((pick, variance)) = best else {
            out.truncated = true;
            break;
        };
        let u: DVector<f64> = dict.row(pick).transpose().normalize();
        out.indices.push(pick);
        out.variances.push(variance);

        // Deflate the covariance: S <- P S P with P = I - u u'.
        let su = &cov * &u;
        let usu = u.dot(&su);
        let outer = &su * u.transpose();
        cov -= &outer + outer.transpose();
        cov += &u * u.transpose() * usu;

        // Deflate the dictionary and drop vanishing residuals.
        let coeffs = &dict * &u;
        dict -= &coeffs * u.transpose();
        alive[pick] = false;
        for (i, live) in alive.iter_mut().enumerate() {
            if *live && dict.row(i).norm() < RESIDUAL_EPS {
                *live = false;
            }
        }
        out.directions.push(u);
    }
    Ok(out)
}

fn head_matrix(store: &HeadContributionStore, head: HeadId) -> DMatrix<f64> {
    let n = store.n_images();
    let d = store.embed_dim();
    DMatrix::from_fn(n, d, |i, j| store.head(i, head.layer, head.head)[j] as f64)
}

fn dictionary_matrix(prototypes: &PrototypeSet) -> DMatrix<f64> {
    let d = prototypes.embed_dim();
    DMatrix::from_row_slice(
        prototypes.n_texts(),
        d,
        &prototypes
            .dictionary_rows()
            .iter()
            .map(|&x| x as f64)
            .collect::<Vec<_>>(),
    )
}

/// Describes `head` by up to `k` dictionary texts.
pub fn textspan(
    store: &HeadContributionStore,
    head: HeadId,
    prototypes: &PrototypeSet,
    k: usize,
    rank: usize,
) -> Result<TextSpanResult, TextSpanError> {
    head.check(store.n_layers(), store.n_heads())?;
    if store.n_images() == 0 {
        return Err(DecompositionError::EmptyStore.into());
    }
    if prototypes.embed_dim() != store.embed_dim() {
        return Err(TextSpanError::Dimension {
            dict: prototypes.embed_dim(),
            store: store.embed_dim(),
        });
    }
    if prototypes.n_texts() == 0 {
        return Err(TextSpanError::EmptyDictionary);
    }
    let sel = greedy_select(&head_matrix(store, head), &dictionary_matrix(prototypes), k, rank)?;
    let entries = prototypes.dictionary();
    let texts: Vec<SelectedText> = sel
        .indices
        .iter()
        .zip(&sel.variances)
        .map(|(&i, &variance)| SelectedText {
            index: i,
            name: entries[i].name.clone(),
            category: entries[i].category,
            attribute: entries[i].attribute.clone(),
            value: entries[i].value.clone(),
            variance,
            fraction: if sel.total_variance > 0.0 {
                variance / sel.total_variance
            } else {
                0.0
            },
        })
        .collect();
    Ok(TextSpanResult {
        head,
        rank: sel.rank,
        total_variance: sel.total_variance,
        degenerate: texts.iter().all(|t| t.variance == 0.0),
        truncated: sel.truncated,
        texts,
    })
}

/// True when some selected text is a demographic text of `attribute`.
pub fn corroborate(result: &TextSpanResult, attribute: &str) -> bool {
    result
        .texts
        .iter()
        .any(|t| t.category == TextCategory::Demographic && t.attribute.as_deref() == Some(attribute))
}
