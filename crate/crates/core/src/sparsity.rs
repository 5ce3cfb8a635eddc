//! Receptive-field activation vectors (RFAVs) and their entropies.
//!
//! A layer with `D` filters produces a `D×A×B` linear (pre-nonlinearity)
//! activation. The `D` channel values at spatial position `(a, b)` form the
//! RFAV with linear index `k = a·B + b`. Its entropy is the Shannon entropy,
//! in nats, of the softmax over those `D` values: near 0 when one filter
//! dominates (sparse) and `ln D` when all filters respond equally. Dense
//! layers are viewed as `D×1×1`, i.e. a single receptive field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// One sample's linear activations for one layer, viewed as `R = A·B` RFAVs.
#[derive(Clone, Debug, PartialEq)]
pub struct RfavField {
    pub layer_id: String,
    activations: Tensor,
}

impl RfavField {
    /// Accepts `D×A×B` activations, or a length-`D` vector for dense layers.
    pub fn new(layer_id: impl Into<String>, activations: Tensor) -> Result<Self> {
        let activations = match activations.rank() {
            1 => {
                let d = activations.len();
                activations.reshape([d, 1, 1])?
            }
            3 => activations,
            _ => {
                return Err(Error::invalid(format!(
                    "RFAV field needs D×A×B activations, got {:?}",
                    activations.shape()
                )))
            }
        };
        if activations.shape()[0] < 2 {
            return Err(Error::invalid(
                "RFAV entropy is degenerate for fewer than two channels",
            ));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            activations,
        })
    }

    pub fn channels(&self) -> usize {
        self.activations.shape()[0]
    }

    /// `(A, B)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.activations.shape()[1], self.activations.shape()[2])
    }

    pub fn receptive_fields(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn activations(&self) -> &Tensor {
        &self.activations
    }

    /// The RFAV at linear index `k = a·B + b`.
    pub fn rfav(&self, k: usize) -> Vec<f64> {
        let r = self.receptive_fields();
        (0..self.channels())
            .map(|d| self.activations.data()[d * r + k])
            .collect()
    }
}

/// Splits `D×A×B` linear activations into `R` vectors of dimension `D`.
pub fn rfav_extract(linear_activations: &Tensor) -> Result<Vec<Vec<f64>>> {
    let field = RfavField::new("", linear_activations.clone())?;
    Ok((0..field.receptive_fields())
        .map(|k| field.rfav(k))
        .collect())
}

/// Entropy (nats) of `softmax(rfav)`, in `[0, ln D]`.
pub fn rfav_entropy(rfav: &[f64]) -> Result<f64> {
    if rfav.is_empty() {
        return Err(Error::invalid("entropy of an empty RFAV"));
    }
    if rfav.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "RFAV component".into(),
        });
    }
    let mut p = vec![0.0; rfav.len()];
    kernels::softmax_into(rfav, &mut p);
    Ok(kernels::entropy_of_probs(&p))
}

/// `e^H`: the effective number of active channels.
pub fn perplexity(entropy: f64) -> Result<f64> {
    if entropy.is_nan() || entropy < 0.0 {
        return Err(Error::invalid(format!(
            "entropy {entropy} must be non-negative"
        )));
    }
    Ok(entropy.exp())
}

/// Grid of RFAV entropies for one layer and one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityHeatmap {
    pub layer_id: String,
    pub epoch: i64,
    /// Channel count `D`; the maximum cell value is `ln D`.
    pub channels: usize,
    /// `A` rows of `B` entropies.
    pub grid: Vec<Vec<f64>>,
}

impl SparsityHeatmap {
    pub fn max_entropy(&self) -> f64 {
        (self.channels as f64).ln()
    }

    pub fn mean(&self) -> f64 {
        let n: usize = self.grid.iter().map(Vec::len).sum();
        self.grid.iter().flatten().sum::<f64>() / n as f64
    }
}

pub fn sparsity_heatmap(field: &RfavField, epoch: i64) -> Result<SparsityHeatmap> {
    let (a, b) = field.grid();
    let grid = (0..a)
        .map(|row| {
            (0..b)
                .map(|col| rfav_entropy(&field.rfav(row * b + col)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SparsityHeatmap {
        layer_id: field.layer_id.clone(),
        epoch,
        channels: field.channels(),
        grid,
    })
}

/// All `R` RFAV entropies of a field in `k` order.
pub fn field_entropies(field: &RfavField) -> Result<Vec<f64>> {
    (0..field.receptive_fields())
        .map(|k| rfav_entropy(&field.rfav(k)))
        .collect()
}

/// Mean RFAV entropy over every receptive field of every monitor sample.
pub fn mean_entropy(fields: &[RfavField]) -> Result<f64> {
    if fields.is_empty() {
        return Err(Error::invalid("mean entropy over an empty monitor set"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for field in fields {
        for h in field_entropies(field)? {
            total += h;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-sample entropies from a batched `N×D×A×B` (or `N×D`) activation
/// tensor, returned as `N` vectors of `R` entropies each.
pub fn batch_entropies(activations: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d, r) = match *activations.shape() {
        [n, d] => (n, d, 1),
        [n, d, a, b] => (n, d, a * b),
        _ => {
            return Err(Error::invalid(format!(
                "expected batched activations, got {:?}",
                activations.shape()
            )))
        }
    };
    if d < 2 {
        return Err(Error::invalid("RFAV entropy needs at least two channels"));
    }
    let mut rfav = vec![0.0; d];
    let mut p = vec![0.0; d];
    Ok((0..n)
        .map(|s| {
            let base = s * d * r;
            (0..r)
                .map(|k| {
                    for (l, v) in rfav.iter_mut().enumerate() {
                        *v = activations.data()[base + l * r + k];
                    }
                    kernels::softmax_into(&rfav, &mut p);
                    kernels::entropy_of_probs(&p)
                })
                .collect()
        })
        .collect())
}
