//! Gated memory module: write attention over time, the gated item update,
//! read attention over items and retrieval.
//!
//! Memory items are rows of an `M×C` matrix and queries are rows of an
//! `L×C` (or batch-flattened `B·L×C`) matrix. The graph-level builders are
//! used by the model; the `Mat` wrappers evaluate the same builders on a
//! throwaway graph.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};

/// Prototype memory state: the `M×C` item matrix and its softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub items: Mat,
    pub tau: f64,
}

impl MemoryBank {
    pub fn new(items: Mat, tau: f64) -> Result<Self> {
        if items.nrows() == 0 || items.ncols() == 0 {
            return Err(Error::Config(
                "memory bank must have at least one item".into(),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        if items.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "memory items contain non-finite values".into(),
            ));
        }
        Ok(Self { items, tau })
    }

    pub fn len(&self) -> usize {
        self.items.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.items.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }
}

/// Result of one gated write.
#[derive(Debug, Clone)]
pub struct GatedWrite {
    pub items: Mat,
    /// Per-item, per-coordinate gate values ψ ∈ (0,1).
    pub gate: Mat,
    /// Attention-weighted query aggregate per item.
    pub aggregate: Mat,
}

/// `v[i,t] = softmax_t(⟨m_i, q_t⟩ / τ)`, an `M×L` matrix whose rows sum to one.
pub fn write_attention_var(g: &mut Graph, items: Var, queries: Var, tau: f64) -> Var {
    let logits = g.matmul_nt(items, queries);
    let scaled = g.scale(logits, 1.0 / tau);
    g.softmax_rows(scaled)
}

/// Returns `(new_items, gate, aggregate)` handles.
pub fn gated_write_var(
    g: &mut Graph,
    items: Var,
    gate_u: Var,
    gate_w: Var,
    queries: Var,
    write_weights: Var,
) -> (Var, Var, Var) {
    let aggregate = g.matmul(write_weights, queries);
    let from_items = g.matmul(items, gate_u);
    let from_queries = g.matmul(aggregate, gate_w);
    let pre = g.add(from_items, from_queries);
    let gate = g.sigmoid(pre);
    let keep = g.one_minus(gate);
    let kept = g.mul(keep, items);
    let written = g.mul(gate, aggregate);
    let new_items = g.add(kept, written);
    (new_items, gate, aggregate)
}

/// `w[t,i] = softmax_i(⟨m_i, q_t⟩ / τ)`, an `L×M` matrix whose rows sum to one.
pub fn read_attention_var(g: &mut Graph, items: Var, queries: Var, tau: f64) -> Var {
    let logits = g.matmul_nt(queries, items);
    let scaled = g.scale(logits, 1.0 / tau);
    g.softmax_rows(scaled)
}

/// `q̃_t = Σ_i w[t,i] m_i`.
pub fn retrieve_var(g: &mut Graph, read_weights: Var, items: Var) -> Var {
    g.matmul(read_weights, items)
}

fn check_dims(items: &Mat, queries: &Mat) -> Result<()> {
    if items.nrows() == 0 {
        return Err(Error::Data("memory bank is empty".into()));
    }
    if items.ncols() != queries.ncols() {
        return Err(Error::shape(
            format!("queries with {} features", items.ncols()),
            format!("{} features", queries.ncols()),
        ));
    }
    Ok(())
}

fn check_logits(items: &Mat, queries: &Mat, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let dots = items.dot(&queries.t());
    if dots.iter().any(|d| !(d / tau).is_finite()) {
        return Err(Error::Numeric("non-finite memory/query dot product".into()));
    }
    Ok(())
}

pub fn write_attention(items: &Mat, queries: &Mat, tau: f64) -> Result<Mat> {
    check_dims(items, queries)?;
    check_logits(items, queries, tau)?;
    let mut g = Graph::new();
    let m = g.constant(items.clone());
    let q = g.constant(queries.clone());
    let v = write_attention_var(&mut g, m, q, tau);
    Ok(g.value(v).clone())
}

pub fn gated_write(
    items: &Mat,
    gate_u: &Mat,
    gate_w: &Mat,
    queries: &Mat,
    write_weights: &Mat,
) -> Result<GatedWrite> {
    check_dims(items, queries)?;
    let c = items.ncols();
    for (name, p) in [("U", gate_u), ("W", gate_w)] {
        if p.dim() != (c, c) {
            return Err(Error::shape(
                format!("gate projection {name} of {c}×{c}"),
                format!("{:?}", p.dim()),
            ));
        }
    }
    if write_weights.dim() != (items.nrows(), queries.nrows()) {
        return Err(Error::shape(
            format!("write weights of {}×{}", items.nrows(), queries.nrows()),
            format!("{:?}", write_weights.dim()),
        ));
    }
    let mut g = Graph::new();
    let m = g.constant(items.clone());
    let u = g.constant(gate_u.clone());
    let w = g.constant(gate_w.clone());
    let q = g.constant(queries.clone());
    let v = g.constant(write_weights.clone());
    let (new_items, gate, aggregate) = gated_write_var(&mut g, m, u, w, q, v);
    Ok(GatedWrite {
        items: g.value(new_items).clone(),
        gate: g.value(gate).clone(),
        aggregate: g.value(aggregate).clone(),
    })
}

pub fn read_attention(items: &Mat, queries: &Mat, tau: f64) -> Result<Mat> {
    check_dims(items, queries)?;
    check_logits(items, queries, tau)?;
    let mut g = Graph::new();
    let m = g.constant(items.clone());
    let q = g.constant(queries.clone());
    let w = read_attention_var(&mut g, m, q, tau);
    Ok(g.value(w).clone())
}

pub fn retrieve(items: &Mat, read_weights: &Mat) -> Result<Mat> {
    if read_weights.ncols() != items.nrows() {
        return Err(Error::shape(
            format!("read weights with {} columns", items.nrows()),
            format!("{} columns", read_weights.ncols()),
        ));
    }
    let sums = read_weights.sum_axis(Axis(1));
    if sums.iter().any(|s| (s - 1.0).abs() > 1e-6) {
        return Err(Error::Contract("read weight rows must sum to 1".into()));
    }
    Ok(read_weights.dot(items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn write_attention_uniform_and_singleton() {
        let items = array![[0.0, 0.0], [1.0, 0.0]];
        let q = array![[0.0, 3.0], [0.0, -2.0], [0.0, 1.0]];
        // item 0 is orthogonal to every query, item 1 too
        let v = write_attention(&items, &q, 0.1).unwrap();
        for x in v.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let v = write_attention(&items, &array![[0.4, 0.2]], 0.1).unwrap();
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn write_attention_two_step_values() {
        // dots (1, 2) at tau 0.1 -> logits (10, 20)
        let items = array![[1.0]];
        let q = array![[1.0], [2.0]];
        let v = write_attention(&items, &q, 0.1).unwrap();
        let e = (-10.0f64).exp();
        let expected0 = e / (1.0 + e);
        assert!((v[[0, 0]] - expected0).abs() < 1e-15);
        assert!((v[[0, 0]] - 4.5398e-5).abs() < 1e-9);
        assert!((v[[0, 1]] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn gated_write_examples() {
        let m = array![[2.0, -1.0]];
        let u = array![[0.3, 0.1], [-0.2, 0.5]];
        let w = array![[0.7, -0.4], [0.2, 0.9]];
        let q = array![[2.0, -1.0]];
        let v = array![[1.0]];
        // aggregate equals the item: fixed point for any gate
        let out = gated_write(&m, &u, &w, &q, &v).unwrap();
        assert_eq!(out.items, m);

        let zero = array![[0.0]];
        let out = gated_write(&zero, &zero, &zero, &array![[1.0]], &array![[1.0]]).unwrap();
        assert_eq!(out.gate[[0, 0]], 0.5);
        assert_eq!(out.items[[0, 0]], 0.5);
    }

    #[test]
    fn read_attention_examples() {
        let w = read_attention(&array![[3.0, 1.0]], &array![[1.0, 1.0], [-2.0, 0.5]], 0.1).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));

        let tau = 0.1;
        // logits (0, ln 9) -> (0.1, 0.9)
        let items = array![[0.0], [9f64.ln() * tau]];
        let w = read_attention(&items, &array![[1.0]], tau).unwrap();
        assert!((w[[0, 0]] - 0.1).abs() < 1e-12);
        assert!((w[[0, 1]] - 0.9).abs() < 1e-12);

        let eq = read_attention(&array![[1.0, 0.0], [0.0, 1.0]], &array![[2.0, 2.0]], tau).unwrap();
        assert!((eq[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn retrieve_examples() {
        let items = array![[0.0, 0.0], [4.0, 8.0]];
        assert_eq!(
            retrieve(&items, &array![[0.25, 0.75]]).unwrap(),
            array![[3.0, 6.0]]
        );
        assert_eq!(
            retrieve(&items, &array![[0.0, 1.0]]).unwrap(),
            array![[4.0, 8.0]]
        );
        assert_eq!(
            retrieve(&items, &array![[0.5, 0.5]]).unwrap(),
            array![[2.0, 4.0]]
        );
        assert!(retrieve(&items, &array![[0.5, 0.6]]).is_err());
    }

    #[test]
    fn rejects_shape_and_overflow() {
        assert!(read_attention(&array![[1.0, 2.0]], &array![[1.0]], 0.1).is_err());
        assert!(write_attention(&array![[1e308]], &array![[1e308]], 0.1).is_err());
        assert!(read_attention(&array![[1.0]], &array![[1.0]], 0.0).is_err());
    }

    #[test]
    fn sharper_temperature_raises_row_max() {
        let items = array![[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2]];
        let q = array![[1.0, 0.5], [-0.3, 0.8]];
        let mut prev = [0.0; 2];
        for tau in [2.0, 1.0, 0.5, 0.1, 0.01] {
            let w = read_attention(&items, &q, tau).unwrap();
            for (t, row) in w.rows().into_iter().enumerate() {
                let mx = row.iter().copied().fold(0.0, f64::max);
                assert!(mx >= prev[t] - 1e-15);
                prev[t] = mx;
            }
        }
    }
}
