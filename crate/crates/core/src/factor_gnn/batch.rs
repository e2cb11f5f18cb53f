//! Index structures for running the network on a disjoint union of graphs.

use std::sync::Arc;

use crate::factor_graph::{Family, FactorGraph, FactorType};
use crate::tensor_nn::{Segments, Tensor};

use super::GnnError;

/// Factors and edges of one factor type, stored contiguously.
#[derive(Clone, Debug)]
pub struct TypeBlock {
    pub ftype: FactorType,
    /// Index into the family's factor-type list.
    pub type_index: usize,
    pub f_start: usize,
    pub f_count: usize,
    pub e_start: usize,
    pub e_count: usize,
    /// `f_count x eta_len` natural parameters.
    pub eta: Tensor,
    /// Per edge: factor index local to this block.
    pub edge_factor: Arc<[usize]>,
    /// Per edge: global variable index.
    pub edge_var: Arc<[usize]>,
}

/// Disjoint union of same-family graphs. Factors and edges are ordered by
/// type, then graph, then position within the graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub family: Family,
    pub n_vars: usize,
    pub n_factors: usize,
    pub n_edges: usize,
    /// `var_offsets[g]..var_offsets[g + 1]` are the variables of graph `g`.
    pub var_offsets: Vec<usize>,
    pub blocks: Vec<TypeBlock>,
    /// Edges grouped by target factor.
    pub by_factor: Arc<Segments>,
    /// Edges grouped by target variable.
    pub by_var: Arc<Segments>,
}

impl GraphBatch {
    pub fn new(graphs: &[&FactorGraph]) -> Result<Self, GnnError> {
        let family = graphs.first().ok_or(GnnError::EmptyBatch)?.family();
        if let Some(g) = graphs.iter().find(|g| g.family() != family) {
            return Err(GnnError::FamilyMismatch { expected: family, got: g.family() });
        }
        let mut var_offsets = vec![0];
        for g in graphs {
            var_offsets.push(var_offsets.last().unwrap() + g.n_variables());
        }
        let n_vars = *var_offsets.last().unwrap();

        let mut blocks = Vec::new();
        let (mut f_total, mut e_total) = (0usize, 0usize);
        let mut factor_of_edge = Vec::new();
        let mut var_of_edge = Vec::new();
        for (type_index, &ftype) in family.factor_types().iter().enumerate() {
            let (f_start, e_start) = (f_total, e_total);
            let mut eta = Vec::new();
            let mut edge_factor = Vec::new();
            let mut edge_var = Vec::new();
            let mut local = 0usize;
            for (gi, g) in graphs.iter().enumerate() {
                for f in g.factors().iter().filter(|f| f.ftype == ftype) {
                    eta.extend_from_slice(&f.eta);
                    for &m in &f.members {
                        edge_factor.push(local);
                        edge_var.push(var_offsets[gi] + m);
                        factor_of_edge.push(f_start + local);
                        var_of_edge.push(var_offsets[gi] + m);
                    }
                    local += 1;
                }
            }
            f_total += local;
            e_total += edge_var.len();
            blocks.push(TypeBlock {
                ftype,
                type_index,
                f_start,
                f_count: local,
                e_start,
                e_count: edge_var.len(),
                eta: Tensor::matrix(local, ftype.eta_len(), eta)?,
                edge_factor: edge_factor.into(),
                edge_var: edge_var.into(),
            });
        }
        Ok(Self {
            family,
            n_vars,
            n_factors: f_total,
            n_edges: e_total,
            var_offsets,
            by_factor: Arc::new(Segments::from_assignment(&factor_of_edge, f_total)),
            by_var: Arc::new(Segments::from_assignment(&var_of_edge, n_vars)),
            blocks,
        })
    }

    pub fn single(g: &FactorGraph) -> Result<Self, GnnError> {
        Self::new(&[g])
    }

    pub fn n_graphs(&self) -> usize {
        self.var_offsets.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::build_spin;

    #[test]
    fn blocks_are_type_contiguous() {
        let a = build_spin(&[[0.0; 3]; 3], &[(0, 1, 2, 1.0)], 0.5).unwrap();
        let b = build_spin(&[[0.0; 3]; 4], &[(0, 1, 2, 1.0), (1, 2, 3, 1.0)], 0.5).unwrap();
        let batch = GraphBatch::new(&[&a, &b]).unwrap();
        assert_eq!((batch.n_vars, batch.n_factors, batch.n_edges), (7, 10, 16));
        assert_eq!(batch.blocks[0].f_count, 7);
        assert_eq!(batch.blocks[1].f_start, 7);
        assert_eq!(&batch.blocks[1].edge_var[..], &[0, 1, 2, 3, 4, 5, 4, 5, 6]);
        assert_eq!(batch.by_var.members(4).len(), 3);
    }

    #[test]
    fn mixed_families_rejected() {
        let a = build_spin(&[[0.0; 3]], &[], 0.5).unwrap();
        let b = crate::factor_graph::build_continuous(&[[0.0; 3]], &[], &[], 1.0, 0.3).unwrap();
        assert!(matches!(GraphBatch::new(&[&a, &b]), Err(GnnError::FamilyMismatch { .. })));
        assert!(matches!(GraphBatch::new(&[]), Err(GnnError::EmptyBatch)));
    }
}
