//! Weights and forward pass of the factor-graph network.

use rand::Rng;

use crate::factor_graph::{Family, FactorGraph};
use crate::tensor_nn::{
    sigmoid, Activation, Checkpoint, GruCell, Mlp, MlpSpec, Mode, ParamKey, ParameterGroup, Tape, Tensor, Var,
};

use super::{GnnConfig, GnnError, GnnMode, GraphBatch};

/// Name of the parameter group inside checkpoints.
pub const GROUP_NAME: &str = "gnn";
/// Graphs per chunk when predicting.
const PREDICT_CHUNK: usize = 64;

/// Multi-head message and attention weights for one edge direction and one
/// factor type. Each head has a one-hidden-layer message MLP and a
/// one-hidden-layer scorer on `[h_target, h_source]`; the first layers of all
/// heads are fused into `w_tgt`/`w_src`.
#[derive(Clone, Debug)]
pub struct DirectionWeights {
    pub w_tgt: ParamKey,
    pub w_src: ParamKey,
    pub b1: ParamKey,
    pub w_msg: ParamKey,
    pub b_msg: ParamKey,
    pub w_att: ParamKey,
    pub b_att: ParamKey,
}

impl DirectionWeights {
    fn new<R: Rng + ?Sized>(group: &mut ParameterGroup, name: &str, cfg: &GnnConfig, rng: &mut R) -> Self {
        let (h, k) = (cfg.hidden_dim, cfg.heads);
        let width = k * (cfg.message_hidden + cfg.attention_hidden);
        let b_in = 1.0 / ((2 * h) as f64).sqrt();
        let b_msg = 1.0 / (cfg.message_hidden as f64).sqrt();
        let b_att = 1.0 / (cfg.attention_hidden as f64).sqrt();
        Self {
            w_tgt: group.add_uniform(&format!("{name}.w_tgt"), h, width, b_in, rng),
            w_src: group.add_uniform(&format!("{name}.w_src"), h, width, b_in, rng),
            b1: group.add_uniform(&format!("{name}.b1"), 1, width, b_in, rng),
            w_msg: group.add_uniform(&format!("{name}.w_msg"), k * cfg.message_hidden, h, b_msg, rng),
            b_msg: group.add_uniform(&format!("{name}.b_msg"), 1, k * h, b_msg, rng),
            w_att: group.add_uniform(&format!("{name}.w_att"), k * cfg.attention_hidden, 1, b_att, rng),
            b_att: group.add_uniform(&format!("{name}.b_att"), 1, k, b_att, rng),
        }
    }
}

/// Weights used in one message-passing round.
#[derive(Clone, Debug)]
pub struct RoundWeights {
    /// Variable-to-factor messages, one entry per factor type.
    pub to_factor: Vec<DirectionWeights>,
    /// Factor-to-variable messages, one entry per factor type.
    pub to_var: Vec<DirectionWeights>,
}

/// Node states during the forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GnnState {
    pub h_factor: Var,
    pub h_var: Var,
    /// Per-factor `H x H` feature matrices, one flattened row per factor.
    pub factor_matrix: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RoundOutput {
    pub state: GnnState,
    /// Attention weights over edges grouped by target factor (`E x heads`).
    pub alpha_factor: Var,
    /// Attention weights over edges grouped by target variable.
    pub alpha_var: Var,
}

#[derive(Clone, Debug)]
pub struct FactorGnn {
    cfg: GnnConfig,
    group: ParameterGroup,
    state_encoders: Vec<Mlp>,
    matrix_encoders: Vec<Mlp>,
    rounds: Vec<RoundWeights>,
    gru_factor: GruCell,
    gru_var: GruCell,
    decoder: Mlp,
    target_mean: ParamKey,
    target_std: ParamKey,
}

impl FactorGnn {
    pub fn new<R: Rng + ?Sized>(cfg: GnnConfig, rng: &mut R) -> Result<Self, GnnError> {
        cfg.validate()?;
        let mut group = ParameterGroup::new();
        let h = cfg.hidden_dim;
        let types = cfg.family.factor_types();
        let widths = |input: usize, hidden: &[usize], out: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(out);
            w
        };
        let mut state_encoders = Vec::new();
        let mut matrix_encoders = Vec::new();
        for t in types {
            let e = t.eta_len();
            let spec = MlpSpec::new(widths(e, &cfg.encoder_hidden, h), Activation::Relu, true)?;
            state_encoders.push(Mlp::new(&mut group, &format!("enc.{}.state", t.name()), spec, rng));
            let spec = MlpSpec::new(widths(e, &cfg.encoder_hidden, h * h), Activation::Relu, true)?;
            matrix_encoders.push(Mlp::new(&mut group, &format!("enc.{}.matrix", t.name()), spec, rng));
        }
        let n_sets = match cfg.mode {
            GnnMode::Recurrent => 1,
            GnnMode::Stacked => cfg.stacked_layers,
        };
        let rounds = (0..n_sets)
            .map(|l| RoundWeights {
                to_factor: types
                    .iter()
                    .map(|t| DirectionWeights::new(&mut group, &format!("round{l}.to_factor.{}", t.name()), &cfg, rng))
                    .collect(),
                to_var: types
                    .iter()
                    .map(|t| DirectionWeights::new(&mut group, &format!("round{l}.to_var.{}", t.name()), &cfg, rng))
                    .collect(),
            })
            .collect();
        let gru_factor = GruCell::new(&mut group, "gru.factor", h, h, rng);
        let gru_var = GruCell::new(&mut group, "gru.var", h, h, rng);
        let out = cfg.output_width();
        let spec = MlpSpec::new(widths(h, &cfg.decoder_hidden, out), Activation::Relu, true)?;
        let decoder = Mlp::new(&mut group, "decoder", spec, rng);
        let target_mean = group.add_buffer("target.mean", Tensor::zeros(1, out));
        let target_std = group.add_buffer("target.std", Tensor::filled(1, out, 1.0));
        Ok(Self {
            cfg,
            group,
            state_encoders,
            matrix_encoders,
            rounds,
            gru_factor,
            gru_var,
            decoder,
            target_mean,
            target_std,
        })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.cfg
    }

    pub fn family(&self) -> Family {
        self.cfg.family
    }

    pub fn group(&self) -> &ParameterGroup {
        &self.group
    }

    pub fn group_mut(&mut self) -> &mut ParameterGroup {
        &mut self.group
    }

    /// Per-dimension standardisation applied to continuous targets.
    pub fn set_target_scaling(&mut self, mean: &[f64], std: &[f64]) -> Result<(), GnnError> {
        let out = self.cfg.output_width();
        if mean.len() != out || std.len() != out || std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(GnnError::InvalidConfig(format!("target scaling {mean:?} / {std:?}")));
        }
        self.group.value_mut(self.target_mean).data_mut().copy_from_slice(mean);
        self.group.value_mut(self.target_std).data_mut().copy_from_slice(std);
        Ok(())
    }

    pub fn target_scaling(&self) -> (Vec<f64>, Vec<f64>) {
        (self.group.value(self.target_mean).data().to_vec(), self.group.value(self.target_std).data().to_vec())
    }

    /// Number of rounds for one training batch.
    pub fn sample_rounds<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.cfg.mode {
            GnnMode::Recurrent => rng.random_range(self.cfg.readout_range[0]..=self.cfg.readout_range[1]),
            GnnMode::Stacked => self.cfg.stacked_layers,
        }
    }

    fn check_family(&self, batch: &GraphBatch) -> Result<(), GnnError> {
        if batch.family != self.cfg.family {
            return Err(GnnError::FamilyMismatch { expected: self.cfg.family, got: batch.family });
        }
        Ok(())
    }

    /// Encodes factors; variable states start at zero.
    pub fn init_state(
        &self,
        tape: &mut Tape,
        group: &ParameterGroup,
        batch: &GraphBatch,
        mode: Mode,
    ) -> Result<GnnState, GnnError> {
        self.check_family(batch)?;
        let h = self.cfg.hidden_dim;
        let mut states = Vec::new();
        let mut matrices = Vec::new();
        for b in batch.blocks.iter().filter(|b| b.f_count > 0) {
            let eta = tape.constant(b.eta.clone());
            states.push(self.state_encoders[b.type_index].forward(tape, group, eta, mode)?);
            matrices.push(self.matrix_encoders[b.type_index].forward(tape, group, eta, mode)?);
        }
        let h_factor = tape.concat_rows(&states)?;
        let factor_matrix = tape.concat_rows(&matrices)?;
        let h_var = tape.constant(Tensor::zeros(batch.n_vars, h));
        Ok(GnnState { h_factor, h_var, factor_matrix })
    }

    /// Per-edge messages and scores for one direction of one type block.
    #[allow(clippy::too_many_arguments)]
    fn edge_terms(
        &self,
        tape: &mut Tape,
        group: &ParameterGroup,
        w: &DirectionWeights,
        target: Var,
        target_idx: std::sync::Arc<[usize]>,
        source: Var,
        source_idx: std::sync::Arc<[usize]>,
    ) -> Result<(Var, Var), GnnError> {
        let k = self.cfg.heads;
        let w_tgt = tape.param(group, w.w_tgt);
        let w_src = tape.param(group, w.w_src);
        let b1 = tape.param(group, w.b1);
        let p = tape.matmul(target, w_tgt)?;
        let q = tape.matmul(source, w_src)?;
        let hidden = tape.gather_add_relu(p, target_idx, q, source_idx, b1)?;
        let w_msg = tape.param(group, w.w_msg);
        let b_msg = tape.param(group, w.b_msg);
        let msg = tape.block_linear(hidden, 0, k, w_msg, b_msg)?;
        let w_att = tape.param(group, w.w_att);
        let b_att = tape.param(group, w.b_att);
        let score = tape.block_linear(hidden, k * self.cfg.message_hidden, k, w_att, b_att)?;
        Ok((msg, score))
    }

    /// One synchronous round: both directions read the incoming states.
    pub fn round(
        &self,
        tape: &mut Tape,
        group: &ParameterGroup,
        batch: &GraphBatch,
        state: GnnState,
        layer: usize,
    ) -> Result<RoundOutput, GnnError> {
        let weights = self
            .rounds
            .get(layer)
            .ok_or_else(|| GnnError::InvalidConfig(format!("no weights for round {layer}")))?;
        let blocks: Vec<_> = batch.blocks.iter().filter(|b| b.f_count > 0).collect();

        let (mut msgs, mut scores) = (Vec::new(), Vec::new());
        for b in &blocks {
            let hf = tape.slice_rows(state.h_factor, b.f_start, b.f_count)?;
            let (m, s) = self.edge_terms(
                tape,
                group,
                &weights.to_factor[b.type_index],
                hf,
                b.edge_factor.clone(),
                state.h_var,
                b.edge_var.clone(),
            )?;
            msgs.push(m);
            scores.push(s);
        }
        let msg = tape.concat_rows(&msgs)?;
        let score = tape.concat_rows(&scores)?;
        let alpha_factor = tape.segment_softmax(score, batch.by_factor.clone())?;
        let summary = tape.attn_aggregate(msg, alpha_factor, batch.by_factor.clone())?;
        let factor_input = tape.row_matvec(state.factor_matrix, summary)?;

        let (mut msgs, mut scores) = (Vec::new(), Vec::new());
        for b in &blocks {
            let hf = tape.slice_rows(state.h_factor, b.f_start, b.f_count)?;
            let (m, s) = self.edge_terms(
                tape,
                group,
                &weights.to_var[b.type_index],
                state.h_var,
                b.edge_var.clone(),
                hf,
                b.edge_factor.clone(),
            )?;
            msgs.push(m);
            scores.push(s);
        }
        let msg = tape.concat_rows(&msgs)?;
        let score = tape.concat_rows(&scores)?;
        let alpha_var = tape.segment_softmax(score, batch.by_var.clone())?;
        let var_input = tape.attn_aggregate(msg, alpha_var, batch.by_var.clone())?;

        let h_factor = self.gru_factor.step(tape, group, factor_input, state.h_factor)?;
        let h_var = self.gru_var.step(tape, group, var_input, state.h_var)?;
        Ok(RoundOutput {
            state: GnnState { h_factor, h_var, factor_matrix: state.factor_matrix },
            alpha_factor,
            alpha_var,
        })
    }

    /// Decoder output before the family readout (`n_vars x out`). Continuous
    /// outputs are in standardised units.
    pub fn forward_raw(
        &self,
        tape: &mut Tape,
        group: &ParameterGroup,
        batch: &GraphBatch,
        n_rounds: usize,
        mode: Mode,
    ) -> Result<Var, GnnError> {
        if self.cfg.mode == GnnMode::Stacked && n_rounds != self.cfg.stacked_layers {
            return Err(GnnError::InvalidConfig(format!(
                "stacked model runs exactly {} rounds, asked for {n_rounds}",
                self.cfg.stacked_layers
            )));
        }
        let mut state = self.init_state(tape, group, batch, mode)?;
        for t in 0..n_rounds {
            let layer = match self.cfg.mode {
                GnnMode::Recurrent => 0,
                GnnMode::Stacked => t,
            };
            state = self.round(tape, group, batch, state, layer)?.state;
        }
        Ok(self.decoder.forward(tape, group, state.h_var, mode)?)
    }

    /// Maps one raw output row to marginal summaries: precision for
    /// Gaussian, `p(s = +1)` for spin, `(mean, m2, m3, m4)` for continuous.
    pub fn readout_row(&self, raw: &[f64]) -> Vec<f64> {
        match self.cfg.family {
            Family::Gaussian => raw.to_vec(),
            Family::Spin => raw.iter().map(|&x| sigmoid(x)).collect(),
            Family::Continuous => {
                let (mean, std) = (self.group.value(self.target_mean), self.group.value(self.target_std));
                raw.iter().zip(mean.data().iter().zip(std.data())).map(|(x, (m, s))| x * s + m).collect()
            }
        }
    }

    /// Eval-mode predictions with the configured number of test rounds.
    pub fn predict(&self, graphs: &[&FactorGraph]) -> Result<Vec<Vec<Vec<f64>>>, GnnError> {
        self.predict_with_rounds(graphs, self.cfg.eval_rounds())
    }

    /// Eval-mode predictions, one `n_i x out` table per graph.
    pub fn predict_with_rounds(&self, graphs: &[&FactorGraph], n_rounds: usize) -> Result<Vec<Vec<Vec<f64>>>, GnnError> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(PREDICT_CHUNK) {
            let batch = GraphBatch::new(chunk)?;
            let mut tape = Tape::new();
            let raw = self.forward_raw(&mut tape, &self.group, &batch, n_rounds, Mode::Eval)?;
            let raw = tape.value(raw);
            for g in 0..batch.n_graphs() {
                out.push(
                    (batch.var_offsets[g]..batch.var_offsets[g + 1]).map(|v| self.readout_row(raw.row(v))).collect(),
                );
            }
        }
        Ok(out)
    }

    /// Predictions when every non-singleton factor is removed.
    pub fn predict_singleton(&self, graphs: &[&FactorGraph]) -> Result<Vec<Vec<Vec<f64>>>, GnnError> {
        let projected: Vec<FactorGraph> = graphs.iter().map(|g| g.singleton_projection()).collect();
        self.predict(&projected.iter().collect::<Vec<_>>())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(GROUP_NAME, &self.group);
        c
    }

    /// Rebuilds a model from its configuration and saved weights.
    pub fn from_checkpoint(cfg: GnnConfig, checkpoint: &Checkpoint) -> Result<Self, GnnError> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(cfg, &mut rng)?;
        checkpoint.restore(GROUP_NAME, &mut model.group)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::{build_continuous, build_ggm, build_spin};
    use crate::graph_gen::{sample_continuous_instance, sample_ggm_instance, sample_spin_instance};
    use crate::tensor_nn::grad_check_sampled;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(family: Family) -> GnnConfig {
        GnnConfig {
            family,
            hidden_dim: 6,
            heads: 2,
            message_hidden: 5,
            attention_hidden: 4,
            encoder_hidden: vec![7],
            decoder_hidden: vec![7],
            readout_range: [2, 4],
            test_readout: 3,
            mode: GnnMode::Recurrent,
            stacked_layers: 3,
        }
    }

    fn spin_graph(seed: u64, n: usize) -> FactorGraph {
        sample_spin_instance(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().graph
    }

    #[test]
    fn variable_states_start_at_zero_and_attention_normalises() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = FactorGnn::new(small_cfg(Family::Spin), &mut rng).unwrap();
        let g = spin_graph(2, 9);
        let batch = GraphBatch::single(&g).unwrap();
        let mut tape = Tape::new();
        let s0 = model.init_state(&mut tape, model.group(), &batch, Mode::Eval).unwrap();
        assert!(tape.value(s0.h_var).data().iter().all(|&x| x == 0.0));
        let out = model.round(&mut tape, model.group(), &batch, s0, 0).unwrap();
        for (alpha, seg) in [(out.alpha_factor, &batch.by_factor), (out.alpha_var, &batch.by_var)] {
            let a = tape.value(alpha);
            for s in 0..seg.n_segments() {
                for k in 0..2 {
                    let total: f64 = seg.members(s).iter().map(|&e| a.get(e, k)).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = FactorGnn::new(small_cfg(Family::Continuous), &mut rng).unwrap();
        let g = sample_continuous_instance(8, &mut rng, 1.0).unwrap().graph;
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let pg = g.permuted(&perm).unwrap();
        let a = model.predict(&[&g]).unwrap().remove(0);
        let b = model.predict(&[&pg]).unwrap().remove(0);
        for i in 0..8 {
            assert_eq!(a[i], b[perm[i]]);
        }
    }

    #[test]
    fn batching_does_not_change_eval_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = FactorGnn::new(small_cfg(Family::Spin), &mut rng).unwrap();
        let graphs: Vec<FactorGraph> = (0..3).map(|s| spin_graph(10 + s, 5 + s as usize)).collect();
        let refs: Vec<&FactorGraph> = graphs.iter().collect();
        let joint = model.predict(&refs).unwrap();
        for (g, j) in refs.iter().zip(&joint) {
            assert_eq!(&model.predict(&[g]).unwrap()[0], j);
        }
        assert_eq!(model.predict(&refs).unwrap(), joint);
    }

    #[test]
    fn output_shapes_and_readouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cont = FactorGnn::new(small_cfg(Family::Continuous), &mut rng).unwrap();
        let g = sample_continuous_instance(10, &mut rng, 1.0).unwrap().graph;
        let p = cont.predict(&[&g]).unwrap().remove(0);
        assert_eq!((p.len(), p[0].len()), (10, 4));
        let spin = FactorGnn::new(small_cfg(Family::Spin), &mut rng).unwrap();
        let p = spin.predict(&[&spin_graph(6, 7)]).unwrap().remove(0);
        assert!(p.iter().all(|r| r.len() == 1 && r[0] > 0.0 && r[0] < 1.0));
        let ggm = FactorGnn::new(small_cfg(Family::Gaussian), &mut rng).unwrap();
        assert!(matches!(ggm.predict(&[&g]), Err(GnnError::FamilyMismatch { .. })));
    }

    #[test]
    fn target_scaling_applies_to_continuous_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = FactorGnn::new(small_cfg(Family::Continuous), &mut rng).unwrap();
        assert_eq!(model.readout_row(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
        model.set_target_scaling(&[1.0, 0.0, 0.0, 2.0], &[2.0, 1.0, 1.0, 0.5]).unwrap();
        assert_eq!(model.readout_row(&[1.0, 2.0, 3.0, 4.0]), vec![3.0, 2.0, 3.0, 4.0]);
        assert!(model.set_target_scaling(&[0.0; 4], &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn graphs_without_interactions_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = FactorGnn::new(small_cfg(Family::Gaussian), &mut rng).unwrap();
        let g = build_ggm(&nalgebra::DMatrix::from_diagonal_element(3, 3, 2.0)).unwrap();
        assert_eq!(model.predict(&[&g]).unwrap()[0].len(), 3);
        let inst = sample_ggm_instance(6, &mut rng).unwrap().graph;
        let single = model.predict_singleton(&[&inst]).unwrap();
        assert_eq!(single[0].len(), 6);
    }

    #[test]
    fn stacked_mode_uses_fixed_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = GnnConfig { mode: GnnMode::Stacked, ..small_cfg(Family::Spin) };
        let model = FactorGnn::new(cfg, &mut rng).unwrap();
        assert_eq!(model.sample_rounds(&mut rng), 3);
        let g = spin_graph(1, 5);
        assert_eq!(model.predict(&[&g]).unwrap()[0].len(), 5);
        assert!(model.predict_with_rounds(&[&g], 2).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = small_cfg(Family::Continuous);
        let mut model = FactorGnn::new(cfg.clone(), &mut rng).unwrap();
        model.set_target_scaling(&[0.1, 1.0, 0.0, 3.0], &[0.2, 0.5, 0.3, 2.0]).unwrap();
        let g = build_continuous(&[[0.1, 0.2, 0.3]; 3], &[(0, 1, 0.5)], &[(0, 1, 2, -0.2)], 1.0, 0.3).unwrap();
        let json = serde_json::to_string(&model.to_checkpoint()).unwrap();
        let back = FactorGnn::from_checkpoint(cfg, &serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(model.predict(&[&g]).unwrap(), back.predict(&[&g]).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = FactorGnn::new(small_cfg(Family::Spin), &mut rng).unwrap();
        let g = build_spin(
            &[[0.3, -0.2, 0.5], [0.1, 0.4, -0.3], [-0.2, 0.2, 0.1], [0.5, 0.0, -0.1]],
            &[(0, 1, 2, 0.7), (1, 2, 3, -0.4)],
            0.5,
        )
        .unwrap();
        let g2 = spin_graph(13, 4);
        let batch = GraphBatch::new(&[&g, &g2]).unwrap();
        let target = Tensor::matrix(8, 1, vec![0.2, 0.7, 0.5, 0.9, 0.1, 0.3, 0.6, 0.4]).unwrap();
        let report = grad_check_sampled(
            |tape, group| {
                let raw = model
                    .forward_raw(tape, group, &batch, 3, Mode::Train)
                    .map_err(|e| crate::tensor_nn::NnError::InvalidArgument(e.to_string()))?;
                tape.bce_with_logits(raw, target.clone())
            },
            model.group(),
            1e-5,
            6,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
