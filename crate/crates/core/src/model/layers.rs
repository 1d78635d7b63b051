use super::{AttentionParams, AttentionVars, SageLayerParams, SageVars, UpdateRule};
use crate::error::{Error, Result};
use crate::graph_builder::{coarsen_grid, GridGraph};
use crate::tensor::{Tape, Tensor, Var};

fn check_rows(tape: &Tape, h: Var, graph: &GridGraph) -> Result<()> {
    let rows = tape.value(h).rows();
    if rows != graph.num_vertices() {
        return Err(Error::Shape(format!(
            "{rows} feature rows for a graph of {} vertices",
            graph.num_vertices()
        )));
    }
    Ok(())
}

pub(crate) fn aggregate(tape: &mut Tape, graph: &GridGraph, h: Var) -> Result<Var> {
    check_rows(tape, h, graph)?;
    tape.neighbor_mean(h, graph.adjacency())
}

pub(crate) fn update(tape: &mut Tape, z: Var, h: Var, p: &SageVars, rule: UpdateRule) -> Result<Var> {
    let nb = tape.affine(z, p.w_neighbour, Some(p.b_neighbour))?;
    let me = tape.affine(h, p.w_self, Some(p.b_self))?;
    let combined = match rule {
        UpdateRule::Product => tape.hadamard(nb, me)?,
        UpdateRule::Sum => tape.add(nb, me)?,
    };
    tape.relu(combined)
}

pub(crate) fn pool(tape: &mut Tape, graph: &GridGraph, h: Var, s: usize) -> Result<(Var, Vec<usize>, GridGraph)> {
    check_rows(tape, h, graph)?;
    let coarse = coarsen_grid(graph, s)?;
    let (pooled, argmax) = tape.window_max(h, coarse.pixel_map())?;
    Ok((pooled, argmax, coarse))
}

fn channel_mlp(tape: &mut Tape, x: Var, p: &AttentionVars) -> Result<Var> {
    let hidden = tape.affine(x, p.channel_w1, Some(p.channel_b1))?;
    let hidden = tape.relu(hidden)?;
    tape.affine(hidden, p.channel_w2, Some(p.channel_b2))
}

/// Returns the gated features and the `1 x d` gate.
pub(crate) fn channel_gate(tape: &mut Tape, h: Var, p: &AttentionVars) -> Result<(Var, Var)> {
    let avg = tape.mean(h, 0)?;
    let (max, _) = tape.max(h, 0)?;
    let a = channel_mlp(tape, avg, p)?;
    let m = channel_mlp(tape, max, p)?;
    let logits = tape.add(a, m)?;
    let gate = tape.sigmoid(logits)?;
    Ok((tape.mul_rows(h, gate)?, gate))
}

/// Returns the gated features and the `n x 1` gate.
pub(crate) fn spatial_gate(tape: &mut Tape, graph: &GridGraph, h: Var, p: &AttentionVars) -> Result<(Var, Var)> {
    check_rows(tape, h, graph)?;
    let avg = tape.mean(h, 1)?;
    let (max, _) = tape.max(h, 1)?;
    let summary = tape.concat_cols(avg, max)?;
    let smoothed = tape.neighbor_mean(summary, graph.adjacency())?;
    let logits = tape.affine(smoothed, p.spatial_w, Some(p.spatial_b))?;
    let gate = tape.sigmoid(logits)?;
    Ok((tape.mul_cols(h, gate)?, gate))
}

fn bind_attention(tape: &mut Tape, p: &AttentionParams) -> AttentionVars {
    AttentionVars {
        channel_w1: tape.leaf(p.channel_w1.clone()),
        channel_b1: tape.leaf(p.channel_b1.clone()),
        channel_w2: tape.leaf(p.channel_w2.clone()),
        channel_b2: tape.leaf(p.channel_b2.clone()),
        spatial_w: tape.leaf(p.spatial_w.clone()),
        spatial_b: tape.leaf(p.spatial_b.clone()),
    }
}

fn check_attention(p: &AttentionParams, d: usize) -> Result<()> {
    if p.channel_w1.rows() != d || p.channel_w2.cols() != d {
        return Err(Error::Shape(format!(
            "attention expects {} channels, features have {d}",
            p.channel_w1.rows()
        )));
    }
    Ok(())
}

/// Per-vertex mean over the closed 8-neighbourhood `N(i) ∪ {i}`.
pub fn sage_aggregate(graph: &GridGraph, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.leaf(h.clone());
    let z = aggregate(&mut tape, graph, h)?;
    Ok(tape.value(z).clone())
}

/// One SAGE update on already-aggregated features `z`.
pub fn sage_update(z: &Tensor, h: &Tensor, p: &SageLayerParams, rule: UpdateRule) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.leaf(z.clone());
    let h = tape.leaf(h.clone());
    let vars = SageVars {
        w_neighbour: tape.leaf(p.w_neighbour.clone()),
        b_neighbour: tape.leaf(p.b_neighbour.clone()),
        w_self: tape.leaf(p.w_self.clone()),
        b_self: tape.leaf(p.b_self.clone()),
    };
    let out = update(&mut tape, z, h, &vars, rule)?;
    Ok(tape.value(out).clone())
}

/// Windowed max per channel; argmax holds the winning fine vertex per
/// `(coarse vertex, channel)`, row-major first on ties.
pub fn grid_max_pool(h: &Tensor, grid: &GridGraph, s: usize) -> Result<(Tensor, Vec<usize>, GridGraph)> {
    let mut tape = Tape::new();
    let h = tape.leaf(h.clone());
    let (pooled, argmax, coarse) = pool(&mut tape, grid, h, s)?;
    Ok((tape.value(pooled).clone(), argmax, coarse))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGates {
    pub gated: Tensor,
    pub gates: Vec<f64>,
}

pub fn channel_attention(h: &Tensor, p: &AttentionParams) -> Result<AttentionGates> {
    check_attention(p, h.cols())?;
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let vars = bind_attention(&mut tape, p);
    let (gated, gate) = channel_gate(&mut tape, hv, &vars)?;
    Ok(AttentionGates {
        gated: tape.value(gated).clone(),
        gates: tape.value(gate).data().to_vec(),
    })
}

pub fn spatial_attention(h: &Tensor, grid: &GridGraph, p: &AttentionParams) -> Result<AttentionGates> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let vars = bind_attention(&mut tape, p);
    let (gated, gate) = spatial_gate(&mut tape, grid, hv, &vars)?;
    Ok(AttentionGates {
        gated: tape.value(gated).clone(),
        gates: tape.value(gate).data().to_vec(),
    })
}
