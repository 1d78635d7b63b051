use super::layers::{aggregate, channel_gate, pool, spatial_gate, update};
use super::{BoundParams, ModelParams};
use crate::error::{Error, Result};
use crate::graph_builder::{GridGraph, PixelMap};
use crate::tensor::{Tape, Tensor, Var};

/// What one GNN layer did during a recorded forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// Post-ReLU SAGE output on the layer's input grid.
    pub pre_pool: Tensor,
    pub pool: usize,
    pub pooled_dims: (usize, usize),
    /// Winning input-grid vertex per `(pooled vertex, channel)`.
    pub argmax: Vec<usize>,
    pub channel_gates: Option<Vec<f64>>,
    pub spatial_gates: Option<Vec<f64>>,
    /// Layer output after attention, on the pooled grid.
    pub output: Tensor,
    pub output_grad: Option<Tensor>,
}

/// Activations and pooling provenance of one forward pass.
///
/// Level 0 is the input graph, level `l` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub grids: Vec<GridGraph>,
    pub input: Tensor,
    pub input_grad: Option<Tensor>,
    pub layers: Vec<LayerRecord>,
    pub logits: Vec<f64>,
    /// Class whose logit was differentiated, when gradients were recorded.
    pub grad_class: Option<usize>,
}

impl LayerTrace {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn pixel_chain(&self) -> Vec<PixelMap> {
        self.grids.iter().map(|g| *g.pixel_map()).collect()
    }

    pub fn activation(&self, level: usize) -> Option<&Tensor> {
        match level {
            0 => Some(&self.input),
            l => self.layers.get(l - 1).map(|r| &r.output),
        }
    }

    pub fn gradient(&self, level: usize) -> Option<&Tensor> {
        match level {
            0 => self.input_grad.as_ref(),
            l => self.layers.get(l - 1).and_then(|r| r.output_grad.as_ref()),
        }
    }
}

pub(crate) struct LevelVars {
    pre_pool: Var,
    argmax: Vec<usize>,
    channel_gate: Option<Var>,
    spatial_gate: Option<Var>,
    output: Var,
}

pub(crate) struct Run {
    pub logits: Var,
    pub input: Var,
    levels: Vec<LevelVars>,
    grids: Vec<GridGraph>,
}

pub(crate) fn check_input(model: &ModelParams, graph: &GridGraph) -> Result<()> {
    let arch = &model.arch;
    if graph.dims() != (arch.input_height, arch.input_width) || graph.channels() != arch.in_channels {
        return Err(Error::InvalidInput(format!(
            "model expects {}x{} input with {} channel(s), got {}x{} with {}",
            arch.input_height,
            arch.input_width,
            arch.in_channels,
            graph.height(),
            graph.width(),
            graph.channels()
        )));
    }
    Ok(())
}

/// Runs the whole network on `tape` with parameters already bound there.
pub(crate) fn run(
    model: &ModelParams,
    tape: &mut Tape,
    bound: &BoundParams,
    graph: &GridGraph,
    input_requires_grad: bool,
) -> Result<Run> {
    check_input(model, graph)?;
    let (layer_vars, head_vars) = bound.structured(&model.arch);
    let input = tape.leaf(graph.features().clone().with_requires_grad(input_requires_grad));
    let mut h = input;
    let mut grid = graph.clone();
    let mut grids = vec![graph.clone()];
    let mut levels = Vec::with_capacity(layer_vars.len());

    for (vars, params) in layer_vars.iter().zip(&model.layers) {
        let z = aggregate(tape, &grid, h)?;
        let pre_pool = update(tape, z, h, &vars.sage, model.arch.update_rule)?;
        let (pooled, argmax, coarse) = pool(tape, &grid, pre_pool, params.pool)?;
        let (output, channel, spatial) = match &vars.attention {
            Some(att) => {
                let (gated, cg) = channel_gate(tape, pooled, att)?;
                let (gated, sg) = spatial_gate(tape, &coarse, gated, att)?;
                (gated, Some(cg), Some(sg))
            }
            None => (pooled, None, None),
        };
        levels.push(LevelVars {
            pre_pool,
            argmax,
            channel_gate: channel,
            spatial_gate: spatial,
            output,
        });
        grids.push(coarse.clone());
        grid = coarse;
        h = output;
    }

    let flat_len = tape.value(h).len();
    let mut x = tape.reshape(h, vec![1, flat_len])?;
    let last = head_vars.len() - 1;
    for (i, &(w, b)) in head_vars.iter().enumerate() {
        x = tape.affine(x, w, Some(b))?;
        if i < last {
            x = tape.relu(x)?;
        }
    }
    let logits = tape.reshape(x, vec![model.num_classes()])?;
    Ok(Run {
        logits,
        input,
        levels,
        grids,
    })
}

fn collect_trace(tape: &Tape, run: Run, model: &ModelParams) -> LayerTrace {
    let layers = run
        .levels
        .into_iter()
        .zip(&model.layers)
        .zip(&run.grids[1..])
        .map(|((lv, params), grid)| LayerRecord {
            pre_pool: tape.value(lv.pre_pool).clone(),
            pool: params.pool,
            pooled_dims: grid.dims(),
            argmax: lv.argmax,
            channel_gates: lv.channel_gate.map(|v| tape.value(v).data().to_vec()),
            spatial_gates: lv.spatial_gate.map(|v| tape.value(v).data().to_vec()),
            output: tape.value(lv.output).clone(),
            output_grad: None,
        })
        .collect();
    LayerTrace {
        input: tape.value(run.input).clone(),
        input_grad: None,
        layers,
        logits: tape.value(run.logits).data().to_vec(),
        grids: run.grids,
        grad_class: None,
    }
}

/// Logits for one image graph, plus the full trace when `record` is set.
pub fn forward(model: &ModelParams, graph: &GridGraph, record: bool) -> Result<(Tensor, Option<LayerTrace>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let run = run(model, &mut tape, &bound, graph, false)?;
    let logits = tape.value(run.logits).clone();
    let trace = record.then(|| collect_trace(&tape, run, model));
    Ok((logits, trace))
}

/// Recorded forward pass plus `∂ logit[target] / ∂ h` at every level.
pub fn trace_with_gradients(model: &ModelParams, graph: &GridGraph, target: usize) -> Result<(Tensor, LayerTrace)> {
    if target >= model.num_classes() {
        return Err(Error::InvalidInput(format!(
            "class index {target} out of range for {} classes",
            model.num_classes()
        )));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let run = run(model, &mut tape, &bound, graph, true)?;
    let outputs: Vec<Var> = run.levels.iter().map(|l| l.output).collect();
    for &v in &outputs {
        tape.retain_grad(v);
    }
    let (input, logits_var) = (run.input, run.logits);
    let logits = tape.value(logits_var).clone();
    let mut trace = collect_trace(&tape, run, model);
    let picked = tape.pick(logits_var, target)?;
    let mut grads = tape.backward(picked)?;
    trace.input_grad = grads.take(input);
    for (record, v) in trace.layers.iter_mut().zip(outputs) {
        record.output_grad = grads.take(v);
    }
    trace.grad_class = Some(target);
    Ok((logits, trace))
}

/// Softmax with max subtraction.
pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Integrity(format!("non-finite logit {bad}")));
    }
    Ok(crate::tensor::tape::softmax(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_builder::{build_grid_graph, Image};
    use crate::model::{Architecture, LayerSpec, UpdateRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> GridGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        build_grid_graph(&Image::new(h, w, values).unwrap()).unwrap()
    }

    fn small_arch(h: usize, w: usize, layers: &[usize], classes: usize) -> Architecture {
        Architecture {
            input_height: h,
            input_width: w,
            in_channels: 1,
            layers: layers.iter().map(|&c| LayerSpec { channels: c, pool: 2 }).collect(),
            reduction: 2,
            update_rule: UpdateRule::Product,
            attention: true,
            head_hidden: vec![6],
            class_names: names(classes),
        }
    }

    /// Loop-only reimplementation of a 1-layer model with attention.
    fn straight_line_logits(m: &ModelParams, img: &[f64], h: usize, w: usize) -> Vec<f64> {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let layer = &m.layers[0];
        let p = &layer.sage;
        let d = p.w_self.cols();
        let inb = |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize;
        // aggregate + update
        let mut act = vec![0.0; h * w * d];
        for r in 0..h {
            for c in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if inb(rr, cc) {
                            s += img[rr as usize * w + cc as usize];
                            n += 1.0;
                        }
                    }
                }
                let z = s / n;
                let x = img[r * w + c];
                for j in 0..d {
                    let nb = z * p.w_neighbour.get(0, j) + p.b_neighbour.data()[j];
                    let me = x * p.w_self.get(0, j) + p.b_self.data()[j];
                    act[(r * w + c) * d + j] = (nb * me).max(0.0);
                }
            }
        }
        // 2x2 pool
        let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
        let mut pooled = vec![f64::NEG_INFINITY; ph * pw * d];
        for r in 0..h {
            for c in 0..w {
                for j in 0..d {
                    let slot = &mut pooled[((r / 2) * pw + c / 2) * d + j];
                    *slot = slot.max(act[(r * w + c) * d + j]);
                }
            }
        }
        let n = ph * pw;
        // channel attention
        let a = layer.attention.as_ref().unwrap();
        let mlp = |x: &[f64]| -> Vec<f64> {
            let hid = a.channel_w1.cols();
            let hidden: Vec<f64> = (0..hid)
                .map(|k| {
                    let v: f64 = (0..d).map(|c| x[c] * a.channel_w1.get(c, k)).sum::<f64>() + a.channel_b1.data()[k];
                    v.max(0.0)
                })
                .collect();
            (0..d)
                .map(|c| (0..hid).map(|k| hidden[k] * a.channel_w2.get(k, c)).sum::<f64>() + a.channel_b2.data()[c])
                .collect()
        };
        let avg: Vec<f64> = (0..d).map(|c| (0..n).map(|i| pooled[i * d + c]).sum::<f64>() / n as f64).collect();
        let mx: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|i| pooled[i * d + c]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (ma, mm) = (mlp(&avg), mlp(&mx));
        let mut g1 = pooled.clone();
        for i in 0..n {
            for c in 0..d {
                g1[i * d + c] *= sig(ma[c] + mm[c]);
            }
        }
        // spatial attention
        let summary: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let row = &g1[i * d..(i + 1) * d];
                (row.iter().sum::<f64>() / d as f64, row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            })
            .collect();
        let mut out = g1.clone();
        for r in 0..ph {
            for c in 0..pw {
                let (mut sa, mut sm, mut k) = (0.0, 0.0, 0.0);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr >= 0 && cc >= 0 && rr < ph as isize && cc < pw as isize {
                            let (x, y) = summary[rr as usize * pw + cc as usize];
                            sa += x;
                            sm += y;
                            k += 1.0;
                        }
                    }
                }
                let gate = sig(sa / k * a.spatial_w.data()[0] + sm / k * a.spatial_w.data()[1] + a.spatial_b.data()[0]);
                for j in 0..d {
                    out[(r * pw + c) * d + j] *= gate;
                }
            }
        }
        // head
        let mut x = out;
        for (i, dense) in m.head.iter().enumerate() {
            let cols = dense.w.cols();
            let mut y: Vec<f64> = dense.b.data().to_vec();
            for (k, xv) in x.iter().enumerate() {
                for j in 0..cols {
                    y[j] += xv * dense.w.get(k, j);
                }
            }
            if i + 1 < m.head.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        x
    }

    #[test]
    fn one_layer_matches_straight_line() {
        let arch = small_arch(8, 8, &[4], 3);
        let mut model = ModelParams::init(arch, 21).unwrap();
        // non-zero biases so every branch is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (_, t) in model.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let g = random_image(8, 8, 4);
        let (logits, _) = forward(&model, &g, false).unwrap();
        let oracle = straight_line_logits(&model, g.features().data(), 8, 8);
        for (a, b) in logits.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let arch = small_arch(8, 8, &[4, 4], 5);
        let mut model = ModelParams::init(arch, 1).unwrap();
        for dense in &mut model.head {
            dense.w = Tensor::zeros(dense.w.shape());
        }
        let (logits, _) = forward(&model, &random_image(8, 8, 2), false).unwrap();
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
        let probs = softmax_probs(logits.data()).unwrap();
        assert!(probs.iter().all(|p| (p - 0.2).abs() < 1e-12));
    }

    #[test]
    fn depth_zero_is_head_on_input() {
        let mut arch = small_arch(2, 2, &[], 2);
        arch.head_hidden.clear();
        let model = ModelParams::init(arch, 3).unwrap();
        let g = random_image(2, 2, 9);
        let (logits, trace) = forward(&model, &g, true).unwrap();
        let x = g.features().data();
        let d = &model.head[0];
        for j in 0..2 {
            let expect: f64 = d.b.data()[j] + (0..4).map(|k| x[k] * d.w.get(k, j)).sum::<f64>();
            assert!((logits.data()[j] - expect).abs() < 1e-14);
        }
        assert_eq!(trace.unwrap().depth(), 0);
    }

    #[test]
    fn dimension_mismatch_names_expected_dims() {
        let model = ModelParams::init(small_arch(8, 8, &[4], 3), 1).unwrap();
        let err = forward(&model, &random_image(6, 8, 1), false).unwrap_err();
        assert!(matches!(&err, Error::InvalidInput(m) if m.contains("8x8")));
    }

    #[test]
    fn trace_contents() {
        let model = ModelParams::init(small_arch(8, 6, &[4, 2], 3), 7).unwrap();
        let g = random_image(8, 6, 3);
        let (logits, trace) = forward(&model, &g, true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.logits, logits.data());
        assert_eq!(trace.grids.len(), 3);
        assert_eq!(trace.layers[0].pooled_dims, (4, 3));
        assert_eq!(trace.layers[1].pooled_dims, (2, 2));
        for (l, rec) in trace.layers.iter().enumerate() {
            let fine = trace.grids[l].num_vertices();
            assert!(rec.argmax.iter().all(|&a| a < fine));
            assert_eq!(rec.pre_pool.rows(), fine);
            assert!(rec.channel_gates.as_ref().unwrap().iter().all(|&g| g > 0.0 && g < 1.0));
        }

        let (again, with_grads) = trace_with_gradients(&model, &g, 1).unwrap();
        assert_eq!(again, logits);
        assert_eq!(with_grads.grad_class, Some(1));
        assert!(with_grads.layers.iter().all(|r| r.output_grad.is_some()));
        assert!(with_grads.input_grad.is_some());
    }

    #[test]
    fn output_gradient_matches_finite_difference_on_input() {
        let model = ModelParams::init(small_arch(4, 4, &[2], 2), 5).unwrap();
        let g = random_image(4, 4, 6);
        let (_, trace) = trace_with_gradients(&model, &g, 0).unwrap();
        let grad = trace.input_grad.unwrap();
        let eps = 1e-6;
        for v in 0..16 {
            let mut plus = g.features().clone();
            plus.data_mut()[v] += eps;
            let mut minus = g.features().clone();
            minus.data_mut()[v] -= eps;
            let lp = forward(&model, &GridGraph::from_features(4, 4, plus).unwrap(), false).unwrap().0;
            let lm = forward(&model, &GridGraph::from_features(4, 4, minus).unwrap(), false).unwrap().0;
            let fd = (lp.data()[0] - lm.data()[0]) / (2.0 * eps);
            assert!((fd - grad.data()[v]).abs() < 1e-6 * (1.0 + fd.abs()), "{v}: {fd} vs {}", grad.data()[v]);
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_probs(&[0.0; 10]).unwrap();
        assert!(p.iter().all(|v| (v - 0.1).abs() < 1e-15));
        let p = softmax_probs(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let base = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 100.0).collect();
        for (a, b) in softmax_probs(&base).unwrap().iter().zip(softmax_probs(&shifted).unwrap()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(softmax_probs(&[1.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax_probs(&[1.0, f64::NAN]), Err(Error::Integrity(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = ModelParams::init(small_arch(8, 8, &[4, 2], 3), 13).unwrap();
        let g = random_image(8, 8, 5);
        let a = forward(&model, &g, false).unwrap().0;
        let b = forward(&model, &g, false).unwrap().0;
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
