//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use gridsage::dataset_io::{generate_synthetic, nearest_centroid_accuracy, split, Sample, SyntheticConfig};
use gridsage::explain::{backproject_saliency, build_report};
use gridsage::graph_builder::{build_grid_graph, vertex_to_pixels, GridGraph, Image, PixelMap};
use gridsage::model::{
    decode_model, encode_model, forward, grid_max_pool, sage_aggregate, Architecture, LayerRecord, LayerSpec,
    LayerTrace, ModelParams, UpdateRule,
};
use gridsage::training::{evaluate, loss_ce_lasso, sample_gradients, small_weight_fraction, train, TrainConfig};
use gridsage::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w).map(|_| rng.gen()).collect()).unwrap()
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

fn loss_at(model: &ModelParams, graph: &GridGraph, label: usize, lambda: f64) -> f64 {
    let (logits, _) = forward(model, graph, false).unwrap();
    loss_ce_lasso(logits.data(), label, model, lambda).unwrap()
}

fn gradient_correctness() -> Outcome {
    let lambda = 0.01;
    let step = 1e-6;
    let arch = Architecture {
        input_height: 4,
        input_width: 4,
        in_channels: 1,
        layers: vec![LayerSpec { channels: 4, pool: 2 }],
        reduction: 2,
        update_rule: UpdateRule::Product,
        attention: true,
        head_hidden: vec![6],
        class_names: names(3),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = ModelParams::init(arch, 11).unwrap();
    // non-zero biases so they are checked too and no channel starts dead
    for (kind, t) in model.tensors_mut() {
        if kind == gridsage::model::ParamKind::Bias {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.1..0.5));
        }
    }
    let graph = build_grid_graph(&random_image(&mut rng, 4, 4)).unwrap();
    let label = 1;
    let analytic = sample_gradients(&model, &graph, label, lambda).unwrap().grads;

    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    let count = model.tensors().len();
    for t in 0..count {
        let len = model.tensors()[t].tensor.len();
        for i in 0..len {
            let w = model.tensors()[t].tensor.data()[i];
            if w.abs() <= 1e-3 {
                skipped += 1;
                continue;
            }
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.tensors_mut()[t].1.data_mut()[i] = w + delta;
                loss_at(&m, &graph, label, lambda)
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let a = analytic[t].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            let name = model.tensors()[t].name.clone();
            ensure(rel < 1e-4, || format!("{name}[{i}]: analytic {a:e} vs numeric {numeric:e} (rel {rel:e})"))?;
        }
    }
    Ok(format!("{checked} parameters checked, {skipped} skipped, worst relative error {worst:.2e}"))
}

fn box_filter(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    sum += img[rr * w + cc];
                    n += 1.0;
                }
            }
            out[r * w + c] = sum / n;
        }
    }
    out
}

fn aggregation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let img = random_image(&mut rng, 8, 8);
        let graph = build_grid_graph(&img).unwrap();
        let z = sage_aggregate(&graph, graph.features()).unwrap();
        let expect = box_filter(img.values(), 8, 8);
        for (a, b) in z.data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 inputs, max deviation {worst:.1e}"))
}

fn pooling_provenance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, d, s) = (6, 6, 3, 2);
    let mut support_pixels = 0;
    for trial in 0..100 {
        let data: Vec<f64> = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::new(vec![h * w, d], data.clone()).unwrap();
        let graph = GridGraph::from_features(h, w, features.clone()).unwrap();
        let (pooled, argmax, coarse) = grid_max_pool(&features, &graph, s).unwrap();
        let (ch, cw) = coarse.dims();

        // scatter pooled values back through the recorded winners
        let mut scattered = vec![None; h * w * d];
        for v in 0..ch * cw {
            for c in 0..d {
                let src = argmax[v * d + c];
                scattered[src * d + c] = Some(pooled.get(v, c));
            }
        }
        // first row-major maximum of every window, found directly
        let mut expected = vec![None; h * w * d];
        for wr in 0..ch {
            for wc in 0..cw {
                for c in 0..d {
                    let mut best: Option<(usize, f64)> = None;
                    for r in wr * s..(wr * s + s).min(h) {
                        for col in wc * s..(wc * s + s).min(w) {
                            let value = data[(r * w + col) * d + c];
                            if best.is_none_or(|(_, b)| value > b) {
                                best = Some((r * w + col, value));
                            }
                        }
                    }
                    let (pos, value) = best.unwrap();
                    expected[pos * d + c] = Some(value);
                }
            }
        }
        ensure(scattered == expected, || format!("trial {trial}: scattered maxima differ"))?;

        // saliency support against pixel reachability
        let record = LayerRecord {
            pre_pool: features.clone(),
            pool: s,
            pooled_dims: (ch, cw),
            argmax: argmax.clone(),
            channel_gates: None,
            spatial_gates: None,
            output: pooled.clone(),
            output_grad: None,
        };
        let trace = LayerTrace {
            grids: vec![graph.clone(), coarse.clone()],
            input: features.clone(),
            input_grad: None,
            layers: vec![record],
            logits: vec![],
            grad_class: None,
        };
        let scores: Vec<f64> = (0..ch * cw)
            .map(|_| if rng.gen_bool(0.6) { rng.gen_range(0.1..1.0) } else { 0.0 })
            .collect();
        let map = backproject_saliency(&scores, &trace, 1).unwrap();
        let support: BTreeSet<usize> = (0..h * w).filter(|&p| map.scores[p] > 0.0).collect();
        let chain: Vec<PixelMap> = trace.pixel_chain();
        let mut routed = BTreeSet::new();
        let mut window_pixels = BTreeSet::new();
        for v in (0..ch * cw).filter(|&v| scores[v] > 0.0) {
            routed.extend(argmax[v * d..(v + 1) * d].iter().copied());
            window_pixels.extend(vertex_to_pixels(&chain, v).unwrap().into_iter().map(|(r, c)| r * w + c));
        }
        ensure(support == routed, || format!("trial {trial}: support differs from routed winners"))?;
        ensure(support.is_subset(&window_pixels), || {
            format!("trial {trial}: saliency outside vertex_to_pixels windows")
        })?;
        support_pixels += support.len();
    }
    Ok(format!("100 inputs, {support_pixels} salient pixels all routed and reachable"))
}

struct DeskTask {
    train: Vec<Sample>,
    test: Vec<Sample>,
    arch: Architecture,
}

fn desk_task() -> DeskTask {
    let cfg = SyntheticConfig {
        size: 32,
        classes: 3,
        noise: 0.2,
        seed: 7,
        ..SyntheticConfig::default()
    };
    let samples = generate_synthetic(&cfg).unwrap();
    let (train, test) = split(&samples, 0.23, cfg.seed).unwrap();
    let mut arch = Architecture::default_for(32, 32, cfg.class_names());
    arch.layers.truncate(2);
    DeskTask { train, test, arch }
}

const DESK_EPOCHS: usize = 30;

fn desk_learning() -> Outcome {
    let task = desk_task();
    let cfg = TrainConfig {
        epochs: DESK_EPOCHS,
        seed: 7,
        ..TrainConfig::default()
    };
    let model = ModelParams::init(task.arch.clone(), cfg.seed).unwrap();
    let (model, _) = train(model, &task.train, &cfg).unwrap();
    let acc = evaluate(&model, &task.test).unwrap().accuracy;
    let baseline = nearest_centroid_accuracy(&task.train, &task.test).unwrap();
    let detail = format!(
        "{} train / {} test, {DESK_EPOCHS} epochs: accuracy {acc:.4}, nearest centroid {baseline:.4}",
        task.train.len(),
        task.test.len()
    );
    ensure(acc >= 0.9 && acc > baseline, || detail.clone())?;
    Ok(detail)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn lasso_effect() -> Outcome {
    let task = desk_task();
    let fractions = |lambda: f64| -> Vec<f64> {
        (1..=5)
            .map(|seed| {
                let cfg = TrainConfig {
                    epochs: DESK_EPOCHS,
                    seed,
                    lambda,
                    ..TrainConfig::default()
                };
                let model = ModelParams::init(task.arch.clone(), seed).unwrap();
                let (model, _) = train(model, &task.train, &cfg).unwrap();
                small_weight_fraction(&model, 1e-3)
            })
            .collect()
    };
    let (with, without) = (median(fractions(1e-3)), median(fractions(0.0)));
    let detail = format!("median |w| < 1e-3 fraction: {with:.4} at lambda 1e-3, {without:.4} at lambda 0");
    ensure(with > without, || detail.clone())?;
    Ok(detail)
}

fn report_fidelity() -> Outcome {
    let classes: Vec<String> = ["2S1", "BMP2", "BRDM2", "BTR60", "BTR70", "D7", "T62", "T72", "ZIL131", "ZSU234"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let listed = [("2S1", 0.5261), ("ZSU234", 0.3352), ("T62", 0.0633), ("BTR70", 0.0447)];
    let remainder = (1.0 - listed.iter().map(|(_, p)| p).sum::<f64>()) / 6.0;
    let probs: Vec<f64> = classes
        .iter()
        .map(|c| listed.iter().find(|(n, _)| n == c).map_or(remainder, |(_, p)| *p))
        .collect();
    let lines = build_report(&probs, &classes, 4, None).map_err(|e| e.to_string())?.lines();
    let expected = ["2S1: 52.61%", "ZSU234: 33.52%", "T62: 6.33%", "BTR70: 4.47%"];
    ensure(lines == expected, || format!("got {lines:?}"))?;
    Ok(lines.join(", "))
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let depth = rng.gen_range(0..=2);
    let arch = Architecture {
        input_height: rng.gen_range(3..9),
        input_width: rng.gen_range(3..9),
        in_channels: 1,
        layers: (0..depth)
            .map(|_| LayerSpec {
                channels: 2 * rng.gen_range(1..4),
                pool: rng.gen_range(1..3),
            })
            .collect(),
        reduction: 2,
        update_rule: if rng.gen() { UpdateRule::Product } else { UpdateRule::Sum },
        attention: rng.gen(),
        head_hidden: if rng.gen() { vec![rng.gen_range(1..6)] } else { vec![] },
        class_names: names(rng.gen_range(2..5)),
    };
    let mut model = ModelParams::init(arch, rng.gen()).unwrap();
    for (_, t) in model.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
    model
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bytes_total = 0;
    for i in 0..100 {
        let model = random_model(&mut rng);
        let bytes = encode_model(&model);
        bytes_total += bytes.len();
        let back = decode_model(&bytes).map_err(|e| format!("model {i}: {e}"))?;
        let bits = |m: &ModelParams| -> Vec<u64> {
            m.tensors().iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        ensure(back == model && bits(&back) == bits(&model), || format!("model {i}: weights differ"))?;
        let (h, w) = (model.arch.input_height, model.arch.input_width);
        let graph = build_grid_graph(&random_image(&mut ChaCha8Rng::seed_from_u64(99), h, w)).unwrap();
        let logit_bits = |m: &ModelParams| -> Vec<u64> {
            forward(m, &graph, false).unwrap().0.data().iter().map(|v| v.to_bits()).collect()
        };
        ensure(logit_bits(&back) == logit_bits(&model), || format!("model {i}: logits differ"))?;
    }
    Ok(format!("100 models ({bytes_total} bytes) round-trip bit-exactly"))
}

fn cli_train(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let model = dir.join("model.gsm");
    let metrics = dir.join("metrics.json");
    let output = Command::new(env!("CARGO_BIN_EXE_gridsage"))
        .args(["train", "--synthetic", "--classes", "3", "--layers", "16,32", "--seed", "7"])
        .args(["--epochs", &DESK_EPOCHS.to_string()])
        .arg("--out")
        .arg(&model)
        .arg("--metrics")
        .arg(&metrics)
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!(
            "train exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).lines().last().unwrap_or("")
        ));
    }
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok((read(&model)?, read(&metrics)?))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_train(a.path())?;
    let second = cli_train(b.path())?;
    ensure(first.0 == second.0, || "model files differ".into())?;
    ensure(first.1 == second.1, || "metrics files differ".into())?;
    Ok(format!(
        "two runs: {}-byte model and {}-byte metrics identical",
        first.0.len(),
        first.1.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", Duration::from_secs(30), gradient_correctness),
        (2, "aggregation oracle", Duration::from_secs(5), aggregation_oracle),
        (3, "pooling provenance", Duration::from_secs(5), pooling_provenance),
        (4, "desk-scale learning", Duration::from_secs(600), desk_learning),
        (5, "lasso effect", Duration::from_secs(1800), lasso_effect),
        (6, "report fidelity", Duration::from_secs(1), report_fidelity),
        (7, "serialization", Duration::from_secs(10), serialization),
        (8, "determinism", Duration::from_secs(1200), determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{elapsed:.1?}] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{elapsed:.1?}] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
