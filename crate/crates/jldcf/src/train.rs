//! Training loop: per-sample SGD over the mirror-augmented dataset with a
//! per-iteration loss trace, plus inference and evaluation helpers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{mirror_triple, SampleTriple};
use crate::error::{MetricError, OpError, TrainError};
use crate::graph::Graph;
use crate::kernels::resize_bilinear_plane;
use crate::loss::{cross_entropy, multitask_loss, LossConfig, LossParts};
use crate::metrics::{aggregate, EvalPair, MetricReport, SaliencyMap};
use crate::net::{ForwardMaps, JlDcfNet, ModalityVariant};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

/// One row of the loss trace CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss_final: f64,
    pub loss_guidance_rgb: f64,
    pub loss_guidance_depth: f64,
    pub loss_total: f64,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
}

/// Extra knobs not carried by the run configuration.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop after this many iterations regardless of epochs.
    pub max_iterations: Option<usize>,
    /// Pure-RGB task samples for multi-task training (cycled per step);
    /// their coarse head shares the JL component.
    pub rgb_task: Option<&'a [SampleTriple]>,
}

/// Modality-aware training loss: the full two-term guidance for RGB-D,
/// or a single coarse term when one modality is routed through identity
/// fusion.
pub fn training_loss(
    g: &mut Graph,
    maps: &ForwardMaps,
    gt: &Tensor,
    cfg: &LossConfig,
    modality: ModalityVariant,
    gt_rgb_task: Option<&Tensor>,
) -> Result<(crate::graph::NodeId, LossParts), OpError> {
    match modality {
        ModalityVariant::RgbD => multitask_loss(g, maps, gt, gt_rgb_task, cfg),
        ModalityVariant::Rgb | ModalityVariant::Depth => {
            let coarse = if matches!(modality, ModalityVariant::Rgb) {
                maps.coarse_rgb
            } else {
                maps.coarse_depth
            };
            let size = g.value(coarse).dims4("training_loss")?.2;
            let gt_down = crate::loss::downsample_target(gt, size)?;
            let l_final = cross_entropy(g, maps.final_map, gt, cfg)?;
            let l_coarse = cross_entropy(g, coarse, &gt_down, cfg)?;
            let weighted = g.scale(l_coarse, cfg.guidance_weight);
            let total = g.add(l_final, weighted)?;
            let coarse_val = g.value(l_coarse).item();
            let parts = LossParts {
                final_loss: g.value(l_final).item(),
                guidance_rgb: if matches!(modality, ModalityVariant::Rgb) {
                    coarse_val
                } else {
                    0.0
                },
                guidance_depth: if matches!(modality, ModalityVariant::Depth) {
                    coarse_val
                } else {
                    0.0
                },
                guidance_rgb_star: None,
                total: g.value(total).item(),
            };
            Ok((total, parts))
        }
    }
}

/// Train in place: epochs of per-sample SGD over the dataset doubled by
/// horizontal mirroring, shuffled per epoch under the run seed.
pub fn train(
    net: &mut JlDcfNet,
    data: &[SampleTriple],
    run: &RunConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    run.validate()?;
    let mut augmented: Vec<SampleTriple> = data.to_vec();
    augmented.extend(data.iter().map(mirror_triple));

    let mut opt = OptimizerState::new(run.optimizer.lr, run.optimizer.momentum, run.optimizer.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut trace = Vec::new();
    let mut iteration = 0usize;

    'epochs: for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..augmented.len()).collect();
        order.shuffle(&mut rng);
        for &idx in &order {
            let sample = &augmented[idx];
            let star = opts
                .rgb_task
                .filter(|t| !t.is_empty())
                .map(|t| &t[iteration % t.len()]);

            let mut g = Graph::new();
            let maps = net.forward(
                &mut g,
                &sample.rgb,
                &sample.depth3,
                star.map(|s| &s.rgb),
            )?;
            let (loss_node, parts) = training_loss(
                &mut g,
                &maps,
                &sample.gt_train,
                &run.loss,
                net.cfg.modality,
                star.map(|s| &s.gt_train),
            )?;
            if !parts.total.is_finite() {
                return Err(TrainError::Diverged {
                    iteration,
                    epoch,
                    loss: parts.total,
                });
            }
            g.backward(loss_node)?;
            let mut grads = maps.binding.harvest(&g);
            let mut step_err: Option<OpError> = None;
            net.visit_params_mut(&mut |name, t| {
                if step_err.is_some() {
                    return;
                }
                if let Some(gr) = grads.remove(&name) {
                    t.grad = Some(gr);
                    if let Err(e) = opt.step_param(&name, t) {
                        step_err = Some(e);
                    }
                }
            });
            if let Some(e) = step_err {
                return Err(e.into());
            }

            trace.push(TraceRow {
                iteration,
                loss_final: parts.final_loss,
                loss_guidance_rgb: parts.guidance_rgb,
                loss_guidance_depth: parts.guidance_depth,
                loss_total: parts.total,
            });
            iteration += 1;
            if opts.max_iterations == Some(iteration) {
                break 'epochs;
            }
        }
    }
    Ok(TrainOutcome { trace })
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<(), TrainError> {
    let mut out = String::from("iteration,l_f,l_g_rgb,l_g_d,total\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.iteration, row.loss_final, row.loss_guidance_rgb, row.loss_guidance_depth, row.loss_total
        ));
    }
    std::fs::write(path, out).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Run inference on one pair at network resolution.
pub fn predict(net: &JlDcfNet, rgb: &Tensor, depth3: &Tensor) -> Result<SaliencyMap, OpError> {
    let mut g = Graph::new();
    let maps = net.forward(&mut g, rgb, depth3, None)?;
    Ok(SaliencyMap::from_tensor(g.value(maps.final_map)))
}

/// Inference resized back to the triple's native resolution.
pub fn predict_native(net: &JlDcfNet, t: &SampleTriple) -> Result<SaliencyMap, OpError> {
    let at_h0 = predict(net, &t.rgb, &t.depth3)?;
    let native = resize_bilinear_plane(
        &at_h0.data,
        (at_h0.width, at_h0.height),
        (t.native_width, t.native_height),
    );
    Ok(SaliencyMap::new(t.native_width, t.native_height, native))
}

/// Evaluate a network over triples at their native ground-truth
/// resolution, skipping images whose masks are all-background.
pub fn evaluate_net(net: &JlDcfNet, triples: &[SampleTriple]) -> Result<MetricReport, TrainError> {
    let mut items = Vec::with_capacity(triples.len());
    for t in triples {
        if t.gt_native.fg_count() == 0 {
            continue;
        }
        let pred = predict_native(net, t)?;
        let pair = EvalPair::new(pred, t.gt_native.clone())
            .expect("prediction resized to the ground-truth resolution");
        items.push((t.stem.clone(), pair));
    }
    aggregate(&items).map_err(|e: MetricError| TrainError::Config(crate::error::ConfigError::Invalid(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OptimizerConfig;
    use crate::net::NetworkConfig;
    use crate::synth::{corpus_triples, SynthConfig};

    fn tiny_run(seed: u64, epochs: usize, input: usize, lr: f64) -> RunConfig {
        RunConfig {
            network: NetworkConfig::toy(input, 4),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                lr,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            seed,
            epochs,
            out_dir: None,
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let run = tiny_run(1, 1, 16, 1e-4);
        let mut net = JlDcfNet::init(&run.network, run.seed).unwrap();
        assert!(matches!(
            train(&mut net, &[], &run, &TrainOptions::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn one_epoch_visits_twice_the_samples() {
        let triples = corpus_triples(
            &SynthConfig {
                count: 3,
                size: 16,
                seed: 2,
            },
            16,
        );
        let run = tiny_run(3, 1, 16, 1e-5);
        let mut net = JlDcfNet::init(&run.network, run.seed).unwrap();
        let outcome = train(&mut net, &triples, &run, &TrainOptions::default()).unwrap();
        assert_eq!(outcome.trace.len(), 6); // mirroring doubles the data
        for (i, row) in outcome.trace.iter().enumerate() {
            assert_eq!(row.iteration, i);
            assert!(row.loss_total.is_finite());
            assert!(row.loss_total >= 0.0);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_trace_bitwise() {
        let triples = corpus_triples(
            &SynthConfig {
                count: 2,
                size: 16,
                seed: 5,
            },
            16,
        );
        let run = tiny_run(7, 2, 16, 1e-5);
        let mut net1 = JlDcfNet::init(&run.network, run.seed).unwrap();
        let t1 = train(&mut net1, &triples, &run, &TrainOptions::default()).unwrap();
        let mut net2 = JlDcfNet::init(&run.network, run.seed).unwrap();
        let t2 = train(&mut net2, &triples, &run, &TrainOptions::default()).unwrap();
        assert_eq!(t1.trace, t2.trace);
    }

    #[test]
    fn divergent_lr_aborts_with_diagnostic() {
        let triples = corpus_triples(
            &SynthConfig {
                count: 2,
                size: 16,
                seed: 5,
            },
            16,
        );
        let run = tiny_run(7, 50, 16, 1e6);
        let mut net = JlDcfNet::init(&run.network, run.seed).unwrap();
        match train(&mut net, &triples, &run, &TrainOptions::default()) {
            Err(TrainError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn max_iterations_caps_the_run() {
        let triples = corpus_triples(
            &SynthConfig {
                count: 4,
                size: 16,
                seed: 6,
            },
            16,
        );
        let run = tiny_run(8, 100, 16, 1e-5);
        let mut net = JlDcfNet::init(&run.network, run.seed).unwrap();
        let outcome = train(
            &mut net,
            &triples,
            &run,
            &TrainOptions {
                max_iterations: Some(5),
                rgb_task: None,
            },
        )
        .unwrap();
        assert_eq!(outcome.trace.len(), 5);
    }

    #[test]
    fn multitask_training_runs_and_traces() {
        let triples = corpus_triples(
            &SynthConfig {
                count: 2,
                size: 16,
                seed: 9,
            },
            16,
        );
        let rgb_task = corpus_triples(
            &SynthConfig {
                count: 3,
                size: 16,
                seed: 10,
            },
            16,
        );
        let run = tiny_run(11, 1, 16, 1e-5);
        let mut net = JlDcfNet::init(&run.network, run.seed).unwrap();
        let outcome = train(
            &mut net,
            &triples,
            &run,
            &TrainOptions {
                max_iterations: None,
                rgb_task: Some(&rgb_task),
            },
        )
        .unwrap();
        assert_eq!(outcome.trace.len(), 4);
    }

    #[test]
    fn predict_native_resizes_back() {
        let triples = corpus_triples(
            &SynthConfig {
                count: 1,
                size: 48,
                seed: 12,
            },
            16,
        );
        let net = JlDcfNet::init(&NetworkConfig::toy(16, 4), 1).unwrap();
        let map = predict_native(&net, &triples[0]).unwrap();
        assert_eq!((map.width, map.height), (48, 48));
        assert!(map.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = vec![TraceRow {
            iteration: 0,
            loss_final: 1.5,
            loss_guidance_rgb: 0.5,
            loss_guidance_depth: 0.25,
            loss_total: 2.25,
        }];
        write_trace_csv(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iteration,l_f,l_g_rgb,l_g_d,total"));
        assert_eq!(lines.next(), Some("0,1.5,0.5,0.25,2.25"));
    }
}
