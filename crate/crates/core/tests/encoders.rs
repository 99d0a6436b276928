//! Encoder symmetries, residual identity, output scale and parameter counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tspnco::model::{
    parameter_count, read_container, write_container, Container, EncoderConfig, EncoderKind, Mode, ModelConfig,
    PolicyModel, TensorGroup,
};
use tspnco::tsp::{generate_instance, TspInstance};
use tspnco_autograd::Graph;

fn config(kind: EncoderKind, layers: usize, d: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            kind,
            layers,
            embed_dim: d,
            heads: 4,
            ff_dim: 2 * d,
        },
        clip: 10.0,
    }
}

const KINDS: [EncoderKind; 2] = [EncoderKind::GraphTransformer, EncoderKind::GatedGcn];

/// Model whose running batch-norm statistics are not the identity, so eval
/// mode exercises them.
fn warmed(kind: EncoderKind, seed: u64) -> PolicyModel {
    let mut model = PolicyModel::new(config(kind, 2, 16), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let insts: Vec<TspInstance> = (0..4).map(|_| generate_instance(7, &mut rng).unwrap()).collect();
    let batch: Vec<&TspInstance> = insts.iter().collect();
    let mut g = Graph::new();
    let mut updates = Vec::new();
    model.encode(&mut g, &batch, Mode::Train, &mut updates).unwrap();
    model.apply_bn_updates(&updates);
    model
}

#[test]
fn permutation_equivariance() {
    for kind in KINDS {
        let model = warmed(kind, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let inst = generate_instance(9, &mut rng).unwrap();
            let perm = [3, 0, 8, 5, 1, 7, 2, 6, 4];
            let (node, graph) = model.embed(&inst).unwrap();
            let (pnode, pgraph) = model.embed(&inst.permuted(&perm).unwrap()).unwrap();
            let d = 16;
            for (i, &p) in perm.iter().enumerate() {
                for c in 0..d {
                    let a = pnode.data()[i * d + c];
                    let b = node.data()[p * d + c];
                    assert!((a - b).abs() < 1e-8, "{kind:?} node {i} dim {c}: {a} vs {b}");
                }
            }
            for (a, b) in graph.data().iter().zip(pgraph.data()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn coincident_nodes_share_embeddings() {
    for kind in KINDS {
        let model = warmed(kind, 2);
        let inst = TspInstance::new(vec![[0.2, 0.3], [0.7, 0.1], [0.2, 0.3], [0.9, 0.9], [0.4, 0.6]]).unwrap();
        let (node, _) = model.embed(&inst).unwrap();
        assert_eq!(node.data()[0..16], node.data()[32..48], "{kind:?}");
    }
}

#[test]
fn graph_embedding_is_node_mean_and_eval_is_deterministic() {
    for kind in KINDS {
        let model = warmed(kind, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let insts: Vec<TspInstance> = (0..5).map(|_| generate_instance(8, &mut rng).unwrap()).collect();
        for inst in &insts {
            let (node, graph) = model.embed(inst).unwrap();
            let (node2, graph2) = model.embed(inst).unwrap();
            assert_eq!(node, node2);
            assert_eq!(graph, graph2);
            for c in 0..16 {
                let mean = (0..8).map(|i| node.data()[i * 16 + c]).sum::<f64>() / 8.0;
                assert!((mean - graph.data()[c]).abs() < 1e-10);
            }
        }
        let batch: Vec<&TspInstance> = insts.iter().collect();
        let mut g = Graph::new();
        let emb = model.encode(&mut g, &batch, Mode::Eval, &mut Vec::new()).unwrap();
        let all = g.value(emb.node).data();
        for (b, inst) in insts.iter().enumerate() {
            let (node, _) = model.embed(inst).unwrap();
            assert_eq!(&all[b * 8 * 16..(b + 1) * 8 * 16], node.data(), "batched differs from single");
        }
    }
}

#[test]
fn gated_layer_with_zero_weights_is_the_identity() {
    let mut model = PolicyModel::new(config(EncoderKind::GatedGcn, 1, 8), 5).unwrap();
    let names: Vec<String> = model
        .store()
        .iter()
        .map(|(_, n, _, _)| n.to_string())
        .filter(|n| ["un", "vn", "ue", "ve"].iter().any(|p| n.starts_with(&format!("enc.0.{p}."))))
        .collect();
    assert_eq!(names.len(), 8);
    for name in &names {
        let id = model.store().id(name).unwrap();
        model.store_mut().get_mut(id).data_mut().fill(0.0);
    }
    let inst = TspInstance::new(vec![[0.1, 0.9], [0.5, 0.5], [0.8, 0.2], [0.3, 0.4]]).unwrap();
    let w = model.store().by_name("enc.node.w").unwrap().data().to_vec();
    let b = model.store().by_name("enc.node.b").unwrap().data().to_vec();
    for mode in [Mode::Eval, Mode::Train] {
        let mut g = Graph::new();
        let emb = model.encode(&mut g, &[&inst], mode, &mut Vec::new()).unwrap();
        let out = g.value(emb.node).data();
        for (i, c) in inst.coords().iter().enumerate() {
            for k in 0..8 {
                let expect = c[0] * w[k] + c[1] * w[8 + k] + b[k];
                assert!((out[i * 8 + k] - expect).abs() < 1e-14, "{mode:?}");
            }
        }
    }
}

#[test]
fn embeddings_are_bounded_after_init() {
    for kind in KINDS {
        for seed in 0..5 {
            let model = PolicyModel::new(config(kind, 3, 32), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = generate_instance(20, &mut rng).unwrap();
            let (node, graph) = model.embed(&inst).unwrap();
            let max = node.data().iter().chain(graph.data()).fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max.is_finite() && max <= 1e3, "{kind:?}: {max}");
        }
    }
}

#[test]
fn gcn_has_fewer_than_sixty_percent_of_transformer_parameters() {
    let gcn = parameter_count(&ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::GatedGcn,
            ..EncoderConfig::default()
        },
        clip: 10.0,
    });
    let gat = parameter_count(&ModelConfig::default());
    assert!((gcn as f64) < 0.6 * gat as f64, "{gcn} vs {gat}");
}

#[test]
fn doubling_width_roughly_quadruples_the_count() {
    for kind in KINDS {
        let small = parameter_count(&config(kind, 3, 128)) as f64;
        let large = parameter_count(&config(kind, 3, 256)) as f64;
        let ratio = large / small;
        assert!((3.8..=4.0).contains(&ratio), "{kind:?}: {ratio}");
    }
}

#[test]
fn count_matches_serialized_trainable_scalars() {
    for kind in KINDS {
        let c = config(kind, 2, 16);
        let model = PolicyModel::new(c, 0).unwrap();
        let mut buf = Vec::new();
        write_container(
            &mut buf,
            &Container {
                header: serde_json::Value::Null,
                groups: vec![TensorGroup {
                    name: "policy".into(),
                    store: model.store().clone(),
                }],
            },
        )
        .unwrap();
        let back = read_container(&buf[..]).unwrap();
        let counted: usize = back.groups[0]
            .store
            .iter()
            .filter(|(_, _, _, trainable)| *trainable)
            .map(|(_, _, t, _)| t.numel())
            .sum();
        assert_eq!(counted, parameter_count(&c));
    }
}
