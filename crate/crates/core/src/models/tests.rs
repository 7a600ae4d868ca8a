use super::*;
use crate::numeric::rng;
use crate::tasks::{LatentSide, QueryMode, TaskConfig};

fn small(variant: Variant) -> ModelConfig {
    let s = EncoderShape {
        layers: 2,
        model_dim: 16,
        mlp_dim: 24,
        heads: 2,
    };
    ModelConfig {
        variant,
        implicit: s,
        context: s,
        predictor: s,
        mlp_hidden: vec![20, 20],
        bottleneck_dim: 8,
        query_visible: true,
    }
}

fn build(task: &Task, variant: Variant, seed: u64) -> Model {
    Model::new(task, small(variant), LossSpec::default(), &mut rng::stream(seed, &[])).unwrap()
}

fn linreg(x_dim: usize) -> Task {
    let mut cfg = TaskConfig::new(TaskKind::LinReg);
    cfg.x_dim = Some(x_dim);
    Task::new(cfg, 0).unwrap()
}

fn run(model: &Model, eps: &[&Episode]) -> (Tensor, Option<Tensor>) {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let f = model.forward(&mut g, &p, eps, &mut NoHook, true).unwrap();
    (g.value(f.pred).clone(), f.bottleneck.map(|b| g.value(b).clone()))
}

fn episodes(task: &Task, count: usize, n: usize, seed: u64) -> Vec<Episode> {
    let mut r = rng::stream(seed, &[]);
    (0..count)
        .map(|_| task.sample_episode(n, QueryMode::Id, LatentSide::Train, &mut r).unwrap().1)
        .collect()
}

#[test]
fn zero_readout_predicts_zero() {
    let t = linreg(2);
    let mut m = build(&t, Variant::Implicit, 1);
    for name in ["implicit.readout.w", "implicit.readout.b"] {
        m.params.by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let eps = episodes(&t, 3, 5, 2);
    let refs: Vec<&Episode> = eps.iter().collect();
    assert!(run(&m, &refs).0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_final_mlp_layer_predicts_zero() {
    let t = linreg(1);
    let mut m = build(&t, Variant::ExplicitMlp, 1);
    for name in ["predictor.fc2.w", "predictor.fc2.b"] {
        m.params.by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let eps = episodes(&t, 2, 4, 3);
    let refs: Vec<&Episode> = eps.iter().collect();
    assert!(run(&m, &refs).0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn predictions_ignore_context_order() {
    let t = linreg(2);
    for variant in [Variant::Implicit, Variant::ExplicitMlp, Variant::ExplicitTsf, Variant::ImplicitProxy] {
        let m = build(&t, variant, 4);
        let eps = episodes(&t, 4, 7, 5);
        let mut shuffled = eps.clone();
        for (i, e) in shuffled.iter_mut().enumerate() {
            e.context.rotate_left(i + 1);
            e.context.swap(0, 3);
        }
        let a: Vec<&Episode> = eps.iter().collect();
        let b: Vec<&Episode> = shuffled.iter().collect();
        let (pa, za) = run(&m, &a);
        let (pb, zb) = run(&m, &b);
        assert!(pa.max_abs_diff(&pb) <= 1e-9, "{variant:?}");
        if let (Some(za), Some(zb)) = (za, zb) {
            assert!(za.max_abs_diff(&zb) <= 1e-9);
        }
    }
}

#[test]
fn repeated_pair_bottleneck_constant_in_n() {
    let t = linreg(1);
    let m = build(&t, Variant::ExplicitMlp, 6);
    let base = episodes(&t, 1, 1, 7).remove(0);
    let mut zs = Vec::new();
    for n in [1, 3, 10] {
        let mut e = base.clone();
        e.context = vec![base.context[0].clone(); n];
        zs.push(run(&m, &[&e]).1.unwrap());
    }
    assert!(zs[0].max_abs_diff(&zs[1]) < 1e-12);
    assert!(zs[0].max_abs_diff(&zs[2]) < 1e-12);
}

#[test]
fn explicit_prediction_depends_only_on_bottleneck() {
    let t = linreg(2);
    for variant in [Variant::ExplicitMlp, Variant::ExplicitTsf, Variant::ExplicitKnown] {
        let m = build(&t, variant, 8);
        let eps = episodes(&t, 3, 6, 9);
        let refs: Vec<&Episode> = eps.iter().collect();
        let (pred, z) = run(&m, &refs);
        let z = z.unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let zv = g.constant(z);
        let xs: Vec<&[f64]> = eps.iter().map(|e| e.query_x.as_slice()).collect();
        let replay = m.predict_from_bottleneck(&mut g, &p, zv, &xs, true).unwrap();
        assert_eq!(g.value(replay), &pred, "{variant:?}");
    }
}

#[test]
fn hidden_query_proxy_matches_explicit_mlp() {
    let t = linreg(1);
    let mlp = build(&t, Variant::ExplicitMlp, 10);
    let mut cfg = small(Variant::ImplicitProxy);
    cfg.query_visible = false;
    let proxy = Model::new(&t, cfg, LossSpec::default(), &mut rng::stream(10, &[])).unwrap();
    assert_eq!(proxy.params, mlp.params);
    let eps = episodes(&t, 3, 5, 11);
    let refs: Vec<&Episode> = eps.iter().collect();
    assert_eq!(run(&mlp, &refs), run(&proxy, &refs));
}

#[test]
fn proxy_bottleneck_depends_on_query() {
    let t = linreg(1);
    let m = build(&t, Variant::ImplicitProxy, 12);
    let e = episodes(&t, 1, 5, 13).remove(0);
    let mut e2 = e.clone();
    e2.query_x = vec![e.query_x[0] + 1.0];
    let (_, za) = run(&m, &[&e]);
    let (_, zb) = run(&m, &[&e2]);
    assert!(za.unwrap().max_abs_diff(&zb.unwrap()) > 1e-6);
}

fn known_with_truth(task: &Task, inst_z: &[f64], zh: Vec<f64>, xs: &[Vec<f64>], hard: bool) -> Vec<f64> {
    let mut g = Graph::new();
    let b = xs.len();
    let width = zh.len();
    let z: Vec<f64> = (0..b).flat_map(|_| zh.iter().copied()).collect();
    let z = g.constant(Tensor::new(vec![b, width], z).unwrap());
    let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let out = known_predict(&mut g, task, z, &xr, hard).unwrap();
    let _ = inst_z;
    g.value(out).data().to_vec()
}

#[test]
fn known_predictor_with_true_latent_is_exact() {
    let mut r = rng::stream(14, &[]);
    // linear regression with 3-d inputs, far outside the training range
    let t = linreg(3);
    let inst = t.sample_instance(LatentSide::Train, &mut r).unwrap();
    let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![10.0 * i as f64, -3.0, 7.5]).collect();
    let pred = known_with_truth(&t, &inst.z, inst.z.clone(), &xs, false);
    for (p, x) in pred.iter().zip(&xs) {
        assert!((p - t.mean_label(&inst, x).unwrap()[0]).abs() < 1e-9);
    }
    // sinusoids
    let t = Task::new(TaskConfig::new(TaskKind::SinReg), 3).unwrap();
    let inst = t.sample_instance(LatentSide::Train, &mut r).unwrap();
    let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.37 - 1.0]).collect();
    let pred = known_with_truth(&t, &inst.z, inst.z.clone(), &xs, false);
    for (p, x) in pred.iter().zip(&xs) {
        assert!((p - t.mean_label(&inst, x).unwrap()[0]).abs() < 1e-12);
    }
    // mixture of experts, hard decoding of one-hot logits
    let t = Task::new(TaskConfig::new(TaskKind::MoE), 5).unwrap();
    let inst = t.sample_instance(LatentSide::Train, &mut r).unwrap();
    let logits: Vec<f64> = inst.z.iter().flat_map(|&c| crate::tasks::one_hot(c as usize, 5)).collect();
    let xs: Vec<Vec<f64>> = (0..3).map(|i| vec![0.5 * i as f64, -1.0, 0.3, 2.0]).collect();
    let pred = known_with_truth(&t, &inst.z, logits.clone(), &xs, true);
    for (chunk, x) in pred.chunks(4).zip(&xs) {
        let truth = t.mean_label(&inst, x).unwrap();
        for (a, b) in chunk.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // the soft relaxation converges to the hard one for peaked logits
    let peaked: Vec<f64> = logits.iter().map(|v| 60.0 * v).collect();
    let soft = known_with_truth(&t, &inst.z, peaked, &xs, false);
    for (a, b) in soft.iter().zip(&pred) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn known_predictor_rejects_kinds_without_formula() {
    let t = Task::new(TaskConfig::new(TaskKind::MlpReg), 0).unwrap();
    let cfg = small(Variant::ExplicitKnown);
    assert!(Model::new(&t, cfg, LossSpec::default(), &mut rng::stream(0, &[])).is_err());
}

#[test]
fn loss_spec_validation() {
    let t = linreg(2);
    let aux = |aux, variant, bdim| {
        let mut cfg = small(variant);
        cfg.bottleneck_dim = bdim;
        let spec = LossSpec {
            aux,
            ..LossSpec::default()
        };
        Model::new(&t, cfg, spec, &mut rng::stream(0, &[]))
    };
    assert!(aux(AuxLoss::AuxDecoded, Variant::Implicit, 8).is_err());
    assert!(aux(AuxLoss::AuxDirect, Variant::ExplicitMlp, 8).is_err());
    assert!(aux(AuxLoss::AuxDirect, Variant::ExplicitMlp, 2).is_ok());
    assert!(aux(AuxLoss::AuxDecoded, Variant::ExplicitMlp, 8).is_ok());
    let spec = LossSpec {
        task_loss: Some(TaskLoss::CrossEntropy),
        ..LossSpec::default()
    };
    assert!(Model::new(&t, small(Variant::Implicit), spec, &mut rng::stream(0, &[])).is_err());
}

#[test]
fn auxiliary_terms() {
    let t = linreg(2);
    let eps = episodes(&t, 4, 5, 15);
    let refs: Vec<&Episode> = eps.iter().collect();
    let spec = LossSpec {
        aux: AuxLoss::AuxDecoded,
        ..LossSpec::default()
    };
    let m = Model::new(&t, small(Variant::ExplicitMlp), spec, &mut rng::stream(0, &[])).unwrap();
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let l = m.loss(&mut g, &p, &refs, &mut NoHook).unwrap();
    let z2 = eps.iter().map(|e| e.z.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 4.0;
    assert!((g.value(l.aux.unwrap()).item() - z2).abs() < 1e-12);
    let total = g.value(l.total).item();
    assert!((total - g.value(l.task).item() - z2).abs() < 1e-12);

    let zs: Vec<&[f64]> = eps.iter().map(|e| e.z.as_slice()).collect();
    let flat: Vec<f64> = zs.iter().flat_map(|z| z.iter().copied()).collect();
    let zpsi = g.constant(Tensor::new(vec![4, 2], flat).unwrap());
    let direct = aux_term(&mut g, t.latent(), AuxLoss::AuxDirect, zpsi, None, &zs).unwrap();
    assert_eq!(g.value(direct).item(), 0.0);

    let plain = build(&t, Variant::ExplicitMlp, 0);
    let mut g = Graph::new();
    let p = plain.params.bind(&mut g, false);
    let l = plain.loss(&mut g, &p, &refs, &mut NoHook).unwrap();
    assert!(l.aux.is_none());
    assert_eq!(l.total, l.task);
}

#[test]
fn taps_per_variant() {
    let t = linreg(1);
    let imp = build(&t, Variant::Implicit, 0);
    assert_eq!(imp.taps().len(), 3);
    assert_eq!(imp.tap_dim(Tap::QueryLayer(2)).unwrap(), 16);
    assert!(imp.tap_dim(Tap::Bottleneck).is_err());
    let exp = build(&t, Variant::ExplicitMlp, 0);
    assert_eq!(exp.taps(), vec![Tap::Bottleneck]);
    assert_eq!(exp.tap_dim(Tap::Bottleneck).unwrap(), 8);
}

#[test]
fn default_sizes() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.implicit.layers, 8);
    assert_eq!(cfg.context.layers, 4);
    assert_eq!(cfg.bottleneck_dim, 256);
    assert_eq!(cfg.mlp_hidden, vec![512; 4]);
}

#[test]
fn linear_regression_ablation_sizes() {
    let t = linreg(1);
    let millions = |cfg: ModelConfig| {
        let m = Model::new(&t, cfg, LossSpec::default(), &mut rng::stream(0, &[])).unwrap();
        (m.param_count() as f64 / 1e5).round() / 10.0
    };
    let base = ModelConfig::default();
    let with = |variant, ctx: usize, pred: usize| {
        let mut c = base.clone();
        c.variant = variant;
        c.implicit.layers = ctx;
        c.context.layers = ctx;
        c.predictor.layers = pred;
        c.mlp_hidden = vec![512; pred];
        c
    };
    let table = [
        (Variant::ExplicitMlp, 4, 4, 3.0),
        (Variant::ExplicitMlp, 4, 8, 4.1),
        (Variant::ExplicitMlp, 6, 6, 4.6),
        (Variant::ExplicitMlp, 8, 8, 6.2),
        (Variant::ExplicitTsf, 4, 4, 4.2),
        (Variant::ExplicitTsf, 6, 8, 7.4),
        (Variant::ExplicitKnown, 4, 4, 2.1),
        (Variant::Implicit, 4, 0, 2.1),
        (Variant::Implicit, 8, 0, 4.2),
    ];
    for (variant, ctx, pred, expected) in table {
        assert_eq!(millions(with(variant, ctx, pred)), expected, "{variant:?} {ctx}x{pred}");
    }
}
