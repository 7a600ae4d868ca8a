use icll::numeric::rng;
use icll::tasks::alchemy::{AlchemyPools, POTIONS, STONES};
use icll::tasks::gp::{gp_sample_joint, rbf};
use icll::tasks::{decode_combo, LatentSide, QueryMode, Task, TaskConfig, TaskKind};
use rand::Rng;

#[test]
fn gp_covariance_matches_kernel() {
    let xs = vec![vec![0.0], vec![0.8]];
    let sigma = 1.0;
    let mut r = rng::stream(11, &[]);
    let n = 100_000;
    let (mut s00, mut s01, mut s11, mut m0, mut m1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut prods = Vec::with_capacity(n);
    for _ in 0..n {
        let y = gp_sample_joint(&xs, sigma, &mut r).unwrap();
        m0 += y[0];
        m1 += y[1];
        s00 += y[0] * y[0];
        s11 += y[1] * y[1];
        s01 += y[0] * y[1];
        prods.push(y[0] * y[1]);
    }
    let nf = n as f64;
    let k01 = rbf(&xs[0], &xs[1], sigma);
    let cov = s01 / nf;
    let se = {
        let var = prods.iter().map(|p| (p - cov) * (p - cov)).sum::<f64>() / (nf - 1.0);
        (var / nf).sqrt()
    };
    assert!((cov - k01).abs() < 3.0 * se, "cov {cov} vs {k01}, se {se}");
    // variance of y² for a standard normal is 2
    let se_var = (2.0 / nf).sqrt();
    assert!((s00 / nf - 1.0).abs() < 3.0 * se_var);
    assert!((s11 / nf - 1.0).abs() < 3.0 * se_var);
    assert!((m0 / nf).abs() < 3.0 / nf.sqrt());
    assert!((m1 / nf).abs() < 3.0 / nf.sqrt());
}

#[test]
fn alchemy_contexts_identify_environment() {
    let pools = AlchemyPools::sample([16, 8, 8], &mut rng::stream(5, &[])).unwrap();
    let cards = pools.cards();
    let total = pools.environment_count();
    let tables: Vec<Vec<usize>> = (0..total).map(|i| pools.table(&decode_combo(&cards, i))).collect();
    let mut r = rng::stream(6, &[]);
    let trials = 300;
    let mut unique = 0;
    for _ in 0..trials {
        let truth = r.gen_range(0..total);
        let obs: Vec<usize> = (0..64).map(|_| r.gen_range(0..STONES * POTIONS)).collect();
        let rivals = (0..100)
            .map(|_| r.gen_range(0..total))
            .filter(|&c| c != truth)
            .filter(|&c| obs.iter().all(|&o| tables[c][o] == tables[truth][o]))
            .count();
        if rivals == 0 {
            unique += 1;
        }
    }
    assert!(unique as f64 >= 0.99 * trials as f64, "{unique}/{trials}");
}

#[test]
fn every_kind_generates_finite_episodes() {
    let mut r = rng::stream(7, &[]);
    for kind in TaskKind::ALL {
        let mut cfg = TaskConfig::new(kind);
        cfg.context_min = 16;
        cfg.context_max = 32;
        let t = Task::new(cfg, 2).unwrap();
        for _ in 0..5 {
            let n = t.sample_context_len(&mut r);
            let (_, ep) = t.sample_episode(n, QueryMode::Id, LatentSide::Train, &mut r).unwrap();
            let lay = t.layout();
            for p in &ep.context {
                assert_eq!(p.x.len(), lay.x_raw);
                assert_eq!(p.y.len(), lay.y_raw);
                assert_eq!(t.encode_x(&p.x).len(), lay.x_feat);
                assert_eq!(t.encode_y(&p.y).len(), lay.y_feat);
                assert!(p.x.iter().chain(&p.y).all(|v| v.is_finite()));
            }
        }
    }
}

#[test]
fn classification_labels_follow_conditional() {
    let t = Task::new(TaskConfig::new(TaskKind::LinCls), 3).unwrap();
    let mut r = rng::stream(8, &[]);
    let inst = t.sample_instance(LatentSide::Train, &mut r).unwrap();
    let x = vec![0.7, -0.4];
    let p = t.mean_label(&inst, &x).unwrap();
    let n = 20_000;
    let ones = (0..n).filter(|_| t.label(&inst, &x, &mut r).unwrap()[0] == 1.0).count();
    let freq = ones as f64 / n as f64;
    let se = (p[1] * (1.0 - p[1]) / n as f64).sqrt();
    assert!((freq - p[1]).abs() < 4.0 * se + 1e-12);
}
