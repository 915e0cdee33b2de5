mod common;

use common::{batch, family, labeled, rng, tiny, vectors};
use wemoe_core::analysis::{
    count_report, first_choice_matrix, landscape_axis, loss_landscape_grid, observe_routing, param_similarity,
    routing_stats, set_loss, CountConfig, RoutingObservations,
};
use wemoe_core::merge::install_heads;
use wemoe_core::params::apply_vector;
use wemoe_core::wemoe::{upscale, UpscaleOptions};
use wemoe_core::Tensor;

#[test]
fn landscape_corners_and_joint() {
    let cfg = tiny(2);
    let (theta_0, ft) = family(&cfg, 31);
    let mut base = theta_0.clone();
    install_heads(&mut base, &ft).unwrap();
    let taus = vectors(&theta_0, &ft);
    let sets = [labeled(&cfg, 12, 0, 32), labeled(&cfg, 12, 1, 33)];
    let axis = landscape_axis(11).unwrap();
    let grid = loss_landscape_grid(&base, &taus[0], &taus[1], &cfg, [&sets[0], &sets[1]], &axis).unwrap();
    let at = |v: f64| axis.iter().position(|a| *a == v).unwrap();
    let (zero, one) = (at(0.0), at(1.0));
    let ft_1 = apply_vector(&base, &taus[0], 1.0).unwrap();
    let ft_2 = apply_vector(&base, &taus[1], 1.0).unwrap();
    for (k, set) in sets.iter().enumerate() {
        let g = if k == 0 { &grid.loss_a } else { &grid.loss_b };
        assert!((g[zero][zero] - set_loss(&base, &cfg, set).unwrap()).abs() <= 1e-6);
        assert!((g[one][zero] - set_loss(&ft_1, &cfg, set).unwrap()).abs() <= 1e-6);
        assert!((g[zero][one] - set_loss(&ft_2, &cfg, set).unwrap()).abs() <= 1e-6);
    }
    assert_eq!(grid.joint.len(), axis.len());
    for i in 0..axis.len() {
        assert_eq!(grid.joint[i].len(), axis.len());
        for j in 0..axis.len() {
            assert!((grid.joint[i][j] - grid.loss_a[i][j] - grid.loss_b[i][j]).abs() <= 1e-6);
        }
    }
}

#[test]
fn landscape_axis_spans_the_unit_interval() {
    assert_eq!(landscape_axis(3).unwrap(), [-1.0, 0.0, 1.0]);
    assert!(landscape_axis(1).is_err());
}

#[test]
fn similarity_of_a_model_with_itself() {
    let cfg = tiny(1);
    let (theta_0, ft) = family(&cfg, 34);
    for row in param_similarity(&theta_0, &theta_0).unwrap() {
        assert_eq!(row.l2, 0.0);
        assert!((row.cosine - 1.0).abs() < 1e-9, "{row:?}");
    }
    let rows = param_similarity(&theta_0, &ft[0]).unwrap();
    assert!(rows.iter().all(|r| r.l2 > 0.0 && (-1.0..=1.0).contains(&r.cosine)));
    let mut negated = theta_0.clone();
    negated.iter_mut().for_each(|(_, t)| *t = t.scaled(-1.0));
    for row in param_similarity(&theta_0, &negated).unwrap() {
        if !row.degenerate {
            assert!((row.cosine + 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn constant_routers_give_constant_statistics() {
    let cfg = tiny(3);
    let (theta_0, ft) = family(&cfg, 35);
    let mut m = upscale(&theta_0, &ft, &cfg, &UpscaleOptions::default(), &mut rng(36)).unwrap();
    m.force_routers(&[0.3, 0.3, 0.3]).unwrap();
    let sets: Vec<_> = (0..3).map(|t| batch(&cfg, 5, t, 37 + t as u64)).collect();
    let obs = observe_routing(&m, &sets, 2).unwrap();
    for site in routing_stats(&obs) {
        for mean in site {
            assert!(mean.iter().all(|w| (w - 0.3).abs() < 1e-6), "{mean:?}");
        }
    }
    // all ties: everything goes to task 0
    let fc = first_choice_matrix(&obs);
    assert!(fc[0].iter().all(|f| *f == 1.0));
    assert!(fc[1..].iter().flatten().all(|f| *f == 0.0));
}

#[test]
fn one_hot_observations_fill_the_diagonal() {
    let weights = (0..3)
        .map(|t| {
            let mut w = vec![0.0; 6];
            w[t] = 0.9;
            w[3 + t] = 0.7;
            vec![Tensor::new([2, 3], w).unwrap(); 2]
        })
        .collect();
    let obs = RoutingObservations {
        site_ids: vec!["a".into(), "b".into()],
        weights,
    };
    assert!(first_choice_matrix(&obs).iter().flatten().all(|f| *f == 1.0));
    let stats = routing_stats(&obs);
    assert_eq!(stats[1][2], [0.0, 0.0, 0.8]);
}

#[test]
fn desk_counts_match_the_built_model() {
    let cfg = tiny(3);
    let (theta_0, ft) = family(&cfg, 38);
    for depth in 0..=2 {
        let m = upscale(
            &theta_0,
            &ft,
            &cfg,
            &UpscaleOptions {
                router_depth: depth,
                ..UpscaleOptions::default()
            },
            &mut rng(39),
        )
        .unwrap();
        let row = &count_report(&[CountConfig::desk("desk", &cfg, depth, m.scope)])[0];
        assert_eq!(row.trainable, m.num_trainable() as u64);
        assert_eq!(row.n_sites, m.sites.len());
    }
}
