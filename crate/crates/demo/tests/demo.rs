use couple_demo::{diffusion_view, Session};

#[test]
fn diffusion_view_marks_a_gamma_share_of_targets() {
    let v = diffusion_view(3, 60, 3, 0.5).unwrap();
    assert_eq!(v.points.len(), 120);
    assert!(v.confident > 0 && v.confident <= 30);
    assert_eq!(v.points.iter().filter(|p| p.confident).count(), v.confident);
    assert!(v.points.iter().filter(|p| p.confident).all(|p| !p.source));
    assert!(v.points.iter().all(|p| p.mass >= 0.0 && p.x.is_finite() && p.y.is_finite()));
    assert!(v.edges.iter().all(|&(u, w, _)| (u < 60) != (w < 60)));
    assert!(v.nn_accuracy_confident >= v.nn_accuracy_all);
}

#[test]
fn session_summary_and_queries() {
    let s = Session::train(1, 2).unwrap();
    let sum = s.summary();
    assert_eq!(sum.confident_per_round.len(), 2);
    assert!((0.0..=1.0).contains(&sum.warmup_map) && (0.0..=1.0).contains(&sum.adapted_map));
    let q = s.query(5, 10).unwrap();
    assert_eq!(q.hits.len(), 10);
    assert!(q.hits.windows(2).all(|w| w[0].distance <= w[1].distance));
    assert!(s.query(sum.targets, 1).is_err());
    let json = serde_json::to_string(&q).unwrap();
    assert!(json.contains("\"true_label\""));
}
