use dfkflow::VelocityField;
use dfkflow_bench::{plume_cloud, query_points, random_field};

#[test]
fn fixtures_are_reproducible() {
    let (a, b) = (random_field(3, 5), random_field(3, 5));
    assert_eq!(a.weights, b.weights);
    assert_ne!(a.weights, random_field(4, 5).weights);
    assert_eq!(query_points(1, 50), query_points(1, 50));
    assert_eq!(plume_cloud(2, 32), plume_cloud(2, 32));
}

#[test]
fn fixtures_have_the_requested_sizes() {
    assert_eq!(random_field(0, 4).layout.len(), 64);
    assert_eq!(query_points(0, 17).len(), 17);
    assert_eq!(plume_cloud(0, 40).len(), 40);
}

#[test]
fn random_field_moves_points() {
    let f = random_field(0, 5);
    let speed: f64 = query_points(0, 200).iter().map(|x| f.velocity(x).norm()).sum::<f64>() / 200.0;
    assert!(speed > 1e-3 && speed.is_finite(), "{speed}");
}
