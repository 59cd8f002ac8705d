//! Fixed inputs shared by the benchmarks.

use std::sync::Arc;

use dfkflow::io::substream;
use dfkflow::scenes::CloudSpec;
use dfkflow::{Aabb, DfkField, GaussianCloud, NodeLayout, Vec3};

/// A lattice field with reproducible weights of roughly unit node-center speed.
pub fn random_field(seed: u64, resolution: usize) -> DfkField {
    let domain = Aabb::unit();
    let layout = Arc::new(NodeLayout::lattice(domain, [resolution; 3], 1.5).expect("valid lattice"));
    let unit = layout.nodes()[0].support.powi(2) / 112.0;
    let cube = Aabb::new([-1.0; 3], [1.0; 3]);
    let mut rng = substream(seed, "bench", 0);
    let weights = (0..layout.len()).map(|_| cube.sample(&mut rng) * unit).collect();
    DfkField::new(layout, weights).expect("finite weights")
}

pub fn query_points(seed: u64, n: usize) -> Vec<Vec3> {
    let mut rng = substream(seed, "bench", 1);
    (0..n).map(|_| Aabb::unit().sample(&mut rng)).collect()
}

pub fn plume_cloud(seed: u64, count: usize) -> GaussianCloud {
    CloudSpec::plume(count).sample(&Aabb::unit(), &mut substream(seed, "bench", 2)).expect("valid cloud spec")
}
