// scratch: compare structured band estimator against counting and truth
use zoll_core::crofton::*;
use zoll_core::finsler::FinslerMetric;
use zoll_core::sphere::*;
use rand::Rng;
use rand::SeedableRng;

fn main() {
    let fam = family_from_metric(&FinslerMetric::round(), 4096, 1).unwrap();
    let det = reconstruct_metric(&fam, &ReconstructionConfig::default()).unwrap();
    let mc_cfg = ReconstructionConfig {
        mode: ReconstructionMode::MonteCarlo,
        probe_half_length: 0.05,
        min_members: 100,
    };
    let mc = reconstruct_metric(&fam, &mc_cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..12 {
        let x = zoll_core::finsler::random_sphere_point(&mut rng);
        let (e1, e2) = x.tangent_frame();
        let phi: f64 = rng.random_range(0.0..TWO_PI);
        let v = e1 * phi.cos() + e2 * phi.sin();
        println!(
            "z={:+.3} band={:.5} counting={:.5}",
            x.coords().z,
            det.eval(&x, &v),
            mc.eval(&x, &v)
        );
    }
}
