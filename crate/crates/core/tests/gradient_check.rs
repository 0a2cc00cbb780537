//! Reverse-mode gradients of the composed offset predictor against central
//! finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadowpc::completion::{offset_graph, ModelConfig};
use shadowpc::geometry::{build_rays, Point3, PointCloud, RayBundle};
use shadowpc::net::params::param_count;
use shadowpc::net::{NetParams, Tape};
use shadowpc::spatial::SpatialIndex;

const SLICE: usize = 48;
const H: f64 = 1e-6;
const MAX_REL_ERR: f64 = 1e-3;
/// Gradients below this magnitude are compared in absolute terms.
const FLOOR: f64 = 1e-6;

struct Problem {
    config: ModelConfig,
    rays: RayBundle,
    gt: SpatialIndex,
}

impl Problem {
    /// Offset-stage loss and, when asked, its gradient.
    fn eval(&self, params: &[f64], grad: bool) -> (f64, Vec<f64>) {
        let layout = self.config.predictor_layout();
        let mut t = Tape::new();
        let b = t.bind(params.to_vec(), &layout, true);
        let nodes = offset_graph(&mut t, b, &self.config, &self.rays).unwrap();
        let (l1, _) = t.chamfer(nodes.p_first, &self.gt).unwrap();
        let (l2, _) = t.chamfer(nodes.p_initial, &self.gt).unwrap();
        let loss = t.add(l1, l2).unwrap();
        let value = t.value(loss).data()[0];
        let g = if grad {
            t.backward(loss).unwrap().remove(0).unwrap().values
        } else {
            Vec::new()
        };
        (value, g)
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, r: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Point3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r)))
            .collect(),
    )
    .unwrap()
}

/// Central difference, or `None` when the one-sided slopes disagree, which
/// marks a relu kink, max-pool switch or nearest-neighbour switch.
fn central_difference(p: &Problem, params: &mut [f64], i: usize, base: f64) -> Option<f64> {
    let x = params[i];
    params[i] = x + H;
    let fp = p.eval(params, false).0;
    params[i] = x - H;
    let fm = p.eval(params, false).0;
    params[i] = x;
    let (right, left) = ((fp - base) / H, (base - fm) / H);
    let scale = right.abs().max(left.abs()).max(FLOOR);
    if (right - left).abs() > 1e-2 * scale {
        return None;
    }
    Some((fp - fm) / (2.0 * H))
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let config = ModelConfig::default();
    let layout = config.predictor_layout();
    let total = param_count(&layout);
    assert!(total <= 50_000, "predictor has {total} parameters");

    let ranges: Vec<_> = (0..layout.len())
        .map(|l| NetParams::xavier(&layout, 0).layer_range(l))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut smooth = 0;
    let mut attempts = 0;
    while smooth < 20 {
        attempts += 1;
        assert!(attempts <= 60, "only {smooth} smooth configurations in {attempts} draws");
        let scan = random_cloud(&mut rng, 24, 0.3);
        let cam = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.5);
        let problem = Problem {
            config: config.clone(),
            rays: build_rays(cam, &scan).unwrap(),
            gt: SpatialIndex::build(&random_cloud(&mut rng, 96, 0.5)),
        };
        // every layer live, including the zero-initialized heads
        let mut params: Vec<f64> = NetParams::xavier(&layout, rng.random()).to_f64();
        for v in params.iter_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
        let (base, grad) = problem.eval(&params, true);
        // the same number of coordinates from every layer
        let per_layer = SLICE / layout.len();
        let slice: Vec<usize> = ranges
            .iter()
            .flat_map(|r| (0..per_layer).map(|_| rng.random_range(r.clone())).collect::<Vec<_>>())
            .collect();
        let mut fd = Vec::with_capacity(SLICE);
        let mut kinked = false;
        for &i in &slice {
            match central_difference(&problem, &mut params, i, base) {
                Some(d) => fd.push(d),
                None => {
                    kinked = true;
                    break;
                }
            }
        }
        if kinked {
            continue;
        }
        smooth += 1;
        assert!(slice.iter().filter(|&&i| grad[i] != 0.0).count() >= SLICE / 4);
        for (&i, &d) in slice.iter().zip(&fd) {
            let g = grad[i];
            let err = (g - d).abs() / g.abs().max(d.abs()).max(FLOOR);
            assert!(err <= MAX_REL_ERR, "param {i}: analytic {g:e}, numeric {d:e}, rel err {err:e}");
        }
    }
}
