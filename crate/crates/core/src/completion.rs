//! View-constrained completion: offset prediction along camera rays, signed
//! offset adjustment, and two bounded refinement layers.
//!
//! Every stage is expressed once as a graph on a [`Tape`]; inference binds
//! the parameters as frozen blocks and reads the node values back, training
//! binds them as trainable and differentiates a loss built on the same nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_rays, constraint_value, OffsetConstraint, OffsetMatrix, Point3, PointCloud, RayBundle,
};
use crate::net::matrix::Matrix;
use crate::net::params::{Activation, LayerSpec, NetParams};
use crate::net::tape::{cloud_to_matrix, matrix_to_cloud, BlockId, Tape, Var};
use crate::spatial::farthest_point_sample;

/// Per-dimension move bound used when the offset constraint is ablated.
pub const UNCONSTRAINED_BOUND: f64 = 0.5;

/// Initial, adjustment and final offsets, one row per ray.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub initial: OffsetMatrix,
    pub adjustment: OffsetMatrix,
    pub final_offsets: OffsetMatrix,
}

impl OffsetField {
    /// A field with no adjustment applied yet.
    pub fn from_initial(initial: OffsetMatrix) -> Result<Self> {
        if let Some((row, col, value)) = initial.first_negative() {
            return Err(Error::NegativeOffset { row, col, value });
        }
        Ok(Self {
            adjustment: OffsetMatrix::zeros(initial.rows(), initial.cols()),
            final_offsets: initial.clone(),
            initial,
        })
    }

    /// `final = max(0, initial + adjustment)`.
    pub fn with_adjustment(initial: OffsetMatrix, adjustment: OffsetMatrix) -> Result<Self> {
        if initial.rows() != adjustment.rows() || initial.cols() != adjustment.cols() {
            return Err(Error::ShapeMismatch {
                what: "adjustment vs initial offsets",
                expected: initial.values().len(),
                found: adjustment.values().len(),
            });
        }
        if let Some((row, col, value)) = initial.first_negative() {
            return Err(Error::NegativeOffset { row, col, value });
        }
        let values = initial
            .values()
            .iter()
            .zip(adjustment.values())
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        let final_offsets = OffsetMatrix::from_vec(initial.rows(), initial.cols(), values)?;
        Ok(Self {
            initial,
            adjustment,
            final_offsets,
        })
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// The adjustment head is skipped; final offsets equal initial ones.
    NoAdjustment,
    /// Refinement moves use [`UNCONSTRAINED_BOUND`] instead of the offset-dependent box.
    NoConstraint,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "no-adjustment" => Ok(Self::NoAdjustment),
            "no-constraint" => Ok(Self::NoConstraint),
            other => Err(Error::InvalidArgument(format!("unknown ablation '{other}'"))),
        }
    }
}

/// Down-sampling and splitting schedule of the refinement stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementPlan {
    pub fps_count: usize,
    pub split_factors: Vec<usize>,
    pub constraint: OffsetConstraint,
    /// Replaces the offset-dependent bound with a constant when set.
    pub fixed_bound: Option<f64>,
}

impl Default for RefinementPlan {
    fn default() -> Self {
        Self {
            fps_count: 256,
            split_factors: vec![1, 8],
            constraint: OffsetConstraint::default(),
            fixed_bound: None,
        }
    }
}

impl RefinementPlan {
    pub fn validate(&self) -> Result<()> {
        self.constraint.validate()?;
        if self.split_factors.len() != self.constraint.layer_count {
            return Err(Error::ShapeMismatch {
                what: "split factors vs constraint layers",
                expected: self.constraint.layer_count,
                found: self.split_factors.len(),
            });
        }
        if self.fps_count == 0 || self.split_factors.contains(&0) {
            return Err(Error::InvalidArgument("refinement counts must be positive".into()));
        }
        if let Some(b) = self.fixed_bound {
            if !(b > 0.0) {
                return Err(Error::InvalidArgument(format!("fixed bound must be positive, got {b}")));
            }
        }
        Ok(())
    }

    /// Point count after refinement layer `layer` (1-based).
    pub fn count_after(&self, layer: usize) -> usize {
        self.fps_count * self.split_factors[..layer].iter().product::<usize>()
    }

    pub fn final_count(&self) -> usize {
        self.count_after(self.split_factors.len())
    }

    /// Per-dimension bound for a point with total offset `o` at `layer`.
    pub fn bound(&self, o: f64, layer: usize) -> f64 {
        match self.fixed_bound {
            Some(b) => b,
            None => constraint_value(&self.constraint, o, layer),
        }
    }
}

/// Network sizes and stage counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Points placed on every ray.
    pub points_per_ray: usize,
    pub ray_width: usize,
    pub global_width: usize,
    pub head_width: usize,
    pub adjust_width: usize,
    pub adjust_global: usize,
    pub refine_width: usize,
    pub refine_global: usize,
    pub plan: RefinementPlan,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            points_per_ray: 4,
            ray_width: 64,
            global_width: 128,
            head_width: 64,
            adjust_width: 32,
            adjust_global: 64,
            refine_width: 64,
            refine_global: 64,
            plan: RefinementPlan::default(),
            ablation: Ablation::None,
        }
    }
}

/// Predictor layer indices.
mod pl {
    pub const RAY: usize = 0;
    pub const GLOBAL: usize = 1;
    pub const HEAD: usize = 2;
    pub const OFFSET: usize = 3;
    pub const ADJ_ENC: usize = 4;
    pub const ADJ_GLOBAL: usize = 5;
    pub const ADJ_HEAD: usize = 6;
    pub const DELTA: usize = 7;
}

impl ModelConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self.plan.fixed_bound = (ablation == Ablation::NoConstraint).then_some(UNCONSTRAINED_BOUND);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_ray == 0 {
            return Err(Error::InvalidArgument("points per ray must be positive".into()));
        }
        self.plan.validate()
    }

    pub fn predictor_layout(&self) -> Vec<LayerSpec> {
        use Activation::*;
        let l = self.points_per_ray;
        let fp = 2 * self.global_width;
        vec![
            LayerSpec::new(Relu, 6, self.ray_width),
            LayerSpec::new(None, self.ray_width, self.global_width),
            LayerSpec::new(Relu, fp, self.head_width),
            LayerSpec::new(Relu, self.head_width, l),
            LayerSpec::new(Relu, 3, self.adjust_width),
            LayerSpec::new(None, self.adjust_width, self.adjust_global),
            LayerSpec::new(Relu, fp + self.adjust_global, self.head_width),
            LayerSpec::new(None, self.head_width, l),
        ]
    }

    /// Encoder pair, then a hidden and an output layer per refinement unit.
    pub fn refiner_layout(&self) -> Vec<LayerSpec> {
        use Activation::*;
        let mut layout = vec![
            LayerSpec::new(Relu, 3, self.adjust_width),
            LayerSpec::new(None, self.adjust_width, self.refine_global),
        ];
        for &k in &self.plan.split_factors {
            layout.push(LayerSpec::new(Relu, 4 + self.refine_global, self.refine_width));
            layout.push(LayerSpec::new(None, self.refine_width, 3 * k));
        }
        layout
    }

    /// Freshly initialized parameters; the layers producing offsets,
    /// adjustments and refinement moves start at zero.
    pub fn init_params(&self, seed: u64) -> (NetParams, NetParams) {
        let mut predictor = NetParams::xavier(&self.predictor_layout(), seed);
        predictor.zero_layer(pl::OFFSET);
        predictor.zero_layer(pl::DELTA);
        let mut refiner = NetParams::xavier(&self.refiner_layout(), seed ^ 0x005E_ED0F_2EF1);
        for u in 0..self.plan.split_factors.len() {
            refiner.zero_layer(3 + 2 * u);
        }
        (predictor, refiner)
    }
}

/// The four stage clouds of one completion.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionTrace {
    pub p_first: PointCloud,
    pub p_initial: PointCloud,
    pub p_mid: PointCloud,
    pub p_final: PointCloud,
    pub offsets: OffsetField,
    /// Ids into `p_initial` kept as refinement parents.
    pub parent_ids: Vec<usize>,
    /// Total ray offset carried by each point of `p_final`.
    pub final_point_offsets: Vec<f64>,
}

/// Nodes of the offset stage recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct OffsetNodes {
    pub per_ray: Var,
    pub initial: Var,
    pub p_first: Var,
    pub adjustment: Option<Var>,
    pub final_offsets: Var,
    pub p_initial: Var,
}

/// Nodes of the refinement stage recorded on a tape.
#[derive(Debug, Clone)]
pub struct RefineNodes {
    pub layers: Vec<Var>,
    pub parent_ids: Vec<usize>,
    pub point_offsets: Var,
}

fn ray_matrices(rays: &RayBundle) -> (Matrix, Matrix) {
    let n = rays.len();
    let mut feats = Matrix::zeros(n, 6);
    let mut dirs = Matrix::zeros(n, 3);
    for (i, (p, r)) in rays.origins().iter().zip(rays.directions()).enumerate() {
        feats.row_mut(i).copy_from_slice(&[p.x, p.y, p.z, r.x, r.y, r.z]);
        dirs.row_mut(i).copy_from_slice(&r.to_array());
    }
    (feats, dirs)
}

/// `origin + d * ray` for every (ray, slot) pair, rows ordered `i * L + l`.
fn displace_on_tape(t: &mut Tape, origins: Var, dirs: Var, offsets: Var, l: usize) -> Result<Var> {
    let n = t.value(offsets).rows();
    let col = t.reshape(offsets, n * l, 1)?;
    let o = t.repeat_rows(origins, l);
    let r = t.repeat_rows(dirs, l);
    let moved = t.mul_col(r, col)?;
    t.add(o, moved)
}

/// Records offset prediction and adjustment.
pub fn offset_graph(
    t: &mut Tape,
    predictor: BlockId,
    config: &ModelConfig,
    rays: &RayBundle,
) -> Result<OffsetNodes> {
    if rays.is_empty() {
        return Err(Error::EmptyInput);
    }
    let l = config.points_per_ray;
    let n = rays.len();
    let (feats, dirs) = ray_matrices(rays);
    let feats = t.constant(feats);
    let dirs = t.constant(dirs);
    let origins = t.constant(cloud_to_matrix(rays.origins()));

    let h = t.dense(predictor, pl::RAY, feats)?;
    let (g1, per) = t.set_encode(predictor, pl::GLOBAL..pl::GLOBAL + 1, h)?;
    let g1 = t.broadcast_rows(g1, n)?;
    let per_ray = t.concat(&[per, g1])?;
    let initial = t.mlp(predictor, pl::HEAD..pl::OFFSET + 1, per_ray)?;
    let p_first = displace_on_tape(t, origins, dirs, initial, l)?;

    if config.ablation == Ablation::NoAdjustment {
        return Ok(OffsetNodes {
            per_ray,
            initial,
            p_first,
            adjustment: None,
            final_offsets: initial,
            p_initial: p_first,
        });
    }
    let (g2, _) = t.set_encode(predictor, pl::ADJ_ENC..pl::ADJ_GLOBAL + 1, p_first)?;
    let g2 = t.broadcast_rows(g2, n)?;
    let joint = t.concat(&[per_ray, g2])?;
    let delta = t.mlp(predictor, pl::ADJ_HEAD..pl::DELTA + 1, joint)?;
    let sum = t.add(initial, delta)?;
    let final_offsets = t.relu(sum);
    let p_initial = displace_on_tape(t, origins, dirs, final_offsets, l)?;
    Ok(OffsetNodes {
        per_ray,
        initial,
        p_first,
        adjustment: Some(delta),
        final_offsets,
        p_initial,
    })
}

/// Records farthest point sampling of `p_o` followed by the refinement units.
///
/// `point_offsets` is the `|p_o| x 1` column of total offsets; parents keep
/// theirs through sampling and children inherit them.
pub fn refine_graph(
    t: &mut Tape,
    refiner: BlockId,
    config: &ModelConfig,
    p_o: Var,
    point_offsets: Var,
) -> Result<RefineNodes> {
    let plan = &config.plan;
    plan.validate()?;
    let cloud = matrix_to_cloud(t.value(p_o))?;
    if cloud.len() < plan.fps_count {
        return Err(Error::InsufficientPoints {
            needed: plan.fps_count,
            available: cloud.len(),
        });
    }
    let parent_ids = farthest_point_sample(&cloud, plan.fps_count, 0);
    let (g, _) = t.set_encode(refiner, 0..2, p_o)?;

    let mut pos = t.gather_rows(p_o, &parent_ids);
    let mut offs = t.gather_rows(point_offsets, &parent_ids);
    let mut layers = Vec::new();
    for (u, &k) in plan.split_factors.iter().enumerate() {
        let layer = u + 1;
        let n = t.value(pos).rows();
        let gb = t.broadcast_rows(g, n)?;
        let input = t.concat(&[pos, offs, gb])?;
        let raw = t.mlp(refiner, 2 + 2 * u..4 + 2 * u, input)?;
        let raw = t.reshape(raw, n * k, 3)?;
        let raw = t.tanh(raw);
        let child_offs = t.repeat_rows(offs, k);
        let bound = match plan.fixed_bound {
            Some(b) => t.constant(Matrix::from_vec(n * k, 1, vec![b; n * k])?),
            None => {
                let decay = plan.constraint.layer_decay(layer);
                t.affine(child_offs, 0.5 / decay, plan.constraint.base / decay)
            }
        };
        let moves = t.mul_col(raw, bound)?;
        let base = t.repeat_rows(pos, k);
        pos = t.add(base, moves)?;
        offs = child_offs;
        layers.push(pos);
    }
    Ok(RefineNodes {
        layers,
        parent_ids,
        point_offsets: offs,
    })
}

/// All nodes of a full forward pass.
pub struct ForwardNodes {
    pub offsets: OffsetNodes,
    pub refine: RefineNodes,
}

/// Records the whole pipeline for one scan.
pub fn forward_graph(
    t: &mut Tape,
    predictor: BlockId,
    refiner: BlockId,
    config: &ModelConfig,
    rays: &RayBundle,
) -> Result<ForwardNodes> {
    let offsets = offset_graph(t, predictor, config, rays)?;
    let total = t.value(offsets.p_initial).rows();
    let col = t.reshape(offsets.final_offsets, total, 1)?;
    let refine = refine_graph(t, refiner, config, offsets.p_initial, col)?;
    Ok(ForwardNodes { offsets, refine })
}

fn offset_matrix(m: &Matrix) -> Result<OffsetMatrix> {
    OffsetMatrix::from_vec(m.rows(), m.cols(), m.data().to_vec())
}

fn check_layout(params: &NetParams, want: &[LayerSpec], what: &'static str) -> Result<()> {
    if params.layout != want {
        return Err(Error::ShapeMismatch {
            what,
            expected: crate::net::params::param_count(want),
            found: params.len(),
        });
    }
    Ok(())
}

/// Initial non-negative offsets for every ray.
pub fn predict_offsets(
    rays: &RayBundle,
    config: &ModelConfig,
    predictor: &NetParams,
) -> Result<OffsetField> {
    check_layout(predictor, &config.predictor_layout(), "predictor layout")?;
    let cfg = config.clone().with_ablation(Ablation::NoAdjustment);
    let mut t = Tape::new();
    let b = t.bind(predictor.to_f64(), &predictor.layout, false);
    let nodes = offset_graph(&mut t, b, &cfg, rays)?;
    OffsetField::from_initial(offset_matrix(t.value(nodes.initial))?)
}

/// Adds the signed adjustment to `field.initial`.
pub fn adjust_offsets(
    field: &OffsetField,
    p_first: &PointCloud,
    rays: &RayBundle,
    config: &ModelConfig,
    predictor: &NetParams,
) -> Result<OffsetField> {
    let l = config.points_per_ray;
    if field.initial.rows() != rays.len() || field.initial.cols() != l {
        return Err(Error::ShapeMismatch {
            what: "offset field vs rays",
            expected: rays.len() * l,
            found: field.initial.values().len(),
        });
    }
    if p_first.len() != rays.len() * l {
        return Err(Error::ShapeMismatch {
            what: "first completion vs rays",
            expected: rays.len() * l,
            found: p_first.len(),
        });
    }
    if config.ablation == Ablation::NoAdjustment {
        return OffsetField::from_initial(field.initial.clone());
    }
    check_layout(predictor, &config.predictor_layout(), "predictor layout")?;
    let mut t = Tape::new();
    let b = t.bind(predictor.to_f64(), &predictor.layout, false);
    let (feats, _) = ray_matrices(rays);
    let feats = t.constant(feats);
    let h = t.dense(b, pl::RAY, feats)?;
    let (g1, per) = t.set_encode(b, pl::GLOBAL..pl::GLOBAL + 1, h)?;
    let g1 = t.broadcast_rows(g1, rays.len())?;
    let per_ray = t.concat(&[per, g1])?;
    let pf = t.constant(cloud_to_matrix(p_first));
    let (g2, _) = t.set_encode(b, pl::ADJ_ENC..pl::ADJ_GLOBAL + 1, pf)?;
    let g2 = t.broadcast_rows(g2, rays.len())?;
    let joint = t.concat(&[per_ray, g2])?;
    let delta = t.mlp(b, pl::ADJ_HEAD..pl::DELTA + 1, joint)?;
    OffsetField::with_adjustment(field.initial.clone(), offset_matrix(t.value(delta))?)
}

/// Output of [`refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub p_mid: PointCloud,
    pub p_final: PointCloud,
    pub parent_ids: Vec<usize>,
    /// Offsets carried by the sampled parents.
    pub parent_offsets: Vec<f64>,
    pub final_point_offsets: Vec<f64>,
}

/// Samples parents from `p_o` and runs the refinement units.
pub fn refine(
    p_o: &PointCloud,
    field: &OffsetField,
    config: &ModelConfig,
    refiner: &NetParams,
) -> Result<Refined> {
    check_layout(refiner, &config.refiner_layout(), "refiner layout")?;
    let offs = field.final_offsets.values();
    if offs.len() != p_o.len() {
        return Err(Error::ShapeMismatch {
            what: "point offsets vs points",
            expected: p_o.len(),
            found: offs.len(),
        });
    }
    let mut t = Tape::new();
    let b = t.bind(refiner.to_f64(), &refiner.layout, false);
    let pv = t.constant(cloud_to_matrix(p_o));
    let ov = t.constant(Matrix::from_vec(offs.len(), 1, offs.to_vec())?);
    let nodes = refine_graph(&mut t, b, config, pv, ov)?;
    collect_refined(&t, &nodes, offs)
}

fn collect_refined(t: &Tape, nodes: &RefineNodes, offs: &[f64]) -> Result<Refined> {
    let first = nodes.layers.first().copied().ok_or(Error::EmptyInput)?;
    let last = *nodes.layers.last().expect("non-empty");
    Ok(Refined {
        p_mid: matrix_to_cloud(t.value(first))?,
        p_final: matrix_to_cloud(t.value(last))?,
        parent_offsets: nodes.parent_ids.iter().map(|&i| offs[i]).collect(),
        parent_ids: nodes.parent_ids.clone(),
        final_point_offsets: t.value(nodes.point_offsets).data().to_vec(),
    })
}

/// Trained (or freshly initialized) completion model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub predictor: NetParams,
    pub refiner: NetParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (predictor, refiner) = config.init_params(seed);
        Ok(Self {
            config,
            predictor,
            refiner,
        })
    }

    pub fn from_params(config: ModelConfig, predictor: NetParams, refiner: NetParams) -> Result<Self> {
        config.validate()?;
        check_layout(&predictor, &config.predictor_layout(), "predictor layout")?;
        check_layout(&refiner, &config.refiner_layout(), "refiner layout")?;
        Ok(Self {
            config,
            predictor,
            refiner,
        })
    }

    /// Runs every stage on one scan.
    pub fn complete(&self, scan: &PointCloud, cam: Point3) -> Result<CompletionTrace> {
        complete(scan, cam, &self.config, &self.predictor, &self.refiner)
    }
}

/// Rays, offsets, adjustment and refinement for one scan.
pub fn complete(
    scan: &PointCloud,
    cam: Point3,
    config: &ModelConfig,
    predictor: &NetParams,
    refiner: &NetParams,
) -> Result<CompletionTrace> {
    if scan.is_empty() {
        return Err(Error::EmptyCloud);
    }
    check_layout(predictor, &config.predictor_layout(), "predictor layout")?;
    check_layout(refiner, &config.refiner_layout(), "refiner layout")?;
    let rays = build_rays(cam, scan)?;
    let mut t = Tape::new();
    let pb = t.bind(predictor.to_f64(), &predictor.layout, false);
    let rb = t.bind(refiner.to_f64(), &refiner.layout, false);
    let nodes = forward_graph(&mut t, pb, rb, config, &rays)?;
    let o = &nodes.offsets;
    let initial = offset_matrix(t.value(o.initial))?;
    let offsets = match o.adjustment {
        Some(d) => OffsetField::with_adjustment(initial, offset_matrix(t.value(d))?)?,
        None => OffsetField::from_initial(initial)?,
    };
    let refined = collect_refined(&t, &nodes.refine, offsets.final_offsets.values())?;
    Ok(CompletionTrace {
        p_first: matrix_to_cloud(t.value(o.p_first))?,
        p_initial: matrix_to_cloud(t.value(o.p_initial))?,
        p_mid: refined.p_mid,
        p_final: refined.p_final,
        offsets,
        parent_ids: refined.parent_ids,
        final_point_offsets: refined.final_point_offsets,
    })
}

/// Reference completion: the scan repeated (or thinned by FPS) to `count`.
pub fn baseline_upsample(scan: &PointCloud, count: usize) -> Result<PointCloud> {
    if scan.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = scan.len();
    if count <= n {
        return Ok(scan.select(&farthest_point_sample(scan, count, 0)));
    }
    let mut out = scan.repeat_each(count / n).into_points();
    out.extend(scan.iter().take(count % n).copied());
    PointCloud::new(out)
}
