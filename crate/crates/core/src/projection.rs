//! Plane projection of penultimate activations.
//!
//! Three class templates (last-layer weight column with the bias
//! appended) span an affine plane. Activations, extended with a constant
//! `1`, are projected onto an orthonormal frame of that plane centred on
//! the templates' centroid.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::network::NetworkParams;

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    /// Ascending, distinct.
    pub class_ids: [usize; 3],
    pub templates: [Vec<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneBasis {
    pub origin: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub coords: (f64, f64),
    pub class_id: usize,
    pub split: Split,
}

/// `[W[:, k]; b[k]]` for each requested class, sorted by class id.
pub fn extract_templates(params: &NetworkParams, class_ids: [usize; 3]) -> Result<TemplateSet> {
    let k = params.num_classes();
    let mut ids = class_ids;
    ids.sort_unstable();
    if ids[0] == ids[1] || ids[1] == ids[2] {
        return Err(Error::Contract(format!("class ids {class_ids:?} are not distinct")));
    }
    if ids[2] >= k {
        return Err(Error::Contract(format!("class id {} outside [0, {k})", ids[2])));
    }
    let last = params.last_layer();
    let templates = ids.map(|c| {
        let mut t = last.weights.column(c);
        t.push(last.biases[c]);
        t
    });
    Ok(TemplateSet {
        class_ids: ids,
        templates,
    })
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Gram-Schmidt on `(t2 − t1, t3 − t1)` with one re-orthogonalization pass.
pub fn plane_basis(t: &TemplateSet) -> Result<PlaneBasis> {
    let [a, b, c] = &t.templates;
    let dim = a.len();
    if b.len() != dim || c.len() != dim || dim < 2 {
        return Err(Error::Shape("templates must share a dimension of at least 2".into()));
    }
    let d1 = sub(b, a);
    let d2 = sub(c, a);
    let scale = norm(&d1).max(norm(&d2));
    let n1 = norm(&d1);
    if !(n1 > 1e-10 * scale) || scale == 0.0 {
        return Err(Error::Degenerate("templates coincide".into()));
    }
    let u1: Vec<f64> = d1.iter().map(|v| v / n1).collect();
    let mut v2 = d2;
    for _ in 0..2 {
        let p = dot(&v2, &u1);
        axpy(&mut v2, -p, &u1);
    }
    let n2 = norm(&v2);
    if !(n2 >= 1e-10 * scale) {
        return Err(Error::Degenerate(format!(
            "templates of classes {:?} are collinear",
            t.class_ids
        )));
    }
    let u2 = v2.iter().map(|v| v / n2).collect();
    let origin = (0..dim).map(|i| (a[i] + b[i] + c[i]) / 3.0).collect();
    Ok(PlaneBasis { origin, u1, u2 })
}

/// In-plane coordinates of one bias-extended point.
pub fn project_point(extended: &[f64], basis: &PlaneBasis) -> (f64, f64) {
    let mut p1 = 0.0;
    let mut p2 = 0.0;
    for i in 0..extended.len() {
        let d = extended[i] - basis.origin[i];
        p1 += d * basis.u1[i];
        p2 += d * basis.u2[i];
    }
    (p1, p2)
}

/// Projects each activation row (bias coordinate `1` appended).
pub fn project(
    activations: &Matrix,
    class_ids: &[usize],
    split: Split,
    basis: &PlaneBasis,
) -> Result<Vec<ProjectedPoint>> {
    if activations.cols() + 1 != basis.origin.len() {
        return Err(Error::Shape(format!(
            "activations of width {} against a basis of dimension {}",
            activations.cols(),
            basis.origin.len()
        )));
    }
    if class_ids.len() != activations.rows() {
        return Err(Error::Shape(format!(
            "{} class ids for {} activations",
            class_ids.len(),
            activations.rows()
        )));
    }
    let mut ext = vec![1.0; activations.cols() + 1];
    activations
        .row_iter()
        .zip(class_ids)
        .map(|(row, &class_id)| {
            ext[..row.len()].copy_from_slice(row);
            let coords = project_point(&ext, basis);
            if !coords.0.is_finite() || !coords.1.is_finite() {
                return Err(Error::Numeric("non-finite projection".into()));
            }
            Ok(ProjectedPoint {
                coords,
                class_id,
                split,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterStats {
    pub class_id: usize,
    pub count: usize,
    pub centroid: (f64, f64),
    pub mean_distance: f64,
}

/// Per-class centroid and mean Euclidean distance to it, ordered by class.
/// Classes with fewer than two points are skipped.
pub fn cluster_tightness(points: &[ProjectedPoint]) -> Vec<ClusterStats> {
    let mut by_class: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points {
        by_class.entry(p.class_id).or_default().push(p.coords);
    }
    by_class
        .into_iter()
        .filter_map(|(class_id, pts)| {
            if pts.len() < 2 {
                log::warn!("class {class_id} has {} projected point(s); skipped", pts.len());
                return None;
            }
            let n = pts.len() as f64;
            let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let mean_distance = pts
                .iter()
                .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
                .sum::<f64>()
                / n;
            Some(ClusterStats {
                class_id,
                count: pts.len(),
                centroid: (cx, cy),
                mean_distance,
            })
        })
        .collect()
}

/// Mean over classes of the within-class mean distance.
pub fn mean_tightness(stats: &[ClusterStats]) -> f64 {
    if stats.is_empty() {
        return f64::NAN;
    }
    stats.iter().map(|s| s.mean_distance).sum::<f64>() / stats.len() as f64
}

/// Euclidean norm of each template, in class order.
pub fn template_norms(t: &TemplateSet) -> [f64; 3] {
    t.templates.each_ref().map(|v| norm(v))
}

/// CSV rows `class_id,split,p1,p2` with a header; template norms are
/// recorded in leading comment lines.
pub fn points_to_csv(points: &[ProjectedPoint], templates: Option<&TemplateSet>) -> String {
    let mut out = String::new();
    if let Some(t) = templates {
        for (c, n) in t.class_ids.iter().zip(template_norms(t)) {
            out.push_str(&format!("# template_norm class={c} norm={n}\n"));
        }
    }
    out.push_str("class_id,split,p1,p2\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.class_id,
            p.split.as_str(),
            p.coords.0,
            p.coords.1
        ));
    }
    out
}
