//! Indicatrix sampling and export, Hausdorff distance between sampled
//! hypersurfaces, and the sphere/ellipsoid deformation pipelines.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::deform::DeformationSpec;
use crate::error::{Error, Result};
use crate::norms::{Minkowski, Norm, OneForm};
use crate::phi::builtin;
use crate::sampling;

/// Points r u with F(r u) = 1 over a deterministic direction set.
#[derive(Clone, Debug)]
pub struct IndicatrixSample {
    pub points: Vec<DVector<f64>>,
    pub directions: Vec<DVector<f64>>,
    pub resolution: usize,
    /// directions where F was not positive (conic norms)
    pub skipped: usize,
}

pub fn indicatrix_sample(f: &Norm, resolution: usize) -> Result<IndicatrixSample> {
    indicatrix_sample_fn(f.dim(), resolution, 0, |y| f.eval(y))
}

/// Sampler over any scalar evaluator; the curve machinery uses this for
/// norms that exist only as radius functions.
pub fn indicatrix_sample_fn(
    dim: usize,
    resolution: usize,
    seed: u64,
    f: impl Fn(&DVector<f64>) -> Result<f64>,
) -> Result<IndicatrixSample> {
    let dirs = sampling::directions(dim, resolution, seed);
    let mut points = Vec::with_capacity(resolution);
    let mut directions = Vec::with_capacity(resolution);
    let mut skipped = 0usize;
    for u in dirs {
        match f(&u) {
            Ok(v) if v > 1e-12 => {
                points.push(u.scale(1.0 / v));
                directions.push(u);
            }
            _ => skipped += 1,
        }
    }
    Ok(IndicatrixSample {
        points,
        directions,
        resolution,
        skipped,
    })
}

/// Symmetric Hausdorff distance between two point samples; an upper-bound
/// estimator that converges with resolution.
pub fn hausdorff(a: &IndicatrixSample, b: &IndicatrixSample) -> Result<f64> {
    hausdorff_points(&a.points, &b.points)
}

pub fn hausdorff_points(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let directed = |from: &[DVector<f64>], to: &[DVector<f64>]| -> f64 {
        from.par_iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .reduce(|| 0.0, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineMode {
    /// n successive p = 1 deformations, one per coordinate axis
    Stepwise,
    /// a single p = n deformation
    Oneshot,
}

/// Deform the round sphere into the ellipsoid sum d_i^2 y_i^2 = 1 with
/// circle profiles: each step subtracts (1 - d_i^2) y_i^2 from F^2.
pub fn ellipsoid_pipeline(d: &[f64], mode: PipelineMode) -> Result<Norm> {
    let n = d.len();
    if n < 2 {
        return Err(Error::InvalidParam("need at least two semi-axes".into()));
    }
    if d.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::InvalidParam("semi-axes must lie in (0, 1]".into()));
    }
    let active: Vec<usize> = (0..n).filter(|&i| d[i] < 1.0).collect();
    let mut norm = Norm::euclidean_unit(n);
    if active.is_empty() {
        return Ok(norm);
    }
    let coeff = |i: usize| (1.0 - d[i] * d[i]).sqrt();
    match mode {
        PipelineMode::Stepwise => {
            for &i in &active {
                let beta = OneForm(DVector::from_fn(n, |r, _| {
                    if r == i {
                        coeff(i)
                    } else {
                        0.0
                    }
                }));
                let spec = DeformationSpec::new(vec![beta], builtin("ellipsoid_step", &[d[i]])?)?;
                norm = Norm::deformed(norm, spec)?;
            }
        }
        PipelineMode::Oneshot => {
            let betas: Vec<OneForm> = active
                .iter()
                .map(|&i| {
                    OneForm(DVector::from_fn(n, |r, _| {
                        if r == i {
                            coeff(i)
                        } else {
                            0.0
                        }
                    }))
                })
                .collect();
            let ds: Vec<f64> = active.iter().map(|&i| d[i]).collect();
            let spec = DeformationSpec::new(betas, builtin("multi_ellipsoid", &ds)?)?;
            norm = Norm::deformed(norm, spec)?;
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Svg,
    Obj,
}

pub fn export(sample: &IndicatrixSample, format: ExportFormat, path: &Path) -> Result<()> {
    match format {
        ExportFormat::Csv => export_csv(sample, path),
        ExportFormat::Svg => {
            if sample.points.first().map_or(0, |p| p.len()) != 2 {
                return Err(Error::InvalidParam("svg export needs dimension 2".into()));
            }
            export_svg(&[("curve".to_string(), sample.points.clone())], path)
        }
        ExportFormat::Obj => export_obj(sample, path),
    }
}

/// One point per line, comma-separated, 17 significant digits.
pub fn export_csv(sample: &IndicatrixSample, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in &sample.points {
        let fields: Vec<String> = p.iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

const SVG_SCALE: f64 = 200.0; // pixels per unit
const SVG_PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Closed polygons, origin centered, one unit mapped to 200 px.
pub fn export_svg(curves: &[(String, Vec<DVector<f64>>)], path: &Path) -> Result<()> {
    let mut extent = 1.0f64;
    for (_, pts) in curves {
        for p in pts {
            extent = extent.max(p[0].abs()).max(p[1].abs());
        }
    }
    let half = (extent * SVG_SCALE * 1.1).ceil();
    let size = 2.0 * half;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"{} {} {size} {size}\">",
        -half, -half
    )?;
    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.3},{:.3}", p[0] * SVG_SCALE, -p[1] * SVG_SCALE))
            .collect();
        writeln!(
            out,
            "<polygon fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" data-label=\"{label}\" points=\"{}\"/>",
            coords.join(" ")
        )?;
    }
    writeln!(out, "</svg>")?;
    Ok(())
}

/// Wavefront OBJ: the sampled vertices plus their convex-hull triangles.
pub fn export_obj(sample: &IndicatrixSample, path: &Path) -> Result<()> {
    if sample.points.first().map_or(0, |p| p.len()) != 3 {
        return Err(Error::InvalidParam("obj export needs dimension 3".into()));
    }
    let cloud: Vec<Vec<f64>> = sample.points.iter().map(|p| vec![p[0], p[1], p[2]]).collect();
    let hull = chull::ConvexHullWrapper::try_new(&cloud, None)
        .map_err(|e| Error::InvalidParam(format!("convex hull failed: {e:?}")))?;
    let (vertices, indices) = hull.vertices_indices();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in &vertices {
        writeln!(out, "v {:.16e} {:.16e} {:.16e}", v[0], v[1], v[2])?;
    }
    for tri in indices.chunks(3) {
        writeln!(out, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1)?;
    }
    Ok(())
}

/// Signed-turning convexity test for an angularly ordered closed polyline.
pub fn convex_polyline(points: &[DVector<f64>]) -> bool {
    let n = points.len();
    if n < 4 {
        return true;
    }
    let mut max_cross = 0.0f64;
    let mut min_cross = f64::INFINITY;
    for i in 0..n {
        let a = &points[i];
        let b = &points[(i + 1) % n];
        let c = &points[(i + 2) % n];
        let e1 = b - a;
        let e2 = c - b;
        let cross = e1[0] * e2[1] - e1[1] * e2[0];
        max_cross = max_cross.max(cross.abs());
        min_cross = min_cross.min(cross);
    }
    min_cross >= -1e-9 * max_cross
}

pub mod figures {
    //! Reproduction of the three reference figure families: planar m-root
    //! indicatrices under quadratic deformation, spatial 4-root
    //! indicatrices under (shifted) quadratic deformation, and the
    //! shifted-sphere family.

    use super::*;
    use std::path::PathBuf;

    type EvalFn = Arc<dyn Fn(&DVector<f64>) -> Result<f64> + Send + Sync>;

    /// A sampled indicatrix together with the norm evaluator behind it, so
    /// callers can re-verify F = 1 on every stored point.
    pub struct Curve {
        pub label: String,
        pub sample: IndicatrixSample,
        eval: EvalFn,
    }

    impl Curve {
        pub fn eval(&self, y: &DVector<f64>) -> Result<f64> {
            (self.eval)(y)
        }
    }

    pub struct FigureSet {
        pub files: Vec<PathBuf>,
        pub planar_curves: Vec<Curve>,
        pub spatial_curves: Vec<Curve>,
    }

    /// m-root norm in the plane for any m >= 2, with |y_i| so odd m stays
    /// defined on all of R^2.
    fn m_root_abs(m: u32) -> EvalFn {
        Arc::new(move |y: &DVector<f64>| {
            if y.norm() == 0.0 {
                return Err(Error::ZeroVector);
            }
            let m = f64::from(m);
            Ok(y.iter().map(|x| x.abs().powf(m)).sum::<f64>().powf(1.0 / m))
        })
    }

    fn deform_scalar(base: EvalFn, betas: Vec<OneForm>, phi: crate::phi::PhiExpr) -> EvalFn {
        Arc::new(move |y: &DVector<f64>| {
            let f = base(y)?;
            if f <= 0.0 {
                return Err(Error::outside_domain(y));
            }
            let s: Vec<f64> = betas.iter().map(|b| b.apply(y) / f).collect();
            Ok(f * phi.eval_scalar(&s)?)
        })
    }

    fn norm_eval(norm: Norm) -> EvalFn {
        Arc::new(move |y: &DVector<f64>| norm.eval(y))
    }

    fn curve(label: &str, dim: usize, resolution: usize, eval: EvalFn) -> Result<Curve> {
        let sample = indicatrix_sample_fn(dim, resolution, 0, |y| eval(y))?;
        Ok(Curve {
            label: label.to_string(),
            sample,
            eval,
        })
    }

    fn m_root_family(beta: &[f64], resolution: usize) -> Result<Vec<Curve>> {
        let phi = builtin("quadratic", &[])?;
        (2..=8u32)
            .map(|m| {
                let eval = if m % 2 == 0 {
                    let spec = DeformationSpec::new(
                        vec![OneForm::from_slice(beta)],
                        phi.clone(),
                    )?;
                    norm_eval(Norm::deformed(Norm::m_root(m, 2)?, spec)?)
                } else {
                    deform_scalar(
                        m_root_abs(m),
                        vec![OneForm::from_slice(beta)],
                        phi.clone(),
                    )
                };
                curve(&format!("m={m}"), 2, resolution, eval)
            })
            .collect()
    }

    pub fn generate(out_dir: &Path, resolution: usize) -> Result<FigureSet> {
        std::fs::create_dir_all(out_dir)?;
        let mut files = Vec::new();
        let mut planar_curves = Vec::new();
        let mut spatial_curves = Vec::new();

        // planar m-root family, quadratic profile, two choices of beta
        for (tag, beta) in [("a", [0.0, 0.3]), ("b", [0.3, 0.3])] {
            let curves = m_root_family(&beta, resolution)?;
            let path = out_dir.join(format!("m_root_quadratic_{tag}.svg"));
            let polylines: Vec<(String, Vec<DVector<f64>>)> = curves
                .iter()
                .map(|c| (c.label.clone(), c.sample.points.clone()))
                .collect();
            export_svg(&polylines, &path)?;
            files.push(path);
            planar_curves.extend(curves);
        }

        // spatial 4-root indicatrix, quadratic and shifted quadratic
        let spatial_res = resolution.max(512) * 4;
        let base = Norm::m_root(4, 3)?;
        let quad = DeformationSpec::new(
            vec![OneForm::from_slice(&[0.0, 0.0, 0.3])],
            builtin("quadratic", &[])?,
        )?;
        let c = curve(
            "quadratic",
            3,
            spatial_res,
            norm_eval(Norm::deformed(base.clone(), quad)?),
        )?;
        let path = out_dir.join("four_root_quadratic.obj");
        export_obj(&c.sample, &path)?;
        files.push(path);
        spatial_curves.push(c);

        let shifted = DeformationSpec::new(
            vec![
                OneForm::from_slice(&[0.0, 0.3, 0.0]),
                OneForm::from_slice(&[0.0, 0.0, 0.3]),
            ],
            builtin("shifted_quadratic", &[])?,
        )?;
        let c = curve(
            "shifted quadratic",
            3,
            spatial_res,
            norm_eval(Norm::deformed(base, shifted)?),
        )?;
        let path = out_dir.join("four_root_shifted_quadratic.obj");
        export_obj(&c.sample, &path)?;
        files.push(path);
        spatial_curves.push(c);

        // shifted-sphere family, shifts d = 0.0 .. 0.9
        let mut shift_curves = Vec::new();
        for k in 0..10u32 {
            let d = f64::from(k) / 10.0;
            let eval = if d == 0.0 {
                // zero shift has beta = 0; the base circle directly
                norm_eval(Norm::euclidean_unit(2))
            } else {
                let spec = DeformationSpec::new(
                    vec![OneForm::from_slice(&[d, 0.0])],
                    builtin("shifted_sphere", &[d])?,
                )?;
                norm_eval(Norm::deformed(Norm::euclidean_unit(2), spec)?)
            };
            shift_curves.push(curve(&format!("d={d:.1}"), 2, resolution, eval)?);
        }
        let path = out_dir.join("shifted_sphere.svg");
        let polylines: Vec<(String, Vec<DVector<f64>>)> = shift_curves
            .iter()
            .map(|c| (c.label.clone(), c.sample.points.clone()))
            .collect();
        export_svg(&polylines, &path)?;
        files.push(path);
        planar_curves.extend(shift_curves);

        Ok(FigureSet {
            files,
            planar_curves,
            spatial_curves,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn euclidean_sample_lies_on_sphere() {
        let f = Norm::euclidean_unit(3);
        let s = indicatrix_sample(&f, 500).unwrap();
        assert_eq!(s.points.len(), 500);
        assert_eq!(s.skipped, 0);
        for p in &s.points {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_sphere_point_on_axis() {
        let spec = DeformationSpec::new(
            vec![OneForm::from_slice(&[0.5, 0.0])],
            builtin("shifted_sphere", &[0.5]).unwrap(),
        )
        .unwrap();
        let f = Norm::deformed(Norm::euclidean_unit(2), spec).unwrap();
        let s = indicatrix_sample(&f, 360).unwrap();
        // direction e1 is the first planar sample
        assert_relative_eq!(s.points[0][0], 1.5, max_relative = 1e-12);
        assert_relative_eq!(s.points[0][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn m_root_diagonal_radius() {
        let f = Norm::m_root(4, 2).unwrap();
        let u = DVector::from_row_slice(&[1.0, 1.0]).scale(1.0 / 2f64.sqrt());
        let r = f.indicatrix_radius(&u).unwrap();
        let c = r / 2f64.sqrt();
        assert_relative_eq!(2.0 * c.powi(4), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn kropina_sample_reports_skipped_half_plane() {
        let spec = DeformationSpec::new(
            vec![OneForm::from_slice(&[1.0, 0.0])],
            builtin("kropina", &[1.0]).unwrap(),
        )
        .unwrap();
        let f = Norm::deformed(Norm::euclidean_unit(2), spec).unwrap();
        let s = indicatrix_sample(&f, 360).unwrap();
        assert!(s.skipped >= 170, "skipped {}", s.skipped);
        assert!(!s.points.is_empty());
    }

    #[test]
    fn hausdorff_analytic_circles() {
        let unit = indicatrix_sample(&Norm::euclidean_unit(2), 4096).unwrap();
        assert_eq!(hausdorff(&unit, &unit).unwrap(), 0.0);

        let scaled: Vec<DVector<f64>> = unit.points.iter().map(|p| p.scale(1.1)).collect();
        let d = hausdorff_points(&unit.points, &scaled).unwrap();
        assert!((d - 0.1).abs() < 2e-3, "d = {d}");

        let shift = DVector::from_row_slice(&[0.5, 0.0]);
        let shifted: Vec<DVector<f64>> = unit.points.iter().map(|p| p + &shift).collect();
        let d = hausdorff_points(&unit.points, &shifted).unwrap();
        assert!((d - 0.5).abs() < 2e-3, "d = {d}");
    }

    #[test]
    fn hausdorff_symmetric_triangle() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ellipse = |a: f64, b: f64| -> Vec<DVector<f64>> {
            (0..256)
                .map(|i| {
                    let t = 2.0 * std::f64::consts::PI * i as f64 / 256.0;
                    DVector::from_row_slice(&[a * t.cos(), b * t.sin()])
                })
                .collect()
        };
        for _ in 0..10 {
            let sets: Vec<Vec<DVector<f64>>> = (0..3)
                .map(|_| ellipse(rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)))
                .collect();
            let dab = hausdorff_points(&sets[0], &sets[1]).unwrap();
            let dba = hausdorff_points(&sets[1], &sets[0]).unwrap();
            let dbc = hausdorff_points(&sets[1], &sets[2]).unwrap();
            let dac = hausdorff_points(&sets[0], &sets[2]).unwrap();
            assert_eq!(dab, dba);
            assert!(dac <= dab + dbc + 1e-9);
        }
    }

    #[test]
    fn hausdorff_empty_rejected() {
        assert!(matches!(
            hausdorff_points(&[], &[DVector::zeros(2)]),
            Err(Error::EmptySample)
        ));
    }

    #[test]
    fn ellipsoid_pipeline_degenerate_identity() {
        let f = ellipsoid_pipeline(&[1.0, 1.0, 1.0], PipelineMode::Stepwise).unwrap();
        let y = DVector::from_row_slice(&[0.3, -0.4, 1.2]);
        assert_relative_eq!(f.eval(&y).unwrap(), y.norm(), max_relative = 1e-14);
    }

    #[test]
    fn ellipsoid_pipeline_modes_agree() {
        let d = [0.5, 0.8, 0.9];
        let step = ellipsoid_pipeline(&d, PipelineMode::Stepwise).unwrap();
        let shot = ellipsoid_pipeline(&d, PipelineMode::Oneshot).unwrap();
        for u in sampling::directions(3, 200, 3) {
            let a = step.eval(&u).unwrap();
            let b = shot.eval(&u).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-10);
            // analytic ellipsoid norm
            let expected = (0..3).map(|i| (d[i] * u[i]).powi(2)).sum::<f64>().sqrt();
            assert_relative_eq!(a, expected, max_relative = 1e-10);
        }
    }

    #[test]
    fn ellipsoid_pipeline_rejects_bad_axes() {
        assert!(ellipsoid_pipeline(&[0.5, 1.2], PipelineMode::Stepwise).is_err());
        assert!(ellipsoid_pipeline(&[0.0, 0.5], PipelineMode::Oneshot).is_err());
    }

    #[test]
    fn csv_and_svg_export() {
        let dir = tempfile::tempdir().unwrap();
        let s = indicatrix_sample(&Norm::euclidean_unit(2), 360).unwrap();
        let csv = dir.path().join("circle.csv");
        export_csv(&s, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 360);
        let first: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        assert_eq!(first.len(), 2);
        assert_relative_eq!(first[0].parse::<f64>().unwrap(), 1.0, max_relative = 1e-12);

        let svg = dir.path().join("circle.svg");
        export(&s, ExportFormat::Svg, &svg).unwrap();
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.contains("<polygon"));
        assert_eq!(
            text.split("points=\"").nth(1).unwrap().split('"').next().unwrap()
                .split(' ')
                .count(),
            360
        );
    }

    #[test]
    fn obj_export_has_hull_faces() {
        let dir = tempfile::tempdir().unwrap();
        let s = indicatrix_sample(&Norm::euclidean_unit(3), 400).unwrap();
        let obj = dir.path().join("sphere.obj");
        export_obj(&s, &obj).unwrap();
        let text = std::fs::read_to_string(&obj).unwrap();
        let v = text.lines().filter(|l| l.starts_with("v ")).count();
        let f = text.lines().filter(|l| l.starts_with("f ")).count();
        assert!(v > 300);
        // closed triangulated surface: F = 2V - 4
        assert_eq!(f, 2 * v - 4);
    }

    #[test]
    fn convexity_test() {
        let circle = indicatrix_sample(&Norm::euclidean_unit(2), 256).unwrap();
        assert!(convex_polyline(&circle.points));
        let mut dented = circle.points.clone();
        dented[40] = dented[40].scale(0.5);
        assert!(!convex_polyline(&dented));
    }

    #[test]
    fn figures_generate_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let set = figures::generate(dir.path(), 180).unwrap();
        assert_eq!(set.files.len(), 5);
        for f in &set.files {
            assert!(f.exists(), "{f:?}");
        }
        // 7 + 7 m-root curves plus 10 shifted circles
        assert_eq!(set.planar_curves.len(), 24);
        assert_eq!(set.spatial_curves.len(), 2);
        for c in set.planar_curves.iter().chain(&set.spatial_curves) {
            for p in &c.sample.points {
                assert_relative_eq!(c.eval(p).unwrap(), 1.0, max_relative = 1e-10);
            }
        }
    }
}
